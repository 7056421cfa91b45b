//! Window datasets, normalization, training and the two learned rollouts.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{quadratic_form, SparseMatrix};
use crate::nn::{adam_step, AdamConfig, AdamState, Graph, Tensor};
use crate::splitting::{SplitState, Stepper, Trajectory};
use crate::transformer::TransformerModel;

pub const STD_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    PredictU1,
    PredictU2,
    PredictBoth,
    Assimilation,
}

impl Strategy {
    /// (source, target) sequences: the model reads the source and predicts the target.
    pub fn roles(self, traj: &Trajectory) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        match self {
            Strategy::PredictU2 => (traj.u1(), traj.u2()),
            _ => (traj.u2(), traj.u1()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowShape {
    pub n_e: usize,
    pub n_d: usize,
}

impl WindowShape {
    /// Smallest and largest anchor whose window fits in `len` states.
    pub fn anchors(self, len: usize) -> Option<std::ops::RangeInclusive<usize>> {
        let (lo, need) = (self.n_e.checked_sub(1)?, self.n_e.max(1) + self.n_d);
        (self.n_d > 0 && len >= need).then(|| lo..=len - 1 - self.n_d)
    }
}

/// One teacher-forced training example anchored at step `anchor`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub anchor: usize,
    /// Source states at `anchor, anchor-1, ...` (newest first).
    pub encoder: Vec<DVector<f64>>,
    /// Target states at `anchor, anchor+1, ...`.
    pub decoder: Vec<DVector<f64>>,
    /// Target states at `anchor+1, anchor+2, ...`.
    pub target: Vec<DVector<f64>>,
}

fn encoder_window(source: &[DVector<f64>], anchor: usize, n_e: usize) -> Vec<DVector<f64>> {
    (0..n_e).map(|i| source[anchor - i].clone()).collect()
}

/// All windows inside the first `m` states of the two sequences.
pub fn make_windows_from(
    source: &[DVector<f64>],
    target: &[DVector<f64>],
    m: usize,
    shape: WindowShape,
) -> Result<Vec<WindowSample>> {
    if m > source.len() || m > target.len() {
        return Err(Error::InvalidArgument(format!(
            "prefix length {m} exceeds sequence lengths {}/{}",
            source.len(),
            target.len()
        )));
    }
    let anchors = shape.anchors(m).ok_or_else(|| {
        Error::InvalidArgument(format!(
            "prefix of {m} states is too short for n_e = {}, n_d = {}",
            shape.n_e, shape.n_d
        ))
    })?;
    Ok(anchors
        .map(|a| WindowSample {
            anchor: a,
            encoder: encoder_window(source, a, shape.n_e),
            decoder: target[a..a + shape.n_d].to_vec(),
            target: target[a + 1..=a + shape.n_d].to_vec(),
        })
        .collect())
}

pub fn make_windows(traj: &Trajectory, m: usize, shape: WindowShape, strategy: Strategy) -> Result<Vec<WindowSample>> {
    let (source, target) = strategy.roles(traj);
    make_windows_from(&source, &target, m, shape)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

impl FeatureStats {
    /// Population mean and floored standard deviation per coordinate.
    pub fn fit(states: &[DVector<f64>]) -> Result<Self> {
        let first = states
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot fit normalization on no states".into()))?;
        let count = states.len() as f64;
        let mut mean = DVector::zeros(first.len());
        for s in states {
            mean += s;
        }
        mean /= count;
        let mut var = DVector::<f64>::zeros(first.len());
        for s in states {
            let d = s - &mean;
            var += d.component_mul(&d);
        }
        let std = (var / count).map(|v| v.sqrt().max(STD_FLOOR));
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, v: &DVector<f64>) -> DVector<f64> {
        (v - &self.mean).component_div(&self.std)
    }

    pub fn denormalize(&self, v: &DVector<f64>) -> DVector<f64> {
        v.component_mul(&self.std) + &self.mean
    }
}

/// Z-score statistics of the source and target sequences on the training prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub source: FeatureStats,
    pub target: FeatureStats,
}

impl NormalizationStats {
    pub fn fit(source: &[DVector<f64>], target: &[DVector<f64>], m: usize) -> Result<Self> {
        if m > source.len() || m > target.len() {
            return Err(Error::InvalidArgument(format!("prefix length {m} exceeds the sequences")));
        }
        Ok(Self {
            source: FeatureStats::fit(&source[..m])?,
            target: FeatureStats::fit(&target[..m])?,
        })
    }
}

fn stack(seqs: &[&[DVector<f64>]], stats: &FeatureStats) -> Result<Tensor> {
    let (batch, len, dim) = (seqs.len(), seqs.first().map_or(0, |s| s.len()), stats.dim());
    let mut data = Vec::with_capacity(batch * len * dim);
    for seq in seqs {
        if seq.len() != len {
            return Err(Error::Dimension("ragged window batch".into()));
        }
        for v in seq.iter() {
            if v.len() != dim {
                return Err(Error::Dimension(format!("state of length {} where {dim} expected", v.len())));
            }
            data.extend(stats.normalize(v).iter());
        }
    }
    Tensor::new(vec![batch, len, dim], data)
}

/// Normalized (source, decoder input, target) batch tensors.
pub fn batch_tensors(samples: &[WindowSample], stats: &NormalizationStats) -> Result<(Tensor, Tensor, Tensor)> {
    let enc: Vec<&[DVector<f64>]> = samples.iter().map(|s| s.encoder.as_slice()).collect();
    let dec: Vec<&[DVector<f64>]> = samples.iter().map(|s| s.decoder.as_slice()).collect();
    let tgt: Vec<&[DVector<f64>]> = samples.iter().map(|s| s.target.as_slice()).collect();
    Ok((stack(&enc, &stats.source)?, stack(&dec, &stats.target)?, stack(&tgt, &stats.target)?))
}

fn default_cosine() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default = "default_cosine")]
    pub cosine: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 3000,
            adam: AdamConfig::default(),
            cosine: true,
        }
    }
}

/// Learning rate at `epoch` under the (optional) cosine decay to zero.
pub fn scheduled_lr(cfg: &TrainingConfig, epoch: usize) -> f64 {
    if cfg.cosine && cfg.epochs > 0 {
        cfg.adam.lr * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / cfg.epochs as f64).cos())
    } else {
        cfg.adam.lr
    }
}

/// Mean squared error of the model on a prepared batch, without recording gradients.
pub fn evaluate_loss(model: &TransformerModel, src: &Tensor, dec: &Tensor, tgt: &Tensor) -> Result<f64> {
    let pred = model.predict(src, dec)?;
    crate::transformer::mse_loss(&pred, tgt)
}

/// Full-batch Adam on the whole window set. Returns the loss recorded at every epoch,
/// measured before that epoch's update.
pub fn train(
    model: &mut TransformerModel,
    samples: &[WindowSample],
    stats: &NormalizationStats,
    cfg: &TrainingConfig,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one window".into()));
    }
    let (src, dec, tgt) = batch_tensors(samples, stats)?;
    let mut adam = AdamState::new(&model.store, cfg.adam.clone());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut g = Graph::new();
        let s = g.input(src.clone());
        let d = g.input(dec.clone());
        let t = g.input(tgt.clone());
        let out = model.forward(&mut g, &model.store, s, d)?;
        let loss = g.mse(out, t)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                context: "training loss".into(),
                step: epoch,
            });
        }
        history.push(value);
        g.backward(loss, &mut model.store)?;
        adam.config.lr = scheduled_lr(cfg, epoch);
        adam_step(&mut model.store, &mut adam);
        if epoch % 250 == 0 {
            log::debug!("epoch {epoch}: loss {value:.3e}");
        }
    }
    Ok(history)
}

/// Anything that maps a source window and a decoder prefix to the next `n_d` target states.
pub trait Predictor {
    fn shape(&self) -> WindowShape;

    /// `encoder` is newest-first source history ending at `anchor`; `decoder` starts
    /// with the target state at `anchor`. Returns predictions for `anchor+1..`.
    fn predict(&mut self, anchor: usize, encoder: &[DVector<f64>], decoder: &[DVector<f64>]) -> Result<Vec<DVector<f64>>>;
}

pub struct NeuralPredictor<'a> {
    pub model: &'a TransformerModel,
    pub stats: &'a NormalizationStats,
}

impl Predictor for NeuralPredictor<'_> {
    fn shape(&self) -> WindowShape {
        WindowShape {
            n_e: self.model.config.n_e,
            n_d: self.model.config.n_d,
        }
    }

    fn predict(&mut self, _anchor: usize, encoder: &[DVector<f64>], decoder: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let src = stack(&[encoder], &self.stats.source)?;
        let dec = stack(&[decoder], &self.stats.target)?;
        let out = self.model.predict(&src, &dec)?;
        let dim = self.stats.target.dim();
        Ok(out
            .data()
            .chunks(dim)
            .map(|row| self.stats.target.denormalize(&DVector::from_column_slice(row)))
            .collect())
    }
}

/// Test double that reads the answers off a known target sequence.
pub struct OraclePredictor {
    pub target: Vec<DVector<f64>>,
    pub shape: WindowShape,
}

impl Predictor for OraclePredictor {
    fn shape(&self) -> WindowShape {
        self.shape
    }

    fn predict(&mut self, anchor: usize, _encoder: &[DVector<f64>], _decoder: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let last = self.target.len().checked_sub(1).ok_or_else(|| Error::InvalidArgument("empty oracle".into()))?;
        Ok((1..=self.shape.n_d).map(|i| self.target[(anchor + i).min(last)].clone()).collect())
    }
}

/// Autoregressive driver for one predictor: keeps the predicted future ("carets")
/// from the previous evaluation to fill the decoder prefix.
struct Autoregressor<'p> {
    predictor: &'p mut dyn Predictor,
    shape: WindowShape,
    carets: Vec<DVector<f64>>,
}

impl<'p> Autoregressor<'p> {
    /// Seed the carets with one evaluation on the last window that lies in the prefix.
    fn new(predictor: &'p mut dyn Predictor, source: &[DVector<f64>], target: &[DVector<f64>], m: usize) -> Result<Self> {
        let shape = predictor.shape();
        let anchors = shape.anchors(m).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "prefix of {m} states is too short for n_e = {}, n_d = {}",
                shape.n_e, shape.n_d
            ))
        })?;
        let mut carets = Vec::new();
        if shape.n_d > 1 {
            let a = *anchors.end();
            let out = predictor.predict(a, &encoder_window(source, a, shape.n_e), &target[a..a + shape.n_d])?;
            // The seed window's outputs end at step m, the first step to be predicted.
            carets = out[m - 1 - a..].to_vec();
        }
        Ok(Self {
            predictor,
            shape,
            carets,
        })
    }

    fn advance(&mut self, source: &[DVector<f64>], target: &[DVector<f64>], n: usize) -> Result<DVector<f64>> {
        let encoder = encoder_window(source, n, self.shape.n_e);
        let mut decoder = Vec::with_capacity(self.shape.n_d);
        decoder.push(target[n].clone());
        for i in 1..self.shape.n_d {
            let fill = self.carets.get(i - 1).or(self.carets.last()).unwrap_or(&target[n]);
            decoder.push(fill.clone());
        }
        let mut out = self.predictor.predict(n, &encoder, &decoder)?;
        if out.len() != self.shape.n_d {
            return Err(Error::Dimension(format!("predictor returned {} states, expected {}", out.len(), self.shape.n_d)));
        }
        self.carets = out.split_off(1);
        let next = out.pop().expect("n_d >= 1");
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "prediction".into(),
                step: n + 1,
            });
        }
        Ok(next)
    }
}

/// Which half of each step is replaced by a learned predictor.
pub enum Surrogate<'p> {
    /// Predict the sensitive part, compute the robust part with the explicit equation.
    U1(&'p mut dyn Predictor),
    /// Compute the sensitive part with the implicit equation, predict the robust part.
    U2(&'p mut dyn Predictor),
    /// Predict both parts with independent models. `u1` reads u₂, `u2` reads u₁.
    Both {
        u1: &'p mut dyn Predictor,
        u2: &'p mut dyn Predictor,
    },
}

fn check_rollout(prefix_len: usize, m: usize, total: usize) -> Result<()> {
    if m < 2 || m > prefix_len {
        return Err(Error::InvalidArgument(format!(
            "need 2 <= M <= prefix length, got M = {m} with {prefix_len} known states"
        )));
    }
    if total < m {
        return Err(Error::InvalidArgument(format!("total length {total} is shorter than the prefix {m}")));
    }
    Ok(())
}

/// Extend the first `m` states of `prefix` to `total` states, replacing part of each
/// step of `stepper` by a predictor.
pub fn hybrid_rollout(
    surrogate: Surrogate<'_>,
    stepper: &mut dyn Stepper,
    prefix: &Trajectory,
    m: usize,
    total: usize,
) -> Result<Trajectory> {
    check_rollout(prefix.len(), m, total)?;
    let mut u1 = prefix.u1()[..m].to_vec();
    let mut u2 = prefix.u2()[..m].to_vec();
    let mut states: Vec<SplitState> = prefix.states[..m].to_vec();
    let (mut p1, mut p2) = match surrogate {
        Surrogate::U1(p) => (Some(Autoregressor::new(p, &u2, &u1, m)?), None),
        Surrogate::U2(p) => (None, Some(Autoregressor::new(p, &u1, &u2, m)?)),
        Surrogate::Both { u1: a, u2: b } => (
            Some(Autoregressor::new(a, &u2, &u1, m)?),
            Some(Autoregressor::new(b, &u1, &u2, m)?),
        ),
    };
    for n in m - 1..total - 1 {
        let (cur, prev) = (&states[n], &states[n.saturating_sub(1)]);
        let next1 = match p1.as_mut() {
            Some(p) => p.advance(&u2, &u1, n)?,
            None => stepper.first_equation(cur, prev)?,
        };
        let next2 = match p2.as_mut() {
            Some(p) => p.advance(&u1, &u2, n)?,
            None => stepper.second_equation(cur, prev, &next1)?,
        };
        let state = SplitState {
            u1: next1,
            u2: next2,
            step: n + 1,
        };
        if !state.is_finite() {
            return Err(Error::NonFinite {
                context: "hybrid rollout state".into(),
                step: n + 1,
            });
        }
        u1.push(state.u1.clone());
        u2.push(state.u2.clone());
        states.push(state);
    }
    Ok(Trajectory::new(states, prefix.tau, prefix.omega))
}

/// Predict the sensitive part from the observed robust sequence `observed` (all `total`
/// states) and the first `m` sensitive states. The result pairs each predicted u₁ⁿ
/// with the observation, so reconstruction yields u₁ⁿ + ũ₂ⁿ.
pub fn assimilation_rollout(
    predictor: &mut dyn Predictor,
    observed: &[DVector<f64>],
    u1_prefix: &[DVector<f64>],
    m: usize,
    total: usize,
    tau: f64,
    omega: f64,
) -> Result<Trajectory> {
    check_rollout(u1_prefix.len(), m, total)?;
    if observed.len() < total {
        return Err(Error::InvalidArgument(format!(
            "observation covers {} states, rollout needs {total}",
            observed.len()
        )));
    }
    let mut u1 = u1_prefix[..m].to_vec();
    let mut driver = Autoregressor::new(predictor, observed, &u1, m)?;
    for n in m - 1..total - 1 {
        let next = driver.advance(observed, &u1, n)?;
        u1.push(next);
    }
    let states = u1
        .into_iter()
        .zip(observed)
        .enumerate()
        .map(|(step, (u1, u2))| SplitState {
            u1,
            u2: u2.clone(),
            step,
        })
        .collect();
    Ok(Trajectory::new(states, tau, omega))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepError {
    pub step: usize,
    pub rel_l2: Option<f64>,
    pub rel_energy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// First step counted in the averages.
    pub first_predicted: usize,
    pub steps: Vec<StepError>,
}

fn relative(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| (num.max(0.0) / den).sqrt())
}

impl ErrorReport {
    fn stat(&self, pick: impl Fn(&StepError) -> Option<f64>, fold: impl Fn(&[f64]) -> f64) -> Option<f64> {
        let vals: Vec<f64> = self
            .steps
            .iter()
            .filter(|s| s.step >= self.first_predicted)
            .filter_map(pick)
            .collect();
        (!vals.is_empty()).then(|| fold(&vals))
    }

    pub fn mean_l2(&self) -> Option<f64> {
        self.stat(|s| s.rel_l2, |v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_energy(&self) -> Option<f64> {
        self.stat(|s| s.rel_energy, |v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn max_l2(&self) -> Option<f64> {
        self.stat(|s| s.rel_l2, |v| v.iter().copied().fold(f64::MIN, f64::max))
    }

    pub fn max_energy(&self) -> Option<f64> {
        self.stat(|s| s.rel_energy, |v| v.iter().copied().fold(f64::MIN, f64::max))
    }

    pub fn to_csv(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.17e}"));
        let mut out = String::from("step,rel_l2,rel_energy\n");
        for s in &self.steps {
            out.push_str(&format!("{},{},{}\n", s.step, cell(s.rel_l2), cell(s.rel_energy)));
        }
        out
    }
}

/// Relative errors of fine-scale `candidate` against `reference`, in the mass norm and
/// the energy norm of `energy`. Steps whose reference norm vanishes are left undefined.
pub fn error_report(
    candidate: &[DVector<f64>],
    reference: &[DVector<f64>],
    first_predicted: usize,
    mass: &SparseMatrix,
    energy: &SparseMatrix,
) -> Result<ErrorReport> {
    if candidate.len() != reference.len() {
        return Err(Error::Dimension(format!(
            "candidate has {} states, reference {}",
            candidate.len(),
            reference.len()
        )));
    }
    let mut steps = Vec::with_capacity(candidate.len());
    for (step, (c, r)) in candidate.iter().zip(reference).enumerate() {
        if c.len() != r.len() || c.len() != mass.nrows() || c.len() != energy.nrows() {
            return Err(Error::Dimension(format!("state {step} has mismatched length")));
        }
        let d = c - r;
        steps.push(StepError {
            step,
            rel_l2: relative(quadratic_form(mass, &d), quadratic_form(mass, r)),
            rel_energy: relative(quadratic_form(energy, &d), quadratic_form(energy, r)),
        });
    }
    Ok(ErrorReport {
        first_predicted,
        steps,
    })
}
