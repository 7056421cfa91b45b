//! Experiment configuration and the runner behind each command verb.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fem::{
    assemble_mass, assemble_stiffness, generate_channel_permeability, rasterize, FineMesh, FracRect,
    PermeabilityField, SparseMatrix, DEFAULT_LAYOUT,
};
use crate::io;
use crate::multiscale::{
    build_decomposition, explicit_stability_indicator, largest_generalized_eigenvalue, project_stiffness, project_system,
    CoarseMesh, ProjectedSystem, SpaceDecomposition,
};
use crate::nn::AdamConfig;
use crate::pipeline::{
    assimilation_rollout, error_report, hybrid_rollout, make_windows_from, train, ErrorReport, NeuralPredictor,
    NormalizationStats, OraclePredictor, Predictor, Strategy, Surrogate, TrainingConfig, WindowShape,
};
use crate::plot::{LinePlot, Series};
use crate::splitting::{
    backward_euler_reference, project_initial, run_trajectory, FinePhysics, LinearStepper, NewtonConfig,
    NonlinearStepper, SolverConfig, Stepper, Trajectory, total_mass,
};
use crate::transformer::{TransformerConfig, TransformerModel};

pub const SPLITTING_FILE: &str = "splitting.traj";
pub const REFERENCE_FILE: &str = "reference.traj";
pub const OBSERVATION_FILE: &str = "observation.traj";
pub const DECOMPOSITION_FILE: &str = "decomposition.bin";
pub const PERMEABILITY_FILE: &str = "permeability.csv";
pub const SIMULATE_SUMMARY: &str = "simulate.json";
pub const MODEL_FILE: &str = "model.ckpt";
pub const MODEL_U2_FILE: &str = "model_u2.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const ROLLOUT_FILE: &str = "rollout.traj";
pub const ROLLOUT_U1_ERRORS: &str = "rollout_u1_errors.csv";
pub const ROLLOUT_U2_ERRORS: &str = "rollout_u2_errors.csv";
pub const ROLLOUT_FINE_ERRORS: &str = "rollout_fine_errors.csv";
pub const ROLLOUT_SUMMARY: &str = "rollout.json";
pub const ASSIM_FILE: &str = "assimilation.traj";
pub const ASSIM_U1_ERRORS: &str = "assimilation_u1_errors.csv";
pub const ASSIM_COMBINED_ERRORS: &str = "assimilation_combined_errors.csv";
pub const ASSIM_SUMMARY: &str = "assimilation.json";
pub const ASSIM_TABLE: &str = "assimilation_table.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Problem {
    #[default]
    Linear,
    Nonlinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeCounts {
    /// Local spectral modes per coarse neighborhood in the sensitive space.
    pub sensitive: usize,
    /// Bubble modes per coarse cell in the robust space.
    pub robust: usize,
}

impl Default for ModeCounts {
    fn default() -> Self {
        Self { sensitive: 3, robust: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermeabilitySpec {
    pub background: f64,
    pub contrast: f64,
    pub channels: Vec<FracRect>,
}

impl Default for PermeabilitySpec {
    fn default() -> Self {
        Self {
            background: 1.0,
            contrast: 1e4,
            channels: DEFAULT_LAYOUT.to_vec(),
        }
    }
}

impl PermeabilitySpec {
    pub fn build(&self, n: usize) -> Result<PermeabilityField> {
        generate_channel_permeability(n, self.background, self.contrast, &rasterize(&self.channels, n))
    }

    pub fn without_channel(&self, index: usize) -> Result<Self> {
        if index >= self.channels.len() {
            return Err(Error::config(
                "assimilation.removed_channel",
                format!("layout has {} channels, cannot remove #{index}", self.channels.len()),
            ));
        }
        let mut out = self.clone();
        out.channels.remove(index);
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    /// `exp(-|x - center|² / width)`.
    Gaussian { center: [f64; 2], width: f64 },
    Constant { value: f64 },
}

impl Default for InitialCondition {
    fn default() -> Self {
        InitialCondition::Gaussian {
            center: [0.5, 0.5],
            width: 0.01,
        }
    }
}

impl InitialCondition {
    pub fn sample(&self, mesh: &FineMesh) -> DVector<f64> {
        match *self {
            InitialCondition::Gaussian { center, width } => {
                mesh.interpolate(|x, y| (-((x - center[0]).powi(2) + (y - center[1]).powi(2)) / width).exp())
            }
            InitialCondition::Constant { value } => mesh.interpolate(|_, _| value),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoStep {
    /// τ = 1 / λ_max(A₂₂, M₂₂).
    Stability,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TimeStep {
    Fixed(f64),
    Auto(AutoStep),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeConfig {
    pub tau: TimeStep,
    pub n_steps: usize,
    pub omega: f64,
}

impl Default for TimeConfig {
    fn default() -> Self {
        Self {
            tau: TimeStep::Fixed(2e-8),
            n_steps: 500,
            omega: 0.5,
        }
    }
}

/// Transformer shape; feature widths come from the decomposition and the seed from
/// the experiment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub d_ff: usize,
    pub n_e: usize,
    pub n_d: usize,
    pub positional_encoding: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        let t = TransformerConfig::default();
        Self {
            d_model: t.d_model,
            heads: t.heads,
            encoder_layers: t.encoder_layers,
            decoder_layers: t.decoder_layers,
            d_ff: t.d_ff,
            n_e: t.n_e,
            n_d: t.n_d,
            positional_encoding: t.positional_encoding,
        }
    }
}

impl ModelSpec {
    pub fn window(&self) -> WindowShape {
        WindowShape {
            n_e: self.n_e,
            n_d: self.n_d,
        }
    }

    pub fn config(&self, source_dim: usize, target_dim: usize, seed: u64) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_model,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            d_ff: self.d_ff,
            n_e: self.n_e,
            n_d: self.n_d,
            source_dim,
            target_dim,
            seed,
            positional_encoding: self.positional_encoding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ObservationSource {
    /// Run the splitting scheme under κ̃ on the target spaces.
    #[default]
    Compute,
    /// Read `observation.traj` from the output directory.
    Load,
    /// Roll out a robust-part model (`model_u2.ckpt`) under κ̃.
    Predict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssimilationConfig {
    pub observation: ObservationSource,
    /// Channel dropped from κ to form κ̃ when no explicit field is given.
    pub removed_channel: usize,
    #[serde(default)]
    pub permeability: Option<PermeabilitySpec>,
}

impl Default for AssimilationConfig {
    fn default() -> Self {
        Self {
            observation: ObservationSource::Compute,
            removed_channel: 1,
            permeability: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub fine_n: usize,
    pub coarse_n: usize,
    pub modes: ModeCounts,
    pub permeability: PermeabilitySpec,
    pub initial: InitialCondition,
    pub time: TimeConfig,
    pub newton: NewtonConfig,
    /// States of the splitting trajectory available for training.
    pub training_prefix: usize,
    pub model: ModelSpec,
    pub training: TrainingConfig,
    pub strategy: Strategy,
    pub assimilation: AssimilationConfig,
    pub seed: u64,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: Problem::Linear,
            fine_n: 40,
            coarse_n: 8,
            modes: ModeCounts::default(),
            permeability: PermeabilitySpec::default(),
            initial: InitialCondition::default(),
            time: TimeConfig::default(),
            newton: NewtonConfig::default(),
            training_prefix: 50,
            model: ModelSpec::default(),
            training: TrainingConfig {
                epochs: 1500,
                adam: AdamConfig::default(),
                cosine: true,
            },
            strategy: Strategy::PredictU1,
            assimilation: AssimilationConfig::default(),
            seed: 0,
            output: PathBuf::from("runs/desk"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::config(format!("line {}", e.line()), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(path.display().to_string(), format!("cannot read config: {e}")))?;
        Self::from_json(&text)
    }

    /// Override one field by dotted path, e.g. `time.n_steps=200` or `model.d_model=32`.
    /// The value is parsed as JSON and falls back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "expected key=value"))?;
        let value: serde_json::Value =
            serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = match slot {
                serde_json::Value::Object(map) => map
                    .get_mut(part)
                    .ok_or_else(|| Error::config(key, format!("unknown field `{part}`")))?,
                serde_json::Value::Array(items) => {
                    let idx: usize = part.parse().map_err(|_| Error::config(key, format!("`{part}` is not an index")))?;
                    items
                        .get_mut(idx)
                        .ok_or_else(|| Error::config(key, format!("index {idx} out of range")))?
                }
                _ => return Err(Error::config(key, format!("cannot descend into `{part}`"))),
            };
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::config(key, e.to_string()))?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form with the output directory blanked.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output = PathBuf::new();
        let text = serde_json::to_string(&canonical).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.fine_n == 0 {
            return Err(Error::config("fine_n", "must be at least 1"));
        }
        if self.coarse_n == 0 || self.fine_n % self.coarse_n != 0 {
            return Err(Error::config(
                "coarse_n",
                format!("must divide fine_n = {}, got {}", self.fine_n, self.coarse_n),
            ));
        }
        if self.modes.sensitive == 0 {
            return Err(Error::config("modes.sensitive", "must be at least 1"));
        }
        if self.modes.robust == 0 {
            return Err(Error::config("modes.robust", "must be at least 1"));
        }
        let p = &self.permeability;
        if !(p.background > 0.0 && p.background.is_finite()) {
            return Err(Error::config("permeability.background", "must be positive"));
        }
        if !(p.contrast >= 1.0 && p.contrast.is_finite()) {
            return Err(Error::config("permeability.contrast", "must be at least 1"));
        }
        if let TimeStep::Fixed(tau) = self.time.tau {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::config("time.tau", format!("must be positive, got {tau}")));
            }
        }
        if !(0.0..=1.0).contains(&self.time.omega) {
            return Err(Error::config("time.omega", "must lie in [0, 1]"));
        }
        self.model
            .config(1, 1, self.seed)
            .validate()
            .map_err(|e| match e {
                Error::Config { path, message } => Error::config(path.replacen("transformer", "model", 1), message),
                other => other,
            })
    }

    /// Extra checks for the commands that train or roll out a model.
    pub fn validate_learning(&self) -> Result<()> {
        self.validate()?;
        let need = self.model.n_e + self.model.n_d;
        if self.training_prefix < need.max(2) {
            return Err(Error::config(
                "training_prefix",
                format!("needs at least n_e + n_d = {need} states, got {}", self.training_prefix),
            ));
        }
        if self.training_prefix >= self.time.n_steps {
            return Err(Error::config(
                "training_prefix",
                format!("must be below time.n_steps = {}, got {}", self.time.n_steps, self.training_prefix),
            ));
        }
        Ok(())
    }

    pub fn observed_permeability(&self) -> Result<PermeabilitySpec> {
        match &self.assimilation.permeability {
            Some(p) => Ok(p.clone()),
            None => self.permeability.without_channel(self.assimilation.removed_channel),
        }
    }
}

/// Discretization shared by every command: mesh, target coefficient, spaces and blocks.
pub struct Setup {
    pub mesh: FineMesh,
    pub coarse: CoarseMesh,
    pub mass: SparseMatrix,
    pub kappa: PermeabilityField,
    pub stiffness: SparseMatrix,
    pub dec: SpaceDecomposition,
    pub ps: ProjectedSystem,
    pub lambda_robust: f64,
    pub tau: f64,
}

impl Setup {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mesh = FineMesh::new(cfg.fine_n)?;
        let coarse = CoarseMesh::new(&mesh, cfg.coarse_n)?;
        let mass = assemble_mass(&mesh);
        let kappa = cfg.permeability.build(cfg.fine_n)?;
        let stiffness = assemble_stiffness(&mesh, &kappa)?;
        let dec = build_decomposition(&mesh, &coarse, &kappa, cfg.modes.sensitive, cfg.modes.robust, &mass)?;
        let ps = project_system(&dec, &mass, &stiffness)?;
        let lambda_robust = explicit_stability_indicator(&ps)?;
        let tau = match cfg.time.tau {
            TimeStep::Fixed(t) => t,
            TimeStep::Auto(AutoStep::Stability) if lambda_robust > 0.0 => 1.0 / lambda_robust,
            TimeStep::Auto(AutoStep::Stability) => {
                return Err(Error::config("time.tau", "robust block has no positive eigenvalue"))
            }
        };
        Ok(Self {
            mesh,
            coarse,
            mass,
            kappa,
            stiffness,
            dec,
            ps,
            lambda_robust,
            tau,
        })
    }

    pub fn solver_config(&self, cfg: &ExperimentConfig) -> SolverConfig {
        SolverConfig {
            tau: self.tau,
            n_steps: cfg.time.n_steps,
            omega: cfg.time.omega,
            nonlinear: cfg.problem == Problem::Nonlinear,
            newton: cfg.newton,
        }
    }

    /// Stepper on the target spaces with coefficient `kappa` and blocks `ps`.
    pub fn stepper<'a>(
        &'a self,
        cfg: &ExperimentConfig,
        kappa: &'a PermeabilityField,
        ps: &'a ProjectedSystem,
    ) -> Result<Box<dyn Stepper + 'a>> {
        Ok(match cfg.problem {
            Problem::Linear => Box::new(LinearStepper::new(ps, self.tau, cfg.time.omega)?),
            Problem::Nonlinear => Box::new(NonlinearStepper::new(
                &self.mesh,
                &self.dec,
                kappa,
                ps,
                self.tau,
                cfg.time.omega,
                cfg.newton,
            )?),
        })
    }

    pub fn splitting(&self, cfg: &ExperimentConfig, kappa: &PermeabilityField, ps: &ProjectedSystem) -> Result<Trajectory> {
        let u0 = cfg.initial.sample(&self.mesh);
        let s0 = project_initial(&self.dec, &self.mass, &u0)?;
        let mut stepper = self.stepper(cfg, kappa, ps)?;
        run_trajectory(s0, &self.solver_config(cfg), stepper.as_mut())
    }

    pub fn reference(&self, cfg: &ExperimentConfig) -> Result<Vec<DVector<f64>>> {
        let physics = match cfg.problem {
            Problem::Linear => FinePhysics::Linear {
                stiffness: &self.stiffness,
            },
            Problem::Nonlinear => FinePhysics::Nonlinear {
                kappa0: &self.kappa,
                newton: cfg.newton,
            },
        };
        let u0 = cfg.initial.sample(&self.mesh);
        backward_euler_reference(&self.mesh, &self.mass, physics, &u0, self.tau, cfg.time.n_steps)
    }

    /// Coefficient κ̃ and its blocks on the target spaces.
    pub fn observed_system(&self, cfg: &ExperimentConfig) -> Result<(PermeabilityField, ProjectedSystem)> {
        let kappa = cfg.observed_permeability()?.build(cfg.fine_n)?;
        let stiffness = assemble_stiffness(&self.mesh, &kappa)?;
        let ps = self.ps.with_stiffness(project_stiffness(&self.dec, &stiffness)?);
        Ok((kappa, ps))
    }

    pub fn sensitive_fine(&self, u1: &[DVector<f64>]) -> Vec<DVector<f64>> {
        u1.iter().map(|c| &self.dec.b1 * c).collect()
    }

    pub fn robust_fine(&self, u2: &[DVector<f64>]) -> Vec<DVector<f64>> {
        u2.iter().map(|c| &self.dec.b2 * c).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub config_hash: String,
    pub m1: usize,
    pub m2: usize,
    pub lambda_sensitive: f64,
    pub lambda_robust: f64,
    pub tau: f64,
    pub tau_lambda: f64,
    pub n_steps: usize,
    /// Largest relative change of total mass along the splitting trajectory.
    pub mass_drift: f64,
    /// Average relative L² distance of the splitting solution from the fine reference.
    pub splitting_mean_l2: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub windows: usize,
    pub parameters: usize,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mean_l2: Option<f64>,
    pub mean_energy: Option<f64>,
    pub max_l2: Option<f64>,
    pub max_energy: Option<f64>,
}

impl From<&ErrorReport> for ErrorSummary {
    fn from(r: &ErrorReport) -> Self {
        Self {
            mean_l2: r.mean_l2(),
            mean_energy: r.mean_energy(),
            max_l2: r.max_l2(),
            max_energy: r.max_energy(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub config_hash: String,
    pub strategy: Strategy,
    pub oracle: bool,
    pub predicted_steps: usize,
    pub u1: ErrorSummary,
    pub u2: ErrorSummary,
    pub fine: ErrorSummary,
    /// Largest rolled-out state norm over the largest prefix state norm.
    pub norm_ratio: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssimilationSummary {
    pub config_hash: String,
    pub oracle: bool,
    pub observation: ObservationSource,
    pub predicted_steps: usize,
    pub u1: ErrorSummary,
    pub combined: ErrorSummary,
    pub seconds: f64,
}

fn output_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.output)?;
    Ok(cfg.output.clone())
}

fn sidecar(path: &Path, kind: &str, hash: &str, details: serde_json::Value) -> Result<()> {
    io::write_sidecar(
        path,
        &io::Sidecar {
            kind: kind.into(),
            config_hash: hash.into(),
            details,
        },
    )
}

fn write_with_sidecar(path: &Path, contents: &str, kind: &str, hash: &str) -> Result<()> {
    std::fs::write(path, contents)?;
    sidecar(path, kind, hash, serde_json::Value::Null)
}

fn load_checked_trajectory(dir: &Path, name: &str, hash: &str) -> Result<Trajectory> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::InvalidArgument(format!("{} is missing; run `simulate` first", path.display())));
    }
    io::check_hash(&path, hash)?;
    io::read_trajectory(&path)
}

/// Splitting trajectory, fine reference, decomposition and metadata.
pub fn simulate(cfg: &ExperimentConfig) -> Result<SimulateSummary> {
    let start = Instant::now();
    let dir = output_dir(cfg)?;
    let hash = cfg.hash();
    let setup = Setup::build(cfg)?;
    let traj = setup.splitting(cfg, &setup.kappa, &setup.ps)?;
    let reference = setup.reference(cfg)?;
    let fine = traj.reconstruct(&setup.dec);
    let m0 = total_mass(&setup.mass, &fine[0]);
    let mass_drift = fine
        .iter()
        .map(|f| ((total_mass(&setup.mass, f) - m0) / m0).abs())
        .fold(0.0, f64::max);
    let report = error_report(&fine, &reference, 1, &setup.mass, &setup.stiffness)?;

    let items: [(&str, &str); 3] = [(SPLITTING_FILE, "splitting"), (REFERENCE_FILE, "reference"), (DECOMPOSITION_FILE, "decomposition")];
    io::write_trajectory(&dir.join(SPLITTING_FILE), &traj)?;
    io::write_trajectory(&dir.join(REFERENCE_FILE), &io::fine_as_trajectory(&reference, setup.tau))?;
    io::write_decomposition(&dir.join(DECOMPOSITION_FILE), &setup.dec)?;
    for (name, kind) in items {
        sidecar(&dir.join(name), kind, &hash, serde_json::Value::Null)?;
    }
    setup.kappa.write_csv(cfg.fine_n, &dir.join(PERMEABILITY_FILE))?;
    sidecar(&dir.join(PERMEABILITY_FILE), "permeability", &hash, serde_json::Value::Null)?;
    if cfg.strategy == Strategy::Assimilation && cfg.assimilation.observation == ObservationSource::Compute {
        let (kappa, ps) = setup.observed_system(cfg)?;
        let obs = setup.splitting(cfg, &kappa, &ps)?;
        io::write_trajectory(&dir.join(OBSERVATION_FILE), &obs)?;
        sidecar(&dir.join(OBSERVATION_FILE), "observation", &hash, serde_json::Value::Null)?;
    }

    let lambda_sensitive = largest_generalized_eigenvalue(&setup.ps.a11, &setup.ps.m11)?;
    let summary = SimulateSummary {
        config_hash: hash,
        m1: setup.dec.m1(),
        m2: setup.dec.m2(),
        lambda_sensitive,
        lambda_robust: setup.lambda_robust,
        tau: setup.tau,
        tau_lambda: setup.tau * setup.lambda_robust,
        n_steps: cfg.time.n_steps,
        mass_drift,
        splitting_mean_l2: report.mean_l2(),
        seconds: start.elapsed().as_secs_f64(),
    };
    io::write_json(&dir.join(SIMULATE_SUMMARY), &summary)?;
    Ok(summary)
}

/// Robust-part sequence ũ₂ seen by the assimilation model, covering all states.
fn observation(cfg: &ExperimentConfig, setup: &Setup, dir: &Path, hash: &str) -> Result<Vec<DVector<f64>>> {
    match cfg.assimilation.observation {
        ObservationSource::Compute => {
            let path = dir.join(OBSERVATION_FILE);
            if path.exists() && io::check_hash(&path, hash).is_ok() {
                return Ok(io::read_trajectory(&path)?.u2());
            }
            let (kappa, ps) = setup.observed_system(cfg)?;
            Ok(setup.splitting(cfg, &kappa, &ps)?.u2())
        }
        ObservationSource::Load => {
            let path = dir.join(OBSERVATION_FILE);
            if !path.exists() {
                return Err(Error::InvalidArgument(format!("observation file {} is missing", path.display())));
            }
            Ok(io::read_trajectory(&path)?.u2())
        }
        ObservationSource::Predict => {
            let (kappa, ps) = setup.observed_system(cfg)?;
            let prefix = setup.splitting(&ExperimentConfig {
                time: TimeConfig {
                    n_steps: cfg.training_prefix,
                    ..cfg.time
                },
                ..cfg.clone()
            }, &kappa, &ps)?;
            let tc = cfg.model.config(setup.dec.m1(), setup.dec.m2(), cfg.seed);
            let (model, stats) = io::load_model(&dir.join(MODEL_U2_FILE), tc)?;
            let mut predictor = NeuralPredictor { model: &model, stats: &stats };
            let mut stepper = setup.stepper(cfg, &kappa, &ps)?;
            let out = hybrid_rollout(
                Surrogate::U2(&mut predictor),
                stepper.as_mut(),
                &prefix,
                cfg.training_prefix,
                cfg.time.n_steps + 1,
            )?;
            Ok(out.u2())
        }
    }
}

fn loss_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        out.push_str(&format!("{e},{l:.17e}\n"));
    }
    out
}

fn train_one(
    cfg: &ExperimentConfig,
    source: &[DVector<f64>],
    target: &[DVector<f64>],
    seed: u64,
) -> Result<(TransformerModel, NormalizationStats, Vec<f64>, usize)> {
    let m = cfg.training_prefix;
    let samples = make_windows_from(source, target, m, cfg.model.window())
        .map_err(|e| Error::config("training_prefix", e.to_string()))?;
    let stats = NormalizationStats::fit(source, target, m)?;
    let mut model = TransformerModel::new(cfg.model.config(source[0].len(), target[0].len(), seed))?;
    let history = train(&mut model, &samples, &stats, &cfg.training)?;
    Ok((model, stats, history, samples.len()))
}

fn save_model(dir: &Path, name: &str, model: &TransformerModel, stats: &NormalizationStats, hash: &str) -> Result<()> {
    let path = dir.join(name);
    io::save_model(&path, model, stats)?;
    sidecar(&path, "checkpoint", hash, serde_json::to_value(&model.config)?)
}

/// Fit the model(s) the strategy needs on the first `training_prefix` states.
pub fn train_models(cfg: &ExperimentConfig) -> Result<Vec<TrainSummary>> {
    cfg.validate_learning()?;
    let start = Instant::now();
    let dir = output_dir(cfg)?;
    let hash = cfg.hash();
    let traj = load_checked_trajectory(&dir, SPLITTING_FILE, &hash)?;
    let (u1, u2) = (traj.u1(), traj.u2());
    let mut jobs: Vec<(&str, Vec<DVector<f64>>, &[DVector<f64>], &str)> = Vec::new();
    match cfg.strategy {
        Strategy::PredictU1 => jobs.push((MODEL_FILE, u2.clone(), &u1, LOSS_FILE)),
        Strategy::PredictU2 => jobs.push((MODEL_U2_FILE, u1.clone(), &u2, "loss_u2.csv")),
        Strategy::PredictBoth => {
            jobs.push((MODEL_FILE, u2.clone(), &u1, LOSS_FILE));
            jobs.push((MODEL_U2_FILE, u1.clone(), &u2, "loss_u2.csv"));
        }
        Strategy::Assimilation => {
            let setup = Setup::build(cfg)?;
            jobs.push((MODEL_FILE, observation(cfg, &setup, &dir, &hash)?, &u1, LOSS_FILE));
        }
    }
    let mut out = Vec::new();
    for (k, (name, source, target, loss_name)) in jobs.into_iter().enumerate() {
        let (model, stats, history, windows) = train_one(cfg, &source, target, cfg.seed.wrapping_add(k as u64))?;
        save_model(&dir, name, &model, &stats, &hash)?;
        write_with_sidecar(&dir.join(loss_name), &loss_csv(&history), "loss", &hash)?;
        out.push(TrainSummary {
            config_hash: hash.clone(),
            windows,
            parameters: model.parameter_count(),
            epochs: cfg.training.epochs,
            final_loss: history.last().copied(),
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    io::write_json(&dir.join("train.json"), &out)?;
    Ok(out)
}

fn load_checked_model(
    cfg: &ExperimentConfig,
    dir: &Path,
    name: &str,
    hash: &str,
    source_dim: usize,
    target_dim: usize,
    seed: u64,
) -> Result<(TransformerModel, NormalizationStats)> {
    let path = dir.join(name);
    if !path.exists() {
        return Err(Error::InvalidArgument(format!("{} is missing; run `train` first", path.display())));
    }
    io::check_hash(&path, hash)?;
    io::load_model(&path, cfg.model.config(source_dim, target_dim, seed))
}

fn error_plot(report: &ErrorReport, title: &str, energy: bool) -> String {
    let points = report
        .steps
        .iter()
        .filter(|s| s.step >= report.first_predicted)
        .filter_map(|s| Some((s.step as f64, if energy { s.rel_energy? } else { s.rel_l2? })))
        .collect();
    LinePlot {
        title: title.into(),
        x_label: "time step".into(),
        y_label: if energy { "relative energy error" } else { "relative L2 error" }.into(),
        log_y: true,
        series: vec![Series {
            label: title.into(),
            points,
        }],
    }
    .to_svg()
}

fn write_report(dir: &Path, csv_name: &str, report: &ErrorReport, title: &str, hash: &str) -> Result<()> {
    write_with_sidecar(&dir.join(csv_name), &report.to_csv(), "error_report", hash)?;
    let stem = csv_name.trim_end_matches(".csv");
    for (suffix, energy) in [("l2", false), ("energy", true)] {
        let name = format!("{stem}_{suffix}.svg");
        write_with_sidecar(&dir.join(name), &error_plot(report, title, energy), "plot", hash)?;
    }
    Ok(())
}

/// Hybrid rollout from the training prefix to the full horizon, with error reports
/// against the splitting trajectory (coarse parts) and the fine reference.
pub fn rollout(cfg: &ExperimentConfig, oracle: bool) -> Result<RolloutSummary> {
    cfg.validate_learning()?;
    if cfg.strategy == Strategy::Assimilation {
        return Err(Error::config("strategy", "use the assimilate command for the assimilation strategy"));
    }
    let start = Instant::now();
    let dir = output_dir(cfg)?;
    let hash = cfg.hash();
    let setup = Setup::build(cfg)?;
    let traj = load_checked_trajectory(&dir, SPLITTING_FILE, &hash)?;
    let reference = load_checked_trajectory(&dir, REFERENCE_FILE, &hash)?.u1();
    let (m, total) = (cfg.training_prefix, traj.len());
    let (m1, m2) = (setup.dec.m1(), setup.dec.m2());
    let window = cfg.model.window();

    let wants_u1 = matches!(cfg.strategy, Strategy::PredictU1 | Strategy::PredictBoth);
    let wants_u2 = matches!(cfg.strategy, Strategy::PredictU2 | Strategy::PredictBoth);
    let models: Vec<(TransformerModel, NormalizationStats)> = if oracle {
        Vec::new()
    } else {
        let mut v = Vec::new();
        if wants_u1 {
            v.push(load_checked_model(cfg, &dir, MODEL_FILE, &hash, m2, m1, cfg.seed)?);
        }
        if wants_u2 {
            let seed = cfg.seed.wrapping_add(u64::from(wants_u1));
            v.push(load_checked_model(cfg, &dir, MODEL_U2_FILE, &hash, m1, m2, seed)?);
        }
        v
    };
    let mut boxed: Vec<Box<dyn Predictor + '_>> = Vec::new();
    if oracle {
        if wants_u1 {
            boxed.push(Box::new(OraclePredictor { target: traj.u1(), shape: window }));
        }
        if wants_u2 {
            boxed.push(Box::new(OraclePredictor { target: traj.u2(), shape: window }));
        }
    } else {
        for (model, stats) in &models {
            boxed.push(Box::new(NeuralPredictor { model, stats }));
        }
    }
    let mut stepper = setup.stepper(cfg, &setup.kappa, &setup.ps)?;
    let surrogate = match (cfg.strategy, boxed.as_mut_slice()) {
        (Strategy::PredictU1, [p]) => Surrogate::U1(p.as_mut()),
        (Strategy::PredictU2, [p]) => Surrogate::U2(p.as_mut()),
        (Strategy::PredictBoth, [a, b]) => Surrogate::Both {
            u1: a.as_mut(),
            u2: b.as_mut(),
        },
        _ => unreachable!("one predictor per predicted part"),
    };
    let out = hybrid_rollout(surrogate, stepper.as_mut(), &traj, m, total)?;
    drop(stepper);

    io::write_trajectory(&dir.join(ROLLOUT_FILE), &out)?;
    sidecar(&dir.join(ROLLOUT_FILE), "rollout", &hash, serde_json::Value::Null)?;
    let (mass, energy) = (&setup.mass, &setup.stiffness);
    let r1 = error_report(&setup.sensitive_fine(&out.u1()), &setup.sensitive_fine(&traj.u1()), m, mass, energy)?;
    let r2 = error_report(&setup.robust_fine(&out.u2()), &setup.robust_fine(&traj.u2()), m, mass, energy)?;
    let rf = error_report(&out.reconstruct(&setup.dec), &reference, m, mass, energy)?;
    write_report(&dir, ROLLOUT_U1_ERRORS, &r1, "u_H1 vs splitting", &hash)?;
    write_report(&dir, ROLLOUT_U2_ERRORS, &r2, "u_H2 vs splitting", &hash)?;
    write_report(&dir, ROLLOUT_FINE_ERRORS, &rf, "u_H vs fine reference", &hash)?;

    let prefix_max = out.states[..m].iter().map(|s| s.norm()).fold(0.0, f64::max);
    let roll_max = out.states[m..].iter().map(|s| s.norm()).fold(0.0, f64::max);
    let summary = RolloutSummary {
        config_hash: hash,
        strategy: cfg.strategy,
        oracle,
        predicted_steps: total - m,
        u1: (&r1).into(),
        u2: (&r2).into(),
        fine: (&rf).into(),
        norm_ratio: if prefix_max > 0.0 { roll_max / prefix_max } else { f64::INFINITY },
        seconds: start.elapsed().as_secs_f64(),
    };
    io::write_json(&dir.join(ROLLOUT_SUMMARY), &summary)?;
    Ok(summary)
}

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".into(), |x| format!("{:.6}%", 100.0 * x))
}

/// Two-row table of averaged errors, in percent.
pub fn assimilation_table(s: &AssimilationSummary) -> String {
    format!(
        "{:<10}{:>16}{:>16}\n{:<10}{:>16}{:>16}\n{:<10}{:>16}{:>16}\n",
        "",
        "L2",
        "energy",
        "u_{H,1}",
        percent(s.u1.mean_l2),
        percent(s.u1.mean_energy),
        "u_H",
        percent(s.combined.mean_l2),
        percent(s.combined.mean_energy)
    )
}

/// Predict u₁ from the observed ũ₂ and compare u₁ alone and u₁ + ũ₂ with the fine
/// reference of the target coefficient.
pub fn assimilate(cfg: &ExperimentConfig, oracle: bool) -> Result<AssimilationSummary> {
    cfg.validate_learning()?;
    let start = Instant::now();
    let dir = output_dir(cfg)?;
    let hash = cfg.hash();
    let setup = Setup::build(cfg)?;
    let traj = load_checked_trajectory(&dir, SPLITTING_FILE, &hash)?;
    let reference = load_checked_trajectory(&dir, REFERENCE_FILE, &hash)?.u1();
    let observed = observation(cfg, &setup, &dir, &hash)?;
    let (m, total) = (cfg.training_prefix, traj.len());
    let u1 = traj.u1();

    let loaded;
    let mut oracle_p;
    let mut neural_p;
    let predictor: &mut dyn Predictor = if oracle {
        oracle_p = OraclePredictor {
            target: u1.clone(),
            shape: cfg.model.window(),
        };
        &mut oracle_p
    } else {
        loaded = load_checked_model(cfg, &dir, MODEL_FILE, &hash, setup.dec.m2(), setup.dec.m1(), cfg.seed)?;
        neural_p = NeuralPredictor {
            model: &loaded.0,
            stats: &loaded.1,
        };
        &mut neural_p
    };
    let out = assimilation_rollout(predictor, &observed, &u1, m, total, traj.tau, traj.omega)?;
    io::write_trajectory(&dir.join(ASSIM_FILE), &out)?;
    sidecar(&dir.join(ASSIM_FILE), "assimilation", &hash, serde_json::Value::Null)?;

    let (mass, energy) = (&setup.mass, &setup.stiffness);
    let r1 = error_report(&setup.sensitive_fine(&out.u1()), &reference, m, mass, energy)?;
    let rc = error_report(&out.reconstruct(&setup.dec), &reference, m, mass, energy)?;
    write_report(&dir, ASSIM_U1_ERRORS, &r1, "u_H1 vs fine reference", &hash)?;
    write_report(&dir, ASSIM_COMBINED_ERRORS, &rc, "u_H1 + observed u_H2 vs fine reference", &hash)?;
    let summary = AssimilationSummary {
        config_hash: hash.clone(),
        oracle,
        observation: cfg.assimilation.observation,
        predicted_steps: total - m,
        u1: (&r1).into(),
        combined: (&rc).into(),
        seconds: start.elapsed().as_secs_f64(),
    };
    io::write_json(&dir.join(ASSIM_SUMMARY), &summary)?;
    write_with_sidecar(&dir.join(ASSIM_TABLE), &assimilation_table(&summary), "table", &hash)?;
    Ok(summary)
}

/// Text summary of whatever results exist in the output directory. Fails if any of
/// them was produced by a different configuration.
pub fn report(cfg: &ExperimentConfig) -> Result<String> {
    let dir = cfg.output.clone();
    let hash = cfg.hash();
    let mut out = format!("config {hash}\n");
    let mut found = false;
    let summary_hash = |path: &Path| -> Result<Option<serde_json::Value>> {
        if !path.exists() {
            return Ok(None);
        }
        let v: serde_json::Value = io::read_json(path)?;
        let stored = v.get("config_hash").and_then(|h| h.as_str()).unwrap_or_default();
        if stored != hash {
            return Err(Error::config(
                "config_hash",
                format!("{} was produced by config {stored}, current config is {hash}", path.display()),
            ));
        }
        Ok(Some(v))
    };
    if let Some(v) = summary_hash(&dir.join(SIMULATE_SUMMARY))? {
        let s: SimulateSummary = serde_json::from_value(v)?;
        found = true;
        out.push_str(&format!(
            "simulate: m1 = {}, m2 = {}, lambda_max(A22, M22) = {:.6e}, tau = {:.6e}, tau*lambda = {:.4e}, mass drift = {:.3e}, splitting vs fine L2 = {}\n",
            s.m1, s.m2, s.lambda_robust, s.tau, s.tau_lambda, s.mass_drift, percent(s.splitting_mean_l2)
        ));
    }
    if let Some(v) = summary_hash(&dir.join(ROLLOUT_SUMMARY))? {
        let s: RolloutSummary = serde_json::from_value(v)?;
        found = true;
        out.push_str(&format!(
            "rollout ({} predicted steps): u_H1 L2 {} energy {}; u_H2 L2 {}; u_H L2 {} energy {}; norm ratio {:.4}\n",
            s.predicted_steps,
            percent(s.u1.mean_l2),
            percent(s.u1.mean_energy),
            percent(s.u2.mean_l2),
            percent(s.fine.mean_l2),
            percent(s.fine.mean_energy),
            s.norm_ratio
        ));
    }
    if let Some(v) = summary_hash(&dir.join(ASSIM_SUMMARY))? {
        let s: AssimilationSummary = serde_json::from_value(v)?;
        found = true;
        out.push_str(&format!("assimilation ({} predicted steps):\n", s.predicted_steps));
        out.push_str(&assimilation_table(&s));
    }
    if !found {
        return Err(Error::InvalidArgument(format!("no results in {}", dir.display())));
    }
    Ok(out)
}
