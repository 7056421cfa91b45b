//! Partially explicit time splitting on the coarse decomposition, plus the fine-scale
//! backward Euler reference.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::CscMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::{
    apply_stiffness, assemble_stiffness_values, nonlinear_coefficient, spmm, spmv, FineMesh, PermeabilityField,
    SparseMatrix,
};
use crate::multiscale::{ProjectedSystem, SpaceDecomposition};

#[derive(Debug, Clone, PartialEq)]
pub struct SplitState {
    pub u1: DVector<f64>,
    pub u2: DVector<f64>,
    pub step: usize,
}

impl SplitState {
    pub fn zeros(m1: usize, m2: usize) -> Self {
        Self {
            u1: DVector::zeros(m1),
            u2: DVector::zeros(m2),
            step: 0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.u1.iter().chain(self.u2.iter()).all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        (self.u1.norm_squared() + self.u2.norm_squared()).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<SplitState>,
    pub tau: f64,
    pub omega: f64,
}

impl Trajectory {
    pub fn new(states: Vec<SplitState>, tau: f64, omega: f64) -> Self {
        Self { states, tau, omega }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn m1(&self) -> usize {
        self.states.first().map_or(0, |s| s.u1.len())
    }

    pub fn m2(&self) -> usize {
        self.states.first().map_or(0, |s| s.u2.len())
    }

    pub fn u1(&self) -> Vec<DVector<f64>> {
        self.states.iter().map(|s| s.u1.clone()).collect()
    }

    pub fn u2(&self) -> Vec<DVector<f64>> {
        self.states.iter().map(|s| s.u2.clone()).collect()
    }

    pub fn truncated(&self, len: usize) -> Self {
        Self {
            states: self.states[..len.min(self.states.len())].to_vec(),
            ..*self
        }
    }

    pub fn reconstruct(&self, dec: &SpaceDecomposition) -> Vec<DVector<f64>> {
        self.states.iter().map(|s| reconstruct_fine(s, dec)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewtonConfig {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub tau: f64,
    pub n_steps: usize,
    pub omega: f64,
    pub nonlinear: bool,
    pub newton: NewtonConfig,
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::config("tau", format!("must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::config("omega", format!("must lie in [0, 1], got {}", self.omega)));
        }
        if !(self.newton.tol > 0.0) {
            return Err(Error::config("newton.tol", "must be positive"));
        }
        Ok(())
    }
}

fn cholesky(m: DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::Factorization(format!("{what} is not positive definite")))
}

/// Sequential L² projection: first onto the sensitive space, then the residual onto the robust one.
pub fn project_initial(dec: &SpaceDecomposition, mass: &SparseMatrix, u0: &DVector<f64>) -> Result<SplitState> {
    if u0.len() != dec.fine_dim() || mass.nrows() != dec.fine_dim() {
        return Err(Error::Dimension(format!(
            "initial state of length {} for fine dimension {}",
            u0.len(),
            dec.fine_dim()
        )));
    }
    let mb1 = spmm(mass, &dec.b1);
    let mb2 = spmm(mass, &dec.b2);
    let m11 = cholesky(dec.b1.transpose() * &mb1, "M11")?;
    let m22 = cholesky(dec.b2.transpose() * &mb2, "M22")?;
    let u1 = m11.solve(&(mb1.transpose() * u0));
    let residual = u0 - &dec.b1 * &u1;
    let u2 = m22.solve(&(mb2.transpose() * residual));
    Ok(SplitState { u1, u2, step: 0 })
}

pub fn reconstruct_fine(state: &SplitState, dec: &SpaceDecomposition) -> DVector<f64> {
    &dec.b1 * &state.u1 + &dec.b2 * &state.u2
}

/// One time step split into its two equations so that either half can be replaced
/// by a learned predictor.
pub trait Stepper {
    /// Implicit equation for the sensitive coefficients.
    fn first_equation(&mut self, cur: &SplitState, prev: &SplitState) -> Result<DVector<f64>>;

    /// Explicit equation for the robust coefficients given the new sensitive ones.
    fn second_equation(&mut self, cur: &SplitState, prev: &SplitState, u1_next: &DVector<f64>) -> Result<DVector<f64>>;

    fn step(&mut self, cur: &SplitState, prev: &SplitState) -> Result<SplitState> {
        let u1 = self.first_equation(cur, prev)?;
        let u2 = self.second_equation(cur, prev, &u1)?;
        Ok(SplitState {
            u1,
            u2,
            step: cur.step + 1,
        })
    }
}

pub struct LinearStepper<'a> {
    ps: &'a ProjectedSystem,
    tau: f64,
    omega: f64,
    lhs1: Cholesky<f64, Dyn>,
    mass2: Cholesky<f64, Dyn>,
}

impl<'a> LinearStepper<'a> {
    pub fn new(ps: &'a ProjectedSystem, tau: f64, omega: f64) -> Result<Self> {
        let lhs1 = cholesky(&ps.m11 + &ps.a11 * tau, "M11 + tau A11")?;
        let mass2 = cholesky(ps.m22.clone(), "M22")?;
        Ok(Self {
            ps,
            tau,
            omega,
            lhs1,
            mass2,
        })
    }
}

fn check_state(state: &SplitState, m1: usize, m2: usize) -> Result<()> {
    if state.u1.len() != m1 || state.u2.len() != m2 {
        return Err(Error::Dimension(format!(
            "state with ({}, {}) coefficients for spaces of size ({m1}, {m2})",
            state.u1.len(),
            state.u2.len()
        )));
    }
    Ok(())
}

impl Stepper for LinearStepper<'_> {
    fn first_equation(&mut self, cur: &SplitState, prev: &SplitState) -> Result<DVector<f64>> {
        let ps = self.ps;
        check_state(cur, ps.m1(), ps.m2())?;
        check_state(prev, ps.m1(), ps.m2())?;
        let rhs = &ps.m11 * &cur.u1 - &ps.m12 * (&cur.u2 - &prev.u2) - (&ps.a12 * &cur.u2) * self.tau;
        Ok(self.lhs1.solve(&rhs))
    }

    fn second_equation(&mut self, cur: &SplitState, prev: &SplitState, u1_next: &DVector<f64>) -> Result<DVector<f64>> {
        let ps = self.ps;
        check_state(cur, ps.m1(), ps.m2())?;
        let blend = &cur.u1 * (1.0 - self.omega) + u1_next * self.omega;
        let coupling = ps.a12.tr_mul(&blend) + &ps.a22 * &cur.u2;
        let rhs = &ps.m22 * &cur.u2 - ps.m12.tr_mul(&(&cur.u1 - &prev.u1)) - coupling * self.tau;
        Ok(self.mass2.solve(&rhs))
    }
}

pub fn step_linear(
    cur: &SplitState,
    prev: &SplitState,
    ps: &ProjectedSystem,
    tau: f64,
    omega: f64,
) -> Result<SplitState> {
    LinearStepper::new(ps, tau, omega)?.step(cur, prev)
}

/// Splitting for `u_t = div(exp(u) κ₀ grad u)`. The first equation is solved by a
/// chord quasi-Newton iteration with the frozen-coefficient Jacobian, refreshed
/// whenever the residual contracts slowly.
pub struct NonlinearStepper<'a> {
    mesh: &'a FineMesh,
    dec: &'a SpaceDecomposition,
    kappa0: &'a PermeabilityField,
    m11: DMatrix<f64>,
    m12: DMatrix<f64>,
    m22: DMatrix<f64>,
    mass2: Cholesky<f64, Dyn>,
    tau: f64,
    omega: f64,
    newton: NewtonConfig,
    /// Residual norms of the most recent first-equation solve.
    pub last_history: Vec<f64>,
}

impl<'a> NonlinearStepper<'a> {
    pub fn new(
        mesh: &'a FineMesh,
        dec: &'a SpaceDecomposition,
        kappa0: &'a PermeabilityField,
        ps: &ProjectedSystem,
        tau: f64,
        omega: f64,
        newton: NewtonConfig,
    ) -> Result<Self> {
        if dec.fine_dim() != mesh.node_count() || kappa0.len() != mesh.cell_count() {
            return Err(Error::Dimension("decomposition, mesh and coefficient disagree".into()));
        }
        Ok(Self {
            mesh,
            dec,
            kappa0,
            m11: ps.m11.clone(),
            m12: ps.m12.clone(),
            m22: ps.m22.clone(),
            mass2: cholesky(ps.m22.clone(), "M22")?,
            tau,
            omega,
            newton,
            last_history: Vec::new(),
        })
    }

    /// `R(u₁) = M₁₁(u₁ − u₁ⁿ) + M₁₂(u₂ⁿ − u₂ⁿ⁻¹) + τ B₁ᵀ A(exp(u) κ₀) u` with `u = B₁u₁ + B₂u₂ⁿ`.
    pub fn first_residual(&self, u1: &DVector<f64>, cur: &SplitState, prev: &SplitState) -> Result<DVector<f64>> {
        let u = &self.dec.b1 * u1 + &self.dec.b2 * &cur.u2;
        let coeff = nonlinear_coefficient(self.mesh, self.kappa0, &u)?;
        let flux = apply_stiffness(self.mesh, &coeff, &u);
        Ok(&self.m11 * (u1 - &cur.u1) + &self.m12 * (&cur.u2 - &prev.u2) + self.dec.b1.tr_mul(&flux) * self.tau)
    }

    fn jacobian(&self, u1: &DVector<f64>, cur: &SplitState) -> Result<Cholesky<f64, Dyn>> {
        let u = &self.dec.b1 * u1 + &self.dec.b2 * &cur.u2;
        let coeff = nonlinear_coefficient(self.mesh, self.kappa0, &u)?;
        let a = assemble_stiffness_values(self.mesh, &coeff)?;
        let ab1 = spmm(&a, &self.dec.b1);
        let proj = self.dec.b1.tr_mul(&ab1);
        let sym = (&proj + proj.transpose()) * 0.5;
        cholesky(&self.m11 + sym * self.tau, "nonlinear Jacobian")
    }
}

impl Stepper for NonlinearStepper<'_> {
    fn first_equation(&mut self, cur: &SplitState, prev: &SplitState) -> Result<DVector<f64>> {
        check_state(cur, self.dec.m1(), self.dec.m2())?;
        check_state(prev, self.dec.m1(), self.dec.m2())?;
        let mut u1 = cur.u1.clone();
        let mut history = Vec::new();
        let mut jac: Option<Cholesky<f64, Dyn>> = None;
        for it in 0..=self.newton.max_iter {
            let r = self.first_residual(&u1, cur, prev)?;
            let norm = r.norm();
            if !norm.is_finite() {
                break;
            }
            history.push(norm);
            if norm < self.newton.tol {
                self.last_history = history;
                return Ok(u1);
            }
            if it == self.newton.max_iter {
                break;
            }
            let slow = history.len() >= 2 && norm > 0.25 * history[history.len() - 2];
            if jac.is_none() || slow {
                jac = Some(self.jacobian(&u1, cur)?);
            }
            u1 -= jac.as_ref().expect("jacobian just built").solve(&r);
        }
        Err(Error::NewtonDiverged {
            iterations: history.len().saturating_sub(1),
            history,
        })
    }

    fn second_equation(&mut self, cur: &SplitState, prev: &SplitState, u1_next: &DVector<f64>) -> Result<DVector<f64>> {
        check_state(cur, self.dec.m1(), self.dec.m2())?;
        let blend = &cur.u1 * (1.0 - self.omega) + u1_next * self.omega;
        let w = &self.dec.b1 * blend + &self.dec.b2 * &cur.u2;
        let coeff = nonlinear_coefficient(self.mesh, self.kappa0, &w)?;
        let flux = apply_stiffness(self.mesh, &coeff, &w);
        let rhs = &self.m22 * &cur.u2 - self.m12.tr_mul(&(&cur.u1 - &prev.u1)) - self.dec.b2.tr_mul(&flux) * self.tau;
        Ok(self.mass2.solve(&rhs))
    }
}

#[allow(clippy::too_many_arguments)]
pub fn step_nonlinear(
    cur: &SplitState,
    prev: &SplitState,
    dec: &SpaceDecomposition,
    mesh: &FineMesh,
    kappa0: &PermeabilityField,
    ps: &ProjectedSystem,
    tau: f64,
    omega: f64,
    newton: NewtonConfig,
) -> Result<SplitState> {
    NonlinearStepper::new(mesh, dec, kappa0, ps, tau, omega, newton)?.step(cur, prev)
}

/// Apply the stepper `cfg.n_steps` times; the first step sees itself as history.
/// On failure the error carries the states computed so far.
pub fn run_trajectory(initial: SplitState, cfg: &SolverConfig, stepper: &mut dyn Stepper) -> Result<Trajectory> {
    cfg.validate()?;
    let mut states = Vec::with_capacity(cfg.n_steps + 1);
    states.push(SplitState { step: 0, ..initial });
    for n in 0..cfg.n_steps {
        let prev = if n == 0 { &states[0] } else { &states[n - 1] };
        let result = stepper.step(&states[n], prev).and_then(|s| {
            if s.is_finite() {
                Ok(s)
            } else {
                Err(Error::NonFinite {
                    context: "splitting state".into(),
                    step: n + 1,
                })
            }
        });
        match result {
            Ok(s) => states.push(s),
            Err(e) => {
                return Err(Error::StepFailed {
                    step: n + 1,
                    partial: Box::new(Trajectory::new(states, cfg.tau, cfg.omega)),
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(Trajectory::new(states, cfg.tau, cfg.omega))
}

pub enum FinePhysics<'a> {
    Linear { stiffness: &'a SparseMatrix },
    Nonlinear { kappa0: &'a PermeabilityField, newton: NewtonConfig },
}

fn csc(m: &SparseMatrix) -> CscMatrix<f64> {
    CscMatrix::from(m)
}

fn solve_csc(chol: &CscCholesky<f64>, b: &DVector<f64>) -> DVector<f64> {
    let x = chol.solve(&DMatrix::from_column_slice(b.len(), 1, b.as_slice()));
    DVector::from_column_slice(x.as_slice())
}

/// Fine-scale backward Euler; returns `n_steps + 1` nodal vectors starting with `u0`.
pub fn backward_euler_reference(
    mesh: &FineMesh,
    mass: &SparseMatrix,
    physics: FinePhysics<'_>,
    u0: &DVector<f64>,
    tau: f64,
    n_steps: usize,
) -> Result<Vec<DVector<f64>>> {
    if u0.len() != mesh.node_count() || mass.nrows() != mesh.node_count() {
        return Err(Error::Dimension(format!(
            "initial state of length {} on a mesh with {} nodes",
            u0.len(),
            mesh.node_count()
        )));
    }
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(u0.clone());
    match physics {
        FinePhysics::Linear { stiffness } => {
            let lhs = mass + &(stiffness * tau);
            let chol = CscCholesky::factor(&csc(&lhs)).map_err(|e| Error::Factorization(format!("{e:?}")))?;
            for _ in 0..n_steps {
                let rhs = spmv(mass, out.last().expect("nonempty"));
                out.push(solve_csc(&chol, &rhs));
            }
        }
        FinePhysics::Nonlinear { kappa0, newton } => {
            let mut symbolic: Option<CscCholesky<f64>> = None;
            for step in 0..n_steps {
                let old = out.last().expect("nonempty").clone();
                let m_old = spmv(mass, &old);
                let mut u = old.clone();
                let mut history = Vec::new();
                loop {
                    let coeff = nonlinear_coefficient(mesh, kappa0, &u)?;
                    let r = spmv(mass, &u) - &m_old + apply_stiffness(mesh, &coeff, &u) * tau;
                    let norm = r.norm();
                    history.push(norm);
                    if norm < newton.tol {
                        break;
                    }
                    if history.len() > newton.max_iter || !norm.is_finite() {
                        log::warn!("fine reference newton failed at step {}", step + 1);
                        return Err(Error::NewtonDiverged {
                            iterations: history.len() - 1,
                            history,
                        });
                    }
                    let a = assemble_stiffness_values(mesh, &coeff)?;
                    let lhs = csc(&(mass + &(&a * tau)));
                    let reused = match symbolic.as_mut() {
                        Some(c) => c.refactor(lhs.values()).is_ok(),
                        None => false,
                    };
                    if !reused {
                        symbolic =
                            Some(CscCholesky::factor(&lhs).map_err(|e| Error::Factorization(format!("{e:?}")))?);
                    }
                    u -= solve_csc(symbolic.as_ref().expect("factor present"), &r);
                }
                out.push(u);
            }
        }
    }
    Ok(out)
}

/// `1ᵀ M v`.
pub fn total_mass(mass: &SparseMatrix, v: &DVector<f64>) -> f64 {
    spmv(mass, v).sum()
}
