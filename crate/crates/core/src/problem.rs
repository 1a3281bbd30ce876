//! Optimal-control problem data and the Hamiltonian it induces.
//!
//! Dynamics are affine in the control, `f(x, a) = f0(x) + c_f^T a`, and the
//! Hamiltonian is `H(x, p) = sup_a ( p·(-f(x, a)) - l(x, a) )`. For the
//! separable quadratic cost `l = q|x|^2 + r|a|^2` the supremum is taken in
//! closed form; any other cost goes through a damped Newton solve of the
//! first-order condition `-c_f p - D_a l(x, a) = 0`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::{dot, norm, norm_sq};

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type MatrixFn = Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>;
pub type StateControlScalarFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
pub type StateControlVectorFn = Arc<dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync>;
pub type StateControlMatrixFn = Arc<dyn Fn(&[f64], &[f64]) -> DMatrix<f64> + Send + Sync>;

const NEWTON_MAX_ITERS: usize = 50;
const NEWTON_TOL: f64 = 1e-10;

/// The control-free part `f0` of the dynamics.
#[derive(Clone)]
pub enum Drift {
    Zero,
    /// `f0(x) = A x`
    Linear(DMatrix<f64>),
    Custom {
        f0: VectorFn,
        jacobian: MatrixFn,
    },
}

#[derive(Clone)]
pub enum RunningCost {
    /// `l(x, a) = q|x|^2 + r|a|^2`
    Quadratic { state_weight: f64, control_weight: f64 },
    Custom {
        cost: StateControlScalarFn,
        grad_x: StateControlVectorFn,
        grad_a: StateControlVectorFn,
        hess_aa: StateControlMatrixFn,
        /// Strong-convexity modulus `l0` of `a ↦ l(x, a)`.
        modulus: f64,
    },
}

#[derive(Clone)]
pub enum InitialCost {
    /// `u0(x) = exp(-|x|^2)`
    Gaussian,
    /// `u0(x) = x^T P0 x`
    Quadratic(DMatrix<f64>),
    Custom {
        value: ScalarFn,
        gradient: VectorFn,
    },
}

#[derive(Clone)]
pub struct ControlProblem {
    dim: usize,
    control_dim: usize,
    drift: Drift,
    /// `c_f`, shape `p × d`.
    control_gain: DMatrix<f64>,
    cost: RunningCost,
    initial: InitialCost,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let drift = match &self.drift {
            Drift::Zero => "zero",
            Drift::Linear(_) => "linear",
            Drift::Custom { .. } => "custom",
        };
        let cost = match &self.cost {
            RunningCost::Quadratic { .. } => "quadratic",
            RunningCost::Custom { .. } => "custom",
        };
        f.debug_struct("ControlProblem")
            .field("dim", &self.dim)
            .field("control_dim", &self.control_dim)
            .field("drift", &drift)
            .field("cost", &cost)
            .finish()
    }
}

/// Linear-quadratic test family: `f = A x + B a`, `l = |x|^2 + |a|^2`.
#[derive(Clone, Debug)]
pub struct LqrSpec {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub p0: DMatrix<f64>,
    /// `u0(x) = exp(-|x|^2)` when set, `x^T P0 x` otherwise.
    pub gaussian_initial: bool,
}

impl LqrSpec {
    /// `A = I`, `B = I`.
    pub fn identity(d: usize) -> Self {
        Self {
            a: DMatrix::identity(d, d),
            b: DMatrix::identity(d, d),
            p0: DMatrix::zeros(d, d),
            gaussian_initial: true,
        }
    }

    /// `A = (g^T g + I) / d` with `g` a seeded standard-normal `d × d` matrix.
    pub fn random_gram(d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let a = (g.transpose() * &g + DMatrix::identity(d, d)) / d as f64;
        Self { a, ..Self::identity(d) }
    }

    pub fn with_quadratic_initial(mut self, p0: DMatrix<f64>) -> Self {
        self.p0 = p0;
        self.gaussian_initial = false;
        self
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.a.nrows();
        if d == 0 || self.a.ncols() != d {
            return Err(Error::invalid("A must be a non-empty square matrix"));
        }
        if self.b.nrows() != d || self.b.ncols() == 0 {
            return Err(Error::invalid("B must be d × p with p > 0"));
        }
        if self.p0.nrows() != d || self.p0.ncols() != d {
            return Err(Error::invalid("P0 must be d × d"));
        }
        let asym = (&self.p0 - self.p0.transpose()).amax();
        if asym > 1e-12 {
            return Err(Error::invalid(format!("P0 is not symmetric (max deviation {asym:e})")));
        }
        Ok(())
    }
}

impl ControlProblem {
    pub fn new(
        dim: usize,
        control_dim: usize,
        drift: Drift,
        control_gain: DMatrix<f64>,
        cost: RunningCost,
        initial: InitialCost,
    ) -> Result<Self> {
        if dim == 0 || control_dim == 0 {
            return Err(Error::invalid("state and control dimensions must be positive"));
        }
        if control_gain.nrows() != control_dim || control_gain.ncols() != dim {
            return Err(Error::invalid(format!(
                "control gain must be {control_dim} × {dim}, got {} × {}",
                control_gain.nrows(),
                control_gain.ncols()
            )));
        }
        if let Drift::Linear(a) = &drift {
            if a.nrows() != dim || a.ncols() != dim {
                return Err(Error::invalid("drift matrix must be d × d"));
            }
        }
        if let InitialCost::Quadratic(p0) = &initial {
            if p0.nrows() != dim || p0.ncols() != dim {
                return Err(Error::invalid("initial quadratic form must be d × d"));
            }
        }
        if let RunningCost::Quadratic { control_weight, .. } = cost {
            if control_weight < 0.0 {
                return Err(Error::invalid("control weight must be non-negative"));
            }
        }
        Ok(Self {
            dim,
            control_dim,
            drift,
            control_gain,
            cost,
            initial,
        })
    }

    pub fn lqr(spec: &LqrSpec) -> Result<Self> {
        spec.validate()?;
        let initial = if spec.gaussian_initial {
            InitialCost::Gaussian
        } else {
            InitialCost::Quadratic(spec.p0.clone())
        };
        Self::new(
            spec.dim(),
            spec.b.ncols(),
            Drift::Linear(spec.a.clone()),
            spec.b.transpose(),
            RunningCost::Quadratic {
                state_weight: 1.0,
                control_weight: 1.0,
            },
            initial,
        )
    }

    /// `f = a`, `l = |a|^2 / 2`, so that `H(x, p) = |p|^2 / 2`.
    pub fn kinetic(dim: usize, initial: InitialCost) -> Result<Self> {
        Self::new(
            dim,
            dim,
            Drift::Zero,
            DMatrix::identity(dim, dim),
            RunningCost::Quadratic {
                state_weight: 0.0,
                control_weight: 0.5,
            },
            initial,
        )
    }

    /// No dynamics and no running cost: `H ≡ 0`. Fails strong convexity.
    pub fn zero(dim: usize, initial: InitialCost) -> Result<Self> {
        Self::new(
            dim,
            dim,
            Drift::Zero,
            DMatrix::zeros(dim, dim),
            RunningCost::Quadratic {
                state_weight: 0.0,
                control_weight: 0.0,
            },
            initial,
        )
    }

    pub fn with_initial(mut self, initial: InitialCost) -> Self {
        self.initial = initial;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn control_gain(&self) -> &DMatrix<f64> {
        &self.control_gain
    }

    pub fn drift(&self) -> &Drift {
        &self.drift
    }

    pub fn cost(&self) -> &RunningCost {
        &self.cost
    }

    pub fn initial(&self) -> &InitialCost {
        &self.initial
    }

    pub fn strong_convexity_modulus(&self) -> f64 {
        match &self.cost {
            RunningCost::Quadratic { control_weight, .. } => 2.0 * control_weight,
            RunningCost::Custom { modulus, .. } => *modulus,
        }
    }

    /// True when the control has no effect and costs nothing (`H` is then
    /// independent of the momentum through the control term).
    pub fn is_control_free(&self) -> bool {
        self.control_gain.iter().all(|v| *v == 0.0)
    }

    pub fn drift_free(&self, x: &[f64], out: &mut [f64]) {
        match &self.drift {
            Drift::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            Drift::Linear(a) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..self.dim).map(|j| a[(i, j)] * x[j]).sum();
                }
            }
            Drift::Custom { f0, .. } => out.copy_from_slice(&f0(x)),
        }
    }

    /// `f(x, a) = f0(x) + c_f^T a`, written into `out`.
    pub fn dynamics(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        self.drift_free(x, out);
        for (i, o) in out.iter_mut().enumerate() {
            for (k, ak) in a.iter().enumerate() {
                *o += self.control_gain[(k, i)] * ak;
            }
        }
    }

    /// `(D_x f)^T λ`, i.e. component `i` is `Σ_j λ_j ∂_i f_j`.
    pub fn drift_jacobian_transpose_apply(&self, x: &[f64], lambda: &[f64], out: &mut [f64]) {
        match &self.drift {
            Drift::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            Drift::Linear(a) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..self.dim).map(|j| a[(j, i)] * lambda[j]).sum();
                }
            }
            Drift::Custom { jacobian, .. } => {
                let jac = jacobian(x);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..self.dim).map(|j| jac[(j, i)] * lambda[j]).sum();
                }
            }
        }
    }

    pub fn running_cost(&self, x: &[f64], a: &[f64]) -> f64 {
        match &self.cost {
            RunningCost::Quadratic {
                state_weight,
                control_weight,
            } => state_weight * norm_sq(x) + control_weight * norm_sq(a),
            RunningCost::Custom { cost, .. } => cost(x, a),
        }
    }

    pub fn running_cost_grad_x(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        match &self.cost {
            RunningCost::Quadratic { state_weight, .. } => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = 2.0 * state_weight * xi;
                }
            }
            RunningCost::Custom { grad_x, .. } => out.copy_from_slice(&grad_x(x, a)),
        }
    }

    pub fn running_cost_grad_a(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        match &self.cost {
            RunningCost::Quadratic { control_weight, .. } => {
                for (o, ai) in out.iter_mut().zip(a) {
                    *o = 2.0 * control_weight * ai;
                }
            }
            RunningCost::Custom { grad_a, .. } => out.copy_from_slice(&grad_a(x, a)),
        }
    }

    pub fn initial_value(&self, x: &[f64]) -> f64 {
        match &self.initial {
            InitialCost::Gaussian => (-norm_sq(x)).exp(),
            InitialCost::Quadratic(p0) => quad_form(p0, x),
            InitialCost::Custom { value, .. } => value(x),
        }
    }

    pub fn initial_gradient(&self, x: &[f64], out: &mut [f64]) {
        match &self.initial {
            InitialCost::Gaussian => {
                let e = (-norm_sq(x)).exp();
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = -2.0 * xi * e;
                }
            }
            InitialCost::Quadratic(p0) => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..self.dim).map(|j| (p0[(i, j)] + p0[(j, i)]) * x[j]).sum();
                }
            }
            InitialCost::Custom { gradient, .. } => out.copy_from_slice(&gradient(x)),
        }
    }

    /// `c_f λ` (length `p`).
    fn gain_apply(&self, lambda: &[f64]) -> Vec<f64> {
        (0..self.control_dim)
            .map(|k| (0..self.dim).map(|i| self.control_gain[(k, i)] * lambda[i]).sum())
            .collect()
    }

    /// The maximizer of `λ·(-f(x, a)) - l(x, a)` over controls.
    pub fn policy_argmax(&self, x: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
        self.policy_argmax_from(x, lambda, None)
    }

    /// Like [`policy_argmax`](Self::policy_argmax); `start` seeds the Newton
    /// iteration for non-quadratic costs.
    pub fn policy_argmax_from(&self, x: &[f64], lambda: &[f64], start: Option<&[f64]>) -> Result<Vec<f64>> {
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("costate must be finite"));
        }
        let gain = self.gain_apply(lambda);
        match &self.cost {
            RunningCost::Quadratic { control_weight, .. } => {
                if *control_weight == 0.0 {
                    if gain.iter().all(|g| *g == 0.0) {
                        return Ok(vec![0.0; self.control_dim]);
                    }
                    return Err(Error::numerical(
                        "control cost vanishes: supremum over controls is unbounded",
                        vec![],
                    ));
                }
                Ok(gain.iter().map(|g| -g / (2.0 * control_weight)).collect())
            }
            RunningCost::Custom { grad_a, hess_aa, cost, .. } => {
                newton_argmax(x, &gain, start, grad_a.as_ref(), hess_aa.as_ref(), cost.as_ref(), self.control_dim)
            }
        }
    }

    /// `H(x, p) = sup_a ( p·(-f(x, a)) - l(x, a) )`.
    pub fn hamiltonian(&self, x: &[f64], p: &[f64]) -> Result<f64> {
        let mut f0 = vec![0.0; self.dim];
        self.drift_free(x, &mut f0);
        match &self.cost {
            RunningCost::Quadratic {
                state_weight,
                control_weight,
            } => {
                let gain = self.gain_apply(p);
                let control_part = if *control_weight == 0.0 {
                    if gain.iter().any(|g| *g != 0.0) {
                        return Err(Error::numerical("unbounded Hamiltonian: zero control cost", vec![]));
                    }
                    0.0
                } else {
                    norm_sq(&gain) / (4.0 * control_weight)
                };
                Ok(-dot(p, &f0) + control_part - state_weight * norm_sq(x))
            }
            RunningCost::Custom { .. } => {
                let a = self.policy_argmax(x, p)?;
                Ok(self.control_objective(x, p, &a))
            }
        }
    }

    /// `p·(-f(x, a)) - l(x, a)`.
    pub fn control_objective(&self, x: &[f64], p: &[f64], a: &[f64]) -> f64 {
        let mut f = vec![0.0; self.dim];
        self.dynamics(x, a, &mut f);
        -dot(p, &f) - self.running_cost(x, a)
    }
}

fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += x[i] * m[(i, j)] * x[j];
        }
    }
    s
}

/// Damped Newton on `g(a) = -gain - D_a l(x, a) = 0`, maximizing
/// `φ(a) = -gain·a - l(x, a)`.
fn newton_argmax(
    x: &[f64],
    gain: &[f64],
    start: Option<&[f64]>,
    grad_a: &(dyn Fn(&[f64], &[f64]) -> Vec<f64> + Send + Sync),
    hess_aa: &(dyn Fn(&[f64], &[f64]) -> DMatrix<f64> + Send + Sync),
    cost: &(dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync),
    p: usize,
) -> Result<Vec<f64>> {
    let objective = |a: &[f64]| -dot(gain, a) - cost(x, a);
    let mut a = start.map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; p]);
    let mut trace = Vec::with_capacity(NEWTON_MAX_ITERS);
    for _ in 0..NEWTON_MAX_ITERS {
        let da = grad_a(x, &a);
        let g: Vec<f64> = gain.iter().zip(&da).map(|(c, d)| -c - d).collect();
        let gnorm = norm(&g);
        trace.push(gnorm);
        if !gnorm.is_finite() {
            break;
        }
        if gnorm < NEWTON_TOL {
            return Ok(a);
        }
        let hess = hess_aa(x, &a);
        let Some(chol) = hess.cholesky() else {
            return Err(Error::numerical(
                "control Hessian of the running cost is not positive definite",
                trace,
            ));
        };
        let step = chol.solve(&DVector::from_column_slice(&g));
        let full: Vec<f64> = a.iter().zip(step.iter()).map(|(ai, si)| ai + si).collect();
        let residual_at = |b: &[f64]| {
            let db = grad_a(x, b);
            norm(&gain.iter().zip(&db).map(|(c, d)| -c - d).collect::<Vec<_>>())
        };
        if residual_at(&full) < gnorm {
            a = full;
            continue;
        }
        // backtracking on the objective (ascent direction since the Hessian is definite)
        let slope = dot(&g, step.as_slice());
        let phi0 = objective(&a);
        let mut t = 0.5;
        for _ in 0..40 {
            let trial: Vec<f64> = a.iter().zip(step.iter()).map(|(ai, si)| ai + t * si).collect();
            if objective(&trial) >= phi0 + 1e-4 * t * slope {
                a = trial;
                break;
            }
            t *= 0.5;
        }
    }
    Err(Error::numerical(
        "Newton iteration for the policy maximizer did not converge",
        trace,
    ))
}

/// Integrates the Riccati system for the LQR family with diffusion `eps`:
/// `P' = -P B B^T P + P A + A^T P + I`, `c' = 2 eps tr P`, from `(P0, 0)`.
/// `u(x, t) = x^T P(t) x + c(t)` then solves `u_t + H(x, Du) = eps Δu`.
pub fn riccati_oracle(spec: &LqrSpec, eps: f64, t: f64, rk4_step: f64) -> Result<(DMatrix<f64>, f64)> {
    spec.validate()?;
    if !(rk4_step > 0.0) {
        return Err(Error::invalid("Riccati step must be positive"));
    }
    if t < 0.0 {
        return Err(Error::invalid("Riccati horizon must be non-negative"));
    }
    let mut p = spec.p0.clone();
    let mut c = 0.0;
    if t == 0.0 {
        return Ok((p, c));
    }
    let bbt = &spec.b * spec.b.transpose();
    let a = &spec.a;
    let d = a.nrows();
    let id = DMatrix::<f64>::identity(d, d);
    let rhs = |p: &DMatrix<f64>| -> (DMatrix<f64>, f64) {
        let dp = -(p * &bbt * p) + p * a + a.transpose() * p + &id;
        (dp, 2.0 * eps * p.trace())
    };
    let n = (t / rk4_step).ceil().max(1.0) as usize;
    let dt = t / n as f64;
    for _ in 0..n {
        let (k1, c1) = rhs(&p);
        let (k2, c2) = rhs(&(&p + &k1 * (dt / 2.0)));
        let (k3, c3) = rhs(&(&p + &k2 * (dt / 2.0)));
        let (k4, c4) = rhs(&(&p + &k3 * dt));
        p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        c += (c1 + 2.0 * c2 + 2.0 * c3 + c4) * (dt / 6.0);
    }
    Ok((p, c))
}

/// Sampled estimates of the growth and convexity constants of a problem.
/// Purely informational.
#[derive(Clone, Debug, serde::Serialize)]
pub struct AssumptionReport {
    /// `max |f(x,a)| / (1 + |x| + |a|)`
    pub dynamics_growth: f64,
    /// Frobenius norm of `c_f`.
    pub control_gain_norm: f64,
    /// `max |l(x,a)| / (1 + |x|^2 + |a|^2)` and `max |D_x l| / (1 + |x| + |a|)`
    pub cost_growth: f64,
    /// Smallest sampled directional second difference of `a ↦ l(x, a)`.
    pub convexity_modulus: f64,
    /// `max |∇u0(x)| / (1 + |x|)`
    pub initial_gradient_growth: f64,
    /// `max |<D^2 u0(x) e, e>|` over sampled points and unit directions.
    pub initial_hessian_sup: f64,
    /// Set when the sampled convexity modulus is (numerically) zero.
    pub degenerate_convexity: bool,
    pub samples_used: usize,
}

pub fn assumption_diagnostics(problem: &ControlProblem, lo: &[f64], hi: &[f64], n_samples: usize, seed: u64) -> Result<AssumptionReport> {
    let d = problem.dim();
    let p = problem.control_dim();
    if lo.len() != d || hi.len() != d || lo.iter().zip(hi).any(|(l, h)| l > h) {
        return Err(Error::invalid("sample box must be non-empty and match the state dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // deterministic anchors: box centre and corners (capped), then uniform samples
    let mut points: Vec<Vec<f64>> = vec![lo.iter().zip(hi).map(|(l, h)| 0.5 * (l + h)).collect()];
    let corners = 1usize << d.min(6);
    for mask in 0..corners {
        points.push((0..d).map(|i| if (mask >> i.min(63)) & 1 == 1 { hi[i] } else { lo[i] }).collect());
    }
    for _ in 0..n_samples {
        points.push(
            (0..d)
                .map(|i| if hi[i] > lo[i] { rng.gen_range(lo[i]..=hi[i]) } else { lo[i] })
                .collect(),
        );
    }

    let mut report = AssumptionReport {
        dynamics_growth: 0.0,
        control_gain_norm: problem.control_gain().norm(),
        cost_growth: 0.0,
        convexity_modulus: f64::INFINITY,
        initial_gradient_growth: 0.0,
        initial_hessian_sup: 0.0,
        degenerate_convexity: false,
        samples_used: 0,
    };
    let delta_a = 1e-3;
    let delta_x = 1e-4;
    let mut f = vec![0.0; d];
    let mut gx = vec![0.0; d];
    let mut gu = vec![0.0; d];
    for x in &points {
        let a: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        if x.iter().chain(&a).any(|v| !v.is_finite()) {
            continue;
        }
        report.samples_used += 1;
        problem.dynamics(x, &a, &mut f);
        let (nx, na) = (norm(x), norm(&a));
        report.dynamics_growth = report.dynamics_growth.max(norm(&f) / (1.0 + nx + na));
        let l = problem.running_cost(x, &a);
        problem.running_cost_grad_x(x, &a, &mut gx);
        report.cost_growth = report
            .cost_growth
            .max(l.abs() / (1.0 + nx * nx + na * na))
            .max(norm(&gx) / (1.0 + nx + na));

        // second differences of l in a along coordinate directions and one random unit direction
        let mut dirs: Vec<Vec<f64>> = (0..p).map(|k| (0..p).map(|j| if j == k { 1.0 } else { 0.0 }).collect()).collect();
        let r: Vec<f64> = (0..p).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let rn = norm(&r);
        if rn > 1e-12 {
            dirs.push(r.iter().map(|v| v / rn).collect());
        }
        for e in &dirs {
            let ap: Vec<f64> = a.iter().zip(e).map(|(ai, ei)| ai + delta_a * ei).collect();
            let am: Vec<f64> = a.iter().zip(e).map(|(ai, ei)| ai - delta_a * ei).collect();
            let second = (problem.running_cost(x, &ap) - 2.0 * l + problem.running_cost(x, &am)) / (delta_a * delta_a);
            if second.is_finite() {
                report.convexity_modulus = report.convexity_modulus.min(second);
            }
        }

        problem.initial_gradient(x, &mut gu);
        report.initial_gradient_growth = report.initial_gradient_growth.max(norm(&gu) / (1.0 + nx));
        let u = problem.initial_value(x);
        for k in 0..d {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += delta_x;
            xm[k] -= delta_x;
            let second = (problem.initial_value(&xp) - 2.0 * u + problem.initial_value(&xm)) / (delta_x * delta_x);
            if second.is_finite() {
                report.initial_hessian_sup = report.initial_hessian_sup.max(second.abs());
            }
        }
    }
    if !report.convexity_modulus.is_finite() {
        report.convexity_modulus = 0.0;
    }
    report.degenerate_convexity = report.convexity_modulus <= 1e-8;
    Ok(report)
}
