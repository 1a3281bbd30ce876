//! The splitting scheme `v(t_i) = S^H_h ∘ S^HJ_h v(t_{i-1})`, monotone
//! finite-difference and closed-form reference solvers, regularity traces,
//! and the convergence-rate study against a viscous reference.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::{fit_rate, RateFit};
use crate::heat::{heat_apply_grid, heat_apply_points, heat_apply_points_gradient, periodic_implicit_diffusion, GridField, SmoothingSpec};
use crate::learning::{GridInterpolant, ValueApproximator, ValueField};
use crate::pi_lambda::{pi_lambda_slice, PiLambdaConfig, SliceModel, SliceReport, TimeSliceState};
use crate::problem::{ControlProblem, Drift, RunningCost};

/// `H(x, p)` evaluated pointwise; failures surface as NaN.
pub type HamiltonianFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

pub fn hamiltonian_of(problem: &ControlProblem) -> HamiltonianFn {
    let p = problem.clone();
    Arc::new(move |x, q| p.hamiltonian(x, q).unwrap_or(f64::NAN))
}

/// True when the problem has no drift, no control influence and no state cost.
pub fn hamiltonian_vanishes(problem: &ControlProblem) -> bool {
    matches!(problem.drift(), Drift::Zero)
        && problem.is_control_free()
        && matches!(problem.cost(), RunningCost::Quadratic { state_weight, .. } if *state_weight == 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FdConfig {
    /// Fraction of the combined transport/diffusion stability limit.
    pub cfl: f64,
    /// Sup-norm agreement required between the two finest reference levels.
    pub reference_tolerance: f64,
    /// Number of coarser levels (each a factor 2) solved for the refinement check.
    pub refinement_levels: usize,
    /// Steps between re-estimates of the Lax–Friedrichs coefficient.
    pub alpha_refresh: usize,
    /// Treat the part of the viscosity not covered by the Lax–Friedrichs
    /// term with backward Euler, so the step follows the transport limit
    /// instead of `dx^2 / eps`.
    pub implicit_diffusion: bool,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            cfl: 0.45,
            reference_tolerance: 5e-3,
            refinement_levels: 2,
            alpha_refresh: 20,
            implicit_diffusion: true,
        }
    }
}

impl FdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::Config("fd.cfl must lie in (0, 1]".into()));
        }
        if !(self.reference_tolerance > 0.0) || self.alpha_refresh == 0 {
            return Err(Error::Config("fd.reference_tolerance and fd.alpha_refresh must be positive".into()));
        }
        Ok(())
    }
}

/// Neighbour tables of a periodic 1D or 2D grid.
struct Stencil {
    dim: usize,
    dx: f64,
    plus: Vec<Vec<usize>>,
    minus: Vec<Vec<usize>>,
    points: Vec<f64>,
}

impl Stencil {
    fn new(field: &GridField) -> Result<Self> {
        if !field.periodic || field.dim > 2 {
            return Err(Error::invalid("finite-difference solvers need a periodic 1D or 2D grid"));
        }
        let n = field.resolution;
        let d = field.dim;
        let len = field.len();
        let mut plus = vec![vec![0; len]; d];
        let mut minus = vec![vec![0; len]; d];
        let mut idx = vec![0usize; d];
        let mut points = vec![0.0; len * d];
        for i in 0..len {
            field.multi_index(i, &mut idx);
            field.point_into(i, &mut points[i * d..(i + 1) * d]);
            for k in 0..d {
                let stride = n.pow((d - 1 - k) as u32);
                let j = idx[k];
                plus[k][i] = i + ((j + 1) % n) * stride - j * stride;
                minus[k][i] = i + ((j + n - 1) % n) * stride - j * stride;
            }
        }
        Ok(Self {
            dim: d,
            dx: field.spacing(),
            plus,
            minus,
            points,
        })
    }

    fn one_sided(&self, u: &[f64], i: usize, pm: &mut [f64], pp: &mut [f64]) {
        for k in 0..self.dim {
            pm[k] = (u[i] - u[self.minus[k][i]]) / self.dx;
            pp[k] = (u[self.plus[k][i]] - u[i]) / self.dx;
        }
    }
}

/// Largest `|∂H/∂p_k|` per axis over the one-sided gradients of `u`.
fn lf_coefficients(h: &dyn Fn(&[f64], &[f64]) -> f64, st: &Stencil, u: &[f64]) -> Vec<f64> {
    let d = st.dim;
    let mut alpha = vec![0.0f64; d];
    let (mut pm, mut pp, mut q) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    for i in 0..u.len() {
        st.one_sided(u, i, &mut pm, &mut pp);
        let x = &st.points[i * d..(i + 1) * d];
        for p in [&pm, &pp] {
            for k in 0..d {
                let delta = 1e-6 * (1.0 + p[k].abs());
                q.copy_from_slice(p);
                q[k] = p[k] + delta;
                let hp = h(x, &q);
                q[k] = p[k] - delta;
                let hm = h(x, &q);
                alpha[k] = alpha[k].max(((hp - hm) / (2.0 * delta)).abs());
            }
        }
    }
    alpha
}

/// Evolves `u_t + H(x, Du) = eps Δu` for time `t` on a periodic grid with
/// the global Lax–Friedrichs flux.
///
/// Along each axis the scheme diffuses with `max(eps, α dx / 2)`: where the
/// physical viscosity exceeds what monotonicity needs, no artificial term is
/// added. In explicit mode everything is forward Euler under the combined
/// limit. In implicit mode the Lax–Friedrichs step carries `α dx / 2` and the
/// remainder `eps - α dx / 2` is applied by backward Euler.
pub fn lax_friedrichs_evolve(h: &dyn Fn(&[f64], &[f64]) -> f64, field: &GridField, eps: f64, t: f64, fd: &FdConfig) -> Result<GridField> {
    fd.validate()?;
    if !(eps >= 0.0) || !(t >= 0.0) {
        return Err(Error::invalid("eps and t must be non-negative"));
    }
    let st = Stencil::new(field)?;
    let d = st.dim;
    let dx = st.dx;
    let implicit = fd.implicit_diffusion && eps > 0.0;
    let mut u = field.values.clone();
    let mut next = vec![0.0; u.len()];
    let (mut pm, mut pp, mut pc) = (vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut done = 0.0;
    let mut steps = 0usize;
    let mut dt = 0.0;
    // explicit second-difference weight per axis, and the implicit remainder
    let mut visc = vec![0.0; d];
    let mut rest = vec![0.0; d];
    let explicit_eps = if implicit { 0.0 } else { eps };
    while done < t {
        if steps.is_multiple_of(fd.alpha_refresh) {
            // margin for gradient growth between refreshes
            let alpha: Vec<f64> = lf_coefficients(h, &st, &u).into_iter().map(|a| 1.2 * a + 1e-12).collect();
            let rate = if implicit {
                // the floor keeps backward Euler accurate when transport is slow
                alpha.iter().sum::<f64>().max(1.0) / dx
            } else {
                alpha.iter().sum::<f64>() / dx + 2.0 * eps * d as f64 / (dx * dx)
            };
            dt = fd.cfl / rate;
            for k in 0..d {
                let lf = 0.5 * alpha[k] * dx;
                if implicit {
                    visc[k] = lf;
                    rest[k] = (eps - lf).max(0.0);
                } else {
                    visc[k] = (lf - eps).max(0.0);
                }
            }
        }
        let step = dt.min(t - done);
        for i in 0..u.len() {
            st.one_sided(&u, i, &mut pm, &mut pp);
            let x = &st.points[i * d..(i + 1) * d];
            let mut diffusion = 0.0;
            for k in 0..d {
                pc[k] = 0.5 * (pm[k] + pp[k]);
                diffusion += (visc[k] + explicit_eps) * (pp[k] - pm[k]) / dx;
            }
            next[i] = u[i] - step * h(x, &pc) + step * diffusion;
        }
        std::mem::swap(&mut u, &mut next);
        if implicit && rest.iter().any(|r| *r > 0.0) {
            let coef: Vec<f64> = rest.iter().map(|r| step * r / (dx * dx)).collect();
            periodic_implicit_diffusion(&mut u, d, field.resolution, &coef);
        }
        done += step;
        steps += 1;
        if steps.is_multiple_of(fd.alpha_refresh) && !u.iter().all(|v| v.is_finite()) {
            return Err(Error::numerical(
                format!("finite-difference solution became non-finite at t = {done}"),
                vec![done],
            ));
        }
    }
    if !u.iter().all(|v| v.is_finite()) {
        return Err(Error::numerical("finite-difference solution became non-finite", vec![t]));
    }
    Ok(field.with_values(u))
}

#[derive(Clone, Debug)]
pub struct FdReference {
    pub solution: GridField,
    /// Resolutions from coarsest to finest.
    pub resolutions: Vec<usize>,
    /// Sup-norm difference between consecutive levels on the coarser nodes.
    pub level_differences: Vec<f64>,
}

fn coarsen(field: &GridField, factor: usize) -> Result<GridField> {
    if !field.resolution.is_multiple_of(factor) {
        return Err(Error::invalid("grid resolution is not divisible by the refinement factor"));
    }
    let n = field.resolution / factor;
    let mut idx = vec![0usize; field.dim];
    let values = (0..n.pow(field.dim as u32))
        .map(|c| {
            let mut rem = c;
            let mut fine = 0;
            for k in (0..field.dim).rev() {
                idx[k] = rem % n;
                rem /= n;
            }
            for k in 0..field.dim {
                fine = fine * field.resolution + idx[k] * factor;
            }
            field.values[fine]
        })
        .collect();
    GridField::new(field.dim, n, field.lo, field.hi, field.periodic, values)
}

/// Viscous reference `u_t + H(x, Du) = eps Δu` on the grid of `u0`, with
/// the same scheme on `refinement_levels` successively halved grids. Fails
/// with the level differences when the two finest levels disagree by more
/// than the tolerance.
pub fn fd_viscous_reference(h: &dyn Fn(&[f64], &[f64]) -> f64, u0: &GridField, eps: f64, t: f64, fd: &FdConfig) -> Result<FdReference> {
    let solution = lax_friedrichs_evolve(h, u0, eps, t, fd)?;
    let mut levels = vec![solution.clone()];
    let mut resolutions = vec![u0.resolution];
    for l in 1..=fd.refinement_levels {
        let factor = 1usize << l;
        if u0.resolution / factor < 8 {
            break;
        }
        let coarse0 = coarsen(u0, factor)?;
        levels.push(lax_friedrichs_evolve(h, &coarse0, eps, t, fd)?);
        resolutions.push(coarse0.resolution);
    }
    levels.reverse();
    resolutions.reverse();
    let mut level_differences = Vec::new();
    for w in levels.windows(2) {
        let fine_on_coarse = coarsen(&w[1], 2)?;
        let diff = fine_on_coarse
            .values
            .iter()
            .zip(&w[0].values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        level_differences.push(diff);
    }
    if let Some(&last) = level_differences.last() {
        if last > fd.reference_tolerance {
            let n = level_differences.len();
            let trace = level_differences[n.saturating_sub(2)..].to_vec();
            return Err(Error::numerical(
                format!(
                    "reference refinement did not converge: finest level difference {last:.3e} exceeds {:.3e}",
                    fd.reference_tolerance
                ),
                trace,
            ));
        }
    }
    Ok(FdReference {
        solution,
        resolutions,
        level_differences,
    })
}

/// Exact solution of `u_t + ½|Du|^2 = eps Δu` through
/// `u = -2 eps ln S_t exp(-u0 / (2 eps))`, with the heat step spectral.
pub fn cole_hopf_reference(u0: &GridField, eps: f64, t: f64) -> Result<GridField> {
    if !(eps > 0.0) {
        return Err(Error::invalid("Cole–Hopf needs eps > 0"));
    }
    let shift = u0.values.iter().cloned().fold(f64::INFINITY, f64::min);
    let w0 = u0.with_values(u0.values.iter().map(|v| (-(v - shift) / (2.0 * eps)).exp()).collect());
    let w = heat_apply_grid(&w0, eps * t)?;
    let values = w
        .values
        .iter()
        .map(|v| {
            if *v > 0.0 {
                Ok(shift - 2.0 * eps * v.ln())
            } else {
                Err(Error::numerical("Cole–Hopf heat step lost positivity", vec![*v]))
            }
        })
        .collect::<Result<_>>()?;
    Ok(u0.with_values(values))
}

/// Hopf–Lax formula `u(x, t) = min_y u0(y) + |x - y|^2 / (2t)` for
/// `H(p) = ½p^2` in 1D, minimized over the grid nodes (and their periodic
/// images on a torus).
pub fn hopf_lax_reference(u0: &GridField, t: f64) -> Result<GridField> {
    if u0.dim != 1 {
        return Err(Error::invalid("the Hopf–Lax oracle is one-dimensional"));
    }
    if !(t > 0.0) {
        return Ok(u0.clone());
    }
    let n = u0.len();
    let period = u0.hi - u0.lo;
    let shifts: &[f64] = if u0.periodic { &[-1.0, 0.0, 1.0] } else { &[0.0] };
    let values = (0..n)
        .map(|i| {
            let x = u0.coordinate(i);
            let mut best = f64::INFINITY;
            for j in 0..n {
                for s in shifts {
                    let y = u0.coordinate(j) + s * period;
                    best = best.min(u0.values[j] + (x - y) * (x - y) / (2.0 * t));
                }
            }
            best
        })
        .collect();
    Ok(u0.with_values(values))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HjBackend {
    PiLambda,
    FdOracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    Grid,
    Approximator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepOrder {
    HjThenHeat,
    HeatThenHj,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRunConfig {
    pub eps: f64,
    pub horizon: f64,
    pub n_steps: usize,
    pub hj_backend: HjBackend,
    pub heat: SmoothingSpec,
    pub representation: Representation,
    pub order: StepOrder,
    pub fd: FdConfig,
    pub pi_lambda: PiLambdaConfig,
    /// Record the regularity trace (grid representation only).
    pub trace: bool,
}

impl Default for SplitRunConfig {
    fn default() -> Self {
        Self {
            eps: 0.01,
            horizon: 1.0,
            n_steps: 10,
            hj_backend: HjBackend::PiLambda,
            heat: SmoothingSpec::default_for(1),
            representation: Representation::Approximator,
            order: StepOrder::HjThenHeat,
            fd: FdConfig::default(),
            pi_lambda: PiLambdaConfig::default(),
            trace: true,
        }
    }
}

impl SplitRunConfig {
    /// Step size `T/n`.
    pub fn step(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// `t_i = iT/n`, computed from the integers so that `t_n = T` exactly.
    pub fn time(&self, i: usize) -> f64 {
        self.horizon * i as f64 / self.n_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.eps) && self.eps != 1.0 {
            return Err(Error::Config("splitting.eps must lie in [0, 1]".into()));
        }
        if !(self.horizon > 0.0) || self.n_steps == 0 {
            return Err(Error::Config("splitting needs a positive horizon and at least one step".into()));
        }
        if self.representation == Representation::Approximator && self.hj_backend == HjBackend::FdOracle {
            return Err(Error::Config("the fd-oracle backend works on the grid representation only".into()));
        }
        self.heat.validate()?;
        self.fd.validate()?;
        if self.hj_backend == HjBackend::PiLambda {
            self.pi_lambda.validate()?;
        }
        Ok(())
    }
}

/// A value at one time: a grid (for the grid representation) or a slice model.
#[derive(Clone)]
pub enum SplitState {
    Grid(GridField),
    Model(SliceModel),
}

#[derive(Clone, Debug, Serialize)]
pub struct StepFailure {
    pub step: usize,
    pub message: String,
}

#[derive(Clone)]
pub struct SplitResult {
    /// `t_0, …, t_m` for the states that were computed.
    pub times: Vec<f64>,
    pub states: Vec<SplitState>,
    /// One report per PI-λ slice.
    pub slice_reports: Vec<SliceReport>,
    pub trace: Option<RegularityTrace>,
    pub failure: Option<StepFailure>,
}

impl SplitResult {
    pub fn final_grid(&self) -> Option<&GridField> {
        match self.states.last()? {
            SplitState::Grid(g) => Some(g),
            SplitState::Model(_) => None,
        }
    }

    pub fn grids(&self) -> Vec<&GridField> {
        self.states
            .iter()
            .filter_map(|s| match s {
                SplitState::Grid(g) => Some(g),
                SplitState::Model(_) => None,
            })
            .collect()
    }
}

/// A field smoothed pointwise by quadrature or Monte Carlo.
pub struct SmoothedField {
    pub inner: Arc<dyn ValueField>,
    pub eps_t: f64,
    pub spec: SmoothingSpec,
}

impl ValueField for SmoothedField {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        let f = |y: &[f64]| self.inner.value(y);
        heat_apply_points(&f, &[x.to_vec()], self.eps_t, &self.spec).map_or(f64::NAN, |s| s.values[0])
    }
    fn value_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let g = |y: &[f64]| self.inner.gradient(y);
        match heat_apply_points_gradient(&g, &[x.to_vec()], self.eps_t, &self.spec) {
            Ok(v) => grad.copy_from_slice(&v[0]),
            Err(_) => grad.fill(f64::NAN),
        }
        self.value(x)
    }
}

fn heat_step(state: SplitState, eps_t: f64, spec: &SmoothingSpec) -> Result<SplitState> {
    if eps_t == 0.0 {
        return Ok(state);
    }
    Ok(match state {
        SplitState::Grid(g) => SplitState::Grid(heat_apply_grid(&g, eps_t)?),
        SplitState::Model(m) => match m.as_rbf() {
            Some(r) => SplitState::Model(SliceModel::Approximator(ValueApproximator::Rbf(r.heat_applied(eps_t)?))),
            None => SplitState::Model(SliceModel::Field(Arc::new(SmoothedField {
                inner: m.into_field(),
                eps_t,
                spec: spec.clone(),
            }))),
        },
    })
}

fn hj_step(
    problem: &ControlProblem,
    hamiltonian: &dyn Fn(&[f64], &[f64]) -> f64,
    state: &SplitState,
    index: usize,
    cfg: &SplitRunConfig,
) -> Result<(SplitState, Option<SliceReport>)> {
    let h = cfg.step();
    if hamiltonian_vanishes(problem) {
        return Ok((state.clone(), None));
    }
    match (state, cfg.hj_backend) {
        (SplitState::Grid(g), HjBackend::FdOracle) => Ok((SplitState::Grid(lax_friedrichs_evolve(hamiltonian, g, 0.0, h, &cfg.fd)?), None)),
        (SplitState::Grid(g), HjBackend::PiLambda) => {
            let prev = TimeSliceState {
                index,
                time: cfg.time(index),
                model: SliceModel::Field(Arc::new(GridInterpolant { field: g.clone() })),
            };
            let (next, rep) = pi_lambda_slice(problem, &prev, h, &cfg.pi_lambda)?;
            let mut x = vec![0.0; g.dim];
            let values = (0..g.len())
                .map(|i| {
                    g.point_into(i, &mut x);
                    next.model.value(&x)
                })
                .collect();
            Ok((SplitState::Grid(g.with_values(values)), Some(rep)))
        }
        (SplitState::Model(m), HjBackend::PiLambda) => {
            let prev = TimeSliceState {
                index,
                time: cfg.time(index),
                model: m.clone(),
            };
            let (next, rep) = pi_lambda_slice(problem, &prev, h, &cfg.pi_lambda)?;
            Ok((SplitState::Model(next.model), Some(rep)))
        }
        (SplitState::Model(_), HjBackend::FdOracle) => Err(Error::Config("the fd-oracle backend needs a grid state".into())),
    }
}

/// Runs `n_steps` splitting steps from `u0`. A failure inside a step ends
/// the run early: the result holds every completed state and the failure.
pub fn split_solve(problem: &ControlProblem, u0: SplitState, cfg: &SplitRunConfig) -> Result<SplitResult> {
    cfg.validate()?;
    match (&u0, cfg.representation) {
        (SplitState::Grid(_), Representation::Grid) | (SplitState::Model(_), Representation::Approximator) => {}
        _ => return Err(Error::Config("initial state does not match splitting.representation".into())),
    }
    let hamiltonian = hamiltonian_of(problem);
    let eps_t = cfg.eps * cfg.step();
    let mut result = SplitResult {
        times: vec![0.0],
        states: vec![u0],
        slice_reports: Vec::new(),
        trace: None,
        failure: None,
    };
    for i in 1..=cfg.n_steps {
        let prev = result.states.last().expect("initial state").clone();
        let step = (|| -> Result<(SplitState, Option<SliceReport>)> {
            match cfg.order {
                StepOrder::HjThenHeat => {
                    let (s, rep) = hj_step(problem, &*hamiltonian, &prev, i - 1, cfg)?;
                    Ok((heat_step(s, eps_t, &cfg.heat)?, rep))
                }
                StepOrder::HeatThenHj => {
                    let s = heat_step(prev.clone(), eps_t, &cfg.heat)?;
                    hj_step(problem, &*hamiltonian, &s, i - 1, cfg)
                }
            }
        })();
        match step {
            Ok((s, rep)) => {
                result.states.push(s);
                result.times.push(cfg.time(i));
                result.slice_reports.extend(rep);
            }
            Err(e) => {
                result.failure = Some(StepFailure {
                    step: i,
                    message: e.to_string(),
                });
                break;
            }
        }
    }
    if cfg.trace && cfg.representation == Representation::Grid {
        let grids: Vec<GridField> = result.grids().into_iter().cloned().collect();
        result.trace = Some(regularity_trace(&grids, &result.times));
    }
    Ok(result)
}

#[derive(Clone, Debug, Serialize)]
pub struct RegularityTrace {
    pub times: Vec<f64>,
    /// Largest one-sided difference-quotient gradient norm.
    pub lipschitz: Vec<f64>,
    /// Largest second-difference quotient over axis (and, in 2D, diagonal) directions.
    pub semiconcavity: Vec<f64>,
}

fn lipschitz_estimate(g: &GridField) -> f64 {
    let Ok(st) = Stencil::new(g) else {
        return box_lipschitz(g);
    };
    let d = st.dim;
    let mut best = 0.0f64;
    let (mut pm, mut pp) = (vec![0.0; d], vec![0.0; d]);
    for i in 0..g.len() {
        st.one_sided(&g.values, i, &mut pm, &mut pp);
        best = best.max(pp.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    best
}

fn box_lipschitz(g: &GridField) -> f64 {
    if g.dim != 1 {
        return f64::NAN;
    }
    let dx = g.spacing();
    g.values.windows(2).map(|w| ((w[1] - w[0]) / dx).abs()).fold(0.0, f64::max)
}

fn semiconcavity_estimate(g: &GridField) -> f64 {
    let dx = g.spacing();
    if let Ok(st) = Stencil::new(g) {
        let u = &g.values;
        let mut best = f64::NEG_INFINITY;
        for i in 0..u.len() {
            for k in 0..st.dim {
                best = best.max((u[st.plus[k][i]] - 2.0 * u[i] + u[st.minus[k][i]]) / (dx * dx));
            }
            if st.dim == 2 {
                let pp = st.plus[1][st.plus[0][i]];
                let mm = st.minus[1][st.minus[0][i]];
                let pm = st.minus[1][st.plus[0][i]];
                let mp = st.plus[1][st.minus[0][i]];
                best = best.max((u[pp] - 2.0 * u[i] + u[mm]) / (2.0 * dx * dx));
                best = best.max((u[pm] - 2.0 * u[i] + u[mp]) / (2.0 * dx * dx));
            }
        }
        best
    } else if g.dim == 1 {
        g.values
            .windows(3)
            .map(|w| (w[2] - 2.0 * w[1] + w[0]) / (dx * dx))
            .fold(f64::NEG_INFINITY, f64::max)
    } else {
        f64::NAN
    }
}

pub fn regularity_trace(fields: &[GridField], times: &[f64]) -> RegularityTrace {
    RegularityTrace {
        times: times.to_vec(),
        lipschitz: fields.iter().map(lipschitz_estimate).collect(),
        semiconcavity: fields.iter().map(semiconcavity_estimate).collect(),
    }
}

impl RegularityTrace {
    pub fn is_finite(&self) -> bool {
        self.lipschitz.iter().chain(&self.semiconcavity).all(|v| v.is_finite())
    }

    /// `Lip(t_i) ≤ Lip(t_1) e^{3Λ̂(t_i - t_1)} (1 + rel_tol)` for every `i ≥ 1`.
    pub fn lipschitz_within_envelope(&self, lambda_hat: f64, rel_tol: f64) -> bool {
        if self.lipschitz.len() < 2 {
            return true;
        }
        let (l1, t1) = (self.lipschitz[1], self.times[1]);
        self.lipschitz[1..]
            .iter()
            .zip(&self.times[1..])
            .all(|(l, t)| *l <= l1 * (3.0 * lambda_hat * (t - t1)).exp() * (1.0 + rel_tol) + 1e-12)
    }

    /// Every entry at most `factor · max(SC(t_0), 0)` (plus a small absolute slack).
    pub fn semiconcavity_bounded(&self, factor: f64) -> bool {
        let sc0 = self.semiconcavity.first().copied().unwrap_or(0.0).max(0.0);
        self.semiconcavity.iter().all(|s| *s <= factor * sc0 + 1e-9)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,lipschitz,semiconcavity\n");
        for i in 0..self.times.len() {
            let _ = writeln!(s, "{},{},{}", self.times[i], self.lipschitz[i], self.semiconcavity[i]);
        }
        s
    }
}

/// `max |∂_x H(x, p)| / (1 + |p|)` over grid nodes and `|p| ≤ p_bound`
/// (sampled on a few radii), the growth rate of the Lipschitz envelope.
pub fn estimate_lambda_hat(h: &dyn Fn(&[f64], &[f64]) -> f64, grid: &GridField, p_bound: f64) -> f64 {
    let d = grid.dim;
    let radii = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut best = 0.0f64;
    let mut x = vec![0.0; d];
    let mut p = vec![0.0; d];
    let step = (grid.len() / 256).max(1);
    for i in (0..grid.len()).step_by(step) {
        grid.point_into(i, &mut x);
        for r in radii {
            for k in 0..d {
                for sgn in [-1.0, 1.0] {
                    p.fill(0.0);
                    p[k] = sgn * r * p_bound;
                    for j in 0..d {
                        let delta = 1e-6 * (1.0 + x[j].abs());
                        let mut xp = x.clone();
                        let mut xm = x.clone();
                        xp[j] += delta;
                        xm[j] -= delta;
                        let dh = (h(&xp, &p) - h(&xm, &p)) / (2.0 * delta);
                        best = best.max(dh.abs() / (1.0 + r * p_bound));
                    }
                }
            }
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatumFamily {
    /// `|sin πx|`: Lipschitz with convex kinks.
    Lipschitz,
    /// `1 - |sin πx|`: Lipschitz and semiconcave.
    Semiconcave,
    /// `½(1 - cos 2πx)`.
    Smooth,
}

/// The datum on the unit torus, mollified by a Gaussian of standard
/// deviation `mollify` (a spectral heat step).
pub fn torus_datum(family: DatumFamily, resolution: usize, mollify: f64) -> Result<GridField> {
    use std::f64::consts::PI;
    let f = move |x: &[f64]| match family {
        DatumFamily::Lipschitz => (PI * x[0]).sin().abs(),
        DatumFamily::Semiconcave => 1.0 - (PI * x[0]).sin().abs(),
        DatumFamily::Smooth => 0.5 * (1.0 - (2.0 * PI * x[0]).cos()),
    };
    let g = GridField::from_fn(1, resolution, 0.0, 1.0, true, f)?;
    if mollify > 0.0 && family != DatumFamily::Smooth {
        heat_apply_grid(&g, 0.5 * mollify * mollify)
    } else {
        Ok(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateStudyConfig {
    pub eps: f64,
    pub horizon: f64,
    /// Step sizes as reciprocals `1/h`.
    pub inverse_steps: Vec<usize>,
    pub resolution: usize,
    pub mollify: f64,
    pub datum: DatumFamily,
    pub order: StepOrder,
    pub fd: FdConfig,
}

impl Default for RateStudyConfig {
    fn default() -> Self {
        Self {
            eps: 0.1,
            horizon: 0.5,
            inverse_steps: vec![8, 16, 32, 64, 128],
            resolution: 4096,
            mollify: 1e-3,
            datum: DatumFamily::Semiconcave,
            order: StepOrder::HjThenHeat,
            fd: FdConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct RateRow {
    pub h: f64,
    /// `max(u - v)`.
    pub err_inf_upper: f64,
    /// `max(v - u)`.
    pub err_inf_lower: f64,
    /// `∫ |u - v|`.
    pub err_l1: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RateReport {
    pub rows: Vec<RateRow>,
    pub fit_upper: Option<RateFit>,
    /// Fit of `max(v - u)`; absent when that error is not positive at every `h`.
    pub fit_lower: Option<RateFit>,
    /// `max(v - u) <= 0` at every `h`: the splitting never overshoots.
    pub lower_side_nonpositive: bool,
    /// Fit of `min(u - v) = -max(v - u)`, the distance by which the splitting
    /// stays below the reference, when it is positive at every `h`.
    pub fit_lower_gap: Option<RateFit>,
    pub fit_l1: Option<RateFit>,
    /// `err_l1` strictly decreases as `h` decreases.
    pub l1_monotone: bool,
    pub reference_level_differences: Vec<f64>,
    /// Sup distance between the finite-difference reference and Cole–Hopf.
    pub cole_hopf_gap: Option<f64>,
    pub trace: Option<RegularityTrace>,
}

fn fit_column(rows: &[RateRow], col: impl Fn(&RateRow) -> f64) -> Option<RateFit> {
    let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.h, col(r))).collect();
    fit_rate(&pairs).ok()
}

/// Splitting error against the viscous reference for every step size, on
/// the unit torus with the grid representation and the finite-difference
/// first-order backend.
pub fn splitting_rate_study(problem: &ControlProblem, cfg: &RateStudyConfig) -> Result<RateReport> {
    if problem.dim() != 1 {
        return Err(Error::invalid("the rate study runs on the one-dimensional torus"));
    }
    if cfg.inverse_steps.is_empty() {
        return Err(Error::Config("splitting rate study needs at least one step size".into()));
    }
    let ham = hamiltonian_of(problem);
    let u0 = torus_datum(cfg.datum, cfg.resolution, cfg.mollify)?;
    let reference = fd_viscous_reference(&*ham, &u0, cfg.eps, cfg.horizon, &cfg.fd)?;
    let u = &reference.solution;
    let kinetic = matches!(problem.drift(), Drift::Zero)
        && matches!(problem.cost(), RunningCost::Quadratic { state_weight, control_weight } if *state_weight == 0.0 && *control_weight == 0.5)
        && problem.control_gain().iter().zip([1.0]).all(|(a, b)| *a == b);
    let cole_hopf_gap = if kinetic && cfg.eps > 0.0 {
        let ch = cole_hopf_reference(&u0, cfg.eps, cfg.horizon)?;
        Some(ch.values.iter().zip(&u.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    } else {
        None
    };
    let mut rows = Vec::new();
    let mut trace = None;
    let mut sorted = cfg.inverse_steps.clone();
    sorted.sort_unstable();
    for inv in sorted {
        let n_real = cfg.horizon * inv as f64;
        let n = n_real.round() as usize;
        if n == 0 || (n_real - n as f64).abs() > 1e-9 {
            return Err(Error::Config(format!("h = 1/{inv} does not divide the horizon {}", cfg.horizon)));
        }
        let run = SplitRunConfig {
            eps: cfg.eps,
            horizon: cfg.horizon,
            n_steps: n,
            hj_backend: HjBackend::FdOracle,
            representation: Representation::Grid,
            order: cfg.order,
            fd: cfg.fd,
            ..SplitRunConfig::default()
        };
        let res = split_solve(problem, SplitState::Grid(u0.clone()), &run)?;
        if let Some(f) = &res.failure {
            return Err(Error::numerical(format!("splitting step {} failed: {}", f.step, f.message), vec![]));
        }
        let v = res.final_grid().expect("grid representation");
        let dx = u.spacing();
        let mut upper = f64::NEG_INFINITY;
        let mut lower = f64::NEG_INFINITY;
        let mut l1 = 0.0;
        for (a, b) in u.values.iter().zip(&v.values) {
            upper = upper.max(a - b);
            lower = lower.max(b - a);
            l1 += (a - b).abs() * dx;
        }
        rows.push(RateRow {
            h: 1.0 / inv as f64,
            err_inf_upper: upper,
            err_inf_lower: lower,
            err_l1: l1,
        });
        trace = res.trace;
    }
    // rows are ordered by increasing 1/h, i.e. decreasing h
    let l1_monotone = rows.windows(2).all(|w| w[1].err_l1 < w[0].err_l1);
    Ok(RateReport {
        fit_upper: fit_column(&rows, |r| r.err_inf_upper),
        fit_lower: fit_column(&rows, |r| r.err_inf_lower),
        lower_side_nonpositive: rows.iter().all(|r| r.err_inf_lower <= 0.0),
        fit_lower_gap: fit_column(&rows, |r| -r.err_inf_lower),
        fit_l1: fit_column(&rows, |r| r.err_l1),
        rows,
        l1_monotone,
        reference_level_differences: reference.level_differences,
        cole_hopf_gap,
        trace,
    })
}

pub fn rate_csv(report: &RateReport) -> String {
    let mut s = String::from("h,err_inf_upper,err_inf_lower,err_l1\n");
    for r in &report.rows {
        let _ = writeln!(s, "{},{},{},{}", r.h, r.err_inf_upper, r.err_inf_lower, r.err_l1);
    }
    s
}

pub fn rate_fits_csv(report: &RateReport) -> String {
    let mut s = String::from("quantity,slope,intercept,r2\n");
    for (name, fit) in [
        ("err_inf_upper", &report.fit_upper),
        ("err_inf_lower", &report.fit_lower),
        ("lower_gap", &report.fit_lower_gap),
        ("err_l1", &report.fit_l1),
    ] {
        match fit {
            Some(f) => {
                let _ = writeln!(s, "{name},{},{},{}", f.slope, f.intercept, f.r2);
            }
            None => {
                let _ = writeln!(s, "{name},,,");
            }
        }
    }
    s
}

/// Log–log plot of the error columns against `h`; non-positive entries are skipped.
pub fn rate_svg(report: &RateReport) -> String {
    let (w, hgt, m) = (480.0, 360.0, 50.0);
    let series: [(&str, &str, fn(&RateRow) -> f64); 4] = [
        ("max(u-v)", "#1f77b4", |r| r.err_inf_upper),
        ("max(v-u)", "#d62728", |r| r.err_inf_lower),
        ("min(u-v)", "#ff7f0e", |r| -r.err_inf_lower),
        ("L1", "#2ca02c", |r| r.err_l1),
    ];
    let pts: Vec<(f64, f64)> = report
        .rows
        .iter()
        .flat_map(|r| series.iter().map(move |(_, _, f)| (r.h, f(r))))
        .filter(|(_, e)| *e > 0.0)
        .map(|(h, e)| (h.log10(), e.log10()))
        .collect();
    let mut svg = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{hgt}\">\n");
    if pts.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let (x0, x1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (y0, y1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    let sx = |x: f64| m + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * m);
    let sy = |y: f64| hgt - m - (y - y0) / (y1 - y0).max(1e-12) * (hgt - 2.0 * m);
    let _ = writeln!(
        svg,
        "<rect x=\"{m}\" y=\"{m}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        w - 2.0 * m,
        hgt - 2.0 * m
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"{}\" font-size=\"12\">log10 h</text>",
        w / 2.0 - 20.0,
        hgt - 15.0
    );
    let _ = writeln!(svg, "<text x=\"5\" y=\"{}\" font-size=\"12\">log10 err</text>", m - 10.0);
    for (k, (name, color, f)) in series.iter().enumerate() {
        let line: Vec<String> = report
            .rows
            .iter()
            .filter(|r| f(r) > 0.0)
            .map(|r| format!("{:.2},{:.2}", sx(r.h.log10()), sy(f(r).log10())))
            .collect();
        let _ = writeln!(svg, "<polyline fill=\"none\" stroke=\"{color}\" points=\"{}\"/>", line.join(" "));
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>",
            w - m - 70.0,
            m + 15.0 * (k as f64 + 1.0)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::InitialCost;
    use std::f64::consts::PI;

    fn kinetic() -> ControlProblem {
        ControlProblem::kinetic(1, InitialCost::Gaussian).unwrap()
    }

    fn gaussian_torus(n: usize) -> GridField {
        GridField::from_fn(1, n, -4.0, 4.0, true, |x| (-x[0] * x[0]).exp()).unwrap()
    }

    #[test]
    fn kinetic_hamiltonian_is_half_square() {
        let h = hamiltonian_of(&kinetic());
        assert!((h(&[0.3], &[1.7]) - 0.5 * 1.7 * 1.7).abs() < 1e-12);
    }

    #[test]
    fn zero_hamiltonian_fd_matches_closed_form_heat() {
        // for e^{-x^2}: S_t u = (1 + 4 eps t)^{-1/2} exp(-x^2 / (1 + 4 eps t))
        let zero = ControlProblem::zero(1, InitialCost::Gaussian).unwrap();
        let h = hamiltonian_of(&zero);
        let (eps, t) = (0.1, 0.5);
        let u = lax_friedrichs_evolve(&*h, &gaussian_torus(1024), eps, t, &FdConfig::default()).unwrap();
        let s = 1.0 + 4.0 * eps * t;
        let err = (0..u.len())
            .map(|i| {
                let x = u.coordinate(i);
                (u.values[i] - (-x * x / s).exp() / s.sqrt()).abs()
            })
            .fold(0.0, f64::max);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn fd_viscous_matches_cole_hopf() {
        let u0 = torus_datum(DatumFamily::Smooth, 512, 0.0).unwrap();
        let h = hamiltonian_of(&kinetic());
        let (eps, t) = (0.1, 0.25);
        let fd = fd_viscous_reference(&*h, &u0, eps, t, &FdConfig::default()).unwrap();
        let ch = cole_hopf_reference(&u0, eps, t).unwrap();
        let err = fd
            .solution
            .values
            .iter()
            .zip(&ch.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
        assert_eq!(fd.resolutions, vec![128, 256, 512]);
        assert!(fd.level_differences[1] < fd.level_differences[0]);
    }

    #[test]
    fn inviscid_fd_matches_hopf_lax() {
        // min of two translated parabolas: piecewise smooth with a concave kink
        let u0 = GridField::from_fn(1, 400, -2.0, 2.0, false, |x| ((x[0] - 0.5).powi(2)).min((x[0] + 0.5).powi(2) + 0.1)).unwrap();
        let torus = GridField::new(1, 400, -2.0, 2.0, true, u0.values.clone()).unwrap();
        let h = hamiltonian_of(&kinetic());
        let t = 0.2;
        let fd = lax_friedrichs_evolve(&*h, &torus, 0.0, t, &FdConfig::default()).unwrap();
        let hl = hopf_lax_reference(&u0, t).unwrap();
        let dx = torus.spacing();
        let err = (50..350).map(|i| (fd.values[i] - hl.values[i]).abs()).fold(0.0, f64::max);
        assert!(err < 5.0 * dx, "{err} vs {}", 5.0 * dx);
    }

    #[test]
    fn cole_hopf_without_hamiltonian_effect_is_heat_for_constants() {
        let u0 = GridField::new(1, 64, 0.0, 1.0, true, vec![0.3; 64]).unwrap();
        let u = cole_hopf_reference(&u0, 0.1, 1.0).unwrap();
        assert!(u.values.iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    fn grid_cfg(n: usize, eps: f64, horizon: f64) -> SplitRunConfig {
        SplitRunConfig {
            eps,
            horizon,
            n_steps: n,
            hj_backend: HjBackend::FdOracle,
            representation: Representation::Grid,
            ..SplitRunConfig::default()
        }
    }

    #[test]
    fn zero_hamiltonian_split_is_pure_heat() {
        let zero = ControlProblem::zero(1, InitialCost::Gaussian).unwrap();
        let u0 = gaussian_torus(256);
        let res = split_solve(&zero, SplitState::Grid(u0.clone()), &grid_cfg(5, 0.1, 0.5)).unwrap();
        let direct = heat_apply_grid(&u0, 0.05).unwrap();
        let v = res.final_grid().unwrap();
        let err = v.values.iter().zip(&direct.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-12);
        // mean conserved under pure heat
        assert!((v.integral() - u0.integral()).abs() < 1e-10);
        let tr = res.trace.unwrap();
        assert!(tr.lipschitz.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(tr.semiconcavity.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn eps_zero_split_equals_single_first_order_solve() {
        let u0 = torus_datum(DatumFamily::Smooth, 256, 0.0).unwrap();
        let p = kinetic();
        let res = split_solve(&p, SplitState::Grid(u0.clone()), &grid_cfg(4, 0.0, 0.2)).unwrap();
        let h = hamiltonian_of(&p);
        let direct = lax_friedrichs_evolve(&*h, &u0, 0.0, 0.2, &FdConfig::default()).unwrap();
        let err = res
            .final_grid()
            .unwrap()
            .values
            .iter()
            .zip(&direct.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 5.0 * u0.spacing(), "{err}");
    }

    #[test]
    fn one_step_is_the_composition() {
        let u0 = torus_datum(DatumFamily::Smooth, 128, 0.0).unwrap();
        let p = kinetic();
        let res = split_solve(&p, SplitState::Grid(u0.clone()), &grid_cfg(1, 0.1, 0.3)).unwrap();
        let h = hamiltonian_of(&p);
        let manual = heat_apply_grid(&lax_friedrichs_evolve(&*h, &u0, 0.0, 0.3, &FdConfig::default()).unwrap(), 0.03).unwrap();
        assert_eq!(res.final_grid().unwrap().values, manual.values);
        assert_eq!(res.times, vec![0.0, 0.3]);
    }

    #[test]
    fn both_orders_converge() {
        let u0 = torus_datum(DatumFamily::Smooth, 256, 0.0).unwrap();
        let p = kinetic();
        let h = hamiltonian_of(&p);
        let reference = lax_friedrichs_evolve(&*h, &u0, 0.1, 0.4, &FdConfig::default()).unwrap();
        for order in [StepOrder::HjThenHeat, StepOrder::HeatThenHj] {
            let errs: Vec<f64> = [2, 8]
                .iter()
                .map(|&n| {
                    let cfg = SplitRunConfig {
                        order,
                        ..grid_cfg(n, 0.1, 0.4)
                    };
                    let v = split_solve(&p, SplitState::Grid(u0.clone()), &cfg).unwrap();
                    let v = v.final_grid().unwrap().clone();
                    v.values
                        .iter()
                        .zip(&reference.values)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max)
                })
                .collect();
            assert!(errs[1] < errs[0], "{order:?}: {errs:?}");
        }
    }

    #[test]
    fn composed_step_is_monotone() {
        let p = kinetic();
        let u0 = torus_datum(DatumFamily::Semiconcave, 256, 1e-2).unwrap();
        let w0 = u0.with_values(
            u0.values
                .iter()
                .enumerate()
                .map(|(i, v)| v + 0.05 * (1.0 + (i as f64 * 0.1).sin()))
                .collect(),
        );
        let cfg = grid_cfg(4, 0.1, 0.2);
        let a = split_solve(&p, SplitState::Grid(u0), &cfg).unwrap();
        let b = split_solve(&p, SplitState::Grid(w0), &cfg).unwrap();
        for (ga, gb) in a.grids().iter().zip(b.grids()) {
            assert!(ga.values.iter().zip(&gb.values).all(|(x, y)| *x <= y + 1e-10));
        }
    }

    #[test]
    fn constant_datum_has_zero_lipschitz_trace() {
        let p = kinetic();
        let u0 = GridField::new(1, 64, 0.0, 1.0, true, vec![1.0; 64]).unwrap();
        let res = split_solve(&p, SplitState::Grid(u0), &grid_cfg(3, 0.1, 0.3)).unwrap();
        assert!(res.trace.unwrap().lipschitz.iter().all(|l| *l < 1e-10));
    }

    #[test]
    fn semiconcave_trace_stays_bounded() {
        let p = kinetic();
        let u0 = torus_datum(DatumFamily::Semiconcave, 512, 1e-2).unwrap();
        let res = split_solve(&p, SplitState::Grid(u0.clone()), &grid_cfg(8, 0.1, 0.4)).unwrap();
        let tr = res.trace.unwrap();
        assert!(tr.is_finite());
        assert!(tr.semiconcavity_bounded(2.0), "{:?}", tr.semiconcavity);
        let lam = estimate_lambda_hat(&*hamiltonian_of(&p), &u0, 4.0);
        assert!(lam < 1e-6);
        assert!(tr.lipschitz_within_envelope(lam, 1e-6), "{:?}", tr.lipschitz);
        assert!(tr.to_csv().starts_with("t,lipschitz,semiconcavity\n0,"));
    }

    #[test]
    fn approximator_split_applies_exact_heat() {
        // H ≡ 0: each step is the exact Gaussian heat step of the expansion
        let zero = ControlProblem::zero(2, InitialCost::Gaussian).unwrap();
        let u0 = crate::pi_lambda::initial_model(&zero);
        let cfg = SplitRunConfig {
            eps: 0.1,
            horizon: 1.0,
            n_steps: 4,
            ..SplitRunConfig::default()
        };
        let res = split_solve(&zero, SplitState::Model(u0), &cfg).unwrap();
        let SplitState::Model(m) = res.states.last().unwrap() else {
            panic!()
        };
        let x = [0.3f64, -0.4];
        let s: f64 = 1.0 + 4.0 * 0.1 * 1.0;
        let exact = (-(x[0] * x[0] + x[1] * x[1]) / s).exp() / s;
        assert!((m.value(&x) - exact).abs() < 1e-12);
    }

    #[test]
    fn mismatched_configuration_is_rejected() {
        let p = kinetic();
        let cfg = SplitRunConfig {
            hj_backend: HjBackend::FdOracle,
            representation: Representation::Approximator,
            ..SplitRunConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let grid = SplitRunConfig {
            representation: Representation::Grid,
            ..SplitRunConfig::default()
        };
        let u0 = crate::pi_lambda::initial_model(&p);
        assert!(split_solve(&p, SplitState::Model(u0), &grid).is_err());
    }

    #[test]
    fn torus_data_have_expected_shape() {
        let g = torus_datum(DatumFamily::Semiconcave, 1024, 1e-3).unwrap();
        assert!((g.values[0] - 1.0).abs() < 3e-3);
        assert!(g.values[512].abs() < 1e-5);
        let s = torus_datum(DatumFamily::Smooth, 64, 1e-3).unwrap();
        assert!((s.values[16] - 0.5 * (1.0 - (PI / 2.0).cos())).abs() < 1e-12);
    }

    #[test]
    fn rate_csv_layout() {
        let rep = RateReport {
            rows: vec![RateRow {
                h: 0.125,
                err_inf_upper: 0.1,
                err_inf_lower: 0.01,
                err_l1: 0.02,
            }],
            fit_upper: None,
            fit_lower: None,
            lower_side_nonpositive: false,
            fit_lower_gap: None,
            fit_l1: None,
            l1_monotone: true,
            reference_level_differences: vec![],
            cole_hopf_gap: None,
            trace: None,
        };
        assert_eq!(rate_csv(&rep), "h,err_inf_upper,err_inf_lower,err_l1\n0.125,0.1,0.01,0.02\n");
        assert!(rate_fits_csv(&rep).contains("err_l1,,,"));
        assert!(rate_svg(&rep).contains("<polyline"));
    }
}
