//! Characteristic curves of a frozen-policy transport equation
//! `κV - G·∇V = L` and the discounted representation integrals
//! `V(x(t)) = ∫_t^∞ e^{-κ(s-t)} L(x(s)) ds` evaluated along them.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::dist_sq;

/// Axis-aligned box `[lo_1, hi_1] × … × [lo_d, hi_d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::invalid("box bounds must be non-empty and of equal length"));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l <= h)) {
            return Err(Error::invalid("box is empty (some lo > hi)"));
        }
        Ok(Self { lo, hi })
    }

    pub fn cube(dim: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (l, h))| *v >= *l && *v <= *h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub initial_state: Vec<f64>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub arc_lengths: Vec<f64>,
    /// Whether the snapshot lies inside the domain and no earlier snapshot left it.
    pub inside_domain: Vec<bool>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn total_length(&self) -> f64 {
        self.arc_lengths.last().copied().unwrap_or(0.0)
    }

    /// Number of leading snapshots that are inside the domain.
    pub fn inside_prefix(&self) -> usize {
        self.inside_domain.iter().take_while(|b| **b).count()
    }
}

/// Controls how far integration continues.
#[derive(Clone, Copy, Debug)]
pub struct IntegrationLimits {
    /// Maximum integration time.
    pub horizon: f64,
    pub step: f64,
    /// Extra time integrated after the first exit from the domain (so that
    /// discounted integrals at interior snapshots see the continuation of
    /// the path). Zero stops at the first outside snapshot.
    pub overrun_after_exit: f64,
}

/// Classical RK4 for `dx/dt = G(x)`, `x(0) = x0`. Every step is recorded.
pub fn integrate_characteristic(
    x0: &[f64],
    drift: &dyn Fn(&[f64], &mut [f64]),
    limits: IntegrationLimits,
    domain: Option<&BoxDomain>,
) -> Result<Trajectory> {
    if !(limits.step > 0.0) || !limits.step.is_finite() {
        return Err(Error::invalid("integration step must be positive"));
    }
    if !(limits.horizon >= 0.0) {
        return Err(Error::invalid("integration horizon must be non-negative"));
    }
    let d = x0.len();
    if let Some(b) = domain {
        if b.dim() != d {
            return Err(Error::invalid("domain and state dimensions differ"));
        }
    }
    let mut x = x0.to_vec();
    let mut inside = domain.is_none_or(|b| b.contains(&x));
    let mut traj = Trajectory {
        initial_state: x0.to_vec(),
        times: vec![0.0],
        states: vec![x.clone()],
        arc_lengths: vec![0.0],
        inside_domain: vec![inside],
    };
    let mut exit_time = if inside { None } else { Some(0.0) };
    let n_steps = (limits.horizon / limits.step).ceil() as usize;
    let (mut k1, mut k2, mut k3, mut k4) = (vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]);
    let mut tmp = vec![0.0; d];
    let mut t = 0.0;
    for i in 0..n_steps {
        if let Some(te) = exit_time {
            if t - te >= limits.overrun_after_exit - 1e-12 {
                break;
            }
        }
        let h = (limits.horizon - t).min(limits.step);
        if h <= 1e-15 {
            break;
        }
        drift(&x, &mut k1);
        for j in 0..d {
            tmp[j] = x[j] + 0.5 * h * k1[j];
        }
        drift(&tmp, &mut k2);
        for j in 0..d {
            tmp[j] = x[j] + 0.5 * h * k2[j];
        }
        drift(&tmp, &mut k3);
        for j in 0..d {
            tmp[j] = x[j] + h * k3[j];
        }
        drift(&tmp, &mut k4);
        let next: Vec<f64> = (0..d)
            .map(|j| x[j] + h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]))
            .collect();
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical(
                format!("non-finite drift evaluation at step {i}; trace holds the last valid state"),
                x,
            ));
        }
        t = if i + 1 == n_steps { limits.horizon } else { t + h };
        let ds = dist_sq(&next, &x).sqrt();
        x = next;
        if inside {
            inside = domain.is_none_or(|b| b.contains(&x));
            if !inside {
                exit_time = Some(t);
            }
        }
        traj.times.push(t);
        traj.arc_lengths.push(traj.arc_lengths.last().unwrap() + ds);
        traj.states.push(x.clone());
        traj.inside_domain.push(inside);
    }
    Ok(traj)
}

/// Resamples at arc-length positions `0, s, 2s, …` by linear interpolation,
/// always keeping the final point.
pub fn arclength_resample(traj: &Trajectory, spacing: f64) -> Result<Trajectory> {
    if !(spacing > 0.0) {
        return Err(Error::invalid("arc-length spacing must be positive"));
    }
    if traj.is_empty() {
        return Err(Error::invalid("trajectory has no snapshots"));
    }
    let total = traj.total_length();
    let single = |j: usize| Trajectory {
        initial_state: traj.initial_state.clone(),
        times: vec![traj.times[j]],
        states: vec![traj.states[j].clone()],
        arc_lengths: vec![traj.arc_lengths[j]],
        inside_domain: vec![traj.inside_domain[j]],
    };
    if total <= 0.0 {
        return Ok(single(0));
    }
    let positions = arclength_positions(&traj.arc_lengths, spacing);
    let mut out = Trajectory {
        initial_state: traj.initial_state.clone(),
        times: Vec::with_capacity(positions.len()),
        states: Vec::with_capacity(positions.len()),
        arc_lengths: Vec::with_capacity(positions.len()),
        inside_domain: Vec::with_capacity(positions.len()),
    };
    let last = traj.len() - 1;
    for &(seg, w) in &positions {
        let hi = (seg + 1).min(last);
        let lerp = |p: f64, q: f64| p + w * (q - p);
        out.times.push(lerp(traj.times[seg], traj.times[hi]));
        out.states
            .push(traj.states[seg].iter().zip(&traj.states[hi]).map(|(p, q)| lerp(*p, *q)).collect());
        out.arc_lengths.push(lerp(traj.arc_lengths[seg], traj.arc_lengths[hi]));
        out.inside_domain
            .push(traj.inside_domain[seg] && (w == 0.0 || traj.inside_domain[hi]));
    }
    Ok(out)
}

/// Interpolation positions `(segment, weight)` for arc-length targets
/// `0, s, 2s, …` and the final length along a cumulative arc-length table.
/// A target lies at `(1 - w)·p[seg] + w·p[seg + 1]`.
pub fn arclength_positions(arc_lengths: &[f64], spacing: f64) -> Vec<(usize, f64)> {
    let n = arc_lengths.len();
    if n < 2 {
        return vec![(0, 0.0)];
    }
    let total = arc_lengths[n - 1];
    let mut targets: Vec<f64> = Vec::new();
    let mut m = 0usize;
    loop {
        let s = m as f64 * spacing;
        if s > total * (1.0 - 1e-12) {
            break;
        }
        targets.push(s);
        m += 1;
    }
    targets.push(total);
    let mut seg = 0usize;
    let last = n - 1;
    targets
        .into_iter()
        .map(|s| {
            while seg + 1 < last && arc_lengths[seg + 1] < s {
                seg += 1;
            }
            let (a, b) = (arc_lengths[seg], arc_lengths[seg + 1]);
            let w = if b > a { ((s - a) / (b - a)).clamp(0.0, 1.0) } else { 0.0 };
            (seg, w)
        })
        .collect()
}

/// How the integral beyond the last recorded snapshot is treated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TailClosure {
    /// Add `L(x_end)/κ`, the exact tail for a source frozen at the endpoint.
    FrozenEndpoint,
    /// Truncate at the last snapshot.
    Truncate,
}

/// Backward recursion for `V_j = ∫_{t_j}^{∞} e^{-κ(s-t_j)} L(s) ds` with `L`
/// piecewise linear between the given times (exact on each segment).
/// `sources` holds `L` at each time; the result has the same length.
pub fn discounted_integrals(times: &[f64], sources: &[f64], kappa: f64, closure: TailClosure) -> Result<Vec<f64>> {
    if !(kappa > 0.0) {
        return Err(Error::invalid("discount rate κ must be positive"));
    }
    if times.len() != sources.len() || times.is_empty() {
        return Err(Error::invalid("times and sources must be non-empty and of equal length"));
    }
    let n = times.len();
    let mut v = vec![0.0; n];
    v[n - 1] = match closure {
        TailClosure::FrozenEndpoint => sources[n - 1] / kappa,
        TailClosure::Truncate => 0.0,
    };
    for j in (0..n - 1).rev() {
        let dt = times[j + 1] - times[j];
        if !(dt > 0.0) {
            return Err(Error::invalid("times must be strictly increasing"));
        }
        let (w0, w1, e) = segment_weights(kappa, dt);
        v[j] = e * v[j + 1] + w0 * sources[j] + w1 * (sources[j + 1] - sources[j]);
    }
    Ok(v)
}

/// Returns `(∫_0^Δ e^{-κs} ds, ∫_0^Δ e^{-κs} s/Δ ds, e^{-κΔ})`.
fn segment_weights(kappa: f64, dt: f64) -> (f64, f64, f64) {
    let z = kappa * dt;
    let e = (-z).exp();
    if z < 1e-4 {
        // series to avoid cancellation
        let w0 = dt * (1.0 - z / 2.0 + z * z / 6.0 - z * z * z / 24.0);
        let w1 = dt * (0.5 - z / 3.0 + z * z / 8.0 - z * z * z / 30.0);
        return (w0, w1, e);
    }
    let w0 = -(-z).exp_m1() / kappa;
    let w1 = (1.0 - e - z * e) / (kappa * z);
    (w0, w1, e)
}

/// Per-snapshot labels plus the worst-case truncation bound
/// `max|L| e^{-κ T_c}/κ`, where `T_c` is the integrated time beyond each
/// snapshot (the minimum over snapshots is reported).
#[derive(Clone, Debug)]
pub struct AlongValues {
    pub values: Vec<f64>,
    pub truncation_bound: f64,
}

pub fn value_along(traj: &Trajectory, source: &dyn Fn(&[f64]) -> f64, kappa: f64, closure: TailClosure) -> Result<AlongValues> {
    let s: Vec<f64> = traj.states.iter().map(|x| source(x)).collect();
    let values = discounted_integrals(&traj.times, &s, kappa, closure)?;
    let sup = s.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let remaining = traj.times.last().unwrap() - traj.times[0];
    Ok(AlongValues {
        values,
        truncation_bound: sup * (-kappa * remaining.max(0.0)).exp() / kappa,
    })
}

/// Componentwise [`value_along`] for a vector source; returns one gradient
/// per snapshot.
pub fn gradient_along(
    traj: &Trajectory,
    gradient_source: &dyn Fn(&[f64]) -> Vec<f64>,
    kappa: f64,
    closure: TailClosure,
) -> Result<Vec<Vec<f64>>> {
    let src: Vec<Vec<f64>> = traj.states.iter().map(|x| gradient_source(x)).collect();
    discounted_vector_integrals(&traj.times, &src, kappa, closure)
}

pub fn discounted_vector_integrals(times: &[f64], sources: &[Vec<f64>], kappa: f64, closure: TailClosure) -> Result<Vec<Vec<f64>>> {
    let n = sources.len();
    let d = sources.first().map_or(0, |g| g.len());
    let mut out = vec![vec![0.0; d]; n];
    let mut column = vec![0.0; n];
    for k in 0..d {
        for (c, g) in column.iter_mut().zip(sources) {
            *c = g[k];
        }
        let v = discounted_integrals(times, &column, kappa, closure)?;
        for (o, vk) in out.iter_mut().zip(v) {
            o[k] = vk;
        }
    }
    Ok(out)
}

/// `n` i.i.d. uniform points in the box, deterministic in `(seed, n, box)`.
pub fn sample_initial_states(domain: &BoxDomain, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n == 0 {
        return Err(Error::invalid("need at least one initial state"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            domain
                .lo
                .iter()
                .zip(&domain.hi)
                .map(|(l, h)| if h > l { rng.gen_range(*l..*h) } else { *l })
                .collect()
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelledSnapshot {
    pub traj_id: usize,
    pub t: f64,
    pub arclen: f64,
    pub state: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectoryBatch {
    pub dim: usize,
    pub snapshots: Vec<LabelledSnapshot>,
}

impl TrajectoryBatch {
    pub fn new(dim: usize) -> Self {
        Self { dim, snapshots: vec![] }
    }

    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn trajectory_count(&self) -> usize {
        let mut ids: Vec<usize> = self.snapshots.iter().map(|s| s.traj_id).collect();
        ids.dedup();
        ids.len()
    }

    /// Sets every weight to `1 / len` (equal weighting of snapshots).
    pub fn equalize_weights(&mut self) {
        let w = 1.0 / self.snapshots.len().max(1) as f64;
        for s in &mut self.snapshots {
            s.weight = w;
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        let mut header = vec!["traj_id".to_string(), "t".into(), "arclen".into()];
        header.extend((1..=self.dim).map(|i| format!("x_{i}")));
        header.push("V".into());
        header.extend((1..=self.dim).map(|i| format!("lambda_{i}")));
        writeln!(w, "{}", header.join(","))?;
        for s in &self.snapshots {
            let mut row = vec![s.traj_id.to_string(), s.t.to_string(), s.arclen.to_string()];
            row.extend(s.state.iter().map(|v| v.to_string()));
            row.push(s.value.to_string());
            row.extend(s.gradient.iter().map(|v| v.to_string()));
            writeln!(w, "{}", row.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a batch written by [`write_csv`](Self::write_csv); weights are equalized.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty trajectory file".into()))??;
        let cols = header.split(',').count();
        if cols < 6 || (cols - 4) % 2 != 0 {
            return Err(Error::Parse(format!("unexpected trajectory header {header:?}")));
        }
        let dim = (cols - 4) / 2;
        let mut batch = Self::new(dim);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != cols {
                return Err(Error::Parse(format!("row has {} fields, expected {cols}", f.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}")));
            batch.snapshots.push(LabelledSnapshot {
                traj_id: f[0].trim().parse().map_err(|e| Error::Parse(format!("traj_id: {e}")))?,
                t: num(f[1])?,
                arclen: num(f[2])?,
                state: f[3..3 + dim].iter().map(|s| num(s)).collect::<Result<_>>()?,
                value: num(f[3 + dim])?,
                gradient: f[4 + dim..].iter().map(|s| num(s)).collect::<Result<_>>()?,
                weight: 0.0,
            });
        }
        batch.equalize_weights();
        Ok(batch)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn limits(horizon: f64, step: f64) -> IntegrationLimits {
        IntegrationLimits {
            horizon,
            step,
            overrun_after_exit: 0.0,
        }
    }

    fn linear(rate: f64) -> impl Fn(&[f64], &mut [f64]) {
        move |x: &[f64], out: &mut [f64]| {
            for (o, v) in out.iter_mut().zip(x) {
                *o = rate * v;
            }
        }
    }

    #[test]
    fn zero_drift_is_stationary() {
        let t = integrate_characteristic(&[0.3, -0.2], &|_, o: &mut [f64]| o.fill(0.0), limits(1.0, 0.1), None).unwrap();
        assert!(t.states.iter().all(|s| s == &vec![0.3, -0.2]));
        assert_eq!(t.total_length(), 0.0);
    }

    #[test]
    fn exponential_flows() {
        let up = integrate_characteristic(&[1.0], &linear(1.0), limits(1.0, 1e-3), None).unwrap();
        assert!((up.states.last().unwrap()[0] - 1f64.exp()).abs() < 1e-8);
        assert_eq!(*up.times.last().unwrap(), 1.0);
        let down = integrate_characteristic(&[1.0], &linear(-1.0), limits(1.0, 1e-3), None).unwrap();
        assert!((down.states.last().unwrap()[0] - (-1f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn rk4_order_on_exponential_flow() {
        let err = |h: f64| {
            let t = integrate_characteristic(&[1.0], &linear(1.0), limits(1.0, h), None).unwrap();
            (t.states.last().unwrap()[0] - 1f64.exp()).abs()
        };
        let ratio = err(0.1) / err(0.05);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn exit_marks_and_stops() {
        let dom = BoxDomain::cube(1, -2.0, 2.0).unwrap();
        let t = integrate_characteristic(&[1.0], &linear(1.0), limits(5.0, 1e-2), Some(&dom)).unwrap();
        assert!(!t.inside_domain.last().unwrap());
        assert_eq!(t.inside_prefix(), t.len() - 1);
        assert!((t.times.last().unwrap() - 2f64.ln()).abs() < 0.011);
        let lim = IntegrationLimits {
            overrun_after_exit: 0.5,
            ..limits(5.0, 1e-2)
        };
        let t2 = integrate_characteristic(&[1.0], &linear(1.0), lim, Some(&dom)).unwrap();
        assert!((t2.times.last().unwrap() - t.times.last().unwrap() - 0.5).abs() < 0.011);
        assert_eq!(t2.inside_prefix(), t.inside_prefix());
    }

    #[test]
    fn non_finite_drift_reports_last_state() {
        let r = integrate_characteristic(
            &[1.0],
            &|x: &[f64], o: &mut [f64]| o[0] = if x[0] > 1.5 { f64::NAN } else { 1.0 },
            limits(2.0, 0.1),
            None,
        );
        match r {
            Err(Error::NumericalFailure { trace, .. }) => assert!(trace[0] <= 1.5 && trace[0] > 1.3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn resample_examples() {
        let line = Trajectory {
            initial_state: vec![0.0],
            times: vec![0.0, 0.4, 1.0],
            states: vec![vec![0.0], vec![0.4], vec![1.0]],
            arc_lengths: vec![0.0, 0.4, 1.0],
            inside_domain: vec![true; 3],
        };
        let r = arclength_resample(&line, 0.25).unwrap();
        assert_eq!(r.len(), 5);
        for (s, e) in r.states.iter().zip([0.0, 0.25, 0.5, 0.75, 1.0]) {
            assert!((s[0] - e).abs() < 1e-14);
        }

        let still = integrate_characteristic(&[0.5], &|_, o: &mut [f64]| o.fill(0.0), limits(1.0, 0.1), None).unwrap();
        assert_eq!(arclength_resample(&still, 0.1).unwrap().len(), 1);

        let ex = integrate_characteristic(&[1.0], &linear(1.0), limits(2f64.ln(), 1e-4), None).unwrap();
        assert!((ex.total_length() - 1.0).abs() < 1e-9);
        let r = arclength_resample(&ex, 0.5).unwrap();
        assert_eq!(r.len(), 3);
        for (s, e) in r.states.iter().zip([1.0, 1.5, 2.0]) {
            assert!((s[0] - e).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_source_geometric_tail() {
        let t = integrate_characteristic(&[0.2], &linear(-0.5), limits(3.0, 0.05), None).unwrap();
        let v = value_along(&t, &|_| 2.0, 4.0, TailClosure::FrozenEndpoint).unwrap();
        assert!(v.values.iter().all(|x| (x - 0.5).abs() < 1e-12));
    }

    #[test]
    fn decaying_source_integral() {
        let t = integrate_characteristic(&[1.0], &linear(-1.0), limits(20.0, 1e-3), None).unwrap();
        let v = value_along(&t, &|x| x[0], 1.0, TailClosure::FrozenEndpoint).unwrap();
        assert!((v.values[0] - 0.5).abs() < 1e-6, "{}", v.values[0]);
        let g = gradient_along(&t, &|x| vec![x[0]], 1.0, TailClosure::FrozenEndpoint).unwrap();
        assert!((g[0][0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn truncation_and_closure() {
        let tc = 3.0;
        let t = integrate_characteristic(&[0.0], &linear(1.0), limits(tc, 0.01), None).unwrap();
        let trunc = value_along(&t, &|_| 1.0, 1.0, TailClosure::Truncate).unwrap();
        let lower = 1.0 - (-tc).exp();
        assert!(trunc.values[0] >= lower - 1e-12 && trunc.values[0] <= 1.0);
        assert!((trunc.truncation_bound - (-tc).exp()).abs() < 1e-12);
        let closed = value_along(&t, &|_| 1.0, 1.0, TailClosure::FrozenEndpoint).unwrap();
        assert!((closed.values[0] - 1.0).abs() < 1e-12);
        assert!(value_along(&t, &|_| 1.0, 0.0, TailClosure::Truncate).is_err());
    }

    #[test]
    fn zero_and_constant_gradient_sources() {
        let t = integrate_characteristic(&[0.1, 0.2], &linear(0.3), limits(1.0, 0.1), None).unwrap();
        let z = gradient_along(&t, &|_| vec![0.0, 0.0], 2.0, TailClosure::FrozenEndpoint).unwrap();
        assert!(z.iter().flatten().all(|v| *v == 0.0));
        let w = gradient_along(&t, &|_| vec![1.5, -0.5], 1.0, TailClosure::FrozenEndpoint).unwrap();
        assert!(w.iter().all(|g| (g[0] - 1.5).abs() < 1e-12 && (g[1] + 0.5).abs() < 1e-12));
    }

    #[test]
    fn discrete_transport_identity() {
        let t = integrate_characteristic(&[0.4, -0.3], &linear(0.7), limits(2.0, 1e-3), None).unwrap();
        let src = |x: &[f64]| x[0].sin() + x[1] * x[1];
        let kappa = 3.0;
        let v = value_along(&t, &src, kappa, TailClosure::FrozenEndpoint).unwrap().values;
        for j in (0..500).step_by(50) {
            let dt = t.times[j + 1] - t.times[j];
            let lhs = kappa * v[j] - (v[j + 1] - v[j]) / dt;
            assert!((lhs - src(&t.states[j])).abs() < 5e-3, "{lhs} vs {}", src(&t.states[j]));
        }
    }

    #[test]
    fn sampling_contracts() {
        let pt = BoxDomain::cube(3, 0.0, 0.0).unwrap();
        assert_eq!(sample_initial_states(&pt, 1, 4).unwrap(), vec![vec![0.0; 3]]);
        let b = BoxDomain::cube(1, -1.0, 1.0).unwrap();
        let s = sample_initial_states(&b, 10_000, 7).unwrap();
        let mean = s.iter().map(|x| x[0]).sum::<f64>() / 1e4;
        assert!(mean.abs() < 0.05);
        assert_eq!(s, sample_initial_states(&b, 10_000, 7).unwrap());
        assert!(BoxDomain::new(vec![1.0], vec![0.0]).is_err());
        assert!(sample_initial_states(&b, 0, 1).is_err());
    }

    #[test]
    fn batch_csv_round_trip() {
        let mut b = TrajectoryBatch::new(2);
        for i in 0..4 {
            b.snapshots.push(LabelledSnapshot {
                traj_id: i / 2,
                t: 0.1 * i as f64,
                arclen: 0.3 * i as f64,
                state: vec![1.0 / 3.0, -(i as f64)],
                value: 2.0f64.sqrt() * i as f64,
                gradient: vec![1e-17, 7.25],
                weight: 0.25,
            });
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.csv");
        b.write_csv(&p).unwrap();
        let head = std::fs::read_to_string(&p).unwrap();
        assert!(head.starts_with("traj_id,t,arclen,x_1,x_2,V,lambda_1,lambda_2\n"));
        assert_eq!(TrajectoryBatch::read_csv(&p).unwrap(), b);
        assert_eq!(b.trajectory_count(), 2);
    }
}
