//! The heat semigroup `S_t f = Φ(·, t) * f`, with `Φ` the Gaussian kernel of
//! variance `2 eps t` per coordinate.
//!
//! Three discretizations are offered: spectral multiplication on uniform
//! grids, tensor Gauss–Hermite quadrature at scattered points, and Monte
//! Carlo with common random numbers. Box grids are extended by constant
//! extrapolation before the periodic transform.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::gauss_hermite_normal;
use crate::problem::ControlProblem;

/// A scalar field sampled on a uniform tensor grid over `[lo, hi]^d`.
///
/// Periodic grids omit the right endpoint (`x_j = lo + j (hi-lo)/n`), box
/// grids include both (`x_j = lo + j (hi-lo)/(n-1)`). Values are row-major
/// with the last axis varying fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField {
    pub dim: usize,
    pub resolution: usize,
    pub lo: f64,
    pub hi: f64,
    pub periodic: bool,
    pub values: Vec<f64>,
}

impl GridField {
    pub fn new(dim: usize, resolution: usize, lo: f64, hi: f64, periodic: bool, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || resolution < 2 {
            return Err(Error::invalid("grid needs d ≥ 1 and at least 2 points per axis"));
        }
        if !(hi > lo) {
            return Err(Error::invalid("grid bounds must satisfy lo < hi"));
        }
        let expected = resolution.checked_pow(dim as u32).ok_or_else(|| Error::invalid("grid too large"))?;
        if values.len() != expected {
            return Err(Error::invalid(format!("grid expects {expected} values, got {}", values.len())));
        }
        Ok(Self {
            dim,
            resolution,
            lo,
            hi,
            periodic,
            values,
        })
    }

    /// Samples `f` at every grid node.
    pub fn from_fn(dim: usize, resolution: usize, lo: f64, hi: f64, periodic: bool, f: impl Fn(&[f64]) -> f64) -> Result<Self> {
        let mut g = Self::new(dim, resolution, lo, hi, periodic, vec![0.0; resolution.pow(dim as u32)])?;
        let mut x = vec![0.0; dim];
        for idx in 0..g.values.len() {
            g.point_into(idx, &mut x);
            g.values[idx] = f(&x);
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn spacing(&self) -> f64 {
        if self.periodic {
            (self.hi - self.lo) / self.resolution as f64
        } else {
            (self.hi - self.lo) / (self.resolution - 1) as f64
        }
    }

    pub fn coordinate(&self, j: usize) -> f64 {
        self.lo + j as f64 * self.spacing()
    }

    pub fn multi_index(&self, mut idx: usize, out: &mut [usize]) {
        for k in (0..self.dim).rev() {
            out[k] = idx % self.resolution;
            idx /= self.resolution;
        }
    }

    pub fn point_into(&self, idx: usize, out: &mut [f64]) {
        let h = self.spacing();
        let mut rem = idx;
        for k in (0..self.dim).rev() {
            out[k] = self.lo + (rem % self.resolution) as f64 * h;
            rem /= self.resolution;
        }
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim];
        self.point_into(idx, &mut x);
        x
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), self.values.len());
        Self { values, ..self.clone() }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Multilinear interpolation; periodic grids wrap, box grids clamp.
    pub fn interpolate(&self, x: &[f64]) -> f64 {
        let h = self.spacing();
        let n = self.resolution;
        let mut base = vec![0usize; self.dim];
        let mut frac = vec![0.0; self.dim];
        for k in 0..self.dim {
            let s = (x[k] - self.lo) / h;
            if self.periodic {
                let s = s.rem_euclid(n as f64);
                let i = (s.floor() as usize).min(n - 1);
                base[k] = i;
                frac[k] = s - i as f64;
            } else {
                let s = s.clamp(0.0, (n - 1) as f64);
                let i = (s.floor() as usize).min(n - 2);
                base[k] = i;
                frac[k] = s - i as f64;
            }
        }
        let mut total = 0.0;
        for corner in 0..(1usize << self.dim) {
            let mut w = 1.0;
            let mut idx = 0usize;
            for k in 0..self.dim {
                let bit = (corner >> k) & 1;
                let mut j = base[k] + bit;
                if self.periodic && j == n {
                    j = 0;
                }
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
                idx = idx * n + j;
            }
            if w != 0.0 {
                total += w * self.values[idx];
            }
        }
        total
    }

    /// Trapezoidal integral over the grid domain (rectangle rule on a torus).
    pub fn integral(&self) -> f64 {
        let h = self.spacing();
        if self.periodic {
            return self.values.iter().sum::<f64>() * h.powi(self.dim as i32);
        }
        let mut mi = vec![0usize; self.dim];
        let mut s = 0.0;
        for (idx, v) in self.values.iter().enumerate() {
            self.multi_index(idx, &mut mi);
            let w: f64 = mi
                .iter()
                .map(|&j| if j == 0 || j == self.resolution - 1 { 0.5 } else { 1.0 })
                .product();
            s += w * v;
        }
        s * h.powi(self.dim as i32)
    }

    fn header(&self) -> String {
        format!("{},{},{},{},{}", self.dim, self.resolution, self.lo, self.hi, self.periodic as u8)
    }

    /// CSV artifact: one metadata line `d,resolution,lo,hi,periodic`, then
    /// one value per line. Floats use shortest round-trip formatting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{}", self.header())?;
        for v in &self.values {
            writeln!(w, "{v}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let r = BufReader::new(std::fs::File::open(path)?);
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty grid file".into()))??;
        let (dim, resolution, lo, hi, periodic) = parse_header(&header)?;
        let mut values = Vec::with_capacity(resolution.pow(dim as u32));
        for line in lines {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            values.push(t.parse::<f64>().map_err(|e| Error::Parse(format!("grid value {t:?}: {e}")))?);
        }
        Self::new(dim, resolution, lo, hi, periodic, values)
    }

    /// Binary artifact: the CSV metadata line, a newline, then little-endian f64 values.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "{}", self.header())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut header = String::new();
        r.read_line(&mut header)?;
        let (dim, resolution, lo, hi, periodic) = parse_header(header.trim_end())?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() % 8 != 0 {
            return Err(Error::Parse("binary grid payload is not a whole number of f64s".into()));
        }
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::new(dim, resolution, lo, hi, periodic, values)
    }
}

fn parse_header(line: &str) -> Result<(usize, usize, f64, f64, bool)> {
    let parts: Vec<&str> = line.trim().split(',').collect();
    if parts.len() != 5 {
        return Err(Error::Parse(format!("grid header needs 5 fields, got {line:?}")));
    }
    let bad = |what: &str| Error::Parse(format!("grid header field {what} in {line:?}"));
    let dim = parts[0].parse().map_err(|_| bad("d"))?;
    let resolution = parts[1].parse().map_err(|_| bad("resolution"))?;
    let lo = parts[2].parse().map_err(|_| bad("lo"))?;
    let hi = parts[3].parse().map_err(|_| bad("hi"))?;
    let periodic = match parts[4] {
        "1" | "true" => true,
        "0" | "false" => false,
        _ => return Err(bad("periodic")),
    };
    Ok((dim, resolution, lo, hi, periodic))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothingMode {
    Spectral,
    GaussHermite,
    MonteCarlo,
    /// Closed-form action on approximators that admit one (Gaussian and
    /// polynomial expansions).
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingSpec {
    pub mode: SmoothingMode,
    pub quadrature_order: usize,
    pub mc_samples: usize,
    pub antithetic: bool,
    pub seed: u64,
}

impl SmoothingSpec {
    /// Order-7 Gauss–Hermite up to d = 4, otherwise 64 antithetic samples.
    pub fn default_for(dim: usize) -> Self {
        if dim <= 4 {
            Self {
                mode: SmoothingMode::GaussHermite,
                quadrature_order: 7,
                mc_samples: 64,
                antithetic: true,
                seed: 0,
            }
        } else {
            Self {
                mode: SmoothingMode::MonteCarlo,
                quadrature_order: 7,
                mc_samples: 64,
                antithetic: true,
                seed: 0,
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.quadrature_order == 0 {
            return Err(Error::invalid("quadrature order must be at least 1"));
        }
        if self.mode == SmoothingMode::MonteCarlo {
            if self.mc_samples == 0 {
                return Err(Error::invalid("Monte Carlo needs at least one sample"));
            }
            if self.antithetic && !self.mc_samples.is_multiple_of(2) {
                return Err(Error::invalid("antithetic sampling needs an even sample count"));
            }
        }
        Ok(())
    }
}

fn check_eps_t(eps_t: f64) -> Result<()> {
    if !(eps_t >= 0.0) || !eps_t.is_finite() {
        return Err(Error::invalid(format!("eps*t must be finite and non-negative, got {eps_t}")));
    }
    Ok(())
}

fn wavenumber(j: usize, m: usize) -> f64 {
    if j <= m / 2 {
        j as f64
    } else {
        j as f64 - m as f64
    }
}

/// Applies a separable Fourier multiplier `Π_k mult(k_axis)` on an `m^d`
/// periodic array. `mult` receives the axis index and the signed wavenumber.
fn fourier_multiply(data: &mut [Complex64], dim: usize, m: usize, mult: impl Fn(usize, f64) -> Complex64) {
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);
    let mut line = vec![Complex64::new(0.0, 0.0); m];
    let total = data.len();
    for axis in 0..dim {
        let stride = m.pow((dim - 1 - axis) as u32);
        let factors: Vec<Complex64> = (0..m).map(|j| mult(axis, wavenumber(j, m)) / m as f64).collect();
        let outer = total / (m * stride);
        for o in 0..outer {
            for s in 0..stride {
                let start = o * m * stride + s;
                for j in 0..m {
                    line[j] = data[start + j * stride];
                }
                fwd.process(&mut line);
                for (l, f) in line.iter_mut().zip(&factors) {
                    *l *= f;
                }
                inv.process(&mut line);
                for j in 0..m {
                    data[start + j * stride] = line[j];
                }
            }
        }
    }
}

/// Box grid extended on every side by `pad` nodes of constant extrapolation.
fn pad_constant(field: &GridField, pad: usize) -> (Vec<Complex64>, usize) {
    let n = field.resolution;
    let m = n + 2 * pad;
    let d = field.dim;
    let total = m.pow(d as u32);
    let mut out = vec![Complex64::new(0.0, 0.0); total];
    let mut mi = vec![0usize; d];
    for (idx, o) in out.iter_mut().enumerate() {
        let mut rem = idx;
        for k in (0..d).rev() {
            mi[k] = rem % m;
            rem /= m;
        }
        let mut src = 0usize;
        for &j in &mi {
            let jj = j.saturating_sub(pad).min(n - 1);
            src = src * n + jj;
        }
        *o = Complex64::new(field.values[src], 0.0);
    }
    (out, m)
}

fn crop(data: &[Complex64], dim: usize, m: usize, n: usize, pad: usize) -> Vec<f64> {
    let total = n.pow(dim as u32);
    let mut out = vec![0.0; total];
    let mut mi = vec![0usize; dim];
    for (idx, o) in out.iter_mut().enumerate() {
        let mut rem = idx;
        for k in (0..dim).rev() {
            mi[k] = rem % n;
            rem /= n;
        }
        let src = mi.iter().fold(0usize, |acc, &j| acc * m + j + pad);
        *o = data[src].re;
    }
    out
}

fn box_padding(field: &GridField, eps_t: f64) -> usize {
    let sigma = (2.0 * eps_t).sqrt();
    (8.0 * sigma / field.spacing()).ceil() as usize + 2
}

/// `S_t` on a grid by Fourier multiplication with `exp(-eps t |2πk/L|^2)`.
pub fn heat_apply_grid(field: &GridField, eps_t: f64) -> Result<GridField> {
    check_eps_t(eps_t)?;
    if eps_t == 0.0 {
        return Ok(field.clone());
    }
    let h = field.spacing();
    let (mut data, m, pad) = if field.periodic {
        let data: Vec<Complex64> = field.values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
        (data, field.resolution, 0)
    } else {
        let pad = box_padding(field, eps_t);
        let (data, m) = pad_constant(field, pad);
        (data, m, pad)
    };
    let period = m as f64 * h;
    let c = -eps_t * (2.0 * std::f64::consts::PI / period).powi(2);
    fourier_multiply(&mut data, field.dim, m, |_, k| Complex64::new((c * k * k).exp(), 0.0));
    let values = if field.periodic {
        data.iter().map(|z| z.re).collect()
    } else {
        crop(&data, field.dim, m, field.resolution, pad)
    };
    Ok(field.with_values(values))
}

/// Backward-Euler diffusion on a periodic grid, one axis at a time:
/// `values <- Π_k (I - coef_k L_k)^{-1} values` with `L_k` the three-point
/// second difference along axis `k` (unit spacing). Each factor preserves
/// order, so the map is monotone.
pub(crate) fn periodic_implicit_diffusion(values: &mut [f64], dim: usize, resolution: usize, coef: &[f64]) {
    let mut data: Vec<Complex64> = values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    let m = resolution as f64;
    fourier_multiply(&mut data, dim, resolution, |axis, k| {
        let s = (std::f64::consts::PI * k / m).sin();
        Complex64::new(1.0 / (1.0 + 4.0 * coef[axis] * s * s), 0.0)
    });
    for (v, z) in values.iter_mut().zip(&data) {
        *v = z.re;
    }
}

/// Partial derivatives of a grid field, one field per axis. Periodic grids
/// use the spectral derivative (Nyquist mode dropped); box grids use
/// fourth-order central differences with one-sided closures at the edges.
pub fn grid_gradient(field: &GridField) -> Vec<GridField> {
    if field.periodic {
        let period = field.hi - field.lo;
        let n = field.resolution;
        (0..field.dim)
            .map(|axis| {
                let mut data: Vec<Complex64> = field.values.iter().map(|v| Complex64::new(*v, 0.0)).collect();
                fourier_multiply(&mut data, field.dim, n, |a, k| {
                    if a != axis {
                        Complex64::new(1.0, 0.0)
                    } else if n.is_multiple_of(2) && k == (n / 2) as f64 {
                        Complex64::new(0.0, 0.0)
                    } else {
                        Complex64::new(0.0, 2.0 * std::f64::consts::PI * k / period)
                    }
                });
                field.with_values(data.iter().map(|z| z.re).collect())
            })
            .collect()
    } else {
        (0..field.dim).map(|axis| field.with_values(box_derivative(field, axis))).collect()
    }
}

fn box_derivative(field: &GridField, axis: usize) -> Vec<f64> {
    let n = field.resolution;
    let h = field.spacing();
    let stride = n.pow((field.dim - 1 - axis) as u32);
    let v = &field.values;
    let mut out = vec![0.0; v.len()];
    let mut mi = vec![0usize; field.dim];
    for (idx, o) in out.iter_mut().enumerate() {
        field.multi_index(idx, &mut mi);
        let j = mi[axis];
        let at = |off: isize| v[(idx as isize + off * stride as isize) as usize];
        *o = if j >= 2 && j + 2 < n {
            (at(-2) - 8.0 * at(-1) + 8.0 * at(1) - at(2)) / (12.0 * h)
        } else if j == 0 {
            if n >= 3 {
                (-3.0 * at(0) + 4.0 * at(1) - at(2)) / (2.0 * h)
            } else {
                (at(1) - at(0)) / h
            }
        } else if j == n - 1 {
            if n >= 3 {
                (3.0 * at(0) - 4.0 * at(-1) + at(-2)) / (2.0 * h)
            } else {
                (at(0) - at(-1)) / h
            }
        } else {
            (at(1) - at(-1)) / (2.0 * h)
        };
    }
    out
}

/// `S_t (Df)` on a grid: the heat step applied to each derivative component.
/// On a torus this coincides with the derivative of the smoothed field.
pub fn heat_apply_grid_gradient(field: &GridField, eps_t: f64) -> Result<Vec<GridField>> {
    grid_gradient(field).iter().map(|g| heat_apply_grid(g, eps_t)).collect()
}

#[derive(Clone, Debug)]
pub struct PointSmoothing {
    pub values: Vec<f64>,
    /// Sample standard error per point (Monte Carlo only).
    pub std_errors: Option<Vec<f64>>,
}

/// Quadrature nodes `z_q` and weights `w_q` for `E[g(Z)]`, `Z ~ N(0, I_d)`.
struct NormalRule {
    nodes: Vec<Vec<f64>>,
    weights: Vec<f64>,
    antithetic: bool,
}

fn normal_rule(dim: usize, spec: &SmoothingSpec) -> Result<NormalRule> {
    spec.validate()?;
    match spec.mode {
        SmoothingMode::GaussHermite => {
            let (z, w) = gauss_hermite_normal(spec.quadrature_order);
            let q = spec.quadrature_order;
            let count = q
                .checked_pow(dim as u32)
                .filter(|c| *c <= 50_000_000)
                .ok_or_else(|| Error::invalid("tensor Gauss–Hermite rule is too large for this dimension"))?;
            let mut nodes = Vec::with_capacity(count);
            let mut weights = Vec::with_capacity(count);
            for idx in 0..count {
                let mut rem = idx;
                let mut node = vec![0.0; dim];
                let mut weight = 1.0;
                for k in (0..dim).rev() {
                    let j = rem % q;
                    rem /= q;
                    node[k] = z[j];
                    weight *= w[j];
                }
                nodes.push(node);
                weights.push(weight);
            }
            Ok(NormalRule {
                nodes,
                weights,
                antithetic: false,
            })
        }
        SmoothingMode::MonteCarlo => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let n = spec.mc_samples;
            let base = if spec.antithetic { n / 2 } else { n };
            let mut nodes = Vec::with_capacity(n);
            for _ in 0..base {
                let z: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                if spec.antithetic {
                    nodes.push(z.iter().map(|v| -v).collect());
                }
                nodes.push(z);
            }
            Ok(NormalRule {
                weights: vec![1.0 / n as f64; n],
                nodes,
                antithetic: spec.antithetic,
            })
        }
        SmoothingMode::Spectral | SmoothingMode::Exact => {
            Err(Error::invalid("point smoothing needs the gauss-hermite or monte-carlo mode"))
        }
    }
}

/// Estimates `E[f(x + sqrt(2 eps t) Z)]` at each point. The Monte Carlo
/// rule shares its samples across points (common random numbers).
pub fn heat_apply_points(f: &dyn Fn(&[f64]) -> f64, points: &[Vec<f64>], eps_t: f64, spec: &SmoothingSpec) -> Result<PointSmoothing> {
    check_eps_t(eps_t)?;
    let Some(dim) = points.first().map(|p| p.len()) else {
        return Ok(PointSmoothing {
            values: vec![],
            std_errors: None,
        });
    };
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::invalid("points have inconsistent dimensions"));
    }
    if eps_t == 0.0 {
        return Ok(PointSmoothing {
            values: points.iter().map(|p| f(p)).collect(),
            std_errors: (spec.mode == SmoothingMode::MonteCarlo).then(|| vec![0.0; points.len()]),
        });
    }
    let rule = normal_rule(dim, spec)?;
    let sigma = (2.0 * eps_t).sqrt();
    let mut y = vec![0.0; dim];
    let mut values = Vec::with_capacity(points.len());
    let mut errors = Vec::with_capacity(points.len());
    let mut samples = vec![0.0; rule.nodes.len()];
    for x in points {
        for (s, z) in samples.iter_mut().zip(&rule.nodes) {
            for k in 0..dim {
                y[k] = x[k] + sigma * z[k];
            }
            *s = f(&y);
        }
        let mean: f64 = samples.iter().zip(&rule.weights).map(|(s, w)| s * w).sum();
        values.push(mean);
        if spec.mode == SmoothingMode::MonteCarlo {
            errors.push(standard_error(&samples, rule.antithetic));
        }
    }
    Ok(PointSmoothing {
        values,
        std_errors: (spec.mode == SmoothingMode::MonteCarlo).then_some(errors),
    })
}

fn standard_error(samples: &[f64], antithetic: bool) -> f64 {
    let units: Vec<f64> = if antithetic {
        samples.chunks_exact(2).map(|c| 0.5 * (c[0] + c[1])).collect()
    } else {
        samples.to_vec()
    };
    let n = units.len();
    if n < 2 {
        return 0.0;
    }
    let mean = units.iter().sum::<f64>() / n as f64;
    let var = units.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// Smooths each component of a gradient callback at the given points.
pub fn heat_apply_points_gradient(
    grad: &dyn Fn(&[f64]) -> Vec<f64>,
    points: &[Vec<f64>],
    eps_t: f64,
    spec: &SmoothingSpec,
) -> Result<Vec<Vec<f64>>> {
    check_eps_t(eps_t)?;
    let Some(dim) = points.first().map(|p| p.len()) else {
        return Ok(vec![]);
    };
    if eps_t == 0.0 {
        return Ok(points.iter().map(|p| grad(p)).collect());
    }
    let rule = normal_rule(dim, spec)?;
    let sigma = (2.0 * eps_t).sqrt();
    let mut y = vec![0.0; dim];
    let mut out = Vec::with_capacity(points.len());
    for x in points {
        let mut acc = vec![0.0; dim];
        for (z, w) in rule.nodes.iter().zip(&rule.weights) {
            for k in 0..dim {
                y[k] = x[k] + sigma * z[k];
            }
            let g = grad(&y);
            for k in 0..dim {
                acc[k] += w * g[k];
            }
        }
        out.push(acc);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct CommutatorSample {
    pub eps_t: f64,
    pub sup: f64,
    pub inf: f64,
    pub mean: f64,
    pub sup_abs: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CommutatorReport {
    pub samples: Vec<CommutatorSample>,
    /// Least-squares slope of `ln sup|C|` against `ln eps t`; `None` when
    /// fewer than two levels have a non-zero commutator.
    pub slope: Option<f64>,
}

/// Measures `S_t H(x, Dζ) - H(x, S_t Dζ)` on the grid of `zeta` for each
/// `eps t`. On box grids the statistics exclude a margin of five kernel
/// widths at the largest `eps t`, where constant extrapolation contaminates
/// the convolution.
pub fn commutator_probe(zeta: &GridField, problem: &ControlProblem, eps_t_list: &[f64]) -> Result<CommutatorReport> {
    if problem.dim() != zeta.dim {
        return Err(Error::invalid("probe field and problem dimensions differ"));
    }
    for &s in eps_t_list {
        check_eps_t(s)?;
    }
    let grad = grid_gradient(zeta);
    let n = zeta.len();
    let d = zeta.dim;
    let mut p = vec![0.0; d];
    let mut hvals = Vec::with_capacity(n);
    for idx in 0..n {
        for k in 0..d {
            p[k] = grad[k].values[idx];
        }
        hvals.push(problem.hamiltonian(&zeta.point(idx), &p)?);
    }
    let hfield = zeta.with_values(hvals);

    let max_s = eps_t_list.iter().cloned().fold(0.0, f64::max);
    let margin = if zeta.periodic { 0.0 } else { 5.0 * (2.0 * max_s).sqrt() };
    let interior: Vec<usize> = (0..n)
        .filter(|&idx| {
            zeta.periodic
                || zeta
                    .point(idx)
                    .iter()
                    .all(|&x| x >= zeta.lo + margin - 1e-12 && x <= zeta.hi - margin + 1e-12)
        })
        .collect();
    if interior.is_empty() {
        return Err(Error::invalid("probe grid has no points outside the boundary margin"));
    }

    let mut samples = Vec::with_capacity(eps_t_list.len());
    for &s in eps_t_list {
        let sh = heat_apply_grid(&hfield, s)?;
        let sg: Vec<GridField> = grad.iter().map(|g| heat_apply_grid(g, s)).collect::<Result<_>>()?;
        let (mut sup, mut inf, mut sum) = (f64::NEG_INFINITY, f64::INFINITY, 0.0);
        for &idx in &interior {
            for k in 0..d {
                p[k] = sg[k].values[idx];
            }
            let c = sh.values[idx] - problem.hamiltonian(&zeta.point(idx), &p)?;
            sup = sup.max(c);
            inf = inf.min(c);
            sum += c;
        }
        samples.push(CommutatorSample {
            eps_t: s,
            sup,
            inf,
            mean: sum / interior.len() as f64,
            sup_abs: sup.abs().max(inf.abs()),
        });
    }
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|c| c.eps_t > 0.0 && c.sup_abs > 1e-14)
        .map(|c| (c.eps_t.ln(), c.sup_abs.ln()))
        .collect();
    let slope = (pts.len() >= 2).then(|| {
        let m = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        sxy / sxx
    });
    Ok(CommutatorReport { samples, slope })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm_sq;
    use crate::problem::{ControlProblem, InitialCost, LqrSpec};
    use std::f64::consts::PI;

    fn torus_sin(n: usize) -> GridField {
        GridField::from_fn(1, n, 0.0, 1.0, true, |x| (2.0 * PI * x[0]).sin()).unwrap()
    }

    #[test]
    fn zero_time_is_identity() {
        let g = torus_sin(32);
        assert_eq!(heat_apply_grid(&g, 0.0).unwrap(), g);
        assert!(heat_apply_grid(&g, -1.0).is_err());
    }

    #[test]
    fn constants_are_fixed() {
        let g = GridField::from_fn(2, 16, -1.0, 1.0, false, |_| 3.5).unwrap();
        let s = heat_apply_grid(&g, 0.2).unwrap();
        assert!(s.values.iter().all(|v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn gaussian_closed_form_on_wide_box() {
        let g = GridField::from_fn(1, 513, -10.0, 10.0, false, |x| (-x[0] * x[0]).exp()).unwrap();
        let s = heat_apply_grid(&g, 0.1).unwrap();
        let err = (0..s.len())
            .map(|i| {
                let x = s.coordinate(i);
                (s.values[i] - (1.4f64).powf(-0.5) * (-x * x / 1.4).exp()).abs()
            })
            .fold(0.0, f64::max);
        assert!(err <= 1e-6, "max error {err:e}");
    }

    #[test]
    fn gaussian_closed_form_two_dim_torus() {
        let g = GridField::from_fn(2, 96, -6.0, 6.0, true, |x| (-norm_sq(x)).exp()).unwrap();
        let s = heat_apply_grid(&g, 0.05).unwrap();
        for i in (0..s.len()).step_by(37) {
            let x = s.point(i);
            let exact = (1.2f64).powi(-1) * (-norm_sq(&x) / 1.2).exp();
            assert!((s.values[i] - exact).abs() < 1e-9);
        }
    }

    #[test]
    fn semigroup_property() {
        let g = GridField::from_fn(1, 64, 0.0, 1.0, true, |x| (2.0 * PI * x[0]).cos().powi(3) + x[0].sin()).unwrap();
        let a = heat_apply_grid(&heat_apply_grid(&g, 0.003).unwrap(), 0.004).unwrap();
        let b = heat_apply_grid(&g, 0.007).unwrap();
        assert!(a.values.iter().zip(&b.values).all(|(x, y)| (x - y).abs() < 1e-10));
    }

    #[test]
    fn single_mode_gradient_decay() {
        let g = torus_sin(64);
        let sg = heat_apply_grid_gradient(&g, 0.1).unwrap();
        let a = 2.0 * PI * (-4.0 * PI * PI * 0.1f64).exp();
        for i in 0..64 {
            let x = sg[0].coordinate(i);
            assert!((sg[0].values[i] - a * (2.0 * PI * x).cos()).abs() < 1e-10);
        }
        let dg = grid_gradient(&heat_apply_grid(&g, 0.1).unwrap());
        assert!(dg[0].values.iter().zip(&sg[0].values).all(|(x, y)| (x - y).abs() < 1e-10));
    }

    #[test]
    fn constant_gradient_vanishes() {
        let g = GridField::from_fn(2, 12, 0.0, 1.0, true, |_| 2.0).unwrap();
        for c in heat_apply_grid_gradient(&g, 0.05).unwrap() {
            assert!(c.max_abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_commutes_on_smooth_periodic_field() {
        let g = GridField::from_fn(2, 48, 0.0, 1.0, true, |x| {
            (2.0 * PI * x[0]).sin() * (4.0 * PI * x[1]).cos() + (2.0 * PI * (x[0] + x[1])).cos()
        })
        .unwrap();
        let a = grid_gradient(&heat_apply_grid(&g, 0.01).unwrap());
        let b = heat_apply_grid_gradient(&g, 0.01).unwrap();
        for k in 0..2 {
            assert!(a[k].values.iter().zip(&b[k].values).all(|(x, y)| (x - y).abs() < 1e-8));
        }
    }

    #[test]
    fn gauss_hermite_linear_and_quadratic() {
        let spec = SmoothingSpec {
            quadrature_order: 3,
            ..SmoothingSpec::default_for(2)
        };
        let pts = vec![vec![0.3, -0.7], vec![1.5, 2.0]];
        let lin = |x: &[f64]| 2.0 * x[0] - x[1] + 0.5;
        let r = heat_apply_points(&lin, &pts, 0.7, &spec).unwrap();
        for (p, v) in pts.iter().zip(&r.values) {
            assert!((v - lin(p)).abs() < 1e-12);
        }
        let r = heat_apply_points(&|x: &[f64]| norm_sq(x), &pts, 0.25, &spec).unwrap();
        for (p, v) in pts.iter().zip(&r.values) {
            assert!((v - norm_sq(p) - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn monte_carlo_within_four_standard_errors() {
        let spec = SmoothingSpec {
            mode: SmoothingMode::MonteCarlo,
            mc_samples: 10_000,
            antithetic: true,
            seed: 9,
            quadrature_order: 1,
        };
        let d = 3;
        let s = 0.2;
        let pts = vec![vec![0.0; d], vec![0.4, -0.2, 0.1]];
        let r = heat_apply_points(&|x: &[f64]| (-norm_sq(x)).exp(), &pts, s, &spec).unwrap();
        let se = r.std_errors.unwrap();
        for ((p, v), e) in pts.iter().zip(&r.values).zip(&se) {
            let c = 1.0 + 4.0 * s;
            let exact = c.powf(-(d as f64) / 2.0) * (-norm_sq(p) / c).exp();
            assert!((v - exact).abs() <= 4.0 * e, "{v} vs {exact}, se {e}");
        }
    }

    #[test]
    fn odd_antithetic_count_rejected() {
        let spec = SmoothingSpec {
            mode: SmoothingMode::MonteCarlo,
            mc_samples: 7,
            antithetic: true,
            seed: 0,
            quadrature_order: 1,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn grid_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridField::from_fn(2, 9, -1.0, 2.0, false, |x| x[0].exp() * x[1].sin() / 3.0).unwrap();
        let p = dir.path().join("g.csv");
        g.write_csv(&p).unwrap();
        assert_eq!(GridField::read_csv(&p).unwrap(), g);
        let p = dir.path().join("g.bin");
        g.write_binary(&p).unwrap();
        assert_eq!(GridField::read_binary(&p).unwrap(), g);
    }

    #[test]
    fn commutator_trivial_cases() {
        // f = 0, l = 0 gives H ≡ 0
        let zero = ControlProblem::zero(1, InitialCost::Gaussian).unwrap();
        let z = GridField::from_fn(1, 128, -1.0, 1.0, false, |x| (2.0 * PI * x[0]).sin()).unwrap();
        let r = commutator_probe(&z, &zero, &[1e-4, 1e-3]).unwrap();
        assert!(r.samples.iter().all(|s| s.sup_abs == 0.0));
        // H = |p|^2/2 with a linear datum
        let kin = ControlProblem::kinetic(1, InitialCost::Gaussian).unwrap();
        let lin = GridField::from_fn(1, 64, 0.0, 1.0, false, |x| 0.3 * x[0] + 1.0).unwrap();
        let r = commutator_probe(&lin, &kin, &[1e-4, 1e-3]).unwrap();
        assert!(r.samples.iter().all(|s| s.sup_abs < 1e-10));
    }

    #[test]
    fn commutator_matches_closed_form_for_sine() {
        // C = (pi^2/2)(1 - e^{-16 pi^2 s}) - 2 s at its extreme, for H = p^2/4 - x^2
        let lqr = ControlProblem::lqr(&LqrSpec {
            a: nalgebra::DMatrix::zeros(1, 1),
            ..LqrSpec::identity(1)
        })
        .unwrap();
        let z = GridField::from_fn(1, 1601, -2.0, 2.0, false, |x| (2.0 * PI * x[0]).sin()).unwrap();
        let levels = [1e-5, 1e-4, 1e-3];
        let r = commutator_probe(&z, &lqr, &levels).unwrap();
        for s in &r.samples {
            let exact = 0.5 * PI * PI * (1.0 - (-16.0 * PI * PI * s.eps_t).exp()) - 2.0 * s.eps_t;
            assert!((s.sup - exact).abs() < 1e-3 * exact.abs(), "{} vs {exact}", s.sup);
            let a = (-8.0 * PI * PI * s.eps_t).exp();
            let low = 0.5 * PI * PI * (1.0 - 2.0 * a + a * a) - 2.0 * s.eps_t;
            assert!((s.inf - low).abs() < 1e-3 * low.abs() + 1e-9, "inf {} vs {low}", s.inf);
        }
        assert!((0.8..=1.2).contains(&r.slope.unwrap()));
    }
}
