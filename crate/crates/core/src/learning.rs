//! Parametric value approximators, the value-gradient loss and ADAM.
//!
//! Two families are provided. [`RbfExpansion`] is a Gaussian radial basis
//! expansion with an optional polynomial tail of degree at most two; it is
//! linear in its parameters and the heat semigroup acts on it in closed
//! form. [`Mlp`] is a tanh feedforward network whose input gradient and the
//! parameter gradient of the gradient-matching loss are both computed
//! analytically (the latter by back-propagating through the tangent pass).

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::characteristics::LabelledSnapshot;
use crate::error::{Error, Result};
use crate::heat::GridField;
use crate::numerics::{dist_sq, pairwise_sum};

/// A scalar field with an available spatial gradient.
pub trait ValueField: Send + Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Writes `∇V(x)` into `grad` and returns `V(x)`.
    fn value_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim()];
        self.value_gradient(x, &mut g);
        g
    }
}

/// A field given by closures.
#[derive(Clone)]
pub struct FnField {
    pub dim: usize,
    pub value: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub gradient: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
}

impl ValueField for FnField {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }
    fn value_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (self.gradient)(x, grad);
        (self.value)(x)
    }
}

/// `base + delta`.
#[derive(Clone)]
pub struct SumField {
    pub base: Arc<dyn ValueField>,
    pub delta: Arc<dyn ValueField>,
}

impl ValueField for SumField {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.base.value(x) + self.delta.value(x)
    }
    fn value_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let mut g = vec![0.0; grad.len()];
        let a = self.base.value_gradient(x, grad);
        let b = self.delta.value_gradient(x, &mut g);
        for (o, v) in grad.iter_mut().zip(g) {
            *o += v;
        }
        a + b
    }
}

/// Multilinear interpolation of a grid field, with the gradient of the
/// interpolant on each cell.
pub struct GridInterpolant {
    pub field: GridField,
}

impl ValueField for GridInterpolant {
    fn dim(&self) -> usize {
        self.field.dim
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.field.interpolate(x)
    }
    fn value_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let h = self.field.spacing();
        for k in 0..self.dim() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[k] += 0.5 * h;
            xm[k] -= 0.5 * h;
            grad[k] = (self.field.interpolate(&xp) - self.field.interpolate(&xm)) / h;
        }
        self.field.interpolate(x)
    }
}

fn poly_feature_count(dim: usize, degree: u8) -> usize {
    match degree {
        0 => 1,
        1 => 1 + dim,
        _ => 1 + dim + dim * (dim + 1) / 2,
    }
}

/// `V(x) = Σ_j θ_j exp(-|x - c_j|^2 / (2 s_j^2)) + P_θ(x)` where `P` is a
/// polynomial of degree `poly_degree` (or absent).
#[derive(Clone, Debug, PartialEq)]
pub struct RbfExpansion {
    dim: usize,
    /// Flat `K × d` center coordinates.
    centers: Vec<f64>,
    /// Per-center shape `s_j`.
    shapes: Vec<f64>,
    poly_degree: Option<u8>,
    /// Center weights followed by polynomial coefficients (constant, linear,
    /// then `x_i x_j` for `i ≤ j`).
    theta: Vec<f64>,
}

impl RbfExpansion {
    pub fn new(dim: usize, centers: &[Vec<f64>], shapes: Vec<f64>, poly_degree: Option<u8>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        if centers.len() != shapes.len() {
            return Err(Error::invalid("one shape per center is required"));
        }
        if centers.iter().any(|c| c.len() != dim) {
            return Err(Error::invalid("center dimension mismatch"));
        }
        if shapes.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::invalid("RBF shapes must be positive"));
        }
        if matches!(poly_degree, Some(d) if d > 2) {
            return Err(Error::invalid("polynomial tail degree must be at most 2"));
        }
        let n = centers.len() + poly_degree.map_or(0, |p| poly_feature_count(dim, p));
        Ok(Self {
            dim,
            centers: centers.iter().flatten().copied().collect(),
            shapes,
            poly_degree,
            theta: vec![0.0; n],
        })
    }

    pub fn with_shared_shape(dim: usize, centers: &[Vec<f64>], shape: f64, poly_degree: Option<u8>) -> Result<Self> {
        Self::new(dim, centers, vec![shape; centers.len()], poly_degree)
    }

    pub fn center_count(&self) -> usize {
        self.shapes.len()
    }

    pub fn center(&self, j: usize) -> &[f64] {
        &self.centers[j * self.dim..(j + 1) * self.dim]
    }

    pub fn shapes(&self) -> &[f64] {
        &self.shapes
    }

    pub fn poly_degree(&self) -> Option<u8> {
        self.poly_degree
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.theta.len() {
            return Err(Error::invalid("parameter length mismatch"));
        }
        self.theta.copy_from_slice(theta);
        Ok(())
    }

    /// Evaluates all basis functions and their gradients at `x`.
    /// `phi` has length `P`; `dphi` is `P × d` row-major.
    pub fn features(&self, x: &[f64], phi: &mut [f64], dphi: &mut [f64]) {
        let d = self.dim;
        let k = self.center_count();
        for j in 0..k {
            let c = self.center(j);
            let s2 = self.shapes[j] * self.shapes[j];
            let e = (-dist_sq(x, c) / (2.0 * s2)).exp();
            phi[j] = e;
            for i in 0..d {
                dphi[j * d + i] = -e * (x[i] - c[i]) / s2;
            }
        }
        if let Some(deg) = self.poly_degree {
            let mut p = k;
            phi[p] = 1.0;
            dphi[p * d..(p + 1) * d].fill(0.0);
            p += 1;
            if deg >= 1 {
                for i in 0..d {
                    phi[p] = x[i];
                    dphi[p * d..(p + 1) * d].fill(0.0);
                    dphi[p * d + i] = 1.0;
                    p += 1;
                }
            }
            if deg >= 2 {
                for i in 0..d {
                    for j in i..d {
                        phi[p] = x[i] * x[j];
                        let row = &mut dphi[p * d..(p + 1) * d];
                        row.fill(0.0);
                        row[i] += x[j];
                        row[j] += x[i];
                        p += 1;
                    }
                }
            }
        }
    }

    fn eval_into(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let d = self.dim;
        let k = self.center_count();
        let mut v = 0.0;
        let mut gbuf = [0.0f64; 64];
        let mut gheap;
        let g: &mut [f64] = if d <= 64 {
            &mut gbuf[..d]
        } else {
            gheap = vec![0.0; d];
            &mut gheap
        };
        let want_grad = grad.is_some();
        for j in 0..k {
            let w = self.theta[j];
            if w == 0.0 {
                continue;
            }
            let c = &self.centers[j * d..(j + 1) * d];
            let s2 = self.shapes[j] * self.shapes[j];
            let e = w * (-dist_sq(x, c) / (2.0 * s2)).exp();
            v += e;
            if want_grad {
                for i in 0..d {
                    g[i] -= e * (x[i] - c[i]) / s2;
                }
            }
        }
        if let Some(deg) = self.poly_degree {
            let t = &self.theta[k..];
            v += t[0];
            let mut p = 1;
            if deg >= 1 {
                for i in 0..d {
                    v += t[p] * x[i];
                    g[i] += t[p];
                    p += 1;
                }
            }
            if deg >= 2 {
                for i in 0..d {
                    for j in i..d {
                        let c = t[p];
                        v += c * x[i] * x[j];
                        g[i] += c * x[j];
                        g[j] += c * x[i];
                        p += 1;
                    }
                }
            }
        }
        if let Some(out) = grad {
            out.copy_from_slice(g);
        }
        v
    }

    /// Exact heat action `S_t` with `eps t = eps_t`: every Gaussian widens to
    /// `s^2 + 2 eps t` and is rescaled to keep its mass, and each `x_i^2`
    /// term adds `2 eps t` times its coefficient to the constant.
    pub fn heat_applied(&self, eps_t: f64) -> Result<Self> {
        if !(eps_t >= 0.0) {
            return Err(Error::invalid("eps*t must be non-negative"));
        }
        let mut out = self.clone();
        if eps_t == 0.0 {
            return Ok(out);
        }
        let sigma2 = 2.0 * eps_t;
        let half_d = self.dim as f64 / 2.0;
        for j in 0..self.center_count() {
            let s2 = self.shapes[j] * self.shapes[j];
            out.theta[j] *= (s2 / (s2 + sigma2)).powf(half_d);
            out.shapes[j] = (s2 + sigma2).sqrt();
        }
        if self.poly_degree == Some(2) {
            let k = self.center_count();
            let d = self.dim;
            let mut p = k + 1 + d;
            let mut trace = 0.0;
            for i in 0..d {
                for j in i..d {
                    if i == j {
                        trace += self.theta[p];
                    }
                    p += 1;
                }
            }
            out.theta[k] += sigma2 * trace;
        }
        Ok(out)
    }

    /// The expansion representing `self + other`.
    pub fn merged(&self, other: &RbfExpansion) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::invalid("cannot merge expansions of different dimension"));
        }
        let d = self.dim;
        let degree = match (self.poly_degree, other.poly_degree) {
            (None, None) => None,
            (a, b) => Some(a.unwrap_or(0).max(b.unwrap_or(0))),
        };
        let mut centers: Vec<Vec<f64>> = (0..self.center_count()).map(|j| self.center(j).to_vec()).collect();
        centers.extend((0..other.center_count()).map(|j| other.center(j).to_vec()));
        let mut shapes = self.shapes.clone();
        shapes.extend_from_slice(&other.shapes);
        let mut out = Self::new(d, &centers, shapes, degree)?;
        let k = centers.len();
        out.theta[..self.center_count()].copy_from_slice(&self.theta[..self.center_count()]);
        out.theta[self.center_count()..k].copy_from_slice(&other.theta[..other.center_count()]);
        for src in [self, other] {
            if let Some(deg) = src.poly_degree {
                let tail = &src.theta[src.center_count()..];
                // lower-degree tails are prefixes of the higher-degree layout
                let n = poly_feature_count(d, deg);
                for (o, t) in out.theta[k..k + n].iter_mut().zip(tail) {
                    *o += t;
                }
            }
        }
        Ok(out)
    }

    /// Least-squares projection of `self` onto the span of `template`
    /// (value and gradient misfit at `points`, weighted by `mu`). Returns the
    /// projected expansion and its root-mean-square value error at `points`.
    pub fn projected(&self, template: &RbfExpansion, points: &[Vec<f64>], mu: f64) -> Result<(Self, f64)> {
        if template.dim != self.dim {
            return Err(Error::invalid("projection template has a different dimension"));
        }
        let w = 1.0 / points.len().max(1) as f64;
        let data: Vec<LabelledSnapshot> = points
            .iter()
            .map(|x| {
                let mut g = vec![0.0; self.dim];
                let v = self.value_gradient(x, &mut g);
                LabelledSnapshot {
                    traj_id: 0,
                    t: 0.0,
                    arclen: 0.0,
                    state: x.clone(),
                    value: v,
                    gradient: g,
                    weight: w,
                }
            })
            .collect();
        let quad = QuadraticLoss::assemble(&LossConfig { mu, data: &data }, template)?;
        let mut out = template.clone();
        out.set_theta(&quad.minimizer(1e-13))?;
        let sq: Vec<f64> = data.iter().map(|s| (out.value(&s.state) - s.value).powi(2)).collect();
        let rms = (pairwise_sum(&sq) * w).sqrt();
        Ok((out, rms))
    }

    /// Drops centers whose weight magnitude is at most `tol`.
    pub fn pruned(&self, tol: f64) -> Self {
        let keep: Vec<usize> = (0..self.center_count()).filter(|&j| self.theta[j].abs() > tol).collect();
        let centers: Vec<Vec<f64>> = keep.iter().map(|&j| self.center(j).to_vec()).collect();
        let shapes = keep.iter().map(|&j| self.shapes[j]).collect();
        let mut out = Self::new(self.dim, &centers, shapes, self.poly_degree).expect("subset of a valid expansion");
        for (n, &j) in keep.iter().enumerate() {
            out.theta[n] = self.theta[j];
        }
        let tail = &self.theta[self.center_count()..];
        out.theta[keep.len()..].copy_from_slice(tail);
        out
    }
}

impl ValueField for RbfExpansion {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.eval_into(x, None)
    }
    fn value_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.eval_into(x, Some(grad))
    }
}

/// Fully connected network with tanh hidden layers and a linear scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    /// Layer widths including the input dimension and the final `1`.
    widths: Vec<usize>,
    theta: Vec<f64>,
}

struct MlpTape {
    /// Hidden activations per layer.
    h: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn zeros(dim: usize, hidden: &[usize]) -> Result<Self> {
        if dim == 0 || hidden.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        let mut widths = vec![dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let n = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            widths,
            theta: vec![0.0; n],
        })
    }

    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn seeded(dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        let mut m = Self::zeros(dim, hidden)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut off = 0;
        for w in m.widths.clone().windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for v in &mut m.theta[off..off + w[0] * w[1]] {
                *v = rng.gen_range(-bound..bound);
            }
            off += w[0] * w[1] + w[1];
        }
        Ok(m)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Offsets of (weights, biases) of layer `l`.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let mut off = 0;
        for w in self.widths.windows(2).take(l) {
            off += w[0] * w[1] + w[1];
        }
        (off, off + self.widths[l] * self.widths[l + 1])
    }

    fn affine(&self, l: usize, input: &[f64], out: &mut [f64], with_bias: bool) {
        let (wo, bo) = self.offsets(l);
        let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
        for r in 0..n_out {
            let row = &self.theta[wo + r * n_in..wo + (r + 1) * n_in];
            let mut s = if with_bias { self.theta[bo + r] } else { 0.0 };
            for (a, b) in row.iter().zip(input) {
                s += a * b;
            }
            out[r] = s;
        }
    }

    fn affine_transpose(&self, l: usize, adj_out: &[f64], adj_in: &mut [f64]) {
        let (wo, _) = self.offsets(l);
        let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
        adj_in.fill(0.0);
        for r in 0..n_out {
            let row = &self.theta[wo + r * n_in..wo + (r + 1) * n_in];
            let a = adj_out[r];
            if a != 0.0 {
                for (o, w) in adj_in.iter_mut().zip(row) {
                    *o += a * w;
                }
            }
        }
    }

    fn forward(&self, x: &[f64]) -> (f64, MlpTape) {
        let mut h = Vec::with_capacity(self.layers());
        let mut cur = x.to_vec();
        for l in 0..self.layers() {
            let mut z = vec![0.0; self.widths[l + 1]];
            self.affine(l, &cur, &mut z, true);
            if l + 1 < self.layers() {
                for v in &mut z {
                    *v = v.tanh();
                }
                h.push(z.clone());
            }
            cur = z;
        }
        (cur[0], MlpTape { h })
    }

    fn input_gradient(&self, tape: &MlpTape, grad: &mut [f64]) {
        let last = self.layers() - 1;
        let (wo, _) = self.offsets(last);
        let mut adj: Vec<f64> = self.theta[wo..wo + self.widths[last]].to_vec();
        for l in (0..last).rev() {
            for (a, h) in adj.iter_mut().zip(&tape.h[l]) {
                *a *= 1.0 - h * h;
            }
            let mut below = vec![0.0; self.widths[l]];
            self.affine_transpose(l, &adj, &mut below);
            adj = below;
        }
        grad.copy_from_slice(&adj);
    }

    /// Accumulates `∂/∂θ [ a·y(x) + r·∇_x y(x) ]` into `out`.
    ///
    /// The tangent pass `ż_1 = W_1 r`, `ḣ_l = (1 - h_l^2) ż_l`,
    /// `ż_{l+1} = W_{l+1} ḣ_l`, `ẏ = w_out·ḣ_L` gives `ẏ = r·∇y`; the adjoint
    /// of the combined primal/tangent graph yields its parameter gradient.
    fn accumulate_param_gradient(&self, x: &[f64], a: f64, r: &[f64], out: &mut [f64]) {
        let nl = self.layers();
        // primal and tangent passes, keeping the layer inputs
        let mut inputs: Vec<Vec<f64>> = vec![x.to_vec()];
        let mut tangents_in: Vec<Vec<f64>> = vec![r.to_vec()];
        let mut hs: Vec<Vec<f64>> = Vec::with_capacity(nl);
        let mut zdots: Vec<Vec<f64>> = Vec::with_capacity(nl);
        for l in 0..nl {
            let mut z = vec![0.0; self.widths[l + 1]];
            let mut zd = vec![0.0; self.widths[l + 1]];
            self.affine(l, &inputs[l], &mut z, true);
            self.affine(l, &tangents_in[l], &mut zd, false);
            if l + 1 < nl {
                let h: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
                let hd: Vec<f64> = h.iter().zip(&zd).map(|(h, d)| (1.0 - h * h) * d).collect();
                inputs.push(h.clone());
                tangents_in.push(hd);
                hs.push(h);
            }
            zdots.push(zd);
        }
        // adjoints of the output layer's pre-activations (primal, tangent)
        let mut zbar = vec![a];
        let mut zdbar = vec![1.0];
        for l in (0..nl).rev() {
            let (wo, bo) = self.offsets(l);
            let n_in = self.widths[l];
            for rix in 0..self.widths[l + 1] {
                let (p, q) = (zbar[rix], zdbar[rix]);
                let row = &mut out[wo + rix * n_in..wo + (rix + 1) * n_in];
                for ((o, xin), tin) in row.iter_mut().zip(&inputs[l]).zip(&tangents_in[l]) {
                    *o += p * xin + q * tin;
                }
                out[bo + rix] += p;
            }
            if l == 0 {
                break;
            }
            let mut hbar = vec![0.0; n_in];
            let mut hdbar = vec![0.0; n_in];
            self.affine_transpose(l, &zbar, &mut hbar);
            self.affine_transpose(l, &zdbar, &mut hdbar);
            let h = &hs[l - 1];
            let zd = &zdots[l - 1];
            let mut new_zbar = vec![0.0; n_in];
            let mut new_zdbar = vec![0.0; n_in];
            for i in 0..n_in {
                let dd = 1.0 - h[i] * h[i];
                // ḣ = dd·ż contributes to both ż and (through dd) to h
                new_zdbar[i] = dd * hdbar[i];
                let hb = hbar[i] - 2.0 * h[i] * zd[i] * hdbar[i];
                new_zbar[i] = dd * hb;
            }
            zbar = new_zbar;
            zdbar = new_zdbar;
        }
    }
}

impl ValueField for Mlp {
    fn dim(&self) -> usize {
        self.widths[0]
    }
    fn value(&self, x: &[f64]) -> f64 {
        self.forward(x).0
    }
    fn value_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (y, tape) = self.forward(x);
        self.input_gradient(&tape, grad);
        y
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Rbf,
    Mlp,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ValueApproximator {
    Rbf(RbfExpansion),
    Mlp(Mlp),
}

impl ValueApproximator {
    pub fn family(&self) -> Family {
        match self {
            Self::Rbf(_) => Family::Rbf,
            Self::Mlp(_) => Family::Mlp,
        }
    }

    pub fn theta(&self) -> &[f64] {
        match self {
            Self::Rbf(r) => &r.theta,
            Self::Mlp(m) => &m.theta,
        }
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<()> {
        let t = match self {
            Self::Rbf(r) => &mut r.theta,
            Self::Mlp(m) => &mut m.theta,
        };
        if t.len() != theta.len() {
            return Err(Error::invalid("parameter length mismatch"));
        }
        t.copy_from_slice(theta);
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.theta().len()
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "state has dimension {}, approximator expects {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.value(x))
    }

    pub fn grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        Ok(self.gradient(x))
    }

    /// Accumulates `∂/∂θ [ a V̂(x) + r·∇V̂(x) ]`.
    fn accumulate_param_gradient(&self, x: &[f64], a: f64, r: &[f64], out: &mut [f64], scratch: &mut FeatureScratch) {
        match self {
            Self::Rbf(rbf) => {
                let d = rbf.dim;
                scratch.ensure(rbf.param_count(), d);
                rbf.features(x, &mut scratch.phi, &mut scratch.dphi);
                for (j, o) in out.iter_mut().enumerate() {
                    let row = &scratch.dphi[j * d..(j + 1) * d];
                    *o += a * scratch.phi[j] + row.iter().zip(r).map(|(p, q)| p * q).sum::<f64>();
                }
            }
            Self::Mlp(m) => m.accumulate_param_gradient(x, a, r, out),
        }
    }

    /// Self-describing text artifact; floats use shortest round-trip
    /// formatting, so loading reproduces every bit.
    pub fn to_text(&self) -> String {
        let mut s = String::from("hjb-split-model 1\n");
        match self {
            Self::Rbf(r) => {
                let _ = writeln!(s, "family rbf");
                let _ = writeln!(s, "dim {}", r.dim);
                let _ = writeln!(s, "poly_degree {}", r.poly_degree.map_or("none".to_string(), |d| d.to_string()));
                let _ = writeln!(s, "centers {}", r.center_count());
                for j in 0..r.center_count() {
                    let row: Vec<String> = r.center(j).iter().chain([&r.shapes[j]]).map(|v| v.to_string()).collect();
                    let _ = writeln!(s, "{}", row.join(" "));
                }
            }
            Self::Mlp(m) => {
                let _ = writeln!(s, "family mlp");
                let _ = writeln!(s, "dim {}", m.widths[0]);
                let w: Vec<String> = m.widths.iter().map(|v| v.to_string()).collect();
                let _ = writeln!(s, "widths {}", w.join(" "));
                let _ = writeln!(s, "activation tanh");
            }
        }
        let theta = self.theta();
        let _ = writeln!(s, "theta {}", theta.len());
        for v in theta {
            let _ = writeln!(s, "{v}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let perr = |m: &str| Error::Parse(format!("model artifact: {m}"));
        let mut next = || lines.next().ok_or_else(|| perr("unexpected end of file"));
        if next()? != "hjb-split-model 1" {
            return Err(perr("unknown header"));
        }
        let field = |line: &str, key: &str| -> Result<String> {
            line.strip_prefix(key)
                .map(|r| r.trim().to_string())
                .ok_or_else(|| perr(&format!("expected `{key}`, got {line:?}")))
        };
        let num = |s: &str| s.parse::<f64>().map_err(|_| perr(&format!("bad number {s:?}")));
        let int = |s: &str| s.parse::<usize>().map_err(|_| perr(&format!("bad integer {s:?}")));
        let family = field(next()?, "family")?;
        let dim = int(&field(next()?, "dim")?)?;
        let mut approx = match family.as_str() {
            "rbf" => {
                let deg = field(next()?, "poly_degree")?;
                let degree = if deg == "none" {
                    None
                } else {
                    Some(deg.parse::<u8>().map_err(|_| perr("bad polynomial degree"))?)
                };
                let k = int(&field(next()?, "centers")?)?;
                let mut centers = Vec::with_capacity(k);
                let mut shapes = Vec::with_capacity(k);
                for _ in 0..k {
                    let vals: Vec<f64> = next()?.split_whitespace().map(num).collect::<Result<_>>()?;
                    if vals.len() != dim + 1 {
                        return Err(perr("center row has the wrong length"));
                    }
                    shapes.push(vals[dim]);
                    centers.push(vals[..dim].to_vec());
                }
                Self::Rbf(RbfExpansion::new(dim, &centers, shapes, degree)?)
            }
            "mlp" => {
                let widths: Vec<usize> = field(next()?, "widths")?.split_whitespace().map(int).collect::<Result<_>>()?;
                if widths.len() < 2 || widths[0] != dim || *widths.last().unwrap() != 1 {
                    return Err(perr("inconsistent widths"));
                }
                if field(next()?, "activation")? != "tanh" {
                    return Err(perr("only tanh activation is supported"));
                }
                Self::Mlp(Mlp::zeros(dim, &widths[1..widths.len() - 1])?)
            }
            other => return Err(perr(&format!("unknown family {other:?}"))),
        };
        let n = int(&field(next()?, "theta")?)?;
        let theta: Vec<f64> = (0..n).map(|_| next().and_then(num)).collect::<Result<_>>()?;
        approx.set_theta(&theta)?;
        Ok(approx)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

impl ValueField for ValueApproximator {
    fn dim(&self) -> usize {
        match self {
            Self::Rbf(r) => r.dim(),
            Self::Mlp(m) => m.dim(),
        }
    }
    fn value(&self, x: &[f64]) -> f64 {
        match self {
            Self::Rbf(r) => r.value(x),
            Self::Mlp(m) => m.value(x),
        }
    }
    fn value_gradient(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        match self {
            Self::Rbf(r) => r.value_gradient(x, grad),
            Self::Mlp(m) => m.value_gradient(x, grad),
        }
    }
}

#[derive(Default)]
struct FeatureScratch {
    phi: Vec<f64>,
    dphi: Vec<f64>,
}

impl FeatureScratch {
    fn ensure(&mut self, p: usize, d: usize) {
        if self.phi.len() != p {
            self.phi = vec![0.0; p];
            self.dphi = vec![0.0; p * d];
        }
    }
}

/// Value-gradient loss data: `L(θ) = μ Σ w |V - V̂|^2 + (1-μ) Σ w |λ - ∇V̂|^2`.
#[derive(Clone, Copy, Debug)]
pub struct LossConfig<'a> {
    pub mu: f64,
    pub data: &'a [LabelledSnapshot],
}

impl LossConfig<'_> {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.mu) {
            return Err(Error::invalid("μ must lie in [0, 1]"));
        }
        if self.data.is_empty() {
            return Err(Error::invalid("loss dataset is empty"));
        }
        if self
            .data
            .iter()
            .any(|s| !s.value.is_finite() || s.gradient.iter().any(|g| !g.is_finite()) || !(s.weight >= 0.0))
        {
            return Err(Error::invalid("dataset labels must be finite with non-negative weights"));
        }
        Ok(())
    }
}

const LEAF: usize = 16;

/// Loss value and exact parameter gradient, summed over snapshots by a
/// fixed pairwise tree so the result does not depend on evaluation order
/// within leaves of the tree.
pub fn loss(config: &LossConfig, approx: &ValueApproximator) -> Result<(f64, Vec<f64>)> {
    config.validate()?;
    let d = approx.dim();
    if config.data.iter().any(|s| s.state.len() != d || s.gradient.len() != d) {
        return Err(Error::invalid("snapshot dimension does not match the approximator"));
    }
    Ok(loss_range(config, approx, 0, config.data.len()))
}

fn loss_range(config: &LossConfig, approx: &ValueApproximator, lo: usize, hi: usize) -> (f64, Vec<f64>) {
    if hi - lo <= LEAF {
        let p = approx.param_count();
        let d = approx.dim();
        let mut grad = vec![0.0; p];
        let mut g = vec![0.0; d];
        let mut r = vec![0.0; d];
        let mut scratch = FeatureScratch::default();
        let mut total = 0.0;
        for s in &config.data[lo..hi] {
            let v = approx.value_gradient(&s.state, &mut g);
            let ev = v - s.value;
            let mut eg = 0.0;
            for k in 0..d {
                let e = g[k] - s.gradient[k];
                eg += e * e;
                r[k] = 2.0 * (1.0 - config.mu) * s.weight * e;
            }
            let (wv, wg) = (config.mu * s.weight, (1.0 - config.mu) * s.weight);
            total += if wv > 0.0 { wv * ev * ev } else { 0.0 } + if wg > 0.0 { wg * eg } else { 0.0 };
            let a = 2.0 * wv * ev;
            if wg == 0.0 {
                r.fill(0.0);
            }
            approx.accumulate_param_gradient(&s.state, if wv == 0.0 { 0.0 } else { a }, &r, &mut grad, &mut scratch);
        }
        return (total, grad);
    }
    let mid = lo + (hi - lo) / 2;
    let (la, mut ga) = loss_range(config, approx, lo, mid);
    let (lb, gb) = loss_range(config, approx, mid, hi);
    for (a, b) in ga.iter_mut().zip(gb) {
        *a += b;
    }
    (la + lb, ga)
}

/// The loss of a linear-in-θ family as an explicit quadratic
/// `L(θ) = θ^T Q θ - 2 b^T θ + c`.
#[derive(Clone, Debug)]
pub struct QuadraticLoss {
    pub q: DMatrix<f64>,
    pub b: DVector<f64>,
    pub c: f64,
}

impl QuadraticLoss {
    pub fn assemble(config: &LossConfig, rbf: &RbfExpansion) -> Result<Self> {
        config.validate()?;
        let p = rbf.param_count();
        let d = rbf.dim;
        let mu = config.mu;
        // rows of the weighted design matrix, one per (snapshot, component)
        let rows_per = 1 + d;
        let m = config.data.len();
        let mut design = DMatrix::<f64>::zeros(m * rows_per, p);
        let mut rhs = DVector::<f64>::zeros(m * rows_per);
        let mut phi = vec![0.0; p];
        let mut dphi = vec![0.0; p * d];
        for (n, s) in config.data.iter().enumerate() {
            if s.state.len() != d || s.gradient.len() != d {
                return Err(Error::invalid("snapshot dimension does not match the approximator"));
            }
            rbf.features(&s.state, &mut phi, &mut dphi);
            let sv = (mu * s.weight).sqrt();
            let sg = ((1.0 - mu) * s.weight).sqrt();
            let base = n * rows_per;
            for j in 0..p {
                design[(base, j)] = sv * phi[j];
                for k in 0..d {
                    design[(base + 1 + k, j)] = sg * dphi[j * d + k];
                }
            }
            rhs[base] = sv * s.value;
            for k in 0..d {
                rhs[base + 1 + k] = sg * s.gradient[k];
            }
        }
        let q = design.tr_mul(&design);
        let b = design.tr_mul(&rhs);
        let c = rhs.norm_squared();
        Ok(Self { q, b, c })
    }

    pub fn value_gradient(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let t = DVector::from_column_slice(theta);
        let qt = &self.q * &t;
        let val = t.dot(&qt) - 2.0 * self.b.dot(&t) + self.c;
        let grad = (qt - &self.b) * 2.0;
        (val.max(0.0), grad.as_slice().to_vec())
    }

    /// Minimizer of the quadratic, by a symmetric eigen-decomposition
    /// pseudo-inverse (spectrum below `rel_tol · λ_max` discarded).
    pub fn minimizer(&self, rel_tol: f64) -> Vec<f64> {
        let eig = self.q.clone().symmetric_eigen();
        let lmax = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let ub = eig.eigenvectors.tr_mul(&self.b);
        let mut coeff = DVector::zeros(ub.len());
        for i in 0..ub.len() {
            let l = eig.eigenvalues[i];
            if l > rel_tol * lmax {
                coeff[i] = ub[i] / l;
            }
        }
        (eig.eigenvectors * coeff).as_slice().to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// Default learning rate of each family.
    pub fn for_family(family: Family, n: usize) -> Self {
        Self::new(
            n,
            match family {
                Family::Rbf => 1e-2,
                Family::Mlp => 3e-3,
            },
        )
    }

    pub fn update(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            theta[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
        }
    }
}

/// Early stop when the loss drops below `abs_tol`, or when the relative
/// improvement over the last `window` steps is below `rel_tol`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub window: usize,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            abs_tol: 1e-8,
            rel_tol: 1e-6,
            window: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitReport {
    /// Loss before each update, followed by the final loss.
    pub trace: Vec<f64>,
    pub stopped_early: bool,
}

impl FitReport {
    pub fn final_loss(&self) -> f64 {
        *self.trace.last().unwrap_or(&f64::NAN)
    }
}

/// Full-batch ADAM on an arbitrary objective returning `(value, gradient)`.
pub fn adam_minimize(
    theta: &mut [f64],
    objective: &mut dyn FnMut(&[f64]) -> (f64, Vec<f64>),
    steps: usize,
    adam: &mut AdamState,
    stop: Option<EarlyStop>,
) -> Result<FitReport> {
    if adam.m.len() != theta.len() || adam.v.len() != theta.len() {
        return Err(Error::invalid("ADAM moment vectors must match the parameter length"));
    }
    let mut trace = Vec::with_capacity(steps + 1);
    let mut stopped_early = false;
    if steps == 0 {
        return Ok(FitReport { trace, stopped_early });
    }
    for _ in 0..steps {
        let (l, g) = objective(theta);
        if !l.is_finite() || g.iter().any(|v| !v.is_finite()) {
            trace.push(l);
            return Err(Error::numerical("non-finite loss during ADAM; learning rate too large?", trace));
        }
        trace.push(l);
        if let Some(s) = stop {
            let n = trace.len();
            if l < s.abs_tol {
                stopped_early = true;
                break;
            }
            if n > s.window {
                let old = trace[n - 1 - s.window];
                if old > 0.0 && (old - l) / old < s.rel_tol {
                    stopped_early = true;
                    break;
                }
            }
        }
        adam.update(theta, &g);
    }
    if !stopped_early {
        let (l, _) = objective(theta);
        if !l.is_finite() {
            trace.push(l);
            return Err(Error::numerical("non-finite loss after ADAM", trace));
        }
        trace.push(l);
    }
    Ok(FitReport { trace, stopped_early })
}

/// Trains `approx` on the value-gradient loss. The radial-basis family is
/// linear in θ, so its loss is assembled once as a quadratic form and each
/// step costs one matrix-vector product.
pub fn adam_fit(
    approx: &mut ValueApproximator,
    config: &LossConfig,
    steps: usize,
    adam: &mut AdamState,
    stop: Option<EarlyStop>,
) -> Result<FitReport> {
    config.validate()?;
    let mut theta = approx.theta().to_vec();
    let report = match approx {
        ValueApproximator::Rbf(rbf) => {
            let quad = QuadraticLoss::assemble(config, rbf)?;
            adam_minimize(&mut theta, &mut |t| quad.value_gradient(t), steps, adam, stop)?
        }
        ValueApproximator::Mlp(_) => {
            let template = approx.clone();
            let mut work = template;
            adam_minimize(
                &mut theta,
                &mut |t| {
                    work.set_theta(t).expect("same length");
                    loss_range(config, &work, 0, config.data.len())
                },
                steps,
                adam,
                stop,
            )?
        }
    };
    approx.set_theta(&theta)?;
    Ok(report)
}

/// Deterministic farthest-point subsample of at most `max` points, starting
/// from the first.
pub fn farthest_point_subsample(points: &[Vec<f64>], max: usize) -> Vec<Vec<f64>> {
    if points.is_empty() || max == 0 {
        return vec![];
    }
    if points.len() <= max {
        return points.to_vec();
    }
    let mut chosen = vec![0usize];
    let mut dmin: Vec<f64> = points.iter().map(|p| dist_sq(p, &points[0])).collect();
    while chosen.len() < max {
        let (best, _) = dmin
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if *v > acc.1 { (i, *v) } else { acc });
        chosen.push(best);
        for (i, p) in points.iter().enumerate() {
            dmin[i] = dmin[i].min(dist_sq(p, &points[best]));
        }
    }
    chosen.into_iter().map(|i| points[i].clone()).collect()
}

/// Mean distance from each point to its nearest neighbour.
pub fn mean_nearest_neighbor_distance(points: &[Vec<f64>]) -> f64 {
    if points.len() < 2 {
        return 0.0;
    }
    let d: Vec<f64> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| dist_sq(p, q))
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    pairwise_sum(&d) / d.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, proptest};

    fn snap(state: Vec<f64>, value: f64, gradient: Vec<f64>, weight: f64) -> LabelledSnapshot {
        LabelledSnapshot {
            traj_id: 0,
            t: 0.0,
            arclen: 0.0,
            state,
            value,
            gradient,
            weight,
        }
    }

    fn random_points(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn random_rbf(d: usize, k: usize, seed: u64) -> RbfExpansion {
        let mut r = RbfExpansion::new(
            d,
            &random_points(k, d, seed),
            (0..k).map(|j| 0.4 + 0.1 * j as f64).collect(),
            Some(2),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let t: Vec<f64> = (0..r.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        r.set_theta(&t).unwrap();
        r
    }

    fn random_mlp(d: usize, seed: u64) -> Mlp {
        let mut m = Mlp::seeded(d, &[7, 5], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        for v in &mut m.theta {
            *v += rng.gen_range(-0.3..0.3);
        }
        m
    }

    fn fd_gradient(f: &dyn ValueField, x: &[f64]) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|k| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[k] += h;
                xm[k] -= h;
                (f.value(&xp) - f.value(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-3);
        num / den
    }

    fn dataset(d: usize, n: usize, seed: u64) -> Vec<LabelledSnapshot> {
        random_points(n, d, seed)
            .into_iter()
            .map(|x| {
                let v = (x[0] + 0.5 * x[d - 1]).sin();
                let mut g = vec![0.0; d];
                g[0] += (x[0] + 0.5 * x[d - 1]).cos();
                g[d - 1] += 0.5 * (x[0] + 0.5 * x[d - 1]).cos();
                snap(x, v, g, 1.0 / n as f64)
            })
            .collect()
    }

    #[test]
    fn rbf_trivial_values() {
        let c = vec![vec![0.2, -0.4]];
        let mut r = RbfExpansion::with_shared_shape(2, &c, 0.7, None).unwrap();
        assert_eq!(r.value(&[0.5, 0.5]), 0.0);
        r.set_theta(&[1.0]).unwrap();
        assert_eq!(r.value(&c[0]), 1.0);
        assert_eq!(r.gradient(&c[0]), vec![0.0, 0.0]);
        let a = ValueApproximator::Rbf(r);
        assert!(a.eval(&[1.0]).is_err());
    }

    #[test]
    fn rbf_interpolates_five_points() {
        let pts = random_points(5, 2, 12);
        let mut r = RbfExpansion::with_shared_shape(2, &pts, 0.5, None).unwrap();
        let data: Vec<LabelledSnapshot> = pts.iter().map(|x| snap(x.clone(), x[0] * x[0] - x[1], vec![0.0; 2], 1.0)).collect();
        let q = QuadraticLoss::assemble(&LossConfig { mu: 1.0, data: &data }, &r).unwrap();
        r.set_theta(&q.minimizer(1e-15)).unwrap();
        for s in &data {
            assert!((r.value(&s.state) - s.value).abs() < 1e-8);
        }
    }

    #[test]
    fn analytic_input_gradients_match_fd() {
        for seed in 0..5 {
            let x = &random_points(1, 3, 100 + seed)[0];
            let r = random_rbf(3, 6, seed);
            assert!(rel_err(&r.gradient(x), &fd_gradient(&r, x)) < 1e-5);
            let m = random_mlp(3, seed);
            assert!(rel_err(&m.gradient(x), &fd_gradient(&m, x)) < 1e-5);
        }
        let z = Mlp::zeros(4, &[8, 8]).unwrap();
        assert!(z.gradient(&[0.1, 0.2, 0.3, 0.4]).iter().all(|v| *v == 0.0));
    }

    fn fd_param_gradient(config: &LossConfig, approx: &ValueApproximator) -> Vec<f64> {
        let h = 1e-6;
        let theta = approx.theta().to_vec();
        let mut a = approx.clone();
        (0..theta.len())
            .map(|i| {
                let mut tp = theta.clone();
                tp[i] += h;
                a.set_theta(&tp).unwrap();
                let lp = loss(config, &a).unwrap().0;
                tp[i] -= 2.0 * h;
                a.set_theta(&tp).unwrap();
                let lm = loss(config, &a).unwrap().0;
                (lp - lm) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn loss_parameter_gradients_match_fd() {
        for seed in 0..10 {
            let data = dataset(2, 9, seed);
            let mu = [0.0, 0.3, 0.8, 1.0][seed as usize % 4];
            let cfg = LossConfig { mu, data: &data };
            let rbf = ValueApproximator::Rbf(random_rbf(2, 4, seed));
            let (_, g) = loss(&cfg, &rbf).unwrap();
            assert!(rel_err(&g, &fd_param_gradient(&cfg, &rbf)) < 1e-4, "rbf seed {seed}");
            let mlp = ValueApproximator::Mlp(random_mlp(2, seed));
            let (_, g) = loss(&cfg, &mlp).unwrap();
            assert!(rel_err(&g, &fd_param_gradient(&cfg, &mlp)) < 1e-4, "mlp seed {seed}");
        }
    }

    #[test]
    fn perfect_fit_has_zero_loss() {
        let r = random_rbf(2, 3, 4);
        let data: Vec<LabelledSnapshot> = random_points(7, 2, 5)
            .into_iter()
            .map(|x| snap(x.clone(), r.value(&x), r.gradient(&x), 0.2))
            .collect();
        let (l, g) = loss(&LossConfig { mu: 0.5, data: &data }, &ValueApproximator::Rbf(r)).unwrap();
        assert!(l < 1e-28 && g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn quadratic_form_matches_direct_loss() {
        let data = dataset(3, 20, 8);
        let r = random_rbf(3, 5, 2);
        let cfg = LossConfig { mu: 0.4, data: &data };
        let q = QuadraticLoss::assemble(&cfg, &r).unwrap();
        let (l1, g1) = q.value_gradient(r.theta());
        let (l2, g2) = loss(&cfg, &ValueApproximator::Rbf(r)).unwrap();
        assert!((l1 - l2).abs() < 1e-10 * l2.max(1.0));
        assert!(rel_err(&g1, &g2) < 1e-10);
    }

    #[test]
    fn rbf_hessian_is_constant() {
        let data = dataset(2, 10, 1);
        let cfg = LossConfig { mu: 0.6, data: &data };
        let hess_entry = |theta: &[f64], i: usize, j: usize| {
            let h = 1e-3;
            let mut a = ValueApproximator::Rbf(random_rbf(2, 3, 7));
            let mut eval = |di: f64, dj: f64| {
                let mut t = theta.to_vec();
                t[i] += di;
                t[j] += dj;
                a.set_theta(&t).unwrap();
                loss(&cfg, &a).unwrap().0
            };
            (eval(h, h) - eval(h, -h) - eval(-h, h) + eval(-h, -h)) / (4.0 * h * h)
        };
        let n = random_rbf(2, 3, 7).param_count();
        let t1: Vec<f64> = vec![0.0; n];
        let t2: Vec<f64> = random_rbf(2, 3, 99).theta().to_vec();
        for (i, j) in [(0, 0), (1, 4), (2, 7), (5, 5)] {
            assert!((hess_entry(&t1, i, j) - hess_entry(&t2, i, j)).abs() < 1e-6);
        }
    }

    #[test]
    fn mu_endpoints_ignore_excluded_labels() {
        let data = dataset(2, 8, 3);
        let mut corrupted = data.clone();
        for s in &mut corrupted {
            s.gradient = vec![1e3, -7.0];
        }
        let a = ValueApproximator::Mlp(random_mlp(2, 1));
        let l1 = loss(&LossConfig { mu: 1.0, data: &data }, &a).unwrap();
        let l2 = loss(&LossConfig { mu: 1.0, data: &corrupted }, &a).unwrap();
        assert_eq!(l1.0, l2.0);
        assert_eq!(l1.1, l2.1);
        for s in &mut corrupted {
            s.gradient = data[0].gradient.clone();
            s.value = f64::MAX / 1e10;
        }
        let mut c2 = data.clone();
        for (s, o) in c2.iter_mut().zip(&corrupted) {
            s.value = o.value;
        }
        let l1 = loss(&LossConfig { mu: 0.0, data: &data }, &a).unwrap();
        let l2 = loss(&LossConfig { mu: 0.0, data: &c2 }, &a).unwrap();
        assert_eq!(l1.0, l2.0);
        assert_eq!(l1.1, l2.1);
    }

    #[test]
    fn adam_reaches_least_squares_optimum() {
        // well-conditioned linear toy: wide, well separated centers plus a linear tail
        let centers = vec![vec![-1.0], vec![0.0], vec![1.0]];
        let rbf = RbfExpansion::with_shared_shape(1, &centers, 0.35, Some(1)).unwrap();
        let data: Vec<LabelledSnapshot> = (0..41)
            .map(|i| {
                let x = -1.0 + 0.05 * i as f64;
                snap(vec![x], (2.0 * x).sin(), vec![2.0 * (2.0 * x).cos()], 1.0 / 41.0)
            })
            .collect();
        let cfg = LossConfig { mu: 0.5, data: &data };
        let q = QuadraticLoss::assemble(&cfg, &rbf).unwrap();
        let best = q.value_gradient(&q.minimizer(1e-14)).0;
        let mut a = ValueApproximator::Rbf(rbf);
        let mut adam = AdamState::for_family(Family::Rbf, a.param_count());
        let rep = adam_fit(&mut a, &cfg, 2000, &mut adam, None).unwrap();
        assert!(rep.final_loss() - best < 1e-6, "{} vs {best}", rep.final_loss());
        let head = rep.trace[..50].iter().cloned().fold(f64::INFINITY, f64::min);
        let tail = rep.trace[rep.trace.len() - 50..].iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(tail <= head);
    }

    #[test]
    fn adam_zero_steps_is_identity() {
        let mut a = ValueApproximator::Mlp(random_mlp(2, 5));
        let before = a.clone();
        let data = dataset(2, 4, 0);
        let mut adam = AdamState::for_family(Family::Mlp, a.param_count());
        adam_fit(&mut a, &LossConfig { mu: 0.5, data: &data }, 0, &mut adam, None).unwrap();
        assert_eq!(a, before);
    }

    #[test]
    fn adam_blow_up_is_reported() {
        let mut theta = vec![1.0];
        let mut adam = AdamState::new(1, 1.0);
        let r = adam_minimize(&mut theta, &mut |t| (f64::exp(t[0].abs() * 800.0), vec![1.0]), 10, &mut adam, None);
        assert!(matches!(r, Err(Error::NumericalFailure { .. })));
    }

    #[test]
    fn mlp_fit_is_stable_under_resampling() {
        let grid: Vec<Vec<f64>> = random_points(50, 2, 77);
        let fit = |n: usize, seed: u64| {
            let data = dataset(2, n, seed);
            let mut a = ValueApproximator::Mlp(Mlp::seeded(2, &[16, 16], 1).unwrap());
            let mut adam = AdamState::new(a.param_count(), 1e-2);
            adam_fit(&mut a, &LossConfig { mu: 0.5, data: &data }, 1500, &mut adam, None).unwrap();
            a
        };
        let a = fit(100, 5);
        let b = fit(200, 6);
        let num: f64 = grid.iter().map(|x| (a.value(x) - b.value(x)).powi(2)).sum::<f64>().sqrt();
        let den: f64 = grid.iter().map(|x| a.value(x).powi(2)).sum::<f64>().sqrt();
        assert!(num / den < 0.1, "relative change {}", num / den);
    }

    #[test]
    fn heat_of_single_gaussian_and_quadratic() {
        let d = 3;
        let mut r = RbfExpansion::with_shared_shape(d, &[vec![0.0; d]], (0.5f64).sqrt(), Some(2)).unwrap();
        let mut theta = vec![0.0; r.param_count()];
        theta[0] = 1.0;
        // x^T Q x with Q = diag(1, 2, 3): coefficients of x_i^2 terms
        let k = 1;
        let mut p = k + 1 + d;
        for i in 0..d {
            for j in i..d {
                if i == j {
                    theta[p] = (i + 1) as f64;
                }
                p += 1;
            }
        }
        r.set_theta(&theta).unwrap();
        let s = 0.1;
        let h = r.heat_applied(s).unwrap();
        let x = [0.3, -0.2, 0.5];
        let c = 1.0 + 4.0 * s;
        let quad: f64 = x.iter().enumerate().map(|(i, v)| (i + 1) as f64 * v * v).sum();
        let exact = c.powf(-1.5) * (-crate::numerics::norm_sq(&x) / c).exp() + quad + 2.0 * s * 6.0;
        assert!((h.value(&x) - exact).abs() < 1e-13);
    }

    #[test]
    fn merge_and_prune_preserve_values() {
        let a = random_rbf(2, 3, 1);
        let b = RbfExpansion::with_shared_shape(2, &random_points(2, 2, 9), 0.3, Some(1)).unwrap();
        let mut b = b;
        b.set_theta(&[0.5, 0.0, 1.0, -2.0, 0.25]).unwrap();
        let m = a.merged(&b).unwrap();
        let pr = m.pruned(0.0);
        assert_eq!(pr.center_count(), 4);
        for x in random_points(10, 2, 4) {
            let e = a.value(&x) + b.value(&x);
            assert!((m.value(&x) - e).abs() < 1e-14);
            assert!((pr.value(&x) - e).abs() < 1e-14);
        }
    }

    #[test]
    fn artifacts_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for a in [
            ValueApproximator::Rbf(random_rbf(3, 4, 2)),
            ValueApproximator::Mlp(random_mlp(3, 2)),
        ] {
            let p = dir.path().join("m.model");
            a.save(&p).unwrap();
            let b = ValueApproximator::load(&p).unwrap();
            assert_eq!(a, b);
            assert!(a.theta().iter().zip(b.theta()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(ValueApproximator::from_text("garbage").is_err());
    }

    #[test]
    fn subsampling_helpers() {
        let pts = random_points(30, 2, 3);
        let sub = farthest_point_subsample(&pts, 5);
        assert_eq!(sub.len(), 5);
        assert_eq!(sub[0], pts[0]);
        assert_eq!(farthest_point_subsample(&pts, 50).len(), 30);
        let line: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 * 0.5]).collect();
        assert!((mean_nearest_neighbor_distance(&line) - 0.5).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn loss_is_invariant_under_reordering(seed in 0u64..1000, rot in 0usize..17) {
            let data = dataset(2, 17, seed);
            let mut shuffled = data.clone();
            shuffled.rotate_left(rot);
            shuffled.reverse();
            let a = ValueApproximator::Rbf(random_rbf(2, 3, seed));
            let l1 = loss(&LossConfig { mu: 0.3, data: &data }, &a).unwrap();
            let l2 = loss(&LossConfig { mu: 0.3, data: &shuffled }, &a).unwrap();
            prop_assert!((l1.0 - l2.0).abs() <= 1e-12 * l1.0.max(1.0));
            prop_assert!(rel_err(&l1.1, &l2.1) < 1e-12);
        }
    }
}
