//! Set network mapping a [`DkpmMatrix`] to a zero-mean 2D Gaussian mixture.
//!
//! Shared row MLP (7 -> 64 -> 128, ReLU), max-pool over every row including
//! zero padding, head MLP (128 -> 64 -> 4K). Each component's four raw
//! outputs become `sigma_x = exp(.)`, `sigma_y = exp(.)` (log clamped so
//! sigma stays in [1e-3, 1e4] m), `rho = 0.99 tanh(.)` and a softmax weight.
//!
//! All parameters, the semantic table included, live in one flat vector so
//! the optimizer and the finite-difference checks can treat them uniformly.
//! Max-pool gradients go to the first row attaining the maximum.

use std::f64::consts::PI;
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DMatrixView, DVector, DVectorView};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{build_dkpm, DkpmMatrix, FrameContext, SemanticTable, NUM_CLASSES, ROW_WIDTH};
use crate::error::{Error, Result};
use crate::gm::{GaussMix2, Mat2, Vec2};

pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 1e4;
pub const RHO_SCALE: f64 = 0.99;

const MODEL_FORMAT: &str = "gmloc-kse-params";
const MODEL_VERSION: u32 = 1;

/// Layer widths, mixture size and input length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KseArch {
    pub k: usize,
    pub len: usize,
    pub row_hidden: usize,
    pub row_out: usize,
    pub head_hidden: usize,
}

impl KseArch {
    pub fn new(k: usize, len: usize) -> Self {
        Self { k, len, row_hidden: 64, row_out: 128, head_hidden: 64 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.len == 0 || self.row_hidden == 0 || self.row_out == 0 || self.head_hidden == 0 {
            return Err(Error::InvalidArgument(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let (h1, h2, h3, out) = (self.row_hidden, self.row_out, self.head_hidden, 4 * self.k);
        Layout {
            table: take(NUM_CLASSES),
            w1: take(ROW_WIDTH * h1),
            b1: take(h1),
            w2: take(h1 * h2),
            b2: take(h2),
            w3: take(h2 * h3),
            b3: take(h3),
            w4: take(h3 * out),
            b4: take(out),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().b4.end
    }
}

/// Offsets of each tensor in the flat parameter vector. Weight matrices are
/// stored column-major as `fan_in x fan_out`.
#[derive(Debug, Clone)]
struct Layout {
    table: Range<usize>,
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    w3: Range<usize>,
    b3: Range<usize>,
    w4: Range<usize>,
    b4: Range<usize>,
}

impl Layout {
    fn weights(&self) -> [Range<usize>; 4] {
        [self.w1.clone(), self.w2.clone(), self.w3.clone(), self.w4.clone()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KseParams {
    arch: KseArch,
    theta: Vec<f64>,
}

impl KseParams {
    /// He-normal weights, zero biases, last layer scaled by 0.1 so the
    /// initial mixture is close to equal-weight unit Gaussians.
    pub fn init(arch: KseArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let l = arch.layout();
        let mut theta = vec![0.0; l.b4.end];
        theta[l.table.clone()].copy_from_slice(&SemanticTable::init(seed ^ 0x5e5e).values);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fans = [
            (l.w1.clone(), ROW_WIDTH, 1.0),
            (l.w2.clone(), arch.row_hidden, 1.0),
            (l.w3.clone(), arch.row_out, 1.0),
            (l.w4.clone(), arch.head_hidden, 0.1),
        ];
        for (range, fan_in, gain) in fans {
            let normal = Normal::new(0.0, gain * (2.0 / fan_in as f64).sqrt()).expect("finite std");
            for v in &mut theta[range] {
                *v = normal.sample(&mut rng);
            }
        }
        Ok(Self { arch, theta })
    }

    pub fn from_theta(arch: KseArch, theta: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if theta.len() != arch.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for an architecture needing {}",
                theta.len(),
                arch.param_count()
            )));
        }
        Ok(Self { arch, theta })
    }

    pub fn arch(&self) -> &KseArch {
        &self.arch
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn semantic_table(&self) -> SemanticTable {
        let mut values = [0.0; NUM_CLASSES];
        values.copy_from_slice(&self.theta[self.arch.layout().table]);
        SemanticTable { values }
    }

    /// Mask selecting network weights (not biases, not the table).
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.theta.len()];
        for r in self.arch.layout().weights() {
            mask[r].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    /// Squared L2 norm of the network weights.
    pub fn weight_norm_sq(&self) -> f64 {
        self.arch
            .layout()
            .weights()
            .into_iter()
            .map(|r| self.theta[r].iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            arch: self.arch,
            param_count: self.theta.len(),
            theta: self.theta.clone(),
        };
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: ModelFile = serde_json::from_slice(&std::fs::read(path)?)?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::ShapeMismatch(format!(
                "unsupported model file {} v{}",
                file.format, file.version
            )));
        }
        if file.param_count != file.theta.len() {
            return Err(Error::ShapeMismatch("parameter count header disagrees with payload".into()));
        }
        Self::from_theta(file.arch, file.theta)
    }

    /// Loads and refuses a model whose mixture size or input length differ.
    pub fn load_expecting(path: &Path, k: usize, len: usize) -> Result<Self> {
        let p = Self::load(path)?;
        if p.arch.k != k || p.arch.len != len {
            return Err(Error::ShapeMismatch(format!(
                "model has K={} Len={}, expected K={k} Len={len}",
                p.arch.k, p.arch.len
            )));
        }
        Ok(p)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    arch: KseArch,
    param_count: usize,
    theta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GmmComponent {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub rho: f64,
    pub weight: f64,
}

impl GmmComponent {
    pub fn cov(&self) -> Mat2 {
        let c = self.rho * self.sigma_x * self.sigma_y;
        Mat2::new(self.sigma_x * self.sigma_x, c, c, self.sigma_y * self.sigma_y)
    }

    fn log_density(&self, e: &Vec2) -> f64 {
        let (u, v) = (e.x / self.sigma_x, e.y / self.sigma_y);
        let c = 1.0 - self.rho * self.rho;
        let q = u * u - 2.0 * self.rho * u * v + v * v;
        -(2.0 * PI).ln() - self.sigma_x.ln() - self.sigma_y.ln() - 0.5 * c.ln() - q / (2.0 * c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GmmHeadOutput {
    pub components: Vec<GmmComponent>,
}

impl GmmHeadOutput {
    /// Mixture with every component centred on `mean`.
    pub fn to_mixture(&self, mean: Vec2) -> Result<GaussMix2> {
        let covs: Vec<(f64, Mat2)> = self.components.iter().map(|c| (c.weight, c.cov())).collect();
        GaussMix2::common_mean(mean, &covs)
    }

    /// Log density of a car-frame error.
    pub fn log_likelihood(&self, err: &Vec2) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + c.log_density(err))
            .collect();
        crate::gm::log_sum_exp(&terms)
    }
}

struct Forward {
    x: DMatrix<f64>,
    z1: DMatrix<f64>,
    h1: DMatrix<f64>,
    z2: DMatrix<f64>,
    winners: Vec<usize>,
    g: DVector<f64>,
    z3: DVector<f64>,
    a: DVector<f64>,
    raw: DVector<f64>,
    out: GmmHeadOutput,
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

fn view<'a>(theta: &'a [f64], r: &Range<usize>, rows: usize, cols: usize) -> DMatrixView<'a, f64> {
    DMatrixView::from_slice(&theta[r.clone()], rows, cols)
}

fn vview<'a>(theta: &'a [f64], r: &Range<usize>) -> DVectorView<'a, f64> {
    DVectorView::from_slice(&theta[r.clone()], r.len())
}

fn add_row_bias(m: &mut DMatrix<f64>, b: &DVectorView<f64>) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col.add_scalar_mut(b[j]);
    }
}

fn run_forward(p: &KseParams, d: &DkpmMatrix) -> Result<Forward> {
    let arch = &p.arch;
    if d.len() != arch.len || d.rows().ncols() != ROW_WIDTH {
        return Err(Error::ShapeMismatch(format!(
            "input is {}x{}, model expects {}x{ROW_WIDTH}",
            d.len(),
            d.rows().ncols(),
            arch.len
        )));
    }
    let l = arch.layout();
    let th = &p.theta;

    // Padding rows are identical, so one representative stands in for all.
    let nv = d.valid_count();
    let nr = if nv < arch.len { nv + 1 } else { nv };
    let x = DMatrix::from_fn(nr, ROW_WIDTH, |i, j| if i < nv { d.rows()[(i, j)] } else { 0.0 });

    let mut z1 = &x * view(th, &l.w1, ROW_WIDTH, arch.row_hidden);
    add_row_bias(&mut z1, &vview(th, &l.b1));
    let h1 = z1.map(relu);
    let mut z2 = &h1 * view(th, &l.w2, arch.row_hidden, arch.row_out);
    add_row_bias(&mut z2, &vview(th, &l.b2));

    let mut winners = Vec::with_capacity(arch.row_out);
    let mut g = DVector::zeros(arch.row_out);
    for (j, col) in z2.column_iter().enumerate() {
        let mut best = 0;
        for i in 1..nr {
            if col[i] > col[best] {
                best = i;
            }
        }
        winners.push(best);
        g[j] = relu(col[best]);
    }

    let z3 = view(th, &l.w3, arch.row_out, arch.head_hidden).tr_mul(&g) + vview(th, &l.b3);
    let a = z3.map(relu);
    let raw = view(th, &l.w4, arch.head_hidden, 4 * arch.k).tr_mul(&a) + vview(th, &l.b4);
    if !raw.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("non-finite network activation".into()));
    }
    let out = head_output(&raw, arch.k);
    Ok(Forward { x, z1, h1, z2, winners, g, z3, a, raw, out })
}

fn head_output(raw: &DVector<f64>, k: usize) -> GmmHeadOutput {
    let (lo, hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    let logits: Vec<f64> = (0..k).map(|c| raw[4 * c + 3]).collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let components = (0..k)
        .map(|c| GmmComponent {
            sigma_x: raw[4 * c].clamp(lo, hi).exp(),
            sigma_y: raw[4 * c + 1].clamp(lo, hi).exp(),
            rho: RHO_SCALE * raw[4 * c + 2].tanh(),
            weight: exps[c] / total,
        })
        .collect();
    GmmHeadOutput { components }
}

pub fn forward(p: &KseParams, d: &DkpmMatrix) -> Result<GmmHeadOutput> {
    Ok(run_forward(p, d)?.out)
}

/// Negative log-likelihood of a car-frame error plus `lambda * |W|^2`.
pub fn loss(p: &KseParams, d: &DkpmMatrix, err: &Vec2, lambda: f64) -> Result<f64> {
    let out = forward(p, d)?;
    Ok(-out.log_likelihood(err) + lambda * p.weight_norm_sq())
}

/// Gradient of [`loss`] with respect to every parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Gradient with respect to the input rows (valid rows plus the padding
    /// representative), mainly for inspection.
    pub input_grad: DMatrix<f64>,
}

/// Adds the data term's gradient into `acc` (scaled by `scale`) and returns
/// the unscaled data NLL. No regularizer.
pub fn accumulate_nll_grad(p: &KseParams, d: &DkpmMatrix, err: &Vec2, scale: f64, acc: &mut [f64]) -> Result<(f64, DMatrix<f64>)> {
    let arch = p.arch;
    let l = arch.layout();
    let th = &p.theta;
    let f = run_forward(p, d)?;
    let k = arch.k;

    // responsibilities
    let terms: Vec<f64> = f
        .out
        .components
        .iter()
        .map(|c| c.weight.ln() + c.log_density(err))
        .collect();
    let lse = crate::gm::log_sum_exp(&terms);
    if !lse.is_finite() {
        return Err(Error::Numerical("mixture likelihood underflow".into()));
    }
    let (lo, hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    let mut d_raw = DVector::zeros(4 * k);
    for (c, comp) in f.out.components.iter().enumerate() {
        let gamma = (terms[c] - lse).exp();
        let (u, v) = (err.x / comp.sigma_x, err.y / comp.sigma_y);
        let r = comp.rho;
        let cc = 1.0 - r * r;
        let q = u * u - 2.0 * r * u * v + v * v;
        let dl_dsx = -1.0 + (u * u - r * u * v) / cc;
        let dl_dsy = -1.0 + (v * v - r * u * v) / cc;
        let dl_dr = r / cc + u * v / cc - r * q / (cc * cc);
        let inside = |z: f64| if z > lo && z < hi { 1.0 } else { 0.0 };
        let t = f.raw[4 * c + 2].tanh();
        d_raw[4 * c] = -gamma * dl_dsx * inside(f.raw[4 * c]);
        d_raw[4 * c + 1] = -gamma * dl_dsy * inside(f.raw[4 * c + 1]);
        d_raw[4 * c + 2] = -gamma * dl_dr * RHO_SCALE * (1.0 - t * t);
        d_raw[4 * c + 3] = comp.weight - gamma;
    }
    d_raw *= scale;

    // head
    let w4 = view(th, &l.w4, arch.head_hidden, 4 * k);
    add_outer(&mut acc[l.w4.clone()], &f.a, &d_raw);
    add_vec(&mut acc[l.b4.clone()], &d_raw);
    let mut d_z3 = w4 * &d_raw;
    for (dz, z) in d_z3.iter_mut().zip(f.z3.iter()) {
        if *z <= 0.0 {
            *dz = 0.0;
        }
    }
    let w3 = view(th, &l.w3, arch.row_out, arch.head_hidden);
    add_outer(&mut acc[l.w3.clone()], &f.g, &d_z3);
    add_vec(&mut acc[l.b3.clone()], &d_z3);
    let d_g = w3 * &d_z3;

    // max-pool routes each channel's gradient to its winning row
    let nr = f.x.nrows();
    let w2 = view(th, &l.w2, arch.row_hidden, arch.row_out);
    let mut d_h1 = DMatrix::<f64>::zeros(nr, arch.row_hidden);
    let mut touched = vec![false; nr];
    {
        let (head, tail) = acc.split_at_mut(l.b2.start);
        let gw2 = &mut head[l.w2.clone()];
        for (j, &i) in f.winners.iter().enumerate() {
            if f.z2[(i, j)] <= 0.0 || d_g[j] == 0.0 {
                continue;
            }
            let dz = d_g[j];
            touched[i] = true;
            let col = &mut gw2[j * arch.row_hidden..(j + 1) * arch.row_hidden];
            for (h, gw) in col.iter_mut().enumerate() {
                *gw += f.h1[(i, h)] * dz;
                d_h1[(i, h)] += w2[(h, j)] * dz;
            }
            tail[j] += dz;
        }
    }

    let w1 = view(th, &l.w1, ROW_WIDTH, arch.row_hidden);
    let mut d_x = DMatrix::<f64>::zeros(nr, ROW_WIDTH);
    for i in (0..nr).filter(|&i| touched[i]) {
        for h in 0..arch.row_hidden {
            let dz1 = if f.z1[(i, h)] > 0.0 { d_h1[(i, h)] } else { 0.0 };
            if dz1 == 0.0 {
                continue;
            }
            acc[l.b1.start + h] += dz1;
            for c in 0..ROW_WIDTH {
                acc[l.w1.start + h * ROW_WIDTH + c] += f.x[(i, c)] * dz1;
                d_x[(i, c)] += w1[(c, h)] * dz1;
            }
        }
    }

    // semantic columns feed back into the table by class id
    for (i, (cq, cr)) in d.classes().iter().enumerate().take(nr) {
        acc[l.table.start + *cq as usize] += d_x[(i, 5)];
        acc[l.table.start + *cr as usize] += d_x[(i, 6)];
    }
    Ok((-lse, d_x))
}

/// `acc[col-major fan_in x fan_out] += outer(input, delta)`.
fn add_outer(acc: &mut [f64], input: &DVector<f64>, delta: &DVector<f64>) {
    let n = input.len();
    for (j, dj) in delta.iter().enumerate() {
        if *dj == 0.0 {
            continue;
        }
        for (i, xi) in input.iter().enumerate() {
            acc[j * n + i] += xi * dj;
        }
    }
}

fn add_vec(acc: &mut [f64], v: &DVector<f64>) {
    for (a, b) in acc.iter_mut().zip(v.iter()) {
        *a += b;
    }
}

/// Adds `scale * d(lambda |W|^2)/dW` into `acc`.
pub fn accumulate_reg_grad(p: &KseParams, lambda: f64, scale: f64, acc: &mut [f64]) {
    for r in p.arch.layout().weights() {
        for (g, w) in acc[r.clone()].iter_mut().zip(&p.theta[r]) {
            *g += scale * 2.0 * lambda * w;
        }
    }
}

pub fn grad(p: &KseParams, d: &DkpmMatrix, err: &Vec2, lambda: f64) -> Result<LossGrad> {
    let mut g = vec![0.0; p.theta.len()];
    let (nll, input_grad) = accumulate_nll_grad(p, d, err, 1.0, &mut g)?;
    accumulate_reg_grad(p, lambda, 1.0, &mut g);
    Ok(LossGrad { loss: nll + lambda * p.weight_norm_sq(), grad: g, input_grad })
}

/// Measurement mixture centred on the frame's measured location, car frame.
pub fn predict_measurement(p: &KseParams, fc: &FrameContext) -> Result<GaussMix2> {
    let d = build_dkpm(fc, &p.semantic_table(), p.arch.len)?;
    forward(p, &d)?.to_mixture(fc.r_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kse::tests::frame;
    use crate::kse::KeypointMatch;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn small_arch(k: usize, len: usize) -> KseArch {
        KseArch { k, len, row_hidden: 8, row_out: 12, head_hidden: 6 }
    }

    fn random_frame(rng: &mut ChaCha8Rng, n: usize) -> FrameContext {
        let mut fc = frame(&[]);
        fc.matches = (0..n)
            .map(|_| KeypointMatch {
                xq: rng.random_range(0.0..1919.0),
                yq: rng.random_range(0.0..1207.0),
                xr: rng.random_range(0.0..1919.0),
                yr: rng.random_range(0.0..1207.0),
                ms: rng.random_range(0.0..1.0),
                class_q: rng.random_range(0..19),
                class_r: rng.random_range(0..19),
            })
            .collect();
        fc
    }

    /// Parameters where the head emits a single unit-variance component.
    fn unit_gaussian_params(len: usize) -> KseParams {
        let arch = small_arch(1, len);
        KseParams::from_theta(arch, vec![0.0; arch.param_count()]).unwrap()
    }

    #[test]
    fn closed_form_losses() {
        let p = unit_gaussian_params(4);
        let d = build_dkpm(&frame(&[0.5, 0.2]), &p.semantic_table(), 4).unwrap();
        let l0 = loss(&p, &d, &Vec2::zeros(), 0.0).unwrap();
        assert_abs_diff_eq!(l0, (2.0 * PI).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l0, 1.8379, epsilon = 1e-4);
        let l1 = loss(&p, &d, &Vec2::new(1.0, 0.0), 0.0).unwrap();
        assert_abs_diff_eq!(l1, 0.5 + (2.0 * PI).ln(), epsilon = 1e-12);
    }

    #[test]
    fn regularizer_is_additive() {
        let p = KseParams::init(small_arch(3, 16), 3).unwrap();
        let d = build_dkpm(&frame(&[0.5, 0.2, 0.9]), &p.semantic_table(), 16).unwrap();
        let e = Vec2::new(0.3, -1.2);
        let base = loss(&p, &d, &e, 0.0).unwrap();
        let reg = loss(&p, &d, &e, 5e-4).unwrap();
        assert_abs_diff_eq!(reg - base, 5e-4 * p.weight_norm_sq(), epsilon = 1e-12);
        // biases and table are excluded
        let mut q = p.clone();
        let l = q.arch.layout();
        q.theta_mut()[l.b1.start] += 3.0;
        q.theta_mut()[l.table.start] += 3.0;
        assert_eq!(q.weight_norm_sq(), p.weight_norm_sq());
    }

    #[test]
    fn output_invariants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..20 {
            let p = KseParams::init(small_arch(3, 32), seed).unwrap();
            let n = rng.random_range(0..40);
            let d = build_dkpm(&random_frame(&mut rng, n), &p.semantic_table(), 32).unwrap();
            let out = forward(&p, &d).unwrap();
            let total: f64 = out.components.iter().map(|c| c.weight).sum();
            assert_abs_diff_eq!(total, 1.0, epsilon = 1e-9);
            for c in &out.components {
                assert!(c.sigma_x > 0.0 && c.sigma_y > 0.0 && c.rho.abs() < 1.0);
                assert!(c.weight > 0.0 && c.weight < 1.0);
            }
        }
    }

    #[test]
    fn all_zero_input_is_valid() {
        let p = KseParams::init(KseArch::new(3, 8), 2).unwrap();
        let d = build_dkpm(&frame(&[]), &p.semantic_table(), 8).unwrap();
        assert_eq!(d.valid_count(), 0);
        let out = forward(&p, &d).unwrap();
        assert!(out.to_mixture(Vec2::zeros()).is_ok());
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = KseParams::init(small_arch(2, 64), 5).unwrap();
        let fc = random_frame(&mut rng, 40);
        let mut shuffled = fc.clone();
        shuffled.matches.reverse();
        shuffled.matches.swap(3, 17);
        let a = predict_measurement(&p, &fc).unwrap();
        let b = predict_measurement(&p, &shuffled).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_wrong_input_length() {
        let p = KseParams::init(small_arch(2, 16), 5).unwrap();
        let d = build_dkpm(&frame(&[0.5]), &p.semantic_table(), 8).unwrap();
        assert!(matches!(forward(&p, &d), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn semantic_entry_only_affects_frames_with_that_class() {
        let p = KseParams::init(small_arch(2, 16), 9).unwrap();
        let mut fc = frame(&[0.4, 0.7]);
        for m in &mut fc.matches {
            m.class_q = 2;
            m.class_r = 8;
        }
        let before = predict_measurement(&p, &fc).unwrap();
        let mut q = p.clone();
        let start = q.arch.layout().table.start;
        q.theta_mut()[start + 13] += 0.5;
        assert_eq!(predict_measurement(&q, &fc).unwrap(), before);
        q.theta_mut()[start + 8] += 0.5;
        assert_ne!(predict_measurement(&q, &fc).unwrap(), before);
    }

    #[test]
    fn non_winning_rows_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let p = KseParams::init(small_arch(2, 64), 4).unwrap();
        let d = build_dkpm(&random_frame(&mut rng, 50), &p.semantic_table(), 64).unwrap();
        let f = run_forward(&p, &d).unwrap();
        let g = grad(&p, &d, &Vec2::new(0.5, -0.2), 0.0).unwrap();
        let mut losers = 0;
        for i in 0..g.input_grad.nrows() {
            if !f.winners.contains(&i) {
                losers += 1;
                assert!(g.input_grad.row(i).iter().all(|v| *v == 0.0));
            }
        }
        assert!(losers > 0);
    }

    #[test]
    fn gradient_matches_finite_differences_small_net() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for seed in 0..5 {
            let mut p = KseParams::init(small_arch(3, 24), seed).unwrap();
            // zero biases put the padding row exactly on a ReLU kink
            for t in p.theta_mut() {
                *t += rng.random_range(-0.05..0.05);
            }
            let fc = random_frame(&mut rng, 15);
            let err = Vec2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            let g = grad(&p, &build_dkpm(&fc, &p.semantic_table(), 24).unwrap(), &err, 5e-4).unwrap();
            for i in 0..p.theta().len() {
                let h = 1e-5 * p.theta()[i].abs().max(1.0);
                let eval = |delta: f64| {
                    let mut q = p.clone();
                    q.theta_mut()[i] += delta;
                    let d = build_dkpm(&fc, &q.semantic_table(), 24).unwrap();
                    loss(&q, &d, &err, 5e-4).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let denom = g.grad[i].abs().max(fd.abs()).max(1e-6);
                assert!((g.grad[i] - fd).abs() / denom < 1e-4, "coord {i}: {} vs {fd}", g.grad[i]);
            }
        }
    }

    #[test]
    fn save_load_preserves_outputs_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let p = KseParams::init(KseArch::new(3, 32), 21).unwrap();
        p.save(&path).unwrap();
        let q = KseParams::load_expecting(&path, 3, 32).unwrap();
        assert_eq!(p, q);
        let fc = frame(&[0.1, 0.8, 0.4]);
        assert_eq!(predict_measurement(&p, &fc).unwrap(), predict_measurement(&q, &fc).unwrap());
        assert!(matches!(KseParams::load_expecting(&path, 1, 32), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn predict_measurement_structure() {
        let p = KseParams::init(KseArch::new(3, 16), 2).unwrap();
        let fc = frame(&[0.5, 0.6]);
        let gm = predict_measurement(&p, &fc).unwrap();
        assert!(gm.components().iter().all(|(_, g)| g.mean() == fc.r_hat));
        let out = forward(&p, &build_dkpm(&fc, &p.semantic_table(), 16).unwrap()).unwrap();
        let expect = out.components.iter().fold(Mat2::zeros(), |a, c| a + c.cov() * c.weight);
        assert_abs_diff_eq!(gm.condense().cov(), expect, epsilon = 1e-12);

        let p1 = KseParams::init(KseArch::new(1, 16), 2).unwrap();
        let gm = predict_measurement(&p1, &fc).unwrap();
        assert_eq!(gm.len(), 1);
    }
}
