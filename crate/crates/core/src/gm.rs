//! Planar Gaussian-mixture algebra.
//!
//! Mixtures here describe 2D position errors: a measurement is a weighted set
//! of bivariate Gaussians, usually sharing one mean (the measured location)
//! and differing only in covariance. Besides density evaluation and sampling
//! the module provides the three reductions the filters and gates rely on:
//!
//! - [`GaussMix2::condense`]: moment-matched single Gaussian,
//! - [`GaussMix2::marginalize`]: projection onto a unit direction, giving a
//!   1D mixture,
//! - [`GaussMix1::tail_threshold`] / [`GaussMix1::two_sided_percentile`]:
//!   numeric quantiles of that 1D mixture from closed-form component tails.
//!
//! Headings are counterclockwise-positive from the inertial +x axis, and
//! [`rotation`] maps car-frame vectors into the inertial frame.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

/// Smallest admissible covariance eigenvalue.
pub const EIGEN_FLOOR: f64 = 1e-12;
/// Largest admissible covariance condition number for density evaluation.
pub const MAX_CONDITION: f64 = 1e12;
/// Tolerance on the weight sum of a constructed mixture.
pub const WEIGHT_TOL: f64 = 1e-9;
/// Weight-sum deviation that is silently renormalized when loading.
pub const LOAD_WEIGHT_TOL: f64 = 1e-6;

/// Counterclockwise rotation by `heading` radians.
pub fn rotation(heading: f64) -> Mat2 {
    let (s, c) = heading.sin_cos();
    Mat2::new(c, -s, s, c)
}

/// Eigenvalues of a symmetric 2x2 matrix, ascending.
pub fn sym_eigenvalues(m: &Mat2) -> (f64, f64) {
    let half_trace = 0.5 * (m[(0, 0)] + m[(1, 1)]);
    let half_diff = 0.5 * (m[(0, 0)] - m[(1, 1)]);
    let off = 0.5 * (m[(0, 1)] + m[(1, 0)]);
    let r = half_diff.hypot(off);
    (half_trace - r, half_trace + r)
}

pub fn symmetrize(m: &Mat2) -> Mat2 {
    (m + m.transpose()) * 0.5
}

/// Upper-tail probability of the standard normal.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * erfc(x / SQRT_2)
}

pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// Bivariate Gaussian with a symmetric positive-definite covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2 {
    mean: Vec2,
    cov: Mat2,
}

impl Gaussian2 {
    /// Symmetrizes `cov` and rejects non-finite entries or eigenvalues below
    /// [`EIGEN_FLOOR`].
    pub fn new(mean: Vec2, cov: Mat2) -> Result<Self> {
        if !mean.iter().all(|v| v.is_finite()) || !cov.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCovariance("non-finite entry".into()));
        }
        let cov = symmetrize(&cov);
        let (lo, _) = sym_eigenvalues(&cov);
        if lo < EIGEN_FLOOR {
            return Err(Error::InvalidCovariance(format!(
                "smallest eigenvalue {lo:e} below {EIGEN_FLOOR:e}"
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn isotropic(mean: Vec2, sigma: f64) -> Result<Self> {
        Self::new(mean, Mat2::identity() * (sigma * sigma))
    }

    pub fn mean(&self) -> Vec2 {
        self.mean
    }

    pub fn cov(&self) -> Mat2 {
        self.cov
    }

    pub fn condition_number(&self) -> f64 {
        let (lo, hi) = sym_eigenvalues(&self.cov);
        hi / lo
    }

    fn inverse(&self) -> Result<(Mat2, f64)> {
        if self.condition_number() > MAX_CONDITION {
            return Err(Error::Singular(format!(
                "covariance condition number {:e} exceeds {MAX_CONDITION:e}",
                self.condition_number()
            )));
        }
        let det = self.cov.determinant();
        let inv = self
            .cov
            .try_inverse()
            .ok_or_else(|| Error::Singular("covariance not invertible".into()))?;
        Ok((inv, det))
    }

    /// Squared Mahalanobis distance of `x` from the mean.
    pub fn mahalanobis_sq(&self, x: &Vec2) -> Result<f64> {
        let (inv, _) = self.inverse()?;
        let d = x - self.mean;
        Ok(d.dot(&(inv * d)))
    }

    pub fn log_pdf(&self, x: &Vec2) -> Result<f64> {
        let (inv, det) = self.inverse()?;
        let d = x - self.mean;
        Ok(-(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * d.dot(&(inv * d)))
    }

    pub fn pdf(&self, x: &Vec2) -> Result<f64> {
        Ok(self.log_pdf(x)?.exp())
    }

    /// Lower Cholesky factor of the covariance.
    pub fn cholesky(&self) -> Result<Mat2> {
        let a = self.cov[(0, 0)];
        let b = self.cov[(1, 0)];
        let c = self.cov[(1, 1)];
        if a <= 0.0 {
            return Err(Error::Numerical("cholesky: non-positive pivot".into()));
        }
        let l11 = a.sqrt();
        let l21 = b / l11;
        let rest = c - l21 * l21;
        if rest <= 0.0 {
            return Err(Error::Numerical("cholesky: non-positive pivot".into()));
        }
        Ok(Mat2::new(l11, 0.0, l21, rest.sqrt()))
    }

    /// Covariance rotated by `heading`; the mean is rotated about `anchor`.
    pub fn rotated_about(&self, heading: f64, anchor: &Vec2) -> Self {
        let c = rotation(heading);
        Self {
            mean: anchor + c * (self.mean - anchor),
            cov: symmetrize(&(c * self.cov * c.transpose())),
        }
    }

    pub fn translated(&self, offset: &Vec2) -> Self {
        Self { mean: self.mean + offset, cov: self.cov }
    }

    fn draw<R: Rng + ?Sized>(&self, chol: &Mat2, rng: &mut R) -> Vec2 {
        let z = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        self.mean + chol * z
    }
}

/// Unit vector in the plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction(Vec2);

impl Direction {
    pub fn new(d: Vec2) -> Result<Self> {
        let n = d.norm();
        if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("direction norm {n} is not 1")));
        }
        Ok(Self(d))
    }

    /// Normalizes `v`; fails when it is shorter than 1e-12.
    pub fn from_vector(v: &Vec2) -> Result<Self> {
        let n = v.norm();
        if !(n >= 1e-12) || !n.is_finite() {
            return Err(Error::InvalidArgument("direction of a zero vector".into()));
        }
        Ok(Self(v / n))
    }

    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self(Vec2::new(c, s))
    }

    pub fn vector(&self) -> Vec2 {
        self.0
    }
}

/// Weighted mixture of [`Gaussian2`] components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureWire", into = "MixtureWire")]
pub struct GaussMix2 {
    components: Vec<(f64, Gaussian2)>,
}

impl GaussMix2 {
    pub fn new(components: Vec<(f64, Gaussian2)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidMixture("no components".into()));
        }
        if components.iter().any(|(w, _)| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidMixture("negative or non-finite weight".into()));
        }
        let total: f64 = components.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidMixture(format!("weights sum to {total}")));
        }
        Ok(Self { components })
    }

    /// Rescales weights to sum to one when they are off by at most `tol`.
    /// Weights already within [`WEIGHT_TOL`] are kept bit-for-bit.
    pub fn renormalized(mut components: Vec<(f64, Gaussian2)>, tol: f64) -> Result<Self> {
        let total: f64 = components.iter().map(|(w, _)| w).sum();
        if !((total - 1.0).abs() <= tol) {
            return Err(Error::InvalidMixture(format!("weights sum to {total}")));
        }
        if (total - 1.0).abs() <= WEIGHT_TOL {
            return Self::new(components);
        }
        for (w, _) in &mut components {
            *w /= total;
        }
        Self::new(components)
    }

    pub fn single(g: Gaussian2) -> Self {
        Self { components: vec![(1.0, g)] }
    }

    /// Mixture sharing one mean, as produced by the learned error model.
    pub fn common_mean(mean: Vec2, weighted_covs: &[(f64, Mat2)]) -> Result<Self> {
        let components = weighted_covs
            .iter()
            .map(|(w, cov)| Ok((*w, Gaussian2::new(mean, *cov)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::new(components)
    }

    pub fn components(&self) -> &[(f64, Gaussian2)] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn mean(&self) -> Vec2 {
        self.components.iter().fold(Vec2::zeros(), |acc, (w, g)| acc + g.mean * *w)
    }

    pub fn pdf(&self, x: &Vec2) -> Result<f64> {
        self.components
            .iter()
            .map(|(w, g)| Ok(w * g.pdf(x)?))
            .sum()
    }

    /// Log density with log-sum-exp over components.
    pub fn log_pdf(&self, x: &Vec2) -> Result<f64> {
        let terms = self
            .components
            .iter()
            .filter(|(w, _)| *w > 0.0)
            .map(|(w, g)| Ok(w.ln() + g.log_pdf(x)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(log_sum_exp(&terms))
    }

    /// Single Gaussian with the mixture's mean and covariance.
    pub fn condense(&self) -> Gaussian2 {
        let mean = self.mean();
        let cov = self.components.iter().fold(Mat2::zeros(), |acc, (w, g)| {
            let d = g.mean - mean;
            acc + (g.cov + d * d.transpose()) * *w
        });
        // Each term is PD and the weights sum to one, so the result is too.
        Gaussian2 { mean, cov: symmetrize(&cov) }
    }

    /// Projects every component onto `d`, measuring offsets from `center`.
    pub fn marginalize(&self, d: &Direction, center: &Vec2) -> Result<GaussMix1> {
        let dv = d.vector();
        let components = self
            .components
            .iter()
            .map(|(w, g)| {
                let var = dv.dot(&(g.cov * dv));
                if !(var > 0.0) {
                    return Err(Error::InvalidCovariance(format!(
                        "projected variance {var:e} is not positive"
                    )));
                }
                Ok(Comp1 { weight: *w, mean: dv.dot(&(g.mean - center)), var })
            })
            .collect::<Result<Vec<_>>>()?;
        GaussMix1::new(components)
    }

    /// Rotates covariances by `heading` and means about the mixture mean.
    pub fn rotate_to_inertial(&self, heading: f64) -> GaussMix2 {
        self.rotate_about(heading, &self.mean())
    }

    pub fn rotate_about(&self, heading: f64, anchor: &Vec2) -> GaussMix2 {
        GaussMix2 {
            components: self
                .components
                .iter()
                .map(|(w, g)| (*w, g.rotated_about(heading, anchor)))
                .collect(),
        }
    }

    pub fn translated(&self, offset: &Vec2) -> GaussMix2 {
        GaussMix2 {
            components: self.components.iter().map(|(w, g)| (*w, g.translated(offset))).collect(),
        }
    }

    /// `n` i.i.d. draws from a ChaCha8 stream seeded with `seed`.
    pub fn sample(&self, seed: u64, n: usize) -> Result<Vec<Vec2>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(&mut rng, n)
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<Vec2>> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample count must be at least 1".into()));
        }
        let chols = self
            .components
            .iter()
            .map(|(_, g)| g.cholesky())
            .collect::<Result<Vec<_>>>()?;
        Ok((0..n)
            .map(|_| {
                let k = self.pick_component(rng.random::<f64>());
                self.components[k].1.draw(&chols[k], rng)
            })
            .collect())
    }

    fn pick_component(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (k, (w, _)) in self.components.iter().enumerate() {
            acc += w;
            if u < acc {
                return k;
            }
        }
        // u landed in the rounding gap at the top; take the last weighted component
        self.components.iter().rposition(|(w, _)| *w > 0.0).unwrap_or(0)
    }
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

#[derive(Serialize, Deserialize)]
struct ComponentWire {
    w: f64,
    mean: [f64; 2],
    cov: [[f64; 2]; 2],
}

#[derive(Serialize, Deserialize)]
struct MixtureWire {
    components: Vec<ComponentWire>,
}

impl TryFrom<MixtureWire> for GaussMix2 {
    type Error = Error;

    fn try_from(wire: MixtureWire) -> Result<Self> {
        let components = wire
            .components
            .into_iter()
            .map(|c| {
                let cov = Mat2::new(c.cov[0][0], c.cov[0][1], c.cov[1][0], c.cov[1][1]);
                Ok((c.w, Gaussian2::new(Vec2::new(c.mean[0], c.mean[1]), cov)?))
            })
            .collect::<Result<Vec<_>>>()?;
        if components.is_empty() {
            return Err(Error::InvalidMixture("no components".into()));
        }
        GaussMix2::renormalized(components, LOAD_WEIGHT_TOL)
    }
}

impl From<GaussMix2> for MixtureWire {
    fn from(gm: GaussMix2) -> Self {
        MixtureWire {
            components: gm
                .components
                .iter()
                .map(|(w, g)| ComponentWire {
                    w: *w,
                    mean: [g.mean.x, g.mean.y],
                    cov: [[g.cov[(0, 0)], g.cov[(0, 1)]], [g.cov[(1, 0)], g.cov[(1, 1)]]],
                })
                .collect(),
        }
    }
}

/// One component of a [`GaussMix1`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Comp1 {
    pub weight: f64,
    pub mean: f64,
    pub var: f64,
}

/// Weighted mixture of univariate Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussMix1 {
    components: Vec<Comp1>,
}

impl GaussMix1 {
    pub fn new(components: Vec<Comp1>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidMixture("no components".into()));
        }
        for c in &components {
            if !(c.var > 0.0) || !c.var.is_finite() || !c.mean.is_finite() {
                return Err(Error::InvalidMixture(format!("bad component {c:?}")));
            }
            if !(c.weight >= 0.0) || !c.weight.is_finite() {
                return Err(Error::InvalidMixture("negative or non-finite weight".into()));
            }
        }
        let total: f64 = components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(Error::InvalidMixture(format!("weights sum to {total}")));
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[Comp1] {
        &self.components
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.components
            .iter()
            .map(|c| c.weight * (c.var + (c.mean - m).powi(2)))
            .sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * std_normal_cdf((x - c.mean) / c.var.sqrt()))
            .sum()
    }

    /// Probability mass above `x`.
    pub fn tail_mass(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * std_normal_sf((x - c.mean) / c.var.sqrt()))
            .sum()
    }

    /// The point whose upper-tail mass is `(1 - alpha) / 2`, by bisection.
    pub fn tail_threshold(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!("alpha {alpha} outside (0, 1)")));
        }
        let target = 0.5 * (1.0 - alpha);
        let f = |b: f64| self.tail_mass(b) - target;

        let mut lo = self
            .components
            .iter()
            .map(|c| c.mean - 10.0 * c.var.sqrt())
            .fold(f64::INFINITY, f64::min);
        let mut hi = self
            .components
            .iter()
            .map(|c| c.mean + 10.0 * c.var.sqrt())
            .fold(f64::NEG_INFINITY, f64::max);
        // tail_mass decreases in its argument: need f(lo) >= 0 >= f(hi)
        let mut expansions = 0;
        while f(lo) < 0.0 || f(hi) > 0.0 {
            let width = hi - lo;
            if f(lo) < 0.0 {
                lo -= width;
            }
            if f(hi) > 0.0 {
                hi += width;
            }
            expansions += 1;
            if expansions > 64 {
                return Err(Error::Numerical("tail threshold bracket did not straddle".into()));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if hi - lo <= 1e-10 || mid <= lo || mid >= hi {
                break;
            }
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// `Pr(-e <= X <= e)`.
    pub fn two_sided_percentile(&self, e: f64) -> f64 {
        if !(e > 0.0) {
            return 0.0;
        }
        let p: f64 = self
            .components
            .iter()
            .map(|c| {
                let s = c.var.sqrt();
                // difference of upper tails keeps precision far from the mean
                c.weight * (std_normal_sf((-e - c.mean) / s) - std_normal_sf((e - c.mean) / s))
            })
            .sum();
        p.clamp(0.0, 1.0)
    }
}
