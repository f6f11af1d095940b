//! Sigma-point and Gaussian-sum filtering for the planar unicycle model.
//!
//! State is `[x, y, theta, v, theta_dot]`: inertial position, heading
//! (counterclockwise from +x, wrapped to (-pi, pi]), speed and turn rate.
//! Measurements are positions whose noise is a [`GaussMix2`] expressed in the
//! car frame; the filters rotate it into the inertial frame using the
//! predicted heading before updating.

use std::f64::consts::PI;

use nalgebra::{SMatrix, SVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::gm::{self, GaussMix2, Gaussian2, Mat2, Vec2};

pub type Vec5 = SVector<f64, 5>;
pub type Mat5 = SMatrix<f64, 5, 5>;

const N: usize = 5;
const THETA: usize = 2;
const SIGMA_COUNT: usize = 2 * N + 1;

/// Wraps an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct State5 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub v: f64,
    pub theta_dot: f64,
}

impl State5 {
    pub fn new(x: f64, y: f64, theta: f64, v: f64, theta_dot: f64) -> Self {
        Self { x, y, theta, v, theta_dot }
    }

    pub fn to_vector(&self) -> Vec5 {
        Vec5::new(self.x, self.y, self.theta, self.v, self.theta_dot)
    }

    pub fn from_vector(v: &Vec5) -> Self {
        Self { x: v[0], y: v[1], theta: wrap_angle(v[2]), v: v[3], theta_dot: v[4] }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }
}

/// Constant speed and turn rate, one explicit Euler step.
pub fn motion_model(s: &State5, dt: f64) -> State5 {
    let (sin, cos) = s.theta.sin_cos();
    State5 {
        x: s.x + s.v * cos * dt,
        y: s.y + s.v * sin * dt,
        theta: wrap_angle(s.theta + s.theta_dot * dt),
        v: s.v,
        theta_dot: s.theta_dot,
    }
}

pub fn observe(s: &State5) -> Vec2 {
    s.position()
}

/// Gaussian belief over the 5-state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBelief {
    pub mean: State5,
    pub cov: Mat5,
}

impl StateBelief {
    /// Symmetrizes `cov` and requires finite entries with a positive spectrum.
    pub fn new(mean: State5, cov: Mat5) -> Result<Self> {
        if !mean.to_vector().iter().all(|v| v.is_finite()) || !cov.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidCovariance("non-finite state belief".into()));
        }
        let cov = symmetrize5(&cov);
        let lo = min_eigenvalue(&cov);
        if !(lo > 0.0) {
            return Err(Error::InvalidCovariance(format!("state covariance eigenvalue {lo:e}")));
        }
        Ok(Self { mean, cov })
    }

    /// Position marginal: the predicted-measurement distribution under
    /// [`observe`].
    pub fn position_marginal(&self) -> Result<Gaussian2> {
        Gaussian2::new(self.mean.position(), self.cov.fixed_view::<2, 2>(0, 0).into_owned())
    }
}

pub fn symmetrize5(m: &Mat5) -> Mat5 {
    (m + m.transpose()) * 0.5
}

pub fn min_eigenvalue(m: &Mat5) -> f64 {
    SymmetricEigen::new(*m).eigenvalues.min()
}

/// Weighted bank of Gaussian hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct GsfBelief {
    hypotheses: Vec<(f64, StateBelief)>,
}

impl GsfBelief {
    pub fn new(hypotheses: Vec<(f64, StateBelief)>) -> Result<Self> {
        if hypotheses.is_empty() {
            return Err(Error::InvalidMixture("no hypotheses".into()));
        }
        if hypotheses.iter().any(|(w, _)| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidMixture("negative or non-finite hypothesis weight".into()));
        }
        let total: f64 = hypotheses.iter().map(|(w, _)| w).sum();
        if (total - 1.0).abs() > gm::WEIGHT_TOL {
            return Err(Error::InvalidMixture(format!("hypothesis weights sum to {total}")));
        }
        Ok(Self { hypotheses })
    }

    pub fn single(b: StateBelief) -> Self {
        Self { hypotheses: vec![(1.0, b)] }
    }

    pub fn hypotheses(&self) -> &[(f64, StateBelief)] {
        &self.hypotheses
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    /// Mixture of per-hypothesis predicted measurements.
    pub fn predicted_measurement(&self) -> Result<GaussMix2> {
        let comps = self
            .hypotheses
            .iter()
            .map(|(w, b)| Ok((*w, b.position_marginal()?)))
            .collect::<Result<Vec<_>>>()?;
        GaussMix2::renormalized(comps, gm::WEIGHT_TOL)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionParams {
    pub dt: f64,
    pub q: Mat5,
}

impl MotionParams {
    pub fn new(dt: f64, q: Mat5) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt {dt} must be positive")));
        }
        let q = symmetrize5(&q);
        if min_eigenvalue(&q) < -1e-12 {
            return Err(Error::InvalidCovariance("process noise is not PSD".into()));
        }
        Ok(Self { dt, q })
    }

    /// `diag(1e-4, 1e-4, 1e-5, 0.25, 0.01) * dt`.
    pub fn default_for(dt: f64) -> Result<Self> {
        Self::new(dt, Mat5::from_diagonal(&Vec5::new(1e-4, 1e-4, 1e-5, 0.25, 0.01)) * dt)
    }
}

/// Unscented-transform spread parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UkfParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for UkfParams {
    fn default() -> Self {
        Self { alpha: 0.1, beta: 2.0, kappa: 0.0 }
    }
}

struct UtWeights {
    scale: f64,
    mean: [f64; SIGMA_COUNT],
    cov: [f64; SIGMA_COUNT],
}

impl UkfParams {
    fn weights(&self) -> Result<UtWeights> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!("ukf alpha {} outside (0, 1]", self.alpha)));
        }
        let n = N as f64;
        let lambda = self.alpha * self.alpha * (n + self.kappa) - n;
        let scale = n + lambda;
        let w0 = lambda / scale;
        if !(scale > 0.0) || !w0.is_finite() {
            return Err(Error::InvalidArgument("sigma-point scale must be positive".into()));
        }
        let wi = 0.5 / scale;
        let mut mean = [wi; SIGMA_COUNT];
        let mut cov = [wi; SIGMA_COUNT];
        mean[0] = w0;
        cov[0] = w0 + 1.0 - self.alpha * self.alpha + self.beta;
        Ok(UtWeights { scale, mean, cov })
    }
}

fn floored(cov: &Mat5) -> Mat5 {
    let mut eig = SymmetricEigen::new(symmetrize5(cov));
    for ev in eig.eigenvalues.iter_mut() {
        *ev = ev.max(gm::EIGEN_FLOOR);
    }
    symmetrize5(&eig.recompose())
}

fn sigma_points(mean: &Vec5, cov: &Mat5, w: &UtWeights) -> Result<[Vec5; SIGMA_COUNT]> {
    let chol = match (cov * w.scale).cholesky() {
        Some(c) => c,
        None => (floored(cov) * w.scale)
            .cholesky()
            .ok_or_else(|| Error::Numerical("cholesky failed after symmetrize-and-floor".into()))?,
    };
    let l = chol.l();
    let mut pts = [*mean; SIGMA_COUNT];
    for i in 0..N {
        let col = l.column(i);
        pts[1 + i] = mean + col;
        pts[1 + N + i] = mean - col;
    }
    Ok(pts)
}

/// Weighted state mean. Headings are averaged as wrapped offsets from the
/// first point, which keeps the mean linear in the residuals even with the
/// negative central weight of a small-spread transform.
fn state_mean(pts: &[Vec5], weights: &[f64]) -> Vec5 {
    let reference = pts[0][THETA];
    let mut m = Vec5::zeros();
    let mut offset = 0.0;
    for (p, w) in pts.iter().zip(weights) {
        m += p * *w;
        offset += w * wrap_angle(p[THETA] - reference);
    }
    m[THETA] = wrap_angle(reference + offset);
    m
}

fn state_residual(a: &Vec5, b: &Vec5) -> Vec5 {
    let mut d = a - b;
    d[THETA] = wrap_angle(d[THETA]);
    d
}

pub fn ukf_predict(b: &StateBelief, mp: &MotionParams, up: &UkfParams) -> Result<StateBelief> {
    let w = up.weights()?;
    let pts = sigma_points(&b.mean.to_vector(), &b.cov, &w)?;
    let prop: Vec<Vec5> = pts
        .iter()
        .map(|p| motion_model(&State5::from_vector(p), mp.dt).to_vector())
        .collect();
    let mean = state_mean(&prop, &w.mean);
    let mut cov = mp.q;
    for (p, wc) in prop.iter().zip(&w.cov) {
        let d = state_residual(p, &mean);
        cov += d * d.transpose() * *wc;
    }
    Ok(StateBelief { mean: State5::from_vector(&mean), cov: symmetrize5(&cov) })
}

/// Result of one unscented measurement update.
#[derive(Debug, Clone, PartialEq)]
pub struct UkfUpdate {
    pub belief: StateBelief,
    /// `z - z_hat`.
    pub innovation: Vec2,
    /// Innovation covariance, predicted measurement covariance plus `R`.
    pub s: Mat2,
    /// Predicted measurement.
    pub z_hat: Vec2,
}

/// Unscented update with the default spread parameters. The observation is
/// linear, so the result does not depend on them beyond rounding.
pub fn ukf_update(b: &StateBelief, z: &Vec2, r: &Mat2) -> Result<UkfUpdate> {
    ukf_update_params(b, z, r, &UkfParams::default())
}

pub fn ukf_update_params(b: &StateBelief, z: &Vec2, r: &Mat2, up: &UkfParams) -> Result<UkfUpdate> {
    Gaussian2::new(Vec2::zeros(), *r)?;
    ukf_update_with(b, z, r, &up.weights()?)
}

fn ukf_update_with(b: &StateBelief, z: &Vec2, r: &Mat2, w: &UtWeights) -> Result<UkfUpdate> {
    let mean = b.mean.to_vector();
    let pts = sigma_points(&mean, &b.cov, w)?;
    let zs: Vec<Vec2> = pts.iter().map(|p| observe(&State5::from_vector(p))).collect();
    let z_hat = zs.iter().zip(&w.mean).fold(Vec2::zeros(), |acc, (zi, wi)| acc + zi * *wi);

    let mut s = *r;
    let mut pxz = SMatrix::<f64, 5, 2>::zeros();
    for ((p, zi), wc) in pts.iter().zip(&zs).zip(&w.cov) {
        let dz = zi - z_hat;
        s += dz * dz.transpose() * *wc;
        pxz += state_residual(p, &mean) * dz.transpose() * *wc;
    }
    let s = gm::symmetrize(&s);
    let s_inv = Gaussian2::new(z_hat, s)
        .ok()
        .filter(|g| g.condition_number() <= gm::MAX_CONDITION)
        .and_then(|_| s.try_inverse())
        .ok_or_else(|| Error::Singular("innovation covariance".into()))?;

    let gain = pxz * s_inv;
    let innovation = z - z_hat;
    let post_mean = mean + gain * innovation;
    let post_cov = symmetrize5(&(b.cov - gain * s * gain.transpose()));
    Ok(UkfUpdate {
        belief: StateBelief { mean: State5::from_vector(&post_mean), cov: post_cov },
        innovation,
        s,
        z_hat,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpfDiagnostics {
    /// Condensed measurement in the inertial frame.
    pub measurement: Gaussian2,
    pub innovation: Vec2,
    pub s: Mat2,
}

/// Rotates the car-frame measurement mixture by `heading`, condenses it and
/// runs a single unscented update.
pub fn spf_update_gm(b: &StateBelief, meas: &GaussMix2, heading: f64) -> Result<(StateBelief, SpfDiagnostics)> {
    let condensed = meas.rotate_to_inertial(heading).condense();
    let up = ukf_update(b, &condensed.mean(), &condensed.cov())?;
    Ok((
        up.belief,
        SpfDiagnostics { measurement: condensed, innovation: up.innovation, s: up.s },
    ))
}

pub fn gsf_predict(gb: &GsfBelief, mp: &MotionParams, up: &UkfParams) -> Result<GsfBelief> {
    let hypotheses = gb
        .hypotheses
        .iter()
        .map(|(w, b)| Ok((*w, ukf_predict(b, mp, up)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(GsfBelief { hypotheses })
}

/// Mixture management for the Gaussian-sum update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GsfConfig {
    pub m_max: usize,
    pub w_floor: f64,
}

impl Default for GsfConfig {
    fn default() -> Self {
        Self { m_max: 6, w_floor: 1e-4 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GsfDiagnostics {
    pub candidates: usize,
    pub pruned: usize,
    pub merged: usize,
    /// Every candidate likelihood underflowed; prior weights were used.
    pub likelihood_fallback: bool,
}

/// Gaussian-sum measurement update.
///
/// Every (hypothesis, measurement component) pair gets its own unscented
/// update weighted by `w_i * w_k * N(z; z_hat_i, S_ik)`. With `heading` set
/// the car-frame mixture is rotated once by it; with `None` each hypothesis
/// rotates by its own predicted heading.
pub fn gsf_update(
    gb: &GsfBelief,
    meas: &GaussMix2,
    heading: Option<f64>,
    cfg: &GsfConfig,
) -> Result<(GsfBelief, GsfDiagnostics)> {
    if cfg.m_max == 0 {
        return Err(Error::InvalidArgument("m_max must be at least 1".into()));
    }
    let w = UkfParams::default().weights()?;
    let shared = heading.map(|h| meas.rotate_to_inertial(h));

    let mut candidates: Vec<(f64, f64, StateBelief)> = Vec::new();
    for (wi, hyp) in &gb.hypotheses {
        let rotated;
        let m = match &shared {
            Some(m) => m,
            None => {
                rotated = meas.rotate_to_inertial(hyp.mean.theta);
                &rotated
            }
        };
        for (wk, comp) in m.components() {
            if *wi <= 0.0 || *wk <= 0.0 {
                continue;
            }
            let up = ukf_update_with(hyp, &comp.mean(), &comp.cov(), &w)?;
            let loglik = Gaussian2::new(up.z_hat, up.s)?.log_pdf(&comp.mean())?;
            candidates.push((wi * wk, loglik, up.belief));
        }
    }
    if candidates.is_empty() {
        return Err(Error::InvalidMixture("no candidate with positive weight".into()));
    }

    let mut diag = GsfDiagnostics { candidates: candidates.len(), ..Default::default() };
    let mut weighted: Vec<(f64, StateBelief)> = if candidates.iter().all(|c| c.1.exp() == 0.0) {
        diag.likelihood_fallback = true;
        candidates.into_iter().map(|(prior, _, b)| (prior, b)).collect()
    } else {
        let log_w: Vec<f64> = candidates.iter().map(|c| c.0.ln() + c.1).collect();
        let max_log = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        candidates
            .into_iter()
            .zip(log_w)
            .map(|((_, _, b), lw)| ((lw - max_log).exp(), b))
            .collect()
    };
    normalize(&mut weighted);

    let before = weighted.len();
    let best = weighted
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .0.total_cmp(&b.1 .0))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut kept: Vec<(f64, StateBelief)> = weighted
        .into_iter()
        .enumerate()
        .filter(|(i, (wt, _))| *i == best || *wt >= cfg.w_floor)
        .map(|(_, c)| c)
        .collect();
    diag.pruned = before - kept.len();
    normalize(&mut kept);

    while kept.len() > cfg.m_max {
        let (a, b) = two_lowest(&kept);
        let merged = merge_pair(&kept[a], &kept[b]);
        kept[a] = merged;
        kept.remove(b);
        diag.merged += 1;
    }
    normalize(&mut kept);
    Ok((GsfBelief { hypotheses: kept }, diag))
}

fn normalize(items: &mut [(f64, StateBelief)]) {
    let total: f64 = items.iter().map(|(w, _)| w).sum();
    for (w, _) in items.iter_mut() {
        *w /= total;
    }
}

/// Indices of the two smallest weights, lower index first.
fn two_lowest(items: &[(f64, StateBelief)]) -> (usize, usize) {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&i, &j| items[i].0.total_cmp(&items[j].0).then(i.cmp(&j)));
    let (a, b) = (order[0], order[1]);
    (a.min(b), a.max(b))
}

fn merge_pair(a: &(f64, StateBelief), b: &(f64, StateBelief)) -> (f64, StateBelief) {
    let total = a.0 + b.0;
    if total <= 0.0 {
        return (0.0, a.1.clone());
    }
    let merged = moment_match(&[(a.0 / total, a.1.clone()), (b.0 / total, b.1.clone())]);
    (total, merged)
}

fn moment_match(items: &[(f64, StateBelief)]) -> StateBelief {
    let means: Vec<Vec5> = items.iter().map(|(_, b)| b.mean.to_vector()).collect();
    let weights: Vec<f64> = items.iter().map(|(w, _)| *w).collect();
    let mean = state_mean(&means, &weights);
    let mut cov = Mat5::zeros();
    for ((w, b), m) in items.iter().zip(&means) {
        let d = state_residual(m, &mean);
        cov += (b.cov + d * d.transpose()) * *w;
    }
    StateBelief { mean: State5::from_vector(&mean), cov: symmetrize5(&cov) }
}

/// Single Gaussian matching the bank's first two moments.
pub fn gsf_condense(gb: &GsfBelief) -> StateBelief {
    if gb.hypotheses.len() == 1 {
        return gb.hypotheses[0].1.clone();
    }
    moment_match(&gb.hypotheses)
}

/// Initial covariance `diag(25, 25, 1, 25, 0.25)`.
pub fn initial_cov() -> Mat5 {
    Mat5::from_diagonal(&Vec5::new(25.0, 25.0, 1.0, 25.0, 0.25))
}

/// Belief from the first two position measurements `dt` apart: position
/// from the first, heading and speed from the displacement.
pub fn initial_belief(z0: &Vec2, z1: &Vec2, dt: f64) -> Result<StateBelief> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt {dt} must be positive")));
    }
    let disp = z1 - z0;
    let theta = if disp.norm() > 0.0 { disp.y.atan2(disp.x) } else { 0.0 };
    StateBelief::new(State5::new(z0.x, z0.y, theta, disp.norm() / dt, 0.0), initial_cov())
}

/// [`initial_belief`] with the fixes' noise `r0`, `r1` propagated into the
/// covariance by two-point differencing, on top of [`initial_cov`].
pub fn initial_belief_two_point(z0: &Vec2, r0: &Mat2, z1: &Vec2, r1: &Mat2, dt: f64) -> Result<StateBelief> {
    let base = initial_belief(z0, z1, dt)?;
    let disp = z1 - z0;
    let d2 = disp.norm_squared();
    // rows: x, y, theta, v; columns: z0, z1
    let mut j = SMatrix::<f64, 4, 4>::zeros();
    j[(0, 0)] = 1.0;
    j[(1, 1)] = 1.0;
    if d2 > 0.0 {
        let n = d2.sqrt();
        let dtheta = Vec2::new(-disp.y / d2, disp.x / d2);
        let dv = disp / (n * dt);
        for c in 0..2 {
            j[(2, c)] = -dtheta[c];
            j[(2, 2 + c)] = dtheta[c];
            j[(3, c)] = -dv[c];
            j[(3, 2 + c)] = dv[c];
        }
    }
    let mut r = SMatrix::<f64, 4, 4>::zeros();
    r.fixed_view_mut::<2, 2>(0, 0).copy_from(r0);
    r.fixed_view_mut::<2, 2>(2, 2).copy_from(r1);
    let extra = j * r * j.transpose();
    let mut cov = base.cov;
    for a in 0..4 {
        for b in 0..4 {
            cov[(a, b)] += extra[(a, b)];
        }
    }
    StateBelief::new(base.mean, symmetrize5(&cov))
}
