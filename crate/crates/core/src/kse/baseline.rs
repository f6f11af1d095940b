//! Context-binned single-Gaussian error model.
//!
//! Frames are grouped by keypoint-match count into quantile bins; each bin
//! carries the empirical covariance of its car-frame errors.

use serde::{Deserialize, Serialize};

use super::FrameContext;
use crate::error::{Error, Result};
use crate::gm::{symmetrize, GaussMix2, Gaussian2, Mat2, Vec2};

/// Eigenvalue floor applied to every fitted covariance.
pub const COV_FLOOR: f64 = 1e-6;
/// Non-empty bins with fewer samples are merged into a neighbour.
pub const MIN_BIN_SAMPLES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    /// Lower `n_kpm` edges of bins `1..`; bin 0 is unbounded below.
    pub edges: Vec<f64>,
    /// Row-major 2x2 covariance per bin.
    pub covs: Vec<[f64; 4]>,
}

fn to_arr(m: &Mat2) -> [f64; 4] {
    [m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]]
}

fn from_arr(a: &[f64; 4]) -> Mat2 {
    Mat2::new(a[0], a[1], a[2], a[3])
}

/// Covariance about the sample mean (divisor `n`), eigenvalues floored.
fn empirical_cov(errs: &[Vec2]) -> Mat2 {
    let n = errs.len() as f64;
    let mean = errs.iter().fold(Vec2::zeros(), |a, e| a + e) / n;
    let cov = errs.iter().fold(Mat2::zeros(), |a, e| {
        let d = e - mean;
        a + d * d.transpose()
    }) / n;
    let mut eig = symmetrize(&cov).symmetric_eigen();
    for ev in eig.eigenvalues.iter_mut() {
        *ev = ev.max(COV_FLOOR);
    }
    symmetrize(&eig.recompose())
}

impl BaselineModel {
    pub fn bin_of(&self, n_kpm: usize) -> usize {
        let n = n_kpm as f64;
        self.edges.iter().take_while(|e| n >= **e).count()
    }

    pub fn cov_for(&self, n_kpm: usize) -> Mat2 {
        from_arr(&self.covs[self.bin_of(n_kpm)])
    }

    /// Car-frame Gaussian centred on the frame's measured location.
    pub fn predict(&self, fc: &FrameContext) -> Result<GaussMix2> {
        Ok(GaussMix2::single(Gaussian2::new(fc.r_hat, self.cov_for(fc.n_kpm()))?))
    }
}

pub fn baseline_fit(dataset: &[FrameContext], bins: usize) -> Result<BaselineModel> {
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let mut samples: Vec<(usize, Vec2)> = dataset
        .iter()
        .filter_map(|fc| fc.car_frame_error().map(|e| (fc.n_kpm(), e)))
        .collect();
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no frames with ground truth".into()));
    }
    samples.sort_by_key(|s| s.0);
    let n = samples.len();
    let edges: Vec<f64> = (1..bins).map(|b| samples[b * n / bins].0 as f64).collect();
    let model = BaselineModel { edges, covs: vec![] };

    let mut members: Vec<Vec<Vec2>> = vec![Vec::new(); bins];
    for (k, e) in &samples {
        members[model.bin_of(*k)].push(*e);
    }

    // groups of adjacent bins sharing one covariance
    let mut groups: Vec<Vec<usize>> = (0..bins).filter(|b| !members[*b].is_empty()).map(|b| vec![b]).collect();
    let count = |g: &Vec<usize>| g.iter().map(|b| members[*b].len()).sum::<usize>();
    while groups.len() > 1 {
        let Some(small) = groups.iter().position(|g| count(g) < MIN_BIN_SAMPLES) else {
            break;
        };
        let into = if small + 1 < groups.len() { small + 1 } else { small - 1 };
        let moved = groups.remove(small);
        let target = if into > small { into - 1 } else { into };
        groups[target].extend(moved);
        groups[target].sort_unstable();
    }

    let all: Vec<Vec2> = samples.iter().map(|s| s.1).collect();
    let global = empirical_cov(&all);
    let mut covs = vec![to_arr(&global); bins];
    for g in &groups {
        let pooled: Vec<Vec2> = g.iter().flat_map(|b| members[*b].iter().copied()).collect();
        let cov = to_arr(&empirical_cov(&pooled));
        for b in g {
            covs[*b] = cov;
        }
    }
    Ok(BaselineModel { edges: model.edges, covs })
}
