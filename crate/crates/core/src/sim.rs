//! Deterministic synthetic scenarios.
//!
//! A unicycle trajectory is sampled at a fixed rate; every sample gets a
//! synthetic keypoint-match context and a position measurement whose error
//! scale is a documented function of that context:
//!
//! ```text
//! s = clip(0.5 + 40 / n_kpm + 0.8 * frac_dynamic, 0.5, 5.0)
//! ```
//!
//! The error is `s` times a draw from the condition's car-frame mixture,
//! rotated by the true heading. With probability `outlier_rate` it is
//! replaced by an isotropic `N(0, outlier_scale^2 I)` draw. Keypoint
//! scores carry the scale as well: the best score is
//! `0.95 - 0.15 * (s - 0.5)` and every other score is that value times a
//! uniform factor in `[0.3, 1)`.

use std::f64::consts::PI;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{motion_model, State5};
use crate::gm::{rotation, GaussMix2, Gaussian2, Mat2, Vec2};
use crate::kse::{self, FrameContext, KeypointMatch, DYNAMIC_CLASSES};

pub const IMAGE_WIDTH: u32 = 1920;
pub const IMAGE_HEIGHT: u32 = 1208;
pub const SCALE_MIN: f64 = 0.5;
pub const SCALE_MAX: f64 = 5.0;

/// Error scale implied by a match context.
pub fn error_scale(n_kpm: usize, frac_dynamic: f64) -> f64 {
    (0.5 + 40.0 / n_kpm.max(1) as f64 + 0.8 * frac_dynamic).clamp(SCALE_MIN, SCALE_MAX)
}

/// Best match score for a given error scale.
pub fn top_score(s: f64) -> f64 {
    0.95 - 0.15 * (s - SCALE_MIN)
}

/// Distribution of the synthetic match context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchStats {
    /// Mean of the negative-binomial match count.
    pub mean_kpm: f64,
    /// Negative-binomial shape; smaller is more dispersed.
    pub dispersion: f64,
    pub min_kpm: usize,
    /// Beta parameters of the dynamic-class fraction.
    pub dynamic_alpha: f64,
    pub dynamic_beta: f64,
}

impl MatchStats {
    fn validate(&self) -> Result<()> {
        if !(self.mean_kpm > 0.0 && self.dispersion > 0.0 && self.dynamic_alpha > 0.0 && self.dynamic_beta > 0.0)
            || self.min_kpm == 0
        {
            return Err(Error::InvalidArgument(format!("bad match statistics {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionProfile {
    pub name: String,
    /// Zero-mean car-frame error template.
    pub error_mixture: GaussMix2,
    pub outlier_rate: f64,
    /// Standard deviation (m) of the isotropic outlier draw.
    pub outlier_scale: f64,
    pub match_stats: MatchStats,
}

impl ConditionProfile {
    fn isotropic(name: &str, comps: &[(f64, f64)], outlier_rate: f64, mean_kpm: f64) -> Self {
        let covs: Vec<(f64, Mat2)> = comps.iter().map(|(w, s)| (*w, Mat2::identity() * (s * s))).collect();
        Self {
            name: name.into(),
            error_mixture: GaussMix2::common_mean(Vec2::zeros(), &covs).expect("valid default profile"),
            outlier_rate,
            outlier_scale: 50.0,
            match_stats: MatchStats { mean_kpm, dispersion: 4.0, min_kpm: 5, dynamic_alpha: 2.0, dynamic_beta: 6.0 },
        }
    }

    pub fn sunny() -> Self {
        Self::isotropic("sunny", &[(1.0, 1.0)], 0.0, 150.0)
    }

    pub fn night() -> Self {
        Self::isotropic("night", &[(0.85, 1.0), (0.15, 6.0)], 0.05, 60.0)
    }

    pub fn snowy() -> Self {
        Self::isotropic("snowy", &[(0.9, 1.2), (0.1, 4.0)], 0.03, 90.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.outlier_rate) {
            return Err(Error::InvalidArgument(format!("outlier rate {} outside [0, 1)", self.outlier_rate)));
        }
        if !(self.outlier_scale > 0.0) {
            return Err(Error::InvalidArgument("outlier scale must be positive".into()));
        }
        if self.error_mixture.mean().norm() > 1e-9 {
            return Err(Error::InvalidMixture("error template must be zero-mean".into()));
        }
        self.match_stats.validate()
    }

    /// Exact car-frame error distribution for scale `s`.
    pub fn oracle_mixture(&self, s: f64) -> Result<GaussMix2> {
        let inlier = 1.0 - self.outlier_rate;
        let mut comps: Vec<(f64, Gaussian2)> = self
            .error_mixture
            .components()
            .iter()
            .map(|(w, g)| Ok((w * inlier, Gaussian2::new(g.mean() * s, g.cov() * (s * s))?)))
            .collect::<Result<_>>()?;
        if self.outlier_rate > 0.0 {
            comps.push((self.outlier_rate, Gaussian2::isotropic(Vec2::zeros(), self.outlier_scale)?));
        }
        GaussMix2::new(comps)
    }

    /// Core (non-outlier) car-frame error for scale `s`.
    pub fn draw_core_error<R: Rng + ?Sized>(&self, s: f64, rng: &mut R) -> Result<Vec2> {
        Ok(self.error_mixture.sample_with(rng, 1)?[0] * s)
    }
}

/// Named profile collection, serialized as `{"profiles": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileSet {
    pub profiles: Vec<ConditionProfile>,
}

impl Default for ProfileSet {
    fn default() -> Self {
        Self { profiles: vec![ConditionProfile::sunny(), ConditionProfile::night(), ConditionProfile::snowy()] }
    }
}

impl ProfileSet {
    pub fn load(path: &Path) -> Result<Self> {
        let set: Self = serde_json::from_reader(std::io::BufReader::new(std::fs::File::open(path)?))?;
        for p in &set.profiles {
            p.validate()?;
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> Result<&ConditionProfile> {
        self.profiles
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown profile '{name}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub times: Vec<f64>,
    pub states: Vec<State5>,
}

pub const SEGMENT_SECONDS: (f64, f64) = (5.0, 20.0);
pub const SPEED_RANGE: (f64, f64) = (3.0, 20.0);
pub const TURN_RATE_RANGE: (f64, f64) = (-0.3, 0.3);

/// Piecewise-constant speed and turn rate, integrated with [`motion_model`].
///
/// Samples are `t_i = i * dt` for `i = 0..=floor(duration / dt)`. Each
/// state already carries the speed and turn rate used to reach the next.
pub fn gen_trajectory(seed: u64, duration: f64, dt: f64) -> Result<Trajectory> {
    if !(dt > 0.0 && duration >= dt) {
        return Err(Error::InvalidArgument(format!("need duration >= dt > 0, got {duration}, {dt}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps = (duration / dt + 1e-9).floor() as usize;
    let mut state = State5::new(0.0, 0.0, rng.random_range(-PI..PI), 0.0, 0.0);
    let mut segment_end = f64::NEG_INFINITY;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = i as f64 * dt;
        if t >= segment_end {
            state.v = rng.random_range(SPEED_RANGE.0..=SPEED_RANGE.1);
            state.theta_dot = rng.random_range(TURN_RATE_RANGE.0..=TURN_RATE_RANGE.1);
            segment_end = t + rng.random_range(SEGMENT_SECONDS.0..=SEGMENT_SECONDS.1);
        }
        times.push(t);
        states.push(state);
        state = motion_model(&state, dt);
    }
    Ok(Trajectory { dt, times, states })
}

/// One simulated measurement with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RecordWire", into = "RecordWire")]
pub struct ScenarioRecord {
    pub t: f64,
    pub state_gt: State5,
    pub frame: FrameContext,
    /// Error scale implied by the match context.
    pub scale: f64,
    pub outlier: bool,
    /// `-ln p(err)` of the car-frame error under the generating mixture.
    pub oracle_nll: f64,
}

#[derive(Serialize, Deserialize)]
struct RecordWire {
    t: f64,
    state_gt: [f64; 5],
    scale: f64,
    outlier: bool,
    oracle_nll: f64,
    #[serde(flatten)]
    frame: FrameContext,
}

impl TryFrom<RecordWire> for ScenarioRecord {
    type Error = Error;

    fn try_from(w: RecordWire) -> Result<Self> {
        let [x, y, theta, v, theta_dot] = w.state_gt;
        Ok(Self {
            t: w.t,
            state_gt: State5 { x, y, theta, v, theta_dot },
            frame: w.frame,
            scale: w.scale,
            outlier: w.outlier,
            oracle_nll: w.oracle_nll,
        })
    }
}

impl From<ScenarioRecord> for RecordWire {
    fn from(r: ScenarioRecord) -> Self {
        let s = r.state_gt;
        Self {
            t: r.t,
            state_gt: [s.x, s.y, s.theta, s.v, s.theta_dot],
            scale: r.scale,
            outlier: r.outlier,
            oracle_nll: r.oracle_nll,
            frame: r.frame,
        }
    }
}

/// Independent stream for record `index` of a dataset.
pub fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_a710_0000_0001);
    rng.set_stream(index);
    rng
}

fn draw_n_kpm<R: Rng + ?Sized>(ms: &MatchStats, rng: &mut R) -> Result<usize> {
    let gamma = Gamma::new(ms.dispersion, ms.mean_kpm / ms.dispersion)
        .map_err(|e| Error::InvalidArgument(format!("match count distribution: {e}")))?;
    let lambda: f64 = gamma.sample(rng);
    let n = if lambda > 0.0 {
        Poisson::new(lambda)
            .map_err(|e| Error::InvalidArgument(format!("match count distribution: {e}")))?
            .sample(rng) as usize
    } else {
        0
    };
    Ok(n.max(ms.min_kpm))
}

/// Synthesizes a match context; returns it with its error scale.
fn gen_matches<R: Rng + ?Sized>(ms: &MatchStats, rng: &mut R) -> Result<(Vec<KeypointMatch>, f64)> {
    let n = draw_n_kpm(ms, rng)?;
    let beta = Beta::new(ms.dynamic_alpha, ms.dynamic_beta)
        .map_err(|e| Error::InvalidArgument(format!("dynamic fraction distribution: {e}")))?;
    let frac: f64 = beta.sample(rng);
    let n_dyn = ((frac * n as f64).round() as usize).min(n);
    let mut dynamic: Vec<bool> = (0..n).map(|i| i < n_dyn).collect();
    dynamic.shuffle(rng);
    let s = error_scale(n, n_dyn as f64 / n as f64);
    let top = top_score(s);
    let best = rng.random_range(0..n);
    let (w, h) = ((IMAGE_WIDTH - 1) as f64, (IMAGE_HEIGHT - 1) as f64);
    let static_classes = (kse::NUM_CLASSES - DYNAMIC_CLASSES.len()) as u8;
    let matches = dynamic
        .iter()
        .enumerate()
        .map(|(i, &dyn_match)| {
            let class = if dyn_match {
                DYNAMIC_CLASSES[rng.random_range(0..DYNAMIC_CLASSES.len())]
            } else {
                rng.random_range(0..static_classes)
            };
            let factor: f64 = rng.random_range(0.3..1.0);
            KeypointMatch {
                xq: rng.random_range(0.0..=w),
                yq: rng.random_range(0.0..=h),
                xr: rng.random_range(0.0..=w),
                yr: rng.random_range(0.0..=h),
                ms: if i == best { top } else { top * factor },
                class_q: class,
                class_r: class,
            }
        })
        .collect();
    Ok((matches, s))
}

/// Draws the context, the error and the measurement for one true state.
///
/// Every random quantity is drawn regardless of the outlier outcome, so two
/// profiles differing only in `outlier_rate` give paired records.
pub fn gen_record<R: Rng + ?Sized>(t: f64, state: &State5, profile: &ConditionProfile, rng: &mut R) -> Result<ScenarioRecord> {
    profile.validate()?;
    let (matches, s) = gen_matches(&profile.match_stats, rng)?;
    let u: f64 = rng.random();
    let core = profile.draw_core_error(s, rng)?;
    let wild = Vec2::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal)) * profile.outlier_scale;
    let outlier = u < profile.outlier_rate;
    let err_car = if outlier { wild } else { core };
    let gt = state.position();
    let frame = FrameContext {
        matches,
        r_hat: gt + rotation(state.theta) * err_car,
        r_gt: Some(gt),
        heading: state.theta,
        width: IMAGE_WIDTH,
        height: IMAGE_HEIGHT,
        condition: profile.name.clone(),
    };
    let err = frame.car_frame_error().expect("ground truth set");
    let oracle_nll = -profile.oracle_mixture(s)?.log_pdf(&err)?;
    Ok(ScenarioRecord { t, state_gt: *state, frame, scale: s, outlier, oracle_nll })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub seed: u64,
    pub duration: f64,
    pub dt: f64,
    pub profile: String,
    /// Overrides the profile's outlier rate.
    pub outlier_rate: Option<f64>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self { seed: 0, duration: 60.0, dt: 0.1, profile: "night".into(), outlier_rate: None }
    }
}

/// Whole dataset as a pure function of the configuration and profiles.
pub fn simulate(cfg: &SimConfig, profiles: &ProfileSet) -> Result<Vec<ScenarioRecord>> {
    let mut profile = profiles.get(&cfg.profile)?.clone();
    if let Some(rate) = cfg.outlier_rate {
        profile.outlier_rate = rate;
    }
    profile.validate()?;
    let traj = gen_trajectory(cfg.seed, cfg.duration, cfg.dt)?;
    traj.times
        .iter()
        .zip(&traj.states)
        .enumerate()
        .map(|(i, (t, s))| gen_record(*t, s, &profile, &mut record_rng(cfg.seed, i as u64)))
        .collect()
}

pub fn export_jsonl<W: Write>(records: &[ScenarioRecord], writer: W) -> Result<()> {
    kse::write_jsonl(records, writer)
}

pub fn import_jsonl<R: BufRead>(reader: R) -> Result<Vec<ScenarioRecord>> {
    kse::read_jsonl(reader)
}
