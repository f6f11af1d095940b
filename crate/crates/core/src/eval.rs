//! Calibration statistics, credibility metrics and the filtering harness.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{
    gsf_condense, gsf_predict, gsf_update, initial_belief_two_point, spf_update_gm, ukf_predict, GsfBelief, GsfConfig,
    MotionParams, State5, StateBelief, UkfParams,
};
use crate::gating::{chi2_threshold, gate_gaussian, gate_gm, ZERO_INNOVATION};
use crate::gm::{Direction, GaussMix2, Gaussian2, Mat2, Vec2};
use crate::kse::baseline::BaselineModel;
use crate::kse::net::{predict_measurement, KseParams};
use crate::kse::{read_jsonl, FrameContext};
use crate::sim::{ProfileSet, ScenarioRecord};

/// Credibility levels of the covariance-credibility metric.
pub const CREDIBILITY_LEVELS: [f64; 3] = [0.683, 0.954, 0.997];
/// Empirical percentiles annotated on calibration histograms.
pub const HISTOGRAM_PERCENTILES: [f64; 3] = [0.65, 0.95, 0.99];
/// Percentiles of 1 are evaluated here instead.
pub const MAX_PERCENTILE: f64 = 1.0 - 1e-12;

/// `err^T R^-1 err`.
pub fn d2_stat(err: &Vec2, r: &Mat2) -> Result<f64> {
    Gaussian2::new(Vec2::zeros(), *r)
        .map_err(|e| Error::Singular(format!("measurement covariance: {e}")))?
        .mahalanobis_sq(err)
}

/// Mixture analogue of [`d2_stat`]: the two-sided percentile of the error
/// length along its own direction, mapped through the inverse chi-square
/// (2 dof) CDF.
pub fn gm_marginalized_stat(meas: &GaussMix2, r_gt: &Vec2) -> Result<f64> {
    let center = meas.mean();
    let err = r_gt - center;
    let dist = err.norm();
    if dist < ZERO_INNOVATION {
        return Ok(0.0);
    }
    let p = meas.marginalize(&Direction::from_vector(&err)?, &center)?.two_sided_percentile(dist);
    Ok(-2.0 * (-p.min(MAX_PERCENTILE)).ln_1p())
}

pub fn chi2_2_density(x: f64) -> f64 {
    if x < 0.0 {
        0.0
    } else {
        0.5 * (-0.5 * x).exp()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Constant,
    Baseline,
    GmCondensed,
    GmMarginalized,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Constant, Method::Baseline, Method::GmCondensed, Method::GmMarginalized];

    pub fn tag(&self) -> &'static str {
        match self {
            Method::Constant => "constant",
            Method::Baseline => "baseline",
            Method::GmCondensed => "gm-condensed",
            Method::GmMarginalized => "gm-marginalized",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSeries {
    pub method: Method,
    pub condition: String,
    pub values: Vec<f64>,
}

impl CalibrationSeries {
    pub fn new(method: Method, condition: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!("calibration value {v} is not a finite non-negative number")));
        }
        Ok(Self { method, condition: condition.into(), values })
    }

    /// Fraction of values at or below the chi-square (2 dof) quantile of `level`.
    pub fn coverage(&self, level: f64) -> Result<f64> {
        let thr = chi2_threshold(level, 2)?;
        Ok(self.values.iter().filter(|v| **v <= thr).count() as f64 / self.values.len().max(1) as f64)
    }

    pub fn percentile(&self, p: f64) -> Result<f64> {
        let mut sorted = self.values.clone();
        sorted.sort_by(f64::total_cmp);
        percentile_sorted(&sorted, p)
    }
}

/// Linear interpolation between order statistics.
pub fn percentile_sorted(sorted: &[f64], p: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::InvalidArgument("percentile of an empty sample".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("percentile {p} outside [0, 1]")));
    }
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub method: Method,
    pub condition: String,
    pub bin_width: f64,
    /// Probability density per bin; integrates to one.
    pub density: Vec<f64>,
    /// Chi-square (2 dof) density at bin centres.
    pub reference: Vec<f64>,
    /// Empirical 65/95/99 % percentiles.
    pub percentiles: [f64; 3],
}

impl Histogram {
    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.bin_width
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,center,density,chi2_ref\n");
        for (i, (d, r)) in self.density.iter().zip(&self.reference).enumerate() {
            let lo = i as f64 * self.bin_width;
            let _ = writeln!(s, "{},{},{},{},{}", lo, lo + self.bin_width, self.center(i), d, r);
        }
        s
    }

    /// Bars, reference curve and percentile markers as a bare SVG document.
    pub fn to_svg(&self) -> String {
        let (w, h, pad) = (640.0, 400.0, 40.0);
        let x_max = self.bin_width * self.density.len() as f64;
        let y_max = self.density.iter().chain(&self.reference).cloned().fold(1e-12, f64::max);
        let sx = |x: f64| pad + (w - 2.0 * pad) * x / x_max;
        let sy = |y: f64| h - pad - (h - 2.0 * pad) * y / y_max;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <text x=\"{pad}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{} ({})</text>\n",
            self.method.tag(),
            self.condition
        );
        for (i, d) in self.density.iter().enumerate() {
            let x0 = sx(i as f64 * self.bin_width);
            let x1 = sx((i + 1) as f64 * self.bin_width);
            let y = sy(*d);
            let _ = writeln!(
                s,
                "<rect x=\"{x0:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"steelblue\"/>",
                (x1 - x0).max(0.1),
                (h - pad - y).max(0.0)
            );
        }
        let pts: Vec<String> = self
            .reference
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{:.2},{:.2}", sx(self.center(i)), sy(*r)))
            .collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"crimson\" stroke-width=\"2\"/>", pts.join(" "));
        for (p, v) in HISTOGRAM_PERCENTILES.iter().zip(&self.percentiles) {
            let x = sx(v.min(x_max));
            let _ = writeln!(
                s,
                "<line x1=\"{x:.2}\" y1=\"{pad}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-dasharray=\"4 3\"/>\n\
                 <text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\">{}%: {:.2}</text>",
                h - pad,
                x + 3.0,
                pad + 12.0,
                (p * 100.0).round(),
                v
            );
        }
        let _ = writeln!(
            s,
            "<line x1=\"{pad}\" y1=\"{0:.2}\" x2=\"{1:.2}\" y2=\"{0:.2}\" stroke=\"black\"/>\n</svg>",
            h - pad,
            w - pad
        );
        s
    }
}

/// Density histogram on `[0, upper)` with `bins` equal bins.
///
/// `upper` defaults to the largest value; values beyond it fall into the
/// last bin so the density always integrates to one.
pub fn calibration_histogram(series: &CalibrationSeries, bins: usize, upper: Option<f64>) -> Result<Histogram> {
    if series.values.is_empty() {
        return Err(Error::InvalidArgument("empty calibration series".into()));
    }
    if bins == 0 {
        return Err(Error::InvalidArgument("need at least one bin".into()));
    }
    let max = series.values.iter().cloned().fold(0.0, f64::max);
    let upper = match upper {
        Some(u) if u > 0.0 => u,
        Some(u) => return Err(Error::InvalidArgument(format!("histogram upper bound {u} must be positive"))),
        None if max > 0.0 => max,
        None => 1.0,
    };
    let width = upper / bins as f64;
    let mut counts = vec![0usize; bins];
    for v in &series.values {
        counts[((v / width) as usize).min(bins - 1)] += 1;
    }
    let n = series.values.len() as f64;
    let density: Vec<f64> = counts.iter().map(|c| *c as f64 / (n * width)).collect();
    let reference = (0..bins).map(|i| chi2_2_density((i as f64 + 0.5) * width)).collect();
    let mut sorted = series.values.clone();
    sorted.sort_by(f64::total_cmp);
    let mut percentiles = [0.0; 3];
    for (slot, p) in percentiles.iter_mut().zip(HISTOGRAM_PERCENTILES) {
        *slot = percentile_sorted(&sorted, p)?;
    }
    Ok(Histogram {
        method: series.method,
        condition: series.condition.clone(),
        bin_width: width,
        density,
        reference,
        percentiles,
    })
}

/// Uncertainty reported by a filter for its position estimate.
#[derive(Debug, Clone, PartialEq)]
pub enum PositionBounds {
    /// Sigma ellipses of a Gaussian position marginal.
    Gaussian(Gaussian2),
    /// Tail thresholds of a position mixture along the error direction.
    Mixture(GaussMix2),
}

impl PositionBounds {
    /// Whether `truth` lies inside each of the [`CREDIBILITY_LEVELS`] bounds.
    pub fn contains(&self, truth: &Vec2) -> Result<[bool; 3]> {
        let mut inside = [false; 3];
        match self {
            PositionBounds::Gaussian(g) => {
                let d2 = g.mahalanobis_sq(truth)?;
                for (slot, level) in inside.iter_mut().zip(CREDIBILITY_LEVELS) {
                    *slot = d2 <= chi2_threshold(level, 2)?;
                }
            }
            PositionBounds::Mixture(m) => {
                let center = m.mean();
                let err = truth - center;
                let dist = err.norm();
                if dist < ZERO_INNOVATION {
                    return Ok([true; 3]);
                }
                let marginal = m.marginalize(&Direction::from_vector(&err)?, &center)?;
                for (slot, level) in inside.iter_mut().zip(CREDIBILITY_LEVELS) {
                    *slot = dist <= marginal.tail_threshold(level)?;
                }
            }
        }
        Ok(inside)
    }
}

/// One filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub est: State5,
    pub gt: Vec2,
    pub d_err: f64,
    pub accepted: bool,
    /// Whether a gate was evaluated at all.
    pub gated: bool,
    pub cred: [bool; 3],
    pub n_hypotheses: usize,
}

pub const TRACE_HEADER: &str =
    "t,x_est,y_est,theta_est,v_est,thetadot_est,x_gt,y_gt,d_err,accepted,cred68,cred95,cred997,n_hypotheses";

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut w: W) -> Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    let b = |v: bool| u8::from(v);
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.t,
            r.est.x,
            r.est.y,
            r.est.theta,
            r.est.v,
            r.est.theta_dot,
            r.gt.x,
            r.gt.y,
            r.d_err,
            b(r.accepted),
            b(r.cred[0]),
            b(r.cred[1]),
            b(r.cred[2]),
            r.n_hypotheses
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibilityReport {
    /// Fractions of steps inside the 68.3 / 95.4 / 99.7 % bounds.
    pub cred68: f64,
    pub cred95: f64,
    pub cred997: f64,
    /// Mean Euclidean position error (m).
    pub d_err: f64,
    /// Percentage of gated measurements that were rejected.
    pub n_r: f64,
    pub frames: usize,
}

pub fn credibility(trace: &[TraceRow]) -> Result<CredibilityReport> {
    if trace.is_empty() {
        return Err(Error::InvalidArgument("empty trace".into()));
    }
    let n = trace.len() as f64;
    let frac = |i: usize| trace.iter().filter(|r| r.cred[i]).count() as f64 / n;
    let gated = trace.iter().filter(|r| r.gated).count();
    let rejected = trace.iter().filter(|r| r.gated && !r.accepted).count();
    Ok(CredibilityReport {
        cred68: frac(0),
        cred95: frac(1),
        cred997: frac(2),
        d_err: trace.iter().map(|r| r.d_err).sum::<f64>() / n,
        n_r: if gated == 0 { 0.0 } else { 100.0 * rejected as f64 / gated as f64 },
        frames: trace.len(),
    })
}

/// Isotropic sigma grid searched by [`tune_constant_sigma`].
pub fn sigma_grid() -> Vec<f64> {
    (0..=300).map(|i| 10f64.powf(-1.0 + 3.0 * i as f64 / 300.0)).collect()
}

/// Isotropic sigma minimizing the average Gaussian NLL of the frames'
/// errors over [`sigma_grid`].
pub fn tune_constant_sigma(frames: &[FrameContext]) -> Result<f64> {
    let sq: Vec<f64> = frames.iter().filter_map(|f| f.car_frame_error()).map(|e| e.norm_squared()).collect();
    if sq.is_empty() {
        return Err(Error::InvalidArgument("no frames with ground truth".into()));
    }
    let mean_sq = sq.iter().sum::<f64>() / sq.len() as f64;
    let nll = |s: f64| mean_sq / (2.0 * s * s) + (2.0 * std::f64::consts::PI * s * s).ln();
    let mut best = (f64::INFINITY, 0.0);
    for s in sigma_grid() {
        let v = nll(s);
        if v < best.0 {
            best = (v, s);
        }
    }
    Ok(best.1)
}

/// Source of per-frame car-frame measurement distributions.
#[derive(Debug, Clone)]
pub enum MeasModel {
    Constant { sigma: f64 },
    Baseline(BaselineModel),
    Kse(KseParams),
    /// The simulator's generating mixture.
    Oracle(ProfileSet),
}

impl MeasModel {
    /// Car-frame mixture with weighted mean at the measured location.
    pub fn predict(&self, rec: &ScenarioRecord) -> Result<GaussMix2> {
        let fc = &rec.frame;
        match self {
            MeasModel::Constant { sigma } => Ok(GaussMix2::single(Gaussian2::isotropic(fc.r_hat, *sigma)?)),
            MeasModel::Baseline(m) => m.predict(fc),
            MeasModel::Kse(p) => predict_measurement(p, fc),
            MeasModel::Oracle(set) => {
                let mix = set.get(&fc.condition)?.oracle_mixture(rec.scale)?;
                Ok(mix.translated(&(fc.r_hat - mix.mean())))
            }
        }
    }

    pub fn is_mixture(&self) -> bool {
        matches!(self, MeasModel::Kse(_) | MeasModel::Oracle(_))
    }
}

/// Per-frame calibration statistics of `model` with `method`.
///
/// `constant`, `baseline` and `gm-condensed` use `d^2` with the condensed
/// covariance; `gm-marginalized` uses [`gm_marginalized_stat`].
pub fn calibration_series(records: &[ScenarioRecord], model: &MeasModel, method: Method) -> Result<CalibrationSeries> {
    let mut values = Vec::with_capacity(records.len());
    for rec in records {
        let fc = &rec.frame;
        let Some(gt) = fc.r_gt else {
            return Err(Error::InvalidArgument("calibration needs ground truth".into()));
        };
        let meas = model.predict(rec)?;
        // car frame: r_gt expressed relative to r_hat
        let gt_car = fc.r_hat + fc.car_frame_error().unwrap_or_else(|| gt - fc.r_hat);
        values.push(match method {
            Method::GmMarginalized => gm_marginalized_stat(&meas, &gt_car)?,
            _ => {
                let c = meas.condense();
                d2_stat(&(gt_car - c.mean()), &c.cov())?
            }
        });
    }
    let condition = records.first().map(|r| r.frame.condition.clone()).unwrap_or_default();
    CalibrationSeries::new(method, condition, values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FilterMode {
    #[serde(rename = "spf")]
    Spf,
    #[serde(rename = "gsf")]
    Gsf,
    #[serde(rename = "spf+gm-gating")]
    SpfGmGating,
}

impl std::str::FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spf" => Ok(FilterMode::Spf),
            "gsf" => Ok(FilterMode::Gsf),
            "spf+gm-gating" => Ok(FilterMode::SpfGmGating),
            _ => Err(Error::InvalidArgument(format!("unknown filter '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOptions {
    pub mode: FilterMode,
    /// Gate confidence; zero disables gating.
    pub alpha: f64,
    pub gsf: GsfConfig,
}

impl FilterOptions {
    pub fn new(mode: FilterMode, alpha: f64) -> Self {
        Self { mode, alpha, gsf: GsfConfig::default() }
    }
}

#[allow(clippy::large_enum_variant)]
enum Belief {
    Single(StateBelief),
    Bank(GsfBelief),
}

/// Runs the filter over time-ordered records, initializing from the first
/// two measurements. One trace row per later record.
pub fn run_filter(records: &[ScenarioRecord], model: &MeasModel, opts: &FilterOptions) -> Result<Vec<TraceRow>> {
    if records.len() < 3 {
        return Err(Error::InvalidArgument("need at least three records".into()));
    }
    if !(opts.alpha == 0.0 || (opts.alpha > 0.0 && opts.alpha < 1.0)) {
        return Err(Error::InvalidArgument(format!("alpha {} must be 0 or in (0, 1)", opts.alpha)));
    }
    let up = UkfParams::default();
    let fix = |rec: &ScenarioRecord| -> Result<Gaussian2> {
        Ok(model.predict(rec)?.rotate_to_inertial(rec.frame.heading).condense())
    };
    let (f0, f1) = (fix(&records[0])?, fix(&records[1])?);
    let init = initial_belief_two_point(&f0.mean(), &f0.cov(), &f1.mean(), &f1.cov(), records[1].t - records[0].t)?;
    let mut belief = match opts.mode {
        FilterMode::Gsf => Belief::Bank(GsfBelief::single(init)),
        _ => Belief::Single(init),
    };
    let gating = opts.alpha > 0.0;
    let mut rows = Vec::with_capacity(records.len() - 1);
    let mut t_prev = records[0].t;
    for rec in &records[1..] {
        let fc = &rec.frame;
        let mp = MotionParams::default_for(rec.t - t_prev)?;
        t_prev = rec.t;
        let meas_car = model.predict(rec)?;
        let z = fc.r_hat;
        let mut accepted = true;
        belief = match belief {
            Belief::Single(b) => {
                let pred = ukf_predict(&b, &mp, &up)?;
                let (post, diag) = spf_update_gm(&pred, &meas_car, fc.heading)?;
                if gating {
                    accepted = if opts.mode == FilterMode::SpfGmGating {
                        let pred_meas = GaussMix2::single(pred.position_marginal()?);
                        gate_gm(&z, &pred_meas, &meas_car.rotate_to_inertial(fc.heading), opts.alpha)?.accepted
                    } else {
                        gate_gaussian(&diag.innovation, &diag.s, opts.alpha)?.accepted
                    };
                }
                Belief::Single(if accepted { post } else { pred })
            }
            Belief::Bank(gb) => {
                let pred = gsf_predict(&gb, &mp, &up)?;
                if gating {
                    let pred_meas = pred.predicted_measurement()?;
                    accepted = gate_gm(&z, &pred_meas, &meas_car.rotate_to_inertial(fc.heading), opts.alpha)?.accepted;
                }
                Belief::Bank(if accepted { gsf_update(&pred, &meas_car, Some(fc.heading), &opts.gsf)?.0 } else { pred })
            }
        };
        let (est, bounds, n_hyp) = match &belief {
            Belief::Single(b) => (b.mean, PositionBounds::Gaussian(b.position_marginal()?), 1),
            Belief::Bank(gb) => (gsf_condense(gb).mean, PositionBounds::Mixture(gb.predicted_measurement()?), gb.len()),
        };
        let gt = rec.state_gt.position();
        rows.push(TraceRow {
            t: rec.t,
            est,
            gt,
            d_err: (est.position() - gt).norm(),
            accepted,
            gated: gating,
            cred: bounds.contains(&gt)?,
            n_hypotheses: n_hyp,
        });
    }
    Ok(rows)
}

/// Measurement model reference inside a pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Constant { sigma: f64 },
    Baseline { path: PathBuf },
    Kse { path: PathBuf, k: Option<usize>, len: Option<usize> },
    Oracle,
}

impl ModelSpec {
    pub fn load(&self, profiles: &ProfileSet) -> Result<MeasModel> {
        Ok(match self {
            ModelSpec::Constant { sigma } => {
                if !(*sigma > 0.0) {
                    return Err(Error::InvalidArgument(format!("constant sigma {sigma} must be positive")));
                }
                MeasModel::Constant { sigma: *sigma }
            }
            ModelSpec::Baseline { path } => MeasModel::Baseline(serde_json::from_reader(open(path)?)?),
            ModelSpec::Kse { path, k, len } => MeasModel::Kse(match (k, len) {
                (Some(k), Some(len)) => KseParams::load_expecting(path, *k, *len)?,
                (Some(k), None) => {
                    let p = KseParams::load(path)?;
                    KseParams::load_expecting(path, *k, p.arch().len)?
                }
                _ => KseParams::load(path)?,
            }),
            ModelSpec::Oracle => MeasModel::Oracle(profiles.clone()),
        })
    }
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    std::fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|e| Error::InvalidArgument(format!("cannot open {}: {e}", path.display())))
}

pub fn load_records(path: &Path) -> Result<Vec<ScenarioRecord>> {
    read_jsonl(open(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub records: PathBuf,
    pub model: ModelSpec,
    pub filter: FilterMode,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default = "default_m_max")]
    pub m_max: usize,
    /// Profile definitions for the oracle model; defaults when absent.
    #[serde(default)]
    pub profiles: Option<PathBuf>,
}

fn default_m_max() -> usize {
    GsfConfig::default().m_max
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub filter: FilterMode,
    pub alpha: f64,
    pub model: String,
    #[serde(flatten)]
    pub credibility: CredibilityReport,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub trace: Vec<TraceRow>,
    pub report: PipelineReport,
    pub series: CalibrationSeries,
}

impl PipelineOutput {
    /// Writes `trace.csv`, `report.json` and `calibration.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut trace = Vec::new();
        write_trace_csv(&self.trace, &mut trace)?;
        std::fs::write(dir.join("trace.csv"), trace)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(&self.report)? + "\n")?;
        let hist = calibration_histogram(&self.series, 50, None)?;
        std::fs::write(dir.join("calibration.csv"), hist.to_csv())?;
        Ok(())
    }
}

pub fn run_records(records: &[ScenarioRecord], model: &MeasModel, opts: &FilterOptions, model_tag: &str) -> Result<PipelineOutput> {
    let trace = run_filter(records, model, opts)?;
    let method = match model {
        MeasModel::Constant { .. } => Method::Constant,
        MeasModel::Baseline(_) => Method::Baseline,
        _ => Method::GmMarginalized,
    };
    Ok(PipelineOutput {
        report: PipelineReport {
            filter: opts.mode,
            alpha: opts.alpha,
            model: model_tag.into(),
            credibility: credibility(&trace)?,
        },
        series: calibration_series(records, model, method)?,
        trace,
    })
}

/// Loads records and model, then filters and scores.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let profiles = match &cfg.profiles {
        Some(p) => ProfileSet::load(p)?,
        None => ProfileSet::default(),
    };
    let model = cfg.model.load(&profiles)?;
    let records = load_records(&cfg.records)?;
    let tag = match &cfg.model {
        ModelSpec::Constant { .. } => "constant",
        ModelSpec::Baseline { .. } => "baseline",
        ModelSpec::Kse { .. } => "kse",
        ModelSpec::Oracle => "oracle",
    };
    let opts = FilterOptions { mode: cfg.filter, alpha: cfg.alpha, gsf: GsfConfig { m_max: cfg.m_max, ..GsfConfig::default() } };
    run_records(&records, &model, &opts, tag)
}
