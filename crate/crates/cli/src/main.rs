use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use gmloc::eval::{
    calibration_histogram, calibration_series, run_pipeline, tune_constant_sigma, FilterMode, MeasModel, Method,
    ModelSpec, PipelineConfig, PipelineReport, CREDIBILITY_LEVELS,
};
use gmloc::kse::baseline::{baseline_fit, BaselineModel};
use gmloc::kse::net::KseParams;
use gmloc::kse::train::{split_indices, train, TrainConfig};
use gmloc::sim::{export_jsonl, simulate, ProfileSet, SimConfig};
use serde::{Deserialize, Serialize};

const RECORDS: &str = "records.jsonl";
const KSE_MODEL: &str = "kse.json";
const BASELINE_MODEL: &str = "baseline.json";
const CONSTANT_MODEL: &str = "constant.json";

#[derive(Parser)]
#[command(name = "gmloc", version, about = "Gaussian-mixture localization uncertainty toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long)]
    seed: Option<u64>,
    /// JSON configuration for the subcommand; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario as JSON lines.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        profile: Option<String>,
        /// Profile definitions (JSON); built-in defaults otherwise.
        #[arg(long)]
        profiles: Option<PathBuf>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        outlier_rate: Option<f64>,
    },
    /// Fit the learned, binned and constant measurement models.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 10)]
        bins: usize,
    },
    /// Calibration histograms of the four uncertainty methods.
    EvalUq {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        records: PathBuf,
        /// Directory written by `train`.
        #[arg(long)]
        models: PathBuf,
        #[arg(long, default_value_t = 60)]
        bins: usize,
    },
    /// Run a filter over recorded measurements.
    Filter {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        records: Option<PathBuf>,
        /// Directory written by `train`.
        #[arg(long)]
        models: Option<PathBuf>,
        /// constant, baseline, kse or oracle.
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        filter: Option<FilterMode>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Collect every report.json below --out-dir into one table.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_profiles(path: Option<&Path>) -> Result<ProfileSet> {
    Ok(match path {
        Some(p) => ProfileSet::load(p).with_context(|| format!("loading profiles {}", p.display()))?,
        None => ProfileSet::default(),
    })
}

#[derive(Serialize, Deserialize)]
struct ConstantModel {
    sigma: f64,
}

fn cmd_simulate(
    common: &Common,
    profile: Option<String>,
    profiles: Option<PathBuf>,
    duration: Option<f64>,
    dt: Option<f64>,
    outlier_rate: Option<f64>,
) -> Result<()> {
    let mut cfg: SimConfig = match &common.config {
        Some(p) => read_json(p)?,
        None => SimConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = profile {
        cfg.profile = p;
    }
    if let Some(d) = duration {
        cfg.duration = d;
    }
    if let Some(d) = dt {
        cfg.dt = d;
    }
    if outlier_rate.is_some() {
        cfg.outlier_rate = outlier_rate;
    }
    let set = load_profiles(profiles.as_deref())?;
    let records = simulate(&cfg, &set)?;
    fs::create_dir_all(&common.out_dir)?;
    let path = common.out_dir.join(RECORDS);
    export_jsonl(&records, BufWriter::new(fs::File::create(&path)?))?;
    write_json(&common.out_dir.join("simulate.json"), &cfg)?;
    println!("wrote {} records to {}", records.len(), path.display());
    Ok(())
}

fn cmd_train(common: &Common, records: &Path, k: Option<usize>, epochs: Option<usize>, bins: usize) -> Result<()> {
    let mut cfg: TrainConfig = match &common.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(k) = k {
        cfg.k = k;
    }
    if let Some(e) = epochs {
        cfg.max_epochs = e;
    }
    let recs = gmloc::eval::load_records(records)?;
    let frames: Vec<_> = recs.into_iter().map(|r| r.frame).collect();
    fs::create_dir_all(&common.out_dir)?;

    let outcome = train(&frames, &cfg)?;
    outcome.params.save(&common.out_dir.join(KSE_MODEL))?;
    let mut curve = String::from("epoch,train_nll,val_nll\n");
    for e in &outcome.curve {
        curve.push_str(&format!("{},{},{}\n", e.epoch, e.train_nll, e.val_nll));
    }
    fs::write(common.out_dir.join("curve.csv"), curve)?;

    let (train_idx, val_idx) = split_indices(frames.len(), cfg.val_fraction, cfg.seed);
    let pick = |idx: &[usize]| idx.iter().map(|&i| frames[i].clone()).collect::<Vec<_>>();
    let val = if val_idx.is_empty() { pick(&train_idx) } else { pick(&val_idx) };
    write_json(&common.out_dir.join(CONSTANT_MODEL), &ConstantModel { sigma: tune_constant_sigma(&val)? })?;
    write_json(&common.out_dir.join(BASELINE_MODEL), &baseline_fit(&pick(&train_idx), bins)?)?;
    write_json(&common.out_dir.join("train.json"), &cfg)?;
    let best = &outcome.curve[outcome.best_epoch];
    println!("best epoch {} validation NLL {:.4}", best.epoch, best.val_nll);
    Ok(())
}

fn load_models(dir: &Path) -> Result<[(Method, MeasModel); 4]> {
    let constant: ConstantModel = read_json(&dir.join(CONSTANT_MODEL))?;
    let baseline: BaselineModel = read_json(&dir.join(BASELINE_MODEL))?;
    let kse = KseParams::load(&dir.join(KSE_MODEL)).with_context(|| format!("loading {}", dir.join(KSE_MODEL).display()))?;
    Ok([
        (Method::Constant, MeasModel::Constant { sigma: constant.sigma }),
        (Method::Baseline, MeasModel::Baseline(baseline)),
        (Method::GmCondensed, MeasModel::Kse(kse.clone())),
        (Method::GmMarginalized, MeasModel::Kse(kse)),
    ])
}

#[derive(Serialize)]
struct UqSummary {
    method: Method,
    condition: String,
    frames: usize,
    p65: f64,
    p95: f64,
    p99: f64,
    coverage683: f64,
    coverage954: f64,
    coverage997: f64,
}

fn cmd_eval_uq(common: &Common, records: &Path, models: &Path, bins: usize) -> Result<()> {
    let recs = gmloc::eval::load_records(records)?;
    fs::create_dir_all(&common.out_dir)?;
    let mut summary = Vec::new();
    for (method, model) in load_models(models)? {
        let series = calibration_series(&recs, &model, method)?;
        let hist = calibration_histogram(&series, bins, None)?;
        fs::write(common.out_dir.join(format!("hist_{}.csv", method.tag())), hist.to_csv())?;
        fs::write(common.out_dir.join(format!("hist_{}.svg", method.tag())), hist.to_svg())?;
        let [c1, c2, c3] = CREDIBILITY_LEVELS.map(|l| series.coverage(l));
        summary.push(UqSummary {
            method,
            condition: series.condition.clone(),
            frames: series.values.len(),
            p65: hist.percentiles[0],
            p95: hist.percentiles[1],
            p99: hist.percentiles[2],
            coverage683: c1?,
            coverage954: c2?,
            coverage997: c3?,
        });
    }
    write_json(&common.out_dir.join("uq_summary.json"), &summary)?;
    for s in &summary {
        println!(
            "{:<16} p65 {:>8.3} p95 {:>8.3} p99 {:>8.3} coverage95.4 {:.3}",
            s.method.tag(),
            s.p65,
            s.p95,
            s.p99,
            s.coverage954
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_filter(
    common: &Common,
    records: Option<PathBuf>,
    models: Option<PathBuf>,
    model: Option<String>,
    filter: Option<FilterMode>,
    alpha: Option<f64>,
    k: Option<usize>,
) -> Result<()> {
    let mut cfg: PipelineConfig = match &common.config {
        Some(p) => read_json(p)?,
        None => {
            let Some(records) = records.clone() else {
                bail!("either --config or --records is required");
            };
            PipelineConfig {
                records,
                model: ModelSpec::Oracle,
                filter: FilterMode::Spf,
                alpha: 0.0,
                m_max: 6,
                profiles: None,
            }
        }
    };
    if let Some(r) = records {
        cfg.records = r;
    }
    if let Some(kind) = model {
        let dir = models.clone().unwrap_or_else(|| PathBuf::from("."));
        cfg.model = match kind.as_str() {
            "constant" => ModelSpec::Constant { sigma: read_json::<ConstantModel>(&dir.join(CONSTANT_MODEL))?.sigma },
            "baseline" => ModelSpec::Baseline { path: dir.join(BASELINE_MODEL) },
            "kse" => ModelSpec::Kse { path: dir.join(KSE_MODEL), k, len: None },
            "oracle" => ModelSpec::Oracle,
            other => bail!("unknown model '{other}'"),
        };
    }
    if let Some(f) = filter {
        cfg.filter = f;
    }
    if let Some(a) = alpha {
        cfg.alpha = a;
    }
    let out = run_pipeline(&cfg)?;
    out.write(&common.out_dir)?;
    write_json(&common.out_dir.join("pipeline.json"), &cfg)?;
    let c = &out.report.credibility;
    println!(
        "d_err {:.3} m  cred68 {:.1}%  cred95 {:.1}%  cred997 {:.1}%  n_r {:.2}%",
        c.d_err,
        100.0 * c.cred68,
        100.0 * c.cred95,
        100.0 * c.cred997,
        c.n_r
    );
    Ok(())
}

fn find_reports(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_reports(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == "report.json") {
            found.push(p);
        }
    }
    Ok(())
}

fn cmd_report(common: &Common) -> Result<()> {
    let mut paths = Vec::new();
    find_reports(&common.out_dir, &mut paths)?;
    if paths.is_empty() {
        bail!("no report.json below {}", common.out_dir.display());
    }
    let mut table = String::from("run,model,filter,alpha,d_err,cred68,cred95,cred997,n_r,frames\n");
    for p in &paths {
        let r: PipelineReport = read_json(p)?;
        let run = p.parent().and_then(|d| d.strip_prefix(&common.out_dir).ok()).map(|d| d.display().to_string());
        let filter = serde_json::to_value(r.filter)?;
        let c = &r.credibility;
        table.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            run.unwrap_or_default(),
            r.model,
            filter.as_str().unwrap_or_default(),
            r.alpha,
            c.d_err,
            c.cred68,
            c.cred95,
            c.cred997,
            c.n_r,
            c.frames
        ));
    }
    fs::write(common.out_dir.join("table.csv"), &table)?;
    print!("{table}");
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate { common, profile, profiles, duration, dt, outlier_rate } => {
            cmd_simulate(&common, profile, profiles, duration, dt, outlier_rate)
        }
        Command::Train { common, records, k, epochs, bins } => cmd_train(&common, &records, k, epochs, bins),
        Command::EvalUq { common, records, models, bins } => cmd_eval_uq(&common, &records, &models, bins),
        Command::Filter { common, records, models, model, filter, alpha, k } => {
            cmd_filter(&common, records, models, model, filter, alpha, k)
        }
        Command::Report { common } => cmd_report(&common),
    }
}
