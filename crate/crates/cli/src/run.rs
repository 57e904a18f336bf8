//! The subcommands as library calls returning structured results.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mtct_core::checkpoint::Checkpoint;
use mtct_core::data::{generate_dataset, generate_heldout, Dataset, Domain};
use mtct_core::gradsuite::{run_gradsuite, GradSuiteOptions, GradSuiteReport};
use mtct_core::metrics::{evaluate_report, MetricsReport, RunMeta};
use mtct_core::trainer::{run_stage1, train_regime_with, RegimeOutcome, Stage1Outcome, TrainData, TrainRegime};
use mtct_core::AttributeSchema;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const TRAIN_INDEX: &str = "train.idx";
pub const TRAIN_BLOB: &str = "train.bin";
pub const HELDOUT_INDEX: &str = "heldout.idx";
pub const HELDOUT_BLOB: &str = "heldout.bin";
pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG_ECHO: &str = "config.txt";
pub const RECORD: &str = "record.log";

/// Label of the MTCT run trained with the ranking loss in comparisons.
pub const RANKING_LABEL: &str = "MTCT-RANK";

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Resolves the run directory, creates it and writes the config echo.
pub fn prepare_run_dir(cfg: &ExperimentConfig, command: &str) -> Result<PathBuf> {
    let dir = match &cfg.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S%.3f");
            cfg.output_root.join(format!("{command}-{stamp}-seed{}", cfg.seed()))
        }
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write_file(&dir.join(CONFIG_ECHO), format!("# command {command}\n{}", cfg.to_text()))?;
    Ok(dir)
}

/// Identifies a generated dataset by its seed and sizes.
pub fn dataset_id(cfg: &ExperimentConfig) -> String {
    let d = &cfg.data;
    format!("synth-s{}-{}x{}x{}", cfg.seed(), d.n_source, d.n_target, d.n_pairs)
}

/// Training split and held-out split for the config's seed.
pub fn generate_splits(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let schema = AttributeSchema::desk_default();
    let spec = cfg.data_spec();
    let train = generate_dataset(&schema, &spec)?;
    let heldout = generate_heldout(&schema, &spec, &cfg.heldout)?;
    Ok((train, heldout))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenDataOutcome {
    pub dir: PathBuf,
    pub dataset_id: String,
    pub train_samples: usize,
    pub heldout_samples: usize,
}

/// Writes both splits and a manifest into `dir`.
pub fn gen_data(cfg: &ExperimentConfig, dir: &Path) -> Result<GenDataOutcome> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let (train, heldout) = generate_splits(cfg)?;
    train.write(&dir.join(TRAIN_INDEX), &dir.join(TRAIN_BLOB))?;
    heldout.write(&dir.join(HELDOUT_INDEX), &dir.join(HELDOUT_BLOB))?;
    let id = dataset_id(cfg);
    let d = &cfg.data;
    let manifest = format!(
        "dataset_id={id}\nseed={}\nn_source={}\nn_target={}\nn_pairs={}\nheldout_target={}\nheldout_pairs={}\nimage_size={}\ntrain_samples={}\nheldout_samples={}\n",
        cfg.seed(),
        train.count(Domain::Source),
        train.count(Domain::Target),
        train.pair_count(),
        heldout.count(Domain::Target),
        heldout.pair_count(),
        d.image_size,
        train.len(),
        heldout.len(),
    );
    write_file(&dir.join(MANIFEST), manifest)?;
    Ok(GenDataOutcome { dir: dir.to_path_buf(), dataset_id: id, train_samples: train.len(), heldout_samples: heldout.len() })
}

/// `key=value` lines of a manifest.
pub fn read_manifest(dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(text.lines().filter_map(|l| l.split_once('=')).map(|(k, v)| (k.to_string(), v.to_string())).collect())
}

fn data_dir(cfg: &ExperimentConfig) -> Result<&Path> {
    cfg.data_dir.as_deref().ok_or_else(|| CliError::usage("data_dir is required (run gen-data first)"))
}

fn read_split(dir: &Path, index: &str, blob: &str) -> Result<Dataset> {
    Ok(Dataset::read(&dir.join(index), &dir.join(blob))?)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub outcome: RegimeOutcome,
    pub checkpoint_paths: Vec<PathBuf>,
}

/// Trains `cfg.regime` on the dataset in `data_dir`, writing checkpoints
/// and appending the run record under `run_dir`.
pub fn train(cfg: &ExperimentConfig, run_dir: &Path) -> Result<TrainOutcome> {
    let dir = data_dir(cfg)?;
    let train = read_split(dir, TRAIN_INDEX, TRAIN_BLOB)?;
    let heldout = if dir.join(HELDOUT_INDEX).exists() { Some(read_split(dir, HELDOUT_INDEX, HELDOUT_BLOB)?) } else { None };
    let data = TrainData { train: &train, heldout: heldout.as_ref() };
    let mut outcome = train_regime_with(cfg.regime, &data, &cfg.model_config()?, &cfg.hyperparameters(), None)?;
    let mut checkpoint_paths = Vec::new();
    for c in &outcome.checkpoints {
        let path = run_dir.join(format!("{}.ckpt", c.stage));
        c.save(&path)?;
        checkpoint_paths.push(path);
    }
    outcome.record.checkpoint = Some("final.ckpt".to_string());
    let mut log = cfg.to_text().lines().map(|l| format!("config {l}\n")).collect::<String>();
    log.push_str(&outcome.record.to_lines());
    append(&run_dir.join(RECORD), &log)?;
    Ok(TrainOutcome { outcome, checkpoint_paths })
}

fn append(path: &Path, text: &str) -> Result<()> {
    use std::io::Write;
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e))
}

/// Evaluates `checkpoint` on the held-out target images in `data_dir` and
/// writes `report.csv` and `report.txt` under `run_dir`.
pub fn eval(cfg: &ExperimentConfig, run_dir: &Path) -> Result<MetricsReport> {
    let dir = data_dir(cfg)?;
    let ckpt = cfg.checkpoint.as_deref().ok_or_else(|| CliError::usage("checkpoint is required"))?;
    let checkpoint = Checkpoint::load(ckpt)?;
    let test = read_split(dir, HELDOUT_INDEX, HELDOUT_BLOB)?.domain_subset(Domain::Target);
    let manifest = read_manifest(dir)?;
    let id = manifest.get("dataset_id").cloned().unwrap_or_else(|| "unknown".to_string());
    let meta = RunMeta { regime: cfg.regime.to_string(), seed: cfg.seed(), dataset_id: id };
    let report = evaluate_report(&checkpoint.model, &test, cfg.threshold, meta)?;
    write_file(&run_dir.join("report.csv"), report.to_csv())?;
    write_file(&run_dir.join("report.txt"), report.to_table())?;
    Ok(report)
}

/// Stage-1 runs shared between regimes, fractions and commands, keyed by
/// the data spec that produced their source images.
#[derive(Default)]
pub struct Stage1Cache {
    runs: BTreeMap<String, Stage1Outcome>,
}

impl Stage1Cache {
    pub fn new() -> Self {
        Stage1Cache::default()
    }

    fn get(&mut self, cfg: &ExperimentConfig, train: &Dataset) -> Result<&Stage1Outcome> {
        let h = &cfg.hyper;
        let key = format!(
            "{:?}|{:?}|{} {} {} {} {} {}",
            cfg.data_spec(),
            cfg.model_config()?,
            h.momentum,
            h.weight_decay,
            h.batch_size,
            h.lr_stage1,
            h.epochs_stage1,
            h.seed
        );
        if !self.runs.contains_key(&key) {
            let s1 = run_stage1(train, &cfg.model_config()?, &cfg.hyperparameters())?;
            self.runs.insert(key.clone(), s1);
        }
        Ok(&self.runs[&key])
    }
}

/// One trained and evaluated (regime, seed) cell.
#[derive(Debug)]
pub struct RegimeRun {
    pub label: String,
    pub seed: u64,
    /// Target fraction in percent.
    pub fraction: u32,
    pub report: MetricsReport,
    /// Held-out triplet satisfaction (%) before and after Stage-2.
    pub satisfaction: Option<(f64, f64)>,
    pub elapsed_s: f64,
    pub outcome: RegimeOutcome,
    /// The Stage-1 network the run started from, for regimes that have one.
    pub stage1: Option<Checkpoint>,
}

fn run_one(
    label: &str,
    regime: TrainRegime,
    cfg: &ExperimentConfig,
    ranking: bool,
    splits: (&Dataset, &Dataset),
    fraction: u32,
    cache: &mut Stage1Cache,
) -> Result<RegimeRun> {
    let (train, heldout) = splits;
    let started = Instant::now();
    let hyper = if ranking { cfg.ranking_hyperparameters() } else { cfg.hyperparameters() };
    let s1 = if regime.uses_stage1() { Some(cache.get(cfg, train)?) } else { None };
    let data = TrainData { train, heldout: Some(heldout) };
    let outcome = train_regime_with(regime, &data, &cfg.model_config()?, &hyper, s1)?;
    let test = heldout.domain_subset(Domain::Target);
    let meta = RunMeta { regime: label.to_string(), seed: cfg.seed(), dataset_id: dataset_id(cfg) };
    let report = evaluate_report(&outcome.model, &test, cfg.threshold, meta)?;
    let satisfaction = outcome.record.stages.iter().find_map(|s| s.triplet_satisfaction);
    let stage1 = s1.map(|s| Checkpoint::new("stage1", s.model.clone())).transpose()?;
    let elapsed_s = started.elapsed().as_secs_f64();
    eprintln!("{label:>10} seed {} fraction {fraction:>3}%  mAP {:6.2}  {:7.1}s", cfg.seed(), report.map_cls, elapsed_s);
    Ok(RegimeRun { label: label.to_string(), seed: cfg.seed(), fraction, report, satisfaction, elapsed_s, outcome, stage1 })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// A regime aggregated over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub label: String,
    pub map: (f64, f64),
    pub mp: (f64, f64),
    pub mr: (f64, f64),
    /// Mean held-out triplet satisfaction gain over Stage-2, in points.
    pub satisfaction_gain: Option<f64>,
    pub runs: usize,
}

#[derive(Debug)]
pub struct CompareOutcome {
    pub runs: Vec<RegimeRun>,
    /// Sorted by mean mAP, best first.
    pub rows: Vec<CompareRow>,
    pub elapsed_s: f64,
}

impl CompareOutcome {
    pub fn row(&self, label: &str) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn runs_of<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a RegimeRun> + 'a {
        self.runs.iter().filter(move |r| r.label == label)
    }
}

fn compare_rows(runs: &[RegimeRun], labels: &[String]) -> Vec<CompareRow> {
    let mut rows: Vec<CompareRow> = labels
        .iter()
        .map(|label| {
            let mine: Vec<&RegimeRun> = runs.iter().filter(|r| &r.label == label).collect();
            let col = |f: fn(&MetricsReport) -> f64| mean_std(&mine.iter().map(|r| f(&r.report)).collect::<Vec<_>>());
            let gains: Vec<f64> = mine.iter().filter_map(|r| r.satisfaction.map(|(a, b)| b - a)).collect();
            CompareRow {
                label: label.clone(),
                map: col(|r| r.map_cls),
                mp: col(|r| r.mp_ins),
                mr: col(|r| r.mr_ins),
                satisfaction_gain: (!gains.is_empty()).then(|| mean_std(&gains).0),
                runs: mine.len(),
            }
        })
        .collect();
    rows.sort_by(|a, b| b.map.0.total_cmp(&a.map.0).then_with(|| a.label.cmp(&b.label)));
    rows
}

/// Aligned table sorted by mAP with a delta column against NOADPT.
pub fn compare_table(rows: &[CompareRow]) -> String {
    let base = rows.iter().find(|r| r.label == TrainRegime::NoAdpt.name()).map(|r| r.map.0);
    let mut out = format!(
        "{:<10} {:>16} {:>14} {:>16} {:>16} {:>9} {:>5}\n",
        "regime", "mAP_cls", "delta_NOADPT", "mP_ins", "mR_ins", "sat_gain", "runs"
    );
    let pm = |(m, s): (f64, f64)| format!("{m:.2} +/- {s:.2}");
    for r in rows {
        let delta = base.map_or("-".to_string(), |b| format!("{:+.2}", r.map.0 - b));
        let gain = r.satisfaction_gain.map_or("-".to_string(), |g| format!("{g:+.1}"));
        let _ = writeln!(
            out,
            "{:<10} {:>16} {:>14} {:>16} {:>16} {:>9} {:>5}",
            r.label,
            pm(r.map),
            delta,
            pm(r.mp),
            pm(r.mr),
            gain,
            r.runs
        );
    }
    out
}

/// One line per run: label, seed, fraction, metrics and satisfaction.
pub fn runs_csv(runs: &[RegimeRun]) -> String {
    let mut out = String::from("regime,seed,fraction,mAP_cls,mP_ins,mR_ins,sat_start,sat_end\n");
    for r in runs {
        let (a, b) = r.satisfaction.map_or(("".to_string(), "".to_string()), |(a, b)| (format!("{a:.4}"), format!("{b:.4}")));
        let _ = writeln!(
            out,
            "{},{},{},{:.4},{:.4},{:.4},{a},{b}",
            r.label, r.seed, r.fraction, r.report.map_cls, r.report.mp_ins, r.report.mr_ins
        );
    }
    out
}

fn write_records(run_dir: &Path, cfg: &ExperimentConfig, runs: &[RegimeRun]) -> Result<()> {
    let mut log = cfg.to_text().lines().map(|l| format!("config {l}\n")).collect::<String>();
    for r in runs {
        let _ = writeln!(log, "run label={} fraction={}", r.label, r.fraction);
        log.push_str(&r.outcome.record.to_lines());
    }
    append(&run_dir.join(RECORD), &log)
}

/// Runs every regime (and optionally MTCT with the ranking loss) for each
/// seed in `cfg.seeds` on freshly generated data, then writes
/// `compare.txt`, `compare.csv` and the run records under `run_dir`.
pub fn compare(cfg: &ExperimentConfig, run_dir: &Path, cache: &mut Stage1Cache) -> Result<CompareOutcome> {
    let started = Instant::now();
    let mut labels: Vec<String> = TrainRegime::ALL.iter().map(|r| r.name().to_string()).collect();
    if cfg.with_ranking {
        labels.push(RANKING_LABEL.to_string());
    }
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let c = cfg.with_seed(seed);
        let (train, heldout) = generate_splits(&c)?;
        for regime in TrainRegime::ALL {
            runs.push(run_one(regime.name(), regime, &c, false, (&train, &heldout), 100, cache)?);
        }
        if cfg.with_ranking {
            runs.push(run_one(RANKING_LABEL, TrainRegime::Mtct, &c, true, (&train, &heldout), 100, cache)?);
        }
    }
    let rows = compare_rows(&runs, &labels);
    write_file(&run_dir.join("compare.txt"), compare_table(&rows))?;
    write_file(&run_dir.join("compare.csv"), runs_csv(&runs))?;
    write_records(run_dir, cfg, &runs)?;
    Ok(CompareOutcome { runs, rows, elapsed_s: started.elapsed().as_secs_f64() })
}

/// Mean mAP of one regime at one fraction.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub label: String,
    pub fraction: u32,
    pub map: (f64, f64),
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub runs: Vec<RegimeRun>,
    pub cells: Vec<SweepCell>,
    pub fractions: Vec<u32>,
    pub labels: Vec<String>,
}

impl SweepOutcome {
    /// Seed-mean mAP per fraction, in `fractions` order.
    pub fn curve(&self, label: &str) -> Vec<f64> {
        self.fractions
            .iter()
            .filter_map(|f| self.cells.iter().find(|c| c.label == label && c.fraction == *f).map(|c| c.map.0))
            .collect()
    }

    /// Per-seed mAP per fraction, in `fractions` order.
    pub fn seed_curve(&self, label: &str, seed: u64) -> Vec<f64> {
        self.fractions
            .iter()
            .filter_map(|f| self.runs.iter().find(|r| r.label == label && r.seed == seed && r.fraction == *f).map(|r| r.report.map_cls))
            .collect()
    }

    /// Drop from the first to the last fraction of the seed-mean curve.
    pub fn drop(&self, label: &str) -> f64 {
        let c = self.curve(label);
        c.first().copied().unwrap_or(0.0) - c.last().copied().unwrap_or(0.0)
    }
}

/// Table with one row per regime, one column per fraction and the drop.
pub fn sweep_table(s: &SweepOutcome) -> String {
    let mut out = format!("{:<10}", "regime");
    for f in &s.fractions {
        let _ = write!(out, " {:>9}", format!("{f}%"));
    }
    out.push_str(&format!(" {:>8}\n", "drop"));
    for label in &s.labels {
        let _ = write!(out, "{label:<10}");
        for v in s.curve(label) {
            let _ = write!(out, " {v:>9.2}");
        }
        let _ = writeln!(out, " {:>8.2}", s.drop(label));
    }
    out
}

/// Subsamples the target training split to each fraction (seeded, nested)
/// and trains `cfg.sweep_regimes` on it for every seed.
pub fn sweep(cfg: &ExperimentConfig, run_dir: &Path, cache: &mut Stage1Cache) -> Result<SweepOutcome> {
    let labels: Vec<String> = cfg.sweep_regimes.iter().map(|r| r.name().to_string()).collect();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let c = cfg.with_seed(seed);
        let (train, heldout) = generate_splits(&c)?;
        for &fraction in &cfg.fractions {
            let sub = train.subsample_target(fraction as f64 / 100.0, seed)?;
            for &regime in &cfg.sweep_regimes {
                runs.push(run_one(regime.name(), regime, &c, false, (&sub, &heldout), fraction, cache)?);
            }
        }
    }
    let mut cells = Vec::new();
    for label in &labels {
        for &fraction in &cfg.fractions {
            let v: Vec<f64> = runs.iter().filter(|r| &r.label == label && r.fraction == fraction).map(|r| r.report.map_cls).collect();
            cells.push(SweepCell { label: label.clone(), fraction, map: mean_std(&v) });
        }
    }
    let outcome = SweepOutcome { runs, cells, fractions: cfg.fractions.clone(), labels };
    write_file(&run_dir.join("sweep.txt"), sweep_table(&outcome))?;
    write_file(&run_dir.join("sweep.csv"), runs_csv(&outcome.runs))?;
    write_records(run_dir, cfg, &outcome.runs)?;
    Ok(outcome)
}

/// Runs the gradient-check suite and writes its table under `run_dir`.
/// `inject_fault` corrupts one named check's analytic gradient.
pub fn gradcheck(cfg: &ExperimentConfig, run_dir: &Path, inject_fault: Option<String>) -> Result<GradSuiteReport> {
    let opts = GradSuiteOptions {
        points: cfg.grad_points,
        tolerance: cfg.grad_tolerance,
        step: cfg.grad_step,
        seed: cfg.seed(),
        inject_fault,
    };
    let report = run_gradsuite(&opts)?;
    write_file(&run_dir.join("gradcheck.txt"), report.to_table())?;
    Ok(report)
}
