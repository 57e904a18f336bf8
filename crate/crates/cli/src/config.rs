//! Plain-text `key=value` experiment configuration.
//!
//! Values resolve in order: built-in defaults, then a config file, then
//! `--set` overrides and dedicated flags. Every key is echoed back by
//! [`ExperimentConfig::to_text`], defaults included.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mtct_core::data::{DataSpec, HeldoutSpec};
use mtct_core::model::TrunkConfig;
use mtct_core::trainer::{Hyperparameters, ModelConfig, TrainRegime, TripletLossKind};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripletChoice {
    Tste,
    Ranking,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub heldout: HeldoutSpec,
    pub trunk_widths: [usize; 5],
    pub hidden: (usize, usize),
    pub hyper: Hyperparameters,
    pub triplet_loss: TripletChoice,
    pub ranking_margin: f64,
    /// Triplet weight used in place of `lambda_tste` when the ranking loss is selected.
    pub ranking_lambda: f64,
    pub regime: TrainRegime,
    pub seeds: Vec<u64>,
    /// Adds an MTCT run with the ranking loss to `compare`.
    pub with_ranking: bool,
    /// Target fractions for `sweep`, in percent.
    pub fractions: Vec<u32>,
    pub sweep_regimes: Vec<TrainRegime>,
    pub threshold: f64,
    pub grad_points: usize,
    pub grad_tolerance: f64,
    pub grad_step: f64,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_root: PathBuf,
    /// Fixed run directory; when unset one is created under `output_root`.
    pub run_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let hyper = Hyperparameters::default();
        ExperimentConfig {
            data: DataSpec::default(),
            heldout: HeldoutSpec::default(),
            trunk_widths: [16, 32, 64, 64, 64],
            hidden: ModelConfig::default().hidden,
            triplet_loss: TripletChoice::Tste,
            ranking_margin: 100.0,
            ranking_lambda: 0.01,
            regime: TrainRegime::Mtct,
            seeds: vec![1, 2, 3],
            with_ranking: true,
            fractions: vec![100, 75, 50, 10],
            sweep_regimes: vec![TrainRegime::NoAdpt, TrainRegime::Ftt, TrainRegime::Mtct],
            threshold: 0.5,
            grad_points: 20,
            grad_tolerance: 1e-4,
            grad_step: 1e-5,
            data_dir: None,
            checkpoint: None,
            output_root: PathBuf::from("runs"),
            run_dir: None,
            hyper,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.trim().parse().map_err(|_| CliError::usage(format!("bad value {value:?} for key {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').filter(|v| !v.trim().is_empty()).map(|v| parse(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::usage(format!("bad value {value:?} for key {key}, expected true or false"))),
    }
}

fn parse_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl ExperimentConfig {
    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let h = &self.hyper;
        vec![
            ("n_source", d.n_source.to_string()),
            ("n_target", d.n_target.to_string()),
            ("n_pairs", d.n_pairs.to_string()),
            ("missing_rate", d.missing_rate.to_string()),
            ("image_size", d.image_size.to_string()),
            ("max_clutter", d.noise.max_clutter.to_string()),
            ("jitter", d.noise.jitter.to_string()),
            ("brightness_min", d.noise.brightness_min.to_string()),
            ("brightness_max", d.noise.brightness_max.to_string()),
            ("noise_std", d.noise.noise_std.to_string()),
            ("occlusion_prob", d.noise.occlusion_prob.to_string()),
            ("heldout_target", self.heldout.n_target.to_string()),
            ("heldout_pairs", self.heldout.n_pairs.to_string()),
            ("trunk_widths", join(&self.trunk_widths)),
            ("hidden", format!("{},{}", self.hidden.0, self.hidden.1)),
            ("regime", self.regime.to_string()),
            ("seed", h.seed.to_string()),
            ("batch_size", h.batch_size.to_string()),
            ("momentum", h.momentum.to_string()),
            ("weight_decay", h.weight_decay.to_string()),
            ("lr_stage1", h.lr_stage1.to_string()),
            ("lr_finetune", h.lr_finetune.to_string()),
            ("epochs_stage1", h.epochs_stage1.to_string()),
            ("epochs_stage2", h.epochs_stage2.to_string()),
            ("tste_alpha", h.tste_alpha.to_string()),
            ("lambda_src", h.lambda_src.to_string()),
            ("lambda_tste", h.lambda_tste.to_string()),
            ("triplet_loss", if self.triplet_loss == TripletChoice::Tste { "tste" } else { "ranking" }.to_string()),
            ("ranking_margin", self.ranking_margin.to_string()),
            ("ranking_lambda", self.ranking_lambda.to_string()),
            ("hard_negatives", h.hard_negatives.to_string()),
            ("seeds", join(&self.seeds)),
            ("with_ranking", self.with_ranking.to_string()),
            ("fractions", join(&self.fractions)),
            ("sweep_regimes", join(&self.sweep_regimes)),
            ("threshold", self.threshold.to_string()),
            ("grad_points", self.grad_points.to_string()),
            ("grad_tolerance", self.grad_tolerance.to_string()),
            ("grad_step", self.grad_step.to_string()),
            ("data_dir", show_path(&self.data_dir)),
            ("checkpoint", show_path(&self.checkpoint)),
            ("output_root", self.output_root.display().to_string()),
            ("run_dir", show_path(&self.run_dir)),
        ]
    }

    pub fn keys() -> Vec<&'static str> {
        ExperimentConfig::default().entries().into_iter().map(|(k, _)| k).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.data;
        let h = &mut self.hyper;
        match key {
            "n_source" => d.n_source = parse(key, value)?,
            "n_target" => d.n_target = parse(key, value)?,
            "n_pairs" => d.n_pairs = parse(key, value)?,
            "missing_rate" => d.missing_rate = parse(key, value)?,
            "image_size" => d.image_size = parse(key, value)?,
            "max_clutter" => d.noise.max_clutter = parse(key, value)?,
            "jitter" => d.noise.jitter = parse(key, value)?,
            "brightness_min" => d.noise.brightness_min = parse(key, value)?,
            "brightness_max" => d.noise.brightness_max = parse(key, value)?,
            "noise_std" => d.noise.noise_std = parse(key, value)?,
            "occlusion_prob" => d.noise.occlusion_prob = parse(key, value)?,
            "heldout_target" => self.heldout.n_target = parse(key, value)?,
            "heldout_pairs" => self.heldout.n_pairs = parse(key, value)?,
            "trunk_widths" => {
                let w: Vec<usize> = parse_list(key, value)?;
                self.trunk_widths = w.try_into().map_err(|_| CliError::usage("trunk_widths needs five comma-separated widths"))?;
            }
            "hidden" => match parse_list::<usize>(key, value)?[..] {
                [a, b] => self.hidden = (a, b),
                _ => return Err(CliError::usage("hidden needs two comma-separated widths")),
            },
            "regime" => self.regime = value.trim().parse().map_err(|e| CliError::usage(format!("{e}")))?,
            "seed" => h.seed = parse(key, value)?,
            "batch_size" => h.batch_size = parse(key, value)?,
            "momentum" => h.momentum = parse(key, value)?,
            "weight_decay" => h.weight_decay = parse(key, value)?,
            "lr_stage1" => h.lr_stage1 = parse(key, value)?,
            "lr_finetune" => h.lr_finetune = parse(key, value)?,
            "epochs_stage1" => h.epochs_stage1 = parse(key, value)?,
            "epochs_stage2" => h.epochs_stage2 = parse(key, value)?,
            "tste_alpha" => h.tste_alpha = parse(key, value)?,
            "lambda_src" => h.lambda_src = parse(key, value)?,
            "lambda_tste" => h.lambda_tste = parse(key, value)?,
            "triplet_loss" => {
                self.triplet_loss = match value.trim() {
                    "tste" => TripletChoice::Tste,
                    "ranking" => TripletChoice::Ranking,
                    _ => return Err(CliError::usage(format!("bad triplet_loss {value:?}, expected tste or ranking"))),
                }
            }
            "ranking_margin" => self.ranking_margin = parse(key, value)?,
            "ranking_lambda" => self.ranking_lambda = parse(key, value)?,
            "hard_negatives" => h.hard_negatives = parse_bool(key, value)?,
            "seeds" => self.seeds = parse_list(key, value)?,
            "with_ranking" => self.with_ranking = parse_bool(key, value)?,
            "fractions" => self.fractions = parse_list(key, value)?,
            "sweep_regimes" => {
                self.sweep_regimes = value
                    .split(',')
                    .filter(|v| !v.trim().is_empty())
                    .map(|v| v.trim().parse().map_err(|e| CliError::usage(format!("{e}"))))
                    .collect::<Result<_>>()?
            }
            "threshold" => self.threshold = parse(key, value)?,
            "grad_points" => self.grad_points = parse(key, value)?,
            "grad_tolerance" => self.grad_tolerance = parse(key, value)?,
            "grad_step" => self.grad_step = parse(key, value)?,
            "data_dir" => self.data_dir = parse_path(value),
            "checkpoint" => self.checkpoint = parse_path(value),
            "output_root" => {
                self.output_root = parse_path(value).ok_or_else(|| CliError::usage("output_root must not be empty"))?
            }
            "run_dir" => self.run_dir = parse_path(value),
            _ => return Err(CliError::usage(format!("unknown config key {key:?}; known keys: {}", ExperimentConfig::keys().join(", ")))),
        }
        Ok(())
    }

    /// Applies one `key=value` assignment.
    pub fn assign(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::usage(format!("expected key=value, got {kv:?}")))?;
        self.set(k.trim(), v)
    }

    /// Applies a config text: one `key=value` per line, `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.assign(line).map_err(|e| match e {
                CliError::Usage(m) => CliError::Usage(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn seed(&self) -> u64 {
        self.hyper.seed
    }

    /// Copy with the data and training seed replaced.
    pub fn with_seed(&self, seed: u64) -> ExperimentConfig {
        let mut c = self.clone();
        c.hyper.seed = seed;
        c.data.seed = seed;
        c
    }

    pub fn data_spec(&self) -> DataSpec {
        DataSpec { seed: self.hyper.seed, ..self.data.clone() }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig { trunk: TrunkConfig::with_widths(self.data.image_size, self.trunk_widths)?, hidden: self.hidden })
    }

    /// Training hyperparameters with the selected triplet loss folded in.
    pub fn hyperparameters(&self) -> Hyperparameters {
        let mut h = self.hyper.clone();
        if self.triplet_loss == TripletChoice::Ranking {
            h.triplet_loss = TripletLossKind::Ranking { margin: self.ranking_margin };
            h.lambda_tste = self.ranking_lambda;
        }
        h
    }

    /// As [`Self::hyperparameters`] but always with the ranking loss.
    pub fn ranking_hyperparameters(&self) -> Hyperparameters {
        ExperimentConfig { triplet_loss: TripletChoice::Ranking, ..self.clone() }.hyperparameters()
    }

    /// Checks every field before any work starts.
    pub fn validate(&self) -> Result<()> {
        let n = &self.data.noise;
        let unit = [("missing_rate", self.data.missing_rate), ("occlusion_prob", n.occlusion_prob), ("threshold", self.threshold)];
        for (k, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(CliError::usage(format!("{k} must lie in [0, 1], got {v}")));
            }
        }
        if !(n.brightness_min > 0.0 && n.brightness_min <= n.brightness_max) {
            return Err(CliError::usage("brightness range must satisfy 0 < brightness_min <= brightness_max"));
        }
        if !(n.noise_std >= 0.0) {
            return Err(CliError::usage("noise_std must be non-negative"));
        }
        if !(self.ranking_margin > 0.0) || !(self.ranking_lambda > 0.0) {
            return Err(CliError::usage("ranking_margin and ranking_lambda must be positive"));
        }
        if self.seeds.is_empty() {
            return Err(CliError::usage("seeds must list at least one seed"));
        }
        if self.fractions.is_empty() || self.fractions.iter().any(|&f| f == 0 || f > 100) {
            return Err(CliError::usage("fractions must be percentages in 1..=100"));
        }
        if self.sweep_regimes.is_empty() {
            return Err(CliError::usage("sweep_regimes must list at least one regime"));
        }
        if self.grad_points == 0 || !(self.grad_tolerance > 0.0) || !(self.grad_step > 0.0) {
            return Err(CliError::usage("grad_points, grad_tolerance and grad_step must be positive"));
        }
        self.model_config()?;
        self.hyperparameters().validate()?;
        self.ranking_hyperparameters().validate()?;
        Ok(())
    }
}

