//! Training regimes: Stage-1 source fitting, Stage-2 cross-domain
//! adaptation, and the NOADPT / UD / FTT / END2END baselines.
//!
//! Stage-2 and FTT only ever update conv5 and FC tensors, so the frozen
//! prefix activations are computed once per stage and fed in as constants.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use mtct_tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, Domain, TripletSampler};
use crate::error::{CoreError, Result};
use crate::losses::{multitask_softmax_loss, stage2_combined_loss, triplet_ranking_loss, tste_loss, Stage2Weights, TsteConfig};
use crate::model::{BoundParams, FreezeMask, MtnModel, ThreeStreamModel, TrunkConfig, TRUNK_BLOCKS};
use crate::optim::{sgd_step, SgdConfig, SgdState};
use crate::rng::{derive_seed, substream};
use crate::schema::AttributeSchema;

/// Loss used on the cross-domain triplets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TripletLossKind {
    Tste,
    Ranking { margin: f64 },
}

impl fmt::Display for TripletLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TripletLossKind::Tste => f.write_str("tste"),
            TripletLossKind::Ranking { .. } => f.write_str("ranking"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub lr_stage1: f64,
    pub lr_finetune: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub tste_alpha: f64,
    pub lambda_src: f64,
    pub lambda_tste: f64,
    pub triplet_loss: TripletLossKind,
    pub hard_negatives: bool,
    pub seed: u64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            lr_stage1: 0.003,
            lr_finetune: 0.001,
            epochs_stage1: 6,
            epochs_stage2: 60,
            tste_alpha: 30.0,
            lambda_src: 1.0,
            lambda_tste: 10.0,
            triplet_loss: TripletLossKind::Tste,
            hard_negatives: false,
            seed: 1,
        }
    }
}

impl Hyperparameters {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
            ("lr_stage1", self.lr_stage1),
            ("lr_finetune", self.lr_finetune),
            ("tste_alpha", self.tste_alpha),
            ("lambda_src", self.lambda_src),
            ("lambda_tste", self.lambda_tste),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CoreError::contract(format!("{name} must be positive, got {v}")));
            }
        }
        if self.momentum >= 1.0 {
            return Err(CoreError::contract(format!("momentum must be below 1, got {}", self.momentum)));
        }
        if self.batch_size == 0 || self.epochs_stage1 == 0 || self.epochs_stage2 == 0 {
            return Err(CoreError::contract("batch_size and epoch counts must be positive"));
        }
        if self.lr_finetune > self.lr_stage1 {
            return Err(CoreError::contract(format!(
                "lr_finetune {} exceeds lr_stage1 {}",
                self.lr_finetune, self.lr_stage1
            )));
        }
        if let TripletLossKind::Ranking { margin } = self.triplet_loss {
            if !(margin > 0.0 && margin.is_finite()) {
                return Err(CoreError::contract(format!("ranking margin must be positive, got {margin}")));
            }
        }
        Ok(())
    }

    /// True when Stage-1 runs under `self` and `other` are identical, so one
    /// Stage-1 model can serve regimes that differ only in later stages.
    pub fn same_stage1(&self, other: &Hyperparameters) -> bool {
        self.momentum == other.momentum
            && self.weight_decay == other.weight_decay
            && self.batch_size == other.batch_size
            && self.lr_stage1 == other.lr_stage1
            && self.epochs_stage1 == other.epochs_stage1
            && self.seed == other.seed
    }

    fn sgd(&self, lr: f64) -> SgdConfig {
        SgdConfig { lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }

    fn weights(&self) -> Stage2Weights {
        Stage2Weights { source: self.lambda_src, triplet: self.lambda_tste }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TrainRegime {
    NoAdpt,
    Ud,
    Ftt,
    End2End,
    Mtct,
}

impl TrainRegime {
    pub const ALL: [TrainRegime; 5] = [TrainRegime::NoAdpt, TrainRegime::Ud, TrainRegime::Ftt, TrainRegime::End2End, TrainRegime::Mtct];

    pub fn name(self) -> &'static str {
        match self {
            TrainRegime::NoAdpt => "NOADPT",
            TrainRegime::Ud => "UD",
            TrainRegime::Ftt => "FTT",
            TrainRegime::End2End => "END2END",
            TrainRegime::Mtct => "MTCT",
        }
    }

    pub fn uses_target(self) -> bool {
        self != TrainRegime::NoAdpt
    }

    /// Whether the regime starts from a source-only Stage-1 run.
    pub fn uses_stage1(self) -> bool {
        matches!(self, TrainRegime::NoAdpt | TrainRegime::Ftt | TrainRegime::Mtct)
    }
}

impl fmt::Display for TrainRegime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainRegime {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        TrainRegime::ALL.into_iter().find(|r| r.name().eq_ignore_ascii_case(s)).ok_or_else(|| {
            let names: Vec<&str> = TrainRegime::ALL.iter().map(|r| r.name()).collect();
            CoreError::format("regime", format!("unknown regime {s:?}; valid regimes: {}", names.join(", ")))
        })
    }
}

/// Architecture of the networks a regime builds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub trunk: TrunkConfig,
    pub hidden: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { trunk: TrunkConfig::default(), hidden: (64, 64) }
    }
}

/// Epoch means of each loss component.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub components: Vec<(String, f64)>,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub stage: String,
    pub epochs: Vec<EpochRecord>,
    /// Held-out triplet satisfaction rate (%) before and after the stage.
    pub triplet_satisfaction: Option<(f64, f64)>,
}

impl StageRecord {
    fn new(stage: &str) -> Self {
        StageRecord { stage: stage.to_string(), epochs: Vec::new(), triplet_satisfaction: None }
    }

    /// Per-epoch series of one loss component.
    pub fn series(&self, component: &str) -> Vec<f64> {
        self.epochs
            .iter()
            .filter_map(|e| e.components.iter().find(|(n, _)| n == component).map(|(_, v)| *v))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub regime: TrainRegime,
    pub seed: u64,
    pub stages: Vec<StageRecord>,
    pub elapsed_s: f64,
    pub checkpoint: Option<String>,
}

impl RunRecord {
    /// One `key=value` line per epoch, plus a summary line per stage.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for st in &self.stages {
            for e in &st.epochs {
                out.push_str(&format!("regime={} seed={} stage={} epoch={}", self.regime, self.seed, st.stage, e.epoch));
                for (name, v) in &e.components {
                    out.push_str(&format!(" {name}={v:.6}"));
                }
                out.push_str(&format!(" elapsed_s={:.3}\n", e.elapsed_s));
            }
            if let Some((a, b)) = st.triplet_satisfaction {
                out.push_str(&format!(
                    "regime={} seed={} stage={} triplet_satisfaction_start={a:.4} triplet_satisfaction_end={b:.4}\n",
                    self.regime, self.seed, st.stage
                ));
            }
        }
        out.push_str(&format!(
            "regime={} seed={} done elapsed_s={:.3} checkpoint={}\n",
            self.regime,
            self.seed,
            self.elapsed_s,
            self.checkpoint.as_deref().unwrap_or("-")
        ));
        out
    }
}

/// Training inputs. `heldout` supplies pairs for the triplet satisfaction probe.
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub heldout: Option<&'a Dataset>,
}

/// A finished Stage-1 run that several regimes can share.
#[derive(Debug, Clone)]
pub struct Stage1Outcome {
    pub model: MtnModel,
    pub record: StageRecord,
    hyper: Hyperparameters,
    arch: ModelConfig,
}

#[derive(Debug, Clone)]
pub struct RegimeOutcome {
    /// The network deployed on target images.
    pub model: MtnModel,
    /// Final source stream of the two-stream regimes (MTCT, END2END).
    pub source_stream: Option<MtnModel>,
    pub record: RunRecord,
    /// Stage-1 (when the regime has one) then final.
    pub checkpoints: Vec<Checkpoint>,
}

struct FreezeGuard {
    frozen: Vec<(usize, Vec<u64>)>,
}

impl FreezeGuard {
    fn new(model: &MtnModel) -> Self {
        let frozen = model
            .params()
            .iter()
            .enumerate()
            .filter(|(_, p)| p.frozen)
            .map(|(i, p)| (i, p.tensor.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        FreezeGuard { frozen }
    }

    fn check(&self, model: &MtnModel, stage: &str) -> Result<()> {
        for (i, bits) in &self.frozen {
            let p = &model.params()[*i];
            if !p.frozen || p.tensor.data().iter().map(|v| v.to_bits()).ne(bits.iter().copied()) {
                return Err(CoreError::contract(format!("frozen tensor {} changed during {stage}", p.name)));
            }
        }
        Ok(())
    }
}

fn collect_grads(model: &MtnModel, bound: &BoundParams, grads: &mut mtct_tensor::Gradients) -> Vec<Option<Tensor>> {
    (0..model.params().len()).map(|i| bound.var(i).and_then(|v| grads.take(v))).collect()
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

fn check_finite_components(stage: &str, rec: &EpochRecord) -> Result<()> {
    for (name, v) in &rec.components {
        if !v.is_finite() {
            return Err(CoreError::contract(format!("{stage} epoch {} produced a non-finite {name} loss", rec.epoch)));
        }
    }
    Ok(())
}

/// Running sums of loss components, weighted by batch size.
struct Meter {
    names: Vec<&'static str>,
    sums: Vec<f64>,
    weight: f64,
}

impl Meter {
    fn new(names: &[&'static str]) -> Self {
        Meter { names: names.to_vec(), sums: vec![0.0; names.len()], weight: 0.0 }
    }

    fn add(&mut self, values: &[f64], weight: f64) {
        for (s, v) in self.sums.iter_mut().zip(values) {
            *s += v * weight;
        }
        self.weight += weight;
    }

    fn finish(&self, epoch: usize, started: Instant) -> EpochRecord {
        EpochRecord {
            epoch,
            components: self.names.iter().zip(&self.sums).map(|(n, s)| (n.to_string(), s / self.weight)).collect(),
            elapsed_s: started.elapsed().as_secs_f64(),
        }
    }
}

fn shuffled(idx: &[usize], seed: u64, tag: &str, epoch: usize) -> Vec<usize> {
    let mut order = idx.to_vec();
    order.shuffle(&mut substream(seed, tag, epoch as u64));
    order
}

/// Multi-task softmax training of every trainable tensor on the samples `idx`.
fn fit_softmax(model: &mut MtnModel, data: &Dataset, idx: &[usize], hyper: &Hyperparameters, stage: &str) -> Result<StageRecord> {
    if idx.is_empty() {
        return Err(CoreError::contract(format!("{stage}: no training samples")));
    }
    let guard = FreezeGuard::new(model);
    let cfg = hyper.sgd(hyper.lr_stage1);
    let mut state = SgdState::new(model);
    let mut record = StageRecord::new(stage);
    let started = Instant::now();
    for epoch in 1..=hyper.epochs_stage1 {
        let mut meter = Meter::new(&["softmax"]);
        for batch in shuffled(idx, hyper.seed, stage, epoch).chunks(hyper.batch_size) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let x = tape.constant(data.images(batch)?)?;
            let out = model.forward(&mut tape, &bound, x)?;
            let loss = multitask_softmax_loss(&mut tape, &out.logits, &data.labels(batch)?)?;
            let mut g = tape.backward(loss)?;
            let grads = collect_grads(model, &bound, &mut g);
            sgd_step(model, &grads, &mut state, &cfg)?;
            meter.add(&[scalar(&tape, loss)], batch.len() as f64);
        }
        let rec = meter.finish(epoch, started);
        check_finite_components(stage, &rec)?;
        record.epochs.push(rec);
        guard.check(model, stage)?;
    }
    Ok(record)
}

/// Fits `model` with the multi-task softmax loss on the SOURCE samples of `data`.
pub fn train_stage1(model: &mut MtnModel, data: &Dataset, hyper: &Hyperparameters) -> Result<StageRecord> {
    hyper.validate()?;
    if model.params().iter().any(|p| p.frozen) {
        return Err(CoreError::contract("stage 1 expects an unfrozen model"));
    }
    let idx = data.indices(Domain::Source);
    if idx.is_empty() {
        return Err(CoreError::contract("stage 1 needs source training samples"));
    }
    fit_softmax(model, data, &idx, hyper, "stage1")
}

fn init_model(schema: &AttributeSchema, arch: &ModelConfig, hyper: &Hyperparameters) -> Result<MtnModel> {
    MtnModel::build(schema, arch.trunk, arch.hidden, derive_seed(hyper.seed, "init", 0))
}

/// Builds and trains the shared Stage-1 source network.
pub fn run_stage1(data: &Dataset, arch: &ModelConfig, hyper: &Hyperparameters) -> Result<Stage1Outcome> {
    let mut model = init_model(data.schema(), arch, hyper)?;
    let record = train_stage1(&mut model, data, hyper)?;
    Ok(Stage1Outcome { model, record, hyper: hyper.clone(), arch: *arch })
}

/// Rows of a per-sample activation cache, keyed by dataset index.
struct RowCache {
    rows: Tensor,
    pos: HashMap<usize, usize>,
}

impl RowCache {
    fn build(model: &MtnModel, data: &Dataset, idx: &[usize], to_block: usize) -> Result<Self> {
        let images = data.images(idx)?;
        let rows = model.activations(&images, to_block)?;
        Ok(RowCache { rows, pos: idx.iter().enumerate().map(|(r, &i)| (i, r)).collect() })
    }

    fn gather(&self, idx: &[usize]) -> Result<Tensor> {
        let rows: Vec<usize> = idx
            .iter()
            .map(|i| self.pos.get(i).copied().ok_or_else(|| CoreError::contract(format!("sample {i} missing from activation cache"))))
            .collect::<Result<_>>()?;
        Ok(self.rows.select_outer(&rows)?)
    }
}

/// Fine-tunes the FC layers of a trunk-frozen model on the TARGET samples of `data`.
pub fn fine_tune_fc(model: &mut MtnModel, data: &Dataset, hyper: &Hyperparameters) -> Result<StageRecord> {
    let idx = data.indices(Domain::Target);
    if idx.is_empty() {
        return Err(CoreError::contract("FTT needs target training samples"));
    }
    let mask = FreezeMask::fc_only(model);
    model.apply_freeze(&mask)?;
    let guard = FreezeGuard::new(model);
    let cache = RowCache::build(model, data, &idx, TRUNK_BLOCKS)?;
    let cfg = hyper.sgd(hyper.lr_finetune);
    let mut state = SgdState::new(model);
    let mut record = StageRecord::new("finetune");
    let started = Instant::now();
    for epoch in 1..=hyper.epochs_stage2 {
        let mut meter = Meter::new(&["softmax"]);
        for batch in shuffled(&idx, hyper.seed, "finetune", epoch).chunks(hyper.batch_size) {
            let mut tape = Tape::new();
            let bound = model.bind_from_block(&mut tape, TRUNK_BLOCKS + 1)?;
            let feats = tape.constant(cache.gather(batch)?)?;
            let out = model.forward_from(&mut tape, &bound, feats, TRUNK_BLOCKS)?;
            let loss = multitask_softmax_loss(&mut tape, &out.logits, &data.labels(batch)?)?;
            let mut g = tape.backward(loss)?;
            let grads = collect_grads(model, &bound, &mut g);
            sgd_step(model, &grads, &mut state, &cfg)?;
            meter.add(&[scalar(&tape, loss)], batch.len() as f64);
        }
        let rec = meter.finish(epoch, started);
        check_finite_components("finetune", &rec)?;
        record.epochs.push(rec);
        guard.check(model, "finetune")?;
    }
    Ok(record)
}

/// Fixed held-out triplets `(target, positive, negative)` drawn from the pairs of `heldout`.
fn heldout_triplets(heldout: &Dataset, hyper: &Hyperparameters) -> Result<Vec<(usize, usize, usize)>> {
    const PROBE_TRIPLETS: usize = 500;
    let sampler = TripletSampler::new(heldout, false)?;
    let b = sampler.sample(PROBE_TRIPLETS, &mut substream(hyper.seed, "heldout-triplets", 0));
    Ok(b.target.into_iter().zip(b.positive).zip(b.negative).map(|((t, p), n)| (t, p, n)).collect())
}

/// Percentage of triplets with `d(f_t, f_p) < d(f_t, f_n)` on conv5 features,
/// target images through `target`, source images through `source`.
pub fn triplet_satisfaction(source: &MtnModel, target: &MtnModel, data: &Dataset, triplets: &[(usize, usize, usize)]) -> Result<f64> {
    if triplets.is_empty() {
        return Err(CoreError::contract("no triplets to score"));
    }
    let mut t_idx: Vec<usize> = triplets.iter().map(|t| t.0).collect();
    let mut s_idx: Vec<usize> = triplets.iter().flat_map(|t| [t.1, t.2]).collect();
    for v in [&mut t_idx, &mut s_idx] {
        v.sort_unstable();
        v.dedup();
    }
    let tc = RowCache::build(target, data, &t_idx, TRUNK_BLOCKS)?;
    let sc = RowCache::build(source, data, &s_idx, TRUNK_BLOCKS)?;
    let dim = tc.rows.shape()[1];
    fn row(c: &RowCache, i: usize, dim: usize) -> &[f64] {
        let r = c.pos[&i];
        &c.rows.data()[r * dim..(r + 1) * dim]
    }
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let ok = triplets.iter().filter(|&&(t, p, n)| sq(row(&tc, t, dim), row(&sc, p, dim)) < sq(row(&tc, t, dim), row(&sc, n, dim))).count();
    Ok(100.0 * ok as f64 / triplets.len() as f64)
}

fn triplet_term(tape: &mut Tape, hyper: &Hyperparameters, ft: Var, fp: Var, fn_: Var) -> Result<Var> {
    match hyper.triplet_loss {
        TripletLossKind::Tste => tste_loss(tape, ft, fp, fn_, &TsteConfig::new(hyper.tste_alpha)?),
        TripletLossKind::Ranking { margin } => triplet_ranking_loss(tape, ft, fp, fn_, margin),
    }
}

const STAGE2_COMPONENTS: [&str; 4] = ["target_softmax", "source_softmax", "triplet", "total"];

/// Cross-domain adaptation of a three-stream model built from a Stage-1 network.
///
/// Each step draws a target softmax batch (epochs are passes over the target
/// training samples), a triplet batch and a non-paired source batch, and
/// minimises the combined loss at `lr_finetune`. Only target conv5 and the
/// FC layers of both streams move.
pub fn train_stage2(ts: &mut ThreeStreamModel, data: &Dataset, heldout: Option<&Dataset>, hyper: &Hyperparameters) -> Result<StageRecord> {
    hyper.validate()?;
    let expected_target = FreezeMask::conv5_and_fc(&ts.target);
    let expected_source = FreezeMask::fc_only(&ts.source);
    if ts.target.freeze_mask() != expected_target || ts.source.freeze_mask() != expected_source {
        return Err(CoreError::contract("stage 2 expects the cross-domain freeze plan"));
    }
    let sampler = TripletSampler::new(data, hyper.hard_negatives)?;
    let target_idx = data.indices(Domain::Target);
    let source_idx = data.indices(Domain::Source);
    let probe = heldout.map(|h| heldout_triplets(h, hyper).map(|t| (h, t))).transpose()?;
    let mut record = StageRecord::new("stage2");
    let start_rate = match &probe {
        Some((h, t)) => Some(triplet_satisfaction(&ts.source, &ts.target, h, t)?),
        None => None,
    };

    let conv4 = RowCache::build(&ts.target, data, &target_idx, TRUNK_BLOCKS - 1)?;
    let src_feats = RowCache::build(&ts.source, data, &source_idx, TRUNK_BLOCKS)?;
    let guard_t = FreezeGuard::new(&ts.target);
    let guard_s = FreezeGuard::new(&ts.source);
    let cfg = hyper.sgd(hyper.lr_finetune);
    let mut state_t = SgdState::new(&ts.target);
    let mut state_s = SgdState::new(&ts.source);
    let mut rng = substream(hyper.seed, "stage2-triplets", 0);
    let started = Instant::now();
    for epoch in 1..=hyper.epochs_stage2 {
        let mut meter = Meter::new(&STAGE2_COMPONENTS);
        for batch in shuffled(&target_idx, hyper.seed, "stage2", epoch).chunks(hyper.batch_size) {
            let trip = sampler.sample(hyper.batch_size, &mut rng);
            let mut tape = Tape::new();
            let bt = ts.target.bind_from_block(&mut tape, TRUNK_BLOCKS)?;
            let bs = ts.source.bind_from_block(&mut tape, TRUNK_BLOCKS + 1)?;

            let x = tape.constant(conv4.gather(batch)?)?;
            let out_t = ts.target.forward_from(&mut tape, &bt, x, TRUNK_BLOCKS - 1)?;
            let target_sm = multitask_softmax_loss(&mut tape, &out_t.logits, &data.labels(batch)?)?;

            let anchors = tape.constant(conv4.gather(&trip.target)?)?;
            let h = ts.target.trunk_forward(&mut tape, &bt, anchors, TRUNK_BLOCKS - 1, TRUNK_BLOCKS)?;
            let ft = tape.flatten(h)?;
            let fp = tape.constant(src_feats.gather(&trip.positive)?)?;
            let fn_ = tape.constant(src_feats.gather(&trip.negative)?)?;
            let triplet = triplet_term(&mut tape, hyper, ft, fp, fn_)?;

            let fs = tape.constant(src_feats.gather(&trip.source_batch)?)?;
            let src_logits = ts.source.heads_forward(&mut tape, &bs, fs)?;
            let source_sm = multitask_softmax_loss(&mut tape, &src_logits, &data.labels(&trip.source_batch)?)?;

            let total = stage2_combined_loss(&mut tape, target_sm, source_sm, triplet, hyper.weights())?;
            let mut g = tape.backward(total)?;
            let grads_t = collect_grads(&ts.target, &bt, &mut g);
            let grads_s = collect_grads(&ts.source, &bs, &mut g);
            sgd_step(&mut ts.target, &grads_t, &mut state_t, &cfg)?;
            sgd_step(&mut ts.source, &grads_s, &mut state_s, &cfg)?;
            let vals = [target_sm, source_sm, triplet, total].map(|v| scalar(&tape, v));
            meter.add(&vals, batch.len() as f64);
        }
        let rec = meter.finish(epoch, started);
        check_finite_components("stage2", &rec)?;
        record.epochs.push(rec);
        guard_t.check(&ts.target, "stage2")?;
        guard_s.check(&ts.source, "stage2")?;
    }
    if let (Some((h, t)), Some(a)) = (&probe, start_rate) {
        record.triplet_satisfaction = Some((a, triplet_satisfaction(&ts.source, &ts.target, h, t)?));
    }
    Ok(record)
}

/// Joint training of both streams from scratch, no staging and no freezing.
/// An epoch is one pass over the TARGET training samples, as in Stage-2, and
/// `epochs_stage1` epochs run at `lr_stage1`. Each step also takes a triplet
/// batch and a source batch (cycling through the source samples), so the
/// whole phase costs about as many full-network image passes as Stage-1.
fn train_end2end(data: &Dataset, arch: &ModelConfig, hyper: &Hyperparameters) -> Result<(ThreeStreamModel, StageRecord)> {
    let source = init_model(data.schema(), arch, hyper)?;
    let target = source.clone_to_target();
    let mut ts = ThreeStreamModel::build_unfrozen(source, target)?;
    let sampler = TripletSampler::new(data, hyper.hard_negatives)?;
    let source_idx = data.indices(Domain::Source);
    let target_idx = data.indices(Domain::Target);
    let cfg = hyper.sgd(hyper.lr_stage1);
    let mut state_t = SgdState::new(&ts.target);
    let mut state_s = SgdState::new(&ts.source);
    let mut rng = substream(hyper.seed, "end2end-triplets", 0);
    let mut record = StageRecord::new("end2end");
    let started = Instant::now();
    let mut source_order = Vec::new();
    let mut pass = 0;
    for epoch in 1..=hyper.epochs_stage1 {
        let mut meter = Meter::new(&STAGE2_COMPONENTS);
        for batch in shuffled(&target_idx, hyper.seed, "end2end", epoch).chunks(hyper.batch_size) {
            if source_order.len() < hyper.batch_size {
                pass += 1;
                source_order.extend(shuffled(&source_idx, hyper.seed, "end2end-source", pass).into_iter().rev());
            }
            let take = hyper.batch_size.min(source_idx.len());
            let source_batch: Vec<usize> = (0..take).filter_map(|_| source_order.pop()).collect();
            let source_batch = &source_batch[..];
            let trip = sampler.sample(hyper.batch_size, &mut rng);
            let mut tape = Tape::new();
            let b = ts.bind(&mut tape)?;
            let x = tape.constant(data.images(batch)?)?;
            let out_t = ts.forward_target(&mut tape, &b, x)?;
            let target_sm = multitask_softmax_loss(&mut tape, &out_t.logits, &data.labels(batch)?)?;

            let anchors = tape.constant(data.images(&trip.target)?)?;
            let ft = ts.forward_target(&mut tape, &b, anchors)?.conv5;
            let pos = tape.constant(data.images(&trip.positive)?)?;
            let fp = ts.forward_positive(&mut tape, &b, pos)?.conv5;
            let neg = tape.constant(data.images(&trip.negative)?)?;
            let fn_ = ts.forward_negative(&mut tape, &b, neg)?.conv5;
            let triplet = triplet_term(&mut tape, hyper, ft, fp, fn_)?;

            let src = tape.constant(data.images(source_batch)?)?;
            let out_s = ts.forward_positive(&mut tape, &b, src)?;
            let source_sm = multitask_softmax_loss(&mut tape, &out_s.logits, &data.labels(source_batch)?)?;

            let total = stage2_combined_loss(&mut tape, target_sm, source_sm, triplet, hyper.weights())?;
            let mut g = tape.backward(total)?;
            let grads_t = collect_grads(&ts.target, &b.target, &mut g);
            let grads_s = collect_grads(&ts.source, &b.source, &mut g);
            sgd_step(&mut ts.target, &grads_t, &mut state_t, &cfg)?;
            sgd_step(&mut ts.source, &grads_s, &mut state_s, &cfg)?;
            let vals = [target_sm, source_sm, triplet, total].map(|v| scalar(&tape, v));
            meter.add(&vals, batch.len() as f64);
        }
        let rec = meter.finish(epoch, started);
        check_finite_components("end2end", &rec)?;
        record.epochs.push(rec);
    }
    Ok((ts, record))
}

fn check_data(regime: TrainRegime, data: &TrainData<'_>) -> Result<()> {
    let train = data.train;
    if train.count(Domain::Source) == 0 {
        return Err(CoreError::contract(format!("{regime} needs source training samples")));
    }
    if regime.uses_target() && train.count(Domain::Target) == 0 {
        return Err(CoreError::contract(format!("{regime} needs target training samples")));
    }
    if matches!(regime, TrainRegime::Mtct | TrainRegime::End2End) && train.pair_count() == 0 {
        return Err(CoreError::contract(format!("{regime} needs cross-domain pairs")));
    }
    if let Some(h) = data.heldout {
        if h.schema() != train.schema() {
            return Err(CoreError::contract("held-out and training schemas differ"));
        }
    }
    Ok(())
}

/// Runs `regime` from scratch.
pub fn train_regime(regime: TrainRegime, data: &TrainData<'_>, arch: &ModelConfig, hyper: &Hyperparameters) -> Result<RegimeOutcome> {
    train_regime_with(regime, data, arch, hyper, None)
}

/// As [`train_regime`], reusing a finished Stage-1 run where the regime has one.
/// The shared run must come from the same seed, hyperparameters and architecture.
pub fn train_regime_with(
    regime: TrainRegime,
    data: &TrainData<'_>,
    arch: &ModelConfig,
    hyper: &Hyperparameters,
    stage1: Option<&Stage1Outcome>,
) -> Result<RegimeOutcome> {
    hyper.validate()?;
    check_data(regime, data)?;
    let started = Instant::now();
    let train = data.train;
    let stage1_owned;
    let s1 = if regime.uses_stage1() {
        match stage1 {
            Some(s) => {
                if s.arch != *arch || !s.hyper.same_stage1(hyper) || s.model.schema() != train.schema() {
                    return Err(CoreError::contract("shared stage-1 run does not match this configuration"));
                }
                Some(s)
            }
            None => {
                stage1_owned = run_stage1(train, arch, hyper)?;
                Some(&stage1_owned)
            }
        }
    } else {
        None
    };
    let mut stages = Vec::new();
    let mut checkpoints = Vec::new();
    let mut source_stream = None;
    let model = match regime {
        TrainRegime::NoAdpt => {
            let s1 = s1.expect("regime uses stage 1");
            stages.push(s1.record.clone());
            s1.model.clone_to_target()
        }
        TrainRegime::Ud => {
            let mut m = init_model(train.schema(), arch, hyper)?;
            let all: Vec<usize> = (0..train.len()).collect();
            stages.push(fit_softmax(&mut m, train, &all, hyper, "united")?);
            m
        }
        TrainRegime::Ftt => {
            let s1 = s1.expect("regime uses stage 1");
            stages.push(s1.record.clone());
            checkpoints.push(Checkpoint::new("stage1", s1.model.clone())?);
            let mut m = s1.model.clone_to_target();
            stages.push(fine_tune_fc(&mut m, train, hyper)?);
            m
        }
        TrainRegime::End2End => {
            let (ts, rec) = train_end2end(train, arch, hyper)?;
            stages.push(rec);
            source_stream = Some(ts.source);
            ts.target
        }
        TrainRegime::Mtct => {
            let s1 = s1.expect("regime uses stage 1");
            stages.push(s1.record.clone());
            checkpoints.push(Checkpoint::new("stage1", s1.model.clone())?);
            let mut ts = ThreeStreamModel::build(s1.model.clone(), s1.model.clone_to_target())?;
            stages.push(train_stage2(&mut ts, train, data.heldout, hyper)?);
            source_stream = Some(ts.source);
            ts.target
        }
    };
    checkpoints.push(Checkpoint::new("final", model.clone())?);
    let record = RunRecord { regime, seed: hyper.seed, stages, elapsed_s: started.elapsed().as_secs_f64(), checkpoint: None };
    Ok(RegimeOutcome { model, source_stream, record, checkpoints })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hyper_validation() {
        assert!(Hyperparameters::default().validate().is_ok());
        let h = Hyperparameters { lr_finetune: 0.1, lr_stage1: 0.01, ..Default::default() };
        assert!(h.validate().is_err());
        let h = Hyperparameters { batch_size: 0, ..Default::default() };
        assert!(h.validate().is_err());
        let h = Hyperparameters { triplet_loss: TripletLossKind::Ranking { margin: 0.0 }, ..Default::default() };
        assert!(h.validate().is_err());
    }

    #[test]
    fn regime_names_round_trip() {
        for r in TrainRegime::ALL {
            assert_eq!(r.name().parse::<TrainRegime>().unwrap(), r);
        }
        let err = "bogus".parse::<TrainRegime>().unwrap_err().to_string();
        assert!(err.contains("NOADPT") && err.contains("END2END"));
    }
}
