//! Multi-task network: a five-block NIN trunk shared by one three-layer
//! fully-connected branch per attribute, plus the three-stream assembly
//! used for cross-domain training.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use mtct_tensor::{conv_output_size, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::schema::AttributeSchema;

pub const TRUNK_BLOCKS: usize = 5;
/// Layers per NIN unit (spatial conv, then two 1x1 convs) and per branch (FC1..FC3).
pub const LAYERS_PER_UNIT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NinBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub pool_after: bool,
}

impl NinBlock {
    pub const fn same(channels: usize, pool_after: bool) -> Self {
        NinBlock { channels, kernel: 3, stride: 1, pad: 1, pool_after }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrunkConfig {
    pub in_channels: usize,
    pub input_size: usize,
    pub blocks: [NinBlock; TRUNK_BLOCKS],
    pub pool_kernel: usize,
    pub pool_stride: usize,
}

impl Default for TrunkConfig {
    /// 3x32x32 input, widths 16/32/64/64/64, 2x2 max-pool after conv1, conv2 and conv4.
    fn default() -> Self {
        TrunkConfig {
            in_channels: 3,
            input_size: 32,
            blocks: [
                NinBlock::same(16, true),
                NinBlock::same(32, true),
                NinBlock::same(64, false),
                NinBlock::same(64, true),
                NinBlock::same(64, false),
            ],
            pool_kernel: 2,
            pool_stride: 2,
        }
    }
}

impl TrunkConfig {
    /// An ImageNet-resolution NIN-style trunk, used only for parameter-count arithmetic.
    pub fn paper_scale() -> Self {
        TrunkConfig {
            in_channels: 3,
            input_size: 224,
            blocks: [
                NinBlock { channels: 96, kernel: 11, stride: 4, pad: 0, pool_after: true },
                NinBlock { channels: 256, kernel: 5, stride: 1, pad: 2, pool_after: true },
                NinBlock { channels: 384, kernel: 3, stride: 1, pad: 1, pool_after: true },
                NinBlock { channels: 1024, kernel: 3, stride: 1, pad: 1, pool_after: false },
                NinBlock { channels: 1024, kernel: 3, stride: 1, pad: 1, pool_after: false },
            ],
            pool_kernel: 3,
            pool_stride: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.input_size == 0 || self.pool_kernel == 0 || self.pool_stride == 0 {
            return Err(CoreError::contract("trunk sizes must be positive"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(CoreError::contract(format!("conv{} has a zero width", i + 1)));
            }
        }
        self.output_shapes().map(|_| ())
    }

    /// `(channels, side)` after each block, pooling included.
    pub fn output_shapes(&self) -> Result<[(usize, usize); TRUNK_BLOCKS]> {
        let mut side = self.input_size;
        let mut out = [(0, 0); TRUNK_BLOCKS];
        for (i, b) in self.blocks.iter().enumerate() {
            side = conv_output_size(side, b.kernel, b.stride, b.pad)
                .ok_or_else(|| CoreError::contract(format!("conv{} kernel does not fit input {side}", i + 1)))?;
            if b.pool_after {
                side = conv_output_size(side, self.pool_kernel, self.pool_stride, 0)
                    .ok_or_else(|| CoreError::contract(format!("pool after conv{} does not fit {side}", i + 1)))?;
            }
            out[i] = (b.channels, side);
        }
        Ok(out)
    }

    /// Length of the vectorised conv5 activation.
    pub fn feature_len(&self) -> Result<usize> {
        let (c, s) = self.output_shapes()?[TRUNK_BLOCKS - 1];
        Ok(c * s * s)
    }

    fn block_input_channels(&self, block: usize) -> usize {
        if block == 0 {
            self.in_channels
        } else {
            self.blocks[block - 1].channels
        }
    }
}

impl fmt::Display for TrunkConfig {
    /// `in=3 size=32 pool=2/2 blocks=16:3:1:1:p,32:3:1:1:p,...` where each block is
    /// `channels:kernel:stride:pad` and a trailing `:p` marks a pool after it.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "in={} size={} pool={}/{} blocks=", self.in_channels, self.input_size, self.pool_kernel, self.pool_stride)?;
        for (i, b) in self.blocks.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}:{}:{}:{}:{}", b.channels, b.kernel, b.stride, b.pad, if b.pool_after { "p" } else { "-" })?;
        }
        Ok(())
    }
}

impl FromStr for TrunkConfig {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |detail: String| CoreError::format("trunk config", detail);
        let mut fields = BTreeMap::new();
        for tok in s.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| bad(format!("expected key=value, got {tok:?}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| bad(format!("missing {k}")));
        let num = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("bad number {v:?}")));
        let (pk, ps) = get("pool")?.split_once('/').ok_or_else(|| bad("pool must be kernel/stride".into()))?;
        let parsed: Vec<NinBlock> = get("blocks")?
            .split(',')
            .map(|b| {
                let parts: Vec<&str> = b.split(':').collect();
                if parts.len() != 5 || !(parts[4] == "p" || parts[4] == "-") {
                    return Err(bad(format!("bad block {b:?}")));
                }
                Ok(NinBlock {
                    channels: num(parts[0])?,
                    kernel: num(parts[1])?,
                    stride: num(parts[2])?,
                    pad: num(parts[3])?,
                    pool_after: parts[4] == "p",
                })
            })
            .collect::<Result<_>>()?;
        let blocks: [NinBlock; TRUNK_BLOCKS] =
            parsed.try_into().map_err(|v: Vec<NinBlock>| bad(format!("expected {TRUNK_BLOCKS} blocks, got {}", v.len())))?;
        let cfg = TrunkConfig {
            in_channels: num(get("in")?)?,
            input_size: num(get("size")?)?,
            blocks,
            pool_kernel: num(pk)?,
            pool_stride: num(ps)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrunkConfig {
    /// Default layout (pools after conv1, conv2, conv4) with custom input size and widths.
    pub fn with_widths(input_size: usize, widths: [usize; TRUNK_BLOCKS]) -> Result<Self> {
        let mut cfg = TrunkConfig { input_size, ..TrunkConfig::default() };
        for (b, w) in cfg.blocks.iter_mut().zip(widths) {
            b.channels = w;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Which part of the network a parameter tensor belongs to. Blocks and layers are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Trunk { block: usize },
    Branch { attr: usize, layer: usize },
}

impl ParamGroup {
    pub fn is_fc(&self) -> bool {
        matches!(self, ParamGroup::Branch { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub role: ParamRole,
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Per-tensor frozen flags, keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FreezeMask(pub BTreeMap<String, bool>);

impl FreezeMask {
    pub fn from_fn(model: &MtnModel, frozen: impl Fn(&Param) -> bool) -> Self {
        FreezeMask(model.params.iter().map(|p| (p.name.clone(), frozen(p))).collect())
    }

    pub fn uniform(model: &MtnModel, frozen: bool) -> Self {
        Self::from_fn(model, |_| frozen)
    }

    /// Trunk frozen, every FC layer trainable.
    pub fn fc_only(model: &MtnModel) -> Self {
        Self::from_fn(model, |p| !p.group.is_fc())
    }

    /// conv1..conv4 frozen; conv5 and every FC layer trainable.
    pub fn conv5_and_fc(model: &MtnModel) -> Self {
        Self::from_fn(model, |p| matches!(p.group, ParamGroup::Trunk { block } if block < TRUNK_BLOCKS))
    }
}

/// Parameters registered on one tape, aligned with [`MtnModel::params`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Option<Var>>,
}

impl BoundParams {
    pub fn var(&self, index: usize) -> Option<Var> {
        self.vars.get(index).copied().flatten()
    }

    fn need(&self, index: usize, name: &str) -> Result<Var> {
        self.var(index).ok_or_else(|| CoreError::contract(format!("parameter {name} is not bound on this tape")))
    }
}

/// Forward result: flattened conv5 features and per-attribute logits.
#[derive(Debug, Clone)]
pub struct Forward {
    pub conv5: Var,
    pub logits: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MtnModel {
    schema: AttributeSchema,
    trunk: TrunkConfig,
    hidden: (usize, usize),
    params: Vec<Param>,
}

impl MtnModel {
    /// Builds a model with fan-in scaled normal weights and zero biases; nothing frozen.
    pub fn build(schema: &AttributeSchema, trunk: TrunkConfig, hidden: (usize, usize), init_seed: u64) -> Result<Self> {
        if schema.n_attr() == 0 {
            return Err(CoreError::contract("schema has no attributes"));
        }
        if hidden.0 == 0 || hidden.1 == 0 {
            return Err(CoreError::contract("branch hidden widths must be positive"));
        }
        trunk.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut params = Vec::new();
        for (b, block) in trunk.blocks.iter().enumerate() {
            let c_in = trunk.block_input_channels(b);
            for layer in 0..LAYERS_PER_UNIT {
                let (fan_in_ch, k) = if layer == 0 { (c_in, block.kernel) } else { (block.channels, 1) };
                let shape = [block.channels, fan_in_ch, k, k];
                let group = ParamGroup::Trunk { block: b + 1 };
                let prefix = format!("conv{}.{}", b + 1, layer);
                params.push(init_weight(&mut rng, &prefix, group, &shape, fan_in_ch * k * k, 2.0));
                params.push(zero_bias(&prefix, group, block.channels));
            }
        }
        let feat = trunk.feature_len()?;
        for (i, attr) in schema.attributes().iter().enumerate() {
            let widths = [feat, hidden.0, hidden.1, attr.cardinality];
            for layer in 0..LAYERS_PER_UNIT {
                let group = ParamGroup::Branch { attr: i + 1, layer: layer + 1 };
                let prefix = format!("branch.{}.fc{}", attr.name, layer + 1);
                let gain = if layer + 1 == LAYERS_PER_UNIT { 1.0 } else { 2.0 };
                params.push(init_weight(&mut rng, &prefix, group, &[widths[layer], widths[layer + 1]], widths[layer], gain));
                params.push(zero_bias(&prefix, group, widths[layer + 1]));
            }
        }
        Ok(MtnModel { schema: schema.clone(), trunk, hidden, params })
    }

    /// Reassembles a model from named tensors, checking every shape against the configs.
    pub fn from_params(schema: AttributeSchema, trunk: TrunkConfig, hidden: (usize, usize), params: Vec<Param>) -> Result<Self> {
        let template = MtnModel::build(&schema, trunk, hidden, 0)?;
        if template.params.len() != params.len() {
            return Err(CoreError::contract(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (t, p) in template.params.iter().zip(&params) {
            if t.name != p.name || t.tensor.shape() != p.tensor.shape() || t.group != p.group || t.role != p.role {
                return Err(CoreError::contract(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name,
                    p.tensor.shape(),
                    t.name,
                    t.tensor.shape()
                )));
            }
        }
        Ok(MtnModel { schema, trunk, hidden, params })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn trunk(&self) -> &TrunkConfig {
        &self.trunk
    }

    pub fn hidden(&self) -> (usize, usize) {
        self.hidden
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Exact parameter count implied by the configs, without allocating.
    pub fn parameter_count(schema: &AttributeSchema, trunk: &TrunkConfig, hidden: (usize, usize)) -> Result<usize> {
        let mut n = 0;
        for (b, block) in trunk.blocks.iter().enumerate() {
            let c_in = trunk.block_input_channels(b);
            n += block.channels * c_in * block.kernel * block.kernel + block.channels;
            n += 2 * (block.channels * block.channels + block.channels);
        }
        let feat = trunk.feature_len()?;
        for attr in schema.attributes() {
            n += feat * hidden.0 + hidden.0 + hidden.0 * hidden.1 + hidden.1 + hidden.1 * attr.cardinality + attr.cardinality;
        }
        Ok(n)
    }

    /// Number of distinct trunk blocks and branches that own parameters.
    pub fn group_census(&self) -> (usize, usize) {
        let mut blocks = std::collections::BTreeSet::new();
        let mut branches = std::collections::BTreeSet::new();
        for p in &self.params {
            match p.group {
                ParamGroup::Trunk { block } => blocks.insert(block),
                ParamGroup::Branch { attr, .. } => branches.insert(attr),
            };
        }
        (blocks.len(), branches.len())
    }

    /// Deep copy used to seed a target-domain model from a trained source model.
    pub fn clone_to_target(&self) -> MtnModel {
        self.clone()
    }

    pub fn freeze_mask(&self) -> FreezeMask {
        FreezeMask::from_fn(self, |p| p.frozen)
    }

    pub fn apply_freeze(&mut self, mask: &FreezeMask) -> Result<()> {
        for name in mask.0.keys() {
            if self.param(name).is_none() {
                return Err(CoreError::contract(format!("freeze mask names unknown tensor {name}")));
            }
        }
        for p in &self.params {
            if !mask.0.contains_key(&p.name) {
                return Err(CoreError::contract(format!("freeze mask does not cover {}", p.name)));
            }
        }
        for p in &mut self.params {
            p.frozen = mask.0[&p.name];
        }
        Ok(())
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.params.iter().filter(|p| !p.frozen).map(|p| p.name.as_str()).collect()
    }

    /// Registers every parameter on `tape`: trainable ones as gradient leaves, frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        self.bind_where(tape, |_| true)
    }

    /// Binds only conv blocks `>= first_block` (1-based) and the branches.
    pub fn bind_from_block(&self, tape: &mut Tape, first_block: usize) -> Result<BoundParams> {
        self.bind_where(tape, |p| match p.group {
            ParamGroup::Trunk { block } => block >= first_block,
            ParamGroup::Branch { .. } => true,
        })
    }

    fn bind_where(&self, tape: &mut Tape, keep: impl Fn(&Param) -> bool) -> Result<BoundParams> {
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            if !keep(p) {
                vars.push(None);
                continue;
            }
            let v = if p.frozen { tape.constant(p.tensor.clone())? } else { tape.parameter(p.tensor.clone())? };
            vars.push(Some(v));
        }
        Ok(BoundParams { vars })
    }

    fn trunk_index(block: usize, layer: usize) -> usize {
        (block * LAYERS_PER_UNIT + layer) * 2
    }

    fn branch_index(attr: usize, layer: usize) -> usize {
        Self::trunk_index(TRUNK_BLOCKS, 0) + (attr * LAYERS_PER_UNIT + layer) * 2
    }

    /// Expected `(channels, side)` of the input to 0-based block `block`.
    pub fn block_input_shape(&self, block: usize) -> Result<(usize, usize)> {
        if block == 0 {
            Ok((self.trunk.in_channels, self.trunk.input_size))
        } else {
            Ok(self.trunk.output_shapes()?[block - 1])
        }
    }

    /// Runs 0-based blocks `from..to` of the trunk on a rank-4 batch.
    pub fn trunk_forward(&self, tape: &mut Tape, bound: &BoundParams, x: Var, from: usize, to: usize) -> Result<Var> {
        if from > to || to > TRUNK_BLOCKS {
            return Err(CoreError::contract(format!("invalid block range {from}..{to}")));
        }
        let (c, side) = self.block_input_shape(from)?;
        let s = tape.shape(x);
        if s.len() != 4 || s[1] != c || s[2] != side || s[3] != side {
            return Err(mtct_tensor::TensorError::Dimension {
                op: "forward_mtn",
                detail: format!("block {} expects (batch, {c}, {side}, {side}), got {s:?}", from + 1),
            }
            .into());
        }
        let mut h = x;
        for b in from..to {
            let block = &self.trunk.blocks[b];
            for layer in 0..LAYERS_PER_UNIT {
                let wi = Self::trunk_index(b, layer);
                let w = bound.need(wi, &self.params[wi].name)?;
                let bias = bound.need(wi + 1, &self.params[wi + 1].name)?;
                h = if layer == 0 { tape.conv2d(h, w, block.stride, block.pad)? } else { tape.conv2d(h, w, 1, 0)? };
                h = tape.add_bias(h, bias)?;
                h = tape.relu(h)?;
            }
            if block.pool_after {
                h = tape.maxpool2d(h, self.trunk.pool_kernel, self.trunk.pool_stride)?;
            }
        }
        Ok(h)
    }

    /// Per-attribute logits from flattened conv5 features `(batch, feature_len)`.
    pub fn heads_forward(&self, tape: &mut Tape, bound: &BoundParams, features: Var) -> Result<Vec<Var>> {
        let feat = self.trunk.feature_len()?;
        let s = tape.shape(features);
        if s.len() != 2 || s[1] != feat {
            return Err(mtct_tensor::TensorError::Dimension {
                op: "forward_mtn",
                detail: format!("branches expect (batch, {feat}) features, got {s:?}"),
            }
            .into());
        }
        let mut logits = Vec::with_capacity(self.schema.n_attr());
        for attr in 0..self.schema.n_attr() {
            let mut h = features;
            for layer in 0..LAYERS_PER_UNIT {
                let wi = Self::branch_index(attr, layer);
                let w = bound.need(wi, &self.params[wi].name)?;
                let b = bound.need(wi + 1, &self.params[wi + 1].name)?;
                h = tape.matmul(h, w)?;
                h = tape.add_bias(h, b)?;
                if layer + 1 < LAYERS_PER_UNIT {
                    h = tape.relu(h)?;
                }
            }
            logits.push(h);
        }
        Ok(logits)
    }

    /// Full forward pass on a `(batch, channels, side, side)` image batch.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, images: Var) -> Result<Forward> {
        let h = self.trunk_forward(tape, bound, images, 0, TRUNK_BLOCKS)?;
        let conv5 = tape.flatten(h)?;
        let logits = self.heads_forward(tape, bound, conv5)?;
        Ok(Forward { conv5, logits })
    }

    /// Forward from the input of 0-based block `from` (use `TRUNK_BLOCKS` for cached conv5 features).
    pub fn forward_from(&self, tape: &mut Tape, bound: &BoundParams, input: Var, from: usize) -> Result<Forward> {
        let conv5 = if from == TRUNK_BLOCKS {
            input
        } else {
            let h = self.trunk_forward(tape, bound, input, from, TRUNK_BLOCKS)?;
            tape.flatten(h)?
        };
        let logits = self.heads_forward(tape, bound, conv5)?;
        Ok(Forward { conv5, logits })
    }

    /// Activations after 0-based block `to - 1` for a batch, computed without gradients.
    /// With `to == TRUNK_BLOCKS` the result is the flattened conv5 feature matrix.
    pub fn activations(&self, images: &Tensor, to: usize) -> Result<Tensor> {
        let batch = images.shape()[0];
        let mut rows: Vec<f64> = Vec::new();
        let mut row_shape = Vec::new();
        for start in (0..batch).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(batch)).collect();
            let chunk = images.select_outer(&idx)?;
            let mut tape = Tape::new();
            let bound = self.bind_constants(&mut tape, |p| matches!(p.group, ParamGroup::Trunk { block } if block <= to))?;
            let x = tape.constant(chunk)?;
            let mut h = self.trunk_forward(&mut tape, &bound, x, 0, to)?;
            if to == TRUNK_BLOCKS {
                h = tape.flatten(h)?;
            }
            let v = tape.value(h);
            row_shape = v.shape()[1..].to_vec();
            rows.extend_from_slice(v.data());
        }
        let mut shape = vec![batch];
        shape.extend(row_shape);
        Ok(Tensor::new(shape, rows)?)
    }

    /// Per-attribute logits for a batch, computed without gradients.
    pub fn predict_logits(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let batch = images.shape()[0];
        let mut per_attr: Vec<Vec<f64>> = vec![Vec::new(); self.schema.n_attr()];
        for start in (0..batch).step_by(EVAL_CHUNK) {
            let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(batch)).collect();
            let chunk = images.select_outer(&idx)?;
            let mut tape = Tape::new();
            let bound = self.bind_constants(&mut tape, |_| true)?;
            let x = tape.constant(chunk)?;
            let out = self.forward(&mut tape, &bound, x)?;
            for (acc, l) in per_attr.iter_mut().zip(&out.logits) {
                acc.extend_from_slice(tape.value(*l).data());
            }
        }
        per_attr
            .into_iter()
            .enumerate()
            .map(|(i, d)| Ok(Tensor::new(vec![batch, self.schema.cardinality(i)], d)?))
            .collect()
    }

    fn bind_constants(&self, tape: &mut Tape, keep: impl Fn(&Param) -> bool) -> Result<BoundParams> {
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            vars.push(if keep(p) { Some(tape.constant(p.tensor.clone())?) } else { None });
        }
        Ok(BoundParams { vars })
    }

    pub(crate) fn same_architecture(&self, other: &MtnModel) -> bool {
        self.schema == other.schema && self.trunk == other.trunk && self.hidden == other.hidden
    }
}

const EVAL_CHUNK: usize = 64;

fn init_weight(rng: &mut ChaCha8Rng, prefix: &str, group: ParamGroup, shape: &[usize], fan_in: usize, gain: f64) -> Param {
    let std = (gain / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Param {
        name: format!("{prefix}.weight"),
        group,
        role: ParamRole::Weight,
        tensor: Tensor::new(shape.to_vec(), data).expect("shape matches data"),
        frozen: false,
    }
}

fn zero_bias(prefix: &str, group: ParamGroup, n: usize) -> Param {
    Param { name: format!("{prefix}.bias"), group, role: ParamRole::Bias, tensor: Tensor::zeros(&[n]), frozen: false }
}

/// Which stream of a [`ThreeStreamModel`] a tensor lives in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    Source,
    Target,
}

/// Cross-domain assembly: one source network that serves both the positive
/// and negative source inputs, and an independent target network.
#[derive(Debug, Clone, PartialEq)]
pub struct ThreeStreamModel {
    pub source: MtnModel,
    pub target: MtnModel,
}

impl ThreeStreamModel {
    /// Installs the cross-domain freeze plan: only target conv5 and the FC
    /// layers of both streams stay trainable.
    pub fn build(mut source: MtnModel, mut target: MtnModel) -> Result<Self> {
        if !source.same_architecture(&target) {
            return Err(CoreError::contract("source and target networks differ in schema or configuration"));
        }
        let src_mask = FreezeMask::fc_only(&source);
        source.apply_freeze(&src_mask)?;
        let tgt_mask = FreezeMask::conv5_and_fc(&target);
        target.apply_freeze(&tgt_mask)?;
        Ok(ThreeStreamModel { source, target })
    }

    /// Same wiring without freezing anything, for joint end-to-end training.
    pub fn build_unfrozen(mut source: MtnModel, mut target: MtnModel) -> Result<Self> {
        if !source.same_architecture(&target) {
            return Err(CoreError::contract("source and target networks differ in schema or configuration"));
        }
        let m = FreezeMask::uniform(&source, false);
        source.apply_freeze(&m)?;
        target.apply_freeze(&m)?;
        Ok(ThreeStreamModel { source, target })
    }

    pub fn trainable_set(&self) -> Vec<(Stream, String)> {
        let mut out = Vec::new();
        for (stream, m) in [(Stream::Source, &self.source), (Stream::Target, &self.target)] {
            out.extend(m.trainable_names().into_iter().map(|n| (stream, n.to_string())));
        }
        out
    }
}

/// Bound parameters for both streams of a [`ThreeStreamModel`] on one tape.
/// The positive and negative source slots both run through `source`.
#[derive(Debug, Clone)]
pub struct BoundStreams {
    pub source: BoundParams,
    pub target: BoundParams,
}

impl ThreeStreamModel {
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundStreams> {
        Ok(BoundStreams { source: self.source.bind(tape)?, target: self.target.bind(tape)? })
    }

    pub fn forward_target(&self, tape: &mut Tape, b: &BoundStreams, images: Var) -> Result<Forward> {
        self.target.forward(tape, &b.target, images)
    }

    pub fn forward_positive(&self, tape: &mut Tape, b: &BoundStreams, images: Var) -> Result<Forward> {
        self.source.forward(tape, &b.source, images)
    }

    pub fn forward_negative(&self, tape: &mut Tape, b: &BoundStreams, images: Var) -> Result<Forward> {
        self.source.forward(tape, &b.source, images)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_trunk() -> TrunkConfig {
        TrunkConfig {
            in_channels: 3,
            input_size: 8,
            blocks: [
                NinBlock::same(4, true),
                NinBlock::same(4, false),
                NinBlock::same(4, false),
                NinBlock::same(4, true),
                NinBlock::same(4, false),
            ],
            pool_kernel: 2,
            pool_stride: 2,
        }
    }

    #[test]
    fn default_trunk_shapes() {
        let t = TrunkConfig::default();
        let shapes = t.output_shapes().unwrap();
        assert_eq!(shapes, [(16, 16), (32, 8), (64, 8), (64, 4), (64, 4)]);
        assert_eq!(t.feature_len().unwrap(), 1024);
    }

    #[test]
    fn zero_attribute_schema_rejected() {
        let schema = AttributeSchema::new(vec![]).unwrap();
        assert!(matches!(MtnModel::build(&schema, small_trunk(), (4, 4), 0), Err(CoreError::Contract(_))));
    }

    #[test]
    fn freeze_mask_must_cover_known_names() {
        let schema = AttributeSchema::from_pairs(&[("a", 2)]).unwrap();
        let mut m = MtnModel::build(&schema, small_trunk(), (4, 4), 0).unwrap();
        let mut mask = FreezeMask::uniform(&m, true);
        mask.0.insert("nope.weight".into(), true);
        assert!(m.apply_freeze(&mask).is_err());
        let mut partial = FreezeMask::uniform(&m, true);
        partial.0.remove("conv1.0.weight");
        assert!(m.apply_freeze(&partial).is_err());
    }

    #[test]
    fn parameter_count_matches_allocation() {
        let schema = AttributeSchema::from_pairs(&[("a", 4), ("b", 3), ("c", 2)]).unwrap();
        let m = MtnModel::build(&schema, small_trunk(), (5, 6), 1).unwrap();
        assert_eq!(m.count_parameters(), MtnModel::parameter_count(&schema, &small_trunk(), (5, 6)).unwrap());
    }

    #[test]
    fn three_stream_rejects_mismatched_schema() {
        let a = AttributeSchema::from_pairs(&[("a", 2)]).unwrap();
        let b = AttributeSchema::from_pairs(&[("a", 3)]).unwrap();
        let s = MtnModel::build(&a, small_trunk(), (4, 4), 0).unwrap();
        let t = MtnModel::build(&b, small_trunk(), (4, 4), 0).unwrap();
        assert!(matches!(ThreeStreamModel::build(s, t), Err(CoreError::Contract(_))));
    }
}
