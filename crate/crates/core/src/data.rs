//! Procedural cross-domain garment renders.
//!
//! Every sample is drawn from a latent attribute vector. SOURCE renders show
//! the garment centred on a plain background; TARGET renders of the same
//! latent add background clutter, translation jitter, occlusion, brightness
//! changes and pixel noise. A subset of latents is rendered in both domains
//! and linked by a shared pair id.
//!
//! Visual factors are bound to attribute positions: 0 colour, 1 pattern,
//! 2 silhouette, 3 collar marker. Schemas with more than four attributes are
//! not renderable.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use mtct_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::losses::LabelBatch;
use crate::rng::{derive_seed, substream};
use crate::schema::AttributeSchema;

pub const CHANNELS: usize = 3;
pub const DEFAULT_IMAGE_SIZE: usize = 32;

const PALETTE: [[f64; 3]; 8] = [
    [0.85, 0.12, 0.12], // red
    [0.15, 0.70, 0.20], // green
    [0.15, 0.25, 0.85], // blue
    [0.90, 0.82, 0.12], // yellow
    [0.60, 0.20, 0.75], // purple
    [0.95, 0.55, 0.10], // orange
    [0.10, 0.75, 0.80], // cyan
    [0.45, 0.30, 0.15], // brown
];
const MAX_PATTERNS: usize = 4;
const MAX_SHAPES: usize = 4;
const MAX_COLLARS: usize = 4;
const SOURCE_BACKGROUND: f64 = 0.92;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Domain::Source => "SOURCE",
            Domain::Target => "TARGET",
        })
    }
}

impl FromStr for Domain {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SOURCE" => Ok(Domain::Source),
            "TARGET" => Ok(Domain::Target),
            other => Err(CoreError::format("domain", format!("unknown domain {other:?}"))),
        }
    }
}

/// One value index per schema attribute.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LatentGarment {
    pub values: Vec<usize>,
}

impl LatentGarment {
    pub fn random(schema: &AttributeSchema, rng: &mut impl Rng) -> Self {
        LatentGarment { values: schema.attributes().iter().map(|a| rng.random_range(0..a.cardinality)).collect() }
    }

    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        if self.values.len() != schema.n_attr() {
            return Err(CoreError::contract(format!("latent has {} values for {} attributes", self.values.len(), schema.n_attr())));
        }
        for (i, &v) in self.values.iter().enumerate() {
            if v >= schema.cardinality(i) {
                return Err(CoreError::contract(format!("latent value {v} out of range for attribute {i}")));
            }
        }
        Ok(())
    }

    fn value(&self, attr: usize) -> usize {
        self.values.get(attr).copied().unwrap_or(0)
    }
}

/// Corruptions applied to TARGET renders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseProfile {
    /// Clutter rectangles drawn behind the garment: uniform in `0..=max_clutter`.
    pub max_clutter: usize,
    /// Maximum garment offset from centre, in pixels at 32x32 scale.
    pub jitter: usize,
    pub brightness_min: f64,
    pub brightness_max: f64,
    pub noise_std: f64,
    pub occlusion_prob: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        NoiseProfile { max_clutter: 4, jitter: 4, brightness_min: 0.6, brightness_max: 1.25, noise_std: 0.2, occlusion_prob: 0.5 }
    }
}

impl NoiseProfile {
    pub fn clean() -> Self {
        NoiseProfile { max_clutter: 0, jitter: 0, brightness_min: 1.0, brightness_max: 1.0, noise_std: 0.0, occlusion_prob: 0.0 }
    }
}

/// Pixel box `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

fn check_renderable(schema: &AttributeSchema) -> Result<()> {
    let limits = [PALETTE.len(), MAX_PATTERNS, MAX_SHAPES, MAX_COLLARS];
    if schema.n_attr() > limits.len() {
        return Err(CoreError::contract(format!("renderer supports at most {} attributes", limits.len())));
    }
    for (i, a) in schema.attributes().iter().enumerate() {
        if a.cardinality > limits[i] {
            return Err(CoreError::contract(format!(
                "attribute {} has {} values; the renderer supports {}",
                a.name, a.cardinality, limits[i]
            )));
        }
    }
    Ok(())
}

fn scaled(v: usize, size: usize) -> usize {
    ((v * size) as f64 / 32.0).round().max(1.0) as usize
}

/// Garment width and height for a silhouette value, at image size `size`.
fn garment_dims(shape: usize, size: usize) -> (usize, usize) {
    let (w, h) = match shape {
        0 => (12, 20),
        1 => (16, 16),
        2 => (20, 12),
        _ => (10, 10),
    };
    (scaled(w, size), scaled(h, size))
}

/// Bounding box of the garment in a SOURCE render (centred, no jitter).
pub fn garment_box(latent: &LatentGarment, size: usize) -> PixelBox {
    let (w, h) = garment_dims(latent.value(2), size);
    let x0 = (size - w) / 2;
    let y0 = (size - h) / 2;
    PixelBox { x0, y0, x1: x0 + w, y1: y0 + h }
}

struct Canvas {
    size: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn new(size: usize, bg: [f64; 3]) -> Self {
        let mut px = vec![0.0; CHANNELS * size * size];
        for (c, plane) in px.chunks_mut(size * size).enumerate() {
            plane.iter_mut().for_each(|v| *v = bg[c]);
        }
        Canvas { size, px }
    }

    fn set(&mut self, x: isize, y: isize, rgb: [f64; 3]) {
        if x < 0 || y < 0 || x >= self.size as isize || y >= self.size as isize {
            return;
        }
        let n = self.size * self.size;
        let i = y as usize * self.size + x as usize;
        for (c, v) in rgb.iter().enumerate() {
            self.px[c * n + i] = *v;
        }
    }

    fn fill(&mut self, x0: isize, y0: isize, w: usize, h: usize, rgb: [f64; 3]) {
        for y in y0..y0 + h as isize {
            for x in x0..x0 + w as isize {
                self.set(x, y, rgb);
            }
        }
    }
}

fn draw_garment(canvas: &mut Canvas, latent: &LatentGarment, x0: isize, y0: isize, base: [f64; 3]) {
    let size = canvas.size;
    let (w, h) = garment_dims(latent.value(2), size);
    let period = scaled(3, size);
    let dark = base.map(|v| v * 0.35);
    for dy in 0..h {
        for dx in 0..w {
            let band_y = (dy / period) % 2 == 1;
            let band_x = (dx / period) % 2 == 1;
            let shaded = match latent.value(1) {
                0 => false,
                1 => band_y,
                2 => band_y ^ band_x,
                _ => band_x,
            };
            canvas.set(x0 + dx as isize, y0 + dy as isize, if shaded { dark } else { base });
        }
    }
    let (mw, mh) = (scaled(6, size), scaled(3, size));
    let mx = x0 + ((w - mw.min(w)) / 2) as isize;
    match latent.value(3) {
        0 => {}
        1 => canvas.fill(mx, y0, mw, mh, [0.05; 3]),
        2 => canvas.fill(mx, y0, mw, mh, [1.0; 3]),
        _ => {
            canvas.fill(x0, y0, mw / 2, mh, [0.05; 3]);
            canvas.fill(x0 + (w - mw / 2) as isize, y0, mw / 2, mh, [0.05; 3]);
        }
    }
}

/// Renders one `(3, size, size)` image with values in `[0, 1]`.
pub fn render_sample(
    schema: &AttributeSchema,
    latent: &LatentGarment,
    domain: Domain,
    noise: &NoiseProfile,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    check_renderable(schema)?;
    latent.validate(schema)?;
    let color = PALETTE[latent.value(0)];
    let tint: [f64; 3] = std::array::from_fn(|c| (color[c] * rng.random_range(0.95..1.05)).clamp(0.0, 1.0));
    let (w, h) = garment_dims(latent.value(2), size);
    let cx = ((size - w) / 2) as isize;
    let cy = ((size - h) / 2) as isize;
    let image = match domain {
        Domain::Source => {
            let mut canvas = Canvas::new(size, [SOURCE_BACKGROUND; 3]);
            draw_garment(&mut canvas, latent, cx, cy, tint);
            canvas.px
        }
        Domain::Target => {
            let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.95));
            let mut canvas = Canvas::new(size, bg);
            let clutter = if noise.max_clutter > 0 { rng.random_range(0..=noise.max_clutter) } else { 0 };
            for _ in 0..clutter {
                let cw = rng.random_range(scaled(4, size)..=scaled(12, size));
                let ch = rng.random_range(scaled(4, size)..=scaled(12, size));
                let x = rng.random_range(0..size) as isize - (cw / 2) as isize;
                let y = rng.random_range(0..size) as isize - (ch / 2) as isize;
                let rgb = PALETTE[rng.random_range(0..PALETTE.len())];
                canvas.fill(x, y, cw, ch, rgb);
            }
            let j = scaled(noise.jitter, size) as isize * (noise.jitter > 0) as isize;
            let ox = if j > 0 { rng.random_range(-j as i64..=j as i64) as isize } else { 0 };
            let oy = if j > 0 { rng.random_range(-j as i64..=j as i64) as isize } else { 0 };
            draw_garment(&mut canvas, latent, cx + ox, cy + oy, tint);
            if noise.occlusion_prob > 0.0 && rng.random_bool(noise.occlusion_prob.min(1.0)) {
                let side = rng.random_range(scaled(5, size)..=scaled(9, size));
                let x = cx + ox + rng.random_range(0..w) as isize - (side / 2) as isize;
                let y = cy + oy + rng.random_range(0..h) as isize - (side / 2) as isize;
                let g = rng.random_range(0.2..0.8);
                canvas.fill(x, y, side, side, [g; 3]);
            }
            let gain = if noise.brightness_max > noise.brightness_min {
                rng.random_range(noise.brightness_min..noise.brightness_max)
            } else {
                noise.brightness_min
            };
            let normal = (noise.noise_std > 0.0).then(|| Normal::new(0.0, noise.noise_std).expect("finite std"));
            for v in canvas.px.iter_mut() {
                let mut x = *v * gain;
                if let Some(n) = &normal {
                    x += n.sample(rng);
                }
                *v = x.clamp(0.0, 1.0);
            }
            canvas.px
        }
    };
    Ok(Tensor::new(vec![CHANNELS, size, size], image)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub domain: Domain,
    pub pair_id: Option<u64>,
    /// Annotated labels; `None` where the attribute is unannotated.
    pub labels: Vec<Option<usize>>,
    /// Ground-truth attribute values, annotated or not.
    pub latent: LatentGarment,
    pub image: Tensor,
}

/// Parameters for [`generate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub n_source: usize,
    pub n_target: usize,
    pub n_pairs: usize,
    pub noise: NoiseProfile,
    pub missing_rate: f64,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            n_source: 2000,
            n_target: 400,
            n_pairs: 200,
            noise: NoiseProfile::default(),
            missing_rate: 0.1,
            image_size: DEFAULT_IMAGE_SIZE,
            seed: 1,
        }
    }
}

/// A set of rendered samples. Image reads are counted per domain.
#[derive(Debug)]
pub struct Dataset {
    schema: AttributeSchema,
    image_size: usize,
    samples: Vec<Sample>,
    source_reads: AtomicUsize,
    target_reads: AtomicUsize,
}

impl Clone for Dataset {
    fn clone(&self) -> Self {
        Dataset::from_samples(self.schema.clone(), self.image_size, self.samples.clone())
    }
}

impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema && self.image_size == other.image_size && self.samples == other.samples
    }
}

fn missing_mask(n_attr: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..n_attr).map(|_| rate > 0.0 && rng.random_bool(rate.min(1.0))).collect();
    if mask.iter().all(|&m| m) {
        let keep = rng.random_range(0..n_attr);
        mask[keep] = false;
    }
    mask
}

/// Generates `n_source` SOURCE and `n_target` TARGET samples of which
/// `n_pairs` are cross-domain pairs sharing a latent. Deterministic in `spec.seed`;
/// each sample renders from its own substream.
pub fn generate_dataset(schema: &AttributeSchema, spec: &DataSpec) -> Result<Dataset> {
    check_renderable(schema)?;
    if spec.n_pairs > spec.n_source.min(spec.n_target) {
        return Err(CoreError::contract(format!(
            "n_pairs {} exceeds min(n_source {}, n_target {})",
            spec.n_pairs, spec.n_source, spec.n_target
        )));
    }
    if !(0.0..1.0).contains(&spec.missing_rate) {
        return Err(CoreError::contract(format!("missing_rate must lie in [0, 1), got {}", spec.missing_rate)));
    }
    if spec.image_size < 16 {
        return Err(CoreError::contract("image_size must be at least 16"));
    }
    let pair_latents: Vec<LatentGarment> =
        (0..spec.n_pairs).map(|p| LatentGarment::random(schema, &mut substream(spec.seed, "pair-latent", p as u64))).collect();
    let mut samples = Vec::with_capacity(spec.n_source + spec.n_target);
    let total = spec.n_source + spec.n_target;
    for id in 0..total {
        let (domain, local) = if id < spec.n_source { (Domain::Source, id) } else { (Domain::Target, id - spec.n_source) };
        let mut rng = substream(spec.seed, "sample", id as u64);
        let (latent, pair_id) = if local < spec.n_pairs {
            (pair_latents[local].clone(), Some(local as u64))
        } else {
            (LatentGarment::random(schema, &mut rng), None)
        };
        let mask = missing_mask(schema.n_attr(), spec.missing_rate, &mut rng);
        let labels = latent.values.iter().zip(&mask).map(|(&v, &m)| (!m).then_some(v)).collect();
        let image = render_sample(schema, &latent, domain, &spec.noise, spec.image_size, &mut rng)?;
        samples.push(Sample { id: id as u64, domain, pair_id, labels, latent, image });
    }
    Ok(Dataset::from_samples(schema.clone(), spec.image_size, samples))
}

/// Sample ids of held-out splits start here, keeping them disjoint from training ids.
pub const HELDOUT_ID_OFFSET: u64 = 1 << 32;

/// Sizes of the held-out evaluation split generated alongside a training spec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeldoutSpec {
    pub n_target: usize,
    pub n_pairs: usize,
}

impl Default for HeldoutSpec {
    fn default() -> Self {
        HeldoutSpec { n_target: 600, n_pairs: 200 }
    }
}

/// Held-out split for `train`: `n_target` TARGET test images, the first
/// `n_pairs` of them paired with one SOURCE render each. Rendering noise,
/// label masking and image size follow `train`; the seed is derived from it.
pub fn generate_heldout(schema: &AttributeSchema, train: &DataSpec, held: &HeldoutSpec) -> Result<Dataset> {
    let spec = DataSpec {
        n_source: held.n_pairs,
        n_target: held.n_target,
        n_pairs: held.n_pairs,
        seed: derive_seed(train.seed, "heldout", 0),
        ..train.clone()
    };
    let mut d = generate_dataset(schema, &spec)?;
    for s in &mut d.samples {
        s.id += HELDOUT_ID_OFFSET;
    }
    Ok(d)
}

impl Dataset {
    pub fn from_samples(schema: AttributeSchema, image_size: usize, samples: Vec<Sample>) -> Self {
        Dataset { schema, image_size, samples, source_reads: AtomicUsize::new(0), target_reads: AtomicUsize::new(0) }
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, domain: Domain) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].domain == domain).collect()
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.samples.iter().filter(|s| s.domain == domain).count()
    }

    /// `(target index, source index)` for every cross-domain pair, ordered by pair id.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut by_pair: HashMap<u64, (Option<usize>, Option<usize>)> = HashMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(p) = s.pair_id {
                let e = by_pair.entry(p).or_default();
                match s.domain {
                    Domain::Target => e.0 = Some(i),
                    Domain::Source => e.1 = Some(i),
                }
            }
        }
        let mut out: Vec<(u64, usize, usize)> =
            by_pair.into_iter().filter_map(|(p, (t, s))| Some((p, t?, s?))).collect();
        out.sort_unstable();
        out.into_iter().map(|(_, t, s)| (t, s)).collect()
    }

    pub fn pair_count(&self) -> usize {
        self.pairs().len()
    }

    /// Number of image reads served for each domain so far.
    pub fn reads(&self, domain: Domain) -> usize {
        match domain {
            Domain::Source => self.source_reads.load(Ordering::Relaxed),
            Domain::Target => self.target_reads.load(Ordering::Relaxed),
        }
    }

    /// Stacks the selected images into a `(batch, 3, size, size)` tensor.
    pub fn images(&self, idx: &[usize]) -> Result<Tensor> {
        let mut refs = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = self.samples.get(i).ok_or_else(|| CoreError::contract(format!("sample index {i} out of range")))?;
            match s.domain {
                Domain::Source => self.source_reads.fetch_add(1, Ordering::Relaxed),
                Domain::Target => self.target_reads.fetch_add(1, Ordering::Relaxed),
            };
            refs.push(&s.image);
        }
        Ok(Tensor::stack(&refs)?)
    }

    pub fn labels(&self, idx: &[usize]) -> Result<LabelBatch> {
        let rows = idx.iter().map(|&i| self.samples[i].labels.clone()).collect();
        LabelBatch::new(self.schema.n_attr(), rows)
    }

    /// New dataset holding the selected samples (ids preserved).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset::from_samples(self.schema.clone(), self.image_size, idx.iter().map(|&i| self.samples[i].clone()).collect())
    }

    /// Samples of one domain only.
    pub fn domain_subset(&self, domain: Domain) -> Dataset {
        self.subset(&self.indices(domain))
    }

    /// Keeps a seeded `fraction` of TARGET samples, drawn separately from the
    /// paired and unpaired targets so the pair share is preserved. Subsets for
    /// smaller fractions are nested in those for larger ones. Source samples
    /// whose partner is dropped lose their pair id.
    pub fn subsample_target(&self, fraction: f64, seed: u64) -> Result<Dataset> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(CoreError::contract(format!("target fraction must lie in (0, 1], got {fraction}")));
        }
        let mut paired: Vec<usize> = Vec::new();
        let mut unpaired: Vec<usize> = Vec::new();
        for i in self.indices(Domain::Target) {
            if self.samples[i].pair_id.is_some() {
                paired.push(i);
            } else {
                unpaired.push(i);
            }
        }
        let mut rng = substream(seed, "target-subsample", 0);
        paired.shuffle(&mut rng);
        unpaired.shuffle(&mut rng);
        let keep_p = (paired.len() as f64 * fraction).round() as usize;
        let keep_u = (unpaired.len() as f64 * fraction).round() as usize;
        if keep_p == 0 {
            return Err(CoreError::contract(format!("target fraction {fraction} leaves no cross-domain pairs")));
        }
        let mut kept_targets: Vec<usize> = paired[..keep_p].iter().chain(&unpaired[..keep_u]).copied().collect();
        kept_targets.sort_unstable();
        let live_pairs: std::collections::HashSet<u64> =
            kept_targets.iter().filter_map(|&i| self.samples[i].pair_id).collect();
        let mut samples = Vec::new();
        for (i, s) in self.samples.iter().enumerate() {
            match s.domain {
                Domain::Source => {
                    let mut s = s.clone();
                    if s.pair_id.is_some_and(|p| !live_pairs.contains(&p)) {
                        s.pair_id = None;
                    }
                    samples.push(s);
                }
                Domain::Target => {
                    if kept_targets.binary_search(&i).is_ok() {
                        samples.push(s.clone());
                    }
                }
            }
        }
        Ok(Dataset::from_samples(self.schema.clone(), self.image_size, samples))
    }

    /// Writes the plain-text index and the raw little-endian image blob.
    pub fn write(&self, index_path: &Path, blob_path: &Path) -> Result<()> {
        let file = fs::File::create(index_path).map_err(|e| CoreError::io(index_path, e))?;
        let mut idx = BufWriter::new(file);
        let io = |e| CoreError::io(index_path, e);
        writeln!(idx, "# mtct-dataset v1").map_err(io)?;
        writeln!(idx, "# schema {}", self.schema).map_err(io)?;
        writeln!(idx, "# image {} {} {}", CHANNELS, self.image_size, self.image_size).map_err(io)?;
        writeln!(idx, "# columns id domain pair_id labels latent").map_err(io)?;
        for s in &self.samples {
            let pair = s.pair_id.map_or("-".to_string(), |p| p.to_string());
            let labels: Vec<String> = s.labels.iter().map(|l| l.map_or("-1".to_string(), |v| v.to_string())).collect();
            let latent: Vec<String> = s.latent.values.iter().map(|v| v.to_string()).collect();
            writeln!(idx, "{}\t{}\t{}\t{}\t{}", s.id, s.domain, pair, labels.join(","), latent.join(",")).map_err(io)?;
        }
        idx.flush().map_err(io)?;

        let file = fs::File::create(blob_path).map_err(|e| CoreError::io(blob_path, e))?;
        let mut blob = BufWriter::new(file);
        for s in &self.samples {
            for v in s.image.data() {
                blob.write_all(&v.to_le_bytes()).map_err(|e| CoreError::io(blob_path, e))?;
            }
        }
        blob.flush().map_err(|e| CoreError::io(blob_path, e))
    }

    pub fn read(index_path: &Path, blob_path: &Path) -> Result<Dataset> {
        let file = fs::File::open(index_path).map_err(|e| CoreError::io(index_path, e))?;
        let mut schema: Option<AttributeSchema> = None;
        let mut size: Option<usize> = None;
        let mut rows = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| CoreError::io(index_path, e))?;
            if let Some(rest) = line.strip_prefix("# schema ") {
                schema = Some(rest.trim().parse()?);
            } else if let Some(rest) = line.strip_prefix("# image ") {
                let dims: Vec<usize> = rest.split_whitespace().filter_map(|d| d.parse().ok()).collect();
                if dims.len() != 3 || dims[0] != CHANNELS || dims[1] != dims[2] {
                    return Err(CoreError::format("dataset index", format!("bad image header {rest:?}")));
                }
                size = Some(dims[1]);
            } else if line.starts_with('#') || line.trim().is_empty() {
                continue;
            } else {
                rows.push(line);
            }
        }
        let schema = schema.ok_or_else(|| CoreError::format("dataset index", "missing schema header"))?;
        let size = size.ok_or_else(|| CoreError::format("dataset index", "missing image header"))?;
        let mut blob = Vec::new();
        fs::File::open(blob_path)
            .and_then(|mut f| f.read_to_end(&mut blob))
            .map_err(|e| CoreError::io(blob_path, e))?;
        let per_image = CHANNELS * size * size;
        if blob.len() != rows.len() * per_image * 8 {
            return Err(CoreError::format(
                "dataset blob",
                format!("{} bytes for {} images of {} values", blob.len(), rows.len(), per_image),
            ));
        }
        let mut samples = Vec::with_capacity(rows.len());
        for (k, row) in rows.iter().enumerate() {
            let f: Vec<&str> = row.split('\t').collect();
            if f.len() != 5 {
                return Err(CoreError::format("dataset index", format!("expected 5 columns in {row:?}")));
            }
            let bad = |what: &str| CoreError::format("dataset index", format!("bad {what} in {row:?}"));
            let id = f[0].parse().map_err(|_| bad("id"))?;
            let domain = f[1].parse()?;
            let pair_id = if f[2] == "-" { None } else { Some(f[2].parse().map_err(|_| bad("pair_id"))?) };
            let labels = f[3]
                .split(',')
                .map(|v| match v.parse::<i64>() {
                    Ok(-1) => Ok(None),
                    Ok(x) if x >= 0 => Ok(Some(x as usize)),
                    _ => Err(bad("label")),
                })
                .collect::<Result<Vec<_>>>()?;
            let values = f[4].split(',').map(|v| v.parse().map_err(|_| bad("latent"))).collect::<Result<Vec<usize>>>()?;
            let latent = LatentGarment { values };
            latent.validate(&schema)?;
            if labels.len() != schema.n_attr() {
                return Err(bad("label count"));
            }
            for (j, l) in labels.iter().enumerate() {
                if l.is_some_and(|v| v >= schema.cardinality(j)) {
                    return Err(bad("label range"));
                }
            }
            let bytes = &blob[k * per_image * 8..(k + 1) * per_image * 8];
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let image = Tensor::new(vec![CHANNELS, size, size], data)?;
            samples.push(Sample { id, domain, pair_id, labels, latent, image });
        }
        Ok(Dataset::from_samples(schema, size, samples))
    }
}

/// Aligned `(target, positive source, negative source)` sample indices, plus
/// an equally sized minibatch of non-paired source samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripletBatch {
    pub target: Vec<usize>,
    pub positive: Vec<usize>,
    pub negative: Vec<usize>,
    pub source_batch: Vec<usize>,
}

/// Precomputed pair and latent tables for drawing triplets.
///
/// Positives are drawn uniformly over pairs with replacement. Negatives are
/// drawn uniformly over the distinct source latents that differ from the
/// target's latent, then uniformly among source samples with that latent.
/// With `hard_negatives`, latents differing in exactly one attribute are
/// preferred when any exist.
#[derive(Debug, Clone)]
pub struct TripletSampler {
    pairs: Vec<(usize, usize)>,
    latents: Vec<LatentGarment>,
    members: Vec<Vec<usize>>,
    pair_latent: Vec<usize>,
    unpaired_source: Vec<usize>,
    hard_negatives: bool,
}

impl TripletSampler {
    pub fn new(dataset: &Dataset, hard_negatives: bool) -> Result<Self> {
        let pairs = dataset.pairs();
        if pairs.is_empty() {
            return Err(CoreError::contract("dataset has no cross-domain pairs"));
        }
        let mut latent_ids: HashMap<&LatentGarment, usize> = HashMap::new();
        let mut latents = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        let samples = dataset.samples();
        for i in dataset.indices(Domain::Source) {
            let l = &samples[i].latent;
            let id = *latent_ids.entry(l).or_insert_with(|| {
                latents.push(l.clone());
                members.push(Vec::new());
                latents.len() - 1
            });
            members[id].push(i);
        }
        if latents.len() < 2 {
            return Err(CoreError::contract("all source latents are identical; no valid negative exists"));
        }
        let pair_latent = pairs.iter().map(|&(_, s)| latent_ids[&samples[s].latent]).collect();
        let mut unpaired_source: Vec<usize> =
            dataset.indices(Domain::Source).into_iter().filter(|&i| samples[i].pair_id.is_none()).collect();
        if unpaired_source.is_empty() {
            unpaired_source = dataset.indices(Domain::Source);
        }
        Ok(TripletSampler { pairs, latents, members, pair_latent, unpaired_source, hard_negatives })
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn distinct_source_latents(&self) -> usize {
        self.latents.len()
    }

    pub fn sample(&self, batch: usize, rng: &mut ChaCha8Rng) -> TripletBatch {
        let mut out = TripletBatch {
            target: Vec::with_capacity(batch),
            positive: Vec::with_capacity(batch),
            negative: Vec::with_capacity(batch),
            source_batch: Vec::with_capacity(batch),
        };
        for _ in 0..batch {
            let p = rng.random_range(0..self.pairs.len());
            let (t, s) = self.pairs[p];
            let own = self.pair_latent[p];
            let neg_latent = self.negative_latent(own, rng);
            let members = &self.members[neg_latent];
            out.target.push(t);
            out.positive.push(s);
            out.negative.push(members[rng.random_range(0..members.len())]);
        }
        for _ in 0..batch {
            out.source_batch.push(self.unpaired_source[rng.random_range(0..self.unpaired_source.len())]);
        }
        out
    }

    fn negative_latent(&self, own: usize, rng: &mut ChaCha8Rng) -> usize {
        if self.hard_negatives {
            let near: Vec<usize> = (0..self.latents.len())
                .filter(|&k| {
                    k != own
                        && self.latents[k].values.iter().zip(&self.latents[own].values).filter(|(a, b)| a != b).count() == 1
                })
                .collect();
            if !near.is_empty() {
                return near[rng.random_range(0..near.len())];
            }
        }
        let r = rng.random_range(0..self.latents.len() - 1);
        if r >= own {
            r + 1
        } else {
            r
        }
    }
}

/// One-shot convenience over [`TripletSampler`].
pub fn sample_triplets(dataset: &Dataset, batch: usize, rng: &mut ChaCha8Rng) -> Result<TripletBatch> {
    Ok(TripletSampler::new(dataset, false)?.sample(batch, rng))
}
