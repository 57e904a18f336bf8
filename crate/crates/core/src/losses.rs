//! Training objectives: the multi-task softmax loss, the t-STE triplet
//! loss, the hinge triplet-ranking baseline and their Stage-2 combination.

use mtct_tensor::{Tape, Tensor, TensorError, Var};

use crate::error::{CoreError, Result};

/// Per-attribute labels for a batch; `None` marks an unannotated attribute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    n_attr: usize,
    labels: Vec<Option<usize>>,
}

impl LabelBatch {
    pub fn new(n_attr: usize, rows: Vec<Vec<Option<usize>>>) -> Result<Self> {
        if rows.iter().any(|r| r.len() != n_attr) {
            return Err(CoreError::contract(format!("every label row must have {n_attr} entries")));
        }
        Ok(LabelBatch { n_attr, labels: rows.into_iter().flatten().collect() })
    }

    pub fn batch(&self) -> usize {
        if self.n_attr == 0 {
            0
        } else {
            self.labels.len() / self.n_attr
        }
    }

    pub fn n_attr(&self) -> usize {
        self.n_attr
    }

    pub fn get(&self, row: usize, attr: usize) -> Option<usize> {
        self.labels[row * self.n_attr + attr]
    }

    pub fn row(&self, row: usize) -> &[Option<usize>] {
        &self.labels[row * self.n_attr..(row + 1) * self.n_attr]
    }

    pub fn present(&self, row: usize, attr: usize) -> bool {
        self.get(row, attr).is_some()
    }
}

/// `(1/n_bs) Σ_i Σ_{j present} −log softmax(logits_j)_i[a_ij]`.
///
/// Masked entries contribute exactly zero value and zero gradient.
pub fn multitask_softmax_loss(tape: &mut Tape, logits: &[Var], labels: &LabelBatch) -> Result<Var> {
    if logits.len() != labels.n_attr() || logits.is_empty() {
        return Err(CoreError::contract(format!(
            "{} logit tensors for {} labelled attributes",
            logits.len(),
            labels.n_attr()
        )));
    }
    let batch = labels.batch();
    let mut any_present = false;
    let mut total: Option<Var> = None;
    for (j, &l) in logits.iter().enumerate() {
        let shape = tape.shape(l).to_vec();
        if shape.len() != 2 || shape[0] != batch {
            return Err(TensorError::Dimension {
                op: "multitask_softmax_loss",
                detail: format!("attribute {j} logits {shape:?} for batch {batch}"),
            }
            .into());
        }
        let card = shape[1];
        let mut onehot = vec![0.0; batch * card];
        for i in 0..batch {
            if let Some(a) = labels.get(i, j) {
                if a >= card {
                    return Err(CoreError::contract(format!("label {a} out of range for attribute {j} with {card} values")));
                }
                onehot[i * card + a] = 1.0;
                any_present = true;
            }
        }
        let mask = tape.constant(Tensor::new(shape, onehot)?)?;
        let lsm = tape.log_softmax_rows(l)?;
        let picked = tape.mul(lsm, mask)?;
        let s = tape.sum(picked)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    if !any_present {
        return Err(CoreError::contract("every label in the batch is masked"));
    }
    let total = total.expect("at least one attribute");
    Ok(tape.mul_scalar(total, -1.0 / batch as f64)?)
}

/// Student-t kernel settings for t-STE; `beta` is always derived from `alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TsteConfig {
    alpha: f64,
}

impl TsteConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(CoreError::contract(format!("t-STE alpha must be positive, got {alpha}")));
        }
        Ok(TsteConfig { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        -(1.0 + self.alpha) / 2.0
    }
}

impl Default for TsteConfig {
    fn default() -> Self {
        TsteConfig { alpha: 1.0 }
    }
}

fn check_triplet_shapes(tape: &Tape, op: &'static str, ft: Var, fp: Var, fn_: Var) -> Result<()> {
    let (a, b, c) = (tape.shape(ft), tape.shape(fp), tape.shape(fn_));
    if a.len() != 2 || a != b || a != c {
        return Err(TensorError::Dimension { op, detail: format!("features {a:?}, {b:?}, {c:?}") }.into());
    }
    Ok(())
}

/// Row-wise squared Euclidean distance between two `(n, d)` feature matrices.
pub fn squared_distances(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.sum_rows(sq)?)
}

/// Mean over triplets of `−log( q_p / (q_p + q_n) )` with `q = (1 + d²/α)^β`.
///
/// This is the negated log-probability of the triplet being satisfied, so
/// it is nonnegative and minimised during training.
pub fn tste_loss(tape: &mut Tape, f_t: Var, f_ps: Var, f_ns: Var, cfg: &TsteConfig) -> Result<Var> {
    check_triplet_shapes(tape, "tste_loss", f_t, f_ps, f_ns)?;
    let dp = squared_distances(tape, f_t, f_ps)?;
    let dn = squared_distances(tape, f_t, f_ns)?;
    let log_kernel = |tape: &mut Tape, d: Var| -> Result<Var> {
        let scaled = tape.mul_scalar(d, 1.0 / cfg.alpha())?;
        let shifted = tape.add_scalar(scaled, 1.0)?;
        Ok(tape.log(shifted)?)
    };
    let lp = log_kernel(tape, dp)?;
    let ln = log_kernel(tape, dn)?;
    // Normalise the two kernel values in log space: with large distances or
    // large alpha the kernels themselves underflow.
    let n = tape.shape(lp)[0];
    let beta = cfg.beta();
    let to_p = tape.constant(Tensor::new(vec![1, 2], vec![beta, 0.0])?)?;
    let to_n = tape.constant(Tensor::new(vec![1, 2], vec![0.0, beta])?)?;
    let lp_col = tape.flatten(lp)?;
    let ln_col = tape.flatten(ln)?;
    let a = tape.matmul(lp_col, to_p)?;
    let b = tape.matmul(ln_col, to_n)?;
    let pair = tape.add(a, b)?;
    let log_prob = tape.log_softmax_rows(pair)?;
    let first: Vec<f64> = (0..n).flat_map(|_| [1.0, 0.0]).collect();
    let pick = tape.constant(Tensor::new(vec![n, 2], first)?)?;
    let picked = tape.mul(log_prob, pick)?;
    let total = tape.sum(picked)?;
    Ok(tape.mul_scalar(total, -1.0 / n as f64)?)
}

/// Mean over triplets of `max(0, d_p² − d_n² + margin)`.
pub fn triplet_ranking_loss(tape: &mut Tape, f_t: Var, f_ps: Var, f_ns: Var, margin: f64) -> Result<Var> {
    if !(margin > 0.0 && margin.is_finite()) {
        return Err(CoreError::contract(format!("triplet margin must be positive, got {margin}")));
    }
    check_triplet_shapes(tape, "triplet_ranking_loss", f_t, f_ps, f_ns)?;
    let dp = squared_distances(tape, f_t, f_ps)?;
    let dn = squared_distances(tape, f_t, f_ns)?;
    let diff = tape.sub(dp, dn)?;
    let shifted = tape.add_scalar(diff, margin)?;
    let hinge = tape.relu(shifted)?;
    Ok(tape.mean(hinge)?)
}

/// Relative weights of the source softmax and triplet terms in Stage-2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Weights {
    pub source: f64,
    pub triplet: f64,
}

impl Default for Stage2Weights {
    fn default() -> Self {
        Stage2Weights { source: 1.0, triplet: 1.0 }
    }
}

/// `target_softmax + λ_src · source_softmax + λ_tste · triplet`.
pub fn stage2_combined_loss(tape: &mut Tape, target_softmax: Var, source_softmax: Var, triplet: Var, w: Stage2Weights) -> Result<Var> {
    if !(w.source >= 0.0 && w.triplet >= 0.0) {
        return Err(CoreError::contract(format!("loss weights must be nonnegative, got {w:?}")));
    }
    for v in [target_softmax, source_softmax, triplet] {
        if tape.value(v).len() != 1 {
            return Err(CoreError::contract("combined loss inputs must be scalars"));
        }
    }
    let s = tape.mul_scalar(source_softmax, w.source)?;
    let t = tape.mul_scalar(triplet, w.triplet)?;
    let partial = tape.add(target_softmax, s)?;
    Ok(tape.add(partial, t)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_of(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    fn features(tape: &mut Tape, rows: &[&[f64]]) -> Var {
        let d = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        tape.constant(Tensor::new(vec![rows.len(), d], data).unwrap()).unwrap()
    }

    #[test]
    fn uniform_logits_give_sum_of_log_cardinalities() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        let b = tape.constant(Tensor::zeros(&[3, 4])).unwrap();
        let labels = LabelBatch::new(2, vec![vec![Some(1), Some(3)]; 3]).unwrap();
        let l = multitask_softmax_loss(&mut tape, &[a, b], &labels).unwrap();
        let expect = 2f64.ln() + 4f64.ln();
        assert!((scalar_of(&tape, l) - expect).abs() < 1e-12);
        assert!((expect - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn saturated_logits_give_near_zero_loss() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 3], vec![-30.0, 30.0, -30.0]).unwrap()).unwrap();
        let labels = LabelBatch::new(1, vec![vec![Some(1)]]).unwrap();
        let l = multitask_softmax_loss(&mut tape, &[a], &labels).unwrap();
        assert!(scalar_of(&tape, l) < 1e-9);
    }

    #[test]
    fn label_out_of_range_and_all_masked_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[1, 2])).unwrap();
        let bad = LabelBatch::new(1, vec![vec![Some(2)]]).unwrap();
        assert!(matches!(multitask_softmax_loss(&mut tape, &[a], &bad), Err(CoreError::Contract(_))));
        let masked = LabelBatch::new(1, vec![vec![None]]).unwrap();
        assert!(matches!(multitask_softmax_loss(&mut tape, &[a], &masked), Err(CoreError::Contract(_))));
    }

    #[test]
    fn masked_attributes_have_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.parameter(Tensor::new(vec![2, 2], vec![0.3, -0.2, 1.0, 0.5]).unwrap()).unwrap();
        let labels = LabelBatch::new(1, vec![vec![None], vec![Some(0)]]).unwrap();
        let l = multitask_softmax_loss(&mut tape, &[a], &labels).unwrap();
        let g = tape.backward(l).unwrap();
        let g = g.get(a).unwrap().data();
        assert_eq!(&g[..2], &[0.0, 0.0]);
        assert!(g[2] != 0.0);
    }

    #[test]
    fn tste_equal_distances_is_ln2() {
        let mut tape = Tape::new();
        let t = features(&mut tape, &[&[0.0, 0.0]]);
        let p = features(&mut tape, &[&[1.0, 0.0]]);
        let n = features(&mut tape, &[&[0.0, -1.0]]);
        let l = tste_loss(&mut tape, t, p, n, &TsteConfig::default()).unwrap();
        assert!((scalar_of(&tape, l) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tste_alpha_one_anchor() {
        let mut tape = Tape::new();
        let t = features(&mut tape, &[&[0.0]]);
        let p = features(&mut tape, &[&[0.0]]);
        let n = features(&mut tape, &[&[1.0]]);
        let l = tste_loss(&mut tape, t, p, n, &TsteConfig::new(1.0).unwrap()).unwrap();
        assert!((scalar_of(&tape, l) - (-(2.0f64 / 3.0).ln())).abs() < 1e-12);
        assert!((scalar_of(&tape, l) - 0.405465).abs() < 1e-6);
    }

    #[test]
    fn tste_decreases_as_negative_recedes() {
        let mut prev = f64::INFINITY;
        for k in 0..30 {
            let dn = 0.5 * 1.5f64.powi(k);
            let mut tape = Tape::new();
            let t = features(&mut tape, &[&[0.0]]);
            let p = features(&mut tape, &[&[0.7]]);
            let n = features(&mut tape, &[&[dn]]);
            let l = tste_loss(&mut tape, t, p, n, &TsteConfig::default()).unwrap();
            let v = scalar_of(&tape, l);
            assert!(v < prev && v > 0.0);
            prev = v;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn tste_rejects_bad_alpha_and_shapes() {
        assert!(TsteConfig::new(0.0).is_err());
        let mut tape = Tape::new();
        let t = features(&mut tape, &[&[0.0, 1.0]]);
        let p = features(&mut tape, &[&[0.0]]);
        let err = tste_loss(&mut tape, t, p, p, &TsteConfig::default()).unwrap_err();
        assert!(matches!(err, CoreError::Tensor(TensorError::Dimension { .. })));
    }

    #[test]
    fn ranking_anchors() {
        let mut tape = Tape::new();
        let t = features(&mut tape, &[&[0.0, 0.0]]);
        let p = features(&mut tape, &[&[0.0, 0.0]]);
        let n = features(&mut tape, &[&[1.0, 1.0]]);
        let l = triplet_ranking_loss(&mut tape, t, p, n, 1.0).unwrap();
        assert_eq!(scalar_of(&tape, l), 0.0);
        let l = triplet_ranking_loss(&mut tape, t, n, n, 0.75).unwrap();
        assert_eq!(scalar_of(&tape, l), 0.75);
        assert!(triplet_ranking_loss(&mut tape, t, p, n, 0.0).is_err());
    }

    #[test]
    fn combined_loss_weights() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1.0)).unwrap();
        let b = tape.constant(Tensor::scalar(2.0)).unwrap();
        let c = tape.constant(Tensor::scalar(0.5)).unwrap();
        let l = stage2_combined_loss(&mut tape, a, b, c, Stage2Weights::default()).unwrap();
        assert_eq!(scalar_of(&tape, l), 3.5);
        let l = stage2_combined_loss(&mut tape, a, b, c, Stage2Weights { source: 0.0, triplet: 0.0 }).unwrap();
        assert_eq!(scalar_of(&tape, l), 1.0);
        assert!(stage2_combined_loss(&mut tape, a, b, c, Stage2Weights { source: -1.0, triplet: 0.0 }).is_err());
    }
}
