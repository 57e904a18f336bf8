//! Attribute prediction and evaluation metrics.
//!
//! AP^cls for an attribute is its top-1 accuracy over the images where the
//! attribute is annotated; abstentions count as wrong. mAP^cls is the plain
//! mean over attributes. mP^ins / mR^ins are per-image precision and recall
//! of the emitted (non-abstained) predictions, averaged over images.

use std::fmt::Write as _;

use mtct_tensor::Tensor;

use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::model::MtnModel;

/// Prediction for one attribute of one image. `value == None` means abstain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributePrediction {
    pub value: Option<usize>,
    pub probability: f64,
}

/// Softmax argmax with abstention; ties go to the lowest index.
pub fn predict_row(logits: &[f64], threshold: f64) -> AttributePrediction {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let mut best = 0;
    for (i, &e) in exps.iter().enumerate() {
        if e > exps[best] {
            best = i;
        }
    }
    let probability = exps[best] / total;
    AttributePrediction { value: (probability >= threshold).then_some(best), probability }
}

/// Per-image, per-attribute predictions from per-attribute `(batch, |Z_j|)` logits.
pub fn predict_from_logits(logits: &[Tensor], threshold: f64) -> Result<Vec<Vec<AttributePrediction>>> {
    let batch = logits.first().map(|t| t.shape()[0]).ok_or_else(|| CoreError::contract("no attribute logits"))?;
    let mut out = vec![Vec::with_capacity(logits.len()); batch];
    for l in logits {
        if l.rank() != 2 || l.shape()[0] != batch {
            return Err(CoreError::contract(format!("logit tensor {:?} does not match batch {batch}", l.shape())));
        }
        for (row, preds) in l.data().chunks(l.shape()[1]).zip(out.iter_mut()) {
            preds.push(predict_row(row, threshold));
        }
    }
    Ok(out)
}

pub fn predict_attributes(model: &MtnModel, images: &Tensor, threshold: f64) -> Result<Vec<Vec<AttributePrediction>>> {
    predict_from_logits(&model.predict_logits(images)?, threshold)
}

fn check_aligned(preds: &[Vec<AttributePrediction>], labels: &[Vec<Option<usize>>]) -> Result<()> {
    if preds.len() != labels.len() || preds.iter().zip(labels).any(|(p, l)| p.len() != l.len()) {
        return Err(CoreError::contract("predictions and labels are not aligned"));
    }
    Ok(())
}

/// Percentage of attribute-present images whose prediction is correct.
pub fn average_precision_cls(preds: &[Vec<AttributePrediction>], labels: &[Vec<Option<usize>>], attr: usize) -> Result<f64> {
    check_aligned(preds, labels)?;
    let mut present = 0usize;
    let mut correct = 0usize;
    for (p, l) in preds.iter().zip(labels) {
        let (Some(pa), Some(la)) = (p.get(attr), l.get(attr)) else {
            return Err(CoreError::contract(format!("attribute {attr} out of range")));
        };
        if let Some(truth) = la {
            present += 1;
            if pa.value == Some(*truth) {
                correct += 1;
            }
        }
    }
    if present == 0 {
        return Err(CoreError::contract(format!("attribute {attr} is never annotated in the evaluation set")));
    }
    Ok(100.0 * correct as f64 / present as f64)
}

/// `(mP^ins, mR^ins)`. Images that emit nothing on their annotated attributes
/// are left out of the precision average; if no image emits, mP^ins is 0.
pub fn instance_precision_recall(preds: &[Vec<AttributePrediction>], labels: &[Vec<Option<usize>>]) -> Result<(f64, f64)> {
    check_aligned(preds, labels)?;
    let (mut p_sum, mut p_n, mut r_sum) = (0.0, 0usize, 0.0);
    for (i, (p, l)) in preds.iter().zip(labels).enumerate() {
        let mut present = 0usize;
        let mut emitted = 0usize;
        let mut correct = 0usize;
        for (pa, la) in p.iter().zip(l) {
            let Some(truth) = la else { continue };
            present += 1;
            if let Some(v) = pa.value {
                emitted += 1;
                if v == *truth {
                    correct += 1;
                }
            }
        }
        if present == 0 {
            return Err(CoreError::contract(format!("image {i} has no annotated attribute")));
        }
        r_sum += correct as f64 / present as f64;
        if emitted > 0 {
            p_sum += correct as f64 / emitted as f64;
            p_n += 1;
        }
    }
    let n = preds.len();
    if n == 0 {
        return Err(CoreError::contract("no images to evaluate"));
    }
    let mp = if p_n == 0 { 0.0 } else { 100.0 * p_sum / p_n as f64 };
    Ok((mp, 100.0 * r_sum / n as f64))
}

/// Who produced the evaluated model and on what.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunMeta {
    pub regime: String,
    pub seed: u64,
    pub dataset_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub meta: RunMeta,
    pub threshold: f64,
    pub attributes: Vec<String>,
    pub ap_cls: Vec<f64>,
    pub map_cls: f64,
    pub mp_ins: f64,
    pub mr_ins: f64,
    pub images: usize,
    pub emitted: usize,
}

impl MetricsReport {
    pub fn from_predictions(
        attributes: Vec<String>,
        preds: &[Vec<AttributePrediction>],
        labels: &[Vec<Option<usize>>],
        threshold: f64,
        meta: RunMeta,
    ) -> Result<Self> {
        if preds.is_empty() {
            return Err(CoreError::contract("empty evaluation set"));
        }
        let ap_cls = (0..attributes.len()).map(|j| average_precision_cls(preds, labels, j)).collect::<Result<Vec<_>>>()?;
        let map_cls = ap_cls.iter().sum::<f64>() / ap_cls.len() as f64;
        let (mp_ins, mr_ins) = instance_precision_recall(preds, labels)?;
        let emitted = preds.iter().flatten().filter(|p| p.value.is_some()).count();
        Ok(MetricsReport { meta, threshold, attributes, ap_cls, map_cls, mp_ins, mr_ins, images: preds.len(), emitted })
    }

    fn columns(&self) -> Vec<(String, String)> {
        let mut cols = vec![
            ("regime".to_string(), self.meta.regime.clone()),
            ("seed".to_string(), self.meta.seed.to_string()),
            ("dataset".to_string(), self.meta.dataset_id.clone()),
            ("threshold".to_string(), format!("{:.4}", self.threshold)),
            ("images".to_string(), self.images.to_string()),
            ("emitted".to_string(), self.emitted.to_string()),
        ];
        for (a, v) in self.attributes.iter().zip(&self.ap_cls) {
            cols.push((a.clone(), format!("{v:.4}")));
        }
        cols.push(("mAP_cls".into(), format!("{:.4}", self.map_cls)));
        cols.push(("mP_ins".into(), format!("{:.4}", self.mp_ins)));
        cols.push(("mR_ins".into(), format!("{:.4}", self.mr_ins)));
        cols
    }

    /// Header line plus one data line.
    pub fn to_csv(&self) -> String {
        let cols = self.columns();
        let head: Vec<&str> = cols.iter().map(|(h, _)| h.as_str()).collect();
        let row: Vec<&str> = cols.iter().map(|(_, v)| v.as_str()).collect();
        format!("{}\n{}\n", head.join(","), row.join(","))
    }

    /// Human-readable table: per-attribute AP^cls then the summary metrics, two decimals.
    pub fn to_table(&self) -> String {
        let mut heads: Vec<String> = self.attributes.clone();
        heads.extend(["mAP_cls", "mP_ins", "mR_ins"].map(String::from));
        let mut vals: Vec<String> = self.ap_cls.iter().map(|v| format!("{v:.2}")).collect();
        vals.extend([self.map_cls, self.mp_ins, self.mr_ins].map(|v| format!("{v:.2}")));
        let widths: Vec<usize> = heads.iter().zip(&vals).map(|(h, v)| h.len().max(v.len())).collect();
        let mut out = format!(
            "regime {}  seed {}  dataset {}  threshold {}  images {}  emitted {}\n",
            self.meta.regime, self.meta.seed, self.meta.dataset_id, self.threshold, self.images, self.emitted
        );
        for line in [&heads, &vals] {
            let cells: Vec<String> = line.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            let _ = writeln!(out, "{}", cells.join("  "));
        }
        out
    }
}

/// Evaluates `model` on every sample of `test`.
pub fn evaluate_report(model: &MtnModel, test: &Dataset, threshold: f64, meta: RunMeta) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(CoreError::contract("empty test set"));
    }
    if test.schema() != model.schema() {
        return Err(CoreError::contract(format!("model schema {} does not match dataset schema {}", model.schema(), test.schema())));
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let images = test.images(&idx)?;
    let preds = predict_attributes(model, &images, threshold)?;
    let labels: Vec<Vec<Option<usize>>> = test.samples().iter().map(|s| s.labels.clone()).collect();
    let names = model.schema().attributes().iter().map(|a| a.name.clone()).collect();
    MetricsReport::from_predictions(names, &preds, &labels, threshold, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emit(v: usize) -> AttributePrediction {
        AttributePrediction { value: Some(v), probability: 1.0 }
    }

    const ABSTAIN: AttributePrediction = AttributePrediction { value: None, probability: 0.0 };

    #[test]
    fn abstention_and_ties() {
        assert_eq!(predict_row(&[0.0; 4], 0.5).value, None);
        assert_eq!(predict_row(&[0.0; 4], 0.0).value, Some(0));
        assert_eq!(predict_row(&[1.0, 3.0, 3.0], 0.0).value, Some(1));
        let p = predict_row(&[0.0, 0.0, 20.0], 0.5);
        assert_eq!(p.value, Some(2));
        assert!(p.probability > 0.99);
    }

    #[test]
    fn ap_counts() {
        let labels = vec![vec![Some(0)], vec![Some(1)], vec![Some(2)], vec![Some(0)], vec![None]];
        let preds = vec![vec![emit(0)], vec![emit(1)], vec![emit(2)], vec![emit(1)], vec![emit(0)]];
        assert_eq!(average_precision_cls(&preds, &labels, 0).unwrap(), 75.0);
        let none = vec![vec![ABSTAIN]; 5];
        assert_eq!(average_precision_cls(&none, &labels, 0).unwrap(), 0.0);
        let never = vec![vec![None]; 2];
        assert!(matches!(average_precision_cls(&none[..2], &never, 0), Err(CoreError::Contract(_))));
    }

    #[test]
    fn instance_hand_counts() {
        let labels = vec![vec![Some(1); 9]];
        let mut row = vec![emit(1); 6];
        row.extend([emit(0); 3]);
        let (p, r) = instance_precision_recall(&[row], &labels).unwrap();
        assert!((p - 66.666_666_666_666_67).abs() < 1e-9 && (r - p).abs() < 1e-12);

        let labels = vec![vec![Some(0); 5]];
        let row = vec![emit(0), emit(0), emit(0), ABSTAIN, ABSTAIN];
        assert_eq!(instance_precision_recall(&[row], &labels).unwrap(), (100.0, 60.0));
    }

    #[test]
    fn silent_images_skip_precision() {
        let labels = vec![vec![Some(0)], vec![Some(0)]];
        let preds = vec![vec![emit(0)], vec![ABSTAIN]];
        assert_eq!(instance_precision_recall(&preds, &labels).unwrap(), (100.0, 50.0));
    }

    #[test]
    fn report_mean_and_formats() {
        let labels = vec![vec![Some(0), Some(1)], vec![Some(1), None]];
        let preds = vec![vec![emit(0), emit(0)], vec![emit(1), ABSTAIN]];
        let r = MetricsReport::from_predictions(vec!["a".into(), "b".into()], &preds, &labels, 0.5, RunMeta::default()).unwrap();
        assert_eq!(r.ap_cls, vec![100.0, 0.0]);
        assert_eq!(r.map_cls, 50.0);
        assert_eq!(r.emitted, 3);
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.starts_with("regime,seed,dataset,threshold,images,emitted,a,b,mAP_cls,mP_ins,mR_ins\n"));
        assert!(r.to_table().contains("mAP_cls"));
    }
}
