//! SGD with classical momentum and L2 weight decay.

use mtct_tensor::Tensor;

use crate::error::{CoreError, Result};
use crate::model::{MtnModel, ParamRole};

/// Velocity buffers, one per parameter tensor of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(model: &MtnModel) -> Self {
        SgdState { velocity: model.params().iter().map(|p| vec![0.0; p.tensor.len()]).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One update of every trainable tensor:
/// `v <- momentum * v + (g + wd * theta)`, `theta <- theta - lr * v`.
///
/// Frozen tensors are skipped entirely. Bias vectors get no weight decay.
/// `grads` is aligned with `model.params()`.
pub fn sgd_step(model: &mut MtnModel, grads: &[Option<Tensor>], state: &mut SgdState, cfg: &SgdConfig) -> Result<()> {
    if grads.len() != model.params().len() || state.velocity.len() != model.params().len() {
        return Err(CoreError::contract(format!(
            "{} gradients and {} velocity buffers for {} parameters",
            grads.len(),
            state.velocity.len(),
            model.params().len()
        )));
    }
    for (p, g) in model.params().iter().zip(grads) {
        if !p.frozen && g.is_none() {
            return Err(CoreError::contract(format!("trainable tensor {} has no gradient", p.name)));
        }
    }
    for ((p, g), v) in model.params_mut().iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        if p.frozen {
            continue;
        }
        let g = g.as_ref().expect("checked above");
        if g.shape() != p.tensor.shape() {
            return Err(CoreError::contract(format!("gradient shape {:?} for {} {:?}", g.shape(), p.name, p.tensor.shape())));
        }
        let wd = if p.role == ParamRole::Bias { 0.0 } else { cfg.weight_decay };
        for ((theta, &gi), vi) in p.tensor.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vi = cfg.momentum * *vi + (gi + wd * *theta);
            *theta -= cfg.lr * *vi;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FreezeMask, NinBlock, TrunkConfig};
    use crate::schema::AttributeSchema;

    fn tiny() -> MtnModel {
        let trunk = TrunkConfig {
            in_channels: 1,
            input_size: 4,
            blocks: [NinBlock::same(1, false); 5],
            pool_kernel: 2,
            pool_stride: 2,
        };
        MtnModel::build(&AttributeSchema::from_pairs(&[("a", 2)]).unwrap(), trunk, (1, 1), 0).unwrap()
    }

    fn const_grads(m: &MtnModel, g: f64) -> Vec<Option<Tensor>> {
        m.params().iter().map(|p| Some(Tensor::full(p.tensor.shape(), g))).collect()
    }

    fn zero_params(m: &mut MtnModel) {
        for p in m.params_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn plain_sgd_without_momentum() {
        let mut m = tiny();
        let before = m.clone();
        let mut st = SgdState::new(&m);
        let cfg = SgdConfig { lr: 0.5, momentum: 0.0, weight_decay: 0.0 };
        let g = const_grads(&m, 2.0);
        sgd_step(&mut m, &g, &mut st, &cfg).unwrap();
        for (a, b) in m.params().iter().zip(before.params()) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert_eq!(*x, y - 1.0);
            }
        }
    }

    #[test]
    fn momentum_hand_iteration() {
        let mut m = tiny();
        zero_params(&mut m);
        let mut st = SgdState::new(&m);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 0.0 };
        let g = const_grads(&m, 1.0);
        sgd_step(&mut m, &g, &mut st, &cfg).unwrap();
        assert!((m.params()[0].tensor.data()[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut m, &g, &mut st, &cfg).unwrap();
        assert!((m.params()[0].tensor.data()[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn frozen_tensor_untouched_and_missing_grad_rejected() {
        let mut m = tiny();
        let mask = FreezeMask::fc_only(&m);
        m.apply_freeze(&mask).unwrap();
        let before = m.clone();
        let mut st = SgdState::new(&m);
        let cfg = SgdConfig { lr: 0.1, momentum: 0.9, weight_decay: 5e-4 };
        let g = const_grads(&m, 3.0);
        sgd_step(&mut m, &g, &mut st, &cfg).unwrap();
        for (a, b) in m.params().iter().zip(before.params()) {
            assert_eq!(a.frozen, b.frozen);
            if a.frozen {
                assert_eq!(a.tensor, b.tensor);
            } else {
                assert_ne!(a.tensor, b.tensor);
            }
        }
        let mut g = const_grads(&m, 1.0);
        let last = g.len() - 1;
        g[last] = None;
        assert!(matches!(sgd_step(&mut m, &g, &mut st, &cfg), Err(CoreError::Contract(_))));
    }

    #[test]
    fn bias_gets_no_weight_decay() {
        let mut m = tiny();
        for p in m.params_mut() {
            p.tensor.data_mut().iter_mut().for_each(|v| *v = 1.0);
        }
        let mut st = SgdState::new(&m);
        let cfg = SgdConfig { lr: 1.0, momentum: 0.0, weight_decay: 0.5 };
        let g = const_grads(&m, 0.0);
        sgd_step(&mut m, &g, &mut st, &cfg).unwrap();
        for p in m.params() {
            let expect = if p.role == ParamRole::Bias { 1.0 } else { 0.5 };
            assert!(p.tensor.data().iter().all(|&v| v == expect), "{}", p.name);
        }
    }
}
