//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

use super::tape::Gradients;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Moment estimates indexed by parameter position in the store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
}

impl OptimState {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn first_moment(&self, index: usize) -> Option<&Tensor> {
        self.m.get(index).and_then(Option::as_ref)
    }

    pub fn second_moment(&self, index: usize) -> Option<&Tensor> {
        self.v.get(index).and_then(Option::as_ref)
    }
}

/// One AdamW step over every parameter in `grads`, then re-derives the
/// scale and sign bits of all binarized weights.
pub fn adamw_step(store: &mut ParamStore, grads: &Gradients, state: &mut OptimState) -> Result<()> {
    for (&id, g) in grads {
        store.tensor(id).expect_same_shape(g)?;
        if !store.entry(id).trainable {
            return Err(Error::InvalidArgument(format!(
                "gradient supplied for buffer {:?}",
                store.name(id)
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite("gradient"));
        }
    }
    state.step += 1;
    let AdamWConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.cfg;
    let t = state.step as i32;
    let (bc1, bc2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    if state.m.len() < store.len() {
        state.m.resize(store.len(), None);
        state.v.resize(store.len(), None);
    }
    for (&id, g) in grads {
        let i = id.index();
        let m = state.m[i].get_or_insert_with(|| Tensor::zeros(g.dims()).expect("gradient dims are valid"));
        let v = state.v[i].get_or_insert_with(|| Tensor::zeros(g.dims()).expect("gradient dims are valid"));
        let p = store.tensor_mut(id);
        for (((p, m), v), &g) in p
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p *= 1.0 - lr * weight_decay;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
        }
    }
    store.refresh_binary()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;

    fn one_param(v: Vec<f64>) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let n = v.len();
        let id = s.add_dense("p", Tensor::new(&[n], v).unwrap()).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_only_decays() {
        let (mut s, id) = one_param(vec![1.0, -2.0, 0.5]);
        let mut st = OptimState::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        });
        let grads = Gradients::from([(id, Tensor::zeros(&[3]).unwrap())]);
        adamw_step(&mut s, &grads, &mut st).unwrap();
        let f = 1.0 - 0.1 * 0.01;
        assert_eq!(s.data(id), &[f, -2.0 * f, 0.5 * f]);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        let (mut s, id) = one_param(vec![0.0]);
        let mut st = OptimState::new(AdamWConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..Default::default()
        });
        let grads = Gradients::from([(id, Tensor::full(&[1], 0.3).unwrap())]);
        let mut last = 0.0;
        for _ in 0..2000 {
            adamw_step(&mut s, &grads, &mut st).unwrap();
            let now = s.data(id)[0];
            let step = last - now;
            last = now;
            assert!((step - 0.01).abs() < 1e-6, "step {step}");
        }
        assert_eq!(st.step, 2000);
    }

    #[test]
    fn matches_scalar_oracle() {
        let init = [0.5, -1.5, 2.0];
        let g1 = [0.1, -0.2, 0.3];
        let g2 = [-0.4, 0.05, 0.0];
        let (mut s, id) = one_param(init.to_vec());
        let cfg = AdamWConfig {
            lr: 1e-2,
            weight_decay: 1e-2,
            ..Default::default()
        };
        let mut st = OptimState::new(cfg);
        for g in [g1, g2] {
            let grads = Gradients::from([(id, Tensor::new(&[3], g.to_vec()).unwrap())]);
            adamw_step(&mut s, &grads, &mut st).unwrap();
        }
        for i in 0..3 {
            let (mut p, mut m, mut v) = (init[i], 0.0, 0.0);
            for (t, g) in [(1, g1[i]), (2, g2[i])] {
                m = 0.9 * m + 0.1 * g;
                v = 0.999 * v + 0.001 * g * g;
                let mh = m / (1.0 - 0.9f64.powi(t));
                let vh = v / (1.0 - 0.999f64.powi(t));
                p = p * (1.0 - 1e-4) - 1e-2 * mh / (vh.sqrt() + 1e-8);
            }
            assert!((s.data(id)[i] - p).abs() < 1e-12);
        }
        assert!(st.first_moment(id.index()).is_some());
    }

    #[test]
    fn rejects_bad_gradients() {
        let (mut s, id) = one_param(vec![1.0, 2.0]);
        let mut st = OptimState::new(AdamWConfig::default());
        let bad = Gradients::from([(id, Tensor::zeros(&[3]).unwrap())]);
        assert!(adamw_step(&mut s, &bad, &mut st).is_err());
        let nan = Gradients::from([(id, Tensor::full(&[2], f64::NAN).unwrap())]);
        assert!(adamw_step(&mut s, &nan, &mut st).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn refreshes_binary_weights() {
        use crate::binarize::BinaryConvParams;
        let mut s = ParamStore::new();
        let w = BinaryConvParams::new(Tensor::new(&[1, 1, 1, 1], vec![0.001]).unwrap(), 1.0).unwrap();
        let id = s.add_binary("w", w).unwrap();
        let mut st = OptimState::new(AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        });
        adamw_step(&mut s, &Gradients::from([(id, Tensor::full(&[1, 1, 1, 1], 1.0).unwrap())]), &mut st).unwrap();
        let b = s.binary(id).unwrap();
        assert!(b.latent().data()[0] < 0.0);
        assert_eq!(b.scale(), b.latent().data()[0].abs());
        assert!(!b.signs().get(0));
    }
}
