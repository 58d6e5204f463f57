use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Grads, Tensor};
use crate::error::{Error, Result};

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over `params`. Blocks without an entry in `grads` are left
    /// untouched (frozen). All gradients are checked before anything moves.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>, grads: &Grads) -> Result<()> {
        for (name, p) in &params {
            if let Some(g) = grads.get(name) {
                if g.len() != p.len() {
                    return Err(Error::dimension(format!(
                        "gradient for `{name}` has {} values, parameter has {}",
                        g.len(),
                        p.len()
                    )));
                }
                if let Some(bad) = g.iter().find(|x| !x.is_finite()) {
                    return Err(Error::Numeric {
                        name: name.clone(),
                        message: format!("non-finite gradient value {bad}"),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for (name, p) in params {
            let Some(g) = grads.get(&name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; g.len()]);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] = p.data[i] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![value]).unwrap()
    }

    #[test]
    fn unit_gradient_first_step() {
        let mut p = single(0.0);
        let mut g = Grads::new();
        g.accumulate("w", &[1.0]);
        let mut opt = AdamW::new(0.1, 0.0);
        opt.step(vec![("w".into(), &mut p)], &g).unwrap();
        assert_eq!(p.data[0], -0.1 / (1.0 + 1e-8));
    }

    #[test]
    fn zero_gradient_decays_geometrically() {
        let mut p = single(3.0);
        let mut g = Grads::new();
        g.accumulate("w", &[0.0]);
        let mut opt = AdamW::new(2e-5, 5e-2);
        let mut expect = 3.0;
        for _ in 0..5 {
            opt.step(vec![("w".into(), &mut p)], &g).unwrap();
            expect *= 1.0 - 1e-6;
            assert_eq!(p.data[0], expect);
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut g = Grads::new();
        g.accumulate("w", &[0.0; 3]);
        let mut opt = AdamW::new(1e-3, 0.0);
        opt.step(vec![("w".into(), &mut p)], &g).unwrap();
        assert_eq!(p.data, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let mut a = single(1.0);
        let mut b = single(1.0);
        let mut g = Grads::new();
        g.accumulate("a", &[0.5]);
        g.accumulate("b", &[f64::NAN]);
        let mut opt = AdamW::new(0.1, 0.0);
        let err = opt
            .step(vec![("a".into(), &mut a), ("b".into(), &mut b)], &g)
            .unwrap_err();
        assert!(err.to_string().contains('b'), "{err}");
        assert_eq!(a.data[0], 1.0, "no block may move when any gradient is bad");
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn blocks_without_gradients_are_frozen() {
        let mut p = single(1.0);
        let mut opt = AdamW::new(0.1, 0.5);
        opt.step(vec![("w".into(), &mut p)], &Grads::new()).unwrap();
        assert_eq!(p.data[0], 1.0);
        assert!(opt.m.is_empty());
    }
}
