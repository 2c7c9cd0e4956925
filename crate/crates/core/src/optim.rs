//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::layers::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(p.rows(), p.cols()));
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = b1 * md[i] + (1.0 - b1) * gi;
                vd[i] = b2 * vd[i] + (1.0 - b2) * gi * gi;
                let mh = md[i] / c1;
                let vh = vd[i] / c2;
                pd[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = one(1.5);
        let g: BTreeMap<_, _> = [("w".to_string(), Tensor::scalar(0.0))].into();
        let mut opt = Adam::new(0.1);
        opt.step(&mut p, &g);
        assert_eq!(p.get("w").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_is_lr() {
        let mut p = one(0.0);
        let g: BTreeMap<_, _> = [("w".to_string(), Tensor::scalar(1.0))].into();
        let mut opt = Adam::new(0.01);
        opt.step(&mut p, &g);
        // m̂ = 1, v̂ = 1 → Δ = lr / (1 + eps).
        let want = -0.01 / (1.0 + 1e-8);
        assert!((p.get("w").unwrap().item() - want).abs() < 1e-18);
    }

    #[test]
    fn deterministic() {
        let g: BTreeMap<_, _> = [("w".to_string(), Tensor::scalar(0.37))].into();
        let (mut a, mut b) = (one(0.2), one(0.2));
        let (mut oa, mut ob) = (Adam::new(0.003), Adam::new(0.003));
        for _ in 0..5 {
            oa.step(&mut a, &g);
            ob.step(&mut b, &g);
        }
        assert_eq!(a.get("w").unwrap().item().to_bits(), b.get("w").unwrap().item().to_bits());
    }
}
