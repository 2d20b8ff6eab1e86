use crate::error::{Error, Result};
use crate::numkit::ParamStore;

/// Adam with decoupled weight decay: `p ← p·(1 − lr·wd)` then the
/// bias-corrected adaptive step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::Argument(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for ((_, p), (m, v)) in store.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x = *x * decay - lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero at
/// `total`. `step` counts from 0.
pub fn lr_at(step: u64, peak: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        return peak * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1) as f64;
    let progress = ((step - warmup) as f64 / span).min(1.0);
    0.5 * peak * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm of all gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grads(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, t) in store.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::ParamTensor;

    #[test]
    fn matches_reference_update_on_quadratic() {
        // f(x) = (x - 3)^2, reference loop written out independently
        let mut store = ParamStore::new();
        let id = store.add("x", ParamTensor::new(vec![1], vec![0.5]).unwrap());
        let mut opt = AdamW::new(&store, 0.01);
        let (mut x, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        let lr = 0.05;
        for t in 1..=200 {
            let g = 2.0 * (store.get(id).data()[0] - 3.0);
            store.get_mut(id).set_grad(vec![g]).unwrap();
            opt.step(&mut store, lr).unwrap();

            let g = 2.0 * (x - 3.0);
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * 0.01 * x;
            x -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((store.get(id).data()[0] - x).abs() < 1e-10);
        }
        assert!((x - 3.0).abs() < 0.1);
    }

    #[test]
    fn zero_lr_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamTensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        store.get_mut(id).set_grad(vec![1.0, 1.0, 1.0]).unwrap();
        let mut opt = AdamW::new(&store, 0.01);
        opt.step(&mut store, 0.0).unwrap();
        assert_eq!(store.get(id).data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn schedule_shape() {
        assert_eq!(lr_at(0, 1.0, 10, 110), 0.1);
        assert_eq!(lr_at(9, 1.0, 10, 110), 1.0);
        assert_eq!(lr_at(10, 1.0, 10, 110), 1.0);
        assert!((lr_at(60, 1.0, 10, 110) - 0.5).abs() < 1e-12);
        assert!(lr_at(109, 1.0, 10, 110) < 1e-3);
        let mut prev = f64::INFINITY;
        for s in 10..110 {
            let lr = lr_at(s, 1.0, 10, 110);
            assert!(lr <= prev);
            prev = lr;
        }
        assert_eq!(lr_at(0, 2.0, 0, 100), 2.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamTensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        store.get_mut(id).set_grad(vec![3.0, 4.0]).unwrap();
        assert_eq!(clip_grads(&mut store, 1.0), 5.0);
        assert!((grad_norm(&store) - 1.0).abs() < 1e-15);
        assert_eq!(clip_grads(&mut store, 10.0), grad_norm(&store));
    }
}
