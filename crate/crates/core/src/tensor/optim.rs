use super::{ParamStore, Scalar, Tensor};

/// Classical momentum SGD: `v ← μ·v + g`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    /// Optional global-norm gradient clip applied before the update.
    pub clip_norm: Option<T>,
    velocity: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: T, momentum: T) -> Self {
        Self { lr, momentum, clip_norm: None, velocity: Vec::new() }
    }

    pub fn with_clip(mut self, clip_norm: Option<T>) -> Self {
        self.clip_norm = clip_norm;
        self
    }

    /// Applies one update from the accumulated gradients. Gradients are left in place.
    pub fn step(&mut self, store: &mut ParamStore<T>) {
        if self.velocity.is_empty() {
            self.velocity = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        }
        let scale = match self.clip_norm {
            Some(max) => {
                let norm = store.iter().flat_map(|p| p.grad.data().iter()).fold(T::zero(), |s, &g| s + g * g).sqrt();
                if norm > max {
                    max / norm
                } else {
                    T::one()
                }
            }
            None => T::one(),
        };
        for (p, v) in store.iter_mut().zip(&mut self.velocity) {
            for ((w, vel), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(p.grad.data()) {
                *vel = self.momentum * *vel + g * scale;
                *w = *w - self.lr * *vel;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(v));
        s.get_mut(id).grad = Tensor::scalar(g);
        s
    }

    #[test]
    fn plain_step() {
        let mut s = one_param(5.0, 2.0);
        Sgd::new(1.0, 0.0).step(&mut s);
        assert_eq!(s.iter().next().unwrap().value.item(), 3.0);
        let mut s = one_param(5.0, 0.0);
        Sgd::new(0.1, 0.9).step(&mut s);
        assert_eq!(s.iter().next().unwrap().value.item(), 5.0);
    }

    #[test]
    fn momentum_recurrence() {
        // v1 = 1, p1 = 1 - 0.1 = 0.9; v2 = 0.9·1 + 1 = 1.9, p2 = 0.9 - 0.19 = 0.71
        let mut s = one_param(1.0, 1.0);
        let mut opt = Sgd::new(0.1, 0.9);
        opt.step(&mut s);
        assert!((s.iter().next().unwrap().value.item() - 0.9).abs() < 1e-15);
        opt.step(&mut s);
        assert!((s.iter().next().unwrap().value.item() - 0.71).abs() < 1e-15);
    }

    #[test]
    fn clip_bounds_update() {
        let mut s = one_param(0.0, 10.0);
        Sgd::new(1.0, 0.0).with_clip(Some(1.0)).step(&mut s);
        assert_eq!(s.iter().next().unwrap().value.item(), -1.0);
    }
}
