//! AdamW with warmup-cosine schedule and global-norm clipping.

use std::f64::consts::PI;

use crate::numerics::{ParamId, ParamStore};

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const EPS: f32 = 1e-8;

/// Linear warmup over `ceil(warmup_frac · total)` steps, then cosine decay to zero.
pub fn learning_rate(step: usize, total: usize, base: f32, warmup_frac: f32) -> f32 {
    let warm = (warmup_frac as f64 * total as f64).ceil() as usize;
    if step < warm {
        return base * (step + 1) as f32 / warm as f32;
    }
    let span = total.saturating_sub(warm).max(1);
    let progress = ((step - warm) as f64 / span as f64).min(1.0);
    (base as f64 * 0.5 * (1.0 + (PI * progress).cos())) as f32
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f32>], max_norm: f32) -> f32 {
    let norm = grads.iter().flatten().map(|&g| g as f64 * g as f64).sum::<f64>().sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub weight_decay: f32,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new(ps: &ParamStore, weight_decay: f32) -> Self {
        let zeros = || ps.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect();
        AdamW { weight_decay, m: zeros(), v: zeros(), t: 0 }
    }

    /// One update. `grads` has one buffer per parameter in store order.
    pub fn step(&mut self, ps: &mut ParamStore, grads: &[Vec<f32>], lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let ids: Vec<ParamId> = ps.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in ids {
            let i = id.index();
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let p = ps.data_mut(id);
            for k in 0..p.len() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= lr * (mhat / (vhat.sqrt() + EPS) + self.weight_decay * p[k]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn schedule_shape() {
        let total = 1000;
        assert!((learning_rate(0, total, 5e-4, 0.01) - 5e-5).abs() < 1e-9);
        assert!((learning_rate(9, total, 5e-4, 0.01) - 5e-4).abs() < 1e-9);
        assert!((learning_rate(10, total, 5e-4, 0.01) - 5e-4).abs() < 1e-9);
        assert!((learning_rate(505, total, 5e-4, 0.01) - 2.5e-4).abs() < 1e-7);
        assert!(learning_rate(999, total, 5e-4, 0.01) < 1e-7);
        let lrs: Vec<f32> = (10..1000).map(|s| learning_rate(s, total, 5e-4, 0.01)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-7 && (g[1][0] - 0.8).abs() < 1e-7);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn zero_gradient_step_is_pure_decay_and_frozen_untouched() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", Tensor::new([2], vec![1.0, -2.0]).unwrap()).unwrap();
        let b = ps.add("b", Tensor::new([1], vec![5.0]).unwrap()).unwrap();
        ps.set_trainable(b, false);
        let mut opt = AdamW::new(&ps, 0.1);
        opt.step(&mut ps, &[vec![0.0, 0.0], vec![1.0]], 0.5);
        assert_eq!(ps.tensor(a).data(), &[1.0 - 0.5 * 0.1, -2.0 + 0.5 * 0.2]);
        assert_eq!(ps.tensor(b).data(), &[5.0]);
        assert_eq!(opt.m[1], vec![0.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut ps = ParamStore::new();
        let a = ps.add("a", Tensor::new([1], vec![1.0]).unwrap()).unwrap();
        let mut opt = AdamW::new(&ps, 0.0);
        opt.step(&mut ps, &[vec![0.3]], 0.01);
        assert!((ps.tensor(a).data()[0] - 0.99).abs() < 1e-6);
    }
}
