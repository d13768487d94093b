//! Adam with a linear warm-up / linear decay learning-rate schedule.

use rayon::prelude::*;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Chunk size below which updates run on the calling thread.
const PAR_CHUNK: usize = 1 << 14;

/// Linear warm-up from 0 to `peak` over `warmup_steps`, then linear decay to 0
/// at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LinearSchedule {
    pub fn new(peak: f64, total_steps: u64, warmup_fraction: f64) -> Self {
        let warmup_steps = (total_steps as f64 * warmup_fraction).round() as u64;
        LinearSchedule {
            peak,
            warmup_steps,
            total_steps,
        }
    }

    pub fn constant(lr: f64) -> Self {
        LinearSchedule {
            peak: lr,
            warmup_steps: 0,
            total_steps: u64::MAX,
        }
    }

    /// Rate used for the update at zero-based `step`.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if self.total_steps == u64::MAX {
            return self.peak;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let left = self.total_steps.saturating_sub(step);
        self.peak * left as f64 / span as f64
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamSlot {
    pub fn zeros(len: usize) -> Self {
        AdamSlot {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One Adam update at one-based time `t`. `grad(i)` yields the gradient of
    /// chunk `i` (of `chunk` elements) or `None` for an all-zero chunk.
    pub fn update_chunked<'g, G>(&mut self, params: &mut [f64], chunk: usize, lr: f64, t: u64, grad: G)
    where
        G: Fn(usize) -> Option<&'g [f64]> + Sync,
    {
        assert_eq!(params.len(), self.m.len());
        let bc1 = 1.0 - BETA1.powf(t as f64);
        let bc2 = 1.0 - BETA2.powf(t as f64);
        let apply = |i: usize, p: &mut [f64], m: &mut [f64], v: &mut [f64]| {
            let g = grad(i);
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g[k]);
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * gk;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        };
        if params.len() >= PAR_CHUNK {
            params
                .par_chunks_mut(chunk)
                .zip(self.m.par_chunks_mut(chunk))
                .zip(self.v.par_chunks_mut(chunk))
                .enumerate()
                .for_each(|(i, ((p, m), v))| apply(i, p, m, v));
        } else {
            for (i, ((p, m), v)) in params
                .chunks_mut(chunk)
                .zip(self.m.chunks_mut(chunk))
                .zip(self.v.chunks_mut(chunk))
                .enumerate()
            {
                apply(i, p, m, v);
            }
        }
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64, t: u64) {
        assert_eq!(grad.len(), params.len());
        let n = params.len().max(1);
        self.update_chunked(params, n, lr, t, |_| Some(grad));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_is_minus_lr() {
        let mut slot = AdamSlot::zeros(1);
        let mut p = vec![0.5];
        slot.update(&mut p, &[1.0], 0.001, 1);
        // m_hat = 1, v_hat = 1 → step = lr / (1 + eps)
        assert!((p[0] - (0.5 - 0.001 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p[0] - 0.499).abs() < 1e-9);
    }

    #[test]
    fn constant_gradient_keeps_unit_steps() {
        let mut slot = AdamSlot::zeros(1);
        let mut p = vec![0.0];
        for t in 1..=50 {
            slot.update(&mut p, &[3.0], 0.01, t);
        }
        assert!((p[0] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_is_fixed_point_and_decays_moments() {
        let mut slot = AdamSlot::zeros(3);
        let mut p = vec![1.0, -2.0, 0.25];
        slot.update(&mut p, &[0.5, 0.0, -1.0], 0.1, 1);
        let before = p.clone();
        let (m0, v0) = (slot.m.clone(), slot.v.clone());
        slot.update_chunked(&mut p, 3, 0.0, 2, |_| None);
        assert_eq!(p, before);
        for k in 0..3 {
            assert!((slot.m[k] - BETA1 * m0[k]).abs() < 1e-15);
            assert!((slot.v[k] - BETA2 * v0[k]).abs() < 1e-15);
        }
        let mut fresh = AdamSlot::zeros(2);
        let mut q = vec![1.0, 2.0];
        fresh.update(&mut q, &[0.0, 0.0], 0.1, 1);
        assert_eq!(q, vec![1.0, 2.0]);
    }

    #[test]
    fn chunked_matches_dense_and_parallel_matches_serial() {
        let n = PAR_CHUNK * 2;
        let g: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
        let mut a = vec![0.1; n];
        let mut b = a.clone();
        let mut sa = AdamSlot::zeros(n);
        let mut sb = AdamSlot::zeros(n);
        for t in 1..=3 {
            sa.update(&mut a, &g, 0.01, t);
            sb.update_chunked(&mut b, 64, 0.01, t, |i| Some(&g[i * 64..(i + 1) * 64]));
        }
        assert_eq!(a, b);
    }

    #[test]
    fn schedule_shape() {
        let s = LinearSchedule::new(1.0, 100, 0.1);
        assert_eq!(s.warmup_steps, 10);
        assert!((s.lr(0) - 0.1).abs() < 1e-12);
        assert!((s.lr(9) - 1.0).abs() < 1e-12);
        assert!((s.lr(10) - 1.0).abs() < 1e-12);
        assert!((s.lr(55) - 0.5).abs() < 1e-12);
        assert_eq!(s.lr(100), 0.0);
        for t in 10..99 {
            assert!(s.lr(t + 1) <= s.lr(t));
        }
        assert_eq!(LinearSchedule::new(0.5, 10, 0.0).lr(0), 0.5);
        assert_eq!(LinearSchedule::constant(0.3).lr(12345), 0.3);
    }
}
