//! Adam with decoupled weight decay, global gradient clipping, the
//! multi-step learning-rate schedule, and the curriculum horizon rule.
//!
//! Optimizer state lives in f64 regardless of the model scalar, so f32
//! runs do not accumulate moment error. Weight decay multiplies the
//! parameter directly instead of entering the gradient, which keeps the
//! reported loss a pure data term.

use crate::error::Result;
use crate::nn::Param;
use crate::scalar::Scalar;

/// Scales every gradient so the global L2 norm does not exceed
/// `max_norm`. Returns the norm before and after scaling.
pub fn clip_to_norm(grads: &mut [Vec<f64>], max_norm: f64) -> (f64, f64) {
    let sq: f64 = grads.iter().flatten().map(|g| g * g).sum();
    let before = sq.sqrt();
    if !before.is_finite() || before <= max_norm {
        return (before, before);
    }
    let scale = max_norm / before;
    for g in grads.iter_mut().flatten() {
        *g *= scale;
    }
    let after: f64 = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    (before, after)
}

/// What one optimizer step did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepOutcome {
    Applied {
        grad_norm: f64,
        clipped_norm: f64,
    },
    /// A non-finite gradient was seen; no state changed.
    SkippedNonFinite,
}

pub struct AdamW<S: Scalar> {
    params: Vec<Param<S>>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    max_norm: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    skipped: u64,
}

impl<S: Scalar> AdamW<S> {
    /// Frozen parameters are dropped here; everything handed to `step`
    /// is writable.
    pub fn new(params: Vec<Param<S>>, lr: f64, weight_decay: f64, eps: f64, max_norm: f64) -> Self {
        let params: Vec<Param<S>> = params.into_iter().filter(|p| p.trainable()).collect();
        let m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        let v = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        AdamW {
            params,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
            weight_decay,
            max_norm,
            m,
            v,
            t: 0,
            skipped: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn skipped_steps(&self) -> u64 {
        self.skipped
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    /// Clips the global gradient norm, then applies one bias-corrected
    /// Adam step with decoupled weight decay. A parameter that never
    /// received a gradient this step contributes zero.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let mut grads: Vec<Vec<f64>> = self
            .params
            .iter()
            .map(|p| match p.grad() {
                Some(g) => g.iter().map(|x| x.as_f64()).collect(),
                None => vec![0.0; p.numel()],
            })
            .collect();
        let (grad_norm, clipped_norm) = clip_to_norm(&mut grads, self.max_norm);
        if !grad_norm.is_finite() {
            self.skipped += 1;
            return Ok(StepOutcome::SkippedNonFinite);
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let mut data: Vec<f64> = p.data().iter().map(|x| x.as_f64()).collect();
            for (j, x) in data.iter_mut().enumerate() {
                let g = grads[i][j];
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *x -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *x);
            }
            p.set_data(data.into_iter().map(S::of).collect())?;
        }
        Ok(StepOutcome::Applied {
            grad_norm,
            clipped_norm,
        })
    }
}

/// Learning rate after `epoch` under a multi-step schedule:
/// base scaled by gamma once per milestone at or before the epoch.
pub fn lr_at_epoch(base_lr: f64, milestones: &[usize], gamma: f64, epoch: usize) -> f64 {
    let hits = milestones.iter().filter(|&&m| m <= epoch).count();
    base_lr * gamma.powi(hits as i32)
}

/// Supervised horizon for an epoch: 1 during warm-up, then one more step
/// every `cl_epochs` epochs until the full horizon.
pub fn curriculum_horizon(
    epoch: usize,
    warm_epochs: usize,
    cl_epochs: usize,
    max_horizon: usize,
) -> usize {
    if epoch < warm_epochs {
        return 1.min(max_horizon.max(1));
    }
    (1 + (epoch - warm_epochs) / cl_epochs.max(1)).min(max_horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn param(name: &str, data: Vec<f64>) -> Param<f64> {
        let shape = vec![data.len()];
        Param::new(name, data, &shape, true).unwrap()
    }

    fn give_grad(p: &Param<f64>, g: &[f64]) {
        let weights = Tensor::constant(g.to_vec(), &[g.len()]).unwrap();
        p.value().mul(&weights).unwrap().sum_all().backward().unwrap();
    }

    #[test]
    fn clip_rescales_to_the_requested_norm() {
        let mut grads = vec![vec![30.0], vec![40.0]];
        let (before, after) = clip_to_norm(&mut grads, 5.0);
        assert_eq!(before, 50.0);
        assert!((after - 5.0).abs() < 1e-9);
        assert!((grads[0][0] - 3.0).abs() < 1e-12);
        assert!((grads[1][0] - 4.0).abs() < 1e-12);

        let mut small = vec![vec![1.0, 2.0]];
        let (b, a) = clip_to_norm(&mut small, 5.0);
        assert_eq!(b, a);
        assert_eq!(small[0], vec![1.0, 2.0]);
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let p = param("w", vec![1.5, -2.5]);
        let mut opt = AdamW::new(vec![p.clone()], 0.01, 0.0, 1e-8, 5.0);
        let outcome = opt.step().unwrap();
        assert!(matches!(outcome, StepOutcome::Applied { grad_norm, .. } if grad_norm == 0.0));
        assert_eq!(p.data(), vec![1.5, -2.5]);
    }

    #[test]
    fn first_step_matches_a_hand_stepped_oracle() {
        let lr = 0.01;
        let g = 0.3;
        let p = param("w", vec![1.0, 1.0]);
        give_grad(&p, &[g, g]);
        let mut opt = AdamW::new(vec![p.clone()], lr, 0.0, 1e-8, 5.0);
        opt.step().unwrap();

        // Hand-stepped: m=0.1g, v=0.001g^2, both bias-corrected at t=1.
        let m_hat = (0.1 * g) / (1.0 - 0.9f64);
        let v_hat = (0.001 * g * g) / (1.0 - 0.999f64);
        let expected = 1.0 - lr * m_hat / (v_hat.sqrt() + 1e-8);
        for x in p.data() {
            assert!((x - expected).abs() < 1e-15, "{x} vs {expected}");
            assert!((1.0 - x - lr).abs() < 1e-9, "step magnitude far from lr");
        }
    }

    #[test]
    fn decoupled_decay_shrinks_weights_without_gradients() {
        let p = param("w", vec![2.0]);
        let mut opt = AdamW::new(vec![p.clone()], 0.01, 0.1, 1e-8, 5.0);
        opt.step().unwrap();
        assert!((p.data()[0] - 2.0 * (1.0 - 0.001)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradients_skip_the_step() {
        let p = param("w", vec![1.0]);
        give_grad(&p, &[f64::INFINITY]);
        let mut opt = AdamW::new(vec![p.clone()], 0.01, 0.0, 1e-8, 5.0);
        let outcome = opt.step().unwrap();
        assert_eq!(outcome, StepOutcome::SkippedNonFinite);
        assert_eq!(opt.skipped_steps(), 1);
        assert_eq!(p.data(), vec![1.0]);

        // The next finite step must behave like the first step.
        p.zero_grad();
        give_grad(&p, &[0.3]);
        let outcome = opt.step().unwrap();
        assert!(matches!(outcome, StepOutcome::Applied { .. }));
        assert!((1.0 - p.data()[0] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn oversized_gradients_are_clipped_before_stepping() {
        let p = param("w", vec![0.0, 0.0]);
        give_grad(&p, &[30.0, 40.0]);
        let mut opt = AdamW::new(vec![p.clone()], 0.01, 0.0, 1e-8, 5.0);
        match opt.step().unwrap() {
            StepOutcome::Applied {
                grad_norm,
                clipped_norm,
            } => {
                assert_eq!(grad_norm, 50.0);
                assert!((clipped_norm - 5.0).abs() < 1e-9);
            }
            other => panic!("unexpected outcome {other:?}"),
        }
    }

    #[test]
    fn frozen_params_are_excluded() {
        let frozen = Param::new("frozen", vec![1.0], &[1], false).unwrap();
        let live = param("live", vec![1.0]);
        let opt = AdamW::new(vec![frozen.clone(), live], 0.01, 0.1, 1e-8, 5.0);
        assert_eq!(opt.param_count(), 1);
    }

    #[test]
    fn lr_schedule_matches_the_closed_form_table() {
        let milestones = [1, 30, 38, 46, 54, 62, 70, 80];
        let lr = |e| lr_at_epoch(0.002, &milestones, 0.5, e);
        assert_eq!(lr(0), 0.002);
        assert_eq!(lr(1), 0.001);
        assert_eq!(lr(29), 0.001);
        assert_eq!(lr(30), 0.0005);
        assert_eq!(lr(38), 0.00025);
        assert_eq!(lr(79), 0.002 * 0.5f64.powi(7));
        assert_eq!(lr(80), 0.002 * 0.5f64.powi(8));
        assert_eq!(lr(100), 0.002 * 0.5f64.powi(8));
    }

    #[test]
    fn curriculum_grows_after_warmup_and_saturates() {
        let h = |e| curriculum_horizon(e, 30, 3, 12);
        assert_eq!(h(0), 1);
        assert_eq!(h(29), 1);
        assert_eq!(h(30), 1);
        assert_eq!(h(32), 1);
        assert_eq!(h(33), 2);
        assert_eq!(h(36), 3);
        assert_eq!(h(30 + 11 * 3), 12);
        assert_eq!(h(300), 12);
        assert_eq!(curriculum_horizon(0, 0, 1, 1), 1);
    }

    #[test]
    fn set_lr_changes_step_size() {
        let p = param("w", vec![0.0]);
        give_grad(&p, &[1.0]);
        let mut opt = AdamW::new(vec![p.clone()], 0.01, 0.0, 1e-8, 5.0);
        opt.set_lr(0.5);
        opt.step().unwrap();
        assert!((p.data()[0] + 0.5).abs() < 1e-7);
    }
}
