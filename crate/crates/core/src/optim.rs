//! SGD with momentum, Adam, and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            base_lr: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("sgd.base_lr must be > 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "sgd.momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "sgd.weight_decay must be ≥ 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("adam.lr must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam.{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("adam.epsilon must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    /// ×0.1 at 60% and again at 80% of training.
    Step,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Scale the base rate by `batch_size / 128`.
    pub lr_scaling: bool,
}

/// Batch sizes above this get the linear warmup.
pub const WARMUP_BATCH_THRESHOLD: usize = 256;

impl ScheduleConfig {
    pub fn cosine(total_epochs: usize, batch_size: usize) -> Self {
        ScheduleConfig {
            kind: ScheduleKind::Cosine,
            total_epochs,
            warmup_epochs: 10,
            batch_size,
            lr_scaling: false,
        }
    }

    /// Warmup length actually applied; zero unless the batch is large.
    pub fn effective_warmup(&self) -> usize {
        if self.batch_size > WARMUP_BATCH_THRESHOLD {
            self.warmup_epochs
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::Config("schedule needs at least one epoch".into()));
        }
        if self.effective_warmup() >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than training ({})",
                self.effective_warmup(),
                self.total_epochs
            )));
        }
        Ok(())
    }

    /// The peak rate after optional batch-size scaling.
    pub fn peak_lr(&self, base_lr: f64) -> f64 {
        if self.lr_scaling {
            base_lr * self.batch_size as f64 / 128.0
        } else {
            base_lr
        }
    }

    /// Learning rate at fractional epoch `t`.
    pub fn lr(&self, t: f64, base_lr: f64) -> Result<f64> {
        match self.kind {
            ScheduleKind::Cosine => cosine_lr(t, self, base_lr),
            ScheduleKind::Step => step_lr(t, self, base_lr),
        }
    }

    fn check_range(&self, t: f64) -> Result<f64> {
        let total = self.total_epochs as f64;
        if !(0.0..=total).contains(&t) {
            return Err(Error::Parameter(format!(
                "epoch {t} outside schedule range [0, {total}]"
            )));
        }
        Ok(total)
    }
}

/// Linear warmup from 0, then half a cosine from the peak down to 0 at `total_epochs`.
pub fn cosine_lr(t: f64, cfg: &ScheduleConfig, base_lr: f64) -> Result<f64> {
    let total = cfg.check_range(t)?;
    let peak = cfg.peak_lr(base_lr);
    let warm = cfg.effective_warmup() as f64;
    if t < warm {
        return Ok(peak * t / warm);
    }
    let progress = (t - warm) / (total - warm);
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

pub fn step_lr(t: f64, cfg: &ScheduleConfig, base_lr: f64) -> Result<f64> {
    let total = cfg.check_range(t)?;
    let peak = cfg.peak_lr(base_lr);
    let warm = cfg.effective_warmup() as f64;
    if t < warm {
        return Ok(peak * t / warm);
    }
    let factor = if t < 0.6 * total {
        1.0
    } else if t < 0.8 * total {
        0.1
    } else {
        0.01
    };
    Ok(peak * factor)
}

fn check_lengths(params: usize, grads: usize, state: usize) -> Result<()> {
    if params != grads || params != state {
        return Err(Error::Dimension(format!(
            "optimizer buffers disagree: {params} params, {grads} grads, {state} state"
        )));
    }
    Ok(())
}

/// `g' = g + wd·p; v ← μ·v + g'; p ← p − lr·v`.
pub fn sgd_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    velocity: &mut [T],
    lr: f64,
    cfg: &SgdConfig,
) -> Result<()> {
    check_lengths(params.len(), grads.len(), velocity.len())?;
    let lr = T::from_f64_lossy(lr);
    let mu = T::from_f64_lossy(cfg.momentum);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = *g + wd * *p;
        *v = mu * *v + g;
        *p = *p - lr * *v;
    }
    Ok(())
}

/// Bias-corrected Adam update; `step` counts from 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    first: &mut [T],
    second: &mut [T],
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    check_lengths(params.len(), grads.len(), first.len())?;
    check_lengths(params.len(), grads.len(), second.len())?;
    if step == 0 {
        return Err(Error::Parameter("adam step count starts at 1".into()));
    }
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let t = |v: f64| T::from_f64_lossy(v);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(first.iter_mut())
        .zip(second.iter_mut())
    {
        *m = t(b1) * *m + t(1.0 - b1) * *g;
        *v = t(b2) * *v + t(1.0 - b2) * *g * *g;
        let m_hat = *m / t(c1);
        let v_hat = *v / t(c2);
        *p = *p - t(lr) * m_hat / (v_hat.sqrt() + t(cfg.epsilon));
    }
    Ok(())
}

/// SGD state for a list of parameter tensors.
pub struct Sgd<T: Scalar = f32> {
    pub cfg: SgdConfig,
    velocity: Vec<Vec<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(cfg: SgdConfig, params: &[&Tensor<T>]) -> Self {
        Sgd {
            cfg,
            velocity: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(Error::Dimension("parameter list changed between steps".into()));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            sgd_step(p.data_mut(), g.data(), v, lr, &self.cfg)?;
        }
        Ok(())
    }
}

/// Adam state for a list of parameter tensors.
pub struct Adam<T: Scalar = f32> {
    pub cfg: AdamConfig,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig, params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.len()]).collect();
        Adam {
            cfg,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Dimension("parameter list changed between steps".into()));
        }
        self.step += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            adam_step(
                p.data_mut(),
                g.data(),
                &mut self.first[i],
                &mut self.second[i],
                self.step,
                lr,
                &self.cfg,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched(total: usize, warmup: usize, batch: usize) -> ScheduleConfig {
        ScheduleConfig {
            kind: ScheduleKind::Cosine,
            total_epochs: total,
            warmup_epochs: warmup,
            batch_size: batch,
            lr_scaling: false,
        }
    }

    #[test]
    fn cosine_endpoints() {
        let c = sched(200, 0, 128);
        assert!((cosine_lr(0.0, &c, 0.03).unwrap() - 0.03).abs() < 1e-15);
        assert!(cosine_lr(200.0, &c, 0.03).unwrap().abs() < 1e-12);
        assert!((cosine_lr(100.0, &c, 0.03).unwrap() - 0.015).abs() < 1e-12);
        assert!(matches!(cosine_lr(200.5, &c, 0.03), Err(Error::Parameter(_))));
        assert!(cosine_lr(-0.1, &c, 0.03).is_err());
    }

    #[test]
    fn batch_scaling_and_warmup() {
        let mut c = sched(200, 10, 256);
        c.lr_scaling = true;
        assert!((c.peak_lr(0.03) - 0.06).abs() < 1e-15);
        // warmup only engages above 256
        assert_eq!(c.effective_warmup(), 0);
        let c = sched(200, 10, 512);
        assert!((cosine_lr(5.0, &c, 0.03).unwrap() - 0.015).abs() < 1e-15);
        assert!((cosine_lr(10.0, &c, 0.03).unwrap() - 0.03).abs() < 1e-15);
    }

    #[test]
    fn step_schedule_is_staircase() {
        let mut c = sched(10, 0, 32);
        c.kind = ScheduleKind::Step;
        let lrs: Vec<f64> = [0.0, 5.9, 6.0, 7.9, 8.0, 10.0]
            .iter()
            .map(|&t| c.lr(t, 1.0).unwrap())
            .collect();
        assert_eq!(lrs, vec![1.0, 1.0, 0.1, 0.1, 0.01, 0.01]);
    }

    #[test]
    fn warmup_must_fit() {
        assert!(sched(10, 10, 512).validate().is_err());
        assert!(sched(10, 10, 64).validate().is_ok());
    }

    #[test]
    fn sgd_examples() {
        let cfg = SgdConfig {
            base_lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
        };
        let mut p = [1.0f64];
        let mut v = [0.0];
        sgd_step(&mut p, &[0.5], &mut v, 0.1, &cfg).unwrap();
        assert!((p[0] - 0.95).abs() < 1e-15);

        let mut p = [1.0f64, -2.0];
        let mut v = [0.0, 0.0];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, &cfg).unwrap();
        assert_eq!(p, [1.0, -2.0]);

        assert!(sgd_step(&mut p, &[0.0], &mut v, 0.1, &cfg).is_err());
    }

    #[test]
    fn sgd_two_steps_unrolled() {
        let cfg = SgdConfig {
            base_lr: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
        };
        let (p0, g1, g2, lr1, lr2) = (0.7f64, 0.3, -0.2, 0.03, 0.02);
        let mut p = [p0];
        let mut v = [0.0];
        sgd_step(&mut p, &[g1], &mut v, lr1, &cfg).unwrap();
        sgd_step(&mut p, &[g2], &mut v, lr2, &cfg).unwrap();

        let v1 = g1 + 5e-4 * p0;
        let p1 = p0 - lr1 * v1;
        let v2 = 0.9 * v1 + (g2 + 5e-4 * p1);
        let p2 = p1 - lr2 * v2;
        assert!((p[0] - p2).abs() < 1e-9);
        assert!((v[0] - v2).abs() < 1e-9);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let cfg = AdamConfig::default();
        for g in [1e-3f64, 0.5, 40.0] {
            let (mut p, mut m, mut v) = ([0.0f64], [0.0], [0.0]);
            adam_step(&mut p, &[g], &mut m, &mut v, 1, cfg.lr, &cfg).unwrap();
            assert!((p[0] + cfg.lr).abs() < 1e-6 * cfg.lr + cfg.lr * cfg.epsilon / g);
        }
    }

    #[test]
    fn adam_zero_grads_fixed() {
        let cfg = AdamConfig::default();
        let (mut p, mut m, mut v) = ([0.3f64, -1.0], [0.0; 2], [0.0; 2]);
        for s in 1..=20 {
            adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, s, 0.01, &cfg).unwrap();
        }
        assert_eq!(p, [0.3, -1.0]);
        assert!(adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 0, 0.01, &cfg).is_err());
    }

    #[test]
    fn adam_three_steps_unrolled() {
        let cfg = AdamConfig::default();
        let grads = [0.4f64, -0.1, 0.25];
        let (mut p, mut m, mut v) = ([1.0f64], [0.0], [0.0]);
        for (s, g) in grads.iter().enumerate() {
            adam_step(&mut p, &[*g], &mut m, &mut v, s as u64 + 1, 0.01, &cfg).unwrap();
        }
        let (mut pe, mut me, mut ve) = (1.0f64, 0.0f64, 0.0f64);
        for (s, g) in grads.iter().enumerate() {
            let t = s as i32 + 1;
            me = 0.9 * me + 0.1 * g;
            ve = 0.999 * ve + 0.001 * g * g;
            let mh = me / (1.0 - 0.9f64.powi(t));
            let vh = ve / (1.0 - 0.999f64.powi(t));
            pe -= 0.01 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((p[0] - pe).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn cosine_non_increasing_after_warmup(
            total in 2usize..300,
            warmup in 0usize..20,
            batch in prop::sample::select(vec![64usize, 128, 512, 1024]),
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let c = sched(total, warmup.min(total - 1), batch);
            let w = c.effective_warmup() as f64;
            let span = total as f64 - w;
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let l1 = cosine_lr(w + lo * span, &c, 0.03).unwrap();
            let l2 = cosine_lr(w + hi * span, &c, 0.03).unwrap();
            prop_assert!(l2 <= l1 + 1e-15);
            prop_assert!(cosine_lr(total as f64, &c, 0.03).unwrap().abs() < 1e-12);
        }

        #[test]
        fn cosine_is_continuous(total in 20usize..300, t in 0.0f64..1.0) {
            let c = sched(total, 10, 512);
            let x = t * (total as f64 - 1e-6);
            let d = (cosine_lr(x + 1e-6, &c, 0.03).unwrap() - cosine_lr(x, &c, 0.03).unwrap()).abs();
            prop_assert!(d < 1e-6);
        }
    }
}
