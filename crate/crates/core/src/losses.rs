//! Training objectives: label-smoothed cross-entropy, mixup, sequence- and
//! frame-level distillation, and their weighted sum.
//!
//! All batch reductions are arithmetic means over samples. Teacher operands
//! are expected to be constants on the tape so no gradient reaches them.

use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    /// Weight of the sequence-level term.
    pub lambda1: f64,
    /// Weight of the frame-level term.
    pub lambda2: f64,
    /// Label-smoothing mass.
    pub epsilon: f64,
    pub mixup_alpha: f64,
    pub mixup_enabled: bool,
    pub kd1_enabled: bool,
    pub kd2_enabled: bool,
    /// Alignment Gaussian width.
    pub sigma: f64,
    /// Alignment window, odd.
    pub window: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda1: 2.0,
            lambda2: 10.0,
            epsilon: 0.1,
            mixup_alpha: 0.2,
            mixup_enabled: false,
            kd1_enabled: false,
            kd2_enabled: false,
            sigma: 3.0,
            window: 7,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lambda1 >= 0.0) || !self.lambda1.is_finite() {
            return Err(format!("distill.lambda1 must be >= 0, got {}", self.lambda1));
        }
        if !(self.lambda2 >= 0.0) || !self.lambda2.is_finite() {
            return Err(format!("distill.lambda2 must be >= 0, got {}", self.lambda2));
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(format!("distill.epsilon must be in [0, 1), got {}", self.epsilon));
        }
        if self.mixup_enabled && !(self.mixup_alpha > 0.0) {
            return Err(format!("distill.mixup_alpha must be > 0, got {}", self.mixup_alpha));
        }
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(format!("distill.sigma must be > 0, got {}", self.sigma));
        }
        if self.window.is_multiple_of(2) {
            return Err(format!("distill.window must be odd, got {}", self.window));
        }
        Ok(())
    }
}

/// Smoothed target: `ε/N` off-class, `1 − (N−1)ε/N` on the label.
pub fn smoothed_target(label: usize, num_classes: usize, epsilon: f64) -> Result<Vec<f64>> {
    if label >= num_classes {
        return Err(TensorError::Invalid(format!(
            "label {label} out of range for {num_classes} classes"
        )));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(TensorError::Invalid(format!("epsilon {epsilon} outside [0, 1)")));
    }
    let n = num_classes as f64;
    let mut q = vec![epsilon / n; num_classes];
    q[label] = 1.0 - (n - 1.0) * epsilon / n;
    Ok(q)
}

/// Stacked smoothed targets `[B, N]`.
pub fn smoothed_targets(labels: &[usize], num_classes: usize, epsilon: f64) -> Result<Tensor> {
    if labels.is_empty() {
        return Err(TensorError::Empty("smoothed_targets"));
    }
    let mut data = Vec::with_capacity(labels.len() * num_classes);
    for &y in labels {
        data.extend(smoothed_target(y, num_classes, epsilon)?);
    }
    Tensor::new(vec![labels.len(), num_classes], data)
}

/// `−Σ q·log softmax(logits)`, averaged over the batch. `logits`, `targets`: `[B, N]`.
pub fn label_smoothed_ce(tape: &mut Tape, logits: Var, targets: Var) -> Result<Var> {
    let (sl, st) = (tape.shape(logits), tape.shape(targets));
    if sl.len() != 2 || sl != st {
        return Err(TensorError::ShapeMismatch {
            op: "label_smoothed_ce",
            lhs: sl.to_vec(),
            rhs: st.to_vec(),
        });
    }
    let b = sl[0] as f64;
    let lp = tape.log_softmax(logits)?;
    let prod = tape.mul(lp, targets)?;
    let s = tape.sum_all(prod);
    Ok(tape.scale(s, -1.0 / b))
}

/// Plain-value cross-entropy of one logit row against a target distribution.
pub fn cross_entropy(logits: &[f64], target: &[f64]) -> Result<f64> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(TensorError::ShapeMismatch {
            op: "cross_entropy",
            lhs: vec![logits.len()],
            rhs: vec![target.len()],
        });
    }
    if logits.iter().any(|x| x.is_nan()) {
        return Err(TensorError::NaN("cross_entropy"));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    Ok(-logits.iter().zip(target).map(|(x, q)| q * (x - lse)).sum::<f64>())
}

/// `λ·a + (1−λ)·b`.
pub fn mix(a: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(TensorError::Invalid(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    if lambda == 1.0 {
        // exact identity cases; the arithmetic form can round
        return if a.shape() == b.shape() {
            Ok(a.clone())
        } else {
            Err(TensorError::ShapeMismatch { op: "mixup", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() })
        };
    }
    if lambda == 0.0 {
        return if a.shape() == b.shape() {
            Ok(b.clone())
        } else {
            Err(TensorError::ShapeMismatch { op: "mixup", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() })
        };
    }
    a.zip_map(b, |x, y| lambda * x + (1.0 - lambda) * y)
}

/// Mixed visual, audio and target tensors sharing one coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub visual: Tensor,
    pub audio: Tensor,
    pub targets: Tensor,
    pub lambda: f64,
}

/// Mix two batches on both modalities and on the smoothed targets with the same `λ`.
pub fn mixup_batch(
    a: (&Tensor, &Tensor, &Tensor),
    b: (&Tensor, &Tensor, &Tensor),
    lambda: f64,
) -> Result<MixedBatch> {
    Ok(MixedBatch {
        visual: mix(a.0, b.0, lambda)?,
        audio: mix(a.1, b.1, lambda)?,
        targets: mix(a.2, b.2, lambda)?,
        lambda,
    })
}

/// Draw a mixup coefficient from `Beta(α, α)`.
pub fn sample_mixup_lambda<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| TensorError::Invalid(format!("mixup alpha {alpha}: {e}")))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

fn squared_distance(tape: &mut Tape, a: Var, b: Var, op: &'static str) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        });
    }
    let d = tape.sub(a, b)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.sum_all(sq))
}

/// `‖s_a − s_v‖²` averaged over the batch. Both `[B, D]`.
pub fn seq_kd_loss(tape: &mut Tape, s_a: Var, s_v: Var) -> Result<Var> {
    if tape.shape(s_v).len() != 2 {
        return Err(TensorError::ShapeMismatch {
            op: "seq_kd_loss",
            lhs: tape.shape(s_a).to_vec(),
            rhs: tape.shape(s_v).to_vec(),
        });
    }
    let b = tape.shape(s_v)[0] as f64;
    let s = squared_distance(tape, s_a, s_v, "seq_kd_loss")?;
    Ok(tape.scale(s, 1.0 / b))
}

/// `(1/J)·Σ_j ‖h_v_j − h̃_a_j‖²` averaged over the batch. Both `[B, J, D]`.
pub fn frame_kd_loss(tape: &mut Tape, h_v: Var, h_a_aligned: Var) -> Result<Var> {
    if tape.shape(h_v).len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "frame_kd_loss",
            lhs: tape.shape(h_v).to_vec(),
            rhs: tape.shape(h_a_aligned).to_vec(),
        });
    }
    let (b, j) = (tape.shape(h_v)[0], tape.shape(h_v)[1]);
    let s = squared_distance(tape, h_v, h_a_aligned, "frame_kd_loss")?;
    Ok(tape.scale(s, 1.0 / (b * j) as f64))
}

/// `L_base + λ₁·L_KD1 + λ₂·L_KD2` with absent terms contributing nothing.
pub fn total_loss(
    tape: &mut Tape,
    base: Var,
    kd1: Option<Var>,
    kd2: Option<Var>,
    cfg: &DistillConfig,
) -> Result<Var> {
    let mut total = base;
    if let Some(k) = kd1 {
        let w = tape.scale(k, cfg.lambda1);
        total = tape.add(total, w)?;
    }
    if let Some(k) = kd2 {
        let w = tape.scale(k, cfg.lambda2);
        total = tape.add(total, w)?;
    }
    Ok(total)
}

/// Same composition on plain values.
pub fn total_loss_value(base: f64, kd1: f64, kd2: f64, cfg: &DistillConfig) -> f64 {
    base + cfg.lambda1 * kd1 + cfg.lambda2 * kd2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, GradCheckConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ce(logits: &Tensor, targets: &Tensor) -> f64 {
        let mut t = Tape::new();
        let l = t.constant(logits.clone());
        let q = t.constant(targets.clone());
        let v = label_smoothed_ce(&mut t, l, q).unwrap();
        t.value(v).item()
    }

    #[test]
    fn lrw_scale_smoothed_target() {
        let q = smoothed_target(7, 500, 0.1).unwrap();
        assert_abs_diff_eq!(q[0], 0.0002, epsilon = 1e-15);
        assert_abs_diff_eq!(q[7], 0.9002, epsilon = 1e-15);
        assert_abs_diff_eq!(q.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(smoothed_target(500, 500, 0.1).is_err());
        assert!(smoothed_target(0, 5, 1.0).is_err());
    }

    #[test]
    fn zero_epsilon_is_one_hot_ce() {
        let logits = Tensor::from_fn(&[3, 5], |i| ((i * 13 % 7) as f64) * 0.4 - 1.0);
        let labels = [4, 0, 2];
        let q = smoothed_targets(&labels, 5, 0.0).unwrap();
        let mut want = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &logits.data()[r * 5..r * 5 + 5];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            want += lse - row[y];
        }
        want /= 3.0;
        assert!((ce(&logits, &q) - want).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        let logits = Tensor::full(&[2, 10], 0.7);
        let q = smoothed_targets(&[3, 9], 10, 0.1).unwrap();
        assert!((ce(&logits, &q) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ce_shape_mismatch() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[2, 3]));
        let q = t.constant(Tensor::zeros(&[2, 4]));
        assert!(label_smoothed_ce(&mut t, l, q).is_err());
    }

    #[test]
    fn plain_ce_matches_tape() {
        let logits = Tensor::from_fn(&[1, 4], |i| i as f64 * 0.3);
        let q = smoothed_targets(&[1], 4, 0.2).unwrap();
        let v = cross_entropy(logits.data(), q.data()).unwrap();
        assert!((v - ce(&logits, &q)).abs() < 1e-15);
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::full(&[2, 3], 2.0);
        assert!(mix(&a, &b, 1.0).unwrap().bit_eq(&a));
        assert!(mix(&a, &b, 0.0).unwrap().bit_eq(&b));
        assert!(mix(&a, &b, 0.5).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(mix(&a, &b, 1.5).is_err());
        assert!(mix(&a, &b, -0.1).is_err());
        assert!(mix(&a, &Tensor::zeros(&[3, 2]), 1.0).is_err());
    }

    #[test]
    fn mixup_uses_one_lambda_everywhere() {
        let va = Tensor::full(&[1, 2], 1.0);
        let vb = Tensor::full(&[1, 2], 3.0);
        let aa = Tensor::full(&[1, 4], -1.0);
        let ab = Tensor::full(&[1, 4], 1.0);
        let qa = smoothed_targets(&[0], 3, 0.0).unwrap();
        let qb = smoothed_targets(&[2], 3, 0.0).unwrap();
        let m = mixup_batch((&va, &aa, &qa), (&vb, &ab, &qb), 0.25).unwrap();
        assert!(m.visual.data().iter().all(|&v| v == 2.5));
        assert!(m.audio.data().iter().all(|&v| v == 0.5));
        assert_eq!(m.targets.data(), &[0.25, 0.0, 0.75]);
    }

    #[test]
    fn beta_lambda_in_unit_interval_and_seeded() {
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = sample_mixup_lambda(0.2, &mut r1).unwrap();
            assert!((0.0..=1.0).contains(&a));
            assert_eq!(a.to_bits(), sample_mixup_lambda(0.2, &mut r2).unwrap().to_bits());
        }
        assert!(sample_mixup_lambda(0.0, &mut r1).is_err());
    }

    fn kd_value(f: fn(&mut Tape, Var, Var) -> Result<Var>, a: &Tensor, b: &Tensor) -> Result<f64> {
        let mut t = Tape::new();
        let x = t.constant(a.clone());
        let y = t.constant(b.clone());
        let v = f(&mut t, x, y)?;
        Ok(t.value(v).item())
    }

    #[test]
    fn seq_kd_examples() {
        let sa = Tensor::matrix(&[&[1.0, 2.0]]).unwrap();
        let sv = Tensor::zeros(&[1, 2]);
        assert_eq!(kd_value(seq_kd_loss, &sa, &sv).unwrap(), 5.0);
        assert_eq!(kd_value(seq_kd_loss, &sa, &sa).unwrap(), 0.0);
        let c = 3.0;
        let v = kd_value(seq_kd_loss, &sa.scale(c), &sv.scale(c)).unwrap();
        assert!((v - 45.0).abs() < 1e-12);
        assert!(kd_value(seq_kd_loss, &sa, &Tensor::zeros(&[1, 3])).is_err());
        // batch mean
        let two = Tensor::matrix(&[&[1.0, 2.0], &[0.0, 0.0]]).unwrap();
        assert_eq!(kd_value(seq_kd_loss, &two, &Tensor::zeros(&[2, 2])).unwrap(), 2.5);
    }

    #[test]
    fn frame_kd_examples() {
        let hv = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let ha = Tensor::zeros(&[1, 2, 2]);
        assert_eq!(kd_value(frame_kd_loss, &hv, &ha).unwrap(), 1.0);
        assert_eq!(kd_value(frame_kd_loss, &hv, &hv).unwrap(), 0.0);
        assert!(kd_value(frame_kd_loss, &hv, &Tensor::zeros(&[1, 3, 2])).is_err());
    }

    #[test]
    fn total_composition() {
        let cfg = DistillConfig::default();
        assert_eq!(total_loss_value(1.0, 0.5, 0.1, &cfg), 3.0);
        let mut t = Tape::new();
        let b = t.constant(Tensor::scalar(1.0));
        let k1 = t.constant(Tensor::scalar(0.5));
        let k2 = t.constant(Tensor::scalar(0.1));
        let tot = total_loss(&mut t, b, Some(k1), Some(k2), &cfg).unwrap();
        assert_eq!(t.value(tot).item(), 3.0);
        let zero = DistillConfig { lambda1: 0.0, lambda2: 0.0, ..cfg.clone() };
        let tot = total_loss(&mut t, b, Some(k1), Some(k2), &zero).unwrap();
        assert_eq!(t.value(tot).item(), 1.0);
        assert_eq!(total_loss_value(0.0, 0.0, 0.0, &cfg), 0.0);
    }

    #[test]
    fn config_validation() {
        DistillConfig::default().validate().unwrap();
        assert!(DistillConfig { lambda1: -1.0, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { epsilon: 1.0, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { window: 4, ..Default::default() }.validate().is_err());
        assert!(DistillConfig { mixup_enabled: true, mixup_alpha: 0.0, ..Default::default() }
            .validate()
            .is_err());
    }

    #[test]
    fn composite_loss_gradcheck() {
        // student-side operands tracked, teacher-side constants
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = Tensor::from_fn(&[2, 4], |_| rng.random_range(-2.0..2.0));
        let sv = Tensor::from_fn(&[2, 3], |_| rng.random_range(-1.0..1.0));
        let hv = Tensor::from_fn(&[2, 3, 3], |_| rng.random_range(-1.0..1.0));
        let sa = Tensor::from_fn(&[2, 3], |_| rng.random_range(-1.0..1.0));
        let ha = Tensor::from_fn(&[2, 3, 3], |_| rng.random_range(-1.0..1.0));
        let q = smoothed_targets(&[1, 3], 4, 0.1).unwrap();
        let cfg = DistillConfig::default();
        let r = finite_diff_check(
            |t, v| {
                let qa = t.constant(q.clone());
                let a = t.constant(sa.clone());
                let h = t.constant(ha.clone());
                let base = label_smoothed_ce(t, v[0], qa)?;
                let k1 = seq_kd_loss(t, a, v[1])?;
                let k2 = frame_kd_loss(t, v[2], h)?;
                total_loss(t, base, Some(k1), Some(k2), &cfg)
            },
            &[logits, sv, hv],
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    proptest! {
        #[test]
        fn smoothed_targets_sum_to_one(n in 2usize..600, eps in 0.0f64..0.99, y in 0usize..600) {
            let q = smoothed_target(y % n, n, eps).unwrap();
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn target_mixing_equals_loss_mixing(
            lam in 0.0f64..=1.0,
            ya in 0usize..6,
            yb in 0usize..6,
            seed in 0u64..500,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Tensor::from_fn(&[1, 6], |_| rng.random_range(-4.0..4.0));
            let qa = smoothed_targets(&[ya], 6, 0.1).unwrap();
            let qb = smoothed_targets(&[yb], 6, 0.1).unwrap();
            let qm = mix(&qa, &qb, lam).unwrap();
            let lhs = ce(&logits, &qm);
            let rhs = lam * ce(&logits, &qa) + (1.0 - lam) * ce(&logits, &qb);
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }

        #[test]
        fn kd_losses_nonnegative_and_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Tensor::from_fn(&[1, 4, 2], |_| rng.random_range(-3.0..3.0));
            let b = Tensor::from_fn(&[1, 4, 2], |_| rng.random_range(-3.0..3.0));
            let v = kd_value(frame_kd_loss, &a, &b).unwrap();
            prop_assert!(v > 0.0);
            let perm = [2usize, 0, 3, 1];
            let p = |t: &Tensor| Tensor::from_fn(&[1, 4, 2], |i| t.data()[perm[i / 2] * 2 + i % 2]);
            let vp = kd_value(frame_kd_loss, &p(&a), &p(&b)).unwrap();
            prop_assert!((v - vp).abs() < 1e-12);
            let s = kd_value(seq_kd_loss, &a.clone().reshape(&[1, 8]).unwrap(), &b.clone().reshape(&[1, 8]).unwrap()).unwrap();
            prop_assert!(s > 0.0);
        }

        #[test]
        fn total_is_linear_in_lambda2(l2 in 0.0f64..50.0, kd2 in 0.0f64..5.0) {
            let cfg = DistillConfig { lambda2: l2, ..Default::default() };
            let cfg1 = DistillConfig { lambda2: l2 + 1.0, ..Default::default() };
            let d = total_loss_value(1.0, 0.3, kd2, &cfg1) - total_loss_value(1.0, 0.3, kd2, &cfg);
            prop_assert!((d - kd2).abs() < 1e-9);
        }
    }
}
