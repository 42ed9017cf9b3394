//! Classification and distillation losses with analytic logit gradients.
//!
//! Softmax uses max-subtraction, log-probabilities go through log-sum-exp,
//! and probabilities are clamped at 1e-12 before any log.

use super::Real;

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

pub fn softmax_into<F: Real>(logits: &[F], out: &mut [F]) {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        let e = (z - max).exp();
        *o = e;
        sum += e;
    }
    let inv = F::one() / sum;
    for o in out.iter_mut() {
        *o = *o * inv;
    }
}

pub fn log_softmax_into<F: Real>(logits: &[F], out: &mut [F]) {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for &z in logits {
        sum += (z - max).exp();
    }
    let log_z = max + sum.ln();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z - log_z;
    }
}

/// Softmax cross-entropy for one sample. Returns the loss and writes the
/// unscaled gradient w.r.t. the logits (`softmax - onehot`) into `d_logits`.
pub fn cross_entropy_grad<F: Real>(logits: &[F], label: usize, d_logits: &mut [F]) -> F {
    softmax_into(logits, d_logits);
    let floor = F::from_f64(PROB_FLOOR);
    let loss = -d_logits[label].max(floor).ln();
    d_logits[label] -= F::one();
    loss
}

/// Distillation loss for one sample: `T^2 * KL(teacher || softmax(z / T))`.
/// `teacher` must already be a probability distribution. Writes the unscaled
/// gradient w.r.t. the student logits (`T * (softmax(z/T) - teacher)`).
pub fn distill_grad<F: Real>(
    logits: &[F],
    teacher: &[F],
    temperature: F,
    d_logits: &mut [F],
) -> F {
    let inv_t = F::one() / temperature;
    let scaled: Vec<F> = logits.iter().map(|&z| z * inv_t).collect();
    let mut log_student = vec![F::zero(); logits.len()];
    log_softmax_into(&scaled, &mut log_student);

    let floor = F::from_f64(PROB_FLOOR);
    let t2 = temperature * temperature;
    let mut loss = F::zero();
    for i in 0..logits.len() {
        let t = teacher[i].max(floor);
        loss += t * (t.ln() - log_student[i]);
        // d/dz of T^2 * KL is T * (softmax(z/T) - teacher).
        d_logits[i] = temperature * (log_student[i].exp() - teacher[i]);
    }
    loss * t2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_is_uniform_for_equal_logits() {
        let mut p = [0.0f64; 4];
        softmax_into(&[3.0; 4], &mut p);
        for v in p {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut p = [0.0f32; 2];
        softmax_into(&[1000.0, -1000.0], &mut p);
        assert!(p[0] > 0.999 && p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_matches_direct_formula() {
        let logits = [1.0f64, -2.0, 0.5];
        let mut grad = [0.0f64; 3];
        let loss = cross_entropy_grad(&logits, 2, &mut grad);
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        assert!((loss - (-(logits[2].exp() / z).ln())).abs() < 1e-12);
        // Gradient rows sum to zero.
        assert!(grad.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn self_distillation_has_zero_loss_and_grad() {
        let logits = [0.3f64, -1.0, 2.0];
        let mut teacher = [0.0f64; 3];
        softmax_into(&logits, &mut teacher);
        let mut grad = [1.0f64; 3];
        let loss = distill_grad(&logits, &teacher, 1.0, &mut grad);
        assert!(loss.abs() < 1e-12);
        for g in grad {
            assert!(g.abs() < 1e-12);
        }
    }
}
