//! Scalar losses and log-densities built from tape primitives.

use super::{NumError, Tape, Var};

pub const HUBER_DELTA: f64 = 1.0;
const BCE_CLAMP: f64 = 1e-7;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Mean Huber loss, written as `0.5 q^2 + delta (|r| - |q|)` with
/// `q = clamp(r, -delta, delta)` so that it stays differentiable.
pub fn huber(tape: &mut Tape, pred: Var, target: Var, delta: f64) -> Result<Var, NumError> {
    let r = tape.sub(pred, target)?;
    let q = tape.clamp(r, -delta, delta)?;
    let q2 = tape.square(q)?;
    let quad = tape.mul_scalar(q2, 0.5)?;
    let ar = tape.abs(r)?;
    let aq = tape.abs(q)?;
    let lin = tape.sub(ar, aq)?;
    let lin = tape.mul_scalar(lin, delta)?;
    let per = tape.add(quad, lin)?;
    tape.mean(per)
}

/// Mean binary cross-entropy on probabilities, clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce(tape: &mut Tape, prob: Var, target: Var) -> Result<Var, NumError> {
    let p = tape.clamp(prob, BCE_CLAMP, 1.0 - BCE_CLAMP)?;
    let lp = tape.log(p)?;
    let one_minus = tape.mul_scalar(p, -1.0)?;
    let one_minus = tape.add_scalar(one_minus, 1.0)?;
    let lq = tape.log(one_minus)?;
    let pos = tape.mul(target, lp)?;
    let neg_t = tape.mul_scalar(target, -1.0)?;
    let neg_t = tape.add_scalar(neg_t, 1.0)?;
    let neg = tape.mul(neg_t, lq)?;
    let ll = tape.add(pos, neg)?;
    let m = tape.mean(ll)?;
    tape.neg(m)
}

/// BCE on logits through a sigmoid.
pub fn bce_with_logits(tape: &mut Tape, logits: Var, target: Var) -> Result<Var, NumError> {
    let p = tape.sigmoid(logits)?;
    bce(tape, p, target)
}

/// Standard-normal log-density summed over the trailing axis.
pub fn std_normal_log_prob(tape: &mut Tape, eps: Var) -> Result<Var, NumError> {
    let d = tape.value(eps).last_dim() as f64;
    let sq = tape.square(eps)?;
    let s = tape.sum_last(sq)?;
    let s = tape.mul_scalar(s, -0.5)?;
    tape.add_scalar(s, -HALF_LN_2PI * d)
}

pub fn std_normal_log_pdf(x: f64) -> f64 {
    -0.5 * x * x - HALF_LN_2PI
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Tensor;

    fn eval(f: impl Fn(&mut Tape, Var, Var) -> Result<Var, NumError>, p: f64, t: f64) -> f64 {
        let mut tape = Tape::new();
        let a = tape.scalar(p);
        let b = tape.scalar(t);
        let out = f(&mut tape, a, b).unwrap();
        tape.value(out).item().unwrap()
    }

    #[test]
    fn huber_values() {
        let h = |tape: &mut Tape, a, b| huber(tape, a, b, HUBER_DELTA);
        assert_eq!(eval(h, 0.0, 0.0), 0.0);
        assert_eq!(eval(h, 2.0, 0.0), 1.5);
        assert_eq!(eval(h, 0.5, 0.0), 0.125);
    }

    #[test]
    fn bce_at_half() {
        let v = eval(bce, 0.5, 1.0);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_is_clamped() {
        let v = eval(bce, 0.0, 1.0);
        assert!(v.is_finite());
        assert!((v + (1e-7f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn normal_log_prob_at_zero() {
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let lp = std_normal_log_prob(&mut tape, e).unwrap();
        assert!((tape.value(lp).data()[0] + 2.0 * HALF_LN_2PI).abs() < 1e-15);
        assert!((std_normal_log_pdf(0.0) + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }
}
