//! Central-difference gradient verification.

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Denominator floor for relative errors. Below it the comparison is
/// effectively absolute.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// `|a - n| / max(|a|, |n|, REL_ERR_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub rel_err: Vec<f64>,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl FdReport {
    pub fn from_pairs(analytic: Tensor, numeric: Tensor, tol: f64) -> Self {
        let rel: Vec<f64> = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| rel_err(a, n))
            .collect();
        let max_rel_err = rel.iter().copied().fold(0.0, f64::max);
        FdReport {
            analytic,
            numeric,
            rel_err: rel,
            max_rel_err,
            tol,
            passed: max_rel_err <= tol,
        }
    }
}

/// Compares the tape gradient of scalar `f` at `x` against central
/// differences with the given step.
///
/// Errors raised by `f` itself are returned; mismatches are only reported.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let out = f(&mut tape, xv)?;
    let analytic = tape.backward(out)?.wrt(xv);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.leaf(probe);
        let o = f(&mut t, v)?;
        Ok(t.value(o).item())
    };

    let mut numeric = vec![0.0; x.numel()];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        *slot = (eval(plus)? - eval(minus)?) / (2.0 * step);
    }
    let numeric = Tensor::new(x.shape().to_vec(), numeric)?;
    Ok(FdReport::from_pairs(analytic, numeric, tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn sum_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 4.0]);
        let r = finite_diff_check(|t, v| t.sum(v, None), &x, 1e-5, 0.0).unwrap();
        assert_eq!(r.analytic.data(), &[1.0, 1.0, 1.0]);
        assert!(r.max_rel_err < 1e-9, "{}", r.max_rel_err);
    }

    #[test]
    fn unused_coordinate_has_zero_gradient_both_ways() {
        let x = Tensor::vector(vec![0.5, 2.0]);
        let r = finite_diff_check(
            |t, v| {
                let first = t.reshape(v, &[1, 2])?;
                let first = t.slice_cols(first, 0, 1)?;
                let sq = t.mul(first, first)?;
                t.sum(sq, None)
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert_eq!(r.analytic.data()[1], 0.0);
        assert_eq!(r.numeric.data()[1], 0.0);
        assert!(r.passed);
    }

    #[test]
    fn matmul_grad_is_ones_times_bt() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let bc = b.clone();
        let r = finite_diff_check(
            move |t, v| {
                let bv = t.constant(bc.clone());
                let c = t.matmul(v, bv)?;
                t.sum(c, None)
            },
            &a,
            1e-5,
            1e-6,
        )
        .unwrap();
        let expected = Tensor::ones(&[3, 2]).matmul(&b.transpose().unwrap()).unwrap();
        assert!(r.analytic.max_abs_diff(&expected) < 1e-12);
        assert!(r.passed, "{}", r.max_rel_err);
    }

    #[test]
    fn exp_gradient_equals_exp() {
        let x = Tensor::vector(vec![0.0, 1.0]);
        let r = finite_diff_check(
            |t, v| {
                let e = t.exp(v)?;
                t.sum(e, None)
            },
            &x,
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!((r.analytic.data()[0] - 1.0).abs() < 1e-15);
        assert!((r.analytic.data()[1] - 1f64.exp()).abs() < 1e-15);
        assert!(r.passed);
    }

    #[test]
    fn mean_gradient_is_one_over_n() {
        let x = Tensor::vector(vec![1.0, -2.0, 0.5, 9.0]);
        let r = finite_diff_check(|t, v| t.mean(v, None), &x, 1e-5, 1e-8).unwrap();
        assert!(r.analytic.data().iter().all(|&g| g == 0.25));
        assert!(r.passed);
    }

    #[test]
    fn softmax_cross_style_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[3, 5], &mut rng);
        let target = random(&[3, 5], &mut rng).map(f64::abs);
        let r = finite_diff_check(
            move |t, v| {
                let p = t.softmax(v)?;
                let lp = t.log(p)?;
                let y = t.constant(target.clone());
                let prod = t.mul(lp, y)?;
                let s = t.sum(prod, None)?;
                t.neg(s)
            },
            &x,
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(r.passed, "{}", r.max_rel_err);
    }
}
