//! Plain (non-recorded) numeric functions shared by the tape ops and by
//! evaluation code that never needs gradients.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Floor applied to `q` inside the KL logarithm.
pub const KL_EPS: f64 = 1e-12;
/// Vectors with a norm below this are treated as carrying no direction.
pub const NORM_EPS: f64 = 1e-12;
const DIST_TOL: f64 = 1e-6;

/// Overflow-safe `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_into(row, &mut out);
    out
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for r in 0..m.rows() {
        softmax_into(m.row(r), out.row_mut(r));
    }
    out
}

pub fn check_distribution(p: &[f64]) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || (total - 1.0).abs() > DIST_TOL {
        return Err(Error::contract(format!("not a probability distribution (sum {total})")));
    }
    Ok(())
}

/// `KL(p || q)` with `0 log 0 = 0` and `q` floored at [`KL_EPS`].
pub fn kl_div(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("kl_div", format!("{} vs {}", p.len(), q.len())));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    Ok(kl_div_unchecked(p, q))
}

pub(crate) fn kl_div_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(KL_EPS)).ln())
        .sum();
    kl.max(0.0)
}

/// Cosine similarity; zero when either vector has (near-)zero norm.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < NORM_EPS || nb < NORM_EPS {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::contract(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    Ok(-log_softmax(logits)[label])
}

/// `-Σ target · log softmax(logits)` for a soft label row.
pub fn soft_cross_entropy(logits: &[f64], target: &[f64]) -> Result<f64> {
    if logits.len() != target.len() {
        return Err(Error::dim(
            "soft_cross_entropy",
            format!("{} logits vs {} targets", logits.len(), target.len()),
        ));
    }
    let ls = log_softmax(logits);
    Ok(-target.iter().zip(&ls).map(|(t, l)| t * l).sum::<f64>())
}

/// Shannon entropy with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    #[test]
    fn softplus_values() {
        assert!((softplus(0.0) - LN_2).abs() < 1e-15);
        assert!(softplus(-1000.0).abs() < 1e-300);
        assert!((softplus(1000.0) - 1000.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_cases() {
        let u = softmax(&[3.0; 5]);
        assert!(u.iter().all(|&x| (x - 0.2).abs() < 1e-15));
        let p = softmax(&[2.0, 1.0]);
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        let big = softmax(&[1000.0, 0.0]);
        assert_eq!(big[0], 1.0);
        assert!(big[1] >= 0.0 && big[1] < 1e-300);
    }

    #[test]
    fn kl_cases() {
        assert_eq!(kl_div(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let v = kl_div(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((v - LN_2).abs() < 1e-12);
        assert!(kl_div(&[0.5, 0.6], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_sim(&[3.0, -1.0], &[3.0, -1.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_sim(&[1.0, 1.0], &[1.0, 0.0]) - 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[0.0, 1e-13]), 0.0);
    }

    #[test]
    fn cross_entropy_cases() {
        assert!(cross_entropy(&[50.0, 0.0, 0.0], 0).unwrap() < 1e-20);
        let c = 7;
        let v = cross_entropy(&vec![0.3; c], 2).unwrap();
        assert!((v - (c as f64).ln()).abs() < 1e-12);
        assert!(cross_entropy(&[0.0, 0.0], 2).is_err());
    }

    #[test]
    fn soft_label_minimizer_by_grid() {
        // Over soft labels t = (a, 1 - a) with fixed logits, CE(t) - H(t) is the
        // KL from t to softmax(logits); the grid minimum sits at t = softmax.
        let logits = [0.4, -0.9];
        let p = softmax(&logits);
        let mut best = (f64::INFINITY, 0.0);
        for i in 1..1000 {
            let a = i as f64 / 1000.0;
            let t = [a, 1.0 - a];
            let gap = soft_cross_entropy(&logits, &t).unwrap() - entropy(&t);
            if gap < best.0 {
                best = (gap, a);
            }
        }
        assert!((best.1 - p[0]).abs() <= 1e-3);
        let at_p = soft_cross_entropy(&logits, &p).unwrap() - entropy(&p);
        assert!(at_p.abs() < 1e-12);
    }

    fn dist(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0..1.0f64, n).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn kl_nonnegative((p, q) in (2..6usize).prop_flat_map(|n| (dist(n), dist(n)))) {
            prop_assert!(kl_div(&p, &q).unwrap() >= 0.0);
            prop_assert_eq!(kl_div(&p, &p).unwrap(), 0.0);
        }

        #[test]
        fn softmax_rows_are_distributions(row in proptest::collection::vec(-50.0..50.0f64, 1..10)) {
            let p = softmax(&row);
            prop_assert!(p.iter().all(|&x| x >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
