use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t_stat: f64,
    pub p_value: f64,
    pub df: usize,
    pub significant: bool,
}

/// Two-sided paired t-test on `a − b`.
///
/// Degenerate cases: identical pairs give `t = 0, p = 1`; constant nonzero
/// differences give `t = ±∞, p = 0`.
pub fn paired_ttest(a: &[f64], b: &[f64], alpha: f64) -> Result<TTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Data(format!(
            "paired t-test needs two equal-length samples of size ≥ 2, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a.len() as f64;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = a.len() - 1;
    let (t_stat, p_value) = if var == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean / (var / n).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df as f64)
            .map_err(|e| Error::Numeric(format!("Student t with {df} df: {e}")))?;
        (t, (2.0 * dist.sf(t.abs())).min(1.0))
    };
    Ok(TTest {
        t_stat,
        p_value,
        df,
        significant: p_value < alpha,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Lanczos log-gamma (g = 7, 9 terms).
    fn ln_gamma(x: f64) -> f64 {
        const C: [f64; 9] = [
            0.999_999_999_999_809_9,
            676.520_368_121_885_1,
            -1_259.139_216_722_402_8,
            771.323_428_777_653_1,
            -176.615_029_162_140_6,
            12.507_343_278_686_905,
            -0.138_571_095_265_720_12,
            9.984_369_578_019_572e-6,
            1.505_632_735_149_311_6e-7,
        ];
        let x = x - 1.0;
        let mut s = C[0];
        for (i, c) in C.iter().enumerate().skip(1) {
            s += c / (x + i as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + s.ln()
    }

    fn t_pdf(x: f64, nu: f64) -> f64 {
        let c = ln_gamma((nu + 1.0) / 2.0) - ln_gamma(nu / 2.0) - 0.5 * (nu * std::f64::consts::PI).ln();
        (c - (nu + 1.0) / 2.0 * (1.0 + x * x / nu).ln()).exp()
    }

    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
                + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
    }

    /// Two-sided p from adaptive Simpson integration of the t density.
    pub(crate) fn oracle_p(t: f64, nu: f64) -> f64 {
        let f = |x: f64| t_pdf(x, nu);
        let b = t.abs();
        let (fa, fb, fm) = (f(0.0), f(b), f(b / 2.0));
        let whole = b / 6.0 * (fa + 4.0 * fm + fb);
        let central = simpson(&f, 0.0, b, fa, fm, fb, whole, 1e-14, 50);
        (1.0 - 2.0 * central).max(0.0)
    }

    #[test]
    fn identical_vectors() {
        let a = [0.7, 0.6, 0.8, 0.75, 0.65];
        let r = paired_ttest(&a, &a, 0.005).unwrap();
        assert_eq!((r.t_stat, r.p_value, r.significant), (0.0, 1.0, false));
    }

    #[test]
    fn dominant_constant_shift() {
        let b = [0.6, 0.62, 0.58, 0.61, 0.59, 0.6, 0.63, 0.57, 0.6, 0.61];
        let a: Vec<f64> = b.iter().enumerate().map(|(i, x)| x + 0.1 + 1e-9 * i as f64).collect();
        let r = paired_ttest(&a, &b, 0.005).unwrap();
        assert!(r.p_value < 0.005 && r.significant);
        let exact: Vec<f64> = b.iter().map(|x| x + 0.25).collect();
        let r = paired_ttest(&exact, &b, 0.005).unwrap();
        assert!(r.p_value < 1e-6);
    }

    #[test]
    fn hand_vectors_match_integration() {
        let a = [0.81, 0.77, 0.69, 0.85, 0.73];
        let b = [0.70, 0.74, 0.71, 0.76, 0.64];
        let r = paired_ttest(&a, &b, 0.05).unwrap();
        // d = (0.11, 0.03, -0.02, 0.09, 0.09): mean 0.06, variance 0.0116 / 4
        let t = 0.06 / (0.0029f64 / 5.0).sqrt();
        assert!((r.t_stat - t).abs() < 1e-9);
        assert_eq!(r.df, 4);
        assert!((r.p_value - oracle_p(t, 4.0)).abs() <= 1e-9);
    }

    #[test]
    fn mismatched_lengths() {
        assert!(paired_ttest(&[1.0, 2.0], &[1.0], 0.05).is_err());
        assert!(paired_ttest(&[1.0], &[1.0], 0.05).is_err());
    }

    #[test]
    fn fifty_random_instances_match_integration() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..50 {
            let n = rng.gen_range(2..=12);
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.4..0.9)).collect();
            let b: Vec<f64> = a.iter().map(|x| x - rng.gen_range(-0.1..0.15)).collect();
            let r = paired_ttest(&a, &b, 0.005).unwrap();
            let oracle = oracle_p(r.t_stat, r.df as f64);
            assert!((r.p_value - oracle).abs() <= 1e-9, "t={} df={} {} vs {oracle}", r.t_stat, r.df, r.p_value);
        }
    }
}
