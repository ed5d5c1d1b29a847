//! Kolmogorov–Smirnov statistics and moment z-scores for comparing samples.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsOutcome {
    /// Supremum distance between the two distribution functions.
    pub statistic: f64,
    /// Effective sample size entering the asymptotic law.
    pub n_eff: f64,
    pub p_value: f64,
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Theta-function form, fast for small λ.
        let y = -PI * PI / (8.0 * lambda * lambda);
        let mut s = 0.0;
        for k in 1..=20 {
            let j = (2 * k - 1) as f64;
            s += (y * j * j).exp();
        }
        return (1.0 - (2.0 * PI).sqrt() / lambda * s).clamp(0.0, 1.0);
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let t = (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { t } else { -t };
        if t < 1e-17 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Asymptotic p-value with the usual finite-sample correction
/// `λ = (√n + 0.12 + 0.11/√n)·D`.
pub fn ks_p_value(d: f64, n_eff: f64) -> f64 {
    let r = n_eff.sqrt();
    kolmogorov_survival((r + 0.12 + 0.11 / r) * d)
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// One-sample test against a continuous CDF.
pub fn ks_one_sample<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> KsOutcome {
    let v = sorted(xs);
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    KsOutcome { statistic: d, n_eff: n, p_value: ks_p_value(d, n) }
}

/// Largest gap between two step functions given as sorted `(x, mass)` lists
/// with unit total mass each. Ties are consumed before comparing.
fn sup_gap(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0, 0.0);
    let mut d: f64 = 0.0;
    while i < a.len() || j < b.len() {
        let x = match (a.get(i), b.get(j)) {
            (Some(p), Some(q)) => p.0.min(q.0),
            (Some(p), None) => p.0,
            (None, Some(q)) => q.0,
            (None, None) => unreachable!(),
        };
        while i < a.len() && a[i].0 == x {
            fa += a[i].1;
            i += 1;
        }
        while j < b.len() && b[j].0 == x {
            fb += b[j].1;
            j += 1;
        }
        d = d.max((fa - fb).abs());
    }
    d
}

/// Two-sample test between empirical laws.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsOutcome {
    let wa = 1.0 / a.len() as f64;
    let wb = 1.0 / b.len() as f64;
    let pa: Vec<_> = sorted(a).into_iter().map(|x| (x, wa)).collect();
    let pb: Vec<_> = sorted(b).into_iter().map(|x| (x, wb)).collect();
    let d = sup_gap(&pa, &pb);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n_eff = na * nb / (na + nb);
    KsOutcome { statistic: d, n_eff, p_value: ks_p_value(d, n_eff) }
}

/// Two-sample test where the first sample carries weights; its size is
/// replaced by Kish's effective size `(Σw)²/Σw²`.
pub fn ks_two_sample_weighted(a: &[f64], weights: &[f64], b: &[f64]) -> KsOutcome {
    assert_eq!(a.len(), weights.len());
    let total: f64 = weights.iter().sum();
    let sq: f64 = weights.iter().map(|w| w * w).sum();
    let mut pa: Vec<_> = a.iter().zip(weights).map(|(&x, &w)| (x, w / total)).collect();
    pa.sort_by(|p, q| p.0.total_cmp(&q.0));
    let wb = 1.0 / b.len() as f64;
    let pb: Vec<_> = sorted(b).into_iter().map(|x| (x, wb)).collect();
    let d = sup_gap(&pa, &pb);
    let na = total * total / sq;
    let nb = b.len() as f64;
    let n_eff = na * nb / (na + nb);
    KsOutcome { statistic: d, n_eff, p_value: ks_p_value(d, n_eff) }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub std_error: f64,
}

impl MeanEstimate {
    pub fn from_values<I: IntoIterator<Item = f64>>(values: I) -> Self {
        // Welford, for stability on long heavy-tailed samples.
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for v in values {
            n += 1.0;
            let d = v - mean;
            mean += d / n;
            m2 += d * (v - mean);
        }
        let var = if n > 1.0 { m2 / (n - 1.0) } else { f64::NAN };
        MeanEstimate { mean, std_error: (var / n).sqrt() }
    }

    /// Sample mean of `x^p`.
    pub fn power(xs: &[f64], p: f64) -> Self {
        Self::from_values(xs.iter().map(|&x| x.powf(p)))
    }

    /// `(a − b)/√(se_a² + se_b²)` for independent estimates.
    pub fn z_against(&self, other: &MeanEstimate) -> f64 {
        (self.mean - other.mean) / self.std_error.hypot(other.std_error)
    }

    /// `(mean − value)/se` against an exact value.
    pub fn z_exact(&self, value: f64) -> f64 {
        (self.mean - value) / self.std_error
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kolmogorov_table_values() {
        // Classical critical values: 5% at 1.358, 1% at 1.628.
        assert!((kolmogorov_survival(1.3581) - 0.05).abs() < 2e-4);
        assert!((kolmogorov_survival(1.6276) - 0.01).abs() < 1e-4);
        // Both branches agree at the switch point.
        let a = kolmogorov_survival(1.18 - 1e-12);
        let b = kolmogorov_survival(1.18);
        assert!((a - b).abs() < 1e-12);
        assert_eq!(kolmogorov_survival(0.0), 1.0);
    }

    #[test]
    fn one_sample_on_a_grid() {
        // Midpoints of n equal cells sit exactly 1/(2n) from the uniform CDF.
        let n = 200;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let r = ks_one_sample(&xs, |x| x);
        assert!((r.statistic - 0.5 / n as f64).abs() < 1e-15);
        assert!(r.p_value > 0.999);
    }

    #[test]
    fn two_sample_shift_and_ties() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [3.0, 4.0, 5.0, 6.0];
        assert_eq!(ks_two_sample(&a, &b).statistic, 0.5);
        assert_eq!(ks_two_sample(&a, &a).statistic, 0.0);
        let c = [2.0, 2.0, 2.0];
        assert_eq!(ks_two_sample(&c, &[2.0]).statistic, 0.0);
    }

    #[test]
    fn weighted_matches_replicated() {
        // Integer weights behave like repeated observations.
        let a = [0.1, 0.5, 0.9];
        let w = [1.0, 2.0, 1.0];
        let rep = [0.1, 0.5, 0.5, 0.9];
        let b = [0.2, 0.3, 0.7];
        let x = ks_two_sample_weighted(&a, &w, &b).statistic;
        let y = ks_two_sample(&rep, &b).statistic;
        assert!((x - y).abs() < 1e-15);
    }

    #[test]
    fn mean_estimate_basic() {
        let m = MeanEstimate::from_values([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.mean, 2.5);
        assert!((m.std_error - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
    }
}
