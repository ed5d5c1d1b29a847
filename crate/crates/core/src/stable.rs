//! First passage of stable processes through the Lamperti-type identity
//! `T₁ = ∫₀^{e_q} e^{ξ_t} dt`, with `T₁ = S₁^{−α}`.
//!
//! Conventions: `E[e^{iλZ₁}] = exp(−|λ|^α(…))` with positivity parameter
//! `ρ = P(Z₁ > 0)`; at `α = 2` this makes `Z = √2·B`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::exponents::{JumpSpec, LaplaceExponent, LevyModel, Provenance};
use crate::ladders::{onesided_factors_from_exponent, OneSided};
use crate::simulation::{sample_functional, Scheme, SampleSet};
use crate::special::{gamma, ln_gamma_ratio, rgamma};

const TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StableParams {
    pub alpha: f64,
    pub rho: f64,
}

impl StableParams {
    pub fn new(alpha: f64, rho: f64) -> Result<Self> {
        let p = StableParams { alpha, rho };
        p.check()?;
        Ok(p)
    }

    /// `ρ ∈ [0, 1]` for `α ≤ 1`, `ρ ∈ [1 − 1/α, 1/α]` for `α ∈ (1, 2]`.
    pub fn check(&self) -> Result<()> {
        let StableParams { alpha, rho } = *self;
        if !(alpha > 0.0 && alpha <= 2.0) {
            return Err(Error::Inadmissible(format!("alpha = {alpha} outside (0, 2]")));
        }
        let (lo, hi) = self.rho_range();
        if !(rho >= lo - TOL && rho <= hi + TOL) {
            return Err(Error::Inadmissible(format!("rho = {rho} outside [{lo}, {hi}] for alpha = {alpha}")));
        }
        Ok(())
    }

    fn rho_range(&self) -> (f64, f64) {
        if self.alpha <= 1.0 {
            (0.0, 1.0)
        } else {
            (1.0 - 1.0 / self.alpha, 1.0 / self.alpha)
        }
    }

    /// No negative jumps: `α ∈ (1, 2]` and `ρ = 1 − 1/α`.
    pub fn spectrally_positive(&self) -> bool {
        self.alpha > 1.0 && (self.rho - (1.0 - 1.0 / self.alpha)).abs() <= TOL
    }

    /// No positive jumps: `α ∈ (1, 2]` and `ρ = 1/α`.
    pub fn spectrally_negative(&self) -> bool {
        self.alpha > 1.0 && (self.rho - 1.0 / self.alpha).abs() <= TOL
    }

    /// Condition under which `T₁` has a bounded non-increasing density.
    pub fn monotone_regime(&self) -> bool {
        self.alpha < 1.0 && self.rho > 0.0 && self.rho <= 1.0 / self.alpha - 1.0 + TOL
    }
}

/// `q = Γ(α)/(Γ(αρ)Γ(1−αρ))`.
pub fn lamperti_kill(p: StableParams) -> f64 {
    let ar = p.alpha * p.rho;
    gamma(p.alpha) * rgamma(ar) * rgamma(1.0 - ar)
}

/// The same constant through the reflection formula, `Γ(α)sin(παρ)/π`.
pub fn lamperti_kill_reflection(p: StableParams) -> f64 {
    gamma(p.alpha) * (PI * p.alpha * p.rho).sin() / PI
}

/// `Ψ^α(s) − q = −Γ(α−αs)Γ(αs+1)/(Γ(αρ−αs)Γ(αs+1−αρ))` on `(−1/α, 1)`,
/// returned as the exponent of the killed process, together with `q`.
pub fn lamperti_exponent(p: StableParams) -> Result<(LaplaceExponent, f64)> {
    p.check()?;
    let StableParams { alpha, rho } = p;
    if rho <= 0.0 {
        return Err(Error::Inadmissible("rho = 0: the level 1 is never reached".into()));
    }
    if alpha == 1.0 && rho >= 1.0 {
        return Err(Error::Inadmissible("alpha = 1 with rho = 1 is a pure drift".into()));
    }
    let q = lamperti_kill(p);
    let ar = alpha * rho;
    let f = move |s: f64| {
        let (l, sign) = ln_gamma_ratio(&[alpha - alpha * s, alpha * s + 1.0], &[ar - alpha * s, alpha * s + 1.0 - ar]);
        if sign == 0.0 {
            0.0
        } else {
            -sign * l.exp()
        }
    };
    let psi = LaplaceExponent::new(f, (-1.0 / alpha, 1.0), q, Provenance::Analytic(format!("lamperti-stable({alpha}, {rho})")));
    Ok((psi, q))
}

/// Positive root `γ_q` of the exponent when `Z` is spectrally positive
/// (the Lamperti process then has no positive jumps).
pub fn spectrally_positive_gamma(p: StableParams) -> Result<f64> {
    if !p.spectrally_positive() {
        return Err(Error::Inadmissible(format!("({}, {}) is not spectrally positive", p.alpha, p.rho)));
    }
    let (psi, _) = lamperti_exponent(p)?;
    let pair = onesided_factors_from_exponent(&psi, OneSided::NoPositiveJumps)?;
    Ok(pair.gamma_q.expect("one-sided factors carry gamma_q"))
}

/// Least-squares fit of `(d, c₊, c₋)` in
/// `Ψ(s) = ds + c₊J₊(s) + c₋J₋(s) − q` to the Gamma-ratio exponent, where
/// `J±` are the unit-constant Lamperti jump integrals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LampertiCalibration {
    pub drift: f64,
    pub c_plus: f64,
    pub c_minus: f64,
    /// Closed-form constants the fit is compared with.
    pub c_plus_closed: f64,
    pub c_minus_closed: f64,
    pub points: Vec<f64>,
    /// Largest absolute misfit on the grid.
    pub max_residual: f64,
}

pub const CALIBRATION_POINTS: usize = 20;

/// Closed-form `(c₊, c₋)` for `α < 1`.
fn lamperti_constants(p: StableParams) -> (f64, f64) {
    let StableParams { alpha, rho } = p;
    let g = gamma(1.0 + alpha);
    let cp = -g * rgamma(1.0 + alpha - alpha * rho) * rgamma(-alpha * (1.0 - rho));
    let cm = -g * rgamma(1.0 + alpha * rho) * rgamma(-alpha * rho);
    (cp, cm)
}

pub fn calibrate_lamperti(p: StableParams) -> Result<LampertiCalibration> {
    let (psi, q) = lamperti_exponent(p)?;
    let alpha = p.alpha;
    if alpha >= 1.0 {
        return Err(Error::Unsupported("Lamperti jump calibration needs alpha < 1".into()));
    }
    let unit = |cp: f64, cm: f64| JumpSpec::LampertiStable { alpha, c_plus: cp, c_minus: cm, scale: alpha };
    let (jp, jm) = (unit(1.0, 0.0), unit(0.0, 1.0));
    let lo = -1.0 / alpha;
    let points: Vec<f64> =
        (0..CALIBRATION_POINTS).map(|i| lo + (0.9 - lo) * (i as f64 + 0.5) / CALIBRATION_POINTS as f64).collect();
    let mut rows = vec![];
    for &s in &points {
        let a = jp.fv_integral(s).expect("finite variation");
        let b = jm.fv_integral(s).expect("finite variation");
        rows.push(([s, a, b], psi.eval(s)? + q));
    }
    let coef = least_squares_3(&rows);
    let max_residual = rows
        .iter()
        .map(|(x, y)| (x[0] * coef[0] + x[1] * coef[1] + x[2] * coef[2] - y).abs())
        .fold(0.0, f64::max);
    let (cp, cm) = lamperti_constants(p);
    Ok(LampertiCalibration {
        drift: coef[0],
        c_plus: coef[1],
        c_minus: coef[2],
        c_plus_closed: cp,
        c_minus_closed: cm,
        points,
        max_residual,
    })
}

/// Normal equations of a three-parameter linear fit, solved by Cramer's rule.
fn least_squares_3(rows: &[([f64; 3], f64)]) -> [f64; 3] {
    let mut m = [[0.0; 3]; 3];
    let mut v = [0.0; 3];
    for (x, y) in rows {
        for i in 0..3 {
            v[i] += x[i] * y;
            for j in 0..3 {
                m[i][j] += x[i] * x[j];
            }
        }
    }
    let det = |a: &[[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let d = det(&m);
    let mut out = [0.0; 3];
    for (k, o) in out.iter_mut().enumerate() {
        let mut a = m;
        for i in 0..3 {
            a[i][k] = v[i];
        }
        *o = det(&a) / d;
    }
    out
}

/// A simulatable triplet with exponent `Ψ^α − q`: the calibrated Lamperti
/// jump process for `α < 1`, and `4s² − 2s` (Brownian motion) at `α = 2`.
pub fn lamperti_model(p: StableParams) -> Result<LevyModel> {
    let (_, q) = lamperti_exponent(p)?;
    if p.alpha == 2.0 {
        return LevyModel::new(-2.0, 8.0, JumpSpec::None, q);
    }
    if p.alpha < 1.0 {
        let cal = calibrate_lamperti(p)?;
        let jumps = JumpSpec::LampertiStable {
            alpha: p.alpha,
            c_plus: cal.c_plus.max(0.0),
            c_minus: cal.c_minus.max(0.0),
            scale: p.alpha,
        };
        return LevyModel::from_effective_drift(cal.drift, 0.0, jumps, q);
    }
    Err(Error::Unsupported(format!(
        "no simulatable Lamperti triplet for alpha = {} in [1, 2)",
        p.alpha
    )))
}

/// One bin of a histogram density estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistBin {
    pub lo: f64,
    pub hi: f64,
    pub density: f64,
    pub std_error: f64,
}

/// Equal-width histogram on `[lo, hi]`, normalised by the full sample size.
pub fn histogram(xs: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<HistBin> {
    let w = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in xs {
        if x >= lo && x < hi {
            counts[(((x - lo) / w) as usize).min(bins - 1)] += 1;
        }
    }
    let n = xs.len() as f64;
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            let p = c as f64 / n;
            HistBin {
                lo: lo + w * i as f64,
                hi: lo + w * (i + 1) as f64,
                density: p / w,
                std_error: (p * (1.0 - p) / n).sqrt() / w,
            }
        })
        .collect()
}

/// Shape diagnostics on a histogram. Bin averages of a non-increasing
/// density are non-increasing, and those of a completely monotone density
/// form a log-convex sequence; violations count only when significant at
/// `z > 3`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeDiagnostic {
    pub variable: String,
    pub non_increasing: bool,
    pub log_convex: Option<bool>,
    /// Largest z-score of an increase between neighbouring bins.
    pub worst_increase_z: f64,
    /// Largest z-score of a concave second difference of log densities.
    pub worst_concavity_z: Option<f64>,
    pub pass: bool,
}

pub const SHAPE_Z: f64 = 3.0;

pub fn shape_diagnostic(variable: &str, bins: &[HistBin], check_log_convex: bool) -> ShapeDiagnostic {
    let mut worst_inc = f64::NEG_INFINITY;
    for w in bins.windows(2) {
        let z = (w[1].density - w[0].density) / w[0].std_error.hypot(w[1].std_error);
        worst_inc = worst_inc.max(z);
    }
    let non_increasing = worst_inc < SHAPE_Z;
    let (log_convex, worst_conc) = if check_log_convex {
        let mut worst = f64::NEG_INFINITY;
        for w in bins.windows(3) {
            let r: Vec<f64> = w.iter().map(|b| b.std_error / b.density).collect();
            let second = w[0].density.ln() + w[2].density.ln() - 2.0 * w[1].density.ln();
            let se = (r[0] * r[0] + r[2] * r[2] + 4.0 * r[1] * r[1]).sqrt();
            worst = worst.max(-second / se);
        }
        (Some(worst < SHAPE_Z), Some(worst))
    } else {
        (None, None)
    };
    ShapeDiagnostic {
        variable: variable.into(),
        non_increasing,
        log_convex,
        worst_increase_z: worst_inc,
        worst_concavity_z: worst_conc,
        pass: non_increasing && log_convex.unwrap_or(true),
    }
}

/// MC density of `S₁²/2 = B-supremum²` against `e^{−x/2}/√(2πx)`, both as
/// averages over `[x − h, x + h]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointCheck {
    pub x: f64,
    pub half_width: f64,
    pub estimate: f64,
    pub std_error: f64,
    pub exact: f64,
    /// Point value of the exact density at `x`.
    pub exact_point: f64,
    pub z: f64,
}

pub const BROWNIAN_POINTS: [f64; 3] = [0.5, 1.0, 2.0];
pub const BROWNIAN_HALF_WIDTH: f64 = 0.05;

pub fn brownian_supremum_density(x: f64) -> f64 {
    (-x / 2.0).exp() / (2.0 * PI * x).sqrt()
}

fn chi2_1_cdf(x: f64) -> f64 {
    statrs::function::erf::erf((x / 2.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassageReport {
    pub params: StableParams,
    pub q: f64,
    pub n: usize,
    pub seed: u64,
    pub scheme: Scheme,
    pub model_hash: String,
    /// Histogram of the variable the diagnostic is about.
    pub histogram: Vec<HistBin>,
    pub diagnostic: Option<ShapeDiagnostic>,
    pub brownian: Vec<PointCheck>,
    pub calibration: Option<LampertiCalibration>,
}

pub const HISTOGRAM_BINS: usize = 20;


/// Monte Carlo law of `T₁` (and of `S₁^α = 1/T₁`) with the shape
/// diagnostics that apply to `p`.
pub fn passage_time_law(p: StableParams, n: usize, seed: u64) -> Result<(PassageReport, SampleSet)> {
    let (_, q) = lamperti_exponent(p)?;
    let model = lamperti_model(p)?;
    let t1 = sample_functional(&model, n, Scheme::default(), seed)?;
    let calibration = if p.alpha < 1.0 { Some(calibrate_lamperti(p)?) } else { None };

    let mut sorted = t1.draws.clone();
    sorted.sort_by(f64::total_cmp);
    let quantile = |v: &[f64], f: f64| v[((v.len() - 1) as f64 * f) as usize];

    let (histogram, diagnostic) = if p.spectrally_positive() {
        let s: Vec<f64> = t1.draws.iter().map(|t| 1.0 / t).collect();
        let mut ss = s.clone();
        ss.sort_by(f64::total_cmp);
        let h = histogram(&s, 0.0, quantile(&ss, 0.9), HISTOGRAM_BINS);
        let d = shape_diagnostic("S1^alpha", &h, true);
        (h, Some(d))
    } else {
        let h = histogram(&t1.draws, 0.0, quantile(&sorted, 0.5), HISTOGRAM_BINS);
        let d = p.monotone_regime().then(|| shape_diagnostic("T1", &h, false));
        (h, d)
    };

    let brownian = if p.alpha == 2.0 {
        let y: Vec<f64> = t1.draws.iter().map(|t| 0.5 / t).collect();
        let nf = n as f64;
        BROWNIAN_POINTS
            .iter()
            .map(|&x| {
                let hw = BROWNIAN_HALF_WIDTH;
                let hits = y.iter().filter(|&&v| v >= x - hw && v < x + hw).count() as f64;
                let pr = hits / nf;
                let estimate = pr / (2.0 * hw);
                let std_error = (pr * (1.0 - pr) / nf).sqrt() / (2.0 * hw);
                let exact = (chi2_1_cdf(x + hw) - chi2_1_cdf(x - hw)) / (2.0 * hw);
                PointCheck {
                    x,
                    half_width: hw,
                    estimate,
                    std_error,
                    exact,
                    exact_point: brownian_supremum_density(x),
                    z: (estimate - exact) / std_error,
                }
            })
            .collect()
    } else {
        vec![]
    };

    Ok((
        PassageReport {
            params: p,
            q,
            n,
            seed,
            scheme: t1.scheme,
            model_hash: t1.model_hash.clone(),
            histogram,
            diagnostic,
            brownian,
            calibration,
        },
        t1,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distribution::mellin_recursion_samples;

    #[test]
    fn kill_rate_examples() {
        let p = StableParams::new(0.5, 0.5).unwrap();
        let q = lamperti_kill(p);
        assert!((q - 1.0 / (2.0 * PI).sqrt()).abs() < 1e-12 * q);
        for &(a, r) in &[(0.3, 0.9), (1.5, 0.5), (1.8, 0.45), (0.9, 0.1)] {
            let p = StableParams::new(a, r).unwrap();
            let (x, y) = (lamperti_kill(p), lamperti_kill_reflection(p));
            assert!((x - y).abs() < 1e-12 * y, "({a},{r}): {x} vs {y}");
        }
    }

    #[test]
    fn admissibility() {
        assert!(StableParams::new(1.5, 0.2).is_err());
        assert!(StableParams::new(1.5, 0.7).is_err());
        assert!(StableParams::new(2.5, 0.5).is_err());
        assert!(StableParams::new(0.5, 1.0).is_ok());
        assert!(StableParams::new(2.0, 0.5).unwrap().spectrally_positive());
        assert!(StableParams::new(1.5, 1.0 / 3.0).unwrap().spectrally_positive());
        assert!(StableParams::new(1.5, 2.0 / 3.0).unwrap().spectrally_negative());
        assert!(StableParams::new(0.5, 0.5).unwrap().monotone_regime());
        assert!(!StableParams::new(0.6, 0.8).unwrap().monotone_regime());
        assert!(matches!(lamperti_exponent(StableParams { alpha: 1.2, rho: 0.1 }), Err(Error::Inadmissible(_))));
    }

    #[test]
    fn exponent_at_zero_is_minus_q() {
        for &(a, r) in &[(0.5, 0.5), (0.7, 0.2), (1.5, 0.5), (2.0, 0.5)] {
            let (psi, q) = lamperti_exponent(StableParams::new(a, r).unwrap()).unwrap();
            // Through the Gamma ratio, not the s = 0 shortcut.
            let v = psi.eval(1e-14).unwrap();
            assert!((v + q).abs() < 1e-12, "({a},{r}): {v} vs {}", -q);
        }
    }

    #[test]
    fn spectrally_positive_reduction() {
        // ρ = 1 − 1/α: Ψ^α(s) − q = Γ(αs+1)/Γ(αs+1−α).
        let a = 1.5;
        let (psi, _) = lamperti_exponent(StableParams::new(a, 1.0 - 1.0 / a).unwrap()).unwrap();
        for &s in &[-0.5, 0.1, 0.6, 0.9] {
            let expect = gamma(a * s + 1.0) * rgamma(a * s + 1.0 - a);
            assert!((psi.eval(s).unwrap() - expect).abs() < 1e-12 * (1.0 + expect.abs()), "s={s}");
        }
        for &a in &[1.2, 1.5, 2.0] {
            let g = spectrally_positive_gamma(StableParams::new(a, 1.0 - 1.0 / a).unwrap()).unwrap();
            assert!((g - (1.0 - 1.0 / a)).abs() < 1e-10, "alpha={a}: {g}");
        }
    }

    #[test]
    fn brownian_case_exponent() {
        let (psi, q) = lamperti_exponent(StableParams::new(2.0, 0.5).unwrap()).unwrap();
        assert_eq!(q, 0.0);
        let m = lamperti_model(StableParams::new(2.0, 0.5).unwrap()).unwrap();
        for &s in &[-0.4, 0.3, 0.8] {
            assert!((psi.eval(s).unwrap() - m.eval(s).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn calibration_recovers_closed_form() {
        for &(a, r) in &[(0.5, 0.5), (0.3, 0.8), (0.7, 0.4)] {
            let c = calibrate_lamperti(StableParams::new(a, r).unwrap()).unwrap();
            assert_eq!(c.points.len(), CALIBRATION_POINTS);
            assert!(c.max_residual < 1e-9, "{c:?}");
            assert!(c.drift.abs() < 1e-8);
            assert!((c.c_plus - c.c_plus_closed).abs() < 1e-8 * c.c_plus_closed.max(1.0));
            assert!((c.c_minus - c.c_minus_closed).abs() < 1e-8 * c.c_minus_closed.max(1.0));
        }
    }

    /// First passage above 1 of the symmetric stable process with jump
    /// density `c|x|^{−1−α}`, built from its jumps larger than `eps` (the
    /// dropped part is symmetric with variance `O(eps^{2−α})` per unit time).
    /// Passage times are censored at `cap`.
    fn direct_passage(alpha: f64, c: f64, eps: f64, cap: f64, n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let rate = 2.0 * c * eps.powf(-alpha) / alpha;
        let mut rng = crate::simulation::replica_rng(seed, 0);
        (0..n)
            .map(|_| {
                let (mut t, mut z) = (0.0, 0.0);
                loop {
                    t += rng.sample::<f64, _>(rand_distr::Exp1) / rate;
                    if t >= cap {
                        return cap;
                    }
                    let size = eps * (1.0 - rng.random::<f64>()).powf(-1.0 / alpha);
                    z += if rng.random::<bool>() { size } else { -size };
                    if z > 1.0 {
                        return t;
                    }
                }
            })
            .collect()
    }

    #[test]
    fn passage_times_match_direct_simulation() {
        let p = StableParams::new(0.5, 0.5).unwrap();
        // Symmetric case: the jump density constant is Γ(1+α)sin(πα/2)/π.
        let c = gamma(1.5) * (PI / 4.0).sin() / PI;
        let cap = 1e3;
        let direct = direct_passage(0.5, c, 1e-4, cap, 20_000, 11);
        let (_, t1) = passage_time_law(p, 20_000, 12).unwrap();
        let lamperti: Vec<f64> = t1.draws.iter().map(|&t| t.min(cap)).collect();
        let ks = crate::stats::ks_two_sample(&lamperti, &direct);
        assert!(ks.p_value > 0.01, "{ks:?}");
    }

    #[test]
    fn recursion_where_moments_are_finite() {
        // E[T₁^z] is finite only for z < ρ and T₁ has positive density at 0,
        // so with ρ = ½ the recursion has no order with finite variance on
        // both sides. At z = 0.3 the bias of the heavy side is still small.
        let p = StableParams::new(0.5, 0.5).unwrap();
        let (psi, _) = lamperti_exponent(p).unwrap();
        let (_, t1) = passage_time_law(p, 50_000, 3).unwrap();
        let r = mellin_recursion_samples(&t1.draws, &psi, &[0.3]);
        assert!(r[0].z_score().abs() < 3.0, "{:?}", r[0]);
    }

    #[test]
    fn monotone_diagnostic_half_half() {
        let (rep, _) = passage_time_law(StableParams::new(0.5, 0.5).unwrap(), 50_000, 1).unwrap();
        let d = rep.diagnostic.unwrap();
        assert!(d.pass, "{d:?}");
        assert!(rep.brownian.is_empty());
    }

    #[test]
    fn shape_diagnostic_flags_increase() {
        let mk = |d: &[f64]| -> Vec<HistBin> {
            d.iter().enumerate().map(|(i, &v)| HistBin { lo: i as f64, hi: i as f64 + 1.0, density: v, std_error: 0.01 }).collect()
        };
        assert!(shape_diagnostic("x", &mk(&[1.0, 0.5, 0.25, 0.125]), true).pass);
        let d = shape_diagnostic("x", &mk(&[1.0, 0.9, 0.6, 0.1]), true);
        assert!(d.non_increasing && d.log_convex == Some(false));
        assert!(!shape_diagnostic("x", &mk(&[0.5, 0.6]), false).pass);
    }

    #[test]
    fn unsupported_index() {
        assert!(matches!(lamperti_model(StableParams::new(1.5, 0.5).unwrap()), Err(Error::Unsupported(_))));
    }
}
