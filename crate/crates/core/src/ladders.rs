//! Wiener–Hopf ladder factors `φ_{q±}` and their algebra.
//!
//! Sign conventions: `Ψ_q(s) = −φ_{q+}(s)·φ_{q−}(s)` with
//!
//! * `φ_{q+}(s) = −q₊ + δ₊s + ∫(e^{sy} − 1) μ₊(dy)` (ascending),
//! * `φ_{q−}(s) = −q₋ − δ₋s − ∫(1 − e^{−sy}) μ₋(dy)` (descending),
//!
//! both measures living on `(0, ∞)`. `φ_{q−}` is the exponent of `−H₋` for
//! a killed subordinator `H₋`, and `ψ^{q+}(s) = sφ_{q+}(s)` is the exponent of
//! an unkilled spectrally positive process.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exponents::{
    ExpComponent, JumpDensity, JumpSpec, LaplaceExponent, LevyModel, Provenance, STRIP_MARGIN,
};
use crate::quadrature::{integrate_to_infinity, QuadOptions};
use crate::roots::{bracket_by_doubling, solve_bracketed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LadderSide {
    Ascending,
    Descending,
}

#[derive(Clone)]
enum Form {
    /// `(δ, μ)` with `μ` on `(0, ∞)`.
    Triplet { drift: f64, measure: JumpSpec },
    Closure(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

/// A one-sided Wiener–Hopf factor.
#[derive(Clone)]
pub struct LadderExponent {
    side: LadderSide,
    kill: f64,
    form: Form,
    strip: (f64, f64),
    p_flag: bool,
}

impl fmt::Debug for LadderExponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("LadderExponent");
        d.field("side", &self.side).field("kill", &self.kill);
        match &self.form {
            Form::Triplet { drift, measure } => d.field("drift", drift).field("measure", measure),
            Form::Closure(_) => d.field("form", &"closure"),
        };
        d.field("strip", &self.strip).field("p_flag", &self.p_flag).finish()
    }
}

/// JSON form of a triplet factor; same field names as [`LevyModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderDoc {
    pub role: LadderSide,
    pub drift: f64,
    pub kill: f64,
    pub jumps: JumpSpec,
}

impl LadderExponent {
    /// Factor from `(q, δ, μ)`; `μ` must be a finite-variation measure on `(0, ∞)`.
    pub fn from_triplet(side: LadderSide, kill: f64, drift: f64, measure: JumpSpec) -> Result<Self> {
        if !(kill.is_finite() && kill >= 0.0 && drift.is_finite() && drift >= 0.0) {
            return Err(Error::InvalidModel(format!("ladder needs kill, drift >= 0 (got {kill}, {drift})")));
        }
        // Validation of family parameters piggybacks on LevyModel.
        LevyModel::new(0.0, 0.0, measure.clone(), 0.0)?;
        if measure.has_negative_jumps() || !measure.is_finite_variation() {
            return Err(Error::InvalidModel("ladder measure must be finite-variation on (0, inf)".into()));
        }
        let hi = measure.strip().1;
        let strip = match side {
            LadderSide::Ascending => (f64::NEG_INFINITY, hi),
            LadderSide::Descending => (-hi, f64::INFINITY),
        };
        let p_flag = measure.density_nonincreasing_on_positive_half_line();
        Ok(LadderExponent { side, kill, form: Form::Triplet { drift, measure }, strip, p_flag })
    }

    /// Factor given only as a function; `p_flag` is the caller's certificate.
    pub fn from_fn<F>(side: LadderSide, kill: f64, strip: (f64, f64), p_flag: bool, f: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        LadderExponent { side, kill, form: Form::Closure(Arc::new(f)), strip, p_flag }
    }

    pub fn from_doc(doc: &LadderDoc) -> Result<Self> {
        Self::from_triplet(doc.role, doc.kill, doc.drift, doc.jumps.clone())
    }

    pub fn to_doc(&self) -> Option<LadderDoc> {
        match &self.form {
            Form::Triplet { drift, measure } => {
                Some(LadderDoc { role: self.side, drift: *drift, kill: self.kill, jumps: measure.clone() })
            }
            Form::Closure(_) => None,
        }
    }

    pub fn side(&self) -> LadderSide {
        self.side
    }

    pub fn kill(&self) -> f64 {
        self.kill
    }

    pub fn strip(&self) -> (f64, f64) {
        self.strip
    }

    pub fn p_flag(&self) -> bool {
        self.p_flag
    }

    pub fn drift(&self) -> Option<f64> {
        match &self.form {
            Form::Triplet { drift, .. } => Some(*drift),
            Form::Closure(_) => None,
        }
    }

    pub fn measure(&self) -> Option<&JumpSpec> {
        match &self.form {
            Form::Triplet { measure, .. } => Some(measure),
            Form::Closure(_) => None,
        }
    }

    /// `μ̄(y) = μ((y, ∞))`.
    pub fn tail(&self, y: f64) -> Option<f64> {
        self.measure().map(|m| m.tail_pos(y))
    }

    fn raw(&self, s: f64) -> f64 {
        match &self.form {
            Form::Triplet { drift, measure } => {
                let j = |t: f64| measure.fv_integral(t).unwrap_or(f64::NAN);
                match self.side {
                    LadderSide::Ascending => -self.kill + drift * s + j(s),
                    LadderSide::Descending => -self.kill - drift * s + j(-s),
                }
            }
            Form::Closure(f) => f(s),
        }
    }

    pub fn eval(&self, s: f64) -> Result<f64> {
        let (lo, hi) = self.strip;
        if s != 0.0 && (s.is_nan() || s <= lo + STRIP_MARGIN || s >= hi - STRIP_MARGIN) {
            return Err(Error::StripViolation { s, lo, hi });
        }
        if s == 0.0 {
            return Ok(-self.kill);
        }
        Ok(self.raw(s))
    }

    /// Model of the process whose exponent is this descending factor:
    /// `−H₋` killed at `q₋`.
    pub fn descending_model(&self) -> Result<LevyModel> {
        let (drift, measure) = self.triplet_parts(LadderSide::Descending)?;
        LevyModel::from_effective_drift(-drift, 0.0, mirror(measure)?, self.kill)
    }

    /// Model of the unkilled spectrally positive process with exponent
    /// `ψ^{q+}(s) = sφ_{q+}(s)`. Each component `(λ, η)` of `μ₊` becomes
    /// compound Poisson jumps at rate `λη` with `Exp(η)` sizes.
    pub fn psi_plus_model(&self) -> Result<LevyModel> {
        let (drift, measure) = self.triplet_parts(LadderSide::Ascending)?;
        let comps = exp_components(measure)
            .ok_or_else(|| Error::Unsupported("psi^{q+} model needs an exponential-mixture measure".into()))?;
        let total: f64 = comps.iter().map(|c| c.rate).sum();
        let jumps = if comps.is_empty() {
            JumpSpec::None
        } else {
            JumpSpec::HyperExponential {
                positive: comps.iter().map(|c| ExpComponent { rate: c.rate * c.eta, eta: c.eta }).collect(),
                negative: vec![],
            }
        };
        LevyModel::from_effective_drift(-self.kill - total, 2.0 * drift, jumps, 0.0)
    }

    fn triplet_parts(&self, want: LadderSide) -> Result<(f64, &JumpSpec)> {
        if self.side != want {
            return Err(Error::InvalidModel(format!("expected a {want:?} factor")));
        }
        match &self.form {
            Form::Triplet { drift, measure } => Ok((*drift, measure)),
            Form::Closure(_) => Err(Error::Unsupported("factor has no triplet form".into())),
        }
    }
}

/// Reflect a measure on `(0, ∞)` to `(−∞, 0)`.
fn mirror(m: &JumpSpec) -> Result<JumpSpec> {
    Ok(match m {
        JumpSpec::None => JumpSpec::None,
        JumpSpec::TiltedStableTail { c, alpha, gamma } => {
            JumpSpec::SpectrallyNegativeTemperedStable { c: *c, alpha: *alpha, gamma: *gamma }
        }
        JumpSpec::CompoundPoisson { rate, density: JumpDensity::Uniform { lo, hi } } => {
            JumpSpec::CompoundPoisson { rate: *rate, density: JumpDensity::Uniform { lo: -hi, hi: -lo } }
        }
        other => {
            let comps = exp_components(other)
                .ok_or_else(|| Error::Unsupported(format!("cannot mirror {other:?}")))?;
            JumpSpec::HyperExponential { positive: vec![], negative: comps }
        }
    })
}

/// Positive exponential components of an exponential-mixture measure.
fn exp_components(m: &JumpSpec) -> Option<Vec<ExpComponent>> {
    match m {
        JumpSpec::None => Some(vec![]),
        JumpSpec::CompoundPoisson { rate, density: JumpDensity::Exponential { eta } } => {
            Some(vec![ExpComponent { rate: *rate, eta: *eta }])
        }
        JumpSpec::HyperExponential { positive, negative } if negative.is_empty() => Some(positive.clone()),
        JumpSpec::ExponentialTwoSided { lambda_plus, eta_plus, lambda_minus, .. } if *lambda_minus == 0.0 => {
            Some(vec![ExpComponent { rate: *lambda_plus, eta: *eta_plus }])
        }
        _ => None,
    }
}

/// `Ψ_q = −φ_{q+}φ_{q−}` with kill rate `q₊q₋`.
pub fn compose_factors(plus: &LadderExponent, minus: &LadderExponent) -> Result<LaplaceExponent> {
    if plus.side != LadderSide::Ascending || minus.side != LadderSide::Descending {
        return Err(Error::InvalidModel("compose_factors takes (ascending, descending)".into()));
    }
    if !plus.p_flag || !minus.p_flag {
        return Err(Error::NotPhilanthropic(format!(
            "ascending flag {}, descending flag {}",
            plus.p_flag, minus.p_flag
        )));
    }
    if plus.kill <= 0.0 {
        return Err(Error::ParameterViolation("ascending factor must be killed (q+ > 0)".into()));
    }
    let (p, m) = (plus.clone(), minus.clone());
    let strip = (plus.strip.0.max(minus.strip.0), plus.strip.1.min(minus.strip.1));
    Ok(LaplaceExponent::new(
        move |s| -p.raw(s) * m.raw(s),
        (strip.0.min(0.0), strip.1.max(0.0)),
        plus.kill * minus.kill,
        Provenance::Factors,
    ))
}

/// A factor pair together with how it was normalized.
#[derive(Debug, Clone)]
pub struct FactorPair {
    pub plus: LadderExponent,
    pub minus: LadderExponent,
    /// Positive root defining spectrally one-sided factors.
    pub gamma_q: Option<f64>,
    /// Positive zeros `ρ_i` of `Ψ_q` and magnitudes `r_j` of its negative zeros.
    pub positive_roots: Vec<f64>,
    pub negative_roots: Vec<f64>,
    pub normalization: String,
}

impl FactorPair {
    pub fn compose(&self) -> Result<LaplaceExponent> {
        compose_factors(&self.plus, &self.minus)
    }
}

/// Largest relative deviation between `psi` and the composed factors on a
/// grid spanning the common strip (clipped to `[-clip, clip]`).
pub fn factor_consistency(psi: &LaplaceExponent, pair: &FactorPair, clip: f64, n: usize) -> Result<f64> {
    let comp = pair.compose()?;
    let lo = psi.strip().0.max(comp.strip().0).max(-clip);
    let hi = psi.strip().1.min(comp.strip().1).min(clip);
    let pad = 1e-3 * (hi - lo);
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let s = lo + pad + (hi - lo - 2.0 * pad) * i as f64 / (n - 1) as f64;
        let a = psi.eval(s)?;
        let b = comp.eval(s)?;
        worst = worst.max((a - b).abs() / a.abs().max(1e-12));
    }
    Ok(worst)
}

fn merge_components(mut comps: Vec<ExpComponent>) -> Vec<ExpComponent> {
    comps.retain(|c| c.rate > 0.0);
    comps.sort_by(|a, b| a.eta.total_cmp(&b.eta));
    let mut out: Vec<ExpComponent> = vec![];
    for c in comps {
        match out.last_mut() {
            Some(last) if last.eta == c.eta => last.rate += c.rate,
            _ => out.push(c),
        }
    }
    out
}

fn split_exponential(jumps: &JumpSpec) -> Option<(Vec<ExpComponent>, Vec<ExpComponent>)> {
    let (p, n) = match jumps {
        JumpSpec::None => (vec![], vec![]),
        JumpSpec::CompoundPoisson { rate, density: JumpDensity::Exponential { eta } } => {
            (vec![ExpComponent { rate: *rate, eta: *eta }], vec![])
        }
        JumpSpec::CompoundPoisson { rate, density: JumpDensity::NegativeExponential { eta } } => {
            (vec![], vec![ExpComponent { rate: *rate, eta: *eta }])
        }
        JumpSpec::ExponentialTwoSided { lambda_plus, eta_plus, lambda_minus, eta_minus } => (
            vec![ExpComponent { rate: *lambda_plus, eta: *eta_plus }],
            vec![ExpComponent { rate: *lambda_minus, eta: *eta_minus }],
        ),
        JumpSpec::HyperExponential { positive, negative } => (positive.clone(), negative.clone()),
        _ => return None,
    };
    Some((merge_components(p), merge_components(n)))
}

/// Wiener–Hopf factors of a model with (hyper)exponential jumps on both
/// sides, with the default split `q₊ = q₋ = √q`.
pub fn rational_factors(model: &LevyModel) -> Result<FactorPair> {
    rational_factors_with(model, model.kill.sqrt())
}

/// As [`rational_factors`] with an explicit `q₊` (`q₋ = q/q₊`).
///
/// `Ψ_q` is rational; its zeros interlace with the poles `η_i` on each side.
/// Zeros are located on the numerator polynomial, then
/// `φ_{q+}(s) = −q₊∏(1 − s/ρ_i)/∏(1 − s/η_i)` and
/// `φ_{q−}(s) = −q₋∏(1 + s/r_j)/∏(1 + s/η_j)`; drifts and jump rates follow
/// from the behaviour at infinity and the residues at the poles.
pub fn rational_factors_with(model: &LevyModel, q_plus: f64) -> Result<FactorPair> {
    let (pos, neg) = split_exponential(&model.jumps)
        .ok_or_else(|| Error::Unsupported("rational factors need exponential-mixture jumps".into()))?;
    let q = model.kill;
    if q <= 0.0 {
        return Err(Error::ParameterViolation("rational factors need q > 0".into()));
    }
    if !(q_plus > 0.0 && q_plus.is_finite()) {
        return Err(Error::ParameterViolation(format!("q+ must be positive, got {q_plus}")));
    }
    let d = model.effective_drift().expect("exponential jumps have finite variation");
    let s2 = model.gaussian;
    let pe: Vec<f64> = pos.iter().map(|c| c.eta).collect();
    let ne: Vec<f64> = neg.iter().map(|c| c.eta).collect();

    // Numerator of Ψ_q over ∏(η_i − s)∏(η_j + s); continuous through the poles.
    let numer = |s: f64| -> f64 {
        let a: f64 = pe.iter().map(|e| e - s).product();
        let b: f64 = ne.iter().map(|e| e + s).product();
        let mut v = (d * s + 0.5 * s2 * s * s - q) * a * b;
        for (k, c) in pos.iter().enumerate() {
            let ak: f64 = pe.iter().enumerate().filter(|&(i, _)| i != k).map(|(_, e)| e - s).product();
            v += c.rate * s * ak * b;
        }
        for (k, c) in neg.iter().enumerate() {
            let bk: f64 = ne.iter().enumerate().filter(|&(i, _)| i != k).map(|(_, e)| e + s).product();
            v -= c.rate * s * a * bk;
        }
        v
    };

    let root_in = |lo: f64, hi: f64| -> Result<f64> { Ok(solve_bracketed(numer, lo, hi, 1e-14 * hi.abs().max(1.0))?) };
    let unbounded = |from: f64, dir: f64| -> Result<f64> {
        let g = |t: f64| numer(from + dir * t);
        let (a, b) = bracket_by_doubling(g, 0.0, 1.0, 1e12, 80)?;
        Ok(from + dir * solve_bracketed(g, a, b, 1e-14 * (from.abs() + 1.0))?)
    };

    let mut rho = vec![];
    let mut edges = vec![0.0];
    edges.extend(pe.iter().copied());
    for w in edges.windows(2) {
        rho.push(root_in(w[0], w[1])?);
    }
    if s2 > 0.0 || d > 0.0 {
        rho.push(unbounded(*edges.last().unwrap(), 1.0)?);
    }
    let mut r = vec![];
    let mut edges = vec![0.0];
    edges.extend(ne.iter().copied());
    for w in edges.windows(2) {
        r.push(-root_in(-w[1], -w[0])?);
    }
    if s2 > 0.0 || d < 0.0 {
        r.push(-unbounded(-*edges.last().unwrap(), -1.0)?);
    }

    let q_minus = q / q_plus;
    let (delta_p, mu_p) = triplet_from_zeros(q_plus, &rho, &pe)?;
    let (delta_m, mu_m) = triplet_from_zeros(q_minus, &r, &ne)?;
    let measure = |c: Vec<ExpComponent>| {
        if c.is_empty() {
            JumpSpec::None
        } else {
            JumpSpec::HyperExponential { positive: c, negative: vec![] }
        }
    };
    let plus = LadderExponent::from_triplet(LadderSide::Ascending, q_plus, delta_p, measure(mu_p))?;
    let minus = LadderExponent::from_triplet(LadderSide::Descending, q_minus, delta_m, measure(mu_m))?;
    Ok(FactorPair {
        plus,
        minus,
        gamma_q: None,
        positive_roots: rho,
        negative_roots: r,
        normalization: format!("q_plus = {q_plus:e}, q_minus = q/q_plus = {q_minus:e}"),
    })
}

/// `(δ, μ)` of `−k∏(1 − s/z_i)/∏(1 − s/η_i)` written as
/// `−k + δs + Σλ_i s/(η_i − s)`; zeros `z` interlace with poles `η`.
fn triplet_from_zeros(k: f64, zeros: &[f64], poles: &[f64]) -> Result<(f64, Vec<ExpComponent>)> {
    let drift = if zeros.len() == poles.len() + 1 {
        k * poles.iter().product::<f64>() / zeros.iter().product::<f64>()
    } else {
        0.0
    };
    let mut comps = vec![];
    for (i, &e) in poles.iter().enumerate() {
        let num: f64 = zeros.iter().map(|z| 1.0 - e / z).product();
        let den: f64 = poles.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, p)| 1.0 - e / p).product();
        let lambda = -k * num / den;
        if lambda < 0.0 {
            return Err(Error::NotPhilanthropic(format!("negative jump rate {lambda} at eta = {e}")));
        }
        comps.push(ExpComponent { rate: lambda, eta: e });
    }
    Ok((drift, comps))
}

/// Which half-line carries no jumps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OneSided {
    /// No negative jumps: `γ_q` solves `Ψ_q(−s) = 0`, `φ_{q−}(s) = −(s + γ_q)`.
    NoNegativeJumps,
    /// No positive jumps: `γ_q` solves `Ψ_q(s) = 0`, `φ_{q+}(s) = s − γ_q`.
    NoPositiveJumps,
}

/// Root-based factors of a spectrally one-sided model. With no jumps at
/// all the spectrally negative convention is used.
pub fn spectrally_onesided_factors(model: &LevyModel) -> Result<FactorPair> {
    let case = if !model.jumps.has_positive_jumps() {
        OneSided::NoPositiveJumps
    } else if !model.jumps.has_negative_jumps() {
        OneSided::NoNegativeJumps
    } else {
        return Err(Error::InvalidModel("model has jumps of both signs".into()));
    };
    let mut pair = onesided_factors_from_exponent(&model.exponent(), case)?;
    // Without jumps the closure factor is linear; expose its triplet.
    if model.jumps == JumpSpec::None && model.gaussian > 0.0 {
        let g = pair.gamma_q.unwrap();
        let half = 0.5 * model.gaussian;
        let other = model.kill / (half * g);
        match case {
            OneSided::NoPositiveJumps => {
                pair.minus = LadderExponent::from_triplet(LadderSide::Descending, half * other, half, JumpSpec::None)?;
            }
            OneSided::NoNegativeJumps => {
                pair.plus = LadderExponent::from_triplet(LadderSide::Ascending, half * other, half, JumpSpec::None)?;
            }
        }
    }
    Ok(pair)
}

/// Root-based factors from an exponent alone.
pub fn onesided_factors_from_exponent(psi: &LaplaceExponent, case: OneSided) -> Result<FactorPair> {
    let q = psi.kill();
    let dir = match case {
        OneSided::NoPositiveJumps => 1.0,
        OneSided::NoNegativeJumps => -1.0,
    };
    let (lo, hi) = psi.strip();
    let cap = if dir > 0.0 { hi } else { -lo } - 2.0 * STRIP_MARGIN;
    let f = |t: f64| psi.eval(dir * t).unwrap_or(f64::NAN);
    let start = if q > 0.0 { 0.0 } else { 1e-8_f64.min(0.5 * cap) };
    if !(f(start) < 0.0) {
        return Err(Error::NoRoot(format!("exponent is not negative just right of 0 (q = {q})")));
    }
    let (a, b) = bracket_by_doubling(f, start, 1.0_f64.min(cap), cap, 60)?;
    let g = solve_bracketed(f, a, b, 1e-13)?;

    let psi_c = psi.clone();
    let derivative_at_root = {
        let h = 1e-6 * g.max(1e-3);
        (f(g + h) - f(g - h)) / (2.0 * h)
    };
    let ratio = move |s: f64| -> f64 {
        // Ψ_q(s)/(s − dir·γ), with the removable point filled by Ψ_q'(root).
        let x = s - dir * g;
        if x.abs() < 1e-9 * g.max(1.0) {
            dir * derivative_at_root
        } else {
            psi_c.eval(s).unwrap_or(f64::NAN) / x
        }
    };
    let strip = psi.strip();
    let (plus, minus) = match case {
        OneSided::NoPositiveJumps => (
            LadderExponent::from_triplet(LadderSide::Ascending, g, 1.0, JumpSpec::None)?,
            LadderExponent::from_fn(LadderSide::Descending, q / g, (strip.0, f64::INFINITY), true, move |s| -ratio(s)),
        ),
        OneSided::NoNegativeJumps => (
            LadderExponent::from_fn(LadderSide::Ascending, q / g, (f64::NEG_INFINITY, strip.1), true, ratio),
            LadderExponent::from_triplet(LadderSide::Descending, g, 1.0, JumpSpec::None)?,
        ),
    };
    Ok(FactorPair {
        plus,
        minus,
        gamma_q: Some(g),
        positive_roots: vec![],
        negative_roots: vec![],
        normalization: "unit drift on the jump-free side".into(),
    })
}

/// `s ↦ s/(s+β)·φ_{q−}(s+β)`, an unkilled descending factor.
pub fn tbeta_on_ladder(minus: &LadderExponent, beta: f64) -> Result<LadderExponent> {
    if minus.side != LadderSide::Descending {
        return Err(Error::InvalidModel("tbeta_on_ladder takes a descending factor".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::BadBeta { beta, hi: f64::INFINITY });
    }
    if let Form::Triplet { drift, measure } = &minus.form {
        if let Some(comps) = exp_components(measure) {
            let mut c: Vec<ExpComponent> = comps.iter().map(|c| ExpComponent { rate: c.rate, eta: c.eta + beta }).collect();
            if minus.kill > 0.0 {
                c.push(ExpComponent { rate: minus.kill, eta: beta });
            }
            let m = if c.is_empty() { JumpSpec::None } else { JumpSpec::HyperExponential { positive: c, negative: vec![] } };
            return LadderExponent::from_triplet(LadderSide::Descending, 0.0, *drift, m);
        }
    }
    let inner = minus.clone();
    let lo = (minus.strip.0 - beta).max(-beta);
    Ok(LadderExponent::from_fn(LadderSide::Descending, 0.0, (lo, f64::INFINITY), minus.p_flag, move |s| {
        s / (s + beta) * inner.raw(s + beta)
    }))
}

/// `s ↦ φ_{q+}(s+β)`.
pub fn shift_ascending(plus: &LadderExponent, beta: f64) -> Result<LadderExponent> {
    if plus.side != LadderSide::Ascending {
        return Err(Error::InvalidModel("shift_ascending takes an ascending factor".into()));
    }
    let hi = plus.strip.1;
    if !(beta > 0.0 && beta < hi) {
        return Err(Error::BadBeta { beta, hi });
    }
    let inner = plus.clone();
    Ok(LadderExponent::from_fn(
        LadderSide::Ascending,
        -plus.raw(beta),
        (plus.strip.0 - beta, hi - beta),
        plus.p_flag,
        move |s| inner.raw(s + beta),
    ))
}

/// Potential measure `𝒰^{(q)}_−` of the descending ladder height:
/// `∫e^{−sy}𝒰(dy) = −1/φ_{q−}(s)`, here an atom at 0 plus a mixture of
/// exponential densities.
#[derive(Debug, Clone)]
pub struct PotentialMeasure {
    pub atom: f64,
    /// `(c_j, r_j)` with density `Σ c_j e^{−r_j y}`.
    pub components: Vec<(f64, f64)>,
}

impl PotentialMeasure {
    /// Closed form for descending factors whose measure is an exponential
    /// mixture (including none).
    pub fn from_descending(minus: &LadderExponent) -> Result<Self> {
        let (drift, measure) = minus.triplet_parts(LadderSide::Descending)?;
        let comps = merge_components(
            exp_components(measure)
                .ok_or_else(|| Error::Unsupported("potential needs an exponential-mixture measure".into()))?,
        );
        let q = minus.kill;
        let dphi = |s: f64| -drift - comps.iter().map(|c| c.rate * c.eta / (c.eta + s).powi(2)).sum::<f64>();
        // Zeros −r of φ₋: one in each (−η_{k+1}, −η_k) and one in (−η₁, 0]
        // if q > 0, plus one beyond −η_max if δ > 0.
        let numer = |s: f64| {
            let all: f64 = comps.iter().map(|c| c.eta + s).product();
            let mut v = (-q - drift * s) * all;
            for (k, c) in comps.iter().enumerate() {
                let rest: f64 = comps.iter().enumerate().filter(|&(j, _)| j != k).map(|(_, e)| e.eta + s).product();
                v -= c.rate * s * rest;
            }
            v
        };
        let mut zeros = vec![];
        let mut edges = vec![0.0];
        edges.extend(comps.iter().map(|c| c.eta));
        for (i, w) in edges.windows(2).enumerate() {
            if i == 0 && q == 0.0 {
                zeros.push(0.0);
                continue;
            }
            zeros.push(-solve_bracketed(numer, -w[1], -w[0], 1e-15 * w[1].max(1.0))?);
        }
        if comps.is_empty() && q == 0.0 {
            zeros.push(0.0);
        }
        if drift > 0.0 {
            let from = *edges.last().unwrap();
            let g = |t: f64| numer(-from - t);
            let (a, b) = bracket_by_doubling(g, 0.0, 1.0, 1e12, 80)?;
            zeros.push(from + solve_bracketed(g, a, b, 1e-14 * (from + 1.0))?);
        }
        let components = zeros.iter().map(|&r| (-1.0 / dphi(-r), r)).collect();
        let atom = if drift > 0.0 { 0.0 } else { 1.0 / (q + comps.iter().map(|c| c.rate).sum::<f64>()) };
        Ok(PotentialMeasure { atom, components })
    }

    pub fn density(&self, y: f64) -> f64 {
        self.components.iter().map(|&(c, r)| c * (-r * y).exp()).sum()
    }

    /// `∫e^{−sy}𝒰(dy)`.
    pub fn laplace(&self, s: f64) -> f64 {
        self.atom + self.components.iter().map(|&(c, r)| c / (s + r)).sum::<f64>()
    }

    /// `𝒰([0, ∞))`.
    pub fn total_mass(&self) -> f64 {
        self.laplace(0.0)
    }
}

/// Largest `|μ̄₊(y) − ∫_0^∞ Π̄₊(r+y) 𝒰(dr)|` over the grid.
pub fn vigon_check<P, M>(pi_bar_plus: P, mu_bar_plus: M, potential: &PotentialMeasure, grid: &[f64]) -> Result<f64>
where
    P: Fn(f64) -> f64,
    M: Fn(f64) -> f64,
{
    let mut worst: f64 = 0.0;
    for &y in grid {
        let smooth = integrate_to_infinity(
            |r| {
                let t = pi_bar_plus(r + y);
                if t == 0.0 {
                    0.0
                } else {
                    t * potential.density(r)
                }
            },
            0.0,
            1.0,
            QuadOptions { rel_tol: 1e-9, abs_tol: 1e-300, ..QuadOptions::default() },
        )?;
        let rhs = potential.atom * pi_bar_plus(y) + smooth.value;
        worst = worst.max((mu_bar_plus(y) - rhs).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exponents::tbeta_transform;
    use proptest::prelude::*;

    fn fixture_a() -> LevyModel {
        let jumps = JumpSpec::ExponentialTwoSided { lambda_plus: 1.0, eta_plus: 4.0, lambda_minus: 1.0, eta_minus: 2.0 };
        LevyModel::from_effective_drift(-1.0, 0.0, jumps, 1.0).unwrap()
    }

    fn lin(side: LadderSide, kill: f64, drift: f64) -> LadderExponent {
        LadderExponent::from_triplet(side, kill, drift, JumpSpec::None).unwrap()
    }

    #[test]
    fn compose_examples() {
        let p = lin(LadderSide::Ascending, 1.0, 1.0);
        let m = lin(LadderSide::Descending, 1.0, 0.0);
        let psi = compose_factors(&p, &m).unwrap();
        assert_eq!(psi.kill(), 1.0);
        assert_eq!(psi.eval(0.0).unwrap(), -1.0);
        assert!((psi.eval(2.5).unwrap() - 1.5).abs() < 1e-15);
        let m = lin(LadderSide::Descending, 1.0, 1.0);
        let psi = compose_factors(&p, &m).unwrap();
        assert!((psi.eval(0.7).unwrap() - (0.49 - 1.0)).abs() < 1e-15);
        let bad = LadderExponent::from_fn(LadderSide::Descending, 1.0, (-1.0, f64::INFINITY), false, |s| -(s + 1.0));
        assert!(matches!(compose_factors(&p, &bad), Err(Error::NotPhilanthropic(_))));
        assert!(matches!(
            compose_factors(&m, &p),
            Err(Error::InvalidModel(_))
        ));
    }

    #[test]
    fn rational_factors_reproduce_fixture() {
        let m = fixture_a();
        let pair = rational_factors(&m).unwrap();
        assert_eq!(pair.positive_roots.len(), 1);
        assert_eq!(pair.negative_roots.len(), 2);
        let dev = factor_consistency(&m.exponent(), &pair, 10.0, 200).unwrap();
        assert!(dev < 1e-10, "{dev}");
        // Product form against the recovered triplet.
        let rho = pair.positive_roots[0];
        let qp = pair.plus.kill();
        for &s in &[-1.5, 0.5, 3.0] {
            let prod = -qp * (1.0 - s / rho) / (1.0 - s / 4.0);
            assert!((pair.plus.eval(s).unwrap() - prod).abs() < 1e-12 * prod.abs().max(1.0));
            let (r1, r2) = (pair.negative_roots[0], pair.negative_roots[1]);
            let prod = -pair.minus.kill() * (1.0 + s / r1) * (1.0 + s / r2) / (1.0 + s / 2.0);
            assert!((pair.minus.eval(s).unwrap() - prod).abs() < 1e-12 * prod.abs().max(1.0));
        }
        assert!(pair.plus.p_flag() && pair.minus.p_flag());
    }

    #[test]
    fn onesided_examples() {
        let bm = LevyModel::new(0.0, 1.0, JumpSpec::None, 1.0).unwrap();
        let p = spectrally_onesided_factors(&bm).unwrap();
        assert!((p.gamma_q.unwrap() - 2f64.sqrt()).abs() < 1e-12);
        let m = LevyModel::new(1.0, 1.0, JumpSpec::None, 1.5).unwrap();
        let p = spectrally_onesided_factors(&m).unwrap();
        assert!((p.gamma_q.unwrap() - 1.0).abs() < 1e-12);
        // Brownian with drift −1/2, q = 1: γ = 2, φ₋ = −(s+1)/2.
        let b = LevyModel::new(-0.5, 1.0, JumpSpec::None, 1.0).unwrap();
        let p = spectrally_onesided_factors(&b).unwrap();
        assert!((p.gamma_q.unwrap() - 2.0).abs() < 1e-12);
        for &s in &[-0.5, 0.0, 1.0, 2.0, 3.0] {
            assert!((p.minus.eval(s).unwrap() + 0.5 * (s + 1.0)).abs() < 1e-12);
        }
        assert!(factor_consistency(&b.exponent(), &p, 10.0, 100).unwrap() < 1e-10);
        let up = LevyModel::new(1.0, 1.0, JumpSpec::None, 0.0).unwrap();
        assert!(matches!(spectrally_onesided_factors(&up), Err(Error::NoRoot(_))));
    }

    #[test]
    fn onesided_closure_factors_with_jumps() {
        // Spectrally positive with exponential jumps: drift −(q+1/2) gives γ = 1.
        let q = 0.7;
        let jumps = JumpSpec::CompoundPoisson { rate: 1.0, density: JumpDensity::Exponential { eta: 1.0 } };
        let m = LevyModel::from_effective_drift(-(q + 0.5), 0.0, jumps, q).unwrap();
        let p = spectrally_onesided_factors(&m).unwrap();
        assert!((p.gamma_q.unwrap() - 1.0).abs() < 1e-12);
        assert!(factor_consistency(&m.exponent(), &p, 10.0, 100).unwrap() < 1e-10);
        // The same pair from polynomial roots with q₊ = q.
        let r = rational_factors_with(&m, q).unwrap();
        for &s in &[-0.5, 0.3, 0.9] {
            assert!((r.plus.eval(s).unwrap() - p.plus.eval(s).unwrap()).abs() < 1e-10);
            assert!((r.minus.eval(s).unwrap() - p.minus.eval(s).unwrap()).abs() < 1e-10);
        }
        assert!((r.plus.tail(0.8).unwrap() - 0.5 * (-0.8f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn potential_and_vigon() {
        let minus = lin(LadderSide::Descending, 1.0, 1.0);
        let pot = PotentialMeasure::from_descending(&minus).unwrap();
        assert!((pot.density(0.3) - (-0.3f64).exp()).abs() < 1e-14 && pot.atom == 0.0);
        let grid: Vec<f64> = (0..20).map(|i| 0.05 + 0.25 * i as f64).collect();
        let r = vigon_check(|y| (-y).exp(), |y| 0.5 * (-y).exp(), &pot, &grid).unwrap();
        assert!(r < 1e-9, "{r}");
        let r = vigon_check(|y| (-2.0 * y).exp(), |y| (-2.0 * y).exp() / 3.0, &pot, &grid).unwrap();
        assert!(r < 1e-9, "{r}");
        let r = vigon_check(|_| 0.0, |_| 0.0, &pot, &grid).unwrap();
        assert_eq!(r, 0.0);
        // Pure kill: 𝒰 = δ₀/q.
        let pot = PotentialMeasure::from_descending(&lin(LadderSide::Descending, 2.0, 0.0)).unwrap();
        assert!((pot.atom - 0.5).abs() < 1e-15 && pot.components.is_empty());
    }

    #[test]
    fn potential_laplace_matches_factor() {
        let pair = rational_factors(&fixture_a()).unwrap();
        let pot = PotentialMeasure::from_descending(&pair.minus).unwrap();
        for &s in &[0.0, 0.4, 3.0, 20.0] {
            let expect = -1.0 / pair.minus.eval(s).unwrap();
            assert!((pot.laplace(s) - expect).abs() < 1e-12 * expect, "s={s}");
        }
        assert!((pot.total_mass() - 1.0 / pair.minus.kill()).abs() < 1e-12);
    }

    #[test]
    fn vigon_on_two_sided_fixture() {
        let m = fixture_a();
        let pair = rational_factors(&m).unwrap();
        let pot = PotentialMeasure::from_descending(&pair.minus).unwrap();
        let grid: Vec<f64> = (0..15).map(|i| 0.01 + 0.3 * i as f64).collect();
        let r = vigon_check(|y| m.jumps.tail_pos(y), |y| pair.plus.tail(y).unwrap(), &pot, &grid).unwrap();
        assert!(r < 1e-9, "{r}");
    }

    #[test]
    fn tbeta_ladder_examples() {
        let minus = lin(LadderSide::Descending, 1.0, 1.0);
        let t = tbeta_on_ladder(&minus, 1.0).unwrap();
        assert_eq!(t.eval(0.0).unwrap(), 0.0);
        for &s in &[-0.5, 0.5, 4.0] {
            let expect = -s * (s + 2.0) / (s + 1.0);
            assert!((t.eval(s).unwrap() - expect).abs() < 1e-13);
        }
        assert!(matches!(tbeta_on_ladder(&minus, -1.0), Err(Error::BadBeta { .. })));
    }

    #[test]
    fn cp_identity_on_fixture() {
        let m = fixture_a();
        let pair = rational_factors(&m).unwrap();
        let psi = pair.compose().unwrap();
        let bs = crate::exponents::beta_star(&psi, m.beta_plus_default()).unwrap().value;
        for k in 1..10 {
            let beta = bs * k as f64 / 10.0;
            let lhs = tbeta_transform(&psi, beta).unwrap();
            let shifted = shift_ascending(&pair.plus, beta).unwrap();
            let tm = tbeta_on_ladder(&pair.minus, beta).unwrap();
            let (lo, hi) = lhs.strip();
            for i in 1..20 {
                let s = lo + (hi - lo) * i as f64 / 20.0;
                let rhs = -shifted.eval(s).unwrap() * tm.eval(s).unwrap();
                let l = lhs.eval(s).unwrap();
                assert!((l - rhs).abs() <= 1e-10 * l.abs().max(1.0), "beta={beta} s={s}");
            }
        }
    }

    #[test]
    fn psi_plus_and_descending_models() {
        let pair = rational_factors(&fixture_a()).unwrap();
        let pm = pair.plus.psi_plus_model().unwrap();
        for &s in &[-3.0, -0.5, 0.7, 2.0] {
            let expect = s * pair.plus.eval(s).unwrap();
            assert!((pm.eval(s).unwrap() - expect).abs() < 1e-12 * expect.abs().max(1.0));
        }
        assert_eq!(pm.kill, 0.0);
        assert!(pm.mean() < 0.0);
        let dm = pair.minus.descending_model().unwrap();
        for &s in &[-0.5, 0.7, 2.0] {
            let expect = pair.minus.eval(s).unwrap();
            assert!((dm.eval(s).unwrap() - expect).abs() < 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn doc_round_trip() {
        let pair = rational_factors(&fixture_a()).unwrap();
        let doc = pair.plus.to_doc().unwrap();
        let json = serde_json::to_string(&doc).unwrap();
        assert!(json.contains("\"role\":\"ascending\""));
        let back: LadderDoc = serde_json::from_str(&json).unwrap();
        let f = LadderExponent::from_doc(&back).unwrap();
        assert_eq!(f.eval(1.3).unwrap(), pair.plus.eval(1.3).unwrap());
    }

    proptest! {
        #[test]
        fn rational_factors_general(
            lp in 0.1..3.0f64, ep in 0.5..5.0f64, lm in 0.1..3.0f64, em in 0.5..5.0f64,
            d in -2.0..2.0f64, s2 in prop_oneof![Just(0.0), 0.1..2.0f64], q in 0.05..3.0f64,
            lp2 in 0.0..2.0f64,
        ) {
            let jumps = JumpSpec::HyperExponential {
                positive: vec![ExpComponent { rate: lp, eta: ep }, ExpComponent { rate: lp2, eta: ep + 1.3 }],
                negative: vec![ExpComponent { rate: lm, eta: em }],
            };
            let m = LevyModel::from_effective_drift(d, s2, jumps, q).unwrap();
            let pair = rational_factors(&m).unwrap();
            prop_assert!(factor_consistency(&m.exponent(), &pair, 8.0, 60).unwrap() < 1e-9);
            let psi = pair.compose().unwrap();
            prop_assert_eq!(psi.eval(0.0).unwrap(), -pair.plus.kill() * pair.minus.kill());
            // Monotonicity of each factor on a grid.
            let (lo, hi) = pair.plus.strip();
            let mut prev = f64::NEG_INFINITY;
            for i in 1..40 {
                let s = lo.max(-8.0) + (hi.min(8.0) - lo.max(-8.0)) * i as f64 / 40.0;
                let v = pair.plus.eval(s).unwrap();
                prop_assert!(v >= prev);
                prev = v;
            }
            let (lo, hi) = pair.minus.strip();
            let mut prev = f64::INFINITY;
            for i in 1..40 {
                let s = lo.max(-8.0) + (hi.min(8.0) - lo.max(-8.0)) * i as f64 / 40.0;
                let v = pair.minus.eval(s).unwrap();
                prop_assert!(v <= prev);
                prev = v;
            }
        }
    }
}
