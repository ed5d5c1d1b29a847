//! Killed Lévy processes, their Laplace exponents and the `T_β` transform.
//!
//! A model is `(b, σ², Π, q)` with exponent
//! `Ψ_q(s) = bs + σ²s²/2 + ∫(e^{sy} − 1 − sy·1{|y|<1}) Π(dy) − q`.
//! Jump measures come from parametric families whose exponent integrals and
//! tails are all closed form; internally every family is flattened into a
//! list of one-sided [`Atom`]s.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::quadrature::{integrate_singular, QuadOptions};
use crate::roots::bisect_boundary;
use crate::special::{digamma, gamma, inc_beta_unnormalized, lower_gamma, rgamma, upper_gamma};

/// Distance from a strip endpoint inside which evaluation is refused.
pub const STRIP_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Pos,
    Neg,
}

impl Side {
    fn sign(self) -> f64 {
        match self {
            Side::Pos => 1.0,
            Side::Neg => -1.0,
        }
    }
}

/// One exponential component `rate·η·e^{−η|y|}` of a hyperexponential measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpComponent {
    pub rate: f64,
    pub eta: f64,
}

/// Jump-size law of a compound Poisson family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum JumpDensity {
    /// `η e^{−ηy}` on `y > 0`.
    Exponential { eta: f64 },
    /// `η e^{ηy}` on `y < 0`.
    NegativeExponential { eta: f64 },
    /// Uniform on `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
}

/// Parametric jump-measure families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "kebab-case", deny_unknown_fields)]
pub enum JumpSpec {
    None,
    CompoundPoisson { rate: f64, density: JumpDensity },
    /// `λ₊η₊e^{−η₊y}1{y>0} + λ₋η₋e^{η₋y}1{y<0}`.
    ExponentialTwoSided { lambda_plus: f64, eta_plus: f64, lambda_minus: f64, eta_minus: f64 },
    /// Finite mixtures of exponentials on each half-line.
    HyperExponential { positive: Vec<ExpComponent>, negative: Vec<ExpComponent> },
    /// `(c·α/Γ(1−α)) e^{−γy} y^{−α−1}` on `y > 0`, `α ∈ (0,1)`.
    TiltedStableTail { c: f64, alpha: f64, gamma: f64 },
    /// Mirror image of the tilted-stable tail on `y < 0`; `α ∈ (0,1) ∪ (1,2)`.
    /// For `α > 1` the measure has infinite variation.
    SpectrallyNegativeTemperedStable { c: f64, alpha: f64, gamma: f64 },
    /// Jumps of the Lamperti-type process attached to a stable process with
    /// `α < 1`: `c₊e^x(e^x−1)^{−α−1}` for `x > 0` and
    /// `c₋e^x(1−e^x)^{−α−1}` for `x < 0`, with jump sizes `y = scale·x`.
    LampertiStable { alpha: f64, c_plus: f64, c_minus: f64, scale: f64 },
    /// Image of a finite-variation measure under the `T_β` transform.
    #[serde(skip)]
    Transformed(TransformedJumps),
}

/// `Π^β` built from a base measure, `β` and the base killing rate.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformedJumps {
    pub base: Box<JumpSpec>,
    pub beta: f64,
    pub kill: f64,
    small_mean: f64,
}

/// One-sided building block of every jump measure.
#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Atom {
    Exp { side: Side, rate: f64, eta: f64 },
    Uniform { rate: f64, lo: f64, hi: f64 },
    Ts { side: Side, c: f64, alpha: f64, gamma: f64 },
    Lamperti { side: Side, c: f64, alpha: f64, scale: f64 },
    Transformed(TransformedJumps),
}

impl Atom {
    fn strip(&self) -> (f64, f64) {
        match *self {
            Atom::Exp { side: Side::Pos, eta, .. } => (f64::NEG_INFINITY, eta),
            Atom::Exp { side: Side::Neg, eta, .. } => (-eta, f64::INFINITY),
            Atom::Uniform { .. } => (f64::NEG_INFINITY, f64::INFINITY),
            Atom::Ts { side: Side::Pos, gamma, .. } => (f64::NEG_INFINITY, gamma),
            Atom::Ts { side: Side::Neg, gamma, .. } => (-gamma, f64::INFINITY),
            Atom::Lamperti { side: Side::Pos, alpha, scale, .. } => (f64::NEG_INFINITY, alpha / scale),
            Atom::Lamperti { side: Side::Neg, scale, .. } => (-1.0 / scale, f64::INFINITY),
            Atom::Transformed(ref t) => t.strip(),
        }
    }

    fn is_fv(&self) -> bool {
        !matches!(*self, Atom::Ts { alpha, .. } if alpha > 1.0)
    }

    /// Total mass, if finite.
    pub(crate) fn rate(&self) -> Option<f64> {
        match *self {
            Atom::Exp { rate, .. } | Atom::Uniform { rate, .. } => Some(rate),
            Atom::Transformed(ref t) => {
                let base: Option<f64> = t.base.atoms().iter().map(Atom::rate).sum();
                base.map(|r| r + t.kill)
            }
            _ => None,
        }
    }

    /// `∫(e^{sy} − 1) Π(dy)`; finite-variation atoms only.
    fn jfv(&self, s: f64) -> f64 {
        if s == 0.0 {
            return 0.0;
        }
        match *self {
            Atom::Exp { side: Side::Pos, rate, eta } => rate * s / (eta - s),
            Atom::Exp { side: Side::Neg, rate, eta } => -rate * s / (eta + s),
            Atom::Uniform { rate, lo, hi } => {
                let w = hi - lo;
                rate * ((s * lo).exp() * (s * w).exp_m1() / (s * w) - 1.0)
            }
            Atom::Ts { side, c, alpha, gamma } => {
                c * (gamma.powf(alpha) - (gamma - side.sign() * s).powf(alpha))
            }
            Atom::Lamperti { side, c, alpha, scale } => lamperti_jfv_x(side, c, alpha, scale * s),
            Atom::Transformed(ref t) => t.jfv(s),
        }
    }

    /// `∫_{|y|<1} y Π(dy)`; finite-variation atoms only.
    pub(crate) fn small_mean(&self) -> f64 {
        match *self {
            Atom::Exp { side, rate, eta } => {
                side.sign() * rate * (-(-eta).exp_m1() - eta * (-eta).exp()) / eta
            }
            Atom::Uniform { rate, lo, hi } => {
                let a = lo.max(-1.0);
                let b = hi.min(1.0);
                if b <= a {
                    0.0
                } else {
                    rate / (hi - lo) * 0.5 * (b * b - a * a)
                }
            }
            Atom::Ts { side, c, alpha, gamma } => {
                side.sign() * ts_k(c, alpha) * gamma.powf(alpha - 1.0) * lower_gamma(1.0 - alpha, gamma)
            }
            Atom::Lamperti { side, c, alpha, scale } => {
                side.sign() * scale * c * lamperti_first_moment_x(side, alpha, 1.0 / scale)
            }
            Atom::Transformed(ref t) => t.small_mean,
        }
    }

    /// `∫_{|y|≥1} y Π(dy)`.
    fn big_mean(&self) -> f64 {
        match *self {
            Atom::Ts { side, c, alpha, gamma } if alpha > 1.0 => {
                side.sign() * ts_k(c, alpha) * gamma.powf(alpha - 1.0) * upper_gamma(1.0 - alpha, gamma)
            }
            _ => self.total_mean() - self.small_mean(),
        }
    }

    /// `∫ y Π(dy)` for finite-variation atoms.
    fn total_mean(&self) -> f64 {
        match *self {
            Atom::Exp { side, rate, eta } => side.sign() * rate / eta,
            Atom::Uniform { rate, lo, hi } => rate * 0.5 * (lo + hi),
            Atom::Ts { side, c, alpha, gamma } => side.sign() * c * alpha * gamma.powf(alpha - 1.0),
            Atom::Lamperti { side, c, alpha, scale } => {
                let g = gamma(-alpha);
                scale
                    * match side {
                        Side::Pos => -c * g * gamma(alpha),
                        Side::Neg => c * g * rgamma(1.0 - alpha) * (digamma(1.0) - digamma(1.0 - alpha)),
                    }
            }
            Atom::Transformed(ref t) => (t.base_j(t.beta) - t.kill) / t.beta,
        }
    }

    /// Lévy–Khintchine integral `∫(e^{sy} − 1 − sy1{|y|<1}) Π(dy)`.
    fn lk(&self, s: f64) -> f64 {
        if s == 0.0 {
            return 0.0;
        }
        match *self {
            Atom::Ts { c, alpha, gamma, .. } if alpha > 1.0 => {
                let comp = c
                    * ((gamma + s).powf(alpha) - gamma.powf(alpha) - alpha * gamma.powf(alpha - 1.0) * s);
                comp + s * self.big_mean()
            }
            _ => self.jfv(s) - s * self.small_mean(),
        }
    }

    pub(crate) fn side(&self) -> Option<Side> {
        match *self {
            Atom::Exp { side, .. } | Atom::Ts { side, .. } | Atom::Lamperti { side, .. } => Some(side),
            Atom::Uniform { .. } | Atom::Transformed(_) => None,
        }
    }

    /// `Π((y, ∞))` for `y > 0`.
    pub(crate) fn tail_pos(&self, y: f64) -> f64 {
        match (self, self.side()) {
            (_, Some(Side::Neg)) => 0.0,
            (&Atom::Exp { rate, eta, .. }, _) => rate * (-eta * y).exp(),
            (&Atom::Uniform { rate, lo, hi }, _) => rate * ((hi - y.max(lo)) / (hi - lo)).clamp(0.0, 1.0),
            (&Atom::Ts { c, alpha, gamma, .. }, _) => ts_tail(c, alpha, gamma, y),
            (&Atom::Lamperti { c, alpha, scale, .. }, _) => lamperti_tail_x(Side::Pos, c, alpha, y / scale),
            (Atom::Transformed(t), _) => guarded_scale((t.beta * y).exp(), t.base.tail_pos(y)),
        }
    }

    /// `Π((−∞, −r))` for `r > 0`.
    pub(crate) fn tail_neg(&self, r: f64) -> f64 {
        match (self, self.side()) {
            (_, Some(Side::Pos)) => 0.0,
            (&Atom::Exp { rate, eta, .. }, _) => rate * (-eta * r).exp(),
            (&Atom::Uniform { rate, lo, hi }, _) => rate * ((hi.min(-r) - lo) / (hi - lo)).clamp(0.0, 1.0),
            (&Atom::Ts { c, alpha, gamma, .. }, _) => ts_tail(c, alpha, gamma, r),
            (&Atom::Lamperti { c, alpha, scale, .. }, _) => lamperti_tail_x(Side::Neg, c, alpha, r / scale),
            (Atom::Transformed(t), _) => (-t.beta * r).exp() * (t.base.tail_neg(r) + t.kill),
        }
    }

    /// Lévy density at `y ≠ 0`.
    pub(crate) fn density(&self, y: f64) -> f64 {
        let on_side = |s: Side| match s {
            Side::Pos => y > 0.0,
            Side::Neg => y < 0.0,
        };
        match *self {
            Atom::Exp { side, rate, eta } if on_side(side) => rate * eta * (-eta * y.abs()).exp(),
            Atom::Uniform { rate, lo, hi } if y >= lo && y <= hi => rate / (hi - lo),
            Atom::Ts { side, c, alpha, gamma } if on_side(side) => {
                let r = y.abs();
                ts_k(c, alpha) * (-gamma * r).exp() * r.powf(-alpha - 1.0)
            }
            Atom::Lamperti { side, c, alpha, scale } if on_side(side) => {
                c / scale * lamperti_density_x(side, alpha, y.abs() / scale)
            }
            Atom::Transformed(ref t) => t.density(y),
            _ => 0.0,
        }
    }

    /// Whether the restriction to `(0, ∞)` has a non-increasing density.
    fn p_flag(&self) -> bool {
        match *self {
            Atom::Uniform { lo, hi, .. } => lo <= 0.0 || hi <= 0.0,
            _ => true,
        }
    }
}

fn guarded_scale(factor: f64, x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        factor * x
    }
}

/// `1/|Γ(−α)| = α/Γ(1−α)`: the normalization shared by the tempered-stable families.
fn ts_k(c: f64, alpha: f64) -> f64 {
    c / gamma(-alpha).abs()
}

fn ts_tail(c: f64, alpha: f64, gamma: f64, r: f64) -> f64 {
    if r <= 0.0 {
        return f64::INFINITY;
    }
    ts_k(c, alpha) * gamma.powf(alpha) * upper_gamma(-alpha, gamma * r)
}

/// Exponent of the Lamperti jump part in the unscaled variable `x`.
fn lamperti_jfv_x(side: Side, c: f64, alpha: f64, u: f64) -> f64 {
    let g = gamma(-alpha);
    match side {
        Side::Pos => c * g * gamma(alpha - u) * rgamma(-u),
        Side::Neg => c * g * (gamma(u + 1.0) * rgamma(u + 1.0 - alpha) - rgamma(1.0 - alpha)),
    }
}

fn lamperti_density_x(side: Side, alpha: f64, x: f64) -> f64 {
    match side {
        Side::Pos => (-alpha * x).exp() * (-(-x).exp_m1()).powf(-alpha - 1.0),
        Side::Neg => (-x).exp() * (-(-x).exp_m1()).powf(-alpha - 1.0),
    }
}

/// Tail mass beyond `x > 0` in the unscaled variable.
pub(crate) fn lamperti_tail_x(side: Side, c: f64, alpha: f64, x: f64) -> f64 {
    match side {
        Side::Pos => c * x.exp_m1().powf(-alpha) / alpha,
        Side::Neg => c * ((-(-x).exp_m1()).powf(-alpha) - 1.0) / alpha,
    }
}

/// `∫_0^L x g(x) dx` for the unit-constant Lamperti density `g` on one side
/// (magnitudes on the negative side), by parts plus an incomplete beta.
fn lamperti_first_moment_x(side: Side, alpha: f64, l: f64) -> f64 {
    let v = -(-l).exp_m1();
    match side {
        Side::Pos => {
            -l * l.exp_m1().powf(-alpha) / alpha + inc_beta_unnormalized(1.0 - alpha, alpha, v) / alpha
        }
        Side::Neg => -l * v.powf(-alpha) / alpha + inc_beta_unnormalized(1.0 - alpha, 0.0, v) / alpha,
    }
}

impl TransformedJumps {
    /// `Π^β` for a finite-variation base measure killed at rate `kill`.
    pub fn new(base: JumpSpec, beta: f64, kill: f64) -> Result<Self> {
        if !base.is_finite_variation() {
            return Err(Error::Unsupported("T_beta triplet of an infinite-variation measure".into()));
        }
        let (_, hi) = base.strip();
        if !(beta > 0.0 && beta < hi) {
            return Err(Error::BadBeta { beta, hi });
        }
        let mut t = TransformedJumps { base: Box::new(base), beta, kill, small_mean: 0.0 };
        let opts = QuadOptions::rel(1e-12);
        let pos = integrate_singular(|y, _, _| y * t.density(y), 0.0, 1.0, opts)?;
        let neg = integrate_singular(|y, _, _| y * t.density(y), -1.0, 0.0, opts)?;
        t.small_mean = pos.value + neg.value;
        Ok(t)
    }

    fn base_j(&self, s: f64) -> f64 {
        self.base.atoms().iter().map(|a| a.jfv(s)).sum()
    }

    fn jfv(&self, z: f64) -> f64 {
        z * (self.base_j(z + self.beta) - self.kill) / (z + self.beta)
    }

    fn strip(&self) -> (f64, f64) {
        let (lo, hi) = self.base.strip();
        ((lo - self.beta).max(-self.beta), hi - self.beta)
    }

    pub(crate) fn density(&self, y: f64) -> f64 {
        let b = self.beta;
        let inner = if y > 0.0 {
            self.base.density(y) - b * self.base.tail_pos(y)
        } else if y < 0.0 {
            self.base.density(y) + b * self.base.tail_neg(-y) + self.kill * b
        } else {
            0.0
        };
        if inner == 0.0 {
            0.0
        } else {
            (b * y).exp() * inner
        }
    }
}

impl JumpSpec {
    pub(crate) fn atoms(&self) -> Vec<Atom> {
        match *self {
            JumpSpec::None => vec![],
            JumpSpec::CompoundPoisson { rate, density } => vec![match density {
                JumpDensity::Exponential { eta } => Atom::Exp { side: Side::Pos, rate, eta },
                JumpDensity::NegativeExponential { eta } => Atom::Exp { side: Side::Neg, rate, eta },
                JumpDensity::Uniform { lo, hi } => Atom::Uniform { rate, lo, hi },
            }],
            JumpSpec::ExponentialTwoSided { lambda_plus, eta_plus, lambda_minus, eta_minus } => vec![
                Atom::Exp { side: Side::Pos, rate: lambda_plus, eta: eta_plus },
                Atom::Exp { side: Side::Neg, rate: lambda_minus, eta: eta_minus },
            ],
            JumpSpec::HyperExponential { ref positive, ref negative } => positive
                .iter()
                .map(|c| Atom::Exp { side: Side::Pos, rate: c.rate, eta: c.eta })
                .chain(negative.iter().map(|c| Atom::Exp { side: Side::Neg, rate: c.rate, eta: c.eta }))
                .collect(),
            JumpSpec::TiltedStableTail { c, alpha, gamma } => vec![Atom::Ts { side: Side::Pos, c, alpha, gamma }],
            JumpSpec::SpectrallyNegativeTemperedStable { c, alpha, gamma } => {
                vec![Atom::Ts { side: Side::Neg, c, alpha, gamma }]
            }
            JumpSpec::LampertiStable { alpha, c_plus, c_minus, scale } => vec![
                Atom::Lamperti { side: Side::Pos, c: c_plus, alpha, scale },
                Atom::Lamperti { side: Side::Neg, c: c_minus, alpha, scale },
            ],
            JumpSpec::Transformed(ref t) => vec![Atom::Transformed(t.clone())],
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidModel(m));
        let pos = |x: f64| x.is_finite() && x > 0.0;
        let nonneg = |x: f64| x.is_finite() && x >= 0.0;
        for a in self.atoms() {
            match a {
                Atom::Exp { rate, eta, .. } => {
                    if !nonneg(rate) || !pos(eta) {
                        return bad(format!("exponential component needs rate >= 0, eta > 0 (got {rate}, {eta})"));
                    }
                }
                Atom::Uniform { rate, lo, hi } => {
                    if !nonneg(rate) || !(lo.is_finite() && hi.is_finite() && lo < hi) {
                        return bad(format!("uniform jumps need rate >= 0 and lo < hi (got {rate}, {lo}, {hi})"));
                    }
                }
                Atom::Ts { side, c, alpha, gamma } => {
                    let alpha_ok = match side {
                        Side::Pos => alpha > 0.0 && alpha < 1.0,
                        Side::Neg => alpha > 0.0 && alpha < 2.0 && alpha != 1.0,
                    };
                    if !pos(c) || !pos(gamma) || !alpha_ok {
                        return bad(format!("tempered-stable parameters out of range (c={c}, alpha={alpha}, gamma={gamma})"));
                    }
                }
                Atom::Lamperti { c, alpha, scale, .. } => {
                    if !nonneg(c) || !(alpha > 0.0 && alpha < 1.0) || !pos(scale) {
                        return bad(format!("Lamperti jumps need c >= 0, alpha in (0,1), scale > 0 (got {c}, {alpha}, {scale})"));
                    }
                }
                Atom::Transformed(_) => {}
            }
        }
        Ok(())
    }

    /// Open interval of `s` on which `∫ e^{sy} 1{|y|>1} Π(dy)` is finite.
    pub fn strip(&self) -> (f64, f64) {
        self.atoms().iter().fold((f64::NEG_INFINITY, f64::INFINITY), |(lo, hi), a| {
            let (l, h) = a.strip();
            (lo.max(l), hi.min(h))
        })
    }

    pub fn is_finite_variation(&self) -> bool {
        self.atoms().iter().all(Atom::is_fv)
    }

    /// Total mass `Π(ℝ∖{0})`, if finite.
    pub fn total_rate(&self) -> Option<f64> {
        self.atoms().iter().map(Atom::rate).sum()
    }

    /// `Π̄₊(y) = Π((y, ∞))`, `y > 0`.
    pub fn tail_pos(&self, y: f64) -> f64 {
        self.atoms().iter().map(|a| a.tail_pos(y)).sum()
    }

    /// `Π̄₋(y) = Π((−∞, y))` evaluated at `y = −r`, `r > 0`.
    pub fn tail_neg(&self, r: f64) -> f64 {
        self.atoms().iter().map(|a| a.tail_neg(r)).sum()
    }

    /// Lévy density at `y ≠ 0`.
    pub fn density(&self, y: f64) -> f64 {
        self.atoms().iter().map(|a| a.density(y)).sum()
    }

    /// `∫(e^{sy} − 1 − sy1{|y|<1}) Π(dy)`.
    pub fn lk_integral(&self, s: f64) -> f64 {
        self.atoms().iter().map(|a| a.lk(s)).sum()
    }

    /// `∫(e^{sy} − 1) Π(dy)`; `None` for infinite variation.
    pub fn fv_integral(&self, s: f64) -> Option<f64> {
        self.is_finite_variation().then(|| self.atoms().iter().map(|a| a.jfv(s)).sum())
    }

    /// `∫_{|y|<1} y Π(dy)`; `None` for infinite variation.
    pub fn small_jump_mean(&self) -> Option<f64> {
        self.is_finite_variation().then(|| self.atoms().iter().map(Atom::small_mean).sum())
    }

    /// `∫_{|y|≥1} y Π(dy)`.
    pub fn big_jump_mean(&self) -> f64 {
        self.atoms().iter().map(Atom::big_mean).sum()
    }

    /// Certificate that `Π` restricted to `(0, ∞)` lies in class 𝒫.
    pub fn density_nonincreasing_on_positive_half_line(&self) -> bool {
        self.atoms().iter().all(Atom::p_flag)
    }

    pub fn has_positive_jumps(&self) -> bool {
        self.atoms().iter().any(|a| a.tail_pos(1e-300) > 0.0)
    }

    pub fn has_negative_jumps(&self) -> bool {
        self.atoms().iter().any(|a| a.tail_neg(1e-300) > 0.0)
    }
}

/// A killed Lévy process `(b, σ², Π, q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevyModel {
    pub drift: f64,
    pub gaussian: f64,
    pub kill: f64,
    pub jumps: JumpSpec,
}

impl LevyModel {
    pub fn new(drift: f64, gaussian: f64, jumps: JumpSpec, kill: f64) -> Result<Self> {
        let m = LevyModel { drift, gaussian, kill, jumps };
        m.validate()?;
        Ok(m)
    }

    /// Build a finite-variation model from its effective drift
    /// `d = b − ∫_{|y|<1} y Π(dy)`.
    pub fn from_effective_drift(d: f64, gaussian: f64, jumps: JumpSpec, kill: f64) -> Result<Self> {
        let m = jumps
            .small_jump_mean()
            .ok_or_else(|| Error::InvalidModel("effective drift needs finite variation".into()))?;
        Self::new(d + m, gaussian, jumps, kill)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.drift.is_finite() {
            return Err(Error::InvalidModel(format!("drift must be finite, got {}", self.drift)));
        }
        if !(self.gaussian.is_finite() && self.gaussian >= 0.0) {
            return Err(Error::InvalidModel(format!("gaussian must be >= 0, got {}", self.gaussian)));
        }
        if !(self.kill.is_finite() && self.kill >= 0.0) {
            return Err(Error::InvalidModel(format!("kill must be >= 0, got {}", self.kill)));
        }
        self.jumps.validate()
    }

    pub fn strip(&self) -> (f64, f64) {
        let (lo, hi) = self.jumps.strip();
        (lo.min(0.0), hi.max(0.0))
    }

    /// `Ψ_q(s)`.
    pub fn eval(&self, s: f64) -> Result<f64> {
        check_strip(s, self.strip())?;
        if s == 0.0 {
            return Ok(-self.kill);
        }
        Ok(self.drift * s + 0.5 * self.gaussian * s * s + self.jumps.lk_integral(s) - self.kill)
    }

    /// `d = b − ∫_{|y|<1} y Π(dy)` for finite-variation jumps.
    pub fn effective_drift(&self) -> Option<f64> {
        self.jumps.small_jump_mean().map(|m| self.drift - m)
    }

    /// `Ψ'(0) = E[ξ₁]` of the unkilled process.
    pub fn mean(&self) -> f64 {
        self.drift + self.jumps.big_jump_mean()
    }

    /// The exponent as a standalone [`LaplaceExponent`].
    pub fn exponent(&self) -> LaplaceExponent {
        let m = self.clone();
        LaplaceExponent::new(
            move |s| m.drift * s + 0.5 * m.gaussian * s * s + m.jumps.lk_integral(s) - m.kill,
            self.strip(),
            self.kill,
            Provenance::Triplet,
        )
    }

    /// Default `β₊`: the right end of the finiteness strip (`η₊` for
    /// exponential jumps, `γ` for tilted-stable tails).
    pub fn beta_plus_default(&self) -> f64 {
        self.strip().1
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).unwrap_or_else(|_| format!("{self:?}").into_bytes());
        hex::encode(Sha256::digest(&bytes))
    }

    /// Triplet of the unkilled process whose exponent is `T_βΨ_q`.
    ///
    /// Gaussian part is unchanged, `d^β = d + σ²β/2`, and
    /// `Π^β(dy) = e^{βy}(Π(dy) − βΠ̄₊(y)dy + (βΠ̄₋(y) + qβ)dy·1{y<0})`.
    /// Exponential components map to exponential components, so
    /// hyperexponential inputs stay hyperexponential.
    pub fn tbeta_triplet(&self, beta: f64) -> Result<LevyModel> {
        let d = self
            .effective_drift()
            .ok_or_else(|| Error::Unsupported("T_beta triplet of an infinite-variation measure".into()))?;
        let hi = self.strip().1;
        if !(beta > 0.0 && beta < hi) {
            return Err(Error::BadBeta { beta, hi });
        }
        let atoms = self.jumps.atoms();
        let all_exp = atoms.iter().all(|a| matches!(a, Atom::Exp { .. }));
        let jumps = if all_exp {
            let mut positive = vec![];
            let mut negative = vec![];
            for a in atoms {
                if let Atom::Exp { side, rate, eta } = a {
                    match side {
                        Side::Pos => positive.push(ExpComponent { rate, eta: eta - beta }),
                        Side::Neg => negative.push(ExpComponent { rate, eta: eta + beta }),
                    }
                }
            }
            if self.kill > 0.0 {
                negative.push(ExpComponent { rate: self.kill, eta: beta });
            }
            JumpSpec::HyperExponential { positive, negative }
        } else {
            JumpSpec::Transformed(TransformedJumps::new(self.jumps.clone(), beta, self.kill)?)
        };
        LevyModel::from_effective_drift(d + 0.5 * self.gaussian * beta, self.gaussian, jumps, 0.0)
    }
}

fn check_strip(s: f64, (lo, hi): (f64, f64)) -> Result<()> {
    if s.is_nan() || s <= lo + STRIP_MARGIN || s >= hi - STRIP_MARGIN {
        // The origin is always admissible, even for degenerate strips.
        if s == 0.0 {
            return Ok(());
        }
        return Err(Error::StripViolation { s, lo, hi });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Triplet,
    Factors,
    Transformed(f64),
    Analytic(String),
}

/// `Ψ_q` as an evaluatable function on its open strip.
#[derive(Clone)]
pub struct LaplaceExponent {
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    strip: (f64, f64),
    kill: f64,
    provenance: Provenance,
}

impl fmt::Debug for LaplaceExponent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LaplaceExponent")
            .field("strip", &self.strip)
            .field("kill", &self.kill)
            .field("provenance", &self.provenance)
            .finish()
    }
}

impl LaplaceExponent {
    pub fn new<F>(f: F, strip: (f64, f64), kill: f64, provenance: Provenance) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        LaplaceExponent { f: Arc::new(f), strip, kill, provenance }
    }

    pub fn eval(&self, s: f64) -> Result<f64> {
        check_strip(s, self.strip)?;
        if s == 0.0 {
            return Ok(-self.kill);
        }
        Ok((self.f)(s))
    }

    pub fn strip(&self) -> (f64, f64) {
        self.strip
    }

    pub fn kill(&self) -> f64 {
        self.kill
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Largest sampled violation of convexity of `Ψ_q + q` on `[a, b]`.
    pub fn convexity_defect(&self, a: f64, b: f64, n: usize) -> Result<f64> {
        let h = (b - a) / (n as f64 + 1.0);
        let mut worst: f64 = 0.0;
        for i in 1..=n {
            let s = a + i as f64 * h;
            let d2 = self.eval(s + h)? - 2.0 * self.eval(s)? + self.eval(s - h)?;
            worst = worst.max(-d2);
        }
        Ok(worst)
    }
}

/// `Ψ_q(s)` of a model.
pub fn eval_exponent(model: &LevyModel, s: f64) -> Result<f64> {
    model.eval(s)
}

/// `T_βΨ_q(s) = s/(s+β)·Ψ_q(s+β)` on `(−β, θ_max − β)`; unkilled.
pub fn tbeta_transform(psi: &LaplaceExponent, beta: f64) -> Result<LaplaceExponent> {
    let (lo, hi) = psi.strip();
    if !(beta > 0.0 && beta < hi) {
        return Err(Error::BadBeta { beta, hi });
    }
    let inner = psi.clone();
    Ok(LaplaceExponent::new(
        move |s| s / (s + beta) * (inner.f)(s + beta),
        ((lo - beta).max(-beta), hi - beta),
        0.0,
        Provenance::Transformed(beta),
    ))
}

/// Outcome of the `β*_q` bisection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaStar {
    pub value: f64,
    pub converged: bool,
}

/// `β*_q = sup{β > 0 : Ψ_q(β) < 0} ∧ β₊`, by bisection to `1e−12`.
pub fn beta_star(psi: &LaplaceExponent, beta_plus: f64) -> Result<BetaStar> {
    let (_, hi) = psi.strip();
    let cap = beta_plus.min(hi);
    let neg = |b: f64| psi.eval(b).map(|v| v < 0.0).unwrap_or(false);
    let probe = 1e-9_f64.min(0.5 * cap);
    if !neg(probe) {
        return Err(Error::NoSolution { beta_plus });
    }
    let mut upper = if cap.is_finite() { cap - 2.0 * STRIP_MARGIN } else { 1.0 };
    if !cap.is_finite() {
        let mut k = 0;
        while neg(upper) {
            upper *= 2.0;
            k += 1;
            if k > 1100 {
                return Ok(BetaStar { value: f64::INFINITY, converged: true });
            }
        }
    } else if neg(upper) {
        return Ok(BetaStar { value: cap, converged: true });
    }
    let (value, converged) = bisect_boundary(neg, probe, upper, 1e-12, 200);
    Ok(BetaStar { value, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{integrate, integrate_to_infinity};
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    fn two_sided() -> LevyModel {
        let jumps = JumpSpec::ExponentialTwoSided { lambda_plus: 1.0, eta_plus: 4.0, lambda_minus: 1.0, eta_minus: 2.0 };
        LevyModel::from_effective_drift(-1.0, 0.0, jumps, 1.0).unwrap()
    }

    fn tilted() -> LevyModel {
        LevyModel::from_effective_drift(
            0.3,
            0.5,
            JumpSpec::TiltedStableTail { c: 0.7, alpha: 0.4, gamma: 1.5 },
            0.8,
        )
        .unwrap()
    }

    /// Exponent by brute-force quadrature of the Lévy–Khintchine integral.
    fn lk_by_quadrature(m: &LevyModel, s: f64) -> f64 {
        let opts = QuadOptions::rel(1e-12);
        let f = |y: f64| {
            // Below 1e−100 the compensated integrand is ~|y|^{1−α}: negligible.
            let d = if y.abs() < 1e-100 { 0.0 } else { m.jumps.density(y) };
            if d == 0.0 {
                return 0.0;
            }
            let x = s * y;
            let v = if y.abs() >= 1.0 {
                x.exp_m1()
            } else if x.abs() < 0.1 {
                // e^x − 1 − x without cancellation
                let mut term = x * x / 2.0;
                let mut sum = 0.0;
                for k in 3..20 {
                    sum += term;
                    term *= x / k as f64;
                }
                sum
            } else {
                x.exp_m1() - x
            };
            if v == 0.0 {
                0.0
            } else {
                v * d
            }
        };
        let near_pos = integrate_singular(|y, _, _| f(y), 0.0, 1.0, opts).unwrap().value;
        let near_neg = integrate_singular(|y, _, _| f(y), -1.0, 0.0, opts).unwrap().value;
        let far_pos = integrate_to_infinity(f, 1.0, 1.0, opts).unwrap().value;
        let far_neg = integrate_to_infinity(|r| f(-r), 1.0, 1.0, opts).unwrap().value;
        m.drift * s + 0.5 * m.gaussian * s * s + near_pos + near_neg + far_pos + far_neg - m.kill
    }

    #[test]
    fn trivial_values() {
        let drift = LevyModel::new(1.0, 0.0, JumpSpec::None, 1.0).unwrap();
        assert_eq!(drift.eval(1.0).unwrap(), 0.0);
        let bm = LevyModel::new(0.0, 1.0, JumpSpec::None, 1.0).unwrap();
        assert_eq!(bm.eval(2.0).unwrap(), 1.0);
        assert_eq!(two_sided().eval(0.0).unwrap(), -1.0);
    }

    #[test]
    fn closed_forms_match_quadrature() {
        let models = [
            two_sided(),
            tilted(),
            LevyModel::new(
                0.2,
                0.0,
                JumpSpec::SpectrallyNegativeTemperedStable { c: 0.5, alpha: 1.5, gamma: 2.0 },
                0.3,
            )
            .unwrap(),
            LevyModel::new(
                -0.1,
                0.0,
                JumpSpec::CompoundPoisson { rate: 2.0, density: JumpDensity::Uniform { lo: -1.0, hi: 1.0 } },
                0.0,
            )
            .unwrap(),
            LevyModel::new(
                0.0,
                0.0,
                JumpSpec::LampertiStable { alpha: 0.5, c_plus: 0.2, c_minus: 0.3, scale: 0.5 },
                0.4,
            )
            .unwrap(),
        ];
        for m in &models {
            let (lo, hi) = m.strip();
            for &s in &[-0.9, -0.3, 0.2, 0.7, 1.1] {
                if s <= lo + 0.05 || s >= hi - 0.05 {
                    continue;
                }
                let a = m.eval(s).unwrap();
                let b = lk_by_quadrature(m, s);
                assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{m:?} s={s}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn tails_integrate_density() {
        let opts = QuadOptions::rel(1e-12);
        let ts = tilted().jumps;
        let t = integrate_to_infinity(|y| ts.density(y), 0.6, 1.0, opts).unwrap().value;
        assert!(rel(ts.tail_pos(0.6), t) < 1e-10);
        let lam = JumpSpec::LampertiStable { alpha: 0.3, c_plus: 0.4, c_minus: 0.9, scale: 0.3 };
        let t = integrate_to_infinity(|y| lam.density(y), 0.2, 1.0, opts).unwrap().value;
        assert!(rel(lam.tail_pos(0.2), t) < 1e-10);
        let t = integrate_to_infinity(|r| lam.density(-r), 0.2, 1.0, opts).unwrap().value;
        assert!(rel(lam.tail_neg(0.2), t) < 1e-10);
        let small = integrate_singular(|y, _, _| y * lam.density(y), -1.0, 0.0, opts).unwrap().value
            + integrate_singular(|y, _, _| y * lam.density(y), 0.0, 1.0, opts).unwrap().value;
        assert!(rel(lam.small_jump_mean().unwrap(), small) < 1e-10);
        let u = JumpSpec::CompoundPoisson { rate: 2.0, density: JumpDensity::Uniform { lo: -0.5, hi: 1.5 } };
        assert!(rel(u.tail_pos(1.0), 0.5) < 1e-15 && rel(u.tail_neg(0.25), 0.25) < 1e-15);
        assert!(!JumpSpec::CompoundPoisson { rate: 1.0, density: JumpDensity::Uniform { lo: 0.5, hi: 1.0 } }
            .density_nonincreasing_on_positive_half_line());
    }

    #[test]
    fn strip_violation() {
        let m = two_sided();
        assert!(matches!(m.eval(4.0), Err(Error::StripViolation { .. })));
        assert!(matches!(m.eval(4.0 - 1e-10), Err(Error::StripViolation { .. })));
        assert!(m.eval(3.9).is_ok());
        assert!(matches!(m.exponent().eval(-2.0), Err(Error::StripViolation { .. })));
    }

    #[test]
    fn tbeta_examples() {
        let q = 0.7;
        let bm = LevyModel::new(0.0, 1.0, JumpSpec::None, q).unwrap().exponent();
        let beta = 0.9;
        let t = tbeta_transform(&bm, beta).unwrap();
        assert_eq!(t.eval(0.0).unwrap(), 0.0);
        for &s in &[-0.5, 0.3, 2.0] {
            let expect = s / (s + beta) * ((s + beta).powi(2) / 2.0 - q);
            assert!(rel(t.eval(s).unwrap(), expect) < 1e-14);
        }
        assert!(matches!(tbeta_transform(&two_sided().exponent(), 4.0), Err(Error::BadBeta { .. })));
        assert!(matches!(tbeta_transform(&bm, 0.0), Err(Error::BadBeta { .. })));
    }

    #[test]
    fn mean_of_transformed_exponent() {
        // (T_βΨ_q)'(0) = Ψ_q(β)/β
        for m in [two_sided(), tilted()] {
            let psi = m.exponent();
            let beta = 0.8;
            let t = tbeta_transform(&psi, beta).unwrap();
            let h = 1e-5;
            let fd = (t.eval(h).unwrap() - t.eval(-h).unwrap()) / (2.0 * h);
            let expect = psi.eval(beta).unwrap() / beta;
            assert!(rel(fd, expect) < 1e-6, "{fd} vs {expect}");
            let tm = m.tbeta_triplet(beta).unwrap();
            assert!(rel(tm.mean(), expect) < 1e-9, "{} vs {expect}", tm.mean());
        }
    }

    #[test]
    fn transformed_triplet_matches_transform() {
        for m in [two_sided(), tilted(), LevyModel::new(0.4, 2.0, JumpSpec::None, 1.3).unwrap()] {
            let psi = m.exponent();
            for &beta in &[0.3, 1.1] {
                let t = tbeta_transform(&psi, beta).unwrap();
                let tm = m.tbeta_triplet(beta).unwrap();
                assert_eq!(tm.kill, 0.0);
                let (lo, hi) = t.strip();
                for i in 1..20 {
                    let s = lo + (hi.min(5.0) - lo) * i as f64 / 20.0;
                    let a = tm.eval(s).unwrap();
                    let b = t.eval(s).unwrap();
                    assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-3), "beta={beta} s={s}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn transformed_triplet_by_quadrature() {
        // Re-derive Ψ^β from the transformed density itself rather than from
        // the closed-form jump exponent.
        let m = tilted();
        let beta = 0.6;
        let tm = m.tbeta_triplet(beta).unwrap();
        let t = tbeta_transform(&m.exponent(), beta).unwrap();
        for &s in &[-0.4, 0.5] {
            let direct = lk_by_quadrature(&tm, s);
            assert!(rel(direct, t.eval(s).unwrap()) < 1e-8, "s={s}");
        }
        // Hyperexponential image of the two-sided model, checked by its
        // density against the transformed-measure formula.
        let m = two_sided();
        let tm = m.tbeta_triplet(beta).unwrap();
        for &y in &[-2.0, -0.3, 0.4, 1.7] {
            let base = &m.jumps;
            let expect = if y > 0.0 {
                (beta * y).exp() * (base.density(y) - beta * base.tail_pos(y))
            } else {
                (beta * y).exp() * (base.density(y) + beta * base.tail_neg(-y) + m.kill * beta)
            };
            assert!(rel(tm.jumps.density(y), expect) < 1e-13, "y={y}");
        }
        let mass = integrate(|y| tm.jumps.density(-y), 0.0, 60.0, QuadOptions::rel(1e-12)).unwrap().value;
        assert!(rel(mass, tm.jumps.tail_neg(1e-300)) < 1e-9);
    }

    #[test]
    fn beta_star_examples() {
        let bm = LevyModel::new(0.0, 1.0, JumpSpec::None, 1.0).unwrap().exponent();
        let b = beta_star(&bm, 10.0).unwrap();
        assert!((b.value - 2f64.sqrt()).abs() < 1e-11 && b.converged);
        let drift = LevyModel::new(-1.0, 0.0, JumpSpec::None, 0.0).unwrap().exponent();
        assert_eq!(beta_star(&drift, 5.0).unwrap().value, 5.0);
        let bmd = LevyModel::new(-1.0, 1.0, JumpSpec::None, 0.0).unwrap().exponent();
        assert!((beta_star(&bmd, 10.0).unwrap().value - 2.0).abs() < 1e-11);
        let up = LevyModel::new(1.0, 1.0, JumpSpec::None, 0.0).unwrap().exponent();
        assert!(matches!(beta_star(&up, 10.0), Err(Error::NoSolution { .. })));
    }

    #[test]
    fn json_round_trip() {
        let m = tilted();
        let s = serde_json::to_string(&m).unwrap();
        let back: LevyModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert_eq!(serde_json::to_string(&back).unwrap(), s);
        let none: LevyModel =
            serde_json::from_str(r#"{"drift":1,"gaussian":0,"kill":1,"jumps":{"family":"none"}}"#).unwrap();
        assert_eq!(none.jumps, JumpSpec::None);
        assert_eq!(m.hash().len(), 64);
    }

    fn arb_model() -> impl Strategy<Value = LevyModel> {
        let jumps = prop_oneof![
            Just(JumpSpec::None),
            (0.0..3.0, 0.5..5.0, 0.0..3.0, 0.5..5.0).prop_map(|(a, b, c, d)| JumpSpec::ExponentialTwoSided {
                lambda_plus: a,
                eta_plus: b,
                lambda_minus: c,
                eta_minus: d
            }),
            (0.1..2.0, 0.1..0.9, 0.5..3.0).prop_map(|(c, alpha, gamma)| JumpSpec::TiltedStableTail { c, alpha, gamma }),
            (0.1..2.0, 1.1..1.9, 0.5..3.0)
                .prop_map(|(c, alpha, gamma)| JumpSpec::SpectrallyNegativeTemperedStable { c, alpha, gamma }),
        ];
        (-2.0..2.0, 0.0..2.0, jumps, 0.0..2.0).prop_map(|(b, s2, j, q)| LevyModel::new(b, s2, j, q).unwrap())
    }

    proptest! {
        #[test]
        fn exponent_at_zero_is_minus_kill(m in arb_model()) {
            prop_assert_eq!(m.eval(0.0).unwrap(), -m.kill);
        }

        #[test]
        fn exponent_is_convex(m in arb_model()) {
            let (lo, hi) = m.strip();
            let (a, b) = (lo.max(-3.0) + 0.05, hi.min(3.0) - 0.05);
            let defect = m.exponent().convexity_defect(a, b, 40).unwrap();
            prop_assert!(defect < 1e-9, "defect {}", defect);
        }

        #[test]
        fn tbeta_composes(m in arb_model(), f1 in 0.05..0.45f64, f2 in 0.05..0.45f64) {
            let psi = m.exponent();
            let hi = psi.strip().1.min(4.0);
            let (b1, b2) = (f1 * hi, f2 * hi);
            let twice = tbeta_transform(&tbeta_transform(&psi, b1).unwrap(), b2).unwrap();
            let (lo, top) = twice.strip();
            for i in 1..10 {
                let s = lo + (top.min(3.0) - lo) * i as f64 / 10.0;
                let direct = s / (s + b1 + b2) * psi.eval(s + b1 + b2).unwrap();
                let v = twice.eval(s).unwrap();
                prop_assert!((v - direct).abs() <= 1e-12 * direct.abs().max(1e-12), "{} vs {}", v, direct);
            }
        }

        #[test]
        fn transformed_mean_negative_below_beta_star(m in arb_model(), f in 0.05..0.95f64) {
            prop_assume!(m.kill > 0.01);
            let psi = m.exponent();
            let bs = beta_star(&psi, m.beta_plus_default()).unwrap();
            let beta = f * bs.value.min(5.0);
            let t = tbeta_transform(&psi, beta).unwrap();
            let h = 1e-5 * beta.min(1.0);
            let fd = (t.eval(h).unwrap() - t.eval(-h).unwrap()) / (2.0 * h);
            let mean1 = psi.eval(beta).unwrap() / beta;
            prop_assert!(mean1 < 0.0);
            prop_assert!((fd - mean1).abs() <= 1e-6 * mean1.abs().max(1e-3), "{} vs {}", fd, mean1);
        }
    }
}
