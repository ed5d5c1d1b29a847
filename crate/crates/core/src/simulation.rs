//! Monte Carlo sampling of exponential functionals and of the product of
//! independent factor functionals, with two-sample checks between them.
//!
//! Paths are driven by one ChaCha8 stream per replica, keyed by
//! `(seed, replica index)`, so results do not depend on thread scheduling.
//!
//! Between jumps the continuous part is integrated exactly when it is a pure
//! drift. With a Gaussian part the path is advanced on an adaptive grid with
//! exact Gaussian increments; each cell contributes the conditional mean of
//! `∫e^ξ` given its endpoints (the Brownian-bridge mean), so the estimator of
//! `E[I]` is unbiased and the grid only affects higher-order laws. Cells
//! start at `dt` and widen once the running integral dwarfs the current
//! `e^ξ`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, Open01, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::exponents::{beta_star, Atom, LevyModel, Side};
use crate::ladders::{factor_consistency, FactorPair, LadderExponent};
use crate::quadrature::{integrate_singular, QuadOptions};
use crate::special::ln_gamma;
use crate::stats::{ks_two_sample, KsOutcome, MeanEstimate};

pub const DEFAULT_SEED: u64 = 0xC0FFEE;
pub const DEFAULT_DT: f64 = 1e-3;
pub const DEFAULT_EPS: f64 = 1e-3;

/// Unkilled paths stop once `e^{ξ_T}/|E ξ₁|` falls below this fraction of
/// the running integral.
pub const TAIL_FRACTION: f64 = 1e-6;

const MAX_CELLS: u64 = 50_000_000;

/// Path discretisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Scheme {
    /// Exact jump times; `dt` is the smallest Brownian cell.
    ExactJumpTimes { dt: f64 },
    /// Plain Euler scheme on a uniform grid with trapezoidal integration.
    EulerGrid { dt: f64 },
    /// Jumps smaller than `eps` replaced by a Gaussian part of equal variance.
    SmallJumpSubstitution { eps: f64, dt: f64 },
}

impl Default for Scheme {
    fn default() -> Self {
        Scheme::ExactJumpTimes { dt: DEFAULT_DT }
    }
}

impl Scheme {
    /// Same scheme with `dt` and `eps` halved.
    pub fn halved(self) -> Scheme {
        match self {
            Scheme::ExactJumpTimes { dt } => Scheme::ExactJumpTimes { dt: dt / 2.0 },
            Scheme::EulerGrid { dt } => Scheme::EulerGrid { dt: dt / 2.0 },
            Scheme::SmallJumpSubstitution { eps, dt } => Scheme::SmallJumpSubstitution { eps: eps / 2.0, dt: dt / 2.0 },
        }
    }

    fn dt(self) -> f64 {
        match self {
            Scheme::ExactJumpTimes { dt } | Scheme::EulerGrid { dt } | Scheme::SmallJumpSubstitution { dt, .. } => dt,
        }
    }
}

/// `N` independent draws and how they were produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    #[serde(skip)]
    pub draws: Vec<f64>,
    pub scheme: Scheme,
    pub seed: u64,
    pub model_hash: String,
    pub n: usize,
}

impl SampleSet {
    fn new(draws: Vec<f64>, scheme: Scheme, seed: u64, model_hash: String) -> Result<Self> {
        if let Some(bad) = draws.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
            return Err(Error::Unsupported(format!("path produced a non-positive or non-finite draw ({bad})")));
        }
        let n = draws.len();
        Ok(SampleSet { draws, scheme, seed, model_hash, n })
    }

    pub fn mean(&self) -> MeanEstimate {
        MeanEstimate::from_values(self.draws.iter().copied())
    }

    /// Write draws as little-endian `f64` to `path` and the metadata to
    /// `path` with a `.json` extension appended.
    pub fn write(&self, path: &Path) -> std::io::Result<PathBuf> {
        let mut bytes = Vec::with_capacity(8 * self.draws.len());
        for x in &self.draws {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(path, bytes)?;
        let side = sidecar_path(path);
        let mut f = fs::File::create(&side)?;
        serde_json::to_writer_pretty(&mut f, self)?;
        f.write_all(b"\n")?;
        Ok(side)
    }

    pub fn read(path: &Path) -> std::io::Result<Self> {
        let bytes = fs::read(path)?;
        let meta = fs::read(sidecar_path(path))?;
        let mut set: SampleSet = serde_json::from_slice(&meta)?;
        if bytes.len() % 8 != 0 || bytes.len() / 8 != set.n {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "draw count does not match sidecar"));
        }
        set.draws = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(set)
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Replica stream: the generator is keyed by the seed and the stream
/// number is the replica index.
pub fn replica_rng(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

/// Independent sub-seed for a tagged component of a composite experiment
/// (splitmix64 finalizer).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy)]
enum BigJump {
    Exp { sign: f64, eta: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Tempered stable above `eps`: Pareto proposal, `e^{−γ(r−ε)}` acceptance.
    Tempered { sign: f64, alpha: f64, gamma: f64, eps: f64 },
    /// Positive Lamperti jumps above `x_eps` (unscaled).
    LampertiPos { scale: f64, alpha: f64, em1: f64 },
    /// Negative Lamperti jumps above `x_eps`; `w_eps = (1−e^{−x_eps})^{−α}`.
    LampertiNeg { scale: f64, alpha: f64, w_eps: f64 },
}

impl BigJump {
    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            BigJump::Exp { sign, eta } => sign * rng.sample::<f64, _>(Exp1) / eta,
            BigJump::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            BigJump::Tempered { sign, alpha, gamma, eps } => loop {
                let u: f64 = rng.sample(Open01);
                let r = eps * u.powf(-1.0 / alpha);
                if rng.random::<f64>() < (-gamma * (r - eps)).exp() {
                    break sign * r;
                }
            },
            BigJump::LampertiPos { scale, alpha, em1 } => {
                let u: f64 = rng.sample(Open01);
                scale * (em1 * u.powf(-1.0 / alpha)).ln_1p()
            }
            BigJump::LampertiNeg { scale, alpha, w_eps } => {
                let u: f64 = rng.sample(Open01);
                let w = 1.0 + u * (w_eps - 1.0);
                scale * (-w.powf(-1.0 / alpha)).ln_1p()
            }
        }
    }
}

/// Everything one replica needs.
#[derive(Debug, Clone)]
struct PathSampler {
    mu: f64,
    sigma: f64,
    kill: f64,
    mean: f64,
    rate: f64,
    /// Cumulative rates with their jump laws.
    jumps: Vec<(f64, BigJump)>,
    dt: f64,
    h_max: f64,
    /// `√12·δ/σ` with `δ = dt`: cells are sized so that the bridge
    /// fluctuation they ignore stays below `δ` times the integral.
    width_k: f64,
    /// Typical size of the remaining functional in units of `e^ξ`, added to
    /// the running integral when sizing cells: `1/(q + |Eξ₁| + σ²)`.
    r0: f64,
    euler: bool,
}

/// `∫_{ε ≤ |y| < 1} yΠ(dy)` and `∫_{|y| < ε} y²Π(dy)` for one atom.
fn band_moments(atom: &Atom, eps: f64) -> Result<(f64, f64)> {
    let opts = QuadOptions { rel_tol: 1e-10, abs_tol: 1e-300, ..QuadOptions::default() };
    let sign = match atom.side() {
        Some(Side::Neg) => -1.0,
        _ => 1.0,
    };
    let dens = |r: f64| atom.density(sign * r);
    let first = if eps < 1.0 {
        integrate_singular(|r, _, _| r * dens(r), eps, 1.0, opts)?.value
    } else {
        0.0
    };
    let second = integrate_singular(|r, _, _| r * r * dens(r), 0.0, eps, opts)?.value;
    Ok((sign * first, second))
}

impl PathSampler {
    fn build(model: &LevyModel, scheme: Scheme) -> Result<(Self, Scheme)> {
        model.validate()?;
        let dt = scheme.dt();
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::ParameterViolation(format!("dt must be positive, got {dt}")));
        }
        let atoms = model.jumps.atoms();
        let infinite = atoms.iter().any(|a| a.rate().is_none());
        let (eps, effective) = match scheme {
            Scheme::SmallJumpSubstitution { eps, .. } => (eps, scheme),
            Scheme::ExactJumpTimes { dt } if infinite => {
                (DEFAULT_EPS, Scheme::SmallJumpSubstitution { eps: DEFAULT_EPS, dt })
            }
            _ => (DEFAULT_EPS, scheme),
        };
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::ParameterViolation(format!("eps must lie in (0, 1), got {eps}")));
        }
        if model.kill == 0.0 && !(model.mean() < 0.0) {
            return Err(Error::UnkilledNonDrifting { mean: model.mean() });
        }

        let mut mu = model.drift;
        let mut var = model.gaussian;
        let mut total = 0.0;
        let mut jumps = vec![];
        for atom in &atoms {
            let (rate, law) = match (atom, atom.rate()) {
                (&Atom::Exp { side, rate, eta }, _) => {
                    mu -= atom.small_mean();
                    let sign = if side == Side::Pos { 1.0 } else { -1.0 };
                    (rate, BigJump::Exp { sign, eta })
                }
                (&Atom::Uniform { rate, lo, hi }, _) => {
                    mu -= atom.small_mean();
                    (rate, BigJump::Uniform { lo, hi })
                }
                (&Atom::Ts { side, alpha, gamma, .. }, None) => {
                    let (m1, m2) = band_moments(atom, eps)?;
                    mu -= m1;
                    var += m2;
                    let (sign, rate) = match side {
                        Side::Pos => (1.0, atom.tail_pos(eps)),
                        Side::Neg => (-1.0, atom.tail_neg(eps)),
                    };
                    (rate, BigJump::Tempered { sign, alpha, gamma, eps })
                }
                (&Atom::Lamperti { side, alpha, scale, .. }, None) => {
                    let (m1, m2) = band_moments(atom, eps)?;
                    mu -= m1;
                    var += m2;
                    let x = eps / scale;
                    match side {
                        Side::Pos => (atom.tail_pos(eps), BigJump::LampertiPos { scale, alpha, em1: x.exp_m1() }),
                        Side::Neg => (
                            atom.tail_neg(eps),
                            BigJump::LampertiNeg { scale, alpha, w_eps: (-(-x).exp_m1()).powf(-alpha) },
                        ),
                    }
                }
                _ => return Err(Error::Unsupported("simulation of transformed jump measures".into())),
            };
            if rate > 0.0 {
                total += rate;
                jumps.push((total, law));
            }
        }
        let sigma = var.sqrt();
        let mut h_max: f64 = 1.0;
        if var > 0.0 {
            h_max = h_max.min(0.25 / var);
        }
        if mu != 0.0 {
            h_max = h_max.min(0.5 / mu.abs());
        }
        let h_max = h_max.max(dt);
        let width_k = if sigma > 0.0 { 12f64.sqrt() * dt / sigma } else { 0.0 };
        let euler = matches!(scheme, Scheme::EulerGrid { .. });
        Ok((
            PathSampler {
                mu,
                sigma,
                kill: model.kill,
                mean: model.mean(),
                rate: total,
                jumps,
                dt,
                h_max,
                width_k,
                r0: 1.0 / (model.kill + model.mean().abs() + var),
                euler,
            },
            effective,
        ))
    }

    fn jump<R: Rng>(&self, rng: &mut R) -> f64 {
        let u = rng.random::<f64>() * self.rate;
        let law = self.jumps.iter().find(|(c, _)| u < *c).unwrap_or(self.jumps.last().unwrap()).1;
        law.sample(rng)
    }

    fn should_stop(&self, x: f64, a: f64) -> bool {
        self.kill == 0.0 && x.exp() < TAIL_FRACTION * self.mean.abs() * a
    }

    /// One draw of `∫₀^{e_q} e^{ξ_t} dt`, or `None` if the cell budget ran out.
    fn path<R: Rng>(&self, rng: &mut R) -> Option<f64> {
        let horizon = if self.kill > 0.0 { rng.sample::<f64, _>(Exp1) / self.kill } else { f64::INFINITY };
        if self.euler {
            return self.euler_path(rng, horizon);
        }
        let (mut t, mut x, mut a) = (0.0, 0.0_f64, 0.0);
        let mut cells = 0u64;
        loop {
            let next = if self.rate > 0.0 { t + rng.sample::<f64, _>(Exp1) / self.rate } else { f64::INFINITY };
            let end = next.min(horizon);
            if self.sigma == 0.0 {
                if end.is_infinite() {
                    // Unkilled, no further jumps: ξ is a negative drift.
                    return Some(a + x.exp() / self.mu.abs());
                }
                let tau = end - t;
                let z = self.mu * tau;
                a += x.exp() * if z == 0.0 { tau } else { z.exp_m1() / self.mu };
                x += z;
            } else if self.diffuse(rng, &mut x, &mut a, end - t, &mut cells)? {
                return Some(a);
            }
            if end == horizon {
                return Some(a);
            }
            t = end;
            x += self.jump(rng);
            if self.should_stop(x, a) {
                return Some(a);
            }
        }
    }

    /// Advance the diffusive part by `dur` (possibly infinite). Returns
    /// `Some(true)` when the unkilled stopping rule fired.
    fn diffuse<R: Rng>(&self, rng: &mut R, x: &mut f64, a: &mut f64, dur: f64, cells: &mut u64) -> Option<bool> {
        let mut left = dur;
        let v_coef = 0.5 * self.sigma * self.sigma;
        let mut ex = x.exp();
        while left > 0.0 {
            *cells += 1;
            if *cells > MAX_CELLS {
                return None;
            }
            let r = *a / ex + self.r0;
            // Past r = 1e3 a cell adds < 1e−3·h of the integral and the cap
            // only costs time.
            let cap = self.h_max * (r * 1e-3).max(1.0);
            let mut h = (self.width_k * r).powi(2).cbrt().clamp(self.dt, cap);
            let last = h >= left;
            if last {
                h = left;
            }
            let z: f64 = rng.sample(StandardNormal);
            let d = self.mu * h + self.sigma * h.sqrt() * z;
            let (mean, growth) = bridge_mean(d, v_coef * h);
            *a += ex * h * mean;
            *x += d;
            ex *= growth;
            left = if last { 0.0 } else { left - h };
            if self.kill == 0.0 && ex < TAIL_FRACTION * self.mean.abs() * *a {
                return Some(true);
            }
        }
        Some(false)
    }

    fn euler_path<R: Rng>(&self, rng: &mut R, horizon: f64) -> Option<f64> {
        let (mut t, mut x, mut a) = (0.0, 0.0_f64, 0.0);
        let mut next = if self.rate > 0.0 { rng.sample::<f64, _>(Exp1) / self.rate } else { f64::INFINITY };
        for _ in 0..MAX_CELLS {
            let h = self.dt.min(horizon - t);
            let mut d = self.mu * h;
            if self.sigma > 0.0 {
                d += self.sigma * h.sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
            while next <= t + h {
                d += self.jump(rng);
                next += rng.sample::<f64, _>(Exp1) / self.rate;
            }
            a += 0.5 * h * (x.exp() + (x + d).exp());
            x += d;
            t += h;
            if t >= horizon || self.should_stop(x, a) {
                return Some(a);
            }
        }
        None
    }
}

const BRIDGE_J: usize = 20;
const BRIDGE_K: usize = 16;

/// `T[j][k] = ∫_{−1/2}^{1/2} u^{2j}(1/4 − u²)^k du / ((2j)! k!)`
/// `= 2^{−2j−2k−1} B(j + 1/2, k + 1) / ((2j)! k!)`.
fn bridge_table() -> &'static [[f64; BRIDGE_K]; BRIDGE_J] {
    static TABLE: OnceLock<[[f64; BRIDGE_K]; BRIDGE_J]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [[0.0; BRIDGE_K]; BRIDGE_J];
        for (j, row) in t.iter_mut().enumerate() {
            for (k, v) in row.iter_mut().enumerate() {
                let (jf, kf) = (j as f64, k as f64);
                let ln = -(2.0 * jf + 2.0 * kf + 1.0) * std::f64::consts::LN_2 + ln_gamma(jf + 0.5) + ln_gamma(kf + 1.0)
                    - ln_gamma(jf + kf + 1.5)
                    - ln_gamma(2.0 * jf + 1.0)
                    - ln_gamma(kf + 1.0);
                *v = ln.exp();
            }
        }
        t
    })
}

/// `(∫₀¹ exp(dw + v w(1−w)) dw, e^d)`: the Brownian-bridge mean of one
/// cell relative to `e^{ξ}` at its left end, and the growth factor.
///
/// With `u = w − 1/2` the integral is `e^{d/2} Σ_{j,k} d^{2j} v^k T[j][k]`.
/// Outside the range where the double series is short, 16-point
/// Gauss–Legendre on each half of the cell is used instead.
fn bridge_mean(d: f64, v: f64) -> (f64, f64) {
    let half = (0.5 * d).exp();
    let t = bridge_table();
    if d.abs() <= 2.0 && v <= 0.25 {
        // Fixed 8×8 block: the dropped terms are below 1e−14 relative here.
        let d2 = d * d;
        let mut s = 0.0;
        for row in t[..8].iter().rev() {
            let mut c = 0.0;
            for &coef in row[..8].iter().rev() {
                c = c * v + coef;
            }
            s = s * d2 + c;
        }
        return (half * s, half * half);
    }
    if d.abs() <= 6.0 && v <= 2.0 {
        let d2 = d * d;
        let (mut s, mut dp) = (0.0, 1.0);
        for row in t.iter() {
            let (mut c, mut vp) = (0.0, 1.0);
            for &coef in row.iter() {
                let term = coef * vp;
                c += term;
                if term <= 1e-17 * c {
                    break;
                }
                vp *= v;
            }
            let term = c * dp;
            s += term;
            if term <= 1e-17 * s {
                break;
            }
            dp *= d2;
        }
        return (half * s, half * half);
    }
    let f = |w: f64| (d * w + v * w * (1.0 - w)).exp();
    let mut s = 0.0;
    for (lo, hi) in [(0.0, 0.5), (0.5, 1.0)] {
        s += gauss_legendre_16(&f, lo, hi);
    }
    (s, half * half)
}

fn gauss_legendre_16<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    const X: [f64; 8] = [
        0.095_012_509_837_637_44,
        0.281_603_550_779_258_9,
        0.458_016_777_657_227_4,
        0.617_876_244_402_643_8,
        0.755_404_408_355_003,
        0.865_631_202_387_831_7,
        0.944_575_023_073_232_6,
        0.989_400_934_991_649_9,
    ];
    const W: [f64; 8] = [
        0.189_450_610_455_068_5,
        0.182_603_415_044_923_6,
        0.169_156_519_395_002_5,
        0.149_595_988_816_576_7,
        0.124_628_971_255_533_9,
        0.095_158_511_682_492_78,
        0.062_253_523_938_647_89,
        0.027_152_459_411_754_09,
    ];
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let mut s = 0.0;
    for i in 0..8 {
        s += W[i] * (f(c - h * X[i]) + f(c + h * X[i]));
    }
    s * h
}

/// `N` draws of `I = ∫₀^{e_q} e^{ξ_t} dt`.
pub fn sample_functional(model: &LevyModel, n: usize, scheme: Scheme, seed: u64) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::ParameterViolation("sample size must be positive".into()));
    }
    let (sampler, effective) = PathSampler::build(model, scheme)?;
    let draws: Option<Vec<f64>> = (0..n as u64)
        .into_par_iter()
        .map(|i| sampler.path(&mut replica_rng(seed, i)))
        .collect();
    let draws = draws.ok_or_else(|| Error::Unsupported(format!("a path exceeded {MAX_CELLS} cells")))?;
    SampleSet::new(draws, effective, seed, model.hash())
}

/// Law of one factor functional, with closed forms where they exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "kebab-case")]
pub enum FactorLaw {
    /// `e_q`: the functional of a pure killing exponent `−q`.
    Exponential { rate: f64 },
    /// `scale·B` with `B ~ Beta(1, γ)`: the functional of `−(q + δs)` is
    /// `(1 − e^{−δe_q})/δ`, i.e. `γ = q/δ`, `scale = 1/δ`.
    Beta { gamma: f64, scale: f64 },
    /// Functional of a Lévy model, sampled path by path.
    Functional { model: LevyModel },
}

impl FactorLaw {
    pub fn uniform() -> Self {
        FactorLaw::Beta { gamma: 1.0, scale: 1.0 }
    }

    /// `I_{φ_{q−}}` for a descending factor given as a triplet.
    pub fn descending(minus: &LadderExponent) -> Result<Self> {
        let no_jumps = minus.measure().map(|m| m.total_rate() == Some(0.0)).unwrap_or(false);
        match minus.drift() {
            Some(d) if no_jumps && d == 0.0 => Ok(FactorLaw::Exponential { rate: minus.kill() }),
            Some(d) if no_jumps => Ok(FactorLaw::Beta { gamma: minus.kill() / d, scale: 1.0 / d }),
            _ => Ok(FactorLaw::Functional { model: minus.descending_model()? }),
        }
    }

    /// Closed-form density, when the law has one.
    pub fn density(&self) -> Option<crate::distribution::Density> {
        use crate::distribution::Density;
        match *self {
            FactorLaw::Exponential { rate } => Some(Density::new(move |x| rate * (-rate * x).exp(), (0.0, f64::INFINITY))),
            FactorLaw::Beta { gamma, scale } => {
                Some(Density::new(move |x| gamma / scale * (1.0 - x / scale).powf(gamma - 1.0), (0.0, scale)))
            }
            FactorLaw::Functional { .. } => None,
        }
    }

    /// `I_{ψ^{q+}}` with `ψ^{q+}(s) = sφ_{q+}(s)`.
    pub fn ascending(plus: &LadderExponent) -> Result<Self> {
        Ok(FactorLaw::Functional { model: plus.psi_plus_model()? })
    }

    fn draws(&self, n: usize, scheme: Scheme, seed: u64) -> Result<Vec<f64>> {
        let closed = |f: &(dyn Fn(&mut ChaCha8Rng) -> f64 + Sync)| -> Vec<f64> {
            (0..n as u64).into_par_iter().map(|i| f(&mut replica_rng(seed, i))).collect()
        };
        match *self {
            FactorLaw::Exponential { rate } => {
                if !(rate > 0.0) {
                    return Err(Error::ParameterViolation(format!("exponential rate must be positive, got {rate}")));
                }
                Ok(closed(&|r| r.sample::<f64, _>(Exp1) / rate))
            }
            FactorLaw::Beta { gamma, scale } => {
                if !(gamma > 0.0 && scale > 0.0) {
                    return Err(Error::ParameterViolation(format!("Beta(1, {gamma}) scaled by {scale}")));
                }
                // 1 − U^{1/γ}, computed without cancellation.
                Ok(closed(&|r| -scale * (r.sample::<f64, _>(Open01).ln() / gamma).exp_m1()))
            }
            FactorLaw::Functional { ref model } => Ok(sample_functional(model, n, scheme, seed)?.draws),
        }
    }
}

/// `N` draws of the product `I_{φ_{q−}} × I_{ψ^{q+}}` of independent factors.
pub fn sample_factor_rhs(
    minus: &FactorLaw,
    plus: &FactorLaw,
    n: usize,
    scheme: Scheme,
    seed: u64,
) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::ParameterViolation("sample size must be positive".into()));
    }
    let a = minus.draws(n, scheme, derive_seed(seed, 1))?;
    let b = plus.draws(n, scheme, derive_seed(seed, 2))?;
    let draws = a.iter().zip(&b).map(|(x, y)| x * y).collect();
    let doc = serde_json::to_vec(&(minus, plus)).expect("factor laws serialize");
    SampleSet::new(draws, scheme, seed, hex::encode(Sha256::digest(&doc)))
}

/// One statistic of a [`TestReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatCheck {
    pub statistic: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub checks: Vec<StatCheck>,
    pub ks: KsOutcome,
    pub pass: bool,
    pub n: usize,
    pub seeds: Vec<u64>,
    pub model_hash: String,
    pub scheme: Scheme,
    /// Relative deviation between the exponent and the composed factors.
    pub factor_deviation: f64,
}

pub const KS_LEVEL: f64 = 0.01;
pub const Z_LIMIT: f64 = 3.0;
/// Factors deviating from the exponent by more than this are rejected.
pub const CONSISTENCY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorizationOptions {
    pub n: usize,
    pub seed: u64,
    pub scheme: Scheme,
    /// Reject factors whose product does not reproduce the exponent.
    /// Negative controls switch this off to reach the statistical test.
    pub enforce_consistency: bool,
}

impl FactorizationOptions {
    pub fn new(n: usize, seed: u64) -> Self {
        FactorizationOptions { n, seed, scheme: Scheme::default(), enforce_consistency: true }
    }
}

/// KS check of two samples plus moment z-checks at the given orders.
pub fn compare_samples(a: &[f64], b: &[f64], orders: &[f64]) -> (KsOutcome, Vec<StatCheck>) {
    let ks = ks_two_sample(a, b);
    let mut checks = vec![StatCheck {
        statistic: "ks".into(),
        value: ks.p_value,
        threshold: KS_LEVEL,
        pass: ks.p_value > KS_LEVEL,
    }];
    for &m in orders {
        let z = MeanEstimate::power(a, m).z_against(&MeanEstimate::power(b, m)).abs();
        checks.push(StatCheck { statistic: format!("moment-z({m})"), value: z, threshold: Z_LIMIT, pass: z < Z_LIMIT });
    }
    (ks, checks)
}

/// Two-sample test of `I_{Ψ_q} = I_{φ_{q−}} × I_{ψ^{q+}}`.
///
/// Moment checks use orders `m ∈ {1,2,3}` with `2m < β*_q`, so that the
/// sample means have finite variance.
pub fn test_factorization(model: &LevyModel, pair: &FactorPair, opts: FactorizationOptions) -> Result<TestReport> {
    let psi = model.exponent();
    let deviation = factor_consistency(&psi, pair, 10.0, 200)?;
    if opts.enforce_consistency && !(deviation <= CONSISTENCY_TOL) {
        return Err(Error::InconsistentFactors { deviation });
    }
    let lhs = sample_functional(model, opts.n, opts.scheme, opts.seed)?;
    let minus = FactorLaw::descending(&pair.minus)?;
    let plus = FactorLaw::ascending(&pair.plus)?;
    let rhs_seed = derive_seed(opts.seed, 0x5248_5300);
    let rhs = sample_factor_rhs(&minus, &plus, opts.n, opts.scheme, rhs_seed)?;
    let orders: Vec<f64> = match beta_star(&psi, model.beta_plus_default()) {
        Ok(b) => [1.0, 2.0, 3.0].into_iter().filter(|m| 2.0 * m < b.value).collect(),
        Err(_) => vec![],
    };
    let (ks, checks) = compare_samples(&lhs.draws, &rhs.draws, &orders);
    Ok(TestReport {
        pass: checks.iter().all(|c| c.pass),
        checks,
        ks,
        n: opts.n,
        seeds: vec![opts.seed, derive_seed(rhs_seed, 1), derive_seed(rhs_seed, 2)],
        model_hash: model.hash(),
        scheme: lhs.scheme,
        factor_deviation: deviation,
    })
}

/// Means at a scheme and at its halving, with the combined standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HalvingCheck {
    pub coarse: MeanEstimate,
    pub fine: MeanEstimate,
    pub z: f64,
    pub pass: bool,
}

/// Scheme convergence control: halving `dt` (and `eps`) must move the
/// empirical mean by less than two combined standard errors.
pub fn halving_check(model: &LevyModel, scheme: Scheme, n: usize, seed: u64) -> Result<HalvingCheck> {
    let coarse = sample_functional(model, n, scheme, seed)?;
    let fine = sample_functional(model, n, coarse.scheme.halved(), seed)?;
    let (c, f) = (coarse.mean(), fine.mean());
    let z = c.z_against(&f).abs();
    Ok(HalvingCheck { coarse: c, fine: f, z, pass: z < 2.0 })
}

/// Length-biased reweighting: samples of the `T_β` model weighted by
/// `x^{−β}` against direct samples of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthBiasCheck {
    pub ks: KsOutcome,
    pub threshold: f64,
    pub pass: bool,
}

pub fn length_biased_check(model: &LevyModel, beta: f64, n: usize, seed: u64) -> Result<LengthBiasCheck> {
    let t = model.tbeta_triplet(beta)?;
    let direct = sample_functional(model, n, Scheme::default(), derive_seed(seed, 1))?;
    let biased = sample_functional(&t, n, Scheme::default(), derive_seed(seed, 2))?;
    let w: Vec<f64> = biased.draws.iter().map(|x| x.powf(-beta)).collect();
    let ks = crate::stats::ks_two_sample_weighted(&biased.draws, &w, &direct.draws);
    Ok(LengthBiasCheck { ks, threshold: KS_LEVEL, pass: ks.p_value > KS_LEVEL })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exponents::JumpSpec;
    use crate::ladders::{rational_factors, spectrally_onesided_factors, LadderSide};
    use crate::special::exp_int_e1;
    use crate::stats::ks_one_sample;
    use proptest::prelude::*;

    fn drift_model() -> LevyModel {
        LevyModel::new(1.0, 0.0, JumpSpec::None, 1.0).unwrap()
    }

    fn brownian_killed() -> LevyModel {
        LevyModel::new(-0.5, 1.0, JumpSpec::None, 1.0).unwrap()
    }

    fn two_sided() -> LevyModel {
        let jumps = JumpSpec::ExponentialTwoSided { lambda_plus: 1.0, eta_plus: 4.0, lambda_minus: 1.0, eta_minus: 2.0 };
        LevyModel::from_effective_drift(-1.0, 0.0, jumps, 1.0).unwrap()
    }

    #[test]
    fn bridge_mean_against_quadrature() {
        for &d in &[0.0, 1e-3, -0.4, 1.99, 2.5, -5.9, 6.5, -30.0] {
            for &v in &[0.0, 1e-4, 0.2, 0.25, 0.3, 1.9, 3.0] {
                let (m, g) = bridge_mean(d, v);
                let q = crate::quadrature::integrate(
                    |w| (d * w + v * w * (1.0 - w)).exp(),
                    0.0,
                    1.0,
                    QuadOptions::rel(1e-14),
                )
                .unwrap()
                .value;
                assert!(((m - q) / q).abs() < 1e-12, "d={d} v={v}: {m} vs {q}");
                assert!(((g - d.exp()) / d.exp()).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn drift_subordinator_law() {
        let n = 100_000;
        let s = sample_functional(&drift_model(), n, Scheme::default(), 7).unwrap();
        let ks = ks_one_sample(&s.draws, |x| 1.0 - 1.0 / (1.0 + x));
        assert!(ks.statistic < 1.63 / (n as f64).sqrt(), "{ks:?}");
        assert_eq!(s.n, n);
        assert_eq!(s.seed, 7);
    }

    #[test]
    fn pure_kill_is_the_lifetime() {
        let m = LevyModel::new(0.0, 0.0, JumpSpec::None, 1.0).unwrap();
        let s = sample_functional(&m, 1000, Scheme::default(), 3).unwrap();
        for (i, x) in s.draws.iter().enumerate() {
            let e: f64 = rand::Rng::sample(&mut replica_rng(3, i as u64), Exp1);
            assert_eq!(*x, e);
        }
    }

    #[test]
    fn brownian_reciprocal_mean() {
        // 1/I is exponential with mean 1/2 for ψ(s) = s²/2 − s/2.
        let m = LevyModel::new(-0.5, 1.0, JumpSpec::None, 0.0).unwrap();
        let s = sample_functional(&m, 100_000, Scheme::default(), 11).unwrap();
        let inv = MeanEstimate::power(&s.draws, -1.0);
        assert!(inv.z_exact(0.5).abs() < 3.0, "{inv:?}");
        let ks = ks_one_sample(&s.draws, |x| (-2.0 / x).exp());
        assert!(ks.p_value > 0.01, "{ks:?}");
    }

    #[test]
    fn unkilled_needs_negative_mean() {
        let m = LevyModel::new(0.5, 1.0, JumpSpec::None, 0.0).unwrap();
        assert!(matches!(
            sample_functional(&m, 10, Scheme::default(), 0),
            Err(Error::UnkilledNonDrifting { .. })
        ));
    }

    #[test]
    fn deterministic_streams() {
        let m = two_sided();
        let a = sample_functional(&m, 2000, Scheme::default(), 5).unwrap();
        let b = sample_functional(&m, 2000, Scheme::default(), 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.draws, b.draws);
        let c = sample_functional(&m, 2000, Scheme::default(), 6).unwrap();
        assert_ne!(a.draws, c.draws);
        // A shorter run is a prefix of a longer one.
        let d = sample_functional(&m, 500, Scheme::default(), 5).unwrap();
        assert_eq!(&a.draws[..500], &d.draws[..]);
    }

    #[test]
    fn closed_form_factor_densities() {
        let opts = crate::quadrature::QuadOptions::rel(1e-10);
        for law in [FactorLaw::Exponential { rate: 2.0 }, FactorLaw::Beta { gamma: 1.5, scale: 3.0 }, FactorLaw::uniform()] {
            let d = law.density().unwrap();
            assert!((d.integrate(|_| 1.0, opts).unwrap() - 1.0).abs() < 1e-9, "{law:?}");
        }
    }

    #[test]
    fn uniform_times_exponential() {
        // Density ∫₀¹ e^{−x/y}/y dy = E₁(x); CDF x E₁(x) + 1 − e^{−x}.
        let n = 100_000;
        let s = sample_factor_rhs(&FactorLaw::uniform(), &FactorLaw::Exponential { rate: 1.0 }, n, Scheme::default(), 9)
            .unwrap();
        let ks = ks_one_sample(&s.draws, |x| x * exp_int_e1(x) + 1.0 - (-x).exp());
        assert!(ks.p_value > 0.01, "{ks:?}");
        let uni = crate::distribution::Density::new(|_| 1.0, (0.0, 1.0));
        let ex = crate::distribution::Density::new(|y| (-y).exp(), (0.0, f64::INFINITY));
        let prod = crate::distribution::density_product(&uni, &ex, &[0.3, 1.0, 2.5]).unwrap();
        for (x, v) in [0.3, 1.0, 2.5].iter().zip(prod) {
            assert!((v - exp_int_e1(*x)).abs() < 1e-9);
        }
    }

    #[test]
    fn beta_one_one_is_uniform() {
        let d = FactorLaw::uniform().draws(50_000, Scheme::default(), 1).unwrap();
        let ks = ks_one_sample(&d, |x| x.clamp(0.0, 1.0));
        assert!(ks.p_value > 0.01);
        // Beta(1, 3)
        let d = FactorLaw::Beta { gamma: 3.0, scale: 1.0 }.draws(50_000, Scheme::default(), 2).unwrap();
        let ks = ks_one_sample(&d, |x| 1.0 - (1.0 - x).powi(3));
        assert!(ks.p_value > 0.01);
    }

    #[test]
    fn subordinator_factorization_by_sampling() {
        // Ψ_q(s) = s − 1 = −(s − 1)(−1): e₁ times the functional of s² − s.
        let m = drift_model();
        let plus = LadderExponent::from_triplet(LadderSide::Ascending, 1.0, 1.0, JumpSpec::None).unwrap();
        let minus = LadderExponent::from_triplet(LadderSide::Descending, 1.0, 0.0, JumpSpec::None).unwrap();
        let lhs = sample_functional(&m, 50_000, Scheme::default(), 21).unwrap();
        let mf = FactorLaw::descending(&minus).unwrap();
        assert_eq!(mf, FactorLaw::Exponential { rate: 1.0 });
        let rhs = sample_factor_rhs(&mf, &FactorLaw::ascending(&plus).unwrap(), 50_000, Scheme::default(), 22).unwrap();
        let ks = ks_two_sample(&lhs.draws, &rhs.draws);
        assert!(ks.p_value > 0.01, "{ks:?}");
    }

    #[test]
    fn factorization_small_runs() {
        let m = two_sided();
        let pair = rational_factors(&m).unwrap();
        let r = test_factorization(&m, &pair, FactorizationOptions::new(20_000, 1)).unwrap();
        assert!(r.pass, "{r:?}");
        let m = brownian_killed();
        let pair = spectrally_onesided_factors(&m).unwrap();
        assert!((pair.gamma_q.unwrap() - 2.0).abs() < 1e-12);
        let r = test_factorization(&m, &pair, FactorizationOptions::new(20_000, 2)).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn inconsistent_factors_rejected() {
        let m = brownian_killed();
        let pair = spectrally_onesided_factors(&m).unwrap();
        let other = spectrally_onesided_factors(&LevyModel::new(-0.4, 1.0, JumpSpec::None, 1.0).unwrap()).unwrap();
        let bad = FactorPair { plus: other.plus, ..pair };
        let r = test_factorization(&m, &bad, FactorizationOptions::new(100, 1));
        assert!(matches!(r, Err(Error::InconsistentFactors { .. })));
    }

    #[test]
    fn halving_on_shipped_models() {
        let ts = LevyModel::from_effective_drift(
            -0.3,
            0.0,
            JumpSpec::TiltedStableTail { c: 0.7, alpha: 0.4, gamma: 1.5 },
            1.0,
        )
        .unwrap();
        let cases = [
            (drift_model(), Scheme::default()),
            (brownian_killed(), Scheme::default()),
            (two_sided(), Scheme::default()),
            (ts, Scheme::SmallJumpSubstitution { eps: 1e-2, dt: 1e-3 }),
        ];
        for (i, (m, s)) in cases.iter().enumerate() {
            let h = halving_check(m, *s, 20_000, 40 + i as u64).unwrap();
            assert!(h.pass, "case {i}: {h:?}");
        }
    }

    #[test]
    fn euler_grid_close_to_exact() {
        let m = brownian_killed();
        let a = sample_functional(&m, 20_000, Scheme::EulerGrid { dt: 1e-3 }, 1).unwrap().mean();
        let b = sample_functional(&m, 20_000, Scheme::default(), 2).unwrap().mean();
        assert!(a.z_against(&b).abs() < 3.0, "{a:?} {b:?}");
    }

    #[test]
    fn length_biased_reweighting() {
        let r = length_biased_check(&drift_model(), 0.5, 50_000, 8).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn infinite_activity_defaults_to_substitution() {
        let m = LevyModel::from_effective_drift(0.2, 0.0, JumpSpec::TiltedStableTail { c: 0.7, alpha: 0.4, gamma: 1.5 }, 1.0)
            .unwrap();
        let s = sample_functional(&m, 10, Scheme::default(), 0).unwrap();
        assert_eq!(s.scheme, Scheme::SmallJumpSubstitution { eps: DEFAULT_EPS, dt: DEFAULT_DT });
        // E[I] = 1/(q − Ψ(1)) for a killed process when Ψ_q(1) < 0.
        let psi1 = m.eval(1.0).unwrap();
        let s = sample_functional(&m, 40_000, Scheme::default(), 4).unwrap();
        assert!(s.mean().z_exact(-1.0 / psi1).abs() < 3.0, "{:?} vs {}", s.mean(), -1.0 / psi1);
    }

    #[test]
    fn binary_round_trip() {
        let s = sample_functional(&two_sided(), 100, Scheme::default(), 1).unwrap();
        let dir = std::env::temp_dir().join(format!("expfunc-sim-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let p = dir.join("draws.f64");
        let side = s.write(&p).unwrap();
        assert!(side.ends_with("draws.f64.json"));
        assert_eq!(fs::metadata(&p).unwrap().len(), 800);
        let back = SampleSet::read(&p).unwrap();
        assert_eq!(back, s);
        fs::remove_dir_all(dir).ok();
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn draws_positive_and_reproducible(d in -1.0..1.0f64, s2 in 0.0..1.0f64, q in 0.2..2.0f64, seed in any::<u64>()) {
            let m = LevyModel::new(d, s2, JumpSpec::None, q).unwrap();
            let a = sample_functional(&m, 64, Scheme::default(), seed).unwrap();
            prop_assert!(a.draws.iter().all(|x| *x > 0.0 && x.is_finite()));
            let b = sample_functional(&m, 64, Scheme::default(), seed).unwrap();
            prop_assert_eq!(a.draws, b.draws);
        }
    }
}
