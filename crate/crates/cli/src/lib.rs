//! Batch front end: load model documents, run one library operation, and
//! write CSV or JSON artifacts that carry the metadata needed to rerun it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use expfunc::distribution::{
    density_product, density_series_subordinator, density_spectrally_negative, functional_density_closed_form,
    gamma_family_densities,
    moments_descending, negative_moments_from_ascending, negative_moments_spectrally_positive, Density, MomentLadder,
    SeriesMode,
};
use expfunc::exponents::{beta_star, LevyModel};
use expfunc::ladders::{factor_consistency, rational_factors, spectrally_onesided_factors, vigon_check, FactorPair, PotentialMeasure};
use expfunc::simulation::{
    sample_functional, test_factorization, FactorLaw, FactorizationOptions, Scheme, DEFAULT_DT, DEFAULT_EPS, DEFAULT_SEED,
};
use expfunc::stable::{passage_time_law, StableParams};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Identifier of the model document schema in `schema/model.schema.json`.
pub const MODEL_SCHEMA: &str = "expfunc/model/v1";

#[derive(Debug, Parser)]
#[command(name = "expfunc", version, about = "Exponential functionals of killed Lévy processes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate the killed Laplace exponent on a grid.
    Exponent {
        #[command(subcommand)]
        op: ExponentOp,
    },
    /// Apply the T_β transform.
    Transform {
        #[command(subcommand)]
        op: TransformOp,
    },
    /// Wiener–Hopf factors of a model.
    Factorize {
        #[command(subcommand)]
        op: FactorizeOp,
    },
    /// Killed Vigon identity between the jump tail and the ladder factors.
    Vigon {
        #[command(subcommand)]
        op: VigonOp,
    },
    /// Moment ladders of the exponential functional.
    Moments {
        #[command(subcommand)]
        op: MomentsOp,
    },
    /// Density of the exponential functional.
    Density {
        #[command(subcommand)]
        op: DensityOp,
    },
    /// Draw samples of the exponential functional.
    Simulate(SimulateArgs),
    /// Statistical tests.
    Test {
        #[command(subcommand)]
        op: TestOp,
    },
    /// Stable-process first passage.
    Stable {
        #[command(subcommand)]
        op: StableOp,
    },
}

#[derive(Debug, Subcommand)]
pub enum ExponentOp {
    Eval(ModelGridArgs),
}

#[derive(Debug, Subcommand)]
pub enum TransformOp {
    Tbeta(TbetaArgs),
}

#[derive(Debug, Subcommand)]
pub enum FactorizeOp {
    /// Rational factors of a model with exponential-mixture jumps.
    Compose(FactorizeArgs),
    /// Root-based factors of a spectrally one-sided model.
    Onesided(FactorizeArgs),
}

#[derive(Debug, Subcommand)]
pub enum VigonOp {
    Check(VigonArgs),
}

#[derive(Debug, Subcommand)]
pub enum MomentsOp {
    /// Positive moments from the descending factor.
    Desc(MomentArgs),
    /// Negative moments of a spectrally positive (or ascending-factor) functional.
    Negpos(MomentArgs),
}

#[derive(Debug, Subcommand)]
pub enum DensityOp {
    /// Power series for killed subordinators.
    Series(SeriesArgs),
    /// Density of the product of two independent functionals.
    Product(ProductArgs),
    /// Density for spectrally negative models.
    Specneg(SpecnegArgs),
    /// The Gamma-ratio family with explicit expansions.
    Gamma(GammaArgs),
}

#[derive(Debug, Subcommand)]
pub enum TestOp {
    Factorization(TestArgs),
}

#[derive(Debug, Subcommand)]
pub enum StableOp {
    Passage(PassageArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelGridArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `start:stop:count`.
    #[arg(long, allow_hyphen_values = true)]
    pub grid: String,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct TbetaArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct FactorizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub grid: Option<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FactorMode {
    Compose,
    Onesided,
}

#[derive(Debug, Args)]
pub struct VigonArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub grid: String,
    #[arg(long, value_enum, default_value = "compose")]
    pub mode: FactorMode,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct MomentArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Number of moments.
    #[arg(long, default_value_t = 10)]
    pub n: usize,
    #[arg(long, value_enum)]
    pub mode: Option<FactorMode>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SeriesModeArg {
    Raw,
    Euler,
    SmallX,
    LargeX,
}

impl SeriesModeArg {
    fn series(self) -> SeriesMode {
        match self {
            SeriesModeArg::Raw => SeriesMode::Raw,
            SeriesModeArg::Euler => SeriesMode::Euler,
            SeriesModeArg::SmallX => SeriesMode::GammaFamilySmallX,
            SeriesModeArg::LargeX => SeriesMode::GammaFamilyLargeX,
        }
    }
}

#[derive(Debug, Args)]
pub struct SeriesArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub grid: String,
    #[arg(long, value_enum, default_value = "euler")]
    pub mode: SeriesModeArg,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct ProductArgs {
    /// Model whose functional has a closed-form law or is a killed
    /// subordinator; given twice.
    #[arg(long, required = true)]
    pub model: Vec<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    pub grid: String,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct SpecnegArgs {
    /// A killed model without positive jumps.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    pub grid: String,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct GammaArgs {
    #[arg(long)]
    pub alpha: f64,
    #[arg(long)]
    pub gamma: f64,
    #[arg(long = "alpha-prime")]
    pub alpha_prime: f64,
    #[arg(long, allow_hyphen_values = true)]
    pub grid: String,
    #[arg(long, value_enum, default_value = "small-x")]
    pub mode: SeriesModeArg,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SchemeArg {
    Exact,
    Euler,
    SmallJump,
}

#[derive(Debug, Args)]
pub struct SchemeArgs {
    #[arg(long, value_enum, default_value = "exact")]
    pub scheme: SchemeArg,
    #[arg(long, default_value_t = DEFAULT_DT)]
    pub dt: f64,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    pub eps: f64,
}

impl SchemeArgs {
    fn scheme(&self) -> Result<Scheme, CliError> {
        if !(self.dt > 0.0) || !(self.eps > 0.0) {
            return Err(CliError::config("--dt and --eps must be positive"));
        }
        Ok(match self.scheme {
            SchemeArg::Exact => Scheme::ExactJumpTimes { dt: self.dt },
            SchemeArg::Euler => Scheme::EulerGrid { dt: self.dt },
            SchemeArg::SmallJump => Scheme::SmallJumpSubstitution { eps: self.eps, dt: self.dt },
        })
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    /// Binary sample file; a `.json` sidecar is written next to it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value = "compose")]
    pub mode: FactorMode,
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct PassageArgs {
    #[arg(long)]
    pub alpha: f64,
    #[arg(long)]
    pub rho: f64,
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

/// A failure with a stable code; `exit_code` is 2 for bad input documents
/// and arguments, 1 for errors raised by the library.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub code: String,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    pub fn schema(message: impl Into<String>) -> Self {
        CliError { code: "SCHEMA".into(), message: message.into(), exit_code: 2 }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: "CONFIG".into(), message: message.into(), exit_code: 2 }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError { code: "IO".into(), message: format!("{}: {e}", path.display()), exit_code: 1 }
    }

    /// Machine-readable error document.
    pub fn to_json(&self) -> String {
        json!({ "error": { "code": self.code, "message": self.message } }).to_string()
    }
}

impl From<expfunc::Error> for CliError {
    fn from(e: expfunc::Error) -> Self {
        CliError { code: e.code().into(), message: e.to_string(), exit_code: 1 }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Parse `start:stop:count` into an increasing grid.
pub fn parse_grid(spec: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let bad = || CliError::config(format!("grid '{spec}' is not start:stop:count"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let start: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let stop: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let count: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if !start.is_finite() || !stop.is_finite() {
        return Err(bad());
    }
    match count {
        0 => Err(CliError::config("grid count must be at least 1")),
        1 => Ok(vec![start]),
        _ if stop > start => {
            let h = (stop - start) / (count - 1) as f64;
            Ok((0..count).map(|i| if i + 1 == count { stop } else { start + h * i as f64 }).collect())
        }
        _ => Err(CliError::config(format!("grid '{spec}' is not strictly increasing"))),
    }
}

/// Parse and validate a model document.
pub fn parse_model(text: &str) -> CliResult<LevyModel> {
    let model: LevyModel = serde_json::from_str(text).map_err(|e| CliError::schema(e.to_string()))?;
    model.validate()?;
    Ok(model)
}

pub fn load_model(path: &Path) -> CliResult<LevyModel> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_model(&text)
}

/// Canonical document: keys sorted at every level, two-space indent,
/// trailing newline.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json's default map is ordered, so going through `Value` sorts keys.
    let v = serde_json::to_value(value).expect("serializable");
    let mut s = serde_json::to_string_pretty(&v).expect("serializable");
    s.push('\n');
    s
}

/// 17 significant digits, which round-trips every f64.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else {
        format!("{x}")
    }
}

/// Provenance recorded at the top of every artifact.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Meta {
    pub command: String,
    pub version: String,
    pub model_hash: Option<String>,
    pub seed: Option<u64>,
    pub scheme: Option<Scheme>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub extra: Vec<(String, String)>,
}

impl Meta {
    fn new(command: &str) -> Self {
        Meta { command: command.into(), version: VERSION.into(), model_hash: None, seed: None, scheme: None, extra: vec![] }
    }

    fn model(mut self, m: &LevyModel) -> Self {
        self.model_hash = Some(m.hash());
        self
    }

    fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.extra.push((key.into(), value.to_string()));
        self
    }

    fn header_lines(&self) -> String {
        let mut s = String::new();
        let none = || "none".to_string();
        writeln!(s, "# command: {}", self.command).unwrap();
        writeln!(s, "# version: {}", self.version).unwrap();
        writeln!(s, "# model_hash: {}", self.model_hash.clone().unwrap_or_else(none)).unwrap();
        writeln!(s, "# seed: {}", self.seed.map(|x| x.to_string()).unwrap_or_else(none)).unwrap();
        let scheme = self.scheme.map(|x| serde_json::to_string(&x).unwrap()).unwrap_or_else(none);
        writeln!(s, "# scheme: {scheme}").unwrap();
        for (k, v) in &self.extra {
            writeln!(s, "# {k}: {v}").unwrap();
        }
        s
    }
}

/// One artifact ready to be written.
#[derive(Debug, Clone, PartialEq)]
pub enum Artifact {
    Csv { meta: Meta, columns: Vec<String>, rows: Vec<Vec<String>> },
    Json { meta: Meta, body: Value },
}

impl Artifact {
    fn csv(meta: Meta, columns: &[&str], rows: Vec<Vec<String>>) -> Self {
        Artifact::Csv { meta, columns: columns.iter().map(|c| c.to_string()).collect(), rows }
    }

    pub fn render(&self) -> String {
        match self {
            Artifact::Csv { meta, columns, rows } => {
                let mut s = meta.header_lines();
                s.push_str(&columns.join(","));
                s.push('\n');
                for r in rows {
                    s.push_str(&r.join(","));
                    s.push('\n');
                }
                s
            }
            Artifact::Json { meta, body } => {
                let mut doc = serde_json::Map::new();
                doc.insert("meta".into(), serde_json::to_value(meta).unwrap());
                doc.insert("result".into(), body.clone());
                canonical_json(&Value::Object(doc))
            }
        }
    }
}

fn num_rows(xs: &[f64], cols: &[&[f64]]) -> Vec<Vec<String>> {
    xs.iter()
        .enumerate()
        .map(|(i, &x)| std::iter::once(fmt_f64(x)).chain(cols.iter().map(|c| fmt_f64(c[i]))).collect())
        .collect()
}

fn factors(model: &LevyModel, mode: FactorMode) -> CliResult<FactorPair> {
    Ok(match mode {
        FactorMode::Compose => rational_factors(model)?,
        FactorMode::Onesided => spectrally_onesided_factors(model)?,
    })
}

fn pair_json(pair: &FactorPair, model: &LevyModel, grid: Option<&[f64]>) -> CliResult<Value> {
    let deviation = factor_consistency(&model.exponent(), pair, 10.0, 200)?;
    let mut body = json!({
        "normalization": pair.normalization,
        "gamma_q": pair.gamma_q,
        "positive_roots": pair.positive_roots,
        "negative_roots": pair.negative_roots,
        "ascending": pair.plus.to_doc(),
        "descending": pair.minus.to_doc(),
        "consistency_deviation": deviation,
    });
    if let Some(xs) = grid {
        let psi = model.exponent();
        let mut rows = vec![];
        for &s in xs {
            rows.push(json!([s, psi.eval(s)?, pair.plus.eval(s)?, pair.minus.eval(s)?]));
        }
        body["values"] = json!({ "columns": ["s", "psi", "phi_plus", "phi_minus"], "rows": rows });
    }
    Ok(body)
}

/// Density of `I`: closed form where the law is explicit, otherwise the
/// Euler-summed series of a killed subordinator. Series points that fail or
/// do not converge surface as a quadrature error.
fn functional_density(model: &LevyModel) -> CliResult<Density> {
    if let Some(d) = functional_density_closed_form(model) {
        return Ok(d);
    }
    let series = density_series_subordinator(model, SeriesMode::Euler)?;
    Ok(Density::new(
        move |x| match series.eval(x) {
            Ok(v) if v.converged => v.value,
            _ => f64::NAN,
        },
        (0.0, f64::INFINITY),
    ))
}

fn moment_rows(ladder: &MomentLadder) -> Vec<Vec<String>> {
    ladder
        .values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut r = vec![(i + 1).to_string(), fmt_f64(v)];
            if let Some(se) = &ladder.std_errors {
                r.push(fmt_f64(se[i]));
            }
            r
        })
        .collect()
}

/// Run one command and return its artifact along with the output path.
pub fn execute(cli: &Cli) -> CliResult<(Artifact, Option<PathBuf>)> {
    match &cli.command {
        Command::Exponent { op: ExponentOp::Eval(a) } => {
            let model = load_model(&a.model)?;
            let xs = parse_grid(&a.grid)?;
            let psi = model.exponent();
            let vals = xs.iter().map(|&s| psi.eval(s)).collect::<Result<Vec<_>, _>>()?;
            let meta = Meta::new("exponent eval").model(&model);
            Ok((Artifact::csv(meta, &["s", "value"], num_rows(&xs, &[&vals])), a.out.out.clone()))
        }
        Command::Transform { op: TransformOp::Tbeta(a) } => {
            let model = load_model(&a.model)?;
            let psi = model.exponent();
            let star = beta_star(&psi, model.beta_plus_default())?;
            let beta = a.beta.unwrap_or(star.value);
            let triplet = model.tbeta_triplet(beta)?;
            let mut body = json!({
                "beta": beta,
                "beta_star": star.value,
                "beta_star_converged": star.converged,
                "triplet": serde_json::to_value(&triplet).ok(),
            });
            if let Some(g) = &a.grid {
                let xs = parse_grid(g)?;
                let t = triplet.exponent();
                let mut rows = vec![];
                for &s in &xs {
                    rows.push(json!([s, t.eval(s)?]));
                }
                body["values"] = json!({ "columns": ["s", "tbeta_psi"], "rows": rows });
            }
            let meta = Meta::new("transform tbeta").model(&model);
            Ok((Artifact::Json { meta, body }, a.out.out.clone()))
        }
        Command::Factorize { op } => {
            let (a, mode, name) = match op {
                FactorizeOp::Compose(a) => (a, FactorMode::Compose, "factorize compose"),
                FactorizeOp::Onesided(a) => (a, FactorMode::Onesided, "factorize onesided"),
            };
            let model = load_model(&a.model)?;
            let grid = a.grid.as_deref().map(parse_grid).transpose()?;
            let pair = factors(&model, mode)?;
            let body = pair_json(&pair, &model, grid.as_deref())?;
            Ok((Artifact::Json { meta: Meta::new(name).model(&model), body }, a.out.out.clone()))
        }
        Command::Vigon { op: VigonOp::Check(a) } => {
            let model = load_model(&a.model)?;
            let xs = parse_grid(&a.grid)?;
            let pair = factors(&model, a.mode)?;
            let pot = PotentialMeasure::from_descending(&pair.minus)?;
            if pair.plus.tail(1.0).is_none() {
                return Err(expfunc::Error::Unsupported("ascending factor has no jump tail".into()).into());
            }
            let residual =
                vigon_check(|y| model.jumps.tail_pos(y), |y| pair.plus.tail(y).unwrap_or(f64::NAN), &pot, &xs)?;
            let body = json!({ "max_residual": residual, "grid": xs, "pass": residual < 1e-8 });
            Ok((Artifact::Json { meta: Meta::new("vigon check").model(&model), body }, a.out.out.clone()))
        }
        Command::Moments { op } => {
            let (a, negative) = match op {
                MomentsOp::Desc(a) => (a, false),
                MomentsOp::Negpos(a) => (a, true),
            };
            let model = load_model(&a.model)?;
            let ladder = if !negative {
                let pair = factors(&model, a.mode.unwrap_or(FactorMode::Compose))?;
                moments_descending(&pair.minus, a.n)?
            } else if let Some(mode) = a.mode {
                negative_moments_from_ascending(&factors(&model, mode)?.plus, a.n)?
            } else {
                if model.kill != 0.0 || model.jumps.has_negative_jumps() {
                    return Err(CliError::config(
                        "negpos without --mode needs an unkilled model without negative jumps",
                    ));
                }
                negative_moments_spectrally_positive(&model.exponent(), model.mean(), a.n)?
            };
            let name = if negative { "moments negpos" } else { "moments desc" };
            let meta = Meta::new(name).model(&model).with("source", format!("{:?}", ladder.source));
            Ok((Artifact::csv(meta, &["m", "value"], moment_rows(&ladder)), a.out.out.clone()))
        }
        Command::Density { op: DensityOp::Series(a) } => {
            let model = load_model(&a.model)?;
            let xs = parse_grid(&a.grid)?;
            let mode = a.mode.series();
            if matches!(mode, SeriesMode::GammaFamilySmallX | SeriesMode::GammaFamilyLargeX) {
                return Err(CliError::config("density series takes --mode raw or euler"));
            }
            let series = density_series_subordinator(&model, mode)?;
            let vals = series.eval_grid(&xs)?;
            let rows = xs
                .iter()
                .zip(&vals)
                .map(|(x, v)| vec![fmt_f64(*x), fmt_f64(v.value), v.terms.to_string(), v.converged.to_string()])
                .collect();
            let meta = Meta::new("density series").model(&model).with("series_mode", format!("{mode:?}"));
            Ok((Artifact::csv(meta, &["x", "value", "terms", "converged"], rows), a.out.out.clone()))
        }
        Command::Density { op: DensityOp::Product(a) } => {
            if a.model.len() != 2 {
                return Err(CliError::config("density product takes --model exactly twice"));
            }
            let m1 = load_model(&a.model[0])?;
            let m2 = load_model(&a.model[1])?;
            let xs = parse_grid(&a.grid)?;
            let vals = density_product(&functional_density(&m1)?, &functional_density(&m2)?, &xs)?;
            let meta = Meta::new("density product").model(&m1).with("second_model_hash", m2.hash());
            Ok((Artifact::csv(meta, &["x", "value"], num_rows(&xs, &[&vals])), a.out.out.clone()))
        }
        Command::Density { op: DensityOp::Specneg(a) } => {
            let model = load_model(&a.model)?;
            if model.jumps.has_positive_jumps() {
                return Err(CliError::config("density specneg needs a model without positive jumps"));
            }
            let xs = parse_grid(&a.grid)?;
            let pair = spectrally_onesided_factors(&model)?;
            let g = pair.gamma_q.expect("one-sided factors carry gamma_q");
            let m_phi = FactorLaw::descending(&pair.minus)?.density().ok_or_else(|| {
                expfunc::Error::Unsupported("descending factor functional has no closed-form density".into())
            })?;
            let out = density_spectrally_negative(&m_phi, g, &xs)?;
            let meta = Meta::new("density specneg")
                .model(&model)
                .with("gamma_q", fmt_f64(g))
                .with("tail_constant", fmt_f64(out.tail_constant))
                .with("tail_ok", out.tail_ok)
                .with("reciprocal_completely_monotone", out.reciprocal_completely_monotone);
            Ok((Artifact::csv(meta, &["x", "value"], num_rows(&xs, &[&out.values])), a.out.out.clone()))
        }
        Command::Density { op: DensityOp::Gamma(a) } => {
            let xs = parse_grid(&a.grid)?;
            let mode = a.mode.series();
            if !matches!(mode, SeriesMode::GammaFamilySmallX | SeriesMode::GammaFamilyLargeX) {
                return Err(CliError::config("density gamma takes --mode small-x or large-x"));
            }
            let vals = gamma_family_densities(a.alpha, a.gamma, a.alpha_prime, &xs, mode)?;
            let rows = xs
                .iter()
                .zip(&vals)
                .map(|(x, v)| vec![fmt_f64(*x), fmt_f64(v.value), v.terms.to_string(), v.converged.to_string()])
                .collect();
            let meta = Meta::new("density gamma")
                .with("alpha", fmt_f64(a.alpha))
                .with("gamma", fmt_f64(a.gamma))
                .with("alpha_prime", fmt_f64(a.alpha_prime))
                .with("series_mode", format!("{mode:?}"));
            Ok((Artifact::csv(meta, &["x", "value", "terms", "converged"], rows), a.out.out.clone()))
        }
        Command::Simulate(a) => {
            let model = load_model(&a.model)?;
            let set = sample_functional(&model, a.n, a.scheme.scheme()?, a.seed)?;
            let sidecar = set.write(&a.out).map_err(|e| CliError::io(&a.out, e))?;
            let mean = set.mean();
            let mut meta = Meta::new("simulate").model(&model);
            meta.seed = Some(a.seed);
            meta.scheme = Some(set.scheme);
            let body = json!({
                "n": set.n,
                "samples": a.out,
                "sidecar": sidecar,
                "mean": mean.mean,
                "mean_std_error": mean.std_error,
            });
            Ok((Artifact::Json { meta, body }, None))
        }
        Command::Test { op: TestOp::Factorization(a) } => {
            let model = load_model(&a.model)?;
            let pair = factors(&model, a.mode)?;
            let mut opts = FactorizationOptions::new(a.n, a.seed);
            opts.scheme = a.scheme.scheme()?;
            let report = test_factorization(&model, &pair, opts)?;
            let mut meta = Meta::new("test factorization").model(&model);
            meta.seed = Some(a.seed);
            meta.scheme = Some(report.scheme);
            let body = serde_json::to_value(&report).expect("serializable");
            Ok((Artifact::Json { meta, body }, a.out.out.clone()))
        }
        Command::Stable { op: StableOp::Passage(a) } => {
            let p = StableParams::new(a.alpha, a.rho)?;
            let (rep, _) = passage_time_law(p, a.n, a.seed)?;
            let mut meta = Meta::new("stable passage")
                .with("alpha", fmt_f64(a.alpha))
                .with("rho", fmt_f64(a.rho))
                .with("q", fmt_f64(rep.q));
            meta.model_hash = Some(rep.model_hash.clone());
            meta.seed = Some(a.seed);
            meta.scheme = Some(rep.scheme);
            let (var, non_inc, log_convex, pass) = match &rep.diagnostic {
                Some(d) => (
                    d.variable.clone(),
                    d.non_increasing.to_string(),
                    d.log_convex.map(|b| b.to_string()).unwrap_or_else(|| "na".into()),
                    d.pass.to_string(),
                ),
                None => ("T1".to_string(), "na".into(), "na".into(), "na".into()),
            };
            meta = meta.with("variable", &var);
            for c in &rep.brownian {
                meta = meta.with(
                    &format!("brownian_x{}", c.x),
                    format!("estimate={} exact={} z={}", fmt_f64(c.estimate), fmt_f64(c.exact), fmt_f64(c.z)),
                );
            }
            let rows = rep
                .histogram
                .iter()
                .map(|b| {
                    vec![
                        fmt_f64(0.5 * (b.lo + b.hi)),
                        fmt_f64(b.density),
                        fmt_f64(b.std_error),
                        non_inc.clone(),
                        log_convex.clone(),
                        pass.clone(),
                    ]
                })
                .collect();
            Ok((
                Artifact::csv(meta, &["x", "density", "std_error", "non_increasing", "log_convex", "diagnostic_pass"], rows),
                a.out.out.clone(),
            ))
        }
    }
}

/// Run with pre-parsed arguments, writing the artifact; returns the exit code.
pub fn run(cli: &Cli) -> i32 {
    let res = execute(cli).and_then(|(art, out)| {
        let text = art.render();
        match out {
            Some(p) => fs::write(&p, text).map_err(|e| CliError::io(&p, e)),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    });
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code
        }
    }
}
