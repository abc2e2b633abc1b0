//! Run configuration: command-line flags merged over an optional TOML file.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Solve,
    Convergence,
    ConstraintTable,
    Verify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemName {
    Example1,
    Example2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorName {
    MeanField,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ReadingName {
    Printed,
    BetaScaled,
}

/// Options shared by every command. Each may also appear in the config file
/// under the same name (with `_` for `-`).
#[derive(Debug, Clone, Default, PartialEq, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Options {
    /// Built-in problem.
    #[arg(long)]
    pub problem: Option<ProblemName>,
    #[arg(long, allow_hyphen_values = true)]
    pub beta: Option<f64>,
    /// Exact multiplier of the manufactured solution.
    #[arg(long, allow_hyphen_values = true)]
    pub mu: Option<f64>,
    /// Diffusion scale (example2 only).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Growth parameter (example2 only).
    #[arg(long, allow_hyphen_values = true)]
    pub lambda: Option<f64>,
    /// Reading of the target's W term (example1 only).
    #[arg(long)]
    pub reading: Option<ReadingName>,
    /// Constraint levels, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub delta: Option<Vec<f64>>,
    /// Time-step rule: tau=h, tau=h^2, tau=h^4, tau=h/sqrt2 or tau=h^2/2.
    #[arg(long)]
    pub rule: Option<String>,
    /// Mesh sizes such as 1/40,1/45 (1/k means k cells per direction).
    #[arg(long = "h", value_delimiter = ',')]
    pub h: Option<Vec<String>>,
    /// Explicit time steps, one per mesh size or a single shared value.
    #[arg(long, value_delimiter = ',')]
    pub tau: Option<Vec<String>>,
    /// Monte Carlo paths.
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gradient step size; defaults to 0.9/(alpha + e^T).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Stopping tolerance on the step error.
    #[arg(long)]
    pub eps0: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Expectation estimator reported for constraint integrals.
    #[arg(long)]
    pub estimator: Option<EstimatorName>,
    /// Sample points for `verify`.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Worker threads; overrides STOCON_THREADS.
    #[arg(long)]
    pub threads: Option<usize>,
}

impl Options {
    /// Fields set in `self` win over those in `file`.
    pub fn merge(self, file: Options) -> Options {
        Options {
            problem: self.problem.or(file.problem),
            beta: self.beta.or(file.beta),
            mu: self.mu.or(file.mu),
            gamma: self.gamma.or(file.gamma),
            lambda: self.lambda.or(file.lambda),
            reading: self.reading.or(file.reading),
            delta: self.delta.or(file.delta),
            rule: self.rule.or(file.rule),
            h: self.h.or(file.h),
            tau: self.tau.or(file.tau),
            paths: self.paths.or(file.paths),
            seed: self.seed.or(file.seed),
            rho: self.rho.or(file.rho),
            eps0: self.eps0.or(file.eps0),
            max_iter: self.max_iter.or(file.max_iter),
            out: self.out.or(file.out),
            estimator: self.estimator.or(file.estimator),
            samples: self.samples.or(file.samples),
            threads: self.threads.or(file.threads),
        }
    }

    pub fn from_file(path: &Path) -> Result<Options, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TauRule {
    H,
    H2,
    H4,
    HOverSqrt2,
    H2Over2,
}

impl TauRule {
    pub fn parse(s: &str) -> Result<TauRule, CliError> {
        let body = s.trim().strip_prefix("tau=").unwrap_or(s.trim());
        Ok(match body {
            "h" => TauRule::H,
            "h^2" => TauRule::H2,
            "h^4" => TauRule::H4,
            "h/sqrt2" => TauRule::HOverSqrt2,
            "h^2/2" => TauRule::H2Over2,
            _ => {
                return Err(CliError::Config(format!(
                    "unknown rule '{s}' (expected tau=h, tau=h^2, tau=h^4, tau=h/sqrt2 or tau=h^2/2)"
                )))
            }
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            TauRule::H => "tau=h",
            TauRule::H2 => "tau=h^2",
            TauRule::H4 => "tau=h^4",
            TauRule::HOverSqrt2 => "tau=h/sqrt2",
            TauRule::H2Over2 => "tau=h^2/2",
        }
    }

    /// `τ` for mesh spacing `1/cells` on `[0, T]`.
    pub fn tau(&self, cells: usize) -> f64 {
        let h = 1.0 / cells as f64;
        match self {
            TauRule::H => h,
            TauRule::H2 => h * h,
            TauRule::H4 => h.powi(4),
            TauRule::HOverSqrt2 => h / std::f64::consts::SQRT_2,
            TauRule::H2Over2 => 0.5 * h * h,
        }
    }
}

/// Parses `1/40`, `0.025` or `40/1000` into a positive number.
pub fn parse_fraction(s: &str) -> Result<f64, CliError> {
    let bad = || CliError::Config(format!("cannot parse '{s}' as a positive number or fraction"));
    let v = match s.trim().split_once('/') {
        Some((a, b)) => {
            let (a, b): (f64, f64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            a / b
        }
        None => s.trim().parse().map_err(|_| bad())?,
    };
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(bad())
    }
}

/// Cells per direction for a mesh size given as `1/k` or a decimal.
pub fn parse_cells(s: &str) -> Result<usize, CliError> {
    let h = parse_fraction(s)?;
    let k = (1.0 / h).round();
    if !(k >= 1.0) || (k * h - 1.0).abs() > 1e-9 {
        return Err(CliError::Config(format!("mesh size '{s}' is not 1/k for a whole number k")));
    }
    Ok(k as usize)
}

/// Steps `N = round(T/τ)`.
pub fn steps_for(horizon: f64, tau: f64) -> Result<usize, CliError> {
    let n = (horizon / tau).round();
    if !(n >= 1.0) || n > 1e8 {
        return Err(CliError::Config(format!("time step {tau} gives {n} steps on [0, {horizon}]")));
    }
    Ok(n as usize)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResolutionSpec {
    /// Mesh size as given, e.g. `1/40`.
    pub label: String,
    pub cells: usize,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProblemChoice {
    pub name: ProblemName,
    pub beta: f64,
    pub mu: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub reading: ReadingName,
}

/// Fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: Command,
    pub problem: ProblemChoice,
    /// Empty means the problem's own δ.
    pub deltas: Vec<f64>,
    pub resolutions: Vec<ResolutionSpec>,
    /// Rule label, or `explicit` when `--tau` was given.
    pub rule: String,
    pub paths: usize,
    pub seed: u64,
    pub rho: Option<f64>,
    pub eps0: f64,
    pub max_iter: usize,
    pub out: PathBuf,
    pub estimator: EstimatorName,
    pub samples: usize,
    pub threads: Option<usize>,
}

const HORIZON: f64 = 1.0;

impl RunConfig {
    pub fn resolve(command: Command, o: Options) -> Result<RunConfig, CliError> {
        let name = o.problem.unwrap_or(ProblemName::Example1);
        let problem = match name {
            ProblemName::Example1 => {
                if o.gamma.is_some() || o.lambda.is_some() {
                    return Err(CliError::Config("gamma and lambda apply to example2 only".into()));
                }
                ProblemChoice {
                    name,
                    beta: o.beta.unwrap_or(0.1),
                    mu: o.mu.unwrap_or(1.0),
                    gamma: 1.0,
                    lambda: 0.0,
                    reading: o.reading.unwrap_or(ReadingName::BetaScaled),
                }
            }
            ProblemName::Example2 => {
                if o.reading.is_some() {
                    return Err(CliError::Config("reading applies to example1 only".into()));
                }
                ProblemChoice {
                    name,
                    beta: o.beta.unwrap_or(0.5),
                    mu: o.mu.unwrap_or(0.8),
                    gamma: o.gamma.unwrap_or(0.2),
                    lambda: o.lambda.unwrap_or(0.2),
                    reading: ReadingName::BetaScaled,
                }
            }
        };
        if !(problem.gamma > 0.0) {
            return Err(CliError::Config(format!("gamma must be positive, got {}", problem.gamma)));
        }

        let default_h: &[&str] = match command {
            Command::Solve => &["1/40"],
            _ => &["1/40", "1/45", "1/50", "1/60", "1/70"],
        };
        let h_list: Vec<String> = o.h.unwrap_or_else(|| default_h.iter().map(|s| s.to_string()).collect());
        if h_list.is_empty() {
            return Err(CliError::Config("at least one mesh size is required".into()));
        }
        let cells: Vec<usize> = h_list.iter().map(|s| parse_cells(s)).collect::<Result<_, _>>()?;
        let (rule, steps): (String, Vec<usize>) = match (o.rule, o.tau) {
            (Some(_), Some(_)) => return Err(CliError::Config("give either --rule or --tau, not both".into())),
            (_, Some(taus)) => {
                let taus: Vec<f64> = taus.iter().map(|s| parse_fraction(s)).collect::<Result<_, _>>()?;
                let steps = match taus.len() {
                    1 => vec![steps_for(HORIZON, taus[0])?; cells.len()],
                    n if n == cells.len() => taus.iter().map(|&t| steps_for(HORIZON, t)).collect::<Result<_, _>>()?,
                    n => {
                        return Err(CliError::Config(format!(
                            "{n} time steps given for {} mesh sizes",
                            cells.len()
                        )))
                    }
                };
                ("explicit".into(), steps)
            }
            (rule, None) => {
                let rule = TauRule::parse(rule.as_deref().unwrap_or("tau=h"))?;
                let steps = cells.iter().map(|&k| steps_for(HORIZON, rule.tau(k))).collect::<Result<_, _>>()?;
                (rule.label().into(), steps)
            }
        };
        let resolutions = h_list
            .into_iter()
            .zip(cells)
            .zip(steps)
            .map(|((label, cells), steps)| ResolutionSpec { label, cells, steps })
            .collect::<Vec<_>>();

        let deltas = o.delta.unwrap_or_default();
        if deltas.iter().any(|d| !d.is_finite()) {
            return Err(CliError::Config("delta values must be finite".into()));
        }
        if command == Command::Solve && (deltas.len() > 1 || resolutions.len() > 1) {
            return Err(CliError::Config("solve takes a single delta and a single mesh size".into()));
        }
        let paths = o.paths.unwrap_or(2000);
        if paths == 0 {
            return Err(CliError::Config("paths must be at least 1".into()));
        }
        let eps0 = o.eps0.unwrap_or(1e-6);
        if !(eps0 > 0.0) {
            return Err(CliError::Config(format!("eps0 must be positive, got {eps0}")));
        }
        if let Some(rho) = o.rho {
            if !(rho > 0.0) || !rho.is_finite() {
                return Err(CliError::Config(format!("rho must be positive, got {rho}")));
            }
        }
        let max_iter = o.max_iter.unwrap_or(500);
        if max_iter == 0 {
            return Err(CliError::Config("max_iter must be at least 1".into()));
        }
        if o.threads == Some(0) {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        Ok(RunConfig {
            command,
            problem,
            deltas,
            resolutions,
            rule,
            paths,
            seed: o.seed.unwrap_or(1),
            rho: o.rho,
            eps0,
            max_iter,
            out: o.out.unwrap_or_else(|| PathBuf::from("stocon-out")),
            estimator: o.estimator.unwrap_or(EstimatorName::MeanField),
            samples: o.samples.unwrap_or(1000).max(1),
            threads: o.threads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractions() {
        assert_eq!(parse_fraction("1/40").unwrap(), 0.025);
        assert_eq!(parse_fraction("0.5").unwrap(), 0.5);
        assert!(parse_fraction("0").is_err());
        assert!(parse_fraction("a/b").is_err());
        assert_eq!(parse_cells("1/45").unwrap(), 45);
        assert_eq!(parse_cells("0.025").unwrap(), 40);
        assert!(parse_cells("0.3").is_err());
    }

    #[test]
    fn rules() {
        assert_eq!(TauRule::parse("tau=h^2").unwrap(), TauRule::H2);
        assert_eq!(TauRule::parse("h/sqrt2").unwrap(), TauRule::HOverSqrt2);
        assert!(TauRule::parse("tau=h^3").is_err());
        assert_eq!(steps_for(1.0, TauRule::H2.tau(10)).unwrap(), 100);
        assert_eq!(steps_for(1.0, TauRule::H4.tau(10)).unwrap(), 10_000);
        assert_eq!(steps_for(1.0, TauRule::HOverSqrt2.tau(10)).unwrap(), 14);
        assert_eq!(steps_for(1.0, TauRule::H2Over2.tau(10)).unwrap(), 200);
    }

    #[test]
    fn defaults_and_overrides() {
        let c = RunConfig::resolve(Command::Convergence, Options::default()).unwrap();
        assert_eq!(c.resolutions.len(), 5);
        assert_eq!(c.resolutions[4], ResolutionSpec { label: "1/70".into(), cells: 70, steps: 70 });
        assert_eq!(c.paths, 2000);
        let flags = Options { paths: Some(10), ..Default::default() };
        let file = Options { paths: Some(20), seed: Some(3), ..Default::default() };
        let merged = flags.merge(file);
        assert_eq!((merged.paths, merged.seed), (Some(10), Some(3)));
    }

    #[test]
    fn explicit_tau() {
        let o = Options { h: Some(vec!["1/10".into(), "1/20".into()]), tau: Some(vec!["1/100".into()]), ..Default::default() };
        let c = RunConfig::resolve(Command::Convergence, o).unwrap();
        assert!(c.resolutions.iter().all(|r| r.steps == 100));
        assert_eq!(c.rule, "explicit");
        let bad = Options { h: Some(vec!["1/10".into()]), tau: Some(vec!["1/10".into(), "1/20".into()]), ..Default::default() };
        assert!(RunConfig::resolve(Command::Convergence, bad).is_err());
    }

    #[test]
    fn invalid_configs() {
        let cases = [
            Options { paths: Some(0), ..Default::default() },
            Options { eps0: Some(0.0), ..Default::default() },
            Options { gamma: Some(0.3), ..Default::default() },
            Options { rule: Some("tau=h".into()), tau: Some(vec!["0.1".into()]), ..Default::default() },
            Options { h: Some(vec![]), ..Default::default() },
        ];
        for o in cases {
            assert!(matches!(RunConfig::resolve(Command::Convergence, o), Err(CliError::Config(_))));
        }
        let two = Options { delta: Some(vec![0.1, 0.2]), ..Default::default() };
        assert!(RunConfig::resolve(Command::Solve, two).is_err());
    }

    #[test]
    fn toml_file_parses() {
        let o: Options = toml::from_str(
            "problem = \"example2\"\ndelta = [1.0, -0.5]\nh = [\"1/40\"]\npaths = 50\nestimator = \"monte-carlo\"\n",
        )
        .unwrap();
        assert_eq!(o.problem, Some(ProblemName::Example2));
        assert_eq!(o.delta, Some(vec![1.0, -0.5]));
        assert_eq!(o.estimator, Some(EstimatorName::MonteCarlo));
        assert!(toml::from_str::<Options>("unknown = 1").is_err());
    }
}
