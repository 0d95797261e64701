//! Command-line flags, the optional JSON config file, and their merge into
//! one resolved [`RunConfig`]. Precedence: flag > file > default.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use excontrol::dataset::Schema;
use excontrol::estimators::{Estimand, Method};
use excontrol::inference::Sidedness;
use excontrol::nuisance::{GlmOptions, ModelSpec, RatioMode, TRIM_EPS};
use excontrol::simlab::DgpParams;
use excontrol::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "excontrol", version, about = "Treatment effects from trials augmented with external controls")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate treatment effects from a CSV file.
    Estimate(Flags),
    /// Exchangeability test, overlap summaries and bias bound.
    Diagnose(Flags),
    /// Monte Carlo study of the simulation scenarios.
    Simulate(Flags),
    /// Render a JSON result file as a text table.
    Report(Flags),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Estimate(_) => "estimate",
            Command::Diagnose(_) => "diagnose",
            Command::Simulate(_) => "simulate",
            Command::Report(_) => "report",
        }
    }

    pub fn flags(&self) -> &Flags {
        match self {
            Command::Estimate(f) | Command::Diagnose(f) | Command::Simulate(f) | Command::Report(f) => f,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodArg {
    Full,
    Trial,
    TreatedOnly,
}

impl MethodArg {
    pub fn method(self) -> Method {
        match self {
            MethodArg::Full => Method::FullData,
            MethodArg::Trial => Method::TrialBased,
            MethodArg::TreatedOnly => Method::TreatedOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimandArg {
    Tau,
    Psi,
    Xi,
}

impl EstimandArg {
    pub fn estimand(self) -> Estimand {
        match self {
            EstimandArg::Tau => Estimand::Tau,
            EstimandArg::Psi => Estimand::Psi,
            EstimandArg::Xi => Estimand::Xi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioArg {
    Known1,
    Constant,
    Loglinear,
}

impl RatioArg {
    pub fn mode(self) -> RatioMode {
        match self {
            RatioArg::Known1 => RatioMode::KnownOne,
            RatioArg::Constant => RatioMode::Constant,
            RatioArg::Loglinear => RatioMode::Loglinear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceArg {
    If,
    Bootstrap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SideArg {
    TwoSided,
    Greater,
    Less,
}

impl SideArg {
    pub fn sidedness(self) -> Sidedness {
        match self {
            SideArg::TwoSided => Sidedness::TwoSided,
            SideArg::Greater => Sidedness::Greater,
            SideArg::Less => Sidedness::Less,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Input CSV (estimate, diagnose) or JSON result (report).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Column roles: a JSON object or a path to one, e.g.
    /// '{"outcome":"y","treatment":"t","source":"d"}'.
    #[arg(long)]
    pub schema: Option<String>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub estimand: Vec<EstimandArg>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub method: Vec<MethodArg>,
    #[arg(long, value_enum)]
    pub ratio: Option<RatioArg>,
    /// Fit m0 on trial controls only instead of all controls.
    #[arg(long)]
    pub no_pool_controls: bool,
    #[arg(long, value_enum)]
    pub variance: Option<VarianceArg>,
    /// Bootstrap replicates.
    #[arg(long = "B", alias = "bootstrap-reps")]
    pub bootstrap_reps: Option<usize>,
    /// Null value of the test.
    #[arg(long, allow_hyphen_values = true)]
    pub null: Option<f64>,
    #[arg(long, value_enum)]
    pub side: Option<SideArg>,
    #[arg(long)]
    pub level: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Scenario for simulate: i, ii, iii, iv or all.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    /// Write per-replicate biases as CSV (simulate).
    #[arg(long)]
    pub boxplot: Option<PathBuf>,
    /// Bound B on |b(x)| for the exchangeability-violation bias (diagnose).
    #[arg(long)]
    pub bias_bound: Option<f64>,
}

/// Working-model overrides from the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub m1: Option<ModelSpec>,
    pub m0: Option<ModelSpec>,
    pub p: Option<ModelSpec>,
    pub pi: Option<ModelSpec>,
    pub ratio: Option<ModelSpec>,
    /// Transform used by the exchangeability test.
    pub exchangeability: Option<ModelSpec>,
}

/// Contents of `--config`. Every field is optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub input: Option<PathBuf>,
    pub schema: Option<Schema>,
    pub models: ModelOverrides,
    pub estimands: Option<Vec<EstimandArg>>,
    pub methods: Option<Vec<MethodArg>>,
    pub ratio: Option<RatioArg>,
    pub pool_controls: Option<bool>,
    pub variance: Option<VarianceArg>,
    pub bootstrap_reps: Option<usize>,
    pub bootstrap_stratify: Option<bool>,
    pub null: Option<f64>,
    pub side: Option<SideArg>,
    pub level: Option<f64>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub scenario: Option<String>,
    pub reps: Option<usize>,
    pub n: Option<usize>,
    pub boxplot: Option<PathBuf>,
    pub bias_bound: Option<f64>,
    pub trim_eps: Option<f64>,
    pub glm: Option<GlmOptions>,
    pub dgp: Option<DgpParams>,
}

pub const DEFAULT_BOOTSTRAP_REPS: usize = 500;

/// Fully resolved settings; echoed in every JSON output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub command: String,
    #[serde(skip)]
    pub input: Option<PathBuf>,
    pub schema: Schema,
    pub models: ModelOverrides,
    pub estimands: Vec<EstimandArg>,
    pub methods: Vec<MethodArg>,
    pub ratio: Option<RatioArg>,
    pub pool_controls: bool,
    pub variance: VarianceArg,
    pub bootstrap_reps: Option<usize>,
    pub bootstrap_stratify: bool,
    pub null: f64,
    pub side: SideArg,
    pub level: f64,
    pub seed: u64,
    #[serde(skip)]
    pub jobs: Option<usize>,
    #[serde(skip)]
    pub out: Option<PathBuf>,
    pub scenarios: Vec<String>,
    pub reps: usize,
    pub n: usize,
    #[serde(skip)]
    pub boxplot: Option<PathBuf>,
    pub bias_bound: Option<f64>,
    pub trim_eps: f64,
    pub glm: GlmOptions,
    pub dgp: DgpParams,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid {what} {}: {e}", path.display())))
}

fn pick_vec<T: Clone>(cli: &[T], file: Option<Vec<T>>) -> Option<Vec<T>> {
    if cli.is_empty() {
        file
    } else {
        Some(cli.to_vec())
    }
}

fn parse_schema(s: &str) -> Result<Schema> {
    let t = s.trim();
    if t.starts_with('{') {
        serde_json::from_str(t).map_err(|e| Error::Config(format!("invalid --schema: {e}")))
    } else {
        read_json(Path::new(t), "schema file")
    }
}

impl RunConfig {
    pub fn resolve(command: &str, flags: &Flags) -> Result<Self> {
        let file: FileConfig = match &flags.config {
            Some(p) => read_json(p, "config file")?,
            None => FileConfig::default(),
        };
        let schema = match &flags.schema {
            Some(s) => parse_schema(s)?,
            None => file.schema.unwrap_or_default(),
        };
        let methods_given = pick_vec(&flags.method, file.methods);
        let estimands = pick_vec(&flags.estimand, file.estimands).unwrap_or_else(|| vec![EstimandArg::Tau]);
        let variance = flags.variance.or(file.variance).unwrap_or(VarianceArg::If);
        let bootstrap_reps = flags.bootstrap_reps.or(file.bootstrap_reps);
        let scenario = flags.scenario.clone().or(file.scenario).unwrap_or_else(|| "i".into());
        let scenarios = if scenario.trim().eq_ignore_ascii_case("all") {
            vec!["i".into(), "ii".into(), "iii".into(), "iv".into()]
        } else {
            scenario.split(',').map(|s| s.trim().to_string()).collect()
        };

        let methods = methods_given.unwrap_or_else(|| vec![MethodArg::Full, MethodArg::Trial]);
        let cfg = RunConfig {
            command: command.to_string(),
            input: flags.input.clone().or(file.input),
            schema,
            models: file.models,
            estimands,
            methods,
            ratio: flags.ratio.or(file.ratio),
            pool_controls: if flags.no_pool_controls { false } else { file.pool_controls.unwrap_or(true) },
            variance,
            bootstrap_reps: match variance {
                VarianceArg::Bootstrap => Some(bootstrap_reps.unwrap_or(DEFAULT_BOOTSTRAP_REPS)),
                VarianceArg::If => bootstrap_reps,
            },
            bootstrap_stratify: file.bootstrap_stratify.unwrap_or(false),
            null: flags.null.or(file.null).unwrap_or(0.0),
            side: flags.side.or(file.side).unwrap_or(SideArg::TwoSided),
            level: flags.level.or(file.level).unwrap_or(0.95),
            seed: flags.seed.or(file.seed).unwrap_or(1),
            jobs: flags.jobs.or(file.jobs),
            out: flags.out.clone().or(file.out),
            scenarios,
            reps: flags.reps.or(file.reps).unwrap_or(1000),
            n: flags.n.or(file.n).unwrap_or(1000),
            boxplot: flags.boxplot.clone().or(file.boxplot),
            bias_bound: flags.bias_bound.or(file.bias_bound),
            trim_eps: file.trim_eps.unwrap_or(TRIM_EPS),
            glm: file.glm.unwrap_or_default(),
            dgp: file.dgp.unwrap_or_default(),
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn treated_only(&self) -> bool {
        self.methods.contains(&MethodArg::TreatedOnly)
    }

    fn check(&self) -> Result<()> {
        if self.treated_only() && self.methods.iter().any(|m| *m != MethodArg::TreatedOnly) {
            return Err(Error::Config(
                "treated-only excludes the full-data and trial-based methods (the trial has no control arm)".into(),
            ));
        }
        if self.treated_only() && self.estimands.iter().any(|e| *e != EstimandArg::Tau) {
            return Err(Error::Config("the treated-only method targets tau only".into()));
        }
        if self.variance == VarianceArg::If && self.bootstrap_reps.is_some() {
            return Err(Error::Config("--B is only meaningful with --variance bootstrap".into()));
        }
        if let Some(b) = self.bootstrap_reps {
            if b < 2 {
                return Err(Error::Config("--B must be at least 2 (100 or more recommended)".into()));
            }
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::Config(format!("--level {} must lie in (0, 1)", self.level)));
        }
        if let Some(b) = self.bias_bound {
            if !(b >= 0.0) {
                return Err(Error::Config(format!("--bias-bound {b} must be non-negative")));
            }
        }
        if self.jobs == Some(0) {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        if self.reps == 0 {
            return Err(Error::Config("--reps must be at least 1".into()));
        }
        if !(self.trim_eps > 0.0 && self.trim_eps < 0.5) {
            return Err(Error::Config(format!("trim_eps {} must lie in (0, 0.5)", self.trim_eps)));
        }
        Ok(())
    }

    pub fn input(&self) -> Result<&Path> {
        self.input
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{} needs --input", self.command)))
    }
}
