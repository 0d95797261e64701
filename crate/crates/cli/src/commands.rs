//! The four subcommands. Each returns a JSON value (or text for `report`);
//! `main` handles output and exit codes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::BufWriter;

use serde::Serialize;
use serde_json::Value;

use excontrol::dataset::{load_csv, summarize, CompositeDataset, DescriptiveStats};
use excontrol::estimators::{estimate, estimate_with_influence};
use excontrol::inference::{
    bias_bound, bootstrap_variance, if_variance, overlap_diagnostics, render_table, test_mean_exchangeability,
    z_test, BiasBound, BootstrapOptions, BootstrapResult, ExchangeabilityTest, InferenceResult, OverlapReport,
    VarianceMethod,
};
use excontrol::nuisance::{fit_nuisances, Family, ModelSpec, NuisanceConfig, NuisanceSet, RatioMode};
use excontrol::simlab::{
    export_boxplot_data, render_mc_table, run_monte_carlo, EstimatorId, McOptions, McReport, Scenario,
    ScenarioConfig,
};
use excontrol::{Error, Result};

use crate::config::{MethodArg, RunConfig, VarianceArg};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Fitted-model summary reported next to the estimates.
#[derive(Debug, Serialize)]
pub struct NuisanceInfo {
    pub methods: Vec<MethodArg>,
    pub fingerprint: String,
    pub ratio_mode: RatioMode,
    pub m0_pooled: bool,
    pub treated_only: bool,
    pub trim_eps: f64,
}

impl NuisanceInfo {
    fn new(methods: Vec<MethodArg>, nuis: &NuisanceSet) -> Self {
        Self {
            methods,
            fingerprint: nuis.fingerprint(),
            ratio_mode: nuis.r.mode(),
            m0_pooled: nuis.m0_pooled,
            treated_only: nuis.p.is_none(),
            trim_eps: nuis.trim_eps,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct ResultEntry {
    #[serde(flatten)]
    pub inference: InferenceResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapResult>,
}

#[derive(Debug, Serialize)]
pub struct EstimateReport {
    pub command: &'static str,
    pub version: &'static str,
    pub config: RunConfig,
    pub data: DescriptiveStats,
    pub nuisance: Vec<NuisanceInfo>,
    pub results: Vec<ResultEntry>,
}

#[derive(Debug, Serialize)]
pub struct DiagnoseReport {
    pub command: &'static str,
    pub version: &'static str,
    pub config: RunConfig,
    pub data: DescriptiveStats,
    pub nuisance: NuisanceInfo,
    pub exchangeability: ExchangeabilityTest,
    pub overlap: OverlapReport,
    pub bias: BiasBound,
}

#[derive(Debug, Serialize)]
pub struct SimulateReport {
    pub command: &'static str,
    pub version: &'static str,
    pub config: RunConfig,
    pub reports: Vec<McReport>,
}

fn with_pool<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match jobs {
        Some(j) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(j)
                .build()
                .map_err(|e| Error::Config(format!("cannot build a pool of {j} threads: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

/// Working-model configuration for the dataset, with file overrides.
fn nuisance_config(cfg: &RunConfig, n_covariates: usize, kind: excontrol::dataset::OutcomeKind) -> NuisanceConfig {
    let mut nc = NuisanceConfig::linear(n_covariates, kind);
    let m = &cfg.models;
    if let Some(s) = &m.m1 {
        nc.m1 = s.clone();
    }
    if let Some(s) = &m.m0 {
        nc.m0 = s.clone();
    }
    if let Some(s) = &m.p {
        nc.p = s.clone();
    }
    if let Some(s) = &m.pi {
        nc.pi = s.clone();
    }
    if let Some(s) = &m.ratio {
        nc.ratio_spec = s.clone();
    }
    if let Some(r) = cfg.ratio {
        nc.ratio_mode = r.mode();
    }
    nc.pool_controls = cfg.pool_controls;
    nc.treated_only = cfg.treated_only();
    nc.trim_eps = cfg.trim_eps;
    nc.glm = cfg.glm;
    nc
}

/// The nuisance configuration a method needs: trial-based estimators use
/// controls from the trial only.
fn config_for(base: &NuisanceConfig, method: MethodArg) -> NuisanceConfig {
    let mut nc = base.clone();
    if method == MethodArg::Trial {
        nc.pool_controls = false;
    }
    nc
}

fn load(cfg: &RunConfig) -> Result<CompositeDataset> {
    load_csv(cfg.input()?, &cfg.schema)
}

pub fn cmd_estimate(cfg: RunConfig) -> Result<Value> {
    let ds = load(&cfg)?;
    let base = nuisance_config(&cfg, ds.n_covariates(), ds.outcome_kind());

    // one fit per distinct nuisance configuration
    let mut fits: Vec<(NuisanceConfig, NuisanceSet, Vec<MethodArg>)> = Vec::new();
    for &m in &cfg.methods {
        let nc = config_for(&base, m);
        match fits.iter_mut().find(|(c, _, _)| *c == nc) {
            Some(entry) => entry.2.push(m),
            None => {
                let nuis = fit_nuisances(&ds, &nc)?;
                fits.push((nc, nuis, vec![m]));
            }
        }
    }

    let mut results = Vec::new();
    for &m in &cfg.methods {
        let (nc, nuis, _) = fits.iter().find(|(_, _, ms)| ms.contains(&m)).expect("fitted above");
        for e in &cfg.estimands {
            let (estimand, method) = (e.estimand(), m.method());
            let entry = match cfg.variance {
                VarianceArg::If => {
                    let (est, ifv) = estimate_with_influence(&ds, nuis, estimand, method)?;
                    let inference = z_test(
                        &est,
                        if_variance(&ifv),
                        cfg.null,
                        cfg.side.sidedness(),
                        cfg.level,
                        VarianceMethod::InfluenceFunction,
                    )?;
                    ResultEntry { inference, bootstrap: None }
                }
                VarianceArg::Bootstrap => {
                    let est = estimate(&ds, nuis, estimand, method)?;
                    let opts = BootstrapOptions {
                        reps: cfg.bootstrap_reps.expect("resolved with bootstrap"),
                        seed: cfg.seed,
                        level: cfg.level,
                        stratify: cfg.bootstrap_stratify,
                        canonical_sort: true,
                        ..BootstrapOptions::default()
                    };
                    let refit = |b: &CompositeDataset| -> Result<f64> {
                        let n = fit_nuisances(b, nc)?;
                        Ok(estimate(b, &n, estimand, method)?.point)
                    };
                    let boot = with_pool(cfg.jobs, || bootstrap_variance(&ds, refit, &opts))??;
                    let inference = z_test(
                        &est,
                        boot.variance,
                        cfg.null,
                        cfg.side.sidedness(),
                        cfg.level,
                        VarianceMethod::Bootstrap,
                    )?;
                    ResultEntry {
                        inference,
                        bootstrap: Some(boot),
                    }
                }
            };
            results.push(entry);
        }
    }

    let report = EstimateReport {
        command: "estimate",
        version: VERSION,
        data: summarize(&ds),
        nuisance: fits.iter().map(|(_, n, ms)| NuisanceInfo::new(ms.clone(), n)).collect(),
        results,
        config: cfg,
    };
    Ok(serde_json::to_value(report)?)
}

pub fn cmd_diagnose(cfg: RunConfig) -> Result<Value> {
    let ds = load(&cfg)?;
    let spec = cfg
        .models
        .exchangeability
        .clone()
        .unwrap_or_else(|| ModelSpec::linear(Family::Gaussian, ds.n_covariates()));
    let exchangeability = test_mean_exchangeability(&ds, &spec, &cfg.glm)?;
    let mut nc = nuisance_config(&cfg, ds.n_covariates(), ds.outcome_kind());
    nc.treated_only = cfg.treated_only();
    let nuis = fit_nuisances(&ds, &nc)?;
    let overlap = overlap_diagnostics(&ds, &nuis);
    let bias = bias_bound(&ds, &nuis, cfg.bias_bound, None)?;
    let report = DiagnoseReport {
        command: "diagnose",
        version: VERSION,
        data: summarize(&ds),
        nuisance: NuisanceInfo::new(vec![MethodArg::Full], &nuis),
        exchangeability,
        overlap,
        bias,
        config: cfg,
    };
    Ok(serde_json::to_value(report)?)
}

pub fn cmd_simulate(cfg: RunConfig) -> Result<Value> {
    let scenarios = cfg
        .scenarios
        .iter()
        .map(|s| s.parse::<Scenario>())
        .collect::<Result<Vec<_>>>()?;
    let estimands: Vec<_> = cfg.estimands.iter().map(|e| e.estimand()).collect();
    let estimators: Vec<EstimatorId> = EstimatorId::ALL
        .into_iter()
        .filter(|id| estimands.contains(&id.estimand()))
        .collect();
    let has_models = cfg.models != Default::default() || cfg.ratio.is_some();

    let mut reports = Vec::with_capacity(scenarios.len());
    for sc in scenarios {
        let mut sim = ScenarioConfig::new(sc, cfg.n);
        sim.dgp = cfg.dgp.clone();
        if has_models {
            sim.analyst = Some(nuisance_config(&cfg, 2, sim.outcome_kind));
        }
        let opts = McOptions {
            reps: cfg.reps,
            master_seed: cfg.seed,
            jobs: cfg.jobs,
            estimators: estimators.clone(),
            level: cfg.level,
            retain_draws: cfg.boxplot.is_some(),
            spill_path: cfg
                .boxplot
                .as_ref()
                .map(|p| p.with_extension(format!("{}.draws.csv", sc.as_str()))),
            ..McOptions::default()
        };
        log::info!("scenario {sc}: {} replicates of n = {}", cfg.reps, cfg.n);
        reports.push(run_monte_carlo(&sim, &opts)?);
    }
    if let Some(path) = &cfg.boxplot {
        let file = File::create(path)?;
        export_boxplot_data(&reports, BufWriter::new(file))?;
    }
    // raw draws live in the boxplot file, not in the JSON
    for r in &mut reports {
        r.draws = None;
    }
    let report = SimulateReport {
        command: "simulate",
        version: VERSION,
        config: cfg,
        reports,
    };
    Ok(serde_json::to_value(report)?)
}

/// Renders a JSON output of `estimate`, `diagnose` or `simulate` as text.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let path = cfg.input()?;
    let text = std::fs::read_to_string(path)?;
    let v: Value = serde_json::from_str(&text)?;
    let command = v.get("command").and_then(Value::as_str).unwrap_or_default();
    match command {
        "estimate" => {
            let results: Vec<InferenceResult> = serde_json::from_value(v["results"].clone())?;
            Ok(render_table(&results))
        }
        "simulate" => {
            let reports: Vec<McReport> = serde_json::from_value(v["reports"].clone())?;
            let mut out = render_mc_table(&reports);
            for r in &reports {
                if let (Some(a), Some(e)) = (r.mean_analytic_gain, r.empirical_gain) {
                    out.push_str(&format!(
                        "scenario {}: efficiency gain analytic {a:.4}, empirical {e:.4}\n",
                        r.scenario
                    ));
                }
            }
            Ok(out)
        }
        "diagnose" => {
            let ex: ExchangeabilityTest = serde_json::from_value(v["exchangeability"].clone())?;
            let bias: BiasBound = serde_json::from_value(v["bias"].clone())?;
            let overlap: OverlapReport = serde_json::from_value(v["overlap"].clone())?;
            let mut out = format!(
                "exchangeability: chi2 = {:.4} on {} df, p = {:.4} ({} controls)\n",
                ex.statistic, ex.df, ex.p_value, ex.n_controls
            );
            for c in std::iter::once(&ex.d_main_effect) {
                out.push_str(&format!(
                    "  {:<12} {:>10.4} (se {:.4}, p {:.4})\n",
                    c.name, c.estimate, c.se, c.p_value
                ));
            }
            out.push_str(&format!("bias weight factor: {:.4}\n", bias.weight_factor));
            if let Some(b) = bias.lambda_abs_bound {
                out.push_str(&format!("|bias| bound: {b:.4}\n"));
            }
            let mut rows = BTreeMap::new();
            rows.insert("pi", &overlap.pi);
            rows.insert("p", &overlap.p);
            rows.insert("pi*p", &overlap.pi_times_p);
            rows.insert("denominator", &overlap.denominator);
            for (name, s) in rows {
                if let Some(s) = s {
                    out.push_str(&format!(
                        "  {name:<12} min {:.4}  median {:.4}  max {:.4}\n",
                        s.min, s.median, s.max
                    ));
                }
            }
            out.push_str(&format!(
                "trimmed {}, floored {}, flagged {}\n",
                overlap.trimmed,
                overlap.floored,
                overlap.flagged_rows.len()
            ));
            for n in &overlap.notes {
                out.push_str(&format!("note: {n}\n"));
            }
            Ok(out)
        }
        other => Err(Error::Config(format!(
            "report input has unknown command `{other}`; expected estimate, diagnose or simulate output"
        ))),
    }
}
