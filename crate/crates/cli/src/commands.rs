use std::fmt::Write as _;
use std::path::Path;

use ebdesign::design::{check_feasibility, grid_search_design, no_information_design, solve, DesignProblem, Objective};
use ebdesign::prior::{
    build_support, fit_gaussian_prior, fit_npmle, fit_npmle_independent, parse_prior_document, prior_document, DiscretePrior,
    FitReport, GaussianPrior, OptimizerOptions, Prior, Structure,
};
use ebdesign::regret::{
    blackwell_study, derive_seed, rate_experiment, regret_experiment, standard_kinds, Estimator, ExperimentSettings, Marginal,
    RateConfig, RateOrder, RegretTemplate,
};
use ebdesign::study_data::{load_archive, validate_archive, Severity};
use ebdesign::{ComplianceMode, Error, Result, StrataConfig};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde_json::json;

use crate::output::{ensure_dir, write_csv, write_json};
use crate::{
    Cli, Command, ComplianceArg, DesignArgs, DominanceArgs, EstimateArgs, EstimatorArg, Method, ObjectiveArg, OrderArg, RateArgs,
    RegretArgs, StructureArg, TemplateArg,
};

/// Runs the selected command and returns a human-readable summary.
pub fn run(cli: &Cli) -> Result<String> {
    match &cli.command {
        Command::EstimatePrior(a) => estimate_prior(a, &cli.out),
        Command::OptimizeDesign(a) => optimize_design(a, &cli.out),
        Command::EvaluateRegret(a) => evaluate_regret(a, cli.seed, &cli.out),
        Command::SimulateRates(a) => simulate_rates(a, cli.seed, &cli.out),
        Command::DominanceCheck(a) => dominance_check(a, cli.seed, &cli.out),
    }
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse { source_name: path.display().to_string(), line: e.line(), msg: e.to_string() })
}

fn estimate_prior(a: &EstimateArgs, out: &Path) -> Result<String> {
    let archive = load_archive(&a.archive, a.dim)?;
    let diagnostics = validate_archive(&archive);
    let mut options = match a.method {
        Method::Gaussian => OptimizerOptions::gaussian(),
        Method::Npmle => OptimizerOptions::default(),
    };
    if let Some(m) = a.max_iterations {
        options.max_iterations = m;
    }
    let (prior, fit): (Prior, Vec<FitReport>) = match (a.method, a.structure) {
        (Method::Gaussian, s) => {
            let structure = if s == StructureArg::Full { Structure::Full } else { Structure::Diagonal };
            let (p, f) = fit_gaussian_prior(&archive, structure, &options)?;
            (Prior::Gaussian(p), vec![f])
        }
        (Method::Npmle, StructureArg::Full) => {
            let grid = build_support(&archive, a.grid_points, a.padding)?;
            let (p, f) = fit_npmle(&archive, &grid, &options)?;
            (Prior::Discrete(p), vec![f])
        }
        (Method::Npmle, _) => {
            let fits = fit_npmle_independent(&archive, a.grid_points, a.padding, &options)?;
            let marginals: Vec<DiscretePrior> = fits.iter().map(|(p, _)| p.clone()).collect();
            (Prior::Discrete(DiscretePrior::product(&marginals)?), fits.into_iter().map(|(_, f)| f).collect())
        }
    };
    let (mean, cov) = (prior.mean(), prior.covariance());
    let variances: Vec<f64> = (0..a.dim).map(|g| cov[(g, g)]).collect();
    ensure_dir(out)?;
    let doc = prior_document(&prior, (fit.len() == 1).then(|| &fit[0]));
    write_json(out, "prior.json", &doc)?;
    let report = json!({
        "command": "estimate-prior",
        "archive": a.archive.display().to_string(),
        "studies": archive.len(),
        "dimension": a.dim,
        "method": format!("{:?}", a.method).to_lowercase(),
        "structure": format!("{:?}", a.structure).to_lowercase(),
        "prior": doc,
        "mean": mean.iter().collect::<Vec<_>>(),
        "variance": variances,
        "fits": fit.iter().map(|f| json!({"loglik": f.loglik, "iterations": f.iterations, "converged": f.converged})).collect::<Vec<_>>(),
        "diagnostics": diagnostics.iter().map(|d| d.to_string()).collect::<Vec<_>>(),
    });
    write_json(out, "report.json", &report)?;
    // Correlation row per stratum; zero where either variance vanishes.
    let corr = |g: usize, h: usize| {
        let d = (variances[g] * variances[h]).sqrt();
        if d > 0.0 { cov[(g, h)] / d } else if g == h { 1.0 } else { 0.0 }
    };
    let corr_names: Vec<String> = (1..=a.dim).map(|h| format!("corr_{h}")).collect();
    let mut header = vec!["stratum", "mean", "variance"];
    header.extend(corr_names.iter().map(String::as_str));
    let rows: Vec<Vec<String>> = (0..a.dim)
        .map(|g| {
            let mut row = vec![(g + 1).to_string(), num(mean[g]), num(variances[g])];
            row.extend((0..a.dim).map(|h| num(corr(g, h))));
            row
        })
        .collect();
    write_csv(out, "plot_prior_moments.csv", &header, &rows)?;
    let mut s = format!("prior fitted to {} studies ({:?}, {:?})\n", archive.len(), a.method, a.structure);
    for g in 0..a.dim {
        let _ = writeln!(s, "  stratum {}: mean {:.4}, variance {:.4}", g + 1, mean[g], variances[g]);
    }
    for d in diagnostics.iter().filter(|d| d.severity == Severity::Warning) {
        let _ = writeln!(s, "  {d}");
    }
    let _ = write!(s, "wrote {}", out.display());
    Ok(s)
}

/// Dense matrix from a headerless CSV file, one row per line.
fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let row = raw
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse { source_name: name.clone(), line: i + 1, msg: e.to_string() })?;
        if rows.first().is_some_and(|r| r.len() != row.len()) {
            return Err(Error::Parse { source_name: name, line: i + 1, msg: "ragged matrix row".into() });
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Invalid(format!("{name}: empty matrix")));
    }
    let (r, c) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_row_iterator(r, c, rows.into_iter().flatten()))
}

fn optimize_design(a: &DesignArgs, out: &Path) -> Result<String> {
    let config = StrataConfig::load(&a.config)?;
    let g = config.n();
    let objective = match a.objective {
        ObjectiveArg::Estimation => {
            let l = match &a.l {
                Some(path) => read_matrix(path)?,
                None => DMatrix::identity(g, g),
            };
            let lambda = match &a.lambda {
                Some(path) => read_matrix(path)?,
                None => DMatrix::identity(l.nrows(), l.nrows()),
            };
            Objective::EstimationQuadratic { l, lambda }
        }
        ObjectiveArg::Welfare => Objective::InExperimentWelfare,
        ObjectiveArg::Policy => Objective::PolicyChoice,
    };
    let mode = match a.compliance {
        ComplianceArg::Perfect => ComplianceMode::Perfect,
        ComplianceArg::IttVoucherBudget => ComplianceMode::IttVoucherBudget,
        ComplianceArg::IttTakeupBudget => ComplianceMode::IttTakeupBudget,
    };
    let (problem, prior_doc) = match &a.prior {
        Some(path) => {
            let prior = parse_prior_document(&read_json(path)?)?;
            let doc = prior_document(&prior, None);
            (DesignProblem::new(config.clone(), objective, prior, mode)?, doc)
        }
        None => (DesignProblem::diffuse(config.clone(), objective, mode)?, json!({"kind": "diffuse"})),
    };
    let design = solve(&problem)?;
    let benchmark = no_information_design(&problem)?;
    let feasibility = check_feasibility(&design.propensities, &config, mode);
    let grid = a.grid_check.map(|res| grid_search_design(&problem, res)).transpose()?;
    ensure_dir(out)?;
    let report = json!({
        "command": "optimize-design",
        "objective": problem.objective.name(),
        "compliance": format!("{:?}", a.compliance).to_lowercase(),
        "config": config,
        "prior": prior_doc,
        "design": design,
        "benchmark": benchmark,
        "feasibility": feasibility,
        "grid_check": grid,
    });
    write_json(out, "report.json", &report)?;
    let rows: Vec<Vec<String>> =
        (0..g).map(|k| vec![(k + 1).to_string(), num(design.propensities[k]), num(benchmark.propensities[k])]).collect();
    write_csv(out, "plot_design.csv", &["stratum", "propensity", "benchmark_propensity"], &rows)?;
    let fmt = |e: &[f64]| e.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
    let mut s = format!("{} design: ({})\n", problem.objective.name(), fmt(&design.propensities));
    let _ = writeln!(s, "no-information benchmark: ({})", fmt(&benchmark.propensities));
    let _ = writeln!(s, "budget binding: {}, multiplier {:.6}", design.binding, design.multiplier);
    if let Some(gd) = &grid {
        let _ = writeln!(s, "grid oracle: ({})", fmt(&gd.propensities));
    }
    let _ = write!(s, "wrote {}", out.display());
    Ok(s)
}

fn estimator(e: EstimatorArg) -> Estimator {
    match e {
        EstimatorArg::Gaussian => Estimator::Gaussian,
        EstimatorArg::Npmle => Estimator::Npmle,
    }
}

fn default_truth() -> Vec<Marginal> {
    vec![Marginal::Gaussian { mean: 0.0, variance: 2.0 }, Marginal::Gaussian { mean: 0.0, variance: 1.0 }]
}

fn evaluate_regret(a: &RegretArgs, seed: u64, out: &Path) -> Result<String> {
    let truth: Vec<Marginal> = match &a.truth {
        Some(p) => serde_json::from_value(read_json(p)?).map_err(|e| Error::Invalid(format!("{}: {e}", p.display())))?,
        None => default_truth(),
    };
    if a.replications == 0 {
        return Err(Error::Invalid("--replications must be at least 1".into()));
    }
    let template = match a.template {
        TemplateArg::Quadratic => RegretTemplate::TwoStratumQuadratic { n_total: a.n_total, s2: a.s2 },
        TemplateArg::Adoption => RegretTemplate::TwoStratumAdoption { n_total: a.n_total, s2: a.s2, shares: [0.5, 0.5] },
    };
    let settings = ExperimentSettings { template, ..ExperimentSettings::default() };
    let est = estimator(a.estimator);
    let results = (0..a.replications)
        .into_par_iter()
        .map(|r| regret_experiment(&truth, &settings, est, a.n, derive_seed(seed, a.n as u64, r as u64)))
        .collect::<Result<Vec<_>>>()?;
    let satisfied = results.iter().filter(|r| r.bound_satisfied).count();
    let mean_regret = results.iter().map(|r| r.regret).sum::<f64>() / results.len() as f64;
    ensure_dir(out)?;
    let report = json!({
        "command": "evaluate-regret",
        "seed": seed,
        "n": a.n,
        "estimator": est,
        "truth": truth,
        "settings": settings,
        "bound_satisfied": satisfied,
        "replications": results.len(),
        "mean_regret": mean_regret,
        "results": results,
    });
    write_json(out, "report.json", &report)?;
    let rows: Vec<Vec<String>> = results
        .iter()
        .enumerate()
        .map(|(i, r)| vec![(i + 1).to_string(), num(r.regret), num(r.delta_bound), r.bound_satisfied.to_string()])
        .collect();
    write_csv(out, "plot_regret.csv", &["replication", "regret", "delta_bound", "bound_satisfied"], &rows)?;
    Ok(format!(
        "{} of {} replications satisfy 0 <= regret <= 2 Delta_n; mean regret {mean_regret:.3e}\nwrote {}",
        satisfied,
        results.len(),
        out.display()
    ))
}

fn simulate_rates(a: &RateArgs, seed: u64, out: &Path) -> Result<String> {
    let order = match a.order {
        OrderArg::First => RateOrder::First,
        OrderArg::Second => RateOrder::Second,
    };
    let mut config = RateConfig::standard(estimator(a.estimator), order, seed);
    config.replications = a.replications;
    config.n_grid = a.n_grid.clone();
    let table = rate_experiment(&config)?;
    ensure_dir(out)?;
    write_json(out, "report.json", &json!({"command": "simulate-rates", "config": config, "table": table}))?;
    let rows: Vec<Vec<String>> = table.rows.iter().map(|r| vec![r.n.to_string(), num(r.mean_regret), num(r.stderr)]).collect();
    write_csv(out, "plot_rates.csv", &["n", "mean_regret", "stderr"], &rows)?;
    let mut s = String::new();
    for r in &table.rows {
        let _ = writeln!(s, "n = {:>5}: mean regret {:.4e} (se {:.2e})", r.n, r.mean_regret, r.stderr);
    }
    let _ = write!(s, "log-log slope {:.3} (se {:.3})\nwrote {}", table.slope, table.slope_se, out.display());
    Ok(s)
}

fn dominance_check(a: &DominanceArgs, seed: u64, out: &Path) -> Result<String> {
    let prior = match &a.prior {
        Some(p) => parse_prior_document(&read_json(p)?)?,
        None => {
            if a.dim == 0 {
                return Err(Error::Invalid("--dim must be at least 1".into()));
            }
            Prior::Gaussian(GaussianPrior::new(DVector::zeros(a.dim), DMatrix::identity(a.dim, a.dim), Structure::Full))
        }
    };
    let kinds = standard_kinds(prior.dim());
    let study = blackwell_study(&prior, &kinds, a.pairs, a.draws, seed)?;
    ensure_dir(out)?;
    let report = json!({
        "command": "dominance-check",
        "seed": seed,
        "draws": a.draws,
        "prior": prior_document(&prior, None),
        "kinds": kinds,
        "checks": study.checks,
        "violations": study.violations,
        "pairs": study.pairs,
        "reports": study.reports,
    });
    write_json(out, "report.json", &report)?;
    let mut rows = Vec::new();
    for (p, r) in study.reports.iter().enumerate() {
        for c in &r.checks {
            rows.push(vec![
                (p + 1).to_string(),
                c.kind.clone(),
                num(c.value1.value),
                num(c.value2.value),
                num(c.difference.value),
                num(c.difference.mc_stderr),
                c.dominance_holds.to_string(),
            ]);
        }
    }
    write_csv(out, "plot_dominance.csv", &["pair", "kind", "value_less_noisy", "value_more_noisy", "difference", "stderr", "holds"], &rows)?;
    Ok(format!("{} checks on {} ordered pairs, {} violations\nwrote {}", study.checks, a.pairs, study.violations, out.display()))
}
