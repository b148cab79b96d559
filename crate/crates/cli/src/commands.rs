use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use deeppce::data::{gen_100d, gen_quadratic_map};
use deeppce::montecarlo::{mc_sobol_on_function, validate_model, McConfig, Query};
use deeppce::rng::{stream_id, stream_rng, PolarNormal};
use deeppce::training::{fold_batchnorm, loss_mse, relative_mse};
use deeppce::{CircuitModel, ConditionSpec, Dataset, ExactInference, PolyFamily};
use ndarray::{Array1, Array2};
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;
use crate::parse::{parse_condition, parse_set, parse_sizes};
use crate::run_dir::RunDir;
use crate::{Problem, QueryKind};

const DEFAULT_RUN_DIR: &str = "run";
const CONDITION_STREAM: u64 = 0xC11;

fn open_run_dir(flag: Option<PathBuf>, config: Option<&RunConfig>) -> Result<RunDir, CliError> {
    let root = flag
        .or_else(|| config.and_then(|c| c.output.run_dir.clone()))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_DIR));
    RunDir::create(&root)
}

fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Io(format!("{what} '{}' not found", path.display())))
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Tensor file, or CSV (which needs the marginals supplied).
fn load_dataset(path: &Path, marginals: &[PolyFamily]) -> Result<Dataset, CliError> {
    require_file(path, "dataset")?;
    if is_csv(path) {
        if marginals.is_empty() {
            return Err(CliError::Config(
                "CSV data needs input marginals ([data].marginals)".into(),
            ));
        }
        Ok(Dataset::load_csv(path, marginals)?)
    } else {
        Ok(Dataset::load_tensor(path)?)
    }
}

fn load_model(path: &Path) -> Result<CircuitModel, CliError> {
    require_file(path, "model")?;
    Ok(CircuitModel::load(path)?)
}

fn pretty(v: &Value) -> Result<Vec<u8>, CliError> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}_{i}")).collect()
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn gen_data(
    run_dir: Option<PathBuf>,
    problem: Problem,
    n: usize,
    seed: u64,
    out: &Path,
    inputs: usize,
    outputs: usize,
) -> Result<(), CliError> {
    if n == 0 {
        return Err(CliError::Argument("--n must be at least 1".into()));
    }
    let data = match problem {
        Problem::Bench100d => gen_100d(n, seed)?,
        Problem::QuadraticMap => gen_quadratic_map(inputs, outputs, n, seed)?,
    };
    let run = open_run_dir(run_dir, None)?;
    let path = run.artifact_path(out)?;
    if is_csv(&path) {
        data.save_csv(&path)?;
    } else {
        data.save_tensor(&path)?;
    }
    println!(
        "wrote {} samples ({} inputs, {} outputs) to {}",
        data.n_samples(),
        data.n_inputs(),
        data.n_outputs(),
        path.display()
    );
    let problem = match problem {
        Problem::Bench100d => "100d",
        Problem::QuadraticMap => "quadratic-map",
    };
    run.record(
        "gen-data",
        json!({ "problem": problem, "n": n, "inputs": data.n_inputs(), "outputs": data.n_outputs(),
                "marginals": data.marginals.iter().map(|m| m.to_string()).collect::<Vec<_>>(),
                "provenance": data.provenance }),
        json!({ "seed": seed }),
        &[path],
    )
}

#[allow(clippy::too_many_arguments)]
pub fn train(
    run_dir: Option<PathBuf>,
    config_path: &Path,
    data: Option<PathBuf>,
    out_model: &Path,
    restarts: Option<usize>,
    seed: Option<u64>,
    epochs: Option<usize>,
) -> Result<(), CliError> {
    require_file(config_path, "config file")?;
    let mut cfg = RunConfig::load(config_path)?;
    // flags win over the file
    if let Some(d) = data {
        cfg.data.path = Some(d);
    }
    if let Some(r) = restarts {
        cfg.train.n_restarts = r;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.max_epochs = e;
    }
    cfg.train.validate()?;
    let data_path = cfg
        .data
        .path
        .clone()
        .ok_or_else(|| CliError::Config("no dataset: set [data].path or pass --data".into()))?;
    let marginals = cfg.marginals()?;
    let fractions = cfg.fractions()?;
    let data = load_dataset(&data_path, &marginals)?;
    let run = open_run_dir(run_dir, Some(&cfg))?;

    let (tr, val, test) = data.split(fractions, cfg.data.split_seed)?;
    let template = CircuitModel::build(cfg.model_config(data.n_inputs(), data.n_outputs()), data.marginals.clone())?;
    let start = Instant::now();
    let report = deeppce::training::train(&template, &cfg.train, &tr, &val)?;
    let secs = start.elapsed().as_secs_f64();
    let best = report.best_model.as_ref().expect("chosen restart has a model");

    let test_rel = if test.n_samples() > 0 {
        let pred = best.forward(test.inputs.view())?;
        Some(relative_mse(pred.view(), test.targets.view())?)
    } else {
        None
    };

    let model_path = run.artifact_path(out_model)?;
    best.save(&model_path)?;
    let seeds = json!({
        "model_seed": cfg.model.seed,
        "train_seed": cfg.train.seed,
        "split_seed": cfg.data.split_seed,
        "restart_seeds": report.restarts.iter().map(|r| r.seed).collect::<Vec<_>>(),
    });
    let config_echo = serde_json::to_value(&cfg)?;
    let report_json = json!({
        "config": config_echo,
        "seeds": seeds,
        "data": { "path": data_path.display().to_string(), "provenance": data.provenance,
                  "n_train": tr.n_samples(), "n_val": val.n_samples(), "n_test": test.n_samples() },
        "wall_clock_secs": secs,
        "test_relative_mse": test_rel,
        "report": serde_json::to_value(&report)?,
    });
    let report_path = run.write(Path::new("train_report.json"), &pretty(&report_json)?)?;

    println!("restart\tseed\tstatus\tepochs\tbest_epoch\tval_mse\tval_rel_mse");
    for r in &report.restarts {
        let status = match &r.status {
            deeppce::training::RestartStatus::Completed => "ok".to_string(),
            deeppce::training::RestartStatus::Failed { reason } => format!("failed ({reason})"),
        };
        println!(
            "{}\t{}\t{}\t{}\t{}\t{:.6e}\t{:.6e}",
            r.restart + 1,
            r.seed,
            status,
            r.epochs_run,
            r.best_epoch,
            r.best_val_mse,
            r.best_val_relative_mse
        );
    }
    println!(
        "chosen restart {} (val relative MSE {:.3e}){}; model written to {}",
        report.chosen_restart + 1,
        report.best().best_val_relative_mse,
        test_rel.map(|t| format!(", test relative MSE {t:.3e}")).unwrap_or_default(),
        model_path.display()
    );
    run.record("train", config_echo, seeds, &[model_path, report_path])
}

pub fn predict(run_dir: Option<PathBuf>, model_path: &Path, data_path: &Path, out: &Path) -> Result<(), CliError> {
    let model = load_model(model_path)?;
    let data = load_dataset(data_path, &model.marginals)?;
    let pred = model.forward(data.inputs.view())?;
    if data.n_outputs() != model.d_out() {
        return Err(deeppce::Error::DimensionMismatch {
            context: "dataset outputs",
            expected: model.d_out(),
            found: data.n_outputs(),
        }
        .into());
    }
    let mse = loss_mse(pred.view(), data.targets.view())?;
    let rel = relative_mse(pred.view(), data.targets.view())?;

    let run = open_run_dir(run_dir, None)?;
    let mut csv = labels("y", model.d_out()).join(",");
    csv.push('\n');
    for row in pred.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        csv.push_str(&cells.join(","));
        csv.push('\n');
    }
    let pred_path = run.write(out, csv.as_bytes())?;
    let config = json!({
        "model": model_path.display().to_string(),
        "data": data_path.display().to_string(),
        "model_config": serde_json::to_value(&model.config)?,
        "provenance": data.provenance,
    });
    let seeds = json!({ "model_seed": model.config.seed });
    let report = json!({ "config": config, "seeds": seeds, "n_samples": data.n_samples(),
                         "mse": mse, "relative_mse": rel });
    let report_path = run.write(&out.with_extension("json"), &pretty(&report)?)?;
    println!("relative MSE {rel:.6e} (MSE {mse:.6e}) over {} samples", data.n_samples());
    run.record("predict", config, seeds, &[pred_path, report_path])
}

fn query_name(q: QueryKind) -> &'static str {
    match q {
        QueryKind::Mean => "mean",
        QueryKind::Cov => "cov",
        QueryKind::CondMean => "cond-mean",
        QueryKind::CondCov => "cond-cov",
        QueryKind::CovCondExp => "cov-cond-exp",
        QueryKind::ExpCondCov => "exp-cond-cov",
    }
}

fn vector(v: Array1<f64>) -> Value {
    json!(v.to_vec())
}

fn matrix(m: Array2<f64>) -> Value {
    json!(rows(&m))
}

pub fn moments(
    run_dir: Option<PathBuf>,
    model_path: &Path,
    query: QueryKind,
    condition: Option<&str>,
    set: Option<&str>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model = fold_batchnorm(&load_model(model_path)?)?;
    let inf = ExactInference::new(&model)?;
    let need_condition = || -> Result<ConditionSpec, CliError> {
        parse_condition(condition.ok_or_else(|| {
            CliError::Argument(format!("--query {} needs --condition", query_name(query)))
        })?)
    };
    let need_set = || -> Result<Vec<usize>, CliError> {
        parse_set(set.ok_or_else(|| CliError::Argument(format!("--query {} needs --set", query_name(query))))?)
    };
    let (value, spec, set_used) = match query {
        QueryKind::Mean => (vector(inf.mean()?), None, None),
        QueryKind::Cov => (matrix(inf.covariance()?), None, None),
        QueryKind::CondMean => {
            let spec = need_condition()?;
            (vector(inf.conditional_mean(&spec)?), Some(spec), None)
        }
        QueryKind::CondCov => {
            let spec = need_condition()?;
            (matrix(inf.conditional_covariance(&spec)?), Some(spec), None)
        }
        QueryKind::CovCondExp => {
            let s = need_set()?;
            (matrix(inf.covariance_of_conditional_expectation(&s)?), None, Some(s))
        }
        QueryKind::ExpCondCov => {
            let s = need_set()?;
            (matrix(inf.expected_conditional_covariance(&s)?), None, Some(s))
        }
    };
    let condition_json = spec.map(|s| {
        s.fixed()
            .iter()
            .map(|(i, v)| ((i + 1).to_string(), json!(v)))
            .collect::<serde_json::Map<_, _>>()
    });
    let result = json!({
        "query": query_name(query),
        "model": model_path.display().to_string(),
        "condition": condition_json,
        "set": set_used.map(|s| s.iter().map(|i| i + 1).collect::<Vec<_>>()),
        "outputs": labels("y", model.d_out()),
        "value": value,
    });
    let text = pretty(&result)?;
    print!("{}", String::from_utf8_lossy(&text));
    if let Some(out) = out {
        let run = open_run_dir(run_dir, None)?;
        let path = run.write(out, &text)?;
        run.record(
            "moments",
            json!({ "query": query_name(query), "model": model_path.display().to_string(),
                    "condition": condition, "set": set }),
            json!({ "model_seed": model.config.seed }),
            &[path],
        )?;
    }
    Ok(())
}

pub fn sobol(
    run_dir: Option<PathBuf>,
    model_path: &Path,
    normalize_sum: bool,
    out: &Path,
    mc_baseline: Option<&str>,
    seed: u64,
) -> Result<(), CliError> {
    let unfolded = load_model(model_path)?;
    let model = fold_batchnorm(&unfolded)?;
    let inf = ExactInference::new(&model)?;
    let start = Instant::now();
    let analytic = inf.sobol_first_order()?;
    let analytic_secs = start.elapsed().as_secs_f64();
    let indices = if normalize_sum {
        analytic.normalized_by_sum()
    } else {
        analytic.indices.clone()
    };

    let mc = match mc_baseline {
        None => None,
        Some(s) => {
            let sizes = parse_sizes(s)?;
            let [evaluations] = sizes[..] else {
                return Err(CliError::Argument("--mc-baseline takes one evaluation count".into()));
            };
            let n_base = evaluations / (model.d_in() + 2);
            if n_base < 2 {
                return Err(CliError::Argument(format!(
                    "--mc-baseline {evaluations} is below 2·(D + 2) = {}",
                    2 * (model.d_in() + 2)
                )));
            }
            Some(mc_sobol_on_function(&model, n_base, seed)?)
        }
    };

    let run = open_run_dir(run_dir, None)?;
    let ratio = mc.as_ref().map(|m| m.wall_clock_secs / analytic_secs);
    let result = json!({
        "model": model_path.display().to_string(),
        "normalized_by_sum": normalize_sum,
        "inputs": labels("X", model.d_in()),
        "outputs": labels("y", model.d_out()),
        "indices": rows(&indices),
        "zero_variance": analytic.zero_variance,
        "analytic_secs": analytic_secs,
        "mc_baseline": mc.as_ref().map(|m| json!({
            "n_base": m.n_base,
            "n_evaluations": m.n_evaluations,
            "wall_clock_secs": m.wall_clock_secs,
            "indices": rows(&m.indices),
            "std_err": rows(&m.std_err),
        })),
        "wall_clock_ratio": ratio,
        "seeds": { "mc_seed": seed, "model_seed": model.config.seed },
    });
    let path = run.write(out, &pretty(&result)?)?;

    let mut table = String::from("input");
    for o in 1..=model.d_out() {
        let _ = write!(table, "\tS(y_{o})");
        if mc.is_some() {
            let _ = write!(table, "\tMC(y_{o})\tse");
        }
    }
    table.push('\n');
    for i in 0..model.d_in() {
        let _ = write!(table, "X_{}", i + 1);
        for o in 0..model.d_out() {
            let _ = write!(table, "\t{:.6}", indices[[o, i]]);
            if let Some(m) = &mc {
                let _ = write!(table, "\t{:.6}\t{:.1e}", m.indices[[o, i]], m.std_err[[o, i]]);
            }
        }
        table.push('\n');
    }
    print!("{table}");
    match (&mc, ratio) {
        (Some(m), Some(r)) => println!(
            "analytic {analytic_secs:.4} s, Monte Carlo {:.2} s at {} evaluations, ratio {r:.0}",
            m.wall_clock_secs, m.n_evaluations
        ),
        _ => println!("analytic {analytic_secs:.4} s"),
    }
    run.record(
        "sobol",
        json!({ "model": model_path.display().to_string(), "normalize_sum": normalize_sum,
                "mc_baseline": mc_baseline }),
        json!({ "mc_seed": seed, "model_seed": model.config.seed }),
        &[path],
    )
}

/// Condition values for `set`, drawn from the model's own marginals.
fn draw_from_marginals(model: &CircuitModel, set: &[usize], seed: u64) -> Result<ConditionSpec, CliError> {
    let mut rng = stream_rng(seed, stream_id(&[CONDITION_STREAM]));
    let mut normal = PolarNormal::new();
    let mut pairs = Vec::with_capacity(set.len());
    for &i in set {
        let m = model.marginals.get(i).ok_or_else(|| {
            CliError::Argument(format!("variable {} out of range for {} inputs", i + 1, model.d_in()))
        })?;
        pairs.push((i, m.sample(&mut rng, &mut normal)));
    }
    Ok(ConditionSpec::new(pairs)?)
}

#[allow(clippy::too_many_arguments)]
pub fn mc_check(
    run_dir: Option<PathBuf>,
    model_path: &Path,
    runs: usize,
    sizes: &str,
    set: &str,
    condition: Option<&str>,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let cfg = McConfig {
        sample_sizes: parse_sizes(sizes)?,
        n_runs: runs,
        seed,
    };
    cfg.validate()?;
    let model = load_model(model_path)?;
    let set = parse_set(set)?;
    if set.is_empty() {
        return Err(CliError::Argument("--set must name at least one variable".into()));
    }
    let spec = match condition {
        Some(c) => parse_condition(c)?,
        None => draw_from_marginals(&model, &set, seed)?,
    };
    let report = validate_model(&model, &cfg, &spec, &set, &Query::ALL)?;

    let run = open_run_dir(run_dir, None)?;
    let slopes: serde_json::Map<String, Value> = Query::ALL
        .iter()
        .map(|&q| {
            let name = serde_json::to_value(q).expect("query names serialize");
            (name.as_str().unwrap_or_default().to_string(), json!(report.convergence_slope(q)))
        })
        .collect();
    let config = json!({
        "model": model_path.display().to_string(),
        "runs": runs,
        "sizes": cfg.sample_sizes,
        "set": set.iter().map(|i| i + 1).collect::<Vec<_>>(),
        "condition": spec.fixed().iter().map(|(i, v)| ((i + 1).to_string(), json!(v))).collect::<serde_json::Map<_, _>>(),
    });
    let seeds = json!({ "mc_seed": seed, "model_seed": model.config.seed });
    let result = json!({
        "config": config,
        "seeds": seeds,
        "min_p": report.min_p(),
        "convergence_slopes": slopes,
        "report": serde_json::to_value(&report)?,
    });
    let json_path = run.write(out, &pretty(&result)?)?;
    let table = report.to_table();
    let table_path = run.write(&out.with_extension("tsv"), table.as_bytes())?;
    print!("{table}");
    println!("min p = {:.4}", report.min_p());
    run.record("mc-check", config, seeds, &[json_path, table_path])
}
