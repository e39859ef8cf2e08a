use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

use gpemu_core::calibration::diagnostics::{ess_batch_means, quantile};
use gpemu_core::estimation::kernel_diagnostics;
use gpemu_core::model::GpModelFile;
use gpemu_core::ppgp::{PpgpModelFile, ppgp_predict};
use gpemu_core::prediction::predict_batch;
use gpemu_core::{calibrate as run_chain, fit as fit_scalar, ppgp_fit, CalibrationProblem, GpModel, PpgpModel, Simulator};

use crate::config::{check_schema, read_json, write_json, CalibrateConfig, FitFileConfig, RunInfo, SimulatorConfig};
use crate::table::{read_table, write_table, Table};
use crate::{sibling, CliError};

fn json_err(path: &Path) -> impl Fn(serde_json::Error) -> CliError + '_ {
    move |source| CliError::Json {
        path: path.display().to_string(),
        source,
    }
}

fn num(v: f64) -> String {
    // shortest round-trip form, exponent notation for very large or small values
    format!("{v:?}")
}

pub fn fit(design_p: &Path, outputs_p: &Path, config_p: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<(), CliError> {
    let design = read_table(design_p)?;
    let outputs = read_table(outputs_p)?;
    if design.data.nrows() != outputs.data.nrows() {
        return Err(CliError::Validation(format!(
            "design has {} rows but outputs have {}",
            design.data.nrows(),
            outputs.data.nrows()
        )));
    }
    let mut cfg = match config_p {
        Some(p) => {
            let c: FitFileConfig = read_json(p)?;
            check_schema(c.schema, p)?;
            c
        }
        None => FitFileConfig::default(),
    };
    if let Some(s) = seed {
        cfg.fit.seed = s;
    }
    let kernel = cfg.kernel.choice(design.data.ncols());
    let (mut model, report) = if outputs.data.ncols() == 1 {
        let f = outputs.data.column(0).into_owned();
        let (m, r) = fit_scalar(&design.data, &f, cfg.basis, &kernel, &cfg.fit)?;
        (serde_json::to_value(m.to_file()).expect("model serializes"), r)
    } else {
        let (mut m, r) = ppgp_fit(&design.data, &outputs.data.transpose(), cfg.basis, &kernel, &cfg.fit)?;
        m.labels = Some(outputs.headers.clone());
        (serde_json::to_value(m.to_file()).expect("model serializes"), r)
    };
    let mut fit_cfg = cfg.fit.clone();
    fit_cfg.prior = report.prior.clone();
    let materialized = json!({
        "schema": 1,
        "kernel": kernel,
        "basis": cfg.basis,
        "fit": fit_cfg,
    });
    let mut inputs = vec![design_p, outputs_p];
    inputs.extend(config_p);
    let run = RunInfo::new("fit", materialized, &inputs, cfg.fit.seed)?;
    model["run"] = serde_json::to_value(&run).expect("run serializes");
    write_json(out, &model)?;
    write_json(
        &sibling(out, "report.json"),
        &json!({ "schema": 1, "kind": "fit_report", "run": run, "report": report }),
    )
}

enum LoadedModel {
    Scalar(GpModel),
    Vector(PpgpModel),
}

fn load_model(path: &Path, v: Value) -> Result<LoadedModel, CliError> {
    match v.get("kind").and_then(Value::as_str) {
        Some("gp_model") => {
            let f: GpModelFile = serde_json::from_value(v).map_err(json_err(path))?;
            Ok(LoadedModel::Scalar(GpModel::from_file(f)?))
        }
        Some("ppgp_model") => {
            let f: PpgpModelFile = serde_json::from_value(v).map_err(json_err(path))?;
            Ok(LoadedModel::Vector(PpgpModel::from_file(f)?))
        }
        other => Err(CliError::Validation(format!(
            "{}: unknown artifact kind {other:?}",
            path.display()
        ))),
    }
}

fn artifact_seed(v: &Value) -> u64 {
    v.pointer("/run/seed").and_then(Value::as_u64).unwrap_or(0)
}

pub fn predict(model_p: &Path, test_p: &Path, include_noise: bool, level: f64, out: &Path) -> Result<(), CliError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(CliError::Validation(format!("--level must lie in (0, 1), got {level}")));
    }
    let v: Value = read_json(model_p)?;
    let seed = artifact_seed(&v);
    let model = load_model(model_p, v)?;
    let test = read_table(test_p)?;
    let config = json!({ "schema": 1, "include_noise": include_noise, "level": level });
    let run = RunInfo::new("predict", config, &[model_p, test_p], seed)?;
    let cols = |extra: &[&str]| -> Vec<String> {
        extra
            .iter()
            .chain(&["location", "scale2", "dof", "lower", "upper"])
            .map(|s| s.to_string())
            .collect()
    };
    match model {
        LoadedModel::Scalar(m) => {
            let preds = predict_batch(&m, &test.data, include_noise)?;
            let mut rows = Vec::with_capacity(preds.len());
            for pt in &preds {
                let (lo, hi) = pt.interval(level)?;
                rows.push(vec![num(pt.location), num(pt.scale2), pt.dof.to_string(), num(lo), num(hi)]);
            }
            write_table(out, &run.header(), &cols(&[]), rows)
        }
        LoadedModel::Vector(m) => {
            if include_noise && m.kernel().nugget.is_some() {
                return Err(CliError::Validation(
                    "--include-noise is not supported for vector emulators".into(),
                ));
            }
            if test.data.ncols() != m.design().ncols() {
                return Err(gpemu_core::Error::dim("test input", m.design().ncols(), test.data.ncols()).into());
            }
            let labels = m.labels.clone().unwrap_or_else(|| (1..=m.k()).map(|j| format!("y{j}")).collect());
            let mut rows = Vec::new();
            for i in 0..test.data.nrows() {
                let x: Vec<f64> = test.data.row(i).iter().copied().collect();
                for (j, pt) in ppgp_predict(&m, &x)?.iter().enumerate() {
                    let (lo, hi) = pt.interval(level)?;
                    rows.push(vec![
                        i.to_string(),
                        labels[j].clone(),
                        num(pt.location),
                        num(pt.scale2),
                        pt.dof.to_string(),
                        num(lo),
                        num(hi),
                    ]);
                }
            }
            write_table(out, &run.header(), &cols(&["row", "output"]), rows)
        }
    }
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn build_simulator(cfg: &CalibrateConfig, config_p: &Path, p: usize) -> Result<Simulator, CliError> {
    let d = cfg.bounds.len();
    match &cfg.simulator {
        SimulatorConfig::Linear { intercept } => {
            let intercept = *intercept;
            let expected = p + usize::from(intercept);
            if d != expected {
                return Err(CliError::Validation(format!(
                    "linear simulator over {p} inputs needs {expected} parameters, got {d} bounds"
                )));
            }
            Ok(Simulator::direct(move |x, t| {
                let (c, t) = if intercept { (t[0], &t[1..]) } else { (0.0, t) };
                Ok(c + x.iter().zip(t).map(|(a, b)| a * b).sum::<f64>())
            }))
        }
        SimulatorConfig::Emulated { model, coords } => {
            let path = resolve(config_p, model);
            let v: Value = read_json(&path)?;
            match load_model(&path, v)? {
                LoadedModel::Scalar(m) => {
                    if m.p() != p + d {
                        return Err(gpemu_core::Error::dim("emulator inputs (x, θ)", p + d, m.p()).into());
                    }
                    Ok(Simulator::emulated(m))
                }
                LoadedModel::Vector(m) => {
                    let coords = coords.as_ref().ok_or_else(|| {
                        CliError::Validation("a vector emulator needs `coords`".into())
                    })?;
                    if m.design().ncols() != d {
                        return Err(gpemu_core::Error::dim("emulator inputs θ", d, m.design().ncols()).into());
                    }
                    let c = read_table(&resolve(config_p, coords))?;
                    Ok(Simulator::emulated_vector(m, c.data)?)
                }
            }
        }
    }
}

pub fn calibrate(
    field_p: &Path,
    output_p: Option<&Path>,
    config_p: &Path,
    seed: Option<u64>,
    out: &Path,
) -> Result<(), CliError> {
    let mut cfg: CalibrateConfig = read_json(config_p)?;
    check_schema(cfg.schema, config_p)?;
    let field = read_table(field_p)?;
    let (x, y): (DMatrix<f64>, DVector<f64>) = match output_p {
        Some(p) => {
            let t = read_table(p)?;
            if t.data.ncols() != 1 || t.data.nrows() != field.data.nrows() {
                return Err(CliError::Validation(format!(
                    "{}: expected one column of {} observations",
                    p.display(),
                    field.data.nrows()
                )));
            }
            (field.data.clone(), t.data.column(0).into_owned())
        }
        None => {
            let j = field.column(&cfg.response).ok_or_else(|| {
                CliError::Validation(format!("{}: no `{}` column", field_p.display(), cfg.response))
            })?;
            (field.without(j).data, field.data.column(j).into_owned())
        }
    };
    let simulator = build_simulator(&cfg, config_p, x.ncols())?;
    if let Some(s) = seed {
        cfg.mcmc.seed = s;
    }
    let problem = CalibrationProblem::new(x, y, simulator, cfg.bounds.clone(), cfg.discrepancy.clone(), cfg.prior.clone())?;
    let chain = run_chain(&problem, &cfg.mcmc)?;

    cfg.schema = Some(1);
    cfg.prior = problem.prior().clone();
    let mut inputs = vec![field_p];
    inputs.extend(output_p);
    inputs.push(config_p);
    let run = RunInfo::new(
        "calibrate",
        serde_json::to_value(&cfg).expect("config serializes"),
        &inputs,
        cfg.mcmc.seed,
    )?;

    let d = problem.theta_dim();
    let mut headers = vec!["iter".to_string()];
    headers.extend((1..=d).map(|j| format!("theta_{j}")));
    headers.extend(chain.kernel_names.iter().cloned());
    headers.push("log_post".into());
    headers.push("max_corr".into());
    let rows = (0..chain.len()).map(|i| {
        let mut r = vec![(chain.burn_in + i * chain.thin).to_string()];
        r.extend(chain.theta[i].iter().map(|v| num(*v)));
        r.extend(chain.kernel[i].iter().map(|v| num(*v)));
        r.push(num(chain.log_post[i]));
        r.push(num(chain.max_corr[i]));
        r
    });
    write_table(out, &run.header(), &headers, rows)?;

    let mut summary = serde_json::to_value(chain.summary()).expect("summary serializes");
    summary["run"] = serde_json::to_value(&run).expect("run serializes");
    write_json(&sibling(out, "summary.json"), &summary)
}

pub fn diagnose(path: &Path, out: Option<&Path>) -> Result<(), CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let report = match serde_json::from_slice::<Value>(&bytes) {
        Ok(v) => diagnose_model(path, v)?,
        Err(_) => {
            let table = read_table(path).map_err(|e| {
                CliError::Validation(format!("{}: unknown artifact ({e})", path.display()))
            })?;
            diagnose_chain(path, &table)?
        }
    };
    match out {
        Some(o) => write_json(o, &report),
        None => {
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            // a closed pipe downstream is not an error of ours
            let _ = writeln!(std::io::stdout(), "{text}");
            Ok(())
        }
    }
}

fn diagnose_model(path: &Path, v: Value) -> Result<Value, CliError> {
    let seed = artifact_seed(&v);
    let threshold = v
        .pointer("/run/config/fit/inert_threshold")
        .and_then(Value::as_f64)
        .unwrap_or(0.1);
    let kind = v.get("kind").and_then(Value::as_str).unwrap_or_default().to_string();
    let model = load_model(path, v)?;
    let (design, kernel, prov) = match &model {
        LoadedModel::Scalar(m) => (m.design(), m.kernel(), &m.provenance),
        LoadedModel::Vector(m) => (m.design(), m.kernel(), &m.provenance),
    };
    let kd = kernel_diagnostics(design, kernel, threshold);
    let inputs: Vec<Value> = kernel
        .range
        .iter()
        .enumerate()
        .map(|(l, r)| {
            json!({
                "input": l + 1,
                "range": r,
                "sensitivity": kd.sensitivity.as_ref().map(|s| s[l]),
                "inert": kd.inert.as_ref().map(|s| s[l]),
            })
        })
        .collect();
    let run = RunInfo::new("diagnose", json!({ "schema": 1, "inert_threshold": threshold }), &[path], seed)?;
    Ok(json!({
        "schema": 1,
        "kind": "model_diagnostics",
        "artifact": kind,
        "condition_number": kd.condition_number,
        "min_offdiag": kd.min_offdiag,
        "max_offdiag": kd.max_offdiag,
        "grad_norm": prov.grad_norm,
        "converged": prov.converged,
        "jitter": prov.jitter,
        "inputs": inputs,
        "run": run,
    }))
}

fn diagnose_chain(path: &Path, t: &Table) -> Result<Value, CliError> {
    let Some(lp) = t.column("log_post") else {
        return Err(CliError::Validation(format!(
            "{}: unknown artifact (no `log_post` column)",
            path.display()
        )));
    };
    let theta: Vec<usize> = (0..t.headers.len()).filter(|&j| t.headers[j].starts_with("theta_")).collect();
    let kernel: Vec<usize> = (0..t.headers.len())
        .filter(|&j| {
            let h = &t.headers[j];
            h.starts_with("xi_") || h == "log_eta" || h == "log_sigma0_sq"
        })
        .collect();
    let n = t.data.nrows();
    // consecutive rows differ exactly when a proposal in that block was accepted
    let moved = |cols: &[usize]| -> f64 {
        if n < 2 || cols.is_empty() {
            return 0.0;
        }
        let c = (1..n)
            .filter(|&i| cols.iter().any(|&j| t.data[(i, j)] != t.data[(i - 1, j)]))
            .count();
        c as f64 / (n - 1) as f64
    };
    let ess: Vec<Value> = theta
        .iter()
        .chain(&kernel)
        .chain(std::iter::once(&lp))
        .map(|&j| {
            let col: Vec<f64> = t.data.column(j).iter().copied().collect();
            let e = ess_batch_means(&col);
            json!({ "column": t.headers[j], "ess": e.ess, "failed": e.failed })
        })
        .collect();
    let discrepancy = t.column("log_eta").is_some();
    let identifiability = match t.column("max_corr") {
        Some(j) if discrepancy => {
            let mut m: Vec<f64> = t.data.column(j).iter().copied().collect();
            m.sort_by(f64::total_cmp);
            quantile(&m, 0.5) > 0.99
        }
        _ => false,
    };
    let run = RunInfo::new("diagnose", json!({ "schema": 1 }), &[path], 0)?;
    Ok(json!({
        "schema": 1,
        "kind": "chain_diagnostics",
        "draws": n,
        "acceptance_theta": moved(&theta),
        "acceptance_kernel": moved(&kernel),
        "ess": ess,
        "identifiability_warning": identifiability,
        "run": run,
    }))
}
