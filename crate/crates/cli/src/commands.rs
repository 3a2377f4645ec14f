//! One function per subcommand. Each writes its document and reports whether
//! the underlying fits converged.

use std::fs;
use std::io::Write;
use std::path::PathBuf;

use lqglm::datasets::vaso;
use lqglm::diagnose::{
    aic_q, bf_from_constrained, constrained_fit, deviance_q, envelope as build_envelope, residuals as compute_residuals,
    score_from_constrained, wald_test, LinearHypothesis, TestKind,
};
use lqglm::estimate::{fit_mlq, FitControl, FitResult};
use lqglm::expfam::{Family, Link};
use lqglm::numerics::{chi_square_sf, RngStream};
use lqglm::parallel::Parallelism;
use lqglm::qselect::{select_q_efficiency, select_q_stability, QGrid, QSelectResult};
use lqglm::simulate::{run_study, SimDesign};
use serde_json::{json, Value};

use crate::input::{load, read_matrix, read_table, read_vector, Loaded, ModelSpec};
use crate::{
    CliError, DataArgs, EnvelopeCmd, FitArgs, FitCmd, Format, MethodArg, OutputArgs, QArg, ResidualsCmd, RunArgs,
    SelectqCmd, SimulateCmd, StatArg, Status, TestCmd,
};

const SCHEMA: &str = "lq-glm/1";

fn status(converged: bool) -> Status {
    if converged {
        Status::Converged
    } else {
        Status::NotConverged
    }
}

fn load_data(args: &DataArgs) -> Result<Loaded, CliError> {
    if args.vaso {
        let data = vaso()?;
        let data = match args.phi {
            Some(phi) => data.with_phi(phi)?,
            None => data,
        };
        return Ok(Loaded {
            data,
            names: vec!["(Intercept)".into(), "log(volume)".into(), "log(rate)".into()],
        });
    }
    let path = args.data.as_ref().ok_or_else(|| CliError::input("--data is required"))?;
    let text = fs::read_to_string(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
    let table = read_table(&text, &path.display().to_string())?;
    let spec = ModelSpec {
        response: &args.response,
        family: Family::from_name(&args.family)?,
        link: Link::from_name(&args.link)?,
        log: &args.log,
        intercept: !args.no_intercept,
        phi: args.phi,
    };
    load(&table, &spec)
}

fn control(args: &FitArgs, q: f64) -> FitControl {
    if args.glm_protocol {
        FitControl::glm_protocol(q)
    } else {
        FitControl {
            q,
            max_iter: args.max_iter,
            tol: args.tol,
            ..FitControl::default()
        }
    }
}

fn parallelism(run: &RunArgs) -> Parallelism {
    Parallelism::from_jobs(run.jobs)
}

/// Resolves `--q`, running the stability rule for `auto`.
fn resolve_q(loaded: &Loaded, args: &FitArgs, run: &RunArgs) -> Result<(f64, Option<QSelectResult>), CliError> {
    match args.q {
        QArg::Value(q) => Ok((q, None)),
        QArg::Auto => {
            let grid = QGrid::new(args.grid.lo, args.grid.step, args.rho)?;
            let sel = select_q_stability(&loaded.data, &grid, &control(args, 1.0), parallelism(run))?;
            Ok((sel.q_opt, Some(sel)))
        }
    }
}

fn fit_model(loaded: &Loaded, args: &FitArgs, run: &RunArgs) -> Result<(FitResult, Option<QSelectResult>), CliError> {
    let (q, sel) = resolve_q(loaded, args, run)?;
    Ok((fit_mlq(&loaded.data, &control(args, q))?, sel))
}

fn write_output(path: &Option<PathBuf>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|e| CliError::input(format!("{}: {e}", p.display()))),
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| CliError::input(format!("stdout: {e}"))),
    }
}

fn write_json(out: &OutputArgs, mut doc: Value, command: &str) -> Result<(), CliError> {
    doc["schema"] = json!(SCHEMA);
    doc["command"] = json!(command);
    let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::input(e.to_string()))?;
    text.push('\n');
    write_output(&out.output, text.as_bytes())
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::input(e.to_string());
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::input(e.to_string()))
}

fn selection_json(sel: &QSelectResult) -> Value {
    json!({
        "method": sel.method,
        "q_opt": sel.q_opt,
        "rho": sel.rho,
        "q_values": sel.q_values,
        "qv_profile": sel.qv_profile,
    })
}

pub fn fit(cmd: &FitCmd) -> Result<Status, CliError> {
    let loaded = load_data(&cmd.data)?;
    let (fit, sel) = fit_model(&loaded, &cmd.fit, &cmd.run)?;
    let se = fit.se();
    match cmd.out.format {
        Format::Json => {
            let doc = json!({
                "family": loaded.data.family.name(),
                "link": loaded.data.link.name(),
                "n": loaded.data.n(),
                "coefficient_names": loaded.names,
                "q_used": fit.q,
                "q_selection": sel.as_ref().map(selection_json),
                "beta_q": fit.beta_q,
                "beta_star": fit.beta_star,
                "se": se,
                "weights": fit.weights,
                "fitted": fit.mu,
                "lq_value": fit.lq_value,
                "aic_q": aic_q(&loaded.data, &fit)?,
                "phi": fit.phi_hat,
                "iterations": fit.iterations,
                "converged": fit.converged,
                "note": fit.note,
            });
            write_json(&cmd.out, doc, "fit")?;
        }
        Format::Csv => {
            let rows = (0..fit.p()).map(|j| {
                vec![
                    loaded.names[j].clone(),
                    fit.beta_q.as_ref().map_or(String::new(), |b| b[j].to_string()),
                    fit.beta_star[j].to_string(),
                    se[j].to_string(),
                ]
            });
            let bytes = csv_bytes(&["coefficient", "beta_q", "beta_star", "se"], rows)?;
            write_output(&cmd.out.output, &bytes)?;
        }
    }
    Ok(status(fit.converged))
}

pub fn test(cmd: &TestCmd) -> Result<Status, CliError> {
    let loaded = load_data(&cmd.data)?;
    let h_mat = read_matrix(&cmd.h_mat)?;
    let h = read_vector(&cmd.h)?;
    let hyp = LinearHypothesis::new(h_mat, h)?;
    let (fit, _) = fit_model(&loaded, &cmd.fit, &cmd.run)?;
    let ctrl = control(&cmd.fit, fit.q);
    let data = &loaded.data;
    let wants = |s: StatArg| cmd.stat == s || cmd.stat == StatArg::All;
    let needs_tilde = cmd.stat != StatArg::Wald;
    let tilde = if needs_tilde { Some(constrained_fit(data, &hyp, &ctrl)?) } else { None };
    let mut tests = Vec::new();
    if wants(StatArg::Wald) {
        tests.push(json!(wald_test(&fit, &hyp)?));
    }
    if let Some(t) = &tilde {
        if wants(StatArg::Score) {
            tests.push(json!(score_from_constrained(data, t, &hyp)?));
        }
        if wants(StatArg::Bilinear) {
            tests.push(json!(bf_from_constrained(data, &fit, t, &hyp)?));
        }
        if wants(StatArg::Deviance) {
            let d = deviance_q(data, t, &fit)?;
            // the χ² reference only holds for the likelihood-ratio case
            let p = if fit.q == 1.0 { Some(chi_square_sf(d, hyp.dof())?) } else { None };
            tests.push(json!({
                "kind": TestKind::Deviance,
                "statistic": d,
                "dof": hyp.dof(),
                "p_value": p,
            }));
        }
    }
    let converged = fit.converged && tilde.as_ref().is_none_or(|t| t.converged);
    match cmd.out.format {
        Format::Json => {
            let doc = json!({
                "q_used": fit.q,
                "coefficient_names": loaded.names,
                "H": hyp.h_mat.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>(),
                "h": hyp.h.as_slice(),
                "fit_converged": fit.converged,
                "constrained_converged": tilde.as_ref().map(|t| t.converged),
                "tests": tests,
            });
            write_json(&cmd.out, doc, "test")?;
        }
        Format::Csv => {
            let rows = tests.iter().map(|t| {
                vec![
                    t["kind"].as_str().unwrap_or_default().to_string(),
                    t["statistic"].to_string(),
                    t["dof"].to_string(),
                    t["p_value"].as_f64().map_or(String::new(), |p| p.to_string()),
                ]
            });
            let bytes = csv_bytes(&["kind", "statistic", "dof", "p_value"], rows)?;
            write_output(&cmd.out.output, &bytes)?;
        }
    }
    Ok(status(converged))
}

pub fn residuals(cmd: &ResidualsCmd) -> Result<Status, CliError> {
    let loaded = load_data(&cmd.data)?;
    let (fit, _) = fit_model(&loaded, &cmd.fit, &cmd.run)?;
    let res = compute_residuals(&loaded.data, &fit, cmd.kind, RngStream::new(cmd.run.seed, 0))?;
    match cmd.out.format {
        Format::Json => {
            let doc = json!({
                "q_used": fit.q,
                "kind": cmd.kind,
                "seed": cmd.run.seed,
                "response": loaded.data.y,
                "fitted": fit.mu,
                "values": res.values,
                "flagged": res.flagged,
                "converged": fit.converged,
            });
            write_json(&cmd.out, doc, "residuals")?;
        }
        Format::Csv => {
            let rows = (0..loaded.data.n()).map(|i| {
                vec![
                    (i + 1).to_string(),
                    loaded.data.y[i].to_string(),
                    fit.mu[i].to_string(),
                    res.values[i].to_string(),
                ]
            });
            let bytes = csv_bytes(&["index", "y", "fitted", "residual"], rows)?;
            write_output(&cmd.out.output, &bytes)?;
        }
    }
    Ok(status(fit.converged))
}

pub fn envelope(cmd: &EnvelopeCmd) -> Result<Status, CliError> {
    let loaded = load_data(&cmd.data)?;
    let (fit, _) = fit_model(&loaded, &cmd.fit, &cmd.run)?;
    let env = build_envelope(
        &loaded.data,
        &fit,
        cmd.kind,
        cmd.reps,
        &control(&cmd.fit, fit.q),
        RngStream::new(cmd.run.seed, 0),
        parallelism(&cmd.run),
    )?;
    match cmd.out.format {
        Format::Json => {
            let mut doc = json!(env);
            doc["q_used"] = json!(fit.q);
            doc["seed"] = json!(cmd.run.seed);
            doc["converged"] = json!(fit.converged);
            write_json(&cmd.out, doc, "envelope")?;
        }
        Format::Csv => {
            let rows = (0..env.observed.len()).map(|i| {
                [env.theoretical[i], env.observed[i], env.lower[i], env.median[i], env.upper[i]]
                    .iter()
                    .map(f64::to_string)
                    .collect()
            });
            let bytes = csv_bytes(&["theoretical", "observed", "lower", "median", "upper"], rows)?;
            write_output(&cmd.out.output, &bytes)?;
        }
    }
    Ok(status(fit.converged))
}

pub fn selectq(cmd: &SelectqCmd) -> Result<Status, CliError> {
    let loaded = load_data(&cmd.data)?;
    let grid = QGrid::new(cmd.grid.lo, cmd.grid.step, cmd.rho)?;
    let ctrl = FitControl::default();
    let par = parallelism(&cmd.run);
    let sel = match cmd.method {
        MethodArg::Stability => select_q_stability(&loaded.data, &grid, &ctrl, par)?,
        MethodArg::Efficiency => select_q_efficiency(&loaded.data, &grid, &ctrl, par)?,
    };
    match cmd.out.format {
        Format::Json => {
            let mut doc = json!(sel);
            doc["coefficient_names"] = json!(loaded.names);
            write_json(&cmd.out, doc, "selectq")?;
        }
        Format::Csv => {
            let rows = sel.q_values.iter().enumerate().map(|(j, q)| {
                vec![
                    q.to_string(),
                    sel.qv_profile.get(j).map_or(String::new(), f64::to_string),
                    (*q == sel.q_opt).to_string(),
                ]
            });
            let bytes = csv_bytes(&["q", "qv", "selected"], rows)?;
            write_output(&cmd.out.output, &bytes)?;
        }
    }
    Ok(Status::Converged)
}

pub fn simulate(cmd: &SimulateCmd) -> Result<Status, CliError> {
    let mut design = SimDesign::new(cmd.n, cmd.eps, cmd.nu, cmd.reps, cmd.q_list.clone(), cmd.run.seed);
    if !cmd.beta.is_empty() {
        design.beta_true = cmd.beta.clone();
    }
    design.intercept = cmd.intercept;
    design.fixed_x = cmd.fixed_x;
    let report = run_study(&design, parallelism(&cmd.run))?;
    let bytes = match cmd.format {
        Format::Csv => report.to_csv()?.into_bytes(),
        Format::Json => {
            let mut doc = json!(report);
            doc["schema"] = json!(SCHEMA);
            doc["command"] = json!("simulate");
            let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::input(e.to_string()))?;
            text.push('\n');
            text.into_bytes()
        }
    };
    write_output(&cmd.output, &bytes)?;
    eprintln!("simulate: {} replicates in {:.2}s", cmd.reps, report.runtime);
    Ok(Status::Converged)
}
