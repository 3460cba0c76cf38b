//! Command-line front end: construct / verify / bounds / train / sweep /
//! fit / plot, JSON configs with key=value overrides, CSV outputs, and
//! hand-emitted SVG plots.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 bad configuration or usage.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::bounds::{
    capacity_formulas, encoder_lower_bound, phi, near_orthogonal_bound, BoundReport, OptConfig,
    SequenceEncoder,
};
use crate::construct::{build_memorizer, verify_memorizer, ConstructionConfig, SkipMode};
use crate::model::{AoTParams, ModelConfig};
use crate::numkernel::{Matrix, ModelForm};
use crate::task::{
    check_assumptions, make_association_task, make_noisy_lookup_task, TaskDistribution,
};
use crate::trainlab::{
    figure_preset, fit_scaling_law, read_sweep_csv, run_sweep, train_model, FitRequest,
    SweepRecord, SweepSpec, TrainConfig, XAxis,
};
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "aotmem",
    version,
    about = "Memorization laboratory for one-layer attention-only transformers"
)]
struct Cli {
    /// Emit a machine-readable JSON result on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build an exact memorizer for a random association task and write the
    /// model and its certificate.
    Construct(ConstructArgs),
    /// Re-measure a stored model against a task.
    Verify(VerifyArgs),
    /// Lower bound and upper bounds for the best rank-d encoder on a task.
    Bounds(BoundsArgs),
    /// Train a model from a JSON config.
    Train(TrainArgs),
    /// Run a figure sweep (or a custom sweep spec) into a CSV.
    Sweep(SweepArgs),
    /// Fit a scaling law to sweep CSV rows.
    Fit(FitArgs),
    /// Render a sweep CSV as an SVG scatter/fit/bound plot.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct ConstructArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    s: usize,
    #[arg(long)]
    d: usize,
    #[arg(long)]
    dh: usize,
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    #[arg(long, value_enum, default_value_t = SkipModeArg::ExactBasis)]
    skip_mode: SkipModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Separate seed for the association task (defaults to --seed).
    #[arg(long)]
    task_seed: Option<u64>,
    /// Target logit scale of the built encoder.
    #[arg(long, default_value_t = 20.0)]
    lambda: f64,
    /// Output directory for model.json and certificate.json.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum SkipModeArg {
    ExactBasis,
    LiteralLambda,
    HeadsOnly,
}

impl From<SkipModeArg> for SkipMode {
    fn from(v: SkipModeArg) -> SkipMode {
        match v {
            SkipModeArg::ExactBasis => SkipMode::ExactBasis,
            SkipModeArg::LiteralLambda => SkipMode::LiteralLambda,
            SkipModeArg::HeadsOnly => SkipMode::HeadsOnly,
        }
    }
}

#[derive(Args, Debug)]
struct VerifyArgs {
    #[arg(long)]
    model: PathBuf,
    /// Task JSON; alternatively give --n/--s/--task-seed to regenerate the
    /// association task.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
    /// Sequence-encoder lower-bound reference for the gap field.
    #[arg(long)]
    lower_bound_ref: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BoundsArgs {
    /// Task JSON path; alternatively generate a noisy lookup task.
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    s: Option<usize>,
    /// Correct-token probability of the generated noisy lookup task.
    #[arg(long, default_value_t = 0.95)]
    p: f64,
    #[arg(long, default_value_t = 0)]
    task_seed: u64,
    /// Encoder dimension d.
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the optimizer-based lower bound (report upper bounds only).
    #[arg(long)]
    no_lower: bool,
    /// Write the report JSON here as well as stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append a CSV row (N,S,d,lower_bound,upper_full,upper_simplified,c_gram) here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON config: { "model": ModelConfig, "task": TaskSource, "train": TrainConfig }.
    #[arg(long)]
    config: PathBuf,
    /// key=value overrides applied to the config JSON (dot-separated paths,
    /// e.g. train.lr=0.01).
    #[arg(long = "set")]
    overrides: Vec<String>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Figure preset: fig1a, fig1b, fig2a, fig2b, fig3, fig4.
    #[arg(long, conflicts_with = "spec")]
    figure: Option<String>,
    /// Restore the full training budget for the preset.
    #[arg(long)]
    full: bool,
    /// Custom sweep spec JSON.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// key=value overrides applied to the spec JSON.
    #[arg(long = "set")]
    overrides: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Worker cap (also honors AOTMEM_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum FormArg {
    Proportional,
    Linear,
    Quadratic,
    Cubic,
    AffineQuadratic,
}

impl From<FormArg> for ModelForm {
    fn from(v: FormArg) -> ModelForm {
        match v {
            FormArg::Proportional => ModelForm::Proportional,
            FormArg::Linear => ModelForm::Linear,
            FormArg::Quadratic => ModelForm::QuadraticInX,
            FormArg::Cubic => ModelForm::Cubic,
            FormArg::AffineQuadratic => ModelForm::AffineQuadratic,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum XAxisArg {
    H,
    Dh,
    D,
    Params,
}

impl From<XAxisArg> for XAxis {
    fn from(v: XAxisArg) -> XAxis {
        match v {
            XAxisArg::H => XAxis::H,
            XAxisArg::Dh => XAxis::DH,
            XAxisArg::D => XAxis::D,
            XAxisArg::Params => XAxis::Params,
        }
    }
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long, value_enum)]
    form: FormArg,
    #[arg(long, value_enum, default_value_t = XAxisArg::H)]
    x: XAxisArg,
    /// Fit stored-association counts instead of raw accuracy.
    #[arg(long)]
    capacity_units: bool,
    /// Drop saturated groups (mean accuracy >= 0.95) before fitting.
    #[arg(long)]
    drop_saturated: bool,
}

/// Plot description; also loadable from JSON via --spec.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlotSpec {
    pub csv_path: PathBuf,
    pub x_column: String,
    pub y_column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_by: Option<String>,
    #[serde(default)]
    pub overlays: Vec<Overlay>,
    #[serde(default)]
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_label: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overlay {
    /// Accuracy bound from H d_h + d stored associations.
    BoundOurs,
    /// Accuracy bound from H (d_h - 1) + 1 stored associations.
    BoundPrevious,
    /// Chance level 1/N.
    Chance,
    /// Least-squares fit of the named form through the group means.
    Fit(ModelForm),
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// PlotSpec JSON; alternatively use the individual flags.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, required_unless_present = "spec")]
    csv: Option<PathBuf>,
    #[arg(long, default_value = "H")]
    x: String,
    #[arg(long, default_value = "final_accuracy")]
    y: String,
    #[arg(long)]
    group_by: Option<String>,
    #[arg(long, value_enum)]
    fit: Option<FormArg>,
    /// Overlay the accuracy bounds and the chance line.
    #[arg(long)]
    bounds: bool,
    #[arg(long, default_value = "")]
    title: String,
    #[arg(long)]
    out: PathBuf,
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_from_env() -> i32 {
    let args: Vec<String> = std::env::args().collect();
    main_from_args(args)
}

pub fn main_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            // clap prints usage/help itself; help and version are success.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(value) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&value).unwrap());
            } else if let Some(text) = value.get("summary").and_then(|v| v.as_str()) {
                println!("{text}");
            } else {
                println!("{}", serde_json::to_string_pretty(&value).unwrap());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidArg(_)
        | Error::Json(_)
        | Error::DimMismatch(_)
        | Error::SupportCapExceeded { .. }
        | Error::DegenerateDesign(_) => 2,
        _ => 1,
    }
}

fn log_run(subcommand: &str, seed: u64, config: &serde_json::Value) {
    eprintln!(
        "aotmem {} | {} | seed {} | config {}",
        env!("CARGO_PKG_VERSION"),
        subcommand,
        seed,
        config
    );
}

fn dispatch(cli: &Cli) -> Result<serde_json::Value> {
    match &cli.command {
        Command::Construct(a) => cmd_construct(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

/// Circle-style target encoder padded to dimension d: unembedding rows on
/// the unit circle in the first two coordinates, E(t) = lambda * row(g(t)).
fn circle_target(task: &TaskDistribution, lambda: f64, d: usize) -> Result<SequenceEncoder> {
    if d < 2 {
        return Err(Error::InvalidArg(
            "the construct target needs d >= 2".into(),
        ));
    }
    let base = crate::bounds::circle_encoder(task, lambda)?;
    let n = task.n;
    let mut w = Matrix::zeros(n, d);
    for i in 0..n {
        w[(i, 0)] = base.w[(i, 0)];
        w[(i, 1)] = base.w[(i, 1)];
    }
    let e_table = base
        .e_table
        .into_iter()
        .map(|mut e| {
            e.resize(d, 0.0);
            e
        })
        .collect();
    Ok(SequenceEncoder { w, e_table })
}

fn cmd_construct(a: &ConstructArgs) -> Result<serde_json::Value> {
    let task_seed = a.task_seed.unwrap_or(a.seed);
    let mut cfg = ConstructionConfig::new(a.d, a.dh, a.seed);
    cfg.epsilon = a.eps;
    cfg.skip_mode = a.skip_mode.into();
    log_run(
        "construct",
        a.seed,
        &json!({"n": a.n, "s": a.s, "d": a.d, "dh": a.dh, "eps": a.eps,
                "skip_mode": cfg.skip_mode, "task_seed": task_seed, "lambda": a.lambda}),
    );

    let task = make_association_task(a.n, a.s, task_seed)?;
    let target = circle_target(&task, a.lambda, a.d)?;
    let (params, cert) = build_memorizer(&task, &target, &cfg)?;

    std::fs::create_dir_all(&a.out)?;
    let model_path = a.out.join("model.json");
    let cert_path = a.out.join("certificate.json");
    params.save_json(&model_path)?;
    cert.save_json(&cert_path)?;

    Ok(json!({
        "summary": format!(
            "built memorizer: H={} T={} rank={} solve_residual={:.3e} accuracy={} kl={:.3e}\nmodel: {}\ncertificate: {}",
            cert.h_used, cert.t_target, cert.achieved_rank, cert.solve_residual,
            cert.achieved_accuracy, cert.achieved_kl,
            model_path.display(), cert_path.display()
        ),
        "certificate": serde_json::to_value(&cert)?,
        "model_path": model_path,
        "certificate_path": cert_path,
    }))
}

fn load_task(
    task: &Option<PathBuf>,
    n: Option<usize>,
    s: Option<usize>,
    task_seed: u64,
) -> Result<TaskDistribution> {
    match (task, n, s) {
        (Some(path), _, _) => TaskDistribution::load_json(path),
        (None, Some(n), Some(s)) => make_association_task(n, s, task_seed),
        _ => Err(Error::InvalidArg(
            "give --task FILE or both --n and --s".into(),
        )),
    }
}

fn cmd_verify(a: &VerifyArgs) -> Result<serde_json::Value> {
    log_run(
        "verify",
        a.task_seed,
        &json!({"model": a.model, "task": a.task, "n": a.n, "s": a.s}),
    );
    let params = AoTParams::load_json(&a.model)?;
    let task = load_task(&a.task, a.n.or(Some(params.config.n)), a.s.or(Some(params.config.s)), a.task_seed)?;
    let cert = verify_memorizer(&params, &task, a.lower_bound_ref)?;
    if let Some(out) = &a.out {
        cert.save_json(out)?;
    }
    Ok(json!({
        "summary": format!(
            "accuracy={} kl={:.6e}{}",
            cert.achieved_accuracy, cert.achieved_kl,
            cert.lower_bound_gap.map_or(String::new(), |g| format!(" lower_bound_gap={g:.3e}"))
        ),
        "certificate": serde_json::to_value(&cert)?,
    }))
}

fn cmd_bounds(a: &BoundsArgs) -> Result<serde_json::Value> {
    log_run(
        "bounds",
        a.seed,
        &json!({"task": a.task, "n": a.n, "s": a.s, "p": a.p, "d": a.d}),
    );
    let task = match (&a.task, a.n, a.s) {
        (Some(path), _, _) => TaskDistribution::load_json(path)?,
        (None, Some(n), Some(s)) => make_noisy_lookup_task(n, s, a.p, a.task_seed)?,
        _ => {
            return Err(Error::InvalidArg(
                "give --task FILE or both --n and --s".into(),
            ))
        }
    };

    let mut report = BoundReport::default();
    if !a.no_lower {
        let (lower, _) = encoder_lower_bound(&task, a.d, OptConfig::new(a.seed))?;
        report.lower_bound = lower.lower_bound;
        report.optimizer_meta = lower.optimizer_meta;
    }
    let assumptions = check_assumptions(&task);
    if task.g.is_some() && assumptions.assumption2 {
        let (t2, _) = near_orthogonal_bound(&task, a.d, a.seed)?;
        report.upper_full = t2.upper_full;
        report.upper_simplified = t2.upper_simplified;
        report.c_gram = t2.c_gram;
        report.lambda_table = t2.lambda_table;
        report.measured_encoder_kl = t2.measured_encoder_kl;
    }

    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    if let Some(csv) = &a.csv {
        let header = "N,S,d,lower_bound,upper_full,upper_simplified,c_gram";
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let row = format!(
            "{},{},{},{},{},{},{}",
            task.n,
            task.s,
            a.d,
            cell(report.lower_bound),
            cell(report.upper_full),
            cell(report.upper_simplified),
            cell(report.c_gram),
        );
        let exists = csv.exists();
        let mut text = if exists {
            std::fs::read_to_string(csv)?
        } else {
            format!("{header}\n")
        };
        text.push_str(&row);
        text.push('\n');
        std::fs::write(csv, text)?;
    }
    Ok(serde_json::to_value(&report)?)
}

/// Where the training task comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSource {
    Association {
        n: usize,
        s: usize,
        seed: u64,
    },
    NoisyLookup {
        n: usize,
        s: usize,
        p_correct: f64,
        seed: u64,
    },
    File {
        path: PathBuf,
    },
}

impl TaskSource {
    pub fn load(&self) -> Result<TaskDistribution> {
        match self {
            TaskSource::Association { n, s, seed } => make_association_task(*n, *s, *seed),
            TaskSource::NoisyLookup {
                n,
                s,
                p_correct,
                seed,
            } => make_noisy_lookup_task(*n, *s, *p_correct, *seed),
            TaskSource::File { path } => TaskDistribution::load_json(path),
        }
    }
}

/// Train-command configuration file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub model: ModelConfig,
    pub task: TaskSource,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Apply `--set path.to.key=value` overrides onto a JSON document. Paths
/// must refer to existing keys; unknown keys are rejected.
fn apply_overrides(doc: &mut serde_json::Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (path, raw) = item.split_once('=').ok_or_else(|| {
            Error::InvalidArg(format!("override '{item}' is not of the form key=value"))
        })?;
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut cursor = &mut *doc;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            if !cursor.is_object() {
                return Err(Error::InvalidArg(format!(
                    "override path '{path}' does not address an object"
                )));
            }
            if i + 1 == parts.len() {
                // Leaf keys may be absent (configs with defaults); schema
                // violations surface at the typed parse instead.
                let obj = cursor.as_object_mut().unwrap();
                obj.insert((*part).to_string(), value.clone());
            } else {
                cursor = cursor.get_mut(*part).ok_or_else(|| {
                    Error::InvalidArg(format!(
                        "override path '{path}' names an unknown key '{part}'"
                    ))
                })?;
            }
        }
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<serde_json::Value> {
    let text = std::fs::read_to_string(&a.config)?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)?;
    apply_overrides(&mut doc, &a.overrides)?;
    let spec: TrainSpec = serde_json::from_value(doc.clone())?;
    log_run("train", spec.train.seeds.first().copied().unwrap_or(0), &doc);

    let task = spec.task.load()?;
    let (params, result) = train_model(spec.model, &task, &spec.train)?;

    std::fs::create_dir_all(&a.out)?;
    let model_path = a.out.join("model.json");
    let result_path = a.out.join("train_result.json");
    params.save_json(&model_path)?;
    std::fs::write(&result_path, serde_json::to_string_pretty(&result)?)?;

    Ok(json!({
        "summary": format!(
            "trained: mean_accuracy={:.4} mean_kl={:.4e} ({} seeds, {:.1}s)\nmodel: {}\nresult: {}",
            result.mean_accuracy, result.mean_kl, result.per_seed.len(),
            result.wall_seconds, model_path.display(), result_path.display()
        ),
        "result": serde_json::to_value(&result)?,
        "model_path": model_path,
    }))
}

fn cmd_sweep(a: &SweepArgs) -> Result<serde_json::Value> {
    let mut spec: SweepSpec = match (&a.figure, &a.spec) {
        (Some(figure), None) => figure_preset(figure, a.full)?,
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)?;
            let mut doc: serde_json::Value = serde_json::from_str(&text)?;
            apply_overrides(&mut doc, &a.overrides)?;
            serde_json::from_value(doc)?
        }
        _ => {
            return Err(Error::InvalidArg(
                "give exactly one of --figure or --spec".into(),
            ))
        }
    };
    if a.threads.is_some() {
        spec.parallelism = a.threads;
    }
    log_run("sweep", spec.task_seed, &serde_json::to_value(&spec)?);

    let records = run_sweep(&spec, Some(&a.out))?;
    Ok(json!({
        "summary": format!("{} rows in {}", records.len(), a.out.display()),
        "rows": records.len(),
        "csv": a.out,
    }))
}

fn cmd_fit(a: &FitArgs) -> Result<serde_json::Value> {
    log_run(
        "fit",
        0,
        &json!({"csv": a.csv, "form": format!("{:?}", a.form), "x": format!("{:?}", a.x)}),
    );
    let records = read_sweep_csv(&a.csv)?;
    let fit = fit_scaling_law(
        &records,
        FitRequest {
            form: a.form.into(),
            x: a.x.into(),
            capacity_units: a.capacity_units,
            drop_saturated: a.drop_saturated,
        },
    )?;
    Ok(serde_json::to_value(&fit)?)
}

fn cmd_plot(a: &PlotArgs) -> Result<serde_json::Value> {
    let spec = match &a.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str(&text)?
        }
        None => {
            let mut overlays = Vec::new();
            if a.bounds {
                overlays.push(Overlay::BoundOurs);
                overlays.push(Overlay::BoundPrevious);
                overlays.push(Overlay::Chance);
            }
            if let Some(form) = a.fit {
                overlays.push(Overlay::Fit(form.into()));
            }
            PlotSpec {
                csv_path: a.csv.clone().expect("clap enforces csv without spec"),
                x_column: a.x.clone(),
                y_column: a.y.clone(),
                group_by: a.group_by.clone(),
                overlays,
                title: a.title.clone(),
                x_label: None,
                y_label: None,
            }
        }
    };
    log_run("plot", 0, &serde_json::to_value(&spec)?);
    let svg = emit_plot(&spec)?;
    std::fs::write(&a.out, &svg)?;
    Ok(json!({
        "summary": format!("wrote {}", a.out.display()),
        "svg_path": a.out,
        "bytes": svg.len(),
    }))
}

fn numeric_column(r: &SweepRecord, col: &str) -> Result<f64> {
    Ok(match col {
        "seed" => r.seed as f64,
        "N" => r.n as f64,
        "S" => r.s as f64,
        "d" => r.d as f64,
        "d_h" => r.d_h as f64,
        "H" => r.h as f64,
        "params" => r.params as f64,
        "final_accuracy" => r.final_accuracy,
        "final_kl" => r.final_kl,
        "wall_seconds" => r.wall_seconds,
        other => {
            return Err(Error::InvalidArg(format!(
                "unknown numeric column '{other}'"
            )))
        }
    })
}

fn group_column(r: &SweepRecord, col: &str) -> Result<String> {
    Ok(match col {
        "figure_id" => r.figure_id.clone(),
        "variant" => r.variant.clone(),
        "seed" => r.seed.to_string(),
        "N" => r.n.to_string(),
        "S" => r.s.to_string(),
        "d" => r.d.to_string(),
        "d_h" => r.d_h.to_string(),
        "H" => r.h.to_string(),
        other => return Err(Error::InvalidArg(format!("unknown group column '{other}'"))),
    })
}

struct Series {
    label: String,
    /// (x, mean y) sorted by x.
    points: Vec<(f64, f64)>,
    /// Representative record for bound parameters.
    sample: SweepRecord,
}

/// An overlay curve: label, dash pattern, sampled points.
type Curve = (String, &'static str, Vec<(f64, f64)>);

/// Render a standalone SVG: scatter of per-group means, optional fit curve
/// and capacity-bound overlays. Byte-deterministic for identical inputs.
pub fn emit_plot(spec: &PlotSpec) -> Result<String> {
    let records = read_sweep_csv(&spec.csv_path)?;
    if records.is_empty() {
        return Err(Error::InvalidArg("csv has no data rows".into()));
    }

    // Group by (series key, x), average y over the remaining rows (seeds).
    let mut series_map: BTreeMap<String, BTreeMap<u64, (f64, Vec<f64>)>> = BTreeMap::new();
    let mut samples: BTreeMap<String, SweepRecord> = BTreeMap::new();
    for r in &records {
        let key = match &spec.group_by {
            Some(col) => group_column(r, col)?,
            None => String::from("all"),
        };
        let x = numeric_column(r, &spec.x_column)?;
        let y = numeric_column(r, &spec.y_column)?;
        series_map
            .entry(key.clone())
            .or_default()
            .entry(x.to_bits())
            .or_insert((x, Vec::new()))
            .1
            .push(y);
        samples.entry(key).or_insert_with(|| r.clone());
    }
    let mut series: Vec<Series> = Vec::new();
    for (label, groups) in series_map {
        let mut points: Vec<(f64, f64)> = groups
            .into_values()
            .map(|(x, ys)| (x, ys.iter().sum::<f64>() / ys.len() as f64))
            .collect();
        points.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        if points.is_empty() {
            return Err(Error::InvalidArg(format!("series '{label}' is empty")));
        }
        let sample = samples.remove(&label).unwrap();
        series.push(Series {
            label,
            points,
            sample,
        });
    }

    // Bound overlays as sampled curves.
    let mut curves: Vec<Curve> = Vec::new();
    let (x_min, x_max) = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        });
    for overlay in &spec.overlays {
        match overlay {
            Overlay::Fit(form) => {
                for s in &series {
                    let xs: Vec<f64> = s.points.iter().map(|p| p.0).collect();
                    let ys: Vec<f64> = s.points.iter().map(|p| p.1).collect();
                    if xs.len() >= form.coeff_count() {
                        let fit = crate::numkernel::polyfit_ls(&xs, &ys, *form)?;
                        let pts = sample_curve(x_min, x_max, |x| form.eval(&fit.coefficients, x));
                        curves.push((format!("{} fit", s.label), "4 3", pts));
                    }
                }
            }
            Overlay::BoundOurs | Overlay::BoundPrevious => {
                let sample = &series[0].sample;
                let t0 = sample.n.pow(sample.s as u32);
                let stored = |x: f64| -> Result<f64> {
                    let (h, d_h, d) = (sample.h as f64, sample.d_h as f64, sample.d as f64);
                    let cap = match (overlay, spec.x_column.as_str()) {
                        (Overlay::BoundOurs, "H") => x * d_h + d,
                        (Overlay::BoundOurs, "d_h") => h * x + d,
                        (Overlay::BoundOurs, "d") => h * d_h + x,
                        (Overlay::BoundPrevious, "H") => x * (d_h - 1.0) + 1.0,
                        (Overlay::BoundPrevious, "d_h") => h * (x - 1.0) + 1.0,
                        (Overlay::BoundPrevious, "d") => h * (d_h - 1.0) + 1.0,
                        _ => {
                            return Err(Error::InvalidArg(format!(
                                "bound overlays need x in {{H, d_h, d}}, got '{}'",
                                spec.x_column
                            )))
                        }
                    };
                    Ok(phi(cap, sample.n, t0).min(1.0))
                };
                let mut pts = Vec::new();
                for i in 0..=100 {
                    let x = x_min + (x_max - x_min) * i as f64 / 100.0;
                    pts.push((x, stored(x)?));
                }
                let (name, dash) = match overlay {
                    Overlay::BoundOurs => ("ours", "6 2"),
                    _ => ("previous", "2 2"),
                };
                curves.push((format!("bound ({name})"), dash, pts));
            }
            Overlay::Chance => {
                let n = series[0].sample.n;
                let y = 1.0 / n as f64;
                curves.push((
                    "chance".into(),
                    "1 3",
                    vec![(x_min, y), (x_max, y)],
                ));
            }
        }
    }

    Ok(render_svg(spec, &series, &curves))
}

fn sample_curve(x_min: f64, x_max: f64, f: impl Fn(f64) -> f64) -> Vec<(f64, f64)> {
    (0..=100)
        .map(|i| {
            let x = x_min + (x_max - x_min) * i as f64 / 100.0;
            (x, f(x))
        })
        .collect()
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn render_svg(
    spec: &PlotSpec,
    series: &[Series],
    curves: &[Curve],
) -> String {
    let (w, h) = (640.0, 440.0);
    let (ml, mr, mt, mb) = (64.0, 20.0, 36.0, 48.0);

    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (x, y) in series
        .iter()
        .flat_map(|s| s.points.iter())
        .chain(curves.iter().flat_map(|(_, _, pts)| pts.iter()))
    {
        x_min = x_min.min(*x);
        x_max = x_max.max(*x);
        y_min = y_min.min(*y);
        y_max = y_max.max(*y);
    }
    if x_min == x_max {
        x_min -= 0.5;
        x_max += 0.5;
    }
    if y_min == y_max {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let y_pad = 0.05 * (y_max - y_min);
    y_min -= y_pad;
    y_max += y_pad;

    let sx = |x: f64| ml + (x - x_min) / (x_max - x_min) * (w - ml - mr);
    let sy = |y: f64| h - mb - (y - y_min) / (y_max - y_min) * (h - mt - mb);

    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    out.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    ));
    if !spec.title.is_empty() {
        out.push_str(&format!(
            "  <text x=\"{:.3}\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
            w / 2.0,
            xml_escape(&spec.title)
        ));
    }
    // Axes.
    out.push_str(&format!(
        "  <line x1=\"{:.3}\" y1=\"{:.3}\" x2=\"{:.3}\" y2=\"{:.3}\" stroke=\"black\"/>\n",
        ml,
        h - mb,
        w - mr,
        h - mb
    ));
    out.push_str(&format!(
        "  <line x1=\"{:.3}\" y1=\"{:.3}\" x2=\"{:.3}\" y2=\"{:.3}\" stroke=\"black\"/>\n",
        ml,
        mt,
        ml,
        h - mb
    ));
    // Ticks.
    for i in 0..=5 {
        let fx = x_min + (x_max - x_min) * i as f64 / 5.0;
        let px = sx(fx);
        out.push_str(&format!(
            "  <line x1=\"{px:.3}\" y1=\"{:.3}\" x2=\"{px:.3}\" y2=\"{:.3}\" stroke=\"black\"/>\n",
            h - mb,
            h - mb + 4.0
        ));
        out.push_str(&format!(
            "  <text x=\"{px:.3}\" y=\"{:.3}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n",
            h - mb + 16.0,
            trim_tick(fx)
        ));
        let fy = y_min + (y_max - y_min) * i as f64 / 5.0;
        let py = sy(fy);
        out.push_str(&format!(
            "  <line x1=\"{:.3}\" y1=\"{py:.3}\" x2=\"{:.3}\" y2=\"{py:.3}\" stroke=\"black\"/>\n",
            ml - 4.0,
            ml
        ));
        out.push_str(&format!(
            "  <text x=\"{:.3}\" y=\"{:.3}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">{}</text>\n",
            ml - 8.0,
            py + 3.0,
            trim_tick(fy)
        ));
    }
    // Axis labels.
    let x_label = spec.x_label.clone().unwrap_or_else(|| spec.x_column.clone());
    let y_label = spec.y_label.clone().unwrap_or_else(|| spec.y_column.clone());
    out.push_str(&format!(
        "  <text x=\"{:.3}\" y=\"{:.3}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
        (ml + w - mr) / 2.0,
        h - 10.0,
        xml_escape(&x_label)
    ));
    out.push_str(&format!(
        "  <text x=\"16\" y=\"{:.3}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\" transform=\"rotate(-90 16 {:.3})\">{}</text>\n",
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0,
        xml_escape(&y_label)
    ));

    // Overlay curves under the data.
    for (label, dash, pts) in curves {
        let path: Vec<String> = pts
            .iter()
            .map(|(x, y)| format!("{:.3},{:.3}", sx(*x), sy(*y)))
            .collect();
        out.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"#777777\" stroke-width=\"1\" stroke-dasharray=\"{}\"/>\n",
            path.join(" "),
            dash
        ));
        if let Some((x, y)) = pts.last() {
            out.push_str(&format!(
                "  <text x=\"{:.3}\" y=\"{:.3}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"9\" fill=\"#777777\">{}</text>\n",
                sx(*x) - 2.0,
                sy(*y) - 3.0,
                xml_escape(label)
            ));
        }
    }

    // Data series: polyline + markers.
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let path: Vec<String> = s
            .points
            .iter()
            .map(|(x, y)| format!("{:.3},{:.3}", sx(*x), sy(*y)))
            .collect();
        out.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
            path.join(" "),
            color
        ));
        for (x, y) in &s.points {
            out.push_str(&format!(
                "  <circle cx=\"{:.3}\" cy=\"{:.3}\" r=\"3\" fill=\"{}\"/>\n",
                sx(*x),
                sy(*y),
                color
            ));
        }
        out.push_str(&format!(
            "  <text x=\"{:.3}\" y=\"{:.3}\" font-family=\"sans-serif\" font-size=\"10\" fill=\"{}\">{}</text>\n",
            w - mr - 120.0,
            mt + 14.0 * (si as f64 + 1.0),
            color,
            xml_escape(&s.label)
        ));
    }

    out.push_str("</svg>\n");
    out
}

fn trim_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() {
        "0".into()
    } else {
        s.to_string()
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Capacity-formula convenience used by the examples and docs.
pub fn capacity_summary(h: usize, d_h: usize, d: usize, n: usize, s: usize, t0: usize) -> Result<serde_json::Value> {
    let report = capacity_formulas(h, d_h, d, n, s, t0)?;
    Ok(serde_json::to_value(report)?)
}
