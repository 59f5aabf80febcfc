use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use localness::model::{names, ForwardOptions};
use localness::rng::{stream_rng, RngStream};
use localness::tasks::generate_batch;
use localness::tensor::{grad_check, GradCheckReport};
use localness::train::{argmax, batch_loss, report_from_correct, train, EvalReport};
use localness::{evaluate, Encoder, Error, Tape, TaskSpec, Tensor};
use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{load_experiment, load_task};
use crate::diagnostics::{ngram_csv, traces_json, DiagnosticsRecord};
use crate::CliError;

/// Sequences per evaluation or analysis batch.
pub const EVAL_BATCH_SIZE: usize = 32;
pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_SEQUENCES: usize = 2;

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

pub struct TrainArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub steps: usize,
}

/// Trains from a config file; writes the checkpoint to `out` and `loss.csv` beside it.
pub fn cmd_train(args: &TrainArgs, stdout: &mut impl Write) -> Result<(), CliError> {
    let mut cfg = load_experiment(&args.config)?;
    if args.steps == 0 {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    if let Some(seed) = args.seed {
        cfg.model.seed = seed;
    }
    let encoder = Encoder::init(cfg.model.clone())?;
    let outcome = train(encoder, &cfg.task, &cfg.training, args.steps)?;
    let ckpt = Checkpoint::from_encoder(&outcome.encoder, outcome.rng_state, outcome.losses.len());
    ckpt.save(&args.out)?;

    let dir = args.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut csv = String::from("step,loss\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{},{l}\n", i + 1));
    }
    write_file(&dir.join("loss.csv"), &csv)?;
    let last = outcome.losses.last().copied().unwrap_or(f64::NAN);
    writeln!(stdout, "trained {} steps, final loss {last:.6}", outcome.losses.len()).map_err(|e| io_err(&args.out, e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

fn load_pair(ckpt: &Path, task: &Path) -> Result<(Encoder, TaskSpec), CliError> {
    let encoder = Checkpoint::load(ckpt)?.to_encoder()?;
    let task = load_task(task)?;
    task.validate_for(encoder.config().vocab_size, encoder.config().max_len)?;
    Ok((encoder, task))
}

pub fn format_report(report: &EvalReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut s = String::from("metric,value\n");
            s.push_str(&format!("token_accuracy,{}\n", report.token_accuracy));
            for (n, r) in &report.ngram {
                s.push_str(&format!("ngram_{n},{r}\n"));
            }
            s
        }
        ReportFormat::Text => {
            let mut s = format!(
                "token accuracy: {:.4} ({} positions, {} sequences)\n  n   rate\n",
                report.token_accuracy, report.positions, report.sequences
            );
            for (n, r) in &report.ngram {
                s.push_str(&format!("{n:>3}   {r:.4}\n"));
            }
            s
        }
    }
}

pub fn cmd_eval(
    ckpt: &Path,
    task: &Path,
    batches: usize,
    format: ReportFormat,
    stdout: &mut impl Write,
) -> Result<EvalReport, CliError> {
    if batches == 0 {
        return Err(CliError::Usage("--batches must be at least 1".into()));
    }
    let (encoder, task) = load_pair(ckpt, task)?;
    let report = evaluate(&encoder, &task, batches, EVAL_BATCH_SIZE)?;
    stdout
        .write_all(format_report(&report, format).as_bytes())
        .map_err(|e| io_err(ckpt, e))?;
    Ok(report)
}

/// Half-width of the uniform jitter added to every parameter before a gradient check.
pub const GRADCHECK_JITTER: f64 = 0.5;

/// Jitters every parameter around its initial value. Fresh encoders have zero
/// classifier and localness vectors, which would leave most gradients exactly zero.
pub fn randomize(encoder: &mut Encoder, seed: u64) {
    let mut rng = stream_rng(seed, RngStream::GradCheck);
    for t in encoder.params_mut().values_mut() {
        for x in t.data_mut() {
            *x += rng.random_range(-GRADCHECK_JITTER..GRADCHECK_JITTER);
        }
    }
}

/// Finite-difference check of every named parameter over a few task sequences.
pub fn gradcheck_encoder(encoder: &Encoder, task: &TaskSpec, tolerance: f64) -> Result<GradCheckReport, Error> {
    let mut rng = stream_rng(task.seed, RngStream::GradCheck);
    let batch = generate_batch(task, GRADCHECK_SEQUENCES, &mut rng)?;
    let params: Vec<(String, Tensor)> = encoder.params().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let names: Vec<String> = params.iter().map(|(k, _)| k.clone()).collect();
    grad_check(&params, GRADCHECK_STEP, tolerance, |tape: &mut Tape, vars| {
        let bound = localness::model::BoundParams::from_pairs(names.iter().cloned().zip(vars.iter().copied()));
        let options = ForwardOptions {
            collect_traces: false,
            ..Default::default()
        };
        let out = encoder.forward(tape, &bound, &batch.sequences(), &options)?;
        let targets: Vec<Option<usize>> = batch.packed_targets().into_iter().map(Some).collect();
        Ok::<_, Error>(tape.cross_entropy(out.logits, &targets)?)
    })
}

pub fn cmd_gradcheck(config: &Path, tolerance: f64, stdout: &mut impl Write) -> Result<GradCheckReport, CliError> {
    let cfg = load_experiment(config)?;
    if tolerance.is_nan() || tolerance < 0.0 {
        return Err(CliError::Usage("--tolerance must be non-negative".into()));
    }
    let mut encoder = Encoder::init(cfg.model.clone())?;
    randomize(&mut encoder, cfg.model.seed);
    let report = gradcheck_encoder(&encoder, &cfg.task, tolerance)?;
    let mut text = String::new();
    for p in &report.params {
        let flag = if p.max_rel_error < tolerance { "ok" } else { "FAIL" };
        text.push_str(&format!("{:<48} {:>6} {:.3e} {flag}\n", p.name, p.elements, p.max_rel_error));
    }
    text.push_str(&format!("max relative error {:.3e}, tolerance {tolerance:e}\n", report.max_rel_error()));
    stdout.write_all(text.as_bytes()).map_err(|e| io_err(config, e))?;
    if !report.passed() {
        let offenders: Vec<&str> = report.offenders().map(|p| p.name.as_str()).collect();
        return Err(CliError::Check(format!(
            "{} parameter(s) exceed tolerance {tolerance:e}: {}",
            offenders.len(),
            offenders.join(", ")
        )));
    }
    Ok(report)
}

#[derive(Debug)]
pub struct Analysis {
    pub diagnostics: DiagnosticsRecord,
    pub report: EvalReport,
    pub traces: Vec<localness::AttentionTrace>,
}

/// Traces, window diagnostics, and n-gram rates over `batches` batches of the task.
pub fn analyze(encoder: &Encoder, task: &TaskSpec, batches: usize) -> Result<Analysis, Error> {
    task.validate_for(encoder.config().vocab_size, encoder.config().max_len)?;
    let mut rng = stream_rng(task.seed, RngStream::EvalData);
    let mut traces = Vec::new();
    let mut correct = Vec::new();
    for b in 0..batches {
        let batch = generate_batch(task, EVAL_BATCH_SIZE, &mut rng)?;
        let mut tape = Tape::new();
        let bound = encoder.bind(&mut tape, false);
        let out = encoder.forward(&mut tape, &bound, &batch.sequences(), &ForwardOptions::default())?;
        let logits = tape.value(out.logits);
        for (s, span) in out.spans.iter().enumerate() {
            correct.push(
                (0..span.len)
                    .map(|i| argmax(logits.row(span.start + i)) == batch.target(s)[i])
                    .collect(),
            );
        }
        traces.extend(out.traces.into_iter().map(|mut t| {
            t.seq += b * EVAL_BATCH_SIZE;
            t
        }));
    }
    traces.sort_by_key(|t| (t.layer, t.head, t.seq));
    Ok(Analysis {
        diagnostics: DiagnosticsRecord::from_traces(&traces),
        report: report_from_correct(&correct),
        traces,
    })
}

pub fn cmd_analyze(ckpt: &Path, task: &Path, out: &Path, batches: usize, stdout: &mut impl Write) -> Result<Analysis, CliError> {
    if batches == 0 {
        return Err(CliError::Usage("--batches must be at least 1".into()));
    }
    let (encoder, task) = load_pair(ckpt, task)?;
    let analysis = analyze(&encoder, &task, batches)?;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_file(&out.join("windows.csv"), &analysis.diagnostics.windows_csv())?;
    write_file(&out.join("summary.csv"), &analysis.diagnostics.summary_csv())?;
    write_file(&out.join("ngram.csv"), &ngram_csv(&analysis.report.ngram))?;
    write_file(&out.join("traces.json"), &traces_json(&analysis.traces))?;
    for s in &analysis.diagnostics.summaries {
        writeln!(stdout, "layer {}: mean window {:.4}, median {:.4}", s.layer, s.mean, s.median)
            .map_err(|e| io_err(out, e))?;
    }
    Ok(analysis)
}

/// Training loss of a single batch, used to sanity-check untrained models.
pub fn initial_loss(encoder: &Encoder, task: &TaskSpec, batch_size: usize) -> Result<f64, Error> {
    let mut rng = stream_rng(encoder.config().seed, RngStream::TrainData);
    let batch = generate_batch(task, batch_size, &mut rng)?;
    let mut tape = Tape::new();
    let (loss, _) = batch_loss(encoder, &mut tape, &batch, false)?;
    Ok(tape.data(loss)[0])
}

/// Whether a parameter belongs to the window-size family (`u_d`, `w_d`, `z`).
pub fn is_window_param(name: &str) -> bool {
    names::is_localness(name) && (name.ends_with(".u_d") || name.ends_with(".w_d") || name.ends_with(".z"))
}
