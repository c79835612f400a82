//! The `qnn` command line.
//!
//! Exit codes: 0 success, 2 runtime failure (divergence, model state,
//! unreadable files, every protocol row failed), 64 invalid flags or
//! configuration. Data goes to stdout, diagnostics to stderr.

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qnn_core::nn::quantize_model_with_scale;
use qnn_core::task::{
    evaluate_with_scale, format_params, generate_task, run_protocol_with, Architecture, Condition,
    Split, TaskParams,
};
use qnn_core::train::{
    frame_accuracy, param, param_ids, train_float, train_qat, LrConfig, MetricsSink, NullSink,
    PhaseConfig, ProjSchedule, TrainConfig,
};
use qnn_core::{FloatMatrix, Model, Precision, QuantScope};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{default_protocol, parse_protocol_config, ProjLrKind};
use crate::io::{load_model_file, save_model_file, ModelIoError};
use crate::report::{protocol_json, to_json, EvalReport, JsonLinesSink};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(
    name = "qnn",
    version,
    about = "8-bit quantized LSTM training, evaluation and benchmarking"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Float training followed by optional quantization-aware fine-tuning.
    Train(TrainArgs),
    /// Post-training quantization of a float model.
    Quantize(QuantizeArgs),
    /// Frame accuracy of a model under one evaluation condition.
    Eval(EvalArgs),
    /// Train and evaluate architectures under all four conditions.
    Protocol(ProtocolArgs),
    /// Float versus quantized forward-pass timing.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QuantMode {
    Quant,
    QuantAll,
}

impl QuantMode {
    fn scope(self) -> QuantScope {
        match self {
            QuantMode::Quant => QuantScope::Quant,
            QuantMode::QuantAll => QuantScope::QuantAll,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Table,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Heldout,
    EvalClean,
    EvalNoisy,
}

impl SplitArg {
    fn split(self) -> Split {
        match self {
            SplitArg::Heldout => Split::Heldout,
            SplitArg::EvalClean => Split::EvalClean,
            SplitArg::EvalNoisy => Split::EvalNoisy,
        }
    }
}

/// Synthetic task shape. Input and class counts of `eval` come from the model.
#[derive(Debug, Clone, Args)]
pub struct TaskArgs {
    #[arg(long, default_value_t = 1)]
    pub task_seed: u64,
    #[arg(long, default_value_t = 200)]
    pub train_sequences: usize,
    /// Sequences in the held-out and in each evaluation split.
    #[arg(long, default_value_t = 100)]
    pub eval_sequences: usize,
    #[arg(long, default_value_t = 100)]
    pub seq_len: usize,
    /// Standard deviation of the noise of the noisy evaluation split.
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
}

impl TaskArgs {
    fn params(&self, input_dim: usize, n_classes: usize) -> TaskParams {
        TaskParams {
            seed: self.task_seed,
            n_sequences: self.train_sequences,
            n_eval_sequences: self.eval_sequences,
            seq_len: self.seq_len,
            input_dim,
            n_classes,
            noise_level: self.noise,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub cells: usize,
    /// Projection size; 0 disables the projection.
    #[arg(long, default_value_t = 0)]
    pub proj: usize,
    #[arg(long, default_value_t = 1500)]
    pub phase1_steps: usize,
    #[arg(long, default_value_t = 0)]
    pub phase2_steps: usize,
    #[arg(long, value_enum, default_value_t = QuantMode::Quant)]
    pub quant_mode: QuantMode,
    /// Initial global learning rate.
    #[arg(long, default_value_t = 2.0)]
    pub c_g: f64,
    /// Global decay time (tenfold per T_g), as a fraction of phase 1.
    #[arg(long, default_value_t = 0.5)]
    pub t_g: f64,
    /// Projection learning-rate multiplier during phase 1.
    #[arg(long, value_enum, default_value_t = ProjLrKind::Scheduled)]
    pub proj_lr: ProjLrKind,
    #[arg(long, default_value_t = 1e-3)]
    pub c_p: f64,
    /// Ramp time of the scheduled multiplier, as a fraction of phase 1.
    #[arg(long, default_value_t = 0.3)]
    pub t_p: f64,
    /// Constant multiplier; also used for projections during phase 2.
    #[arg(long, default_value_t = 0.5)]
    pub c_p_const: f64,
    #[arg(long, default_value_t = 0.03)]
    pub phase2_c_g: f64,
    /// Phase-2 decay time, as a fraction of phase 2.
    #[arg(long, default_value_t = 1.0)]
    pub phase2_t_g: f64,
    /// Quantization steps of weight shadows (1..=255).
    #[arg(long, default_value_t = 255)]
    pub weight_scale: u32,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 20)]
    pub bptt_len: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long, default_value_t = 5.0)]
    pub grad_clip: f64,
    #[arg(long, default_value_t = 8)]
    pub input_dim: usize,
    #[arg(long, default_value_t = 4)]
    pub n_classes: usize,
    #[command(flatten)]
    pub task: TaskArgs,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the metrics stream (JSON lines) here.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Held-out evaluation every N steps in the metrics stream; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub eval_every: usize,
}

#[derive(Debug, Clone, Args)]
pub struct QuantizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_enum, default_value_t = QuantMode::Quant)]
    pub mode: QuantMode,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 255)]
    pub weight_scale: u32,
    /// Drop the float masters of quantized weights (inference-only file).
    #[arg(long)]
    pub deploy: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "match", value_parser = condition_parser())]
    pub condition: Condition,
    #[arg(long, value_enum, default_value_t = SplitArg::EvalClean)]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub report: ReportFormat,
    /// Float model whose match accuracy is the relative-loss baseline.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Weight scale of the on-the-fly quantization of `mismatch`.
    #[arg(long, default_value_t = 255)]
    pub weight_scale: u32,
    #[command(flatten)]
    pub task: TaskArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ProtocolArgs {
    /// Key-value config file; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub report: ReportFormat,
    /// Also write the report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    /// Seed of the random input frames.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
    pub report: ReportFormat,
}

fn condition_parser() -> impl clap::builder::TypedValueParser<Value = Condition> {
    use clap::builder::TypedValueParser;
    clap::builder::PossibleValuesParser::new(Condition::ALL.map(Condition::name))
        .map(|s| s.parse::<Condition>().expect("listed condition"))
}

/// A failed command: exit code and message for stderr.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn runtime(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }
}

impl From<qnn_core::Error> for Failure {
    fn from(e: qnn_core::Error) -> Self {
        match e {
            qnn_core::Error::InvalidArgument(_) => Failure::usage(e.to_string()),
            _ => Failure::runtime(e.to_string()),
        }
    }
}

impl From<ModelIoError> for Failure {
    fn from(e: ModelIoError) -> Self {
        Failure::runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::runtime(e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a, out, err),
        Command::Quantize(a) => cmd_quantize(&a, out),
        Command::Eval(a) => cmd_eval(&a, out),
        Command::Protocol(a) => cmd_protocol(&a, out, err),
        Command::Bench(a) => cmd_bench(&a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "qnn: {}", f.message);
            f.code
        }
    }
}

fn check_scale(scale: u32) -> CmdResult {
    if scale == 0 || scale > 255 {
        return Err(Failure::usage(format!(
            "--weight-scale must be in 1..=255, got {scale}"
        )));
    }
    Ok(())
}

/// Rounds to storage precision and writes the file.
fn write_model(model: &Model, path: &PathBuf) -> Result<u64, Failure> {
    for id in param_ids(model) {
        let Ok(values) = param(model, id) else {
            continue;
        };
        if values.iter().any(|v| v.abs() > f32::MAX as f64) {
            return Err(Failure::runtime(format!(
                "{id:?} exceeds the f32 storage range; training has likely diverged"
            )));
        }
    }
    let mut m = model.clone();
    if m.has_masters() {
        m.round_to_f32()?;
    }
    Ok(save_model_file(&m, path)?)
}

pub fn train_config(a: &TrainArgs) -> Result<TrainConfig, Failure> {
    let has_proj = a.proj > 0;
    let phase1_proj = if has_proj {
        a.proj_lr.schedule(a.c_p, a.t_p, a.c_p_const)
    } else {
        ProjSchedule::None
    };
    let phase2_proj = if has_proj && a.proj_lr != ProjLrKind::None {
        ProjLrKind::Constant.schedule(a.c_p, a.t_p, a.c_p_const)
    } else {
        ProjSchedule::None
    };
    let cfg = TrainConfig {
        seed: a.seed,
        batch_size: a.batch_size,
        bptt_len: a.bptt_len,
        phase1: PhaseConfig {
            steps: a.phase1_steps,
            lr: LrConfig {
                c_g: a.c_g,
                t_g: a.t_g,
                proj: phase1_proj,
                steps_per_unit: a.phase1_steps.max(1) as f64,
            },
        },
        phase2: PhaseConfig {
            steps: a.phase2_steps,
            lr: LrConfig {
                c_g: a.phase2_c_g,
                t_g: a.phase2_t_g,
                proj: phase2_proj,
                steps_per_unit: a.phase2_steps.max(1) as f64,
            },
        },
        quant_scope: a.quant_mode.scope(),
        weight_scale: a.weight_scale,
        grad_clip: (a.grad_clip > 0.0).then_some(a.grad_clip),
        eval_every: a.eval_every,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    if a.layers == 0 || a.cells == 0 {
        return Err(Failure::usage("--layers and --cells must be positive"));
    }
    check_scale(a.weight_scale)?;
    let cfg = train_config(a)?;
    let arch = Architecture {
        layers: a.layers,
        cells: a.cells,
        projection: (a.proj > 0).then_some(a.proj),
    };
    let params = a.task.params(a.input_dim, a.n_classes);
    params.validate()?;
    let mut model = arch.build(a.input_dim, a.n_classes, a.seed)?;
    writeln!(
        out,
        "architecture {arch}: {} parameters ({})",
        model.param_count(),
        format_params(model.param_count())
    )?;

    let data = generate_task(&params)?;
    let mut json_sink = match &a.metrics {
        Some(path) => Some(JsonLinesSink::new(BufWriter::new(fs::File::create(path)?))),
        None => None,
    };
    let mut null = NullSink;
    let sink: &mut dyn MetricsSink = match json_sink.as_mut() {
        Some(s) => s,
        None => &mut null,
    };

    let started = Instant::now();
    train_float(&mut model, &data.train, &data.heldout, &cfg, sink)?;
    writeln!(
        err,
        "phase 1: {} steps in {:.1}s",
        cfg.phase1.steps,
        started.elapsed().as_secs_f64()
    )?;
    let float_acc = frame_accuracy(&model, &data.heldout, Precision::Float)?;
    writeln!(out, "held-out accuracy (match): {float_acc:.4}")?;

    if cfg.phase2.steps > 0 {
        let started = Instant::now();
        train_qat(
            &mut model,
            &data.train,
            &data.heldout,
            &cfg,
            cfg.quant_scope,
            sink,
        )?;
        writeln!(
            err,
            "phase 2: {} steps in {:.1}s",
            cfg.phase2.steps,
            started.elapsed().as_secs_f64()
        )?;
        let q_acc = frame_accuracy(&model, &data.heldout, Precision::Quantized)?;
        writeln!(
            out,
            "held-out accuracy ({}): {q_acc:.4}",
            cfg.quant_scope.name()
        )?;
    }
    if let Some(s) = json_sink {
        s.finish()?;
    }
    let bytes = write_model(&model, &a.out)?;
    writeln!(out, "wrote {} ({bytes} bytes)", a.out.display())?;
    Ok(())
}

fn cmd_quantize(a: &QuantizeArgs, out: &mut dyn Write) -> CmdResult {
    check_scale(a.weight_scale)?;
    let model = load_model_file(&a.model)?;
    if !model.has_masters() {
        return Err(Failure::runtime(format!(
            "{} has no float masters to quantize",
            a.model.display()
        )));
    }
    let mut q = quantize_model_with_scale(&model, a.mode.scope(), a.weight_scale)?;
    if a.deploy {
        q.drop_quantized_masters()?;
    }
    let before = fs::metadata(&a.model)?.len();
    let bytes = write_model(&q, &a.out)?;
    writeln!(
        out,
        "wrote {} ({bytes} bytes, {before} before, scope {})",
        a.out.display(),
        a.mode.scope().name()
    )?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> CmdResult {
    check_scale(a.weight_scale)?;
    let model = load_model_file(&a.model)?;
    let baseline = a.baseline.as_ref().map(load_model_file).transpose()?;
    let params = a.task.params(model.meta.input_dim, model.meta.n_classes);
    params.validate()?;
    if let Some(b) = &baseline {
        if (b.meta.input_dim, b.meta.n_classes) != (params.input_dim, params.n_classes) {
            return Err(Failure::runtime(
                "baseline and model have different input or class counts",
            ));
        }
    }
    let data = generate_task(&params)?;
    let split = a.split.split();
    let set = data.split(split);
    let accuracy = evaluate_with_scale(&model, set, a.condition, a.weight_scale)?;
    let baseline_acc = baseline
        .map(|b| evaluate_with_scale(&b, set, Condition::Match, a.weight_scale))
        .transpose()?;
    let frames = set.iter().map(|s| s.len()).sum();
    let report = EvalReport::new(
        a.condition,
        accuracy,
        baseline_acc,
        split,
        a.task.task_seed,
        frames,
    );
    match a.report {
        ReportFormat::Json => out.write_all(to_json(&report).as_bytes())?,
        ReportFormat::Table => out.write_all(report.render_table().as_bytes())?,
    }
    Ok(())
}

fn cmd_protocol(a: &ProtocolArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let cfg = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::usage(format!("cannot read {}: {e}", path.display())))?;
            parse_protocol_config(&text)
                .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
        }
        None => default_protocol(),
    };
    let started = Instant::now();
    let report = run_protocol_with(&cfg, &mut |arch, seed, r| {
        let status = match r {
            Ok(_) => "ok".to_string(),
            Err(e) => format!("failed: {e}"),
        };
        let _ = writeln!(
            err,
            "[{:>6.1}s] {arch} seed {seed}: {status}",
            started.elapsed().as_secs_f64()
        );
    })?;
    let text = match a.report {
        ReportFormat::Table => report.render_table(),
        ReportFormat::Json => protocol_json(&report),
    };
    out.write_all(text.as_bytes())?;
    if let Some(path) = &a.out {
        fs::write(path, &text)?;
    }
    if report.rows.iter().all(|r| r.failed()) {
        return Err(Failure::runtime("every architecture failed"));
    }
    Ok(())
}

/// Timing of one forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct BenchTiming {
    pub total_seconds: f64,
    pub seconds_per_frame: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BenchReport {
    pub frames: usize,
    pub reps: usize,
    pub scope: QuantScope,
    pub float: BenchTiming,
    pub quantized: BenchTiming,
    /// `quantized / float` time; below 1 means the quantized path is faster.
    pub ratio: f64,
    /// Largest posterior difference between the two paths.
    pub max_abs_diff: f64,
}

fn time_forward(
    model: &Model,
    x: &FloatMatrix,
    precision: Precision,
    reps: usize,
) -> Result<(FloatMatrix, f64), Failure> {
    let mut result = model.forward(x, precision)?;
    let started = Instant::now();
    for _ in 0..reps {
        result = std::hint::black_box(model.forward(std::hint::black_box(x), precision)?);
    }
    Ok((result, started.elapsed().as_secs_f64()))
}

/// Runs the float and quantized forward passes `reps` times over the same
/// seeded random frames. Models without shadows are quantized (`quant`
/// scope) first.
pub fn bench(model: &Model, frames: usize, reps: usize, seed: u64) -> Result<BenchReport, Failure> {
    if frames == 0 || reps == 0 {
        return Err(Failure::usage("--frames and --reps must be positive"));
    }
    if !model.has_masters() {
        return Err(Failure::runtime(
            "benchmark needs float masters for the float path",
        ));
    }
    let quantized = if model.scope()? != QuantScope::None && model.has_shadows() {
        model.clone()
    } else {
        quantize_model_with_scale(model, QuantScope::Quant, qnn_core::quant::DEFAULT_SCALE)?
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.meta.input_dim;
    let values = (0..frames * d)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let x = FloatMatrix::new(frames, d, values)?;
    let (pf, tf) = time_forward(model, &x, Precision::Float, reps)?;
    let (pq, tq) = time_forward(&quantized, &x, Precision::Quantized, reps)?;
    let per_frame = |t: f64| t / (reps * frames) as f64;
    Ok(BenchReport {
        frames,
        reps,
        scope: quantized.scope()?,
        float: BenchTiming {
            total_seconds: tf,
            seconds_per_frame: per_frame(tf),
        },
        quantized: BenchTiming {
            total_seconds: tq,
            seconds_per_frame: per_frame(tq),
        },
        ratio: tq / tf,
        max_abs_diff: pf.max_abs_diff(&pq),
    })
}

fn cmd_bench(a: &BenchArgs, out: &mut dyn Write) -> CmdResult {
    if a.frames == 0 || a.reps == 0 {
        return Err(Failure::usage("--frames and --reps must be positive"));
    }
    let model = load_model_file(&a.model)?;
    let r = bench(&model, a.frames, a.reps, a.seed)?;
    match a.report {
        ReportFormat::Json => out.write_all(to_json(&r).as_bytes())?,
        ReportFormat::Table => writeln!(
            out,
            "frames {} x reps {} (scope {})\nfloat      {:.3} us/frame\nquantized  {:.3} us/frame\nratio      {:.3} (quantized / float)\nmax |diff| {:.3e}",
            r.frames,
            r.reps,
            r.scope.name(),
            r.float.seconds_per_frame * 1e6,
            r.quantized.seconds_per_frame * 1e6,
            r.ratio,
            r.max_abs_diff
        )?,
    }
    Ok(())
}
