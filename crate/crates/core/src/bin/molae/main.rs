//! `molae`: generate, convert, verify, count, run and time MoE / latent-expert layers.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O or format, 3 numerical failure,
//! 4 verification failure.

mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use molae::accounting::{census, cost_report, ArchSpec, CostReport};
use molae::container::{self, Dtype, FormatError};
use molae::generate::{generate, GenConfig, ModelKind};
use molae::transform::{collect_activations, transform_layer, verify_equivalence, TransformMode, TransformOptions};
use molae::{Activation, FfnLayer, Layer, OpMask};

use manifest::{default_path, Artifact, RunManifest};

const USAGE: u8 = 1;
const FORMAT: u8 = 2;
const NUMERICAL: u8 = 3;
const VERIFICATION: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "molae", version, about = "MoE to latent-expert conversion toolkit")]
struct Cli {
    /// Where to write the run manifest (default: next to the output file,
    /// or molae-<command>.manifest.json).
    #[arg(long, global = true, value_name = "PATH")]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic layer.
    Gen(GenArgs),
    /// Convert a standard MoE layer to latent-expert form.
    Transform(TransformArgs),
    /// Compare the outputs of two layers on random probes.
    Verify(VerifyArgs),
    /// Parameter and FLOP accounting.
    Count(CountArgs),
    /// Run a layer over rows of a raw little-endian f32 file.
    Forward(ForwardArgs),
    /// Time forward passes.
    Bench(BenchArgs),
}

#[derive(Debug, Args, Serialize)]
struct GenArgs {
    #[arg(long, value_parser = ["moe", "molae", "planted"])]
    kind: String,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    experts: usize,
    #[arg(long)]
    topk: usize,
    #[arg(long, default_value_t = 1)]
    group_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Latent operators of a generated molae layer.
    #[arg(long, default_value = "up,gate,down")]
    ops: String,
    #[arg(long, default_value = "silu", value_parser = ["silu", "identity", "relu"])]
    activation: String,
    /// On-disk precision; planted layers default to f64 so their exact
    /// structure survives storage.
    #[arg(long, value_parser = ["f32", "f64"])]
    dtype: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct TransformArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Rank of the shared projections (default: intermediate dimension).
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Per-expert rank before factoring, or `full`.
    #[arg(long, default_value = "full", conflicts_with = "rank_ratio")]
    rank: String,
    /// Per-expert rank as a fraction of min(m, n).
    #[arg(long)]
    rank_ratio: Option<f64>,
    #[arg(long, default_value_t = 1)]
    group_size: usize,
    #[arg(long, default_value = "up,gate,down")]
    ops: String,
    #[arg(long, default_value = "plain", value_parser = ["plain", "activation-aware"])]
    mode: String,
    /// Calibration probes for activation-aware mode.
    #[arg(long, default_value_t = 256)]
    calib_samples: usize,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    report: Option<PathBuf>,
    /// Probes for the forward-deviation summary.
    #[arg(long, default_value_t = 64)]
    probes: usize,
    /// Seed for calibration and probe inputs.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "f32", value_parser = ["f32", "f64"])]
    dtype: String,
}

#[derive(Debug, Args, Serialize)]
struct VerifyArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 64)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_rel_dev: f64,
}

#[derive(Debug, Args, Serialize)]
struct CountArgs {
    #[arg(long = "in", conflicts_with_all = ["n", "m", "experts"], required_unless_present_all = ["n", "m", "experts"])]
    input: Option<PathBuf>,
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    m: Option<u64>,
    #[arg(long)]
    experts: Option<u64>,
    /// Group size; for a standard layer read with --in it sets the comparison.
    #[arg(long)]
    group_size: Option<u64>,
    #[arg(long)]
    topk: Option<u64>,
    #[arg(long)]
    ops: Option<String>,
    /// Also write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ForwardArgs {
    #[arg(long = "in")]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct BenchArgs {
    #[arg(long = "in")]
    model: PathBuf,
    #[arg(long, default_value_t = 256)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self { code, error: error.into() }
    }

    fn usage(msg: impl std::fmt::Display) -> Self {
        Self::new(USAGE, anyhow!("{msg}"))
    }

    fn context(mut self, ctx: impl std::fmt::Display) -> Self {
        self.error = self.error.context(ctx.to_string());
        self
    }
}

impl From<molae::Error> for Failure {
    fn from(e: molae::Error) -> Self {
        let code = match &e {
            molae::Error::Format(_) | molae::Error::Io(_) => FORMAT,
            e if e.is_numerical() => NUMERICAL,
            _ => USAGE,
        };
        Self::new(code, e)
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        Self::new(FORMAT, e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(FORMAT, e)
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE } else { 0 });
        }
    };
    let manifest_path = cli.manifest;
    let outcome = match cli.command {
        Command::Gen(a) => cmd_gen(a, manifest_path),
        Command::Transform(a) => cmd_transform(a, manifest_path),
        Command::Verify(a) => cmd_verify(a, manifest_path),
        Command::Count(a) => cmd_count(a, manifest_path),
        Command::Forward(a) => cmd_forward(a, manifest_path),
        Command::Bench(a) => cmd_bench(a, manifest_path),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn options_json(args: &impl Serialize) -> Value {
    serde_json::to_value(args).unwrap_or(Value::Null)
}

fn read_file(path: &Path) -> CmdResult<Vec<u8>> {
    fs::read(path).map_err(|e| Failure::from(e).context(format!("reading {}", path.display())))
}

fn load_layer(path: &Path, manifest: &mut RunManifest) -> CmdResult<Layer> {
    let bytes = read_file(path)?;
    manifest.inputs.push(Artifact::new(path, &bytes));
    container::from_bytes(&bytes).map_err(|e| Failure::from(e).context(format!("loading {}", path.display())))
}

fn write_output(path: &Path, bytes: &[u8], manifest: &mut RunManifest) -> CmdResult {
    container::write_atomic(path, bytes).map_err(|e| Failure::from(e).context(format!("writing {}", path.display())))?;
    manifest.outputs.push(Artifact::new(path, bytes));
    Ok(())
}

fn pretty_json(v: &impl Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn finish(manifest: RunManifest, explicit: Option<PathBuf>, output: Option<&Path>) -> CmdResult {
    let path = explicit.unwrap_or_else(|| default_path(manifest.command, output));
    container::write_atomic(&path, pretty_json(&manifest).as_bytes())
        .map_err(|e| Failure::from(e).context(format!("writing manifest {}", path.display())))
}

fn parse<T: std::str::FromStr<Err = String>>(what: &str, s: &str) -> CmdResult<T> {
    s.parse().map_err(|e| Failure::usage(format!("--{what}: {e}")))
}

fn cmd_gen(args: GenArgs, manifest_path: Option<PathBuf>) -> CmdResult<u8> {
    let mut manifest = RunManifest::new("gen", options_json(&args), Some(args.seed));
    let kind: ModelKind = parse("kind", &args.kind)?;
    let activation: Activation = parse("activation", &args.activation)?;
    let op_mask: OpMask = parse("ops", &args.ops)?;
    let dtype = match &args.dtype {
        Some(d) => parse("dtype", d)?,
        None if kind == ModelKind::Planted => Dtype::F64,
        None => Dtype::F32,
    };
    let config = GenConfig {
        kind,
        hidden: args.n,
        intermediate: args.m,
        experts: args.experts,
        top_k: args.topk,
        group_size: args.group_size,
        op_mask,
        activation,
        seed: args.seed,
    };
    let layer = generate(&config)?;
    let bytes = container::to_bytes(&layer, dtype)?;
    write_output(&args.out, &bytes, &mut manifest)?;
    manifest.summary = json!({ "kind": layer.kind_name(), "census": census(&layer), "dtype": dtype.to_string() });
    println!("wrote {} layer ({} FFN parameters) to {}", kind, census(&layer), args.out.display());
    finish(manifest, manifest_path, Some(&args.out))?;
    Ok(0)
}

fn resolve_rank(args: &TransformArgs, n: usize, m: usize) -> CmdResult<Option<usize>> {
    if let Some(f) = args.rank_ratio {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Failure::usage(format!("--rank-ratio {f} outside (0, 1]")));
        }
        let full = m.min(n);
        return Ok(Some(((f * full as f64).round() as usize).clamp(1, full)));
    }
    match args.rank.as_str() {
        "full" => Ok(None),
        s => s.parse().map(Some).map_err(|_| Failure::usage(format!("--rank expects an integer or `full`, got `{s}`"))),
    }
}

fn cmd_transform(args: TransformArgs, manifest_path: Option<PathBuf>) -> CmdResult<u8> {
    let mut manifest = RunManifest::new("transform", options_json(&args), Some(args.seed));
    let src = match load_layer(&args.input, &mut manifest)? {
        Layer::Moe(l) => l,
        Layer::Molae(_) => {
            return Err(Failure::new(FORMAT, anyhow!("{} holds a latent layer; transform expects a standard MoE layer", args.input.display())))
        }
    };
    let mode: TransformMode = parse("mode", &args.mode)?;
    let dtype: Dtype = parse("dtype", &args.dtype)?;
    let opts = TransformOptions {
        latent_dim: args.latent_dim,
        target_rank: resolve_rank(&args, src.hidden_dim(), src.intermediate_dim())?,
        group_size: args.group_size,
        op_mask: parse("ops", &args.ops)?,
        mode,
        lambda: args.lambda,
        probes: args.probes,
        probe_seed: args.seed,
        ..TransformOptions::default()
    };
    let acts = match mode {
        TransformMode::Plain => None,
        TransformMode::ActivationAware => {
            if args.calib_samples == 0 {
                return Err(Failure::usage("--calib-samples must be positive in activation-aware mode"));
            }
            Some(collect_activations(&src, args.calib_samples, args.seed)?)
        }
    };
    let (layer, report) = transform_layer(&src, &opts, acts.as_ref())?;
    let bytes = container::to_bytes(&Layer::Molae(layer), dtype)?;
    write_output(&args.out, &bytes, &mut manifest)?;
    if let Some(path) = &args.report {
        write_output(path, pretty_json(&report).as_bytes(), &mut manifest)?;
    }
    manifest.summary = json!({
        "total_residual": report.total_residual,
        "relative_residual": report.relative_residual,
        "all_exact": report.all_exact,
        "forward_deviation": report.forward_deviation,
    });
    println!(
        "transformed {} experts into {} groups (k = {}, ops = {}): relative residual {:.3e}, exact = {}",
        report.experts, report.groups, report.group_size, report.op_mask, report.relative_residual, report.all_exact
    );
    if let Some(d) = &report.forward_deviation {
        println!("forward deviation over {} probes: max {:.3e}, mean {:.3e}", d.probes, d.max_rel, d.mean_rel);
    }
    finish(manifest, manifest_path, Some(&args.out))?;
    Ok(0)
}

fn cmd_verify(args: VerifyArgs, manifest_path: Option<PathBuf>) -> CmdResult<u8> {
    let mut manifest = RunManifest::new("verify", options_json(&args), Some(args.seed));
    if !(args.max_rel_dev >= 0.0) {
        return Err(Failure::usage(format!("--max-rel-dev must be non-negative, got {}", args.max_rel_dev)));
    }
    let a = load_layer(&args.a, &mut manifest)?;
    let b = load_layer(&args.b, &mut manifest)?;
    let stats = verify_equivalence(&a, &b, args.probes, args.seed)?;
    let pass = stats.max_rel <= args.max_rel_dev;
    manifest.summary = json!({ "deviation": stats, "max_rel_dev": args.max_rel_dev, "pass": pass });
    print!("{}", pretty_json(&manifest.summary));
    finish(manifest, manifest_path, None)?;
    Ok(if pass { 0 } else { VERIFICATION })
}

#[derive(Serialize)]
struct CountOutput {
    #[serde(flatten)]
    report: CostReport,
    layer_kind: Option<&'static str>,
    census: Option<u64>,
    /// Census equals the stored-parameter count of the matching architecture.
    census_matches: Option<bool>,
}

fn cmd_count(args: CountArgs, manifest_path: Option<PathBuf>) -> CmdResult<u8> {
    let mut manifest = RunManifest::new("count", options_json(&args), None);
    let (spec, layer) = match &args.input {
        Some(path) => {
            let layer = load_layer(path, &mut manifest)?;
            let mut spec = ArchSpec::of_layer(&layer, args.group_size.unwrap_or(1));
            if let (Layer::Moe(_), Some(ops)) = (&layer, &args.ops) {
                spec.op_mask = parse("ops", ops)?;
            }
            if let Some(k) = args.topk {
                spec.top_k = Some(k);
            }
            (spec, Some(layer))
        }
        None => {
            let (Some(n), Some(m), Some(e)) = (args.n, args.m, args.experts) else {
                return Err(Failure::usage("count needs --in or all of --n, --m and --experts"));
            };
            let mut spec = ArchSpec::new(n, m, e, args.group_size.unwrap_or(1));
            if let Some(ops) = &args.ops {
                spec.op_mask = parse("ops", ops)?;
            }
            spec.top_k = args.topk;
            (spec, None)
        }
    };
    let report = cost_report(&spec)?;
    let (layer_kind, layer_census, matches) = match &layer {
        Some(l) => {
            let c = census(l);
            let expected = match l {
                Layer::Moe(_) => report.moe_params,
                Layer::Molae(_) => report.molae_params_stored,
            };
            (Some(l.kind_name()), Some(c), Some(c == expected))
        }
        None => (None, None, None),
    };
    let out = CountOutput { report, layer_kind, census: layer_census, census_matches: matches };
    print!("{}", out.report.to_text());
    if let (Some(kind), Some(c), Some(ok)) = (layer_kind, layer_census, matches) {
        println!("census of {kind} layer: {c} (matches: {ok})");
    }
    let body = pretty_json(&out);
    match &args.json {
        Some(path) => write_output(path, body.as_bytes(), &mut manifest)?,
        None => print!("{body}"),
    }
    manifest.summary = serde_json::to_value(&out).unwrap_or(Value::Null);
    finish(manifest, manifest_path, args.json.as_deref())?;
    Ok(0)
}

fn cmd_forward(args: ForwardArgs, manifest_path: Option<PathBuf>) -> CmdResult<u8> {
    let mut manifest = RunManifest::new("forward", options_json(&args), None);
    let layer = load_layer(&args.model, &mut manifest)?;
    let raw = read_file(&args.input)?;
    manifest.inputs.push(Artifact::new(&args.input, &raw));
    let n = layer.hidden_dim();
    let row_bytes = 4 * n;
    if raw.is_empty() || raw.len() % row_bytes != 0 {
        return Err(Failure::new(
            FORMAT,
            anyhow!("{}: {} bytes is not a positive multiple of {row_bytes} (rows of {n} f32)", args.input.display(), raw.len()),
        ));
    }
    let values: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Failure::new(FORMAT, anyhow!("{}: value {i} (byte {}) is not finite", args.input.display(), 4 * i)));
    }
    let rows = values.len() / n;
    let mut out = Vec::with_capacity(raw.len());
    for r in 0..rows {
        let y = layer.forward(&values[r * n..(r + 1) * n])?;
        for v in y {
            let narrow = v as f32;
            if !narrow.is_finite() {
                return Err(Failure::new(NUMERICAL, anyhow!("output row {r} is not finite in f32")));
            }
            out.extend_from_slice(&narrow.to_le_bytes());
        }
    }
    write_output(&args.out, &out, &mut manifest)?;
    manifest.summary = json!({ "rows": rows, "hidden": n });
    println!("wrote {rows} rows to {}", args.out.display());
    finish(manifest, manifest_path, Some(&args.out))?;
    Ok(0)
}

fn cmd_bench(args: BenchArgs, manifest_path: Option<PathBuf>) -> CmdResult<u8> {
    let mut manifest = RunManifest::new("bench", options_json(&args), Some(args.seed));
    if args.probes == 0 {
        return Err(Failure::usage("--probes must be positive"));
    }
    let layer = load_layer(&args.model, &mut manifest)?;
    let xs = molae::generate::probe_inputs(args.seed, args.probes, layer.hidden_dim());
    layer.forward(xs.row(0))?;
    let start = Instant::now();
    for r in 0..args.probes {
        std::hint::black_box(layer.forward(xs.row(r))?);
    }
    let seconds = start.elapsed().as_secs_f64();
    let group_size = match &layer {
        Layer::Moe(_) => 1,
        Layer::Molae(l) => l.config().group_size as u64,
    };
    let report = cost_report(&ArchSpec::of_layer(&layer, group_size))?;
    let flops = match &layer {
        Layer::Moe(_) => report.moe_flops,
        Layer::Molae(_) => report.molae_flops,
    };
    manifest.summary = json!({
        "layer_kind": layer.kind_name(),
        "probes": args.probes,
        "total_seconds": seconds,
        "seconds_per_forward": seconds / args.probes as f64,
        "analytic_flops_all_experts": flops,
        "analytic_flops_active": report.active.map(|a| match &layer {
            Layer::Moe(_) => a.moe_flops,
            Layer::Molae(_) => a.molae_flops_upper,
        }),
        "census": census(&layer),
    });
    print!("{}", pretty_json(&manifest.summary));
    finish(manifest, manifest_path, None)?;
    Ok(0)
}
