//! `lfhn`: corpus generation, training, evaluation, gradient checks and
//! shape traces for the multi-stream local feature hierarchy network.

mod run_config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lfhn_core::data::{
    generate_corpus, load_corpus, split, CorpusSpec, LabeledSample, LightRoster, Manifest,
    PoseRoster, SplitProtocol,
};
use lfhn_core::eval::{evaluate, format_table, TableStyle};
use lfhn_core::gradcheck::{
    grad_check, layer_check, probe_batch, CheckOptions, GradReport, LayerKind, LAYER_TOLERANCE,
    NETWORK_TOLERANCE,
};
use lfhn_core::graph::{
    load_checkpoint, parameter_shapes, save_checkpoint, shape_trace, NetworkGraph,
};
use lfhn_core::layers::LrnAdjoint;
use lfhn_core::train::{scaled_source, train_with};
use run_config::{parse_override, Preset, RunConfig, SEED_ENV};

#[derive(Parser)]
#[command(name = "lfhn", version, about = "Multi-stream local feature hierarchy network")]
struct Cli {
    /// Worker threads (1 forces the fully sequential path).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic identity x pose x light corpus to PGM/PPM files.
    GenData(GenDataArgs),
    /// Train a network on a corpus and write a checkpoint plus epoch log.
    Train(TrainArgs),
    /// Rank-1 identification rates per pose bin.
    Eval(EvalArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Print the per-node output shapes of a configuration.
    Shapes(ShapesArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture preset; overrides a `preset` key in the config file.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Extra `key=value` overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Full,
    Desk,
    Tiny,
}

impl PresetArg {
    fn key(self) -> &'static str {
        match self {
            PresetArg::Full => "full",
            PresetArg::Desk => "desk",
            PresetArg::Tiny => "tiny",
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    ids: usize,
    /// Defaults to $LFHN_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    /// Square image extent; defaults to the desk crop source.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 3)]
    channels: usize,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Corpus directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Epoch log path; defaults to the checkpoint path with `.log.csv`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Split protocol; training uses its train part.
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    freeze_root: bool,
    /// Pretrained root convolution (raw little-endian floats).
    #[arg(long)]
    root_weights: Option<PathBuf>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split protocol; evaluation uses its test part. Default: every sample.
    #[arg(long)]
    split: Option<String>,
    #[arg(long, default_value = "csv")]
    style: String,
    /// CSV output path; defaults to the model path with `.eval.csv`.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Also write per-(pose, light) rates to this CSV.
    #[arg(long)]
    per_light: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Check a single layer type in isolation instead of the whole network.
    #[arg(long)]
    layer: Option<String>,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    /// Elements checked per parameter tensor.
    #[arg(long, default_value_t = 32)]
    samples: usize,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Test fixture: run with a deliberately broken backward pass.
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct ShapesArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

/// Error with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

type CmdResult = Result<ExitCode, Failure>;

fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        err: err.into(),
    }
}

impl From<lfhn_core::Error> for Failure {
    fn from(e: lfhn_core::Error) -> Self {
        use lfhn_core::Error as E;
        let code = match e {
            E::Config(_) | E::Unknown { .. } => 2,
            _ => 3,
        };
        Failure {
            code,
            err: e.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(err: anyhow::Error) -> Self {
        let code = match err.downcast_ref::<lfhn_core::Error>() {
            Some(lfhn_core::Error::Config(_) | lfhn_core::Error::Unknown { .. }) => 2,
            _ => 3,
        };
        Failure { code, err }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a, cli.threads),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Shapes(a) => shapes(a),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn default_seed() -> Result<u64, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .parse()
            .map_err(|_| usage(anyhow!("{SEED_ENV}={s:?} is not an integer"))),
        Err(_) => Ok(0),
    }
}

fn load_config(
    args: &ConfigArgs,
    preset: Preset,
    extra: Vec<(String, String)>,
) -> Result<RunConfig, Failure> {
    let mut overrides: Vec<(String, String)> = args
        .preset
        .map(|p| ("preset".to_string(), p.key().to_string()))
        .into_iter()
        .collect();
    for s in &args.set {
        overrides.push(parse_override(s).map_err(usage)?);
    }
    overrides.extend(extra);
    RunConfig::load(preset, args.config.as_deref(), &overrides).map_err(usage)
}

fn parse_split(s: &str) -> Result<Option<SplitProtocol>, Failure> {
    match s {
        "all" | "none" => Ok(None),
        _ => Ok(Some(s.parse().map_err(usage)?)),
    }
}

fn gen_data(a: GenDataArgs) -> CmdResult {
    let seed = match a.seed {
        Some(s) => s,
        None => default_seed()?,
    };
    let size = a.size.unwrap_or_else(|| scaled_source(67));
    let spec = CorpusSpec {
        identities: a.ids,
        poses: PoseRoster::default(),
        lights: LightRoster::default(),
        height: size,
        width: size,
        channels: a.channels,
        seed,
    };
    let manifest = generate_corpus(&spec, &a.out)?;
    println!(
        "wrote {} images ({} ids x {} poses x {} lights, {size}x{size}x{}) to {}",
        manifest.rows.len(),
        a.ids,
        spec.poses.len(),
        spec.lights.len(),
        a.channels,
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn split_samples(
    samples: Vec<LabeledSample>,
    protocol: Option<&SplitProtocol>,
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>), Failure> {
    match protocol {
        None => Ok((samples.clone(), samples)),
        Some(p) => {
            let s = split(samples, p)?;
            Ok((s.train, s.test))
        }
    }
}

fn train(a: TrainArgs, threads: Option<usize>) -> CmdResult {
    let mut extra: Vec<(String, String)> = Vec::new();
    let mut set = |k: &str, v: String| extra.push((k.to_string(), v));
    if let Some(v) = &a.data {
        set("data", v.display().to_string());
    }
    if let Some(v) = &a.split {
        set("split", v.clone());
    }
    if let Some(v) = a.seed {
        set("seed", v.to_string());
    }
    if let Some(v) = a.lr {
        set("lr", v.to_string());
    }
    if let Some(v) = a.momentum {
        set("momentum", v.to_string());
    }
    if let Some(v) = a.batch_size {
        set("batch_size", v.to_string());
    }
    if let Some(v) = a.epochs {
        set("epochs", v.to_string());
    }
    if a.freeze_root {
        set("freeze_root", "true".into());
    }
    if a.no_augment {
        set("augment", "false".into());
    }
    if let Some(v) = &a.root_weights {
        set("root_weights", v.display().to_string());
    }
    if let Some(v) = threads {
        set("threads", v.to_string());
    }
    let mut rc = load_config(&a.cfg, Preset::Desk, extra)?;
    let data = rc
        .data
        .clone()
        .ok_or_else(|| usage(anyhow!("no corpus given (--data or `data` key)")))?;

    let samples = load_corpus(&data)?;
    if !rc.classes_set {
        rc.net.classes = samples.iter().map(|s| s.identity + 1).max().unwrap_or(1);
    }
    let (train_set, _) = split_samples(samples, rc.split.as_ref())?;

    let mut net = NetworkGraph::build(&rc.net, rc.seed).map_err(usage)?;
    match &rc.root_weights {
        Some(p) => net.load_root_weights(p)?,
        None if rc.train.freeze_root => {
            log::warn!("freezing a randomly initialized root (no root weights given)")
        }
        None => {}
    }
    log::info!(
        "training {} parameters on {} samples",
        net.parameter_count(),
        train_set.len()
    );
    let log = train_with(&mut net, &train_set, &rc.train, |e| {
        eprintln!("epoch {:>4}  loss {:.6}  acc {:.4}", e.epoch, e.mean_loss, e.train_acc)
    })?;
    save_checkpoint(&net, &a.out)?;
    let log_path = a.log.unwrap_or_else(|| a.out.with_extension("log.csv"));
    fs::write(&log_path, log.to_string()).map_err(lfhn_core::Error::from)?;
    println!("checkpoint {}", a.out.display());
    println!("epoch log {}", log_path.display());
    Ok(ExitCode::SUCCESS)
}

fn roster_for(data: &Path) -> PoseRoster {
    match Manifest::read(data) {
        Ok(m) => {
            let r = m.pose_roster();
            if r.0.iter().all(|p| p.yaw_deg.is_finite()) {
                return r;
            }
            log::warn!("manifest pose roster has gaps; using the default roster");
        }
        Err(e) => log::warn!("no usable manifest ({e}); using the default pose roster"),
    }
    PoseRoster::default()
}

fn eval(a: EvalArgs) -> CmdResult {
    let style: TableStyle = a.style.parse().map_err(usage)?;
    let protocol = match &a.split {
        Some(s) => parse_split(s)?,
        None => None,
    };
    let net = load_checkpoint(&a.model)
        .with_context(|| format!("loading model {}", a.model.display()))?;
    let samples = load_corpus(&a.data)?;
    let (_, test) = split_samples(samples, protocol.as_ref())?;
    let roster = roster_for(&a.data);
    let table = evaluate(&net, &test, &roster)?;
    for w in &table.warnings {
        eprintln!("warning: {w}");
    }
    print!("{}", format_table(&table, style));
    let csv_path = a.csv.unwrap_or_else(|| a.model.with_extension("eval.csv"));
    fs::write(&csv_path, format_table(&table, TableStyle::Csv)).map_err(lfhn_core::Error::from)?;
    if let Some(path) = a.per_light {
        let mut out = String::from("pose_id,light_id,n_samples,rank1_pct\n");
        for (pose, row) in table.cells.iter().enumerate() {
            for (light, &(n, _)) in row.iter().enumerate() {
                let rate = table
                    .cell_rate(pose, light)
                    .map(|r| r.to_string())
                    .unwrap_or_default();
                out.push_str(&format!("{pose},{light},{n},{rate}\n"));
            }
        }
        fs::write(&path, out).map_err(lfhn_core::Error::from)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn print_report(title: &str, report: &GradReport, tolerance: f64) -> bool {
    let ok = report.passes(tolerance);
    println!(
        "{title}: max relative error {:.3e} (tolerance {tolerance:.0e}) {}",
        report.max_error(),
        if ok { "PASS" } else { "FAIL" }
    );
    print!("{report}");
    ok
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let adjoint = match a.inject_fault.as_deref() {
        None => LrnAdjoint::Exact,
        Some("lrn-cross-terms") => LrnAdjoint::DropCrossTerms,
        Some(other) => return Err(usage(anyhow!("unknown fault {other:?}"))),
    };
    let mut extra = Vec::new();
    if let Some(s) = a.seed {
        extra.push(("seed".to_string(), s.to_string()));
    }
    let rc = load_config(&a.cfg, Preset::Tiny, extra)?;
    let opts = CheckOptions {
        epsilon: a.epsilon,
        samples: a.samples,
        seed: rc.seed,
    };
    let mut ok = true;
    let layers: Vec<LayerKind> = match &a.layer {
        Some(l) => vec![l.parse().map_err(usage)?],
        None => {
            let mut net = NetworkGraph::build(&rc.net, rc.seed).map_err(usage)?;
            net.set_lrn_adjoint(adjoint);
            let (x, labels) = probe_batch(&net, a.batch, rc.seed);
            let report = grad_check(&net, &x, &labels, &opts)?;
            ok &= print_report("network", &report, NETWORK_TOLERANCE);
            let mut per_layer: Vec<(String, f64)> = Vec::new();
            for e in &report.entries {
                let layer = e.name.split('.').next().unwrap_or(&e.name).to_string();
                match per_layer.iter_mut().find(|(l, _)| *l == layer) {
                    Some((_, m)) => *m = m.max(e.max_rel_error),
                    None => per_layer.push((layer, e.max_rel_error)),
                }
            }
            for (layer, m) in per_layer {
                println!("  {layer:<8} {m:.3e}");
            }
            LayerKind::ALL.to_vec()
        }
    };
    for kind in layers {
        let report = layer_check(kind, &opts, adjoint)?;
        ok &= print_report(&format!("layer {kind}"), &report, LAYER_TOLERANCE);
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn shapes(a: ShapesArgs) -> CmdResult {
    let rc = load_config(&a.cfg, Preset::Full, Vec::new())?;
    let trace = shape_trace(&rc.net).map_err(usage)?;
    for (name, shape) in &trace {
        let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
        println!("{name:<8} {}", dims.join("x"));
    }
    let params: usize = parameter_shapes(&rc.net)
        .map_err(usage)?
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    println!("parameters {params}");
    Ok(ExitCode::SUCCESS)
}
