//! Command-line front end. Exit codes: 0 success, 1 usage, 2 data, 3 numeric.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::dataio::{load_image, read_labelled, read_manifest, mean_image};
use crate::error::{Error, Result};
use crate::eval::{self, EvalReport, Features};
use crate::gradcheck::{run_suite, SuiteOptions};
use crate::graph::{
    builtin_with_crop, count_flops, load_model, parse_descriptor, save_model, with_fnl, write_atomic, LayerDef,
    LayerParams, Network, NetworkDescriptor, BUILTIN_NAMES, DEFAULT_CROP,
};
use crate::ops::Mode;
use crate::tensor::Tensor;
use crate::train::{augment, Dataset, SolverConfig, Trainer, BASE_LR, BASE_LR_FNL};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "facerep", version, about = "Train, inspect and evaluate face-representation CNNs")]
pub struct Cli {
    /// Worker threads for GEMM and feature extraction (results do not depend on it)
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print each layer's kind, output shape and parameter count
    Describe(DescribeArgs),
    /// Count multiply-accumulates of built-in networks
    Flops(FlopsArgs),
    /// Train a network on a manifest of PGM/PPM images
    Train(TrainArgs),
    /// Write feature vectors for every manifest entry
    Extract(ExtractArgs),
    /// k-fold pair verification report
    Verify(VerifyArgs),
    /// Closed-set rank-1 and open-set DIR report
    Identify(IdentifyArgs),
    /// Finite-difference checks of every backward pass
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
#[group(id = "source", required = true, multiple = false)]
pub struct SourceArgs {
    /// Saved model file
    #[arg(long, group = "source")]
    pub model: Option<PathBuf>,
    /// Built-in architecture name
    #[arg(long, group = "source")]
    pub builtin: Option<String>,
    /// Descriptor text file
    #[arg(long, group = "source")]
    pub descriptor: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DescribeArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    /// Crop size for built-ins
    #[arg(long, default_value_t = DEFAULT_CROP)]
    pub crop: usize,
    /// Insert normalisation before every fused ReLU
    #[arg(long)]
    pub fnl: bool,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Built-in name; give two to print their ratio (first / second)
    #[arg(long, required = true, num_args = 1)]
    pub builtin: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_CROP)]
    pub crop: usize,
    /// Also print every layer
    #[arg(long)]
    pub per_layer: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// `path,label` manifest; relative paths resolve against its directory
    #[arg(long)]
    pub manifest: PathBuf,
    /// Built-in name or descriptor file
    #[arg(long)]
    pub arch: String,
    /// Output model file
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Passes over the data (ignored when --iters is given)
    #[arg(long, default_value_t = 1)]
    pub epochs: usize,
    /// Exact iteration count
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Defaults to 0.04 with --fnl and 0.01 without
    #[arg(long)]
    pub base_lr: Option<f32>,
    #[arg(long, default_value_t = 0.5)]
    pub lr_power: f32,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f32,
    #[arg(long, default_value_t = 0.0005)]
    pub weight_decay: f32,
    #[arg(long, default_value_t = 0.5)]
    pub flip_prob: f32,
    /// Crop size for built-in architectures
    #[arg(long, default_value_t = DEFAULT_CROP)]
    pub crop: usize,
    /// Insert normalisation before every fused ReLU
    #[arg(long)]
    pub fnl: bool,
    /// Loss log file (`iter,lr,loss` lines); standard output when absent
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Take the feature edge before its ReLU
    #[arg(long)]
    pub pre_relu: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// `fold,sample_a,sample_b,same` lines
    #[arg(long)]
    pub pairs: PathBuf,
}

#[derive(Debug, Args)]
pub struct IdentifyArgs {
    #[arg(long)]
    pub features: PathBuf,
    /// `sample,identity` lines
    #[arg(long)]
    pub gallery: PathBuf,
    /// `sample,identity` lines; identities absent from the gallery are unknown
    #[arg(long)]
    pub probes: PathBuf,
    /// False-alarm rate in (0,1) for the open-set report
    #[arg(long)]
    pub far: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Usage(_) | Error::Config(_) => EXIT_USAGE,
        Error::Shape(_) | Error::Numeric(_) | Error::BatchSize(_) | Error::StateCorruption(_) | Error::Index { .. } => {
            EXIT_NUMERIC
        }
        _ => EXIT_DATA,
    }
}

/// Parses `args` (including the program name), runs, and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn std::io::Write) -> Result<i32> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::usage("--threads must be at least 1"));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let text = match cli.command {
        Command::Describe(a) => describe(&a)?,
        Command::Flops(a) => flops(&a)?,
        Command::Train(a) => train(&a)?,
        Command::Extract(a) => extract(&a)?,
        Command::Verify(a) => verify(&a)?,
        Command::Identify(a) => identify(&a)?,
        Command::Gradcheck(a) => {
            let (text, ok) = gradcheck(&a)?;
            write!(out, "{text}").map_err(|e| Error::io("<stdout>", e))?;
            return Ok(if ok { EXIT_OK } else { EXIT_NUMERIC });
        }
    };
    write!(out, "{text}").map_err(|e| Error::io("<stdout>", e))?;
    Ok(EXIT_OK)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn check_builtin(name: &str) -> Result<()> {
    if BUILTIN_NAMES.contains(&name) {
        Ok(())
    } else {
        Err(Error::usage(format!("unknown builtin `{name}` (expected one of {})", BUILTIN_NAMES.join(", "))))
    }
}

fn describe(a: &DescribeArgs) -> Result<String> {
    let mut desc = if let Some(p) = &a.source.model {
        load_model(p)?.descriptor().clone()
    } else if let Some(name) = &a.source.builtin {
        check_builtin(name)?;
        builtin_with_crop(name, a.crop)?
    } else {
        let p = a.source.descriptor.as_ref().expect("clap enforces one source");
        parse_descriptor(&read_text(p)?).map_err(|e| data_error_in(p, e))?
    };
    if a.fnl {
        desc = with_fnl(&desc)?;
    }
    describe_table(&desc)
}

fn data_error_in(path: &Path, e: Error) -> Error {
    match e {
        Error::Parse { line, message } => Error::data(format!("{}:{line}: {message}", path.display())),
        e => e,
    }
}

/// One row per layer: name, kind, per-sample output shape, parameter count.
pub fn describe_table(desc: &NetworkDescriptor) -> Result<String> {
    let shapes = desc.edge_shapes()?;
    let mut s = String::new();
    writeln!(s, "{:<14} {:<13} {:<16} {:>12}", "layer", "kind", "output", "params").unwrap();
    let mut total = 0;
    for l in &desc.layers {
        let n = desc.param_count(l, &shapes)?;
        total += n;
        writeln!(s, "{:<14} {:<13} {:<16} {:>12}", l.name, l.kind().as_str(), shapes[l.output()].to_string(), n).unwrap();
    }
    writeln!(s, "total_params {total}").unwrap();
    Ok(s)
}

fn flops(a: &FlopsArgs) -> Result<String> {
    if a.builtin.len() > 2 {
        return Err(Error::usage("give one or two --builtin names"));
    }
    let mut s = String::new();
    let mut totals = Vec::new();
    for name in &a.builtin {
        check_builtin(name)?;
        let d = builtin_with_crop(name, a.crop)?;
        let r = count_flops(&d, &d.input_shape)?;
        if a.per_layer {
            for l in r.layers.iter().filter(|l| l.macs > 0) {
                let note = if l.headline { "" } else { " (not in total)" };
                writeln!(s, "{name}.{} {} {}{note}", l.name, l.kind, l.macs).unwrap();
            }
        }
        writeln!(s, "{name} total_macs {}", r.total).unwrap();
        totals.push(r.total);
    }
    if let [x, y] = totals[..] {
        writeln!(s, "ratio {:.3}", x as f64 / y as f64).unwrap();
    }
    Ok(s)
}

fn arch_descriptor(a: &TrainArgs) -> Result<NetworkDescriptor> {
    let desc = if BUILTIN_NAMES.contains(&a.arch.as_str()) {
        builtin_with_crop(&a.arch, a.crop)?
    } else {
        let p = Path::new(&a.arch);
        if !p.exists() {
            return Err(Error::usage(format!(
                "--arch `{}` is neither a builtin ({}) nor a descriptor file",
                a.arch,
                BUILTIN_NAMES.join(", ")
            )));
        }
        parse_descriptor(&read_text(p)?).map_err(|e| data_error_in(p, e))?
    };
    let desc = if a.fnl { with_fnl(&desc)? } else { desc };
    with_loss(desc)
}

/// Appends a softmax loss on the single unconsumed edge when none is declared.
pub fn with_loss(desc: NetworkDescriptor) -> Result<NetworkDescriptor> {
    if desc.layers.iter().any(|l| matches!(l.params, LayerParams::SoftmaxLoss)) {
        return Ok(desc);
    }
    let consumed: std::collections::HashSet<&str> =
        desc.layers.iter().flat_map(|l| l.inputs.iter().map(String::as_str)).collect();
    let sinks: Vec<&str> = desc.layers.iter().map(|l| l.output()).filter(|e| !consumed.contains(e)).collect();
    let [sink] = sinks[..] else {
        return Err(Error::usage(format!("cannot attach a loss: network has {} output edges", sinks.len())));
    };
    let mut name = "loss".to_string();
    while desc.layer(&name).is_some() || desc.producer(&name).is_some() {
        name.push('_');
    }
    let mut layers = desc.layers.clone();
    layers.push(LayerDef {
        name: name.clone(),
        params: LayerParams::SoftmaxLoss,
        inputs: vec![sink.to_string()],
        outputs: vec![name],
    });
    NetworkDescriptor::new(layers, desc.feature.clone())
}

fn load_manifest_images(path: &Path, with_labels: bool) -> Result<(Vec<String>, Vec<usize>, Vec<Tensor>)> {
    let text = read_text(path)?;
    let entries = if with_labels {
        read_manifest(&text)?.entries
    } else {
        let e = read_labelled(&text)?;
        if e.is_empty() {
            return Err(Error::data("empty manifest"));
        }
        e
    };
    let base = path.parent().unwrap_or(Path::new(""));
    let images = entries
        .par_iter()
        .map(|e| {
            let p = Path::new(&e.path);
            load_image(&if p.is_absolute() { p.to_path_buf() } else { base.join(p) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((entries.iter().map(|e| e.path.clone()).collect(), entries.iter().map(|e| e.label).collect(), images))
}

fn square_input(desc: &NetworkDescriptor) -> Result<usize> {
    match desc.input_shape.dims() {
        &[_, h, w] if h == w => Ok(h),
        _ => Err(Error::usage(format!("network input {} is not a square (C,H,W) image", desc.input_shape))),
    }
}

fn train(a: &TrainArgs) -> Result<String> {
    let desc = arch_descriptor(a)?;
    let crop = square_input(&desc)?;
    let (names, labels, images) = load_manifest_images(&a.manifest, true)?;
    let channels = desc.input_shape.dims()[0];
    if let Some((n, img)) = names.iter().zip(&images).find(|(_, i)| i.dims()[0] != channels) {
        return Err(Error::data(format!("{n}: image has {} channels, network expects {channels}", img.dims()[0])));
    }
    let mean = mean_image(names.iter().zip(&images))?;
    let data = Dataset { images, labels };
    let max_iter = match a.iters {
        Some(n) => n,
        None => a.epochs * data.len().div_ceil(a.batch.max(1)),
    };
    let cfg = SolverConfig {
        base_lr: a.base_lr.unwrap_or(if a.fnl { BASE_LR_FNL } else { BASE_LR }),
        lr_power: a.lr_power,
        max_iter,
        momentum: a.momentum,
        weight_decay: a.weight_decay,
        batch_size: a.batch,
        rng_seed: a.seed,
        crop_size: crop,
        flip_prob: a.flip_prob,
    };
    let mut net = Network::new(desc, a.seed)?;
    net.set_input_mean(Some(mean.clone()));
    let mut trainer = Trainer::new(net, cfg, Some(mean))?;
    let log = trainer.train(&data, |_, _| Ok(true))?;
    let mut text = String::new();
    for e in &log {
        writeln!(text, "{}", e.line()).unwrap();
    }
    save_model(&trainer.net, &a.out)?;
    match &a.log {
        Some(p) => {
            write_atomic(p, text.as_bytes())?;
            Ok(String::new())
        }
        None => Ok(text),
    }
}

/// Mean subtraction and centre crop to the network input.
pub fn preprocess(net: &Network, image: &Tensor) -> Result<Tensor> {
    let crop = square_input(net.descriptor())?;
    let cfg = SolverConfig { crop_size: crop, ..Default::default() };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    augment(image, net.input_mean(), &cfg, Mode::Test, &mut rng)
}

fn extract(a: &ExtractArgs) -> Result<String> {
    let net = load_model(&a.model)?;
    eval::feature_key(&net, a.pre_relu)?;
    let (names, _, images) = load_manifest_images(&a.manifest, false)?;
    let inputs = names
        .iter()
        .zip(&images)
        .map(|(n, img)| {
            preprocess(&net, img).map_err(|e| match e {
                Error::Shape(m) | Error::Config(m) => Error::data(format!("{n}: {m}")),
                e => e,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let feats = eval::extract_features(&net, &inputs, a.pre_relu)?;
    let mut f = Features::new();
    for (n, v) in names.into_iter().zip(feats) {
        f.insert(n, v)?;
    }
    f.save(&a.out)?;
    Ok(String::new())
}

fn verify(a: &VerifyArgs) -> Result<String> {
    let features = Features::load(&a.features)?;
    let pairs = eval::read_pairs(&read_text(&a.pairs)?)?;
    let report = eval::verify_folds(&pairs, &features)?;
    Ok(EvalReport { verify: Some(report), ..Default::default() }.to_text())
}

fn identify(a: &IdentifyArgs) -> Result<String> {
    if let Some(far) = a.far {
        if !(far > 0.0 && far < 1.0) {
            return Err(Error::usage(format!("--far must lie in (0,1), got {far}")));
        }
    }
    let features = Features::load(&a.features)?;
    let gallery_list = read_labelled(&read_text(&a.gallery)?)?;
    let probe_list = read_labelled(&read_text(&a.probes)?)?;
    let lookup = |list: &[crate::dataio::ManifestEntry]| {
        list.iter().map(|e| Ok((e.label, features.require(&e.path)?))).collect::<Result<Vec<_>>>()
    };
    let gallery = lookup(&gallery_list)?;
    let probes = lookup(&probe_list)?;
    let ids: std::collections::HashSet<usize> = gallery.iter().map(|g| g.0).collect();
    let (known, unknown): (Vec<_>, Vec<_>) = probes.into_iter().partition(|p| ids.contains(&p.0));
    let mut report = EvalReport { rank1: Some(eval::identify_closed(&gallery, &known)?), ..Default::default() };
    if let Some(far) = a.far {
        report.open_set = Some((far, eval::identify_open(&gallery, &known, &unknown, far)?));
    }
    Ok(report.to_text())
}

fn gradcheck(a: &GradcheckArgs) -> Result<(String, bool)> {
    let inject = match a.inject_fault.as_deref() {
        None => false,
        Some("fnl-sign") => true,
        Some(f) => return Err(Error::usage(format!("unknown fault `{f}`"))),
    };
    let checks = run_suite(SuiteOptions { seed: a.seed, inject_fnl_sign_error: inject })?;
    let mut s = String::new();
    for c in &checks {
        writeln!(
            s,
            "{} {:<13} max_rel_error={:.3e} tolerance={:.0e}",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.max_rel_error,
            c.tolerance
        )
        .unwrap();
    }
    Ok((s, checks.iter().all(|c| c.passed())))
}
