//! Command-line entry point. Exit codes: 0 success, 1 domain error, 2 usage
//! or configuration error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use opchain_core::metrics::EvalReport;
use opchain_core::nn::gradcheck::{gradient_check, layer_suite};
use opchain_core::nn::{TMFNet, TMFNetConfig, Tensor};
use opchain_core::rng::{derive_seed, stream, uniform};
use opchain_core::{Chain, PatchSpec};

use crate::checkpoint::Checkpoint;
use crate::config::{resolve_config, Override, RunConfig};
use crate::dataset::{synthesize, Split};
use crate::error::{Error, Result};
use crate::{corpus, pipeline, stats};

pub const DEFAULT_CHAINS: &str = "AU,MF5,GB1.0,MF5>GB1.0,GB1.0>MF5";

#[derive(Debug, Parser)]
#[command(name = "opchain", version, about = "Operation-chain dataset synthesis, residual analytics and chain classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML config file; flags and --set take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Synthesize a chain-labelled patch dataset.
    Synth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sources: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Write a procedural source-image corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Neighborhood correlation of RGB, SRM and CCL residuals.
    FilterStats {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Image files or directories.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        /// Also write the filter taps to kernels.txt.
        #[arg(long)]
        dump_kernels: bool,
    },
    /// Inter-channel correlation after each chain.
    ChanCorr {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated chains.
        #[arg(long, default_value = DEFAULT_CHAINS)]
        chains: String,
        #[arg(long)]
        patch: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a classifier on a synthesized dataset.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from this checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Fine-tuning schedule: lr0/10, half the epochs and step.
        #[arg(long, requires = "init")]
        fine_tune: bool,
        /// Reinitialize the heads when the class count changes.
        #[arg(long, requires = "init")]
        reset_heads: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        #[arg(long)]
        lr0: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Source directory for patches missing from the cache.
        #[arg(long)]
        sources: Option<PathBuf>,
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// ACC, ALMS and BLEU between two chain files, one chain per line.
    Metrics {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "true")]
        truth: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient check at 64-bit precision.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = GradModel::Toy)]
        model: GradModel,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 32)]
        input_size: usize,
        #[arg(long, default_value_t = 200)]
        coords: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Exit 1 when the error exceeds this bound.
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GradModel {
    /// Both streams and the fusion head.
    Toy,
    SpatialOnly,
    NoiseOnly,
    /// Every layer type in isolation.
    Layers,
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { cfg, out, sources, seed, jobs } => {
            let mut flags = Vec::new();
            if let Some(s) = sources {
                flags.push(Override::flag("dataset.sources", toml_str(&s.to_string_lossy()), "--sources"));
            }
            if let Some(s) = seed {
                flags.push(Override::flag("dataset.seed", s, "--seed"));
            }
            let config = resolve(&cfg, None, flags)?;
            let report = synthesize(&config, &out, jobs_or_default(jobs))?;
            eprintln!("wrote {} records to {}", report.records.len(), out.display());
            if report.failures.is_empty() {
                Ok(())
            } else {
                Err(Error::Failed(format!("{} source(s) failed; see {}", report.failures.len(), out.join("errors.log").display())))
            }
        }
        Command::GenCorpus { out, count, size, seed, jobs } => {
            let files = corpus::write_corpus(&out, count, size, size, seed, jobs_or_default(jobs))?;
            eprintln!("wrote {} images to {}", files.len(), out.display());
            Ok(())
        }
        Command::FilterStats { cfg, inputs, out, patch, stride, dump_kernels } => {
            let mut flags = Vec::new();
            push_opt(&mut flags, "analysis.patch", patch, "--patch");
            push_opt(&mut flags, "analysis.stride", stride, "--stride");
            let config = resolve(&cfg, None, flags)?;
            filter_stats(&config, &inputs, &out, dump_kernels)
        }
        Command::ChanCorr { cfg, inputs, out, chains, patch, stride, seed } => {
            let mut flags = Vec::new();
            push_opt(&mut flags, "analysis.patch", patch, "--patch");
            push_opt(&mut flags, "analysis.stride", stride, "--stride");
            push_opt(&mut flags, "analysis.seed", seed, "--seed");
            let config = resolve(&cfg, None, flags)?;
            chan_corr(&config, &inputs, &out, &chains)
        }
        Command::Train { cfg, data, out, init, fine_tune, reset_heads, epochs, seed, lambda1, lambda2, lr0, batch_size, jobs } => {
            let ckpt = init.as_deref().map(Checkpoint::load).transpose()?;
            let mut flags = Vec::new();
            push_opt(&mut flags, "train.epochs", epochs, "--epochs");
            push_opt(&mut flags, "train.seed", seed, "--seed");
            push_opt(&mut flags, "model.lambda1", lambda1, "--lambda1");
            push_opt(&mut flags, "model.lambda2", lambda2, "--lambda2");
            push_opt(&mut flags, "train.lr0", lr0, "--lr0");
            push_opt(&mut flags, "train.batch_size", batch_size, "--batch-size");
            // Base layers: the dataset's own config, then the checkpoint's.
            let mut base = Some(data.join("config.toml")).filter(|p| p.exists());
            if ckpt.is_some() {
                base = None;
            }
            let mut config = resolve_layers(&cfg, base.as_deref(), ckpt.as_ref().map(|c| &c.config), flags.clone())?;
            if ckpt.is_some() && cfg.config.is_none() {
                // The new dataset knows where its own sources live.
                if let Ok(dc) = std::fs::read_to_string(data.join("config.toml")).map_err(|_| ()).and_then(|t| RunConfig::from_toml(&t).map_err(|_| ())) {
                    config.dataset = dc.dataset;
                }
            }
            if fine_tune {
                let explicit: Vec<&str> = cfg
                    .set
                    .iter()
                    .filter_map(|s| s.split_once('=').map(|(k, _)| k.trim()))
                    .chain(flags.iter().map(|o| o.key.as_str()))
                    .collect();
                let ft = config.train.to_core().fine_tuned();
                if !explicit.contains(&"train.lr0") {
                    config.train.lr0 = ft.lr0;
                }
                if !explicit.contains(&"train.epochs") {
                    config.train.epochs = ft.epochs;
                }
                if !explicit.contains(&"train.lr_step") {
                    config.train.lr_step = ft.lr_step;
                }
            }
            echo_config(&config);
            train(&config, &data, &out, ckpt.as_ref(), reset_heads, jobs_or_default(jobs))
        }
        Command::Eval { checkpoint, data, split, out, sources, jobs } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let split = Split::parse(&split).map_err(|e| Error::Config(e.to_string()))?;
            let mut config = ckpt.config.clone();
            if let Some(s) = sources {
                config.dataset.sources = s.to_string_lossy().into_owned();
            } else if let Ok(text) = std::fs::read_to_string(data.join("config.toml")) {
                // The dataset config knows where its sources live.
                if let Ok(dc) = RunConfig::from_toml(&text) {
                    config.dataset = dc.dataset;
                }
            }
            echo_config(&config);
            eval(&config, &ckpt, &data, split, &out, jobs_or_default(jobs))
        }
        Command::Metrics { pred, truth, out } => metrics(&pred, &truth, out.as_deref()),
        Command::Gradcheck { model, eps, input_size, coords, seed, tol, out } => {
            gradcheck(model, eps, input_size, coords, seed, tol, out.as_deref())
        }
    }
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.into()).to_string()
}

fn push_opt<V: ToString>(flags: &mut Vec<Override>, key: &str, v: Option<V>, flag: &str) {
    if let Some(v) = v {
        flags.push(Override::flag(key, v, flag));
    }
}

fn jobs_or_default(jobs: Option<usize>) -> usize {
    jobs.unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)).max(1)
}

fn overrides(cfg: &ConfigArgs, flags: Vec<Override>) -> Result<Vec<Override>> {
    let mut all = flags;
    for s in &cfg.set {
        all.push(Override::parse(s)?);
    }
    Ok(all)
}

fn resolve(cfg: &ConfigArgs, default_file: Option<&Path>, flags: Vec<Override>) -> Result<RunConfig> {
    let config = resolve_layers(cfg, default_file, None, flags)?;
    echo_config(&config);
    Ok(config)
}

/// `--config` wins over `default_file`, which wins over `base`.
fn resolve_layers(cfg: &ConfigArgs, default_file: Option<&Path>, base: Option<&RunConfig>, flags: Vec<Override>) -> Result<RunConfig> {
    let all = overrides(cfg, flags)?;
    match (cfg.config.as_deref().or(default_file), base) {
        (Some(file), _) => resolve_config(Some(file), &all),
        (None, Some(b)) => {
crate::config::resolve_text(&b.to_toml(), &all)
        }
        (None, None) => resolve_config(None, &all),
    }
}

fn echo_config(config: &RunConfig) {
    eprint!("# resolved config\n{}", config.comment_header());
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// CSV with the resolved config as a `# ` comment header.
fn write_csv(path: &Path, config: &RunConfig, body: &str) -> Result<()> {
    write_text(path, &format!("{}{body}", config.comment_header()))
}

fn patch_spec(config: &RunConfig) -> Result<PatchSpec> {
    let spec = PatchSpec::grid(config.analysis.patch, config.analysis.stride);
    spec.validate().map_err(|e| Error::Config(e.to_string()))?;
    Ok(spec)
}

fn filter_stats(config: &RunConfig, inputs: &[PathBuf], out: &Path, dump_kernels: bool) -> Result<()> {
    let files = stats::expand_inputs(inputs)?;
    let patches = stats::load_patches(&files, &patch_spec(config)?)?;
    if patches.is_empty() {
        return Err(Error::Failed("no input image is large enough for one patch".into()));
    }
    let f = &config.filters;
    let bank = opchain_core::filters::FilterBank::new(f.sigma, f.c, f.ccl_seed)?;
    let rows = stats::filter_stats(&patches, &bank)?;
    create_dir(out)?;
    let mut body = String::from("image,filter,direction,correlation\n");
    for r in &rows {
        let _ = writeln!(body, "{},{},{},{:?}", r.image, r.filter, r.direction.name(), r.correlation);
    }
    write_csv(&out.join("report.csv"), config, &body)?;
    let mut summary = String::from("filter,direction,mean,n\n");
    for (filter, d, mean, n) in stats::mean_by_filter(&rows) {
        let _ = writeln!(summary, "{filter},{},{mean:?},{n}", d.name());
    }
    write_csv(&out.join("summary.csv"), config, &summary)?;
    print!("{summary}");
    if dump_kernels {
        let mut text = String::new();
        for (name, k) in stats::FILTER_NAMES.iter().zip(bank.rgb.iter().chain([&bank.srm, &bank.ccl])) {
            let _ = writeln!(text, "[{name}]\n{}", k.to_text());
        }
        write_text(&out.join("kernels.txt"), &text)?;
    }
    Ok(())
}

fn parse_chains(text: &str) -> Result<Vec<Chain>> {
    text.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| Chain::parse(t).map_err(|e| Error::Config(format!("chain `{t}`: {e}"))))
        .collect()
}

fn chan_corr(config: &RunConfig, inputs: &[PathBuf], out: &Path, chains: &str) -> Result<()> {
    let chains = parse_chains(chains)?;
    let files = stats::expand_inputs(inputs)?;
    let patches: Vec<_> = stats::load_patches(&files, &patch_spec(config)?)?.into_iter().map(|(_, p)| p.to_rgb()).collect();
    if patches.is_empty() {
        return Err(Error::Failed("no input image is large enough for one patch".into()));
    }
    let seed = config.analysis.seed;
    let table = stats::chain_correlations(&patches, &chains, seed)?;
    create_dir(out)?;
    let mut body = String::from("chain,pair,mean,variance,n\n");
    for (chain, reps) in &table {
        for r in reps {
            let _ = writeln!(body, "{chain},{},{:?},{:?},{}", r.pair.name(), r.mean, r.variance, r.n);
        }
    }
    write_csv(&out.join("report.csv"), config, &body)?;
    print!("{body}");
    let mut hist = String::from("chain,lo,hi,count\n");
    for (chain, h) in stats::red_histograms(&patches, &chains, config.analysis.bins, seed)? {
        for (lo, hi, c) in h.bins() {
            let _ = writeln!(hist, "{chain},{lo:?},{hi:?},{c}");
        }
    }
    write_csv(&out.join("histogram.csv"), config, &hist)
}

fn report_csv(rep: &EvalReport) -> String {
    format!(
        "metric,value\naccuracy,{:?}\nalms,{:?}\nbleu,{:?}\nn,{}\n",
        rep.accuracy, rep.alms, rep.bleu, rep.n
    )
}

fn report_json(rep: &EvalReport, extra: serde_json::Value) -> String {
    let mut v = serde_json::json!({
        "accuracy": rep.accuracy,
        "alms": rep.alms,
        "bleu": rep.bleu,
        "n": rep.n,
        "confusion": rep.confusion,
    });
    if let (Some(obj), serde_json::Value::Object(e)) = (v.as_object_mut(), extra) {
        obj.extend(e);
    }
    serde_json::to_string_pretty(&v).unwrap_or_default() + "\n"
}

fn train(config: &RunConfig, data: &Path, out: &Path, init: Option<&Checkpoint>, reset_heads: bool, jobs: usize) -> Result<()> {
    let ds = pipeline::open_dataset(data, config)?;
    create_dir(out)?;
    write_text(&out.join("config.toml"), &config.to_toml())?;
    let mut log = format!("{}epoch,lr,train_loss,train_acc,val_acc\n", config.comment_header());
    let log_path = out.join("log.csv");
    let mut sink = |e: &opchain_core::nn::EpochLog| {
        let val = e.val_acc.map(|v| format!("{v:?}")).unwrap_or_default();
        let line = format!("{},{:?},{:?},{:?},{val}\n", e.epoch, e.lr, e.train_loss, e.train_acc);
        eprint!("epoch {line}");
        log.push_str(&line);
        let _ = std::fs::write(&log_path, &log);
    };
    let mut run = pipeline::train(&ds, config, init, reset_heads, jobs, &mut sink)?;
    let start = init.map_or(0, |c| c.epoch);
    Checkpoint::capture(&mut run.model, config, start + run.epochs_done).save(&out.join("checkpoint.tmfn"))?;
    if !ds.subset(Split::Test).is_empty() {
        let ev = pipeline::evaluate(&mut run.model, &ds, Split::Test, config.train.batch_size, jobs)?;
        write_csv(&out.join("report.csv"), config, &report_csv(&ev.report))?;
        print!("{}", report_csv(&ev.report));
    }
    Ok(())
}

fn eval(config: &RunConfig, ckpt: &Checkpoint, data: &Path, split: Split, out: &Path, jobs: usize) -> Result<()> {
    let ds = pipeline::open_dataset(data, config)?;
    let mut model = ckpt.restore()?;
    if model.config().num_classes != ds.num_classes() {
        return Err(Error::Load(format!(
            "checkpoint has {} classes but the dataset has {}",
            model.config().num_classes,
            ds.num_classes()
        )));
    }
    let ev = pipeline::evaluate(&mut model, &ds, split, ckpt.config.train.batch_size, jobs)?;
    create_dir(out)?;
    write_csv(&out.join("report.csv"), config, &report_csv(&ev.report))?;
    let classes: Vec<String> = ev.universe.chains().iter().map(|c| c.to_string()).collect();
    write_text(&out.join("report.json"), &report_json(&ev.report, serde_json::json!({ "split": split.as_str(), "classes": classes })))?;
    let mut conf = format!("true\\pred,{}\n", classes.join(","));
    for (name, row) in classes.iter().zip(&ev.report.confusion) {
        let cells: Vec<String> = row.iter().map(u64::to_string).collect();
        let _ = writeln!(conf, "{name},{}", cells.join(","));
    }
    write_csv(&out.join("confusion.csv"), config, &conf)?;
    let mut preds = String::from("id,true,pred\n");
    for (r, p) in ev.records.iter().zip(&ev.preds) {
        let _ = writeln!(preds, "{},{},{}", r.id, r.chain, classes[*p]);
    }
    write_csv(&out.join("predictions.csv"), config, &preds)?;
    print!("{}", report_csv(&ev.report));
    Ok(())
}

fn read_chains(path: &Path) -> Result<Vec<Chain>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| Chain::parse(l).map_err(|e| Error::Load(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn metrics(pred: &Path, truth: &Path, out: Option<&Path>) -> Result<()> {
    let p = read_chains(pred)?;
    let t = read_chains(truth)?;
    if p.len() != t.len() {
        return Err(Error::Load(format!("{} predictions but {} ground-truth chains", p.len(), t.len())));
    }
    let pairs: Vec<(&Chain, &Chain)> = p.iter().zip(&t).collect();
    let rep = EvalReport::from_chain_pairs(&pairs)?;
    let csv = report_csv(&rep);
    match out {
        Some(dir) => {
            create_dir(dir)?;
            write_text(&dir.join("report.csv"), &csv)?;
            write_text(&dir.join("report.json"), &report_json(&rep, serde_json::json!({})))?;
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn gradcheck(model: GradModel, eps: f64, input_size: usize, coords: usize, seed: u64, tol: f64, out: Option<&Path>) -> Result<()> {
    let (spatial, noise) = match model {
        GradModel::Toy => (true, true),
        GradModel::SpatialOnly => (true, false),
        GradModel::NoiseOnly => (false, true),
        GradModel::Layers => return layer_gradcheck(eps, seed, tol, out),
    };
    let cfg = TMFNetConfig {
        input_size,
        num_classes: 3,
        spatial_stream_on: spatial,
        noise_stream_on: noise,
        dropout_p: 0.0,
        seed,
        ..TMFNetConfig::default()
    };
    cfg.validate().map_err(|e| Error::Config(e.to_string()))?;
    let mut net = TMFNet::<f64>::new(cfg)?;
    let batch = 4;
    let mut rng = stream(derive_seed(seed, 0x9c));
    let data = (0..batch * 3 * input_size * input_size).map(|_| 255.0 * uniform(&mut rng)).collect();
    let x = Tensor::new(&[batch, 3, input_size, input_size], data)?;
    let labels: Vec<usize> = (0..batch).map(|i| i % 3).collect();
    let rep = gradient_check(&mut net, &x, &labels, eps, coords, seed)?;
    let worst = rep.worst.as_ref().map(|(n, i)| format!("{n}[{i}]")).unwrap_or_default();
    let csv = format!("metric,value\nmax_rel_error,{:?}\ncoords,{}\nworst,{worst}\neps,{eps:?}\n", rep.max_rel_error, rep.coords);
    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(&dir.join("report.csv"), &csv)?;
    }
    print!("{csv}");
    if rep.max_rel_error < tol {
        Ok(())
    } else {
        Err(Error::Failed(format!("max relative error {:e} is not below {tol:e}", rep.max_rel_error)))
    }
}

fn layer_gradcheck(eps: f64, seed: u64, tol: f64, out: Option<&Path>) -> Result<()> {
    let reports = layer_suite(eps, seed)?;
    let mut csv = String::from("layer,max_rel_error,coords\n");
    for (name, r) in &reports {
        let _ = writeln!(csv, "{name},{:?},{}", r.max_rel_error, r.coords);
    }
    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(&dir.join("report.csv"), &csv)?;
    }
    print!("{csv}");
    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    if worst < tol {
        Ok(())
    } else {
        Err(Error::Failed(format!("max relative error {worst:e} is not below {tol:e}")))
    }
}
