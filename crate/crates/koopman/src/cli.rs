//! Command-line entry point: data generation, corpus tooling, training,
//! evaluation, and the adversarial-weight sweep.
//!
//! Every run directory is self-describing: a text manifest (configuration
//! provenance plus corpus digests) is written before any training step,
//! the effective configuration is saved in reusable form, and resuming
//! re-verifies the corpus digests against the stored manifest.

use crate::corpus::SnapshotCorpus;
use crate::error::{KoopmanError, Result};
use crate::evaluate;
use crate::networks::ArchConfig;
use crate::solvers::{self, FhnConfig, KsConfig};
use crate::trainer::{self, TrainConfig, Trainer};
use clap::{Args, Parser, Subcommand};
use sha2::Digest;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "koopman",
    version,
    about = "Reduced-order modeling of PDE snapshot data with stochastic adversarial Koopman operators"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a snapshot corpus with a built-in reference solver.
    Datagen {
        #[command(subcommand)]
        system: DatagenCommand,
    },
    /// Convert raw data to the corpus container or inspect one.
    Corpus {
        #[command(subcommand)]
        action: CorpusCommand,
    },
    /// Train a model on one or more corpora.
    Train(TrainArgs),
    /// Roll a checkpoint out against a corpus and write error artifacts.
    Evaluate(EvaluateArgs),
    /// Train and evaluate one model per adversarial weight.
    Sweep(SweepArgs),
}

#[derive(Subcommand)]
enum DatagenCommand {
    /// Kuramoto–Sivashinsky, 1200 snapshots of [1024, 1].
    Ks {
        #[arg(long)]
        output: PathBuf,
        /// Overwrite an existing output file.
        #[arg(long)]
        force: bool,
    },
    /// FitzHugh–Nagumo, 180 snapshots of [64, 64, 2].
    Fhn {
        /// Seed for the random initial fields.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Subcommand)]
enum CorpusCommand {
    /// Wrap a raw little-endian f32 array into a normalized corpus.
    Convert {
        /// Raw binary input, row-major.
        #[arg(long)]
        input: PathBuf,
        /// Extents as T,W,C (1D) or T,H,W,C (2D).
        #[arg(long)]
        layout: String,
        /// Time increment between snapshots.
        #[arg(long)]
        dt: f64,
        /// Conditioning scalar attached to every snapshot.
        #[arg(long)]
        conditioning: Option<f64>,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Print a corpus header.
    Info { file: PathBuf },
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus container(s); several require a conditioned model.
    #[arg(long = "corpus", required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single key=value override; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    outdir: PathBuf,
    /// Continue from this checkpoint into the same run directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Number of rollout cycles.
    #[arg(long)]
    cycles: usize,
    /// Steps per cycle.
    #[arg(long = "cycle-len")]
    cycle_len: usize,
    /// Conditioning override for conditioned models.
    #[arg(long)]
    cond: Option<f64>,
    /// 1-based step indices for 2D figures, comma separated.
    #[arg(long)]
    steps: Option<String>,
    /// Draw k latent samples and report the error spread.
    #[arg(long = "stochastic-eval", value_name = "K")]
    stochastic_eval: Option<usize>,
    /// Seed for the stochastic evaluation draws.
    #[arg(long = "eval-seed", default_value_t = 0)]
    eval_seed: u64,
    #[arg(long)]
    outdir: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long = "corpus", required = true, num_args = 1..)]
    corpus: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Adversarial weights to train, comma separated, no duplicates.
    #[arg(long)]
    lambdas: String,
    /// Rollout cycles for the per-run evaluation.
    #[arg(long, default_value_t = 1)]
    cycles: usize,
    /// Steps per evaluation cycle.
    #[arg(long = "cycle-len", default_value_t = 32)]
    cycle_len: usize,
    /// Maximum concurrent runs.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[arg(long)]
    outdir: PathBuf,
    #[arg(long)]
    force: bool,
}

/// Parse arguments from the process environment and run; returns the
/// process exit code (0 ok, 2 config, 3 data, 4 numerical).
pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Datagen { system } => match system {
            DatagenCommand::Ks { output, force } => cmd_datagen_ks(&output, force),
            DatagenCommand::Fhn { seed, output, force } => cmd_datagen_fhn(seed, &output, force),
        },
        Command::Corpus { action } => match action {
            CorpusCommand::Convert { input, layout, dt, conditioning, output, force } => {
                cmd_corpus_convert(&input, &layout, dt, conditioning, &output, force)
            }
            CorpusCommand::Info { file } => cmd_corpus_info(&file),
        },
        Command::Train(args) => cmd_train(&args),
        Command::Evaluate(args) => cmd_evaluate(&args),
        Command::Sweep(args) => cmd_sweep(&args),
    }
}

// ---- shared plumbing ----

fn refuse_file_overwrite(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(KoopmanError::Config(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn prepare_outdir(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        let occupied = std::fs::read_dir(path)?.next().is_some();
        if occupied && !force {
            return Err(KoopmanError::Config(format!(
                "{} is not empty; pass --force to write into it",
                path.display()
            )));
        }
    }
    std::fs::create_dir_all(path)?;
    Ok(())
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = sha2::Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

fn parse_usize_list(text: &str, what: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| KoopmanError::Config(format!("cannot parse {what}: {p:?}")))
        })
        .collect()
}

/// Key=value pairs from `--set` flags.
fn parse_overrides(set: &[String]) -> Result<Vec<(String, String)>> {
    set.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| {
                    KoopmanError::Config(format!("--set needs KEY=VALUE, got {s:?}"))
                })
        })
        .collect()
}

/// Non-comment `key = value` pairs of a config file body, in order.
fn parse_config_pairs(body: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in body.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            KoopmanError::Config(format!(
                "config line {} is not `key = value`: {raw:?}",
                lineno + 1
            ))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

struct ResolvedConfig {
    cfg: TrainConfig,
    defaults: Vec<(&'static str, String)>,
    file_pairs: Vec<(String, String)>,
    cli_pairs: Vec<(String, String)>,
}

/// Build the effective configuration for a corpus geometry with the
/// documented precedence: CLI override > config file > built-in default.
fn resolve_config(
    corpora: &[SnapshotCorpus],
    config_path: Option<&Path>,
    set: &[String],
) -> Result<ResolvedConfig> {
    let first = corpora.first().ok_or_else(|| {
        KoopmanError::Config("at least one corpus is required".into())
    })?;
    let arch = ArchConfig::new(first.spatial_dims().to_vec(), first.channels());
    let mut cfg = TrainConfig::new(arch);
    let defaults = cfg.to_kv();
    let file_pairs = match config_path {
        Some(p) => parse_config_pairs(&std::fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    for (k, v) in &file_pairs {
        cfg.apply_kv(k, v)?;
    }
    let cli_pairs = parse_overrides(set)?;
    for (k, v) in &cli_pairs {
        cfg.apply_kv(k, v)?;
    }
    cfg.validate()?;
    Ok(ResolvedConfig { cfg, defaults, file_pairs, cli_pairs })
}

const MANIFEST_VERSION: u32 = 1;

fn write_manifest(
    path: &Path,
    resolved: &ResolvedConfig,
    corpus_paths: &[PathBuf],
) -> Result<()> {
    let mut out = String::new();
    out.push_str(&format!("manifest_version = {MANIFEST_VERSION}\n"));
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    out.push_str(&format!("created_unix = {now}\n"));
    out.push_str(&format!("seed = {}\n", resolved.cfg.seed));
    for p in corpus_paths {
        out.push_str(&format!("corpus = {} sha256={}\n", p.display(), sha256_hex(p)?));
    }
    for (k, v) in &resolved.defaults {
        out.push_str(&format!("default {k} = {v}\n"));
    }
    for (k, v) in &resolved.file_pairs {
        out.push_str(&format!("file {k} = {v}\n"));
    }
    for (k, v) in &resolved.cli_pairs {
        out.push_str(&format!("cli {k} = {v}\n"));
    }
    for (k, v) in resolved.cfg.to_kv() {
        out.push_str(&format!("effective {k} = {v}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Corpus digest lines of a manifest, as (path, hex digest).
fn manifest_digests(body: &str) -> Vec<(String, String)> {
    body.lines()
        .filter_map(|l| l.strip_prefix("corpus = "))
        .filter_map(|rest| {
            rest.rsplit_once(" sha256=")
                .map(|(p, d)| (p.to_string(), d.to_string()))
        })
        .collect()
}

fn write_effective_config(path: &Path, cfg: &TrainConfig) -> Result<()> {
    let mut out = String::from("# effective configuration, reusable via --config\n");
    for (k, v) in cfg.to_kv() {
        out.push_str(&format!("{k} = {v}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn load_corpora(paths: &[PathBuf]) -> Result<Vec<SnapshotCorpus>> {
    paths.iter().map(|p| SnapshotCorpus::load(p)).collect()
}

// ---- subcommands ----

fn cmd_datagen_ks(output: &Path, force: bool) -> Result<()> {
    refuse_file_overwrite(output, force)?;
    let corpus = solvers::solve_ks(&KsConfig::default())?.normalize()?;
    corpus.save(output)?;
    println!(
        "wrote {} snapshots of {:?} x {} channels to {}",
        corpus.t_len(),
        corpus.spatial_dims(),
        corpus.channels(),
        output.display()
    );
    Ok(())
}

fn cmd_datagen_fhn(seed: u64, output: &Path, force: bool) -> Result<()> {
    refuse_file_overwrite(output, force)?;
    let config = FhnConfig { seed, ..FhnConfig::default() };
    let corpus = solvers::solve_fhn(&config)?.normalize()?;
    corpus.save(output)?;
    println!(
        "wrote {} snapshots of {:?} x {} channels to {}",
        corpus.t_len(),
        corpus.spatial_dims(),
        corpus.channels(),
        output.display()
    );
    Ok(())
}

fn cmd_corpus_convert(
    input: &Path,
    layout: &str,
    dt: f64,
    conditioning: Option<f64>,
    output: &Path,
    force: bool,
) -> Result<()> {
    refuse_file_overwrite(output, force)?;
    let dims = parse_usize_list(layout, "layout extent")?;
    if dims.len() != 3 && dims.len() != 4 {
        return Err(KoopmanError::Config(format!(
            "layout must be T,W,C or T,H,W,C; got {} extents",
            dims.len()
        )));
    }
    let expected: usize = dims.iter().product();
    let bytes = std::fs::read(input)?;
    if bytes.len() != expected * 4 {
        return Err(KoopmanError::Data(format!(
            "raw input holds {} bytes but layout {:?} needs {}",
            bytes.len(),
            dims,
            expected * 4
        )));
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let data = ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&dims), values)
        .map_err(|e| KoopmanError::Data(format!("layout mismatch: {e}")))?;
    let channels = *dims.last().unwrap();
    let names = (0..channels).map(|i| format!("c{i}")).collect();
    let corpus =
        SnapshotCorpus::new(data, dt, dims.len() - 2, names, conditioning)?.normalize()?;
    corpus.save(output)?;
    println!("wrote {} to {}", layout.trim(), output.display());
    Ok(())
}

fn cmd_corpus_info(file: &Path) -> Result<()> {
    let corpus = SnapshotCorpus::load(file)?;
    println!("snapshots:    {}", corpus.t_len());
    println!("spatial:      {:?}", corpus.spatial_dims());
    println!("channels:     {} {:?}", corpus.channels(), corpus.channel_names);
    println!("dt:           {}", corpus.dt);
    match corpus.conditioning {
        Some(c) => println!("conditioning: {c}"),
        None => println!("conditioning: none"),
    }
    match &corpus.normalization {
        Some(n) => {
            println!("normalized:   yes");
            for (i, name) in corpus.channel_names.iter().enumerate() {
                println!(
                    "  {name}: shift={} scale={}{}",
                    n.shift[i],
                    n.scale[i],
                    if n.constant[i] { " (constant)" } else { "" }
                );
            }
        }
        None => println!("normalized:   no"),
    }
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    if args.resume.is_some() {
        if !args.outdir.is_dir() {
            return Err(KoopmanError::Config(
                "--resume needs the existing run directory as --outdir".into(),
            ));
        }
    } else {
        prepare_outdir(&args.outdir, args.force)?;
    }
    let corpora = load_corpora(&args.corpus)?;
    let resolved = resolve_config(&corpora, args.config.as_deref(), &args.set)?;
    let manifest_path = args.outdir.join("manifest.txt");

    let mut trainer = match &args.resume {
        Some(ckpt_path) => {
            // Integrity gate: the corpora must be byte-identical to the
            // ones recorded when the run started.
            let manifest = std::fs::read_to_string(&manifest_path)?;
            let recorded = manifest_digests(&manifest);
            if recorded.len() != args.corpus.len() {
                return Err(KoopmanError::Data(format!(
                    "manifest records {} corpora, resume got {}",
                    recorded.len(),
                    args.corpus.len()
                )));
            }
            for (path, (_, digest)) in args.corpus.iter().zip(&recorded) {
                let now = sha256_hex(path)?;
                if &now != digest {
                    return Err(KoopmanError::Data(format!(
                        "corpus {} changed since the run started (digest mismatch)",
                        path.display()
                    )));
                }
            }
            let loaded = trainer::load_checkpoint(ckpt_path)?;
            let mut cfg = resolved.cfg.clone();
            // The checkpoint owns the model identity; the fresh parse
            // only steers how much further to train.
            cfg.arch = loaded.arch.clone();
            cfg.weights = loaded.weights;
            cfg.seed = loaded.state.seed;
            if loaded.state.iteration >= cfg.iterations {
                return Err(KoopmanError::Config(format!(
                    "checkpoint is already at iteration {}; raise iterations (currently {})",
                    loaded.state.iteration, cfg.iterations
                )));
            }
            // Drop any log lines past the checkpoint so the final log
            // reads as one uninterrupted run.
            let log_path = args.outdir.join("loss.log");
            if log_path.exists() {
                let body = std::fs::read_to_string(&log_path)?;
                let keep: Vec<&str> = body.lines().take(loaded.state.iteration).collect();
                std::fs::write(&log_path, keep.join("\n") + if keep.is_empty() { "" } else { "\n" })?;
            }
            Trainer::from_state(cfg, corpora, loaded.state)?
        }
        None => {
            write_manifest(&manifest_path, &resolved, &args.corpus)?;
            write_effective_config(&args.outdir.join("config.txt"), &resolved.cfg)?;
            Trainer::new(resolved.cfg, corpora)?
        }
    };

    let log_path = args.outdir.join("loss.log");
    let mut log: Box<dyn Write> = if args.resume.is_some() && log_path.exists() {
        Box::new(std::fs::OpenOptions::new().append(true).open(&log_path)?)
    } else {
        Box::new(std::fs::File::create(&log_path)?)
    };
    trainer::run_loop(&mut trainer, &mut log, Some(&args.outdir))?;
    log.flush()?;
    println!(
        "trained to iteration {}; checkpoints in {}",
        trainer.state.iteration,
        args.outdir.display()
    );
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    prepare_outdir(&args.outdir, args.force)?;
    let loaded = trainer::load_checkpoint(&args.ckpt)?;
    let corpus = SnapshotCorpus::load(&args.corpus)?;
    let steps = match &args.steps {
        Some(s) => parse_usize_list(s, "figure step")?,
        None => Vec::new(),
    };
    let stochastic = match args.stochastic_eval {
        Some(k) => Some((k, args.eval_seed)),
        None => None,
    };
    let result = evaluate::run_evaluation(
        &loaded.arch,
        &loaded.state.params,
        &corpus,
        args.cycle_len,
        args.cycles,
        args.cond,
        &steps,
        stochastic,
        &args.outdir,
    )?;
    let mean: f64 = result.mae_per_step.iter().sum::<f64>() / result.mae_per_step.len() as f64;
    println!(
        "evaluated {} steps; mean MAE {:.6e}; artifacts in {}",
        result.mae_per_step.len(),
        mean,
        args.outdir.display()
    );
    Ok(())
}

/// Directory-safe token for one sweep value, keeping the CLI text.
fn lambda_token(text: &str) -> String {
    text.trim()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

fn parse_lambdas(text: &str) -> Result<Vec<(String, f64)>> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for tok in text.split(',') {
        let tok = tok.trim();
        let v: f64 = tok
            .parse()
            .map_err(|_| KoopmanError::Config(format!("cannot parse lambda value {tok:?}")))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(KoopmanError::Config(format!(
                "lambda values must be finite and non-negative, got {tok}"
            )));
        }
        if out.iter().any(|(_, seen)| *seen == v) {
            return Err(KoopmanError::Config(format!("duplicate lambda value {tok}")));
        }
        out.push((tok.to_string(), v));
    }
    if out.is_empty() {
        return Err(KoopmanError::Config("sweep needs at least one lambda value".into()));
    }
    Ok(out)
}

/// Run the already-spawnable command batches with bounded parallelism;
/// returns one exit-status slot per command, in order.
fn run_in_waves(
    mut commands: Vec<std::process::Command>,
    parallel: usize,
) -> Result<Vec<bool>> {
    let mut ok = vec![false; commands.len()];
    let width = parallel.max(1);
    let mut next = 0;
    while next < commands.len() {
        let wave_end = (next + width).min(commands.len());
        let mut children = Vec::new();
        for (i, cmd) in commands[next..wave_end].iter_mut().enumerate() {
            let child = cmd
                .spawn()
                .map_err(|e| KoopmanError::Data(format!("cannot spawn worker: {e}")))?;
            children.push((next + i, child));
        }
        for (slot, mut child) in children {
            let status = child
                .wait()
                .map_err(|e| KoopmanError::Data(format!("worker vanished: {e}")))?;
            ok[slot] = status.success();
        }
        next = wave_end;
    }
    Ok(ok)
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let lambdas = parse_lambdas(&args.lambdas)?;
    prepare_outdir(&args.outdir, args.force)?;
    let corpora = load_corpora(&args.corpus)?;
    let resolved = resolve_config(&corpora, args.config.as_deref(), &args.set)?;
    let exe = std::env::current_exe()
        .map_err(|e| KoopmanError::Data(format!("cannot locate own executable: {e}")))?;

    // One run directory and one config per value; the configs differ only
    // in the adversarial weight.
    let mut run_dirs = Vec::new();
    let mut train_cmds = Vec::new();
    for (tok, value) in &lambdas {
        let run_dir = args.outdir.join(format!("lambda_{}", lambda_token(tok)));
        std::fs::create_dir_all(&run_dir)?;
        let mut cfg = resolved.cfg.clone();
        cfg.weights.lambda_gan = *value;
        cfg.validate()?;
        let cfg_path = run_dir.join("sweep_config.txt");
        write_effective_config(&cfg_path, &cfg)?;
        let mut cmd = std::process::Command::new(&exe);
        cmd.arg("train");
        for c in &args.corpus {
            cmd.arg("--corpus").arg(c);
        }
        cmd.arg("--config")
            .arg(&cfg_path)
            .arg("--outdir")
            .arg(run_dir.join("run"))
            .stdout(std::process::Stdio::null());
        train_cmds.push(cmd);
        run_dirs.push(run_dir);
    }
    let trained = run_in_waves(train_cmds, args.parallel)?;

    let mut eval_cmds = Vec::new();
    let mut eval_slots = Vec::new();
    for (i, run_dir) in run_dirs.iter().enumerate() {
        if !trained[i] {
            continue;
        }
        let mut cmd = std::process::Command::new(&exe);
        cmd.arg("evaluate")
            .arg("--ckpt")
            .arg(run_dir.join("run").join("ckpt_final"))
            .arg("--corpus")
            .arg(&args.corpus[0])
            .arg("--cycles")
            .arg(args.cycles.to_string())
            .arg("--cycle-len")
            .arg(args.cycle_len.to_string())
            .arg("--outdir")
            .arg(run_dir.join("eval"))
            .stdout(std::process::Stdio::null());
        eval_cmds.push(cmd);
        eval_slots.push(i);
    }
    let evaluated = run_in_waves(eval_cmds, args.parallel)?;
    let mut eval_ok = vec![false; lambdas.len()];
    for (j, &slot) in eval_slots.iter().enumerate() {
        eval_ok[slot] = evaluated[j];
    }

    // Combined table and overlay from whatever succeeded.
    let mut curves: Vec<(String, Vec<f64>)> = Vec::new();
    for (i, (tok, _)) in lambdas.iter().enumerate() {
        if !eval_ok[i] {
            continue;
        }
        let body = std::fs::read_to_string(run_dirs[i].join("eval").join("mae.txt"))?;
        let curve: Vec<f64> = body
            .lines()
            .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
            .map(|l| {
                l.split_whitespace()
                    .nth(1)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| {
                        KoopmanError::Data(format!("malformed mae.txt row: {l:?}"))
                    })
            })
            .collect::<Result<_>>()?;
        curves.push((format!("lam={tok}"), curve));
    }
    if !curves.is_empty() {
        let steps = curves[0].1.len();
        let mut table = String::new();
        table.push_str("# mean absolute error per rollout step, physical units\n");
        table.push_str(&format!(
            "# columns: step {}\n",
            curves.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>().join(" ")
        ));
        for t in 0..steps {
            table.push_str(&format!("{}", t + 1));
            for (_, c) in &curves {
                match c.get(t) {
                    Some(v) => table.push_str(&format!(" {v:.12e}")),
                    None => table.push_str(" nan"),
                }
            }
            table.push('\n');
        }
        std::fs::write(args.outdir.join("mae_combined.txt"), table)?;
        evaluate::save_curve_plot(&curves, &args.outdir.join("overlay.png"))?;
    }

    let failures: Vec<&str> = lambdas
        .iter()
        .enumerate()
        .filter(|(i, _)| !eval_ok[*i])
        .map(|(_, (tok, _))| tok.as_str())
        .collect();
    if failures.is_empty() {
        println!(
            "swept {} values; combined artifacts in {}",
            lambdas.len(),
            args.outdir.display()
        );
        Ok(())
    } else {
        Err(KoopmanError::Numerical(format!(
            "sweep runs failed for lambda {:?}; completed results kept in {}",
            failures,
            args.outdir.display()
        )))
    }
}
