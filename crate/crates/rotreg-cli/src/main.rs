//! Command-line harness: dataset generation, the two training phases,
//! evaluation, filter diagnostics and gradient checks.
//!
//! Exit codes: 0 success, 1 I/O or validation failure, 2 numeric divergence.

use clap::{Args, Parser, Subcommand};
use rotreg::config::ExperimentConfig;
use rotreg::data;
use rotreg::eval;
use rotreg::net::{self, LossKind, NetParams};
use rotreg::ssl::{self, TrainState};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "rotreg", version, about = "Semi-supervised rotation regression on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset and write it to the data directory.
    GenData(CommonArgs),
    /// Phase 1: supervised training on the labeled split.
    TrainSup(CommonArgs),
    /// Phase 2: semi-supervised training from a phase-1 checkpoint.
    TrainSsl(CommonArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(CommonArgs),
    /// Teacher-entropy statistics and filter diagnostics on the unlabeled split.
    FilterStats {
        #[command(flatten)]
        common: CommonArgs,
        /// Keep fraction (defaults to the config's filter.keep_fraction).
        #[arg(long)]
        delta: Option<f64>,
    },
    /// Analytic-vs-finite-difference gradient check for both losses.
    GradCheck(CommonArgs),
}

#[derive(Debug)]
enum CmdError {
    Usage(String),
    Diverged(String),
}

impl std::fmt::Display for CmdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CmdError::Usage(m) | CmdError::Diverged(m) => write!(f, "{m}"),
        }
    }
}

fn usage<E: std::fmt::Display>(e: E) -> CmdError {
    CmdError::Usage(e.to_string())
}

fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, CmdError> {
    let mut cfg = ExperimentConfig::from_file(&args.config).map_err(usage)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

/// Dumps the effective config (after CLI overrides) for provenance.
fn echo_config(cfg: &ExperimentConfig) -> Result<(), CmdError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(usage)?;
    std::fs::write(cfg.out_dir.join("config_echo.json"), cfg.to_json_pretty()).map_err(usage)?;
    Ok(())
}

fn load_bundle(cfg: &ExperimentConfig) -> Result<data::DataBundle, CmdError> {
    data::load_dataset(&cfg.data_dir).map_err(usage)
}

fn cmd_gen_data(cfg: &ExperimentConfig) -> Result<(), CmdError> {
    let bundle = data::gen_dataset(&cfg.data, cfg.seed);
    data::save_dataset(&bundle, &cfg.data_dir).map_err(usage)?;
    let hash = data::dataset_hash(&cfg.data_dir).map_err(usage)?;
    println!("dataset_dir={}", cfg.data_dir.display());
    println!("dataset_hash={hash:016x}");
    println!(
        "labeled={} unlabeled={} val={} test={}",
        bundle.labeled.samples.len(),
        bundle.unlabeled.samples.len(),
        bundle.val.samples.len(),
        bundle.test.samples.len()
    );
    Ok(())
}

/// Maps a training error to the exit-code contract: numeric trouble is 2
/// (with the last finite checkpoint retained), everything else is 1.
fn handle_divergence(e: ssl::SslError, ckpt_path: &std::path::Path) -> CmdError {
    match e {
        ssl::SslError::Diverged { iter, last_good } => {
            if let Err(io) = last_good.student.save(ckpt_path) {
                return CmdError::Usage(format!(
                    "diverged at iter {iter}; failed to save last-good checkpoint: {io}"
                ));
            }
            CmdError::Diverged(format!(
                "training diverged at iteration {iter}; last-good checkpoint retained at {}",
                ckpt_path.display()
            ))
        }
        ssl::SslError::Net(net::NetError::NonFinite { .. }) | ssl::SslError::Fisher(_) => {
            CmdError::Diverged(e.to_string())
        }
        other => CmdError::Usage(other.to_string()),
    }
}

fn cmd_train_sup(cfg: &ExperimentConfig) -> Result<(), CmdError> {
    let bundle = load_bundle(cfg)?;
    let ckpt = cfg.phase1_ckpt_path();
    let (state, log) = ssl::run_phase1(cfg, &bundle).map_err(|e| handle_divergence(e, &ckpt))?;
    state.student.save(&ckpt).map_err(usage)?;
    std::fs::write(cfg.out_dir.join("train_sup_log.csv"), log.to_csv()).map_err(usage)?;
    println!("checkpoint={}", ckpt.display());
    println!("iters={}", state.iter);
    if let Some(r) = log.rows.last() {
        println!("final_sup_loss={}", r.sup_loss);
    }
    if let Some(geo) = log.rows.iter().rev().find_map(|r| r.val_geodesic_deg) {
        println!("last_val_geodesic_deg={geo}");
    }
    Ok(())
}

fn cmd_train_ssl(cfg: &ExperimentConfig) -> Result<(), CmdError> {
    let bundle = load_bundle(cfg)?;
    let p1 = NetParams::load(cfg.phase1_ckpt_path()).map_err(usage)?;
    let state = TrainState::from_phase1_params(p1, cfg);
    let ckpt = cfg.final_ckpt_path();
    let (state, log) =
        ssl::run_phase2(cfg, &bundle, state).map_err(|e| handle_divergence(e, &ckpt))?;
    state.student.save(&ckpt).map_err(usage)?;
    std::fs::write(cfg.out_dir.join("train_ssl_log.csv"), log.to_csv()).map_err(usage)?;
    println!("checkpoint={}", ckpt.display());
    println!("iters={}", state.iter);
    if let Some(tau) = state.tau_k {
        println!("final_tau={tau}");
    }
    if let Some(r) = log.rows.last() {
        println!("final_sup_loss={}", r.sup_loss);
        println!("final_unsup_loss={}", r.unsup_loss);
    }
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig) -> Result<(), CmdError> {
    let bundle = load_bundle(cfg)?;
    let params = NetParams::load(cfg.eval_ckpt_path()).map_err(usage)?;
    let report = eval::evaluate_net(&params, &bundle.test).map_err(usage)?;
    std::fs::write(cfg.out_dir.join("metrics.kv"), report.to_kv()).map_err(usage)?;
    std::fs::write(cfg.out_dir.join("metrics.txt"), report.to_table()).map_err(usage)?;
    print!("{}", report.to_table());
    Ok(())
}

fn cmd_filter_stats(cfg: &ExperimentConfig, delta: Option<f64>) -> Result<(), CmdError> {
    use std::fmt::Write as _;
    let bundle = load_bundle(cfg)?;
    let params = NetParams::load(cfg.eval_ckpt_path()).map_err(usage)?;
    let delta = delta.unwrap_or(cfg.filter.keep_fraction);
    let entropies = ssl::entropy_sweep(&params, &bundle.unlabeled).map_err(usage)?;
    let tau = ssl::update_threshold(&entropies, delta).map_err(usage)?;

    let n = entropies.len();
    let kept: Vec<bool> = entropies.iter().map(|&h| h <= tau).collect();
    let n_kept = kept.iter().filter(|&&k| k).count();
    let (mut ood_kept, mut ood_rejected, mut id_kept, mut id_rejected) = (0usize, 0usize, 0usize, 0usize);
    for (s, &k) in bundle.unlabeled.samples.iter().zip(&kept) {
        match (s.is_ood, k) {
            (true, true) => ood_kept += 1,
            (true, false) => ood_rejected += 1,
            (false, true) => id_kept += 1,
            (false, false) => id_rejected += 1,
        }
    }

    // 20-bin histogram over the entropy range.
    let lo = entropies.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = entropies.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bins = 20usize;
    let width = ((hi - lo) / bins as f64).max(1e-12);
    let mut hist = vec![0usize; bins];
    for &h in &entropies {
        let b = (((h - lo) / width) as usize).min(bins - 1);
        hist[b] += 1;
    }

    let mut kv = String::new();
    let _ = writeln!(kv, "n={n}");
    let _ = writeln!(kv, "delta={delta}");
    let _ = writeln!(kv, "tau={tau}");
    let _ = writeln!(kv, "kept={n_kept}");
    let _ = writeln!(kv, "keep_rate={}", n_kept as f64 / n as f64);
    let _ = writeln!(kv, "ood_kept={ood_kept}");
    let _ = writeln!(kv, "ood_rejected={ood_rejected}");
    let _ = writeln!(kv, "id_kept={id_kept}");
    let _ = writeln!(kv, "id_rejected={id_rejected}");
    for (i, c) in hist.iter().enumerate() {
        let _ = writeln!(kv, "hist_bin_{i}={c}");
    }
    std::fs::write(cfg.out_dir.join("filter_stats.kv"), &kv).map_err(usage)?;

    let mut csv = String::from("id,entropy,is_ood,kept\n");
    for (s, (&h, &k)) in bundle.unlabeled.samples.iter().zip(entropies.iter().zip(&kept)) {
        let _ = writeln!(csv, "{},{},{},{}", s.id, h, s.is_ood, k);
    }
    std::fs::write(cfg.out_dir.join("filter_stats.csv"), &csv).map_err(usage)?;
    print!("{kv}");
    Ok(())
}

fn cmd_grad_check(cfg: &ExperimentConfig) -> Result<(), CmdError> {
    use rand::SeedableRng;
    let mut worst_nll = 0.0f64;
    let mut worst_ce = 0.0f64;
    for trial in 0..3u64 {
        let mut init_rng = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.seed ^ (trial + 1));
        let params = NetParams::init(&mut init_rng);
        let mut pose_rng = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.seed ^ 0xabcd ^ trial);
        let rot = rotreg::so3::sample_uniform_rotation(&mut pose_rng);
        let img = data::render(&rot, data::IMAGE_SIZE);
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.seed.wrapping_add(trial));
        let e_nll = net::grad_check(&params, &img, LossKind::Nll, &mut rng).map_err(usage)?;
        let e_ce = net::grad_check(&params, &img, LossKind::CrossEntropy, &mut rng).map_err(usage)?;
        worst_nll = worst_nll.max(e_nll);
        worst_ce = worst_ce.max(e_ce);
    }
    println!("max_rel_error_nll={worst_nll:e}");
    println!("max_rel_error_cross_entropy={worst_ce:e}");
    if worst_nll > 1e-3 || worst_ce > 1e-3 {
        return Err(CmdError::Usage(format!(
            "gradient check failed: nll {worst_nll:e}, cross-entropy {worst_ce:e}"
        )));
    }
    Ok(())
}

fn run() -> Result<(), CmdError> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::GenData(a) => {
            let cfg = load_config(&a)?;
            echo_config(&cfg)?;
            cmd_gen_data(&cfg)
        }
        Cmd::TrainSup(a) => {
            let cfg = load_config(&a)?;
            echo_config(&cfg)?;
            cmd_train_sup(&cfg)
        }
        Cmd::TrainSsl(a) => {
            let cfg = load_config(&a)?;
            echo_config(&cfg)?;
            cmd_train_ssl(&cfg)
        }
        Cmd::Eval(a) => {
            let cfg = load_config(&a)?;
            echo_config(&cfg)?;
            cmd_eval(&cfg)
        }
        Cmd::FilterStats { common, delta } => {
            let cfg = load_config(&common)?;
            echo_config(&cfg)?;
            cmd_filter_stats(&cfg, delta)
        }
        Cmd::GradCheck(a) => {
            let cfg = load_config(&a)?;
            echo_config(&cfg)?;
            cmd_grad_check(&cfg)
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(CmdError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CmdError::Diverged(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}
