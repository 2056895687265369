//! Command-line surface: data generation, training, inference, imputation,
//! benchmarking, and the invariant check suite.
//!
//! Exit codes: 0 success, 2 configuration/input error, 3 numerical failure.

mod checks;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use svae_core::data::{gen_laplace_sequences, CsvWriter, SequenceFile, SynthConfig};
use svae_core::diff::expfam::ParamRoute;
use svae_core::gradients::GradMode;
use svae_core::meanfield::{BlockUpdateConfig, BpMode};
use svae_core::model::{train, ModelKind, ObsModel, SvaeModel, TrainConfig};
use svae_core::SvaeError;

#[derive(Parser)]
#[command(
    name = "svae",
    about = "Structured variational inference and SVAE training for (switching) linear dynamical systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic Laplace-bump sequences.
    Generate(GenerateArgs),
    /// Train a model on a sequence file.
    Fit(FitArgs),
    /// Run posterior inference on one sequence and export the latent path.
    Infer(InferArgs),
    /// Impute a masked segment of one sequence.
    Impute(ImputeArgs),
    /// Benchmark sequential vs parallel smoothing or gradient estimation.
    Bench(BenchArgs),
    /// Run the invariant check suites.
    Check(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Lds,
    Slds,
}

#[derive(Clone, Copy, ValueEnum)]
enum BpArg {
    Sequential,
    Parallel,
}

#[derive(Clone, Copy, ValueEnum)]
enum GradModeArg {
    Unrolled,
    Implicit,
    ImplicitCapped,
    ImplicitCappedThreshold,
    NoSolve,
}

impl GradModeArg {
    fn to_mode(self) -> GradMode {
        match self {
            GradModeArg::Unrolled => GradMode::Unrolled,
            GradModeArg::Implicit => GradMode::ImplicitFixedJ(50),
            GradModeArg::ImplicitCapped => GradMode::ImplicitCapped,
            GradModeArg::ImplicitCappedThreshold => GradMode::ImplicitCappedThreshold {
                residual_tol: svae_core::gradients::DEFAULT_RESIDUAL_TOL,
            },
            GradModeArg::NoSolve => GradMode::NoSolve,
        }
    }

    fn name(self) -> &'static str {
        match self {
            GradModeArg::Unrolled => "unrolled",
            GradModeArg::Implicit => "implicit",
            GradModeArg::ImplicitCapped => "implicit-capped",
            GradModeArg::ImplicitCappedThreshold => "implicit-capped-threshold",
            GradModeArg::NoSolve => "no-solve",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ObsArg {
    Gaussian,
    Gamma2,
}

#[derive(Args)]
struct GenerateArgs {
    /// Output sequence file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Grid size (feature dimension).
    #[arg(long, default_value_t = 100)]
    grid: usize,
    #[arg(long, default_value_t = 250)]
    t: usize,
    #[arg(long, default_value_t = 50)]
    switch_period: usize,
    #[arg(long, default_value_t = 0.004)]
    drift: f64,
    #[arg(long, default_value_t = 0.02)]
    scale_step: f64,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional CSV export path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ModelArg::Slds)]
    model: ModelArg,
    #[arg(long, default_value_t = 2)]
    latent_dim: usize,
    #[arg(long, default_value_t = 8)]
    states: usize,
    /// Hidden layer widths, comma separated.
    #[arg(long, default_value = "64,32")]
    hidden: String,
    #[arg(long, value_enum, default_value_t = ObsArg::Gaussian)]
    obs: ObsArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitArgs {
    /// Input sequence file.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 3e-3)]
    adam_lr: f64,
    #[arg(long, default_value_t = 0.05)]
    nat_lr: f64,
    #[arg(long, value_enum, default_value_t = GradModeArg::ImplicitCappedThreshold)]
    grad_mode: GradModeArg,
    /// Drop the inner-optimization correction term (biased ablation).
    #[arg(long, default_value_t = false)]
    biased: bool,
    #[arg(long, value_enum, default_value_t = BpArg::Sequential)]
    bp: BpArg,
    /// Worker threads (SVAE_THREADS overrides).
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long, default_value_t = 1)]
    n_mc: usize,
    /// Metrics CSV path.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Checkpoint directory (stage checkpoints land here).
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Fractions of steps for stages 1 and 2.
    #[arg(long, default_value_t = 0.1)]
    stage1_frac: f64,
    #[arg(long, default_value_t = 0.2)]
    stage2_frac: f64,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sequence index within the file.
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Latent posterior CSV (t, mean..., var..., q_k...).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImputeArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Masked fractional range "a:b" (steps floor(aT)..ceil(bT)-1 get zero
    /// recognition potentials).
    #[arg(long, default_value = "0.2:0.8")]
    mask: String,
    #[arg(long, default_value_t = 2)]
    samples: usize,
    /// Output CSV (t, masked, mean..., sample0..., ...).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 4096)]
    t: usize,
    #[arg(long, default_value_t = 8)]
    latent_dim: usize,
    #[arg(long, default_value_t = 1)]
    states: usize,
    #[arg(long, value_enum, default_value_t = BpArg::Parallel)]
    bp: BpArg,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// When set, benchmark a gradient step instead of the smoother.
    #[arg(long, value_enum)]
    grad_mode: Option<GradModeArg>,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Append a CSV row here (header written if the file is new).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    /// all | expfam | chain | parallel | hmm | meanfield | gradients
    #[arg(long, default_value = "all")]
    suite: String,
}

fn thread_count(requested: usize) -> usize {
    if let Ok(v) = std::env::var("SVAE_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                return n;
            }
        }
    }
    if requested > 0 {
        requested
    } else {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    }
}

fn parse_hidden(s: &str) -> Result<Vec<usize>, SvaeError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| SvaeError::Config(format!("bad hidden width '{p}'")))
        })
        .collect()
}

fn parse_mask_range(spec: &str, t_len: usize) -> Result<(Vec<bool>, usize, usize), SvaeError> {
    let Some((a, b)) = spec.split_once(':') else {
        return Err(SvaeError::Config(format!(
            "mask spec must be 'a:b', got '{spec}'"
        )));
    };
    let a: f64 = a
        .trim()
        .parse()
        .map_err(|_| SvaeError::Config("bad mask start".into()))?;
    let b: f64 = b
        .trim()
        .parse()
        .map_err(|_| SvaeError::Config("bad mask end".into()))?;
    if !(0.0..=1.0).contains(&a) || !(0.0..=1.0).contains(&b) || a >= b {
        return Err(SvaeError::Config(format!("mask range out of order: {a}:{b}")));
    }
    let lo = (a * t_len as f64).floor() as usize;
    let hi = ((b * t_len as f64).ceil() as usize).min(t_len);
    let mut mask = vec![false; t_len];
    for m in mask.iter_mut().take(hi).skip(lo) {
        *m = true;
    }
    Ok((mask, lo, hi))
}

fn build_model(args: &ModelArgs, dx: usize) -> Result<SvaeModel, SvaeError> {
    let hidden = parse_hidden(&args.hidden)?;
    SvaeModel::new(
        match args.model {
            ModelArg::Lds => ModelKind::Lds,
            ModelArg::Slds => ModelKind::Slds,
        },
        args.latent_dim,
        dx,
        args.states,
        &hidden,
        match args.obs {
            ObsArg::Gaussian => ObsModel::Gaussian,
            ObsArg::Gamma2 => ObsModel::Gamma2,
        },
        args.seed,
    )
}

fn run() -> Result<(), SvaeError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Generate(a) => {
            let cfg = SynthConfig {
                n_sequences: a.n,
                grid_size: a.grid,
                t_len: a.t,
                switch_period: a.switch_period,
                drift_step: a.drift,
                scale_step: a.scale_step,
                noise: a.noise,
                seed: a.seed,
            };
            let file = gen_laplace_sequences(&cfg)?;
            file.write(&a.out)?;
            if let Some(csv) = &a.csv {
                file.write_csv(csv)?;
            }
            println!(
                "wrote {} sequences (T={}, Dx={}) to {}",
                file.n(),
                file.t_len(),
                file.dx(),
                a.out.display()
            );
            Ok(())
        }
        Command::Fit(a) => {
            let file = SequenceFile::read(&a.data)?;
            let mut model = build_model(&a.model, file.dx())?;
            model.n_mc = a.n_mc;
            model.bp = match a.bp {
                BpArg::Sequential => BpMode::Sequential,
                BpArg::Parallel => BpMode::Parallel,
            };
            model.mf_cfg = BlockUpdateConfig {
                max_iters: 30,
                tol_residual: 1e-8,
                tol_surrogate: 1e-12,
                bp: model.bp,
            };
            let _threads = thread_count(a.threads);
            let cfg = TrainConfig {
                steps: a.steps,
                batch: a.batch,
                stage1_frac: a.stage1_frac,
                stage2_frac: a.stage2_frac,
                adam_lr: a.adam_lr,
                nat_lr: a.nat_lr,
                grad_mode: a.grad_mode.to_mode(),
                drop_correction: a.biased,
                route: ParamRoute::Natural,
                seed: a.model.seed,
                checkpoint_dir: a.checkpoint_dir.clone(),
            };
            let log = train(&mut model, &file.sequences, &cfg)?;
            if let Some(path) = &a.metrics {
                let mut csv = CsvWriter::create(
                    path,
                    "step,elbo,prior_kl,local_kl,recon,surrogate,wall_ms",
                )?;
                for r in &log {
                    csv.row(&[
                        r.step.to_string(),
                        format!("{:.6}", r.metrics.loss.elbo),
                        format!("{:.6}", r.metrics.loss.prior_kl),
                        format!("{:.6}", r.metrics.loss.local_kl_total()),
                        format!("{:.6}", r.metrics.loss.reconstruction),
                        format!("{:.6}", r.metrics.loss.surrogate),
                        format!("{:.1}", r.wall_ms),
                    ])?;
                }
                csv.flush()?;
            }
            let last = log.last().unwrap();
            println!(
                "finished {} steps; final elbo {:.4} (recon {:.4}, surrogate {:.4})",
                log.len(),
                last.metrics.loss.elbo,
                last.metrics.loss.reconstruction,
                last.metrics.loss.surrogate
            );
            Ok(())
        }
        Command::Infer(a) => {
            let file = SequenceFile::read(&a.data)?;
            let mut model = build_model(&a.model, file.dx())?;
            model.load_into(&a.checkpoint)?;
            let x = file
                .sequences
                .get(a.index)
                .ok_or_else(|| SvaeError::Config(format!("index {} out of range", a.index)))?;
            let inf = model.infer(x, None)?;
            let d = model.d;
            let k = model.k;
            let mut header = String::from("t");
            for i in 0..d {
                header.push_str(&format!(",mean{i}"));
            }
            for i in 0..d {
                header.push_str(&format!(",var{i}"));
            }
            if inf.mf.is_some() {
                for j in 0..k {
                    header.push_str(&format!(",q{j}"));
                }
            }
            let mut csv = CsvWriter::create(&a.out, &header)?;
            for t in 0..x.nrows() {
                let mut fields = vec![t.to_string()];
                for i in 0..d {
                    fields.push(format!("{:.8}", inf.stats.mean[t][i]));
                }
                for i in 0..d {
                    let var = inf.stats.second[t][(i, i)]
                        - inf.stats.mean[t][i] * inf.stats.mean[t][i];
                    fields.push(format!("{var:.8}"));
                }
                if let Some(mf) = &inf.mf {
                    // Discrete chain covers transitions; align step t with the
                    // marginal of its incoming transition (step 0 repeats 1).
                    let tk = t.saturating_sub(1).min(mf.mu_k.marginal.len() - 1);
                    for j in 0..k {
                        fields.push(format!("{:.8}", mf.mu_k.marginal[tk][j]));
                    }
                }
                csv.row(&fields)?;
            }
            csv.flush()?;
            println!("wrote posterior to {}", a.out.display());
            Ok(())
        }
        Command::Impute(a) => {
            let file = SequenceFile::read(&a.data)?;
            let mut model = build_model(&a.model, file.dx())?;
            model.load_into(&a.checkpoint)?;
            let x = file
                .sequences
                .get(a.index)
                .ok_or_else(|| SvaeError::Config(format!("index {} out of range", a.index)))?;
            let (mask, lo, hi) = parse_mask_range(&a.mask, x.nrows())?;
            eprintln!("masking steps {lo}..{} (recognition potentials zeroed)", hi - 1);
            let res = model.impute(x, &mask, a.samples, a.model.seed)?;
            let mut header = String::from("t,masked");
            for j in 0..model.dx {
                header.push_str(&format!(",mean{j}"));
            }
            for s in 0..a.samples {
                for j in 0..model.dx {
                    header.push_str(&format!(",s{s}x{j}"));
                }
            }
            let mut csv = CsvWriter::create(&a.out, &header)?;
            for t in 0..x.nrows() {
                let mut fields = vec![t.to_string(), (mask[t] as u8).to_string()];
                for j in 0..model.dx {
                    fields.push(format!("{:.8}", res.means[(t, j)]));
                }
                for s in &res.samples {
                    for j in 0..model.dx {
                        fields.push(format!("{:.8}", s[(t, j)]));
                    }
                }
                csv.row(&fields)?;
            }
            csv.flush()?;
            println!("wrote imputation to {}", a.out.display());
            Ok(())
        }
        Command::Bench(a) => {
            let threads = thread_count(a.threads);
            let row = bench(&a, threads)?;
            println!(
                "T={} D={} K={} bp={} threads={} grad_mode={} ms_per_step={:.2} peak_states={}",
                row.0, row.1, row.2, row.3, row.4, row.5, row.6, row.7
            );
            if let Some(path) = &a.out {
                let new = !path.exists();
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)?;
                use std::io::Write;
                if new {
                    writeln!(f, "T,D,K,bp,threads,grad_mode,ms_per_step,peak_states")?;
                }
                writeln!(
                    f,
                    "{},{},{},{},{},{},{:.3},{}",
                    row.0, row.1, row.2, row.3, row.4, row.5, row.6, row.7
                )?;
            }
            Ok(())
        }
        Command::Check(a) => {
            let failures = checks::run_suite(&a.suite)?;
            if failures == 0 {
                println!("all checks passed");
                Ok(())
            } else {
                Err(SvaeError::NonFinite {
                    context: "check suite",
                    iter: failures,
                })
            }
        }
    }
}

type BenchRow = (usize, usize, usize, &'static str, usize, String, f64, usize);

fn bench(a: &BenchArgs, threads: usize) -> Result<BenchRow, SvaeError> {
    use svae_core::chain::{kalman_filter, kalman_smooth, random_chain};
    use svae_core::parallel::{parallel_filter, parallel_smooth};
    use svae_core::rng::SeqRng;

    match &a.grad_mode {
        None => {
            let mut rng = SeqRng::new(a.seed, 7);
            let p = random_chain(a.t, a.latent_dim, &mut rng);
            let bp_name = match a.bp {
                BpArg::Sequential => "sequential",
                BpArg::Parallel => "parallel",
            };
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| SvaeError::Config(e.to_string()))?;
            let mut best = f64::INFINITY;
            for _ in 0..a.reps.max(1) {
                let t0 = std::time::Instant::now();
                match a.bp {
                    BpArg::Sequential => {
                        let fr = kalman_filter(&p)?;
                        let _sm = kalman_smooth(&p, &fr)?;
                    }
                    BpArg::Parallel => {
                        let (fr, _) = parallel_filter(&p, Some(&pool))?;
                        let _sm = parallel_smooth(&p, &fr, Some(&pool))?;
                    }
                }
                best = best.min(t0.elapsed().as_secs_f64() * 1e3);
            }
            Ok((
                a.t,
                a.latent_dim,
                a.states,
                bp_name,
                threads,
                "-".into(),
                best,
                0,
            ))
        }
        Some(mode) => {
            // Gradient-step benchmark on a small synthetic SLDS problem.
            let cfg = SynthConfig {
                n_sequences: 2,
                grid_size: 20,
                t_len: a.t.min(100),
                ..Default::default()
            };
            let file = gen_laplace_sequences(&cfg)?;
            let mut model = SvaeModel::new(
                ModelKind::Slds,
                a.latent_dim.min(4),
                file.dx(),
                a.states.max(2),
                &[32],
                ObsModel::Gaussian,
                a.seed,
            )?;
            model.mf_cfg.max_iters = 10;
            let opts = svae_core::model::StepOptions {
                adam_lr: 0.0,
                nat_lr: 0.0,
                grad_mode: mode.to_mode(),
                drop_correction: false,
                vae_stage: false,
                route: ParamRoute::Natural,
                update_nets: false,
                update_globals: false,
                seed: a.seed,
            };
            let mut best = f64::INFINITY;
            let mut peak = 0usize;
            for _ in 0..a.reps.max(1) {
                let t0 = std::time::Instant::now();
                let sg = model.sequence_gradients(&file.sequences[0], None, &opts, 0)?;
                best = best.min(t0.elapsed().as_secs_f64() * 1e3);
                peak = peak.max(sg.stored_states);
            }
            Ok((
                cfg.t_len,
                a.latent_dim.min(4),
                a.states.max(2),
                "sequential",
                threads,
                mode.name().into(),
                best,
                peak,
            ))
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::from(0),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                SvaeError::Config(_)
                | SvaeError::Parse { .. }
                | SvaeError::MagicMismatch { .. }
                | SvaeError::Length(_)
                | SvaeError::DimMismatch(_)
                | SvaeError::ShapeMismatch(_)
                | SvaeError::Io(_) => 2,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}
