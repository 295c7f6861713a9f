//! `aape`: experiments, checks, benchmarks and data tooling.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use aape_core::aape::stats::{lambda_stats, stats_csv};
use aape_core::aape::stem::tokens_to_grid;
use aape_core::aape::{AapeConfig, Stem};
use aape_core::adaptive_conv::{self, conv_config, AdaptiveConvInput};
use aape_core::autodiff::{Binder, Graph, Leaf, ParamSet};
use aape_core::checks;
use aape_core::config::{RunConfig, SCHEMA_VERSION};
use aape_core::io::{self, DType, Manifest, CHECKPOINT_VERSION, TENSOR_VERSION};
use aape_core::rng::{keyed, Lane};
use aape_core::ssl::synth::synth_spectrogram;
use aape_core::ssl::{loss_csv, pretrain_fixed};
use aape_core::windows::WindowKind;
use aape_core::Error;
use clap::{Parser, Subcommand, ValueEnum};
use ndarray::{Array2, Array3, Axis};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(
    name = "aape",
    about = "Aliasing-aware patch embedding: experiments and checks",
    disable_version_flag = true
)]
struct Cli {
    /// Worker threads for parallel kernels.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    /// Seed for every random draw (overrides a config file's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print crate, schema and file-format versions.
    #[arg(long)]
    version: bool,
    #[command(subcommand)]
    command: Option<Cmd>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Window {
    TwoSided,
    OneSided,
    Gaussian,
}

impl From<Window> for WindowKind {
    fn from(w: Window) -> Self {
        match w {
            Window::TwoSided => WindowKind::TwoSidedExp,
            Window::OneSided => WindowKind::OneSidedExp,
            Window::Gaussian => WindowKind::Gaussian,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Profile {
    Quick,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Toy,
    Reduced,
    Full,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(clap::Args, Debug)]
struct ModelArgs {
    /// Run config JSON; its `model` section defines the stem.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Preset::Toy)]
    preset: Preset,
}

impl ModelArgs {
    fn resolve(&self) -> Result<AapeConfig, Error> {
        match &self.config {
            Some(p) => Ok(RunConfig::load(p)?.model),
            None => {
                let c = match self.preset {
                    Preset::Toy => AapeConfig::toy(),
                    Preset::Reduced => AapeConfig::reduced(),
                    Preset::Full => AapeConfig::full(),
                };
                c.validate()?;
                Ok(c)
            }
        }
    }
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Peak-normalised window responses and slopes as CSV.
    Spectrum {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient ascent of a local spectrum towards a single tone, as CSV.
    FitTone {
        #[arg(long, value_enum, default_value_t = Window::TwoSided)]
        window: Window,
        #[arg(long, default_value_t = checks::FIT_LR)]
        lr: f64,
        #[arg(long, default_value_t = checks::FIT_STEPS)]
        steps: usize,
        /// Initial distance below the tone, Hz.
        #[arg(long, default_value_t = checks::FIT_OFFSET)]
        offset: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient sweeps; JSON report.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Profile::Quick)]
        profile: Profile,
    },
    /// Fused convolution against the kernel-materialising oracle; JSON report.
    OracleSweep {
        #[arg(long, default_value_t = 200)]
        cases: usize,
    },
    /// Adaptive convolution timings and base-convolution counts; JSON report.
    Bench {
        #[arg(long, default_value_t = 128)]
        hidden: usize,
        #[arg(long, default_value_t = 608)]
        frames: usize,
        #[arg(long, default_value_t = 63)]
        kernel: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Fused tokens (`D x F~ x T~`) for one spectrogram.
    Embed {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Checkpoint holding the stem parameters; fresh seeded init if absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Also write the `2 x H x T` pole field (alpha, beta).
        #[arg(long)]
        lambda_out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Per-patch alpha/beta quantiles as CSV.
    LambdaStats {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Desk-scale teacher-student pretraining on a fixed synthetic batch.
    PretrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Writes synthetic spectrograms as AAPT files.
    SynthData {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        f: usize,
        #[arg(long)]
        t: usize,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Precision::F32)]
        dtype: Precision,
    },
    /// Derivation oracles as a PASS/FAIL table.
    VerifyDerivations,
}

/// Failure of a numerical check, as opposed to bad input.
struct CheckFailed;

enum Failure {
    Usage(Error),
    Check(CheckFailed),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Usage(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(Error::Io(e))
    }
}

type Outcome = Result<(), Failure>;

fn emit(out: Option<&Path>, text: &str) -> Outcome {
    match out {
        Some(p) => std::fs::write(p, text)?,
        None => {
            use std::io::Write;
            match std::io::stdout().lock().write_all(text.as_bytes()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => return Err(e.into()),
                _ => {}
            }
        }
    }
    Ok(())
}

fn verdict(pass: bool) -> Outcome {
    if pass {
        Ok(())
    } else {
        Err(Failure::Check(CheckFailed))
    }
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json");
    s.push('\n');
    s
}

fn stem_params(stem: &Stem, ckpt: Option<&Path>, seed: u64) -> Result<ParamSet, Error> {
    let mut ps = ParamSet::new();
    stem.init(&mut ps, &mut keyed(seed, 0, Lane::Init, 0));
    if let Some(p) = ckpt {
        let loaded = io::load_checkpoint(p)?;
        let n = ps.overwrite_from(&loaded)?;
        if n != ps.len() {
            return Err(Error::Invalid(format!(
                "checkpoint supplies {n} of {} stem parameters",
                ps.len()
            )));
        }
    }
    Ok(ps)
}

fn run_stem(
    cfg: &AapeConfig,
    ckpt: Option<&Path>,
    input: &Path,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>, usize, usize), Error> {
    let x = io::load_matrix(input)?;
    let stem = Stem::new(cfg)?;
    let ps = stem_params(&stem, ckpt, seed)?;
    let mut g = Graph::new();
    let mut b = Binder::new(&ps, Leaf::Constant);
    let out = stem.forward(&mut g, &mut b, &x, None)?;
    Ok((
        g.value(out.fused).clone(),
        g.value(out.alpha).clone(),
        g.value(out.beta).clone(),
        out.f_patches,
        out.t_patches,
    ))
}

fn gradcheck(profile: Profile, seed: u64) -> Outcome {
    let cases = checks::conv_grad_sweep(seed)?;
    let cases: Vec<_> = match profile {
        Profile::Quick => cases.into_iter().filter(|c| c.hidden <= 4).collect(),
        Profile::Full => cases,
    };
    let conv_max = cases.iter().fold(0.0f64, |m, c| m.max(c.max_rel_error));
    let mut pass = conv_max < checks::CONV_GRAD_TOL;
    let mut report = json!({
        "profile": format!("{profile:?}").to_lowercase(),
        "seed": seed,
        "conv": { "tolerance": checks::CONV_GRAD_TOL, "max_rel_error": conv_max, "cases": cases },
    });
    if let Profile::Full = profile {
        let stem = checks::stem_grad_check(&AapeConfig::reduced(), seed, 10_000)?;
        pass &= stem.max_rel_error < checks::STEM_GRAD_TOL;
        report["stem"] =
            json!({ "config": "reduced", "tolerance": checks::STEM_GRAD_TOL, "report": stem });
    }
    report["pass"] = json!(pass);
    emit(None, &pretty(&report))?;
    verdict(pass)
}

fn bench(hidden: usize, frames: usize, kernel: usize, reps: usize, seed: u64) -> Outcome {
    let cfg = conv_config(kernel, 0.01, 0.01, 16);
    let mut rng = keyed(seed, 0, Lane::Sweep, 0);
    let (x, a, b) = adaptive_conv::random_operands(hidden, frames, &cfg.bounds()?, &mut rng);
    let gout = Array2::<f64>::ones((hidden, frames));
    let inp = AdaptiveConvInput::new(x.view(), a.view(), b.view(), &cfg)?;
    let reps = reps.max(1);
    let time = |f: &mut dyn FnMut()| {
        let t = Instant::now();
        for _ in 0..reps {
            f();
        }
        t.elapsed().as_secs_f64() * 1e3 / reps as f64
    };
    let (_, saved) = adaptive_conv::forward(&inp);
    let fwd = time(&mut || {
        std::hint::black_box(adaptive_conv::forward(&inp));
    });
    let mut fused_count = 0;
    let bwd = time(&mut || {
        fused_count = adaptive_conv::backward(&inp, &saved, gout.view())
            .expect("shapes")
            .base_convolutions;
    });
    let mut ref_count = 0;
    let bwd_ref = time(&mut || {
        ref_count = adaptive_conv::backward_reference(&inp, &saved, gout.view())
            .expect("shapes")
            .base_convolutions;
    });
    let report = json!({
        "hidden": hidden, "frames": frames, "kernel": kernel, "reps": reps,
        "threads": rayon::current_num_threads(),
        "forward_ms": fwd, "backward_ms": bwd, "backward_reference_ms": bwd_ref,
        "base_convolutions": fused_count, "base_convolutions_reference": ref_count,
        "tap_products_forward": 2 * hidden * frames * kernel,
    });
    emit(None, &pretty(&report))?;
    Ok(())
}

fn verify_derivations(seed: u64) -> Outcome {
    let d = checks::derivation_check(10, seed)?;
    let gm = checks::gamma_sweep(10_000, seed)?;
    let c = checks::coupling_sweep(50, seed)?;
    let rows = [
        (
            "window state vs quadrature",
            d.max_abs_error,
            checks::DERIVATION_TOL,
        ),
        (
            "strict-kernel centre correction",
            d.strict_gap_residual,
            checks::DERIVATION_TOL,
        ),
        (
            "causal system vs quadrature",
            d.causal_max_abs_error,
            checks::DERIVATION_TOL,
        ),
        (
            "gamma vs complex modulus",
            gm.max_abs_error,
            checks::GAMMA_TOL,
        ),
        (
            "coupling (alpha)",
            c.max_alpha_residual,
            checks::COUPLING_TOL,
        ),
        ("coupling (beta)", c.max_beta_residual, checks::COUPLING_TOL),
        (
            "two-sum vs four-sum gradients",
            c.max_agreement_error,
            checks::AGREEMENT_TOL,
        ),
    ];
    let mut pass = true;
    let mut table = String::new();
    let _ = writeln!(
        table,
        "{:<34} {:>12} {:>10}  result",
        "check", "max error", "tolerance"
    );
    for (name, err, tol) in rows {
        let ok = err < tol;
        pass &= ok;
        let _ = writeln!(
            table,
            "{name:<34} {err:>12.3e} {tol:>10.0e}  {}",
            if ok { "PASS" } else { "FAIL" }
        );
    }
    let halved = c.fused_convolutions * 2 == c.reference_convolutions
        && c.fused_convolutions == 2 * c.frames_total;
    pass &= halved;
    let _ = writeln!(
        table,
        "{:<34} {:>12} {:>10}  {}",
        "base convolutions per frame",
        format!(
            "{}/{}",
            c.fused_convolutions / c.frames_total.max(1),
            c.reference_convolutions / c.frames_total.max(1)
        ),
        "2/4",
        if halved { "PASS" } else { "FAIL" }
    );
    emit(None, &table)?;
    verdict(pass)
}

fn pretrain(config: Option<&Path>, out: &Path, steps: Option<usize>, seed: Option<u64>) -> Outcome {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::toy(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = steps {
        cfg.train.steps = s;
    }
    cfg.validate()?;
    std::fs::create_dir_all(out)?;
    let (_, state, log) = pretrain_fixed(&cfg.model, &cfg.train, cfg.seed, cfg.data_seed, |o| {
        eprintln!("step {:>5}  loss {:.6}", o.step, o.report.l_total);
    })?;
    std::fs::write(out.join("loss.csv"), loss_csv(&log))?;
    io::save_checkpoint(&out.join("student.aapc"), &state.student)?;
    io::save_checkpoint(&out.join("teacher.aapc"), &state.teacher.params)?;
    std::fs::write(out.join("config.json"), cfg.to_json() + "\n")?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config_sha256: cfg.sha256(),
        seed: cfg.seed,
        git_describe: io::git_describe(),
        steps: log.len(),
        initial_loss: log.first().map_or(f64::NAN, |o| o.report.l_total),
        final_loss: log.last().map_or(f64::NAN, |o| o.report.l_total),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).map_err(Error::from)? + "\n",
    )?;
    Ok(())
}

fn synth_data(n: usize, f: usize, t: usize, out: &Path, dtype: Precision, seed: u64) -> Outcome {
    if n == 0 || f == 0 || t == 0 {
        return Err(Error::Invalid("n, f and t must be positive".into()).into());
    }
    std::fs::create_dir_all(out)?;
    let dt = match dtype {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    };
    let width = n.to_string().len().max(5);
    for i in 0..n {
        let x = synth_spectrogram(f, t, seed, i as u64);
        io::save_tensor(
            &out.join(format!("synth_{i:0width$}.aapt")),
            &x.into_dyn(),
            dt,
        )?;
    }
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    let seed = cli.seed.unwrap_or(0);
    let Some(cmd) = cli.command else {
        return Err(Error::Invalid("no subcommand given (see --help)".into()).into());
    };
    match cmd {
        Cmd::Spectrum { out } => emit(
            out.as_deref(),
            &checks::trace_csv(&checks::window_traces()?),
        ),
        Cmd::FitTone {
            window,
            lr,
            steps,
            offset,
            out,
        } => {
            let spec = checks::window_spec(window.into())?;
            let traj = aape_core::windows::fit_tone(
                &spec,
                checks::TONE_OMEGA,
                checks::TONE_OMEGA - offset,
                lr,
                steps,
            )?;
            emit(out.as_deref(), &checks::fit_csv(&traj))
        }
        Cmd::Gradcheck { profile } => gradcheck(profile, seed),
        Cmd::OracleSweep { cases } => {
            let r = checks::oracle_sweep(cases, seed)?;
            let pass = r.max_abs_error < checks::ORACLE_TOL;
            emit(
                None,
                &pretty(
                    &json!({ "seed": seed, "tolerance": checks::ORACLE_TOL, "report": r, "pass": pass }),
                ),
            )?;
            verdict(pass)
        }
        Cmd::Bench {
            hidden,
            frames,
            kernel,
            reps,
        } => bench(hidden, frames, kernel, reps, seed),
        Cmd::Embed {
            input,
            out,
            ckpt,
            lambda_out,
            model,
        } => {
            let cfg = model.resolve()?;
            let (fused, alpha, beta, fp, tp) = run_stem(&cfg, ckpt.as_deref(), &input, seed)?;
            io::save_tensor(
                &out,
                &tokens_to_grid(&fused, fp, tp)?.into_dyn(),
                DType::F64,
            )?;
            if let Some(p) = lambda_out {
                let field = ndarray::stack(Axis(0), &[alpha.view(), beta.view()])
                    .map_err(|e| Error::Shape(e.to_string()))?;
                let field: Array3<f64> = field;
                io::save_tensor(&p, &field.into_dyn(), DType::F64)?;
            }
            Ok(())
        }
        Cmd::LambdaStats {
            ckpt,
            input,
            out,
            model,
        } => {
            let cfg = model.resolve()?;
            let (_, alpha, beta, _, _) = run_stem(&cfg, ckpt.as_deref(), &input, seed)?;
            emit(
                out.as_deref(),
                &stats_csv(&lambda_stats(&alpha, &beta, &cfg)?),
            )
        }
        Cmd::PretrainToy { config, out, steps } => {
            pretrain(config.as_deref(), &out, steps, cli.seed)
        }
        Cmd::SynthData {
            n,
            f,
            t,
            out,
            dtype,
        } => synth_data(n, f, t, &out, dtype, seed),
        Cmd::VerifyDerivations => verify_derivations(seed),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.version {
        println!("aape {}", env!("CARGO_PKG_VERSION"));
        println!("config schema {SCHEMA_VERSION}");
        println!("AAPT tensor format {TENSOR_VERSION}");
        println!("AAPC checkpoint format {CHECKPOINT_VERSION}");
        return ExitCode::SUCCESS;
    }
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    if let Err(e) = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
    {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Check(CheckFailed)) => {
            eprintln!("check failed");
            ExitCode::from(2)
        }
    }
}
