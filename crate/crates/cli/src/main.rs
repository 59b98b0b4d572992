use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vidroute::data::{gen_subject, generate_dataset, load_dataset, save_dataset, DatasetSpec, SyntheticSample};
use vidroute::diffusion::{sample, Condition, SampleOptions};
use vidroute::train::suite::{run_suite, CheckModule, TOLERANCE};
use vidroute::train::{evaluate, load_checkpoint, save_checkpoint, Mode, TrainConfig, Trainer};
use vidroute::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vidroute",
    version,
    about = "Component-routed latent video diffusion on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        subjects: usize,
        #[arg(long)]
        videos_per_subject: usize,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        tokens_per_frame: usize,
        #[arg(long)]
        noise: f64,
        #[arg(long)]
        seed: u64,
    },
    /// Train (or resume training) and write a checkpoint plus metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample one latent video for the subject generated from `--seed`.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        cfg_scale: f64,
        #[arg(long)]
        chunks: usize,
        #[arg(long)]
        no_tam: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a held-out dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference gradient checks at desk-profile shapes.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: CheckModule,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
    },
}

const CHECKPOINT_FILE: &str = "checkpoint.lvck";
const METRICS_FILE: &str = "metrics.csv";
const CONFIG_FILE: &str = "config.txt";

fn gen_data(spec: DatasetSpec, out: &Path) -> Result<()> {
    let samples = generate_dataset(&spec)?;
    save_dataset(&samples, out)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn train(config: &Path, data: &Path, out: &Path, mode: Mode, resume: Option<&Path>) -> Result<()> {
    let mut config = TrainConfig::parse(&fs::read_to_string(config)?)?;
    config.mode = mode;
    config.validate()?;
    let dataset = load_dataset(data)?;
    let mut trainer = match resume {
        Some(ckpt) => {
            let mut t = load_checkpoint(ckpt)?;
            t.mode = mode;
            t.model.config.mode = mode;
            t.model.config.steps = config.steps;
            t
        }
        None => Trainer::new(&config, mode)?,
    };
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), trainer.config().to_text())?;
    let history = trainer.fit(&dataset, Some(&out.join(METRICS_FILE)))?;
    let ckpt = out.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, &trainer)?;
    if let Some((step, l)) = history.last() {
        println!(
            "step {step}: l_diff {:.6} l_route {:.6} l_tam {:.6} l_total {:.6}",
            l.l_diff, l.l_route, l.l_tam, l.l_total
        );
    }
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn sample_cmd(ckpt: &Path, opts: SampleOptions, out: &Path) -> Result<()> {
    let trainer = load_checkpoint(ckpt)?;
    let model = &trainer.model;
    let cfg = &model.config;
    let subject = gen_subject(opts.seed, cfg.components, cfg.latent_dim)?;
    let cond = Condition::Subject {
        features: subject.local_features(cfg.local_tokens)?,
        identity: subject.identity_tensor()?,
    };
    let video = sample(&model.store, &model.denoiser, &model.tam, &model.schedule, &cond, &opts)?;
    let layout = subject.layout(cfg.tokens_per_frame)?;
    let labels = (0..cfg.frames).flat_map(|_| layout.iter().copied()).collect();
    let record = SyntheticSample {
        latents: video,
        labels,
        subject,
        motion_seed: opts.seed,
    };
    save_dataset(&[record], out)?;
    println!("wrote sample to {}", out.display());
    Ok(())
}

fn eval_cmd(ckpt: &Path, data: &Path, report: &Path) -> Result<()> {
    let trainer = load_checkpoint(ckpt)?;
    let dataset = load_dataset(data)?;
    let metrics = evaluate(&trainer.model, &dataset)?;
    fs::write(report, metrics.to_csv())?;
    print!("{}", metrics.to_csv());
    Ok(())
}

fn gradcheck(module: CheckModule, eps: f64) -> Result<bool> {
    let results = run_suite(module, &TrainConfig::desk(), eps)?;
    let mut ok = true;
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{status:4} {:<24} max_rel_error {:.3e} ({} coords, {} directions, worst {})",
            r.name,
            r.report.max_rel_error,
            r.report.coords_checked,
            r.report.directions_checked,
            r.report.worst.as_deref().unwrap_or("-")
        );
        ok &= r.passed();
    }
    println!("{} checks, tolerance {TOLERANCE:e}", results.len());
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            out,
            subjects,
            videos_per_subject,
            frames,
            tokens_per_frame,
            noise,
            seed,
        } => {
            let desk = TrainConfig::desk();
            gen_data(
                DatasetSpec {
                    subjects,
                    videos_per_subject,
                    frames,
                    tokens_per_frame,
                    dim: desk.latent_dim,
                    components: desk.components,
                    noise_level: noise,
                    seed,
                },
                &out,
            )?;
        }
        Command::Train {
            config,
            data,
            out,
            mode,
            resume,
        } => train(&config, &data, &out, mode, resume.as_deref())?,
        Command::Sample {
            ckpt,
            seed,
            steps,
            cfg_scale,
            chunks,
            no_tam,
            out,
        } => sample_cmd(
            &ckpt,
            SampleOptions {
                cfg_scale,
                steps,
                chunks,
                seed,
                apply_tam: !no_tam,
            },
            &out,
        )?,
        Command::Eval { ckpt, data, report } => eval_cmd(&ckpt, &data, &report)?,
        Command::Gradcheck { module, eps } => return gradcheck(module, eps),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Io(_) = e {
                return ExitCode::from(3);
            }
            ExitCode::from(2)
        }
    }
}
