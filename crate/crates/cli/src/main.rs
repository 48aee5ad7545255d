use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use trimix::config::TriMixConfig;
use trimix::data::{load_dataset, Dataset};
use trimix::eval::{extract_features, finetune_semi, knn_eval, linear_probe, EvalReport};
use trimix::model::{Arch, ModelParams};
use trimix::objective::{LambdaPolicy, ObjectiveConfig};
use trimix::train::{pretrain, Checkpoint, PretrainOptions};
use trimix::verify;

#[derive(Parser)]
#[command(
    name = "trimix",
    version,
    about = "TriMix self-supervised pretraining and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value config file; defaults apply to keys it leaves out
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set epochs=1 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory
    #[arg(long, default_value = "runs/trimix")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct WithCheckpoint {
    #[command(flatten)]
    common: Common,
    /// Checkpoint to evaluate; its config snapshot is the base config when
    /// --config is absent
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pretraining; writes checkpoints, metrics.csv and config.resolved
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// KNN on frozen encoder outputs
    Knn(WithCheckpoint),
    /// Linear probe on frozen encoder outputs
    Probe(WithCheckpoint),
    /// Semi-supervised fine-tuning on a labelled fraction
    Finetune {
        #[command(flatten)]
        inner: WithCheckpoint,
        /// Overrides finetune.fraction
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Tape gradients of the full loss vs finite differences
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Optimized paths vs naive references, plus structural invariants
    VerifyOracle {
        #[command(flatten)]
        common: Common,
        /// Seeded cases per quantity
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
    /// Write encoder outputs of both splits to CSV
    ExportEmbeddings(WithCheckpoint),
}

fn load_config(common: &Common, checkpoint: Option<&Checkpoint>) -> anyhow::Result<TriMixConfig> {
    let mut cfg = match (&common.config, checkpoint) {
        (Some(path), _) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            TriMixConfig::parse(&text)?
        }
        (None, Some(ck)) => TriMixConfig::parse(&ck.config)?,
        (None, None) => TriMixConfig::default(),
    };
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects key=value, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Ok(seed) = std::env::var("TRIMIX_SEED") {
        cfg.set("seed", seed.trim())?;
        eprintln!("TRIMIX_SEED overrides seed: {}", cfg.seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_snapshot(cfg: &TriMixConfig, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join("config.resolved");
    std::fs::write(&path, cfg.to_kv_string()).with_context(|| format!("writing {}", path.display()))
}

struct EvalSetup {
    cfg: TriMixConfig,
    params: ModelParams,
    train: Dataset,
    test: Dataset,
}

fn eval_setup(args: &WithCheckpoint) -> anyhow::Result<EvalSetup> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let cfg = load_config(&args.common, Some(&ck))?;
    let train = load_dataset(&cfg.train_source())?;
    let test = load_dataset(&cfg.test_source())?;
    let arch = cfg.arch(train.input_width())?;
    if ck.params.arch != arch {
        return Err(trimix::Error::ArchMismatch {
            expected: arch.to_string(),
            found: ck.params.arch.to_string(),
        }
        .into());
    }
    write_snapshot(&cfg, &args.common.out)?;
    Ok(EvalSetup {
        cfg,
        params: ck.params,
        train,
        test,
    })
}

fn emit(report: EvalReport, cfg: &TriMixConfig, out: &Path) -> anyhow::Result<()> {
    let report = report.with_digest(cfg.digest());
    report.append_csv(&out.join("eval.csv"))?;
    println!("{report}");
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Pretrain { common, checkpoint } => {
            let resume = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let cfg = load_config(&common, resume.as_ref())?;
            let train = load_dataset(&cfg.train_source())?;
            if let Some(ck) = &resume {
                eprintln!("resuming from epoch {}", ck.epoch);
            }
            let out = pretrain(
                &cfg,
                &train,
                PretrainOptions {
                    out_dir: Some(common.out.clone()),
                    resume,
                },
            )?;
            let last = out.metrics.last();
            println!(
                "pretrained {} epochs on {} ({} samples); final total loss {}; checkpoint {}",
                out.checkpoint.epoch,
                train.name,
                train.len(),
                last.map_or(f64::NAN, |m| m.total),
                common.out.join("checkpoint.tmx").display()
            );
        }
        Command::Knn(args) => {
            let s = eval_setup(&args)?;
            let tr = extract_features(&s.params, &s.train)?;
            let te = extract_features(&s.params, &s.test)?;
            emit(knn_eval(&tr, &te, s.cfg.knn_k)?, &s.cfg, &args.common.out)?;
        }
        Command::Probe(args) => {
            let s = eval_setup(&args)?;
            let tr = extract_features(&s.params, &s.train)?;
            let te = extract_features(&s.params, &s.test)?;
            emit(
                linear_probe(&tr, &te, &s.cfg.probe, s.cfg.seed)?,
                &s.cfg,
                &args.common.out,
            )?;
        }
        Command::Finetune { inner, fraction } => {
            let s = eval_setup(&inner)?;
            let fraction = fraction.unwrap_or(s.cfg.finetune_fraction);
            let r = finetune_semi(
                &s.params,
                &s.train,
                &s.test,
                fraction,
                s.cfg.finetune_epochs,
                &s.cfg.probe,
                s.cfg.seed,
            )?;
            emit(r, &s.cfg, &inner.common.out)?;
        }
        Command::Gradcheck { common } => {
            let cfg = load_config(&common, None)?;
            let objective = ObjectiveConfig {
                lambda_policy: match cfg.objective.lambda_policy {
                    LambdaPolicy::Uniform => LambdaPolicy::Fixed(0.3),
                    fixed => fixed,
                },
                ..cfg.objective.clone()
            };
            let side = cfg.synthetic_grid;
            let arch: Arch = cfg.arch(side * side)?;
            let r = verify::gradcheck(&arch, 8, side, &objective, cfg.seed)?;
            println!("{r}");
            return Ok(r.passed());
        }
        Command::VerifyOracle { common, cases } => {
            let cfg = load_config(&common, None)?;
            let mut ok = true;
            for r in verify::oracle_suite(cases, cfg.seed)? {
                ok &= r.passed;
                println!("{r}");
            }
            let mut checks = verify::endpoint_checks(cfg.seed)?;
            let l_con = verify::linearity_max_l_con(20, cfg.seed)?;
            checks.push(verify::Check {
                name: "L_con vanishes for an affine network".into(),
                passed: l_con < 1e-9,
                detail: format!("max L_con {l_con:.2e} over 20 λ"),
            });
            checks.extend(verify::structural_trials(200, cfg.seed)?.checks());
            for c in checks {
                ok &= c.passed;
                println!("{c}");
            }
            return Ok(ok);
        }
        Command::ExportEmbeddings(args) => {
            let s = eval_setup(&args)?;
            for (name, ds) in [("train", &s.train), ("test", &s.test)] {
                let path = args.common.out.join(format!("embeddings_{name}.csv"));
                extract_features(&s.params, ds)?.write_csv(&path)?;
                println!("wrote {} ({} rows)", path.display(), ds.len());
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        // a verification that ran to completion but failed
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            let numeric = e
                .downcast_ref::<trimix::Error>()
                .is_some_and(trimix::Error::is_numeric);
            // library errors already print their source; only add causes
            // that say something new
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::from(if numeric { 2 } else { 1 })
        }
    }
}
