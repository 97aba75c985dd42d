//! `ahmf`: generate synthetic data, train, evaluate, gradient-check and
//! inspect the long-term memory bank.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ahmf_core::checkpoint::{self, Checkpoint};
use ahmf_core::config::RunConfig;
use ahmf_core::data::format::{read_bytes, write_atomic, write_tensor};
use ahmf_core::data::manifest::{build_manifest, load_split, write_sample, Manifest, Split};
use ahmf_core::data::synth::generate;
use ahmf_core::error::ErrorClass;
use ahmf_core::metrics::{self, KldForm};
use ahmf_core::numerics::Tensor;
use ahmf_core::training::{evaluate, history_csv, DomainData, Stop, Trainer};
use ahmf_core::{suite, Error};
use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info, warn};

const CHECKPOINT_NAME: &str = "checkpoint.bin";
const HISTORY_NAME: &str = "history.csv";
const RESOLVED_NAME: &str = "config.resolved";

#[derive(Parser)]
#[command(name = "ahmf", version, about = "Driver-attention model with hybrid memory fusion")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-domain dataset and its manifest.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Sequences per domain (overrides data.per_domain).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on the train split, validating on the val split.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// full, no_hmf, no_sa or no_ca.
        #[arg(long)]
        ablation: Option<String>,
        /// after_hmf or after_ca.
        #[arg(long)]
        update_position: Option<String>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Where to write the CSV report.
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scope::Ops)]
        scope: Scope,
        #[arg(long, default_value_t = 10)]
        seed: u64,
        /// Check a deliberately wrong backward pass (negative control).
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Dump the long-term memory bank of a checkpoint.
    InspectMemory {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scope {
    Ops,
    Model,
}

/// Failure carrying its exit code.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e.class() {
            ErrorClass::Config => 2,
            ErrorClass::Data => 3,
            ErrorClass::Numeric => 4,
        };
        Failure { code, msg: e.to_string() }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::GenData { config, out, n, seed } => gen_data(config.as_deref(), &out, n, seed),
        Cmd::Train { config, data, out, ablation, update_position, seq_len, max_epochs, max_steps, seed, resume } => {
            let o = Overrides { ablation, update_position, seq_len, max_epochs, max_steps, seed };
            train(config.as_deref(), &data, &out, o, resume)
        }
        Cmd::Eval { checkpoint, data, split, report } => eval(&checkpoint, &data, &split, &report),
        Cmd::Gradcheck { scope, seed, inject_fault } => gradcheck(scope, seed, inject_fault),
        Cmd::InspectMemory { checkpoint, out } => inspect_memory(&checkpoint, &out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            error!("{}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn has_key(text: &str, key: &str) -> bool {
    text.lines().any(|l| !l.trim_start().starts_with('#') && l.split_once('=').is_some_and(|(k, _)| k.trim() == key))
}

/// Reads the config file (or defaults). Seed precedence: flag, config file,
/// `AHMF_SEED`, 0.
fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let text = match path {
        Some(p) => String::from_utf8(read_bytes(p)?)
            .map_err(|_| Failure::from(Error::Config(format!("{} is not UTF-8", p.display()))))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse(&text)?;
    let seed = match seed {
        Some(s) => Some(s),
        None if has_key(&text, "seed") => None,
        None => match std::env::var("AHMF_SEED") {
            Ok(v) => Some(v.trim().parse().map_err(|_| Error::Config(format!("AHMF_SEED `{v}` is not an integer")))?),
            Err(_) => None,
        },
    };
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string())?;
    }
    Ok(cfg)
}

fn echo(cfg: &RunConfig) {
    info!("resolved config:\n{}", cfg.resolved().trim_end());
}

fn create_dir(p: &Path) -> Outcome {
    fs::create_dir_all(p).map_err(|e| Error::Io { path: p.to_path_buf(), source: e })?;
    Ok(())
}

fn gen_data(config: Option<&Path>, out: &Path, n: Option<usize>, seed: Option<u64>) -> Outcome {
    let mut cfg = load_config(config, seed)?;
    if let Some(n) = n {
        cfg.set("data.per_domain", &n.to_string())?;
    }
    cfg.validate()?;
    echo(&cfg);
    create_dir(out)?;
    let mut total = 0;
    for (i, (id, rule)) in cfg.domains.iter().enumerate() {
        let samples = generate(&cfg.scene(i), id, cfg.data.per_domain)?;
        for s in &samples {
            write_sample(out, s)?;
        }
        info!("domain {id} ({rule}): {} sequences", samples.len());
        total += samples.len();
    }
    let manifest = build_manifest(out, cfg.seed)?;
    manifest.write(out)?;
    write_atomic(&out.join(RESOLVED_NAME), cfg.resolved().as_bytes())?;
    info!("wrote {total} sequences and manifest to {}", out.display());
    Ok(())
}

struct Overrides {
    ablation: Option<String>,
    update_position: Option<String>,
    seq_len: Option<usize>,
    max_epochs: Option<usize>,
    max_steps: Option<usize>,
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<(), Failure> {
        if let Some(a) = &self.ablation {
            cfg.set("model.ablation", a)?;
        }
        if let Some(p) = &self.update_position {
            cfg.set("memory.update_position", p)?;
        }
        if let Some(t) = self.seq_len {
            cfg.set("train.seq_len", &t.to_string())?;
        }
        if let Some(e) = self.max_epochs {
            cfg.set("train.max_epochs", &e.to_string())?;
        }
        if let Some(s) = self.max_steps {
            cfg.set("train.max_steps", &s.to_string())?;
        }
        cfg.validate()?;
        Ok(())
    }
}

fn save(out: &Path, c: &Checkpoint) -> Result<(), Error> {
    write_atomic(&out.join(CHECKPOINT_NAME), &c.encode()?)
}

fn train(config: Option<&Path>, data: &Path, out: &Path, o: Overrides, resume: bool) -> Outcome {
    let (cfg, mut trainer) = if resume {
        let ck = Checkpoint::decode(&read_bytes(&out.join(CHECKPOINT_NAME))?)?;
        let (mut cfg, mut t) = checkpoint::load_trainer(&ck)?;
        if o.seed.is_some() || o.ablation.is_some() || o.update_position.is_some() {
            return Err(Error::Usage("--resume keeps the checkpoint's seed and model; drop --seed, --ablation and --update-position".into()).into());
        }
        o.apply(&mut cfg)?;
        t.cfg = cfg.train.clone();
        info!("resuming at epoch {} step {}", t.epoch, t.step);
        (cfg, t)
    } else {
        let mut cfg = load_config(config, o.seed)?;
        o.apply(&mut cfg)?;
        let t = Trainer::new(cfg.train.clone(), cfg.model.clone())?;
        (cfg, t)
    };
    echo(&cfg);
    create_dir(out)?;
    write_atomic(&out.join(RESOLVED_NAME), cfg.resolved().as_bytes())?;

    let manifest = Manifest::read(data)?;
    let train_set = load_split(data, &manifest, Split::Train)?;
    let val_set = load_split(data, &manifest, Split::Val)?;
    let grouped = DomainData::group(&cfg.model.domains, &train_set, cfg.train.seq_len)?;
    info!("{} parameters, {} training sequences", trainer.model.store.total_elements(), train_set.len());

    if !resume {
        save(out, &checkpoint::save_trainer(&cfg, &trainer))?;
    }
    if cfg.train.max_epochs == 0 {
        info!("max_epochs is 0, wrote the initial checkpoint only");
        write_atomic(&out.join(HISTORY_NAME), history_csv(&trainer.history)?.as_bytes())?;
        return Ok(());
    }

    let mut save_err = None;
    let res = trainer.fit(&grouped, &val_set, |t| {
        let r = save(out, &checkpoint::save_trainer(&cfg, t))
            .and_then(|_| history_csv(&t.history))
            .and_then(|h| write_atomic(&out.join(HISTORY_NAME), h.as_bytes()));
        if let Err(e) = r {
            save_err.get_or_insert(e);
        }
    });
    if let Some(e) = save_err {
        return Err(e.into());
    }
    match res {
        Ok(stop) => {
            let why = match stop {
                Stop::MaxEpochs => "max epochs",
                Stop::MaxSteps => "max steps",
                Stop::EarlyStop => "early stop",
            };
            info!("stopped ({why}) after {} epochs, {} steps", trainer.epoch, trainer.step);
            Ok(())
        }
        Err(e) => {
            if matches!(e, Error::NonFinite(_)) {
                warn!("training aborted; {} holds the last completed epoch", out.join(CHECKPOINT_NAME).display());
            }
            Err(e.into())
        }
    }
}

fn eval(ckpt: &Path, data: &Path, split: &str, report: &Path) -> Outcome {
    let split: Split = split.parse()?;
    let ck = Checkpoint::decode(&read_bytes(ckpt)?)?;
    let (cfg, model) = checkpoint::load_model(&ck)?;
    echo(&cfg);
    let manifest = Manifest::read(data)?;
    let samples = load_split(data, &manifest, split)?;
    let rows = evaluate(&model, &samples, KldForm::Printed)?;
    let summary = metrics::report(&rows);
    println!("split {split}");
    print!("{}", metrics::report_text(&summary));
    if let Some(dir) = report.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_atomic(report, metrics::report_csv(&summary)?.as_bytes())?;
    if summary.is_empty() {
        println!("split {split} is empty: no scores (absent)");
        return Err(Error::Validation(format!("split {split} has no samples")).into());
    }
    Ok(())
}

fn gradcheck(scope: Scope, seed: u64, inject_fault: bool) -> Outcome {
    let reports = if inject_fault {
        vec![suite::injected_fault(seed)?]
    } else {
        match scope {
            Scope::Ops => suite::op_suite(seed)?,
            Scope::Model => vec![suite::model_suite(seed)?],
        }
    };
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} checks, {failed} failed", reports.len());
    if failed > 0 {
        return Err(Failure { code: 4, msg: format!("{failed} gradient checks failed") });
    }
    Ok(())
}

fn inspect_memory(ckpt: &Path, out: &Path) -> Outcome {
    let ck = Checkpoint::decode(&read_bytes(ckpt)?)?;
    let (cfg, model) = checkpoint::load_model(&ck)?;
    echo(&cfg);
    let Some(bank) = model.bank() else {
        println!("no bank present (ablation {})", cfg.model.ablation);
        return Ok(());
    };
    create_dir(out)?;
    let [slots, d] = [bank.shape()[0], bank.shape()[1]];
    write_tensor(&out.join("bank.tsr"), bank)?;
    let std = cfg.model.memory.bank_init_std;
    let mut text = format!("slots {slots}\ndim {d}\ninit_std {std}\nexpected_init_norm {:.6}\n", std * (d as f64).sqrt());
    let mut norms = Vec::with_capacity(slots);
    for s in 0..slots {
        let row = Tensor::new(&[d], bank.data()[s * d..(s + 1) * d].to_vec())?;
        write_tensor(&out.join(format!("slot_{s:02}.tsr")), &row)?;
        let n = row.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        let mean = row.data().iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let sd = (row.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64).sqrt();
        text.push_str(&format!("slot {s} norm {n:.6} mean {mean:.6} std {sd:.6}\n"));
        norms.push(n);
    }
    text.push_str(&format!("mean_norm {:.6}\n", norms.iter().sum::<f64>() / slots as f64));
    write_atomic(&out.join("norms.txt"), text.as_bytes())?;
    print!("{text}");
    Ok(())
}
