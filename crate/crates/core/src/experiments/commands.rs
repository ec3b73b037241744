//! The experiment subcommands: each reads one flat config, produces result
//! records and reports whether its acceptance checks held.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use super::bench::{run_scaling_bench, BenchConfig};
use super::checks::{kernel_check, mse_check, KernelCheckConfig, MseCheckConfig};
use super::config::{encoder_config, train_config, Config, MODEL_KEYS};
use super::gradstats::{gradient_statistics, DEFAULT_DATAPOINTS, DEFAULT_REPETITIONS};
use super::results::{Record, RunInfo};
use super::sparsity::{generate_sparsity_dataset, SparsitySpec};
use super::train::{run_sparsity_experiment_with, SparsityTrainConfig};
use crate::analysis::covariance_eigenvalues;
use crate::error::{Error, Result};
use crate::featmap::FeatureKind;
use crate::model::{Checkpoint, EncoderConfig, TrainConfig, Trainer, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    KernelCheck,
    VerifyMse,
    TrainSynthetic,
    GradStats,
    Bench,
    Eigvals,
}

impl Command {
    pub const ALL: [Command; 6] = [
        Command::KernelCheck,
        Command::VerifyMse,
        Command::TrainSynthetic,
        Command::GradStats,
        Command::Bench,
        Command::Eigvals,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::KernelCheck => "kernel-check",
            Command::VerifyMse => "verify-mse",
            Command::TrainSynthetic => "train-synthetic",
            Command::GradStats => "grad-stats",
            Command::Bench => "bench",
            Command::Eigvals => "eigvals",
        }
    }

    /// Configuration keys the command reads; anything else is rejected.
    pub fn allowed_keys(self) -> Vec<&'static str> {
        let mut keys = vec!["seed"];
        match self {
            Command::KernelCheck => keys.push("kernel.*"),
            Command::VerifyMse => keys.push("mse.*"),
            Command::TrainSynthetic => {
                keys.extend(MODEL_KEYS.iter().copied().chain(["train.*", "data.*"]))
            }
            Command::GradStats => keys.extend(
                MODEL_KEYS
                    .iter()
                    .copied()
                    .chain(["train.*", "data.*", "grad.*"]),
            ),
            Command::Bench => keys.push("bench.*"),
            Command::Eigvals => keys.push("eig.*"),
        }
        keys
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::config(format!("unknown command `{s}`")))
    }
}

/// Values given on the command line; they take precedence over both the
/// config file and the environment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lengths: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct CommandOutput {
    pub records: Vec<Record>,
    /// Whether the command's acceptance checks held.
    pub passed: bool,
    /// One-line human-readable outcome.
    pub summary: String,
}

/// Runs `cmd` on `cfg` after applying `overrides`. The config hash embedded
/// in the records covers the effective settings, including the seed.
pub fn run_command(cmd: Command, cfg: &Config, overrides: &Overrides) -> Result<CommandOutput> {
    cfg.check_keys(&cmd.allowed_keys())?;
    let mut cfg = cfg.clone();
    let seed = match overrides.seed {
        Some(s) => s,
        None => cfg.seed()?,
    };
    cfg.set("seed", seed);
    if let Some(lengths) = &overrides.lengths {
        if cmd != Command::Bench {
            return Err(Error::config(format!("--lengths does not apply to {cmd}")));
        }
        let list: Vec<String> = lengths.iter().map(usize::to_string).collect();
        cfg.set("bench.lengths", list.join(","));
    }
    let info = RunInfo {
        seed,
        config_hash: cfg.hash(),
    };
    match cmd {
        Command::KernelCheck => kernel_check_command(&cfg, &info),
        Command::VerifyMse => verify_mse_command(&cfg, &info),
        Command::TrainSynthetic => train_command(&cfg, &info),
        Command::GradStats => grad_stats_command(&cfg, &info),
        Command::Bench => bench_command(&cfg, &info),
        Command::Eigvals => eigvals_command(&cfg, &info),
    }
}

fn kernel_check_command(cfg: &Config, info: &RunInfo) -> Result<CommandOutput> {
    let d = KernelCheckConfig::default();
    let kc = KernelCheckConfig {
        dim: cfg.get_or("kernel.dim", d.dim)?,
        num_samples: cfg.get_or("kernel.num_samples", d.num_samples)?,
        pairs: cfg.get_or("kernel.pairs", d.pairs)?,
        half_width: cfg.get_or("kernel.half_width", d.half_width)?,
        z_tolerance: cfg.get_or("kernel.z_tolerance", d.z_tolerance)?,
        self_similarity_points: cfg
            .get_or("kernel.self_similarity_points", d.self_similarity_points)?,
        self_similarity_tolerance: cfg.get_or(
            "kernel.self_similarity_tolerance",
            d.self_similarity_tolerance,
        )?,
        seed: info.seed,
    };
    if kc.dim == 0 || kc.num_samples < 2 || kc.pairs == 0 {
        return Err(Error::config(
            "kernel check needs dim ≥ 1, num_samples ≥ 2 and pairs ≥ 1",
        ));
    }
    let r = kernel_check(&kc)?;
    let mut records = Vec::new();
    for (i, p) in r.pairs.iter().enumerate() {
        records.push(
            info.record(p.kind, i / 2, "z", p.z())
                .with("target", p.target)
                .with("estimate", p.estimate)
                .with("std_error", p.std_error),
        );
    }
    for kind in [FeatureKind::Rks, FeatureKind::Prf] {
        records.push(info.record(kind, kc.num_samples, "max_z", r.max_z(kind)));
        records.push(info.record(kind, kc.num_samples, "failures", r.failures(kind) as f64));
    }
    records.push(info.record(
        FeatureKind::Rks,
        0,
        "self_similarity_max_error",
        r.self_similarity_max_error,
    ));
    let summary = format!(
        "kernel-check: rks max z {:.2} ({} over), prf max z {:.2} ({} over), self-similarity error {:.1e}",
        r.max_z(FeatureKind::Rks),
        r.failures(FeatureKind::Rks),
        r.max_z(FeatureKind::Prf),
        r.failures(FeatureKind::Prf),
        r.self_similarity_max_error
    );
    Ok(CommandOutput {
        records,
        passed: r.passed(),
        summary,
    })
}

fn verify_mse_command(cfg: &Config, info: &RunInfo) -> Result<CommandOutput> {
    let d = MseCheckConfig::default();
    let mc = MseCheckConfig {
        dim: cfg.get_or("mse.dim", d.dim)?,
        m: cfg.get_or("mse.m", d.m)?,
        sets: cfg.get_or("mse.sets", d.sets)?,
        trials: cfg.get_or("mse.trials", d.trials)?,
        rel_tolerance: cfg.get_or("mse.rel_tolerance", d.rel_tolerance)?,
        seed: info.seed,
    };
    if mc.dim == 0 || mc.m == 0 || mc.sets == 0 {
        return Err(Error::config("MSE check needs positive dim, m and sets"));
    }
    let r = mse_check(&mc)?;
    let mut records = Vec::new();
    for (i, s) in r.sets.iter().enumerate() {
        records.push(
            info.record("rks", i, "mse_rel_error", s.rks_rel_error())
                .with("closed_form", s.rks_closed)
                .with("monte_carlo", s.rks_mc)
                .with("std_error", s.rks_std_error),
        );
        records.push(
            info.record("prf", i, "mse_rel_error", s.prf_rel_error())
                .with("closed_form", s.prf_closed)
                .with("monte_carlo", s.prf_mc)
                .with("std_error", s.prf_std_error),
        );
        records.push(
            info.record(
                "prf-unsquared",
                i,
                "mse_rel_error",
                s.prf_unsquared_rel_error(),
            )
            .with("closed_form", s.prf_unsquared),
        );
    }
    let worst =
        |f: fn(&super::checks::MseSetCheck) -> f64| r.sets.iter().map(f).fold(0.0, f64::max);
    let summary = format!(
        "verify-mse: worst rks rel error {:.4}, worst prf rel error {:.4}, un-squared form rejected: {}",
        worst(|s| s.rks_rel_error()),
        worst(|s| s.prf_rel_error()),
        r.unsquared_rejected()
    );
    Ok(CommandOutput {
        records,
        passed: r.passed(),
        summary,
    })
}

fn sparsity_spec(cfg: &Config, seed: u64) -> Result<SparsitySpec> {
    let d = SparsitySpec::default();
    let spec = SparsitySpec {
        p: cfg.get_or("data.p", d.p)?,
        len: cfg.get_or("data.len", d.len)?,
        n: cfg.get_or("data.n", d.n)?,
        train_fraction: cfg.get_or("data.train_fraction", d.train_fraction)?,
        seed: cfg.get_or("data.seed", seed)?,
        balance: cfg.get_or("data.balance", d.balance)?,
    };
    spec.validate()?;
    Ok(spec)
}

/// Encoder and optimizer settings with the desk-scale defaults underneath,
/// the command-line seed taking precedence.
fn model_and_train(cfg: &Config, seed: u64, len: usize) -> Result<(EncoderConfig, TrainConfig)> {
    let base = SparsityTrainConfig::desk_scale();
    let encoder = encoder_config(
        cfg,
        EncoderConfig {
            max_len: base.encoder.max_len.max(len),
            ..base.encoder
        },
    )?;
    let train = TrainConfig {
        seed,
        ..train_config(cfg, base.train)?
    };
    Ok((encoder, train))
}

fn train_command(cfg: &Config, info: &RunInfo) -> Result<CommandOutput> {
    let spec = sparsity_spec(cfg, info.seed)?;
    let (encoder, train) = model_and_train(cfg, info.seed, spec.len)?;
    let d = SparsityTrainConfig::desk_scale();
    let tc = SparsityTrainConfig {
        encoder,
        train,
        batch_size: cfg.get_or("train.batch_size", d.batch_size)?,
        max_steps: cfg.get_or("train.max_steps", d.max_steps)?,
        eval_every: cfg.get_or("train.eval_every", d.eval_every)?,
        target_accuracy: cfg.get("train.target_accuracy")?.or(d.target_accuracy),
        thresholds: cfg.get_list("train.thresholds")?.unwrap_or(d.thresholds),
        checkpoint_dir: cfg.get::<PathBuf>("train.checkpoint_dir")?,
        eval_chunk: cfg.get_or("train.eval_chunk", d.eval_chunk)?,
        time_limit: match cfg.get::<f64>("train.time_limit_seconds")? {
            Some(s) if s.is_finite() && s >= 0.0 => Some(std::time::Duration::from_secs_f64(s)),
            Some(s) => {
                return Err(Error::config(format!(
                    "train.time_limit_seconds={s} is not a duration"
                )))
            }
            None => d.time_limit,
        },
    };
    let data = generate_sparsity_dataset(&spec)?;
    let variant = tc.encoder.variant;
    let run = run_sparsity_experiment_with(&tc, &data, |_| {})?;
    let seconds = run.seconds;
    let len = spec.len;
    let mut records = Vec::new();
    for p in &run.curve {
        records.push(
            info.record(variant, len, "val_accuracy", p.val_accuracy)
                .with("step", p.step)
                .with("epoch", p.epoch)
                .with("train_loss", p.train_loss),
        );
    }
    for c in &run.checkpoints {
        let mut r = info
            .record(variant, len, "threshold_step", c.step as f64)
            .with("threshold", c.threshold)
            .with("accuracy", c.accuracy);
        if let Some(path) = &c.path {
            r = r.with("path", path.display().to_string());
        }
        records.push(r);
    }
    records.push(info.record(variant, len, "final_accuracy", run.final_accuracy));
    records.push(info.record(variant, len, "best_accuracy", run.best_accuracy));
    records.push(info.record(variant, len, "steps", run.steps as f64));
    records.push(info.record(variant, len, "seconds", seconds));
    records.push(info.record(
        variant,
        len,
        "near_zero_denominators",
        run.trainer.near_zero_denominators() as f64,
    ));
    if let Some(div) = &run.diverged {
        records.push(
            info.record(variant, len, "diverged_at_step", div.step as f64)
                .with("message", div.message.clone()),
        );
    }
    let target_met = tc.target_accuracy.is_none_or(|t| run.best_accuracy >= t);
    let summary = format!(
        "train-synthetic: {variant} best accuracy {:.4} after {} steps in {:.0}s{}{}",
        run.best_accuracy,
        run.steps,
        seconds,
        if run.timed_out {
            " (time limit reached)"
        } else {
            ""
        },
        match &run.diverged {
            Some(d) => format!(", diverged at step {}: {}", d.step, d.message),
            None => String::new(),
        }
    );
    Ok(CommandOutput {
        records,
        passed: run.diverged.is_none() && target_met,
        summary,
    })
}

fn grad_stats_command(cfg: &Config, info: &RunInfo) -> Result<CommandOutput> {
    let path: PathBuf = cfg
        .get("grad.checkpoint")?
        .ok_or_else(|| Error::config("grad-stats needs `grad.checkpoint`"))?;
    let spec = sparsity_spec(cfg, info.seed)?;
    let (encoder, train) = model_and_train(cfg, info.seed, spec.len)?;
    let variant = encoder.variant;
    let ckpt = Checkpoint::load(&path)?;
    let trainer = Trainer::restore(encoder, &train, &ckpt)?;
    let data = generate_sparsity_dataset(&spec)?;
    let datapoints = cfg.get_or("grad.datapoints", DEFAULT_DATAPOINTS)?;
    let repetitions = cfg.get_or("grad.repetitions", DEFAULT_REPETITIONS)?;
    let s = gradient_statistics(
        &trainer,
        &data.valid,
        datapoints,
        repetitions,
        cfg.get_or("grad.seed", info.seed)?,
    )?;
    let ckpt_name = path.display().to_string();
    let records = vec![
        info.record(variant, spec.len, "grad_abs_mean", s.abs_mean)
            .with("checkpoint", ckpt_name.clone())
            .with("step", ckpt.step),
        info.record(variant, spec.len, "grad_std", s.std)
            .with("checkpoint", ckpt_name)
            .with("step", ckpt.step),
    ];
    Ok(CommandOutput {
        records,
        passed: true,
        summary: format!(
            "grad-stats: {variant} at step {}: abs-mean {:.3e}, std {:.3e} over {} neurons",
            ckpt.step, s.abs_mean, s.std, s.neurons
        ),
    })
}

fn bench_command(cfg: &Config, info: &RunInfo) -> Result<CommandOutput> {
    let d = BenchConfig::default();
    let bc = BenchConfig {
        variants: cfg
            .get_list::<Variant>("bench.variants")?
            .unwrap_or(d.variants),
        lengths: cfg.get_list("bench.lengths")?.unwrap_or(d.lengths),
        trials: cfg.get_or("bench.trials", d.trials)?,
        heads: cfg.get_or("bench.heads", d.heads)?,
        d_qk: cfg.get_or("bench.d_qk", d.d_qk)?,
        d_v: cfg.get_or("bench.d_v", d.d_v)?,
        num_samples: cfg.get_or("bench.num_samples", d.num_samples)?,
        memory_budget: cfg.get("bench.memory_budget")?,
        seed: info.seed,
    };
    let rows = run_scaling_bench(&bc)?;
    let mut failures = 0;
    let records = rows
        .iter()
        .map(|r| {
            let rec = match (&r.failure, r.time_per_step) {
                (None, Some(t)) => info.record(r.variant, r.length, "time_per_step", t),
                (failure, _) => {
                    failures += 1;
                    info.record(r.variant, r.length, "failed", 1.0)
                        .with("failure", failure.clone().unwrap_or_default())
                }
            };
            rec.with("peak_aux_bytes", r.peak_aux_bytes as u64)
                .with("trials", r.steps)
        })
        .collect();
    let rss = super::bench::os_peak_rss_kb()
        .map_or(String::new(), |kb| format!(", process peak RSS {kb} kB"));
    Ok(CommandOutput {
        records,
        passed: true,
        summary: format!("bench: {} rows, {failures} failed{rss}", rows.len()),
    })
}

/// Scale matrices of the mixture sampler, by parameter name.
fn gmm_scales(ckpt: &Checkpoint) -> Vec<(&str, &crate::tensor::DenseArray)> {
    ckpt.arrays
        .iter()
        .filter_map(|(name, a)| {
            let param = name.strip_prefix("param/")?;
            let (_, last) = param.rsplit_once('.')?;
            (param.contains(".gmm.") && last.starts_with('s')).then_some((param, a))
        })
        .collect()
}

fn eigvals_command(cfg: &Config, info: &RunInfo) -> Result<CommandOutput> {
    let path: PathBuf = cfg
        .get("eig.checkpoint")?
        .ok_or_else(|| Error::config("eigvals needs `eig.checkpoint`"))?;
    let floor: f64 = cfg.get_or("eig.floor", -1e-12)?;
    let ckpt = Checkpoint::load(&path)?;
    let scales = gmm_scales(&ckpt);
    if scales.is_empty() {
        return Err(Error::config(format!(
            "{} holds no mixture scale matrices",
            path.display()
        )));
    }
    let mut records = Vec::new();
    let mut all = Vec::new();
    for (name, s) in scales {
        for (i, v) in covariance_eigenvalues(s)?.into_iter().enumerate() {
            records.push(
                info.record(name, i, "eigenvalue", v)
                    .with("step", ckpt.step),
            );
            all.push(v);
        }
    }
    let min = all.iter().cloned().fold(f64::INFINITY, f64::min);
    let below_one = all.iter().filter(|&&v| v < 1.0).count();
    Ok(CommandOutput {
        records,
        passed: min >= floor,
        summary: format!(
            "eigvals: {} eigenvalues, {below_one} below 1, smallest {min:.3e}",
            all.len()
        ),
    })
}
