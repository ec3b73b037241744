//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Training (criterion 8) takes up to half an hour per variant;
//! set `KLAB_SKIP_TRAINING=1` to skip it during development.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use klab::analysis::{prediction_inconsistency, stochasticity_metrics};
use klab::attention::{linear_kernel_attention, stabilize};
use klab::experiments::bench::{run_scaling_bench, BenchConfig};
use klab::experiments::checks::{kernel_check, mse_check, KernelCheckConfig, MseCheckConfig};
use klab::experiments::sparsity::{encode_batch, generate_sparsity_dataset, SparsitySpec};
use klab::experiments::train::{run_sparsity_experiment, SparsityRun, SparsityTrainConfig};
use klab::experiments::{gradient_statistics, Dataset};
use klab::featmap::{FeatureKind, FeatureMapSpec, Projection};
use klab::model::{Encoder, EncoderConfig, Pooling, Positional, TrainConfig, Trainer, Variant};
use klab::spectral::{
    generator_sample, gmm_sample, FastFoodParams, GeneratorParams, GmmParams, Learnable,
    SamplerKind,
};
use klab::tensor::gradcheck::max_relative_error;
use klab::tensor::DenseArray;
use klab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const SKIP_ENV: &str = "KLAB_SKIP_TRAINING";

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn all_variants() -> Vec<Variant> {
    let mut v = Variant::KERNELIZED.to_vec();
    v.push(Variant::Softmax);
    v
}

fn normal(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> DenseArray {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    DenseArray::new([rows, cols], data).unwrap()
}

/// Frequencies from each sampler with random parameters, as a fast
/// projection for the library and an explicit matrix for the oracle.
fn draw_projection(
    sampler: SamplerKind,
    d: usize,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Box<dyn Projection>, DenseArray)> {
    Ok(match sampler {
        SamplerKind::Gmm => {
            let means = normal(2, d, 0.3, rng);
            let scales = (0..2).map(|_| normal(d, d, 0.5, rng)).collect();
            let omega = gmm_sample(&GmmParams::new(means, scales)?, m, rng)?;
            let dense = omega.array().clone();
            (Box::new(omega), dense)
        }
        SamplerKind::FastFood => {
            let p = FastFoodParams::sample(d, m, 1.0, Learnable::ALL, rng)?;
            let dense = p.dense();
            (Box::new(p), dense)
        }
        SamplerKind::Generative => {
            let omega = generator_sample(&GeneratorParams::random(d, rng), m, rng)?;
            let dense = omega.array().clone();
            (Box::new(omega), dense)
        }
    })
}

/// Quadratic-form attention with the kernel estimate written out per
/// frequency: `(1/M) Σ cos(ωᵀ(q−k))` or `(1/M) Σ exp(ωᵀ(q+k) − ‖q‖² − ‖k‖²)`.
fn quadratic_oracle(
    q: &DenseArray,
    k: &DenseArray,
    v: &DenseArray,
    omega: &DenseArray,
    kind: FeatureKind,
    eps: f64,
) -> Vec<f64> {
    let (l, d) = (q.rows(), q.cols());
    let dv = v.cols();
    let m = omega.rows();
    let sq = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>();
    let kappa = |qi: &[f64], kj: &[f64]| {
        (0..m)
            .map(|r| {
                let w = omega.row(r);
                match kind {
                    FeatureKind::Rks => (0..d).map(|c| w[c] * (qi[c] - kj[c])).sum::<f64>().cos(),
                    FeatureKind::Prf => {
                        ((0..d).map(|c| w[c] * (qi[c] + kj[c])).sum::<f64>() - sq(qi) - sq(kj))
                            .exp()
                    }
                }
            })
            .sum::<f64>()
            / m as f64
    };
    let mut out = vec![0.0; l * dv];
    for i in 0..l {
        let weights: Vec<f64> = (0..l).map(|j| kappa(q.row(i), k.row(j))).collect();
        let den = stabilize(weights.iter().sum(), eps);
        for (j, w) in weights.iter().enumerate() {
            for c in 0..dv {
                out[i * dv + c] += w * v.row(j)[c] / den;
            }
        }
    }
    out
}

fn oracle_equivalence() -> Result<Outcome> {
    let (d, m, instances) = (8, 32, 50);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for variant in Variant::KERNELIZED {
        let Variant::Kernel { sampler, features } = variant else {
            unreachable!()
        };
        let spec = FeatureMapSpec::new(features, m);
        for l in [8, 64, 128] {
            for _ in 0..instances {
                let (proj, dense) = draw_projection(sampler, d, m, &mut rng)?;
                let q = normal(l, d, 0.4, &mut rng);
                let k = normal(l, d, 0.4, &mut rng);
                let v = normal(l, d, 1.0, &mut rng);
                let fast = linear_kernel_attention(&q, &k, &v, &spec, proj.as_ref())?.values;
                let want = quadratic_oracle(&q, &k, &v, &dense, features, spec.eps);
                for (a, b) in fast.data().iter().zip(&want) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    Ok(verdict(
        worst <= 1e-6,
        format!("max abs difference {worst:.2e} over 6 variants x 3 lengths x {instances}"),
    ))
}

fn kernel_approximation() -> Result<(Outcome, Outcome)> {
    let report = kernel_check(&KernelCheckConfig::default())?;
    let z = &report.z_tolerance;
    let stat = verdict(
        report.failures(FeatureKind::Rks) == 0 && report.failures(FeatureKind::Prf) == 0,
        format!(
            "max z rks {:.2}, prf {:.2} (limit {z}); failures rks {}, prf {}",
            report.max_z(FeatureKind::Rks),
            report.max_z(FeatureKind::Prf),
            report.failures(FeatureKind::Rks),
            report.failures(FeatureKind::Prf)
        ),
    );
    let exact = verdict(
        report.self_similarity_max_error <= 1e-12,
        format!(
            "max |k(x,x) - 1| = {:.2e}",
            report.self_similarity_max_error
        ),
    );
    Ok((stat, exact))
}

fn mse_closed_forms() -> Result<(Outcome, Outcome)> {
    let report = mse_check(&MseCheckConfig::default())?;
    let worst = |f: fn(&klab::experiments::checks::MseSetCheck) -> f64| {
        report.sets.iter().map(f).fold(0.0, f64::max)
    };
    let bound = 2.0 / report.m as f64;
    let max_rks = report.sets.iter().map(|s| s.rks_closed).fold(0.0, f64::max);
    let rks = verdict(
        report.rks_passed(),
        format!(
            "max rel error {:.4} (limit 0.03), max closed form {max_rks:.4} (bound {bound})",
            worst(|s| s.rks_rel_error())
        ),
    );
    let prf = verdict(
        report.prf_passed() && report.unsquared_rejected(),
        format!(
            "squared-norm max rel error {:.4}; un-squared max rel error {:.4}, rejected: {}",
            worst(|s| s.prf_rel_error()),
            worst(|s| s.prf_unsquared_rel_error()),
            report.unsquared_rejected()
        ),
    );
    Ok((rks, prf))
}

fn fastfood_apply() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for d in [4usize, 8, 16, 64] {
        let p = FastFoodParams::sample(d, 2 * d, 1.3, Learnable::ALL, &mut rng)?;
        let v = common::dense_oracle(&p);
        for _ in 0..10 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            for (row, f) in v.iter().zip(p.apply(&x)?) {
                let want: f64 = row.iter().zip(&x).map(|(a, b)| a * b).sum();
                worst = worst.max((want - f).abs());
            }
        }
    }
    let identity = FastFoodParams::identity(4, 4)?.dense();
    let two_i = DenseArray::eye(4).map(|v| 2.0 * v);
    let hand = identity == two_i;
    Ok(verdict(
        worst <= 1e-10 && hand,
        format!("max abs difference {worst:.2e} at d in {{4,8,16,64}}; identity factors give 2I: {hand}"),
    ))
}

fn random_config(variant: Variant, rng: &mut ChaCha8Rng) -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        d_model: 8,
        d_ff: 8,
        heads: 2,
        d_head: 4,
        variant,
        num_samples: 8,
        gmm_components: rng.random_range(1..=2),
        fastfood_learnable: ["s", "g", "b", "sg", "sgb"][rng.random_range(0..5)]
            .parse()
            .unwrap(),
        generator_scaled_output: rng.random(),
        positional: if rng.random() {
            Positional::Learnable
        } else {
            Positional::Sinusoidal
        },
        pooling: if rng.random() {
            Pooling::First
        } else {
            Pooling::Cls
        },
        dropout: 0.0,
        max_len: 6,
        classifier_hidden: 6,
        ..EncoderConfig::default()
    }
}

fn gradient_correctness() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut configs = 0;
    for variant in all_variants() {
        for _ in 0..3 {
            let cfg = random_config(variant, &mut rng);
            let enc = Encoder::new(cfg.clone(), &mut rng)?;
            let mut x = DenseArray::zeros([2 * 4, 3]);
            for r in 0..8 {
                x.set(r, rng.random_range(0..2), 1.0);
                x.set(r, 2, f64::from(u8::from(rng.random::<bool>())));
            }
            let labels = [rng.random_range(0..9), rng.random_range(0..9)];
            let ids: Vec<usize> = (0..enc.params.len())
                .filter(|&i| enc.params.is_trainable(i))
                .collect();
            let inputs: Vec<DenseArray> = ids.iter().map(|&i| enc.params.get(i).clone()).collect();
            let err = max_relative_error(&inputs, |tape, v| {
                let mut vars = enc.params.leaves(tape);
                for (&i, &var) in ids.iter().zip(v) {
                    vars[i] = var;
                }
                enc.forward(tape, &vars, &x, 2, None)?
                    .logits
                    .cross_entropy(&labels)
            })?;
            configs += 1;
            if err > worst {
                worst = err;
                worst_at = format!("{variant} {:?}/{:?}", cfg.positional, cfg.pooling);
            }
        }
    }
    Ok(verdict(
        worst < 1e-3 && configs >= 20,
        format!("{configs} configurations, all trainable parameters; max relative error {worst:.2e} ({worst_at})"),
    ))
}

fn desk_scale(variant: Variant) -> SparsityTrainConfig {
    let mut cfg = SparsityTrainConfig::desk_scale();
    cfg.encoder.variant = variant;
    cfg
}

fn sparsity_training(data: &Dataset) -> Result<(Outcome, Vec<(Variant, SparsityRun)>)> {
    let mut runs = Vec::new();
    let mut lines = Vec::new();
    let mut ok = true;
    for variant in all_variants() {
        let run = run_sparsity_experiment(&desk_scale(variant), data)?;
        let reached = run.curve.iter().find(|p| p.val_accuracy >= 0.95);
        let pass =
            reached.is_some_and(|p| p.step <= 30_000) && !run.timed_out && run.seconds <= 1800.0;
        ok &= pass;
        let line = match reached {
            Some(p) => format!(
                "{variant} {:.3} at step {} in {:.0}s",
                p.val_accuracy, p.step, run.seconds
            ),
            None => format!(
                "{variant} best {:.3} after {} steps in {:.0}s",
                run.best_accuracy, run.steps, run.seconds
            ),
        };
        eprintln!("  {line}");
        lines.push(line);
        runs.push((variant, run));
    }
    Ok((verdict(ok, lines.join("; ")), runs))
}

fn gradient_statistics_check(
    data: &Dataset,
    runs: Option<&[(Variant, SparsityRun)]>,
) -> Result<Outcome> {
    let mut exact = true;
    let mut details = Vec::new();
    for features in [FeatureKind::Rks, FeatureKind::Prf] {
        let enc = EncoderConfig {
            variant: Variant::kernel(SamplerKind::Gmm, features),
            gmm_init_scale: 0.0,
            ..EncoderConfig::default()
        };
        let t = Trainer::new(enc, &TrainConfig::default())?;
        let stats = gradient_statistics(&t, &data.valid, 8, 5, 0)?;
        exact &= stats.std == 0.0;
        details.push(format!("zero-variance gmm-{features} std {}", stats.std));
    }
    let at_40 = |features: FeatureKind| -> Result<Option<f64>> {
        let variant = Variant::kernel(SamplerKind::Gmm, features);
        let Some((_, run)) = runs.into_iter().flatten().find(|(v, _)| *v == variant) else {
            return Ok(None);
        };
        let Some(c) = run.checkpoints.iter().find(|c| c.threshold == 0.4) else {
            return Ok(None);
        };
        let cfg = desk_scale(variant);
        let t = Trainer::restore(cfg.encoder, &cfg.train, &c.checkpoint)?;
        Ok(Some(gradient_statistics(&t, &data.valid, 50, 50, 0)?.std))
    };
    match (at_40(FeatureKind::Prf)?, at_40(FeatureKind::Rks)?) {
        (Some(prf), Some(rks)) => details.push(format!(
            "40% checkpoint std gmm-prf {prf:.3e}, gmm-rks {rks:.3e}, ratio {:.3} (reported, not gated)",
            prf / rks
        )),
        _ => details.push("40% checkpoint ratio unavailable without training runs".into()),
    }
    Ok(verdict(exact, details.join("; ")))
}

fn scaling_bench() -> Result<Outcome> {
    let results = run_scaling_bench(&BenchConfig::default())?;
    let mut ok = true;
    let mut parts = Vec::new();
    for variant in all_variants() {
        let rows: Vec<_> = results.iter().filter(|r| r.variant == variant).collect();
        let time = |l: usize| {
            rows.iter()
                .find(|r| r.length == l)
                .and_then(|r| r.time_per_step)
        };
        let (Some(t1k), Some(t4k)) = (time(1024), time(4096)) else {
            ok = false;
            parts.push(format!("{variant}: missing timing"));
            continue;
        };
        let ratio = t4k / t1k;
        let aux: Vec<f64> = rows.iter().map(|r| r.peak_aux_bytes as f64).collect();
        let (lo, hi) = aux
            .iter()
            .fold((f64::MAX, 0.0f64), |(lo, hi), &a| (lo.min(a), hi.max(a)));
        if variant == Variant::Softmax {
            ok &= ratio >= 10.0;
            parts.push(format!("{variant} ratio {ratio:.2}"));
        } else {
            let flat = hi <= 1.1 * lo;
            ok &= ratio <= 6.0 && flat;
            parts.push(format!(
                "{variant} ratio {ratio:.2} aux {:.0}..{:.0}B",
                lo, hi
            ));
        }
    }
    Ok(verdict(ok, parts.join("; ")))
}

fn stochasticity() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = EncoderConfig {
        variant: Variant::kernel(SamplerKind::Gmm, FeatureKind::Rks),
        gmm_init_scale: 0.0,
        num_classes: 2,
        dropout: 0.0,
        ..EncoderConfig::default()
    };
    let mut enc = Encoder::new(cfg, &mut rng)?;
    let data = generate_sparsity_dataset(&SparsitySpec {
        n: 100,
        ..SparsitySpec::default()
    })?;
    let examples = &data.valid;
    let labels: Vec<bool> = examples.iter().map(|e| e.label > 0).collect();
    let report = stochasticity_metrics(examples, &labels, 10, |e, _| {
        enc.resample(&mut rng);
        let (x, _) = encode_batch([e])?;
        let logits = enc.logits(&x, 1, 1)?;
        Ok(logits.get(0, 1) - logits.get(0, 0))
    })?;
    let zero_rsd = report.rsd.iter().all(|r| r.value == 0.0);
    let zero_pi = report.pi.iter().all(|&p| p == 0);
    let agv_one = report.agv == 1.0;
    // Positives 3 of 5 -> 2; zero is not positive -> 1 of 3; none -> 0; even split -> 2.
    let hand = [
        (vec![1.0, -1.0, 2.0, 3.0, -0.5], 2),
        (vec![0.0, 0.0, 1.0], 1),
        (vec![-1.0, -2.0], 0),
        (vec![1.0, -1.0, 1.0, -1.0], 2),
    ];
    let hand_ok = hand
        .iter()
        .all(|(v, want)| prediction_inconsistency(v) == *want);
    Ok(verdict(
        zero_rsd && zero_pi && agv_one && hand_ok,
        format!(
            "{} examples x {} runs: RSD all zero {zero_rsd}, PI all zero {zero_pi}, AGV {}; hand counts {hand_ok}",
            examples.len(),
            report.runs,
            report.agv
        ),
    ))
}

struct Harness {
    failed: usize,
}

impl Harness {
    fn report(
        &mut self,
        n: u32,
        name: &str,
        outcome: Result<Outcome>,
        elapsed: Duration,
        limit: Option<Duration>,
    ) {
        let secs = elapsed.as_secs_f64();
        let (tag, detail) = match outcome {
            Ok(Outcome::Pass(d)) if limit.is_none_or(|l| elapsed <= l) => ("PASS", d),
            Ok(Outcome::Pass(d)) => (
                "FAIL",
                format!("{d}; over the {}s limit", limit.unwrap().as_secs()),
            ),
            Ok(Outcome::Fail(d)) => ("FAIL", d),
            Ok(Outcome::Skip(d)) => ("SKIP", d),
            Err(e) => ("FAIL", format!("error: {e}")),
        };
        if tag == "FAIL" {
            self.failed += 1;
        }
        println!("{tag} {n:>2} {name}: {detail} ({secs:.1}s)");
        std::io::stdout().flush().ok();
    }

    fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
        let start = Instant::now();
        let out = f();
        (out, start.elapsed())
    }
}

fn main() {
    let mut h = Harness { failed: 0 };
    let minute = Duration::from_secs(60);

    let (r, t) = Harness::timed(oracle_equivalence);
    h.report(1, "oracle equivalence", r, t, Some(minute));

    let (r, t) = Harness::timed(kernel_approximation);
    match r {
        Ok((stat, exact)) => {
            h.report(2, "kernel approximation", Ok(stat), t, Some(minute));
            h.report(3, "trigonometric self-similarity", Ok(exact), t, None);
        }
        Err(e) => {
            let msg = e.to_string();
            h.report(2, "kernel approximation", Err(e), t, None);
            h.report(
                3,
                "trigonometric self-similarity",
                Ok(Outcome::Fail(msg)),
                t,
                None,
            );
        }
    }

    let (r, t) = Harness::timed(mse_closed_forms);
    let five = 5 * minute;
    match r {
        Ok((rks, prf)) => {
            h.report(4, "RKS mean squared error", Ok(rks), t, Some(five));
            h.report(5, "PRF mean squared error", Ok(prf), t, Some(five));
        }
        Err(e) => {
            let msg = e.to_string();
            h.report(4, "RKS mean squared error", Err(e), t, None);
            h.report(5, "PRF mean squared error", Ok(Outcome::Fail(msg)), t, None);
        }
    }

    let (r, t) = Harness::timed(fastfood_apply);
    h.report(6, "FastFood fast apply", r, t, None);

    let (r, t) = Harness::timed(gradient_correctness);
    h.report(7, "gradient correctness", r, t, None);

    let data = generate_sparsity_dataset(&SparsitySpec::default()).expect("default dataset");
    let mut runs = None;
    if std::env::var(SKIP_ENV).is_ok_and(|v| v == "1") {
        h.report(
            8,
            "synthetic sparsity training",
            Ok(Outcome::Skip(format!("{SKIP_ENV}=1"))),
            Duration::ZERO,
            None,
        );
    } else {
        let (r, t) = Harness::timed(|| sparsity_training(&data));
        let r = r.map(|(outcome, rs)| {
            runs = Some(rs);
            outcome
        });
        // Each run carries its own half-hour limit.
        h.report(8, "synthetic sparsity training", r, t, None);
    }

    let (r, t) = Harness::timed(|| gradient_statistics_check(&data, runs.as_deref()));
    h.report(9, "gradient statistics", r, t, None);

    let (r, t) = Harness::timed(scaling_bench);
    h.report(10, "scaling bench", r, t, Some(10 * minute));

    let (r, t) = Harness::timed(stochasticity);
    h.report(11, "stochasticity metrics", r, t, None);

    if h.failed > 0 {
        println!("{} criteria failed", h.failed);
        std::process::exit(1);
    }
    println!("all criteria passed");
}
