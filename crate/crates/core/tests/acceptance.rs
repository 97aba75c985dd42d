//! Acceptance run. Prints one PASS/FAIL line per criterion; exits nonzero
//! when a criterion fails that is not listed in `KNOWN_FAILURES`.
//!
//! Tolerances and budgets are pinned below.

use std::time::{Duration, Instant};

use ahmf_core::checkpoint::{self, Checkpoint};
use ahmf_core::config::RunConfig;
use ahmf_core::data::format::{decode_tensor, encode_tensor};
use ahmf_core::data::manifest::Loaded;
use ahmf_core::data::synth::generate;
use ahmf_core::encoder::{spatial_attention, Conv, SpatialParams};
use ahmf_core::memory::{channel_attention, mhca, ChannelAttentionForm, MhcaOptions, MhcaParams};
use ahmf_core::metrics::{self, KldForm, MetricsRow, DEFAULT_EPS};
use ahmf_core::model::Ablation;
use ahmf_core::numerics::{Tape, Tensor};
use ahmf_core::params::ParamStore;
use ahmf_core::suite;
use ahmf_core::training::{early_stop, evaluate, lr_at, substream, DomainData, TrainConfig, Trainer};
use ahmf_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria expected to fail, with the reason kept next to the number.
const KNOWN_FAILURES: &[(u32, &str)] = &[(
    2,
    "the printed KLD form gives KLD(S,S) close to -(N-1)*eps on dense maps, about -2.5e-5 for 16x16",
)];

const GRAD_BUDGET: Duration = Duration::from_secs(60);
const METRIC_TOL: f64 = 1e-6;
const KLD_IDENTITY_TOL: f64 = 1e-5;
const ATTN_TOL: f64 = 1e-6;
const ATTN_TRIALS: usize = 1000;
const OVERFIT_STEPS: usize = 500;
const OVERFIT_CC: f64 = 0.90;
const OVERFIT_KLD: f64 = 0.20;
const OVERFIT_BUDGET: Duration = Duration::from_secs(300);
const ABLATION_SEEDS: u64 = 5;
const ABLATION_MARGIN: f64 = 0.05;
const TEMPORAL_SEEDS: u64 = 3;
const LR_TOL: f64 = 1e-15;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_map(r: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    let mut t = Tensor::from_fn(&[h, w], |_| r.gen_range(0.0..1.0f64).powi(3));
    let s = t.sum();
    t.data_mut().iter_mut().for_each(|v| *v /= s);
    t
}

fn random_fixations(r: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f64> {
    loop {
        let f = Tensor::from_fn(&[h, w], |_| if r.gen_bool(0.05) { 1.0 } else { 0.0 });
        let k = f.data().iter().filter(|&&v| v > 0.0).count();
        if k > 0 && k < h * w {
            return f;
        }
    }
}

// ---------------------------------------------------------------- 1

fn gradients() -> Result<Outcome> {
    let start = Instant::now();
    let ops = suite::op_suite(10)?;
    let bad_ops: Vec<&str> = ops.iter().filter(|r| !r.passed).map(|r| r.op_name.as_str()).collect();
    let op_max = ops.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let models: Vec<_> = (0..3).map(suite::model_suite).collect::<Result<_>>()?;
    let model_max = models.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let fault = suite::injected_fault(10)?;
    let took = start.elapsed();
    let pass = bad_ops.is_empty() && models.iter().all(|r| r.passed) && !fault.passed && took < GRAD_BUDGET;
    Ok(outcome(
        pass,
        format!(
            "{} op checks, worst {op_max:.2e} (tol {:.0e}), failing {bad_ops:?}; model worst {model_max:.2e} (tol {:.0e}); injected fault caught: {}; {:.1}s",
            ops.len(),
            suite::OP_TOL,
            suite::MODEL_TOL,
            !fault.passed,
            took.as_secs_f64()
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn naive_kld(s: &Tensor<f64>, p: &Tensor<f64>, eps: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..s.len() {
        let (a, b) = (s.data()[i], p.data()[i]);
        total += a * (eps + a / (eps + b)).ln();
    }
    total
}

fn naive_cc(s: &Tensor<f64>, p: &Tensor<f64>) -> f64 {
    let n = s.len() as f64;
    let (ms, mp) = (s.sum() / n, p.sum() / n);
    let (mut sp, mut ss, mut pp) = (0.0, 0.0, 0.0);
    for i in 0..s.len() {
        let (a, b) = (s.data()[i] - ms, p.data()[i] - mp);
        sp += a * b;
        ss += a * a;
        pp += b * b;
    }
    sp / (ss * pp).sqrt()
}

fn naive_sim(s: &Tensor<f64>, p: &Tensor<f64>) -> f64 {
    let mut total = 0.0;
    for i in 0..s.len() {
        total += s.data()[i].min(p.data()[i]);
    }
    total
}

fn naive_nss(f: &Tensor<f64>, p: &Tensor<f64>) -> f64 {
    let n = p.len() as f64;
    let mean = p.sum() / n;
    let mut var = 0.0;
    for &v in p.data() {
        var += (v - mean) * (v - mean);
    }
    let sd = (var / n).sqrt();
    let (mut total, mut k) = (0.0, 0.0);
    for i in 0..p.len() {
        if f.data()[i] > 0.0 {
            total += (p.data()[i] - mean) / sd;
            k += 1.0;
        }
    }
    total / k
}

/// ROC area by brute force: one threshold per fixated value, counting pixels
/// at or above it, closed with (0,0) and (1,1).
fn naive_auc(f: &Tensor<f64>, p: &Tensor<f64>) -> f64 {
    let fixated: Vec<f64> = (0..p.len()).filter(|&i| f.data()[i] > 0.0).map(|i| p.data()[i]).collect();
    let mut th = fixated.clone();
    th.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut pts = vec![(0.0, 0.0)];
    for &t in &th {
        let tp = fixated.iter().filter(|&&v| v >= t).count() as f64 / fixated.len() as f64;
        let fp = p.data().iter().filter(|&&v| v >= t).count() as f64 / p.len() as f64;
        pts.push((fp, tp));
    }
    pts.push((1.0, 1.0));
    let mut area = 0.0;
    for w in pts.windows(2) {
        area += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    area
}

fn metric_oracles() -> Result<Outcome> {
    let mut r = rng(2);
    let mut worst = [0.0f64; 5];
    for _ in 0..100 {
        let (s, p) = (random_map(&mut r, 16, 16), random_map(&mut r, 16, 16));
        let f = random_fixations(&mut r, 16, 16);
        let diffs = [
            metrics::kld(&s, &p, DEFAULT_EPS, KldForm::Printed)? - naive_kld(&s, &p, DEFAULT_EPS),
            metrics::cc(&s, &p)? - naive_cc(&s, &p),
            metrics::sim(&s, &p)? - naive_sim(&s, &p),
            metrics::nss(&f, &p)? - naive_nss(&f, &p),
            metrics::auc_judd(&f, &p)? - naive_auc(&f, &p),
        ];
        for (w, d) in worst.iter_mut().zip(diffs) {
            *w = w.max(d.abs());
        }
    }
    let oracle_ok = worst.iter().all(|&w| w < METRIC_TOL);

    let s = random_map(&mut r, 16, 16);
    let f = random_fixations(&mut r, 16, 16);
    let cc_id = (metrics::cc(&s, &s)? - 1.0).abs();
    let sim_id = (metrics::sim(&s, &s)? - 1.0).abs();
    let kld_id = metrics::kld(&s, &s, DEFAULT_EPS, KldForm::Printed)?;
    let kld_std = metrics::kld(&s, &s, DEFAULT_EPS, KldForm::Standard)?;
    let flat = Tensor::from_fn(&[16, 16], |_| 1.0 / 256.0);
    let auc_const = metrics::auc_judd(&f, &flat)?;
    let base = metrics::nss(&f, &s)?;
    let affine = metrics::nss(&f, &s.map(|v| 3.5 * v + 0.25))?;
    let nss_dev = (affine - base).abs();

    let identities = [
        ("cc", cc_id < METRIC_TOL),
        ("sim", sim_id < METRIC_TOL),
        ("kld", kld_id.abs() < KLD_IDENTITY_TOL),
        ("auc_const", auc_const == 0.5),
        ("nss_affine", nss_dev < METRIC_TOL),
    ];
    let failing: Vec<&str> = identities.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    Ok(outcome(
        oracle_ok && failing.is_empty(),
        format!(
            "naive-loop max diff kld {:.1e} cc {:.1e} sim {:.1e} nss {:.1e} auc {:.1e}; KLD(S,S) = {kld_id:.3e} (standard form {kld_std:.1e}), AUC const = {auc_const}, NSS affine diff {nss_dev:.1e}; failing identities {failing:?}",
            worst[0], worst[1], worst[2], worst[3], worst[4]
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn row_error(tape: &Tape<f64>, v: ahmf_core::numerics::Var) -> f64 {
    let s = tape.shape(v);
    let k = *s.last().unwrap();
    tape.value(v).data().chunks(k).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max)
}

fn conv(store: &mut ParamStore<f64>, name: &str, shape: [usize; 4], r: &mut ChaCha8Rng) -> Conv {
    let n: usize = shape.iter().product();
    Conv {
        w: store.add(format!("{name}.w"), Tensor::from_fn(&shape, |_| r.gen_range(-1.0..1.0))).unwrap(),
        b: store.add(format!("{name}.b"), Tensor::from_fn(&[shape[0]], |_| r.gen_range(-0.5..0.5) * (n as f64).recip())).unwrap(),
    }
}

fn attention_rows() -> Result<Outcome> {
    let mut r = rng(3);
    let mut worst = [0.0f64; 4];
    for trial in 0..ATTN_TRIALS {
        let c = r.gen_range(1..6);
        let (h, w) = (r.gen_range(1..7), r.gen_range(1..7));
        let scale = if trial % 10 == 0 { 30.0 } else { 2.0 };
        let mut store = ParamStore::<f64>::new();
        let kc = r.gen_range(1..4);
        let sp = SpatialParams {
            theta: conv(&mut store, "t", [kc, c, 1, 1], &mut r),
            phi: conv(&mut store, "p", [kc, c, 1, 1], &mut r),
            omega: conv(&mut store, "o", [c, c, 1, 1], &mut r),
        };
        let heads = r.gen_range(1..4);
        let d = 2 * heads * r.gen_range(1..3);
        let enhance = MhcaParams::init("e", d, heads, &mut store, &mut r)?;
        let update = MhcaParams::init("u", d, heads, &mut store, &mut r)?;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn(&[c, h, w], |_| r.gen_range(-scale..scale)));
        let sa = spatial_attention(&mut tape, &bound, &sp, x, 1024)?;
        worst[0] = worst[0].max(row_error(&tape, sa.weights));
        for form in [ChannelAttentionForm::Channels, ChannelAttentionForm::Pixels] {
            let ca = channel_attention(&mut tape, x, form)?;
            worst[1] = worst[1].max(row_error(&tape, ca.weights));
        }
        let (t_len, slots) = (r.gen_range(1..8), r.gen_range(1..6));
        let wm = tape.constant(Tensor::from_fn(&[t_len, d], |_| r.gen_range(-scale..scale)));
        let bank = tape.constant(Tensor::from_fn(&[slots, d], |_| r.gen_range(-scale..scale)));
        let opts = MhcaOptions::eval(true);
        let mut mock = rand::rngs::mock::StepRng::new(0, 0);
        let e = mhca(&mut tape, &bound, &enhance, wm, bank, opts, &mut mock)?;
        let u = mhca(&mut tape, &bound, &update, bank, wm, opts, &mut mock)?;
        for &a in &e.weights {
            worst[2] = worst[2].max(row_error(&tape, a));
        }
        for &a in &u.weights {
            worst[3] = worst[3].max(row_error(&tape, a));
        }
    }
    Ok(outcome(
        worst.iter().all(|&w| w < ATTN_TOL),
        format!(
            "{ATTN_TRIALS} inputs, max |row sum - 1|: spatial {:.1e}, channel {:.1e}, enhance {:.1e}, update {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
    ))
}

// ---------------------------------------------------------------- shared training helpers

fn dataset(run: &RunConfig, per_domain: usize, salt: &str) -> Result<Vec<Loaded>> {
    let mut out = Vec::new();
    for i in 0..run.domains.len() {
        let mut spec = run.scene(i);
        if !salt.is_empty() {
            spec.seed = substream(run.seed, &format!("data.{}.{salt}", run.domains[i].0));
        }
        out.extend(generate(&spec, &run.domains[i].0, per_domain)?.into_iter().map(Loaded::from));
    }
    Ok(out)
}

/// Trains for `steps` optimizer steps, calling `each` after every epoch.
fn train_steps(
    run: &RunConfig,
    samples: &[Loaded],
    steps: usize,
    mut each: impl FnMut(&Trainer) -> Result<()>,
) -> Result<Trainer> {
    let data = DomainData::group(&run.model.domains, samples, run.train.seq_len)?;
    let cfg = TrainConfig { max_epochs: usize::MAX, max_steps: Some(steps), ..run.train.clone() };
    let mut t = Trainer::new(cfg, run.model.clone())?;
    while t.step < steps {
        while t.step < steps && t.next_step(&data)?.is_some() {}
        t.finish_epoch(&[])?;
        each(&t)?;
    }
    Ok(t)
}

fn mean_of(rows: &[MetricsRow], f: impl Fn(&MetricsRow) -> Option<f64>) -> f64 {
    let v: Vec<f64> = rows.iter().filter_map(f).collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

// ---------------------------------------------------------------- 4

fn overfit_config() -> RunConfig {
    let mut run = RunConfig::default();
    for (k, v) in [
        ("data.per_domain", "16"),
        ("seed", "3"),
    ] {
        run.set(k, v).unwrap();
    }
    run
}

fn overfit() -> Result<Outcome> {
    let run = overfit_config();
    let samples = dataset(&run, run.data.per_domain, "")?;
    let start = Instant::now();
    let mut reached: Option<(usize, f64, f64)> = None;
    let mut last = (0, 0.0, 0.0);
    let mut best = (0.0f64, f64::INFINITY);
    train_steps(&run, &samples, OVERFIT_STEPS, |t| {
        if t.epoch % 5 != 0 && t.step < OVERFIT_STEPS {
            return Ok(());
        }
        let rows = evaluate(&t.model, &samples, KldForm::Printed)?;
        let (cc, kld) = (mean_of(&rows, |r| r.cc), mean_of(&rows, |r| Some(r.kld)));
        last = (t.step, cc, kld);
        best = (best.0.max(cc), best.1.min(kld));
        if reached.is_none() && cc >= OVERFIT_CC && kld <= OVERFIT_KLD {
            reached = Some((t.step, cc, kld));
        }
        Ok(())
    })?;
    let took = start.elapsed();
    let detail = match reached {
        Some((s, cc, kld)) => format!("reached CC {cc:.3} KLD {kld:.3} at step {s}"),
        None => format!("not reached; best CC {:.3}, best KLD {:.3}", best.0, best.1),
    };
    Ok(outcome(
        reached.is_some() && took < OVERFIT_BUDGET,
        format!(
            "{} sequences, {detail}; final step {} CC {:.3} KLD {:.3}; {:.0}s (budget {}s)",
            samples.len(),
            last.0,
            last.1,
            last.2,
            took.as_secs_f64(),
            OVERFIT_BUDGET.as_secs()
        ),
    ))
}

// ---------------------------------------------------------------- 5, 6

const MEMORY_STEPS: usize = 240;
const MEMORY_TRAIN: usize = 128;
const MEMORY_HELD_OUT: usize = 16;

fn memory_config(seed: u64, seq_len: usize, ablation: Ablation) -> RunConfig {
    let mut run = RunConfig::default();
    let seed = seed.to_string();
    let seq = seq_len.to_string();
    for (k, v) in [
        ("seed", seed.as_str()),
        ("domains", "m:attend_leftmost"),
        ("model.ablation", ablation.name()),
        ("encoder.frame_h", "16"),
        ("encoder.frame_w", "16"),
        ("train.seq_len", seq.as_str()),
        ("data.seq_len", seq.as_str()),
        ("data.memory_task", "true"),
        ("data.blob_sigma", "0.8"),
        ("data.gt_sigma", "1.0"),
        // summing over the batch as well diverges on this task
        ("train.reduction", "sum_frames"),
    ] {
        run.set(k, v).unwrap();
    }
    run
}

fn memory_run(seed: u64, seq_len: usize, ablation: Ablation) -> Result<Vec<MetricsRow>> {
    let run = memory_config(seed, seq_len, ablation);
    let train = dataset(&run, MEMORY_TRAIN, "")?;
    let held_out = dataset(&run, MEMORY_HELD_OUT, "held_out")?;
    let t = train_steps(&run, &train, MEMORY_STEPS, |_| Ok(()))?;
    evaluate(&t.model, &held_out, KldForm::Printed)
}

fn ablation_direction() -> Result<Outcome> {
    let mut means = Vec::new();
    for ab in Ablation::ALL {
        let mut ccs = Vec::new();
        for seed in 0..ABLATION_SEEDS {
            ccs.push(mean_of(&memory_run(seed, 5, ab)?, |r| r.cc));
        }
        means.push((ab, ccs.iter().sum::<f64>() / ccs.len() as f64, ccs));
    }
    let get = |a: Ablation| means.iter().find(|m| m.0 == a).unwrap().1;
    let per_seed = |a: Ablation| means.iter().find(|m| m.0 == a).unwrap().2.clone();
    let full = get(Ablation::Full);
    let gap = full - get(Ablation::NoHmf);
    let mut gaps: Vec<f64> = per_seed(Ablation::Full).iter().zip(per_seed(Ablation::NoHmf)).map(|(f, n)| f - n).collect();
    gaps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_gap = gaps[gaps.len() / 2];
    let sa_drop = full - get(Ablation::NoSa);
    let ca_drop = full - get(Ablation::NoCa);
    let per: Vec<String> = means
        .iter()
        .map(|(a, m, v)| format!("{a} {m:.3} [{}]", v.iter().map(|c| format!("{c:.3}")).collect::<Vec<_>>().join(" ")))
        .collect();
    Ok(outcome(
        gap >= ABLATION_MARGIN,
        format!(
            "held-out CC over {ABLATION_SEEDS} seeds: {}; full - no_hmf = {gap:.3} (need {ABLATION_MARGIN}), median per-seed gap {median_gap:.3}; soft: no_sa drop {sa_drop:.3} ({}), no_ca drop {ca_drop:.3} ({})",
            per.join("; "),
            if sa_drop >= 0.0 { "ok" } else { "negative" },
            if ca_drop >= 0.0 { "ok" } else { "negative" },
        ),
    ))
}

/// Keeps the last `t` frames of a sequence.
fn tail(s: &Loaded, t: usize) -> Result<Loaded> {
    let n = s.frames.shape()[0];
    let cut = |x: &Tensor<f32>| {
        let per = x.len() / n;
        let mut shape = x.shape().to_vec();
        shape[0] = t;
        Tensor::new(&shape, x.data()[(n - t) * per..].to_vec())
    };
    Ok(Loaded { domain: s.domain.clone(), id: s.id.clone(), frames: cut(&s.frames)?, gt: cut(&s.gt)?, fixations: cut(&s.fixations)? })
}

const LONG_T: usize = 10;
const SHORT_T: usize = 2;

/// Both models are scored on the final `SHORT_T` frames of each held-out
/// sequence; the short model only ever sees those frames.
fn temporal_direction() -> Result<Outcome> {
    let (mut long, mut short) = (Vec::new(), Vec::new());
    for seed in 0..TEMPORAL_SEEDS {
        let run = memory_config(seed, LONG_T, Ablation::Full);
        let train = dataset(&run, MEMORY_TRAIN, "")?;
        let held_out = dataset(&run, MEMORY_HELD_OUT, "held_out")?;

        let t = train_steps(&run, &train, MEMORY_STEPS, |_| Ok(()))?;
        let rows = evaluate(&t.model, &held_out, KldForm::Printed)?;
        let scored: Vec<MetricsRow> = rows.into_iter().filter(|r| r.frame >= LONG_T - SHORT_T).collect();
        long.push(mean_of(&scored, |r| r.nss));

        let mut short_run = run.clone();
        short_run.set("train.seq_len", &SHORT_T.to_string())?;
        let cut = |v: &[Loaded]| v.iter().map(|s| tail(s, SHORT_T)).collect::<Result<Vec<_>>>();
        let t = train_steps(&short_run, &cut(&train)?, MEMORY_STEPS, |_| Ok(()))?;
        let rows = evaluate(&t.model, &cut(&held_out)?, KldForm::Printed)?;
        short.push(mean_of(&rows, |r| r.nss));
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (l, s) = (avg(&long), avg(&short));
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ");
    Ok(outcome(
        l >= s,
        format!(
            "held-out NSS on the last {SHORT_T} frames over {TEMPORAL_SEEDS} seeds: T={LONG_T} {l:.3} [{}], T={SHORT_T} {s:.3} [{}]",
            fmt(&long),
            fmt(&short)
        ),
    ))
}

// ---------------------------------------------------------------- 7

fn small_config(seed: u64) -> RunConfig {
    let mut run = RunConfig::default();
    let seed = seed.to_string();
    for (k, v) in [
        ("seed", seed.as_str()),
        ("encoder.frame_h", "16"),
        ("encoder.frame_w", "16"),
        ("data.blob_sigma", "0.8"),
        ("data.per_domain", "8"),
    ] {
        run.set(k, v).unwrap();
    }
    run
}

/// Bank after one epoch for one update position and channel-attention form.
fn bank_after_epoch(pos: &str, form: &str) -> Result<(Tensor<f32>, bool, String)> {
    let mut run = small_config(7);
    run.set("memory.update_position", pos)?;
    run.set("memory.ca_form", form)?;
    let samples = dataset(&run, run.data.per_domain, "")?;
    let data = DomainData::group(&run.model.domains, &samples, run.train.seq_len)?;
    let mut t = Trainer::new(run.train.clone(), run.model.clone())?;
    let mut losses = Vec::new();
    while let Some(info) = t.next_step(&data)? {
        losses.push(info.loss);
    }
    t.finish_epoch(&[])?;
    let bank = t.model.bank().unwrap().clone();
    let finite = losses.iter().all(|l| l.is_finite()) && bank.is_finite();
    let note = format!("{pos}/{form} last loss {:.4}", losses.last().copied().unwrap_or(f64::NAN));
    Ok((bank, finite, note))
}

/// Channel attention over full H*W channel vectors all but saturates to the
/// identity (self-similarity dwarfs cross terms), so under the `channels` form
/// both positions feed the bank nearly the same slab. The `pixels` form does not saturate
/// and is where the two positions separate.
fn update_positions() -> Result<Outcome> {
    let mut notes = Vec::new();
    let mut finite = true;
    let mut diffs = Vec::new();
    for form in ["pixels", "channels"] {
        let (a, fa, na) = bank_after_epoch("after_hmf", form)?;
        let (b, fb, nb) = bank_after_epoch("after_ca", form)?;
        finite &= fa && fb;
        notes.push(na);
        notes.push(nb);
        diffs.push(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max));
    }
    Ok(outcome(
        finite && diffs[0] > 0.0,
        format!(
            "{}; bank max |after_hmf - after_ca| after one epoch: pixels form {:.3e}, channels form {:.3e}",
            notes.join(", "),
            diffs[0],
            diffs[1]
        ),
    ))
}

// ---------------------------------------------------------------- 8

fn inference_freeze() -> Result<Outcome> {
    let run = small_config(8);
    let samples = dataset(&run, 4, "")?;
    let t = train_steps(&run, &samples, 4, |_| Ok(()))?;
    let model = t.model;
    let bank = model.bank().unwrap().clone();
    let store = model.store.clone();
    let report = |m: &ahmf_core::model::Model| -> Result<String> {
        let rows = evaluate(m, &samples, KldForm::Printed)?;
        metrics::report_csv(&metrics::report(&rows))
    };
    let (a, b) = (report(&model)?, report(&model)?);
    let bank_same = model.bank().unwrap().data().iter().zip(bank.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    Ok(outcome(
        bank_same && model.store == store && a == b,
        format!("bank bytes unchanged: {bank_same}; parameters unchanged: {}; report CSVs identical: {}", model.store == store, a == b),
    ))
}

// ---------------------------------------------------------------- 9

fn domain_isolation() -> Result<Outcome> {
    let run = small_config(9);
    let samples = dataset(&run, 4, "")?;
    let only_a: Vec<Loaded> = samples.iter().filter(|s| s.domain == "a").cloned().collect();
    let fresh = Trainer::new(run.train.clone(), run.model.clone())?;
    let trained = train_steps(&run, &only_a, 4, |_| Ok(()))?;
    let (before, after) = (&fresh.model, &trained.model);
    let b0 = before.domains.get("b")?;
    let b1 = after.domains.get("b")?;
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let bn_same = b0.bn.iter().zip(&b1.bn).all(|(x, y)| bits(&x.running_mean) == bits(&y.running_mean) && bits(&x.running_var) == bits(&y.running_var));
    let param_same = |id| bits(before.store.get(id).data()) == bits(after.store.get(id).data());
    let priors_same = b0.priors.map_or(true, param_same);
    let sigma_same = param_same(b0.smooth_log_sigma);
    let a0 = before.domains.get("a")?;
    let a_moved = !param_same(a0.smooth_log_sigma) || a0.priors.is_some_and(|p| !param_same(p));
    Ok(outcome(
        bn_same && priors_same && sigma_same && a_moved,
        format!("after {} steps on domain a: b BN stats unchanged {bn_same}, b priors unchanged {priors_same}, b smoothing sigma unchanged {sigma_same}; a moved {a_moved}", trained.step),
    ))
}

// ---------------------------------------------------------------- 10

fn schedule() -> Result<Outcome> {
    let cfg = TrainConfig::default();
    let want = [0.01, 0.008, 0.0064, 0.00512];
    let got: Vec<f64> = (0..4).map(|e| lr_at(e, &cfg)).collect();
    let lr_ok = got.iter().zip(want).all(|(g, w)| (g - w).abs() < LR_TOL);
    let cases: [(&[f64], bool); 6] = [
        (&[0.5, 0.4, 0.3, 0.2], true),
        (&[0.5, 0.4, 0.3], false),
        (&[0.5, 0.4, 0.3, 0.35, 0.3, 0.2], false),
        (&[0.5, 0.4, 0.3, 0.35, 0.3, 0.2, 0.1], true),
        (&[0.5, 0.5, 0.5, 0.5, 0.5], false),
        (&[], false),
    ];
    let mut stop_ok = cases.iter().all(|(h, want)| early_stop(h, cfg.patience) == *want);
    // first firing epoch over every prefix of a long history
    let hist = [0.1, 0.2, 0.15, 0.1, 0.12, 0.11, 0.1, 0.09, 0.3];
    let first = (0..=hist.len()).find(|&n| early_stop(&hist[..n], cfg.patience));
    stop_ok &= first == Some(8);
    Ok(outcome(lr_ok && stop_ok, format!("lr_at(0..3) = {got:?}; early stop cases ok: {stop_ok}, first firing at epoch {first:?}")))
}

// ---------------------------------------------------------------- 11

fn round_trips() -> Result<Outcome> {
    let mut r = rng(11);
    let mut tensors_ok = true;
    for _ in 0..200 {
        let rank = r.gen_range(0..5);
        let shape: Vec<usize> = (0..rank).map(|_| r.gen_range(1..5)).collect();
        let mut t = Tensor::<f32>::from_fn(&shape, |_| f32::from_bits(r.gen::<u32>() & 0x7f7f_ffff));
        if let Some(v) = t.data_mut().first_mut() {
            *v = -0.0;
        }
        let back = decode_tensor(&encode_tensor(&t))?;
        tensors_ok &= back.shape() == t.shape() && back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    }

    let run = small_config(11);
    let samples = dataset(&run, 4, "")?;
    let data = DomainData::group(&run.model.domains, &samples, run.train.seq_len)?;
    let mut t = Trainer::new(run.train.clone(), run.model.clone())?;
    for _ in 0..3 {
        t.next_step(&data)?;
    }
    let bytes = checkpoint::save_trainer(&run, &t).encode()?;
    let decoded = Checkpoint::decode(&bytes)?;
    let ckpt_ok = decoded.encode()? == bytes;
    let (_, mut resumed) = checkpoint::load_trainer(&decoded)?;
    t.next_step(&data)?;
    resumed.next_step(&data)?;
    let bits = |m: &ahmf_core::model::Model| -> Vec<u32> { m.store.values().iter().flat_map(|v| v.data().iter().map(|x| x.to_bits())).collect() };
    let resume_ok = bits(&t.model) == bits(&resumed.model);
    Ok(outcome(
        tensors_ok && ckpt_ok && resume_ok,
        format!("tensor files bit-exact: {tensors_ok}; checkpoint re-encode identical: {ckpt_ok} ({} bytes); resumed next step bit-identical: {resume_ok}", bytes.len()),
    ))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Result<Outcome>); 11] = [
        (1, "gradient suite", gradients),
        (2, "metric oracles and identities", metric_oracles),
        (3, "attention rows sum to one", attention_rows),
        (4, "toy overfit", overfit),
        (5, "memory-task ablation direction", ablation_direction),
        (6, "longer sequences help", temporal_direction),
        (7, "bank update positions", update_positions),
        (8, "inference freeze", inference_freeze),
        (9, "domain isolation", domain_isolation),
        (10, "schedule exactness", schedule),
        (11, "format round trips and resume", round_trips),
    ];
    let only: Option<Vec<u32>> = std::env::var("AHMF_ACCEPTANCE").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut unexpected = Vec::new();
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let o = run().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let known = KNOWN_FAILURES.iter().find(|(k, _)| *k == n);
        println!(
            "criterion {n:>2} {}: {name}: {} ({:.1}s)",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
        match (o.pass, known) {
            (false, Some((_, why))) => println!("             known failure: {why}"),
            (false, None) => unexpected.push(n),
            (true, Some(_)) => println!("             listed as a known failure but passed"),
            (true, None) => {}
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
