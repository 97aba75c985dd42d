//! Optimizer, schedule, early stopping, and the joint multi-domain training
//! loop.

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::manifest::Loaded;
use crate::domain::Mode;
use crate::error::{Error, Result};
use crate::metrics::{self, KldForm, MetricsRow, Summary};
use crate::model::{Ablation, Model, ModelConfig};
use crate::numerics::{Tape, Tensor};
use crate::params::ParamStore;

/// How per-frame divergences combine into the scalar that is differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossReduction {
    /// Mean over every frame in the batch.
    Mean,
    /// Sum over frames, mean over sequences.
    SumFrames,
    /// Sum over every frame in the batch.
    Sum,
}

impl LossReduction {
    pub fn name(self) -> &'static str {
        match self {
            LossReduction::Mean => "mean",
            LossReduction::SumFrames => "sum_frames",
            LossReduction::Sum => "sum",
        }
    }
}

impl std::str::FromStr for LossReduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(LossReduction::Mean),
            "sum_frames" => Ok(LossReduction::SumFrames),
            "sum" => Ok(LossReduction::Sum),
            _ => Err(Error::config(format!("unknown loss reduction `{s}` (mean, sum_frames, sum)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub seq_len: usize,
    /// Stops after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub reduction: LossReduction,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            decay: 0.8,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 4,
            max_epochs: 16,
            patience: 3,
            seed: 0,
            seq_len: 5,
            max_steps: None,
            reduction: LossReduction::Sum,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [("lr0", self.lr0), ("decay", self.decay)];
        for (name, v) in rates {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(format!("weight_decay must be nonnegative, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 || self.seq_len == 0 || self.patience == 0 {
            return Err(Error::config("batch_size, seq_len and patience must be at least 1"));
        }
        Ok(())
    }
}

/// `lr0 · decay^epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay.powi(epoch as i32)
}

/// Derives an independent seed for a named random stream.
pub fn substream(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

/// Momentum buffers, one per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Tensor<f32>>,
}

impl SgdState {
    pub fn zeros(store: &ParamStore<f32>) -> Self {
        SgdState { velocity: store.values().iter().map(|p| Tensor::zeros(p.shape())).collect() }
    }
}

/// One momentum-SGD update with coupled weight decay. Parameters without a
/// gradient are left alone, velocity included.
pub fn sgd_step(
    store: &mut ParamStore<f32>,
    grads: &[Option<Tensor<f32>>],
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != store.len() || state.velocity.len() != store.len() {
        return Err(Error::Usage(format!(
            "{} gradients and {} velocities for {} parameters",
            grads.len(),
            state.velocity.len(),
            store.len()
        )));
    }
    for ((_, name, _), g) in store.iter().zip(grads) {
        if let Some(bad) = g.as_ref().and_then(|g| g.data().iter().position(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of `{name}` at element {bad}")));
        }
    }
    let (lr, m, wd) = (lr as f32, momentum as f32, weight_decay as f32);
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for (id, g) in ids.into_iter().zip(grads) {
        let Some(g) = g else { continue };
        let v = &mut state.velocity[id.index()];
        let p = store.get_mut(id);
        for ((p, v), &g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = m * *v + (g + wd * *p);
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// True once the last `patience` epochs each scored below their predecessor.
pub fn early_stop(history: &[f64], patience: usize) -> bool {
    if history.len() <= patience {
        return false;
    }
    history[history.len() - patience - 1..].windows(2).all(|w| w[1] < w[0])
}

/// A batch of sample indices, all from one domain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub domain: usize,
    pub samples: Vec<usize>,
}

/// One epoch's batches: each domain's samples shuffled and chunked, then the
/// batches of all domains shuffled together.
pub fn joint_schedule(sizes: &[usize], batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if sizes.is_empty() || sizes.iter().all(|&n| n == 0) {
        return Err(Error::config("training needs at least one non-empty domain"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    for (d, &n) in sizes.iter().enumerate() {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for chunk in idx.chunks(batch_size) {
            batches.push(Batch { domain: d, samples: chunk.to_vec() });
        }
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}

/// Samples grouped by domain in model-domain order, trimmed to `seq_len`.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub domains: Vec<String>,
    pub samples: Vec<Vec<Loaded>>,
}

impl DomainData {
    pub fn group(domains: &[String], samples: &[Loaded], seq_len: usize) -> Result<Self> {
        let mut grouped = vec![Vec::new(); domains.len()];
        for s in samples {
            let d = domains
                .iter()
                .position(|d| *d == s.domain)
                .ok_or_else(|| Error::UnknownDomain(s.domain.clone()))?;
            grouped[d].push(trim(s, seq_len)?);
        }
        Ok(DomainData { domains: domains.to_vec(), samples: grouped })
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.samples.iter().map(Vec::len).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.iter().all(Vec::is_empty)
    }

    pub fn all(&self) -> impl Iterator<Item = &Loaded> {
        self.samples.iter().flatten()
    }
}

fn trim(s: &Loaded, seq_len: usize) -> Result<Loaded> {
    let t = s.frames.shape()[0];
    if t < seq_len {
        return Err(Error::Validation(format!("sample {} has {t} frames, seq_len is {seq_len}", s.id)));
    }
    let cut = |x: &Tensor<f32>| -> Result<Tensor<f32>> {
        let per = x.len() / t;
        let mut shape = x.shape().to_vec();
        shape[0] = seq_len;
        Tensor::new(&shape, x.data()[..per * seq_len].to_vec())
    };
    Ok(Loaded {
        domain: s.domain.clone(),
        id: s.id.clone(),
        frames: cut(&s.frames)?,
        gt: cut(&s.gt)?,
        fixations: cut(&s.fixations)?,
    })
}

/// Inference-mode metrics for every frame of every sample.
pub fn evaluate<'a>(
    model: &Model<f32>,
    samples: impl IntoIterator<Item = &'a Loaded>,
    form: KldForm,
) -> Result<Vec<MetricsRow>> {
    let [h, w] = model.cfg.map_shape();
    let (fh, fw) = (model.cfg.encoder.frame_h, model.cfg.encoder.frame_w);
    let mut rows = Vec::new();
    for s in samples {
        let (fs, gs) = (s.frames.shape(), s.gt.shape());
        if fs.len() != 4 || fs[2..] != [fh, fw] || gs.len() != 3 || gs[1..] != [h, w] {
            return Err(Error::Validation(format!(
                "sample {} has frames {fs:?} and maps {gs:?}, but the model expects {fh}x{fw} frames and {h}x{w} maps",
                s.id
            )));
        }
        let preds = model.predict(&s.domain, &[&s.frames])?;
        for (t, p) in preds[0].iter().enumerate() {
            let frame = |x: &Tensor<f32>| Tensor::new(&[h, w], x.data()[t * h * w..(t + 1) * h * w].to_vec());
            rows.push(metrics::score_frame(&s.domain, &s.id, t, &frame(&s.gt)?, &frame(&s.fixations)?, p, form)?);
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<Summary>,
}

pub const HISTORY_COLUMNS: [&str; 8] =
    ["epoch", "lr", "train_loss", "val_auc_j", "val_sim", "val_cc", "val_kld", "val_nss"];

pub fn history_csv(history: &[EpochRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let wrap = |e: csv::Error| Error::Validation(format!("csv encoding failed: {e}"));
    w.write_record(HISTORY_COLUMNS).map_err(wrap)?;
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        let v = r.val.as_ref();
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            cell(v.and_then(|s| s.auc_j)),
            cell(v.and_then(|s| s.sim)),
            cell(v.and_then(|s| s.cc)),
            cell(v.and_then(|s| s.kld)),
            cell(v.and_then(|s| s.nss)),
        ])
        .map_err(wrap)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub sgd: SgdState,
    /// Epoch in progress.
    pub epoch: usize,
    /// Batches of the current epoch already taken.
    pub cursor: usize,
    pub step: usize,
    /// Summed loss and frame count of the current epoch.
    pub epoch_loss: (f64, usize),
    pub history: Vec<EpochRecord>,
    pub dropout_rng: ChaCha8Rng,
}

/// Result of one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepInfo {
    pub loss: f64,
    pub frames: usize,
}

/// Why [`Trainer::fit`] returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    MaxEpochs,
    MaxSteps,
    EarlyStop,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, model_cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg, substream(cfg.seed, "init"))?;
        Ok(Trainer::from_model(cfg, model))
    }

    pub fn from_model(cfg: TrainConfig, model: Model<f32>) -> Self {
        let sgd = SgdState::zeros(&model.store);
        let dropout_rng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, "dropout"));
        Trainer { cfg, model, sgd, epoch: 0, cursor: 0, step: 0, epoch_loss: (0.0, 0), history: Vec::new(), dropout_rng }
    }

    pub fn schedule(&self, data: &DomainData) -> Result<Vec<Batch>> {
        joint_schedule(&data.sizes(), self.cfg.batch_size, substream(self.cfg.seed, &format!("schedule.{}", self.epoch)))
    }

    /// Forward, backward and update on one single-domain batch. Nothing is
    /// modified when the loss or a gradient is not finite.
    pub fn train_step(&mut self, domain: &str, batch: &[&Loaded]) -> Result<StepInfo> {
        let lr = lr_at(self.epoch, &self.cfg);
        let mut tape = Tape::new();
        let bound = self.model.store.bind(&mut tape);
        let frames: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.frames).collect();
        let targets: Vec<&Tensor<f32>> = batch.iter().map(|s| &s.gt).collect();
        let mut rng = self.dropout_rng.clone();
        let fwd = self.model.forward(&mut tape, &bound, domain, &frames, Mode::Train, &mut rng)?;
        let (sum, n) = self.model.loss_sum(&mut tape, &fwd, &targets)?;
        let loss = tape.value(sum).data()[0] as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step)));
        }
        let scale = match self.cfg.reduction {
            LossReduction::Mean => 1.0 / n as f64,
            LossReduction::SumFrames => 1.0 / batch.len() as f64,
            LossReduction::Sum => 1.0,
        };
        let objective = tape.scale(sum, scale as f32);
        tape.backward(objective);
        let grads = bound.grads(&tape);
        sgd_step(&mut self.model.store, &grads, &mut self.sgd, lr, self.cfg.momentum, self.cfg.weight_decay)?;
        self.dropout_rng = rng;
        self.model.apply_bn_update(&fwd)?;
        self.model.domains.project(&mut self.model.store);
        self.model.update_bank(&fwd.bank_sources, Mode::Train)?;
        self.step += 1;
        self.epoch_loss.0 += loss;
        self.epoch_loss.1 += n;
        Ok(StepInfo { loss: loss / n as f64, frames: n })
    }

    /// Takes the next scheduled batch. Returns `None` at the end of an epoch.
    pub fn next_step(&mut self, data: &DomainData) -> Result<Option<StepInfo>> {
        let schedule = self.schedule(data)?;
        let Some(b) = schedule.get(self.cursor) else {
            return Ok(None);
        };
        let batch: Vec<&Loaded> = b.samples.iter().map(|&i| &data.samples[b.domain][i]).collect();
        let info = self.train_step(&data.domains[b.domain], &batch)?;
        self.cursor += 1;
        Ok(Some(info))
    }

    /// Closes the current epoch: records history and advances the schedule.
    pub fn finish_epoch(&mut self, val: &[Loaded]) -> Result<&EpochRecord> {
        let (sum, n) = self.epoch_loss;
        let summary = if val.is_empty() {
            None
        } else {
            let rows = evaluate(&self.model, val, KldForm::Printed)?;
            metrics::report(&rows).into_iter().next()
        };
        self.history.push(EpochRecord {
            epoch: self.epoch,
            lr: lr_at(self.epoch, &self.cfg),
            train_loss: if n > 0 { sum / n as f64 } else { f64::NAN },
            val: summary,
        });
        self.epoch += 1;
        self.cursor = 0;
        self.epoch_loss = (0.0, 0);
        Ok(self.history.last().expect("just pushed"))
    }

    /// Validation scores per epoch used for early stopping.
    pub fn val_scores(&self) -> Vec<f64> {
        self.history.iter().filter_map(|r| r.val.as_ref().and_then(|s| s.cc)).collect()
    }

    /// Runs epochs until a stopping condition. Validation uses the first
    /// model domain's samples from `val`.
    pub fn fit(&mut self, train: &DomainData, val: &[Loaded], mut on_epoch: impl FnMut(&Trainer)) -> Result<Stop> {
        if train.is_empty() {
            return Err(Error::config("training split is empty"));
        }
        let first = &self.model.cfg.domains[0];
        let val: Vec<Loaded> = val
            .iter()
            .filter(|s| &s.domain == first)
            .map(|s| trim(s, self.cfg.seq_len))
            .collect::<Result<_>>()?;
        if val.is_empty() {
            warn!("no validation samples for domain `{first}`, early stopping disabled");
        }
        let bank_before = self.model.bank().cloned();
        loop {
            if self.epoch >= self.cfg.max_epochs {
                return Ok(Stop::MaxEpochs);
            }
            while self.cfg.max_steps.is_none_or(|m| self.step < m) {
                if self.next_step(train)?.is_none() {
                    break;
                }
            }
            let rec = self.finish_epoch(&val)?;
            info!(
                "epoch {} lr {:.5} train_loss {:.4} val_cc {}",
                rec.epoch,
                rec.lr,
                rec.train_loss,
                rec.val.as_ref().and_then(|s| s.cc).map_or("-".into(), |c| format!("{c:.4}"))
            );
            if self.model.cfg.ablation == Ablation::NoHmf {
                assert!(bank_before.is_none() && self.model.bank().is_none(), "no_hmf model grew a bank");
                info!("no_hmf: long-term bank absent and untouched");
            }
            on_epoch(self);
            if self.cfg.max_steps.is_some_and(|m| self.step >= m) {
                return Ok(Stop::MaxSteps);
            }
            if early_stop(&self.val_scores(), self.cfg.patience) {
                return Ok(Stop::EarlyStop);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate, SceneSpec};
    use crate::encoder::EncoderConfig;
    use crate::memory::MemoryConfig;

    #[test]
    fn lr_schedule_values() {
        let c = TrainConfig::default();
        let want = [0.01, 0.008, 0.0064, 0.00512];
        for (e, w) in want.iter().enumerate() {
            assert!((lr_at(e, &c) - w).abs() < 1e-15, "{e}");
        }
        for e in 0..30 {
            assert!(lr_at(e + 1, &c) < lr_at(e, &c));
        }
    }

    fn scalar_store(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::new(&[1], vec![v]).unwrap()).unwrap();
        s
    }

    fn g(v: f32) -> Vec<Option<Tensor<f32>>> {
        vec![Some(Tensor::new(&[1], vec![v]).unwrap())]
    }

    #[test]
    fn sgd_examples() {
        let mut s = scalar_store(0.7);
        let mut st = SgdState::zeros(&s);
        sgd_step(&mut s, &g(0.0), &mut st, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(s.values()[0].data()[0], 0.7);

        let mut s = scalar_store(1.0);
        let mut st = SgdState::zeros(&s);
        sgd_step(&mut s, &g(1.0), &mut st, 0.1, 0.0, 0.0).unwrap();
        assert!((s.values()[0].data()[0] - 0.9).abs() < 1e-7);

        let mut s = scalar_store(0.0);
        let mut st = SgdState::zeros(&s);
        sgd_step(&mut s, &g(1.0), &mut st, 0.1, 0.9, 0.0).unwrap();
        sgd_step(&mut s, &g(1.0), &mut st, 0.1, 0.9, 0.0).unwrap();
        assert!((s.values()[0].data()[0] + 0.29).abs() < 1e-6);

        let mut s = scalar_store(0.5);
        let mut st = SgdState::zeros(&s);
        sgd_step(&mut s, &g(3.0), &mut st, 0.0, 0.9, 1e-4).unwrap();
        assert_eq!(s.values()[0].data()[0], 0.5);
    }

    #[test]
    fn sgd_skips_missing_and_rejects_nan() {
        let mut s = scalar_store(0.5);
        let mut st = SgdState::zeros(&s);
        sgd_step(&mut s, &[None], &mut st, 0.1, 0.9, 0.5).unwrap();
        assert_eq!(s.values()[0].data()[0], 0.5);
        let err = sgd_step(&mut s, &g(f32::NAN), &mut st, 0.1, 0.9, 0.0).unwrap_err();
        assert!(matches!(&err, Error::NonFinite(m) if m.contains("`p`")), "{err}");
        assert_eq!(s.values()[0].data()[0], 0.5);
    }

    #[test]
    fn early_stop_examples() {
        assert!(!early_stop(&[0.5, 0.6, 0.7], 3));
        assert!(early_stop(&[0.7, 0.6, 0.5, 0.4], 3));
        assert!(!early_stop(&[0.7, 0.6, 0.65, 0.6, 0.55], 3));
        assert!(!early_stop(&[0.7, 0.6, 0.5], 3));
        assert!(!early_stop(&[0.5, 0.5, 0.4, 0.3], 3));
    }

    #[test]
    fn schedule_examples() {
        let one = joint_schedule(&[8], 4, 1).unwrap();
        assert_eq!(one.len(), 2);
        let mut seen: Vec<usize> = one.iter().flat_map(|b| b.samples.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..8).collect::<Vec<_>>());
        let two = joint_schedule(&[4, 4], 4, 2).unwrap();
        assert_eq!(two.len(), 2);
        assert_ne!(two[0].domain, two[1].domain);
        assert_eq!(joint_schedule(&[4, 4], 4, 2).unwrap(), two);
        assert_eq!(joint_schedule(&[5, 3], 2, 9).unwrap().len(), 5);
        assert!(matches!(joint_schedule(&[], 4, 0), Err(Error::Config(_))));
        assert!(matches!(joint_schedule(&[0, 0], 4, 0), Err(Error::Config(_))));
    }

    pub(crate) fn tiny_setup() -> (TrainConfig, ModelConfig, Vec<Loaded>) {
        let spec = SceneSpec { frame_h: 8, frame_w: 8, seq_len: 2, n_movers: 1, blob_sigma: 0.8, ..SceneSpec::default() };
        let mut samples: Vec<Loaded> = generate(&spec, "a", 4).unwrap().into_iter().map(Loaded::from).collect();
        samples.extend(generate(&SceneSpec { seed: 5, ..spec.clone() }, "b", 4).unwrap().into_iter().map(Loaded::from));
        let mcfg = ModelConfig {
            encoder: EncoderConfig {
                frame_h: 8,
                frame_w: 8,
                stub_channels: vec![2, 2],
                key_channels: 2,
                gru_hidden: 2,
                priors: 1,
                ..EncoderConfig::default()
            },
            memory: MemoryConfig { heads: 2, bank_slots: 2, ..MemoryConfig::default() },
            ..ModelConfig::default()
        };
        let tcfg = TrainConfig { seq_len: 2, batch_size: 2, max_epochs: 2, ..TrainConfig::default() };
        (tcfg, mcfg, samples)
    }

    #[test]
    fn identical_seeds_give_identical_losses() {
        let (tcfg, mcfg, samples) = tiny_setup();
        let data = DomainData::group(&mcfg.domains, &samples, tcfg.seq_len).unwrap();
        let mut a = Trainer::new(tcfg.clone(), mcfg.clone()).unwrap();
        let mut b = Trainer::new(tcfg, mcfg).unwrap();
        for _ in 0..3 {
            let la = a.next_step(&data).unwrap().unwrap().loss;
            let lb = b.next_step(&data).unwrap().unwrap().loss;
            assert_eq!(la.to_bits(), lb.to_bits());
        }
        assert_eq!(a.model.store, b.model.store);
    }

    #[test]
    fn zero_epochs_returns_the_initial_model() {
        let (tcfg, mcfg, samples) = tiny_setup();
        let data = DomainData::group(&mcfg.domains, &samples, 2).unwrap();
        let mut t = Trainer::new(TrainConfig { max_epochs: 0, ..tcfg }, mcfg).unwrap();
        let init = t.model.store.clone();
        assert_eq!(t.fit(&data, &samples, |_| {}).unwrap(), Stop::MaxEpochs);
        assert!(t.history.is_empty());
        assert_eq!(t.model.store, init);
    }

    #[test]
    fn fit_records_history() {
        let (tcfg, mcfg, samples) = tiny_setup();
        let data = DomainData::group(&mcfg.domains, &samples, 2).unwrap();
        let mut t = Trainer::new(tcfg, mcfg).unwrap();
        let mut epochs = 0;
        t.fit(&data, &samples, |_| epochs += 1).unwrap();
        assert_eq!(epochs, 2);
        assert_eq!(t.history.len(), 2);
        assert_eq!(t.step, 8);
        assert!(t.history.iter().all(|r| r.train_loss.is_finite() && r.val.is_some()));
        let csv = history_csv(&t.history).unwrap();
        assert!(csv.starts_with("epoch,lr,train_loss,val_auc_j,val_sim,val_cc,val_kld,val_nss\n"));
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn training_one_domain_leaves_the_other_untouched() {
        let (tcfg, mcfg, samples) = tiny_setup();
        let only_a: Vec<Loaded> = samples.iter().filter(|s| s.domain == "a").cloned().collect();
        let data = DomainData::group(&mcfg.domains, &only_a, 2).unwrap();
        let mut t = Trainer::new(tcfg, mcfg).unwrap();
        let before = t.model.clone();
        for _ in 0..2 {
            t.next_step(&data).unwrap().unwrap();
        }
        let b0 = before.domains.get("b").unwrap();
        let b1 = t.model.domains.get("b").unwrap();
        assert_eq!(b0, b1);
        for id in b0.param_ids() {
            assert_eq!(before.store.get(id), t.model.store.get(id));
        }
        let a0 = before.domains.get("a").unwrap();
        assert_ne!(a0, t.model.domains.get("a").unwrap());
    }

    #[test]
    fn trim_shortens_and_refuses_short_samples() {
        let (_, _, samples) = tiny_setup();
        let t = trim(&samples[0], 1).unwrap();
        assert_eq!(t.frames.shape()[0], 1);
        assert_eq!(t.gt.data(), &samples[0].gt.data()[..t.gt.len()]);
        assert!(matches!(trim(&samples[0], 3), Err(Error::Validation(_))));
    }
}
