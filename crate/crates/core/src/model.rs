//! The assembled model: encoder, memory fusion, prediction head, and the
//! per-domain modules, with ablation switches.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::domain::{self, BnUpdate, DomainTable, Mode, PriorForm, PriorSpec};
use crate::encoder::{self, he_std, Conv, EncoderConfig, EncoderParams, SpatialMode};
use crate::error::{Error, Result};
use crate::memory::{self, MemoryConfig, MemoryParams};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};

/// ε inside the divergence used as the training loss.
pub const KLD_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoHmf,
    NoSa,
    NoCa,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Full, Ablation::NoHmf, Ablation::NoSa, Ablation::NoCa];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoHmf => "no_hmf",
            Ablation::NoSa => "no_sa",
            Ablation::NoCa => "no_ca",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown ablation `{s}` (full, no_hmf, no_sa, no_ca)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub memory: MemoryConfig,
    pub ablation: Ablation,
    pub prior_form: PriorForm,
    pub domains: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            memory: MemoryConfig::default(),
            ablation: Ablation::Full,
            prior_form: PriorForm::Gaussian,
            domains: vec!["a".into(), "b".into()],
        }
    }
}

impl ModelConfig {
    /// Encoder settings after applying the ablation.
    pub fn resolved_encoder(&self) -> EncoderConfig {
        let mut e = self.encoder.clone();
        if self.ablation == Ablation::NoSa {
            e.spatial = SpatialMode::Pointwise;
        }
        e
    }

    pub fn has_bank(&self) -> bool {
        self.ablation != Ablation::NoHmf
    }

    pub fn uses_ca(&self) -> bool {
        self.ablation != Ablation::NoCa
    }

    /// Extents of predicted and ground-truth maps.
    pub fn map_shape(&self) -> [usize; 2] {
        let f = self.memory.upsample;
        [self.encoder.map_h() * f, self.encoder.map_w() * f]
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::config("at least one domain is required"));
        }
        self.resolved_encoder().validate()?;
        self.memory.validate(self.encoder.map_h(), self.encoder.map_w())
    }

    fn bn_sites(&self) -> [(&'static str, usize); 1] {
        [(encoder::BN_SITE, self.encoder.fused_channels())]
    }

    fn prior_spec(&self) -> PriorSpec {
        PriorSpec {
            count: self.encoder.priors,
            form: self.prior_form,
            height: self.encoder.map_h(),
            width: self.encoder.map_w(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub domains: DomainTable<T>,
    pub encoder: EncoderParams,
    pub memory: MemoryParams,
    pub head: Conv,
}

/// Per-batch output of a forward pass.
#[derive(Debug, Clone)]
pub struct Forward<T: Scalar> {
    /// `preds[b][t]`: normalized `H×W` map.
    pub preds: Vec<Vec<Var>>,
    pub bn_update: Option<BnUpdate<T>>,
    /// Slabs feeding the bank update, one per sequence (training only).
    pub bank_sources: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc_cfg = cfg.resolved_encoder();
        let encoder = EncoderParams::init(&enc_cfg, &mut store, &mut rng)?;
        let (h, w) = (enc_cfg.map_h(), enc_cfg.map_w());
        let memory = MemoryParams::init(&cfg.memory, enc_cfg.gru_hidden, h, w, cfg.has_bank(), &mut store, &mut rng)?;
        let c = cfg.memory.channels;
        let head = Conv {
            w: store.add("head.w", Tensor::randn(&[1, c, 1, 1], he_std(c), &mut rng))?,
            b: store.add("head.b", Tensor::zeros(&[1]))?,
        };
        let domains = DomainTable::register(&cfg.domains, &cfg.bn_sites(), &cfg.prior_spec(), &mut store)?;
        Ok(Model { cfg, store, domains, encoder, memory, head })
    }

    /// Rebuilds a model around parameters loaded from disk. Running
    /// statistics start at their defaults; callers restore them separately.
    pub fn from_store(cfg: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let encoder = EncoderParams::lookup(&cfg.resolved_encoder(), &store)?;
        let memory = MemoryParams::lookup(&cfg.memory, cfg.has_bank(), &store)?;
        let head = Conv {
            w: encoder::need(&store, "head.w")?,
            b: encoder::need(&store, "head.b")?,
        };
        let domains = DomainTable::from_store(&cfg.domains, &cfg.bn_sites(), cfg.prior_form, &store)?;
        // a fresh model with the same config must produce the same layout
        let reference = Model::<T>::new(cfg.clone(), 0)?;
        for ((_, na, ta), (_, nb, tb)) in store.iter().zip(reference.store.iter()) {
            if na != nb || ta.shape() != tb.shape() {
                return Err(Error::Validation(format!(
                    "parameter `{na}` {:?} does not match config layout `{nb}` {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            }
        }
        if store.len() != reference.store.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} parameters, config expects {}",
                store.len(),
                reference.store.len()
            )));
        }
        Ok(Model { cfg, store, domains, encoder, memory, head })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let store = self.store.cast::<U>();
        let mut m = Model::<U>::from_store(self.cfg.clone(), store).expect("layout is unchanged by a cast");
        for (dst, src) in m.domains.iter_mut().zip(self.domains.iter()) {
            for (a, b) in dst.bn.iter_mut().zip(&src.bn) {
                a.running_mean = b.running_mean.iter().map(|v| U::of(v.as_f64())).collect();
                a.running_var = b.running_var.iter().map(|v| U::of(v.as_f64())).collect();
            }
        }
        m
    }

    /// Forward pass for a batch of single-domain `T×3×H₀×W₀` sequences.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        domain_id: &str,
        sequences: &[&Tensor<T>],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Forward<T>> {
        if self.domains.is_empty() {
            return Err(Error::config("model has no domains"));
        }
        let domain = self.domains.get(domain_id)?;
        let enc_cfg = self.cfg.resolved_encoder();
        for s in sequences {
            let sh = s.shape();
            if sh.len() != 4 || sh[1] != 3 || sh[2] != enc_cfg.frame_h || sh[3] != enc_cfg.frame_w {
                return Err(Error::Dimension {
                    op: "model_input",
                    lhs: sh.to_vec(),
                    rhs: vec![0, 3, enc_cfg.frame_h, enc_cfg.frame_w],
                });
            }
        }
        let frames = sequences
            .iter()
            .map(|s| encoder::frame_vars(tape, s))
            .collect::<Result<Vec<_>>>()?;
        let enc = encoder::encode_batch(tape, bound, &enc_cfg, &self.encoder, domain, &frames, mode)?;
        let mut preds = Vec::with_capacity(sequences.len());
        let mut bank_sources = Vec::new();
        for states in &enc.hidden {
            let fused = memory::fuse(tape, bound, &self.cfg.memory, &self.memory, states, self.cfg.uses_ca(), mode, rng)?;
            let mut maps = Vec::with_capacity(fused.frames.len());
            for &f in &fused.frames {
                maps.push(self.predict_map(tape, bound, domain, f)?);
            }
            preds.push(maps);
            bank_sources.extend(fused.update_source);
        }
        Ok(Forward { preds, bn_update: enc.bn_update, bank_sources })
    }

    /// 1×1 conv → softplus → normalize → domain smoothing.
    fn predict_map(&self, tape: &mut Tape<T>, bound: &Bound, domain: &domain::DomainContext<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let y = self.head.apply(tape, bound, x, 1, 0)?;
        let y = tape.reshape(y, &s[1..])?;
        let y = tape.softplus(y);
        let y = tape.normalize_sum(y)?;
        domain::smooth_prediction(tape, bound, y, domain)
    }

    /// Inference-mode predictions with frozen parameters.
    pub fn predict(&self, domain_id: &str, sequences: &[&Tensor<T>]) -> Result<Vec<Vec<Tensor<T>>>> {
        let mut tape = Tape::new();
        let bound = self.store.bind_frozen(&mut tape);
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let fwd = self.forward(&mut tape, &bound, domain_id, sequences, Mode::Infer, &mut rng)?;
        Ok(fwd
            .preds
            .iter()
            .map(|seq| seq.iter().map(|&v| tape.value(v).clone()).collect())
            .collect())
    }

    /// Summed divergence `Σ KLD(gt ‖ pred)` over all frames, with the frame
    /// count. Each target is a `T×H×W` stack of normalized maps.
    pub fn loss_sum(&self, tape: &mut Tape<T>, fwd: &Forward<T>, targets: &[&Tensor<T>]) -> Result<(Var, usize)> {
        if targets.len() != fwd.preds.len() {
            return Err(Error::Usage(format!("{} targets for {} sequences", targets.len(), fwd.preds.len())));
        }
        let [h, w] = self.cfg.map_shape();
        let mut terms = Vec::new();
        for (seq, tgt) in fwd.preds.iter().zip(targets) {
            let ts = tgt.shape();
            if ts.len() != 3 || ts[0] != seq.len() || ts[1] != h || ts[2] != w {
                return Err(Error::Dimension { op: "loss", lhs: ts.to_vec(), rhs: vec![seq.len(), h, w] });
            }
            for (t, &p) in seq.iter().enumerate() {
                let frame = Tensor::new(&[h, w], tgt.data()[t * h * w..(t + 1) * h * w].to_vec())?;
                terms.push(tape.kld(&frame, p, T::of(KLD_EPS))?);
            }
        }
        let n = terms.len();
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = tape.add(total, t)?;
        }
        Ok((total, n))
    }

    /// Folds a training pass's normalization statistics into the domain's
    /// running estimates.
    pub fn apply_bn_update(&mut self, fwd: &Forward<T>) -> Result<()> {
        if let Some(u) = &fwd.bn_update {
            self.domains.apply_bn_update(u)?;
        }
        Ok(())
    }

    /// Blends the batch's updated long-term memories into the bank.
    pub fn update_bank(&mut self, sources: &[Tensor<T>], mode: Mode) -> Result<()> {
        let Some(hmf) = &self.memory.hmf else {
            return Ok(());
        };
        if mode == Mode::Infer {
            return Err(Error::Mode("update_long_term"));
        }
        if sources.is_empty() {
            return Ok(());
        }
        memory::update_long_term(&mut self.store, hmf, sources, self.cfg.memory.residual, mode)?;
        Ok(())
    }

    pub fn bank(&self) -> Option<&Tensor<T>> {
        self.memory.hmf.as_ref().map(|h| self.store.get(h.bank.slots))
    }
}
