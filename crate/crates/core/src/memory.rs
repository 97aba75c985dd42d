//! Working/long-term memory fusion: the working-memory head, sinusoidal
//! positions, multi-head cross-attention in both directions, the long-term
//! bank with its write-back, and parameter-free channel attention.

use rand::Rng;

use crate::domain::Mode;
use crate::encoder::{flatten_tokens, he_std, need, Conv};
use crate::error::{Error, Result};
use crate::numerics::{dropout, Scalar, Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

/// Which slab feeds the long-term bank update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdatePosition {
    AfterHmf,
    AfterCa,
}

/// Index set channel attention mixes over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelAttentionForm {
    /// Each channel attends over channels (length-`H·W` vectors).
    Channels,
    /// Each pixel attends over pixels (length-`C` vectors).
    Pixels,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryConfig {
    /// Channels of the working-memory tokens.
    pub channels: usize,
    pub expand_ratio: usize,
    pub upsample: usize,
    pub heads: usize,
    pub bank_slots: usize,
    pub bank_init_std: f64,
    pub ema_alpha: f64,
    pub update_position: UpdatePosition,
    pub dropout: f64,
    /// Adds the query slab back before the layer norm.
    pub residual: bool,
    pub ca_form: ChannelAttentionForm,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        MemoryConfig {
            channels: 2,
            expand_ratio: 2,
            upsample: 1,
            heads: 4,
            bank_slots: 5,
            bank_init_std: 1.0,
            ema_alpha: 0.1,
            update_position: UpdatePosition::AfterHmf,
            dropout: 0.0,
            residual: true,
            ca_form: ChannelAttentionForm::Channels,
        }
    }
}

impl MemoryConfig {
    /// Token length for a `h×w` encoder map.
    pub fn token_dim(&self, h: usize, w: usize) -> usize {
        h * w * self.channels * self.upsample * self.upsample
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        if self.channels == 0 || self.expand_ratio == 0 || self.upsample == 0 {
            return Err(Error::config("memory channels, expand_ratio and upsample must be positive"));
        }
        let d = self.token_dim(h, w);
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::config(format!("{} heads do not divide token dim {d}", self.heads)));
        }
        if d % 2 != 0 {
            return Err(Error::config(format!("token dim {d} must be even for positional encoding")));
        }
        if self.bank_slots == 0 {
            return Err(Error::config("bank needs at least one slot"));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(Error::config(format!("ema_alpha {} outside [0, 1]", self.ema_alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Inverted residual block reducing encoder states to memory channels.
#[derive(Debug, Clone, PartialEq)]
pub struct WmHeadParams {
    pub expand: Conv,
    pub depthwise: Conv,
    pub project: Conv,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub w: ParamId,
    pub b: ParamId,
}

impl Projection {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        tape.linear(x, bound[self.w], Some(bound[self.b]))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhcaParams {
    pub heads: usize,
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub o: Projection,
    pub ln_gamma: ParamId,
    pub ln_beta: ParamId,
}

impl MhcaParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        prefix: &str,
        d: usize,
        heads: usize,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("{heads} heads do not divide token dim {d}")));
        }
        let std = (1.0 / d as f64).sqrt();
        let mut proj = |name: &str, store: &mut ParamStore<T>| -> Result<Projection> {
            Ok(Projection {
                w: store.add(format!("{prefix}.{name}.w"), Tensor::randn(&[d, d], std, rng))?,
                b: store.add(format!("{prefix}.{name}.b"), Tensor::zeros(&[d]))?,
            })
        };
        let q = proj("q", store)?;
        let k = proj("k", store)?;
        let v = proj("v", store)?;
        let o = proj("o", store)?;
        Ok(MhcaParams {
            heads,
            q,
            k,
            v,
            o,
            ln_gamma: store.add(format!("{prefix}.ln.gamma"), Tensor::ones(&[d]))?,
            ln_beta: store.add(format!("{prefix}.ln.beta"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn lookup<T: Scalar>(prefix: &str, heads: usize, store: &ParamStore<T>) -> Result<Self> {
        let proj = |name: &str| -> Result<Projection> {
            Ok(Projection {
                w: need(store, &format!("{prefix}.{name}.w"))?,
                b: need(store, &format!("{prefix}.{name}.b"))?,
            })
        };
        Ok(MhcaParams {
            heads,
            q: proj("q")?,
            k: proj("k")?,
            v: proj("v")?,
            o: proj("o")?,
            ln_gamma: need(store, &format!("{prefix}.ln.gamma"))?,
            ln_beta: need(store, &format!("{prefix}.ln.beta"))?,
        })
    }
}

/// Learnable long-term memory slots plus their write-back settings.
#[derive(Debug, Clone, PartialEq)]
pub struct LongTermBank {
    pub slots: ParamId,
    pub alpha: f64,
    pub position: UpdatePosition,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryParams {
    pub head: WmHeadParams,
    /// Present unless memory fusion is ablated.
    pub hmf: Option<HmfParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmfParams {
    pub enhance: MhcaParams,
    pub update: MhcaParams,
    pub bank: LongTermBank,
}

impl MemoryParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        cfg: &MemoryConfig,
        gru_hidden: usize,
        h: usize,
        w: usize,
        with_hmf: bool,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate(h, w)?;
        let e = gru_hidden * cfg.expand_ratio;
        let head = WmHeadParams {
            expand: conv(store, "wm.expand", [e, gru_hidden, 1, 1], he_std(gru_hidden), rng)?,
            depthwise: conv(store, "wm.depthwise", [e, 1, 3, 3], he_std(9), rng)?,
            project: conv(store, "wm.project", [cfg.channels, e, 1, 1], (1.0 / e as f64).sqrt(), rng)?,
        };
        let hmf = if with_hmf {
            let d = cfg.token_dim(h, w);
            let enhance = MhcaParams::init("hmf.enhance", d, cfg.heads, store, rng)?;
            let update = MhcaParams::init("hmf.update", d, cfg.heads, store, rng)?;
            let slots = store.add(
                "hmf.bank",
                Tensor::randn(&[cfg.bank_slots, d], cfg.bank_init_std, rng),
            )?;
            Some(HmfParams {
                enhance,
                update,
                bank: LongTermBank {
                    slots,
                    alpha: cfg.ema_alpha,
                    position: cfg.update_position,
                },
            })
        } else {
            None
        };
        Ok(MemoryParams { head, hmf })
    }

    pub fn lookup<T: Scalar>(cfg: &MemoryConfig, with_hmf: bool, store: &ParamStore<T>) -> Result<Self> {
        let c = |n: &str| -> Result<Conv> {
            Ok(Conv {
                w: need(store, &format!("{n}.w"))?,
                b: need(store, &format!("{n}.b"))?,
            })
        };
        let head = WmHeadParams {
            expand: c("wm.expand")?,
            depthwise: c("wm.depthwise")?,
            project: c("wm.project")?,
        };
        let hmf = if with_hmf {
            Some(HmfParams {
                enhance: MhcaParams::lookup("hmf.enhance", cfg.heads, store)?,
                update: MhcaParams::lookup("hmf.update", cfg.heads, store)?,
                bank: LongTermBank {
                    slots: need(store, "hmf.bank")?,
                    alpha: cfg.ema_alpha,
                    position: cfg.update_position,
                },
            })
        } else {
            None
        };
        Ok(MemoryParams { head, hmf })
    }
}

fn conv<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    shape: [usize; 4],
    std: f64,
    rng: &mut R,
) -> Result<Conv> {
    Ok(Conv {
        w: store.add(format!("{name}.w"), Tensor::randn(&shape, std, rng))?,
        b: store.add(format!("{name}.b"), Tensor::zeros(&[shape[0]]))?,
    })
}

/// Expand 1×1 → relu6 → depthwise 3×3 → relu6 → project 1×1 → upsample.
/// Maps one `Ch×H×W` state to a `C×(H·f)×(W·f)` map.
pub fn working_memory_head<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    p: &WmHeadParams,
    x: Var,
    upsample: usize,
) -> Result<Var> {
    let e = p.expand.apply(tape, bound, x, 1, 0)?;
    let e = tape.relu6(e);
    let d = tape.depthwise_conv2d(e, bound[p.depthwise.w], Some(bound[p.depthwise.b]), 1)?;
    let d = tape.relu6(d);
    let y = p.project.apply(tape, bound, d, 1, 0)?;
    tape.upsample_nearest(y, upsample)
}

/// Sinusoidal positions: `PE[t, 2i] = sin(t / 10000^(2i/D))`,
/// `PE[t, 2i+1] = cos(t / 10000^(2i/D))`.
pub fn positional_encoding<T: Scalar>(t: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || d % 2 != 0 {
        return Err(Error::config(format!("positional encoding needs an even width, got {d}")));
    }
    Tensor::new(
        &[t, d],
        (0..t * d)
            .map(|idx| {
                let (pos, col) = (idx / d, idx % d);
                let i2 = (col - col % 2) as f64;
                let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
                T::of(if col % 2 == 0 { angle.sin() } else { angle.cos() })
            })
            .collect(),
    )
}

#[derive(Debug, Clone)]
pub struct MhcaOut {
    /// Final output after residual and layer norm; shape of the query slab.
    pub out: Var,
    /// Output projection after dropout, before residual and normalization.
    pub projected: Var,
    /// Per-head `Tq×Tk` attention weights.
    pub weights: Vec<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct MhcaOptions {
    pub dropout: f64,
    pub training: bool,
    pub residual: bool,
}

impl MhcaOptions {
    pub fn eval(residual: bool) -> Self {
        MhcaOptions { dropout: 0.0, training: false, residual }
    }
}

/// Multi-head cross-attention from `q_slab` onto `kv_slab`. Positions are
/// added to the projected queries and keys, not to the values.
pub fn mhca<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    bound: &Bound,
    p: &MhcaParams,
    q_slab: Var,
    kv_slab: Var,
    opts: MhcaOptions,
    rng: &mut R,
) -> Result<MhcaOut> {
    let (sq, sk) = (tape.shape(q_slab).to_vec(), tape.shape(kv_slab).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::config(format!("cross-attention slabs {sq:?} and {sk:?} disagree on width")));
    }
    let (tq, tk, d) = (sq[0], sk[0], sq[1]);
    if p.heads == 0 || d % p.heads != 0 {
        return Err(Error::config(format!("{} heads do not divide token dim {d}", p.heads)));
    }
    let dh = d / p.heads;
    let q = p.q.apply(tape, bound, q_slab)?;
    let q = tape.add_const(q, &positional_encoding(tq, d)?)?;
    let k = p.k.apply(tape, bound, kv_slab)?;
    let k = tape.add_const(k, &positional_encoding(tk, d)?)?;
    let v = p.v.apply(tape, bound, kv_slab)?;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(p.heads);
    let mut weights = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.slice(q, 1, h * dh, dh)?;
        let kh = tape.slice(k, 1, h * dh, dh)?;
        let vh = tape.slice(v, 1, h * dh, dh)?;
        let logits = tape.matmul_nt(qh, kh)?;
        let logits = tape.scale(logits, scale);
        let a = tape.softmax(logits);
        heads.push(tape.matmul(a, vh)?);
        weights.push(a);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
    let o = p.o.apply(tape, bound, cat)?;
    let projected = dropout(tape, o, opts.dropout, opts.training, rng)?;
    let pre = if opts.residual { tape.add(q_slab, projected)? } else { projected };
    let out = tape.layer_norm(pre, bound[p.ln_gamma], bound[p.ln_beta], T::of(LN_EPS))?;
    debug_assert_eq!(tape.shape(out), &[tq, d]);
    Ok(MhcaOut { out, projected, weights })
}

/// Queries from working memory, keys and values from the long-term bank.
pub fn enhance_working<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    bound: &Bound,
    hmf: &HmfParams,
    m_w: Var,
    opts: MhcaOptions,
    rng: &mut R,
) -> Result<MhcaOut> {
    mhca(tape, bound, &hmf.enhance, m_w, bound[hmf.bank.slots], opts, rng)
}

/// Computes the updated long-term memories `MHCA(q = bank, kv = source)` for
/// each source slab and blends their mean into the bank:
/// `slots ← (1 − α)·slots + α·m_l^e`. Runs outside any gradient tape.
pub fn update_long_term<T: Scalar>(
    store: &mut ParamStore<T>,
    hmf: &HmfParams,
    sources: &[Tensor<T>],
    residual: bool,
    mode: Mode,
) -> Result<Tensor<T>> {
    if mode == Mode::Infer {
        return Err(Error::Mode("update_long_term"));
    }
    if sources.is_empty() {
        return Err(Error::Usage("bank update needs at least one source slab".into()));
    }
    let slots = store.get(hmf.bank.slots).clone();
    let mut mean = Tensor::<T>::zeros(slots.shape());
    for src in sources {
        let mut tape = Tape::new();
        let bound = store.bind_frozen(&mut tape);
        let kv = tape.constant(src.clone());
        let out = mhca(
            &mut tape,
            &bound,
            &hmf.update,
            bound[hmf.bank.slots],
            kv,
            MhcaOptions::eval(residual),
            &mut rand::rngs::mock::StepRng::new(0, 0),
        )?;
        for (m, &v) in mean.data_mut().iter_mut().zip(tape.value(out.out).data()) {
            *m += v;
        }
    }
    let inv = T::of(1.0 / sources.len() as f64);
    let a = T::of(hmf.bank.alpha);
    let blended = Tensor::new(
        slots.shape(),
        slots
            .data()
            .iter()
            .zip(mean.data())
            .map(|(&s, &m)| (T::one() - a) * s + a * (m * inv))
            .collect(),
    )?;
    if !blended.is_finite() {
        return Err(Error::NonFinite("long-term bank write-back".into()));
    }
    store.set(hmf.bank.slots, blended.clone())?;
    Ok(blended)
}

#[derive(Debug, Clone, Copy)]
pub struct ChannelAttentionOut {
    pub y: Var,
    pub weights: Var,
}

/// Parameter-free self-attention with dot-product affinities and no scaling.
pub fn channel_attention<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    form: ChannelAttentionForm,
) -> Result<ChannelAttentionOut> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Dimension { op: "channel_attention", lhs: s, rhs: vec![0, 0, 0] });
    }
    let (c, hw) = (s[0], s[1] * s[2]);
    let flat = tape.reshape(x, &[c, hw])?;
    match form {
        ChannelAttentionForm::Channels => {
            let logits = tape.matmul_nt(flat, flat)?;
            let weights = tape.softmax(logits);
            let y = tape.matmul(weights, flat)?;
            Ok(ChannelAttentionOut { y: tape.reshape(y, &s)?, weights })
        }
        ChannelAttentionForm::Pixels => {
            let pix = tape.transpose(flat)?;
            let logits = tape.matmul_nt(pix, pix)?;
            let weights = tape.softmax(logits);
            let y = tape.matmul(weights, pix)?;
            let y = tape.transpose(y)?;
            Ok(ChannelAttentionOut { y: tape.reshape(y, &s)?, weights })
        }
    }
}

/// Result of the fusion stage for one sequence.
#[derive(Debug, Clone)]
pub struct FuseOut<T: Scalar> {
    /// Fused `C×H×W` map per frame.
    pub frames: Vec<Var>,
    pub working: Var,
    pub enhanced: Option<Var>,
    /// Slab for the bank update; only produced in training mode with a bank.
    pub update_source: Option<Tensor<T>>,
}

/// Working-memory head, enhancement against the bank, and channel attention
/// for one sequence of encoder states.
#[allow(clippy::too_many_arguments)]
pub fn fuse<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &MemoryConfig,
    p: &MemoryParams,
    states: &[Var],
    use_ca: bool,
    mode: Mode,
    rng: &mut R,
) -> Result<FuseOut<T>> {
    let mut maps = Vec::with_capacity(states.len());
    for &s in states {
        maps.push(working_memory_head(tape, bound, &p.head, s, cfg.upsample)?);
    }
    let map_shape = tape.shape(maps[0]).to_vec();
    let working = flatten_tokens(tape, &maps)?;
    let training = mode == Mode::Train;
    let (slab, enhanced) = match &p.hmf {
        Some(hmf) => {
            let opts = MhcaOptions { dropout: cfg.dropout, training, residual: cfg.residual };
            let e = enhance_working(tape, bound, hmf, working, opts, rng)?.out;
            (e, Some(e))
        }
        None => (working, None),
    };
    let mut frames = Vec::with_capacity(states.len());
    for t in 0..states.len() {
        let tok = tape.slice(slab, 0, t, 1)?;
        let m = tape.reshape(tok, &map_shape)?;
        frames.push(if use_ca { channel_attention(tape, m, cfg.ca_form)?.y } else { m });
    }
    let update_source = match (&p.hmf, training) {
        (Some(hmf), true) => Some(match hmf.bank.position {
            UpdatePosition::AfterHmf => tape.value(slab).clone(),
            UpdatePosition::AfterCa => {
                let flat = flatten_tokens(tape, &frames)?;
                tape.value(flat).clone()
            }
        }),
        _ => None,
    };
    Ok(FuseOut { frames, working, enhanced, update_source })
}
