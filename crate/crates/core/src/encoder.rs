//! Frame encoder: strided convolutional feature stub, multi-level fusion,
//! pixel-to-pixel spatial attention, domain normalization with priors, and a
//! convolutional GRU carrying state across frames.

use rand::Rng;

use crate::domain::{self, BnUpdate, DomainContext, Mode};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

/// Name of the encoder's domain-normalization site.
pub const BN_SITE: &str = "encoder";

/// How the spatial mixing stage is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialMode {
    /// Non-local attention over all pixel pairs.
    Attention,
    /// Plain 1×1 convolution with the same channel count (ablation).
    Pointwise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub frame_h: usize,
    pub frame_w: usize,
    /// Output channels per stub level; level `ℓ` has stride `2^(ℓ+1)`.
    pub stub_channels: Vec<usize>,
    /// Channels of the θ/φ projections.
    pub key_channels: usize,
    pub spatial: SpatialMode,
    /// Adds the input back onto the attention output.
    pub sa_residual: bool,
    /// Largest `H·W` the spatial attention accepts.
    pub sa_max_pixels: usize,
    pub gru_hidden: usize,
    pub gru_kernel: usize,
    /// Number of prior channels concatenated before the GRU.
    pub priors: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            frame_h: 32,
            frame_w: 32,
            stub_channels: vec![8, 16, 32],
            key_channels: 16,
            spatial: SpatialMode::Attention,
            sa_residual: true,
            sa_max_pixels: 1024,
            gru_hidden: 16,
            gru_kernel: 3,
            priors: 4,
        }
    }
}

impl EncoderConfig {
    /// Feature-map height: the resolution of the first stub level.
    pub fn map_h(&self) -> usize {
        self.frame_h / 2
    }

    pub fn map_w(&self) -> usize {
        self.frame_w / 2
    }

    pub fn fused_channels(&self) -> usize {
        self.stub_channels.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let levels = self.stub_channels.len();
        if levels == 0 || self.stub_channels.contains(&0) {
            return Err(Error::config("stub needs at least one level with nonzero channels"));
        }
        let div = 1usize << levels;
        if self.frame_h == 0 || self.frame_w == 0 || self.frame_h % div != 0 || self.frame_w % div != 0 {
            return Err(Error::config(format!(
                "frame {}x{} not divisible by {div} for {levels} stub levels",
                self.frame_h, self.frame_w
            )));
        }
        if self.key_channels == 0 || self.gru_hidden == 0 {
            return Err(Error::config("key_channels and gru_hidden must be positive"));
        }
        if self.gru_kernel % 2 == 0 {
            return Err(Error::config(format!("gru kernel {} must be odd", self.gru_kernel)));
        }
        if self.spatial == SpatialMode::Attention && self.map_h() * self.map_w() > self.sa_max_pixels {
            return Err(spatial_cap_error(self.map_h() * self.map_w(), self.sa_max_pixels));
        }
        Ok(())
    }
}

fn spatial_cap_error(pixels: usize, cap: usize) -> Error {
    Error::config(format!(
        "spatial attention over {pixels} pixels exceeds the cap of {cap}; use a smaller frame size"
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
}

impl Conv {
    fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        shape: [usize; 4],
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Conv {
            w: store.add(format!("{name}.w"), Tensor::randn(&shape, std, rng))?,
            b: store.add(format!("{name}.b"), Tensor::zeros(&[shape[0]]))?,
        })
    }

    fn lookup<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<Self> {
        Ok(Conv {
            w: need(store, &format!("{name}.w"))?,
            b: need(store, &format!("{name}.b"))?,
        })
    }

    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var, stride: usize, pad: usize) -> Result<Var> {
        tape.conv2d(x, bound[self.w], Some(bound[self.b]), stride, pad)
    }
}

pub(crate) fn need<T: Scalar>(store: &ParamStore<T>, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Validation(format!("missing parameter `{name}`")))
}

/// He-style standard deviation for a kernel with `fan_in` inputs.
pub(crate) fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialParams {
    pub theta: Conv,
    pub phi: Conv,
    pub omega: Conv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    /// Update and reset gates stacked along output channels (`z` first).
    pub gates: Conv,
    pub cand: Conv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub stub: Vec<Conv>,
    pub spatial: Option<SpatialParams>,
    /// 1×1 replacement used when spatial attention is ablated.
    pub pointwise: Option<Conv>,
    pub gru: GruParams,
}

impl EncoderParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(cfg: &EncoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut stub = Vec::new();
        let mut cin = 3;
        for (l, &c) in cfg.stub_channels.iter().enumerate() {
            stub.push(Conv::register(store, &format!("enc.stub{l}"), [c, cin, 3, 3], he_std(cin * 9), rng)?);
            cin = c;
        }
        let c = cfg.fused_channels();
        let kc = cfg.key_channels;
        let (spatial, pointwise) = match cfg.spatial {
            SpatialMode::Attention => {
                let sp = SpatialParams {
                    theta: Conv::register(store, "enc.sa.theta", [kc, c, 1, 1], (1.0 / c as f64).sqrt(), rng)?,
                    phi: Conv::register(store, "enc.sa.phi", [kc, c, 1, 1], (1.0 / c as f64).sqrt(), rng)?,
                    omega: Conv::register(store, "enc.sa.omega", [c, c, 1, 1], (1.0 / c as f64).sqrt(), rng)?,
                };
                (Some(sp), None)
            }
            SpatialMode::Pointwise => (
                None,
                Some(Conv::register(store, "enc.pointwise", [c, c, 1, 1], (1.0 / c as f64).sqrt(), rng)?),
            ),
        };
        let gin = c + cfg.priors + cfg.gru_hidden;
        let k = cfg.gru_kernel;
        let std = (1.0 / (gin * k * k) as f64).sqrt();
        let gru = GruParams {
            gates: Conv::register(store, "enc.gru.gates", [2 * cfg.gru_hidden, gin, k, k], std, rng)?,
            cand: Conv::register(store, "enc.gru.cand", [cfg.gru_hidden, gin, k, k], std, rng)?,
        };
        Ok(EncoderParams { stub, spatial, pointwise, gru })
    }

    /// Resolves the parameter handles of an existing store by name.
    pub fn lookup<T: Scalar>(cfg: &EncoderConfig, store: &ParamStore<T>) -> Result<Self> {
        let stub = (0..cfg.stub_channels.len())
            .map(|l| Conv::lookup(store, &format!("enc.stub{l}")))
            .collect::<Result<_>>()?;
        let (spatial, pointwise) = match cfg.spatial {
            SpatialMode::Attention => (
                Some(SpatialParams {
                    theta: Conv::lookup(store, "enc.sa.theta")?,
                    phi: Conv::lookup(store, "enc.sa.phi")?,
                    omega: Conv::lookup(store, "enc.sa.omega")?,
                }),
                None,
            ),
            SpatialMode::Pointwise => (None, Some(Conv::lookup(store, "enc.pointwise")?)),
        };
        Ok(EncoderParams {
            stub,
            spatial,
            pointwise,
            gru: GruParams {
                gates: Conv::lookup(store, "enc.gru.gates")?,
                cand: Conv::lookup(store, "enc.gru.cand")?,
            },
        })
    }
}

/// Runs the strided stub on one `3×H₀×W₀` frame; returns one feature map
/// per level at strides 2, 4, 8, ...
pub fn backbone_stub<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, stub: &[Conv], frame: Var) -> Result<Vec<Var>> {
    let s = tape.shape(frame).to_vec();
    let div = 1usize << stub.len();
    if s.len() != 3 || s[1] % div != 0 || s[2] % div != 0 {
        return Err(Error::config(format!("frame shape {s:?} not divisible by {div}")));
    }
    let mut levels = Vec::with_capacity(stub.len());
    let mut x = frame;
    for conv in stub {
        let y = conv.apply(tape, bound, x, 2, 1)?;
        x = tape.relu6(y);
        levels.push(x);
    }
    Ok(levels)
}

/// Upsamples every level to `h×w` and concatenates them along channels in
/// level order.
pub fn fuse_pyramid<T: Scalar>(tape: &mut Tape<T>, levels: &[Var], h: usize, w: usize) -> Result<Var> {
    let mut parts = Vec::with_capacity(levels.len());
    for &l in levels {
        let s = tape.shape(l).to_vec();
        if s.len() != 3 || h % s[1] != 0 || w % s[2] != 0 || h / s[1] != w / s[2] {
            return Err(Error::config(format!("level {s:?} cannot be upsampled to {h}x{w}")));
        }
        parts.push(tape.upsample_nearest(l, h / s[1])?);
    }
    tape.concat(&parts, 0)
}

#[derive(Debug, Clone, Copy)]
pub struct SpatialOut {
    pub y: Var,
    /// `HW×HW` attention weights, row `i` over source pixels `j`.
    pub weights: Var,
}

/// Non-local attention over the pixels of a `C×H×W` map:
/// `y_i = Σ_j softmax_j((θx_i)·(φx_j)) ωx_j`.
pub fn spatial_attention<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    p: &SpatialParams,
    x: Var,
    max_pixels: usize,
) -> Result<SpatialOut> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 {
        return Err(Error::Dimension { op: "spatial_attention", lhs: s, rhs: vec![0, 0, 0] });
    }
    let hw = s[1] * s[2];
    if hw > max_pixels {
        return Err(spatial_cap_error(hw, max_pixels));
    }
    let q = p.theta.apply(tape, bound, x, 1, 0)?;
    let k = p.phi.apply(tape, bound, x, 1, 0)?;
    let v = p.omega.apply(tape, bound, x, 1, 0)?;
    let kc = tape.shape(q)[0];
    let cv = tape.shape(v)[0];
    let q = tape.reshape(q, &[kc, hw])?;
    let q = tape.transpose(q)?;
    let k = tape.reshape(k, &[kc, hw])?;
    let k = tape.transpose(k)?;
    let logits = tape.matmul_nt(q, k)?;
    let weights = tape.softmax(logits);
    let v = tape.reshape(v, &[cv, hw])?;
    let y = tape.matmul_nt(v, weights)?;
    let y = tape.reshape(y, &[cv, s[1], s[2]])?;
    Ok(SpatialOut { y, weights })
}

/// Appends the prior channels after the feature channels.
pub fn concat_priors<T: Scalar>(tape: &mut Tape<T>, x: Var, priors: Option<Var>) -> Result<Var> {
    match priors {
        None => Ok(x),
        Some(p) => {
            let (sx, sp) = (tape.shape(x).to_vec(), tape.shape(p).to_vec());
            if sx.len() != 3 || sp.len() != 3 || sx[1..] != sp[1..] {
                return Err(Error::Dimension { op: "concat_priors", lhs: sx, rhs: sp });
            }
            tape.concat(&[x, p], 0)
        }
    }
}

/// One convolutional GRU step:
/// `z, r = σ(conv([x; h]))`, `h̃ = tanh(conv([x; r⊙h]))`, `h' = h + z⊙(h̃ − h)`.
pub fn conv_gru_step<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, p: &GruParams, x: Var, h: Var) -> Result<Var> {
    let (sx, sh) = (tape.shape(x).to_vec(), tape.shape(h).to_vec());
    if sx.len() != 3 || sh.len() != 3 || sx[1..] != sh[1..] {
        return Err(Error::Dimension { op: "conv_gru_step", lhs: sx, rhs: sh });
    }
    let ch = sh[0];
    let pad = tape.shape(bound[p.gates.w])[2] / 2;
    let xh = tape.concat(&[x, h], 0)?;
    let gates = p.gates.apply(tape, bound, xh, 1, pad)?;
    let gates = tape.sigmoid(gates);
    let z = tape.slice(gates, 0, 0, ch)?;
    let r = tape.slice(gates, 0, ch, ch)?;
    let rh = tape.mul(r, h)?;
    let xrh = tape.concat(&[x, rh], 0)?;
    let cand = p.cand.apply(tape, bound, xrh, 1, pad)?;
    let cand = tape.tanh(cand);
    let delta = tape.sub(cand, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}

/// Encoder output for one batch.
#[derive(Debug, Clone)]
pub struct Encoded<T: Scalar> {
    /// `hidden[b][t]` is the `Ch×H×W` GRU state after frame `t` of sample `b`.
    pub hidden: Vec<Vec<Var>>,
    pub bn_update: Option<BnUpdate<T>>,
}

/// Splits a `T×3×H×W` sequence tensor into per-frame constants.
pub fn frame_vars<T: Scalar>(tape: &mut Tape<T>, seq: &Tensor<T>) -> Result<Vec<Var>> {
    let s = seq.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::Dimension { op: "frames", lhs: s.to_vec(), rhs: vec![0, 3, 0, 0] });
    }
    let per = s[1] * s[2] * s[3];
    seq.data()
        .chunks(per)
        .map(|f| Ok(tape.constant(Tensor::new(&s[1..], f.to_vec())?)))
        .collect()
}

/// Encodes a batch of single-domain sequences. Spatial features for all
/// `B·T` frames are normalized together, then each sequence runs through the
/// GRU from a zero state.
pub fn encode_batch<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &EncoderConfig,
    p: &EncoderParams,
    domain: &DomainContext<T>,
    sequences: &[Vec<Var>],
    mode: Mode,
) -> Result<Encoded<T>> {
    if sequences.is_empty() || sequences.iter().any(Vec::is_empty) {
        return Err(Error::Usage("encoder needs at least one frame per sequence".into()));
    }
    let (h, w) = (cfg.map_h(), cfg.map_w());
    let c = cfg.fused_channels();
    let mut stacked = Vec::new();
    for seq in sequences {
        for &frame in seq {
            let levels = backbone_stub(tape, bound, &p.stub, frame)?;
            let fused = fuse_pyramid(tape, &levels, h, w)?;
            let mixed = match (&p.spatial, &p.pointwise) {
                (Some(sp), _) => {
                    let y = spatial_attention(tape, bound, sp, fused, cfg.sa_max_pixels)?.y;
                    if cfg.sa_residual {
                        tape.add(y, fused)?
                    } else {
                        y
                    }
                }
                (None, Some(pw)) => pw.apply(tape, bound, fused, 1, 0)?,
                (None, None) => fused,
            };
            stacked.push(tape.reshape(mixed, &[1, c, h, w])?);
        }
    }
    let batch = tape.concat(&stacked, 0)?;
    let (normed, bn_update) = domain::domain_batch_norm(tape, bound, batch, domain, BN_SITE, mode)?;
    let priors = domain::render_priors(tape, bound, domain, h, w)?;
    let mut hidden = Vec::with_capacity(sequences.len());
    let mut n = 0;
    for seq in sequences {
        let mut state = tape.constant(Tensor::zeros(&[cfg.gru_hidden, h, w]));
        let mut states = Vec::with_capacity(seq.len());
        for _ in seq {
            let f = tape.slice(normed, 0, n, 1)?;
            let f = tape.reshape(f, &[c, h, w])?;
            let x = concat_priors(tape, f, priors)?;
            state = conv_gru_step(tape, bound, &p.gru, x, state)?;
            states.push(state);
            n += 1;
        }
        hidden.push(states);
    }
    Ok(Encoded { hidden, bn_update })
}

/// Flattens per-frame states into a `T×(C·H·W)` slab, one token per frame.
pub fn flatten_tokens<T: Scalar>(tape: &mut Tape<T>, frames: &[Var]) -> Result<Var> {
    let mut rows = Vec::with_capacity(frames.len());
    for &f in frames {
        let d = tape.value(f).len();
        rows.push(tape.reshape(f, &[1, d])?);
    }
    tape.concat(&rows, 0)
}
