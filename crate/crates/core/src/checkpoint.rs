//! Checkpoint container: a text manifest plus named tensors.
//!
//! Layout (little-endian): `"CKP1"`, `u32` manifest length, UTF-8
//! `key=value` lines, `u32` entry count, then per entry a `u32` name length,
//! the name, a `u64` blob length and a tensor blob.

use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::format::{decode_tensor, encode_tensor};
use crate::error::{Error, Result};
use crate::metrics::Summary;
use crate::model::Model;
use crate::numerics::Tensor;
use crate::params::ParamStore;
use crate::training::{EpochRecord, SgdState, Trainer};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";
pub const FORMAT_VERSION: &str = "1";
const MAX_MANIFEST: usize = 1 << 24;
const MAX_NAME: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| Error::Validation(format!("checkpoint lacks `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Validation(format!("checkpoint lacks tensor `{name}`")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut text = String::new();
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Usage(format!("checkpoint key `{k}` or its value is not storable")));
            }
            text.push_str(k);
            text.push('=');
            text.push_str(v);
            text.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            if name.len() > MAX_NAME {
                return Err(Error::Usage(format!("tensor name of {} bytes is too long", name.len())));
            }
            let blob = encode_tensor(t);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        Ok(out)
    }

    pub fn decode(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let len = r.u32()? as usize;
        if len > MAX_MANIFEST {
            return Err(Error::format(4, format!("manifest of {len} bytes exceeds the limit")));
        }
        let at = r.pos as u64;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::format(at, e))?;
        let mut meta = Vec::new();
        for line in text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(at, format!("manifest line `{line}` has no `=`")))?;
            if k.is_empty() {
                return Err(Error::format(at, "manifest line with an empty key"));
            }
            meta.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_at = r.pos as u64;
            let n = r.u32()? as usize;
            if n > MAX_NAME {
                return Err(Error::format(name_at, format!("tensor name of {n} bytes is too long")));
            }
            let name = std::str::from_utf8(r.take(n)?).map_err(|e| Error::format(name_at, e))?.to_string();
            let blob_len = r.u64()?;
            let blob_at = r.pos as u64;
            if blob_len > (r.buf.len() - r.pos) as u64 {
                return Err(Error::format(blob_at, "tensor blob runs past the end"));
            }
            let t = decode_tensor(r.take(blob_len as usize)?).map_err(|e| match e {
                Error::Format { offset, msg } => Error::format(blob_at + offset, msg),
                other => other,
            })?;
            tensors.push((name, t));
        }
        if r.pos != buf.len() {
            return Err(Error::format(r.pos as u64, "trailing bytes after the last tensor"));
        }
        Ok(Checkpoint { meta, tensors })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.pos as u64, format!("truncated: needed {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn bits(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn unbits(s: &str) -> Result<f64> {
    u64::from_str_radix(s, 16)
        .map(f64::from_bits)
        .map_err(|_| Error::Validation(format!("bad encoded number `{s}`")))
}

fn opt_bits(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), bits)
}

fn opt_unbits(s: &str) -> Result<Option<f64>> {
    if s == "-" {
        Ok(None)
    } else {
        unbits(s).map(Some)
    }
}

fn num<T: std::str::FromStr>(c: &Checkpoint, key: &str) -> Result<T> {
    let v = c.meta(key)?;
    v.parse().map_err(|_| Error::Validation(format!("bad value `{v}` for `{key}`")))
}

fn model_entries(model: &Model<f32>, meta: &mut Vec<(String, String)>, tensors: &mut Vec<(String, Tensor<f32>)>) {
    for (_, name, t) in model.store.iter() {
        tensors.push((format!("param/{name}"), t.clone()));
    }
    for d in model.domains.iter() {
        for bn in &d.bn {
            let n = bn.running_mean.len();
            let mean = Tensor::new(&[n], bn.running_mean.clone()).expect("length matches");
            let var = Tensor::new(&[n], bn.running_var.clone()).expect("length matches");
            tensors.push((format!("bn/{}/{}/mean", d.id, bn.site), mean));
            tensors.push((format!("bn/{}/{}/var", d.id, bn.site), var));
        }
    }
    meta.push(("params".into(), model.store.len().to_string()));
}

fn config_meta(run: &RunConfig) -> Vec<(String, String)> {
    let mut meta = vec![("format".to_string(), FORMAT_VERSION.to_string())];
    meta.extend(run.entries().into_iter().map(|(k, v)| (format!("config.{k}"), v)));
    meta
}

/// Model parameters and running statistics only.
pub fn save_model(run: &RunConfig, model: &Model<f32>) -> Checkpoint {
    let mut meta = config_meta(run);
    let mut tensors = Vec::new();
    model_entries(model, &mut meta, &mut tensors);
    Checkpoint { meta, tensors }
}

/// Full training state.
pub fn save_trainer(run: &RunConfig, t: &Trainer) -> Checkpoint {
    let mut c = save_model(run, &t.model);
    for ((_, name, _), v) in t.model.store.iter().zip(&t.sgd.velocity) {
        c.tensors.push((format!("velocity/{name}"), v.clone()));
    }
    let rng = &t.dropout_rng;
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    let m = &mut c.meta;
    m.push(("epoch".into(), t.epoch.to_string()));
    m.push(("cursor".into(), t.cursor.to_string()));
    m.push(("step".into(), t.step.to_string()));
    m.push(("epoch_loss_sum".into(), bits(t.epoch_loss.0)));
    m.push(("epoch_loss_count".into(), t.epoch_loss.1.to_string()));
    m.push(("rng.seed".into(), seed));
    m.push(("rng.stream".into(), rng.get_stream().to_string()));
    m.push(("rng.word_pos".into(), rng.get_word_pos().to_string()));
    m.push(("history".into(), t.history.len().to_string()));
    for (i, r) in t.history.iter().enumerate() {
        let v = r.val.as_ref();
        let fields = [
            r.epoch.to_string(),
            bits(r.lr),
            bits(r.train_loss),
            opt_bits(v.and_then(|s| s.auc_j)),
            opt_bits(v.and_then(|s| s.sim)),
            opt_bits(v.and_then(|s| s.cc)),
            opt_bits(v.and_then(|s| s.kld)),
            opt_bits(v.and_then(|s| s.nss)),
            v.map_or_else(|| "-".into(), |s| format!("{}/{}/{}/{}/{}", s.domain, s.n, s.excluded_auc, s.excluded_cc, s.excluded_nss)),
        ];
        m.push((format!("history.{i}"), fields.join(",")));
    }
    c
}

/// Rebuilds the run configuration stored in a checkpoint.
pub fn load_config(c: &Checkpoint) -> Result<RunConfig> {
    let version = c.meta("format")?;
    if version != FORMAT_VERSION {
        return Err(Error::Validation(format!("unsupported checkpoint format `{version}`")));
    }
    let mut run = RunConfig::default();
    for (k, v) in &c.meta {
        if let Some(key) = k.strip_prefix("config.") {
            run.set(key, v).map_err(|e| Error::Validation(format!("checkpoint config: {e}")))?;
        }
    }
    run.validate().map_err(|e| Error::Validation(format!("checkpoint config: {e}")))?;
    Ok(run)
}

pub fn load_model(c: &Checkpoint) -> Result<(RunConfig, Model<f32>)> {
    let run = load_config(c)?;
    let mut store = ParamStore::new();
    for (name, t) in &c.tensors {
        if let Some(p) = name.strip_prefix("param/") {
            store.add(p, t.clone())?;
        }
    }
    let expected: usize = num(c, "params")?;
    if store.len() != expected {
        return Err(Error::Validation(format!("checkpoint lists {expected} parameters, found {}", store.len())));
    }
    let mut model = Model::from_store(run.model.clone(), store)?;
    for d in model.domains.iter_mut() {
        for bn in d.bn.iter_mut() {
            let n = bn.running_mean.len();
            let get = |what: &str| -> Result<Vec<f32>> {
                let t = c.tensor(&format!("bn/{}/{}/{what}", d.id, bn.site))?;
                if t.shape() != [n] {
                    return Err(Error::Validation(format!("running {what} for {}/{} has shape {:?}", d.id, bn.site, t.shape())));
                }
                Ok(t.data().to_vec())
            };
            bn.running_mean = get("mean")?;
            bn.running_var = get("var")?;
        }
    }
    Ok((run, model))
}

pub fn load_trainer(c: &Checkpoint) -> Result<(RunConfig, Trainer)> {
    let (run, model) = load_model(c)?;
    let mut velocity = Vec::with_capacity(model.store.len());
    for (_, name, p) in model.store.iter() {
        let v = c.tensor(&format!("velocity/{name}"))?;
        if v.shape() != p.shape() {
            return Err(Error::Validation(format!("velocity of `{name}` has shape {:?}", v.shape())));
        }
        velocity.push(v.clone());
    }
    let seed_hex = c.meta("rng.seed")?;
    let mut seed = [0u8; 32];
    if seed_hex.len() != 64 || !seed_hex.is_ascii() {
        return Err(Error::Validation("rng.seed must be 64 hex digits".into()));
    }
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16)
            .map_err(|_| Error::Validation("rng.seed must be 64 hex digits".into()))?;
    }
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(num(c, "rng.stream")?);
    rng.set_word_pos(num(c, "rng.word_pos")?);
    let n_hist: usize = num(c, "history")?;
    let mut history = Vec::with_capacity(n_hist.min(1 << 16));
    for i in 0..n_hist {
        let line = c.meta(&format!("history.{i}"))?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Validation(format!("history line {i} has {} fields", f.len())));
        }
        let val = if f[8] == "-" {
            None
        } else {
            let g: Vec<&str> = f[8].split('/').collect();
            let n = |s: &str| s.parse::<usize>().map_err(|_| Error::Validation(format!("bad count in history line {i}")));
            if g.len() != 5 {
                return Err(Error::Validation(format!("history line {i} has a bad summary")));
            }
            Some(Summary {
                domain: g[0].to_string(),
                n: n(g[1])?,
                auc_j: opt_unbits(f[3])?,
                sim: opt_unbits(f[4])?,
                cc: opt_unbits(f[5])?,
                kld: opt_unbits(f[6])?,
                nss: opt_unbits(f[7])?,
                excluded_auc: n(g[2])?,
                excluded_cc: n(g[3])?,
                excluded_nss: n(g[4])?,
            })
        };
        history.push(EpochRecord {
            epoch: f[0].parse().map_err(|_| Error::Validation(format!("bad epoch in history line {i}")))?,
            lr: unbits(f[1])?,
            train_loss: unbits(f[2])?,
            val,
        });
    }
    let mut t = Trainer::from_model(run.train.clone(), model);
    t.sgd = SgdState { velocity };
    t.epoch = num(c, "epoch")?;
    t.cursor = num(c, "cursor")?;
    t.step = num(c, "step")?;
    t.epoch_loss = (unbits(c.meta("epoch_loss_sum")?)?, num(c, "epoch_loss_count")?);
    t.history = history;
    t.dropout_rng = rng;
    Ok((run, t))
}
