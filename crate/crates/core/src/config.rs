//! Plain `key = value` run configuration covering data generation, model
//! shape and training. Unknown keys are errors.

use std::fmt::Display;
use std::str::FromStr;

use crate::data::synth::{Rule, SceneSpec};
use crate::domain::PriorForm;
use crate::error::{Error, Result};
use crate::memory::{ChannelAttentionForm, UpdatePosition};
use crate::model::ModelConfig;
use crate::training::{substream, LossReduction, TrainConfig};

/// Settings for synthetic dataset generation.
#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub per_domain: usize,
    pub seq_len: usize,
    pub n_movers: usize,
    pub memory_task: bool,
    pub noise_sigma: f64,
    pub gt_sigma: f64,
    pub blob_sigma: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SceneSpec::default();
        DataConfig {
            per_domain: 16,
            seq_len: s.seq_len,
            n_movers: s.n_movers,
            memory_task: false,
            noise_sigma: s.noise_sigma,
            gt_sigma: s.gt_sigma,
            blob_sigma: s.blob_sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Domain ids with the rule each domain's data follows.
    pub domains: Vec<(String, Rule)>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = RunConfig {
            seed: 0,
            domains: vec![("a".into(), Rule::Leftmost), ("b".into(), Rule::Rightmost)],
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        };
        c.sync();
        c
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse().map_err(|e| Error::config(format!("bad value `{v}` for {key}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::config(format!("bad value `{v}` for {key}: expected true or false"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

pub fn update_position_name(p: UpdatePosition) -> &'static str {
    match p {
        UpdatePosition::AfterHmf => "after_hmf",
        UpdatePosition::AfterCa => "after_ca",
    }
}

pub fn parse_update_position(v: &str) -> Result<UpdatePosition> {
    match v {
        "after_hmf" => Ok(UpdatePosition::AfterHmf),
        "after_ca" => Ok(UpdatePosition::AfterCa),
        _ => Err(Error::config(format!("unknown update position `{v}` (after_hmf, after_ca)"))),
    }
}

fn prior_form_name(p: PriorForm) -> &'static str {
    match p {
        PriorForm::Gaussian => "gaussian",
        PriorForm::FreeMap => "free_map",
    }
}

fn ca_form_name(f: ChannelAttentionForm) -> &'static str {
    match f {
        ChannelAttentionForm::Channels => "channels",
        ChannelAttentionForm::Pixels => "pixels",
    }
}

impl RunConfig {
    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment line.
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::config(format!("line {}: duplicate key `{k}`", n + 1)));
            }
            c.set(k, v.trim()).map_err(|e| match e {
                Error::Config(m) => Error::config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Sets one key. Derived fields are refreshed afterwards.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let e = &mut self.model.encoder;
        let m = &mut self.model.memory;
        let t = &mut self.train;
        let d = &mut self.data;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "domains" => {
                let mut out = Vec::new();
                for part in v.split(',') {
                    let (id, rule) = part
                        .trim()
                        .split_once(':')
                        .ok_or_else(|| Error::config(format!("domain `{part}` must look like id:rule")))?;
                    let id = id.trim();
                    if id.is_empty() || id.contains(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '-')) {
                        return Err(Error::config(format!("domain id `{id}` must be alphanumeric")));
                    }
                    out.push((id.to_string(), rule.trim().parse()?));
                }
                self.domains = out;
            }
            "model.ablation" => self.model.ablation = v.parse()?,
            "model.prior_form" => {
                self.model.prior_form = match v {
                    "gaussian" => PriorForm::Gaussian,
                    "free_map" => PriorForm::FreeMap,
                    _ => return Err(Error::config(format!("unknown prior form `{v}` (gaussian, free_map)"))),
                }
            }
            "encoder.frame_h" => e.frame_h = parse(key, v)?,
            "encoder.frame_w" => e.frame_w = parse(key, v)?,
            "encoder.stub_channels" => e.stub_channels = parse_list(key, v)?,
            "encoder.key_channels" => e.key_channels = parse(key, v)?,
            "encoder.sa_residual" => e.sa_residual = parse_bool(key, v)?,
            "encoder.sa_max_pixels" => e.sa_max_pixels = parse(key, v)?,
            "encoder.gru_hidden" => e.gru_hidden = parse(key, v)?,
            "encoder.gru_kernel" => e.gru_kernel = parse(key, v)?,
            "encoder.priors" => e.priors = parse(key, v)?,
            "memory.channels" => m.channels = parse(key, v)?,
            "memory.expand_ratio" => m.expand_ratio = parse(key, v)?,
            "memory.upsample" => m.upsample = parse(key, v)?,
            "memory.heads" => m.heads = parse(key, v)?,
            "memory.bank_slots" => m.bank_slots = parse(key, v)?,
            "memory.bank_init_std" => m.bank_init_std = parse(key, v)?,
            "memory.ema_alpha" => m.ema_alpha = parse(key, v)?,
            "memory.update_position" => m.update_position = parse_update_position(v)?,
            "memory.dropout" => m.dropout = parse(key, v)?,
            "memory.residual" => m.residual = parse_bool(key, v)?,
            "memory.ca_form" => {
                m.ca_form = match v {
                    "channels" => ChannelAttentionForm::Channels,
                    "pixels" => ChannelAttentionForm::Pixels,
                    _ => return Err(Error::config(format!("unknown channel attention form `{v}` (channels, pixels)"))),
                }
            }
            "train.lr0" => t.lr0 = parse(key, v)?,
            "train.decay" => t.decay = parse(key, v)?,
            "train.momentum" => t.momentum = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.max_epochs" => t.max_epochs = parse(key, v)?,
            "train.patience" => t.patience = parse(key, v)?,
            "train.seq_len" => t.seq_len = parse(key, v)?,
            "train.max_steps" => t.max_steps = if v == "none" { None } else { Some(parse(key, v)?) },
            "train.reduction" => t.reduction = v.parse::<LossReduction>()?,
            "data.per_domain" => d.per_domain = parse(key, v)?,
            "data.seq_len" => d.seq_len = parse(key, v)?,
            "data.n_movers" => d.n_movers = parse(key, v)?,
            "data.memory_task" => d.memory_task = parse_bool(key, v)?,
            "data.noise_sigma" => d.noise_sigma = parse(key, v)?,
            "data.gt_sigma" => d.gt_sigma = parse(key, v)?,
            "data.blob_sigma" => d.blob_sigma = parse(key, v)?,
            _ => return Err(Error::config(format!("unknown key `{key}`"))),
        }
        self.sync();
        Ok(())
    }

    fn sync(&mut self) {
        self.model.domains = self.domains.iter().map(|(id, _)| id.clone()).collect();
        self.train.seed = self.seed;
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<&str> = self.domains.iter().map(|(d, _)| d.as_str()).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("domain ids must be unique"));
        }
        self.model.validate()?;
        self.train.validate()?;
        if self.data.per_domain == 0 {
            return Err(Error::config("data.per_domain must be at least 1"));
        }
        for i in 0..self.domains.len() {
            self.scene(i).validate()?;
        }
        Ok(())
    }

    /// Scene settings for the `i`-th domain, sized to the encoder input.
    pub fn scene(&self, i: usize) -> SceneSpec {
        let (id, rule) = &self.domains[i];
        SceneSpec {
            frame_h: self.model.encoder.frame_h,
            frame_w: self.model.encoder.frame_w,
            seq_len: self.data.seq_len,
            n_movers: self.data.n_movers,
            rule: *rule,
            memory_task: self.data.memory_task,
            noise_sigma: self.data.noise_sigma,
            seed: substream(self.seed, &format!("data.{id}")),
            map_stride: 2,
            gt_sigma: self.data.gt_sigma,
            blob_sigma: self.data.blob_sigma,
        }
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.model.encoder;
        let m = &self.model.memory;
        let t = &self.train;
        let d = &self.data;
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("seed", self.seed.to_string()),
            ("domains", self.domains.iter().map(|(id, r)| format!("{id}:{r}")).collect::<Vec<_>>().join(",")),
            ("model.ablation", self.model.ablation.to_string()),
            ("model.prior_form", prior_form_name(self.model.prior_form).into()),
            ("encoder.frame_h", e.frame_h.to_string()),
            ("encoder.frame_w", e.frame_w.to_string()),
            ("encoder.stub_channels", list(&e.stub_channels)),
            ("encoder.key_channels", e.key_channels.to_string()),
            ("encoder.sa_residual", e.sa_residual.to_string()),
            ("encoder.sa_max_pixels", e.sa_max_pixels.to_string()),
            ("encoder.gru_hidden", e.gru_hidden.to_string()),
            ("encoder.gru_kernel", e.gru_kernel.to_string()),
            ("encoder.priors", e.priors.to_string()),
            ("memory.channels", m.channels.to_string()),
            ("memory.expand_ratio", m.expand_ratio.to_string()),
            ("memory.upsample", m.upsample.to_string()),
            ("memory.heads", m.heads.to_string()),
            ("memory.bank_slots", m.bank_slots.to_string()),
            ("memory.bank_init_std", m.bank_init_std.to_string()),
            ("memory.ema_alpha", m.ema_alpha.to_string()),
            ("memory.update_position", update_position_name(m.update_position).into()),
            ("memory.dropout", m.dropout.to_string()),
            ("memory.residual", m.residual.to_string()),
            ("memory.ca_form", ca_form_name(m.ca_form).into()),
            ("train.lr0", t.lr0.to_string()),
            ("train.decay", t.decay.to_string()),
            ("train.momentum", t.momentum.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.patience", t.patience.to_string()),
            ("train.seq_len", t.seq_len.to_string()),
            ("train.max_steps", t.max_steps.map_or("none".into(), |s| s.to_string())),
            ("train.reduction", t.reduction.name().into()),
            ("data.per_domain", d.per_domain.to_string()),
            ("data.seq_len", d.seq_len.to_string()),
            ("data.n_movers", d.n_movers.to_string()),
            ("data.memory_task", d.memory_task.to_string()),
            ("data.noise_sigma", d.noise_sigma.to_string()),
            ("data.gt_sigma", d.gt_sigma.to_string()),
            ("data.blob_sigma", d.blob_sigma.to_string()),
        ]
    }

    /// The fully resolved configuration, parseable by [`RunConfig::parse`].
    pub fn resolved(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Ablation;

    #[test]
    fn defaults_round_trip_through_the_resolved_text() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.resolved()).unwrap(), c);
    }

    #[test]
    fn overrides_apply() {
        let c = RunConfig::parse(
            "# sweep\nseed = 7\ndomains = x:attend_fastest\nmodel.ablation = no_hmf\nmemory.update_position = after_ca\n\
             encoder.stub_channels = 4, 8\ntrain.max_steps = 12\ndata.memory_task = true\n",
        )
        .unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.seed, 7);
        assert_eq!(c.model.domains, vec!["x".to_string()]);
        assert_eq!(c.model.ablation, Ablation::NoHmf);
        assert_eq!(c.model.memory.update_position, UpdatePosition::AfterCa);
        assert_eq!(c.model.encoder.stub_channels, vec![4, 8]);
        assert_eq!(c.train.max_steps, Some(12));
        assert!(c.scene(0).memory_task);
        assert_eq!(RunConfig::parse(&c.resolved()).unwrap(), c);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for text in [
            "nope = 1",
            "train.lr0",
            "train.lr0 = fast",
            "seed = 1\nseed = 2",
            "domains = a",
            "domains = a:attend_leftmost,a:attend_rightmost",
            "domains = a b:attend_leftmost",
            "train.lr0 = -1",
            "model.ablation = none",
            "memory.residual = maybe",
        ] {
            let err = RunConfig::parse(text).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text}: {err}");
        }
        let err = RunConfig::parse("\n\nbogus = 3").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn domain_seeds_are_distinct() {
        let c = RunConfig::default();
        assert_ne!(c.scene(0).seed, c.scene(1).seed);
        assert_eq!(c.scene(0).rule, Rule::Leftmost);
    }
}
