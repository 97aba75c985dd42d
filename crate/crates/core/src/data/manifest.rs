//! Dataset directory layout and the tab-separated manifest indexing it.
//!
//! Layout: `<root>/<domain>/<sample>/{frames,gt,fix}.tsr`, plus PGM previews
//! of each ground-truth frame. The manifest lives at `<root>/manifest.tsv`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::format::{read_tensor, write_atomic, write_map, write_tensor};
use super::synth::Sample;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MANIFEST_NAME: &str = "manifest.tsv";
pub const FRAMES: &str = "frames.tsr";
pub const GT: &str = "gt.tsr";
pub const FIX: &str = "fix.tsr";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Usage(format!("unknown split `{s}` (train, val, test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub domain: String,
    pub seq: String,
    pub gt: String,
    pub fix: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub entries: Vec<Entry>,
}

impl Manifest {
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.domain, e.seq, e.gt, e.fix, e.split));
        }
        s
    }

    /// Parses manifest text: five tab-separated fields per line.
    pub fn parse(text: &[u8]) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .has_headers(false)
            .flexible(true)
            .quoting(false)
            .from_reader(text);
        let mut entries = Vec::new();
        for (line, rec) in rdr.byte_records().enumerate() {
            let rec = rec.map_err(|e| Error::format(e.position().map_or(0, |p| p.byte()), e))?;
            let offset = rec.position().map_or(0, |p| p.byte());
            if rec.len() != 5 {
                return Err(Error::format(offset, format!("line {} has {} fields, expected 5", line + 1, rec.len())));
            }
            let field = |i: usize| -> Result<String> {
                let f = std::str::from_utf8(&rec[i])
                    .map_err(|_| Error::format(offset, format!("line {} is not UTF-8", line + 1)))?;
                if f.is_empty() {
                    return Err(Error::format(offset, format!("line {} has an empty field", line + 1)));
                }
                Ok(f.to_string())
            };
            entries.push(Entry {
                domain: field(0)?,
                seq: field(1)?,
                gt: field(2)?,
                fix: field(3)?,
                split: field(4)?.parse().map_err(|_| {
                    Error::format(offset, format!("line {} has an unknown split", line + 1))
                })?,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_NAME);
        Manifest::parse(&fs::read(&path).map_err(|e| Error::io(&path, e))?)
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        write_atomic(&root.join(MANIFEST_NAME), self.to_tsv().as_bytes())
    }

    /// Fails listing every referenced file that does not exist under `root`.
    pub fn validate(&self, root: &Path) -> Result<()> {
        let dangling: Vec<&str> = self
            .entries
            .iter()
            .flat_map(|e| [&e.seq, &e.gt, &e.fix])
            .filter(|p| !root.join(p).is_file())
            .map(String::as_str)
            .collect();
        if dangling.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(format!("manifest references missing files: {}", dangling.join(", "))))
        }
    }

    pub fn domains(&self) -> Vec<String> {
        let mut d: Vec<String> = Vec::new();
        for e in &self.entries {
            if !d.contains(&e.domain) {
                d.push(e.domain.clone());
            }
        }
        d
    }
}

/// Writes one sample's tensors and ground-truth previews.
pub fn write_sample(root: &Path, s: &Sample) -> Result<()> {
    let dir = root.join(&s.domain).join(&s.id);
    write_tensor(&dir.join(FRAMES), &s.frames)?;
    write_tensor(&dir.join(GT), &s.gt)?;
    write_tensor(&dir.join(FIX), &s.fixations)?;
    let sh = s.gt.shape();
    let per = sh[1] * sh[2];
    for t in 0..sh[0] {
        let map = Tensor::new(&sh[1..], s.gt.data()[t * per..(t + 1) * per].to_vec())?;
        write_map(&dir.join(format!("gt_{t:02}.pgm")), &map)?;
    }
    Ok(())
}

fn split_key(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

/// Number of train and validation items among `n`; the rest are test.
pub fn split_counts(n: usize) -> (usize, usize) {
    let train = ((n as f64) * 0.70).round() as usize;
    let val = (((n as f64) * 0.15).round() as usize).min(n - train);
    (train, val)
}

/// Indexes every sample directory under `root`. Splits are assigned per
/// domain by ranking sample ids on a seeded hash.
pub fn build_manifest(root: &Path, seed: u64) -> Result<Manifest> {
    let mut entries = Vec::new();
    let mut domains: Vec<PathBuf> = list_dirs(root)?;
    domains.sort();
    for ddir in domains {
        let domain = file_name(&ddir);
        let mut samples: Vec<(String, [u8; 32])> = list_dirs(&ddir)?
            .into_iter()
            .filter(|p| p.join(FRAMES).is_file())
            .map(|p| {
                let id = format!("{domain}/{}", file_name(&p));
                let k = split_key(seed, &id);
                (id, k)
            })
            .collect();
        samples.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
        let (n_train, n_val) = split_counts(samples.len());
        let mut ranked: Vec<(String, Split)> = samples
            .into_iter()
            .enumerate()
            .map(|(i, (id, _))| {
                let split = if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
                (id, split)
            })
            .collect();
        ranked.sort();
        for (id, split) in ranked {
            entries.push(Entry {
                domain: domain.clone(),
                seq: format!("{id}/{FRAMES}"),
                gt: format!("{id}/{GT}"),
                fix: format!("{id}/{FIX}"),
                split,
            });
        }
    }
    Ok(Manifest { entries })
}

fn list_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for ent in rd {
        let ent = ent.map_err(|e| Error::io(dir, e))?;
        if ent.file_type().map_err(|e| Error::io(ent.path(), e))?.is_dir() {
            out.push(ent.path());
        }
    }
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// A sample loaded back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded {
    pub domain: String,
    pub id: String,
    pub frames: Tensor<f32>,
    pub gt: Tensor<f32>,
    pub fixations: Tensor<f32>,
}

impl From<Sample> for Loaded {
    fn from(s: Sample) -> Self {
        Loaded { domain: s.domain, id: s.id, frames: s.frames, gt: s.gt, fixations: s.fixations }
    }
}

/// Loads every sample of `split`, in manifest order.
pub fn load_split(root: &Path, manifest: &Manifest, split: Split) -> Result<Vec<Loaded>> {
    manifest.validate(root)?;
    let mut out = Vec::new();
    for e in manifest.entries.iter().filter(|e| e.split == split) {
        let frames = read_tensor(&root.join(&e.seq))?;
        let gt = read_tensor(&root.join(&e.gt))?;
        let fixations = read_tensor(&root.join(&e.fix))?;
        let (fs, gs) = (frames.shape(), gt.shape());
        if fs.len() != 4 || gs.len() != 3 || fs[0] != gs[0] || fixations.shape() != gs {
            return Err(Error::Validation(format!(
                "sample {} has inconsistent shapes {fs:?} / {gs:?} / {:?}",
                e.seq,
                fixations.shape()
            )));
        }
        let id = e.seq.trim_end_matches(&format!("/{FRAMES}")).to_string();
        out.push(Loaded { domain: e.domain.clone(), id, frames, gt, fixations });
    }
    Ok(out)
}
