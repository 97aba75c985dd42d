//! Synthetic driving-like scenes: bright movers on textured noise, with a
//! per-domain rule choosing which mover draws attention.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    Leftmost,
    Rightmost,
    Fastest,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::Leftmost => "attend_leftmost",
            Rule::Rightmost => "attend_rightmost",
            Rule::Fastest => "attend_fastest",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Rule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [Rule::Leftmost, Rule::Rightmost, Rule::Fastest]
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::config(format!("unknown rule `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub frame_h: usize,
    pub frame_w: usize,
    pub seq_len: usize,
    pub n_movers: usize,
    pub rule: Rule,
    /// Target is marked by colour in the first two frames only.
    pub memory_task: bool,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Ground-truth maps are rendered at `frame / map_stride`.
    pub map_stride: usize,
    /// Ground-truth Gaussian width in map pixels.
    pub gt_sigma: f64,
    /// Mover blob width in frame pixels.
    pub blob_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            frame_h: 32,
            frame_w: 32,
            seq_len: 5,
            n_movers: 3,
            rule: Rule::Leftmost,
            memory_task: false,
            noise_sigma: 0.05,
            seed: 0,
            map_stride: 2,
            gt_sigma: 1.5,
            blob_sigma: 1.2,
        }
    }
}

/// Number of fixation pixels taken from the top of each ground-truth map.
pub const FIXATIONS: usize = 3;

const CUE: [f32; 3] = [1.0, 0.15, 0.15];
const DECOY: [f32; 3] = [0.15, 0.15, 1.0];
const NEUTRAL: [f32; 3] = [0.85, 0.85, 0.85];

impl SceneSpec {
    pub fn map_h(&self) -> usize {
        self.frame_h / self.map_stride.max(1)
    }

    pub fn map_w(&self) -> usize {
        self.frame_w / self.map_stride.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_h < 8 || self.frame_w < 8 || self.seq_len == 0 {
            return Err(Error::config("frames must be at least 8x8 and sequences non-empty"));
        }
        if self.map_stride == 0 || self.frame_h % self.map_stride != 0 || self.frame_w % self.map_stride != 0 {
            return Err(Error::config(format!("map stride {} must divide the frame", self.map_stride)));
        }
        if self.n_movers == 0 {
            return Err(Error::config("at least one mover is required"));
        }
        let footprint = (4.0 * self.blob_sigma + 2.0).powi(2);
        if self.n_movers as f64 * footprint > (self.frame_h * self.frame_w) as f64 / 2.0 {
            return Err(Error::config(format!(
                "{} movers do not fit in a {}x{} frame",
                self.n_movers, self.frame_h, self.frame_w
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.gt_sigma > 0.0 && self.blob_sigma > 0.0) {
            return Err(Error::config("noise, gt and blob widths must be nonnegative/positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mover {
    /// Centre per frame, in frame pixels.
    pub track: Vec<(f64, f64)>,
    pub speed: f64,
}

/// Everything random about one sequence, before rendering.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub movers: Vec<Mover>,
    /// Index of the cued mover in memory-task scenes.
    pub cued: usize,
    /// Static texture, `3×H×W`.
    pub texture: Vec<f32>,
    /// Per-frame noise, `T×3×H×W`.
    pub noise: Vec<f32>,
}

impl Scene {
    pub fn sample(spec: &SceneSpec, rng: &mut impl Rng) -> Scene {
        let (h, w) = (spec.frame_h as f64, spec.frame_w as f64);
        let margin = 2.0 * spec.blob_sigma;
        let mut speeds: Vec<f64> = (0..spec.n_movers).map(|k| 0.4 + 0.7 * k as f64).collect();
        speeds.shuffle(rng);
        let movers = speeds
            .into_iter()
            .map(|speed| {
                let mut x = rng.gen_range(margin..w - 1.0 - margin);
                let mut y = rng.gen_range(margin..h - 1.0 - margin);
                let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                let (mut vx, mut vy) = (speed * angle.cos(), speed * angle.sin());
                let mut track = Vec::with_capacity(spec.seq_len);
                for _ in 0..spec.seq_len {
                    track.push((x, y));
                    x += vx;
                    y += vy;
                    if x < margin || x > w - 1.0 - margin {
                        vx = -vx;
                        x = x.clamp(margin, w - 1.0 - margin);
                    }
                    if y < margin || y > h - 1.0 - margin {
                        vy = -vy;
                        y = y.clamp(margin, h - 1.0 - margin);
                    }
                }
                Mover { track, speed }
            })
            .collect();
        let cued = rng.gen_range(0..spec.n_movers);
        let hw = spec.frame_h * spec.frame_w;
        let mut texture = vec![0.0f32; 3 * hw];
        for c in 0..3 {
            let waves: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.gen_range(0.1..0.6),
                        rng.gen_range(0.1..0.6),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            for p in 0..hw {
                let (v, u) = ((p / spec.frame_w) as f64, (p % spec.frame_w) as f64);
                let s: f64 = waves.iter().map(|&(fx, fy, ph)| (fx * u + fy * v + ph).sin()).sum();
                texture[c * hw + p] = (0.3 + 0.05 * s) as f32;
            }
        }
        let noise = (0..spec.seq_len * 3 * hw)
            .map(|_| (rng.sample::<f64, _>(StandardNormal) * spec.noise_sigma) as f32)
            .collect();
        Scene { movers, cued, texture, noise }
    }

    /// Left-right mirror image of the scene.
    pub fn mirrored(&self, spec: &SceneSpec) -> Scene {
        let w = spec.frame_w;
        let flip = |buf: &[f32]| -> Vec<f32> {
            buf.chunks(w).flat_map(|row| row.iter().rev().copied()).collect()
        };
        Scene {
            movers: self
                .movers
                .iter()
                .map(|m| Mover {
                    track: m.track.iter().map(|&(x, y)| ((w - 1) as f64 - x, y)).collect(),
                    speed: m.speed,
                })
                .collect(),
            cued: self.cued,
            texture: flip(&self.texture),
            noise: flip(&self.noise),
        }
    }

    /// Mover the rule selects at frame `t`.
    pub fn target(&self, spec: &SceneSpec, t: usize) -> usize {
        if spec.memory_task {
            return self.cued;
        }
        let key = |i: usize| match spec.rule {
            Rule::Leftmost => -self.movers[i].track[t].0,
            Rule::Rightmost => self.movers[i].track[t].0,
            Rule::Fastest => self.movers[i].speed,
        };
        (0..self.movers.len())
            .fold(0, |best, i| if key(i) > key(best) { i } else { best })
    }

    fn colour(&self, spec: &SceneSpec, mover: usize, t: usize, palette: &[[f32; 3]]) -> [f32; 3] {
        if spec.memory_task {
            if t < 2 {
                if mover == self.cued {
                    CUE
                } else {
                    DECOY
                }
            } else {
                NEUTRAL
            }
        } else {
            palette[mover % palette.len()]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: String,
    /// `T×3×H₀×W₀`, values roughly in `[0, 1]`.
    pub frames: Tensor<f32>,
    /// `T×H×W`, each frame normalized.
    pub gt: Tensor<f32>,
    /// `T×H×W`, binary.
    pub fixations: Tensor<f32>,
    /// Set for memory-task scenes whose cue colours are equalized after
    /// frame 2.
    pub cue_equalized: bool,
}

const PALETTE: [[f32; 3]; 4] = [
    [0.95, 0.9, 0.3],
    [0.3, 0.95, 0.9],
    [0.95, 0.4, 0.9],
    [0.9, 0.9, 0.9],
];

/// Renders frames, ground truth and fixations for a sampled scene.
pub fn render(spec: &SceneSpec, scene: &Scene, id: String, domain: String) -> Result<Sample> {
    let (fh, fw) = (spec.frame_h, spec.frame_w);
    let hw = fh * fw;
    let t_len = spec.seq_len;
    let mut frames = vec![0.0f32; t_len * 3 * hw];
    for t in 0..t_len {
        let frame = &mut frames[t * 3 * hw..(t + 1) * 3 * hw];
        frame.copy_from_slice(&scene.texture);
        for (f, n) in frame.iter_mut().zip(&scene.noise[t * 3 * hw..(t + 1) * 3 * hw]) {
            *f += n;
        }
        for (i, m) in scene.movers.iter().enumerate() {
            let (cx, cy) = m.track[t];
            let col = scene.colour(spec, i, t, &PALETTE);
            let r = (3.0 * spec.blob_sigma).ceil() as isize;
            for v in (cy.round() as isize - r).max(0)..=(cy.round() as isize + r).min(fh as isize - 1) {
                for u in (cx.round() as isize - r).max(0)..=(cx.round() as isize + r).min(fw as isize - 1) {
                    let d2 = (u as f64 - cx).powi(2) + (v as f64 - cy).powi(2);
                    let a = (-d2 / (2.0 * spec.blob_sigma * spec.blob_sigma)).exp() as f32;
                    let p = v as usize * fw + u as usize;
                    for c in 0..3 {
                        let px = &mut frame[c * hw + p];
                        *px = *px * (1.0 - a) + col[c] * a;
                    }
                }
            }
        }
    }
    let (mh, mw) = (spec.map_h(), spec.map_w());
    let s = spec.map_stride as f64;
    let mut gt = vec![0.0f32; t_len * mh * mw];
    let mut fix = vec![0.0f32; t_len * mh * mw];
    for t in 0..t_len {
        let (cx, cy) = scene.movers[scene.target(spec, t)].track[t];
        let (mx, my) = ((cx + 0.5) / s - 0.5, (cy + 0.5) / s - 0.5);
        let map = &mut gt[t * mh * mw..(t + 1) * mh * mw];
        let mut total = 0.0f64;
        let vals: Vec<f64> = (0..mh * mw)
            .map(|p| {
                let (v, u) = ((p / mw) as f64, (p % mw) as f64);
                let g = (-((u - mx).powi(2) + (v - my).powi(2)) / (2.0 * spec.gt_sigma * spec.gt_sigma)).exp();
                total += g;
                g
            })
            .collect();
        for (m, g) in map.iter_mut().zip(&vals) {
            *m = (g / total) as f32;
        }
        let mut order: Vec<usize> = (0..mh * mw).collect();
        order.sort_by(|&a, &b| vals[b].partial_cmp(&vals[a]).expect("finite").then(a.cmp(&b)));
        for &p in &order[..FIXATIONS.min(mh * mw)] {
            fix[t * mh * mw + p] = 1.0;
        }
    }
    Ok(Sample {
        id,
        domain,
        frames: Tensor::new(&[t_len, 3, fh, fw], frames)?,
        gt: Tensor::new(&[t_len, mh, mw], gt)?,
        fixations: Tensor::new(&[t_len, mh, mw], fix)?,
        cue_equalized: spec.memory_task,
    })
}

/// Per-sample generator seed, so samples can be produced independently.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Generates `n` samples for one domain; a pure function of its inputs.
pub fn generate(spec: &SceneSpec, domain: &str, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("sample count must be at least 1"));
    }
    (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, i));
            let scene = Scene::sample(spec, &mut rng);
            render(spec, &scene, format!("{domain}-{i:04}"), domain.to_string())
        })
        .collect()
}
