//! Synthetic short-axis-like slices: a bright disc, a ring of tissue around
//! it and an irregular crescent hugging one side, each with its own texture.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LabelMap;

use super::dataset::{dataset_checksum, split, DatasetManifest, DatasetMeta, ManifestRow, Split};
use super::{sgt_write, Plane, TARGET_SPACING};

pub const SYNTH_CLASSES: usize = 4;

/// Texture and intensity style of the generated structures. Both families
/// share the same shape distribution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum TextureFamily {
    #[default]
    A,
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    pub texture: TextureFamily,
    /// Fraction of samples assigned to the training split.
    pub train_fraction: f64,
}

impl SynthConfig {
    pub fn new(n: usize, size: usize, seed: u64) -> Self {
        SynthConfig {
            n,
            size,
            seed,
            texture: TextureFamily::A,
            train_fraction: 0.8,
        }
    }
}

/// Star-shaped radius `r·(1 + a₁ sin(2θ+φ₁) + a₂ sin(3θ+φ₂))`.
#[derive(Clone, Copy, Debug)]
struct Wobble {
    a: [f64; 2],
    phase: [f64; 2],
}

impl Wobble {
    fn sample(rng: &mut impl Rng, amp: f64) -> Self {
        Wobble {
            a: [rng.gen_range(0.0..amp), rng.gen_range(0.0..amp)],
            phase: [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)],
        }
    }

    fn factor(&self, theta: f64) -> f64 {
        1.0 + self.a[0] * (2.0 * theta + self.phase[0]).sin() + self.a[1] * (3.0 * theta + self.phase[1]).sin()
    }
}

/// Label map of one slice.
fn shapes(size: usize, rng: &mut impl Rng) -> LabelMap {
    let s = size as f64;
    let c = (s / 2.0 - 0.5 + rng.gen_range(-0.06..0.06) * s, s / 2.0 - 0.5 + rng.gen_range(-0.06..0.06) * s);
    let r1 = rng.gen_range(0.09..0.13) * s;
    let thick = rng.gen_range(0.045..0.065) * s;
    let w1 = Wobble::sample(rng, 0.06);
    let thick_phase = rng.gen_range(0.0..2.0 * PI);
    let r2_nominal = r1 + thick;
    let dir = rng.gen_range(0.0..2.0 * PI);
    let dist = r2_nominal * rng.gen_range(0.7..1.0);
    let r3 = r2_nominal * rng.gen_range(0.9..1.15);
    let w3 = Wobble::sample(rng, 0.12);
    let c3 = (c.0 + dist * dir.sin(), c.1 + dist * dir.cos());

    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - c.0, x as f64 - c.1);
            let rho = dy.hypot(dx);
            let theta = dy.atan2(dx);
            let inner = r1 * w1.factor(theta);
            let outer = inner + thick * (1.0 + 0.3 * (theta + thick_phase).sin());
            let label = if rho < inner {
                1
            } else if rho < outer {
                2
            } else {
                let (ey, ex) = (y as f64 - c3.0, x as f64 - c3.1);
                if ey.hypot(ex) < r3 * w3.factor(ey.atan2(ex)) {
                    3
                } else {
                    0
                }
            };
            data.push(label);
        }
    }
    LabelMap::new(size, size, data).expect("sizes agree")
}

struct Look {
    mean: [f32; 4],
    noise: f32,
    blur: f64,
}

fn look(family: TextureFamily) -> Look {
    match family {
        TextureFamily::A => Look {
            mean: [0.15, 0.85, 0.45, 0.70],
            noise: 0.08,
            blur: 0.8,
        },
        TextureFamily::B => Look {
            mean: [0.25, 0.75, 0.50, 0.62],
            noise: 0.10,
            blur: 0.8,
        },
    }
}

/// Per-class texture value at a pixel; `phase` randomizes patterns per slice.
fn texture(family: TextureFamily, class: u8, y: f64, x: f64, phase: &[f64; 4], blobs: &Plane) -> f32 {
    let b = blobs.get(y as usize, x as usize) as f64;
    let v = match (family, class) {
        (TextureFamily::A, 0) => 0.08 * b,
        (TextureFamily::A, 1) => 0.04 * (x * 0.9 + phase[1]).sin() * (y * 0.9).cos(),
        (TextureFamily::A, 2) => 0.12 * (2.0 * PI * y / 4.0 + phase[2]).sin(),
        (TextureFamily::A, _) => 0.15 * b,
        (TextureFamily::B, 0) => 0.06 * (2.0 * PI * (x + y) / 9.0 + phase[0]).sin(),
        (TextureFamily::B, 1) => 0.10 * if ((y as i64 / 3) + (x as i64 / 3)) % 2 == 0 { 1.0 } else { -1.0 },
        (TextureFamily::B, 2) => 0.12 * (2.0 * PI * (x - y) / 6.0 + phase[2]).sin(),
        (TextureFamily::B, _) => 0.12 * (2.0 * PI * x / 5.0 + phase[3]).sin(),
    };
    v as f32
}

/// One synthetic `(image, labels)` pair. Intensities are in arbitrary
/// scanner-like units with a random offset.
pub fn synth_sample(size: usize, family: TextureFamily, rng: &mut impl Rng) -> (Plane, LabelMap) {
    let labels = shapes(size, rng);
    let lk = look(family);
    let phase = [(); 4].map(|_| rng.gen_range(0.0..2.0 * PI));
    let blobs = {
        let raw = Plane::from_fn(size, size, |_, _| rng.sample::<f32, _>(StandardNormal));
        let smooth = raw.gaussian_blur(1.5);
        let peak = smooth.data.iter().fold(1e-6f32, |m, v| m.max(v.abs()));
        Plane {
            data: smooth.data.iter().map(|v| v / peak).collect(),
            ..smooth
        }
    };
    let clean = Plane::from_fn(size, size, |y, x| {
        let k = labels.get(y, x);
        lk.mean[k as usize] + texture(family, k, y as f64, x as f64, &phase, &blobs)
    })
    .gaussian_blur(lk.blur);
    let offset = rng.gen_range(0.0..200.0f32);
    let gain = rng.gen_range(800.0..1200.0f32);
    let image = Plane {
        data: clean
            .data
            .iter()
            .map(|&v| {
                let n: f32 = StandardNormal.sample(rng);
                offset + gain * (v + lk.noise * n)
            })
            .collect(),
        ..clean
    };
    (image, labels)
}

/// Per-sample generator: stream `index` of a ChaCha8 keyed by `seed`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Writes `images/*.sgt`, `labels/*.sgt`, `manifest.tsv` and `dataset.json`
/// under `out` and returns the dataset checksum.
pub fn synth_generate(out: &Path, cfg: &SynthConfig) -> Result<String> {
    if cfg.size < 8 || cfg.size % 8 != 0 {
        return Err(Error::Config(format!("synthetic size must be a positive multiple of 8, got {}", cfg.size)));
    }
    if !(0.0..=1.0).contains(&cfg.train_fraction) {
        return Err(Error::Config(format!("train fraction {} outside [0, 1]", cfg.train_fraction)));
    }
    for sub in ["images", "labels"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut rows = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let id = format!("s{i:05}");
        let (image, labels) = synth_sample(cfg.size, cfg.texture, &mut sample_rng(cfg.seed, i as u64));
        let image_rel = format!("images/{id}.sgt");
        let label_rel = format!("labels/{id}.sgt");
        sgt_write(&image.to_tensor(), &out.join(&image_rel))?;
        sgt_write(&labels.to_tensor(), &out.join(&label_rel))?;
        rows.push(ManifestRow {
            id,
            image: image_rel,
            label: label_rel,
            split: Split::Train,
        });
    }
    let manifest = DatasetManifest {
        root: out.to_path_buf(),
        rows,
        meta: DatasetMeta {
            classes: SYNTH_CLASSES,
            seed: cfg.seed,
            spacing: TARGET_SPACING,
            texture: Some(cfg.texture),
        },
    };
    let manifest = split(&manifest, cfg.train_fraction, cfg.seed);
    manifest.write()?;
    dataset_checksum(&manifest)
}
