use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{LabelMap, Tensor};

use super::synth::{sample_rng, TextureFamily};
use super::{augment, center_crop_pad, resample_to_spacing, sgt_read, Plane, RawSlice, SegSample, TARGET_SPACING};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const META_FILE: &str = "dataset.json";
pub const MANIFEST_HEADER: &str = "id\timage\tlabel\tsplit";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    /// Paths relative to the dataset root.
    pub image: String,
    pub label: String,
    pub split: Split,
}

/// Dataset-wide facts stored next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub classes: usize,
    pub seed: u64,
    /// Pixel spacing of the stored slices, mm.
    pub spacing: (f64, f64),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub texture: Option<TextureFamily>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
    pub meta: DatasetMeta,
}

impl DatasetManifest {
    pub fn read(root: &Path) -> Result<Self> {
        let meta_path = root.join(META_FILE);
        let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
        if meta.classes < 2 || meta.classes > 255 {
            return Err(Error::Data(format!("{}: classes must be in [2, 255]", meta_path.display())));
        }
        let path = root.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Data(format!("{}: header must be '{MANIFEST_HEADER}'", path.display())));
        }
        let mut rows = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.is_empty()) {
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = |m: &str| Error::Data(format!("{} line {}: {m}", path.display(), n + 2));
            if cols.len() != 4 {
                return Err(bad("expected 4 tab-separated columns"));
            }
            if !seen.insert(cols[0].to_string()) {
                return Err(bad(&format!("duplicate id '{}'", cols[0])));
            }
            rows.push(ManifestRow {
                id: cols[0].into(),
                image: cols[1].into(),
                label: cols[2].into(),
                split: cols[3].parse().map_err(|e: Error| bad(&e.to_string()))?,
            });
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            rows,
            meta,
        })
    }

    pub fn write(&self) -> Result<()> {
        let mut text = String::from(MANIFEST_HEADER);
        text.push('\n');
        for r in &self.rows {
            text += &format!("{}\t{}\t{}\t{}\n", r.id, r.image, r.label, r.split);
        }
        let path = self.root.join(MANIFEST_FILE);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let meta = self.root.join(META_FILE);
        let json = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        std::fs::write(&meta, json + "\n").map_err(|e| Error::io(&meta, e))
    }

    pub fn rows_in(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn row(&self, id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.id == id)
    }

    /// Reads, resamples and crops one row; the image is not yet z-scored.
    pub fn load_raw(&self, row: &ManifestRow, crop: (usize, usize)) -> Result<RawSlice> {
        let image = Plane::from_tensor(&sgt_read(&self.root.join(&row.image))?)?;
        let lt = sgt_read(&self.root.join(&row.label))?;
        let labels = LabelMap::from_tensor(&lt, self.meta.classes)
            .map_err(|e| Error::Data(format!("{}: {e}", row.label)))?;
        if (labels.height, labels.width) != (image.height, image.width) {
            return Err(Error::Data(format!(
                "{}: image is {}x{} but labels are {}x{}",
                row.id, image.height, image.width, labels.height, labels.width
            )));
        }
        if !image.data.iter().all(|v| v.is_finite()) {
            return Err(Error::Data(format!("{}: non-finite intensities", row.id)));
        }
        let (image, labels, spacing) = resample_to_spacing(&image, &labels, self.meta.spacing, TARGET_SPACING)?;
        let (image, labels) = center_crop_pad(&image, &labels, crop)?;
        Ok(RawSlice {
            id: row.id.clone(),
            image,
            labels,
            spacing,
        })
    }

    pub fn load_split(&self, split: Split, crop: (usize, usize)) -> Result<Vec<RawSlice>> {
        self.rows_in(split).map(|r| self.load_raw(r, crop)).collect()
    }
}

/// Seeded shuffle into train and val; `train_fraction` of the rows (rounded)
/// go to train.
pub fn split(manifest: &DatasetManifest, train_fraction: f64, seed: u64) -> DatasetManifest {
    let mut order: Vec<usize> = (0..manifest.rows.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (manifest.rows.len() as f64 * train_fraction).round() as usize;
    let mut out = manifest.clone();
    for (rank, &i) in order.iter().enumerate() {
        out.rows[i].split = if rank < n_train { Split::Train } else { Split::Val };
    }
    out
}

/// SHA-256 over the manifest, metadata and every referenced file, in row order.
pub fn dataset_checksum(manifest: &DatasetManifest) -> Result<String> {
    let mut h = Sha256::new();
    for name in [MANIFEST_FILE, META_FILE] {
        let p = manifest.root.join(name);
        h.update(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
    }
    for r in &manifest.rows {
        for rel in [&r.image, &r.label] {
            let p = manifest.root.join(rel);
            h.update(std::fs::read(&p).map_err(|e| Error::io(&p, e))?);
        }
    }
    Ok(hex::encode(h.finalize()))
}

/// A stacked mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `N×1×H×W`, z-scored.
    pub image: Tensor<f32>,
    /// `N×1×H×W` binary edge channel.
    pub canny: Tensor<f32>,
    /// `N×1×H×W` binary class-boundary target.
    pub boundary: Tensor<f32>,
    /// `N×K×H×W` one-hot labels.
    pub target: Tensor<f32>,
    pub labels: Vec<LabelMap>,
}

impl Batch {
    pub fn from_samples(samples: &[SegSample], classes: usize) -> Result<Self> {
        let stack = |f: fn(&SegSample) -> &Tensor<f32>| {
            let items: Vec<Tensor<f32>> = samples.iter().map(|s| f(s).clone()).collect();
            Tensor::stack_batch(&items)
        };
        let labels: Vec<LabelMap> = samples.iter().map(|s| s.labels.clone()).collect();
        Ok(Batch {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            image: stack(|s| &s.image)?,
            canny: stack(|s| &s.canny)?,
            boundary: stack(|s| &s.boundary)?,
            target: LabelMap::one_hot(&labels, classes)?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Shuffles, augments and batches preprocessed slices. Every random choice
/// comes from per-epoch and per-sample streams of `seed`, so the output does
/// not depend on `workers`.
#[derive(Clone, Debug)]
pub struct Loader {
    pub samples: Vec<RawSlice>,
    pub classes: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub augment: bool,
    pub workers: usize,
}

impl Loader {
    /// Deterministic, unshuffled, unaugmented loader for evaluation.
    pub fn eval(samples: Vec<RawSlice>, classes: usize, batch_size: usize) -> Self {
        Loader {
            samples,
            classes,
            batch_size,
            seed: 0,
            shuffle: false,
            augment: false,
            workers: 1,
        }
    }

    pub fn num_batches(&self) -> usize {
        self.samples.len().div_ceil(self.batch_size.max(1))
    }

    /// Sample indices of each batch in `epoch`.
    pub fn batch_indices(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        if self.shuffle {
            order.shuffle(&mut sample_rng(self.seed, epoch as u64));
        }
        order.chunks(self.batch_size.max(1)).map(|c| c.to_vec()).collect()
    }

    /// Prepares one sample for `epoch`.
    pub fn prepare(&self, index: usize, epoch: usize) -> SegSample {
        let raw = &self.samples[index];
        if self.augment {
            // Streams below 2^32 belong to the epoch shuffles.
            let stream = (1u64 << 32) | ((epoch as u64) << 20) | index as u64;
            augment(raw, &mut sample_rng(self.seed, stream))
        } else {
            SegSample::finalize(&raw.id, &raw.image, raw.labels.clone(), raw.spacing)
        }
    }

    pub fn batch(&self, indices: &[usize], epoch: usize) -> Result<Batch> {
        let workers = self.workers.clamp(1, indices.len().max(1));
        let samples: Vec<SegSample> = if workers == 1 {
            indices.iter().map(|&i| self.prepare(i, epoch)).collect()
        } else {
            let chunk = indices.len().div_ceil(workers);
            std::thread::scope(|s| {
                let handles: Vec<_> = indices
                    .chunks(chunk)
                    .map(|part| s.spawn(move || part.iter().map(|&i| self.prepare(i, epoch)).collect::<Vec<_>>()))
                    .collect();
                handles.into_iter().flat_map(|h| h.join().expect("loader worker panicked")).collect()
            })
        };
        Batch::from_samples(&samples, self.classes)
    }

    pub fn epoch(&self, epoch: usize) -> impl Iterator<Item = Result<Batch>> + '_ {
        self.batch_indices(epoch).into_iter().map(move |idx| self.batch(&idx, epoch))
    }
}
