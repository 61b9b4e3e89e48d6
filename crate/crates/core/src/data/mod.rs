//! Tensor files, preprocessing, augmentation, edge and boundary maps,
//! synthetic datasets and batching.

mod augment;
mod canny;
mod dataset;
mod plane;
mod preprocess;
mod sgt;
mod synth;

pub use augment::{augment, augment_with, gamma_shift, warp, AugmentParams, ELASTIC_ALPHA, ELASTIC_SIGMA, GAMMA_RANGE};
pub use canny::{canny, canny_default, CANNY_HIGH, CANNY_LOW, CANNY_SIGMA};
pub use dataset::{
    dataset_checksum, split, Batch, DatasetManifest, DatasetMeta, Loader, ManifestRow, Split, MANIFEST_FILE,
    MANIFEST_HEADER, META_FILE,
};
pub use plane::{gaussian_kernel, Plane};
pub use preprocess::{center_crop_pad, resample_to_spacing, zscore, TARGET_SPACING};
pub use sgt::{sgt_decode, sgt_encode, sgt_read, sgt_write, SGT_MAGIC};
pub use synth::{sample_rng, synth_generate, synth_sample, SynthConfig, TextureFamily, SYNTH_CLASSES};

use crate::tensor::{LabelMap, Tensor};

/// A resampled, cropped slice whose image is not yet z-scored.
#[derive(Clone, Debug, PartialEq)]
pub struct RawSlice {
    pub id: String,
    pub image: Plane,
    pub labels: LabelMap,
    pub spacing: (f64, f64),
}

/// A network-ready slice.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// `1×H×W`, z-scored.
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    /// `1×H×W` of 0/1.
    pub boundary: Tensor<f32>,
    /// `1×H×W` of 0/1.
    pub canny: Tensor<f32>,
    pub spacing: (f64, f64),
}

impl SegSample {
    /// Z-scores the image and derives the boundary and edge maps.
    pub fn finalize(id: &str, image: &Plane, labels: LabelMap, spacing: (f64, f64)) -> Self {
        let z = zscore(image);
        let edges = canny_default(&z);
        SegSample {
            id: id.to_string(),
            image: z.to_tensor(),
            boundary: mask_to_boundary(&labels, false).to_tensor(),
            canny: edges.to_tensor(),
            labels,
            spacing,
        }
    }
}

/// Class-boundary map of a label map as 0/1 values; see [`LabelMap::boundary`].
pub fn mask_to_boundary(labels: &LabelMap, dilate: bool) -> Plane {
    Plane {
        height: labels.height,
        width: labels.width,
        data: labels.boundary(dilate).iter().map(|&b| b as u8 as f32).collect(),
    }
}
