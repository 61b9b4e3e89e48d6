use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Tiny,
    Dense121,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Output classes, background included.
    pub num_classes: usize,
    pub input_channels: usize,
    /// Layers per dense block, shallow to deep.
    pub encoder_blocks: Vec<usize>,
    pub growth: usize,
    pub stem_channels: usize,
    pub shape_stream_width: usize,
    /// Output widths of the decoders, finest first; the last entry is the
    /// width of the bridge below the coarsest decoder.
    pub decoder_channels: Vec<usize>,
    pub se_reduction: usize,
    /// Whether the gated shape stream (and the edge channel it consumes) exists.
    pub shape_stream: bool,
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig {
            preset: Preset::Tiny,
            num_classes: 4,
            input_channels: 1,
            encoder_blocks: vec![2, 2, 2, 2],
            growth: 8,
            stem_channels: 16,
            shape_stream_width: 16,
            decoder_channels: vec![16, 24, 32, 32],
            se_reduction: 4,
            shape_stream: true,
        }
    }

    pub fn dense121() -> Self {
        ModelConfig {
            preset: Preset::Dense121,
            num_classes: 4,
            input_channels: 1,
            encoder_blocks: vec![6, 12, 24, 16],
            growth: 32,
            stem_channels: 64,
            shape_stream_width: 32,
            decoder_channels: vec![64, 128, 256, 512],
            se_reduction: 4,
            shape_stream: true,
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Tiny => Self::tiny(),
            Preset::Dense121 => Self::dense121(),
        }
    }

    /// Channels leaving each dense block, shallow to deep.
    pub fn encoder_channels(&self) -> Vec<usize> {
        let mut c = self.stem_channels;
        let mut out = Vec::with_capacity(self.encoder_blocks.len());
        for (i, &n) in self.encoder_blocks.iter().enumerate() {
            if i > 0 {
                c /= 2;
            }
            c += n * self.growth;
            out.push(c);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.encoder_blocks.len() != 4 {
            return bad(format!("encoder_blocks needs 4 entries, got {}", self.encoder_blocks.len()));
        }
        if self.decoder_channels.len() != self.encoder_blocks.len() {
            return bad("decoder_channels must have one entry per encoder level".into());
        }
        if !(2..=255).contains(&self.num_classes) {
            return bad(format!("num_classes must be in [2, 255], got {}", self.num_classes));
        }
        let positive = [
            self.input_channels,
            self.growth,
            self.stem_channels,
            self.shape_stream_width,
            self.se_reduction,
        ];
        if positive.contains(&0) || self.encoder_blocks.contains(&0) || self.decoder_channels.contains(&0) {
            return bad("all widths and block sizes must be positive".into());
        }
        for (i, &c) in self.encoder_channels()[..3].iter().enumerate() {
            if c % 2 != 0 {
                return bad(format!("dense block {} emits {c} channels; transitions need an even count", i + 1));
            }
        }
        for &c in &self.decoder_channels[..3] {
            if c % self.se_reduction != 0 || c % 2 != 0 {
                return bad(format!(
                    "decoder width {c} must be even and divisible by se_reduction {}",
                    self.se_reduction
                ));
            }
        }
        Ok(())
    }
}
