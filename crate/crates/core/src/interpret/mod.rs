//! Built-in attention maps, overlays and a SmoothGrad baseline.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{Mode, Tape};
use crate::data::{sample_rng, sgt_write, Plane, SegSample};
use crate::error::{Error, Result};
use crate::model::{AttentionBundle, SaUNet};
use crate::nn::Ctx;
use crate::tensor::Tensor;

/// Blend weight of the palette colour at map value 1.
pub const OVERLAY_ALPHA: f32 = 0.6;
pub const SMOOTHGRAD_SAMPLES: usize = 25;
/// Noise level relative to the input's intensity range.
pub const SMOOTHGRAD_NOISE: f64 = 0.1;

/// Attention maps of one sample from a single eval-mode forward pass
/// without gradient recording.
pub fn extract(model: &SaUNet<f32>, sample: &SegSample) -> Result<AttentionBundle<f32>> {
    let tape = Tape::no_grad();
    let image = batch_of_one(&sample.image);
    let canny = model.config().shape_stream.then(|| batch_of_one(&sample.canny));
    let pass = model.forward(&tape, &image, canny.as_ref(), Mode::Eval)?;
    Ok(pass.out.attn())
}

fn batch_of_one(t: &Tensor<f32>) -> Tensor<f32> {
    let mut shape = vec![1];
    shape.extend_from_slice(t.shape());
    Tensor::new(shape, t.data().to_vec()).expect("same numel")
}

/// 1 where `map ≥ tau`, else 0.
pub fn threshold_map(map: &Plane, tau: f64) -> Result<Plane> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("threshold {tau} outside [0, 1]")));
    }
    Ok(Plane {
        data: map.data.iter().map(|&v| (v as f64 >= tau) as u8 as f32).collect(),
        ..map.clone()
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Palette {
    /// Black, red, yellow, white.
    #[default]
    Heat,
    /// Blue, cyan, yellow, red.
    Jet,
}

impl Palette {
    pub fn color(self, v: f32) -> [f32; 3] {
        let v = v.clamp(0.0, 1.0);
        let c = |x: f32| x.clamp(0.0, 1.0) * 255.0;
        match self {
            Palette::Heat => [c(3.0 * v), c(3.0 * v - 1.0), c(3.0 * v - 2.0)],
            Palette::Jet => [c(1.5 - (4.0 * v - 3.0).abs()), c(1.5 - (4.0 * v - 2.0).abs()), c(1.5 - (4.0 * v - 1.0).abs())],
        }
    }
}

/// An RGB image with the map it shows.
#[derive(Clone, Debug, PartialEq)]
pub struct OverlayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
    pub sample_id: String,
    pub map_name: String,
    pub threshold: Option<f64>,
}

impl OverlayImage {
    /// Binary PPM (`P6`).
    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.reserve(self.pixels.len() * 3);
        for p in &self.pixels {
            out.extend_from_slice(p);
        }
        out
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ppm()).map_err(|e| Error::io(path, e))
    }
}

/// Bilinear resize with aligned pixel centres and clamped borders.
pub fn resize_bilinear(map: &Plane, height: usize, width: usize) -> Plane {
    if (map.height, map.width) == (height, width) {
        return map.clone();
    }
    let (sy, sx) = (map.height as f64 / height as f64, map.width as f64 / width as f64);
    Plane::from_fn(height, width, |y, x| {
        let yy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (map.height - 1) as f64);
        let xx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (map.width - 1) as f64);
        map.bilinear(yy, xx, 0.0)
    })
}

/// Grey level of each pixel after min-max scaling to `[0, 255]`.
fn grey(image: &Plane) -> Vec<f32> {
    let (lo, hi) = image.min_max();
    let span = hi - lo;
    image
        .data
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span * 255.0 } else { 0.0 })
        .collect()
}

/// `(1 − a)·base + a·palette(v)` with `a = OVERLAY_ALPHA·v`.
pub fn blend(base: f32, v: f32, palette: Palette) -> [u8; 3] {
    let a = OVERLAY_ALPHA * v.clamp(0.0, 1.0);
    palette.color(v).map(|c| ((1.0 - a) * base + a * c).round().clamp(0.0, 255.0) as u8)
}

/// Greyscale image with the map alpha-blended on top. With `tau`, only
/// pixels whose map value reaches `tau` are blended.
pub fn render_overlay(image: &Plane, map: &Plane, tau: Option<f64>, palette: Palette) -> Result<OverlayImage> {
    if let Some(t) = tau {
        threshold_map(&Plane::zeros(1, 1), t)?;
    }
    let m = resize_bilinear(map, image.height, image.width);
    let pixels = grey(image)
        .iter()
        .zip(&m.data)
        .map(|(&g, &v)| {
            let shown = tau.map_or(true, |t| v as f64 >= t);
            if shown {
                blend(g, v, palette)
            } else {
                [g.round() as u8; 3]
            }
        })
        .collect();
    Ok(OverlayImage {
        width: image.width,
        height: image.height,
        pixels,
        sample_id: String::new(),
        map_name: String::new(),
        threshold: tau,
    })
}

/// Min-max normalizes to `[0, 1]`; a constant map becomes zeros.
pub fn normalize(map: &Plane) -> Plane {
    let (lo, hi) = map.min_max();
    let span = hi - lo;
    Plane {
        data: map.data.iter().map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 }).collect(),
        ..map.clone()
    }
}

/// SmoothGrad saliency for class `k`: the mean over `n` noisy copies of
/// `|∂(Σ class-k logits)/∂ input|`, min-max normalized. `sigma` defaults to
/// `0.1·(max − min)` of the input.
pub fn smoothgrad(model: &SaUNet<f32>, sample: &SegSample, k: usize, n: usize, sigma: Option<f64>, seed: u64) -> Result<Plane> {
    if n == 0 {
        return Err(Error::InvalidArgument("smoothgrad needs at least one sample".into()));
    }
    let classes = model.config().num_classes;
    if k >= classes {
        return Err(Error::InvalidArgument(format!("class {k} outside [0, {classes})")));
    }
    let image = batch_of_one(&sample.image);
    let canny = model.config().shape_stream.then(|| batch_of_one(&sample.canny));
    let (lo, hi) = image.min_max();
    let sigma = sigma.unwrap_or(SMOOTHGRAD_NOISE * (hi - lo) as f64);
    let (h, w) = (image.shape()[2], image.shape()[3]);
    let select = Tensor::from_fn([1, classes, h, w], |i| ((i / (h * w)) == k) as u8 as f32);
    let mut rng = sample_rng(seed, 0);
    let mut acc = vec![0.0f64; h * w];
    for _ in 0..n {
        let noisy = Tensor::from_fn(image.shape().to_vec(), |i| {
            image.data()[i] + (sigma * rng.sample::<f64, _>(StandardNormal)) as f32
        });
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &model.params, Mode::Eval);
        let x = tape.leaf(noisy, true);
        let out = model.forward_vars(&cx, x, canny.as_ref().map(|c| tape.constant(c.clone())))?;
        let score = out.seg_logits.mul(tape.constant(select.clone()))?.sum();
        let grads = tape.backward(score)?;
        let g = grads.get(x).ok_or_else(|| Error::InvalidArgument("input received no gradient".into()))?;
        for (a, v) in acc.iter_mut().zip(g.data()) {
            *a += v.abs() as f64;
        }
    }
    let mean = Plane::new(h, w, acc.iter().map(|&v| (v / n as f64) as f32).collect())?;
    Ok(normalize(&mean))
}

/// Suffix for a threshold, e.g. `_t080` for 0.8.
pub fn threshold_suffix(tau: f64) -> String {
    format!("_t{:03}", (tau * 100.0).round() as u32)
}

/// Files written for one sample and the cost of each saliency method.
#[derive(Clone, Debug)]
pub struct ExplainReport {
    pub sample_id: String,
    pub dir: PathBuf,
    pub maps: Vec<String>,
    pub files: Vec<PathBuf>,
    pub extract_passes: usize,
    pub extract_time: Duration,
    pub smoothgrad: Option<(usize, Duration)>,
}

impl ExplainReport {
    pub fn timing_line(&self) -> String {
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        match self.smoothgrad {
            Some((passes, t)) => format!(
                "timing {}: extract={} passes {:.1} ms, smoothgrad={} passes {:.1} ms, ratio {:.1}x",
                self.sample_id,
                self.extract_passes,
                ms(self.extract_time),
                passes,
                ms(t),
                t.as_secs_f64() / self.extract_time.as_secs_f64().max(1e-9)
            ),
            None => format!(
                "timing {}: extract={} passes {:.1} ms",
                self.sample_id,
                self.extract_passes,
                ms(self.extract_time)
            ),
        }
    }
}

/// Options of [`explain_sample`].
#[derive(Clone, Debug)]
pub struct ExplainOptions {
    /// Thresholded variants of the two decoder maps.
    pub thresholds: Vec<f64>,
    /// SmoothGrad sample count; 0 skips the baseline.
    pub smoothgrad: usize,
    /// Class whose logits SmoothGrad explains.
    pub class: usize,
    pub seed: u64,
    pub palette: Palette,
}

impl Default for ExplainOptions {
    fn default() -> Self {
        ExplainOptions {
            thresholds: vec![0.6, 0.8],
            smoothgrad: SMOOTHGRAD_SAMPLES,
            class: 1,
            seed: 0,
            palette: Palette::Heat,
        }
    }
}

/// Writes `<out>/<id>/{alpha_1..3, spatial_d2, spatial_d3, shape, smoothgrad}`
/// as PPM overlays plus raw SGT maps, and thresholded decoder maps suffixed
/// with [`threshold_suffix`].
pub fn explain_sample(model: &SaUNet<f32>, sample: &SegSample, out: &Path, opts: &ExplainOptions) -> Result<ExplainReport> {
    for &t in &opts.thresholds {
        threshold_map(&Plane::zeros(1, 1), t)?;
    }
    let dir = out.join(&sample.id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let base = Plane::from_tensor(&sample.image)?;

    let before = model.forward_passes();
    let start = Instant::now();
    let bundle = extract(model, sample)?;
    let extract_time = start.elapsed();
    let extract_passes = model.forward_passes() - before;

    let plane = |t: &Tensor<f32>| Plane::from_tensor(t);
    let mut maps: Vec<(String, Plane)> = Vec::new();
    for (i, a) in bundle.alphas.iter().enumerate() {
        maps.push((format!("alpha_{}", i + 1), plane(a)?));
    }
    maps.push(("spatial_d2".into(), plane(bundle.spatial_d2())?));
    maps.push(("spatial_d3".into(), plane(bundle.spatial_d3())?));
    if let Some(s) = &bundle.shape_map {
        maps.push(("shape".into(), plane(s)?));
    }
    let mut sg = None;
    if opts.smoothgrad > 0 {
        let before = model.forward_passes();
        let start = Instant::now();
        let map = smoothgrad(model, sample, opts.class, opts.smoothgrad, None, opts.seed)?;
        sg = Some((model.forward_passes() - before, start.elapsed()));
        maps.push(("smoothgrad".into(), map));
    }

    let mut files = Vec::new();
    let mut write = |name: &str, map: &Plane, tau: Option<f64>| -> Result<()> {
        let mut o = render_overlay(&base, map, tau, opts.palette)?;
        o.sample_id = sample.id.clone();
        o.map_name = name.to_string();
        let stem = name.to_string() + &tau.map(threshold_suffix).unwrap_or_default();
        let p = dir.join(format!("{stem}.ppm"));
        o.write_ppm(&p)?;
        files.push(p);
        if tau.is_none() {
            let p = dir.join(format!("{name}.sgt"));
            sgt_write(&map.to_tensor(), &p)?;
            files.push(p);
        }
        Ok(())
    };
    for (name, map) in &maps {
        write(name, map, None)?;
        if name.starts_with("spatial_") {
            for &t in &opts.thresholds {
                write(name, map, Some(t))?;
            }
        }
    }
    Ok(ExplainReport {
        sample_id: sample.id.clone(),
        dir,
        maps: maps.into_iter().map(|(n, _)| n).collect(),
        files,
        extract_passes,
        extract_time,
        smoothgrad: sg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_sample, TextureFamily, TARGET_SPACING};
    use crate::model::ModelConfig;
    use crate::test_util::SplitMix;

    fn sample(size: usize) -> SegSample {
        let (img, lab) = synth_sample(size, TextureFamily::A, &mut sample_rng(2, 0));
        SegSample::finalize("s0", &img, lab, TARGET_SPACING)
    }

    /// Tiny model with running statistics from one train-mode pass.
    fn model() -> SaUNet<f32> {
        let mut m = SaUNet::<f32>::build(&ModelConfig::tiny(), 1).unwrap();
        let s = sample(16);
        let img = Tensor::stack_batch(&[batch_of_one(&s.image), batch_of_one(&s.image)]).unwrap();
        let canny = Tensor::stack_batch(&[batch_of_one(&s.canny), batch_of_one(&s.canny)]).unwrap();
        let tape = Tape::no_grad();
        let bn = m.forward(&tape, &img, Some(&canny), Mode::Train).unwrap().bound.bn_updates;
        m.params.apply_bn_updates(bn);
        m
    }

    #[test]
    fn extraction_is_one_pass_and_repeatable() {
        let m = model();
        let s = sample(16);
        let before = m.forward_passes();
        let a = extract(&m, &s).unwrap();
        assert_eq!(m.forward_passes() - before, 1);
        assert_eq!((a.alphas.len(), a.spatial_maps.len(), a.shape_map.is_some()), (3, 3, true));
        assert!(a.all_maps().flat_map(|t| t.data()).all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(a, extract(&m, &s).unwrap());
    }

    #[test]
    fn threshold_examples_and_monotonicity() {
        let mut rng = SplitMix::new(1);
        let map = Plane::from_fn(8, 8, |_, _| rng.uniform(0.0, 1.0) as f32);
        assert!(threshold_map(&map, 0.0).unwrap().data.iter().all(|&v| v == 1.0));
        assert!(threshold_map(&map, 1.0).unwrap().data.iter().all(|&v| v == 0.0));
        let hi = threshold_map(&map, 0.8).unwrap();
        let lo = threshold_map(&map, 0.6).unwrap();
        assert!(hi.data.iter().zip(&lo.data).all(|(h, l)| h <= l));
        for y in 0..8 {
            for x in 0..8 {
                let want = if map.get(y, x) >= 0.6 { 1.0 } else { 0.0 };
                assert_eq!(lo.get(y, x), want);
            }
        }
        assert!(threshold_map(&map, 1.5).is_err());
    }

    #[test]
    fn ppm_header_and_zero_map() {
        let img = Plane::from_fn(64, 64, |y, x| (y * 64 + x) as f32);
        let o = render_overlay(&img, &Plane::zeros(8, 8), None, Palette::Heat).unwrap();
        let ppm = o.to_ppm();
        assert!(ppm.starts_with(b"P6\n64 64\n255\n"));
        assert_eq!(ppm.len(), 13 + 64 * 64 * 3);
        let g = grey(&img);
        for (p, g) in o.pixels.iter().zip(&g) {
            assert_eq!(*p, [g.round() as u8; 3]);
        }
    }

    #[test]
    fn blend_matches_scalar_oracle() {
        let mut rng = SplitMix::new(4);
        let img = Plane::from_fn(16, 16, |_, _| rng.uniform(-2.0, 2.0) as f32);
        let map = Plane::from_fn(16, 16, |_, _| rng.uniform(0.0, 1.0) as f32);
        let o = render_overlay(&img, &map, None, Palette::Heat).unwrap();
        let (lo, hi) = img.min_max();
        for _ in 0..5 {
            let i = rng.uniform(0.0, 256.0) as usize;
            let base = (img.data[i] - lo) / (hi - lo) * 255.0;
            let v = map.data[i];
            let a = 0.6 * v;
            let heat = [(3.0 * v).min(1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)];
            for c in 0..3 {
                let want = ((1.0 - a) * base + a * heat[c] * 255.0).round() as u8;
                assert_eq!(o.pixels[i][c], want);
            }
        }
        let t = render_overlay(&img, &map, Some(0.8), Palette::Heat).unwrap();
        for i in 0..256 {
            if map.data[i] < 0.8 {
                let base = ((img.data[i] - lo) / (hi - lo) * 255.0).round() as u8;
                assert_eq!(t.pixels[i], [base; 3]);
            }
        }
    }

    #[test]
    fn smoothgrad_plain_gradient_and_range() {
        let m = model();
        let s = sample(16);
        let a = smoothgrad(&m, &s, 1, 1, Some(0.0), 0).unwrap();
        // Direct input gradient, normalized.
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &m.params, Mode::Eval);
        let x = tape.leaf(batch_of_one(&s.image), true);
        let out = m.forward_vars(&cx, x, Some(tape.constant(batch_of_one(&s.canny)))).unwrap();
        let mask = Tensor::from_fn([1, 4, 16, 16], |i| (i / 256 == 1) as u8 as f32);
        let g = tape.backward(out.seg_logits.mul(tape.constant(mask)).unwrap().sum()).unwrap();
        let plain = normalize(&Plane::new(16, 16, g.get(x).unwrap().data().iter().map(|v| v.abs()).collect()).unwrap());
        assert_eq!(a, plain);
        let b = smoothgrad(&m, &s, 2, 3, None, 7).unwrap();
        assert!(b.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(b.min_max().1, 1.0);
    }

    #[test]
    fn explain_tree_and_model_untouched() {
        let m = model();
        let sum = m.params.checksum();
        let s = sample(16);
        let dir = tempfile::tempdir().unwrap();
        let opts = ExplainOptions {
            smoothgrad: 2,
            ..ExplainOptions::default()
        };
        let r = explain_sample(&m, &s, dir.path(), &opts).unwrap();
        let ppm: Vec<String> = std::fs::read_dir(dir.path().join("s0"))
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| n.ends_with(".ppm"))
            .collect();
        assert_eq!(ppm.len(), 7 + 4);
        for name in ["alpha_1", "alpha_3", "spatial_d2_t060", "spatial_d3_t080", "shape", "smoothgrad"] {
            assert!(ppm.contains(&format!("{name}.ppm")), "{name}");
        }
        assert_eq!(r.extract_passes, 1);
        assert_eq!(r.smoothgrad.unwrap().0, 2);
        assert!(r.timing_line().contains("extract=1") && r.timing_line().contains("smoothgrad=2"));
        assert_eq!(m.params.checksum(), sum);

        let only = ExplainOptions {
            thresholds: vec![0.8],
            smoothgrad: 0,
            ..ExplainOptions::default()
        };
        let d2 = tempfile::tempdir().unwrap();
        let r = explain_sample(&m, &s, d2.path(), &only).unwrap();
        let names: Vec<String> = r.files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        assert!(names.iter().any(|n| n.ends_with("_t080.ppm")));
        assert!(!names.iter().any(|n| n.contains("_t060")));
    }
}
