//! Synthetic 16×16 RGB shape corpus: four shape classes on clean backgrounds
//! with small distractor blobs, each sample carrying its binary foreground
//! mask and foreground mean color. Every pixel is snapped to the u8/255 grid
//! at generation time, so the in-memory corpus and its on-disk image files
//! are bit-identical and regeneration from the same seed reproduces the same
//! bytes on any platform.

mod io;
mod render;

pub use io::{read_pgm, read_ppm, read_corpus, write_pgm, write_ppm, write_corpus};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Tensor;
use crate::rng;

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed image file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("{0}")]
    Contract(String),
}

pub type Result<T, E = DatagenError> = std::result::Result<T, E>;

/// The four sample classes. `Circle` doubles as the erasure target; the
/// benign half of the corpus (triangles, stripes) measures collateral damage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Stripes,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [
        ShapeClass::Circle,
        ShapeClass::Square,
        ShapeClass::Triangle,
        ShapeClass::Stripes,
    ];

    pub fn index(self) -> usize {
        match self {
            ShapeClass::Circle => 0,
            ShapeClass::Square => 1,
            ShapeClass::Triangle => 2,
            ShapeClass::Stripes => 3,
        }
    }

    pub fn from_index(i: usize) -> Option<ShapeClass> {
        ShapeClass::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Circle => "circle",
            ShapeClass::Square => "square",
            ShapeClass::Triangle => "triangle",
            ShapeClass::Stripes => "stripes",
        }
    }
}

/// Corpus generation parameters.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_per_class: usize,
    pub size: usize,
    pub seed: u64,
    /// Maximum number of background distractor blobs per image.
    pub max_clutter: usize,
    /// Amplitude of the uniform pixel noise added before quantization.
    pub noise: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { n_per_class: 200, size: 16, seed: 0, max_clutter: 3, noise: 0.02 }
    }
}

/// One generated image with its label, foreground mask (values exactly 0 or
/// 1), and the mean color over the mask.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    /// RGB image, shape [3, size, size], values on the u8/255 grid.
    pub image: Tensor<f32>,
    /// Foreground mask, shape [size, size].
    pub mask: Tensor<f32>,
    pub label: ShapeClass,
    pub mean_color: [f32; 3],
}

/// Per-channel corpus statistics used by `preprocess`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    /// Stats that make `preprocess`/`denormalize` (near-)identities, for
    /// models that have not seen a corpus yet.
    pub fn identity() -> Self {
        ChannelStats { mean: [0.0; 3], std: [1.0; 3] }
    }
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub samples: Vec<LabeledSample>,
    pub stats: ChannelStats,
}

impl Corpus {
    pub fn by_class(&self, class: ShapeClass) -> impl Iterator<Item = &LabeledSample> {
        self.samples.iter().filter(move |s| s.label == class)
    }

    /// Deterministic per-class split: the first `n_train` samples of each
    /// class train, the rest are held out. Sample order within a class is
    /// already random (independent per-sample streams), so this is unbiased.
    pub fn split(&self, n_train: usize) -> (Vec<usize>, Vec<usize>) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        let mut seen = std::collections::HashMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            let count = seen.entry(s.label).or_insert(0usize);
            if *count < n_train {
                train.push(i);
            } else {
                held.push(i);
            }
            *count += 1;
        }
        (train, held)
    }
}

/// Generate the full corpus. Each sample draws from its own derived stream,
/// so corpora of different sizes agree on their common prefix per class.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    if spec.size < 8 {
        return Err(DatagenError::Contract(format!(
            "image size {} too small to place shapes",
            spec.size
        )));
    }
    if !(0.0..=0.2).contains(&spec.noise) {
        return Err(DatagenError::Contract(format!(
            "noise amplitude {} outside [0, 0.2]",
            spec.noise
        )));
    }
    let mut samples = Vec::with_capacity(4 * spec.n_per_class);
    for class in ShapeClass::ALL {
        for i in 0..spec.n_per_class {
            let tag = format!("{i}");
            let mut rng = rng::stream(spec.seed, &["corpus", class.name(), &tag]);
            samples.push(generate_sample(spec, class, &mut rng)?);
        }
    }
    let stats = compute_stats(&samples);
    Ok(Corpus { spec: *spec, samples, stats })
}

fn generate_sample(
    spec: &CorpusSpec,
    class: ShapeClass,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<LabeledSample> {
    let size = spec.size;
    let n_px = size * size;
    let mask_bits = render::rasterize(class, size, rng);

    // Background is muted, foreground must clear it by ≥ 0.4 in some channel.
    let bg: [f32; 3] = [
        rng.gen_range(0.05..0.45),
        rng.gen_range(0.05..0.45),
        rng.gen_range(0.05..0.45),
    ];
    let mut fg: [f32; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    for _ in 0..16 {
        let sep = fg
            .iter()
            .zip(&bg)
            .map(|(f, b)| (f - b).abs())
            .fold(0.0f32, f32::max);
        if sep >= 0.4 {
            break;
        }
        fg = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
    }
    let sep = fg.iter().zip(&bg).map(|(f, b)| (f - b).abs()).fold(0.0f32, f32::max);
    if sep < 0.4 {
        // Last resort: shift by half the value range, wrapping.
        fg = [
            (bg[0] + 0.5).rem_euclid(1.0),
            (bg[1] + 0.5).rem_euclid(1.0),
            (bg[2] + 0.5).rem_euclid(1.0),
        ];
    }

    let mut image = vec![0.0f32; 3 * n_px];
    for p in 0..n_px {
        let color = if mask_bits[p] { fg } else { bg };
        for c in 0..3 {
            image[c * n_px + p] = color[c];
        }
    }

    // Background distractors.
    let n_blobs = rng.gen_range(0..=spec.max_clutter);
    for (x, y, side) in render::clutter_spots(&mask_bits, size, n_blobs, rng) {
        let color: [f32; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        for dy in 0..side {
            for dx in 0..side {
                let p = (y + dy) * size + (x + dx);
                for c in 0..3 {
                    image[c * n_px + p] = color[c];
                }
            }
        }
    }

    // Pixel noise, clamp, and quantization to the u8 grid.
    let amp = spec.noise as f32;
    for v in image.iter_mut() {
        let noisy = if amp > 0.0 { *v + rng.gen_range(-amp..amp) } else { *v };
        *v = quantize(noisy.clamp(0.0, 1.0));
    }

    let image = Tensor::new(&[3, size, size], image).expect("image buffer sized");
    let mask = Tensor::new(
        &[size, size],
        mask_bits.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
    )
    .expect("mask buffer sized");
    let mean_color = mean_color(&image, &mask)?;
    Ok(LabeledSample { image, mask, label: class, mean_color })
}

/// Snap a unit-interval value onto the 256-level grid used by image files.
#[inline]
pub fn quantize(v: f32) -> f32 {
    (v * 255.0).round() / 255.0
}

/// Mean color over mask pixels (mask entries > 0.5 count as foreground).
pub fn mean_color(image: &Tensor<f32>, mask: &Tensor<f32>) -> Result<[f32; 3]> {
    let n_px = mask.numel();
    if image.numel() != 3 * n_px {
        return Err(DatagenError::Contract(format!(
            "image shape {:?} does not match mask shape {:?}",
            image.shape(),
            mask.shape()
        )));
    }
    let mut sums = [0.0f64; 3];
    let mut count = 0usize;
    for (p, &m) in mask.data().iter().enumerate() {
        if m > 0.5 {
            count += 1;
            for c in 0..3 {
                sums[c] += f64::from(image.data()[c * n_px + p]);
            }
        }
    }
    if count == 0 {
        return Err(DatagenError::Contract("mask selects no pixels".to_string()));
    }
    Ok([
        (sums[0] / count as f64) as f32,
        (sums[1] / count as f64) as f32,
        (sums[2] / count as f64) as f32,
    ])
}

/// Blend off-mask pixels to a fill color: out = m·image + (1−m)·fill.
/// For binary masks this reproduces on-mask pixels bit-exactly and sets
/// off-mask pixels to the fill exactly, and it is idempotent.
pub fn apply_mask(image: &Tensor<f32>, mask: &Tensor<f32>, fill: [f32; 3]) -> Result<Tensor<f32>> {
    let n_px = mask.numel();
    if image.numel() != 3 * n_px {
        return Err(DatagenError::Contract(format!(
            "image shape {:?} does not match mask shape {:?}",
            image.shape(),
            mask.shape()
        )));
    }
    let mut out = image.clone();
    for (p, &m) in mask.data().iter().enumerate() {
        for c in 0..3 {
            let idx = c * n_px + p;
            out.data_mut()[idx] = m * image.data()[idx] + (1.0 - m) * fill[c];
        }
    }
    Ok(out)
}

/// Per-channel mean/std over a set of images, single pass in f64.
pub fn compute_stats(samples: &[LabeledSample]) -> ChannelStats {
    let mut sum = [0.0f64; 3];
    let mut sumsq = [0.0f64; 3];
    let mut count = 0usize;
    for s in samples {
        let n_px = s.image.numel() / 3;
        count += n_px;
        for c in 0..3 {
            for p in 0..n_px {
                let v = f64::from(s.image.data()[c * n_px + p]);
                sum[c] += v;
                sumsq[c] += v * v;
            }
        }
    }
    let n = count.max(1) as f64;
    let mut mean = [0.0f64; 3];
    let mut std = [0.0f64; 3];
    for c in 0..3 {
        mean[c] = sum[c] / n;
        std[c] = (sumsq[c] / n - mean[c] * mean[c]).max(0.0).sqrt();
    }
    ChannelStats { mean, std }
}

/// Standardize per channel: (x − mean) / (std + 1e-6).
pub fn preprocess(image: &Tensor<f32>, stats: &ChannelStats) -> Tensor<f32> {
    channel_affine(image, stats, |v, mean, denom| (v - mean) / denom)
}

/// Inverse of [`preprocess`]: x·(std + 1e-6) + mean.
pub fn denormalize(image: &Tensor<f32>, stats: &ChannelStats) -> Tensor<f32> {
    channel_affine(image, stats, |v, mean, denom| v * denom + mean)
}

fn channel_affine(
    image: &Tensor<f32>,
    stats: &ChannelStats,
    f: impl Fn(f32, f32, f32) -> f32,
) -> Tensor<f32> {
    let n_px = image.numel() / 3;
    let mut out = image.clone();
    for c in 0..3 {
        let mean = stats.mean[c] as f32;
        let denom = (stats.std[c] + 1e-6) as f32;
        for p in 0..n_px {
            let idx = c * n_px + p;
            out.data_mut()[idx] = f(image.data()[idx], mean, denom);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec { n_per_class: 8, size: 16, seed: 11, max_clutter: 3, noise: 0.02 }
    }

    #[test]
    fn corpus_has_expected_counts_and_binary_masks() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        assert_eq!(corpus.samples.len(), 32);
        for class in ShapeClass::ALL {
            assert_eq!(corpus.by_class(class).count(), 8);
        }
        for s in &corpus.samples {
            assert!(s.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn every_pixel_sits_on_the_u8_grid() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        for s in &corpus.samples {
            for &v in s.image.data() {
                let k = (v * 255.0).round();
                assert_eq!(v, k / 255.0, "value {v} off-grid");
            }
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = generate_corpus(&small_spec()).unwrap();
        let b = generate_corpus(&small_spec()).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.mask.data(), y.mask.data());
            assert_eq!(x.mean_color, y.mean_color);
        }
        assert_eq!(a.stats, b.stats);
    }

    #[test]
    fn foreground_separates_from_background() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        for s in &corpus.samples {
            let n_px = s.mask.numel();
            // Compare the mask mean color against the off-mask mean.
            let inv = Tensor::new(
                s.mask.shape(),
                s.mask.data().iter().map(|&m| 1.0 - m).collect(),
            )
            .unwrap();
            let bg = mean_color(&s.image, &inv).unwrap();
            let sep = s
                .mean_color
                .iter()
                .zip(&bg)
                .map(|(f, b)| (f - b).abs())
                .fold(0.0f32, f32::max);
            // Noise, quantization, and clutter erode the raw 0.4 margin.
            assert!(sep > 0.25, "separation {sep} too small ({n_px} px)");
        }
    }

    #[test]
    fn apply_mask_pins_off_mask_pixels_to_fill_exactly() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let s = &corpus.samples[0];
        let fill = s.mean_color;
        let masked = apply_mask(&s.image, &s.mask, fill).unwrap();
        let n_px = s.mask.numel();
        for (p, &m) in s.mask.data().iter().enumerate() {
            for c in 0..3 {
                let got = masked.data()[c * n_px + p];
                if m == 1.0 {
                    assert_eq!(got, s.image.data()[c * n_px + p]);
                } else {
                    assert_eq!(got, fill[c]);
                }
            }
        }
    }

    #[test]
    fn apply_mask_is_idempotent() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let s = &corpus.samples[5];
        let once = apply_mask(&s.image, &s.mask, s.mean_color).unwrap();
        let twice = apply_mask(&once, &s.mask, s.mean_color).unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn mean_color_of_flat_foreground_is_that_color() {
        let size = 16;
        let color = [quantize(0.8), quantize(0.2), quantize(0.5)];
        let mut img = vec![0.0f32; 3 * size * size];
        let mut mask = vec![0.0f32; size * size];
        for p in 40..60 {
            mask[p] = 1.0;
            for c in 0..3 {
                img[c * size * size + p] = color[c];
            }
        }
        let img = Tensor::new(&[3, size, size], img).unwrap();
        let mask = Tensor::new(&[size, size], mask).unwrap();
        let got = mean_color(&img, &mask).unwrap();
        for (g, w) in got.iter().zip(&color) {
            assert!((g - w).abs() < 1e-7);
        }
    }

    #[test]
    fn empty_mask_is_a_contract_error() {
        let img = Tensor::zeros(&[3, 16, 16]);
        let mask = Tensor::zeros(&[16, 16]);
        assert!(mean_color(&img, &mask).is_err());
    }

    #[test]
    fn stats_match_a_two_pass_oracle() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let n_px = 256;
        for c in 0..3 {
            let values: Vec<f64> = corpus
                .samples
                .iter()
                .flat_map(|s| s.image.data()[c * n_px..(c + 1) * n_px].iter())
                .map(|&v| f64::from(v))
                .collect();
            let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
            let var: f64 =
                values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
            assert!((corpus.stats.mean[c] - mean).abs() < 1e-12);
            assert!((corpus.stats.std[c] - var.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn preprocess_standardizes_and_round_trips() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let s = &corpus.samples[3];
        let norm = preprocess(&s.image, &corpus.stats);
        let back = denormalize(&norm, &corpus.stats);
        for (a, b) in back.data().iter().zip(s.image.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        // Across the whole corpus each channel is ~standardized.
        let normed: Vec<Tensor<f32>> = corpus
            .samples
            .iter()
            .map(|s| preprocess(&s.image, &corpus.stats))
            .collect();
        let n_px = 256;
        for c in 0..3 {
            let values: Vec<f64> = normed
                .iter()
                .flat_map(|t| t.data()[c * n_px..(c + 1) * n_px].iter())
                .map(|&v| f64::from(v))
                .collect();
            let mean: f64 = values.iter().sum::<f64>() / values.len() as f64;
            let var: f64 =
                values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
            assert!(mean.abs() < 1e-4, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn split_is_per_class_and_disjoint() {
        let corpus = generate_corpus(&small_spec()).unwrap();
        let (train, held) = corpus.split(6);
        assert_eq!(train.len(), 24);
        assert_eq!(held.len(), 8);
        for class in ShapeClass::ALL {
            let t = train.iter().filter(|&&i| corpus.samples[i].label == class).count();
            assert_eq!(t, 6);
        }
        let overlap = train.iter().any(|i| held.contains(i));
        assert!(!overlap);
    }

    #[test]
    fn oversized_noise_is_rejected() {
        let spec = CorpusSpec { noise: 0.5, ..small_spec() };
        assert!(generate_corpus(&spec).is_err());
    }
}
