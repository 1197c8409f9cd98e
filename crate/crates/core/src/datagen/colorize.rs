//! Coloured-digit construction: each digit class gets a mean RGB colour and
//! the training split jitters it with Gaussian noise of a chosen variance.

use super::{BiasKind, BiasSpec, DataError, IdxImages, LabeledDataset};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Mean colour per digit class, RGB in `[0, 1]`.
pub const PALETTE: [[f64; 3]; 10] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 0.5, 0.0],
    [0.5, 0.0, 1.0],
    [1.0, 1.0, 1.0],
    [0.5, 0.5, 0.5],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColorSplit {
    /// Colour mean follows the digit.
    Train,
    /// Colour mean is drawn uniformly, independent of the digit.
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorizeConfig {
    pub variance: f64,
    pub split: ColorSplit,
    /// Average-pooling factor applied before colouring; 1 keeps full size.
    pub downsample: usize,
}

impl Default for ColorizeConfig {
    fn default() -> Self {
        ColorizeConfig { variance: 0.0, split: ColorSplit::Train, downsample: 2 }
    }
}

/// Index of the palette entry closest (Euclidean) to `rgb`; ties go to the
/// lower index.
pub fn nearest_palette_index(rgb: &[f64; 3]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, c) in PALETTE.iter().enumerate() {
        let d: f64 = c.iter().zip(rgb).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Average-pools each image by `factor`; trailing rows/columns that do not
/// fill a whole block are dropped.
pub fn downsample(pixels: &Array3<f64>, factor: usize) -> Array3<f64> {
    if factor <= 1 {
        return pixels.clone();
    }
    let (n, rows, cols) = pixels.dim();
    let (r2, c2) = (rows / factor, cols / factor);
    let scale = 1.0 / (factor * factor) as f64;
    Array3::from_shape_fn((n, r2, c2), |(i, r, c)| {
        let mut acc = 0.0;
        for dr in 0..factor {
            for dc in 0..factor {
                acc += pixels[[i, r * factor + dr, c * factor + dc]];
            }
        }
        acc * scale
    })
}

/// Tints grayscale digits. Features are the flattened `(pixel, channel)`
/// intensities; the attribute is the palette index nearest the drawn colour.
pub fn colorize(images: &IdxImages, labels: &[u8], config: &ColorizeConfig, seed: u64) -> Result<LabeledDataset, DataError> {
    BiasSpec::new(BiasKind::ColorVariance, config.variance)?;
    if images.len() != labels.len() {
        return Err(DataError::LengthMismatch(images.len(), labels.len()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 9) {
        return Err(DataError::LabelOutOfRange { which: "digit", label: l as usize, size: 10 });
    }
    let small = downsample(&images.pixels, config.downsample);
    let (n, rows, cols) = small.dim();
    let pix = rows * cols;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, config.variance.sqrt()).expect("validated variance");
    let mut features = Array2::zeros((n, pix * 3));
    let mut attributes = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let mean = match config.split {
            ColorSplit::Train => PALETTE[label as usize],
            ColorSplit::Test => PALETTE[rng.random_range(0..PALETTE.len())],
        };
        let mut color = [0.0; 3];
        for (c, m) in color.iter_mut().zip(mean) {
            *c = (m + jitter.sample(&mut rng)).clamp(0.0, 1.0);
        }
        attributes.push(nearest_palette_index(&color));
        let img = small.index_axis(ndarray::Axis(0), i);
        let mut row = features.row_mut(i);
        for (p, &v) in img.iter().enumerate() {
            for ch in 0..3 {
                row[p * 3 + ch] = v * color[ch];
            }
        }
    }
    let split = match config.split {
        ColorSplit::Train => "train",
        ColorSplit::Test => "test",
    };
    LabeledDataset::new(
        features,
        labels.iter().map(|&l| l as usize).collect(),
        attributes,
        10,
        10,
        format!(
            "colorized(split={split}, variance={}, downsample={}, seed={seed})",
            config.variance, config.downsample
        ),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mi_estim::plugin_mi;

    fn digits(n: usize, seed: u64) -> (IdxImages, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = Array3::from_shape_fn((n, 4, 4), |_| if rng.random::<f64>() < 0.4 { rng.random::<f64>() } else { 0.0 });
        let labels = (0..n).map(|i| (i % 10) as u8).collect();
        (IdxImages { pixels }, labels)
    }

    #[test]
    fn palette_is_well_separated() {
        for i in 0..10 {
            assert_eq!(nearest_palette_index(&PALETTE[i]), i);
            for j in 0..i {
                let d: f64 = (0..3).map(|c| (PALETTE[i][c] - PALETTE[j][c]).powi(2)).sum::<f64>().sqrt();
                assert!(d >= 0.5 - 1e-12);
            }
        }
    }

    #[test]
    fn zero_variance_train_is_fully_biased() {
        let (img, labels) = digits(500, 1);
        let ds = colorize(&img, &labels, &ColorizeConfig::default(), 3).unwrap();
        assert_eq!(ds.targets, ds.attributes);
        assert_eq!(ds.hya(), 0.0);
        assert_eq!(ds.dim(), 2 * 2 * 3);
        assert!(ds.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn background_stays_black() {
        let (img, labels) = digits(50, 2);
        let cfg = ColorizeConfig { downsample: 1, ..ColorizeConfig::default() };
        let ds = colorize(&img, &labels, &cfg, 0).unwrap();
        for i in 0..50 {
            for p in 0..16 {
                if img.pixels[[i, p / 4, p % 4]] == 0.0 {
                    assert!((0..3).all(|c| ds.features[[i, p * 3 + c]] == 0.0));
                }
            }
        }
    }

    #[test]
    fn test_split_is_nearly_independent() {
        let (img, labels) = digits(10_000, 3);
        let cfg = ColorizeConfig { split: ColorSplit::Test, ..ColorizeConfig::default() };
        let ds = colorize(&img, &labels, &cfg, 4).unwrap();
        assert!(plugin_mi(&ds.targets, &ds.attributes).unwrap().value_nats <= 0.02);
    }

    #[test]
    fn larger_variance_weakens_bias() {
        let (img, labels) = digits(5000, 5);
        let h = |v: f64| {
            let cfg = ColorizeConfig { variance: v, ..ColorizeConfig::default() };
            colorize(&img, &labels, &cfg, 6).unwrap().hya()
        };
        let (lo, hi) = (h(0.01), h(0.05));
        assert!(hi > lo, "{hi} <= {lo}");
    }

    #[test]
    fn rejects_out_of_range_variance() {
        let (img, labels) = digits(5, 1);
        let cfg = ColorizeConfig { variance: 0.06, ..ColorizeConfig::default() };
        assert!(colorize(&img, &labels, &cfg, 0).is_err());
    }

    #[test]
    fn downsample_averages_blocks() {
        let px = Array3::from_shape_vec((1, 2, 2), vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(downsample(&px, 2)[[0, 0, 0]], 0.5);
    }
}
