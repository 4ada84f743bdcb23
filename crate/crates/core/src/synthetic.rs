//! Seeded synthetic images with known foreground masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::BinaryMask;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct SyntheticImage {
    pub name: String,
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
}

fn add_noise(values: &mut [f32], sigma: f64, rng: &mut ChaCha8Rng) {
    let noise = Normal::new(0.0, sigma).expect("sigma is finite and non-negative");
    for v in values {
        *v = (*v as f64 + noise.sample(rng)).clamp(0.0, 1.0) as f32;
    }
}

/// Grayscale `size x size` image holding a `side x side` square of
/// intensity `fg` on a `bg` background with additive Gaussian noise.
/// The seed picks the square's position and the noise.
pub fn noisy_square(size: usize, side: usize, fg: f32, bg: f32, sigma: f64, seed: u64) -> SyntheticImage {
    assert!(side < size, "square must fit inside the image");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let margin = (size - side) / 4;
    let top = rng.random_range(margin..=size - side - margin);
    let left = rng.random_range(margin..=size - side - margin);
    let inside = |y: usize, x: usize| (top..top + side).contains(&y) && (left..left + side).contains(&x);
    let mask = BinaryMask::from_fn(size, size, inside);
    let mut data: Vec<f32> = mask.data().iter().map(|&m| if m { fg } else { bg }).collect();
    add_noise(&mut data, sigma, &mut rng);
    SyntheticImage {
        name: format!("square_{seed:03}"),
        image: Tensor::new([1, size, size], data).expect("shape matches"),
        mask,
    }
}

/// The 32x32 bright-square image: square 0.9, background 0.1, noise 0.05.
pub fn default_square(seed: u64) -> SyntheticImage {
    noisy_square(32, 12, 0.9, 0.1, 0.05, seed)
}

/// A uniform image of the given intensity.
pub fn constant_image(channels: usize, size: usize, value: f32) -> Tensor<f32> {
    Tensor::full([channels, size, size], value)
}

/// RGB images of one dark rectangle or disc with a soft (logistic) edge on
/// a lighter background. The lesion is only 0.15-0.3 darker per channel, so
/// at noise 0.1 (every other image; 0.05 otherwise) single pixels are often
/// ambiguous.
pub fn shape_suite(count: usize, size: usize, seed: u64) -> Vec<SyntheticImage> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let sigma = if i % 2 == 0 { 0.05 } else { 0.1 };
            fuzzy_shape(size, sigma, i % 3 != 2, &mut rng, format!("shape_{i:03}"))
        })
        .collect()
}

fn fuzzy_shape(size: usize, sigma: f64, disc: bool, rng: &mut ChaCha8Rng, name: String) -> SyntheticImage {
    let s = size as f64;
    let softness = rng.random_range(0.5..1.5);
    let (cy, cx) = (rng.random_range(0.35 * s..0.65 * s), rng.random_range(0.35 * s..0.65 * s));
    let (ry, rx) = if disc {
        let r = rng.random_range(0.15 * s..0.25 * s);
        (r, r)
    } else {
        (rng.random_range(0.12 * s..0.25 * s), rng.random_range(0.12 * s..0.25 * s))
    };
    // signed distance, negative inside
    let sdf = |y: f64, x: f64| {
        if disc {
            ((y - cy).powi(2) + (x - cx).powi(2)).sqrt() - ry
        } else {
            let dy = (y - cy).abs() - ry;
            let dx = (x - cx).abs() - rx;
            let outside = (dy.max(0.0).powi(2) + dx.max(0.0).powi(2)).sqrt();
            outside + dy.max(dx).min(0.0)
        }
    };
    // lesion darker than surrounding skin, per-channel tint
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..0.9));
    let fg: [f64; 3] = std::array::from_fn(|c| bg[c] - rng.random_range(0.15..0.3));

    let mask = BinaryMask::from_fn(size, size, |y, x| sdf(y as f64, x as f64) <= 0.0);
    let hw = size * size;
    let mut data = vec![0f32; 3 * hw];
    for p in 0..hw {
        let (y, x) = ((p / size) as f64, (p % size) as f64);
        let alpha = 1.0 / (1.0 + (sdf(y, x) / softness).exp());
        for c in 0..3 {
            data[c * hw + p] = (alpha * fg[c] + (1.0 - alpha) * bg[c]) as f32;
        }
    }
    add_noise(&mut data, sigma, rng);
    SyntheticImage {
        name,
        image: Tensor::new([3, size, size], data).expect("shape matches"),
        mask,
    }
}

/// Writes each image as an 8-bit PNG `<name>.png` into `images_dir` and its
/// mask (0 / 255) under the same name into `masks_dir`.
pub fn save_dataset(images: &[SyntheticImage], images_dir: &Path, masks_dir: &Path) -> Result<()> {
    for dir in [images_dir, masks_dir] {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for s in images {
        let (c, h, w) = s.image.dims3("save_dataset")?;
        let hw = h * w;
        let d = s.image.data();
        let path = images_dir.join(format!("{}.png", s.name));
        let saved = if c == 1 {
            image::GrayImage::from_raw(w as u32, h as u32, d.iter().map(|&v| to_u8(v)).collect())
                .expect("sized")
                .save(&path)
        } else {
            let rgb = (0..hw).flat_map(|p| (0..3).map(move |ch| to_u8(d[ch * hw + p]))).collect();
            image::RgbImage::from_raw(w as u32, h as u32, rgb).expect("sized").save(&path)
        };
        saved.map_err(|e| Error::decode(&path, e))?;
        let path = masks_dir.join(format!("{}.png", s.name));
        image::GrayImage::from_raw(w as u32, h as u32, s.mask.data().iter().map(|&m| if m { 255 } else { 0 }).collect())
            .expect("sized")
            .save(&path)
            .map_err(|e| Error::decode(&path, e))?;
    }
    Ok(())
}
