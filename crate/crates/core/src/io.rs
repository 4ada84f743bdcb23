//! Image and mask loading, resizing, dataset pairing and label-map PNGs.

use std::hash::Hasher;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use fnv::FnvHasher;
use image::{ColorType, DynamicImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{BinaryMask, LabelMap};
use crate::tensor::Tensor;

/// File extensions picked up when scanning a dataset directory.
pub const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "pgm", "ppm", "pnm"];

/// Mask pixels at or above this 8-bit value are foreground.
pub const MASK_THRESHOLD: u8 = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Size {
    pub width: usize,
    pub height: usize,
}

impl Size {
    pub const fn new(width: usize, height: usize) -> Self {
        Size { width, height }
    }
}

impl std::str::FromStr for Size {
    type Err = Error;

    /// Parses `WxH`, e.g. `128x96`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("expected WxH, got `{s}`"));
        let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
        let (width, height) = (w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?);
        if width == 0 || height == 0 {
            return Err(bad());
        }
        Ok(Size { width, height })
    }
}

impl std::fmt::Display for Size {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| Error::decode(path, e))
}

fn is_gray(color: ColorType) -> bool {
    matches!(color, ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16)
}

/// Decodes an image to `[C, H, W]` values in `[0, 1]` (8-bit value / 255).
/// Grayscale files give one channel, everything else three; alpha is
/// dropped.
pub fn load_image(path: impl AsRef<Path>, resize: Option<Size>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = if is_gray(img.color()) {
        (1, img.to_luma8().into_raw())
    } else {
        (3, img.to_rgb8().into_raw())
    };
    let hw = h * w;
    let mut planar = vec![0f32; channels * hw];
    for (p, px) in raw.chunks_exact(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            planar[c * hw + p] = v as f32 / 255.0;
        }
    }
    let t = Tensor::new([channels, h, w], planar)?;
    Ok(match resize {
        Some(size) if (size.height, size.width) != (h, w) => resize_bilinear(&t, size),
        _ => t,
    })
}

/// Decodes a ground-truth mask: grayscale value >= 128 is foreground. When
/// resizing, the 8-bit values are interpolated first and then thresholded.
pub fn load_mask(path: impl AsRef<Path>, resize: Option<Size>) -> Result<BinaryMask> {
    let path = path.as_ref();
    let gray = decode(path)?.to_luma8();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let values = Tensor::new([1, h, w], gray.into_raw().into_iter().map(f32::from).collect())?;
    let values = match resize {
        Some(size) if (size.height, size.width) != (h, w) => resize_bilinear(&values, size),
        _ => values,
    };
    let (_, h, w) = values.dims3("load_mask")?;
    BinaryMask::new(h, w, values.data().iter().map(|&v| v >= MASK_THRESHOLD as f32).collect())
}

/// Bilinear resize of every channel with corners aligned: output corner
/// pixels take the input corner values exactly.
pub fn resize_bilinear(t: &Tensor<f32>, size: Size) -> Tensor<f32> {
    let (c, h, w) = t.dims3("resize_bilinear").expect("rank-3 image");
    let (oh, ow) = (size.height, size.width);
    let src = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f32) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let pos = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let lo = (pos.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, (pos - lo as f64) as f32)
    };
    let rows: Vec<_> = (0..oh).map(|y| src(y, oh, h)).collect();
    let cols: Vec<_> = (0..ow).map(|x| src(x, ow, w)).collect();
    let mut out = Vec::with_capacity(c * oh * ow);
    for plane in t.data().chunks_exact(h * w) {
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Tensor::new([c, oh, ow], out).expect("sized")
}

/// 64-bit FNV-1a of the bytes of `name`.
pub fn fnv1a(name: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(name.as_bytes());
    h.finish()
}

/// Training seed for one image: the run seed mixed with its file name.
pub fn image_seed(global: u64, file_name: &str) -> u64 {
    global ^ fnv1a(file_name)
}

/// One image and its mask, if any.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DatasetEntry {
    pub stem: String,
    pub file_name: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetLayout {
    pub images_dir: PathBuf,
    pub masks_dir: Option<PathBuf>,
    /// Appended to the image stem to form the mask stem, e.g. `_lesion`.
    pub mask_suffix: String,
    pub resize: Option<Size>,
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && has_image_extension(p))
        .collect();
    files.sort();
    Ok(files)
}

fn stem_of(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

impl DatasetLayout {
    pub fn new(images_dir: impl Into<PathBuf>) -> Self {
        DatasetLayout {
            images_dir: images_dir.into(),
            masks_dir: None,
            mask_suffix: String::new(),
            resize: None,
        }
    }

    /// Images sorted by file name, each paired with the mask whose stem is
    /// the image stem plus `mask_suffix`. With a masks directory, an image
    /// with no mask or with several candidates is an error.
    pub fn entries(&self) -> Result<Vec<DatasetEntry>> {
        let images = list_images(&self.images_dir)?;
        if images.is_empty() {
            return Err(Error::InvalidConfig(format!("no images found in {}", self.images_dir.display())));
        }
        let masks = match &self.masks_dir {
            Some(dir) => Some(list_images(dir)?),
            None => None,
        };
        let mut seen = std::collections::BTreeSet::new();
        images
            .into_iter()
            .map(|image| {
                let stem = stem_of(&image);
                if !seen.insert(stem.clone()) {
                    return Err(Error::InvalidConfig(format!("two images share the stem `{stem}`")));
                }
                let mask = match &masks {
                    None => None,
                    Some(masks) => {
                        let want = format!("{stem}{}", self.mask_suffix);
                        let found: Vec<&PathBuf> = masks.iter().filter(|m| stem_of(m) == want).collect();
                        match found.as_slice() {
                            [one] => Some((*one).clone()),
                            [] => return Err(Error::InvalidConfig(format!("no mask `{want}.*` for image `{stem}`"))),
                            _ => return Err(Error::InvalidConfig(format!("several masks named `{want}.*`"))),
                        }
                    }
                };
                let file_name = image.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok(DatasetEntry { stem, file_name, image, mask })
            })
            .collect()
    }

    /// Loads one entry's image and mask at the layout's size; the mask must
    /// match the image dimensions.
    pub fn load(&self, entry: &DatasetEntry) -> Result<(Tensor<f32>, Option<BinaryMask>)> {
        let image = load_image(&entry.image, self.resize)?;
        let mask = match &entry.mask {
            None => None,
            Some(path) => {
                let mask = load_mask(path, self.resize)?;
                let (_, h, w) = image.dims3("load")?;
                if (mask.height(), mask.width()) != (h, w) {
                    return Err(Error::decode(
                        path,
                        format!("mask is {}x{} but the image is {w}x{h}", mask.width(), mask.height()),
                    ));
                }
                Some(mask)
            }
        };
        Ok((image, mask))
    }
}

/// Palette colour of label `i`: distinct, reproducible hues.
pub fn palette_colour(i: usize) -> [u8; 3] {
    if i == 0 {
        return [0, 0, 0];
    }
    // golden-angle hue steps at full saturation
    let hue = (i as f64 * 137.507_764) % 360.0;
    let value = if i % 2 == 0 { 1.0 } else { 0.75 };
    let c = value;
    let x = c * (1.0 - ((hue / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (hue / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r, g, b].map(|v| (v * 255.0).round() as u8)
}

/// Writes `labels` as an 8-bit indexed PNG: pixel value = label, palette
/// entry `i` = colour of label `i`.
pub fn write_label_png(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    let max = labels.data().iter().copied().max().unwrap_or(0);
    if max > 255 {
        return Err(Error::Unsupported(format!("label {max} does not fit an 8-bit palette")));
    }
    let palette: Vec<u8> = (0..=max).flat_map(palette_colour).collect();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), labels.width() as u32, labels.height() as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(palette);
    let mut writer = enc.write_header().map_err(|e| Error::decode(path, e))?;
    let data: Vec<u8> = labels.data().iter().map(|&l| l as u8).collect();
    writer.write_image_data(&data).map_err(|e| Error::decode(path, e))?;
    writer.finish().map_err(|e| Error::decode(path, e))
}

/// Reads the raw palette indices of an 8-bit indexed PNG.
pub fn read_label_png(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(std::io::BufReader::new(file));
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info().map_err(|e| Error::decode(path, e))?;
    let (color, depth) = reader.output_color_type();
    if color != png::ColorType::Indexed || depth != png::BitDepth::Eight {
        return Err(Error::decode(path, format!("expected an 8-bit indexed PNG, found {color:?} / {depth:?}")));
    }
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::decode(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::decode(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let data = (0..h)
        .flat_map(|y| buf[y * info.line_size..y * info.line_size + w].iter().map(|&v| v as usize))
        .collect();
    LabelMap::new(h, w, data)
}
