//! RGB and Bayer images, GBRG mosaicking, cropping, resizing, coordinate grids
//! and PNG I/O.
//!
//! Images hold `f32` samples in `[0, 1]`. RGB data is planar (one full
//! `height x width` plane per channel, in r, g, b order), matching the
//! `N x C x H x W` layout the convolution ops use.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::{Element, Tensor};

/// One of the three colour channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CfaColor {
    Red,
    Green,
    Blue,
}

impl CfaColor {
    pub fn channel(self) -> usize {
        match self {
            CfaColor::Red => 0,
            CfaColor::Green => 1,
            CfaColor::Blue => 2,
        }
    }
}

/// Colour sampled at `(row, col)` by the GBRG filter array:
///
/// ```text
/// G B
/// R G
/// ```
#[inline]
pub fn cfa_color(row: usize, col: usize) -> CfaColor {
    match (row % 2, col % 2) {
        (0, 0) | (1, 1) => CfaColor::Green,
        (0, 1) => CfaColor::Blue,
        _ => CfaColor::Red,
    }
}

fn check_unit_range(data: &[f32]) -> Result<()> {
    if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Format(format!("image sample {v} outside [0, 1]")));
    }
    Ok(())
}

/// Three-channel image, planar storage.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl RgbImage {
    /// `data` is planar: `data[(ch * height + row) * width + col]`.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != 3 * height * width {
            return Err(dim_err!("{}x{} RGB image needs {} samples, got {}", height, width, 3 * height * width, data.len()));
        }
        check_unit_range(&data)?;
        Ok(Self { height, width, data })
    }

    /// Builds an image from unbounded values, clamping each into `[0, 1]`.
    /// Non-finite values are rejected.
    pub fn from_unclamped(height: usize, width: usize, mut data: Vec<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "image assembly" });
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self::new(height, width, data)
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut data = vec![0.0; 3 * height * width];
        let plane = height * width;
        for r in 0..height {
            for c in 0..width {
                let px = f(r, c);
                for ch in 0..3 {
                    data[ch * plane + r * width + c] = px[ch];
                }
            }
        }
        Self::new(height, width, data)
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        Self::from_fn(height, width, |_, _| rgb)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, ch: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[ch * plane..(ch + 1) * plane]
    }

    #[inline]
    pub fn get(&self, ch: usize, row: usize, col: usize) -> f32 {
        self.data[(ch * self.height + row) * self.width + col]
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        [self.get(0, row, col), self.get(1, row, col), self.get(2, row, col)]
    }

    /// Axis-aligned sub-image.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(dim_err!(
                "crop {}x{} at ({}, {}) exceeds {}x{} image",
                height,
                width,
                top,
                left,
                self.height,
                self.width
            ));
        }
        Self::from_fn(height, width, |r, c| self.pixel(top + r, left + c))
    }

    /// `1 x 3 x H x W` tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_parts(
            vec![1, 3, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
    }
}

/// Single-channel GBRG sensor image.
#[derive(Clone, Debug, PartialEq)]
pub struct BayerImage {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl BayerImage {
    /// Name of the only supported filter layout.
    pub const LAYOUT: &'static str = "GBRG";

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || height % 2 != 0 || width % 2 != 0 {
            return Err(dim_err!("Bayer image dimensions must be even and positive, got {}x{}", height, width));
        }
        if data.len() != height * width {
            return Err(dim_err!("{}x{} Bayer image needs {} samples, got {}", height, width, height * width, data.len()));
        }
        check_unit_range(&data)?;
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn color_at(&self, row: usize, col: usize) -> CfaColor {
        cfa_color(row, col)
    }

    /// Sub-mosaic; offsets must be even so the layout stays GBRG.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top % 2 != 0 || left % 2 != 0 {
            return Err(dim_err!("Bayer crop offsets must be even, got ({}, {})", top, left));
        }
        if top + height > self.height || left + width > self.width {
            return Err(dim_err!("crop {}x{} at ({}, {}) exceeds {}x{}", height, width, top, left, self.height, self.width));
        }
        let mut data = Vec::with_capacity(height * width);
        for r in top..top + height {
            data.extend_from_slice(&self.data[r * self.width + left..r * self.width + left + width]);
        }
        Self::new(height, width, data)
    }

    /// Extends the mosaic to `height x width` by mirroring the bottom rows and
    /// right columns. Mirroring keeps index parity, so the layout stays GBRG.
    pub fn pad_reflect(&self, height: usize, width: usize) -> Result<Self> {
        if height < self.height || width < self.width {
            return Err(dim_err!("cannot pad {}x{} down to {}x{}", self.height, self.width, height, width));
        }
        if height - self.height >= self.height || width - self.width >= self.width {
            return Err(dim_err!("padding {}x{} to {}x{} exceeds one reflection", self.height, self.width, height, width));
        }
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            let sr = crate::autodiff::reflect_index(r as isize, self.height);
            for c in 0..width {
                data.push(self.get(sr, crate::autodiff::reflect_index(c as isize, self.width)));
            }
        }
        Self::new(height, width, data)
    }

    /// `1 x 1 x H x W` tensor.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::from_parts(
            vec![1, 1, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
    }
}

/// Samples each pixel's GBRG colour; no filtering, no noise.
pub fn mosaic(img: &RgbImage) -> Result<BayerImage> {
    let (h, w) = (img.height(), img.width());
    if h % 2 != 0 || w % 2 != 0 {
        return Err(dim_err!("mosaicking needs even dimensions, got {}x{}", h, w));
    }
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            data.push(img.get(cfa_color(r, c).channel(), r, c));
        }
    }
    BayerImage::new(h, w, data)
}

/// Normalised pixel coordinates in `[-1, 1]^2`, corner aligned.
///
/// `x` runs along columns and `y` along rows; entries are stored row-major as
/// `[x, y]` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordGrid {
    height: usize,
    width: usize,
    coords: Vec<[f32; 2]>,
}

impl CoordGrid {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self) -> &[[f32; 2]] {
        &self.coords
    }

    pub fn at(&self, row: usize, col: usize) -> [f32; 2] {
        self.coords[row * self.width + col]
    }
}

/// Normalised coordinate of index `i` on an axis of length `n`.
#[inline]
pub fn axis_coord(i: usize, n: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (n - 1) as f64
}

pub fn coord_grid(height: usize, width: usize) -> Result<CoordGrid> {
    if height < 2 || width < 2 {
        return Err(dim_err!("coordinate grid needs at least 2x2, got {}x{}", height, width));
    }
    let mut coords = Vec::with_capacity(height * width);
    for r in 0..height {
        let y = axis_coord(r, height) as f32;
        for c in 0..width {
            coords.push([axis_coord(c, width) as f32, y]);
        }
    }
    Ok(CoordGrid { height, width, coords })
}

/// Even top-left offsets for a `size x size` crop, drawn from `rng`.
pub fn random_crop_offsets<R: Rng + ?Sized>(
    height: usize,
    width: usize,
    size: usize,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if size == 0 || size % 2 != 0 {
        return Err(dim_err!("crop size must be even and positive, got {}", size));
    }
    if height < size || width < size {
        return Err(dim_err!("{}x{} image is smaller than crop {}", height, width, size));
    }
    let top = 2 * rng.gen_range(0..=(height - size) / 2);
    let left = 2 * rng.gen_range(0..=(width - size) / 2);
    Ok((top, left))
}

/// Random `size x size` crop at even offsets, which preserves the GBRG phase
/// of a later mosaic.
pub fn crop_random_with<R: Rng + ?Sized>(img: &RgbImage, size: usize, rng: &mut R) -> Result<RgbImage> {
    let (top, left) = random_crop_offsets(img.height(), img.width(), size, rng)?;
    img.crop(top, left, size, size)
}

pub fn crop_random(img: &RgbImage, size: usize, seed: u64) -> Result<RgbImage> {
    crop_random_with(img, size, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Per-output-sample source taps with fractional coverage weights.
fn area_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let (lo, hi) = (o as f64 * scale, (o + 1) as f64 * scale);
            let mut taps = Vec::new();
            let mut i = lo.floor() as usize;
            while (i as f64) < hi && i < src {
                let cover = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
                if cover > 0.0 {
                    taps.push((i, cover / scale));
                }
                i += 1;
            }
            taps
        })
        .collect()
}

/// Box-filter (pixel area) resampling to `height x width`.
pub fn resize_area(img: &RgbImage, height: usize, width: usize) -> Result<RgbImage> {
    if height == 0 || width == 0 {
        return Err(dim_err!("cannot resize to {}x{}", height, width));
    }
    let rows = area_taps(img.height(), height);
    let cols = area_taps(img.width(), width);
    let mut data = Vec::with_capacity(3 * height * width);
    for ch in 0..3 {
        // columns first, then rows; accumulate in f64
        let mut tmp = vec![0.0f64; img.height() * width];
        for r in 0..img.height() {
            for (oc, taps) in cols.iter().enumerate() {
                tmp[r * width + oc] = taps.iter().map(|&(c, wt)| wt * img.get(ch, r, c) as f64).sum();
            }
        }
        for taps in &rows {
            for oc in 0..width {
                let v: f64 = taps.iter().map(|&(r, wt)| wt * tmp[r * width + oc]).sum();
                data.push(v as f32);
            }
        }
    }
    RgbImage::from_unclamped(height, width, data)
}

/// Centre `size x size` crop with even offsets.
pub fn center_crop(img: &RgbImage, size: usize) -> Result<RgbImage> {
    if img.height() < size || img.width() < size {
        return Err(dim_err!("{}x{} image is smaller than crop {}", img.height(), img.width(), size));
    }
    let top = (img.height() - size) / 2 / 2 * 2;
    let left = (img.width() - size) / 2 / 2 * 2;
    img.crop(top, left, size, size)
}

/// Evaluation preparation: area-resize so the shorter side equals `size`
/// (only when larger), then centre-crop to `size x size`.
pub fn prepare_eval_image(img: &RgbImage, size: usize) -> Result<RgbImage> {
    let short = img.height().min(img.width());
    if short < size {
        return Err(dim_err!("{}x{} image is smaller than evaluation size {}", img.height(), img.width(), size));
    }
    let resized = if short > size {
        let scale = size as f64 / short as f64;
        let h = ((img.height() as f64 * scale).round() as usize).max(size);
        let w = ((img.width() as f64 * scale).round() as usize).max(size);
        resize_area(img, h, w)?
    } else {
        img.clone()
    };
    center_crop(&resized, size)
}

/// Decoded PNG: either an RGB image or a single-channel mosaic.
#[derive(Clone, Debug)]
pub enum PngContent {
    Rgb(RgbImage),
    Bayer(BayerImage),
}

/// Reads an 8-bit RGB or 8-bit grayscale PNG.
pub fn read_png(path: &Path) -> Result<PngContent> {
    let file = File::open(path)?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?;
    let info = reader.info();
    let (color, depth) = (info.color_type, info.bit_depth);
    let (w, h) = (info.width as usize, info.height as usize);
    if depth != png::BitDepth::Eight {
        return Err(Error::Format(format!("{}: unsupported bit depth {:?} (need 8)", path.display(), depth)));
    }
    if !matches!(color, png::ColorType::Rgb | png::ColorType::Grayscale) {
        return Err(Error::Format(format!(
            "{}: unsupported color type {:?} (need Rgb or Grayscale)",
            path.display(),
            color
        )));
    }
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let frame = reader.next_frame(&mut buf).map_err(|e| Error::Format(format!("{}: {}", path.display(), e)))?;
    let bytes = &buf[..frame.buffer_size()];
    let to_unit = |b: u8| b as f32 / 255.0;
    match color {
        png::ColorType::Rgb => {
            let plane = h * w;
            let mut data = vec![0.0; 3 * plane];
            for (i, px) in bytes.chunks_exact(3).enumerate() {
                for ch in 0..3 {
                    data[ch * plane + i] = to_unit(px[ch]);
                }
            }
            Ok(PngContent::Rgb(RgbImage::new(h, w, data)?))
        }
        _ => Ok(PngContent::Bayer(BayerImage::new(h, w, bytes.iter().map(|&b| to_unit(b)).collect())?)),
    }
}

/// Reads an 8-bit RGB PNG, scaling bytes by 1/255.
pub fn load_png(path: &Path) -> Result<RgbImage> {
    match read_png(path)? {
        PngContent::Rgb(img) => Ok(img),
        PngContent::Bayer(_) => Err(Error::Format(format!(
            "{}: unsupported color type Grayscale (need Rgb)",
            path.display()
        ))),
    }
}

/// Sample to byte: clamp to `[0, 1]`, scale by 255, round half away from zero.
#[inline]
pub fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        writer.write_image_data(bytes).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(out)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(3 * img.height() * img.width());
    for r in 0..img.height() {
        for c in 0..img.width() {
            bytes.extend(img.pixel(r, c).map(to_byte));
        }
    }
    write_atomic(path, &encode_png(img.width(), img.height(), png::ColorType::Rgb, &bytes)?)
}

/// Writes a mosaic as an 8-bit grayscale PNG.
pub fn save_bayer_png(img: &BayerImage, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
    write_atomic(path, &encode_png(img.width(), img.height(), png::ColorType::Grayscale, &bytes)?)
}
