//! Full-image rendering and demosaicking with a trained model.

use crate::autodiff::{reflect_index, Tape};
use crate::error::{dim_err, Error, Result};
use crate::image::{coord_grid, BayerImage, RgbImage};
use crate::model::Model;
use crate::tensor::Tensor;

/// Pixels evaluated per MLP call.
pub const DEFAULT_CHUNK: usize = 4096;

/// Encoder features of a Bayer image, cropped back to the image size.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Channel-planar `C x H x W`.
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(dim_err!("feature map {}x{}x{} needs {} values, got {}", channels, height, width, height * width * channels, data.len()));
        }
        Ok(Self { height, width, channels, data })
    }
}

/// The `window x window x C` neighbourhood of `(row, col)` flattened in
/// (row, column, channel) order, mirroring positions outside the map.
pub fn extract_local(features: &FeatureMap, row: usize, col: usize, window: usize) -> Vec<f32> {
    let (h, w, c) = (features.height, features.width, features.channels);
    let r = (window / 2) as isize;
    let mut out = Vec::with_capacity(window * window * c);
    for dy in -r..=r {
        let y = reflect_index(row as isize + dy, h);
        for dx in -r..=r {
            let x = reflect_index(col as isize + dx, w);
            out.extend((0..c).map(|ch| features.data[(ch * h + y) * w + x]));
        }
    }
    out
}

/// Runs the encoder once over `bayer`, padding by reflection up to the
/// encoder's spatial multiple and cropping the result back.
pub fn encode_image(model: &Model, bayer: &BayerImage) -> Result<FeatureMap> {
    let m = model.spatial_multiple();
    let (h, w) = (bayer.height(), bayer.width());
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let padded = if (ph, pw) == (h, w) { bayer.clone() } else { bayer.pad_reflect(ph, pw)? };
    let mut tape = Tape::<f32>::new();
    let vars = model.params.bind(&mut tape);
    let x = tape.constant(padded.to_tensor());
    let y = model.encode(&mut tape, &vars, x)?;
    let (_, c, _, _) = tape.value(y).dims4()?;
    let full = tape.value(y).data();
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for r in 0..h {
            let start = (ch * ph + r) * pw;
            data.extend_from_slice(&full[start..start + w]);
        }
    }
    FeatureMap::new(h, w, c, data)
}

fn assemble(h: usize, w: usize, order: &[usize], values: &[f32]) -> Result<RgbImage> {
    let mut data = vec![0.0f32; 3 * h * w];
    for (k, &p) in order.iter().enumerate() {
        for ch in 0..3 {
            data[ch * h * w + p] = values[3 * k + ch];
        }
    }
    RgbImage::from_unclamped(h, w, data)
}

/// Evaluates the model at the listed pixels (row-major indices) in chunks
/// and returns `3 * pixels.len()` raw outputs.
pub fn query_pixels(
    model: &Model,
    height: usize,
    width: usize,
    features: Option<&FeatureMap>,
    pixels: &[usize],
    chunk: usize,
) -> Result<Vec<f32>> {
    if chunk == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    let conditioned = model.variant().is_conditioned();
    if conditioned != features.is_some() {
        return Err(Error::Config(format!("variant {} {} features", model.variant(), if conditioned { "needs" } else { "does not take" })));
    }
    let grid = coord_grid(height, width)?;
    let window = model.config().encoder.window;
    let enc_len = model.config().encoding_width();
    let mut out = Vec::with_capacity(3 * pixels.len());
    for part in pixels.chunks(chunk) {
        let mut tape = Tape::<f32>::new();
        let vars = model.params.bind(&mut tape);
        let coords: Vec<f32> = part.iter().flat_map(|&p| grid.at(p / width, p % width)).collect();
        let coords = Tensor::new([part.len(), 2], coords)?;
        let enc = match features {
            Some(f) => {
                let mut e = Vec::with_capacity(part.len() * enc_len);
                for &p in part {
                    e.extend(extract_local(f, p / width, p % width, window));
                }
                Some(tape.constant(Tensor::new([part.len(), enc_len], e)?))
            }
            None => None,
        };
        let y = model.query(&mut tape, &vars, coords, enc)?;
        out.extend_from_slice(tape.value(y).data());
    }
    Ok(out)
}

/// Renders an unconditioned coordinate network over an `h x w` grid.
pub fn render(model: &Model, height: usize, width: usize, chunk: usize) -> Result<RgbImage> {
    let order: Vec<usize> = (0..height * width).collect();
    let values = query_pixels(model, height, width, None, &order, chunk)?;
    assemble(height, width, &order, &values)
}

/// Demosaics with a conditioned model, visiting pixels in `order`
/// (row-major indices; pass `None` for raster order).
pub fn nerd_demosaic_with(model: &Model, bayer: &BayerImage, order: Option<&[usize]>, chunk: usize) -> Result<RgbImage> {
    let (h, w) = (bayer.height(), bayer.width());
    let features = encode_image(model, bayer)?;
    let raster: Vec<usize>;
    let order = match order {
        Some(o) => {
            let mut seen = vec![false; h * w];
            if o.len() != h * w || o.iter().any(|&p| p >= h * w || std::mem::replace(&mut seen[p], true)) {
                return Err(dim_err!("pixel order must be a permutation of {} pixels", h * w));
            }
            o
        }
        None => {
            raster = (0..h * w).collect();
            &raster
        }
    };
    let values = query_pixels(model, h, w, Some(&features), order, chunk)?;
    assemble(h, w, order, &values)
}

pub fn nerd_demosaic(model: &Model, bayer: &BayerImage) -> Result<RgbImage> {
    nerd_demosaic_with(model, bayer, None, DEFAULT_CHUNK)
}
