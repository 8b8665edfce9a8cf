use std::f64::consts::PI;

use crate::error::{dim_err, Result};
use crate::tensor::{Element, Tensor};

/// Random Fourier feature map with an `m x 2` frequency matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierFeatureMap<T = f32> {
    pub frequencies: Tensor<T>,
}

impl<T: Element> FourierFeatureMap<T> {
    pub fn new(frequencies: Tensor<T>) -> Result<Self> {
        match frequencies.shape() {
            [_, 2] => Ok(Self { frequencies }),
            s => Err(dim_err!("Fourier frequency matrix must be m x 2, got {:?}", s)),
        }
    }

    pub fn m(&self) -> usize {
        self.frequencies.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        2 * self.m()
    }
}

/// `[sin(2 pi B x), cos(2 pi B x)]` for each row of `coords` (`N x 2`),
/// giving `N x 2m`.
pub fn fourier_features<T: Element>(coords: &Tensor<T>, map: &FourierFeatureMap<T>) -> Result<Tensor<T>> {
    let (n, d) = coords.dims2()?;
    if d != 2 {
        return Err(dim_err!("coordinates must be N x 2, got {:?}", coords.shape()));
    }
    let m = map.m();
    let b = map.frequencies.data();
    let mut out = Vec::with_capacity(n * 2 * m);
    for row in coords.data().chunks_exact(2) {
        let (x, y) = (row[0].to_f64(), row[1].to_f64());
        let phase: Vec<f64> = (0..m).map(|k| 2.0 * PI * (b[2 * k].to_f64() * x + b[2 * k + 1].to_f64() * y)).collect();
        out.extend(phase.iter().map(|p| T::from_f64(p.sin())));
        out.extend(phase.iter().map(|p| T::from_f64(p.cos())));
    }
    Tensor::new([n, 2 * m], out)
}
