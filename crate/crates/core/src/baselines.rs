//! Bilinear and Malvar-He-Cutler demosaicking.
//!
//! Both methods read the mosaic through a mirror that does not repeat the
//! edge sample, so every reflected sample keeps its CFA colour.

use crate::autodiff::reflect_index;
use crate::error::{Error, Result};
use crate::image::{cfa_color, BayerImage, CfaColor, RgbImage};

/// Malvar-He-Cutler 5x5 kernels as integer numerators over [`MALVAR_DENOMINATOR`].
pub mod malvar_kernels {
    pub const MALVAR_DENOMINATOR: i32 = 16;

    /// Green at a red or blue site.
    pub const G_AT_RB: [[i8; 5]; 5] = [
        [0, 0, -2, 0, 0],
        [0, 0, 4, 0, 0],
        [-2, 4, 8, 4, -2],
        [0, 0, 4, 0, 0],
        [0, 0, -2, 0, 0],
    ];

    /// Red or blue at a green site whose same-row neighbours carry that colour.
    pub const RB_AT_G_ROW: [[i8; 5]; 5] = [
        [0, 0, 1, 0, 0],
        [0, -2, 0, -2, 0],
        [-2, 8, 10, 8, -2],
        [0, -2, 0, -2, 0],
        [0, 0, 1, 0, 0],
    ];

    /// Red or blue at a green site whose same-column neighbours carry that colour.
    pub const RB_AT_G_COL: [[i8; 5]; 5] = [
        [0, 0, -2, 0, 0],
        [0, -2, 8, -2, 0],
        [1, 0, 10, 0, 1],
        [0, -2, 8, -2, 0],
        [0, 0, -2, 0, 0],
    ];

    /// Red at a blue site, or blue at a red site.
    pub const RB_AT_BR: [[i8; 5]; 5] = [
        [0, 0, -3, 0, 0],
        [0, 4, 0, 4, 0],
        [-3, 0, 12, 0, -3],
        [0, 4, 0, 4, 0],
        [0, 0, -3, 0, 0],
    ];

    pub const ALL: [&[[i8; 5]; 5]; 4] = [&G_AT_RB, &RB_AT_G_ROW, &RB_AT_G_COL, &RB_AT_BR];
}

/// Demosaicking methods without learned weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Baseline {
    Bilinear,
    Malvar,
}

impl Baseline {
    pub const ALL: [Baseline; 2] = [Baseline::Bilinear, Baseline::Malvar];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Bilinear => "bilinear",
            Baseline::Malvar => "malvar",
        }
    }

    pub fn run(self, bayer: &BayerImage) -> Result<RgbImage> {
        match self {
            Baseline::Bilinear => bilinear_demosaic(bayer),
            Baseline::Malvar => malvar_demosaic(bayer),
        }
    }
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Baseline::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown baseline '{s}' (expected bilinear or malvar)")))
    }
}

struct Mirror<'a> {
    bayer: &'a BayerImage,
}

impl Mirror<'_> {
    fn at(&self, r: isize, c: isize) -> f32 {
        let h = self.bayer.height();
        let w = self.bayer.width();
        self.bayer.get(reflect_index(r, h), reflect_index(c, w))
    }
}

fn assemble(bayer: &BayerImage, mut pixel: impl FnMut(usize, usize) -> [f32; 3]) -> Result<RgbImage> {
    let (h, w) = (bayer.height(), bayer.width());
    let mut data = vec![0.0f32; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            let p = pixel(r, c);
            for ch in 0..3 {
                data[ch * h * w + r * w + c] = p[ch];
            }
        }
    }
    RgbImage::from_unclamped(h, w, data)
}

pub fn bilinear_demosaic(bayer: &BayerImage) -> Result<RgbImage> {
    let m = Mirror { bayer };
    assemble(bayer, |r, c| {
        let (ri, ci) = (r as isize, c as isize);
        let own = bayer.get(r, c);
        let cross = (m.at(ri - 1, ci) + m.at(ri + 1, ci) + m.at(ri, ci - 1) + m.at(ri, ci + 1)) / 4.0;
        let diag = (m.at(ri - 1, ci - 1) + m.at(ri - 1, ci + 1) + m.at(ri + 1, ci - 1) + m.at(ri + 1, ci + 1)) / 4.0;
        let horiz = (m.at(ri, ci - 1) + m.at(ri, ci + 1)) / 2.0;
        let vert = (m.at(ri - 1, ci) + m.at(ri + 1, ci)) / 2.0;
        match cfa_color(r, c) {
            CfaColor::Red => [own, cross, diag],
            CfaColor::Blue => [diag, cross, own],
            // row 0 greens sit between blues, row 1 greens between reds
            CfaColor::Green if r % 2 == 0 => [vert, own, horiz],
            CfaColor::Green => [horiz, own, vert],
        }
    })
}

fn apply_kernel(m: &Mirror<'_>, r: usize, c: usize, k: &[[i8; 5]; 5]) -> f32 {
    let mut acc = 0.0f32;
    for (dr, row) in k.iter().enumerate() {
        for (dc, &w) in row.iter().enumerate() {
            if w != 0 {
                acc += w as f32 * m.at(r as isize + dr as isize - 2, c as isize + dc as isize - 2);
            }
        }
    }
    acc / malvar_kernels::MALVAR_DENOMINATOR as f32
}

pub fn malvar_demosaic(bayer: &BayerImage) -> Result<RgbImage> {
    use malvar_kernels::*;
    let m = Mirror { bayer };
    assemble(bayer, |r, c| {
        let own = bayer.get(r, c);
        let k = |kernel| apply_kernel(&m, r, c, kernel);
        let p = match cfa_color(r, c) {
            CfaColor::Red => [own, k(&G_AT_RB), k(&RB_AT_BR)],
            CfaColor::Blue => [k(&RB_AT_BR), k(&G_AT_RB), own],
            CfaColor::Green if r % 2 == 0 => [k(&RB_AT_G_COL), own, k(&RB_AT_G_ROW)],
            CfaColor::Green => [k(&RB_AT_G_ROW), own, k(&RB_AT_G_COL)],
        };
        p.map(|v| v.clamp(0.0, 1.0))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::mosaic;
    use sha2::{Digest, Sha256};

    #[test]
    fn malvar_kernels_match_golden_checksum() {
        let bytes: Vec<u8> = malvar_kernels::ALL.iter().flat_map(|k| k.iter().flatten().map(|&v| v as u8)).collect();
        let digest = Sha256::digest(&bytes);
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        assert_eq!(hex, "a8695399edc672750a51df05a4f8787552fa2864bb478c41d013ea2ee98c4754");
    }

    #[test]
    fn malvar_kernels_have_unit_dc_gain() {
        for k in malvar_kernels::ALL {
            let s: i32 = k.iter().flatten().map(|&v| v as i32).sum();
            assert_eq!(s, malvar_kernels::MALVAR_DENOMINATOR);
        }
        let t: Vec<Vec<i8>> = (0..5).map(|i| (0..5).map(|j| malvar_kernels::RB_AT_G_ROW[j][i]).collect()).collect();
        assert_eq!(t, malvar_kernels::RB_AT_G_COL.iter().map(|r| r.to_vec()).collect::<Vec<_>>());
    }

    fn constant_recovery(b: Baseline) {
        let img = RgbImage::filled(8, 10, [0.25, 0.5, 0.75]).unwrap();
        let out = b.run(&mosaic(&img).unwrap()).unwrap();
        assert_eq!(out, img, "{}", b.name());
    }

    #[test]
    fn constant_images_are_recovered_exactly() {
        constant_recovery(Baseline::Bilinear);
        constant_recovery(Baseline::Malvar);
    }

    #[test]
    fn bilinear_green_ramp_is_exact_in_interior() {
        let img = RgbImage::from_fn(6, 6, |_, c| [0.3, c as f32 / 8.0, 0.6]).unwrap();
        let out = bilinear_demosaic(&mosaic(&img).unwrap()).unwrap();
        for r in 1..5 {
            for c in 1..5 {
                assert!((out.get(1, r, c) - c as f32 / 8.0).abs() < 1e-7, "({r},{c})");
            }
        }
    }

    #[test]
    fn observed_samples_pass_through() {
        let img = RgbImage::from_fn(10, 12, |r, c| {
            [((r * 5 + c * 3) % 7) as f32 / 6.0, ((r + c * 7) % 5) as f32 / 4.0, ((r * c) % 9) as f32 / 8.0]
        })
        .unwrap();
        let bayer = mosaic(&img).unwrap();
        for b in Baseline::ALL {
            let out = b.run(&bayer).unwrap();
            for r in 0..10 {
                for c in 0..12 {
                    assert_eq!(out.get(cfa_color(r, c).channel(), r, c), bayer.get(r, c));
                }
            }
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn names_parse() {
        assert_eq!("malvar".parse::<Baseline>().unwrap(), Baseline::Malvar);
        assert!("menon".parse::<Baseline>().is_err());
    }
}
