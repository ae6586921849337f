use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 8-bit grayscale image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Binary PGM (P5) bytes.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Channel mean of a `C x h x w` latent, min/max rescaled to `0..=255`.
/// A constant latent maps to uniform 128.
pub fn decode_preview(z: &Tensor) -> Result<GrayImage> {
    let [c, h, w] = z.shape()[..] else {
        return Err(Error::Shape(format!(
            "preview needs a C x h x w latent, got {:?}",
            z.shape()
        )));
    };
    let plane = h * w;
    let mut mean = vec![0.0; plane];
    for chunk in z.data().chunks(plane) {
        for (m, v) in mean.iter_mut().zip(chunk) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= c as f64;
    }
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pixels = if hi > lo {
        mean.iter()
            .map(|m| ((m - lo) / (hi - lo) * 255.0).round() as u8)
            .collect()
    } else {
        vec![128; plane]
    };
    Ok(GrayImage {
        width: w,
        height: h,
        pixels,
    })
}
