//! Latent re-initialization: nudge a noise sample once, find where each
//! concept's attention is strongest, move that patch of the latent into the
//! concept's box and re-standardize.

use crate::attention::{mask_bbox, PixelBox};
use crate::error::{Error, Result};
use crate::guidance::{guided_update, GuidanceConfig, TraceRow};
use crate::pipeline::{LatentState, Pipeline};
use crate::rng;
use crate::tensor::Tensor;

/// A window of a 2-D map: top-left `(row, col)`, extent, and window sum.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crop {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
    pub score: f64,
}

impl Crop {
    pub fn pixel_box(&self) -> PixelBox {
        PixelBox {
            row: self.row,
            col: self.col,
            height: self.height,
            width: self.width,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CropResult {
    pub concept_id: String,
    pub crop: Crop,
}

/// Summed-area table with a zero border: `(h+1) x (w+1)`.
pub struct SummedAreaTable {
    w1: usize,
    sums: Vec<f64>,
    abs_total: f64,
}

impl SummedAreaTable {
    pub fn new(map: &Tensor) -> Result<Self> {
        let (h, w) = map.dims2()?;
        let w1 = w + 1;
        let mut sums = vec![0.0; (h + 1) * w1];
        for i in 0..h {
            let mut row = 0.0;
            for j in 0..w {
                row += map.at2(i, j);
                sums[(i + 1) * w1 + j + 1] = sums[i * w1 + j + 1] + row;
            }
        }
        let abs_total = map.data().iter().map(|v| v.abs()).sum();
        Ok(SummedAreaTable {
            w1,
            sums,
            abs_total,
        })
    }

    /// Sum of the `height x width` window whose top-left pixel is `(row, col)`.
    pub fn window(&self, row: usize, col: usize, height: usize, width: usize) -> f64 {
        let s = |i: usize, j: usize| self.sums[i * self.w1 + j];
        s(row + height, col + width) - s(row, col + width) - s(row + height, col) + s(row, col)
    }

    /// Bound on the rounding error of [`Self::window`]; sums closer than
    /// this are treated as equal.
    pub fn tie_tolerance(&self) -> f64 {
        8.0 * f64::EPSILON * self.abs_total
    }
}

/// Window of the given extent with the largest sum; ties (within the
/// table's rounding error) go to the lexicographically smallest `(row, col)`.
/// The reported score is the winning window summed directly, row by row.
pub fn best_crop(map: &Tensor, width: usize, height: usize) -> Result<Crop> {
    let (h, w) = map.dims2()?;
    if width == 0 || height == 0 || width > w || height > h {
        return Err(Error::Argument(format!(
            "crop extent {height}x{width} does not fit a {h}x{w} map"
        )));
    }
    let sat = SummedAreaTable::new(map)?;
    let tol = sat.tie_tolerance();
    let mut best = Crop {
        row: 0,
        col: 0,
        height,
        width,
        score: sat.window(0, 0, height, width),
    };
    for row in 0..=h - height {
        for col in 0..=w - width {
            let score = sat.window(row, col, height, width);
            if score > best.score + tol {
                best = Crop {
                    row,
                    col,
                    height,
                    width,
                    score,
                };
            }
        }
    }
    best.score = (best.row..best.row + height)
        .flat_map(|i| (best.col..best.col + width).map(move |j| (i, j)))
        .fold(0.0, |acc, (i, j)| acc + map.at2(i, j));
    Ok(best)
}

/// Copies each crop's patch (all channels) of a snapshot of `z` onto the
/// matching destination box. Later concepts overwrite earlier ones where
/// boxes overlap; pixels outside every box are untouched.
pub fn transplant(z: &Tensor, crops: &[Crop], boxes: &[PixelBox]) -> Result<Tensor> {
    let [c, h, w] = z.shape()[..] else {
        return Err(Error::Shape(format!(
            "latent must be C x h x w, got {:?}",
            z.shape()
        )));
    };
    if crops.len() != boxes.len() {
        return Err(Error::Argument(format!(
            "{} crops for {} boxes",
            crops.len(),
            boxes.len()
        )));
    }
    let mut out = z.clone();
    for (crop, dst) in crops.iter().zip(boxes) {
        if crop.height != dst.height || crop.width != dst.width {
            return Err(Error::Argument(format!(
                "crop extent {}x{} differs from box extent {}x{}",
                crop.height, crop.width, dst.height, dst.width
            )));
        }
        let fits = |r: usize, col: usize| r + dst.height <= h && col + dst.width <= w;
        if !fits(crop.row, crop.col) || !fits(dst.row, dst.col) {
            return Err(Error::Argument("crop or box leaves the latent".into()));
        }
        for ch in 0..c {
            for di in 0..dst.height {
                for dj in 0..dst.width {
                    let src = (ch * h + crop.row + di) * w + crop.col + dj;
                    let to = (ch * h + dst.row + di) * w + dst.col + dj;
                    out.data_mut()[to] = z.data()[src];
                }
            }
        }
    }
    Ok(out)
}

/// Per-channel standardization to zero mean and unit population variance.
pub fn standardize(z: &Tensor) -> Result<Tensor> {
    let c = z.shape()[0];
    let per = z.numel() / c;
    let mut out = z.clone();
    for (ch, chunk) in out.data_mut().chunks_mut(per).enumerate() {
        let mean = chunk.iter().sum::<f64>() / per as f64;
        let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
        let std = var.sqrt();
        if std <= 1e-12 {
            return Err(Error::DegenerateLatent(format!(
                "channel {ch} has standard deviation {std}"
            )));
        }
        for v in chunk.iter_mut() {
            *v = (*v - mean) / std;
        }
    }
    Ok(out)
}

/// Everything produced while re-initializing.
#[derive(Clone, Debug)]
pub struct Reinitialization {
    pub latent: LatentState,
    /// The raw noise sample before any update.
    pub initial: Tensor,
    pub crops: Vec<CropResult>,
    pub rows: Vec<TraceRow>,
}

/// Seeded standard-normal latent of shape `channels x height x width`.
pub fn initial_noise(seed: u64, shape: [usize; 3]) -> Tensor {
    let mut r = rng::stream(seed, "latent/init");
    rng::normal_tensor(&mut r, &shape, 1.0)
}

/// Samples noise, applies one guided update at `t = T`, relocates the
/// strongest attention window of each concept into its box and
/// standardizes the result.
pub fn reinitialize(seed: u64, pipeline: &Pipeline) -> Result<Reinitialization> {
    let steps = pipeline.schedule.steps();
    let initial = initial_noise(seed, pipeline.latent_shape());
    if pipeline.conditioning()?.is_empty() {
        return Ok(Reinitialization {
            latent: LatentState {
                z: standardize(&initial)?,
                t: steps,
            },
            initial,
            crops: Vec::new(),
            rows: Vec::new(),
        });
    }
    let one_step = GuidanceConfig {
        max_iters: 1,
        ..pipeline.guidance
    };
    let update = guided_update(&initial, steps, steps, pipeline, &one_step)?;
    let (h, w) = pipeline.resolution();
    let (_, record) = pipeline.forward(&update.z, steps)?;
    let targets = pipeline.loss_targets()?;
    let mut crops = Vec::with_capacity(targets.len());
    let mut boxes = Vec::with_capacity(targets.len());
    for (n, (id, mask)) in targets.ids.iter().zip(&targets.masks).enumerate() {
        let dst = mask_bbox(mask)?;
        let map = record.mean_cross_map(n, h, w).ok_or_else(|| {
            Error::Configuration(format!("no cross-attention map for {id} at {h}x{w}"))
        })?;
        let crop = best_crop(&map, dst.width, dst.height)?;
        crops.push(CropResult {
            concept_id: id.clone(),
            crop,
        });
        boxes.push(dst);
    }
    let plain: Vec<Crop> = crops.iter().map(|c| c.crop).collect();
    let moved = transplant(&update.z, &plain, &boxes)?;
    Ok(Reinitialization {
        latent: LatentState {
            z: standardize(&moved)?,
            t: steps,
        },
        initial,
        crops,
        rows: update.rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spike_is_found() {
        let mut m = Tensor::zeros(&[5, 6]);
        m.data_mut()[2 * 6 + 3] = 1.0;
        let c = best_crop(&m, 1, 1).unwrap();
        assert_eq!((c.row, c.col, c.score), (2, 3, 1.0));
    }

    #[test]
    fn constant_map_ties_to_origin() {
        let m = Tensor::full(&[6, 6], 0.3);
        let c = best_crop(&m, 3, 2).unwrap();
        assert_eq!((c.row, c.col), (0, 0));
    }

    #[test]
    fn oversized_extent_is_rejected() {
        let m = Tensor::zeros(&[4, 4]);
        assert!(matches!(best_crop(&m, 5, 1), Err(Error::Argument(_))));
        assert!(matches!(best_crop(&m, 1, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn self_copy_is_identity() {
        let mut r = rng::stream(0, "t");
        let z = rng::normal_tensor(&mut r, &[3, 6, 6], 1.0);
        let b = PixelBox {
            row: 1,
            col: 2,
            height: 3,
            width: 2,
        };
        let crop = Crop {
            row: 1,
            col: 2,
            height: 3,
            width: 2,
            score: 0.0,
        };
        assert_eq!(transplant(&z, &[crop], &[b]).unwrap(), z);
    }

    #[test]
    fn extent_mismatch_is_rejected() {
        let z = Tensor::zeros(&[1, 4, 4]);
        let b = PixelBox {
            row: 0,
            col: 0,
            height: 2,
            width: 2,
        };
        let crop = Crop {
            row: 0,
            col: 0,
            height: 2,
            width: 3,
            score: 0.0,
        };
        assert!(matches!(
            transplant(&z, &[crop], &[b]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn standardize_moments_and_degenerate_channel() {
        let mut r = rng::stream(1, "t");
        let z = rng::normal_tensor(&mut r, &[4, 8, 8], 3.0).map(|v| v + 2.0);
        let s = standardize(&z).unwrap();
        for chunk in s.data().chunks(64) {
            let mean = chunk.iter().sum::<f64>() / 64.0;
            let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 64.0;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
        let again = standardize(&s).unwrap();
        for (a, b) in again.data().iter().zip(s.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut flat = z.clone();
        flat.data_mut()[..64].fill(1.5);
        assert!(matches!(
            standardize(&flat),
            Err(Error::DegenerateLatent(_))
        ));
    }
}
