//! Attention maps retained from one denoiser call.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Post-softmax maps of one retained block.
///
/// `self_map` is `[f, h, n, n]` (per frame, attention between pixels) and
/// `temporal_map` is `[n, h, f, f]` (per pixel, attention between frames).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockMaps<F> {
    pub block: usize,
    pub self_map: Tensor<F>,
    pub temporal_map: Tensor<F>,
}

/// Dimensions shared by the two maps of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapDims {
    pub frames: usize,
    pub heads: usize,
    pub pixels: usize,
}

impl<F: Real> BlockMaps<F> {
    /// Checks the `[f,h,n,n]` / `[n,h,f,f]` contract and returns the dimensions.
    pub fn dims(&self) -> Result<MapDims> {
        map_dims(self.self_map.shape(), self.temporal_map.shape())
    }

    /// Row-stochastic and nonnegative within `tol`.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for (name, t) in [("self_map", &self.self_map), ("temporal_map", &self.temporal_map)] {
            let k = *t.shape().last().unwrap_or(&1);
            for (r, row) in t.data().chunks_exact(k).enumerate() {
                let mut s = 0.0;
                for &v in row {
                    let v = v.as_f64();
                    if !(v >= 0.0) {
                        return Err(Error::Input(format!(
                            "block {} {name} row {r} has negative or non-finite entry {v}",
                            self.block
                        )));
                    }
                    s += v;
                }
                if (s - 1.0).abs() > tol {
                    return Err(Error::Input(format!(
                        "block {} {name} row {r} sums to {s}",
                        self.block
                    )));
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn map_dims(self_shape: &[usize], temp_shape: &[usize]) -> Result<MapDims> {
    let bad = || Error::shape("attention maps", self_shape, temp_shape);
    if self_shape.len() != 4 || temp_shape.len() != 4 {
        return Err(bad());
    }
    let (f, h, n) = (self_shape[0], self_shape[1], self_shape[2]);
    if self_shape[3] != n || temp_shape != [n, h, f, f] {
        return Err(bad());
    }
    Ok(MapDims {
        frames: f,
        heads: h,
        pixels: n,
    })
}

/// Maps of every retained block from one denoiser call.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionRecord<F> {
    pub blocks: Vec<BlockMaps<F>>,
}

impl<F: Real> AttentionRecord<F> {
    pub fn validate(&self, tol: f64) -> Result<()> {
        for b in &self.blocks {
            b.dims()?;
            b.check_normalized(tol)?;
        }
        Ok(())
    }

    pub fn block(&self, block: usize) -> Result<&BlockMaps<F>> {
        self.blocks
            .iter()
            .find(|b| b.block == block)
            .ok_or_else(|| Error::Input(format!("no maps recorded for block {block}")))
    }
}
