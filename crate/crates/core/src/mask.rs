//! Binary edit masks on the latent grid.

use std::path::Path;

use crate::error::{Error, Result};
use crate::formats::{self, ByteTensor};
use crate::tensor::{Real, Tensor};

/// `[f, h, w]` mask; 1 marks the region to edit, 0 the region to preserve.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentMask {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl LatentMask {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != frames * height * width {
            return Err(Error::shape("latent mask", &[data.len()], &[frames, height, width]));
        }
        Ok(LatentMask { frames, height, width, data })
    }

    pub fn filled(frames: usize, height: usize, width: usize, value: bool) -> Self {
        LatentMask {
            frames,
            height,
            width,
            data: vec![value; frames * height * width],
        }
    }

    pub fn get(&self, i: usize, y: usize, x: usize) -> bool {
        self.data[(i * self.height + y) * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn complement(&self) -> Self {
        LatentMask {
            data: self.data.iter().map(|m| !m).collect(),
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> ByteTensor {
        ByteTensor {
            shape: vec![self.frames, self.height, self.width],
            data: self.data.iter().map(|&m| u8::from(m)).collect(),
        }
    }

    /// Binarizes a `[f, H, W]` or `[H, W]` byte mask (values in {0, 1, 255})
    /// and resizes it to `frames × height × width`, each cell taking the
    /// source pixel at its top-left corner.
    pub fn from_pixels(mask: &ByteTensor, frames: usize, height: usize, width: usize) -> Result<Self> {
        let (f, h, w) = match mask.shape[..] {
            [f, h, w] => (f, h, w),
            [h, w] => (1, h, w),
            _ => return Err(Error::Input(format!("mask must be [f, H, W] or [H, W], got {:?}", mask.shape))),
        };
        let bad = mask.data.iter().filter(|&&v| !matches!(v, 0 | 1 | 255)).count();
        if bad > 0 {
            return Err(Error::Input(format!("mask has {bad} non-binary values")));
        }
        if f != 1 && f != frames {
            return Err(Error::Input(format!("mask has {f} frames, the video {frames}")));
        }
        let mut data = Vec::with_capacity(frames * height * width);
        for i in 0..frames {
            let src = if f == 1 { 0 } else { i };
            for y in 0..height {
                for x in 0..width {
                    let (sy, sx) = (y * h / height, x * w / width);
                    data.push(mask.data[(src * h + sy) * w + sx] != 0);
                }
            }
        }
        Self::new(frames, height, width, data)
    }
}

/// Reads a byte STRM mask and resizes it to the latent grid.
pub fn load_pixel_mask(path: impl AsRef<Path>, frames: usize, height: usize, width: usize) -> Result<LatentMask> {
    let path = path.as_ref();
    let raw = formats::read_byte_tensor(path)?;
    LatentMask::from_pixels(&raw, frames, height, width).map_err(|e| e.context(path.display()))
}

/// Per-frame dilation with a `(2r+1)²` square structuring element.
pub fn dilate_mask(m: &LatentMask, radius: usize) -> LatentMask {
    if radius == 0 {
        return m.clone();
    }
    let (h, w) = (m.height, m.width);
    let mut out = LatentMask::filled(m.frames, h, w, false);
    for i in 0..m.frames {
        for y in 0..h {
            for x in 0..w {
                let hit = (y.saturating_sub(radius)..=(y + radius).min(h - 1))
                    .any(|yy| (x.saturating_sub(radius)..=(x + radius).min(w - 1)).any(|xx| m.get(i, yy, xx)));
                out.data[(i * h + y) * w + x] = hit;
            }
        }
    }
    out
}

/// Takes `z_tgt` where the mask is set and `z_src` elsewhere; latents are
/// `[f, h, w, c]` and the mask broadcasts over channels.
pub fn mask_mix<F: Real>(z_tgt: &Tensor<F>, z_src: &Tensor<F>, m: &LatentMask) -> Result<Tensor<F>> {
    if z_tgt.shape() != z_src.shape() {
        return Err(Error::shape("mask_mix", z_tgt.shape(), z_src.shape()));
    }
    let shape = z_tgt.shape();
    if shape.len() != 4 || shape[..3] != [m.frames, m.height, m.width] {
        return Err(Error::shape("mask_mix", shape, &[m.frames, m.height, m.width]));
    }
    let c = shape[3];
    let data = z_tgt
        .data()
        .iter()
        .zip(z_src.data())
        .enumerate()
        .map(|(k, (&t, &s))| if m.data[k / c] { t } else { s })
        .collect();
    Tensor::new(shape.to_vec(), data)
}
