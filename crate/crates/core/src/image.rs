//! RGB rasters with values in `[0, 1]`.

use crate::error::{shape_err, Result};

/// Square RGB raster, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    side: usize,
    data: Vec<f32>,
}

/// Rec. 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn luminance(rgb: [f32; 3]) -> f32 {
    (LUMA[0] * rgb[0] as f64 + LUMA[1] * rgb[1] as f64 + LUMA[2] * rgb[2] as f64) as f32
}

/// Snaps a value to the 8-bit grid used by the on-disk format.
pub fn quantize(x: f32) -> f32 {
    to_byte(x) as f32 / 255.0
}

pub fn to_byte(x: f32) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl ImageGrid {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        if side == 0 || data.len() != side * side * 3 {
            return Err(shape_err!(
                "image of side {side} needs {} values, got {}",
                side * side * 3,
                data.len()
            ));
        }
        Ok(Self { side, data })
    }

    pub fn filled(side: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(side * side * 3);
        for _ in 0..side * side {
            data.extend_from_slice(&rgb);
        }
        Self { side, data }
    }

    pub fn from_fn(side: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(side * side * 3);
        for y in 0..side {
            for x in 0..side {
                data.extend_from_slice(&f(y, x));
            }
        }
        Self { side, data }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.side + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.side + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn luminance_at(&self, y: usize, x: usize) -> f32 {
        luminance(self.pixel(y, x))
    }

    /// Per-pixel luminance, row-major.
    pub fn luminance_map(&self) -> Vec<f32> {
        self.data
            .chunks_exact(3)
            .map(|p| luminance([p[0], p[1], p[2]]))
            .collect()
    }

    /// Foreground mask: luminance at or above 0.5.
    pub fn binarize(&self) -> Vec<bool> {
        self.luminance_map().into_iter().map(|l| l >= 0.5).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| to_byte(v)).collect()
    }

    pub fn from_bytes(side: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(side, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Copies the `side×side` block at pixel offset `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, side: usize) -> Result<Self> {
        if y0 + side > self.side || x0 + side > self.side {
            return Err(shape_err!(
                "crop {side} at ({y0},{x0}) outside image of side {}",
                self.side
            ));
        }
        Ok(Self::from_fn(side, |y, x| self.pixel(y0 + y, x0 + x)))
    }

    /// Pastes `src` with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, src: &ImageGrid, y0: usize, x0: usize) -> Result<()> {
        if y0 + src.side > self.side || x0 + src.side > self.side {
            return Err(shape_err!(
                "paste {} at ({y0},{x0}) outside image of side {}",
                src.side,
                self.side
            ));
        }
        for y in 0..src.side {
            let d = ((y0 + y) * self.side + x0) * 3;
            let s = y * src.side * 3;
            self.data[d..d + src.side * 3].copy_from_slice(&src.data[s..s + src.side * 3]);
        }
        Ok(())
    }
}
