//! Procedural scenes: one geometric foreground shape over a textured
//! background with a few off-colour clutter blobs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::image::{quantize, ImageGrid};

pub const SHAPES: [&str; 3] = ["rect", "ellipse", "triangle"];
pub const FAMILIES: [(&str, [f32; 3]); 4] = [
    ("red", [0.95, 0.15, 0.10]),
    ("green", [0.20, 0.95, 0.30]),
    ("blue", [0.15, 0.20, 0.95]),
    ("yellow", [1.00, 0.95, 0.30]),
];
pub const N_CLASSES: usize = SHAPES.len() * FAMILIES.len();

pub fn class_shape(class: usize) -> usize {
    class / FAMILIES.len()
}

pub fn class_family(class: usize) -> usize {
    class % FAMILIES.len()
}

pub fn class_tag(class: usize) -> String {
    format!(
        "{}-{}",
        SHAPES[class_shape(class)],
        FAMILIES[class_family(class)].0
    )
}

pub struct Scene {
    pub image: ImageGrid,
    pub mask: Vec<bool>,
}

impl Scene {
    pub fn mask_image(&self) -> ImageGrid {
        let side = self.image.side();
        ImageGrid::from_fn(side, |y, x| {
            if self.mask[y * side + x] {
                [1.0; 3]
            } else {
                [0.0; 3]
            }
        })
    }

    /// Filled axis-aligned bounding box of the mask.
    pub fn box_image(&self) -> ImageGrid {
        let side = self.image.side();
        let (mut y0, mut y1, mut x0, mut x1) = (side, 0, side, 0);
        for y in 0..side {
            for x in 0..side {
                if self.mask[y * side + x] {
                    y0 = y0.min(y);
                    y1 = y1.max(y);
                    x0 = x0.min(x);
                    x1 = x1.max(x);
                }
            }
        }
        ImageGrid::from_fn(side, |y, x| {
            if (y0..=y1).contains(&y) && (x0..=x1).contains(&x) {
                [1.0; 3]
            } else {
                [0.0; 3]
            }
        })
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f32; 3], amount: f32) -> [f32; 3] {
    base.map(|c| (c + rng.gen_range(-amount..amount)).clamp(0.0, 1.0))
}

/// Smooth value noise in `[0, 1]`: random lattice values bilinearly upsampled.
fn value_noise(rng: &mut ChaCha8Rng, side: usize, cells: usize) -> Vec<f32> {
    let n = cells + 2;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.gen::<f32>()).collect();
    let mut out = Vec::with_capacity(side * side);
    let step = cells as f32 / side as f32;
    for y in 0..side {
        let fy = (y as f32 + 0.5) * step;
        let (iy, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..side {
            let fx = (x as f32 + 0.5) * step;
            let (ix, tx) = (fx.floor() as usize, fx.fract());
            let at = |a: usize, b: usize| lattice[a * n + b];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

fn shape_mask(rng: &mut ChaCha8Rng, side: usize, shape: usize) -> Vec<bool> {
    let s = side as f32;
    let (hw, hh) = match shape {
        0 => (rng.gen_range(0.18..0.28) * s, rng.gen_range(0.18..0.28) * s),
        1 => (rng.gen_range(0.21..0.31) * s, rng.gen_range(0.21..0.31) * s),
        _ => (rng.gen_range(0.26..0.36) * s, rng.gen_range(0.26..0.36) * s),
    };
    let cx = (s / 2.0 + rng.gen_range(-0.09..0.09) * s).clamp(hw + 1.0, s - hw - 1.0);
    let cy = (s / 2.0 + rng.gen_range(-0.09..0.09) * s).clamp(hh + 1.0, s - hh - 1.0);
    let apex = rng.gen_range(0.3..0.7f32);
    let mut mask = vec![false; side * side];
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
            let (dx, dy) = (px - cx, py - cy);
            mask[y * side + x] = match shape {
                0 => dx.abs() <= hw && dy.abs() <= hh,
                1 => (dx / hw).powi(2) + (dy / hh).powi(2) <= 1.0,
                _ => {
                    // upright triangle with its apex at a random fraction of the width
                    let top = cy - hh;
                    let t = (py - top) / (2.0 * hh);
                    if !(0.0..=1.0).contains(&t) {
                        false
                    } else {
                        let ax = cx - hw + apex * 2.0 * hw;
                        let left = ax + (cx - hw - ax) * t;
                        let right = ax + (cx + hw - ax) * t;
                        px >= left && px <= right
                    }
                }
            };
        }
    }
    mask
}

/// Renders one scene of the given class, quantized to the 8-bit grid.
pub fn render(rng: &mut ChaCha8Rng, side: usize, class: usize) -> Scene {
    let family = class_family(class);
    let area = (side * side) as f32;
    let mask = loop {
        let m = shape_mask(rng, side, class_shape(class));
        let frac = m.iter().filter(|&&b| b).count() as f32 / area;
        if (0.04..=0.60).contains(&frac) {
            break m;
        }
    };

    let level = rng.gen_range(0.46..0.54f32);
    let tint = jitter(rng, [0.0; 3], 0.03);
    let noise = value_noise(rng, side, 4);
    let mut image = ImageGrid::from_fn(side, |y, x| {
        let v = level + 0.12 * (noise[y * side + x] - 0.5);
        [v + tint[0], v + tint[1], v + tint[2]]
    });

    // clutter blobs in colours other than the foreground family
    let n_blobs = rng.gen_range(1..=2);
    for _ in 0..n_blobs {
        let other = (family + rng.gen_range(1..FAMILIES.len())) % FAMILIES.len();
        let color = jitter(rng, FAMILIES[other].1, 0.06);
        let r = rng.gen_range(0.06..0.09) * side as f32;
        let cx = rng.gen_range(0.0..side as f32);
        let cy = rng.gen_range(0.0..side as f32);
        for y in 0..side {
            for x in 0..side {
                let (dx, dy) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                if dx * dx + dy * dy <= r * r {
                    image.set_pixel(y, x, color);
                }
            }
        }
    }

    let fg = jitter(rng, FAMILIES[family].1, 0.06);
    for y in 0..side {
        for x in 0..side {
            if mask[y * side + x] {
                image.set_pixel(y, x, fg);
            }
        }
    }

    for v in image.data_mut() {
        *v = quantize(*v + rng.gen_range(-0.03..0.03));
    }
    Scene { image, mask }
}

/// Moves an 8-bit colour to the nearest colour whose Rec. 601 luma is an
/// exact multiple of 1/255, i.e. `299r + 587g + 114b ≡ 0 (mod 1000)`.
/// Returns the snapped colour and its gray level.
pub fn snap_to_luma_lattice(rgb: [u8; 3]) -> ([u8; 3], u8) {
    // 57 · 193 ≡ 1 (mod 500)
    const INV57: i64 = 193;
    let [r0, g0, b0] = rgb.map(|c| c as i64);
    let mut best: Option<(i64, [i64; 3])> = None;
    for radius in [10i64, 24, 64] {
        for r in (r0 - radius).max(0)..=(r0 + radius).min(255) {
            for g in (g0 - radius).max(0)..=(g0 + radius).min(255) {
                let t = (1000 - (299 * r + 587 * g) % 1000) % 1000;
                if t % 2 != 0 {
                    continue;
                }
                let base = (INV57 * (t / 2)) % 500;
                for b in [base, base + 500] {
                    if b > 255 {
                        continue;
                    }
                    let d = (r - r0).pow(2) + (g - g0).pow(2) + (b - b0).pow(2);
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, [r, g, b]));
                    }
                }
            }
        }
        if best.is_some() {
            break;
        }
    }
    let (_, [r, g, b]) = best.expect("lattice is dense enough");
    let k = (299 * r + 587 * g + 114 * b) / 1000;
    ([r as u8, g as u8, b as u8], k as u8)
}
