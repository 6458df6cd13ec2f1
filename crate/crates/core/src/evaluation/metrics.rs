//! Task metrics on pixel grids.

use crate::error::{shape_err, Error, Result};
use crate::image::ImageGrid;

fn check_pair(pred: &ImageGrid, gt: &ImageGrid) -> Result<()> {
    if pred.side() != gt.side() {
        return Err(shape_err!("prediction side {} vs ground truth side {}", pred.side(), gt.side()));
    }
    if gt.data().is_empty() {
        return Err(Error::Domain("empty image".into()));
    }
    Ok(())
}

/// `|a ∧ b| / |a ∨ b|`; an empty union counts as a perfect match.
fn iou(a: impl Iterator<Item = bool>, b: impl Iterator<Item = bool>) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean of foreground and background IoU, both masks taken at 0.5 luminance.
pub fn miou(pred: &ImageGrid, gt: &ImageGrid) -> Result<f64> {
    check_pair(pred, gt)?;
    let p = pred.binarize();
    let g = gt.binarize();
    let fg = iou(p.iter().copied(), g.iter().copied());
    let bg = iou(p.iter().map(|v| !v), g.iter().map(|v| !v));
    Ok((fg + bg) / 2.0)
}

/// Mean squared difference over pixels and channels.
pub fn mse_color(pred: &ImageGrid, gt: &ImageGrid) -> Result<f64> {
    check_pair(pred, gt)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / gt.data().len() as f64)
}
