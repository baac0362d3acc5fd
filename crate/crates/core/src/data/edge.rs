//! Edge ground truth from segmentation masks.

use super::DataError;
use crate::tensor::{Scalar, Tensor};

/// Default band width of derived edge masks, in pixels.
pub const DEFAULT_EDGE_WIDTH: usize = 3;

/// Mask pixels whose 4-neighbourhood leaves the mask (outside the image counts
/// as background), dilated by a `width x width` square.
pub fn derive_edge_mask<T: Scalar>(mask: &Tensor<T>, width: usize) -> Result<Tensor<T>, DataError> {
    if width == 0 || width % 2 == 0 {
        return Err(DataError::Invalid(format!("edge width {width} must be odd")));
    }
    if let Some(v) = mask.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(DataError::NonBinary(v.as_f64()));
    }
    let s = mask.shape();
    let (h, w) = (s.h(), s.w());
    let r = (width / 2) as isize;
    let mut out = Tensor::zeros(s);
    for (plane, dst) in mask.data().chunks(h * w).zip(out.data_mut().chunks_mut(h * w)) {
        let on = |y: isize, x: isize| {
            y >= 0 && x >= 0 && y < h as isize && x < w as isize && plane[y as usize * w + x as usize] == T::one()
        };
        let boundary: Vec<bool> = (0..h * w)
            .map(|i| {
                let (y, x) = ((i / w) as isize, (i % w) as isize);
                on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1))
            })
            .collect();
        for (i, _) in boundary.iter().enumerate().filter(|(_, &b)| b) {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            for yy in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                    dst[yy as usize * w + xx as usize] = T::one();
                }
            }
        }
    }
    Ok(out)
}
