//! Skipped inverted attention: mask the highest-gradient image cells, measured at the
//! deepest backbone feature, and re-run the detection loss on the masked image so the
//! calibrator is pushed to carry the under-represented regions.

use ndarray::{ArrayD, Ix4, IxDyn};

use crate::autograd::{Graph, Var};
use crate::detector::{forward, source_loss, DetectorConfig, LossVars};
use crate::error::{Error, Result};
use crate::synthdata::Annotation;

/// Binary inverted-attention masks `[N, H, W]` from a tap-layer gradient
/// `[N, C, h, w]`.
///
/// Per sample: channel-sum of |G|, nearest-resized to the image grid, then exactly
/// `round(p * H * W)` cells with the largest sums are zeroed (rank selection ordered
/// by value descending, flat index ascending). An all-zero gradient yields an all-ones
/// mask.
pub fn sia_mask(grad_tap: &ArrayD<f64>, p: f64, out_h: usize, out_w: usize) -> Result<ArrayD<f64>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("mask fraction must lie in [0, 1], got {p}")));
    }
    if grad_tap.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("non-finite tap gradient"));
    }
    let g4 = grad_tap
        .view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::input("tap gradient must be [N, C, h, w]"))?;
    let (n, c, h, w) = (g4.shape()[0], g4.shape()[1], g4.shape()[2], g4.shape()[3]);
    let mut mask = ArrayD::from_elem(IxDyn(&[n, out_h, out_w]), 1.0);
    let zeros_wanted = (p * (out_h * out_w) as f64).round() as usize;
    for ni in 0..n {
        // channel-sum of magnitudes on the tap grid
        let mut sums = vec![0.0f64; h * w];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    sums[y * w + x] += g4[[ni, ci, y, x]].abs();
                }
            }
        }
        if sums.iter().all(|&s| s == 0.0) {
            continue; // no region is over-represented
        }
        // nearest-neighbor resize to the image grid
        let mut cells: Vec<(f64, usize)> = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let sy = ((y as f64 + 0.5) * h as f64 / out_h as f64) as usize;
            for x in 0..out_w {
                let sx = ((x as f64 + 0.5) * w as f64 / out_w as f64) as usize;
                let flat = y * out_w + x;
                cells.push((sums[sy.min(h - 1) * w + sx.min(w - 1)], flat));
            }
        }
        // rank selection: value descending, index ascending on ties
        cells.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        for (_, flat) in cells.into_iter().take(zeros_wanted) {
            mask[IxDyn(&[ni, flat / out_w, flat % out_w])] = 0.0;
        }
    }
    Ok(mask)
}

/// Detection loss on the masked forward pass `S(A .* J)`. Gradients reach the image
/// only through unmasked cells.
pub fn sia_loss(
    g: &Graph,
    bind: &std::collections::HashMap<String, Var>,
    det_cfg: &DetectorConfig,
    j: Var,
    mask: &ArrayD<f64>,
    annotations: &[Vec<Annotation>],
) -> Result<LossVars> {
    let jshape = g.shape(j);
    if mask.shape() != [jshape[0], jshape[2], jshape[3]] {
        return Err(Error::input(format!(
            "mask shape {:?} does not match image {:?}",
            mask.shape(),
            jshape
        )));
    }
    let masked = g.mul_mask_nhw(j, mask);
    let head = forward(g, bind, masked);
    source_loss(g, &head, annotations, det_cfg)
}
