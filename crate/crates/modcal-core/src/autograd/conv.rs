//! im2col-backed convolution kernels. Batch items are independent, so the batch loop
//! runs on rayon with each sample writing a disjoint output slab; reductions over the
//! batch (weight gradients) are summed in index order to stay bit-deterministic.

use ndarray::{Array2, Array4, ArrayD, ArrayView3, ArrayView4, Ix4};
use rayon::prelude::*;

fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(input + 2 * pad >= k, "kernel larger than padded input");
    (input + 2 * pad - k) / stride + 1
}

/// Unfold one sample `[Cin, H, W]` into `[Cin*kh*kw, Ho*Wo]`.
fn im2col(x: &ArrayView3<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ho = out_dim(h, kh, stride, pad);
    let wo = out_dim(w, kw, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[[row, oi * wo + oj]] = x[[ci, ii as usize, jj as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Fold `[Cin*kh*kw, Ho*Wo]` gradient columns back onto a `[Cin, H, W]` input gradient.
fn col2im(
    cols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<f64> {
    let ho = out_dim(h, kh, stride, pad);
    let wo = out_dim(w, kw, stride, pad);
    let mut gx = ndarray::Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        gx[[ci, ii as usize, jj as usize]] += cols[[row, oi * wo + oj]];
                    }
                }
            }
        }
    }
    gx
}

pub fn conv2d_fwd(x: &ArrayD<f64>, w: &ArrayD<f64>, stride: usize, pad: usize) -> ArrayD<f64> {
    let x4: ArrayView4<f64> = x.view().into_dimensionality::<Ix4>().expect("conv input 4-d");
    let w4: ArrayView4<f64> = w.view().into_dimensionality::<Ix4>().expect("conv weight 4-d");
    let (n, cin, h, wdim) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let (cout, wcin, kh, kw) = (w4.shape()[0], w4.shape()[1], w4.shape()[2], w4.shape()[3]);
    assert_eq!(cin, wcin, "conv channel mismatch");
    let ho = out_dim(h, kh, stride, pad);
    let wo = out_dim(wdim, kw, stride, pad);
    let wmat = w4.to_shape((cout, cin * kh * kw)).expect("weight reshape").to_owned();

    let per_sample: Vec<Array2<f64>> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let cols = im2col(&x4.index_axis(ndarray::Axis(0), ni), kh, kw, stride, pad);
            wmat.dot(&cols)
        })
        .collect();

    let mut out = Array4::<f64>::zeros((n, cout, ho, wo));
    for (ni, y) in per_sample.into_iter().enumerate() {
        let y = y.into_shape_with_order((cout, ho, wo)).expect("output reshape");
        out.index_axis_mut(ndarray::Axis(0), ni).assign(&y);
    }
    out.into_dyn()
}

pub fn conv2d_bwd(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    gout: &ArrayD<f64>,
    stride: usize,
    pad: usize,
) -> (ArrayD<f64>, ArrayD<f64>) {
    let x4 = x.view().into_dimensionality::<Ix4>().unwrap();
    let w4 = w.view().into_dimensionality::<Ix4>().unwrap();
    let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
    let (n, cin, h, wdim) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let (cout, _, kh, kw) = (w4.shape()[0], w4.shape()[1], w4.shape()[2], w4.shape()[3]);
    let (ho, wo) = (g4.shape()[2], g4.shape()[3]);
    let wmat = w4.to_shape((cout, cin * kh * kw)).expect("weight reshape").to_owned();

    let per_sample: Vec<(ndarray::Array3<f64>, Array2<f64>)> = (0..n)
        .into_par_iter()
        .map(|ni| {
            let cols = im2col(&x4.index_axis(ndarray::Axis(0), ni), kh, kw, stride, pad);
            let gy = g4
                .index_axis(ndarray::Axis(0), ni)
                .to_shape((cout, ho * wo))
                .expect("grad reshape")
                .to_owned();
            let gw = gy.dot(&cols.t());
            let gcols = wmat.t().dot(&gy);
            let gx = col2im(&gcols, cin, h, wdim, kh, kw, stride, pad);
            (gx, gw)
        })
        .collect();

    let mut gx = Array4::<f64>::zeros((n, cin, h, wdim));
    let mut gw = Array2::<f64>::zeros((cout, cin * kh * kw));
    for (ni, (gxs, gws)) in per_sample.into_iter().enumerate() {
        gx.index_axis_mut(ndarray::Axis(0), ni).assign(&gxs);
        gw += &gws;
    }
    let gw = gw
        .into_shape_with_order((cout, cin, kh, kw))
        .expect("weight grad reshape");
    (gx.into_dyn(), gw.into_dyn())
}

pub fn upsample2_fwd(x: &ArrayD<f64>) -> ArrayD<f64> {
    let x4 = x.view().into_dimensionality::<Ix4>().expect("upsample input 4-d");
    let (n, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let mut out = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x4[[ni, ci, i, j]];
                    out[[ni, ci, 2 * i, 2 * j]] = v;
                    out[[ni, ci, 2 * i, 2 * j + 1]] = v;
                    out[[ni, ci, 2 * i + 1, 2 * j]] = v;
                    out[[ni, ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    out.into_dyn()
}

pub fn upsample2_bwd(gout: &ArrayD<f64>) -> ArrayD<f64> {
    let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h2, w2) = (g4.shape()[0], g4.shape()[1], g4.shape()[2], g4.shape()[3]);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::<f64>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    gx[[ni, ci, i, j]] = g4[[ni, ci, 2 * i, 2 * j]]
                        + g4[[ni, ci, 2 * i, 2 * j + 1]]
                        + g4[[ni, ci, 2 * i + 1, 2 * j]]
                        + g4[[ni, ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
    }
    gx.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn conv_matches_direct_computation() {
        // 1x1x3x3 input, 1x1x2x2 kernel, stride 1, no padding
        let x = ArrayD::from_shape_vec(
            IxDyn(&[1, 1, 3, 3]),
            vec![1., 2., 3., 4., 5., 6., 7., 8., 9.],
        )
        .unwrap();
        let w = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1., 0., 0., -1.]).unwrap();
        let y = conv2d_fwd(&x, &w, 1, 0);
        assert_eq!(y.shape(), [1, 1, 2, 2]);
        assert_eq!(y[IxDyn(&[0, 0, 0, 0])], 1. - 5.);
        assert_eq!(y[IxDyn(&[0, 0, 0, 1])], 2. - 6.);
        assert_eq!(y[IxDyn(&[0, 0, 1, 0])], 4. - 8.);
        assert_eq!(y[IxDyn(&[0, 0, 1, 1])], 5. - 9.);
    }

    #[test]
    fn upsample_roundtrip_shapes() {
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 4, 5]), |_| 1.5);
        let y = upsample2_fwd(&x);
        assert_eq!(y.shape(), [2, 3, 8, 10]);
        let g = upsample2_bwd(&y);
        assert_eq!(g.shape(), [2, 3, 4, 5]);
        assert_eq!(g[IxDyn(&[0, 0, 0, 0])], 6.0);
    }
}
