//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! A [`Graph`] is a per-step dynamic tape: forward ops append a value plus a backward
//! closure, [`Graph::backward`] walks the tape in reverse and accumulates gradients for
//! every node, so gradients with respect to intermediate tensors (an input image, a
//! backbone feature map) are as accessible as parameter gradients. Graphs are rebuilt
//! every iteration and dropped after the optimizer step.
//!
//! All ops are sequential per element with any internal parallelism restricted to
//! disjoint writes, so results are bit-reproducible regardless of thread scheduling.

pub mod check;
mod conv;
mod optim;

pub use optim::{he_normal, zeros, Adam, GradientDescent, ParamSet};

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{Array4, ArrayD, Axis, Ix2, Ix4, Zip};

type BackFn = Box<dyn Fn(&ArrayD<f64>, &mut Grads) + Send>;

struct TapeEntry {
    out: usize,
    back: BackFn,
}

struct Inner {
    vals: Vec<Arc<ArrayD<f64>>>,
    tape: Vec<TapeEntry>,
}

/// Handle to a node in a [`Graph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Gradients for every node of a graph, indexed by [`Var`].
pub struct Grads {
    g: Vec<Option<ArrayD<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.g[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<ArrayD<f64>> {
        self.g[v.0].take()
    }

    /// Add an external contribution (for combining gradients of several losses
    /// computed on the same graph).
    pub fn add_grad(&mut self, v: Var, contrib: ArrayD<f64>) {
        self.accum(v.0, contrib);
    }

    fn accum(&mut self, id: usize, contrib: ArrayD<f64>) {
        match &mut self.g[id] {
            Some(acc) => *acc += &contrib,
            slot => *slot = Some(contrib),
        }
    }
}

/// Dynamic computation tape.
pub struct Graph {
    inner: RefCell<Inner>,
    recording: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// Graph that records backward closures (training / gradient queries).
    pub fn new() -> Self {
        Graph {
            inner: RefCell::new(Inner { vals: Vec::new(), tape: Vec::new() }),
            recording: true,
        }
    }

    /// Graph that skips the tape entirely (inference).
    pub fn inference() -> Self {
        Graph {
            inner: RefCell::new(Inner { vals: Vec::new(), tape: Vec::new() }),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Insert a value with no upstream dependencies.
    pub fn leaf(&self, v: ArrayD<f64>) -> Var {
        self.leaf_shared(Arc::new(v))
    }

    /// Insert a shared value without copying it.
    pub fn leaf_shared(&self, v: Arc<ArrayD<f64>>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.vals.push(v);
        Var(inner.vals.len() - 1)
    }

    /// 0-d scalar leaf.
    pub fn scalar(&self, x: f64) -> Var {
        self.leaf(ArrayD::from_elem(ndarray::IxDyn(&[]), x))
    }

    /// Re-insert a node's value as a fresh leaf, cutting the gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let val = self.value(v);
        self.leaf_shared(val)
    }

    pub fn value(&self, v: Var) -> Arc<ArrayD<f64>> {
        Arc::clone(&self.inner.borrow().vals[v.0])
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.inner.borrow().vals[v.0].shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar_value on non-scalar");
        *val.iter().next().unwrap()
    }

    fn push(&self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.vals.push(Arc::new(value));
        let id = inner.vals.len() - 1;
        if self.recording {
            if let Some(back) = back {
                inner.tape.push(TapeEntry { out: id, back });
            }
        }
        Var(id)
    }

    /// Reverse pass from a scalar loss. Gradients for every reachable node are
    /// accumulated and stay available in the returned [`Grads`].
    pub fn backward(&self, loss: Var) -> Grads {
        assert!(self.recording, "backward on an inference graph");
        let inner = self.inner.borrow();
        assert_eq!(inner.vals[loss.0].len(), 1, "backward needs a scalar loss");
        let mut grads = Grads { g: (0..inner.vals.len()).map(|_| None).collect() };
        grads.g[loss.0] = Some(ArrayD::from_elem(inner.vals[loss.0].raw_dim(), 1.0));
        for entry in inner.tape.iter().rev() {
            if grads.g[entry.out].is_some() {
                let gout = grads.g[entry.out].take().unwrap();
                (entry.back)(&gout, &mut grads);
                grads.g[entry.out] = Some(gout);
            }
        }
        grads
    }

    // ---- elementwise binary ----

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        back: impl Fn(&ArrayD<f64>, &ArrayD<f64>, &ArrayD<f64>) -> (ArrayD<f64>, ArrayD<f64>)
            + Send
            + 'static,
    ) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise op on mismatched shapes");
        let mut out = ArrayD::zeros(va.raw_dim());
        Zip::from(&mut out).and(&*va).and(&*vb).for_each(|o, &x, &y| *o = f(x, y));
        self.push(
            out,
            Some(Box::new(move |gout, grads| {
                let (ga, gb) = back(gout, &va, &vb);
                grads.accum(a.0, ga);
                grads.accum(b.0, gb);
            })),
        )
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, |g, _, _| (g.clone(), g.clone()))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, |g, _, _| (g.clone(), g.mapv(|v| -v)))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, |g, va, vb| (g * vb, g * va))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(
            a,
            b,
            |x, y| x / y,
            |g, va, vb| {
                let ga = g / vb;
                let mut gb = g * va;
                Zip::from(&mut gb).and(vb).for_each(|v, &y| *v = -*v / (y * y));
                (ga, gb)
            },
        )
    }

    // ---- elementwise unary ----

    fn unary(
        &self,
        a: Var,
        f: impl Fn(f64) -> f64,
        // maps (input, output, gout) -> ga elementwise
        dfdx: impl Fn(f64, f64) -> f64 + Send + 'static,
    ) -> Var {
        let va = self.value(a);
        let out = va.mapv(&f);
        let vout = Arc::new(out);
        let vback = Arc::clone(&vout);
        let mut inner = self.inner.borrow_mut();
        inner.vals.push(vout);
        let id = inner.vals.len() - 1;
        if self.recording {
            inner.tape.push(TapeEntry {
                out: id,
                back: Box::new(move |gout, grads| {
                    let mut ga = gout.clone();
                    Zip::from(&mut ga).and(&*va).and(&*vback).for_each(|g, &x, &y| *g *= dfdx(x, y));
                    grads.accum(a.0, ga);
                }),
            });
        }
        Var(id)
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| x + c, |_, _| 1.0)
    }

    pub fn leaky_relu(&self, a: Var, alpha: f64) -> Var {
        self.unary(
            a,
            move |x| if x > 0.0 { x } else { alpha * x },
            move |x, _| if x > 0.0 { 1.0 } else { alpha },
        )
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { let e = x.exp(); e / (1.0 + e) },
            |_, y| y * (1.0 - y),
        )
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(
            a,
            |x| x.max(0.0) + (-x.abs()).exp().ln_1p(),
            |x, _| if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { let e = x.exp(); e / (1.0 + e) },
        )
    }

    pub fn abs(&self, a: Var) -> Var {
        self.unary(a, f64::abs, |x, _| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
    }

    pub fn square(&self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    /// `x^gamma` for non-negative inputs (gamma >= 1).
    pub fn pow_const(&self, a: Var, gamma: f64) -> Var {
        self.unary(
            a,
            move |x| x.powf(gamma),
            move |x, _| if x == 0.0 && gamma < 1.0 { 0.0 } else { gamma * x.powf(gamma - 1.0) },
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.sum();
        self.push(
            ArrayD::from_elem(ndarray::IxDyn(&[]), s),
            Some(Box::new(move |gout, grads| {
                let g = gout[ndarray::IxDyn(&[])];
                grads.accum(a.0, ArrayD::from_elem(va.raw_dim(), g));
            })),
        )
    }

    pub fn mean_all(&self, a: Var) -> Var {
        let va = self.value(a);
        let n = va.len() as f64;
        let s = va.sum() / n;
        self.push(
            ArrayD::from_elem(ndarray::IxDyn(&[]), s),
            Some(Box::new(move |gout, grads| {
                let g = gout[ndarray::IxDyn(&[])] / n;
                grads.accum(a.0, ArrayD::from_elem(va.raw_dim(), g));
            })),
        )
    }

    // ---- shape ----

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        let old = va.shape().to_vec();
        assert_eq!(va.len(), shape.iter().product::<usize>(), "reshape element count mismatch");
        let out = va
            .to_shape(shape)
            .expect("contiguous reshape")
            .to_owned()
            .into_dyn();
        self.push(
            out,
            Some(Box::new(move |gout, grads| {
                let g = gout.to_shape(old.as_slice()).expect("contiguous reshape").to_owned();
                grads.accum(a.0, g.into_dyn());
            })),
        )
    }

    // ---- linear algebra ----

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let a2 = va.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-d");
        let b2 = vb.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-d");
        assert_eq!(a2.shape()[1], b2.shape()[0], "matmul inner dims");
        let out = a2.dot(&b2).into_dyn();
        self.push(
            out,
            Some(Box::new(move |gout, grads| {
                let g = gout.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
                grads.accum(a.0, g.dot(&b2.t()).into_dyn());
                grads.accum(b.0, a2.t().dot(&g).into_dyn());
            })),
        )
    }

    /// Add a `[d]` bias to every row of a `[n, d]` matrix.
    pub fn add_row_bias(&self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let x2 = vx.view().into_dimensionality::<Ix2>().expect("row-bias input 2-d");
        let (n, d) = (x2.shape()[0], x2.shape()[1]);
        assert_eq!(vb.shape(), [d], "bias length must match row width");
        let mut out = x2.to_owned();
        for mut row in out.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += vb[ndarray::IxDyn(&[j])];
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |gout, grads| {
                grads.accum(x.0, gout.clone());
                let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                let mut gb = ArrayD::zeros(ndarray::IxDyn(&[d]));
                for j in 0..d {
                    gb[ndarray::IxDyn(&[j])] = g2.column(j).sum();
                }
                let _ = n;
                grads.accum(b.0, gb);
            })),
        )
    }

    /// Add a per-channel bias to a `[N, C, H, W]` tensor.
    pub fn add_bias_chan(&self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("bias input 4-d");
        let c = x4.shape()[1];
        assert_eq!(vb.shape(), [c], "bias length must match channels");
        let mut out = x4.to_owned();
        for (ci, mut lane) in out.axis_iter_mut(Axis(1)).enumerate() {
            lane += vb[ndarray::IxDyn(&[ci])];
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |gout, grads| {
                grads.accum(x.0, gout.clone());
                let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
                let mut gb = ArrayD::zeros(ndarray::IxDyn(&[c]));
                for (ci, lane) in g4.axis_iter(Axis(1)).enumerate() {
                    gb[ndarray::IxDyn(&[ci])] = lane.sum();
                }
                grads.accum(b.0, gb);
            })),
        )
    }

    /// Multiply a `[N, C, H, W]` tensor by a constant `[N, H, W]` mask broadcast over
    /// channels. The mask is not a graph node; gradients flow only to `x` and are zero
    /// wherever the mask is zero.
    pub fn mul_mask_nhw(&self, x: Var, mask: &ArrayD<f64>) -> Var {
        let vx = self.value(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("mask input 4-d");
        let (n, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        assert_eq!(mask.shape(), [n, h, w], "mask shape must be [N, H, W]");
        let m = mask.clone();
        let mut out = x4.to_owned();
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        out[[ni, ci, hi, wi]] *= m[ndarray::IxDyn(&[ni, hi, wi])];
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |gout, grads| {
                let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = g4.to_owned();
                for ni in 0..n {
                    for ci in 0..c {
                        for hi in 0..h {
                            for wi in 0..w {
                                gx[[ni, ci, hi, wi]] *= m[ndarray::IxDyn(&[ni, hi, wi])];
                            }
                        }
                    }
                }
                grads.accum(x.0, gx.into_dyn());
            })),
        )
    }

    /// `[N, C, H, W] -> [N*H*W, C]`: one row per spatial cell.
    pub fn nchw_to_cells(&self, x: Var) -> Var {
        let vx = self.value(x);
        let x4 = vx.view().into_dimensionality::<Ix4>().expect("cells input 4-d");
        let (n, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
        let mut out = ndarray::Array2::<f64>::zeros((n * h * w, c));
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let m = (ni * h + hi) * w + wi;
                    for ci in 0..c {
                        out[[m, ci]] = x4[[ni, ci, hi, wi]];
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |gout, grads| {
                let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                let mut gx = Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            let m = (ni * h + hi) * w + wi;
                            for ci in 0..c {
                                gx[[ni, ci, hi, wi]] = g2[[m, ci]];
                            }
                        }
                    }
                }
                grads.accum(x.0, gx.into_dyn());
            })),
        )
    }

    /// Inverse of [`Graph::nchw_to_cells`].
    pub fn cells_to_nchw(&self, x: Var, n: usize, h: usize, w: usize) -> Var {
        let vx = self.value(x);
        let x2 = vx.view().into_dimensionality::<Ix2>().expect("cells 2-d");
        let c = x2.shape()[1];
        assert_eq!(x2.shape()[0], n * h * w, "cell count mismatch");
        let mut out = Array4::<f64>::zeros((n, c, h, w));
        for ni in 0..n {
            for hi in 0..h {
                for wi in 0..w {
                    let m = (ni * h + hi) * w + wi;
                    for ci in 0..c {
                        out[[ni, ci, hi, wi]] = x2[[m, ci]];
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |gout, grads| {
                let g4 = gout.view().into_dimensionality::<Ix4>().unwrap();
                let mut gx = ndarray::Array2::<f64>::zeros((n * h * w, c));
                for ni in 0..n {
                    for hi in 0..h {
                        for wi in 0..w {
                            let m = (ni * h + hi) * w + wi;
                            for ci in 0..c {
                                gx[[m, ci]] = g4[[ni, ci, hi, wi]];
                            }
                        }
                    }
                }
                grads.accum(x.0, gx.into_dyn());
            })),
        )
    }

    // ---- lookup ----

    /// Gather rows of a `[p, c]` table: `out[i, :] = table[idx[i], :]`. Backward
    /// scatter-adds into the table, so codebook entries indexed several times
    /// accumulate all their contributions.
    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Var {
        let vt = self.value(table);
        let t2 = vt.view().into_dimensionality::<Ix2>().expect("gather table 2-d");
        let (p, c) = (t2.shape()[0], t2.shape()[1]);
        let idx = idx.to_vec();
        let mut out = ndarray::Array2::<f64>::zeros((idx.len(), c));
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < p, "gather index out of range");
            out.row_mut(i).assign(&t2.row(r));
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |gout, grads| {
                let g2 = gout.view().into_dimensionality::<Ix2>().unwrap();
                let mut gt = ndarray::Array2::<f64>::zeros((p, c));
                for (i, &r) in idx.iter().enumerate() {
                    let mut row = gt.row_mut(r);
                    row += &g2.row(i);
                }
                grads.accum(table.0, gt.into_dyn());
            })),
        )
    }

    /// Forward takes the given value; backward copies the upstream gradient to `src`
    /// unchanged (straight-through estimator).
    pub fn straight_through(&self, src: Var, value: ArrayD<f64>) -> Var {
        let vs = self.value(src);
        assert_eq!(vs.shape(), value.shape(), "straight-through shape mismatch");
        self.push(
            value,
            Some(Box::new(move |gout, grads| {
                grads.accum(src.0, gout.clone());
            })),
        )
    }

    // ---- convolution ----

    /// 2-d convolution, `x [N, Cin, H, W] * w [Cout, Cin, kh, kw] -> [N, Cout, Ho, Wo]`,
    /// zero padding `pad` on all sides, square stride.
    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        let out = conv::conv2d_fwd(&vx, &vw, stride, pad);
        let y = match b {
            Some(bias) => {
                let yv = self.push_conv(x, w, vx, vw, out, stride, pad);
                self.add_bias_chan(yv, bias)
            }
            None => self.push_conv(x, w, vx, vw, out, stride, pad),
        };
        y
    }

    fn push_conv(
        &self,
        x: Var,
        w: Var,
        vx: Arc<ArrayD<f64>>,
        vw: Arc<ArrayD<f64>>,
        out: ArrayD<f64>,
        stride: usize,
        pad: usize,
    ) -> Var {
        self.push(
            out,
            Some(Box::new(move |gout, grads| {
                let (gx, gw) = conv::conv2d_bwd(&vx, &vw, gout, stride, pad);
                grads.accum(x.0, gx);
                grads.accum(w.0, gw);
            })),
        )
    }

    /// Nearest-neighbor 2x upsampling of a `[N, C, H, W]` tensor.
    pub fn upsample2(&self, x: Var) -> Var {
        let vx = self.value(x);
        let out = conv::upsample2_fwd(&vx);
        self.push(
            out,
            Some(Box::new(move |gout, grads| {
                grads.accum(x.0, conv::upsample2_bwd(gout));
            })),
        )
    }
}
