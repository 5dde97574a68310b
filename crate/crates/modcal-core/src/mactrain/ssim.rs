//! Windowed structural similarity, as a pure evaluation and as a differentiable graph
//! expression. Both run the same separable Gaussian-window convolutions in the same
//! order, so they agree to floating-point noise; the pure form backs the spec'd scalar
//! operation and the graph form backs the semantic-supervision loss.

use ndarray::{ArrayD, IxDyn};

use crate::autograd::{Graph, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    /// Dynamic range L; stabilizers are C1 = (0.01 L)^2 and C2 = (0.03 L)^2.
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig { window: 11, sigma: 1.5, dynamic_range: 1.0 }
    }
}

impl SsimConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        SsimConfig {
            window: cfg.u("ssim.window"),
            sigma: cfg.f("ssim.sigma"),
            dynamic_range: cfg.f("ssim.dynamic_range"),
        }
    }

    fn c1(&self) -> f64 {
        (0.01 * self.dynamic_range).powi(2)
    }

    fn c2(&self) -> f64 {
        (0.03 * self.dynamic_range).powi(2)
    }
}

fn gaussian_window(n: usize, sigma: f64) -> Vec<f64> {
    let center = (n as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - center).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Interpret a tensor as a stack of `[H, W]` planes (trailing two axes are spatial).
fn planes(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::input("ssim needs at least 2-d inputs"));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let n: usize = shape[..shape.len() - 2].iter().product::<usize>().max(1);
    Ok((n, h, w))
}

/// Windowed mean via two separable passes; `src` is one `[H, W]` plane flattened.
fn conv_separable(src: &[f64], h: usize, w: usize, kh: &[f64], kw: &[f64]) -> Vec<f64> {
    let wo = w - kw.len() + 1;
    let ho = h - kh.len() + 1;
    let mut tmp = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, &kv) in kw.iter().enumerate() {
                acc += kv * src[y * w + x + k];
            }
            tmp[y * wo + x] = acc;
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let mut acc = 0.0;
            for (k, &kv) in kh.iter().enumerate() {
                acc += kv * tmp[(y + k) * wo + x];
            }
            out[y * wo + x] = acc;
        }
    }
    out
}

/// Mean SSIM over all windows and planes. The window shrinks to fit small images.
pub fn ssim(a: &ArrayD<f64>, b: &ArrayD<f64>, cfg: &SsimConfig) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::input(format!(
            "ssim shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (n, h, w) = planes(a.shape())?;
    let kh = gaussian_window(cfg.window.min(h), cfg.sigma);
    let kw = gaussian_window(cfg.window.min(w), cfg.sigma);
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let av: Vec<f64> = a.iter().copied().collect();
    let bv: Vec<f64> = b.iter().copied().collect();
    let plane = h * w;
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in 0..n {
        let ap = &av[p * plane..(p + 1) * plane];
        let bp = &bv[p * plane..(p + 1) * plane];
        let aa: Vec<f64> = ap.iter().map(|x| x * x).collect();
        let bb: Vec<f64> = bp.iter().map(|x| x * x).collect();
        let ab: Vec<f64> = ap.iter().zip(bp).map(|(x, y)| x * y).collect();
        let mu_a = conv_separable(ap, h, w, &kh, &kw);
        let mu_b = conv_separable(bp, h, w, &kh, &kw);
        let s_aa = conv_separable(&aa, h, w, &kh, &kw);
        let s_bb = conv_separable(&bb, h, w, &kh, &kw);
        let s_ab = conv_separable(&ab, h, w, &kh, &kw);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = s_aa[i] - ma * ma;
            let vb = s_bb[i] - mb * mb;
            let cov = s_ab[i] - ma * mb;
            let num = (2.0 * (ma * mb) + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
            sum += num / den;
            count += 1;
        }
    }
    Ok(sum / count as f64)
}

/// Graph twin of [`ssim`] for `[N, C, H, W]` tensors: same windows, same formula,
/// differentiable with respect to both inputs. Returns the mean SSIM scalar.
pub fn ssim_graph(g: &Graph, a: Var, b: Var, cfg: &SsimConfig) -> Result<Var> {
    let shape = g.shape(a);
    if shape != g.shape(b) {
        return Err(Error::input("ssim shape mismatch"));
    }
    if shape.len() != 4 {
        return Err(Error::input("ssim_graph expects [N, C, H, W]"));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let kh = gaussian_window(cfg.window.min(h), cfg.sigma);
    let kw = gaussian_window(cfg.window.min(w), cfg.sigma);
    let (c1, c2) = (cfg.c1(), cfg.c2());

    let kh_arr = ArrayD::from_shape_vec(IxDyn(&[1, 1, kh.len(), 1]), kh.clone()).unwrap();
    let kw_arr = ArrayD::from_shape_vec(IxDyn(&[1, 1, 1, kw.len()]), kw.clone()).unwrap();
    let khv = g.leaf(kh_arr);
    let kwv = g.leaf(kw_arr);
    let win = |g: &Graph, x: Var| -> Var {
        let cols = g.conv2d(x, kwv, None, 1, 0);
        g.conv2d(cols, khv, None, 1, 0)
    };

    let ap = g.reshape(a, &[n * c, 1, h, w]);
    let bp = g.reshape(b, &[n * c, 1, h, w]);
    let mu_a = win(g, ap);
    let mu_b = win(g, bp);
    let s_aa = win(g, g.mul(ap, ap));
    let s_bb = win(g, g.mul(bp, bp));
    let s_ab = win(g, g.mul(ap, bp));

    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(s_aa, g.mul(mu_a, mu_a));
    let var_b = g.sub(s_bb, g.mul(mu_b, mu_b));
    let cov = g.sub(s_ab, mu_ab);

    let num = g.mul(g.add_scalar(g.scale(mu_ab, 2.0), c1), g.add_scalar(g.scale(cov, 2.0), c2));
    let den = g.mul(
        g.add_scalar(g.add(g.mul(mu_a, mu_a), g.mul(mu_b, mu_b)), c1),
        g.add_scalar(g.add(var_a, var_b), c2),
    );
    Ok(g.mean_all(g.div(num, den)))
}
