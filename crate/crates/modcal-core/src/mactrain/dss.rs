//! Decayed semantic supervision: image-space similarity toward a cached inverted
//! target, with a weight that decays per iteration, added to the detection loss.

use ndarray::ArrayD;

use super::ssim::{ssim_graph, SsimConfig};
use crate::autograd::{Graph, Var};
use crate::detector::{forward, source_loss, DetectorConfig, HeadVars, LossVars};
use crate::error::{Error, Result};
use crate::synthdata::Annotation;

/// `decay^t`. Iteration 0 is weight 1.
pub fn dss_lambda(t: u64, decay: f64) -> f64 {
    debug_assert!(decay > 0.0 && decay <= 1.0);
    decay.powi(t as i32)
}

pub struct DssOut {
    /// `lambda * ((1 - ssim) + L1) + detection loss`.
    pub total: Var,
    /// The weighted image term (0 when the targets coincide).
    pub image_term: Var,
    pub l_s: LossVars,
    pub head: HeadVars,
    pub lambda: f64,
}

/// Full decayed-semantic-supervision loss for a batch. `j_t` is the stacked constant
/// target `[N, 3, H, W]`; the detection loss is computed on a fresh forward of `j`.
pub fn dss_loss(
    g: &Graph,
    bind: &std::collections::HashMap<String, Var>,
    det_cfg: &DetectorConfig,
    ssim_cfg: &SsimConfig,
    j: Var,
    j_t: &ArrayD<f64>,
    annotations: &[Vec<Annotation>],
    t: u64,
    decay: f64,
) -> Result<DssOut> {
    if g.shape(j) != j_t.shape() {
        return Err(Error::input(format!(
            "semantic target shape {:?} does not match output {:?}",
            j_t.shape(),
            g.shape(j)
        )));
    }
    let lambda = dss_lambda(t, decay);
    let jt = g.leaf(j_t.clone());
    let sim = ssim_graph(g, j, jt, ssim_cfg)?;
    let dissim = g.add_scalar(g.neg(sim), 1.0);
    let l1 = g.mean_all(g.abs(g.sub(j, jt)));
    let image_term = g.scale(g.add(dissim, l1), lambda);
    let head = forward(g, bind, j);
    let l_s = source_loss(g, &head, annotations, det_cfg)?;
    let total = g.add(image_term, l_s.total);
    Ok(DssOut { total, image_term, l_s, head, lambda })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::{Detector, DetectorConfig};
    use crate::rng::rng_from;
    use ndarray::IxDyn;
    use rand::Rng;

    #[test]
    fn lambda_examples() {
        assert_eq!(dss_lambda(0, 0.9999), 1.0);
        assert_eq!(dss_lambda(1, 0.9999), 0.9999);
        let closed = (10_000.0 * 0.9999f64.ln()).exp();
        assert!((dss_lambda(10_000, 0.9999) - closed).abs() < 1e-12);
    }

    fn tiny_det() -> Detector {
        Detector::new(
            DetectorConfig {
                canvas: 16,
                classes: 2,
                width: 4,
                head_width: 8,
                lambda_bbox: 1.0,
                lambda_cls: 1.0,
                lambda_mask: 0.0,
                focal_alpha: 0.5,
                focal_gamma: 2.0,
                nms_iou: 0.5,
                score_thresh: 0.3,
            },
            5,
        )
        .unwrap()
    }

    #[test]
    fn equal_target_at_t0_reduces_to_detection_loss() {
        let det = tiny_det();
        let mut rng = rng_from(21);
        let j0 = ArrayD::from_shape_fn(IxDyn(&[1, 3, 16, 16]), |_| rng.gen_range(0.0..1.0));
        let anns = vec![vec![Annotation { class_id: 0, bbox: [2.0, 2.0, 10.0, 10.0] }]];
        let g = Graph::new();
        let bind = det.params.bind(&g);
        let j = g.leaf(j0.clone());
        let out =
            dss_loss(&g, &bind, &det.cfg, &SsimConfig::default(), j, &j0, &anns, 0, 0.9999)
                .unwrap();
        assert_eq!(g.scalar_value(out.image_term), 0.0);
        assert_eq!(g.scalar_value(out.total), g.scalar_value(out.l_s.total));
    }

    #[test]
    fn decay_limit_approaches_pure_detection_loss() {
        let det = tiny_det();
        let mut rng = rng_from(22);
        let j0 = ArrayD::from_shape_fn(IxDyn(&[1, 3, 16, 16]), |_| rng.gen_range(0.0..1.0));
        let jt = ArrayD::from_shape_fn(IxDyn(&[1, 3, 16, 16]), |_| rng.gen_range(0.0..1.0));
        let anns = vec![vec![Annotation { class_id: 1, bbox: [3.0, 5.0, 12.0, 13.0] }]];
        let g = Graph::new();
        let bind = det.params.bind(&g);
        let j = g.leaf(j0);
        // 0.9999^200000 < 1e-8: the image term is numerically negligible
        let out =
            dss_loss(&g, &bind, &det.cfg, &SsimConfig::default(), j, &jt, &anns, 200_000, 0.9999)
                .unwrap();
        let total = g.scalar_value(out.total);
        let ls = g.scalar_value(out.l_s.total);
        assert!((total - ls).abs() < 1e-5, "{total} vs {ls}");
    }

    #[test]
    fn hand_computed_image_terms_on_2x2() {
        // single-channel 2x2 pair: the SSIM window shrinks to 2x2 (one window) and the
        // L1 term is a plain mean of absolute differences
        let det = tiny_det();
        let j_vals = [0.2, 0.4, 0.6, 0.8];
        let t_vals = [0.1, 0.5, 0.55, 0.9];
        let j0 = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), j_vals.to_vec()).unwrap();
        let jt = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), t_vals.to_vec()).unwrap();
        let anns: Vec<Vec<Annotation>> = vec![Vec::new()];
        let _ = &det;

        // hand evaluation with the same Gaussian window
        let sigma: f64 = 1.5;
        let raw: Vec<f64> =
            (0..2).map(|i| (-((i as f64 - 0.5).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / norm).collect();
        let mut win = [0.0f64; 4];
        for (yi, wy) in w.iter().enumerate() {
            for (xi, wx) in w.iter().enumerate() {
                win[yi * 2 + xi] = wy * wx;
            }
        }
        let dotw = |v: &[f64; 4]| -> f64 { v.iter().zip(win.iter()).map(|(a, b)| a * b).sum() };
        let mu_a = dotw(&j_vals);
        let mu_b = dotw(&t_vals);
        let aa = j_vals.map(|v| v * v);
        let bb = t_vals.map(|v| v * v);
        let ab = [0, 1, 2, 3].map(|i| j_vals[i] * t_vals[i]);
        let (va, vb) = (dotw(&aa) - mu_a * mu_a, dotw(&bb) - mu_b * mu_b);
        let cov = dotw(&ab) - mu_a * mu_b;
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let ssim_hand = ((2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2))
            / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
        let l1_hand =
            j_vals.iter().zip(t_vals.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 4.0;
        let t = 3u64;
        let lambda = 0.9999f64.powi(3);
        let expected_image = lambda * ((1.0 - ssim_hand) + l1_hand);

        // graph evaluation of the image term alone (no detector needed for 1-channel)
        let g = Graph::new();
        let j = g.leaf(j0);
        let jtv = g.leaf(jt.clone());
        let sim = ssim_graph(&g, j, jtv, &SsimConfig::default()).unwrap();
        let dissim = g.add_scalar(g.neg(sim), 1.0);
        let l1 = g.mean_all(g.abs(g.sub(j, jtv)));
        let image_term = g.scale(g.add(dissim, l1), dss_lambda(t, 0.9999));
        let got = g.scalar_value(image_term);
        assert!((got - expected_image).abs() < 1e-9, "{got} vs {expected_image}");
        let _ = anns;
    }
}
