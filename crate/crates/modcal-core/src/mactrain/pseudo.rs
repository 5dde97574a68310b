//! Pseudo ground truth: run the pre-trained source detector on the paired source
//! images and keep detections above a confidence threshold as annotations.

use ndarray::ArrayD;

use crate::detector::{infer_batch, stack_images, Detector};
use crate::error::Result;
use crate::synthdata::Annotation;

pub fn pseudo_ground_truth(
    det: &Detector,
    source_images: &[&ArrayD<f64>],
    threshold: f64,
) -> Result<Vec<Vec<Annotation>>> {
    let mut out = Vec::with_capacity(source_images.len());
    for chunk in source_images.chunks(32) {
        let images = stack_images(chunk);
        for dets in infer_batch(&det.cfg, &det.params, &images)? {
            out.push(
                dets.into_iter()
                    .filter(|d| d.score >= threshold)
                    .map(|d| Annotation { class_id: d.class_id, bbox: d.bbox })
                    .collect(),
            );
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;
    use crate::rng::rng_from;
    use ndarray::IxDyn;
    use rand::Rng;

    #[test]
    fn threshold_one_keeps_nothing_and_calls_repeat() {
        let det = Detector::new(
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
                score_thresh: 0.05,
            },
            8,
        )
        .unwrap();
        let mut rng = rng_from(30);
        let imgs: Vec<ArrayD<f64>> = (0..3)
            .map(|_| ArrayD::from_shape_fn(IxDyn(&[3, 16, 16]), |_| rng.gen_range(0.0..1.0)))
            .collect();
        let refs: Vec<&ArrayD<f64>> = imgs.iter().collect();
        // score in [0, 1], so a threshold above 1 filters everything
        let empty = pseudo_ground_truth(&det, &refs, 1.0 + 1e-12).unwrap();
        assert!(empty.iter().all(|a| a.is_empty()));
        let a = pseudo_ground_truth(&det, &refs, 0.1).unwrap();
        let b = pseudo_ground_truth(&det, &refs, 0.1).unwrap();
        assert_eq!(a, b);
    }
}
