//! The source detector: a small anchor-free conv net with a single stride-8 head.
//!
//! The backbone runs stride-2 stages to a stride-8 and a stride-16 feature map; the
//! stride-16 map (the deepest feature, also the attention tap) is upsampled and fused
//! back into the stride-8 map feeding the head. Cells are assigned by box center; box
//! regression is L1 on (l, t, r, b) distances from the cell center in stride units;
//! classification and objectness use a sigmoid focal loss.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rayon::prelude::*;

use crate::autograd::{he_normal, zeros, Adam, Graph, ParamSet, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{load_checkpoint, save_checkpoint};
use crate::rng::{derive_seed, rng_from};
use crate::synthdata::{Annotation, Sample};

pub const STRIDE: usize = 8;
pub const STRIDE_DEEP: usize = 16;

#[derive(Clone, Debug)]
pub struct DetectorConfig {
    pub canvas: usize,
    pub classes: usize,
    pub width: usize,
    pub head_width: usize,
    pub lambda_bbox: f64,
    pub lambda_cls: f64,
    /// No mask head exists; kept so the loss weight set stays complete.
    pub lambda_mask: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub nms_iou: f64,
    pub score_thresh: f64,
}

impl DetectorConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        DetectorConfig {
            canvas: cfg.u("data.canvas"),
            classes: cfg.u("data.classes"),
            width: cfg.u("detector.width"),
            head_width: cfg.u("detector.head_width"),
            lambda_bbox: cfg.f("detector.lambda_bbox"),
            lambda_cls: cfg.f("detector.lambda_cls"),
            lambda_mask: cfg.f("detector.lambda_mask"),
            focal_alpha: cfg.f("detector.focal_alpha"),
            focal_gamma: cfg.f("detector.focal_gamma"),
            nms_iou: cfg.f("detector.nms_iou"),
            score_thresh: cfg.f("detector.score_thresh"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas == 0 || self.canvas % STRIDE_DEEP != 0 {
            return Err(Error::config(format!(
                "detector input side must be a positive multiple of {STRIDE_DEEP}, got {}",
                self.canvas
            )));
        }
        if self.lambda_bbox < 0.0 || self.lambda_cls < 0.0 || self.lambda_mask < 0.0 {
            return Err(Error::config("loss weights must be non-negative"));
        }
        if self.classes == 0 {
            return Err(Error::config("detector needs at least one class"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.canvas / STRIDE
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("canvas".into(), self.canvas.to_string());
        m.insert("classes".into(), self.classes.to_string());
        m.insert("width".into(), self.width.to_string());
        m.insert("head_width".into(), self.head_width.to_string());
        m.insert("lambda_bbox".into(), self.lambda_bbox.to_string());
        m.insert("lambda_cls".into(), self.lambda_cls.to_string());
        m.insert("lambda_mask".into(), self.lambda_mask.to_string());
        m.insert("focal_alpha".into(), self.focal_alpha.to_string());
        m.insert("focal_gamma".into(), self.focal_gamma.to_string());
        m.insert("nms_iou".into(), self.nms_iou.to_string());
        m.insert("score_thresh".into(), self.score_thresh.to_string());
        m
    }

    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<T> {
            m.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::load(format!("checkpoint config missing `{k}`")))
        }
        Ok(DetectorConfig {
            canvas: get(m, "canvas")?,
            classes: get(m, "classes")?,
            width: get(m, "width")?,
            head_width: get(m, "head_width")?,
            lambda_bbox: get(m, "lambda_bbox")?,
            lambda_cls: get(m, "lambda_cls")?,
            lambda_mask: get(m, "lambda_mask")?,
            focal_alpha: get(m, "focal_alpha")?,
            focal_gamma: get(m, "focal_gamma")?,
            nms_iou: get(m, "nms_iou")?,
            score_thresh: get(m, "score_thresh")?,
        })
    }
}

/// Detector parameters plus config. Parameter names carry the `s.` prefix so they can
/// be merged with calibrator parameters into a single set.
pub struct Detector {
    pub cfg: DetectorConfig,
    pub params: ParamSet,
}

/// Initialize detector parameters. Head biases start at -2 so the net begins in a
/// low-confidence regime; box bias starts near the typical target scale.
pub fn init_params(cfg: &DetectorConfig, seed: u64) -> ParamSet {
    let mut rng = rng_from(derive_seed(seed, "detector-init", 0));
    let (w, hw, k) = (cfg.width, cfg.head_width, cfg.classes);
    let mut p = ParamSet::new();
    let mut conv = |p: &mut ParamSet, name: &str, cout: usize, cin: usize, ks: usize| {
        p.insert(format!("s.{name}.w"), he_normal(&mut rng, &[cout, cin, ks, ks], cin * ks * ks));
        p.insert(format!("s.{name}.b"), zeros(&[cout]));
    };
    conv(&mut p, "c1", w, 3, 3);
    conv(&mut p, "c2", 2 * w, w, 3);
    conv(&mut p, "c3", 3 * w, 2 * w, 3);
    conv(&mut p, "c4", 4 * w, 3 * w, 3);
    conv(&mut p, "fuse", 3 * w, 4 * w, 1);
    conv(&mut p, "head", hw, 3 * w, 3);
    conv(&mut p, "cls", k, hw, 1);
    conv(&mut p, "box", 4, hw, 1);
    conv(&mut p, "obj", 1, hw, 1);
    p.set("s.cls.b", ArrayD::from_elem(IxDyn(&[k]), -2.0));
    p.set("s.obj.b", ArrayD::from_elem(IxDyn(&[1]), -2.0));
    p.set("s.box.b", ArrayD::from_elem(IxDyn(&[4]), 1.0));
    p
}

impl Detector {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, seed);
        Ok(Detector { cfg, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, "detector", &self.cfg.to_map(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.kind != "detector" {
            return Err(Error::load(format!(
                "{}: expected a detector checkpoint, found `{}`",
                path.display(),
                ckpt.kind
            )));
        }
        let cfg = DetectorConfig::from_map(&ckpt.config)?;
        Ok(Detector { cfg, params: ckpt.params })
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}

/// Raw head outputs plus the deepest backbone feature (the attention tap).
pub struct HeadVars {
    /// `[N, K, g, g]` class logits.
    pub cls: Var,
    /// `[N, 4, g, g]` (l, t, r, b) in stride units.
    pub boxreg: Var,
    /// `[N, 1, g, g]` objectness logits.
    pub obj: Var,
    /// `[N, 4w, g/2, g/2]` stride-16 feature map.
    pub tap: Var,
}

fn block(
    g: &Graph,
    bind: &HashMap<String, Var>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let w = bind[&format!("s.{name}.w")];
    let b = bind[&format!("s.{name}.b")];
    g.conv2d(x, w, Some(b), stride, pad)
}

/// Forward pass over a bound parameter map. `image` is `[N, 3, H, W]`.
pub fn forward(g: &Graph, bind: &HashMap<String, Var>, image: Var) -> HeadVars {
    let a = 0.1;
    let c1 = g.leaky_relu(block(g, bind, "c1", image, 2, 1), a);
    let c2 = g.leaky_relu(block(g, bind, "c2", c1, 2, 1), a);
    let c3 = g.leaky_relu(block(g, bind, "c3", c2, 2, 1), a);
    let c4 = g.leaky_relu(block(g, bind, "c4", c3, 2, 1), a);
    let up = g.upsample2(c4);
    let fused = g.leaky_relu(g.add(block(g, bind, "fuse", up, 1, 0), c3), a);
    let h = g.leaky_relu(block(g, bind, "head", fused, 1, 1), a);
    HeadVars {
        cls: block(g, bind, "cls", h, 1, 0),
        boxreg: block(g, bind, "box", h, 1, 0),
        obj: block(g, bind, "obj", h, 1, 0),
        tap: c4,
    }
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

/// Dense cell targets for one batch.
pub struct CellTargets {
    pub cls: ArrayD<f64>,
    pub obj: ArrayD<f64>,
    pub boxt: ArrayD<f64>,
    /// `[N, g, g]`, 1 at assigned cells.
    pub pos: ArrayD<f64>,
    pub npos: usize,
}

/// Center-cell assignment. If two objects land in one cell the first in annotation
/// order keeps it.
pub fn encode_targets(annotations: &[Vec<Annotation>], cfg: &DetectorConfig) -> CellTargets {
    let n = annotations.len();
    let g = cfg.grid();
    let k = cfg.classes;
    let mut cls = ArrayD::zeros(IxDyn(&[n, k, g, g]));
    let mut obj = ArrayD::zeros(IxDyn(&[n, 1, g, g]));
    let mut boxt = ArrayD::zeros(IxDyn(&[n, 4, g, g]));
    let mut pos = ArrayD::zeros(IxDyn(&[n, g, g]));
    let mut npos = 0usize;
    for (ni, anns) in annotations.iter().enumerate() {
        for a in anns {
            let (cx, cy) = a.center();
            let gi = ((cy / STRIDE as f64) as usize).min(g - 1);
            let gj = ((cx / STRIDE as f64) as usize).min(g - 1);
            if pos[IxDyn(&[ni, gi, gj])] != 0.0 {
                continue;
            }
            let (ccx, ccy) = ((gj as f64 + 0.5) * STRIDE as f64, (gi as f64 + 0.5) * STRIDE as f64);
            let s = STRIDE as f64;
            boxt[IxDyn(&[ni, 0, gi, gj])] = (ccx - a.bbox[0]) / s;
            boxt[IxDyn(&[ni, 1, gi, gj])] = (ccy - a.bbox[1]) / s;
            boxt[IxDyn(&[ni, 2, gi, gj])] = (a.bbox[2] - ccx) / s;
            boxt[IxDyn(&[ni, 3, gi, gj])] = (a.bbox[3] - ccy) / s;
            cls[IxDyn(&[ni, a.class_id.min(k - 1), gi, gj])] = 1.0;
            obj[IxDyn(&[ni, 0, gi, gj])] = 1.0;
            pos[IxDyn(&[ni, gi, gj])] = 1.0;
            npos += 1;
        }
    }
    CellTargets { cls, obj, boxt, pos, npos }
}

/// Sigmoid focal loss summed over all elements, against a constant 0/1 target tensor.
fn focal_sum(g: &Graph, logits: Var, targets: &ArrayD<f64>, alpha: f64, gamma: f64) -> Var {
    let t = g.leaf(targets.clone());
    let one_minus_t = g.leaf(targets.mapv(|v| 1.0 - v));
    let p = g.sigmoid(logits);
    let one_minus_p = g.add_scalar(g.neg(p), 1.0);
    // positives: alpha * (1-p)^gamma * softplus(-x)
    let pos = g.mul(
        t,
        g.scale(g.mul(g.pow_const(one_minus_p, gamma), g.softplus(g.neg(logits))), alpha),
    );
    // negatives: (1-alpha) * p^gamma * softplus(x)
    let neg = g.mul(
        one_minus_t,
        g.scale(g.mul(g.pow_const(p, gamma), g.softplus(logits)), 1.0 - alpha),
    );
    g.sum_all(g.add(pos, neg))
}

/// Loss terms; `total = lambda_bbox * bbox + lambda_cls * cls` (the mask weight
/// multiplies an absent head and contributes nothing).
pub struct LossVars {
    pub total: Var,
    pub l_bbox: Var,
    pub l_cls: Var,
    pub npos: usize,
}

/// Detection loss against per-image annotation lists. Differentiable with respect to
/// the raw head and, through [`forward`], the input image.
pub fn source_loss(
    g: &Graph,
    head: &HeadVars,
    annotations: &[Vec<Annotation>],
    cfg: &DetectorConfig,
) -> Result<LossVars> {
    let shape = g.shape(head.cls);
    if shape.len() != 4 || shape[1] != cfg.classes {
        return Err(Error::input(format!("class head shape {shape:?} inconsistent with config")));
    }
    if shape[0] != annotations.len() {
        return Err(Error::input("batch size mismatch between head and annotations"));
    }
    let targets = encode_targets(annotations, cfg);
    let norm = targets.npos.max(1) as f64;

    let cls_sum = focal_sum(g, head.cls, &targets.cls, cfg.focal_alpha, cfg.focal_gamma);
    let obj_sum = focal_sum(g, head.obj, &targets.obj, cfg.focal_alpha, cfg.focal_gamma);
    let l_cls = g.scale(g.add(cls_sum, obj_sum), 1.0 / norm);

    let boxt = g.leaf(targets.boxt.clone());
    let diff = g.abs(g.sub(head.boxreg, boxt));
    let masked = g.mul_mask_nhw(diff, &targets.pos);
    let l_bbox = g.scale(g.sum_all(masked), 1.0 / (4.0 * norm));

    let total = g.add(g.scale(l_bbox, cfg.lambda_bbox), g.scale(l_cls, cfg.lambda_cls));
    let v = g.scalar_value(total);
    if !v.is_finite() {
        return Err(Error::numeric("non-finite detection loss".to_string()));
    }
    Ok(LossVars { total, l_bbox, l_cls, npos: targets.npos })
}

// ---------------------------------------------------------------------------
// inference
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub class_id: usize,
    pub bbox: [f64; 4],
    pub score: f64,
}

fn nms(mut cands: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    cands.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then(a.class_id.cmp(&b.class_id))
            .then(a.bbox[0].partial_cmp(&b.bbox[0]).unwrap())
            .then(a.bbox[1].partial_cmp(&b.bbox[1]).unwrap())
    });
    let mut kept: Vec<Detection> = Vec::new();
    for c in cands {
        let suppressed = kept.iter().any(|k| {
            k.class_id == c.class_id && crate::synthdata::iou(&k.bbox, &c.bbox) > iou_thresh
        });
        if !suppressed {
            kept.push(c);
        }
    }
    kept
}

fn decode_one(
    cls: &ArrayD<f64>,
    boxreg: &ArrayD<f64>,
    obj: &ArrayD<f64>,
    ni: usize,
    cfg: &DetectorConfig,
) -> Vec<Detection> {
    let gdim = cls.shape()[2];
    let k = cfg.classes;
    let s = STRIDE as f64;
    let canvas = cfg.canvas as f64;
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let mut cands = Vec::new();
    for gi in 0..gdim {
        for gj in 0..gdim {
            let po = sig(obj[IxDyn(&[ni, 0, gi, gj])]);
            let (ccx, ccy) = ((gj as f64 + 0.5) * s, (gi as f64 + 0.5) * s);
            for ki in 0..k {
                let score = po * sig(cls[IxDyn(&[ni, ki, gi, gj])]);
                if score < cfg.score_thresh {
                    continue;
                }
                let l = boxreg[IxDyn(&[ni, 0, gi, gj])];
                let t = boxreg[IxDyn(&[ni, 1, gi, gj])];
                let r = boxreg[IxDyn(&[ni, 2, gi, gj])];
                let b = boxreg[IxDyn(&[ni, 3, gi, gj])];
                let bbox = [
                    (ccx - l * s).clamp(0.0, canvas),
                    (ccy - t * s).clamp(0.0, canvas),
                    (ccx + r * s).clamp(0.0, canvas),
                    (ccy + b * s).clamp(0.0, canvas),
                ];
                if bbox[2] <= bbox[0] || bbox[3] <= bbox[1] {
                    continue;
                }
                cands.push(Detection { class_id: ki, bbox, score });
            }
        }
    }
    nms(cands, cfg.nms_iou)
}

/// Batch inference: score-thresholded, per-class NMS'd detections per image.
pub fn infer_batch(
    cfg: &DetectorConfig,
    params: &ParamSet,
    images: &ArrayD<f64>,
) -> Result<Vec<Vec<Detection>>> {
    let shape = images.shape();
    if shape.len() != 4 || shape[1] != 3 || shape[2] != cfg.canvas || shape[3] != cfg.canvas {
        return Err(Error::input(format!(
            "detector expects [N, 3, {c}, {c}], got {shape:?}",
            c = cfg.canvas
        )));
    }
    let g = Graph::inference();
    let bind = params.bind(&g);
    let image = g.leaf(images.clone());
    let head = forward(&g, &bind, image);
    let cls = g.value(head.cls);
    let boxreg = g.value(head.boxreg);
    let obj = g.value(head.obj);
    let n = shape[0];
    Ok((0..n).into_par_iter().map(|ni| decode_one(&cls, &boxreg, &obj, ni, cfg)).collect())
}

/// Single-image inference; `image` is `[3, H, W]`.
pub fn infer(
    cfg: &DetectorConfig,
    params: &ParamSet,
    image: &ArrayD<f64>,
) -> Result<Vec<Detection>> {
    let shape = image.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::input(format!("expected [3, H, W], got {shape:?}")));
    }
    let batched = image
        .to_shape([1, shape[0], shape[1], shape[2]])
        .map_err(|_| Error::input("non-contiguous image"))?
        .to_owned()
        .into_dyn();
    Ok(infer_batch(cfg, params, &batched)?.remove(0))
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct MapResult {
    pub ap50: f64,
    /// Mean AP over IoU 0.50:0.05:0.95.
    pub ap: f64,
    pub per_class_ap50: Vec<f64>,
}

/// AP for one class at one IoU threshold, 101-point interpolation.
fn ap_single(
    preds: &[(usize, Detection)],
    gts: &[Vec<Annotation>],
    class_id: usize,
    iou_thresh: f64,
) -> Option<f64> {
    let total_gt: usize =
        gts.iter().map(|g| g.iter().filter(|a| a.class_id == class_id).count()).sum();
    if total_gt == 0 {
        return None;
    }
    // detections already sorted by (score desc, image idx, insertion order)
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = Vec::new();
    for (img, det) in preds.iter().filter(|(_, d)| d.class_id == class_id) {
        let mut best: Option<(usize, f64)> = None;
        for (gi, ann) in gts[*img].iter().enumerate() {
            if ann.class_id != class_id || matched[*img][gi] {
                continue;
            }
            let i = crate::synthdata::iou(&det.bbox, &ann.bbox);
            if i >= iou_thresh && best.map_or(true, |(_, bi)| i > bi) {
                best = Some((gi, i));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[*img][gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    // precision-recall sweep
    let mut cum_tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(tp.len());
    for (i, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            cum_tp += 1;
        }
        let recall = cum_tp as f64 / total_gt as f64;
        let precision = cum_tp as f64 / (i + 1) as f64;
        points.push((recall, precision));
    }
    // 101-point interpolated AP
    let mut ap = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let p = points.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(0.0, f64::max);
        ap += p;
    }
    Some(ap / 101.0)
}

/// COCO-style AP: AP@0.5 and mean AP over ten IoU thresholds, 101-point interpolation,
/// averaged over classes that have ground truth.
pub fn evaluate_map(
    predictions: &[Vec<Detection>],
    gts: &[Vec<Annotation>],
    classes: usize,
) -> Result<MapResult> {
    if predictions.len() != gts.len() {
        return Err(Error::input(format!(
            "prediction/ground-truth image counts differ: {} vs {}",
            predictions.len(),
            gts.len()
        )));
    }
    let mut flat: Vec<(usize, Detection)> = Vec::new();
    for (i, dets) in predictions.iter().enumerate() {
        for d in dets {
            if !d.score.is_finite() {
                return Err(Error::input("non-finite detection score"));
            }
            flat.push((i, d.clone()));
        }
    }
    flat.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap().then(a.0.cmp(&b.0)));

    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    let mut per_class_ap50 = Vec::new();
    let mut ap50_sum = 0.0;
    let mut ap50_count = 0usize;
    for c in 0..classes {
        match ap_single(&flat, gts, c, 0.5) {
            Some(ap) => {
                per_class_ap50.push(ap);
                ap50_sum += ap;
                ap50_count += 1;
            }
            None => per_class_ap50.push(f64::NAN),
        }
    }
    let mut ap_all = 0.0;
    let mut ap_all_n = 0usize;
    for t in &thresholds {
        let mut s = 0.0;
        let mut n = 0usize;
        for c in 0..classes {
            if let Some(ap) = ap_single(&flat, gts, c, *t) {
                s += ap;
                n += 1;
            }
        }
        if n > 0 {
            ap_all += s / n as f64;
            ap_all_n += 1;
        }
    }
    Ok(MapResult {
        ap50: if ap50_count > 0 { ap50_sum / ap50_count as f64 } else { 0.0 },
        ap: if ap_all_n > 0 { ap_all / ap_all_n as f64 } else { 0.0 },
        per_class_ap50,
    })
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, serde::Serialize)]
pub struct TrainRecord {
    pub iter: usize,
    pub loss: f64,
    pub l_bbox: f64,
    pub l_cls: f64,
}

pub struct TrainSchedule {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl TrainSchedule {
    pub fn from_run(cfg: &RunConfig) -> Self {
        TrainSchedule {
            iters: cfg.u("detector.iters"),
            batch: cfg.u("detector.batch"),
            lr: cfg.f("detector.lr"),
            seed: derive_seed(cfg.u("run.seed") as u64, "train-source", 0),
            log_every: cfg.u("detector.log_every").max(1),
        }
    }
}

pub fn stack_images(images: &[&ArrayD<f64>]) -> ArrayD<f64> {
    let (c, h, w) = (images[0].shape()[0], images[0].shape()[1], images[0].shape()[2]);
    let mut out = ArrayD::zeros(IxDyn(&[images.len(), c, h, w]));
    for (i, s) in images.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(*s);
    }
    out
}

/// Seeded epoch ordering shared by all training loops.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from(derive_seed(seed, "epoch", epoch as u64)));
    idx
}

/// Train the source detector on `{image, annotations}` samples.
pub fn train_source(
    samples: &[Sample],
    cfg: &DetectorConfig,
    schedule: &TrainSchedule,
) -> Result<(Detector, Vec<TrainRecord>)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::input("empty training set"));
    }
    let mut det = Detector::new(cfg.clone(), schedule.seed)?;
    let mut opt = Adam::new(schedule.lr);
    let mut log = Vec::new();
    let n = samples.len();
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0usize;
    for iter in 0..schedule.iters {
        let mut batch: Vec<&Sample> = Vec::with_capacity(schedule.batch);
        while batch.len() < schedule.batch {
            if order.is_empty() {
                order = epoch_order(n, schedule.seed, epoch);
                epoch += 1;
            }
            batch.push(&samples[order.pop().unwrap()]);
        }
        let images: Vec<&ArrayD<f64>> = batch.iter().map(|s| &s.source).collect();
        let images = stack_images(&images);
        let anns: Vec<Vec<Annotation>> = batch.iter().map(|s| s.annotations()).collect();

        let g = Graph::new();
        let bind = det.params.bind(&g);
        let image = g.leaf(images);
        let head = forward(&g, &bind, image);
        let loss = source_loss(&g, &head, &anns, cfg)
            .map_err(|e| Error::numeric(format!("iteration {iter}: {e}")))?;
        let lv = g.scalar_value(loss.total);
        if !lv.is_finite() {
            return Err(Error::numeric(format!("training diverged at iteration {iter}")));
        }
        let mut grads = g.backward(loss.total);
        if iter % schedule.log_every == 0 || iter + 1 == schedule.iters {
            log.push(TrainRecord {
                iter,
                loss: lv,
                l_bbox: g.scalar_value(loss.l_bbox),
                l_cls: g.scalar_value(loss.l_cls),
            });
        }
        opt.step(&mut det.params, &bind, &mut grads, |_| true);
    }
    Ok((det, log))
}

/// Score threshold used when collecting detections for AP evaluation; low so the
/// precision-recall sweep sees the whole ranking.
pub const EVAL_SCORE_THRESH: f64 = 0.05;

/// Evaluate a detector over samples (source images vs annotations).
pub fn evaluate_detector(det: &Detector, samples: &[Sample]) -> Result<MapResult> {
    let eval_cfg = DetectorConfig { score_thresh: EVAL_SCORE_THRESH, ..det.cfg.clone() };
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let images: Vec<&ArrayD<f64>> = chunk.iter().map(|s| &s.source).collect();
        let images = stack_images(&images);
        preds.extend(infer_batch(&eval_cfg, &det.params, &images)?);
    }
    let gts: Vec<Vec<Annotation>> = samples.iter().map(|s| s.annotations()).collect();
    evaluate_map(&preds, &gts, det.cfg.classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::finite_diff_at;
    use rand::Rng;

    fn tiny_cfg() -> DetectorConfig {
        DetectorConfig {
            canvas: 16,
            classes: 2,
            width: 4,
            head_width: 8,
            lambda_bbox: 1.0,
            lambda_cls: 1.0,
            lambda_mask: 0.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            nms_iou: 0.5,
            score_thresh: 0.3,
        }
    }

    fn one_cell_cfg() -> DetectorConfig {
        DetectorConfig { canvas: 8, classes: 2, ..tiny_cfg() }
    }

    fn leaf_head(g: &Graph, cls: ArrayD<f64>, boxreg: ArrayD<f64>, obj: ArrayD<f64>) -> HeadVars {
        HeadVars {
            cls: g.leaf(cls),
            boxreg: g.leaf(boxreg),
            obj: g.leaf(obj),
            tap: g.leaf(ArrayD::zeros(IxDyn(&[1, 1, 1, 1]))),
        }
    }

    #[test]
    fn zero_weights_zero_loss() {
        let cfg = DetectorConfig { lambda_bbox: 0.0, lambda_cls: 0.0, ..one_cell_cfg() };
        let g = Graph::new();
        let head = leaf_head(
            &g,
            ArrayD::from_elem(IxDyn(&[1, 2, 1, 1]), 0.3),
            ArrayD::from_elem(IxDyn(&[1, 4, 1, 1]), 0.7),
            ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), -0.2),
        );
        let anns = vec![vec![Annotation { class_id: 0, bbox: [1.0, 1.0, 7.0, 7.0] }]];
        let loss = source_loss(&g, &head, &anns, &cfg).unwrap();
        assert_eq!(g.scalar_value(loss.total), 0.0);
    }

    #[test]
    fn saturated_perfect_head_has_negligible_loss() {
        let cfg = one_cell_cfg();
        let g = Graph::new();
        let mut cls = ArrayD::from_elem(IxDyn(&[1, 2, 1, 1]), -20.0);
        cls[IxDyn(&[0, 0, 0, 0])] = 20.0;
        let obj = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 20.0);
        // cell center (4,4); box [1,1,7,7] -> targets (3,3,3,3)/8
        let mut boxreg = ArrayD::zeros(IxDyn(&[1, 4, 1, 1]));
        for i in 0..4 {
            boxreg[IxDyn(&[0, i, 0, 0])] = 3.0 / 8.0;
        }
        let head = leaf_head(&g, cls, boxreg, obj);
        let anns = vec![vec![Annotation { class_id: 0, bbox: [1.0, 1.0, 7.0, 7.0] }]];
        let loss = source_loss(&g, &head, &anns, &cfg).unwrap();
        assert_eq!(g.scalar_value(loss.l_bbox), 0.0);
        assert!(g.scalar_value(loss.l_cls) < 1e-3);
    }

    #[test]
    fn one_cell_loss_matches_hand_computation() {
        let cfg = one_cell_cfg();
        let g = Graph::new();
        let cls_vals = [1.2, -0.7];
        let obj_val = 0.4;
        let box_vals = [0.9, 1.1, 0.8, 1.3];
        let mut cls = ArrayD::zeros(IxDyn(&[1, 2, 1, 1]));
        cls[IxDyn(&[0, 0, 0, 0])] = cls_vals[0];
        cls[IxDyn(&[0, 1, 0, 0])] = cls_vals[1];
        let mut boxreg = ArrayD::zeros(IxDyn(&[1, 4, 1, 1]));
        for (i, v) in box_vals.iter().enumerate() {
            boxreg[IxDyn(&[0, i, 0, 0])] = *v;
        }
        let obj = ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), obj_val);
        let head = leaf_head(&g, cls, boxreg, obj);
        let anns = vec![vec![Annotation { class_id: 0, bbox: [1.0, 1.0, 7.0, 7.0] }]];
        let loss = source_loss(&g, &head, &anns, &cfg).unwrap();

        // hand evaluation of the same formulas
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let sp = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
        let focal_pos = |x: f64| 0.25 * (1.0 - sig(x)).powi(2) * sp(-x);
        let focal_neg = |x: f64| 0.75 * sig(x).powi(2) * sp(x);
        let l_cls = focal_pos(cls_vals[0]) + focal_neg(cls_vals[1]) + focal_pos(obj_val);
        let t = 3.0 / 8.0;
        let l_bbox = box_vals.iter().map(|v| (v - t).abs()).sum::<f64>() / 4.0;
        let total = l_bbox + l_cls;
        assert!((g.scalar_value(loss.l_cls) - l_cls).abs() < 1e-6);
        assert!((g.scalar_value(loss.l_bbox) - l_bbox).abs() < 1e-6);
        assert!((g.scalar_value(loss.total) - total).abs() < 1e-6);
    }

    #[test]
    fn loss_decomposition_is_exact() {
        let cfg = DetectorConfig { lambda_bbox: 0.7, lambda_cls: 1.3, ..tiny_cfg() };
        let det = Detector::new(cfg.clone(), 5).unwrap();
        let g = Graph::new();
        let bind = det.params.bind(&g);
        let mut rng = rng_from(3);
        let image =
            g.leaf(ArrayD::from_shape_fn(IxDyn(&[2, 3, 16, 16]), |_| rng.gen_range(0.0..1.0)));
        let head = forward(&g, &bind, image);
        let anns = vec![
            vec![Annotation { class_id: 0, bbox: [2.0, 2.0, 9.0, 9.0] }],
            vec![Annotation { class_id: 1, bbox: [5.0, 4.0, 14.0, 12.0] }],
        ];
        let loss = source_loss(&g, &head, &anns, &cfg).unwrap();
        let recomposed = 0.7 * g.scalar_value(loss.l_bbox) + 1.3 * g.scalar_value(loss.l_cls);
        assert!((g.scalar_value(loss.total) - recomposed).abs() < 1e-9);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = tiny_cfg();
        let det = Detector::new(cfg.clone(), 7).unwrap();
        let mut rng = rng_from(11);
        let image = ArrayD::from_shape_fn(IxDyn(&[1, 3, 16, 16]), |_| rng.gen_range(0.0..1.0));
        let anns = vec![vec![Annotation { class_id: 1, bbox: [3.0, 3.0, 12.0, 11.0] }]];
        let run = |img: &ArrayD<f64>| -> f64 {
            let g = Graph::new();
            let bind = det.params.bind(&g);
            let image = g.leaf(img.clone());
            let head = forward(&g, &bind, image);
            let loss = source_loss(&g, &head, &anns, &cfg).unwrap();
            g.scalar_value(loss.total)
        };
        let g = Graph::new();
        let bind = det.params.bind(&g);
        let iv = g.leaf(image.clone());
        let head = forward(&g, &bind, iv);
        let loss = source_loss(&g, &head, &anns, &cfg).unwrap();
        let grads = g.backward(loss.total);
        let analytic = grads.get(iv).unwrap();
        let coords: Vec<usize> = (0..8).map(|i| (i * 97) % analytic.len()).collect();
        let numeric = finite_diff_at(&image, &coords, 1e-5, run);
        let a_flat = analytic.as_slice().unwrap();
        for (c, n) in coords.iter().zip(numeric.iter()) {
            let a = a_flat[*c];
            let denom = a.abs().max(n.abs()).max(1e-10);
            assert!((a - n).abs() / denom < 1e-3, "coord {c}: analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn infer_is_total_and_deterministic() {
        let cfg = tiny_cfg();
        let det = Detector::new(cfg.clone(), 9).unwrap();
        let zerosv = ArrayD::zeros(IxDyn(&[3, 16, 16]));
        let d1 = infer(&cfg, &det.params, &zerosv).unwrap();
        let d2 = infer(&cfg, &det.params, &zerosv).unwrap();
        assert_eq!(d1, d2);
        for d in &d1 {
            assert!(d.score.is_finite());
            assert!(d.bbox[0] >= 0.0 && d.bbox[2] <= 16.0);
        }
        let bad = ArrayD::zeros(IxDyn(&[3, 8, 8]));
        assert!(infer(&cfg, &det.params, &bad).is_err());
    }

    #[test]
    fn map_perfect_and_degenerate_cases() {
        let gts = vec![
            vec![
                Annotation { class_id: 0, bbox: [0.0, 0.0, 10.0, 10.0] },
                Annotation { class_id: 1, bbox: [20.0, 20.0, 32.0, 30.0] },
            ],
            vec![Annotation { class_id: 0, bbox: [5.0, 5.0, 15.0, 18.0] }],
        ];
        let perfect: Vec<Vec<Detection>> = gts
            .iter()
            .map(|g| {
                g.iter()
                    .map(|a| Detection { class_id: a.class_id, bbox: a.bbox, score: 1.0 })
                    .collect()
            })
            .collect();
        let r = evaluate_map(&perfect, &gts, 2).unwrap();
        assert!((r.ap50 - 1.0).abs() < 1e-12);
        assert!((r.ap - 1.0).abs() < 1e-12);

        let empty: Vec<Vec<Detection>> = vec![Vec::new(), Vec::new()];
        let r = evaluate_map(&empty, &gts, 2).unwrap();
        assert_eq!(r.ap50, 0.0);

        assert!(evaluate_map(&perfect[..1].to_vec(), &gts, 2).is_err());
    }

    /// One TP at IoU 0.6 (score 0.9) and one far FP (score 0.8) against a single GT:
    /// the exhaustive PR sweep gives precision 1.0 at recall 1.0 from rank 1, so the
    /// interpolated AP is 1.0 at IoU 0.5 and the threshold sweep keeps only the three
    /// thresholds at or below 0.6.
    #[test]
    fn map_matches_pr_oracle_on_two_detections() {
        let gts = vec![vec![Annotation { class_id: 0, bbox: [0.0, 0.0, 10.0, 10.0] }]];
        let preds = vec![vec![
            Detection { class_id: 0, bbox: [0.0, 0.0, 10.0, 6.0], score: 0.9 },
            Detection { class_id: 0, bbox: [30.0, 30.0, 40.0, 40.0], score: 0.8 },
        ]];
        assert!((crate::synthdata::iou(&preds[0][0].bbox, &gts[0][0].bbox) - 0.6).abs() < 1e-12);
        let r = evaluate_map(&preds, &gts, 1).unwrap();
        // brute-force oracle over the two rank positions
        let pr = [(1.0f64, 1.0f64), (1.0, 0.5)];
        let mut expected = 0.0;
        for i in 0..=100 {
            let rr = i as f64 / 100.0;
            expected += pr
                .iter()
                .filter(|(rec, _)| *rec >= rr)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max);
        }
        expected /= 101.0;
        assert!((r.ap50 - expected).abs() < 1e-12);
        assert!((r.ap - 3.0 / 10.0).abs() < 1e-12);
    }

    #[test]
    fn removing_a_false_positive_never_decreases_ap() {
        let mut rng = rng_from(17);
        for _case in 0..30 {
            let gts = vec![(0..rng.gen_range(1..4))
                .map(|i| {
                    let x = rng.gen_range(0.0..40.0);
                    let y = rng.gen_range(0.0..40.0);
                    Annotation { class_id: 0, bbox: [x, y, x + 8.0 + i as f64, y + 9.0] }
                })
                .collect::<Vec<_>>()];
            let mut preds: Vec<Detection> = Vec::new();
            for a in &gts[0] {
                if rng.gen_bool(0.7) {
                    preds.push(Detection {
                        class_id: 0,
                        bbox: a.bbox,
                        score: rng.gen_range(0.2..1.0),
                    });
                }
            }
            let n_fp = rng.gen_range(1..4);
            for _ in 0..n_fp {
                preds.push(Detection {
                    class_id: 0,
                    bbox: [60.0, 60.0, 70.0, 70.0],
                    score: rng.gen_range(0.2..1.0),
                });
            }
            let with_fp = evaluate_map(&[preds.clone()], &gts, 1).unwrap().ap50;
            let pos = preds.iter().position(|d| d.bbox[0] == 60.0).expect("has a false positive");
            preds.remove(pos);
            let without_fp = evaluate_map(&[preds], &gts, 1).unwrap().ap50;
            assert!(
                without_fp >= with_fp - 1e-12,
                "AP dropped after removing a false positive: {with_fp} -> {without_fp}"
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_inference() {
        let cfg = tiny_cfg();
        let det = Detector::new(cfg.clone(), 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.mcc");
        det.save(&path).unwrap();
        let loaded = Detector::load(&path).unwrap();
        assert_eq!(det.checksum(), loaded.checksum());
        let mut rng = rng_from(2);
        let img = ArrayD::from_shape_fn(IxDyn(&[3, 16, 16]), |_| rng.gen_range(0.0..1.0));
        assert_eq!(
            infer(&cfg, &det.params, &img).unwrap(),
            infer(&loaded.cfg, &loaded.params, &img).unwrap()
        );
    }

    #[test]
    fn short_training_is_seed_deterministic() {
        let gen = crate::synthdata::GenConfig {
            canvas: 16,
            classes: 2,
            max_objects: 1,
            min_size: 6,
            max_size: 10,
            margin: 1,
            background_kinds: 2,
        };
        let sensor = crate::synthdata::Sensor::new(crate::synthdata::SensorConfig {
            mode: crate::synthdata::SensorMode::SpatialDegraded,
            canvas: 16,
            proj_seed: 1,
            downsample: 2,
            blur_sigma: 0.0,
            channel_mix: false,
            noise_std: 0.0,
            scramble_downsample: 2,
            scramble_grid: 4,
            scramble_channels: 4,
        });
        let samples = crate::synthdata::generate_samples(5, "t", 8, &gen, &sensor).unwrap();
        let cfg = tiny_cfg();
        let sched = TrainSchedule { iters: 5, batch: 4, lr: 1e-3, seed: 3, log_every: 1 };
        let (a, _) = train_source(&samples, &cfg, &sched).unwrap();
        let (b, _) = train_source(&samples, &cfg, &sched).unwrap();
        assert_eq!(a.checksum(), b.checksum());
    }
}
