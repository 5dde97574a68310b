//! The target-model training loop: four supervision modes (naive baseline, supervised,
//! self-supervised on pseudo labels, semi-supervised) and the calibration techniques
//! (reconstructor-initialized calibrator, two-stage update with the source module
//! frozen first, decayed semantic supervision, skipped inverted attention).
//!
//! With every technique flag off and ground-truth annotations, the loop is bit-identical
//! to the naive baseline: the flags only add terms or freeze groups, they never change
//! the shared random streams.

pub mod dss;
pub mod pseudo;
pub mod sia;
pub mod ssim;

pub use dss::{dss_lambda, dss_loss};
pub use pseudo::pseudo_ground_truth;
pub use sia::{sia_loss, sia_mask};
pub use ssim::{ssim, ssim_graph, SsimConfig};

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::Serialize;

use crate::autograd::{Adam, Graph, ParamSet};
use crate::calibrator::{calibrate_forward, Calibrator, CalibratorConfig};
use crate::config::RunConfig;
use crate::detector::{
    epoch_order, evaluate_map, forward, infer_batch, init_params as det_init, source_loss,
    stack_images, Detection, Detector, DetectorConfig, MapResult, EVAL_SCORE_THRESH,
};
use crate::error::{Error, Result};
use crate::fsr::{trainable_set, transfer_to_calibrator, Reconstructor, StageSchedule};
use crate::inversion::{InversionConfig, SemanticCache};
use crate::io::{load_checkpoint, save_checkpoint};
use crate::rng::{derive_seed, rng_from};
use crate::synthdata::{Annotation, Sample};

// ---------------------------------------------------------------------------
// modes and configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrainMode {
    /// Randomly initialized calibrator, plain detection loss, ground-truth labels.
    Naive,
    MacSupervised,
    MacSelf,
    MacSemi(f64),
}

impl TrainMode {
    pub fn parse(s: &str, semi_fraction: f64) -> Result<Self> {
        match s {
            "naive" => Ok(TrainMode::Naive),
            "mac-supervised" => Ok(TrainMode::MacSupervised),
            "mac-self" => Ok(TrainMode::MacSelf),
            "mac-semi" => {
                if semi_fraction > 0.0 && semi_fraction < 1.0 {
                    Ok(TrainMode::MacSemi(semi_fraction))
                } else {
                    Err(Error::config("semi fraction must lie in (0, 1)"))
                }
            }
            other => Err(Error::config(format!("unknown training mode `{other}`"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            TrainMode::Naive => "naive".into(),
            TrainMode::MacSupervised => "mac-supervised".into(),
            TrainMode::MacSelf => "mac-self".into(),
            TrainMode::MacSemi(f) => format!("mac-semi({f})"),
        }
    }

    fn needs_pseudo(&self) -> bool {
        matches!(self, TrainMode::MacSelf | TrainMode::MacSemi(_))
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TechniqueFlags {
    pub fsr: bool,
    pub dss: bool,
    pub sia: bool,
    pub two_stage: bool,
}

#[derive(Clone, Debug)]
pub struct TargetTrainConfig {
    pub mode: TrainMode,
    pub flags: TechniqueFlags,
    /// Initialize the enclosed source module from the source checkpoint (otherwise it
    /// is randomly re-initialized and trained from scratch).
    pub source_init: bool,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub decay: f64,
    pub sia_p: f64,
    pub sia_cadence: usize,
    pub pseudo_threshold: f64,
    pub vq_weight: f64,
    pub stage1_frac: f64,
    pub freeze_codebook: bool,
    pub ssim: SsimConfig,
    pub seed: u64,
    pub log_every: usize,
    pub dump_samples: usize,
}

impl TargetTrainConfig {
    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        let mode = TrainMode::parse(cfg.s("target.mode"), cfg.f("target.semi_fraction"))?;
        Ok(TargetTrainConfig {
            mode,
            flags: TechniqueFlags {
                fsr: cfg.b("target.fsr"),
                dss: cfg.b("target.dss"),
                sia: cfg.b("target.sia"),
                two_stage: cfg.b("target.two_stage"),
            },
            source_init: cfg.b("target.source_init"),
            iters: cfg.u("target.iters"),
            batch: cfg.u("target.batch"),
            lr: cfg.f("target.lr"),
            decay: cfg.f("target.dss_decay"),
            sia_p: cfg.f("target.sia_p"),
            sia_cadence: cfg.u("target.sia_cadence").max(1),
            pseudo_threshold: cfg.f("target.pseudo_threshold"),
            vq_weight: cfg.f("target.vq_weight"),
            stage1_frac: cfg.f("fsr.stage1_frac"),
            freeze_codebook: cfg.b("fsr.freeze_codebook"),
            ssim: SsimConfig::from_run(cfg),
            seed: derive_seed(cfg.u("run.seed") as u64, "train-target", 0),
            log_every: cfg.u("target.log_every").max(1),
            dump_samples: cfg.u("target.dump_samples"),
        })
    }

    /// The naive baseline: ground-truth labels, no technique flags.
    pub fn naive_baseline(mut self) -> Self {
        self.mode = TrainMode::Naive;
        self.flags = TechniqueFlags::default();
        self
    }
}

// ---------------------------------------------------------------------------
// annotation provider with access accounting
// ---------------------------------------------------------------------------

/// Hands out per-sample annotations and counts every read of a manual annotation.
pub struct AnnotationProvider {
    gt: Vec<Vec<Annotation>>,
    pseudo: Option<Vec<Vec<Annotation>>>,
    use_gt: Vec<bool>,
    gt_reads: u64,
    read_samples: Vec<bool>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AnnotationStats {
    /// Total number of manual-annotation fetches.
    pub gt_reads: u64,
    /// Distinct samples whose manual annotations were read.
    pub distinct_gt_samples: usize,
    /// Samples selected to expose manual annotations.
    pub selected_gt_samples: usize,
}

impl AnnotationProvider {
    /// `selection[i]` decides whether sample `i` exposes its manual annotations or the
    /// pseudo labels.
    pub fn new(
        gt: Vec<Vec<Annotation>>,
        pseudo: Option<Vec<Vec<Annotation>>>,
        use_gt: Vec<bool>,
    ) -> Self {
        let n = gt.len();
        AnnotationProvider { gt, pseudo, use_gt, gt_reads: 0, read_samples: vec![false; n] }
    }

    pub fn for_mode(
        mode: TrainMode,
        gt: Vec<Vec<Annotation>>,
        pseudo: Option<Vec<Vec<Annotation>>>,
        seed: u64,
    ) -> Result<Self> {
        let n = gt.len();
        let use_gt = match mode {
            TrainMode::Naive | TrainMode::MacSupervised => vec![true; n],
            TrainMode::MacSelf => vec![false; n],
            TrainMode::MacSemi(f) => {
                let k = (f * n as f64).round() as usize;
                let order = {
                    use rand::seq::SliceRandom;
                    let mut idx: Vec<usize> = (0..n).collect();
                    idx.shuffle(&mut rng_from(derive_seed(seed, "semi-select", 0)));
                    idx
                };
                let mut sel = vec![false; n];
                for &i in order.iter().take(k) {
                    sel[i] = true;
                }
                sel
            }
        };
        if mode.needs_pseudo() && pseudo.is_none() {
            return Err(Error::state("pseudo labels required for this mode".to_string()));
        }
        Ok(Self::new(gt, pseudo, use_gt))
    }

    pub fn get(&mut self, i: usize) -> Vec<Annotation> {
        if self.use_gt[i] {
            self.gt_reads += 1;
            self.read_samples[i] = true;
            self.gt[i].clone()
        } else {
            self.pseudo.as_ref().expect("pseudo labels present")[i].clone()
        }
    }

    pub fn stats(&self) -> AnnotationStats {
        AnnotationStats {
            gt_reads: self.gt_reads,
            distinct_gt_samples: self.read_samples.iter().filter(|&&b| b).count(),
            selected_gt_samples: self.use_gt.iter().filter(|&&b| b).count(),
        }
    }
}

// ---------------------------------------------------------------------------
// the composed target model
// ---------------------------------------------------------------------------

/// Calibrator + source detector in one parameter set (`c.*` and `s.*`).
pub struct TargetModel {
    pub det_cfg: DetectorConfig,
    pub cal_cfg: CalibratorConfig,
    pub params: ParamSet,
    pub usage: Vec<u64>,
}

impl TargetModel {
    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut config = BTreeMap::new();
        for (k, v) in self.det_cfg.to_map() {
            config.insert(format!("det.{k}"), v);
        }
        for (k, v) in self.cal_cfg.to_map() {
            config.insert(format!("cal.{k}"), v);
        }
        save_checkpoint(path, "target", &config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.kind != "target" {
            return Err(Error::load(format!(
                "{}: expected a target checkpoint, found `{}`",
                path.display(),
                ckpt.kind
            )));
        }
        let mut det_map = BTreeMap::new();
        let mut cal_map = BTreeMap::new();
        for (k, v) in &ckpt.config {
            if let Some(rest) = k.strip_prefix("det.") {
                det_map.insert(rest.to_owned(), v.clone());
            } else if let Some(rest) = k.strip_prefix("cal.") {
                cal_map.insert(rest.to_owned(), v.clone());
            }
        }
        let det_cfg = DetectorConfig::from_map(&det_map)?;
        let cal_cfg = CalibratorConfig::from_map(&cal_map)?;
        let usage = vec![0u64; cal_cfg.codebook_size];
        Ok(TargetModel { det_cfg, cal_cfg, params: ckpt.params, usage })
    }

    /// End-to-end inference: target tensor batch to detections per sample.
    pub fn infer(&self, x: &ArrayD<f64>) -> Result<Vec<Vec<Detection>>> {
        let g = Graph::inference();
        let bind = self.params.bind(&g);
        let xv = g.leaf(x.clone());
        let fwd = calibrate_forward(&g, &bind, "c.", &self.cal_cfg, xv, None)?;
        let j = (*g.value(fwd.j)).clone();
        infer_batch(&self.det_cfg, &self.params, &j)
    }

    /// Calibrate only (for figures and diagnostics).
    pub fn calibrate(&self, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let g = Graph::inference();
        let bind = self.params.bind(&g);
        let xv = g.leaf(x.clone());
        let fwd = calibrate_forward(&g, &bind, "c.", &self.cal_cfg, xv, None)?;
        Ok((*g.value(fwd.j)).clone())
    }
}

/// Evaluate a target model on held-out samples (target tensors against annotations).
pub fn evaluate_target(model: &TargetModel, samples: &[Sample]) -> Result<MapResult> {
    let eval_cfg = DetectorConfig { score_thresh: EVAL_SCORE_THRESH, ..model.det_cfg.clone() };
    let mut preds = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(32) {
        let xs: Vec<&ArrayD<f64>> = chunk.iter().map(|s| &s.target).collect();
        let x = stack_images(&xs);
        let g = Graph::inference();
        let bind = model.params.bind(&g);
        let xv = g.leaf(x);
        let fwd = calibrate_forward(&g, &bind, "c.", &model.cal_cfg, xv, None)?;
        let j = (*g.value(fwd.j)).clone();
        preds.extend(infer_batch(&eval_cfg, &model.params, &j)?);
    }
    let gts: Vec<Vec<Annotation>> = samples.iter().map(|s| s.annotations()).collect();
    evaluate_map(&preds, &gts, model.det_cfg.classes)
}

// ---------------------------------------------------------------------------
// training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct TargetRecord {
    pub iter: usize,
    pub total: f64,
    pub l_s: f64,
    pub l_bbox: f64,
    pub l_cls: f64,
    pub dss_image: f64,
    pub l_sia: f64,
    pub commit: f64,
    pub codebook: f64,
    pub lambda: f64,
    pub mean_abs_dj: f64,
    pub stage2: bool,
    /// Checksum of the source-module parameters at this interval.
    pub source_checksum: String,
}

/// Tensors captured for figure rendering.
pub struct SampleDump {
    pub iter: usize,
    pub index_in_batch: usize,
    pub x: ArrayD<f64>,
    pub j: ArrayD<f64>,
    pub grad_j: ArrayD<f64>,
    pub mask: Option<ArrayD<f64>>,
    pub j_t: Option<ArrayD<f64>>,
    pub detections: Vec<Detection>,
    pub annotations: Vec<Annotation>,
}

pub struct TargetOutcome {
    pub model: TargetModel,
    pub log: Vec<TargetRecord>,
    pub annotation_stats: AnnotationStats,
    pub dumps: Vec<SampleDump>,
    /// Names copied from the reconstructor when the transfer ran.
    pub transfer_manifest: Vec<String>,
}

pub struct TargetTrainInputs<'a> {
    pub train: &'a [Sample],
    pub source: &'a Detector,
    pub reconstructor: Option<&'a Reconstructor>,
    /// Cache of inverted semantic targets plus the inversion budget used to fill it.
    pub jt_cache: Option<(&'a SemanticCache, InversionConfig)>,
    pub cal_cfg: CalibratorConfig,
}

fn stack_targets(samples: &[&Sample]) -> ArrayD<f64> {
    let xs: Vec<&ArrayD<f64>> = samples.iter().map(|s| &s.target).collect();
    stack_images(&xs)
}

fn stack_jt(tensors: &[&ArrayD<f64>]) -> ArrayD<f64> {
    stack_images(tensors)
}

/// Train the composed target model. See the module docs for mode/flag semantics.
pub fn train_target(
    inputs: &TargetTrainInputs,
    cfg: &TargetTrainConfig,
) -> Result<TargetOutcome> {
    if inputs.train.is_empty() {
        return Err(Error::input("empty training set"));
    }
    let det_cfg = inputs.source.cfg.clone();
    let n = inputs.train.len();

    // --- assemble the model ---------------------------------------------------
    let mut cal = Calibrator::new(inputs.cal_cfg.clone(), derive_seed(cfg.seed, "cal", 0))?;
    let mut transfer_manifest = Vec::new();
    if cfg.flags.fsr {
        let rec = inputs.reconstructor.ok_or_else(|| {
            Error::state(
                "reconstructor checkpoint missing: run the pretrain-fsr stage first".to_string(),
            )
        })?;
        transfer_manifest = transfer_to_calibrator(rec, &mut cal)?;
    }
    let det_params = if cfg.source_init {
        inputs.source.params.clone()
    } else {
        det_init(&det_cfg, derive_seed(cfg.seed, "det", 0))
    };
    let mut params = ParamSet::new();
    for (name, value) in cal.params.iter() {
        params.insert(name, (**value).clone());
    }
    for (name, value) in det_params.iter() {
        params.insert(name, (**value).clone());
    }

    // --- labels ----------------------------------------------------------------
    let gt: Vec<Vec<Annotation>> = inputs.train.iter().map(|s| s.annotations()).collect();
    let pseudo = if cfg.mode.needs_pseudo() {
        let sources: Vec<&ArrayD<f64>> = inputs.train.iter().map(|s| &s.source).collect();
        Some(pseudo_ground_truth(inputs.source, &sources, cfg.pseudo_threshold)?)
    } else {
        None
    };
    let mut provider = AnnotationProvider::for_mode(cfg.mode, gt, pseudo, cfg.seed)?;

    // --- semantic targets -------------------------------------------------------
    let jt_tensors: Option<Vec<ArrayD<f64>>> = if cfg.flags.dss {
        let (cache, inv_cfg) = inputs.jt_cache.as_ref().ok_or_else(|| {
            Error::state(
                "semantic-target cache missing: run the invert stage or configure a cache directory"
                    .to_string(),
            )
        })?;
        let items: Vec<(usize, Vec<Annotation>)> =
            (0..n).map(|i| (i, provider.get(i))).collect();
        let keys = cache.ensure(inputs.source, &items, inv_cfg)?;
        let mut tensors = Vec::with_capacity(n);
        for (i, key) in keys.iter().enumerate() {
            let t = cache.load(key).map_err(|e| {
                Error::state(format!("semantic target for sample {i} missing from cache: {e}"))
            })?;
            tensors.push(t);
        }
        Some(tensors)
    } else {
        None
    };

    // --- schedule and optimizer --------------------------------------------------
    let stage = if cfg.flags.two_stage {
        StageSchedule::new(cfg.stage1_frac, cfg.iters)
    } else {
        StageSchedule { stage1_iters: 0, total_iters: cfg.iters }
    };
    let mut opt = Adam::new(cfg.lr);
    let mut log = Vec::new();
    let mut dumps = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0usize;
    let canvas = det_cfg.canvas;

    for iter in 0..cfg.iters {
        let mut batch_idx: Vec<usize> = Vec::with_capacity(cfg.batch);
        while batch_idx.len() < cfg.batch {
            if order.is_empty() {
                order = epoch_order(n, cfg.seed, epoch);
                epoch += 1;
            }
            batch_idx.push(order.pop().unwrap());
        }
        let batch: Vec<&Sample> = batch_idx.iter().map(|&i| &inputs.train[i]).collect();
        let x = stack_targets(&batch);
        let anns: Vec<Vec<Annotation>> = batch_idx.iter().map(|&i| provider.get(i)).collect();

        let g = Graph::new();
        let bind = params.bind(&g);
        let xv = g.leaf(x.clone());
        let fwd = calibrate_forward(&g, &bind, "c.", &inputs.cal_cfg, xv, Some(&mut cal.usage))?;

        // loss assembly
        let (total, l_s, head, dss_image, lambda) = if let Some(jt) = &jt_tensors {
            let refs: Vec<&ArrayD<f64>> = batch_idx.iter().map(|&i| &jt[i]).collect();
            let jt_batch = stack_jt(&refs);
            let out = dss::dss_loss(
                &g,
                &bind,
                &det_cfg,
                &cfg.ssim,
                fwd.j,
                &jt_batch,
                &anns,
                iter as u64,
                cfg.decay,
            )?;
            (out.total, out.l_s, out.head, Some(out.image_term), out.lambda)
        } else {
            let head = forward(&g, &bind, fwd.j);
            let l_s = source_loss(&g, &head, &anns, &det_cfg)?;
            (l_s.total, l_s, head, None, 1.0)
        };
        let vq_term = g.scale(
            g.add(fwd.codebook_loss, g.scale(fwd.commit, inputs.cal_cfg.beta)),
            cfg.vq_weight,
        );
        let total = g.add(total, vq_term);
        let total_v = g.scalar_value(total);
        if !total_v.is_finite() {
            return Err(Error::numeric(format!("target training diverged at iteration {iter}")));
        }
        let mut grads = g.backward(total);

        // skipped inverted attention: mask from the tap-layer gradient of the main
        // backward pass, then an extra masked detection loss
        let mut l_sia_v = 0.0;
        let mut mask_for_dump: Option<ArrayD<f64>> = None;
        if cfg.flags.sia && iter % cfg.sia_cadence == 0 {
            let tap_grad = grads
                .get(head.tap)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(IxDyn(&g.shape(head.tap))));
            let mask = sia_mask(&tap_grad, cfg.sia_p, canvas, canvas)?;
            let l_sia = sia_loss(&g, &bind, &det_cfg, fwd.j, &mask, &anns)?;
            l_sia_v = g.scalar_value(l_sia.total);
            if !l_sia_v.is_finite() {
                return Err(Error::numeric(format!(
                    "attention loss diverged at iteration {iter}"
                )));
            }
            let mut sia_grads = g.backward(l_sia.total);
            for var in bind.values() {
                if let Some(contrib) = sia_grads.take(*var) {
                    grads.add_grad(*var, contrib);
                }
            }
            // the logged input-space gradient includes the attention branch
            if let Some(contrib) = sia_grads.take(fwd.j) {
                grads.add_grad(fwd.j, contrib);
            }
            mask_for_dump = Some(mask);
        }

        let dj = grads.get(fwd.j).expect("output-image gradient");
        let mean_abs_dj = dj.iter().map(|v| v.abs()).sum::<f64>() / dj.len() as f64;

        let trainable = trainable_set(iter, &stage);
        let freeze_codebook = cfg.freeze_codebook;
        if iter % cfg.log_every == 0 || iter + 1 == cfg.iters {
            log.push(TargetRecord {
                iter,
                total: total_v + l_sia_v,
                l_s: g.scalar_value(l_s.total),
                l_bbox: g.scalar_value(l_s.l_bbox),
                l_cls: g.scalar_value(l_s.l_cls),
                dss_image: dss_image.map_or(0.0, |v| g.scalar_value(v)),
                l_sia: l_sia_v,
                commit: g.scalar_value(fwd.commit),
                codebook: g.scalar_value(fwd.codebook_loss),
                lambda,
                mean_abs_dj,
                stage2: trainable == crate::fsr::TrainableSet::CalibratorAndSource,
                source_checksum: params.checksum_prefix("s."),
            });
        }
        if cfg.dump_samples > 0 && (iter == 0 || iter + 1 == cfg.iters) {
            let k = cfg.dump_samples.min(batch.len());
            let jv = g.value(fwd.j);
            let eval_cfg =
                DetectorConfig { score_thresh: EVAL_SCORE_THRESH, ..det_cfg.clone() };
            let dets_all = infer_batch(&eval_cfg, &params, &jv)?;
            for bi in 0..k {
                let pick = |t: &ArrayD<f64>, bi: usize| -> ArrayD<f64> {
                    t.index_axis(ndarray::Axis(0), bi).to_owned()
                };
                dumps.push(SampleDump {
                    iter,
                    index_in_batch: bi,
                    x: pick(&x, bi),
                    j: pick(&jv, bi),
                    grad_j: pick(dj, bi),
                    mask: mask_for_dump.as_ref().map(|m| pick(m, bi)),
                    j_t: jt_tensors
                        .as_ref()
                        .map(|jt| jt[batch_idx[bi]].clone()),
                    detections: dets_all[bi].clone(),
                    annotations: anns[bi].clone(),
                });
            }
        }
        opt.step(&mut params, &bind, &mut grads, |name| {
            trainable.allows(name) && !(freeze_codebook && name == "c.codebook")
        });
    }

    let model = TargetModel {
        det_cfg,
        cal_cfg: inputs.cal_cfg.clone(),
        params,
        usage: cal.usage.clone(),
    };
    Ok(TargetOutcome {
        model,
        log,
        annotation_stats: provider.stats(),
        dumps,
        transfer_manifest,
    })
}
