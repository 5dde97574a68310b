//! Foreground-semantics reconstruction: pretrain an auxiliary quantized autoencoder on
//! the inversion corpus, then seed the calibrator with its codebook and decoder. The
//! reconstructor reuses the calibrator architecture with a plain image stem, so the
//! transferred tensors line up by construction.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::autograd::{Adam, Graph, ParamSet};
use crate::calibrator::{
    calibrate_forward, init_params, Calibrator, CalibratorConfig, InputSpec,
};
use crate::config::RunConfig;
use crate::detector::epoch_order;
use crate::error::{Error, Result};
use crate::io::{load_checkpoint, save_checkpoint};
use crate::rng::derive_seed;

/// The auxiliary reconstructor `{image-stem encoder, shared codebook, decoder}`.
pub struct Reconstructor {
    pub cfg: CalibratorConfig,
    pub params: ParamSet,
}

/// Reconstructor variant of a calibrator config: same latent space and decoder, but a
/// 3-channel image stem at canvas resolution.
pub fn reconstructor_config(cal_cfg: &CalibratorConfig) -> CalibratorConfig {
    CalibratorConfig {
        input: InputSpec::Spatial { channels: 3, side: cal_cfg.canvas },
        ..cal_cfg.clone()
    }
}

impl Reconstructor {
    pub fn new(cal_cfg: &CalibratorConfig, seed: u64) -> Result<Self> {
        let cfg = reconstructor_config(cal_cfg);
        cfg.validate()?;
        let params = init_params(&cfg, "r.", seed);
        Ok(Reconstructor { cfg, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, "reconstructor", &self.cfg.to_map(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.kind != "reconstructor" {
            return Err(Error::load(format!(
                "{}: expected a reconstructor checkpoint, found `{}`",
                path.display(),
                ckpt.kind
            )));
        }
        let cfg = CalibratorConfig::from_map(&ckpt.config)?;
        Ok(Reconstructor { cfg, params: ckpt.params })
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}

#[derive(Clone, Debug)]
pub struct FsrSchedule {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub holdout: usize,
    pub seed: u64,
    pub log_every: usize,
}

impl FsrSchedule {
    pub fn from_run(cfg: &RunConfig) -> Self {
        FsrSchedule {
            steps: cfg.u("fsr.steps"),
            batch: cfg.u("fsr.batch"),
            lr: cfg.f("fsr.lr"),
            holdout: cfg.u("fsr.holdout"),
            seed: derive_seed(cfg.u("run.seed") as u64, "fsr", 0),
            log_every: 100,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct FsrRecord {
    pub iter: usize,
    pub l_rec: f64,
    pub l_codebook: f64,
    pub l_commit: f64,
}

pub struct FsrReport {
    pub log: Vec<FsrRecord>,
    /// Mean absolute reconstruction error per element on the held-out items.
    pub holdout_l1: f64,
}

fn stack(items: &[&ArrayD<f64>]) -> ArrayD<f64> {
    let (c, h, w) = (items[0].shape()[0], items[0].shape()[1], items[0].shape()[2]);
    let mut out = ArrayD::zeros(IxDyn(&[items.len(), c, h, w]));
    for (i, t) in items.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), i).assign(*t);
    }
    out
}

/// Eval-mode reconstruction of a batch through the reconstructor.
pub fn reconstruct(rec: &Reconstructor, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    let g = Graph::inference();
    let bind = rec.params.bind(&g);
    let xv = g.leaf(x.clone());
    let fwd = calibrate_forward(&g, &bind, "r.", &rec.cfg, xv, None)?;
    Ok((*g.value(fwd.j)).clone())
}

/// Mean absolute error per element between reconstructions and inputs.
pub fn reconstruction_l1(rec: &Reconstructor, items: &[&ArrayD<f64>]) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::input("no items to evaluate"));
    }
    let x = stack(items);
    let y = reconstruct(rec, &x)?;
    Ok(x.iter().zip(y.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

/// Train the reconstructor on inverted foreground images. The last `holdout` items are
/// excluded from training and used for the held-out error.
pub fn train_reconstructor(
    corpus: &[ArrayD<f64>],
    cal_cfg: &CalibratorConfig,
    sched: &FsrSchedule,
) -> Result<(Reconstructor, FsrReport)> {
    if corpus.is_empty() {
        return Err(Error::input("empty inversion corpus"));
    }
    if corpus.len() <= sched.holdout {
        return Err(Error::config("holdout larger than the corpus"));
    }
    let n_train = corpus.len() - sched.holdout;
    let mut rec = Reconstructor::new(cal_cfg, sched.seed)?;
    let mut opt = Adam::new(sched.lr);
    let beta = rec.cfg.beta;
    let mut log = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0usize;
    for iter in 0..sched.steps {
        let mut batch: Vec<&ArrayD<f64>> = Vec::with_capacity(sched.batch);
        while batch.len() < sched.batch {
            if order.is_empty() {
                order = epoch_order(n_train, sched.seed, epoch);
                epoch += 1;
            }
            batch.push(&corpus[order.pop().unwrap()]);
        }
        let x = stack(&batch);
        let g = Graph::new();
        let bind = rec.params.bind(&g);
        let xv = g.leaf(x.clone());
        let fwd = calibrate_forward(&g, &bind, "r.", &rec.cfg, xv, None)?;
        let target = g.leaf(x);
        let l_rec = g.mean_all(g.square(g.sub(fwd.j, target)));
        let total = g.add(g.add(l_rec, fwd.codebook_loss), g.scale(fwd.commit, beta));
        let lv = g.scalar_value(total);
        if !lv.is_finite() {
            return Err(Error::numeric(format!(
                "reconstructor training diverged at iteration {iter}"
            )));
        }
        let mut grads = g.backward(total);
        if iter % sched.log_every == 0 || iter + 1 == sched.steps {
            log.push(FsrRecord {
                iter,
                l_rec: g.scalar_value(l_rec),
                l_codebook: g.scalar_value(fwd.codebook_loss),
                l_commit: g.scalar_value(fwd.commit),
            });
        }
        opt.step(&mut rec.params, &bind, &mut grads, |_| true);
    }
    let holdout_refs: Vec<&ArrayD<f64>> = corpus[n_train..].iter().collect();
    let holdout_l1 = if holdout_refs.is_empty() {
        f64::NAN
    } else {
        reconstruction_l1(&rec, &holdout_refs)?
    };
    Ok((rec, FsrReport { log, holdout_l1 }))
}

/// Copy the reconstructor's codebook and decoder into the calibrator; adapter and
/// encoder stay as initialized. Returns the names of the copied calibrator tensors.
pub fn transfer_to_calibrator(rec: &Reconstructor, cal: &mut Calibrator) -> Result<Vec<String>> {
    let mut copied = Vec::new();
    let mut mismatched = Vec::new();
    let names: Vec<String> = rec.params.names().map(str::to_owned).collect();
    for name in names {
        let rest = name.strip_prefix("r.").expect("reconstructor prefix");
        if !(rest == "codebook" || rest.starts_with("dec")) {
            continue;
        }
        let target = format!("c.{rest}");
        if !cal.params.contains(&target) {
            mismatched.push(format!("{target} (missing)"));
            continue;
        }
        let src = rec.params.get(&name);
        let dst = cal.params.get(&target);
        if src.shape() != dst.shape() {
            mismatched.push(format!(
                "{target} (shape {:?} vs {:?})",
                dst.shape(),
                src.shape()
            ));
            continue;
        }
        cal.params.set(&target, (**src).clone());
        copied.push(target);
    }
    if !mismatched.is_empty() {
        return Err(Error::config(format!(
            "reconstructor/calibrator architecture mismatch: {}",
            mismatched.join(", ")
        )));
    }
    Ok(copied)
}

/// Two-stage update schedule: iterations below `stage1_iters` train the calibrator
/// only, the rest train calibrator and source jointly.
#[derive(Copy, Clone, Debug)]
pub struct StageSchedule {
    pub stage1_iters: usize,
    pub total_iters: usize,
}

impl StageSchedule {
    pub fn new(stage1_frac: f64, total_iters: usize) -> Self {
        let stage1 = (stage1_frac * total_iters as f64).round() as usize;
        StageSchedule { stage1_iters: stage1.min(total_iters), total_iters }
    }
}

/// Parameter groups trainable at an iteration.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TrainableSet {
    CalibratorOnly,
    CalibratorAndSource,
}

pub fn trainable_set(iteration: usize, sched: &StageSchedule) -> TrainableSet {
    if iteration < sched.stage1_iters {
        TrainableSet::CalibratorOnly
    } else {
        TrainableSet::CalibratorAndSource
    }
}

impl TrainableSet {
    pub fn allows(&self, name: &str) -> bool {
        match self {
            TrainableSet::CalibratorOnly => name.starts_with("c."),
            TrainableSet::CalibratorAndSource => name.starts_with("c.") || name.starts_with("s."),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_cfg() -> CalibratorConfig {
        CalibratorConfig {
            canvas: 16,
            latent_channels: 6,
            codebook_size: 8,
            beta: 0.25,
            width: 6,
            dec_width: 8,
            input: InputSpec::Spatial { channels: 3, side: 8 },
        }
    }

    fn toy_corpus(n: usize, canvas: usize) -> Vec<ArrayD<f64>> {
        let mut rng = crate::rng::rng_from(31);
        (0..n)
            .map(|_| {
                let mut t = ArrayD::zeros(IxDyn(&[3, canvas, canvas]));
                // a bright square patch on a near-zero background
                let x0 = rng.gen_range(0..canvas - 6);
                let y0 = rng.gen_range(0..canvas - 6);
                for y in y0..y0 + 5 {
                    for x in x0..x0 + 5 {
                        for c in 0..3 {
                            t[IxDyn(&[c, y, x])] = rng.gen_range(0.5..1.0);
                        }
                    }
                }
                t
            })
            .collect()
    }

    #[test]
    fn stage_schedule_boundaries() {
        let sched = StageSchedule { stage1_iters: 100, total_iters: 300 };
        assert_eq!(trainable_set(0, &sched), TrainableSet::CalibratorOnly);
        assert_eq!(trainable_set(99, &sched), TrainableSet::CalibratorOnly);
        // half-open interval: the boundary iteration already trains both
        assert_eq!(trainable_set(100, &sched), TrainableSet::CalibratorAndSource);
        let degenerate = StageSchedule { stage1_iters: 0, total_iters: 10 };
        assert_eq!(trainable_set(0, &degenerate), TrainableSet::CalibratorAndSource);
        assert!(TrainableSet::CalibratorOnly.allows("c.enc0.w"));
        assert!(!TrainableSet::CalibratorOnly.allows("s.c1.w"));
        assert!(TrainableSet::CalibratorAndSource.allows("s.c1.w"));
    }

    #[test]
    fn stage_schedule_from_fraction_rounds() {
        let s = StageSchedule::new(0.3, 10);
        assert_eq!(s.stage1_iters, 3);
        let s = StageSchedule::new(1.0, 7);
        assert_eq!(s.stage1_iters, 7);
        let s = StageSchedule::new(0.0, 7);
        assert_eq!(s.stage1_iters, 0);
    }

    #[test]
    fn transfer_copies_codebook_and_decoder_only() {
        let cfg = small_cfg();
        let rec = Reconstructor::new(&cfg, 1).unwrap();
        let mut cal = Calibrator::new(cfg.clone(), 2).unwrap();
        let enc_before: Vec<(String, ArrayD<f64>)> = cal
            .params
            .iter()
            .filter(|(n, _)| !(n.starts_with("c.dec") || *n == "c.codebook"))
            .map(|(n, v)| (n.to_owned(), (**v).clone()))
            .collect();
        let copied = transfer_to_calibrator(&rec, &mut cal).unwrap();
        assert!(copied.contains(&"c.codebook".to_owned()));
        assert!(copied.iter().any(|n| n.starts_with("c.dec")));
        // codebook and decoder tensors are bit-equal
        assert_eq!(**cal.params.get("c.codebook"), **rec.params.get("r.codebook"));
        for name in &copied {
            let rest = name.strip_prefix("c.").unwrap();
            assert_eq!(**cal.params.get(name), **rec.params.get(&format!("r.{rest}")));
        }
        // everything else untouched
        for (n, v) in enc_before {
            assert_eq!(**cal.params.get(&n), v, "{n} changed by transfer");
        }
    }

    #[test]
    fn transfer_rejects_mismatched_architectures() {
        let cfg = small_cfg();
        let rec = Reconstructor::new(&cfg, 1).unwrap();
        let other = CalibratorConfig { latent_channels: 4, ..small_cfg() };
        let mut cal = Calibrator::new(other, 2).unwrap();
        let err = transfer_to_calibrator(&rec, &mut cal).unwrap_err();
        assert!(err.to_string().contains("c.codebook"), "{err}");
    }

    #[test]
    fn reconstructor_training_descends_and_is_deterministic() {
        let cfg = small_cfg();
        let corpus = toy_corpus(12, 16);
        let sched =
            FsrSchedule { steps: 40, batch: 4, lr: 2e-3, holdout: 4, seed: 5, log_every: 10 };
        let (rec_a, report_a) = train_reconstructor(&corpus, &cfg, &sched).unwrap();
        let (rec_b, _) = train_reconstructor(&corpus, &cfg, &sched).unwrap();
        assert_eq!(rec_a.checksum(), rec_b.checksum());
        let first = report_a.log.first().unwrap().l_rec;
        let last = report_a.log.last().unwrap().l_rec;
        assert!(last < first, "reconstruction loss should fall: {first} -> {last}");
        assert!(report_a.holdout_l1.is_finite());
    }

    #[test]
    fn reconstructor_rejects_degenerate_inputs() {
        let cfg = small_cfg();
        let sched =
            FsrSchedule { steps: 1, batch: 2, lr: 1e-3, holdout: 4, seed: 1, log_every: 1 };
        assert!(train_reconstructor(&[], &cfg, &sched).is_err());
        let corpus = toy_corpus(3, 16);
        assert!(train_reconstructor(&corpus, &cfg, &sched).is_err());
    }

    #[test]
    fn reconstructor_checkpoint_roundtrip() {
        let cfg = small_cfg();
        let rec = Reconstructor::new(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rec.mcc");
        rec.save(&p).unwrap();
        let loaded = Reconstructor::load(&p).unwrap();
        assert_eq!(rec.checksum(), loaded.checksum());
    }
}
