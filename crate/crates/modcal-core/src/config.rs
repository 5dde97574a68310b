//! Flat `key = value` run configuration with dotted namespaces.
//!
//! Every key is declared in [`SCHEMA`] with a default and a one-line doc; parsing
//! rejects unknown keys, and [`RunConfig::snapshot`] writes the complete documented
//! key set, so a run directory's `config.cfg` is self-describing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};

#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Str,
}

pub struct KeySpec {
    pub key: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub doc: &'static str,
}

macro_rules! keys {
    ($( $key:literal, $kind:ident, $default:literal, $doc:literal; )*) => {
        pub const SCHEMA: &[KeySpec] = &[
            $( KeySpec { key: $key, kind: Kind::$kind, default: $default, doc: $doc }, )*
        ];
    };
}

keys! {
    "run.seed", Int, "0", "master seed; every stage derives its own stream from it";

    "data.canvas", Int, "64", "square canvas size in px (must be divisible by 16)";
    "data.classes", Int, "3", "number of object classes K";
    "data.max_objects", Int, "3", "maximum objects per scene";
    "data.min_size", Int, "12", "minimum object box side in px";
    "data.max_size", Int, "24", "maximum object box side in px";
    "data.margin", Int, "2", "minimum gap between boxes and to the canvas edge, px";
    "data.background_kinds", Int, "4", "number of procedural background texture families";
    "data.train_scenes", Int, "512", "scenes in the train split";
    "data.test_scenes", Int, "128", "scenes in the held-out split";

    "sensor.mode", Str, "spatial-degraded", "target sensor: spatial-degraded | scrambled-projection";
    "sensor.proj_seed", Int, "11", "fixed seed of the sensor (blur kernel / projection matrix)";
    "sensor.downsample", Int, "2", "spatial-degraded: integer downsample factor";
    "sensor.blur_sigma", Float, "1.0", "spatial-degraded: Gaussian blur sigma (0 disables)";
    "sensor.channel_mix", Bool, "true", "spatial-degraded: apply the fixed seeded 3x3 channel mixing";
    "sensor.noise_std", Float, "0.0", "additive noise std, seeded from image content (0 disables)";
    "sensor.scramble_downsample", Int, "4", "scrambled-projection: downsample before flattening";
    "sensor.scramble_grid", Int, "8", "scrambled-projection: output grid side";
    "sensor.scramble_channels", Int, "8", "scrambled-projection: output channels";

    "detector.width", Int, "16", "backbone base width (stages are 1x/2x/3x/4x this)";
    "detector.head_width", Int, "48", "detection head width";
    "detector.lambda_bbox", Float, "1.0", "box regression loss weight";
    "detector.lambda_cls", Float, "1.0", "classification loss weight";
    "detector.lambda_mask", Float, "0.0", "mask loss weight; no mask head, kept at 0";
    "detector.focal_alpha", Float, "0.5", "focal loss alpha";
    "detector.focal_gamma", Float, "2.0", "focal loss gamma";
    "detector.nms_iou", Float, "0.5", "NMS IoU threshold";
    "detector.score_thresh", Float, "0.3", "detection score threshold";
    "detector.lr", Float, "0.0015", "source training learning rate (Adam)";
    "detector.iters", Int, "2500", "source training iterations";
    "detector.batch", Int, "16", "source training batch size";
    "detector.log_every", Int, "25", "source training log interval";

    "calibrator.codebook_size", Int, "64", "number of codebook entries p";
    "calibrator.latent_channels", Int, "16", "latent channel dim (codebook entry dim)";
    "calibrator.beta", Float, "0.25", "commitment loss weight";
    "calibrator.width", Int, "12", "adapter/encoder base width";
    "calibrator.dec_width", Int, "16", "decoder base width";

    "inversion.steps", Int, "400", "gradient-descent steps per inverted image";
    "inversion.step_size", Float, "0.1", "fixed descent step size";
    "inversion.init_sigma", Float, "0.1", "stddev of the seeded Gaussian init";
    "inversion.count", Int, "64", "corpus size for reconstructor pretraining";
    "inversion.loss_ceiling", Float, "1.5", "per-item final-loss ceiling for corpus builds";

    "layout.count_min", Int, "1", "random layouts: minimum object count";
    "layout.count_max", Int, "3", "random layouts: maximum object count";
    "layout.min_size", Int, "12", "random layouts: minimum box side, px";
    "layout.max_size", Int, "24", "random layouts: maximum box side, px";

    "jt.steps", Int, "150", "inversion steps for per-sample semantic targets";

    "fsr.steps", Int, "2000", "reconstructor pretraining iterations";
    "fsr.batch", Int, "8", "reconstructor batch size";
    "fsr.lr", Float, "0.001", "reconstructor learning rate (Adam)";
    "fsr.holdout", Int, "8", "corpus items held out of reconstructor training";
    "fsr.stage1_frac", Float, "0.3", "fraction of target iterations with the source module frozen";
    "fsr.freeze_codebook", Bool, "false", "keep the transferred codebook fixed during target training";

    "target.mode", Str, "mac-supervised", "naive | mac-supervised | mac-self | mac-semi";
    "target.semi_fraction", Float, "0.1", "mac-semi: fraction of samples with manual annotations";
    "target.iters", Int, "300", "target training iterations";
    "target.batch", Int, "16", "target training batch size";
    "target.lr", Float, "0.001", "target training learning rate (Adam)";
    "target.source_init", Bool, "true", "initialize the enclosed source module from the source checkpoint";
    "target.fsr", Bool, "true", "initialize calibrator codebook/decoder from the reconstructor";
    "target.two_stage", Bool, "true", "stage 1 freezes the source module";
    "target.dss", Bool, "true", "decayed semantic supervision toward cached inverted targets";
    "target.sia", Bool, "true", "skipped inverted attention auxiliary loss";
    "target.dss_decay", Float, "0.9999", "per-iteration decay factor of the semantic supervision weight";
    "target.sia_p", Float, "0.1", "fraction of image cells masked by inverted attention";
    "target.sia_cadence", Int, "1", "apply the attention loss every this many iterations";
    "target.pseudo_threshold", Float, "0.5", "confidence threshold for pseudo ground truth";
    "target.vq_weight", Float, "1.0", "weight of the quantizer (codebook + commitment) terms";
    "target.log_every", Int, "10", "target training log interval";
    "target.dump_samples", Int, "2", "samples whose tensors are logged for figure rendering";

    "ssim.window", Int, "11", "SSIM window side (shrinks to fit small images)";
    "ssim.sigma", Float, "1.5", "SSIM Gaussian window sigma";
    "ssim.dynamic_range", Float, "1.0", "SSIM dynamic range L";
}

/// Flat validated configuration.
#[derive(Clone)]
pub struct RunConfig {
    values: IndexMap<&'static str, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut values = IndexMap::new();
        for spec in SCHEMA {
            values.insert(spec.key, spec.default.to_owned());
        }
        RunConfig { values }
    }
}

fn spec_for(key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|s| s.key == key)
}

impl RunConfig {
    /// Set one key, validating name and value syntax.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let spec = spec_for(key)
            .ok_or_else(|| Error::config(format!("unknown configuration key `{key}`")))?;
        let value = value.trim();
        match spec.kind {
            Kind::Int => {
                value.parse::<i64>().map_err(|_| {
                    Error::config(format!("key `{key}` expects an integer, got `{value}`"))
                })?;
            }
            Kind::Float => {
                value.parse::<f64>().map_err(|_| {
                    Error::config(format!("key `{key}` expects a number, got `{value}`"))
                })?;
            }
            Kind::Bool => {
                value.parse::<bool>().map_err(|_| {
                    Error::config(format!("key `{key}` expects true/false, got `{value}`"))
                })?;
            }
            Kind::Str => {}
        }
        self.values.insert(spec.key, value.to_owned());
        Ok(())
    }

    /// Parse `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`, got `{raw}`", lineno + 1))
            })?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn u(&self, key: &str) -> usize {
        self.raw(key).parse::<i64>().expect("validated int") as usize
    }

    pub fn i(&self, key: &str) -> i64 {
        self.raw(key).parse().expect("validated int")
    }

    pub fn f(&self, key: &str) -> f64 {
        self.raw(key).parse().expect("validated float")
    }

    pub fn b(&self, key: &str) -> bool {
        self.raw(key).parse().expect("validated bool")
    }

    pub fn s(&self, key: &str) -> &str {
        self.raw(key)
    }

    fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("key `{key}` missing from schema"))
    }

    /// All keys with their current values, for checkpoint embedding.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        self.values.iter().map(|(k, v)| ((*k).to_owned(), v.clone())).collect()
    }

    /// Restore from a checkpoint-embedded map (unknown keys rejected).
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Complete documented dump, suitable for re-parsing.
    pub fn snapshot(&self) -> String {
        let mut out = String::new();
        let mut last_ns = "";
        for spec in SCHEMA {
            let ns = spec.key.split('.').next().unwrap_or("");
            if ns != last_ns {
                if !last_ns.is_empty() {
                    out.push('\n');
                }
                last_ns = ns;
            }
            let _ = writeln!(out, "# {}", spec.doc);
            let _ = writeln!(out, "{} = {}", spec.key, self.values[spec.key]);
        }
        out
    }

    pub fn write_snapshot(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.snapshot())?;
        Ok(())
    }

    /// Cross-key validation used by commands before running a stage.
    pub fn validate(&self) -> Result<()> {
        let canvas = self.u("data.canvas");
        if canvas == 0 || canvas % 16 != 0 {
            return Err(Error::config(format!(
                "data.canvas must be a positive multiple of 16, got {canvas}"
            )));
        }
        if self.u("data.classes") == 0 {
            return Err(Error::config("data.classes must be at least 1"));
        }
        if self.u("data.max_objects") == 0 {
            return Err(Error::config("data.max_objects must be at least 1"));
        }
        if self.u("data.min_size") > self.u("data.max_size") {
            return Err(Error::config("data.min_size exceeds data.max_size"));
        }
        if self.u("data.max_size") + 2 * self.u("data.margin") > canvas {
            return Err(Error::config("data.max_size does not fit in the canvas"));
        }
        match self.s("sensor.mode") {
            "spatial-degraded" | "scrambled-projection" => {}
            other => {
                return Err(Error::config(format!("unknown sensor.mode `{other}`")));
            }
        }
        match self.s("target.mode") {
            "naive" | "mac-supervised" | "mac-self" | "mac-semi" => {}
            other => return Err(Error::config(format!("unknown target.mode `{other}`"))),
        }
        let semi = self.f("target.semi_fraction");
        if self.s("target.mode") == "mac-semi" && !(semi > 0.0 && semi < 1.0) {
            return Err(Error::config("target.semi_fraction must lie in (0, 1)"));
        }
        let p = self.f("target.sia_p");
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::config("target.sia_p must lie in [0, 1]"));
        }
        let d = self.f("target.dss_decay");
        if !(d > 0.0 && d <= 1.0) {
            return Err(Error::config("target.dss_decay must lie in (0, 1]"));
        }
        if self.u("calibrator.codebook_size") < 2 {
            return Err(Error::config("calibrator.codebook_size must be at least 2"));
        }
        let frac = self.f("fsr.stage1_frac");
        if !(0.0..=1.0).contains(&frac) {
            return Err(Error::config("fsr.stage1_frac must lie in [0, 1]"));
        }
        if self.u("layout.count_min") == 0 || self.u("layout.count_min") > self.u("layout.count_max")
        {
            return Err(Error::config("layout count bounds are infeasible"));
        }
        if self.u("layout.min_size") > self.u("layout.max_size")
            || self.u("layout.max_size") > canvas
        {
            return Err(Error::config("layout size bounds are infeasible"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_snapshot_reparses() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let snap = cfg.snapshot();
        let mut again = RunConfig::default();
        again.apply_text(&snap).unwrap();
        assert_eq!(cfg.to_map(), again.to_map());
    }

    #[test]
    fn unknown_key_is_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.set("detector.lrr", "1.0").unwrap_err();
        assert!(err.to_string().contains("unknown configuration key"));
        assert!(cfg.apply_text("no_such.key = 3").is_err());
    }

    #[test]
    fn type_mismatch_is_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("detector.iters", "many").is_err());
        assert!(cfg.set("target.dss", "2").is_err());
        cfg.set("detector.iters", "10").unwrap();
        assert_eq!(cfg.u("detector.iters"), 10);
    }

    #[test]
    fn degenerate_generation_config_is_an_error() {
        let mut cfg = RunConfig::default();
        cfg.set("data.classes", "0").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("data.canvas", "0").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn every_schema_key_has_a_doc() {
        for spec in SCHEMA {
            assert!(!spec.doc.is_empty(), "{} lacks a doc", spec.key);
        }
    }
}
