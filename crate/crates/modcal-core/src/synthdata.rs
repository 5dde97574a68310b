//! Deterministic synthetic paired-modality detection benchmark.
//!
//! Scenes are colored shapes (disc / rectangle / triangle, one class each) on a
//! procedural background; annotations are the analytic axis-aligned extents of the
//! shapes. The paired target-modality tensor is a pure function of the rendered source
//! image and a fixed sensor configuration, so the whole dataset is a pure function of
//! (master seed, generation config, sensor config).
//!
//! All tensor values are canonicalized to f32-representable numbers at module
//! boundaries; dataset files store f32 and round-trip bit-exactly.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{read_tensor_file, write_tensor_file, Dtype};
use crate::rng::{derive_seed, rng_from};

/// Round to the nearest f32; applied at every generation boundary so storage as f32
/// is lossless and re-derivation checks can compare bit-exactly.
pub fn canon(x: f64) -> f64 {
    x as f32 as f64
}

fn canon_arr(mut a: ArrayD<f64>) -> ArrayD<f64> {
    a.mapv_inplace(canon);
    a
}

// ---------------------------------------------------------------------------
// domain types
// ---------------------------------------------------------------------------

/// Detection target: one class id and one axis-aligned box in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    /// `[x_min, y_min, x_max, y_max]`, x right, y down.
    pub bbox: [f64; 4],
}

impl Annotation {
    pub fn width(&self) -> f64 {
        self.bbox[2] - self.bbox[0]
    }
    pub fn height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }
    pub fn center(&self) -> (f64, f64) {
        ((self.bbox[0] + self.bbox[2]) / 2.0, (self.bbox[1] + self.bbox[3]) / 2.0)
    }
    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }
}

/// Intersection-over-union of two `[x0, y0, x1, y1]` boxes.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let ua = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let ub = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = ua + ub - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One placed shape instance.
///
/// `bbox` is the tight box around the pixels the shape covers (pixel `(x, y)` spans
/// `[x, x+1) x [y, y+1)`), which is what a detector can actually recover from the
/// rendering; the continuous placement lives in `center`/`size`/`rotation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub class_id: usize,
    /// Pixel-extent box `[x_min, y_min, x_max, y_max]` in px.
    pub bbox: [f64; 4],
    pub center: [f64; 2],
    pub rotation: f64,
    /// Nominal shape size (diameter / side length) before rotation.
    pub size: [f64; 2],
    pub color: [f64; 3],
}

impl ObjectInstance {
    pub fn annotation(&self) -> Annotation {
        Annotation { class_id: self.class_id, bbox: self.bbox }
    }
}

/// Everything needed to re-render a scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub canvas: (usize, usize),
    pub background_id: usize,
    pub objects: Vec<ObjectInstance>,
}

/// Generation bounds for scenes.
#[derive(Clone, Debug)]
pub struct GenConfig {
    pub canvas: usize,
    pub classes: usize,
    pub max_objects: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub margin: usize,
    pub background_kinds: usize,
}

impl GenConfig {
    pub fn from_run(cfg: &RunConfig) -> Self {
        GenConfig {
            canvas: cfg.u("data.canvas"),
            classes: cfg.u("data.classes"),
            max_objects: cfg.u("data.max_objects"),
            min_size: cfg.u("data.min_size"),
            max_size: cfg.u("data.max_size"),
            margin: cfg.u("data.margin"),
            background_kinds: cfg.u("data.background_kinds"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas == 0 {
            return Err(Error::config("zero canvas"));
        }
        if self.classes == 0 {
            return Err(Error::config("zero classes"));
        }
        if self.classes > 3 {
            return Err(Error::config("at most 3 shape classes are defined"));
        }
        if self.max_objects == 0 {
            return Err(Error::config("max_objects must be at least 1"));
        }
        if self.min_size < 4 || self.min_size > self.max_size {
            return Err(Error::config("object size bounds are infeasible"));
        }
        if self.max_size + 2 * self.margin >= self.canvas {
            return Err(Error::config("objects cannot fit in the canvas"));
        }
        Ok(())
    }
}

/// Target sensor family.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SensorMode {
    SpatialDegraded,
    ScrambledProjection,
}

/// Fixed synthetic sensor turning a source image into the target-modality tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorConfig {
    pub mode: SensorMode,
    pub canvas: usize,
    pub proj_seed: u64,
    pub downsample: usize,
    pub blur_sigma: f64,
    pub channel_mix: bool,
    pub noise_std: f64,
    pub scramble_downsample: usize,
    pub scramble_grid: usize,
    pub scramble_channels: usize,
}

impl SensorConfig {
    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        let mode = match cfg.s("sensor.mode") {
            "spatial-degraded" => SensorMode::SpatialDegraded,
            "scrambled-projection" => SensorMode::ScrambledProjection,
            other => return Err(Error::config(format!("unknown sensor.mode `{other}`"))),
        };
        Ok(SensorConfig {
            mode,
            canvas: cfg.u("data.canvas"),
            proj_seed: cfg.u("sensor.proj_seed") as u64,
            downsample: cfg.u("sensor.downsample").max(1),
            blur_sigma: cfg.f("sensor.blur_sigma"),
            channel_mix: cfg.b("sensor.channel_mix"),
            noise_std: cfg.f("sensor.noise_std"),
            scramble_downsample: cfg.u("sensor.scramble_downsample").max(1),
            scramble_grid: cfg.u("sensor.scramble_grid"),
            scramble_channels: cfg.u("sensor.scramble_channels"),
        })
    }

    /// `(channels, height, width)` of the target tensor.
    pub fn output_shape(&self) -> (usize, usize, usize) {
        match self.mode {
            SensorMode::SpatialDegraded => {
                let s = self.canvas / self.downsample;
                (3, s, s)
            }
            SensorMode::ScrambledProjection => {
                (self.scramble_channels, self.scramble_grid, self.scramble_grid)
            }
        }
    }
}

// ---------------------------------------------------------------------------
// scene generation and rendering
// ---------------------------------------------------------------------------

fn rotated_corners(cx: f64, cy: f64, w: f64, h: f64, rot: f64) -> [(f64, f64); 4] {
    let (s, c) = rot.sin_cos();
    let pts = [(-w / 2.0, -h / 2.0), (w / 2.0, -h / 2.0), (w / 2.0, h / 2.0), (-w / 2.0, h / 2.0)];
    pts.map(|(x, y)| (cx + x * c - y * s, cy + x * s + y * c))
}

fn triangle_points(cx: f64, cy: f64, size: f64, rot: f64) -> [(f64, f64); 3] {
    // equilateral triangle of circumradius size/2
    let r = size / 2.0;
    [0.0, 1.0, 2.0].map(|k| {
        let a = rot + k * std::f64::consts::TAU / 3.0;
        (cx + r * a.cos(), cy + r * a.sin())
    })
}

fn aabb_of(points: &[(f64, f64)]) -> [f64; 4] {
    let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for &(x, y) in points {
        b[0] = b[0].min(x);
        b[1] = b[1].min(y);
        b[2] = b[2].max(x);
        b[3] = b[3].max(y);
    }
    b
}

fn point_in_polygon(px: f64, py: f64, poly: &[(f64, f64)]) -> bool {
    // winding-free even-odd test; polygons here are convex and non-degenerate
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (x1, y1) = poly[i];
        let (x2, y2) = poly[(i + 1) % n];
        if (y1 > py) != (y2 > py) {
            let xint = x1 + (py - y1) / (y2 - y1) * (x2 - x1);
            if px < xint {
                inside = !inside;
            }
        }
    }
    inside
}

fn shape_covers(
    class_id: usize,
    cx: f64,
    cy: f64,
    size: [f64; 2],
    rotation: f64,
    px: f64,
    py: f64,
) -> bool {
    match class_id {
        0 => {
            let r = size[0] / 2.0;
            let (dx, dy) = (px - cx, py - cy);
            dx * dx + dy * dy <= r * r
        }
        1 => {
            let corners = rotated_corners(cx, cy, size[0], size[1], rotation);
            point_in_polygon(px, py, &corners)
        }
        _ => {
            let pts = triangle_points(cx, cy, size[0], rotation);
            point_in_polygon(px, py, &pts)
        }
    }
}

fn object_covers(obj: &ObjectInstance, px: f64, py: f64) -> bool {
    shape_covers(obj.class_id, obj.center[0], obj.center[1], obj.size, obj.rotation, px, py)
}

/// Tight box over the pixel centers the shape covers, scanning inside `analytic`.
fn pixel_extent(
    class_id: usize,
    cx: f64,
    cy: f64,
    size: [f64; 2],
    rotation: f64,
    analytic: &[f64; 4],
    canvas: usize,
) -> Option<[f64; 4]> {
    let x0 = analytic[0].floor().max(0.0) as usize;
    let y0 = analytic[1].floor().max(0.0) as usize;
    let x1 = (analytic[2].ceil() as usize).min(canvas);
    let y1 = (analytic[3].ceil() as usize).min(canvas);
    let mut ext: Option<[f64; 4]> = None;
    for y in y0..y1 {
        for x in x0..x1 {
            if shape_covers(class_id, cx, cy, size, rotation, x as f64 + 0.5, y as f64 + 0.5) {
                let b = ext.get_or_insert([f64::INFINITY, f64::INFINITY, 0.0, 0.0]);
                b[0] = b[0].min(x as f64);
                b[1] = b[1].min(y as f64);
                b[2] = b[2].max(x as f64 + 1.0);
                b[3] = b[3].max(y as f64 + 1.0);
            }
        }
    }
    ext
}

fn background_pixel(kind: usize, x: usize, y: usize, canvas: usize, rng_val: f64) -> [f64; 3] {
    let t = rng_val * 0.04; // faint per-pixel grain
    let fx = x as f64 / canvas as f64;
    let fy = y as f64 / canvas as f64;
    let base = match kind % 4 {
        0 => [0.45, 0.45, 0.45],
        1 => [0.35 + 0.25 * fx, 0.40, 0.55 - 0.20 * fx],
        2 => [0.50 - 0.20 * fy, 0.35 + 0.25 * fy, 0.40],
        _ => {
            let check = ((x / 8) + (y / 8)) % 2;
            if check == 0 {
                [0.38, 0.42, 0.38]
            } else {
                [0.50, 0.46, 0.50]
            }
        }
    };
    [base[0] + t, base[1] + t, base[2] + t]
}

/// Render a scene spec to a `[3, H, W]` image with values in [0, 1].
pub fn render_scene(spec: &SceneSpec) -> ArrayD<f64> {
    let (h, w) = spec.canvas;
    let mut img = ArrayD::zeros(IxDyn(&[3, h, w]));
    // per-pixel grain stream fixed by the scene seed
    let mut grain = rng_from(derive_seed(spec.seed, "grain", 0));
    for y in 0..h {
        for x in 0..w {
            let g: f64 = grain.gen_range(-1.0..1.0);
            let mut px = background_pixel(spec.background_id, x, y, w, g);
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            for obj in &spec.objects {
                if fx >= obj.bbox[0] && fx <= obj.bbox[2] && fy >= obj.bbox[1] && fy <= obj.bbox[3]
                    && object_covers(obj, fx, fy)
                {
                    px = obj.color;
                }
            }
            for c in 0..3 {
                img[IxDyn(&[c, y, x])] = canon(px[c].clamp(0.0, 1.0));
            }
        }
    }
    img
}

/// Class-tinted color: the saturated channel is the class id, the rest is random, so
/// category is recoverable at low resolution while per-object appearance still varies.
fn sample_color(rng: &mut ChaCha8Rng, class_id: usize, taken: &[[f64; 3]]) -> [f64; 3] {
    loop {
        let hi = class_id % 3;
        let mut c = [0.0; 3];
        for (i, slot) in c.iter_mut().enumerate() {
            *slot = if i == hi { rng.gen_range(0.75..1.0) } else { rng.gen_range(0.0..0.3) };
            *slot = canon(*slot);
        }
        let distinct = taken
            .iter()
            .all(|t| t.iter().zip(c.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) > 0.1);
        if distinct {
            return c;
        }
    }
}

/// Generate one scene: spec, rendered source image `[3, H, W]`, and annotations.
///
/// Bit-identical output for identical `(seed, cfg)`. Boxes are disjoint (separated by
/// `margin`) and lie fully inside the canvas.
pub fn generate_scene(
    seed: u64,
    cfg: &GenConfig,
) -> Result<(SceneSpec, ArrayD<f64>, Vec<Annotation>)> {
    cfg.validate()?;
    let mut rng = rng_from(derive_seed(seed, "scene", 0));
    let background_id = rng.gen_range(0..cfg.background_kinds.max(1));
    let n_objects = rng.gen_range(1..=cfg.max_objects);
    let mut objects: Vec<ObjectInstance> = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let canvas = cfg.canvas as f64;
    let margin = cfg.margin as f64;
    for _ in 0..n_objects {
        // rejection sampling; the first object always fits
        for _try in 0..64 {
            let class_id = rng.gen_range(0..cfg.classes);
            let s0 = rng.gen_range(cfg.min_size as f64..=cfg.max_size as f64);
            let s1 = if class_id == 1 {
                // aspect capped at 2:1 so thin bars stay resolvable
                let lo = (s0 * 0.5).max(cfg.min_size as f64);
                let hi = (s0 * 2.0).min(cfg.max_size as f64);
                rng.gen_range(lo..=hi)
            } else {
                s0
            };
            let rotation = match class_id {
                0 => 0.0,
                1 => rng.gen_range(0.0..std::f64::consts::FRAC_PI_2),
                _ => rng.gen_range(0.0..std::f64::consts::TAU),
            };
            // analytic extent for a unit placement, then position it
            let half_extent = match class_id {
                0 => [s0 / 2.0, s0 / 2.0],
                1 => {
                    let b = aabb_of(&rotated_corners(0.0, 0.0, s0, s1, rotation));
                    [b[2], b[3]]
                }
                _ => {
                    let b = aabb_of(&triangle_points(0.0, 0.0, s0, rotation));
                    [b[2].max(-b[0]), b[3].max(-b[1])]
                }
            };
            let (ex, ey) = (half_extent[0], half_extent[1]);
            if 2.0 * ex + 2.0 * margin >= canvas || 2.0 * ey + 2.0 * margin >= canvas {
                continue;
            }
            let cx = canon(rng.gen_range(margin + ex..canvas - margin - ex));
            let cy = canon(rng.gen_range(margin + ey..canvas - margin - ey));
            let size = [canon(s0), canon(s1)];
            let analytic = [cx - ex - 1.0, cy - ey - 1.0, cx + ex + 1.0, cy + ey + 1.0];
            let Some(bbox) =
                pixel_extent(class_id, cx, cy, size, rotation, &analytic, cfg.canvas)
            else {
                continue;
            };
            if bbox[2] - bbox[0] < 4.0 || bbox[3] - bbox[1] < 4.0 {
                continue;
            }
            let clear = objects.iter().all(|o| {
                let gap = margin;
                bbox[2] + gap <= o.bbox[0]
                    || o.bbox[2] + gap <= bbox[0]
                    || bbox[3] + gap <= o.bbox[1]
                    || o.bbox[3] + gap <= bbox[1]
            });
            if !clear {
                continue;
            }
            let color = sample_color(&mut rng, class_id, &colors);
            colors.push(color);
            objects.push(ObjectInstance {
                class_id,
                bbox,
                center: [cx, cy],
                rotation,
                size,
                color,
            });
            break;
        }
    }
    assert!(!objects.is_empty());
    let spec = SceneSpec { seed, canvas: (cfg.canvas, cfg.canvas), background_id, objects };
    let image = render_scene(&spec);
    let annotations = spec.objects.iter().map(ObjectInstance::annotation).collect();
    Ok((spec, image, annotations))
}

// ---------------------------------------------------------------------------
// target-modality sensor
// ---------------------------------------------------------------------------

/// A sensor with its derived kernels/projection precomputed.
pub struct Sensor {
    cfg: SensorConfig,
    mix: [[f64; 3]; 3],
    blur: Vec<f64>,
    projection: Option<ndarray::Array2<f64>>,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64) * (i as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

impl Sensor {
    pub fn new(cfg: SensorConfig) -> Self {
        let mut rng = rng_from(derive_seed(cfg.proj_seed, "sensor", 0));
        // fixed channel mixing: a strong but invertible blend of the color planes
        let mut mix = [[0.0; 3]; 3];
        for (i, row) in mix.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = if i == j { 0.4 } else { 0.3 } + rng.gen_range(-0.1..0.1);
            }
        }
        let blur = gaussian_kernel(cfg.blur_sigma);
        let projection = match cfg.mode {
            SensorMode::ScrambledProjection => {
                let side = cfg.canvas / cfg.scramble_downsample;
                let in_dim = 3 * side * side;
                let out_dim = cfg.scramble_channels * cfg.scramble_grid * cfg.scramble_grid;
                let scale = 1.0 / (in_dim as f64).sqrt();
                let mut prng = rng_from(derive_seed(cfg.proj_seed, "projection", 0));
                Some(ndarray::Array2::from_shape_fn((out_dim, in_dim), |_| {
                    let z: f64 = prng.sample(StandardNormal);
                    z * scale
                }))
            }
            SensorMode::SpatialDegraded => None,
        };
        Sensor { cfg, mix, blur, projection }
    }

    pub fn config(&self) -> &SensorConfig {
        &self.cfg
    }

    /// Deterministic target tensor for a `[3, H, W]` source image.
    pub fn render(&self, image: &ArrayD<f64>) -> Result<ArrayD<f64>> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != 3 || shape[1] != self.cfg.canvas || shape[2] != self.cfg.canvas
        {
            return Err(Error::input(format!(
                "sensor expects [3, {c}, {c}], got {shape:?}",
                c = self.cfg.canvas
            )));
        }
        let x = match self.cfg.mode {
            SensorMode::SpatialDegraded => self.render_spatial(image),
            SensorMode::ScrambledProjection => self.render_scrambled(image),
        };
        Ok(canon_arr(x))
    }

    fn render_spatial(&self, image: &ArrayD<f64>) -> ArrayD<f64> {
        let mut x = downsample_avg(image, self.cfg.downsample);
        if self.blur.len() > 1 {
            x = blur_separable(&x, &self.blur);
        }
        if self.cfg.channel_mix {
            x = mix_channels(&x, &self.mix);
        }
        if self.cfg.noise_std > 0.0 {
            add_content_noise(&mut x, self.cfg.proj_seed, self.cfg.noise_std);
        }
        x
    }

    fn render_scrambled(&self, image: &ArrayD<f64>) -> ArrayD<f64> {
        let small = downsample_avg(image, self.cfg.scramble_downsample);
        let flat: Vec<f64> = small.iter().copied().collect();
        let p = self.projection.as_ref().expect("projection precomputed");
        let v = ndarray::Array1::from_vec(flat);
        let mut out = p.dot(&v);
        if self.cfg.noise_std > 0.0 {
            let seed = derive_seed(self.cfg.proj_seed, "noise", content_hash(image));
            let mut rng = rng_from(seed);
            for o in out.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *o += z * self.cfg.noise_std;
            }
        }
        let (c, g) = (self.cfg.scramble_channels, self.cfg.scramble_grid);
        ArrayD::from_shape_vec(IxDyn(&[c, g, g]), out.to_vec()).expect("projection shape")
    }
}

fn content_hash(image: &ArrayD<f64>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &v in image.iter() {
        for b in (v as f32).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn add_content_noise(x: &mut ArrayD<f64>, proj_seed: u64, std: f64) {
    let seed = derive_seed(proj_seed, "noise", content_hash(x));
    let mut rng = rng_from(seed);
    for v in x.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v += z * std;
    }
}

fn downsample_avg(image: &ArrayD<f64>, factor: usize) -> ArrayD<f64> {
    if factor <= 1 {
        return image.clone();
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (oh, ow) = (h / factor, w / factor);
    let mut out = ArrayD::zeros(IxDyn(&[c, oh, ow]));
    let norm = 1.0 / (factor * factor) as f64;
    for ci in 0..c {
        for oi in 0..oh {
            for oj in 0..ow {
                let mut acc = 0.0;
                for di in 0..factor {
                    for dj in 0..factor {
                        acc += image[IxDyn(&[ci, oi * factor + di, oj * factor + dj])];
                    }
                }
                out[IxDyn(&[ci, oi, oj])] = acc * norm;
            }
        }
    }
    out
}

fn blur_separable(image: &ArrayD<f64>, kernel: &[f64]) -> ArrayD<f64> {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let r = (kernel.len() / 2) as isize;
    let mut tmp = ArrayD::zeros(IxDyn(&[c, h, w]));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let xx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += kv * image[IxDyn(&[ci, y, xx])];
                }
                tmp[IxDyn(&[ci, y, x])] = acc;
            }
        }
    }
    let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let yy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += kv * tmp[IxDyn(&[ci, yy, x])];
                }
                out[IxDyn(&[ci, y, x])] = acc;
            }
        }
    }
    out
}

fn mix_channels(image: &ArrayD<f64>, mix: &[[f64; 3]; 3]) -> ArrayD<f64> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = ArrayD::zeros(IxDyn(&[3, h, w]));
    for y in 0..h {
        for x in 0..w {
            for (i, row) in mix.iter().enumerate() {
                let mut acc = 0.0;
                for (j, &m) in row.iter().enumerate() {
                    acc += m * image[IxDyn(&[j, y, x])];
                }
                out[IxDyn(&[i, y, x])] = acc;
            }
        }
    }
    out
}

/// Standalone form of the sensor for one-off use.
pub fn render_target_modality(image: &ArrayD<f64>, cfg: &SensorConfig) -> Result<ArrayD<f64>> {
    Sensor::new(cfg.clone()).render(image)
}

// ---------------------------------------------------------------------------
// dataset persistence
// ---------------------------------------------------------------------------

/// One generated sample held in memory.
#[derive(Clone)]
pub struct Sample {
    pub spec: SceneSpec,
    /// Source image `[3, H, W]`.
    pub source: ArrayD<f64>,
    /// Target-modality tensor.
    pub target: ArrayD<f64>,
}

impl Sample {
    pub fn annotations(&self) -> Vec<Annotation> {
        self.spec.objects.iter().map(ObjectInstance::annotation).collect()
    }
}

#[derive(Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: usize,
    pub spec: SceneSpec,
    pub source: String,
    pub target: String,
}

#[derive(Serialize, Deserialize)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

/// Generate `count` samples from a master seed; embarrassingly parallel over seeds.
pub fn generate_samples(
    master_seed: u64,
    tag: &str,
    count: usize,
    gen: &GenConfig,
    sensor: &Sensor,
) -> Result<Vec<Sample>> {
    gen.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(master_seed, tag, i as u64);
            let (spec, source, _) = generate_scene(seed, gen)?;
            let target = sensor.render(&source)?;
            Ok(Sample { spec, source, target })
        })
        .collect()
}

/// Write samples to `dir` (`manifest.jsonl` + `tensors/*.bin`).
pub fn write_dataset(samples: &[Sample], dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir.join("tensors"))?;
    let mut records = Vec::with_capacity(samples.len());
    for (id, s) in samples.iter().enumerate() {
        let source = format!("tensors/{id:06}_src.bin");
        let target = format!("tensors/{id:06}_tgt.bin");
        write_tensor_file(&dir.join(&source), &s.source, Dtype::F32)?;
        write_tensor_file(&dir.join(&target), &s.target, Dtype::F32)?;
        records.push(ManifestRecord { id, spec: s.spec.clone(), source, target });
    }
    let manifest = DatasetManifest { records };
    let mut w = std::io::BufWriter::new(fs::File::create(dir.join("manifest.jsonl"))?);
    for rec in &manifest.records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(manifest)
}

/// A dataset on disk: eager manifest, lazy tensors.
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.jsonl");
        let file = fs::File::open(&manifest_path)
            .map_err(|e| Error::load(format!("{}: {e}", manifest_path.display())))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::load(format!("manifest record {i}: {e}")))?;
            records.push(rec);
        }
        Ok(Dataset { root: dir.to_path_buf(), records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn load_source(&self, index: usize) -> Result<ArrayD<f64>> {
        let rec = &self.records[index];
        read_tensor_file(&self.root.join(&rec.source))
            .map_err(|e| Error::load(format!("record {} source tensor: {e}", rec.id)))
    }

    pub fn load_target(&self, index: usize) -> Result<ArrayD<f64>> {
        let rec = &self.records[index];
        read_tensor_file(&self.root.join(&rec.target))
            .map_err(|e| Error::load(format!("record {} target tensor: {e}", rec.id)))
    }

    pub fn annotations(&self, index: usize) -> Vec<Annotation> {
        self.records[index].spec.objects.iter().map(ObjectInstance::annotation).collect()
    }

    /// Load every sample into memory.
    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len())
            .map(|i| {
                Ok(Sample {
                    spec: self.records[i].spec.clone(),
                    source: self.load_source(i)?,
                    target: self.load_target(i)?,
                })
            })
            .collect()
    }
}

/// Convenience: `read(write(d))`.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    Dataset::open(dir)
}
