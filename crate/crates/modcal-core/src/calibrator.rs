//! The calibrator: modality adapter + vector-quantized encoder/decoder producing the
//! image-like tensor fed to the source detector.
//!
//! The latent grid sits at stride 8 of the output canvas; every latent cell is
//! hard-assigned to its nearest codebook entry (squared Euclidean, lowest index on
//! ties) and the backward pass copies gradients from the quantized cells to the
//! continuous encoding unchanged. Codebook/commitment terms follow the usual
//! quantized-autoencoder objective with stop-gradients on the opposite side.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{ArrayD, Ix2, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{he_normal, zeros, Graph, ParamSet, Var};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{load_checkpoint, save_checkpoint};
use crate::rng::{derive_seed, rng_from};
use crate::synthdata::{SensorConfig, SensorMode};

/// How the target tensor enters the calibrator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum InputSpec {
    /// Image-like input: a conv stem that keeps spatial dims.
    Spatial { channels: usize, side: usize },
    /// Non-spatial input: a learned linear map onto a grid.
    Flat { channels: usize, side: usize, adapter_grid: usize },
}

#[derive(Clone, Debug)]
pub struct CalibratorConfig {
    pub canvas: usize,
    pub latent_channels: usize,
    pub codebook_size: usize,
    pub beta: f64,
    pub width: usize,
    pub dec_width: usize,
    pub input: InputSpec,
}

impl CalibratorConfig {
    pub fn from_run(cfg: &RunConfig) -> Result<Self> {
        let sensor = SensorConfig::from_run(cfg)?;
        Self::for_sensor(cfg, &sensor)
    }

    pub fn for_sensor(cfg: &RunConfig, sensor: &SensorConfig) -> Result<Self> {
        let canvas = cfg.u("data.canvas");
        let latent_side = canvas / 8;
        let (c, h, w) = sensor.output_shape();
        let input = match sensor.mode {
            SensorMode::SpatialDegraded => InputSpec::Spatial { channels: c, side: h },
            SensorMode::ScrambledProjection => {
                InputSpec::Flat { channels: c, side: h, adapter_grid: 2 * latent_side }
            }
        };
        if h != w {
            return Err(Error::config("calibrator expects square target tensors"));
        }
        let out = CalibratorConfig {
            canvas,
            latent_channels: cfg.u("calibrator.latent_channels"),
            codebook_size: cfg.u("calibrator.codebook_size"),
            beta: cfg.f("calibrator.beta"),
            width: cfg.u("calibrator.width"),
            dec_width: cfg.u("calibrator.dec_width"),
            input,
        };
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas % 8 != 0 {
            return Err(Error::config("canvas must be divisible by the latent stride 8"));
        }
        if self.codebook_size < 2 {
            return Err(Error::config("codebook needs at least 2 entries"));
        }
        let latent = self.latent_side();
        let stem_side = match self.input {
            InputSpec::Spatial { side, .. } => side,
            InputSpec::Flat { adapter_grid, .. } => adapter_grid,
        };
        if stem_side < latent || stem_side % latent != 0 || !(stem_side / latent).is_power_of_two()
        {
            return Err(Error::config(format!(
                "adapter output side {stem_side} incompatible with latent side {latent}"
            )));
        }
        Ok(())
    }

    pub fn latent_side(&self) -> usize {
        self.canvas / 8
    }

    fn enc_stages(&self) -> usize {
        let stem_side = match self.input {
            InputSpec::Spatial { side, .. } => side,
            InputSpec::Flat { adapter_grid, .. } => adapter_grid,
        };
        (stem_side / self.latent_side()).trailing_zeros() as usize
    }

    fn enc_channels(&self) -> Vec<usize> {
        let mut ch = vec![self.width];
        for _ in 0..self.enc_stages() {
            ch.push((ch.last().unwrap() * 2).min(64));
        }
        ch
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("canvas".into(), self.canvas.to_string());
        m.insert("latent_channels".into(), self.latent_channels.to_string());
        m.insert("codebook_size".into(), self.codebook_size.to_string());
        m.insert("beta".into(), self.beta.to_string());
        m.insert("width".into(), self.width.to_string());
        m.insert("dec_width".into(), self.dec_width.to_string());
        let (kind, c, s, gextra) = match self.input {
            InputSpec::Spatial { channels, side } => ("spatial", channels, side, 0),
            InputSpec::Flat { channels, side, adapter_grid } => {
                ("flat", channels, side, adapter_grid)
            }
        };
        m.insert("input_kind".into(), kind.into());
        m.insert("input_channels".into(), c.to_string());
        m.insert("input_side".into(), s.to_string());
        m.insert("adapter_grid".into(), gextra.to_string());
        m
    }

    pub fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        fn get<T: std::str::FromStr>(m: &BTreeMap<String, String>, k: &str) -> Result<T> {
            m.get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::load(format!("checkpoint config missing `{k}`")))
        }
        let channels = get(m, "input_channels")?;
        let side = get(m, "input_side")?;
        let input = match m.get("input_kind").map(String::as_str) {
            Some("spatial") => InputSpec::Spatial { channels, side },
            Some("flat") => {
                InputSpec::Flat { channels, side, adapter_grid: get(m, "adapter_grid")? }
            }
            _ => return Err(Error::load("checkpoint config missing `input_kind`")),
        };
        Ok(CalibratorConfig {
            canvas: get(m, "canvas")?,
            latent_channels: get(m, "latent_channels")?,
            codebook_size: get(m, "codebook_size")?,
            beta: get(m, "beta")?,
            width: get(m, "width")?,
            dec_width: get(m, "dec_width")?,
            input,
        })
    }
}

/// Learnable quantization centers plus usage counters (logging only; no dead-entry
/// reinit happens).
#[derive(Clone)]
pub struct Codebook {
    pub entries: ArrayD<f64>,
    pub usage: Vec<u64>,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }
}

/// Nearest codebook row per cell by squared Euclidean distance; ties break to the
/// lowest index.
pub fn nearest_indices(cells: &ArrayD<f64>, codebook: &ArrayD<f64>) -> Result<Vec<usize>> {
    let z = cells
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::input("quantize expects [cells, channels]"))?;
    let b = codebook
        .view()
        .into_dimensionality::<Ix2>()
        .map_err(|_| Error::input("codebook must be [entries, channels]"))?;
    if b.shape()[0] == 0 {
        return Err(Error::config("empty codebook"));
    }
    if z.shape()[1] != b.shape()[1] {
        return Err(Error::input(format!(
            "cell dim {} does not match codebook dim {}",
            z.shape()[1],
            b.shape()[1]
        )));
    }
    Ok((0..z.shape()[0])
        .map(|i| {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for r in 0..b.shape()[0] {
                let mut d = 0.0;
                for c in 0..z.shape()[1] {
                    let t = z[[i, c]] - b[[r, c]];
                    d += t * t;
                }
                if d < best_d {
                    best_d = d;
                    best = r;
                }
            }
            best
        })
        .collect())
}

/// Hard assignment: `(index_map, z_q)` where every `z_q` row is bit-equal to the
/// codebook row it indexes.
pub fn quantize(cells: &ArrayD<f64>, codebook: &Codebook) -> Result<(Vec<usize>, ArrayD<f64>)> {
    let idx = nearest_indices(cells, &codebook.entries)?;
    let b = codebook.entries.view().into_dimensionality::<Ix2>().unwrap();
    let mut zq = ndarray::Array2::<f64>::zeros((idx.len(), b.shape()[1]));
    for (i, &r) in idx.iter().enumerate() {
        zq.row_mut(i).assign(&b.row(r));
    }
    Ok((idx, zq.into_dyn()))
}

/// Calibrator parameters (`c.` prefix) plus codebook usage counters.
pub struct Calibrator {
    pub cfg: CalibratorConfig,
    pub params: ParamSet,
    pub usage: Vec<u64>,
}

/// Initialize calibrator-shaped parameters under a prefix (`c.` for the calibrator,
/// `r.` for the auxiliary reconstructor).
pub fn init_params(cfg: &CalibratorConfig, prefix: &str, seed: u64) -> ParamSet {
    fn conv(
        rng: &mut rand_chacha::ChaCha8Rng,
        p: &mut ParamSet,
        prefix: &str,
        name: &str,
        cout: usize,
        cin: usize,
        ks: usize,
    ) {
        p.insert(format!("{prefix}{name}.w"), he_normal(rng, &[cout, cin, ks, ks], cin * ks * ks));
        p.insert(format!("{prefix}{name}.b"), zeros(&[cout]));
    }
    let mut rng = rng_from(derive_seed(seed, "calibrator-init", 0));
    let mut p = ParamSet::new();
    match cfg.input {
        InputSpec::Spatial { channels, .. } => {
            conv(&mut rng, &mut p, prefix, "adapter", cfg.width, channels, 3);
        }
        InputSpec::Flat { channels, side, adapter_grid } => {
            let in_dim = channels * side * side;
            let out_dim = cfg.width * adapter_grid * adapter_grid;
            p.insert(
                format!("{prefix}adapter.lin.w"),
                he_normal(&mut rng, &[in_dim, out_dim], in_dim),
            );
            p.insert(format!("{prefix}adapter.lin.b"), zeros(&[out_dim]));
        }
    }
    let ch = cfg.enc_channels();
    for i in 0..cfg.enc_stages() {
        conv(&mut rng, &mut p, prefix, &format!("enc{i}"), ch[i + 1], ch[i], 3);
    }
    conv(&mut rng, &mut p, prefix, "enc_out", cfg.latent_channels, *ch.last().unwrap(), 1);
    let mut crng = rng_from(derive_seed(seed, "codebook-init", 0));
    p.insert(
        format!("{prefix}codebook"),
        ArrayD::from_shape_fn(IxDyn(&[cfg.codebook_size, cfg.latent_channels]), |_| {
            let z: f64 = crng.sample(StandardNormal);
            z
        }),
    );
    let d = cfg.dec_width;
    conv(&mut rng, &mut p, prefix, "dec_in", 2 * d, cfg.latent_channels, 3);
    conv(&mut rng, &mut p, prefix, "dec0", 2 * d, 2 * d, 3);
    conv(&mut rng, &mut p, prefix, "dec1", d, 2 * d, 3);
    conv(&mut rng, &mut p, prefix, "dec2", (d / 2).max(4), d, 3);
    conv(&mut rng, &mut p, prefix, "dec_out", 3, (d / 2).max(4), 3);
    p
}

impl Calibrator {
    pub fn new(cfg: CalibratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, "c.", seed);
        let usage = vec![0u64; cfg.codebook_size];
        Ok(Calibrator { cfg, params, usage })
    }

    pub fn codebook(&self) -> Codebook {
        Codebook { entries: (**self.params.get("c.codebook")).clone(), usage: self.usage.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(path, "calibrator", &self.cfg.to_map(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        if ckpt.kind != "calibrator" {
            return Err(Error::load(format!(
                "{}: expected a calibrator checkpoint, found `{}`",
                path.display(),
                ckpt.kind
            )));
        }
        let cfg = CalibratorConfig::from_map(&ckpt.config)?;
        let usage = vec![0u64; cfg.codebook_size];
        Ok(Calibrator { cfg, params: ckpt.params, usage })
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }
}

/// Everything the training loop needs from one calibrator pass.
pub struct CalibratorForward {
    /// `[N, 3, canvas, canvas]` image-like output.
    pub j: Var,
    /// `[cells, channels]` continuous encodings.
    pub z_e_cells: Var,
    /// Nearest-entry index per cell.
    pub indices: Vec<usize>,
    /// Commitment term `mean((z_e - sg(z_q))^2)` (unweighted).
    pub commit: Var,
    /// Codebook term `mean((z_q - sg(z_e))^2)`.
    pub codebook_loss: Var,
}

fn conv_block(
    g: &Graph,
    bind: &HashMap<String, Var>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    let w = bind[&format!("{name}.w")];
    let b = bind[&format!("{name}.b")];
    g.conv2d(x, w, Some(b), stride, pad)
}

/// Map the raw target tensor to the adapter's spatial output. `x` is `[N, c, s, s]`.
pub fn adapt_modality(
    g: &Graph,
    bind: &HashMap<String, Var>,
    prefix: &str,
    cfg: &CalibratorConfig,
    x: Var,
) -> Result<Var> {
    let shape = g.shape(x);
    match cfg.input {
        InputSpec::Spatial { channels, side } => {
            if shape.len() != 4 || shape[1..] != [channels, side, side] {
                return Err(Error::input(format!(
                    "adapter expects [N, {channels}, {side}, {side}], got {shape:?}"
                )));
            }
            Ok(g.leaky_relu(conv_block(g, bind, &format!("{prefix}adapter"), x, 1, 1), 0.1))
        }
        InputSpec::Flat { channels, side, adapter_grid } => {
            if shape.len() != 4 || shape[1..] != [channels, side, side] {
                return Err(Error::input(format!(
                    "adapter expects [N, {channels}, {side}, {side}], got {shape:?}"
                )));
            }
            let n = shape[0];
            let flat = g.reshape(x, &[n, channels * side * side]);
            let w = bind[&format!("{prefix}adapter.lin.w")];
            let b = bind[&format!("{prefix}adapter.lin.b")];
            let lin = g.add_row_bias(g.matmul(flat, w), b);
            let spatial = g.reshape(lin, &[n, cfg.width, adapter_grid, adapter_grid]);
            Ok(g.leaky_relu(spatial, 0.1))
        }
    }
}

/// Encoder: adapter output down to the latent grid, then 1x1 to the latent channels.
pub fn encode(
    g: &Graph,
    bind: &HashMap<String, Var>,
    prefix: &str,
    cfg: &CalibratorConfig,
    adapted: Var,
) -> Var {
    let mut h = adapted;
    for i in 0..cfg.enc_stages() {
        h = g.leaky_relu(conv_block(g, bind, &format!("{prefix}enc{i}"), h, 2, 1), 0.1);
    }
    conv_block(g, bind, &format!("{prefix}enc_out"), h, 1, 0)
}

/// Decoder: latent grid up to a `[N, 3, canvas, canvas]` image-like tensor. The output
/// is a raw linear layer: values are unconstrained, like the inverted semantics it is
/// trained to match.
pub fn decode(
    g: &Graph,
    bind: &HashMap<String, Var>,
    prefix: &str,
    _cfg: &CalibratorConfig,
    zq: Var,
) -> Var {
    let a = 0.1;
    let mut h = g.leaky_relu(conv_block(g, bind, &format!("{prefix}dec_in"), zq, 1, 1), a);
    h = g.upsample2(h);
    h = g.leaky_relu(conv_block(g, bind, &format!("{prefix}dec0"), h, 1, 1), a);
    h = g.upsample2(h);
    h = g.leaky_relu(conv_block(g, bind, &format!("{prefix}dec1"), h, 1, 1), a);
    h = g.upsample2(h);
    h = g.leaky_relu(conv_block(g, bind, &format!("{prefix}dec2"), h, 1, 1), a);
    conv_block(g, bind, &format!("{prefix}dec_out"), h, 1, 1)
}

/// Full calibrator pass: adapt, encode, quantize (straight-through), decode.
/// `usage`, when given, accumulates per-entry assignment counts.
pub fn calibrate_forward(
    g: &Graph,
    bind: &HashMap<String, Var>,
    prefix: &str,
    cfg: &CalibratorConfig,
    x: Var,
    mut usage: Option<&mut Vec<u64>>,
) -> Result<CalibratorForward> {
    let n = g.shape(x)[0];
    let adapted = adapt_modality(g, bind, prefix, cfg, x)?;
    let z_e = encode(g, bind, prefix, cfg, adapted);
    let side = cfg.latent_side();
    let z_e_cells = g.nchw_to_cells(z_e);
    let codebook_var = bind[&format!("{prefix}codebook")];
    let (indices, zq_vals) = {
        let cells = g.value(z_e_cells);
        let book = g.value(codebook_var);
        let idx = nearest_indices(&cells, &book)?;
        let b2 = book.view().into_dimensionality::<Ix2>().unwrap();
        let mut zq = ndarray::Array2::<f64>::zeros((idx.len(), b2.shape()[1]));
        for (i, &r) in idx.iter().enumerate() {
            zq.row_mut(i).assign(&b2.row(r));
        }
        (idx, zq.into_dyn())
    };
    if let Some(u) = usage.as_deref_mut() {
        for &i in &indices {
            u[i] += 1;
        }
    }
    // losses with stop-gradients on the opposite sides
    let zq_const = g.leaf(zq_vals.clone());
    let ze_const = g.detach(z_e_cells);
    let gathered = g.gather_rows(codebook_var, &indices);
    let codebook_loss = g.mean_all(g.square(g.sub(gathered, ze_const)));
    let commit = g.mean_all(g.square(g.sub(z_e_cells, zq_const)));
    // decode path: straight-through quantized cells
    let st = g.straight_through(z_e_cells, zq_vals);
    let zq_grid = g.cells_to_nchw(st, n, side, side);
    let j = decode(g, bind, prefix, cfg, zq_grid);
    Ok(CalibratorForward { j, z_e_cells, indices, commit, codebook_loss })
}

/// Eval-mode calibration of a batch of target tensors; returns `J` only.
pub fn calibrate(cal: &Calibrator, x: &ArrayD<f64>) -> Result<ArrayD<f64>> {
    let g = Graph::inference();
    let bind = cal.params.bind(&g);
    let xv = g.leaf(x.clone());
    let fwd = calibrate_forward(&g, &bind, "c.", &cal.cfg, xv, None)?;
    let j = g.value(fwd.j);
    if j.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("non-finite calibrator output"));
    }
    Ok((*j).clone())
}

/// The three quantized-autoencoder loss terms for a reconstruction objective:
/// `(L_rec, L_codebook, L_commit)`; the caller combines them as
/// `L_rec + L_codebook + beta * L_commit`.
pub fn vq_losses(
    g: &Graph,
    z_e_cells: Var,
    indices: &[usize],
    codebook_var: Var,
    reconstruction: Var,
    target: &ArrayD<f64>,
) -> Result<(Var, Var, Var)> {
    if g.shape(reconstruction) != target.shape() {
        return Err(Error::input("reconstruction/target shape mismatch"));
    }
    let t = g.leaf(target.clone());
    let l_rec = g.mean_all(g.square(g.sub(reconstruction, t)));
    let ze_const = g.detach(z_e_cells);
    let gathered = g.gather_rows(codebook_var, indices);
    let l_codebook = g.mean_all(g.square(g.sub(gathered, ze_const)));
    let book = g.value(codebook_var);
    let b2 = book.view().into_dimensionality::<Ix2>().unwrap();
    let mut zq = ndarray::Array2::<f64>::zeros((indices.len(), b2.shape()[1]));
    for (i, &r) in indices.iter().enumerate() {
        zq.row_mut(i).assign(&b2.row(r));
    }
    let zq_const = g.leaf(zq.into_dyn());
    let l_commit = g.mean_all(g.square(g.sub(z_e_cells, zq_const)));
    Ok((l_rec, l_codebook, l_commit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn spatial_cfg() -> CalibratorConfig {
        CalibratorConfig {
            canvas: 32,
            latent_channels: 8,
            codebook_size: 16,
            beta: 0.25,
            width: 8,
            dec_width: 8,
            input: InputSpec::Spatial { channels: 3, side: 16 },
        }
    }

    fn flat_cfg() -> CalibratorConfig {
        CalibratorConfig {
            input: InputSpec::Flat { channels: 4, side: 4, adapter_grid: 8 },
            ..spatial_cfg()
        }
    }

    #[test]
    fn nearest_neighbor_examples_and_tie_break() {
        let book = Codebook {
            entries: ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.0, 0.0, 1.0, 1.0]).unwrap(),
            usage: vec![0, 0],
        };
        let cells =
            ArrayD::from_shape_vec(IxDyn(&[3, 2]), vec![0.2, 0.1, 0.6, 0.6, 0.5, 0.5]).unwrap();
        let (idx, zq) = quantize(&cells, &book).unwrap();
        assert_eq!(idx, vec![0, 1, 0]); // equidistant cell breaks to the lowest index
        for (i, &r) in idx.iter().enumerate() {
            for c in 0..2 {
                assert_eq!(zq[IxDyn(&[i, c])], book.entries[IxDyn(&[r, c])]);
            }
        }
    }

    #[test]
    fn empty_codebook_is_a_config_error() {
        let cells = ArrayD::zeros(IxDyn(&[1, 2]));
        let empty = ArrayD::zeros(IxDyn(&[0, 2]));
        assert!(nearest_indices(&cells, &empty).is_err());
    }

    #[test]
    fn quantize_agrees_with_exhaustive_search_on_random_batches() {
        let mut rng = rng_from(5);
        for _ in 0..20 {
            let p = rng.gen_range(2..30);
            let c = rng.gen_range(1..8);
            let n = rng.gen_range(1..40);
            let book = ArrayD::from_shape_fn(IxDyn(&[p, c]), |_| rng.gen_range(-1.0..1.0));
            let cells = ArrayD::from_shape_fn(IxDyn(&[n, c]), |_| rng.gen_range(-1.0..1.0));
            let idx = nearest_indices(&cells, &book).unwrap();
            // independent oracle: argmin over an explicit distance table
            for i in 0..n {
                let dists: Vec<f64> = (0..p)
                    .map(|r| {
                        (0..c)
                            .map(|k| {
                                let d = cells[IxDyn(&[i, k])] - book[IxDyn(&[r, k])];
                                d * d
                            })
                            .sum()
                    })
                    .collect();
                let mut best = 0;
                for r in 1..p {
                    if dists[r] < dists[best] {
                        best = r;
                    }
                }
                assert_eq!(idx[i], best);
            }
        }
    }

    #[test]
    fn calibrate_output_shape_and_determinism() {
        let cfg = spatial_cfg();
        let cal = Calibrator::new(cfg.clone(), 3).unwrap();
        let mut rng = rng_from(8);
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 3, 16, 16]), |_| rng.gen_range(0.0..1.0));
        let j1 = calibrate(&cal, &x).unwrap();
        let j2 = calibrate(&cal, &x).unwrap();
        assert_eq!(j1.shape(), [2, 3, 32, 32]);
        assert_eq!(j1, j2);
        assert!(j1.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn adapter_shapes_for_both_input_kinds() {
        let cfg = spatial_cfg();
        let cal = Calibrator::new(cfg.clone(), 4).unwrap();
        let g = Graph::new();
        let bind = cal.params.bind(&g);
        let x = g.leaf(ArrayD::zeros(IxDyn(&[1, 3, 16, 16])));
        let a = adapt_modality(&g, &bind, "c.", &cfg, x).unwrap();
        assert_eq!(g.shape(a), [1, 8, 16, 16]); // spatial dims preserved

        let cfg = flat_cfg();
        let cal = Calibrator::new(cfg.clone(), 4).unwrap();
        let g = Graph::new();
        let bind = cal.params.bind(&g);
        let x = g.leaf(ArrayD::zeros(IxDyn(&[2, 4, 4, 4])));
        let a = adapt_modality(&g, &bind, "c.", &cfg, x).unwrap();
        assert_eq!(g.shape(a), [2, 8, 8, 8]); // reshaped to the configured grid
        assert!(g.value(a).iter().all(|v| v.is_finite()));

        let g = Graph::new();
        let bind = cal.params.bind(&g);
        let bad = g.leaf(ArrayD::zeros(IxDyn(&[1, 4, 5, 5])));
        assert!(adapt_modality(&g, &bind, "c.", &cfg, bad).is_err());
    }

    #[test]
    fn straight_through_keeps_gradient_path_live() {
        // perturbing an adapter parameter must change J, and the adapter must receive
        // a nonzero gradient from a downstream loss
        let cfg = spatial_cfg();
        let mut cal = Calibrator::new(cfg.clone(), 6).unwrap();
        let mut rng = rng_from(9);
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 3, 16, 16]), |_| rng.gen_range(0.0..1.0));

        let g = Graph::new();
        let bind = cal.params.bind(&g);
        let xv = g.leaf(x.clone());
        let fwd = calibrate_forward(&g, &bind, "c.", &cfg, xv, None).unwrap();
        let loss = g.mean_all(g.square(fwd.j));
        let grads = g.backward(loss);
        let ga = grads.get(bind["c.adapter.w"]).expect("adapter gradient");
        assert!(ga.iter().any(|&v| v != 0.0));

        let j_before = calibrate(&cal, &x).unwrap();
        let mut w = (**cal.params.get("c.adapter.w")).clone();
        w[IxDyn(&[0, 0, 0, 0])] += 0.5;
        cal.params.set("c.adapter.w", w);
        let j_after = calibrate(&cal, &x).unwrap();
        let max_delta =
            j_before.iter().zip(j_after.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_delta > 0.0);
    }

    #[test]
    fn straight_through_gradient_is_identity_at_z_e() {
        let cfg = spatial_cfg();
        let cal = Calibrator::new(cfg, 7).unwrap();
        let g = Graph::new();
        let bind = cal.params.bind(&g);
        let mut rng = rng_from(10);
        let cells = ArrayD::from_shape_fn(IxDyn(&[6, 8]), |_| rng.gen_range(-1.0..1.0));
        let z_e = g.leaf(cells.clone());
        let book = g.value(bind["c.codebook"]);
        let idx = nearest_indices(&cells, &book).unwrap();
        let b2 = book.view().into_dimensionality::<Ix2>().unwrap();
        let mut zq = ndarray::Array2::<f64>::zeros((6, 8));
        for (i, &r) in idx.iter().enumerate() {
            zq.row_mut(i).assign(&b2.row(r));
        }
        let st = g.straight_through(z_e, zq.into_dyn());
        // inject a known upstream gradient by weighting the sum
        let upstream = ArrayD::from_shape_fn(IxDyn(&[6, 8]), |_| rng.gen_range(-1.0..1.0));
        let wv = g.leaf(upstream.clone());
        let loss = g.sum_all(g.mul(st, wv));
        let grads = g.backward(loss);
        assert_eq!(*grads.get(z_e).unwrap(), upstream);
    }

    #[test]
    fn vq_losses_fixed_point_and_zero_beta_and_hand_case() {
        let g = Graph::new();
        // codebook with two entries; one cell equal to entry 1
        let book =
            g.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.0, 0.0, 0.5, -0.25]).unwrap());
        let ze_eq = g.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.5, -0.25]).unwrap());
        let target = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.1, 0.2]).unwrap();
        let recon = g.leaf(target.clone());
        let (l_rec, l_cb, l_commit) = vq_losses(&g, ze_eq, &[1], book, recon, &target).unwrap();
        assert_eq!(g.scalar_value(l_rec), 0.0);
        assert_eq!(g.scalar_value(l_cb), 0.0);
        assert_eq!(g.scalar_value(l_commit), 0.0);

        // hand-set 1-cell case
        let g = Graph::new();
        let book =
            g.leaf(ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        let ze = g.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.8, 0.7]).unwrap());
        let target = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.3, -0.1]).unwrap();
        let recon = g.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![0.4, 0.1]).unwrap());
        let (l_rec, l_cb, l_commit) = vq_losses(&g, ze, &[1], book, recon, &target).unwrap();
        let hand_rec = ((0.4f64 - 0.3).powi(2) + (0.1f64 + 0.1).powi(2)) / 2.0;
        let hand_cb = ((1.0f64 - 0.8).powi(2) + (1.0f64 - 0.7).powi(2)) / 2.0;
        let hand_commit = hand_cb; // same distances, opposite stop-gradient
        assert!((g.scalar_value(l_rec) - hand_rec).abs() < 1e-9);
        assert!((g.scalar_value(l_cb) - hand_cb).abs() < 1e-9);
        assert!((g.scalar_value(l_commit) - hand_commit).abs() < 1e-9);

        // beta = 0 drops the commitment term from the combined objective
        let total_b0 = g.scalar_value(l_rec) + g.scalar_value(l_cb);
        assert!((total_b0 - (hand_rec + hand_cb)).abs() < 1e-12);
    }

    #[test]
    fn codebook_gradients_flow_through_gather() {
        let cfg = spatial_cfg();
        let cal = Calibrator::new(cfg.clone(), 11).unwrap();
        let g = Graph::new();
        let bind = cal.params.bind(&g);
        let mut rng = rng_from(12);
        let x = g.leaf(ArrayD::from_shape_fn(IxDyn(&[1, 3, 16, 16]), |_| rng.gen_range(0.0..1.0)));
        let fwd = calibrate_forward(&g, &bind, "c.", &cfg, x, None).unwrap();
        let grads = g.backward(fwd.codebook_loss);
        let gb = grads.get(bind["c.codebook"]).expect("codebook gradient");
        assert!(gb.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn usage_counters_accumulate() {
        let cfg = spatial_cfg();
        let mut cal = Calibrator::new(cfg.clone(), 13).unwrap();
        let mut rng = rng_from(14);
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 3, 16, 16]), |_| rng.gen_range(0.0..1.0));
        let g = Graph::inference();
        let bind = cal.params.bind(&g);
        let xv = g.leaf(x);
        let mut usage = std::mem::take(&mut cal.usage);
        calibrate_forward(&g, &bind, "c.", &cal.cfg, xv, Some(&mut usage)).unwrap();
        cal.usage = usage;
        let total: u64 = cal.usage.iter().sum();
        assert_eq!(total, 16); // 4x4 latent cells
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = flat_cfg();
        let cal = Calibrator::new(cfg, 15).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cal.mcc");
        cal.save(&p).unwrap();
        let loaded = Calibrator::load(&p).unwrap();
        assert_eq!(cal.checksum(), loaded.checksum());
        assert_eq!(cal.cfg.input, loaded.cfg.input);
    }
}
