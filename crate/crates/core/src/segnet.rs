//! A small fully-convolutional 3D segmentation network with an auxiliary
//! projection head, written out by hand for forward and reverse mode.
//!
//! ```text
//! x ─ conv 3³ (1→F) ─ ReLU ─┬─ conv 1³ (F→C) ─ softmax ─ p
//!                           └─ conv 3³ d=1 (F→E) + conv 3³ d=2 (F→E) ─ z
//! ```
//!
//! All convolutions use zero "same" padding so `z` stays aligned with `p`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{read_volume, write_volume, ProbabilityField, Volume, VolumeBatch};

const TAPS: usize = 27;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub features: usize,
    pub embed_dim: usize,
    pub classes: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            features: 8,
            embed_dim: 16,
            classes: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub config: NetConfig,
    /// `F × 27`
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    /// `C × F`
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    /// `E × F × 27`, dilation 1
    pub proj1_w: Vec<f64>,
    /// `E × F × 27`, dilation 2
    pub proj2_w: Vec<f64>,
    pub proj_b: Vec<f64>,
}

pub const TENSOR_NAMES: [&str; 7] = [
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "proj1_w", "proj2_w", "proj_b",
];

impl ParamSet {
    pub fn zeros(config: NetConfig) -> Self {
        let NetConfig {
            features: f,
            embed_dim: e,
            classes: c,
        } = config;
        Self {
            config,
            conv1_w: vec![0.0; f * TAPS],
            conv1_b: vec![0.0; f],
            conv2_w: vec![0.0; c * f],
            conv2_b: vec![0.0; c],
            proj1_w: vec![0.0; e * f * TAPS],
            proj2_w: vec![0.0; e * f * TAPS],
            proj_b: vec![0.0; e],
        }
    }

    /// He-uniform weights and zero biases from a seeded stream.
    pub fn init(config: NetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(config);
        let mut fill = |w: &mut Vec<f64>, fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        };
        fill(&mut p.conv1_w, TAPS);
        fill(&mut p.conv2_w, config.features);
        fill(&mut p.proj1_w, 2 * config.features * TAPS);
        fill(&mut p.proj2_w, 2 * config.features * TAPS);
        p
    }

    pub fn tensors(&self) -> [&Vec<f64>; 7] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.proj1_w,
            &self.proj2_w,
            &self.proj_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 7] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.proj1_w,
            &mut self.proj2_w,
            &mut self.proj_b,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn from_flat(config: NetConfig, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(config);
        if flat.len() != p.len() {
            return Err(Error::contract(format!(
                "flat parameter vector has {} values, architecture needs {}",
                flat.len(),
                p.len()
            )));
        }
        let mut at = 0;
        for t in p.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[at..at + n]);
            at += n;
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[inline]
fn tap_offsets(tap: usize, dilation: isize) -> (isize, isize, isize) {
    let t = tap as isize;
    ((t / 9 - 1) * dilation, ((t / 3) % 3 - 1) * dilation, (t % 3 - 1) * dilation)
}

#[inline]
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let len = len as isize;
    let lo = (-off).max(0);
    let hi = (len - off).min(len);
    if hi <= lo {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

/// `out[co] += Σ_ci Σ_tap w[co, ci, tap] · in[ci](· + tap·dilation)` with zero
/// padding.
fn conv3_forward(
    input: &[f64],
    in_ch: usize,
    weight: &[f64],
    out: &mut [f64],
    out_ch: usize,
    dims: [usize; 3],
    dilation: isize,
) {
    let [h, w, d] = dims;
    let s = h * w * d;
    for tap in 0..TAPS {
        let (dx, dy, dz) = tap_offsets(tap, dilation);
        let (x0, x1) = valid_range(h, dx);
        let (y0, y1) = valid_range(w, dy);
        let (z0, z1) = valid_range(d, dz);
        if x0 >= x1 || y0 >= y1 || z0 >= z1 {
            continue;
        }
        for co in 0..out_ch {
            let out_plane = &mut out[co * s..(co + 1) * s];
            for ci in 0..in_ch {
                let wv = weight[(co * in_ch + ci) * TAPS + tap];
                let in_plane = &input[ci * s..(ci + 1) * s];
                for x in x0..x1 {
                    let xs = (x as isize + dx) as usize;
                    for y in y0..y1 {
                        let ys = (y as isize + dy) as usize;
                        let o = (x * w + y) * d;
                        let i = (xs * w + ys) * d;
                        let zs0 = (z0 as isize + dz) as usize;
                        let dst = &mut out_plane[o + z0..o + z1];
                        let src = &in_plane[i + zs0..i + zs0 + (z1 - z0)];
                        for (a, b) in dst.iter_mut().zip(src) {
                            *a += wv * b;
                        }
                    }
                }
            }
        }
    }
}

/// Reverse of [`conv3_forward`]: accumulates weight gradients and, when
/// `grad_in` is given, input gradients.
#[allow(clippy::too_many_arguments)]
fn conv3_backward(
    input: &[f64],
    in_ch: usize,
    weight: &[f64],
    grad_out: &[f64],
    out_ch: usize,
    dims: [usize; 3],
    dilation: isize,
    grad_w: &mut [f64],
    mut grad_in: Option<&mut [f64]>,
) {
    let [h, w, d] = dims;
    let s = h * w * d;
    for tap in 0..TAPS {
        let (dx, dy, dz) = tap_offsets(tap, dilation);
        let (x0, x1) = valid_range(h, dx);
        let (y0, y1) = valid_range(w, dy);
        let (z0, z1) = valid_range(d, dz);
        if x0 >= x1 || y0 >= y1 || z0 >= z1 {
            continue;
        }
        for co in 0..out_ch {
            let g_plane = &grad_out[co * s..(co + 1) * s];
            for ci in 0..in_ch {
                let widx = (co * in_ch + ci) * TAPS + tap;
                let wv = weight[widx];
                let in_plane = &input[ci * s..(ci + 1) * s];
                let mut acc = 0.0;
                for x in x0..x1 {
                    let xs = (x as isize + dx) as usize;
                    for y in y0..y1 {
                        let ys = (y as isize + dy) as usize;
                        let o = (x * w + y) * d;
                        let i = (xs * w + ys) * d;
                        let zs0 = (z0 as isize + dz) as usize;
                        let g = &g_plane[o + z0..o + z1];
                        let src = &in_plane[i + zs0..i + zs0 + (z1 - z0)];
                        for (a, b) in g.iter().zip(src) {
                            acc += a * b;
                        }
                        if let Some(gi) = grad_in.as_deref_mut() {
                            let dst = &mut gi[ci * s + i + zs0..ci * s + i + zs0 + (z1 - z0)];
                            for (a, b) in dst.iter_mut().zip(g) {
                                *a += wv * b;
                            }
                        }
                    }
                }
                grad_w[widx] += acc;
            }
        }
    }
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    shape: [usize; 5],
    input: Vec<f64>,
    pre_activation: Vec<f64>,
    hidden: Vec<f64>,
    projection: bool,
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// `(B, C, H, W, D)`
    pub logits: Vec<f64>,
    pub probs: ProbabilityField,
    /// `(B, E, H, W, D)` when the projection head ran.
    pub z_grid: Option<Vec<f64>>,
    pub cache: ForwardCache,
}

impl Forward {
    /// ReLU features `(B, F, H, W, D)`.
    pub fn features(&self) -> &[f64] {
        &self.cache.hidden
    }
}

pub fn forward(params: &ParamSet, x: &VolumeBatch, with_projection: bool) -> Result<Forward> {
    let input: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    forward_f64(params, x.shape(), &input, with_projection)
}

/// Forward pass on an `f64` input laid out as `(B, 1, H, W, D)`.
pub fn forward_f64(
    params: &ParamSet,
    shape: [usize; 5],
    input: &[f64],
    with_projection: bool,
) -> Result<Forward> {
    let [b, ch, h, w, d] = shape;
    if ch != 1 {
        return Err(Error::contract(format!("network expects one input channel, got {ch}")));
    }
    if h < 3 || w < 3 || d < 3 {
        return Err(Error::contract(format!(
            "spatial size {:?} is below the 3³ minimum",
            [h, w, d]
        )));
    }
    if input.len() != b * h * w * d {
        return Err(Error::contract("input length does not match its shape"));
    }
    let NetConfig {
        features: f,
        embed_dim: e,
        classes: c,
    } = params.config;
    let dims = [h, w, d];
    let s = h * w * d;
    let mut pre = vec![0.0; b * f * s];
    let mut hidden = vec![0.0; b * f * s];
    let mut logits = vec![0.0; b * c * s];
    let mut z = with_projection.then(|| vec![0.0; b * e * s]);

    for bi in 0..b {
        let x = &input[bi * s..(bi + 1) * s];
        let a1 = &mut pre[bi * f * s..(bi + 1) * f * s];
        for fi in 0..f {
            a1[fi * s..(fi + 1) * s].fill(params.conv1_b[fi]);
        }
        conv3_forward(x, 1, &params.conv1_w, a1, f, dims, 1);
        let hid = &mut hidden[bi * f * s..(bi + 1) * f * s];
        for (hv, av) in hid.iter_mut().zip(a1.iter()) {
            *hv = av.max(0.0);
        }
        let lg = &mut logits[bi * c * s..(bi + 1) * c * s];
        for ci in 0..c {
            let out = &mut lg[ci * s..(ci + 1) * s];
            out.fill(params.conv2_b[ci]);
            for fi in 0..f {
                let wv = params.conv2_w[ci * f + fi];
                for (o, hv) in out.iter_mut().zip(&hid[fi * s..(fi + 1) * s]) {
                    *o += wv * hv;
                }
            }
        }
        if let Some(z) = z.as_mut() {
            let zb = &mut z[bi * e * s..(bi + 1) * e * s];
            for ei in 0..e {
                zb[ei * s..(ei + 1) * s].fill(params.proj_b[ei]);
            }
            conv3_forward(hid, f, &params.proj1_w, zb, e, dims, 1);
            conv3_forward(hid, f, &params.proj2_w, zb, e, dims, 2);
        }
    }

    let probs = ProbabilityField::softmax([b, c, h, w, d], &logits);
    Ok(Forward {
        logits,
        probs,
        z_grid: z,
        cache: ForwardCache {
            shape,
            input: input.to_vec(),
            pre_activation: pre,
            hidden,
            projection: with_projection,
        },
    })
}

/// Parameter gradients given upstream gradients on the probabilities and,
/// optionally, on the projection grid.
pub fn backward(
    params: &ParamSet,
    fwd: &Forward,
    grad_p: &[f64],
    grad_z: Option<&[f64]>,
) -> Result<ParamSet> {
    let cache = &fwd.cache;
    let [b, _, h, w, d] = cache.shape;
    let NetConfig {
        features: f,
        embed_dim: e,
        classes: c,
    } = params.config;
    let s = h * w * d;
    if grad_p.len() != b * c * s {
        return Err(Error::contract("probability gradient has the wrong length"));
    }
    if let Some(gz) = grad_z {
        if !cache.projection {
            return Err(Error::contract(
                "projection gradient supplied but the forward cache has no projection",
            ));
        }
        if gz.len() != b * e * s {
            return Err(Error::contract("projection gradient has the wrong length"));
        }
    }
    let dims = [h, w, d];
    let mut grads = ParamSet::zeros(params.config);
    let p = fwd.probs.data();
    let mut g_logit = vec![0.0; c * s];
    let mut g_hidden = vec![0.0; f * s];

    for bi in 0..b {
        let pb = &p[bi * c * s..(bi + 1) * c * s];
        let gb = &grad_p[bi * c * s..(bi + 1) * c * s];
        for v in 0..s {
            let mut dotp = 0.0;
            for ci in 0..c {
                dotp += pb[ci * s + v] * gb[ci * s + v];
            }
            for ci in 0..c {
                g_logit[ci * s + v] = pb[ci * s + v] * (gb[ci * s + v] - dotp);
            }
        }
        let hid = &cache.hidden[bi * f * s..(bi + 1) * f * s];
        g_hidden.fill(0.0);
        for ci in 0..c {
            let gl = &g_logit[ci * s..(ci + 1) * s];
            grads.conv2_b[ci] += gl.iter().sum::<f64>();
            for fi in 0..f {
                let hv = &hid[fi * s..(fi + 1) * s];
                grads.conv2_w[ci * f + fi] += gl.iter().zip(hv).map(|(a, b)| a * b).sum::<f64>();
                let wv = params.conv2_w[ci * f + fi];
                for (g, a) in g_hidden[fi * s..(fi + 1) * s].iter_mut().zip(gl) {
                    *g += wv * a;
                }
            }
        }
        if let Some(gz) = grad_z {
            let gzb = &gz[bi * e * s..(bi + 1) * e * s];
            for ei in 0..e {
                grads.proj_b[ei] += gzb[ei * s..(ei + 1) * s].iter().sum::<f64>();
            }
            conv3_backward(hid, f, &params.proj1_w, gzb, e, dims, 1, &mut grads.proj1_w, Some(&mut g_hidden));
            conv3_backward(hid, f, &params.proj2_w, gzb, e, dims, 2, &mut grads.proj2_w, Some(&mut g_hidden));
        }
        let pre = &cache.pre_activation[bi * f * s..(bi + 1) * f * s];
        for (g, a) in g_hidden.iter_mut().zip(pre) {
            if *a <= 0.0 {
                *g = 0.0;
            }
        }
        for fi in 0..f {
            grads.conv1_b[fi] += g_hidden[fi * s..(fi + 1) * s].iter().sum::<f64>();
        }
        let x = &cache.input[bi * s..(bi + 1) * s];
        conv3_backward(x, 1, &params.conv1_w, &g_hidden, f, dims, 1, &mut grads.conv1_w, None);
    }
    Ok(grads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: ParamSet,
}

impl OptimState {
    pub fn new(config: NetConfig, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: ParamSet::zeros(config),
        }
    }
}

/// SGD with momentum and coupled weight decay:
/// `v ← m·v + g + wd·θ`, `θ ← θ − lr·v`.
pub fn sgd_step(params: &mut ParamSet, grads: &ParamSet, opt: &mut OptimState) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::Diverged("non-finite gradient".into()));
    }
    let (lr, m, wd) = (opt.lr, opt.momentum, opt.weight_decay);
    for ((theta, g), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(opt.velocity.tensors_mut())
    {
        for ((t, gi), vi) in theta.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
            *vi = m * *vi + gi + wd * *t;
            *t -= lr * *vi;
        }
    }
    Ok(())
}

/// `θ_t ← α·θ_t + (1 − α)·θ_s`.
pub fn ema_update(teacher: &mut ParamSet, student: &ParamSet, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::param(format!("EMA decay must lie in [0, 1], got {alpha}")));
    }
    if teacher.config != student.config {
        return Err(Error::contract("teacher and student architectures differ"));
    }
    for (t, s) in teacher.tensors_mut().into_iter().zip(student.tensors()) {
        for (a, b) in t.iter_mut().zip(s.iter()) {
            *a = alpha * *a + (1.0 - alpha) * b;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub arch: String,
    #[serde(rename = "F")]
    pub features: usize,
    #[serde(rename = "E")]
    pub embed_dim: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    pub epoch: usize,
    pub rng_seed: u64,
    pub tensors: Vec<(String, usize)>,
}

pub const ARCH_NAME: &str = "conv3-relu-conv1+aspp-lite-d1d2";

fn manifest_path(base: &Path) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Writes `<base>.json`/`<base>.bin` (flat `f32` parameters) and
/// `<base>.manifest.json`.
pub fn save_checkpoint(params: &ParamSet, base: &Path, epoch: usize, rng_seed: u64) -> Result<()> {
    let flat: Vec<f32> = params.flatten().iter().map(|&v| v as f32).collect();
    let n = flat.len();
    let vol = VolumeBatch::new([1, 1, 1, 1, n], flat)?;
    write_volume(&Volume::Float(vol), base)?;
    let manifest = CheckpointManifest {
        arch: ARCH_NAME.into(),
        features: params.config.features,
        embed_dim: params.config.embed_dim,
        classes: params.config.classes,
        epoch,
        rng_seed,
        tensors: TENSOR_NAMES
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| (n.to_string(), t.len()))
            .collect(),
    };
    let path = manifest_path(base);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(base: &Path) -> Result<(ParamSet, CheckpointManifest)> {
    let base = crate::fields::volume_paths(base).0.with_extension("");
    let path = manifest_path(&base);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    if manifest.arch != ARCH_NAME {
        return Err(Error::Format {
            path,
            reason: format!("unknown architecture {}", manifest.arch),
        });
    }
    let Volume::Float(vol) = read_volume(&base)? else {
        return Err(Error::Format {
            path: base,
            reason: "checkpoint payload must be float32".into(),
        });
    };
    let config = NetConfig {
        features: manifest.features,
        embed_dim: manifest.embed_dim,
        classes: manifest.classes,
    };
    let flat: Vec<f64> = vol.data().iter().map(|&v| v as f64).collect();
    Ok((ParamSet::from_flat(config, &flat)?, manifest))
}
