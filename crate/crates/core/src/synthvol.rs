//! Seeded synthetic lesion volumes, geometric augmentation, and on-disk
//! datasets with a JSON manifest.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{read_volume, write_volume, LabelField, Volume, VolumeBatch};

pub const GENERATOR_VERSION: &str = "1";
pub const MIN_SIZE: usize = 16;

/// Per-volume multiplicative intensity jitter range.
pub const GAIN_RANGE: (f64, f64) = (0.75, 1.25);
/// Per-volume additive intensity jitter range.
pub const OFFSET_RANGE: (f64, f64) = (-0.5, 0.5);
/// Standard deviation of white noise on top of the smooth background.
pub const WHITE_NOISE: f64 = 0.35;
pub const DEFAULT_CONTRAST: f64 = 4.0;
const BLUR_RADIUS: usize = 2;
const BLUR_PASSES: usize = 3;
const PLACEMENT_RETRIES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Small,
    Medium,
    Large,
}

impl Category {
    pub const ALL: [Category; 3] = [Category::Small, Category::Medium, Category::Large];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(Category::Small),
            "medium" => Ok(Category::Medium),
            "large" => Ok(Category::Large),
            other => Err(Error::param(format!("unknown category {other}"))),
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::Small => "small",
            Category::Medium => "medium",
            Category::Large => "large",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Scatter {
    #[serde(rename = "scattered")]
    Scattered,
    #[serde(rename = "non-scattered")]
    NonScattered,
}

impl Scatter {
    pub const ALL: [Scatter; 2] = [Scatter::Scattered, Scatter::NonScattered];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "scattered" => Ok(Scatter::Scattered),
            "non-scattered" | "non_scattered" => Ok(Scatter::NonScattered),
            other => Err(Error::param(format!("unknown scatter {other}"))),
        }
    }
}

impl fmt::Display for Scatter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scatter::Scattered => "scattered",
            Scatter::NonScattered => "non-scattered",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionSpec {
    pub count: usize,
    /// Semi-axis range in voxels; each axis of each lesion is drawn from it.
    pub radius_min: f64,
    pub radius_max: f64,
    /// Lesion brightness in units of the background standard deviation.
    pub contrast: f64,
    pub category: Category,
    pub scatter: Scatter,
}

impl LesionSpec {
    /// Size/scatter presets. Scattered volumes hold several separated lesions,
    /// non-scattered ones a single lesion.
    pub fn preset(category: Category, scatter: Scatter) -> Self {
        let (radius_min, radius_max) = match (category, scatter) {
            (Category::Small, _) => (1.5, 3.0),
            (Category::Medium, _) => (4.0, 6.0),
            (Category::Large, Scatter::NonScattered) => (7.5, 9.5),
            (Category::Large, Scatter::Scattered) => (5.5, 6.5),
        };
        let count = match (scatter, category) {
            (Scatter::NonScattered, _) => 1,
            (Scatter::Scattered, Category::Small) => 4,
            (Scatter::Scattered, _) => 3,
        };
        Self {
            count,
            radius_min,
            radius_max,
            contrast: DEFAULT_CONTRAST,
            category,
            scatter,
        }
    }

    /// Preset radii are tuned for 32³; rescale them to the smallest side of
    /// `size` so foreground fractions stay comparable. Radii stay ≥ 1.
    pub fn fit_to(mut self, size: [usize; 3]) -> Self {
        let f = *size.iter().min().expect("three dims") as f64 / 32.0;
        self.radius_min = (self.radius_min * f).max(1.0);
        self.radius_max = (self.radius_max * f).max(self.radius_min);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius_min >= 1.0 && self.radius_min <= self.radius_max) {
            return Err(Error::param(format!(
                "need 1 <= radius_min <= radius_max, got {} and {}",
                self.radius_min, self.radius_max
            )));
        }
        if !self.contrast.is_finite() {
            return Err(Error::param("contrast must be finite"));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
}

impl Ellipsoid {
    fn radius(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    fn max_axis(&self) -> f64 {
        self.axes.iter().cloned().fold(0.0, f64::max)
    }

    fn min_axis(&self) -> f64 {
        self.axes.iter().cloned().fold(f64::INFINITY, f64::min)
    }
}

fn box_blur_axis(data: &mut [f64], dims: [usize; 3], axis: usize, radius: usize) {
    let strides = [dims[1] * dims[2], dims[2], 1];
    let n = dims[axis];
    let stride = strides[axis];
    let mut line = vec![0.0; n];
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    for i in 0..dims[others[0]] {
        for j in 0..dims[others[1]] {
            let base = i * strides[others[0]] + j * strides[others[1]];
            for (t, l) in line.iter_mut().enumerate() {
                *l = data[base + t * stride];
            }
            for t in 0..n {
                let mut acc = 0.0;
                for o in 0..=2 * radius {
                    let idx = (t + o).saturating_sub(radius).min(n - 1);
                    acc += line[idx];
                }
                data[base + t * stride] = acc / (2 * radius + 1) as f64;
            }
        }
    }
}

fn smooth_noise(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Vec<f64> {
    let n = dims.iter().product::<usize>();
    let mut data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    for _ in 0..BLUR_PASSES {
        for axis in 0..3 {
            box_blur_axis(&mut data, dims, axis, BLUR_RADIUS);
        }
    }
    let mean = data.iter().sum::<f64>() / n as f64;
    let var = data.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let sd = var.sqrt().max(1e-12);
    data.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    data
}

fn place_lesions(rng: &mut ChaCha8Rng, dims: [usize; 3], spec: &LesionSpec) -> Result<Vec<Ellipsoid>> {
    let mut placed: Vec<Ellipsoid> = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let mut ok = None;
        for _ in 0..PLACEMENT_RETRIES {
            let axes = [0; 3].map(|_| {
                if spec.radius_max > spec.radius_min {
                    rng.gen_range(spec.radius_min..=spec.radius_max)
                } else {
                    spec.radius_min
                }
            });
            let mut center = [0.0; 3];
            let mut fits = true;
            for a in 0..3 {
                let lo = axes[a];
                let hi = dims[a] as f64 - 1.0 - axes[a];
                if hi < lo {
                    fits = false;
                    break;
                }
                center[a] = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            }
            if !fits {
                continue;
            }
            let cand = Ellipsoid { center, axes };
            let accept = match spec.scatter {
                Scatter::Scattered => placed.iter().all(|e| {
                    let d = (0..3).map(|a| (e.center[a] - center[a]).powi(2)).sum::<f64>().sqrt();
                    d >= e.max_axis() + cand.max_axis() + 2.0
                }),
                Scatter::NonScattered => placed.first().map_or(true, |e| {
                    let d = (0..3).map(|a| (e.center[a] - center[a]).powi(2)).sum::<f64>().sqrt();
                    d <= e.min_axis()
                }),
            };
            if accept {
                ok = Some(cand);
                break;
            }
        }
        placed.push(ok.ok_or_else(|| {
            Error::Generation(format!(
                "could not place lesion {} of {} in a {:?} volume",
                placed.len() + 1,
                spec.count,
                dims
            ))
        })?);
    }
    Ok(placed)
}

/// One image/mask pair, both with a batch of one.
pub fn gen_volume(seed: u64, size: [usize; 3], spec: &LesionSpec) -> Result<(VolumeBatch, LabelField)> {
    spec.validate()?;
    if size.iter().any(|&s| s < MIN_SIZE) {
        return Err(Error::param(format!("volume size {size:?} is below {MIN_SIZE}³")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lesions = place_lesions(&mut rng, size, spec)?;
    let mut image = smooth_noise(&mut rng, size);
    let gain = rng.gen_range(GAIN_RANGE.0..GAIN_RANGE.1);
    let offset = rng.gen_range(OFFSET_RANGE.0..OFFSET_RANGE.1);
    let n = image.len();
    let mut mask = vec![0u8; n];
    let [h, w, d] = size;
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                let i = (x * w + y) * d + z;
                let p = [x as f64, y as f64, z as f64];
                let mut soft = 0.0f64;
                for e in &lesions {
                    let r = e.radius(p);
                    if r <= 1.0 {
                        mask[i] = 1;
                    }
                    let signed = (1.0 - r) * e.min_axis();
                    soft = soft.max(1.0 / (1.0 + (-2.0 * signed).exp()));
                }
                image[i] += spec.contrast * soft;
            }
        }
    }
    let data: Vec<f32> = image
        .iter()
        .map(|&v| {
            let noise: f64 = rng.sample(StandardNormal);
            (gain * (v + WHITE_NOISE * noise) + offset) as f32
        })
        .collect();
    Ok((
        VolumeBatch::new([1, 1, h, w, d], data)?,
        LabelField::new([1, h, w, d], mask, 2)?,
    ))
}

/// Axis flips followed by `rot` quarter turns in the `plane` of two axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Orientation {
    pub flips: [bool; 3],
    pub plane: (usize, usize),
    pub rot: u8,
}

impl Orientation {
    pub const IDENTITY: Orientation = Orientation {
        flips: [false; 3],
        plane: (0, 1),
        rot: 0,
    };

    /// Rotations are restricted to planes whose two sides are equal, so the
    /// shape is preserved.
    pub fn sample(rng: &mut impl Rng, dims: [usize; 3]) -> Self {
        let flips = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
        let planes: Vec<(usize, usize)> = [(0, 1), (0, 2), (1, 2)]
            .into_iter()
            .filter(|&(a, b)| dims[a] == dims[b])
            .collect();
        let pick = rng.gen_range(0..3usize);
        let rot = rng.gen_range(0..4u8);
        match planes.get(pick % planes.len().max(1)) {
            Some(&plane) => Orientation { flips, plane, rot },
            None => Orientation {
                flips,
                plane: (0, 1),
                rot: 0,
            },
        }
    }

    pub fn is_identity(&self) -> bool {
        self.flips == [false; 3] && self.rot % 4 == 0
    }

    /// Resample a `(channels, H, W, D)` grid.
    pub fn apply<T: Copy>(&self, grid: &[T], channels: usize, dims: [usize; 3]) -> Vec<T> {
        let mut cur = grid.to_vec();
        let mut cur_dims = dims;
        for axis in 0..3 {
            if self.flips[axis] {
                cur = remap(&cur, channels, cur_dims, cur_dims, |o| {
                    let mut s = o;
                    s[axis] = cur_dims[axis] - 1 - o[axis];
                    s
                });
            }
        }
        for _ in 0..self.rot % 4 {
            let (a, b) = self.plane;
            let mut out_dims = cur_dims;
            out_dims.swap(a, b);
            let na = cur_dims[a];
            cur = remap(&cur, channels, cur_dims, out_dims, |o| {
                let mut s = o;
                s[b] = o[a];
                s[a] = na - 1 - o[b];
                s
            });
            cur_dims = out_dims;
        }
        cur
    }

    /// Undo [`Orientation::apply`]; `dims` are the original (pre-transform)
    /// dimensions.
    pub fn invert<T: Copy>(&self, grid: &[T], channels: usize, dims: [usize; 3]) -> Vec<T> {
        let mut rotated_dims = dims;
        if self.rot % 2 == 1 {
            rotated_dims.swap(self.plane.0, self.plane.1);
        }
        let undo_rot = Orientation {
            flips: [false; 3],
            plane: self.plane,
            rot: (4 - self.rot % 4) % 4,
        };
        let back = undo_rot.apply(grid, channels, rotated_dims);
        let undo_flip = Orientation {
            flips: self.flips,
            plane: self.plane,
            rot: 0,
        };
        undo_flip.apply(&back, channels, dims)
    }

    pub fn out_dims(&self, dims: [usize; 3]) -> [usize; 3] {
        let mut d = dims;
        if self.rot % 2 == 1 {
            d.swap(self.plane.0, self.plane.1);
        }
        d
    }
}

fn remap<T: Copy>(
    src: &[T],
    channels: usize,
    src_dims: [usize; 3],
    out_dims: [usize; 3],
    map: impl Fn([usize; 3]) -> [usize; 3],
) -> Vec<T> {
    let s_len = src_dims.iter().product::<usize>();
    let o_len = out_dims.iter().product::<usize>();
    let mut out = Vec::with_capacity(channels * o_len);
    for c in 0..channels {
        for x in 0..out_dims[0] {
            for y in 0..out_dims[1] {
                for z in 0..out_dims[2] {
                    let s = map([x, y, z]);
                    out.push(src[c * s_len + (s[0] * src_dims[1] + s[1]) * src_dims[2] + s[2]]);
                }
            }
        }
    }
    out
}

/// Crop window followed by an [`Orientation`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transform {
    pub origin: [usize; 3],
    pub crop: [usize; 3],
    pub orientation: Orientation,
}

impl Transform {
    pub fn identity(dims: [usize; 3]) -> Self {
        Self {
            origin: [0; 3],
            crop: dims,
            orientation: Orientation::IDENTITY,
        }
    }

    pub fn sample(rng: &mut impl Rng, dims: [usize; 3], crop: [usize; 3]) -> Result<Self> {
        let origin = sample_crop_origin(rng, dims, crop)?;
        Ok(Self {
            origin,
            crop,
            orientation: Orientation::sample(rng, crop),
        })
    }

    pub fn crop_grid<T: Copy>(&self, grid: &[T], channels: usize, dims: [usize; 3]) -> Vec<T> {
        let [ox, oy, oz] = self.origin;
        remap(grid, channels, dims, self.crop, |o| [o[0] + ox, o[1] + oy, o[2] + oz])
    }

    pub fn apply_grid<T: Copy>(&self, grid: &[T], channels: usize, dims: [usize; 3]) -> Vec<T> {
        let cropped = self.crop_grid(grid, channels, dims);
        self.orientation.apply(&cropped, channels, self.crop)
    }

    pub fn apply_volume(&self, x: &VolumeBatch) -> Result<VolumeBatch> {
        let [b, c, ..] = x.shape();
        if b != 1 {
            return Err(Error::contract("augmentation works on one volume at a time"));
        }
        self.check(x.spatial())?;
        let out = self.apply_grid(x.data(), c, x.spatial());
        let d = self.orientation.out_dims(self.crop);
        VolumeBatch::new([1, c, d[0], d[1], d[2]], out)
    }

    pub fn apply_labels(&self, y: &LabelField) -> Result<LabelField> {
        if y.shape()[0] != 1 {
            return Err(Error::contract("augmentation works on one volume at a time"));
        }
        self.check(y.spatial())?;
        let out = self.apply_grid(y.data(), 1, y.spatial());
        let d = self.orientation.out_dims(self.crop);
        let classes = y.data().iter().copied().max().unwrap_or(0) as usize + 1;
        LabelField::new([1, d[0], d[1], d[2]], out, classes.max(2))
    }

    fn check(&self, dims: [usize; 3]) -> Result<()> {
        if (0..3).any(|a| self.origin[a] + self.crop[a] > dims[a]) {
            return Err(Error::contract(format!(
                "crop {:?} at {:?} exceeds volume {:?}",
                self.crop, self.origin, dims
            )));
        }
        Ok(())
    }
}

pub fn sample_crop_origin(rng: &mut impl Rng, dims: [usize; 3], crop: [usize; 3]) -> Result<[usize; 3]> {
    if (0..3).any(|a| crop[a] > dims[a] || crop[a] == 0) {
        return Err(Error::param(format!("crop {crop:?} does not fit volume {dims:?}")));
    }
    Ok([0, 1, 2].map(|a| rng.gen_range(0..=dims[a] - crop[a])))
}

/// Seeded crop, flips and quarter turns, applied identically to image and
/// mask. `crop = None` keeps the full extent.
pub fn augment(
    x: &VolumeBatch,
    y: &LabelField,
    seed: u64,
    crop: Option<[usize; 3]>,
) -> Result<(VolumeBatch, LabelField, Transform)> {
    if x.spatial() != y.spatial() {
        return Err(Error::contract("image and mask differ in shape"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Transform::sample(&mut rng, x.spatial(), crop.unwrap_or(x.spatial()))?;
    Ok((t.apply_volume(x)?, t.apply_labels(y)?, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Labeled,
    Unlabeled,
    Val,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeEntry {
    pub id: String,
    /// Paths relative to the manifest directory.
    pub image: PathBuf,
    pub mask: PathBuf,
    pub labeled: bool,
    pub role: Role,
    pub seed: u64,
    pub category: Category,
    pub scatter: Scatter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub labeled_ratio: f64,
    pub val_ratio: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub volumes: Vec<VolumeEntry>,
    pub split: Split,
    pub generator_version: String,
    pub size: [usize; 3],
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_volumes: usize,
    pub size: [usize; 3],
    pub labeled_ratio: f64,
    pub val_ratio: f64,
    pub seed: u64,
    /// Restrict to these size categories; `None` cycles through all three.
    pub categories: Option<Vec<Category>>,
    pub scatter: Option<Vec<Scatter>>,
    /// Lesion intensity in units of the background's standard deviation.
    pub contrast: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_volumes: 40,
            size: [32, 32, 32],
            labeled_ratio: 0.1,
            val_ratio: 0.2,
            seed: 0,
            categories: None,
            scatter: None,
            contrast: DEFAULT_CONTRAST,
        }
    }
}

/// `(n_labeled, n_unlabeled, n_val)` for a dataset of `n` volumes.
pub fn split_counts(n: usize, labeled_ratio: f64, val_ratio: f64) -> Result<(usize, usize, usize)> {
    if !(0.0..1.0).contains(&labeled_ratio) || !(0.0..1.0).contains(&val_ratio) {
        return Err(Error::param("labeled and validation ratios must lie in [0, 1)"));
    }
    let n_val = (val_ratio * n as f64).round() as usize;
    let n_labeled = ((labeled_ratio * n as f64).round() as usize).max(1);
    if n_val + n_labeled > n {
        return Err(Error::param(format!(
            "{n} volumes cannot hold {n_labeled} labeled and {n_val} validation volumes"
        )));
    }
    Ok((n_labeled, n - n_labeled - n_val, n_val))
}

pub const MANIFEST_NAME: &str = "manifest.json";

/// Generate volumes into `out_dir` and write `manifest.json`. Refuses to
/// replace an existing manifest unless `overwrite` is set.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path, overwrite: bool) -> Result<DatasetManifest> {
    if config.n_volumes == 0 {
        return Err(Error::param("dataset needs at least one volume"));
    }
    let manifest_path = out_dir.join(MANIFEST_NAME);
    if manifest_path.exists() && !overwrite {
        return Err(Error::io(
            &manifest_path,
            io::Error::new(io::ErrorKind::AlreadyExists, "manifest exists; pass overwrite to replace it"),
        ));
    }
    let (n_labeled, n_unlabeled, n_val) = split_counts(config.n_volumes, config.labeled_ratio, config.val_ratio)?;
    let categories = config.categories.clone().unwrap_or_else(|| Category::ALL.to_vec());
    let scatters = config.scatter.clone().unwrap_or_else(|| Scatter::ALL.to_vec());
    if categories.is_empty() || scatters.is_empty() {
        return Err(Error::param("category and scatter filters must not be empty"));
    }
    let combos: Vec<(Category, Scatter)> = categories
        .iter()
        .flat_map(|&c| scatters.iter().map(move |&s| (c, s)))
        .collect();

    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..config.n_volumes).collect();
    order.shuffle(&mut rng);
    let mut roles = vec![Role::Unlabeled; config.n_volumes];
    for &i in &order[..n_val] {
        roles[i] = Role::Val;
    }
    for &i in &order[n_val..n_val + n_labeled] {
        roles[i] = Role::Labeled;
    }

    let mut volumes = Vec::with_capacity(config.n_volumes);
    for (i, role) in roles.into_iter().enumerate() {
        let (category, scatter) = combos[i % combos.len()];
        let seed: u64 = rng.gen();
        let mut spec = LesionSpec::preset(category, scatter).fit_to(config.size);
        spec.contrast = config.contrast;
        let (x, y) = gen_volume(seed, config.size, &spec)?;
        let id = format!("vol_{i:03}");
        let image = PathBuf::from(format!("{id}_image"));
        let mask = PathBuf::from(format!("{id}_mask"));
        write_volume(&Volume::Float(x), &out_dir.join(&image))?;
        write_volume(&Volume::Label(y), &out_dir.join(&mask))?;
        volumes.push(VolumeEntry {
            id,
            image,
            mask,
            labeled: role == Role::Labeled,
            role,
            seed,
            category,
            scatter,
        });
    }
    let manifest = DatasetManifest {
        volumes,
        split: Split {
            labeled_ratio: config.labeled_ratio,
            val_ratio: config.val_ratio,
            n_labeled,
            n_unlabeled,
            n_val,
        },
        generator_version: GENERATOR_VERSION.into(),
        size: config.size,
        seed: config.seed,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&manifest_path, e))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// A manifest with every volume loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<VolumeBatch>,
    pub masks: Vec<LabelField>,
}

impl Dataset {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let manifest = read_manifest(manifest_path)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let mut images = Vec::with_capacity(manifest.volumes.len());
        let mut masks = Vec::with_capacity(manifest.volumes.len());
        for v in &manifest.volumes {
            let Volume::Float(x) = read_volume(&dir.join(&v.image))? else {
                return Err(Error::Format {
                    path: dir.join(&v.image),
                    reason: "image must be float32".into(),
                });
            };
            let Volume::Label(y) = read_volume(&dir.join(&v.mask))? else {
                return Err(Error::Format {
                    path: dir.join(&v.mask),
                    reason: "mask must be uint8".into(),
                });
            };
            if x.spatial() != y.spatial() {
                return Err(Error::Format {
                    path: dir.join(&v.mask),
                    reason: "mask and image shapes differ".into(),
                });
            }
            images.push(x);
            masks.push(y);
        }
        Ok(Self { manifest, images, masks })
    }

    pub fn indices(&self, role: Role) -> Vec<usize> {
        (0..self.manifest.volumes.len())
            .filter(|&i| self.manifest.volumes[i].role == role)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fraction(y: &LabelField) -> f64 {
        y.foreground_count() as f64 / y.data().len() as f64
    }

    #[test]
    fn no_lesions_gives_empty_mask() {
        let mut spec = LesionSpec::preset(Category::Medium, Scatter::Scattered);
        spec.count = 0;
        let (_, y) = gen_volume(1, [16, 16, 16], &spec).unwrap();
        assert_eq!(y.foreground_count(), 0);
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let spec = LesionSpec::preset(Category::Small, Scatter::Scattered);
        let a = gen_volume(9, [20, 18, 16], &spec).unwrap();
        let b = gen_volume(9, [20, 18, 16], &spec).unwrap();
        assert_eq!(a, b);
        let c = gen_volume(10, [20, 18, 16], &spec).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn radius_four_sphere_voxel_count() {
        let spec = LesionSpec {
            count: 1,
            radius_min: 4.0,
            radius_max: 4.0,
            contrast: 2.0,
            category: Category::Medium,
            scatter: Scatter::NonScattered,
        };
        for seed in 0..10 {
            let (_, y) = gen_volume(seed, [32, 32, 32], &spec).unwrap();
            let n = y.foreground_count();
            assert!((240..=300).contains(&n), "seed {seed}: {n} voxels");
        }
    }

    #[test]
    fn lesions_are_brighter_than_background() {
        let spec = LesionSpec::preset(Category::Large, Scatter::NonScattered);
        let (x, y) = gen_volume(3, [32, 32, 32], &spec).unwrap();
        let (mut fg, mut bg, mut nf, mut nb) = (0.0, 0.0, 0, 0);
        for (v, m) in x.data().iter().zip(y.data()) {
            if *m == 1 {
                fg += *v as f64;
                nf += 1;
            } else {
                bg += *v as f64;
                nb += 1;
            }
        }
        assert!(fg / nf as f64 > bg / nb as f64 + 1.0);
    }

    #[test]
    fn category_fractions() {
        for seed in 0..6 {
            let (_, y) = gen_volume(seed, [32, 32, 32], &LesionSpec::preset(Category::Small, Scatter::Scattered)).unwrap();
            assert!(fraction(&y) < 0.02);
            for scatter in Scatter::ALL {
                let (_, y) = gen_volume(seed, [32, 32, 32], &LesionSpec::preset(Category::Large, scatter)).unwrap();
                assert!(fraction(&y) > 0.05, "large {scatter}: {}", fraction(&y));
            }
        }
    }

    #[test]
    fn unplaceable_lesion_errors() {
        let spec = LesionSpec::preset(Category::Large, Scatter::Scattered);
        assert!(matches!(gen_volume(0, [16, 16, 16], &spec), Err(Error::Generation(_))));
        assert!(gen_volume(0, [8, 32, 32], &spec).is_err());
    }

    #[test]
    fn identity_transform_is_noop() {
        let (x, y) = gen_volume(2, [16, 16, 16], &LesionSpec::preset(Category::Medium, Scatter::NonScattered)).unwrap();
        let t = Transform::identity(x.spatial());
        assert_eq!(t.apply_volume(&x).unwrap(), x);
        assert_eq!(t.apply_labels(&y).unwrap(), y);
    }

    #[test]
    fn double_flip_is_identity() {
        let grid: Vec<u32> = (0..60).collect();
        let dims = [3, 4, 5];
        for axis in 0..3 {
            let mut flips = [false; 3];
            flips[axis] = true;
            let o = Orientation { flips, plane: (0, 1), rot: 0 };
            let once = o.apply(&grid, 1, dims);
            assert_ne!(once, grid);
            assert_eq!(o.apply(&once, 1, dims), grid);
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let grid: Vec<u32> = (0..2 * 27).collect();
        let o = Orientation { flips: [false; 3], plane: (0, 2), rot: 4 };
        assert_eq!(o.apply(&grid, 2, [3, 3, 3]), grid);
        let o = Orientation { flips: [false; 3], plane: (0, 2), rot: 1 };
        let once = o.apply(&grid, 2, [3, 3, 3]);
        assert_ne!(once, grid);
    }

    #[test]
    fn invert_undoes_orientation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dims = [4, 4, 4];
        let grid: Vec<u32> = (0..3 * 64).collect();
        for _ in 0..30 {
            let o = Orientation::sample(&mut rng, dims);
            let t = o.apply(&grid, 3, dims);
            assert_eq!(o.invert(&t, 3, dims), grid);
        }
        let o = Orientation { flips: [true, false, true], plane: (0, 1), rot: 3 };
        let dims = [3, 5, 2];
        let grid: Vec<u32> = (0..30).collect();
        let t = o.apply(&grid, 1, dims);
        assert_eq!(o.invert(&t, 1, dims), grid);
    }

    #[test]
    fn quarter_turn_moves_voxels() {
        // single voxel at (0, 1, 0) in a 2×2×1 grid, turned once in plane (0, 1)
        let grid = vec![0u8, 1, 0, 0];
        let o = Orientation { flips: [false; 3], plane: (0, 1), rot: 1 };
        let out = o.apply(&grid, 1, [2, 2, 1]);
        assert_eq!(out.iter().filter(|&&v| v == 1).count(), 1);
    }

    #[test]
    fn flip_then_crop_never_adds_foreground() {
        let (x, y) = gen_volume(4, [24, 24, 24], &LesionSpec::preset(Category::Medium, Scatter::Scattered)).unwrap();
        for seed in 0..20 {
            let (xa, ya, _) = augment(&x, &y, seed, Some([16, 16, 16])).unwrap();
            assert_eq!(xa.spatial(), [16, 16, 16]);
            assert!(ya.foreground_count() <= y.foreground_count());
        }
        let (_, ya, _) = augment(&x, &y, 1, None).unwrap();
        assert_eq!(ya.foreground_count(), y.foreground_count());
    }

    #[test]
    fn oversized_crop_rejected() {
        let (x, y) = gen_volume(4, [16, 16, 16], &LesionSpec::preset(Category::Small, Scatter::Scattered)).unwrap();
        assert!(augment(&x, &y, 0, Some([17, 16, 16])).is_err());
    }

    #[test]
    fn split_counts_examples() {
        assert_eq!(split_counts(10, 0.1, 0.0).unwrap(), (1, 9, 0));
        assert_eq!(split_counts(40, 0.1, 0.2).unwrap(), (4, 28, 8));
        assert_eq!(split_counts(10, 0.01, 0.0).unwrap().0, 1);
        assert!(split_counts(2, 0.5, 0.9).is_err());
    }

    #[test]
    fn dataset_split_and_filter() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_volumes: 10,
            size: [16, 16, 16],
            labeled_ratio: 0.1,
            val_ratio: 0.0,
            categories: Some(vec![Category::Small]),
            ..Default::default()
        };
        let m = build_dataset(&cfg, dir.path(), false).unwrap();
        assert_eq!(m.volumes.iter().filter(|v| v.labeled).count(), 1);
        assert!(m.volumes.iter().all(|v| v.category == Category::Small));
        assert!(build_dataset(&cfg, dir.path(), false).is_err());
        let again = build_dataset(&cfg, dir.path(), true).unwrap();
        assert_eq!(again, m);
        let ds = Dataset::load(&dir.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(ds.images.len(), 10);
        assert_eq!(ds.indices(Role::Labeled).len(), 1);
    }

    #[test]
    fn manifest_is_reproducible() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            n_volumes: 6,
            size: [32, 32, 32],
            labeled_ratio: 0.2,
            val_ratio: 0.2,
            categories: Some(vec![Category::Small, Category::Medium]),
            seed: 11,
            ..Default::default()
        };
        build_dataset(&cfg, a.path(), false).unwrap();
        build_dataset(&cfg, b.path(), false).unwrap();
        let ta = fs::read(a.path().join(MANIFEST_NAME)).unwrap();
        let tb = fs::read(b.path().join(MANIFEST_NAME)).unwrap();
        assert_eq!(ta, tb);
        let ia = fs::read(a.path().join("vol_003_image.bin")).unwrap();
        let ib = fs::read(b.path().join("vol_003_image.bin")).unwrap();
        assert_eq!(ia, ib);
    }

    #[test]
    fn every_preset_fits_small_volumes() {
        for size in [16, 20, 24] {
            for &c in &Category::ALL {
                for &sc in &Scatter::ALL {
                    let spec = LesionSpec::preset(c, sc).fit_to([size; 3]);
                    for seed in 0..5 {
                        let (_, y) = gen_volume(seed, [size; 3], &spec).unwrap();
                        assert!(y.foreground_count() > 0, "{c} {sc} at {size}");
                    }
                }
            }
        }
    }
}
