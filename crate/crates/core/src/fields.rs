//! Dense containers for volumes, class probabilities, labels and patch
//! embeddings, plus the `.json` + `.bin` volume format.
//!
//! Every container is stored flat in row-major order with the last spatial
//! axis (D) fastest. Batched fields use the shape `(B, C, H, W, D)`, labels
//! drop the channel axis.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the per-voxel channel sum of a [`ProbabilityField`].
pub const SIMPLEX_TOL: f64 = 1e-5;

pub const ORDER_TAG: &str = "row-major-D-fastest";
pub const ENDIAN_TAG: &str = "little";

fn product(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Image intensities, `(B, C, H, W, D)`, stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeBatch {
    shape: [usize; 5],
    data: Vec<f32>,
}

impl VolumeBatch {
    pub fn new(shape: [usize; 5], data: Vec<f32>) -> Result<Self> {
        if data.len() != product(&shape) {
            return Err(Error::contract(format!(
                "volume data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 5]) -> Self {
        Self {
            shape,
            data: vec![0.0; product(&shape)],
        }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn offset(&self, b: usize, c: usize, x: usize, y: usize, z: usize) -> usize {
        let [_, nc, h, w, d] = self.shape;
        (((b * nc + c) * h + x) * w + y) * d + z
    }

    pub fn get(&self, b: usize, c: usize, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.offset(b, c, x, y, z)]
    }

    /// Copy out batch item `b` as a batch of one.
    pub fn item(&self, b: usize) -> VolumeBatch {
        let per = product(&self.shape[1..]);
        let mut shape = self.shape;
        shape[0] = 1;
        VolumeBatch {
            shape,
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }

    /// Concatenate batches along the batch axis.
    pub fn stack(items: &[VolumeBatch]) -> Result<VolumeBatch> {
        let first = items
            .first()
            .ok_or_else(|| Error::contract("cannot stack an empty list of volumes"))?;
        let mut shape = first.shape;
        shape[0] = 0;
        let mut data = Vec::new();
        for v in items {
            if v.shape[1..] != first.shape[1..] {
                return Err(Error::contract(format!(
                    "cannot stack volumes of shape {:?} and {:?}",
                    first.shape, v.shape
                )));
            }
            shape[0] += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        Ok(VolumeBatch { shape, data })
    }
}

/// Per-voxel class probabilities, `(B, C, H, W, D)`, held in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityField {
    shape: [usize; 5],
    data: Vec<f64>,
}

impl ProbabilityField {
    /// Validating constructor: values in `[0, 1]`, channel sums within
    /// [`SIMPLEX_TOL`] of one.
    pub fn new(shape: [usize; 5], data: Vec<f64>) -> Result<Self> {
        if data.len() != product(&shape) {
            return Err(Error::contract(format!(
                "probability data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if shape[1] == 0 {
            return Err(Error::contract("probability field needs at least one class"));
        }
        let field = Self { shape, data };
        for v in 0..field.num_voxels() {
            let mut sum = 0.0;
            for c in 0..shape[1] {
                let p = field.data[field.voxel_offset(v, c)];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::contract(format!(
                        "probability {p} outside [0, 1] at voxel {v}, class {c}"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::contract(format!(
                    "channel sum {sum} at voxel {v} deviates from 1"
                )));
            }
        }
        Ok(field)
    }

    /// Build from per-voxel rows, `rows[v][c]`, for a single-item batch of
    /// spatial shape `(n, 1, 1)`. Convenient for small hand-written cases.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.first().map(Vec::len).unwrap_or(0);
        let n = rows.len();
        let mut data = vec![0.0; n * classes];
        for (v, row) in rows.iter().enumerate() {
            if row.len() != classes {
                return Err(Error::contract("ragged probability rows"));
            }
            for (c, &p) in row.iter().enumerate() {
                data[c * n + v] = p;
            }
        }
        Self::new([1, classes, n, 1, 1], data)
    }

    /// Row-wise softmax of logits laid out like a probability field.
    pub fn softmax(shape: [usize; 5], logits: &[f64]) -> Self {
        let [b, c, h, w, d] = shape;
        let spatial = h * w * d;
        let mut data = vec![0.0; logits.len()];
        for bi in 0..b {
            let base = bi * c * spatial;
            for s in 0..spatial {
                let mut max = f64::NEG_INFINITY;
                for ci in 0..c {
                    max = max.max(logits[base + ci * spatial + s]);
                }
                let mut sum = 0.0;
                for ci in 0..c {
                    let e = (logits[base + ci * spatial + s] - max).exp();
                    data[base + ci * spatial + s] = e;
                    sum += e;
                }
                for ci in 0..c {
                    data[base + ci * spatial + s] /= sum;
                }
            }
        }
        Self { shape, data }
    }

    pub(crate) fn from_raw(shape: [usize; 5], data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), product(&shape));
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 5] {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    /// Total voxel count `B * H * W * D`.
    pub fn num_voxels(&self) -> usize {
        self.shape[0] * self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Flat offset of class `c` at voxel `v`, where `v` enumerates
    /// `(b, x, y, z)` in row-major order.
    #[inline]
    pub fn voxel_offset(&self, v: usize, c: usize) -> usize {
        let spatial = self.shape[2] * self.shape[3] * self.shape[4];
        let b = v / spatial;
        let s = v % spatial;
        (b * self.shape[1] + c) * spatial + s
    }

    /// Channel values at voxel `v`.
    pub fn voxel(&self, v: usize) -> Vec<f64> {
        (0..self.classes())
            .map(|c| self.data[self.voxel_offset(v, c)])
            .collect()
    }

    /// Per-voxel argmax as a label field; ties resolve to the lower class.
    pub fn argmax(&self) -> LabelField {
        let [b, _, h, w, d] = self.shape;
        let mut labels = vec![0u8; self.num_voxels()];
        for (v, out) in labels.iter_mut().enumerate() {
            let mut best = 0;
            let mut best_p = f64::NEG_INFINITY;
            for c in 0..self.classes() {
                let p = self.data[self.voxel_offset(v, c)];
                if p > best_p {
                    best_p = p;
                    best = c;
                }
            }
            *out = best as u8;
        }
        LabelField {
            shape: [b, h, w, d],
            data: labels,
        }
    }

    /// Copy out batch item `b` as a batch of one.
    pub fn item(&self, b: usize) -> ProbabilityField {
        let per = product(&self.shape[1..]);
        let mut shape = self.shape;
        shape[0] = 1;
        ProbabilityField {
            shape,
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }
}

/// Integer class per voxel, `(B, H, W, D)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelField {
    shape: [usize; 4],
    data: Vec<u8>,
}

impl LabelField {
    pub fn new(shape: [usize; 4], data: Vec<u8>, classes: usize) -> Result<Self> {
        if data.len() != product(&shape) {
            return Err(Error::contract(format!(
                "label data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        if let Some(bad) = data.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::contract(format!(
                "label {bad} outside class range 0..{classes}"
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0; product(&shape)],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn item(&self, b: usize) -> LabelField {
        let per = product(&self.shape[1..]);
        let mut shape = self.shape;
        shape[0] = 1;
        LabelField {
            shape,
            data: self.data[b * per..(b + 1) * per].to_vec(),
        }
    }

    pub fn stack(items: &[LabelField]) -> Result<LabelField> {
        let first = items
            .first()
            .ok_or_else(|| Error::contract("cannot stack an empty list of labels"))?;
        let mut shape = first.shape;
        shape[0] = 0;
        let mut data = Vec::new();
        for l in items {
            if l.shape[1..] != first.shape[1..] {
                return Err(Error::contract("cannot stack labels of different spatial shape"));
            }
            shape[0] += l.shape[0];
            data.extend_from_slice(&l.data);
        }
        Ok(LabelField { shape, data })
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&l| l != 0).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    Student,
    Teacher,
}

/// `P = k³` patch vectors of dimension `E`, one class per patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddings {
    vectors: Vec<f64>,
    dim: usize,
    patch_class: Vec<usize>,
    source: EmbeddingSource,
    normalized: bool,
}

impl PatchEmbeddings {
    pub fn new(
        vectors: Vec<f64>,
        dim: usize,
        patch_class: Vec<usize>,
        source: EmbeddingSource,
        normalized: bool,
    ) -> Result<Self> {
        if dim == 0 || vectors.len() != dim * patch_class.len() {
            return Err(Error::contract(format!(
                "{} embedding values do not form {} patches of dimension {}",
                vectors.len(),
                patch_class.len(),
                dim
            )));
        }
        if normalized {
            for (i, v) in vectors.chunks(dim).enumerate() {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-5 {
                    return Err(Error::contract(format!(
                        "patch {i} has norm {norm}, expected unit length"
                    )));
                }
            }
        }
        Ok(Self {
            vectors,
            dim,
            patch_class,
            source,
            normalized,
        })
    }

    /// Number of patches.
    pub fn len(&self) -> usize {
        self.patch_class.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patch_class.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn patch_class(&self) -> &[usize] {
        &self.patch_class
    }

    pub fn source(&self) -> EmbeddingSource {
        self.source
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Same patches and classes with replaced vectors (no renormalization).
    pub fn with_vectors(&self, vectors: Vec<f64>) -> Self {
        assert_eq!(vectors.len(), self.vectors.len());
        Self {
            vectors,
            dim: self.dim,
            patch_class: self.patch_class.clone(),
            source: self.source,
            normalized: false,
        }
    }
}

/// Either kind of volume that the binary format carries.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Float(VolumeBatch),
    Label(LabelField),
}

impl From<VolumeBatch> for Volume {
    fn from(v: VolumeBatch) -> Self {
        Volume::Float(v)
    }
}

impl From<LabelField> for Volume {
    fn from(v: LabelField) -> Self {
        Volume::Label(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    Float32,
    Uint8,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::Float32 => 4,
            Dtype::Uint8 => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub order: String,
    pub endian: String,
}

/// Sidecar header and payload paths for a volume named by `path`. A trailing
/// `.json` or `.bin` extension is ignored.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut bin = stem.into_os_string();
    bin.push(".bin");
    (PathBuf::from(json), PathBuf::from(bin))
}

pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    let (json_path, bin_path) = volume_paths(path);
    let (header, payload) = match volume {
        Volume::Float(v) => {
            let mut bytes = Vec::with_capacity(v.data.len() * 4);
            for x in &v.data {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
            (
                VolumeHeader {
                    shape: v.shape.to_vec(),
                    dtype: Dtype::Float32,
                    order: ORDER_TAG.into(),
                    endian: ENDIAN_TAG.into(),
                },
                bytes,
            )
        }
        Volume::Label(l) => (
            VolumeHeader {
                shape: l.shape.to_vec(),
                dtype: Dtype::Uint8,
                order: ORDER_TAG.into(),
                endian: ENDIAN_TAG.into(),
            },
            l.data.clone(),
        ),
    };
    if let Some(parent) = json_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let header_text =
        serde_json::to_string_pretty(&header).map_err(|e| Error::json(&json_path, e))?;
    fs::write(&json_path, header_text).map_err(|e| Error::io(&json_path, e))?;
    fs::write(&bin_path, payload).map_err(|e| Error::io(&bin_path, e))?;
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let (json_path, bin_path) = volume_paths(path);
    let header_text = fs::read_to_string(&json_path).map_err(|e| Error::Format {
        path: json_path.clone(),
        reason: format!("missing or unreadable sidecar header: {e}"),
    })?;
    let header: VolumeHeader =
        serde_json::from_str(&header_text).map_err(|e| Error::Format {
            path: json_path.clone(),
            reason: format!("malformed header: {e}"),
        })?;
    if header.order != ORDER_TAG || header.endian != ENDIAN_TAG {
        return Err(Error::Format {
            path: json_path,
            reason: format!(
                "unsupported layout order={} endian={}",
                header.order, header.endian
            ),
        });
    }
    let payload = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let count = product(&header.shape);
    if payload.len() != count * header.dtype.width() {
        return Err(Error::CorruptFile {
            path: bin_path,
            reason: format!(
                "payload has {} bytes, header shape {:?} needs {}",
                payload.len(),
                header.shape,
                count * header.dtype.width()
            ),
        });
    }
    let corrupt = |reason: &str| Error::CorruptFile {
        path: bin_path.clone(),
        reason: reason.to_string(),
    };
    match header.dtype {
        Dtype::Float32 => {
            let shape: [usize; 5] = header
                .shape
                .as_slice()
                .try_into()
                .map_err(|_| corrupt("float volumes must have 5 dimensions"))?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            VolumeBatch::new(shape, data)
                .map(Volume::Float)
                .map_err(|e| corrupt(&e.to_string()))
        }
        Dtype::Uint8 => {
            let shape: [usize; 4] = header
                .shape
                .as_slice()
                .try_into()
                .map_err(|_| corrupt("label volumes must have 4 dimensions"))?;
            Ok(Volume::Label(LabelField {
                shape,
                data: payload,
            }))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_float_volume_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f32> = (0..128).map(|i| (i as f32 * 0.37).sin()).collect();
        let v = VolumeBatch::new([2, 1, 4, 4, 4], data).unwrap();
        let path = dir.path().join("vol");
        write_volume(&v.clone().into(), &path).unwrap();
        let back = read_volume(&path).unwrap();
        let Volume::Float(back) = back else { panic!("expected float volume") };
        let a: Vec<u32> = v.data().iter().map(|x| x.to_bits()).collect();
        let b: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(a, b);
        assert_eq!(back.shape(), [2, 1, 4, 4, 4]);
    }

    #[test]
    fn truncated_payload_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let v = VolumeBatch::zeros([1, 1, 2, 2, 2]);
        let path = dir.path().join("vol");
        write_volume(&v.into(), &path).unwrap();
        let bin = dir.path().join("vol.bin");
        let bytes = fs::read(&bin).unwrap();
        fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::CorruptFile { .. })));
    }

    #[test]
    fn missing_sidecar_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("lonely.bin"), [0u8; 4]).unwrap();
        assert!(matches!(
            read_volume(&dir.path().join("lonely")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn d_axis_is_fastest() {
        let dir = tempfile::tempdir().unwrap();
        let header = r#"{"shape":[1,1,2,2,2],"dtype":"float32","order":"row-major-D-fastest","endian":"little"}"#;
        fs::write(dir.path().join("v.json"), header).unwrap();
        let payload: Vec<u8> = (0..8).flat_map(|i| (i as f32).to_le_bytes()).collect();
        fs::write(dir.path().join("v.bin"), payload).unwrap();
        let Volume::Float(v) = read_volume(&dir.path().join("v.bin")).unwrap() else {
            panic!()
        };
        assert_eq!(v.get(0, 0, 0, 0, 1), 1.0);
        assert_eq!(v.get(0, 0, 0, 1, 0), 2.0);
        assert_eq!(v.get(0, 0, 1, 0, 0), 4.0);
    }

    #[test]
    fn label_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let l = LabelField::new([1, 2, 2, 2], vec![0, 1, 1, 0, 0, 0, 1, 1], 2).unwrap();
        let path = dir.path().join("mask.json");
        write_volume(&l.clone().into(), &path).unwrap();
        assert_eq!(read_volume(&path).unwrap(), Volume::Label(l));
    }

    #[test]
    fn probability_field_rejects_bad_sums() {
        assert!(ProbabilityField::from_rows(&[vec![0.6, 0.5]]).is_err());
        assert!(ProbabilityField::from_rows(&[vec![0.5, 0.5 + 5e-6]]).is_ok());
        assert!(ProbabilityField::from_rows(&[vec![1.2, -0.2]]).is_err());
    }

    #[test]
    fn volume_rejects_nan_and_bad_length() {
        assert!(VolumeBatch::new([1, 1, 1, 1, 2], vec![0.0, f32::NAN]).is_err());
        assert!(VolumeBatch::new([1, 1, 1, 1, 2], vec![0.0]).is_err());
    }

    #[test]
    fn labels_respect_class_range() {
        assert!(LabelField::new([1, 1, 1, 2], vec![0, 2], 2).is_err());
    }

    #[test]
    fn embeddings_check_unit_norm() {
        let ok = PatchEmbeddings::new(vec![1.0, 0.0, 0.6, 0.8], 2, vec![0, 1], EmbeddingSource::Student, true);
        assert!(ok.is_ok());
        let bad = PatchEmbeddings::new(vec![1.0, 1.0], 2, vec![0], EmbeddingSource::Student, true);
        assert!(bad.is_err());
    }

    proptest::proptest! {
        #[test]
        fn write_read_identity(values in proptest::collection::vec(-1e6f32..1e6, 24)) {
            let dir = tempfile::tempdir().unwrap();
            let v = VolumeBatch::new([1, 2, 3, 2, 2], values).unwrap();
            let path = dir.path().join("p");
            write_volume(&v.clone().into(), &path).unwrap();
            proptest::prop_assert_eq!(read_volume(&path).unwrap(), Volume::Float(v));
        }
    }
}
