//! Entropy and gambling-softmax primitives shared by the consistency and
//! contrastive losses.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::fields::ProbabilityField;

/// Probabilities are clamped to `[EPS, 1 - EPS]` before any logarithm.
pub const EPS: f64 = 1e-7;

#[inline]
pub(crate) fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

/// Shannon entropy in nats of one voxel's class distribution.
#[inline]
pub fn entropy_of(p: &[f64]) -> f64 {
    -p.iter()
        .map(|&x| {
            let c = clamp_prob(x);
            c * c.ln()
        })
        .sum::<f64>()
}

/// Partial derivative of [`entropy_of`] with respect to one probability:
/// `-(ln p + 1)` inside the clamp range, zero where the clamp is active.
#[inline]
pub fn entropy_partial(p: f64) -> f64 {
    if p < EPS || p > 1.0 - EPS {
        0.0
    } else {
        -(p.ln() + 1.0)
    }
}

/// Per-voxel entropy, shape `(B, H, W, D)`, in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    shape: [usize; 4],
    values: Vec<f64>,
}

impl EntropyMap {
    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, b: usize, x: usize, y: usize, z: usize) -> f64 {
        let [_, h, w, d] = self.shape;
        self.values[((b * h + x) * w + y) * d + z]
    }
}

pub fn entropy(p: &ProbabilityField) -> EntropyMap {
    let [b, _, h, w, d] = p.shape();
    let values = (0..p.num_voxels())
        .map(|v| entropy_of(&p.voxel(v)))
        .collect();
    EntropyMap {
        shape: [b, h, w, d],
        values,
    }
}

/// Confidence-adjusted, temperature-scaled renormalization of `p`.
///
/// Per voxel, `p_h,c ∝ exp(ln p_c / T_g + (1 - C))` with `C = max_c p_c`.
/// The `(1 - C)` shift is a per-voxel constant and cancels in the
/// normalization; it is kept so the computation mirrors the formula.
pub fn gambling_softmax(p: &ProbabilityField, temperature: f64) -> Result<ProbabilityField> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::param(format!(
            "gambling temperature must be positive, got {temperature}"
        )));
    }
    let classes = p.classes();
    let mut out = vec![0.0; p.data().len()];
    let mut logits = vec![0.0; classes];
    for v in 0..p.num_voxels() {
        let row = p.voxel(v);
        let confidence = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for (l, &pc) in logits.iter_mut().zip(&row) {
            *l = clamp_prob(pc).ln() / temperature + (1.0 - confidence);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for c in 0..classes {
            out[p.voxel_offset(v, c)] = (logits[c] - max).exp() / sum;
        }
    }
    Ok(ProbabilityField::from_raw(p.shape(), out))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceAxis {
    H,
    W,
    D,
}

impl SliceAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "h" | "0" => Ok(SliceAxis::H),
            "w" | "1" => Ok(SliceAxis::W),
            "d" | "2" => Ok(SliceAxis::D),
            other => Err(Error::param(format!("axis must be one of H, W, D; got {other}"))),
        }
    }

    fn tag(self) -> &'static str {
        match self {
            SliceAxis::H => "h",
            SliceAxis::W => "w",
            SliceAxis::D => "d",
        }
    }
}

/// Write one CSV per slice along `axis` into `dir`, named
/// `slice_<axis>_<index>.csv`. Rows run over the first remaining axis.
/// Batches with more than one item get a `batch_<b>` subdirectory each.
pub fn export_entropy_slices(map: &EntropyMap, axis: SliceAxis, dir: &Path) -> Result<Vec<PathBuf>> {
    let [nb, h, w, d] = map.shape;
    let mut written = Vec::new();
    for b in 0..nb {
        let out_dir = if nb == 1 {
            dir.to_path_buf()
        } else {
            dir.join(format!("batch_{b}"))
        };
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let (n_slices, rows, cols) = match axis {
            SliceAxis::H => (h, w, d),
            SliceAxis::W => (w, h, d),
            SliceAxis::D => (d, h, w),
        };
        for s in 0..n_slices {
            let path = out_dir.join(format!("slice_{}_{}.csv", axis.tag(), s));
            let mut text = String::with_capacity(rows * cols * 10);
            for r in 0..rows {
                let line: Vec<String> = (0..cols)
                    .map(|c| {
                        let (x, y, z) = match axis {
                            SliceAxis::H => (s, r, c),
                            SliceAxis::W => (r, s, c),
                            SliceAxis::D => (r, c, s),
                        };
                        format!("{}", map.get(b, x, y, z))
                    })
                    .collect();
                text.push_str(&line.join(","));
                text.push('\n');
            }
            let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            file.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn entropy_anchor_values() {
        assert!(entropy_of(&[1.0, 0.0]) <= 2e-6);
        assert!(close(entropy_of(&[0.5, 0.5]), std::f64::consts::LN_2, 1e-12));
        let direct = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!(close(entropy_of(&[0.9, 0.1]), direct, 1e-12));
        assert!(close(entropy_of(&[0.9, 0.1]), 0.325083, 1e-6));
    }

    #[test]
    fn gambling_softmax_closed_forms() {
        let p = ProbabilityField::from_rows(&[vec![0.5, 0.5], vec![0.9, 0.1]]).unwrap();
        let h = gambling_softmax(&p, 2.0).unwrap();
        assert!(close(h.voxel(0)[0], 0.5, 1e-12));
        assert!(close(h.voxel(1)[0], 0.75, 1e-12));
        assert!(close(h.voxel(1)[1], 0.25, 1e-12));

        let same = gambling_softmax(&p, 1.0).unwrap();
        for (a, b) in same.data().iter().zip(p.data()) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn gambling_softmax_rejects_bad_temperature() {
        let p = ProbabilityField::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(gambling_softmax(&p, 0.0).is_err());
        assert!(gambling_softmax(&p, -1.0).is_err());
    }

    #[test]
    fn slice_axis_parse() {
        assert_eq!(SliceAxis::parse("W").unwrap(), SliceAxis::W);
        assert!(SliceAxis::parse("t").is_err());
    }

    fn uniform_field(shape: [usize; 3], p0: f64) -> ProbabilityField {
        let n = shape.iter().product::<usize>();
        let mut data = vec![p0; n];
        data.extend(std::iter::repeat(1.0 - p0).take(n));
        ProbabilityField::new([1, 2, shape[0], shape[1], shape[2]], data).unwrap()
    }

    fn read_csv(path: &Path) -> Vec<Vec<f64>> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect()
    }

    #[test]
    fn export_uniform_and_one_hot() {
        let dir = tempfile::tempdir().unwrap();
        let files = export_entropy_slices(&entropy(&uniform_field([2, 3, 4], 0.5)), SliceAxis::H, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        for f in &files {
            let rows = read_csv(f);
            assert_eq!(rows.len(), 3);
            assert!(rows.iter().flatten().all(|&v| close(v, std::f64::consts::LN_2, 1e-12)));
        }
        let dir = tempfile::tempdir().unwrap();
        let files = export_entropy_slices(&entropy(&uniform_field([2, 3, 4], 1.0)), SliceAxis::D, dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        for f in &files {
            assert!(read_csv(f).iter().flatten().all(|&v| v < 2e-6));
        }
    }

    #[test]
    fn export_cells_match_entropy() {
        let dims = [3, 2, 4];
        let n = 24;
        let p0: Vec<f64> = (0..n).map(|i| (i as f64 * 0.731).sin().abs()).collect();
        let mut data = p0.clone();
        data.extend(p0.iter().map(|p| 1.0 - p));
        let p = ProbabilityField::new([1, 2, dims[0], dims[1], dims[2]], data).unwrap();
        let map = entropy(&p);
        let dir = tempfile::tempdir().unwrap();
        export_entropy_slices(&map, SliceAxis::W, dir.path()).unwrap();
        let rows = read_csv(&dir.path().join("slice_w_1.csv"));
        // slice along W at y = 1: rows over H, columns over D
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2][3], map.get(0, 2, 1, 3));
        let v = (2 * 2 + 1) * 4 + 3;
        assert!(close(rows[2][3], entropy_of(&[p0[v], 1.0 - p0[v]]), 1e-15));
    }

    fn simplex(classes: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(0.0f64..1.0, classes).prop_filter_map("nonzero", |raw| {
            let s: f64 = raw.iter().sum();
            (s > 1e-9).then(|| raw.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn entropy_bounds(p in (2usize..5).prop_flat_map(simplex)) {
            let h = entropy_of(&p);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (p.len() as f64).ln() + 2e-6);
        }

        #[test]
        fn gambling_preserves_simplex_and_argmax(p in (2usize..5).prop_flat_map(simplex), t in 0.05f64..5.0) {
            let field = ProbabilityField::from_rows(&[p.clone()]).unwrap();
            let out = gambling_softmax(&field, t).unwrap();
            let row = out.voxel(0);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let argmax = |r: &[f64]| {
                let mut best = 0;
                for (i, v) in r.iter().enumerate() {
                    if *v > r[best] { best = i; }
                }
                best
            };
            // ties in the input can be broken either way after clamping
            let top = p[argmax(&p)];
            prop_assert!((p[argmax(&row)] - top).abs() < 1e-9 || argmax(&row) == argmax(&p));
        }
    }
}
