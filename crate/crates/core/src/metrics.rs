//! Overlap and surface-distance metrics for binary masks.
//!
//! Any nonzero label counts as foreground. Surfaces are the foreground voxels
//! with at least one 6-neighbour that is background or outside the volume.
//! HD95 and ASD are taken over the pooled directed distances in both
//! directions, in voxel units.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::LabelField;
use crate::synthvol::{Category, Scatter};

fn check_same(a: &LabelField, b: &LabelField) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::contract(format!(
            "mask shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `(dice, iou)`; two empty masks score `(1, 1)`.
pub fn dice_iou(a: &LabelField, b: &LabelField) -> Result<(f64, f64)> {
    check_same(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x != 0, y != 0);
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        return Ok((1.0, 1.0));
    }
    let union = na + nb - inter;
    Ok((
        2.0 * inter as f64 / (na + nb) as f64,
        inter as f64 / union as f64,
    ))
}

pub fn surface_voxels(mask: &[u8], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let [h, w, d] = dims;
    let at = |x: usize, y: usize, z: usize| mask[(x * w + y) * d + z] != 0;
    let mut out = Vec::new();
    for x in 0..h {
        for y in 0..w {
            for z in 0..d {
                if !at(x, y, z) {
                    continue;
                }
                let boundary = x == 0
                    || y == 0
                    || z == 0
                    || x + 1 == h
                    || y + 1 == w
                    || z + 1 == d
                    || !at(x - 1, y, z)
                    || !at(x + 1, y, z)
                    || !at(x, y - 1, z)
                    || !at(x, y + 1, z)
                    || !at(x, y, z - 1)
                    || !at(x, y, z + 1);
                if boundary {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn sq_dist(a: [usize; 3], b: [usize; 3]) -> i64 {
    (0..3).map(|i| (a[i] as i64 - b[i] as i64).pow(2)).sum()
}

/// Squared distance from each point of `from` to its nearest point of `to`,
/// by exhaustive search.
pub fn nearest_sq_brute(from: &[[usize; 3]], to: &[[usize; 3]]) -> Vec<i64> {
    from.iter()
        .map(|&p| to.iter().map(|&q| sq_dist(p, q)).min().unwrap_or(i64::MAX))
        .collect()
}

const FAR: i64 = i64::MAX / 4;

/// Exact 1D squared distance transform (lower envelope of parabolas).
fn edt_line(f: &[i64], out: &mut [i64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if f[q] >= FAR {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let s = ((f[q] + (q * q) as i64) - (f[p] + (p * p) as i64)) as f64
                        / (2 * (q - p)) as f64;
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = FAR);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        *o = (q as i64 - v[k] as i64).pow(2) + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest site.
pub fn squared_edt(sites: &[[usize; 3]], dims: [usize; 3]) -> Vec<i64> {
    let [h, w, d] = dims;
    let mut g = vec![FAR; h * w * d];
    for s in sites {
        g[(s[0] * w + s[1]) * d + s[2]] = 0;
    }
    let strides = [w * d, d, 1];
    let mut v = Vec::new();
    let mut z = Vec::new();
    for axis in [2, 1, 0] {
        let n = dims[axis];
        let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
        let mut line = vec![0i64; n];
        let mut out = vec![0i64; n];
        for i in 0..dims[others[0]] {
            for j in 0..dims[others[1]] {
                let base = i * strides[others[0]] + j * strides[others[1]];
                for t in 0..n {
                    line[t] = g[base + t * strides[axis]];
                }
                edt_line(&line, &mut out, &mut v, &mut z);
                for t in 0..n {
                    g[base + t * strides[axis]] = out[t];
                }
            }
        }
    }
    g
}

pub fn nearest_sq_edt(from: &[[usize; 3]], to: &[[usize; 3]], dims: [usize; 3]) -> Vec<i64> {
    if to.is_empty() {
        return vec![i64::MAX; from.len()];
    }
    let g = squared_edt(to, dims);
    from.iter().map(|p| g[(p[0] * dims[1] + p[1]) * dims[2] + p[2]]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurfaceMethod {
    Brute,
    Edt,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistances {
    pub hd95: f64,
    pub asd: f64,
    /// At least one mask was empty; both values hold the volume diagonal.
    pub collapsed: bool,
}

/// Percentile `q ∈ [0, 100]` of ascending `sorted` with linear interpolation
/// between closest ranks.
pub fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q / 100.0 * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + (sorted[hi] - sorted[lo]) * frac
        }
    }
}

fn single(mask: &LabelField) -> Result<[usize; 3]> {
    if mask.shape()[0] != 1 {
        return Err(Error::contract("surface distances take one volume at a time"));
    }
    Ok(mask.spatial())
}

pub fn surface_distances(a: &LabelField, b: &LabelField) -> Result<SurfaceDistances> {
    surface_distances_with(a, b, SurfaceMethod::Edt)
}

pub fn surface_distances_with(a: &LabelField, b: &LabelField, method: SurfaceMethod) -> Result<SurfaceDistances> {
    check_same(a, b)?;
    let dims = single(a)?;
    let sa = surface_voxels(a.data(), dims);
    let sb = surface_voxels(b.data(), dims);
    if sa.is_empty() || sb.is_empty() {
        let diag = dims.iter().map(|&v| (v * v) as f64).sum::<f64>().sqrt();
        return Ok(SurfaceDistances {
            hd95: diag,
            asd: diag,
            collapsed: true,
        });
    }
    let (ab, ba) = match method {
        SurfaceMethod::Brute => (nearest_sq_brute(&sa, &sb), nearest_sq_brute(&sb, &sa)),
        SurfaceMethod::Edt => (nearest_sq_edt(&sa, &sb, dims), nearest_sq_edt(&sb, &sa, dims)),
    };
    // sorted before any reduction so both argument orders agree bitwise
    let mut pooled: Vec<f64> = ab.iter().chain(&ba).map(|&s| (s as f64).sqrt()).collect();
    pooled.sort_by(f64::total_cmp);
    let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;
    Ok(SurfaceDistances {
        hd95: percentile_linear(&pooled, 95.0),
        asd,
        collapsed: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub dice: f64,
    pub iou: f64,
    pub hd95: f64,
    pub asd: f64,
    pub collapsed: bool,
}

pub fn score(pred: &LabelField, truth: &LabelField) -> Result<Scores> {
    let (dice, iou) = dice_iou(pred, truth)?;
    let s = surface_distances(pred, truth)?;
    Ok(Scores {
        dice,
        iou,
        hd95: s.hd95,
        asd: s.asd,
        collapsed: s.collapsed,
    })
}

impl Scores {
    /// Mean of each metric; `collapsed` is set if any input was.
    pub fn mean(all: &[Scores]) -> Option<Scores> {
        if all.is_empty() {
            return None;
        }
        let n = all.len() as f64;
        Some(Scores {
            dice: all.iter().map(|s| s.dice).sum::<f64>() / n,
            iou: all.iter().map(|s| s.iou).sum::<f64>() / n,
            hd95: all.iter().map(|s| s.hd95).sum::<f64>() / n,
            asd: all.iter().map(|s| s.asd).sum::<f64>() / n,
            collapsed: all.iter().any(|s| s.collapsed),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub volume_id: String,
    pub category: Category,
    pub scatter: Scatter,
    #[serde(flatten)]
    pub scores: Scores,
}

pub const REPORT_HEADER: &str = "volume_id,category,scatter,dice,iou,hd95,asd";

pub fn report_csv(rows: &[VolumeMetrics]) -> String {
    let mut text = String::from(REPORT_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.volume_id, r.category, r.scatter, r.scores.dice, r.scores.iou, r.scores.hd95, r.scores.asd
        ));
    }
    text
}

pub fn write_report_csv(rows: &[VolumeMetrics], path: &Path) -> Result<()> {
    fs::write(path, report_csv(rows)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> LabelField {
        let mut data = vec![0u8; dims.iter().product()];
        for p in on {
            data[(p[0] * dims[1] + p[1]) * dims[2] + p[2]] = 1;
        }
        LabelField::new([1, dims[0], dims[1], dims[2]], data, 2).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], density: f64) -> LabelField {
        let data = (0..dims.iter().product::<usize>()).map(|_| rng.gen_bool(density) as u8).collect();
        LabelField::new([1, dims[0], dims[1], dims[2]], data, 2).unwrap()
    }

    #[test]
    fn dice_iou_examples() {
        let dims = [4, 4, 1];
        let a: Vec<[usize; 3]> = (0..8).map(|i| [i / 4, i % 4, 0]).collect();
        let b: Vec<[usize; 3]> = (4..12).map(|i| [i / 4, i % 4, 0]).collect();
        let (d, i) = dice_iou(&mask(dims, &a), &mask(dims, &b)).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
        assert!((i - 4.0 / 12.0).abs() < 1e-15);
        assert_eq!(dice_iou(&mask(dims, &a), &mask(dims, &a)).unwrap(), (1.0, 1.0));
        assert_eq!(dice_iou(&mask(dims, &a[..4]), &mask(dims, &a[4..])).unwrap(), (0.0, 0.0));
        assert_eq!(dice_iou(&mask(dims, &[]), &mask(dims, &[])).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn dice_shape_mismatch() {
        assert!(dice_iou(&mask([2, 2, 2], &[]), &mask([2, 2, 3], &[])).is_err());
    }

    #[test]
    fn single_voxel_distances() {
        let dims = [4, 5, 1];
        let s = surface_distances(&mask(dims, &[[0, 0, 0]]), &mask(dims, &[[3, 4, 0]])).unwrap();
        assert_eq!(s.hd95, 5.0);
        assert_eq!(s.asd, 5.0);
        assert!(!s.collapsed);
    }

    #[test]
    fn identical_masks_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random_mask(&mut rng, [6, 6, 6], 0.3);
        let s = surface_distances(&m, &m).unwrap();
        assert_eq!((s.hd95, s.asd), (0.0, 0.0));
    }

    #[test]
    fn empty_mask_gives_diagonal_sentinel() {
        let dims = [3, 4, 12];
        let s = surface_distances(&mask(dims, &[]), &mask(dims, &[[1, 1, 1]])).unwrap();
        assert!(s.collapsed);
        assert_eq!(s.hd95, 13.0);
        assert_eq!(s.asd, 13.0);
    }

    #[test]
    fn dilation_bounds_asd() {
        let dims = [12, 12, 12];
        let mut inner = Vec::new();
        let mut outer = Vec::new();
        for x in 0..12usize {
            for y in 0..12usize {
                for z in 0..12usize {
                    let r2 = [x, y, z].iter().map(|&c| (c as f64 - 5.5).powi(2)).sum::<f64>();
                    if r2 <= 9.0 {
                        inner.push([x, y, z]);
                    }
                }
            }
        }
        let im = mask(dims, &inner);
        for x in 0..12usize {
            for y in 0..12usize {
                for z in 0..12usize {
                    let near = inner.iter().any(|p| sq_dist(*p, [x, y, z]) <= 1);
                    if near {
                        outer.push([x, y, z]);
                    }
                }
            }
        }
        let s = surface_distances(&im, &mask(dims, &outer)).unwrap();
        assert!(s.asd <= 1.0 + 1e-12, "asd {}", s.asd);
    }

    #[test]
    fn percentile_matches_linear_rule() {
        let v = [1.0, 2.0, 3.0, 4.0, 10.0];
        assert_eq!(percentile_linear(&v, 0.0), 1.0);
        assert_eq!(percentile_linear(&v, 100.0), 10.0);
        assert_eq!(percentile_linear(&v, 50.0), 3.0);
        // position 0.95 * 4 = 3.8
        assert!((percentile_linear(&v, 95.0) - (4.0 + 0.8 * 6.0)).abs() < 1e-12);
    }

    #[test]
    fn edt_matches_brute_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let dims = [rng.gen_range(1..10), rng.gen_range(1..10), rng.gen_range(1..10)];
            let a = random_mask(&mut rng, dims, 0.2);
            let b = random_mask(&mut rng, dims, 0.05);
            let sa = surface_voxels(a.data(), dims);
            let sb = surface_voxels(b.data(), dims);
            if sb.is_empty() {
                continue;
            }
            assert_eq!(nearest_sq_brute(&sa, &sb), nearest_sq_edt(&sa, &sb, dims));
        }
    }

    #[test]
    fn surface_of_solid_cube() {
        let on: Vec<[usize; 3]> = (0..27).map(|i| [1 + i / 9, 1 + (i / 3) % 3, 1 + i % 3]).collect();
        let s = surface_voxels(mask([5, 5, 5], &on).data(), [5, 5, 5]);
        assert_eq!(s.len(), 26);
        // touching the border counts as surface
        let full = vec![1u8; 27];
        assert_eq!(surface_voxels(&full, [3, 3, 3]).len(), 26);
    }

    #[test]
    fn csv_layout() {
        let row = VolumeMetrics {
            volume_id: "vol_000".into(),
            category: Category::Small,
            scatter: Scatter::NonScattered,
            scores: Scores { dice: 0.5, iou: 0.25, hd95: 2.0, asd: 1.0, collapsed: false },
        };
        let text = report_csv(&[row]);
        assert_eq!(text, "volume_id,category,scatter,dice,iou,hd95,asd\nvol_000,small,non-scattered,0.5,0.25,2,1\n");
    }

    proptest::proptest! {
        #[test]
        fn dice_dominates_iou(bits_a in proptest::collection::vec(0u8..2, 27), bits_b in proptest::collection::vec(0u8..2, 27)) {
            let a = LabelField::new([1, 3, 3, 3], bits_a, 2).unwrap();
            let b = LabelField::new([1, 3, 3, 3], bits_b, 2).unwrap();
            let (d, i) = dice_iou(&a, &b).unwrap();
            proptest::prop_assert!(d >= i);
            proptest::prop_assert!((0.0..=1.0).contains(&d) && (0.0..=1.0).contains(&i));
            let s1 = surface_distances(&a, &b).unwrap();
            let s2 = surface_distances(&b, &a).unwrap();
            proptest::prop_assert_eq!(s1.hd95.to_bits(), s2.hd95.to_bits());
            proptest::prop_assert_eq!(s1.asd.to_bits(), s2.asd.to_bits());
        }
    }
}
