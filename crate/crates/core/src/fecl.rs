//! Focal entropy-aware patch contrastive loss.
//!
//! A projection-head feature grid is cut into `k × k × k` patches whose mean
//! vectors are L2-normalized. For anchor `i` with same-class positives `P(i)`
//! and different-class negatives `N(i)` (both among student patches), and
//! hard negatives `H(i)` drawn from teacher patches,
//!
//! ```text
//! D(i,k) = exp(S_ik) + Σ_{q∈N(i)} F⁻_iq · [exp(S_iq) + mean_{l∈H(i)} exp(S_il)]
//! ℓ(i)   = 1/|P(i)| Σ_{k∈P(i)} F⁺_ik · (ln D(i,k) − S_ik)
//! ```
//!
//! with `S = cos/τ`, `F⁺ = (1 − s̃)^γ · exp(H_i)`, `F⁻ = s̃^γ` and
//! `s̃ = clamp(cos, 0, 1)`. The loss is the mean of `ℓ(i)` over anchors with at
//! least one positive. Focal weights, patch entropies and the hard-negative
//! selection are frozen per step: the gradient treats them as constants.

use crate::error::{Error, Result};
use crate::fields::{EmbeddingSource, PatchEmbeddings, ProbabilityField};
use crate::uncertainty::{entropy_of, gambling_softmax};

/// Maps a `k³` patch partition onto a spatial grid, replicating edge voxels
/// when a side is not divisible by `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchLayout {
    pub k: usize,
    pub spatial: [usize; 3],
    /// Patch side length per axis, `ceil(dim / k)`.
    pub side: [usize; 3],
}

impl PatchLayout {
    pub fn new(spatial: [usize; 3], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::param("patch grid size k must be positive"));
        }
        if spatial.iter().any(|&d| d == 0) {
            return Err(Error::contract("cannot partition an empty grid"));
        }
        let side = spatial.map(|d| d.div_ceil(k));
        Ok(Self { k, spatial, side })
    }

    pub fn num_patches(&self) -> usize {
        self.k * self.k * self.k
    }

    fn voxels_per_patch(&self) -> usize {
        self.side.iter().product()
    }

    /// Visit the (possibly replicated) source voxels of patch `p` as flat
    /// spatial offsets.
    fn for_each_voxel(&self, p: usize, mut f: impl FnMut(usize)) {
        let k = self.k;
        let (pi, pj, pk) = (p / (k * k), (p / k) % k, p % k);
        let [h, w, d] = self.spatial;
        let [sx, sy, sz] = self.side;
        for a in 0..sx {
            let x = (pi * sx + a).min(h - 1);
            for b in 0..sy {
                let y = (pj * sy + b).min(w - 1);
                for c in 0..sz {
                    let z = (pk * sz + c).min(d - 1);
                    f((x * w + y) * d + z);
                }
            }
        }
    }

    /// Per-patch mean of a channel-major grid `(E, H, W, D)`, returned as
    /// `P × E` row vectors.
    pub fn patch_means(&self, grid: &[f64], channels: usize) -> Result<Vec<f64>> {
        let spatial: usize = self.spatial.iter().product();
        if grid.len() != channels * spatial {
            return Err(Error::contract(format!(
                "feature grid of length {} is not {channels} channels of {:?}",
                grid.len(),
                self.spatial
            )));
        }
        let inv = 1.0 / self.voxels_per_patch() as f64;
        let mut out = vec![0.0; self.num_patches() * channels];
        for p in 0..self.num_patches() {
            for e in 0..channels {
                let plane = &grid[e * spatial..(e + 1) * spatial];
                let mut sum = 0.0;
                self.for_each_voxel(p, |s| sum += plane[s]);
                out[p * channels + e] = sum * inv;
            }
        }
        Ok(out)
    }

    /// Adjoint of [`PatchLayout::patch_means`].
    pub fn patch_means_backward(&self, grad_means: &[f64], channels: usize) -> Vec<f64> {
        let spatial: usize = self.spatial.iter().product();
        let inv = 1.0 / self.voxels_per_patch() as f64;
        let mut grid = vec![0.0; channels * spatial];
        for p in 0..self.num_patches() {
            for e in 0..channels {
                let g = grad_means[p * channels + e] * inv;
                let plane = &mut grid[e * spatial..(e + 1) * spatial];
                self.for_each_voxel(p, |s| plane[s] += g);
            }
        }
        grid
    }

    /// Mean of a scalar map per patch.
    pub fn patch_scalar_means(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.patch_means(values, 1)
    }
}

/// L2-normalize rows of `dim` values. Returns the unit rows and the norms
/// (floored at `1e-12`).
pub fn normalize_rows(rows: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = rows.to_vec();
    let mut norms = Vec::with_capacity(rows.len() / dim);
    for chunk in out.chunks_mut(dim) {
        let n = chunk.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        chunk.iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    (out, norms)
}

/// Adjoint of [`normalize_rows`]: `(g − z (z·g)) / ‖m‖` per row.
pub fn normalize_rows_backward(grad_unit: &[f64], unit: &[f64], norms: &[f64], dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; grad_unit.len()];
    for (r, n) in norms.iter().enumerate() {
        let g = &grad_unit[r * dim..(r + 1) * dim];
        let z = &unit[r * dim..(r + 1) * dim];
        let dot: f64 = g.iter().zip(z).map(|(a, b)| a * b).sum();
        for e in 0..dim {
            out[r * dim + e] = (g[e] - z[e] * dot) / n;
        }
    }
    out
}

/// Patch means of a `(E, H, W, D)` grid, L2-normalized.
pub fn partition_average(grid: &[f64], channels: usize, spatial: [usize; 3], k: usize) -> Result<Vec<f64>> {
    let layout = PatchLayout::new(spatial, k)?;
    let means = layout.patch_means(grid, channels)?;
    Ok(normalize_rows(&means, channels).0)
}

/// Patch classes from a single-volume label grid `(H, W, D)`.
///
/// Binary labels: class 1 when the foreground fraction exceeds `threshold`.
/// More classes: majority vote, ties to the lower class.
pub fn patch_labels(
    mask: &[u8],
    spatial: [usize; 3],
    k: usize,
    threshold: f64,
    classes: usize,
) -> Result<Vec<usize>> {
    let layout = PatchLayout::new(spatial, k)?;
    if mask.len() != spatial.iter().product::<usize>() {
        return Err(Error::contract("mask length does not match its spatial shape"));
    }
    let per = layout.voxels_per_patch() as f64;
    let mut out = Vec::with_capacity(layout.num_patches());
    for p in 0..layout.num_patches() {
        if classes <= 2 {
            let mut fg = 0usize;
            layout.for_each_voxel(p, |s| fg += (mask[s] != 0) as usize);
            out.push((fg as f64 / per > threshold) as usize);
        } else {
            let mut votes = vec![0usize; classes];
            layout.for_each_voxel(p, |s| votes[(mask[s] as usize).min(classes - 1)] += 1);
            let mut best = 0;
            for (c, &n) in votes.iter().enumerate() {
                if n > votes[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Mean gambling-softmax entropy of each patch of a single-item probability
/// field, optionally divided by `ln C`.
pub fn patch_gambling_entropy(
    p: &ProbabilityField,
    layout: &PatchLayout,
    temperature: f64,
    normalized: bool,
) -> Result<Vec<f64>> {
    if p.shape()[0] != 1 || p.spatial() != layout.spatial {
        return Err(Error::contract("patch entropy expects one volume matching the layout"));
    }
    let adjusted = gambling_softmax(p, temperature)?;
    let scale = if normalized {
        1.0 / (p.classes() as f64).ln()
    } else {
        1.0
    };
    let values: Vec<f64> = (0..adjusted.num_voxels())
        .map(|v| entropy_of(&adjusted.voxel(v)) * scale)
        .collect();
    layout.patch_scalar_means(&values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub n: usize,
    pub tau: f64,
    /// Cosine similarities in `[-1, 1]`, row-major `n × n`.
    pub raw: Vec<f64>,
    /// `raw / τ`.
    pub scaled: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn raw_at(&self, i: usize, j: usize) -> f64 {
        self.raw[i * self.n + j]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.scaled[i * self.n + j]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
    }
}

pub fn similarity(z: &PatchEmbeddings, tau: f64) -> Result<SimilarityMatrix> {
    if !(tau > 0.0) {
        return Err(Error::param(format!("temperature must be positive, got {tau}")));
    }
    let n = z.len();
    let mut raw = vec![0.0; n * n];
    let mut scaled = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let c = cosine(z.vector(i), z.vector(j));
            let s = dot(z.vector(i), z.vector(j)) / tau;
            raw[i * n + j] = c;
            raw[j * n + i] = c;
            scaled[i * n + j] = s;
            scaled[j * n + i] = s;
        }
    }
    Ok(SimilarityMatrix { n, tau, raw, scaled })
}

/// Focal weight for a positive pair: `(1 − s̃)^γ · exp(h)`.
pub fn positive_weight(cos: f64, gamma: f64, h: f64) -> f64 {
    (1.0 - cos.clamp(0.0, 1.0)).powf(gamma) * h.exp()
}

/// Focal weight for a negative pair: `s̃^γ`.
pub fn negative_weight(cos: f64, gamma: f64) -> f64 {
    cos.clamp(0.0, 1.0).powf(gamma)
}

/// Dense `n × n` focal weights; `f_pos` is zero off same-class pairs and
/// `f_neg` zero off different-class pairs. The diagonal is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct FocalWeights {
    pub n: usize,
    pub gamma: f64,
    pub f_pos: Vec<f64>,
    pub f_neg: Vec<f64>,
}

pub fn focal_weights(
    sim: &SimilarityMatrix,
    classes: &[usize],
    gamma: f64,
    h_patch: &[f64],
) -> Result<FocalWeights> {
    if !(gamma >= 0.0) {
        return Err(Error::param(format!("focusing parameter must be >= 0, got {gamma}")));
    }
    let n = sim.n;
    if classes.len() != n || h_patch.len() != n {
        return Err(Error::contract("classes and patch entropies must have one entry per patch"));
    }
    let mut f_pos = vec![0.0; n * n];
    let mut f_neg = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let c = sim.raw_at(i, j);
            if classes[i] == classes[j] {
                f_pos[i * n + j] = positive_weight(c, gamma, h_patch[i]);
            } else {
                f_neg[i * n + j] = negative_weight(c, gamma);
            }
        }
    }
    Ok(FocalWeights { n, gamma, f_pos, f_neg })
}

/// Per student anchor, up to `K` teacher patches of a different class with
/// the largest cosine similarity, sorted descending.
#[derive(Debug, Clone, PartialEq)]
pub struct HardNegativeSet {
    pub per_anchor: Vec<Vec<(usize, f64)>>,
}

pub fn topk_hard_negatives(
    student: &PatchEmbeddings,
    teacher: &PatchEmbeddings,
    k: usize,
) -> Result<HardNegativeSet> {
    if student.dim() != teacher.dim() {
        return Err(Error::contract("student and teacher embeddings differ in dimension"));
    }
    let per_anchor = (0..student.len())
        .map(|i| {
            let anchor_class = student.patch_class()[i];
            let mut cands: Vec<(usize, f64)> = (0..teacher.len())
                .filter(|&l| teacher.patch_class()[l] != anchor_class)
                .map(|l| (l, cosine(student.vector(i), teacher.vector(l))))
                .collect();
            cands.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            cands.truncate(k);
            cands
        })
        .collect();
    Ok(HardNegativeSet { per_anchor })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeclParams {
    pub tau: f64,
    pub gamma: f64,
    pub top_k: usize,
}

impl Default for FeclParams {
    fn default() -> Self {
        Self {
            tau: 0.6,
            gamma: 0.5,
            top_k: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeclOutput {
    pub loss: f64,
    /// No anchor had both a positive and a negative; the loss is zero.
    pub degenerate: bool,
    /// Anchors with at least one positive.
    pub anchors: usize,
}

/// Everything held fixed during one loss/gradient evaluation: classes,
/// focal weights and hard-negative selection.
#[derive(Debug, Clone)]
pub struct FeclPlan {
    dim: usize,
    tau: f64,
    classes: Vec<usize>,
    weights: FocalWeights,
    hard: HardNegativeSet,
    teacher: Vec<f64>,
    /// Multiplier on the hard-negative term; 1 in normal use.
    pub hard_negative_scale: f64,
}

impl FeclPlan {
    pub fn new(
        student: &PatchEmbeddings,
        teacher: &PatchEmbeddings,
        h_patch: &[f64],
        params: &FeclParams,
    ) -> Result<Self> {
        if student.len() < 2 {
            return Err(Error::contract("contrastive loss needs at least two patches"));
        }
        let sim = similarity(student, params.tau)?;
        let weights = focal_weights(&sim, student.patch_class(), params.gamma, h_patch)?;
        let hard = topk_hard_negatives(student, teacher, params.top_k)?;
        Ok(Self {
            dim: student.dim(),
            tau: params.tau,
            classes: student.patch_class().to_vec(),
            weights,
            hard,
            teacher: teacher.vectors().to_vec(),
            hard_negative_scale: 1.0,
        })
    }

    pub fn weights(&self) -> &FocalWeights {
        &self.weights
    }

    pub fn hard_negatives(&self) -> &HardNegativeSet {
        &self.hard
    }

    pub fn loss(&self, z: &[f64]) -> FeclOutput {
        self.evaluate(z, None)
    }

    /// Loss and gradient with respect to the student unit vectors `z`
    /// (`P × E`, row-major).
    pub fn loss_and_grad(&self, z: &[f64]) -> (FeclOutput, Vec<f64>) {
        let mut grad = vec![0.0; z.len()];
        let out = self.evaluate(z, Some(&mut grad));
        (out, grad)
    }

    fn evaluate(&self, z: &[f64], mut grad: Option<&mut Vec<f64>>) -> FeclOutput {
        let n = self.classes.len();
        let dim = self.dim;
        let tau = self.tau;
        let row = |i: usize| &z[i * dim..(i + 1) * dim];
        let t_row = |l: usize| &self.teacher[l * dim..(l + 1) * dim];
        let s = |i: usize, j: usize| dot(row(i), row(j)) / tau;

        let anchors: Vec<usize> = (0..n)
            .filter(|&i| (0..n).any(|j| j != i && self.classes[j] == self.classes[i]))
            .collect();
        let degenerate = !anchors
            .iter()
            .any(|&i| (0..n).any(|j| self.classes[j] != self.classes[i]));
        if anchors.is_empty() || degenerate {
            return FeclOutput {
                loss: 0.0,
                degenerate: true,
                anchors: anchors.len(),
            };
        }
        let inv_a = 1.0 / anchors.len() as f64;
        let mut total = 0.0;

        for &i in &anchors {
            let positives: Vec<usize> = (0..n)
                .filter(|&j| j != i && self.classes[j] == self.classes[i])
                .collect();
            let negatives: Vec<usize> = (0..n).filter(|&j| self.classes[j] != self.classes[i]).collect();
            if negatives.is_empty() {
                continue;
            }
            let hard = &self.hard.per_anchor[i];
            let hard_exp: Vec<f64> = hard
                .iter()
                .map(|&(l, _)| (dot(row(i), t_row(l)) / tau).exp())
                .collect();
            let hard_mean = if hard.is_empty() {
                0.0
            } else {
                self.hard_negative_scale * hard_exp.iter().sum::<f64>() / hard.len() as f64
            };
            let neg_exp: Vec<f64> = negatives.iter().map(|&q| s(i, q).exp()).collect();
            let fneg_sum: f64 = negatives.iter().map(|&q| self.weights.f_neg[i * n + q]).sum();
            let b_i: f64 = negatives
                .iter()
                .zip(&neg_exp)
                .map(|(&q, e)| self.weights.f_neg[i * n + q] * e)
                .sum::<f64>()
                + fneg_sum * hard_mean;

            let inv_p = 1.0 / positives.len() as f64;
            let mut g_b = 0.0;
            for &k in &positives {
                let s_ik = s(i, k);
                let e_ik = s_ik.exp();
                let d = e_ik + b_i;
                let w = self.weights.f_pos[i * n + k] * inv_p * inv_a;
                // ln(d) − s_ik without cancellation
                total += w * (b_i * (-s_ik).exp()).ln_1p();
                if let Some(g) = grad.as_deref_mut() {
                    add_pair_grad(g, z, dim, i, k, w * (e_ik / d - 1.0) / tau);
                    g_b += w / d;
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                for (&q, e) in negatives.iter().zip(&neg_exp) {
                    let coef = g_b * self.weights.f_neg[i * n + q] * e / tau;
                    add_pair_grad(g, z, dim, i, q, coef);
                }
                if !hard.is_empty() {
                    let scale = g_b * fneg_sum * self.hard_negative_scale / hard.len() as f64 / tau;
                    for (&(l, _), e) in hard.iter().zip(&hard_exp) {
                        let t = t_row(l);
                        for d in 0..dim {
                            g[i * dim + d] += scale * e * t[d];
                        }
                    }
                }
            }
        }

        FeclOutput {
            loss: total,
            degenerate: false,
            anchors: anchors.len(),
        }
    }
}

/// Accumulate `coef · ∂(z_i·z_j)/∂z` into `g`.
fn add_pair_grad(g: &mut [f64], z: &[f64], dim: usize, i: usize, j: usize, coef: f64) {
    for d in 0..dim {
        let zi = z[i * dim + d];
        let zj = z[j * dim + d];
        g[i * dim + d] += coef * zj;
        g[j * dim + d] += coef * zi;
    }
}

pub fn fecl_forward(
    student: &PatchEmbeddings,
    teacher: &PatchEmbeddings,
    h_patch: &[f64],
    params: &FeclParams,
) -> Result<FeclOutput> {
    let plan = FeclPlan::new(student, teacher, h_patch, params)?;
    Ok(plan.loss(student.vectors()))
}

pub fn fecl_grad(
    student: &PatchEmbeddings,
    teacher: &PatchEmbeddings,
    h_patch: &[f64],
    params: &FeclParams,
) -> Result<Vec<f64>> {
    let plan = FeclPlan::new(student, teacher, h_patch, params)?;
    Ok(plan.loss_and_grad(student.vectors()).1)
}

/// Student and teacher patch embeddings for one volume from its projection
/// grids and patch classes.
pub fn embed_patches(
    grid: &[f64],
    channels: usize,
    layout: &PatchLayout,
    classes: Vec<usize>,
    source: EmbeddingSource,
) -> Result<PatchEmbeddings> {
    let means = layout.patch_means(grid, channels)?;
    let (unit, _) = normalize_rows(&means, channels);
    PatchEmbeddings::new(unit, channels, classes, source, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(vectors: Vec<Vec<f64>>, classes: Vec<usize>, source: EmbeddingSource) -> PatchEmbeddings {
        let dim = vectors[0].len();
        PatchEmbeddings::new(vectors.concat(), dim, classes, source, false).unwrap()
    }

    #[test]
    fn partition_constant_field() {
        let grid: Vec<f64> = [3.0; 64].iter().chain([4.0; 64].iter()).cloned().collect();
        let z = partition_average(&grid, 2, [4, 4, 4], 2).unwrap();
        assert_eq!(z.len(), 16);
        for v in z.chunks(2) {
            assert!((v[0] - 0.6).abs() < 1e-12 && (v[1] - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_k1_is_global_mean() {
        let grid: Vec<f64> = (0..27).map(|i| i as f64).chain((0..27).map(|_| 13.0)).collect();
        let z = partition_average(&grid, 2, [3, 3, 3], 1).unwrap();
        let s = 2f64.sqrt() / 2.0;
        assert!((z[0] - s).abs() < 1e-12 && (z[1] - s).abs() < 1e-12);
    }

    #[test]
    fn partition_unit_patches_keep_values() {
        let grid: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let layout = PatchLayout::new([2, 2, 2], 2).unwrap();
        assert_eq!(layout.patch_means(&grid, 1).unwrap(), grid);
    }

    #[test]
    fn partition_rejects_zero_k() {
        assert!(matches!(partition_average(&[1.0], 1, [1, 1, 1], 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn padding_replicates_edges() {
        // 3 voxels along x, k = 2: patches cover x = {0,1} and x = {2,2}
        let grid = vec![1.0, 2.0, 5.0];
        let layout = PatchLayout::new([3, 1, 1], 2).unwrap();
        assert_eq!(layout.side, [2, 1, 1]);
        let means = layout.patch_means(&grid, 1).unwrap();
        assert_eq!(means[0], 1.5);
        assert_eq!(means[4], 5.0);
    }

    #[test]
    fn patch_means_backward_is_adjoint() {
        let layout = PatchLayout::new([5, 3, 4], 2).unwrap();
        let grid: Vec<f64> = (0..120).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let g: Vec<f64> = (0..16).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = layout.patch_means(&grid, 2).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum();
        let back = layout.patch_means_backward(&g, 2);
        let rhs: f64 = grid.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn patch_label_counts() {
        assert!(patch_labels(&[1; 8], [2, 2, 2], 1, 0.5, 2).unwrap() == vec![1]);
        assert!(patch_labels(&[0; 8], [2, 2, 2], 1, 0.5, 2).unwrap() == vec![0]);
        assert_eq!(patch_labels(&[1, 1, 1, 1, 1, 0, 0, 0], [2, 2, 2], 1, 0.5, 2).unwrap(), vec![1]);
        assert_eq!(patch_labels(&[1, 1, 1, 1, 0, 0, 0, 0], [2, 2, 2], 1, 0.5, 2).unwrap(), vec![0]);
        assert_eq!(patch_labels(&[2, 2, 1, 0, 0, 2, 1, 1], [2, 2, 2], 1, 0.5, 3).unwrap(), vec![1]);
    }

    #[test]
    fn similarity_values() {
        let z = emb(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 0, 1], EmbeddingSource::Student);
        let s = similarity(&z, 1.0).unwrap();
        assert_eq!(s.at(0, 1), 1.0);
        assert_eq!(s.at(0, 2), 0.0);
        let s = similarity(&z, 0.6).unwrap();
        assert!((s.at(0, 1) - 1.0 / 0.6).abs() < 1e-12);
        assert!(similarity(&z, 0.0).is_err());
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(s.at(i, j), s.at(j, i));
            }
        }
    }

    #[test]
    fn focal_weight_values() {
        assert_eq!(positive_weight(1.0, 0.7, 0.0), 0.0);
        assert_eq!(positive_weight(0.0, 0.5, 0.0), 1.0);
        assert!((negative_weight(0.75, 2.0) - 0.5625).abs() < 1e-15);
        assert_eq!(negative_weight(-0.3, 1.0), 0.0);
        assert!((positive_weight(0.5, 1.0, 0.3) - 0.5 * 0.3f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn topk_selection() {
        let s = emb(vec![vec![1.0, 0.0]], vec![0], EmbeddingSource::Student);
        let unit = |c: f64| vec![c, (1.0 - c * c).sqrt()];
        let t = emb(vec![unit(0.9), unit(0.2), unit(0.8)], vec![1, 1, 1], EmbeddingSource::Teacher);
        let h = topk_hard_negatives(&s, &t, 2).unwrap();
        let idx: Vec<usize> = h.per_anchor[0].iter().map(|x| x.0).collect();
        assert_eq!(idx, vec![0, 2]);

        let t = emb(vec![unit(0.9), unit(0.2), unit(0.8)], vec![0, 1, 0], EmbeddingSource::Teacher);
        let h = topk_hard_negatives(&s, &t, 1).unwrap();
        assert_eq!(h.per_anchor[0].iter().map(|x| x.0).collect::<Vec<_>>(), vec![1]);

        let t = emb(vec![unit(0.9), unit(0.2), unit(0.8)], vec![1, 0, 1], EmbeddingSource::Teacher);
        let h = topk_hard_negatives(&s, &t, 4).unwrap();
        assert_eq!(h.per_anchor[0].len(), 2);

        let t = emb(vec![unit(0.9)], vec![0], EmbeddingSource::Teacher);
        assert!(topk_hard_negatives(&s, &t, 4).unwrap().per_anchor[0].is_empty());
    }

    #[test]
    fn collapse_cases() {
        let p = FeclParams { tau: 1.0, gamma: 1.0, top_k: 1 };
        let same = emb(vec![vec![1.0, 0.0], vec![0.6, 0.8]], vec![0, 0], EmbeddingSource::Student);
        let out = fecl_forward(&same, &same, &[0.0, 0.0], &p).unwrap();
        assert_eq!(out.loss, 0.0);

        let diff = emb(vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 1], EmbeddingSource::Student);
        let out = fecl_forward(&diff, &diff, &[0.0, 0.0], &p).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.degenerate);
        assert!(fecl_grad(&diff, &diff, &[0.0, 0.0], &p).unwrap().iter().all(|&g| g == 0.0));

        // positive at cosine 1 carries zero focal weight
        let s = emb(vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], vec![0, 0, 1], EmbeddingSource::Student);
        let t = emb(vec![vec![0.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]], vec![0, 0, 1], EmbeddingSource::Teacher);
        let plan = FeclPlan::new(&s, &t, &[0.0; 3], &p).unwrap();
        assert_eq!(plan.weights().f_pos[1], 0.0);
        assert_eq!(fecl_forward(&s, &t, &[0.0; 3], &p).unwrap().loss, 0.0);
    }

    #[test]
    fn too_few_patches() {
        let one = emb(vec![vec![1.0, 0.0]], vec![0], EmbeddingSource::Student);
        assert!(fecl_forward(&one, &one, &[0.0], &FeclParams::default()).is_err());
    }

    #[test]
    fn gambling_entropy_per_patch() {
        let n = 8;
        let mut data = vec![0.5; n];
        data.extend(vec![0.5; n]);
        let p = ProbabilityField::new([1, 2, 2, 2, 2], data).unwrap();
        let layout = PatchLayout::new([2, 2, 2], 2).unwrap();
        let h = patch_gambling_entropy(&p, &layout, 1.0, true).unwrap();
        assert!(h.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let raw = patch_gambling_entropy(&p, &layout, 1.0, false).unwrap();
        assert!(raw.iter().all(|v| (v - std::f64::consts::LN_2).abs() < 1e-12));
    }
}
