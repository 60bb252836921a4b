//! Finite-difference checks of every analytic gradient.
//!
//! Errors are reported as `max_i |a_i − n_i| / max(|a_i|, |n_i|, floor)` with
//! `floor = max(1e-3 · max_j |a_j|, 1e-6)`, so components that are tiny
//! relative to the gradient, or a gradient that vanishes identically, do not
//! fail on round-off alone.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fecl::{normalize_rows, normalize_rows_backward, patch_labels, FeclParams, FeclPlan, PatchLayout};
use crate::fields::{EmbeddingSource, LabelField, PatchEmbeddings, ProbabilityField};
use crate::segnet::{backward, forward_f64, NetConfig, ParamSet};
use crate::supervised::{ce_loss, dice_loss, supervised_loss};
use crate::uncl::{uncl, EntropyMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub name: String,
    pub cases: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Absolute floor of the error denominator.
pub const ABS_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(ABS_FLOOR);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Five-point central difference of `f` in coordinate `i` with step `h`.
fn fd5(x: &mut [f64], i: usize, h: f64, f: &mut impl FnMut(&[f64]) -> f64) -> f64 {
    let x0 = x[i];
    let mut at = |d: f64, x: &mut [f64]| {
        x[i] = x0 + d;
        f(x)
    };
    let v = -at(2.0 * h, x) + 8.0 * at(h, x) - 8.0 * at(-h, x) + at(-2.0 * h, x);
    x[i] = x0;
    v / (12.0 * h)
}

fn fd2(x: &mut [f64], i: usize, h: f64, f: &mut impl FnMut(&[f64]) -> f64) -> f64 {
    let x0 = x[i];
    x[i] = x0 + h;
    let up = f(x);
    x[i] = x0 - h;
    let down = f(x);
    x[i] = x0;
    (up - down) / (2.0 * h)
}

/// Random simplex rows with every entry at least `1e-3` away from 0 and 1.
fn random_field(rng: &mut ChaCha8Rng, classes: usize, voxels: usize) -> ProbabilityField {
    let rows: Vec<Vec<f64>> = (0..voxels)
        .map(|_| {
            let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.iter().map(|v| v / s).collect()
        })
        .collect();
    ProbabilityField::from_rows(&rows).expect("valid rows")
}

fn prob_step(p: f64) -> f64 {
    1e-3 * p.min(1.0 - p)
}

pub fn check_uncl(seed: u64, cases: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let classes = rng.gen_range(2..=4);
        let voxels = rng.gen_range(1..=8);
        let ps = random_field(&mut rng, classes, voxels);
        let pt = random_field(&mut rng, classes, voxels);
        let beta = rng.gen_range(0.0..2.0);
        let mode = [EntropyMode::Dual, EntropyMode::StudentOnly, EntropyMode::TeacherOnly][case % 3];
        let analytic = uncl(&ps, &pt, beta, mode)?.grad_ps;
        let shape = ps.shape();
        let mut x = ps.data().to_vec();
        let mut f = |x: &[f64]| {
            uncl(&ProbabilityField::from_raw(shape, x.to_vec()), &pt, beta, mode)
                .expect("same shapes")
                .loss
        };
        let numeric: Vec<f64> = (0..x.len())
            .map(|i| {
                let h = prob_step(x[i]);
                fd5(&mut x, i, h, &mut f)
            })
            .collect();
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    Ok(GradCheckReport {
        name: "uncl".into(),
        cases,
        max_rel_err: worst,
        tolerance: 1e-6,
    })
}

fn random_labels(rng: &mut ChaCha8Rng, classes: usize, voxels: usize) -> LabelField {
    let mut data: Vec<u8> = (0..voxels).map(|_| rng.gen_range(0..classes) as u8).collect();
    // keep Dice away from the smoothing-only regime, where the loss sits at 1
    // and its gradient is below the difference quotient's round-off
    data[0] = 1;
    LabelField::new([1, voxels, 1, 1], data, classes).expect("in range")
}

/// `(dice, ce)` reports.
pub fn check_supervised(seed: u64, cases: usize) -> Result<(GradCheckReport, GradCheckReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut w_dice, mut w_ce) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let classes = rng.gen_range(2..=3);
        let voxels = rng.gen_range(2..=10);
        let p = random_field(&mut rng, classes, voxels);
        let y = random_labels(&mut rng, classes, voxels);
        let shape = p.shape();
        for (which, worst) in [(0, &mut w_dice), (1, &mut w_ce)] {
            let eval = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
                let field = ProbabilityField::from_raw(shape, x.to_vec());
                let r = if which == 0 { dice_loss(&field, &y)? } else { ce_loss(&field, &y)? };
                Ok((r.loss, r.grad))
            };
            let analytic = eval(p.data())?.1;
            let mut x = p.data().to_vec();
            let mut f = |x: &[f64]| eval(x).expect("same shapes").0;
            let numeric: Vec<f64> = (0..x.len())
                .map(|i| {
                    let h = prob_step(x[i]);
                    fd5(&mut x, i, h, &mut f)
                })
                .collect();
            *worst = worst.max(rel_error(&analytic, &numeric));
        }
    }
    let report = |name: &str, e: f64| GradCheckReport {
        name: name.into(),
        cases,
        max_rel_err: e,
        tolerance: 1e-6,
    };
    Ok((report("dice", w_dice), report("ce", w_ce)))
}

fn random_units(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    normalize_rows(&raw, dim).0
}

/// Random FeCL instance with both classes present among `n` patches.
pub fn random_fecl_instance(
    rng: &mut ChaCha8Rng,
    n: usize,
    dim: usize,
) -> Result<(PatchEmbeddings, PatchEmbeddings, Vec<f64>, FeclParams)> {
    let mut classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    classes[0] = 0;
    classes[1] = 0;
    classes[n - 1] = 1;
    let t_classes: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let student = PatchEmbeddings::new(random_units(rng, n, dim), dim, classes, EmbeddingSource::Student, true)?;
    let teacher = PatchEmbeddings::new(random_units(rng, n, dim), dim, t_classes, EmbeddingSource::Teacher, true)?;
    let h: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let params = FeclParams {
        tau: rng.gen_range(0.3..1.0),
        gamma: [0.5, 0.8, 1.0, 1.5, 2.0][rng.gen_range(0..5)],
        top_k: rng.gen_range(1..=4),
    };
    Ok((student, teacher, h, params))
}

pub fn check_fecl(seed: u64, cases: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.gen_range(3..=6);
        let (student, teacher, h, params) = random_fecl_instance(&mut rng, n, 4)?;
        let plan = FeclPlan::new(&student, &teacher, &h, &params)?;
        let (_, analytic) = plan.loss_and_grad(student.vectors());
        let mut x = student.vectors().to_vec();
        let mut f = |x: &[f64]| plan.loss(x).loss;
        let numeric: Vec<f64> = (0..x.len()).map(|i| fd5(&mut x, i, 1e-4, &mut f)).collect();
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    Ok(GradCheckReport {
        name: "fecl".into(),
        cases,
        max_rel_err: worst,
        tolerance: 1e-5,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Composite {
    Supervised,
    Uncl,
    Fecl,
    Total,
}

struct EndToEnd {
    net: NetConfig,
    shape: [usize; 5],
    x: Vec<f64>,
    y: LabelField,
    pt: ProbabilityField,
    layout: PatchLayout,
    plan: FeclPlan,
    beta: f64,
    eta: f64,
}

impl EndToEnd {
    fn new(seed: u64) -> Result<(Self, ParamSet)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = NetConfig {
            features: 4,
            embed_dim: 6,
            classes: 2,
        };
        let dims = [4, 4, 4];
        let shape = [1, 1, 4, 4, 4];
        let params = ParamSet::init(net, rng.gen());
        let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // half-space label so both patch classes occur
        let y_data: Vec<u8> = (0..64).map(|i| ((i / 16) >= 2) as u8).collect();
        let y = LabelField::new([1, 4, 4, 4], y_data.clone(), 2)?;
        let teacher = ParamSet::init(net, rng.gen());
        let ft = forward_f64(&teacher, shape, &x, true)?;
        let layout = PatchLayout::new(dims, 2)?;
        let classes = patch_labels(&y_data, dims, 2, 0.5, 2)?;
        let fs = forward_f64(&params, shape, &x, true)?;
        let (unit, _) = normalize_rows(&layout.patch_means(fs.z_grid.as_ref().unwrap(), 6)?, 6);
        let (t_unit, _) = normalize_rows(&layout.patch_means(ft.z_grid.as_ref().unwrap(), 6)?, 6);
        let student = PatchEmbeddings::new(unit, 6, classes.clone(), EmbeddingSource::Student, false)?;
        let teacher_emb = PatchEmbeddings::new(t_unit, 6, classes, EmbeddingSource::Teacher, false)?;
        let h: Vec<f64> = (0..layout.num_patches()).map(|_| rng.gen_range(0.0..1.0)).collect();
        let plan = FeclPlan::new(
            &student,
            &teacher_emb,
            &h,
            &FeclParams {
                tau: 0.6,
                gamma: 0.5,
                top_k: 3,
            },
        )?;
        Ok((
            Self {
                net,
                shape,
                x,
                y,
                pt: ft.probs,
                layout,
                plan,
                beta: 0.7,
                eta: 1.0,
            },
            params,
        ))
    }

    fn loss_and_grad(&self, params: &ParamSet, which: Composite, want_grad: bool) -> Result<(f64, Option<ParamSet>)> {
        let e = self.net.embed_dim;
        let fwd = forward_f64(params, self.shape, &self.x, true)?;
        let n_p = fwd.probs.data().len();
        let mut loss = 0.0;
        let mut gp = vec![0.0; n_p];
        let mut gz = vec![0.0; fwd.z_grid.as_ref().unwrap().len()];
        if matches!(which, Composite::Supervised | Composite::Total) {
            let s = supervised_loss(&fwd.probs, &self.y)?;
            loss += s.dice_loss + s.ce_loss;
            gp.iter_mut().zip(&s.grad_ps).for_each(|(a, b)| *a += b);
        }
        if matches!(which, Composite::Uncl | Composite::Total) {
            let u = uncl(&fwd.probs, &self.pt, self.beta, EntropyMode::Dual)?;
            loss += self.eta * u.loss;
            gp.iter_mut().zip(&u.grad_ps).for_each(|(a, b)| *a += self.eta * b);
        }
        if matches!(which, Composite::Fecl | Composite::Total) {
            let means = self.layout.patch_means(fwd.z_grid.as_ref().unwrap(), e)?;
            let (unit, norms) = normalize_rows(&means, e);
            let (out, g_unit) = self.plan.loss_and_grad(&unit);
            loss += self.eta * out.loss;
            if want_grad {
                let g = self.layout.patch_means_backward(&normalize_rows_backward(&g_unit, &unit, &norms, e), e);
                gz.iter_mut().zip(&g).for_each(|(a, b)| *a += self.eta * b);
            }
        }
        let grads = if want_grad {
            Some(backward(params, &fwd, &gp, Some(&gz))?)
        } else {
            None
        };
        Ok((loss, grads))
    }
}

/// Parameter gradients of each loss through the network on a 4³ volume,
/// against central differences of the end-to-end scalar.
pub fn check_end_to_end(seed: u64) -> Result<Vec<GradCheckReport>> {
    let (setup, params) = EndToEnd::new(seed)?;
    let mut out = Vec::new();
    for (which, name) in [
        (Composite::Supervised, "end_to_end_supervised"),
        (Composite::Uncl, "end_to_end_uncl"),
        (Composite::Fecl, "end_to_end_fecl"),
        (Composite::Total, "end_to_end_total"),
    ] {
        let analytic = setup.loss_and_grad(&params, which, true)?.1.expect("requested").flatten();
        let mut theta = params.flatten();
        let mut f = |t: &[f64]| {
            let p = ParamSet::from_flat(setup.net, t).expect("same layout");
            setup.loss_and_grad(&p, which, false).expect("valid").0
        };
        let numeric: Vec<f64> = (0..theta.len()).map(|i| fd2(&mut theta, i, 1e-6, &mut f)).collect();
        out.push(GradCheckReport {
            name: name.into(),
            cases: 1,
            max_rel_err: rel_error(&analytic, &numeric),
            tolerance: 1e-5,
        });
    }
    Ok(out)
}

/// Every suite: uncl, dice, ce, fecl and the four end-to-end composites.
pub fn run_all(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut out = vec![check_uncl(seed, 100)?];
    let (d, c) = check_supervised(seed.wrapping_add(1), 100)?;
    out.push(d);
    out.push(c);
    out.push(check_fecl(seed.wrapping_add(2), 100)?);
    out.extend(check_end_to_end(seed.wrapping_add(3))?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_error_definition() {
        assert_eq!(rel_error(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert!((rel_error(&[1.0, 0.0], &[1.1, 0.0]) - 0.1 / 1.1).abs() < 1e-15);
        // tiny component judged against the floor, not itself
        assert!((rel_error(&[1.0, 1e-9], &[1.0, 2e-9]) - 1e-9 / 1e-3).abs() < 1e-15);
        assert!(rel_error(&[0.0, 0.0], &[1e-13, 0.0]) < 1e-6);
    }

    #[test]
    fn suites_pass_quickly() {
        assert!(check_uncl(1, 10).unwrap().passed());
        let (d, c) = check_supervised(2, 10).unwrap();
        assert!(d.passed() && c.passed(), "{d:?} {c:?}");
        let f = check_fecl(3, 10).unwrap();
        assert!(f.passed(), "{f:?}");
    }

    #[test]
    fn end_to_end_passes() {
        for r in check_end_to_end(4).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }
}
