use entroseg::fecl::{FeclPlan, FeclParams};
use entroseg::fields::PatchEmbeddings;
use entroseg::gradcheck::random_fecl_instance;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Instance = (PatchEmbeddings, PatchEmbeddings, Vec<f64>, FeclParams);

fn instance(seed: u64, n: usize, dim: usize) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_fecl_instance(&mut rng, n, dim).unwrap()
}

/// Random orthogonal `dim × dim` matrix by Gram-Schmidt, row-major.
fn orthogonal(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for u in &q {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-3 {
            q.push(v.iter().map(|a| a / n).collect());
        }
    }
    q.concat()
}

/// Rows of `z` times `m`.
fn times(z: &[f64], m: &[f64], dim: usize) -> Vec<f64> {
    z.chunks(dim)
        .flat_map(|row| (0..dim).map(move |j| (0..dim).map(|k| row[k] * m[k * dim + j]).sum::<f64>()))
        .collect()
}

fn with_vectors(e: &PatchEmbeddings, vectors: Vec<f64>) -> PatchEmbeddings {
    PatchEmbeddings::new(vectors, e.dim(), e.patch_class().to_vec(), e.source(), true).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_nonnegative(seed in any::<u64>(), n in 3usize..9) {
        let (s, t, h, p) = instance(seed, n, 5);
        let out = FeclPlan::new(&s, &t, &h, &p).unwrap().loss(s.vectors());
        prop_assert!(out.loss >= 0.0, "{}", out.loss);
    }

    #[test]
    fn rotation_leaves_loss_unchanged(seed in any::<u64>(), n in 3usize..9) {
        let dim = 5;
        let (s, t, h, p) = instance(seed, n, dim);
        let q = orthogonal(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), dim);
        let plan = FeclPlan::new(&s, &t, &h, &p).unwrap();
        let (out, grad) = plan.loss_and_grad(s.vectors());
        let rs = with_vectors(&s, times(s.vectors(), &q, dim));
        let rt = with_vectors(&t, times(t.vectors(), &q, dim));
        let rplan = FeclPlan::new(&rs, &rt, &h, &p).unwrap();
        let (rout, rgrad) = rplan.loss_and_grad(rs.vectors());
        prop_assert!((out.loss - rout.loss).abs() < 1e-9, "{} vs {}", out.loss, rout.loss);
        let expected = times(&grad, &q, dim);
        for (a, b) in rgrad.iter().zip(&expected) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn permuting_patches_permutes_gradients(seed in any::<u64>(), n in 3usize..9) {
        let dim = 4;
        let (s, t, h, p) = instance(seed, n, dim);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)));
        let pick = |e: &PatchEmbeddings| {
            let v: Vec<f64> = perm.iter().flat_map(|&i| e.vector(i).to_vec()).collect();
            let c: Vec<usize> = perm.iter().map(|&i| e.patch_class()[i]).collect();
            PatchEmbeddings::new(v, dim, c, e.source(), true).unwrap()
        };
        let ps = pick(&s);
        let pt = pick(&t);
        let ph: Vec<f64> = perm.iter().map(|&i| h[i]).collect();
        let (out, grad) = FeclPlan::new(&s, &t, &h, &p).unwrap().loss_and_grad(s.vectors());
        let (pout, pgrad) = FeclPlan::new(&ps, &pt, &ph, &p).unwrap().loss_and_grad(ps.vectors());
        prop_assert!((out.loss - pout.loss).abs() < 1e-12);
        for (new, &old) in perm.iter().enumerate() {
            for d in 0..dim {
                prop_assert!((pgrad[new * dim + d] - grad[old * dim + d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropping_hard_negatives_never_raises_loss(seed in any::<u64>(), n in 3usize..9) {
        let (s, t, h, p) = instance(seed, n, 4);
        let mut plan = FeclPlan::new(&s, &t, &h, &p).unwrap();
        let full = plan.loss(s.vectors()).loss;
        let mut prev = full;
        for scale in [0.75, 0.5, 0.25, 0.0] {
            plan.hard_negative_scale = scale;
            let l = plan.loss(s.vectors()).loss;
            prop_assert!(l <= prev + 1e-15, "scale {scale}: {l} > {prev}");
            prev = l;
        }
    }
}

#[test]
fn teacher_rotation_alone_changes_only_hard_terms() {
    let dim = 4;
    let (s, t, h, p) = instance(99, 6, dim);
    let q = orthogonal(&mut ChaCha8Rng::seed_from_u64(3), dim);
    let base = FeclPlan::new(&s, &t, &h, &p).unwrap().loss(s.vectors()).loss;
    let rt = with_vectors(&t, times(t.vectors(), &q, dim));
    let moved = FeclPlan::new(&s, &rt, &h, &p).unwrap().loss(s.vectors()).loss;
    assert!((base - moved).abs() > 1e-9);
    let no_hard = FeclParams { top_k: 0, ..p };
    let a = FeclPlan::new(&s, &t, &h, &no_hard).unwrap().loss(s.vectors()).loss;
    let b = FeclPlan::new(&s, &rt, &h, &no_hard).unwrap().loss(s.vectors()).loss;
    assert_eq!(a, b);
}
