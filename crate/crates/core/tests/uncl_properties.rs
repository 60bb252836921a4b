use entroseg::fields::ProbabilityField;
use entroseg::uncertainty::entropy_of;
use entroseg::uncl::{uncl, EntropyMode};
use proptest::prelude::*;

fn field(rows: &[Vec<f64>]) -> ProbabilityField {
    ProbabilityField::from_rows(rows).unwrap()
}

proptest! {
    // Reflecting the teacher probability about the student's keeps the squared
    // error fixed; whichever reflection has the higher entropy must be damped
    // more.
    #[test]
    fn higher_teacher_entropy_damps_consistency(
        a in 0.05f64..0.95,
        delta in 0.01f64..0.3,
        beta in 0.05f64..3.0,
    ) {
        let (lo, hi) = (a - delta, a + delta);
        prop_assume!(lo > 0.0 && hi < 1.0);
        let ps = field(&[vec![1.0 - a, a]]);
        let t_lo = vec![1.0 - lo, lo];
        let t_hi = vec![1.0 - hi, hi];
        let (h_lo, h_hi) = (entropy_of(&t_lo), entropy_of(&t_hi));
        prop_assume!((h_lo - h_hi).abs() > 1e-9);
        let (noisy, sharp) = if h_lo > h_hi { (t_lo, t_hi) } else { (t_hi, t_lo) };
        let c_noisy = uncl(&ps, &field(&[noisy]), beta, EntropyMode::Dual).unwrap().per_voxel_consistency[0];
        let c_sharp = uncl(&ps, &field(&[sharp]), beta, EntropyMode::Dual).unwrap().per_voxel_consistency[0];
        prop_assert!(c_noisy < c_sharp, "{c_noisy} !< {c_sharp}");
    }

    #[test]
    fn dual_on_symmetric_input_doubles_single_offset(p in 0.01f64..0.99, beta in 0.0f64..3.0) {
        // with p_s and p_t sharing an entropy, the dual denominator is twice
        // e^{βH} while a single mode pays e^{βH} + 1
        let ps = field(&[vec![1.0 - p, p]]);
        let pt = field(&[vec![p, 1.0 - p]]);
        let h = entropy_of(&[p, 1.0 - p]);
        let se = 2.0 * (2.0 * p - 1.0).powi(2);
        let dual = uncl(&ps, &pt, beta, EntropyMode::Dual).unwrap();
        let stu = uncl(&ps, &pt, beta, EntropyMode::StudentOnly).unwrap();
        let tea = uncl(&ps, &pt, beta, EntropyMode::TeacherOnly).unwrap();
        let e = (beta * h).exp();
        prop_assert!((dual.per_voxel_consistency[0] - se / (2.0 * e)).abs() < 1e-12);
        prop_assert!((stu.per_voxel_consistency[0] - se / (e + 1.0)).abs() < 1e-12);
        prop_assert!((stu.per_voxel_consistency[0] - tea.per_voxel_consistency[0]).abs() < 1e-15);
        prop_assert!((dual.loss - (se / (2.0 * e) + beta * 2.0 * h)).abs() < 1e-12);
    }
}
