//! Soft Dice and cross-entropy on labeled volumes.

use crate::error::{Error, Result};
use crate::fields::{LabelField, ProbabilityField};
use crate::uncertainty::{clamp_prob, EPS};

pub const DICE_SMOOTH: f64 = 1e-5;

/// Foreground class index for the binary task.
const FOREGROUND: usize = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct LossAndGrad {
    pub loss: f64,
    /// Gradient with respect to the probabilities, laid out like them.
    pub grad: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupLossResult {
    pub dice_loss: f64,
    pub ce_loss: f64,
    pub grad_ps: Vec<f64>,
}

fn check(p: &ProbabilityField, y: &LabelField) -> Result<()> {
    let [b, _, h, w, d] = p.shape();
    if y.shape() != [b, h, w, d] {
        return Err(Error::contract(format!(
            "label shape {:?} does not match probability shape {:?}",
            y.shape(),
            p.shape()
        )));
    }
    Ok(())
}

/// `1 − (2 Σ p_fg·y + s) / (Σ p_fg + Σ y + s)` over every voxel of the batch.
pub fn dice_loss(p: &ProbabilityField, y: &LabelField) -> Result<LossAndGrad> {
    check(p, y)?;
    if p.classes() < 2 {
        return Err(Error::contract("dice loss needs a foreground channel"));
    }
    let n = p.num_voxels();
    let mut inter = 0.0;
    let mut sum_p = 0.0;
    let mut sum_y = 0.0;
    for v in 0..n {
        let pf = p.data()[p.voxel_offset(v, FOREGROUND)];
        let yv = (y.data()[v] as usize == FOREGROUND) as u8 as f64;
        inter += pf * yv;
        sum_p += pf;
        sum_y += yv;
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sum_p + sum_y + DICE_SMOOTH;
    let mut grad = vec![0.0; p.data().len()];
    for v in 0..n {
        let yv = (y.data()[v] as usize == FOREGROUND) as u8 as f64;
        grad[p.voxel_offset(v, FOREGROUND)] = -(2.0 * yv * den - num) / (den * den);
    }
    Ok(LossAndGrad {
        loss: 1.0 - num / den,
        grad,
    })
}

/// Mean over voxels of `−ln p_y`, with clamped logarithms.
pub fn ce_loss(p: &ProbabilityField, y: &LabelField) -> Result<LossAndGrad> {
    check(p, y)?;
    let n = p.num_voxels();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut grad = vec![0.0; p.data().len()];
    for v in 0..n {
        let class = y.data()[v] as usize;
        if class >= p.classes() {
            return Err(Error::contract(format!("label {class} outside class range")));
        }
        let o = p.voxel_offset(v, class);
        let py = p.data()[o];
        total -= clamp_prob(py).ln();
        if (EPS..=1.0 - EPS).contains(&py) {
            grad[o] = -inv_n / py;
        }
    }
    Ok(LossAndGrad {
        loss: total * inv_n,
        grad,
    })
}

/// Dice + CE with the summed gradient.
pub fn supervised_loss(p: &ProbabilityField, y: &LabelField) -> Result<SupLossResult> {
    let dice = dice_loss(p, y)?;
    let ce = ce_loss(p, y)?;
    let grad_ps = dice.grad.iter().zip(&ce.grad).map(|(a, b)| a + b).collect();
    Ok(SupLossResult {
        dice_loss: dice.loss,
        ce_loss: ce.loss,
        grad_ps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hard(fg: &[u8]) -> ProbabilityField {
        let rows: Vec<Vec<f64>> = fg.iter().map(|&f| vec![1.0 - f as f64, f as f64]).collect();
        ProbabilityField::from_rows(&rows).unwrap()
    }

    fn labels(fg: &[u8]) -> LabelField {
        LabelField::new([1, fg.len(), 1, 1], fg.to_vec(), 2).unwrap()
    }

    #[test]
    fn dice_perfect_and_inverted() {
        let y = [0, 1, 1, 0, 1, 0, 0, 0];
        assert!(dice_loss(&hard(&y), &labels(&y)).unwrap().loss.abs() < 1e-6);
        let inv: Vec<u8> = y.iter().map(|v| 1 - v).collect();
        assert!((dice_loss(&hard(&inv), &labels(&y)).unwrap().loss - 1.0).abs() < 1e-5);
    }

    #[test]
    fn dice_counting_toy() {
        // 16 voxels, 8 predicted, 8 true, 4 overlapping
        let mut pred = [0u8; 16];
        let mut truth = [0u8; 16];
        pred[..8].fill(1);
        truth[4..12].fill(1);
        let l = dice_loss(&hard(&pred), &labels(&truth)).unwrap().loss;
        assert!((l - 0.5).abs() < 1e-6);
    }

    #[test]
    fn dice_ignores_background_channel() {
        let y = [1, 0, 1];
        let a = ProbabilityField::from_rows(&[vec![0.3, 0.7], vec![0.8, 0.2], vec![0.5, 0.5]]).unwrap();
        // three-class field with the same foreground column, background split
        let b = ProbabilityField::from_rows(&[vec![0.1, 0.7, 0.2], vec![0.4, 0.2, 0.4], vec![0.25, 0.5, 0.25]]).unwrap();
        let la = dice_loss(&a, &labels(&y)).unwrap().loss;
        let lb = dice_loss(&b, &labels(&y)).unwrap().loss;
        assert!((la - lb).abs() < 1e-15);
    }

    #[test]
    fn ce_values() {
        let y = [0, 1, 1];
        assert!(ce_loss(&hard(&y), &labels(&y)).unwrap().loss < 1e-6);
        let half = ProbabilityField::from_rows(&vec![vec![0.5, 0.5]; 3]).unwrap();
        assert!((ce_loss(&half, &labels(&y)).unwrap().loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let y = labels(&[0, 1]);
        assert!(matches!(dice_loss(&hard(&[0, 1, 1]), &y), Err(Error::Contract(_))));
        assert!(matches!(ce_loss(&hard(&[0, 1, 1]), &y), Err(Error::Contract(_))));
    }

    proptest::proptest! {
        #[test]
        fn losses_nonnegative(ps in proptest::collection::vec(0.0f64..=1.0, 6), ys in proptest::collection::vec(0u8..2, 6)) {
            let rows: Vec<Vec<f64>> = ps.iter().map(|&p| vec![1.0 - p, p]).collect();
            let p = ProbabilityField::from_rows(&rows).unwrap();
            let y = labels(&ys);
            let r = supervised_loss(&p, &y).unwrap();
            proptest::prop_assert!(r.dice_loss >= 0.0 && r.dice_loss <= 1.0);
            proptest::prop_assert!(r.ce_loss >= 0.0);
        }
    }
}
