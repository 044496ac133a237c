//! Segmentation losses on logits, with analytic gradients.

use menisc_autograd::{Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Dice,
    BcePlusDice,
}

pub const DEFAULT_DICE_SMOOTH: f64 = 1.0;

fn check<T: Scalar>(logits: &Var<'_, T>, targets: &Tensor<T>) -> Result<()> {
    if logits.shape() != targets.shape() {
        return Err(Error::InvalidArgument(format!(
            "logits {:?} and targets {:?} differ in shape",
            logits.shape(),
            targets.shape()
        )));
    }
    if targets.numel() == 0 {
        return Err(Error::InvalidArgument("loss over an empty tensor".into()));
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy from logits,
/// `max(x, 0) - x t + ln(1 + exp(-|x|))` per element.
pub fn bce_loss<'g, T: Scalar>(logits: &Var<'g, T>, targets: &Tensor<T>) -> Result<Var<'g, T>> {
    check(logits, targets)?;
    let x = logits.value();
    let n = x.numel() as f64;
    let total: f64 = x
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&x, &t)| {
            let (x, t) = (x.as_f64(), t.as_f64());
            x.max(0.0) - x * t + (-x.abs()).exp().ln_1p()
        })
        .sum();
    let targets = targets.clone();
    Ok(logits.graph().record(Tensor::scalar(T::from_f64(total / n)), &[*logits], move |g, _| {
        let scale = g.item().as_f64() / n;
        let dx = x
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| T::from_f64((sigmoid(x.as_f64()) - t.as_f64()) * scale))
            .collect();
        vec![Some(Tensor::new(x.shape(), dx).unwrap())]
    }))
}

/// Soft Dice loss `1 - (2 Σpt + s) / (Σp + Σt + s)` with `p = sigmoid(x)`,
/// summed over every element of the batch.
pub fn dice_loss<'g, T: Scalar>(logits: &Var<'g, T>, targets: &Tensor<T>, smooth: f64) -> Result<Var<'g, T>> {
    check(logits, targets)?;
    if !(smooth >= 0.0) {
        return Err(Error::InvalidArgument(format!("dice smoothing {smooth} must be non-negative")));
    }
    let x = logits.value();
    let p: Vec<f64> = x.data().iter().map(|v| sigmoid(v.as_f64())).collect();
    let t: Vec<f64> = targets.data().iter().map(|v| v.as_f64()).collect();
    let inter: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let denom = p.iter().sum::<f64>() + t.iter().sum::<f64>() + smooth;
    let num = 2.0 * inter + smooth;
    let loss = if denom > 0.0 { 1.0 - num / denom } else { 0.0 };
    let shape = x.shape().to_vec();
    Ok(logits.graph().record(Tensor::scalar(T::from_f64(loss)), &[*logits], move |g, _| {
        let up = g.item().as_f64();
        let dx = p
            .iter()
            .zip(&t)
            .map(|(&p, &t)| {
                let dp = if denom > 0.0 { -(2.0 * t * denom - num) / (denom * denom) } else { 0.0 };
                T::from_f64(up * dp * p * (1.0 - p))
            })
            .collect();
        vec![Some(Tensor::new(&shape, dx).unwrap())]
    }))
}

/// Unweighted sum of [`bce_loss`] and [`dice_loss`].
pub fn combined_loss<'g, T: Scalar>(logits: &Var<'g, T>, targets: &Tensor<T>, smooth: f64) -> Result<Var<'g, T>> {
    Ok(bce_loss(logits, targets)?.add(&dice_loss(logits, targets, smooth)?)?)
}

pub fn loss<'g, T: Scalar>(kind: LossKind, logits: &Var<'g, T>, targets: &Tensor<T>, smooth: f64) -> Result<Var<'g, T>> {
    match kind {
        LossKind::Bce => bce_loss(logits, targets),
        LossKind::Dice => dice_loss(logits, targets, smooth),
        LossKind::BcePlusDice => combined_loss(logits, targets, smooth),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use menisc_autograd::Graph;

    fn eval(kind: LossKind, x: &[f64], t: &[f64]) -> f64 {
        let g = Graph::<f64>::new();
        let v = g.constant(Tensor::new(&[x.len()], x.to_vec()).unwrap());
        loss(kind, &v, &Tensor::new(&[t.len()], t.to_vec()).unwrap(), 1.0).unwrap().item()
    }

    #[test]
    fn bce_reference_values() {
        assert!((eval(LossKind::Bce, &[0.0], &[1.0]) - std::f64::consts::LN_2).abs() < 1e-12);
        let sat = eval(LossKind::Bce, &[100.0, -100.0], &[1.0, 0.0]);
        assert!(sat.is_finite() && sat < 1e-6);
        let wrong = eval(LossKind::Bce, &[-100.0], &[1.0]);
        assert!((wrong - 100.0).abs() < 1e-9);
    }

    #[test]
    fn dice_bounds() {
        assert!(eval(LossKind::Dice, &[50.0, -50.0, 50.0], &[1.0, 0.0, 1.0]) < 1e-3);
        let empty = eval(LossKind::Dice, &[3.0, 3.0], &[0.0, 0.0]);
        assert!(empty.is_finite() && (0.0..=1.0).contains(&empty));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let g = Graph::<f32>::new();
        let v = g.constant(Tensor::zeros(&[2, 2]));
        assert!(bce_loss(&v, &Tensor::zeros(&[4])).is_err());
    }
}
