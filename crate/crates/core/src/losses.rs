//! Segmentation training objective: soft Dice plus cross-entropy.

use crate::error::{Error, Result};
use crate::volume::LabelVolume;
use crate::{Scalar, Tape, Tensor, Var};

pub const DICE_EPS: f64 = 1e-5;

fn one_hot<T: Scalar>(tape: &Tape<T>, logits: Var, labels: &LabelVolume) -> Result<(Tensor<T>, usize, usize)> {
    let s = tape.shape(logits);
    let (spatial, k) = match s {
        [h, w, d, k] => ([*h, *w, *d], *k),
        _ => return Err(Error::invalid("loss", format!("logits must be (H,W,D,K), got {s:?}"))),
    };
    if spatial != labels.shape() {
        return Err(Error::shape("loss", s, &labels.shape()));
    }
    labels.check_classes(k)?;
    let n = labels.len();
    let mut data = vec![T::zero(); n * k];
    for (row, &l) in data.chunks_exact_mut(k).zip(labels.data()) {
        row[l as usize] = T::one();
    }
    Ok((Tensor::new(vec![n, k], data)?, n, k))
}

/// `1 - mean_c (2 Σ p_c y_c + ε) / (Σ p_c + Σ y_c + ε)`, p = softmax(logits),
/// averaged over all classes including background.
pub fn soft_dice_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &LabelVolume) -> Result<Var> {
    let (y, n, k) = one_hot(tape, logits, labels)?;
    let mut ysum = vec![T::zero(); k];
    for row in y.data().chunks_exact(k) {
        crate::tensor::kernels::add_into(row, &mut ysum);
    }
    let flat = tape.reshape(logits, &[n, k])?;
    let p = tape.softmax_lastdim(flat)?;
    let yv = tape.constant(y);
    let py = tape.mul(p, yv)?;
    let inter = tape.sum_leading(py)?;
    let num = tape.scale(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_EPS)?;
    let psum = tape.sum_leading(p)?;
    let ysum = tape.constant(Tensor::new(vec![k], ysum)?);
    let den = tape.add(psum, ysum)?;
    let den = tape.add_scalar(den, DICE_EPS)?;
    let dice = tape.div(num, den)?;
    let mean = tape.mean(dice)?;
    let neg = tape.scale(mean, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

/// Mean voxelwise negative log-likelihood of the true class.
pub fn cross_entropy_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &LabelVolume) -> Result<Var> {
    let (y, n, k) = one_hot(tape, logits, labels)?;
    let flat = tape.reshape(logits, &[n, k])?;
    let ls = tape.log_softmax_lastdim(flat)?;
    let yv = tape.constant(y);
    let picked = tape.mul(ls, yv)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / n as f64)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub dice: Var,
    pub ce: Var,
}

/// Dice and cross-entropy with equal weight.
pub fn segmentation_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &LabelVolume) -> Result<LossTerms> {
    let dice = soft_dice_loss(tape, logits, labels)?;
    let ce = cross_entropy_loss(tape, logits, labels)?;
    let total = tape.add(dice, ce)?;
    Ok(LossTerms { total, dice, ce })
}
