use crate::error::{Error, Result};
use crate::mask::RleMask;

use super::ProbGrid;

/// Probability clamp used by the segmentation loss.
pub const BCE_EPS: f64 = 1e-7;

/// Multi-positive softmax contrastive loss over a pool, addressed by index.
///
/// `loss = -(1/|P|) sum_{k in P} log softmax_k(f_g . pool / tau)`. Returns the
/// loss and its gradient with respect to `f_g`.
pub fn contrastive_loss_indexed(
    f_g: &[f64],
    pool: &[&[f64]],
    positives: &[usize],
    tau: f64,
) -> Result<(f64, Vec<f64>)> {
    if positives.is_empty() {
        return Err(Error::EmptyPositives);
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if let Some(&bad) = positives.iter().find(|&&k| k >= pool.len()) {
        return Err(Error::PositiveNotInPool(bad));
    }
    if let Some(v) = pool.iter().find(|v| v.len() != f_g.len()) {
        return Err(Error::DimensionMismatch(format!(
            "pool vector has dimension {}, f_g has {}",
            v.len(),
            f_g.len()
        )));
    }
    let logits: Vec<f64> = pool.iter().map(|v| crate::data::dot(f_g, v) / tau).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&s| (s - max).exp()).sum();
    let lse = max + sum.ln();
    let n_pos = positives.len() as f64;
    let loss = positives.iter().map(|&k| lse - logits[k]).sum::<f64>() / n_pos;

    let mut grad = vec![0.0; f_g.len()];
    for (v, &s) in pool.iter().zip(&logits) {
        let p = (s - lse).exp();
        for (g, x) in grad.iter_mut().zip(v.iter()) {
            *g += p * x;
        }
    }
    for &k in positives {
        for (g, x) in grad.iter_mut().zip(pool[k].iter()) {
            *g -= x / n_pos;
        }
    }
    grad.iter_mut().for_each(|g| *g /= tau);
    Ok((loss, grad))
}

/// Same loss with positives given by value; each must appear in the pool.
pub fn contrastive_loss(f_g: &[f64], positives: &[&[f64]], pool: &[&[f64]], tau: f64) -> Result<(f64, Vec<f64>)> {
    let idx = positives
        .iter()
        .enumerate()
        .map(|(i, p)| {
            pool.iter()
                .position(|d| d.len() == p.len() && d.iter().zip(p.iter()).all(|(a, b)| a.to_bits() == b.to_bits()))
                .ok_or(Error::PositiveNotInPool(i))
        })
        .collect::<Result<Vec<_>>>()?;
    contrastive_loss_indexed(f_g, pool, &idx, tau)
}

/// Mean binary cross-entropy against a pseudo mask, with probabilities
/// clamped to `[BCE_EPS, 1 - BCE_EPS]`. The gradient is taken with respect to
/// the logits and is zero where the clamp is active.
pub fn seg_loss(pred: &ProbGrid, target: &RleMask) -> Result<(f64, Vec<f64>)> {
    if (pred.h, pred.w) != target.dims() {
        return Err(Error::DimensionMismatch(format!(
            "prediction is {}x{}, mask is {}x{}",
            pred.h,
            pred.w,
            target.height(),
            target.width()
        )));
    }
    let labels = target.decode();
    let n = pred.probs.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(pred.probs.len());
    for (&p, &y) in pred.probs.iter().zip(labels.as_slice()) {
        let clamped = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
        let y = if y { 1.0 } else { 0.0 };
        loss -= y * clamped.ln() + (1.0 - y) * (1.0 - clamped).ln();
        let active = p > BCE_EPS && p < 1.0 - BCE_EPS;
        grad.push(if active { (p - y) / n } else { 0.0 });
    }
    Ok((loss / n, grad))
}

pub fn total_loss(seg: f64, con: f64, lambda: f64) -> f64 {
    seg + lambda * con
}

/// `|a - b| / max(|a| + |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Largest relative error between the analytic gradient of `f` at `point`
/// and central differences with the given step.
pub fn grad_check<F>(f: F, point: &[f64], step: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidParameter(format!("step must be positive, got {step}")));
    }
    let (_, analytic) = f(point)?;
    if analytic.len() != point.len() {
        return Err(Error::DimensionMismatch(format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            point.len()
        )));
    }
    let mut x = point.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = f(&x)?.0;
        x[i] = orig - step;
        let minus = f(&x)?.0;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
