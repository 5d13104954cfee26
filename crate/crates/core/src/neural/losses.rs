//! Contrastive objectives on embedding rows, with their gradients.
//!
//! All three are batch means. Gradients are with respect to the embedding
//! rows as given, so they compose with the encoders' normalization step.

use super::tensor::dot;
use crate::error::{Error, Result};

pub type Rows = Vec<Vec<f64>>;

fn zeros_like(z: &[Vec<f64>]) -> Rows {
    z.iter().map(|r| vec![0.0; r.len()]).collect()
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Cross-modal InfoNCE: row `i` of `zt` should pick row `i` of `zl` among
/// all rows of `zl`. Returns the mean loss and gradients for both sides.
pub fn info_nce_with_grad(zt: &[Vec<f64>], zl: &[Vec<f64>], tau: f64) -> Result<(f64, Rows, Rows)> {
    check_tau(tau)?;
    if zt.is_empty() || zt.len() != zl.len() {
        return Err(Error::Batch(format!(
            "info_nce needs equal non-empty batches, got {} and {}",
            zt.len(),
            zl.len()
        )));
    }
    let n = zt.len();
    let nf = n as f64;
    let mut loss = 0.0;
    let mut gt = zeros_like(zt);
    let mut gl = zeros_like(zl);
    for i in 0..n {
        let logits: Vec<f64> = zl.iter().map(|l| dot(&zt[i], l) / tau).collect();
        let lse = log_sum_exp(&logits);
        loss += lse - logits[i];
        for j in 0..n {
            let g = ((logits[j] - lse).exp() - if i == j { 1.0 } else { 0.0 }) / (nf * tau);
            if g == 0.0 {
                continue;
            }
            for k in 0..zt[i].len() {
                gt[i][k] += g * zl[j][k];
                gl[j][k] += g * zt[i][k];
            }
        }
    }
    Ok((loss / nf, gt, gl))
}

pub fn info_nce(zt: &[Vec<f64>], zl: &[Vec<f64>], tau: f64) -> Result<f64> {
    info_nce_with_grad(zt, zl, tau).map(|r| r.0)
}

/// Supervised contrastive loss over traffic rows, averaged over anchors
/// that have at least one same-class partner.
pub fn supcon_with_grad(z: &[Vec<f64>], labels: &[usize], tau: f64) -> Result<(f64, Rows)> {
    check_tau(tau)?;
    if z.len() != labels.len() {
        return Err(Error::Batch("supcon needs one label per row".into()));
    }
    let m = z.len();
    let anchors: Vec<usize> = (0..m)
        .filter(|&i| (0..m).any(|j| j != i && labels[j] == labels[i]))
        .collect();
    if anchors.is_empty() {
        return Err(Error::DegenerateBatch("no anchor has a same-class partner"));
    }
    let na = anchors.len() as f64;
    let mut loss = 0.0;
    let mut g = zeros_like(z);
    for &i in &anchors {
        let others: Vec<usize> = (0..m).filter(|&a| a != i).collect();
        let logits: Vec<f64> = others.iter().map(|&a| dot(&z[i], &z[a]) / tau).collect();
        let lse = log_sum_exp(&logits);
        let pos: Vec<usize> = (0..others.len())
            .filter(|&k| labels[others[k]] == labels[i])
            .collect();
        let np = pos.len() as f64;
        loss += pos.iter().map(|&k| lse - logits[k]).sum::<f64>() / np;
        for (k, &a) in others.iter().enumerate() {
            let is_pos = if labels[a] == labels[i] {
                1.0 / np
            } else {
                0.0
            };
            let coef = ((logits[k] - lse).exp() - is_pos) / (na * tau);
            if coef == 0.0 {
                continue;
            }
            for c in 0..z[i].len() {
                let (zi, za) = (z[i][c], z[a][c]);
                g[i][c] += coef * za;
                g[a][c] += coef * zi;
            }
        }
    }
    Ok((loss / na, g))
}

pub fn supcon(z: &[Vec<f64>], labels: &[usize], tau: f64) -> Result<f64> {
    supcon_with_grad(z, labels, tau).map(|r| r.0)
}

/// Mean squared distance over same-class pairs; zero without such pairs.
pub fn consistency_with_grad(z: &[Vec<f64>], labels: &[usize]) -> (f64, Rows) {
    let mut pairs = Vec::new();
    for i in 0..z.len() {
        for j in i + 1..z.len() {
            if labels[i] == labels[j] {
                pairs.push((i, j));
            }
        }
    }
    let mut g = zeros_like(z);
    if pairs.is_empty() {
        return (0.0, g);
    }
    let np = pairs.len() as f64;
    let mut loss = 0.0;
    for &(i, j) in &pairs {
        for c in 0..z[i].len() {
            let d = z[i][c] - z[j][c];
            loss += d * d;
            g[i][c] += 2.0 * d / np;
            g[j][c] -= 2.0 * d / np;
        }
    }
    (loss / np, g)
}

pub fn consistency(z: &[Vec<f64>], labels: &[usize]) -> f64 {
    consistency_with_grad(z, labels).0
}
