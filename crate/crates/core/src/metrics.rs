//! Reconstruction error measures.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Mat;
use crate::signal::Mask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// `‖(1−M)∘(X̂−X)‖²/(NM)`, the training-loss normalization.
    pub masked_mse_nm: f64,
    /// Same numerator over the number of missing entries.
    pub masked_mse_missing: f64,
    pub whole_mse: f64,
    /// Per block, `‖error‖²/‖truth‖²` over the block's missing entries. A
    /// block with no missing entries scores 0; a block whose missing truth is
    /// all zero reports the raw squared error.
    pub per_modality_nmse: Vec<f64>,
}

/// Contiguous equal-width column blocks, e.g. 4 blocks of 28 days.
pub fn contiguous_blocks(cols: usize, blocks: usize) -> Vec<Vec<usize>> {
    let width = cols / blocks.max(1);
    (0..blocks).map(|b| (b * width..(b + 1) * width).collect()).collect()
}

/// Blocks from 1-based labels, one block per label value in ascending order.
pub fn label_blocks(labels: &[usize]) -> Vec<Vec<usize>> {
    let max = labels.iter().copied().max().unwrap_or(0);
    (1..=max).map(|c| labels.iter().enumerate().filter(|(_, &l)| l == c).map(|(j, _)| j).collect()).collect()
}

pub fn evaluate(x_hat: &Mat, x_gt: &Mat, mask: &Mask, blocks: &[Vec<usize>]) -> Result<Metrics> {
    if x_hat.dim() != x_gt.dim() || mask.dim() != x_gt.dim() {
        return Err(Error::Dimension(format!(
            "estimate {:?}, truth {:?}, mask {:?}",
            x_hat.dim(),
            x_gt.dim(),
            mask.dim()
        )));
    }
    let m = x_gt.ncols();
    if let Some(&j) = blocks.iter().flatten().find(|&&j| j >= m) {
        return Err(Error::Dimension(format!("block column {j} out of range for {m} columns")));
    }
    let nm = x_gt.len() as f64;
    let obs = mask.values();
    let (mut masked, mut whole) = (0.0, 0.0);
    for ((idx, a), b) in x_hat.indexed_iter().zip(x_gt.iter()) {
        let e = (a - b) * (a - b);
        whole += e;
        if obs[idx] == 0.0 {
            masked += e;
        }
    }
    let missing = mask.missing_count();
    let per_modality_nmse = blocks
        .iter()
        .map(|cols| {
            let (mut err, mut truth) = (0.0, 0.0);
            for &j in cols {
                for i in 0..x_gt.nrows() {
                    if obs[[i, j]] == 0.0 {
                        let d = x_hat[[i, j]] - x_gt[[i, j]];
                        err += d * d;
                        truth += x_gt[[i, j]] * x_gt[[i, j]];
                    }
                }
            }
            if truth > 0.0 {
                err / truth
            } else {
                err
            }
        })
        .collect();
    Ok(Metrics {
        masked_mse_nm: masked / nm,
        masked_mse_missing: masked / missing.max(1) as f64,
        whole_mse: whole / nm,
        per_modality_nmse,
    })
}
