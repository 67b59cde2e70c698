//! Attention-guided token masking for the masked video modeling stage.
//!
//! Importance of a token is its average attention received, computed from a
//! column-stochastic attention map (A[l, j] = attention token j assigns to
//! token l). The lowest-scoring ceil(rho * L) tokens are masked, ties broken
//! by lower token index.

use crate::encoders::TokenSeq;
use crate::error::{Error, Result};
use crate::tape::Tensor;

/// Receiver-indexed attention map: every column is one token's outgoing
/// attention distribution.
#[derive(Clone, Debug)]
pub struct AttentionMap(Tensor);

impl AttentionMap {
    pub fn new(a: Tensor) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::NonSquareAttention { rows: a.rows, cols: a.cols });
        }
        for v in &a.data {
            assert!(*v >= 0.0, "attention weights must be non-negative");
        }
        for j in 0..a.cols {
            let col: f64 = (0..a.rows).map(|l| a.at(l, j)).sum();
            assert!((col - 1.0).abs() < 1e-5, "column {j} sums to {col}, not 1");
        }
        Ok(AttentionMap(a))
    }

    pub fn matrix(&self) -> &Tensor {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows == 0
    }
}

/// s_l = (1/L) sum_j A[l, j] — average attention received by token l.
/// Sums to 1 for column-stochastic A.
pub fn importance_scores(a: &Tensor) -> Result<Vec<f64>> {
    if a.rows != a.cols {
        return Err(Error::NonSquareAttention { rows: a.rows, cols: a.cols });
    }
    let l = a.rows as f64;
    Ok((0..a.rows).map(|r| a.row(r).iter().sum::<f64>() / l).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenMask {
    /// true = masked
    pub mask: Vec<bool>,
    /// sorted ascending complement of the masked set
    pub visible: Vec<usize>,
    pub rho: f64,
}

impl TokenMask {
    pub fn masked_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }
}

/// Mask the ceil(rho * L) lowest-scoring tokens; ties mask the lower index.
pub fn build_mask(scores: &[f64], rho: f64) -> Result<TokenMask> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::BadMaskRatio(rho));
    }
    let l = scores.len();
    let count = (rho * l as f64).ceil() as usize;
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    let mut mask = vec![false; l];
    for &i in order.iter().take(count) {
        mask[i] = true;
    }
    let visible = (0..l).filter(|&i| !mask[i]).collect();
    Ok(TokenMask { mask, visible, rho })
}

/// Keep only visible tokens, preserving order and positional metadata.
pub fn select_visible(tokens: &TokenSeq, mask: &TokenMask) -> Result<TokenSeq> {
    if tokens.len() != mask.len() {
        return Err(Error::MaskLengthMismatch { got: tokens.len(), expected: mask.len() });
    }
    Ok(tokens.select(&mask.visible))
}
