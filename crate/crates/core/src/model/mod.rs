//! Parametric unmasking posteriors.
//!
//! Two implementations share one interface: a tabular softmax model over an
//! enumerable state space (exact, for oracle-grade checks) and a small neural
//! network (embeddings plus a two-hidden-layer feedforward stack with
//! analytic backpropagation) for maze-scale training.

mod checkpoint;
mod neural;
mod optim;
mod tabular;

pub use checkpoint::{load_checkpoint, save_checkpoint, ArchDescriptor, Checkpoint};
pub use neural::{NeuralConfig, NeuralModel};
pub use optim::{clip_grad_norm, AdamOptimizer, GradientDescent, OptimConfig, Optimizer};
pub use tabular::TabularModel;

use crate::error::Result;
use crate::seq::{MaskedSequence, Vocabulary};

/// Anything that can answer "what is the clean-token distribution at masked
/// position i of state x". The oracle's exact posteriors, the Esscher
/// reweighted posteriors, and both parametric models implement this.
pub trait PosteriorFamily {
    /// Simplex over the clean vocabulary for masked position `i` of `x`.
    fn row(&self, x: &MaskedSequence, i: usize) -> Vec<f64>;
}

/// A weighted cross-entropy term at one masked row: contributes
/// `weight * CE(target || pi_theta(.|x, position))` to a loss.
#[derive(Debug, Clone)]
pub struct CeItem {
    pub position: usize,
    /// Target vector over the clean vocabulary. Entries may be negative (the
    /// control-variate target allows that); the cross-entropy stays a linear
    /// functional of the target.
    pub target: Vec<f64>,
    pub weight: f64,
}

/// Trainable unmasking posterior with a flat parameter vector.
pub trait PosteriorModel: PosteriorFamily + Send + Sync {
    fn vocab(&self) -> Vocabulary;
    fn seq_len(&self) -> usize;
    fn num_params(&self) -> usize;
    fn params(&self) -> &[f64];
    fn params_mut(&mut self) -> &mut [f64];

    /// Full L-by-|V| matrix of per-position simplexes at the given
    /// temperature. Temperature 0 means argmax one-hot with ties broken by
    /// lowest token id.
    fn forward(&self, x: &MaskedSequence, temperature: f64) -> Matrix;

    /// Rows (at temperature 1) for the given positions only.
    fn rows_at(&self, x: &MaskedSequence, positions: &[usize]) -> Matrix;

    /// Accumulates `sum_k weight_k * grad[-sum_v target_k(v) ln pi(v|x, pos_k)]`
    /// into `grad` and returns the summed weighted cross-entropy. One forward
    /// and one backward pass regardless of how many rows are listed.
    fn weighted_ce_loss_grad(
        &self,
        x: &MaskedSequence,
        items: &[CeItem],
        grad: &mut [f64],
    ) -> Result<f64>;
}

/// Gradient of a single weighted cross-entropy row, as a dense vector over
/// the full parameter space.
pub fn weighted_ce_grad<M: PosteriorModel>(
    model: &M,
    x: &MaskedSequence,
    i: usize,
    target: &[f64],
    weight: f64,
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; model.num_params()];
    model.weighted_ce_loss_grad(
        x,
        &[CeItem {
            position: i,
            target: target.to_vec(),
            weight,
        }],
        &mut grad,
    )?;
    Ok(grad)
}

/// Deep copy whose outputs never change when the source keeps training.
pub fn clone_frozen<M: PosteriorModel + Clone>(model: &M) -> M {
    model.clone()
}

/// FNV-1a over the parameter bits; used to verify frozen references.
pub fn params_hash<M: PosteriorModel>(model: &M) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &p in model.params() {
        for b in p.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

/// Dense row-major matrix of simplex rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            debug_assert_eq!(row.len(), c);
            data.extend_from_slice(&row);
        }
        Matrix { rows: r, cols: c, data }
    }

    #[inline]
    pub fn n_rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn n_cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Softmax with temperature into `out`. Temperature 0 puts all mass on the
/// argmax (lowest index on ties).
pub(crate) fn softmax_into(logits: &[f64], temperature: f64, out: &mut [f64]) {
    assert!(temperature >= 0.0, "temperature must be nonnegative");
    if temperature == 0.0 {
        let mut best = 0usize;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        out.fill(0.0);
        out[best] = 1.0;
        return;
    }
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        max = max.max(l / temperature);
    }
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l / temperature - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// log softmax at temperature 1 (numerically safe: never -inf for finite
/// logits).
pub(crate) fn log_softmax_into(logits: &[f64], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &l in logits {
        max = max.max(l);
    }
    let mut sum = 0.0;
    for &l in logits {
        sum += (l - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l - lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut out = vec![0.0; 4];
        softmax_into(&[0.0; 4], 1.0, &mut out);
        for &p in &out {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn temperature_zero_is_argmax_with_low_tie() {
        let mut out = vec![0.0; 2];
        softmax_into(&[2.0, 1.0], 0.0, &mut out);
        assert_eq!(out, vec![1.0, 0.0]);
        softmax_into(&[3.0, 3.0], 0.0, &mut out);
        assert_eq!(out, vec![1.0, 0.0]);
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let logits = [0.3, -2.0, 5.0, 1.1];
        let mut p = vec![0.0; 4];
        let mut lp = vec![0.0; 4];
        softmax_into(&logits, 1.0, &mut p);
        log_softmax_into(&logits, &mut lp);
        for i in 0..4 {
            assert!((p[i].ln() - lp[i]).abs() < 1e-12);
        }
    }
}
