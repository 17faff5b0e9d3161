//! Tabular softmax posterior over an enumerable state space.
//!
//! One logit vector per (state rank, position). Exact by construction: the
//! gradient of a weighted cross-entropy w.r.t. a row's logits is
//! `softmax * sum(target) - target` in closed form, which makes this the
//! model of choice for minimizer-identity checks.

use crate::error::{Error, Result};
use crate::model::{log_softmax_into, softmax_into, CeItem, Matrix, PosteriorFamily, PosteriorModel};
use crate::oracle::{exact_posterior, ExactDistribution, StateSpace};
use crate::seq::{MaskedSequence, Vocabulary};

const MAX_TABULAR_PARAMS: usize = 50_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularModel {
    space: StateSpace,
    logits: Vec<f64>,
}

impl TabularModel {
    pub fn zero_logits(vocab: Vocabulary, len: usize) -> Self {
        let space = StateSpace::new(vocab, len);
        let n = space.state_count() * len * vocab.size() as usize;
        assert!(n <= MAX_TABULAR_PARAMS, "tabular table too large ({n} logits)");
        TabularModel {
            space,
            logits: vec![0.0; n],
        }
    }

    /// Rows initialized to the exact posterior of `rho` (log-probabilities as
    /// logits) at every reachable state; unreachable rows stay at zero.
    pub fn from_exact(rho: &ExactDistribution) -> Result<Self> {
        let space = rho.space().clone();
        let vocab = *space.vocab();
        let mut model = TabularModel::zero_logits(vocab, space.len());
        for rank in 0..space.state_count() {
            let x = space.state_at(rank);
            let masked = x.mask_positions(&vocab);
            if masked.is_empty() {
                continue;
            }
            let mut mass = 0.0;
            space.for_each_consistent(&x, |_, r| mass += rho.probs()[r])?;
            if mass <= 0.0 {
                continue;
            }
            for &i in &masked {
                let post = exact_posterior(rho, &x, i)?;
                let offset = model.row_offset(&x, i);
                for (v, &p) in post.iter().enumerate() {
                    model.logits[offset + v] = p.max(1e-300).ln();
                }
            }
        }
        Ok(model)
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    /// Flat offset of the logit row for (state, position).
    #[inline]
    pub fn row_offset(&self, x: &MaskedSequence, i: usize) -> usize {
        let v = self.space.vocab().size() as usize;
        (self.space.state_rank(x) * self.space.len() + i) * v
    }

    fn row_logits(&self, x: &MaskedSequence, i: usize) -> &[f64] {
        let off = self.row_offset(x, i);
        &self.logits[off..off + self.space.vocab().size() as usize]
    }

    /// Adds the closed-form row gradient `softmax * sum(target) - target` to
    /// `grad` and returns the row's cross-entropy `-sum target ln softmax`.
    pub fn accumulate_row_grad(
        &self,
        x: &MaskedSequence,
        i: usize,
        target: &[f64],
        grad: &mut [f64],
    ) -> Result<f64> {
        let v = self.space.vocab().size() as usize;
        if target.len() != v {
            return Err(Error::Contract("target length mismatch".into()));
        }
        let off = self.row_offset(x, i);
        let logits = &self.logits[off..off + v];
        let mut p = vec![0.0; v];
        let mut lp = vec![0.0; v];
        softmax_into(logits, 1.0, &mut p);
        log_softmax_into(logits, &mut lp);
        let sum_t: f64 = target.iter().sum();
        let mut loss = 0.0;
        for u in 0..v {
            loss -= target[u] * lp[u];
            grad[off + u] += p[u] * sum_t - target[u];
        }
        Ok(loss)
    }
}

impl PosteriorFamily for TabularModel {
    fn row(&self, x: &MaskedSequence, i: usize) -> Vec<f64> {
        let v = self.space.vocab().size() as usize;
        let mut out = vec![0.0; v];
        softmax_into(self.row_logits(x, i), 1.0, &mut out);
        out
    }
}

impl PosteriorModel for TabularModel {
    fn vocab(&self) -> Vocabulary {
        *self.space.vocab()
    }

    fn seq_len(&self) -> usize {
        self.space.len()
    }

    fn num_params(&self) -> usize {
        self.logits.len()
    }

    fn params(&self) -> &[f64] {
        &self.logits
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    fn forward(&self, x: &MaskedSequence, temperature: f64) -> Matrix {
        let v = self.space.vocab().size() as usize;
        let len = self.space.len();
        let mut out = Matrix::zeros(len, v);
        for i in 0..len {
            softmax_into(self.row_logits(x, i), temperature, out.row_mut(i));
        }
        out
    }

    fn rows_at(&self, x: &MaskedSequence, positions: &[usize]) -> Matrix {
        let v = self.space.vocab().size() as usize;
        let mut out = Matrix::zeros(positions.len(), v);
        for (k, &i) in positions.iter().enumerate() {
            softmax_into(self.row_logits(x, i), 1.0, out.row_mut(k));
        }
        out
    }

    fn weighted_ce_loss_grad(
        &self,
        x: &MaskedSequence,
        items: &[CeItem],
        grad: &mut [f64],
    ) -> Result<f64> {
        let v = self.space.vocab().size() as usize;
        let mut loss = 0.0;
        let mut p = vec![0.0; v];
        let mut lp = vec![0.0; v];
        for item in items {
            let off = self.row_offset(x, item.position);
            let logits = &self.logits[off..off + v];
            softmax_into(logits, 1.0, &mut p);
            log_softmax_into(logits, &mut lp);
            let sum_t: f64 = item.target.iter().sum();
            for u in 0..v {
                loss -= item.weight * item.target[u] * lp[u];
                grad[off + u] += item.weight * (p[u] * sum_t - item.target[u]);
            }
        }
        if !loss.is_finite() {
            return Err(Error::Internal(format!("non-finite tabular loss {loss}")));
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Streams;

    #[test]
    fn from_exact_rows_match_posteriors() {
        let space = StateSpace::new(Vocabulary::new(3).unwrap(), 2);
        let mut rng = Streams::new(14).root();
        let rho = ExactDistribution::random(space.clone(), &mut rng);
        let model = TabularModel::from_exact(&rho).unwrap();
        let vocab = *space.vocab();
        for rank in 0..space.state_count() {
            let x = space.state_at(rank);
            for i in x.mask_positions(&vocab) {
                let row = model.row(&x, i);
                let post = exact_posterior(&rho, &x, i).unwrap();
                for (a, b) in row.iter().zip(&post) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grad_zero_when_target_is_softmax() {
        let vocab = Vocabulary::new(2).unwrap();
        let model = TabularModel::zero_logits(vocab, 2);
        let x = MaskedSequence::fully_masked(2, &vocab);
        let target = model.row(&x, 0);
        let mut grad = vec![0.0; model.num_params()];
        model
            .weighted_ce_loss_grad(
                &x,
                &[CeItem { position: 0, target, weight: 1.0 }],
                &mut grad,
            )
            .unwrap();
        assert!(grad.iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn zero_weight_means_zero_gradient() {
        let vocab = Vocabulary::new(2).unwrap();
        let model = TabularModel::zero_logits(vocab, 2);
        let x = MaskedSequence::fully_masked(2, &vocab);
        let mut grad = vec![0.0; model.num_params()];
        model
            .weighted_ce_loss_grad(
                &x,
                &[CeItem { position: 1, target: vec![1.0, 0.0], weight: 0.0 }],
                &mut grad,
            )
            .unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }
}
