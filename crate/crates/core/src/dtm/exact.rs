//! Exact expected loss on enumerable spaces.
//!
//! Under the revealed-mass substitution the time integral against a mask
//! pattern with k masked positions has the closed form
//! `integral of s^(L-k) (1-s)^(k-1) ds = (L-k)! (k-1)! / L!`,
//! so the expected objective collapses to a finite weighted sum of
//! cross-entropies against per-row aggregated targets. This is the oracle
//! side of every minimizer and KL-bound check, and the training path for
//! exact-mode annealing.

use crate::error::{Error, Result};
use crate::model::{PosteriorFamily, TabularModel};
use crate::oracle::{ExactDistribution, RewardFn};
use crate::seq::MaskedSequence;

/// `integral_0^1 s^(L-k) (1-s)^(k-1) ds = (L-k)! (k-1)! / L!` — the total
/// time weight received by mask patterns with `k >= 1` masked positions.
pub fn beta_time_weight(len: usize, k: usize) -> f64 {
    debug_assert!(k >= 1 && k <= len);
    // 1 / (k * C(len, k)), computed in f64.
    let mut choose = 1.0f64;
    for j in 0..k {
        choose *= (len - j) as f64 / (j + 1) as f64;
    }
    1.0 / (k as f64 * choose)
}

/// One masked row of the exact expected objective: contributes
/// `-sum_v target(v) ln pi(v | state, position)` to the loss, and carries
/// total weight `weight = sum_v target(v)`.
#[derive(Debug, Clone)]
pub struct RowTarget {
    pub state: MaskedSequence,
    pub position: usize,
    pub weight: f64,
    pub target: Vec<f64>,
}

/// The exact expected objective as a finite list of row targets.
#[derive(Debug, Clone)]
pub struct LossRows {
    rows: Vec<RowTarget>,
}

impl LossRows {
    pub fn rows(&self) -> &[RowTarget] {
        &self.rows
    }

    /// Exact expected loss of an arbitrary posterior family.
    pub fn expected_loss<F: PosteriorFamily + ?Sized>(&self, family: &F) -> Result<f64> {
        let mut loss = 0.0;
        for row in &self.rows {
            let pi = family.row(&row.state, row.position);
            for (v, &q) in row.target.iter().enumerate() {
                if q != 0.0 {
                    let p = pi[v];
                    if p <= 0.0 {
                        return Err(Error::InfiniteKl(format!(
                            "family assigns zero mass at state {:?} position {} token {v}",
                            row.state.tokens(),
                            row.position
                        )));
                    }
                    loss -= q * p.ln();
                }
            }
        }
        Ok(loss)
    }

    /// Exact loss and full-batch gradient for a tabular softmax model. The
    /// logit-space gradient of each row is `weight * softmax - target`.
    pub fn tabular_loss_and_grad(&self, model: &TabularModel, grad: &mut [f64]) -> Result<f64> {
        grad.fill(0.0);
        let mut loss = 0.0;
        for row in &self.rows {
            loss += model.accumulate_row_grad(&row.state, row.position, &row.target, grad)?;
        }
        Ok(loss)
    }

    /// Largest row weight; useful for sizing gradient-descent steps.
    pub fn max_weight(&self) -> f64 {
        self.rows.iter().fold(0.0, |m, r| m.max(r.weight))
    }
}

/// Builds the exact expected objective for one annealing increment: base
/// measure `rho_a`, frozen reference family `pi_a`, step `h`, control
/// variate `c`. Rows exist for every reachable (state, masked position).
pub fn expected_loss_rows<F, R>(
    rho_a: &ExactDistribution,
    pi_a: &F,
    reward: &R,
    h: f64,
    c: f64,
) -> Result<LossRows>
where
    F: PosteriorFamily + ?Sized,
    R: RewardFn + ?Sized,
{
    let space = rho_a.space();
    let vocab = space.vocab();
    let v_count = vocab.size() as usize;
    let len = space.len();
    let mut rows = Vec::new();

    for rank in 0..space.state_count() {
        let x_t = space.state_at(rank);
        let masked = x_t.mask_positions(vocab);
        let k = masked.len();
        if k == 0 {
            continue;
        }
        // Aggregate over consistent completions: mass, weighted mass, and
        // per-position token-resolved sums.
        let mut mass = 0.0;
        let mut wmass = 0.0;
        let mut w_tok = vec![vec![0.0f64; v_count]; k];
        let mut p_tok = vec![vec![0.0f64; v_count]; k];
        space.for_each_consistent(&x_t, |x1, r| {
            let p = rho_a.probs()[r];
            if p > 0.0 {
                let w = (h * reward.reward(x1)).exp();
                mass += p;
                wmass += p * w;
                for (slot, &i) in masked.iter().enumerate() {
                    let tok = x1.get(i) as usize;
                    w_tok[slot][tok] += p * w;
                    p_tok[slot][tok] += p;
                }
            }
        })?;
        if mass <= 0.0 {
            continue;
        }
        let beta = beta_time_weight(len, k);
        for (slot, &i) in masked.iter().enumerate() {
            let target: Vec<f64> = if c != 0.0 {
                let ref_row = pi_a.row(&x_t, i);
                (0..v_count)
                    .map(|v| beta * (c * ref_row[v] * mass + w_tok[slot][v] - c * p_tok[slot][v]))
                    .collect()
            } else {
                (0..v_count).map(|v| beta * w_tok[slot][v]).collect()
            };
            rows.push(RowTarget {
                state: x_t.clone(),
                position: i,
                weight: beta * wmass,
                target,
            });
        }
    }
    Ok(LossRows { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{EsscherFamily, ExactPosterior, StateSpace};
    use crate::rng::Streams;
    use crate::seq::Vocabulary;

    #[test]
    fn beta_weights_sum_over_patterns_to_harmonic() {
        // Summed over all 2^L - 1 nonempty patterns, the weights give
        // sum_k C(L,k) / (k C(L,k)) = H_L, the expected number of reveal
        // events weighted by their time measure.
        for len in 1..=6usize {
            let mut total = 0.0;
            for k in 1..=len {
                let mut choose = 1.0f64;
                for j in 0..k {
                    choose *= (len - j) as f64 / (j + 1) as f64;
                }
                total += choose * beta_time_weight(len, k);
            }
            let harmonic: f64 = (1..=len).map(|k| 1.0 / k as f64).sum();
            assert!((total - harmonic).abs() < 1e-12);
        }
    }

    #[test]
    fn unbiased_target_identity_over_all_rows() {
        // The per-row aggregated target must equal the aggregated raw
        // one-hot target for every control variate: the weighted conditional
        // mean identity.
        let space = StateSpace::new(Vocabulary::new(2).unwrap(), 3);
        let mut rng = Streams::new(77).root();
        let rho = ExactDistribution::random(space.clone(), &mut rng);
        let reward = |x: &MaskedSequence| {
            x.tokens().iter().map(|&t| t as f64).sum::<f64>() / x.len() as f64
        };
        let pi_a = ExactPosterior::new(&rho);
        let h = 0.9;
        let base = expected_loss_rows(&rho, &pi_a, &reward, h, 0.0).unwrap();
        for c in [0.5, 1.0, 2.0] {
            let rows = expected_loss_rows(&rho, &pi_a, &reward, h, c).unwrap();
            assert_eq!(rows.rows().len(), base.rows().len());
            for (a, b) in rows.rows().iter().zip(base.rows()) {
                assert_eq!(a.state, b.state);
                assert_eq!(a.position, b.position);
                for (x, y) in a.target.iter().zip(&b.target) {
                    assert!((x - y).abs() < 1e-12, "c={c}: {x} vs {y}");
                }
            }
        }
    }

    #[test]
    fn minimizer_is_the_tilted_posterior() {
        // The exact loss at the tilted posterior family is strictly below the
        // loss at perturbed families.
        let space = StateSpace::new(Vocabulary::new(2).unwrap(), 2);
        let mut rng = Streams::new(3).root();
        let rho = ExactDistribution::random(space.clone(), &mut rng);
        let reward =
            |x: &MaskedSequence| x.tokens().iter().map(|&t| t as f64).sum::<f64>();
        let pi_a = ExactPosterior::new(&rho);
        let h = 0.6;
        for c in [0.0, 1.0] {
            let rows = expected_loss_rows(&rho, &pi_a, &reward, h, c).unwrap();
            let star = EsscherFamily::new(&rho, &reward, h);
            let loss_star = rows.expected_loss(&star).unwrap();
            let tilted = crate::oracle::tilt(&rho, &reward, h).unwrap();
            for _ in 0..25 {
                let perturbed = crate::oracle::TableFamily::materialize(
                    &EsscherFamily::new(&rho, &reward, h),
                    &tilted,
                    0.5,
                    &mut rng,
                );
                let loss_p = rows.expected_loss(&perturbed).unwrap();
                assert!(
                    loss_p > loss_star + 1e-12,
                    "c={c}: perturbed {loss_p} not above {loss_star}"
                );
            }
        }
    }
}
