//! Posterior families backed by exact enumeration.

use rand::Rng;
use std::collections::HashMap;

use crate::model::PosteriorFamily;
use crate::oracle::{esscher_posterior, exact_posterior, ExactDistribution, RewardFn};
use crate::seq::MaskedSequence;

/// Ground-truth Bayes posterior of a dense distribution.
pub struct ExactPosterior<'a> {
    rho: &'a ExactDistribution,
}

impl<'a> ExactPosterior<'a> {
    pub fn new(rho: &'a ExactDistribution) -> Self {
        ExactPosterior { rho }
    }
}

impl PosteriorFamily for ExactPosterior<'_> {
    fn row(&self, x: &MaskedSequence, i: usize) -> Vec<f64> {
        exact_posterior(self.rho, x, i).expect("exact posterior row")
    }
}

/// Tilted posterior via conditional reweighting under the base measure.
pub struct EsscherFamily<'a, R: RewardFn + ?Sized> {
    rho_a: &'a ExactDistribution,
    reward: &'a R,
    h: f64,
}

impl<'a, R: RewardFn + ?Sized> EsscherFamily<'a, R> {
    pub fn new(rho_a: &'a ExactDistribution, reward: &'a R, h: f64) -> Self {
        EsscherFamily { rho_a, reward, h }
    }
}

impl<R: RewardFn + ?Sized> PosteriorFamily for EsscherFamily<'_, R> {
    fn row(&self, x: &MaskedSequence, i: usize) -> Vec<f64> {
        esscher_posterior(self.rho_a, self.reward, self.h, x, i).expect("tilted posterior row")
    }
}

/// Posterior family stored as an explicit table over (state, position).
/// Rows default to uniform when absent.
#[derive(Debug, Clone)]
pub struct TableFamily {
    vocab_size: usize,
    rows: HashMap<(MaskedSequence, usize), Vec<f64>>,
}

impl TableFamily {
    pub fn new(vocab_size: usize) -> Self {
        TableFamily {
            vocab_size,
            rows: HashMap::new(),
        }
    }

    pub fn set_row(&mut self, x: MaskedSequence, i: usize, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.vocab_size);
        self.rows.insert((x, i), row);
    }

    /// Materializes every masked row of `base` over an enumerable space,
    /// optionally perturbing it with multiplicative noise of the given scale
    /// (re-normalized), which keeps rows strictly positive.
    pub fn materialize<F: PosteriorFamily, RG: Rng>(
        base: &F,
        rho: &ExactDistribution,
        perturb_scale: f64,
        rng: &mut RG,
    ) -> Self {
        let space = rho.space();
        let mut out = TableFamily::new(space.vocab().size() as usize);
        for rank in 0..space.state_count() {
            let x = space.state_at(rank);
            let masked = x.mask_positions(space.vocab());
            if masked.is_empty() {
                continue;
            }
            // Skip states that cannot occur under rho.
            let mut mass = 0.0;
            space
                .for_each_consistent(&x, |_, r| mass += rho.probs()[r])
                .expect("enumeration");
            if mass <= 0.0 {
                continue;
            }
            for &i in &masked {
                let mut row = base.row(&x, i);
                if perturb_scale > 0.0 {
                    let mut sum = 0.0;
                    for p in row.iter_mut() {
                        *p = p.max(1e-12) * (perturb_scale * (rng.gen::<f64>() - 0.5)).exp();
                        sum += *p;
                    }
                    for p in row.iter_mut() {
                        *p /= sum;
                    }
                }
                out.set_row(x.clone(), i, row);
            }
        }
        out
    }
}

impl PosteriorFamily for TableFamily {
    fn row(&self, x: &MaskedSequence, i: usize) -> Vec<f64> {
        match self.rows.get(&(x.clone(), i)) {
            Some(r) => r.clone(),
            None => vec![1.0 / self.vocab_size as f64; self.vocab_size],
        }
    }
}
