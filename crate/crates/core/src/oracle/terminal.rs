//! Exact terminal law of the unmasking chain for a given posterior family.

use crate::error::{Error, Result};
use crate::model::PosteriorFamily;
use crate::oracle::{ExactDistribution, StateSpace};

pub const DEFAULT_CLEAN_CAP: usize = 10_000;

/// Exact distribution of the clean sequence produced by running the chain
/// from the fully masked state with posterior `pi`.
///
/// Computed by forward dynamic programming over masked states: the rates give
/// every still-masked coordinate the same hazard, so the next coordinate to
/// reveal is uniform among the masked ones and the revealed token follows
/// `pi(.|x, i)`. States are processed in order of decreasing mask count.
pub fn terminal_law<F: PosteriorFamily + ?Sized>(
    pi: &F,
    space: StateSpace,
    clean_cap: usize,
) -> Result<ExactDistribution> {
    if space.clean_count() > clean_cap {
        return Err(Error::Size(format!(
            "state space has {} clean sequences, cap is {clean_cap}",
            space.clean_count()
        )));
    }
    let vocab = space.vocab().clone();
    let v = vocab.size() as usize;
    let base = v + 1;
    let len = space.len();

    // Digit place values for in-place digit substitution on state ranks.
    let mut place = vec![1usize; len];
    for i in 1..len {
        place[i] = place[i - 1] * base;
    }

    let mut mass = vec![0.0f64; space.state_count()];
    let fully_masked_rank: usize = (0..len).map(|i| v * place[i]).sum();
    mass[fully_masked_rank] = 1.0;

    // Bucket states by mask count so flow always moves to fewer masks.
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); len + 1];
    for rank in 0..space.state_count() {
        let mut k = 0;
        let mut r = rank;
        for _ in 0..len {
            if r % base == v {
                k += 1;
            }
            r /= base;
        }
        buckets[k].push(rank);
    }

    for k in (1..=len).rev() {
        for &rank in &buckets[k] {
            let p = mass[rank];
            if p <= 0.0 {
                continue;
            }
            let x = space.state_at(rank);
            let masked = x.mask_positions(&vocab);
            debug_assert_eq!(masked.len(), k);
            let share = p / k as f64;
            for &i in &masked {
                let row = pi.row(&x, i);
                debug_assert_eq!(row.len(), v);
                for (tok, &pv) in row.iter().enumerate() {
                    if pv > 0.0 {
                        // Replace the mask digit (value v) at position i by tok.
                        let next = rank - (v - tok) * place[i];
                        mass[next] += share * pv;
                    }
                }
            }
        }
    }

    let mut probs = vec![0.0f64; space.clean_count()];
    for &rank in &buckets[0] {
        if mass[rank] > 0.0 {
            let x = space.state_at(rank);
            probs[space.clean_rank(&x)] = mass[rank];
        }
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Internal(format!(
            "terminal law mass {total} (posterior rows may not be simplexes)"
        )));
    }
    // Remove the tiny accumulated rounding so downstream tables validate.
    for p in probs.iter_mut() {
        *p /= total;
    }
    ExactDistribution::new(space, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{ExactPosterior, TableFamily};
    use crate::rng::Streams;
    use crate::seq::{MaskedSequence, Vocabulary};

    #[test]
    fn ground_truth_posterior_reproduces_rho() {
        let mut rng = Streams::new(21).root();
        for (v, len) in [(2u32, 2usize), (2, 3), (3, 2), (3, 3)] {
            let space = StateSpace::new(Vocabulary::new(v).unwrap(), len);
            let rho = ExactDistribution::random(space.clone(), &mut rng);
            let pi = ExactPosterior::new(&rho);
            let back = terminal_law(&pi, space, DEFAULT_CLEAN_CAP).unwrap();
            assert!(back.tv(&rho) < 1e-10, "tv = {}", back.tv(&rho));
        }
    }

    #[test]
    fn single_position_terminal_is_the_masked_row() {
        let vocab = Vocabulary::new(3).unwrap();
        let space = StateSpace::new(vocab.clone(), 1);
        let mut table = TableFamily::new(3);
        table.set_row(
            MaskedSequence::fully_masked(1, &vocab),
            0,
            vec![0.2, 0.5, 0.3],
        );
        let law = terminal_law(&table, space, DEFAULT_CLEAN_CAP).unwrap();
        assert!((law.probs()[0] - 0.2).abs() < 1e-15);
        assert!((law.probs()[1] - 0.5).abs() < 1e-15);
        assert!((law.probs()[2] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn one_hot_rows_give_point_mass() {
        let vocab = Vocabulary::new(2).unwrap();
        let space = StateSpace::new(vocab.clone(), 3);
        // Every row puts all mass on token 1.
        struct OneHot;
        impl PosteriorFamily for OneHot {
            fn row(&self, _x: &MaskedSequence, _i: usize) -> Vec<f64> {
                vec![0.0, 1.0]
            }
        }
        let law = terminal_law(&OneHot, space.clone(), DEFAULT_CLEAN_CAP).unwrap();
        let target = MaskedSequence::new(vec![1, 1, 1], &vocab).unwrap();
        assert!((law.prob(&target) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cap_is_enforced() {
        let space = StateSpace::new(Vocabulary::new(10).unwrap(), 5);
        let rho = ExactDistribution::uniform(space.clone());
        let pi = ExactPosterior::new(&rho);
        assert!(matches!(
            terminal_law(&pi, space, DEFAULT_CLEAN_CAP),
            Err(crate::error::Error::Size(_))
        ));
    }
}
