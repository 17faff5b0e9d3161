//! Dense distributions over enumerable sequence spaces and the mixed-radix
//! rank encodings that index them.

use rand::Rng;

use crate::error::{Error, Result};
use crate::seq::{MaskedSequence, Token, Vocabulary};

/// The space of length-`len` sequences over a vocabulary. Provides bijective
/// rank encodings for clean sequences (base |V|) and masked states
/// (base |V|+1, highest digit = mask), both little-endian in position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSpace {
    vocab: Vocabulary,
    len: usize,
}

impl StateSpace {
    pub fn new(vocab: Vocabulary, len: usize) -> Self {
        assert!(len > 0, "sequence length must be positive");
        StateSpace { vocab, len }
    }

    #[inline]
    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn clean_count(&self) -> usize {
        (self.vocab.size() as usize).pow(self.len as u32)
    }

    pub fn state_count(&self) -> usize {
        (self.vocab.size() as usize + 1).pow(self.len as u32)
    }

    pub fn clean_rank(&self, x: &MaskedSequence) -> usize {
        debug_assert_eq!(x.len(), self.len);
        let base = self.vocab.size() as usize;
        let mut rank = 0;
        for i in (0..self.len).rev() {
            let t = x.get(i);
            debug_assert!(self.vocab.is_clean_token(t), "clean rank of a masked state");
            rank = rank * base + t as usize;
        }
        rank
    }

    pub fn clean_at(&self, mut rank: usize) -> MaskedSequence {
        let base = self.vocab.size() as usize;
        let mut tokens = Vec::with_capacity(self.len);
        for _ in 0..self.len {
            tokens.push((rank % base) as Token);
            rank /= base;
        }
        MaskedSequence::new(tokens, &self.vocab).expect("rank decodes to a valid sequence")
    }

    pub fn state_rank(&self, x: &MaskedSequence) -> usize {
        debug_assert_eq!(x.len(), self.len);
        let base = self.vocab.size() as usize + 1;
        let mut rank = 0;
        for i in (0..self.len).rev() {
            rank = rank * base + x.get(i) as usize;
        }
        rank
    }

    pub fn state_at(&self, mut rank: usize) -> MaskedSequence {
        let base = self.vocab.size() as usize + 1;
        let mut tokens = Vec::with_capacity(self.len);
        for _ in 0..self.len {
            tokens.push((rank % base) as Token);
            rank /= base;
        }
        MaskedSequence::new(tokens, &self.vocab).expect("rank decodes to a valid state")
    }

    /// Visits every clean completion of `x_t` (clean tokens filled into the
    /// masked positions) together with its clean rank.
    pub fn for_each_consistent<F>(&self, x_t: &MaskedSequence, mut visit: F) -> Result<()>
    where
        F: FnMut(&MaskedSequence, usize),
    {
        if x_t.len() != self.len {
            return Err(Error::Config(format!(
                "state has length {}, space expects {}",
                x_t.len(),
                self.len
            )));
        }
        let masked = x_t.mask_positions(&self.vocab);
        let v = self.vocab.size() as usize;
        let mut tokens: Vec<Token> = x_t.tokens().to_vec();
        for &i in &masked {
            tokens[i] = 0;
        }
        loop {
            let x1 = MaskedSequence::new(tokens.clone(), &self.vocab)
                .expect("completion is a valid clean sequence");
            let rank = self.clean_rank(&x1);
            visit(&x1, rank);
            // Odometer over the masked positions, base |V|.
            let mut pos = 0;
            loop {
                if pos == masked.len() {
                    return Ok(());
                }
                let idx = masked[pos];
                if (tokens[idx] as usize) + 1 < v {
                    tokens[idx] += 1;
                    break;
                }
                tokens[idx] = 0;
                pos += 1;
            }
        }
    }
}

/// Dense probability table over all clean sequences of a space.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactDistribution {
    space: StateSpace,
    probs: Vec<f64>,
}

impl ExactDistribution {
    /// Validates the invariants: correct length, nonnegative entries, total
    /// mass 1 within 1e-12.
    pub fn new(space: StateSpace, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != space.clean_count() {
            return Err(Error::Config(format!(
                "table has {} entries, space has {} clean sequences",
                probs.len(),
                space.clean_count()
            )));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::Contract("probabilities must be nonnegative and finite".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(ExactDistribution { space, probs })
    }

    /// Normalizes arbitrary nonnegative weights.
    pub fn from_weights(space: StateSpace, weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0 && sum.is_finite()) {
            return Err(Error::Contract(format!("weight mass {sum} is not normalizable")));
        }
        let probs = weights.into_iter().map(|w| w / sum).collect();
        ExactDistribution::new(space, probs)
    }

    pub fn uniform(space: StateSpace) -> Self {
        let n = space.clean_count();
        ExactDistribution {
            probs: vec![1.0 / n as f64; n],
            space,
        }
    }

    pub fn point_mass(space: StateSpace, x: &MaskedSequence) -> Result<Self> {
        if !x.is_clean(space.vocab()) {
            return Err(Error::Contract("point mass requires a clean sequence".into()));
        }
        let mut probs = vec![0.0; space.clean_count()];
        probs[space.clean_rank(x)] = 1.0;
        ExactDistribution::new(space, probs)
    }

    /// Random strictly positive distribution (flat Dirichlet via exponential
    /// spacings).
    pub fn random<R: Rng>(space: StateSpace, rng: &mut R) -> Self {
        let n = space.clean_count();
        let weights: Vec<f64> = (0..n).map(|_| -rng.gen::<f64>().max(1e-300).ln()).collect();
        ExactDistribution::from_weights(space, weights).expect("positive weights normalize")
    }

    #[inline]
    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    #[inline]
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn prob(&self, x: &MaskedSequence) -> f64 {
        self.probs[self.space.clean_rank(x)]
    }

    /// Marginal distribution of the token at one position.
    pub fn marginal(&self, i: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.space.vocab().size() as usize];
        for (rank, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                let x = self.space.clean_at(rank);
                out[x.get(i) as usize] += p;
            }
        }
        out
    }

    pub fn expectation<F: Fn(&MaskedSequence) -> f64>(&self, f: F) -> f64 {
        let mut acc = 0.0;
        for (rank, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                acc += p * f(&self.space.clean_at(rank));
            }
        }
        acc
    }

    /// Total variation distance.
    pub fn tv(&self, other: &ExactDistribution) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(v: u32, len: usize) -> StateSpace {
        StateSpace::new(Vocabulary::new(v).unwrap(), len)
    }

    #[test]
    fn clean_rank_bijective() {
        let s = space(3, 3);
        for rank in 0..s.clean_count() {
            let x = s.clean_at(rank);
            assert_eq!(s.clean_rank(&x), rank);
        }
    }

    #[test]
    fn state_rank_bijective() {
        let s = space(2, 3);
        for rank in 0..s.state_count() {
            let x = s.state_at(rank);
            assert_eq!(s.state_rank(&x), rank);
        }
    }

    #[test]
    fn consistent_enumeration_counts() {
        let s = space(2, 3);
        let v = s.vocab().clone();
        let m = v.mask_id();
        let x_t = MaskedSequence::new(vec![0, m, m], &v).unwrap();
        let mut seen = Vec::new();
        s.for_each_consistent(&x_t, |x1, rank| {
            assert_eq!(x1.get(0), 0);
            seen.push(rank);
        })
        .unwrap();
        assert_eq!(seen.len(), 4);
        let mut dedup = seen.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 4);
    }

    #[test]
    fn uniform_and_random_are_distributions() {
        let s = space(3, 2);
        let u = ExactDistribution::uniform(s.clone());
        assert!((u.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut rng = crate::rng::Streams::new(1).root();
        let r = ExactDistribution::random(s, &mut rng);
        assert!((r.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(r.probs().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn marginal_of_uniform_is_uniform() {
        let s = space(2, 2);
        let u = ExactDistribution::uniform(s);
        assert_eq!(u.marginal(0), vec![0.5, 0.5]);
    }

    #[test]
    fn tv_of_identical_is_zero() {
        let s = space(2, 2);
        let u = ExactDistribution::uniform(s);
        assert_eq!(u.tv(&u.clone()), 0.0);
    }

    #[test]
    fn new_rejects_bad_tables() {
        let s = space(2, 2);
        assert!(ExactDistribution::new(s.clone(), vec![0.5, 0.5]).is_err());
        assert!(ExactDistribution::new(s.clone(), vec![0.5, 0.5, 0.25, 0.0]).is_err());
        assert!(ExactDistribution::new(s, vec![0.5, 0.5, -0.25, 0.25]).is_err());
    }
}
