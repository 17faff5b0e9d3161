//! Path-space KL between two unmasking chains.
//!
//! With identical hazards the path KL reduces to the time integral of the
//! hazard-weighted sum of local posterior KLs over masked positions. The
//! expectation over states is computed exactly by summing over (clean
//! sequence, mask pattern) pairs; the time integral substitutes `s =
//! alpha(t)` so the weight against revealed-mass measure is `1/(1-s)` and the
//! hazard singularity at t = 1 disappears, then applies the midpoint rule.

use crate::error::Result;
use crate::model::PosteriorFamily;
use crate::oracle::{kl_row, ExactDistribution};
use crate::schedule::Schedule;

pub const DEFAULT_PATH_KL_POINTS: usize = 512;

/// Integrates `hazard(t) * E_P[sum over masked i of KL(pi_p || pi_q)] dt`
/// where P is the interpolant path measure with terminal law
/// `rho_terminal_p` and local posteriors `pi_p`.
///
/// `pi_q` must be absolutely continuous w.r.t. `pi_p` at every reachable
/// state; a violation reports the offending state. The substitution makes
/// the value schedule-independent, which is why `schedule` only documents
/// the chain both families share.
pub fn path_kl<P, Q>(
    pi_p: &P,
    pi_q: &Q,
    rho_terminal_p: &ExactDistribution,
    _schedule: &Schedule,
    n_time_points: usize,
) -> Result<f64>
where
    P: PosteriorFamily + ?Sized,
    Q: PosteriorFamily + ?Sized,
{
    let space = rho_terminal_p.space();
    let vocab = space.vocab();
    let len = space.len();

    // coeff[k] collects mass(x_t) * sum_i KL at states with k masks; the
    // time integral then weighs each k by integral of s^(L-k) (1-s)^(k-1).
    let mut coeff = vec![0.0f64; len + 1];
    for rank in 0..space.state_count() {
        let x_t = space.state_at(rank);
        let masked = x_t.mask_positions(vocab);
        if masked.is_empty() {
            continue;
        }
        let mut mass = 0.0;
        space.for_each_consistent(&x_t, |_, r| mass += rho_terminal_p.probs()[r])?;
        if mass <= 0.0 {
            continue;
        }
        let mut kl_sum = 0.0;
        for &i in &masked {
            let p = pi_p.row(&x_t, i);
            let q = pi_q.row(&x_t, i);
            kl_sum += kl_row(&p, &q, || {
                format!("state {:?} position {i}", x_t.tokens())
            })?;
        }
        coeff[masked.len()] += mass * kl_sum;
    }

    let n = n_time_points.max(1);
    let mut total = 0.0;
    for j in 0..n {
        let s = (j as f64 + 0.5) / n as f64;
        let mut integrand = 0.0;
        for (k, &c) in coeff.iter().enumerate().skip(1) {
            if c != 0.0 {
                integrand += c * s.powi((len - k) as i32) * (1.0 - s).powi(k as i32 - 1);
            }
        }
        total += integrand;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{terminal_law, ExactPosterior, StateSpace, TableFamily, DEFAULT_CLEAN_CAP};
    use crate::oracle::kl_divergence;
    use crate::rng::Streams;
    use crate::seq::{MaskedSequence, Vocabulary};

    #[test]
    fn identical_families_have_zero_path_kl() {
        let space = StateSpace::new(Vocabulary::new(2).unwrap(), 3);
        let mut rng = Streams::new(4).root();
        let rho = ExactDistribution::random(space, &mut rng);
        let pi = ExactPosterior::new(&rho);
        let v = path_kl(&pi, &pi, &rho, &Schedule::Linear, 512).unwrap();
        assert!(v.abs() < 1e-14, "v = {v}");
    }

    #[test]
    fn single_token_case_is_one_posterior_kl() {
        // One unmasking event: the integral reduces to the KL of the fully
        // masked row, exactly (the integrand is constant in s).
        let vocab = Vocabulary::new(3).unwrap();
        let space = StateSpace::new(vocab.clone(), 1);
        let masked = MaskedSequence::fully_masked(1, &vocab);

        let mut p = TableFamily::new(3);
        p.set_row(masked.clone(), 0, vec![0.5, 0.3, 0.2]);
        let mut q = TableFamily::new(3);
        q.set_row(masked.clone(), 0, vec![0.2, 0.4, 0.4]);

        let rho_p = terminal_law(&p, space, DEFAULT_CLEAN_CAP).unwrap();
        let got = path_kl(&p, &q, &rho_p, &Schedule::Linear, 64).unwrap();
        let expect = 0.5 * (0.5f64 / 0.2).ln() + 0.3 * (0.3f64 / 0.4).ln() + 0.2 * (0.2f64 / 0.4).ln();
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn path_kl_dominates_terminal_kl() {
        // Data processing: the terminal marginal is a function of the path.
        let mut rng = Streams::new(17).root();
        for trial in 0..20 {
            let space = StateSpace::new(Vocabulary::new(2).unwrap(), 3);
            let rho_p = ExactDistribution::random(space.clone(), &mut rng);
            let exact = ExactPosterior::new(&rho_p);
            let pi_p = TableFamily::materialize(&exact, &rho_p, 0.0, &mut rng);
            let pi_q = TableFamily::materialize(&exact, &rho_p, 0.7, &mut rng);

            let path = path_kl(&pi_p, &pi_q, &rho_p, &Schedule::Linear, 512).unwrap();
            let term_q = terminal_law(&pi_q, space, DEFAULT_CLEAN_CAP).unwrap();
            let term = kl_divergence(&rho_p, &term_q).unwrap();
            assert!(
                path >= term - 1e-9,
                "trial {trial}: path {path} < terminal {term}"
            );
        }
    }

    #[test]
    fn support_violation_reports_state() {
        let vocab = Vocabulary::new(2).unwrap();
        let space = StateSpace::new(vocab.clone(), 1);
        let masked = MaskedSequence::fully_masked(1, &vocab);
        let mut p = TableFamily::new(2);
        p.set_row(masked.clone(), 0, vec![0.5, 0.5]);
        let mut q = TableFamily::new(2);
        q.set_row(masked.clone(), 0, vec![1.0, 0.0]);
        let rho_p = terminal_law(&p, space, DEFAULT_CLEAN_CAP).unwrap();
        let err = path_kl(&p, &q, &rho_p, &Schedule::Linear, 16).unwrap_err();
        assert!(matches!(err, crate::error::Error::InfiniteKl(_)));
    }
}
