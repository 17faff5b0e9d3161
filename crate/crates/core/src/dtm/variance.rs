//! Exact gradient variance of the per-sample estimators.
//!
//! For one draw of (clean sequence, state, masked position) the two gradient
//! estimators are, up to an overall sign,
//!
//! `G_0 = w phi(x1^i)` and `G_1 = w mu + (w - 1) phi(x1^i)`,
//!
//! with `w = exp(h r(x1))`, `phi(v)` the score of the trained row, and `mu`
//! the reference-weighted mean score. At h = 0 they reduce to the raw score
//! and its conditional mean, so the variance gap is exactly the expected
//! conditional variance (law of total variance). All moments here are
//! computed by exact enumeration over (sequence, time grid, mask pattern,
//! position).

use crate::error::Result;
use crate::model::{PosteriorFamily, PosteriorModel, TabularModel};
use crate::oracle::{ExactDistribution, RewardFn};

#[derive(Debug, Clone, Copy)]
pub struct VarianceEntry {
    pub h: f64,
    pub var_g0: f64,
    pub var_g1: f64,
}

#[derive(Debug, Clone)]
pub struct VarianceReport {
    pub per_h: Vec<VarianceEntry>,
    /// var(G_0) - var(G_1) at h = 0.
    pub h0_gap: f64,
    /// E[Var(phi(x1^i) | state, position)], computed independently.
    pub h0_total_variance_term: f64,
}

struct JointTerm {
    state_rank: usize,
    position: usize,
    /// Probability of (state, position) under the sampling scheme.
    weight: f64,
    /// Conditional law of the clean token at `position` given the state.
    posterior: Vec<f64>,
    /// Trained row's softmax; scores are phi(v) = e_v - softmax.
    softmax: Vec<f64>,
    /// Reference row entering mu.
    reference: Vec<f64>,
}

/// Exact covariance traces of the two estimators for each annealing step in
/// `h_values`, plus the h = 0 law-of-total-variance decomposition.
///
/// Sampling scheme: clean sequence from `rho_a`; time uniform on a midpoint
/// grid of `time_points`; mask pattern from independent reveals at the grid
/// time, conditioned on at least one mask; position uniform among the masked
/// ones. `pi_ref` supplies the reference rows entering `mu` and the
/// conditional-variance term; `theta` supplies the scores.
pub fn grad_variance_report<F, R>(
    rho_a: &ExactDistribution,
    pi_ref: &F,
    reward: &R,
    theta: &TabularModel,
    h_values: &[f64],
    time_points: usize,
) -> Result<VarianceReport>
where
    F: PosteriorFamily + ?Sized,
    R: RewardFn + ?Sized,
{
    let space = rho_a.space();
    let vocab = space.vocab();
    let v_count = vocab.size() as usize;
    let len = space.len();
    let n = time_points.max(1);

    // Pattern weight by mask count, averaged over the time grid; normalized
    // below over the nonempty-pattern event.
    let mut pattern_w = vec![0.0f64; len + 1];
    for j in 0..n {
        let s = (j as f64 + 0.5) / n as f64;
        for k in 1..=len {
            pattern_w[k] += s.powi((len - k) as i32) * (1.0 - s).powi(k as i32) / n as f64;
        }
    }

    let mut terms: Vec<JointTerm> = Vec::new();
    let mut total = 0.0;
    for rank in 0..space.state_count() {
        let x_t = space.state_at(rank);
        let masked = x_t.mask_positions(vocab);
        let k = masked.len();
        if k == 0 {
            continue;
        }
        let mut mass = 0.0;
        space.for_each_consistent(&x_t, |_, r| mass += rho_a.probs()[r])?;
        if mass <= 0.0 {
            continue;
        }
        let base_w = mass * pattern_w[k] / k as f64;
        for &i in &masked {
            let mut posterior = vec![0.0f64; v_count];
            space.for_each_consistent(&x_t, |x1, r| {
                posterior[x1.get(i) as usize] += rho_a.probs()[r] / mass;
            })?;
            terms.push(JointTerm {
                state_rank: rank,
                position: i,
                weight: base_w,
                posterior,
                softmax: theta.row(&x_t, i),
                reference: pi_ref.row(&x_t, i),
            });
            total += base_w;
        }
    }
    for t in terms.iter_mut() {
        t.weight /= total;
    }

    let variance_at = |h: f64| -> Result<(f64, f64)> {
        let dim = theta.num_params();
        let mut mean0 = vec![0.0f64; dim];
        let mut mean1 = vec![0.0f64; dim];
        let mut e2_0 = 0.0;
        let mut e2_1 = 0.0;
        for term in &terms {
            let x_t = space.state_at(term.state_rank);
            let i = term.position;
            // Token-resolved conditional masses of w and w^2 given the state.
            let mut mass = 0.0;
            let mut wm = vec![0.0f64; v_count];
            let mut w2m = vec![0.0f64; v_count];
            space.for_each_consistent(&x_t, |x1, r| {
                let p = rho_a.probs()[r];
                if p > 0.0 {
                    let w = (h * reward.reward(x1)).exp();
                    mass += p;
                    let tok = x1.get(i) as usize;
                    wm[tok] += p * w;
                    w2m[tok] += p * w * w;
                }
            })?;

            let offset = theta.row_offset(&x_t, i);
            let p = &term.softmax;
            // mu = sum_v reference(v) (e_v - p) = reference - p.
            let mu: Vec<f64> = term.reference.iter().zip(p).map(|(r, q)| r - q).collect();
            for v in 0..v_count {
                let pv = term.posterior[v];
                if pv <= 0.0 {
                    continue;
                }
                // Conditional moments of w given the token value.
                let ew = wm[v] / mass / pv;
                let ew2 = w2m[v] / mass / pv;
                let prob = term.weight * pv;
                for u in 0..v_count {
                    let phi_u = if u == v { 1.0 - p[u] } else { -p[u] };
                    // G0 = w phi; G1 = w mu + (w - 1) phi = w (mu + phi) - phi.
                    mean0[offset + u] += prob * ew * phi_u;
                    mean1[offset + u] += prob * (ew * (mu[u] + phi_u) - phi_u);
                }
                let mut phi_sq = 0.0;
                let mut mu_dot_phi = 0.0;
                for u in 0..v_count {
                    let phi_u = if u == v { 1.0 - p[u] } else { -p[u] };
                    phi_sq += phi_u * phi_u;
                    mu_dot_phi += mu[u] * phi_u;
                }
                let mu_sq: f64 = mu.iter().map(|m| m * m).sum();
                e2_0 += prob * ew2 * phi_sq;
                let mp_sq = mu_sq + 2.0 * mu_dot_phi + phi_sq;
                e2_1 += prob * (ew2 * mp_sq - 2.0 * ew * (mu_dot_phi + phi_sq) + phi_sq);
            }
        }
        let m0_sq: f64 = mean0.iter().map(|m| m * m).sum();
        let m1_sq: f64 = mean1.iter().map(|m| m * m).sum();
        Ok((e2_0 - m0_sq, e2_1 - m1_sq))
    };

    let mut per_h = Vec::new();
    for &h in h_values {
        let (v0, v1) = variance_at(h)?;
        per_h.push(VarianceEntry { h, var_g0: v0, var_g1: v1 });
    }

    let (v0_h0, v1_h0) = variance_at(0.0)?;

    // Independent route to E[Var(phi(x1^i) | state, position)]: trace form
    // sum_v pi(v) ||phi(v)||^2 - ||sum_v pi(v) phi(v)||^2 under the true
    // posterior.
    let mut total_var_term = 0.0;
    for term in &terms {
        let p = &term.softmax;
        let mut e_sq = 0.0;
        let mut mean = vec![0.0f64; v_count];
        for v in 0..v_count {
            let pv = term.posterior[v];
            if pv <= 0.0 {
                continue;
            }
            let mut sq = 0.0;
            for u in 0..v_count {
                let phi_u = if u == v { 1.0 - p[u] } else { -p[u] };
                mean[u] += pv * phi_u;
                sq += phi_u * phi_u;
            }
            e_sq += pv * sq;
        }
        let mean_sq: f64 = mean.iter().map(|m| m * m).sum();
        total_var_term += term.weight * (e_sq - mean_sq);
    }

    Ok(VarianceReport {
        per_h,
        h0_gap: v0_h0 - v1_h0,
        h0_total_variance_term: total_var_term,
    })
}
