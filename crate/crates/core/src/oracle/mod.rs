//! Exact reference computations on enumerable sequence spaces.
//!
//! Everything here enumerates: distributions are dense tables over all clean
//! sequences, posteriors are computed by summing over consistent completions,
//! and terminal laws come from dynamic programming over masked states. These
//! routines are correctness instruments, not a training path; they exist so
//! every analytic claim in the crate can be checked against brute force.

mod dist;
mod families;
mod pathkl;
mod terminal;

pub use dist::{ExactDistribution, StateSpace};
pub use families::{EsscherFamily, ExactPosterior, TableFamily};
pub use pathkl::{path_kl, DEFAULT_PATH_KL_POINTS};
pub use terminal::{terminal_law, DEFAULT_CLEAN_CAP};

use crate::error::{Error, Result};
use crate::model::PosteriorFamily;
use crate::seq::MaskedSequence;

/// Reward function over clean sequences.
pub trait RewardFn: Sync {
    fn reward(&self, x: &MaskedSequence) -> f64;
}

impl<F: Fn(&MaskedSequence) -> f64 + Sync> RewardFn for F {
    fn reward(&self, x: &MaskedSequence) -> f64 {
        self(x)
    }
}

/// Dense reward table indexed by clean-sequence rank.
#[derive(Debug, Clone)]
pub struct RewardTable {
    space: StateSpace,
    values: Vec<f64>,
}

impl RewardTable {
    pub fn new(space: StateSpace, values: Vec<f64>) -> Result<Self> {
        if values.len() != space.clean_count() {
            return Err(Error::Config(format!(
                "reward table has {} entries, space has {} clean sequences",
                values.len(),
                space.clean_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("reward table contains non-finite values".into()));
        }
        Ok(RewardTable { space, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

impl RewardFn for RewardTable {
    fn reward(&self, x: &MaskedSequence) -> f64 {
        self.values[self.space.clean_rank(x)]
    }
}

/// Annealing state: current tilt level `a`, step `h`, terminal multiplier `A`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TiltParams {
    pub a: f64,
    pub h: f64,
    pub a_max: f64,
}

impl TiltParams {
    pub fn new(a: f64, h: f64, a_max: f64) -> Result<Self> {
        if !(a >= 0.0 && h > 0.0 && a <= a_max && a + h <= a_max + 1e-12) {
            return Err(Error::Config(format!(
                "tilt params must satisfy 0 <= a <= a+h <= A (a={a}, h={h}, A={a_max})"
            )));
        }
        Ok(TiltParams { a, h, a_max })
    }
}

/// Distribution proportional to `rho(x) * exp(delta * r(x))`, exactly
/// normalized. Weights go through a log-sum-exp so large `delta * r` cannot
/// overflow.
pub fn tilt<R: RewardFn + ?Sized>(
    rho: &ExactDistribution,
    reward: &R,
    delta: f64,
) -> Result<ExactDistribution> {
    if !delta.is_finite() {
        return Err(Error::Domain(format!("tilt level must be finite, got {delta}")));
    }
    let space = rho.space();
    let mut logw = vec![f64::NEG_INFINITY; space.clean_count()];
    let mut max = f64::NEG_INFINITY;
    for (rank, &p) in rho.probs().iter().enumerate() {
        if p > 0.0 {
            let x = space.clean_at(rank);
            let r = reward.reward(&x);
            if !r.is_finite() {
                return Err(Error::Domain(format!(
                    "reward is not finite on a support point (rank {rank})"
                )));
            }
            let lw = p.ln() + delta * r;
            logw[rank] = lw;
            max = max.max(lw);
        }
    }
    if !max.is_finite() {
        return Err(Error::Internal("tilt produced an empty support".into()));
    }
    let mut probs: Vec<f64> = logw.iter().map(|&lw| (lw - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    if !(sum.is_finite() && sum > 0.0) {
        return Err(Error::Internal(format!("tilt normalization mass {sum}")));
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    ExactDistribution::new(space.clone(), probs)
}

/// Ground-truth unmasking posterior: `P[x1^i = v | x1 agrees with x_t on
/// unmasked positions]`. Valid because the mask pattern is independent of
/// `x1` under the masking interpolant, so conditioning on `x_t` is
/// conditioning on agreement.
pub fn exact_posterior(
    rho: &ExactDistribution,
    x_t: &MaskedSequence,
    i: usize,
) -> Result<Vec<f64>> {
    let space = rho.space();
    if !x_t.is_masked_at(i, space.vocab()) {
        return Err(Error::Contract(format!("position {i} of the state is not masked")));
    }
    let v_count = space.vocab().size() as usize;
    let mut num = vec![0.0; v_count];
    let mut mass = 0.0;
    space.for_each_consistent(x_t, |x1, rank| {
        let p = rho.probs()[rank];
        mass += p;
        num[x1.get(i) as usize] += p;
    })?;
    if mass <= 0.0 {
        return Err(Error::UnreachableState(format!(
            "state {:?} has probability zero under the distribution",
            x_t.tokens()
        )));
    }
    for n in num.iter_mut() {
        *n /= mass;
    }
    Ok(num)
}

/// Tilted posterior computed by conditional reweighting: the normalized
/// conditional mean of `exp(h r(x1)) * 1{x1^i = v}` under `rho_a` given the
/// observed state. The equality with `exact_posterior` of the tilted
/// distribution is the identity the verification suite checks; the two code
/// paths are kept independent on purpose.
pub fn esscher_posterior<R: RewardFn + ?Sized>(
    rho_a: &ExactDistribution,
    reward: &R,
    h: f64,
    x_t: &MaskedSequence,
    i: usize,
) -> Result<Vec<f64>> {
    let space = rho_a.space();
    if !x_t.is_masked_at(i, space.vocab()) {
        return Err(Error::Contract(format!("position {i} of the state is not masked")));
    }
    let v_count = space.vocab().size() as usize;

    // Two sweeps: find the max log-weight over the conditioning event, then
    // accumulate stabilized weights.
    let mut max_lw = f64::NEG_INFINITY;
    let mut entries: Vec<(usize, f64, u32)> = Vec::new();
    space.for_each_consistent(x_t, |x1, rank| {
        let p = rho_a.probs()[rank];
        if p > 0.0 {
            let lw = p.ln() + h * reward.reward(&x1);
            max_lw = max_lw.max(lw);
            entries.push((rank, lw, x1.get(i)));
        }
    })?;
    if entries.is_empty() {
        return Err(Error::UnreachableState(format!(
            "state {:?} has probability zero under the distribution",
            x_t.tokens()
        )));
    }
    let mut num = vec![0.0; v_count];
    let mut den = 0.0;
    for &(_, lw, v) in &entries {
        let w = (lw - max_lw).exp();
        den += w;
        num[v as usize] += w;
    }
    for n in num.iter_mut() {
        *n /= den;
    }
    Ok(num)
}

/// KL divergence between dense distributions; errors if the second has a
/// zero where the first has mass.
pub fn kl_divergence(p: &ExactDistribution, q: &ExactDistribution) -> Result<f64> {
    if p.space() != q.space() {
        return Err(Error::Config("KL between different spaces".into()));
    }
    let mut kl = 0.0;
    for (rank, (&pp, &qq)) in p.probs().iter().zip(q.probs()).enumerate() {
        if pp > 0.0 {
            if qq <= 0.0 {
                return Err(Error::InfiniteKl(format!(
                    "terminal support violation at clean rank {rank}"
                )));
            }
            kl += pp * (pp / qq).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// KL between two simplex rows; errors with the offending state description.
pub(crate) fn kl_row(p: &[f64], q: &[f64], context: impl Fn() -> String) -> Result<f64> {
    let mut kl = 0.0;
    for (&pp, &qq) in p.iter().zip(q) {
        if pp > 0.0 {
            if qq <= 0.0 {
                return Err(Error::InfiniteKl(context()));
            }
            kl += pp * (pp / qq).ln();
        }
    }
    Ok(kl.max(0.0))
}

/// Report of the terminal-KL bound check.
#[derive(Debug, Clone, Copy)]
pub struct KlBoundReport {
    /// KL between the tilted target and the model's terminal law.
    pub lhs: f64,
    /// Scaled excess of the exact expected loss over its minimum.
    pub rhs: f64,
    pub holds: bool,
}

/// Checks that the terminal KL is bounded by the scaled excess loss:
/// `KL(tilt(rho_a, r, h) || terminal(theta)) <= (L(theta) - L(theta*)) / Z`
/// with `Z = E_a[exp(h r)]` and `theta*` the tilted posterior family.
pub fn check_kl_bound<F, R>(
    theta: &F,
    rho_a: &ExactDistribution,
    reward: &R,
    h: f64,
    c: f64,
) -> Result<KlBoundReport>
where
    F: PosteriorFamily,
    R: RewardFn + ?Sized,
{
    let space = rho_a.space();
    let rho_next = tilt(rho_a, reward, h)?;
    let rho_theta = terminal_law(theta, space.clone(), DEFAULT_CLEAN_CAP)?;
    let lhs = kl_divergence(&rho_next, &rho_theta)?;

    let mut z = 0.0;
    for (rank, &p) in rho_a.probs().iter().enumerate() {
        if p > 0.0 {
            z += p * (h * reward.reward(&space.clean_at(rank))).exp();
        }
    }

    let reference = ExactPosterior::new(rho_a);
    let rows = crate::dtm::expected_loss_rows(rho_a, &reference, reward, h, c)?;
    let loss_theta = rows.expected_loss(theta)?;
    let minimizer = EsscherFamily::new(rho_a, reward, h);
    let loss_star = rows.expected_loss(&minimizer)?;
    let rhs = (loss_theta - loss_star) / z;

    Ok(KlBoundReport {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
    })
}
