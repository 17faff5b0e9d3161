//! The tilt-matching objective family.
//!
//! One annealing increment `a -> a + h` trains the model posterior to match
//! the tilted posterior by minimizing a weighted cross-entropy against the
//! control-variate target
//!
//! `T_c(v | x_t, i, x1) = [c pi_a(v|x_t,i) + (w - c) 1{v = x1^i}] / w`,
//!
//! `w = exp(h r(x1))`. The target's weighted conditional mean equals that of
//! the raw one-hot for every measurable `c`, so the minimizer is the tilted
//! posterior for `c = 0` and `c = 1` alike, while `c = 1` trades the one-hot
//! for the frozen reference row and cuts gradient variance at small `h`.
//!
//! Time is sampled through the revealed-mass substitution `s = alpha(t)`:
//! `s` uniform, reveal probability `s`, weight `1/(1-s)`. The substitution
//! both removes the hazard singularity and makes the loss value independent
//! of the schedule; the schedule arguments document the chain being trained.

mod exact;
mod variance;

pub use exact::{beta_time_weight, expected_loss_rows, LossRows, RowTarget};
pub use variance::{grad_variance_report, VarianceEntry, VarianceReport};

use rand::Rng;

use crate::error::{Error, Result};
use crate::interpolant::SarLayout;
use crate::model::{CeItem, PosteriorModel};
use crate::rng::{StreamDomain, Streams};
use crate::schedule::Schedule;
use crate::seq::{MaskedSequence, Vocabulary};

/// Fixed chunking for batch parallelism, independent of the thread pool so
/// reductions are bit-reproducible.
const GRAD_CHUNKS: usize = 8;

/// Reused per-chunk gradient buffers; allocating and faulting fresh
/// megabyte-scale buffers every step dominated small-step training.
static GRAD_SCRATCH: std::sync::Mutex<Vec<Vec<f64>>> = std::sync::Mutex::new(Vec::new());

fn take_scratch(chunks: usize, len: usize) -> Vec<Vec<f64>> {
    let mut pool = GRAD_SCRATCH.lock().unwrap();
    let mut out = Vec::with_capacity(chunks);
    while out.len() < chunks {
        match pool.pop() {
            Some(mut buf) => {
                buf.clear();
                buf.resize(len, 0.0);
                out.push(buf);
            }
            None => out.push(vec![0.0; len]),
        }
    }
    out
}

fn return_scratch(bufs: Vec<Vec<f64>>) {
    let mut pool = GRAD_SCRATCH.lock().unwrap();
    for buf in bufs {
        pool.push(buf);
    }
    // Keep the pool bounded.
    while pool.len() > 2 * GRAD_CHUNKS {
        pool.pop();
    }
}

/// Time sampling strategy for the loss integral over revealed mass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeSampling {
    /// Independent uniform draws.
    Uniform,
    /// One draw per stratum of the (sequence, draw) grid, with the
    /// assignment rotated by the step salt; the step average matches the
    /// uniform sampler with much lower variance against the 1/(1-s) weight.
    Stratified,
    /// Stratified draws from the density proportional to the 1/(1-s) weight
    /// itself, so the time weight is a constant and draws concentrate where
    /// few positions remain masked.
    HazardStratified,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DtmConfig {
    /// Control variate c; 0 and 1 are the studied settings, any finite value
    /// is accepted. Only constant c is implemented.
    pub control_variate: f64,
    /// Annealing step h >= 0 (0 recovers the plain masked-diffusion loss).
    pub annealing_step: f64,
    /// Interpolant draws per buffer sequence per loss evaluation.
    pub draws_per_sequence: usize,
    /// Revealed-mass cap: time sampling stops at s = 1 - s_cap.
    pub s_cap: f64,
    /// Rewards are clipped to [-clip, clip] before exponentiation.
    pub reward_clip: f64,
    pub time_sampling: TimeSampling,
}

impl DtmConfig {
    pub fn new(control_variate: f64, annealing_step: f64) -> Result<Self> {
        if !control_variate.is_finite() {
            return Err(Error::Config("control variate must be finite".into()));
        }
        if !(annealing_step >= 0.0) || !annealing_step.is_finite() {
            return Err(Error::Config(format!(
                "annealing step must be finite and >= 0, got {annealing_step}"
            )));
        }
        let reward_clip = if annealing_step > 0.0 {
            20.0 / annealing_step
        } else {
            f64::INFINITY
        };
        Ok(DtmConfig {
            control_variate,
            annealing_step,
            draws_per_sequence: 1,
            s_cap: 1e-3,
            reward_clip,
            time_sampling: TimeSampling::Uniform,
        })
    }

    pub fn with_draws(mut self, draws: usize) -> Self {
        self.draws_per_sequence = draws.max(1);
        self
    }

    pub fn with_reward_clip(mut self, clip: f64) -> Self {
        self.reward_clip = clip;
        self
    }

    pub fn with_time_sampling(mut self, strategy: TimeSampling) -> Self {
        self.time_sampling = strategy;
        self
    }

    /// Importance weight exp(h * clip(r)).
    pub fn weight(&self, reward: f64) -> f64 {
        let r = reward.clamp(-self.reward_clip, self.reward_clip);
        (self.annealing_step * r).exp()
    }
}

/// The control-variate target. Entries sum to 1 by construction and may be
/// individually negative when `w < c`.
pub fn tc_target(
    x_t: &MaskedSequence,
    i: usize,
    x1: &MaskedSequence,
    pi_a_row: &[f64],
    reward_value: f64,
    h: f64,
    c: f64,
    vocab: &Vocabulary,
) -> Result<Vec<f64>> {
    if !x_t.is_masked_at(i, vocab) {
        return Err(Error::Contract(format!("position {i} of the state is not masked")));
    }
    if !x1.is_clean(vocab) {
        return Err(Error::Contract("terminal sequence must be clean".into()));
    }
    for p in 0..x_t.len() {
        if !x_t.is_masked_at(p, vocab) && x_t.get(p) != x1.get(p) {
            return Err(Error::Contract(format!(
                "terminal sequence disagrees with the state at unmasked position {p}"
            )));
        }
    }
    let w = (h * reward_value).exp();
    Ok(tc_target_from_row(pi_a_row, x1.get(i) as usize, w, c))
}

#[inline]
pub(crate) fn tc_target_from_row(pi_a_row: &[f64], x1_token: usize, w: f64, c: f64) -> Vec<f64> {
    let mut t: Vec<f64> = pi_a_row.iter().map(|&p| c * p / w).collect();
    t[x1_token] += (w - c) / w;
    t
}

/// One-hot target used when c = 0 without touching the reference model.
#[inline]
fn one_hot(v: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; n];
    t[v] = 1.0;
    t
}

/// Loss-side diagnostics for one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats {
    pub loss: f64,
    /// Mean importance weight over the (sequence, draw) grid.
    pub mean_weight: f64,
    /// Effective sample size of the weights.
    pub ess: f64,
}

/// Per-step diagnostic record emitted by trainers.
#[derive(Debug, Clone, Copy)]
pub struct StepDiag {
    pub tilt_level: f64,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub mean_weight: f64,
    pub ess: f64,
}

enum Masking<'a> {
    AnyOrder,
    Sar(&'a SarLayout),
}

/// Monte Carlo value and gradient of the any-order objective on a minibatch
/// of (clean sequence, cached reward) pairs. `pi_a` is the frozen reference;
/// it may be omitted only when the control variate is 0. The gradient is
/// accumulated into `grad` (cleared first); the loss is normalized by batch
/// size and draw count only, never by masked count.
pub fn cdtm_loss_and_grad<Mt, Ma>(
    batch: &[(MaskedSequence, f64)],
    pi_a: Option<&Ma>,
    theta: &Mt,
    config: &DtmConfig,
    schedule: &Schedule,
    streams: &Streams,
    salt: u64,
    grad: &mut [f64],
) -> Result<LossStats>
where
    Mt: PosteriorModel,
    Ma: PosteriorModel,
{
    loss_and_grad_impl(batch, pi_a, theta, config, schedule, Masking::AnyOrder, streams, salt, grad)
}

/// The block-aligned variant: states are drawn from the SAR interpolant, the
/// masked-position sum is restricted to the active block, and the time weight
/// carries the block count.
pub fn sar_cdtm_loss_and_grad<Mt, Ma>(
    batch: &[(MaskedSequence, f64)],
    pi_a: Option<&Ma>,
    theta: &Mt,
    config: &DtmConfig,
    layout: &SarLayout,
    schedule: &Schedule,
    streams: &Streams,
    salt: u64,
    grad: &mut [f64],
) -> Result<LossStats>
where
    Mt: PosteriorModel,
    Ma: PosteriorModel,
{
    loss_and_grad_impl(
        batch,
        pi_a,
        theta,
        config,
        schedule,
        Masking::Sar(layout),
        streams,
        salt,
        grad,
    )
}

#[allow(clippy::too_many_arguments)]
fn loss_and_grad_impl<Mt, Ma>(
    batch: &[(MaskedSequence, f64)],
    pi_a: Option<&Ma>,
    theta: &Mt,
    config: &DtmConfig,
    _schedule: &Schedule,
    masking: Masking<'_>,
    streams: &Streams,
    salt: u64,
    grad: &mut [f64],
) -> Result<LossStats>
where
    Mt: PosteriorModel,
    Ma: PosteriorModel,
{
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    if pi_a.is_none() && config.control_variate != 0.0 {
        return Err(Error::Contract(
            "a frozen reference model is required when the control variate is nonzero".into(),
        ));
    }
    let vocab = theta.vocab();
    let len = theta.seq_len();
    for (x1, _) in batch {
        if x1.len() != len || !x1.is_clean(&vocab) {
            return Err(Error::Contract("batch sequences must be clean and of model length".into()));
        }
    }
    if let Masking::Sar(layout) = &masking {
        if layout.seq_len() != len {
            return Err(Error::Config("SAR layout length differs from model length".into()));
        }
    }

    grad.fill(0.0);
    let draws = config.draws_per_sequence;
    let norm = 1.0 / (batch.len() * draws) as f64;
    let smax = 1.0 - config.s_cap;

    let n_chunks = GRAD_CHUNKS.min(batch.len());
    let chunk_len = batch.len().div_ceil(n_chunks);
    let ranges: Vec<(usize, usize)> = (0..n_chunks)
        .map(|c| (c * chunk_len, ((c + 1) * chunk_len).min(batch.len())))
        .collect();

    let run_chunk = |&(lo, hi): &(usize, usize),
                     chunk_grad: &mut Vec<f64>|
     -> Result<(f64, f64, f64)> {
        let mut loss = 0.0;
        let mut w_sum = 0.0;
        let mut w_sq_sum = 0.0;
        let mut items: Vec<CeItem> = Vec::new();
        for idx in lo..hi {
            let (x1, reward) = &batch[idx];
            let w = config.weight(*reward);
            for d in 0..draws {
                let k = idx * draws + d;
                let mut rng = streams.stream_pair(StreamDomain::TimeDraw, salt, k as u64);
                // Rotate the stratum assignment by the salt so every batch
                // slot cycles through all strata across steps.
                let total = batch.len() * draws;
                let stratum = ((k + salt as usize) % total, total);
                let (x_t, positions, mult) = draw_state(
                    x1,
                    &masking,
                    smax,
                    config.time_sampling,
                    stratum,
                    &vocab,
                    &mut rng,
                );
                w_sum += w;
                w_sq_sum += w * w;
                if positions.is_empty() {
                    continue;
                }
                let row_weight = norm * mult * w;
                items.clear();
                if config.control_variate != 0.0 {
                    let ref_rows = pi_a.unwrap().rows_at(&x_t, &positions);
                    for (k, &i) in positions.iter().enumerate() {
                        let target = tc_target_from_row(
                            ref_rows.row(k),
                            x1.get(i) as usize,
                            w,
                            config.control_variate,
                        );
                        items.push(CeItem { position: i, target, weight: row_weight });
                    }
                } else {
                    for &i in &positions {
                        items.push(CeItem {
                            position: i,
                            target: one_hot(x1.get(i) as usize, vocab.size() as usize),
                            weight: row_weight,
                        });
                    }
                }
                loss += theta.weighted_ce_loss_grad(&x_t, &items, chunk_grad)?;
            }
        }
        Ok((loss, w_sum, w_sq_sum))
    };

    let mut scratch = take_scratch(n_chunks, grad.len());
    let chunk_outs: Vec<Result<(f64, f64, f64)>> = if n_chunks > 1 {
        use rayon::prelude::*;
        ranges
            .par_iter()
            .zip(scratch.par_iter_mut())
            .map(|(range, buf)| run_chunk(range, buf))
            .collect()
    } else {
        ranges
            .iter()
            .zip(scratch.iter_mut())
            .map(|(range, buf)| run_chunk(range, buf))
            .collect()
    };

    let mut loss = 0.0;
    let mut w_sum = 0.0;
    let mut w_sq_sum = 0.0;
    let mut failed = None;
    for out in chunk_outs {
        match out {
            Ok((l, ws, wsq)) => {
                loss += l;
                w_sum += ws;
                w_sq_sum += wsq;
            }
            Err(e) => failed = Some(e),
        }
    }
    for buf in &scratch {
        for (g, o) in grad.iter_mut().zip(buf) {
            *g += o;
        }
    }
    return_scratch(scratch);
    if let Some(e) = failed {
        return Err(e);
    }

    if !loss.is_finite() {
        return Err(Error::DivergedLoss(format!(
            "non-finite loss {loss} (h = {}, c = {})",
            config.annealing_step, config.control_variate
        )));
    }
    let n_draws = (batch.len() * draws) as f64;
    Ok(LossStats {
        loss,
        mean_weight: w_sum / n_draws,
        ess: if w_sq_sum > 0.0 { w_sum * w_sum / w_sq_sum } else { 0.0 },
    })
}

/// Draws a partially masked state plus the positions entering the loss sum
/// and the time-weight multiplier attached to them.
fn draw_state<R: Rng>(
    x1: &MaskedSequence,
    masking: &Masking<'_>,
    smax: f64,
    sampling: TimeSampling,
    stratum: (usize, usize),
    vocab: &Vocabulary,
    rng: &mut R,
) -> (MaskedSequence, Vec<usize>, f64) {
    let len = x1.len();
    // Draw the revealed mass s and the estimator weight for the integral
    // of f(s)/(1-s) over [0, smax].
    let (s, time_weight) = {
        let u = match sampling {
            TimeSampling::Uniform => rng.gen::<f64>(),
            TimeSampling::Stratified | TimeSampling::HazardStratified => {
                let (k, total) = stratum;
                (k as f64 + rng.gen::<f64>()) / total as f64
            }
        };
        match sampling {
            TimeSampling::Uniform | TimeSampling::Stratified => {
                let s = smax * u;
                (s, smax / (1.0 - s))
            }
            TimeSampling::HazardStratified => {
                // Density proportional to 1/(1-s): s = 1 - (1-smax)^u.
                let log_mass = -(1.0 - smax).ln();
                let s = 1.0 - (-u * log_mass).exp();
                (s, log_mass)
            }
        }
    };
    match masking {
        Masking::AnyOrder => {
            let mut x_t = MaskedSequence::fully_masked(len, vocab);
            let mut positions = Vec::new();
            for i in 0..len {
                if rng.gen::<f64>() < s {
                    x_t.set_unchecked(i, x1.get(i));
                } else {
                    positions.push(i);
                }
            }
            (x_t, positions, time_weight)
        }
        Masking::Sar(layout) => {
            let m = layout.block_count();
            // Skip the block draw when there is a single block so the draw
            // stream pairs exactly with the any-order sampler.
            let b = if m > 1 { rng.gen_range(0..m) } else { 0 };
            let mut x_t = MaskedSequence::fully_masked(len, vocab);
            let mut positions = Vec::new();
            for i in 0..len {
                let bi = i / layout.block_size();
                if bi < b {
                    x_t.set_unchecked(i, x1.get(i));
                } else if bi == b {
                    if rng.gen::<f64>() < s {
                        x_t.set_unchecked(i, x1.get(i));
                    } else {
                        positions.push(i);
                    }
                }
            }
            (x_t, positions, m as f64 * time_weight)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{params_hash, PosteriorFamily, TabularModel};
    use crate::oracle::{ExactDistribution, StateSpace};
    use crate::rng::Streams;
    use crate::seq::Vocabulary;

    fn vocab2() -> Vocabulary {
        Vocabulary::new(2).unwrap()
    }

    #[test]
    fn tc_target_c0_is_one_hot() {
        let v = vocab2();
        let m = v.mask_id();
        let x_t = MaskedSequence::new(vec![0, m], &v).unwrap();
        let x1 = MaskedSequence::new(vec![0, 1], &v).unwrap();
        let t = tc_target(&x_t, 1, &x1, &[0.5, 0.5], 3.7, 1.3, 0.0, &v).unwrap();
        assert_eq!(t, vec![0.0, 1.0]);
    }

    #[test]
    fn tc_target_h0_c1_is_reference_row() {
        let v = vocab2();
        let m = v.mask_id();
        let x_t = MaskedSequence::new(vec![m, m], &v).unwrap();
        let x1 = MaskedSequence::new(vec![1, 0], &v).unwrap();
        let t = tc_target(&x_t, 0, &x1, &[0.3, 0.7], 0.9, 0.0, 1.0, &v).unwrap();
        assert!((t[0] - 0.3).abs() < 1e-15);
        assert!((t[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn tc_target_hand_value() {
        // c = 1, w = 2, uniform reference, clean token 1:
        // v=0: (1*0.5 + 0)/2 = 0.25, v=1: (0.5 + 1)/2 = 0.75.
        let v = vocab2();
        let m = v.mask_id();
        let x_t = MaskedSequence::new(vec![m], &v).unwrap();
        let x1 = MaskedSequence::new(vec![1], &v).unwrap();
        let t = tc_target(&x_t, 0, &x1, &[0.5, 0.5], 2.0f64.ln(), 1.0, 1.0, &v).unwrap();
        assert!((t[0] - 0.25).abs() < 1e-15);
        assert!((t[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn tc_target_sums_to_one_even_with_negative_entries() {
        let v = vocab2();
        let m = v.mask_id();
        let x_t = MaskedSequence::new(vec![m], &v).unwrap();
        let x1 = MaskedSequence::new(vec![0], &v).unwrap();
        // w = e^{-1} < c = 2 makes the one-hot coefficient negative.
        let t = tc_target(&x_t, 0, &x1, &[0.4, 0.6], -1.0, 1.0, 2.0, &v).unwrap();
        assert!(t.iter().any(|&e| e < 0.0));
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tc_target_rejects_inconsistent_pair() {
        let v = vocab2();
        let m = v.mask_id();
        let x_t = MaskedSequence::new(vec![0, m], &v).unwrap();
        let x1 = MaskedSequence::new(vec![1, 1], &v).unwrap();
        assert!(tc_target(&x_t, 1, &x1, &[0.5, 0.5], 0.0, 1.0, 1.0, &v).is_err());
    }

    #[test]
    fn gradient_vanishes_at_reference_when_h_zero_c_one() {
        // Target reduces to the reference row; at theta = pi_a the expected
        // and per-sample gradients on each touched row are exactly
        // softmax - target = 0.
        let space = StateSpace::new(vocab2(), 2);
        let rho = ExactDistribution::uniform(space.clone());
        let pi_a = TabularModel::from_exact(&rho).unwrap();
        let theta = pi_a.clone();
        let batch: Vec<(MaskedSequence, f64)> = (0..space.clean_count())
            .map(|r| (space.clean_at(r), 0.0))
            .collect();
        let config = DtmConfig::new(1.0, 0.0).unwrap().with_draws(4);
        let streams = Streams::new(5);
        let mut grad = vec![0.0; theta.num_params()];
        let stats = cdtm_loss_and_grad(
            &batch,
            Some(&pi_a),
            &theta,
            &config,
            &Schedule::Linear,
            &streams,
            0,
            &mut grad,
        )
        .unwrap();
        let gnorm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(gnorm < 1e-12, "gradient norm {gnorm}");
        assert!((stats.mean_weight - 1.0).abs() < 1e-15);
    }

    #[test]
    fn sar_single_block_pairs_with_any_order() {
        let space = StateSpace::new(vocab2(), 4);
        let mut rng = Streams::new(33).root();
        let rho = ExactDistribution::random(space.clone(), &mut rng);
        let pi_a = TabularModel::from_exact(&rho).unwrap();
        let mut theta = pi_a.clone();
        // Perturb theta so losses are nontrivial.
        for p in theta.params_mut() {
            *p += 0.1;
        }
        let batch: Vec<(MaskedSequence, f64)> = (0..space.clean_count())
            .map(|r| (space.clean_at(r), (r % 3) as f64 * 0.2))
            .collect();
        let config = DtmConfig::new(1.0, 0.5).unwrap().with_draws(2);
        let streams = Streams::new(7);
        let layout = SarLayout::new(4, 4).unwrap();
        let mut ga = vec![0.0; theta.num_params()];
        let mut gs = vec![0.0; theta.num_params()];
        let a = cdtm_loss_and_grad(
            &batch, Some(&pi_a), &theta, &config, &Schedule::Linear, &streams, 9, &mut ga,
        )
        .unwrap();
        let s = sar_cdtm_loss_and_grad(
            &batch, Some(&pi_a), &theta, &config, &layout, &Schedule::Linear, &streams, 9, &mut gs,
        )
        .unwrap();
        assert_eq!(a.loss, s.loss);
        assert_eq!(ga, gs);
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let space = StateSpace::new(vocab2(), 3);
        let mut rng = Streams::new(2).root();
        let rho = ExactDistribution::random(space.clone(), &mut rng);
        let pi_a = TabularModel::from_exact(&rho).unwrap();
        let theta = TabularModel::zero_logits(vocab2(), 3);
        let batch: Vec<(MaskedSequence, f64)> =
            (0..4).map(|r| (space.clean_at(r), r as f64 * 0.1)).collect();
        let config = DtmConfig::new(1.0, 0.3).unwrap().with_draws(3);
        let streams = Streams::new(40);
        let mut g1 = vec![0.0; theta.num_params()];
        let mut g2 = vec![0.0; theta.num_params()];
        let s1 = cdtm_loss_and_grad(
            &batch, Some(&pi_a), &theta, &config, &Schedule::Linear, &streams, 3, &mut g1,
        )
        .unwrap();
        let s2 = cdtm_loss_and_grad(
            &batch, Some(&pi_a), &theta, &config, &Schedule::Linear, &streams, 3, &mut g2,
        )
        .unwrap();
        assert_eq!(s1.loss.to_bits(), s2.loss.to_bits());
        assert_eq!(g1, g2);
        let _ = params_hash(&theta);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let theta = TabularModel::zero_logits(vocab2(), 2);
        let config = DtmConfig::new(0.0, 0.1).unwrap();
        let mut grad = vec![0.0; theta.num_params()];
        let r = cdtm_loss_and_grad::<_, TabularModel>(
            &[],
            None,
            &theta,
            &config,
            &Schedule::Linear,
            &Streams::new(0),
            0,
            &mut grad,
        );
        assert!(r.is_err());
    }

    #[test]
    fn constant_reward_keeps_reference_minimizer() {
        // With a constant reward the tilt cancels: the exact minimizer is the
        // base posterior itself, so the exact-loss gradient at theta = exact
        // posterior of rho vanishes.
        let space = StateSpace::new(vocab2(), 2);
        let mut rng = Streams::new(13).root();
        let rho = ExactDistribution::random(space.clone(), &mut rng);
        let reward = |_: &MaskedSequence| 0.8;
        let pi_a = crate::oracle::ExactPosterior::new(&rho);
        let rows = expected_loss_rows(&rho, &pi_a, &reward, 0.7, 1.0).unwrap();
        let theta = TabularModel::from_exact(&rho).unwrap();
        let mut grad = vec![0.0; theta.num_params()];
        rows.tabular_loss_and_grad(&theta, &mut grad).unwrap();
        let gnorm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        assert!(gnorm < 1e-10, "gradient norm {gnorm}");
        // And the Esscher family equals the plain posterior row-by-row.
        let ess = crate::oracle::EsscherFamily::new(&rho, &reward, 0.7);
        let m = space.vocab().mask_id();
        let x_t = MaskedSequence::new(vec![0, m], space.vocab()).unwrap();
        let a = ess.row(&x_t, 1);
        let b = pi_a.row(&x_t, 1);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn monte_carlo_gradient_is_unbiased_under_both_time_samplers() {
        // Independent oracle: per clean sequence, the estimator's expected
        // gradient integrates s over [0, smax] with weight 1/(1-s) against
        // the pattern law; computed here by fine midpoint quadrature over a
        // per-pattern enumeration, frozen against the implementation path.
        let space = StateSpace::new(vocab2(), 2);
        let mut rng = Streams::new(51).root();
        let rho = ExactDistribution::random(space.clone(), &mut rng);
        let pi_a = TabularModel::from_exact(&rho).unwrap();
        let theta = TabularModel::zero_logits(vocab2(), 2);
        let batch: Vec<(MaskedSequence, f64)> = (0..space.clean_count())
            .map(|r| (space.clean_at(r), (r as f64) * 0.3 - 0.4))
            .collect();
        let h = 0.6;
        let c = 1.0;
        let config = DtmConfig::new(c, h).unwrap();
        let vocab = vocab2();
        let len = 2usize;

        // Exact expectation of the estimator.
        let mut exact = vec![0.0; theta.num_params()];
        let smax = 1.0 - config.s_cap;
        let quad = 200_000usize;
        for (x1, reward) in &batch {
            let w = config.weight(*reward);
            // Enumerate mask patterns.
            for pattern in 1u32..(1 << len) {
                let k = pattern.count_ones() as usize;
                // integral of s^(len-k) (1-s)^(k-1) over [0, smax]
                let mut integral = 0.0;
                for j in 0..quad {
                    let sv = smax * (j as f64 + 0.5) / quad as f64;
                    integral += sv.powi((len - k) as i32) * (1.0 - sv).powi(k as i32 - 1);
                }
                integral *= smax / quad as f64;
                let mut x_t = MaskedSequence::fully_masked(len, &vocab);
                let mut masked = Vec::new();
                for i in 0..len {
                    if pattern & (1 << i) != 0 {
                        masked.push(i);
                    } else {
                        x_t = MaskedSequence::new(
                            {
                                let mut t = x_t.tokens().to_vec();
                                t[i] = x1.get(i);
                                t
                            },
                            &vocab,
                        )
                        .unwrap();
                    }
                }
                for &i in &masked {
                    let ref_row = pi_a.row(&x_t, i);
                    let target = tc_target_from_row(&ref_row, x1.get(i) as usize, w, c);
                    let p = theta.row(&x_t, i);
                    let sum_t: f64 = target.iter().sum();
                    let off = theta.row_offset(&x_t, i);
                    for u in 0..2 {
                        exact[off + u] +=
                            integral * w * (p[u] * sum_t - target[u]) / batch.len() as f64;
                    }
                }
            }
        }

        for sampling in [
            TimeSampling::Uniform,
            TimeSampling::Stratified,
            TimeSampling::HazardStratified,
        ] {
            let cfg = config.with_time_sampling(sampling);
            let streams = Streams::new(99);
            let mut grad = vec![0.0; theta.num_params()];
            let n = 40_000usize;
            let mut mean = vec![0.0; theta.num_params()];
            let mut m2 = vec![0.0; theta.num_params()];
            for salt in 0..n {
                cdtm_loss_and_grad(
                    &batch,
                    Some(&pi_a),
                    &theta,
                    &cfg,
                    &Schedule::Linear,
                    &streams,
                    salt as u64,
                    &mut grad,
                )
                .unwrap();
                for (j, &g) in grad.iter().enumerate() {
                    mean[j] += g;
                    m2[j] += g * g;
                }
            }
            for j in 0..mean.len() {
                mean[j] /= n as f64;
                let var = (m2[j] / n as f64 - mean[j] * mean[j]).max(0.0);
                let se = (var / n as f64).sqrt();
                let diff = (mean[j] - exact[j]).abs();
                assert!(
                    diff <= 4.0 * se + 1e-9,
                    "{sampling:?} coord {j}: mc {} vs exact {} (4se {})",
                    mean[j],
                    exact[j],
                    4.0 * se
                );
            }
        }
    }
}
