//! Partially masked state samplers.
//!
//! Both samplers assign each position an independent reveal time `T^i` with
//! CDF `alpha` and compare it to the (possibly block-local) time. Reveal
//! times are drawn lazily per call: the losses only need the marginal law of
//! `x_t` given `x_1`, never a coupled trajectory.

use rand::Rng;

use crate::error::{Error, Result};
use crate::schedule::{Schedule, HAZARD_T_MARGIN};
use crate::seq::{MaskedSequence, Vocabulary};

/// Block structure for semi-autoregressive masking: `block_count` blocks of
/// `block_size` consecutive positions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SarLayout {
    seq_len: usize,
    block_size: usize,
}

impl SarLayout {
    pub fn new(seq_len: usize, block_size: usize) -> Result<Self> {
        if block_size == 0 || seq_len == 0 || seq_len % block_size != 0 {
            return Err(Error::Config(format!(
                "block size {block_size} must divide sequence length {seq_len}"
            )));
        }
        Ok(SarLayout { seq_len, block_size })
    }

    #[inline]
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    #[inline]
    pub fn block_size(&self) -> usize {
        self.block_size
    }

    #[inline]
    pub fn block_count(&self) -> usize {
        self.seq_len / self.block_size
    }

    /// Active block index: floor(M t), with t = 1 mapped to the last block.
    pub fn block_at(&self, t: f64) -> usize {
        let m = self.block_count();
        ((m as f64 * t) as usize).min(m - 1)
    }

    /// Block-local time u(t) = M t - b(t), in [0, 1].
    pub fn local_time(&self, t: f64) -> f64 {
        let m = self.block_count() as f64;
        m * t - self.block_at(t) as f64
    }

    /// Index range of block `b`.
    pub fn block_range(&self, b: usize) -> std::ops::Range<usize> {
        let lo = b * self.block_size;
        lo..lo + self.block_size
    }
}

/// Reveal rule for the any-order interpolant given per-position uniforms:
/// position i is revealed iff `uniforms[i] < alpha(t)`.
pub fn any_order_reveal_set(t: f64, schedule: &Schedule, uniforms: &[f64]) -> Vec<bool> {
    let p = schedule.alpha(t);
    uniforms.iter().map(|&u| u < p).collect()
}

/// Reveal rule for the SAR interpolant given per-position uniforms: past
/// blocks fully revealed, future blocks fully masked, the active block
/// governed by the block-local time.
pub fn sar_reveal_set(
    t: f64,
    layout: &SarLayout,
    schedule: &Schedule,
    uniforms: &[f64],
) -> Vec<bool> {
    let b = layout.block_at(t);
    let p_local = schedule.alpha(layout.local_time(t));
    (0..layout.seq_len())
        .map(|i| {
            let bi = i / layout.block_size();
            if bi < b {
                true
            } else if bi > b {
                false
            } else {
                uniforms[i] < p_local
            }
        })
        .collect()
}

fn mask_with(
    x1: &MaskedSequence,
    reveal: &[bool],
    vocab: &Vocabulary,
) -> MaskedSequence {
    let mut out = MaskedSequence::fully_masked(x1.len(), vocab);
    for (i, &r) in reveal.iter().enumerate() {
        if r {
            out.set_unchecked(i, x1.get(i));
        }
    }
    out
}

/// Samples `x_t` from a clean `x_1`: each position independently carries its
/// clean token with probability `alpha(t)`, else the mask sentinel.
pub fn interpolate_any_order<R: Rng>(
    x1: &MaskedSequence,
    t: f64,
    schedule: &Schedule,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<MaskedSequence> {
    if !x1.is_clean(vocab) {
        return Err(Error::Contract(
            "any-order interpolation requires a clean terminal sequence".into(),
        ));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1]")));
    }
    let uniforms: Vec<f64> = (0..x1.len()).map(|_| rng.gen::<f64>()).collect();
    Ok(mask_with(x1, &any_order_reveal_set(t, schedule, &uniforms), vocab))
}

/// Samples the SAR-masked state: blocks before the active one fully revealed,
/// blocks after it fully masked, the active block revealed per-position at
/// the block-local time.
pub fn interpolate_sar<R: Rng>(
    x1: &MaskedSequence,
    t: f64,
    layout: &SarLayout,
    schedule: &Schedule,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<MaskedSequence> {
    if !x1.is_clean(vocab) {
        return Err(Error::Contract(
            "SAR interpolation requires a clean terminal sequence".into(),
        ));
    }
    if x1.len() != layout.seq_len() {
        return Err(Error::Config(format!(
            "layout is for length {}, sequence has length {}",
            layout.seq_len(),
            x1.len()
        )));
    }
    if !(0.0..1.0).contains(&t) {
        return Err(Error::Domain(format!("time {t} outside [0, 1)")));
    }
    let uniforms: Vec<f64> = (0..x1.len()).map(|_| rng.gen::<f64>()).collect();
    Ok(mask_with(x1, &sar_reveal_set(t, layout, schedule, &uniforms), vocab))
}

/// Global-time hazard of the SAR interpolant:
/// `M * alpha'(u(t)) / (1 - alpha(u(t)))`.
pub fn hazard_sar(layout: &SarLayout, schedule: &Schedule, t: f64) -> Result<f64> {
    if !t.is_finite() || t < 0.0 {
        return Err(Error::Domain(format!("time {t} outside [0, 1)")));
    }
    let u = layout.local_time(t);
    if u >= 1.0 - HAZARD_T_MARGIN {
        return Err(Error::Domain(format!(
            "SAR hazard diverges at block-local time 1 (t = {t}, u = {u})"
        )));
    }
    Ok(layout.block_count() as f64 * schedule.hazard(u)?)
}

/// Positions eligible for an update at time t: masked positions inside the
/// active block.
pub fn eligible_indices(
    x: &MaskedSequence,
    layout: &SarLayout,
    t: f64,
    vocab: &Vocabulary,
) -> Vec<usize> {
    assert_eq!(x.len(), layout.seq_len(), "layout/sequence length mismatch");
    layout
        .block_range(layout.block_at(t))
        .filter(|&i| x.is_masked_at(i, vocab))
        .collect()
}
