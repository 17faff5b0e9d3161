//! Small feedforward posterior for maze-scale training.
//!
//! Per-position network with shared weights: the features for position i are
//! the token-plus-position embeddings of a five-token window centered on i
//! together with the two prompt anchor positions, passed through two ReLU
//! hidden layers and projected to |V| logits through the tied token
//! embeddings (`logit_v = b_v + tok_emb[v] . readout(h2)`), so copying a
//! context token is linearly representable. All parameters live in one flat
//! vector and the backward pass is written by hand; finite differences check
//! it in the test suite. Output shape is always L-by-|V| whatever the mask
//! pattern.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{log_softmax_into, softmax_into, CeItem, Matrix, PosteriorFamily, PosteriorModel};
use crate::seq::{MaskedSequence, Vocabulary};

/// Context positions each side of the predicted position.
const WINDOW: usize = 2;
/// Prompt anchor positions included in every feature vector.
const ANCHORS: usize = 2;
/// Window slots plus anchors.
const SLOTS: usize = 2 * WINDOW + 1 + ANCHORS;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NeuralConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for NeuralConfig {
    fn default() -> Self {
        NeuralConfig { embed_dim: 32, hidden_dim: 64 }
    }
}

/// Parameter block offsets inside the flat vector, in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    tok_emb: usize, // (|V|+1) x E
    pos_emb: usize, // L x E
    w1: usize,      // H x (SLOTS*E)
    b1: usize,      // H
    w2: usize,      // H x H
    b2: usize,      // H
    w_out: usize,   // E x H (readout into embedding space)
    b_out: usize,   // |V|
    total: usize,
}

impl Layout {
    fn new(vocab: Vocabulary, len: usize, cfg: NeuralConfig) -> Self {
        let v = vocab.size() as usize;
        let e = cfg.embed_dim;
        let h = cfg.hidden_dim;
        let tok_emb = 0;
        let pos_emb = tok_emb + (v + 1) * e;
        let w1 = pos_emb + len * e;
        let b1 = w1 + h * (SLOTS * e);
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w_out = b2 + h;
        let b_out = w_out + e * h;
        let total = b_out + v;
        Layout { tok_emb, pos_emb, w1, b1, w2, b2, w_out, b_out, total }
    }
}

#[derive(Debug, Clone)]
pub struct NeuralModel {
    vocab: Vocabulary,
    len: usize,
    cfg: NeuralConfig,
    layout: Layout,
    params: Vec<f64>,
}

impl NeuralModel {
    pub fn new<R: Rng>(vocab: Vocabulary, len: usize, cfg: NeuralConfig, rng: &mut R) -> Self {
        let layout = Layout::new(vocab, len, cfg);
        let mut params = vec![0.0; layout.total];
        let v = vocab.size() as usize;
        let e = cfg.embed_dim;
        let h = cfg.hidden_dim;

        let mut uniform = |lo: f64, hi: f64, range: std::ops::Range<usize>, p: &mut Vec<f64>| {
            for i in range {
                p[i] = lo + (hi - lo) * rng.gen::<f64>();
            }
        };
        let _ = v;
        uniform(-0.1, 0.1, layout.tok_emb..layout.pos_emb, &mut params);
        uniform(-0.1, 0.1, layout.pos_emb..layout.w1, &mut params);
        let x1 = (6.0 / (SLOTS * e + h) as f64).sqrt();
        uniform(-x1, x1, layout.w1..layout.b1, &mut params);
        let x2 = (6.0 / (h + h) as f64).sqrt();
        uniform(-x2, x2, layout.w2..layout.b2, &mut params);
        let x3 = (6.0 / (h + e) as f64).sqrt();
        uniform(-x3, x3, layout.w_out..layout.b_out, &mut params);

        NeuralModel { vocab, len, cfg, layout, params }
    }

    pub fn config(&self) -> NeuralConfig {
        self.cfg
    }

    pub fn from_params(
        vocab: Vocabulary,
        len: usize,
        cfg: NeuralConfig,
        params: Vec<f64>,
    ) -> Result<Self> {
        let layout = Layout::new(vocab, len, cfg);
        if params.len() != layout.total {
            return Err(Error::Config(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(NeuralModel { vocab, len, cfg, layout, params })
    }

    /// Sequence slots feeding position i: the window around i, then the two
    /// prompt anchors. Out-of-range window slots are None (zero features).
    fn slots(&self, i: usize) -> [Option<usize>; SLOTS] {
        let mut out = [None; SLOTS];
        for (k, offset) in (-(WINDOW as isize)..=WINDOW as isize).enumerate() {
            let j = i as isize + offset;
            if j >= 0 && (j as usize) < self.len {
                out[k] = Some(j as usize);
            }
        }
        out[2 * WINDOW + 1] = Some(0.min(self.len - 1));
        out[2 * WINDOW + 2] = Some(1.min(self.len - 1));
        out
    }

    /// Embedding features for one position: e(x_j) = tok_emb[x_j] + pos_emb[j]
    /// per slot, concatenated.
    fn features_into(&self, x: &MaskedSequence, i: usize, out: &mut [f64]) {
        let e = self.cfg.embed_dim;
        out.fill(0.0);
        for (k, slot) in self.slots(i).iter().enumerate() {
            if let Some(j) = slot {
                let te = self.layout.tok_emb + x.get(*j) as usize * e;
                let pe = self.layout.pos_emb + j * e;
                let dst = &mut out[k * e..(k + 1) * e];
                for d in 0..e {
                    dst[d] = self.params[te + d] + self.params[pe + d];
                }
            }
        }
    }

    /// Forward through the shared trunk for one position; returns logits and
    /// fills the caches used by backprop. The readout vector lives in
    /// embedding space and is matched against every clean token's embedding.
    #[allow(clippy::too_many_arguments)]
    fn row_forward(
        &self,
        features: &[f64],
        h1_pre: &mut [f64],
        h1: &mut [f64],
        h2_pre: &mut [f64],
        h2: &mut [f64],
        readout: &mut [f64],
        logits: &mut [f64],
    ) {
        let e = self.cfg.embed_dim;
        let f_dim = SLOTS * e;
        let h = self.cfg.hidden_dim;
        let v = self.vocab.size() as usize;
        let lp = &self.params;
        let lay = self.layout;
        for j in 0..h {
            let row = lay.w1 + j * f_dim;
            let mut acc = lp[lay.b1 + j];
            for d in 0..f_dim {
                acc += lp[row + d] * features[d];
            }
            h1_pre[j] = acc;
            h1[j] = acc.max(0.0);
        }
        for j in 0..h {
            let row = lay.w2 + j * h;
            let mut acc = lp[lay.b2 + j];
            for d in 0..h {
                acc += lp[row + d] * h1[d];
            }
            h2_pre[j] = acc;
            h2[j] = acc.max(0.0);
        }
        for d in 0..e {
            let row = lay.w_out + d * h;
            let mut acc = 0.0;
            for k in 0..h {
                acc += lp[row + k] * h2[k];
            }
            readout[d] = acc;
        }
        for u in 0..v {
            let emb = lay.tok_emb + u * e;
            let mut acc = lp[lay.b_out + u];
            for d in 0..e {
                acc += lp[emb + d] * readout[d];
            }
            logits[u] = acc;
        }
    }

    fn rows_for(&self, x: &MaskedSequence, positions: &[usize], temperature: f64) -> Matrix {
        let v = self.vocab.size() as usize;
        let e = self.cfg.embed_dim;
        let h = self.cfg.hidden_dim;
        let mut out = Matrix::zeros(positions.len(), v);
        let mut features = vec![0.0; SLOTS * e];
        let mut h1_pre = vec![0.0; h];
        let mut h1 = vec![0.0; h];
        let mut h2_pre = vec![0.0; h];
        let mut h2 = vec![0.0; h];
        let mut readout = vec![0.0; e];
        let mut logits = vec![0.0; v];
        for (k, &i) in positions.iter().enumerate() {
            self.features_into(x, i, &mut features);
            self.row_forward(
                &features, &mut h1_pre, &mut h1, &mut h2_pre, &mut h2, &mut readout, &mut logits,
            );
            softmax_into(&logits, temperature, out.row_mut(k));
        }
        out
    }
}

impl PosteriorFamily for NeuralModel {
    fn row(&self, x: &MaskedSequence, i: usize) -> Vec<f64> {
        self.rows_for(x, &[i], 1.0).row(0).to_vec()
    }
}

impl PosteriorModel for NeuralModel {
    fn vocab(&self) -> Vocabulary {
        self.vocab
    }

    fn seq_len(&self) -> usize {
        self.len
    }

    fn num_params(&self) -> usize {
        self.params.len()
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn forward(&self, x: &MaskedSequence, temperature: f64) -> Matrix {
        let all: Vec<usize> = (0..self.len).collect();
        self.rows_for(x, &all, temperature)
    }

    fn rows_at(&self, x: &MaskedSequence, positions: &[usize]) -> Matrix {
        self.rows_for(x, positions, 1.0)
    }

    fn weighted_ce_loss_grad(
        &self,
        x: &MaskedSequence,
        items: &[CeItem],
        grad: &mut [f64],
    ) -> Result<f64> {
        let v = self.vocab.size() as usize;
        let e = self.cfg.embed_dim;
        let h = self.cfg.hidden_dim;
        let f_dim = SLOTS * e;
        let lay = self.layout;
        let lp = &self.params;

        let mut features = vec![0.0; f_dim];
        let mut h1_pre = vec![0.0; h];
        let mut h1 = vec![0.0; h];
        let mut h2_pre = vec![0.0; h];
        let mut h2 = vec![0.0; h];
        let mut readout = vec![0.0; e];
        let mut logits = vec![0.0; v];
        let mut p = vec![0.0; v];
        let mut logp = vec![0.0; v];
        let mut d_logits = vec![0.0; v];
        let mut d_readout = vec![0.0; e];
        let mut d_h2 = vec![0.0; h];
        let mut d_h1 = vec![0.0; h];
        let mut d_feat = vec![0.0; f_dim];

        let mut loss = 0.0;
        for item in items {
            let i = item.position;
            self.features_into(x, i, &mut features);
            self.row_forward(
                &features, &mut h1_pre, &mut h1, &mut h2_pre, &mut h2, &mut readout, &mut logits,
            );
            softmax_into(&logits, 1.0, &mut p);
            log_softmax_into(&logits, &mut logp);
            let sum_t: f64 = item.target.iter().sum();
            for u in 0..v {
                loss -= item.weight * item.target[u] * logp[u];
                d_logits[u] = item.weight * (p[u] * sum_t - item.target[u]);
            }

            // Tied readout: logits_u = b_u + tok_emb[u] . readout.
            d_readout.fill(0.0);
            for u in 0..v {
                let dl = d_logits[u];
                if dl == 0.0 {
                    continue;
                }
                let emb = lay.tok_emb + u * e;
                for d in 0..e {
                    d_readout[d] += dl * lp[emb + d];
                    grad[emb + d] += dl * readout[d];
                }
                grad[lay.b_out + u] += dl;
            }
            d_h2.fill(0.0);
            for d in 0..e {
                let dr = d_readout[d];
                if dr == 0.0 {
                    continue;
                }
                let row = lay.w_out + d * h;
                for k in 0..h {
                    grad[row + k] += dr * h2[k];
                    d_h2[k] += dr * lp[row + k];
                }
            }

            // Second hidden layer.
            d_h1.fill(0.0);
            for j in 0..h {
                if h2_pre[j] <= 0.0 {
                    continue;
                }
                let dz = d_h2[j];
                if dz == 0.0 {
                    continue;
                }
                let row = lay.w2 + j * h;
                for d in 0..h {
                    grad[row + d] += dz * h1[d];
                    d_h1[d] += dz * lp[row + d];
                }
                grad[lay.b2 + j] += dz;
            }

            // First hidden layer into the features.
            d_feat.fill(0.0);
            for j in 0..h {
                if h1_pre[j] <= 0.0 {
                    continue;
                }
                let dz = d_h1[j];
                if dz == 0.0 {
                    continue;
                }
                let row = lay.w1 + j * f_dim;
                for d in 0..f_dim {
                    grad[row + d] += dz * features[d];
                    d_feat[d] += dz * lp[row + d];
                }
                grad[lay.b1 + j] += dz;
            }

            // Embeddings: each filled slot contributed tok_emb + pos_emb.
            for (k, slot) in self.slots(i).iter().enumerate() {
                if let Some(j) = slot {
                    let te = lay.tok_emb + x.get(*j) as usize * e;
                    let pe = lay.pos_emb + j * e;
                    let df = &d_feat[k * e..(k + 1) * e];
                    for d in 0..e {
                        grad[te + d] += df[d];
                        grad[pe + d] += df[d];
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Internal(format!("non-finite neural loss {loss}")));
        }
        Ok(loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{StreamDomain, Streams};

    fn tiny_model(seed: u64) -> NeuralModel {
        let vocab = Vocabulary::new(3).unwrap();
        let mut rng = Streams::new(seed).stream(StreamDomain::ModelInit, 0);
        NeuralModel::new(vocab, 4, NeuralConfig { embed_dim: 4, hidden_dim: 6 }, &mut rng)
    }

    #[test]
    fn rows_are_simplexes() {
        let model = tiny_model(1);
        let vocab = model.vocab();
        let x = MaskedSequence::new(vec![0, vocab.mask_id(), 2, vocab.mask_id()], &vocab).unwrap();
        let m = model.forward(&x, 1.0);
        assert_eq!(m.n_rows(), 4);
        assert_eq!(m.n_cols(), 3);
        for i in 0..4 {
            let s: f64 = m.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(m.row(i).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let model = tiny_model(2);
        let vocab = model.vocab();
        let x = MaskedSequence::fully_masked(4, &vocab);
        let a = model.forward(&x, 1.0);
        let b = model.forward(&x, 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn temperature_monotonicity_on_argmax() {
        let model = tiny_model(3);
        let vocab = model.vocab();
        let x = MaskedSequence::fully_masked(4, &vocab);
        for i in 0..4 {
            let mut last = 0.0;
            for temp in [2.0, 1.0, 0.5, 0.25, 0.0] {
                let m = model.forward(&x, temp);
                let row = m.row(i);
                let best = row.iter().cloned().fold(f64::MIN, f64::max);
                assert!(best >= last - 1e-12, "temp {temp}: {best} < {last}");
                last = best;
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_central_differences() {
        let mut model = tiny_model(4);
        let vocab = model.vocab();
        let mut rng = Streams::new(11).stream(StreamDomain::Instance, 0);
        let mut worst: f64 = 0.0;
        for probe in 0..30 {
            let tokens: Vec<u32> = (0..4)
                .map(|_| {
                    if rng.gen::<f64>() < 0.5 {
                        vocab.mask_id()
                    } else {
                        rng.gen_range(0..3)
                    }
                })
                .collect();
            let mut x = MaskedSequence::new(tokens, &vocab).unwrap();
            if x.mask_positions(&vocab).is_empty() {
                x = MaskedSequence::fully_masked(4, &vocab);
            }
            let i = x.mask_positions(&vocab)[0];
            let target: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 2.0 - 0.5).collect();
            let weight = rng.gen::<f64>() + 0.5;
            let items = [CeItem { position: i, target, weight }];

            let mut grad = vec![0.0; model.num_params()];
            model.weighted_ce_loss_grad(&x, &items, &mut grad).unwrap();

            let dir: Vec<f64> = (0..model.num_params())
                .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
                .collect();
            let eps = 1e-5;
            let eval = |m: &NeuralModel| {
                let mut g = vec![0.0; m.num_params()];
                m.weighted_ce_loss_grad(&x, &items, &mut g).unwrap()
            };
            let base = model.params().to_vec();
            for (p, d) in model.params_mut().iter_mut().zip(&dir) {
                *p += eps * d;
            }
            let up = eval(&model);
            model.params_mut().copy_from_slice(&base);
            for (p, d) in model.params_mut().iter_mut().zip(&dir) {
                *p -= eps * d;
            }
            let down = eval(&model);
            model.params_mut().copy_from_slice(&base);

            let fd = (up - down) / (2.0 * eps);
            let an: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-12);
            worst = worst.max(rel);
            assert!(rel < 1e-4, "probe {probe}: fd {fd} vs analytic {an} (rel {rel})");
        }
        assert!(worst < 1e-4);
    }

    #[test]
    fn clone_is_frozen() {
        let mut model = tiny_model(5);
        let frozen = crate::model::clone_frozen(&model);
        let vocab = model.vocab();
        let x = MaskedSequence::fully_masked(4, &vocab);
        let before = frozen.forward(&x, 1.0);
        for p in model.params_mut() {
            *p += 1.0;
        }
        let after = frozen.forward(&x, 1.0);
        assert_eq!(before, after);
        let again = crate::model::clone_frozen(&frozen);
        assert_eq!(again.params(), frozen.params());
    }

    #[test]
    fn logits_depend_on_window_and_anchors() {
        // Changing a token inside the window or an anchor changes the row;
        // changing a far token does not.
        let vocab = Vocabulary::new(5).unwrap();
        let mut rng = Streams::new(9).stream(StreamDomain::ModelInit, 1);
        let model = NeuralModel::new(
            vocab,
            10,
            NeuralConfig { embed_dim: 4, hidden_dim: 8 },
            &mut rng,
        );
        let m = vocab.mask_id();
        let base = MaskedSequence::new(vec![0, 1, 2, 3, m, 4, 0, 1, 2, 3], &vocab).unwrap();
        let row = model.row(&base, 4);

        // Neighbor inside the window.
        let near = MaskedSequence::new(vec![0, 1, 2, 0, m, 4, 0, 1, 2, 3], &vocab).unwrap();
        assert_ne!(model.row(&near, 4), row);
        // Anchor (position 1).
        let anchor = MaskedSequence::new(vec![0, 3, 2, 3, m, 4, 0, 1, 2, 3], &vocab).unwrap();
        assert_ne!(model.row(&anchor, 4), row);
        // Token beyond the window and not an anchor.
        let far = MaskedSequence::new(vec![0, 1, 2, 3, m, 4, 0, 4, 2, 3], &vocab).unwrap();
        assert_eq!(model.row(&far, 4), row);
    }
}
