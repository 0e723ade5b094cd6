//! Truncated BPTT with SGD, norm clipping, dropout on non-recurrent
//! connections and validation-driven learning-rate control.

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{log_softmax, perplexity, softmax, DropoutMasks, LstmLayer, RnnError, RnnLm, RnnState};
use crate::linalg::{axpy, dot, Matrix};
use crate::vocab::{Corpus, Lookup, WordId, BOS_ID, EOS_ID};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// BPTT truncation length.
    pub unroll: usize,
    pub dropout: f64,
    pub lr: f64,
    /// Global gradient-norm threshold.
    pub clip: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Number of parallel sentence streams per update.
    pub batch: usize,
    /// Relative validation improvement below which the learning rate is halved.
    pub min_improvement: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            unroll: 10,
            dropout: 0.5,
            lr: 1.0,
            clip: 5.0,
            epochs: 5,
            seed: 1,
            batch: 16,
            min_improvement: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_perplexity: f64,
    pub valid_perplexity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, serde::Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Set when validation perplexity rose and the previous parameters were kept.
    pub stopped_early: bool,
}

/// One training timestep of a stream. `reset` zeroes the state before the
/// step (sentence start); gradients never cross a reset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamStep {
    pub input: WordId,
    pub target: WordId,
    pub reset: bool,
}

/// Gradient buffers shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub input_emb: Matrix,
    pub layers: Vec<LstmLayer>,
    pub output_emb: Matrix,
    pub output_bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &RnnLm) -> Self {
        Gradients {
            input_emb: Matrix::zeros(model.input_emb.rows(), model.input_emb.cols()),
            layers: model
                .layers
                .iter()
                .map(|l| LstmLayer::zeros(l.d_in(), l.d_h()))
                .collect(),
            output_emb: Matrix::zeros(model.output_emb.rows(), model.output_emb.cols()),
            output_bias: vec![0.0; model.output_bias.len()],
        }
    }

    /// Tensors in the same order as [`RnnLm::parameters`].
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = vec![self.input_emb.as_slice()];
        for l in &self.layers {
            out.extend([l.w_x.as_slice(), l.w_h.as_slice(), l.bias.as_slice()]);
        }
        out.extend([self.output_emb.as_slice(), self.output_bias.as_slice()]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.input_emb.as_mut_slice()];
        for l in &mut self.layers {
            out.push(l.w_x.as_mut_slice());
            out.push(l.w_h.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.output_emb.as_mut_slice());
        out.push(self.output_bias.as_mut_slice());
        out
    }

    pub fn norm(&self) -> f64 {
        self.tensors().iter().map(|t| dot(t, t)).sum::<f64>().sqrt()
    }

    fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }
}

impl RnnLm {
    /// Parameter tensors: S, then (W_x, W_h, b) per layer, then U, b_y.
    pub fn parameters(&self) -> Vec<&[f64]> {
        let mut out = vec![self.input_emb.as_slice()];
        for l in &self.layers {
            out.extend([l.w_x.as_slice(), l.w_h.as_slice(), l.bias.as_slice()]);
        }
        out.extend([self.output_emb.as_slice(), self.output_bias.as_slice()]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![self.input_emb.as_mut_slice()];
        for l in &mut self.layers {
            out.push(l.w_x.as_mut_slice());
            out.push(l.w_h.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.output_emb.as_mut_slice());
        out.push(self.output_bias.as_mut_slice());
        out
    }

    fn apply_sgd(&mut self, grads: &Gradients, lr: f64) {
        for (p, g) in self.parameters_mut().into_iter().zip(grads.tensors()) {
            axpy(-lr, g, p);
        }
    }
}

struct StepCache {
    input: WordId,
    target: WordId,
    reset: bool,
    xs: Vec<Vec<f64>>,
    h_prev: Vec<Vec<f64>>,
    c_prev: Vec<Vec<f64>>,
    gates: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    top: Vec<f64>,
    probs: Vec<f64>,
}

fn masked(x: &[f64], mask: Option<&Vec<f64>>) -> Vec<f64> {
    match mask {
        Some(m) => x.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => x.to_vec(),
    }
}

/// Forward and backward over one stream window. Gradients of
/// `scale · Σ_t −ln p(target_t)` are accumulated into `grads`.
fn stream_window(
    model: &RnnLm,
    steps: &[StreamStep],
    start: &RnnState,
    masks: Option<&[DropoutMasks]>,
    scale: f64,
    grads: &mut Gradients,
) -> Result<(f64, RnnState), RnnError> {
    let n_layers = model.layers.len();
    let d_h = model.dims().d_h;
    let mut h = start.h.clone();
    let mut c = start.c.clone();
    let mut caches = Vec::with_capacity(steps.len());
    let mut nll = 0.0;

    for (t, step) in steps.iter().enumerate() {
        model.check_word(step.input)?;
        model.check_word(step.target)?;
        if step.reset {
            h.iter_mut().chain(c.iter_mut()).for_each(|v| v.fill(0.0));
        }
        let mask = masks.map(|m| &m[t]);
        let mut x = masked(model.input_emb.col(step.input as usize), mask.map(|m| &m.inputs[0]));
        let mut cache = StepCache {
            input: step.input,
            target: step.target,
            reset: step.reset,
            xs: Vec::with_capacity(n_layers),
            h_prev: Vec::with_capacity(n_layers),
            c_prev: Vec::with_capacity(n_layers),
            gates: Vec::with_capacity(n_layers),
            c: Vec::with_capacity(n_layers),
            top: Vec::new(),
            probs: Vec::new(),
        };
        for (l, layer) in model.layers.iter().enumerate() {
            let (gates, c_new, h_new) = layer.step(&x, &h[l], &c[l]);
            let next_x = if l + 1 < n_layers {
                masked(&h_new, mask.map(|m| &m.inputs[l + 1]))
            } else {
                Vec::new()
            };
            cache.xs.push(std::mem::replace(&mut x, next_x));
            cache.h_prev.push(std::mem::replace(&mut h[l], h_new));
            cache.c_prev.push(std::mem::replace(&mut c[l], c_new.clone()));
            cache.gates.push(gates);
            cache.c.push(c_new);
        }
        cache.top = masked(&h[n_layers - 1], mask.map(|m| &m.output));
        let logits = model.logits_for_hidden(&cache.top);
        nll -= log_softmax(&logits)[step.target as usize];
        cache.probs = softmax(&logits);
        caches.push(cache);
    }

    let mut dh_next = vec![vec![0.0; d_h]; n_layers];
    let mut dc_next = vec![vec![0.0; d_h]; n_layers];
    for (t, cache) in caches.iter().enumerate().rev() {
        let mask = masks.map(|m| &m[t]);
        let mut dy = cache.probs.clone();
        dy[cache.target as usize] -= 1.0;
        dy.iter_mut().for_each(|v| *v *= scale);
        axpy(1.0, &dy, &mut grads.output_bias);
        grads.output_emb.add_outer(&cache.top, &dy);
        let mut dh_above = vec![0.0; d_h];
        model.output_emb.gemv_acc(&dy, &mut dh_above);
        if let Some(m) = mask {
            dh_above.iter_mut().zip(&m.output).for_each(|(g, k)| *g *= k);
        }

        for l in (0..n_layers).rev() {
            let layer = &model.layers[l];
            let gates = &cache.gates[l];
            let mut dz = vec![0.0; 4 * d_h];
            let mut dc_prev = vec![0.0; d_h];
            for k in 0..d_h {
                let (i, f, o, g) = (gates[k], gates[d_h + k], gates[2 * d_h + k], gates[3 * d_h + k]);
                let tc = cache.c[l][k].tanh();
                let dh = dh_above[k] + dh_next[l][k];
                let d_o = dh * tc;
                let dc = dc_next[l][k] + dh * o * (1.0 - tc * tc);
                let d_i = dc * g;
                let d_g = dc * i;
                let d_f = dc * cache.c_prev[l][k];
                dc_prev[k] = dc * f;
                dz[k] = d_i * i * (1.0 - i);
                dz[d_h + k] = d_f * f * (1.0 - f);
                dz[2 * d_h + k] = d_o * o * (1.0 - o);
                dz[3 * d_h + k] = d_g * (1.0 - g * g);
            }
            let gl = &mut grads.layers[l];
            gl.w_x.add_outer(&dz, &cache.xs[l]);
            gl.w_h.add_outer(&dz, &cache.h_prev[l]);
            axpy(1.0, &dz, &mut gl.bias);

            let mut dx = vec![0.0; layer.d_in()];
            layer.w_x.gemv_t_acc(&dz, &mut dx);
            let mut dh_prev = vec![0.0; d_h];
            layer.w_h.gemv_t_acc(&dz, &mut dh_prev);
            dh_next[l] = dh_prev;
            dc_next[l] = dc_prev;
            if let Some(m) = mask {
                dx.iter_mut().zip(&m.inputs[l]).for_each(|(g, k)| *g *= k);
            }
            if l > 0 {
                dh_above = dx;
            } else {
                axpy(1.0, &dx, grads.input_emb.col_mut(cache.input as usize));
            }
        }
        if cache.reset {
            dh_next.iter_mut().chain(dc_next.iter_mut()).for_each(|v| v.fill(0.0));
        }
    }
    Ok((nll, RnnState { h, c }))
}

/// Mean cross-entropy over all steps of all streams and its gradient. Each
/// stream starts from its given state (treated as a constant); returns the
/// final state of every stream.
pub fn batch_loss_and_gradient(
    model: &RnnLm,
    streams: &[(Vec<StreamStep>, RnnState)],
    masks: Option<&[Vec<DropoutMasks>]>,
) -> Result<(f64, Gradients, Vec<RnnState>), RnnError> {
    let count: usize = streams.iter().map(|(s, _)| s.len()).sum();
    let mut grads = Gradients::zeros_like(model);
    if count == 0 {
        return Ok((0.0, grads, streams.iter().map(|(_, st)| st.clone()).collect()));
    }
    let scale = 1.0 / count as f64;
    let mut total = 0.0;
    let mut states = Vec::with_capacity(streams.len());
    for (b, (steps, state)) in streams.iter().enumerate() {
        model.check_state(state)?;
        let m = masks.map(|m| m[b].as_slice());
        let (nll, end) = stream_window(model, steps, state, m, scale, &mut grads)?;
        total += nll;
        states.push(end);
    }
    Ok((total * scale, grads, states))
}

fn sentence_steps(ids: &[WordId]) -> impl Iterator<Item = StreamStep> + '_ {
    let inputs = std::iter::once(BOS_ID).chain(ids.iter().copied());
    let targets = ids.iter().copied().chain(std::iter::once(EOS_ID));
    inputs.zip(targets).enumerate().map(|(t, (input, target))| StreamStep {
        input,
        target,
        reset: t == 0,
    })
}

fn validation_perplexity(model: &RnnLm, sentences: &[Vec<WordId>]) -> Result<f64, RnnError> {
    let mut lps = Vec::new();
    for s in sentences.iter().filter(|s| !s.is_empty()) {
        lps.extend(model.score_sentence(s)?);
    }
    Ok(perplexity(&lps))
}

/// Trains a copy of `model` on `train`. Tokens outside the shortlist are
/// trained as `<unk>`. Deterministic for a given config.
pub fn train_bptt(
    model: &RnnLm,
    train: &Corpus,
    valid: Option<&Corpus>,
    cfg: &TrainConfig,
) -> Result<(RnnLm, TrainReport), RnnError> {
    let vocab = model.vocab();
    let encoded: Vec<Vec<WordId>> = train
        .sentences()
        .iter()
        .map(|s| vocab.encode_sentence(s, Lookup::ShortlistOnly))
        .collect();
    if encoded.is_empty() {
        return Err(RnnError::EmptyCorpus);
    }
    let valid: Option<Vec<Vec<WordId>>> = valid.filter(|v| !v.is_empty()).map(|v| {
        v.sentences()
            .iter()
            .map(|s| vocab.encode_sentence(s, Lookup::ShortlistOnly))
            .collect()
    });

    let dims = model.dims();
    let batch = cfg.batch.max(1);
    let unroll = cfg.unroll.max(1);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));

    let mut current = model.clone();
    let mut best: Option<(f64, RnnLm)> = None;
    let mut lr = cfg.lr;
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..encoded.len()).collect();
        order.shuffle(&mut order_rng);
        let mut streams: Vec<Vec<StreamStep>> = vec![Vec::new(); batch];
        for (i, &s) in order.iter().enumerate() {
            streams[i % batch].extend(sentence_steps(&encoded[s]));
        }
        let longest = streams.iter().map(Vec::len).max().unwrap_or(0);
        let mut states: Vec<RnnState> = (0..batch).map(|_| current.initial_state()).collect();
        let mut epoch_nll = 0.0;
        let mut epoch_tokens = 0usize;

        for (window, start) in (0..longest).step_by(unroll).enumerate() {
            let mut chunk = Vec::with_capacity(batch);
            let mut masks = Vec::with_capacity(batch);
            for (b, stream) in streams.iter().enumerate() {
                let steps = stream[start.min(stream.len())..(start + unroll).min(stream.len())].to_vec();
                if cfg.dropout > 0.0 {
                    masks.push(
                        (0..steps.len())
                            .map(|_| DropoutMasks::sample(&dims, cfg.dropout, &mut dropout_rng))
                            .collect::<Vec<_>>(),
                    );
                }
                chunk.push((steps, std::mem::replace(&mut states[b], RnnState::zeros(0, 0))));
            }
            let tokens: usize = chunk.iter().map(|(s, _)| s.len()).sum();
            let masks = (cfg.dropout > 0.0).then_some(masks.as_slice());
            let (loss, mut grads, next) = batch_loss_and_gradient(&current, &chunk, masks)?;
            if !loss.is_finite() {
                return Err(RnnError::NonFiniteLoss { epoch, window });
            }
            states = next;
            epoch_nll += loss * tokens as f64;
            epoch_tokens += tokens;
            let norm = grads.norm();
            if norm > cfg.clip {
                grads.scale(cfg.clip / norm);
            }
            current.apply_sgd(&grads, lr);
        }

        let train_ppl = (epoch_nll / epoch_tokens.max(1) as f64).exp();
        let valid_ppl = valid
            .as_ref()
            .map(|v| validation_perplexity(&current, v))
            .transpose()?;
        match valid_ppl {
            Some(v) => info!("epoch {}: lr {lr:.4} train ppl {train_ppl:.3} valid ppl {v:.3}", epoch + 1),
            None => info!("epoch {}: lr {lr:.4} train ppl {train_ppl:.3}", epoch + 1),
        }
        report.epochs.push(EpochStats {
            epoch: epoch + 1,
            lr,
            train_perplexity: train_ppl,
            valid_perplexity: valid_ppl,
        });

        if let Some(v) = valid_ppl {
            match &best {
                Some((best_ppl, best_model)) if v >= *best_ppl => {
                    current = best_model.clone();
                    report.stopped_early = true;
                    break;
                }
                Some((best_ppl, _)) if v > best_ppl * (1.0 - cfg.min_improvement) => lr *= 0.5,
                _ => {}
            }
            best = Some((v, current.clone()));
        }
    }
    Ok((current, report))
}
