//! Shortlist LSTM language model.
//!
//! The network is split into three parts: the input projection (columns of
//! the input embedding matrix, one per shortlist word), a stack of LSTM
//! layers, and the output projection (columns of the output embedding matrix
//! plus an output bias). Vocabulary expansion only ever touches the two
//! projections, so they are kept as separate column-major matrices.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use train::{
    batch_loss_and_gradient, train_bptt, EpochStats, Gradients, StreamStep, TrainConfig, TrainReport,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{sigmoid, Matrix};
use crate::vocab::{VocabError, Vocabulary, WordId, BOS_ID, EOS_ID};

#[derive(Debug, Error)]
pub enum RnnError {
    #[error("word id {id} out of range for {columns} output columns")]
    WordOutOfRange { id: WordId, columns: usize },
    #[error("cannot score an empty sentence")]
    EmptySentence,
    #[error("state does not match model: {0}")]
    StateMismatch(String),
    #[error("inconsistent model shapes: {0}")]
    Shape(String),
    #[error("non-finite loss at epoch {epoch}, window {window}")]
    NonFiniteLoss { epoch: usize, window: usize },
    #[error("training corpus has no sentences")]
    EmptyCorpus,
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub layers: usize,
    pub d_s: usize,
    pub d_h: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            layers: 2,
            d_s: 32,
            d_h: 64,
        }
    }
}

/// One LSTM layer. Gate rows are stacked as input, forget, output, candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub w_x: Matrix,
    pub w_h: Matrix,
    pub bias: Vec<f64>,
}

impl LstmLayer {
    pub fn zeros(d_in: usize, d_h: usize) -> Self {
        LstmLayer {
            w_x: Matrix::zeros(4 * d_h, d_in),
            w_h: Matrix::zeros(4 * d_h, d_h),
            bias: vec![0.0; 4 * d_h],
        }
    }

    pub fn d_in(&self) -> usize {
        self.w_x.cols()
    }

    pub fn d_h(&self) -> usize {
        self.w_h.cols()
    }

    /// Runs one step. Returns activated gates `[i | f | o | g]`, new cell, new hidden.
    pub(crate) fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d_h = self.d_h();
        let mut z = self.bias.clone();
        self.w_x.gemv_acc(x, &mut z);
        self.w_h.gemv_acc(h_prev, &mut z);
        for v in &mut z[..3 * d_h] {
            *v = sigmoid(*v);
        }
        for v in &mut z[3 * d_h..] {
            *v = v.tanh();
        }
        let mut c = vec![0.0; d_h];
        let mut h = vec![0.0; d_h];
        for k in 0..d_h {
            let (i, f, o, g) = (z[k], z[d_h + k], z[2 * d_h + k], z[3 * d_h + k]);
            c[k] = f * c_prev[k] + i * g;
            h[k] = o * c[k].tanh();
        }
        (z, c, h)
    }
}

/// Hidden and cell vectors for every layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnState {
    pub h: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
}

impl RnnState {
    pub fn zeros(layers: usize, d_h: usize) -> Self {
        RnnState {
            h: vec![vec![0.0; d_h]; layers],
            c: vec![vec![0.0; d_h]; layers],
        }
    }

    pub fn top(&self) -> &[f64] {
        self.h.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub state: RnnState,
}

/// Inverted-dropout masks for one timestep: one per layer input plus one on
/// the top hidden vector before the output projection. Entries are 0 or 1/(1-p).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub inputs: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl DropoutMasks {
    pub fn sample<R: rand::Rng>(dims: &ModelDims, p: f64, rng: &mut R) -> Self {
        let keep = 1.0 / (1.0 - p);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
                .collect()
        };
        let inputs = (0..dims.layers)
            .map(|l| draw(if l == 0 { dims.d_s } else { dims.d_h }))
            .collect();
        let output = draw(dims.d_h);
        DropoutMasks { inputs, output }
    }
}

fn apply_mask(x: &[f64], mask: Option<&Vec<f64>>) -> Vec<f64> {
    match mask {
        Some(m) => x.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => x.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RnnLm {
    vocab: Vocabulary,
    input_emb: Matrix,
    layers: Vec<LstmLayer>,
    output_emb: Matrix,
    output_bias: Vec<f64>,
}

impl RnnLm {
    /// Assembles a model, checking that every shape agrees with the
    /// vocabulary's shortlist size.
    pub fn from_parts(
        vocab: Vocabulary,
        input_emb: Matrix,
        layers: Vec<LstmLayer>,
        output_emb: Matrix,
        output_bias: Vec<f64>,
    ) -> Result<Self, RnnError> {
        let n = vocab.shortlist_size();
        let shape = |msg: String| Err(RnnError::Shape(msg));
        if layers.is_empty() {
            return shape("at least one LSTM layer is required".into());
        }
        if input_emb.cols() != n || output_emb.cols() != n || output_bias.len() != n {
            return shape(format!(
                "shortlist {n} but S has {} columns, U {} columns, bias {} entries",
                input_emb.cols(),
                output_emb.cols(),
                output_bias.len()
            ));
        }
        let d_h = output_emb.rows();
        let mut d_in = input_emb.rows();
        for (l, layer) in layers.iter().enumerate() {
            if layer.d_in() != d_in
                || layer.d_h() != d_h
                || layer.w_x.rows() != 4 * d_h
                || layer.w_h.rows() != 4 * d_h
                || layer.bias.len() != 4 * d_h
            {
                return shape(format!("layer {l} does not match d_in={d_in}, d_h={d_h}"));
            }
            d_in = d_h;
        }
        Ok(RnnLm {
            vocab,
            input_emb,
            layers,
            output_emb,
            output_bias,
        })
    }

    pub fn zeros(vocab: Vocabulary, dims: ModelDims) -> Self {
        let n = vocab.shortlist_size();
        let layers = (0..dims.layers)
            .map(|l| LstmLayer::zeros(if l == 0 { dims.d_s } else { dims.d_h }, dims.d_h))
            .collect();
        RnnLm {
            vocab,
            input_emb: Matrix::zeros(dims.d_s, n),
            layers,
            output_emb: Matrix::zeros(dims.d_h, n),
            output_bias: vec![0.0; n],
        }
    }

    /// Uniform init in [-scale, scale]; LSTM biases zero except the forget gate
    /// (1.0); output bias zero.
    pub fn random(vocab: Vocabulary, dims: ModelDims, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = vocab.shortlist_size();
        let input_emb = Matrix::uniform(dims.d_s, n, scale, &mut rng);
        let layers = (0..dims.layers)
            .map(|l| {
                let d_in = if l == 0 { dims.d_s } else { dims.d_h };
                let mut bias = vec![0.0; 4 * dims.d_h];
                bias[dims.d_h..2 * dims.d_h].fill(1.0);
                LstmLayer {
                    w_x: Matrix::uniform(4 * dims.d_h, d_in, scale, &mut rng),
                    w_h: Matrix::uniform(4 * dims.d_h, dims.d_h, scale, &mut rng),
                    bias,
                }
            })
            .collect();
        let output_emb = Matrix::uniform(dims.d_h, n, scale, &mut rng);
        RnnLm {
            vocab,
            input_emb,
            layers,
            output_emb,
            output_bias: vec![0.0; n],
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            layers: self.layers.len(),
            d_s: self.input_emb.rows(),
            d_h: self.output_emb.rows(),
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Number of explicitly modeled words (columns of S and U).
    pub fn columns(&self) -> usize {
        self.output_emb.cols()
    }

    pub fn input_embeddings(&self) -> &Matrix {
        &self.input_emb
    }

    pub fn output_embeddings(&self) -> &Matrix {
        &self.output_emb
    }

    pub fn output_bias(&self) -> &[f64] {
        &self.output_bias
    }

    pub fn layers(&self) -> &[LstmLayer] {
        &self.layers
    }


    pub fn initial_state(&self) -> RnnState {
        RnnState::zeros(self.layers.len(), self.dims().d_h)
    }

    fn check_word(&self, word: WordId) -> Result<(), RnnError> {
        if (word as usize) < self.columns() {
            Ok(())
        } else {
            Err(RnnError::WordOutOfRange {
                id: word,
                columns: self.columns(),
            })
        }
    }

    fn check_state(&self, state: &RnnState) -> Result<(), RnnError> {
        let d_h = self.dims().d_h;
        if state.h.len() != self.layers.len() || state.c.len() != self.layers.len() {
            return Err(RnnError::StateMismatch(format!(
                "{} layers in state, {} in model",
                state.h.len(),
                self.layers.len()
            )));
        }
        if state.h.iter().chain(&state.c).any(|v| v.len() != d_h) {
            return Err(RnnError::StateMismatch(format!("vectors must have length {d_h}")));
        }
        Ok(())
    }

    /// Logits for a given top-layer hidden vector: Uᵀh + b_y. `<s>` is never
    /// predicted, so its logit is −∞.
    pub fn logits_for_hidden(&self, h: &[f64]) -> Vec<f64> {
        let mut y = self.output_bias.clone();
        self.output_emb.gemv_t_acc(h, &mut y);
        y[BOS_ID as usize] = f64::NEG_INFINITY;
        y
    }

    /// One recurrent step: embed `word`, run each LSTM layer, project to logits.
    /// Dropout, when given, only touches layer inputs and the pre-output
    /// hidden vector, never the recurrent path.
    pub fn forward_step(
        &self,
        word: WordId,
        state: &RnnState,
        dropout: Option<&DropoutMasks>,
    ) -> Result<StepOutput, RnnError> {
        self.check_word(word)?;
        self.check_state(state)?;
        let mut x = apply_mask(self.input_emb.col(word as usize), dropout.map(|m| &m.inputs[0]));
        let mut next = RnnState {
            h: Vec::with_capacity(self.layers.len()),
            c: Vec::with_capacity(self.layers.len()),
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let (_, c, h) = layer.step(&x, &state.h[l], &state.c[l]);
            if l + 1 < self.layers.len() {
                x = apply_mask(&h, dropout.map(|m| &m.inputs[l + 1]));
            }
            next.h.push(h);
            next.c.push(c);
        }
        let top = apply_mask(next.top(), dropout.map(|m| &m.output));
        Ok(StepOutput {
            logits: self.logits_for_hidden(&top),
            state: next,
        })
    }

    /// Per-position natural-log probabilities of `sentence` followed by `</s>`,
    /// starting from `<s>` and a zero state. Ids must be explicit columns.
    pub fn score_sentence(&self, sentence: &[WordId]) -> Result<Vec<f64>, RnnError> {
        if sentence.is_empty() {
            return Err(RnnError::EmptySentence);
        }
        for &w in sentence {
            self.check_word(w)?;
        }
        let mut state = self.initial_state();
        let mut input = BOS_ID;
        let mut out = Vec::with_capacity(sentence.len() + 1);
        for &target in sentence.iter().chain(std::iter::once(&EOS_ID)) {
            let step = self.forward_step(input, &state, None)?;
            out.push(log_softmax(&step.logits)[target as usize]);
            state = step.state;
            input = target;
        }
        Ok(out)
    }

    /// Scores several sentences in lockstep; results equal per-sentence
    /// [`score_sentence`](Self::score_sentence).
    pub fn score_batch(&self, sentences: &[Vec<WordId>]) -> Result<Vec<Vec<f64>>, RnnError> {
        for s in sentences {
            if s.is_empty() {
                return Err(RnnError::EmptySentence);
            }
            for &w in s {
                self.check_word(w)?;
            }
        }
        let mut states: Vec<RnnState> = sentences.iter().map(|_| self.initial_state()).collect();
        let mut inputs: Vec<WordId> = vec![BOS_ID; sentences.len()];
        let mut out: Vec<Vec<f64>> = sentences.iter().map(|s| Vec::with_capacity(s.len() + 1)).collect();
        let longest = sentences.iter().map(Vec::len).max().unwrap_or(0);
        for t in 0..=longest {
            for (b, s) in sentences.iter().enumerate() {
                if t > s.len() {
                    continue;
                }
                let target = s.get(t).copied().unwrap_or(EOS_ID);
                let step = self.forward_step(inputs[b], &states[b], None)?;
                out[b].push(log_softmax(&step.logits)[target as usize]);
                states[b] = step.state;
                inputs[b] = target;
            }
        }
        Ok(out)
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&y| (y - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&y| (y - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&y| y - lse).collect()
}

/// exp(-(1/N) Σ log p) over every predicted token.
pub fn perplexity(log_probs: &[f64]) -> f64 {
    assert!(!log_probs.is_empty(), "perplexity of an empty set");
    (-log_probs.iter().sum::<f64>() / log_probs.len() as f64).exp()
}
