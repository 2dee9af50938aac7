//! The decoder, its parameters and the sequence format it consumes.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;
pub mod sequence;

pub use config::ModelConfig;
pub use forward::{
    embed, forward_batch, loss_batch, teacher_targets, BatchLayout, ForwardOptions, ForwardPass, HookCtx,
    LayerHook, LayerRecord, SeqLayout,
};
pub use params::{init_base, Bound, ParamStore};
pub use sequence::{Modality, TokenizedMultimodalSequence};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Tape, Tensor};
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Attention weights of one sequence: `maps[layer][head]` is a row-major
/// `len × len` matrix indexed `[query, key]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub sample_id: usize,
    pub tags: Vec<Modality>,
    pub maps: Vec<Vec<Vec<f64>>>,
}

impl AttentionTrace {
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn num_layers(&self) -> usize {
        self.maps.len()
    }

    pub fn num_heads(&self) -> usize {
        self.maps.first().map_or(0, Vec::len)
    }

    pub fn row(&self, layer: usize, head: usize, query: usize) -> &[f64] {
        let n = self.len();
        &self.maps[layer][head][query * n..(query + 1) * n]
    }

    /// Collects the traces of every sequence in a recorded pass.
    pub fn from_pass<T: Scalar>(tape: &Tape<T>, pass: &ForwardPass, first_id: usize) -> Result<Vec<Self>> {
        let mut out: Vec<Self> = pass
            .layout
            .sequences
            .iter()
            .enumerate()
            .map(|(i, s)| Self { sample_id: first_id + i, tags: s.tags.clone(), maps: Vec::new() })
            .collect();
        for rec in &pass.layers {
            let (layout, probs) =
                tape.attention_probs(rec.attention).ok_or_else(|| Error::shape("trace", "not an attention node"))?;
            let h = layout.heads;
            for (si, tr) in out.iter_mut().enumerate() {
                let heads = (0..h).map(|hd| probs[si * h + hd].iter().map(|v| v.to_f64_lossy()).collect()).collect();
                tr.maps.push(heads);
            }
        }
        Ok(out)
    }
}

/// Result of a single-sequence inference pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `[len × vocab]`.
    pub logits: Tensor<T>,
    pub trace: Option<AttentionTrace>,
    /// Layer inputs (after hooks) followed by the last layer's output.
    pub hiddens: Vec<Tensor<T>>,
}

/// One greedy decoding step: the chosen token, the logits it was chosen
/// from, and the attention rows of the generating query.
#[derive(Debug, Clone)]
pub struct GenerationStep<T> {
    pub token: u32,
    pub query_pos: usize,
    pub logits: Vec<T>,
    /// `[layer][head]` weights over keys `0..=query_pos`.
    pub attention: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone)]
pub struct Generation<T> {
    pub tokens: Vec<u32>,
    pub steps: Vec<GenerationStep<T>>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let params = init_base(&config, rng)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params })
    }

    pub fn forward(
        &self,
        seq: &TokenizedMultimodalSequence,
        opts: &ForwardOptions<'_, T>,
        capture: bool,
    ) -> Result<ForwardOutput<T>> {
        let mut tape = Tape::new();
        let mut bound = Bound::new(&self.params);
        let pass = forward_batch(&mut tape, &mut bound, &self.config, &[seq], opts)?;
        let trace = if capture { AttentionTrace::from_pass(&tape, &pass, 0)?.pop() } else { None };
        let mut hiddens: Vec<Tensor<T>> = pass.layers.iter().map(|r| tape.to_tensor(r.input)).collect();
        if let Some(last) = pass.layers.last() {
            hiddens.push(tape.to_tensor(last.output));
        }
        Ok(ForwardOutput { logits: tape.to_tensor(pass.logits), trace, hiddens })
    }

    /// Greedy decoding of `max_new` tokens after `prompt`.
    pub fn generate(
        &self,
        prompt: &TokenizedMultimodalSequence,
        max_new: usize,
        opts: &ForwardOptions<'_, T>,
    ) -> Result<Generation<T>> {
        let total = prompt.len() + max_new;
        if total > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: total, max: self.config.max_seq_len });
        }
        let mut seq = prompt.clone();
        let mut tokens = Vec::with_capacity(max_new);
        let mut steps = Vec::with_capacity(max_new);
        let v = self.config.vocab_size;
        for _ in 0..max_new {
            let out = self.forward(&seq, opts, true)?;
            let q = seq.len() - 1;
            let logits = out.logits.data()[q * v..(q + 1) * v].to_vec();
            let token = argmax(&logits) as u32;
            let trace = out.trace.expect("trace requested");
            let attention = (0..trace.num_layers())
                .map(|l| (0..trace.num_heads()).map(|h| trace.row(l, h, q)[..=q].to_vec()).collect())
                .collect();
            steps.push(GenerationStep { token, query_pos: q, logits, attention });
            tokens.push(token);
            seq = seq.with_output(&[token]);
        }
        Ok(Generation { tokens, steps })
    }
}
