//! Pre-norm decoder forward pass over a packed batch of multimodal sequences.
//!
//! Every sequence occupies a contiguous block of rows; attention is causal
//! within a block and never crosses blocks. Fine-tuning parameters found in
//! the store (`peft.*`) are applied automatically, steering is applied
//! through [`LayerHook`]s at each layer input.

use crate::error::{Error, Result};
use crate::model::config::ModelConfig;
use crate::model::params::{layer_name, Bound};
use crate::model::sequence::{Modality, TokenizedMultimodalSequence};
use crate::numeric::{AttentionLayout, Tape, Var};
use crate::peft::{self, Method, Target};
use crate::scalar::Scalar;

/// Placement of one sequence in the packed batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    pub start: usize,
    pub len: usize,
    pub tags: Vec<Modality>,
    /// Visual positions relative to `start`.
    pub visual_positions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BatchLayout {
    pub sequences: Vec<SeqLayout>,
    pub rows: usize,
}

impl BatchLayout {
    pub fn of(seqs: &[&TokenizedMultimodalSequence]) -> Self {
        let mut start = 0;
        let mut sequences = Vec::with_capacity(seqs.len());
        for s in seqs {
            sequences.push(SeqLayout {
                start,
                len: s.len(),
                tags: s.tags.clone(),
                visual_positions: s.visual_positions(),
            });
            start += s.len();
        }
        Self { sequences, rows: start }
    }

    /// Absolute row of every position tagged `m`.
    pub fn rows_of(&self, m: Modality) -> Vec<usize> {
        self.sequences
            .iter()
            .flat_map(|s| s.tags.iter().enumerate().filter(move |(_, t)| **t == m).map(move |(i, _)| s.start + i))
            .collect()
    }
}

/// State available to a hook while the tape is being recorded.
pub struct HookCtx<'a, 's, T> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a mut Bound<'s, T>,
    pub layout: &'a BatchLayout,
}

/// Callback on the hidden state entering a layer, before the attention
/// sublayer. Returns the (possibly modified) hidden state.
pub trait LayerHook<T: Scalar> {
    fn enabled(&self) -> bool {
        true
    }

    fn on_layer_input(&self, layer: usize, ctx: &mut HookCtx<'_, '_, T>, hidden: Var) -> Result<Var>;
}

pub struct ForwardOptions<'h, T> {
    /// Applied in order at every layer.
    pub hooks: Vec<&'h dyn LayerHook<T>>,
    /// Scale of LoRA updates, `alpha / rank`.
    pub lora_scale: f64,
    /// Gives visual keys zero attention weight from every other query.
    pub block_visual_keys: bool,
}

impl<T> Default for ForwardOptions<'_, T> {
    fn default() -> Self {
        Self { hooks: Vec::new(), lora_scale: 2.0, block_visual_keys: false }
    }
}

impl<'h, T> ForwardOptions<'h, T> {
    pub fn with_hooks(hooks: Vec<&'h dyn LayerHook<T>>) -> Self {
        Self { hooks, ..Self::default() }
    }
}

/// Tape handles of one layer's intermediate values.
#[derive(Debug, Clone, Copy)]
pub struct LayerRecord {
    /// Layer input before hooks ran.
    pub input_pre_hook: Var,
    /// Layer input after hooks.
    pub input: Var,
    /// Value projections fed to attention (after any IA3 scaling).
    pub values: Var,
    /// Attention node; its weights are readable via `Tape::attention_probs`.
    pub attention: Var,
    pub output: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub logits: Var,
    pub layers: Vec<LayerRecord>,
    pub layout: BatchLayout,
}

fn check_sequence(seq: &TokenizedMultimodalSequence, cfg: &ModelConfig) -> Result<()> {
    seq.validate()?;
    if seq.is_empty() {
        return Err(Error::shape("embed", "empty sequence"));
    }
    if seq.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: seq.len(), max: cfg.max_seq_len });
    }
    if seq.num_visual() > 0 && seq.visual_dim != cfg.visual_embed_dim {
        return Err(Error::shape(
            "embed",
            format!("visual width {} but connector expects {}", seq.visual_dim, cfg.visual_embed_dim),
        ));
    }
    if let Some(&id) = seq.token_ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::OutOfRange { what: "token id", index: id as usize, size: cfg.vocab_size });
    }
    Ok(())
}

/// Layer-0 hidden state without positional embeddings: embedding-table rows
/// for token positions and connector outputs for visual positions, in packed
/// sequence order.
pub fn embed<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut Bound<'_, T>,
    cfg: &ModelConfig,
    seqs: &[&TokenizedMultimodalSequence],
) -> Result<Var> {
    let mut ids = Vec::new();
    let mut visual = Vec::new();
    // Source row of each packed position: text rows first, then visual rows.
    let mut order: Vec<(bool, usize)> = Vec::new();
    for s in seqs {
        check_sequence(s, cfg)?;
        let mut k = 0;
        for tok in s.position_tokens() {
            match tok {
                Some(id) => {
                    order.push((false, ids.len()));
                    ids.push(id as usize);
                }
                None => {
                    order.push((true, visual.len() / cfg.visual_embed_dim));
                    visual.extend(s.visual_row(k).iter().map(|v| T::from_f64_lossy(*v)));
                    k += 1;
                }
            }
        }
    }
    let mut parts = Vec::new();
    let n_text = ids.len();
    if n_text > 0 {
        let table = params.var(tape, "embed.token")?;
        parts.push(tape.gather_rows(table, &ids)?);
    }
    if !visual.is_empty() {
        let nv = visual.len() / cfg.visual_embed_dim;
        let x = tape.constant(&[nv, cfg.visual_embed_dim], visual)?;
        let w = params.var(tape, "connector.weight")?;
        let b = params.var(tape, "connector.bias")?;
        let proj = tape.matmul(x, w)?;
        parts.push(tape.add_row(proj, b)?);
    }
    let stacked = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
    let perm: Vec<usize> = order.iter().map(|&(vis, i)| if vis { n_text + i } else { i }).collect();
    if perm.iter().enumerate().all(|(i, &p)| i == p) {
        Ok(stacked)
    } else {
        tape.gather_rows(stacked, &perm)
    }
}

fn project<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut Bound<'_, T>,
    x: Var,
    layer: usize,
    target: Target,
    lora_scale: f64,
) -> Result<Var> {
    let w = params.var(tape, &target.weight_name(layer))?;
    let lora_a = peft::param_name(Method::Lora, layer, &format!("{}.A", target.as_str()));
    let lora_b = peft::param_name(Method::Lora, layer, &format!("{}.B", target.as_str()));
    let oft_s = peft::param_name(Method::Oft, layer, &format!("{}.S", target.as_str()));
    if params.has(&lora_a) {
        let a = params.var(tape, &lora_a)?;
        let b = params.var(tape, &lora_b)?;
        return peft::lora_forward(tape, x, w, b, a, T::from_f64_lossy(lora_scale));
    }
    if params.has(&oft_s) {
        let s = params.var(tape, &oft_s)?;
        let dim = tape.shape(w)[0];
        // dim/r blocks of r(r-1)/2 parameters each.
        let block = 2 * tape.value(s).len() / dim + 1;
        return peft::oft_forward(tape, x, w, Some(s), block);
    }
    tape.matmul(x, w)
}

fn with_bias<T: Scalar>(tape: &mut Tape<T>, params: &mut Bound<'_, T>, x: Var, name: &str) -> Result<Var> {
    let b = params.var(tape, name)?;
    tape.add_row(x, b)
}

fn maybe_scale<T: Scalar>(tape: &mut Tape<T>, params: &mut Bound<'_, T>, x: Var, name: &str) -> Result<Var> {
    if params.has(name) {
        let s = params.var(tape, name)?;
        tape.mul_row(x, s)
    } else {
        Ok(x)
    }
}

#[allow(clippy::too_many_arguments)]
fn layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut Bound<'_, T>,
    layout: &BatchLayout,
    attn_layout: &AttentionLayout,
    opts: &ForwardOptions<'_, T>,
    l: usize,
    h_in: Var,
) -> Result<LayerRecord> {
    let mut h = h_in;
    for hook in opts.hooks.iter().filter(|hk| hk.enabled()) {
        let mut ctx = HookCtx { tape: &mut *tape, params: &mut *params, layout };
        h = hook.on_layer_input(l, &mut ctx, h)?;
    }
    let input = h;
    let g1 = params.var(tape, &layer_name(l, "ln1.gain"))?;
    let b1 = params.var(tape, &layer_name(l, "ln1.bias"))?;
    let x = tape.layer_norm(h, g1, b1)?;
    let q = project(tape, params, x, l, Target::Q, opts.lora_scale)?;
    let k = project(tape, params, x, l, Target::K, opts.lora_scale)?;
    let v = project(tape, params, x, l, Target::V, opts.lora_scale)?;
    let k = maybe_scale(tape, params, k, &peft::param_name(Method::Ia3, l, "k"))?;
    let v = maybe_scale(tape, params, v, &peft::param_name(Method::Ia3, l, "v"))?;
    let att = tape.causal_attention(q, k, v, attn_layout.clone())?;
    let o = project(tape, params, att, l, Target::O, opts.lora_scale)?;
    let h = tape.add(h, o)?;

    let g2 = params.var(tape, &layer_name(l, "ln2.gain"))?;
    let b2 = params.var(tape, &layer_name(l, "ln2.bias"))?;
    let x = tape.layer_norm(h, g2, b2)?;
    let u = project(tape, params, x, l, Target::FfnIn, opts.lora_scale)?;
    let u = with_bias(tape, params, u, &layer_name(l, "ffn_in.bias"))?;
    let u = tape.gelu(u)?;
    let u = maybe_scale(tape, params, u, &peft::param_name(Method::Ia3, l, "ff"))?;
    let f = project(tape, params, u, l, Target::FfnOut, opts.lora_scale)?;
    let mut f = with_bias(tape, params, f, &layer_name(l, "ffn_out.bias"))?;
    let down = peft::param_name(Method::Adapter, l, "down");
    if params.has(&down) {
        let dn = params.var(tape, &down)?;
        let up = params.var(tape, &peft::param_name(Method::Adapter, l, "up"))?;
        f = peft::adapter_forward(tape, f, dn, up)?;
    }
    let output = tape.add(h, f)?;
    Ok(LayerRecord { input_pre_hook: h_in, input, values: v, attention: att, output })
}

/// Records the forward pass of a packed batch on `tape`.
pub fn forward_batch<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut Bound<'_, T>,
    cfg: &ModelConfig,
    seqs: &[&TokenizedMultimodalSequence],
    opts: &ForwardOptions<'_, T>,
) -> Result<ForwardPass> {
    if seqs.is_empty() {
        return Err(Error::shape("forward", "empty batch"));
    }
    let layout = BatchLayout::of(seqs);
    let e = embed(tape, params, cfg, seqs)?;
    let positions: Vec<usize> = layout.sequences.iter().flat_map(|s| 0..s.len).collect();
    let pos_table = params.var(tape, "embed.pos")?;
    let pos = tape.gather_rows(pos_table, &positions)?;
    let mut h = tape.add(e, pos)?;

    let blocked_keys = if opts.block_visual_keys {
        layout.sequences.iter().flat_map(|s| s.tags.iter().map(|t| *t == Modality::Visual)).collect()
    } else {
        Vec::new()
    };
    let attn_layout = AttentionLayout {
        heads: cfg.num_heads,
        segments: layout.sequences.iter().map(|s| s.start..s.start + s.len).collect(),
        blocked_keys,
    };

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let rec = layer_forward(tape, params, &layout, &attn_layout, opts, l, h).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFiniteActivation { layer: l },
            other => other,
        })?;
        h = rec.output;
        layers.push(rec);
    }
    let g = params.var(tape, "final_ln.gain")?;
    let b = params.var(tape, "final_ln.bias")?;
    let x = tape.layer_norm(h, g, b).map_err(|e| match e {
        Error::NonFinite(_) => Error::NonFiniteActivation { layer: cfg.num_layers },
        other => other,
    })?;
    let head = params.var(tape, "lm_head")?;
    let logits = tape.matmul(x, head)?;
    Ok(ForwardPass { logits, layers, layout })
}

/// Next-token targets of a packed batch: the row before each output token
/// predicts it.
pub fn teacher_targets(seqs: &[&TokenizedMultimodalSequence], layout: &BatchLayout) -> Vec<Option<usize>> {
    let mut targets = vec![None; layout.rows];
    for (s, sl) in seqs.iter().zip(&layout.sequences) {
        for (p, &id) in s.generating_positions().iter().zip(s.target_ids()) {
            targets[sl.start + p] = Some(id as usize);
        }
    }
    targets
}

/// Forward pass plus mean cross-entropy over every output token.
pub fn loss_batch<T: Scalar>(
    tape: &mut Tape<T>,
    params: &mut Bound<'_, T>,
    cfg: &ModelConfig,
    seqs: &[&TokenizedMultimodalSequence],
    opts: &ForwardOptions<'_, T>,
) -> Result<(Var, ForwardPass)> {
    let pass = forward_batch(tape, params, cfg, seqs, opts)?;
    let targets = teacher_targets(seqs, &pass.layout);
    if targets.iter().all(Option::is_none) {
        return Err(Error::shape("loss", "batch has no output tokens"));
    }
    let loss = tape.cross_entropy(pass.logits, &targets)?;
    Ok((loss, pass))
}
