//! Modality attention diagnostics over captured attention traces.
//!
//! Query rows are the generating positions of each trace (the position right
//! before every output token). Per-sample quantities are averaged over heads
//! and queries before any ratio is taken.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, Record};
use crate::model::{forward_batch, AttentionTrace, Bound, ForwardOptions, LayerHook, Modality, Model};
use crate::model::{params::layer_name, TokenizedMultimodalSequence};
use crate::numeric::linalg::spectral_norm;
use crate::numeric::Tape;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// How the per-modality attention level `α` is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    /// Mean weight per key of the modality.
    #[default]
    PerToken,
    /// Summed weight over all keys of the modality.
    TotalMass,
}

/// Generating positions of a trace: rows whose next token is an output.
pub fn query_positions(tags: &[Modality]) -> Vec<usize> {
    (1..tags.len()).filter(|&p| tags[p] == Modality::Output).map(|p| p - 1).collect()
}

/// Per-sample modality levels at one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleModality {
    pub alpha_image: f64,
    pub alpha_text: f64,
    pub visual_share: f64,
}

fn ensure_modalities(trace: &AttentionTrace) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let visual: Vec<usize> = trace.tags.iter().enumerate().filter(|(_, t)| **t == Modality::Visual).map(|(i, _)| i).collect();
    let text: Vec<usize> = trace.tags.iter().enumerate().filter(|(_, t)| **t == Modality::Text).map(|(i, _)| i).collect();
    if visual.is_empty() {
        return Err(Error::ModalityAbsent("visual"));
    }
    if text.is_empty() {
        return Err(Error::ModalityAbsent("text"));
    }
    let queries = query_positions(&trace.tags);
    if queries.is_empty() {
        return Err(Error::ModalityAbsent("output queries"));
    }
    Ok((visual, text, queries))
}

/// Head- and query-averaged modality levels of one trace at `layer`.
pub fn sample_modality(trace: &AttentionTrace, layer: usize, mode: AlphaMode) -> Result<SampleModality> {
    let (visual, text, queries) = ensure_modalities(trace)?;
    if layer >= trace.num_layers() {
        return Err(Error::OutOfRange { what: "trace layer", index: layer, size: trace.num_layers() });
    }
    let heads = trace.num_heads();
    let (mut img, mut txt, mut share) = (0.0, 0.0, 0.0);
    for h in 0..heads {
        for &q in &queries {
            let row = trace.row(layer, h, q);
            let vm: f64 = visual.iter().map(|&k| row[k]).sum();
            let tm: f64 = text.iter().map(|&k| row[k]).sum();
            let total: f64 = row.iter().sum();
            match mode {
                AlphaMode::PerToken => {
                    img += vm / visual.len() as f64;
                    txt += tm / text.len() as f64;
                }
                AlphaMode::TotalMass => {
                    img += vm;
                    txt += tm;
                }
            }
            share += if total > 0.0 { vm / total } else { 0.0 };
        }
    }
    let n = (heads * queries.len()) as f64;
    Ok(SampleModality { alpha_image: img / n, alpha_text: txt / n, visual_share: share / n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    /// Mean over samples of `α_image / α_text`.
    pub lmar: f64,
    pub alpha_image: f64,
    pub alpha_text: f64,
    pub visual_share_mean: f64,
    /// Samples that entered the mean.
    pub n: usize,
    /// Samples dropped because `α_text` was zero.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityAttentionSummary {
    pub mode: AlphaMode,
    pub layers: Vec<LayerSummary>,
}

impl ModalityAttentionSummary {
    pub fn lmar(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.lmar).collect()
    }

    /// Mean LMAR over layers.
    pub fn mean_lmar(&self) -> f64 {
        self.layers.iter().map(|l| l.lmar).sum::<f64>() / self.layers.len().max(1) as f64
    }

    pub fn mean_visual_share(&self) -> f64 {
        self.layers.iter().map(|l| l.visual_share_mean).sum::<f64>() / self.layers.len().max(1) as f64
    }

    /// CSV with columns `layer,lmar,visual_share_mean,n`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["layer", "lmar", "visual_share_mean", "n"]).map_err(csv_err)?;
        for l in &self.layers {
            out.write_record([
                l.layer.to_string(),
                format!("{:.12}", l.lmar),
                format!("{:.12}", l.visual_share_mean),
                l.n.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::format("csv", format!("{other:?}")),
    }
}

/// Layer-wise modality attention ratio with the per-token `α`.
pub fn lmar(traces: &[AttentionTrace]) -> Result<ModalityAttentionSummary> {
    lmar_with(traces, AlphaMode::PerToken)
}

pub fn lmar_with(traces: &[AttentionTrace], mode: AlphaMode) -> Result<ModalityAttentionSummary> {
    let first = traces.first().ok_or(Error::ModalityAbsent("traces"))?;
    let num_layers = first.num_layers();
    let mut layers = Vec::with_capacity(num_layers);
    for l in 0..num_layers {
        let (mut ratio, mut img, mut txt, mut share) = (0.0, 0.0, 0.0, 0.0);
        let (mut n, mut excluded) = (0, 0);
        for tr in traces {
            let s = sample_modality(tr, l, mode)?;
            if s.alpha_text == 0.0 {
                excluded += 1;
                continue;
            }
            ratio += s.alpha_image / s.alpha_text;
            img += s.alpha_image;
            txt += s.alpha_text;
            share += s.visual_share;
            n += 1;
        }
        let d = n.max(1) as f64;
        layers.push(LayerSummary {
            layer: l,
            lmar: if n == 0 { f64::NAN } else { ratio / d },
            alpha_image: img / d,
            alpha_text: txt / d,
            visual_share_mean: share / d,
            n,
            excluded,
        });
    }
    Ok(ModalityAttentionSummary { mode, layers })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShareDistribution {
    pub layer: usize,
    /// One visual share per sample, in input order.
    pub shares: Vec<f64>,
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub min: f64,
    pub max: f64,
}

/// Linear-interpolated quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-layer distribution of the visual attention share across samples.
pub fn attention_distribution(traces: &[AttentionTrace]) -> Result<Vec<ShareDistribution>> {
    let first = traces.first().ok_or(Error::ModalityAbsent("traces"))?;
    let mut out = Vec::new();
    for l in 0..first.num_layers() {
        let shares = traces
            .iter()
            .map(|t| sample_modality(t, l, AlphaMode::PerToken).map(|s| s.visual_share))
            .collect::<Result<Vec<_>>>()?;
        let mut sorted = shares.clone();
        sorted.sort_by(f64::total_cmp);
        out.push(ShareDistribution {
            layer: l,
            mean: shares.iter().sum::<f64>() / shares.len() as f64,
            median: quantile(&sorted, 0.5),
            q25: quantile(&sorted, 0.25),
            q75: quantile(&sorted, 0.75),
            min: sorted[0],
            max: sorted[sorted.len() - 1],
            shares,
        });
    }
    Ok(out)
}

/// One line of the trace dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDumpRecord {
    pub sample_id: usize,
    pub layer: usize,
    pub head: usize,
    pub query_pos: usize,
    pub system: f64,
    pub text: f64,
    pub visual: f64,
    pub output: f64,
}

/// Writes one JSON line per (sample, layer, head, generating query).
pub fn write_trace_dump<W: Write>(traces: &[AttentionTrace], mut w: W) -> Result<()> {
    for tr in traces {
        for q in query_positions(&tr.tags) {
            for l in 0..tr.num_layers() {
                for h in 0..tr.num_heads() {
                    let row = tr.row(l, h, q);
                    let mut masses = [0.0; 4];
                    for (k, t) in tr.tags.iter().enumerate() {
                        let slot = match t {
                            Modality::System => 0,
                            Modality::Text => 1,
                            Modality::Visual => 2,
                            Modality::Output => 3,
                        };
                        masses[slot] += row[k];
                    }
                    let rec = TraceDumpRecord {
                        sample_id: tr.sample_id,
                        layer: l,
                        head: h,
                        query_pos: q,
                        system: masses[0],
                        text: masses[1],
                        visual: masses[2],
                        output: masses[3],
                    };
                    serde_json::to_writer(&mut w, &rec).map_err(|e| Error::format("trace dump", e.to_string()))?;
                    w.write_all(b"\n")?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_dump(text: &str) -> Result<Vec<TraceDumpRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::format("trace dump", e.to_string())))
        .collect()
}

/// Full attention maps as checkpoint records `trace.layer{l}.head{h}` with
/// dims `[samples, len, len]`; shorter traces are zero-padded to the
/// longest, whose lengths go to `trace.lengths`.
pub fn traces_to_checkpoint(traces: &[AttentionTrace]) -> Result<Checkpoint> {
    let first = traces.first().ok_or(Error::ModalityAbsent("traces"))?;
    let n = traces.iter().map(AttentionTrace::len).max().unwrap_or(0);
    let mut ck = Checkpoint::new();
    ck.push(Record::new("trace.lengths", vec![traces.len()], traces.iter().map(|t| t.len() as f64).collect())?);
    for l in 0..first.num_layers() {
        for h in 0..first.num_heads() {
            let mut data = vec![0.0; traces.len() * n * n];
            for (s, tr) in traces.iter().enumerate() {
                let len = tr.len();
                for q in 0..len {
                    let row = tr.row(l, h, q);
                    data[s * n * n + q * n..s * n * n + q * n + len].copy_from_slice(row);
                }
            }
            ck.push(Record::new(format!("trace.layer{l}.head{h}"), vec![traces.len(), n, n], data)?);
        }
    }
    Ok(ck)
}

/// Output-change diagnostics for a steering intervention at the final
/// attention block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaYReport {
    /// `‖(C′ − C)·W_o‖`.
    pub delta_y_norm: f64,
    /// Spectral norm of the final output projection.
    pub w_o_norm: f64,
    /// `‖C′ − C‖` where `C` is the visual-key part of the attention output.
    pub delta_c_norm: f64,
    pub bound_satisfied: bool,
    /// `‖h′_image‖ / ‖h_image‖` at the final layer input.
    pub norm_ratio: f64,
    /// Largest observed `‖Δlogits‖ / ‖Δvisual‖` over random input probes.
    pub lipschitz_estimate: f64,
}

/// Relative rounding slack allowed when comparing both sides of the bound.
pub const BOUND_SLACK: f64 = 1e-12;
const LIPSCHITZ_PROBES: usize = 10;
const PROBE_SCALE: f64 = 1e-4;

struct FinalBlock {
    /// Visual-key contributions at each query row, `[queries × D]`.
    c_image: Vec<f64>,
    /// Visual rows of the final layer input, flattened.
    h_image: Vec<f64>,
    /// Logits at the query rows.
    logits: Vec<f64>,
}

fn final_block<T: Scalar>(
    model: &Model<T>,
    seq: &TokenizedMultimodalSequence,
    queries: &[usize],
    hooks: Vec<&dyn LayerHook<T>>,
) -> Result<FinalBlock> {
    let cfg = &model.config;
    let mut tape = Tape::new();
    let mut bound = Bound::new(&model.params);
    let opts = ForwardOptions { hooks, ..ForwardOptions::default() };
    let pass = forward_batch(&mut tape, &mut bound, cfg, &[seq], &opts)?;
    let last = pass.layers.last().ok_or_else(|| Error::shape("delta_y", "model has no layers"))?;
    let (_, probs) = tape.attention_probs(last.attention).ok_or_else(|| Error::shape("delta_y", "attention"))?;
    let d = cfg.hidden_dim;
    let dh = cfg.head_dim();
    let n = seq.len();
    let values = tape.value(last.values);
    let visual = seq.visual_positions();
    let mut c_image = vec![0.0; queries.len() * d];
    for (qi, &q) in queries.iter().enumerate() {
        for h in 0..cfg.num_heads {
            let p = &probs[h];
            for &k in &visual {
                let w = p[q * n + k].to_f64_lossy();
                for c in h * dh..(h + 1) * dh {
                    c_image[qi * d + c] += w * values[k * d + c].to_f64_lossy();
                }
            }
        }
    }
    let input = tape.value(last.input);
    let h_image = visual.iter().flat_map(|&k| input[k * d..(k + 1) * d].iter().map(|v| v.to_f64_lossy())).collect();
    let lv = tape.value(pass.logits);
    let v = cfg.vocab_size;
    let logits = queries.iter().flat_map(|&q| lv[q * v..(q + 1) * v].iter().map(|x| x.to_f64_lossy())).collect();
    Ok(FinalBlock { c_image, h_image, logits })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares the final-block visual contribution with and without `hook`.
pub fn delta_y_probe<T: Scalar>(
    model: &Model<T>,
    hook: &dyn LayerHook<T>,
    seq: &TokenizedMultimodalSequence,
    rng: &mut Rng,
) -> Result<DeltaYReport> {
    if seq.num_visual() == 0 {
        return Err(Error::ModalityAbsent("visual"));
    }
    let mut queries = query_positions(&seq.tags);
    if queries.is_empty() {
        queries.push(seq.len() - 1);
    }
    let base = final_block(model, seq, &queries, Vec::new())?;
    let steered = final_block(model, seq, &queries, vec![hook])?;
    let d = model.config.hidden_dim;
    let delta_c: Vec<f64> = steered.c_image.iter().zip(&base.c_image).map(|(a, b)| a - b).collect();

    let w_o = model.params.get(&layer_name(model.config.num_layers - 1, "attn.o"))?;
    let w: Vec<f64> = w_o.data().iter().map(|v| v.to_f64_lossy()).collect();
    let mut delta_y = vec![0.0; queries.len() * d];
    for qi in 0..queries.len() {
        for i in 0..d {
            let c = delta_c[qi * d + i];
            if c != 0.0 {
                for j in 0..d {
                    delta_y[qi * d + j] += c * w[i * d + j];
                }
            }
        }
    }
    let w_o_norm = spectral_norm(&w, d, d, 10_000, 1e-15);
    let delta_y_norm = norm(&delta_y);
    let delta_c_norm = norm(&delta_c);
    let rhs = w_o_norm * delta_c_norm;
    let finite = delta_y_norm.is_finite() && rhs.is_finite();
    if !finite {
        return Err(Error::NonFinite("delta_y probe".into()));
    }
    let bound_satisfied = delta_y_norm <= rhs * (1.0 + BOUND_SLACK);

    let hb = norm(&base.h_image);
    let norm_ratio = if hb > 0.0 { norm(&steered.h_image) / hb } else { f64::NAN };

    let mut lipschitz_estimate: f64 = 0.0;
    for _ in 0..LIPSCHITZ_PROBES {
        let mut probe = seq.clone();
        let delta: Vec<f64> = probe.visual_embeds.iter().map(|_| rng.normal() * PROBE_SCALE).collect();
        for (x, dx) in probe.visual_embeds.iter_mut().zip(&delta) {
            *x += dx;
        }
        let out = final_block(model, &probe, &queries, vec![hook])?;
        let dl: Vec<f64> = out.logits.iter().zip(&steered.logits).map(|(a, b)| a - b).collect();
        lipschitz_estimate = lipschitz_estimate.max(norm(&dl) / norm(&delta));
    }

    Ok(DeltaYReport { delta_y_norm, w_o_norm, delta_c_norm, bound_satisfied, norm_ratio, lipschitz_estimate })
}
