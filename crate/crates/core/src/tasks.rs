//! Synthetic multimodal tasks whose answers live in the visual tokens.
//!
//! Vocabulary layout: `0` padding, `1` BOS, `2` QUERY, `3` COUNT, then the
//! key alphabet, then the value alphabet. A visual embedding has
//! `keys + values + noise` dimensions: a one-hot key block, a one-hot value
//! block and Gaussian noise.
//!
//! | task              | layout                                                  | answer            |
//! |-------------------|---------------------------------------------------------|-------------------|
//! | `needle_retrieval`| `BOS V×n value×m QUERY key`                             | value paired with key |
//! | `patch_count`     | `BOS V×n value×m COUNT color`                           | count of color (as value `count−1`) |
//! | `text_only_copy`  | `BOS V×n value×s QUERY key`, visuals pure noise         | text value in slot `key` |
//!
//! In the copy task the key token indexes a text slot, so a model pretrained
//! on it learns to answer from "slot k" of the text. The `m` distractor
//! slots of the visual tasks reuse that layout with random values, which the
//! model has to ignore in favor of the visual tokens.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, forward_batch, Bound, ForwardOptions, Modality, Model, TokenizedMultimodalSequence};
use crate::numeric::Tape;
use crate::rng::Rng;
use crate::scalar::Scalar;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const QUERY: u32 = 2;
pub const COUNT: u32 = 3;
pub const NUM_SPECIAL: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    NeedleRetrieval,
    PatchCount,
    TextOnlyCopy,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::NeedleRetrieval => "needle_retrieval",
            TaskKind::PatchCount => "patch_count",
            TaskKind::TextOnlyCopy => "text_only_copy",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "needle_retrieval" | "needle" => Ok(TaskKind::NeedleRetrieval),
            "patch_count" => Ok(TaskKind::PatchCount),
            "text_only_copy" => Ok(TaskKind::TextOnlyCopy),
            other => Err(Error::config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskSpec {
    pub task: TaskKind,
    pub num_visual: usize,
    pub key_alphabet: usize,
    pub value_alphabet: usize,
    pub noise_dims: usize,
    pub noise_std: f64,
    /// Value slots in the text of `text_only_copy`.
    pub text_slots: usize,
    /// Random value slots placed in the text of the visual tasks.
    pub distractors: usize,
    pub train: usize,
    pub eval: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            task: TaskKind::NeedleRetrieval,
            num_visual: 16,
            key_alphabet: 16,
            value_alphabet: 16,
            noise_dims: 8,
            noise_std: 0.1,
            text_slots: 16,
            distractors: 0,
            train: 2000,
            eval: 500,
            seed: 7,
        }
    }
}

impl TaskSpec {
    pub fn visual_dim(&self) -> usize {
        self.key_alphabet + self.value_alphabet + self.noise_dims
    }

    pub fn vocab_needed(&self) -> usize {
        NUM_SPECIAL + self.key_alphabet + self.value_alphabet
    }

    pub fn key_token(&self, k: usize) -> u32 {
        (NUM_SPECIAL + k) as u32
    }

    pub fn value_token(&self, v: usize) -> u32 {
        (NUM_SPECIAL + self.key_alphabet + v) as u32
    }

    pub fn seq_len(&self) -> usize {
        let text = match self.task {
            TaskKind::TextOnlyCopy => self.text_slots + 2,
            _ => self.distractors + 2,
        };
        1 + self.num_visual + text + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.key_alphabet == 0 || self.value_alphabet == 0 {
            return Err(Error::config("alphabets must be non-empty"));
        }
        match self.task {
            TaskKind::NeedleRetrieval => {
                if self.num_visual == 0 {
                    return Err(Error::config("needle_retrieval needs at least one visual token"));
                }
                if self.num_visual > self.key_alphabet {
                    return Err(Error::config(format!(
                        "{} visual tokens need distinct keys but the key alphabet has {}",
                        self.num_visual, self.key_alphabet
                    )));
                }
            }
            TaskKind::PatchCount => {
                if self.num_visual == 0 {
                    return Err(Error::config("patch_count needs at least one visual token"));
                }
                if self.num_visual > self.value_alphabet {
                    return Err(Error::config(format!(
                        "counts up to {} do not fit a value alphabet of {}",
                        self.num_visual, self.value_alphabet
                    )));
                }
            }
            TaskKind::TextOnlyCopy => {
                if self.text_slots == 0 || self.text_slots > self.key_alphabet {
                    return Err(Error::config(format!(
                        "{} text slots with a key alphabet of {}",
                        self.text_slots, self.key_alphabet
                    )));
                }
            }
        }
        if self.task != TaskKind::TextOnlyCopy && self.distractors > self.key_alphabet {
            return Err(Error::config(format!(
                "{} distractor slots with a key alphabet of {}",
                self.distractors, self.key_alphabet
            )));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSample {
    /// Prompt followed by the answer as the output span.
    pub sequence: TokenizedMultimodalSequence,
    pub answer: Vec<u32>,
    /// Index (among visual tokens) of the token carrying the answer.
    pub needle: Option<usize>,
}

impl TaskSample {
    pub fn prompt(&self) -> TokenizedMultimodalSequence {
        self.sequence.prompt()
    }

    fn signature(&self) -> (Vec<u32>, Vec<u64>) {
        (self.sequence.token_ids.clone(), self.sequence.visual_embeds.iter().map(|v| v.to_bits()).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    pub visual_dim: usize,
    pub train: Vec<TaskSample>,
    pub eval: Vec<TaskSample>,
}

fn distractor_slots(spec: &TaskSpec, rng: &mut Rng) -> Vec<u32> {
    (0..spec.distractors).map(|_| spec.value_token(rng.below(spec.value_alphabet))).collect()
}

fn one_hot_row(spec: &TaskSpec, key: Option<usize>, value: Option<usize>, rng: &mut Rng) -> Vec<f64> {
    let mut row = vec![0.0; spec.visual_dim()];
    if let Some(k) = key {
        row[k] = 1.0;
    }
    if let Some(v) = value {
        row[spec.key_alphabet + v] = 1.0;
    }
    for x in &mut row[spec.key_alphabet + spec.value_alphabet..] {
        *x = rng.normal() * spec.noise_std;
    }
    row
}

fn assemble(spec: &TaskSpec, visual: Vec<f64>, text: Vec<u32>, answer: u32, needle: Option<usize>) -> Result<TaskSample> {
    let mut ids = vec![BOS];
    let mut tags = vec![Modality::System];
    tags.extend(std::iter::repeat(Modality::Visual).take(spec.num_visual));
    tags.extend(std::iter::repeat(Modality::Text).take(text.len()));
    tags.push(Modality::Output);
    ids.extend(text);
    ids.push(answer);
    let sequence = TokenizedMultimodalSequence::new(ids, visual, spec.visual_dim(), tags)?;
    Ok(TaskSample { sequence, answer: vec![answer], needle })
}

/// One sample drawn from `rng`.
pub fn generate_sample(spec: &TaskSpec, rng: &mut Rng) -> Result<TaskSample> {
    let n = spec.num_visual;
    match spec.task {
        TaskKind::NeedleRetrieval => {
            let keys = rng.sample_distinct(spec.key_alphabet, n);
            let values: Vec<usize> = (0..n).map(|_| rng.below(spec.value_alphabet)).collect();
            let q = rng.below(n);
            let mut visual = Vec::with_capacity(n * spec.visual_dim());
            for i in 0..n {
                visual.extend(one_hot_row(spec, Some(keys[i]), Some(values[i]), rng));
            }
            let mut text = distractor_slots(spec, rng);
            text.extend([QUERY, spec.key_token(keys[q])]);
            assemble(spec, visual, text, spec.value_token(values[q]), Some(q))
        }
        TaskKind::PatchCount => {
            let colors: Vec<usize> = (0..n).map(|_| rng.below(spec.key_alphabet)).collect();
            let pick = rng.below(n);
            let color = colors[pick];
            let count = colors.iter().filter(|&&c| c == color).count();
            let mut visual = Vec::with_capacity(n * spec.visual_dim());
            for &c in &colors {
                visual.extend(one_hot_row(spec, Some(c), None, rng));
            }
            let mut text = distractor_slots(spec, rng);
            text.extend([COUNT, spec.key_token(color)]);
            assemble(spec, visual, text, spec.value_token(count - 1), Some(pick))
        }
        TaskKind::TextOnlyCopy => {
            let mut visual = Vec::with_capacity(n * spec.visual_dim());
            for _ in 0..n * spec.visual_dim() {
                visual.push(rng.normal());
            }
            let values: Vec<usize> = (0..spec.text_slots).map(|_| rng.below(spec.value_alphabet)).collect();
            let q = rng.below(spec.text_slots);
            let mut text: Vec<u32> = values.iter().map(|&v| spec.value_token(v)).collect();
            text.extend([QUERY, spec.key_token(q)]);
            assemble(spec, visual, text, spec.value_token(values[q]), None)
        }
    }
}

const EVAL_STREAM: u64 = 1 << 32;
const RETRY_STRIDE: u64 = 1 << 40;
const MAX_RETRIES: u64 = 64;

fn has_duplicate_keys(s: &TaskSample, spec: &TaskSpec) -> bool {
    if spec.task != TaskKind::NeedleRetrieval {
        return false;
    }
    let mut keys = HashSet::new();
    (0..spec.num_visual).any(|i| {
        let row = s.sequence.visual_row(i);
        let k = (0..spec.key_alphabet).find(|&k| row[k] == 1.0);
        !keys.insert(k)
    })
}

/// Draws sample `index` of a stream, redrawing on duplicate keys or when
/// `reject` says so.
fn draw(spec: &TaskSpec, root: &Rng, index: u64, reject: impl Fn(&TaskSample) -> bool) -> Result<TaskSample> {
    for attempt in 0..MAX_RETRIES {
        let s = generate_sample(spec, &mut root.fork(index + attempt * RETRY_STRIDE))?;
        if !has_duplicate_keys(&s, spec) && !reject(&s) {
            return Ok(s);
        }
    }
    Err(Error::config("cannot draw a valid sample disjoint from train"))
}

/// Train and eval splits fully determined by `spec.seed`. Eval samples that
/// coincide with a train sample are redrawn.
pub fn generate(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let mut seen = HashSet::new();
    let mut train = Vec::with_capacity(spec.train);
    for i in 0..spec.train {
        let s = draw(spec, &root, i as u64, |_| false)?;
        seen.insert(s.signature());
        train.push(s);
    }
    let mut eval = Vec::with_capacity(spec.eval);
    for i in 0..spec.eval {
        eval.push(draw(spec, &root, EVAL_STREAM + i as u64, |s| seen.contains(&s.signature()))?);
    }
    Ok(Dataset { task: spec.task, visual_dim: spec.visual_dim(), train, eval })
}

// ---------------------------------------------------------------------------
// Dataset file
// ---------------------------------------------------------------------------

/// First line of a dataset file.
pub const DATASET_HEADER: &str = "#mores-dataset v1";

impl Dataset {
    /// Tab-separated records after a header line:
    ///
    /// ```text
    /// #mores-dataset v1 task=<task> visual_dim=<d_v>
    /// split  tags  token_ids  answer  needle  visual
    /// ```
    ///
    /// `split` is `train` or `eval`; `tags` is one of `S T V O` per position;
    /// `token_ids` and `answer` are comma-separated integers; `needle` is the
    /// answer-carrying visual index or `-`; `visual` is base64 of the visual
    /// rows as little-endian f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{DATASET_HEADER} task={} visual_dim={}", self.task, self.visual_dim)?;
        for (split, samples) in [("train", &self.train), ("eval", &self.eval)] {
            for s in samples.iter() {
                let seq = &s.sequence;
                let tags: String = seq.tags.iter().map(|t| t.code()).collect();
                let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
                let mut bytes = Vec::with_capacity(seq.visual_embeds.len() * 8);
                for v in &seq.visual_embeds {
                    bytes.extend_from_slice(&v.to_le_bytes());
                }
                let needle = s.needle.map_or("-".to_string(), |n| n.to_string());
                writeln!(
                    w,
                    "{split}\t{tags}\t{}\t{}\t{needle}\t{}",
                    join(&seq.token_ids),
                    join(&s.answer),
                    B64.encode(&bytes)
                )?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::format("dataset", format!("line {line}: {msg}"));
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad(1, "empty file"))??;
        let rest = header.strip_prefix(DATASET_HEADER).ok_or_else(|| bad(1, "missing header"))?;
        let mut task = None;
        let mut visual_dim = None;
        for field in rest.split_whitespace() {
            match field.split_once('=') {
                Some(("task", v)) => task = Some(v.parse::<TaskKind>().map_err(|_| bad(1, "unknown task"))?),
                Some(("visual_dim", v)) => visual_dim = Some(v.parse::<usize>().map_err(|_| bad(1, "visual_dim"))?),
                _ => return Err(bad(1, &format!("unexpected header field `{field}`"))),
            }
        }
        let task = task.ok_or_else(|| bad(1, "header lacks task"))?;
        let visual_dim = visual_dim.ok_or_else(|| bad(1, "header lacks visual_dim"))?;
        let mut ds = Dataset { task, visual_dim, train: Vec::new(), eval: Vec::new() };
        for (i, line) in lines.enumerate() {
            let ln = i + 2;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad(ln, &format!("expected 6 fields, got {}", f.len())));
            }
            let tags = f[1]
                .chars()
                .map(|c| Modality::from_code(c).ok_or_else(|| bad(ln, "bad tag")))
                .collect::<Result<Vec<_>>>()?;
            let ints = |s: &str| -> Result<Vec<u32>> {
                if s.is_empty() {
                    return Ok(Vec::new());
                }
                s.split(',').map(|x| x.parse::<u32>().map_err(|_| bad(ln, "bad integer"))).collect()
            };
            let token_ids = ints(f[2])?;
            let answer = ints(f[3])?;
            let needle = match f[4] {
                "-" => None,
                n => Some(n.parse::<usize>().map_err(|_| bad(ln, "bad needle index"))?),
            };
            let bytes = B64.decode(f[5]).map_err(|_| bad(ln, "bad base64"))?;
            if bytes.len() % 8 != 0 {
                return Err(bad(ln, "visual payload is not a whole number of f64"));
            }
            let visual = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let sequence = TokenizedMultimodalSequence::new(token_ids, visual, visual_dim, tags)
                .map_err(|e| bad(ln, &e.to_string()))?;
            let sample = TaskSample { sequence, answer, needle };
            match f[0] {
                "train" => ds.train.push(sample),
                "eval" => ds.eval.push(sample),
                other => return Err(bad(ln, &format!("unknown split `{other}`"))),
            }
        }
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Anything that can answer prompts with a fixed number of tokens.
pub trait Answerer {
    fn answer(&self, prompts: &[&TokenizedMultimodalSequence], len: usize) -> Result<Vec<Vec<u32>>>;
}

/// Batched greedy decoding with a model.
pub struct GreedyDecoder<'a, 'h, T> {
    pub model: &'a Model<T>,
    pub opts: &'a ForwardOptions<'h, T>,
    pub batch: usize,
}

impl<'a, 'h, T: Scalar> GreedyDecoder<'a, 'h, T> {
    pub fn new(model: &'a Model<T>, opts: &'a ForwardOptions<'h, T>) -> Self {
        Self { model, opts, batch: 64 }
    }
}

impl<T: Scalar> Answerer for GreedyDecoder<'_, '_, T> {
    fn answer(&self, prompts: &[&TokenizedMultimodalSequence], len: usize) -> Result<Vec<Vec<u32>>> {
        let cfg = &self.model.config;
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(self.batch.max(1)) {
            let mut seqs: Vec<TokenizedMultimodalSequence> = chunk.iter().map(|p| (*p).clone()).collect();
            if let Some(s) = seqs.iter().find(|s| s.len() + len > cfg.max_seq_len) {
                return Err(Error::SequenceTooLong { len: s.len() + len, max: cfg.max_seq_len });
            }
            let mut answers = vec![Vec::with_capacity(len); seqs.len()];
            for _ in 0..len {
                let refs: Vec<&TokenizedMultimodalSequence> = seqs.iter().collect();
                let mut tape = Tape::new();
                let mut bound = Bound::new(&self.model.params);
                let pass = forward_batch(&mut tape, &mut bound, cfg, &refs, self.opts)?;
                let logits = tape.value(pass.logits);
                let v = cfg.vocab_size;
                for (i, sl) in pass.layout.sequences.iter().enumerate() {
                    let row = sl.start + sl.len - 1;
                    let tok = argmax(&logits[row * v..(row + 1) * v]) as u32;
                    answers[i].push(tok);
                }
                for (s, a) in seqs.iter_mut().zip(&answers) {
                    *s = s.with_output(&a[a.len() - 1..]);
                }
            }
            out.extend(answers);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub correct: Vec<bool>,
}

/// Exact-match accuracy of greedy answers.
pub fn evaluate(answerer: &dyn Answerer, samples: &[TaskSample]) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let prompts: Vec<TokenizedMultimodalSequence> = samples.iter().map(TaskSample::prompt).collect();
    let mut correct = vec![false; samples.len()];
    // Group by answer length so each batch decodes a fixed number of tokens.
    let mut lens: Vec<usize> = samples.iter().map(|s| s.answer.len()).collect();
    lens.sort_unstable();
    lens.dedup();
    for len in lens {
        let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].answer.len() == len).collect();
        let refs: Vec<&TokenizedMultimodalSequence> = idx.iter().map(|&i| &prompts[i]).collect();
        let got = answerer.answer(&refs, len)?;
        for (&i, a) in idx.iter().zip(&got) {
            correct[i] = *a == samples[i].answer;
        }
    }
    let accuracy = correct.iter().filter(|c| **c).count() as f64 / samples.len() as f64;
    Ok(EvalResult { accuracy, correct })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: TaskKind) -> TaskSpec {
        TaskSpec { task, train: 30, eval: 20, ..TaskSpec::default() }
    }

    #[test]
    fn layouts_match_spec() {
        for task in [TaskKind::NeedleRetrieval, TaskKind::PatchCount, TaskKind::TextOnlyCopy] {
            let spec = small(task);
            let ds = generate(&spec).unwrap();
            for s in ds.train.iter().chain(&ds.eval) {
                assert_eq!(s.sequence.len(), spec.seq_len());
                assert_eq!(s.sequence.num_visual(), spec.num_visual);
                assert_eq!(s.sequence.target_ids(), s.answer.as_slice());
                assert!(s.sequence.token_ids.iter().all(|&t| (t as usize) < spec.vocab_needed()));
            }
        }
    }

    #[test]
    fn needle_answer_is_in_the_visual_tokens() {
        let spec = small(TaskKind::NeedleRetrieval);
        for s in generate(&spec).unwrap().train {
            let ids = &s.sequence.token_ids;
            let q = ids[ids.len() - 2] as usize - NUM_SPECIAL;
            let row = s.sequence.visual_row(s.needle.unwrap());
            assert_eq!(row[q], 1.0);
            let v = (0..spec.value_alphabet).find(|&v| row[spec.key_alphabet + v] == 1.0).unwrap();
            assert_eq!(s.answer, vec![spec.value_token(v)]);
        }
    }

    #[test]
    fn copy_answers_the_indexed_slot() {
        let spec = small(TaskKind::TextOnlyCopy);
        for s in generate(&spec).unwrap().train {
            let ids = &s.sequence.token_ids;
            let slot = ids[ids.len() - 2] as usize - NUM_SPECIAL;
            assert_eq!(ids[ids.len() - 3], QUERY);
            assert_eq!(s.answer, vec![ids[1 + slot]]);
            assert!(s.needle.is_none());
        }
    }

    #[test]
    fn distractors_precede_the_query() {
        let spec = TaskSpec { distractors: 4, ..small(TaskKind::NeedleRetrieval) };
        let ds = generate(&spec).unwrap();
        for s in &ds.train {
            let ids = &s.sequence.token_ids;
            assert_eq!(s.sequence.len(), spec.seq_len());
            assert_eq!(ids[5], QUERY);
            assert!(ids[1..5].iter().all(|&t| t >= spec.value_token(0)));
        }
        let spec = TaskSpec { distractors: 17, ..TaskSpec::default() };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn patch_count_answers_count_the_queried_color() {
        let spec = small(TaskKind::PatchCount);
        for s in generate(&spec).unwrap().train {
            let ids = &s.sequence.token_ids;
            let color = ids[ids.len() - 2] as usize - NUM_SPECIAL;
            let count = (0..spec.num_visual).filter(|&i| s.sequence.visual_row(i)[color] == 1.0).count();
            assert_eq!(s.answer, vec![spec.value_token(count - 1)]);
        }
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let spec = TaskSpec { num_visual: 17, ..TaskSpec::default() };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
        let spec = TaskSpec { task: TaskKind::TextOnlyCopy, text_slots: 0, ..TaskSpec::default() };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn empty_eval_set_is_an_error() {
        struct Never;
        impl Answerer for Never {
            fn answer(&self, _: &[&TokenizedMultimodalSequence], _: usize) -> Result<Vec<Vec<u32>>> {
                unreachable!()
            }
        }
        assert!(matches!(evaluate(&Never, &[]), Err(Error::EmptyEvalSet)));
    }
}
