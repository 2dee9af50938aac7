//! Training driver: stage configuration, the step loop, run records and
//! sweeps.

pub mod optim;
pub mod sweep;

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{self, csv_err};
use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, Record};
use crate::model::params::is_llm_param;
use crate::model::{
    forward_batch, init_base, loss_batch, AttentionTrace, Bound, ForwardOptions, LayerHook, Model, ModelConfig,
    ParamStore, TokenizedMultimodalSequence,
};
use crate::numeric::Tape;
use crate::peft::{self, FreezePolicy, Method, PeftConfig};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::steering::{self, SteeringHook};
use crate::tasks::{self, Dataset, GreedyDecoder, TaskKind, TaskSample, TaskSpec};

pub use optim::{AdamW, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Whole language model trained on the text-only control task.
    PretrainBase,
    /// Connector only, language model frozen.
    PretrainConnector,
    /// Fine-tuning method installed and trained under its freeze policy.
    InstructionTune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub steps: usize,
    pub batch_size: usize,
    /// Evaluate every this many steps (and at the start and end).
    pub eval_interval: usize,
    /// Eval samples used per evaluation; 0 means all.
    pub eval_samples: usize,
    /// Eval samples whose attention feeds the LMAR columns; 0 disables.
    pub analysis_samples: usize,
    /// Stop once eval accuracy reaches this value.
    pub early_stop_accuracy: Option<f64>,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: TaskSpec,
    pub method: PeftConfig,
    pub optimizer: OptimizerConfig,
    /// Base weights to start from; a fresh initialization otherwise.
    pub base_checkpoint: Option<PathBuf>,
    /// Dataset file; generated from `data` otherwise.
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::InstructionTune,
            steps: 2000,
            batch_size: 16,
            eval_interval: 100,
            eval_samples: 0,
            analysis_samples: 100,
            early_stop_accuracy: None,
            seed: 0,
            model: ModelConfig::desk(),
            data: TaskSpec::default(),
            method: PeftConfig::default(),
            optimizer: OptimizerConfig::default(),
            base_checkpoint: None,
            dataset: None,
            out: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval must be at least 1"));
        }
        if self.data.vocab_needed() > self.model.vocab_size {
            return Err(Error::config(format!(
                "task needs {} token ids but vocab_size is {}",
                self.data.vocab_needed(),
                self.model.vocab_size
            )));
        }
        if self.data.visual_dim() != self.model.visual_embed_dim {
            return Err(Error::config(format!(
                "task visual width {} differs from visual_embed_dim {}",
                self.data.visual_dim(),
                self.model.visual_embed_dim
            )));
        }
        if self.data.seq_len() > self.model.max_seq_len {
            return Err(Error::config(format!(
                "task sequences of length {} exceed max_seq_len {}",
                self.data.seq_len(),
                self.model.max_seq_len
            )));
        }
        if let Some(a) = self.early_stop_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::config("early_stop_accuracy must lie in [0, 1]"));
            }
        }
        if self.stage == Stage::InstructionTune {
            self.method.validate(&self.model)?;
        }
        Ok(())
    }

    pub fn learning_rate(&self) -> f64 {
        self.optimizer.learning_rate.unwrap_or(match self.stage {
            Stage::InstructionTune => self.method.method.default_learning_rate(),
            _ => 1e-3,
        })
    }

    pub fn freeze_policy(&self) -> FreezePolicy {
        match self.stage {
            Stage::PretrainBase => FreezePolicy::llm(),
            Stage::PretrainConnector => FreezePolicy::connector(),
            Stage::InstructionTune => FreezePolicy::for_method(self.method.method),
        }
    }

    /// Base weights named by `base_checkpoint`, or a fresh initialization.
    pub fn load_base<T: Scalar>(&self) -> Result<ParamStore<T>> {
        match &self.base_checkpoint {
            Some(p) => base_params(&Checkpoint::load(p)?),
            None => init_base(&self.model, &mut Rng::new(self.seed).fork(STREAM_INIT)),
        }
    }

    pub fn load_data(&self) -> Result<Dataset> {
        match &self.dataset {
            Some(p) => Dataset::load(p),
            None => tasks::generate(&self.data),
        }
    }
}

/// Base-model and connector tensors of a checkpoint.
pub fn base_params<T: Scalar>(ck: &Checkpoint) -> Result<ParamStore<T>> {
    let mut store: ParamStore<T> = ck.params("")?;
    let drop: Vec<String> =
        store.names().filter(|n| !(is_llm_param(n) || n.starts_with("connector."))).cloned().collect();
    for n in drop {
        store.remove(&n);
    }
    Ok(store)
}

/// Every model tensor of a checkpoint (base, connector, fine-tuning
/// additions), leaving out optimizer state and run metadata.
pub fn model_params<T: Scalar>(ck: &Checkpoint) -> Result<ParamStore<T>> {
    let mut store: ParamStore<T> = ck.params("")?;
    store.remove_prefix("adam.");
    store.remove_prefix("meta.");
    store.remove_prefix("trace.");
    Ok(store)
}

const STREAM_INIT: u64 = 1;
const STREAM_INSTALL: u64 = 2;
const STREAM_BATCH: u64 = 3;
const STREAM_REORTH: u64 = 4;
const EVAL_BATCH: usize = 64;

/// One evaluation row of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub step: usize,
    /// Mean training loss since the previous row (NaN for the first row).
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub lmar: Vec<f64>,
    pub lmar_mean: f64,
    pub visual_share: f64,
    pub trainable_params: usize,
    /// Largest `|UᵀU − I|` seen since the previous row.
    pub orth_defect: f64,
    pub wall_clock_s: f64,
}

/// Append-only evaluation log.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunRecord {
    pub rows: Vec<RecordRow>,
}

impl RunRecord {
    pub fn last(&self) -> Option<&RecordRow> {
        self.rows.last()
    }

    /// CSV with one `lmar_l{i}` column per layer.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let layers = self.rows.iter().map(|r| r.lmar.len()).max().unwrap_or(0);
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> =
            ["step", "train_loss", "eval_accuracy"].iter().map(|s| s.to_string()).collect();
        header.extend((0..layers).map(|l| format!("lmar_l{l}")));
        header.extend(
            ["lmar_mean", "visual_share", "trainable_params", "orth_defect", "wall_clock_s"].iter().map(|s| s.to_string()),
        );
        out.write_record(&header).map_err(csv_err)?;
        for r in &self.rows {
            let mut rec = vec![r.step.to_string(), fmt(r.train_loss), fmt(r.eval_accuracy)];
            rec.extend((0..layers).map(|l| r.lmar.get(l).map_or(String::new(), |v| fmt(*v))));
            rec.extend([
                fmt(r.lmar_mean),
                fmt(r.visual_share),
                r.trainable_params.to_string(),
                fmt(r.orth_defect),
                format!("{:.3}", r.wall_clock_s),
            ]);
            out.write_record(&rec).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers().map_err(csv_err)?.clone();
        let col = |name: &str| {
            header.iter().position(|h| h == name).ok_or_else(|| Error::format("run record", format!("no `{name}` column")))
        };
        let lmar_cols: Vec<usize> =
            header.iter().enumerate().filter(|(_, h)| h.starts_with("lmar_l")).map(|(i, _)| i).collect();
        let idx = [
            col("step")?,
            col("train_loss")?,
            col("eval_accuracy")?,
            col("lmar_mean")?,
            col("visual_share")?,
            col("trainable_params")?,
            col("orth_defect")?,
            col("wall_clock_s")?,
        ];
        let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format("run record", format!("bad number `{s}`")));
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec.map_err(csv_err)?;
            let int = |i: usize| rec[i].parse::<usize>().map_err(|_| Error::format("run record", "bad integer"));
            rows.push(RecordRow {
                step: int(idx[0])?,
                train_loss: num(&rec[idx[1]])?,
                eval_accuracy: num(&rec[idx[2]])?,
                lmar: lmar_cols.iter().filter(|&&c| !rec[c].is_empty()).map(|&c| num(&rec[c])).collect::<Result<_>>()?,
                lmar_mean: num(&rec[idx[3]])?,
                visual_share: num(&rec[idx[4]])?,
                trainable_params: int(idx[5])?,
                orth_defect: num(&rec[idx[6]])?,
                wall_clock_s: num(&rec[idx[7]])?,
            });
        }
        Ok(Self { rows })
    }
}

fn fmt(v: f64) -> String {
    // Round-trip exact.
    format!("{v:?}")
}

/// Step loop over one stage.
pub struct Trainer<T> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub optimizer: AdamW<T>,
    hook: Option<SteeringHook>,
    /// Completed optimizer steps.
    pub step: usize,
    /// Loss of every step, in order.
    pub losses: Vec<f64>,
    pub record: RunRecord,
    /// Steering bases that collapsed and were re-seeded, with the step.
    pub reseeded: Vec<(usize, String)>,
    pub trainable_params: usize,
    frozen: Vec<(String, Vec<T>)>,
    pending_loss: (f64, usize),
    pending_defect: f64,
    started: Instant,
}

impl<T: Scalar> Trainer<T> {
    /// Prepares `base` for the configured stage.
    pub fn new(config: TrainConfig, base: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut params = base;
        if config.stage == Stage::InstructionTune {
            peft::install(&mut params, &config.model, &config.method, &mut Rng::new(config.seed).fork(STREAM_INSTALL))?;
        } else {
            params.remove_prefix("peft.");
            params.remove_prefix("steer.");
        }
        let optimizer = AdamW::new(config.optimizer.clone(), config.learning_rate());
        Self::assemble(config, params, optimizer, 0)
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(config: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let params_only = model_params(ck)?;
        let mut optimizer = AdamW::new(config.optimizer.clone(), config.learning_rate());
        optimizer.load_from(ck)?;
        let step = ck.scalar("meta.step").ok_or_else(|| Error::format("checkpoint", "missing meta.step"))? as usize;
        Self::assemble(config, params_only, optimizer, step)
    }

    fn assemble(config: TrainConfig, mut params: ParamStore<T>, optimizer: AdamW<T>, step: usize) -> Result<Self> {
        config.freeze_policy().apply(&mut params);
        let hook = if config.stage == Stage::InstructionTune && config.method.method == Method::Mores {
            Some(SteeringHook::new(config.method.steering.clone(), config.model.num_layers)?)
        } else {
            None
        };
        let trainable_params = match config.stage {
            Stage::InstructionTune => peft::count_by_enumeration(&params, config.method.method),
            _ => params.trainable_count(),
        };
        let frozen = params.iter().filter(|(_, t)| !t.requires_grad).map(|(n, t)| (n.clone(), t.data().to_vec())).collect();
        let model = Model::from_params(config.model.clone(), params)?;
        Ok(Self {
            config,
            model,
            optimizer,
            hook,
            step,
            losses: Vec::new(),
            record: RunRecord::default(),
            reseeded: Vec::new(),
            trainable_params,
            frozen,
            pending_loss: (0.0, 0),
            pending_defect: 0.0,
            started: Instant::now(),
        })
    }

    pub fn hook(&self) -> Option<&SteeringHook> {
        self.hook.as_ref()
    }

    pub fn options(&self) -> ForwardOptions<'_, T> {
        ForwardOptions {
            hooks: self.hook.iter().map(|h| h as &dyn LayerHook<T>).collect(),
            lora_scale: self.config.method.lora_scale(),
            block_visual_keys: false,
        }
    }

    /// Training-set indices of the batch for step `step` (0-based).
    pub fn batch_indices(&self, step: usize, train_len: usize) -> Vec<usize> {
        let mut rng = Rng::new(self.config.seed).fork(STREAM_BATCH).fork(step as u64);
        (0..self.config.batch_size).map(|_| rng.below(train_len)).collect()
    }

    /// One optimizer step; returns the batch loss.
    pub fn train_step(&mut self, train: &[TaskSample]) -> Result<f64> {
        if train.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let idx = self.batch_indices(self.step, train.len());
        let seqs: Vec<&TokenizedMultimodalSequence> = idx.iter().map(|&i| &train[i].sequence).collect();
        let (loss, grads) = {
            let opts = self.options();
            let mut tape = Tape::new();
            let mut bound = Bound::new(&self.model.params);
            let (loss, _) = loss_batch(&mut tape, &mut bound, &self.model.config, &seqs, &opts).map_err(|e| match e {
                Error::NonFinite(_) | Error::NonFiniteActivation { .. } => Error::NanLoss { step: self.step + 1 },
                other => other,
            })?;
            let value = tape.item(loss).to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::NanLoss { step: self.step + 1 });
            }
            tape.backward(loss)?;
            (value, bound.gradients(&tape))
        };
        self.optimizer.update(&mut self.model.params, &grads)?;
        if self.hook.is_some() {
            let mut rng = Rng::new(self.config.seed).fork(STREAM_REORTH).fork(self.step as u64);
            for name in steering::reorthonormalize_all(&mut self.model.params, &mut rng) {
                self.reseeded.push((self.step + 1, name));
            }
            self.pending_defect = self.pending_defect.max(steering::max_constraint_defect(&self.model.params));
        }
        self.step += 1;
        self.losses.push(loss);
        self.pending_loss.0 += loss;
        self.pending_loss.1 += 1;
        Ok(loss)
    }

    /// Accuracy on the configured eval subset.
    pub fn eval_accuracy(&self, eval: &[TaskSample]) -> Result<f64> {
        let opts = self.options();
        let decoder = GreedyDecoder { model: &self.model, opts: &opts, batch: EVAL_BATCH };
        Ok(tasks::evaluate(&decoder, self.eval_subset(eval))?.accuracy)
    }

    fn eval_subset<'d>(&self, eval: &'d [TaskSample]) -> &'d [TaskSample] {
        match self.config.eval_samples {
            0 => eval,
            n => &eval[..n.min(eval.len())],
        }
    }

    /// Attention traces of `samples` under the current parameters.
    pub fn traces(&self, samples: &[TaskSample]) -> Result<Vec<AttentionTrace>> {
        collect_traces(&self.model, &self.options(), samples)
    }

    /// Appends an evaluation row for the current step.
    pub fn log_eval(&mut self, data: &Dataset) -> Result<&RecordRow> {
        let accuracy = self.eval_accuracy(&data.eval)?;
        let n = self.config.analysis_samples.min(data.eval.len());
        let (lmar, lmar_mean, visual_share) = if n == 0 {
            (Vec::new(), f64::NAN, f64::NAN)
        } else {
            match analysis::lmar(&self.traces(&data.eval[..n])?) {
                Ok(s) => (s.lmar(), s.mean_lmar(), s.mean_visual_share()),
                Err(Error::ModalityAbsent(_)) => (Vec::new(), f64::NAN, f64::NAN),
                Err(e) => return Err(e),
            }
        };
        let (sum, count) = self.pending_loss;
        let defect = self.pending_defect.max(steering::max_constraint_defect(&self.model.params));
        self.record.rows.push(RecordRow {
            step: self.step,
            train_loss: if count == 0 { f64::NAN } else { sum / count as f64 },
            eval_accuracy: accuracy,
            lmar,
            lmar_mean,
            visual_share,
            trainable_params: self.trainable_params,
            orth_defect: defect,
            wall_clock_s: self.started.elapsed().as_secs_f64(),
        });
        self.pending_loss = (0.0, 0);
        self.pending_defect = 0.0;
        Ok(self.record.rows.last().unwrap())
    }

    /// Trains until `steps` or early stop, evaluating at the start, every
    /// `eval_interval` steps and at the end, then checks the freeze policy.
    pub fn run(&mut self, data: &Dataset) -> Result<()> {
        let steps = self.config.steps;
        if self.record.rows.is_empty() {
            self.log_eval(data)?;
        }
        let threshold = self.config.early_stop_accuracy;
        let reached = |r: &RecordRow| threshold.is_some_and(|t| r.eval_accuracy >= t);
        if !reached(self.record.last().unwrap()) {
            while self.step < steps {
                self.train_step(&data.train)?;
                if self.step % self.config.eval_interval == 0 || self.step == steps {
                    let row = self.log_eval(data)?;
                    if reached(row) {
                        break;
                    }
                }
            }
        }
        self.verify_frozen()
    }

    /// Errors if any frozen tensor differs bitwise from its value at start.
    pub fn verify_frozen(&self) -> Result<()> {
        for (name, data) in &self.frozen {
            let now = self.model.params.get(name)?.data();
            if now.iter().zip(data).any(|(a, b)| a.to_f64_lossy().to_bits() != b.to_f64_lossy().to_bits()) {
                return Err(Error::FreezeViolation(name.clone()));
            }
        }
        Ok(())
    }

    /// Parameters, optimizer state and step counter.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.add_params("", &self.model.params);
        self.optimizer.save_into(&mut ck);
        ck.push(Record::scalar("meta.step", self.step as f64));
        ck
    }

    /// Writes `config.toml`, `record.csv` and `final.ckpt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.config.to_toml())?;
        self.record.write_csv(std::fs::File::create(dir.join("record.csv"))?)?;
        self.checkpoint().save(&dir.join("final.ckpt"))
    }
}

/// Teacher-forced attention traces of `samples`, packed in batches.
pub fn collect_traces<T: Scalar>(
    model: &Model<T>,
    opts: &ForwardOptions<'_, T>,
    samples: &[TaskSample],
) -> Result<Vec<AttentionTrace>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let seqs: Vec<&TokenizedMultimodalSequence> = chunk.iter().map(|s| &s.sequence).collect();
        let mut tape = Tape::new();
        let mut bound = Bound::new(&model.params);
        let pass = forward_batch(&mut tape, &mut bound, &model.config, &seqs, opts)?;
        out.extend(AttentionTrace::from_pass(&tape, &pass, out.len())?);
    }
    Ok(out)
}

/// Runs one stage end to end and persists it when `config.out` is set.
pub fn run_stage<T: Scalar>(config: TrainConfig, data: &Dataset) -> Result<Trainer<T>> {
    let base = config.load_base()?;
    let mut trainer = Trainer::new(config, base)?;
    trainer.run(data)?;
    if let Some(dir) = trainer.config.out.clone() {
        trainer.save(&dir)?;
    }
    Ok(trainer)
}

/// The two pretraining stages: the language model on the text-only copy
/// task, then the connector alone on needle retrieval with the language
/// model frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainPlan {
    pub model: ModelConfig,
    pub base_task: TaskSpec,
    pub base_steps: usize,
    pub base_learning_rate: f64,
    pub connector_task: TaskSpec,
    pub connector_steps: usize,
    pub connector_learning_rate: f64,
    /// Distractor slots in the tuning task built by [`PretrainPlan::tuning_task`].
    pub tuning_distractors: usize,
    pub batch_size: usize,
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for PretrainPlan {
    fn default() -> Self {
        Self {
            model: ModelConfig::desk(),
            base_task: TaskSpec { task: TaskKind::TextOnlyCopy, train: 16000, seed: 11, ..TaskSpec::default() },
            base_steps: 1000,
            base_learning_rate: 1e-3,
            connector_task: TaskSpec { train: 8000, seed: 13, ..TaskSpec::default() },
            connector_steps: 3000,
            connector_learning_rate: 1e-3,
            tuning_distractors: 2,
            batch_size: 16,
            eval_samples: 200,
            seed: 0,
        }
    }
}

/// Output of [`pretrain`].
#[derive(Debug, Clone)]
pub struct Pretrained<T> {
    /// Base model and connector, all frozen.
    pub params: ParamStore<T>,
    pub base_record: RunRecord,
    pub connector_record: RunRecord,
}

impl PretrainPlan {
    /// Needle retrieval with the plan's distractor slots.
    pub fn tuning_task(&self) -> TaskSpec {
        TaskSpec { distractors: self.tuning_distractors, ..self.connector_task.clone() }
    }

    fn stage_config(&self, stage: Stage, data: &TaskSpec, steps: usize, lr: f64) -> TrainConfig {
        let mut cfg = TrainConfig {
            stage,
            steps,
            batch_size: self.batch_size,
            eval_interval: steps.max(1).div_ceil(4),
            eval_samples: self.eval_samples,
            analysis_samples: 0,
            seed: self.seed,
            model: self.model.clone(),
            data: data.clone(),
            ..TrainConfig::default()
        };
        cfg.optimizer.learning_rate = Some(lr);
        cfg
    }

    pub fn base_config(&self) -> TrainConfig {
        self.stage_config(Stage::PretrainBase, &self.base_task, self.base_steps, self.base_learning_rate)
    }

    pub fn connector_config(&self) -> TrainConfig {
        self.stage_config(Stage::PretrainConnector, &self.connector_task, self.connector_steps, self.connector_learning_rate)
    }
}

/// Runs both pretraining stages from a fresh initialization.
pub fn pretrain<T: Scalar>(plan: &PretrainPlan) -> Result<Pretrained<T>> {
    let cfg = plan.base_config();
    let data = cfg.load_data()?;
    let mut base = Trainer::<T>::new(cfg.clone(), cfg.load_base()?)?;
    base.run(&data)?;
    let cfg = plan.connector_config();
    let data = cfg.load_data()?;
    let mut conn = Trainer::<T>::new(cfg, base.model.params.clone())?;
    conn.run(&data)?;
    let mut params = conn.model.params;
    FreezePolicy::new(Vec::<String>::new()).apply(&mut params);
    Ok(Pretrained { params, base_record: base.record, connector_record: conn.record })
}
