//! `mores`: train, evaluate and analyze steered multimodal decoders.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mores_core::analysis;
use mores_core::model::checkpoint::Checkpoint;
use mores_core::model::{LayerHook, Model, ModelConfig};
use mores_core::peft::{self, Method, PeftConfig};
use mores_core::steering::{LayerSet, SteeringHook};
use mores_core::tasks::{self, GreedyDecoder, TaskKind};
use mores_core::train::sweep::{self, SweepConfig};
use mores_core::train::{self, collect_traces, Stage, TrainConfig};
use mores_core::{Error, Result, Rng};

#[derive(Parser)]
#[command(name = "mores", version, about = "Representation steering for a desk-scale multimodal decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage and write config, record.csv and final.ckpt.
    Train(Common),
    /// Greedy-decode the eval split with a checkpoint and report accuracy.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint with the model (and any fine-tuning) tensors.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Attention statistics (LMAR, visual share, trace dumps) and, for
    /// steered checkpoints, the output-change bound.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Samples probed for the output-change bound.
        #[arg(long, default_value_t = 100)]
        probes: usize,
    },
    /// Print the trainable-parameter count of a method.
    Params {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        hidden_dim: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        ffn_dim: Option<usize>,
    },
    /// Run a grid of instruction-tuning cells; completed cells are reused.
    Sweep(Common),
    /// Write the train/eval splits of a task to a dataset file.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Option<TaskKind>,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    /// LoRA/adapter rank, OFT block size, or steering subspace rank.
    #[arg(long)]
    rank: Option<usize>,
    /// Fraction of visual tokens steered.
    #[arg(long)]
    steer_ratio: Option<f64>,
    /// `all`, `strideK`, `shallow`, `middle`, `deep` or a comma list.
    #[arg(long)]
    steer_layers: Option<LayerSet>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (a file for gen-data).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn train_config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        apply_method(&mut cfg.method, self);
        if self.method.is_some() {
            cfg.stage = Stage::InstructionTune;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        Ok(cfg)
    }

    fn sweep_config(&self) -> Result<SweepConfig> {
        let mut cfg = match &self.config {
            Some(p) => SweepConfig::load(p)?,
            None => SweepConfig::default(),
        };
        if let Some(m) = self.method {
            cfg.methods = vec![m];
        }
        if let Some(r) = self.rank {
            cfg.ranks = vec![r];
        }
        if let Some(r) = self.steer_ratio {
            cfg.ratios = vec![r];
        }
        if let Some(l) = &self.steer_layers {
            cfg.layer_sets = vec![l.clone()];
        }
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg_out: Option<&Path>) -> Result<PathBuf> {
        self.out
            .clone()
            .or_else(|| cfg_out.map(Path::to_path_buf))
            .ok_or_else(|| Error::Config("--out is required".into()))
    }
}

fn apply_method(m: &mut PeftConfig, c: &Common) {
    if let Some(method) = c.method {
        m.method = method;
    }
    if let Some(r) = c.rank {
        m.rank = r;
        m.alpha = 2.0 * r as f64;
        m.steering.rank = r;
    }
    if let Some(r) = c.steer_ratio {
        m.steering.ratio = r;
    }
    if let Some(l) = &c.steer_layers {
        m.steering.layers = l.clone();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(c) => train_cmd(&c),
        Command::Eval { common, checkpoint } => eval_cmd(&common, &checkpoint),
        Command::Analyze { common, checkpoint, probes } => analyze_cmd(&common, &checkpoint, probes),
        Command::Params { common, hidden_dim, layers, ffn_dim } => params_cmd(&common, hidden_dim, layers, ffn_dim),
        Command::Sweep(c) => sweep_cmd(&c),
        Command::GenData { common, task } => gen_data_cmd(&common, task),
    }
}

fn train_cmd(c: &Common) -> Result<()> {
    let cfg = c.train_config()?;
    let data = cfg.load_data()?;
    let trainer = train::run_stage::<f64>(cfg, &data)?;
    let mut out = std::io::stdout().lock();
    for r in &trainer.record.rows {
        writeln!(
            out,
            "step {:>6}  loss {:>9.5}  acc {:.4}  lmar {:.4}  visual_share {:.4}",
            r.step, r.train_loss, r.eval_accuracy, r.lmar_mean, r.visual_share
        )?;
    }
    writeln!(out, "trainable parameters: {}", trainer.trainable_params)?;
    if let Some(dir) = &trainer.config.out {
        writeln!(out, "wrote {}", dir.display())?;
    }
    Ok(())
}

/// Model from a checkpoint plus the steering hook its config calls for.
fn load_model(cfg: &TrainConfig, checkpoint: &Path) -> Result<(Model<f64>, Option<SteeringHook>)> {
    let params = train::model_params(&Checkpoint::load(checkpoint)?)?;
    let model = Model::from_params(cfg.model.clone(), params)?;
    let steered = cfg.stage == Stage::InstructionTune
        && cfg.method.method == Method::Mores
        && model.params.names().any(|n| n.starts_with("steer."));
    let hook = if steered { Some(SteeringHook::new(cfg.method.steering.clone(), cfg.model.num_layers)?) } else { None };
    Ok((model, hook))
}

fn eval_cmd(c: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = c.train_config()?;
    cfg.validate()?;
    let data = cfg.load_data()?;
    let (model, hook) = load_model(&cfg, checkpoint)?;
    let mut opts = mores_core::model::ForwardOptions::with_hooks(hook.iter().map(|h| h as &dyn LayerHook<f64>).collect());
    opts.lora_scale = cfg.method.lora_scale();
    let decoder = GreedyDecoder { model: &model, opts: &opts, batch: 64 };
    let eval = match cfg.eval_samples {
        0 => &data.eval[..],
        n => &data.eval[..n.min(data.eval.len())],
    };
    let res = tasks::evaluate(&decoder, eval)?;
    println!("accuracy {:.4} ({}/{})", res.accuracy, res.correct.iter().filter(|c| **c).count(), eval.len());
    Ok(())
}

fn analyze_cmd(c: &Common, checkpoint: &Path, probes: usize) -> Result<()> {
    let cfg = c.train_config()?;
    cfg.validate()?;
    let out = c.out_dir(cfg.out.as_deref())?;
    std::fs::create_dir_all(&out)?;
    let data = cfg.load_data()?;
    let (model, hook) = load_model(&cfg, checkpoint)?;
    let mut opts = mores_core::model::ForwardOptions::with_hooks(hook.iter().map(|h| h as &dyn LayerHook<f64>).collect());
    opts.lora_scale = cfg.method.lora_scale();
    let n = match cfg.analysis_samples {
        0 => data.eval.len(),
        n => n.min(data.eval.len()),
    };
    let traces = collect_traces(&model, &opts, &data.eval[..n])?;
    let summary = analysis::lmar(&traces)?;
    summary.save_csv(&out.join("lmar.csv"))?;
    let dist = analysis::attention_distribution(&traces)?;
    let mut w = std::fs::File::create(out.join("attention_distribution.csv"))?;
    writeln!(w, "layer,mean,median,q25,q75,min,max")?;
    for d in &dist {
        writeln!(w, "{},{:?},{:?},{:?},{:?},{:?},{:?}", d.layer, d.mean, d.median, d.q25, d.q75, d.min, d.max)?;
    }
    analysis::write_trace_dump(&traces, std::io::BufWriter::new(std::fs::File::create(out.join("traces.jsonl"))?))?;
    analysis::traces_to_checkpoint(&traces)?.save(&out.join("traces.ckpt"))?;
    for l in &summary.layers {
        println!("layer {}  lmar {:.4}  visual_share {:.4}  n {}", l.layer, l.lmar, l.visual_share_mean, l.n);
    }
    println!("mean lmar {:.4}", summary.mean_lmar());

    if let Some(h) = &hook {
        let mut rng = Rng::new(cfg.seed).fork(0xde17a);
        let mut w = std::fs::File::create(out.join("delta_y.csv"))?;
        writeln!(w, "sample,delta_y_norm,w_o_norm,delta_c_norm,bound_satisfied,norm_ratio,lipschitz_estimate")?;
        let mut violations = 0;
        let count = probes.min(data.eval.len());
        for (i, s) in data.eval[..count].iter().enumerate() {
            let r = analysis::delta_y_probe(&model, h as &dyn LayerHook<f64>, &s.sequence, &mut rng)?;
            violations += usize::from(!r.bound_satisfied);
            writeln!(
                w,
                "{i},{:?},{:?},{:?},{},{:?},{:?}",
                r.delta_y_norm, r.w_o_norm, r.delta_c_norm, r.bound_satisfied, r.norm_ratio, r.lipschitz_estimate
            )?;
        }
        println!("output-change bound: {violations} violations over {count} probes");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn params_cmd(c: &Common, hidden: Option<usize>, layers: Option<usize>, ffn: Option<usize>) -> Result<()> {
    let cfg = c.train_config()?;
    let mut model: ModelConfig = cfg.model.clone();
    if let Some(d) = hidden {
        model.hidden_dim = d;
    }
    if let Some(l) = layers {
        model.num_layers = l;
    }
    if let Some(f) = ffn {
        model.ffn_dim = f;
    }
    let n = peft::count_trainable(&model, &cfg.method)?;
    println!("{n}");
    Ok(())
}

fn sweep_cmd(c: &Common) -> Result<()> {
    let cfg = c.sweep_config()?;
    let out = c.out_dir(cfg.train.out.as_deref())?;
    std::fs::create_dir_all(&out)?;
    let base = cfg.train.load_base::<f64>()?;
    let data = cfg.train.load_data()?;
    let threads = sweep::thread_count()?;
    let report = sweep::run_sweep(&cfg, &base, &data, &out, threads)?;
    println!(
        "{} cells: {} trained, {} reused; results in {}",
        report.cells.len(),
        report.ran,
        report.reused,
        out.join("results.csv").display()
    );
    Ok(())
}

fn gen_data_cmd(c: &Common, task: Option<TaskKind>) -> Result<()> {
    let cfg = c.train_config()?;
    let mut spec = cfg.data.clone();
    if let Some(t) = task {
        spec.task = t;
    }
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    let out = c.out.clone().ok_or_else(|| Error::Config("--out is required".into()))?;
    let ds = tasks::generate(&spec)?;
    ds.save(&out)?;
    println!("{} train / {} eval samples of {} written to {}", ds.train.len(), ds.eval.len(), spec.task, out.display());
    Ok(())
}
