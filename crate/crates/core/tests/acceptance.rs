//! Acceptance run. Prints one PASS/FAIL line per criterion and exits nonzero
//! if any failed. Pass criterion numbers as arguments to run a subset.

use std::collections::HashSet;
use std::path::Path;
use std::time::Instant;

use mores_core::analysis::{delta_y_probe, lmar, lmar_with, AlphaMode};
use mores_core::model::checkpoint::Checkpoint;
use mores_core::model::{
    forward_batch, init_base, loss_batch, Bound, ForwardOptions, LayerHook, Model, ModelConfig, Modality, ParamStore,
    TokenizedMultimodalSequence,
};
use mores_core::numeric::gradcheck::finite_difference_check;
use mores_core::numeric::{Tape, Tensor, Var};
use mores_core::peft::{self, count_trainable, Method, PeftConfig, Target};
use mores_core::steering::{self, mores_apply, LayerSet, SteeringConfig, SteeringHook};
use mores_core::tasks::{self, Dataset, TaskSpec};
use mores_core::train::sweep::{run_sweep, thread_count, CellResult, SweepConfig};
use mores_core::train::{collect_traces, pretrain, PretrainPlan, Stage, TrainConfig, Trainer};
use mores_core::Rng;
use serde::Deserialize;

mod common;

use common::{brute_ratio, build, check_case, op_cases, random_sequence, random_trace, reduce, tiny_model, uniform_trace};

const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;
const IDENTITY_TOL: f64 = 1e-12;
const DEFECT_TOL: f64 = 1e-8;
const UNIFORM_TOL: f64 = 1e-9;
const NEEDLE_TARGET: f64 = 0.90;
const NEEDLE_MAX_STEPS: usize = 2000;
const MORES_BUDGET: usize = (2 * 64 + 1) * 4;
const ACCURACY_GAP: f64 = 0.05;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

fn bits(store: &ParamStore<f64>, name: &str) -> Vec<u64> {
    store.get(name).unwrap().data().iter().map(|v| v.to_bits()).collect()
}

/// Every tensor of `model` is present in `loaded` with the same bits.
fn same_bits(model: &ParamStore<f64>, loaded: &ParamStore<f64>) -> bool {
    model.names().all(|n| loaded.get(n).is_ok() && bits(model, n) == bits(loaded, n))
}

fn hook_opts<'a>(cfg: &PeftConfig, hook: &'a SteeringHook) -> ForwardOptions<'a, f64> {
    let mut opts = ForwardOptions::<f64> { lora_scale: cfg.lora_scale(), ..ForwardOptions::default() };
    if cfg.method == Method::Mores {
        opts.hooks = vec![hook as &dyn LayerHook<f64>];
    }
    opts
}

// 1

fn large(hidden: usize, ffn: usize, layers: usize) -> ModelConfig {
    ModelConfig {
        num_layers: layers,
        hidden_dim: hidden,
        num_heads: 32,
        ffn_dim: ffn,
        vocab_size: 32000,
        max_seq_len: 2048,
        visual_embed_dim: 1024,
    }
}

fn parameter_counts() -> Outcome {
    let t0 = Instant::now();
    let mores = |d| PeftConfig::mores(SteeringConfig { rank: d, ratio: 1.0, layers: LayerSet::All });
    let ia3 = PeftConfig::new(Method::Ia3);
    let cases = [
        ("mores d=1 2560/32", large(2560, 10240, 32), mores(1), "0.164"),
        ("mores d=2 2560/32", large(2560, 10240, 32), mores(2), "0.328"),
        ("mores d=4 2560/32", large(2560, 10240, 32), mores(4), "0.655"),
        ("mores d=1 4096/32", large(4096, 11008, 32), mores(1), "0.262"),
        ("mores d=1 5120/40", large(5120, 13824, 40), mores(1), "0.410"),
        ("ia3 2560/10240/32", large(2560, 10240, 32), ia3.clone(), "0.492"),
        ("ia3 4096/11008/32", large(4096, 11008, 32), ia3.clone(), "0.614"),
        ("ia3 5120/13824/40", large(5120, 13824, 40), ia3, "0.963"),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, model, cfg, want) in cases {
        let n = count_trainable(&model, &cfg).unwrap();
        let got = format!("{:.3}", n as f64 / 1e6);
        pass &= got == want;
        parts.push(format!("{name} {n}={got}M"));
    }
    let secs = t0.elapsed().as_secs_f64();
    pass &= secs < 1.0;
    Outcome::new(pass, format!("{} ({secs:.3}s)", parts.join(", ")))
}

// 2

fn identity_at_init() -> Outcome {
    let spec = TaskSpec { train: 0, eval: 100, seed: 21, distractors: 2, ..TaskSpec::default() };
    let seqs: Vec<TokenizedMultimodalSequence> = tasks::generate(&spec).unwrap().eval.into_iter().map(|s| s.sequence).collect();
    let refs: Vec<&TokenizedMultimodalSequence> = seqs.iter().collect();
    let logits = |model: &Model<f64>, opts: &ForwardOptions<'_, f64>| {
        let mut tape = Tape::new();
        let mut bound = Bound::new(&model.params);
        let pass = forward_batch(&mut tape, &mut bound, &model.config, &refs, opts).unwrap();
        tape.value(pass.logits).to_vec()
    };
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for method in [Method::Mores, Method::Lora, Method::Adapter, Method::Oft, Method::Ia3] {
        let mut cfg = PeftConfig::new(method);
        if matches!(method, Method::Lora | Method::Oft) {
            cfg.targets = vec![Target::Q, Target::K, Target::V, Target::O, Target::FfnIn, Target::FfnOut];
        }
        let mut rng = Rng::new(40);
        let base = Model::<f64>::new(ModelConfig::desk(), &mut rng).unwrap();
        let before = logits(&base, &ForwardOptions::default());
        let mut tuned = base.clone();
        peft::install(&mut tuned.params, &tuned.config, &cfg, &mut rng).unwrap();
        let hook = SteeringHook::new(cfg.steering.clone(), tuned.config.num_layers).unwrap();
        let after = logits(&tuned, &hook_opts(&cfg, &hook));
        let shift = before.iter().zip(&after).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(shift);
        parts.push(format!("{method} {shift:.1e}"));
    }
    Outcome::new(worst <= IDENTITY_TOL, format!("max |Δlogit| over 100 samples: {}", parts.join(", ")))
}

// 3

fn model_loss_check(seed: u64, steered: bool) -> (f64, bool) {
    let mut rng = Rng::new(seed);
    let cfg = tiny_model();
    let mut model = Model::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let peft_cfg = PeftConfig::mores(SteeringConfig { rank: 2, ratio: 0.5, layers: LayerSet::All });
    if steered {
        peft::install(&mut model.params, &cfg, &peft_cfg, &mut rng).unwrap();
        // Move away from the identity so every path carries gradient.
        for (name, t) in model.params.iter_mut() {
            if name.ends_with(".M") || name.ends_with(".b") {
                for x in t.data_mut() {
                    *x += 0.3 * rng.normal();
                }
            }
        }
    }
    let hook = SteeringHook::new(peft_cfg.steering.clone(), cfg.num_layers).unwrap();
    let opts = if steered { hook_opts(&peft_cfg, &hook) } else { ForwardOptions::default() };
    let seqs = [random_sequence(&mut rng, &cfg, 2, 2, 2), random_sequence(&mut rng, &cfg, 3, 1, 1)];
    let refs: Vec<&TokenizedMultimodalSequence> = seqs.iter().collect();
    let (mut worst, mut pass) = (0.0f64, true);
    let names: Vec<String> =
        model.params.names().filter(|n| !steered || n.starts_with("steer.")).map(String::from).collect();
    for name in &names {
        let x: Tensor<f64> = model.params.get(name).unwrap().clone();
        let f = |tape: &mut Tape<f64>, xv: Var| {
            let mut b = Bound::new(&model.params);
            b.bind(name, xv);
            Ok(loss_batch(tape, &mut b, &cfg, &refs, &opts)?.0)
        };
        let rep = finite_difference_check(f, &x, GRAD_STEP, GRAD_TOL).unwrap();
        worst = worst.max(rep.max_rel_err);
        pass &= rep.pass;
    }
    (worst, pass)
}

fn mores_apply_check(seed: u64) -> (f64, bool) {
    let (n, dim, rank) = (5, 6, 2);
    let mut rng = Rng::new(seed);
    let layer = steering::SteeringLayer::<f64>::init(dim, rank, &mut rng).unwrap();
    let h = Tensor::randn(&[n, dim], 1.0, &mut rng);
    let map = Tensor::randn(&[rank, dim], 1.0, &mut rng);
    let bias = Tensor::randn(&[rank], 1.0, &mut rng);
    let inputs = [h, layer.basis, map, bias];
    let (mut worst, mut pass) = (0.0f64, true);
    for which in 0..4 {
        let f = |t: &mut Tape<f64>, x: Var| {
            let mut vars = Vec::new();
            for (i, v) in inputs.iter().enumerate() {
                vars.push(if i == which { x } else { t.tensor(v)? });
            }
            let y = mores_apply(t, vars[0], vars[1], vars[2], vars[3])?;
            reduce(t, y, seed)
        };
        let rep = finite_difference_check(f, &inputs[which], GRAD_STEP, GRAD_TOL).unwrap();
        worst = worst.max(rep.max_rel_err);
        pass &= rep.pass;
    }
    (worst, pass)
}

fn gradient_checks() -> Outcome {
    let t0 = Instant::now();
    let mut pass = true;
    let mut failed = Vec::new();
    let cases = op_cases();
    let mut worst_op: f64 = 0.0;
    for case in &cases {
        let (w, ok) = check_case(case, 0..GRAD_SEEDS);
        worst_op = worst_op.max(w);
        if !ok {
            failed.push(case.name.to_string());
        }
        pass &= ok;
    }
    let mut worst = [0.0f64; 3];
    for seed in 0..GRAD_SEEDS {
        let checks = [model_loss_check(seed, false), mores_apply_check(seed), model_loss_check(100 + seed, true)];
        for (i, (w, ok)) in checks.into_iter().enumerate() {
            worst[i] = worst[i].max(w);
            if !ok {
                failed.push(format!("{} seed {seed}", ["model loss", "mores_apply", "steered model loss"][i]));
            }
            pass &= ok;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    let mut detail = format!(
        "{} ops x {GRAD_SEEDS} seeds worst rel err {worst_op:.1e}; 2-layer model {:.1e}; mores_apply {:.1e}; steered model {:.1e} ({secs:.1}s)",
        cases.len(),
        worst[0],
        worst[1],
        worst[2]
    );
    if !failed.is_empty() {
        detail.push_str(&format!("; failed: {}", failed.join(", ")));
    }
    Outcome::new(pass, detail)
}

// 4

fn constraint_maintenance() -> (Outcome, Option<Trainer<f64>>) {
    let t0 = Instant::now();
    let mut cfg = TrainConfig {
        steps: 500,
        eval_interval: 25,
        eval_samples: 100,
        analysis_samples: 0,
        data: TaskSpec { distractors: 2, ..TaskSpec::default() },
        ..TrainConfig::default()
    };
    cfg.method = PeftConfig::mores(SteeringConfig::default());
    let base = init_base(&ModelConfig::desk(), &mut Rng::new(44)).unwrap();
    let data = tasks::generate(&cfg.data).unwrap();
    let mut tr = Trainer::new(cfg, base.clone()).unwrap();
    tr.run(&data).unwrap();
    let worst = tr.record.rows.iter().map(|r| r.orth_defect).fold(0.0, f64::max);
    let every_step = tr.record.rows.iter().all(|r| r.orth_defect <= DEFECT_TOL);
    let frozen: Vec<&String> = base.names().collect();
    let unchanged = frozen.iter().all(|n| bits(&tr.model.params, n) == bits(&base, n)) && tr.verify_frozen().is_ok();
    let pass = tr.step == 500 && every_step && unchanged && tr.reseeded.is_empty();
    let detail = format!(
        "{} steps, {} logged rows, max defect {worst:.1e}, {} frozen tensors {} ({:.1}s)",
        tr.step,
        tr.record.rows.len(),
        frozen.len(),
        if unchanged { "bitwise unchanged" } else { "CHANGED" },
        t0.elapsed().as_secs_f64()
    );
    (Outcome::new(pass, detail), Some(tr))
}

// 5

fn lmar_correctness() -> Outcome {
    let uniform: Vec<_> = [(1, 1, 1), (16, 4, 1), (3, 7, 2), (8, 2, 3)].iter().map(|&(v, t, o)| uniform_trace(v, t, o, 4, 4)).collect();
    let u = lmar(&uniform).unwrap();
    let uniform_err = u.layers.iter().map(|l| (l.lmar - 1.0).abs()).fold(0.0, f64::max);

    // Last text token attends system 3/8, visual 1/4 + 1/8, text 1/8 + 1/16 + 1/16:
    // per-token visual 3/16 over per-token text 1/12.
    use Modality::*;
    let t = vec![System, Visual, Visual, Text, Text, Text, Output];
    let tr = build(t, 1, 1, |q| {
        if q == 5 {
            vec![0.375, 0.25, 0.125, 0.125, 0.0625, 0.0625]
        } else {
            vec![1.0 / (q + 1) as f64; q + 1]
        }
    });
    let hand = lmar(&[tr]).unwrap().layers[0].lmar;

    let mut rng = Rng::new(17);
    let traces: Vec<_> = (0..50).map(|i| random_trace(&mut rng, i)).collect();
    let mut brute_err: f64 = 0.0;
    for (mode, per_token) in [(AlphaMode::PerToken, true), (AlphaMode::TotalMass, false)] {
        let s = lmar_with(&traces, mode).unwrap();
        for (l, layer) in s.layers.iter().enumerate() {
            let ratios: Vec<f64> = traces.iter().filter_map(|t| brute_ratio(t, l, per_token)).collect();
            let want = ratios.iter().sum::<f64>() / ratios.len() as f64;
            brute_err = brute_err.max((layer.lmar - want).abs() / want.max(1.0));
        }
    }
    let pass = uniform_err <= UNIFORM_TOL && hand == 2.25 && brute_err <= 1e-12;
    Outcome::new(
        pass,
        format!("uniform |LMAR-1| {uniform_err:.1e}; hand example {hand:?}; 50 random traces vs per-sample definition {brute_err:.1e}"),
    )
}

// 6

fn delta_y_bound(trained: Option<&Trainer<f64>>) -> Outcome {
    let Some(tr) = trained else {
        return Outcome::new(false, "no trained steered model");
    };
    let hook = tr.hook().unwrap();
    let spec = TaskSpec { train: 0, eval: 100, seed: 61, distractors: 2, ..TaskSpec::default() };
    let probes = tasks::generate(&spec).unwrap().eval;
    let mut rng = Rng::new(62);
    let (mut violations, mut active, mut worst_ratio) = (0, 0, 0.0f64);
    for p in &probes {
        let r = delta_y_probe(&tr.model, hook, &p.sequence, &mut rng).unwrap();
        violations += usize::from(!r.bound_satisfied);
        active += usize::from(r.delta_c_norm > 0.0);
        worst_ratio = worst_ratio.max(r.delta_y_norm / (r.w_o_norm * r.delta_c_norm).max(f64::MIN_POSITIVE));
    }

    // Same base, fresh steering parameters.
    let mut fresh = tr.model.clone();
    let cfg = PeftConfig::mores(SteeringConfig::default());
    peft::install(&mut fresh.params, &fresh.config, &cfg, &mut Rng::new(63)).unwrap();
    let fresh_hook = SteeringHook::new(cfg.steering, fresh.config.num_layers).unwrap();
    let init_max = probes
        .iter()
        .map(|p| delta_y_probe(&fresh, &fresh_hook, &p.sequence, &mut rng).unwrap().delta_y_norm)
        .fold(0.0, f64::max);
    let pass = violations == 0 && active == probes.len() && init_max == 0.0;
    Outcome::new(
        pass,
        format!(
            "{} probes after {} steps: {violations} violations, max ‖Δy‖/(‖W_o‖‖ΔC‖) {worst_ratio:.3}; at init max ‖Δy‖ = {init_max:?}",
            probes.len(),
            tr.step
        ),
    )
}

// 7

#[derive(Deserialize)]
struct SeedFile {
    seeds: Vec<u64>,
}

struct TuneResult {
    accuracy: f64,
    steps: usize,
    lmar: f64,
    params: usize,
}

fn tune(params: &ParamStore<f64>, plan: &PretrainPlan, data: &Dataset, method: PeftConfig, seed: u64) -> TuneResult {
    let cfg = TrainConfig {
        stage: Stage::InstructionTune,
        steps: NEEDLE_MAX_STEPS,
        eval_interval: 100,
        eval_samples: 0,
        analysis_samples: 100,
        early_stop_accuracy: Some(NEEDLE_TARGET),
        seed,
        model: plan.model.clone(),
        data: plan.tuning_task(),
        method,
        ..TrainConfig::default()
    };
    let mut tr = Trainer::new(cfg, params.clone()).unwrap();
    tr.run(data).unwrap();
    let last = tr.record.last().unwrap();
    TuneResult { accuracy: last.eval_accuracy, steps: tr.step, lmar: last.lmar_mean, params: tr.trainable_params }
}

fn needle_behavior() -> Outcome {
    let t0 = Instant::now();
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/needle_seeds.toml");
    let seeds = toml::from_str::<SeedFile>(&std::fs::read_to_string(fixture).unwrap()).unwrap().seeds;
    let plan = PretrainPlan::default();
    let pre = pretrain::<f64>(&plan).unwrap();
    let pretrain_s = t0.elapsed().as_secs_f64();
    let data = tasks::generate(&plan.tuning_task()).unwrap();

    let frozen = Model::from_params(plan.model.clone(), pre.params.clone()).unwrap();
    let traces = collect_traces(&frozen, &ForwardOptions::default(), &data.eval[..100]).unwrap();
    let frozen_lmar = lmar(&traces).unwrap().mean_lmar();

    let mores = PeftConfig::mores(SteeringConfig { rank: 1, ratio: 1.0, layers: LayerSet::All });
    let mut lora = PeftConfig::new(Method::Lora);
    lora.rank = 4;
    lora.targets = vec![Target::Q, Target::K, Target::V, Target::O];

    let m: Vec<TuneResult> = seeds.iter().map(|&s| tune(&pre.params, &plan, &data, mores.clone(), s)).collect();
    let l: Vec<TuneResult> = seeds.iter().map(|&s| tune(&pre.params, &plan, &data, lora.clone(), s)).collect();

    let reached = m.iter().filter(|r| r.accuracy >= NEEDLE_TARGET).count();
    let a = reached + 1 >= seeds.len() && m.iter().all(|r| r.params <= MORES_BUDGET);
    let raised = m.iter().filter(|r| r.lmar > frozen_lmar).count();
    let b = raised + 1 >= seeds.len();
    let mean = |rs: &[TuneResult]| rs.iter().map(|r| r.accuracy).sum::<f64>() / rs.len() as f64;
    let gap = mean(&l) - mean(&m);
    let ratio = l[0].params as f64 / m[0].params as f64;
    let c = gap.abs() <= ACCURACY_GAP && ratio > 10.0;

    let runs = |rs: &[TuneResult]| rs.iter().map(|r| format!("{:.3}@{}", r.accuracy, r.steps)).collect::<Vec<_>>().join(" ");
    let lmars = m.iter().map(|r| format!("{:.3}", r.lmar)).collect::<Vec<_>>().join(" ");
    let mark = |ok: bool| if ok { "ok" } else { "FAIL" };
    let detail = format!(
        "(a) {}: MoReS {} params, {reached}/{} seeds reach {NEEDLE_TARGET} [{}]; \
         (b) {}: LMAR {lmars} vs frozen {frozen_lmar:.3}, {raised}/{} higher; \
         (c) {}: LoRA {} params ({ratio:.1}x) [{}], mean acc gap {gap:+.3} \
         (pretrain {pretrain_s:.0}s, total {:.0}s)",
        mark(a),
        m[0].params,
        seeds.len(),
        runs(&m),
        mark(b),
        seeds.len(),
        mark(c),
        l[0].params,
        runs(&l),
        t0.elapsed().as_secs_f64()
    );
    Outcome::new(a && b && c, detail)
}

// 8

fn sweep_machinery() -> Outcome {
    let t0 = Instant::now();
    let mut train = TrainConfig {
        steps: 4,
        batch_size: 4,
        eval_interval: 2,
        analysis_samples: 8,
        data: TaskSpec { train: 64, eval: 16, distractors: 2, ..TaskSpec::default() },
        ..TrainConfig::default()
    };
    train.method = PeftConfig::mores(SteeringConfig::default());
    let sweep = SweepConfig { train, ..SweepConfig::default() };
    let base = init_base::<f64>(&ModelConfig::desk(), &mut Rng::new(80)).unwrap();
    let data = tasks::generate(&sweep.train.data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let threads = thread_count().unwrap();

    let first = run_sweep(&sweep, &base, &data, dir.path(), threads).unwrap();
    let results = std::fs::read(dir.path().join("results.csv")).unwrap();
    let keys = sweep.cells();
    let tp_ok = keys.len() == 48
        && first.cells.len() == 48
        && keys.iter().zip(&first.cells).all(|(k, c)| {
            let cfg = sweep.cell_config(k);
            c.trainable_params == count_trainable(&cfg.model, &cfg.method).unwrap()
        });
    let distinct: HashSet<usize> = first.cells.iter().map(|c| c.trainable_params).collect();

    // Interrupt a third of the cells: some never finished, some half written.
    for (i, c) in first.cells.iter().enumerate().filter(|(i, _)| i % 3 == 0) {
        let cell = dir.path().join("cells").join(&c.hash);
        if i % 2 == 0 {
            std::fs::remove_file(cell.join("cell.json")).unwrap();
        } else {
            std::fs::write(cell.join("record.csv"), "step\n").unwrap();
        }
    }
    let resumed = run_sweep(&sweep, &base, &data, dir.path(), threads).unwrap();
    let strip = |cells: &[CellResult]| {
        cells.iter().map(|c| CellResult { record_digest: String::new(), ..c.clone() }).collect::<Vec<_>>()
    };
    let same = strip(&resumed.cells) == strip(&first.cells)
        && std::fs::read(dir.path().join("results.csv")).unwrap() == results;
    let again = run_sweep(&sweep, &base, &data, dir.path(), threads).unwrap();

    let pass = first.ran == 48
        && tp_ok
        && (resumed.ran, resumed.reused) == (16, 32)
        && same
        && (again.ran, again.reused) == (0, 48);
    Outcome::new(
        pass,
        format!(
            "48 cells on {threads} threads, TP {} against count_trainable ({} distinct values); \
             after interrupting 16 cells: ran {} reused {}, results {}; rerun reused {} ({:.1}s)",
            if tp_ok { "matches" } else { "MISMATCH" },
            distinct.len(),
            resumed.ran,
            resumed.reused,
            if same { "identical" } else { "DIFFER" },
            again.reused,
            t0.elapsed().as_secs_f64()
        ),
    )
}

// 9

fn serialization() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = TrainConfig {
        steps: 20,
        batch_size: 8,
        eval_interval: 10,
        analysis_samples: 8,
        data: TaskSpec { train: 128, eval: 32, distractors: 2, ..TaskSpec::default() },
        ..TrainConfig::default()
    };
    cfg.method = PeftConfig::mores(SteeringConfig::default());

    let data = tasks::generate(&cfg.data).unwrap();
    let data_path = dir.path().join("data.tsv");
    data.save(&data_path).unwrap();
    let loaded = Dataset::load(&data_path).unwrap();
    let mut rewritten = Vec::new();
    loaded.write_to(&mut rewritten).unwrap();
    let data_ok = loaded == data && rewritten == std::fs::read(&data_path).unwrap();

    let base = init_base(&ModelConfig::desk(), &mut Rng::new(90)).unwrap();
    let mut straight = Trainer::new(cfg.clone(), base.clone()).unwrap();
    for _ in 0..20 {
        straight.train_step(&data.train).unwrap();
    }
    let mut first = Trainer::new(cfg.clone(), base).unwrap();
    for _ in 0..10 {
        first.train_step(&data.train).unwrap();
    }
    let ck_path = dir.path().join("run.ckpt");
    first.checkpoint().save(&ck_path).unwrap();
    let ck = Checkpoint::load(&ck_path).unwrap();
    let ck_ok = ck.to_bytes() == std::fs::read(&ck_path).unwrap()
        && same_bits(&first.model.params, &ck.params::<f64>("").unwrap());

    let mut resumed = Trainer::<f64>::resume(cfg, &ck).unwrap();
    for _ in 0..10 {
        resumed.train_step(&loaded.train).unwrap();
    }
    let losses_ok = resumed.losses.len() == 10
        && resumed.losses.iter().zip(&straight.losses[10..]).all(|(a, b)| a.to_bits() == b.to_bits());
    let end_ok = resumed.checkpoint().to_bytes() == straight.checkpoint().to_bytes();
    Outcome::new(
        data_ok && ck_ok && losses_ok && end_ok,
        format!(
            "dataset {}, checkpoint {}, 10 resumed losses {}, final checkpoint {}",
            if data_ok { "bit-exact" } else { "DIFFERS" },
            if ck_ok { "bit-exact" } else { "DIFFERS" },
            if losses_ok { "identical" } else { "DIFFER" },
            if end_ok { "identical" } else { "DIFFERS" }
        ),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut failed = Vec::new();
    let mut report = |n: usize, title: &str, run: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run))
            .unwrap_or_else(|e| {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                Outcome::new(false, format!("panicked: {}", msg.unwrap_or_default()))
            });
        println!("criterion {n} {title}: {} | {}", if outcome.pass { "PASS" } else { "FAIL" }, outcome.detail);
        if !outcome.pass {
            failed.push(n);
        }
    };

    report(1, "parameter counts", &mut parameter_counts);
    report(2, "identity at init", &mut identity_at_init);
    report(3, "gradient checks", &mut gradient_checks);
    let mut trained = None;
    report(4, "constraint maintenance", &mut || {
        let (outcome, tr) = constraint_maintenance();
        trained = tr;
        outcome
    });
    report(5, "LMAR", &mut lmar_correctness);
    report(6, "Δy bound", &mut || {
        if trained.is_none() {
            trained = constraint_maintenance().1;
        }
        delta_y_bound(trained.as_ref())
    });
    report(7, "needle behavior", &mut needle_behavior);
    report(8, "sweep", &mut sweep_machinery);
    report(9, "serialization", &mut serialization);

    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria pass");
}
