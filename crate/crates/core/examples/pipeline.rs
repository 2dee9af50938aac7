//! Pretrains a base and connector, then tunes one method on needle retrieval
//! with text distractors and prints the eval rows.
//!
//! Usage: `pipeline [method] [seed] [tune_steps]`

use mores_core::peft::Method;
use mores_core::tasks;
use mores_core::train::{pretrain, PretrainPlan, Stage, TrainConfig, Trainer};

fn arg<T: std::str::FromStr>(i: usize, default: T) -> T {
    std::env::args().nth(i).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() -> mores_core::Result<()> {
    let method: Method = arg(1, Method::Mores);
    let seed: u64 = arg(2, 0);
    let tune_steps: usize = arg(3, 2000);

    let plan = PretrainPlan { tuning_distractors: arg(4, 2), ..PretrainPlan::default() };
    let t0 = std::time::Instant::now();
    let cache = std::env::temp_dir().join("mores-pipeline-base.ckpt");
    let params = if cache.exists() {
        mores_core::model::checkpoint::Checkpoint::load(&cache)?.params("")?
    } else {
        let pre = pretrain::<f64>(&plan)?;
        for (name, rec) in [("base", &pre.base_record), ("connector", &pre.connector_record)] {
            for r in &rec.rows {
                println!("{name:9} step {:5} loss {:.4} acc {:.3}", r.step, r.train_loss, r.eval_accuracy);
            }
        }
        let mut ck = mores_core::model::checkpoint::Checkpoint::new();
        ck.add_params("", &pre.params);
        ck.save(&cache)?;
        pre.params
    };
    println!("pretraining took {:.1}s", t0.elapsed().as_secs_f64());

    let data = plan.tuning_task();
    let dataset = tasks::generate(&data)?;
    let mut cfg = TrainConfig {
        stage: Stage::InstructionTune,
        steps: tune_steps,
        seed,
        early_stop_accuracy: Some(arg(5, 0.9)),
        model: plan.model.clone(),
        data,
        ..TrainConfig::default()
    };
    cfg.method.method = method;
    if method == Method::Lora {
        use mores_core::peft::Target;
        cfg.method.targets = vec![Target::Q, Target::K, Target::V, Target::O];
    }
    let t1 = std::time::Instant::now();
    let mut tr = Trainer::<f64>::new(cfg, params)?;
    tr.run(&dataset)?;
    for r in tr.record.rows.iter().filter(|r| r.step % 500 == 0 || r.step == tr.step) {
        println!(
            "{method} step {:5} loss {:.4} acc {:.3} lmar {:.3} tp {}",
            r.step, r.train_loss, r.eval_accuracy, r.lmar_mean, r.trainable_params
        );
    }
    println!("tuning took {:.1}s", t1.elapsed().as_secs_f64());
    Ok(())
}
