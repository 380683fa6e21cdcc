//! Scratch harness for tuning the mod-113 recipe. Not part of the example set.

use helixlab::model::{
    save_checkpoint, train_task, CheckpointMeta, MlpKind, ModelConfig, TaskSpec, TrainConfig,
};
use helixlab::numerics::dft_spectrum;
use std::time::Instant;

fn env_f64(key: &str, default: f64) -> f64 {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}
fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let task = TaskSpec::add_mod(113);
    let mut config = ModelConfig::toy(&task, 1, env_usize("SEED", 0) as u64);
    config.n_heads = env_usize("HEADS", config.n_heads);
    config.d_head = config.d_model / config.n_heads;
    config.d_mlp = env_usize("DMLP", config.d_mlp);
    if std::env::var("MLP").as_deref() == Ok("gated") {
        config.mlp_kind = MlpKind::Gated;
    }
    let batch = env_usize("BATCH", 0);
    let train = TrainConfig {
        steps: env_usize("STEPS", 50),
        batch_size: if batch == 0 { None } else { Some(batch) },
        lr: env_f64("LR", 1e-3) as f32,
        weight_decay: env_f64("WD", 0.3) as f32,
        beta1: 0.9,
        beta2: 0.98,
        eps: 1e-8,
        train_fraction: env_f64("FRACTION", 0.5),
        warmup_steps: env_usize("WARMUP", 20),
        seed: env_usize("SEED", 0) as u64,
        eval_every: env_usize("EVAL_EVERY", 25),
        target_val_accuracy: Some(env_f64("TARGET", 0.995)),
    };
    eprintln!("config: {config:?}");
    eprintln!("train: {train:?}");

    let t0 = Instant::now();
    let outcome = train_task(&config, &task, &train).expect("training failed");
    let dt = t0.elapsed().as_secs_f64();
    eprintln!(
        "steps_run={} wall={:.1}s sec/step={:.3} train_acc={:.4} val_acc={:.4}",
        outcome.steps_run,
        dt,
        dt / outcome.steps_run.max(1) as f64,
        outcome.final_train_accuracy,
        outcome.final_val_accuracy
    );
    for m in &outcome.history {
        if m.val_accuracy.is_some() {
            eprintln!(
                "  step {:5}  loss {:.4}  train {:.4}  val {:.4}",
                m.step,
                m.loss,
                m.train_accuracy.unwrap_or(f64::NAN),
                m.val_accuracy.unwrap_or(f64::NAN)
            );
        }
    }

    // Fourier sparsity of the number-token embeddings: energy per frequency
    // summed over model dimensions, top-6 fraction of non-DC energy.
    let embed = outcome.model.param("embed.w");
    let p = 113usize;
    let d = config.d_model;
    let mut energy = vec![0.0f64; p / 2];
    for j in 0..d {
        let signal: Vec<f32> = (0..p).map(|a| embed.data()[a * d + j]).collect();
        let spec = dft_spectrum(&signal).unwrap();
        for (i, bin) in spec.iter().enumerate() {
            energy[i] += (bin.magnitude as f64).powi(2);
        }
    }
    let total: f64 = energy.iter().sum();
    let mut sorted = energy.clone();
    sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
    let top6: f64 = sorted.iter().take(6).sum();
    let mut ranked: Vec<(usize, f64)> =
        energy.iter().copied().enumerate().map(|(i, e)| (i + 1, e / total)).collect();
    ranked.sort_by(|x, y| y.1.partial_cmp(&x.1).unwrap());
    eprintln!("top-6 non-DC energy fraction: {:.4}", top6 / total);
    eprintln!("leading freqs: {:?}", &ranked[..8.min(ranked.len())]);

    if let Ok(out) = std::env::var("OUT") {
        let meta = CheckpointMeta {
            kind: "checkpoint".into(),
            config: config.clone(),
            task: Some(task.name().into()),
            step: outcome.steps_run,
            train_accuracy: outcome.final_train_accuracy,
            val_accuracy: outcome.final_val_accuracy,
        };
        std::fs::create_dir_all(&out).unwrap();
        save_checkpoint(&outcome.model, &meta, std::path::Path::new(&out)).unwrap();
        eprintln!("saved checkpoint to {out}");
    }
}
