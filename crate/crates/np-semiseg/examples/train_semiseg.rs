//! End-to-end semi-supervised training on the default synthetic dataset:
//! generate data, fit the NP-head model with self-training, report
//! per-epoch losses and validation mIoU, and save a checkpoint.
//!
//! Run with: `cargo run --release --example train_semiseg`

use np_semiseg::config::RunConfig;
use np_semiseg::synthdata::generate;
use np_semiseg::trainer::{fit, TrainConfig};
use np_semiseg::Result;
use std::time::Instant;

fn main() -> Result<()> {
    let run = RunConfig::default();
    let mut gen = run.gen_config();
    gen.seed = 7;
    let dataset = generate(&gen)?;
    println!(
        "dataset: {} labeled / {} unlabeled / {} val, {} classes, {}x{}",
        dataset.labeled().len(),
        dataset.unlabeled().len(),
        dataset.val().len(),
        dataset.n_class(),
        dataset.h,
        dataset.w
    );

    let cfg = TrainConfig {
        seed: 7,
        ..run.train_config()
    };
    let t0 = Instant::now();
    let outcome = fit(&cfg, run.encoder_config(), run.decoder_hidden, &dataset)?;
    let secs = t0.elapsed().as_secs_f64();
    for e in &outcome.log {
        println!(
            "epoch {:2}: l_c={:.4} l_kl={:.4} val_miou={}",
            e.epoch,
            e.l_c,
            e.l_kl,
            e.val_miou
                .map(|m| format!("{m:.4}"))
                .unwrap_or_else(|| "n/a".into())
        );
    }
    println!(
        "trained {} steps in {:.1}s ({:.2}s/epoch)",
        outcome.opt.steps,
        secs,
        secs / cfg.epochs.max(1) as f64
    );

    let dir = std::env::temp_dir().join("npss_train_example");
    std::fs::create_dir_all(&dir)?;
    let ckpt = std::fs::File::create(dir.join("checkpoint.npck"))?;
    np_semiseg::trainer::write_checkpoint(
        std::io::BufWriter::new(ckpt),
        &outcome.model,
        &run.serialize(),
        outcome.opt.steps,
        outcome.epochs_done as u64,
    )?;
    println!("checkpoint written to {}", dir.join("checkpoint.npck").display());
    Ok(())
}
