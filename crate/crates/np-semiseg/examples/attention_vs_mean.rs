//! The aggregator ablation and the semi-supervised benefit, as a runnable
//! experiment: on the same synthetic dataset, train (a) the full model
//! with the attention aggregator, (b) the mean-aggregator ablation, and
//! (c) a labeled-only supervised baseline, each over several seeds, and
//! compare mean validation mIoU.
//!
//! Run with: `cargo run --release --example attention_vs_mean [epochs] [seeds]`

use np_semiseg::config::RunConfig;
use np_semiseg::np_head::Aggregator;
use np_semiseg::synthdata::generate;
use np_semiseg::trainer::{fit, TrainConfig};
use np_semiseg::Result;

#[derive(Clone, Copy, Debug)]
enum Variant {
    Attention,
    MeanAggregator,
    SupervisedOnly,
}

fn run_variant(variant: Variant, seed: u64, epochs: usize) -> Result<f64> {
    let run = RunConfig::default();
    let mut gen = run.gen_config();
    gen.seed = 1000; // one shared dataset across variants and seeds
    let ds = generate(&gen)?;
    let mut cfg = TrainConfig {
        seed,
        epochs,
        ..run.train_config()
    };
    match variant {
        Variant::Attention => {}
        Variant::MeanAggregator => cfg.aggregator = Aggregator::Mean,
        Variant::SupervisedOnly => cfg.batch_unlabeled = 0,
    }
    let out = fit(&cfg, run.encoder_config(), run.decoder_hidden, &ds)?;
    Ok(out.log.last().and_then(|e| e.val_miou).unwrap_or(f64::NAN))
}

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let n_seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);

    let mut means = Vec::new();
    for variant in [
        Variant::Attention,
        Variant::MeanAggregator,
        Variant::SupervisedOnly,
    ] {
        let mut scores = Vec::new();
        for seed in 0..n_seeds {
            let t0 = std::time::Instant::now();
            let miou = run_variant(variant, seed, epochs)?;
            println!(
                "{variant:?} seed {seed}: val miou {miou:.4} ({:.0}s)",
                t0.elapsed().as_secs_f64()
            );
            scores.push(miou);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        println!("{variant:?}: mean val miou {mean:.4}\n");
        means.push((variant, mean));
    }
    println!("summary:");
    for (v, m) in &means {
        println!("  {v:?}: {m:.4}");
    }
    Ok(())
}
