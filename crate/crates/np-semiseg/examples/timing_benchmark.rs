//! Uncertainty-estimation cost: the NP head needs one decoder-stack pass
//! per window, MC dropout needs T. Reports instrumented pass counts and
//! wall-clock medians under sliding evaluation.
//!
//! Run with: `cargo run --release --example timing_benchmark`

use np_semiseg::config::RunConfig;
use np_semiseg::evalkit::benchmark_uncertainty;
use np_semiseg::rng::StreamRng;
use np_semiseg::synthdata::generate;
use np_semiseg::trainer::{fit, TrainConfig};
use np_semiseg::Result;

fn main() -> Result<()> {
    let run = RunConfig::default();
    let mut gen = run.gen_config();
    gen.seed = 11;
    gen.n_labeled = 8;
    gen.n_unlabeled = 0;
    gen.n_val = 2;
    let ds = generate(&gen)?;
    let cfg = TrainConfig {
        seed: 11,
        epochs: 1,
        batch_unlabeled: 0,
        ..run.train_config()
    };
    println!("preparing a model (1 supervised epoch)...");
    let outcome = fit(&cfg, run.encoder_config(), run.decoder_hidden, &ds)?;

    let images: Vec<_> = ds.val().iter().map(|s| s.image.clone()).collect();
    // crop 16 / stride 8 over 32x32 gives a 3x3 window grid (r = 9)
    let rows = benchmark_uncertainty(
        &outcome.model,
        run.dropout_rate,
        &images,
        &[1, 2, 5, 10],
        3,
        16,
        8,
        &StreamRng::new(11).substream("bench"),
    )?;
    println!("{:>4} {:>12} {:>12} {:>10} {:>10} {:>8}", "T", "np_ms/img", "mc_ms/img", "np_passes", "mc_passes", "ratio");
    for r in &rows {
        println!(
            "{:>4} {:>12.2} {:>12.2} {:>10} {:>10} {:>8.2}",
            r.t,
            r.wall_ms_np,
            r.wall_ms_mc,
            r.passes_np,
            r.passes_mc,
            r.wall_ms_mc / r.wall_ms_np
        );
        assert_eq!(r.passes_mc, r.t as u64 * r.passes_np);
    }
    println!("pass counts satisfy mc = T x np under sliding evaluation");
    Ok(())
}
