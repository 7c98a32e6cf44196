//! Sliding-window inference: stitch overlapping window predictions over
//! an image larger than the training crop, and check that a full-size
//! window reproduces plain single-forward evaluation.
//!
//! Run with: `cargo run --release --example sliding_inference`

use np_semiseg::config::RunConfig;
use np_semiseg::evalkit::{sliding_eval, window_starts, ConfusionMatrix};
use np_semiseg::rng::StreamRng;
use np_semiseg::synthdata::{generate, GenConfig};
use np_semiseg::trainer::{fit, TrainConfig};
use np_semiseg::Result;

fn main() -> Result<()> {
    let run = RunConfig::default();
    // train at 32x32
    let mut gen = run.gen_config();
    gen.seed = 13;
    gen.n_unlabeled = 64;
    let train_ds = generate(&gen)?;
    let cfg = TrainConfig {
        seed: 13,
        epochs: 3,
        ..run.train_config()
    };
    println!("training at {}x{} ({} epochs)...", gen.h, gen.w, cfg.epochs);
    let outcome = fit(&cfg, run.encoder_config(), run.decoder_hidden, &train_ds)?;
    let model = outcome.model;

    // evaluate on larger 48x48 scenes with 32x32 windows
    let big = generate(&GenConfig {
        seed: 14,
        n_labeled: 0,
        n_unlabeled: 0,
        n_val: 8,
        h: 48,
        w: 48,
        ..gen.clone()
    })?;
    let (crop, stride) = (32, 16);
    let r = window_starts(48, crop, stride).len();
    println!("sliding {}x{} windows, stride {}: {r}x{r} grid per image", crop, crop, stride);

    let mut cm = ConfusionMatrix::new(big.n_class());
    let rng = StreamRng::new(15);
    for (i, s) in big.val().iter().enumerate() {
        let mut wrng = rng.substream_n("slide", i as u64);
        let bundle = sliding_eval(&model, &s.image, crop, stride, &mut wrng)?;
        cm.add(&bundle.argmax_labels(), &s.mask)?;
    }
    println!("stitched val miou on 48x48 scenes: {:.4}", cm.miou()?);

    // degenerate single-window slide equals a direct forward
    let sample = big.val()[0];
    let mut ra = rng.substream("degenerate");
    let mut rb = rng.substream("degenerate");
    let slid = sliding_eval(&model, &sample.image, 48, 48, &mut ra)?;
    let direct = model.predict_cold(&sample.image, &mut rb)?;
    let max_diff = slid.avg_probs.max_abs_diff(&direct.avg_probs);
    println!("crop == image size: max |slide - direct| = {max_diff:.2e}");
    assert!(max_diff <= 1e-6);
    Ok(())
}
