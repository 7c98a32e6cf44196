//! Compare the NP head's single-pass uncertainty against the MC-dropout
//! baseline on the validation split: mIoU and PAvPU side by side.
//!
//! Run with: `cargo run --release --example mc_dropout_compare`

use np_semiseg::config::RunConfig;
use np_semiseg::evalkit::{pavpu_counts, ConfusionMatrix, PavpuCounts};
use np_semiseg::model::PredictionBundle;
use np_semiseg::rng::StreamRng;
use np_semiseg::synthdata::{generate, Sample};
use np_semiseg::trainer::{fit, DropoutHead, TrainConfig};
use np_semiseg::Result;

fn score(
    name: &str,
    run: &RunConfig,
    n_class: usize,
    val: &[&Sample],
    mut predict: impl FnMut(usize, &Sample) -> Result<PredictionBundle>,
) -> Result<()> {
    let mut cm = ConfusionMatrix::new(n_class);
    let mut patches = PavpuCounts::default();
    for (i, s) in val.iter().enumerate() {
        let bundle = predict(i, s)?;
        let pred = bundle.argmax_labels();
        cm.add(&pred, &s.mask)?;
        patches.merge(&pavpu_counts(
            &pred,
            &s.mask,
            &bundle.normalized_uncertainty(),
            &run.pavpu_config(),
        )?);
    }
    println!(
        "{name:<12} miou {:.4}  pavpu {:.4}",
        cm.miou()?,
        patches.ratio()
    );
    Ok(())
}

fn main() -> Result<()> {
    let run = RunConfig::default();
    let mut gen = run.gen_config();
    gen.seed = 21;
    gen.n_unlabeled = 64;
    let ds = generate(&gen)?;
    let cfg = TrainConfig {
        seed: 21,
        epochs: 4,
        ..run.train_config()
    };
    println!("training ({} epochs)...", cfg.epochs);
    let outcome = fit(&cfg, run.encoder_config(), run.decoder_hidden, &ds)?;
    let model = outcome.model;
    let val = ds.val();

    let rng = StreamRng::new(77);
    score("np-head", &run, ds.n_class(), &val, |i, s| {
        let mut r = rng.substream_n("np", i as u64);
        model.predict_cold(&s.image, &mut r)
    })?;

    let head = DropoutHead::new(&model, run.dropout_rate)?;
    score("mc-dropout", &run, ds.n_class(), &val, |i, s| {
        let mut r = rng.substream_n("mc", i as u64);
        head.predict(&s.image, run.t_samples, &mut r)
    })?;
    Ok(())
}
