//! Train briefly, then render a validation image next to its predicted
//! segmentation and entropy-based uncertainty map (black = certain,
//! white = maximally uncertain), as PPM/PGM files.
//!
//! Run with: `cargo run --release --example uncertainty_render [out_dir]`

use np_semiseg::config::RunConfig;
use np_semiseg::imageio::{write_pgm, write_ppm};
use np_semiseg::rng::StreamRng;
use np_semiseg::synthdata::{generate, render_palette};
use np_semiseg::trainer::{fit, TrainConfig};
use np_semiseg::{LabelMap, Result, Tensor};
use std::path::PathBuf;

fn main() -> Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("npss_render"));
    std::fs::create_dir_all(&out)?;

    let run = RunConfig::default();
    let mut gen = run.gen_config();
    gen.seed = 3;
    gen.n_unlabeled = 64; // shorter warm-up than the full default
    let ds = generate(&gen)?;
    let cfg = TrainConfig {
        seed: 3,
        epochs: 4,
        ..run.train_config()
    };
    println!("training a small model ({} epochs)...", cfg.epochs);
    let outcome = fit(&cfg, run.encoder_config(), run.decoder_hidden, &ds)?;
    let model = outcome.model;

    let val = ds.val();
    for (i, sample) in val.iter().take(3).enumerate() {
        let mut rng = StreamRng::new(cfg.seed).substream_n("render", i as u64);
        let bundle = model.predict_cold(&sample.image, &mut rng)?;
        let labels = bundle.argmax_labels();
        let (h, w) = (labels.h, labels.w);
        let n = h * w;

        let mut pred_img = vec![0.0f32; 3 * n];
        for pix in 0..n {
            let color = render_palette(labels.data[pix]);
            for c in 0..3 {
                pred_img[c * n + pix] = color[c];
            }
        }
        let norm = bundle.normalized_uncertainty();
        let unc: Vec<u8> = norm
            .data()
            .iter()
            .map(|&u| (u.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();

        write_ppm(&out.join(format!("val{i}_input.ppm")), &sample.image)?;
        write_ppm(
            &out.join(format!("val{i}_pred.ppm")),
            &Tensor::new(&[3, h, w], pred_img)?,
        )?;
        write_pgm(
            &out.join(format!("val{i}_uncertainty.pgm")),
            &LabelMap { h, w, data: unc },
        )?;
        let mean_u: f32 = norm.data().iter().sum::<f32>() / n as f32;
        println!("val{i}: mean normalized uncertainty {mean_u:.3}");
    }
    println!("wrote input/prediction/uncertainty triples to {}", out.display());
    Ok(())
}
