//! Rough timing breakdown of one training step's components.
//! Run with: `cargo run --release --example profile_step`

use np_semiseg::config::RunConfig;
use np_semiseg::model::SegModel;
use np_semiseg::np_head::draw_eps;
use np_semiseg::rng::StreamRng;
use np_semiseg::synthdata::generate;
use np_semiseg::tape::Tape;
use np_semiseg::trainer::{train_step, Sgd};
use np_semiseg::Result;
use std::time::Instant;

fn main() -> Result<()> {
    let run = RunConfig::default();
    let mut gen = run.gen_config();
    gen.seed = 7;
    gen.n_labeled = 8;
    gen.n_unlabeled = 8;
    gen.n_val = 0;
    let ds = generate(&gen)?;
    let cfg = run.train_config();
    let mc = cfg.model_config(run.encoder_config(), run.decoder_hidden, ds.n_class());
    let mut model = SegModel::new(mc, &StreamRng::new(1))?;
    let mut opt = Sgd::new(&model, cfg.learning_rate, cfg.momentum);
    let labeled = ds.labeled();
    let unlabeled = ds.unlabeled();

    // one warm step to fill banks
    train_step(
        &mut model,
        &labeled[..4],
        &unlabeled[..4],
        &mut opt,
        &cfg,
        &StreamRng::new(2).substream("warm"),
    )?;

    let t0 = Instant::now();
    for i in 0..3 {
        train_step(
            &mut model,
            &labeled[..4],
            &unlabeled[..4],
            &mut opt,
            &cfg,
            &StreamRng::new(3).substream_n("step", i),
        )?;
    }
    println!("train_step (4+4 images): {:.2?}/step", t0.elapsed() / 3);

    // forward only
    let img = &labeled[0].image;
    let t1 = Instant::now();
    for i in 0..10 {
        let mut r = StreamRng::new(4).substream_n("fwd", i);
        model.predict_cold(img, &mut r)?;
    }
    println!("inference forward: {:.2?}/image", t1.elapsed() / 10);

    // forward + backward of one image's loss
    let centers = model.live_centers();
    let t2 = Instant::now();
    for i in 0..10 {
        let tape: Tape<f32> = Tape::new();
        let vars = model.bind(&tape);
        let leaf = tape.leaf(img.clone());
        let mut er = StreamRng::new(5).substream_n("e", i);
        let eps = draw_eps(cfg.t_samples, cfg.d_t, &mut er);
        let fwd = model.forward_image_graph(&tape, &vars, leaf, &centers, &eps, true)?;
        let (ce, _) = tape.cross_entropy(fwd.probs[0], &labeled[0].mask)?;
        let grads = tape.backward(ce)?;
        std::hint::black_box(&grads);
    }
    println!("fwd+bwd single image: {:.2?}/image", t2.elapsed() / 10);

    // raw conv cost: decoder conv2 64->64 on 32x32, fwd only
    let tape: Tape<f32> = Tape::new();
    let mut r = StreamRng::new(6);
    let x = tape.leaf(np_semiseg::Tensor::new(
        &[64, 32, 32],
        (0..64 * 1024).map(|_| r.uniform_f32(-1.0, 1.0)).collect(),
    )?);
    let w = tape.leaf(np_semiseg::Tensor::new(
        &[64, 64, 3, 3],
        (0..64 * 64 * 9).map(|_| r.uniform_f32(-0.1, 0.1)).collect(),
    )?);
    let b = tape.leaf(np_semiseg::Tensor::zeros(&[64]));
    let t3 = Instant::now();
    let reps = 50;
    for _ in 0..reps {
        let y = tape.conv2d(x, w, b, 1)?;
        std::hint::black_box(&y);
    }
    let per = t3.elapsed().as_secs_f64() / reps as f64;
    let flops = 2.0 * 9.0 * 64.0 * 64.0 * 1024.0;
    println!(
        "conv3x3 64->64 @32x32 fwd: {:.3} ms = {:.1} GFLOP/s",
        per * 1e3,
        flops / per / 1e9
    );
    Ok(())
}
