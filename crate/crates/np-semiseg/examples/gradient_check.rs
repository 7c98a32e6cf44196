//! Verify analytic gradients against the central finite-difference
//! oracle, from single layers up to the full training loss on a toy
//! batch.
//!
//! Run with: `cargo run --release --example gradient_check`

use np_semiseg::fdcheck::{check_gradients, ScalarGraph, FD_STEP};
use np_semiseg::model::{HeadCenters, SegModel};
use np_semiseg::np_head::draw_eps;
use np_semiseg::losses::kl_gaussian_graph;
use np_semiseg::rng::StreamRng;
use np_semiseg::segmodel::EncoderConfig;
use np_semiseg::tape::{Tape, Var};
use np_semiseg::tensor::Real;
use np_semiseg::trainer::TrainConfig;
use np_semiseg::{LabelMap, Result, Tensor};

/// Sum of squares through one 3x3 conv.
struct ConvSquares;
impl ScalarGraph for ConvSquares {
    fn build<T: Real>(&self, tape: &Tape<T>, params: &[Tensor<T>]) -> Result<(Var, Vec<Var>)> {
        let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let y = tape.conv2d(leaves[0], leaves[1], leaves[2], 1)?;
        let y = tape.square(y)?;
        Ok((tape.sum_all(y)?, leaves))
    }
}

/// The full model loss (cross entropy over T samples + KL) on one toy
/// image, with banks and noise frozen outside the differentiated graph.
struct ToyLoss {
    model: SegModel,
    image: Tensor<f32>,
    labels: LabelMap,
    centers: HeadCenters,
    eps: Vec<Tensor<f32>>,
    lambda_kl: f32,
}

impl ScalarGraph for ToyLoss {
    fn build<T: Real>(&self, tape: &Tape<T>, params: &[Tensor<T>]) -> Result<(Var, Vec<Var>)> {
        let vars = self.model.bind_values(tape, params.to_vec());
        let img = tape.leaf(self.image.cast::<T>());
        let fwd = self
            .model
            .forward_image_graph(tape, &vars, img, &self.centers, &self.eps, false)?;
        let per_slice = 1.0 / fwd.probs.len() as f32;
        let mut terms = Vec::new();
        for &p in &fwd.probs {
            let (ce, _) = tape.cross_entropy(p, &self.labels)?;
            terms.push((np_semiseg::tensor::real::<T>(per_slice as f64), ce));
        }
        let kl = kl_gaussian_graph(
            tape,
            fwd.mu_target,
            fwd.var_target,
            fwd.mu_context,
            fwd.var_context,
        )?;
        terms.push((np_semiseg::tensor::real::<T>(self.lambda_kl as f64), kl));
        let root = tape.linear_combination(&terms)?;
        Ok((root, vars.bound))
    }
}

fn main() -> Result<()> {
    let mut rng = StreamRng::new(5);
    let conv_params = vec![
        Tensor::new(&[2, 4, 4], (0..32).map(|_| rng.uniform_f32(-1.0, 1.0)).collect())?,
        Tensor::new(&[3, 2, 3, 3], (0..54).map(|_| rng.uniform_f32(-1.0, 1.0)).collect())?,
        Tensor::from_vec((0..3).map(|_| rng.uniform_f32(-1.0, 1.0)).collect()),
    ];
    let rep = check_gradients(&ConvSquares, &conv_params, FD_STEP, 16, 1)?;
    println!(
        "conv3x3 sum-of-squares: max rel err {:.2e} over {} coords",
        rep.max_rel_err, rep.checked
    );

    // toy full-loss check: 2 classes, 4x4 head maps (8x8 image pooled by
    // 2 so the encoder participates), tiny widths
    let cfg = TrainConfig {
        d_t: 4,
        d_c: 4,
        r: 4,
        t_samples: 2,
        ..TrainConfig::default()
    };
    let enc = EncoderConfig {
        feature_channels: 8,
        depth: 1,
        downsample_factor: 2,
        ..EncoderConfig::default()
    };
    let mc = cfg.model_config(enc, 8, 2);
    let mut model = SegModel::new(mc, &StreamRng::new(9))?;
    let image = Tensor::new(
        &[3, 8, 8],
        (0..3 * 64).map(|_| rng.uniform_f32(0.0, 1.0)).collect(),
    )?;
    let labels = LabelMap::new(4, 4, (0..16).map(|i| (i % 2) as u8).collect())?;
    let red = model.reduced_featmap(&image)?;
    model.context_banks.insert_map(&red, &labels)?;
    model.target_banks.insert_map(&red, &labels)?;
    let centers = model.live_centers();
    let eps = draw_eps(cfg.t_samples, cfg.d_t, &mut rng.substream("eps"));
    let params = model.param_values::<f32>();
    let toy = ToyLoss {
        model,
        image,
        labels,
        centers,
        eps,
        lambda_kl: cfg.lambda_kl,
    };
    let rep = check_gradients(&toy, &params, FD_STEP, 4, 2)?;
    println!(
        "full toy loss: max rel err {:.2e} over {} coords",
        rep.max_rel_err, rep.checked
    );
    assert!(rep.max_rel_err <= 1e-3);
    println!("all gradients verified at <= 1e-3 relative error");
    Ok(())
}
