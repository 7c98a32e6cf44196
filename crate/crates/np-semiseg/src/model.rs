//! The assembled segmentation model: encoder, NP head, decoder.
//!
//! One forward pass over a target feature map runs both head paths:
//!
//! * latent path: reduce -> attention against target centers -> pool ->
//!   MLP -> (mu, var) -> T reparameterized samples -> tiled latent maps;
//! * deterministic path: attention against context centers -> pool ->
//!   linear projection -> tiled context map (and, through the same pooled
//!   vector, the context-side latent distribution the KL term compares
//!   against).
//!
//! The original feature map, each latent map, and the context map are
//! concatenated into T slices of `D + D_t + D_c` channels; the decoder
//! processes the slices with shared weights, per-slice softmax maps are
//! averaged, and the uncertainty map is the entropy of that average.

use crate::np_head::{
    draw_eps, sample_latents, Aggregator, BankSet, CenterSet, CenterSnapshot, LatentDistribution,
    LatentMlp, LatentMlpVars, DEFAULT_BANK_CAPACITY,
};
use crate::ops::entropy_map;
use crate::rng::StreamRng;
use crate::segmodel::{
    Decoder, DecoderConfig, DecoderVars, Encoder, EncoderConfig, EncoderVars, LinearLayer,
    LinearVars, ParamFeed, SmallConvNet, SmallConvNetConfig, SmallConvNetVars,
};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Parameter, Real, Tensor};
use crate::{NpError, Result};
use std::cell::Cell;

/// Everything that fixes the model's architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// reduced feature dimension R
    pub r: usize,
    /// latent dimension D_t
    pub d_t: usize,
    /// deterministic context dimension D_c
    pub d_c: usize,
    pub decoder_hidden: usize,
    pub n_class: usize,
    /// latent samples per forward (T)
    pub t_samples: usize,
    pub bank_capacity: usize,
    pub aggregator: Aggregator,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            r: 8,
            d_t: 8,
            d_c: 8,
            decoder_hidden: 64,
            n_class: 4,
            t_samples: 5,
            bank_capacity: DEFAULT_BANK_CAPACITY,
            aggregator: Aggregator::Attention,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        for (name, v) in [
            ("r", self.r),
            ("d_t", self.d_t),
            ("d_c", self.d_c),
            ("decoder_hidden", self.decoder_hidden),
            ("t_samples", self.t_samples),
            ("bank_capacity", self.bank_capacity),
        ] {
            if v == 0 {
                return Err(NpError::Config(format!("{name} must be positive")));
            }
        }
        if self.n_class < 2 {
            return Err(NpError::Config("n_class must be at least 2".into()));
        }
        Ok(())
    }

    pub fn assembled_channels(&self) -> usize {
        self.encoder.feature_channels + self.d_t + self.d_c
    }
}

/// Resolved center sets feeding one forward pass.
#[derive(Debug, Clone)]
pub struct HeadCenters {
    pub context: CenterSet,
    pub target: CenterSet,
}

impl HeadCenters {
    pub fn both_empty(&self) -> bool {
        !self.context.any_populated() && !self.target.any_populated()
    }
}

/// Per-image prediction with uncertainty.
#[derive(Debug, Clone)]
pub struct PredictionBundle {
    /// `[T, n_class, H, W]` softmax maps, one per latent sample (or per
    /// stochastic pass for the MC-dropout baseline).
    pub per_sample_probs: Tensor<f32>,
    /// `[n_class, H, W]` mean over the T maps.
    pub avg_probs: Tensor<f32>,
    /// `[H, W]` entropy of the average, in nats.
    pub uncertainty: Tensor<f32>,
}

impl PredictionBundle {
    pub fn from_probs(probs: &[Tensor<f32>]) -> Result<Self> {
        if probs.is_empty() {
            return Err(NpError::Shape("no probability maps to bundle".into()));
        }
        let shape = probs[0].shape().to_vec();
        let t = probs.len();
        let slice = probs[0].numel();
        let mut per = Vec::with_capacity(t * slice);
        let mut avg = vec![0.0f32; slice];
        for p in probs {
            if p.shape() != shape {
                return Err(NpError::Shape("ragged probability maps".into()));
            }
            per.extend_from_slice(p.data());
            for (a, &v) in avg.iter_mut().zip(p.data()) {
                *a += v;
            }
        }
        let inv = 1.0 / t as f32;
        for a in &mut avg {
            *a *= inv;
        }
        let avg = Tensor::new(&shape, avg)?;
        let uncertainty = entropy_map(&avg)?;
        Ok(PredictionBundle {
            per_sample_probs: Tensor::new(&[t, shape[0], shape[1], shape[2]], per)?,
            avg_probs: avg,
            uncertainty,
        })
    }

    pub fn n_class(&self) -> usize {
        self.avg_probs.shape()[0]
    }

    /// Argmax labels of the average prediction; ties go to the lowest
    /// class index.
    pub fn argmax_labels(&self) -> crate::LabelMap {
        let (c, h, w) = (
            self.avg_probs.shape()[0],
            self.avg_probs.shape()[1],
            self.avg_probs.shape()[2],
        );
        let n = h * w;
        let mut data = vec![0u8; n];
        for pix in 0..n {
            let mut best = 0usize;
            let mut best_p = self.avg_probs.data()[pix];
            for ch in 1..c {
                let p = self.avg_probs.data()[ch * n + pix];
                if p > best_p {
                    best_p = p;
                    best = ch;
                }
            }
            data[pix] = best as u8;
        }
        crate::LabelMap { h, w, data }
    }

    /// Uncertainty scaled by ln(n_class) into [0, 1].
    pub fn normalized_uncertainty(&self) -> Tensor<f32> {
        let z = (self.n_class() as f32).ln();
        self.uncertainty.map(|u| if z > 0.0 { u / z } else { 0.0 })
    }
}

/// Bound parameter leaves for one tape.
pub struct ModelVars<T: Real> {
    pub encoder: EncoderVars,
    pub reduce: SmallConvNetVars,
    pub latent: LatentMlpVars,
    pub proj: LinearVars,
    pub decoder: DecoderVars,
    /// leaves in declaration order, paired with `SegModel::params()`
    pub bound: Vec<Var>,
    _marker: std::marker::PhantomData<T>,
}

/// Head outputs before decoding: the T assembled slices plus the two
/// latent distributions.
pub struct AssembledGraph {
    pub slices: Vec<Var>,
    pub mu_target: Var,
    pub var_target: Var,
    pub mu_context: Var,
    pub var_context: Var,
    pub assembled_extents: [usize; 4],
}

/// Graph handles produced by one forward pass; values live on the tape.
pub struct GraphForward {
    /// per-slice `[n_class, H, W]` probability maps
    pub probs: Vec<Var>,
    /// pre-decode assembled slices, `[D + D_t + D_c, H, W]` each
    pub slices: Vec<Var>,
    pub mu_target: Var,
    pub var_target: Var,
    pub mu_context: Var,
    pub var_context: Var,
    pub assembled_extents: [usize; 4],
}

impl GraphForward {
    pub fn latent_target<T: Real>(&self, tape: &Tape<T>) -> LatentDistribution {
        LatentDistribution {
            mu: tape.value(self.mu_target).cast::<f32>().into_data(),
            var: tape.value(self.var_target).cast::<f32>().into_data(),
        }
    }

    pub fn latent_context<T: Real>(&self, tape: &Tape<T>) -> LatentDistribution {
        LatentDistribution {
            mu: tape.value(self.mu_context).cast::<f32>().into_data(),
            var: tape.value(self.var_context).cast::<f32>().into_data(),
        }
    }

    /// Materialize the `[T, C, H, W]` assembled tensor (test/debug aid).
    pub fn assembled_dense<T: Real>(&self, tape: &Tape<T>) -> Result<Tensor<T>> {
        let mut data = Vec::new();
        for &s in &self.slices {
            data.extend_from_slice(tape.value(s).data());
        }
        Tensor::new(&self.assembled_extents, data)
    }
}

/// Encoder + NP head + decoder, plus the training-time memory banks.
pub struct SegModel {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub reduce: SmallConvNet,
    pub latent_mlp: LatentMlp,
    pub context_proj: LinearLayer,
    pub decoder: Decoder,
    pub context_banks: BankSet,
    pub target_banks: BankSet,
    /// centers loaded from a snapshot; used by inference when present
    pub imported_centers: Option<CenterSnapshot>,
    decoder_stack_passes: Cell<u64>,
}

impl SegModel {
    pub fn new(cfg: ModelConfig, rng: &StreamRng) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg.encoder.clone(), &mut rng.substream("init.encoder"))?;
        let reduce = SmallConvNet::new(
            SmallConvNetConfig {
                in_channels: cfg.encoder.feature_channels,
                hidden: cfg.r,
            },
            &mut rng.substream("init.reduce"),
        );
        let latent_mlp = LatentMlp::new(cfg.r, cfg.d_t, &mut rng.substream("init.latent"));
        let context_proj =
            LinearLayer::new(cfg.r, cfg.d_c, &mut rng.substream("init.context_proj"));
        let decoder = Decoder::new(
            DecoderConfig {
                in_channels: cfg.assembled_channels(),
                hidden: cfg.decoder_hidden,
                n_class: cfg.n_class,
            },
            &mut rng.substream("init.decoder"),
        );
        let context_banks = BankSet::new(cfg.n_class, cfg.r, cfg.bank_capacity);
        let target_banks = BankSet::new(cfg.n_class, cfg.r, cfg.bank_capacity);
        Ok(SegModel {
            cfg,
            encoder,
            reduce,
            latent_mlp,
            context_proj,
            decoder,
            context_banks,
            target_banks,
            imported_centers: None,
            decoder_stack_passes: Cell::new(0),
        })
    }

    /// Parameters in declaration order (checkpoint layout order).
    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.encoder.params();
        p.extend(self.reduce.params());
        p.extend(self.latent_mlp.params());
        p.extend(self.context_proj.params());
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.encoder.params_mut();
        p.extend(self.reduce.params_mut());
        p.extend(self.latent_mlp.params_mut());
        p.extend(self.context_proj.params_mut());
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn param_values<T: Real>(&self) -> Vec<Tensor<T>> {
        self.params().iter().map(|p| p.value.cast()).collect()
    }

    /// Bind stored parameters onto a tape.
    pub fn bind<T: Real>(&self, tape: &Tape<T>) -> ModelVars<T> {
        self.bind_values(tape, self.param_values())
    }

    /// Bind externally supplied parameter tensors (finite-difference
    /// oracle path); order must match [`SegModel::params`].
    pub fn bind_values<T: Real>(&self, tape: &Tape<T>, values: Vec<Tensor<T>>) -> ModelVars<T> {
        let mut feed = ParamFeed::from_values(tape, values);
        let encoder = self.encoder.bind(&mut feed);
        let reduce = self.reduce.bind(&mut feed);
        let latent = self.latent_mlp.bind(&mut feed);
        let proj = self.context_proj.bind(&mut feed);
        let decoder = self.decoder.bind(&mut feed);
        ModelVars {
            encoder,
            reduce,
            latent,
            proj,
            decoder,
            bound: feed.into_bound(),
            _marker: std::marker::PhantomData,
        }
    }

    /// Add `scale` times the tape gradients into the parameter grads.
    pub fn accumulate_grads(&mut self, vars_bound: &[Var], grads: &Gradients<f32>, scale: f32) {
        let mut params = self.params_mut();
        debug_assert_eq!(params.len(), vars_bound.len());
        for (p, &v) in params.iter_mut().zip(vars_bound) {
            if let Some(g) = grads.get(v) {
                for (acc, &gv) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += scale * gv;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    // ---- centers ----

    pub fn live_centers(&self) -> HeadCenters {
        HeadCenters {
            context: self.context_banks.compute_centers(),
            target: self.target_banks.compute_centers(),
        }
    }

    /// Centers used in inference mode: live bank means while any bank
    /// holds data, otherwise an imported snapshot (the post-training /
    /// resumed-training state where banks are empty or discarded).
    pub fn inference_centers(&self) -> HeadCenters {
        let live = self.live_centers();
        if live.both_empty() {
            if let Some(s) = &self.imported_centers {
                return HeadCenters {
                    context: s.context.clone(),
                    target: s.target.clone(),
                };
            }
        }
        live
    }

    /// Snapshot of the current bank centers (what inference keeps once
    /// the banks are discarded).
    pub fn export_centers(&self) -> CenterSnapshot {
        CenterSnapshot {
            r: self.cfg.r as u32,
            n_class: self.cfg.n_class as u32,
            d_c: self.cfg.d_c as u32,
            context: self.context_banks.compute_centers(),
            target: self.target_banks.compute_centers(),
        }
    }

    pub fn import_centers(&mut self, snap: CenterSnapshot) -> Result<()> {
        if snap.r as usize != self.cfg.r
            || snap.n_class as usize != self.cfg.n_class
            || snap.d_c as usize != self.cfg.d_c
        {
            return Err(NpError::Format(format!(
                "snapshot dims (r={}, n_class={}, d_c={}) do not match model (r={}, n_class={}, d_c={})",
                snap.r, snap.n_class, snap.d_c, self.cfg.r, self.cfg.n_class, self.cfg.d_c
            )));
        }
        self.imported_centers = Some(snap);
        Ok(())
    }

    // ---- instrumentation ----

    pub fn decoder_pass_count(&self) -> u64 {
        self.decoder_stack_passes.get()
    }

    pub fn reset_decoder_passes(&self) {
        self.decoder_stack_passes.set(0);
    }

    pub(crate) fn note_decoder_pass(&self) {
        self.decoder_stack_passes
            .set(self.decoder_stack_passes.get() + 1);
    }

    // ---- forward ----

    /// Aggregated map against one center family, or `None` when the family
    /// has no populated centers (callers substitute zeros).
    fn aggregate<T: Real>(
        &self,
        tape: &Tape<T>,
        reduced: Var,
        set: &CenterSet,
        h: usize,
        w: usize,
    ) -> Result<Option<Var>> {
        let centers = set.populated_centers::<T>();
        if centers.is_empty() {
            return Ok(None);
        }
        match self.cfg.aggregator {
            Aggregator::Attention => Ok(Some(tape.attention_aggregate(reduced, &centers)?)),
            Aggregator::Mean => {
                // query-independent: every pixel gets the mean of the
                // populated centers
                let l = centers.len();
                let mut mean = vec![T::zero(); self.cfg.r];
                for c in &centers {
                    for (m, &v) in mean.iter_mut().zip(c) {
                        *m = *m + v;
                    }
                }
                let inv = T::one() / crate::tensor::real::<T>(l as f64);
                for m in &mut mean {
                    *m = *m * inv;
                }
                let leaf = tape.leaf(Tensor::from_vec(mean));
                Ok(Some(tape.tile_map(leaf, h, w)?))
            }
        }
    }

    /// Run both head paths over an already-encoded feature map and build
    /// the T assembled slices, without decoding them.
    ///
    /// `eps` holds the T pre-drawn standard-normal vectors for the
    /// reparameterized latent samples. With `cold_start_ok` the pass runs
    /// even when both center families are empty (both paths emit zeros);
    /// otherwise that state is an aggregation error.
    pub fn assemble_graph<T: Real>(
        &self,
        tape: &Tape<T>,
        vars: &ModelVars<T>,
        featmap: Var,
        centers: &HeadCenters,
        eps: &[Tensor<f32>],
        cold_start_ok: bool,
    ) -> Result<AssembledGraph> {
        let fshape = tape.shape(featmap);
        if fshape.len() != 3 {
            return Err(NpError::Shape(format!(
                "featmap must be [D, H, W], got {fshape:?}"
            )));
        }
        let (h, w) = (fshape[1], fshape[2]);
        if centers.both_empty() && !cold_start_ok {
            return Err(NpError::Aggregation(
                "both center families are empty; populate banks or import a snapshot".into(),
            ));
        }
        if eps.len() != self.cfg.t_samples {
            return Err(NpError::Shape(format!(
                "expected {} eps draws, got {}",
                self.cfg.t_samples,
                eps.len()
            )));
        }

        let reduced = vars.reduce.forward(tape, featmap)?;
        let zeros_map = || tape.leaf(Tensor::zeros(&[self.cfg.r, h, w]));

        // latent path: target centers
        let agg_t = self
            .aggregate(tape, reduced, &centers.target, h, w)?
            .unwrap_or_else(zeros_map);
        let pooled_t = tape.global_avg_pool(agg_t)?;
        let (mu_t, var_t) = vars.latent.forward(tape, pooled_t)?;

        // deterministic path (and context-side distribution for the KL)
        let agg_c = self
            .aggregate(tape, reduced, &centers.context, h, w)?
            .unwrap_or_else(zeros_map);
        let pooled_c = tape.global_avg_pool(agg_c)?;
        let (mu_c, var_c) = vars.latent.forward(tape, pooled_c)?;
        let pooled_row = tape.reshape(pooled_c, &[1, self.cfg.r])?;
        let ctx_rep = vars.proj.forward(tape, pooled_row)?;
        let ctx_rep = tape.reshape(ctx_rep, &[self.cfg.d_c])?;
        let ctx_map = tape.tile_map(ctx_rep, h, w)?;

        let zs = sample_latents(tape, mu_t, var_t, eps)?;
        let mut slices = Vec::with_capacity(zs.len());
        for z in zs {
            let zmap = tape.tile_map(z, h, w)?;
            slices.push(tape.concat_channels(&[featmap, zmap, ctx_map])?);
        }

        Ok(AssembledGraph {
            slices,
            mu_target: mu_t,
            var_target: var_t,
            mu_context: mu_c,
            var_context: var_c,
            assembled_extents: [self.cfg.t_samples, self.cfg.assembled_channels(), h, w],
        })
    }

    /// Decode the assembled slices with shared weights: one
    /// decoder-stack pass (the instrumented unit the uncertainty-cost
    /// comparison counts). Returns per-slice softmax maps.
    pub fn decode_stack<T: Real>(
        &self,
        tape: &Tape<T>,
        vars: &ModelVars<T>,
        slices: &[Var],
        dropout: Option<&[Tensor<T>; 2]>,
    ) -> Result<Vec<Var>> {
        let mut probs = Vec::with_capacity(slices.len());
        for &slice in slices {
            let logits = vars.decoder.forward(tape, slice, dropout)?;
            probs.push(tape.softmax_channels(logits)?);
        }
        self.note_decoder_pass();
        Ok(probs)
    }

    /// Full head + decoder forward over an already-encoded feature map.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_featmap_graph<T: Real>(
        &self,
        tape: &Tape<T>,
        vars: &ModelVars<T>,
        featmap: Var,
        centers: &HeadCenters,
        eps: &[Tensor<f32>],
        cold_start_ok: bool,
        dropout: Option<&[Tensor<T>; 2]>,
    ) -> Result<GraphForward> {
        let asm = self.assemble_graph(tape, vars, featmap, centers, eps, cold_start_ok)?;
        let probs = self.decode_stack(tape, vars, &asm.slices, dropout)?;
        Ok(GraphForward {
            probs,
            slices: asm.slices,
            mu_target: asm.mu_target,
            var_target: asm.var_target,
            mu_context: asm.mu_context,
            var_context: asm.var_context,
            assembled_extents: asm.assembled_extents,
        })
    }

    /// [`Self::forward_featmap_graph`] starting from an image.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_image_graph<T: Real>(
        &self,
        tape: &Tape<T>,
        vars: &ModelVars<T>,
        image: Var,
        centers: &HeadCenters,
        eps: &[Tensor<f32>],
        cold_start_ok: bool,
    ) -> Result<GraphForward> {
        let feat = vars.encoder.forward(tape, image)?;
        self.forward_featmap_graph(tape, vars, feat, centers, eps, cold_start_ok, None)
    }

    fn predict_inner(
        &self,
        image: &Tensor<f32>,
        rng: &mut StreamRng,
        cold_start_ok: bool,
    ) -> Result<PredictionBundle> {
        let tape: Tape<f32> = Tape::new();
        let vars = self.bind(&tape);
        let img = tape.leaf(image.clone());
        let centers = self.inference_centers();
        let eps = draw_eps(self.cfg.t_samples, self.cfg.d_t, rng);
        let fwd = self.forward_image_graph(&tape, &vars, img, &centers, &eps, cold_start_ok)?;
        let probs: Vec<Tensor<f32>> = fwd
            .probs
            .iter()
            .map(|&p| (*tape.value(p)).clone())
            .collect();
        PredictionBundle::from_probs(&probs)
    }

    /// Inference-mode prediction (imported snapshot centers when present,
    /// live bank centers otherwise). One encoder+decoder-stack pass.
    pub fn predict(&self, image: &Tensor<f32>, rng: &mut StreamRng) -> Result<PredictionBundle> {
        self.predict_inner(image, rng, false)
    }

    /// Like [`Self::predict`] but tolerates empty center families (the
    /// training loop's cold start).
    pub fn predict_cold(
        &self,
        image: &Tensor<f32>,
        rng: &mut StreamRng,
    ) -> Result<PredictionBundle> {
        self.predict_inner(image, rng, true)
    }

    /// Value-level reduce(encode(image)), the vectors that feed the banks.
    pub fn reduced_featmap(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape: Tape<f32> = Tape::new();
        let vars = self.bind(&tape);
        let img = tape.leaf(image.clone());
        let feat = vars.encoder.forward(&tape, img)?;
        let red = vars.reduce.forward(&tape, feat)?;
        Ok((*tape.value(red)).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::LabelMap;

    fn toy_model() -> SegModel {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                in_channels: 3,
                feature_channels: 8,
                depth: 1,
                downsample_factor: 1,
            },
            r: 4,
            d_t: 4,
            d_c: 4,
            decoder_hidden: 8,
            n_class: 3,
            t_samples: 2,
            bank_capacity: 64,
            aggregator: Aggregator::Attention,
        };
        SegModel::new(cfg, &StreamRng::new(40)).unwrap()
    }

    fn populate(model: &mut SegModel, seed: u64) {
        let mut rng = StreamRng::new(seed);
        let image = Tensor::new(
            &[3, 8, 8],
            (0..3 * 64).map(|_| rng.uniform_f32(0.0, 1.0)).collect(),
        )
        .unwrap();
        let labels = LabelMap::new(
            8,
            8,
            (0..64).map(|i| (i % 3) as u8).collect(),
        )
        .unwrap();
        let red = model.reduced_featmap(&image).unwrap();
        model.context_banks.insert_map(&red, &labels).unwrap();
        model.target_banks.insert_map(&red, &labels).unwrap();
    }

    #[test]
    fn forward_shapes_and_simplex() {
        let mut model = toy_model();
        populate(&mut model, 77);
        let mut rng = StreamRng::new(9);
        let image = Tensor::new(
            &[3, 8, 8],
            (0..3 * 64).map(|_| rng.uniform_f32(0.0, 1.0)).collect(),
        )
        .unwrap();
        let bundle = model.predict(&image, &mut rng.substream("fwd")).unwrap();
        assert_eq!(bundle.per_sample_probs.shape(), &[2, 3, 8, 8]);
        assert_eq!(bundle.avg_probs.shape(), &[3, 8, 8]);
        assert_eq!(bundle.uncertainty.shape(), &[8, 8]);
        let n = 64;
        for pix in 0..n {
            let s: f32 = (0..3).map(|c| bundle.avg_probs.data()[c * n + pix]).sum();
            assert!((s - 1.0).abs() < 1e-5, "pixel sum {s}");
        }
        let zmax = (3.0f32).ln() + 1e-6;
        for &u in bundle.uncertainty.data() {
            assert!((0.0..=zmax).contains(&u));
        }
    }

    #[test]
    fn assembled_extents_follow_config() {
        let mut model = toy_model();
        populate(&mut model, 3);
        let tape: Tape<f32> = Tape::new();
        let vars = model.bind(&tape);
        let mut rng = StreamRng::new(1);
        let image = tape.leaf(Tensor::new(
            &[3, 8, 8],
            (0..3 * 64).map(|_| rng.uniform_f32(0.0, 1.0)).collect(),
        ).unwrap());
        let centers = model.live_centers();
        let eps = draw_eps(2, 4, &mut rng);
        let fwd = model
            .forward_image_graph(&tape, &vars, image, &centers, &eps, false)
            .unwrap();
        assert_eq!(fwd.assembled_extents, [2, 8 + 4 + 4, 8, 8]);
        let dense = fwd.assembled_dense(&tape).unwrap();
        assert_eq!(dense.shape(), &[2, 16, 8, 8]);
    }

    #[test]
    fn forward_with_all_banks_empty_errors_unless_cold() {
        let model = toy_model();
        let mut rng = StreamRng::new(2);
        let image = Tensor::new(
            &[3, 8, 8],
            (0..3 * 64).map(|_| rng.uniform_f32(0.0, 1.0)).collect(),
        )
        .unwrap();
        assert!(matches!(
            model.predict(&image, &mut rng.substream("a")),
            Err(NpError::Aggregation(_))
        ));
        let bundle = model.predict_cold(&image, &mut rng.substream("a")).unwrap();
        assert_eq!(bundle.avg_probs.shape(), &[3, 8, 8]);
    }

    #[test]
    fn snapshot_round_trip_reproduces_forward_bitwise() {
        let mut model = toy_model();
        populate(&mut model, 5);
        let mut rng = StreamRng::new(6);
        let image = Tensor::new(
            &[3, 8, 8],
            (0..3 * 64).map(|_| rng.uniform_f32(0.0, 1.0)).collect(),
        )
        .unwrap();
        let before = model
            .predict(&image, &mut rng.substream("same-stream"))
            .unwrap();

        let snap = model.export_centers();
        let mut bytes = Vec::new();
        snap.write_to(&mut bytes).unwrap();
        let back = CenterSnapshot::read_from(bytes.as_slice()).unwrap();
        model.import_centers(back).unwrap();
        // wipe the banks; inference must rely on the snapshot alone
        model.context_banks.clear();
        model.target_banks.clear();

        let after = model
            .predict(&image, &mut rng.substream("same-stream"))
            .unwrap();
        assert_eq!(before.per_sample_probs.data(), after.per_sample_probs.data());
        assert_eq!(before.avg_probs.data(), after.avg_probs.data());
        assert_eq!(before.uncertainty.data(), after.uncertainty.data());
    }

    #[test]
    fn import_rejects_mismatched_dims() {
        let mut model = toy_model();
        let snap = CenterSnapshot {
            r: 99,
            n_class: 3,
            d_c: 4,
            context: CenterSet::empty(3, 99),
            target: CenterSet::empty(3, 99),
        };
        assert!(matches!(
            model.import_centers(snap),
            Err(NpError::Format(_))
        ));
    }

    #[test]
    fn mean_aggregator_ignores_query_map() {
        let mut model = toy_model();
        model.cfg.aggregator = Aggregator::Mean;
        populate(&mut model, 11);
        let mut rng = StreamRng::new(13);
        let mk_image = |rng: &mut StreamRng| {
            Tensor::new(
                &[3, 8, 8],
                (0..3 * 64).map(|_| rng.uniform_f32(0.0, 1.0)).collect(),
            )
            .unwrap()
        };
        // with the mean aggregator the pooled head inputs are identical
        // for any image, so mu/var and the context rep cannot depend on
        // the query map
        let tape: Tape<f32> = Tape::new();
        let vars = model.bind(&tape);
        let centers = model.live_centers();
        let eps = draw_eps(2, 4, &mut rng);
        let img_a = tape.leaf(mk_image(&mut rng));
        let img_b = tape.leaf(mk_image(&mut rng));
        let fa = model
            .forward_image_graph(&tape, &vars, img_a, &centers, &eps, false)
            .unwrap();
        let fb = model
            .forward_image_graph(&tape, &vars, img_b, &centers, &eps, false)
            .unwrap();
        assert_eq!(
            tape.value(fa.mu_target).data(),
            tape.value(fb.mu_target).data()
        );
        assert_eq!(
            tape.value(fa.var_context).data(),
            tape.value(fb.var_context).data()
        );
    }

    #[test]
    fn pass_counter_counts_stack_passes() {
        let mut model = toy_model();
        populate(&mut model, 19);
        let mut rng = StreamRng::new(1);
        let image = Tensor::new(
            &[3, 8, 8],
            (0..3 * 64).map(|_| rng.uniform_f32(0.0, 1.0)).collect(),
        )
        .unwrap();
        model.reset_decoder_passes();
        model.predict(&image, &mut rng.substream("x")).unwrap();
        model.predict(&image, &mut rng.substream("y")).unwrap();
        assert_eq!(model.decoder_pass_count(), 2);
    }
}
