//! Two-mode training loop: every step first pseudo-labels the unlabeled
//! batch in inference mode, then switches to training mode, routes the
//! batch's reduced features into the context/target banks, and optimizes
//! the combined cross-entropy + KL loss with SGD. Also home to the
//! MC-dropout uncertainty baseline and checkpoint persistence.

use crate::evalkit::ConfusionMatrix;
use crate::losses::{kl_gaussian_graph, total_loss, LossBreakdown, DEFAULT_LAMBDA_KL};
use crate::model::{ModelConfig, PredictionBundle, SegModel};
use crate::np_head::{draw_eps, Aggregator, CenterSnapshot, DEFAULT_BANK_CAPACITY};
use crate::rng::StreamRng;
use crate::segmodel::EncoderConfig;
use crate::synthdata::{Dataset, Sample};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::{LabelMap, NpError, Result, IGNORE_LABEL};
use std::io::{Read, Write};

/// Training hyperparameters. Model widths (`d_t`, `d_c`, `r`) live here
/// because the training procedure owns model construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub lambda_kl: f32,
    /// latent samples per forward (T)
    pub t_samples: usize,
    /// memory bank capacity (Q)
    pub bank_capacity: usize,
    pub d_t: usize,
    pub d_c: usize,
    pub r: usize,
    /// max-prob cutoff below which pseudo-labels become ignore; `None`
    /// keeps the plain argmax
    pub pseudo_label_threshold: Option<f32>,
    pub aggregator: Aggregator,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 8,
            batch_labeled: 4,
            batch_unlabeled: 4,
            learning_rate: 0.01,
            momentum: 0.9,
            lambda_kl: DEFAULT_LAMBDA_KL,
            t_samples: 5,
            bank_capacity: DEFAULT_BANK_CAPACITY,
            d_t: 8,
            d_c: 8,
            r: 8,
            pseudo_label_threshold: None,
            aggregator: Aggregator::Attention,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("batch_labeled", self.batch_labeled),
            ("t_samples", self.t_samples),
            ("bank_capacity", self.bank_capacity),
            ("d_t", self.d_t),
            ("d_c", self.d_c),
            ("r", self.r),
        ] {
            if v == 0 {
                return Err(NpError::Config(format!("{name} must be positive")));
            }
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(NpError::Config("learning_rate must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(NpError::Config("momentum must be in [0, 1)".into()));
        }
        if let Some(th) = self.pseudo_label_threshold {
            if !(0.0..=1.0).contains(&th) {
                return Err(NpError::Config(
                    "pseudo_label_threshold must be in [0, 1]".into(),
                ));
            }
        }
        Ok(())
    }

    /// Model architecture implied by this config.
    pub fn model_config(
        &self,
        encoder: EncoderConfig,
        decoder_hidden: usize,
        n_class: usize,
    ) -> ModelConfig {
        ModelConfig {
            encoder,
            r: self.r,
            d_t: self.d_t,
            d_c: self.d_c,
            decoder_hidden,
            n_class,
            t_samples: self.t_samples,
            bank_capacity: self.bank_capacity,
            aggregator: self.aggregator,
        }
    }
}

/// SGD with classic momentum: `v <- momentum * v + g`, `p <- p - lr * v`.
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    bufs: Vec<Tensor<f32>>,
    pub steps: u64,
}

impl Sgd {
    pub fn new(model: &SegModel, lr: f32, momentum: f32) -> Self {
        Sgd {
            lr,
            momentum,
            bufs: model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            steps: 0,
        }
    }

    /// Apply accumulated gradients and zero them.
    pub fn step(&mut self, model: &mut SegModel) {
        let mut params = model.params_mut();
        debug_assert_eq!(params.len(), self.bufs.len());
        for (p, buf) in params.iter_mut().zip(self.bufs.iter_mut()) {
            for i in 0..buf.numel() {
                let v = self.momentum * buf.data()[i] + p.grad.data()[i];
                buf.data_mut()[i] = v;
                p.value.data_mut()[i] -= self.lr * v;
            }
        }
        self.steps += 1;
        model.zero_grads();
    }
}

/// Argmax pseudo-labels plus uncertainty maps for an unlabeled batch, in
/// inference mode. Ties take the lowest class index; with a threshold,
/// pixels whose max probability falls below it get the ignore label.
pub fn pseudo_label(
    model: &SegModel,
    unlabeled: &[&Sample],
    threshold: Option<f32>,
    rng: &StreamRng,
) -> Result<Vec<(LabelMap, Tensor<f32>)>> {
    let mut out = Vec::with_capacity(unlabeled.len());
    for (i, s) in unlabeled.iter().enumerate() {
        let mut prng = rng.substream_n("pseudo", i as u64);
        let bundle = model.predict_cold(&s.image, &mut prng)?;
        let mut labels = bundle.argmax_labels();
        if let Some(th) = threshold {
            let (c, n) = (bundle.n_class(), labels.data.len());
            for pix in 0..n {
                let mut maxp = 0.0f32;
                for ch in 0..c {
                    maxp = maxp.max(bundle.avg_probs.data()[ch * n + pix]);
                }
                if maxp < th {
                    labels.data[pix] = IGNORE_LABEL;
                }
            }
        }
        out.push((labels, bundle.uncertainty));
    }
    Ok(out)
}

/// One self-training step over a labeled and an unlabeled batch.
///
/// Order: pseudo-label the unlabeled batch (inference mode, pre-update
/// weights), insert labeled pixels into the context banks, insert
/// labeled + unlabeled pixels into the target banks, run the training
/// forward per target image against the step's bank centers, and take an
/// SGD step on `l_c + lambda_kl * l_kl`.
pub fn train_step(
    model: &mut SegModel,
    labeled: &[&Sample],
    unlabeled: &[&Sample],
    opt: &mut Sgd,
    cfg: &TrainConfig,
    step_rng: &StreamRng,
) -> Result<LossBreakdown> {
    if labeled.is_empty() {
        return Err(NpError::Data("train_step needs a labeled batch".into()));
    }
    model.zero_grads();

    // (1) inference-mode pseudo-labels
    let pseudo = pseudo_label(
        model,
        unlabeled,
        cfg.pseudo_label_threshold,
        &step_rng.substream("pseudo"),
    )?;

    // (2)+(3) bank population from the current (pre-update) features
    let mut labeled_reduced = Vec::with_capacity(labeled.len());
    for s in labeled {
        labeled_reduced.push(model.reduced_featmap(&s.image)?);
    }
    for (s, red) in labeled.iter().zip(&labeled_reduced) {
        model.context_banks.insert_map(red, &s.mask)?;
    }
    for (s, red) in labeled.iter().zip(&labeled_reduced) {
        model.target_banks.insert_map(red, &s.mask)?;
    }
    for (s, (plabels, _)) in unlabeled.iter().zip(&pseudo) {
        let red = model.reduced_featmap(&s.image)?;
        model.target_banks.insert_map(&red, plabels)?;
    }
    drop(labeled_reduced);

    // (4)+(5) training-mode forward and loss per target image
    let centers = model.live_centers();
    let targets: Vec<(&Sample, &LabelMap)> = labeled
        .iter()
        .map(|s| (*s, &s.mask))
        .chain(unlabeled.iter().zip(&pseudo).map(|(s, (l, _))| (*s, l)))
        .collect();
    let total_pixels: usize = targets.iter().map(|(_, l)| l.valid_count()).sum();
    if total_pixels == 0 {
        return Err(NpError::LossUndefined(
            "no supervised or pseudo-labelled pixels in this step".into(),
        ));
    }
    let n_targets = targets.len();
    let mut l_c = 0.0f64;
    let mut kls = Vec::with_capacity(n_targets);
    for (idx, (sample, labels)) in targets.iter().enumerate() {
        let tape: Tape<f32> = Tape::new();
        let vars = model.bind(&tape);
        let img = tape.leaf(sample.image.clone());
        let mut erng = step_rng.substream_n("eps", idx as u64);
        let eps = draw_eps(cfg.t_samples, cfg.d_t, &mut erng);
        let fwd = model.forward_image_graph(&tape, &vars, img, &centers, &eps, true)?;

        let kl = kl_gaussian_graph(
            &tape,
            fwd.mu_target,
            fwd.var_target,
            fwd.mu_context,
            fwd.var_context,
        )?;
        let kl_val = tape.value(kl).item()?;
        kls.push(kl_val);

        let mut root_terms = Vec::new();
        let n_valid = labels.valid_count();
        let mut ce_terms = Vec::with_capacity(fwd.probs.len());
        if n_valid > 0 {
            // expected log-likelihood over the T latent samples
            let per_slice = 1.0 / fwd.probs.len() as f32;
            for &p in &fwd.probs {
                let (ce_t, _) = tape.cross_entropy(p, labels)?;
                ce_terms.push((per_slice, ce_t));
            }
            let ce = tape.linear_combination(&ce_terms)?;
            let weight = n_valid as f32 / total_pixels as f32;
            l_c += weight as f64 * tape.value(ce).item()? as f64;
            root_terms.push((weight, ce));
        }
        if cfg.lambda_kl != 0.0 {
            root_terms.push((cfg.lambda_kl / n_targets as f32, kl));
        }
        if root_terms.is_empty() {
            continue;
        }
        let root = tape.linear_combination(&root_terms)?;
        let grads = tape.backward(root)?;
        model.accumulate_grads(&vars.bound, &grads, 1.0);
    }

    let breakdown = total_loss(l_c as f32, &kls, cfg.lambda_kl, total_pixels);
    if !breakdown.total.is_finite() {
        return Err(NpError::Numeric(format!(
            "non-finite training loss: l_c={}, l_kl={}",
            breakdown.l_c, breakdown.l_kl
        )));
    }

    // (6) gradient step; grads are zeroed inside
    opt.step(model);
    Ok(breakdown)
}

/// Per-epoch log line.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_c: f32,
    pub l_kl: f32,
    pub val_miou: Option<f64>,
}

pub struct FitOutcome {
    pub model: SegModel,
    pub opt: Sgd,
    pub log: Vec<EpochLog>,
    pub epochs_done: usize,
}

/// Mean intersection-over-union of inference-mode predictions on a split.
pub fn evaluate_miou(model: &SegModel, samples: &[&Sample], rng: &StreamRng) -> Result<f64> {
    if samples.is_empty() {
        return Err(NpError::MetricUndefined("empty evaluation split".into()));
    }
    let mut cm = ConfusionMatrix::new(model.cfg.n_class);
    for (i, s) in samples.iter().enumerate() {
        let mut prng = rng.substream_n("eval", i as u64);
        let bundle = model.predict_cold(&s.image, &mut prng)?;
        cm.add(&bundle.argmax_labels(), &s.mask)?;
    }
    cm.miou()
}

/// Train a fresh model for `cfg.epochs` epochs over seeded shuffled
/// batches.
pub fn fit(
    cfg: &TrainConfig,
    encoder: EncoderConfig,
    decoder_hidden: usize,
    dataset: &Dataset,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model_config(encoder, decoder_hidden, dataset.n_class());
    let model = SegModel::new(model_cfg, &StreamRng::new(cfg.seed))?;
    let opt = Sgd::new(&model, cfg.learning_rate, cfg.momentum);
    continue_fit(cfg, model, opt, 0, dataset)
}

/// Run `cfg.epochs` further epochs on an existing model/optimizer pair
/// (the resume path). `start_epoch` keeps the epoch-level RNG streams
/// and the log numbering monotone.
pub fn continue_fit(
    cfg: &TrainConfig,
    mut model: SegModel,
    mut opt: Sgd,
    start_epoch: usize,
    dataset: &Dataset,
) -> Result<FitOutcome> {
    cfg.validate()?;
    let labeled = dataset.labeled();
    let unlabeled = dataset.unlabeled();
    let val = dataset.val();
    if labeled.is_empty() {
        return Err(NpError::Data("training needs at least 1 labeled image".into()));
    }
    let root = StreamRng::new(cfg.seed);
    let mut log = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let epoch = start_epoch + e;
        let erng = root.substream_n("epoch", epoch as u64);
        let mut lab_idx: Vec<usize> = (0..labeled.len()).collect();
        erng.substream("shuffle.labeled").shuffle(&mut lab_idx);
        let mut unl_idx: Vec<usize> = (0..unlabeled.len()).collect();
        erng.substream("shuffle.unlabeled").shuffle(&mut unl_idx);

        let steps = lab_idx.len().div_ceil(cfg.batch_labeled);
        let mut unl_cursor = 0usize;
        let (mut sum_lc, mut sum_kl) = (0.0f64, 0.0f64);
        for s in 0..steps {
            let lo = s * cfg.batch_labeled;
            let hi = (lo + cfg.batch_labeled).min(lab_idx.len());
            let batch_lab: Vec<&Sample> = lab_idx[lo..hi].iter().map(|&i| labeled[i]).collect();
            let mut batch_unl: Vec<&Sample> = Vec::new();
            if cfg.batch_unlabeled > 0 && !unl_idx.is_empty() {
                for _ in 0..cfg.batch_unlabeled {
                    batch_unl.push(unlabeled[unl_idx[unl_cursor % unl_idx.len()]]);
                    unl_cursor += 1;
                }
            }
            let bd = train_step(
                &mut model,
                &batch_lab,
                &batch_unl,
                &mut opt,
                cfg,
                &erng.substream_n("step", s as u64),
            )?;
            sum_lc += bd.l_c as f64;
            sum_kl += bd.l_kl as f64;
        }

        let val_miou = if val.is_empty() {
            None
        } else {
            Some(evaluate_miou(&model, &val, &erng.substream("val"))?)
        };
        log.push(EpochLog {
            epoch,
            l_c: (sum_lc / steps.max(1) as f64) as f32,
            l_kl: (sum_kl / steps.max(1) as f64) as f32,
            val_miou,
        });
    }
    Ok(FitOutcome {
        model,
        opt,
        log,
        epochs_done: start_epoch + cfg.epochs,
    })
}

// ---- MC-dropout baseline ----

/// The model's decoder with dropout inserted after every activation
/// layer. Uncertainty comes from `t` stochastic decoder-stack passes over
/// one assembly, against the NP head's single pass.
pub struct DropoutHead<'m> {
    pub model: &'m SegModel,
    pub rate: f32,
}

impl<'m> DropoutHead<'m> {
    pub fn new(model: &'m SegModel, rate: f32) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NpError::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        Ok(DropoutHead { model, rate })
    }

    fn masks(&self, h: usize, w: usize, rng: &mut StreamRng) -> [Tensor<f32>; 2] {
        let hidden = self.model.cfg.decoder_hidden;
        let keep = 1.0 - self.rate as f64;
        let scale = (1.0 / keep) as f32;
        let mut draw = || {
            let data: Vec<f32> = (0..hidden * h * w)
                .map(|_| if rng.coin(keep) { scale } else { 0.0 })
                .collect();
            Tensor::new(&[hidden, h, w], data).expect("mask shape")
        };
        [draw(), draw()]
    }

    /// T stochastic decoder passes with dropout active; each pass's slice
    /// maps are averaged, the passes form the bundle's sample axis.
    pub fn predict(
        &self,
        image: &Tensor<f32>,
        t_passes: usize,
        rng: &mut StreamRng,
    ) -> Result<PredictionBundle> {
        if t_passes == 0 {
            return Err(NpError::Config("mc dropout needs t >= 1".into()));
        }
        let model = self.model;
        let tape: Tape<f32> = Tape::new();
        let vars = model.bind(&tape);
        let img = tape.leaf(image.clone());
        let feat = vars.encoder.forward(&tape, img)?;
        let centers = model.inference_centers();
        let eps = draw_eps(model.cfg.t_samples, model.cfg.d_t, rng);
        let asm = model.assemble_graph(&tape, &vars, feat, &centers, &eps, true)?;
        let (h, w) = (asm.assembled_extents[2], asm.assembled_extents[3]);

        let mut pass_maps = Vec::with_capacity(t_passes);
        for _ in 0..t_passes {
            let masks = self.masks(h, w, rng);
            let probs = model.decode_stack(&tape, &vars, &asm.slices, Some(&masks))?;
            // average the slice maps of this stochastic pass
            let n = model.cfg.n_class * h * w;
            let mut avg = vec![0.0f32; n];
            for &p in &probs {
                for (a, &v) in avg.iter_mut().zip(tape.value(p).data()) {
                    *a += v;
                }
            }
            let inv = 1.0 / probs.len() as f32;
            for a in &mut avg {
                *a *= inv;
            }
            pass_maps.push(Tensor::new(&[model.cfg.n_class, h, w], avg)?);
        }
        PredictionBundle::from_probs(&pass_maps)
    }
}

// ---- checkpoint persistence ----

const CHECKPOINT_MAGIC: &[u8; 4] = b"NPCK";
const CHECKPOINT_VERSION: u16 = 1;

/// Decoded checkpoint: config echo, progress counters, flat parameter
/// stream, and the appended center snapshot.
pub struct CheckpointData {
    pub config_echo: String,
    pub steps: u64,
    pub epochs: u64,
    pub values: Vec<f32>,
    pub snapshot: CenterSnapshot,
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    model: &SegModel,
    config_echo: &str,
    steps: u64,
    epochs: u64,
) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let echo = config_echo.as_bytes();
    w.write_all(&(echo.len() as u32).to_le_bytes())?;
    w.write_all(echo)?;
    w.write_all(&steps.to_le_bytes())?;
    w.write_all(&epochs.to_le_bytes())?;
    let total: usize = model.params().iter().map(|p| p.value.numel()).sum();
    w.write_all(&(total as u64).to_le_bytes())?;
    for p in model.params() {
        for &v in p.value.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    model.export_centers().write_to(&mut w)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<CheckpointData> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NpError::Format("not a checkpoint (bad magic)".into()));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let version = u16::from_le_bytes(b2);
    if version != CHECKPOINT_VERSION {
        return Err(NpError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let echo_len = u32::from_le_bytes(b4) as usize;
    let mut echo = vec![0u8; echo_len];
    r.read_exact(&mut echo)?;
    let config_echo = String::from_utf8(echo)
        .map_err(|_| NpError::Format("checkpoint config echo is not UTF-8".into()))?;
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let steps = u64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let epochs = u64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let total = u64::from_le_bytes(b8) as usize;
    let mut values = Vec::with_capacity(total);
    for _ in 0..total {
        r.read_exact(&mut b4)?;
        values.push(f32::from_le_bytes(b4));
    }
    let snapshot = CenterSnapshot::read_from(&mut r)?;
    Ok(CheckpointData {
        config_echo,
        steps,
        epochs,
        values,
        snapshot,
    })
}

/// Overwrite a freshly constructed model's parameters and centers from
/// checkpoint data.
pub fn apply_checkpoint(model: &mut SegModel, data: &CheckpointData) -> Result<()> {
    let total: usize = model.params().iter().map(|p| p.value.numel()).sum();
    if total != data.values.len() {
        return Err(NpError::Format(format!(
            "checkpoint holds {} parameter values, model needs {total}",
            data.values.len()
        )));
    }
    let mut off = 0;
    for p in model.params_mut() {
        let n = p.value.numel();
        p.value
            .data_mut()
            .copy_from_slice(&data.values[off..off + n]);
        off += n;
    }
    model.import_centers(data.snapshot.clone())?;
    Ok(())
}
