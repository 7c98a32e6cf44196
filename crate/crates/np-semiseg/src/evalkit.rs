//! Metrics (mIoU, PAvPU), sliding-window evaluation, and the
//! uncertainty-cost benchmark.

use crate::model::{PredictionBundle, SegModel};
use crate::rng::StreamRng;
use crate::tensor::Tensor;
use crate::trainer::DropoutHead;
use crate::{LabelMap, NpError, Result, IGNORE_LABEL};
use std::time::Instant;

/// Per-class hit counts; ignore-labelled truth pixels are excluded.
#[derive(Debug, Clone)]
pub struct ConfusionMatrix {
    pub n_class: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_class: usize) -> Self {
        ConfusionMatrix {
            n_class,
            counts: vec![0; n_class * n_class],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.h != truth.h || pred.w != truth.w {
            return Err(NpError::Shape(format!(
                "confusion: pred {}x{} vs truth {}x{}",
                pred.h, pred.w, truth.h, truth.w
            )));
        }
        for (&p, &t) in pred.data.iter().zip(&truth.data) {
            if t == IGNORE_LABEL {
                continue;
            }
            if t as usize >= self.n_class || p as usize >= self.n_class {
                return Err(NpError::Data(format!(
                    "label out of range: pred {p}, truth {t}, {} classes",
                    self.n_class
                )));
            }
            self.counts[t as usize * self.n_class + p as usize] += 1;
        }
        Ok(())
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n_class + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Mean over classes of TP / (TP + FP + FN); classes that never occur
    /// (zero union) are excluded from the mean.
    pub fn miou(&self) -> Result<f64> {
        let mut sum = 0.0;
        let mut used = 0usize;
        for c in 0..self.n_class {
            let tp = self.count(c, c);
            let fp: u64 = (0..self.n_class)
                .filter(|&t| t != c)
                .map(|t| self.count(t, c))
                .sum();
            let fn_: u64 = (0..self.n_class)
                .filter(|&p| p != c)
                .map(|p| self.count(c, p))
                .sum();
            let union = tp + fp + fn_;
            if union == 0 {
                continue;
            }
            sum += tp as f64 / union as f64;
            used += 1;
        }
        if used == 0 {
            return Err(NpError::MetricUndefined(
                "confusion matrix is empty".into(),
            ));
        }
        Ok(sum / used as f64)
    }
}

/// PAvPU parameters. `uncertainty_threshold` applies to entropy
/// normalized by ln(n_class), so the same threshold is comparable across
/// class counts.
#[derive(Debug, Clone, PartialEq)]
pub struct PavpuConfig {
    pub window: usize,
    pub uncertainty_threshold: f64,
    pub accuracy_fraction: f64,
}

impl Default for PavpuConfig {
    fn default() -> Self {
        PavpuConfig {
            window: 4,
            uncertainty_threshold: 0.4,
            accuracy_fraction: 0.5,
        }
    }
}

impl PavpuConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 {
            return Err(NpError::Config("pavpu window must be >= 1".into()));
        }
        if self.uncertainty_threshold < 0.0 {
            return Err(NpError::Config("pavpu threshold must be >= 0".into()));
        }
        if !(0.0 < self.accuracy_fraction && self.accuracy_fraction <= 1.0) {
            return Err(NpError::Config(
                "pavpu accuracy fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Patch classification tallies; summable across images.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PavpuCounts {
    pub accurate_certain: u64,
    pub accurate_uncertain: u64,
    pub inaccurate_certain: u64,
    pub inaccurate_uncertain: u64,
}

impl PavpuCounts {
    pub fn total(&self) -> u64 {
        self.accurate_certain
            + self.accurate_uncertain
            + self.inaccurate_certain
            + self.inaccurate_uncertain
    }

    pub fn merge(&mut self, other: &PavpuCounts) {
        self.accurate_certain += other.accurate_certain;
        self.accurate_uncertain += other.accurate_uncertain;
        self.inaccurate_certain += other.inaccurate_certain;
        self.inaccurate_uncertain += other.inaccurate_uncertain;
    }

    /// (accurate-certain + inaccurate-uncertain) / all patches.
    pub fn ratio(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (self.accurate_certain + self.inaccurate_uncertain) as f64 / total as f64
    }
}

/// Tile into `w x w` patches (padding with ignore where extents do not
/// divide). A patch is accurate when at least `accuracy_fraction` of its
/// valid pixels are correct, certain when its mean uncertainty over
/// in-image pixels is below the threshold. Patches with no valid pixels
/// are skipped.
pub fn pavpu_counts(
    pred: &LabelMap,
    truth: &LabelMap,
    uncertainty: &Tensor<f32>,
    cfg: &PavpuConfig,
) -> Result<PavpuCounts> {
    cfg.validate()?;
    let (h, w) = (truth.h, truth.w);
    if pred.h != h || pred.w != w {
        return Err(NpError::Shape("pavpu: pred/truth extents differ".into()));
    }
    if uncertainty.shape() != [h, w] {
        return Err(NpError::Shape(format!(
            "pavpu: uncertainty shape {:?} vs {h}x{w}",
            uncertainty.shape()
        )));
    }
    let k = cfg.window;
    let tiles_y = h.div_ceil(k);
    let tiles_x = w.div_ceil(k);
    let mut counts = PavpuCounts::default();
    for ty in 0..tiles_y {
        for tx in 0..tiles_x {
            let mut valid = 0u64;
            let mut correct = 0u64;
            let mut usum = 0.0f64;
            let mut ucount = 0u64;
            for dy in 0..k {
                for dx in 0..k {
                    let (y, x) = (ty * k + dy, tx * k + dx);
                    if y >= h || x >= w {
                        continue; // ignore padding
                    }
                    usum += uncertainty.data()[y * w + x] as f64;
                    ucount += 1;
                    let t = truth.at(y, x);
                    if t == IGNORE_LABEL {
                        continue;
                    }
                    valid += 1;
                    if pred.at(y, x) == t {
                        correct += 1;
                    }
                }
            }
            if valid == 0 {
                continue;
            }
            let accurate = correct as f64 >= cfg.accuracy_fraction * valid as f64;
            let certain = usum / ucount as f64 - cfg.uncertainty_threshold < 0.0;
            match (accurate, certain) {
                (true, true) => counts.accurate_certain += 1,
                (true, false) => counts.accurate_uncertain += 1,
                (false, true) => counts.inaccurate_certain += 1,
                (false, false) => counts.inaccurate_uncertain += 1,
            }
        }
    }
    Ok(counts)
}

/// Patch accuracy vs patch uncertainty for a single image.
pub fn pavpu(
    pred: &LabelMap,
    truth: &LabelMap,
    uncertainty: &Tensor<f32>,
    cfg: &PavpuConfig,
) -> Result<f64> {
    Ok(pavpu_counts(pred, truth, uncertainty, cfg)?.ratio())
}

/// Window start offsets along one axis:
/// `ceil((size - crop) / stride) + 1` windows, the last clamped flush
/// with the far edge.
pub fn window_starts(size: usize, crop: usize, stride: usize) -> Vec<usize> {
    if crop >= size {
        return vec![0];
    }
    let r = (size - crop).div_ceil(stride) + 1;
    (0..r).map(|i| (i * stride).min(size - crop)).collect()
}

fn crop_image(image: &Tensor<f32>, y0: usize, x0: usize, crop: usize) -> Tensor<f32> {
    let (c, _h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let n = image.shape()[1] * w;
    let mut out = vec![0.0f32; c * crop * crop];
    for ch in 0..c {
        for y in 0..crop {
            let src = ch * n + (y0 + y) * w + x0;
            let dst = (ch * crop + y) * crop;
            out[dst..dst + crop].copy_from_slice(&image.data()[src..src + crop]);
        }
    }
    Tensor::new(&[c, crop, crop], out).expect("crop shape")
}

/// Stitch per-window bundles into a full-image bundle: per-sample
/// probabilities are averaged over covering windows and renormalized,
/// the average and its entropy are recomputed from the stitched maps.
fn stitch_windows(
    h: usize,
    w: usize,
    crop: usize,
    windows: &[(usize, usize, PredictionBundle)],
) -> Result<PredictionBundle> {
    let first = &windows[0].2;
    let t = first.per_sample_probs.shape()[0];
    let c = first.per_sample_probs.shape()[1];
    let n = h * w;
    let mut sums = vec![0.0f64; t * c * n];
    let mut cover = vec![0u32; n];
    for (y0, x0, b) in windows {
        let bn = crop * crop;
        for y in 0..crop {
            for x in 0..crop {
                let pix = (y0 + y) * w + (x0 + x);
                cover[pix] += 1;
                for ti in 0..t {
                    for ch in 0..c {
                        sums[(ti * c + ch) * n + pix] +=
                            b.per_sample_probs.data()[(ti * c + ch) * bn + y * crop + x] as f64;
                    }
                }
            }
        }
    }
    if cover.iter().any(|&v| v == 0) {
        return Err(NpError::Coverage(
            "sliding windows leave pixels uncovered".into(),
        ));
    }
    let mut per_sample = Vec::with_capacity(t);
    for ti in 0..t {
        let mut map = vec![0.0f32; c * n];
        for pix in 0..n {
            let mut z = 0.0f64;
            for ch in 0..c {
                z += sums[(ti * c + ch) * n + pix];
            }
            for ch in 0..c {
                map[ch * n + pix] = (sums[(ti * c + ch) * n + pix] / z) as f32;
            }
        }
        per_sample.push(Tensor::new(&[c, h, w], map)?);
    }
    PredictionBundle::from_probs(&per_sample)
}

/// Overlapping-window inference over a large image. Windows consume the
/// rng stream in scan order, so a single full-size window replays exactly
/// the draws of a direct forward.
pub fn sliding_eval(
    model: &SegModel,
    image: &Tensor<f32>,
    crop: usize,
    stride: usize,
    rng: &mut StreamRng,
) -> Result<PredictionBundle> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if crop > h || crop > w {
        return Err(NpError::Coverage(format!(
            "crop {crop} exceeds image extents {h}x{w}"
        )));
    }
    if stride == 0 || stride > crop {
        return Err(NpError::Coverage(format!(
            "stride {stride} must be in [1, crop {crop}]"
        )));
    }
    let mut windows = Vec::new();
    for &y0 in &window_starts(h, crop, stride) {
        for &x0 in &window_starts(w, crop, stride) {
            let sub = crop_image(image, y0, x0, crop);
            let bundle = model.predict_cold(&sub, rng)?;
            windows.push((y0, x0, bundle));
        }
    }
    stitch_windows(h, w, crop, &windows)
}

/// Sliding evaluation with the MC-dropout baseline: `t_passes` stochastic
/// decoder passes per window.
pub fn sliding_eval_mc(
    head: &DropoutHead,
    image: &Tensor<f32>,
    t_passes: usize,
    crop: usize,
    stride: usize,
    rng: &mut StreamRng,
) -> Result<PredictionBundle> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if crop > h || crop > w {
        return Err(NpError::Coverage(format!(
            "crop {crop} exceeds image extents {h}x{w}"
        )));
    }
    if stride == 0 || stride > crop {
        return Err(NpError::Coverage(format!(
            "stride {stride} must be in [1, crop {crop}]"
        )));
    }
    let mut windows = Vec::new();
    for &y0 in &window_starts(h, crop, stride) {
        for &x0 in &window_starts(w, crop, stride) {
            let sub = crop_image(image, y0, x0, crop);
            let bundle = head.predict(&sub, t_passes, rng)?;
            windows.push((y0, x0, bundle));
        }
    }
    stitch_windows(h, w, crop, &windows)
}

/// One row of the uncertainty-cost comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub t: usize,
    pub wall_ms_np: f64,
    pub wall_ms_mc: f64,
    /// decoder-stack passes per image under sliding eval
    pub passes_np: u64,
    pub passes_mc: u64,
    pub repeats: usize,
    pub warn_single_repeat: bool,
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Wall-clock and pass-count comparison of the single-pass NP
/// uncertainty path against MC dropout with `t` stochastic passes, under
/// sliding evaluation. The NP cost does not depend on `t`; it is
/// measured once and reported on every row.
#[allow(clippy::too_many_arguments)]
pub fn benchmark_uncertainty(
    model: &SegModel,
    dropout_rate: f32,
    images: &[Tensor<f32>],
    t_list: &[usize],
    repeats: usize,
    crop: usize,
    stride: usize,
    rng: &StreamRng,
) -> Result<Vec<BenchRow>> {
    if images.is_empty() || t_list.is_empty() || repeats == 0 {
        return Err(NpError::Config(
            "benchmark needs images, a T list, and repeats >= 1".into(),
        ));
    }
    let head = DropoutHead::new(model, dropout_rate)?;
    let per_image = |total_ms: f64| total_ms / images.len() as f64;

    // NP path: timing is independent of the MC ensemble size
    model.reset_decoder_passes();
    let mut np_times = Vec::with_capacity(repeats);
    for rep in 0..repeats {
        let mut r = rng.substream_n("bench.np", rep as u64);
        let t0 = Instant::now();
        for img in images {
            sliding_eval(model, img, crop, stride, &mut r)?;
        }
        np_times.push(per_image(t0.elapsed().as_secs_f64() * 1e3));
    }
    let passes_np = model.decoder_pass_count() / (repeats as u64 * images.len() as u64);
    let wall_ms_np = median(&mut np_times);

    let mut rows = Vec::with_capacity(t_list.len());
    for &t in t_list {
        if t == 0 {
            return Err(NpError::Config("benchmark T values must be >= 1".into()));
        }
        model.reset_decoder_passes();
        let mut mc_times = Vec::with_capacity(repeats);
        for rep in 0..repeats {
            let mut r = rng.substream_n(&format!("bench.mc{t}"), rep as u64);
            let t0 = Instant::now();
            for img in images {
                sliding_eval_mc(&head, img, t, crop, stride, &mut r)?;
            }
            mc_times.push(per_image(t0.elapsed().as_secs_f64() * 1e3));
        }
        let passes_mc = model.decoder_pass_count() / (repeats as u64 * images.len() as u64);
        rows.push(BenchRow {
            t,
            wall_ms_np,
            wall_ms_mc: median(&mut mc_times),
            passes_np,
            passes_mc,
            repeats,
            warn_single_repeat: repeats == 1,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(h: usize, w: usize, data: Vec<u8>) -> LabelMap {
        LabelMap::new(h, w, data).unwrap()
    }

    #[test]
    fn miou_perfect_and_disjoint() {
        let truth = labels(2, 2, vec![0, 0, 1, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&truth, &truth).unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0);

        let mut cm2 = ConfusionMatrix::new(2);
        let flipped = labels(2, 2, vec![1, 1, 0, 0]);
        cm2.add(&flipped, &truth).unwrap();
        assert_eq!(cm2.miou().unwrap(), 0.0);
    }

    #[test]
    fn miou_hand_confusion_count() {
        // truth [0,0;1,1], pred [0,1;1,1]: IoU0 = 1/2, IoU1 = 2/3
        let truth = labels(2, 2, vec![0, 0, 1, 1]);
        let pred = labels(2, 2, vec![0, 1, 1, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&pred, &truth).unwrap();
        let expect = (0.5 + 2.0 / 3.0) / 2.0;
        assert!((cm.miou().unwrap() - expect).abs() < 1e-12);
        assert!((expect - 7.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn miou_excludes_absent_classes_and_rejects_empty() {
        let truth = labels(1, 2, vec![0, 0]);
        let pred = labels(1, 2, vec![0, 0]);
        let mut cm = ConfusionMatrix::new(5);
        cm.add(&pred, &truth).unwrap();
        assert_eq!(cm.miou().unwrap(), 1.0); // only class 0 participates

        let empty = ConfusionMatrix::new(3);
        assert!(matches!(
            empty.miou(),
            Err(NpError::MetricUndefined(_))
        ));
    }

    #[test]
    fn miou_invariant_under_consistent_relabeling() {
        let truth = labels(2, 4, vec![0, 1, 2, 0, 1, 2, 2, 0]);
        let pred = labels(2, 4, vec![0, 2, 2, 1, 1, 2, 0, 0]);
        let mut a = ConfusionMatrix::new(3);
        a.add(&pred, &truth).unwrap();
        // relabel 0->2, 1->0, 2->1 in both
        let relab = |m: &LabelMap| {
            labels(
                m.h,
                m.w,
                m.data.iter().map(|&v| (v + 2) % 3).collect(),
            )
        };
        let mut b = ConfusionMatrix::new(3);
        b.add(&relab(&pred), &relab(&truth)).unwrap();
        assert!((a.miou().unwrap() - b.miou().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn pavpu_extremes() {
        let cfg = PavpuConfig {
            window: 2,
            ..PavpuConfig::default()
        };
        let truth = labels(4, 4, vec![0; 16]);
        let pred = labels(4, 4, vec![0; 16]);
        let certain = Tensor::zeros(&[4, 4]);
        assert_eq!(pavpu(&pred, &truth, &certain, &cfg).unwrap(), 1.0);

        let uncertain = Tensor::full(&[4, 4], 0.9);
        assert_eq!(pavpu(&pred, &truth, &uncertain, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn pavpu_hand_patch_case() {
        // 4x4, w=2: patches A,B accurate+certain, C inaccurate+uncertain,
        // D accurate+uncertain -> (2 + 1) / 4
        let truth = labels(4, 4, vec![0; 16]);
        let mut pred_data = vec![0u8; 16];
        // patch C = rows 2-3, cols 0-1: make < half correct
        pred_data[8] = 1;
        pred_data[9] = 1;
        pred_data[12] = 1;
        let pred = labels(4, 4, pred_data);
        let mut unc = vec![0.0f32; 16];
        for y in 2..4 {
            for x in 0..4 {
                unc[y * 4 + x] = 0.9; // bottom row of patches uncertain
            }
        }
        let cfg = PavpuConfig {
            window: 2,
            ..PavpuConfig::default()
        };
        let u = Tensor::new(&[4, 4], unc).unwrap();
        let counts = pavpu_counts(&pred, &truth, &u, &cfg).unwrap();
        assert_eq!(counts.accurate_certain, 2);
        assert_eq!(counts.inaccurate_uncertain, 1);
        assert_eq!(counts.accurate_uncertain, 1);
        assert!((pavpu(&pred, &truth, &u, &cfg).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn pavpu_matches_relabeled() {
        let truth = labels(4, 4, (0..16).map(|i| (i % 3) as u8).collect());
        let pred = labels(4, 4, (0..16).map(|i| ((i + 1) % 3) as u8).collect());
        let u = Tensor::full(&[4, 4], 0.3);
        let cfg = PavpuConfig {
            window: 2,
            ..PavpuConfig::default()
        };
        let a = pavpu(&pred, &truth, &u, &cfg).unwrap();
        let relab = |m: &LabelMap| {
            labels(m.h, m.w, m.data.iter().map(|&v| (v + 1) % 3).collect())
        };
        let b = pavpu(&relab(&pred), &relab(&truth), &u, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn window_start_arithmetic() {
        // size 8, crop 4, stride 2 -> 3 windows per axis
        assert_eq!(window_starts(8, 4, 2), vec![0, 2, 4]);
        assert_eq!(window_starts(8, 8, 4), vec![0]);
        // non-divisible: last window clamps flush
        assert_eq!(window_starts(9, 4, 2), vec![0, 2, 4, 5]);
        // formula: r = ceil((size - crop) / stride) + 1
        assert_eq!(window_starts(9, 4, 2).len(), (9 - 4 + 1) / 2 + 1);
    }

    #[test]
    fn every_pixel_covered_for_random_geometries() {
        let mut rng = StreamRng::new(19);
        for _ in 0..20 {
            let size = 8 + rng.below(24);
            let crop = 4 + rng.below(size - 4);
            let stride = 1 + rng.below(crop);
            let starts = window_starts(size, crop, stride);
            let mut covered = vec![false; size];
            for &s in &starts {
                for x in s..s + crop {
                    covered[x] = true;
                }
            }
            assert!(
                covered.iter().all(|&c| c),
                "uncovered pixel: size {size} crop {crop} stride {stride}"
            );
        }
    }
}
