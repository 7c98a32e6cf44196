//! Deterministic synthetic segmentation data with scene-dependent class
//! priors: each scene type allows only a subset of the foreground classes,
//! so different images carry genuinely different prior label
//! distributions. Class 0 is always background.

use crate::imageio;
use crate::rng::StreamRng;
use crate::tensor::Tensor;
use crate::{LabelMap, NpError, Result};
use std::fmt;
use std::path::Path;

/// Pixel noise applied to generated images before 8-bit quantization.
const PIXEL_NOISE_SIGMA: f64 = 0.05;
const PLACEMENT_RETRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Labeled,
    Unlabeled,
    Val,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Val => "val",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "labeled" => Ok(Split::Labeled),
            "unlabeled" => Ok(Split::Unlabeled),
            "val" => Ok(Split::Val),
            other => Err(NpError::Format(format!("unknown split '{other}'"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Rect,
    Cross,
}

/// Which classes a scene type may contain and how it looks.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub scene_type: usize,
    pub allowed: Vec<u8>,
    pub background: [f32; 3],
}

/// One image with its mask and provenance.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: LabelMap,
    pub scene_type: usize,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub k_classes: usize,
    pub n_scene_types: usize,
    pub h: usize,
    pub w: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Foreground classes plus background.
    pub fn n_class(&self) -> usize {
        self.k_classes + 1
    }

    pub fn split(&self, s: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|x| x.split == s).collect()
    }

    pub fn labeled(&self) -> Vec<&Sample> {
        self.split(Split::Labeled)
    }

    pub fn unlabeled(&self) -> Vec<&Sample> {
        self.split(Split::Unlabeled)
    }

    pub fn val(&self) -> Vec<&Sample> {
        self.split(Split::Val)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
    pub h: usize,
    pub w: usize,
    pub k_classes: usize,
    pub n_scene_types: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            n_labeled: 32,
            n_unlabeled: 256,
            n_val: 64,
            h: 32,
            w: 32,
            k_classes: 3,
            n_scene_types: 2,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_classes < 2 {
            return Err(NpError::Config("k_classes must be at least 2".into()));
        }
        if self.h < 8 || self.w < 8 {
            return Err(NpError::Config("image extents must be at least 8".into()));
        }
        if self.n_scene_types == 0 {
            return Err(NpError::Config("need at least one scene type".into()));
        }
        if self.n_labeled == 0 && self.n_val == 0 && self.n_unlabeled == 0 {
            return Err(NpError::Config("dataset would be empty".into()));
        }
        Ok(())
    }
}

/// Appearance used when painting a class into generated images. Classes
/// 2 and 3 deliberately share one appearance: with the default two-scene
/// setup they never co-occur, so telling them apart requires image-level
/// context (is the scene-0 marker present anywhere?), not local texture.
pub fn class_color(class: u8) -> [f32; 3] {
    const EXTRA: [[f32; 3]; 4] = [
        [0.85, 0.75, 0.25],
        [0.75, 0.30, 0.80],
        [0.30, 0.80, 0.80],
        [0.25, 0.75, 0.30],
    ];
    match class {
        0 => [0.0, 0.0, 0.0],
        1 => [0.85, 0.25, 0.25],
        2 | 3 => [0.25, 0.35, 0.85],
        c => EXTRA[((c - 4) % 4) as usize],
    }
}

/// Distinct colors for rendering predictions (unlike [`class_color`],
/// which intentionally aliases the ambiguous classes).
pub fn render_palette(class: u8) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 6] = [
        [0.85, 0.25, 0.25],
        [0.25, 0.75, 0.30],
        [0.25, 0.35, 0.85],
        [0.85, 0.75, 0.25],
        [0.75, 0.30, 0.80],
        [0.30, 0.80, 0.80],
    ];
    if class == 0 {
        return [0.0, 0.0, 0.0];
    }
    PALETTE[((class - 1) % 6) as usize]
}

/// Scene definitions. The background is identical across scenes, so the
/// scene type is only visible through which classes occur.
///
/// With at least 3 classes and 2 scene types: scene 0 carries the marker
/// class 1 plus class 2, scene 1 carries class 3 alone, and classes 2/3
/// share one appearance, so their labels hinge on whether the marker is
/// somewhere in the image. Further classes (4..) alternate between
/// scenes with distinct appearances; degenerate configurations fall back
/// to a round-robin assignment.
pub fn scene_specs(k_classes: usize, n_scene_types: usize) -> Vec<SceneSpec> {
    const BACKGROUND: [f32; 3] = [0.45, 0.45, 0.42];
    let mut allowed: Vec<Vec<u8>> = vec![Vec::new(); n_scene_types];
    if k_classes >= 3 && n_scene_types >= 2 {
        allowed[0].push(1);
        allowed[0].push(2);
        allowed[1].push(3);
        for c in 4..=k_classes {
            allowed[(c - 4) % n_scene_types].push(c as u8);
        }
    } else {
        for c in 1..=k_classes {
            allowed[(c - 1) % n_scene_types].push(c as u8);
        }
    }
    for (s, set) in allowed.iter_mut().enumerate() {
        if set.is_empty() {
            set.push(((s % k_classes) + 1) as u8);
        }
    }
    allowed
        .into_iter()
        .enumerate()
        .map(|(s, allowed)| SceneSpec {
            scene_type: s,
            allowed,
            background: BACKGROUND,
        })
        .collect()
}

fn shape_for_class(class: u8) -> ShapeKind {
    match class {
        1 => ShapeKind::Disk,
        2 | 3 => ShapeKind::Rect,
        c => match (c - 1) % 3 {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Rect,
            _ => ShapeKind::Cross,
        },
    }
}

/// Paint one shape into the mask; returns touched pixel indices.
fn paint_shape(
    mask: &mut [u8],
    h: usize,
    w: usize,
    kind: ShapeKind,
    class: u8,
    rng: &mut StreamRng,
) {
    let min_ext = h.min(w);
    match kind {
        ShapeKind::Disk => {
            let r = 2 + rng.below((min_ext / 4).max(1));
            let cy = r + rng.below((h - 2 * r).max(1));
            let cx = r + rng.below((w - 2 * r).max(1));
            for y in cy.saturating_sub(r)..(cy + r + 1).min(h) {
                for x in cx.saturating_sub(r)..(cx + r + 1).min(w) {
                    let (dy, dx) = (y as isize - cy as isize, x as isize - cx as isize);
                    if dy * dy + dx * dx <= (r * r) as isize {
                        mask[y * w + x] = class;
                    }
                }
            }
        }
        ShapeKind::Rect => {
            let rh = 3 + rng.below((h / 3).max(1));
            let rw = 3 + rng.below((w / 3).max(1));
            let y0 = rng.below((h - rh).max(1));
            let x0 = rng.below((w - rw).max(1));
            for y in y0..(y0 + rh).min(h) {
                for x in x0..(x0 + rw).min(w) {
                    mask[y * w + x] = class;
                }
            }
        }
        ShapeKind::Cross => {
            let arm = 2 + rng.below((min_ext / 4).max(1));
            let cy = arm + rng.below((h - 2 * arm).max(1));
            let cx = arm + rng.below((w - 2 * arm).max(1));
            for d in 0..=(2 * arm) {
                let y = cy + d - arm;
                if y < h {
                    mask[y * w + cx] = class;
                    if cx + 1 < w {
                        mask[y * w + cx + 1] = class;
                    }
                }
                let x = cx + d - arm;
                if x < w {
                    mask[cy * w + x] = class;
                    if cy + 1 < h {
                        mask[(cy + 1) * w + x] = class;
                    }
                }
            }
        }
    }
}

fn class_present(mask: &[u8], class: u8) -> bool {
    mask.iter().any(|&m| m == class)
}

/// Generate one sample from its own substream.
fn generate_sample(
    cfg: &GenConfig,
    scenes: &[SceneSpec],
    split: Split,
    rng: &mut StreamRng,
) -> Result<Sample> {
    let (h, w) = (cfg.h, cfg.w);
    let scene_type = rng.below(cfg.n_scene_types);
    let scene = &scenes[scene_type];
    let mut mask = vec![0u8; h * w];
    let mut placed: Vec<u8> = Vec::new();

    for &class in &scene.allowed {
        let n_shapes = 1 + rng.below(2);
        for _ in 0..n_shapes {
            let mut ok = false;
            for _attempt in 0..PLACEMENT_RETRIES {
                let mut candidate = mask.clone();
                paint_shape(&mut candidate, h, w, shape_for_class(class), class, rng);
                // a placement may not fully occlude any class already placed
                if placed.iter().all(|&p| class_present(&candidate, p)) {
                    mask = candidate;
                    ok = true;
                    break;
                }
            }
            if !ok {
                return Err(NpError::Generation(format!(
                    "could not place class {class} without occluding earlier shapes"
                )));
            }
        }
        placed.push(class);
    }

    // render: background + class colors, then noise, then 8-bit snap
    let n = h * w;
    let mut image = vec![0.0f32; 3 * n];
    for pix in 0..n {
        let color = if mask[pix] == 0 {
            scene.background
        } else {
            class_color(mask[pix])
        };
        for c in 0..3 {
            image[c * n + pix] = color[c];
        }
    }
    for v in image.iter_mut() {
        let noisy = *v as f64 + PIXEL_NOISE_SIGMA * rng.normal();
        *v = ((noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0) as f32;
    }

    Ok(Sample {
        image: Tensor::new(&[3, h, w], image)?,
        mask: LabelMap::new(h, w, mask)?,
        scene_type,
        split,
    })
}

/// Deterministic dataset generation; per-sample substreams make the
/// result independent of generation order.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let scenes = scene_specs(cfg.k_classes, cfg.n_scene_types);
    let root = StreamRng::new(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.n_labeled + cfg.n_unlabeled + cfg.n_val);
    let plan = [
        (Split::Labeled, cfg.n_labeled),
        (Split::Unlabeled, cfg.n_unlabeled),
        (Split::Val, cfg.n_val),
    ];
    for (split, count) in plan {
        for i in 0..count {
            let mut srng = root.substream_n(&format!("sample.{split}"), i as u64);
            samples.push(generate_sample(cfg, &scenes, split, &mut srng)?);
        }
    }
    Ok(Dataset {
        k_classes: cfg.k_classes,
        n_scene_types: cfg.n_scene_types,
        h: cfg.h,
        w: cfg.w,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugmentStrength {
    Weak,
    Strong,
}

fn hflip_image(img: &Tensor<f32>) -> Tensor<f32> {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let n = h * w;
    let mut out = vec![0.0f32; c * n];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[ch * n + y * w + x] = img.data()[ch * n + y * w + (w - 1 - x)];
            }
        }
    }
    Tensor::new(&[c, h, w], out).expect("flip shape")
}

fn hflip_mask(m: &LabelMap) -> LabelMap {
    let mut data = vec![0u8; m.data.len()];
    for y in 0..m.h {
        for x in 0..m.w {
            data[y * m.w + x] = m.data[y * m.w + (m.w - 1 - x)];
        }
    }
    LabelMap {
        h: m.h,
        w: m.w,
        data,
    }
}

/// Weak: horizontal flip with probability 0.5. Strong: the weak flip plus
/// brightness jitter (+-0.2) and extra pixel noise. The mask only follows
/// the geometric part.
pub fn augment(sample: &Sample, strength: AugmentStrength, rng: &mut StreamRng) -> Sample {
    let flip = rng.coin(0.5);
    let mut image = if flip {
        hflip_image(&sample.image)
    } else {
        sample.image.clone()
    };
    let mask = if flip {
        hflip_mask(&sample.mask)
    } else {
        sample.mask.clone()
    };
    if strength == AugmentStrength::Strong {
        let delta = rng.uniform_f32(-0.2, 0.2);
        for v in image.data_mut() {
            *v = (*v + delta).clamp(0.0, 1.0);
        }
        let mut noisy = image.into_data();
        for v in noisy.iter_mut() {
            *v = (*v as f64 + PIXEL_NOISE_SIGMA * rng.normal()).clamp(0.0, 1.0) as f32;
        }
        image = Tensor::new(sample.image.shape(), noisy).expect("augment shape");
    }
    Sample {
        image,
        mask,
        scene_type: sample.scene_type,
        split: sample.split,
    }
}

// ---- on-disk layout ----

const MANIFEST_NAME: &str = "manifest.txt";

/// Write images as PPM, masks as PGM, plus a manifest line per sample:
/// `<image path> <split> <scene_type>`.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str(&format!(
        "# npss-manifest v1 k={} scenes={} h={} w={}\n",
        ds.k_classes, ds.n_scene_types, ds.h, ds.w
    ));
    let mut counters = std::collections::BTreeMap::new();
    for s in &ds.samples {
        let idx = counters.entry(s.split.as_str()).or_insert(0usize);
        let stem = format!("{}_{:04}", s.split.as_str(), idx);
        *idx += 1;
        imageio::write_ppm(&dir.join(format!("{stem}.ppm")), &s.image)?;
        imageio::write_pgm(&dir.join(format!("{stem}.pgm")), &s.mask)?;
        manifest.push_str(&format!("{stem}.ppm {} {}\n", s.split, s.scene_type));
    }
    std::fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let mut header: Option<(usize, usize, usize, usize)> = None;
    let mut samples = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if rest.trim_start().starts_with("npss-manifest") {
                let mut k = None;
                let mut s = None;
                let mut h = None;
                let mut w = None;
                for tok in rest.split_whitespace() {
                    if let Some((key, val)) = tok.split_once('=') {
                        let v: usize = val.parse().map_err(|_| {
                            NpError::Format(format!("bad manifest header value '{tok}'"))
                        })?;
                        match key {
                            "k" => k = Some(v),
                            "scenes" => s = Some(v),
                            "h" => h = Some(v),
                            "w" => w = Some(v),
                            _ => {}
                        }
                    }
                }
                header = Some((
                    k.ok_or_else(|| NpError::Format("manifest header missing k=".into()))?,
                    s.ok_or_else(|| NpError::Format("manifest header missing scenes=".into()))?,
                    h.ok_or_else(|| NpError::Format("manifest header missing h=".into()))?,
                    w.ok_or_else(|| NpError::Format("manifest header missing w=".into()))?,
                ));
            }
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(NpError::Format(format!(
                "manifest line needs 'path split scene_type': '{line}'"
            )));
        }
        let image_path = dir.join(parts[0]);
        let mask_path = image_path.with_extension("pgm");
        let split = Split::parse(parts[1])?;
        let scene_type: usize = parts[2]
            .parse()
            .map_err(|_| NpError::Format(format!("bad scene_type in '{line}'")))?;
        samples.push(Sample {
            image: imageio::read_ppm(&image_path)?,
            mask: imageio::read_pgm(&mask_path)?,
            scene_type,
            split,
        });
    }
    let (k, s, h, w) =
        header.ok_or_else(|| NpError::Format("manifest missing npss-manifest header".into()))?;
    for sample in &samples {
        if sample.mask.h != h || sample.mask.w != w {
            return Err(NpError::Format("sample extents disagree with manifest".into()));
        }
    }
    Ok(Dataset {
        k_classes: k,
        n_scene_types: s,
        h,
        w,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn small_cfg() -> GenConfig {
        GenConfig {
            seed: 5,
            n_labeled: 4,
            n_unlabeled: 6,
            n_val: 3,
            h: 16,
            w: 16,
            k_classes: 3,
            n_scene_types: 2,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small_cfg()).unwrap();
        let b = generate(&small_cfg()).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.mask, y.mask);
            assert_eq!(x.scene_type, y.scene_type);
        }
    }

    #[test]
    fn masks_respect_scene_priors() {
        let ds = generate(&GenConfig {
            n_labeled: 16,
            n_unlabeled: 0,
            n_val: 0,
            ..small_cfg()
        })
        .unwrap();
        let scenes = scene_specs(ds.k_classes, ds.n_scene_types);
        for s in &ds.samples {
            let allowed = &scenes[s.scene_type].allowed;
            for &m in &s.mask.data {
                assert!(m == 0 || allowed.contains(&m), "label {m} not allowed");
            }
            // every allowed class actually appears
            for &c in allowed {
                assert!(s.mask.data.iter().any(|&m| m == c));
            }
        }
    }

    #[test]
    fn scene_priors_differ_in_a_zero_entry() {
        let scenes = scene_specs(3, 2);
        assert_ne!(scenes[0].allowed, scenes[1].allowed);
        // some class allowed in one and absent in the other
        assert!(scenes[0]
            .allowed
            .iter()
            .any(|c| !scenes[1].allowed.contains(c)));
    }

    #[test]
    fn unlabeled_free_dataset_is_supervised_only() {
        let ds = generate(&GenConfig {
            n_unlabeled: 0,
            ..small_cfg()
        })
        .unwrap();
        assert!(ds.unlabeled().is_empty());
        assert_eq!(ds.labeled().len(), 4);
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let ds = generate(&small_cfg()).unwrap();
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.samples.len(), ds.samples.len());
        assert_eq!(back.k_classes, ds.k_classes);
        for (a, b) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.split, b.split);
            assert_eq!(a.scene_type, b.scene_type);
        }
    }

    #[test]
    fn same_seed_writes_identical_bytes() {
        let dir_a = tempdir().unwrap();
        let dir_b = tempdir().unwrap();
        save_dataset(&generate(&small_cfg()).unwrap(), dir_a.path()).unwrap();
        save_dataset(&generate(&small_cfg()).unwrap(), dir_b.path()).unwrap();
        let a = std::fs::read(dir_a.path().join("labeled_0000.ppm")).unwrap();
        let b = std::fs::read(dir_b.path().join("labeled_0000.ppm")).unwrap();
        assert_eq!(a, b);
        let ma = std::fs::read_to_string(dir_a.path().join("manifest.txt")).unwrap();
        let mb = std::fs::read_to_string(dir_b.path().join("manifest.txt")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn weak_augment_without_flip_is_identity() {
        let ds = generate(&small_cfg()).unwrap();
        let s = &ds.samples[0];
        // find a seed whose first coin is false
        let mut seed = 0u64;
        loop {
            let mut r = StreamRng::new(seed);
            if !r.coin(0.5) {
                break;
            }
            seed += 1;
        }
        let mut rng = StreamRng::new(seed);
        let out = augment(s, AugmentStrength::Weak, &mut rng);
        assert_eq!(out.image.data(), s.image.data());
        assert_eq!(out.mask, s.mask);
    }

    #[test]
    fn double_flip_is_identity_and_mask_multiset_preserved() {
        let ds = generate(&small_cfg()).unwrap();
        let s = &ds.samples[1];
        let flipped = Sample {
            image: super::hflip_image(&s.image),
            mask: super::hflip_mask(&s.mask),
            scene_type: s.scene_type,
            split: s.split,
        };
        let double = Sample {
            image: super::hflip_image(&flipped.image),
            mask: super::hflip_mask(&flipped.mask),
            scene_type: s.scene_type,
            split: s.split,
        };
        assert_eq!(double.image.data(), s.image.data());
        assert_eq!(double.mask, s.mask);

        let mut a: Vec<u8> = s.mask.data.clone();
        let mut b: Vec<u8> = flipped.mask.data.clone();
        a.sort_unstable();
        b.sort_unstable();
        assert_eq!(a, b);
    }
}
