//! Flat `key=value` run configuration.
//!
//! One key per line, `#` starts a comment, unknown or duplicate keys are
//! rejected, and `parse(serialize(c)) == c`. The same text is echoed into
//! checkpoints so a trained model can be reconstructed from its file
//! alone.

use crate::evalkit::PavpuConfig;
use crate::np_head::Aggregator;
use crate::segmodel::EncoderConfig;
use crate::synthdata::GenConfig;
use crate::trainer::TrainConfig;
use crate::{NpError, Result};
use std::path::Path;

/// Every tunable of the pipeline, flattened.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // training
    pub seed: u64,
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub lambda_kl: f32,
    pub t_samples: usize,
    pub bank_capacity: usize,
    pub d_t: usize,
    pub d_c: usize,
    pub r: usize,
    pub pseudo_label_threshold: Option<f32>,
    pub aggregator: Aggregator,
    // encoder / decoder
    pub in_channels: usize,
    pub feature_channels: usize,
    pub depth: usize,
    pub downsample_factor: usize,
    pub decoder_hidden: usize,
    // pavpu
    pub pavpu_window: usize,
    pub pavpu_uncertainty_threshold: f64,
    pub pavpu_accuracy_fraction: f64,
    // dataset generation
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
    pub height: usize,
    pub width: usize,
    pub k_classes: usize,
    pub n_scene_types: usize,
    // evaluation / benchmark
    pub eval_crop: usize,
    pub eval_stride: usize,
    pub dropout_rate: f32,
    pub benchmark_repeats: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let e = EncoderConfig::default();
        let p = PavpuConfig::default();
        let g = GenConfig::default();
        RunConfig {
            seed: t.seed,
            epochs: t.epochs,
            batch_labeled: t.batch_labeled,
            batch_unlabeled: t.batch_unlabeled,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            lambda_kl: t.lambda_kl,
            t_samples: t.t_samples,
            bank_capacity: t.bank_capacity,
            d_t: t.d_t,
            d_c: t.d_c,
            r: t.r,
            pseudo_label_threshold: t.pseudo_label_threshold,
            aggregator: t.aggregator,
            in_channels: e.in_channels,
            feature_channels: e.feature_channels,
            depth: e.depth,
            downsample_factor: e.downsample_factor,
            decoder_hidden: 64,
            pavpu_window: p.window,
            pavpu_uncertainty_threshold: p.uncertainty_threshold,
            pavpu_accuracy_fraction: p.accuracy_fraction,
            n_labeled: g.n_labeled,
            n_unlabeled: g.n_unlabeled,
            n_val: g.n_val,
            height: g.h,
            width: g.w,
            k_classes: g.k_classes,
            n_scene_types: g.n_scene_types,
            eval_crop: 32,
            eval_stride: 16,
            dropout_rate: 0.5,
            benchmark_repeats: 3,
        }
    }
}

macro_rules! config_keys {
    ($self:ident, $f:ident) => {
        $f!(seed);
        $f!(epochs);
        $f!(batch_labeled);
        $f!(batch_unlabeled);
        $f!(learning_rate);
        $f!(momentum);
        $f!(lambda_kl);
        $f!(t_samples);
        $f!(bank_capacity);
        $f!(d_t);
        $f!(d_c);
        $f!(r);
        $f!(in_channels);
        $f!(feature_channels);
        $f!(depth);
        $f!(downsample_factor);
        $f!(decoder_hidden);
        $f!(pavpu_window);
        $f!(pavpu_uncertainty_threshold);
        $f!(pavpu_accuracy_fraction);
        $f!(n_labeled);
        $f!(n_unlabeled);
        $f!(n_val);
        $f!(height);
        $f!(width);
        $f!(k_classes);
        $f!(n_scene_types);
        $f!(eval_crop);
        $f!(eval_stride);
        $f!(dropout_rate);
        $f!(benchmark_repeats);
    };
}

impl RunConfig {
    /// Canonical text form; stable key order, parse-round-trip exact.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        macro_rules! emit {
            ($key:ident) => {
                out.push_str(&format!("{}={}\n", stringify!($key), self.$key));
            };
        }
        config_keys!(self, emit);
        out.push_str(&format!(
            "pseudo_label_threshold={}\n",
            match self.pseudo_label_threshold {
                Some(v) => v.to_string(),
                None => "none".to_string(),
            }
        ));
        out.push_str(&format!("aggregator={}\n", self.aggregator.name()));
        out
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                NpError::Config(format!("line {}: expected key=value, got '{raw}'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(NpError::Config(format!("duplicate key '{key}'")));
            }
            macro_rules! assign {
                ($k:ident) => {
                    if key == stringify!($k) {
                        cfg.$k = value.parse().map_err(|_| {
                            NpError::Config(format!("bad value for key '{key}': '{value}'"))
                        })?;
                        continue;
                    }
                };
            }
            config_keys!(cfg, assign);
            match key {
                "pseudo_label_threshold" => {
                    cfg.pseudo_label_threshold = if value == "none" {
                        None
                    } else {
                        Some(value.parse().map_err(|_| {
                            NpError::Config(format!("bad value for key '{key}': '{value}'"))
                        })?)
                    };
                }
                "aggregator" => {
                    cfg.aggregator = Aggregator::parse(value)?;
                }
                other => {
                    return Err(NpError::Config(format!("unknown key '{other}'")));
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NpError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            epochs: self.epochs,
            batch_labeled: self.batch_labeled,
            batch_unlabeled: self.batch_unlabeled,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            lambda_kl: self.lambda_kl,
            t_samples: self.t_samples,
            bank_capacity: self.bank_capacity,
            d_t: self.d_t,
            d_c: self.d_c,
            r: self.r,
            pseudo_label_threshold: self.pseudo_label_threshold,
            aggregator: self.aggregator,
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: self.in_channels,
            feature_channels: self.feature_channels,
            depth: self.depth,
            downsample_factor: self.downsample_factor,
        }
    }

    pub fn pavpu_config(&self) -> PavpuConfig {
        PavpuConfig {
            window: self.pavpu_window,
            uncertainty_threshold: self.pavpu_uncertainty_threshold,
            accuracy_fraction: self.pavpu_accuracy_fraction,
        }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            n_labeled: self.n_labeled,
            n_unlabeled: self.n_unlabeled,
            n_val: self.n_val,
            h: self.height,
            w: self.width,
            k_classes: self.k_classes,
            n_scene_types: self.n_scene_types,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.serialize();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
        // idempotent: serialize(parse(serialize)) == serialize
        assert_eq!(back.serialize(), text);
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# comment\nseed=42\nlearning_rate=0.5 # trailing\n\naggregator=mean\npseudo_label_threshold=0.9\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.learning_rate, 0.5);
        assert_eq!(cfg.aggregator, Aggregator::Mean);
        assert_eq!(cfg.pseudo_label_threshold, Some(0.9));
    }

    #[test]
    fn unknown_key_is_named_in_error() {
        let err = RunConfig::parse("warp_factor=9\n").unwrap_err();
        match err {
            NpError::Config(msg) => assert!(msg.contains("warp_factor"), "{msg}"),
            other => panic!("wrong error {other:?}"),
        }
    }

    #[test]
    fn duplicate_and_malformed_lines_fail() {
        assert!(RunConfig::parse("seed=1\nseed=2\n").is_err());
        assert!(RunConfig::parse("seed\n").is_err());
        assert!(RunConfig::parse("seed=abc\n").is_err());
    }

    #[test]
    fn threshold_none_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.pseudo_label_threshold = None;
        let back = RunConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(back.pseudo_label_threshold, None);
    }
}
