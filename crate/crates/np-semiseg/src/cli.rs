//! Command implementations behind the `npss` binary: dataset generation,
//! training, evaluation, rendering, and the uncertainty benchmark.
//!
//! Exit codes: 0 ok, 2 config error, 3 data/format error, 4 numeric
//! error. All CSV outputs carry a `schema_version` column and the readers
//! reject versions they do not know.

use crate::config::RunConfig;
use crate::evalkit::{
    benchmark_uncertainty, pavpu_counts, sliding_eval, BenchRow, ConfusionMatrix, PavpuCounts,
};
use crate::imageio;
use crate::model::SegModel;
use crate::rng::StreamRng;
use crate::synthdata::{self, generate, load_dataset, render_palette, save_dataset};
use crate::tensor::Tensor;
use crate::trainer::{
    apply_checkpoint, continue_fit, fit, read_checkpoint, write_checkpoint, EpochLog, Sgd,
};
use crate::{LabelMap, NpError, Result};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

pub const CHECKPOINT_FILE: &str = "checkpoint.npck";
pub const CENTERS_FILE: &str = "centers.npss";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";

pub const METRICS_SCHEMA: u32 = 1;
pub const BENCHMARK_SCHEMA: u32 = 1;
pub const TRAIN_LOG_SCHEMA: u32 = 1;

const METRICS_HEADER: &str = "schema_version,run_id,split,miou,pavpu,wall_ms_np,wall_ms_mc,t";
const BENCHMARK_HEADER: &str =
    "schema_version,run_id,t,repeats,wall_ms_np,wall_ms_mc,passes_np,passes_mc,warn_single_repeat";
const TRAIN_LOG_HEADER: &str = "schema_version,epoch,l_c,l_kl,val_miou";

/// Generate the synthetic dataset described by the config.
pub fn cmd_generate(config: &Path, out_dir: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let ds = generate(&cfg.gen_config())?;
    save_dataset(&ds, out_dir)?;
    println!(
        "generated {} samples ({} labeled / {} unlabeled / {} val) into {}",
        ds.samples.len(),
        ds.labeled().len(),
        ds.unlabeled().len(),
        ds.val().len(),
        out_dir.display()
    );
    Ok(())
}

/// Train (or resume) and write checkpoint, center snapshot, and log CSV.
pub fn cmd_train(
    config: &Path,
    data_dir: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let ds = load_dataset(data_dir)?;
    let tc = cfg.train_config();
    let outcome = match resume {
        None => fit(&tc, cfg.encoder_config(), cfg.decoder_hidden, &ds)?,
        Some(ckpt_path) => {
            let (mut model, _prev_cfg, data) = load_model(ckpt_path)?;
            apply_checkpoint(&mut model, &data)?;
            let mut opt = Sgd::new(&model, tc.learning_rate, tc.momentum);
            opt.steps = data.steps;
            continue_fit(&tc, model, opt, data.epochs as usize, &ds)?
        }
    };
    std::fs::create_dir_all(out_dir)?;
    let echo = cfg.serialize();
    let ckpt = BufWriter::new(File::create(out_dir.join(CHECKPOINT_FILE))?);
    write_checkpoint(
        ckpt,
        &outcome.model,
        &echo,
        outcome.opt.steps,
        outcome.epochs_done as u64,
    )?;
    let snap = outcome.model.export_centers();
    let mut cf = BufWriter::new(File::create(out_dir.join(CENTERS_FILE))?);
    snap.write_to(&mut cf)?;
    write_train_log_csv(&out_dir.join(TRAIN_LOG_FILE), &outcome.log)?;
    if let Some(last) = outcome.log.last() {
        println!(
            "trained {} epochs ({} steps): l_c={:.4} l_kl={:.4} val_miou={}",
            outcome.log.len(),
            outcome.opt.steps,
            last.l_c,
            last.l_kl,
            last.val_miou
                .map(|m| format!("{m:.4}"))
                .unwrap_or_else(|| "n/a".into())
        );
    } else {
        println!("no epochs requested; wrote initialized checkpoint");
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Crop,
    Slide,
}

impl EvalMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "crop" => Ok(EvalMode::Crop),
            "slide" => Ok(EvalMode::Slide),
            other => Err(NpError::Config(format!(
                "mode must be 'crop' or 'slide', got '{other}'"
            ))),
        }
    }
}

/// Rebuild a model from a checkpoint file (architecture comes from the
/// embedded config echo).
pub fn load_model(
    checkpoint: &Path,
) -> Result<(SegModel, RunConfig, crate::trainer::CheckpointData)> {
    let file = File::open(checkpoint)?;
    let data = read_checkpoint(BufReader::new(file))?;
    let cfg = RunConfig::parse(&data.config_echo)?;
    let tc = cfg.train_config();
    let model_cfg = tc.model_config(cfg.encoder_config(), cfg.decoder_hidden, cfg.k_classes + 1);
    let mut model = SegModel::new(model_cfg, &StreamRng::new(tc.seed))?;
    apply_checkpoint(&mut model, &data)?;
    Ok((model, cfg, data))
}

/// Evaluate the val split and append one metrics CSV row.
pub fn cmd_eval(checkpoint: &Path, data_dir: &Path, mode: EvalMode, out_csv: &Path) -> Result<()> {
    let (model, cfg, _) = load_model(checkpoint)?;
    let ds = load_dataset(data_dir)?;
    let val = ds.val();
    if val.is_empty() {
        return Err(NpError::Data("dataset has no val split".into()));
    }
    let pavpu_cfg = cfg.pavpu_config();
    let rng = StreamRng::new(cfg.seed).substream("cmd-eval");
    let mut cm = ConfusionMatrix::new(model.cfg.n_class);
    let mut patch = PavpuCounts::default();
    for (i, s) in val.iter().enumerate() {
        let mut prng = rng.substream_n("image", i as u64);
        let bundle = match mode {
            EvalMode::Crop => model.predict_cold(&s.image, &mut prng)?,
            EvalMode::Slide => {
                let crop = cfg.eval_crop.min(ds.h).min(ds.w);
                let stride = cfg.eval_stride.min(crop).max(1);
                sliding_eval(&model, &s.image, crop, stride, &mut prng)?
            }
        };
        let pred = bundle.argmax_labels();
        cm.add(&pred, &s.mask)?;
        patch.merge(&pavpu_counts(
            &pred,
            &s.mask,
            &bundle.normalized_uncertainty(),
            &pavpu_cfg,
        )?);
    }
    let miou = cm.miou()?;
    let pavpu = patch.ratio();
    let mode_name = match mode {
        EvalMode::Crop => "crop",
        EvalMode::Slide => "slide",
    };
    let row = MetricsRow {
        run_id: format!("seed{}-{}", cfg.seed, mode_name),
        split: "val".into(),
        miou,
        pavpu,
        wall_ms_np: None,
        wall_ms_mc: None,
        t: cfg.t_samples,
    };
    write_metrics_csv(out_csv, &[row])?;
    println!("val miou={miou:.4} pavpu={pavpu:.4} ({mode_name})");
    Ok(())
}

/// Render a prediction PPM (fixed class palette) and an uncertainty PGM
/// (0 black = certain, 255 white = max entropy).
pub fn cmd_render(checkpoint: &Path, image_path: &Path, out_prefix: &str) -> Result<()> {
    let (model, cfg, _) = load_model(checkpoint)?;
    let image = imageio::read_ppm(image_path)?;
    let mut rng = StreamRng::new(cfg.seed).substream("cmd-render");
    let bundle = model.predict_cold(&image, &mut rng)?;
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
    let pred_path = format!("{out_prefix}_pred.ppm");
    imageio::write_ppm(Path::new(&pred_path), &Tensor::new(&[3, h, w], pred_img)?)?;

    let norm = bundle.normalized_uncertainty();
    let mut unc = vec![0u8; n];
    for (o, &u) in unc.iter_mut().zip(norm.data()) {
        *o = (u.clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    let unc_path = format!("{out_prefix}_uncertainty.pgm");
    imageio::write_pgm(Path::new(&unc_path), &LabelMap { h, w, data: unc })?;
    println!("wrote {pred_path} and {unc_path}");
    Ok(())
}

/// Time NP single-pass uncertainty against MC dropout at several T.
pub fn cmd_benchmark(
    checkpoint: &Path,
    t_list: &[usize],
    repeats: usize,
    out_csv: &Path,
) -> Result<()> {
    let (model, cfg, _) = load_model(checkpoint)?;
    // synthesize benchmark inputs from the config's generator settings
    let mut gen = cfg.gen_config();
    gen.n_labeled = 2;
    gen.n_unlabeled = 0;
    gen.n_val = 0;
    gen.seed = cfg.seed ^ 0xbe9c;
    let ds = generate(&gen)?;
    let images: Vec<Tensor<f32>> = ds.samples.iter().map(|s| s.image.clone()).collect();
    let crop = cfg.eval_crop.min(ds.h).min(ds.w);
    let stride = cfg.eval_stride.min(crop).max(1);
    let rows = benchmark_uncertainty(
        &model,
        cfg.dropout_rate,
        &images,
        t_list,
        repeats,
        crop,
        stride,
        &StreamRng::new(cfg.seed).substream("cmd-benchmark"),
    )?;
    write_benchmark_csv(out_csv, &format!("seed{}", cfg.seed), &rows)?;
    for r in &rows {
        println!(
            "T={}: np {:.2} ms ({} passes) vs mc {:.2} ms ({} passes){}",
            r.t,
            r.wall_ms_np,
            r.passes_np,
            r.wall_ms_mc,
            r.passes_mc,
            if r.warn_single_repeat {
                " [single repeat]"
            } else {
                ""
            }
        );
    }
    Ok(())
}

// ---- CSV schemas ----

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub split: String,
    pub miou: f64,
    pub pavpu: f64,
    pub wall_ms_np: Option<f64>,
    pub wall_ms_mc: Option<f64>,
    pub t: usize,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_default()
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{METRICS_SCHEMA},{},{},{:.6},{:.6},{},{},{}",
            r.run_id,
            r.split,
            r.miou,
            r.pavpu,
            fmt_opt(r.wall_ms_np),
            fmt_opt(r.wall_ms_mc),
            r.t
        )?;
    }
    Ok(())
}

fn split_csv_line(line: &str, n: usize) -> Result<Vec<&str>> {
    let parts: Vec<&str> = line.split(',').collect();
    if parts.len() != n {
        return Err(NpError::Format(format!(
            "csv row has {} fields, expected {n}: '{line}'",
            parts.len()
        )));
    }
    Ok(parts)
}

fn check_schema(found: &str, expected: u32, what: &str) -> Result<()> {
    let v: u32 = found
        .parse()
        .map_err(|_| NpError::Format(format!("{what}: bad schema version '{found}'")))?;
    if v != expected {
        return Err(NpError::Format(format!(
            "{what}: unknown schema version {v} (reader supports {expected})"
        )));
    }
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(NpError::Format(format!(
                "metrics csv: unexpected header {other:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let p = split_csv_line(line, 8)?;
        check_schema(p[0], METRICS_SCHEMA, "metrics csv")?;
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| NpError::Format(format!("metrics csv: bad {what} '{s}'")))
        };
        let parse_opt = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse_f(s, what).map(Some)
            }
        };
        out.push(MetricsRow {
            run_id: p[1].to_string(),
            split: p[2].to_string(),
            miou: parse_f(p[3], "miou")?,
            pavpu: parse_f(p[4], "pavpu")?,
            wall_ms_np: parse_opt(p[5], "wall_ms_np")?,
            wall_ms_mc: parse_opt(p[6], "wall_ms_mc")?,
            t: p[7]
                .parse()
                .map_err(|_| NpError::Format(format!("metrics csv: bad t '{}'", p[7])))?,
        });
    }
    Ok(out)
}

pub fn write_benchmark_csv(path: &Path, run_id: &str, rows: &[BenchRow]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{BENCHMARK_HEADER}")?;
    for r in rows {
        writeln!(
            f,
            "{BENCHMARK_SCHEMA},{run_id},{},{},{:.3},{:.3},{},{},{}",
            r.t, r.repeats, r.wall_ms_np, r.wall_ms_mc, r.passes_np, r.passes_mc,
            r.warn_single_repeat as u8
        )?;
    }
    Ok(())
}

pub fn read_benchmark_csv(path: &Path) -> Result<Vec<BenchRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == BENCHMARK_HEADER => {}
        other => {
            return Err(NpError::Format(format!(
                "benchmark csv: unexpected header {other:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let p = split_csv_line(line, 9)?;
        check_schema(p[0], BENCHMARK_SCHEMA, "benchmark csv")?;
        let bad = |what: &str, s: &str| NpError::Format(format!("benchmark csv: bad {what} '{s}'"));
        out.push(BenchRow {
            t: p[2].parse().map_err(|_| bad("t", p[2]))?,
            repeats: p[3].parse().map_err(|_| bad("repeats", p[3]))?,
            wall_ms_np: p[4].parse().map_err(|_| bad("wall_ms_np", p[4]))?,
            wall_ms_mc: p[5].parse().map_err(|_| bad("wall_ms_mc", p[5]))?,
            passes_np: p[6].parse().map_err(|_| bad("passes_np", p[6]))?,
            passes_mc: p[7].parse().map_err(|_| bad("passes_mc", p[7]))?,
            warn_single_repeat: p[8] == "1",
        });
    }
    Ok(out)
}

pub fn write_train_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "{TRAIN_LOG_HEADER}")?;
    for e in log {
        writeln!(
            f,
            "{TRAIN_LOG_SCHEMA},{},{:.6},{:.6},{}",
            e.epoch,
            e.l_c,
            e.l_kl,
            e.val_miou.map(|m| format!("{m:.6}")).unwrap_or_default()
        )?;
    }
    Ok(())
}

pub fn read_train_log_csv(path: &Path) -> Result<Vec<EpochLog>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TRAIN_LOG_HEADER => {}
        other => {
            return Err(NpError::Format(format!(
                "train log csv: unexpected header {other:?}"
            )))
        }
    }
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let p = split_csv_line(line, 5)?;
        check_schema(p[0], TRAIN_LOG_SCHEMA, "train log csv")?;
        let bad = |what: &str, s: &str| NpError::Format(format!("train log csv: bad {what} '{s}'"));
        out.push(EpochLog {
            epoch: p[1].parse().map_err(|_| bad("epoch", p[1]))?,
            l_c: p[2].parse().map_err(|_| bad("l_c", p[2]))?,
            l_kl: p[3].parse().map_err(|_| bad("l_kl", p[3]))?,
            val_miou: if p[4].is_empty() {
                None
            } else {
                Some(p[4].parse().map_err(|_| bad("val_miou", p[4]))?)
            },
        });
    }
    Ok(out)
}

/// Convenience for tests and the `generate` example: default dataset in a
/// fresh directory.
pub fn generate_default_dataset(out_dir: &Path, seed: u64) -> Result<synthdata::Dataset> {
    let mut gen = RunConfig::default().gen_config();
    gen.seed = seed;
    let ds = generate(&gen)?;
    save_dataset(&ds, out_dir)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn metrics_csv_round_trip_and_version_check() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![MetricsRow {
            run_id: "seed1-crop".into(),
            split: "val".into(),
            miou: 0.5,
            pavpu: 0.75,
            wall_ms_np: None,
            wall_ms_mc: Some(12.5),
            t: 5,
        }];
        write_metrics_csv(&p, &rows).unwrap();
        let back = read_metrics_csv(&p).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].run_id, "seed1-crop");
        assert_eq!(back[0].wall_ms_np, None);
        assert_eq!(back[0].wall_ms_mc, Some(12.5));

        // tamper with the version
        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, text.replace("\n1,", "\n9,")).unwrap();
        assert!(matches!(
            read_metrics_csv(&p),
            Err(NpError::Format(_))
        ));
    }

    #[test]
    fn train_log_round_trip() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("log.csv");
        let log = vec![
            EpochLog {
                epoch: 0,
                l_c: 1.25,
                l_kl: 0.5,
                val_miou: Some(0.25),
            },
            EpochLog {
                epoch: 1,
                l_c: 1.0,
                l_kl: 0.25,
                val_miou: None,
            },
        ];
        write_train_log_csv(&p, &log).unwrap();
        let back = read_train_log_csv(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].val_miou, None);
        assert!((back[0].l_c - 1.25).abs() < 1e-6);
    }
}
