//! Generate the default synthetic dataset to disk and print per-scene
//! class statistics, showing the scene-dependent priors (some classes
//! never occur in a given scene type).
//!
//! Run with: `cargo run --release --example generate_dataset [out_dir]`

use np_semiseg::config::RunConfig;
use np_semiseg::synthdata::{generate, save_dataset, scene_specs};
use np_semiseg::Result;
use std::path::PathBuf;

fn main() -> Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("npss_dataset"));
    let cfg = RunConfig::default().gen_config();
    let ds = generate(&cfg)?;
    save_dataset(&ds, &out)?;
    println!(
        "wrote {} samples ({} labeled / {} unlabeled / {} val) to {}",
        ds.samples.len(),
        ds.labeled().len(),
        ds.unlabeled().len(),
        ds.val().len(),
        out.display()
    );

    let n_class = ds.n_class();
    let specs = scene_specs(ds.k_classes, ds.n_scene_types);
    for spec in &specs {
        let mut hist = vec![0u64; n_class];
        let mut images = 0;
        for s in ds.samples.iter().filter(|s| s.scene_type == spec.scene_type) {
            images += 1;
            for &m in &s.mask.data {
                hist[m as usize] += 1;
            }
        }
        println!(
            "scene {} ({} images, allows {:?}): pixel histogram {:?}",
            spec.scene_type, images, spec.allowed, hist
        );
    }
    Ok(())
}
