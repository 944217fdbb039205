//! Closed-form parameter counts of the transformer presets against the
//! published table.
//!
//! cargo run --example count_params

use cthgr::model::{count_parameters, CtHgr, ModelConfig, Preset, PUBLISHED_COUNTS};

fn main() -> cthgr::Result<()> {
    println!("{:<6}{:>9}{:>8}{:>11}{:>11}", "model", "channels", "window", "count", "published");
    for &(preset, ch, w, published) in &PUBLISHED_COUNTS {
        let n = count_parameters(&ModelConfig::preset(preset, ch, w)?);
        println!("{:<6}{ch:>9}{w:>8}{n:>11}{published:>11}", format!("{preset:?}"));
    }
    // The closed form agrees with the instantiated parameter store.
    let cfg = ModelConfig::preset(Preset::V3, 128, 512)?;
    let model = CtHgr::new(cfg, 0)?;
    println!("V3 on 8 × 16 images: {} (store) = {} (closed form)", model.params.scalar_count(), count_parameters(&cfg));
    Ok(())
}
