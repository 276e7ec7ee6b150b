//! Saves a freshly initialized model, loads it back and checks that
//! eval-mode predictions are bit-identical.
//!
//! ```text
//! cargo run --example checkpoint
//! ```

use rcnet::cli::predict_image;
use rcnet::data::synthetic::synthetic_sample;
use rcnet::model::{load_checkpoint, save_checkpoint, ModelParams, RCNetConfig};

fn main() -> rcnet::Result<()> {
    let dir = std::env::temp_dir().join("rcnet-checkpoint-example");
    std::fs::create_dir_all(&dir).map_err(|e| rcnet::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let path = dir.join("model.rcn");

    let params = ModelParams::build(RCNetConfig::default(), 42)?;
    save_checkpoint(&params, &path)?;
    let loaded = load_checkpoint(&path)?;
    assert_eq!(loaded, params);

    let image = synthetic_sample("demo", 30, 37, 1).image;
    let a = predict_image(&params, &image)?;
    let b = predict_image(&loaded, &image)?;
    assert_eq!(a, b);
    println!(
        "{} bytes, {} tensors; prediction shape {:?} reproduced exactly",
        std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0),
        params.tensors().len(),
        a.shape()
    );
    Ok(())
}
