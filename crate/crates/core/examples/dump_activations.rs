//! Writes the feature maps of one block before and after its residual
//! addition, one PGM per channel.
//!
//! ```text
//! cargo run --example dump_activations [out_dir]
//! ```

use rcnet::cli::cmd_dump_activations;
use rcnet::data::augment::write_sample;
use rcnet::data::synthetic::synthetic_sample;
use rcnet::model::{save_checkpoint, ModelParams, RCNetConfig};

fn main() -> rcnet::Result<()> {
    let out = std::env::args().nth(1).map_or_else(
        || std::env::temp_dir().join("rcnet-activations-example"),
        Into::into,
    );
    let input_dir = out.join("input");
    for sub in ["images", "labels", "masks"] {
        let dir = input_dir.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| rcnet::Error::Io {
            path: dir,
            source: e,
        })?;
    }
    let sample = synthetic_sample("fundus", 64, 64, 2);
    write_sample(&sample, &input_dir)?;
    let checkpoint = out.join("model.rcn");
    save_checkpoint(&ModelParams::build(RCNetConfig::default(), 0)?, &checkpoint)?;

    let layers: Vec<String> = ["down1.main", "down1.skip", "down1.out", "bridge.out"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let written = cmd_dump_activations(
        &checkpoint,
        &input_dir.join("images/fundus.ppm"),
        &layers,
        &out.join("maps"),
    )?;
    println!(
        "wrote {} maps under {}",
        written.len(),
        out.join("maps").display()
    );
    Ok(())
}
