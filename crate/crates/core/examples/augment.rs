//! Expands a few synthetic training images with the rotation and
//! brightness plan and writes a handful of variants to disk.
//!
//! ```text
//! cargo run --example augment [out_dir]
//! ```

use rcnet::data::augment::write_sample;
use rcnet::data::synthetic::synthetic_samples;
use rcnet::data::{AugmentPlan, AugmentedSet, SampleSource};

fn main() -> rcnet::Result<()> {
    let out = std::env::args().nth(1).map_or_else(
        || std::env::temp_dir().join("rcnet-augment-example"),
        Into::into,
    );
    let plan = AugmentPlan::default();
    let set = AugmentedSet::new(synthetic_samples("im", 20, 48, 48, 0), plan.clone())?;
    println!(
        "{} rotations + {} brightness variants = {} per image, {} in total",
        plan.rotations(),
        plan.brightness_variants,
        plan.per_sample(),
        set.len()
    );
    for sub in ["images", "labels", "masks"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| rcnet::Error::Io {
            path: dir,
            source: e,
        })?;
    }
    for i in [0, 45, 90, 360, 379] {
        let s = set.sample(i)?;
        write_sample(&s, &out)?;
        println!("{:<10} vessels in fov {}", s.id, s.label.count_ones());
    }
    println!("wrote examples to {}", out.display());
    Ok(())
}
