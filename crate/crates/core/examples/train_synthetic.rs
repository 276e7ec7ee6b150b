//! The full pipeline on a small synthetic DRIVE-shaped dataset: write the
//! dataset, train with augmentation, predict the test images and evaluate.
//!
//! ```text
//! cargo run --example train_synthetic [work_dir]
//! ```

use rcnet::cli::{cmd_evaluate, cmd_predict, cmd_train, RunConfig, CHECKPOINT_FILE};
use rcnet::data::synthetic::write_drive_layout;

fn main() -> rcnet::Result<()> {
    let work = std::env::args().nth(1).map_or_else(
        || std::env::temp_dir().join("rcnet-train-example"),
        Into::into,
    );
    let root = work.join("data");
    write_drive_layout(&root, 4, 2, (48, 46), 5)?;

    let config = RunConfig::parse(&format!(
        "data_root = {}\nout_dir = {}\nstrict_dims = false\n\
         epochs = 3\nlearning_rate = 0.05\nbatch_size = 4\n\
         rotation_step = 30\nbrightness_variants = 4\n",
        root.display(),
        work.join("run").display()
    ))?;
    let log = cmd_train(&config)?;
    println!("final epoch: {}", log.last().expect("epochs >= 1"));

    let checkpoint = config.out_dir.join(CHECKPOINT_FILE);
    let preds = work.join("predictions");
    cmd_predict(&checkpoint, &root.join("test/images"), &preds)?;
    let report = cmd_evaluate(&config, &preds, &work.join("evaluation"))?;
    print!("{report}");
    Ok(())
}
