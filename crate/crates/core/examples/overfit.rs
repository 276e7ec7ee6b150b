//! Overfits one synthetic 64×64 fundus crop: the smallest end-to-end
//! training run, and a quick way to see the loss go down.
//!
//! ```text
//! cargo run --example overfit [epochs] [learning_rate] [batch]
//! ```

use rcnet::data::synthetic::synthetic_sample;
use rcnet::model::{ModelParams, RCNetConfig};
use rcnet::optim::{train, TrainConfig};

fn main() -> rcnet::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map_or(200, |v| v.parse().expect("epochs"));
    let learning_rate = args
        .next()
        .map_or(0.05, |v| v.parse().expect("learning rate"));
    let copies = args.next().map_or(1, |v| v.parse().expect("batch"));

    let crop = synthetic_sample("crop", 64, 64, 7);
    let data = vec![crop; copies];
    let config = TrainConfig {
        learning_rate,
        batch_size: copies,
        epochs,
        ..Default::default()
    };
    let params = ModelParams::build(RCNetConfig::default(), 0)?;
    let out = train(params, &data, &config, |e| {
        if e.epoch % 10 == 0 || e.epoch == 1 {
            println!("{e}");
        }
    })?;
    let last = out.log.last().expect("at least one epoch");
    println!("final training accuracy {:.4}", last.train_acc);
    Ok(())
}
