//! Parameter count of the default network, block by block.
//!
//! ```text
//! cargo run --example params
//! ```

use rcnet::model::{count_params, ModelParams, RCNetConfig};

fn main() -> rcnet::Result<()> {
    let config = RCNetConfig::default();
    let params = ModelParams::<f32>::build(config, 0)?;
    println!("{config}");
    let mut per_block: Vec<(String, usize)> = Vec::new();
    for (name, t) in params.learnables() {
        let block = name.split('.').next().unwrap_or("").to_string();
        match per_block.last_mut() {
            Some((b, n)) if *b == block => *n += t.len(),
            _ => per_block.push((block, t.len())),
        }
    }
    for (block, n) in &per_block {
        println!("{block:<8} {n:>6}");
    }
    println!("total    {:>6}", count_params(&params));
    Ok(())
}
