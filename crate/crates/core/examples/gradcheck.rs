//! Finite-difference check of every layer and of the whole network.
//!
//! ```text
//! cargo run --example gradcheck
//! ```

use std::time::Instant;

use rcnet::autograd::GradcheckOptions;
use rcnet::diagnostics::full_gradcheck;

fn main() -> rcnet::Result<()> {
    let start = Instant::now();
    let report = full_gradcheck(&GradcheckOptions::default())?;
    println!("{report}");
    println!("{:.1}s", start.elapsed().as_secs_f64());
    if !report.passed() {
        std::process::exit(1);
    }
    Ok(())
}
