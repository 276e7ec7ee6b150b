//! Scores a noisy prediction against synthetic ground truth and writes the
//! color overlay (TP green, TN black, FP red, FN blue).
//!
//! ```text
//! cargo run --example evaluate_overlay [out_dir]
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rcnet::data::synthetic::synthetic_sample;
use rcnet::metrics::{overlay_counts, render_overlay, EvalInput, MetricsReport};
use rcnet::BinaryMap;

fn main() -> rcnet::Result<()> {
    let out = std::env::args().nth(1).map_or_else(
        || std::env::temp_dir().join("rcnet-overlay-example"),
        Into::into,
    );
    std::fs::create_dir_all(&out).map_err(|e| rcnet::Error::Io {
        path: out.clone(),
        source: e,
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples: Vec<_> = (0..3)
        .map(|i| synthetic_sample(&format!("im{i}"), 64, 64, 9))
        .collect();
    let probs: Vec<Vec<f32>> = samples
        .iter()
        .map(|s| {
            s.label
                .data()
                .iter()
                .map(|&l| (0.45 * l as f32 + rng.gen_range(0.0..0.6)).min(1.0))
                .collect()
        })
        .collect();
    let inputs: Vec<EvalInput> = samples
        .iter()
        .zip(&probs)
        .map(|(s, p)| EvalInput {
            id: &s.id,
            probs: p,
            gt: &s.label,
            fov: &s.fov,
        })
        .collect();
    let report = MetricsReport::build(&inputs, 0.5)?;
    print!("{report}");

    for input in &inputs {
        let pred = BinaryMap::from_threshold(64, 64, input.probs, 0.5)?;
        let overlay = render_overlay(&pred, input.gt, input.fov)?;
        let counted = overlay_counts(&overlay);
        let row = report
            .images
            .iter()
            .find(|m| m.id == input.id)
            .expect("reported");
        assert_eq!(counted, row.counts);
        overlay.save(out.join(format!("{}_overlay.ppm", input.id)))?;
    }
    std::fs::write(out.join("metrics.csv"), report.to_csv()).map_err(|e| rcnet::Error::Io {
        path: out.join("metrics.csv"),
        source: e,
    })?;
    println!("overlays and metrics.csv in {}", out.display());
    Ok(())
}
