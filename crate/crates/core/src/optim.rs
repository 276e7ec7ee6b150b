//! Plain SGD training with median-frequency class weights.

use std::fmt;
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Op, Tape};
use crate::data::{Sample, SampleSource};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::model::{build_graph, register_learnables, ModelParams};
use crate::tensor::{Element, Tensor};

/// Class weights for the loss, background first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossWeights {
    /// Median-frequency weights computed from the training split.
    Auto,
    Manual([f64; 2]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    /// Load samples on the training thread only. Results are identical
    /// either way; this just rules out any background work.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 4,
            epochs: 1,
            seed: 0,
            loss_weights: LossWeights::Auto,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted so a run can be used as a pure
    /// statistics pass.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if let LossWeights::Manual(w) = self.loss_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Config(format!("invalid loss weights {w:?}")));
            }
        }
        Ok(())
    }
}

/// Worker count: `RCNET_THREADS` if set, otherwise the available cores.
pub fn worker_threads() -> usize {
    std::env::var("RCNET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Per-class frequencies `f_c`: pixels of class `c` inside the FOV, summed
/// over the images that contain `c`, divided by the FOV size of those images.
pub fn class_frequencies(samples: &[Sample]) -> Result<[f64; 2]> {
    let mut class_pixels = [0u64; 2];
    let mut fov_pixels = [0u64; 2];
    for s in samples {
        let fov_size = s.fov.count_ones() as u64;
        let vessels = s
            .label
            .data()
            .iter()
            .zip(s.fov.data())
            .filter(|&(&l, &f)| l == 1 && f == 1)
            .count() as u64;
        for (c, n) in [(0, fov_size - vessels), (1, vessels)] {
            if n > 0 {
                class_pixels[c] += n;
                fov_pixels[c] += fov_size;
            }
        }
    }
    let mut f = [0.0; 2];
    for c in 0..2 {
        if class_pixels[c] == 0 {
            let name = if c == 0 { "background" } else { "vessel" };
            return Err(Error::Dataset(format!(
                "class {name} is absent from every training image's field of view"
            )));
        }
        f[c] = class_pixels[c] as f64 / fov_pixels[c] as f64;
    }
    Ok(f)
}

/// `w_c = median(f) / f_c`; for two classes the median is their mean.
pub fn weights_from_frequencies(f: [f64; 2]) -> [f64; 2] {
    let median = (f[0] + f[1]) / 2.0;
    [median / f[0], median / f[1]]
}

pub fn median_frequency_weights(samples: &[Sample]) -> Result<[f64; 2]> {
    class_frequencies(samples).map(weights_from_frequencies)
}

/// `w ← w − lr·g` over matching lists. Everything is checked before any
/// parameter is touched.
pub fn sgd_apply<T: Element>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    learning_rate: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(
            "sgd_step",
            format!("{} gradients for {} parameters", grads.len(), params.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        p.expect_same_shape(g, "sgd_step")?;
        if !g.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of parameter {i}"),
            });
        }
    }
    let lr = T::from_f64_lossy(learning_rate);
    for (p, g) in params.iter_mut().zip(grads) {
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// One SGD step on every learnable of `model`. `grads` must list the
/// learnables by name, in [`ModelParams::learnables`] order. Running
/// statistics are left alone.
pub fn sgd_step<T: Element>(
    model: &mut ModelParams<T>,
    grads: &[(String, Tensor<T>)],
    learning_rate: f64,
) -> Result<()> {
    let mut params = model.learnables_mut();
    if params.len() != grads.len() {
        return Err(Error::invalid(
            "sgd_step",
            format!("{} gradients for {} learnables", grads.len(), params.len()),
        ));
    }
    for ((name, p), (gname, g)) in params.iter().zip(grads) {
        if name != gname {
            return Err(Error::invalid(
                "sgd_step",
                format!("expected gradient for {name}, got {gname}"),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient of {name}"),
            });
        }
        p.expect_same_shape(g, "sgd_step")?;
    }
    let mut tensors: Vec<&mut Tensor<T>> = params.iter_mut().map(|(_, t)| &mut **t).collect();
    let refs: Vec<&Tensor<T>> = grads.iter().map(|(_, g)| g).collect();
    sgd_apply(&mut tensors, &refs, learning_rate)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Pixel accuracy inside the FOV, measured on the forward passes of the
    /// epoch (before each step).
    pub train_acc: f64,
    pub wall_seconds: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,mean_loss,train_acc,wall_seconds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.8},{:.6},{:.3}",
            self.epoch, self.mean_loss, self.train_acc, self.wall_seconds
        )
    }
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {:>4}  loss {:.6}  acc {:.4}  {:.1}s",
            self.epoch, self.mean_loss, self.train_acc, self.wall_seconds
        )
    }
}

/// Model, class weights and per-epoch log of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub weights: [f64; 2],
    pub log: Vec<EpochLog>,
}

struct Batch {
    x: Tensor<f32>,
    target: Vec<u8>,
    fov: Vec<u8>,
}

fn stack(samples: &[Sample]) -> Result<Batch> {
    let dims = samples[0].dims();
    if let Some(s) = samples.iter().find(|s| s.dims() != dims) {
        return Err(Error::Dataset(format!(
            "{} is {:?} but its batch is {:?}; batch samples must share dims",
            s.id,
            s.dims(),
            dims
        )));
    }
    let (h, w) = dims;
    let mut x = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut target = Vec::with_capacity(samples.len() * h * w);
    let mut fov = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        x.extend_from_slice(s.image.data());
        target.extend_from_slice(s.label.data());
        fov.extend_from_slice(s.fov.data());
    }
    Ok(Batch {
        x: Tensor::new(&[samples.len(), 3, h, w], x)?,
        target,
        fov,
    })
}

fn load_batch(data: &dyn SampleSource, indices: &[usize]) -> Result<Batch> {
    let samples = indices
        .iter()
        .map(|&i| data.sample(i).map(|s| s.padded_to_multiple(4)))
        .collect::<Result<Vec<_>>>()?;
    stack(&samples)
}

/// Sample order for `epoch`: a seeded shuffle, independent of threading.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order
}

struct StepResult {
    loss: f64,
    correct: usize,
    counted: usize,
}

/// Forward, loss, backward, SGD step and running-statistics update on one batch.
fn train_step(
    params: &mut ModelParams<f32>,
    batch: &Batch,
    weights: [f64; 2],
    lr: f64,
) -> Result<StepResult> {
    let mut tape = Tape::new();
    let leaves = register_learnables(&mut tape, params);
    let x = tape.leaf(batch.x.clone());
    let graph = build_graph(&mut tape, params, &leaves, x, Mode::Train)?;
    let loss_id = tape.record(
        Op::WeightedCrossEntropy {
            target: batch.target.clone(),
            weights: weights.to_vec(),
            fov: batch.fov.clone(),
        },
        &[graph.probs],
    )?;
    let loss = tape.value(loss_id)?.item()? as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            context: format!("loss = {loss}"),
        });
    }

    let probs = tape.value(graph.probs)?;
    let (n, _, h, w) = probs.dims4()?;
    let hw = h * w;
    let (mut correct, mut counted) = (0, 0);
    for ni in 0..n {
        for p in 0..hw {
            let i = ni * hw + p;
            if batch.fov[i] == 0 {
                continue;
            }
            let vessel = probs.data()[(ni * 2 + 1) * hw + p] > probs.data()[ni * 2 * hw + p];
            correct += (vessel as u8 == batch.target[i]) as usize;
            counted += 1;
        }
    }

    let mut grads = tape.backward(loss_id)?;
    let names: Vec<String> = params.learnables().into_iter().map(|(n, _)| n).collect();
    let named: Vec<(String, Tensor<f32>)> = names
        .into_iter()
        .zip(&leaves)
        .map(|(name, &id)| {
            let g = grads
                .take(id)
                .unwrap_or_else(|| Tensor::zeros_like(tape.nodes()[id].value()));
            (name, g)
        })
        .collect();
    sgd_step(params, &named, lr)?;

    for (bn, &id) in params.batch_norms_mut().into_iter().zip(&graph.batch_norms) {
        let cache = tape.nodes()[id]
            .batch_norm_cache()
            .ok_or_else(|| Error::invalid("train", "batch-norm node without cache"))?;
        bn.update_running(&cache.batch_mean, &cache.batch_var);
    }
    Ok(StepResult {
        loss,
        correct,
        counted,
    })
}

/// Trains `params` on `data` and reports each epoch to `on_epoch`.
///
/// Batches are consecutive runs of a seeded per-epoch shuffle; the last
/// batch may be short. A non-finite loss or gradient stops training with
/// the epoch and batch where it happened.
pub fn train(
    mut params: ModelParams<f32>,
    data: &dyn SampleSource,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let weights = match config.loss_weights {
        LossWeights::Auto => median_frequency_weights(data.base_samples())?,
        LossWeights::Manual(w) => w,
    };
    let prefetch = !config.deterministic && worker_threads() > 1;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let order = epoch_order(data.len(), config.seed, epoch);
        let chunks: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let (mut loss_sum, mut correct, mut counted) = (0.0, 0usize, 0usize);

        let mut step = |b: usize, batch: Result<Batch>| -> Result<()> {
            let wrap = |e: Error| Error::Diverged {
                epoch,
                batch: b + 1,
                msg: e.to_string(),
            };
            let batch = batch?;
            let r = train_step(&mut params, &batch, weights, config.learning_rate).map_err(
                |e| match e {
                    Error::NonFinite { .. } => wrap(e),
                    other => other,
                },
            )?;
            loss_sum += r.loss;
            correct += r.correct;
            counted += r.counted;
            Ok(())
        };

        if prefetch {
            std::thread::scope(|scope| -> Result<()> {
                let (tx, rx) = mpsc::sync_channel(2);
                let chunks = &chunks;
                scope.spawn(move || {
                    for c in chunks {
                        if tx.send(load_batch(data, c)).is_err() {
                            break;
                        }
                    }
                });
                for (b, batch) in rx.iter().enumerate() {
                    step(b, batch)?;
                }
                Ok(())
            })?;
        } else {
            for (b, c) in chunks.iter().enumerate() {
                step(b, load_batch(data, c))?;
            }
        }

        let entry = EpochLog {
            epoch,
            mean_loss: loss_sum / chunks.len() as f64,
            train_acc: if counted == 0 {
                0.0
            } else {
                correct as f64 / counted as f64
            },
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome {
        params,
        weights,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::synthetic_sample;
    use crate::map::BinaryMap;
    use crate::model::RCNetConfig;

    fn with_frequency(vessels: usize, total: usize) -> Sample {
        let mut label = vec![0u8; total];
        label[..vessels].iter_mut().for_each(|v| *v = 1);
        Sample::new(
            "f",
            Tensor::zeros(&[3, 1, total]).unwrap(),
            BinaryMap::new(1, total, label).unwrap(),
            BinaryMap::filled(1, total, true),
        )
        .unwrap()
    }

    #[test]
    fn median_frequency_examples() {
        assert_eq!(
            median_frequency_weights(&[with_frequency(5, 10)]).unwrap(),
            [1.0, 1.0]
        );
        let w = median_frequency_weights(&[with_frequency(1, 10)]).unwrap();
        assert!((w[0] - 0.5 / 0.9).abs() < 1e-12 && (w[1] - 5.0).abs() < 1e-12);
        assert!((w[0] * 0.9 - w[1] * 0.1).abs() < 1e-12);
        assert!(median_frequency_weights(&[with_frequency(0, 10)]).is_err());
    }

    #[test]
    fn frequencies_only_count_images_containing_the_class() {
        // the all-background image contributes to f_0 but not to f_1
        let f = class_frequencies(&[with_frequency(2, 10), with_frequency(0, 10)]).unwrap();
        assert!((f[0] - 18.0 / 20.0).abs() < 1e-12);
        assert!((f[1] - 2.0 / 10.0).abs() < 1e-12);
    }

    #[test]
    fn sgd_examples() {
        let mut w = Tensor::scalar(1.0f64);
        sgd_apply(&mut [&mut w], &[&Tensor::scalar(0.5)], 0.1).unwrap();
        assert_eq!(w.item().unwrap(), 0.95);

        // two steps on x² from x = 1: x ← x − 0.1·2x
        let mut x = Tensor::scalar(1.0f64);
        for _ in 0..2 {
            let g = x.scale(2.0);
            sgd_apply(&mut [&mut x], &[&g], 0.1).unwrap();
        }
        assert!((x.item().unwrap() - 0.64).abs() < 1e-15);

        let bad = Tensor::scalar(f64::NAN);
        let mut y = Tensor::scalar(1.0f64);
        assert!(matches!(
            sgd_apply(&mut [&mut y], &[&bad], 0.1),
            Err(Error::NonFinite { .. })
        ));
        assert_eq!(y.item().unwrap(), 1.0);
        let wrong = Tensor::zeros(&[2]).unwrap();
        assert!(sgd_apply(&mut [&mut y], &[&wrong], 0.1).is_err());
    }

    #[test]
    fn sgd_is_linear_in_the_gradient() {
        let g1 = Tensor::new(&[3], vec![0.25f64, -1.0, 2.0]).unwrap();
        let g2 = Tensor::new(&[3], vec![0.5f64, 0.75, -0.125]).unwrap();
        let start = Tensor::new(&[3], vec![1.0f64, 2.0, 3.0]).unwrap();
        let mut once = start.clone();
        sgd_apply(&mut [&mut once], &[&g1.add(&g2).unwrap()], 0.5).unwrap();
        let mut twice = start;
        sgd_apply(&mut [&mut twice], &[&g1], 0.5).unwrap();
        sgd_apply(&mut [&mut twice], &[&g2], 0.5).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn sgd_step_checks_names() {
        let mut model = ModelParams::<f32>::build(RCNetConfig::default(), 0).unwrap();
        let mut grads: Vec<(String, Tensor<f32>)> = model
            .learnables()
            .into_iter()
            .map(|(n, t)| (n, Tensor::zeros_like(t)))
            .collect();
        let before = model.clone();
        sgd_step(&mut model, &grads, 0.1).unwrap();
        assert_eq!(model, before);
        grads.swap(0, 1);
        assert!(sgd_step(&mut model, &grads, 0.1).is_err());
    }

    #[test]
    fn epoch_log_csv() {
        let e = EpochLog {
            epoch: 3,
            mean_loss: 0.5,
            train_acc: 0.75,
            wall_seconds: 1.25,
        };
        assert_eq!(e.csv_row(), "3,0.50000000,0.750000,1.250");
        assert_eq!(
            EpochLog::CSV_HEADER.split(',').count(),
            e.csv_row().split(',').count()
        );
    }

    #[test]
    fn zero_learning_rate_keeps_learnables() {
        let data = vec![
            synthetic_sample("a", 16, 16, 0),
            synthetic_sample("b", 16, 16, 0),
        ];
        let params = ModelParams::<f32>::build(RCNetConfig::default(), 1).unwrap();
        let config = TrainConfig {
            learning_rate: 0.0,
            batch_size: 2,
            epochs: 2,
            ..Default::default()
        };
        let out = train(params.clone(), &data, &config, |_| {}).unwrap();
        assert_eq!(out.log.len(), 2);
        let before = params.learnables();
        for ((n, a), (_, b)) in before.iter().zip(out.params.learnables()) {
            assert_eq!(*a, b, "{n}");
        }
    }

    #[test]
    fn diverging_run_reports_position() {
        let data = vec![synthetic_sample("a", 16, 16, 0)];
        let params = ModelParams::<f32>::build(RCNetConfig::default(), 1).unwrap();
        let config = TrainConfig {
            learning_rate: 1e30,
            epochs: 5,
            ..Default::default()
        };
        match train(params, &data, &config, |_| {}) {
            Err(Error::Diverged { epoch, batch, .. }) => assert!(epoch >= 1 && batch == 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
