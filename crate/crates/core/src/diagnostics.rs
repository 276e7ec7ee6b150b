//! Finite-difference checks of every tape operation and of the whole
//! network, in f64.
//!
//! Each layer check contracts the layer output with a fixed random tensor
//! so that no gradient is trivially constant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{gradcheck, GradcheckOptions, GradcheckReport, NodeId, Op, Tape};
use crate::error::Result;
use crate::layers::{Mode, BN_EPS};
use crate::model::{build_graph, ModelParams, RCNetConfig};
use crate::tensor::Tensor;

/// Input shape of the composite check.
pub const COMPOSITE_INPUT: [usize; 4] = [1, 3, 16, 16];

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi)).expect("valid shape")
}

/// `sum(y ⊙ r)` for a constant `r` of the same shape as `y`.
fn contract(tape: &mut Tape<f64>, y: NodeId, r: &Tensor<f64>) -> Result<NodeId> {
    let r = tape.leaf(r.clone());
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn named(entries: Vec<(&str, Tensor<f64>)>) -> Vec<(String, Tensor<f64>)> {
    entries
        .into_iter()
        .map(|(n, t)| (n.to_string(), t))
        .collect()
}

fn check_conv(k: usize, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pad = k / 2;
    let params = named(vec![
        ("x", uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut rng)),
        ("kernel", uniform(&[4, 3, k, k], -1.0, 1.0, &mut rng)),
        ("bias", uniform(&[4], -1.0, 1.0, &mut rng)),
    ]);
    let r = uniform(&[2, 4, 5, 5], -1.0, 1.0, &mut rng);
    gradcheck(
        &params,
        |tape, ids| {
            let y = tape.conv2d(ids[0], ids[1], ids[2], pad)?;
            contract(tape, y, &r)
        },
        opts,
    )
}

fn check_batchnorm(mode: Mode, seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = named(vec![
        ("x", uniform(&[2, 3, 3, 3], -2.0, 2.0, &mut rng)),
        ("gamma", uniform(&[3], 0.5, 1.5, &mut rng)),
        ("beta", uniform(&[3], -0.5, 0.5, &mut rng)),
    ]);
    let running_mean = uniform(&[3], -0.5, 0.5, &mut rng);
    let running_var = uniform(&[3], 0.5, 2.0, &mut rng);
    let r = uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
    gradcheck(
        &params,
        |tape, ids| {
            let op = match mode {
                Mode::Train => Op::BatchNormTrain { eps: BN_EPS },
                Mode::Eval => Op::BatchNormEval {
                    running_mean: running_mean.clone(),
                    running_var: running_var.clone(),
                    eps: BN_EPS,
                },
            };
            let y = tape.record(op, ids)?;
            contract(tape, y, &r)
        },
        opts,
    )
}

fn check_relu(seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // keep entries away from the kink
    let x = Tensor::from_fn(&[2, 2, 3, 3], |_| {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })?;
    let r = uniform(&[2, 2, 3, 3], -1.0, 1.0, &mut rng);
    gradcheck(
        &named(vec![("x", x)]),
        |tape, ids| {
            let y = tape.relu(ids[0])?;
            contract(tape, y, &r)
        },
        opts,
    )
}

/// Distinct values spaced well beyond the difference step, so no window
/// has a tie.
fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| 0.5 + 0.01 * i as f64).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape, vals).expect("valid shape")
}

fn check_maxpool(seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = distinct(&[2, 2, 4, 4], &mut rng);
    let r = uniform(&[2, 2, 2, 2], -1.0, 1.0, &mut rng);
    gradcheck(
        &named(vec![("x", x)]),
        |tape, ids| {
            let y = tape.maxpool2d(ids[0])?;
            contract(tape, y, &r)
        },
        opts,
    )
}

fn check_unpool(seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = distinct(&[2, 2, 4, 4], &mut rng);
    let y = uniform(&[2, 2, 2, 2], -1.0, 1.0, &mut rng);
    let r = uniform(&[2, 2, 4, 4], -1.0, 1.0, &mut rng);
    gradcheck(
        &named(vec![("y", y)]),
        |tape, ids| {
            let z = tape.leaf(z.clone());
            let pool = tape.maxpool2d(z)?;
            let u = tape.maxunpool2d(ids[0], pool)?;
            contract(tape, u, &r)
        },
        opts,
    )
}

fn check_softmax(seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&[2, 3, 2, 2], -2.0, 2.0, &mut rng);
    let r = uniform(&[2, 3, 2, 2], -1.0, 1.0, &mut rng);
    gradcheck(
        &named(vec![("x", x)]),
        |tape, ids| {
            let y = tape.softmax_channels(ids[0])?;
            contract(tape, y, &r)
        },
        opts,
    )
}

fn random_target(n: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let target = (0..n).map(|_| rng.gen_bool(0.3) as u8).collect();
    let mut fov: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.8) as u8).collect();
    fov[0] = 1;
    (target, fov)
}

fn check_cross_entropy(seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probs = uniform(&[2, 2, 3, 3], 0.05, 0.95, &mut rng);
    let (target, fov) = random_target(2 * 9, &mut rng);
    gradcheck(
        &named(vec![("probs", probs)]),
        |tape, ids| {
            tape.record(
                Op::WeightedCrossEntropy {
                    target: target.clone(),
                    weights: vec![0.6, 3.0],
                    fov: fov.clone(),
                },
                ids,
            )
        },
        opts,
    )
}

fn check_elementwise(seed: u64, opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = named(vec![
        ("a", uniform(&[2, 3], -1.0, 1.0, &mut rng)),
        ("b", uniform(&[2, 3], -1.0, 1.0, &mut rng)),
    ]);
    gradcheck(
        &params,
        |tape, ids| {
            // mean(0.5·(a + b) ⊙ (a − b)) + sum(a)
            let s = tape.add(ids[0], ids[1])?;
            let d = tape.sub(ids[0], ids[1])?;
            let p = tape.mul(s, d)?;
            let h = tape.scale(p, 0.5)?;
            let m = tape.mean(h)?;
            let t = tape.sum(ids[0])?;
            tape.add(m, t)
        },
        opts,
    )
}

/// Checks of every individual operation, prefixed by layer name.
pub fn layer_gradchecks(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut report = GradcheckReport {
        tolerance: opts.tolerance,
        params: Vec::new(),
    };
    report.merge("elementwise.", check_elementwise(1, opts)?);
    report.merge("conv3x3.", check_conv(3, 2, opts)?);
    report.merge("conv1x1.", check_conv(1, 3, opts)?);
    report.merge("batchnorm_train.", check_batchnorm(Mode::Train, 4, opts)?);
    report.merge("batchnorm_eval.", check_batchnorm(Mode::Eval, 5, opts)?);
    report.merge("relu.", check_relu(6, opts)?);
    report.merge("maxpool.", check_maxpool(7, opts)?);
    report.merge("maxunpool.", check_unpool(8, opts)?);
    report.merge("softmax.", check_softmax(9, opts)?);
    report.merge("cross_entropy.", check_cross_entropy(10, opts)?);
    Ok(report)
}

/// The whole network on a `1×3×16×16` input with the weighted loss, with
/// respect to every learnable and the input.
pub fn model_gradcheck(
    config: RCNetConfig,
    mode: Mode,
    seed: u64,
    opts: &GradcheckOptions,
) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ModelParams::<f64>::build(config, seed)?;
    if mode == Mode::Eval {
        for bn in model.batch_norms_mut() {
            let c = bn.channels();
            bn.running_mean = uniform(&[c], -0.2, 0.2, &mut rng);
            bn.running_var = uniform(&[c], 0.5, 2.0, &mut rng);
        }
    }
    let mut params: Vec<(String, Tensor<f64>)> = model
        .learnables()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let n_learn = params.len();
    let mut shape = COMPOSITE_INPUT;
    shape[1] = config.in_channels;
    params.push(("input".into(), uniform(&shape, 0.0, 1.0, &mut rng)));
    let (target, fov) = random_target(shape[2] * shape[3], &mut rng);
    gradcheck(
        &params,
        |tape, ids| {
            let graph = build_graph(tape, &model, &ids[..n_learn], ids[n_learn], mode)?;
            tape.record(
                Op::WeightedCrossEntropy {
                    target: target.clone(),
                    weights: vec![0.6, 3.0],
                    fov: fov.clone(),
                },
                &[graph.probs],
            )
        },
        opts,
    )
}

/// Every layer check plus the network in train and eval mode.
pub fn full_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    let mut report = layer_gradchecks(opts)?;
    let config = RCNetConfig::default();
    report.merge(
        "rcnet.train.",
        model_gradcheck(config, Mode::Train, 11, opts)?,
    );
    report.merge(
        "rcnet.eval.",
        model_gradcheck(config, Mode::Eval, 12, opts)?,
    );
    Ok(report)
}
