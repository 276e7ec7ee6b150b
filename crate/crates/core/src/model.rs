//! The RC-Net segmentation network.
//!
//! Six residual blocks around two 2×2 max-pool / unpool stages:
//!
//! ```text
//! input ─► down1 ──┬─► pool1 ─► down2 ──┬─► pool2 ─► bridge ─► unpool2 ─(+)─► up1 ─► unpool1 ─(+)─► up2 ─► head
//!                  │                    └──────────── identity ──────────┘                    │
//!                  └────────────────────────────────── identity ──────────────────────────────┘
//! ```
//!
//! Each block runs `[3×3 conv → BN → ReLU] × convs_per_block` on its main
//! path, adds a `1×1 conv → BN` projection of the block input to the last
//! pre-activation, then applies the final ReLU. The output head is a 3×3
//! conv, BN and ReLU followed by a 1×1 classifier and a channel softmax.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{NodeId, Op, Tape};
use crate::error::{Error, Result};
use crate::layers::{BatchNormParams, ConvParams, Mode};
use crate::tensor::{Element, Tensor};

pub const BLOCK_NAMES: [&str; 6] = ["input", "down1", "down2", "bridge", "up1", "up2"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RCNetConfig {
    /// Output channels of input, down1, down2, bridge, up1, up2.
    pub channels: [usize; 6],
    pub convs_per_block: usize,
    pub in_channels: usize,
    pub num_classes: usize,
}

impl Default for RCNetConfig {
    fn default() -> Self {
        RCNetConfig {
            channels: [8, 16, 32, 32, 16, 8],
            convs_per_block: 1,
            in_channels: 3,
            num_classes: 2,
        }
    }
}

impl RCNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(1..=2).contains(&self.convs_per_block) {
            return Err(Error::Config(format!(
                "convs_per_block must be 1 or 2, got {}",
                self.convs_per_block
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        if self.num_classes != 2 {
            return Err(Error::Config(format!(
                "num_classes must be 2 (vessel / background), got {}",
                self.num_classes
            )));
        }
        let [_, down1, down2, bridge, up1, _] = self.channels;
        if bridge != down2 {
            return Err(Error::Config(format!(
                "bridge ({bridge}) must match down2 ({down2}) for the second identity skip"
            )));
        }
        if up1 != down1 {
            return Err(Error::Config(format!(
                "up1 ({up1}) must match down1 ({down1}) for the first identity skip"
            )));
        }
        Ok(())
    }

    /// `(in, out)` channels of each block, in [`BLOCK_NAMES`] order.
    pub fn block_channels(&self) -> [(usize, usize); 6] {
        let c = self.channels;
        [
            (self.in_channels, c[0]),
            (c[0], c[1]),
            (c[1], c[2]),
            (c[2], c[3]),
            (c[3], c[4]),
            (c[4], c[5]),
        ]
    }
}

impl fmt::Display for RCNetConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = self.channels;
        write!(
            f,
            "channels ({}, {}, {}, {}, {}, {}), {} conv(s) per block, {} -> {} classes",
            c[0],
            c[1],
            c[2],
            c[3],
            c[4],
            c[5],
            self.convs_per_block,
            self.in_channels,
            self.num_classes
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Learnable,
    RunningStat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T = f32> {
    pub name: String,
    /// Main path, one `(conv 3×3, BN)` pair per conv.
    pub convs: Vec<(ConvParams<T>, BatchNormParams<T>)>,
    pub skip: ConvParams<T>,
    pub skip_bn: BatchNormParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<T = f32> {
    pub conv: ConvParams<T>,
    pub bn: BatchNormParams<T>,
    pub classifier: ConvParams<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = f32> {
    config: RCNetConfig,
    pub blocks: Vec<BlockParams<T>>,
    pub head: HeadParams<T>,
}

fn bn_entries<'a, T>(
    prefix: &str,
    bn: &'a BatchNormParams<T>,
    out: &mut Vec<(String, ParamKind, &'a Tensor<T>)>,
) {
    out.push((format!("{prefix}.gamma"), ParamKind::Learnable, &bn.gamma));
    out.push((format!("{prefix}.beta"), ParamKind::Learnable, &bn.beta));
    out.push((
        format!("{prefix}.running_mean"),
        ParamKind::RunningStat,
        &bn.running_mean,
    ));
    out.push((
        format!("{prefix}.running_var"),
        ParamKind::RunningStat,
        &bn.running_var,
    ));
}

fn conv_entries<'a, T>(
    prefix: &str,
    conv: &'a ConvParams<T>,
    out: &mut Vec<(String, ParamKind, &'a Tensor<T>)>,
) {
    out.push((
        format!("{prefix}.weight"),
        ParamKind::Learnable,
        &conv.kernel,
    ));
    out.push((format!("{prefix}.bias"), ParamKind::Learnable, &conv.bias));
}

fn bn_entries_mut<'a, T>(
    prefix: &str,
    bn: &'a mut BatchNormParams<T>,
    out: &mut Vec<(String, ParamKind, &'a mut Tensor<T>)>,
) {
    out.push((
        format!("{prefix}.gamma"),
        ParamKind::Learnable,
        &mut bn.gamma,
    ));
    out.push((format!("{prefix}.beta"), ParamKind::Learnable, &mut bn.beta));
    out.push((
        format!("{prefix}.running_mean"),
        ParamKind::RunningStat,
        &mut bn.running_mean,
    ));
    out.push((
        format!("{prefix}.running_var"),
        ParamKind::RunningStat,
        &mut bn.running_var,
    ));
}

fn conv_entries_mut<'a, T>(
    prefix: &str,
    conv: &'a mut ConvParams<T>,
    out: &mut Vec<(String, ParamKind, &'a mut Tensor<T>)>,
) {
    out.push((
        format!("{prefix}.weight"),
        ParamKind::Learnable,
        &mut conv.kernel,
    ));
    out.push((
        format!("{prefix}.bias"),
        ParamKind::Learnable,
        &mut conv.bias,
    ));
}

impl<T: Element> ModelParams<T> {
    /// Deterministic initialization: He-normal kernels, zero biases and
    /// identity batch norms.
    pub fn build(config: RCNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(6);
        for (name, (cin, cout)) in BLOCK_NAMES.iter().zip(config.block_channels()) {
            let mut convs = Vec::with_capacity(config.convs_per_block);
            for i in 0..config.convs_per_block {
                let conv_in = if i == 0 { cin } else { cout };
                convs.push((
                    ConvParams::he_normal(conv_in, cout, 3, &mut rng)?,
                    BatchNormParams::new(cout)?,
                ));
            }
            blocks.push(BlockParams {
                name: name.to_string(),
                convs,
                skip: ConvParams::he_normal(cin, cout, 1, &mut rng)?,
                skip_bn: BatchNormParams::new(cout)?,
            });
        }
        let last = config.channels[5];
        let head = HeadParams {
            conv: ConvParams::he_normal(last, last, 3, &mut rng)?,
            bn: BatchNormParams::new(last)?,
            classifier: ConvParams::he_normal(last, config.num_classes, 1, &mut rng)?,
        };
        Ok(ModelParams {
            config,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &RCNetConfig {
        &self.config
    }

    /// Every tensor with its canonical name, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, ParamKind, &Tensor<T>)> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for (i, (conv, bn)) in b.convs.iter().enumerate() {
                conv_entries(&format!("{}.conv{}", b.name, i + 1), conv, &mut out);
                bn_entries(&format!("{}.bn{}", b.name, i + 1), bn, &mut out);
            }
            conv_entries(&format!("{}.skip", b.name), &b.skip, &mut out);
            bn_entries(&format!("{}.skip_bn", b.name), &b.skip_bn, &mut out);
        }
        conv_entries("head.conv", &self.head.conv, &mut out);
        bn_entries("head.bn", &self.head.bn, &mut out);
        conv_entries("head.classifier", &self.head.classifier, &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ParamKind, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            for (i, (conv, bn)) in b.convs.iter_mut().enumerate() {
                conv_entries_mut(&format!("{}.conv{}", b.name, i + 1), conv, &mut out);
                bn_entries_mut(&format!("{}.bn{}", b.name, i + 1), bn, &mut out);
            }
            conv_entries_mut(&format!("{}.skip", b.name), &mut b.skip, &mut out);
            bn_entries_mut(&format!("{}.skip_bn", b.name), &mut b.skip_bn, &mut out);
        }
        conv_entries_mut("head.conv", &mut self.head.conv, &mut out);
        bn_entries_mut("head.bn", &mut self.head.bn, &mut out);
        conv_entries_mut("head.classifier", &mut self.head.classifier, &mut out);
        out
    }

    /// Learnable tensors only, in the order the forward pass consumes them.
    pub fn learnables(&self) -> Vec<(String, &Tensor<T>)> {
        self.tensors()
            .into_iter()
            .filter(|(_, kind, _)| *kind == ParamKind::Learnable)
            .map(|(name, _, t)| (name, t))
            .collect()
    }

    pub fn learnables_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        self.tensors_mut()
            .into_iter()
            .filter(|(_, kind, _)| *kind == ParamKind::Learnable)
            .map(|(name, _, t)| (name, t))
            .collect()
    }

    /// Batch norms in the order the forward pass applies them.
    pub fn batch_norms_mut(&mut self) -> Vec<&mut BatchNormParams<T>> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            for (_, bn) in &mut b.convs {
                out.push(bn);
            }
            out.push(&mut b.skip_bn);
        }
        out.push(&mut self.head.bn);
        out
    }

    pub fn block(&self, name: &str) -> Option<&BlockParams<T>> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut BlockParams<T>> {
        self.blocks.iter_mut().find(|b| b.name == name)
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        let conv = |c: &ConvParams<T>| ConvParams {
            kernel: c.kernel.cast(),
            bias: c.bias.cast(),
        };
        let bn = |b: &BatchNormParams<T>| BatchNormParams {
            gamma: b.gamma.cast(),
            beta: b.beta.cast(),
            running_mean: b.running_mean.cast(),
            running_var: b.running_var.cast(),
            momentum: b.momentum,
            eps: b.eps,
        };
        ModelParams {
            config: self.config,
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockParams {
                    name: b.name.clone(),
                    convs: b.convs.iter().map(|(c, n)| (conv(c), bn(n))).collect(),
                    skip: conv(&b.skip),
                    skip_bn: bn(&b.skip_bn),
                })
                .collect(),
            head: HeadParams {
                conv: conv(&self.head.conv),
                bn: bn(&self.head.bn),
                classifier: conv(&self.head.classifier),
            },
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.is_finite())
    }
}

/// Number of learnable scalars: conv kernels and biases plus BN gamma and
/// beta. Running statistics are not counted.
pub fn count_params<T: Element>(params: &ModelParams<T>) -> usize {
    params.learnables().iter().map(|(_, t)| t.len()).sum()
}

// ---------------------------------------------------------------------------
// Forward pass

/// Nodes of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct Graph {
    pub logits: NodeId,
    pub probs: NodeId,
    /// Train-mode batch-norm nodes in [`ModelParams::batch_norms_mut`] order.
    pub batch_norms: Vec<NodeId>,
    /// Named intermediate feature maps, in execution order.
    pub activations: Vec<(String, NodeId)>,
}

struct Builder<'a, T: Element> {
    tape: &'a mut Tape<T>,
    leaves: std::slice::Iter<'a, NodeId>,
    mode: Mode,
    batch_norms: Vec<NodeId>,
    activations: Vec<(String, NodeId)>,
}

impl<T: Element> Builder<'_, T> {
    fn next_leaf(&mut self) -> Result<NodeId> {
        self.leaves
            .next()
            .copied()
            .ok_or_else(|| Error::invalid("forward", "fewer parameter leaves than learnables"))
    }

    fn conv(&mut self, x: NodeId, params: &ConvParams<T>) -> Result<NodeId> {
        let (k, b) = (self.next_leaf()?, self.next_leaf()?);
        self.tape.conv2d(x, k, b, params.same_padding())
    }

    fn bn(&mut self, x: NodeId, params: &BatchNormParams<T>) -> Result<NodeId> {
        let (g, b) = (self.next_leaf()?, self.next_leaf()?);
        match self.mode {
            Mode::Train => {
                let id = self
                    .tape
                    .record(Op::BatchNormTrain { eps: params.eps }, &[x, g, b])?;
                self.batch_norms.push(id);
                Ok(id)
            }
            Mode::Eval => self.tape.record(
                Op::BatchNormEval {
                    running_mean: params.running_mean.clone(),
                    running_var: params.running_var.clone(),
                    eps: params.eps,
                },
                &[x, g, b],
            ),
        }
    }

    fn capture(&mut self, name: impl Into<String>, id: NodeId) {
        self.activations.push((name.into(), id));
    }

    fn block(&mut self, x: NodeId, p: &BlockParams<T>) -> Result<NodeId> {
        let mut h = x;
        let mut main = x;
        for (i, (conv, bn)) in p.convs.iter().enumerate() {
            let c = self.conv(h, conv)?;
            main = self.bn(c, bn)?;
            if i + 1 < p.convs.len() {
                h = self.tape.relu(main)?;
            }
        }
        let s = self.conv(x, &p.skip)?;
        let skip = self.bn(s, &p.skip_bn)?;
        let sum = self.tape.add(main, skip)?;
        let out = self.tape.relu(sum)?;
        self.capture(format!("{}.main", p.name), main);
        self.capture(format!("{}.skip", p.name), skip);
        self.capture(format!("{}.sum", p.name), sum);
        self.capture(format!("{}.out", p.name), out);
        Ok(out)
    }
}

/// Records the network on `tape` with the learnables supplied as `leaves`
/// (in [`ModelParams::learnables`] order) and the input as node `x`.
///
/// `params` supplies the architecture and, in eval mode, the running
/// statistics; its learnable values are not read.
pub fn build_graph<T: Element>(
    tape: &mut Tape<T>,
    params: &ModelParams<T>,
    leaves: &[NodeId],
    x: NodeId,
    mode: Mode,
) -> Result<Graph> {
    let (_, c, h, w) = tape.value(x)?.dims4()?;
    if c != params.config.in_channels {
        return Err(Error::invalid(
            "forward",
            format!(
                "input has {c} channels, model expects {}",
                params.config.in_channels
            ),
        ));
    }
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::invalid(
            "forward",
            format!("spatial dims must be multiples of 4, got {h}x{w}"),
        ));
    }
    let expected = params.learnables().len();
    if leaves.len() != expected {
        return Err(Error::invalid(
            "forward",
            format!(
                "{} parameter leaves for {expected} learnables",
                leaves.len()
            ),
        ));
    }

    let mut b = Builder {
        tape,
        leaves: leaves.iter(),
        mode,
        batch_norms: Vec::new(),
        activations: Vec::new(),
    };
    let blocks = &params.blocks;

    let x1 = b.block(x, &blocks[0])?;
    let x2 = b.block(x1, &blocks[1])?;
    let p1 = b.tape.maxpool2d(x2)?;
    b.capture("pool1", p1);
    let x3 = b.block(p1, &blocks[2])?;
    let p2 = b.tape.maxpool2d(x3)?;
    b.capture("pool2", p2);
    let bridge = b.block(p2, &blocks[3])?;

    let u2 = b.tape.maxunpool2d(bridge, p2)?;
    b.capture("unpool2", u2);
    let s2 = b.tape.add(u2, x3)?;
    b.capture("skip2", s2);
    let x4 = b.block(s2, &blocks[4])?;
    let u1 = b.tape.maxunpool2d(x4, p1)?;
    b.capture("unpool1", u1);
    let s1 = b.tape.add(u1, x2)?;
    b.capture("skip1", s1);
    let x5 = b.block(s1, &blocks[5])?;

    let head = &params.head;
    let hc = b.conv(x5, &head.conv)?;
    let hb = b.bn(hc, &head.bn)?;
    let hidden = b.tape.relu(hb)?;
    b.capture("head.hidden", hidden);
    let logits = b.conv(hidden, &head.classifier)?;
    b.capture("logits", logits);
    let probs = b.tape.softmax_channels(logits)?;
    b.capture("probs", probs);

    Ok(Graph {
        logits,
        probs,
        batch_norms: b.batch_norms,
        activations: b.activations,
    })
}

/// Adds every learnable as a leaf, in [`ModelParams::learnables`] order.
pub fn register_learnables<T: Element>(tape: &mut Tape<T>, params: &ModelParams<T>) -> Vec<NodeId> {
    params
        .learnables()
        .into_iter()
        .map(|(_, t)| tape.leaf(t.clone()))
        .collect()
}

#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub probs: Tensor<T>,
    pub activations: Option<Vec<(String, Tensor<T>)>>,
}

/// Runs the network on `x: [N, C, H, W]` and returns per-pixel class
/// probabilities `[N, 2, H, W]`.
///
/// Train mode normalizes with batch statistics but does not touch the
/// running statistics; [`crate::optim`] applies those updates.
pub fn forward<T: Element>(
    params: &ModelParams<T>,
    x: &Tensor<T>,
    mode: Mode,
    capture: bool,
) -> Result<ForwardOutput<T>> {
    let mut tape = Tape::new();
    let leaves = register_learnables(&mut tape, params);
    let input = tape.leaf(x.clone());
    let graph = build_graph(&mut tape, params, &leaves, input, mode)?;
    let activations = capture.then(|| {
        graph
            .activations
            .iter()
            .map(|(name, id)| (name.clone(), tape.nodes()[*id].value().clone()))
            .collect()
    });
    let probs = tape.value(graph.probs)?.clone();
    Ok(ForwardOutput { probs, activations })
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RCN1";
pub const CHECKPOINT_VERSION: u32 = 1;

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint {
        check: "range",
        msg: format!("{what} {v} does not fit in u32"),
    })
}

/// Serializes parameters (including running statistics) to the checkpoint
/// byte layout.
pub fn encode_checkpoint(params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let c = params.config;
    for v in c
        .channels
        .iter()
        .chain([&c.convs_per_block, &c.in_channels, &c.num_classes])
    {
        out.extend_from_slice(&u32_of(*v, "config value")?.to_le_bytes());
    }
    let tensors = params.tensors();
    out.extend_from_slice(&u32_of(tensors.len(), "tensor count")?.to_le_bytes());
    for (name, _, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint {
            check: "range",
            msg: format!("name {name} too long"),
        })?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&u32_of(d, "dim")?.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint {
                check: "length",
                msg: format!("truncated at byte {} (needed {n} more)", self.pos),
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint {
            check: "magic",
            msg: format!("expected {:?}, found {:?}", CHECKPOINT_MAGIC, magic),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint {
            check: "version",
            msg: format!("unsupported format version {version}"),
        });
    }
    let mut channels = [0usize; 6];
    for c in &mut channels {
        *c = r.u32()? as usize;
    }
    let config = RCNetConfig {
        channels,
        convs_per_block: r.u32()? as usize,
        in_channels: r.u32()? as usize,
        num_classes: r.u32()? as usize,
    };
    config.validate().map_err(|e| Error::Checkpoint {
        check: "config",
        msg: e.to_string(),
    })?;

    let mut params = ModelParams::<f32>::build(config, 0)?;
    let count = r.u32()? as usize;
    let mut slots = params.tensors_mut();
    if count != slots.len() {
        return Err(Error::Checkpoint {
            check: "shape",
            msg: format!("{count} tensors, config expects {}", slots.len()),
        });
    }
    for (expected_name, _, slot) in slots.iter_mut() {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::Checkpoint {
            check: "name",
            msg: "tensor name is not UTF-8".into(),
        })?;
        if name != expected_name {
            return Err(Error::Checkpoint {
                check: "name",
                msg: format!("found tensor {name}, expected {expected_name}"),
            });
        }
        let rank = r.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        if dims != slot.shape() {
            return Err(Error::Checkpoint {
                check: "shape",
                msg: format!(
                    "{name} has shape {dims:?}, config expects {:?}",
                    slot.shape()
                ),
            });
        }
        let raw = r.take(slot.len() * 4)?;
        for (dst, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    drop(slots);
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint {
            check: "length",
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ModelParams<f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(params)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        RCNetConfig::default().validate().unwrap();
    }

    #[test]
    fn incompatible_schedules_are_rejected() {
        let mut c = RCNetConfig::default();
        c.channels[4] = 12;
        assert!(matches!(
            ModelParams::<f32>::build(c, 0),
            Err(Error::Config(_))
        ));
        let mut c = RCNetConfig::default();
        c.channels[3] = 24;
        assert!(c.validate().is_err());
        let c = RCNetConfig {
            convs_per_block: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn build_is_deterministic() {
        let a = ModelParams::<f32>::build(RCNetConfig::default(), 42).unwrap();
        let b = ModelParams::<f32>::build(RCNetConfig::default(), 42).unwrap();
        let c = ModelParams::<f32>::build(RCNetConfig::default(), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn batch_norms_start_as_pure_normalization() {
        let p = ModelParams::<f32>::build(RCNetConfig::default(), 1).unwrap();
        for (name, _, t) in p.tensors() {
            if name.ends_with(".gamma") || name.ends_with(".running_var") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
            if name.ends_with(".beta") || name.ends_with(".running_mean") || name.ends_with(".bias")
            {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn names_are_unique() {
        let p = ModelParams::<f32>::build(
            RCNetConfig {
                convs_per_block: 2,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let names: Vec<String> = p.tensors().into_iter().map(|(n, ..)| n).collect();
        let unique: std::collections::BTreeSet<_> = names.iter().collect();
        assert_eq!(unique.len(), names.len());
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = ModelParams::<f32>::build(RCNetConfig::default(), 0).unwrap();
        let odd = Tensor::zeros(&[1, 3, 6, 8]).unwrap();
        assert!(forward(&p, &odd, Mode::Eval, false).is_err());
        let gray = Tensor::zeros(&[1, 1, 8, 8]).unwrap();
        assert!(forward(&p, &gray, Mode::Eval, false).is_err());
    }

    #[test]
    fn checkpoint_rejects_bad_magic_and_truncation() {
        let p = ModelParams::<f32>::build(RCNetConfig::default(), 0).unwrap();
        let mut bytes = encode_checkpoint(&p).unwrap();
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(
            decode_checkpoint(truncated),
            Err(Error::Checkpoint {
                check: "length",
                ..
            })
        ));
        bytes[0] = b'X';
        let err = decode_checkpoint(&bytes).unwrap_err();
        assert!(matches!(err, Error::Checkpoint { check: "magic", .. }));
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let p = ModelParams::<f32>::build(RCNetConfig::default(), 0).unwrap();
        let mut bytes = encode_checkpoint(&p).unwrap();
        // first channel count lives right after magic and version
        bytes[8..12].copy_from_slice(&4u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::Checkpoint { check: "shape", .. })
        ));
    }
}
