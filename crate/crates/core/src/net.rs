//! Toy end-to-end parsing network.
//!
//! A three-layer 3x3 encoder produces a low-level map at half resolution
//! and a high-level map at quarter resolution. An edge head on the
//! low-level map predicts a two-channel edge map whose channel-1 softmax
//! probability drives the edge-aware reasoning blocks (one per feature
//! map). The refined high map is upsampled, concatenated with the refined
//! low map and decoded by a 1x1 convolution into parsing logits at the
//! half-resolution grid. Gradients flow through the edge probabilities
//! back into the edge head.

use std::collections::BTreeMap;

use rand::Rng;

use crate::data::{EdgeMask, LabelMap};
use crate::error::{Error, Result};
use crate::graph::{self, EagrConfig, EagrParamIds, EagrParams, Projection};
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Probabilities are clamped to this floor before any log in the losses.
pub const PROB_FLOOR: f64 = 1e-12;

/// Structural and optimizer settings of the network.
#[derive(Debug, Clone)]
pub struct NetConfig {
    pub num_classes: usize,
    pub input_size: (usize, usize),
    pub c_low: usize,
    pub c_high: usize,
    pub eagr_low: EagrConfig,
    pub eagr_high: EagrConfig,
    /// Weight of the edge cross entropy in the total loss.
    pub lambda1: f64,
    /// Weight of the boundary-attention term in the total loss.
    pub lambda2: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl NetConfig {
    /// Defaults sized for 32x32 synthetic faces.
    pub fn toy32() -> Self {
        let eagr = EagrConfig {
            t_dim: 6,
            k_dim: 8,
            pool_grid: (4, 4),
            central_sel: (2, 2),
            residual_reasoning: true,
        };
        NetConfig {
            num_classes: 8,
            input_size: (32, 32),
            c_low: 12,
            c_high: 16,
            eagr_low: eagr.clone(),
            eagr_high: eagr,
            lambda1: 1.0,
            lambda2: 1.0,
            lr: 0.001,
            weight_decay: 0.0005,
            momentum: 0.9,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::contract(format!(
                "input size {h}x{w} must be divisible by 4 (two stride-2 stages)"
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::contract("need at least 2 classes"));
        }
        if !(self.lambda1.is_finite() && self.lambda2.is_finite())
            || self.lambda1 < 0.0
            || self.lambda2 < 0.0
        {
            return Err(Error::contract(
                "loss weights must be finite and non-negative",
            ));
        }
        self.eagr_low.validate(self.c_low)?;
        self.eagr_high.validate(self.c_high)?;
        let (lh, lw) = (h / 2, w / 2);
        let (hh, hw_) = (h / 4, w / 4);
        if self.eagr_low.pool_grid.0 > lh || self.eagr_low.pool_grid.1 > lw {
            return Err(Error::contract(
                "low-level pooling grid larger than the feature map",
            ));
        }
        if self.eagr_high.pool_grid.0 > hh || self.eagr_high.pool_grid.1 > hw_ {
            return Err(Error::contract(
                "high-level pooling grid larger than the feature map",
            ));
        }
        Ok(())
    }

    /// Grid of the decoder outputs (half the input resolution).
    pub fn logit_grid(&self) -> (usize, usize) {
        (self.input_size.0 / 2, self.input_size.1 / 2)
    }
}

/// Which computation path a run exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    /// The full model.
    None,
    /// Bypass both reasoning blocks entirely (no block parameters exist).
    Baseline,
    /// Feed a constant all-ones edge map into the projections.
    NoEdge,
    /// Projection and reprojection only, skipping the graph convolution.
    NoReasoning,
    /// Train with the boundary-attention weight forced to zero.
    NoBa,
}

impl Ablation {
    pub fn parse(flag: &str) -> Result<Self> {
        match flag {
            "none" | "full" => Ok(Ablation::None),
            "baseline" => Ok(Ablation::Baseline),
            "no-edge" => Ok(Ablation::NoEdge),
            "no-reasoning" => Ok(Ablation::NoReasoning),
            "no-ba" => Ok(Ablation::NoBa),
            other => Err(Error::contract(format!(
                "unknown ablation {other:?}; expected baseline, no-edge, no-reasoning or no-ba"
            ))),
        }
    }

    pub fn uses_eagr(&self) -> bool {
        !matches!(self, Ablation::Baseline)
    }

    /// The boundary-attention weight actually applied.
    pub fn effective_lambda2(&self, lambda2: f64) -> f64 {
        if matches!(self, Ablation::NoBa) {
            0.0
        } else {
            lambda2
        }
    }
}

/// One 3x3 convolution layer of the encoder.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: Tensor,
    pub b: Tensor,
    pub stride: usize,
}

impl ConvLayer {
    fn init(cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let s = 1.0 / ((9 * cin) as f64).sqrt();
        ConvLayer {
            w: Tensor::uniform(&[3, 3, cin, cout], -s, s, rng),
            b: Tensor::zeros(&[cout]),
            stride,
        }
    }
}

/// All learnable state. `eagr` holds the low-level and high-level block
/// parameters in that order, or is empty for the baseline.
#[derive(Debug, Clone)]
pub struct NetParams {
    pub enc: Vec<ConvLayer>,
    pub edge_w: Tensor,
    pub edge_b: Tensor,
    pub eagr: Vec<EagrParams>,
    pub dec_w: Tensor,
    pub dec_b: Tensor,
}

impl NetParams {
    /// Fresh parameters; reasoning blocks are created unless the run is
    /// the structural baseline.
    pub fn init(cfg: &NetConfig, with_eagr: bool, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let enc = vec![
            ConvLayer::init(3, cfg.c_low, 1, rng),
            ConvLayer::init(cfg.c_low, cfg.c_low, 2, rng),
            ConvLayer::init(cfg.c_low, cfg.c_high, 2, rng),
        ];
        let se = 1.0 / (cfg.c_low as f64).sqrt();
        let edge_w = Tensor::uniform(&[cfg.c_low, 2], -se, se, rng);
        let edge_b = Tensor::zeros(&[2]);
        let eagr = if with_eagr {
            vec![
                EagrParams::init(&cfg.eagr_low, cfg.c_low, rng)?,
                EagrParams::init(&cfg.eagr_high, cfg.c_high, rng)?,
            ]
        } else {
            Vec::new()
        };
        let dc = cfg.c_low + cfg.c_high;
        let sd = 1.0 / (dc as f64).sqrt();
        let dec_w = Tensor::uniform(&[dc, cfg.num_classes], -sd, sd, rng);
        let dec_b = Tensor::zeros(&[cfg.num_classes]);
        Ok(NetParams {
            enc,
            edge_w,
            edge_b,
            eagr,
            dec_w,
            dec_b,
        })
    }

    /// Stable checkpoint names paired with each tensor. Reasoning blocks
    /// serialize as `eagr.<i>.<field>` with index 0 = low, 1 = high.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.enc.iter().enumerate() {
            out.push((format!("enc.{i}.w"), &layer.w));
            out.push((format!("enc.{i}.b"), &layer.b));
        }
        out.push(("edge.w".to_string(), &self.edge_w));
        out.push(("edge.b".to_string(), &self.edge_b));
        for (i, block) in self.eagr.iter().enumerate() {
            for (field, t) in block.named() {
                out.push((format!("eagr.{i}.{field}"), t));
            }
        }
        out.push(("dec.w".to_string(), &self.dec_w));
        out.push(("dec.b".to_string(), &self.dec_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, layer) in self.enc.iter_mut().enumerate() {
            out.push((format!("enc.{i}.w"), &mut layer.w));
            out.push((format!("enc.{i}.b"), &mut layer.b));
        }
        out.push(("edge.w".to_string(), &mut self.edge_w));
        out.push(("edge.b".to_string(), &mut self.edge_b));
        for (i, block) in self.eagr.iter_mut().enumerate() {
            for (field, t) in block.named_mut() {
                out.push((format!("eagr.{i}.{field}"), t));
            }
        }
        out.push(("dec.w".to_string(), &mut self.dec_w));
        out.push(("dec.b".to_string(), &mut self.dec_b));
        out
    }

    pub fn insert_into(&self, tape: &mut Tape) -> Result<NetParamIds> {
        let mut enc = Vec::new();
        for layer in &self.enc {
            enc.push((
                tape.leaf(layer.w.clone().with_grad())?,
                tape.leaf(layer.b.clone().with_grad())?,
                layer.stride,
            ));
        }
        let edge_w = tape.leaf(self.edge_w.clone().with_grad())?;
        let edge_b = tape.leaf(self.edge_b.clone().with_grad())?;
        let mut eagr = Vec::new();
        for block in &self.eagr {
            eagr.push(block.insert_into(tape)?);
        }
        let dec_w = tape.leaf(self.dec_w.clone().with_grad())?;
        let dec_b = tape.leaf(self.dec_b.clone().with_grad())?;
        Ok(NetParamIds {
            enc,
            edge_w,
            edge_b,
            eagr,
            dec_w,
            dec_b,
        })
    }

    /// Copies gradients off a finished tape into the parameter tensors,
    /// in the same order as `named`.
    pub fn store_grads(&mut self, tape: &Tape, ids: &NetParamIds) -> Result<()> {
        let id_list = ids.in_order();
        let mut named = self.named_mut();
        if id_list.len() != named.len() {
            return Err(Error::contract("parameter list and id list diverge"));
        }
        for ((name, t), id) in named.iter_mut().zip(id_list) {
            let g = tape
                .grad(id)
                .ok_or_else(|| Error::contract(format!("no gradient recorded for {name}")))?;
            t.grad = Some(g.to_vec());
        }
        Ok(())
    }
}

/// Tape handles of every network parameter, in `named` order.
#[derive(Debug, Clone)]
pub struct NetParamIds {
    pub enc: Vec<(TensorId, TensorId, usize)>,
    pub edge_w: TensorId,
    pub edge_b: TensorId,
    pub eagr: Vec<EagrParamIds>,
    pub dec_w: TensorId,
    pub dec_b: TensorId,
}

impl NetParamIds {
    pub fn in_order(&self) -> Vec<TensorId> {
        let mut out = Vec::new();
        for &(w, b, _) in &self.enc {
            out.push(w);
            out.push(b);
        }
        out.push(self.edge_w);
        out.push(self.edge_b);
        for block in &self.eagr {
            out.extend([
                block.w_phi,
                block.b_phi,
                block.w_theta,
                block.b_theta,
                block.w_sigma,
                block.b_sigma,
                block.w_g,
                block.adj,
            ]);
        }
        out.push(self.dec_w);
        out.push(self.dec_b);
        out
    }
}

/// Forward outputs plus the projections, which the response-map export
/// reads back.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// `[H/2, W/2, N]`.
    pub parsing_logits: TensorId,
    /// `[H/2, W/2, 2]`.
    pub edge_logits: TensorId,
    pub proj_low: Option<Projection>,
    pub proj_high: Option<Projection>,
}

fn refine(
    tape: &mut Tape,
    x2: TensorId,
    y: TensorId,
    spatial: (usize, usize),
    params: &EagrParamIds,
    cfg: &EagrConfig,
    ablation: Ablation,
) -> Result<(TensorId, Projection)> {
    let p = graph::build_projection(tape, x2, y, spatial, params, cfg)?;
    let x_g = graph::project(tape, &p, x2, params)?;
    let vertices = if matches!(ablation, Ablation::NoReasoning) {
        x_g
    } else {
        graph::reason(tape, x_g, params, cfg)?
    };
    let z = graph::reproject(tape, &p, vertices, x2, params)?;
    Ok((z, p))
}

/// Runs the network on one `[H, W, 3]` image.
pub fn forward(
    tape: &mut Tape,
    image: TensorId,
    ids: &NetParamIds,
    cfg: &NetConfig,
    ablation: Ablation,
) -> Result<ForwardOut> {
    let (h0, w0) = cfg.input_size;
    if tape.shape(image) != [h0, w0, 3] {
        return Err(Error::dimension("forward", tape.shape(image), &[h0, w0, 3]));
    }
    if ablation.uses_eagr() && ids.eagr.len() != 2 {
        return Err(Error::contract(
            "this run needs low and high reasoning blocks",
        ));
    }

    // encoder: stride 1, then two stride-2 stages
    let mut x = image;
    let mut maps = Vec::new();
    for &(w, b, stride) in &ids.enc {
        let conv = tape.conv3x3(x, w, b, stride)?;
        x = tape.relu(conv)?;
        maps.push(x);
    }
    let low3 = maps[1];
    let high3 = maps[2];
    let (lh, lw) = (h0 / 2, w0 / 2);
    let (hh, hw_) = (h0 / 4, w0 / 4);
    let low2 = tape.reshape(low3, &[lh * lw, cfg.c_low])?;
    let high2 = tape.reshape(high3, &[hh * hw_, cfg.c_high])?;

    // edge head on the low-level features
    let edge_logits2 = tape.conv1x1(low2, ids.edge_w, ids.edge_b)?;
    let edge_prob = tape.softmax_rows(edge_logits2)?;
    let y_low = tape.slice_cols(edge_prob, 1, 2)?;

    let (refined_low, refined_high, proj_low, proj_high) = if ablation.uses_eagr() {
        let y_low_used = if matches!(ablation, Ablation::NoEdge) {
            tape.constant(Tensor::ones(&[lh * lw, 1]))?
        } else {
            y_low
        };
        let y_low3 = tape.reshape(y_low_used, &[lh, lw, 1])?;
        let y_high3 = tape.downsample_nearest(y_low3, 2)?;
        let y_high = tape.reshape(y_high3, &[hh * hw_, 1])?;
        let (rl, pl) = refine(
            tape,
            low2,
            y_low_used,
            (lh, lw),
            &ids.eagr[0],
            &cfg.eagr_low,
            ablation,
        )?;
        let (rh, ph) = refine(
            tape,
            high2,
            y_high,
            (hh, hw_),
            &ids.eagr[1],
            &cfg.eagr_high,
            ablation,
        )?;
        (rl, rh, Some(pl), Some(ph))
    } else {
        (low2, high2, None, None)
    };

    // decode: upsample the high map, concatenate, 1x1 conv
    let rh3 = tape.reshape(refined_high, &[hh, hw_, cfg.c_high])?;
    let up3 = tape.upsample_nearest(rh3, 2)?;
    let up2 = tape.reshape(up3, &[lh * lw, cfg.c_high])?;
    let cat = tape.concat_channels(refined_low, up2)?;
    let parsing2 = tape.conv1x1(cat, ids.dec_w, ids.dec_b)?;

    Ok(ForwardOut {
        parsing_logits: tape.reshape(parsing2, &[lh, lw, cfg.num_classes])?,
        edge_logits: tape.reshape(edge_logits2, &[lh, lw, 2])?,
        proj_low,
        proj_high,
    })
}

/// Flattens `[h, w, n]` logits to `[h*w, n]`, validating against a target
/// grid.
fn flatten_logits(
    tape: &mut Tape,
    logits: TensorId,
    grid: (usize, usize),
) -> Result<(TensorId, usize)> {
    let s = tape.shape(logits).to_vec();
    match s.len() {
        3 if (s[0], s[1]) == grid => {
            let n = s[2];
            Ok((tape.reshape(logits, &[s[0] * s[1], n])?, n))
        }
        2 if s[0] == grid.0 * grid.1 => Ok((logits, s[1])),
        _ => Err(Error::dimension("loss", &s, &[grid.0, grid.1, 0])),
    }
}

/// Shared masked cross entropy: `-sum(mask_ij * log p_ij) / norm` where
/// the mask marks the true class of every scored pixel.
fn masked_ce(tape: &mut Tape, logits2: TensorId, mask: Tensor, norm: f64) -> Result<TensorId> {
    let mask_id = tape.constant(mask)?;
    let probs = tape.softmax_rows(logits2)?;
    let floored = tape.clamp_min(probs, PROB_FLOOR)?;
    let logp = tape.log(floored)?;
    let picked = tape.hadamard(logp, mask_id)?;
    let total = tape.sum_all(picked)?;
    tape.scale(total, -1.0 / norm)
}

fn one_hot(labels: &LabelMap, n: usize) -> Result<Tensor> {
    let hw = labels.height * labels.width;
    let mut data = vec![0.0; hw * n];
    for (i, &c) in labels.classes.iter().enumerate() {
        if c as usize >= n {
            return Err(Error::contract(format!(
                "label {c} out of range for {n} classes"
            )));
        }
        data[i * n + c as usize] = 1.0;
    }
    Tensor::new(vec![hw, n], data)
}

/// Mean cross entropy of the parsing logits against labels on the same
/// grid.
pub fn loss_parsing(tape: &mut Tape, logits: TensorId, labels: &LabelMap) -> Result<TensorId> {
    let grid = (labels.height, labels.width);
    let (logits2, n) = flatten_logits(tape, logits, grid)?;
    let mask = one_hot(labels, n)?;
    masked_ce(tape, logits2, mask, (grid.0 * grid.1) as f64)
}

/// Mean binary cross entropy of the edge logits against the edge mask.
pub fn loss_edge(tape: &mut Tape, edge_logits: TensorId, mask: &EdgeMask) -> Result<TensorId> {
    let as_labels = LabelMap::new(mask.height, mask.width, mask.bits.clone())?;
    loss_parsing(tape, edge_logits, &as_labels)
}

/// Boundary-attention loss: cross entropy restricted to edge pixels,
/// normalized by `max(1, #edge pixels)`. Exactly zero when the mask is
/// empty.
pub fn loss_ba(
    tape: &mut Tape,
    logits: TensorId,
    labels: &LabelMap,
    mask: &EdgeMask,
) -> Result<TensorId> {
    if labels.height != mask.height || labels.width != mask.width {
        return Err(Error::dimension(
            "loss_ba",
            &[labels.height, labels.width],
            &[mask.height, mask.width],
        ));
    }
    let grid = (labels.height, labels.width);
    let (logits2, n) = flatten_logits(tape, logits, grid)?;
    let mut onehot = one_hot(labels, n)?;
    for (i, &bit) in mask.bits.iter().enumerate() {
        if bit == 0 {
            for v in &mut onehot.data[i * n..(i + 1) * n] {
                *v = 0.0;
            }
        }
    }
    let norm = mask.count_ones().max(1) as f64;
    masked_ce(tape, logits2, onehot, norm)
}

/// The three loss terms and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub parsing: TensorId,
    pub edge: TensorId,
    pub ba: TensorId,
    pub total: TensorId,
}

/// `L = L_parsing + lambda1 * L_edge + lambda2 * L_BA`.
pub fn loss_total(
    tape: &mut Tape,
    parsing_logits: TensorId,
    edge_logits: TensorId,
    labels: &LabelMap,
    mask: &EdgeMask,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBundle> {
    let parsing = loss_parsing(tape, parsing_logits, labels)?;
    let edge = loss_edge(tape, edge_logits, mask)?;
    let ba = loss_ba(tape, parsing_logits, labels, mask)?;
    let edge_w = tape.scale(edge, lambda1)?;
    let ba_w = tape.scale(ba, lambda2)?;
    let pe = tape.add(parsing, edge_w)?;
    let total = tape.add(pe, ba_w)?;
    Ok(LossBundle {
        parsing,
        edge,
        ba,
        total,
    })
}

/// SGD with momentum and weight decay:
/// `v <- momentum*v + grad + wd*param; param <- param - lr*v`.
/// Velocity buffers persist across steps, keyed by parameter name.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update to every named tensor, consuming its gradient.
    pub fn step(&mut self, params: Vec<(String, &mut Tensor)>) -> Result<()> {
        for (name, t) in params {
            let grad = t.grad.take().ok_or_else(|| {
                Error::contract(format!("sgd_step: no gradient populated for {name}"))
            })?;
            if grad.len() != t.data.len() {
                return Err(Error::contract(format!(
                    "gradient size mismatch for {name}"
                )));
            }
            let v = self
                .velocity
                .entry(name)
                .or_insert_with(|| vec![0.0; t.data.len()]);
            for i in 0..t.data.len() {
                v[i] = self.momentum * v[i] + grad[i] + self.weight_decay * t.data[i];
                t.data[i] -= self.lr * v[i];
            }
        }
        Ok(())
    }
}
