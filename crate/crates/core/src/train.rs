//! Training harness: dataset I/O, the SGD loop with augmentation, the
//! evaluation protocol, run logging, and the checkpoint binding of a
//! whole network (parameters plus the config scalars needed to rebuild
//! it).
//!
//! Losses and metrics live on the decoder grid: ground-truth labels are
//! nearest-downsampled to half resolution and the edge mask is extracted
//! there.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::TrainOptions;
use crate::data::{extract_edge_mask, synth_sample, LabelMap, Sample, SynthConfig};
use crate::error::{Error, Result};
use crate::graph::{validate_projection, EagrConfig};
use crate::metrics::{ConfusionMatrix, MergeSpec, MetricsReport};
use crate::net::{forward, loss_total, Ablation, NetConfig, NetParams, Sgd};
use crate::pnm;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// In-memory dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Generates `count` samples indexed `0..count` without touching disk.
    pub fn synthesize(cfg: &SynthConfig, count: u64) -> Result<Self> {
        let samples = (0..count)
            .map(|i| synth_sample(cfg, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { samples })
    }

    /// Writes `image_<i>.ppm` / `labels_<i>.pgm` pairs plus a manifest of
    /// sample indices.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (i, sample) in self.samples.iter().enumerate() {
            pnm::write_ppm(&sample.image, &dir.join(format!("image_{i:05}.ppm")))?;
            pnm::write_pgm(&sample.labels, &dir.join(format!("labels_{i:05}.pgm")))?;
            manifest.push_str(&format!("{i}\n"));
        }
        std::fs::write(dir.join("manifest.txt"), manifest).map_err(|e| Error::io(dir, e))
    }

    /// Loads every sample listed in `manifest.txt`.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        let manifest =
            std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut samples = Vec::new();
        for (lineno, line) in manifest.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let i: usize = line.parse().map_err(|_| Error::Config {
                line: lineno + 1,
                msg: format!("manifest entry {line:?} is not a sample index"),
            })?;
            let image = pnm::read_ppm(&dir.join(format!("image_{i:05}.ppm")))?;
            let labels = pnm::read_pgm(&dir.join(format!("labels_{i:05}.pgm")))?;
            samples.push(Sample { image, labels });
        }
        Ok(Dataset { samples })
    }
}

/// One optimizer step's loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub l_parsing: f64,
    pub l_edge: f64,
    pub l_ba: f64,
    pub l_total: f64,
}

/// Per-step losses and per-epoch evaluation reports. Step numbers are
/// strictly increasing.
#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<(usize, MetricsReport)>,
}

impl RunLog {
    pub fn push_step(&mut self, rec: StepRecord) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if rec.step <= last.step {
                return Err(Error::contract(format!(
                    "step {} not after step {}",
                    rec.step, last.step
                )));
            }
        }
        self.steps.push(rec);
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.steps {
            out.push_str(&format!(
                "step={}\tl_parsing={:.6}\tl_edge={:.6}\tl_ba={:.6}\tl_total={:.6}\n",
                s.step, s.l_parsing, s.l_edge, s.l_ba, s.l_total
            ));
        }
        for (epoch, report) in &self.epochs {
            out.push_str(&format!("epoch={epoch}\t{}\n", report.to_record()));
        }
        out
    }
}

fn grid_factor(cfg: &NetConfig, labels: &LabelMap) -> Result<usize> {
    let (h0, w0) = cfg.input_size;
    if labels.height != h0 || labels.width != w0 {
        return Err(Error::dimension(
            "dataset",
            &[labels.height, labels.width],
            &[h0, w0],
        ));
    }
    Ok(2)
}

/// Trains a fresh network. Deterministic for a fixed config: parameter
/// init, shuffling, and augmentation all derive from `cfg.seed`.
pub fn train(
    train_data: &Dataset,
    eval_data: Option<&Dataset>,
    cfg: &NetConfig,
    opts: &TrainOptions,
    ablation: Ablation,
) -> Result<(NetParams, RunLog)> {
    cfg.validate()?;
    if train_data.samples.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = NetParams::init(cfg, ablation.uses_eagr(), &mut rng)?;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let lambda2 = ablation.effective_lambda2(cfg.lambda2);
    let mut log = RunLog::default();
    let mut step = 0u64;

    for epoch in 1..=opts.epochs {
        let mut order: Vec<usize> = (0..train_data.samples.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch_size) {
            let mut tape = Tape::new();
            let ids = params.insert_into(&mut tape)?;
            let mut total_id = None;
            let mut sums = (0.0, 0.0, 0.0, 0.0);
            for &idx in batch {
                let sample = &train_data.samples[idx];
                let (image, labels) =
                    crate::data::augment(&sample.image, &sample.labels, &mut rng)?;
                let factor = grid_factor(cfg, &labels)?;
                let labels_ds = labels.downsample_nearest(factor)?;
                let mask = extract_edge_mask(&labels_ds);
                let img = tape.constant(image)?;
                let out = forward(&mut tape, img, &ids, cfg, ablation)?;
                let bundle = loss_total(
                    &mut tape,
                    out.parsing_logits,
                    out.edge_logits,
                    &labels_ds,
                    &mask,
                    cfg.lambda1,
                    lambda2,
                )?;
                sums.0 += tape.scalar_value(bundle.parsing)?;
                sums.1 += tape.scalar_value(bundle.edge)?;
                sums.2 += tape.scalar_value(bundle.ba)?;
                sums.3 += tape.scalar_value(bundle.total)?;
                total_id = Some(match total_id {
                    None => bundle.total,
                    Some(acc) => tape.add(acc, bundle.total)?,
                });
            }
            let total = total_id.expect("batch is never empty");
            let mean = tape.scale(total, 1.0 / batch.len() as f64)?;
            tape.backward(mean)?;
            params.store_grads(&tape, &ids)?;
            sgd.step(params.named_mut())?;

            step += 1;
            let n = batch.len() as f64;
            log.push_step(StepRecord {
                step,
                l_parsing: sums.0 / n,
                l_edge: sums.1 / n,
                l_ba: sums.2 / n,
                l_total: sums.3 / n,
            })?;
        }
        if let Some(eval) = eval_data {
            let report = evaluate(eval, &params, cfg, ablation)?;
            log.epochs.push((epoch, report));
        }
    }
    Ok((params, log))
}

/// Argmax prediction for one image, on the decoder grid.
pub fn predict(
    params: &NetParams,
    cfg: &NetConfig,
    image: &Tensor,
    ablation: Ablation,
) -> Result<LabelMap> {
    let mut tape = Tape::new();
    let ids = params.insert_into(&mut tape)?;
    let img = tape.constant(image.clone())?;
    let out = forward(&mut tape, img, &ids, cfg, ablation)?;
    let (lh, lw) = cfg.logit_grid();
    let n = cfg.num_classes;
    let logits = tape.data(out.parsing_logits);
    let mut classes = Vec::with_capacity(lh * lw);
    for pix in 0..lh * lw {
        let row = &logits[pix * n..(pix + 1) * n];
        let mut best = 0usize;
        for c in 1..n {
            if row[c] > row[best] {
                best = c;
            }
        }
        classes.push(best as u8);
    }
    LabelMap::new(lh, lw, classes)
}

/// Merge specification used by evaluation: the face merge for the
/// standard 8 classes, otherwise foreground singletons.
pub fn eval_merge_spec(num_classes: usize) -> MergeSpec {
    if num_classes == crate::data::NUM_CLASSES {
        MergeSpec::face_default()
    } else {
        MergeSpec::singletons(num_classes)
    }
}

/// Runs the network on every sample without augmentation and scores the
/// predictions against nearest-downsampled ground truth.
pub fn evaluate(
    data: &Dataset,
    params: &NetParams,
    cfg: &NetConfig,
    ablation: Ablation,
) -> Result<MetricsReport> {
    if data.samples.is_empty() {
        return Err(Error::contract("evaluation set is empty"));
    }
    let mut cm = ConfusionMatrix::new(cfg.num_classes);
    for sample in &data.samples {
        let factor = grid_factor(cfg, &sample.labels)?;
        let gt = sample.labels.downsample_nearest(factor)?;
        let pred = predict(params, cfg, &sample.image, ablation)?;
        cm.accumulate(&pred, &gt)?;
    }
    MetricsReport::from_matrix(&cm, &eval_merge_spec(cfg.num_classes))
}

// ── checkpoint binding ──────────────────────────────────────────────────

fn cfg_scalar(entries: &mut Vec<(String, Tensor)>, name: &str, v: f64) {
    entries.push((format!("cfg.{name}"), Tensor::scalar(v)));
}

fn eagr_cfg_entries(entries: &mut Vec<(String, Tensor)>, prefix: &str, e: &EagrConfig) {
    cfg_scalar(entries, &format!("{prefix}.t"), e.t_dim as f64);
    cfg_scalar(entries, &format!("{prefix}.k"), e.k_dim as f64);
    cfg_scalar(entries, &format!("{prefix}.grid_h"), e.pool_grid.0 as f64);
    cfg_scalar(entries, &format!("{prefix}.grid_w"), e.pool_grid.1 as f64);
    cfg_scalar(entries, &format!("{prefix}.sel_h"), e.central_sel.0 as f64);
    cfg_scalar(entries, &format!("{prefix}.sel_w"), e.central_sel.1 as f64);
    cfg_scalar(
        entries,
        &format!("{prefix}.residual"),
        e.residual_reasoning as u8 as f64,
    );
}

fn ablation_code(ablation: Ablation) -> f64 {
    match ablation {
        Ablation::None => 0.0,
        Ablation::Baseline => 1.0,
        Ablation::NoEdge => 2.0,
        Ablation::NoReasoning => 3.0,
        Ablation::NoBa => 4.0,
    }
}

fn ablation_from_code(code: f64) -> Result<Ablation> {
    match code as i64 {
        0 => Ok(Ablation::None),
        1 => Ok(Ablation::Baseline),
        2 => Ok(Ablation::NoEdge),
        3 => Ok(Ablation::NoReasoning),
        4 => Ok(Ablation::NoBa),
        other => Err(Error::Checkpoint(format!("unknown ablation code {other}"))),
    }
}

/// Packs the parameters, the config scalars, and the computation path the
/// model was trained under into one checkpoint, so evaluation and
/// visualization need only the checkpoint file.
pub fn checkpoint_from(
    params: &NetParams,
    cfg: &NetConfig,
    ablation: Ablation,
) -> Result<Checkpoint> {
    let mut entries: Vec<(String, Tensor)> = params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    cfg_scalar(&mut entries, "ablation", ablation_code(ablation));
    cfg_scalar(&mut entries, "num_classes", cfg.num_classes as f64);
    cfg_scalar(&mut entries, "input_h", cfg.input_size.0 as f64);
    cfg_scalar(&mut entries, "input_w", cfg.input_size.1 as f64);
    cfg_scalar(&mut entries, "c_low", cfg.c_low as f64);
    cfg_scalar(&mut entries, "c_high", cfg.c_high as f64);
    eagr_cfg_entries(&mut entries, "eagr_low", &cfg.eagr_low);
    eagr_cfg_entries(&mut entries, "eagr_high", &cfg.eagr_high);
    cfg_scalar(&mut entries, "lambda1", cfg.lambda1);
    cfg_scalar(&mut entries, "lambda2", cfg.lambda2);
    cfg_scalar(&mut entries, "lr", cfg.lr);
    cfg_scalar(&mut entries, "weight_decay", cfg.weight_decay);
    cfg_scalar(&mut entries, "momentum", cfg.momentum);
    cfg_scalar(&mut entries, "seed_lo", (cfg.seed & 0xffff_ffff) as f64);
    cfg_scalar(&mut entries, "seed_hi", (cfg.seed >> 32) as f64);
    Checkpoint::new(entries)
}

fn read_scalar(ckpt: &Checkpoint, name: &str) -> Result<f64> {
    let t = ckpt.require_shaped(&format!("cfg.{name}"), &[1])?;
    Ok(t.data[0])
}

fn read_usize(ckpt: &Checkpoint, name: &str) -> Result<usize> {
    let v = read_scalar(ckpt, name)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(Error::Checkpoint(format!("cfg.{name} is not a count: {v}")));
    }
    Ok(v as usize)
}

fn read_eagr_cfg(ckpt: &Checkpoint, prefix: &str) -> Result<EagrConfig> {
    Ok(EagrConfig {
        t_dim: read_usize(ckpt, &format!("{prefix}.t"))?,
        k_dim: read_usize(ckpt, &format!("{prefix}.k"))?,
        pool_grid: (
            read_usize(ckpt, &format!("{prefix}.grid_h"))?,
            read_usize(ckpt, &format!("{prefix}.grid_w"))?,
        ),
        central_sel: (
            read_usize(ckpt, &format!("{prefix}.sel_h"))?,
            read_usize(ckpt, &format!("{prefix}.sel_w"))?,
        ),
        residual_reasoning: read_scalar(ckpt, &format!("{prefix}.residual"))? != 0.0,
    })
}

/// Rebuilds the network, its config, and its training-time computation
/// path from a checkpoint, validating every tensor shape. Errors name the
/// offending tensor.
pub fn net_from_checkpoint(ckpt: &Checkpoint) -> Result<(NetParams, NetConfig, Ablation)> {
    let cfg = NetConfig {
        num_classes: read_usize(ckpt, "num_classes")?,
        input_size: (read_usize(ckpt, "input_h")?, read_usize(ckpt, "input_w")?),
        c_low: read_usize(ckpt, "c_low")?,
        c_high: read_usize(ckpt, "c_high")?,
        eagr_low: read_eagr_cfg(ckpt, "eagr_low")?,
        eagr_high: read_eagr_cfg(ckpt, "eagr_high")?,
        lambda1: read_scalar(ckpt, "lambda1")?,
        lambda2: read_scalar(ckpt, "lambda2")?,
        lr: read_scalar(ckpt, "lr")?,
        weight_decay: read_scalar(ckpt, "weight_decay")?,
        momentum: read_scalar(ckpt, "momentum")?,
        seed: (read_usize(ckpt, "seed_hi")? as u64) << 32 | read_usize(ckpt, "seed_lo")? as u64,
    };
    cfg.validate()?;
    let ablation = ablation_from_code(read_scalar(ckpt, "ablation")?)?;
    let with_eagr = ckpt.has_prefix("eagr.");
    if with_eagr != ablation.uses_eagr() {
        return Err(Error::Checkpoint(
            "stored ablation disagrees with the presence of eagr.* tensors".to_string(),
        ));
    }
    // build a skeleton with the right shapes, then fill from the entries
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut params = NetParams::init(&cfg, with_eagr, &mut rng)?;
    for (name, tensor) in params.named_mut() {
        let stored = ckpt.require_shaped(&name, &tensor.shape)?;
        tensor.data = stored.data.clone();
    }
    Ok((params, cfg, ablation))
}

// ── response maps ───────────────────────────────────────────────────────

/// Row of the high-level projection matrix for one vertex, reshaped onto
/// the feature grid and rendered dark-is-high.
#[derive(Debug, Clone)]
pub struct ResponseMap {
    /// Raw projection row (a distribution over the grid pixels).
    pub row: Vec<f64>,
    pub grid: (usize, usize),
    /// Sum of the raw row, logged as an invariant witness.
    pub row_sum: f64,
    /// Min-max normalized grayscale, higher response rendered darker.
    pub gray: LabelMap,
}

/// Extracts the response map of `vertex` from the high-level block on one
/// image, running the forward path the model was trained under.
pub fn response_map(
    params: &NetParams,
    cfg: &NetConfig,
    image: &Tensor,
    vertex: usize,
    ablation: Ablation,
) -> Result<ResponseMap> {
    if !ablation.uses_eagr() {
        return Err(Error::contract(
            "a baseline checkpoint has no projection matrix to visualize",
        ));
    }
    let nv = cfg.eagr_high.vertex_count();
    if vertex >= nv {
        return Err(Error::contract(format!(
            "vertex {vertex} out of range, the high-level block has {nv} vertices"
        )));
    }
    let mut tape = Tape::new();
    let ids = params.insert_into(&mut tape)?;
    let img = tape.constant(image.clone())?;
    let out = forward(&mut tape, img, &ids, cfg, ablation)?;
    let proj = out
        .proj_high
        .ok_or_else(|| Error::contract("forward produced no high-level projection"))?;
    validate_projection(&tape, &proj)?;
    let (h0, w0) = cfg.input_size;
    let grid = (h0 / 4, w0 / 4);
    let row = tape.data(proj.id)[vertex * proj.pixels..(vertex + 1) * proj.pixels].to_vec();
    let row_sum: f64 = row.iter().sum();

    let min = row.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let gray_vals: Vec<u8> = if max - min < 1e-15 {
        // constant response renders as uniform mid-gray
        vec![128u8; row.len()]
    } else {
        row.iter()
            .map(|&v| (255.0 * (1.0 - (v - min) / (max - min))).round() as u8)
            .collect()
    };
    Ok(ResponseMap {
        row,
        grid,
        row_sum,
        gray: LabelMap::new(grid.0, grid.1, gray_vals)?,
    })
}

/// The spatial bin of the pooled grid that seeded a given vertex, as a
/// pixel-index set on the feature grid. Used to relate response maps to
/// their vertex.
pub fn vertex_bin_pixels(cfg: &EagrConfig, grid: (usize, usize), vertex: usize) -> Vec<usize> {
    let (ph, pw) = cfg.pool_grid;
    let (sh, sw) = cfg.central_sel;
    let (oy, ox) = ((ph - sh) / 2, (pw - sw) / 2);
    let (vi, vj) = (vertex / sw, vertex % sw);
    let (bi, bj) = (oy + vi, ox + vj);
    let (h, w) = grid;
    let (r0, r1) = (bi * h / ph, (bi + 1) * h / ph);
    let (c0, c1) = (bj * w / pw, (bj + 1) * w / pw);
    let mut out = Vec::new();
    for r in r0..r1 {
        for c in c0..c1 {
            out.push(r * w + c);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> NetConfig {
        let eagr = EagrConfig {
            t_dim: 3,
            k_dim: 4,
            pool_grid: (2, 2),
            central_sel: (2, 2),
            residual_reasoning: true,
        };
        NetConfig {
            num_classes: 8,
            input_size: (16, 16),
            c_low: 5,
            c_high: 6,
            eagr_low: eagr.clone(),
            eagr_high: eagr,
            lambda1: 1.0,
            lambda2: 1.0,
            lr: 0.05,
            weight_decay: 0.0005,
            momentum: 0.9,
            seed: 11,
        }
    }

    fn tiny_data(count: u64, seed: u64) -> Dataset {
        Dataset::synthesize(&SynthConfig::with_size(16, 16, seed), count).unwrap()
    }

    #[test]
    fn smoke_training_reduces_loss() {
        let data = tiny_data(8, 5);
        let cfg = tiny_cfg();
        let opts = TrainOptions {
            epochs: 3,
            batch_size: 4,
        };
        let (_, log) = train(&data, None, &cfg, &opts, Ablation::None).unwrap();
        let first = log.steps.first().unwrap().l_total;
        let last = log.steps.last().unwrap().l_total;
        assert!(first.is_finite() && last.is_finite());
        assert!(last < first, "loss should drop: {first} -> {last}");
    }

    #[test]
    fn zero_lr_leaves_parameters_at_init() {
        let data = tiny_data(4, 6);
        let mut cfg = tiny_cfg();
        cfg.lr = 0.0;
        let opts = TrainOptions {
            epochs: 1,
            batch_size: 2,
        };
        let (params, _) = train(&data, None, &cfg, &opts, Ablation::None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let fresh = NetParams::init(&cfg, true, &mut rng).unwrap();
        for ((_, a), (_, b)) in params.named().iter().zip(fresh.named().iter()) {
            let bits_a: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn training_is_bit_deterministic() {
        let data = tiny_data(6, 7);
        let cfg = tiny_cfg();
        let opts = TrainOptions {
            epochs: 2,
            batch_size: 3,
        };
        let (_, log_a) = train(&data, None, &cfg, &opts, Ablation::None).unwrap();
        let (_, log_b) = train(&data, None, &cfg, &opts, Ablation::None).unwrap();
        assert_eq!(log_a.steps.len(), log_b.steps.len());
        for (a, b) in log_a.steps.iter().zip(&log_b.steps) {
            assert_eq!(a.l_total.to_bits(), b.l_total.to_bits());
            assert_eq!(a.l_parsing.to_bits(), b.l_parsing.to_bits());
        }
    }

    #[test]
    fn baseline_training_has_no_block_parameters() {
        let data = tiny_data(4, 8);
        let cfg = tiny_cfg();
        let opts = TrainOptions {
            epochs: 1,
            batch_size: 2,
        };
        let (params, _) = train(&data, None, &cfg, &opts, Ablation::Baseline).unwrap();
        assert!(params.eagr.is_empty());
        let ckpt = checkpoint_from(&params, &cfg, Ablation::Baseline).unwrap();
        assert!(!ckpt.has_prefix("eagr."));
    }

    #[test]
    fn run_log_rejects_non_increasing_steps() {
        let mut log = RunLog::default();
        let rec = StepRecord {
            step: 1,
            l_parsing: 0.0,
            l_edge: 0.0,
            l_ba: 0.0,
            l_total: 0.0,
        };
        log.push_step(rec).unwrap();
        assert!(log.push_step(rec).is_err());
    }

    #[test]
    fn evaluation_is_deterministic_and_bounded() {
        let data = tiny_data(4, 9);
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = NetParams::init(&cfg, true, &mut rng).unwrap();
        let a = evaluate(&data, &params, &cfg, Ablation::None).unwrap();
        let b = evaluate(&data, &params, &cfg, Ablation::None).unwrap();
        assert_eq!(a.to_kv(), b.to_kv());
        assert!((0.0..=1.0).contains(&a.scores.pixel_acc));
        assert!(a.scores.miou <= a.scores.pixel_acc + 1e-12);
    }

    #[test]
    fn checkpoint_binding_round_trips() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = NetParams::init(&cfg, true, &mut rng).unwrap();
        let ckpt = checkpoint_from(&params, &cfg, Ablation::None).unwrap();
        let (params2, cfg2, abl2) = net_from_checkpoint(&ckpt).unwrap();
        assert_eq!(abl2, Ablation::None);
        assert_eq!(cfg2.num_classes, cfg.num_classes);
        assert_eq!(cfg2.eagr_high, cfg.eagr_high);
        assert_eq!(cfg2.seed, cfg.seed);
        for ((na, a), (nb, b)) in params.named().iter().zip(params2.named().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn checkpoint_shape_mismatch_names_tensor() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = NetParams::init(&cfg, true, &mut rng).unwrap();
        let ckpt = checkpoint_from(&params, &cfg, Ablation::None).unwrap();
        let mut entries: Vec<(String, Tensor)> = ckpt.entries().to_vec();
        for (name, t) in entries.iter_mut() {
            if name == "dec.w" {
                *t = Tensor::zeros(&[2, 2]);
            }
        }
        let bad = Checkpoint::new(entries).unwrap();
        let err = net_from_checkpoint(&bad).unwrap_err();
        assert!(err.to_string().contains("dec.w"), "{err}");
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = tiny_data(3, 10);
        data.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.samples.len(), 3);
        for (a, b) in data.samples.iter().zip(&back.samples) {
            assert_eq!(a.labels, b.labels);
            // images go through 8-bit quantization
            for (x, y) in a.image.data.iter().zip(&b.image.data) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn response_map_row_is_distribution_and_vertex_guarded() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = NetParams::init(&cfg, true, &mut rng).unwrap();
        let sample = tiny_data(1, 11).samples.pop().unwrap();
        let rm = response_map(&params, &cfg, &sample.image, 0, Ablation::None).unwrap();
        assert!((rm.row_sum - 1.0).abs() < 1e-9);
        assert_eq!(rm.gray.height * rm.gray.width, rm.row.len());
        assert!(response_map(&params, &cfg, &sample.image, 99, Ablation::None).is_err());
    }

    #[test]
    fn response_map_constant_phi_is_uniform_gray() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = NetParams::init(&cfg, true, &mut rng).unwrap();
        // zero projection features: every similarity logit collapses
        params.eagr[1].w_phi = Tensor::zeros(&[cfg.c_high, cfg.eagr_high.t_dim]);
        params.eagr[1].b_phi = Tensor::zeros(&[cfg.eagr_high.t_dim]);
        let sample = tiny_data(1, 12).samples.pop().unwrap();
        let rm = response_map(&params, &cfg, &sample.image, 1, Ablation::None).unwrap();
        assert!(rm.gray.classes.iter().all(|&g| g == 128));
    }
}
