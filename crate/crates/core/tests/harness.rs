//! Harness-level behaviors that cut across modules: ablation flop
//! fingerprints and the response-map locality oracle.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use eagr::config::TrainOptions;
use eagr::data::SynthConfig;
use eagr::graph::PROJECTION_MACS_LABEL;
use eagr::net::{forward, Ablation, NetConfig, NetParams};
use eagr::tensor::tape::Tape;
use eagr::train::{response_map, train, vertex_bin_pixels, Dataset};

fn fingerprint(cfg: &NetConfig, ablation: Ablation, seed: u64) -> Vec<(&'static str, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = NetParams::init(cfg, ablation.uses_eagr(), &mut rng).unwrap();
    let sample = Dataset::synthesize(&SynthConfig::with_size(32, 32, 1), 1)
        .unwrap()
        .samples
        .remove(0);
    let mut tape = Tape::new();
    let ids = params.insert_into(&mut tape).unwrap();
    let img = tape.constant(sample.image).unwrap();
    forward(&mut tape, img, &ids, cfg, ablation).unwrap();
    tape.flops().breakdown().collect()
}

/// Each ablation flag must change exactly the documented part of the
/// computation, visible in the MAC breakdown: the edge flag and the BA
/// flag cost no MACs, skipping reasoning removes exactly the two graph
/// product terms, and the baseline removes every block label.
#[test]
fn ablation_flags_change_only_the_documented_path() {
    let cfg = NetConfig::toy32();
    let full = fingerprint(&cfg, Ablation::None, 3);
    let no_edge = fingerprint(&cfg, Ablation::NoEdge, 3);
    let no_ba = fingerprint(&cfg, Ablation::NoBa, 3);
    let no_reason = fingerprint(&cfg, Ablation::NoReasoning, 3);
    let baseline = fingerprint(&cfg, Ablation::Baseline, 3);

    // the edge-attention product is elementwise and the BA term lives in
    // the loss: neither moves a single MAC
    assert_eq!(full, no_edge);
    assert_eq!(full, no_ba);

    // skipping the graph convolution removes (I-A)X_G and X_G W_G per
    // block and nothing else
    let matmul_of = |fp: &[(&str, u64)]| {
        fp.iter()
            .find(|(n, _)| *n == "matmul")
            .map(|&(_, v)| v)
            .unwrap_or(0)
    };
    let reason_macs: u64 = [&cfg.eagr_low, &cfg.eagr_high]
        .iter()
        .map(|e| {
            let nv = e.vertex_count() as u64;
            let k = e.k_dim as u64;
            nv * nv * k + nv * k * k
        })
        .sum();
    assert_eq!(matmul_of(&no_reason) + reason_macs, matmul_of(&full));
    let without_matmul = |fp: &[(&'static str, u64)]| -> Vec<(&'static str, u64)> {
        fp.iter().filter(|(n, _)| *n != "matmul").cloned().collect()
    };
    assert_eq!(without_matmul(&full), without_matmul(&no_reason));

    // the baseline has no block products at all
    assert!(baseline.iter().all(|(n, _)| *n != PROJECTION_MACS_LABEL));
    let total = |fp: &[(&str, u64)]| fp.iter().map(|&(_, v)| v).sum::<u64>();
    assert!(total(&baseline) < total(&full));
}

/// After a short training run, the pixels responding most to a vertex
/// overlap the vertex's own pooled bin clearly more often than chance.
#[test]
fn response_maps_localize_above_chance() {
    let train_set = Dataset::synthesize(&SynthConfig::with_size(32, 32, 400), 32).unwrap();
    let probe_set = Dataset::synthesize(&SynthConfig::with_size(32, 32, 500), 4).unwrap();
    let mut cfg = NetConfig::toy32();
    cfg.seed = 12;
    cfg.lr = 0.03;
    let opts = TrainOptions {
        epochs: 10,
        batch_size: 8,
    };
    let (params, _) = train(&train_set, None, &cfg, &opts, Ablation::None).unwrap();

    let grid = (cfg.input_size.0 / 4, cfg.input_size.1 / 4);
    let pixels = grid.0 * grid.1;
    let top_n = pixels / 10; // the top decile
    let nv = cfg.eagr_high.vertex_count();

    let mut hits = 0usize;
    let mut drawn = 0usize;
    let mut chance_hits = 0.0f64;
    for sample in &probe_set.samples {
        for vertex in 0..nv {
            let rm = response_map(&params, &cfg, &sample.image, vertex, Ablation::None).unwrap();
            assert!((rm.row_sum - 1.0).abs() < 1e-9);
            let bin = vertex_bin_pixels(&cfg.eagr_high, grid, vertex);
            let mut order: Vec<usize> = (0..pixels).collect();
            order.sort_by(|&a, &b| rm.row[b].total_cmp(&rm.row[a]));
            let top = &order[..top_n];
            hits += top.iter().filter(|p| bin.contains(p)).count();
            drawn += top_n;
            chance_hits += top_n as f64 * bin.len() as f64 / pixels as f64;
        }
    }
    let observed = hits as f64;
    assert!(
        observed > chance_hits,
        "top-decile overlap {observed} of {drawn} not above chance {chance_hits:.2}"
    );
    println!(
        "response-map locality: {observed} bin hits in {drawn} top-decile draws (chance {chance_hits:.2})"
    );
}
