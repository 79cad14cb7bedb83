//! Flop and wall-clock comparison of the reasoning block against the
//! dense non-local baseline on identical inputs.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{self, EagrConfig, EagrParams, PROJECTION_MACS_LABEL};
use crate::nonlocal::{
    nonlocal_forward, NonLocalParams, Ratio, AGGREGATE_MACS_LABEL, ATTENTION_MACS_LABEL,
};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Measured counts and timings of one comparison run.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub t: usize,
    pub k: usize,
    pub grid: (usize, usize),
    pub sel: (usize, usize),
    pub nv: usize,
    pub nonlocal_total_macs: u64,
    pub nonlocal_attention_macs: u64,
    pub nonlocal_aggregate_macs: u64,
    pub eagr_total_macs: u64,
    pub eagr_projection_macs: u64,
    /// Dense attention product over graph projection product, measured.
    pub attention_ratio_measured: Ratio,
    /// The pooling prediction `HW / Nv`.
    pub attention_ratio_analytic: Ratio,
    pub nonlocal_wall_ms: f64,
    pub eagr_wall_ms: f64,
    pub runs: usize,
}

impl std::fmt::Display for BenchReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "input                {}x{} pixels, {} channels",
            self.h, self.w, self.c
        )?;
        writeln!(f, "reduced dims         t={} k={}", self.t, self.k)?;
        writeln!(
            f,
            "anchors              grid {}x{}, central {}x{} -> {} vertices",
            self.grid.0, self.grid.1, self.sel.0, self.sel.1, self.nv
        )?;
        writeln!(
            f,
            "non-local total      {:>14} MACs",
            self.nonlocal_total_macs
        )?;
        writeln!(
            f,
            "  attention product  {:>14} MACs",
            self.nonlocal_attention_macs
        )?;
        writeln!(
            f,
            "  aggregation        {:>14} MACs",
            self.nonlocal_aggregate_macs
        )?;
        writeln!(f, "eagr total           {:>14} MACs", self.eagr_total_macs)?;
        writeln!(
            f,
            "  projection product {:>14} MACs",
            self.eagr_projection_macs
        )?;
        writeln!(
            f,
            "attention MAC ratio  measured {} (analytic HW/Nv = {})",
            self.attention_ratio_measured, self.attention_ratio_analytic
        )?;
        writeln!(
            f,
            "total MAC ratio      {:.2}x",
            self.nonlocal_total_macs as f64 / self.eagr_total_macs as f64
        )?;
        writeln!(
            f,
            "wall clock (median of {} runs)  non-local {:.3} ms, eagr {:.3} ms ({:.2}x)",
            self.runs,
            self.nonlocal_wall_ms,
            self.eagr_wall_ms,
            self.nonlocal_wall_ms / self.eagr_wall_ms
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Runs both modules on the same random input and reports measured MACs,
/// the analytic attention ratio, and wall-clock medians over at least
/// five runs.
#[allow(clippy::too_many_arguments)]
pub fn run_bench(
    h: usize,
    w: usize,
    c: usize,
    t: usize,
    k: usize,
    grid: (usize, usize),
    sel: (usize, usize),
    runs: usize,
    seed: u64,
) -> Result<BenchReport> {
    let runs = runs.max(5);
    let cfg = EagrConfig {
        t_dim: t,
        k_dim: k,
        pool_grid: grid,
        central_sel: sel,
        residual_reasoning: true,
    };
    cfg.validate(c)?;
    let hw = h * w;
    let nv = cfg.vertex_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::uniform(&[hw, c], -1.0, 1.0, &mut rng);
    let y = Tensor::uniform(&[hw, 1], 0.0, 1.0, &mut rng);
    let nl_params = NonLocalParams::init(c, t, &mut rng);
    let eagr_params = EagrParams::init(&cfg, c, &mut rng)?;

    let mut nl_total = 0;
    let mut nl_attention = 0;
    let mut nl_aggregate = 0;
    let mut nl_times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        let mut tape = Tape::new();
        let ids = nl_params.insert_into(&mut tape)?;
        let xid = tape.constant(x.clone())?;
        nonlocal_forward(&mut tape, xid, &ids)?;
        nl_times.push(start.elapsed().as_secs_f64() * 1e3);
        nl_total = tape.flops().total_macs();
        nl_attention = tape.flops().macs_for(ATTENTION_MACS_LABEL);
        nl_aggregate = tape.flops().macs_for(AGGREGATE_MACS_LABEL);
    }

    let mut eagr_total = 0;
    let mut eagr_projection = 0;
    let mut eagr_times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        let mut tape = Tape::new();
        let ids = eagr_params.insert_into(&mut tape)?;
        let xid = tape.constant(x.clone())?;
        let yid = tape.constant(y.clone())?;
        graph::eagr_forward(&mut tape, xid, yid, (h, w), &ids, &cfg)?;
        eagr_times.push(start.elapsed().as_secs_f64() * 1e3);
        eagr_total = tape.flops().total_macs();
        eagr_projection = tape.flops().macs_for(PROJECTION_MACS_LABEL);
    }

    Ok(BenchReport {
        h,
        w,
        c,
        t,
        k,
        grid,
        sel,
        nv,
        nonlocal_total_macs: nl_total,
        nonlocal_attention_macs: nl_attention,
        nonlocal_aggregate_macs: nl_aggregate,
        eagr_total_macs: eagr_total,
        eagr_projection_macs: eagr_projection,
        attention_ratio_measured: Ratio::new(nl_attention, eagr_projection),
        attention_ratio_analytic: Ratio::new(hw as u64, nv as u64),
        nonlocal_wall_ms: median(nl_times),
        eagr_wall_ms: median(eagr_times),
        runs,
    })
}
