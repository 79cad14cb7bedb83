//! Dense non-local attention baseline.
//!
//! The correctness and complexity comparison target for the graph
//! reasoning block: every pixel attends to every pixel, so the attention
//! product costs `(HW)^2 * T` MACs and the aggregation `(HW)^2 * C`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{self, EagrConfig, EagrParams};
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Flop-counter label of the dense pixel/pixel attention product.
pub const ATTENTION_MACS_LABEL: &str = "nonlocal.attention";
/// Flop-counter label of the attention-weighted aggregation.
pub const AGGREGATE_MACS_LABEL: &str = "nonlocal.aggregate";

/// Parameters of the baseline module. The value projection keeps the
/// input channel count so the output is a drop-in replacement for the
/// input map.
#[derive(Debug, Clone)]
pub struct NonLocalParams {
    pub w_theta: Tensor,
    pub b_theta: Tensor,
    pub w_phi: Tensor,
    pub b_phi: Tensor,
    pub w_gamma: Tensor,
    pub b_gamma: Tensor,
}

impl NonLocalParams {
    pub fn init(channels: usize, t_dim: usize, rng: &mut impl Rng) -> Self {
        let sc = 1.0 / (channels as f64).sqrt();
        NonLocalParams {
            w_theta: Tensor::uniform(&[channels, t_dim], -sc, sc, rng),
            b_theta: Tensor::zeros(&[t_dim]),
            w_phi: Tensor::uniform(&[channels, t_dim], -sc, sc, rng),
            b_phi: Tensor::zeros(&[t_dim]),
            w_gamma: Tensor::uniform(&[channels, channels], -sc, sc, rng),
            b_gamma: Tensor::zeros(&[channels]),
        }
    }

    pub fn insert_into(&self, tape: &mut Tape) -> Result<NonLocalParamIds> {
        Ok(NonLocalParamIds {
            w_theta: tape.leaf(self.w_theta.clone().with_grad())?,
            b_theta: tape.leaf(self.b_theta.clone().with_grad())?,
            w_phi: tape.leaf(self.w_phi.clone().with_grad())?,
            b_phi: tape.leaf(self.b_phi.clone().with_grad())?,
            w_gamma: tape.leaf(self.w_gamma.clone().with_grad())?,
            b_gamma: tape.leaf(self.b_gamma.clone().with_grad())?,
        })
    }
}

/// Tape handles of the baseline parameters.
#[derive(Debug, Clone, Copy)]
pub struct NonLocalParamIds {
    pub w_theta: TensorId,
    pub b_theta: TensorId,
    pub w_phi: TensorId,
    pub b_phi: TensorId,
    pub w_gamma: TensorId,
    pub b_gamma: TensorId,
}

/// `softmax(theta(X) phi(X)^T) gamma(X)` over a `[HW, C]` map. Attention
/// rows are softmax distributions over all pixels.
pub fn nonlocal_forward(
    tape: &mut Tape,
    x: TensorId,
    params: &NonLocalParamIds,
) -> Result<TensorId> {
    let theta = tape.conv1x1(x, params.w_theta, params.b_theta)?;
    let phi = tape.conv1x1(x, params.w_phi, params.b_phi)?;
    let gamma = tape.conv1x1(x, params.w_gamma, params.b_gamma)?;
    let phi_t = tape.transpose(phi)?;
    let logits = tape.matmul_labeled(theta, phi_t, ATTENTION_MACS_LABEL)?;
    let attention = tape.softmax_rows(logits)?;
    tape.matmul_labeled(attention, gamma, AGGREGATE_MACS_LABEL)
}

/// Exact ratio of two MAC counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Self {
        let g = gcd(num, den).max(1);
        Ratio {
            num: num / g,
            den: den / g,
        }
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// The ratio as an integer when it reduces to one.
    pub fn as_integer(&self) -> Option<u64> {
        (self.den == 1).then_some(self.num)
    }
}

impl std::fmt::Display for Ratio {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        let t = a % b;
        a = b;
        b = t;
    }
    a
}

/// Measured and predicted cost ratio of the dense attention product over
/// the graph projection product.
#[derive(Debug, Clone, Copy)]
pub struct AttentionFlopRatio {
    pub nonlocal_attention_macs: u64,
    pub projection_macs: u64,
    /// Ratio of live counter readings.
    pub measured: Ratio,
    /// `HW / Nv`, the pooling prediction.
    pub analytic: Ratio,
}

/// Runs both attention products on identically sized inputs and compares
/// live flop-counter readings against the analytic prediction `HW / Nv`.
/// The vertex count must factor into a selection grid that fits `(h, w)`.
pub fn attention_flop_ratio(
    h: usize,
    w: usize,
    c: usize,
    t: usize,
    nv: usize,
) -> Result<AttentionFlopRatio> {
    if h == 0 || w == 0 || c == 0 || t == 0 || nv == 0 {
        return Err(Error::contract("attention_flop_ratio needs positive dims"));
    }
    let sel = factor_selection(nv, h, w)
        .ok_or_else(|| Error::contract(format!("vertex count {nv} does not fit a {h}x{w} grid")))?;
    let hw = h * w;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);

    // dense side
    let nl_macs = {
        let mut tape = Tape::new();
        let params = NonLocalParams::init(c, t, &mut rng);
        let ids = params.insert_into(&mut tape)?;
        let x = tape.leaf(Tensor::uniform(&[hw, c], -1.0, 1.0, &mut rng))?;
        nonlocal_forward(&mut tape, x, &ids)?;
        tape.flops().macs_for(ATTENTION_MACS_LABEL)
    };

    // graph projection side
    let proj_macs = {
        let cfg = EagrConfig {
            t_dim: t,
            k_dim: t.max(1),
            pool_grid: sel,
            central_sel: sel,
            residual_reasoning: true,
        };
        let mut tape = Tape::new();
        // constructed directly: the ratio probe must not require t < c
        let sc = 1.0 / (c as f64).sqrt();
        let params = EagrParams {
            w_phi: Tensor::uniform(&[c, t], -sc, sc, &mut rng),
            b_phi: Tensor::zeros(&[t]),
            w_theta: Tensor::uniform(&[c, cfg.k_dim], -sc, sc, &mut rng),
            b_theta: Tensor::zeros(&[cfg.k_dim]),
            w_sigma: Tensor::uniform(&[cfg.k_dim, c], -sc, sc, &mut rng),
            b_sigma: Tensor::zeros(&[c]),
            w_g: Tensor::uniform(&[cfg.k_dim, cfg.k_dim], -sc, sc, &mut rng),
            adj: Tensor::uniform(&[nv, nv], -0.01, 0.01, &mut rng),
        };
        let ids = params.insert_into(&mut tape)?;
        let x = tape.leaf(Tensor::uniform(&[hw, c], -1.0, 1.0, &mut rng))?;
        let y = tape.leaf(Tensor::uniform(&[hw, 1], 0.0, 1.0, &mut rng))?;
        graph::build_projection(&mut tape, x, y, (h, w), &ids, &cfg)?;
        tape.flops().macs_for(graph::PROJECTION_MACS_LABEL)
    };

    Ok(AttentionFlopRatio {
        nonlocal_attention_macs: nl_macs,
        projection_macs: proj_macs,
        measured: Ratio::new(nl_macs, proj_macs),
        analytic: Ratio::new(hw as u64, nv as u64),
    })
}

/// Picks `(a, b)` with `a * b == nv`, `a <= h`, `b <= w`, as close to
/// square as the divisors allow.
fn factor_selection(nv: usize, h: usize, w: usize) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize)> = None;
    for a in 1..=nv {
        if !nv.is_multiple_of(a) {
            continue;
        }
        let b = nv / a;
        if a > h || b > w {
            continue;
        }
        let spread = a.abs_diff(b);
        if best.is_none_or(|(ba, bb)| spread < ba.abs_diff(bb)) {
            best = Some((a, b));
        }
    }
    best
}
