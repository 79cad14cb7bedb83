//! Edge-aware graph reasoning block.
//!
//! The block turns a flattened feature map into a small graph and back:
//! an edge-weighted projection pools feature anchors on a coarse grid,
//! keeps a centered sub-block of them as vertices, and softmax-normalizes
//! anchor/pixel similarities into a row-stochastic projection matrix.
//! Vertex features are propagated through one graph-convolution step over
//! a learned adjacency and reprojected through the transposed projection,
//! with the input added back as a residual.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, TensorId};
use crate::tensor::Tensor;

/// Flop-counter label of the anchor/pixel similarity product, the term
/// that replaces the dense attention product of the non-local module.
pub const PROJECTION_MACS_LABEL: &str = "eagr.projection";

/// Structural choices of one reasoning block.
#[derive(Debug, Clone, PartialEq)]
pub struct EagrConfig {
    /// Reduced channel count of the projection features.
    pub t_dim: usize,
    /// Vertex feature width.
    pub k_dim: usize,
    /// Anchor pooling grid (rows, cols).
    pub pool_grid: (usize, usize),
    /// Centered sub-block of anchors kept as graph vertices.
    pub central_sel: (usize, usize),
    /// Add the projected vertex features back after the graph convolution.
    pub residual_reasoning: bool,
}

impl EagrConfig {
    /// Number of graph vertices, `sel.0 * sel.1`.
    pub fn vertex_count(&self) -> usize {
        self.central_sel.0 * self.central_sel.1
    }

    /// Validates the config against the channel count of the map it will
    /// refine. Odd selection margins are allowed; the offset rounds down.
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.t_dim == 0 || self.k_dim == 0 {
            return Err(Error::contract("t_dim and k_dim must be positive"));
        }
        if self.t_dim >= channels {
            return Err(Error::contract(format!(
                "t_dim {} must be smaller than the input channel count {}",
                self.t_dim, channels
            )));
        }
        let (ph, pw) = self.pool_grid;
        let (sh, sw) = self.central_sel;
        if sh == 0 || sw == 0 || sh > ph || sw > pw {
            return Err(Error::contract(format!(
                "central selection {sh}x{sw} does not fit pooling grid {ph}x{pw}"
            )));
        }
        Ok(())
    }
}

/// Learnable state of one reasoning block.
#[derive(Debug, Clone)]
pub struct EagrParams {
    pub w_phi: Tensor,
    pub b_phi: Tensor,
    pub w_theta: Tensor,
    pub b_theta: Tensor,
    pub w_sigma: Tensor,
    pub b_sigma: Tensor,
    pub w_g: Tensor,
    /// Learned adjacency, unconstrained reals.
    pub adj: Tensor,
}

impl EagrParams {
    /// Fan-in scaled uniform init for the convolutions, zero biases, and
    /// adjacency entries in `[-0.01, 0.01]` so `I - A` starts near the
    /// identity.
    pub fn init(cfg: &EagrConfig, channels: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate(channels)?;
        let nv = cfg.vertex_count();
        let (c, t, k) = (channels, cfg.t_dim, cfg.k_dim);
        let sc = 1.0 / (c as f64).sqrt();
        let sk = 1.0 / (k as f64).sqrt();
        Ok(EagrParams {
            w_phi: Tensor::uniform(&[c, t], -sc, sc, rng),
            b_phi: Tensor::zeros(&[t]),
            w_theta: Tensor::uniform(&[c, k], -sc, sc, rng),
            b_theta: Tensor::zeros(&[k]),
            w_sigma: Tensor::uniform(&[k, c], -sk, sk, rng),
            b_sigma: Tensor::zeros(&[c]),
            w_g: Tensor::uniform(&[k, k], -sk, sk, rng),
            adj: Tensor::uniform(&[nv, nv], -0.01, 0.01, rng),
        })
    }

    /// Field names used in checkpoints, paired with each tensor.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_phi", &self.w_phi),
            ("b_phi", &self.b_phi),
            ("w_theta", &self.w_theta),
            ("b_theta", &self.b_theta),
            ("w_sigma", &self.w_sigma),
            ("b_sigma", &self.b_sigma),
            ("w_g", &self.w_g),
            ("adj", &self.adj),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w_phi", &mut self.w_phi),
            ("b_phi", &mut self.b_phi),
            ("w_theta", &mut self.w_theta),
            ("b_theta", &mut self.b_theta),
            ("w_sigma", &mut self.w_sigma),
            ("b_sigma", &mut self.b_sigma),
            ("w_g", &mut self.w_g),
            ("adj", &mut self.adj),
        ]
    }

    /// Inserts every parameter as a gradient leaf on `tape`.
    pub fn insert_into(&self, tape: &mut Tape) -> Result<EagrParamIds> {
        Ok(EagrParamIds {
            w_phi: tape.leaf(self.w_phi.clone().with_grad())?,
            b_phi: tape.leaf(self.b_phi.clone().with_grad())?,
            w_theta: tape.leaf(self.w_theta.clone().with_grad())?,
            b_theta: tape.leaf(self.b_theta.clone().with_grad())?,
            w_sigma: tape.leaf(self.w_sigma.clone().with_grad())?,
            b_sigma: tape.leaf(self.b_sigma.clone().with_grad())?,
            w_g: tape.leaf(self.w_g.clone().with_grad())?,
            adj: tape.leaf(self.adj.clone().with_grad())?,
        })
    }
}

/// Tape handles of one block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct EagrParamIds {
    pub w_phi: TensorId,
    pub b_phi: TensorId,
    pub w_theta: TensorId,
    pub b_theta: TensorId,
    pub w_sigma: TensorId,
    pub b_sigma: TensorId,
    pub w_g: TensorId,
    pub adj: TensorId,
}

/// Row-stochastic `[Nv, HW]` matrix mapping pixels to vertices. Each row
/// is a softmax distribution over pixels.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub id: TensorId,
    pub vertices: usize,
    pub pixels: usize,
}

/// Checks the projection invariants: rows sum to 1 within 1e-9 and every
/// entry lies strictly inside (0, 1).
pub fn validate_projection(tape: &Tape, p: &Projection) -> Result<()> {
    let data = tape.data(p.id);
    for v in 0..p.vertices {
        let row = &data[v * p.pixels..(v + 1) * p.pixels];
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "projection row {v} sums to {sum}, expected 1"
            )));
        }
        if let Some(&bad) = row.iter().find(|&&e| e <= 0.0 || e >= 1.0) {
            return Err(Error::contract(format!(
                "projection row {v} has entry {bad} outside (0, 1)"
            )));
        }
    }
    Ok(())
}

/// Builds the edge-aware projection matrix.
///
/// The reduced features are weighted by the edge probabilities, average
/// pooled onto the anchor grid, and the centered vertex anchors are
/// matched against every pixel; rows are then softmax-normalized over the
/// pixel axis. `spatial` is the `(h, w)` view of the flattened rows of
/// `x`, and `y` holds per-pixel edge probabilities in `[0, 1]`.
pub fn build_projection(
    tape: &mut Tape,
    x: TensorId,
    y: TensorId,
    spatial: (usize, usize),
    params: &EagrParamIds,
    cfg: &EagrConfig,
) -> Result<Projection> {
    let (h, w) = spatial;
    let hw = h * w;
    let xs = tape.shape(x).to_vec();
    if xs.len() != 2 || xs[0] != hw {
        return Err(Error::dimension("build_projection", &xs, &[hw, 0]));
    }
    if tape.shape(y) != [hw, 1] {
        return Err(Error::dimension(
            "build_projection",
            tape.shape(y),
            &[hw, 1],
        ));
    }
    if let Some(&bad) = tape.data(y).iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::contract(format!(
            "edge probability {bad} outside [0, 1]"
        )));
    }
    let phi = tape.conv1x1(x, params.w_phi, params.b_phi)?;
    let weighted = tape.hadamard(phi, y)?;
    let spatial_view = tape.reshape(weighted, &[h, w, cfg.t_dim])?;
    let pooled = tape.adaptive_avg_pool(spatial_view, cfg.pool_grid)?;
    let anchors = tape.select_central_anchors(pooled, cfg.central_sel)?;
    let phi_t = tape.transpose(phi)?;
    let logits = tape.matmul_labeled(anchors, phi_t, PROJECTION_MACS_LABEL)?;
    let p = tape.softmax_rows(logits)?;
    Ok(Projection {
        id: p,
        vertices: cfg.vertex_count(),
        pixels: hw,
    })
}

/// Projects pixel features onto the graph: `X_G = P * theta(X)`. Each
/// vertex feature is a convex combination of pixel features.
pub fn project(
    tape: &mut Tape,
    p: &Projection,
    x: TensorId,
    params: &EagrParamIds,
) -> Result<TensorId> {
    let theta = tape.conv1x1(x, params.w_theta, params.b_theta)?;
    tape.matmul(p.id, theta)
}

/// One graph-convolution step over the learned adjacency:
/// `relu((I - A) X_G W_G)`, plus `X_G` itself when residual reasoning is
/// on. Output shape equals input shape.
pub fn reason(
    tape: &mut Tape,
    x_g: TensorId,
    params: &EagrParamIds,
    cfg: &EagrConfig,
) -> Result<TensorId> {
    let nv = tape.shape(x_g)[0];
    let adj_shape = tape.shape(params.adj).to_vec();
    if adj_shape != [nv, nv] {
        return Err(Error::dimension("reason", &adj_shape, &[nv, nv]));
    }
    let eye = tape.constant(Tensor::eye(nv))?;
    let neg_adj = tape.scale(params.adj, -1.0)?;
    let mixing = tape.add(eye, neg_adj)?;
    let mixed = tape.matmul(mixing, x_g)?;
    let transformed = tape.matmul(mixed, params.w_g)?;
    let core = tape.relu(transformed)?;
    if cfg.residual_reasoning {
        tape.add(core, x_g)
    } else {
        Ok(core)
    }
}

/// Maps vertex features back to pixels through the transposed projection
/// and adds the original map: `Z = X + sigma(P^T X_hat_G)`. Rows of the
/// transposed projection are intentionally not normalized.
pub fn reproject(
    tape: &mut Tape,
    p: &Projection,
    x_hat_g: TensorId,
    x: TensorId,
    params: &EagrParamIds,
) -> Result<TensorId> {
    let p_t = tape.transpose(p.id)?;
    let back = tape.matmul(p_t, x_hat_g)?;
    let lifted = tape.conv1x1(back, params.w_sigma, params.b_sigma)?;
    tape.add(x, lifted)
}

/// The full block: projection, reasoning, reprojection with residual.
/// Differentiable with respect to `x`, `y`, and every parameter.
pub fn eagr_forward(
    tape: &mut Tape,
    x: TensorId,
    y: TensorId,
    spatial: (usize, usize),
    params: &EagrParamIds,
    cfg: &EagrConfig,
) -> Result<TensorId> {
    let p = build_projection(tape, x, y, spatial, params, cfg)?;
    let x_g = project(tape, &p, x, params)?;
    let x_hat = reason(tape, x_g, params, cfg)?;
    reproject(tape, &p, x_hat, x, params)
}
