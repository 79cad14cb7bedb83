//! Naive-loop reference implementations used as independent oracles.
//! Everything here computes with plain index arithmetic and no tape, so
//! it shares no code path with the library it checks.

use eagr::graph::{EagrConfig, EagrParams};
use eagr::nonlocal::NonLocalParams;

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Plain exp/normalize row softmax, deliberately unstabilized.
pub fn naive_softmax_rows(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let mut denom = 0.0;
        for j in 0..n {
            let e = x[i * n + j].exp();
            out[i * n + j] = e;
            denom += e;
        }
        for j in 0..n {
            out[i * n + j] /= denom;
        }
    }
    out
}

pub fn naive_conv1x1(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    m: usize,
    cin: usize,
    cout: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; m * cout];
    for i in 0..m {
        for j in 0..cout {
            let mut acc = b[j];
            for p in 0..cin {
                acc += x[i * cin + p] * w[p * cout + j];
            }
            out[i * cout + j] = acc;
        }
    }
    out
}

/// Naive-loop projection matrix: edge-weighted pooling, central anchor
/// selection, anchor/pixel similarity, row softmax.
pub fn naive_build_projection(
    x: &[f64],
    y: &[f64],
    params: &EagrParams,
    cfg: &EagrConfig,
    h: usize,
    w: usize,
    c: usize,
) -> Vec<f64> {
    let hw = h * w;
    let t = cfg.t_dim;
    let (ph, pw) = cfg.pool_grid;
    let (sh, sw) = cfg.central_sel;
    let nv = sh * sw;

    let phi = naive_conv1x1(x, &params.w_phi.data, &params.b_phi.data, hw, c, t);

    // edge-weighted adaptive average pooling of phi onto the anchor grid
    let mut pooled = vec![0.0; ph * pw * t];
    for bi in 0..ph {
        let (r0, r1) = (bi * h / ph, (bi + 1) * h / ph);
        for bj in 0..pw {
            let (c0, c1) = (bj * w / pw, (bj + 1) * w / pw);
            let count = ((r1 - r0) * (c1 - c0)) as f64;
            for ch in 0..t {
                let mut acc = 0.0;
                for r in r0..r1 {
                    for cc in c0..c1 {
                        let pix = r * w + cc;
                        acc += phi[pix * t + ch] * y[pix];
                    }
                }
                pooled[(bi * pw + bj) * t + ch] = acc / count;
            }
        }
    }

    // centered anchor selection
    let (oy, ox) = ((ph - sh) / 2, (pw - sw) / 2);
    let mut anchors = vec![0.0; nv * t];
    for i in 0..sh {
        for j in 0..sw {
            for ch in 0..t {
                anchors[(i * sw + j) * t + ch] = pooled[((oy + i) * pw + (ox + j)) * t + ch];
            }
        }
    }

    // similarity logits and row softmax over pixels
    let mut proj = vec![0.0; nv * hw];
    for v in 0..nv {
        for pix in 0..hw {
            let mut acc = 0.0;
            for ch in 0..t {
                acc += anchors[v * t + ch] * phi[pix * t + ch];
            }
            proj[v * hw + pix] = acc;
        }
    }
    naive_softmax_rows(&proj, nv, hw)
}

/// Monolithic reimplementation of the whole reasoning block with plain
/// loops: projection, one graph-convolution step, reprojection.
pub fn naive_eagr_forward(
    x: &[f64],
    y: &[f64],
    params: &EagrParams,
    cfg: &EagrConfig,
    h: usize,
    w: usize,
    c: usize,
) -> Vec<f64> {
    let hw = h * w;
    let k = cfg.k_dim;
    let (sh, sw) = cfg.central_sel;
    let nv = sh * sw;

    let proj = naive_build_projection(x, y, params, cfg, h, w, c);

    // project pixel features to vertices
    let theta = naive_conv1x1(x, &params.w_theta.data, &params.b_theta.data, hw, c, k);
    let x_g = naive_matmul(&proj, &theta, nv, hw, k);

    // (I - A) X_G W_G with relu, plus the residual
    let mut mixed = vec![0.0; nv * k];
    for i in 0..nv {
        for j in 0..k {
            let mut acc = 0.0;
            for v in 0..nv {
                let m = if i == v { 1.0 } else { 0.0 } - params.adj.data[i * nv + v];
                acc += m * x_g[v * k + j];
            }
            mixed[i * k + j] = acc;
        }
    }
    let mut reasoned = naive_matmul(&mixed, &params.w_g.data, nv, k, k);
    for v in reasoned.iter_mut() {
        *v = v.max(0.0);
    }
    if cfg.residual_reasoning {
        for (r, g) in reasoned.iter_mut().zip(&x_g) {
            *r += g;
        }
    }

    // reproject through the transpose and lift back to c channels
    let mut back = vec![0.0; hw * k];
    for pix in 0..hw {
        for j in 0..k {
            let mut acc = 0.0;
            for v in 0..nv {
                acc += proj[v * hw + pix] * reasoned[v * k + j];
            }
            back[pix * k + j] = acc;
        }
    }
    let lifted = naive_conv1x1(&back, &params.w_sigma.data, &params.b_sigma.data, hw, k, c);
    x.iter().zip(&lifted).map(|(a, b)| a + b).collect()
}

/// Triple-loop reimplementation of the dense non-local module.
pub fn naive_nonlocal_forward(
    x: &[f64],
    params: &NonLocalParams,
    hw: usize,
    c: usize,
    t: usize,
) -> Vec<f64> {
    let theta = naive_conv1x1(x, &params.w_theta.data, &params.b_theta.data, hw, c, t);
    let phi = naive_conv1x1(x, &params.w_phi.data, &params.b_phi.data, hw, c, t);
    let gamma = naive_conv1x1(x, &params.w_gamma.data, &params.b_gamma.data, hw, c, c);
    let mut logits = vec![0.0; hw * hw];
    for i in 0..hw {
        for j in 0..hw {
            let mut acc = 0.0;
            for ch in 0..t {
                acc += theta[i * t + ch] * phi[j * t + ch];
            }
            logits[i * hw + j] = acc;
        }
    }
    let attn = naive_softmax_rows(&logits, hw, hw);
    naive_matmul(&attn, &gamma, hw, hw, c)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
