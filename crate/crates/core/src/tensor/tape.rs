//! Reverse-mode autodiff tape.
//!
//! Every operation appends one node holding its operands and enough saved
//! state to replay a backward rule. Nodes are created in topological order
//! by construction, so one reverse sweep computes all gradients. A tape is
//! single-writer: one forward/backward sequence owns it exclusively, and a
//! consumed tape rejects further recording.

use crate::error::{Error, Result};
use crate::tensor::flops::FlopCounter;
use crate::tensor::Tensor;

/// Handle to a tensor stored on a [`Tape`]. Only meaningful for the tape
/// that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    SoftmaxRows {
        x: TensorId,
    },
    Hadamard {
        a: TensorId,
        b: TensorId,
    },
    AdaptiveAvgPool {
        x: TensorId,
        grid: (usize, usize),
    },
    SelectCentralAnchors {
        x: TensorId,
        sel: (usize, usize),
    },
    Conv1x1 {
        x: TensorId,
        w: TensorId,
        b: TensorId,
    },
    Conv3x3 {
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
    },
    UpsampleNearest {
        x: TensorId,
        factor: usize,
    },
    DownsampleNearest {
        x: TensorId,
        factor: usize,
    },
    ConcatChannels {
        a: TensorId,
        b: TensorId,
    },
    Relu {
        x: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Scale {
        x: TensorId,
        k: f64,
    },
    SumAll {
        x: TensorId,
    },
    Log {
        x: TensorId,
    },
    ClampMin {
        x: TensorId,
        min: f64,
    },
    Reshape {
        x: TensorId,
    },
    Transpose {
        x: TensorId,
    },
    SliceCols {
        x: TensorId,
        start: usize,
        end: usize,
    },
}

/// Recording tape: tensors plus one operation node per tensor.
#[derive(Debug, Default)]
pub struct Tape {
    tensors: Vec<Tensor>,
    ops: Vec<Op>,
    flops: FlopCounter,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a leaf tensor (input, parameter, or constant).
    pub fn leaf(&mut self, t: Tensor) -> Result<TensorId> {
        self.ensure_live()?;
        if let Some(v) = t.data.iter().find(|v| !v.is_finite()) {
            return Err(Error::domain(format!("leaf holds non-finite value {v}")));
        }
        Ok(self.push(t, Op::Leaf))
    }

    /// Leaf that never receives a gradient of interest.
    pub fn constant(&mut self, t: Tensor) -> Result<TensorId> {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.tensors[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    /// Value of a 1-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> Result<f64> {
        let t = &self.tensors[id.0];
        if t.numel() != 1 {
            return Err(Error::contract(format!(
                "expected scalar, got shape {}",
                crate::error::fmt_shape(&t.shape)
            )));
        }
        Ok(t.data[0])
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    pub fn reset_flops(&mut self) {
        self.flops.reset();
    }

    /// Smallest `|pre-activation|` over every relu recorded so far
    /// (infinity when none exists). Finite-difference checks resample
    /// instances whose margin is too small for the step size, since the
    /// subgradient at the kink has no meaningful numeric counterpart.
    pub fn relu_kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for op in &self.ops {
            if let Op::Relu { x } = op {
                for &v in &self.tensors[x.0].data {
                    margin = margin.min(v.abs());
                }
            }
        }
        margin
    }

    fn ensure_live(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::contract(
                "tape already consumed by backward; start a new tape",
            ));
        }
        Ok(())
    }

    fn push(&mut self, t: Tensor, op: Op) -> TensorId {
        let id = TensorId(self.tensors.len());
        self.tensors.push(t);
        self.ops.push(op);
        id
    }

    /// Wraps freshly computed data as a node, enforcing the finiteness
    /// invariant: no NaN/Inf escapes an operation without raising.
    fn output(
        &mut self,
        opname: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
    ) -> Result<TensorId> {
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "{opname} produced non-finite value {v}"
            )));
        }
        let t = Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        };
        Ok(self.push(t, op))
    }

    fn rank2(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(Error::dimension(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    fn rank3(&self, op: &'static str, id: TensorId) -> Result<(usize, usize, usize)> {
        let s = self.shape(id);
        if s.len() != 3 {
            return Err(Error::dimension(op, s, &[]));
        }
        Ok((s[0], s[1], s[2]))
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`; records `m*k*n` MACs.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.matmul_labeled(a, b, "matmul")
    }

    /// `matmul` recorded under a custom flop label, so structurally
    /// significant products (attention terms) can be read back out of the
    /// counter individually.
    pub fn matmul_labeled(
        &mut self,
        a: TensorId,
        b: TensorId,
        label: &'static str,
    ) -> Result<TensorId> {
        self.ensure_live()?;
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(Error::dimension("matmul", self.shape(a), self.shape(b)));
        }
        let ad = &self.tensors[a.0].data;
        let bd = &self.tensors[b.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = ad[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += aip * brow[j];
                }
            }
        }
        self.flops.record(label, (m * k * n) as u64);
        self.output("matmul", vec![m, n], out, Op::MatMul { a, b })
    }

    /// Row-wise softmax of a `[m,n]` tensor, stabilized by per-row max
    /// subtraction.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        self.ensure_live()?;
        let (m, n) = self.rank2("softmax_rows", x)?;
        let xd = &self.tensors[x.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                denom += e;
            }
            for j in 0..n {
                out[i * n + j] /= denom;
            }
        }
        self.output("softmax_rows", vec![m, n], out, Op::SoftmaxRows { x })
    }

    /// Elementwise product. Accepts equal shapes of any rank, or a `[m,1]`
    /// right operand broadcast across the columns of a `[m,n]` left one.
    pub fn hadamard(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.ensure_live()?;
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let broadcast = sa != sb;
        if broadcast {
            let ok = sa.len() == 2 && sb.len() == 2 && sb[0] == sa[0] && sb[1] == 1;
            if !ok {
                return Err(Error::dimension("hadamard", &sa, &sb));
            }
        }
        let ad = &self.tensors[a.0].data;
        let bd = &self.tensors[b.0].data;
        let out: Vec<f64> = if broadcast {
            let n = sa[1];
            ad.iter()
                .enumerate()
                .map(|(idx, &v)| v * bd[idx / n])
                .collect()
        } else {
            ad.iter().zip(bd.iter()).map(|(&x, &y)| x * y).collect()
        };
        self.output("hadamard", sa, out, Op::Hadamard { a, b })
    }

    /// Adaptive average pooling of a `[h,w,c]` map onto a `(ph,pw)` grid.
    /// Cell `(i,j)` averages the bin `[floor(i*h/ph), floor((i+1)*h/ph))`
    /// by `[floor(j*w/pw), floor((j+1)*w/pw))` per channel.
    pub fn adaptive_avg_pool(&mut self, x: TensorId, grid: (usize, usize)) -> Result<TensorId> {
        self.ensure_live()?;
        let (h, w, c) = self.rank3("adaptive_avg_pool", x)?;
        let (ph, pw) = grid;
        if ph == 0 || pw == 0 || ph > h || pw > w {
            return Err(Error::dimension("adaptive_avg_pool", &[h, w, c], &[ph, pw]));
        }
        let xd = &self.tensors[x.0].data;
        let mut out = vec![0.0; ph * pw * c];
        for i in 0..ph {
            let (r0, r1) = bin_bounds(i, h, ph);
            for j in 0..pw {
                let (c0, c1) = bin_bounds(j, w, pw);
                let count = ((r1 - r0) * (c1 - c0)) as f64;
                for ch in 0..c {
                    let mut acc = 0.0;
                    for r in r0..r1 {
                        for cc in c0..c1 {
                            acc += xd[(r * w + cc) * c + ch];
                        }
                    }
                    out[(i * pw + j) * c + ch] = acc / count;
                }
            }
        }
        self.output(
            "adaptive_avg_pool",
            vec![ph, pw, c],
            out,
            Op::AdaptiveAvgPool { x, grid },
        )
    }

    /// Centered `(sh,sw)` sub-block of a `[ph,pw,c]` anchor grid, flattened
    /// row-major to `[sh*sw, c]`. Odd margins round the offset down.
    pub fn select_central_anchors(&mut self, x: TensorId, sel: (usize, usize)) -> Result<TensorId> {
        self.ensure_live()?;
        let (ph, pw, c) = self.rank3("select_central_anchors", x)?;
        let (sh, sw) = sel;
        if sh == 0 || sw == 0 || sh > ph || sw > pw {
            return Err(Error::dimension(
                "select_central_anchors",
                &[ph, pw, c],
                &[sh, sw],
            ));
        }
        let (oy, ox) = ((ph - sh) / 2, (pw - sw) / 2);
        let xd = &self.tensors[x.0].data;
        let mut out = vec![0.0; sh * sw * c];
        for i in 0..sh {
            for j in 0..sw {
                let src = ((oy + i) * pw + (ox + j)) * c;
                let dst = (i * sw + j) * c;
                out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
        self.output(
            "select_central_anchors",
            vec![sh * sw, c],
            out,
            Op::SelectCentralAnchors { x, sel },
        )
    }

    /// `[m,cin] x [cin,cout] + bias[cout]`, the 1x1 convolution on a
    /// flattened spatial view; records `m*cin*cout` MACs.
    pub fn conv1x1(&mut self, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
        self.ensure_live()?;
        let (m, cin) = self.rank2("conv1x1", x)?;
        let (cin2, cout) = self.rank2("conv1x1", w)?;
        if cin != cin2 {
            return Err(Error::dimension("conv1x1", self.shape(x), self.shape(w)));
        }
        if self.shape(b) != [cout] {
            return Err(Error::dimension("conv1x1", self.shape(w), self.shape(b)));
        }
        let xd = &self.tensors[x.0].data;
        let wd = &self.tensors[w.0].data;
        let bd = &self.tensors[b.0].data;
        let mut out = vec![0.0; m * cout];
        for i in 0..m {
            let orow = &mut out[i * cout..(i + 1) * cout];
            orow.copy_from_slice(bd);
            for p in 0..cin {
                let xv = xd[i * cin + p];
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[p * cout..(p + 1) * cout];
                for j in 0..cout {
                    orow[j] += xv * wrow[j];
                }
            }
        }
        self.flops.record("conv1x1", (m * cin * cout) as u64);
        self.output("conv1x1", vec![m, cout], out, Op::Conv1x1 { x, w, b })
    }

    /// 3x3 convolution with zero padding 1 on a `[h,w,cin]` map, kernel
    /// `[3,3,cin,cout]`, per-channel bias, stride 1 or 2; records
    /// `hout*wout*9*cin*cout` MACs.
    pub fn conv3x3(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
    ) -> Result<TensorId> {
        self.ensure_live()?;
        let (h, wd_, cin) = self.rank3("conv3x3", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != 3 || ws[1] != 3 || ws[2] != cin {
            return Err(Error::dimension("conv3x3", &[h, wd_, cin], &ws));
        }
        let cout = ws[3];
        if self.shape(b) != [cout] {
            return Err(Error::dimension("conv3x3", &ws, self.shape(b)));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::contract(format!(
                "conv3x3 stride must be 1 or 2, got {stride}"
            )));
        }
        let hout = (h - 1) / stride + 1;
        let wout = (wd_ - 1) / stride + 1;
        let xd = &self.tensors[x.0].data;
        let kd = &self.tensors[w.0].data;
        let bd = &self.tensors[b.0].data;
        let mut out = vec![0.0; hout * wout * cout];
        for oy in 0..hout {
            for ox in 0..wout {
                let orow = &mut out[(oy * wout + ox) * cout..(oy * wout + ox + 1) * cout];
                orow.copy_from_slice(bd);
                for ky in 0..3 {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= wd_ as isize {
                            continue;
                        }
                        let xbase = ((iy as usize) * wd_ + ix as usize) * cin;
                        let kbase = (ky * 3 + kx) * cin * cout;
                        for ci in 0..cin {
                            let xv = xd[xbase + ci];
                            if xv == 0.0 {
                                continue;
                            }
                            let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for co in 0..cout {
                                orow[co] += xv * krow[co];
                            }
                        }
                    }
                }
            }
        }
        self.flops
            .record("conv3x3", (hout * wout * 9 * cin * cout) as u64);
        self.output(
            "conv3x3",
            vec![hout, wout, cout],
            out,
            Op::Conv3x3 { x, w, b, stride },
        )
    }

    /// Nearest-neighbor upsampling of a `[h,w,c]` map by an integer factor.
    pub fn upsample_nearest(&mut self, x: TensorId, factor: usize) -> Result<TensorId> {
        self.ensure_live()?;
        let (h, w, c) = self.rank3("upsample_nearest", x)?;
        if factor == 0 {
            return Err(Error::contract("upsample factor must be >= 1"));
        }
        let (ho, wo) = (h * factor, w * factor);
        let xd = &self.tensors[x.0].data;
        let mut out = vec![0.0; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let src = ((oy / factor) * w + ox / factor) * c;
                let dst = (oy * wo + ox) * c;
                out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
        self.output(
            "upsample_nearest",
            vec![ho, wo, c],
            out,
            Op::UpsampleNearest { x, factor },
        )
    }

    /// Nearest-neighbor downsampling: keeps the top-left pixel of each
    /// `factor x factor` block. Extents must divide evenly.
    pub fn downsample_nearest(&mut self, x: TensorId, factor: usize) -> Result<TensorId> {
        self.ensure_live()?;
        let (h, w, c) = self.rank3("downsample_nearest", x)?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::dimension(
                "downsample_nearest",
                &[h, w, c],
                &[factor],
            ));
        }
        let (ho, wo) = (h / factor, w / factor);
        let xd = &self.tensors[x.0].data;
        let mut out = vec![0.0; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                let src = ((oy * factor) * w + ox * factor) * c;
                let dst = (oy * wo + ox) * c;
                out[dst..dst + c].copy_from_slice(&xd[src..src + c]);
            }
        }
        self.output(
            "downsample_nearest",
            vec![ho, wo, c],
            out,
            Op::DownsampleNearest { x, factor },
        )
    }

    /// Column-wise concatenation of `[m,ca]` and `[m,cb]` into `[m,ca+cb]`.
    pub fn concat_channels(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.ensure_live()?;
        let (m, ca) = self.rank2("concat_channels", a)?;
        let (m2, cb) = self.rank2("concat_channels", b)?;
        if m != m2 {
            return Err(Error::dimension(
                "concat_channels",
                self.shape(a),
                self.shape(b),
            ));
        }
        let ad = &self.tensors[a.0].data;
        let bd = &self.tensors[b.0].data;
        let mut out = vec![0.0; m * (ca + cb)];
        for i in 0..m {
            out[i * (ca + cb)..i * (ca + cb) + ca].copy_from_slice(&ad[i * ca..(i + 1) * ca]);
            out[i * (ca + cb) + ca..(i + 1) * (ca + cb)].copy_from_slice(&bd[i * cb..(i + 1) * cb]);
        }
        self.output(
            "concat_channels",
            vec![m, ca + cb],
            out,
            Op::ConcatChannels { a, b },
        )
    }

    /// Elementwise `max(x, 0)`; subgradient 0 at the kink.
    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.ensure_live()?;
        let shape = self.shape(x).to_vec();
        let out = self.tensors[x.0].data.iter().map(|&v| v.max(0.0)).collect();
        self.output("relu", shape, out, Op::Relu { x })
    }

    /// Elementwise sum of two equal-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.ensure_live()?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::dimension("add", self.shape(a), self.shape(b)));
        }
        let shape = self.shape(a).to_vec();
        let out = self.tensors[a.0]
            .data
            .iter()
            .zip(self.tensors[b.0].data.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        self.output("add", shape, out, Op::Add { a, b })
    }

    /// Multiplication by a finite constant.
    pub fn scale(&mut self, x: TensorId, k: f64) -> Result<TensorId> {
        self.ensure_live()?;
        if !k.is_finite() {
            return Err(Error::domain(format!("scale factor {k} is not finite")));
        }
        let shape = self.shape(x).to_vec();
        let out = self.tensors[x.0].data.iter().map(|&v| v * k).collect();
        self.output("scale", shape, out, Op::Scale { x, k })
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        self.ensure_live()?;
        let s: f64 = self.tensors[x.0].data.iter().sum();
        self.output("sum_all", vec![1], vec![s], Op::SumAll { x })
    }

    /// Natural log; the input must be strictly positive (loss code clamps
    /// first).
    pub fn log(&mut self, x: TensorId) -> Result<TensorId> {
        self.ensure_live()?;
        if let Some(v) = self.tensors[x.0].data.iter().find(|&&v| v <= 0.0) {
            return Err(Error::domain(format!("log of non-positive value {v}")));
        }
        let shape = self.shape(x).to_vec();
        let out = self.tensors[x.0].data.iter().map(|&v| v.ln()).collect();
        self.output("log", shape, out, Op::Log { x })
    }

    /// Elementwise `max(x, min)`; gradient passes only where `x > min`.
    pub fn clamp_min(&mut self, x: TensorId, min: f64) -> Result<TensorId> {
        self.ensure_live()?;
        let shape = self.shape(x).to_vec();
        let out = self.tensors[x.0].data.iter().map(|&v| v.max(min)).collect();
        self.output("clamp_min", shape, out, Op::ClampMin { x, min })
    }

    /// Reinterprets the buffer under a new shape with the same element
    /// count.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        self.ensure_live()?;
        let numel: usize = shape.iter().product();
        if numel != self.tensors[x.0].numel() {
            return Err(Error::dimension("reshape", self.shape(x), shape));
        }
        let out = self.tensors[x.0].data.clone();
        self.output("reshape", shape.to_vec(), out, Op::Reshape { x })
    }

    /// `[m,n] -> [n,m]`.
    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        self.ensure_live()?;
        let (m, n) = self.rank2("transpose", x)?;
        let xd = &self.tensors[x.0].data;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        self.output("transpose", vec![n, m], out, Op::Transpose { x })
    }

    /// Columns `[start, end)` of a `[m,n]` tensor.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        self.ensure_live()?;
        let (m, n) = self.rank2("slice_cols", x)?;
        if start >= end || end > n {
            return Err(Error::dimension("slice_cols", &[m, n], &[start, end]));
        }
        let k = end - start;
        let xd = &self.tensors[x.0].data;
        let mut out = vec![0.0; m * k];
        for i in 0..m {
            out[i * k..(i + 1) * k].copy_from_slice(&xd[i * n + start..i * n + end]);
        }
        self.output(
            "slice_cols",
            vec![m, k],
            out,
            Op::SliceCols { x, start, end },
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` on every tensor
    /// (zeros for leaves the loss does not reach) and consumes the tape.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.ensure_live()?;
        if self.tensors.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.tensors[loss.0].numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {}",
                crate::error::fmt_shape(&self.tensors[loss.0].shape)
            )));
        }
        let n = self.tensors.len();
        let mut grads: Vec<Vec<f64>> = self.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        grads[loss.0][0] = 1.0;

        for i in (0..n).rev() {
            let op = self.ops[i].clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let g = grads[i].clone();
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            match op {
                Op::Leaf => unreachable!(),
                Op::MatMul { a, b } => {
                    let (m, k) = (self.tensors[a.0].shape[0], self.tensors[a.0].shape[1]);
                    let nn = self.tensors[b.0].shape[1];
                    let ad = self.tensors[a.0].data.clone();
                    let bd = self.tensors[b.0].data.clone();
                    // dA = G * B^T
                    {
                        let da = &mut grads[a.0];
                        for ii in 0..m {
                            for jj in 0..nn {
                                let gv = g[ii * nn + jj];
                                if gv == 0.0 {
                                    continue;
                                }
                                for pp in 0..k {
                                    da[ii * k + pp] += gv * bd[pp * nn + jj];
                                }
                            }
                        }
                    }
                    // dB = A^T * G
                    {
                        let db = &mut grads[b.0];
                        for pp in 0..k {
                            for ii in 0..m {
                                let av = ad[ii * k + pp];
                                if av == 0.0 {
                                    continue;
                                }
                                for jj in 0..nn {
                                    db[pp * nn + jj] += av * g[ii * nn + jj];
                                }
                            }
                        }
                    }
                }
                Op::SoftmaxRows { x } => {
                    let (m, nn) = (self.tensors[i].shape[0], self.tensors[i].shape[1]);
                    let s = &self.tensors[i].data;
                    let dx = &mut grads[x.0];
                    for r in 0..m {
                        let base = r * nn;
                        let mut dot = 0.0;
                        for j in 0..nn {
                            dot += g[base + j] * s[base + j];
                        }
                        for j in 0..nn {
                            dx[base + j] += s[base + j] * (g[base + j] - dot);
                        }
                    }
                }
                Op::Hadamard { a, b } => {
                    let sa = self.tensors[a.0].shape.clone();
                    let sb = self.tensors[b.0].shape.clone();
                    let ad = self.tensors[a.0].data.clone();
                    let bd = self.tensors[b.0].data.clone();
                    if sa == sb {
                        let da = &mut grads[a.0];
                        for idx in 0..g.len() {
                            da[idx] += g[idx] * bd[idx];
                        }
                        let db = &mut grads[b.0];
                        for idx in 0..g.len() {
                            db[idx] += g[idx] * ad[idx];
                        }
                    } else {
                        let nn = sa[1];
                        let da = &mut grads[a.0];
                        for idx in 0..g.len() {
                            da[idx] += g[idx] * bd[idx / nn];
                        }
                        let db = &mut grads[b.0];
                        for idx in 0..g.len() {
                            db[idx / nn] += g[idx] * ad[idx];
                        }
                    }
                }
                Op::AdaptiveAvgPool { x, grid } => {
                    let (h, w, c) = {
                        let s = &self.tensors[x.0].shape;
                        (s[0], s[1], s[2])
                    };
                    let (ph, pw) = grid;
                    let dx = &mut grads[x.0];
                    for ii in 0..ph {
                        let (r0, r1) = bin_bounds(ii, h, ph);
                        for jj in 0..pw {
                            let (c0, c1) = bin_bounds(jj, w, pw);
                            let count = ((r1 - r0) * (c1 - c0)) as f64;
                            for ch in 0..c {
                                let gv = g[(ii * pw + jj) * c + ch] / count;
                                if gv == 0.0 {
                                    continue;
                                }
                                for r in r0..r1 {
                                    for cc in c0..c1 {
                                        dx[(r * w + cc) * c + ch] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                Op::SelectCentralAnchors { x, sel } => {
                    let (ph, pw, c) = {
                        let s = &self.tensors[x.0].shape;
                        (s[0], s[1], s[2])
                    };
                    let (sh, sw) = sel;
                    let (oy, ox) = ((ph - sh) / 2, (pw - sw) / 2);
                    let dx = &mut grads[x.0];
                    for ii in 0..sh {
                        for jj in 0..sw {
                            let src = (ii * sw + jj) * c;
                            let dst = ((oy + ii) * pw + (ox + jj)) * c;
                            for ch in 0..c {
                                dx[dst + ch] += g[src + ch];
                            }
                        }
                    }
                }
                Op::Conv1x1 { x, w, b } => {
                    let (m, cin) = (self.tensors[x.0].shape[0], self.tensors[x.0].shape[1]);
                    let cout = self.tensors[w.0].shape[1];
                    let xd = self.tensors[x.0].data.clone();
                    let wd = self.tensors[w.0].data.clone();
                    {
                        let dx = &mut grads[x.0];
                        for ii in 0..m {
                            for p in 0..cin {
                                let mut acc = 0.0;
                                for j in 0..cout {
                                    acc += g[ii * cout + j] * wd[p * cout + j];
                                }
                                dx[ii * cin + p] += acc;
                            }
                        }
                    }
                    {
                        let dw = &mut grads[w.0];
                        for ii in 0..m {
                            for p in 0..cin {
                                let xv = xd[ii * cin + p];
                                if xv == 0.0 {
                                    continue;
                                }
                                for j in 0..cout {
                                    dw[p * cout + j] += xv * g[ii * cout + j];
                                }
                            }
                        }
                    }
                    {
                        let db = &mut grads[b.0];
                        for ii in 0..m {
                            for j in 0..cout {
                                db[j] += g[ii * cout + j];
                            }
                        }
                    }
                }
                Op::Conv3x3 { x, w, b, stride } => {
                    let (h, wd_, cin) = {
                        let s = &self.tensors[x.0].shape;
                        (s[0], s[1], s[2])
                    };
                    let cout = self.tensors[w.0].shape[3];
                    let (hout, wout) = (self.tensors[i].shape[0], self.tensors[i].shape[1]);
                    let xd = self.tensors[x.0].data.clone();
                    let kd = self.tensors[w.0].data.clone();
                    let (dxv, dwv, dbv) = {
                        let mut dx = vec![0.0; xd.len()];
                        let mut dw = vec![0.0; kd.len()];
                        let mut db = vec![0.0; cout];
                        for oy in 0..hout {
                            for ox in 0..wout {
                                let grow = &g[(oy * wout + ox) * cout..(oy * wout + ox + 1) * cout];
                                for co in 0..cout {
                                    db[co] += grow[co];
                                }
                                for ky in 0..3 {
                                    let iy = (oy * stride + ky) as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let ix = (ox * stride + kx) as isize - 1;
                                        if ix < 0 || ix >= wd_ as isize {
                                            continue;
                                        }
                                        let xbase = ((iy as usize) * wd_ + ix as usize) * cin;
                                        let kbase = (ky * 3 + kx) * cin * cout;
                                        for ci in 0..cin {
                                            let xv = xd[xbase + ci];
                                            let mut acc = 0.0;
                                            for co in 0..cout {
                                                let gv = grow[co];
                                                acc += gv * kd[kbase + ci * cout + co];
                                                dw[kbase + ci * cout + co] += gv * xv;
                                            }
                                            dx[xbase + ci] += acc;
                                        }
                                    }
                                }
                            }
                        }
                        (dx, dw, db)
                    };
                    axpy(&mut grads[x.0], &dxv);
                    axpy(&mut grads[w.0], &dwv);
                    axpy(&mut grads[b.0], &dbv);
                }
                Op::UpsampleNearest { x, factor } => {
                    let (h, w, c) = {
                        let s = &self.tensors[x.0].shape;
                        (s[0], s[1], s[2])
                    };
                    let wo = w * factor;
                    let dx = &mut grads[x.0];
                    for oy in 0..h * factor {
                        for ox in 0..wo {
                            let src = (oy * wo + ox) * c;
                            let dst = ((oy / factor) * w + ox / factor) * c;
                            for ch in 0..c {
                                dx[dst + ch] += g[src + ch];
                            }
                        }
                    }
                }
                Op::DownsampleNearest { x, factor } => {
                    let (_, w, c) = {
                        let s = &self.tensors[x.0].shape;
                        (s[0], s[1], s[2])
                    };
                    let (ho, wo) = (self.tensors[i].shape[0], self.tensors[i].shape[1]);
                    let dx = &mut grads[x.0];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let src = (oy * wo + ox) * c;
                            let dst = ((oy * factor) * w + ox * factor) * c;
                            for ch in 0..c {
                                dx[dst + ch] += g[src + ch];
                            }
                        }
                    }
                }
                Op::ConcatChannels { a, b } => {
                    let (m, ca) = (self.tensors[a.0].shape[0], self.tensors[a.0].shape[1]);
                    let cb = self.tensors[b.0].shape[1];
                    {
                        let da = &mut grads[a.0];
                        for ii in 0..m {
                            for j in 0..ca {
                                da[ii * ca + j] += g[ii * (ca + cb) + j];
                            }
                        }
                    }
                    {
                        let db = &mut grads[b.0];
                        for ii in 0..m {
                            for j in 0..cb {
                                db[ii * cb + j] += g[ii * (ca + cb) + ca + j];
                            }
                        }
                    }
                }
                Op::Relu { x } => {
                    let xd = &self.tensors[x.0].data;
                    let dx = &mut grads[x.0];
                    for idx in 0..g.len() {
                        if xd[idx] > 0.0 {
                            dx[idx] += g[idx];
                        }
                    }
                }
                Op::Add { a, b } => {
                    axpy(&mut grads[a.0], &g);
                    axpy(&mut grads[b.0], &g);
                }
                Op::Scale { x, k } => {
                    let dx = &mut grads[x.0];
                    for idx in 0..g.len() {
                        dx[idx] += g[idx] * k;
                    }
                }
                Op::SumAll { x } => {
                    let gv = g[0];
                    let dx = &mut grads[x.0];
                    for v in dx.iter_mut() {
                        *v += gv;
                    }
                }
                Op::Log { x } => {
                    let xd = &self.tensors[x.0].data;
                    let dx = &mut grads[x.0];
                    for idx in 0..g.len() {
                        dx[idx] += g[idx] / xd[idx];
                    }
                }
                Op::ClampMin { x, min } => {
                    let xd = &self.tensors[x.0].data;
                    let dx = &mut grads[x.0];
                    for idx in 0..g.len() {
                        if xd[idx] > min {
                            dx[idx] += g[idx];
                        }
                    }
                }
                Op::Reshape { x } => {
                    axpy(&mut grads[x.0], &g);
                }
                Op::Transpose { x } => {
                    let (m, nn) = (self.tensors[x.0].shape[0], self.tensors[x.0].shape[1]);
                    let dx = &mut grads[x.0];
                    for ii in 0..m {
                        for j in 0..nn {
                            dx[ii * nn + j] += g[j * m + ii];
                        }
                    }
                }
                Op::SliceCols { x, start, end } => {
                    let nn = self.tensors[x.0].shape[1];
                    let k = end - start;
                    let m = self.tensors[i].shape[0];
                    let dx = &mut grads[x.0];
                    for ii in 0..m {
                        for j in 0..k {
                            dx[ii * nn + start + j] += g[ii * k + j];
                        }
                    }
                }
            }
        }

        for (t, g) in self.tensors.iter_mut().zip(grads) {
            t.grad = Some(g);
        }
        self.consumed = true;
        Ok(())
    }
}

/// Half-open row/col range of pooling bin `i` of `p` bins over extent `n`.
fn bin_bounds(i: usize, n: usize, p: usize) -> (usize, usize) {
    (i * n / p, (i + 1) * n / p)
}

fn axpy(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
