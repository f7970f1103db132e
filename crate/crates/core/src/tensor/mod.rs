//! Tape-based reverse-mode autodiff over dense row-major f32 buffers.
//!
//! One [`Graph`] records one forward pass; [`Graph::backward`] then fills
//! gradients for every `requires_grad` ancestor of the loss. Parameters live
//! outside the graph as [`Param`] values and are re-bound as leaves each step,
//! so graphs are cheap and short-lived by design. Everything is f32, single
//! threaded, and deterministic: identical graphs produce bitwise-identical
//! gradients.

pub mod checkpoint;
pub mod optim;

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// A named, graph-independent parameter buffer (weights, biases, BN affine).
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<f32>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "param data length must match shape"
        );
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![0.0; len])
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], v: f32) -> Self {
        let len = shape.iter().product();
        Self::new(name, shape, vec![v; len])
    }

    /// Bind as a gradient-carrying leaf in `g`.
    pub fn bind(&self, g: &mut Graph) -> TensorId {
        g.leaf(&self.shape, self.data.clone(), true)
    }
}

/// Per-channel batch statistics produced by a train-mode batch-norm, for the
/// caller to fold into its running estimates. `var` is the biased estimate
/// (divide by count) actually used for normalization.
#[derive(Debug, Clone)]
pub struct BnStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub count: usize,
}

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    AddScalar(TensorId),
    Scale(TensorId, f32),
    /// C[M×N] = A[M×K] · B[K×N]
    Matmul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// C[M×N] = A[M×K] · B[N×K]ᵀ
    MatmulNt {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    /// out[i] = Σ_j a[i,j]·b[i,j]
    RowwiseDot {
        a: TensorId,
        b: TensorId,
        n: usize,
        d: usize,
    },
    /// [N×Da] ++ [N×Db] → [N×(Da+Db)]
    ConcatCols {
        a: TensorId,
        b: TensorId,
        n: usize,
        da: usize,
        db: usize,
    },
    /// out[i] = x[idx[i]]
    GatherRows {
        x: TensorId,
        idx: Vec<usize>,
        d: usize,
    },
    Conv2d {
        x: TensorId,
        w: TensorId,
        n: usize,
        c_in: usize,
        h: usize,
        wi: usize,
        f: usize,
        k: usize,
        stride: usize,
        pad: usize,
        oh: usize,
        ow: usize,
        /// im2col buffer for all samples, [N][C·k·k][OH·OW], cached for backward.
        cols: Vec<f32>,
    },
    Relu(TensorId),
    BatchNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        n: usize,
        c: usize,
        spatial: usize,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    BatchNormEval {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        n: usize,
        c: usize,
        spatial: usize,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
    },
    L2NormRows {
        x: TensorId,
        n: usize,
        d: usize,
        norms: Vec<f32>,
    },
    LogSoftmaxRows {
        x: TensorId,
        n: usize,
        d: usize,
    },
    GlobalAvgPool {
        x: TensorId,
        n: usize,
        c: usize,
        spatial: usize,
    },
    SumAll(TensorId),
    MeanAll(TensorId),
    /// out[i,j] = x[i,j] + row[j]
    AddRowBroadcast {
        x: TensorId,
        row: TensorId,
        n: usize,
        d: usize,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// The tape. Records ops in execution order; backward walks them in reverse.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Row-major sgemm: C[m×n] (+)= A·B with explicit strides.
#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        }
        return;
    }
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<f32>, requires_grad: bool) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf data length must match shape"
        );
        self.push(shape.to_vec(), data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f32>) -> TensorId {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: f32) -> TensorId {
        self.constant(&[1], vec![v])
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Scalar value of a single-element tensor.
    pub fn value(&self, id: TensorId) -> f32 {
        assert_eq!(self.nodes[id.0].data.len(), 1, "value() needs a scalar");
        self.nodes[id.0].data[0]
    }

    /// Copy of `id`'s data as a fresh gradient-free leaf (stop-gradient).
    pub fn detach(&mut self, id: TensorId) -> TensorId {
        let shape = self.nodes[id.0].shape.clone();
        let data = self.nodes[id.0].data.clone();
        self.push(shape, data, false, Op::Leaf)
    }

    fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn binary_elementwise(
        &mut self,
        opname: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<TensorId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op: opname,
                lhs: self.nodes[a.0].shape.clone(),
                rhs: self.nodes[b.0].shape.clone(),
            });
        }
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(self.nodes[a.0].shape.clone(), data, rg, op))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: TensorId, s: f32) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| x + s).collect();
        let rg = self.wants(a);
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::AddScalar(a))
    }

    pub fn scale(&mut self, a: TensorId, s: f32) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| x * s).collect();
        let rg = self.wants(a);
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Scale(a, s))
    }

    fn rank2(&self, op: &'static str, id: TensorId) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::invalid(
                op,
                format!("expected rank-2 tensor, got shape {:?}", self.nodes[id.0].shape),
            )),
        }
    }

    /// C[M×N] = A[M×K] · B[K×N]
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.rank2("matmul", a)?;
        let (kb, n) = self.rank2("matmul", b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, ka],
                rhs: vec![kb, n],
            });
        }
        let mut out = vec![0.0; m * n];
        sgemm(
            m,
            ka,
            n,
            &self.nodes[a.0].data,
            ka as isize,
            1,
            &self.nodes[b.0].data,
            n as isize,
            1,
            0.0,
            &mut out,
        );
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul { a, b, m, k: ka, n }))
    }

    /// C[M×N] = A[M×K] · B[N×K]ᵀ — similarity matrices without an explicit transpose.
    pub fn matmul_nt(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.rank2("matmul_nt", a)?;
        let (n, kb) = self.rank2("matmul_nt", b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                lhs: vec![m, ka],
                rhs: vec![n, kb],
            });
        }
        let mut out = vec![0.0; m * n];
        sgemm(
            m,
            ka,
            n,
            &self.nodes[a.0].data,
            ka as isize,
            1,
            &self.nodes[b.0].data,
            1,
            ka as isize,
            0.0,
            &mut out,
        );
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(vec![m, n], out, rg, Op::MatmulNt { a, b, m, k: ka, n }))
    }

    /// out[i] = a[i]·b[i] for rows of two N×D tensors; result shape [N,1] so
    /// it can feed column-wise concatenation.
    pub fn rowwise_dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (na, d) = self.rank2("rowwise_dot", a)?;
        let (nb, db) = self.rank2("rowwise_dot", b)?;
        if na != nb || d != db {
            return Err(Error::ShapeMismatch {
                op: "rowwise_dot",
                lhs: vec![na, d],
                rhs: vec![nb, db],
            });
        }
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let out: Vec<f32> = (0..na)
            .map(|i| {
                (0..d).map(|j| ad[i * d + j] * bd[i * d + j]).sum()
            })
            .collect();
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(vec![na, 1], out, rg, Op::RowwiseDot { a, b, n: na, d }))
    }

    /// Horizontal concat of two rank-2 tensors with equal row counts.
    pub fn concat_cols(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (na, da) = self.rank2("concat_cols", a)?;
        let (nb, db) = self.rank2("concat_cols", b)?;
        if na != nb {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: vec![na, da],
                rhs: vec![nb, db],
            });
        }
        let ad = &self.nodes[a.0].data;
        let bd = &self.nodes[b.0].data;
        let mut out = Vec::with_capacity(na * (da + db));
        for i in 0..na {
            out.extend_from_slice(&ad[i * da..(i + 1) * da]);
            out.extend_from_slice(&bd[i * db..(i + 1) * db]);
        }
        let rg = self.wants(a) || self.wants(b);
        Ok(self.push(
            vec![na, da + db],
            out,
            rg,
            Op::ConcatCols {
                a,
                b,
                n: na,
                da,
                db,
            },
        ))
    }

    /// Row permutation/selection: out[i] = x[idx[i]].
    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (n, d) = self.rank2("gather_rows", x)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(
                "gather_rows",
                format!("index {bad} out of range for {n} rows"),
            ));
        }
        let xd = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&xd[i * d..(i + 1) * d]);
        }
        let rg = self.wants(x);
        Ok(self.push(
            vec![idx.len(), d],
            out,
            rg,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
                d,
            },
        ))
    }

    /// conv2d(x[N×C×H×W], w[F×C×k×k]) via im2col + sgemm; no bias.
    pub fn conv2d(&mut self, x: TensorId, w: TensorId, stride: usize, pad: usize) -> Result<TensorId> {
        let (n, c_in, h, wi) = match self.nodes[x.0].shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::invalid(
                    "conv2d",
                    format!("input must be rank 4, got {:?}", self.nodes[x.0].shape),
                ))
            }
        };
        let (f, cw, k, k2) = match self.nodes[w.0].shape[..] {
            [f, c, k, k2] => (f, c, k, k2),
            _ => {
                return Err(Error::invalid(
                    "conv2d",
                    format!("weight must be rank 4, got {:?}", self.nodes[w.0].shape),
                ))
            }
        };
        if k != k2 || cw != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: vec![n, c_in, h, wi],
                rhs: vec![f, cw, k, k2],
            });
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d", "stride must be >= 1"));
        }
        if k > h + 2 * pad || k > wi + 2 * pad {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {k} exceeds padded input {}x{}", h + 2 * pad, wi + 2 * pad),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wi + 2 * pad - k) / stride + 1;
        let ckk = c_in * k * k;
        let patch = oh * ow;
        let xd = &self.nodes[x.0].data;
        let mut cols = vec![0.0f32; n * ckk * patch];
        for i in 0..n {
            let coff = i * ckk * patch;
            for ch in 0..c_in {
                let plane = &xd[(i * c_in + ch) * h * wi..(i * c_in + ch + 1) * h * wi];
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (ch * k + ky) * k + kx;
                        let (ox_lo, ox_hi) = valid_ox_range(wi, kx, pad, stride, ow);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let base = coff + row * patch;
                        for oy in 0..oh {
                            let iy = oy * stride + ky;
                            if iy < pad || iy >= h + pad {
                                continue;
                            }
                            let src = &plane[(iy - pad) * wi..(iy - pad + 1) * wi];
                            let dst = &mut cols[base + oy * ow + ox_lo..base + oy * ow + ox_hi];
                            let ix0 = ox_lo * stride + kx - pad;
                            if stride == 1 {
                                dst.copy_from_slice(&src[ix0..ix0 + dst.len()]);
                            } else {
                                for (d, &s) in dst.iter_mut().zip(src[ix0..].iter().step_by(stride))
                                {
                                    *d = s;
                                }
                            }
                        }
                    }
                }
            }
        }
        let wd = &self.nodes[w.0].data;
        let mut out = vec![0.0f32; n * f * patch];
        for i in 0..n {
            let (co, oo) = (i * ckk * patch, i * f * patch);
            sgemm(
                f,
                ckk,
                patch,
                wd,
                ckk as isize,
                1,
                &cols[co..co + ckk * patch],
                patch as isize,
                1,
                0.0,
                &mut out[oo..oo + f * patch],
            );
        }
        let rg = self.wants(x) || self.wants(w);
        Ok(self.push(
            vec![n, f, oh, ow],
            out,
            rg,
            Op::Conv2d {
                x,
                w,
                n,
                c_in,
                h,
                wi,
                f,
                k,
                stride,
                pad,
                oh,
                ow,
                cols,
            },
        ))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let rg = self.wants(a);
        self.push(self.nodes[a.0].shape.clone(), data, rg, Op::Relu(a))
    }

    fn bn_dims(&self, op: &'static str, x: TensorId) -> Result<(usize, usize, usize)> {
        match self.nodes[x.0].shape[..] {
            [n, c] => Ok((n, c, 1)),
            [n, c, h, w] => Ok((n, c, h * w)),
            _ => Err(Error::invalid(
                op,
                format!("batch norm expects rank 2 or 4, got {:?}", self.nodes[x.0].shape),
            )),
        }
    }

    fn bn_check_affine(
        &self,
        op: &'static str,
        c: usize,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<()> {
        for &p in &[gamma, beta] {
            if self.nodes[p.0].data.len() != c {
                return Err(Error::ShapeMismatch {
                    op,
                    lhs: vec![c],
                    rhs: self.nodes[p.0].shape.clone(),
                });
            }
        }
        Ok(())
    }

    /// Train-mode batch norm over the batch (and spatial) axes, per channel.
    /// Returns the output plus the batch statistics for running-stat updates.
    pub fn batch_norm_train(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f32,
    ) -> Result<(TensorId, BnStats)> {
        let (n, c, spatial) = self.bn_dims("batch_norm_train", x)?;
        self.bn_check_affine("batch_norm_train", c, gamma, beta)?;
        let count = n * spatial;
        let xd = &self.nodes[x.0].data;
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for i in 0..n {
                let base = (i * c + ch) * spatial;
                for &x in &xd[base..base + spatial] {
                    s += x as f64;
                }
            }
            mean[ch] = (s / count as f64) as f32;
            let m = mean[ch] as f64;
            let mut v = 0.0f64;
            for i in 0..n {
                let base = (i * c + ch) * spatial;
                for &x in &xd[base..base + spatial] {
                    let d = x as f64 - m;
                    v += d * d;
                }
            }
            var[ch] = (v / count as f64) as f32;
        }
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                let (m, istd, gam, bet) = (mean[ch], inv_std[ch], gd[ch], bd[ch]);
                let span = base..base + spatial;
                for ((xh, o), &x) in xhat[span.clone()]
                    .iter_mut()
                    .zip(&mut out[span.clone()])
                    .zip(&xd[span])
                {
                    let t = (x - m) * istd;
                    *xh = t;
                    *o = gam * t + bet;
                }
            }
        }
        let rg = self.wants(x) || self.wants(gamma) || self.wants(beta);
        let stats = BnStats {
            mean: mean.clone(),
            var: var.clone(),
            count,
        };
        let id = self.push(
            self.nodes[x.0].shape.clone(),
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                n,
                c,
                spatial,
                xhat,
                inv_std,
            },
        );
        Ok((id, stats))
    }

    /// Eval-mode batch norm using frozen running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<TensorId> {
        let (n, c, spatial) = self.bn_dims("batch_norm_eval", x)?;
        self.bn_check_affine("batch_norm_eval", c, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::ShapeMismatch {
                op: "batch_norm_eval",
                lhs: vec![c],
                rhs: vec![running_mean.len(), running_var.len()],
            });
        }
        let inv_std: Vec<f32> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                let (m, istd, gam, bet) = (running_mean[ch], inv_std[ch], gd[ch], bd[ch]);
                let span = base..base + spatial;
                for ((xh, o), &x) in xhat[span.clone()]
                    .iter_mut()
                    .zip(&mut out[span.clone()])
                    .zip(&xd[span])
                {
                    let t = (x - m) * istd;
                    *xh = t;
                    *o = gam * t + bet;
                }
            }
        }
        let rg = self.wants(x) || self.wants(gamma) || self.wants(beta);
        Ok(self.push(
            self.nodes[x.0].shape.clone(),
            out,
            rg,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                n,
                c,
                spatial,
                xhat,
                inv_std,
            },
        ))
    }

    /// Normalize each row of an N×D tensor to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, d) = self.rank2("l2_normalize_rows", x)?;
        let xd = &self.nodes[x.0].data;
        let mut norms = vec![0.0f32; n];
        let mut out = vec![0.0f32; n * d];
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32;
            if norm < 1e-12 {
                return Err(Error::ZeroNormRow { row: i });
            }
            norms[i] = norm;
            for j in 0..d {
                out[i * d + j] = row[j] / norm;
            }
        }
        let rg = self.wants(x);
        Ok(self.push(vec![n, d], out, rg, Op::L2NormRows { x, n, d, norms }))
    }

    /// Row-wise log-softmax of an N×D tensor (numerically stabilized).
    pub fn log_softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, d) = self.rank2("log_softmax_rows", x)?;
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0f32; n * d];
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max
                + row
                    .iter()
                    .map(|&v| ((v - max) as f64).exp())
                    .sum::<f64>()
                    .ln() as f32;
            for j in 0..d {
                out[i * d + j] = row[j] - lse;
            }
        }
        let rg = self.wants(x);
        Ok(self.push(vec![n, d], out, rg, Op::LogSoftmaxRows { x, n, d }))
    }

    /// N×C×H×W → N×C mean over the spatial extent.
    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, c, spatial) = match self.nodes[x.0].shape[..] {
            [n, c, h, w] => (n, c, h * w),
            _ => {
                return Err(Error::invalid(
                    "global_avg_pool",
                    format!("expected rank 4, got {:?}", self.nodes[x.0].shape),
                ))
            }
        };
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0f32; n * c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                let s: f32 = xd[base..base + spatial].iter().sum();
                out[i * c + ch] = s / spatial as f32;
            }
        }
        let rg = self.wants(x);
        Ok(self.push(vec![n, c], out, rg, Op::GlobalAvgPool { x, n, c, spatial }))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f32 = self.nodes[a.0].data.iter().sum();
        let rg = self.wants(a);
        self.push(vec![1], vec![s], rg, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let len = self.nodes[a.0].data.len();
        let s: f32 = self.nodes[a.0].data.iter().sum();
        let rg = self.wants(a);
        self.push(vec![1], vec![s / len as f32], rg, Op::MeanAll(a))
    }

    /// out[i,j] = x[i,j] + row[j]; `row` has shape [D] (a bias).
    pub fn add_row_broadcast(&mut self, x: TensorId, row: TensorId) -> Result<TensorId> {
        let (n, d) = self.rank2("add_row_broadcast", x)?;
        if self.nodes[row.0].data.len() != d {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: vec![n, d],
                rhs: self.nodes[row.0].shape.clone(),
            });
        }
        let xd = &self.nodes[x.0].data;
        let rd = &self.nodes[row.0].data;
        let mut out = vec![0.0f32; n * d];
        for i in 0..n {
            for j in 0..d {
                out[i * d + j] = xd[i * d + j] + rd[j];
            }
        }
        let rg = self.wants(x) || self.wants(row);
        Ok(self.push(vec![n, d], out, rg, Op::AddRowBroadcast { x, row, n, d }))
    }

    fn take_grad(&mut self, id: TensorId) -> Vec<f32> {
        let len = self.nodes[id.0].data.len();
        self.nodes[id.0]
            .grad
            .take()
            .unwrap_or_else(|| vec![0.0; len])
    }

    /// Backpropagate from a scalar loss. Fills `grad` for every
    /// `requires_grad` ancestor; each node is visited exactly once.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::invalid("backward", "loss must be a scalar"));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::MissingGrad(
                "loss does not depend on any requires_grad leaf".into(),
            ));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            let g = self.nodes[i].grad.take().unwrap();
            self.backprop_one(&op, TensorId(i), &g);
            self.nodes[i].grad = Some(g);
            self.nodes[i].op = op;
        }
        Ok(())
    }

    fn backprop_one(&mut self, op: &Op, node: TensorId, g: &[f32]) {
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.wants(a) {
                    let mut ga = self.take_grad(a);
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                    self.nodes[a.0].grad = Some(ga);
                }
                if self.wants(b) {
                    let mut gb = self.take_grad(b);
                    for (x, &gi) in gb.iter_mut().zip(g) {
                        *x += gi;
                    }
                    self.nodes[b.0].grad = Some(gb);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(a) {
                    let mut ga = self.take_grad(a);
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                    self.nodes[a.0].grad = Some(ga);
                }
                if self.wants(b) {
                    let mut gb = self.take_grad(b);
                    for (x, &gi) in gb.iter_mut().zip(g) {
                        *x -= gi;
                    }
                    self.nodes[b.0].grad = Some(gb);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(a) {
                    let mut ga = self.take_grad(a);
                    for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(&self.nodes[b.0].data) {
                        *d += gv * bv;
                    }
                    self.nodes[a.0].grad = Some(ga);
                }
                if self.wants(b) {
                    let mut gb = self.take_grad(b);
                    for ((d, &gv), &av) in gb.iter_mut().zip(g).zip(&self.nodes[a.0].data) {
                        *d += gv * av;
                    }
                    self.nodes[b.0].grad = Some(gb);
                }
            }
            Op::Div(a, b) => {
                if self.wants(a) {
                    let mut ga = self.take_grad(a);
                    for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(&self.nodes[b.0].data) {
                        *d += gv / bv;
                    }
                    self.nodes[a.0].grad = Some(ga);
                }
                if self.wants(b) {
                    let mut gb = self.take_grad(b);
                    for (((d, &gv), &av), &bv) in gb
                        .iter_mut()
                        .zip(g)
                        .zip(&self.nodes[a.0].data)
                        .zip(&self.nodes[b.0].data)
                    {
                        *d -= gv * av / (bv * bv);
                    }
                    self.nodes[b.0].grad = Some(gb);
                }
            }
            Op::AddScalar(a) => {
                if self.wants(a) {
                    let mut ga = self.take_grad(a);
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += gi;
                    }
                    self.nodes[a.0].grad = Some(ga);
                }
            }
            Op::Scale(a, s) => {
                if self.wants(a) {
                    let mut ga = self.take_grad(a);
                    for (x, &gi) in ga.iter_mut().zip(g) {
                        *x += s * gi;
                    }
                    self.nodes[a.0].grad = Some(ga);
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                // dA += G·Bᵀ ; dB += Aᵀ·G
                if self.wants(a) {
                    let mut ga = self.take_grad(a);
                    sgemm(m, n, k, g, n as isize, 1, &self.nodes[b.0].data, 1, n as isize, 1.0, &mut ga);
                    self.nodes[a.0].grad = Some(ga);
                }
                if self.wants(b) {
                    let mut gb = self.take_grad(b);
                    sgemm(k, m, n, &self.nodes[a.0].data, 1, k as isize, g, n as isize, 1, 1.0, &mut gb);
                    self.nodes[b.0].grad = Some(gb);
                }
            }
            Op::MatmulNt { a, b, m, k, n } => {
                // C = A·Bᵀ: dA += G·B ; dB += Gᵀ·A
                if self.wants(a) {
                    let mut ga = self.take_grad(a);
                    sgemm(m, n, k, g, n as isize, 1, &self.nodes[b.0].data, k as isize, 1, 1.0, &mut ga);
                    self.nodes[a.0].grad = Some(ga);
                }
                if self.wants(b) {
                    let mut gb = self.take_grad(b);
                    sgemm(n, m, k, g, 1, n as isize, &self.nodes[a.0].data, k as isize, 1, 1.0, &mut gb);
                    self.nodes[b.0].grad = Some(gb);
                }
            }
            Op::RowwiseDot { a, b, n, d } => {
                if self.wants(a) {
                    let mut ga = self.take_grad(a);
                    for i in 0..n {
                        let gi = g[i];
                        for (dst, &bv) in ga[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&self.nodes[b.0].data[i * d..(i + 1) * d])
                        {
                            *dst += gi * bv;
                        }
                    }
                    self.nodes[a.0].grad = Some(ga);
                }
                if self.wants(b) {
                    let mut gb = self.take_grad(b);
                    for i in 0..n {
                        let gi = g[i];
                        for (dst, &av) in gb[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&self.nodes[a.0].data[i * d..(i + 1) * d])
                        {
                            *dst += gi * av;
                        }
                    }
                    self.nodes[b.0].grad = Some(gb);
                }
            }
            Op::ConcatCols { a, b, n, da, db } => {
                let d = da + db;
                if self.wants(a) {
                    let mut ga = self.take_grad(a);
                    for i in 0..n {
                        for (dst, &gv) in ga[i * da..(i + 1) * da]
                            .iter_mut()
                            .zip(&g[i * d..i * d + da])
                        {
                            *dst += gv;
                        }
                    }
                    self.nodes[a.0].grad = Some(ga);
                }
                if self.wants(b) {
                    let mut gb = self.take_grad(b);
                    for i in 0..n {
                        for (dst, &gv) in gb[i * db..(i + 1) * db]
                            .iter_mut()
                            .zip(&g[i * d + da..(i + 1) * d])
                        {
                            *dst += gv;
                        }
                    }
                    self.nodes[b.0].grad = Some(gb);
                }
            }
            Op::GatherRows { x, ref idx, d } => {
                if self.wants(x) {
                    let mut gx = self.take_grad(x);
                    for (i, &src) in idx.iter().enumerate() {
                        for (dst, &gv) in gx[src * d..(src + 1) * d]
                            .iter_mut()
                            .zip(&g[i * d..(i + 1) * d])
                        {
                            *dst += gv;
                        }
                    }
                    self.nodes[x.0].grad = Some(gx);
                }
            }
            Op::Conv2d {
                x,
                w,
                n,
                c_in,
                h,
                wi,
                f,
                k,
                stride,
                pad,
                oh,
                ow,
                ref cols,
            } => {
                let ckk = c_in * k * k;
                let patch = oh * ow;
                if self.wants(w) {
                    // dW += Σ_n G_n · cols_nᵀ
                    let mut gw = self.take_grad(w);
                    for i in 0..n {
                        let go = i * f * patch;
                        let co = i * ckk * patch;
                        sgemm(
                            f,
                            patch,
                            ckk,
                            &g[go..go + f * patch],
                            patch as isize,
                            1,
                            &cols[co..co + ckk * patch],
                            1,
                            patch as isize,
                            1.0,
                            &mut gw,
                        );
                    }
                    self.nodes[w.0].grad = Some(gw);
                }
                if self.wants(x) {
                    // dcols_n = Wᵀ·G_n, then col2im scatter-add
                    let mut gx = self.take_grad(x);
                    let mut dcols = vec![0.0f32; ckk * patch];
                    for i in 0..n {
                        let go = i * f * patch;
                        sgemm(
                            ckk,
                            f,
                            patch,
                            &self.nodes[w.0].data,
                            1,
                            ckk as isize,
                            &g[go..go + f * patch],
                            patch as isize,
                            1,
                            0.0,
                            &mut dcols,
                        );
                        let xoff = i * c_in * h * wi;
                        for ch in 0..c_in {
                            let gplane = &mut gx[xoff + ch * h * wi..xoff + (ch + 1) * h * wi];
                            for ky in 0..k {
                                for kx in 0..k {
                                    let row = (ch * k + ky) * k + kx;
                                    let (ox_lo, ox_hi) = valid_ox_range(wi, kx, pad, stride, ow);
                                    if ox_lo >= ox_hi {
                                        continue;
                                    }
                                    for oy in 0..oh {
                                        let iy = oy * stride + ky;
                                        if iy < pad || iy >= h + pad {
                                            continue;
                                        }
                                        let src = &dcols[row * patch + oy * ow + ox_lo
                                            ..row * patch + oy * ow + ox_hi];
                                        let drow =
                                            &mut gplane[(iy - pad) * wi..(iy - pad + 1) * wi];
                                        let ix0 = ox_lo * stride + kx - pad;
                                        if stride == 1 {
                                            for (d, &s) in
                                                drow[ix0..ix0 + src.len()].iter_mut().zip(src)
                                            {
                                                *d += s;
                                            }
                                        } else {
                                            for (d, &s) in drow[ix0..]
                                                .iter_mut()
                                                .step_by(stride)
                                                .zip(src)
                                            {
                                                *d += s;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.nodes[x.0].grad = Some(gx);
                }
            }
            Op::Relu(a) => {
                if self.wants(a) {
                    let mut ga = self.take_grad(a);
                    for ((d, &gv), &av) in ga.iter_mut().zip(g).zip(&self.nodes[a.0].data) {
                        if av > 0.0 {
                            *d += gv;
                        }
                    }
                    self.nodes[a.0].grad = Some(ga);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                n,
                c,
                spatial,
                ref xhat,
                ref inv_std,
            } => {
                let count = (n * spatial) as f32;
                // Per-channel reductions of g and g·x̂ feed all three grads.
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        for (&gv, &xh) in g[base..base + spatial]
                            .iter()
                            .zip(&xhat[base..base + spatial])
                        {
                            sum_g[ch] += gv as f64;
                            sum_gx[ch] += (gv * xh) as f64;
                        }
                    }
                }
                if self.wants(beta) {
                    let mut gb = self.take_grad(beta);
                    for ch in 0..c {
                        gb[ch] += sum_g[ch] as f32;
                    }
                    self.nodes[beta.0].grad = Some(gb);
                }
                if self.wants(gamma) {
                    let mut gg = self.take_grad(gamma);
                    for ch in 0..c {
                        gg[ch] += sum_gx[ch] as f32;
                    }
                    self.nodes[gamma.0].grad = Some(gg);
                }
                if self.wants(x) {
                    let mut gx = self.take_grad(x);
                    let gd = &self.nodes[gamma.0].data;
                    for ch in 0..c {
                        let gam = gd[ch];
                        let mg = gam * sum_g[ch] as f32 / count;
                        let mgx = gam * sum_gx[ch] as f32 / count;
                        let istd = inv_std[ch];
                        for i in 0..n {
                            let base = (i * c + ch) * spatial;
                            for ((d, &gv), &xh) in gx[base..base + spatial]
                                .iter_mut()
                                .zip(&g[base..base + spatial])
                                .zip(&xhat[base..base + spatial])
                            {
                                *d += istd * (gam * gv - mg - xh * mgx);
                            }
                        }
                    }
                    self.nodes[x.0].grad = Some(gx);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                n,
                c,
                spatial,
                ref xhat,
                ref inv_std,
            } => {
                if self.wants(beta) {
                    let mut gb = self.take_grad(beta);
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * spatial;
                            for &gv in &g[base..base + spatial] {
                                gb[ch] += gv;
                            }
                        }
                    }
                    self.nodes[beta.0].grad = Some(gb);
                }
                if self.wants(gamma) {
                    let mut gg = self.take_grad(gamma);
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * spatial;
                            for (&gv, &xh) in g[base..base + spatial]
                                .iter()
                                .zip(&xhat[base..base + spatial])
                            {
                                gg[ch] += gv * xh;
                            }
                        }
                    }
                    self.nodes[gamma.0].grad = Some(gg);
                }
                if self.wants(x) {
                    let mut gx = self.take_grad(x);
                    let gd = &self.nodes[gamma.0].data;
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * spatial;
                            let scale = gd[ch] * inv_std[ch];
                            for (d, &gv) in gx[base..base + spatial]
                                .iter_mut()
                                .zip(&g[base..base + spatial])
                            {
                                *d += gv * scale;
                            }
                        }
                    }
                    self.nodes[x.0].grad = Some(gx);
                }
            }
            Op::L2NormRows { x, n, d, ref norms } => {
                if self.wants(x) {
                    let mut gx = self.take_grad(x);
                    let yd = &self.nodes[node.0].data;
                    for i in 0..n {
                        let row = i * d..(i + 1) * d;
                        let dot: f32 = g[row.clone()]
                            .iter()
                            .zip(&yd[row.clone()])
                            .map(|(&gv, &yv)| gv * yv)
                            .sum();
                        let norm = norms[i];
                        for ((dst, &gv), &yv) in gx[row.clone()]
                            .iter_mut()
                            .zip(&g[row.clone()])
                            .zip(&yd[row])
                        {
                            *dst += (gv - yv * dot) / norm;
                        }
                    }
                    self.nodes[x.0].grad = Some(gx);
                }
            }
            Op::LogSoftmaxRows { x, n, d } => {
                if self.wants(x) {
                    let mut gx = self.take_grad(x);
                    let yd = &self.nodes[node.0].data;
                    for i in 0..n {
                        let row = i * d..(i + 1) * d;
                        let gsum: f32 = g[row.clone()].iter().sum();
                        for ((dst, &gv), &yv) in gx[row.clone()]
                            .iter_mut()
                            .zip(&g[row.clone()])
                            .zip(&yd[row])
                        {
                            *dst += gv - yv.exp() * gsum;
                        }
                    }
                    self.nodes[x.0].grad = Some(gx);
                }
            }
            Op::GlobalAvgPool { x, n, c, spatial } => {
                if self.wants(x) {
                    let mut gx = self.take_grad(x);
                    let inv = 1.0 / spatial as f32;
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * spatial;
                            let gv = g[i * c + ch] * inv;
                            for dst in &mut gx[base..base + spatial] {
                                *dst += gv;
                            }
                        }
                    }
                    self.nodes[x.0].grad = Some(gx);
                }
            }
            Op::SumAll(a) => {
                if self.wants(a) {
                    let mut ga = self.take_grad(a);
                    for v in ga.iter_mut() {
                        *v += g[0];
                    }
                    self.nodes[a.0].grad = Some(ga);
                }
            }
            Op::MeanAll(a) => {
                if self.wants(a) {
                    let mut ga = self.take_grad(a);
                    let gv = g[0] / ga.len() as f32;
                    for v in ga.iter_mut() {
                        *v += gv;
                    }
                    self.nodes[a.0].grad = Some(ga);
                }
            }
            Op::AddRowBroadcast { x, row, n, d } => {
                if self.wants(x) {
                    let mut gx = self.take_grad(x);
                    for (v, &gi) in gx.iter_mut().zip(g) {
                        *v += gi;
                    }
                    self.nodes[x.0].grad = Some(gx);
                }
                if self.wants(row) {
                    let mut gr = self.take_grad(row);
                    for i in 0..n {
                        for j in 0..d {
                            gr[j] += g[i * d + j];
                        }
                    }
                    self.nodes[row.0].grad = Some(gr);
                }
            }
        }
    }
}

/// Output-column range `[lo, hi)` whose input column `ox*stride + kx - pad`
/// lands inside `[0, wi)`. Shared by the im2col gather and col2im scatter so
/// both skip the zero-padded fringe without per-element bounds tests.
fn valid_ox_range(wi: usize, kx: usize, pad: usize, stride: usize, ow: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx + stride - 1) / stride
    };
    let hi = ((wi + pad).saturating_sub(kx) + stride - 1) / stride;
    (lo, hi.min(ow))
}

/// Finite-difference gradient checking utilities shared by the test suites.
pub mod check {
    /// Central-difference gradient of `f` at `x`. The closure returns f64 so
    /// callers can evaluate a higher-precision reference when they have one;
    /// the actually-applied perturbation is measured to cancel f32
    /// quantization of the step.
    pub fn finite_diff(mut f: impl FnMut(&[f32]) -> f64, x: &[f32], eps: f32) -> Vec<f32> {
        let mut xp = x.to_vec();
        let mut g = vec![0.0f32; x.len()];
        for i in 0..x.len() {
            let orig = xp[i];
            xp[i] = orig + eps;
            let hp = xp[i] as f64 - orig as f64;
            let fp = f(&xp);
            xp[i] = orig - eps;
            let hm = orig as f64 - xp[i] as f64;
            let fm = f(&xp);
            xp[i] = orig;
            g[i] = ((fp - fm) / (hp + hm)) as f32;
        }
        g
    }

    /// Aggregate relative error ‖a−b‖₂ / max(‖a‖₂, ‖b‖₂, 1e-8).
    pub fn rel_error(a: &[f32], b: &[f32]) -> f32 {
        assert_eq!(a.len(), b.len());
        let mut diff = 0.0f64;
        let mut na = 0.0f64;
        let mut nb = 0.0f64;
        for i in 0..a.len() {
            let (x, y) = (a[i] as f64, b[i] as f64);
            diff += (x - y) * (x - y);
            na += x * x;
            nb += y * y;
        }
        (diff.sqrt() / na.sqrt().max(nb.sqrt()).max(1e-8)) as f32
    }
}

#[cfg(test)]
mod tests {
    use super::check::{finite_diff, rel_error};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
    }

    #[test]
    fn add_componentwise() {
        let mut g = Graph::new();
        let a = g.constant(&[2], vec![1.0, 2.0]);
        let b = g.constant(&[2], vec![3.0, 4.0]);
        let c = g.add(a, b).unwrap();
        assert_eq!(g.data(c), &[4.0, 6.0]);
    }

    #[test]
    fn scale_by_one_is_bitwise_identity() {
        let mut g = Graph::new();
        let data = vec![0.1f32, -2.75, 3.0e-8, 123.456];
        let a = g.constant(&[4], data.clone());
        let c = g.scale(a, 1.0);
        assert_eq!(g.data(c), &data[..]);
    }

    #[test]
    fn square_gradient_is_two_x() {
        let mut g = Graph::new();
        let x = g.leaf(&[1], vec![3.0], true);
        let y = g.mul(x, x).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn add_shape_mismatch_is_structured() {
        let mut g = Graph::new();
        let a = g.constant(&[2], vec![1.0, 2.0]);
        let b = g.constant(&[3], vec![1.0, 2.0, 3.0]);
        match g.add(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn matmul_identity_preserves_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xdata = randn(&mut rng, 3 * 4);
        let mut g = Graph::new();
        let mut eye = vec![0.0f32; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let i3 = g.constant(&[3, 3], eye);
        let x = g.constant(&[3, 4], xdata.clone());
        let y = g.matmul(i3, x).unwrap();
        assert_eq!(g.data(y), &xdata[..]);
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = g.constant(&[2, 1], vec![1.0, 1.0]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[3.0, 7.0]);
    }

    /// f64 reference matmul used as the finite-difference oracle.
    fn ref_matmul_sum(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> f64 {
        let mut total = 0.0f64;
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    total += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
            }
        }
        total
    }

    #[test]
    fn matmul_gradient_matches_finite_differences() {
        let (m, k, n) = (4, 5, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let ad = randn(&mut rng, m * k);
        let bd = randn(&mut rng, k * n);
        let mut g = Graph::new();
        let a = g.leaf(&[m, k], ad.clone(), true);
        let b = g.leaf(&[k, n], bd.clone(), true);
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum_all(c);
        g.backward(loss).unwrap();

        let fd_a = finite_diff(|x| ref_matmul_sum(x, &bd, m, k, n), &ad, 1e-3);
        let fd_b = finite_diff(|x| ref_matmul_sum(&ad, x, m, k, n), &bd, 1e-3);
        assert!(rel_error(g.grad(a).unwrap(), &fd_a) < 1e-4);
        assert!(rel_error(g.grad(b).unwrap(), &fd_b) < 1e-4);
    }

    #[test]
    fn matmul_nt_agrees_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (m, k, n) = (3, 4, 5);
        let ad = randn(&mut rng, m * k);
        let bd = randn(&mut rng, n * k);
        let mut bt = vec![0.0f32; k * n];
        for i in 0..n {
            for j in 0..k {
                bt[j * n + i] = bd[i * k + j];
            }
        }
        let mut g = Graph::new();
        let a = g.constant(&[m, k], ad.clone());
        let b = g.constant(&[n, k], bd);
        let c1 = g.matmul_nt(a, b).unwrap();
        let btid = g.constant(&[k, n], bt);
        let c2 = g.matmul(a, btid).unwrap();
        for (x, y) in g.data(c1).iter().zip(g.data(c2)) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_nt_gradient_matches_finite_differences() {
        let (m, k, n) = (4, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let ad = randn(&mut rng, m * k);
        let bd = randn(&mut rng, n * k);
        let f = |a: &[f32], b: &[f32]| {
            let mut total = 0.0f64;
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        total += a[i * k + p] as f64 * b[j * k + p] as f64;
                    }
                }
            }
            total
        };
        let mut g = Graph::new();
        let a = g.leaf(&[m, k], ad.clone(), true);
        let b = g.leaf(&[n, k], bd.clone(), true);
        let c = g.matmul_nt(a, b).unwrap();
        let loss = g.sum_all(c);
        g.backward(loss).unwrap();
        let fd_a = finite_diff(|x| f(x, &bd), &ad, 1e-3);
        let fd_b = finite_diff(|x| f(&ad, x), &bd, 1e-3);
        assert!(rel_error(g.grad(a).unwrap(), &fd_a) < 1e-4);
        assert!(rel_error(g.grad(b).unwrap(), &fd_b) < 1e-4);
    }

    /// f64 reference conv2d (naive loops), summed, as the FD oracle.
    #[allow(clippy::too_many_arguments)]
    fn ref_conv_sum(
        x: &[f32],
        w: &[f32],
        n: usize,
        c: usize,
        h: usize,
        wi: usize,
        f: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> f64 {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wi + 2 * pad - k) / stride + 1;
        let mut total = 0.0f64;
        for i in 0..n {
            for fo in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for ch in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize || ix < 0 || ix >= wi as isize {
                                        continue;
                                    }
                                    let xv = x[((i * c + ch) * h + iy as usize) * wi + ix as usize];
                                    let wv = w[((fo * c + ch) * k + ky) * k + kx];
                                    total += xv as f64 * wv as f64;
                                }
                            }
                        }
                    }
                }
            }
        }
        total
    }

    #[test]
    fn conv_identity_kernel_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xd = randn(&mut rng, 2 * 3 * 4 * 4);
        let mut g = Graph::new();
        let x = g.constant(&[2, 3, 4, 4], xd.clone());
        // 1×1 kernels selecting each input channel in turn.
        let mut wd = vec![0.0f32; 3 * 3];
        for i in 0..3 {
            wd[i * 3 + i] = 1.0;
        }
        let w = g.constant(&[3, 3, 1, 1], wd);
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 4, 4]);
        for (a, b) in g.data(y).iter().zip(&xd) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn conv_ones_kernel_interior_is_nine_c() {
        let c = 0.37f32;
        let mut g = Graph::new();
        let x = g.constant(&[1, 1, 6, 6], vec![c; 36]);
        let w = g.constant(&[1, 1, 3, 3], vec![1.0; 9]);
        let y = g.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 6, 6]);
        let out = g.data(y);
        for iy in 1..5 {
            for ix in 1..5 {
                assert!((out[iy * 6 + ix] - 9.0 * c).abs() < 1e-5);
            }
        }
        // corners see only a 2×2 support
        assert!((out[0] - 4.0 * c).abs() < 1e-5);
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let (n, c, h, wi, f, k, stride, pad) = (2, 2, 6, 6, 3, 3, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let xd = randn(&mut rng, n * c * h * wi);
        let wd = randn(&mut rng, f * c * k * k);
        let mut g = Graph::new();
        let x = g.leaf(&[n, c, h, wi], xd.clone(), true);
        let w = g.leaf(&[f, c, k, k], wd.clone(), true);
        let y = g.conv2d(x, w, stride, pad).unwrap();
        let loss = g.sum_all(y);
        g.backward(loss).unwrap();
        let fd_x = finite_diff(
            |p| ref_conv_sum(p, &wd, n, c, h, wi, f, k, stride, pad),
            &xd,
            1e-3,
        );
        let fd_w = finite_diff(
            |p| ref_conv_sum(&xd, p, n, c, h, wi, f, k, stride, pad),
            &wd,
            1e-3,
        );
        assert!(rel_error(g.grad(x).unwrap(), &fd_x) < 1e-3);
        assert!(rel_error(g.grad(w).unwrap(), &fd_w) < 1e-3);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let mut g = Graph::new();
        let x = g.constant(&[1, 1, 4, 4], vec![0.0; 16]);
        let w = g.constant(&[1, 1, 3, 3], vec![0.0; 9]);
        assert!(g.conv2d(x, w, 0, 1).is_err());
        let w6 = g.constant(&[1, 1, 6, 6], vec![0.0; 36]);
        assert!(g.conv2d(x, w6, 1, 0).is_err());
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let a = g.constant(&[2], vec![-1.0, 2.0]);
        let y = g.relu(a);
        assert_eq!(g.data(y), &[0.0, 2.0]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let a = g.constant(&[1, 2], vec![3.0, 4.0]);
        let y = g.l2_normalize_rows(a).unwrap();
        let out = g.data(y);
        assert!((out[0] - 0.6).abs() < 1e-6);
        assert!((out[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn l2_normalize_zero_row_errors() {
        let mut g = Graph::new();
        let a = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        match g.l2_normalize_rows(a) {
            Err(Error::ZeroNormRow { row }) => assert_eq!(row, 1),
            other => panic!("expected zero-norm error, got {other:?}"),
        }
    }

    #[test]
    fn l2_normalize_gradient_matches_finite_differences() {
        let (n, d) = (3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut xd = randn(&mut rng, n * d);
        xd[0] += 1.5; // keep row norms comfortably away from zero
        let wd = randn(&mut rng, n * d);
        let f = |x: &[f32]| {
            let mut total = 0.0f64;
            for i in 0..n {
                let norm = (0..d)
                    .map(|j| (x[i * d + j] as f64).powi(2))
                    .sum::<f64>()
                    .sqrt();
                for j in 0..d {
                    total += wd[i * d + j] as f64 * x[i * d + j] as f64 / norm;
                }
            }
            total
        };
        let mut g = Graph::new();
        let x = g.leaf(&[n, d], xd.clone(), true);
        let wt = g.constant(&[n, d], wd.clone());
        let y = g.l2_normalize_rows(x).unwrap();
        let prod = g.mul(y, wt).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        let fd = finite_diff(f, &xd, 1e-3);
        assert!(rel_error(g.grad(x).unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn log_softmax_rows_exponentiate_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let (n, d) = (4, 7);
        let xd = randn(&mut rng, n * d);
        let mut g = Graph::new();
        let x = g.constant(&[n, d], xd);
        let y = g.log_softmax_rows(x).unwrap();
        for i in 0..n {
            let s: f32 = g.data(y)[i * d..(i + 1) * d].iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn log_softmax_gradient_matches_finite_differences() {
        let (n, d) = (3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let xd = randn(&mut rng, n * d);
        let wd = randn(&mut rng, n * d);
        let f = |x: &[f32]| {
            let mut total = 0.0f64;
            for i in 0..n {
                let row: Vec<f64> = (0..d).map(|j| x[i * d + j] as f64).collect();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for j in 0..d {
                    total += wd[i * d + j] as f64 * (row[j] - lse);
                }
            }
            total
        };
        let mut g = Graph::new();
        let x = g.leaf(&[n, d], xd.clone(), true);
        let wt = g.constant(&[n, d], wd.clone());
        let y = g.log_softmax_rows(x).unwrap();
        let prod = g.mul(y, wt).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        let fd = finite_diff(f, &xd, 1e-3);
        assert!(rel_error(g.grad(x).unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn batch_norm_train_gradient_matches_finite_differences() {
        let (n, c, spatial) = (6, 3, 4); // rank-4 path: 6×3×2×2
        let eps = 1e-5f32;
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let xd = randn(&mut rng, n * c * spatial);
        let gd = randn(&mut rng, c);
        let bd = randn(&mut rng, c);
        let wd = randn(&mut rng, n * c * spatial);
        // f64 reference of the whole normalized-affine transform, weighted sum
        let reference = |x: &[f32], gamma: &[f32], beta: &[f32]| {
            let count = (n * spatial) as f64;
            let mut total = 0.0f64;
            for ch in 0..c {
                let mut mean = 0.0f64;
                for i in 0..n {
                    for p in 0..spatial {
                        mean += x[(i * c + ch) * spatial + p] as f64;
                    }
                }
                mean /= count;
                let mut var = 0.0f64;
                for i in 0..n {
                    for p in 0..spatial {
                        let dv = x[(i * c + ch) * spatial + p] as f64 - mean;
                        var += dv * dv;
                    }
                }
                var /= count;
                let istd = 1.0 / (var + eps as f64).sqrt();
                for i in 0..n {
                    for p in 0..spatial {
                        let idx = (i * c + ch) * spatial + p;
                        let xh = (x[idx] as f64 - mean) * istd;
                        total += wd[idx] as f64 * (gamma[ch] as f64 * xh + beta[ch] as f64);
                    }
                }
            }
            total
        };
        let mut g = Graph::new();
        let x = g.leaf(&[n, c, 2, 2], xd.clone(), true);
        let gamma = g.leaf(&[c], gd.clone(), true);
        let beta = g.leaf(&[c], bd.clone(), true);
        let (y, _) = g.batch_norm_train(x, gamma, beta, eps).unwrap();
        let wt = g.constant(&[n, c, 2, 2], wd.clone());
        let prod = g.mul(y, wt).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        let fd_x = finite_diff(|p| reference(p, &gd, &bd), &xd, 1e-3);
        let fd_g = finite_diff(|p| reference(&xd, p, &bd), &gd, 1e-3);
        let fd_b = finite_diff(|p| reference(&xd, &gd, p), &bd, 1e-3);
        assert!(rel_error(g.grad(x).unwrap(), &fd_x) < 1e-3);
        assert!(rel_error(g.grad(gamma).unwrap(), &fd_g) < 1e-4);
        assert!(rel_error(g.grad(beta).unwrap(), &fd_b) < 1e-4);
    }

    #[test]
    fn batch_norm_eval_uses_frozen_stats() {
        let mut g = Graph::new();
        let x = g.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let gamma = g.constant(&[2], vec![1.0, 1.0]);
        let beta = g.constant(&[2], vec![0.0, 0.0]);
        let y = g
            .batch_norm_eval(x, gamma, beta, &[2.0, 3.0], &[1.0, 1.0], 0.0)
            .unwrap();
        let out = g.data(y);
        assert!((out[0] - -1.0).abs() < 1e-6);
        assert!((out[1] - -1.0).abs() < 1e-6);
        assert!((out[2] - 1.0).abs() < 1e-6);
        assert!((out[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gather_rows_flip_gradient_scatters_back() {
        let (n, d) = (4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let xd = randn(&mut rng, n * d);
        let wd = randn(&mut rng, n * d);
        let idx: Vec<usize> = (0..n).rev().collect();
        let f = |x: &[f32]| {
            let mut total = 0.0f64;
            for i in 0..n {
                for j in 0..d {
                    total += wd[i * d + j] as f64 * x[(n - 1 - i) * d + j] as f64;
                }
            }
            total
        };
        let mut g = Graph::new();
        let x = g.leaf(&[n, d], xd.clone(), true);
        let y = g.gather_rows(x, &idx).unwrap();
        let wt = g.constant(&[n, d], wd.clone());
        let prod = g.mul(y, wt).unwrap();
        let loss = g.sum_all(prod);
        g.backward(loss).unwrap();
        let fd = finite_diff(f, &xd, 1e-3);
        assert!(rel_error(g.grad(x).unwrap(), &fd) < 1e-4);
    }

    #[test]
    fn composite_ops_gradient_matches_finite_differences() {
        // rowwise_dot ∘ concat_cols ∘ global_avg_pool, FD through the f32 graph
        let (n, c, h, w) = (3, 2, 4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let xd = randn(&mut rng, n * c * h * w);
        let other = randn(&mut rng, n * 2 * c);
        let run = |x: &[f32], g: &mut Graph| -> TensorId {
            let xid = g.leaf(&[n, c, h, w], x.to_vec(), true);
            let pooled = g.global_avg_pool(xid).unwrap();
            let cat = g.concat_cols(pooled, pooled).unwrap();
            let otherid = g.constant(&[n, 2 * c], other.clone());
            let dots = g.rowwise_dot(cat, otherid).unwrap();
            // exercise mean_all + add_scalar + scale on the way down
            let m = g.mean_all(dots);
            let shifted = g.add_scalar(m, 0.5);
            g.scale(shifted, 2.0)
        };
        let mut g = Graph::new();
        let loss = {
            let xid_loss = run(&xd, &mut g);
            g.backward(xid_loss).unwrap();
            xid_loss
        };
        let _ = loss;
        let analytic = g.grad(TensorId(0)).unwrap().to_vec();
        let fd = finite_diff(
            |x| {
                let mut g2 = Graph::new();
                let l = run(x, &mut g2);
                g2.value(l) as f64
            },
            &xd,
            1e-3,
        );
        assert!(rel_error(&analytic, &fd) < 1e-3);
    }

    #[test]
    fn backward_is_deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let xd = randn(&mut rng, 4 * 6);
        let wd = randn(&mut rng, 6 * 3);
        let run = || {
            let mut g = Graph::new();
            let x = g.leaf(&[4, 6], xd.clone(), true);
            let w = g.leaf(&[6, 3], wd.clone(), true);
            let y = g.matmul(x, w).unwrap();
            let r = g.relu(y);
            let l = g.sum_all(r);
            g.backward(l).unwrap();
            (g.grad(x).unwrap().to_vec(), g.grad(w).unwrap().to_vec())
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let xd = randn(&mut rng, 3 * 4);
        let mut g = Graph::new();
        let x = g.leaf(&[3, 4], xd.clone(), true);
        let y = g.relu(x);
        let z = g.l2_normalize_rows(y).unwrap();
        let l = g.sum_all(z);
        g.backward(l).unwrap();
        assert_eq!(g.data(x), &xd[..]);
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0], true);
        let d = g.detach(x);
        let y = g.mul(d, d).unwrap();
        let l = g.sum_all(y);
        assert!(g.backward(l).is_err()); // loss has no grad-carrying ancestor
        // mixing detached and live paths: only the live path gets gradients
        let mut g = Graph::new();
        let x = g.leaf(&[2], vec![1.0, 2.0], true);
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        let l = g.sum_all(y);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]); // d treated as constant
    }
}
