//! Reverse-mode autodiff over a flat tape of eager ops.
//!
//! Each training step (and each inference forward) builds a fresh graph.
//! Values are computed eagerly; `backward` walks the tape in reverse and
//! accumulates gradients in a fixed order, so results are reproducible
//! bit-for-bit. Ops only cache backward scratch (im2col patches, norm
//! stats) when some input actually requires gradients, which keeps
//! inference forwards allocation-light.
//!
//! Feature-map layout is NHWC throughout; token tensors are [N, L, C].

use crate::error::{PipelineError, Result};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    AddPerRow { x: Var, per_row: Var },
    Scale { x: Var, factor: f64 },
    MatMul { a: Var, b: Var },
    Bmm { a: Var, b: Var, transpose_b: bool },
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Silu(Var),
    SoftmaxLast(Var),
    Reshape(Var),
    Permute0213(Var),
    Concat { a: Var, b: Var, dim: usize },
    SelectRows { x: Var, indices: Vec<usize> },
    Upsample2x(Var),
    Embedding { table: Var, ids: Vec<u32> },
    MseLoss { a: Var, b: Var },
}

enum Aux<T> {
    /// im2col patch matrix kept for the conv backward.
    Patches(Tensor<T>),
    /// Per-row (or per-group) mean and reciprocal std.
    Stats { mean: Vec<T>, rstd: Vec<T> },
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    requires: bool,
    aux: Option<Aux<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

pub struct Grads<T> {
    by_node: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }
}

const NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    fn push(&mut self, op: Op, value: Tensor<T>, requires: bool, aux: Option<Aux<T>>) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires,
            aux: if requires { aux } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires: bool) -> Var {
        self.push(Op::Leaf, value, requires, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a, b), v, req, None))
    }

    /// x[..., c] + bias[c]
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        let c = *xd.last().ok_or_else(|| PipelineError::Shape("add_bias on scalar".into()))?;
        if self.value(bias).dims() != [c] {
            return Err(PipelineError::Shape(format!(
                "add_bias: bias {:?} does not match channel axis {}",
                self.value(bias).dims(),
                c
            )));
        }
        let bd = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(&bd) {
                *o = *o + b;
            }
        }
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(Op::AddBias { x, bias }, out, req, None))
    }

    /// x[n, ..., c] + e[n, c]; broadcasts e over the interior axes.
    pub fn add_per_row(&mut self, x: Var, per_row: Var) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        let n = xd[0];
        let c = *xd.last().unwrap();
        if self.value(per_row).dims() != [n, c] {
            return Err(PipelineError::Shape(format!(
                "add_per_row: expected [{}, {}], got {:?}",
                n,
                c,
                self.value(per_row).dims()
            )));
        }
        let spatial = self.value(x).numel() / (n * c);
        let e = self.value(per_row).data().to_vec();
        let mut out = self.value(x).clone();
        for ni in 0..n {
            let erow = &e[ni * c..(ni + 1) * c];
            let chunk = &mut out.data_mut()[ni * spatial * c..(ni + 1) * spatial * c];
            for row in chunk.chunks_mut(c) {
                for (o, &b) in row.iter_mut().zip(erow) {
                    *o = *o + b;
                }
            }
        }
        let req = self.requires(x) || self.requires(per_row);
        Ok(self.push(Op::AddPerRow { x, per_row }, out, req, None))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let v = self.value(x).scale(f);
        let req = self.requires(x);
        self.push(Op::Scale { x, factor }, v, req, None)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.value(a).dims().to_vec(), self.value(b).dims().to_vec());
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(PipelineError::Shape(format!("matmul: {:?} x {:?}", ad, bd)));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut out = Tensor::zeros(&[m, n]);
        gemm_nn(out.data_mut(), self.value(a).data(), self.value(b).data(), m, k, n, false);
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::MatMul { a, b }, out, req, None))
    }

    /// Batched matmul: a [B,M,K], b [B,K,N] (or [B,N,K] when `transpose_b`).
    pub fn bmm(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ad, bd) = (self.value(a).dims().to_vec(), self.value(b).dims().to_vec());
        if ad.len() != 3 || bd.len() != 3 || ad[0] != bd[0] {
            return Err(PipelineError::Shape(format!("bmm: {:?} x {:?}", ad, bd)));
        }
        let (bsz, m, k) = (ad[0], ad[1], ad[2]);
        let n = if transpose_b { bd[1] } else { bd[2] };
        let k_b = if transpose_b { bd[2] } else { bd[1] };
        if k != k_b {
            return Err(PipelineError::Shape(format!(
                "bmm: inner axis {} vs {} ({:?} x {:?}, transpose_b={})",
                k, k_b, ad, bd, transpose_b
            )));
        }
        let mut out = Tensor::zeros(&[bsz, m, n]);
        for bi in 0..bsz {
            let a_s = &self.nodes[a.0].value.data()[bi * m * k..(bi + 1) * m * k];
            let b_s = &self.nodes[b.0].value.data()[bi * k * n..(bi + 1) * k * n];
            let o_s = &mut out.data_mut()[bi * m * n..(bi + 1) * m * n];
            if transpose_b {
                gemm_nt(o_s, a_s, b_s, m, k, n, false);
            } else {
                gemm_nn(o_s, a_s, b_s, m, k, n, false);
            }
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Bmm { a, b, transpose_b }, out, req, None))
    }

    /// x [..., Cin] * w [Cin, Cout] + b [Cout]
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        let wd = self.value(w).dims().to_vec();
        let cin = *xd.last().unwrap();
        if wd.len() != 2 || wd[0] != cin {
            return Err(PipelineError::Shape(format!("linear: x {:?} w {:?}", xd, wd)));
        }
        let cout = wd[1];
        if self.value(b).dims() != [cout] {
            return Err(PipelineError::Shape(format!(
                "linear: bias {:?} vs cout {}",
                self.value(b).dims(),
                cout
            )));
        }
        let rows = self.value(x).numel() / cin;
        let mut out_dims = xd.clone();
        *out_dims.last_mut().unwrap() = cout;
        let mut out = Tensor::zeros(&out_dims);
        gemm_nn(out.data_mut(), self.value(x).data(), self.value(w).data(), rows, cin, cout, false);
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(cout) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o = *o + bv;
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(Op::Linear { x, w, b }, out, req, None))
    }

    /// 2-D convolution, NHWC activations, weights [KH, KW, Cin, Cout].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        let wd = self.value(w).dims().to_vec();
        if xd.len() != 4 || wd.len() != 4 {
            return Err(PipelineError::Shape(format!("conv2d: x {:?} w {:?}", xd, wd)));
        }
        let (n, h, ww, cin) = (xd[0], xd[1], xd[2], xd[3]);
        let (kh, kw, wcin, cout) = (wd[0], wd[1], wd[2], wd[3]);
        if wcin != cin {
            return Err(PipelineError::Shape(format!(
                "conv2d: input channels {} vs kernel {}",
                cin, wcin
            )));
        }
        if h + 2 * pad < kh || ww + 2 * pad < kw {
            return Err(PipelineError::Shape(format!(
                "conv2d: kernel {}x{} larger than padded input {}x{}",
                kh,
                kw,
                h + 2 * pad,
                ww + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (ww + 2 * pad - kw) / stride + 1;
        let patches = im2col(self.value(x), kh, kw, stride, pad, oh, ow);
        let rows = n * oh * ow;
        let kkc = kh * kw * cin;
        let mut out = Tensor::zeros(&[n, oh, ow, cout]);
        gemm_nn(out.data_mut(), patches.data(), self.value(w).data(), rows, kkc, cout, false);
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(cout) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o = *o + bv;
            }
        }
        let req = self.requires(x) || self.requires(w) || self.requires(b);
        Ok(self.push(
            Op::Conv2d { x, w, b, stride, pad },
            out,
            req,
            Some(Aux::Patches(patches)),
        ))
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        if xd.len() != 4 {
            return Err(PipelineError::Shape(format!("group_norm: expected NHWC, got {:?}", xd)));
        }
        let (n, h, w, c) = (xd[0], xd[1], xd[2], xd[3]);
        if c % groups != 0 {
            return Err(PipelineError::Shape(format!(
                "group_norm: channels {} not divisible by groups {}",
                c, groups
            )));
        }
        if self.value(gamma).dims() != [c] || self.value(beta).dims() != [c] {
            return Err(PipelineError::Shape("group_norm: gamma/beta must be [C]".into()));
        }
        let cg = c / groups;
        let spatial = h * w;
        let count = T::from_f64((spatial * cg) as f64);
        let eps = T::from_f64(NORM_EPS);
        let mut out = self.value(x).clone();
        let mut means = vec![T::zero(); n * groups];
        let mut rstds = vec![T::zero(); n * groups];
        let gdat = self.value(gamma).data().to_vec();
        let bdat = self.value(beta).data().to_vec();
        for ni in 0..n {
            let base = ni * spatial * c;
            for g in 0..groups {
                let mut sum = T::zero();
                let mut sumsq = T::zero();
                for s in 0..spatial {
                    for ci in 0..cg {
                        let v = out.data()[base + s * c + g * cg + ci];
                        sum = sum + v;
                        sumsq = v.mul_add(v, sumsq);
                    }
                }
                let mean = sum / count;
                let var = sumsq / count - mean * mean;
                let rstd = (var + eps).sqrt().recip();
                means[ni * groups + g] = mean;
                rstds[ni * groups + g] = rstd;
                for s in 0..spatial {
                    for ci in 0..cg {
                        let idx = base + s * c + g * cg + ci;
                        let ch = g * cg + ci;
                        let v = out.data()[idx];
                        out.data_mut()[idx] = (v - mean) * rstd * gdat[ch] + bdat[ch];
                    }
                }
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Op::GroupNorm { x, gamma, beta, groups },
            out,
            req,
            Some(Aux::Stats { mean: means, rstd: rstds }),
        ))
    }

    /// Normalizes the last axis of any-rank input.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        let c = *xd.last().unwrap();
        if self.value(gamma).dims() != [c] || self.value(beta).dims() != [c] {
            return Err(PipelineError::Shape("layer_norm: gamma/beta must be [C]".into()));
        }
        let rows = self.value(x).numel() / c;
        let count = T::from_f64(c as f64);
        let eps = T::from_f64(NORM_EPS);
        let mut out = self.value(x).clone();
        let mut means = vec![T::zero(); rows];
        let mut rstds = vec![T::zero(); rows];
        let gdat = self.value(gamma).data().to_vec();
        let bdat = self.value(beta).data().to_vec();
        for (r, row) in out.data_mut().chunks_mut(c).enumerate() {
            let mut sum = T::zero();
            let mut sumsq = T::zero();
            for &v in row.iter() {
                sum = sum + v;
                sumsq = v.mul_add(v, sumsq);
            }
            let mean = sum / count;
            let var = sumsq / count - mean * mean;
            let rstd = (var + eps).sqrt().recip();
            means[r] = mean;
            rstds[r] = rstd;
            for (ci, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * gdat[ci] + bdat[ci];
            }
        }
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta },
            out,
            req,
            Some(Aux::Stats { mean: means, rstd: rstds }),
        ))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let one = T::one();
        let v = self.value(x).map(|t| t / (one + (-t).exp()));
        let req = self.requires(x);
        self.push(Op::Silu(x), v, req, None)
    }

    pub fn softmax_last(&mut self, x: Var) -> Var {
        let c = *self.value(x).dims().last().unwrap();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            let mut mx = row[0];
            for &v in row.iter() {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum = sum + *v;
            }
            let inv = sum.recip();
            for v in row.iter_mut() {
                *v = *v * inv;
            }
        }
        let req = self.requires(x);
        self.push(Op::SoftmaxLast(x), out, req, None)
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        let v = self.value(x).reshaped(dims)?;
        let req = self.requires(x);
        Ok(self.push(Op::Reshape(x), v, req, None))
    }

    /// [A,B,C,D] -> [A,C,B,D]
    pub fn permute_0213(&mut self, x: Var) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        if xd.len() != 4 {
            return Err(PipelineError::Shape(format!("permute_0213: need rank 4, got {:?}", xd)));
        }
        let out = permute0213(self.value(x));
        let req = self.requires(x);
        Ok(self.push(Op::Permute0213(x), out, req, None))
    }

    pub fn concat(&mut self, a: Var, b: Var, dim: usize) -> Result<Var> {
        let (ad, bd) = (self.value(a).dims().to_vec(), self.value(b).dims().to_vec());
        if ad.len() != bd.len() || dim >= ad.len() {
            return Err(PipelineError::Shape(format!("concat: {:?} + {:?} on axis {}", ad, bd, dim)));
        }
        for (i, (&x, &y)) in ad.iter().zip(&bd).enumerate() {
            if i != dim && x != y {
                return Err(PipelineError::Shape(format!(
                    "concat: axis {} differs ({:?} vs {:?})",
                    i, ad, bd
                )));
            }
        }
        let mut od = ad.clone();
        od[dim] += bd[dim];
        let outer: usize = ad[..dim].iter().product();
        let a_block: usize = ad[dim..].iter().product();
        let b_block: usize = bd[dim..].iter().product();
        let mut data = Vec::with_capacity(outer * (a_block + b_block));
        let adat = self.value(a).data();
        let bdat = self.value(b).data();
        for o in 0..outer {
            data.extend_from_slice(&adat[o * a_block..(o + 1) * a_block]);
            data.extend_from_slice(&bdat[o * b_block..(o + 1) * b_block]);
        }
        let out = Tensor::from_vec(&od, data)?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Concat { a, b, dim }, out, req, None))
    }

    /// Gathers rows along axis 0. Rows may repeat.
    pub fn select_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        let n = xd[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(PipelineError::Index(format!("select_rows: row {} out of {}", bad, n)));
        }
        let row = self.value(x).numel() / n;
        let mut od = xd.clone();
        od[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in &indices {
            data.extend_from_slice(&self.value(x).data()[i * row..(i + 1) * row]);
        }
        let out = Tensor::from_vec(&od, data)?;
        let req = self.requires(x);
        Ok(self.push(Op::SelectRows { x, indices }, out, req, None))
    }

    /// Nearest-neighbour 2x spatial upsampling of NHWC input.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xd = self.value(x).dims().to_vec();
        if xd.len() != 4 {
            return Err(PipelineError::Shape(format!("upsample2x: need NHWC, got {:?}", xd)));
        }
        let (n, h, w, c) = (xd[0], xd[1], xd[2], xd[3]);
        let mut out = Tensor::zeros(&[n, 2 * h, 2 * w, c]);
        let xdat = self.value(x).data();
        {
            let odat = out.data_mut();
            for ni in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let src = &xdat[((ni * h + y) * w + xx) * c..((ni * h + y) * w + xx + 1) * c];
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let oy = 2 * y + dy;
                                let ox = 2 * xx + dx;
                                let off = ((ni * 2 * h + oy) * 2 * w + ox) * c;
                                odat[off..off + c].copy_from_slice(src);
                            }
                        }
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(Op::Upsample2x(x), out, req, None))
    }

    /// table [V, D] indexed by ids -> [len(ids), D]
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let td = self.value(table).dims().to_vec();
        if td.len() != 2 {
            return Err(PipelineError::Shape(format!("embedding: table {:?}", td)));
        }
        let (v, d) = (td[0], td[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(PipelineError::Index(format!(
                "embedding: token id {} out of vocab {}",
                bad, v
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&self.value(table).data()[i as usize * d..(i as usize + 1) * d]);
        }
        let out = Tensor::from_vec(&[ids.len(), d], data)?;
        let req = self.requires(table);
        Ok(self.push(Op::Embedding { table, ids: ids.to_vec() }, out, req, None))
    }

    /// Mean squared error over all elements; returns a scalar node.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(PipelineError::Shape(format!(
                "mse_loss: {:?} vs {:?}",
                self.value(a).dims(),
                self.value(b).dims()
            )));
        }
        let n = T::from_f64(self.value(a).numel() as f64);
        let mut sum = T::zero();
        for (&x, &y) in self.value(a).data().iter().zip(self.value(b).data()) {
            let d = x - y;
            sum = d.mul_add(d, sum);
        }
        let out = Tensor::from_vec(&[1], vec![sum / n])?;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(Op::MseLoss { a, b }, out, req, None))
    }

    /// Backpropagates from a scalar node and returns per-node gradients.
    /// Gradients of interior nodes are consumed as the walk passes them;
    /// query leaves (parameters, inputs) afterwards.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(PipelineError::Parameter(format!(
                "backward: loss must be scalar, got {:?}",
                self.value(loss).dims()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(&[1], T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires {
                grads[i] = None;
                continue;
            }
            let Some(g) = (match self.nodes[i].op {
                Op::Leaf => continue, // keep leaf grads for the caller
                _ => grads[i].take(),
            }) else {
                continue;
            };
            self.backprop_node(i, &g, &mut grads)?;
        }
        Ok(Grads { by_node: grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, contrib: Tensor<T>) {
        if !self.nodes[v.0].requires {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                existing
                    .add_scaled(&contrib, T::one())
                    .expect("gradient shape mismatch");
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut Vec<Option<Tensor<T>>>) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddBias { x, bias } => {
                self.accumulate(grads, *x, g.clone());
                if self.requires(*bias) {
                    let c = self.value(*bias).numel();
                    let mut db = Tensor::zeros(&[c]);
                    for row in g.data().chunks(c) {
                        for (o, &gv) in db.data_mut().iter_mut().zip(row) {
                            *o = *o + gv;
                        }
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::AddPerRow { x, per_row } => {
                self.accumulate(grads, *x, g.clone());
                if self.requires(*per_row) {
                    let ed = self.value(*per_row).dims().to_vec();
                    let (n, c) = (ed[0], ed[1]);
                    let spatial = g.numel() / (n * c);
                    let mut de = Tensor::zeros(&[n, c]);
                    for ni in 0..n {
                        let chunk = &g.data()[ni * spatial * c..(ni + 1) * spatial * c];
                        let erow = &mut de.data_mut()[ni * c..(ni + 1) * c];
                        for row in chunk.chunks(c) {
                            for (o, &gv) in erow.iter_mut().zip(row) {
                                *o = *o + gv;
                            }
                        }
                    }
                    self.accumulate(grads, *per_row, de);
                }
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, g.scale(T::from_f64(*factor)));
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.value(*a).dims()[0], self.value(*a).dims()[1]);
                let n = self.value(*b).dims()[1];
                if self.requires(*a) {
                    let mut da = Tensor::zeros(&[m, k]);
                    gemm_nt(da.data_mut(), g.data(), self.value(*b).data(), m, n, k, false);
                    self.accumulate(grads, *a, da);
                }
                if self.requires(*b) {
                    let mut db = Tensor::zeros(&[k, n]);
                    gemm_tn(db.data_mut(), self.value(*a).data(), g.data(), k, m, n, false);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Bmm { a, b, transpose_b } => {
                let ad = self.value(*a).dims().to_vec();
                let (bsz, m, k) = (ad[0], ad[1], ad[2]);
                let n = g.dims()[2];
                let adat = self.value(*a).data();
                let bdat = self.value(*b).data();
                if self.requires(*a) {
                    let mut da = Tensor::zeros(&ad);
                    for bi in 0..bsz {
                        let g_s = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let b_s = &bdat[bi * k * n..(bi + 1) * k * n];
                        let d_s = &mut da.data_mut()[bi * m * k..(bi + 1) * m * k];
                        if *transpose_b {
                            // da = g * b  (b stored [N,K])
                            gemm_nn(d_s, g_s, b_s, m, n, k, false);
                        } else {
                            gemm_nt(d_s, g_s, b_s, m, n, k, false);
                        }
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires(*b) {
                    let bdims = self.value(*b).dims().to_vec();
                    let mut db = Tensor::zeros(&bdims);
                    for bi in 0..bsz {
                        let g_s = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let a_s = &adat[bi * m * k..(bi + 1) * m * k];
                        let d_s = &mut db.data_mut()[bi * k * n..(bi + 1) * k * n];
                        if *transpose_b {
                            // db[N,K] = g^T * a
                            gemm_tn(d_s, g_s, a_s, n, m, k, false);
                        } else {
                            gemm_tn(d_s, a_s, g_s, k, m, n, false);
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let cin = *self.value(*x).dims().last().unwrap();
                let cout = self.value(*w).dims()[1];
                let rows = self.value(*x).numel() / cin;
                if self.requires(*x) {
                    let mut dx = Tensor::zeros(self.value(*x).dims());
                    gemm_nt(dx.data_mut(), g.data(), self.value(*w).data(), rows, cout, cin, false);
                    self.accumulate(grads, *x, dx);
                }
                if self.requires(*w) {
                    let mut dw = Tensor::zeros(&[cin, cout]);
                    gemm_tn(dw.data_mut(), self.value(*x).data(), g.data(), cin, rows, cout, false);
                    self.accumulate(grads, *w, dw);
                }
                if self.requires(*b) {
                    let mut db = Tensor::zeros(&[cout]);
                    for row in g.data().chunks(cout) {
                        for (o, &gv) in db.data_mut().iter_mut().zip(row) {
                            *o = *o + gv;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xd = self.value(*x).dims().to_vec();
                let wd = self.value(*w).dims().to_vec();
                let (kh, kw, cin, cout) = (wd[0], wd[1], wd[2], wd[3]);
                let kkc = kh * kw * cin;
                let rows = g.numel() / cout;
                let patches = match &self.nodes[i].aux {
                    Some(Aux::Patches(p)) => p,
                    _ => unreachable!("conv2d aux missing"),
                };
                if self.requires(*w) {
                    let mut dw = Tensor::zeros(&wd);
                    gemm_tn(dw.data_mut(), patches.data(), g.data(), kkc, rows, cout, false);
                    self.accumulate(grads, *w, dw);
                }
                if self.requires(*b) {
                    let mut db = Tensor::zeros(&[cout]);
                    for row in g.data().chunks(cout) {
                        for (o, &gv) in db.data_mut().iter_mut().zip(row) {
                            *o = *o + gv;
                        }
                    }
                    self.accumulate(grads, *b, db);
                }
                if self.requires(*x) {
                    let mut dpatches = Tensor::zeros(&[rows, kkc]);
                    gemm_nt(dpatches.data_mut(), g.data(), self.value(*w).data(), rows, cout, kkc, false);
                    let oh = g.dims()[1];
                    let ow = g.dims()[2];
                    let dx = col2im(&dpatches, &xd, kh, kw, *stride, *pad, oh, ow);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups } => {
                let (mean, rstd) = match &self.nodes[i].aux {
                    Some(Aux::Stats { mean, rstd }) => (mean, rstd),
                    _ => unreachable!("group_norm aux missing"),
                };
                let xd = self.value(*x).dims().to_vec();
                let (n, h, w, c) = (xd[0], xd[1], xd[2], xd[3]);
                let cg = c / groups;
                let spatial = h * w;
                let count = T::from_f64((spatial * cg) as f64);
                let xdat = self.value(*x).data();
                let gdat = self.value(*gamma).data();
                let need_x = self.requires(*x);
                let need_g = self.requires(*gamma);
                let need_b = self.requires(*beta);
                let mut dx = if need_x { Some(Tensor::zeros(&xd)) } else { None };
                let mut dgamma = if need_g { Some(Tensor::zeros(&[c])) } else { None };
                let mut dbeta = if need_b { Some(Tensor::zeros(&[c])) } else { None };
                for ni in 0..n {
                    let base = ni * spatial * c;
                    for gi in 0..groups {
                        let mu = mean[ni * groups + gi];
                        let rs = rstd[ni * groups + gi];
                        // First pass: the two reductions the dx formula needs.
                        let mut sum_dyg = T::zero();
                        let mut sum_dyg_xhat = T::zero();
                        for s in 0..spatial {
                            for ci in 0..cg {
                                let ch = gi * cg + ci;
                                let idx = base + s * c + ch;
                                let xhat = (xdat[idx] - mu) * rs;
                                let dyg = g.data()[idx] * gdat[ch];
                                sum_dyg = sum_dyg + dyg;
                                sum_dyg_xhat = dyg.mul_add(xhat, sum_dyg_xhat);
                            }
                        }
                        let mean_dyg = sum_dyg / count;
                        let mean_dyg_xhat = sum_dyg_xhat / count;
                        for s in 0..spatial {
                            for ci in 0..cg {
                                let ch = gi * cg + ci;
                                let idx = base + s * c + ch;
                                let xhat = (xdat[idx] - mu) * rs;
                                let gv = g.data()[idx];
                                if let Some(dx) = dx.as_mut() {
                                    let dyg = gv * gdat[ch];
                                    dx.data_mut()[idx] = dx.data_mut()[idx]
                                        + rs * (dyg - mean_dyg - xhat * mean_dyg_xhat);
                                }
                                if let Some(dg) = dgamma.as_mut() {
                                    dg.data_mut()[ch] = gv.mul_add(xhat, dg.data_mut()[ch]);
                                }
                                if let Some(db) = dbeta.as_mut() {
                                    db.data_mut()[ch] = db.data_mut()[ch] + gv;
                                }
                            }
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dg) = dgamma {
                    self.accumulate(grads, *gamma, dg);
                }
                if let Some(db) = dbeta {
                    self.accumulate(grads, *beta, db);
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (mean, rstd) = match &self.nodes[i].aux {
                    Some(Aux::Stats { mean, rstd }) => (mean, rstd),
                    _ => unreachable!("layer_norm aux missing"),
                };
                let c = *self.value(*x).dims().last().unwrap();
                let rows = self.value(*x).numel() / c;
                let count = T::from_f64(c as f64);
                let xdat = self.value(*x).data();
                let gdat = self.value(*gamma).data();
                let need_x = self.requires(*x);
                let need_g = self.requires(*gamma);
                let need_b = self.requires(*beta);
                let mut dx = if need_x { Some(Tensor::zeros(self.value(*x).dims())) } else { None };
                let mut dgamma = if need_g { Some(Tensor::zeros(&[c])) } else { None };
                let mut dbeta = if need_b { Some(Tensor::zeros(&[c])) } else { None };
                for r in 0..rows {
                    let mu = mean[r];
                    let rs = rstd[r];
                    let xrow = &xdat[r * c..(r + 1) * c];
                    let grow = &g.data()[r * c..(r + 1) * c];
                    let mut sum_dyg = T::zero();
                    let mut sum_dyg_xhat = T::zero();
                    for ci in 0..c {
                        let xhat = (xrow[ci] - mu) * rs;
                        let dyg = grow[ci] * gdat[ci];
                        sum_dyg = sum_dyg + dyg;
                        sum_dyg_xhat = dyg.mul_add(xhat, sum_dyg_xhat);
                    }
                    let mean_dyg = sum_dyg / count;
                    let mean_dyg_xhat = sum_dyg_xhat / count;
                    for ci in 0..c {
                        let xhat = (xrow[ci] - mu) * rs;
                        if let Some(dx) = dx.as_mut() {
                            let dyg = grow[ci] * gdat[ci];
                            dx.data_mut()[r * c + ci] = rs * (dyg - mean_dyg - xhat * mean_dyg_xhat);
                        }
                        if let Some(dg) = dgamma.as_mut() {
                            dg.data_mut()[ci] = grow[ci].mul_add(xhat, dg.data_mut()[ci]);
                        }
                        if let Some(db) = dbeta.as_mut() {
                            db.data_mut()[ci] = db.data_mut()[ci] + grow[ci];
                        }
                    }
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                if let Some(dg) = dgamma {
                    self.accumulate(grads, *gamma, dg);
                }
                if let Some(db) = dbeta {
                    self.accumulate(grads, *beta, db);
                }
            }
            Op::Silu(x) => {
                let one = T::one();
                let mut dx = self.value(*x).clone();
                for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                    let t = *d;
                    let sig = one / (one + (-t).exp());
                    *d = gv * sig * (one + t * (one - sig));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxLast(x) => {
                let c = *self.value(*x).dims().last().unwrap();
                let y = &self.nodes[i].value;
                let mut dx = Tensor::zeros(y.dims());
                for ((yrow, grow), drow) in y
                    .data()
                    .chunks(c)
                    .zip(g.data().chunks(c))
                    .zip(dx.data_mut().chunks_mut(c))
                {
                    let mut dot = T::zero();
                    for (&yv, &gv) in yrow.iter().zip(grow) {
                        dot = yv.mul_add(gv, dot);
                    }
                    for ((d, &yv), &gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let dx = g.reshaped(self.value(*x).dims())?;
                self.accumulate(grads, *x, dx);
            }
            Op::Permute0213(x) => {
                self.accumulate(grads, *x, permute0213(g));
            }
            Op::Concat { a, b, dim } => {
                let ad = self.value(*a).dims().to_vec();
                let bd = self.value(*b).dims().to_vec();
                let outer: usize = ad[..*dim].iter().product();
                let a_block: usize = ad[*dim..].iter().product();
                let b_block: usize = bd[*dim..].iter().product();
                if self.requires(*a) {
                    let mut da = Tensor::zeros(&ad);
                    for o in 0..outer {
                        let src = &g.data()[o * (a_block + b_block)..o * (a_block + b_block) + a_block];
                        da.data_mut()[o * a_block..(o + 1) * a_block].copy_from_slice(src);
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires(*b) {
                    let mut db = Tensor::zeros(&bd);
                    for o in 0..outer {
                        let src = &g.data()
                            [o * (a_block + b_block) + a_block..(o + 1) * (a_block + b_block)];
                        db.data_mut()[o * b_block..(o + 1) * b_block].copy_from_slice(src);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::SelectRows { x, indices } => {
                let xd = self.value(*x).dims().to_vec();
                let row = self.value(*x).numel() / xd[0];
                let mut dx = Tensor::zeros(&xd);
                for (pos, &idx) in indices.iter().enumerate() {
                    let src = &g.data()[pos * row..(pos + 1) * row];
                    let dst = &mut dx.data_mut()[idx * row..(idx + 1) * row];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2x(x) => {
                let xd = self.value(*x).dims().to_vec();
                let (n, h, w, c) = (xd[0], xd[1], xd[2], xd[3]);
                let mut dx = Tensor::zeros(&xd);
                for ni in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            let dst = ((ni * h + y) * w + xx) * c;
                            for dy in 0..2 {
                                for dxo in 0..2 {
                                    let oy = 2 * y + dy;
                                    let ox = 2 * xx + dxo;
                                    let src = ((ni * 2 * h + oy) * 2 * w + ox) * c;
                                    for ci in 0..c {
                                        dx.data_mut()[dst + ci] =
                                            dx.data_mut()[dst + ci] + g.data()[src + ci];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).dims()[1];
                let mut dt = Tensor::zeros(self.value(*table).dims());
                for (pos, &id) in ids.iter().enumerate() {
                    let src = &g.data()[pos * d..(pos + 1) * d];
                    let dst = &mut dt.data_mut()[id as usize * d..(id as usize + 1) * d];
                    for (o, &s) in dst.iter_mut().zip(src) {
                        *o = *o + s;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::MseLoss { a, b } => {
                let n = T::from_f64(self.value(*a).numel() as f64);
                let scale = g.data()[0] * T::from_f64(2.0) / n;
                let adat = self.value(*a).data();
                let bdat = self.value(*b).data();
                if self.requires(*a) {
                    let mut da = Tensor::zeros(self.value(*a).dims());
                    for ((o, &x), &y) in da.data_mut().iter_mut().zip(adat).zip(bdat) {
                        *o = (x - y) * scale;
                    }
                    self.accumulate(grads, *a, da);
                }
                if self.requires(*b) {
                    let mut db = Tensor::zeros(self.value(*b).dims());
                    for ((o, &x), &y) in db.data_mut().iter_mut().zip(adat).zip(bdat) {
                        *o = (y - x) * scale;
                    }
                    self.accumulate(grads, *b, db);
                }
            }
        }
        Ok(())
    }
}

fn permute0213<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.dims();
    let (a, b, c, dd) = (d[0], d[1], d[2], d[3]);
    let mut out = Tensor::zeros(&[a, c, b, dd]);
    let xdat = x.data();
    let odat = out.data_mut();
    for ai in 0..a {
        for bi in 0..b {
            for ci in 0..c {
                let src = ((ai * b + bi) * c + ci) * dd;
                let dst = ((ai * c + ci) * b + bi) * dd;
                odat[dst..dst + dd].copy_from_slice(&xdat[src..src + dd]);
            }
        }
    }
    out
}

fn im2col<T: Scalar>(
    x: &Tensor<T>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let d = x.dims();
    let (n, h, w, c) = (d[0], d[1], d[2], d[3]);
    let kkc = kh * kw * c;
    let mut out = Tensor::zeros(&[n * oh * ow, kkc]);
    let xdat = x.data();
    let odat = out.data_mut();
    let mut row = 0usize;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = row * kkc;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        let dst = base + (ky * kw + kx) * c;
                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            let src = ((ni * h + iy as usize) * w + ix as usize) * c;
                            odat[dst..dst + c].copy_from_slice(&xdat[src..src + c]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
    out
}

fn col2im<T: Scalar>(
    dpatches: &Tensor<T>,
    xdims: &[usize],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let (n, h, w, c) = (xdims[0], xdims[1], xdims[2], xdims[3]);
    let kkc = kh * kw * c;
    let mut dx = Tensor::zeros(xdims);
    let pdat = dpatches.data();
    let ddat = dx.data_mut();
    let mut row = 0usize;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = row * kkc;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w {
                            let src = base + (ky * kw + kx) * c;
                            let dst = ((ni * h + iy as usize) * w + ix as usize) * c;
                            for ci in 0..c {
                                ddat[dst + ci] = ddat[dst + ci] + pdat[src + ci];
                            }
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::NormalSource;

    /// Central finite differences on every element of every input leaf.
    fn finite_diff_check(
        inputs: &[Tensor<f64>],
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
        tol: f64,
    ) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let loss = build(&mut g, &vars);
        assert_eq!(g.value(loss).numel(), 1);
        let grads = g.backward(loss).unwrap();

        let h = 1e-6;
        for (vi, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[vi]).expect("missing grad").clone();
            for e in 0..input.numel() {
                let eval = |delta: f64| -> f64 {
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut t = t.clone();
                            if j == vi {
                                t.data_mut()[e] += delta;
                            }
                            g2.leaf(t, false)
                        })
                        .collect();
                    let l = build(&mut g2, &vs);
                    g2.value(l).data()[0]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = analytic.data()[e];
                let denom = an.abs().max(fd.abs()).max(1e-4);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "input {} elem {}: analytic {} vs fd {}",
                    vi,
                    e,
                    an,
                    fd
                );
            }
        }
    }

    fn rnd(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut src = NormalSource::from_seed(seed);
        Tensor::randn(dims, &mut src)
    }

    #[test]
    fn grads_linear_and_matmul() {
        let x = rnd(&[3, 4], 1);
        let w = rnd(&[4, 5], 2);
        let b = rnd(&[5], 3);
        let target = rnd(&[3, 5], 4);
        finite_diff_check(&[x, w, b, target.clone()], |g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            g.mse_loss(y, v[3]).unwrap()
        }, 1e-5);

        let a = rnd(&[3, 4], 5);
        let b2 = rnd(&[4, 2], 6);
        let t = rnd(&[3, 2], 7);
        finite_diff_check(&[a, b2, t], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            g.mse_loss(y, v[2]).unwrap()
        }, 1e-5);
    }

    #[test]
    fn grads_bmm_both_orientations() {
        for &tb in &[false, true] {
            let a = rnd(&[2, 3, 4], 10);
            let b = if tb { rnd(&[2, 5, 4], 11) } else { rnd(&[2, 4, 5], 11) };
            let t = rnd(&[2, 3, 5], 12);
            finite_diff_check(&[a, b, t], |g, v| {
                let y = g.bmm(v[0], v[1], tb).unwrap();
                g.mse_loss(y, v[2]).unwrap()
            }, 1e-5);
        }
    }

    #[test]
    fn grads_conv2d_stride_and_pad() {
        for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
            let x = rnd(&[2, 6, 6, 3], 20);
            let w = rnd(&[3, 3, 3, 4], 21);
            let b = rnd(&[4], 22);
            let oh = (6 + 2 * pad - 3) / stride + 1;
            let t = rnd(&[2, oh, oh, 4], 23);
            finite_diff_check(&[x, w, b, t], |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
                g.mse_loss(y, v[3]).unwrap()
            }, 1e-5);
        }
    }

    #[test]
    fn grads_norms() {
        let x = rnd(&[2, 3, 3, 4], 30);
        let gamma = rnd(&[4], 31).map(|v| v * 0.1 + 1.0);
        let beta = rnd(&[4], 32);
        let t = rnd(&[2, 3, 3, 4], 33);
        finite_diff_check(&[x.clone(), gamma.clone(), beta.clone(), t.clone()], |g, v| {
            let y = g.group_norm(v[0], v[1], v[2], 2).unwrap();
            g.mse_loss(y, v[3]).unwrap()
        }, 1e-4);
        finite_diff_check(&[x, gamma, beta, t], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            g.mse_loss(y, v[3]).unwrap()
        }, 1e-4);
    }

    #[test]
    fn grads_pointwise_and_softmax() {
        let x = rnd(&[3, 5], 40);
        let t = rnd(&[3, 5], 41);
        finite_diff_check(&[x.clone(), t.clone()], |g, v| {
            let y = g.silu(v[0]);
            g.mse_loss(y, v[1]).unwrap()
        }, 1e-5);
        finite_diff_check(&[x, t], |g, v| {
            let y = g.softmax_last(v[0]);
            g.mse_loss(y, v[1]).unwrap()
        }, 1e-5);
    }

    #[test]
    fn grads_structural_ops() {
        let x = rnd(&[2, 3, 2, 4], 50);
        let t = rnd(&[2, 2, 3, 4], 51);
        finite_diff_check(&[x, t], |g, v| {
            let y = g.permute_0213(v[0]).unwrap();
            g.mse_loss(y, v[1]).unwrap()
        }, 1e-5);

        let a = rnd(&[2, 2, 3], 52);
        let b = rnd(&[2, 4, 3], 53);
        let t = rnd(&[2, 6, 3], 54);
        finite_diff_check(&[a, b, t], |g, v| {
            let y = g.concat(v[0], v[1], 1).unwrap();
            g.mse_loss(y, v[2]).unwrap()
        }, 1e-5);

        let x = rnd(&[4, 3], 55);
        let t = rnd(&[5, 3], 56);
        finite_diff_check(&[x, t], |g, v| {
            let y = g.select_rows(v[0], vec![0, 2, 2, 3, 1]).unwrap();
            g.mse_loss(y, v[1]).unwrap()
        }, 1e-5);

        let x = rnd(&[1, 2, 2, 3], 57);
        let t = rnd(&[1, 4, 4, 3], 58);
        finite_diff_check(&[x, t], |g, v| {
            let y = g.upsample2x(v[0]).unwrap();
            g.mse_loss(y, v[1]).unwrap()
        }, 1e-5);
    }

    #[test]
    fn grads_embedding_and_broadcast_adds() {
        let table = rnd(&[6, 4], 60);
        let t = rnd(&[3, 4], 61);
        finite_diff_check(&[table, t], |g, v| {
            let y = g.embedding(v[0], &[1, 5, 1]).unwrap();
            g.mse_loss(y, v[1]).unwrap()
        }, 1e-5);

        let x = rnd(&[2, 2, 2, 3], 62);
        let bias = rnd(&[3], 63);
        let e = rnd(&[2, 3], 64);
        let t = rnd(&[2, 2, 2, 3], 65);
        finite_diff_check(&[x.clone(), bias, t.clone()], |g, v| {
            let y = g.add_bias(v[0], v[1]).unwrap();
            g.mse_loss(y, v[2]).unwrap()
        }, 1e-5);
        finite_diff_check(&[x, e, t], |g, v| {
            let y = g.add_per_row(v[0], v[1]).unwrap();
            g.mse_loss(y, v[2]).unwrap()
        }, 1e-5);
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut g = Graph::<f64>::new();
        let table = g.leaf(rnd(&[4, 2], 70), false);
        assert!(matches!(
            g.embedding(table, &[0, 4]),
            Err(PipelineError::Index(_))
        ));
    }

    #[test]
    fn conv_matches_direct_convolution_oracle() {
        // Tiny direct NHWC convolution, written independently of im2col.
        let x = rnd(&[1, 4, 4, 2], 80);
        let w = rnd(&[3, 3, 2, 3], 81);
        let b = rnd(&[3], 82);
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x.clone(), false);
        let wv = g.leaf(w.clone(), false);
        let bv = g.leaf(b.clone(), false);
        let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
        for oy in 0..4usize {
            for ox in 0..4usize {
                for co in 0..3usize {
                    let mut acc = b.data()[co];
                    for ky in 0..3usize {
                        for kx in 0..3usize {
                            let iy = oy as isize + ky as isize - 1;
                            let ix = ox as isize + kx as isize - 1;
                            if iy < 0 || iy >= 4 || ix < 0 || ix >= 4 {
                                continue;
                            }
                            for ci in 0..2usize {
                                acc += x.data()[((iy as usize * 4) + ix as usize) * 2 + ci]
                                    * w.data()[((ky * 3 + kx) * 2 + ci) * 3 + co];
                            }
                        }
                    }
                    let got = g.value(y).data()[(oy * 4 + ox) * 3 + co];
                    assert!((got - acc).abs() < 1e-12, "at ({oy},{ox},{co})");
                }
            }
        }
    }
}
