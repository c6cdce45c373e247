use super::conv::{self, ConvGeom};
use super::linalg::gemm;
use super::Tensor;
use crate::error::{shape_err, Result, SimicError};
use crate::objective::{huber_slope, huber_term};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch mean and (biased) variance observed by a train-mode
/// batch norm, plus the number of values each statistic was taken over.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

impl BatchStats {
    /// Exponential update of running statistics; the running variance tracks
    /// the unbiased batch variance.
    pub fn update_running(&self, running_mean: &mut [f64], running_var: &mut [f64], momentum: f64) {
        let unbias = if self.count > 1 {
            self.count as f64 / (self.count - 1) as f64
        } else {
            1.0
        };
        for c in 0..self.mean.len() {
            running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * self.mean[c];
            running_var[c] = (1.0 - momentum) * running_var[c] + momentum * self.var[c] * unbias;
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Expand { x: Var, axis: usize, count: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Sum(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Depthwise { x: Var, w: Var, geom: ConvGeom },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Softmax(Var),
    GlobalAvgPool(Var),
    Huber { pred: Var, target: Var, delta: f64, mean: bool },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Recording of a forward computation. Nodes are appended in execution order,
/// so the node list is always a topological order of the graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by [`Tape::backward`], shaped like the value.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value.data
    }

    fn unary(&mut self, x: Var, data: Vec<f64>, op: Op) -> Var {
        let shape = self.shape(x).to_vec();
        let rg = self.any_grad(&[x]);
        self.push(Tensor { shape, data }, rg, op)
    }

    // ---- elementwise --------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("add: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("mul: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor { shape, data }, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.data(x).iter().map(|v| v * factor).collect();
        self.unary(x, data, Op::Scale(x, factor))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        self.unary(x, data, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let data = self.data(x).iter().map(|v| v.tanh()).collect();
        self.unary(x, data, Op::Tanh(x))
    }

    // ---- shape ops ----------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = Tensor::new(shape, self.data(x).to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        if shape.is_empty() {
            return Err(shape_err!("flatten of a scalar"));
        }
        let rows = shape[0];
        let cols: usize = shape[1..].iter().product();
        self.reshape(x, &[rows, cols])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() {
            return Err(shape_err!("permute: {} axes for rank {}", axes.len(), shape.len()));
        }
        for &a in axes {
            if a >= shape.len() || seen[a] {
                return Err(shape_err!("permute: invalid axes {:?}", axes));
            }
            seen[a] = true;
        }
        let (data, out_shape) = permute_data(self.data(x), &shape, axes);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape: out_shape, data }, rg, Op::Permute(x, axes.to_vec())))
    }

    /// Inserts a new axis of length `count` at `axis`, repeating the input.
    pub fn expand(&mut self, x: Var, axis: usize, count: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() || count == 0 {
            return Err(shape_err!("expand: axis {} count {} for {:?}", axis, count, shape));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let src = self.data(x);
        let mut data = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            let chunk = &src[o * inner..(o + 1) * inner];
            for _ in 0..count {
                data.extend_from_slice(chunk);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, count);
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape: out_shape, data }, rg, Op::Expand { x, axis, count }))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {} for rank {}", axis, base.len()));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err!("concat: {:?} incompatible with {:?} on axis {}", s, base, axis));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let tail: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * tail);
        for o in 0..outer {
            for &v in inputs {
                let inner = self.shape(v)[axis] * tail;
                data.extend_from_slice(&self.data(v)[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = self.any_grad(inputs);
        Ok(self.push(Tensor { shape, data }, rg, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    // ---- dense algebra ------------------------------------------------

    /// `x · wᵀ + b` applied over the last axis of `x` (`[..., din]`), with
    /// `w: [dout, din]` and `b: [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.is_empty() || ws.len() != 2 || ws[1] != xs[xs.len() - 1] {
            return Err(shape_err!("linear: input {:?} vs weight {:?}", xs, ws));
        }
        let (dout, din) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err!("linear: bias {:?} for {} outputs", self.shape(b), dout));
            }
        }
        let rows = self.data(x).len() / din;
        let mut data = vec![0.0; rows * dout];
        if let Some(b) = b {
            for row in data.chunks_mut(dout) {
                row.copy_from_slice(self.data(b));
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(rows, din, dout, self.data(x), false, self.data(w), true, beta, &mut data);
        let mut shape = xs;
        *shape.last_mut().unwrap() = dout;
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        Ok(self.push(Tensor { shape, data }, rg, Op::Linear { x, w, b }))
    }

    /// Batched matrix product `[B, M, K] × [B, K, L] → [B, M, L]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err!("bmm: {:?} × {:?}", sa, sb));
        }
        let (batch, m, k, l) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![0.0; batch * m * l];
        for i in 0..batch {
            gemm(
                m,
                k,
                l,
                &self.data(a)[i * m * k..],
                false,
                &self.data(b)[i * k * l..],
                false,
                0.0,
                &mut data[i * m * l..(i + 1) * m * l],
            );
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor { shape: vec![batch, m, l], data }, rg, Op::Bmm(a, b)))
    }

    // ---- convolution --------------------------------------------------

    /// Cross-correlation of `[N, C, H, W]` with `[F, C, kh, kw]` filters.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err!("conv2d: input {:?} and weight {:?} must be rank 4", xs, ws));
        }
        if ws[1] != xs[1] {
            return Err(shape_err!(
                "conv2d: weight expects {} input channels, input has {}",
                ws[1],
                xs[1]
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err!("conv2d: bias {:?} for {} filters", self.shape(b), ws[0]));
            }
        }
        let geom = ConvGeom::new(&xs, ws[2], ws[3], stride, padding).ok_or_else(|| {
            shape_err!(
                "conv2d: kernel {}x{} stride {} does not fit input {}x{} with padding {}",
                ws[2],
                ws[3],
                stride,
                xs[2],
                xs[3],
                padding
            )
        })?;
        let data = conv::conv2d_forward(&geom, ws[0], self.data(x), self.data(w), b.map(|b| self.data(b)));
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.any_grad(&deps);
        let shape = vec![geom.n, ws[0], geom.oh, geom.ow];
        Ok(self.push(Tensor { shape, data }, rg, Op::Conv2d { x, w, b, geom }))
    }

    /// Per-channel spatial filtering with weight `[C, 1, kh, kw]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != 1 {
            return Err(shape_err!("depthwise: input {:?}, weight {:?} (expected [C,1,kh,kw])", xs, ws));
        }
        if ws[0] != xs[1] {
            return Err(shape_err!(
                "depthwise: {} filters for {} input channels",
                ws[0],
                xs[1]
            ));
        }
        let geom = ConvGeom::new(&xs, ws[2], ws[3], stride, padding)
            .ok_or_else(|| shape_err!("depthwise: kernel {:?} does not fit input {:?}", ws, xs))?;
        let data = conv::depthwise_forward(&geom, self.data(x), self.data(w));
        let rg = self.any_grad(&[x, w]);
        let shape = vec![geom.n, geom.c, geom.oh, geom.ow];
        Ok(self.push(Tensor { shape, data }, rg, Op::Depthwise { x, w, geom }))
    }

    /// Depthwise filtering followed by a 1×1 pointwise convolution
    /// (`pointwise: [F, C, 1, 1]`).
    pub fn depthwise_separable_conv(
        &mut self,
        x: Var,
        depthwise: Var,
        pointwise: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let ps = self.shape(pointwise);
        if ps.len() != 4 || ps[2] != 1 || ps[3] != 1 {
            return Err(shape_err!("pointwise weight must be [F, C, 1, 1], got {:?}", ps));
        }
        let h = self.depthwise_conv2d(x, depthwise, stride, padding)?;
        self.conv2d(h, pointwise, bias, 1, 0)
    }

    // ---- normalization ------------------------------------------------

    /// Batch norm with batch statistics over `(N, H, W)` per channel.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let xs = self.shape(x).to_vec();
        self.check_bn(&xs, gamma, beta)?;
        if xs[0] < 2 {
            return Err(SimicError::InvalidArgument(format!(
                "batch norm in train mode needs at least 2 samples, got {}",
                xs[0]
            )));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let count = n * hw;
        let src = self.data(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                mean[ch] += src[(s * c + ch) * hw..][..hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for s in 0..n {
            for ch in 0..c {
                var[ch] += src[(s * c + ch) * hw..][..hw]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, &inv_std, true);
        Ok((out, BatchStats { mean, var, count }))
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        self.check_bn(&xs, gamma, beta)?;
        if running_mean.len() != xs[1] || running_var.len() != xs[1] {
            return Err(shape_err!("batch norm: running stats length vs {} channels", xs[1]));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.bn_apply(x, gamma, beta, running_mean, &inv_std, false))
    }

    fn check_bn(&self, xs: &[usize], gamma: Var, beta: Var) -> Result<()> {
        if xs.len() != 4 {
            return Err(shape_err!("batch norm expects [N, C, H, W], got {:?}", xs));
        }
        if self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(shape_err!(
                "batch norm: gamma {:?} / beta {:?} for {} channels",
                self.shape(gamma),
                self.shape(beta),
                xs[1]
            ));
        }
        Ok(())
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], inv_std: &[f64], train: bool) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut xhat = vec![0.0; src.len()];
        let mut data = vec![0.0; src.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    xhat[i] = (src[i] - mean[ch]) * inv_std[ch];
                    data[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        self.push(
            Tensor { shape: xs, data },
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std: inv_std.to_vec(),
                train,
            },
        )
    }

    // ---- reductions ---------------------------------------------------

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().ok_or_else(|| shape_err!("softmax of a scalar"))?;
        let src = self.data(x);
        if src.iter().any(|v| v.is_nan()) {
            return Err(SimicError::Numeric("softmax input contains NaN".into()));
        }
        let data = softmax_rows(src, n);
        Ok(self.unary(x, data, Op::Softmax(x)))
    }

    /// Mean over spatial axes: `[N, C, H, W] → [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err!("global_avg_pool expects [N, C, H, W], got {:?}", xs));
        }
        let hw = xs[2] * xs[3];
        let data = self
            .data(x)
            .chunks(hw)
            .map(|c| c.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor { shape: vec![xs[0], xs[1]], data }, rg, Op::GlobalAvgPool(x)))
    }

    /// Piecewise Huber loss with the `1/(2δ)` quadratic scaling, summed over
    /// all elements (or averaged when `mean`). Errors are `target − pred`.
    pub fn huber(&mut self, pred: Var, target: Var, delta: f64, mean: bool) -> Result<Var> {
        if !(delta > 0.0) {
            return Err(SimicError::InvalidArgument(format!("huber delta must be > 0, got {delta}")));
        }
        if self.shape(pred) != self.shape(target) {
            return Err(shape_err!("huber: {:?} vs {:?}", self.shape(pred), self.shape(target)));
        }
        let mut total: f64 = self
            .data(pred)
            .iter()
            .zip(self.data(target))
            .map(|(p, y)| huber_term(y - p, delta))
            .sum();
        if mean {
            total /= self.data(pred).len() as f64;
        }
        let rg = self.any_grad(&[pred, target]);
        Ok(self.push(Tensor::scalar(total), rg, Op::Huber { pred, target, delta, mean }))
    }

    // ---- reverse sweep ------------------------------------------------

    /// Seeds `d loss / d loss = 1` and propagates gradients to every node that
    /// requires them. Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            ));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = match &self.grads[i] {
                Some(g) => self.node_backward(i, g),
                None => continue,
            };
            for (v, d) in contributions {
                self.accumulate(v, d);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, d: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&d).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(d),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = &node.value.data;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(bv).map(|(g, b)| g * b).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(av).map(|(g, a)| g * a).collect()));
                }
            }
            Op::Scale(x, f) => out.push((*x, g.iter().map(|v| v * f).collect())),
            Op::Relu(x) => out.push((
                *x,
                g.iter().zip(y).map(|(g, y)| if *y > 0.0 { *g } else { 0.0 }).collect(),
            )),
            Op::Tanh(x) => out.push((*x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect())),
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (d, _) = permute_data(g, &node.value.shape, &inverse);
                out.push((*x, d));
            }
            Op::Expand { x, axis, count } => {
                let xs = self.shape(*x);
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis..].iter().product();
                let mut d = vec![0.0; outer * inner];
                for o in 0..outer {
                    let dst = &mut d[o * inner..(o + 1) * inner];
                    for k in 0..*count {
                        let src = &g[(o * count + k) * inner..][..inner];
                        dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                out.push((*x, d));
            }
            Op::Concat { inputs, axis } => {
                let shape = &node.value.shape;
                let outer: usize = shape[..*axis].iter().product();
                let tail: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * tail;
                let mut start = 0;
                for &v in inputs {
                    let inner = self.shape(v)[*axis] * tail;
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(outer * inner);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * row + start..][..inner]);
                        }
                        out.push((v, d));
                    }
                    start += inner;
                }
            }
            Op::Sum(x) => out.push((*x, vec![g[0]; self.data(*x).len()])),
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (dout, din) = (ws[0], ws[1]);
                let rows = g.len() / dout;
                if self.wants(*x) {
                    let mut d = vec![0.0; rows * din];
                    gemm(rows, dout, din, g, false, self.data(*w), false, 0.0, &mut d);
                    out.push((*x, d));
                }
                if self.wants(*w) {
                    let mut d = vec![0.0; dout * din];
                    gemm(dout, rows, din, g, true, self.data(*x), false, 0.0, &mut d);
                    out.push((*w, d));
                }
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut d = vec![0.0; dout];
                    for r in g.chunks(dout) {
                        d.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                    }
                    out.push((b, d));
                }
            }
            Op::Bmm(a, b) => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (batch, m, k, l) = (sa[0], sa[1], sa[2], sb[2]);
                if self.wants(*a) {
                    let mut d = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        gemm(
                            m,
                            l,
                            k,
                            &g[i * m * l..],
                            false,
                            &self.data(*b)[i * k * l..],
                            true,
                            0.0,
                            &mut d[i * m * k..(i + 1) * m * k],
                        );
                    }
                    out.push((*a, d));
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; batch * k * l];
                    for i in 0..batch {
                        gemm(
                            k,
                            m,
                            l,
                            &self.data(*a)[i * m * k..],
                            true,
                            &g[i * m * l..],
                            false,
                            0.0,
                            &mut d[i * k * l..(i + 1) * k * l],
                        );
                    }
                    out.push((*b, d));
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let filters = self.shape(*w)[0];
                let want_b = b.is_some_and(|b| self.wants(b));
                let (dx, dw, db) = conv::conv2d_backward(
                    geom,
                    filters,
                    self.data(*x),
                    self.data(*w),
                    g,
                    (self.wants(*x), self.wants(*w), want_b),
                );
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
                if let (Some(b), Some(d)) = (b, db) {
                    out.push((*b, d));
                }
            }
            Op::Depthwise { x, w, geom } => {
                let (dx, dw) = conv::depthwise_backward(
                    geom,
                    self.data(*x),
                    self.data(*w),
                    g,
                    (self.wants(*x), self.wants(*w)),
                );
                out.extend(dx.map(|d| (*x, d)));
                out.extend(dw.map(|d| (*w, d)));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xs = self.shape(*x);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let gam = self.data(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for i in off..off + hw {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let m = (n * hw) as f64;
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            let scale = gam[ch] * inv_std[ch];
                            for i in off..off + hw {
                                dx[i] = if *train {
                                    scale * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                                } else {
                                    scale * g[i]
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, dgamma));
                }
                if self.wants(*beta) {
                    out.push((*beta, dbeta));
                }
            }
            Op::Softmax(x) => {
                let n = *node.value.shape.last().unwrap();
                let mut d = vec![0.0; g.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, d));
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let hw = xs[2] * xs[3];
                let mut d = Vec::with_capacity(g.len() * hw);
                for &v in g {
                    d.extend(std::iter::repeat_n(v / hw as f64, hw));
                }
                out.push((*x, d));
            }
            Op::Huber {
                pred,
                target,
                delta,
                mean,
            } => {
                let p = self.data(*pred);
                let t = self.data(*target);
                let norm = if *mean { p.len() as f64 } else { 1.0 };
                let de: Vec<f64> = p
                    .iter()
                    .zip(t)
                    .map(|(p, t)| huber_slope(t - p, *delta) * g[0] / norm)
                    .collect();
                if self.wants(*pred) {
                    out.push((*pred, de.iter().map(|v| -v).collect()));
                }
                if self.wants(*target) {
                    out.push((*target, de));
                }
            }
        }
        out
    }
}

pub(crate) fn softmax_rows(src: &[f64], n: usize) -> Vec<f64> {
    let mut data = vec![0.0; src.len()];
    for (dst, row) in data.chunks_mut(n).zip(src.chunks(n)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    data
}

fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let mut data = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..src.len() {
        data.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += out_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= out_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (data, out_shape)
}
