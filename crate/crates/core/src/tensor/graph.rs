use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{shape_err, Result, SvdcError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// How an operand of a binary op maps onto the output's `[C, H, W]` layout.
#[derive(Clone, Copy, Debug)]
enum Bcast {
    Full,
    Channel(usize),
    Spatial(usize),
    Scalar,
}

impl Bcast {
    #[inline]
    fn idx(self, j: usize) -> usize {
        match self {
            Bcast::Full => j,
            Bcast::Channel(hw) => j / hw,
            Bcast::Spatial(hw) => j % hw,
            Bcast::Scalar => 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeom },
    PoolSpatial { input: Var, mode: PoolMode, argmax: Vec<usize> },
    PoolChannel { input: Var, mode: PoolMode, argmax: Vec<usize> },
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Exp(Var),
    Ln(Var),
    SoftmaxChannel(Var),
    Binary { a: Var, b: Var, kind: BinKind, ba: Bcast, bb: Bcast },
    Scale(Var, f64),
    AddScalar(Var),
    Concat { inputs: Vec<Var>, outer: usize, blocks: Vec<usize> },
    Gather { input: Var, index: Vec<usize> },
    Warp { src: Var, flow: Var },
    Upsample { input: Var, factor: usize },
    Sum(Var),
    SiLoss { pred: Var, target: Var, dlog: Vec<f64> },
    BinCenters { widths: Var, range: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation tape.
///
/// Nodes are appended in creation order, which is a topological order, so
/// backward simply walks the tape from the end.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn shape3(t: &Tensor) -> Result<(usize, usize, usize)> {
    t.dims3()
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on `v` by the last [`Graph::backward`] call.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Clears gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ------------------------------------------------------------------
    // Operations
    // ------------------------------------------------------------------

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (cin, h, w) = shape3(self.value(input))?;
        let ws = self.shape(weight).to_vec();
        let (cout, wcin, k) = match ws.as_slice() {
            &[co, ci, kh, kw] if kh == kw => (co, ci, kh),
            s => return shape_err(format!("conv weight must be [Cout,Cin,k,k], got {s:?}")),
        };
        if wcin != cin {
            return shape_err(format!("conv weight expects {wcin} input channels, input has {cin}"));
        }
        if stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
            return shape_err(format!("conv kernel {k} stride {stride} does not fit {h}x{w} with padding {padding}"));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return shape_err(format!("conv bias must be [{cout}], got {:?}", self.shape(b)));
            }
        }
        let geom = ConvGeom { cin, h, w, cout, k, stride, pad: padding };
        let (ho, wo) = geom.out_hw();
        let data = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            geom,
        );
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(vec![cout, ho, wo], data)?, Op::Conv2d { input, weight, bias, geom }, rg))
    }

    /// Global pooling over `H x W`: `[C,H,W] -> [C,1,1]`.
    pub fn pool_spatial(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let (c, h, w) = shape3(self.value(input))?;
        let hw = h * w;
        if hw == 0 {
            return shape_err("pooling over an empty plane");
        }
        let x = self.value(input).data();
        let mut out = vec![0.0; c];
        let mut argmax = Vec::new();
        for ch in 0..c {
            let pl = &x[ch * hw..(ch + 1) * hw];
            match mode {
                PoolMode::Avg => out[ch] = pl.iter().sum::<f64>() / hw as f64,
                PoolMode::Max => {
                    let (mut best, mut bi) = (pl[0], 0);
                    for (i, &v) in pl.iter().enumerate().skip(1) {
                        if v > best {
                            best = v;
                            bi = i;
                        }
                    }
                    out[ch] = best;
                    argmax.push(ch * hw + bi);
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(vec![c, 1, 1], out)?, Op::PoolSpatial { input, mode, argmax }, rg))
    }

    /// Pooling across channels: `[C,H,W] -> [1,H,W]`.
    pub fn pool_channel(&mut self, input: Var, mode: PoolMode) -> Result<Var> {
        let (c, h, w) = shape3(self.value(input))?;
        if c == 0 {
            return shape_err("pooling over zero channels");
        }
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = vec![0.0; hw];
        let mut argmax = Vec::new();
        match mode {
            PoolMode::Avg => {
                for ch in 0..c {
                    for (o, v) in out.iter_mut().zip(&x[ch * hw..(ch + 1) * hw]) {
                        *o += v;
                    }
                }
                out.iter_mut().for_each(|o| *o /= c as f64);
            }
            PoolMode::Max => {
                argmax = vec![0usize; hw];
                out.copy_from_slice(&x[..hw]);
                for ch in 1..c {
                    for p in 0..hw {
                        let v = x[ch * hw + p];
                        if v > out[p] {
                            out[p] = v;
                            argmax[p] = ch;
                        }
                    }
                }
            }
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(vec![1, h, w], out)?, Op::PoolChannel { input, mode, argmax }, rg))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(input);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(input);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, stable_sigmoid, Op::Sigmoid(input))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, |v| v.max(0.0), Op::Relu(input))
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.unary(input, f64::tanh, Op::Tanh(input))
    }

    pub fn abs(&mut self, input: Var) -> Var {
        self.unary(input, f64::abs, Op::Abs(input))
    }

    pub fn exp(&mut self, input: Var) -> Var {
        self.unary(input, f64::exp, Op::Exp(input))
    }

    /// Natural logarithm; every entry must be positive.
    pub fn ln(&mut self, input: Var) -> Result<Var> {
        if let Some(v) = self.value(input).data().iter().find(|v| !(**v > 0.0)) {
            return Err(SvdcError::InvalidArgument(format!("logarithm of non-positive value {v}")));
        }
        Ok(self.unary(input, f64::ln, Op::Ln(input)))
    }

    pub fn scale(&mut self, input: Var, s: f64) -> Var {
        self.unary(input, move |v| v * s, Op::Scale(input, s))
    }

    pub fn add_scalar(&mut self, input: Var, s: f64) -> Var {
        self.unary(input, move |v| v + s, Op::AddScalar(input))
    }

    /// Softmax across channels at every pixel.
    pub fn softmax_channel(&mut self, input: Var) -> Result<Var> {
        let (c, h, w) = shape3(self.value(input))?;
        if c == 0 {
            return shape_err("softmax over zero channels");
        }
        let hw = h * w;
        let x = self.value(input).data();
        let mut out = vec![0.0; c * hw];
        for p in 0..hw {
            let m = (0..c).map(|ch| x[ch * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ch in 0..c {
                let e = (x[ch * hw + p] - m).exp();
                out[ch * hw + p] = e;
                z += e;
            }
            for ch in 0..c {
                out[ch * hw + p] /= z;
            }
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(vec![c, h, w], out)?, Op::SoftmaxChannel(input), rg))
    }

    fn broadcast_plan(&self, a: Var, b: Var) -> Result<(Vec<usize>, Bcast, Bcast)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa == sb {
            return Ok((sa.to_vec(), Bcast::Full, Bcast::Full));
        }
        let classify = |small: &[usize], full: &[usize]| -> Option<Bcast> {
            if full.len() != 3 || small.len() != 3 {
                return None;
            }
            let hw = full[1] * full[2];
            match small {
                [1, 1, 1] => Some(Bcast::Scalar),
                [c, 1, 1] if *c == full[0] => Some(Bcast::Channel(hw)),
                [1, h, w] if *h == full[1] && *w == full[2] => Some(Bcast::Spatial(hw)),
                _ => None,
            }
        };
        if let Some(bb) = classify(sb, sa) {
            return Ok((sa.to_vec(), Bcast::Full, bb));
        }
        if let Some(ba) = classify(sa, sb) {
            return Ok((sb.to_vec(), ba, Bcast::Full));
        }
        shape_err(format!("shapes {sa:?} and {sb:?} are not broadcast-compatible"))
    }

    fn binary(&mut self, a: Var, b: Var, kind: BinKind) -> Result<Var> {
        let (shape, ba, bb) = self.broadcast_plan(a, b)?;
        let n: usize = shape.iter().product();
        let xa = self.value(a).data();
        let xb = self.value(b).data();
        let data: Vec<f64> = (0..n)
            .map(|j| {
                let (u, v) = (xa[ba.idx(j)], xb[bb.idx(j)]);
                match kind {
                    BinKind::Add => u + v,
                    BinKind::Sub => u - v,
                    BinKind::Mul => u * v,
                }
            })
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, data)?, Op::Binary { a, b, kind, ba, bb }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinKind::Mul)
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return shape_err("concat of zero tensors"),
        };
        if axis >= first.len() {
            return shape_err(format!("concat axis {axis} out of range for rank {}", first.len()));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i]) {
                return shape_err(format!("concat shape mismatch: {first:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let blocks: Vec<usize> = inputs.iter().map(|v| self.shape(*v)[axis] * inner).collect();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &blk) in inputs.iter().zip(&blocks) {
                data.extend_from_slice(&self.value(*v).data()[o * blk..(o + 1) * blk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = inputs.iter().any(|v| self.rg(*v));
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { inputs: inputs.to_vec(), outer, blocks }, rg))
    }

    /// `out[j] = input[index[j]]`, reshaped to `shape`.
    pub fn gather(&mut self, input: Var, index: Vec<usize>, shape: Vec<usize>) -> Result<Var> {
        let n = self.value(input).numel();
        if index.iter().any(|&i| i >= n) || shape.iter().product::<usize>() != index.len() {
            return shape_err("gather index out of range or shape mismatch");
        }
        let x = self.value(input).data();
        let data = index.iter().map(|&i| x[i]).collect();
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(shape, data)?, Op::Gather { input, index }, rg))
    }

    /// Channels `start..start+len` of a `[C,H,W]` tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let (c, h, w) = shape3(self.value(input))?;
        if start + len > c {
            return shape_err(format!("channel slice {start}..{} exceeds {c}", start + len));
        }
        let index = (start * h * w..(start + len) * h * w).collect();
        self.gather(input, index, vec![len, h, w])
    }

    /// `[C*r*r, h, w] -> [C, h*r, w*r]` pixel shuffle.
    pub fn depth_to_space(&mut self, input: Var, r: usize) -> Result<Var> {
        let (c, h, w) = shape3(self.value(input))?;
        if r == 0 || c % (r * r) != 0 {
            return shape_err(format!("depth_to_space: {c} channels not divisible by {}", r * r));
        }
        let co = c / (r * r);
        let index = kernels::depth_to_space_index(co, h, w, r);
        self.gather(input, index, vec![co, h * r, w * r])
    }

    /// `[C, H, W] -> [C*r*r, H/r, W/r]`, inverse of [`Graph::depth_to_space`].
    pub fn space_to_depth(&mut self, input: Var, r: usize) -> Result<Var> {
        let (c, hh, ww) = shape3(self.value(input))?;
        if r == 0 || hh % r != 0 || ww % r != 0 {
            return shape_err(format!("space_to_depth: {hh}x{ww} not divisible by {r}"));
        }
        let (h, w) = (hh / r, ww / r);
        let fwd = kernels::depth_to_space_index(c, h, w, r);
        let mut index = vec![0; fwd.len()];
        for (j, &src) in fwd.iter().enumerate() {
            index[src] = j;
        }
        self.gather(input, index, vec![c * r * r, h, w])
    }

    /// Backward warp `out(x) = src(x + flow(x))`, bilinear with clamp-to-edge.
    pub fn warp(&mut self, src: Var, flow: Var) -> Result<Var> {
        let (c, h, w) = shape3(self.value(src))?;
        if self.shape(flow) != [2, h, w] {
            return shape_err(format!("flow must be [2,{h},{w}], got {:?}", self.shape(flow)));
        }
        let data = kernels::warp_forward(self.value(src).data(), c, h, w, self.value(flow).data());
        let rg = self.rg(src) || self.rg(flow);
        Ok(self.push(Tensor::new(vec![c, h, w], data)?, Op::Warp { src, flow }, rg))
    }

    /// Half-pixel-centred bilinear upsampling by an integer factor.
    pub fn upsample(&mut self, input: Var, factor: usize) -> Result<Var> {
        let (c, h, w) = shape3(self.value(input))?;
        if factor == 0 {
            return shape_err("upsample factor must be positive");
        }
        let data = kernels::upsample_forward(self.value(input).data(), c, h, w, factor);
        let rg = self.rg(input);
        Ok(self.push(Tensor::new(vec![c, h * factor, w * factor], data)?, Op::Upsample { input, factor }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum();
        let rg = self.rg(input);
        self.push(Tensor::scalar(s), Op::Sum(input), rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let n = self.value(input).numel().max(1) as f64;
        let s = self.sum(input);
        self.scale(s, 1.0 / n)
    }

    /// Scale-invariant log loss `alpha * sqrt(mean(g^2) - lambda * mean(g)^2)`
    /// with `g = ln pred - ln target` over the pixels where `mask` holds
    /// (all pixels when `mask` is `None`). The radicand is floored at zero,
    /// where the gradient is zero.
    pub fn si_loss(
        &mut self,
        pred: Var,
        target: Var,
        mask: Option<&[bool]>,
        lambda: f64,
        alpha: f64,
    ) -> Result<Var> {
        let n = self.value(pred).numel();
        if self.shape(pred) != self.shape(target) {
            return shape_err(format!(
                "si_loss shape mismatch: {:?} vs {:?}",
                self.shape(pred),
                self.shape(target)
            ));
        }
        if let Some(m) = mask {
            if m.len() != n {
                return shape_err("si_loss mask length mismatch");
            }
        }
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let valid = |i: usize| mask.is_none_or(|m| m[i]);
        let count = (0..n).filter(|&i| valid(i)).count();
        if count == 0 {
            return Err(SvdcError::EmptyMask);
        }
        let g: Vec<f64> = (0..n)
            .map(|i| if valid(i) { p[i].max(1e-6).ln() - t[i].max(1e-6).ln() } else { 0.0 })
            .collect();
        let nf = count as f64;
        let s1: f64 = g.iter().map(|v| v * v).sum();
        let s: f64 = g.iter().sum();
        let rad = s1 / nf - lambda * s * s / (nf * nf);
        let (loss, dlog) = if rad > 0.0 {
            let root = rad.sqrt();
            let coef = alpha / (2.0 * root);
            let d = (0..n)
                .map(|i| if valid(i) { coef * (2.0 * g[i] / nf - 2.0 * lambda * s / (nf * nf)) } else { 0.0 })
                .collect();
            (alpha * root, d)
        } else {
            (0.0, vec![0.0; n])
        };
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(loss), Op::SiLoss { pred, target, dlog }, rg))
    }

    /// Adaptive-bin centres from normalized widths `[N,1,1]`:
    /// `c_k = d_min + (d_max - d_min) * (cumsum_k - b_k / 2)`.
    pub fn bin_centers(&mut self, widths: Var, d_min: f64, d_max: f64) -> Result<Var> {
        let (n, h, w) = shape3(self.value(widths))?;
        if h != 1 || w != 1 {
            return shape_err("bin widths must be [N,1,1]");
        }
        let range = d_max - d_min;
        let b = self.value(widths).data();
        let mut cum = 0.0;
        let mut out = Vec::with_capacity(n);
        for &bk in b {
            cum += bk;
            out.push(d_min + range * (cum - 0.5 * bk));
        }
        let rg = self.rg(widths);
        Ok(self.push(Tensor::new(vec![n, 1, 1], out)?, Op::BinCenters { widths, range }, rg))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Gradients are summed at
    /// fan-out points. Calling twice without [`Graph::zero_grad`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(SvdcError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(SvdcError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let acc = |grads: &mut Vec<Option<Vec<f64>>>, v: Var, g: Vec<f64>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, x)| *e += x),
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gout);
                    continue;
                }
                Op::Conv2d { input, weight, bias, geom } => {
                    let need_in = self.rg(*input);
                    let (gin, gw, gb) = kernels::conv2d_backward(
                        self.value(*input).data(),
                        self.value(*weight).data(),
                        &gout,
                        *geom,
                        need_in,
                    );
                    if need_in {
                        acc(&mut grads, *input, gin);
                    }
                    acc(&mut grads, *weight, gw);
                    if let Some(b) = bias {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::PoolSpatial { input, mode, argmax } => {
                    let (c, h, w) = self.value(*input).dims3()?;
                    let hw = h * w;
                    let mut gin = vec![0.0; c * hw];
                    match mode {
                        PoolMode::Avg => {
                            for ch in 0..c {
                                let g = gout[ch] / hw as f64;
                                gin[ch * hw..(ch + 1) * hw].iter_mut().for_each(|x| *x = g);
                            }
                        }
                        PoolMode::Max => {
                            for (ch, &a) in argmax.iter().enumerate() {
                                gin[a] = gout[ch];
                            }
                        }
                    }
                    acc(&mut grads, *input, gin);
                }
                Op::PoolChannel { input, mode, argmax } => {
                    let (c, h, w) = self.value(*input).dims3()?;
                    let hw = h * w;
                    let mut gin = vec![0.0; c * hw];
                    match mode {
                        PoolMode::Avg => {
                            for ch in 0..c {
                                for p in 0..hw {
                                    gin[ch * hw + p] = gout[p] / c as f64;
                                }
                            }
                        }
                        PoolMode::Max => {
                            for p in 0..hw {
                                gin[argmax[p] * hw + p] = gout[p];
                            }
                        }
                    }
                    acc(&mut grads, *input, gin);
                }
                Op::Sigmoid(input) => {
                    let y = node.value.data();
                    let g = gout.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    acc(&mut grads, *input, g);
                }
                Op::Relu(input) => {
                    let x = self.value(*input).data();
                    let g = gout.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                    acc(&mut grads, *input, g);
                }
                Op::Tanh(input) => {
                    let y = node.value.data();
                    let g = gout.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                    acc(&mut grads, *input, g);
                }
                Op::Exp(input) => {
                    let y = node.value.data();
                    let g = gout.iter().zip(y).map(|(g, y)| g * y).collect();
                    acc(&mut grads, *input, g);
                }
                Op::Ln(input) => {
                    let x = self.value(*input).data();
                    let g = gout.iter().zip(x).map(|(g, x)| g / x).collect();
                    acc(&mut grads, *input, g);
                }
                Op::Abs(input) => {
                    let x = self.value(*input).data();
                    let g = gout.iter().zip(x).map(|(g, x)| g * x.signum() * (*x != 0.0) as u8 as f64).collect();
                    acc(&mut grads, *input, g);
                }
                Op::SoftmaxChannel(input) => {
                    let (c, h, w) = node.value.dims3()?;
                    let hw = h * w;
                    let y = node.value.data();
                    let mut gin = vec![0.0; c * hw];
                    for p in 0..hw {
                        let dot: f64 = (0..c).map(|ch| gout[ch * hw + p] * y[ch * hw + p]).sum();
                        for ch in 0..c {
                            gin[ch * hw + p] = y[ch * hw + p] * (gout[ch * hw + p] - dot);
                        }
                    }
                    acc(&mut grads, *input, gin);
                }
                Op::Binary { a, b, kind, ba, bb } => {
                    let (na, nb) = (self.value(*a).numel(), self.value(*b).numel());
                    let xa = self.value(*a).data();
                    let xb = self.value(*b).data();
                    let mut ga = vec![0.0; na];
                    let mut gb = vec![0.0; nb];
                    for (j, g) in gout.iter().enumerate() {
                        let (ia, ib) = (ba.idx(j), bb.idx(j));
                        match kind {
                            BinKind::Add => {
                                ga[ia] += g;
                                gb[ib] += g;
                            }
                            BinKind::Sub => {
                                ga[ia] += g;
                                gb[ib] -= g;
                            }
                            BinKind::Mul => {
                                ga[ia] += g * xb[ib];
                                gb[ib] += g * xa[ia];
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(input, s) => {
                    let g = gout.iter().map(|g| g * s).collect();
                    acc(&mut grads, *input, g);
                }
                Op::AddScalar(input) => acc(&mut grads, *input, gout),
                Op::Concat { inputs, outer, blocks } => {
                    let stride: usize = blocks.iter().sum();
                    let mut offset = 0;
                    for (v, &blk) in inputs.iter().zip(blocks) {
                        let mut g = Vec::with_capacity(outer * blk);
                        for o in 0..*outer {
                            g.extend_from_slice(&gout[o * stride + offset..o * stride + offset + blk]);
                        }
                        offset += blk;
                        acc(&mut grads, *v, g);
                    }
                }
                Op::Gather { input, index } => {
                    let mut gin = vec![0.0; self.value(*input).numel()];
                    for (g, &src) in gout.iter().zip(index) {
                        gin[src] += g;
                    }
                    acc(&mut grads, *input, gin);
                }
                Op::Warp { src, flow } => {
                    let (c, h, w) = self.value(*src).dims3()?;
                    let (gs, gf) =
                        kernels::warp_backward(self.value(*src).data(), c, h, w, self.value(*flow).data(), &gout);
                    acc(&mut grads, *src, gs);
                    acc(&mut grads, *flow, gf);
                }
                Op::Upsample { input, factor } => {
                    let (c, h, w) = self.value(*input).dims3()?;
                    acc(&mut grads, *input, kernels::upsample_backward(&gout, c, h, w, *factor));
                }
                Op::Sum(input) => {
                    let n = self.value(*input).numel();
                    acc(&mut grads, *input, vec![gout[0]; n]);
                }
                Op::SiLoss { pred, target, dlog } => {
                    let g0 = gout[0];
                    let p = self.value(*pred).data();
                    let t = self.value(*target).data();
                    let gp = dlog
                        .iter()
                        .zip(p)
                        .map(|(d, p)| if *p > 1e-6 { g0 * d / p } else { 0.0 })
                        .collect();
                    let gt = dlog
                        .iter()
                        .zip(t)
                        .map(|(d, t)| if *t > 1e-6 { -g0 * d / t } else { 0.0 })
                        .collect();
                    acc(&mut grads, *pred, gp);
                    acc(&mut grads, *target, gt);
                }
                Op::BinCenters { widths, range } => {
                    let n = gout.len();
                    let mut gb = vec![0.0; n];
                    let mut suffix = 0.0;
                    for k in (0..n).rev() {
                        suffix += gout[k];
                        gb[k] = range * (suffix - 0.5 * gout[k]);
                    }
                    acc(&mut grads, *widths, gb);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }
}

#[inline]
pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
