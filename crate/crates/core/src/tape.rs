//! Reverse-mode gradient tape.
//!
//! A `Tape` records the primitive operations of a forward pass into a linear
//! arena (a Wengert list) together with every intermediate value. Calling
//! [`Tape::backward`] consumes the tape, replays the operations in reverse,
//! and returns the adjoint of every buffer. Parameter adjoints can then be
//! accumulated into a [`ParamSet`].
//!
//! The primitive set is exactly what the model zoo needs: dense, 2-D
//! convolution, ReLU, max/average pooling, flatten, softmax cross-entropy,
//! plus elementwise multiply and the small reductions the trainer uses.
//! All accumulations run in fixed row-major order so that repeated backward
//! passes are bitwise identical.

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};
use std::collections::HashMap;

/// Index of a buffer in the tape arena. Valid only for the tape it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Node {
    /// Constant leaf (inputs, masks, labels-as-data).
    Input,
    /// Parameter leaf; adjoints of these are surfaced per name.
    Param { name: String },
    /// out[b,j] = sum_k x[b,k] w[k,j] + bias[j]
    Dense { x: BufId, w: BufId, b: BufId },
    /// x: [B,C,H,W], w: [F,C,kh,kw], b: [F]; zero padding, unit dilation.
    Conv2d {
        x: BufId,
        w: BufId,
        b: BufId,
        stride: (usize, usize),
        pad: (usize, usize),
    },
    Relu { x: BufId },
    /// No padding; first-max tie rule in row-major window order.
    MaxPool2d {
        x: BufId,
        k: (usize, usize),
        stride: (usize, usize),
    },
    AvgPool2d {
        x: BufId,
        k: (usize, usize),
        stride: (usize, usize),
    },
    /// [B, ...] -> [B, prod(...)]
    Flatten { x: BufId },
    /// Elementwise sum of same-shape tensors.
    Add { a: BufId, b: BufId },
    /// Elementwise product of same-shape tensors.
    Mul { a: BufId, b: BufId },
    /// out[i] = logits[i, labels[i]]
    GatherClass { x: BufId, labels: Vec<usize> },
    /// out[i] = logsumexp(logits[i,:]) - logits[i, labels[i]]
    SoftmaxXent { logits: BufId, labels: Vec<usize> },
    /// Scalar sum of all elements.
    Sum { x: BufId },
    /// Scalar mean over the listed rows of a vector.
    MeanSubset { x: BufId, rows: Vec<usize> },
    /// out[i] = a[i] if take_a[i] else b[i], for equal-length vectors.
    RowSelect {
        a: BufId,
        b: BufId,
        take_a: Vec<bool>,
    },
}

impl Node {
    fn describe(&self) -> String {
        match self {
            Node::Param { name } => format!("param {name}"),
            other => other.op_name().to_string(),
        }
    }

    fn op_name(&self) -> &'static str {
        match self {
            Node::Input => "input",
            Node::Param { .. } => "param",
            Node::Dense { .. } => "dense",
            Node::Conv2d { .. } => "conv2d",
            Node::Relu { .. } => "relu",
            Node::MaxPool2d { .. } => "max_pool2d",
            Node::AvgPool2d { .. } => "avg_pool2d",
            Node::Flatten { .. } => "flatten",
            Node::Add { .. } => "add",
            Node::Mul { .. } => "mul",
            Node::GatherClass { .. } => "gather_class",
            Node::SoftmaxXent { .. } => "softmax_xent",
            Node::Sum { .. } => "sum",
            Node::MeanSubset { .. } => "mean_subset",
            Node::RowSelect { .. } => "row_select",
        }
    }
}

/// Operation record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    vals: Vec<Tensor>,
    nodes: Vec<Node>,
    params: Vec<(String, BufId)>,
    param_ids: HashMap<String, BufId>,
}

/// Adjoints produced by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    params: Vec<(String, BufId)>,
}

impl Gradients {
    /// Adjoint of a buffer, if any gradient reached it.
    pub fn adjoint(&self, id: BufId) -> Option<&Tensor> {
        self.adjoints.get(id.0).and_then(|a| a.as_ref())
    }

    /// Accumulates parameter adjoints into the matching gradient buffers.
    /// Buffers must be zeroed beforehand unless accumulation is intended.
    pub fn apply_to(&self, params: &mut ParamSet) -> Result<()> {
        for (name, id) in &self.params {
            if let Some(adj) = self.adjoint(*id) {
                params.accumulate_grad(name, adj)?;
            }
        }
        Ok(())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: BufId) -> &Tensor {
        &self.vals[id.0]
    }

    fn push(&mut self, node: Node, val: Tensor) -> BufId {
        let id = BufId(self.vals.len());
        self.vals.push(val);
        self.nodes.push(node);
        id
    }

    fn check(&self, id: BufId) -> Result<()> {
        if id.0 >= self.vals.len() {
            return Err(Error::Invalid(format!(
                "buffer {} not on tape of length {}",
                id.0,
                self.vals.len()
            )));
        }
        Ok(())
    }

    /// Records a constant input buffer.
    pub fn input(&mut self, t: Tensor) -> BufId {
        self.push(Node::Input, t)
    }

    /// Registers a parameter (by snapshotting its current value). Repeated
    /// registrations of the same name return the existing buffer so adjoints
    /// accumulate across multiple uses.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<BufId> {
        if let Some(id) = self.param_ids.get(name) {
            return Ok(*id);
        }
        let p = params
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("unknown parameter {name}")))?;
        let id = self.push(
            Node::Param {
                name: name.to_string(),
            },
            p.value.clone(),
        );
        self.params.push((name.to_string(), id));
        self.param_ids.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn dense(&mut self, x: BufId, w: BufId, b: BufId) -> Result<BufId> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let (xs, ws, bs) = (self.vals[x.0].shape(), self.vals[w.0].shape(), self.vals[b.0].shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || ws[1] != bs[0] {
            return Err(Error::Shape(format!(
                "dense shapes: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        let (n, ins, outs) = (xs[0], xs[1], ws[1]);
        let xd = self.vals[x.0].data();
        let wd = self.vals[w.0].data();
        let bd = self.vals[b.0].data();
        let mut out = vec![0.0; n * outs];
        for i in 0..n {
            let row = &xd[i * ins..(i + 1) * ins];
            let o = &mut out[i * outs..(i + 1) * outs];
            o.copy_from_slice(bd);
            for (k, &xv) in row.iter().enumerate() {
                let wrow = &wd[k * outs..(k + 1) * outs];
                for j in 0..outs {
                    o[j] += xv * wrow[j];
                }
            }
        }
        let val = Tensor::new(vec![n, outs], out)?;
        Ok(self.push(Node::Dense { x, w, b }, val))
    }

    pub fn conv2d(
        &mut self,
        x: BufId,
        w: BufId,
        b: BufId,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<BufId> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let xs = self.vals[x.0].shape().to_vec();
        let ws = self.vals[w.0].shape().to_vec();
        let bs = self.vals[b.0].shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || bs.len() != 1 || xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::Shape(format!(
                "conv2d shapes: x {xs:?}, w {ws:?}, b {bs:?}"
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Invalid("conv2d stride must be positive".into()));
        }
        let (n, c, h, wd_) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (ph, pw) = pad;
        if h + 2 * ph < kh || wd_ + 2 * pw < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel ({kh},{kw}) larger than padded input ({},{})",
                h + 2 * ph,
                wd_ + 2 * pw
            )));
        }
        let oh = (h + 2 * ph - kh) / stride.0 + 1;
        let ow = (wd_ + 2 * pw - kw) / stride.1 + 1;
        let xd = self.vals[x.0].data();
        let kd = self.vals[w.0].data();
        let bd = self.vals[b.0].data();
        let mut out = vec![0.0; n * f * oh * ow];
        for bi in 0..n {
            for fi in 0..f {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bd[fi];
                        for ci in 0..c {
                            for ky in 0..kh {
                                let iy = oy * stride.0 + ky;
                                if iy < ph || iy - ph >= h {
                                    continue;
                                }
                                let iy = iy - ph;
                                for kx in 0..kw {
                                    let ix = ox * stride.1 + kx;
                                    if ix < pw || ix - pw >= wd_ {
                                        continue;
                                    }
                                    let ix = ix - pw;
                                    acc += xd[((bi * c + ci) * h + iy) * wd_ + ix]
                                        * kd[((fi * c + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        out[((bi * f + fi) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        let val = Tensor::new(vec![n, f, oh, ow], out)?;
        Ok(self.push(Node::Conv2d { x, w, b, stride, pad }, val))
    }

    pub fn relu(&mut self, x: BufId) -> Result<BufId> {
        self.check(x)?;
        let v = &self.vals[x.0];
        let out: Vec<f64> = v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let val = Tensor::new(v.shape().to_vec(), out)?;
        Ok(self.push(Node::Relu { x }, val))
    }

    fn pool_shape(&self, x: BufId, k: (usize, usize), stride: (usize, usize)) -> Result<[usize; 4]> {
        let xs = self.vals[x.0].shape();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("pooling wants [N,C,H,W], got {xs:?}")));
        }
        if k.0 == 0 || k.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Invalid("pool size and stride must be positive".into()));
        }
        if xs[2] < k.0 || xs[3] < k.1 {
            return Err(Error::Shape(format!(
                "pool window ({},{}) larger than input ({},{})",
                k.0, k.1, xs[2], xs[3]
            )));
        }
        let oh = (xs[2] - k.0) / stride.0 + 1;
        let ow = (xs[3] - k.1) / stride.1 + 1;
        Ok([xs[0], xs[1], oh, ow])
    }

    pub fn max_pool2d(&mut self, x: BufId, k: (usize, usize), stride: (usize, usize)) -> Result<BufId> {
        self.check(x)?;
        let [n, c, oh, ow] = self.pool_shape(x, k, stride)?;
        let xs = self.vals[x.0].shape().to_vec();
        let (h, w) = (xs[2], xs[3]);
        let xd = self.vals[x.0].data();
        let mut out = vec![0.0; n * c * oh * ow];
        for bi in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for ky in 0..k.0 {
                            for kx in 0..k.1 {
                                let v = xd[((bi * c + ci) * h + oy * stride.0 + ky) * w
                                    + ox * stride.1
                                    + kx];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out[((bi * c + ci) * oh + oy) * ow + ox] = best;
                    }
                }
            }
        }
        let val = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(Node::MaxPool2d { x, k, stride }, val))
    }

    pub fn avg_pool2d(&mut self, x: BufId, k: (usize, usize), stride: (usize, usize)) -> Result<BufId> {
        self.check(x)?;
        let [n, c, oh, ow] = self.pool_shape(x, k, stride)?;
        let xs = self.vals[x.0].shape().to_vec();
        let (h, w) = (xs[2], xs[3]);
        let xd = self.vals[x.0].data();
        let inv = 1.0 / (k.0 * k.1) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for bi in 0..n {
            for ci in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ky in 0..k.0 {
                            for kx in 0..k.1 {
                                acc += xd[((bi * c + ci) * h + oy * stride.0 + ky) * w
                                    + ox * stride.1
                                    + kx];
                            }
                        }
                        out[((bi * c + ci) * oh + oy) * ow + ox] = acc * inv;
                    }
                }
            }
        }
        let val = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(Node::AvgPool2d { x, k, stride }, val))
    }

    pub fn flatten(&mut self, x: BufId) -> Result<BufId> {
        self.check(x)?;
        let v = &self.vals[x.0];
        if v.shape().is_empty() {
            return Err(Error::Shape("flatten on scalar".into()));
        }
        let n = v.shape()[0];
        let rest: usize = v.shape()[1..].iter().product();
        let val = v.reshaped(vec![n, rest])?;
        Ok(self.push(Node::Flatten { x }, val))
    }

    pub fn add(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        self.check(a)?;
        self.check(b)?;
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::Shape(format!(
                "add shapes differ: {:?} vs {:?}",
                self.vals[a.0].shape(),
                self.vals[b.0].shape()
            )));
        }
        let out: Vec<f64> = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(x, y)| x + y)
            .collect();
        let val = Tensor::new(self.vals[a.0].shape().to_vec(), out)?;
        Ok(self.push(Node::Add { a, b }, val))
    }

    pub fn mul(&mut self, a: BufId, b: BufId) -> Result<BufId> {
        self.check(a)?;
        self.check(b)?;
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::Shape(format!(
                "mul shapes differ: {:?} vs {:?}",
                self.vals[a.0].shape(),
                self.vals[b.0].shape()
            )));
        }
        let out: Vec<f64> = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .map(|(x, y)| x * y)
            .collect();
        let val = Tensor::new(self.vals[a.0].shape().to_vec(), out)?;
        Ok(self.push(Node::Mul { a, b }, val))
    }

    fn check_labels(&self, x: BufId, labels: &[usize]) -> Result<(usize, usize)> {
        let xs = self.vals[x.0].shape();
        if xs.len() != 2 {
            return Err(Error::Shape(format!("logits must be [N,K], got {xs:?}")));
        }
        if labels.len() != xs[0] {
            return Err(Error::Shape(format!(
                "{} labels for batch of {}",
                labels.len(),
                xs[0]
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= xs[1]) {
            return Err(Error::Invalid(format!(
                "label {bad} out of range for {} classes",
                xs[1]
            )));
        }
        Ok((xs[0], xs[1]))
    }

    pub fn gather_class(&mut self, x: BufId, labels: Vec<usize>) -> Result<BufId> {
        self.check(x)?;
        let (n, k) = self.check_labels(x, &labels)?;
        let xd = self.vals[x.0].data();
        let out: Vec<f64> = (0..n).map(|i| xd[i * k + labels[i]]).collect();
        let val = Tensor::new(vec![n], out)?;
        Ok(self.push(Node::GatherClass { x, labels }, val))
    }

    /// Per-sample softmax cross-entropy losses, computed stably.
    pub fn softmax_xent(&mut self, logits: BufId, labels: Vec<usize>) -> Result<BufId> {
        self.check(logits)?;
        let (n, k) = self.check_labels(logits, &labels)?;
        let xd = self.vals[logits.0].data();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let row = &xd[i * k..(i + 1) * k];
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            out[i] = lse - row[labels[i]];
        }
        let val = Tensor::new(vec![n], out)?;
        Ok(self.push(Node::SoftmaxXent { logits, labels }, val))
    }

    pub fn sum(&mut self, x: BufId) -> Result<BufId> {
        self.check(x)?;
        let s: f64 = self.vals[x.0].data().iter().sum();
        let val = Tensor::scalar(s)?;
        Ok(self.push(Node::Sum { x }, val))
    }

    /// Mean of the listed rows of a length-N vector. Rows are visited in the
    /// given order; callers pass them sorted ascending for a fixed reduction.
    pub fn mean_subset(&mut self, x: BufId, rows: Vec<usize>) -> Result<BufId> {
        self.check(x)?;
        let xs = self.vals[x.0].shape();
        if xs.len() != 1 {
            return Err(Error::Shape(format!("mean_subset wants a vector, got {xs:?}")));
        }
        if rows.is_empty() {
            return Err(Error::Empty("mean_subset over zero rows".into()));
        }
        let n = xs[0];
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Invalid(format!("row {bad} out of range 0..{n}")));
        }
        let xd = self.vals[x.0].data();
        let mut acc = 0.0;
        for &r in &rows {
            acc += xd[r];
        }
        let val = Tensor::scalar(acc / rows.len() as f64)?;
        Ok(self.push(Node::MeanSubset { x, rows }, val))
    }

    pub fn row_select(&mut self, a: BufId, b: BufId, take_a: Vec<bool>) -> Result<BufId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.vals[a.0].shape(), self.vals[b.0].shape());
        if sa.len() != 1 || sa != sb || take_a.len() != sa[0] {
            return Err(Error::Shape(format!(
                "row_select shapes: a {sa:?}, b {sb:?}, flags {}",
                take_a.len()
            )));
        }
        let out: Vec<f64> = self.vals[a.0]
            .data()
            .iter()
            .zip(self.vals[b.0].data())
            .zip(&take_a)
            .map(|((x, y), &t)| if t { *x } else { *y })
            .collect();
        let val = Tensor::new(sa.to_vec(), out)?;
        Ok(self.push(Node::RowSelect { a, b, take_a }, val))
    }

    /// Replays the tape in reverse from a scalar loss, consuming the tape and
    /// returning every buffer's adjoint. Every recorded node is visited
    /// exactly once.
    pub fn backward(self, loss: BufId) -> Result<Gradients> {
        self.check(loss)?;
        if !self.vals[loss.0].is_scalar() {
            return Err(Error::Shape(format!(
                "loss must be scalar, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        if !self.vals[loss.0].data()[0].is_finite() {
            return Err(Error::NonFinite(format!(
                "loss value {} at node {}",
                self.vals[loss.0].data()[0],
                loss.0
            )));
        }
        let Tape { vals, nodes, params, .. } = self;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; vals.len()];
        adj[loss.0] = Some(vec![1.0]);

        let add_into = |adj: &mut Vec<Option<Vec<f64>>>, id: BufId, contrib: &[f64]| {
            let slot = adj[id.0].get_or_insert_with(|| vec![0.0; contrib.len()]);
            for (d, s) in slot.iter_mut().zip(contrib) {
                *d += s;
            }
        };

        for idx in (0..nodes.len()).rev() {
            let g = match adj[idx].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "adjoint {bad} at node {idx} ({})",
                    nodes[idx].describe()
                )));
            }
            match &nodes[idx] {
                Node::Input => {
                    adj[idx] = Some(g); // keep for callers reading input adjoints
                }
                Node::Param { .. } => {
                    adj[idx] = Some(g);
                }
                Node::Dense { x, w, b } => {
                    let xs = vals[x.0].shape();
                    let (n, ins) = (xs[0], xs[1]);
                    let outs = vals[w.0].shape()[1];
                    let xd = vals[x.0].data();
                    let wd = vals[w.0].data();
                    let mut gx = vec![0.0; n * ins];
                    let mut gw = vec![0.0; ins * outs];
                    let mut gb = vec![0.0; outs];
                    for i in 0..n {
                        let grow = &g[i * outs..(i + 1) * outs];
                        let xrow = &xd[i * ins..(i + 1) * ins];
                        for kk in 0..ins {
                            let wrow = &wd[kk * outs..(kk + 1) * outs];
                            let mut acc = 0.0;
                            for j in 0..outs {
                                acc += grow[j] * wrow[j];
                            }
                            gx[i * ins + kk] = acc;
                            let gwrow = &mut gw[kk * outs..(kk + 1) * outs];
                            let xv = xrow[kk];
                            for j in 0..outs {
                                gwrow[j] += xv * grow[j];
                            }
                        }
                        for j in 0..outs {
                            gb[j] += grow[j];
                        }
                    }
                    add_into(&mut adj, *x, &gx);
                    add_into(&mut adj, *w, &gw);
                    add_into(&mut adj, *b, &gb);
                }
                Node::Conv2d { x, w, b, stride, pad } => {
                    let xs = vals[x.0].shape();
                    let ws = vals[w.0].shape();
                    let (n, c, h, wd_) = (xs[0], xs[1], xs[2], xs[3]);
                    let (f, kh, kw) = (ws[0], ws[2], ws[3]);
                    let (ph, pw) = *pad;
                    let oh = (h + 2 * ph - kh) / stride.0 + 1;
                    let ow = (wd_ + 2 * pw - kw) / stride.1 + 1;
                    let xd = vals[x.0].data();
                    let kd = vals[w.0].data();
                    let mut gx = vec![0.0; xd.len()];
                    let mut gw = vec![0.0; kd.len()];
                    let mut gb = vec![0.0; f];
                    for bi in 0..n {
                        for fi in 0..f {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let go = g[((bi * f + fi) * oh + oy) * ow + ox];
                                    gb[fi] += go;
                                    for ci in 0..c {
                                        for ky in 0..kh {
                                            let iy = oy * stride.0 + ky;
                                            if iy < ph || iy - ph >= h {
                                                continue;
                                            }
                                            let iy = iy - ph;
                                            for kx in 0..kw {
                                                let ix = ox * stride.1 + kx;
                                                if ix < pw || ix - pw >= wd_ {
                                                    continue;
                                                }
                                                let ix = ix - pw;
                                                let xi = ((bi * c + ci) * h + iy) * wd_ + ix;
                                                let wi = ((fi * c + ci) * kh + ky) * kw + kx;
                                                gx[xi] += go * kd[wi];
                                                gw[wi] += go * xd[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    add_into(&mut adj, *x, &gx);
                    add_into(&mut adj, *w, &gw);
                    add_into(&mut adj, *b, &gb);
                }
                Node::Relu { x } => {
                    // Subgradient at 0 is 0.
                    let xd = vals[x.0].data();
                    let gx: Vec<f64> = xd
                        .iter()
                        .zip(&g)
                        .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                        .collect();
                    add_into(&mut adj, *x, &gx);
                }
                Node::MaxPool2d { x, k, stride } => {
                    let xs = vals[x.0].shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let oh = (h - k.0) / stride.0 + 1;
                    let ow = (w - k.1) / stride.1 + 1;
                    let xd = vals[x.0].data();
                    let mut gx = vec![0.0; xd.len()];
                    for bi in 0..n {
                        for ci in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut best = f64::NEG_INFINITY;
                                    let mut arg = 0usize;
                                    for ky in 0..k.0 {
                                        for kx in 0..k.1 {
                                            let xi = ((bi * c + ci) * h + oy * stride.0 + ky) * w
                                                + ox * stride.1
                                                + kx;
                                            if xd[xi] > best {
                                                best = xd[xi];
                                                arg = xi;
                                            }
                                        }
                                    }
                                    gx[arg] += g[((bi * c + ci) * oh + oy) * ow + ox];
                                }
                            }
                        }
                    }
                    add_into(&mut adj, *x, &gx);
                }
                Node::AvgPool2d { x, k, stride } => {
                    let xs = vals[x.0].shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let oh = (h - k.0) / stride.0 + 1;
                    let ow = (w - k.1) / stride.1 + 1;
                    let inv = 1.0 / (k.0 * k.1) as f64;
                    let mut gx = vec![0.0; vals[x.0].numel()];
                    for bi in 0..n {
                        for ci in 0..c {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let go = g[((bi * c + ci) * oh + oy) * ow + ox] * inv;
                                    for ky in 0..k.0 {
                                        for kx in 0..k.1 {
                                            gx[((bi * c + ci) * h + oy * stride.0 + ky) * w
                                                + ox * stride.1
                                                + kx] += go;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    add_into(&mut adj, *x, &gx);
                }
                Node::Flatten { x } => {
                    add_into(&mut adj, *x, &g);
                }
                Node::Add { a, b } => {
                    add_into(&mut adj, *a, &g);
                    add_into(&mut adj, *b, &g);
                }
                Node::Mul { a, b } => {
                    let ad = vals[a.0].data();
                    let bd = vals[b.0].data();
                    let ga: Vec<f64> = g.iter().zip(bd).map(|(gv, bv)| gv * bv).collect();
                    let gb: Vec<f64> = g.iter().zip(ad).map(|(gv, av)| gv * av).collect();
                    add_into(&mut adj, *a, &ga);
                    add_into(&mut adj, *b, &gb);
                }
                Node::GatherClass { x, labels } => {
                    let k = vals[x.0].shape()[1];
                    let mut gx = vec![0.0; vals[x.0].numel()];
                    for (i, &y) in labels.iter().enumerate() {
                        gx[i * k + y] += g[i];
                    }
                    add_into(&mut adj, *x, &gx);
                }
                Node::SoftmaxXent { logits, labels } => {
                    let xs = vals[logits.0].shape();
                    let (n, k) = (xs[0], xs[1]);
                    let xd = vals[logits.0].data();
                    let mut gx = vec![0.0; n * k];
                    for i in 0..n {
                        let row = &xd[i * k..(i + 1) * k];
                        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                        let denom: f64 = row.iter().map(|&v| (v - m).exp()).sum();
                        for j in 0..k {
                            let p = (row[j] - m).exp() / denom;
                            let ind = if j == labels[i] { 1.0 } else { 0.0 };
                            gx[i * k + j] = g[i] * (p - ind);
                        }
                    }
                    add_into(&mut adj, *logits, &gx);
                }
                Node::Sum { x } => {
                    let gx = vec![g[0]; vals[x.0].numel()];
                    add_into(&mut adj, *x, &gx);
                }
                Node::MeanSubset { x, rows } => {
                    let mut gx = vec![0.0; vals[x.0].numel()];
                    let share = g[0] / rows.len() as f64;
                    for &r in rows {
                        gx[r] += share;
                    }
                    add_into(&mut adj, *x, &gx);
                }
                Node::RowSelect { a, b, take_a } => {
                    let n = take_a.len();
                    let mut ga = vec![0.0; n];
                    let mut gb = vec![0.0; n];
                    for i in 0..n {
                        if take_a[i] {
                            ga[i] = g[i];
                        } else {
                            gb[i] = g[i];
                        }
                    }
                    add_into(&mut adj, *a, &ga);
                    add_into(&mut adj, *b, &gb);
                }
            }
        }

        let adjoints = adj
            .into_iter()
            .enumerate()
            .map(|(i, a)| {
                a.map(|data| {
                    let shape = vals[i].shape().to_vec();
                    Tensor::new(shape, data).expect("adjoint checked finite")
                })
            })
            .collect();
        Ok(Gradients { adjoints, params })
    }
}

/// Runs backward and writes parameter gradients into `params` (which should
/// be zeroed beforehand unless accumulation is intended).
pub fn backward_into(tape: Tape, loss: BufId, params: &mut ParamSet) -> Result<Gradients> {
    let grads = tape.backward(loss)?;
    grads.apply_to(params)?;
    Ok(grads)
}
