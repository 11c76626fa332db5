//! Define-by-run computation tape.
//!
//! Every forward pass records primitive operations onto a fresh [`Tape`];
//! [`Tape::backward`] replays the records in reverse creation order, visiting
//! each node exactly once and accumulating vector-Jacobian products into the
//! inputs. Gradient accumulation across multiple uses of a value is additive.
//!
//! Supported primitives: conv2d, dense, relu, gelu, 2x2 mean-pool, flatten,
//! elementwise add/mul, scalar scale, scalar sum, cross-entropy and MSE
//! losses, and the batch/layer normalization family (recorded through
//! [`Tape::norm`], driven by the `norm` module).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Loss flavors understood by [`Tape::loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean softmax cross-entropy over the batch; targets are class indices.
    CrossEntropy,
    /// Mean squared error over all elements.
    Mse,
}

/// Where a norm op takes its statistics from.
#[derive(Debug, Clone)]
pub enum NormStats {
    /// Mini-batch statistics per channel, computed from the input (train mode).
    Batch,
    /// Fixed per-channel statistics (running estimates, eval mode);
    /// constants for differentiation.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
    /// Per-sample statistics over all non-batch axes (layer norm).
    PerSample,
}

/// Raw batch statistics returned by a train-mode norm op:
/// per-channel mean, per-channel biased variance, reduction population.
pub type RawStats = (Vec<f64>, Vec<f64>, usize);

struct NormRecord {
    x: Var,
    gamma: Var,
    beta: Option<Var>,
    sigma: bool,
    stats: NormStats,
    mask: Option<Vec<bool>>,
    // saved forward intermediates
    xhat: Vec<f64>,
    inv_std: Vec<f64>, // per channel (Batch/Fixed) or per sample (PerSample)
    scale_eff: Vec<f64>,
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, stride: usize, padding: usize, cols: Vec<f64> },
    Dense { x: Var, w: Var, b: Var },
    Relu { x: Var },
    Gelu { x: Var },
    MeanPool2 { x: Var },
    Flatten { x: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    Sum { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, log_probs: Vec<f64> },
    Mse { pred: Var, target: Vec<f64> },
    Norm(Box<NormRecord>),
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of primitive operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records a leaf holding a copy of `t`; gradient tracking follows
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf)
    }

    pub fn leaf_from_parts(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var {
        self.push(shape, data, requires_grad, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    /// Gradient populated by [`Tape::backward`]; `None` for nodes that do not
    /// require gradients or were not reachable from the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copies a node out into a standalone tensor (gradient included).
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        let mut t = Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent");
        t.set_requires_grad(n.requires_grad);
        t.set_grad(n.grad.clone());
        t
    }

    // ---- primitives -----------------------------------------------------

    /// 2-D cross-correlation. `x: [N,Cin,H,W]`, `w: [Cout,Cin,kH,kW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        if stride < 1 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects 4-d input and weight, got {xs:?} and {ws:?}"
            )));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin != wcin {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input has {cin}, weight expects {wcin}"
            )));
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                wd + 2 * padding
            )));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let k = cin * kh * kw;
        let rows = oh * ow;

        // im2col over the whole batch: cols[(n*rows + r) * k + j]
        let xd = &self.node(x).data;
        let mut cols = vec![0.0; n * rows * k];
        for b in 0..n {
            let xb = &xd[b * cin * h * wd..(b + 1) * cin * h * wd];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (b * rows + oy * ow + ox) * k;
                    let mut j = 0;
                    for ci in 0..cin {
                        let xc = &xb[ci * h * wd..(ci + 1) * h * wd];
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                j += kw;
                                continue;
                            }
                            let base = iy as usize * wd;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < wd as isize {
                                    cols[row + j] = xc[base + ix as usize];
                                }
                                j += 1;
                            }
                        }
                    }
                }
            }
        }

        // out_rows = cols x w^T, then transpose-scatter to [N,Cout,OH,OW]
        let wdta = &self.node(w).data;
        let out_rows = matmul_nt(&cols, wdta, n * rows, k, cout);
        let mut out = vec![0.0; n * cout * rows];
        for b in 0..n {
            for r in 0..rows {
                let src = (b * rows + r) * cout;
                for co in 0..cout {
                    out[(b * cout + co) * rows + r] = out_rows[src + co];
                }
            }
        }

        let rg = self.requires_grad(x) || self.requires_grad(w);
        Ok(self.push(vec![n, cout, oh, ow], out, rg, Op::Conv2d { x, w, stride, padding, cols }))
    }

    /// Affine map `x . w^T + b`. `x: [N,Fin]`, `w: [Fout,Fin]`, `b: [Fout]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x).to_vec(), self.shape(w).to_vec(), self.shape(b).to_vec());
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::Shape(format!(
                "dense expects 2-d input and weight, got {xs:?} and {ws:?}"
            )));
        }
        let (n, fin) = (xs[0], xs[1]);
        let (fout, wfin) = (ws[0], ws[1]);
        if fin != wfin {
            return Err(Error::Shape(format!(
                "dense inner dims disagree: input {fin}, weight {wfin}"
            )));
        }
        if bs != [fout] {
            return Err(Error::Shape(format!("dense bias shape {bs:?}, expected [{fout}]")));
        }
        let mut out = matmul_nt(&self.node(x).data, &self.node(w).data, n, fin, fout);
        let bd = &self.node(b).data;
        for r in 0..n {
            for c in 0..fout {
                out[r * fout + c] += bd[c];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(w) || self.requires_grad(b);
        Ok(self.push(vec![n, fout], out, rg, Op::Dense { x, w, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| v.max(0.0)).collect();
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, rg, Op::Relu { x })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| gelu_fwd(v)).collect();
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, rg, Op::Gelu { x })
    }

    /// 2x2 mean pooling with stride 2; trailing odd rows/columns are dropped.
    pub fn mean_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("mean_pool2 expects 4-d input, got {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h < 2 || w < 2 {
            return Err(Error::Shape(format!("mean_pool2 needs spatial dims >= 2, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = &self.node(x).data;
        let mut out = vec![0.0; n * c * oh * ow];
        for img in 0..n * c {
            let src = &xd[img * h * w..(img + 1) * h * w];
            let dst = &mut out[img * oh * ow..(img + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let y = 2 * oy;
                    let x0 = 2 * ox;
                    dst[oy * ow + ox] = 0.25
                        * (src[y * w + x0]
                            + src[y * w + x0 + 1]
                            + src[(y + 1) * w + x0]
                            + src[(y + 1) * w + x0 + 1]);
                }
            }
        }
        let rg = self.requires_grad(x);
        Ok(self.push(vec![n, c, oh, ow], out, rg, Op::MeanPool2 { x }))
    }

    /// Collapses all non-batch axes: `[N, ...] -> [N, prod(...)]`.
    pub fn flatten(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let n = xs[0];
        let rest: usize = xs[1..].iter().product();
        let data = self.node(x).data.clone();
        let rg = self.requires_grad(x);
        self.push(vec![n, rest], data, rg, Op::Flatten { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add shapes disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> =
            self.node(a).data.iter().zip(&self.node(b).data).map(|(x, y)| x + y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul shapes disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> =
            self.node(a).data.iter().zip(&self.node(b).data).map(|(x, y)| x * y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, data, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let data: Vec<f64> = self.node(x).data.iter().map(|&v| c * v).collect();
        let rg = self.requires_grad(x);
        let shape = self.shape(x).to_vec();
        self.push(shape, data, rg, Op::Scale { x, c })
    }

    /// Sum of all elements; scalar output.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.node(x).data.iter().sum();
        let rg = self.requires_grad(x);
        self.push(vec![1], vec![s], rg, Op::Sum { x })
    }

    /// Batch-mean loss. Cross-entropy expects `pred: [N,K]` logits and
    /// integer class indices in `target`; MSE expects matching shapes.
    pub fn loss(&mut self, pred: Var, target: &Tensor, kind: LossKind) -> Result<Var> {
        match kind {
            LossKind::Mse => {
                if self.shape(pred) != target.shape() {
                    return Err(Error::Shape(format!(
                        "mse shapes disagree: {:?} vs {:?}",
                        self.shape(pred),
                        target.shape()
                    )));
                }
                let pd = &self.node(pred).data;
                let td = target.data();
                let numel = pd.len() as f64;
                let s: f64 = pd.iter().zip(td).map(|(p, t)| (p - t) * (p - t)).sum();
                let rg = self.requires_grad(pred);
                Ok(self.push(vec![1], vec![s / numel], rg, Op::Mse { pred, target: td.to_vec() }))
            }
            LossKind::CrossEntropy => {
                let ps = self.shape(pred).to_vec();
                if ps.len() != 2 {
                    return Err(Error::Shape(format!(
                        "cross_entropy expects [N,K] logits, got {ps:?}"
                    )));
                }
                let (n, k) = (ps[0], ps[1]);
                if target.numel() != n {
                    return Err(Error::Shape(format!(
                        "cross_entropy expects {n} targets, got {}",
                        target.numel()
                    )));
                }
                let mut targets = Vec::with_capacity(n);
                for (i, &v) in target.data().iter().enumerate() {
                    let idx = v.round();
                    if (v - idx).abs() > 1e-9 || idx < 0.0 || idx as usize >= k {
                        return Err(Error::Domain(format!(
                            "class index {v} at row {i} outside 0..{k}"
                        )));
                    }
                    targets.push(idx as usize);
                }
                let pd = &self.node(pred).data;
                let mut log_probs = vec![0.0; n * k];
                let mut total = 0.0;
                for r in 0..n {
                    let row = &pd[r * k..(r + 1) * k];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
                    for c in 0..k {
                        log_probs[r * k + c] = row[c] - lse;
                    }
                    total -= log_probs[r * k + targets[r]];
                }
                let rg = self.requires_grad(pred);
                Ok(self.push(
                    vec![1],
                    vec![total / n as f64],
                    rg,
                    Op::CrossEntropy { logits: pred, targets, log_probs },
                ))
            }
        }
    }

    /// Normalization primitive shared by the BN/LN family.
    ///
    /// `x: [N,C]` or `[N,C,H,W]`; `gamma`, `beta`: `[C]`. With `sigma` the
    /// effective scale is `sigmoid(gamma)`, otherwise `gamma` itself.
    /// `mask[c] = true` forces channel `c` to zero for every sample (used by
    /// pruning). Returns the output together with the raw batch statistics
    /// when `stats` is [`NormStats::Batch`].
    pub fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Option<Var>,
        sigma: bool,
        eps: f64,
        stats: NormStats,
        mask: Option<Vec<bool>>,
    ) -> Result<(Var, Option<RawStats>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 && xs.len() != 4 {
            return Err(Error::Shape(format!("norm expects [N,C] or [N,C,H,W], got {xs:?}")));
        }
        let n = xs[0];
        let c = xs[1];
        let spatial: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] {
            return Err(Error::Shape(format!(
                "norm gamma shape {:?}, expected [{c}]",
                self.shape(gamma)
            )));
        }
        if let Some(b) = beta {
            if self.shape(b) != [c] {
                return Err(Error::Shape(format!(
                    "norm beta shape {:?}, expected [{c}]",
                    self.shape(b)
                )));
            }
        }
        if let Some(m) = &mask {
            if m.len() != c {
                return Err(Error::Shape(format!("norm mask length {}, expected {c}", m.len())));
            }
        }

        let gd = self.node(gamma).data.clone();
        let scale_eff: Vec<f64> =
            if sigma { gd.iter().map(|&g| sigmoid(g)).collect() } else { gd };
        let beta_d: Option<Vec<f64>> = beta.map(|b| self.node(b).data.clone());

        let xd = &self.node(x).data;
        let numel = xd.len();

        let mut xhat = vec![0.0; numel];
        let inv_std;
        let mut raw_stats = None;

        match &stats {
            NormStats::Batch => {
                let m = n * spatial;
                if m < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "batch statistics need a population of at least 2, got {m}"
                    )));
                }
                let (mean, var) = channel_stats(xd, n, c, spatial);
                let istd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        for s in 0..spatial {
                            xhat[base + s] = (xd[base + s] - mean[ch]) * istd[ch];
                        }
                    }
                }
                raw_stats = Some((mean, var, m));
                inv_std = istd;
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Shape(format!(
                        "fixed statistics have {} channels, input has {c}",
                        mean.len()
                    )));
                }
                let istd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * spatial;
                        for s in 0..spatial {
                            xhat[base + s] = (xd[base + s] - mean[ch]) * istd[ch];
                        }
                    }
                }
                inv_std = istd;
            }
            NormStats::PerSample => {
                let m = c * spatial;
                if m < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "per-sample statistics need at least 2 features, got {m}"
                    )));
                }
                let mut istd = vec![0.0; n];
                for b in 0..n {
                    let row = &xd[b * m..(b + 1) * m];
                    let mean = row.iter().sum::<f64>() / m as f64;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
                    let is = 1.0 / (var + eps).sqrt();
                    istd[b] = is;
                    for (j, &v) in row.iter().enumerate() {
                        xhat[b * m + j] = (v - mean) * is;
                    }
                }
                inv_std = istd;
            }
        }

        let mut out = vec![0.0; numel];
        for b in 0..n {
            for ch in 0..c {
                let masked = mask.as_ref().is_some_and(|m| m[ch]);
                let base = (b * c + ch) * spatial;
                if masked {
                    continue; // channel forced to zero
                }
                let s = scale_eff[ch];
                let sh = beta_d.as_ref().map_or(0.0, |bd| bd[ch]);
                for sp in 0..spatial {
                    out[base + sp] = s * xhat[base + sp] + sh;
                }
            }
        }

        let rg = self.requires_grad(x)
            || self.requires_grad(gamma)
            || beta.is_some_and(|b| self.requires_grad(b));
        let record =
            NormRecord { x, gamma, beta, sigma, stats, mask, xhat, inv_std, scale_eff };
        let v = self.push(xs, out, rg, Op::Norm(Box::new(record)));
        Ok((v, raw_stats))
    }

    // ---- backward --------------------------------------------------------

    /// Reverse sweep from a scalar loss. Replaces any gradients from a
    /// previous sweep on this tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.accumulate_inputs(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        for (id, g) in grads.into_iter().enumerate() {
            self.nodes[id].grad = if self.nodes[id].requires_grad { g } else { None };
        }
        Ok(())
    }

    fn accumulate_inputs(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, stride, padding, cols } => {
                let xs = &self.node(*x).shape;
                let ws = &self.node(*w).shape;
                let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (cout, _, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
                let (oh, ow) = (node.shape[2], node.shape[3]);
                let rows = oh * ow;
                let k = cin * kh * kw;

                // g_rows: [N*rows, Cout] from g [N,Cout,OH,OW]
                let mut g_rows = vec![0.0; n * rows * cout];
                for b in 0..n {
                    for co in 0..cout {
                        let src = (b * cout + co) * rows;
                        for r in 0..rows {
                            g_rows[(b * rows + r) * cout + co] = g[src + r];
                        }
                    }
                }
                if self.requires_grad(*w) {
                    let dw = matmul_tn(&g_rows, cols, n * rows, cout, k);
                    axpy_into(grads, *w, self.node(*w).data.len(), &dw);
                }
                if self.requires_grad(*x) {
                    let dcols = matmul_nn(&g_rows, &self.node(*w).data, n * rows, cout, k);
                    // col2im scatter-add
                    let dst = grad_buf(grads, *x, n * cin * h * wd);
                    for b in 0..n {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let row = (b * rows + oy * ow + ox) * k;
                                let mut j = 0;
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - *padding as isize;
                                        if iy < 0 || iy >= h as isize {
                                            j += kw;
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix =
                                                (ox * stride + kx) as isize - *padding as isize;
                                            if ix >= 0 && ix < wd as isize {
                                                dst[((b * cin + ci) * h + iy as usize) * wd
                                                    + ix as usize] += dcols[row + j];
                                            }
                                            j += 1;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Dense { x, w, b } => {
                let (n, fin) = {
                    let s = &self.node(*x).shape;
                    (s[0], s[1])
                };
                let fout = self.node(*w).shape[0];
                if self.requires_grad(*x) {
                    let dx = matmul_nn(g, &self.node(*w).data, n, fout, fin);
                    axpy_into(grads, *x, n * fin, &dx);
                }
                if self.requires_grad(*w) {
                    let dw = matmul_tn(g, &self.node(*x).data, n, fout, fin);
                    axpy_into(grads, *w, fout * fin, &dw);
                }
                if self.requires_grad(*b) {
                    let dst = grad_buf(grads, *b, fout);
                    for r in 0..n {
                        for c in 0..fout {
                            dst[c] += g[r * fout + c];
                        }
                    }
                }
            }
            Op::Relu { x } => {
                if self.requires_grad(*x) {
                    let xd = &self.node(*x).data;
                    let dst = grad_buf(grads, *x, xd.len());
                    for i in 0..xd.len() {
                        if xd[i] > 0.0 {
                            dst[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                if self.requires_grad(*x) {
                    let xd = &self.node(*x).data;
                    let dst = grad_buf(grads, *x, xd.len());
                    for i in 0..xd.len() {
                        dst[i] += g[i] * gelu_bwd(xd[i]);
                    }
                }
            }
            Op::MeanPool2 { x } => {
                if self.requires_grad(*x) {
                    let xs = &self.node(*x).shape;
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (oh, ow) = (node.shape[2], node.shape[3]);
                    let dst = grad_buf(grads, *x, n * c * h * w);
                    for img in 0..n * c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = 0.25 * g[img * oh * ow + oy * ow + ox];
                                let y = 2 * oy;
                                let x0 = 2 * ox;
                                let base = img * h * w;
                                dst[base + y * w + x0] += gv;
                                dst[base + y * w + x0 + 1] += gv;
                                dst[base + (y + 1) * w + x0] += gv;
                                dst[base + (y + 1) * w + x0 + 1] += gv;
                            }
                        }
                    }
                }
            }
            Op::Flatten { x } => {
                if self.requires_grad(*x) {
                    axpy_into(grads, *x, g.len(), g);
                }
            }
            Op::Add { a, b } => {
                if self.requires_grad(*a) {
                    axpy_into(grads, *a, g.len(), g);
                }
                if self.requires_grad(*b) {
                    axpy_into(grads, *b, g.len(), g);
                }
            }
            Op::Mul { a, b } => {
                if self.requires_grad(*a) {
                    let bd = &self.node(*b).data;
                    let dst = grad_buf(grads, *a, g.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * bd[i];
                    }
                }
                if self.requires_grad(*b) {
                    let ad = &self.node(*a).data;
                    let dst = grad_buf(grads, *b, g.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * ad[i];
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.requires_grad(*x) {
                    let dst = grad_buf(grads, *x, g.len());
                    for i in 0..g.len() {
                        dst[i] += g[i] * c;
                    }
                }
            }
            Op::Sum { x } => {
                if self.requires_grad(*x) {
                    let len = self.node(*x).data.len();
                    let dst = grad_buf(grads, *x, len);
                    for v in dst.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::CrossEntropy { logits, targets, log_probs } => {
                if self.requires_grad(*logits) {
                    let n = targets.len();
                    let k = log_probs.len() / n;
                    let gv = g[0] / n as f64;
                    let dst = grad_buf(grads, *logits, n * k);
                    for r in 0..n {
                        for c in 0..k {
                            let softmax = log_probs[r * k + c].exp();
                            let indicator = if c == targets[r] { 1.0 } else { 0.0 };
                            dst[r * k + c] += gv * (softmax - indicator);
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                if self.requires_grad(*pred) {
                    let pd = &self.node(*pred).data;
                    let numel = pd.len() as f64;
                    let dst = grad_buf(grads, *pred, pd.len());
                    let gv = g[0] * 2.0 / numel;
                    for i in 0..pd.len() {
                        dst[i] += gv * (pd[i] - target[i]);
                    }
                }
            }
            Op::Norm(rec) => self.norm_backward(node, rec, g, grads),
        }
    }

    fn norm_backward(
        &self,
        node: &Node,
        rec: &NormRecord,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let shape = &node.shape;
        let n = shape[0];
        let c = shape[1];
        let spatial: usize = shape[2..].iter().product();

        // Masked channels contribute nothing in either direction.
        let masked = |ch: usize| rec.mask.as_ref().is_some_and(|m| m[ch]);

        // Per-channel reductions: sum g, sum g*xhat.
        let mut sum_g = vec![0.0; c];
        let mut sum_gx = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                if masked(ch) {
                    continue;
                }
                let base = (b * c + ch) * spatial;
                for sp in 0..spatial {
                    sum_g[ch] += g[base + sp];
                    sum_gx[ch] += g[base + sp] * rec.xhat[base + sp];
                }
            }
        }

        if self.requires_grad(rec.gamma) {
            let dst = grad_buf(grads, rec.gamma, c);
            for ch in 0..c {
                if masked(ch) {
                    continue;
                }
                let ds = sum_gx[ch];
                dst[ch] += if rec.sigma {
                    let s = rec.scale_eff[ch];
                    ds * s * (1.0 - s)
                } else {
                    ds
                };
            }
        }
        if let Some(beta) = rec.beta {
            if self.requires_grad(beta) {
                let dst = grad_buf(grads, beta, c);
                for ch in 0..c {
                    if !masked(ch) {
                        dst[ch] += sum_g[ch];
                    }
                }
            }
        }

        if !self.requires_grad(rec.x) {
            return;
        }
        let dst = grad_buf(grads, rec.x, n * c * spatial);
        match &rec.stats {
            NormStats::Batch => {
                let m = (n * spatial) as f64;
                for b in 0..n {
                    for ch in 0..c {
                        if masked(ch) {
                            continue;
                        }
                        let s = rec.scale_eff[ch];
                        let istd = rec.inv_std[ch];
                        // sums of dxhat over the reduction population
                        let t1 = s * sum_g[ch];
                        let t2 = s * sum_gx[ch];
                        let base = (b * c + ch) * spatial;
                        for sp in 0..spatial {
                            let dxhat = g[base + sp] * s;
                            dst[base + sp] +=
                                istd * (dxhat - (t1 + rec.xhat[base + sp] * t2) / m);
                        }
                    }
                }
            }
            NormStats::Fixed { .. } => {
                for b in 0..n {
                    for ch in 0..c {
                        if masked(ch) {
                            continue;
                        }
                        let k = rec.scale_eff[ch] * rec.inv_std[ch];
                        let base = (b * c + ch) * spatial;
                        for sp in 0..spatial {
                            dst[base + sp] += g[base + sp] * k;
                        }
                    }
                }
            }
            NormStats::PerSample => {
                let m = (c * spatial) as f64;
                for b in 0..n {
                    // per-sample reductions of dxhat and dxhat*xhat
                    let mut t1 = 0.0;
                    let mut t2 = 0.0;
                    for ch in 0..c {
                        if masked(ch) {
                            continue;
                        }
                        let s = rec.scale_eff[ch];
                        let base = (b * c + ch) * spatial;
                        for sp in 0..spatial {
                            let dxhat = g[base + sp] * s;
                            t1 += dxhat;
                            t2 += dxhat * rec.xhat[base + sp];
                        }
                    }
                    let istd = rec.inv_std[b];
                    for ch in 0..c {
                        if masked(ch) {
                            continue;
                        }
                        let s = rec.scale_eff[ch];
                        let base = (b * c + ch) * spatial;
                        for sp in 0..spatial {
                            let dxhat = g[base + sp] * s;
                            dst[base + sp] +=
                                istd * (dxhat - (t1 + rec.xhat[base + sp] * t2) / m);
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel mean and biased variance over batch and spatial axes.
pub(crate) fn channel_stats(xd: &[f64], n: usize, c: usize, spatial: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * spatial) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            for sp in 0..spatial {
                mean[ch] += xd[base + sp];
            }
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * spatial;
            for sp in 0..spatial {
                let d = xd[base + sp] - mean[ch];
                var[ch] += d * d;
            }
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    (mean, var)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    // saturation is clamped so the result stays strictly inside (0,1)
    // for every finite input
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy_into(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, src: &[f64]) {
    let dst = grad_buf(grads, v, len);
    for i in 0..len {
        dst[i] += src[i];
    }
}

/// `a [m,k] x b^T` where `b: [n,k]` -> `[m,n]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let or = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += ar[p] * br[p];
            }
            or[j] = s;
        }
    }
    out
}

/// `a [m,k] x b [k,n]` -> `[m,n]`.
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let or = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    out
}

/// `a^T x b` where `a: [k,m]`, `b: [k,n]` -> `[m,n]`.
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let br = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let or = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                or[j] += av * br[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// Direct 6-loop convolution oracle, independent of the im2col path.
    fn conv_oracle(
        x: &Tensor,
        w: &Tensor,
        stride: usize,
        padding: usize,
    ) -> (Vec<usize>, Vec<f64>) {
        let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        let xi = ((b * cin + ci) * h + iy as usize) * wd
                                            + ix as usize;
                                        let wi = ((co * cin + ci) * kh + ky) * kw + kx;
                                        acc += x.data()[xi] * w.data()[wi];
                                    }
                                }
                            }
                        }
                        out[((b * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        (vec![n, cout, oh, ow], out)
    }

    #[test]
    fn conv2d_all_ones_sums_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let w = tape.constant(&Tensor::filled(vec![1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y), &[9.0]);
    }

    #[test]
    fn conv2d_zero_weight_annihilates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(&rand_tensor(&mut rng, vec![2, 3, 5, 5]));
        let w = tape.constant(&Tensor::zeros(vec![4, 3, 3, 3]));
        let y = tape.conv2d(x, w, 1, 1).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let x = rand_tensor(&mut rng, vec![1, 2, 5, 5]);
            let w = rand_tensor(&mut rng, vec![3, 2, 3, 3]);
            let mut tape = Tape::new();
            let xv = tape.constant(&x);
            let wv = tape.constant(&w);
            let y = tape.conv2d(xv, wv, stride, padding).unwrap();
            let (oshape, oracle) = conv_oracle(&x, &w, stride, padding);
            assert_eq!(tape.shape(y), &oshape[..]);
            for (a, b) in tape.value(y).iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "conv mismatch {a} vs {b}");
            }
        }
    }

    #[test]
    fn conv2d_channel_mismatch_is_error() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(vec![1, 2, 4, 4]));
        let w = tape.constant(&Tensor::zeros(vec![1, 3, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn dense_identity_and_bias() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let w = tape.constant(&eye);
        let b = tape.constant(&Tensor::zeros(vec![3]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let wz = tape.constant(&Tensor::zeros(vec![2, 3]));
        let bb = tape.constant(&Tensor::new(vec![2], vec![7.0, -1.0]).unwrap());
        let y2 = tape.dense(x, wz, bb).unwrap();
        assert_eq!(tape.value(y2), &[7.0, -1.0, 7.0, -1.0]);
    }

    #[test]
    fn dense_matches_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, vec![4, 3]);
        let w = rand_tensor(&mut rng, vec![2, 3]);
        let b = rand_tensor(&mut rng, vec![2]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(&x), tape.constant(&w), tape.constant(&b));
        let y = tape.dense(xv, wv, bv).unwrap();
        for r in 0..4 {
            for c in 0..2 {
                let mut s = b.data()[c];
                for p in 0..3 {
                    s += x.data()[r * 3 + p] * w.data()[c * 3 + p];
                }
                assert!((tape.value(y)[r * 2 + c] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mse_of_identical_tensors_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = rand_tensor(&mut rng, vec![3, 2]);
        let mut tape = Tape::new();
        let p = tape.constant(&t);
        let l = tape.loss(p, &t, LossKind::Mse).unwrap();
        assert_eq!(tape.value(l), &[0.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        for k in [2usize, 5, 10] {
            let mut tape = Tape::new();
            let p = tape.constant(&Tensor::zeros(vec![3, k]));
            let t = Tensor::new(vec![3], vec![0.0, (k - 1) as f64, (k / 2) as f64]).unwrap();
            let l = tape.loss(p, &t, LossKind::CrossEntropy).unwrap();
            assert!((tape.value(l)[0] - (k as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn losses_match_scalar_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = rand_tensor(&mut rng, vec![6, 4]);
        let target = rand_tensor(&mut rng, vec![6, 4]);
        let mut tape = Tape::new();
        let pv = tape.constant(&pred);
        let l = tape.loss(pv, &target, LossKind::Mse).unwrap();
        let mut s = 0.0;
        for i in 0..24 {
            let d = pred.data()[i] - target.data()[i];
            s += d * d;
        }
        assert!((tape.value(l)[0] - s / 24.0).abs() < 1e-12);

        let classes = Tensor::new(vec![6], vec![0., 1., 2., 3., 1., 0.]).unwrap();
        let ce = tape.loss(pv, &classes, LossKind::CrossEntropy).unwrap();
        let mut total = 0.0;
        for r in 0..6 {
            let row = &pred.data()[r * 4..(r + 1) * 4];
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            total -= row[classes.data()[r] as usize] - lse;
        }
        assert!((tape.value(ce)[0] - total / 6.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_class() {
        let mut tape = Tape::new();
        let p = tape.constant(&Tensor::zeros(vec![2, 3]));
        let t = Tensor::new(vec![2], vec![0.0, 3.0]).unwrap();
        assert!(matches!(tape.loss(p, &t, LossKind::CrossEntropy), Err(Error::Domain(_))));
    }

    #[test]
    fn backward_of_sum_is_all_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = rand_tensor(&mut rng, vec![2, 3, 2]).with_requires_grad(true);
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &vec![1.0; 12][..]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let t = Tensor::zeros(vec![2, 2]).with_requires_grad(true);
        let x = tape.leaf(&t);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn linear_regression_gradient_matches_closed_form() {
        // loss = mse(x . w^T, y) with x: [N,F], w: [1,F]
        // d loss / d w = 2/N * sum_n (x_n . w - y_n) x_n
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, vec![8, 3]);
        let w = rand_tensor(&mut rng, vec![1, 3]).with_requires_grad(true);
        let y = rand_tensor(&mut rng, vec![8, 1]);

        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let wv = tape.leaf(&w);
        let b = tape.constant(&Tensor::zeros(vec![1]));
        let pred = tape.dense(xv, wv, b).unwrap();
        let loss = tape.loss(pred, &y, LossKind::Mse).unwrap();
        tape.backward(loss).unwrap();
        let got = tape.grad(wv).unwrap();

        let mut want = vec![0.0; 3];
        for nidx in 0..8 {
            let row = &x.data()[nidx * 3..(nidx + 1) * 3];
            let err: f64 =
                row.iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>() - y.data()[nidx];
            for f in 0..3 {
                want[f] += 2.0 / 8.0 * err * row[f];
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "grad mismatch {a} vs {b}");
        }
    }

    #[test]
    fn gradient_accumulation_is_additive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = rand_tensor(&mut rng, vec![4]).with_requires_grad(true);
        let c = rand_tensor(&mut rng, vec![4]);

        // use x twice: s = sum(x*c) + sum(x)
        let mut tape = Tape::new();
        let x = tape.leaf(&t);
        let cv = tape.constant(&c);
        let xc = tape.mul(x, cv).unwrap();
        let s1 = tape.sum(xc);
        let s2 = tape.sum(x);
        let s = tape.add(s1, s2).unwrap();
        tape.backward(s).unwrap();
        let twice = tape.grad(x).unwrap().to_vec();

        // single uses
        let mut t1 = Tape::new();
        let x1 = t1.leaf(&t);
        let c1 = t1.constant(&c);
        let m = t1.mul(x1, c1).unwrap();
        let sm = t1.sum(m);
        t1.backward(sm).unwrap();
        let g1 = t1.grad(x1).unwrap().to_vec();

        let mut t2 = Tape::new();
        let x2 = t2.leaf(&t);
        let s2b = t2.sum(x2);
        t2.backward(s2b).unwrap();
        let g2 = t2.grad(x2).unwrap().to_vec();

        for i in 0..4 {
            assert_eq!(twice[i], g1[i] + g2[i]);
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, vec![3, 2, 4, 4]).with_requires_grad(true);
        let w = rand_tensor(&mut rng, vec![3, 2, 3, 3]).with_requires_grad(true);
        let run = || {
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let wv = tape.leaf(&w);
            let y = tape.conv2d(xv, wv, 1, 1).unwrap();
            let a = tape.gelu(y);
            let s = tape.sum(a);
            tape.backward(s).unwrap();
            (tape.grad(xv).unwrap().to_vec(), tape.grad(wv).unwrap().to_vec())
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        assert!(gx1.iter().zip(&gx2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(gw1.iter().zip(&gw2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn gradient_does_not_flow_into_constants() {
        let mut tape = Tape::new();
        let x = tape.constant(&Tensor::filled(vec![3], 2.0));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).is_none());
    }
}
