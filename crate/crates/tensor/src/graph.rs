//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! execution order, so the node list is already a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{shape_err, Result, TensorError};
use crate::float::Float;
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero padding of `k / 2`; output keeps the input's spatial size.
    Same,
    /// No padding; output shrinks by `k - 1`.
    Valid,
}

/// How a batch-norm node normalizes its input.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a, T> {
    /// Normalize with batch statistics and record them on the graph.
    Train,
    /// Normalize with the given running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance of the batch.
    pub var: Vec<f64>,
    /// Number of reduced positions per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    AvgPool2(Var),
    GlobalAvgPool(Var),
    TopMean {
        input: Var,
        k: usize,
        selected: Vec<usize>,
    },
    CenterSamples(Var),
    WeightedCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    BinaryCrossEntropy {
        probs: Var,
        targets: Vec<T>,
        clipped: Vec<bool>,
    },
    Sum(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Lower clamp applied to probabilities entering binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    params: HashMap<String, Var>,
    batch_stats: HashMap<String, BatchStats>,
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: HashMap::new(),
            batch_stats: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf registered under `name` so its gradient can be looked up later.
    pub fn param(&mut self, name: &str, value: &Tensor<T>) -> Var {
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[v.0].value.shape().to_vec(), g.clone()).expect("grad matches value shape"))
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn param_grad(&self, name: &str) -> Option<Tensor<T>> {
        self.grad(self.param_var(name)?)
    }

    pub fn batch_stats(&self, name: &str) -> Option<&BatchStats> {
        self.batch_stats.get(name)
    }

    // ----- layers -------------------------------------------------------

    /// 2-D convolution. `input` is `[N,H,W,Cin]` (or `[H,W,Cin]`), `kernel` is
    /// `[K,K,Cin,Cout]`, `bias` is `[Cout]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: Padding) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        let (batch, h, w, cin, unbatched) = match xs.as_slice() {
            [n, h, w, c] => (*n, *h, *w, *c, false),
            [h, w, c] => (1, *h, *w, *c, true),
            _ => return Err(shape_err("conv2d", "input of rank 3 or 4", format!("{xs:?}"))),
        };
        let [k, k2, kcin, cout] = ks.as_slice() else {
            return Err(shape_err("conv2d", "kernel [K,K,Cin,Cout]", format!("{ks:?}")));
        };
        let (k, cout) = (*k, *cout);
        if k != *k2 || k % 2 == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                reason: format!("kernel must be square with odd size, got {k}x{k2}"),
            });
        }
        if *kcin != cin {
            return Err(shape_err(
                "conv2d",
                format!("kernel Cin {kcin} (kernel {ks:?})"),
                format!("input Cin {cin} (input {xs:?})"),
            ));
        }
        if bs != [cout] {
            return Err(shape_err("conv2d", format!("bias [{cout}]"), format!("{bs:?}")));
        }
        let pad = match padding {
            Padding::Same => k / 2,
            Padding::Valid => {
                if h < k || w < k {
                    return Err(TensorError::InvalidArgument {
                        op: "conv2d",
                        reason: format!("valid padding needs H,W >= {k}, got {h}x{w}"),
                    });
                }
                0
            }
        };
        let geom = ConvGeom {
            batch,
            height: h,
            width: w,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            pad,
        };
        let cols = kernels::im2col(self.value(input).data(), &geom);
        let rows = geom.rows();
        let plen = geom.patch_len();
        let mut out = Vec::with_capacity(rows * cout);
        let b = self.value(bias).data();
        for _ in 0..rows {
            out.extend_from_slice(b);
        }
        T::gemm(
            rows,
            plen,
            cout,
            T::one(),
            &cols,
            (plen as isize, 1),
            self.value(kernel).data(),
            (cout as isize, 1),
            T::one(),
            &mut out,
            (cout as isize, 1),
        );
        let shape = if unbatched {
            vec![geom.out_height(), geom.out_width(), cout]
        } else {
            vec![batch, geom.out_height(), geom.out_width(), cout]
        };
        let rg = self.needs(&[input, kernel, bias]);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Fully connected layer: `[N,D] · [D,U] + [U]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let [n, d] = xs.as_slice() else {
            return Err(shape_err("dense", "input [N,D]", format!("{xs:?}")));
        };
        let [wd, u] = ws.as_slice() else {
            return Err(shape_err("dense", "weight [D,U]", format!("{ws:?}")));
        };
        if wd != d {
            return Err(shape_err("dense", format!("input width {wd}"), format!("{d}")));
        }
        if self.value(bias).shape() != [*u] {
            return Err(shape_err(
                "dense",
                format!("bias [{u}]"),
                format!("{:?}", self.value(bias).shape()),
            ));
        }
        let (n, d, u) = (*n, *d, *u);
        let mut out = Vec::with_capacity(n * u);
        for _ in 0..n {
            out.extend_from_slice(self.value(bias).data());
        }
        T::gemm(
            n,
            d,
            u,
            T::one(),
            self.value(input).data(),
            (d as isize, 1),
            self.value(weight).data(),
            (u as isize, 1),
            T::one(),
            &mut out,
            (u as isize, 1),
        );
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(Tensor::new(vec![n, u], out)?, Op::Dense { input, weight, bias }, rg))
    }

    /// Batch normalization over every axis except the trailing channel axis.
    ///
    /// In training mode the observed statistics are recorded under `name`.
    pub fn batch_norm(
        &mut self,
        name: &str,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode<'_, T>,
        eps: T,
    ) -> Result<Var> {
        if !(eps > T::zero()) {
            return Err(TensorError::InvalidArgument {
                op: "batch_norm",
                reason: "epsilon must be positive".into(),
            });
        }
        let x = self.value(input);
        if x.rank() < 2 {
            return Err(shape_err("batch_norm", "input of rank >= 2", format!("{:?}", x.shape())));
        }
        let c = x.channels();
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(shape_err(
                    "batch_norm",
                    format!("{what} [{c}]"),
                    format!("{:?}", self.value(v).shape()),
                ));
            }
        }
        let count = x.numel() / c;
        let (mean, inv_std, train): (Vec<f64>, Vec<T>, bool) = match mode {
            NormMode::Train => {
                let sums = kernels::channel_sums(x.data(), c);
                let mean: Vec<f64> = sums.iter().map(|s| s / count as f64).collect();
                let mut var = vec![0.0f64; c];
                for chunk in x.data().chunks_exact(c) {
                    for ((acc, &v), &m) in var.iter_mut().zip(chunk).zip(&mean) {
                        let d = v.to_f64_lossy() - m;
                        *acc += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= count as f64);
                let inv_std = var
                    .iter()
                    .map(|&v| T::from_f64_lossy(1.0 / (v + eps.to_f64_lossy()).sqrt()))
                    .collect();
                self.batch_stats.insert(
                    name.to_string(),
                    BatchStats {
                        mean: mean.clone(),
                        var,
                        count,
                    },
                );
                (mean, inv_std, true)
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err(
                        "batch_norm",
                        format!("running stats of length {c}"),
                        format!("{}/{}", mean.len(), var.len()),
                    ));
                }
                let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean.iter().map(|m| m.to_f64_lossy()).collect(), inv_std, false)
            }
        };
        let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();
        let g = self.value(gamma).data().to_vec();
        let b = self.value(beta).data().to_vec();
        let x = self.value(input);
        let mut xhat = Vec::with_capacity(x.numel());
        let mut out = Vec::with_capacity(x.numel());
        for chunk in x.data().chunks_exact(c) {
            for ch in 0..c {
                let xh = (chunk[ch] - mean_t[ch]) * inv_std[ch];
                xhat.push(xh);
                out.push(g[ch] * xh + b[ch]);
            }
        }
        let shape = x.shape().to_vec();
        let rg = self.needs(&[input, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.needs(&[input]);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.value(input).map(kernels::sigmoid);
        let rg = self.needs(&[input]);
        self.push(out, Op::Sigmoid(input), rg)
    }

    /// 2x2 mean downsampling of `[N,H,W,C]` with even `H` and `W`.
    pub fn avg_pool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, h, w, c] = *x.shape() else {
            return Err(shape_err("avg_pool2", "[N,H,W,C]", format!("{:?}", x.shape())));
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "avg_pool2",
                reason: format!("spatial dims must be even, got {h}x{w}"),
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64_lossy(0.25);
        let src = x.data();
        let mut out = vec![T::zero(); n * oh * ow * c];
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let o = ((b * oh + oy) * ow + ox) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c;
                        for ch in 0..c {
                            out[o + ch] += src[i + ch];
                        }
                    }
                    for v in &mut out[o..o + c] {
                        *v *= quarter;
                    }
                }
            }
        }
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::new(vec![n, oh, ow, c], out)?, Op::AvgPool2(input), rg))
    }

    /// Mean over all spatial positions: `[N,H,W,C] -> [N,C]`, or `[H,W,C] -> [C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, hw, c, shape) = match *x.shape() {
            [n, h, w, c] => (n, h * w, c, vec![n, c]),
            [h, w, c] => (1, h * w, c, vec![c]),
            _ => return Err(shape_err("global_avg_pool", "[N,H,W,C] or [H,W,C]", format!("{:?}", x.shape()))),
        };
        let mut out = Vec::with_capacity(n * c);
        for b in 0..n {
            let sums = kernels::channel_sums(&x.data()[b * hw * c..(b + 1) * hw * c], c);
            out.extend(sums.iter().map(|s| T::from_f64_lossy(s / hw as f64)));
        }
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::new(shape, out)?, Op::GlobalAvgPool(input), rg))
    }

    /// Mean of the `k` largest spatial entries per sample and channel:
    /// `[N,H,W,C] -> [N,C]`. Ties are broken toward the lower position.
    pub fn top_k_mean(&mut self, input: Var, k: usize) -> Result<Var> {
        let x = self.value(input);
        let [n, h, w, c] = *x.shape() else {
            return Err(shape_err("top_k_mean", "[N,H,W,C]", format!("{:?}", x.shape())));
        };
        let hw = h * w;
        if k == 0 || k > hw {
            return Err(TensorError::InvalidArgument {
                op: "top_k_mean",
                reason: format!("k = {k} must lie in 1..={hw}"),
            });
        }
        let data = x.data();
        let mut out = Vec::with_capacity(n * c);
        let mut selected = Vec::with_capacity(n * c * k);
        let mut order: Vec<usize> = Vec::with_capacity(hw);
        for b in 0..n {
            for ch in 0..c {
                let at = |p: usize| data[(b * hw + p) * c + ch];
                order.clear();
                order.extend(0..hw);
                order.sort_by(|&p, &q| at(q).partial_cmp(&at(p)).unwrap_or(std::cmp::Ordering::Equal).then(p.cmp(&q)));
                let mut acc = 0.0f64;
                for &p in &order[..k] {
                    acc += at(p).to_f64_lossy();
                    selected.push((b * hw + p) * c + ch);
                }
                out.push(T::from_f64_lossy(acc / k as f64));
            }
        }
        let rg = self.needs(&[input]);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::TopMean { input, k, selected }, rg))
    }

    /// Subtract each sample's mean (over all non-leading axes).
    pub fn center_samples(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let n = x.shape()[0];
        let per = x.numel() / n;
        let mut out = x.data().to_vec();
        for chunk in out.chunks_exact_mut(per) {
            let mean = chunk.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / per as f64;
            let mean = T::from_f64_lossy(mean);
            chunk.iter_mut().for_each(|v| *v -= mean);
        }
        let shape = x.shape().to_vec();
        let rg = self.needs(&[input]);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::CenterSamples(input), rg)
    }

    // ----- losses -------------------------------------------------------

    /// `(1/N) Σ_n w[y_n] · (−log softmax(z_n)[y_n])` for logits `[N,K]`.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], class_weights: &[T]) -> Result<Var> {
        let z = self.value(logits);
        let [n, k] = *z.shape() else {
            return Err(shape_err("weighted_cross_entropy", "logits [N,K]", format!("{:?}", z.shape())));
        };
        if labels.len() != n {
            return Err(shape_err("weighted_cross_entropy", format!("{n} labels"), labels.len()));
        }
        if class_weights.len() != k {
            return Err(shape_err("weighted_cross_entropy", format!("{k} class weights"), class_weights.len()));
        }
        if class_weights.iter().any(|&w| !(w > T::zero())) {
            return Err(TensorError::InvalidArgument {
                op: "weighted_cross_entropy",
                reason: "class weights must be positive".into(),
            });
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= k) {
            return Err(TensorError::InvalidLabel { row, label, classes: k });
        }
        let mut probs = Vec::with_capacity(n * k);
        let mut total = 0.0f64;
        for (row, &y) in z.data().chunks_exact(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).to_f64_lossy().exp()).sum::<f64>().ln() + max.to_f64_lossy();
            total += class_weights[y].to_f64_lossy() * (lse - row[y].to_f64_lossy());
            probs.extend(kernels::softmax_row(row));
        }
        let loss = T::from_f64_lossy(total / n as f64);
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedCrossEntropy {
                logits,
                labels: labels.to_vec(),
                weights: class_weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities against same-shaped targets.
    /// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn binary_cross_entropy(&mut self, probs: Var, targets: &[T]) -> Result<Var> {
        let p = self.value(probs);
        if p.numel() != targets.len() {
            return Err(shape_err("binary_cross_entropy", format!("{} targets", p.numel()), targets.len()));
        }
        let eps = BCE_EPS;
        let mut clipped = Vec::with_capacity(targets.len());
        let mut total = 0.0f64;
        for (&pv, &y) in p.data().iter().zip(targets) {
            let raw = pv.to_f64_lossy();
            let pc = raw.clamp(eps, 1.0 - eps);
            clipped.push(pc != raw);
            let y = y.to_f64_lossy();
            total -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let loss = T::from_f64_lossy(total / targets.len() as f64);
        let rg = self.needs(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BinaryCrossEntropy {
                probs,
                targets: targets.to_vec(),
                clipped,
            },
            rg,
        ))
    }

    // ----- elementwise helpers -------------------------------------------

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().map(|v| v.to_f64_lossy()).sum::<f64>();
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(T::from_f64_lossy(s)), Op::Sum(input), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, |a, b| Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, |a, b| Op::Mul(a, b))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(T, T) -> T,
        mk: impl Fn(Var, Var) -> Op<T>,
    ) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err(op, format!("{:?}", x.shape()), format!("{:?}", y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, mk(a, b), rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|v| v * factor);
        let rg = self.needs(&[input]);
        self.push(out, Op::Scale(input, factor), rg)
    }

    // ----- backward -------------------------------------------------------

    /// Populate gradients of `loss` with respect to every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss(shape));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.backward_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backward_node(&mut self, i: usize, g: &[T]) {
        let node = &self.nodes[i];
        // Each arm computes the input contributions first, then accumulates them,
        // so the borrow of `node` ends before `accumulate` runs.
        let mut contribs: Vec<(Var, Vec<T>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
                cols,
            } => {
                let (rows, plen, cout) = (geom.rows(), geom.patch_len(), geom.out_channels);
                if self.nodes[bias.0].requires_grad {
                    let db: Vec<T> = kernels::channel_sums(g, cout).into_iter().map(T::from_f64_lossy).collect();
                    contribs.push((*bias, db));
                }
                if self.nodes[kernel.0].requires_grad {
                    let mut dk = vec![T::zero(); plen * cout];
                    T::gemm(
                        plen,
                        rows,
                        cout,
                        T::one(),
                        cols,
                        (1, plen as isize),
                        g,
                        (cout as isize, 1),
                        T::zero(),
                        &mut dk,
                        (cout as isize, 1),
                    );
                    contribs.push((*kernel, dk));
                }
                if self.nodes[input.0].requires_grad {
                    let mut dcols = vec![T::zero(); rows * plen];
                    T::gemm(
                        rows,
                        cout,
                        plen,
                        T::one(),
                        g,
                        (cout as isize, 1),
                        self.nodes[kernel.0].value.data(),
                        (1, cout as isize),
                        T::zero(),
                        &mut dcols,
                        (plen as isize, 1),
                    );
                    contribs.push((*input, kernels::col2im(&dcols, geom)));
                }
            }
            Op::Dense { input, weight, bias } => {
                let x = &self.nodes[input.0].value;
                let w = &self.nodes[weight.0].value;
                let (n, d) = (x.shape()[0], x.shape()[1]);
                let u = w.shape()[1];
                if self.nodes[bias.0].requires_grad {
                    let db = kernels::channel_sums(g, u).into_iter().map(T::from_f64_lossy).collect();
                    contribs.push((*bias, db));
                }
                if self.nodes[weight.0].requires_grad {
                    let mut dw = vec![T::zero(); d * u];
                    T::gemm(d, n, u, T::one(), x.data(), (1, d as isize), g, (u as isize, 1), T::zero(), &mut dw, (u as isize, 1));
                    contribs.push((*weight, dw));
                }
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(n, u, d, T::one(), g, (u as isize, 1), w.data(), (1, u as isize), T::zero(), &mut dx, (d as isize, 1));
                    contribs.push((*input, dx));
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let gam = self.nodes[gamma.0].value.data();
                let sum_dy = kernels::channel_sums(g, c);
                let mut sum_dy_xhat = vec![0.0f64; c];
                for (gc, xc) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_dy_xhat[ch] += (gc[ch] * xc[ch]).to_f64_lossy();
                    }
                }
                if self.nodes[beta.0].requires_grad {
                    contribs.push((*beta, sum_dy.iter().map(|&v| T::from_f64_lossy(v)).collect()));
                }
                if self.nodes[gamma.0].requires_grad {
                    contribs.push((*gamma, sum_dy_xhat.iter().map(|&v| T::from_f64_lossy(v)).collect()));
                }
                if self.nodes[input.0].requires_grad {
                    let mut dx = Vec::with_capacity(g.len());
                    if *train {
                        let m = (g.len() / c) as f64;
                        let mean_dy: Vec<T> = sum_dy.iter().map(|&s| T::from_f64_lossy(s / m)).collect();
                        let mean_dyx: Vec<T> = sum_dy_xhat.iter().map(|&s| T::from_f64_lossy(s / m)).collect();
                        for (gc, xc) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                            for ch in 0..c {
                                dx.push(gam[ch] * inv_std[ch] * (gc[ch] - mean_dy[ch] - xc[ch] * mean_dyx[ch]));
                            }
                        }
                    } else {
                        for gc in g.chunks_exact(c) {
                            for ch in 0..c {
                                dx.push(gc[ch] * gam[ch] * inv_std[ch]);
                            }
                        }
                    }
                    contribs.push((*input, dx));
                }
            }
            Op::Relu(input) => {
                let x = self.nodes[input.0].value.data();
                let dx = g.iter().zip(x).map(|(&d, &v)| if v > T::zero() { d } else { T::zero() }).collect();
                contribs.push((*input, dx));
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                let dx = g.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect();
                contribs.push((*input, dx));
            }
            Op::AvgPool2(input) => {
                let [n, h, w, c] = *self.nodes[input.0].value.shape() else { unreachable!() };
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::from_f64_lossy(0.25);
                let mut dx = vec![T::zero(); n * h * w * c];
                for b in 0..n {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let o = ((b * oh + oy) * ow + ox) * c;
                            for (dy, ddx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                let i = ((b * h + 2 * oy + dy) * w + 2 * ox + ddx) * c;
                                for ch in 0..c {
                                    dx[i + ch] = g[o + ch] * quarter;
                                }
                            }
                        }
                    }
                }
                contribs.push((*input, dx));
            }
            Op::GlobalAvgPool(input) => {
                let x = &self.nodes[input.0].value;
                let c = x.channels();
                let n = g.len() / c;
                let hw = x.numel() / (n * c);
                let inv = T::from_f64_lossy(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(x.numel());
                for b in 0..n {
                    for _ in 0..hw {
                        dx.extend(g[b * c..(b + 1) * c].iter().map(|&v| v * inv));
                    }
                }
                contribs.push((*input, dx));
            }
            Op::TopMean { input, k, selected } => {
                let mut dx = vec![T::zero(); self.nodes[input.0].value.numel()];
                let inv = T::from_f64_lossy(1.0 / *k as f64);
                for (j, chunk) in selected.chunks_exact(*k).enumerate() {
                    for &idx in chunk {
                        dx[idx] += g[j] * inv;
                    }
                }
                contribs.push((*input, dx));
            }
            Op::CenterSamples(input) => {
                let n = self.nodes[input.0].value.shape()[0];
                let per = g.len() / n;
                let mut dx = g.to_vec();
                for chunk in dx.chunks_exact_mut(per) {
                    let mean = T::from_f64_lossy(chunk.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / per as f64);
                    chunk.iter_mut().for_each(|v| *v -= mean);
                }
                contribs.push((*input, dx));
            }
            Op::WeightedCrossEntropy {
                logits,
                labels,
                weights,
                probs,
            } => {
                let k = weights.len();
                let n = labels.len();
                let scale = g[0] / T::from_f64_lossy(n as f64);
                let mut dz = probs.clone();
                for (chunk, &y) in dz.chunks_exact_mut(k).zip(labels) {
                    chunk[y] -= T::one();
                    let f = scale * weights[y];
                    chunk.iter_mut().for_each(|v| *v *= f);
                }
                contribs.push((*logits, dz));
            }
            Op::BinaryCrossEntropy { probs, targets, clipped } => {
                let p = self.nodes[probs.0].value.data();
                let scale = g[0] / T::from_f64_lossy(targets.len() as f64);
                let dp = p
                    .iter()
                    .zip(targets)
                    .zip(clipped)
                    .map(|((&pv, &y), &clip)| {
                        if clip {
                            T::zero()
                        } else {
                            scale * (pv - y) / (pv * (T::one() - pv))
                        }
                    })
                    .collect();
                contribs.push((*probs, dp));
            }
            Op::Sum(input) => {
                contribs.push((*input, vec![g[0]; self.nodes[input.0].value.numel()]));
            }
            Op::Add(a, b) => {
                contribs.push((*a, g.to_vec()));
                contribs.push((*b, g.to_vec()));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                contribs.push((*a, g.iter().zip(y).map(|(&d, &v)| d * v).collect()));
                contribs.push((*b, g.iter().zip(x).map(|(&d, &v)| d * v).collect()));
            }
            Op::Scale(input, f) => {
                let f = *f;
                contribs.push((*input, g.iter().map(|&d| d * f).collect()));
            }
        }
        for (v, c) in contribs {
            self.accumulate(v, c);
        }
    }
}
