//! Reverse-mode autodiff over a Wengert list.
//!
//! Each operation appends a node holding its output value and whatever it
//! needs for the backward pass. `backward` walks the list once in reverse.
//! All spatial tensors are NCHW.

use super::conv::Layout;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Stride-1 2-D convolution with explicit (possibly asymmetric) zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub kh: usize,
    pub kw: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv2d {
    /// Odd square kernel, output the same size as the input.
    pub fn same(k: usize) -> Self {
        Self {
            kh: k,
            kw: k,
            pad_top: k / 2,
            pad_bottom: k / 2,
            pad_left: k / 2,
            pad_right: k / 2,
        }
    }

    pub fn pointwise() -> Self {
        Self::same(1)
    }

    /// `k x 1` kernel over the height (time) axis that only looks backwards.
    pub fn causal_time(k: usize) -> Self {
        Self {
            kh: k,
            kw: 1,
            pad_top: k - 1,
            pad_bottom: 0,
            pad_left: 0,
            pad_right: 0,
        }
    }

    /// `1 x k` kernel over the width (frequency) axis, same-size output.
    pub fn along_width(k: usize) -> Self {
        Self {
            kh: 1,
            kw: k,
            pad_top: 0,
            pad_bottom: 0,
            pad_left: k / 2,
            pad_right: k - 1 - k / 2,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + self.pad_top + self.pad_bottom;
        let wp = w + self.pad_left + self.pad_right;
        (hp >= self.kh && wp >= self.kw).then(|| (hp - self.kh + 1, wp - self.kw + 1))
    }
}

enum Op<T> {
    Leaf,
    Conv { x: Var, w: Var, b: Var, geom: Conv2d },
    Relu { x: Var },
    Concat { parts: Vec<Var> },
    AvgPool2 { x: Var },
    GlobalAvgPool { x: Var },
    MaxOverWidth { x: Var, argmax: Vec<usize> },
    BandsToChannels { x: Var },
    Noise { x: Var, lam: Var, beta: Vec<T> },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    WeightedSum { x: Var, weights: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of the loss with respect to every node that needed one.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let g = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(g);
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: Conv2d) -> Result<Var> {
        let [n, cin, h, wd] = self.value(x).dims4()?;
        let [cout, wcin, kh, kw] = self.value(w).dims4()?;
        if wcin != cin || kh != geom.kh || kw != geom.kw || self.value(b).shape != [cout] {
            return Err(Error::Shape(format!(
                "conv: input {:?}, weight {:?}, bias {:?}, kernel {}x{}",
                self.value(x).shape,
                self.value(w).shape,
                self.value(b).shape,
                geom.kh,
                geom.kw
            )));
        }
        let (ho, wo) = geom
            .output_hw(h, wd)
            .ok_or_else(|| Error::Shape(format!("conv kernel {kh}x{kw} larger than padded {h}x{wd}")))?;
        let layout = Layout::new(cin, cout, h, wd, ho, wo, geom);
        let (in_size, out_size) = (cin * h * wd, cout * ho * wo);
        let mut out = vec![T::zero(); n * out_size];
        {
            let xv = &self.value(x).data;
            let wv = &self.value(w).data;
            let bv = &self.value(b).data;
            for (i, o) in out.chunks_exact_mut(out_size).enumerate() {
                layout.forward(&xv[i * in_size..(i + 1) * in_size], wv, bv, o);
            }
        }
        let value = Tensor::new(vec![n, cout, ho, wo], out)?;
        Ok(self.push(value, Op::Conv { x, w, b, geom }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect(),
        };
        self.push(value, Op::Relu { x }, &[x])
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let [n, _, h, w] = self.value(first).dims4()?;
        let mut total_c = 0;
        for &p in parts {
            let [pn, pc, ph, pw] = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::Shape("concat inputs differ outside the channel axis".into()));
            }
            total_c += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total_c * plane);
        for i in 0..n {
            for &p in parts {
                let v = self.value(p);
                let c = v.shape[1];
                out.extend_from_slice(&v.data[i * c * plane..(i + 1) * c * plane]);
            }
        }
        let value = Tensor::new(vec![n, total_c, h, w], out)?;
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, parts))
    }

    /// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::Shape(format!("cannot pool {h}x{w}")));
        }
        let xv = &self.value(x).data;
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); n * c * ho * wo];
        for nc in 0..n * c {
            let src = &xv[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * ho * wo..(nc + 1) * ho * wo];
            for i in 0..ho {
                for j in 0..wo {
                    let a = src[2 * i * w + 2 * j] + src[2 * i * w + 2 * j + 1];
                    let b = src[(2 * i + 1) * w + 2 * j] + src[(2 * i + 1) * w + 2 * j + 1];
                    dst[i * wo + j] = (a + b) * quarter;
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(value, Op::AvgPool2 { x }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let inv = T::one() / T::of((h * w) as f64);
        let data = self
            .value(x)
            .data
            .chunks_exact(h * w)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(vec![n, c, 1, 1], data)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    /// Max over the width axis: `[n, c, h, w] -> [n, c, h, 1]`.
    pub fn max_over_width(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        let mut data = Vec::with_capacity(n * c * h);
        let mut argmax = Vec::with_capacity(n * c * h);
        for (r, row) in self.value(x).data.chunks_exact(w).enumerate() {
            let mut best = 0;
            for j in 1..w {
                if row[j] > row[best] {
                    best = j;
                }
            }
            data.push(row[best]);
            argmax.push(r * w + best);
        }
        let value = Tensor::new(vec![n, c, h, 1], data)?;
        Ok(self.push(value, Op::MaxOverWidth { x, argmax }, &[x]))
    }

    /// `[n, 1, h, w] -> [n, w, h, 1]`: each width column becomes a channel.
    pub fn bands_to_channels(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = self.value(x).dims4()?;
        if c != 1 {
            return Err(Error::Shape(format!("bands_to_channels expects 1 channel, got {c}")));
        }
        let xv = &self.value(x).data;
        let mut out = vec![T::zero(); n * w * h];
        for i in 0..n {
            for t in 0..h {
                for f in 0..w {
                    out[(i * w + f) * h + t] = xv[(i * h + t) * w + f];
                }
            }
        }
        let value = Tensor::new(vec![n, w, h, 1], out)?;
        Ok(self.push(value, Op::BandsToChannels { x }, &[x]))
    }

    /// `x + exp(-lam[f]) * beta`, where `f` indexes the width (band) axis and
    /// `beta` is a fixed draw with the shape of `x`.
    pub fn noise_channel(&mut self, x: Var, lam: Var, beta: Vec<T>) -> Result<Var> {
        let [_, _, _, w] = self.value(x).dims4()?;
        if self.value(lam).shape != [w] {
            return Err(Error::Shape(format!(
                "noise channel: lambda {:?} for {w} bands",
                self.value(lam).shape
            )));
        }
        if beta.len() != self.value(x).len() {
            return Err(Error::Shape("noise draw does not match input".into()));
        }
        let scale: Vec<T> = self.value(lam).data.iter().map(|&l| (-l).exp()).collect();
        let xv = self.value(x);
        let data = xv
            .data
            .iter()
            .zip(&beta)
            .enumerate()
            .map(|(i, (&a, &z))| a + scale[i % w] * z)
            .collect();
        let value = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        Ok(self.push(value, Op::Noise { x, lam, beta }, &[x, lam]))
    }

    /// Mean cross-entropy of a softmax over the channel axis, taken at every
    /// `(n, h, w)` position. `labels` lists the target class per position in
    /// `n, h, w` order.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, c, h, w] = self.value(logits).dims4()?;
        let plane = h * w;
        if labels.len() != n * plane {
            return Err(Error::Shape(format!("{} labels for {} positions", labels.len(), n * plane)));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::InvalidParam(format!("label {l} >= {c} classes")));
        }
        let lv = &self.value(logits).data;
        let mut probs = vec![T::zero(); lv.len()];
        let mut loss = 0.0f64;
        for i in 0..n {
            for q in 0..plane {
                let at = |k: usize| (i * c + k) * plane + q;
                let m = (0..c).map(|k| lv[at(k)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for k in 0..c {
                    let e = (lv[at(k)] - m).exp();
                    probs[at(k)] = e;
                    z += e;
                }
                for k in 0..c {
                    probs[at(k)] = probs[at(k)] / z;
                }
                let target = labels[i * plane + q];
                loss -= (lv[at(target)] - m - z.ln()).as_f64();
            }
        }
        let value = Tensor::scalar(T::of(loss / (n * plane) as f64));
        Ok(self.push(
            value,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Softmax probabilities saved by a cross-entropy node, in logits layout.
    pub fn probabilities(&self, loss: Var) -> Option<&[T]> {
        match &self.nodes[loss.0].op {
            Op::SoftmaxCe { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// `sum_i weights[i] * x[i]`; a scalar probe used by gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::Shape("weighted_sum weights do not match input".into()));
        }
        let s = self.value(x).data.iter().zip(&weights).map(|(&a, &b)| a * b).sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }, &[x]))
    }

    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let [n, cin, h, wd] = xv.dims4().expect("validated in forward");
                let [cout, ..] = wv.dims4().expect("validated in forward");
                let [_, _, ho, wo] = node.value.dims4().expect("conv output is 4-d");
                let p = ho * wo;
                if self.wants(*b) {
                    add_into(&mut grads[b.0], cout, |gb| {
                        for i in 0..n {
                            for c in 0..cout {
                                let s: T = g[(i * cout + c) * p..(i * cout + c + 1) * p].iter().copied().sum();
                                gb[c] += s;
                            }
                        }
                    });
                }
                let need_w = self.wants(*w);
                let need_x = self.wants(*x);
                if !need_w && !need_x {
                    return;
                }
                let mut gw_acc = need_w.then(|| grads[w.0].take().unwrap_or_else(|| vec![T::zero(); wv.len()]));
                let mut gx_acc = need_x.then(|| grads[x.0].take().unwrap_or_else(|| vec![T::zero(); xv.len()]));
                let layout = Layout::new(cin, cout, h, wd, ho, wo, *geom);
                let in_size = cin * h * wd;
                for i in 0..n {
                    layout.backward(
                        &xv.data[i * in_size..(i + 1) * in_size],
                        &wv.data,
                        &g[i * cout * p..(i + 1) * cout * p],
                        gw_acc.as_deref_mut(),
                        gx_acc.as_mut().map(|gx| &mut gx[i * in_size..(i + 1) * in_size]),
                    );
                }
                if let Some(gw) = gw_acc {
                    grads[w.0] = Some(gw);
                }
                if let Some(gx) = gx_acc {
                    grads[x.0] = Some(gx);
                }
            }
            Op::Relu { x } => {
                if self.wants(*x) {
                    let xv = &self.value(*x).data;
                    add_into(&mut grads[x.0], xv.len(), |gx| {
                        // a select rather than a branch: the sign pattern is random
                        for ((d, &a), &gi) in gx.iter_mut().zip(xv).zip(g) {
                            *d += if a > T::zero() { gi } else { T::zero() };
                        }
                    });
                }
            }
            Op::Concat { parts } => {
                let [n, total_c, h, w] = node.value.dims4().expect("concat output is 4-d");
                let plane = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).shape[1];
                    if self.wants(p) {
                        add_into(&mut grads[p.0], n * c * plane, |gp| {
                            for i in 0..n {
                                let src = &g[(i * total_c + offset) * plane..(i * total_c + offset + c) * plane];
                                for (d, s) in gp[i * c * plane..(i + 1) * c * plane].iter_mut().zip(src) {
                                    *d += *s;
                                }
                            }
                        });
                    }
                    offset += c;
                }
            }
            Op::AvgPool2 { x } => {
                if self.wants(*x) {
                    let [n, c, h, w] = self.value(*x).dims4().expect("validated in forward");
                    let (ho, wo) = (h / 2, w / 2);
                    let quarter = T::of(0.25);
                    add_into(&mut grads[x.0], n * c * h * w, |gx| {
                        for nc in 0..n * c {
                            let dst = &mut gx[nc * h * w..(nc + 1) * h * w];
                            let src = &g[nc * ho * wo..(nc + 1) * ho * wo];
                            for i in 0..ho {
                                for j in 0..wo {
                                    let v = src[i * wo + j] * quarter;
                                    dst[2 * i * w + 2 * j] += v;
                                    dst[2 * i * w + 2 * j + 1] += v;
                                    dst[(2 * i + 1) * w + 2 * j] += v;
                                    dst[(2 * i + 1) * w + 2 * j + 1] += v;
                                }
                            }
                        }
                    });
                }
            }
            Op::GlobalAvgPool { x } => {
                if self.wants(*x) {
                    let [n, c, h, w] = self.value(*x).dims4().expect("validated in forward");
                    let inv = T::one() / T::of((h * w) as f64);
                    add_into(&mut grads[x.0], n * c * h * w, |gx| {
                        for (nc, plane) in gx.chunks_exact_mut(h * w).enumerate() {
                            let v = g[nc] * inv;
                            plane.iter_mut().for_each(|d| *d += v);
                        }
                    });
                }
            }
            Op::MaxOverWidth { x, argmax } => {
                if self.wants(*x) {
                    let len = self.value(*x).len();
                    add_into(&mut grads[x.0], len, |gx| {
                        for (&src, &gi) in argmax.iter().zip(g) {
                            gx[src] += gi;
                        }
                    });
                }
            }
            Op::BandsToChannels { x } => {
                if self.wants(*x) {
                    let [n, _, h, w] = self.value(*x).dims4().expect("validated in forward");
                    add_into(&mut grads[x.0], n * h * w, |gx| {
                        for i in 0..n {
                            for t in 0..h {
                                for f in 0..w {
                                    gx[(i * h + t) * w + f] += g[(i * w + f) * h + t];
                                }
                            }
                        }
                    });
                }
            }
            Op::Noise { x, lam, beta } => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], g.len(), |gx| {
                        gx.iter_mut().zip(g).for_each(|(d, s)| *d += *s);
                    });
                }
                if self.wants(*lam) {
                    let lv = &self.value(*lam).data;
                    let w = lv.len();
                    add_into(&mut grads[lam.0], w, |gl| {
                        let mut acc = vec![T::zero(); w];
                        for (i, (&gi, &z)) in g.iter().zip(beta).enumerate() {
                            acc[i % w] += gi * z;
                        }
                        for ((d, a), &l) in gl.iter_mut().zip(acc).zip(lv) {
                            *d -= (-l).exp() * a;
                        }
                    });
                }
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                if self.wants(*logits) {
                    let [n, c, h, w] = self.value(*logits).dims4().expect("validated in forward");
                    let plane = h * w;
                    let scale = g[0] / T::of((n * plane) as f64);
                    add_into(&mut grads[logits.0], probs.len(), |gl| {
                        for i in 0..n {
                            for q in 0..plane {
                                let target = labels[i * plane + q];
                                for k in 0..c {
                                    let at = (i * c + k) * plane + q;
                                    let onehot = if k == target { T::one() } else { T::zero() };
                                    gl[at] += (probs[at] - onehot) * scale;
                                }
                            }
                        }
                    });
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.wants(*x) {
                    add_into(&mut grads[x.0], weights.len(), |gx| {
                        for (d, &wt) in gx.iter_mut().zip(weights) {
                            *d += wt * g[0];
                        }
                    });
                }
            }
        }
    }
}
