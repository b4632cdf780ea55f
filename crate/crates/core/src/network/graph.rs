//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! valid topological order. Only nodes that depend on a trainable parameter
//! receive gradients; frozen parameters and constants are never touched.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(String),
    Frozen,
    /// Stride-1 convolution with `K / 2` zero padding; weight `[Co, Ci, K]`.
    Conv { x: Var, w: Var, b: Var },
    /// Non-overlapping strided convolution (kernel == stride); weight `[Co, Ci, F]`.
    Down { x: Var, w: Var, b: Var },
    /// Non-overlapping transposed convolution (kernel == stride); weight `[Ci, Co, F]`.
    Up { x: Var, w: Var, b: Var },
    /// `x * (1 + gamma) + beta` per channel; `gb = [gamma; beta]`.
    Film { x: Var, gb: Var },
    Linear { x: Var, w: Var, b: Var },
    Silu(Var),
    Lincomb { a: Var, ca: f64, b: Var, cb: f64 },
    Scale(Var, f64),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Parameter gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: String, grad: Tensor) {
        self.grads.insert(name, grad);
    }

    /// `self += scale * other`, adding any missing keys.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => axpy(scale, g.data(), acc.data_mut()),
                None => {
                    self.grads.insert(name.clone(), g.scale(scale));
                }
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.values().all(Tensor::is_finite)
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x · sigmoid(x)`.
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [a, b] => Ok((*a, *b)),
        s => Err(Error::Contract(format!("{what}: expected rank 2, got {s:?}"))),
    }
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [a, b, c] => Ok((*a, *b, *c)),
        s => Err(Error::Contract(format!("{what}: expected rank 3, got {s:?}"))),
    }
}

fn check_len(t: &Tensor, n: usize, what: &str) -> Result<()> {
    if t.len() != n {
        return Err(Error::Contract(format!(
            "{what}: expected {n} values, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

/// Valid output range `[t0, t1)` for a tap at `offset` when input and output
/// both have length `len`.
#[inline]
fn tap_range(offset: isize, len: usize) -> Option<(usize, usize)> {
    let t0 = (-offset).max(0) as usize;
    let t1 = (len as isize - offset).clamp(0, len as isize) as usize;
    if t0 >= t1 {
        return None;
    }
    Some((t0, t1))
}

fn conv_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ci, len) = dims2(x, "conv input")?;
    let (co, wci, k) = dims3(w, "conv weight")?;
    if wci != ci || k % 2 == 0 {
        return Err(Error::Contract(format!(
            "conv weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    check_len(b, co, "conv bias")?;
    let pad = (k / 2) as isize;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; co * len];
    for o in 0..co {
        let row = &mut out[o * len..(o + 1) * len];
        row.fill(b.data()[o]);
        for i in 0..ci {
            let xr = &xd[i * len..(i + 1) * len];
            for tap in 0..k {
                let off = tap as isize - pad;
                let Some((t0, t1)) = tap_range(off, len) else { continue };
                let wv = wd[(o * ci + i) * k + tap];
                let s0 = (t0 as isize + off) as usize;
                axpy(wv, &xr[s0..s0 + (t1 - t0)], &mut row[t0..t1]);
            }
        }
    }
    Tensor::new(vec![co, len], out)
}

fn conv_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    need_x: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (ci, len) = (x.shape()[0], x.shape()[1]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut gx = if need_x { vec![0.0; ci * len] } else { Vec::new() };
    let mut gw = vec![0.0; co * ci * k];
    let mut gb = vec![0.0; co];
    for o in 0..co {
        let gr = &gd[o * len..(o + 1) * len];
        gb[o] = gr.iter().sum();
        for i in 0..ci {
            let xr = &xd[i * len..(i + 1) * len];
            for tap in 0..k {
                let off = tap as isize - pad;
                let Some((t0, t1)) = tap_range(off, len) else { continue };
                let s0 = (t0 as isize + off) as usize;
                let n = t1 - t0;
                let widx = (o * ci + i) * k + tap;
                gw[widx] += dot(&gr[t0..t1], &xr[s0..s0 + n]);
                if need_x {
                    let gxr = &mut gx[i * len..(i + 1) * len];
                    axpy(wd[widx], &gr[t0..t1], &mut gxr[s0..s0 + n]);
                }
            }
        }
    }
    let gx = need_x.then(|| Tensor::new(vec![ci, len], gx).expect("shape"));
    (
        gx,
        Tensor::new(vec![co, ci, k], gw).expect("shape"),
        Tensor::new(vec![co], gb).expect("shape"),
    )
}

/// `[C, L*F]` -> phase-major `[C, F, L]`.
fn deinterleave(data: &[f64], channels: usize, factor: usize) -> Vec<f64> {
    let long = data.len() / channels;
    let short = long / factor;
    let mut out = vec![0.0; data.len()];
    for c in 0..channels {
        for t in 0..short {
            for p in 0..factor {
                out[(c * factor + p) * short + t] = data[c * long + t * factor + p];
            }
        }
    }
    out
}

/// Phase-major `[C, F, L]` -> `[C, L*F]`.
fn interleave(data: &[f64], channels: usize, factor: usize) -> Vec<f64> {
    let long = data.len() / channels;
    let short = long / factor;
    let mut out = vec![0.0; data.len()];
    for c in 0..channels {
        for p in 0..factor {
            for t in 0..short {
                out[c * long + t * factor + p] = data[(c * factor + p) * short + t];
            }
        }
    }
    out
}

fn down_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ci, len) = dims2(x, "downsample input")?;
    let (co, wci, f) = dims3(w, "downsample weight")?;
    if wci != ci || f == 0 || len % f != 0 {
        return Err(Error::Contract(format!(
            "downsample weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    check_len(b, co, "downsample bias")?;
    let short = len / f;
    let xp = deinterleave(x.data(), ci, f);
    let wd = w.data();
    let mut out = vec![0.0; co * short];
    for o in 0..co {
        let row = &mut out[o * short..(o + 1) * short];
        row.fill(b.data()[o]);
        for i in 0..ci {
            for p in 0..f {
                let src = &xp[(i * f + p) * short..(i * f + p + 1) * short];
                axpy(wd[(o * ci + i) * f + p], src, row);
            }
        }
    }
    Tensor::new(vec![co, short], out)
}

fn down_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    need_x: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (ci, len) = (x.shape()[0], x.shape()[1]);
    let (co, f) = (w.shape()[0], w.shape()[2]);
    let short = len / f;
    let xp = deinterleave(x.data(), ci, f);
    let (wd, gd) = (w.data(), g.data());
    let mut gxp = if need_x { vec![0.0; ci * len] } else { Vec::new() };
    let mut gw = vec![0.0; co * ci * f];
    let mut gb = vec![0.0; co];
    for o in 0..co {
        let gr = &gd[o * short..(o + 1) * short];
        gb[o] = gr.iter().sum();
        for i in 0..ci {
            for p in 0..f {
                let r = (i * f + p) * short..(i * f + p + 1) * short;
                let widx = (o * ci + i) * f + p;
                gw[widx] = dot(gr, &xp[r.clone()]);
                if need_x {
                    axpy(wd[widx], gr, &mut gxp[r]);
                }
            }
        }
    }
    let gx = need_x.then(|| Tensor::new(vec![ci, len], interleave(&gxp, ci, f)).expect("shape"));
    (
        gx,
        Tensor::new(vec![co, ci, f], gw).expect("shape"),
        Tensor::new(vec![co], gb).expect("shape"),
    )
}

fn up_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ci, short) = dims2(x, "upsample input")?;
    let (wci, co, f) = dims3(w, "upsample weight")?;
    if wci != ci || f == 0 {
        return Err(Error::Contract(format!(
            "upsample weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    check_len(b, co, "upsample bias")?;
    let (xd, wd) = (x.data(), w.data());
    let mut outp = vec![0.0; co * f * short];
    for o in 0..co {
        for p in 0..f {
            let dst = &mut outp[(o * f + p) * short..(o * f + p + 1) * short];
            dst.fill(b.data()[o]);
            for i in 0..ci {
                axpy(wd[(i * co + o) * f + p], &xd[i * short..(i + 1) * short], dst);
            }
        }
    }
    Tensor::new(vec![co, short * f], interleave(&outp, co, f))
}

fn up_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    need_x: bool,
) -> (Option<Tensor>, Tensor, Tensor) {
    let (ci, short) = (x.shape()[0], x.shape()[1]);
    let (co, f) = (w.shape()[1], w.shape()[2]);
    let gp = deinterleave(g.data(), co, f);
    let (xd, wd) = (x.data(), w.data());
    let mut gx = if need_x { vec![0.0; ci * short] } else { Vec::new() };
    let mut gw = vec![0.0; ci * co * f];
    let mut gb = vec![0.0; co];
    for o in 0..co {
        for p in 0..f {
            let gr = &gp[(o * f + p) * short..(o * f + p + 1) * short];
            gb[o] += gr.iter().sum::<f64>();
            for i in 0..ci {
                let widx = (i * co + o) * f + p;
                gw[widx] = dot(gr, &xd[i * short..(i + 1) * short]);
                if need_x {
                    axpy(wd[widx], gr, &mut gx[i * short..(i + 1) * short]);
                }
            }
        }
    }
    let gx = need_x.then(|| Tensor::new(vec![ci, short], gx).expect("shape"));
    (
        gx,
        Tensor::new(vec![ci, co, f], gw).expect("shape"),
        Tensor::new(vec![co], gb).expect("shape"),
    )
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// A named parameter; `trainable = false` binds it frozen.
    pub fn param(&mut self, name: &str, value: Tensor, trainable: bool) -> Var {
        let op = if trainable {
            Op::Param(name.to_string())
        } else {
            Op::Frozen
        };
        self.push(value, op, trainable)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = conv_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Conv { x, w, b }, rg))
    }

    pub fn down(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = down_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Down { x, w, b }, rg))
    }

    pub fn up(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = up_forward(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Up { x, w, b }, rg))
    }

    pub fn film(&mut self, x: Var, gb: Var) -> Result<Var> {
        let (c, len) = dims2(self.value(x), "film input")?;
        check_len(self.value(gb), 2 * c, "film modulation")?;
        let g = self.value(gb).data();
        let mut out = self.value(x).data().to_vec();
        for ch in 0..c {
            let (scale, shift) = (1.0 + g[ch], g[c + ch]);
            for v in &mut out[ch * len..(ch + 1) * len] {
                *v = *v * scale + shift;
            }
        }
        let out = Tensor::new(vec![c, len], out)?;
        let rg = self.rg(&[x, gb]);
        Ok(self.push(out, Op::Film { x, gb }, rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (rows, cols) = dims2(self.value(w), "linear weight")?;
        check_len(self.value(x), cols, "linear input")?;
        check_len(self.value(b), rows, "linear bias")?;
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let out: Vec<f64> = (0..rows)
            .map(|r| bd[r] + dot(&wd[r * cols..(r + 1) * cols], xd))
            .collect();
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::vector(out), Op::Linear { x, w, b }, rg))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(silu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    /// `ca * a + cb * b`.
    pub fn lincomb(&mut self, a: Var, ca: f64, b: Var, cb: f64) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |u, v| ca * u + cb * v)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Lincomb { a, ca, b, cb }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lincomb(a, 1.0, b, 1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lincomb(a, 1.0, b, -1.0)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).scale(c);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Scalar `‖x‖²`.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum_sq());
        let rg = self.rg(&[x]);
        self.push(out, Op::SumSquares(x), rg)
    }

    /// Gradients of the scalar `loss` with respect to every trainable
    /// parameter on the tape. Unused trainable parameters get exact zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::scalar(1.0));

        let mut out = Gradients::default();
        for node in &self.nodes {
            if let Op::Param(name) = &node.op {
                out.grads
                    .insert(name.clone(), Tensor::zeros(node.value.shape()));
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Constant | Op::Frozen => {}
                Op::Param(name) => {
                    let acc = out.grads.get_mut(name).expect("registered");
                    axpy(1.0, g.data(), acc.data_mut());
                }
                Op::Conv { x, w, b } => {
                    let need_x = self.requires_grad(*x);
                    let (gx, gw, gb) = conv_backward(self.value(*x), self.value(*w), &g, need_x);
                    self.send(&mut grads, *x, gx);
                    self.send(&mut grads, *w, Some(gw));
                    self.send(&mut grads, *b, Some(gb));
                }
                Op::Down { x, w, b } => {
                    let need_x = self.requires_grad(*x);
                    let (gx, gw, gb) = down_backward(self.value(*x), self.value(*w), &g, need_x);
                    self.send(&mut grads, *x, gx);
                    self.send(&mut grads, *w, Some(gw));
                    self.send(&mut grads, *b, Some(gb));
                }
                Op::Up { x, w, b } => {
                    let need_x = self.requires_grad(*x);
                    let (gx, gw, gb) = up_backward(self.value(*x), self.value(*w), &g, need_x);
                    self.send(&mut grads, *x, gx);
                    self.send(&mut grads, *w, Some(gw));
                    self.send(&mut grads, *b, Some(gb));
                }
                Op::Film { x, gb } => {
                    let xv = self.value(*x);
                    let (c, len) = (xv.shape()[0], xv.shape()[1]);
                    let mv = self.value(*gb).data();
                    let (xd, gd) = (xv.data(), g.data());
                    let mut gx = vec![0.0; c * len];
                    let mut gm = vec![0.0; 2 * c];
                    for ch in 0..c {
                        let r = ch * len..(ch + 1) * len;
                        gm[ch] = dot(&gd[r.clone()], &xd[r.clone()]);
                        gm[c + ch] = gd[r.clone()].iter().sum();
                        let scale = 1.0 + mv[ch];
                        for (o, &gv) in gx[r.clone()].iter_mut().zip(&gd[r]) {
                            *o = gv * scale;
                        }
                    }
                    self.send(&mut grads, *x, Some(Tensor::new(vec![c, len], gx)?));
                    self.send(&mut grads, *gb, Some(Tensor::vector(gm)));
                }
                Op::Linear { x, w, b } => {
                    let wv = self.value(*w);
                    let (rows, cols) = (wv.shape()[0], wv.shape()[1]);
                    let (xd, wd, gd) = (self.value(*x).data(), wv.data(), g.data());
                    if self.requires_grad(*x) {
                        let mut gx = vec![0.0; cols];
                        for r in 0..rows {
                            axpy(gd[r], &wd[r * cols..(r + 1) * cols], &mut gx);
                        }
                        let gx = Tensor::new(self.value(*x).shape().to_vec(), gx)?;
                        self.send(&mut grads, *x, Some(gx));
                    }
                    let mut gw = vec![0.0; rows * cols];
                    for r in 0..rows {
                        axpy(gd[r], xd, &mut gw[r * cols..(r + 1) * cols]);
                    }
                    self.send(&mut grads, *w, Some(Tensor::new(vec![rows, cols], gw)?));
                    let gb = Tensor::new(self.value(*b).shape().to_vec(), gd.to_vec())?;
                    self.send(&mut grads, *b, Some(gb));
                }
                Op::Silu(x) => {
                    let gx = self.value(*x).zip_map(&g, |xv, gv| gv * silu_grad(xv))?;
                    self.send(&mut grads, *x, Some(gx));
                }
                Op::Lincomb { a, ca, b, cb } => {
                    if a == b {
                        self.send(&mut grads, *a, Some(g.scale(ca + cb)));
                    } else {
                        self.send(&mut grads, *a, Some(g.scale(*ca)));
                        self.send(&mut grads, *b, Some(g.scale(*cb)));
                    }
                }
                Op::Scale(x, c) => {
                    self.send(&mut grads, *x, Some(g.scale(*c)));
                }
                Op::SumSquares(x) => {
                    let gs = g.data()[0];
                    self.send(&mut grads, *x, Some(self.value(*x).scale(2.0 * gs)));
                }
            }
        }
        Ok(out)
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Option<Tensor>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        let Some(g) = g else { return };
        match &mut grads[to.0] {
            Some(acc) => axpy(1.0, g.data(), acc.data_mut()),
            slot @ None => *slot = Some(g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Builds `Σ proj ⊙ f(inputs)` and compares every input gradient against
    /// central differences.
    fn check_op<F>(inputs: Vec<Tensor>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let eval = |vals: &[Tensor], proj: Option<&Tensor>| -> (f64, Gradients, Tensor) {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals
                .iter()
                .enumerate()
                .map(|(i, t)| g.param(&format!("p{i}"), t.clone(), true))
                .collect();
            let out = build(&mut g, &vars);
            let out_val = g.value(out).clone();
            let proj = proj.cloned().unwrap_or_else(|| out_val.map(|_| 0.0));
            let pv = g.constant(proj.clone());
            // Σ proj·out = (‖out + proj‖² - ‖out‖² - ‖proj‖²) / 2, built from tape ops.
            let sum = g.add(out, pv).unwrap();
            let s1 = g.sum_squares(sum);
            let s2 = g.sum_squares(out);
            let d = g.sub(s1, s2).unwrap();
            let loss = g.scale(d, 0.5);
            let value = g.value(loss).data()[0] - 0.5 * proj.sum_sq();
            let grads = g.backward(loss).unwrap();
            (value, grads, out_val)
        };
        let (_, _, out0) = eval(&inputs, None);
        let proj = rand_tensor(&mut rng, out0.shape());
        let (_, grads, _) = eval(&inputs, Some(&proj));
        let h = 1e-5;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.get(&format!("p{i}")).unwrap();
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[j] -= h;
                let fd = (eval(&plus, Some(&proj)).0 - eval(&minus, Some(&proj)).0) / (2.0 * h);
                let a = analytic.data()[j];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
                assert!(err < 1e-6, "input {i} elem {j}: analytic {a} fd {fd}");
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 7]);
        let w = rand_tensor(&mut rng, &[3, 2, 5]);
        let b = rand_tensor(&mut rng, &[3]);
        check_op(vec![x, w, b], |g, v| g.conv(v[0], v[1], v[2]).unwrap());
    }

    #[test]
    fn pointwise_conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let w = rand_tensor(&mut rng, &[2, 3, 1]);
        let b = rand_tensor(&mut rng, &[2]);
        check_op(vec![x, w, b], |g, v| g.conv(v[0], v[1], v[2]).unwrap());
    }

    #[test]
    fn downsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&mut rng, &[2, 12]);
        let w = rand_tensor(&mut rng, &[3, 2, 4]);
        let b = rand_tensor(&mut rng, &[3]);
        check_op(vec![x, w, b], |g, v| g.down(v[0], v[1], v[2]).unwrap());
    }

    #[test]
    fn upsample_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, &[3, 3]);
        let w = rand_tensor(&mut rng, &[3, 2, 4]);
        let b = rand_tensor(&mut rng, &[2]);
        check_op(vec![x, w, b], |g, v| g.up(v[0], v[1], v[2]).unwrap());
    }

    #[test]
    fn film_linear_silu_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[2, 5]);
        let gb = rand_tensor(&mut rng, &[4]);
        check_op(vec![x, gb], |g, v| g.film(v[0], v[1]).unwrap());

        let x = rand_tensor(&mut rng, &[3]);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let b = rand_tensor(&mut rng, &[4]);
        check_op(vec![x, w, b], |g, v| g.linear(v[0], v[1], v[2]).unwrap());

        let x = rand_tensor(&mut rng, &[6]).scale(3.0);
        check_op(vec![x], |g, v| g.silu(v[0]));
    }

    #[test]
    fn lincomb_with_shared_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&mut rng, &[5]);
        let b = rand_tensor(&mut rng, &[5]);
        check_op(vec![a, b], |g, v| {
            let s = g.lincomb(v[0], 0.3, v[1], -1.7).unwrap();
            let t = g.lincomb(s, 2.0, s, 0.5).unwrap();
            g.add(t, v[0]).unwrap()
        });
    }

    #[test]
    fn silu_derivative_matches_finite_differences() {
        for &x in &[-3.0, 0.0, 3.0] {
            let h = 1e-5;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() <= 1e-8, "x = {x}");
        }
    }

    #[test]
    fn single_weight_chain_rule() {
        let (w, x) = (0.7, 1.3);
        let mut g = Graph::new();
        let wv = g.param("w", Tensor::vector(vec![w]), true);
        let xv = g.constant(Tensor::vector(vec![x]));
        let zero = g.constant(Tensor::vector(vec![0.0]));
        let bias = g.constant(Tensor::vector(vec![0.0]));
        // Linear with a 1x1 weight: output = w·x.
        let wm = g.param("w2", Tensor::new(vec![1, 1], vec![w]).unwrap(), true);
        let out = g.linear(xv, wm, bias).unwrap();
        let out = g.add(out, zero).unwrap();
        let ss = g.sum_squares(out);
        let loss = g.scale(ss, 0.5);
        let grads = g.backward(loss).unwrap();
        assert!((grads.get("w2").unwrap().data()[0] - w * x * x).abs() < 1e-15);
        // Registered but unused.
        assert_eq!(grads.get("w").unwrap().data(), &[0.0]);
        let _ = wv;
    }

    #[test]
    fn frozen_and_constant_nodes_get_no_gradient() {
        let mut g = Graph::new();
        let f = g.param("frozen", Tensor::vector(vec![1.0, 2.0]), false);
        let p = g.param("live", Tensor::vector(vec![0.5, -0.5]), true);
        let s = g.add(f, p).unwrap();
        let loss = g.sum_squares(s);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("frozen").is_none());
        assert_eq!(grads.get("live").unwrap().data(), &[3.0, 3.0]);
        assert!(!g.requires_grad(f));
    }

    #[test]
    fn backward_needs_forward() {
        let g = Graph::new();
        assert!(matches!(g.backward(Var(0)), Err(Error::State(_))));
        let mut g = Graph::new();
        let v = g.param("v", Tensor::vector(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(v), Err(Error::State(_))));
    }

    #[test]
    fn shape_contracts() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 8]));
        let w = g.constant(Tensor::zeros(&[3, 3, 5]));
        let b = g.constant(Tensor::zeros(&[3]));
        assert!(g.conv(x, w, b).is_err());
        let w = g.constant(Tensor::zeros(&[3, 2, 3]));
        let x7 = g.constant(Tensor::zeros(&[2, 7]));
        assert!(g.down(x7, w, b).is_err());
    }
}
