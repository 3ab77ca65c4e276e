use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};
use crate::rng::Rng;

const NORM_EPS: f64 = 1e-5;

/// Activation shape of a single sample, channels × height × width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Shape { c, h, w }
    }

    pub const fn flat(n: usize) -> Self {
        Shape { c: n, h: 1, w: 1 }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Declarative layer description; a [`Net`] resolves shapes and parameter offsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    },
    GroupNorm {
        groups: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool,
    Linear {
        outputs: usize,
    },
    /// `body(x) + shortcut(x)`; an empty shortcut is the identity.
    Residual {
        body: Vec<LayerSpec>,
        shortcut: Vec<LayerSpec>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    in_c: usize,
    out_c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    bias: bool,
}

#[derive(Clone, Debug)]
enum Op {
    Conv(ConvGeom),
    GroupNorm { groups: usize },
    Relu,
    MaxPool { kernel: usize, stride: usize, pad: usize },
    GlobalAvgPool,
    Linear { inputs: usize, outputs: usize },
    Residual { body: Net, shortcut: Net },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    offset: usize,
    n_params: usize,
    input: Shape,
    output: Shape,
}

/// A sequential network whose parameters live in an external flat buffer.
///
/// Parameter offsets are absolute, so several nets built with a shared
/// counter can address disjoint ranges of one buffer.
#[derive(Clone, Debug)]
pub struct Net {
    nodes: Vec<Node>,
    input: Shape,
    output: Shape,
}

/// Saved activations of one sample, needed for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape<T> {
    saved: Vec<Saved<T>>,
}

#[derive(Clone, Debug)]
enum Saved<T> {
    Conv { cols: Vec<T> },
    Norm { xhat: Vec<T>, inv_std: Vec<T> },
    Relu { out: Vec<T> },
    MaxPool { argmax: Vec<u32> },
    Nothing,
    Linear { input: Vec<T> },
    Residual { body: Tape<T>, shortcut: Tape<T> },
}

fn conv_out(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if extent + 2 * pad < kernel || stride == 0 {
        return Err(Error::Shape(format!(
            "kernel {kernel} stride {stride} pad {pad} does not fit extent {extent}"
        )));
    }
    Ok((extent + 2 * pad - kernel) / stride + 1)
}

impl Net {
    /// Resolve `specs` against `input`, allocating parameters from `offset`.
    pub fn build(specs: &[LayerSpec], input: Shape, offset: &mut usize) -> Result<Net> {
        let mut nodes = Vec::with_capacity(specs.len());
        let mut shape = input;
        for spec in specs {
            let start = *offset;
            let (op, out, n_params) = match spec {
                LayerSpec::Conv {
                    out_c,
                    kernel,
                    stride,
                    pad,
                    bias,
                } => {
                    let g = ConvGeom {
                        in_c: shape.c,
                        out_c: *out_c,
                        kernel: *kernel,
                        stride: *stride,
                        pad: *pad,
                        bias: *bias,
                    };
                    let out = Shape::new(
                        *out_c,
                        conv_out(shape.h, *kernel, *stride, *pad)?,
                        conv_out(shape.w, *kernel, *stride, *pad)?,
                    );
                    let n = out_c * shape.c * kernel * kernel + if *bias { *out_c } else { 0 };
                    (Op::Conv(g), out, n)
                }
                LayerSpec::GroupNorm { groups } => {
                    if *groups == 0 || shape.c % groups != 0 {
                        return Err(Error::Shape(format!(
                            "{} channels cannot form {groups} groups",
                            shape.c
                        )));
                    }
                    (Op::GroupNorm { groups: *groups }, shape, 2 * shape.c)
                }
                LayerSpec::Relu => (Op::Relu, shape, 0),
                LayerSpec::MaxPool { kernel, stride, pad } => {
                    let out = Shape::new(
                        shape.c,
                        conv_out(shape.h, *kernel, *stride, *pad)?,
                        conv_out(shape.w, *kernel, *stride, *pad)?,
                    );
                    (
                        Op::MaxPool {
                            kernel: *kernel,
                            stride: *stride,
                            pad: *pad,
                        },
                        out,
                        0,
                    )
                }
                LayerSpec::GlobalAvgPool => (Op::GlobalAvgPool, Shape::flat(shape.c), 0),
                LayerSpec::Linear { outputs } => {
                    let inputs = shape.len();
                    (
                        Op::Linear {
                            inputs,
                            outputs: *outputs,
                        },
                        Shape::flat(*outputs),
                        outputs * inputs + outputs,
                    )
                }
                LayerSpec::Residual { body, shortcut } => {
                    let body = Net::build(body, shape, offset)?;
                    let shortcut = Net::build(shortcut, shape, offset)?;
                    if body.output != shortcut.output {
                        return Err(Error::Shape(format!(
                            "residual branches disagree: {:?} vs {:?}",
                            body.output, shortcut.output
                        )));
                    }
                    let out = body.output;
                    let n = *offset - start;
                    nodes.push(Node {
                        op: Op::Residual { body, shortcut },
                        offset: start,
                        n_params: n,
                        input: shape,
                        output: out,
                    });
                    shape = out;
                    continue;
                }
            };
            *offset += n_params;
            nodes.push(Node {
                op,
                offset: start,
                n_params,
                input: shape,
                output: out,
            });
            shape = out;
        }
        Ok(Net {
            nodes,
            input,
            output: shape,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn output_shape(&self) -> Shape {
        self.output
    }

    /// Parameters owned by this net (including nested residual branches).
    pub fn param_count(&self) -> usize {
        self.nodes.iter().map(|n| n.n_params).sum()
    }

    /// Multiply-accumulates of one forward pass, for budgeting.
    pub fn macs(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::Conv(g) => n.output.h * n.output.w * g.out_c * g.in_c * g.kernel * g.kernel,
                Op::Linear { inputs, outputs } => inputs * outputs,
                Op::Residual { body, shortcut } => body.macs() + shortcut.macs(),
                _ => 0,
            })
            .sum()
    }

    /// Kaiming-normal convolutions, uniform fan-in linears, unit-gain norms.
    pub fn init<T: Scalar>(&self, params: &mut [T], rng: &mut Rng) {
        for node in &self.nodes {
            let p = &mut params[node.offset..node.offset + node.n_params];
            match &node.op {
                Op::Conv(g) => {
                    let fan_in = g.in_c * g.kernel * g.kernel;
                    let std = (2.0 / fan_in as f64).sqrt();
                    let n_w = g.out_c * fan_in;
                    for v in &mut p[..n_w] {
                        let z: f64 = StandardNormal.sample(rng);
                        *v = T::of(z * std);
                    }
                    for v in &mut p[n_w..] {
                        *v = T::zero();
                    }
                }
                Op::GroupNorm { .. } => {
                    let c = node.input.c;
                    p[..c].iter_mut().for_each(|v| *v = T::one());
                    p[c..].iter_mut().for_each(|v| *v = T::zero());
                }
                Op::Linear { inputs, .. } => {
                    let bound = 1.0 / (*inputs as f64).sqrt();
                    for v in p.iter_mut() {
                        *v = T::of(rng.random_range(-bound..bound));
                    }
                }
                Op::Residual { body, shortcut } => {
                    body.init(params, rng);
                    shortcut.init(params, rng);
                }
                Op::Relu | Op::MaxPool { .. } | Op::GlobalAvgPool => {}
            }
        }
    }

    /// Forward one sample. When `tape` is given, activations needed by
    /// [`Net::backward`] are recorded into it.
    pub fn forward<T: Scalar>(&self, params: &[T], x: &[T], mut tape: Option<&mut Tape<T>>) -> Vec<T> {
        debug_assert_eq!(x.len(), self.input.len());
        if let Some(t) = tape.as_deref_mut() {
            t.saved.clear();
        }
        let mut cur = x.to_vec();
        for node in &self.nodes {
            let p = &params[node.offset..node.offset + node.n_params];
            let (out, saved) = match &node.op {
                Op::Conv(g) => conv_forward(g, node.input, node.output, p, &cur, tape.is_some()),
                Op::GroupNorm { groups } => norm_forward(*groups, node.input, p, &cur, tape.is_some()),
                Op::Relu => {
                    let out: Vec<T> = cur.iter().map(|&v| v.max(T::zero())).collect();
                    let saved = if tape.is_some() {
                        Saved::Relu { out: out.clone() }
                    } else {
                        Saved::Nothing
                    };
                    (out, saved)
                }
                Op::MaxPool { kernel, stride, pad } => {
                    maxpool_forward(*kernel, *stride, *pad, node.input, node.output, &cur, tape.is_some())
                }
                Op::GlobalAvgPool => {
                    let hw = node.input.h * node.input.w;
                    let inv = T::of(1.0 / hw as f64);
                    let out = cur.chunks(hw).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
                    (out, Saved::Nothing)
                }
                Op::Linear { inputs, outputs } => {
                    let (w, b) = p.split_at(inputs * outputs);
                    let mut out = b.to_vec();
                    T::gemm(*outputs, *inputs, 1, T::one(), w, *inputs, 1, &cur, 1, 1, T::one(), &mut out, 1, 1);
                    let saved = if tape.is_some() {
                        Saved::Linear {
                            input: std::mem::take(&mut cur),
                        }
                    } else {
                        Saved::Nothing
                    };
                    (out, saved)
                }
                Op::Residual { body, shortcut } => {
                    let record = tape.is_some();
                    let mut tb = Tape::new();
                    let mut ts = Tape::new();
                    let mut out = body.forward(params, &cur, record.then_some(&mut tb));
                    let skip = if shortcut.nodes.is_empty() {
                        cur
                    } else {
                        shortcut.forward(params, &cur, record.then_some(&mut ts))
                    };
                    out.iter_mut().zip(&skip).for_each(|(o, s)| *o = *o + *s);
                    (
                        out,
                        Saved::Residual {
                            body: tb,
                            shortcut: ts,
                        },
                    )
                }
            };
            if let Some(t) = tape.as_deref_mut() {
                t.saved.push(saved);
            }
            cur = out;
        }
        cur
    }

    /// Backward one sample: accumulates parameter gradients into `grads`
    /// and returns the input gradient when `want_input_grad` is set.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        tape: &Tape<T>,
        grad_out: &[T],
        grads: &mut [T],
        want_input_grad: bool,
    ) -> Option<Vec<T>> {
        assert_eq!(tape.saved.len(), self.nodes.len(), "tape does not belong to this net");
        let mut g = grad_out.to_vec();
        for (i, node) in self.nodes.iter().enumerate().rev() {
            let need_dx = want_input_grad || i > 0;
            let range = node.offset..node.offset + node.n_params;
            let saved = &tape.saved[i];
            g = match (&node.op, saved) {
                (Op::Conv(geom), Saved::Conv { cols }) => conv_backward(
                    geom,
                    node.input,
                    node.output,
                    &params[range.clone()],
                    cols,
                    &g,
                    &mut grads[range],
                    need_dx,
                ),
                (Op::GroupNorm { groups }, Saved::Norm { xhat, inv_std }) => norm_backward(
                    *groups,
                    node.input,
                    &params[range.clone()],
                    xhat,
                    inv_std,
                    &g,
                    &mut grads[range],
                ),
                (Op::Relu, Saved::Relu { out }) => g
                    .iter()
                    .zip(out)
                    .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
                    .collect(),
                (Op::MaxPool { .. }, Saved::MaxPool { argmax }) => {
                    let mut dx = vec![T::zero(); node.input.len()];
                    for (&d, &src) in g.iter().zip(argmax) {
                        dx[src as usize] = dx[src as usize] + d;
                    }
                    dx
                }
                (Op::GlobalAvgPool, _) => {
                    let hw = node.input.h * node.input.w;
                    let inv = T::of(1.0 / hw as f64);
                    g.iter().flat_map(|&d| std::iter::repeat_n(d * inv, hw)).collect()
                }
                (Op::Linear { inputs, outputs }, Saved::Linear { input }) => {
                    let (gw, gb) = grads[range.clone()].split_at_mut(inputs * outputs);
                    // dW += g ⊗ x
                    T::gemm(*outputs, 1, *inputs, T::one(), &g, 1, 1, input, 1, 1, T::one(), gw, *inputs, 1);
                    gb.iter_mut().zip(&g).for_each(|(b, &d)| *b = *b + d);
                    if need_dx {
                        let w = &params[node.offset..node.offset + inputs * outputs];
                        let mut dx = vec![T::zero(); *inputs];
                        T::gemm(*inputs, *outputs, 1, T::one(), w, 1, *inputs, &g, 1, 1, T::zero(), &mut dx, 1, 1);
                        dx
                    } else {
                        Vec::new()
                    }
                }
                (Op::Residual { body, shortcut }, Saved::Residual { body: tb, shortcut: ts }) => {
                    let mut dx = body
                        .backward(params, tb, &g, grads, need_dx)
                        .unwrap_or_default();
                    let dskip = if shortcut.nodes.is_empty() {
                        need_dx.then_some(g)
                    } else {
                        shortcut.backward(params, ts, &g, grads, need_dx)
                    };
                    if let Some(ds) = dskip {
                        dx.iter_mut().zip(&ds).for_each(|(a, &b)| *a = *a + b);
                    }
                    dx
                }
                _ => unreachable!("tape entry does not match layer"),
            };
            if !need_dx {
                return None;
            }
        }
        Some(g)
    }
}

impl<T> Tape<T> {
    pub fn new() -> Self {
        Tape { saved: Vec::new() }
    }
}

impl<T> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_forward<T: Scalar>(g: &ConvGeom, input: Shape, output: Shape, p: &[T], x: &[T], record: bool) -> (Vec<T>, Saved<T>) {
    let k = g.kernel;
    let kk = g.in_c * k * k;
    let hw = output.h * output.w;
    let pointwise = k == 1 && g.stride == 1 && g.pad == 0;
    let cols = if pointwise { x.to_vec() } else { im2col(g, input, output, x) };
    let (w, b) = p.split_at(g.out_c * kk);
    let mut out = vec![T::zero(); g.out_c * hw];
    if g.bias {
        for (co, chunk) in out.chunks_mut(hw).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[co]);
        }
    }
    let beta = if g.bias { T::one() } else { T::zero() };
    T::gemm(g.out_c, kk, hw, T::one(), w, kk, 1, &cols, hw, 1, beta, &mut out, hw, 1);
    let saved = if record { Saved::Conv { cols } } else { Saved::Nothing };
    (out, saved)
}

fn im2col<T: Scalar>(g: &ConvGeom, input: Shape, output: Shape, x: &[T]) -> Vec<T> {
    let k = g.kernel;
    let hw = output.h * output.w;
    let mut cols = vec![T::zero(); g.in_c * k * k * hw];
    for ci in 0..g.in_c {
        let plane = &x[ci * input.h * input.w..(ci + 1) * input.h * input.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ci * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..output.h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * input.w..][..input.w];
                    let dst = &mut row[oy * output.w..][..output.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < input.w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    input: Shape,
    output: Shape,
    p: &[T],
    cols: &[T],
    dy: &[T],
    grads: &mut [T],
    need_dx: bool,
) -> Vec<T> {
    let k = g.kernel;
    let kk = g.in_c * k * k;
    let hw = output.h * output.w;
    let (gw, gb) = grads.split_at_mut(g.out_c * kk);
    // dW += dY · colsᵀ
    T::gemm(g.out_c, hw, kk, T::one(), dy, hw, 1, cols, 1, hw, T::one(), gw, kk, 1);
    if g.bias {
        for (co, chunk) in dy.chunks(hw).enumerate() {
            gb[co] = gb[co] + chunk.iter().copied().sum::<T>();
        }
    }
    if !need_dx {
        return Vec::new();
    }
    let w = &p[..g.out_c * kk];
    let mut dcols = vec![T::zero(); kk * hw];
    T::gemm(kk, g.out_c, hw, T::one(), w, 1, kk, dy, hw, 1, T::zero(), &mut dcols, hw, 1);
    if k == 1 && g.stride == 1 && g.pad == 0 {
        return dcols;
    }
    let mut dx = vec![T::zero(); input.len()];
    for ci in 0..g.in_c {
        let plane = &mut dx[ci * input.h * input.w..(ci + 1) * input.h * input.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &dcols[((ci * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..output.h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * input.w..][..input.w];
                    for ox in 0..output.w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < input.w as isize {
                            dst[ix as usize] = dst[ix as usize] + row[oy * output.w + ox];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn norm_forward<T: Scalar>(groups: usize, shape: Shape, p: &[T], x: &[T], record: bool) -> (Vec<T>, Saved<T>) {
    let hw = shape.h * shape.w;
    let per_group = shape.c / groups * hw;
    let (gamma, beta) = p.split_at(shape.c);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = if record { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut inv_stds = Vec::with_capacity(groups);
    for gi in 0..groups {
        let xs = &x[gi * per_group..(gi + 1) * per_group];
        let n = per_group as f64;
        let mean = xs.iter().map(|v| v.f64()).sum::<f64>() / n;
        let var = xs.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
        let inv_std = 1.0 / (var + NORM_EPS).sqrt();
        inv_stds.push(T::of(inv_std));
        let (mean_t, inv_t) = (T::of(mean), T::of(inv_std));
        for (j, &v) in xs.iter().enumerate() {
            let idx = gi * per_group + j;
            let c = idx / hw;
            let h = (v - mean_t) * inv_t;
            out[idx] = gamma[c] * h + beta[c];
            if record {
                xhat[idx] = h;
            }
        }
    }
    let saved = if record {
        Saved::Norm {
            xhat,
            inv_std: inv_stds,
        }
    } else {
        Saved::Nothing
    };
    (out, saved)
}

fn norm_backward<T: Scalar>(
    groups: usize,
    shape: Shape,
    p: &[T],
    xhat: &[T],
    inv_std: &[T],
    dy: &[T],
    grads: &mut [T],
) -> Vec<T> {
    let hw = shape.h * shape.w;
    let per_group = shape.c / groups * hw;
    let gamma = &p[..shape.c];
    let (ggamma, gbeta) = grads.split_at_mut(shape.c);
    for (idx, (&d, &h)) in dy.iter().zip(xhat).enumerate() {
        let c = idx / hw;
        ggamma[c] = ggamma[c] + d * h;
        gbeta[c] = gbeta[c] + d;
    }
    let mut dx = vec![T::zero(); dy.len()];
    let n = T::of(per_group as f64);
    for gi in 0..groups {
        let range = gi * per_group..(gi + 1) * per_group;
        let mut sum_d = T::zero();
        let mut sum_dh = T::zero();
        for idx in range.clone() {
            let dh = dy[idx] * gamma[idx / hw];
            sum_d = sum_d + dh;
            sum_dh = sum_dh + dh * xhat[idx];
        }
        let scale = inv_std[gi] / n;
        for idx in range {
            let dh = dy[idx] * gamma[idx / hw];
            dx[idx] = scale * (n * dh - sum_d - xhat[idx] * sum_dh);
        }
    }
    dx
}

fn maxpool_forward<T: Scalar>(
    kernel: usize,
    stride: usize,
    pad: usize,
    input: Shape,
    output: Shape,
    x: &[T],
    record: bool,
) -> (Vec<T>, Saved<T>) {
    let mut out = Vec::with_capacity(output.len());
    let mut argmax = Vec::with_capacity(if record { output.len() } else { 0 });
    for c in 0..input.c {
        for oy in 0..output.h {
            for ox in 0..output.w {
                let mut best = T::neg_infinity();
                let mut best_idx = 0u32;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= input.h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= input.w as isize {
                            continue;
                        }
                        let idx = (c * input.h + iy as usize) * input.w + ix as usize;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                out.push(best);
                if record {
                    argmax.push(best_idx);
                }
            }
        }
    }
    let saved = if record { Saved::MaxPool { argmax } } else { Saved::Nothing };
    (out, saved)
}
