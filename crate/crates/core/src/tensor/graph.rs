use super::kernels::{self, ConvDims};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Conv2d { input: Var, weight: Var, bias: Var },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Log(Var),
    Square(Var),
    Recip(Var),
    ClampMin(Var, f64),
    Sum(Var),
    Mean(Var),
    SumLastAxis(Var),
    GlobalAvgPool(Var),
    AvgPool2d { input: Var, kh: usize, kw: usize },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A computation tape.
///
/// Nodes are appended in evaluation order, so the tape index order is a
/// topological order and backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn broadcast_ok(lhs: &[usize], rhs: &[usize]) -> bool {
    lhs == rhs || (rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs)
}

fn accumulate(slot: &mut Option<Tensor>, shape: &[usize], contribution: Vec<f64>) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&contribution) {
                *a += b;
            }
        }
        None => {
            *slot = Some(Tensor {
                shape: shape.to_vec(),
                data: contribution,
            })
        }
    }
}

/// Folds a gradient of the broadcast result back onto a suffix-shaped operand.
fn reduce_to(grad: &[f64], len: usize) -> Vec<f64> {
    if grad.len() == len {
        return grad.to_vec();
    }
    let mut out = vec![0.0; len];
    for chunk in grad.chunks(len) {
        for (o, g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; `backward` populates its gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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

    /// Gradient of the last `backward` loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = &self.nodes[x.0].value;
        let value = Tensor {
            shape: t.shape.clone(),
            data: t.data.iter().map(|&v| f(v)).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(value, op, rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if !broadcast_ok(&ta.shape, &tb.shape) {
            return Err(Error::contract(format!(
                "{name}: shapes {:?} and {:?} are not broadcast-compatible",
                ta.shape, tb.shape
            )));
        }
        let m = tb.data.len();
        let data = ta
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, tb.data[i % m]))
            .collect();
        let value = Tensor {
            shape: ta.shape.clone(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    /// Elementwise sum; `b` may be broadcast when its shape is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (&[m, k], &[k2, n]) = (ta.shape.as_slice(), tb.shape.as_slice()) else {
            return Err(Error::contract(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                ta.shape, tb.shape
            )));
        };
        if k != k2 {
            return Err(Error::contract(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                ta.shape, tb.shape
            )));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut data[i * n..][..n];
            for p in 0..k {
                let av = ta.data[i * k + p];
                for (o, bv) in row.iter_mut().zip(&tb.data[p * n..][..n]) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new([m, n], data)?, Op::MatMul(a, b), rg))
    }

    /// Stride-1 same-padded 2-D convolution over `[N, C_in, H, W]` with an
    /// odd-sized kernel `[C_out, C_in, KH, KW]` and bias `[C_out]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let dims = self.conv_dims(input, weight, bias)?;
        let out = kernels::conv2d_forward(
            &self.nodes[input.0].value.data,
            &self.nodes[weight.0].value.data,
            &self.nodes[bias.0].value.data,
            dims,
        );
        let value = Tensor::new([dims.batch, dims.c_out, dims.height, dims.width], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            rg,
        ))
    }

    fn conv_dims(&self, input: Var, weight: Var, bias: Var) -> Result<ConvDims> {
        let si = self.shape(input);
        let sw = self.shape(weight);
        let sb = self.shape(bias);
        let (&[batch, c_in, height, width], &[c_out, wc_in, kh, kw]) = (si, sw) else {
            return Err(Error::contract(format!(
                "conv2d needs rank-4 input and weight, got {si:?} and {sw:?}"
            )));
        };
        if wc_in != c_in || kh % 2 == 0 || kw % 2 == 0 || sb != [c_out] {
            return Err(Error::contract(format!(
                "conv2d shape mismatch: input {si:?}, weight {sw:?}, bias {sb:?}"
            )));
        }
        Ok(ConvDims {
            batch,
            c_in,
            c_out,
            height,
            width,
            kh,
            kw,
        })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), stable_sigmoid)
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), stable_softplus)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn recip(&mut self, x: Var) -> Var {
        self.unary(x, Op::Recip(x), |v| 1.0 / v)
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, Op::ClampMin(x, floor), |v| v.max(floor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data.iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.data.iter().sum::<f64>() / t.data.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Sums over the trailing axis: `[.., D] -> [..]`.
    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let Some((&d, lead)) = t.shape.split_last() else {
            return Err(Error::contract("sum_last_axis on a scalar"));
        };
        let data = if d == 0 {
            vec![0.0; lead.iter().product()]
        } else {
            t.data.chunks(d).map(|c| c.iter().sum()).collect()
        };
        let value = Tensor::new(lead.to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SumLastAxis(x), rg))
    }

    /// Mean over the two trailing (time, frequency) axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_average_pool(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let &[n, c, h, w] = t.shape.as_slice() else {
            return Err(Error::contract(format!(
                "global_average_pool needs rank 4, got {:?}",
                t.shape
            )));
        };
        let plane = h * w;
        let data = t
            .data
            .chunks(plane.max(1))
            .map(|p| p.iter().sum::<f64>() / plane as f64)
            .collect();
        let value = Tensor::new([n, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Non-overlapping `kh × kw` mean pooling over the two trailing axes.
    pub fn avg_pool2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let &[n, c, h, w] = t.shape.as_slice() else {
            return Err(Error::contract(format!(
                "avg_pool2d needs rank 4, got {:?}",
                t.shape
            )));
        };
        if kh == 0 || kw == 0 || h % kh != 0 || w % kw != 0 {
            return Err(Error::contract(format!(
                "avg_pool2d window {kh}x{kw} does not tile {h}x{w}"
            )));
        }
        let data = kernels::avg_pool_forward(&t.data, n * c, h, w, kh, kw);
        let value = Tensor::new([n, c, h / kh, w / kw], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::AvgPool2d { input: x, kh, kw }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Reverse sweep from a scalar `loss`, filling gradients of every node
    /// that depends on a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut give = |v: Var, contribution: Vec<f64>| {
            if wants(v) {
                let shape = self.nodes[v.0].value.shape.clone();
                accumulate(&mut grads[v.0], &shape, contribution);
            }
        };

        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                give(a, g.data.clone());
                if wants(b) {
                    give(b, reduce_to(&g.data, val(b).len()));
                }
            }
            Op::Sub(a, b) => {
                give(a, g.data.clone());
                if wants(b) {
                    let neg: Vec<f64> = g.data.iter().map(|v| -v).collect();
                    give(b, reduce_to(&neg, val(b).len()));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let m = tb.len();
                if wants(a) {
                    let ga = g
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * tb.data[i % m])
                        .collect();
                    give(a, ga);
                }
                if wants(b) {
                    let gb: Vec<f64> = g.data.iter().zip(&ta.data).map(|(gv, av)| gv * av).collect();
                    give(b, reduce_to(&gb, m));
                }
            }
            Op::Scale(x, k) => give(x, g.data.iter().map(|v| v * k).collect()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if wants(a) {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g.data[i * n..][..n];
                        for p in 0..k {
                            let brow = &tb.data[p * n..][..n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    give(a, ga);
                }
                if wants(b) {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g.data[i * n..][..n];
                        for p in 0..k {
                            let av = ta.data[i * k + p];
                            for (o, gv) in gb[p * n..][..n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    give(b, gb);
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
            } => {
                let (ti, tw) = (val(input), val(weight));
                let d = ConvDims {
                    batch: ti.shape[0],
                    c_in: ti.shape[1],
                    c_out: tw.shape[0],
                    height: ti.shape[2],
                    width: ti.shape[3],
                    kh: tw.shape[2],
                    kw: tw.shape[3],
                };
                let mut gw = vec![0.0; tw.len()];
                let mut gb = vec![0.0; d.c_out];
                let mut gi = wants(input).then(|| vec![0.0; ti.len()]);
                kernels::conv2d_backward(
                    &ti.data,
                    &tw.data,
                    &g.data,
                    d,
                    &mut gw,
                    &mut gb,
                    gi.as_deref_mut(),
                );
                give(weight, gw);
                give(bias, gb);
                if let Some(gi) = gi {
                    give(input, gi);
                }
            }
            Op::Relu(x) => {
                let gx = g
                    .data
                    .iter()
                    .zip(&val(x).data)
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                give(x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g
                    .data
                    .iter()
                    .zip(&out.data)
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                give(x, gx);
            }
            Op::Softplus(x) => {
                let gx = g
                    .data
                    .iter()
                    .zip(&val(x).data)
                    .map(|(gv, xv)| gv * stable_sigmoid(*xv))
                    .collect();
                give(x, gx);
            }
            Op::Log(x) => {
                let gx = g.data.iter().zip(&val(x).data).map(|(gv, xv)| gv / xv).collect();
                give(x, gx);
            }
            Op::Square(x) => {
                let gx = g
                    .data
                    .iter()
                    .zip(&val(x).data)
                    .map(|(gv, xv)| 2.0 * xv * gv)
                    .collect();
                give(x, gx);
            }
            Op::Recip(x) => {
                let gx = g
                    .data
                    .iter()
                    .zip(&out.data)
                    .map(|(gv, r)| -gv * r * r)
                    .collect();
                give(x, gx);
            }
            Op::ClampMin(x, floor) => {
                let gx = g
                    .data
                    .iter()
                    .zip(&val(x).data)
                    .map(|(gv, xv)| if *xv > floor { *gv } else { 0.0 })
                    .collect();
                give(x, gx);
            }
            Op::Sum(x) => give(x, vec![g.data[0]; val(x).len()]),
            Op::Mean(x) => {
                let n = val(x).len();
                give(x, vec![g.data[0] / n as f64; n]);
            }
            Op::SumLastAxis(x) => {
                let d = *val(x).shape.last().unwrap_or(&1);
                let gx = g
                    .data
                    .iter()
                    .flat_map(|gv| std::iter::repeat(*gv).take(d))
                    .collect();
                give(x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let s = &val(x).shape;
                let plane = s[2] * s[3];
                let gx = g
                    .data
                    .iter()
                    .flat_map(|gv| std::iter::repeat(gv / plane as f64).take(plane))
                    .collect();
                give(x, gx);
            }
            Op::AvgPool2d { input, kh, kw } => {
                let s = &val(input).shape;
                let gx = kernels::avg_pool_backward(&g.data, s[0] * s[1], s[2], s[3], kh, kw);
                give(input, gx);
            }
            Op::Reshape(x) => give(x, g.data.clone()),
        }
    }
}
