
use super::backend::{bce_value, TensorOps};
use super::kernels::{
    broadcast, reduce_repeats, sigmoid, unary_derivative, Broadcast, NormStats,
};
use super::{BinaryOp, Element, Tensor, UnaryOp};
use crate::error::{Error, Result};
use crate::ssm::{self, Discretization, ScanMode};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Matmul(Var, Var),
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        mode: Broadcast,
    },
    Unary {
        op: UnaryOp,
        x: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sum(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        stats: NormStats<T>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: NormStats<T>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Var,
    },
    ReverseRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ScatterRows {
        base: Var,
        index: Vec<usize>,
        values: Var,
    },
    Transpose(Var),
    DiscretizeState {
        delta: Var,
        a: Var,
        rule: Discretization,
    },
    DiscretizeInput {
        delta: Var,
        b: Var,
        x: Var,
    },
    ScanSequential {
        a_bar: Var,
        c: Var,
        b_bar_x: Var,
        states: Vec<T>,
    },
    Readout {
        h: Var,
        c: Var,
    },
    Bce {
        logit: Var,
        target: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Reverse-mode gradient tape. Nodes are appended in execution order, so the
/// record is already topologically sorted and backward is a reverse sweep.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.clone(), Op::Leaf, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to a trainable leaf.
    /// Interior gradients are released during the sweep.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    /// Clear gradients so that backward may run again.
    pub fn reset(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum_all();
        self.record(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.nodes[x.0].value.gather_rows(index)?;
        Ok(self.record(
            v,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    pub fn scatter_rows(&mut self, base: Var, index: &[usize], values: Var) -> Result<Var> {
        let v = self.nodes[base.0]
            .value
            .scatter_rows(index, &self.nodes[values.0].value)?;
        Ok(self.record(
            v,
            Op::ScatterRows {
                base,
                index: index.to_vec(),
                values,
            },
            &[base, values],
        ))
    }

    fn readout(&mut self, h: Var, c: Var) -> Result<Var> {
        let dims = ssm::scan_dims(&self.nodes[h.0].value, &self.nodes[h.0].value, &self.nodes[c.0].value)?;
        let y = ssm::readout(self.nodes[h.0].value.data(), self.nodes[c.0].value.data(), dims);
        let y = Tensor::from_parts(vec![dims.0, dims.1], y).ensure_finite("readout")?;
        Ok(self.record(y, Op::Readout { h, c }, &[h, c]))
    }

    /// The work-efficient up/down sweep recorded as gathers, products, sums
    /// and scatters so that its gradient comes from the generic rules.
    fn scan_parallel_composite(&mut self, a_bar: Var, b_bar_x: Var, c: Var) -> Result<Var> {
        let len = self.nodes[a_bar.0].value.shape()[0];
        let mut a = a_bar;
        let mut b = b_bar_x;
        let combine = |g: &mut Self, a: &mut Var, b: &mut Var, left: &[usize], right: &[usize]| -> Result<()> {
            if right.is_empty() {
                return Ok(());
            }
            let al = g.gather_rows(*a, left)?;
            let ar = g.gather_rows(*a, right)?;
            let bl = g.gather_rows(*b, left)?;
            let br = g.gather_rows(*b, right)?;
            let carried = g.mul(&ar, &bl)?;
            let nb = g.add(&carried, &br)?;
            let na = g.mul(&al, &ar)?;
            *a = g.scatter_rows(*a, right, na)?;
            *b = g.scatter_rows(*b, right, nb)?;
            Ok(())
        };
        let mut d = 1;
        while d < len {
            let right: Vec<usize> = (2 * d - 1..len).step_by(2 * d).collect();
            let left: Vec<usize> = right.iter().map(|r| r - d).collect();
            combine(self, &mut a, &mut b, &left, &right)?;
            d *= 2;
        }
        d /= 2;
        while d >= 1 {
            let right: Vec<usize> = (3 * d - 1..len).step_by(2 * d).collect();
            let left: Vec<usize> = right.iter().map(|r| r - d).collect();
            combine(self, &mut a, &mut b, &left, &right)?;
            d /= 2;
        }
        self.readout(b, c)
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.nodes[loss.0].value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            backprop(&self.nodes, &mut self.grads, i, &g)?;
        }
        Ok(())
    }
}

fn accumulate<T: Element>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e = *e + d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Like [`accumulate`] but adds only into selected rows.
fn accumulate_rows<T: Element>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    v: Var,
    index: &[usize],
    g: &[T],
) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let (_, w) = nodes[v.0].value.rows_and_width();
    let n = nodes[v.0].value.numel();
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
    for (j, &r) in index.iter().enumerate() {
        for k in 0..w {
            slot[r * w + k] = slot[r * w + k] + g[j * w + k];
        }
    }
}

fn backprop<T: Element>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    i: usize,
    g: &[T],
) -> Result<()> {
    let val = |v: Var| &nodes[v.0].value;
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (m, k) = val(*a).dims2()?;
            let (_, n) = val(*b).dims2()?;
            if nodes[a.0].requires_grad {
                // dA = G · Bᵀ
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, (n as isize, 1), val(*b).data(), (1, n as isize), T::zero(), &mut da);
                accumulate(nodes, grads, *a, da);
            }
            if nodes[b.0].requires_grad {
                // dB = Aᵀ · G
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, val(*a).data(), (1, k as isize), g, (n as isize, 1), T::zero(), &mut db);
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Binary { op, a, b, mode } => {
            let (ad, bd) = (val(*a).data(), val(*b).data());
            let ai = |i: usize| match mode {
                Broadcast::LhsRepeats(m) => ad[i % m],
                _ => ad[i],
            };
            let bi = |i: usize| match mode {
                Broadcast::RhsRepeats(m) => bd[i % m],
                _ => bd[i],
            };
            let (ga, gb): (Vec<T>, Vec<T>) = match op {
                BinaryOp::Add => (g.to_vec(), g.to_vec()),
                BinaryOp::Sub => (g.to_vec(), g.iter().map(|&v| -v).collect()),
                BinaryOp::Mul => (
                    g.iter().enumerate().map(|(i, &v)| v * bi(i)).collect(),
                    g.iter().enumerate().map(|(i, &v)| v * ai(i)).collect(),
                ),
                BinaryOp::Div => (
                    g.iter().enumerate().map(|(i, &v)| v / bi(i)).collect(),
                    g.iter()
                        .enumerate()
                        .map(|(i, &v)| -v * ai(i) / (bi(i) * bi(i)))
                        .collect(),
                ),
            };
            let ga = match mode {
                Broadcast::LhsRepeats(m) => reduce_repeats(&ga, *m),
                _ => ga,
            };
            let gb = match mode {
                Broadcast::RhsRepeats(m) => reduce_repeats(&gb, *m),
                _ => gb,
            };
            accumulate(nodes, grads, *a, ga);
            accumulate(nodes, grads, *b, gb);
        }
        Op::Unary { op, x } => {
            let xd = val(*x).data();
            let dx = g
                .iter()
                .zip(xd.iter().zip(out.data()))
                .map(|(&gv, (&xv, &yv))| gv * unary_derivative(*op, xv, yv))
                .collect();
            accumulate(nodes, grads, *x, dx);
        }
        Op::Scale { x, c } => {
            accumulate(nodes, grads, *x, g.iter().map(|&v| v * *c).collect());
        }
        Op::Sum(x) => {
            accumulate(nodes, grads, *x, vec![g[0]; val(*x).numel()]);
        }
        Op::Softmax { x, axis } => {
            let dx = Tensor::softmax_backward(out, g, *axis)?;
            accumulate(nodes, grads, *x, dx);
        }
        Op::RmsNorm { x, gain, stats } => {
            let (rows, d) = val(*x).dims2()?;
            let (xd, w) = (val(*x).data(), val(*gain).data());
            let dn = T::from_f64(d as f64);
            let mut dx = vec![T::zero(); rows * d];
            let mut dw = vec![T::zero(); d];
            for r in 0..rows {
                let s = stats.inv_scale[r];
                let xr = &xd[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let dot = (0..d).fold(T::zero(), |acc, j| acc + gr[j] * w[j] * xr[j]);
                let coef = s * s * s * dot / dn;
                for j in 0..d {
                    dx[r * d + j] = s * w[j] * gr[j] - coef * xr[j];
                    dw[j] = dw[j] + gr[j] * xr[j] * s;
                }
            }
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *gain, dw);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            stats,
        } => {
            let (rows, d) = val(*x).dims2()?;
            let (xd, w) = (val(*x).data(), val(*gain).data());
            let dn = T::from_f64(d as f64);
            let mut dx = vec![T::zero(); rows * d];
            let mut dw = vec![T::zero(); d];
            let mut db = vec![T::zero(); d];
            for r in 0..rows {
                let (mu, s) = (stats.mean[r], stats.inv_scale[r]);
                let xr = &xd[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let xhat = |j: usize| (xr[j] - mu) * s;
                let mut sum_gw = T::zero();
                let mut sum_gw_xhat = T::zero();
                for j in 0..d {
                    let gw = gr[j] * w[j];
                    sum_gw = sum_gw + gw;
                    sum_gw_xhat = sum_gw_xhat + gw * xhat(j);
                    dw[j] = dw[j] + gr[j] * xhat(j);
                    db[j] = db[j] + gr[j];
                }
                for j in 0..d {
                    let gw = gr[j] * w[j];
                    dx[r * d + j] = s / dn * (dn * gw - sum_gw - xhat(j) * sum_gw_xhat);
                }
            }
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *gain, dw);
            accumulate(nodes, grads, *bias, db);
        }
        Op::Conv1d { x, kernel, bias } => {
            let (len, e) = val(*x).dims2()?;
            let (_, k) = val(*kernel).dims2()?;
            let (xd, w) = (val(*x).data(), val(*kernel).data());
            let mut dx = vec![T::zero(); len * e];
            let mut dw = vec![T::zero(); e * k];
            let mut db = vec![T::zero(); e];
            for t in 0..len {
                for c in 0..e {
                    db[c] = db[c] + g[t * e + c];
                }
                for tap in 0..k {
                    let Some(src) = (t + tap).checked_sub(k - 1) else {
                        continue;
                    };
                    for c in 0..e {
                        let gv = g[t * e + c];
                        dx[src * e + c] = dx[src * e + c] + w[c * k + tap] * gv;
                        dw[c * k + tap] = dw[c * k + tap] + xd[src * e + c] * gv;
                    }
                }
            }
            accumulate(nodes, grads, *x, dx);
            accumulate(nodes, grads, *kernel, dw);
            accumulate(nodes, grads, *bias, db);
        }
        Op::ReverseRows(x) => {
            let gt = Tensor::from_parts(out.shape().to_vec(), g.to_vec()).reverse_rows();
            accumulate(nodes, grads, *x, gt.into_data());
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for p in parts {
                let n = val(*p).numel();
                accumulate(nodes, grads, *p, g[offset..offset + n].to_vec());
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let (rows, cols) = out.dims2()?;
            let mut start = 0;
            for p in parts {
                let (_, c) = val(*p).dims2()?;
                let mut dp = Vec::with_capacity(rows * c);
                for r in 0..rows {
                    dp.extend_from_slice(&g[r * cols + start..r * cols + start + c]);
                }
                accumulate(nodes, grads, *p, dp);
                start += c;
            }
        }
        Op::SliceCols { x, start } => {
            let (rows, cols) = val(*x).dims2()?;
            let (_, len) = out.dims2()?;
            let mut dx = vec![T::zero(); rows * cols];
            for r in 0..rows {
                dx[r * cols + start..r * cols + start + len]
                    .copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            accumulate(nodes, grads, *x, dx);
        }
        Op::GatherRows { x, index } => {
            accumulate_rows(nodes, grads, *x, index, g);
        }
        Op::ScatterRows {
            base,
            index,
            values,
        } => {
            let (_, w) = out.rows_and_width();
            if nodes[base.0].requires_grad {
                let mut db = g.to_vec();
                for &r in index {
                    db[r * w..(r + 1) * w].iter_mut().for_each(|v| *v = T::zero());
                }
                accumulate(nodes, grads, *base, db);
            }
            let dv = index
                .iter()
                .flat_map(|&r| g[r * w..(r + 1) * w].iter().copied())
                .collect();
            accumulate(nodes, grads, *values, dv);
        }
        Op::Transpose(x) => {
            let gt = Tensor::from_parts(out.shape().to_vec(), g.to_vec()).transpose()?;
            accumulate(nodes, grads, *x, gt.into_data());
        }
        Op::DiscretizeState { delta, a, rule } => {
            let (ddelta, da) = ssm::discretize_state_backward(val(*delta), val(*a), out, g, *rule)?;
            accumulate(nodes, grads, *delta, ddelta);
            accumulate(nodes, grads, *a, da);
        }
        Op::DiscretizeInput { delta, b, x } => {
            let (ddelta, db, dx) = ssm::discretize_input_backward(val(*delta), val(*b), val(*x), g)?;
            accumulate(nodes, grads, *delta, ddelta);
            accumulate(nodes, grads, *b, db);
            accumulate(nodes, grads, *x, dx);
        }
        Op::ScanSequential {
            a_bar,
            b_bar_x,
            c,
            states,
        } => {
            let dims = ssm::scan_dims(val(*a_bar), val(*b_bar_x), val(*c))?;
            let (da, dbx, dc) =
                ssm::scan_sequential_backward(val(*a_bar).data(), states, val(*c).data(), g, dims);
            accumulate(nodes, grads, *a_bar, da);
            accumulate(nodes, grads, *b_bar_x, dbx);
            accumulate(nodes, grads, *c, dc);
        }
        Op::Readout { h, c } => {
            let dims = ssm::scan_dims(val(*h), val(*h), val(*c))?;
            let (dh, dc) = ssm::readout_backward(val(*h).data(), val(*c).data(), g, dims);
            accumulate(nodes, grads, *h, dh);
            accumulate(nodes, grads, *c, dc);
        }
        Op::Bce { logit, target } => {
            let z = val(*logit).data()[0];
            accumulate(nodes, grads, *logit, vec![g[0] * (sigmoid(z) - *target)]);
        }
    }
    Ok(())
}

impl<T: Element> TensorOps<T> for Graph<T> {
    type Value = Var;

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn input(&mut self, t: &Tensor<T>, trainable: bool) -> Var {
        if trainable {
            self.param(t)
        } else {
            self.constant(t)
        }
    }

    fn matmul(&mut self, a: &Var, b: &Var) -> Result<Var> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        Ok(self.record(v, Op::Matmul(*a, *b), &[*a, *b]))
    }

    fn binary(&mut self, op: BinaryOp, a: &Var, b: &Var) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (mode, _) = broadcast(ta.shape(), tb.shape())?;
        let v = ta.binary(op, tb)?;
        Ok(self.record(
            v,
            Op::Binary {
                op,
                a: *a,
                b: *b,
                mode,
            },
            &[*a, *b],
        ))
    }

    fn unary(&mut self, op: UnaryOp, a: &Var) -> Result<Var> {
        let v = self.nodes[a.0].value.unary(op)?;
        Ok(self.record(v, Op::Unary { op, x: *a }, &[*a]))
    }

    fn scale(&mut self, a: &Var, c: T) -> Result<Var> {
        let v = self.nodes[a.0].value.scale(c)?;
        Ok(self.record(v, Op::Scale { x: *a, c }, &[*a]))
    }

    fn softmax(&mut self, a: &Var, axis: usize) -> Result<Var> {
        let v = self.nodes[a.0].value.softmax(axis)?;
        Ok(self.record(v, Op::Softmax { x: *a, axis }, &[*a]))
    }

    fn rms_norm(&mut self, x: &Var, gain: &Var) -> Result<Var> {
        let (v, stats) = self.nodes[x.0]
            .value
            .rms_norm_with_stats(&self.nodes[gain.0].value)?;
        Ok(self.record(
            v,
            Op::RmsNorm {
                x: *x,
                gain: *gain,
                stats,
            },
            &[*x, *gain],
        ))
    }

    fn layer_norm(&mut self, x: &Var, gain: &Var, bias: &Var) -> Result<Var> {
        let (v, stats) = self.nodes[x.0]
            .value
            .layer_norm_with_stats(&self.nodes[gain.0].value, &self.nodes[bias.0].value)?;
        Ok(self.record(
            v,
            Op::LayerNorm {
                x: *x,
                gain: *gain,
                bias: *bias,
                stats,
            },
            &[*x, *gain, *bias],
        ))
    }

    fn depthwise_conv1d(&mut self, x: &Var, kernel: &Var, bias: &Var) -> Result<Var> {
        let v = self.nodes[x.0]
            .value
            .depthwise_conv1d(&self.nodes[kernel.0].value, &self.nodes[bias.0].value)?;
        Ok(self.record(
            v,
            Op::Conv1d {
                x: *x,
                kernel: *kernel,
                bias: *bias,
            },
            &[*x, *kernel, *bias],
        ))
    }

    fn reverse_rows(&mut self, x: &Var) -> Result<Var> {
        let v = self.nodes[x.0].value.reverse_rows();
        Ok(self.record(v, Op::ReverseRows(*x), &[*x]))
    }

    fn concat_rows(&mut self, parts: &[&Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let v = Tensor::concat_rows(&tensors)?;
        let vars: Vec<Var> = parts.iter().map(|p| **p).collect();
        Ok(self.record(v, Op::ConcatRows(vars.clone()), &vars))
    }

    fn concat_cols(&mut self, parts: &[&Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let v = Tensor::concat_cols(&tensors)?;
        let vars: Vec<Var> = parts.iter().map(|p| **p).collect();
        Ok(self.record(v, Op::ConcatCols(vars.clone()), &vars))
    }

    fn slice_cols(&mut self, x: &Var, start: usize, len: usize) -> Result<Var> {
        let v = self.nodes[x.0].value.slice_cols(start, len)?;
        Ok(self.record(v, Op::SliceCols { x: *x, start }, &[*x]))
    }

    fn select_row(&mut self, x: &Var, row: usize) -> Result<Var> {
        Graph::gather_rows(self, *x, &[row])
    }

    fn gather_rows(&mut self, x: &Var, index: &[usize]) -> Result<Var> {
        Graph::gather_rows(self, *x, index)
    }

    fn transpose(&mut self, x: &Var) -> Result<Var> {
        let v = self.nodes[x.0].value.transpose()?;
        Ok(self.record(v, Op::Transpose(*x), &[*x]))
    }

    fn discretize(
        &mut self,
        delta: &Var,
        a: &Var,
        b: &Var,
        x_prime: &Var,
        rule: Discretization,
    ) -> Result<(Var, Var)> {
        let a_bar = ssm::discretize_state(&self.nodes[delta.0].value, &self.nodes[a.0].value, rule)?;
        let a_bar = self.record(
            a_bar,
            Op::DiscretizeState {
                delta: *delta,
                a: *a,
                rule,
            },
            &[*delta, *a],
        );
        let bx = ssm::discretize_input(
            &self.nodes[delta.0].value,
            &self.nodes[b.0].value,
            &self.nodes[x_prime.0].value,
        )?;
        let bx = self.record(
            bx,
            Op::DiscretizeInput {
                delta: *delta,
                b: *b,
                x: *x_prime,
            },
            &[*delta, *b, *x_prime],
        );
        Ok((a_bar, bx))
    }

    fn selective_scan(&mut self, a_bar: &Var, b_bar_x: &Var, c: &Var, mode: ScanMode) -> Result<Var> {
        match mode {
            ScanMode::Sequential => {
                let (ta, tb, tc) = (
                    &self.nodes[a_bar.0].value,
                    &self.nodes[b_bar_x.0].value,
                    &self.nodes[c.0].value,
                );
                let dims = ssm::scan_dims(ta, tb, tc)?;
                let states = ssm::scan_sequential_states(ta.data(), tb.data(), dims.0, dims.1 * dims.2);
                let y = ssm::readout(&states, tc.data(), dims);
                let y = Tensor::from_parts(vec![dims.0, dims.1], y).ensure_finite("selective_scan")?;
                Ok(self.record(
                    y,
                    Op::ScanSequential {
                        a_bar: *a_bar,
                        b_bar_x: *b_bar_x,
                        c: *c,
                        states,
                    },
                    &[*a_bar, *b_bar_x, *c],
                ))
            }
            ScanMode::Parallel => {
                ssm::scan_dims(
                    &self.nodes[a_bar.0].value,
                    &self.nodes[b_bar_x.0].value,
                    &self.nodes[c.0].value,
                )?;
                self.scan_parallel_composite(*a_bar, *b_bar_x, *c)
            }
        }
    }

    fn bce_with_logits(&mut self, logit: &Var, target: T) -> Result<Var> {
        let v = bce_value(&self.nodes[logit.0].value, target)?;
        Ok(self.record(
            v,
            Op::Bce {
                logit: *logit,
                target,
            },
            &[*logit],
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::from_f64(&[3], &[1., -2., 5.]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn square_gives_two_x() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::from_f64(&[3], &[1., -2., 5.]).unwrap());
        let sq = g.mul(&x, &x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2., -4., 10.]);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::scalar(2.0));
        let y = g.exp(&x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::BackwardTwice)));
        g.reset();
        g.backward(y).unwrap();
        assert!((g.grad(x).unwrap().data()[0] - 2f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::<f64>::new();
        let x = g.param(&Tensor::ones(&[2]).unwrap());
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn matmul_gradient_is_row_broadcast_of_column_sums() {
        let mut g = Graph::<f64>::new();
        let a = g.param(&Tensor::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let b = g.constant(&Tensor::from_f64(&[3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let p = g.matmul(&a, &b).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        // Row sums of B (= column sums of Bᵀ) repeated for every row of A.
        assert_eq!(g.grad(a).unwrap().data(), &[3., 7., 11., 3., 7., 11.]);
        assert!(g.grad(b).is_none());
    }

    #[test]
    fn constants_do_not_require_grad() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(&Tensor::ones(&[2]).unwrap());
        let y = g.exp(&c).unwrap();
        assert!(!g.requires_grad(y));
    }
}
