//! Reverse-mode differentiation over a tape of batched matrix operations.
//!
//! Every value is a `[rows × cols]` matrix; rows index paths in a batch. Nodes
//! are appended in evaluation order, so a single reverse sweep over the tape
//! is a valid topological traversal. The LSTM cell nonlinearity is fused into
//! one op to keep the tape short over long rollouts.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, Axis, Zip};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a + bias` with `bias` a single row broadcast over `a`'s rows.
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Array2<f64>),
    Scale(Var, f64),
    Abs(Var),
    Sigmoid(Var),
    Tanh(Var),
    Concat(Var, Var),
    SliceCols(Var, usize),
    /// `x·w_x + h·w_h + bias`, the fused gate pre-activation of a recurrent cell.
    Gates {
        x: Var,
        w_x: Var,
        h: Var,
        w_h: Var,
        bias: Var,
    },
    /// Gate pre-activations `[i f g o]` and previous cell state; value `[h | c]`.
    /// `act` caches `[i f g o tanh(c)]` for the backward sweep.
    LstmCell {
        gates: Var,
        cell: Var,
        act: Array2<f64>,
    },
    /// `(1/a) log mean exp(−a x)` over all entries; value is `1×1`.
    EntropicMean(Var, f64),
    MeanAll(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
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

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is accumulated by [`Tape::backward`].
    pub fn parameter(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let g = self.needs(a) || self.needs(b);
        self.push(value, Op::MatMul(a, b), g)
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let value = self.value(a) + self.value(bias);
        let g = self.needs(a) || self.needs(bias);
        self.push(value, Op::AddRow(a, bias), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let g = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let g = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let g = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), g)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Array2<f64>) -> Var {
        let value = self.value(a) * &c;
        let g = self.needs(a);
        self.push(value, Op::MulConst(a, c), g)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let g = self.needs(a);
        self.push(value, Op::Scale(a, k), g)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::abs);
        let g = self.needs(a);
        self.push(value, Op::Abs(a), g)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let g = self.needs(a);
        self.push(value, Op::Sigmoid(a), g)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let g = self.needs(a);
        self.push(value, Op::Tanh(a), g)
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()])
            .expect("concat: row counts differ");
        let g = self.needs(a) || self.needs(b);
        self.push(value, Op::Concat(a, b), g)
    }

    /// Columns `start .. start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let g = self.needs(a);
        self.push(value, Op::SliceCols(a, start), g)
    }

    /// `x·w_x + h·w_h + bias` with `bias` a single row.
    pub fn gates(&mut self, x: Var, w_x: Var, h: Var, w_h: Var, bias: Var) -> Var {
        let b = self.value(bias);
        let rows = self.value(x).nrows();
        let mut value = Array2::zeros((rows, b.ncols()));
        value.assign(
            &b.broadcast((rows, b.ncols()))
                .expect("gates: bias is one row"),
        );
        general_mat_mul(1.0, self.value(x), self.value(w_x), 1.0, &mut value);
        general_mat_mul(1.0, self.value(h), self.value(w_h), 1.0, &mut value);
        let g = [x, w_x, h, w_h, bias].iter().any(|v| self.needs(*v));
        self.push(
            value,
            Op::Gates {
                x,
                w_x,
                h,
                w_h,
                bias,
            },
            g,
        )
    }

    /// Fused LSTM cell. `gates` holds pre-activations in `[i f g o]` order.
    pub fn lstm_cell(&mut self, gates: Var, cell: Var) -> Var {
        let z = self.value(gates);
        let c_prev = self.value(cell);
        let (rows, hidden) = c_prev.dim();
        assert_eq!(z.dim(), (rows, 4 * hidden), "lstm_cell: gate width");
        let mut out = Array2::zeros((rows, 2 * hidden));
        let mut act = Array2::zeros((rows, 5 * hidden));
        Zip::from(out.rows_mut())
            .and(act.rows_mut())
            .and(z.rows())
            .and(c_prev.rows())
            .for_each(|mut o, mut ar, zr, cr| {
                for j in 0..hidden {
                    let i = sigmoid(zr[j]);
                    let f = sigmoid(zr[hidden + j]);
                    let g = zr[2 * hidden + j].tanh();
                    let og = sigmoid(zr[3 * hidden + j]);
                    let c = f * cr[j] + i * g;
                    let tc = c.tanh();
                    o[j] = og * tc;
                    o[hidden + j] = c;
                    ar[j] = i;
                    ar[hidden + j] = f;
                    ar[2 * hidden + j] = g;
                    ar[3 * hidden + j] = og;
                    ar[4 * hidden + j] = tc;
                }
            });
        let g = self.needs(gates) || self.needs(cell);
        self.push(out, Op::LstmCell { gates, cell, act }, g)
    }

    /// Entropic risk of the entries of `a`, a scalar node.
    pub fn entropic_mean(&mut self, a: Var, risk_aversion: f64) -> Var {
        let x = self.value(a);
        let m = x
            .iter()
            .map(|v| -risk_aversion * v)
            .fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = x.iter().map(|v| (-risk_aversion * v - m).exp()).sum();
        let value = (m + (s / x.len() as f64).ln()) / risk_aversion;
        let g = self.needs(a);
        self.push(
            Array2::from_elem((1, 1), value),
            Op::EntropicMean(a, risk_aversion),
            g,
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let value = self.value(a).mean().unwrap_or(0.0);
        let g = self.needs(a);
        self.push(Array2::from_elem((1, 1), value), Op::MeanAll(a), g)
    }

    /// Propagates `seed = ∂L/∂out` back through the tape.
    pub fn backward(&self, out: Var, seed: Array2<f64>) -> Gradients {
        assert_eq!(seed.dim(), self.value(out).dim(), "backward: seed shape");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        accumulate_product(&mut grads, *a, g.view(), self.value(*b).t());
                    }
                    if self.needs(*b) {
                        accumulate_product(&mut grads, *b, self.value(*a).t(), g.view());
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.needs(*bias) {
                        accumulate(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, -&g);
                    }
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::MulConst(a, c) => accumulate(&mut grads, *a, g * c),
                Op::Scale(a, k) => accumulate(&mut grads, *a, g * *k),
                Op::Abs(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|gv, &x| *gv *= sign(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gv, &y| *gv *= y * (1.0 - y));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|gv, &y| *gv *= 1.0 - y * y);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Concat(a, b) => {
                    let wa = self.value(*a).ncols();
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.slice(s![.., ..wa]).to_owned());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g.slice(s![.., wa..]).to_owned());
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let width = g.ncols();
                    let slot = grads[a.0].get_or_insert_with(|| Array2::zeros(src.dim()));
                    let mut view = slot.slice_mut(s![.., *start..*start + width]);
                    view += &g;
                }
                Op::Gates {
                    x,
                    w_x,
                    h,
                    w_h,
                    bias,
                } => {
                    if self.needs(*bias) {
                        accumulate(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    for (inp, w) in [(*x, *w_x), (*h, *w_h)] {
                        if self.needs(w) {
                            accumulate_product(&mut grads, w, self.value(inp).t(), g.view());
                        }
                        if self.needs(inp) {
                            accumulate_product(&mut grads, inp, g.view(), self.value(w).t());
                        }
                    }
                }
                Op::LstmCell { gates, cell, act } => {
                    let (gz, gc) = lstm_cell_backward(act, self.value(*cell), &g);
                    if self.needs(*gates) {
                        accumulate(&mut grads, *gates, gz);
                    }
                    if self.needs(*cell) {
                        accumulate(&mut grads, *cell, gc);
                    }
                }
                Op::EntropicMean(a, ra) => {
                    // ∂/∂x_i = −w_i / Σw, w_i = exp(−a x_i − m)
                    let x = self.value(*a);
                    let m = x.iter().map(|v| -ra * v).fold(f64::NEG_INFINITY, f64::max);
                    let w = x.mapv(|v| (-ra * v - m).exp());
                    let total = w.sum();
                    let upstream = g[[0, 0]];
                    accumulate(&mut grads, *a, w.mapv(|wi| -upstream * wi / total));
                }
                Op::MeanAll(a) => {
                    let x = self.value(*a);
                    let k = g[[0, 0]] / x.len() as f64;
                    accumulate(&mut grads, *a, Array2::from_elem(x.dim(), k));
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Adds `l·r` into the gradient slot of `v`.
fn accumulate_product(
    grads: &mut [Option<Array2<f64>>],
    v: Var,
    l: ArrayView2<f64>,
    r: ArrayView2<f64>,
) {
    match &mut grads[v.0] {
        Some(existing) => general_mat_mul(1.0, &l, &r, 1.0, existing),
        slot @ None => *slot = Some(l.dot(&r)),
    }
}

fn lstm_cell_backward(
    act: &Array2<f64>,
    c_prev: &Array2<f64>,
    g: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (rows, hidden) = c_prev.dim();
    let mut gz = Array2::zeros((rows, 4 * hidden));
    let mut gc = Array2::zeros((rows, hidden));
    Zip::from(gz.rows_mut())
        .and(gc.rows_mut())
        .and(act.rows())
        .and(c_prev.rows())
        .and(g.rows())
        .for_each(|mut gzr, mut gcr, ar, cr, gr| {
            for j in 0..hidden {
                let i = ar[j];
                let f = ar[hidden + j];
                let gg = ar[2 * hidden + j];
                let o = ar[3 * hidden + j];
                let tc = ar[4 * hidden + j];
                let dh = gr[j];
                let dc = gr[hidden + j] + dh * o * (1.0 - tc * tc);
                gzr[j] = dc * gg * i * (1.0 - i);
                gzr[hidden + j] = dc * cr[j] * f * (1.0 - f);
                gzr[2 * hidden + j] = dc * i * (1.0 - gg * gg);
                gzr[3 * hidden + j] = dh * tc * o * (1.0 - o);
                gcr[j] = dc * f;
            }
        });
    (gz, gc)
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when `v` did not influence the output.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, or zeros of the given shape.
    pub fn get_or_zeros(&self, v: Var, dim: (usize, usize)) -> Array2<f64> {
        self.get(v).cloned().unwrap_or_else(|| Array2::zeros(dim))
    }
}
