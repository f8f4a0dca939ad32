//! Recorded forward pass with reverse-mode gradients.
//!
//! Operations are vector and matrix sized rather than scalar sized, so a
//! decoder step is a few dozen nodes. Shape mismatches inside the tape are
//! programming errors and panic; the layer functions validate user-facing
//! dimensions before recording anything.

use std::collections::BTreeMap;

use super::{sigmoid, softmax_unchecked, GradientSet, ParamStore, Tensor};
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `w [m, n] * x [n] -> [m]`
    MatVec {
        w: Var,
        x: Var,
    },
    /// `x [j, n] * w^T (w [m, n]) -> [j, m]`
    MatMulT {
        x: Var,
        w: Var,
    },
    /// `x^T [n, j] * a [j] -> [n]`
    MatTVec {
        x: Var,
        a: Var,
    },
    Add(Var, Var),
    Sum(Vec<Var>),
    /// `x [j, m] + v [m]` added to every row.
    AddRows {
        x: Var,
        v: Var,
    },
    Mul(Var, Var),
    MulConst {
        x: Var,
        factor: Vec<f64>,
    },
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Slice {
        x: Var,
        start: usize,
    },
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Row {
        x: Var,
        row: usize,
    },
    Gather {
        table: Var,
        row: usize,
    },
    MeanRows(Var),
    Softmax(Var),
    /// `ln(max(p[index], floor))`
    LogAt {
        p: Var,
        index: usize,
        clamped: bool,
    },
    SumSquares(Var),
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Probability floor used by [`Tape::log_at`].
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamp_count: usize,
}

/// Tape variables bound to every parameter of a [`ParamStore`].
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, (Var, bool)>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .map(|(v, _)| *v)
            .ok_or_else(|| invalid(format!("parameter `{name}` not bound on tape")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Collect parameter gradients from a finished backward sweep.
    pub fn gradients(&self, tape: &Tape, grads: &Grads) -> GradientSet {
        let mut out = GradientSet::default();
        self.accumulate_into(tape, grads, &mut out, 1.0);
        out
    }

    /// `out[name] += scale * d loss / d name` for every trainable parameter.
    /// Entries missing from `out` are created.
    pub fn accumulate_into(&self, tape: &Tape, grads: &Grads, out: &mut GradientSet, scale: f64) {
        for (name, (var, trainable)) in &self.vars {
            if !trainable {
                continue;
            }
            let shape = tape.value(*var).shape();
            let entry = match out.get_mut(name) {
                Some(t) => t,
                None => {
                    out.insert_zeros(name, shape);
                    out.get_mut(name).expect("just inserted")
                }
            };
            if let Some(g) = grads.get(*var) {
                for (a, b) in entry.data_mut().iter_mut().zip(g) {
                    *a += scale * b;
                }
            }
        }
    }
}

impl GradientSet {
    pub(crate) fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name.to_string(), Tensor::zeros(shape));
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of `log_at` evaluations that hit the probability floor.
    pub fn clamp_count(&self) -> usize {
        self.clamp_count
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Length of a rank-1 variable, or the column count of a matrix.
    pub fn width(&self, v: Var) -> usize {
        *self.shape(v).last().unwrap_or(&1)
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "expected a scalar, got shape {:?}", t.shape());
        t.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
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

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Put every parameter of `store` on the tape. Frozen parameters become
    /// constants.
    pub fn load(&mut self, store: &ParamStore) -> ParamVars {
        let mut vars = BTreeMap::new();
        for (name, p) in store.iter() {
            let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
            vars.insert(name.to_string(), (v, p.trainable));
        }
        ParamVars { vars }
    }

    /// Like [`Tape::load`] with every parameter treated as frozen.
    pub fn load_frozen(&mut self, store: &ParamStore) -> ParamVars {
        let mut vars = BTreeMap::new();
        for (name, p) in store.iter() {
            let v = self.push(p.value.clone(), Op::Leaf, false);
            vars.insert(name.to_string(), (v, false));
        }
        ParamVars { vars }
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (m, n) = self.value(w).dims2();
        let xv = self.data(x);
        assert_eq!(
            xv.len(),
            n,
            "matvec: matrix is {m}x{n}, vector has {}",
            xv.len()
        );
        let wd = self.data(w);
        let out: Vec<f64> = (0..m).map(|r| dot(&wd[r * n..(r + 1) * n], xv)).collect();
        let needs = self.needs(w) || self.needs(x);
        self.push(Tensor::vector(out), Op::MatVec { w, x }, needs)
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let (j, n) = self.value(x).dims2();
        let (m, n2) = self.value(w).dims2();
        assert_eq!(n, n2, "matmul_t: inner dims {n} vs {n2}");
        let xd = self.data(x);
        let wd = self.data(w);
        let mut out = Vec::with_capacity(j * m);
        for r in 0..j {
            let xr = &xd[r * n..(r + 1) * n];
            for c in 0..m {
                out.push(dot(xr, &wd[c * n..(c + 1) * n]));
            }
        }
        let needs = self.needs(x) || self.needs(w);
        let t = Tensor::matrix(j, m, out).expect("shape");
        self.push(t, Op::MatMulT { x, w }, needs)
    }

    pub fn mat_t_vec(&mut self, x: Var, a: Var) -> Var {
        let (j, n) = self.value(x).dims2();
        let av = self.data(a);
        assert_eq!(av.len(), j, "mat_t_vec: {j} rows vs {} weights", av.len());
        let xd = self.data(x);
        let mut out = vec![0.0; n];
        for r in 0..j {
            axpy(&mut out, av[r], &xd[r * n..(r + 1) * n]);
        }
        let needs = self.needs(x) || self.needs(a);
        self.push(Tensor::vector(out), Op::MatTVec { x, a }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new(shape, out).expect("shape"),
            Op::Add(a, b),
            needs,
        )
    }

    pub fn sum(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty(), "sum of no terms");
        let shape = self.shape(terms[0]).to_vec();
        let mut out = self.data(terms[0]).to_vec();
        for &t in &terms[1..] {
            assert_eq!(self.shape(t), shape.as_slice(), "sum: shape mismatch");
            for (o, v) in out.iter_mut().zip(self.data(t)) {
                *o += v;
            }
        }
        let needs = terms.iter().any(|&t| self.needs(t));
        self.push(
            Tensor::new(shape, out).expect("shape"),
            Op::Sum(terms.to_vec()),
            needs,
        )
    }

    pub fn add_rows(&mut self, x: Var, v: Var) -> Var {
        let (j, m) = self.value(x).dims2();
        let vv = self.data(v);
        assert_eq!(vv.len(), m, "add_rows: width {m} vs {}", vv.len());
        let mut out = self.data(x).to_vec();
        for r in 0..j {
            for (o, b) in out[r * m..(r + 1) * m].iter_mut().zip(vv) {
                *o += b;
            }
        }
        let needs = self.needs(x) || self.needs(v);
        let t = Tensor::matrix(j, m, out).expect("shape");
        self.push(t, Op::AddRows { x, v }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::new(shape, out).expect("shape"),
            Op::Mul(a, b),
            needs,
        )
    }

    /// Elementwise product with a fixed factor (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<f64>) -> Var {
        assert_eq!(
            self.value(x).numel(),
            factor.len(),
            "mul_const: size mismatch"
        );
        let out: Vec<f64> = self
            .data(x)
            .iter()
            .zip(&factor)
            .map(|(a, b)| a * b)
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, out).expect("shape"),
            Op::MulConst { x, factor },
            needs,
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, out).expect("shape"),
            Op::Scale(x, factor),
            needs,
        )
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out).expect("shape"), Op::Tanh(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(
            Tensor::new(shape, out).expect("shape"),
            Op::Sigmoid(x),
            needs,
        )
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        assert_eq!(self.value(x).rank(), 1, "slice needs a vector");
        let out = self.data(x)[start..start + len].to_vec();
        let needs = self.needs(x);
        self.push(Tensor::vector(out), Op::Slice { x, start }, needs)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for &p in parts {
            assert_eq!(self.value(p).rank(), 1, "concat needs vectors");
            out.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::vector(out), Op::Concat(parts.to_vec()), needs)
    }

    /// Join matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.value(parts[0]).dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (r, c) = self.value(p).dims2();
                assert_eq!(r, rows, "concat_cols: row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let t = Tensor::matrix(rows, total, out).expect("shape");
        self.push(t, Op::ConcatCols(parts.to_vec()), needs)
    }

    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows of nothing");
        let width = self.value(rows[0]).numel();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            assert_eq!(self.value(r).numel(), width, "stack_rows: width mismatch");
            out.extend_from_slice(self.data(r));
        }
        let needs = rows.iter().any(|&r| self.needs(r));
        let t = Tensor::matrix(rows.len(), width, out).expect("shape");
        self.push(t, Op::StackRows(rows.to_vec()), needs)
    }

    pub fn row(&mut self, x: Var, row: usize) -> Var {
        let out = self.value(x).row(row).to_vec();
        let needs = self.needs(x);
        self.push(Tensor::vector(out), Op::Row { x, row }, needs)
    }

    /// Row lookup into a table (embedding access).
    pub fn gather(&mut self, table: Var, row: usize) -> Var {
        let out = self.value(table).row(row).to_vec();
        let needs = self.needs(table);
        self.push(Tensor::vector(out), Op::Gather { table, row }, needs)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (j, n) = self.value(x).dims2();
        let mut out = vec![0.0; n];
        for r in 0..j {
            axpy(&mut out, 1.0, self.value(x).row(r));
        }
        out.iter_mut().for_each(|v| *v /= j as f64);
        let needs = self.needs(x);
        self.push(Tensor::vector(out), Op::MeanRows(x), needs)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        assert_eq!(self.value(x).rank(), 1, "softmax needs a vector");
        let out = softmax_unchecked(self.data(x));
        let needs = self.needs(x);
        self.push(Tensor::vector(out), Op::Softmax(x), needs)
    }

    /// Natural log of one probability, floored at [`LOG_FLOOR`].
    pub fn log_at(&mut self, p: Var, index: usize) -> Var {
        let prob = self.data(p)[index];
        let clamped = prob < LOG_FLOOR;
        if clamped {
            self.clamp_count += 1;
        }
        let out = prob.max(LOG_FLOOR).ln();
        let needs = self.needs(p);
        self.push(Tensor::scalar(out), Op::LogAt { p, index, clamped }, needs)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = self.value(x).sum_squares();
        let needs = self.needs(x);
        self.push(Tensor::scalar(out), Op::SumSquares(x), needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(out), Op::SumAll(x), needs)
    }

    /// Inner product of two vectors as a scalar node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum_all(m)
    }
}

/// Gradients produced by [`backward`], indexed by tape variable.
#[derive(Debug)]
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.slots.get(v.0).and_then(|s| s.as_deref())
    }

    /// Gradient of `v`, or zeros if nothing flowed into it.
    pub fn dense(&self, tape: &Tape, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; tape.value(v).numel()])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// Reverse sweep from a scalar `loss`.
pub fn backward(tape: &Tape, loss: Var) -> Result<Grads> {
    let lv = tape.value(loss);
    if lv.numel() != 1 {
        return Err(invalid(format!(
            "backward needs a scalar loss, got shape {:?}",
            lv.shape()
        )));
    }
    if !lv.data()[0].is_finite() {
        return Err(invalid("backward from a non-finite loss"));
    }
    let n = loss.0 + 1;
    let mut slots: Vec<Option<Vec<f64>>> = vec![None; n];
    slots[loss.0] = Some(vec![1.0]);

    for i in (0..n).rev() {
        let node = &tape.nodes[i];
        if !node.needs_grad || matches!(node.op, Op::Leaf) {
            continue;
        }
        let Some(g) = slots[i].take() else { continue };
        propagate(tape, node, &g, &mut slots);
        slots[i] = Some(g);
    }
    Ok(Grads { slots })
}

fn slot<'a>(tape: &Tape, slots: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !tape.nodes[v.0].needs_grad {
        return None;
    }
    let numel = tape.nodes[v.0].value.numel();
    Some(slots[v.0].get_or_insert_with(|| vec![0.0; numel]))
}

fn propagate(tape: &Tape, node: &Node, g: &[f64], slots: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatVec { w, x } => {
            let (m, n) = tape.value(*w).dims2();
            let xv = tape.data(*x);
            if let Some(gw) = slot(tape, slots, *w) {
                for r in 0..m {
                    if g[r] != 0.0 {
                        axpy(&mut gw[r * n..(r + 1) * n], g[r], xv);
                    }
                }
            }
            let wd = tape.data(*w);
            if let Some(gx) = slot(tape, slots, *x) {
                for r in 0..m {
                    if g[r] != 0.0 {
                        axpy(gx, g[r], &wd[r * n..(r + 1) * n]);
                    }
                }
            }
        }
        Op::MatMulT { x, w } => {
            let (j, n) = tape.value(*x).dims2();
            let (m, _) = tape.value(*w).dims2();
            let xd = tape.data(*x);
            let wd = tape.data(*w);
            if let Some(gw) = slot(tape, slots, *w) {
                for r in 0..j {
                    let xr = &xd[r * n..(r + 1) * n];
                    for c in 0..m {
                        let gv = g[r * m + c];
                        if gv != 0.0 {
                            axpy(&mut gw[c * n..(c + 1) * n], gv, xr);
                        }
                    }
                }
            }
            if let Some(gx) = slot(tape, slots, *x) {
                for r in 0..j {
                    let gxr = &mut gx[r * n..(r + 1) * n];
                    for c in 0..m {
                        let gv = g[r * m + c];
                        if gv != 0.0 {
                            axpy(gxr, gv, &wd[c * n..(c + 1) * n]);
                        }
                    }
                }
            }
        }
        Op::MatTVec { x, a } => {
            let (j, n) = tape.value(*x).dims2();
            let xd = tape.data(*x);
            let av = tape.data(*a);
            if let Some(ga) = slot(tape, slots, *a) {
                for r in 0..j {
                    ga[r] += dot(&xd[r * n..(r + 1) * n], g);
                }
            }
            if let Some(gx) = slot(tape, slots, *x) {
                for r in 0..j {
                    axpy(&mut gx[r * n..(r + 1) * n], av[r], g);
                }
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(gv) = slot(tape, slots, v) {
                    axpy(gv, 1.0, g);
                }
            }
        }
        Op::Sum(terms) => {
            for &v in terms {
                if let Some(gv) = slot(tape, slots, v) {
                    axpy(gv, 1.0, g);
                }
            }
        }
        Op::AddRows { x, v } => {
            let (j, m) = tape.value(*x).dims2();
            if let Some(gx) = slot(tape, slots, *x) {
                axpy(gx, 1.0, g);
            }
            if let Some(gv) = slot(tape, slots, *v) {
                for r in 0..j {
                    axpy(gv, 1.0, &g[r * m..(r + 1) * m]);
                }
            }
        }
        Op::Mul(a, b) => {
            let av = tape.data(*a);
            let bv = tape.data(*b);
            if let Some(ga) = slot(tape, slots, *a) {
                for ((o, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                    *o += gi * bi;
                }
            }
            if let Some(gb) = slot(tape, slots, *b) {
                for ((o, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                    *o += gi * ai;
                }
            }
        }
        Op::MulConst { x, factor } => {
            if let Some(gx) = slot(tape, slots, *x) {
                for ((o, gi), f) in gx.iter_mut().zip(g).zip(factor) {
                    *o += gi * f;
                }
            }
        }
        Op::Scale(x, f) => {
            if let Some(gx) = slot(tape, slots, *x) {
                axpy(gx, *f, g);
            }
        }
        Op::Tanh(x) => {
            let y = node.value.data();
            if let Some(gx) = slot(tape, slots, *x) {
                for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *o += gi * (1.0 - yi * yi);
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = node.value.data();
            if let Some(gx) = slot(tape, slots, *x) {
                for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *o += gi * yi * (1.0 - yi);
                }
            }
        }
        Op::Slice { x, start } => {
            if let Some(gx) = slot(tape, slots, *x) {
                axpy(&mut gx[*start..*start + g.len()], 1.0, g);
            }
        }
        Op::Concat(parts) => {
            let mut off = 0;
            for &p in parts {
                let len = tape.value(p).numel();
                if let Some(gp) = slot(tape, slots, p) {
                    axpy(gp, 1.0, &g[off..off + len]);
                }
                off += len;
            }
        }
        Op::ConcatCols(parts) => {
            let (rows, total) = node.value.dims2();
            let mut off = 0;
            for &p in parts {
                let (_, c) = tape.value(p).dims2();
                if let Some(gp) = slot(tape, slots, p) {
                    for r in 0..rows {
                        axpy(
                            &mut gp[r * c..(r + 1) * c],
                            1.0,
                            &g[r * total + off..r * total + off + c],
                        );
                    }
                }
                off += c;
            }
        }
        Op::StackRows(rows) => {
            let (_, width) = node.value.dims2();
            for (r, &v) in rows.iter().enumerate() {
                if let Some(gv) = slot(tape, slots, v) {
                    axpy(gv, 1.0, &g[r * width..(r + 1) * width]);
                }
            }
        }
        Op::Row { x, row } | Op::Gather { table: x, row } => {
            let (_, n) = tape.value(*x).dims2();
            if let Some(gx) = slot(tape, slots, *x) {
                axpy(&mut gx[row * n..(row + 1) * n], 1.0, g);
            }
        }
        Op::MeanRows(x) => {
            let (j, n) = tape.value(*x).dims2();
            if let Some(gx) = slot(tape, slots, *x) {
                let inv = 1.0 / j as f64;
                for r in 0..j {
                    axpy(&mut gx[r * n..(r + 1) * n], inv, g);
                }
            }
        }
        Op::Softmax(x) => {
            let p = node.value.data();
            let inner = dot(g, p);
            if let Some(gx) = slot(tape, slots, *x) {
                for ((o, gi), pi) in gx.iter_mut().zip(g).zip(p) {
                    *o += pi * (gi - inner);
                }
            }
        }
        Op::LogAt { p, index, clamped } => {
            if *clamped {
                return;
            }
            let prob = tape.data(*p)[*index];
            if let Some(gp) = slot(tape, slots, *p) {
                gp[*index] += g[0] / prob;
            }
        }
        Op::SumSquares(x) => {
            let xv = tape.data(*x);
            if let Some(gx) = slot(tape, slots, *x) {
                axpy(gx, 2.0 * g[0], xv);
            }
        }
        Op::SumAll(x) => {
            if let Some(gx) = slot(tape, slots, *x) {
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
        }
    }
}
