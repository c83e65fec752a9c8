//! Minimal reverse-mode automatic differentiation over 2-D `f64` arrays.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live
//! in a borrowed [`ParamStore`] and are referenced, not copied, so building
//! a graph does not clone the weights. [`Tape::backward`] accumulates
//! parameter gradients into a [`Gradients`] buffer.

use ndarray::{concatenate, linalg::general_mat_mul, s, Array2, ArrayView2, Axis};

use super::params::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulBt(Var, Var),
    Add(Var, Var),
    /// `a (n x m) + b (1 x m)` broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Softmax { x: Var },
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Gather { table: Var, rows: Vec<usize> },
    Dropout { x: Var },
    /// `sum_i w_i * -log softmax(x_i)[t_i]` as a 1 x 1 value.
    Nll { logits: Var, targets: Vec<usize>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Array2<f64>,
    /// Op-specific saved intermediate (normalized input, softmax, mask).
    saved: Option<Array2<f64>>,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const LN_EPS: f64 = 1e-5;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax in place; entries where `mask` is false get probability 0.
fn softmax_rows(x: &mut Array2<f64>, causal: bool) {
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        let limit = if causal { i + 1 } else { row.len() };
        let max = row.iter().take(limit).copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j < limit {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.mapv_inplace(|v| v / sum);
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::with_capacity(1024) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.push_saved(op, value, None)
    }

    fn push_saved(&mut self, op: Op, value: Array2<f64>, saved: Option<Array2<f64>>) -> Var {
        self.nodes.push(Node { op, value, saved });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> ArrayView2<'_, f64> {
        match self.nodes[v.0].op {
            Op::Param(i) => self.params.tensor(i).view(),
            _ => self.nodes[v.0].value.view(),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn param(&mut self, name: &str) -> Var {
        let i = self.params.index(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.push(Op::Param(i), Array2::zeros((0, 0)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(Op::MatMulBt(a, b), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) + &self.value(b);
        self.push(Op::Add(a, b), v)
    }

    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = &self.value(a) + &self.value(b);
        self.push(Op::AddRow(a, b), v)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).mapv(|x| x * k);
        self.push(Op::Scale(a, k), v)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        self.push(Op::Gelu(a), v)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, m) = xv.dim();
        let mut xhat = Array2::zeros((n, m));
        let mut inv_std = Array2::zeros((n, 1));
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.sum() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[[i, 0]] = is;
            for j in 0..m {
                xhat[[i, j]] = (row[j] - mean) * is;
            }
        }
        let out = &(&xhat * &self.value(gamma)) + &self.value(beta);
        let saved = concatenate(Axis(1), &[xhat.view(), inv_std.view()]).expect("shapes");
        self.push_saved(Op::LayerNorm { x, gamma, beta }, out, Some(saved))
    }

    /// Row-wise softmax, optionally with a lower-triangular (causal) mask.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let mut v = self.value(x).to_owned();
        softmax_rows(&mut v, causal);
        self.push(Op::Softmax { x }, v)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(Op::SliceCols(x, start), v)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(Op::SliceRows(x, start), v)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|v| self.value(*v)).collect();
        let v = concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(Op::ConcatCols(xs.to_vec()), v)
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        let views: Vec<_> = xs.iter().map(|v| self.value(*v)).collect();
        let v = concatenate(Axis(0), &views).expect("column counts must agree");
        self.push(Op::ConcatRows(xs.to_vec()), v)
    }

    /// Rows of `table` selected by index (embedding lookup).
    pub fn gather(&mut self, table: Var, rows: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut v = Array2::zeros((rows.len(), t.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).assign(&t.row(r));
        }
        self.push(Op::Gather { table, rows }, v)
    }

    /// Inverted dropout with an explicit keep mask (already scaled).
    pub fn dropout(&mut self, x: Var, mask: Array2<f64>) -> Var {
        let v = &self.value(x) * &mask;
        self.push_saved(Op::Dropout { x }, v, Some(mask))
    }

    /// Weighted negative log-likelihood of `targets` under row-wise softmax
    /// of `logits`.
    pub fn nll(&mut self, logits: Var, targets: Vec<usize>, weights: Vec<f64>) -> Var {
        let mut probs = self.value(logits).to_owned();
        assert_eq!(probs.nrows(), targets.len());
        assert_eq!(targets.len(), weights.len());
        let mut total = 0.0;
        for (i, mut row) in probs.rows_mut().into_iter().enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            if weights[i] != 0.0 {
                total += weights[i] * (lse - row[targets[i]]);
            }
            row.mapv_inplace(|v| (v - lse).exp());
        }
        self.push_saved(
            Op::Nll { logits, targets, weights },
            Array2::from_elem((1, 1), total),
            Some(probs),
        )
    }

    /// Backpropagates `seed * d(output)/d(params)` into `grads`.
    pub fn backward(&self, output: Var, seed: f64, grads: &mut Gradients) {
        let mut adj: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let (r, c) = self.shape(output);
        adj[output.0] = Some(Array2::from_elem((r, c), seed));

        fn acc(adj: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut adj[v.0] {
                Some(a) => *a += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(i) => grads.tensor_mut(*i).scaled_add(1.0, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if let Op::Param(i) = self.nodes[b.0].op {
                        general_mat_mul(1.0, &av.t(), &g, 1.0, grads.tensor_mut(i));
                    } else {
                        acc(&mut adj, *b, av.t().dot(&g));
                    }
                    acc(&mut adj, *a, g.dot(&bv.t()));
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut adj, *a, g.dot(&bv));
                    acc(&mut adj, *b, g.t().dot(&av));
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::AddRow(a, b) => {
                    acc(&mut adj, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut adj, *a, g);
                }
                Op::Scale(a, k) => acc(&mut adj, *a, g.mapv(|x| x * k)),
                Op::Gelu(a) => {
                    let mut d = self.value(*a).mapv(gelu_grad);
                    d *= &g;
                    acc(&mut adj, *a, d);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let saved = node.saved.as_ref().expect("layer norm cache");
                    let m = saved.ncols() - 1;
                    let xhat = saved.slice(s![.., ..m]);
                    let inv_std = saved.column(m);
                    acc(&mut adj, *gamma, (&g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut adj, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let gv = self.value(*gamma);
                    let dxhat = &g * &gv;
                    let mut dx = Array2::zeros(dxhat.dim());
                    let mf = m as f64;
                    for i in 0..dxhat.nrows() {
                        let row = dxhat.row(i);
                        let xr = xhat.row(i);
                        let mean_d = row.sum() / mf;
                        let mean_dx = row.iter().zip(xr.iter()).map(|(a, b)| a * b).sum::<f64>() / mf;
                        for j in 0..m {
                            dx[[i, j]] = inv_std[i] * (row[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    acc(&mut adj, *x, dx);
                }
                Op::Softmax { x } => {
                    let p = &node.value;
                    let mut dx = &g * p;
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let dot: f64 = row.sum();
                        let prow = p.row(i);
                        for (j, v) in row.iter_mut().enumerate() {
                            *v -= prow[j] * dot;
                        }
                    }
                    acc(&mut adj, *x, dx);
                }
                Op::SliceCols(x, start) => {
                    let mut full = Array2::zeros(self.shape(*x));
                    let len = g.ncols();
                    full.slice_mut(s![.., *start..*start + len]).assign(&g);
                    acc(&mut adj, *x, full);
                }
                Op::SliceRows(x, start) => {
                    let mut full = Array2::zeros(self.shape(*x));
                    let len = g.nrows();
                    full.slice_mut(s![*start..*start + len, ..]).assign(&g);
                    acc(&mut adj, *x, full);
                }
                Op::ConcatCols(xs) => {
                    let mut off = 0;
                    for x in xs {
                        let w = self.shape(*x).1;
                        acc(&mut adj, *x, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(xs) => {
                    let mut off = 0;
                    for x in xs {
                        let h = self.shape(*x).0;
                        acc(&mut adj, *x, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::Gather { table, rows } => {
                    if let Op::Param(i) = self.nodes[table.0].op {
                        let t = grads.tensor_mut(i);
                        for (k, &r) in rows.iter().enumerate() {
                            t.row_mut(r).scaled_add(1.0, &g.row(k));
                        }
                    } else {
                        let mut d = Array2::zeros(self.shape(*table));
                        for (k, &r) in rows.iter().enumerate() {
                            d.row_mut(r).scaled_add(1.0, &g.row(k));
                        }
                        acc(&mut adj, *table, d);
                    }
                }
                Op::Dropout { x } => {
                    let mask = node.saved.as_ref().expect("dropout mask");
                    acc(&mut adj, *x, &g * mask);
                }
                Op::Nll { logits, targets, weights } => {
                    let upstream = g[[0, 0]];
                    let mut d = node.saved.as_ref().expect("softmax cache").clone();
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        let w = weights[i] * upstream;
                        if w == 0.0 {
                            row.fill(0.0);
                            continue;
                        }
                        row.mapv_inplace(|p| p * w);
                        row[targets[i]] -= w;
                    }
                    acc(&mut adj, *logits, d);
                }
            }
        }
    }

    /// Row-wise probabilities cached by an [`Tape::nll`] node.
    pub fn nll_probs(&self, v: Var) -> Option<ArrayView2<'_, f64>> {
        match self.nodes[v.0].op {
            Op::Nll { .. } => self.nodes[v.0].saved.as_ref().map(|a| a.view()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store() -> ParamStore {
        let mut p = ParamStore::default();
        p.insert("w", array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.7]]);
        p.insert("g", array![[1.1, 0.9, 1.3]]);
        p.insert("b", array![[0.05, -0.1, 0.2]]);
        p.insert("e", array![[0.2, 0.1, -0.3], [0.0, 0.5, 0.4], [-0.6, 0.2, 0.1]]);
        p
    }

    /// Scalar loss exercising every op.
    fn loss(tape: &mut Tape) -> Var {
        let x = tape.constant(array![[0.7, -1.2], [0.3, 0.8], [-0.5, 0.1]]);
        let w = tape.param("w");
        let g = tape.param("g");
        let b = tape.param("b");
        let e = tape.param("e");
        let h = tape.matmul(x, w);
        let h = tape.add_row(h, b);
        let h = tape.gelu(h);
        let h = tape.layer_norm(h, g, b);
        let emb = tape.gather(e, vec![2, 0, 2]);
        let h = tape.add(h, emb);
        let a = tape.slice_cols(h, 0, 2);
        let c = tape.slice_cols(h, 1, 2);
        let scores = tape.matmul_bt(a, c);
        let scores = tape.scale(scores, 0.7);
        let p = tape.softmax(scores, true);
        let mixed = tape.matmul(p, h);
        let both = tape.concat_cols(&[mixed, h]);
        let r = tape.slice_rows(both, 1, 2);
        let stacked = tape.concat_rows(&[both, r]);
        let narrow = tape.slice_cols(stacked, 2, 3);
        let logits = tape.matmul_bt(narrow, e);
        tape.nll(logits, vec![0, 2, 1, 1, 0], vec![1.0, 0.5, 0.0, 2.0, 1.0])
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut params = store();
        let mut grads = Gradients::zeros_like(&params);
        {
            let mut tape = Tape::new(&params);
            let out = loss(&mut tape);
            tape.backward(out, 1.0, &mut grads);
        }
        let h = 1e-6;
        for i in 0..params.len() {
            let shape = params.tensor(i).dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let orig = params.tensor(i)[[r, c]];
                    params.tensor_mut(i)[[r, c]] = orig + h;
                    let fp = { let mut t = Tape::new(&params); let o = loss(&mut t); t.value(o)[[0, 0]] };
                    params.tensor_mut(i)[[r, c]] = orig - h;
                    let fm = { let mut t = Tape::new(&params); let o = loss(&mut t); t.value(o)[[0, 0]] };
                    params.tensor_mut(i)[[r, c]] = orig;
                    let fd = (fp - fm) / (2.0 * h);
                    let an = grads.tensor(i)[[r, c]];
                    assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "{} [{r},{c}]: fd {fd} vs {an}", params.name(i));
                }
            }
        }
    }

    #[test]
    fn causal_softmax_zeroes_future() {
        let p = ParamStore::default();
        let mut t = Tape::new(&p);
        let x = t.constant(array![[1.0, 2.0, 3.0], [0.5, 0.1, 9.0], [1.0, 1.0, 1.0]]);
        let s = t.softmax(x, true);
        let v = t.value(s);
        assert_eq!(v[[0, 0]], 1.0);
        assert_eq!(v[[0, 1]], 0.0);
        assert_eq!(v[[1, 2]], 0.0);
        for row in v.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-15);
        }
    }
}
