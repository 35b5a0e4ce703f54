//! Tape-based reverse-mode differentiation.
//!
//! Every forward op pushes a node holding its value, its parent nodes and a
//! backward closure mapping the output gradient to one gradient per parent.
//! [`Tape::backward`] walks the tape in reverse and accumulates gradients of
//! parameter leaves into their [`ParamStore`] slots.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{canonical_sum, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Arc<Tensor>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    param: Option<ParamId>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Dimension(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn expect_matrix(op: &str, t: &Tensor) -> Result<(usize, usize)> {
    if t.ndim() != 2 {
        return Err(Error::Dimension(format!(
            "{op}: expected a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn expect_vector(op: &str, t: &Tensor) -> Result<usize> {
    if t.ndim() != 1 {
        return Err(Error::Dimension(format!(
            "{op}: expected a vector, got shape {:?}",
            t.shape()
        )));
    }
    Ok(t.shape()[0])
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        for k in 0..p {
            let mut acc = 0.0;
            for j in 0..n {
                acc += a[i * n + j] * b[j * p + k];
            }
            out[i * p + k] = acc;
        }
    }
    out
}

/// `a (m×n) · bᵀ` where `b` is `p×n`.
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * p];
    for i in 0..m {
        let ar = &a[i * n..(i + 1) * n];
        for k in 0..p {
            let br = &b[k * n..(k + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += br[j] * ar[j];
            }
            out[i * p + k] = acc;
        }
    }
    out
}

/// `aᵀ (n×m) · b` where `a` is `m×n` and `b` is `m×p`.
fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, n: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * p];
    for i in 0..m {
        for j in 0..n {
            let aij = a[i * n + j];
            if aij == 0.0 {
                continue;
            }
            for k in 0..p {
                out[j * p + k] += aij * b[i * p + k];
            }
        }
    }
    out
}

/// Canonical-order product `a (m×n) · b (n×d)`; the reduction over `n` is order-free.
fn mix_raw(a: &[f64], b: &[f64], m: usize, n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * d];
    let mut terms = vec![0.0; n];
    for i in 0..m {
        for c in 0..d {
            for j in 0..n {
                terms[j] = a[i * n + j] * b[j * d + c];
            }
            out[i * d + c] = canonical_sum(&mut terms);
        }
    }
    out
}

/// Softmax with masked logits replaced by negative infinity.
pub fn masked_softmax_slice(logits: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask.len() {
        return Err(Error::Dimension(format!(
            "masked_softmax: {} logits but mask of length {}",
            logits.len(),
            mask.len()
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidMask(format!(
            "all {} entries are masked",
            mask.len()
        )));
    }
    let z: Vec<f64> = logits
        .iter()
        .zip(mask)
        .map(|(&x, &keep)| if keep { x } else { f64::NEG_INFINITY })
        .collect();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let mut kept: Vec<f64> = ex
        .iter()
        .zip(mask)
        .filter(|(_, &k)| k)
        .map(|(&e, _)| e)
        .collect();
    let total = canonical_sum(&mut kept);
    Ok(ex.iter().map(|&e| e / total).collect())
}

fn softmax_backward(y: &[f64], g: &[f64]) -> Vec<f64> {
    let mut terms: Vec<f64> = y.iter().zip(g).map(|(a, b)| a * b).collect();
    let dot = canonical_sum(&mut terms);
    y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - dot)).collect()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor,
        parents: &[Var],
        backward: BackwardFn,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op));
        }
        let needs_grad = parents.iter().any(|&p| self.needs_grad(p));
        self.nodes.push(Node {
            value: Arc::new(value),
            parents: parents.iter().map(|p| p.0).collect(),
            backward: needs_grad.then_some(backward),
            param: None,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            parents: Vec::new(),
            backward: None,
            param: None,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// The leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_leaves.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).shared_value(),
            parents: Vec::new(),
            backward: None,
            param: Some(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_leaves.insert(id, v);
        v
    }

    /// The parameter a leaf was created from, if any.
    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        self.nodes[v.0].param
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = expect_matrix("matmul", ta)?;
        let (n2, p) = expect_matrix("matmul", tb)?;
        if n != n2 {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let out = Tensor::new(vec![m, p], matmul_raw(ta.data(), tb.data(), m, n, p))?;
        self.push(
            "matmul",
            out,
            &[a, b],
            Box::new(move |g, ps, _| {
                let ga = matmul_nt_raw(g.data(), ps[1].data(), m, p, n);
                let gb = matmul_tn_raw(ps[0].data(), g.data(), m, n, p);
                vec![
                    Tensor::new(vec![m, n], ga).unwrap(),
                    Tensor::new(vec![n, p], gb).unwrap(),
                ]
            }),
        )
    }

    /// `a · bᵀ` for `a: m×n`, `b: p×n`. Row `i` of the result is `b · a_i`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = expect_matrix("matmul_nt", ta)?;
        let (p, n2) = expect_matrix("matmul_nt", tb)?;
        if n != n2 {
            return Err(shape_err("matmul_nt", ta.shape(), tb.shape()));
        }
        let out = Tensor::new(vec![m, p], matmul_nt_raw(ta.data(), tb.data(), m, n, p))?;
        self.push(
            "matmul_nt",
            out,
            &[a, b],
            Box::new(move |g, ps, _| {
                // ga = g · b (m×p · p×n), gb = gᵀ · a (p×m · m×n)
                let ga = matmul_raw(g.data(), ps[1].data(), m, p, n);
                let gb = matmul_tn_raw(g.data(), ps[0].data(), m, p, n);
                vec![
                    Tensor::new(vec![m, n], ga).unwrap(),
                    Tensor::new(vec![p, n], gb).unwrap(),
                ]
            }),
        )
    }

    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        let (ta, tx) = (self.value(a), self.value(x));
        let (m, n) = expect_matrix("matvec", ta)?;
        let n2 = expect_vector("matvec", tx)?;
        if n != n2 {
            return Err(shape_err("matvec", ta.shape(), tx.shape()));
        }
        let out = Tensor::vector(matmul_nt_raw(tx.data(), ta.data(), 1, n, m));
        self.push(
            "matvec",
            out,
            &[a, x],
            Box::new(move |g, ps, _| {
                let (a, x) = (ps[0].data(), ps[1].data());
                let mut ga = vec![0.0; m * n];
                let mut gx = vec![0.0; n];
                for i in 0..m {
                    let gi = g.data()[i];
                    for j in 0..n {
                        ga[i * n + j] = gi * x[j];
                        gx[j] += a[i * n + j] * gi;
                    }
                }
                vec![
                    Tensor::new(vec![m, n], ga).unwrap(),
                    Tensor::vector(gx),
                ]
            }),
        )
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(
            "add",
            out,
            &[a, b],
            Box::new(|g, _, _| vec![g.clone(), g.clone()]),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(
            "sub",
            out,
            &[a, b],
            Box::new(|g, _, _| vec![g.clone(), g.map(|v| -v)]),
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(
            "mul",
            out,
            &[a, b],
            Box::new(|g, ps, _| {
                vec![
                    g.zip_map(ps[1], |g, y| g * y),
                    g.zip_map(ps[0], |g, x| g * x),
                ]
            }),
        )
    }

    /// Elementwise product with a constant tensor (dropout masks, loss weights).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        if self.value(a).shape() != c.shape() {
            return Err(shape_err("mul_const", self.value(a).shape(), c.shape()));
        }
        let out = self.value(a).zip_map(&c, |x, y| x * y);
        self.push(
            "mul_const",
            out,
            &[a],
            Box::new(move |g, _, _| vec![g.zip_map(&c, |g, y| g * y)]),
        )
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push(
            "scale",
            out,
            &[a],
            Box::new(move |g, _, _| vec![g.map(|v| v * factor)]),
        )
    }

    /// Adds vector `v` to every row of matrix `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        let (r, c) = expect_matrix("add_row", tm)?;
        if expect_vector("add_row", tv)? != c {
            return Err(shape_err("add_row", tm.shape(), tv.shape()));
        }
        let mut out = tm.clone();
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[i * c + j] += tv.data()[j];
            }
        }
        self.push(
            "add_row",
            out,
            &[m, v],
            Box::new(move |g, _, _| {
                let mut gv = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gv[j] += g.data()[i * c + j];
                    }
                }
                vec![g.clone(), Tensor::vector(gv)]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        self.push(
            "sigmoid",
            out,
            &[a],
            Box::new(|g, _, y| vec![g.zip_map(y, |g, y| g * y * (1.0 - y))]),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(
            "tanh",
            out,
            &[a],
            Box::new(|g, _, y| vec![g.zip_map(y, |g, y| g * (1.0 - y * y))]),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(
            "leaky_relu",
            out,
            &[a],
            Box::new(move |g, ps, _| {
                vec![g.zip_map(ps[0], |g, x| if x > 0.0 { g } else { slope * g })]
            }),
        )
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::new();
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            expect_vector("concat", t)?;
            lens.push(t.len());
            data.extend_from_slice(t.data());
        }
        self.push(
            "concat",
            Tensor::vector(data),
            parts,
            Box::new(move |g, _, _| {
                let mut off = 0;
                lens.iter()
                    .map(|&l| {
                        let t = Tensor::vector(g.data()[off..off + l].to_vec());
                        off += l;
                        t
                    })
                    .collect()
            }),
        )
    }

    /// Contiguous sub-vector `[start, start + len)`.
    pub fn slice(&mut self, v: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(v);
        let n = expect_vector("slice", t)?;
        if start + len > n {
            return Err(Error::Dimension(format!(
                "slice [{start}, {}) out of range for length {n}",
                start + len
            )));
        }
        let out = Tensor::vector(t.data()[start..start + len].to_vec());
        self.push(
            "slice",
            out,
            &[v],
            Box::new(move |g, _, _| {
                let mut gv = vec![0.0; n];
                gv[start..start + len].copy_from_slice(g.data());
                vec![Tensor::vector(gv)]
            }),
        )
    }

    /// Stacks rows: vectors become one row each, matrices contribute all their rows.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("stack_rows: no inputs".into()));
        }
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut spans = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.ndim() > 2 || t.cols() != cols {
                return Err(shape_err("stack_rows", self.value(parts[0]).shape(), t.shape()));
            }
            spans.push((t.shape().to_vec(), t.len()));
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / cols.max(1);
        let out = Tensor::new(vec![rows, cols], data)?;
        self.push(
            "stack_rows",
            out,
            parts,
            Box::new(move |g, _, _| {
                let mut off = 0;
                spans
                    .iter()
                    .map(|(shape, n)| {
                        let t = Tensor::new(shape.clone(), g.data()[off..off + n].to_vec())
                            .unwrap();
                        off += n;
                        t
                    })
                    .collect()
            }),
        )
    }

    /// Rows `ids` of matrix `m` (embedding lookup).
    pub fn gather_rows(&mut self, m: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(m);
        let (r, c) = expect_matrix("gather_rows", t)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Dimension(format!(
                "gather_rows: row {bad} out of range for {r} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        let ids = ids.to_vec();
        self.push(
            "gather_rows",
            out,
            &[m],
            Box::new(move |g, _, _| {
                let mut gm = vec![0.0; r * c];
                for (k, &i) in ids.iter().enumerate() {
                    for j in 0..c {
                        gm[i * c + j] += g.data()[k * c + j];
                    }
                }
                vec![Tensor::new(vec![r, c], gm).unwrap()]
            }),
        )
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let t = self.value(m);
        let (r, c) = expect_matrix("row", t)?;
        if i >= r {
            return Err(Error::Dimension(format!("row {i} out of range for {r} rows")));
        }
        let out = Tensor::vector(t.row(i).to_vec());
        self.push(
            "row",
            out,
            &[m],
            Box::new(move |g, _, _| {
                let mut gm = vec![0.0; r * c];
                gm[i * c..(i + 1) * c].copy_from_slice(g.data());
                vec![Tensor::new(vec![r, c], gm).unwrap()]
            }),
        )
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        self.push(
            "dot",
            Tensor::scalar(s),
            &[a, b],
            Box::new(|g, ps, _| {
                let gs = g.item();
                vec![ps[1].map(|v| v * gs), ps[0].map(|v| v * gs)]
            }),
        )
    }

    /// Sum of all elements.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut vals = self.value(a).data().to_vec();
        let s = canonical_sum(&mut vals);
        let shape = self.value(a).shape().to_vec();
        self.push(
            "sum",
            Tensor::scalar(s),
            &[a],
            Box::new(move |g, _, _| vec![Tensor::filled(&shape, g.item())]),
        )
    }

    /// Order-free sum of scalar nodes.
    pub fn sum_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut vals = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.len() != 1 {
                return Err(Error::Dimension(format!(
                    "sum_scalars: non-scalar input of shape {:?}",
                    t.shape()
                )));
            }
            vals.push(t.item());
        }
        let shapes: Vec<Vec<usize>> = parts
            .iter()
            .map(|&p| self.value(p).shape().to_vec())
            .collect();
        self.push(
            "sum_scalars",
            Tensor::scalar(canonical_sum(&mut vals)),
            parts,
            Box::new(move |g, _, _| {
                shapes
                    .iter()
                    .map(|s| Tensor::filled(s, g.item()))
                    .collect()
            }),
        )
    }

    /// Softmax over a vector with masked entries forced to probability zero.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        expect_vector("masked_softmax", t)?;
        let y = masked_softmax_slice(t.data(), mask)?;
        self.push(
            "masked_softmax",
            Tensor::vector(y),
            &[logits],
            Box::new(|g, _, y| vec![Tensor::vector(softmax_backward(y.data(), g.data()))]),
        )
    }

    pub fn softmax(&mut self, logits: Var) -> Result<Var> {
        let n = self.value(logits).len();
        self.masked_softmax(logits, &vec![true; n])
    }

    /// Row-wise masked softmax of an `m×n` matrix; `mask` is row-major `m×n`.
    pub fn masked_softmax_rows(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(logits);
        let (m, n) = expect_matrix("masked_softmax_rows", t)?;
        if mask.len() != m * n {
            return Err(Error::Dimension(format!(
                "masked_softmax_rows: mask of length {} for {m}x{n} logits",
                mask.len()
            )));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(masked_softmax_slice(t.row(i), &mask[i * n..(i + 1) * n])?);
        }
        self.push(
            "masked_softmax_rows",
            Tensor::new(vec![m, n], out)?,
            &[logits],
            Box::new(move |g, _, y| {
                let mut gx = Vec::with_capacity(m * n);
                for i in 0..m {
                    gx.extend(softmax_backward(y.row(i), g.row(i)));
                }
                vec![Tensor::new(vec![m, n], gx).unwrap()]
            }),
        )
    }

    /// `out[i][j] = a[i] + b[j]`.
    pub fn outer_add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let m = expect_vector("outer_add", ta)?;
        let n = expect_vector("outer_add", tb)?;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(ta.data()[i] + tb.data()[j]);
            }
        }
        self.push(
            "outer_add",
            Tensor::new(vec![m, n], out)?,
            &[a, b],
            Box::new(move |g, _, _| {
                let mut ga = vec![0.0; m];
                let mut gb = vec![0.0; n];
                for i in 0..m {
                    for j in 0..n {
                        let v = g.data()[i * n + j];
                        ga[i] += v;
                        gb[j] += v;
                    }
                }
                vec![Tensor::vector(ga), Tensor::vector(gb)]
            }),
        )
    }

    /// `weights (m×n) · rows (n×d)` with an order-free reduction over `n`.
    pub fn mix(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (tw, tr) = (self.value(weights), self.value(rows));
        let (m, n) = expect_matrix("mix", tw)?;
        let (n2, d) = expect_matrix("mix", tr)?;
        if n != n2 {
            return Err(shape_err("mix", tw.shape(), tr.shape()));
        }
        let out = Tensor::new(vec![m, d], mix_raw(tw.data(), tr.data(), m, n, d))?;
        self.push(
            "mix",
            out,
            &[weights, rows],
            Box::new(move |g, ps, _| {
                let gw = matmul_nt_raw(g.data(), ps[1].data(), m, d, n);
                let gr = matmul_tn_raw(ps[0].data(), g.data(), m, n, d);
                vec![
                    Tensor::new(vec![m, n], gw).unwrap(),
                    Tensor::new(vec![n, d], gr).unwrap(),
                ]
            }),
        )
    }

    /// `Σ_j w_j · rows_j` with an order-free reduction.
    pub fn weighted_sum(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (tw, tr) = (self.value(weights), self.value(rows));
        let n = expect_vector("weighted_sum", tw)?;
        let (n2, d) = expect_matrix("weighted_sum", tr)?;
        if n != n2 {
            return Err(shape_err("weighted_sum", tw.shape(), tr.shape()));
        }
        let out = Tensor::vector(mix_raw(tw.data(), tr.data(), 1, n, d));
        self.push(
            "weighted_sum",
            out,
            &[weights, rows],
            Box::new(move |g, ps, _| {
                let gw = matmul_nt_raw(g.data(), ps[1].data(), 1, d, n);
                let gr = matmul_tn_raw(ps[0].data(), g.data(), 1, n, d);
                vec![Tensor::vector(gw), Tensor::new(vec![n, d], gr).unwrap()]
            }),
        )
    }

    /// Mean of the rows whose mask entry is set; unmasked rows are excluded entirely.
    pub fn masked_mean_rows(&mut self, m: Var, mask: &[bool]) -> Result<Var> {
        let t = self.value(m);
        let (r, c) = expect_matrix("masked_mean_rows", t)?;
        if mask.len() != r {
            return Err(Error::Dimension(format!(
                "masked_mean_rows: mask of length {} for {r} rows",
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::InvalidMask("masked_mean_rows: no rows kept".into()));
        }
        let mut out = vec![0.0; c];
        let mut terms = Vec::with_capacity(count);
        for (j, o) in out.iter_mut().enumerate() {
            terms.clear();
            terms.extend((0..r).filter(|&i| mask[i]).map(|i| t.data()[i * c + j]));
            *o = canonical_sum(&mut terms) / count as f64;
        }
        let mask = mask.to_vec();
        self.push(
            "masked_mean_rows",
            Tensor::vector(out),
            &[m],
            Box::new(move |g, _, _| {
                let mut gm = vec![0.0; r * c];
                for i in (0..r).filter(|&i| mask[i]) {
                    for j in 0..c {
                        gm[i * c + j] = g.data()[j] / count as f64;
                    }
                }
                vec![Tensor::new(vec![r, c], gm).unwrap()]
            }),
        )
    }

    /// `-log softmax(logits)[target]`, computed stably from logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let t = self.value(logits);
        let n = expect_vector("cross_entropy", t)?;
        if target >= n {
            return Err(Error::Data(format!(
                "cross_entropy: target {target} out of range for {n} classes"
            )));
        }
        let max = t.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut ex: Vec<f64> = t.data().iter().map(|&x| (x - max).exp()).collect();
        let total = canonical_sum(&mut ex.clone());
        let loss = max + total.ln() - t.data()[target];
        for e in &mut ex {
            *e /= total;
        }
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            &[logits],
            Box::new(move |g, _, _| {
                let gs = g.item();
                let mut gx: Vec<f64> = ex.iter().map(|p| p * gs).collect();
                gx[target] -= gs;
                vec![Tensor::vector(gx)]
            }),
        )
    }

    /// Inverted dropout: zeroes each element with probability `rate` and rescales the rest.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        if rate >= 1.0 {
            return Err(Error::Config(format!("dropout rate {rate} must be < 1")));
        }
        let shape = self.value(a).shape().to_vec();
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.mul_const(a, Tensor::new(shape, mask)?)
    }

    /// Gradients of `loss` with respect to every node that needs one.
    pub fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(g) = grads[i].as_ref() else {
                continue;
            };
            let parents: Vec<&Tensor> = node
                .parents
                .iter()
                .map(|&p| self.nodes[p].value.as_ref())
                .collect();
            let pgrads = backward(g, &parents, &node.value);
            for (&p, pg) in node.parents.iter().zip(pgrads) {
                if !self.nodes[p].needs_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(grads)
    }

    /// Accumulates `d loss / d param` into every reachable parameter's gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(id), Some(g)) = (self.nodes[i].param, g) {
                let slot = store.get_mut(id).gradient_mut();
                if slot.shape() != g.shape() {
                    return Err(Error::Contract(format!(
                        "gradient shape {:?} does not match parameter `{}`",
                        g.shape(),
                        store.get(id).name()
                    )));
                }
                slot.add_assign(&g);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let col = tape.constant(Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap());
        let out = tape.matmul(eye, col).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 4.0]);

        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let out = tape.matmul(a, col).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn masked_softmax_examples() {
        let y = masked_softmax_slice(&[1.0, 1.0], &[true, true]).unwrap();
        assert_eq!(y, vec![0.5, 0.5]);

        let y = masked_softmax_slice(&[5.0, 7.0, 9.0], &[true, false, true]).unwrap();
        assert!((y[0] - 0.01799).abs() < 1e-5);
        assert_eq!(y[1], 0.0);
        assert!((y[2] - 0.98201).abs() < 1e-5);

        let y = masked_softmax_slice(&[-3.7], &[true]).unwrap();
        assert_eq!(y, vec![1.0]);

        assert!(matches!(
            masked_softmax_slice(&[1.0, 2.0], &[false, false]),
            Err(Error::InvalidMask(_))
        ));
    }

    #[test]
    fn masked_entries_get_zero_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("x", Tensor::vector(vec![0.3, -1.2, 2.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, p);
        let y = tape.masked_softmax(x, &[true, false, true]).unwrap();
        let w = tape.constant(Tensor::vector(vec![1.0, 5.0, -2.0]));
        let l = tape.dot(y, w).unwrap();
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get(p).gradient().data()[1], 0.0);
        assert!(store.get(p).gradient().data()[0] != 0.0);
    }

    #[test]
    fn backward_trivial_cases() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![1.0, -2.0, 4.0])).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let s = tape.sum(v).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get(p).gradient().data(), &[1.0, 1.0, 1.0]);

        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let sq = tape.mul(v, v).unwrap();
        tape.backward(sq, &mut store).unwrap();
        assert_eq!(store.get(p).gradient().item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        assert!(matches!(
            tape.backward(v, &mut store),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1e308]));
        assert!(matches!(tape.scale(a, 10.0), Err(Error::NonFinite("scale"))));
    }

    #[test]
    fn param_leaf_is_shared() {
        let mut store = ParamStore::new();
        let p = store.add("p", Tensor::scalar(1.0)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, p);
        let b = tape.param(&store, p);
        assert_eq!(a, b);
        assert_eq!(tape.param_of(a), Some(p));
    }

    #[test]
    fn cross_entropy_of_uniform_is_log_n() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::vector(vec![0.0; 4]));
        let ce = tape.cross_entropy(l, 2).unwrap();
        assert!((tape.scalar(ce) - 4f64.ln()).abs() < 1e-15);
    }
}
