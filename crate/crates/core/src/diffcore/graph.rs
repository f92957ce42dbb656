//! Reverse-mode tape over [`Tensor2`] values.
//!
//! A [`Graph`] borrows a [`ParamStore`] for the duration of one forward pass.
//! Parameter leaves reference the store directly, so no weights are copied.
//! [`Graph::backward`] returns a [`Gradients`] value holding parameter and
//! input gradients; the caller folds it into the store with
//! [`ParamStore::accumulate`]. A graph can be differentiated once.

use std::collections::BTreeMap;

use super::params::ParamStore;
use super::tensor::Tensor2;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    MatMulBt(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    Reshape(NodeId),
    ConcatRows(Vec<NodeId>),
    Sum(NodeId),
    Mean(NodeId),
    Square(NodeId),
    /// Externally differentiated map `R^n -> R^m`: output is a 1×m row, the
    /// stored Jacobian is m×n.
    Custom(NodeId, Tensor2),
    /// Row-wise version of `Custom`: one Jacobian per row.
    CustomRows(NodeId, Vec<Tensor2>),
    RowDot(NodeId, NodeId),
    MulCol(NodeId, NodeId),
    ConcatCols(Vec<NodeId>),
    SliceCols(NodeId, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor2>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: Vec<(usize, Tensor2)>,
    inputs: BTreeMap<NodeId, Tensor2>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor2)> {
        self.params.iter().map(|(i, g)| (*i, g))
    }

    pub fn param(&self, id: usize) -> Option<&Tensor2> {
        self.params.iter().find(|(i, _)| *i == id).map(|(_, g)| g)
    }

    /// Gradient with respect to an input created with `requires_grad = true`.
    pub fn input(&self, id: NodeId) -> Option<&Tensor2> {
        self.inputs.get(&id)
    }
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_nodes: BTreeMap<usize, NodeId>,
    differentiated: bool,
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(64),
            param_nodes: BTreeMap::new(),
            differentiated: false,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor2 {
        let node = &self.nodes[id.0];
        match (&node.op, &node.value) {
            (Op::Param(p), _) => self.store.value(*p),
            (_, Some(v)) => v,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor2, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Leaf holding data. With `requires_grad` its gradient is reported in
    /// [`Gradients::input`].
    pub fn input(&mut self, value: Tensor2, requires_grad: bool) -> NodeId {
        self.push(Op::Input, value, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor2) -> NodeId {
        self.input(value, false)
    }

    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let pid = self.store.id(name)?;
        Ok(self.param_by_id(pid))
    }

    pub fn param_by_id(&mut self, pid: usize) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&pid) {
            return n;
        }
        self.nodes.push(Node {
            op: Op::Param(pid),
            value: None,
            needs_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.param_nodes.insert(pid, id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), v, ng))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul_bt(self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMulBt(a, b), v, ng))
    }

    /// Adds a 1×c row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::Dimension(format!(
                "row broadcast of {}x{} onto {}x{}",
                vb.rows(),
                vb.cols(),
                va.rows(),
                va.cols()
            )));
        }
        let mut out = va.clone();
        let c = va.cols();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += vb.data()[i % c];
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(Op::AddRow(a, bias), out, ng))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Dimension(format!(
                "{what} of {}x{} and {}x{}",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let mut v = self.value(a).clone();
        v.add_scaled(self.value(b), -1.0);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), v, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let mut v = self.value(a).clone();
        for (x, y) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), v, ng))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).scale(s);
        let ng = self.needs(a);
        self.push(Op::Scale(a, s), v, ng)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(gelu);
        let ng = self.needs(a);
        self.push(Op::Gelu(a), v, ng)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let (r, c) = src.shape();
        let mut out = src.clone();
        for i in 0..r {
            let row = &mut out.data_mut()[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let ng = self.needs(a);
        self.push(Op::SoftmaxRows(a), out, ng)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let v = self.value(a).reshaped(rows, cols)?;
        let ng = self.needs(a);
        Ok(self.push(Op::Reshape(a), v, ng))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = match parts.first() {
            Some(&p) => self.shape(p).1,
            None => return Err(Error::Dimension("concat of zero tensors".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Dimension(format!(
                    "concat of {}-column and {}-column tensors",
                    cols,
                    v.cols()
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let v = Tensor2::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), v, ng))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor2::row(vec![self.value(a).sum()]);
        let ng = self.needs(a);
        self.push(Op::Sum(a), v, ng)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let src = self.value(a);
        let v = Tensor2::row(vec![src.sum() / src.len() as f64]);
        let ng = self.needs(a);
        self.push(Op::Mean(a), v, ng)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let ng = self.needs(a);
        self.push(Op::Square(a), v, ng)
    }

    /// Inserts an externally evaluated function of `a` with its Jacobian
    /// (`value.len()` × `a.len()`).
    pub fn custom(&mut self, a: NodeId, value: Vec<f64>, jacobian: Tensor2) -> Result<NodeId> {
        let n = self.value(a).len();
        if jacobian.shape() != (value.len(), n) {
            return Err(Error::Dimension(format!(
                "jacobian {}x{} for a map {}→{}",
                jacobian.rows(),
                jacobian.cols(),
                n,
                value.len()
            )));
        }
        let ng = self.needs(a);
        Ok(self.push(Op::Custom(a, jacobian), Tensor2::row(value), ng))
    }

    /// Applies an externally evaluated map to every row of `a`: row `i` of the
    /// output is `values[i]`, with Jacobian `jacobians[i]` (m × a.cols).
    pub fn custom_rows(
        &mut self,
        a: NodeId,
        values: Vec<Vec<f64>>,
        jacobians: Vec<Tensor2>,
    ) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        let m = values.first().map_or(0, |v| v.len());
        if values.len() != r
            || jacobians.len() != r
            || values.iter().any(|v| v.len() != m)
            || jacobians.iter().any(|j| j.shape() != (m, c))
        {
            return Err(Error::Dimension(format!(
                "row-wise map over {r}x{c} needs {r} values and {r} jacobians of {m}x{c}"
            )));
        }
        let v = Tensor2::from_vec(r, m, values.concat())?;
        let ng = self.needs(a);
        Ok(self.push(Op::CustomRows(a, jacobians), v, ng))
    }

    /// Per-row inner products, an `r×1` column.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "row dot")?;
        let (va, vb) = (self.value(a), self.value(b));
        let (r, c) = va.shape();
        let out = (0..r)
            .map(|i| {
                va.data()[i * c..(i + 1) * c]
                    .iter()
                    .zip(&vb.data()[i * c..(i + 1) * c])
                    .map(|(x, y)| x * y)
                    .sum()
            })
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::RowDot(a, b), Tensor2::from_vec(r, 1, out)?, ng))
    }

    /// Scales row `i` of `a` by `col[i]`.
    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId> {
        let (va, vc) = (self.value(a), self.value(col));
        if vc.shape() != (va.rows(), 1) {
            return Err(Error::Dimension(format!(
                "column broadcast of {}x{} onto {}x{}",
                vc.rows(),
                vc.cols(),
                va.rows(),
                va.cols()
            )));
        }
        let c = va.cols();
        let mut out = va.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x *= vc.data()[i / c];
        }
        let ng = self.needs(a) || self.needs(col);
        Ok(self.push(Op::MulCol(a, col), out, ng))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p).0,
            None => return Err(Error::Dimension("concat of zero tensors".into())),
        };
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::Dimension("column concat of tensors with different row counts".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        let v = Tensor2::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), v, ng))
    }

    /// Columns `start..start + len` of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if start + len > c {
            return Err(Error::Dimension(format!(
                "columns {start}..{} of a {r}x{c} tensor",
                start + len
            )));
        }
        let v = self.value(a);
        let data = (0..r)
            .flat_map(|i| v.row_slice(i)[start..start + len].to_vec())
            .collect();
        let ng = self.needs(a);
        let out = Tensor2::from_vec(r, len, data)?;
        Ok(self.push(Op::SliceCols(a, start), out, ng))
    }

    /// Reverse pass from a 1×1 node.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::State("backward called before any forward pass".into()));
        }
        if self.differentiated {
            return Err(Error::State(
                "backward already ran on this graph; record a new forward pass".into(),
            ));
        }
        if self.shape(loss) != (1, 1) {
            let (r, c) = self.shape(loss);
            return Err(Error::Dimension(format!("loss must be 1x1, got {r}x{c}")));
        }
        self.differentiated = true;

        let mut grads: Vec<Option<Tensor2>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::filled(1, 1, 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Input | Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.needs(a) {
                        let ga = g.matmul_bt(self.value(b))?;
                        accumulate(&mut grads, a, ga);
                    }
                    if self.needs(b) {
                        let gb = self.value(a).matmul_at(&g)?;
                        accumulate(&mut grads, b, gb);
                    }
                }
                Op::MatMulBt(a, b) => {
                    // y = a bᵀ: da = g b, db = gᵀ a
                    if self.needs(a) {
                        let ga = g.matmul(self.value(b))?;
                        accumulate(&mut grads, a, ga);
                    }
                    if self.needs(b) {
                        let gb = g.matmul_at(self.value(a))?;
                        accumulate(&mut grads, b, gb);
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.needs(bias) {
                        let c = g.cols();
                        let mut gb = vec![0.0; c];
                        for (i, x) in g.data().iter().enumerate() {
                            gb[i % c] += x;
                        }
                        accumulate(&mut grads, bias, Tensor2::row(gb));
                    }
                    if self.needs(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(b) {
                        accumulate(&mut grads, b, g.clone());
                    }
                    if self.needs(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(b) {
                        accumulate(&mut grads, b, g.scale(-1.0));
                    }
                    if self.needs(a) {
                        accumulate(&mut grads, a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let mut ga = g.clone();
                        for (x, y) in ga.data_mut().iter_mut().zip(self.value(b).data()) {
                            *x *= y;
                        }
                        accumulate(&mut grads, a, ga);
                    }
                    if self.needs(b) {
                        let mut gb = g;
                        for (x, y) in gb.data_mut().iter_mut().zip(self.value(a).data()) {
                            *x *= y;
                        }
                        accumulate(&mut grads, b, gb);
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, a, g.scale(s)),
                Op::Gelu(a) => {
                    let mut ga = g;
                    for (x, inp) in ga.data_mut().iter_mut().zip(self.value(a).data()) {
                        *x *= gelu_grad(*inp);
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.nodes[idx].value.as_ref().expect("softmax value");
                    let (r, c) = y.shape();
                    let mut ga = Tensor2::zeros(r, c);
                    for i in 0..r {
                        let yr = &y.data()[i * c..(i + 1) * c];
                        let gr = &g.data()[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga.data_mut()[i * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Reshape(a) => {
                    let (r, c) = self.shape(a);
                    accumulate(&mut grads, a, g.reshaped(r, c)?);
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for p in parts {
                        let r = self.shape(p).0;
                        if self.needs(p) {
                            let slice = g.data()[offset * cols..(offset + r) * cols].to_vec();
                            accumulate(&mut grads, p, Tensor2::from_vec(r, cols, slice)?);
                        }
                        offset += r;
                    }
                }
                Op::Sum(a) => {
                    let (r, c) = self.shape(a);
                    accumulate(&mut grads, a, Tensor2::filled(r, c, g.data()[0]));
                }
                Op::Mean(a) => {
                    let (r, c) = self.shape(a);
                    let s = g.data()[0] / (r * c) as f64;
                    accumulate(&mut grads, a, Tensor2::filled(r, c, s));
                }
                Op::Square(a) => {
                    let mut ga = g;
                    for (x, inp) in ga.data_mut().iter_mut().zip(self.value(a).data()) {
                        *x *= 2.0 * inp;
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::Custom(a, jac) => {
                    // dL/da = gᵀ J, reshaped to a's shape
                    let ga = g.matmul(&jac)?;
                    let (r, c) = self.shape(a);
                    accumulate(&mut grads, a, ga.reshaped(r, c)?);
                }
                Op::CustomRows(a, jacs) => {
                    let (r, c) = self.shape(a);
                    let m = g.cols();
                    let mut ga = Tensor2::zeros(r, c);
                    for (i, jac) in jacs.iter().enumerate() {
                        let gr = &g.data()[i * m..(i + 1) * m];
                        let out = &mut ga.data_mut()[i * c..(i + 1) * c];
                        for (k, gk) in gr.iter().enumerate() {
                            if *gk != 0.0 {
                                for (o, j) in out.iter_mut().zip(jac.row_slice(k)) {
                                    *o += gk * j;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, a, ga);
                }
                Op::RowDot(a, b) => {
                    for (x, y) in [(a, b), (b, a)] {
                        if self.needs(x) {
                            let mut gx = self.value(y).clone();
                            let c = gx.cols();
                            for (i, v) in gx.data_mut().iter_mut().enumerate() {
                                *v *= g.data()[i / c];
                            }
                            accumulate(&mut grads, x, gx);
                        }
                    }
                }
                Op::MulCol(a, col) => {
                    let c = g.cols();
                    if self.needs(col) {
                        let va = self.value(a);
                        let gc = (0..g.rows())
                            .map(|i| {
                                g.row_slice(i)
                                    .iter()
                                    .zip(va.row_slice(i))
                                    .map(|(p, q)| p * q)
                                    .sum()
                            })
                            .collect();
                        accumulate(&mut grads, col, Tensor2::from_vec(g.rows(), 1, gc)?);
                    }
                    if self.needs(a) {
                        let vc = self.value(col);
                        let mut ga = g;
                        for (i, v) in ga.data_mut().iter_mut().enumerate() {
                            *v *= vc.data()[i / c];
                        }
                        accumulate(&mut grads, a, ga);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let (r, c) = self.shape(p);
                        if self.needs(p) {
                            let data = (0..r)
                                .flat_map(|i| g.row_slice(i)[offset..offset + c].to_vec())
                                .collect();
                            accumulate(&mut grads, p, Tensor2::from_vec(r, c, data)?);
                        }
                        offset += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(a);
                    let len = g.cols();
                    let mut ga = Tensor2::zeros(r, c);
                    for i in 0..r {
                        ga.data_mut()[i * c + start..i * c + start + len]
                            .copy_from_slice(g.row_slice(i));
                    }
                    accumulate(&mut grads, a, ga);
                }
            }
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            match node.op {
                Op::Param(pid) => {
                    let (r, c) = self.store.value(pid).shape();
                    let g = grads[idx].take().unwrap_or_else(|| Tensor2::zeros(r, c));
                    out.params.push((pid, g));
                }
                Op::Input if node.needs_grad => {
                    let (r, c) = node.value.as_ref().map(|v| v.shape()).unwrap_or((0, 0));
                    let g = grads[idx].take().unwrap_or_else(|| Tensor2::zeros(r, c));
                    out.inputs.insert(NodeId(idx), g);
                }
                _ => {}
            }
        }
        // blocks the forward pass never touched get explicit zero gradients
        for pid in 0..self.store.len() {
            if !self.param_nodes.contains_key(&pid) {
                let (r, c) = self.store.value(pid).shape();
                out.params.push((pid, Tensor2::zeros(r, c)));
            }
        }
        out.params.sort_by_key(|(pid, _)| *pid);
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], id: NodeId, g: Tensor2) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient_is_outer_product() {
        // loss = sum(x · W) -> dL/dW[i][j] = x[i]
        let mut store = ParamStore::new();
        store
            .insert(
                "w",
                Tensor2::from_vec(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap(),
            )
            .unwrap();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor2::row(vec![2.0, -3.0]));
        let w = g.param("w").unwrap();
        let y = g.matmul(x, w).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        let gw = grads.param(0).unwrap();
        assert_eq!(gw.data(), &[2.0, 2.0, 2.0, -3.0, -3.0, -3.0]);
    }

    #[test]
    fn unused_block_gets_exact_zero() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor2::row(vec![1.0])).unwrap();
        store.insert("unused", Tensor2::row(vec![5.0, 6.0])).unwrap();
        let mut g = Graph::new(&store);
        let u = g.param("used").unwrap();
        let _ = g.param("unused").unwrap();
        let sq = g.square(u);
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.param(1).unwrap().data(), &[0.0, 0.0]);
        assert_eq!(grads.param(0).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_twice_is_a_state_error() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor2::row(vec![1.0]), true);
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::State(_))));
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        assert!(matches!(g.backward(NodeId(0)), Err(Error::State(_))));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor2::from_vec(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 700.0]).unwrap());
        let s = g.softmax_rows(x);
        let v = g.value(s);
        for r in 0..2 {
            let row = v.row_slice(r);
            assert!(row.iter().all(|&p| p >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn row_ops_match_finite_differences() {
        let a0 = Tensor2::from_vec(3, 2, vec![0.3, -1.2, 0.8, 0.1, -0.4, 0.9]).unwrap();
        let b0 = Tensor2::from_vec(3, 2, vec![1.1, 0.2, -0.7, 0.5, 0.6, -0.3]).unwrap();
        let f = |a: &Tensor2, b: &Tensor2, grad: bool| -> (f64, Option<Tensor2>) {
            let store = ParamStore::new();
            let mut g = Graph::new(&store);
            let a = g.input(a.clone(), grad);
            let b = g.constant(b.clone());
            let d = g.row_dot(a, b).unwrap();
            let cat = g.concat_cols(&[d, a]).unwrap();
            let sm = g.softmax_rows(cat);
            let w = g.slice_cols(sm, 1, 1).unwrap();
            let m = g.mul_col(b, w).unwrap();
            let vals: Vec<Vec<f64>> = (0..3)
                .map(|i| {
                    let r = g.value(a).row_slice(i).to_vec();
                    vec![r[0] * r[1], r[0].sin()]
                })
                .collect();
            let jacs = (0..3)
                .map(|i| {
                    let r = g.value(a).row_slice(i).to_vec();
                    Tensor2::from_vec(2, 2, vec![r[1], r[0], r[0].cos(), 0.0]).unwrap()
                })
                .collect();
            let c = g.custom_rows(a, vals, jacs).unwrap();
            let both = g.add(m, c).unwrap();
            let sq = g.square(both);
            let l = g.sum(sq);
            let v = g.scalar(l);
            let ga = grad.then(|| g.backward(l).unwrap().input(a).unwrap().clone());
            (v, ga)
        };
        let (_, ga) = f(&a0, &b0, true);
        let ga = ga.unwrap();
        let h = 1e-5;
        for k in 0..6 {
            let mut ap = a0.clone();
            ap.data_mut()[k] += h;
            let mut am = a0.clone();
            am.data_mut()[k] -= h;
            let fd = (f(&ap, &b0, false).0 - f(&am, &b0, false).0) / (2.0 * h);
            let an = ga.data()[k];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{k}: {fd} vs {an}");
        }
    }
}
