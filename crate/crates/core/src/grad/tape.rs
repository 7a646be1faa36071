//! Reverse-mode autodiff over a linear tape.
//!
//! Every op appends one node holding its forward value; `backward` walks the
//! nodes once in reverse order and accumulates gradients at fan-out points.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use super::{GradError, ParamId, ParamStore};

/// Backward rule for [`Tape::custom`]: `(inputs, output, grad_output)` to one
/// gradient per input.
pub type BackwardFn = Box<dyn Fn(&[&Tensor], &Tensor, &Tensor) -> Vec<Tensor>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Affine(usize, f64),
    Act(usize, Activation),
    MulConst(usize, Arc<Tensor>),
    Embedding(usize, Arc<[usize]>),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize),
    GatherRows(usize, Arc<[usize]>),
    StackSteps(Vec<usize>),
    Reshape(usize),
    Im2Col { x: usize, batch: usize, width: usize },
    MaxPool2 { x: usize, batch: usize },
    BatchNorm { x: usize, inv_std: Arc<[f64]> },
    MaskedSoftmax(usize),
    WeightedSum { weights: usize, memory: usize },
    RepeatRows { x: usize, times: usize },
    Sum(usize),
    L1 { pred: usize, target: Arc<Tensor> },
    Custom { inputs: Vec<usize>, backward: BackwardFn },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Recording context for one forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    params: RefCell<HashMap<ParamId, usize>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value().shape())
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> GradError {
    GradError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A tape whose nodes never require gradients (inference).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, needs_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Leaf bound to a parameter of `store`; repeated calls return the same node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.params.borrow().get(&id) {
            return Var {
                tape: self,
                id: node,
            };
        }
        let var = self.push_arc(store.value_arc(id), Op::Leaf, true);
        self.params.borrow_mut().insert(id, var.id);
        var
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>, GradError> {
        let values: Vec<Arc<Tensor>> = parts.iter().map(|v| v.value()).collect();
        let rows = values
            .first()
            .ok_or_else(|| GradError::InvalidArgument("concat of zero tensors".into()))?
            .rows();
        for v in &values {
            if v.rows() != rows {
                return Err(shape_err("concat_cols", &values[0], v));
            }
        }
        let total: usize = values.iter().map(|v| v.cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                out.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(
            Tensor::matrix(rows, total, out)?,
            Op::ConcatCols(ids),
            needs,
        ))
    }

    /// Stacks per-step `[B×W]` tensors into `[(B·S)×W]` with row `b·S + s`.
    pub fn stack_steps<'t>(&'t self, steps: &[Var<'t>]) -> Result<Var<'t>, GradError> {
        let values: Vec<Arc<Tensor>> = steps.iter().map(|v| v.value()).collect();
        let first = values
            .first()
            .ok_or_else(|| GradError::InvalidArgument("stack of zero steps".into()))?
            .clone();
        for v in &values {
            if v.shape() != first.shape() {
                return Err(shape_err("stack_steps", &first, v));
            }
        }
        let (b, w, s) = (first.rows(), first.cols(), values.len());
        let mut out = vec![0.0; b * s * w];
        for (si, v) in values.iter().enumerate() {
            for bi in 0..b {
                let dst = (bi * s + si) * w;
                out[dst..dst + w].copy_from_slice(v.row(bi));
            }
        }
        let ids: Vec<usize> = steps.iter().map(|v| v.id).collect();
        let needs = self.needs(&ids);
        Ok(self.push(
            Tensor::matrix(b * s, w, out)?,
            Op::StackSteps(ids),
            needs,
        ))
    }

    /// Gathers rows of `table` (`[V×D]`) for each id.
    pub fn embedding<'t>(&'t self, table: Var<'t>, ids: &[usize]) -> Result<Var<'t>, GradError> {
        let t = table.value();
        let (v, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for (position, &id) in ids.iter().enumerate() {
            if id >= v {
                return Err(GradError::IndexOutOfRange {
                    index: id,
                    position,
                    size: v,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let needs = self.needs(&[table.id]);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, out)?,
            Op::Embedding(table.id, ids.into()),
            needs,
        ))
    }

    /// User-defined op with an explicit backward rule.
    pub fn custom<'t>(&'t self, inputs: &[Var<'t>], value: Tensor, backward: BackwardFn) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let needs = self.needs(&ids);
        self.push(value, Op::Custom { inputs: ids, backward }, needs)
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, GradError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(GradError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(root.value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.borrow().clone(),
        })
    }
}

/// Gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, usize>,
}

impl Gradients {
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, zeros if it was not reached.
    pub fn wrt_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.wrt(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.value().shape()))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .get(&id)
            .and_then(|&node| self.grads[node].as_ref())
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], nodes: &[Node], id: usize) -> Option<&'g mut Tensor> {
    if !nodes[id].needs_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape())))
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, delta: &Tensor) {
    if let Some(g) = slot(grads, nodes, id) {
        g.add_assign(delta);
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows(), av.cols(), bv.cols());
            if let Some(ga) = slot(grads, nodes, *a) {
                gemm(m, n, k, g.data(), false, bv.data(), true, ga.data_mut(), 1.0);
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut(), 1.0);
            }
        }
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g);
            accumulate(grads, nodes, *b, g);
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g);
            if let Some(gb) = slot(grads, nodes, *b) {
                for (d, s) in gb.data_mut().iter_mut().zip(g.data()) {
                    *d -= s;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            if let Some(ga) = slot(grads, nodes, *a) {
                for ((d, s), o) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                    *d += s * o;
                }
            }
            if let Some(gb) = slot(grads, nodes, *b) {
                for ((d, s), o) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                    *d += s * o;
                }
            }
        }
        Op::AddRow(x, bias) => {
            accumulate(grads, nodes, *x, g);
            if let Some(gb) = slot(grads, nodes, *bias) {
                let c = g.cols();
                let gb = gb.data_mut();
                for r in 0..g.rows() {
                    for (d, s) in gb.iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *d += s;
                    }
                }
            }
        }
        Op::MulRow(x, scale) => {
            let (xv, sv) = (nodes[*x].value.clone(), nodes[*scale].value.clone());
            let c = g.cols();
            if let Some(gx) = slot(grads, nodes, *x) {
                let gx = gx.data_mut();
                for r in 0..g.rows() {
                    for j in 0..c {
                        gx[r * c + j] += g.data()[r * c + j] * sv.data()[j];
                    }
                }
            }
            if let Some(gs) = slot(grads, nodes, *scale) {
                let gs = gs.data_mut();
                for r in 0..g.rows() {
                    for j in 0..c {
                        gs[j] += g.data()[r * c + j] * xv.data()[r * c + j];
                    }
                }
            }
        }
        Op::Affine(x, a) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for (d, s) in gx.data_mut().iter_mut().zip(g.data()) {
                    *d += a * s;
                }
            }
        }
        Op::Act(x, kind) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let it = gx.data_mut().iter_mut().zip(g.data()).zip(y.data());
                match kind {
                    Activation::Relu => {
                        for ((d, s), o) in it {
                            if *o > 0.0 {
                                *d += s;
                            }
                        }
                    }
                    Activation::Sigmoid => {
                        for ((d, s), o) in it {
                            *d += s * o * (1.0 - o);
                        }
                    }
                    Activation::Tanh => {
                        for ((d, s), o) in it {
                            *d += s * (1.0 - o * o);
                        }
                    }
                }
            }
        }
        Op::MulConst(x, c) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for ((d, s), m) in gx.data_mut().iter_mut().zip(g.data()).zip(c.data()) {
                    *d += s * m;
                }
            }
        }
        Op::Embedding(table, ids) => {
            if let Some(gt) = slot(grads, nodes, *table) {
                for (i, &id) in ids.iter().enumerate() {
                    for (d, s) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                        *d += s;
                    }
                }
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(gp) = slot(grads, nodes, p) {
                    for r in 0..g.rows() {
                        for (d, s) in gp.row_mut(r).iter_mut().zip(&g.row(r)[offset..offset + w]) {
                            *d += s;
                        }
                    }
                }
                offset += w;
            }
        }
        Op::SliceCols(x, start) => {
            let w = g.cols();
            if let Some(gx) = slot(grads, nodes, *x) {
                for r in 0..g.rows() {
                    for (d, s) in gx.row_mut(r)[*start..start + w].iter_mut().zip(g.row(r)) {
                        *d += s;
                    }
                }
            }
        }
        Op::GatherRows(x, idx) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for (i, &src) in idx.iter().enumerate() {
                    for (d, s) in gx.row_mut(src).iter_mut().zip(g.row(i)) {
                        *d += s;
                    }
                }
            }
        }
        Op::StackSteps(steps) => {
            let s = steps.len();
            for (si, &step) in steps.iter().enumerate() {
                if let Some(gs) = slot(grads, nodes, step) {
                    for bi in 0..gs.rows() {
                        for (d, v) in gs.row_mut(bi).iter_mut().zip(g.row(bi * s + si)) {
                            *d += v;
                        }
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for (d, s) in gx.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
        Op::Im2Col { x, batch, width } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let (rows, c) = (gx.rows(), gx.cols());
                let t_len = rows / batch;
                let pad_left = (width - 1) / 2;
                let gx = gx.data_mut();
                for b in 0..*batch {
                    for t in 0..t_len {
                        let out_row = g.row(b * t_len + t);
                        for j in 0..*width {
                            let src = t as isize + j as isize - pad_left as isize;
                            if src < 0 || src >= t_len as isize {
                                continue;
                            }
                            let base = (b * t_len + src as usize) * c;
                            for (d, s) in gx[base..base + c].iter_mut().zip(&out_row[j * c..(j + 1) * c]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
        Op::MaxPool2 { x, batch } => {
            let xv = nodes[*x].value.clone();
            if let Some(gx) = slot(grads, nodes, *x) {
                let (rows, c) = (xv.rows(), xv.cols());
                let t_len = rows / batch;
                for b in 0..*batch {
                    for t in 0..t_len {
                        let r = b * t_len + t;
                        for j in 0..c {
                            let here = xv.data()[r * c + j];
                            let next = if t + 1 < t_len { xv.data()[(r + 1) * c + j] } else { 0.0 };
                            let s = g.data()[r * c + j];
                            if here >= next {
                                gx.data_mut()[r * c + j] += s;
                            } else if t + 1 < t_len {
                                gx.data_mut()[(r + 1) * c + j] += s;
                            }
                        }
                    }
                }
            }
        }
        Op::BatchNorm { x, inv_std } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let (n, c) = (g.rows(), g.cols());
                let mut sum_g = vec![0.0; c];
                let mut sum_gy = vec![0.0; c];
                for r in 0..n {
                    for j in 0..c {
                        let gv = g.data()[r * c + j];
                        sum_g[j] += gv;
                        sum_gy[j] += gv * y.data()[r * c + j];
                    }
                }
                let nf = n as f64;
                let gx = gx.data_mut();
                for r in 0..n {
                    for j in 0..c {
                        let i = r * c + j;
                        gx[i] += inv_std[j] / nf * (nf * g.data()[i] - sum_g[j] - y.data()[i] * sum_gy[j]);
                    }
                }
            }
        }
        Op::MaskedSoftmax(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for r in 0..g.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, yy), gg) in gx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d += yy * (gg - dot);
                    }
                }
            }
        }
        Op::WeightedSum { weights, memory } => {
            let (wv, mv) = (nodes[*weights].value.clone(), nodes[*memory].value.clone());
            let (b, l, d) = (wv.rows(), wv.cols(), mv.cols());
            if let Some(gw) = slot(grads, nodes, *weights) {
                for bi in 0..b {
                    for li in 0..l {
                        let dot: f64 = mv.row(bi * l + li).iter().zip(g.row(bi)).map(|(a, b)| a * b).sum();
                        gw.data_mut()[bi * l + li] += dot;
                    }
                }
            }
            if let Some(gm) = slot(grads, nodes, *memory) {
                for bi in 0..b {
                    for li in 0..l {
                        let w = wv.data()[bi * l + li];
                        let row = &mut gm.data_mut()[(bi * l + li) * d..(bi * l + li + 1) * d];
                        for (dst, s) in row.iter_mut().zip(g.row(bi)) {
                            *dst += w * s;
                        }
                    }
                }
            }
        }
        Op::RepeatRows { x, times } => {
            if let Some(gx) = slot(grads, nodes, *x) {
                for bi in 0..gx.rows() {
                    for i in 0..*times {
                        let src = g.row(bi * times + i).to_vec();
                        for (d, s) in gx.row_mut(bi).iter_mut().zip(&src) {
                            *d += s;
                        }
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(grads, nodes, *x) {
                let s = g.item();
                for d in gx.data_mut() {
                    *d += s;
                }
            }
        }
        Op::L1 { pred, target } => {
            let pv = nodes[*pred].value.clone();
            if let Some(gp) = slot(grads, nodes, *pred) {
                let scale = g.item() / pv.numel() as f64;
                for ((d, p), t) in gp.data_mut().iter_mut().zip(pv.data()).zip(target.data()) {
                    let diff = p - t;
                    if diff > 0.0 {
                        *d += scale;
                    } else if diff < 0.0 {
                        *d -= scale;
                    }
                }
            }
        }
        Op::Custom { inputs, backward } => {
            let values: Vec<Arc<Tensor>> = inputs.iter().map(|&i| nodes[i].value.clone()).collect();
            let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
            let input_grads = backward(&refs, y, g);
            for (&i, gi) in inputs.iter().zip(&input_grads) {
                accumulate(grads, nodes, i, gi);
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.value().rows()
    }

    pub fn cols(&self) -> usize {
        self.value().cols()
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(value, op, needs)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, op, needs)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, GradError> {
        let value = self.value().matmul(&other.value())?;
        Ok(self.binary(other, value, Op::MatMul(self.id, other.id)))
    }

    fn same_shape(&self, other: &Var<'t>, op: &'static str) -> Result<(Arc<Tensor>, Arc<Tensor>), GradError> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(op, &a, &b));
        }
        Ok((a, b))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, GradError> {
        let (a, b) = self.same_shape(&other, "add")?;
        Ok(self.binary(other, a.zip_map(&b, |x, y| x + y), Op::Add(self.id, other.id)))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, GradError> {
        let (a, b) = self.same_shape(&other, "sub")?;
        Ok(self.binary(other, a.zip_map(&b, |x, y| x - y), Op::Sub(self.id, other.id)))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, GradError> {
        let (a, b) = self.same_shape(&other, "mul")?;
        Ok(self.binary(other, a.zip_map(&b, |x, y| x * y), Op::Mul(self.id, other.id)))
    }

    fn row_broadcast(
        self,
        row: Var<'t>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, GradError> {
        let (x, r) = (self.value(), row.value());
        if r.numel() != x.cols() {
            return Err(shape_err(op, &x, &r));
        }
        let c = x.cols();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| f(v, r.data()[i % c]))
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>, GradError> {
        let value = self.row_broadcast(bias, "add_row", |a, b| a + b)?;
        Ok(self.binary(bias, value, Op::AddRow(self.id, bias.id)))
    }

    /// `x ⊙ scale` with `scale` broadcast over rows.
    pub fn mul_row(self, scale: Var<'t>) -> Result<Var<'t>, GradError> {
        let value = self.row_broadcast(scale, "mul_row", |a, b| a * b)?;
        Ok(self.binary(scale, value, Op::MulRow(self.id, scale.id)))
    }

    /// `a·x + b` elementwise.
    pub fn affine(self, a: f64, b: f64) -> Var<'t> {
        let value = self.value().map(|x| a * x + b);
        self.unary(value, Op::Affine(self.id, a))
    }

    pub fn activation(self, kind: Activation) -> Var<'t> {
        let f: fn(f64) -> f64 = match kind {
            Activation::Relu => |x| x.max(0.0),
            Activation::Sigmoid => sigmoid,
            Activation::Tanh => f64::tanh,
        };
        let value = self.value().map(f);
        self.unary(value, Op::Act(self.id, kind))
    }

    pub fn relu(self) -> Var<'t> {
        self.activation(Activation::Relu)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.activation(Activation::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t> {
        self.activation(Activation::Tanh)
    }

    /// Elementwise product with a constant (masks, dropout).
    pub fn mul_const(self, c: Tensor) -> Result<Var<'t>, GradError> {
        let x = self.value();
        if x.shape() != c.shape() {
            return Err(shape_err("mul_const", &x, &c));
        }
        let value = x.zip_map(&c, |a, b| a * b);
        Ok(self.unary(value, Op::MulConst(self.id, Arc::new(c))))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>, GradError> {
        let x = self.value();
        if start + len > x.cols() {
            return Err(GradError::InvalidArgument(format!(
                "column slice {start}..{} out of range for {:?}",
                start + len,
                x.shape()
            )));
        }
        let mut out = Vec::with_capacity(x.rows() * len);
        for r in 0..x.rows() {
            out.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let value = Tensor::matrix(x.rows(), len, out)?;
        Ok(self.unary(value, Op::SliceCols(self.id, start)))
    }

    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>, GradError> {
        let x = self.value();
        let mut out = Vec::with_capacity(idx.len() * x.cols());
        for (position, &i) in idx.iter().enumerate() {
            if i >= x.rows() {
                return Err(GradError::IndexOutOfRange {
                    index: i,
                    position,
                    size: x.rows(),
                });
            }
            out.extend_from_slice(x.row(i));
        }
        let value = Tensor::matrix(idx.len(), x.cols(), out)?;
        Ok(self.unary(value, Op::GatherRows(self.id, idx.into())))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, GradError> {
        let value = self.value().as_ref().clone().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    /// Same-padded sliding windows: `[(B·T)×C]` to `[(B·T)×(width·C)]`.
    ///
    /// Window `j` of row `t` reads time `t + j − ⌊(width−1)/2⌋`; out-of-range
    /// frames read zeros, so even widths carry the extra pad on the right.
    pub fn im2col(self, batch: usize, width: usize) -> Result<Var<'t>, GradError> {
        let x = self.value();
        if width == 0 {
            return Err(GradError::InvalidArgument("convolution width must be ≥ 1".into()));
        }
        if batch == 0 || x.rows() % batch != 0 {
            return Err(GradError::InvalidArgument(format!(
                "{} rows do not split into {batch} sequences",
                x.rows()
            )));
        }
        let (rows, c) = (x.rows(), x.cols());
        let t_len = rows / batch;
        let pad_left = (width - 1) / 2;
        let mut out = vec![0.0; rows * width * c];
        for b in 0..batch {
            for t in 0..t_len {
                let dst_row = (b * t_len + t) * width * c;
                for j in 0..width {
                    let src = t as isize + j as isize - pad_left as isize;
                    if src < 0 || src >= t_len as isize {
                        continue;
                    }
                    let src_row = b * t_len + src as usize;
                    out[dst_row + j * c..dst_row + (j + 1) * c].copy_from_slice(x.row(src_row));
                }
            }
        }
        let value = Tensor::matrix(rows, width * c, out)?;
        Ok(self.unary(
            value,
            Op::Im2Col {
                x: self.id,
                batch,
                width,
            },
        ))
    }

    /// Width-2, stride-1 max pooling per sequence with one zero frame
    /// appended on the right.
    pub fn maxpool2(self, batch: usize) -> Result<Var<'t>, GradError> {
        let x = self.value();
        if batch == 0 || x.rows() == 0 || x.rows() % batch != 0 {
            return Err(GradError::InvalidArgument(format!(
                "cannot max-pool {:?} as {batch} sequences",
                x.shape()
            )));
        }
        let (rows, c) = (x.rows(), x.cols());
        let t_len = rows / batch;
        let mut out = vec![0.0; rows * c];
        for b in 0..batch {
            for t in 0..t_len {
                let r = b * t_len + t;
                for j in 0..c {
                    let next = if t + 1 < t_len { x.data()[(r + 1) * c + j] } else { 0.0 };
                    out[r * c + j] = x.data()[r * c + j].max(next);
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.unary(value, Op::MaxPool2 { x: self.id, batch }))
    }

    /// Per-column standardization over all rows. Returns the normalized
    /// output with the batch mean and (biased) variance.
    pub fn batch_standardize(self, eps: f64) -> Result<(Var<'t>, Vec<f64>, Vec<f64>), GradError> {
        let x = self.value();
        let (n, c) = (x.rows(), x.cols());
        if n == 0 {
            return Err(GradError::InvalidArgument("batch norm over zero rows".into()));
        }
        let mut mean = vec![0.0; c];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean[i % c]) * inv_std[i % c])
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let out = self.unary(
            value,
            Op::BatchNorm {
                x: self.id,
                inv_std: inv_std.into(),
            },
        );
        Ok((out, mean, var))
    }

    /// Row-wise softmax over the first `lengths[row]` columns; the rest are 0.
    pub fn masked_softmax(self, lengths: &[usize]) -> Result<Var<'t>, GradError> {
        let x = self.value();
        let (rows, cols) = (x.rows(), x.cols());
        if lengths.len() != rows || lengths.iter().any(|&l| l == 0 || l > cols) {
            return Err(GradError::InvalidArgument(format!(
                "softmax lengths {lengths:?} invalid for {:?}",
                x.shape()
            )));
        }
        let mut out = vec![0.0; rows * cols];
        for (r, &len) in lengths.iter().enumerate() {
            let row = &x.row(r)[..len];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (j, v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[r * cols + j] = e;
                total += e;
            }
            for v in &mut out[r * cols..r * cols + len] {
                *v /= total;
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.unary(value, Op::MaskedSoftmax(self.id)))
    }

    /// `out[b] = Σ_l weights[b,l] · memory[b·L + l]` for weights `[B×L]`.
    pub fn weighted_sum(self, memory: Var<'t>) -> Result<Var<'t>, GradError> {
        let (w, m) = (self.value(), memory.value());
        let (b, l, d) = (w.rows(), w.cols(), m.cols());
        if m.rows() != b * l {
            return Err(shape_err("weighted_sum", &w, &m));
        }
        let mut out = vec![0.0; b * d];
        for bi in 0..b {
            for li in 0..l {
                let wt = w.data()[bi * l + li];
                if wt == 0.0 {
                    continue;
                }
                for (o, v) in out[bi * d..(bi + 1) * d].iter_mut().zip(m.row(bi * l + li)) {
                    *o += wt * v;
                }
            }
        }
        let value = Tensor::matrix(b, d, out)?;
        Ok(self.binary(
            memory,
            value,
            Op::WeightedSum {
                weights: self.id,
                memory: memory.id,
            },
        ))
    }

    /// `[B×D]` to `[(B·times)×D]`, each row repeated `times` times.
    pub fn repeat_rows(self, times: usize) -> Result<Var<'t>, GradError> {
        let x = self.value();
        let mut out = Vec::with_capacity(x.numel() * times);
        for r in 0..x.rows() {
            for _ in 0..times {
                out.extend_from_slice(x.row(r));
            }
        }
        let value = Tensor::matrix(x.rows() * times, x.cols(), out)?;
        Ok(self.unary(value, Op::RepeatRows { x: self.id, times }))
    }

    pub fn sum(self) -> Var<'t> {
        let value = Tensor::scalar(self.value().sum());
        self.unary(value, Op::Sum(self.id))
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(self, target: &Tensor) -> Result<Var<'t>, GradError> {
        let p = self.value();
        if p.shape() != target.shape() {
            return Err(shape_err("l1_loss", &p, target));
        }
        let total: f64 = p.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum();
        let value = Tensor::scalar(total / p.numel().max(1) as f64);
        Ok(self.unary(
            value,
            Op::L1 {
                pred: self.id,
                target: Arc::new(target.clone()),
            },
        ))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
