//! Computation tape: forward ops record nodes, `backward` replays them in
//! reverse. Nodes are matrices (rows x cols, row-major); higher-rank tensors
//! enter as folded matrices. Topological order holds by construction because
//! ops can only reference already-recorded nodes.

use std::cell::RefCell;

use super::{ParamStore, Tensor, TensorError};

/// One weighted combination of up to four input rows (bilinear lookups).
#[derive(Debug, Clone, Copy)]
pub struct RowCombo {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<usize> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize),
    /// `[r,c] + [1,c]`, bias broadcast over rows.
    AddBiasRow(usize, usize),
    /// `[r,c] * [r,1]`, column broadcast over cols.
    MulColBroadcast(usize, usize),
    /// `[1,1]` broadcast to `[r,c]`.
    BroadcastScalar(usize),
    Matmul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    Square(usize),
    SoftmaxRows(usize),
    /// Replace entries where `mask` is true with `value` (constant mask).
    MaskedFillRows { input: usize, mask: std::rc::Rc<Vec<bool>> },
    LayerNorm { input: usize, gain: usize, bias: usize, eps: f64 },
    SumAll(usize),
    MeanAll(usize),
    /// `[r,c] -> [1,c]`, mean over rows.
    MeanAxis0(usize),
    /// `[r,c] -> [r,1]`, sum over cols.
    SumAxis1(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { input: usize, start: usize },
    SliceCols { input: usize, start: usize },
    RowGather { input: usize, indices: std::rc::Rc<Vec<usize>> },
    /// out[indices[i]] += in[i]; output has `rows` rows.
    RowScatterAdd { input: usize, indices: std::rc::Rc<Vec<usize>> },
    /// Per-group dot products: Q `[G*q, d]`, K `[G*k, d]` -> `[G*q, k]`.
    GroupedDot { q: usize, k: usize, qrows: usize, krows: usize },
    /// Per-group mixing: W `[G*q, k]`, V `[G*k, d]` -> `[G*q, d]`.
    GroupedMix { w: usize, v: usize, qrows: usize, krows: usize },
    /// out[i] = sum_t combos[i].w[t] * in[combos[i].idx[t]].
    WeightedRowCombine { input: usize, combos: std::rc::Rc<Vec<RowCombo>> },
    /// 3x3, stride 1, zero pad 1: `[h*w, cin]` -> `[h*w, 9*cin]`.
    Im2Col { input: usize, h: usize, w: usize, cin: usize },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a tape. Cheap to copy; only valid for its tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    rows: usize,
    cols: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, rows: usize, cols: usize, data: Vec<f64>, op: Op, needs_grad: bool) -> Var<'_> {
        debug_assert_eq!(rows * cols, data.len());
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        let grad = vec![0.0; data.len()];
        nodes.push(Node { rows, cols, data, grad, op, needs_grad });
        Var { tape: self, id, rows, cols }
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// Differentiable leaf not tied to a parameter store.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        let (r, c) = t.as_matrix_dims();
        self.push(r, c, t.data.clone(), Op::Leaf { param: None }, true)
    }

    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        let (r, c) = t.as_matrix_dims();
        self.push(r, c, t.data.clone(), Op::Leaf { param: None }, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.push(1, 1, vec![v], Op::Leaf { param: None }, false)
    }

    /// Leaf bound to `store[id]`; `write_grads` accumulates into the store.
    pub fn param(&self, store: &ParamStore, id: super::ParamId) -> Var<'_> {
        let t = store.tensor(id);
        let (r, c) = t.as_matrix_dims();
        self.push(r, c, t.data.clone(), Op::Leaf { param: Some(id.0) }, true)
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.id];
        Tensor::new(vec![n.rows, n.cols], n.data.clone())
    }

    pub fn grad(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.id];
        Tensor::new(vec![n.rows, n.cols], n.grad.clone())
    }

    /// Accumulates leaf gradients into the parameter store.
    pub fn write_grads(&self, store: &mut ParamStore) {
        let nodes = self.nodes.borrow();
        for n in nodes.iter() {
            if let Op::Leaf { param: Some(pid) } = n.op {
                store.accumulate_grad(super::ParamId(pid), &n.grad);
            }
        }
    }

    /// Reverse pass from a scalar loss. Seeds with 1 and distributes
    /// gradients to every `needs_grad` ancestor exactly once.
    pub fn backward(&self, loss: Var) -> Result<(), TensorError> {
        if !std::ptr::eq(self as *const Tape, loss.tape as *const Tape) {
            return Err(TensorError::DetachedGraph);
        }
        let mut nodes = self.nodes.borrow_mut();
        {
            let l = &nodes[loss.id];
            if l.rows != 1 || l.cols != 1 {
                return Err(TensorError::NotScalar(vec![l.rows, l.cols]));
            }
            if !l.data[0].is_finite() {
                return Err(TensorError::NonFinite("loss".into()));
            }
        }
        nodes[loss.id].grad[0] = 1.0;
        for i in (0..=loss.id).rev() {
            if !nodes[i].needs_grad {
                continue;
            }
            let (head, tail) = nodes.split_at_mut(i);
            let node = &tail[0];
            if node.grad.iter().all(|g| *g == 0.0) {
                continue;
            }
            backprop(node, head);
        }
        Ok(())
    }
}

fn backprop(node: &Node, head: &mut [Node]) {
    let g = &node.grad;
    let (rows, cols) = (node.rows, node.cols);
    match &node.op {
        Op::Leaf { .. } => {}
        Op::Add(a, b) => {
            accumulate(head, *a, g);
            accumulate(head, *b, g);
        }
        Op::Sub(a, b) => {
            accumulate(head, *a, g);
            accumulate_scaled(head, *b, g, -1.0);
        }
        Op::Mul(a, b) => {
            let (xa, xb) = (*a, *b);
            if head[xa].needs_grad {
                let bv: Vec<f64> = head[xb].data.clone();
                for (ga, (gi, bi)) in head[xa].grad.iter_mut().zip(g.iter().zip(bv.iter())) {
                    *ga += gi * bi;
                }
            }
            if head[xb].needs_grad {
                let av: Vec<f64> = head[xa].data.clone();
                for (gb, (gi, ai)) in head[xb].grad.iter_mut().zip(g.iter().zip(av.iter())) {
                    *gb += gi * ai;
                }
            }
        }
        Op::Div(a, b) => {
            let (xa, xb) = (*a, *b);
            let av = head[xa].data.clone();
            let bv = head[xb].data.clone();
            if head[xa].needs_grad {
                for i in 0..g.len() {
                    head[xa].grad[i] += g[i] / bv[i];
                }
            }
            if head[xb].needs_grad {
                for i in 0..g.len() {
                    head[xb].grad[i] -= g[i] * av[i] / (bv[i] * bv[i]);
                }
            }
        }
        Op::Neg(a) => accumulate_scaled(head, *a, g, -1.0),
        Op::Scale(a, s) => accumulate_scaled(head, *a, g, *s),
        Op::AddScalar(a) => accumulate(head, *a, g),
        Op::AddBiasRow(a, b) => {
            accumulate(head, *a, g);
            if head[*b].needs_grad {
                for r in 0..rows {
                    for c in 0..cols {
                        head[*b].grad[c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::MulColBroadcast(a, w) => {
            let (xa, xw) = (*a, *w);
            if head[xa].needs_grad {
                let wv = head[xw].data.clone();
                for r in 0..rows {
                    for c in 0..cols {
                        head[xa].grad[r * cols + c] += g[r * cols + c] * wv[r];
                    }
                }
            }
            if head[xw].needs_grad {
                let av = head[xa].data.clone();
                for r in 0..rows {
                    let mut s = 0.0;
                    for c in 0..cols {
                        s += g[r * cols + c] * av[r * cols + c];
                    }
                    head[xw].grad[r] += s;
                }
            }
        }
        Op::BroadcastScalar(a) => {
            if head[*a].needs_grad {
                head[*a].grad[0] += g.iter().sum::<f64>();
            }
        }
        Op::Matmul(a, b) => {
            // C[m,n] = A[m,k] B[k,n]; dA = dC B^T, dB = A^T dC.
            let (xa, xb) = (*a, *b);
            let k = head[xa].cols;
            let (m, n) = (rows, cols);
            if head[xa].needs_grad {
                let bv = head[xb].data.clone();
                let ga = &mut head[xa].grad;
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        ga[i * k + p] += acc;
                    }
                }
            }
            if head[xb].needs_grad {
                let av = head[xa].data.clone();
                let gb = &mut head[xb].grad;
                for i in 0..m {
                    for p in 0..k {
                        let aip = av[i * k + p];
                        if aip != 0.0 {
                            for j in 0..n {
                                gb[p * n + j] += aip * g[i * n + j];
                            }
                        }
                    }
                }
            }
        }
        Op::Transpose(a) => {
            if head[*a].needs_grad {
                let ga = &mut head[*a].grad;
                for r in 0..rows {
                    for c in 0..cols {
                        ga[c * rows + r] += g[r * cols + c];
                    }
                }
            }
        }
        Op::Exp(a) => {
            if head[*a].needs_grad {
                for i in 0..g.len() {
                    head[*a].grad[i] += g[i] * node.data[i];
                }
            }
        }
        Op::Log(a) => {
            if head[*a].needs_grad {
                let av = head[*a].data.clone();
                for i in 0..g.len() {
                    head[*a].grad[i] += g[i] / av[i];
                }
            }
        }
        Op::Relu(a) => {
            if head[*a].needs_grad {
                let av = head[*a].data.clone();
                for i in 0..g.len() {
                    if av[i] > 0.0 {
                        head[*a].grad[i] += g[i];
                    }
                }
            }
        }
        Op::Gelu(a) => {
            if head[*a].needs_grad {
                let av = head[*a].data.clone();
                for i in 0..g.len() {
                    head[*a].grad[i] += g[i] * gelu_deriv(av[i]);
                }
            }
        }
        Op::Sigmoid(a) => {
            if head[*a].needs_grad {
                for i in 0..g.len() {
                    let y = node.data[i];
                    head[*a].grad[i] += g[i] * y * (1.0 - y);
                }
            }
        }
        Op::Square(a) => {
            if head[*a].needs_grad {
                let av = head[*a].data.clone();
                for i in 0..g.len() {
                    head[*a].grad[i] += g[i] * 2.0 * av[i];
                }
            }
        }
        Op::SoftmaxRows(a) => {
            // dx = y * (dy - <dy, y>) per row.
            if head[*a].needs_grad {
                for r in 0..rows {
                    let row = r * cols;
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dot += g[row + c] * node.data[row + c];
                    }
                    for c in 0..cols {
                        head[*a].grad[row + c] += node.data[row + c] * (g[row + c] - dot);
                    }
                }
            }
        }
        Op::MaskedFillRows { input, mask } => {
            if head[*input].needs_grad {
                for i in 0..g.len() {
                    if !mask[i] {
                        head[*input].grad[i] += g[i];
                    }
                }
            }
        }
        Op::LayerNorm { input, gain, bias, eps } => {
            layer_norm_backward(node, head, *input, *gain, *bias, *eps);
        }
        Op::SumAll(a) => {
            if head[*a].needs_grad {
                let s = g[0];
                for gi in head[*a].grad.iter_mut() {
                    *gi += s;
                }
            }
        }
        Op::MeanAll(a) => {
            if head[*a].needs_grad {
                let s = g[0] / head[*a].data.len() as f64;
                for gi in head[*a].grad.iter_mut() {
                    *gi += s;
                }
            }
        }
        Op::MeanAxis0(a) => {
            if head[*a].needs_grad {
                let in_rows = head[*a].rows;
                let s = 1.0 / in_rows as f64;
                for r in 0..in_rows {
                    for c in 0..cols {
                        head[*a].grad[r * cols + c] += g[c] * s;
                    }
                }
            }
        }
        Op::SumAxis1(a) => {
            if head[*a].needs_grad {
                let in_cols = head[*a].cols;
                for r in 0..rows {
                    for c in 0..in_cols {
                        head[*a].grad[r * in_cols + c] += g[r];
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = head[p].data.len();
                if head[p].needs_grad {
                    for i in 0..n {
                        head[p].grad[i] += g[offset + i];
                    }
                }
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let mut col0 = 0;
            for &p in parts {
                let pc = head[p].cols;
                if head[p].needs_grad {
                    for r in 0..rows {
                        for c in 0..pc {
                            head[p].grad[r * pc + c] += g[r * cols + col0 + c];
                        }
                    }
                }
                col0 += pc;
            }
        }
        Op::SliceRows { input, start } => {
            if head[*input].needs_grad {
                let ic = head[*input].cols;
                for r in 0..rows {
                    for c in 0..cols {
                        head[*input].grad[(start + r) * ic + c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::SliceCols { input, start } => {
            if head[*input].needs_grad {
                let ic = head[*input].cols;
                for r in 0..rows {
                    for c in 0..cols {
                        head[*input].grad[r * ic + start + c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::RowGather { input, indices } => {
            if head[*input].needs_grad {
                for (r, &src) in indices.iter().enumerate() {
                    for c in 0..cols {
                        head[*input].grad[src * cols + c] += g[r * cols + c];
                    }
                }
            }
        }
        Op::RowScatterAdd { input, indices } => {
            if head[*input].needs_grad {
                for (r, &dst) in indices.iter().enumerate() {
                    for c in 0..cols {
                        head[*input].grad[r * cols + c] += g[dst * cols + c];
                    }
                }
            }
        }
        Op::GroupedDot { q, k, qrows, krows } => {
            let (xq, xk) = (*q, *k);
            let d = head[xq].cols;
            let groups = head[xq].rows / qrows;
            let qv = head[xq].data.clone();
            let kv = head[xk].data.clone();
            for gi in 0..groups {
                for i in 0..*qrows {
                    let qrow = (gi * qrows + i) * d;
                    let grow = (gi * qrows + i) * krows;
                    for j in 0..*krows {
                        let gij = g[grow + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let krow = (gi * krows + j) * d;
                        if head[xq].needs_grad {
                            for p in 0..d {
                                head[xq].grad[qrow + p] += gij * kv[krow + p];
                            }
                        }
                        if head[xk].needs_grad {
                            for p in 0..d {
                                head[xk].grad[krow + p] += gij * qv[qrow + p];
                            }
                        }
                    }
                }
            }
        }
        Op::GroupedMix { w, v, qrows, krows } => {
            let (xw, xv) = (*w, *v);
            let d = head[xv].cols;
            let groups = head[xw].rows / qrows;
            let wv = head[xw].data.clone();
            let vv = head[xv].data.clone();
            for gi in 0..groups {
                for i in 0..*qrows {
                    let orow = (gi * qrows + i) * d;
                    let wrow = (gi * qrows + i) * krows;
                    for j in 0..*krows {
                        let vrow = (gi * krows + j) * d;
                        if head[xw].needs_grad {
                            let mut s = 0.0;
                            for p in 0..d {
                                s += g[orow + p] * vv[vrow + p];
                            }
                            head[xw].grad[wrow + j] += s;
                        }
                        if head[xv].needs_grad {
                            let wij = wv[wrow + j];
                            if wij != 0.0 {
                                for p in 0..d {
                                    head[xv].grad[vrow + p] += wij * g[orow + p];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::WeightedRowCombine { input, combos } => {
            if head[*input].needs_grad {
                for (r, combo) in combos.iter().enumerate() {
                    for t in 0..4 {
                        let w = combo.w[t];
                        if w != 0.0 {
                            let src = combo.idx[t] * cols;
                            for c in 0..cols {
                                head[*input].grad[src + c] += w * g[r * cols + c];
                            }
                        }
                    }
                }
            }
        }
        Op::Im2Col { input, h, w, cin } => {
            if head[*input].needs_grad {
                let (h, w, cin) = (*h, *w, *cin);
                for py in 0..h {
                    for px in 0..w {
                        let orow = (py * w + px) * cols;
                        for (t, (dy, dx)) in TAPS.iter().enumerate() {
                            let ny = py as isize + dy;
                            let nx = px as isize + dx;
                            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                                continue;
                            }
                            let src = (ny as usize * w + nx as usize) * cin;
                            for c in 0..cin {
                                head[*input].grad[src + c] += g[orow + t * cin + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

const TAPS: [(isize, isize); 9] = [
    (-1, -1),
    (-1, 0),
    (-1, 1),
    (0, -1),
    (0, 0),
    (0, 1),
    (1, -1),
    (1, 0),
    (1, 1),
];

fn accumulate(head: &mut [Node], id: usize, g: &[f64]) {
    if head[id].needs_grad {
        for (gi, s) in head[id].grad.iter_mut().zip(g.iter()) {
            *gi += s;
        }
    }
}

fn accumulate_scaled(head: &mut [Node], id: usize, g: &[f64], scale: f64) {
    if head[id].needs_grad {
        for (gi, s) in head[id].grad.iter_mut().zip(g.iter()) {
            *gi += scale * s;
        }
    }
}

fn layer_norm_backward(node: &Node, head: &mut [Node], input: usize, gain: usize, bias: usize, eps: f64) {
    let (rows, cols) = (node.rows, node.cols);
    let g = &node.grad;
    let xv = head[input].data.clone();
    let gainv = head[gain].data.clone();
    for r in 0..rows {
        let row = &xv[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
        let inv_std = 1.0 / (var + eps).sqrt();
        let xhat: Vec<f64> = row.iter().map(|x| (x - mean) * inv_std).collect();
        let gy = &g[r * cols..(r + 1) * cols];
        if head[bias].needs_grad {
            for c in 0..cols {
                head[bias].grad[c] += gy[c];
            }
        }
        if head[gain].needs_grad {
            for c in 0..cols {
                head[gain].grad[c] += gy[c] * xhat[c];
            }
        }
        if head[input].needs_grad {
            let gxhat: Vec<f64> = (0..cols).map(|c| gy[c] * gainv[c]).collect();
            let mean_g = gxhat.iter().sum::<f64>() / cols as f64;
            let mean_gx = (0..cols).map(|c| gxhat[c] * xhat[c]).sum::<f64>() / cols as f64;
            for c in 0..cols {
                head[input].grad[r * cols + c] +=
                    inv_std * (gxhat[c] - mean_g - xhat[c] * mean_gx);
            }
        }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    /// Scalar value; panics unless the node is 1x1.
    pub fn item(&self) -> f64 {
        assert_eq!((self.rows, self.cols), (1, 1), "item() on non-scalar");
        self.tape.nodes.borrow()[self.id].data[0]
    }

    pub fn check_finite(&self, what: &str) -> Result<(), TensorError> {
        let nodes = self.tape.nodes.borrow();
        if nodes[self.id].data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TensorError::NonFinite(what.to_string()))
        }
    }

    fn same_shape(&self, other: &Var<'t>, op: &str) {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "{op}: shape mismatch [{},{}] vs [{},{}]",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
    }

    fn unary(&self, op: Op, data: Vec<f64>) -> Var<'t> {
        self.tape
            .push(self.rows, self.cols, data, op, self.tape.needs(self.id))
    }

    fn map(&self, f: impl Fn(f64) -> f64, op: Op) -> Var<'t> {
        let data = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data.iter().map(|&x| f(x)).collect()
        };
        self.unary(op, data)
    }

    fn binary(&self, other: &Var<'t>, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'t> {
        let data = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .data
                .iter()
                .zip(nodes[other.id].data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect()
        };
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(self.rows, self.cols, data, op, needs)
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "add");
        self.binary(&other, |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "sub");
        self.binary(&other, |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "mul");
        self.binary(&other, |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "div");
        self.binary(&other, |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn neg(&self) -> Var<'t> {
        self.map(|x| -x, Op::Neg(self.id))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.map(|x| x * s, Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.map(|x| x + s, Op::AddScalar(self.id))
    }

    /// `[r,c] + [1,c]` broadcast over rows.
    pub fn add_bias_row(&self, bias: Var<'t>) -> Var<'t> {
        assert_eq!(bias.rows, 1, "add_bias_row: bias must be a single row");
        assert_eq!(bias.cols, self.cols, "add_bias_row: width mismatch");
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].data;
            let b = &nodes[bias.id].data;
            let mut out = a.clone();
            for r in 0..self.rows {
                for c in 0..self.cols {
                    out[r * self.cols + c] += b[c];
                }
            }
            out
        };
        let needs = self.tape.needs(self.id) || self.tape.needs(bias.id);
        self.tape
            .push(self.rows, self.cols, data, Op::AddBiasRow(self.id, bias.id), needs)
    }

    /// `[r,c] * [r,1]` broadcast over cols.
    pub fn mul_col(&self, weights: Var<'t>) -> Var<'t> {
        assert_eq!(weights.cols, 1, "mul_col: weights must be a single column");
        assert_eq!(weights.rows, self.rows, "mul_col: height mismatch");
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].data;
            let w = &nodes[weights.id].data;
            let mut out = a.clone();
            for r in 0..self.rows {
                for c in 0..self.cols {
                    out[r * self.cols + c] *= w[r];
                }
            }
            out
        };
        let needs = self.tape.needs(self.id) || self.tape.needs(weights.id);
        self.tape.push(
            self.rows,
            self.cols,
            data,
            Op::MulColBroadcast(self.id, weights.id),
            needs,
        )
    }

    pub fn broadcast_to(&self, rows: usize, cols: usize) -> Var<'t> {
        assert_eq!((self.rows, self.cols), (1, 1), "broadcast_to: input must be 1x1");
        let v = self.item();
        self.tape.push(
            rows,
            cols,
            vec![v; rows * cols],
            Op::BroadcastScalar(self.id),
            self.tape.needs(self.id),
        )
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        assert_eq!(
            self.cols, other.rows,
            "matmul: [{},{}] x [{},{}]",
            self.rows, self.cols, other.rows, other.cols
        );
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].data;
            let b = &nodes[other.id].data;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip != 0.0 {
                        let brow = &b[p * n..(p + 1) * n];
                        let orow = &mut out[i * n..(i + 1) * n];
                        for j in 0..n {
                            orow[j] += aip * brow[j];
                        }
                    }
                }
            }
            out
        };
        let needs = self.tape.needs(self.id) || self.tape.needs(other.id);
        self.tape.push(m, n, data, Op::Matmul(self.id, other.id), needs)
    }

    pub fn transpose(&self) -> Var<'t> {
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].data;
            let mut out = vec![0.0; a.len()];
            for r in 0..self.rows {
                for c in 0..self.cols {
                    out[c * self.rows + r] = a[r * self.cols + c];
                }
            }
            out
        };
        self.tape.push(
            self.cols,
            self.rows,
            data,
            Op::Transpose(self.id),
            self.tape.needs(self.id),
        )
    }

    pub fn exp(&self) -> Var<'t> {
        self.map(f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Var<'t> {
        self.map(f64::ln, Op::Log(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.map(|x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn gelu(&self) -> Var<'t> {
        self.map(gelu, Op::Gelu(self.id))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.map(|x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.map(|x| x * x, Op::Square(self.id))
    }

    /// Row-wise softmax. `-inf` entries get exactly zero weight; a row of
    /// all `-inf` degrades to uniform (callers mask such rows upstream).
    pub fn softmax_rows(&self) -> Var<'t> {
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].data;
            let mut out = vec![0.0; a.len()];
            for r in 0..self.rows {
                let row = &a[r * self.cols..(r + 1) * self.cols];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let orow = &mut out[r * self.cols..(r + 1) * self.cols];
                if max == f64::NEG_INFINITY {
                    let u = 1.0 / self.cols as f64;
                    orow.iter_mut().for_each(|o| *o = u);
                    continue;
                }
                let mut sum = 0.0;
                for (o, &x) in orow.iter_mut().zip(row.iter()) {
                    *o = (x - max).exp();
                    sum += *o;
                }
                orow.iter_mut().for_each(|o| *o /= sum);
            }
            out
        };
        self.unary(Op::SoftmaxRows(self.id), data)
    }

    /// Entries where `mask` is true are replaced by `value` (no gradient
    /// flows through replaced entries).
    pub fn masked_fill(&self, mask: &[bool], value: f64) -> Var<'t> {
        assert_eq!(mask.len(), self.rows * self.cols, "masked_fill: mask size");
        let mask = std::rc::Rc::new(mask.to_vec());
        let data = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .data
                .iter()
                .zip(mask.iter())
                .map(|(&x, &m)| if m { value } else { x })
                .collect()
        };
        self.unary(Op::MaskedFillRows { input: self.id, mask }, data)
    }

    pub fn layer_norm(&self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Var<'t> {
        assert_eq!(gain.cols, self.cols, "layer_norm: gain width");
        assert_eq!(bias.cols, self.cols, "layer_norm: bias width");
        let data = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].data;
            let gv = &nodes[gain.id].data;
            let bv = &nodes[bias.id].data;
            let mut out = vec![0.0; x.len()];
            for r in 0..self.rows {
                let row = &x[r * self.cols..(r + 1) * self.cols];
                let mean = row.iter().sum::<f64>() / self.cols as f64;
                let var =
                    row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / self.cols as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                for c in 0..self.cols {
                    out[r * self.cols + c] = gv[c] * (row[c] - mean) * inv_std + bv[c];
                }
            }
            out
        };
        let needs = self.tape.needs(self.id) || self.tape.needs(gain.id) || self.tape.needs(bias.id);
        self.tape.push(
            self.rows,
            self.cols,
            data,
            Op::LayerNorm { input: self.id, gain: gain.id, bias: bias.id, eps },
            needs,
        )
    }

    pub fn sum_all(&self) -> Var<'t> {
        let s = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data.iter().sum::<f64>()
        };
        self.tape
            .push(1, 1, vec![s], Op::SumAll(self.id), self.tape.needs(self.id))
    }

    pub fn mean_all(&self) -> Var<'t> {
        let s = {
            let nodes = self.tape.nodes.borrow();
            let d = &nodes[self.id].data;
            d.iter().sum::<f64>() / d.len() as f64
        };
        self.tape
            .push(1, 1, vec![s], Op::MeanAll(self.id), self.tape.needs(self.id))
    }

    /// Mean over rows: `[r,c] -> [1,c]`.
    pub fn mean_axis0(&self) -> Var<'t> {
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].data;
            let mut out = vec![0.0; self.cols];
            for r in 0..self.rows {
                for c in 0..self.cols {
                    out[c] += a[r * self.cols + c];
                }
            }
            out.iter_mut().for_each(|v| *v /= self.rows as f64);
            out
        };
        self.tape
            .push(1, self.cols, data, Op::MeanAxis0(self.id), self.tape.needs(self.id))
    }

    /// Sum over cols: `[r,c] -> [r,1]`.
    pub fn sum_axis1(&self) -> Var<'t> {
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].data;
            (0..self.rows)
                .map(|r| a[r * self.cols..(r + 1) * self.cols].iter().sum())
                .collect()
        };
        self.tape
            .push(self.rows, 1, data, Op::SumAxis1(self.id), self.tape.needs(self.id))
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Var<'t> {
        assert!(start + len <= self.rows, "slice_rows out of bounds");
        let data = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].data[start * self.cols..(start + len) * self.cols].to_vec()
        };
        self.tape.push(
            len,
            self.cols,
            data,
            Op::SliceRows { input: self.id, start },
            self.tape.needs(self.id),
        )
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t> {
        assert!(start + len <= self.cols, "slice_cols out of bounds");
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].data;
            let mut out = Vec::with_capacity(self.rows * len);
            for r in 0..self.rows {
                out.extend_from_slice(&a[r * self.cols + start..r * self.cols + start + len]);
            }
            out
        };
        self.tape.push(
            self.rows,
            len,
            data,
            Op::SliceCols { input: self.id, start },
            self.tape.needs(self.id),
        )
    }

    pub fn row_gather(&self, indices: &[usize]) -> Var<'t> {
        let indices = std::rc::Rc::new(indices.to_vec());
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].data;
            let mut out = Vec::with_capacity(indices.len() * self.cols);
            for &i in indices.iter() {
                assert!(i < self.rows, "row_gather index out of bounds");
                out.extend_from_slice(&a[i * self.cols..(i + 1) * self.cols]);
            }
            out
        };
        let rows = indices.len();
        self.tape.push(
            rows,
            self.cols,
            data,
            Op::RowGather { input: self.id, indices },
            self.tape.needs(self.id),
        )
    }

    /// Scatter-add rows of `self` into a zero matrix with `out_rows` rows:
    /// `out[indices[i]] += self[i]`.
    pub fn row_scatter_add(&self, indices: &[usize], out_rows: usize) -> Var<'t> {
        assert_eq!(indices.len(), self.rows, "row_scatter_add: index count");
        let indices = std::rc::Rc::new(indices.to_vec());
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].data;
            let mut out = vec![0.0; out_rows * self.cols];
            for (r, &dst) in indices.iter().enumerate() {
                assert!(dst < out_rows, "row_scatter_add index out of bounds");
                for c in 0..self.cols {
                    out[dst * self.cols + c] += a[r * self.cols + c];
                }
            }
            out
        };
        self.tape.push(
            out_rows,
            self.cols,
            data,
            Op::RowScatterAdd { input: self.id, indices },
            self.tape.needs(self.id),
        )
    }

    /// Per-group attention scores. `self` is Q `[G*q, d]`, `keys` is
    /// K `[G*k, d]`; result `[G*q, k]` holds `Q_gi . K_gj`.
    pub fn grouped_dot(&self, keys: Var<'t>, qrows: usize, krows: usize) -> Var<'t> {
        assert_eq!(self.cols, keys.cols, "grouped_dot: feature dim");
        assert_eq!(self.rows % qrows, 0, "grouped_dot: q rows");
        assert_eq!(keys.rows % krows, 0, "grouped_dot: k rows");
        let groups = self.rows / qrows;
        assert_eq!(keys.rows / krows, groups, "grouped_dot: group count");
        let d = self.cols;
        let data = {
            let nodes = self.tape.nodes.borrow();
            let q = &nodes[self.id].data;
            let k = &nodes[keys.id].data;
            let mut out = vec![0.0; groups * qrows * krows];
            for gi in 0..groups {
                for i in 0..qrows {
                    let qrow = &q[(gi * qrows + i) * d..(gi * qrows + i + 1) * d];
                    let orow = (gi * qrows + i) * krows;
                    for j in 0..krows {
                        let krow = &k[(gi * krows + j) * d..(gi * krows + j + 1) * d];
                        out[orow + j] = qrow.iter().zip(krow.iter()).map(|(a, b)| a * b).sum();
                    }
                }
            }
            out
        };
        let needs = self.tape.needs(self.id) || self.tape.needs(keys.id);
        self.tape.push(
            groups * qrows,
            krows,
            data,
            Op::GroupedDot { q: self.id, k: keys.id, qrows, krows },
            needs,
        )
    }

    /// Per-group value mixing. `self` is W `[G*q, k]`, `values` is
    /// V `[G*k, d]`; result `[G*q, d]` is the per-group weighted sum.
    pub fn grouped_mix(&self, values: Var<'t>, qrows: usize, krows: usize) -> Var<'t> {
        assert_eq!(self.cols, krows, "grouped_mix: weight width");
        assert_eq!(self.rows % qrows, 0, "grouped_mix: q rows");
        assert_eq!(values.rows % krows, 0, "grouped_mix: v rows");
        let groups = self.rows / qrows;
        assert_eq!(values.rows / krows, groups, "grouped_mix: group count");
        let d = values.cols;
        let data = {
            let nodes = self.tape.nodes.borrow();
            let w = &nodes[self.id].data;
            let v = &nodes[values.id].data;
            let mut out = vec![0.0; groups * qrows * d];
            for gi in 0..groups {
                for i in 0..qrows {
                    let wrow = &w[(gi * qrows + i) * krows..(gi * qrows + i + 1) * krows];
                    let orow = &mut out[(gi * qrows + i) * d..(gi * qrows + i + 1) * d];
                    for (j, &wij) in wrow.iter().enumerate() {
                        if wij != 0.0 {
                            let vrow = &v[(gi * krows + j) * d..(gi * krows + j + 1) * d];
                            for p in 0..d {
                                orow[p] += wij * vrow[p];
                            }
                        }
                    }
                }
            }
            out
        };
        let needs = self.tape.needs(self.id) || self.tape.needs(values.id);
        self.tape.push(
            groups * qrows,
            d,
            data,
            Op::GroupedMix { w: self.id, v: values.id, qrows, krows },
            needs,
        )
    }

    /// Each output row is a fixed weighted combination of up to four input
    /// rows (bilinear feature lookup; geometry is constant, gradients flow
    /// to the input rows only).
    pub fn weighted_row_combine(&self, combos: &[RowCombo]) -> Var<'t> {
        let combos = std::rc::Rc::new(combos.to_vec());
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].data;
            let mut out = vec![0.0; combos.len() * self.cols];
            for (r, combo) in combos.iter().enumerate() {
                let orow = &mut out[r * self.cols..(r + 1) * self.cols];
                for t in 0..4 {
                    if combo.w[t] != 0.0 {
                        assert!(combo.idx[t] < self.rows, "row combine index");
                        let src = &a[combo.idx[t] * self.cols..(combo.idx[t] + 1) * self.cols];
                        for c in 0..self.cols {
                            orow[c] += combo.w[t] * src[c];
                        }
                    }
                }
            }
            out
        };
        let rows = combos.len();
        self.tape.push(
            rows,
            self.cols,
            data,
            Op::WeightedRowCombine { input: self.id, combos },
            self.tape.needs(self.id),
        )
    }

    /// 3x3 im2col with zero padding, stride 1. Input is `[h*w, cin]` (one
    /// row per pixel); output is `[h*w, 9*cin]`.
    pub fn im2col_3x3(&self, h: usize, w: usize) -> Var<'t> {
        assert_eq!(self.rows, h * w, "im2col: pixel count");
        let cin = self.cols;
        let data = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].data;
            let mut out = vec![0.0; h * w * 9 * cin];
            for py in 0..h {
                for px in 0..w {
                    let orow = (py * w + px) * 9 * cin;
                    for (t, (dy, dx)) in TAPS.iter().enumerate() {
                        let ny = py as isize + dy;
                        let nx = px as isize + dx;
                        if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                            continue;
                        }
                        let src = (ny as usize * w + nx as usize) * cin;
                        out[orow + t * cin..orow + (t + 1) * cin]
                            .copy_from_slice(&a[src..src + cin]);
                    }
                }
            }
            out
        };
        self.tape.push(
            h * w,
            9 * cin,
            data,
            Op::Im2Col { input: self.id, h, w, cin },
            self.tape.needs(self.id),
        )
    }
}

pub fn concat_rows<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_rows: empty input");
    let cols = parts[0].cols;
    let mut rows = 0;
    let mut data = Vec::new();
    let mut needs = false;
    {
        let nodes = tape.nodes.borrow();
        for p in parts {
            assert_eq!(p.cols, cols, "concat_rows: width mismatch");
            rows += p.rows;
            data.extend_from_slice(&nodes[p.id].data);
            needs |= nodes[p.id].needs_grad;
        }
    }
    tape.push(rows, cols, data, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), needs)
}

pub fn concat_cols<'t>(tape: &'t Tape, parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty(), "concat_cols: empty input");
    let rows = parts[0].rows;
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    let mut needs = false;
    let data = {
        let nodes = tape.nodes.borrow();
        let mut out = vec![0.0; rows * cols];
        let mut col0 = 0;
        for p in parts {
            assert_eq!(p.rows, rows, "concat_cols: height mismatch");
            let a = &nodes[p.id].data;
            for r in 0..rows {
                out[r * cols + col0..r * cols + col0 + p.cols]
                    .copy_from_slice(&a[r * p.cols..(r + 1) * p.cols]);
            }
            col0 += p.cols;
            needs |= nodes[p.id].needs_grad;
        }
        out
    };
    tape.push(rows, cols, data, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), needs)
}
