//! Reverse-mode autodiff over a flat tape of vector-valued nodes.
//! No broadcasting beyond matrix-vector and elementwise; shapes are
//! validated eagerly and mismatches panic, since they are programming
//! errors rather than data conditions.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// y_r = sum_c W[r,c] x_c with W stored row-major as a vector node
    MatVec { w: NodeId, x: NodeId, rows: usize, cols: usize },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    AddConst(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Concat(Vec<NodeId>),
    Dot(NodeId, NodeId),
    Sum(NodeId),
    Index(NodeId, usize),
    /// vector times scalar node
    VScale { v: NodeId, s: NodeId },
    /// sum of constant-coefficient multiples of equal-length vectors
    LinComb(Vec<(f64, NodeId)>),
    Softmax(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Single-threaded computation tape. Build the forward pass with the op
/// methods, then call [`Tape::backward`] on a scalar output.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.len(), 1, "expected scalar node");
        v[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, values: Vec<f64>) -> NodeId {
        self.push(values, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.leaf(vec![v])
    }

    pub fn zeros(&mut self, n: usize) -> NodeId {
        self.leaf(vec![0.0; n])
    }

    pub fn matvec(&mut self, w: NodeId, rows: usize, cols: usize, x: NodeId) -> NodeId {
        assert_eq!(self.nodes[w.0].value.len(), rows * cols, "weight size");
        assert_eq!(self.nodes[x.0].value.len(), cols, "input size");
        let mut out = vec![0.0; rows];
        for r in 0..rows {
            let mut acc = 0.0;
            for c in 0..cols {
                acc += self.nodes[w.0].value[r * cols + c] * self.nodes[x.0].value[c];
            }
            out[r] = acc;
        }
        self.push(out, Op::MatVec { w, x, rows, cols })
    }

    fn zip(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "elementwise length");
        let out = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        self.push(out, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.nodes[a.0].value.iter().map(|&x| x * c).collect();
        self.push(out, Op::ScaleConst(a, c))
    }

    pub fn add_const(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.nodes[a.0].value.iter().map(|&x| x + c).collect();
        self.push(out, Op::AddConst(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| x.tanh().clamp(-1.0, 1.0))
            .collect();
        self.push(out, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.iter().map(|&x| x.max(0.0)).collect();
        self.push(out, Op::Relu(a))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.len(), vb.len(), "dot length");
        let out = va.iter().zip(vb).map(|(&x, &y)| x * y).sum();
        self.push(vec![out], Op::Dot(a, b))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = self.nodes[a.0].value.iter().sum();
        self.push(vec![out], Op::Sum(a))
    }

    pub fn index(&mut self, a: NodeId, i: usize) -> NodeId {
        assert!(i < self.nodes[a.0].value.len(), "index in range");
        let out = self.nodes[a.0].value[i];
        self.push(vec![out], Op::Index(a, i))
    }

    pub fn vscale(&mut self, v: NodeId, s: NodeId) -> NodeId {
        assert_eq!(self.nodes[s.0].value.len(), 1, "scale factor is scalar");
        let sv = self.nodes[s.0].value[0];
        let out = self.nodes[v.0].value.iter().map(|&x| x * sv).collect();
        self.push(out, Op::VScale { v, s })
    }

    /// sum_i coeffs_i * vectors_i with compile-time-constant coefficients
    pub fn lincomb(&mut self, terms: &[(f64, NodeId)]) -> NodeId {
        assert!(!terms.is_empty(), "lincomb of nothing");
        let n = self.nodes[terms[0].1 .0].value.len();
        let mut out = vec![0.0; n];
        for &(c, id) in terms {
            let v = &self.nodes[id.0].value;
            assert_eq!(v.len(), n, "lincomb length");
            for (o, &x) in out.iter_mut().zip(v) {
                *o += c * x;
            }
        }
        self.push(out, Op::LinComb(terms.to_vec()))
    }

    /// Numerically stable softmax over one vector node.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out = exps.iter().map(|&e| e / total).collect();
        self.push(out, Op::Softmax(a))
    }

    /// Gradients of the scalar node `output` with respect to every node,
    /// indexable by [`NodeId`]. One reverse sweep over the tape.
    pub fn backward(&self, output: NodeId) -> Grads {
        assert_eq!(
            self.nodes[output.0].value.len(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Vec<f64>> = self
            .nodes
            .iter()
            .map(|n| vec![0.0; n.value.len()])
            .collect();
        grads[output.0][0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let g = std::mem::take(&mut grads[i]);
            if g.iter().all(|&x| x == 0.0) {
                grads[i] = g;
                continue;
            }
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatVec { w, x, rows, cols } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    for r in 0..*rows {
                        for c in 0..*cols {
                            grads[w.0][r * cols + c] += g[r] * xv[c];
                            grads[x.0][c] += g[r] * wv[r * cols + c];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (j, &gj) in g.iter().enumerate() {
                        grads[a.0][j] += gj;
                        grads[b.0][j] += gj;
                    }
                }
                Op::Sub(a, b) => {
                    for (j, &gj) in g.iter().enumerate() {
                        grads[a.0][j] += gj;
                        grads[b.0][j] -= gj;
                    }
                }
                Op::Mul(a, b) => {
                    for (j, &gj) in g.iter().enumerate() {
                        grads[a.0][j] += gj * self.nodes[b.0].value[j];
                        grads[b.0][j] += gj * self.nodes[a.0].value[j];
                    }
                }
                Op::ScaleConst(a, c) => {
                    for (j, &gj) in g.iter().enumerate() {
                        grads[a.0][j] += gj * c;
                    }
                }
                Op::AddConst(a) => {
                    for (j, &gj) in g.iter().enumerate() {
                        grads[a.0][j] += gj;
                    }
                }
                Op::Sigmoid(a) => {
                    for (j, &gj) in g.iter().enumerate() {
                        let s = self.nodes[i].value[j];
                        grads[a.0][j] += gj * s * (1.0 - s);
                    }
                }
                Op::Tanh(a) => {
                    for (j, &gj) in g.iter().enumerate() {
                        let t = self.nodes[i].value[j];
                        grads[a.0][j] += gj * (1.0 - t * t);
                    }
                }
                Op::Relu(a) => {
                    for (j, &gj) in g.iter().enumerate() {
                        if self.nodes[a.0].value[j] > 0.0 {
                            grads[a.0][j] += gj;
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        for j in 0..n {
                            grads[p.0][j] += g[off + j];
                        }
                        off += n;
                    }
                }
                Op::Dot(a, b) => {
                    let gs = g[0];
                    for j in 0..self.nodes[a.0].value.len() {
                        grads[a.0][j] += gs * self.nodes[b.0].value[j];
                        grads[b.0][j] += gs * self.nodes[a.0].value[j];
                    }
                }
                Op::Sum(a) => {
                    let gs = g[0];
                    for ga in grads[a.0].iter_mut() {
                        *ga += gs;
                    }
                }
                Op::Index(a, j) => {
                    grads[a.0][*j] += g[0];
                }
                Op::VScale { v, s } => {
                    let sv = self.nodes[s.0].value[0];
                    let mut gs = 0.0;
                    for (j, &gj) in g.iter().enumerate() {
                        grads[v.0][j] += gj * sv;
                        gs += gj * self.nodes[v.0].value[j];
                    }
                    grads[s.0][0] += gs;
                }
                Op::LinComb(terms) => {
                    for &(c, id) in terms {
                        for (j, &gj) in g.iter().enumerate() {
                            grads[id.0][j] += gj * c;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let s = &self.nodes[i].value;
                    let inner: f64 = g.iter().zip(s).map(|(&gj, &sj)| gj * sj).sum();
                    for (j, &sj) in s.iter().enumerate() {
                        grads[a.0][j] += sj * (g[j] - inner);
                    }
                }
            }
            grads[i] = g;
        }
        Grads(grads)
    }
}

/// Per-node gradients from one backward sweep.
pub struct Grads(Vec<Vec<f64>>);

impl Grads {
    pub fn get(&self, id: NodeId) -> &[f64] {
        &self.0[id.0]
    }
}
