//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] is rebuilt for every forward pass. Parameters registered in a
//! [`ParamSet`] occupy the first node slots so that their gradients can be
//! read back by [`ParamId`] after [`Graph::backward`].

use std::sync::Arc;

use ndarray::{concatenate, s, Array2, Axis, Zip};

use crate::kinematics::{self, Skeleton};

pub type Tensor = Array2<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a trainable tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct ParamId(pub usize);

/// Named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter())
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn assign_from(&mut self, other: &ParamSet) -> std::result::Result<(), String> {
        if self.names != other.names {
            return Err(format!(
                "parameter names differ ({} vs {} tensors)",
                self.len(),
                other.len()
            ));
        }
        for ((name, dst), src) in self.names.iter().zip(&self.values).zip(&other.values) {
            if dst.dim() != src.dim() {
                return Err(format!("{name}: shape {:?} vs {:?}", dst.dim(), src.dim()));
            }
        }
        self.values.clone_from(&other.values);
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    SumAll(Var),
    SumCols(Var),
    SumRows(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Gather(Var, Arc<[usize]>),
    Softmax(Var),
    NormalizeGroups(Var, usize),
    Kinematics(Var, Arc<Skeleton>, bool),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter, zeros if the loss does not depend on it.
    pub fn param(&self, params: &ParamSet, id: ParamId) -> Tensor {
        match self.grads.get(id.0).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(params.get(id).raw_dim()),
        }
    }

    /// Gradients for every parameter of `params`, in id order.
    pub fn params(&self, params: &ParamSet) -> Vec<Tensor> {
        params.ids().map(|id| self.param(params, id)).collect()
    }
}

/// Computation graph with recorded operations.
pub struct Graph {
    nodes: Vec<Node>,
    num_params: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn reduce_to(grad: Tensor, shape: (usize, usize)) -> Tensor {
    let mut g = grad;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn shape(t: &Tensor) -> (usize, usize) {
    (t.nrows(), t.ncols())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            num_params: 0,
        }
    }

    /// Graph whose first nodes are the parameters of `params`.
    pub fn with_params(params: &ParamSet) -> Self {
        let nodes = params
            .values
            .iter()
            .map(|v| Node {
                value: v.clone(),
                op: Op::Leaf,
                needs_grad: true,
            })
            .collect::<Vec<_>>();
        Self {
            num_params: nodes.len(),
            nodes,
        }
    }

    pub fn param(&self, id: ParamId) -> Var {
        assert!(id.0 < self.num_params, "parameter {} not bound", id.0);
        Var(id.0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives gradients (differentiable input).
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Tensor::from_elem((1, 1), x))
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "scalar() on a {:?} tensor", t.shape());
        t[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(self.value(v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Div(a, b), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let ng = self.ng(a);
        self.push(value, Op::Offset(a), ng)
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.scale(a, -1.0);
        self.add_scalar(n, 1.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).mapv(f);
        let ng = self.ng(a);
        self.push(value, op, ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Sum of all entries as a 1×1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::from_elem((1, 1), self.value(a).sum());
        let ng = self.ng(a);
        self.push(value, Op::SumAll(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums, `m×n -> m×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(value, Op::SumCols(a), ng)
    }

    /// Column sums, `m×n -> 1×n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let ng = self.ng(a);
        self.push(value, Op::SumRows(a), ng)
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let views = parts
            .iter()
            .map(|p| self.value(*p).view())
            .collect::<Vec<_>>();
        let value = concatenate(Axis(1), &views).expect("concat: row counts differ");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(value, Op::Concat(parts.to_vec()), ng)
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self.value(a).slice(s![.., start..start + len]).to_owned();
        let ng = self.ng(a);
        self.push(value, Op::Slice(a, start), ng)
    }

    /// `out[:, j] = a[:, idx[j]]`; indices may repeat.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let src = self.value(a);
        let mut value = Tensor::zeros((src.nrows(), idx.len()));
        for (j, &i) in idx.iter().enumerate() {
            value.column_mut(j).assign(&src.column(i));
        }
        let ng = self.ng(a);
        self.push(value, Op::Gather(a, idx.into()), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        let ng = self.ng(a);
        self.push(value, Op::Softmax(a), ng)
    }

    /// Normalizes each consecutive block of `group` columns to unit norm.
    pub fn normalize_groups(&mut self, a: Var, group: usize) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(
            value.ncols() % group,
            0,
            "width not a multiple of the group"
        );
        for mut row in value.rows_mut() {
            for mut chunk in row.exact_chunks_mut(group) {
                let n = chunk.dot(&chunk).sqrt().max(1e-12);
                chunk.mapv_inplace(|x| x / n);
            }
        }
        let ng = self.ng(a);
        self.push(value, Op::NormalizeGroups(a, group), ng)
    }

    /// Joint positions (`B×3J`) from per-joint quaternions (`B×4J`).
    /// With `align_root` the root rotation is replaced by the identity.
    pub fn forward_kinematics(&mut self, quats: Var, skel: Arc<Skeleton>, align_root: bool) -> Var {
        let q = self.value(quats);
        let j = skel.joint_count();
        assert_eq!(q.ncols(), 4 * j, "quaternion width does not match skeleton");
        let mut value = Tensor::zeros((q.nrows(), 3 * j));
        for (row, mut out) in q.rows().into_iter().zip(value.rows_mut()) {
            let qs = row
                .as_slice()
                .map(|s| s.to_vec())
                .unwrap_or_else(|| row.to_vec());
            let pos = kinematics::fk_raw(&skel, &qs, align_root);
            for (k, p) in pos.iter().enumerate() {
                out[3 * k] = p[0];
                out[3 * k + 1] = p[1];
                out[3 * k + 2] = p[2];
            }
        }
        let ng = self.ng(quats);
        self.push(value, Op::Kinematics(quats, skel, align_root), ng)
    }

    /// Linear layer helper: `x·w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    /// Accumulates d(root)/d(node) for every node that needs gradients.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let seed = Tensor::ones(self.value(root).raw_dim());
        grads[root.0] = Some(seed);

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let val = |v: Var| &self.nodes[v.0].value;
            let ng = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    if ng(*b) {
                        acc(&mut grads, *b, reduce_to(g.clone(), shape(val(*b))));
                    }
                    if ng(*a) {
                        acc(&mut grads, *a, reduce_to(g, shape(val(*a))));
                    }
                }
                Op::Sub(a, b) => {
                    if ng(*b) {
                        acc(&mut grads, *b, reduce_to(-&g, shape(val(*b))));
                    }
                    if ng(*a) {
                        acc(&mut grads, *a, reduce_to(g, shape(val(*a))));
                    }
                }
                Op::Mul(a, b) => {
                    if ng(*a) {
                        acc(&mut grads, *a, reduce_to(&g * val(*b), shape(val(*a))));
                    }
                    if ng(*b) {
                        acc(&mut grads, *b, reduce_to(&g * val(*a), shape(val(*b))));
                    }
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    if ng(*a) {
                        acc(&mut grads, *a, reduce_to(&g / bv, shape(val(*a))));
                    }
                    if ng(*b) {
                        let gb = -(&g * &node.value) / bv;
                        acc(&mut grads, *b, reduce_to(gb, shape(bv)));
                    }
                }
                Op::MatMul(a, b) => {
                    if ng(*a) {
                        acc(&mut grads, *a, g.dot(&val(*b).t()));
                    }
                    if ng(*b) {
                        acc(&mut grads, *b, val(*a).t().dot(&g));
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Offset(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|g, &y| *g *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(val(*a))
                        .for_each(|g, &x| *g *= sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Log(a) => acc(&mut grads, *a, g / val(*a)),
                Op::Square(a) => acc(&mut grads, *a, g * val(*a) * 2.0),
                Op::Sqrt(a) => acc(&mut grads, *a, g / (&node.value * 2.0)),
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|g, &x| {
                        if x < *lo || x > *hi {
                            *g = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let s = g[[0, 0]];
                    acc(&mut grads, *a, Tensor::from_elem(val(*a).raw_dim(), s));
                }
                Op::SumCols(a) => {
                    let ga = g
                        .broadcast(val(*a).raw_dim())
                        .expect("broadcast")
                        .to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let ga = g
                        .broadcast(val(*a).raw_dim())
                        .expect("broadcast")
                        .to_owned();
                    acc(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        if ng(*p) {
                            acc(
                                &mut grads,
                                *p,
                                g.slice(s![.., offset..offset + w]).to_owned(),
                            );
                        }
                        offset += w;
                    }
                }
                Op::Slice(a, start) => {
                    let av = val(*a);
                    let mut ga = Tensor::zeros(av.raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let av = val(*a);
                    let mut ga = Tensor::zeros(av.raw_dim());
                    for (j, &src) in idx.iter().enumerate() {
                        let mut col = ga.column_mut(src);
                        col += &g.column(j);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut ga = &g * y;
                    let dots = ga.sum_axis(Axis(1));
                    for (mut row, (yr, d)) in ga
                        .rows_mut()
                        .into_iter()
                        .zip(y.rows().into_iter().zip(dots.iter()))
                    {
                        Zip::from(&mut row).and(&yr).for_each(|x, &yy| *x -= yy * d);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::NormalizeGroups(a, group) => {
                    let x = val(*a);
                    let y = &node.value;
                    let mut ga = Tensor::zeros(x.raw_dim());
                    for r in 0..x.nrows() {
                        for c0 in (0..x.ncols()).step_by(*group) {
                            let xs = x.slice(s![r, c0..c0 + group]);
                            let ys = y.slice(s![r, c0..c0 + group]);
                            let gs = g.slice(s![r, c0..c0 + group]);
                            let n = xs.dot(&xs).sqrt().max(1e-12);
                            let yg = ys.dot(&gs);
                            for k in 0..*group {
                                ga[[r, c0 + k]] = (gs[k] - ys[k] * yg) / n;
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Kinematics(a, skel, align) => {
                    let q = val(*a);
                    let j = skel.joint_count();
                    let mut ga = Tensor::zeros(q.raw_dim());
                    for r in 0..q.nrows() {
                        let qs = q.row(r).to_vec();
                        let gp = (0..j)
                            .map(|k| [g[[r, 3 * k]], g[[r, 3 * k + 1]], g[[r, 3 * k + 2]]])
                            .collect::<Vec<_>>();
                        let gq = kinematics::fk_raw_backward(skel, &qs, &gp, *align);
                        for (k, d) in gq.iter().enumerate() {
                            for c in 0..4 {
                                ga[[r, 4 * k + c]] = d[c];
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }
        Gradients { grads }
    }
}
