//! Minimal reverse-mode differentiation over scalars, vectors and 2-D grids.
//!
//! A [`Tape`] owns every intermediate value. Operations append a node and
//! return a [`Var`] handle; [`Tape::backward`] sweeps the nodes in reverse.
//! Binary elementwise ops accept equal shapes or a scalar on either side;
//! every other mix is a [`Error::ShapeMismatch`].
//!
//! ```
//! use minkgeo::autodiff::{Shape, Tape};
//!
//! let mut tape = Tape::new();
//! let x = tape.var(vec![1.0, 2.0, 3.0], Shape::Vector(3)).unwrap();
//! let sq = tape.mul(x, x).unwrap();
//! let y = tape.sum(sq);
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x), vec![2.0, 4.0, 6.0]);
//! ```

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    /// `(rows, cols)`; also used for matrices.
    Grid(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Scalar => 1,
            Shape::Vector(n) => n,
            Shape::Grid(h, w) => h * w,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Scalar => write!(f, "scalar"),
            Shape::Vector(n) => write!(f, "vector({n})"),
            Shape::Grid(h, w) => write!(f, "grid({h}x{w})"),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    shape: Shape,
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    Abs,
    Log1p,
    Exp,
    Sqrt,
    Sigmoid,
    Softplus,
    Gelu,
    Tanh,
    Symlog,
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    Scale(usize, f64),
    Sum(usize),
    Shift { src: usize, dy: isize, dx: isize },
    Pad { src: usize, k: usize },
    Slice { src: usize, start: usize },
    Concat(Vec<usize>),
    Flatten(usize),
    Softmax(usize),
    Cumsum(usize),
    Dot(usize, usize),
    Matvec(usize, usize),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
    shape: Shape,
    requires_grad: bool,
}

/// Append-only record of one evaluation. Not shared across threads; build one
/// tape per evaluation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
pub fn symlog(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
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

    /// Drop every node created after the first `len`. Handles to dropped
    /// nodes must not be used again.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    fn push(&mut self, op: Op, value: Vec<f64>, shape: Shape, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.len());
        self.nodes.push(Node {
            op,
            value,
            shape,
            requires_grad,
        });
        Var {
            id: self.nodes.len() - 1,
            shape,
        }
    }

    fn leaf(&mut self, value: Vec<f64>, shape: Shape, requires_grad: bool) -> Result<Var> {
        if value.len() != shape.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                left: shape.to_string(),
                right: format!("{} values", value.len()),
            });
        }
        Ok(self.push(Op::Leaf, value, shape, requires_grad))
    }

    /// Differentiable input.
    pub fn var(&mut self, value: Vec<f64>, shape: Shape) -> Result<Var> {
        self.leaf(value, shape, true)
    }

    /// Input excluded from differentiation.
    pub fn constant(&mut self, value: Vec<f64>, shape: Shape) -> Result<Var> {
        self.leaf(value, shape, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, vec![value], Shape::Scalar, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.id].value[0]
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = &self.nodes[a.id].value;
        let value: Vec<f64> = match kind {
            Unary::Neg => x.iter().map(|v| -v).collect(),
            Unary::Abs => x.iter().map(|v| v.abs()).collect(),
            Unary::Log1p => {
                if let Some(v) = x.iter().find(|&&v| v <= -1.0) {
                    return Err(Error::Domain {
                        op: "log1p",
                        detail: format!("argument {v} <= -1"),
                    });
                }
                x.iter().map(|v| v.ln_1p()).collect()
            }
            Unary::Exp => x.iter().map(|v| v.exp()).collect(),
            Unary::Sqrt => {
                if let Some(v) = x.iter().find(|&&v| v < 0.0) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: format!("argument {v} < 0"),
                    });
                }
                x.iter().map(|v| v.sqrt()).collect()
            }
            Unary::Sigmoid => x.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Softplus => x.iter().map(|&v| softplus(v)).collect(),
            Unary::Gelu => x.iter().map(|&v| gelu(v)).collect(),
            Unary::Tanh => x.iter().map(|v| v.tanh()).collect(),
            Unary::Symlog => x.iter().map(|&v| symlog(v)).collect(),
        };
        let rg = self.rg(a.id);
        Ok(self.push(Op::Unary(kind, a.id), value, a.shape, rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Neg, a).expect("neg is total")
    }
    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Unary::Abs, a).expect("abs is total")
    }
    pub fn log1p(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log1p, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a).expect("exp is total")
    }
    /// Gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a).expect("softplus is total")
    }
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a).expect("gelu is total")
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a).expect("tanh is total")
    }
    /// `sign(x) * log(1 + |x|)`.
    pub fn symlog(&mut self, a: Var) -> Var {
        self.unary(Unary::Symlog, a).expect("symlog is total")
    }

    fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
        match (a, b) {
            _ if a == b => Ok(a),
            (Shape::Scalar, s) | (s, Shape::Scalar) => Ok(s),
            _ => Err(Error::ShapeMismatch {
                op,
                left: a.to_string(),
                right: b.to_string(),
            }),
        }
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Min => "min2",
            Binary::Max => "max2",
        };
        let shape = Self::broadcast_shape(name, a.shape, b.shape)?;
        let (xa, xb) = (&self.nodes[a.id].value, &self.nodes[b.id].value);
        if matches!(kind, Binary::Div) && xb.iter().any(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let n = shape.len();
        let ia = |i: usize| if xa.len() == 1 { xa[0] } else { xa[i] };
        let ib = |i: usize| if xb.len() == 1 { xb[0] } else { xb[i] };
        let value: Vec<f64> = (0..n)
            .map(|i| {
                let (p, q) = (ia(i), ib(i));
                match kind {
                    Binary::Add => p + q,
                    Binary::Sub => p - q,
                    Binary::Mul => p * q,
                    Binary::Div => p / q,
                    Binary::Min => p.min(q),
                    Binary::Max => p.max(q),
                }
            })
            .collect();
        let rg = self.rg(a.id) || self.rg(b.id);
        Ok(self.push(Op::Binary(kind, a.id, b.id), value, shape, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }
    /// Elementwise minimum; at ties the adjoint splits evenly.
    pub fn min2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Min, a, b)
    }
    /// Elementwise maximum; at ties the adjoint splits evenly.
    pub fn max2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Max, a, b)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.nodes[a.id].value.iter().map(|v| v * c).collect();
        let rg = self.rg(a.id);
        self.push(Op::Scale(a.id, c), value, a.shape, rg)
    }

    /// `a + c` for a constant `c`.
    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let k = self.scalar(c);
        self.add(a, k).expect("scalar broadcast")
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.id].value.iter().sum();
        let rg = self.rg(a.id);
        self.push(Op::Sum(a.id), vec![s], Shape::Scalar, rg)
    }

    fn grid_dims(op: &'static str, a: Var) -> Result<(usize, usize)> {
        match a.shape {
            Shape::Grid(h, w) => Ok((h, w)),
            s => Err(Error::ShapeMismatch {
                op,
                left: s.to_string(),
                right: "grid".into(),
            }),
        }
    }

    fn vec_len(op: &'static str, a: Var) -> Result<usize> {
        match a.shape {
            Shape::Vector(n) => Ok(n),
            s => Err(Error::ShapeMismatch {
                op,
                left: s.to_string(),
                right: "vector".into(),
            }),
        }
    }

    /// `out[r, c] = a[r - dy, c - dx]`, zero where the source falls off the grid.
    pub fn shift(&mut self, a: Var, dy: isize, dx: isize) -> Result<Var> {
        let (h, w) = Self::grid_dims("shift", a)?;
        if dy.abs() > 1 || dx.abs() > 1 {
            return Err(Error::InvalidArgument(format!(
                "shift offsets must be in -1..=1, got ({dy}, {dx})"
            )));
        }
        let x = &self.nodes[a.id].value;
        let mut value = vec![0.0; h * w];
        for r in 0..h {
            let sr = r as isize - dy;
            if sr < 0 || sr >= h as isize {
                continue;
            }
            for c in 0..w {
                let sc = c as isize - dx;
                if sc < 0 || sc >= w as isize {
                    continue;
                }
                value[r * w + c] = x[sr as usize * w + sc as usize];
            }
        }
        let rg = self.rg(a.id);
        Ok(self.push(Op::Shift { src: a.id, dy, dx }, value, a.shape, rg))
    }

    /// Zero-pad a grid by `k` cells on every side.
    pub fn pad(&mut self, a: Var, k: usize) -> Result<Var> {
        let (h, w) = Self::grid_dims("pad", a)?;
        let (ph, pw) = (h + 2 * k, w + 2 * k);
        let x = &self.nodes[a.id].value;
        let mut value = vec![0.0; ph * pw];
        for r in 0..h {
            value[(r + k) * pw + k..(r + k) * pw + k + w].copy_from_slice(&x[r * w..(r + 1) * w]);
        }
        let rg = self.rg(a.id);
        Ok(self.push(Op::Pad { src: a.id, k }, value, Shape::Grid(ph, pw), rg))
    }

    /// Contiguous sub-vector `a[start..start + len]`.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let n = Self::vec_len("slice", a)?;
        if start + len > n {
            return Err(Error::ShapeMismatch {
                op: "slice",
                left: a.shape.to_string(),
                right: format!("range {start}..{}", start + len),
            });
        }
        let value = self.nodes[a.id].value[start..start + len].to_vec();
        let rg = self.rg(a.id);
        Ok(self.push(Op::Slice { src: a.id, start }, value, Shape::Vector(len), rg))
    }

    /// Concatenate scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let mut value = Vec::new();
        for p in parts {
            if matches!(p.shape, Shape::Grid(..)) {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: p.shape.to_string(),
                    right: "scalar or vector".into(),
                });
            }
            value.extend_from_slice(&self.nodes[p.id].value);
        }
        let rg = parts.iter().any(|p| self.rg(p.id));
        let n = value.len();
        Ok(self.push(
            Op::Concat(parts.iter().map(|p| p.id).collect()),
            value,
            Shape::Vector(n),
            rg,
        ))
    }

    /// Reinterpret a grid (row-major) as a vector.
    pub fn flatten(&mut self, a: Var) -> Var {
        let value = self.nodes[a.id].value.clone();
        let rg = self.rg(a.id);
        let n = value.len();
        self.push(Op::Flatten(a.id), value, Shape::Vector(n), rg)
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        Self::vec_len("softmax", a)?;
        let x = &self.nodes[a.id].value;
        let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let value = e.iter().map(|v| v / z).collect();
        let rg = self.rg(a.id);
        Ok(self.push(Op::Softmax(a.id), value, a.shape, rg))
    }

    pub fn cumsum(&mut self, a: Var) -> Result<Var> {
        Self::vec_len("cumsum", a)?;
        let value = self.nodes[a.id]
            .value
            .iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc)
            })
            .collect();
        let rg = self.rg(a.id);
        Ok(self.push(Op::Cumsum(a.id), value, a.shape, rg))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = Self::vec_len("dot", a)?;
        if b.shape != Shape::Vector(n) {
            return Err(Error::ShapeMismatch {
                op: "dot",
                left: a.shape.to_string(),
                right: b.shape.to_string(),
            });
        }
        let s = self.nodes[a.id]
            .value
            .iter()
            .zip(&self.nodes[b.id].value)
            .map(|(p, q)| p * q)
            .sum();
        let rg = self.rg(a.id) || self.rg(b.id);
        Ok(self.push(Op::Dot(a.id, b.id), vec![s], Shape::Scalar, rg))
    }

    /// Matrix (`Grid(rows, cols)`) times vector (`Vector(cols)`).
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (rows, cols) = Self::grid_dims("matvec", m)?;
        if v.shape != Shape::Vector(cols) {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                left: m.shape.to_string(),
                right: v.shape.to_string(),
            });
        }
        let mv = &self.nodes[m.id].value;
        let xv = &self.nodes[v.id].value;
        let value = mv
            .chunks_exact(cols)
            .map(|row| row.iter().zip(xv).map(|(p, q)| p * q).sum())
            .collect();
        let rg = self.rg(m.id) || self.rg(v.id);
        Ok(self.push(Op::Matvec(m.id, v.id), value, Shape::Vector(rows), rg))
    }

    /// Adjoints of the scalar `output` with respect to every node that
    /// depends on a differentiable input.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if output.shape != Shape::Scalar {
            return Err(Error::NonScalarOutput(output.shape.to_string()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: usize| &self.nodes[id].value;
        let mut acc = |id: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[id].requires_grad {
                return;
            }
            let slot = grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, a) => {
                let x = val(*a);
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        let d = match kind {
                            Unary::Neg => -1.0,
                            Unary::Abs => x[i].signum() * (x[i] != 0.0) as u8 as f64,
                            Unary::Log1p => 1.0 / (1.0 + x[i]),
                            Unary::Exp => y[i],
                            Unary::Sqrt => {
                                if y[i] > 0.0 {
                                    0.5 / y[i]
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Softplus => sigmoid(x[i]),
                            Unary::Gelu => gelu_grad(x[i]),
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Symlog => 1.0 / (1.0 + x[i].abs()),
                        };
                        ga[i] += g[i] * d;
                    }
                });
            }
            Op::Binary(kind, a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let ia = |i: usize| if xa.len() == 1 { xa[0] } else { xa[i] };
                let ib = |i: usize| if xb.len() == 1 { xb[0] } else { xb[i] };
                // partial derivatives of the op at element i
                let partial = |i: usize| -> (f64, f64) {
                    let (p, q) = (ia(i), ib(i));
                    match kind {
                        Binary::Add => (1.0, 1.0),
                        Binary::Sub => (1.0, -1.0),
                        Binary::Mul => (q, p),
                        Binary::Div => (1.0 / q, -p / (q * q)),
                        Binary::Min if p < q => (1.0, 0.0),
                        Binary::Min if p > q => (0.0, 1.0),
                        Binary::Max if p > q => (1.0, 0.0),
                        Binary::Max if p < q => (0.0, 1.0),
                        Binary::Min | Binary::Max => (0.5, 0.5),
                    }
                };
                let scatter = |target_len: usize, pick: &dyn Fn(usize) -> f64, gt: &mut [f64]| {
                    if target_len == 1 && g.len() > 1 {
                        gt[0] += (0..g.len()).map(|i| g[i] * pick(i)).sum::<f64>();
                    } else {
                        for (i, slot) in gt.iter_mut().enumerate() {
                            *slot += g[i] * pick(i);
                        }
                    }
                };
                if a == b {
                    // x op x: both partials land on the same input
                    acc(*a, &mut |ga| {
                        scatter(xa.len(), &|i| {
                            let (da, db) = partial(i);
                            da + db
                        }, ga)
                    });
                } else {
                    acc(*a, &mut |ga| scatter(xa.len(), &|i| partial(i).0, ga));
                    acc(*b, &mut |gb| scatter(xb.len(), &|i| partial(i).1, gb));
                }
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| {
                for (s, gi) in ga.iter_mut().zip(g) {
                    *s += gi * c;
                }
            }),
            Op::Sum(a) => acc(*a, &mut |ga| {
                for s in ga.iter_mut() {
                    *s += g[0];
                }
            }),
            Op::Shift { src, dy, dx } => {
                let Shape::Grid(h, w) = self.shape_of(*src) else {
                    unreachable!()
                };
                acc(*src, &mut |gs| {
                    for r in 0..h {
                        let sr = r as isize - dy;
                        if sr < 0 || sr >= h as isize {
                            continue;
                        }
                        for c in 0..w {
                            let sc = c as isize - dx;
                            if sc < 0 || sc >= w as isize {
                                continue;
                            }
                            gs[sr as usize * w + sc as usize] += g[r * w + c];
                        }
                    }
                });
            }
            Op::Pad { src, k } => {
                let Shape::Grid(h, w) = self.shape_of(*src) else {
                    unreachable!()
                };
                let pw = w + 2 * k;
                acc(*src, &mut |gs| {
                    for r in 0..h {
                        for c in 0..w {
                            gs[r * w + c] += g[(r + k) * pw + c + k];
                        }
                    }
                });
            }
            Op::Slice { src, start } => acc(*src, &mut |gs| {
                for (i, gi) in g.iter().enumerate() {
                    gs[start + i] += gi;
                }
            }),
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    acc(p, &mut |gp| {
                        for i in 0..n {
                            gp[i] += g[offset + i];
                        }
                    });
                    offset += n;
                }
            }
            Op::Flatten(a) => acc(*a, &mut |ga| {
                for (s, gi) in ga.iter_mut().zip(g) {
                    *s += gi;
                }
            }),
            Op::Softmax(a) => {
                let y = &node.value;
                let gy: f64 = g.iter().zip(y).map(|(p, q)| p * q).sum();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += y[i] * (g[i] - gy);
                    }
                });
            }
            Op::Cumsum(a) => acc(*a, &mut |ga| {
                let mut tail = 0.0;
                for i in (0..ga.len()).rev() {
                    tail += g[i];
                    ga[i] += tail;
                }
            }),
            Op::Dot(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                if a == b {
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += 2.0 * g[0] * xa[i];
                        }
                    });
                } else {
                    acc(*a, &mut |ga| {
                        for i in 0..ga.len() {
                            ga[i] += g[0] * xb[i];
                        }
                    });
                    acc(*b, &mut |gb| {
                        for i in 0..gb.len() {
                            gb[i] += g[0] * xa[i];
                        }
                    });
                }
            }
            Op::Matvec(m, v) => {
                let Shape::Grid(_, cols) = self.shape_of(*m) else {
                    unreachable!()
                };
                let (mv, xv) = (val(*m), val(*v));
                acc(*m, &mut |gm| {
                    for (row, gi) in gm.chunks_exact_mut(cols).zip(g) {
                        if *gi == 0.0 {
                            continue;
                        }
                        for (s, x) in row.iter_mut().zip(xv) {
                            *s += gi * x;
                        }
                    }
                });
                acc(*v, &mut |gv| {
                    for (row, gi) in mv.chunks_exact(cols).zip(g) {
                        for (s, w) in gv.iter_mut().zip(row) {
                            *s += gi * w;
                        }
                    }
                });
            }
        }
    }

    fn shape_of(&self, id: usize) -> Shape {
        self.nodes[id].shape
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, zeros if `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; v.shape.len()])
    }
}

/// `max_i |a_i - b_i| / max(max_i |b_i|, 1e-12)`: error relative to the
/// reference gradient's scale, robust to individually tiny components.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a
        .iter()
        .zip(b)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max);
    let scale = b.iter().map(|q| q.abs()).fold(0.0, f64::max);
    diff / scale.max(1e-12)
}
