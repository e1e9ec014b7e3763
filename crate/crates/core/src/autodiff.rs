//! Define-by-run reverse-mode automatic differentiation over dense 2-D arrays.
//!
//! Every value on the [`Tape`] is an `Array2<f64>`; scalars are `1×1`. Rows are
//! the batch axis by convention. Forward-mode derivatives (input Jacobians) are
//! carried as [`DualVar`] pairs whose tangent arithmetic is itself recorded on the
//! tape, so a reverse sweep differentiates straight through them.

use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::str::FromStr;

use ndarray::{s, Array2, Axis};

use crate::nets::Mlp;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AdError {
    #[error("unsupported primitive `{0}`")]
    UnsupportedPrimitive(String),
    #[error("non-finite value produced by node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("non-finite loss at datum {datum}")]
    NonFiniteLoss { datum: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("reverse sweep needs a 1x1 root, got {0}x{1}")]
    NonScalarRoot(usize, usize),
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise primitives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sin,
    Cos,
    Sqrt,
    Square,
    Relu,
    Heaviside,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sin => "sin",
            Unary::Cos => "cos",
            Unary::Sqrt => "sqrt",
            Unary::Square => "square",
            Unary::Relu => "relu",
            Unary::Heaviside => "heaviside",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Relu => x.max(0.0),
            Unary::Heaviside => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Local derivative given input `x` and output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Sqrt => 0.5 / y,
            Unary::Square => 2.0 * x,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Heaviside => 0.0,
        }
    }
}

impl FromStr for Unary {
    type Err = AdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "tanh" => Unary::Tanh,
            "sigmoid" => Unary::Sigmoid,
            "softplus" => Unary::Softplus,
            "exp" => Unary::Exp,
            "log" | "ln" => Unary::Log,
            "sin" => Unary::Sin,
            "cos" => Unary::Cos,
            "sqrt" => Unary::Sqrt,
            "square" => Unary::Square,
            "relu" => Unary::Relu,
            "heaviside" => Unary::Heaviside,
            other => return Err(AdError::UnsupportedPrimitive(other.to_string())),
        })
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

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize, f64),
    Unary(Unary, usize),
    MatMul(usize, usize),
    SumCols(usize),
    SumAll(usize),
    SliceCols { src: usize, start: usize, len: usize },
    Concat(Vec<usize>),
    View { src: usize, offset: usize },
    Detach(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Unary(u, _) => u.name(),
            Op::MatMul(..) => "matmul",
            Op::SumCols(_) => "sum_cols",
            Op::SumAll(_) => "sum_all",
            Op::SliceCols { .. } => "slice_cols",
            Op::Concat(_) => "concat",
            Op::View { .. } => "view",
            Op::Detach(_) => "detach",
        }
    }

    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Unary(_, a)
            | Op::SumCols(a)
            | Op::SumAll(a)
            | Op::SliceCols { src: a, .. }
            | Op::View { src: a, .. } => vec![*a],
            Op::Concat(parts) => parts.clone(),
            Op::Detach(_) => vec![],
        }
    }
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Append-only record of array operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).finish()
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize), op: &str) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("{op}: shapes {a:?} and {b:?} do not broadcast")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn shape(a: &Array2<f64>) -> (usize, usize) {
    (a.nrows(), a.ncols())
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

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Input or constant array.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), value))
    }

    pub fn row(&mut self, values: &[f64]) -> Var {
        self.leaf(Array2::from_shape_vec((1, values.len()), values.to_vec()).unwrap())
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        shape(&self.nodes[v.0].value)
    }

    /// Value of a `1×1` node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        broadcast_shape(shape(x), shape(y), "add");
        let v = x + y;
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        broadcast_shape(shape(x), shape(y), "sub");
        let v = x - y;
        self.push(Op::Sub(a.0, b.0), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        broadcast_shape(shape(x), shape(y), "mul");
        let v = x * y;
        self.push(Op::Mul(a.0, b.0), v)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        broadcast_shape(shape(x), shape(y), "div");
        let v = x / y;
        self.push(Op::Div(a.0, b.0), v)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -&self.nodes[a.0].value;
        self.push(Op::Neg(a.0), v)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = &self.nodes[a.0].value * k;
        self.push(Op::Scale(a.0, k), v)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = &self.nodes[a.0].value + k;
        self.push(Op::Offset(a.0, k), v)
    }

    pub fn unary(&mut self, u: Unary, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| u.eval(x));
        self.push(Op::Unary(u, a.0), v)
    }

    /// Unary primitive looked up by name; unknown names are rejected before
    /// anything is recorded.
    pub fn unary_named(&mut self, name: &str, a: Var) -> Result<Var, AdError> {
        let u: Unary = name.parse()?;
        Ok(self.unary(u, a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Unary::Log, a)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Unary::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(Unary::Cos, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(Unary::Sqrt, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(
            x.ncols(),
            y.nrows(),
            "matmul: {:?} x {:?}",
            shape(x),
            shape(y)
        );
        let v = x.dot(y);
        self.push(Op::MatMul(a.0, b.0), v)
    }

    /// Row sums, `r×c → r×1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(Op::SumCols(a.0), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        self.push(Op::SumAll(a.0), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.nodes[a.0]
            .value
            .slice(s![.., start..start + len])
            .to_owned();
        self.push(Op::SliceCols { src: a.0, start, len }, v)
    }

    pub fn col(&mut self, a: Var, j: usize) -> Var {
        self.slice_cols(a, j, 1)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(Op::Concat(parts.iter().map(|p| p.0).collect()), v)
    }

    /// Reinterprets `rows*cols` consecutive elements of `src` (row-major,
    /// starting at `offset`) as a `rows×cols` array.
    pub fn view(&mut self, src: Var, offset: usize, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.nodes[src.0]
            .value
            .iter()
            .skip(offset)
            .take(rows * cols)
            .copied()
            .collect();
        assert_eq!(flat.len(), rows * cols, "view out of range");
        let v = Array2::from_shape_vec((rows, cols), flat).unwrap();
        self.push(Op::View { src: src.0, offset }, v)
    }

    /// Same value, no gradient flows back through it.
    pub fn detach(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.clone();
        self.push(Op::Detach(a.0), v)
    }

    /// Derivative factor `f'(x)` of a unary primitive as a recorded node, so
    /// tangents built from it stay differentiable.
    pub fn unary_deriv(&mut self, u: Unary, x: Var, y: Var) -> Var {
        match u {
            Unary::Tanh => {
                let y2 = self.square(y);
                let n = self.neg(y2);
                self.offset(n, 1.0)
            }
            Unary::Sigmoid => {
                let n = self.neg(y);
                let one_minus = self.offset(n, 1.0);
                self.mul(y, one_minus)
            }
            Unary::Softplus => self.sigmoid(x),
            Unary::Exp => y,
            Unary::Log => {
                let one = self.scalar(1.0);
                self.div(one, x)
            }
            Unary::Sin => self.cos(x),
            Unary::Cos => {
                let s = self.sin(x);
                self.neg(s)
            }
            Unary::Sqrt => {
                let half = self.scalar(0.5);
                self.div(half, y)
            }
            Unary::Square => self.scale(x, 2.0),
            Unary::Relu => self.unary(Unary::Heaviside, x),
            Unary::Heaviside => self.scale(x, 0.0),
        }
    }

    /// First node holding a NaN or infinity, if any.
    pub fn check_finite(&self, upto: Var) -> Result<(), AdError> {
        for (i, node) in self.nodes[..=upto.0].iter().enumerate() {
            if node.value.iter().any(|x| !x.is_finite()) {
                return Err(AdError::NonFinite {
                    node: i,
                    op: node.op.name(),
                });
            }
        }
        Ok(())
    }

    /// Reverse sweep from a `1×1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients, AdError> {
        let rs = self.shape(root);
        if rs != (1, 1) {
            return Err(AdError::NonScalarRoot(rs.0, rs.1));
        }
        self.check_finite(root)?;
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let send = |grads: &mut Vec<Option<Array2<f64>>>, p: usize, d: Array2<f64>| {
                match &mut grads[p] {
                    Some(acc) => *acc += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf | Op::Detach(_) => {}
                Op::Add(a, b) => {
                    let sa = shape(&self.nodes[*a].value);
                    let sb = shape(&self.nodes[*b].value);
                    send(&mut grads, *a, reduce_to(g.clone(), sa));
                    send(&mut grads, *b, reduce_to(g.clone(), sb));
                }
                Op::Sub(a, b) => {
                    let sa = shape(&self.nodes[*a].value);
                    let sb = shape(&self.nodes[*b].value);
                    send(&mut grads, *a, reduce_to(g.clone(), sa));
                    send(&mut grads, *b, reduce_to(-&g, sb));
                }
                Op::Mul(a, b) => {
                    let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    send(&mut grads, *a, reduce_to(&g * y, shape(x)));
                    send(&mut grads, *b, reduce_to(&g * x, shape(y)));
                }
                Op::Div(a, b) => {
                    let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let ga = &g / y;
                    let gb = -(&ga * &node.value);
                    send(&mut grads, *a, reduce_to(ga, shape(x)));
                    send(&mut grads, *b, reduce_to(gb, shape(y)));
                }
                Op::Neg(a) => send(&mut grads, *a, -&g),
                Op::Scale(a, k) => send(&mut grads, *a, &g * *k),
                Op::Offset(a, _) => send(&mut grads, *a, g.clone()),
                Op::Unary(u, a) => {
                    let x = &self.nodes[*a].value;
                    let mut d = g.clone();
                    ndarray::Zip::from(&mut d)
                        .and(x)
                        .and(&node.value)
                        .for_each(|d, &x, &y| *d *= u.deriv(x, y));
                    send(&mut grads, *a, d);
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    send(&mut grads, *a, g.dot(&y.t()));
                    send(&mut grads, *b, x.t().dot(&g));
                }
                Op::SumCols(a) => {
                    let sa = shape(&self.nodes[*a].value);
                    let d = g.broadcast(sa).unwrap().to_owned();
                    send(&mut grads, *a, d);
                }
                Op::SumAll(a) => {
                    let sa = shape(&self.nodes[*a].value);
                    send(&mut grads, *a, Array2::from_elem(sa, g[[0, 0]]));
                }
                Op::SliceCols { src, start, len } => {
                    let sa = shape(&self.nodes[*src].value);
                    let mut d = Array2::zeros(sa);
                    d.slice_mut(s![.., *start..*start + *len]).assign(&g);
                    send(&mut grads, *src, d);
                }
                Op::Concat(parts) => {
                    let mut c = 0;
                    for p in parts {
                        let w = self.nodes[*p].value.ncols();
                        send(&mut grads, *p, g.slice(s![.., c..c + w]).to_owned());
                        c += w;
                    }
                }
                Op::View { src, offset } => {
                    let sa = shape(&self.nodes[*src].value);
                    let mut d = Array2::<f64>::zeros(sa);
                    let flat = d.as_slice_mut().unwrap();
                    for (k, v) in g.iter().enumerate() {
                        flat[offset + k] = *v;
                    }
                    send(&mut grads, *src, d);
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Recomputes every node from its recorded op and the current leaf values.
    pub fn replay(&mut self) {
        for i in 0..self.nodes.len() {
            let op = self.nodes[i].op.clone();
            let val = |k: usize| &self.nodes[k].value;
            let v = match &op {
                Op::Leaf => continue,
                Op::Add(a, b) => val(*a) + val(*b),
                Op::Sub(a, b) => val(*a) - val(*b),
                Op::Mul(a, b) => val(*a) * val(*b),
                Op::Div(a, b) => val(*a) / val(*b),
                Op::Neg(a) => -val(*a),
                Op::Scale(a, k) => val(*a) * *k,
                Op::Offset(a, k) => val(*a) + *k,
                Op::Unary(u, a) => val(*a).mapv(|x| u.eval(x)),
                Op::MatMul(a, b) => val(*a).dot(val(*b)),
                Op::SumCols(a) => val(*a).sum_axis(Axis(1)).insert_axis(Axis(1)),
                Op::SumAll(a) => Array2::from_elem((1, 1), val(*a).sum()),
                Op::SliceCols { src, start, len } => {
                    val(*src).slice(s![.., *start..*start + *len]).to_owned()
                }
                Op::Concat(parts) => {
                    let views: Vec<_> = parts.iter().map(|p| val(*p).view()).collect();
                    ndarray::concatenate(Axis(1), &views).unwrap()
                }
                Op::View { src, offset } => {
                    let (r, c) = shape(&self.nodes[i].value);
                    let flat: Vec<f64> =
                        val(*src).iter().skip(*offset).take(r * c).copied().collect();
                    Array2::from_shape_vec((r, c), flat).unwrap()
                }
                Op::Detach(a) => val(*a).clone(),
            };
            self.nodes[i].value = v;
        }
    }

    /// Overwrites a leaf value (shape must match); use with [`Tape::replay`].
    pub fn set_leaf(&mut self, v: Var, value: Array2<f64>) {
        assert!(matches!(self.nodes[v.0].op, Op::Leaf), "set_leaf on non-leaf");
        assert_eq!(shape(&self.nodes[v.0].value), shape(&value));
        self.nodes[v.0].value = value;
    }

    /// Parent indices of a node; parents always precede the node.
    pub fn parents(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].op.parents()
    }
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, zeros if the root does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Array2<f64> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(tape.shape(v)))
    }
}

/// Forward-mode pair recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DualVar {
    pub primal: Var,
    pub tangent: Var,
}

impl DualVar {
    pub fn unary(tape: &mut Tape, u: Unary, x: DualVar) -> DualVar {
        let y = tape.unary(u, x.primal);
        let d = tape.unary_deriv(u, x.primal, y);
        let t = tape.mul(d, x.tangent);
        DualVar {
            primal: y,
            tangent: t,
        }
    }

    pub fn add(tape: &mut Tape, a: DualVar, b: DualVar) -> DualVar {
        DualVar {
            primal: tape.add(a.primal, b.primal),
            tangent: tape.add(a.tangent, b.tangent),
        }
    }

    pub fn mul(tape: &mut Tape, a: DualVar, b: DualVar) -> DualVar {
        let p = tape.mul(a.primal, b.primal);
        let t1 = tape.mul(a.tangent, b.primal);
        let t2 = tape.mul(a.primal, b.tangent);
        DualVar {
            primal: p,
            tangent: tape.add(t1, t2),
        }
    }
}

/// Scalar forward-mode number `primal + ε·tangent` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualNumber {
    pub primal: f64,
    pub tangent: f64,
}

impl DualNumber {
    pub fn new(primal: f64, tangent: f64) -> Self {
        Self { primal, tangent }
    }

    pub fn constant(primal: f64) -> Self {
        Self::new(primal, 0.0)
    }

    pub fn variable(primal: f64) -> Self {
        Self::new(primal, 1.0)
    }

    pub fn sin(self) -> Self {
        Self::new(self.primal.sin(), self.tangent * self.primal.cos())
    }

    pub fn cos(self) -> Self {
        Self::new(self.primal.cos(), -self.tangent * self.primal.sin())
    }

    pub fn tanh(self) -> Self {
        let y = self.primal.tanh();
        Self::new(y, self.tangent * (1.0 - y * y))
    }

    pub fn exp(self) -> Self {
        let y = self.primal.exp();
        Self::new(y, self.tangent * y)
    }

    pub fn ln(self) -> Self {
        Self::new(self.primal.ln(), self.tangent / self.primal)
    }

    pub fn sqrt(self) -> Self {
        let y = self.primal.sqrt();
        Self::new(y, 0.5 * self.tangent / y)
    }

    pub fn softplus(self) -> Self {
        Self::new(softplus(self.primal), self.tangent * sigmoid(self.primal))
    }
}

impl Add for DualNumber {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.primal + o.primal, self.tangent + o.tangent)
    }
}

impl Sub for DualNumber {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.primal - o.primal, self.tangent - o.tangent)
    }
}

impl Mul for DualNumber {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self::new(
            self.primal * o.primal,
            self.primal * o.tangent + self.tangent * o.primal,
        )
    }
}

impl Div for DualNumber {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        Self::new(
            self.primal / o.primal,
            (self.tangent * o.primal - self.primal * o.tangent) / (o.primal * o.primal),
        )
    }
}

impl Neg for DualNumber {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.primal, -self.tangent)
    }
}

/// Gradient of a scalar function of `x.len()` scalar inputs.
pub fn grad<F>(f: F, x: &[f64]) -> Result<Vec<f64>, AdError>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var, AdError>,
{
    let mut tape = Tape::new();
    let inputs: Vec<Var> = x.iter().map(|&v| tape.scalar(v)).collect();
    let out = f(&mut tape, &inputs)?;
    let g = tape.backward(out)?;
    Ok(inputs.iter().map(|&v| g.wrt(&tape, v)[[0, 0]]).collect())
}

/// Loss value and gradient with respect to a flat parameter row.
///
/// The closure receives the parameters as one `1×P` node and returns per-datum
/// losses as a column (`B×1`); the reported loss is their mean. A non-finite
/// datum is reported by index.
pub fn value_and_grad_params<F>(theta: &[f64], loss: F) -> Result<(f64, Vec<f64>), AdError>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var, AdError>,
{
    let mut tape = Tape::new();
    let p = tape.row(theta);
    let per_datum = loss(&mut tape, p)?;
    if let Some(datum) = tape.value(per_datum).iter().position(|v| !v.is_finite()) {
        return Err(AdError::NonFiniteLoss { datum });
    }
    let total = tape.mean(per_datum);
    let g = tape.backward(total)?;
    let grad = g.wrt(&tape, p).iter().copied().collect();
    Ok((tape.item(total), grad))
}

/// Exact `m×n` Jacobian of a network's output with respect to its input,
/// assembled from `n` forward-mode passes.
pub fn jacobian_wrt_input(net: &Mlp, x: &[f64]) -> Result<Array2<f64>, AdError> {
    let n = net.spec.input_dim;
    if x.len() != n {
        return Err(AdError::DimensionMismatch {
            expected: n,
            got: x.len(),
        });
    }
    let mut tape = Tape::new();
    let theta = tape.row(&net.params.flat);
    let bound = net.bind(&mut tape, theta, 0);
    let input = tape.row(x);
    let seeds: Vec<Var> = (0..n)
        .map(|j| {
            let mut e = Array2::zeros((1, n));
            e[[0, j]] = 1.0;
            tape.leaf(e)
        })
        .collect();
    let (_, tangents) = bound.forward_tangents(&mut tape, input, &seeds);
    let m = net.spec.output_dim;
    let mut jac = Array2::zeros((m, n));
    for (j, t) in tangents.iter().enumerate() {
        for i in 0..m {
            jac[[i, j]] = tape.value(*t)[[0, i]];
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn square_gradient() {
        let g = grad(|t, x| Ok(t.square(x[0])), &[3.0]).unwrap();
        assert_eq!(g, vec![6.0]);
    }

    #[test]
    fn softplus_gradient_at_zero() {
        let g = grad(|t, x| Ok(t.softplus(x[0])), &[0.0]).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn product_sine_gradient() {
        let g = grad(
            |t, x| {
                let s = t.sin(x[1]);
                Ok(t.mul(x[0], s))
            },
            &[2.0, 0.0],
        )
        .unwrap();
        assert_eq!(g, vec![0.0, 2.0]);
    }

    #[test]
    fn unknown_primitive_is_rejected() {
        let err = grad(|t, x| t.unary_named("erf", x[0]), &[1.0]).unwrap_err();
        assert_eq!(err, AdError::UnsupportedPrimitive("erf".into()));
    }

    #[test]
    fn nan_is_reported_with_node() {
        let err = grad(
            |t, x| {
                let n = t.neg(x[0]);
                Ok(t.log(n))
            },
            &[1.0],
        )
        .unwrap_err();
        assert_eq!(err, AdError::NonFinite { node: 2, op: "log" });
    }

    #[test]
    fn every_primitive_matches_central_differences() {
        let cases: [(Unary, f64); 11] = [
            (Unary::Tanh, 0.3),
            (Unary::Sigmoid, -0.7),
            (Unary::Softplus, 1.2),
            (Unary::Exp, 0.4),
            (Unary::Log, 1.7),
            (Unary::Sin, 0.9),
            (Unary::Cos, -0.2),
            (Unary::Sqrt, 2.3),
            (Unary::Square, -1.1),
            (Unary::Relu, 0.6),
            (Unary::Heaviside, 0.6),
        ];
        for (u, x) in cases {
            let g = grad(|t, v| Ok(t.unary(u, v[0])), &[x]).unwrap()[0];
            let fd = central_diff(|x| u.eval(x), x, 1e-6);
            let tol = 1e-6 * fd.abs().max(1e-3);
            assert!((g - fd).abs() <= tol, "{u:?}: {g} vs {fd}");
        }
        // Binary primitives and contraction.
        let f = |x: f64, y: f64| (x / y) * (x - y) + x * y;
        let (x0, y0) = (1.3, 0.7);
        let g = grad(
            |t, v| {
                let q = t.div(v[0], v[1]);
                let d = t.sub(v[0], v[1]);
                let a = t.mul(q, d);
                let m = t.matmul(v[0], v[1]);
                Ok(t.add(a, m))
            },
            &[x0, y0],
        )
        .unwrap();
        let fx = central_diff(|x| f(x, y0), x0, 1e-6);
        let fy = central_diff(|y| f(x0, y), y0, 1e-6);
        assert!((g[0] - fx).abs() < 1e-6 * fx.abs());
        assert!((g[1] - fy).abs() < 1e-6 * fy.abs());
    }

    #[test]
    fn reverse_over_forward_second_derivative() {
        for &x in &[0.0, 0.4, 1.3, -2.2] {
            let g = grad(
                |t, v| {
                    let one = t.scalar(1.0);
                    let d = DualVar::unary(
                        t,
                        Unary::Sin,
                        DualVar {
                            primal: v[0],
                            tangent: one,
                        },
                    );
                    Ok(d.tangent)
                },
                &[x],
            )
            .unwrap();
            assert!((g[0] + x.sin()).abs() < 1e-8);
        }
    }

    #[test]
    fn dual_number_product_rule() {
        let a = DualNumber::new(2.0, 3.0);
        let b = DualNumber::new(-1.5, 0.5);
        let p = a * b;
        assert_eq!(p.primal, -3.0);
        assert_eq!(p.tangent, 2.0 * 0.5 + 3.0 * -1.5);
    }

    #[test]
    fn parents_precede_children_and_replay_is_exact() {
        let mut t = Tape::new();
        let x = t.row(&[0.3, -1.2]);
        let w = t.leaf(Array2::from_shape_vec((2, 2), vec![1.0, 2.0, -0.5, 0.25]).unwrap());
        let h = t.matmul(x, w);
        let a = t.tanh(h);
        let s = t.softplus(a);
        let c = t.concat_cols(&[a, s]);
        let out = t.sum(c);
        for i in 0..t.len() {
            assert!(t.parents(Var(i)).iter().all(|&p| p < i));
        }
        let before = t.item(out);
        t.replay();
        assert_eq!(before.to_bits(), t.item(out).to_bits());
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let (v, g) = value_and_grad_params(&[1.0, -2.0, 0.5], |t, _p| Ok(t.scalar(4.0))).unwrap();
        assert_eq!(v, 4.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let theta = [0.5, -1.5, 2.0];
        let (v, g) = value_and_grad_params(&theta, |t, p| {
            let sq = t.square(p);
            let s = t.sum(sq);
            Ok(t.scale(s, 0.5))
        })
        .unwrap();
        assert!((v - 3.25).abs() < 1e-15);
        assert_eq!(g, theta.to_vec());
    }

    #[test]
    fn non_finite_loss_names_datum() {
        let err = value_and_grad_params(&[1.0], |t, _p| {
            Ok(t.leaf(Array2::from_shape_vec((3, 1), vec![0.0, 1.0, f64::NAN]).unwrap()))
        })
        .unwrap_err();
        assert_eq!(err, AdError::NonFiniteLoss { datum: 2 });
    }

    #[test]
    fn broadcasting_gradients_reduce() {
        // Row-bias broadcast over a 3x2 batch.
        let mut t = Tape::new();
        let x = t.leaf(Array2::from_shape_vec((3, 2), vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = t.row(&[0.1, 0.2]);
        let c = t.leaf(Array2::from_shape_vec((3, 1), vec![1., 2., 3.]).unwrap());
        let y = t.add(x, b);
        let z = t.mul(y, c);
        let out = t.sum(z);
        let g = t.backward(out).unwrap();
        assert_eq!(g.wrt(&t, b).as_slice().unwrap(), &[6.0, 6.0]);
        let gc = g.wrt(&t, c);
        assert!((gc[[0, 0]] - 3.3).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn gradient_is_linear(x in -2.0f64..2.0, y in -2.0f64..2.0) {
                let f = |t: &mut Tape, v: &[Var]| { let s = t.sin(v[0]); t.mul(s, v[1]) };
                let h = |t: &mut Tape, v: &[Var]| { let e = t.tanh(v[1]); let sq = t.square(v[0]); t.add(sq, e) };
                let gf = grad(|t, v| Ok(f(t, v)), &[x, y]).unwrap();
                let gh = grad(|t, v| Ok(h(t, v)), &[x, y]).unwrap();
                let gs = grad(|t, v| { let a = f(t, v); let b = h(t, v); Ok(t.add(a, b)) }, &[x, y]).unwrap();
                for i in 0..2 {
                    prop_assert!((gs[i] - gf[i] - gh[i]).abs() < 1e-12);
                }
            }
        }
    }
}
