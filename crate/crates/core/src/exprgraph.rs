//! Expression graphs with exact first and second derivatives.
//!
//! Problem functions are written as trees of [`Expr`] nodes (shared
//! subexpressions are reference counted, so the structure is a DAG). A
//! [`VecFunc`] compiles each output into a flat tape once; values and
//! gradients come from a reverse sweep, and Hessian columns from the same
//! reverse sweep run over forward-mode dual numbers (forward-over-reverse).
//!
//! JSON form of a node, used by problem files:
//!
//! ```text
//! {"op":"const","val":1.5}
//! {"op":"var","idx":0}            w_0 (zero based)
//! {"op":"param","idx":0}          x_0
//! {"op":"sum","args":[...]}
//! {"op":"prod","args":[...]}
//! {"op":"pow","base":{...},"exp":2}
//! {"op":"neg","args":[e]}
//! {"op":"sin","args":[e]}   {"op":"cos","args":[e]}
//! {"op":"affine","val":[c, a_1, ..., a_k],"args":[e_1, ..., e_k]}   c + sum a_i e_i
//! ```

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExprError {
    #[error("at {path}: unknown node kind `{kind}`")]
    UnknownKind { path: String, kind: String },
    #[error("at {path}: {what} index {idx} out of range (dimension {dim})")]
    IndexOutOfRange {
        path: String,
        what: &'static str,
        idx: usize,
        dim: usize,
    },
    #[error("at {path}: {msg}")]
    Malformed { path: String, msg: String },
    #[error("dimension mismatch: expected {expected} {what}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

thread_local! {
    static EVALUATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of `VecFunc` evaluations (values, Jacobians or Hessians) performed
/// on the calling thread so far.
pub fn evaluation_count() -> u64 {
    EVALUATIONS.with(|c| c.get())
}

pub(crate) fn bump_evaluation_count() {
    EVALUATIONS.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Const(f64),
    Var(usize),
    Param(usize),
    Sum(Vec<Expr>),
    Prod(Vec<Expr>),
    Pow(Expr, f64),
    Neg(Expr),
    Sin(Expr),
    Cos(Expr),
    Affine {
        constant: f64,
        coeffs: Vec<f64>,
        args: Vec<Expr>,
    },
}

/// Immutable expression node. Cloning is cheap.
#[derive(Clone, PartialEq)]
pub struct Expr(Arc<Node>);

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_json())
    }
}

fn valid_exponent(e: f64) -> bool {
    e.is_finite() && (e >= 0.0 || e.fract() == 0.0)
}

impl Expr {
    fn new(node: Node) -> Self {
        Expr(Arc::new(node))
    }

    pub fn constant(c: f64) -> Self {
        Self::new(Node::Const(c))
    }

    pub fn var(idx: usize) -> Self {
        Self::new(Node::Var(idx))
    }

    pub fn param(idx: usize) -> Self {
        Self::new(Node::Param(idx))
    }

    pub fn sum(args: Vec<Expr>) -> Self {
        match args.len() {
            0 => Self::constant(0.0),
            1 => args.into_iter().next().unwrap(),
            _ => Self::new(Node::Sum(args)),
        }
    }

    pub fn prod(args: Vec<Expr>) -> Self {
        match args.len() {
            0 => Self::constant(1.0),
            1 => args.into_iter().next().unwrap(),
            _ => Self::new(Node::Prod(args)),
        }
    }

    /// `base^exp`. Negative fractional exponents are rejected.
    pub fn pow(base: Expr, exp: f64) -> Self {
        assert!(valid_exponent(exp), "invalid exponent {exp}");
        Self::new(Node::Pow(base, exp))
    }

    pub fn powi(&self, exp: i32) -> Self {
        Self::pow(self.clone(), exp as f64)
    }

    pub fn sin(&self) -> Self {
        Self::new(Node::Sin(self.clone()))
    }

    pub fn cos(&self) -> Self {
        Self::new(Node::Cos(self.clone()))
    }

    /// `constant + sum coeffs[i] * args[i]`.
    pub fn affine(constant: f64, coeffs: Vec<f64>, args: Vec<Expr>) -> Self {
        assert_eq!(coeffs.len(), args.len());
        Self::new(Node::Affine {
            constant,
            coeffs,
            args,
        })
    }

    /// Convenience for `sum_i coeffs[i] * w[vars[i]] + constant`.
    pub fn linear(constant: f64, terms: &[(f64, usize)]) -> Self {
        Self::affine(
            constant,
            terms.iter().map(|t| t.0).collect(),
            terms.iter().map(|t| Expr::var(t.1)).collect(),
        )
    }

    /// Replace every `Var(i)` by `var(i)` and every `Param(j)` by `param(j)`.
    pub fn substitute(&self, var: &dyn Fn(usize) -> Expr, param: &dyn Fn(usize) -> Expr) -> Expr {
        let sub = |e: &Expr| e.substitute(var, param);
        match &*self.0 {
            Node::Const(_) => self.clone(),
            Node::Var(i) => var(*i),
            Node::Param(j) => param(*j),
            Node::Sum(a) => Self::new(Node::Sum(a.iter().map(sub).collect())),
            Node::Prod(a) => Self::new(Node::Prod(a.iter().map(sub).collect())),
            Node::Pow(b, e) => Self::new(Node::Pow(sub(b), *e)),
            Node::Neg(b) => Self::new(Node::Neg(sub(b))),
            Node::Sin(b) => Self::new(Node::Sin(sub(b))),
            Node::Cos(b) => Self::new(Node::Cos(sub(b))),
            Node::Affine {
                constant,
                coeffs,
                args,
            } => Self::new(Node::Affine {
                constant: *constant,
                coeffs: coeffs.clone(),
                args: args.iter().map(sub).collect(),
            }),
        }
    }

    /// Parse the JSON AST. Variable and parameter indices are checked against
    /// the declared dimensions.
    pub fn from_json(v: &Value, n_vars: usize, n_params: usize) -> Result<Expr, ExprError> {
        parse_node(v, "$", n_vars, n_params)
    }

    pub fn to_json(&self) -> Value {
        match &*self.0 {
            Node::Const(c) => json!({"op": "const", "val": c}),
            Node::Var(i) => json!({"op": "var", "idx": i}),
            Node::Param(i) => json!({"op": "param", "idx": i}),
            Node::Sum(a) => {
                json!({"op": "sum", "args": a.iter().map(Expr::to_json).collect::<Vec<_>>()})
            }
            Node::Prod(a) => {
                json!({"op": "prod", "args": a.iter().map(Expr::to_json).collect::<Vec<_>>()})
            }
            Node::Pow(b, e) => json!({"op": "pow", "base": b.to_json(), "exp": e}),
            Node::Neg(a) => json!({"op": "neg", "args": [a.to_json()]}),
            Node::Sin(a) => json!({"op": "sin", "args": [a.to_json()]}),
            Node::Cos(a) => json!({"op": "cos", "args": [a.to_json()]}),
            Node::Affine {
                constant,
                coeffs,
                args,
            } => {
                let mut val = vec![*constant];
                val.extend_from_slice(coeffs);
                json!({"op": "affine", "val": val, "args": args.iter().map(Expr::to_json).collect::<Vec<_>>()})
            }
        }
    }

    /// Largest variable index used plus one (0 if none).
    pub fn var_dim(&self) -> usize {
        self.max_index(false)
    }

    pub fn param_dim(&self) -> usize {
        self.max_index(true)
    }

    fn max_index(&self, params: bool) -> usize {
        match &*self.0 {
            Node::Const(_) => 0,
            Node::Var(i) => {
                if params {
                    0
                } else {
                    i + 1
                }
            }
            Node::Param(i) => {
                if params {
                    i + 1
                } else {
                    0
                }
            }
            Node::Sum(a) | Node::Prod(a) | Node::Affine { args: a, .. } => {
                a.iter().map(|e| e.max_index(params)).max().unwrap_or(0)
            }
            Node::Pow(b, _) | Node::Neg(b) | Node::Sin(b) | Node::Cos(b) => b.max_index(params),
        }
    }

    /// Polynomial degree in the variables, `None` for non-polynomial nodes.
    fn degree(&self) -> Option<u32> {
        match &*self.0 {
            Node::Const(_) | Node::Param(_) => Some(0),
            Node::Var(_) => Some(1),
            Node::Sum(a) | Node::Affine { args: a, .. } => a
                .iter()
                .try_fold(0, |acc, e| e.degree().map(|d| acc.max(d))),
            Node::Prod(a) => a.iter().try_fold(0, |acc, e| e.degree().map(|d| acc + d)),
            Node::Pow(b, e) => match b.degree()? {
                0 => Some(0),
                d if e.fract() == 0.0 && *e >= 0.0 => Some(d * (*e as u32)),
                _ => None,
            },
            Node::Neg(a) => a.degree(),
            Node::Sin(a) | Node::Cos(a) => match a.degree()? {
                0 => Some(0),
                _ => None,
            },
        }
    }

    /// True when the expression is affine in the variables.
    pub fn is_affine(&self) -> bool {
        matches!(self.degree(), Some(d) if d <= 1)
    }

    /// Direct recursive evaluation (used as a reference by tests).
    pub fn eval(&self, w: &[f64], x: &[f64]) -> f64 {
        match &*self.0 {
            Node::Const(c) => *c,
            Node::Var(i) => w[*i],
            Node::Param(i) => x[*i],
            Node::Sum(a) => a.iter().map(|e| e.eval(w, x)).sum(),
            Node::Prod(a) => a.iter().map(|e| e.eval(w, x)).product(),
            Node::Pow(b, e) => pow_f64(b.eval(w, x), *e),
            Node::Neg(a) => -a.eval(w, x),
            Node::Sin(a) => a.eval(w, x).sin(),
            Node::Cos(a) => a.eval(w, x).cos(),
            Node::Affine {
                constant,
                coeffs,
                args,
            } => {
                constant
                    + coeffs
                        .iter()
                        .zip(args)
                        .map(|(c, e)| c * e.eval(w, x))
                        .sum::<f64>()
            }
        }
    }
}

fn pow_f64(b: f64, e: f64) -> f64 {
    if e.fract() == 0.0 && e.abs() < i32::MAX as f64 {
        b.powi(e as i32)
    } else {
        b.powf(e)
    }
}

fn parse_node(v: &Value, path: &str, nv: usize, np: usize) -> Result<Expr, ExprError> {
    let malformed = |msg: &str| ExprError::Malformed {
        path: path.to_string(),
        msg: msg.to_string(),
    };
    let obj = v
        .as_object()
        .ok_or_else(|| malformed("expected an object"))?;
    let op = obj
        .get("op")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed("missing string field `op`"))?;
    let index = |what: &'static str, dim: usize| -> Result<usize, ExprError> {
        let idx = obj
            .get("idx")
            .and_then(Value::as_u64)
            .ok_or_else(|| malformed("missing integer field `idx`"))? as usize;
        if idx >= dim {
            return Err(ExprError::IndexOutOfRange {
                path: path.to_string(),
                what,
                idx,
                dim,
            });
        }
        Ok(idx)
    };
    let args = || -> Result<Vec<Expr>, ExprError> {
        let arr = obj
            .get("args")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("missing array field `args`"))?;
        arr.iter()
            .enumerate()
            .map(|(i, a)| parse_node(a, &format!("{path}.args[{i}]"), nv, np))
            .collect()
    };
    let unary = || -> Result<Expr, ExprError> {
        let mut a = args()?;
        if a.len() != 1 {
            return Err(malformed("expected exactly one argument"));
        }
        Ok(a.pop().unwrap())
    };
    match op {
        "const" => {
            let c = obj
                .get("val")
                .and_then(Value::as_f64)
                .ok_or_else(|| malformed("missing numeric field `val`"))?;
            Ok(Expr::constant(c))
        }
        "var" => Ok(Expr::var(index("variable", nv)?)),
        "param" => Ok(Expr::param(index("parameter", np)?)),
        "sum" => Ok(Expr::new(Node::Sum(args()?))),
        "prod" => Ok(Expr::new(Node::Prod(args()?))),
        "pow" => {
            let base = obj
                .get("base")
                .ok_or_else(|| malformed("missing field `base`"))?;
            let base = parse_node(base, &format!("{path}.base"), nv, np)?;
            let exp = obj
                .get("exp")
                .and_then(Value::as_f64)
                .ok_or_else(|| malformed("missing numeric field `exp`"))?;
            if !valid_exponent(exp) {
                return Err(malformed("negative fractional exponents are not allowed"));
            }
            Ok(Expr::new(Node::Pow(base, exp)))
        }
        "neg" => Ok(Expr::new(Node::Neg(unary()?))),
        "sin" => Ok(Expr::new(Node::Sin(unary()?))),
        "cos" => Ok(Expr::new(Node::Cos(unary()?))),
        "affine" => {
            let vals = obj
                .get("val")
                .and_then(Value::as_array)
                .ok_or_else(|| malformed("affine node needs array field `val`"))?;
            let vals: Option<Vec<f64>> = vals.iter().map(Value::as_f64).collect();
            let vals = vals.ok_or_else(|| malformed("non-numeric coefficient"))?;
            let a = args()?;
            if vals.len() != a.len() + 1 {
                return Err(malformed(
                    "affine `val` must hold the constant plus one coefficient per argument",
                ));
            }
            Ok(Expr::new(Node::Affine {
                constant: vals[0],
                coeffs: vals[1..].to_vec(),
                args: a,
            }))
        }
        other => Err(ExprError::UnknownKind {
            path: path.to_string(),
            kind: other.to_string(),
        }),
    }
}

/// Parse a JSON AST into an expression with the given dimensions.
pub fn parse_expr(v: &Value, n_vars: usize, n_params: usize) -> Result<Expr, ExprError> {
    Expr::from_json(v, n_vars, n_params)
}

impl Add for Expr {
    type Output = Expr;
    fn add(self, rhs: Expr) -> Expr {
        Expr::new(Node::Sum(vec![self, rhs]))
    }
}

impl Add<f64> for Expr {
    type Output = Expr;
    fn add(self, rhs: f64) -> Expr {
        Expr::affine(rhs, vec![1.0], vec![self])
    }
}

impl Sub for Expr {
    type Output = Expr;
    fn sub(self, rhs: Expr) -> Expr {
        Expr::affine(0.0, vec![1.0, -1.0], vec![self, rhs])
    }
}

impl Sub<f64> for Expr {
    type Output = Expr;
    fn sub(self, rhs: f64) -> Expr {
        Expr::affine(-rhs, vec![1.0], vec![self])
    }
}

impl Mul for Expr {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::new(Node::Prod(vec![self, rhs]))
    }
}

impl Mul<Expr> for f64 {
    type Output = Expr;
    fn mul(self, rhs: Expr) -> Expr {
        Expr::affine(0.0, vec![self], vec![rhs])
    }
}

impl Neg for Expr {
    type Output = Expr;
    fn neg(self) -> Expr {
        Expr::new(Node::Neg(self))
    }
}

/// Scalar type the tape can be swept with.
trait Scalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Neg<Output = Self>
{
    fn lift(v: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn pow(self, e: f64) -> Self;
}

impl Scalar for f64 {
    fn lift(v: f64) -> Self {
        v
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn pow(self, e: f64) -> Self {
        pow_f64(self, e)
    }
}

/// First-order forward-mode dual number.
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: f64,
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual {
            v: self.v + o.v,
            d: self.d + o.d,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual {
            v: self.v - o.v,
            d: self.d - o.d,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual {
            v: self.v * o.v,
            d: self.d * o.v + self.v * o.d,
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        Dual {
            v: -self.v,
            d: -self.d,
        }
    }
}

impl Scalar for Dual {
    fn lift(v: f64) -> Self {
        Dual { v, d: 0.0 }
    }
    fn sin(self) -> Self {
        Dual {
            v: self.v.sin(),
            d: self.d * self.v.cos(),
        }
    }
    fn cos(self) -> Self {
        Dual {
            v: self.v.cos(),
            d: -self.d * self.v.sin(),
        }
    }
    fn pow(self, e: f64) -> Self {
        if e == 0.0 {
            return Dual::lift(1.0);
        }
        Dual {
            v: pow_f64(self.v, e),
            d: self.d * e * pow_f64(self.v, e - 1.0),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Const(f64),
    Var(usize),
    Param(usize),
    Sum(Vec<usize>),
    Prod(Vec<usize>),
    Pow(usize, f64),
    Neg(usize),
    Sin(usize),
    Cos(usize),
    Affine(f64, Vec<(f64, usize)>),
}

/// Flattened, topologically ordered form of one output expression.
#[derive(Debug, Clone)]
struct Tape {
    ops: Vec<Op>,
    /// Variables the output depends on, sorted.
    support: Vec<usize>,
    affine: bool,
}

impl Tape {
    fn compile(e: &Expr) -> Tape {
        let mut ops = Vec::new();
        let mut seen: HashMap<*const Node, usize> = HashMap::new();
        fn visit(e: &Expr, ops: &mut Vec<Op>, seen: &mut HashMap<*const Node, usize>) -> usize {
            let key = Arc::as_ptr(&e.0);
            if let Some(&slot) = seen.get(&key) {
                return slot;
            }
            let op = match &*e.0 {
                Node::Const(c) => Op::Const(*c),
                Node::Var(i) => Op::Var(*i),
                Node::Param(i) => Op::Param(*i),
                Node::Sum(a) => Op::Sum(a.iter().map(|c| visit(c, ops, seen)).collect()),
                Node::Prod(a) => Op::Prod(a.iter().map(|c| visit(c, ops, seen)).collect()),
                Node::Pow(b, ex) => Op::Pow(visit(b, ops, seen), *ex),
                Node::Neg(a) => Op::Neg(visit(a, ops, seen)),
                Node::Sin(a) => Op::Sin(visit(a, ops, seen)),
                Node::Cos(a) => Op::Cos(visit(a, ops, seen)),
                Node::Affine {
                    constant,
                    coeffs,
                    args,
                } => Op::Affine(
                    *constant,
                    coeffs
                        .iter()
                        .zip(args)
                        .map(|(c, a)| (*c, visit(a, ops, seen)))
                        .collect(),
                ),
            };
            ops.push(op);
            let slot = ops.len() - 1;
            seen.insert(key, slot);
            slot
        }
        visit(e, &mut ops, &mut seen);
        let mut support: Vec<usize> = ops
            .iter()
            .filter_map(|op| match op {
                Op::Var(i) => Some(*i),
                _ => None,
            })
            .collect();
        support.sort_unstable();
        support.dedup();
        Tape {
            ops,
            support,
            affine: e.is_affine(),
        }
    }

    fn forward<T: Scalar>(&self, w: &dyn Fn(usize) -> T, x: &[f64], vals: &mut Vec<T>) {
        vals.clear();
        for op in &self.ops {
            let v = match op {
                Op::Const(c) => T::lift(*c),
                Op::Var(i) => w(*i),
                Op::Param(i) => T::lift(x[*i]),
                Op::Sum(a) => a.iter().fold(T::lift(0.0), |acc, &s| acc + vals[s]),
                Op::Prod(a) => a.iter().fold(T::lift(1.0), |acc, &s| acc * vals[s]),
                Op::Pow(b, e) => vals[*b].pow(*e),
                Op::Neg(a) => -vals[*a],
                Op::Sin(a) => vals[*a].sin(),
                Op::Cos(a) => vals[*a].cos(),
                Op::Affine(c, terms) => terms
                    .iter()
                    .fold(T::lift(*c), |acc, (k, s)| acc + T::lift(*k) * vals[*s]),
            };
            vals.push(v);
        }
    }

    /// Reverse sweep; returns d(output)/d(slot) for every slot.
    fn reverse<T: Scalar>(&self, vals: &[T]) -> Vec<T> {
        let n = self.ops.len();
        let mut adj = vec![T::lift(0.0); n];
        adj[n - 1] = T::lift(1.0);
        for k in (0..n).rev() {
            let a = adj[k];
            match &self.ops[k] {
                Op::Const(_) | Op::Var(_) | Op::Param(_) => {}
                Op::Sum(args) => {
                    for &s in args {
                        adj[s] = adj[s] + a;
                    }
                }
                Op::Prod(args) => {
                    for (j, &s) in args.iter().enumerate() {
                        let mut others = T::lift(1.0);
                        for (l, &t) in args.iter().enumerate() {
                            if l != j {
                                others = others * vals[t];
                            }
                        }
                        adj[s] = adj[s] + a * others;
                    }
                }
                Op::Pow(b, e) => {
                    if *e != 0.0 {
                        let d = T::lift(*e) * vals[*b].pow(e - 1.0);
                        adj[*b] = adj[*b] + a * d;
                    }
                }
                Op::Neg(s) => adj[*s] = adj[*s] - a,
                Op::Sin(s) => adj[*s] = adj[*s] + a * vals[*s].cos(),
                Op::Cos(s) => adj[*s] = adj[*s] - a * vals[*s].sin(),
                Op::Affine(_, terms) => {
                    for (c, s) in terms {
                        adj[*s] = adj[*s] + a * T::lift(*c);
                    }
                }
            }
        }
        adj
    }

    fn value(&self, w: &[f64], x: &[f64]) -> f64 {
        let mut vals = Vec::with_capacity(self.ops.len());
        self.forward(&|i| w[i], x, &mut vals);
        vals[vals.len() - 1]
    }

    /// Gradient restricted to the support, in support order.
    fn gradient(&self, w: &[f64], x: &[f64]) -> (f64, Vec<f64>) {
        let mut vals = Vec::with_capacity(self.ops.len());
        self.forward(&|i| w[i], x, &mut vals);
        let adj = self.reverse(&vals);
        let mut g = vec![0.0; self.support.len()];
        for (k, op) in self.ops.iter().enumerate() {
            if let Op::Var(i) = op {
                let pos = self.support.binary_search(i).unwrap();
                g[pos] += adj[k];
            }
        }
        (vals[vals.len() - 1], g)
    }

    /// Hessian-vector product with the unit vector of variable `dir`,
    /// restricted to the support.
    fn hessian_column(&self, w: &[f64], x: &[f64], dir: usize) -> Vec<f64> {
        let mut vals = Vec::with_capacity(self.ops.len());
        self.forward(
            &|i| Dual {
                v: w[i],
                d: if i == dir { 1.0 } else { 0.0 },
            },
            x,
            &mut vals,
        );
        let adj = self.reverse(&vals);
        let mut col = vec![0.0; self.support.len()];
        for (k, op) in self.ops.iter().enumerate() {
            if let Op::Var(i) = op {
                let pos = self.support.binary_search(i).unwrap();
                col[pos] += adj[k].d;
            }
        }
        col
    }
}

/// Vector-valued function `R^n_vars x R^n_params -> R^outputs`.
#[derive(Clone)]
pub struct VecFunc {
    outputs: Vec<Expr>,
    tapes: Vec<Tape>,
    n_vars: usize,
    n_params: usize,
}

impl fmt::Debug for VecFunc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VecFunc")
            .field("n_outputs", &self.outputs.len())
            .field("n_vars", &self.n_vars)
            .field("n_params", &self.n_params)
            .finish()
    }
}

impl VecFunc {
    pub fn new(outputs: Vec<Expr>, n_vars: usize, n_params: usize) -> Result<Self, ExprError> {
        for e in &outputs {
            if e.var_dim() > n_vars {
                return Err(ExprError::IndexOutOfRange {
                    path: "$".into(),
                    what: "variable",
                    idx: e.var_dim() - 1,
                    dim: n_vars,
                });
            }
            if e.param_dim() > n_params {
                return Err(ExprError::IndexOutOfRange {
                    path: "$".into(),
                    what: "parameter",
                    idx: e.param_dim() - 1,
                    dim: n_params,
                });
            }
        }
        let tapes = outputs.iter().map(Tape::compile).collect();
        Ok(VecFunc {
            outputs,
            tapes,
            n_vars,
            n_params,
        })
    }

    pub fn empty(n_vars: usize, n_params: usize) -> Self {
        VecFunc {
            outputs: Vec::new(),
            tapes: Vec::new(),
            n_vars,
            n_params,
        }
    }

    pub fn from_json(v: &Value, n_vars: usize, n_params: usize) -> Result<Self, ExprError> {
        let arr = v.as_array().ok_or_else(|| ExprError::Malformed {
            path: "$".into(),
            msg: "expected an array of expressions".into(),
        })?;
        let outputs = arr
            .iter()
            .enumerate()
            .map(|(i, e)| parse_node(e, &format!("$[{i}]"), n_vars, n_params))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(outputs, n_vars, n_params)
    }

    pub fn to_json(&self) -> Value {
        Value::Array(self.outputs.iter().map(Expr::to_json).collect())
    }

    pub fn outputs(&self) -> &[Expr] {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// True when every output is affine in the variables.
    pub fn is_affine(&self) -> bool {
        self.tapes.iter().all(|t| t.affine)
    }

    fn check(&self, w: &DVector<f64>, x: &DVector<f64>) -> Result<(), ExprError> {
        if w.len() != self.n_vars {
            return Err(ExprError::DimensionMismatch {
                what: "variables",
                expected: self.n_vars,
                got: w.len(),
            });
        }
        if x.len() != self.n_params {
            return Err(ExprError::DimensionMismatch {
                what: "parameters",
                expected: self.n_params,
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn eval(&self, w: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>, ExprError> {
        self.check(w, x)?;
        bump_evaluation_count();
        Ok(DVector::from_iterator(
            self.tapes.len(),
            self.tapes
                .iter()
                .map(|t| t.value(w.as_slice(), x.as_slice())),
        ))
    }

    /// Dense Jacobian, shape `(outputs, n_vars)`.
    pub fn jacobian(&self, w: &DVector<f64>, x: &DVector<f64>) -> Result<DMatrix<f64>, ExprError> {
        self.check(w, x)?;
        bump_evaluation_count();
        let mut jac = DMatrix::zeros(self.tapes.len(), self.n_vars);
        for (r, t) in self.tapes.iter().enumerate() {
            let (_, g) = t.gradient(w.as_slice(), x.as_slice());
            for (pos, &c) in t.support.iter().enumerate() {
                jac[(r, c)] = g[pos];
            }
        }
        Ok(jac)
    }

    /// Hessian of `sum_i weights[i] * output_i`, exactly symmetric.
    pub fn weighted_hessian(
        &self,
        weights: &DVector<f64>,
        w: &DVector<f64>,
        x: &DVector<f64>,
    ) -> Result<DMatrix<f64>, ExprError> {
        self.check(w, x)?;
        if weights.len() != self.tapes.len() {
            return Err(ExprError::DimensionMismatch {
                what: "weights",
                expected: self.tapes.len(),
                got: weights.len(),
            });
        }
        bump_evaluation_count();
        let mut hess = DMatrix::zeros(self.n_vars, self.n_vars);
        self.accumulate_hessian(weights.as_slice(), w, x, &mut hess);
        Ok(symmetrize(hess))
    }

    pub(crate) fn accumulate_hessian(
        &self,
        weights: &[f64],
        w: &DVector<f64>,
        x: &DVector<f64>,
        hess: &mut DMatrix<f64>,
    ) {
        for (t, &wt) in self.tapes.iter().zip(weights) {
            if t.affine || wt == 0.0 {
                continue;
            }
            for &j in &t.support {
                let col = t.hessian_column(w.as_slice(), x.as_slice(), j);
                for (pos, &i) in t.support.iter().enumerate() {
                    hess[(i, j)] += wt * col[pos];
                }
            }
        }
    }
}

pub(crate) fn symmetrize(h: DMatrix<f64>) -> DMatrix<f64> {
    let ht = h.transpose();
    (h + ht) * 0.5
}
