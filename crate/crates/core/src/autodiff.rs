//! Tape-based reverse-mode automatic differentiation over `f64` scalars.
//!
//! Geometry and loss code is written once, generically over [`Scalar`], and
//! runs either on plain `f64` (loss evaluation) or on [`Var`] (gradient
//! evaluation). Both paths perform the same floating-point operations in the
//! same order, so the value reported by a gradient evaluation is bit-identical
//! to the plain evaluation.
//!
//! ```
//! use metricopt::autodiff::evaluate_with_gradient;
//!
//! let result = evaluate_with_gradient(&[3.0], |_, x| x[0] * x[0]).unwrap();
//! assert_eq!(result.value, 9.0);
//! assert_eq!(result.gradient, vec![6.0]);
//! ```

use std::cell::{Cell, RefCell};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

/// arccos argument used for the derivative when `|u|` reaches 1.
const ACOS_DERIVATIVE_LIMIT: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    NonFinite,
    Domain,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("non-finite value produced by `{op}` at tape node {node}")]
    NonFinite { op: &'static str, node: usize },
    #[error("domain error in `{op}` at tape node {node} (argument {argument})")]
    Domain {
        op: &'static str,
        node: usize,
        argument: f64,
    },
    #[error("program output does not belong to the evaluation tape")]
    ForeignOutput,
    #[error("non-finite sample for coordinate {coordinate}: f(x{sign}h) = {value}")]
    NonFiniteSample {
        coordinate: usize,
        sign: char,
        value: f64,
    },
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
}

#[derive(Debug, Clone, Copy)]
struct Fault {
    kind: FaultKind,
    op: &'static str,
    node: usize,
    argument: f64,
}

impl Fault {
    fn into_error(self) -> AdError {
        match self.kind {
            FaultKind::NonFinite => AdError::NonFinite {
                op: self.op,
                node: self.node,
            },
            FaultKind::Domain => AdError::Domain {
                op: self.op,
                node: self.node,
                argument: self.argument,
            },
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    arity: u8,
    parents: [usize; 2],
    partials: [f64; 2],
}

/// Recording tape. Single-writer; independent evaluations use independent tapes.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Cell<Option<Fault>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("len", &self.len())
            .field("fault", &self.fault.get())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(capacity)),
            fault: Cell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Creates an input variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        self.push(value, 0, [0; 2], [0.0; 2], "input")
    }

    /// Creates a constant; gradients never flow into it.
    pub fn constant(&self, value: f64) -> Var<'_> {
        self.push(value, 0, [0; 2], [0.0; 2], "constant")
    }

    fn push(
        &self,
        value: f64,
        arity: u8,
        parents: [usize; 2],
        partials: [f64; 2],
        op: &'static str,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node {
            arity,
            parents,
            partials,
        });
        drop(nodes);
        let partials_finite = partials[..arity as usize].iter().all(|p| p.is_finite());
        if !(value.is_finite() && partials_finite) {
            self.flag(Fault {
                kind: FaultKind::NonFinite,
                op,
                node: index,
                argument: value,
            });
        }
        Var {
            tape: self,
            index,
            value,
        }
    }

    fn flag(&self, fault: Fault) {
        if self.fault.get().is_none() {
            self.fault.set(Some(fault));
        }
    }

    fn flag_domain(&self, op: &'static str, argument: f64) {
        let node = self.len();
        self.flag(Fault {
            kind: FaultKind::Domain,
            op,
            node,
            argument,
        });
    }

    /// First recorded fault, if any.
    pub fn fault(&self) -> Option<AdError> {
        self.fault.get().map(Fault::into_error)
    }

    /// Reverse accumulation from `output`; returns the adjoint of every node.
    fn adjoints(&self, output: usize) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adjoint = vec![0.0; nodes.len()];
        adjoint[output] = 1.0;
        for i in (0..=output).rev() {
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            for k in 0..node.arity as usize {
                adjoint[node.parents[k]] += node.partials[k] * a;
            }
        }
        adjoint
    }
}

/// A scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    index: usize,
    value: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var(#{}: {})", self.index, self.value)
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn index(&self) -> usize {
        self.index
    }

    fn unary(self, value: f64, partial: f64, op: &'static str) -> Var<'t> {
        self.tape
            .push(value, 1, [self.index, 0], [partial, 0.0], op)
    }

    fn binary(self, other: Var<'t>, value: f64, da: f64, db: f64, op: &'static str) -> Var<'t> {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "mixed tapes");
        self.tape
            .push(value, 2, [self.index, other.index], [da, db], op)
    }
}

/// Arithmetic shared by `f64` and [`Var`].
pub trait Scalar:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    fn value(self) -> f64;
    /// A constant living alongside `self` (same tape for [`Var`]).
    fn constant(self, value: f64) -> Self;
    fn sqrt(self) -> Self;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    fn powf(self, exponent: f64) -> Self;
    fn acos(self) -> Self;
    fn abs(self) -> Self;
    fn min(self, other: Self) -> Self;
    fn max(self, other: Self) -> Self;
    fn clamp(self, lo: f64, hi: f64) -> Self;

    fn square(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    fn value(self) -> f64 {
        self
    }
    fn constant(self, value: f64) -> Self {
        value
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn powf(self, exponent: f64) -> Self {
        f64::powf(self, exponent)
    }
    fn acos(self) -> Self {
        f64::acos(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn min(self, other: Self) -> Self {
        if self <= other {
            self
        } else {
            other
        }
    }
    fn max(self, other: Self) -> Self {
        if self >= other {
            self
        } else {
            other
        }
    }
    fn clamp(self, lo: f64, hi: f64) -> Self {
        if self < lo {
            lo
        } else if self > hi {
            hi
        } else {
            self
        }
    }
}

impl<'t> Scalar for Var<'t> {
    fn value(self) -> f64 {
        self.value
    }

    fn constant(self, value: f64) -> Self {
        self.tape.constant(value)
    }

    fn sqrt(self) -> Self {
        let x = self.value;
        if x < 0.0 {
            self.tape.flag_domain("sqrt", x);
        }
        let v = x.sqrt();
        self.unary(v, 0.5 / v, "sqrt")
    }

    fn ln(self) -> Self {
        let x = self.value;
        if x < 0.0 {
            self.tape.flag_domain("ln", x);
        }
        self.unary(x.ln(), 1.0 / x, "ln")
    }

    fn exp(self) -> Self {
        let v = self.value.exp();
        self.unary(v, v, "exp")
    }

    fn powf(self, exponent: f64) -> Self {
        let x = self.value;
        let v = x.powf(exponent);
        let d = if exponent == 0.0 {
            0.0
        } else {
            exponent * x.powf(exponent - 1.0)
        };
        self.unary(v, d, "powf")
    }

    fn acos(self) -> Self {
        let x = self.value;
        if !(-1.0..=1.0).contains(&x) {
            self.tape.flag_domain("acos", x);
        }
        let u = x.clamp(-ACOS_DERIVATIVE_LIMIT, ACOS_DERIVATIVE_LIMIT);
        self.unary(x.acos(), -1.0 / (1.0 - u * u).sqrt(), "acos")
    }

    fn abs(self) -> Self {
        let x = self.value;
        let d = if x >= 0.0 { 1.0 } else { -1.0 };
        self.unary(x.abs(), d, "abs")
    }

    fn min(self, other: Self) -> Self {
        if self.value <= other.value {
            self.binary(other, self.value, 1.0, 0.0, "min")
        } else {
            self.binary(other, other.value, 0.0, 1.0, "min")
        }
    }

    fn max(self, other: Self) -> Self {
        if self.value >= other.value {
            self.binary(other, self.value, 1.0, 0.0, "max")
        } else {
            self.binary(other, other.value, 0.0, 1.0, "max")
        }
    }

    fn clamp(self, lo: f64, hi: f64) -> Self {
        let x = self.value;
        if x < lo {
            self.unary(lo, 0.0, "clamp")
        } else if x > hi {
            self.unary(hi, 0.0, "clamp")
        } else {
            self.unary(x, 1.0, "clamp")
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value + rhs.value, 1.0, 1.0, "add")
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value - rhs.value, 1.0, -1.0, "sub")
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, self.value * rhs.value, rhs.value, self.value, "mul")
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        let inv = 1.0 / rhs.value;
        self.binary(
            rhs,
            self.value / rhs.value,
            inv,
            -self.value * inv * inv,
            "div",
        )
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.unary(-self.value, -1.0, "neg")
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.unary(self.value + rhs, 1.0, "add")
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.unary(self.value - rhs, 1.0, "sub")
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.unary(self.value * rhs, rhs, "mul")
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Var<'t> {
        self.unary(self.value / rhs, 1.0 / rhs, "div")
    }
}

impl<'t> Add<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        rhs + self
    }
}

impl<'t> Sub<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        rhs.unary(self - rhs.value, -1.0, "sub")
    }
}

impl<'t> Mul<Var<'t>> for f64 {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        rhs * self
    }
}

/// Sums a non-empty sequence left to right; `zero` seeds empty sequences.
pub fn sum<S: Scalar>(zero: S, items: impl IntoIterator<Item = S>) -> S {
    let mut iter = items.into_iter();
    match iter.next() {
        Some(first) => iter.fold(first, |acc, x| acc + x),
        None => zero,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientResult {
    pub value: f64,
    pub gradient: Vec<f64>,
}

/// Records `program` on a fresh tape and reverse-accumulates its gradient.
pub fn evaluate_with_gradient<F>(inputs: &[f64], program: F) -> Result<GradientResult, AdError>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Var<'t>,
{
    try_evaluate_with_gradient(inputs, |tape, vars| Ok::<_, AdError>(program(tape, vars)))
}

/// Fallible variant of [`evaluate_with_gradient`]: the program may reject its
/// inputs with its own error type.
pub fn try_evaluate_with_gradient<F, E>(inputs: &[f64], program: F) -> Result<GradientResult, E>
where
    F: for<'t> FnOnce(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: From<AdError>,
{
    let tape = Tape::with_capacity(inputs.len() * 32);
    let vars: Vec<Var<'_>> = inputs.iter().map(|&x| tape.var(x)).collect();
    let output = program(&tape, &vars)?;
    if !std::ptr::eq(output.tape, &tape) {
        return Err(AdError::ForeignOutput.into());
    }
    if let Some(fault) = tape.fault() {
        return Err(fault.into());
    }
    let adjoint = tape.adjoints(output.index);
    let gradient = vars.iter().map(|v| adjoint[v.index]).collect();
    Ok(GradientResult {
        value: output.value,
        gradient,
    })
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
pub fn finite_difference_gradient<F>(function: F, inputs: &[f64], h: f64) -> Result<Vec<f64>, AdError>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(AdError::InvalidStep(h));
    }
    let mut x = inputs.to_vec();
    let mut gradient = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let xi = x[i];
        x[i] = xi + h;
        let plus = function(&x);
        x[i] = xi - h;
        let minus = function(&x);
        x[i] = xi;
        for (sign, value) in [('+', plus), ('-', minus)] {
            if !value.is_finite() {
                return Err(AdError::NonFiniteSample {
                    coordinate: i,
                    sign,
                    value,
                });
            }
        }
        gradient.push((plus - minus) / (2.0 * h));
    }
    Ok(gradient)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn heron<S: Scalar>(a: S, b: S, c: S) -> S {
        let s = (a + b + c) * 0.5;
        (s * (s - a) * (s - b) * (s - c)).sqrt()
    }

    #[test]
    fn square_and_sqrt() {
        let r = evaluate_with_gradient(&[3.0], |_, x| x[0] * x[0]).unwrap();
        assert_eq!((r.value, r.gradient), (9.0, vec![6.0]));
        let r = evaluate_with_gradient(&[4.0], |_, x| x[0].sqrt()).unwrap();
        assert_eq!((r.value, r.gradient), (2.0, vec![0.25]));
    }

    #[test]
    fn heron_matches_finite_differences() {
        let x = [3.0, 4.0, 5.0];
        let r = evaluate_with_gradient(&x, |_, v| heron(v[0], v[1], v[2])).unwrap();
        assert_eq!(r.value, 6.0);
        let fd = finite_difference_gradient(|v| heron(v[0], v[1], v[2]), &x, 1e-6).unwrap();
        for (a, b) in r.gradient.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn finite_difference_basics() {
        let g = finite_difference_gradient(|v| v[0] * v[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-8);
        let g = finite_difference_gradient(|_| 7.0, &[1.0, 2.0], 1e-3).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
        assert!(matches!(
            finite_difference_gradient(|v| v[0].ln(), &[0.0], 1e-3),
            Err(AdError::NonFiniteSample { coordinate: 0, .. })
        ));
        assert!(finite_difference_gradient(|v| v[0], &[0.0], 0.0).is_err());
    }

    #[test]
    fn ignored_input_has_exact_zero_gradient() {
        let r = evaluate_with_gradient(&[1.5, 2.0, -3.0], |_, x| (x[0] * x[2]).exp()).unwrap();
        assert_eq!(r.gradient[1], 0.0);
    }

    #[test]
    fn linearity_is_exact() {
        let x = [0.7, 1.3];
        fn f<S: Scalar>(a: S, b: S) -> S {
            (a * b).sqrt()
        }
        fn g<S: Scalar>(a: S, b: S) -> S {
            a.ln() + b * b
        }
        let gf = evaluate_with_gradient(&x, |_, v| f(v[0], v[1])).unwrap().gradient;
        let gg = evaluate_with_gradient(&x, |_, v| g(v[0], v[1])).unwrap().gradient;
        let combo = evaluate_with_gradient(&x, |_, v| f(v[0], v[1]) * 2.0 + g(v[0], v[1]) * -0.5)
            .unwrap()
            .gradient;
        for i in 0..2 {
            assert_eq!(combo[i], 2.0 * gf[i] + -0.5 * gg[i]);
        }
    }

    #[test]
    fn domain_and_nonfinite_faults_name_the_operation() {
        let err = evaluate_with_gradient(&[-1.0], |_, x| x[0].sqrt()).unwrap_err();
        assert!(matches!(err, AdError::Domain { op: "sqrt", .. }), "{err}");
        let err = evaluate_with_gradient(&[1.5], |_, x| x[0].acos()).unwrap_err();
        assert!(matches!(err, AdError::Domain { op: "acos", .. }));
        let err = evaluate_with_gradient(&[0.0], |_, x| x[0].ln()).unwrap_err();
        assert!(matches!(err, AdError::NonFinite { op: "ln", .. }));
        let err = evaluate_with_gradient(&[0.0, 1.0], |_, x| x[1] / x[0]).unwrap_err();
        assert!(matches!(err, AdError::NonFinite { op: "div", node: 2 }));
    }

    #[test]
    fn acos_derivative_is_finite_at_the_boundary() {
        let r = evaluate_with_gradient(&[1.0], |_, x| x[0].acos()).unwrap();
        assert_eq!(r.value, 0.0);
        let expected = -1.0 / (1.0 - ACOS_DERIVATIVE_LIMIT * ACOS_DERIVATIVE_LIMIT).sqrt();
        assert_eq!(r.gradient[0], expected);
        assert!(r.gradient[0].is_finite() && r.gradient[0] < 0.0);
    }

    #[test]
    fn subgradients_follow_the_attained_branch() {
        let r = evaluate_with_gradient(&[2.0, 2.0], |_, x| x[0].min(x[1])).unwrap();
        assert_eq!(r.gradient, vec![1.0, 0.0]);
        let r = evaluate_with_gradient(&[1.0, 3.0], |_, x| x[0].max(x[1])).unwrap();
        assert_eq!(r.gradient, vec![0.0, 1.0]);
        let r = evaluate_with_gradient(&[5.0], |_, x| x[0].clamp(0.0, 1.0)).unwrap();
        assert_eq!((r.value, r.gradient[0]), (1.0, 0.0));
        let r = evaluate_with_gradient(&[0.5], |_, x| x[0].clamp(0.0, 1.0)).unwrap();
        assert_eq!(r.gradient[0], 1.0);
        let r = evaluate_with_gradient(&[-2.0], |_, x| x[0].abs()).unwrap();
        assert_eq!(r.gradient[0], -1.0);
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let x = [0.3, 1.7, 2.9];
        let run = || {
            evaluate_with_gradient(&x, |_, v| {
                heron(v[0] + 2.0, v[1], v[2]).powf(1.5) / (v[0] * v[1]).exp()
            })
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        for (p, q) in a.gradient.iter().zip(&b.gradient) {
            assert_eq!(p.to_bits(), q.to_bits());
        }
        let plain = heron(x[0] + 2.0, x[1], x[2]).powf(1.5) / (x[0] * x[1]).exp();
        assert_eq!(a.value.to_bits(), plain.to_bits());
    }

    #[test]
    fn fallible_programs_propagate_their_error() {
        #[derive(Debug, PartialEq)]
        enum Custom {
            Rejected,
            Ad,
        }
        impl From<AdError> for Custom {
            fn from(_: AdError) -> Self {
                Custom::Ad
            }
        }
        let r: Result<GradientResult, Custom> =
            try_evaluate_with_gradient(&[1.0], |_, _| Err(Custom::Rejected));
        assert_eq!(r.unwrap_err(), Custom::Rejected);
        let r: Result<GradientResult, Custom> =
            try_evaluate_with_gradient(&[-1.0], |_, x| Ok(x[0].sqrt()));
        assert_eq!(r.unwrap_err(), Custom::Ad);
    }
}
