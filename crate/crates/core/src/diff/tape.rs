//! Reverse-mode tape.
//!
//! Each thread owns one Wengert list. A [`Tape`] guard claims it for the
//! duration of one differentiation call, so concurrent calls on different
//! threads never share state. [`Var`] is a `Copy` index into the active
//! list; arithmetic on it appends nodes, each node storing its parents and
//! the local partial derivatives with respect to them.

use std::cell::RefCell;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use super::Real;

#[derive(Default)]
struct Nodes {
    values: Vec<f64>,
    /// `edge_end[i]` is one past the last edge of node `i`.
    edge_end: Vec<u32>,
    parents: Vec<u32>,
    partials: Vec<f64>,
    active: bool,
}

impl Nodes {
    fn clear(&mut self) {
        self.values.clear();
        self.edge_end.clear();
        self.parents.clear();
        self.partials.clear();
    }

    #[inline]
    fn push(&mut self, value: f64, edges: &[(u32, f64)]) -> Var {
        for &(p, d) in edges {
            self.parents.push(p);
            self.partials.push(d);
        }
        self.values.push(value);
        self.edge_end.push(self.parents.len() as u32);
        Var(self.values.len() as u32 - 1)
    }
}

thread_local! {
    static NODES: RefCell<Nodes> = RefCell::new(Nodes::default());
}

#[inline]
fn with_nodes<R>(f: impl FnOnce(&mut Nodes) -> R) -> R {
    NODES.with(|n| {
        let mut n = n.borrow_mut();
        debug_assert!(n.active, "Var arithmetic outside of an active Tape");
        f(&mut n)
    })
}

/// Exclusive handle on this thread's tape. Dropping it discards the tape.
pub struct Tape {
    _not_send: std::marker::PhantomData<*const ()>,
}

impl Tape {
    /// Claim the thread-local tape.
    ///
    /// Panics if another `Tape` is alive on this thread; differentiation
    /// calls do not nest.
    pub fn new() -> Self {
        NODES.with(|n| {
            let mut n = n.borrow_mut();
            assert!(!n.active, "nested Tape on the same thread");
            n.clear();
            n.active = true;
        });
        Tape {
            _not_send: std::marker::PhantomData,
        }
    }

    pub fn input(&self, value: f64) -> Var {
        with_nodes(|n| n.push(value, &[]))
    }

    pub fn inputs(&self, values: &[f64]) -> Vec<Var> {
        with_nodes(|n| values.iter().map(|&v| n.push(v, &[])).collect())
    }

    pub fn len(&self) -> usize {
        NODES.with(|n| n.borrow().values.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Adjoints of `output` with respect to each of `wrt`.
    pub fn gradient(&self, output: Var, wrt: &[Var]) -> Vec<f64> {
        NODES.with(|n| {
            let n = n.borrow();
            let out = output.0 as usize;
            let mut adj = vec![0.0; out + 1];
            adj[out] = 1.0;
            for i in (0..=out).rev() {
                let a = adj[i];
                if a == 0.0 {
                    continue;
                }
                let start = if i == 0 {
                    0
                } else {
                    n.edge_end[i - 1] as usize
                };
                let end = n.edge_end[i] as usize;
                for e in start..end {
                    adj[n.parents[e] as usize] += a * n.partials[e];
                }
            }
            wrt.iter()
                .map(|v| adj.get(v.0 as usize).copied().unwrap_or(0.0))
                .collect()
        })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for Tape {
    fn drop(&mut self) {
        NODES.with(|n| {
            let mut n = n.borrow_mut();
            n.clear();
            n.active = false;
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(u32);

impl Var {
    /// Node with an externally computed value and local Jacobian row, e.g.
    /// one ODE output whose sensitivities came from a forward-mode solve.
    pub fn custom(value: f64, partials: &[(Var, f64)]) -> Var {
        with_nodes(|n| {
            for &(p, d) in partials {
                n.parents.push(p.0);
                n.partials.push(d);
            }
            n.values.push(value);
            n.edge_end.push(n.parents.len() as u32);
            Var(n.values.len() as u32 - 1)
        })
    }
}

impl Real for Var {
    #[inline]
    fn cst(v: f64) -> Self {
        with_nodes(|n| n.push(v, &[]))
    }

    #[inline]
    fn value(self) -> f64 {
        NODES.with(|n| n.borrow().values[self.0 as usize])
    }

    #[inline]
    fn apply(self, f: f64, df: f64) -> Self {
        with_nodes(|n| n.push(f, &[(self.0, df)]))
    }

    fn dot(a: &[Self], b: &[Self]) -> Self {
        debug_assert_eq!(a.len(), b.len());
        with_nodes(|n| {
            let mut acc = 0.0;
            for (x, y) in a.iter().zip(b) {
                let xv = n.values[x.0 as usize];
                let yv = n.values[y.0 as usize];
                acc += xv * yv;
                n.parents.push(x.0);
                n.partials.push(yv);
                n.parents.push(y.0);
                n.partials.push(xv);
            }
            n.values.push(acc);
            n.edge_end.push(n.parents.len() as u32);
            Var(n.values.len() as u32 - 1)
        })
    }

    fn sum(xs: &[Self]) -> Self {
        with_nodes(|n| {
            let mut acc = 0.0;
            for x in xs {
                acc += n.values[x.0 as usize];
                n.parents.push(x.0);
                n.partials.push(1.0);
            }
            n.values.push(acc);
            n.edge_end.push(n.parents.len() as u32);
            Var(n.values.len() as u32 - 1)
        })
    }

    fn weighted_sum(coeffs: &[f64], xs: &[Self]) -> Self {
        with_nodes(|n| {
            let mut acc = 0.0;
            for (c, x) in coeffs.iter().zip(xs) {
                acc += c * n.values[x.0 as usize];
                n.parents.push(x.0);
                n.partials.push(*c);
            }
            n.values.push(acc);
            n.edge_end.push(n.parents.len() as u32);
            Var(n.values.len() as u32 - 1)
        })
    }
}

macro_rules! binary {
    ($tr:ident, $method:ident, |$a:ident, $b:ident| $val:expr, $da:expr, $db:expr) => {
        impl $tr for Var {
            type Output = Var;
            #[inline]
            fn $method(self, rhs: Var) -> Var {
                with_nodes(|n| {
                    let $a = n.values[self.0 as usize];
                    let $b = n.values[rhs.0 as usize];
                    n.push($val, &[(self.0, $da), (rhs.0, $db)])
                })
            }
        }
    };
}

binary!(Add, add, |a, b| a + b, 1.0, 1.0);
binary!(Sub, sub, |a, b| a - b, 1.0, -1.0);
binary!(Mul, mul, |a, b| a * b, b, a);
binary!(Div, div, |a, b| a / b, 1.0 / b, -a / (b * b));

impl Neg for Var {
    type Output = Var;
    #[inline]
    fn neg(self) -> Var {
        let v = self.value();
        self.apply(-v, -1.0)
    }
}

impl Add<f64> for Var {
    type Output = Var;
    #[inline]
    fn add(self, rhs: f64) -> Var {
        let v = self.value();
        self.apply(v + rhs, 1.0)
    }
}

impl Sub<f64> for Var {
    type Output = Var;
    #[inline]
    fn sub(self, rhs: f64) -> Var {
        let v = self.value();
        self.apply(v - rhs, 1.0)
    }
}

impl Mul<f64> for Var {
    type Output = Var;
    #[inline]
    fn mul(self, rhs: f64) -> Var {
        let v = self.value();
        self.apply(v * rhs, rhs)
    }
}

impl Div<f64> for Var {
    type Output = Var;
    #[inline]
    fn div(self, rhs: f64) -> Var {
        let v = self.value();
        self.apply(v / rhs, 1.0 / rhs)
    }
}

impl AddAssign for Var {
    #[inline]
    fn add_assign(&mut self, rhs: Var) {
        *self = *self + rhs;
    }
}

impl SubAssign for Var {
    #[inline]
    fn sub_assign(&mut self, rhs: Var) {
        *self = *self - rhs;
    }
}

impl MulAssign for Var {
    #[inline]
    fn mul_assign(&mut self, rhs: Var) {
        *self = *self * rhs;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let tape = Tape::new();
        let x = tape.input(3.0);
        let y = x * x;
        assert_eq!(y.value(), 9.0);
        assert_eq!(tape.gradient(y, &[x]), vec![6.0]);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let tape = Tape::new();
        let x = tape.input(2.0);
        let y = tape.input(5.0);
        let u = x * y;
        let z = u + u * x; // xy + x²y
        let g = tape.gradient(z, &[x, y]);
        assert_eq!(g, vec![5.0 + 2.0 * 2.0 * 5.0, 2.0 + 4.0]);
    }

    #[test]
    fn fused_dot_matches_scalar_ops() {
        let tape = Tape::new();
        let a = tape.inputs(&[1.0, -2.0, 0.5]);
        let b = tape.inputs(&[3.0, 4.0, -1.0]);
        let d = Var::dot(&a, &b);
        assert_eq!(d.value(), 3.0 - 8.0 - 0.5);
        let g = tape.gradient(d, &[a[0], a[1], a[2], b[0], b[1], b[2]]);
        assert_eq!(g, vec![3.0, 4.0, -1.0, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn tape_is_released_on_drop() {
        {
            let _t = Tape::new();
        }
        let _again = Tape::new();
    }

    #[test]
    #[should_panic(expected = "nested Tape")]
    fn nesting_panics() {
        let _a = Tape::new();
        let _b = Tape::new();
    }
}
