//! Thread-local tape for reverse-mode parameter gradients.
//!
//! A [`Var`] is an index into the calling thread's tape. Arithmetic on
//! `Var`s records one node per operation together with the local partial
//! derivatives of its output with respect to its parents; a reverse sweep
//! then accumulates d(result)/d(leaf) for every leaf in a single pass.
//!
//! Tapes are single-use: callers [`reset`] the tape, register leaves,
//! build the computation, and run [`backward_prefix`]. Each batch element
//! records its own tape, so parallel batch evaluation simply runs one
//! tape per worker thread with no sharing.
//!
//! `Var(0)` is a canonical literal zero. Operations short-circuit around
//! it, which keeps structurally-zero tangent lanes (for instance parameter
//! lanes in nested forward-over-reverse sweeps) from bloating the tape.

use crate::scalar::Scalar;
use std::cell::RefCell;

#[derive(Clone, Copy, Debug)]
struct Arg {
    parent: u32,
    partial: f64,
}

#[derive(Clone, Copy, Debug)]
struct Node {
    start: u32,
    len: u32,
}

#[derive(Default)]
struct Tape {
    vals: Vec<f64>,
    nodes: Vec<Node>,
    args: Vec<Arg>,
    scratch: Vec<f64>,
}

impl Tape {
    fn reset(&mut self) {
        self.vals.clear();
        self.nodes.clear();
        self.args.clear();
        // slot 0: the literal zero; slot 1: the constant one
        self.vals.push(0.0);
        self.nodes.push(Node { start: 0, len: 0 });
        self.vals.push(1.0);
        self.nodes.push(Node { start: 0, len: 0 });
    }

    #[inline]
    fn push0(&mut self, value: f64) -> Var {
        let id = self.vals.len() as u32;
        self.vals.push(value);
        self.nodes.push(Node { start: self.args.len() as u32, len: 0 });
        Var(id)
    }

    #[inline]
    fn push1(&mut self, value: f64, p: Var, d: f64) -> Var {
        let id = self.vals.len() as u32;
        let start = self.args.len() as u32;
        self.args.push(Arg { parent: p.0, partial: d });
        self.vals.push(value);
        self.nodes.push(Node { start, len: 1 });
        Var(id)
    }

    #[inline]
    fn push2(&mut self, value: f64, p0: Var, d0: f64, p1: Var, d1: f64) -> Var {
        let id = self.vals.len() as u32;
        let start = self.args.len() as u32;
        self.args.push(Arg { parent: p0.0, partial: d0 });
        self.args.push(Arg { parent: p1.0, partial: d1 });
        self.vals.push(value);
        self.nodes.push(Node { start, len: 2 });
        Var(id)
    }
}

thread_local! {
    static TAPE: RefCell<Tape> = RefCell::new(Tape::default());
}

/// A scalar recorded on the calling thread's tape.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Var(u32);

impl Var {
    pub const ZERO: Var = Var(0);
    pub const ONE: Var = Var(1);

    #[inline]
    pub fn index(self) -> usize {
        self.0 as usize
    }

    #[inline]
    pub fn value(self) -> f64 {
        TAPE.with(|t| t.borrow().vals[self.0 as usize])
    }
}

impl Default for Var {
    fn default() -> Self {
        Var::ZERO
    }
}

/// Clears the calling thread's tape and re-seeds the literal zero slot.
pub fn reset() {
    TAPE.with(|t| t.borrow_mut().reset());
}

/// Registers an independent variable. Leaves registered immediately after
/// [`reset`] occupy consecutive indices starting at 2 (slots 0 and 1 hold
/// the interned constants), which is what [`backward_prefix`] exploits.
pub fn leaf(value: f64) -> Var {
    TAPE.with(|t| t.borrow_mut().push0(value))
}

/// Number of variables currently on the tape.
pub fn len() -> usize {
    TAPE.with(|t| t.borrow().vals.len())
}

/// Reverse sweep from `result`; returns d(result)/d(var) for the first
/// `prefix` variables (index 0 is the literal-zero slot).
pub fn backward_prefix(result: Var, prefix: usize) -> Vec<f64> {
    TAPE.with(|t| {
        let mut t = t.borrow_mut();
        let n = t.vals.len();
        t.scratch.clear();
        t.scratch.resize(n, 0.0);
        t.scratch[result.0 as usize] = 1.0;
        for i in (2..n).rev() {
            let g = t.scratch[i];
            if g == 0.0 {
                continue;
            }
            let node = t.nodes[i];
            let start = node.start as usize;
            for k in start..start + node.len as usize {
                let arg = t.args[k];
                t.scratch[arg.parent as usize] += arg.partial * g;
            }
        }
        t.scratch[..prefix.min(n)].to_vec()
    })
}

impl std::ops::Add for Var {
    type Output = Var;
    #[inline]
    fn add(self, o: Var) -> Var {
        if self.0 == 0 {
            return o;
        }
        if o.0 == 0 {
            return self;
        }
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let v = t.vals[self.0 as usize] + t.vals[o.0 as usize];
            t.push2(v, self, 1.0, o, 1.0)
        })
    }
}

impl std::ops::Sub for Var {
    type Output = Var;
    #[inline]
    fn sub(self, o: Var) -> Var {
        if o.0 == 0 {
            return self;
        }
        if self.0 == 0 {
            return -o;
        }
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let v = t.vals[self.0 as usize] - t.vals[o.0 as usize];
            t.push2(v, self, 1.0, o, -1.0)
        })
    }
}

impl std::ops::Mul for Var {
    type Output = Var;
    #[inline]
    fn mul(self, o: Var) -> Var {
        if self.0 == 0 || o.0 == 0 {
            return Var::ZERO;
        }
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let a = t.vals[self.0 as usize];
            let b = t.vals[o.0 as usize];
            t.push2(a * b, self, b, o, a)
        })
    }
}

impl std::ops::Div for Var {
    type Output = Var;
    #[inline]
    fn div(self, o: Var) -> Var {
        if self.0 == 0 {
            return Var::ZERO;
        }
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let a = t.vals[self.0 as usize];
            let b = t.vals[o.0 as usize];
            let q = a / b;
            t.push2(q, self, 1.0 / b, o, -q / b)
        })
    }
}

impl std::ops::Neg for Var {
    type Output = Var;
    #[inline]
    fn neg(self) -> Var {
        if self.0 == 0 {
            return Var::ZERO;
        }
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let v = -t.vals[self.0 as usize];
            t.push1(v, self, -1.0)
        })
    }
}

impl Var {
    #[inline]
    fn unary(self, f: impl FnOnce(f64) -> (f64, f64)) -> Var {
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let x = t.vals[self.0 as usize];
            let (v, d) = f(x);
            t.push1(v, self, d)
        })
    }
}

impl Scalar for Var {
    const TRACKS_PARAMETERS: bool = true;

    #[inline]
    fn from_f64(c: f64) -> Self {
        if c == 0.0 {
            return Var::ZERO;
        }
        if c == 1.0 {
            return Var::ONE;
        }
        leaf(c)
    }

    #[inline]
    fn primal(self) -> f64 {
        self.value()
    }

    #[inline]
    fn is_literal_zero(self) -> bool {
        self.0 == 0
    }

    #[inline]
    fn zero() -> Self {
        Var::ZERO
    }

    #[inline]
    fn one() -> Self {
        Var::ONE
    }

    /// Fused multiply-add `self * a + b`: a single node with three
    /// argument slots.
    fn mul_add(self, a: Self, b: Self) -> Self {
        if self.0 == 0 || a.0 == 0 {
            return b;
        }
        if b.0 == 0 {
            return self * a;
        }
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let xv = t.vals[self.0 as usize];
            let av = t.vals[a.0 as usize];
            let bv = t.vals[b.0 as usize];
            let start = t.args.len() as u32;
            t.args.push(Arg { parent: self.0, partial: av });
            t.args.push(Arg { parent: a.0, partial: xv });
            t.args.push(Arg { parent: b.0, partial: 1.0 });
            let id = t.vals.len() as u32;
            t.vals.push(xv * av + bv);
            t.nodes.push(Node { start, len: 3 });
            Var(id)
        })
    }

    fn cos(self) -> Self {
        self.unary(|x| (x.cos(), -x.sin()))
    }

    fn sin(self) -> Self {
        self.unary(|x| (x.sin(), x.cos()))
    }

    fn acos_clamped(self) -> Self {
        self.unary(|x| {
            let v = x.clamp(-1.0, 1.0).acos();
            let d = if x > -1.0 && x < 1.0 {
                -1.0 / (1.0 - x * x).sqrt()
            } else {
                0.0
            };
            (v, d)
        })
    }

    fn exp(self) -> Self {
        self.unary(|x| {
            let e = x.exp();
            (e, e)
        })
    }

    fn ln(self) -> Self {
        self.unary(|x| (x.ln(), 1.0 / x))
    }

    fn sqrt(self) -> Self {
        self.unary(|x| {
            let r = x.sqrt();
            (r, 0.5 / r)
        })
    }

    fn abs(self) -> Self {
        if self.0 == 0 {
            return Var::ZERO;
        }
        self.unary(|x| (x.abs(), if x >= 0.0 { 1.0 } else { -1.0 }))
    }

    /// Fused inner product: one node with 2k argument slots. Pairs with a
    /// literal-zero side are skipped entirely.
    fn dot(a: &[Var], b: &[Var]) -> Var {
        debug_assert_eq!(a.len(), b.len());
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let start = t.args.len() as u32;
            let mut acc = 0.0;
            for (x, y) in a.iter().zip(b) {
                if x.0 == 0 || y.0 == 0 {
                    continue;
                }
                let xv = t.vals[x.0 as usize];
                let yv = t.vals[y.0 as usize];
                acc += xv * yv;
                t.args.push(Arg { parent: x.0, partial: yv });
                t.args.push(Arg { parent: y.0, partial: xv });
            }
            let len = t.args.len() as u32 - start;
            if len == 0 {
                return Var::ZERO;
            }
            let id = t.vals.len() as u32;
            t.vals.push(acc);
            t.nodes.push(Node { start, len });
            Var(id)
        })
    }

    /// Fused log-sum-exp: one node whose partials are the softmax weights.
    fn log_sum_exp(xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "log_sum_exp of an empty slice");
        TAPE.with(|t| {
            let mut t = t.borrow_mut();
            let mut m = f64::NEG_INFINITY;
            for x in xs {
                m = m.max(t.vals[x.0 as usize]);
            }
            let mut sum = 0.0;
            for x in xs {
                sum += (t.vals[x.0 as usize] - m).exp();
            }
            let value = m + sum.ln();
            let start = t.args.len() as u32;
            for x in xs {
                let w = (t.vals[x.0 as usize] - value).exp();
                t.args.push(Arg { parent: x.0, partial: w });
            }
            let id = t.vals.len() as u32;
            t.vals.push(value);
            t.nodes.push(Node { start, len: xs.len() as u32 });
            Var(id)
        })
    }
}
