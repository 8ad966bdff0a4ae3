use std::sync::Arc;

use super::{binary_map, unary_map};
use crate::graph::{add_grad, Graph, GraphOp, Var};
use crate::tensor::Tensor;

enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

struct BinOp {
    a: usize,
    b: usize,
    kind: BinKind,
}

impl GraphOp for BinOp {
    fn backward(&self, values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let shape = g.shape().to_vec();
        let (ga, gb) = match self.kind {
            BinKind::Add => (g.data().to_vec(), g.data().to_vec()),
            BinKind::Sub => (g.data().to_vec(), unary_map(g.data(), |v| -v)),
            BinKind::Mul => {
                let av = values[self.a].data();
                let bv = values[self.b].data();
                (
                    binary_map(g.data(), bv, |gv, b| gv * b),
                    binary_map(g.data(), av, |gv, a| gv * a),
                )
            }
            BinKind::Div => {
                let av = values[self.a].data();
                let bv = values[self.b].data();
                let ga = binary_map(g.data(), bv, |gv, b| gv / b);
                let mut gb = vec![0.0; g.len()];
                for i in 0..gb.len() {
                    gb[i] = -g.data()[i] * av[i] / (bv[i] * bv[i]);
                }
                (ga, gb)
            }
        };
        add_grad(grads, self.a, Tensor::from_vec(&shape, ga).unwrap());
        add_grad(grads, self.b, Tensor::from_vec(&shape, gb).unwrap());
    }
}

struct UnaryOp {
    x: usize,
    /// gradient factor from (input value, output value)
    dfn: fn(f64, f64) -> f64,
    self_id_hint: usize,
}

impl GraphOp for UnaryOp {
    fn backward(&self, values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let xv = values[self.x].data();
        let yv = values[self.self_id_hint].data();
        let mut gx = vec![0.0; g.len()];
        for i in 0..gx.len() {
            gx[i] = g.data()[i] * (self.dfn)(xv[i], yv[i]);
        }
        add_grad(grads, self.x, Tensor::from_vec(g.shape(), gx).unwrap());
    }
}

struct AffineOp {
    x: usize,
    mul: f64,
}

impl GraphOp for AffineOp {
    fn backward(&self, _values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gx = unary_map(g.data(), |v| v * self.mul);
        add_grad(grads, self.x, Tensor::from_vec(g.shape(), gx).unwrap());
    }
}

struct ClampOp {
    x: usize,
    lo: f64,
    hi: f64,
}

impl GraphOp for ClampOp {
    fn backward(&self, values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let xv = values[self.x].data();
        let mut gx = vec![0.0; g.len()];
        for i in 0..gx.len() {
            if xv[i] >= self.lo && xv[i] <= self.hi {
                gx[i] = g.data()[i];
            }
        }
        add_grad(grads, self.x, Tensor::from_vec(g.shape(), gx).unwrap());
    }
}

struct ReshapeOp {
    x: usize,
    in_shape: Vec<usize>,
}

impl GraphOp for ReshapeOp {
    fn backward(&self, _values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gx = Tensor::from_vec(&self.in_shape, g.data().to_vec()).unwrap();
        add_grad(grads, self.x, gx);
    }
}

impl Graph {
    fn binary(&mut self, a: Var, b: Var, kind: BinKind, f: fn(f64, f64) -> f64) -> Var {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "elementwise op shape mismatch"
        );
        let out = binary_map(self.value(a).data(), self.value(b).data(), f);
        let t = Tensor::from_vec(self.shape(a), out).unwrap();
        self.push(
            Arc::new(t),
            Some(Box::new(BinOp {
                a: a.0,
                b: b.0,
                kind,
            })),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Mul, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, BinKind::Div, |x, y| x / y)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64 + Sync, dfn: fn(f64, f64) -> f64) -> Var {
        let out = unary_map(self.value(x).data(), f);
        let t = Tensor::from_vec(self.shape(x), out).unwrap();
        let id = self.len();
        self.push(
            Arc::new(t),
            Some(Box::new(UnaryOp {
                x: x.0,
                dfn,
                self_id_hint: id,
            })),
        )
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, |_, y| y)
    }

    /// Square root with the derivative clamped away from the singularity at 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, f64::sqrt, |_, y| 0.5 / y.max(1e-150))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        assert!((0.0..1.0).contains(&slope));
        // slope is baked into both closures; 0.2 everywhere in this crate
        let s = slope;
        let out = unary_map(
            self.value(x).data(),
            move |v| if v > 0.0 { v } else { s * v },
        );
        let t = Tensor::from_vec(self.shape(x), out).unwrap();
        self.push(
            Arc::new(t),
            Some(Box::new(LeakyReluOp { x: x.0, slope: s })),
        )
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = unary_map(self.value(x).data(), |v| v * c);
        let t = Tensor::from_vec(self.shape(x), out).unwrap();
        self.push(Arc::new(t), Some(Box::new(AffineOp { x: x.0, mul: c })))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = unary_map(self.value(x).data(), |v| v + c);
        let t = Tensor::from_vec(self.shape(x), out).unwrap();
        self.push(Arc::new(t), Some(Box::new(AffineOp { x: x.0, mul: 1.0 })))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Hard clamp; gradient passes only inside `[lo, hi]` (inclusive).
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = unary_map(self.value(x).data(), move |v| v.clamp(lo, hi));
        let t = Tensor::from_vec(self.shape(x), out).unwrap();
        self.push(Arc::new(t), Some(Box::new(ClampOp { x: x.0, lo, hi })))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let in_shape = self.shape(x).to_vec();
        let t = self
            .value(x)
            .clone()
            .reshaped(shape)
            .expect("reshape element count mismatch");
        self.push(Arc::new(t), Some(Box::new(ReshapeOp { x: x.0, in_shape })))
    }
}

struct LeakyReluOp {
    x: usize,
    slope: f64,
}

impl GraphOp for LeakyReluOp {
    fn backward(&self, values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let xv = values[self.x].data();
        let mut gx = vec![0.0; g.len()];
        for i in 0..gx.len() {
            gx[i] = g.data()[i] * if xv[i] > 0.0 { 1.0 } else { self.slope };
        }
        add_grad(grads, self.x, Tensor::from_vec(g.shape(), gx).unwrap());
    }
}
