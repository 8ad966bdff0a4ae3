use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{add_grad, grad_buf, Graph, GraphOp, Var};
use crate::parallel;
use crate::tensor::Tensor;

fn dims3(t: &Tensor, what: &str) -> Result<[usize; 3]> {
    let s = t.shape();
    if s.len() != 3 {
        return Err(Error::dim(format!("{what} must be 3-axis, got {s:?}")));
    }
    Ok([s[0], s[1], s[2]])
}

/// out[n,r,s] = sum_d a[n,r,d] * b[n,s,d]
fn bmm_nt_value(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, r, d] = dims3(a, "bmm lhs")?;
    let [nb, s, db] = dims3(b, "bmm rhs")?;
    if n != nb || d != db {
        return Err(Error::dim(format!(
            "bmm_nt shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let av = a.data();
    let bv = b.data();
    let mut out = vec![0.0; n * r * s];
    parallel::chunks_mut_indexed(&mut out, r * s, |ni, plane| {
        let ab = &av[ni * r * d..][..r * d];
        let bb = &bv[ni * s * d..][..s * d];
        for ri in 0..r {
            for si in 0..s {
                let mut acc = 0.0;
                let ar = &ab[ri * d..][..d];
                let br = &bb[si * d..][..d];
                for i in 0..d {
                    acc += ar[i] * br[i];
                }
                plane[ri * s + si] = acc;
            }
        }
    });
    Tensor::from_vec(&[n, r, s], out)
}

/// out[n,r,d] = sum_s a[n,r,s] * b[n,s,d]
fn bmm_nn_value(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [n, r, s] = dims3(a, "bmm lhs")?;
    let [nb, sb, d] = dims3(b, "bmm rhs")?;
    if n != nb || s != sb {
        return Err(Error::dim(format!(
            "bmm_nn shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let av = a.data();
    let bv = b.data();
    let mut out = vec![0.0; n * r * d];
    parallel::chunks_mut_indexed(&mut out, r * d, |ni, plane| {
        let ab = &av[ni * r * s..][..r * s];
        let bb = &bv[ni * s * d..][..s * d];
        plane.fill(0.0);
        for ri in 0..r {
            let dst = &mut plane[ri * d..][..d];
            for si in 0..s {
                let w = ab[ri * s + si];
                if w == 0.0 {
                    continue;
                }
                let src = &bb[si * d..][..d];
                for i in 0..d {
                    dst[i] += w * src[i];
                }
            }
        }
    });
    Tensor::from_vec(&[n, r, d], out)
}

struct BmmNtOp {
    a: usize,
    b: usize,
}

impl GraphOp for BmmNtOp {
    fn backward(&self, values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        // g: (n,r,s); a: (n,r,d); b: (n,s,d)
        let a = &values[self.a];
        let b = &values[self.b];
        // ga[n,r,d] = sum_s g[n,r,s] b[n,s,d]
        let ga = bmm_nn_value(g, b).unwrap();
        add_grad(grads, self.a, ga);
        // gb[n,s,d] = sum_r g[n,r,s] a[n,r,d]
        let [n, r, s] = dims3(g, "g").unwrap();
        let d = a.shape()[2];
        let gv = g.data();
        let av = a.data();
        let gb = grad_buf(grads, self.b, b.shape());
        let gbv = gb.data_mut();
        for ni in 0..n {
            for si in 0..s {
                let dst = &mut gbv[(ni * s + si) * d..][..d];
                for ri in 0..r {
                    let w = gv[(ni * r + ri) * s + si];
                    if w == 0.0 {
                        continue;
                    }
                    let src = &av[(ni * r + ri) * d..][..d];
                    for i in 0..d {
                        dst[i] += w * src[i];
                    }
                }
            }
        }
    }
}

struct BmmNnOp {
    a: usize,
    b: usize,
}

impl GraphOp for BmmNnOp {
    fn backward(&self, values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        // g: (n,r,d); a: (n,r,s); b: (n,s,d)
        let a = &values[self.a];
        let b = &values[self.b];
        // ga[n,r,s] = sum_d g[n,r,d] b[n,s,d]
        let ga = bmm_nt_value(g, b).unwrap();
        add_grad(grads, self.a, ga);
        // gb[n,s,d] = sum_r a[n,r,s] g[n,r,d]
        let [n, r, s] = dims3(a, "a").unwrap();
        let d = g.shape()[2];
        let gv = g.data();
        let av = a.data();
        let gb = grad_buf(grads, self.b, b.shape());
        let gbv = gb.data_mut();
        for ni in 0..n {
            for si in 0..s {
                let dst = &mut gbv[(ni * s + si) * d..][..d];
                for ri in 0..r {
                    let w = av[(ni * r + ri) * s + si];
                    if w == 0.0 {
                        continue;
                    }
                    let src = &gv[(ni * r + ri) * d..][..d];
                    for i in 0..d {
                        dst[i] += w * src[i];
                    }
                }
            }
        }
    }
}

struct LinearOp {
    x: usize,
    w: usize,
    b: usize,
}

impl GraphOp for LinearOp {
    fn backward(&self, values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        // x: (n, i); w: (o, i); b: (o); g: (n, o)
        let x = &values[self.x];
        let w = &values[self.w];
        let (n, i) = (x.shape()[0], x.shape()[1]);
        let o = w.shape()[0];
        let gv = g.data();
        let wv = w.data();
        let xv = x.data();

        // gx[n,i] = sum_o g[n,o] w[o,i]
        let mut gx = vec![0.0; n * i];
        parallel::chunks_mut_indexed(&mut gx, i, |ni, row| {
            for oi in 0..o {
                let gw = gv[ni * o + oi];
                if gw == 0.0 {
                    continue;
                }
                let wr = &wv[oi * i..][..i];
                for c in 0..i {
                    row[c] += gw * wr[c];
                }
            }
        });
        add_grad(grads, self.x, Tensor::from_vec(x.shape(), gx).unwrap());

        // gw[o,i] = sum_n g[n,o] x[n,i]
        let mut gw = vec![0.0; o * i];
        parallel::chunks_mut_indexed(&mut gw, i, |oi, row| {
            for ni in 0..n {
                let gg = gv[ni * o + oi];
                if gg == 0.0 {
                    continue;
                }
                let xr = &xv[ni * i..][..i];
                for c in 0..i {
                    row[c] += gg * xr[c];
                }
            }
        });
        add_grad(grads, self.w, Tensor::from_vec(w.shape(), gw).unwrap());

        // gb[o] = sum_n g[n,o]
        let mut gb = vec![0.0; o];
        for ni in 0..n {
            for oi in 0..o {
                gb[oi] += gv[ni * o + oi];
            }
        }
        add_grad(grads, self.b, Tensor::from_vec(&[o], gb).unwrap());
    }
}

impl Graph {
    /// Batched `a @ b^T`: `(N,R,D) x (N,S,D) -> (N,R,S)`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = bmm_nt_value(self.value(a), self.value(b))?;
        Ok(self.push(Arc::new(out), Some(Box::new(BmmNtOp { a: a.0, b: b.0 }))))
    }

    /// Batched `a @ b`: `(N,R,S) x (N,S,D) -> (N,R,D)`.
    pub fn bmm_nn(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = bmm_nn_value(self.value(a), self.value(b))?;
        Ok(self.push(Arc::new(out), Some(Box::new(BmmNnOp { a: a.0, b: b.0 }))))
    }

    /// Fully-connected layer: `(N,I) x (O,I) + (O) -> (N,O)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(b);
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 {
            return Err(Error::dim(format!(
                "linear wants (N,I),(O,I),(O); got {xs:?},{ws:?},{bs:?}"
            )));
        }
        if xs[1] != ws[1] || ws[0] != bs[0] {
            return Err(Error::dim(format!(
                "linear shape mismatch: {xs:?} x {ws:?} + {bs:?}"
            )));
        }
        let (n, i, o) = (xs[0], xs[1], ws[0]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; n * o];
        parallel::chunks_mut_indexed(&mut out, o, |ni, row| {
            let xr = &xv[ni * i..][..i];
            for oi in 0..o {
                let wr = &wv[oi * i..][..i];
                let mut acc = bv[oi];
                for c in 0..i {
                    acc += wr[c] * xr[c];
                }
                row[oi] = acc;
            }
        });
        let t = Tensor::from_vec(&[n, o], out).unwrap();
        Ok(self.push(
            Arc::new(t),
            Some(Box::new(LinearOp {
                x: x.0,
                w: w.0,
                b: b.0,
            })),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input_gradient;
    use crate::rng::Rng;

    #[test]
    fn bmm_values_match_naive() {
        let mut rng = Rng::new(2);
        let a = Tensor::from_fn(&[2, 3, 4], |_| rng.normal());
        let b = Tensor::from_fn(&[2, 5, 4], |_| rng.normal());
        let y = bmm_nt_value(&a, &b).unwrap();
        for n in 0..2 {
            for r in 0..3 {
                for s in 0..5 {
                    let mut acc = 0.0;
                    for d in 0..4 {
                        acc += a.data()[(n * 3 + r) * 4 + d] * b.data()[(n * 5 + s) * 4 + d];
                    }
                    assert!((y.data()[(n * 3 + r) * 5 + s] - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = Rng::new(6);
        let a = Tensor::from_fn(&[2, 3, 4], |_| rng.normal());
        let b = Tensor::from_fn(&[2, 5, 4], |_| rng.normal());
        for wrt in 0..2 {
            let rel = check_input_gradient(&[a.clone(), b.clone()], wrt, 1e-5, |g, vars| {
                let y = g.bmm_nt(vars[0], vars[1]).unwrap();
                let q = g.mul(y, y);
                g.sum_all(q)
            });
            assert!(rel < 1e-7, "bmm_nt wrt {wrt} rel {rel}");
        }
        let c = Tensor::from_fn(&[2, 3, 5], |_| rng.normal());
        let d = Tensor::from_fn(&[2, 5, 4], |_| rng.normal());
        for wrt in 0..2 {
            let rel = check_input_gradient(&[c.clone(), d.clone()], wrt, 1e-5, |g, vars| {
                let y = g.bmm_nn(vars[0], vars[1]).unwrap();
                let q = g.mul(y, y);
                g.sum_all(q)
            });
            assert!(rel < 1e-7, "bmm_nn wrt {wrt} rel {rel}");
        }
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = Rng::new(8);
        let x = Tensor::from_fn(&[3, 7], |_| rng.normal());
        let w = Tensor::from_fn(&[4, 7], |_| rng.normal() * 0.3);
        let b = Tensor::from_fn(&[4], |_| rng.normal() * 0.1);
        for wrt in 0..3 {
            let rel =
                check_input_gradient(&[x.clone(), w.clone(), b.clone()], wrt, 1e-5, |g, vars| {
                    let y = g.linear(vars[0], vars[1], vars[2]).unwrap();
                    let q = g.mul(y, y);
                    g.sum_all(q)
                });
            assert!(rel < 1e-7, "linear wrt {wrt} rel {rel}");
        }
    }
}
