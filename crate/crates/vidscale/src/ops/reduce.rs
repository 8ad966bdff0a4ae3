use std::sync::Arc;

use crate::graph::{add_grad, Graph, GraphOp, Var};
use crate::parallel;
use crate::tensor::Tensor;

fn row_chunk(width: usize) -> usize {
    width * (4096 / width).max(1)
}

struct SumAllOp {
    x: usize,
    in_shape: Vec<usize>,
    scale: f64,
}

impl GraphOp for SumAllOp {
    fn backward(&self, _values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gv = g.item() * self.scale;
        add_grad(grads, self.x, Tensor::full(&self.in_shape, gv));
    }
}

struct SumAxis0Op {
    x: usize,
    batch: usize,
}

impl GraphOp for SumAxis0Op {
    fn backward(&self, values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let in_shape = values[self.x].shape().to_vec();
        let inner = g.len();
        let mut gx = vec![0.0; inner * self.batch];
        for b in 0..self.batch {
            gx[b * inner..(b + 1) * inner].copy_from_slice(g.data());
        }
        add_grad(grads, self.x, Tensor::from_vec(&in_shape, gx).unwrap());
    }
}

struct BroadcastAxis0Op {
    x: usize,
    batch: usize,
}

impl GraphOp for BroadcastAxis0Op {
    fn backward(&self, values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let in_shape = values[self.x].shape().to_vec();
        let inner: usize = in_shape.iter().product();
        let mut gx = vec![0.0; inner];
        for b in 0..self.batch {
            let row = &g.data()[b * inner..(b + 1) * inner];
            for i in 0..inner {
                gx[i] += row[i];
            }
        }
        add_grad(grads, self.x, Tensor::from_vec(&in_shape, gx).unwrap());
    }
}

struct BroadcastLastOp {
    x: usize,
    k: usize,
}

impl GraphOp for BroadcastLastOp {
    fn backward(&self, values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let in_shape = values[self.x].shape().to_vec();
        let n = values[self.x].len();
        let k = self.k;
        let mut gx = vec![0.0; n];
        let chunk = (4096 / k).max(1);
        parallel::chunks_mut_indexed(&mut gx, chunk, |ci, cells| {
            let base = ci * chunk;
            for (j, v) in cells.iter_mut().enumerate() {
                let row = &g.data()[(base + j) * k..(base + j + 1) * k];
                *v = row.iter().sum();
            }
        });
        add_grad(grads, self.x, Tensor::from_vec(&in_shape, gx).unwrap());
    }
}

enum RowKind {
    Softmax,
    LogSoftmax,
    LogSumExp,
}

struct RowOp {
    x: usize,
    width: usize,
    kind: RowKind,
    self_id: usize,
}

impl GraphOp for RowOp {
    fn backward(&self, values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = values[self.self_id].data();
        let w = self.width;
        let mut gx = vec![0.0; values[self.x].len()];
        let chunk = row_chunk(w);
        match self.kind {
            RowKind::Softmax => {
                parallel::chunks_mut_indexed(&mut gx, chunk, |ci, rows| {
                    let r0 = ci * chunk / w;
                    for (j, row) in rows.chunks_mut(w).enumerate() {
                        let r = r0 + j;
                        let yr = &y[r * w..(r + 1) * w];
                        let gr = &g.data()[r * w..(r + 1) * w];
                        let dot: f64 = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for i in 0..w {
                            row[i] = yr[i] * (gr[i] - dot);
                        }
                    }
                });
            }
            RowKind::LogSoftmax => {
                parallel::chunks_mut_indexed(&mut gx, chunk, |ci, rows| {
                    let r0 = ci * chunk / w;
                    for (j, row) in rows.chunks_mut(w).enumerate() {
                        let r = r0 + j;
                        let yr = &y[r * w..(r + 1) * w];
                        let gr = &g.data()[r * w..(r + 1) * w];
                        let gsum: f64 = gr.iter().sum();
                        for i in 0..w {
                            row[i] = gr[i] - yr[i].exp() * gsum;
                        }
                    }
                });
            }
            RowKind::LogSumExp => {
                let xv = values[self.x].data();
                parallel::chunks_mut_indexed(&mut gx, chunk, |ci, rows| {
                    let r0 = ci * chunk / w;
                    for (j, row) in rows.chunks_mut(w).enumerate() {
                        let r = r0 + j;
                        let xr = &xv[r * w..(r + 1) * w];
                        let lse = y[r];
                        let gr = g.data()[r];
                        for i in 0..w {
                            row[i] = gr * (xr[i] - lse).exp();
                        }
                    }
                });
            }
        }
        let in_shape = values[self.x].shape().to_vec();
        add_grad(grads, self.x, Tensor::from_vec(&in_shape, gx).unwrap());
    }
}

impl Graph {
    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let in_shape = self.shape(x).to_vec();
        let s: f64 = self.value(x).data().iter().sum();
        self.push(
            Arc::new(Tensor::scalar(s)),
            Some(Box::new(SumAllOp {
                x: x.0,
                in_shape,
                scale: 1.0,
            })),
        )
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let in_shape = self.shape(x).to_vec();
        let n = self.value(x).len().max(1) as f64;
        let s: f64 = self.value(x).data().iter().sum::<f64>() / n;
        self.push(
            Arc::new(Tensor::scalar(s)),
            Some(Box::new(SumAllOp {
                x: x.0,
                in_shape,
                scale: 1.0 / n,
            })),
        )
    }

    /// Sum over the leading axis, keeping it with extent 1.
    pub fn sum_axis0(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(!shape.is_empty());
        let batch = shape[0];
        let inner: usize = shape[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; inner];
        for b in 0..batch {
            let row = &xv[b * inner..(b + 1) * inner];
            for i in 0..inner {
                out[i] += row[i];
            }
        }
        let mut out_shape = shape.clone();
        out_shape[0] = 1;
        let t = Tensor::from_vec(&out_shape, out).unwrap();
        self.push(Arc::new(t), Some(Box::new(SumAxis0Op { x: x.0, batch })))
    }

    /// Repeat a leading axis of extent 1 to extent `batch`.
    pub fn broadcast_axis0(&mut self, x: Var, batch: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(shape[0], 1, "broadcast_axis0 wants leading extent 1");
        let inner: usize = shape[1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; inner * batch];
        for b in 0..batch {
            out[b * inner..(b + 1) * inner].copy_from_slice(xv);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = batch;
        let t = Tensor::from_vec(&out_shape, out).unwrap();
        self.push(
            Arc::new(t),
            Some(Box::new(BroadcastAxis0Op { x: x.0, batch })),
        )
    }

    /// Append a trailing axis of extent `k` by repetition.
    pub fn broadcast_last(&mut self, x: Var, k: usize) -> Var {
        let shape = self.shape(x).to_vec();
        let n = self.value(x).len();
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * k];
        let chunk = row_chunk(k);
        parallel::chunks_mut_indexed(&mut out, chunk, |ci, rows| {
            let r0 = ci * chunk / k;
            for (j, row) in rows.chunks_mut(k).enumerate() {
                row.fill(xv[r0 + j]);
            }
        });
        let mut out_shape = shape;
        out_shape.push(k);
        let t = Tensor::from_vec(&out_shape, out).unwrap();
        self.push(Arc::new(t), Some(Box::new(BroadcastLastOp { x: x.0, k })))
    }

    fn row_op(&mut self, x: Var, kind: RowKind) -> Var {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().expect("row op needs at least one axis");
        assert!(w > 0);
        let xv = self.value(x).data();
        let rows = xv.len() / w;
        let (out, out_shape) = match kind {
            RowKind::Softmax | RowKind::LogSoftmax => {
                let log = matches!(kind, RowKind::LogSoftmax);
                let mut out = vec![0.0; xv.len()];
                let chunk = row_chunk(w);
                parallel::chunks_mut_indexed(&mut out, chunk, |ci, rows| {
                    let r0 = ci * chunk / w;
                    for (j, row) in rows.chunks_mut(w).enumerate() {
                        let xr = &xv[(r0 + j) * w..(r0 + j + 1) * w];
                        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut z = 0.0;
                        for i in 0..w {
                            z += (xr[i] - m).exp();
                        }
                        let lnz = z.ln();
                        for i in 0..w {
                            row[i] = if log {
                                xr[i] - m - lnz
                            } else {
                                (xr[i] - m).exp() / z
                            };
                        }
                    }
                });
                (out, shape.clone())
            }
            RowKind::LogSumExp => {
                let mut out = vec![0.0; rows];
                let chunk = 1024;
                parallel::chunks_mut_indexed(&mut out, chunk, |ci, cells| {
                    let r0 = ci * chunk;
                    for (j, cell) in cells.iter_mut().enumerate() {
                        let xr = &xv[(r0 + j) * w..(r0 + j + 1) * w];
                        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let mut z = 0.0;
                        for i in 0..w {
                            z += (xr[i] - m).exp();
                        }
                        *cell = m + z.ln();
                    }
                });
                (out, shape[..shape.len() - 1].to_vec())
            }
        };
        let t = Tensor::from_vec(&out_shape, out).unwrap();
        let self_id = self.len();
        self.push(
            Arc::new(t),
            Some(Box::new(RowOp {
                x: x.0,
                width: w,
                kind,
                self_id,
            })),
        )
    }

    /// Softmax over the trailing axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        self.row_op(x, RowKind::Softmax)
    }

    /// Log-softmax over the trailing axis.
    pub fn log_softmax_last(&mut self, x: Var) -> Var {
        self.row_op(x, RowKind::LogSoftmax)
    }

    /// Log-sum-exp over the trailing axis (axis removed).
    pub fn logsumexp_last(&mut self, x: Var) -> Var {
        self.row_op(x, RowKind::LogSumExp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input_gradient;
    use crate::rng::Rng;

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[4, 6], |i| (i as f64 * 0.37).sin() * 3.0));
        let s = g.softmax_last(x);
        for r in 0..4 {
            let sum: f64 = g.value(s).data()[r * 6..(r + 1) * 6].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
        }
    }

    #[test]
    fn logsumexp_matches_naive() {
        let mut g = Graph::new();
        let vals = vec![0.3, -1.2, 2.0, 0.0];
        let x = g.leaf(Tensor::from_vec(&[1, 4], vals.clone()).unwrap());
        let l = g.logsumexp_last(x);
        let naive = vals.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((g.value(l).item() - naive).abs() < 1e-12);
    }

    #[test]
    fn reduction_gradients_match_finite_differences() {
        let mut rng = Rng::new(3);
        let x0 = Tensor::from_fn(&[3, 4], |_| rng.normal());
        for mode in 0..5 {
            let rel = check_input_gradient(std::slice::from_ref(&x0), 0, 1e-5, |g, vars| {
                let x = vars[0];
                match mode {
                    0 => {
                        let s = g.softmax_last(x);
                        let w = g.leaf(Tensor::from_fn(&[3, 4], |i| (i as f64).cos()));
                        let p = g.mul(s, w);
                        g.sum_all(p)
                    }
                    1 => {
                        let s = g.log_softmax_last(x);
                        let w = g.leaf(Tensor::from_fn(&[3, 4], |i| (i as f64).cos()));
                        let p = g.mul(s, w);
                        g.sum_all(p)
                    }
                    2 => {
                        let s = g.logsumexp_last(x);
                        g.sum_all(s)
                    }
                    3 => {
                        let s = g.sum_axis0(x);
                        let q = g.mul(s, s);
                        g.sum_all(q)
                    }
                    4 => {
                        let b = g.broadcast_last(x, 5);
                        let q = g.mul(b, b);
                        g.mean_all(q)
                    }
                    _ => unreachable!(),
                }
            });
            assert!(rel < 1e-6, "mode {mode} rel err {rel}");
        }
    }

    #[test]
    fn broadcast_axis0_gradient() {
        let x0 = Tensor::from_fn(&[1, 5], |i| i as f64 * 0.1);
        let rel = check_input_gradient(&[x0], 0, 1e-5, |g, vars| {
            let b = g.broadcast_axis0(vars[0], 4);
            let sq = g.mul(b, b);
            g.sum_all(sq)
        });
        assert!(rel < 1e-7, "rel err {rel}");
    }
}
