use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{add_grad, Graph, GraphOp, Var};
use crate::parallel;
use crate::tensor::Tensor;

/// Same-padded, stride-1 3-D convolution over `(B, T, C, H, W)` clips with
/// zero padding. Kernels are `(Cout, Cin, kt, kh, kw)`; axes of extent 1 or 3
/// cover every kernel used here (1x1x1 fusion, 1x3x3 spatial, 3x1x1 temporal).
pub fn conv3d_value(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let [bsz, tt, cin, h, ww] = x.dims5()?;
    let ws = w.shape();
    if ws.len() != 5 {
        return Err(Error::dim(format!(
            "conv kernel must be 5-axis, got {ws:?}"
        )));
    }
    let (cout, kcin, kt, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    if kcin != cin {
        return Err(Error::dim(format!(
            "conv input has {cin} channels but kernel expects {kcin}"
        )));
    }
    if kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::dim("conv kernel extents must be odd"));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::dim(format!(
                "conv bias shape {:?} does not match {cout} outputs",
                b.shape()
            )));
        }
    }
    let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
    let plane = h * ww;
    let mut out = vec![0.0; bsz * tt * cout * plane];
    let xv = x.data();
    let wv = w.data();
    parallel::chunks_mut_indexed(&mut out, plane, |idx, out_plane| {
        let co = idx % cout;
        let t = (idx / cout) % tt;
        let b = idx / (cout * tt);
        if let Some(bt) = bias {
            out_plane.fill(bt.data()[co]);
        }
        for dt in 0..kt {
            let ti = t as isize + dt as isize - pt as isize;
            if ti < 0 || ti >= tt as isize {
                continue;
            }
            let ti = ti as usize;
            for ci in 0..cin {
                let in_plane = &xv[((b * tt + ti) * cin + ci) * plane..][..plane];
                for dy in 0..kh {
                    for dx in 0..kw {
                        let wgt = wv[(((co * cin + ci) * kt + dt) * kh + dy) * kw + dx];
                        if wgt == 0.0 {
                            continue;
                        }
                        let y0 = ph.saturating_sub(dy);
                        let y1 = (h + ph - dy).min(h);
                        let x0 = pw.saturating_sub(dx);
                        let x1 = (ww + pw - dx).min(ww);
                        for oy in y0..y1 {
                            let iy = oy + dy - ph;
                            let src = &in_plane[iy * ww + x0 + dx - pw..][..x1 - x0];
                            let dst = &mut out_plane[oy * ww + x0..][..x1 - x0];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wgt * s;
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(&[bsz, tt, cout, h, ww], out)
}

/// Kernel with channel axes swapped and spatial/temporal taps flipped;
/// convolving the output gradient with it yields the input gradient.
fn transpose_flip_kernel(w: &Tensor) -> Tensor {
    let ws = w.shape();
    let (cout, cin, kt, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    let wv = w.data();
    let mut out = vec![0.0; wv.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for dt in 0..kt {
                for dy in 0..kh {
                    for dx in 0..kw {
                        let src = (((co * cin + ci) * kt + dt) * kh + dy) * kw + dx;
                        let dst = (((ci * cout + co) * kt + (kt - 1 - dt)) * kh + (kh - 1 - dy))
                            * kw
                            + (kw - 1 - dx);
                        out[dst] = wv[src];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[cin, cout, kt, kh, kw], out).unwrap()
}

struct Conv3dOp {
    x: usize,
    w: usize,
    b: usize,
}

impl GraphOp for Conv3dOp {
    fn backward(&self, values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let x = &values[self.x];
        let w = &values[self.w];
        let [bsz, tt, cin, h, ww] = x.dims5().unwrap();
        let ws = w.shape();
        let (cout, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
        let (pt, ph, pw) = (kt / 2, kh / 2, kw / 2);
        let plane = h * ww;

        // input gradient: correlation with the transposed flipped kernel
        let wt = transpose_flip_kernel(w);
        let gx = conv3d_value(g, &wt, None).unwrap();
        add_grad(grads, self.x, gx);

        // weight gradient, one output channel per parallel task
        let per_co = cin * kt * kh * kw;
        let mut gw = vec![0.0; cout * per_co];
        let gv = g.data();
        let xv = x.data();
        parallel::chunks_mut_indexed(&mut gw, per_co, |co, gw_co| {
            for b in 0..bsz {
                for t in 0..tt {
                    let g_plane = &gv[((b * tt + t) * cout + co) * plane..][..plane];
                    for dt in 0..kt {
                        let ti = t as isize + dt as isize - pt as isize;
                        if ti < 0 || ti >= tt as isize {
                            continue;
                        }
                        let ti = ti as usize;
                        for ci in 0..cin {
                            let in_plane = &xv[((b * tt + ti) * cin + ci) * plane..][..plane];
                            for dy in 0..kh {
                                for dx in 0..kw {
                                    let y0 = ph.saturating_sub(dy);
                                    let y1 = (h + ph - dy).min(h);
                                    let x0 = pw.saturating_sub(dx);
                                    let x1 = (ww + pw - dx).min(ww);
                                    let mut acc = 0.0;
                                    for oy in y0..y1 {
                                        let iy = oy + dy - ph;
                                        let src = &in_plane[iy * ww + x0 + dx - pw..][..x1 - x0];
                                        let gr = &g_plane[oy * ww + x0..][..x1 - x0];
                                        for (gvv, s) in gr.iter().zip(src) {
                                            acc += gvv * s;
                                        }
                                    }
                                    gw_co[((ci * kt + dt) * kh + dy) * kw + dx] += acc;
                                }
                            }
                        }
                    }
                }
            }
        });
        add_grad(grads, self.w, Tensor::from_vec(w.shape(), gw).unwrap());

        // bias gradient
        let mut gb = vec![0.0; cout];
        for b in 0..bsz {
            for t in 0..tt {
                for (co, gb_co) in gb.iter_mut().enumerate() {
                    let g_plane = &gv[((b * tt + t) * cout + co) * plane..][..plane];
                    *gb_co += g_plane.iter().sum::<f64>();
                }
            }
        }
        add_grad(grads, self.b, Tensor::from_vec(&[cout], gb).unwrap());
    }
}

impl Graph {
    /// Same-padded stride-1 3-D convolution node.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = conv3d_value(self.value(x), self.value(w), Some(self.value(b)))?;
        Ok(self.push(
            Arc::new(out),
            Some(Box::new(Conv3dOp {
                x: x.0,
                w: w.0,
                b: b.0,
            })),
        ))
    }
}
