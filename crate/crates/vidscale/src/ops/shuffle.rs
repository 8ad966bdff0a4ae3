use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{add_grad, Graph, GraphOp, Var};
use crate::parallel;
use crate::tensor::Tensor;

const UNUSED: u32 = u32::MAX;

/// Injective index map: `out[i] = in[map[i]]`, each input index used at most
/// once. Pixel (un)shuffling, channel slicing and the mixture-head split are
/// all instances; the inverse map gives an exact gather-based backward pass.
struct GatherOp {
    x: usize,
    inv: Arc<Vec<u32>>, // in index -> out index (UNUSED if dropped)
}

impl GraphOp for GatherOp {
    fn backward(&self, values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let in_shape = values[self.x].shape().to_vec();
        let inv = &self.inv;
        let gv = g.data();
        let mut gx = vec![0.0; inv.len()];
        parallel::chunks_mut_indexed(&mut gx, 1 << 14, |ci, chunk| {
            let base = ci << 14;
            for (j, v) in chunk.iter_mut().enumerate() {
                let o = inv[base + j];
                if o != UNUSED {
                    *v = gv[o as usize];
                }
            }
        });
        add_grad(grads, self.x, Tensor::from_vec(&in_shape, gx).unwrap());
    }
}

fn gather_value(x: &Tensor, out_shape: &[usize], map: &[u32]) -> Tensor {
    let xv = x.data();
    let mut out = vec![0.0; map.len()];
    parallel::chunks_mut_indexed(&mut out, 1 << 14, |ci, chunk| {
        let base = ci << 14;
        for (j, v) in chunk.iter_mut().enumerate() {
            *v = xv[map[base + j] as usize];
        }
    });
    Tensor::from_vec(out_shape, out).unwrap()
}

fn invert_map(map: &[u32], in_len: usize) -> Vec<u32> {
    let mut inv = vec![UNUSED; in_len];
    for (o, &i) in map.iter().enumerate() {
        debug_assert_eq!(inv[i as usize], UNUSED, "gather map must be injective");
        inv[i as usize] = o as u32;
    }
    inv
}

fn unshuffle_map(dims: [usize; 5], k: usize) -> (Vec<usize>, Vec<u32>) {
    let [b, t, c, h, w] = dims;
    let (oh, ow) = (h / k, w / k);
    let oc = c * k * k;
    let out_shape = vec![b, t, oc, oh, ow];
    let mut map = Vec::with_capacity(b * t * oc * oh * ow);
    for bi in 0..b {
        for ti in 0..t {
            for co in 0..oc {
                let ci = co / (k * k);
                let dy = (co % (k * k)) / k;
                let dx = co % k;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let iy = oy * k + dy;
                        let ix = ox * k + dx;
                        let i = (((bi * t + ti) * c + ci) * h + iy) * w + ix;
                        map.push(i as u32);
                    }
                }
            }
        }
    }
    (out_shape, map)
}

fn check_unshuffle(x: &Tensor, k: usize) -> Result<[usize; 5]> {
    let d = x.dims5()?;
    if k < 1 {
        return Err(Error::dim("shuffle factor must be >= 1"));
    }
    if d[3] % k != 0 || d[4] % k != 0 {
        return Err(Error::dim(format!(
            "spatial dims {}x{} not divisible by {k}",
            d[3], d[4]
        )));
    }
    Ok(d)
}

fn check_shuffle(x: &Tensor, k: usize) -> Result<[usize; 5]> {
    let d = x.dims5()?;
    if k < 1 {
        return Err(Error::dim("shuffle factor must be >= 1"));
    }
    if d[2] % (k * k) != 0 {
        return Err(Error::dim(format!(
            "channel count {} not divisible by {}^2",
            d[2], k
        )));
    }
    Ok(d)
}

/// Space-to-channel rearrangement: `(B,T,C,H,W) -> (B,T,C*k^2,H/k,W/k)`.
/// Output channel index is `c*k^2 + dy*k + dx` for source offset `(dy, dx)`.
pub fn pixel_unshuffle_value(x: &Tensor, k: usize) -> Result<Tensor> {
    let d = check_unshuffle(x, k)?;
    let (out_shape, map) = unshuffle_map(d, k);
    Ok(gather_value(x, &out_shape, &map))
}

/// Exact inverse of [`pixel_unshuffle_value`].
pub fn pixel_shuffle_value(x: &Tensor, k: usize) -> Result<Tensor> {
    let d = check_shuffle(x, k)?;
    let [b, t, c, h, w] = d;
    let target = [b, t, c / (k * k), h * k, w * k];
    // build the unshuffle map of the *target* and invert it
    let (shape_check, map) = unshuffle_map(target, k);
    debug_assert_eq!(shape_check, x.shape());
    let inv = invert_map(&map, target.iter().product());
    Ok(gather_value(x, &target, &inv))
}

impl Graph {
    fn gather(&mut self, x: Var, out_shape: &[usize], map: Vec<u32>) -> Var {
        let out = gather_value(self.value(x), out_shape, &map);
        let inv = invert_map(&map, self.value(x).len());
        self.push(
            Arc::new(out),
            Some(Box::new(GatherOp {
                x: x.0,
                inv: Arc::new(inv),
            })),
        )
    }

    pub fn pixel_unshuffle(&mut self, x: Var, k: usize) -> Result<Var> {
        let d = check_unshuffle(self.value(x), k)?;
        let (out_shape, map) = unshuffle_map(d, k);
        Ok(self.gather(x, &out_shape, map))
    }

    pub fn pixel_shuffle(&mut self, x: Var, k: usize) -> Result<Var> {
        let d = check_shuffle(self.value(x), k)?;
        let [b, t, c, h, w] = d;
        let target = [b, t, c / (k * k), h * k, w * k];
        let (_, map) = unshuffle_map(target, k);
        let inv = invert_map(&map, target.iter().product());
        Ok(self.gather(x, &target, inv))
    }

    /// Select a single element of a tensor as a `[1]` node.
    pub fn select_element(&mut self, x: Var, i: usize) -> Var {
        assert!(i < self.value(x).len(), "element index out of bounds");
        self.gather(x, &[1], vec![i as u32])
    }

    /// Select a channel range `[lo, hi)` of a clip.
    pub fn select_channels(&mut self, x: Var, lo: usize, hi: usize) -> Result<Var> {
        let [b, t, c, h, w] = self.value(x).dims5()?;
        if lo >= hi || hi > c {
            return Err(Error::dim(format!(
                "channel range {lo}..{hi} out of bounds for {c} channels"
            )));
        }
        let out_shape = vec![b, t, hi - lo, h, w];
        let plane = h * w;
        let mut map = Vec::with_capacity(b * t * (hi - lo) * plane);
        for bi in 0..b {
            for ti in 0..t {
                for ci in lo..hi {
                    let base = ((bi * t + ti) * c + ci) * plane;
                    for p in 0..plane {
                        map.push((base + p) as u32);
                    }
                }
            }
        }
        Ok(self.gather(x, &out_shape, map))
    }

    /// Select every `stride`-th channel starting at `first`, reordered to a
    /// trailing axis: `(B,T,C,H,W) -> (B,T,C/stride... )`. Used to split the
    /// mixture head output `(B,T,Ch*3K,H,W)` into per-parameter fields
    /// `(B,T,Ch,H,W,K)`.
    pub fn split_mixture_params(
        &mut self,
        x: Var,
        hf_channels: usize,
        mixtures: usize,
        which: usize,
    ) -> Result<Var> {
        let [b, t, c, h, w] = self.value(x).dims5()?;
        let k = mixtures;
        if c != hf_channels * 3 * k {
            return Err(Error::dim(format!(
                "head output has {c} channels, expected {} ({} HF channels x 3 x {k})",
                hf_channels * 3 * k,
                hf_channels
            )));
        }
        assert!(which < 3);
        let out_shape = vec![b, t, hf_channels, h, w, k];
        let plane = h * w;
        let mut map = Vec::with_capacity(b * t * hf_channels * plane * k);
        for bi in 0..b {
            for ti in 0..t {
                for ch in 0..hf_channels {
                    for p in 0..plane {
                        for kk in 0..k {
                            let ci = ch * 3 * k + which * k + kk;
                            let i = (((bi * t + ti) * c + ci) * plane) + p;
                            map.push(i as u32);
                        }
                    }
                }
            }
        }
        Ok(self.gather(x, &out_shape, map))
    }

    /// Concatenate clips along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let first = self.value(parts[0]).dims5()?;
        let [b, t, _, h, w] = first;
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let d = self.value(p).dims5()?;
            if [d[0], d[1], d[3], d[4]] != [b, t, h, w] {
                return Err(Error::dim(format!(
                    "concat shape mismatch: {:?} vs {:?}",
                    d, first
                )));
            }
            channels.push(d[2]);
        }
        let c_total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = vec![0.0; b * t * c_total * plane];
        for bi in 0..b {
            for ti in 0..t {
                let mut coff = 0;
                for (pi, &p) in parts.iter().enumerate() {
                    let c = channels[pi];
                    let src = self.value(p).data();
                    let s = &src[((bi * t + ti) * c) * plane..][..c * plane];
                    out[(((bi * t + ti) * c_total) + coff) * plane..][..c * plane]
                        .copy_from_slice(s);
                    coff += c;
                }
            }
        }
        let tensor = Tensor::from_vec(&[b, t, c_total, h, w], out).unwrap();
        Ok(self.push(
            Arc::new(tensor),
            Some(Box::new(ConcatCOp {
                parents: parts.iter().map(|v| v.0).collect(),
                channels,
                dims: [b, t, c_total, h, w],
            })),
        ))
    }
}

struct ConcatCOp {
    parents: Vec<usize>,
    channels: Vec<usize>,
    dims: [usize; 5],
}

impl GraphOp for ConcatCOp {
    fn backward(&self, _values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let [b, t, c_total, h, w] = self.dims;
        let plane = h * w;
        let gv = g.data();
        let mut coff = 0;
        for (pi, &p) in self.parents.iter().enumerate() {
            let c = self.channels[pi];
            let mut gp = vec![0.0; b * t * c * plane];
            for bi in 0..b {
                for ti in 0..t {
                    let src = &gv[(((bi * t + ti) * c_total) + coff) * plane..][..c * plane];
                    gp[((bi * t + ti) * c) * plane..][..c * plane].copy_from_slice(src);
                }
            }
            add_grad(grads, p, Tensor::from_vec(&[b, t, c, h, w], gp).unwrap());
            coff += c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn unshuffle_shape_contract() {
        let x = Tensor::zeros(&[1, 1, 3, 4, 4]);
        let y = pixel_unshuffle_value(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 12, 2, 2]);
    }

    #[test]
    fn single_nonzero_entry_lands_at_declared_layout() {
        // nonzero at (c,y,x) -> channel c*k^2 + (y%k)*k + (x%k), position (y/k, x/k)
        let mut x = Tensor::zeros(&[1, 1, 3, 4, 4]);
        let (c, y, xx) = (2, 3, 1);
        x.set5(0, 0, c, y, xx, 1.0);
        let k = 2;
        let u = pixel_unshuffle_value(&x, k).unwrap();
        let expect_c = c * k * k + (y % k) * k + (xx % k);
        for co in 0..12 {
            for oy in 0..2 {
                for ox in 0..2 {
                    let v = u.at5(0, 0, co, oy, ox);
                    if co == expect_c && oy == y / k && ox == xx / k {
                        assert_eq!(v, 1.0);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn divisibility_violations_error() {
        let x = Tensor::zeros(&[1, 1, 3, 5, 4]);
        assert!(pixel_unshuffle_value(&x, 2).is_err());
        let y = Tensor::zeros(&[1, 1, 7, 4, 4]);
        assert!(pixel_shuffle_value(&y, 2).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn shuffle_inverts_unshuffle(
            b in 1usize..3, t in 1usize..3, c in 1usize..4,
            hb in 1usize..4, wb in 1usize..4, k in 1usize..4, seed in any::<u64>()
        ) {
            let (h, w) = (hb * k, wb * k);
            let mut rng = Rng::new(seed);
            let x = Tensor::from_fn(&[b, t, c, h, w], |_| rng.uniform());
            let u = pixel_unshuffle_value(&x, k).unwrap();
            let back = pixel_shuffle_value(&u, k).unwrap();
            prop_assert_eq!(back.data(), x.data());
        }
    }

    #[test]
    fn graph_shuffle_gradient_is_exact_permutation() {
        let mut rng = Rng::new(21);
        let x0 = Tensor::from_fn(&[1, 1, 2, 4, 4], |_| rng.normal());
        let probe = Tensor::from_fn(&[1, 1, 8, 2, 2], |i| i as f64 * 0.1);
        let rel = crate::gradcheck::check_input_gradient(&[x0], 0, 1e-5, move |g, vars| {
            let u = g.pixel_unshuffle(vars[0], 2).unwrap();
            let p = g.leaf(probe.clone());
            let m = g.mul(u, p);
            g.sum_all(m)
        });
        assert!(rel < 1e-9, "rel err {rel}");
    }

    #[test]
    fn concat_and_select_round_trip() {
        let mut rng = Rng::new(4);
        let a0 = Tensor::from_fn(&[1, 2, 3, 2, 2], |_| rng.uniform());
        let b0 = Tensor::from_fn(&[1, 2, 5, 2, 2], |_| rng.uniform());
        let mut g = Graph::new();
        let a = g.leaf(a0.clone());
        let b = g.leaf(b0.clone());
        let cat = g.concat_channels(&[a, b]).unwrap();
        assert_eq!(g.shape(cat), &[1, 2, 8, 2, 2]);
        let a_back = g.select_channels(cat, 0, 3).unwrap();
        let b_back = g.select_channels(cat, 3, 8).unwrap();
        assert_eq!(g.value(a_back).data(), a0.data());
        assert_eq!(g.value(b_back).data(), b0.data());

        // gradient splits cleanly
        let sq = g.mul(b_back, b_back);
        let s = g.sum_all(sq);
        let grads = g.backward(s);
        let ga = grads.get(a);
        assert!(ga.is_none() || ga.unwrap().data().iter().all(|&v| v == 0.0));
        let gb = grads.get(b).unwrap();
        let expect = b0.map(|v| 2.0 * v);
        assert!(gb.max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn split_mixture_params_layout() {
        // 2 HF channels, K=2: head channels = [c0: w0 w1 m0 m1 s0 s1][c1: ...]
        let (b, t, ch, k, h, w) = (1, 1, 2, 2, 1, 1);
        let c = ch * 3 * k;
        let x0 = Tensor::from_fn(&[b, t, c, h, w], |i| i as f64);
        let mut g = Graph::new();
        let x = g.leaf(x0);
        let wv = g.split_mixture_params(x, ch, k, 0).unwrap();
        let mv = g.split_mixture_params(x, ch, k, 1).unwrap();
        let sv = g.split_mixture_params(x, ch, k, 2).unwrap();
        assert_eq!(g.shape(wv), &[1, 1, 2, 1, 1, 2]);
        assert_eq!(g.value(wv).data(), &[0.0, 1.0, 6.0, 7.0]);
        assert_eq!(g.value(mv).data(), &[2.0, 3.0, 8.0, 9.0]);
        assert_eq!(g.value(sv).data(), &[4.0, 5.0, 10.0, 11.0]);
    }
}
