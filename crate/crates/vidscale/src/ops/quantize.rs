use std::sync::Arc;

use crate::graph::{add_grad, Graph, GraphOp, Var};
use crate::tensor::Tensor;

/// Clamp to `[0,1]` and round to the 255-level grid (8-bit storage).
pub fn quantize_value(x: &Tensor) -> Tensor {
    x.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// Straight-through quantizer: forward clamps to `[0,1]` and rounds to the
/// 255-level grid; backward passes the gradient unchanged inside `[0,1]` and
/// zero outside (clipped straight-through).
struct QuantizeSteOp {
    x: usize,
}

impl GraphOp for QuantizeSteOp {
    fn backward(&self, values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let xv = values[self.x].data();
        let mut gx = vec![0.0; g.len()];
        for i in 0..gx.len() {
            if (0.0..=1.0).contains(&xv[i]) {
                gx[i] = g.data()[i];
            }
        }
        add_grad(grads, self.x, Tensor::from_vec(g.shape(), gx).unwrap());
    }
}

/// Reparameterized draw from a per-location Gaussian mixture.
///
/// The component is selected by inverse-CDF lookup on the mixture weights
/// (no gradient through the selection); the sample is
/// `mu + sqrt(exp(logvar)/2) * eps`, matching the density whose variance
/// parameter is `exp(logvar)` with effective standard deviation
/// `sqrt(exp(logvar)/2)`. Gradients flow to the selected component's mean and
/// log-variance only.
struct SampleMixtureOp {
    means: usize,
    logvars: usize,
    select: Arc<Vec<u32>>,
    eps: Arc<Vec<f64>>,
    mixtures: usize,
}

impl GraphOp for SampleMixtureOp {
    fn backward(&self, values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        let k = self.mixtures;
        let lv = values[self.logvars].data();
        let n = g.len();
        let mut gmu = vec![0.0; n * k];
        let mut glv = vec![0.0; n * k];
        for o in 0..n {
            let sel = self.select[o] as usize;
            let gv = g.data()[o];
            gmu[o * k + sel] += gv;
            let scale = (lv[o * k + sel].exp() / 2.0).sqrt();
            glv[o * k + sel] += gv * self.eps[o] * 0.5 * scale;
        }
        let shape = values[self.means].shape().to_vec();
        add_grad(grads, self.means, Tensor::from_vec(&shape, gmu).unwrap());
        add_grad(grads, self.logvars, Tensor::from_vec(&shape, glv).unwrap());
    }
}

/// Forward value equals the black-box codec output bit-exactly; the backward
/// Jacobian is the surrogate network's, realized by routing the incoming
/// gradient unchanged to the surrogate's output node.
struct CodecPassthroughOp {
    surrogate_out: usize,
}

impl GraphOp for CodecPassthroughOp {
    fn backward(&self, _values: &[Arc<Tensor>], g: &Tensor, grads: &mut [Option<Tensor>]) {
        add_grad(grads, self.surrogate_out, g.clone());
    }
}

impl Graph {
    /// Straight-through 255-level quantizer node.
    pub fn quantize_ste(&mut self, x: Var) -> Var {
        let out = quantize_value(self.value(x));
        self.push(Arc::new(out), Some(Box::new(QuantizeSteOp { x: x.0 })))
    }

    /// Draw one reparameterized sample per location from a mixture field.
    ///
    /// `weights` are the simplex mixture weights (used only for component
    /// selection), `uniforms` the per-location selection draws, `noise` the
    /// per-location standard-normal draws. All three are plain tensors shaped
    /// like the output; `means`/`logvars` carry a trailing component axis.
    pub fn sample_mixture(
        &mut self,
        weights: &Tensor,
        means: Var,
        logvars: Var,
        uniforms: &Tensor,
        noise: &Tensor,
    ) -> Var {
        let k = *self.shape(means).last().expect("means need component axis");
        let n = uniforms.len();
        assert_eq!(self.value(means).len(), n * k, "means shape mismatch");
        assert_eq!(weights.len(), n * k, "weights shape mismatch");
        assert_eq!(noise.len(), n, "noise shape mismatch");
        let wv = weights.data();
        let mv = self.value(means).data();
        let lv = self.value(logvars).data();
        let mut select = vec![0u32; n];
        let mut out = vec![0.0; n];
        for o in 0..n {
            let u = uniforms.data()[o];
            let row = &wv[o * k..(o + 1) * k];
            let mut acc = 0.0;
            let mut sel = k - 1;
            for (j, &w) in row.iter().enumerate() {
                acc += w;
                if u < acc {
                    sel = j;
                    break;
                }
            }
            select[o] = sel as u32;
            let scale = (lv[o * k + sel].exp() / 2.0).sqrt();
            out[o] = mv[o * k + sel] + scale * noise.data()[o];
        }
        let out_shape: Vec<usize> = self.shape(means)[..self.shape(means).len() - 1].to_vec();
        let t = Tensor::from_vec(&out_shape, out).unwrap();
        self.push(
            Arc::new(t),
            Some(Box::new(SampleMixtureOp {
                means: means.0,
                logvars: logvars.0,
                select: Arc::new(select),
                eps: Arc::new(noise.data().to_vec()),
                mixtures: k,
            })),
        )
    }

    /// Codec passthrough: forward = `codec_output` (bit-exact), backward =
    /// identity into `surrogate_out`.
    pub fn codec_passthrough(&mut self, codec_output: Tensor, surrogate_out: Var) -> Var {
        assert_eq!(
            codec_output.shape(),
            self.shape(surrogate_out),
            "codec/surrogate shape mismatch"
        );
        self.push(
            Arc::new(codec_output),
            Some(Box::new(CodecPassthroughOp {
                surrogate_out: surrogate_out.0,
            })),
        )
    }
}
