use crate::error::{Error, Result};

/// Dense row-major `f64` tensor. Video clips use the 5-axis layout
/// `(batch, time, channel, height, width)`; mixture-parameter fields append a
/// trailing component axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Extract the value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// The five clip axes `(B, T, C, H, W)`.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        if self.shape.len() != 5 {
            return Err(Error::dim(format!(
                "expected a 5-axis clip, got shape {:?}",
                self.shape
            )));
        }
        Ok([
            self.shape[0],
            self.shape[1],
            self.shape[2],
            self.shape[3],
            self.shape[4],
        ])
    }

    pub fn at5(&self, b: usize, t: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, tt, cc, hh, ww] = self.dims5().expect("at5 on non-clip");
        self.data[(((b * tt + t) * cc + c) * hh + y) * ww + x]
    }

    pub fn set5(&mut self, b: usize, t: usize, c: usize, y: usize, x: usize, v: f64) {
        let [_, tt, cc, hh, ww] = self.dims5().expect("set5 on non-clip");
        self.data[(((b * tt + t) * cc + c) * hh + y) * ww + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_in_place(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_in_place shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn mean_sq_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "mean_sq_diff shape mismatch");
        let n = self.data.len().max(1) as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Check that a pixel-space clip has 3 channels and values in `[0, 1]`.
pub fn check_pixel_clip(t: &Tensor) -> Result<()> {
    let [_, _, c, _, _] = t.dims5()?;
    if c != 3 {
        return Err(Error::dim(format!(
            "pixel clip must have 3 channels, got {c}"
        )));
    }
    if !t.data().iter().all(|&v| (0.0..=1.0).contains(&v)) {
        return Err(Error::Domain("pixel clip values must lie in [0, 1]".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn clip_indexing_round_trips() {
        let mut t = Tensor::zeros(&[1, 2, 3, 4, 5]);
        t.set5(0, 1, 2, 3, 4, 7.5);
        assert_eq!(t.at5(0, 1, 2, 3, 4), 7.5);
        assert_eq!(t.data().iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn pixel_clip_check() {
        let ok = Tensor::full(&[1, 1, 3, 2, 2], 0.5);
        assert!(check_pixel_clip(&ok).is_ok());
        let bad_c = Tensor::full(&[1, 1, 4, 2, 2], 0.5);
        assert!(check_pixel_clip(&bad_c).is_err());
        let bad_v = Tensor::full(&[1, 1, 3, 2, 2], 1.5);
        assert!(check_pixel_clip(&bad_v).is_err());
    }
}
