//! Quality and rate metrics: PSNR (RGB and luminance), SSIM and MS-SSIM,
//! bits per pixel, and Bjontegaard delta bitrate over rate-distortion curves.

mod bdbr;
mod ssim;

pub use bdbr::bdbr;
pub use ssim::{ms_ssim, ssim};

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::codec::BitstreamReport;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR is capped here for identical inputs.
pub const PSNR_CAP: f64 = 99.0;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Channel {
    Rgb,
    /// BT.601 full-range luminance (0.299, 0.587, 0.114).
    Y,
}

/// Luminance plane of a clip: `(B, T, 1, H, W)`.
pub fn luminance(clip: &Tensor) -> Result<Tensor> {
    let [b, t, c, h, w] = clip.dims5()?;
    if c != 3 {
        return Err(Error::dim(format!("luminance wants 3 channels, got {c}")));
    }
    let mut out = Tensor::zeros(&[b, t, 1, h, w]);
    for bi in 0..b {
        for ti in 0..t {
            for y in 0..h {
                for x in 0..w {
                    let v = 0.299 * clip.at5(bi, ti, 0, y, x)
                        + 0.587 * clip.at5(bi, ti, 1, y, x)
                        + 0.114 * clip.at5(bi, ti, 2, y, x);
                    out.set5(bi, ti, 0, y, x, v);
                }
            }
        }
    }
    Ok(out)
}

fn for_channel(a: &Tensor, b: &Tensor, channel: Channel) -> Result<(Tensor, Tensor)> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "metric inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    match channel {
        Channel::Rgb => Ok((a.clone(), b.clone())),
        Channel::Y => Ok((luminance(a)?, luminance(b)?)),
    }
}

/// Peak signal-to-noise ratio on `[0,1]`-scaled values, in dB.
pub fn psnr(a: &Tensor, b: &Tensor, channel: Channel) -> Result<f64> {
    let (a, b) = for_channel(a, b, channel)?;
    let mse = a.mean_sq_diff(&b);
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Bits per pixel from a bitstream report (dimensions are whatever the
/// report carries; rate-distortion evaluation fills in the original
/// pre-downscale dimensions so curves stay comparable to the anchor).
pub fn bpp(report: &BitstreamReport) -> f64 {
    bpp_for_dims(
        report.encoded_bytes,
        report.frame_count,
        report.width,
        report.height,
    )
}

pub fn bpp_for_dims(encoded_bytes: u64, frames: usize, width: usize, height: usize) -> f64 {
    encoded_bytes as f64 * 8.0 / (frames as f64 * width as f64 * height as f64)
}

/// One rate-distortion sample.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
}

/// An ordered rate-distortion curve (strictly increasing bpp).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RdCurve {
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(mut points: Vec<RdPoint>) -> Result<Self> {
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        for w in points.windows(2) {
            if w[1].bpp <= w[0].bpp {
                return Err(Error::Domain(format!(
                    "rate-distortion curve needs strictly increasing bpp (got {} then {})",
                    w[0].bpp, w[1].bpp
                )));
            }
        }
        Ok(RdCurve { points })
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = BufWriter::new(std::fs::File::create(path)?);
        for p in &self.points {
            writeln!(f, "{}\t{}", p.bpp, p.quality)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        let mut points = Vec::new();
        for (ln, line) in BufReader::new(f).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (b, q) = line.split_once('\t').ok_or_else(|| {
                Error::Config(format!(
                    "{}: line {}: expected <bpp>\\t<quality>",
                    path.display(),
                    ln + 1
                ))
            })?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Config(format!("{}: line {}: {e}", path.display(), ln + 1)))
            };
            points.push(RdPoint {
                bpp: parse(b)?,
                quality: parse(q)?,
            });
        }
        RdCurve::new(points)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn psnr_examples() {
        let a = Tensor::full(&[1, 1, 3, 4, 4], 0.5);
        assert_eq!(psnr(&a, &a, Channel::Rgb).unwrap(), 99.0);
        let b = a.map(|v| v + 0.1);
        let p = psnr(&a, &b, Channel::Rgb).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "psnr {p}");
    }

    #[test]
    fn psnr_matches_mse_oracle_and_is_symmetric() {
        let mut rng = Rng::new(3);
        let a = Tensor::from_fn(&[1, 2, 3, 6, 6], |_| rng.uniform());
        let b = Tensor::from_fn(&[1, 2, 3, 6, 6], |_| rng.uniform());
        let p = psnr(&a, &b, Channel::Rgb).unwrap();
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64;
        let oracle = 10.0 * (1.0 / mse).log10();
        assert!((p - oracle).abs() < 1e-6);
        assert_eq!(p, psnr(&b, &a, Channel::Rgb).unwrap());
    }

    #[test]
    fn luminance_mode_uses_bt601() {
        let mut a = Tensor::zeros(&[1, 1, 3, 1, 1]);
        a.set5(0, 0, 0, 0, 0, 1.0); // pure red
        let y = luminance(&a).unwrap();
        assert!((y.at5(0, 0, 0, 0, 0) - 0.299).abs() < 1e-12);
        let b = Tensor::zeros(&[1, 1, 3, 1, 1]);
        let p = psnr(&a, &b, Channel::Y).unwrap();
        let expect = 10.0 * (1.0 / (0.299f64 * 0.299)).log10();
        assert!((p - expect).abs() < 1e-9);
    }

    #[test]
    fn bpp_arithmetic() {
        let r = BitstreamReport {
            encoded_bytes: 1000,
            frame_count: 1,
            width: 100,
            height: 100,
        };
        assert!((bpp(&r) - 0.8).abs() < 1e-12);
        let r2 = BitstreamReport {
            encoded_bytes: 2000,
            ..r
        };
        assert!((bpp(&r2) - 1.6).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn psnr_symmetry(seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            let a = Tensor::from_fn(&[1, 1, 3, 4, 4], |_| rng.uniform());
            let b = Tensor::from_fn(&[1, 1, 3, 4, 4], |_| rng.uniform());
            prop_assert_eq!(psnr(&a, &b, Channel::Rgb).unwrap(), psnr(&b, &a, Channel::Rgb).unwrap());
        }
    }

    #[test]
    fn curve_io_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.tsv");
        let curve = RdCurve::new(vec![
            RdPoint {
                bpp: 0.1,
                quality: 30.0,
            },
            RdPoint {
                bpp: 0.2,
                quality: 33.0,
            },
            RdPoint {
                bpp: 0.4,
                quality: 36.0,
            },
            RdPoint {
                bpp: 0.8,
                quality: 39.0,
            },
        ])
        .unwrap();
        curve.write_tsv(&path).unwrap();
        let back = RdCurve::read_tsv(&path).unwrap();
        assert_eq!(back, curve);
    }

    #[test]
    fn non_increasing_bpp_rejected() {
        assert!(RdCurve::new(vec![
            RdPoint {
                bpp: 0.1,
                quality: 30.0
            },
            RdPoint {
                bpp: 0.1,
                quality: 33.0
            },
        ])
        .is_err());
    }
}
