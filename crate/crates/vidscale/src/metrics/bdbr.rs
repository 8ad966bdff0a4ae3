//! Bjontegaard delta bitrate: cubic fit of log-rate as a function of quality
//! for both curves, integrated analytically over the overlapping quality
//! interval; the result is the average percentage rate difference (negative
//! means the test curve saves rate).

use super::RdCurve;
use crate::error::{Error, Result};

/// Solve a small linear system by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[piv][col].abs() < 1e-12 {
            return Err(Error::Domain("degenerate polynomial fit".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for col in (0..n).rev() {
        let mut s = b[col];
        for k in col + 1..n {
            s -= a[col][k] * x[k];
        }
        x[col] = s / a[col][col];
    }
    Ok(x)
}

/// Least-squares cubic fit of `ln(bpp)` against quality, centered at the
/// curve's mean quality for conditioning. Returns `(center, coefficients)`.
fn fit_log_rate(curve: &RdCurve) -> Result<(f64, [f64; 4])> {
    let pts = &curve.points;
    if pts.len() < 4 {
        return Err(Error::Domain(format!(
            "delta-bitrate needs at least 4 points, got {}",
            pts.len()
        )));
    }
    for p in pts {
        if p.bpp <= 0.0 {
            return Err(Error::Domain("bpp must be positive".into()));
        }
    }
    let center = pts.iter().map(|p| p.quality).sum::<f64>() / pts.len() as f64;
    // normal equations for a cubic in u = quality - center
    let mut ata = vec![vec![0.0; 4]; 4];
    let mut atb = vec![0.0; 4];
    for p in pts {
        let u = p.quality - center;
        let pows = [1.0, u, u * u, u * u * u];
        let y = p.bpp.ln();
        for i in 0..4 {
            for j in 0..4 {
                ata[i][j] += pows[i] * pows[j];
            }
            atb[i] += pows[i] * y;
        }
    }
    let c = solve(ata, atb)?;
    Ok((center, [c[0], c[1], c[2], c[3]]))
}

fn integrate(center: f64, c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let anti = |q: f64| {
        let u = q - center;
        c[0] * u + c[1] * u * u / 2.0 + c[2] * u * u * u / 3.0 + c[3] * u * u * u * u / 4.0
    };
    anti(hi) - anti(lo)
}

/// Average percentage rate difference of `test` against `anchor` at equal
/// quality over their overlapping quality range.
pub fn bdbr(test: &RdCurve, anchor: &RdCurve) -> Result<f64> {
    let (ct, ft) = fit_log_rate(test)?;
    let (ca, fa) = fit_log_rate(anchor)?;
    let qrange = |c: &RdCurve| {
        let lo = c
            .points
            .iter()
            .map(|p| p.quality)
            .fold(f64::INFINITY, f64::min);
        let hi = c
            .points
            .iter()
            .map(|p| p.quality)
            .fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (tlo, thi) = qrange(test);
    let (alo, ahi) = qrange(anchor);
    let lo = tlo.max(alo);
    let hi = thi.min(ahi);
    if hi <= lo {
        return Err(Error::Domain(format!(
            "quality ranges do not overlap: [{tlo}, {thi}] vs [{alo}, {ahi}]"
        )));
    }
    let avg_diff = (integrate(ct, &ft, lo, hi) - integrate(ca, &fa, lo, hi)) / (hi - lo);
    Ok((avg_diff.exp() - 1.0) * 100.0)
}
