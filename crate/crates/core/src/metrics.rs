//! PSNR and SSIM for frames with pixel range `[0, 1]`.

use crate::error::{Error, Result};
use crate::frame::Frame;
use crate::scalar::Scalar;

/// Reported PSNR when the two frames (nearly) coincide.
pub const PSNR_CAP_DB: f64 = 99.0;
const MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_dims<T: Scalar>(a: &Frame<T>, b: &Frame<T>) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::dim(
            "frame dimensions",
            format!("{}x{}", a.width(), a.height()),
            format!("{}x{}", b.width(), b.height()),
        ));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &Frame<T>, b: &Frame<T>) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data().len().max(1) as f64;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / n)
}

/// `10 log10(1 / MSE)` in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &Frame<T>, b: &Frame<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a `w x h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut tmp = vec![0.0; ow * h];
    for r in 0..h {
        let row = &plane[r * w..(r + 1) * w];
        for c in 0..ow {
            tmp[r * ow + c] = taps.iter().zip(&row[c..c + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * tmp[(r + i) * ow + c])
                .sum();
        }
    }
    out
}

/// Mean SSIM over all valid 11x11 Gaussian windows (`sigma = 1.5`,
/// `K1 = 0.01`, `K2 = 0.03`, `L = 1`).
pub fn ssim<T: Scalar>(a: &Frame<T>, b: &Frame<T>) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Config(format!(
            "SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let pa: Vec<f64> = a.data().iter().map(|v| v.as_f64()).collect();
    let pb: Vec<f64> = b.data().iter().map(|v| v.as_f64()).collect();
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };

    let mu_a = filter_valid(&pa, w, h, &taps);
    let mu_b = filter_valid(&pb, w, h, &taps);
    let e_aa = filter_valid(&prod(&pa, &pa), w, h, &taps);
    let e_bb = filter_valid(&prod(&pb, &pb), w, h, &taps);
    let e_ab = filter_valid(&prod(&pa, &pb), w, h, &taps);

    let c1 = (SSIM_K1 * 1.0).powi(2);
    let c2 = (SSIM_K2 * 1.0).powi(2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| ssim_term(mu_a[i], mu_b[i], e_aa[i], e_bb[i], e_ab[i], c1, c2))
        .sum();
    Ok(total / n as f64)
}

fn ssim_term(mu_a: f64, mu_b: f64, e_aa: f64, e_bb: f64, e_ab: f64, c1: f64, c2: f64) -> f64 {
    let var_a = e_aa - mu_a * mu_a;
    let var_b = e_bb - mu_b * mu_b;
    let cov = e_ab - mu_a * mu_b;
    ((2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2))
        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2))
}
