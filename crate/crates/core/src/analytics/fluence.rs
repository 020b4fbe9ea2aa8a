use serde::{Deserialize, Serialize};

use crate::dose::FluenceStack;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Similarity of a predicted fluence stack to a reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluenceMetrics {
    /// dB; `f64::INFINITY` for identical stacks
    pub psnr: f64,
    pub ssim: f64,
    pub mae: f64,
}

/// PSNR with peak = reference maximum, mean SSIM over control points with an
/// 11x11 Gaussian window (sigma 1.5, valid positions only), and MAE.
pub fn fluence_metrics<T: Scalar>(pred: &FluenceStack<T>, reference: &FluenceStack<T>) -> Result<FluenceMetrics> {
    if !pred.same_shape(reference) {
        return Err(Error::Argument("prediction and reference stacks differ in shape".into()));
    }
    if pred.height < WINDOW || pred.width < WINDOW {
        return Err(Error::Argument(format!("maps must be at least {WINDOW}x{WINDOW} for SSIM")));
    }
    let n = pred.values.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, r) in pred.values.iter().zip(&reference.values) {
        let d = p.f64() - r.f64();
        se += d * d;
        ae += d.abs();
    }
    let peak = reference.values.iter().fold(0.0f64, |m, v| m.max(v.f64()));
    let mse = se / n;
    let psnr = if mse == 0.0 { f64::INFINITY } else { 10.0 * (peak * peak / mse).log10() };

    // a blank reference still needs a nonzero dynamic range
    let range = if peak > 0.0 { peak } else { 1.0 };
    let kernel = gaussian_window();
    let ssim = (0..pred.n_cp)
        .map(|cp| map_ssim(pred.slice(cp), reference.slice(cp), pred.width, pred.height, range, &kernel))
        .sum::<f64>()
        / pred.n_cp as f64;
    Ok(FluenceMetrics { psnr, ssim, mae: ae / n })
}

fn gaussian_window() -> Vec<f64> {
    let c = (WINDOW / 2) as f64;
    let mut w: Vec<f64> = (0..WINDOW * WINDOW)
        .map(|k| {
            let (y, x) = ((k / WINDOW) as f64 - c, (k % WINDOW) as f64 - c);
            (-(x * x + y * y) / (2.0 * SIGMA * SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

fn map_ssim<T: Scalar>(a: &[T], b: &[T], width: usize, height: usize, range: f64, kernel: &[f64]) -> f64 {
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=height - WINDOW {
        for x0 in 0..=width - WINDOW {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (k, &w) in kernel.iter().enumerate() {
                let idx = (y0 + k / WINDOW) * width + x0 + k % WINDOW;
                let (x, y) = (a[idx].f64(), b[idx].f64());
                ma += w * x;
                mb += w * y;
                saa += w * x * x;
                sbb += w * y * y;
                sab += w * x * y;
            }
            let va = saa - ma * ma;
            let vb = sbb - mb * mb;
            let cov = sab - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}
