//! Image-quality metrics between predicted and ground-truth volumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_dims(pred: &Volume, truth: &Volume) -> Result<()> {
    if pred.dims() != truth.dims() {
        return Err(Error::SizeMismatch(format!(
            "prediction is {:?}, truth is {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    Ok(())
}

fn pairs<'a>(pred: &'a Volume, truth: &'a Volume) -> impl Iterator<Item = (f64, f64)> + 'a {
    pred.data().iter().zip(truth.data()).map(|(&p, &t)| (p as f64, t as f64))
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Volume, truth: &Volume, peak: f64) -> Result<f64> {
    check_dims(pred, truth)?;
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::Config(format!("PSNR peak must be positive, got {peak}")));
    }
    let mse = pairs(pred, truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Global zero-normalized cross correlation.
pub fn ncc_metric(pred: &Volume, truth: &Volume) -> Result<f64> {
    check_dims(pred, truth)?;
    let n = pred.len() as f64;
    let (mut sp, mut st) = (0.0, 0.0);
    for (p, t) in pairs(pred, truth) {
        sp += p;
        st += t;
    }
    let (mp, mt) = (sp / n, st / n);
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in pairs(pred, truth) {
        cov += (p - mp) * (t - mt);
        vp += (p - mp).powi(2);
        vt += (t - mt).powi(2);
    }
    if vt == 0.0 {
        return Err(Error::UndefinedMetric("NCC of a constant ground truth".into()));
    }
    if vp == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (vp * vt).sqrt()).clamp(-1.0, 1.0))
}

/// `sum (pred - truth)^2 / sum truth^2`.
pub fn nmse(pred: &Volume, truth: &Volume) -> Result<f64> {
    check_dims(pred, truth)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (p, t) in pairs(pred, truth) {
        num += (p - t).powi(2);
        den += t * t;
    }
    if den == 0.0 {
        return Err(Error::UndefinedMetric("NMSE of an all-zero ground truth".into()));
    }
    Ok(num / den)
}

/// Sums over every full `w`-wide window along one axis.
fn box_axis(data: &[f64], dims: [usize; 3], axis: usize, w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] + 1 - w;
    let stride = [1, dims[0], dims[0] * dims[1]];
    let out_stride = [1, out_dims[0], out_dims[0] * out_dims[1]];
    let mut out = vec![0.0; out_dims.iter().product()];
    let (a1, a2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    for j in 0..dims[a2] {
        for i in 0..dims[a1] {
            let base = i * stride[a1] + j * stride[a2];
            let out_base = i * out_stride[a1] + j * out_stride[a2];
            let at = |k: usize| data[base + k * stride[axis]];
            let mut s: f64 = (0..w).map(at).sum();
            out[out_base] = s;
            for k in 1..out_dims[axis] {
                s += at(k + w - 1) - at(k - 1);
                out[out_base + k * out_stride[axis]] = s;
            }
        }
    }
    (out, out_dims)
}

fn window_means(data: &[f64], dims: [usize; 3], w: usize) -> Vec<f64> {
    let (a, d) = box_axis(data, dims, 0, w);
    let (b, d) = box_axis(&a, d, 1, w);
    let (c, _) = box_axis(&b, d, 2, w);
    let n = (w * w * w) as f64;
    c.into_iter().map(|s| s / n).collect()
}

/// Mean SSIM over all full `window^3` uniform windows, dynamic range `range`.
pub fn ssim3d(pred: &Volume, truth: &Volume, window: usize, k1: f64, k2: f64, range: f64) -> Result<f64> {
    check_dims(pred, truth)?;
    if window == 0 || pred.dims().iter().any(|&n| n < window) {
        return Err(Error::Validation(format!(
            "SSIM window {window} does not fit in {:?}",
            pred.dims()
        )));
    }
    let dims = pred.dims();
    let x: Vec<f64> = pred.data().iter().map(|&v| v as f64).collect();
    let y: Vec<f64> = truth.data().iter().map(|&v| v as f64).collect();
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = window_means(&x, dims, window);
    let my = window_means(&y, dims, window);
    let mxx = window_means(&prod(&x, &x), dims, window);
    let myy = window_means(&prod(&y, &y), dims, window);
    let mxy = window_means(&prod(&x, &y), dims, window);
    let c1 = (k1 * range).powi(2);
    let c2 = (k2 * range).powi(2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// [`ssim3d`] with the default window and constants.
pub fn ssim(pred: &Volume, truth: &Volume, range: f64) -> Result<f64> {
    ssim3d(pred, truth, SSIM_WINDOW, SSIM_K1, SSIM_K2, range)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ncc: f64,
    pub ssim: f64,
    pub nmse: f64,
    /// `nmse` in units of 1e-2.
    pub nmse_1e2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub t: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub per_frame: Vec<FrameMetrics>,
    pub mean: Metrics,
}

/// All four metrics; `peak` is the PSNR peak and the SSIM dynamic range.
pub fn compute_metrics(pred: &Volume, truth: &Volume, peak: f64) -> Result<Metrics> {
    let nmse = nmse(pred, truth)?;
    Ok(Metrics {
        psnr: psnr(pred, truth, peak)?,
        ncc: ncc_metric(pred, truth)?,
        ssim: ssim(pred, truth, peak)?,
        nmse,
        nmse_1e2: nmse * 100.0,
    })
}

/// Per-frame metrics for `(t, prediction, truth)` triples and their means.
pub fn evaluate_frames<'a>(
    frames: impl IntoIterator<Item = (f64, &'a Volume, &'a Volume)>,
    peak: f64,
) -> Result<MetricsReport> {
    let per_frame = frames
        .into_iter()
        .map(|(t, p, g)| compute_metrics(p, g, peak).map(|metrics| FrameMetrics { t, metrics }))
        .collect::<Result<Vec<_>>>()?;
    if per_frame.is_empty() {
        return Err(Error::Validation("no frames to evaluate".into()));
    }
    let n = per_frame.len() as f64;
    let mean_of = |f: fn(&Metrics) -> f64| per_frame.iter().map(|m| f(&m.metrics)).sum::<f64>() / n;
    let mean = Metrics {
        psnr: mean_of(|m| m.psnr),
        ncc: mean_of(|m| m.ncc),
        ssim: mean_of(|m| m.ssim),
        nmse: mean_of(|m| m.nmse),
        nmse_1e2: mean_of(|m| m.nmse_1e2),
    };
    Ok(MetricsReport {
        schema_version: crate::optimizer::SCHEMA_VERSION,
        per_frame,
        mean,
    })
}
