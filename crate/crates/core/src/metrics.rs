//! Evaluation metrics: PSNR, SSIM, flow-warping error, and a Fréchet
//! feature-distribution distance.
//!
//! The distribution metric is a declared proxy: instead of a pretrained
//! action-recognition network it uses pooled encoder features from this
//! crate's own autoencoder (see [`crate::vae2d::Vae2d::frame_features`]),
//! so its column is named `vfid_proxy` to avoid misreading against
//! full-scale published numbers. The matrix square root inside it runs on a
//! hand-rolled cyclic Jacobi eigensolver to keep the crate dependency-free;
//! tests cross-check it against an independent linear-algebra library.

use ndarray::{Array1, Array2, Axis};
use serde::Serialize;

use crate::flowlab::{warp, FlowField};
use crate::types::{MaskSequence, VideoClip};
use crate::{CoreError, Result};

/// Cap applied when the mean squared error underflows to zero.
pub const PSNR_CAP: f64 = 99.0;
/// Diagonal regularization for covariance fits.
pub const COV_EPS: f64 = 1e-6;
/// Forward-backward flow disagreement (pixels) beyond which a pixel counts
/// as occluded for the warping-error metric.
pub const FB_OCCLUSION_THRESHOLD: f64 = 1.0;

fn check_pair(a: &VideoClip, b: &VideoClip) -> Result<()> {
    if a.data.dim() != b.data.dim() {
        return Err(CoreError::Config(format!(
            "clip shapes differ: {:?} vs {:?}",
            a.data.dim(),
            b.data.dim()
        )));
    }
    Ok(())
}

fn mse_to_db(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Peak signal-to-noise ratio in dB: per-frame MSE over all channels,
/// converted to dB per frame, averaged over frames. Identical frames hit the
/// 99 dB cap.
pub fn psnr(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    check_pair(a, b)?;
    let s = a.frames();
    let mut total = 0.0;
    for i in 0..s {
        let fa = a.data.index_axis(Axis(0), i);
        let fb = b.data.index_axis(Axis(0), i);
        let mse = fa
            .iter()
            .zip(fb.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / fa.len() as f64;
        total += mse_to_db(mse);
    }
    Ok(total / s as f64)
}

/// PSNR restricted to masked pixels. Frames without masked pixels are
/// skipped; a clip with no masked pixels at all reports the cap.
pub fn psnr_masked(a: &VideoClip, b: &VideoClip, masks: &MaskSequence) -> Result<f64> {
    check_pair(a, b)?;
    let (s, _, h, w) = a.data.dim();
    if masks.data.dim() != (s, h, w) {
        return Err(CoreError::Config("mask shape mismatch".into()));
    }
    let mut total = 0.0;
    let mut frames_counted = 0usize;
    for i in 0..s {
        let mut sq = 0.0;
        let mut n = 0usize;
        for y in 0..h {
            for x in 0..w {
                if masks.data[[i, y, x]] == 0 {
                    continue;
                }
                for c in 0..3 {
                    let d = a.data[[i, c, y, x]] - b.data[[i, c, y, x]];
                    sq += d * d;
                    n += 1;
                }
            }
        }
        if n > 0 {
            total += mse_to_db(sq / n as f64);
            frames_counted += 1;
        }
    }
    if frames_counted == 0 {
        Ok(PSNR_CAP)
    } else {
        Ok(total / frames_counted as f64)
    }
}

/// SSIM window: 11x11 Gaussian, sigma 1.5, normalized to sum 1.
fn gaussian_window() -> Array2<f64> {
    let n = 11usize;
    let sigma = 1.5f64;
    let c = (n / 2) as f64;
    let mut w = Array2::zeros((n, n));
    for y in 0..n {
        for x in 0..n {
            let dy = y as f64 - c;
            let dx = x as f64 - c;
            w[[y, x]] = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
        }
    }
    let sum = w.sum();
    w / sum
}

/// Structural similarity: standard formulation with an 11x11 Gaussian
/// window (sigma 1.5), K1=0.01, K2=0.03 on unit dynamic range, computed over
/// valid window positions per channel and averaged.
pub fn ssim(a: &VideoClip, b: &VideoClip) -> Result<f64> {
    check_pair(a, b)?;
    let (s, ch, h, w) = a.data.dim();
    if h < 11 || w < 11 {
        return Err(CoreError::Config(format!(
            "frames {h}x{w} smaller than the 11x11 window"
        )));
    }
    let window = gaussian_window();
    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..s {
        for c in 0..ch {
            let pa = a.data.slice(ndarray::s![i, c, .., ..]);
            let pb = b.data.slice(ndarray::s![i, c, .., ..]);
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let mut mu_a = 0.0;
                    let mut mu_b = 0.0;
                    let mut aa = 0.0;
                    let mut bb = 0.0;
                    let mut ab = 0.0;
                    for wy in 0..11 {
                        for wx in 0..11 {
                            let g = window[[wy, wx]];
                            let va = pa[[y + wy, x + wx]];
                            let vb = pb[[y + wy, x + wx]];
                            mu_a += g * va;
                            mu_b += g * vb;
                            aa += g * va * va;
                            bb += g * vb * vb;
                            ab += g * va * vb;
                        }
                    }
                    let var_a = aa - mu_a * mu_a;
                    let var_b = bb - mu_b * mu_b;
                    let cov = ab - mu_a * mu_b;
                    let v = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                        / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
                    total += v;
                    count += 1;
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Occlusion masks from forward-backward flow disagreement. Entry `i` lives
/// on frame `i+1`'s grid (matching `flows_rev[i]`): a pixel is occluded when
/// following its backward flow and returning along the forward flow misses
/// by more than `threshold` pixels.
pub fn fb_occlusion(
    flows_fwd: &[FlowField],
    flows_rev: &[FlowField],
    threshold: f64,
) -> Result<Vec<Array2<u8>>> {
    if flows_fwd.len() != flows_rev.len() {
        return Err(CoreError::Config("flow list lengths differ".into()));
    }
    let mut out = Vec::with_capacity(flows_rev.len());
    for (fwd, rev) in flows_fwd.iter().zip(flows_rev) {
        let (h, w) = (rev.height(), rev.width());
        if (fwd.height(), fwd.width()) != (h, w) {
            return Err(CoreError::Config("flow resolution mismatch".into()));
        }
        let mut occ = Array2::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                let bx = rev.data[[y, x, 0]];
                let by = rev.data[[y, x, 1]];
                let px = x as f64 + bx;
                let py = y as f64 + by;
                let fx = crate::flowlab::sample_flow_clamped(fwd, px, py, 0);
                let fy = crate::flowlab::sample_flow_clamped(fwd, px, py, 1);
                let ex = bx + fx;
                let ey = by + fy;
                if (ex * ex + ey * ey).sqrt() > threshold {
                    occ[[y, x]] = 1;
                }
            }
        }
        out.push(occ);
    }
    Ok(out)
}

/// Flow-warping error: each frame `i` is warped onto frame `i+1`'s grid by
/// the reverse flow and compared there; the squared differences are averaged
/// over all valid (in-bounds, non-occluded) pixels of all adjacent pairs.
/// The conventional scaled value is `1e3 *` this.
pub fn e_warp(
    clip: &VideoClip,
    flows_rev: &[FlowField],
    occlusion: &[Array2<u8>],
) -> Result<f64> {
    let (s, _, h, w) = clip.data.dim();
    if flows_rev.len() + 1 != s {
        return Err(CoreError::Config(format!(
            "{} reverse flows cannot chain {s} frames",
            flows_rev.len()
        )));
    }
    if occlusion.len() != flows_rev.len() {
        return Err(CoreError::Config("occlusion list length mismatch".into()));
    }
    let mut sq = 0.0;
    let mut n = 0usize;
    for i in 0..s - 1 {
        let prev = clip.data.index_axis(Axis(0), i).to_owned();
        let (warped, validity) = warp(&prev, &flows_rev[i], None)?;
        if occlusion[i].dim() != (h, w) {
            return Err(CoreError::Config("occlusion resolution mismatch".into()));
        }
        let next = clip.data.index_axis(Axis(0), i + 1);
        for y in 0..h {
            for x in 0..w {
                if validity.data[[y, x]] == 0.0 || occlusion[i][[y, x]] != 0 {
                    continue;
                }
                for c in 0..3 {
                    let d = warped[[c, y, x]] - next[[c, y, x]];
                    sq += d * d;
                    n += 1;
                }
            }
        }
    }
    if n == 0 {
        Ok(0.0)
    } else {
        Ok(sq / n as f64)
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix: returns
/// (eigenvalues, eigenvectors as columns) with `A = V diag(l) V^T`.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "matrix must be square");
    let mut m = a.clone();
    let mut v: Array2<f64> = Array2::eye(n);
    let scale = a.iter().map(|x| x.abs()).fold(0.0f64, f64::max).max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j)
            .map(|(i, j)| m[[i, j]] * m[[i, j]])
            .sum();
        if off.sqrt() <= 1e-14 * scale * n as f64 {
            break;
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[[k, p]];
                    let mkq = m[[k, q]];
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[[p, k]];
                    let mqk = m[[q, k]];
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[[k, p]];
                    let vkq = v[[k, q]];
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = Array1::from_iter((0..n).map(|i| m[[i, i]]));
    (eig, v)
}

/// Symmetric positive semidefinite square root via eigendecomposition;
/// negative eigenvalues from roundoff are clamped to zero.
pub fn sqrtm_spd(a: &Array2<f64>) -> Array2<f64> {
    let (eig, v) = symmetric_eigen(a);
    let n = a.nrows();
    let mut out = Array2::zeros((n, n));
    for k in 0..n {
        let lam = eig[k].max(0.0).sqrt();
        for i in 0..n {
            for j in 0..n {
                out[[i, j]] += lam * v[[i, k]] * v[[j, k]];
            }
        }
    }
    out
}

/// Gaussian fit of a feature matrix `[n, d]`: mean vector and unbiased
/// covariance.
pub fn fit_gaussian(features: &Array2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let (n, d) = features.dim();
    if n < 2 {
        return Err(CoreError::Data(format!(
            "need at least 2 feature rows to fit a Gaussian, got {n}"
        )));
    }
    let mu = features.mean_axis(Axis(0)).expect("n > 0");
    let mut cov = Array2::zeros((d, d));
    for row in features.outer_iter() {
        let c = &row - &mu;
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] += c[i] * c[j];
            }
        }
    }
    cov /= (n - 1) as f64;
    Ok((mu, cov))
}

/// Fréchet distance between two Gaussians:
/// `|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa Sb)^{1/2})`. Covariances receive
/// `COV_EPS` diagonal regularization; the result is clamped at zero.
pub fn frechet_distance(
    mu_a: &Array1<f64>,
    cov_a: &Array2<f64>,
    mu_b: &Array1<f64>,
    cov_b: &Array2<f64>,
) -> f64 {
    let d = mu_a.len();
    let mut sa = cov_a.clone();
    let mut sb = cov_b.clone();
    for i in 0..d {
        sa[[i, i]] += COV_EPS;
        sb[[i, i]] += COV_EPS;
    }
    let root_b = sqrtm_spd(&sb);
    let inner = root_b.dot(&sa).dot(&root_b);
    let inner = (&inner + &inner.t()) * 0.5;
    let (eig, _) = symmetric_eigen(&inner);
    let tr_term: f64 = eig.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let dmu: f64 = mu_a
        .iter()
        .zip(mu_b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tra: f64 = (0..d).map(|i| sa[[i, i]]).sum();
    let trb: f64 = (0..d).map(|i| sb[[i, i]]).sum();
    (dmu + tra + trb - 2.0 * tr_term).max(0.0)
}

/// Fréchet distance between the Gaussian fits of two feature sets.
pub fn vfid_proxy(features_a: &Array2<f64>, features_b: &Array2<f64>) -> Result<f64> {
    if features_a.ncols() != features_b.ncols() {
        return Err(CoreError::Config("feature dimensions differ".into()));
    }
    let (mu_a, cov_a) = fit_gaussian(features_a)?;
    let (mu_b, cov_b) = fit_gaussian(features_b)?;
    Ok(frechet_distance(&mu_a, &cov_a, &mu_b, &cov_b))
}

/// Per-clip metric row.
#[derive(Debug, Clone, Serialize)]
pub struct ClipMetrics {
    pub psnr: f64,
    pub psnr_masked: f64,
    pub ssim: f64,
    pub e_warp_x1e3: f64,
}

/// Full evaluation report: per-clip rows, their mean, and the set-level
/// feature-distribution distance.
#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub clips: Vec<(String, ClipMetrics)>,
    pub aggregate: ClipMetrics,
    pub vfid_proxy: f64,
}

impl MetricReport {
    pub fn new(clips: Vec<(String, ClipMetrics)>, vfid: f64) -> Self {
        let n = clips.len().max(1) as f64;
        let mut agg = ClipMetrics {
            psnr: 0.0,
            psnr_masked: 0.0,
            ssim: 0.0,
            e_warp_x1e3: 0.0,
        };
        for (_, m) in &clips {
            agg.psnr += m.psnr;
            agg.psnr_masked += m.psnr_masked;
            agg.ssim += m.ssim;
            agg.e_warp_x1e3 += m.e_warp_x1e3;
        }
        agg.psnr /= n;
        agg.psnr_masked /= n;
        agg.ssim /= n;
        agg.e_warp_x1e3 /= n;
        Self {
            clips,
            aggregate: agg,
            vfid_proxy: vfid,
        }
    }

    /// CSV rendering: one row per clip, aggregate row last (the only row
    /// with a vfid_proxy entry).
    pub fn to_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        wtr.write_record([
            "clip_id",
            "psnr",
            "psnr_masked",
            "ssim",
            "e_warp_x1e3",
            "vfid_proxy",
        ])
        .map_err(|e| CoreError::Data(format!("csv: {e}")))?;
        // Non-finite entries (e.g. a skipped feature-distribution metric)
        // render as empty cells.
        let fmt = |v: f64| {
            if v.is_finite() {
                format!("{v:.6}")
            } else {
                String::new()
            }
        };
        for (id, m) in &self.clips {
            wtr.write_record([
                id.as_str(),
                &fmt(m.psnr),
                &fmt(m.psnr_masked),
                &fmt(m.ssim),
                &fmt(m.e_warp_x1e3),
                "",
            ])
            .map_err(|e| CoreError::Data(format!("csv: {e}")))?;
        }
        let a = &self.aggregate;
        wtr.write_record([
            "aggregate",
            &fmt(a.psnr),
            &fmt(a.psnr_masked),
            &fmt(a.ssim),
            &fmt(a.e_warp_x1e3),
            &fmt(self.vfid_proxy),
        ])
        .map_err(|e| CoreError::Data(format!("csv: {e}")))?;
        let bytes = wtr
            .into_inner()
            .map_err(|e| CoreError::Data(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| CoreError::Data(format!("csv utf8: {e}")))
    }
}
