//! Frame-level error and quality metrics.
//!
//! Reported MSE and MAE sum over the pixels of each frame and average over
//! samples and frames; the training loss is the element mean.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Aggregate metrics over a batch of predicted sequences.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameMetrics {
    pub mse: f64,
    pub mae: f64,
    pub ssim: f64,
    pub psnr: f64,
}

fn check(pred: &Tensor, target: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize, usize)> {
    pred.expect_same_shape(target, op)?;
    pred.dims5(op)
}

/// Mean squared error over all elements (the training objective).
pub fn mse_objective(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target, "mse")?;
    let n = pred.numel() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Per-frame pixel-sum squared error averaged over samples and frames.
pub fn reported_mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let (b, t, ..) = check(pred, target, "reported_mse")?;
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / (b * t) as f64)
}

fn clamp01(t: &Tensor) -> Tensor {
    t.map(|v| v.clamp(0.0, 1.0))
}

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` image.
fn filter(img: &[f64], h: usize, w: usize, g: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| g[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| g[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// SSIM of one single-channel image pair with values in `[0, 1]`.
pub fn ssim_image(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size.is_multiple_of(2) {
        size -= 1;
    }
    let g = gaussian_window(size);
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let (mu_a, ho, wo) = filter(a, h, w, &g);
    let (mu_b, ..) = filter(b, h, w, &g);
    let (e_aa, ..) = filter(&prod(a, a), h, w, &g);
    let (e_bb, ..) = filter(&prod(b, b), h, w, &g);
    let (e_ab, ..) = filter(&prod(a, b), h, w, &g);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for i in 0..ho * wo {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let num = (2.0 * (ma * mb) + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    total / (ho * wo) as f64
}

/// MSE, MAE, SSIM and PSNR over `[B, T, C, H, W]`, after clamping both
/// inputs to `[0, 1]`.
pub fn frame_metrics(pred: &Tensor, target: &Tensor) -> Result<FrameMetrics> {
    let per = per_frame_metrics(pred, target)?;
    let n = per.len() as f64;
    let mut m = FrameMetrics::default();
    for f in &per {
        m.mse += f.mse;
        m.mae += f.mae;
        m.ssim += f.ssim;
        m.psnr += f.psnr;
    }
    m.mse /= n;
    m.mae /= n;
    m.ssim /= n;
    m.psnr /= n;
    Ok(m)
}

/// Metrics for each future frame index, averaged over samples.
pub fn per_frame_metrics(pred: &Tensor, target: &Tensor) -> Result<Vec<FrameMetrics>> {
    let (bs, ts, c, h, w) = check(pred, target, "frame_metrics")?;
    let (p, q) = (clamp01(pred), clamp01(target));
    let (p, q) = (p.data(), q.data());
    let plane = h * w;
    let frame = c * plane;
    let mut out = vec![FrameMetrics::default(); ts];
    for b in 0..bs {
        for (t, acc) in out.iter_mut().enumerate() {
            let off = (b * ts + t) * frame;
            let (pf, qf) = (&p[off..off + frame], &q[off..off + frame]);
            let sse: f64 = pf.iter().zip(qf).map(|(x, y)| (x - y) * (x - y)).sum();
            let sae: f64 = pf.iter().zip(qf).map(|(x, y)| (x - y).abs()).sum();
            let mean_se = sse / frame as f64;
            let psnr = if mean_se == 0.0 {
                PSNR_CAP_DB
            } else {
                (10.0 * (1.0 / mean_se).log10()).min(PSNR_CAP_DB)
            };
            let ssim = (0..c)
                .map(|ci| {
                    let o = ci * plane;
                    ssim_image(&pf[o..o + plane], &qf[o..o + plane], h, w)
                })
                .sum::<f64>()
                / c as f64;
            acc.mse += sse;
            acc.mae += sae;
            acc.psnr += psnr;
            acc.ssim += ssim;
        }
    }
    for acc in &mut out {
        acc.mse /= bs as f64;
        acc.mae /= bs as f64;
        acc.psnr /= bs as f64;
        acc.ssim /= bs as f64;
    }
    Ok(out)
}

/// Ratio between reported MSE and the element-mean objective.
pub fn pixel_factor(shape: &[usize]) -> Result<f64> {
    match shape {
        [_, _, c, h, w] => Ok((c * h * w) as f64),
        _ => Err(Error::shape("pixel_factor", format!("expected [B,T,C,H,W], got {shape:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen::<f64>())
    }

    #[test]
    fn identical_inputs() {
        let x = random(&[2, 3, 1, 16, 16], 1);
        let m = frame_metrics(&x, &x).unwrap();
        assert_eq!(m, FrameMetrics { mse: 0.0, mae: 0.0, ssim: 1.0, psnr: 100.0 });
    }

    #[test]
    fn all_zero_vs_all_one_64() {
        let p = Tensor::zeros(&[1, 1, 1, 64, 64]);
        let t = Tensor::ones(&[1, 1, 1, 64, 64]);
        assert_eq!(reported_mse(&p, &t).unwrap(), 4096.0);
        assert_eq!(frame_metrics(&p, &t).unwrap().mae, 4096.0);
    }

    #[test]
    fn half_gray_psnr() {
        let p = Tensor::full(&[1, 2, 1, 8, 8], 0.5);
        let t = Tensor::zeros(&[1, 2, 1, 8, 8]);
        let m = frame_metrics(&p, &t).unwrap();
        assert!((m.psnr - 6.020599913279624).abs() < 1e-12);
    }

    #[test]
    fn loss_and_report_differ_by_pixel_count() {
        let p = random(&[3, 2, 2, 5, 7], 2);
        let t = random(&[3, 2, 2, 5, 7], 3);
        let factor = pixel_factor(p.shape()).unwrap();
        let a = mse_objective(&p, &t).unwrap() * factor;
        let b = reported_mse(&p, &t).unwrap();
        assert!((a - b).abs() <= 1e-12 * b);
    }

    #[test]
    fn clamps_before_measuring() {
        let p = Tensor::full(&[1, 1, 1, 4, 4], 1.7);
        let t = Tensor::ones(&[1, 1, 1, 4, 4]);
        assert_eq!(frame_metrics(&p, &t).unwrap().mse, 0.0);
    }

    #[test]
    fn shape_mismatch_errors() {
        assert!(frame_metrics(&Tensor::zeros(&[1, 1, 1, 4, 4]), &Tensor::zeros(&[1, 2, 1, 4, 4])).is_err());
        assert!(mse_objective(&Tensor::zeros(&[3]), &Tensor::zeros(&[4])).is_err());
    }

    #[test]
    fn per_frame_rows() {
        let t = Tensor::zeros(&[2, 3, 1, 4, 4]);
        let mut p = t.clone();
        for v in &mut p.data_mut()[16..32] {
            *v = 1.0;
        }
        let rows = per_frame_metrics(&p, &t).unwrap();
        assert_eq!(rows.iter().map(|r| r.mse).collect::<Vec<_>>(), vec![0.0, 8.0, 0.0]);
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(seed in any::<u64>(), h in 4usize..14, w in 4usize..14) {
            let a = random(&[h * w], seed);
            let b = random(&[h * w], seed ^ 0xabcdef);
            let ab = ssim_image(a.data(), b.data(), h, w);
            let ba = ssim_image(b.data(), a.data(), h, w);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&ab));
        }

        #[test]
        fn metrics_nonnegative(seed in any::<u64>()) {
            let m = frame_metrics(&random(&[1, 2, 1, 6, 6], seed), &random(&[1, 2, 1, 6, 6], seed + 1)).unwrap();
            prop_assert!(m.mse >= 0.0 && m.mae >= 0.0 && m.psnr >= 0.0);
        }
    }
}
