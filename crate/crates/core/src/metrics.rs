//! Image-quality metrics (PSNR, SSIM) and the expression-distance binning
//! used by the evaluation reports.
//!
//! Metrics operate on float images before 8-bit quantization so tolerance
//! budgets are free of rounding noise. SSIM follows the standard windowed
//! form: 11×11 Gaussian window (σ = 1.5), C1 = 0.01², C2 = 0.03² on a [0, 1]
//! intensity range, computed on Rec. 601 luma, averaged over windows that lie
//! fully inside the image.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::imageio::FloatImage;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Rec. 601 luma weights for the grayscale conversion SSIM runs on.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

fn check_same_size(a: &FloatImage, b: &FloatImage) -> Result<()> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::InvalidArgument {
            context: "metrics",
            message: format!(
                "image sizes differ: {}x{} vs {}x{}",
                a.w, a.h, b.w, b.h
            ),
        });
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all pixels and channels; identical
/// images report `f64::INFINITY`.
pub fn psnr(a: &FloatImage, b: &FloatImage) -> Result<f64> {
    check_same_size(a, b)?;
    let n = (a.data.len()) as f64;
    let mse: f64 = a
        .data
        .iter()
        .zip(b.data.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Rec. 601 luma plane of an image, `[h, w]`.
pub fn luma(img: &FloatImage) -> Array2<f64> {
    Array2::from_shape_fn((img.h, img.w), |(y, x)| {
        let p = img.data.row(y * img.w + x);
        LUMA_WEIGHTS[0] * p[0] + LUMA_WEIGHTS[1] * p[1] + LUMA_WEIGHTS[2] * p[2]
    })
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *t;
    }
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

/// Separable valid-mode Gaussian filter: `[h, w] -> [h-10, w-10]`.
fn gauss_valid(img: &Array2<f64>) -> Array2<f64> {
    let taps = gaussian_taps();
    let (h, w) = img.dim();
    let mut rows = Array2::zeros((h, w - SSIM_WINDOW + 1));
    for y in 0..h {
        for x in 0..w - SSIM_WINDOW + 1 {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * img[(y, x + k)];
            }
            rows[(y, x)] = acc;
        }
    }
    let mut out = Array2::zeros((h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1));
    for y in 0..h - SSIM_WINDOW + 1 {
        for x in 0..w - SSIM_WINDOW + 1 {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * rows[(y + k, x)];
            }
            out[(y, x)] = acc;
        }
    }
    out
}

/// Structural similarity index between two images, mean over all fully
/// interior 11×11 windows of the luma planes.
pub fn ssim(a: &FloatImage, b: &FloatImage) -> Result<f64> {
    check_same_size(a, b)?;
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        return Err(Error::InvalidArgument {
            context: "ssim",
            message: format!(
                "image {}x{} smaller than the {}x{} window",
                a.w, a.h, SSIM_WINDOW, SSIM_WINDOW
            ),
        });
    }
    let x = luma(a);
    let y = luma(b);
    let mu_x = gauss_valid(&x);
    let mu_y = gauss_valid(&y);
    let xx = gauss_valid(&(&x * &x));
    let yy = gauss_valid(&(&y * &y));
    let xy = gauss_valid(&(&x * &y));
    let mut total = 0.0;
    let n = mu_x.len() as f64;
    for ((m_x, m_y), ((s_xx, s_yy), s_xy)) in mu_x
        .iter()
        .zip(mu_y.iter())
        .zip(xx.iter().zip(yy.iter()).zip(xy.iter()))
    {
        let var_x = s_xx - m_x * m_x;
        let var_y = s_yy - m_y * m_y;
        let cov = s_xy - m_x * m_y;
        let num = (2.0 * m_x * m_y + SSIM_C1) * (2.0 * cov + SSIM_C2);
        let den = (m_x * m_x + m_y * m_y + SSIM_C1) * (var_x + var_y + SSIM_C2);
        total += num / den;
    }
    Ok(total / n)
}

/// Per-bin aggregate of an evaluation run.
#[derive(Debug, Clone)]
pub struct BinStats {
    pub count: usize,
    pub mean_distance: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

/// Metric report grouped into equal-count expression-distance bins.
#[derive(Debug, Clone)]
pub struct BinnedReport {
    pub bins: Vec<BinStats>,
}

/// Assign each frame to an equal-count quantile bin of its distance
/// (ascending; ties broken by frame index). Returns one bin index per frame.
pub fn quantile_bins(distances: &[f64], n_bins: usize) -> Vec<usize> {
    assert!(n_bins >= 1, "need at least one bin");
    let n = distances.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        distances[a]
            .partial_cmp(&distances[b])
            .expect("finite distances")
            .then(a.cmp(&b))
    });
    let mut bins = vec![0; n];
    for (rank, &frame) in order.iter().enumerate() {
        bins[frame] = (rank * n_bins) / n;
    }
    bins
}

/// Group per-frame metrics by quantile bins of their distances.
pub fn binned_report(
    distances: &[f64],
    psnrs: &[f64],
    ssims: &[f64],
    n_bins: usize,
) -> Result<BinnedReport> {
    if distances.is_empty() {
        return Err(Error::InvalidArgument {
            context: "binned_report",
            message: "empty test set".into(),
        });
    }
    assert_eq!(distances.len(), psnrs.len());
    assert_eq!(distances.len(), ssims.len());
    let assignment = quantile_bins(distances, n_bins);
    let used = *assignment.iter().max().unwrap() + 1;
    let mut bins = vec![
        BinStats {
            count: 0,
            mean_distance: 0.0,
            mean_psnr: 0.0,
            mean_ssim: 0.0,
        };
        used
    ];
    for (frame, &b) in assignment.iter().enumerate() {
        bins[b].count += 1;
        bins[b].mean_distance += distances[frame];
        bins[b].mean_psnr += psnrs[frame];
        bins[b].mean_ssim += ssims[frame];
    }
    for b in &mut bins {
        let c = b.count as f64;
        b.mean_distance /= c;
        b.mean_psnr /= c;
        b.mean_ssim /= c;
    }
    Ok(BinnedReport { bins })
}
