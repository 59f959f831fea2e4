//! Full-reference quality measures for evaluation: PSNR and windowed SSIM.
//!
//! The windowed SSIM here is the standard one and is separate from the
//! whole-image SSIM used inside the training objective.

use rayon::prelude::*;

use crate::losses::{SSIM_C1, SSIM_C2};
use crate::tensor::{Shape, Tensor};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const METRICS_CSV_HEADER: &str = "name,psnr_db,ssim";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("shape mismatch: {0} vs {1}")]
    Shape(Shape, Shape),
    #[error("image {h}x{w} is smaller than the {window}x{window} SSIM window")]
    TooSmall { h: usize, w: usize, window: usize },
    #[error("no image pairs to evaluate")]
    Empty,
}

/// `10 log10(1 / MSE)` over every element. Identical inputs give `+inf`.
pub fn psnr(e: &Tensor, g: &Tensor) -> Result<f64, MetricError> {
    if e.shape() != g.shape() {
        return Err(MetricError::Shape(e.shape(), g.shape()));
    }
    if e.is_empty() {
        return Err(MetricError::Empty);
    }
    let sse: f64 = e.data().iter().zip(g.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let mse = sse / e.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

fn gaussian_window() -> Vec<f64> {
    let mu = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - mu).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable blur of one `h x w` plane.
fn blur_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, k: &[f64]) -> f64 {
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = blur_valid(a, h, w, k);
    let mu_b = blur_valid(b, h, w, k);
    let aa = blur_valid(&prod(&|x, _| x * x), h, w, k);
    let bb = blur_valid(&prod(&|_, y| y * y), h, w, k);
    let ab = blur_valid(&prod(&|x, y| x * y), h, w, k);
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        sum += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    sum / mu_a.len() as f64
}

/// Mean SSIM over all valid 11x11 Gaussian-window positions, computed per
/// channel and averaged over channels and images.
pub fn ssim_windowed(e: &Tensor, g: &Tensor) -> Result<f64, MetricError> {
    if e.shape() != g.shape() {
        return Err(MetricError::Shape(e.shape(), g.shape()));
    }
    let s = e.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(MetricError::TooSmall {
            h: s.h,
            w: s.w,
            window: SSIM_WINDOW,
        });
    }
    if s.n == 0 || s.c == 0 {
        return Err(MetricError::Empty);
    }
    if e == g {
        return Ok(1.0);
    }
    let k = gaussian_window();
    let plane = |t: &Tensor, n: usize, c: usize| -> Vec<f64> {
        let mut p = Vec::with_capacity(s.h * s.w);
        for y in 0..s.h {
            for x in 0..s.w {
                p.push(t.get(n, y, x, c));
            }
        }
        p
    };
    let mut total = 0.0;
    for n in 0..s.n {
        for c in 0..s.c {
            total += ssim_plane(&plane(e, n, c), &plane(g, n, c), s.h, s.w, &k);
        }
    }
    Ok(total / (s.n * s.c) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    pub name: String,
    /// `(psnr_db, ssim)` or the reason the pair could not be scored.
    pub result: Result<(f64, f64), String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<PairMetrics>,
    /// Means over the pairs that scored; NaN when none did.
    pub psnr_db: f64,
    pub ssim: f64,
}

impl MetricReport {
    pub fn valid_count(&self) -> usize {
        self.per_image.iter().filter(|p| p.result.is_ok()).count()
    }

    /// `name,psnr_db,ssim` rows followed by a `MEAN` row. Unscored pairs
    /// print `nan`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_CSV_HEADER);
        out.push('\n');
        for p in &self.per_image {
            let (ps, ss) = p.result.clone().unwrap_or((f64::NAN, f64::NAN));
            out.push_str(&format!("{},{},{}\n", p.name, fmt_value(ps), fmt_value(ss)));
        }
        out.push_str(&format!("MEAN,{},{}\n", fmt_value(self.psnr_db), fmt_value(self.ssim)));
        out
    }
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.6}")
    }
}

/// Scores every `(name, enhanced, reference)` triple. A failing pair is
/// recorded with its error and left out of the means.
pub fn evaluate_pairs(pairs: &[(String, Tensor, Tensor)]) -> Result<MetricReport, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    let per_image: Vec<PairMetrics> = pairs
        .par_iter()
        .map(|(name, e, g)| PairMetrics {
            name: name.clone(),
            result: psnr(e, g)
                .and_then(|p| Ok((p, ssim_windowed(e, g)?)))
                .map_err(|err| err.to_string()),
        })
        .collect();
    Ok(summarize(per_image))
}

/// Aggregates already-scored rows, preserving their order.
pub fn summarize(per_image: Vec<PairMetrics>) -> MetricReport {
    let ok: Vec<(f64, f64)> = per_image.iter().filter_map(|p| p.result.clone().ok()).collect();
    let n = ok.len() as f64;
    let (psnr_db, ssim) = if ok.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (
            ok.iter().map(|r| r.0).sum::<f64>() / n,
            ok.iter().map(|r| r.1).sum::<f64>() / n,
        )
    };
    MetricReport {
        per_image,
        psnr_db,
        ssim,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, seed: u64) -> Tensor {
        Tensor::random_uniform(shape, 0.25, 0.75, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn psnr_of_known_offsets() {
        let g = Tensor::full(Shape::new(1, 4, 4, 3), 0.25);
        let e = g.map(|v| v + 0.1);
        assert!((psnr(&e, &g).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&g, &g).unwrap(), f64::INFINITY);
        let e = g.map(|v| v + 0.5);
        // MSE 0.25 -> 10 log10 4.
        assert!((psnr(&e, &g).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn ssim_identity_symmetry_and_inversion() {
        let s = Shape::new(1, 16, 16, 3);
        let x = random(s, 1);
        let y = random(s, 2);
        assert_eq!(ssim_windowed(&x, &x).unwrap(), 1.0);
        let a = ssim_windowed(&x, &y).unwrap();
        let b = ssim_windowed(&y, &x).unwrap();
        assert!((a - b).abs() < 1e-12);
        let inv = x.map(|v| 1.0 - v);
        assert!(ssim_windowed(&x, &inv).unwrap() < 0.5);
    }

    #[test]
    fn ssim_matches_a_direct_window_sum() {
        let s = Shape::new(1, 12, 13, 1);
        let x = random(s, 3);
        let y = random(s, 4);
        // Two-dimensional weights evaluated directly at each of the 2x3 positions.
        let mut total = 0.0;
        let mut count = 0.0;
        for oy in 0..2 {
            for ox in 0..3 {
                let (mut wsum, mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for i in 0..11 {
                    for j in 0..11 {
                        let d2 = (i as f64 - 5.0).powi(2) + (j as f64 - 5.0).powi(2);
                        let w = (-d2 / (2.0 * 1.5 * 1.5)).exp();
                        let a = x.get(0, oy + i, ox + j, 0);
                        let b = y.get(0, oy + i, ox + j, 0);
                        wsum += w;
                        mx += w * a;
                        my += w * b;
                        xx += w * a * a;
                        yy += w * b * b;
                        xy += w * a * b;
                    }
                }
                let (mx, my) = (mx / wsum, my / wsum);
                let vx = xx / wsum - mx * mx;
                let vy = yy / wsum - my * my;
                let c = xy / wsum - mx * my;
                total += ((2.0 * mx * my + SSIM_C1) * (2.0 * c + SSIM_C2))
                    / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                count += 1.0;
            }
        }
        assert!((ssim_windowed(&x, &y).unwrap() - total / count).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let t = Tensor::zeros(Shape::new(1, 10, 20, 3));
        assert!(matches!(ssim_windowed(&t, &t), Err(MetricError::TooSmall { .. })));
    }

    #[test]
    fn report_means_and_csv() {
        let g = Tensor::full(Shape::new(1, 11, 11, 3), 0.5);
        let pairs = vec![
            ("a.png".to_string(), g.map(|v| v + 0.1), g.clone()),
            ("b.png".to_string(), g.map(|v| v + 0.01), g.clone()),
            ("c.png".to_string(), Tensor::zeros(Shape::new(1, 2, 2, 3)), g.clone()),
        ];
        let r = evaluate_pairs(&pairs).unwrap();
        assert_eq!(r.valid_count(), 2);
        // 20 dB and 40 dB.
        assert!((r.psnr_db - 30.0).abs() < 1e-9);
        let csv = r.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "name,psnr_db,ssim");
        assert_eq!(lines[3], "c.png,nan,nan");
        assert!(lines[4].starts_with("MEAN,30.000000,"));
        assert_eq!(evaluate_pairs(&[]), Err(MetricError::Empty));
    }

    #[test]
    fn identical_pair_is_perfect() {
        let g = random(Shape::new(1, 11, 11, 3), 9);
        let r = evaluate_pairs(&[("x".into(), g.clone(), g)]).unwrap();
        assert_eq!(r.psnr_db, f64::INFINITY);
        assert_eq!(r.ssim, 1.0);
        assert!(r.to_csv().contains("x,inf,1.000000"));
    }
}
