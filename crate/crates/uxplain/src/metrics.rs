//! Saliency-map comparison metrics: single-scale SSIM, Spearman rank
//! correlation for trend verdicts, and cosine similarity for tabular
//! diagnostics.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SSIM parameterization. Defaults are the original ones: 11x11 Gaussian
/// window with sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range L = 1 after
/// the maps are jointly min-max normalized.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SsimParams {
    pub window_size: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window_size: 11, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

/// Which window was actually used, recorded in output metadata because maps
/// smaller than the Gaussian window fall back to a single uniform window of
/// the map size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsimWindow {
    Gaussian { size: usize },
    UniformFull { height: usize, width: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimScore {
    pub value: f64,
    pub window: SsimWindow,
}

/// Mean structural similarity between two equally-shaped 2-D maps.
///
/// Both maps are min-max normalized with a *common* min and max over the
/// pair before comparison, so a global loss of magnitude in one map
/// registers as dissimilarity. Constant pairs are stabilized by K1/K2 and
/// never divide by zero.
pub fn ssim(a: &Tensor, b: &Tensor, params: &SsimParams) -> Result<SsimScore> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "ssim expects equal shapes, got {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let [h, w] = *a.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "ssim expects 2-D maps, got {:?}",
            a.shape()
        )));
    };
    a.ensure_finite("ssim input a")?;
    b.ensure_finite("ssim input b")?;

    let (na, nb) = normalize_jointly(a.data(), b.data());

    let (weights, wh, ww, window) = if h >= params.window_size && w >= params.window_size {
        let g = gaussian_window(params.window_size, params.sigma);
        (g, params.window_size, params.window_size, SsimWindow::Gaussian { size: params.window_size })
    } else {
        let n = h * w;
        (vec![1.0 / n as f64; n], h, w, SsimWindow::UniformFull { height: h, width: w })
    };

    let c1 = (params.k1).powi(2); // L = 1
    let c2 = (params.k2).powi(2);

    let mut total = 0.0f64;
    let mut count = 0usize;
    for y in 0..=(h - wh) {
        for x in 0..=(w - ww) {
            let mut mu1 = 0.0f64;
            let mut mu2 = 0.0f64;
            for i in 0..wh {
                for j in 0..ww {
                    let wv = weights[i * ww + j];
                    mu1 += wv * na[(y + i) * w + (x + j)];
                    mu2 += wv * nb[(y + i) * w + (x + j)];
                }
            }
            let mut var1 = 0.0f64;
            let mut var2 = 0.0f64;
            let mut cov = 0.0f64;
            for i in 0..wh {
                for j in 0..ww {
                    let wv = weights[i * ww + j];
                    let da = na[(y + i) * w + (x + j)] - mu1;
                    let db = nb[(y + i) * w + (x + j)] - mu2;
                    var1 += wv * da * da;
                    var2 += wv * db * db;
                    cov += wv * da * db;
                }
            }
            let num = (2.0 * mu1 * mu2 + c1) * (2.0 * cov + c2);
            let den = (mu1 * mu1 + mu2 * mu2 + c1) * (var1 + var2 + c2);
            total += num / den;
            count += 1;
        }
    }
    Ok(SsimScore { value: total / count as f64, window })
}

/// Min-max normalize both buffers with the min and max of the pair.
fn normalize_jointly(a: &[f32], b: &[f32]) -> (Vec<f64>, Vec<f64>) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in a.iter().chain(b) {
        lo = lo.min(v as f64);
        hi = hi.max(v as f64);
    }
    let range = hi - lo;
    if range <= 0.0 {
        return (vec![0.0; a.len()], vec![0.0; b.len()]);
    }
    (
        a.iter().map(|&v| (v as f64 - lo) / range).collect(),
        b.iter().map(|&v| (v as f64 - lo) / range).collect(),
    )
}

/// Normalized 2-D Gaussian window, weights summing to 1.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let mut w = Vec::with_capacity(size * size);
    for i in 0..size {
        for j in 0..size {
            let dy = i as f64 - c;
            let dx = j as f64 - c;
            w.push((-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp());
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpearmanRho {
    pub rho: f64,
    /// True when either sequence is constant: rank correlation is undefined
    /// there and `rho` is reported as 0.
    pub undefined: bool,
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<SpearmanRho> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch(format!(
            "spearman expects equal lengths, got {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "spearman needs at least 3 points, got {}",
            xs.len()
        )));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx <= 0.0 || vy <= 0.0 {
        return Ok(SpearmanRho { rho: 0.0, undefined: true });
    }
    Ok(SpearmanRho { rho: cov / (vx * vy).sqrt(), undefined: false })
}

/// Ranks 1..n with ties sharing the average of their positions.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("NaN in rank data"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSimilarity {
    pub value: f64,
    /// True when either vector is all zeros.
    pub undefined: bool,
}

/// Cosine similarity between two equal-length saliency vectors. Diagnostic
/// only; never used in verdicts.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<CosineSimilarity> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine expects equal lengths, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        dot += x as f64 * y as f64;
        na += x as f64 * x as f64;
        nb += y as f64 * y as f64;
    }
    if na <= 0.0 || nb <= 0.0 {
        return Ok(CosineSimilarity { value: 0.0, undefined: true });
    }
    Ok(CosineSimilarity { value: dot / (na.sqrt() * nb.sqrt()), undefined: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn random_map(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = rng_from(seed);
        Tensor::new(vec![h, w], (0..h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        for seed in 0..4 {
            let x = random_map(32, 32, seed);
            let s = ssim(&x, &x, &SsimParams::default()).unwrap();
            assert_eq!(s.value, 1.0);
        }
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random_map(20, 24, 1);
        let b = random_map(20, 24, 2);
        let p = SsimParams::default();
        assert_eq!(ssim(&a, &b, &p).unwrap().value, ssim(&b, &a, &p).unwrap().value);
    }

    #[test]
    fn ssim_small_maps_use_uniform_full_window() {
        let a = random_map(6, 6, 3);
        let b = random_map(6, 6, 4);
        let s = ssim(&a, &b, &SsimParams::default()).unwrap();
        assert_eq!(s.window, SsimWindow::UniformFull { height: 6, width: 6 });
        assert!(s.value.abs() <= 1.0);
    }

    #[test]
    fn ssim_constant_pair_is_stable() {
        let a = Tensor::filled(vec![16, 16], 0.7);
        let b = Tensor::filled(vec![16, 16], 0.7);
        let s = ssim(&a, &b, &SsimParams::default()).unwrap();
        assert_eq!(s.value, 1.0);
    }

    #[test]
    fn ssim_affine_rescaling_of_both_maps_is_invariant() {
        // joint min-max normalization cancels c*x + d for c > 0
        let a = random_map(24, 24, 5);
        let b = random_map(24, 24, 6);
        let p = SsimParams::default();
        let base = ssim(&a, &b, &p).unwrap().value;
        let scale = |t: &Tensor, c: f32, d: f32| {
            Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| c * v + d).collect()).unwrap()
        };
        let s = ssim(&scale(&a, 3.5, -1.25), &scale(&b, 3.5, -1.25), &p).unwrap().value;
        assert!((base - s).abs() < 1e-9, "{base} vs {s}");
    }

    #[test]
    fn ssim_shape_mismatch_errors() {
        let a = random_map(12, 12, 0);
        let b = random_map(12, 13, 0);
        assert!(ssim(&a, &b, &SsimParams::default()).is_err());
    }

    #[test]
    fn gaussian_window_sums_to_one() {
        let w = gaussian_window(11, 1.5);
        let sum: f64 = w.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
    }

    #[test]
    fn spearman_monotone_sequences() {
        let xs: Vec<f64> = (1..=6).map(|v| v as f64).collect();
        let inc: Vec<f64> = vec![2.0, 3.0, 5.0, 7.0, 11.0, 13.0];
        let dec: Vec<f64> = inc.iter().rev().cloned().collect();
        assert_eq!(spearman(&xs, &inc).unwrap().rho, 1.0);
        assert_eq!(spearman(&xs, &dec).unwrap().rho, -1.0);
    }

    #[test]
    fn spearman_tied_ranks_match_hand_computation() {
        // ys = [1,2,2,3,3,4] has ranks [1, 2.5, 2.5, 4.5, 4.5, 6];
        // Pearson of those ranks against [1..6] is 16.5 / sqrt(17.5 * 16.5).
        let xs: Vec<f64> = (1..=6).map(|v| v as f64).collect();
        let ys = vec![1.0, 2.0, 2.0, 3.0, 3.0, 4.0];
        let expected = 16.5 / (17.5f64 * 16.5).sqrt();
        let got = spearman(&xs, &ys).unwrap();
        assert!(!got.undefined);
        assert!((got.rho - expected).abs() < 1e-12, "{} vs {expected}", got.rho);
    }

    #[test]
    fn spearman_constant_sequence_is_flagged() {
        let xs: Vec<f64> = (1..=6).map(|v| v as f64).collect();
        let ys = vec![3.0; 6];
        let got = spearman(&xs, &ys).unwrap();
        assert!(got.undefined);
        assert_eq!(got.rho, 0.0);
    }

    #[test]
    fn spearman_rejects_short_or_unequal_input() {
        assert!(spearman(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(spearman(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn cosine_basic_cases() {
        let a = vec![1.0f32, 2.0, 3.0];
        let neg: Vec<f32> = a.iter().map(|v| -v).collect();
        assert!((cosine_similarity(&a, &a).unwrap().value - 1.0).abs() < 1e-12);
        assert!((cosine_similarity(&a, &neg).unwrap().value + 1.0).abs() < 1e-12);
        let e1 = vec![1.0f32, 0.0];
        let e2 = vec![0.0f32, 1.0];
        assert_eq!(cosine_similarity(&e1, &e2).unwrap().value, 0.0);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]).unwrap().undefined);
    }
}
