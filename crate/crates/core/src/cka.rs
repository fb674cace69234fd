//! Centered kernel alignment between feature matrices, and the quartile
//! summaries behind the texture-bias box plots.
//!
//! All arithmetic is f64 regardless of where the features came from.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::gemm;
use crate::image::ImageFrame;
use crate::model::MonoFormer;
use crate::{math, Error, Result, Tensor};

/// Slack allowed outside [0, 1] before a CKA value counts as an error.
pub const CKA_TOLERANCE: f64 = 1e-8;

/// Where a feature matrix came from.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FeatureTag {
    pub dataset: String,
    pub shift: String,
    pub layer: usize,
}

/// `m x f` features, one row per image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    pub tag: FeatureTag,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows < 2 {
            return Err(Error::InvalidArgument(alloc::format!("feature matrix needs m >= 2 rows, got {rows}")));
        }
        if cols == 0 || data.len() != rows * cols {
            return Err(Error::shape("FeatureMatrix", alloc::format!("{} values for {rows} x {cols}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix entry".into()));
        }
        Ok(Self {
            rows,
            cols,
            data,
            tag: FeatureTag::default(),
        })
    }

    pub fn with_tag(mut self, tag: FeatureTag) -> Self {
        self.tag = tag;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows `start..end` as a new matrix (same tag).
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if end > self.rows || start >= end {
            return Err(Error::InvalidArgument(alloc::format!("row range {start}..{end} of {}", self.rows)));
        }
        Ok(Self::new(end - start, self.cols, self.data[start * self.cols..end * self.cols].to_vec())?.with_tag(self.tag.clone()))
    }
}

/// `K = z z^T`, `[m, m]`.
pub fn gram(z: &FeatureMatrix) -> Tensor {
    let m = z.rows;
    let mut k = vec![0.0; m * m];
    gemm(m, z.cols, m, &z.data, false, &z.data, true, &mut k, false);
    // Exact symmetry regardless of GEMM summation order.
    for i in 0..m {
        for j in 0..i {
            k[j * m + i] = k[i * m + j];
        }
    }
    Tensor::new(&[m, m], k).expect("square gram")
}

fn square_size(t: &Tensor) -> Result<usize> {
    match t.shape() {
        [a, b] if a == b => Ok(*a),
        s => Err(Error::shape("hsic", alloc::format!("expected a square matrix, got {s:?}"))),
    }
}

/// `H K H` with `H = I - 11^T / m`.
fn center(k: &[f64], m: usize) -> Vec<f64> {
    let mf = m as f64;
    let row: Vec<f64> = (0..m).map(|i| k[i * m..(i + 1) * m].iter().sum::<f64>() / mf).collect();
    let col: Vec<f64> = (0..m).map(|j| (0..m).map(|i| k[i * m + j]).sum::<f64>() / mf).collect();
    let all = row.iter().sum::<f64>() / mf;
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            out[i * m + j] = k[i * m + j] - row[i] - col[j] + all;
        }
    }
    out
}

/// `trace(K H L H) / (m - 1)^2`.
pub fn hsic(k: &Tensor, l: &Tensor) -> Result<f64> {
    let m = square_size(k)?;
    if square_size(l)? != m {
        return Err(Error::shape("hsic", "K and L differ in size"));
    }
    if m < 2 {
        return Err(Error::InvalidArgument("hsic needs m >= 2".into()));
    }
    let kc = center(k.data(), m);
    let ld = l.data();
    let mut tr = 0.0;
    for i in 0..m {
        for j in 0..m {
            tr += kc[i * m + j] * ld[j * m + i];
        }
    }
    let d = (m - 1) as f64;
    Ok(tr / (d * d))
}

/// `HSIC(K, L) / sqrt(HSIC(K, K) HSIC(L, L))`, clamped to [0, 1] after a
/// tolerance check.
pub fn cka(za: &FeatureMatrix, zb: &FeatureMatrix) -> Result<f64> {
    if za.rows != zb.rows {
        return Err(Error::shape("cka", alloc::format!("{} vs {} rows", za.rows, zb.rows)));
    }
    let (k, l) = (gram(za), gram(zb));
    let kl = hsic(&k, &l)?;
    let kk = hsic(&k, &k)?;
    let ll = hsic(&l, &l)?;
    let scale = |t: &Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
    let d = ((za.rows - 1) as f64).powi(2);
    for (h, t, name) in [(kk, &k, "first"), (ll, &l, "second")] {
        if !(h > 1e-24 * scale(t) / d) {
            return Err(Error::DegenerateFeatures(alloc::format!(
                "{name} feature matrix is constant across rows (HSIC {h:e})"
            )));
        }
    }
    let v = kl / math::sqrt(kk * ll);
    if !(-CKA_TOLERANCE..=1.0 + CKA_TOLERANCE).contains(&v) {
        return Err(Error::NonFinite(alloc::format!("CKA {v} outside [0, 1]")));
    }
    Ok(v.clamp(0.0, 1.0))
}

/// Five-number summary with linearly interpolated quartiles.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quartiles {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Sample quantile `p` of sorted values, interpolating at `(n - 1) p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = math::floor(pos) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn quartiles(values: &[f64]) -> Result<Quartiles> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidArgument("quartiles need at least one non-NaN value".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(Quartiles {
        min: s[0],
        q1: quantile_sorted(&s, 0.25),
        median: quantile_sorted(&s, 0.5),
        q3: quantile_sorted(&s, 0.75),
        max: s[s.len() - 1],
    })
}

/// Row ranges of `n` rows in batches of `batch` (a trailing single row joins
/// the previous batch).
pub fn batch_ranges(n: usize, batch: usize) -> Vec<(usize, usize)> {
    let batch = batch.max(2);
    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        if end - start < 2 {
            if let Some(last) = out.last_mut() {
                last.1 = end;
            }
        } else {
            out.push((start, end));
        }
        start = end;
    }
    out
}

/// Per-batch CKA between aligned original and shifted features.
pub fn batched_cka(original: &FeatureMatrix, shifted: &FeatureMatrix, batch: usize) -> Result<Vec<(usize, f64)>> {
    if original.rows != shifted.rows {
        return Err(Error::shape("batched_cka", "original and shifted features are not aligned"));
    }
    batch_ranges(original.rows, batch)
        .into_iter()
        .map(|(a, b)| Ok((b - a, cka(&original.slice_rows(a, b)?, &shifted.slice_rows(a, b)?)?)))
        .collect()
}

/// Per-batch CKA values of one (model, shift) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct CkaSeries {
    pub model: String,
    pub shift: String,
    /// `(batch size m, CKA)` per batch.
    pub batches: Vec<(usize, f64)>,
}

impl CkaSeries {
    pub fn values(&self) -> Vec<f64> {
        self.batches.iter().map(|b| b.1).collect()
    }

    pub fn quartiles(&self) -> Result<Quartiles> {
        quartiles(&self.values())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CkaReport {
    pub series: Vec<CkaSeries>,
}

impl CkaReport {
    /// Summary per (model, shift).
    pub fn summary(&self) -> Result<Vec<(String, String, Quartiles)>> {
        self.series
            .iter()
            .map(|s| Ok((s.model.clone(), s.shift.clone(), s.quartiles()?)))
            .collect()
    }
}

/// Which encoder output to flatten.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureLayer {
    Last,
    /// 1-based transformer layer index.
    Index(usize),
}

/// Encoder features of each image, one flattened row per image.
///
/// Uses frozen weights (no gradient tracking). The special token is dropped;
/// `pool` averages over tokens instead of flattening them.
pub fn extract_features(model: &MonoFormer, images: &[ImageFrame], layer: FeatureLayer, pool: bool) -> Result<FeatureMatrix> {
    let l_count = model.config.encoder.num_layers;
    let l = match layer {
        FeatureLayer::Last => l_count,
        FeatureLayer::Index(i) if (1..=l_count).contains(&i) => i,
        FeatureLayer::Index(i) => {
            return Err(Error::InvalidArgument(alloc::format!("layer {i} not in 1..={l_count}")));
        }
    };
    let mut data = Vec::new();
    let mut cols = 0;
    for img in images {
        let (_, layers) = model.encode(img)?;
        let z = &layers[l - 1].tokens;
        let (n1, c) = (z.shape()[0], z.shape()[1]);
        let patches = &z.data()[c..];
        if pool {
            let n = (n1 - 1) as f64;
            data.extend((0..c).map(|j| (0..n1 - 1).map(|i| patches[i * c + j]).sum::<f64>() / n));
            cols = c;
        } else {
            data.extend_from_slice(patches);
            cols = patches.len();
        }
    }
    let mut fm = FeatureMatrix::new(images.len(), cols, data)?;
    fm.tag.layer = l;
    Ok(fm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, f: usize, seed: u64) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureMatrix::new(m, f, (0..m * f).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Quadruple-loop `trace(K H L H) / (m - 1)^2` with an explicit `H`.
    fn hsic_loop(k: &Tensor, l: &Tensor) -> f64 {
        let m = k.shape()[0];
        let h = |i: usize, j: usize| (if i == j { 1.0 } else { 0.0 }) - 1.0 / m as f64;
        let (k, l) = (k.data(), l.data());
        let mut tr = 0.0;
        for i in 0..m {
            for a in 0..m {
                for b in 0..m {
                    for c in 0..m {
                        // (K H L H)_{ii} = sum_a,b,c K_ia H_ab L_bc H_ci
                        tr += k[i * m + a] * h(a, b) * l[b * m + c] * h(c, i);
                    }
                }
            }
        }
        tr / ((m - 1) as f64).powi(2)
    }

    #[test]
    fn gram_identity_and_symmetry() {
        let eye = FeatureMatrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(gram(&eye).data(), &[1.0, 0.0, 0.0, 1.0]);
        let k = gram(&random(7, 5, 1));
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(k.data()[i * 7 + j], k.data()[j * 7 + i]);
            }
        }
    }

    #[test]
    fn hsic_hand_cases() {
        let eye = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(hsic(&eye, &eye).unwrap(), 1.0);
        let ones = Tensor::full(&[4, 4], 1.0);
        let k = gram(&random(4, 3, 2));
        assert_eq!(hsic(&ones, &k).unwrap(), 0.0);
        assert!(hsic(&k, &ones).unwrap().abs() < 1e-15);
        let one = Tensor::full(&[1, 1], 1.0);
        assert!(hsic(&one, &one).is_err());
    }

    #[test]
    fn hsic_matches_loop_oracle() {
        for seed in 0..20 {
            let k = gram(&random(5, 4, 10 + seed));
            let l = gram(&random(5, 6, 100 + seed));
            let a = hsic(&k, &l).unwrap();
            let b = hsic_loop(&k, &l);
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn cka_basic_properties() {
        let z = random(6, 4, 3);
        assert_eq!(cka(&z, &z).unwrap(), 1.0);
        let constant = FeatureMatrix::new(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert!(matches!(cka(&constant, &random(3, 2, 4)), Err(Error::DegenerateFeatures(_))));
        assert!(cka(&z, &random(5, 4, 5)).is_err());
    }

    #[test]
    fn quartiles_linear_interpolation() {
        let q = quartiles(&[4.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!((q.min, q.q1, q.median, q.q3, q.max), (1.0, 1.75, 2.5, 3.25, 4.0));
        assert!(quartiles(&[]).is_err());
    }

    #[test]
    fn batch_ranges_cover_rows() {
        assert_eq!(batch_ranges(10, 4), [(0, 4), (4, 8), (8, 10)]);
        assert_eq!(batch_ranges(9, 4), [(0, 4), (4, 9)]);
        assert_eq!(batch_ranges(3, 8), [(0, 3)]);
    }

    fn orthogonal(n: usize, seed: u64) -> Vec<f64> {
        // Gram-Schmidt on a random matrix.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < n {
            let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                q.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        q.concat()
    }

    fn right_multiply(z: &FeatureMatrix, q: &[f64]) -> FeatureMatrix {
        let (m, f) = (z.rows(), z.cols());
        let mut out = vec![0.0; m * f];
        for i in 0..m {
            for j in 0..f {
                out[i * f + j] = (0..f).map(|k| z.row(i)[k] * q[k * f + j]).sum();
            }
        }
        FeatureMatrix::new(m, f, out).unwrap()
    }

    /// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
    fn jacobi_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
        let mut a = a.to_vec();
        for _ in 0..100 {
            let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq.abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[k * n + p], a[k * n + q]);
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i * n + i]).collect()
    }

    #[test]
    fn gram_eigenvalues_nonnegative() {
        for seed in 0..20 {
            let (m, f) = (6, 2 + seed as usize % 4);
            let k = gram(&random(m, f, 500 + seed));
            let eig = jacobi_eigenvalues(k.data(), m);
            let trace: f64 = (0..m).map(|i| k.data()[i * m + i]).sum();
            assert!((eig.iter().sum::<f64>() - trace).abs() < 1e-9);
            assert!(eig.iter().all(|&e| e >= -1e-10), "{eig:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn cka_invariances(seed in 0u64..10_000, m in 3usize..9, f in 2usize..7, c in 0.1f64..20.0, shift in -5.0f64..5.0) {
            let za = random(m, f, seed);
            let zb = random(m, f + 1, seed ^ 0xabc);
            let base = cka(&za, &zb).unwrap();
            prop_assert!((0.0..=1.0).contains(&base));
            prop_assert!((cka(&zb, &za).unwrap() - base).abs() < 1e-12);

            let scaled = FeatureMatrix::new(m, f, za.data().iter().map(|v| -c * v).collect()).unwrap();
            prop_assert!((cka(&scaled, &zb).unwrap() - base).abs() < 1e-8);

            let rotated = right_multiply(&za, &orthogonal(f, seed + 1));
            prop_assert!((cka(&rotated, &zb).unwrap() - base).abs() < 1e-8);

            let offset = FeatureMatrix::new(m, f, za.data().iter().map(|v| v + shift).collect()).unwrap();
            prop_assert!((cka(&offset, &zb).unwrap() - base).abs() < 1e-8);
        }

        #[test]
        fn trace_hsic_matches_centered_features(seed in 0u64..10_000, m in 2usize..9, f in 1usize..6, g in 1usize..6) {
            let za = random(m, f, seed);
            let zb = random(m, g, seed + 7);
            let center = |z: &FeatureMatrix| -> Vec<f64> {
                let mut out = z.data().to_vec();
                for j in 0..z.cols() {
                    let mean = (0..m).map(|i| z.row(i)[j]).sum::<f64>() / m as f64;
                    (0..m).for_each(|i| out[i * z.cols() + j] -= mean);
                }
                out
            };
            let (ca, cb) = (center(&za), center(&zb));
            let mut fro = 0.0;
            for p in 0..f {
                for q in 0..g {
                    let v: f64 = (0..m).map(|i| ca[i * f + p] * cb[i * g + q]).sum();
                    fro += v * v;
                }
            }
            let expect = fro / ((m - 1) as f64).powi(2);
            let got = hsic(&gram(&za), &gram(&zb)).unwrap();
            prop_assert!((got - expect).abs() <= 1e-8 * expect.abs().max(1e-10));
        }

        #[test]
        fn gram_is_psd(seed in 0u64..10_000, m in 2usize..7, f in 1usize..5, v in proptest::collection::vec(-1.0f64..1.0, 7)) {
            // x^T K x = ||z^T x||^2 >= 0 for any x.
            let k = gram(&random(m, f, seed));
            let x = &v[..m];
            let q: f64 = (0..m).map(|i| (0..m).map(|j| x[i] * k.data()[i * m + j] * x[j]).sum::<f64>()).sum();
            prop_assert!(q >= -1e-10);
        }
    }
}
