//! Dense-array kernel shared by the fusion module, the classifier and the
//! gradient checks.
//!
//! Everything here computes in `f64` with a fixed, sequential summation order
//! so repeated runs are bit-identical.

use crate::error::{Error, Result};

/// Default stabilizer added to the variance before the square root.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Probabilities are clamped to this floor before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        assert!(r < self.rows && c < self.cols, "matrix index out of bounds");
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        assert!(r < self.rows && c < self.cols, "matrix index out of bounds");
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Three-way array indexed as (batch, frame, feature).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch3 {
    b: usize,
    d: usize,
    l: usize,
    data: Vec<f64>,
}

impl Batch3 {
    pub fn zeros(b: usize, d: usize, l: usize) -> Self {
        Self {
            b,
            d,
            l,
            data: vec![0.0; b * d * l],
        }
    }

    pub fn from_vec(b: usize, d: usize, l: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != b * d * l {
            return Err(Error::shape(format!(
                "batch {b}x{d}x{l} needs {} values, got {}",
                b * d * l,
                data.len()
            )));
        }
        Ok(Self { b, d, l, data })
    }

    /// Stacks equally shaped D×L matrices along a new leading axis.
    pub fn stack(items: &[Matrix]) -> Result<Self> {
        let (d, l) = items.first().map_or((0, 0), |m| (m.rows, m.cols));
        let mut data = Vec::with_capacity(items.len() * d * l);
        for (i, m) in items.iter().enumerate() {
            if m.rows != d || m.cols != l {
                return Err(Error::shape(format!(
                    "batch item {i} is {}x{}, expected {d}x{l}",
                    m.rows, m.cols
                )));
            }
            data.extend_from_slice(&m.data);
        }
        Ok(Self {
            b: items.len(),
            d,
            l,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.b, self.d, self.l)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn offset(&self, bi: usize, di: usize, li: usize) -> usize {
        assert!(
            bi < self.b && di < self.d && li < self.l,
            "batch index ({bi},{di},{li}) out of bounds for ({},{},{})",
            self.b,
            self.d,
            self.l
        );
        (bi * self.d + di) * self.l + li
    }

    pub fn get(&self, bi: usize, di: usize, li: usize) -> f64 {
        self.data[self.offset(bi, di, li)]
    }

    pub fn set(&mut self, bi: usize, di: usize, li: usize, v: f64) {
        let o = self.offset(bi, di, li);
        self.data[o] = v;
    }

    /// Number of (batch, frame) rows.
    pub fn n_rows(&self) -> usize {
        self.b * self.d
    }

    /// Row `r` in flattened (batch, frame) order.
    pub fn flat_row(&self, r: usize) -> &[f64] {
        &self.data[r * self.l..(r + 1) * self.l]
    }

    pub fn flat_row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.l..(r + 1) * self.l]
    }

    /// The D×L slab for batch item `bi`.
    pub fn item(&self, bi: usize) -> Matrix {
        let n = self.d * self.l;
        Matrix {
            rows: self.d,
            cols: self.l,
            data: self.data[bi * n..(bi + 1) * n].to_vec(),
        }
    }

    /// Reinterprets the batch as a (B·D)×L matrix.
    pub fn as_matrix(&self) -> Matrix {
        Matrix {
            rows: self.b * self.d,
            cols: self.l,
            data: self.data.clone(),
        }
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Mean and population standard deviation of one row, `eps` added to the
/// variance inside the square root.
pub fn mean_std(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var + eps).sqrt())
}

/// Per-row statistics along the feature axis.
pub fn row_mean_std(x: &Matrix, eps: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.cols == 0 {
        return Err(Error::shape("row statistics need at least one column"));
    }
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::Numeric(format!("eps must be finite and >= 0, got {eps}")));
    }
    let (means, stds) = (0..x.rows).map(|r| mean_std(x.row(r), eps)).unzip();
    Ok((means, stds))
}

/// Max-shifted softmax.
pub fn softmax(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("softmax input not finite: {bad}")));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

pub fn cross_entropy(probs: &[f64], target: usize) -> Result<f64> {
    let p = *probs.get(target).ok_or(Error::Index {
        index: target,
        len: probs.len(),
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity with a zero-norm vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn l2_normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::Degenerate(format!("cannot L2-normalize a vector with norm {n}")));
    }
    Ok(a.iter().map(|v| v / n).collect())
}

/// Central-difference gradient of `f` at `p`.
pub fn finite_diff_grad<F>(mut f: F, p: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Numeric(format!("step must be positive, got {h}")));
    }
    let mut probe = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite around coordinate {i}: f(+h)={up}, f(-h)={down}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Worst-case error of `analytic` against `numeric`, relative to the larger
/// of the two max-norms.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0_f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let m = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);

        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!((c.rows(), c.cols()), (2, 1));
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 5, 7);
        let b = random_matrix(&mut rng, 7, 3);
        let c = matmul(&a, &b).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for k in 0..7 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape(_))));
    }

    #[test]
    fn matmul_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let a = random_matrix(&mut rng, 8, 8);
            let b = random_matrix(&mut rng, 8, 8);
            let c = random_matrix(&mut rng, 8, 8);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            let scale = left.data().iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            for (x, y) in left.data().iter().zip(right.data()) {
                assert!((x - y).abs() <= 1e-9 * scale);
            }
        }
    }

    #[test]
    fn row_stats_hand_cases() {
        let x = Matrix::from_rows(&[vec![3.0; 4], vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let (m, s) = row_mean_std(&x, 1e-5).unwrap();
        assert_eq!(m[0], 3.0);
        assert!((s[0] - 1e-5_f64.sqrt()).abs() < 1e-15);
        let (m, s) = row_mean_std(&x, 0.0).unwrap();
        assert_eq!(m[1], 2.5);
        assert!((s[1] - 1.25_f64.sqrt()).abs() < 1e-15);
    }

    fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
        let (mut sum, mut comp) = (0.0_f64, 0.0_f64);
        for v in values {
            let t = sum + v;
            if sum.abs() >= v.abs() {
                comp += (sum - t) + v;
            } else {
                comp += (v - t) + sum;
            }
            sum = t;
        }
        sum + comp
    }

    #[test]
    fn row_stats_match_compensated_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = (0..6 * 2048).map(|_| rng.random_range(-3.0..7.0)).collect();
        let x = Matrix::from_vec(6, 2048, data).unwrap();
        let eps = 1e-5;
        let (means, stds) = row_mean_std(&x, eps).unwrap();
        for r in 0..6 {
            let row = x.row(r);
            let mean = neumaier_sum(row.iter().copied()) / 2048.0;
            let var = neumaier_sum(row.iter().map(|v| (v - mean).powi(2))) / 2048.0;
            let std = (var + eps).sqrt();
            assert!(((means[r] - mean) / mean).abs() < 1e-10);
            assert!(((stds[r] - std) / std).abs() < 1e-10);
        }
    }

    #[test]
    fn row_stats_standardize() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_matrix(&mut rng, 4, 33);
        let eps = 1e-3;
        let (means, stds) = row_mean_std(&x, eps).unwrap();
        for r in 0..4 {
            let z: Vec<f64> = x.row(r).iter().map(|v| (v - means[r]) / stds[r]).collect();
            let (zm, zs) = mean_std(&z, 0.0);
            let (_, raw) = mean_std(x.row(r), 0.0);
            let v = raw * raw;
            assert!(zm.abs() < 1e-10);
            assert!((zs - (v / (v + eps)).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn row_stats_reject_empty_rows() {
        assert!(row_mean_std(&Matrix::zeros(2, 0), 1e-5).is_err());
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0; 5]).unwrap();
        assert!(p.iter().all(|v| (v - 0.2).abs() < 1e-15));

        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] >= 0.0 && p[1] < 1e-300);

        assert!(matches!(softmax(&[]), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_matches_high_precision_reference() {
        // 50-digit reference values for softmax([0.37, -1.25, 2.5, 0.0, -0.8]).
        let expected = [
            0.094_216_370_009_062_436_446_945_8,
            0.018_645_297_057_173_946_000_782_32,
            0.792_818_205_083_622_654_883_130_6,
            0.065_078_481_273_291_078_398_976_93,
            0.029_241_646_576_849_884_270_164_38,
        ];
        let p = softmax(&[0.37, -1.25, 2.5, 0.0, -0.8]).unwrap();
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_cases() {
        assert!(cross_entropy(&[1.0, 0.0, 0.0], 0).unwrap().abs() < 1e-15);
        let uniform = [0.2; 5];
        for t in 0..5 {
            assert!((cross_entropy(&uniform, t).unwrap() - 5.0_f64.ln()).abs() < 1e-12);
        }
        // ln(e^2 + e + 1) - 1
        let p = softmax(&[2.0, 1.0, 0.0]).unwrap();
        assert!((cross_entropy(&p, 1).unwrap() - 1.407_605_964_444_380_304_482_92).abs() < 1e-12);
        // the clamp keeps a zero-probability target finite
        assert!((cross_entropy(&[1.0, 0.0], 1).unwrap() - (-PROB_FLOOR.ln())).abs() < 1e-9);
        assert!(matches!(cross_entropy(&uniform, 5), Err(Error::Index { index: 5, len: 5 })));
    }

    #[test]
    fn cosine_cases() {
        let a = [0.3, -1.2, 2.0];
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let scaled: Vec<f64> = a.iter().map(|v| 3.7 * v).collect();
        assert!((cosine_similarity(&a, &scaled).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(
            cosine_similarity(&a, &[0.0; 3]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn l2_normalize_cases() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let u = [0.0, 1.0, 0.0];
        assert_eq!(l2_normalize(&u).unwrap(), u.to_vec());
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::Degenerate(_))));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v: Vec<f64> = (0..100).map(|_| rng.random_range(-10.0..10.0)).collect();
        assert!((norm(&l2_normalize(&v).unwrap()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn finite_diff_cases() {
        let g = finite_diff_grad(|p| p.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);

        let g = finite_diff_grad(|_| 4.2, &[1.0, -3.0, 0.5], 1e-5).unwrap();
        assert_eq!(g, vec![0.0; 3]);

        assert!(finite_diff_grad(|p| p[0].ln(), &[1e-6], 1e-5).is_err());
        assert!(finite_diff_grad(|p| p[0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn finite_diff_on_cubic_is_second_order() {
        // f = x^3 + 2xy^2 - y + 3 ; grad = (3x^2 + 2y^2, 4xy - 1)
        let f = |p: &[f64]| p[0].powi(3) + 2.0 * p[0] * p[1] * p[1] - p[1] + 3.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let g = finite_diff_grad(f, &p, 1e-4).unwrap();
            let exact = [3.0 * p[0] * p[0] + 2.0 * p[1] * p[1], 4.0 * p[0] * p[1] - 1.0];
            assert!((g[0] - exact[0]).abs() < 1e-6);
            assert!((g[1] - exact[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn batch_indexing_is_checked() {
        let b = Batch3::zeros(2, 3, 4);
        assert_eq!(b.n_rows(), 6);
        let r = std::panic::catch_unwind(|| b.get(2, 0, 0));
        assert!(r.is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_is_a_shift_invariant_simplex(
                scores in prop::collection::vec(-15.0f64..15.0, 1..12),
                shift in -100.0f64..100.0,
            ) {
                let p = softmax(&scores).unwrap();
                prop_assert!(p.iter().all(|&v| v > 0.0 && v < 1.0 || scores.len() == 1));
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
                let q = softmax(&shifted).unwrap();
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }

            #[test]
            fn cosine_is_positive_scale_invariant(
                a in prop::collection::vec(-5.0f64..5.0, 6),
                b in prop::collection::vec(-5.0f64..5.0, 6),
                la in 0.01f64..100.0,
                lb in 0.01f64..100.0,
            ) {
                prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
                let c = cosine_similarity(&a, &b).unwrap();
                let sa: Vec<f64> = a.iter().map(|v| v * la).collect();
                let sb: Vec<f64> = b.iter().map(|v| v * lb).collect();
                prop_assert!((c - cosine_similarity(&sa, &sb).unwrap()).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&c));
            }
        }
    }
}
