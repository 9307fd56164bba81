//! Dense 64-bit linear algebra: the handful of vector and matrix kernels the
//! model, the flow meter and the bound engine need.

use serde::{Deserialize, Serialize};

use crate::error::{CtdgError, Result};

pub const SPECTRAL_TOL: f64 = 1e-10;
pub const SPECTRAL_MAX_ITERS: usize = 10_000;

/// Real vector with finite entries.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DenseVector(Vec<f64>);

impl DenseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|x| !x.is_finite()) {
            return Err(CtdgError::InvalidParameter(format!(
                "vector entry {i} is not finite"
            )));
        }
        Ok(Self(values))
    }

    /// Wraps values already known to be finite.
    pub fn from_vec(values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|x| x.is_finite()));
        Self(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn distance(&self, other: &DenseVector) -> f64 {
        distance(&self.0, &other.0)
    }
}

impl AsRef<[f64]> for DenseVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major real matrix with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(CtdgError::ShapeMismatch(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(CtdgError::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(CtdgError::InvalidParameter(
                "matrix has non-finite entries".into(),
            ));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(CtdgError::ShapeMismatch("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// `M x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        self.values
            .chunks_exact(self.cols)
            .map(|row| dot(row, x))
            .collect()
    }

    /// `Mᵀ y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "matvec_t dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for (row, &yr) in self.values.chunks_exact(self.cols).zip(y) {
            if yr == 0.0 {
                continue;
            }
            for (o, &m) in out.iter_mut().zip(row) {
                *o += m * yr;
            }
        }
        out
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            values: self.values.iter().map(|v| v * c).collect(),
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        self.values.iter_mut().for_each(|v| *v *= c);
    }

    pub fn frobenius(&self) -> f64 {
        norm(&self.values)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Largest singular value by power iteration on `MᵀM`.
///
/// Starts from the normalized all-ones vector. Convergence is linear with
/// some ratio q, so the remaining error after a step of size d is about
/// d·q/(1-q); iteration stops once both d and that estimate drop below `tol`
/// (relative to `max(1, σ)`). If the start
/// vector lies in the null space of `MᵀM` the standard basis vectors are tried
/// in order; a matrix annihilating all of them is zero.
pub fn spectral_norm(m: &DenseMatrix, tol: f64, max_iters: usize) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(CtdgError::InvalidParameter(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let n = m.cols();
    let mut starts = Vec::with_capacity(n + 1);
    starts.push(vec![1.0 / (n as f64).sqrt(); n]);
    for i in 0..n {
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        starts.push(e);
    }

    'start: for mut v in starts {
        let mut prev = f64::NAN;
        let mut prev_step = f64::NAN;
        let mut sigma = 0.0;
        for _ in 0..max_iters {
            let mv = m.matvec(&v);
            sigma = norm(&mv);
            let w = m.matvec_t(&mv);
            let wn = norm(&w);
            if wn == 0.0 {
                if prev.is_nan() {
                    continue 'start;
                }
                return Ok(sigma);
            }
            let step = (sigma - prev).abs();
            let q = step / prev_step;
            let scale = tol * sigma.max(1.0);
            if step == 0.0 || (step < scale && q < 1.0 && step * q / (1.0 - q) < scale) {
                return Ok(sigma);
            }
            prev_step = step;
            prev = sigma;
            v = w.into_iter().map(|x| x / wn).collect();
        }
        return Err(CtdgError::NotConverged {
            estimate: sigma,
            iters: max_iters,
        });
    }
    Ok(0.0)
}

/// Spectral norm with the default tolerance and iteration cap.
pub fn spectral_norm_default(m: &DenseMatrix) -> Result<f64> {
    spectral_norm(m, SPECTRAL_TOL, SPECTRAL_MAX_ITERS)
}

/// 1-Lipschitz activations with `σ(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Relu,
    Tanh,
}

impl Activation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Activation::LeakyRelu { slope } if !(slope > 0.0 && slope <= 1.0) => {
                Err(CtdgError::InvalidParameter(format!(
                    "leaky relu slope must lie in (0, 1], got {slope}"
                )))
            }
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match *self {
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at `x`, taking the right derivative at kinks.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match *self {
            Activation::LeakyRelu { slope } => {
                if x >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Relu => {
                if x >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn apply_vec(&self, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| self.apply(x)).collect()
    }
}

pub fn leaky_relu(v: &DenseVector, slope: f64) -> Result<DenseVector> {
    let act = Activation::LeakyRelu { slope };
    act.validate()?;
    Ok(DenseVector::from_vec(act.apply_vec(v.as_slice())))
}

pub fn relu(v: &DenseVector) -> DenseVector {
    DenseVector::from_vec(Activation::Relu.apply_vec(v.as_slice()))
}

pub fn tanh_act(v: &DenseVector) -> DenseVector {
    DenseVector::from_vec(Activation::Tanh.apply_vec(v.as_slice()))
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty(), "softmax of an empty vector");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Rescales `v` onto the ball of radius `cap` when it lies outside.
pub fn norm_clip(v: &[f64], cap: f64) -> Vec<f64> {
    debug_assert!(cap > 0.0);
    let n = norm(v);
    if n > cap {
        let s = cap / n;
        v.iter().map(|x| x * s).collect()
    } else {
        v.to_vec()
    }
}

/// Numerically stable `log σ(x)`.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DenseMatrix {
        DenseMatrix::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    // Closed form: σ_max² is the larger root of λ² − tr(MᵀM)λ + det(MᵀM).
    fn closed_form_2x2(m: &DenseMatrix) -> f64 {
        let (a, b, c, d) = (m.get(0, 0), m.get(0, 1), m.get(1, 0), m.get(1, 1));
        let p = a * a + c * c;
        let q = a * b + c * d;
        let r = b * b + d * d;
        let tr = p + r;
        let det = p * r - q * q;
        ((tr + (tr * tr - 4.0 * det).max(0.0).sqrt()) / 2.0).sqrt()
    }

    #[test]
    fn identity_and_diagonal() {
        let i3 = DenseMatrix::identity(3);
        assert!((spectral_norm_default(&i3).unwrap() - 1.0).abs() < 1e-12);
        let d = DenseMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert!((spectral_norm_default(&d).unwrap() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn random_2x2_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let m = random_matrix(&mut rng, 2, 2);
            let s = spectral_norm_default(&m).unwrap();
            assert!((s - closed_form_2x2(&m)).abs() < 1e-8);
        }
    }

    #[test]
    fn start_vector_in_null_space() {
        // ones/√2 is annihilated by this matrix; the fallback start must find σ = √2.
        let m = DenseMatrix::from_rows(&[vec![1.0, -1.0], vec![0.0, 0.0]]).unwrap();
        let s = spectral_norm_default(&m).unwrap();
        assert!((s - 2f64.sqrt()).abs() < 1e-10);
        assert_eq!(spectral_norm_default(&DenseMatrix::zeros(2, 3)).unwrap(), 0.0);
    }

    #[test]
    fn non_convergence_reports_estimate() {
        let m = DenseMatrix::from_rows(&[vec![1.0, 0.2], vec![0.3, 0.99]]).unwrap();
        match spectral_norm(&m, 1e-15, 2) {
            Err(CtdgError::NotConverged { estimate, iters }) => {
                assert_eq!(iters, 2);
                assert!(estimate > 0.0);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn upper_bounds_random_directions_and_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let m = random_matrix(&mut rng, 3, 4);
            let s = spectral_norm_default(&m).unwrap();
            for _ in 0..100 {
                let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let ratio = norm(&m.matvec(&x)) / norm(&x);
                assert!(ratio <= s * (1.0 + 1e-9));
            }
            let c = rng.gen_range(-3.0..3.0);
            let sc = spectral_norm_default(&m.scaled(c)).unwrap();
            assert!((sc - c.abs() * s).abs() < 1e-8);
        }
    }

    #[test]
    fn activations() {
        let v = DenseVector::new(vec![-1.0, 2.0]).unwrap();
        assert_eq!(leaky_relu(&v, 0.1).unwrap().as_slice(), &[-0.1, 2.0]);
        assert_eq!(relu(&DenseVector::zeros(3)).as_slice(), &[0.0; 3]);
        assert!(leaky_relu(&v, 0.0).is_err());
        assert!(leaky_relu(&v, 1.5).is_err());
    }

    #[test]
    fn activations_are_one_lipschitz() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let acts = [
            Activation::LeakyRelu { slope: 0.01 },
            Activation::LeakyRelu { slope: 0.7 },
            Activation::Relu,
            Activation::Tanh,
        ];
        for act in acts {
            for _ in 0..10_000 {
                let x: f64 = rng.gen_range(-5.0..5.0);
                let y: f64 = rng.gen_range(-5.0..5.0);
                assert!((act.apply(x) - act.apply(y)).abs() <= (x - y).abs());
            }
        }
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax(&[2.0; 4]), vec![0.25; 4]);
        let s = softmax(&[100.0, 0.0]);
        assert!((s[0] - 1.0).abs() < 1e-12 && s[1] < 1e-12);
        let s = softmax(&[0.0, 3f64.ln()]);
        assert!((s[0] - 0.25).abs() < 1e-15 && (s[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn clip_cases() {
        assert_eq!(norm_clip(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
        let c = norm_clip(&[3.0, 4.0], 1.0);
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn stable_log_sigmoid() {
        assert!((log_sigmoid(0.0) + 2f64.ln()).abs() < 1e-15);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_sums_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
                let s = softmax(&v);
                prop_assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(s.iter().all(|&x| x > 0.0 && x <= 1.0));
            }

            #[test]
            fn clip_output_norm(v in prop::collection::vec(-10.0f64..10.0, 1..8), cap in 0.01f64..5.0) {
                let c = norm_clip(&v, cap);
                prop_assert!((norm(&c) - norm(&v).min(cap)).abs() < 1e-12);
            }
        }
    }
}
