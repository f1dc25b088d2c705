//! Dense 64-bit linear algebra, elementwise nonlinearities, norms and the
//! seeded generator every other module draws from.
//!
//! Nothing here is general-purpose BLAS: matrices are small (hidden sizes in
//! the tens) and every routine is written for deterministic, allocation-free
//! use inside the per-sample recurrence.

use std::ops::{Deref, DerefMut};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest `f64` strictly below one. Sigmoid outputs are clamped to it so the
/// open interval (0, 1) survives saturation.
const ONE_MINUS_ULP: f64 = 1.0 - f64::EPSILON / 2.0;

/// Default iteration budget for [`spectral_norm`].
pub const POWER_ITERS_DEFAULT: usize = 100;
/// Default relative tolerance for [`spectral_norm`].
pub const POWER_TOL_DEFAULT: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Matrix::zeros(n, n);
        for (i, &x) in d.iter().enumerate() {
            m.data[i * n + i] = x;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::config(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::config("ragged rows"));
        }
        Matrix::from_vec(r, c, rows.concat())
    }

    /// `u vᵀ`
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut m = Matrix::zeros(u.len(), v.len());
        m.add_outer(1.0, u, v);
        m
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::config(format!(
                "matmul shape mismatch {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `out += self · x`
    #[inline]
    pub fn matvec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            let mut s = 0.0;
            for (a, b) in row.iter().zip(x) {
                s += a * b;
            }
            *o += s;
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vector {
        let mut out = Vector::zeros(self.rows);
        if self.cols > 0 {
            self.matvec_acc(x, &mut out);
        }
        out
    }

    /// `out += selfᵀ · y`
    #[inline]
    pub fn matvec_t_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        if self.cols == 0 {
            return;
        }
        for (&yr, row) in y.iter().zip(self.data.chunks_exact(self.cols)) {
            if yr == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(row) {
                *o += yr * a;
            }
        }
    }

    pub fn matvec_t(&self, y: &[f64]) -> Vector {
        let mut out = Vector::zeros(self.cols);
        self.matvec_t_acc(y, &mut out);
        out
    }

    /// `self += s · u vᵀ`
    #[inline]
    pub fn add_outer(&mut self, s: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        if self.cols == 0 {
            return;
        }
        for (&ur, row) in u.iter().zip(self.data.chunks_exact_mut(self.cols)) {
            let k = s * ur;
            if k == 0.0 {
                continue;
            }
            for (a, &vc) in row.iter_mut().zip(v) {
                *a += k * vc;
            }
        }
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Matrix) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    L2,
    Linf,
}

pub fn vec_norm(x: &[f64], kind: NormKind) -> f64 {
    match kind {
        NormKind::L2 => {
            // Scaled accumulation keeps tiny (decayed) states from underflowing.
            let scale = x.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if scale == 0.0 || !scale.is_finite() {
                return scale;
            }
            let s: f64 = x.iter().map(|v| (v / scale) * (v / scale)).sum();
            scale * s.sqrt()
        }
        NormKind::Linf => x.iter().fold(0.0, |m, v| m.max(v.abs())),
    }
}

pub fn l2(x: &[f64]) -> f64 {
    vec_norm(x, NormKind::L2)
}

/// Logistic function on one value, clamped to the open interval (0, 1).
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, ONE_MINUS_ULP)
}

fn check_finite(x: &[f64], what: &str) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::InvalidValue(format!(
            "{what}: non-finite input at index {i}"
        ))),
        None => Ok(()),
    }
}

pub fn sigmoid(x: &[f64]) -> Result<Vector> {
    check_finite(x, "sigmoid")?;
    Ok(Vector(x.iter().map(|&v| sigmoid_scalar(v)).collect()))
}

pub fn tanh_elem(x: &[f64]) -> Result<Vector> {
    check_finite(x, "tanh")?;
    Ok(Vector(x.iter().map(|v| v.tanh()).collect()))
}

/// Warm-startable power iteration for the largest singular value.
///
/// Callers that repeatedly evaluate a slowly changing matrix keep one of these
/// around so each evaluation starts from the previous singular vectors.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PowerIteration {
    /// Left singular vector estimate (length = rows).
    pub u: Vec<f64>,
    /// Right singular vector estimate (length = cols).
    pub v: Vec<f64>,
}

impl PowerIteration {
    pub fn new() -> Self {
        Self::default()
    }

    fn seed_vector(m: &Matrix) -> Vec<f64> {
        // Start from the heaviest column plus a small deterministic spread so
        // the start is never orthogonal to the image of a nonzero matrix.
        let n = m.cols();
        let mut best = 0;
        let mut best_norm = -1.0;
        for c in 0..n {
            let s: f64 = (0..m.rows()).map(|r| m.get(r, c).powi(2)).sum();
            if s > best_norm {
                best_norm = s;
                best = c;
            }
        }
        let mut v: Vec<f64> = (0..n)
            .map(|j| 1e-2 * (1.0 + ((j * 7919 + 17) % 101) as f64 / 101.0))
            .collect();
        v[best] += 1.0;
        let nv = l2(&v);
        v.iter_mut().for_each(|x| *x /= nv);
        v
    }

    /// Runs power iteration on `m` and returns the estimate of `‖m‖₂`.
    /// The estimate is a lower bound (`‖m v‖` for a unit `v`).
    pub fn estimate(&mut self, m: &Matrix, max_iters: usize, tol: f64) -> f64 {
        let (rows, cols) = (m.rows(), m.cols());
        if rows == 0 || cols == 0 || m.data().iter().all(|&x| x == 0.0) {
            self.u = vec![0.0; rows];
            self.v = vec![0.0; cols];
            return 0.0;
        }
        if self.v.len() != cols || l2(&self.v) == 0.0 || !self.v.iter().all(|x| x.is_finite()) {
            self.v = Self::seed_vector(m);
        }
        let mut u = vec![0.0; rows];
        let mut v = std::mem::take(&mut self.v);
        let mut prev_v = vec![0.0; cols];
        let mut sigma = 0.0;
        for it in 0..max_iters.max(1) {
            u.iter_mut().for_each(|x| *x = 0.0);
            m.matvec_acc(&v, &mut u);
            let nu = l2(&u);
            if nu == 0.0 {
                // Started in the null space; reseed once.
                v = Self::seed_vector(m);
                if it > 0 {
                    break;
                }
                continue;
            }
            u.iter_mut().for_each(|x| *x /= nu);
            let prev = sigma;
            sigma = nu;
            prev_v.copy_from_slice(&v);
            v.iter_mut().for_each(|x| *x = 0.0);
            m.matvec_t_acc(&u, &mut v);
            let nv = l2(&v);
            v.iter_mut().for_each(|x| *x /= nv);
            // Stop on the singular vector, not just the value: the value
            // converges quadratically faster and its gradient is `u vᵀ`.
            let dv = v.iter().zip(&prev_v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if it > 0 && (sigma - prev).abs() <= tol * sigma && dv <= tol {
                break;
            }
        }
        // Final estimate from the latest right vector.
        u.iter_mut().for_each(|x| *x = 0.0);
        m.matvec_acc(&v, &mut u);
        let nu = l2(&u);
        if nu > 0.0 {
            u.iter_mut().for_each(|x| *x /= nu);
        }
        self.u = u;
        self.v = v;
        nu.max(sigma)
    }
}

/// Largest singular value of `m` by power iteration.
pub fn spectral_norm(m: &Matrix, max_iters: usize, tol: f64) -> Result<f64> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidValue("spectral_norm of an empty matrix".into()));
    }
    if max_iters == 0 || !(tol > 0.0) {
        return Err(Error::InvalidValue(
            "spectral_norm needs max_iters >= 1 and tol > 0".into(),
        ));
    }
    if !m.is_finite() {
        return Err(Error::InvalidValue("spectral_norm: non-finite entry".into()));
    }
    Ok(PowerIteration::new().estimate(m, max_iters, tol))
}

/// Singular values of `m` (descending) via one-sided Jacobi rotations.
///
/// Slower than power iteration but converges to full precision regardless of
/// spectral gaps; used where the bound itself is under audit.
pub fn singular_values(m: &Matrix) -> Vec<f64> {
    // Work on the orientation with more rows than columns.
    let a = if m.rows() >= m.cols() { m.clone() } else { m.transpose() };
    let (rows, cols) = (a.rows(), a.cols());
    // Column-major copy for cheap column rotations.
    let mut colsv: Vec<Vec<f64>> = (0..cols)
        .map(|c| (0..rows).map(|r| a.get(r, c)).collect())
        .collect();
    for _sweep in 0..100 {
        let mut off = 0.0_f64;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let alpha: f64 = colsv[p].iter().map(|x| x * x).sum();
                let beta: f64 = colsv[q].iter().map(|x| x * x).sum();
                let gamma: f64 = colsv[p].iter().zip(&colsv[q]).map(|(x, y)| x * y).sum();
                if gamma == 0.0 {
                    continue;
                }
                let rel = gamma.abs() / (alpha * beta).sqrt();
                off = off.max(rel);
                if rel < 1e-15 {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = colsv.split_at_mut(q);
                let cp = &mut left[p];
                let cq = &mut right[0];
                for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = colsv.iter().map(|c| l2(c)).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// `‖m‖₂` to full precision (largest Jacobi singular value).
pub fn spectral_norm_exact(m: &Matrix) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// First-order lowpass `y_t = a·y_{t−1} + (1 − a)·u_t`, state starting at 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnePole {
    a: f64,
    state: f64,
}

impl OnePole {
    /// `a = exp(−2π·cutoff/sr)`: the impulse-invariant (time-constant) mapping,
    /// whose step response reaches `1 − e⁻¹` after `sr/(2π·cutoff)` samples.
    pub fn time_constant(cutoff_hz: f64, sample_rate: f64) -> Self {
        OnePole {
            a: (-std::f64::consts::TAU * cutoff_hz / sample_rate).exp(),
            state: 0.0,
        }
    }

    /// Coefficient chosen so the magnitude response is exactly −3 dB at
    /// `cutoff_hz` (valid for any cutoff below Nyquist).
    pub fn half_power(cutoff_hz: f64, sample_rate: f64) -> Self {
        let c = (std::f64::consts::TAU * cutoff_hz / sample_rate).cos();
        let k = 2.0 - c;
        OnePole {
            a: k - (k * k - 1.0).sqrt(),
            state: 0.0,
        }
    }

    pub fn coefficient(&self) -> f64 {
        self.a
    }

    pub fn reset(&mut self) {
        self.state = 0.0;
    }

    #[inline]
    pub fn process(&mut self, u: f64) -> f64 {
        self.state = self.a * self.state + (1.0 - self.a) * u;
        self.state
    }
}

/// Deterministic, platform-independent generator (ChaCha8, counter based).
///
/// Independent streams are derived with [`SeededRng::split`]; there is no
/// global generator anywhere in the crate.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of a [`SeededRng`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Word position as a decimal string (it is a u128).
    pub word_pos: String,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream keyed by `stream`, unaffected by draws on `self`.
    pub fn split(&self, stream: u64) -> SeededRng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        SeededRng {
            seed: self.seed,
            inner,
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos().to_string(),
        }
    }

    pub fn from_state(state: &RngState) -> Result<Self> {
        let pos: u128 = state
            .word_pos
            .parse()
            .map_err(|_| Error::validation(format!("bad rng word_pos {:?}", state.word_pos)))?;
        let mut inner = ChaCha8Rng::seed_from_u64(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(pos);
        Ok(SeededRng {
            seed: state.seed,
            inner,
        })
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.random::<f64>()
    }

    /// Standard normal via Box–Muller.
    pub fn normal(&mut self) -> f64 {
        loop {
            let a: f64 = self.inner.random();
            if a > 0.0 {
                let b: f64 = self.inner.random();
                return (-2.0 * a.ln()).sqrt() * (std::f64::consts::TAU * b).cos();
            }
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn uniform_vec(&mut self, n: usize, lo: f64, hi: f64) -> Vector {
        Vector((0..n).map(|_| self.uniform(lo, hi)).collect())
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| self.uniform(lo, hi)).collect();
        Matrix { rows, cols, data }
    }

    /// Random matrix with orthonormal columns (rows ≥ cols) or rows, from
    /// Gram–Schmidt on a Gaussian draw.
    pub fn orthogonal(&mut self, n: usize) -> Matrix {
        loop {
            let mut cols: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| self.normal()).collect()).collect();
            let mut ok = true;
            for i in 0..n {
                for _pass in 0..2 {
                    for j in 0..i {
                        let d: f64 = cols[i].iter().zip(&cols[j]).map(|(a, b)| a * b).sum();
                        let cj = cols[j].clone();
                        cols[i].iter_mut().zip(&cj).for_each(|(a, b)| *a -= d * b);
                    }
                }
                let nrm = l2(&cols[i]);
                if nrm < 1e-8 {
                    ok = false;
                    break;
                }
                cols[i].iter_mut().for_each(|a| *a /= nrm);
            }
            if ok {
                let mut m = Matrix::zeros(n, n);
                for (c, col) in cols.iter().enumerate() {
                    for (r, &x) in col.iter().enumerate() {
                        m.set(r, c, x);
                    }
                }
                return m;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(&[0.0]).unwrap()[0], 0.5);
        let s = sigmoid(&[1000.0]).unwrap()[0];
        assert!(s < 1.0 && 1.0 - s < 1e-12);
        let s = sigmoid(&[-1000.0]).unwrap()[0];
        assert!(s > 0.0 && s < 1e-12);
        // 1/(1+e^{∓0.5}) evaluated to 30 digits with mpmath.
        let v = sigmoid(&[0.5, -0.5]).unwrap();
        assert!((v[0] - 0.622459331201854564638115965688).abs() < 1e-15);
        assert!((v[1] - 0.377540668798145435361884034312).abs() < 1e-15);
    }

    #[test]
    fn nonfinite_inputs_rejected() {
        assert!(matches!(sigmoid(&[f64::NAN]), Err(Error::InvalidValue(_))));
        assert!(matches!(tanh_elem(&[1.0, f64::INFINITY]), Err(Error::InvalidValue(_))));
    }

    #[test]
    fn tanh_examples() {
        assert_eq!(tanh_elem(&[0.0, 0.0]).unwrap().0, vec![0.0, 0.0]);
        // tanh(1) to 30 digits (mpmath).
        let t = tanh_elem(&[1.0]).unwrap()[0];
        assert!((t - 0.761594155955764888119458282605).abs() < 1e-15);
    }

    #[test]
    fn norms() {
        assert_eq!(vec_norm(&[3.0, 4.0], NormKind::L2), 5.0);
        assert_eq!(vec_norm(&[-3.0, 2.0], NormKind::Linf), 3.0);
        assert_eq!(vec_norm(&[0.0; 5], NormKind::L2), 0.0);
        assert_eq!(vec_norm(&[0.0; 5], NormKind::Linf), 0.0);
        // no underflow for tiny vectors
        let tiny = vec_norm(&[3e-300, 4e-300], NormKind::L2);
        assert!((tiny / 5e-300 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spectral_norm_diag_and_rank_one() {
        let d = Matrix::from_diag(&[0.5, 2.0]);
        let s = spectral_norm(&d, POWER_ITERS_DEFAULT, POWER_TOL_DEFAULT).unwrap();
        assert!((s - 2.0).abs() < 1e-12);

        let u = [1.0, -2.0, 0.5];
        let v = [0.3, 0.4];
        let m = Matrix::outer(&u, &v);
        let s = spectral_norm(&m, POWER_ITERS_DEFAULT, POWER_TOL_DEFAULT).unwrap();
        assert!((s - l2(&u) * l2(&v)).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_zero_and_errors() {
        assert_eq!(spectral_norm(&Matrix::zeros(3, 3), 10, 1e-9).unwrap(), 0.0);
        assert!(spectral_norm(&Matrix::zeros(0, 0), 10, 1e-9).is_err());
        assert!(spectral_norm(&Matrix::identity(2), 0, 1e-9).is_err());
        assert!(spectral_norm(&Matrix::identity(2), 10, 0.0).is_err());
    }

    #[test]
    fn jacobi_singular_values_of_diag() {
        let sv = singular_values(&Matrix::from_diag(&[0.5, -3.0, 2.0]));
        assert_eq!(sv.len(), 3);
        assert!((sv[0] - 3.0).abs() < 1e-14);
        assert!((sv[1] - 2.0).abs() < 1e-14);
        assert!((sv[2] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn warm_start_converges_immediately() {
        let mut rng = SeededRng::new(3);
        let m = rng.uniform_matrix(6, 6, -1.0, 1.0);
        let mut pi = PowerIteration::new();
        let s1 = pi.estimate(&m, 1000, 1e-14);
        let s2 = pi.estimate(&m, 2, 1e-14);
        assert!((s1 - s2).abs() <= 1e-13 * s1);
    }

    #[test]
    fn rng_split_and_state() {
        let mut a = SeededRng::new(9);
        let b = a.split(1);
        let mut c = a.split(1);
        let mut b2 = b.clone();
        assert_eq!(b2.next_u64(), c.next_u64());
        a.next_u64();
        let st = a.state();
        let mut restored = SeededRng::from_state(&st).unwrap();
        assert_eq!(a.next_u64(), restored.next_u64());
        assert_ne!(SeededRng::new(9).next_u64(), SeededRng::new(9).split(0).next_u64());
    }

    #[test]
    fn orthogonal_is_orthogonal() {
        let q = SeededRng::new(5).orthogonal(6);
        let qtq = q.transpose().matmul(&q).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                let e = if r == c { 1.0 } else { 0.0 };
                assert!((qtq.get(r, c) - e).abs() < 1e-12);
            }
        }
    }
}
