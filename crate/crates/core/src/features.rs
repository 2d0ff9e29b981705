//! Covariance features on the manifold of symmetric positive-definite
//! matrices, under the affine-invariant metric
//!
//! ```text
//! δ(A, B) = ‖log(A^{-1/2} B A^{-1/2})‖_F
//! ```
//!
//! Every matrix function goes through the cyclic Jacobi eigensolver in this
//! module.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const SYMMETRY_TOL: f64 = 1e-10;
const SINGULAR_EIG: f64 = 1e-14;
const JACOBI_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

pub const DEFAULT_SHRINKAGE: f64 = 1e-3;
pub const DEFAULT_MEAN_TOL: f64 = 1e-8;
pub const DEFAULT_MEAN_MAX_ITER: usize = 50;

/// Eigen-decomposition `a = V diag(λ) Vᵀ`, eigenvalues descending and the
/// eigenvectors stored as the columns of `vectors`.
#[derive(Debug, Clone)]
pub struct SymEig {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

impl SymEig {
    /// `V diag(f(λ)) Vᵀ`
    pub fn recompose(&self, f: impl Fn(f64) -> f64) -> Matrix {
        let n = self.values.len();
        let fv: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let v = &self.vectors;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let s: f64 = (0..n).map(|k| v[(i, k)] * fv[k] * v[(j, k)]).sum();
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
pub fn sym_eig(a: &Matrix) -> Result<SymEig> {
    if !a.is_square() {
        return Err(Error::Shape(format!(
            "eigensolver needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_finite() {
        return Err(Error::Numerical("matrix holds non-finite entries".into()));
    }
    if a.asymmetry() > SYMMETRY_TOL {
        return Err(Error::Numerical(format!(
            "matrix is not symmetric (relative asymmetry {:.3e})",
            a.asymmetry()
        )));
    }
    let n = a.rows();
    let mut m = a.symmetrized();
    let mut v = Matrix::identity(n);
    let scale = a.frobenius();
    let off = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[(i, j)] * m[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut converged = scale == 0.0;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged || off(&m) < JACOBI_TOL * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut m, &mut v, p, q, c, s);
            }
        }
    }
    if !converged && off(&m) >= JACOBI_TOL * scale {
        return Err(Error::Numerical(format!(
            "Jacobi iteration did not converge in {JACOBI_MAX_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors[(r, dst)] = v[(r, src)];
        }
    }
    Ok(SymEig { values, vectors })
}

/// Applies the rotation zeroing `m[p][q]` and accumulates it into `v`.
fn rotate(m: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = m.rows();
    for k in 0..n {
        let mkp = m[(k, p)];
        let mkq = m[(k, q)];
        m[(k, p)] = c * mkp - s * mkq;
        m[(k, q)] = s * mkp + c * mkq;
    }
    for k in 0..n {
        let mpk = m[(p, k)];
        let mqk = m[(q, k)];
        m[(p, k)] = c * mpk - s * mqk;
        m[(q, k)] = s * mpk + c * mqk;
    }
    m[(p, q)] = 0.0;
    m[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Matrix", into = "Matrix")]
pub struct SpdMatrix(Matrix);

impl SpdMatrix {
    pub fn new(m: Matrix) -> Result<Self> {
        let eig = sym_eig(&m)?;
        let min = eig.values.last().copied().unwrap_or(0.0);
        if !(min > 0.0) {
            return Err(Error::Numerical(format!(
                "matrix is not positive definite (smallest eigenvalue {min:.3e})"
            )));
        }
        Ok(SpdMatrix(m.symmetrized()))
    }

    pub fn identity(n: usize) -> Self {
        SpdMatrix(Matrix::identity(n))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn eig(&self) -> Result<SymEig> {
        sym_eig(&self.0)
    }

    pub fn congruence(&self, w: &Matrix) -> Result<SpdMatrix> {
        SpdMatrix::new(self.0.congruence(w))
    }
}

impl TryFrom<Matrix> for SpdMatrix {
    type Error = Error;

    fn try_from(m: Matrix) -> Result<Self> {
        SpdMatrix::new(m)
    }
}

impl From<SpdMatrix> for Matrix {
    fn from(s: SpdMatrix) -> Matrix {
        s.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpdFn {
    Log,
    Exp,
    Sqrt,
    InvSqrt,
}

/// Matrix function of a symmetric matrix through its eigenvalues.
pub fn sym_map(a: &Matrix, f: SpdFn) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    if matches!(f, SpdFn::Log | SpdFn::InvSqrt | SpdFn::Sqrt) {
        let min = eig.values.last().copied().unwrap_or(1.0);
        let limit = if f == SpdFn::Sqrt { 0.0 } else { SINGULAR_EIG };
        if min <= limit {
            return Err(Error::Numerical(format!(
                "{f:?} of a matrix with eigenvalue {min:.3e} is singular"
            )));
        }
    }
    Ok(eig.recompose(|l| match f {
        SpdFn::Log => l.ln(),
        SpdFn::Exp => l.exp(),
        SpdFn::Sqrt => l.sqrt(),
        SpdFn::InvSqrt => 1.0 / l.sqrt(),
    }))
}

pub fn spd_map(a: &SpdMatrix, f: SpdFn) -> Result<Matrix> {
    sym_map(a.matrix(), f)
}

/// Inverse of a symmetric matrix through its eigenvalues; fails when the
/// smallest |λ| is below `rel_tol` times the largest.
pub fn sym_inverse(a: &Matrix, rel_tol: f64) -> Result<Matrix> {
    let eig = sym_eig(a)?;
    let max = eig.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig.values.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if !(max > 0.0) || min <= rel_tol * max {
        return Err(Error::Numerical(format!(
            "matrix is singular (|λ| range {min:.3e}..{max:.3e})"
        )));
    }
    Ok(eig.recompose(|l| 1.0 / l))
}

/// Row-centred sample covariance `X_c X_cᵀ / (T − 1)`, shrunk towards
/// `tr(C)/n · I` by `shrinkage`.
pub fn sample_covariance(x: &Matrix, shrinkage: f64) -> Result<SpdMatrix> {
    let (n, t) = (x.rows(), x.cols());
    if t < 2 {
        return Err(Error::Shape(format!("covariance needs at least 2 samples, got {t}")));
    }
    if !(0.0..1.0).contains(&shrinkage) && shrinkage != 1.0 {
        return Err(Error::Config(format!("shrinkage {shrinkage} outside [0, 1]")));
    }
    let centred: Vec<Vec<f64>> = x
        .row_iter()
        .map(|r| {
            let mean = r.iter().sum::<f64>() / t as f64;
            r.iter().map(|v| v - mean).collect()
        })
        .collect();
    let mut c = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let s: f64 = centred[i].iter().zip(&centred[j]).map(|(a, b)| a * b).sum();
            c[(i, j)] = s / (t - 1) as f64;
            c[(j, i)] = c[(i, j)];
        }
    }
    if shrinkage > 0.0 {
        let target = c.trace() / n as f64;
        c = c.scale(1.0 - shrinkage);
        for i in 0..n {
            c[(i, i)] += shrinkage * target;
        }
    }
    SpdMatrix::new(c).map_err(|e| match e {
        Error::Numerical(msg) => Error::Numerical(format!(
            "covariance is not positive definite ({msg}); use shrinkage > 0"
        )),
        other => other,
    })
}

fn check_dims(a: &SpdMatrix, b: &SpdMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "SPD dimension mismatch: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Affine-invariant Riemannian distance.
pub fn riemann_distance(a: &SpdMatrix, b: &SpdMatrix) -> Result<f64> {
    check_dims(a, b)?;
    let w = spd_map(a, SpdFn::InvSqrt)?;
    let inner = b.matrix().congruence(&w).symmetrized();
    let eig = sym_eig(&inner)?;
    let mut s = 0.0;
    for l in eig.values {
        if l <= SINGULAR_EIG {
            return Err(Error::Numerical(format!("relative eigenvalue {l:.3e} is singular")));
        }
        s += l.ln().powi(2);
    }
    Ok(s.sqrt())
}

/// Fréchet mean under the affine-invariant metric by fixed-point iteration,
/// started at the arithmetic mean.
pub fn geometric_mean(ms: &[SpdMatrix], tol: f64, max_iter: usize) -> Result<SpdMatrix> {
    let first = ms
        .first()
        .ok_or_else(|| Error::Config("geometric mean of an empty set".into()))?;
    for m in ms {
        check_dims(first, m)?;
    }
    if ms.len() == 1 {
        return Ok(first.clone());
    }
    let n = first.dim();
    let mut g = ms
        .iter()
        .fold(Matrix::zeros(n, n), |acc, m| acc.add(m.matrix()))
        .scale(1.0 / ms.len() as f64);
    let mut trace = Vec::with_capacity(max_iter);
    for _ in 0..=max_iter {
        let step = mean_log(&g, ms)?;
        let norm = step.frobenius();
        trace.push(norm);
        if norm < tol {
            return SpdMatrix::new(g);
        }
        if trace.len() > max_iter {
            break;
        }
        let root = sym_map(&g, SpdFn::Sqrt)?;
        let e = sym_map(&step, SpdFn::Exp)?;
        g = e.congruence(&root).symmetrized();
    }
    let shown: Vec<String> = trace.iter().map(|v| format!("{v:.2e}")).collect();
    Err(Error::Numerical(format!(
        "geometric mean did not reach {tol:e} in {max_iter} iterations; step norms [{}]",
        shown.join(", ")
    )))
}

/// `mean_i log(G^{-1/2} M_i G^{-1/2})`, the Riemannian gradient direction of
/// the Fréchet objective at `g`.
pub fn mean_log(g: &Matrix, ms: &[SpdMatrix]) -> Result<Matrix> {
    let n = g.rows();
    let w = sym_map(g, SpdFn::InvSqrt)?;
    let mut acc = Matrix::zeros(n, n);
    for m in ms {
        let inner = m.matrix().congruence(&w).symmetrized();
        acc = acc.add(&sym_map(&inner, SpdFn::Log)?);
    }
    Ok(acc.scale(1.0 / ms.len() as f64))
}

/// Point in the tangent space at `reference`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub reference: SpdMatrix,
    pub coords: Vec<f64>,
}

pub fn tangent_dim(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Upper triangle, row-major, off-diagonal entries scaled by √2 so the
/// Euclidean norm equals the Frobenius norm of `s`.
pub fn upper_vectorize(s: &Matrix) -> Vec<f64> {
    let n = s.rows();
    let mut out = Vec::with_capacity(tangent_dim(n));
    for i in 0..n {
        for j in i..n {
            let scale = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
            out.push(scale * s[(i, j)]);
        }
    }
    out
}

/// Log map at a fixed reference with the whitening factor cached.
#[derive(Debug, Clone)]
pub struct TangentSpace {
    reference: SpdMatrix,
    whitener: Matrix,
}

impl TangentSpace {
    pub fn new(reference: SpdMatrix) -> Result<Self> {
        let whitener = spd_map(&reference, SpdFn::InvSqrt)?;
        Ok(TangentSpace {
            reference,
            whitener,
        })
    }

    pub fn reference(&self) -> &SpdMatrix {
        &self.reference
    }

    pub fn project(&self, c: &SpdMatrix) -> Result<Vec<f64>> {
        check_dims(c, &self.reference)?;
        let inner = c.matrix().congruence(&self.whitener).symmetrized();
        let s = sym_map(&inner, SpdFn::Log)?;
        let coords = upper_vectorize(&s);
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("tangent coordinates are not finite".into()));
        }
        Ok(coords)
    }
}

pub fn tangent_map(c: &SpdMatrix, reference: &SpdMatrix) -> Result<TangentVector> {
    let coords = TangentSpace::new(reference.clone())?.project(c)?;
    Ok(TangentVector {
        reference: reference.clone(),
        coords,
    })
}
