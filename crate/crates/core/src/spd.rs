//! Unconstrained parameterization of symmetric positive-definite matrices.
//!
//! An `n x n` SPD matrix `A` is written as `A = L Lᵀ` with `L` lower
//! triangular and positive on the diagonal. `L` is in turn encoded by
//! `n(n+1)/2` free reals: the strictly-lower entries in row-major order,
//! followed by the logarithms of the diagonal. Every real vector decodes to
//! an SPD matrix and every SPD matrix has exactly one encoding.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Var};
use crate::error::{Error, Result};

/// Number of free parameters for an `n x n` SPD matrix.
pub const fn param_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Position in `theta` of the entry `L[i][j]` (0-based), `None` above the diagonal.
///
/// With 1-based `(i, j)` the layout is: diagonal `L_ii` at `n(n-1)/2 + i`,
/// strictly-lower `L_ij` at `(i-2)(i-1)/2 + j`. This is the only place the
/// translation to 0-based indexing happens.
pub fn param_index(n: usize, i: usize, j: usize) -> Option<usize> {
    debug_assert!(i < n && j < n);
    match i.cmp(&j) {
        std::cmp::Ordering::Less => None,
        std::cmp::Ordering::Equal => Some(n * (n - 1) / 2 + i),
        std::cmp::Ordering::Greater => Some(i * (i - 1) / 2 + j),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpdParamVector {
    n: usize,
    theta: Vec<f64>,
}

impl SpdParamVector {
    pub fn new(n: usize, theta: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return Err(Error::ParamShape {
                expected: 1,
                got: 0,
            });
        }
        if theta.len() != param_len(n) {
            return Err(Error::ParamShape {
                expected: param_len(n),
                got: theta.len(),
            });
        }
        if let Some(k) = theta.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("theta[{k}] = {}", theta[k])));
        }
        Ok(Self { n, theta })
    }

    /// Parameters of the identity matrix.
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            theta: vec![0.0; param_len(n)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.theta
    }
}

/// Lower-triangular factor with a strictly positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular(DMatrix<f64>);

impl LowerTriangular {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Shape {
                op: "lower_triangular",
                lhs: m.shape(),
                rhs: m.shape(),
            });
        }
        let n = m.nrows();
        for i in 0..n {
            if !(m[(i, i)] > 0.0) {
                return Err(Error::Definiteness(format!(
                    "diagonal entry {i} is {}",
                    m[(i, i)]
                )));
            }
            for j in i + 1..n {
                if m[(i, j)] != 0.0 {
                    return Err(Error::Contract(format!("entry ({i},{j}) above diagonal")));
                }
            }
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SpdMatrix(DMatrix<f64>);

impl SpdMatrix {
    /// Validates symmetry (relative tolerance 1e-12) and definiteness.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Shape {
                op: "spd",
                lhs: m.shape(),
                rhs: m.shape(),
            });
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let asym = (&m - m.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::Definiteness(format!(
                "asymmetry {asym:e} exceeds tolerance"
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("spd matrix entry".into()));
        }
        let sym = (&m + m.transpose()) * 0.5;
        if sym.clone().cholesky().is_none() {
            return Err(Error::Definiteness("cholesky factorization failed".into()));
        }
        Ok(Self(sym))
    }

    pub fn identity(n: usize) -> Self {
        Self(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(d: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(
            &nalgebra::DVector::from_column_slice(d),
        ))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for SpdMatrix {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Contract("SPD matrix rows must form a square".into()));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }
}

impl From<SpdMatrix> for Vec<Vec<f64>> {
    fn from(m: SpdMatrix) -> Self {
        m.to_rows()
    }
}

pub fn theta_to_lower(p: &SpdParamVector) -> LowerTriangular {
    let n = p.n;
    let l = DMatrix::from_fn(n, n, |i, j| match param_index(n, i, j) {
        None => 0.0,
        Some(k) if i == j => p.theta[k].exp(),
        Some(k) => p.theta[k],
    });
    LowerTriangular(l)
}

pub fn lower_to_spd(l: &LowerTriangular) -> SpdMatrix {
    let a = &l.0 * l.0.transpose();
    // L Lᵀ is symmetric in exact arithmetic; make it bitwise so.
    SpdMatrix((&a + a.transpose()) * 0.5)
}

pub fn theta_to_spd(p: &SpdParamVector) -> SpdMatrix {
    lower_to_spd(&theta_to_lower(p))
}

pub fn spd_to_theta(a: &SpdMatrix) -> Result<SpdParamVector> {
    let n = a.dim();
    let chol =
        a.0.clone()
            .cholesky()
            .ok_or_else(|| Error::Definiteness("cholesky factorization failed".into()))?;
    let l = chol.l();
    let mut theta = vec![0.0; param_len(n)];
    for i in 0..n {
        for j in 0..=i {
            let k = param_index(n, i, j).expect("lower entry");
            theta[k] = if i == j { l[(i, i)].ln() } else { l[(i, j)] };
        }
    }
    SpdParamVector::new(n, theta)
}

/// Records `theta -> L(theta)` on the tape. `theta` must be a column of length `n(n+1)/2`.
pub fn lower_var(tape: &mut Tape, theta: Var, n: usize) -> Result<Var> {
    if theta.shape() != (param_len(n), 1) {
        return Err(Error::ParamShape {
            expected: param_len(n),
            got: theta.rows() * theta.cols(),
        });
    }
    let t = tape.value(theta).clone();
    let value = DMatrix::from_fn(n, n, |i, j| match param_index(n, i, j) {
        None => 0.0,
        Some(k) if i == j => t[k].exp(),
        Some(k) => t[k],
    });
    let diag_exp: Vec<f64> = (0..n).map(|i| value[(i, i)]).collect();
    tape.custom(
        &[theta],
        value,
        Box::new(move |g: &DMatrix<f64>| {
            let mut gt = DMatrix::zeros(param_len(n), 1);
            for i in 0..n {
                for j in 0..=i {
                    let k = param_index(n, i, j).expect("lower entry");
                    gt[k] = if i == j {
                        g[(i, i)] * diag_exp[i]
                    } else {
                        g[(i, j)]
                    };
                }
            }
            vec![gt]
        }),
    )
}

/// Records `theta -> L(theta) L(theta)ᵀ` on the tape.
pub fn spd_var(tape: &mut Tape, theta: Var, n: usize) -> Result<Var> {
    let l = lower_var(tape, theta, n)?;
    let lt = tape.transpose(l);
    tape.matmul(l, lt)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn index_map_is_a_bijection_onto_param_slots() {
        for n in 1..=7 {
            let mut seen = vec![false; param_len(n)];
            for i in 0..n {
                for j in 0..n {
                    match param_index(n, i, j) {
                        None => assert!(j > i),
                        Some(k) => {
                            assert!(j <= i);
                            assert!(!seen[k], "slot {k} hit twice for n={n}");
                            seen[k] = true;
                        }
                    }
                }
            }
            assert!(seen.iter().all(|s| *s));
        }
    }

    #[test]
    fn index_map_matches_one_based_formula() {
        // Hand enumeration for n = 3 (1-based): L21 -> 1, L31 -> 2, L32 -> 3,
        // L11 -> 4, L22 -> 5, L33 -> 6.
        let expect = [
            ((1, 0), 0),
            ((2, 0), 1),
            ((2, 1), 2),
            ((0, 0), 3),
            ((1, 1), 4),
            ((2, 2), 5),
        ];
        for ((i, j), k) in expect {
            assert_eq!(param_index(3, i, j), Some(k));
        }
    }

    #[test]
    fn zero_theta_decodes_to_identity() {
        let l = theta_to_lower(&SpdParamVector::new(2, vec![0.0; 3]).unwrap());
        assert_eq!(l.matrix(), &DMatrix::identity(2, 2));
    }

    #[test]
    fn unit_offdiagonal_theta() {
        let l = theta_to_lower(&SpdParamVector::new(2, vec![1.0, 0.0, 0.0]).unwrap());
        assert_eq!(
            l.matrix(),
            &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0])
        );
        let a = lower_to_spd(&l);
        assert_eq!(
            a.matrix(),
            &DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0])
        );
    }

    #[test]
    fn three_by_three_layout() {
        let theta = vec![0.5, -0.2, 0.1, 0.0, 2f64.ln(), 3f64.ln()];
        let l = theta_to_lower(&SpdParamVector::new(3, theta).unwrap());
        let m = l.matrix();
        assert!(close(m[(0, 0)], 1.0, 1e-15));
        assert!(close(m[(1, 1)], 2.0, 1e-15));
        assert!(close(m[(2, 2)], 3.0, 1e-15));
        assert_eq!((m[(1, 0)], m[(2, 0)], m[(2, 1)]), (0.5, -0.2, 0.1));
        assert_eq!((m[(0, 1)], m[(0, 2)], m[(1, 2)]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn inverse_map_examples() {
        let t = spd_to_theta(&SpdMatrix::identity(2)).unwrap();
        assert_eq!(t.as_slice(), &[0.0, 0.0, 0.0]);

        let a = SpdMatrix::new(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 2.0])).unwrap();
        let t = spd_to_theta(&a).unwrap();
        for (got, want) in t.as_slice().iter().zip([1.0, 0.0, 0.0]) {
            assert!(close(*got, want, 1e-14));
        }

        let t = spd_to_theta(&SpdMatrix::from_diagonal(&[4.0, 9.0]).unwrap()).unwrap();
        for (got, want) in t.as_slice().iter().zip([0.0, 2f64.ln(), 3f64.ln()]) {
            assert!(close(*got, want, 1e-14));
        }
    }

    #[test]
    fn rejects_bad_shapes_and_non_spd() {
        assert!(matches!(
            SpdParamVector::new(3, vec![0.0; 5]),
            Err(Error::ParamShape {
                expected: 6,
                got: 5
            })
        ));
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(
            SpdMatrix::new(indefinite),
            Err(Error::Definiteness(_))
        ));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(SpdMatrix::new(asym).is_err());
    }

    #[test]
    fn tape_decoding_matches_plain_decoding() {
        let theta = vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9];
        let mut tape = Tape::new();
        let v = tape.leaf(DMatrix::from_column_slice(6, 1, &theta));
        let a = spd_var(&mut tape, v, 3).unwrap();
        let plain = theta_to_spd(&SpdParamVector::new(3, theta).unwrap());
        assert!((tape.value(a) - plain.matrix()).amax() < 1e-15);
    }
}
