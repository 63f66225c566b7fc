//! Thin SVD via one-sided Jacobi rotations.
//!
//! The working matrix is always the tall orientation (inputs with more
//! columns than rows are transposed first), so rotations act on at most
//! min(m, n) columns. Accuracy is favored over speed: singular layer
//! matrices are small enough that cyclic sweeps converge in a handful of
//! passes.

use super::{Tensor, TensorError};

const SWEEP_LIMIT: usize = 100;
const ORTHO_TOL: f64 = 1e-14;

/// Thin singular value decomposition `M = U · diag(S) · Vᵀ`.
///
/// `u` is m×r and `v` is n×r with orthonormal columns; `s` is non-increasing
/// and non-negative, with r = min(m, n) at full rank. The sign convention is
/// deterministic: the largest-magnitude entry of each `u` column is
/// non-negative, with `v` flipped to match.
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

impl SvdFactors {
    /// Keep the leading k components.
    pub fn truncate(&self, k: usize) -> SvdFactors {
        let k = k.min(self.s.len());
        SvdFactors {
            u: take_columns(&self.u, k),
            s: self.s[..k].to_vec(),
            v: take_columns(&self.v, k),
        }
    }

    /// `U · diag(S) · Vᵀ`.
    pub fn reconstruct(&self) -> Result<Tensor, TensorError> {
        let (m, r) = self.u.dims2()?;
        let (n, r2) = self.v.dims2()?;
        debug_assert_eq!(r, r2);
        let mut out = Tensor::zeros(vec![m, n], self.u.dtype());
        for j in 0..r {
            let s = self.s[j];
            if s == 0.0 {
                continue;
            }
            for i in 0..m {
                let us = self.u.get2(i, j) * s;
                if us == 0.0 {
                    continue;
                }
                for l in 0..n {
                    let cur = out.get2(i, l);
                    out.set2(i, l, cur + us * self.v.get2(l, j));
                }
            }
        }
        Ok(out)
    }
}

fn take_columns(t: &Tensor, k: usize) -> Tensor {
    let (rows, cols) = t.dims2().expect("factor matrices are 2-D");
    let mut out = Tensor::zeros(vec![rows, k], t.dtype());
    for i in 0..rows {
        for j in 0..k.min(cols) {
            out.set2(i, j, t.get2(i, j));
        }
    }
    out
}

impl Tensor {
    /// Thin SVD with r = min(m, n). Deterministic for fixed input.
    pub fn svd(&self) -> Result<SvdFactors, TensorError> {
        let (m, n) = self.dims2()?;
        let transposed = m < n;
        let work_src = if transposed {
            self.transpose()?
        } else {
            self.clone()
        };
        let (p, q) = work_src.dims2()?;
        debug_assert!(p >= q);

        // Column-major working copy: rotations touch whole columns.
        let mut cols: Vec<Vec<f64>> = (0..q)
            .map(|j| (0..p).map(|i| work_src.get2(i, j)).collect())
            .collect();
        let mut vrot: Vec<Vec<f64>> = (0..q)
            .map(|j| {
                let mut e = vec![0.0; q];
                e[j] = 1.0;
                e
            })
            .collect();

        let mut converged = q < 2;
        let mut sweeps = 0;
        while !converged {
            converged = true;
            sweeps += 1;
            if sweeps > SWEEP_LIMIT {
                return Err(TensorError::NoConvergence(SWEEP_LIMIT));
            }
            for i in 0..q - 1 {
                for j in i + 1..q {
                    if jacobi_rotate(&mut cols, &mut vrot, i, j) {
                        converged = false;
                    }
                }
            }
        }

        // Singular values are the column norms of the rotated matrix.
        let mut order: Vec<usize> = (0..q).collect();
        let norms: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
        order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));

        let mut s = Vec::with_capacity(q);
        let mut left: Vec<Vec<f64>> = Vec::with_capacity(q);
        let mut right: Vec<Vec<f64>> = Vec::with_capacity(q);
        for &idx in &order {
            let sigma = norms[idx];
            s.push(sigma);
            if sigma > 0.0 {
                left.push(cols[idx].iter().map(|&x| x / sigma).collect());
            } else {
                left.push(vec![0.0; p]); // filled in below
            }
            right.push(vrot[idx].clone());
        }

        // Exactly-zero singular values leave empty left columns; complete
        // them to an orthonormal set so U stays a valid thin factor.
        for j in 0..q {
            if s[j] > 0.0 {
                continue;
            }
            left[j] = orthonormal_completion(&left, j, p);
        }

        let (u_work, v_work) = (pack(&left, p), pack(&right, q));
        let (mut u, mut v) = if transposed {
            (v_work, u_work)
        } else {
            (u_work, v_work)
        };
        fix_signs(&mut u, &mut v);
        Ok(SvdFactors { u, s, v })
    }
}

/// One Jacobi rotation on columns (i, j); returns true if a rotation fired.
fn jacobi_rotate(cols: &mut [Vec<f64>], vrot: &mut [Vec<f64>], i: usize, j: usize) -> bool {
    let a = dot(&cols[i], &cols[i]);
    let b = dot(&cols[j], &cols[j]);
    let d = dot(&cols[i], &cols[j]);
    if d == 0.0 || d * d <= ORTHO_TOL * ORTHO_TOL * a * b {
        return false;
    }
    let zeta = (b - a) / (2.0 * d);
    let t = if zeta >= 0.0 {
        1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
    } else {
        -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
    };
    let c = 1.0 / (1.0 + t * t).sqrt();
    let s = c * t;
    rotate_pair(cols, i, j, c, s);
    rotate_pair(vrot, i, j, c, s);
    true
}

fn rotate_pair(m: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    for k in 0..m[i].len() {
        let (x, y) = (m[i][k], m[j][k]);
        m[i][k] = c * x - s * y;
        m[j][k] = s * x + c * y;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// First standard basis vector with a non-degenerate residual against the
/// existing columns, Gram-Schmidt orthogonalized and normalized.
fn orthonormal_completion(cols: &[Vec<f64>], skip: usize, dim: usize) -> Vec<f64> {
    for basis in 0..dim {
        let mut cand = vec![0.0; dim];
        cand[basis] = 1.0;
        for (idx, col) in cols.iter().enumerate() {
            if idx == skip {
                continue;
            }
            let proj = dot(&cand, col);
            for k in 0..dim {
                cand[k] -= proj * col[k];
            }
        }
        let r = norm(&cand);
        if r > 0.5 {
            return cand.iter().map(|&x| x / r).collect();
        }
    }
    unreachable!("fewer columns than ambient dimension always leaves a completion");
}

fn pack(cols: &[Vec<f64>], rows: usize) -> Tensor {
    let q = cols.len();
    let mut t = Tensor::zeros(vec![rows, q], super::DType::F32);
    for (j, col) in cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            t.set2(i, j, x);
        }
    }
    t
}

/// Make the largest-magnitude entry of each U column non-negative.
fn fix_signs(u: &mut Tensor, v: &mut Tensor) {
    let (m, r) = u.dims2().unwrap();
    let (n, _) = v.dims2().unwrap();
    for j in 0..r {
        let mut best = 0.0f64;
        let mut best_val = 0.0f64;
        for i in 0..m {
            let x = u.get2(i, j);
            if x.abs() > best {
                best = x.abs();
                best_val = x;
            }
        }
        if best_val < 0.0 {
            for i in 0..m {
                u.set2(i, j, -u.get2(i, j));
            }
            for i in 0..n {
                v.set2(i, j, -v.get2(i, j));
            }
        }
    }
}
