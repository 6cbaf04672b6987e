//! Small fixed-size vector and matrix helpers used throughout the crate.

pub type Vec3 = [f64; 3];

/// Row-major 3×3 matrix.
pub type Mat3 = [[f64; 3]; 3];

/// Row-major 4×4 matrix.
pub type Mat4 = [[f64; 4]; 4];

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn transpose(m: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}

pub fn det(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn column(m: &Mat3, j: usize) -> Vec3 {
    [m[0][j], m[1][j], m[2][j]]
}

/// Eigen-decomposition of a symmetric 3×3 matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymEigen {
    /// Eigenvalues in non-increasing order.
    pub values: Vec3,
    /// Eigenvectors stored as columns, matching `values`.
    pub vectors: Mat3,
    pub sweeps: usize,
}

pub const JACOBI_MAX_SWEEPS: usize = 30;
pub const JACOBI_OFF_TOL: f64 = 1e-14;

/// Relative gap under which two eigenvalues are treated as equal when sorting.
pub const EIGEN_TIE_TOL: f64 = 1e-12;

/// Cyclic Jacobi eigensolver for a symmetric 3×3 matrix.
///
/// Sweeps over the (0,1), (0,2), (1,2) pivots until the off-diagonal mass
/// drops below `JACOBI_OFF_TOL` times the Frobenius norm, or
/// `JACOBI_MAX_SWEEPS` sweeps have run. Only the upper triangle is read.
pub fn sym_eigen3(m: &Mat3) -> SymEigen {
    let mut a = *m;
    for i in 0..3 {
        for j in 0..i {
            a[i][j] = a[j][i];
        }
    }
    let mut v = IDENTITY3;
    let frob = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let mut sweeps = 0;

    while sweeps < JACOBI_MAX_SWEEPS {
        let off = (a[0][1] * a[0][1] + a[0][2] * a[0][2] + a[1][2] * a[1][2]).sqrt();
        if off <= JACOBI_OFF_TOL * frob || off == 0.0 {
            break;
        }
        sweeps += 1;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let apq = a[p][q];
            if apq == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * apq);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;

            // A <- Jᵀ A J with J the plane rotation in (p, q).
            for k in 0..3 {
                let akp = a[k][p];
                let akq = a[k][q];
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let apk = a[p][k];
                let aqk = a[q][k];
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            a[p][q] = 0.0;
            a[q][p] = 0.0;

            for row in v.iter_mut() {
                let vp = row[p];
                let vq = row[q];
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }

    // Insertion sort, descending. Values equal to within EIGEN_TIE_TOL keep
    // the solver's order so that an already-diagonal input maps to itself.
    let mut order = [0usize, 1, 2];
    let tie = EIGEN_TIE_TOL * frob;
    for i in 1..3 {
        let mut j = i;
        while j > 0 && a[order[j]][order[j]] > a[order[j - 1]][order[j - 1]] + tie {
            order.swap(j, j - 1);
            j -= 1;
        }
    }
    let mut values = [0.0; 3];
    let mut vectors = [[0.0; 3]; 3];
    for (dst, &src) in order.iter().enumerate() {
        // clamp so tied values stay non-increasing
        values[dst] = if dst == 0 {
            a[src][src]
        } else {
            a[src][src].min(values[dst - 1])
        };
        for r in 0..3 {
            vectors[r][dst] = v[r][src];
        }
    }
    SymEigen {
        values,
        vectors,
        sweeps,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_needs_no_sweeps() {
        let e = sym_eigen3(&[[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 2.0]]);
        assert_eq!(e.sweeps, 0);
        assert_eq!(e.values, [3.0, 2.0, 1.0]);
        assert_eq!(column(&e.vectors, 0), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn reconstructs_dense_symmetric_matrix() {
        let m = [[4.0, 1.0, -2.0], [1.0, 2.0, 0.5], [-2.0, 0.5, 3.0]];
        let e = sym_eigen3(&m);
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|k| e.vectors[i][k] * e.values[k] * e.vectors[j][k]).sum();
                assert!((r - m[i][j]).abs() < 1e-12, "{i},{j}: {r} vs {}", m[i][j]);
            }
        }
        assert!(e.values[0] >= e.values[1] && e.values[1] >= e.values[2]);
        let vt_v = mat_mul(&transpose(&e.vectors), &e.vectors);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((vt_v[i][j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_matrix_is_fixed_point() {
        let e = sym_eigen3(&[[0.0; 3]; 3]);
        assert_eq!(e.values, [0.0; 3]);
        assert_eq!(e.sweeps, 0);
    }

    #[test]
    fn determinant_and_cross_agree() {
        let a = [1.0, 2.0, 0.5];
        let b = [-0.3, 0.7, 1.1];
        let c = [0.2, -0.4, 0.9];
        let m = [a, b, c];
        assert!((det(&m) - dot(a, cross(b, c))).abs() < 1e-14);
    }
}
