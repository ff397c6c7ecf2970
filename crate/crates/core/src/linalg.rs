//! Small dense helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Number of unordered parameter pairs `(r, s)` with `r <= s`.
#[inline]
pub fn pair_count(p: usize) -> usize {
    p * (p + 1) / 2
}

/// Packed index of the pair `(r, s)`, symmetric in its arguments.
#[inline]
pub fn pair_index(r: usize, s: usize, p: usize) -> usize {
    let (r, s) = if r <= s { (r, s) } else { (s, r) };
    r * p - r * (r + 1) / 2 + s
}

/// Expands a packed upper triangle into a full symmetric matrix.
pub fn unpack_symmetric(packed: &[f64], p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |r, s| packed[pair_index(r, s, p)])
}

/// Packs the upper triangle of a (square) matrix.
pub fn pack_upper(m: &DMatrix<f64>) -> Vec<f64> {
    let p = m.nrows();
    let mut out = vec![0.0; pair_count(p)];
    for r in 0..p {
        for s in r..p {
            out[pair_index(r, s, p)] = m[(r, s)];
        }
    }
    out
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for r in 0..m.nrows() {
        for s in 0..r {
            worst = worst.max((m[(r, s)] - m[(s, r)]).abs());
        }
    }
    worst
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenpairs of a symmetric matrix, eigenvalues ascending.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, Vec<DVector<f64>>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = order
        .iter()
        .map(|&i| eig.eigenvectors.column(i).into_owned())
        .collect();
    (values, vectors)
}

/// Spectral norm of a symmetric matrix: `sup_{|v|=1} |v' J v|`.
pub fn spectral_norm_sym(m: &DMatrix<f64>) -> f64 {
    let (values, _) = sorted_eigen(m);
    values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Eigenvector achieving the spectral norm of a symmetric matrix.
pub fn dominant_direction(m: &DMatrix<f64>) -> DVector<f64> {
    let (values, vectors) = sorted_eigen(m);
    let idx = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap_or(0);
    vectors[idx].clone()
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect())
        .collect()
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

pub(crate) mod serde_matrix {
    use nalgebra::DMatrix;
    use serde::Serializer;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(super::matrix_rows(m))
    }

    pub mod option {
        use nalgebra::DMatrix;
        use serde::Serializer;

        pub fn serialize<S: Serializer>(m: &Option<DMatrix<f64>>, s: S) -> Result<S::Ok, S::Error> {
            match m {
                Some(m) => s.serialize_some(&super::super::matrix_rows(m)),
                None => s.serialize_none(),
            }
        }
    }
}

pub(crate) mod serde_vector {
    use nalgebra::DVector;
    use serde::Serializer;

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn serialize_many<S: Serializer>(vs: &[DVector<f64>], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(vs.iter().map(|v| v.iter().copied().collect::<Vec<f64>>()))
    }
}
