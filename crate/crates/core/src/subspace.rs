//! Sample covariance, Hermitian eigendecomposition, and the signal/noise
//! subspace split feeding both MUSIC and the CNN.
//!
//! Eigenvectors carry an inherent phase ambiguity; we fix it by rotating
//! each column so its largest-magnitude entry is real and positive. Without
//! this the CNN input tensor would differ between runs for the same
//! covariance matrix.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::channel::SnapshotBatch;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hermitian-symmetrized sample covariance.
#[derive(Clone, Debug)]
pub struct SampleCovariance {
    pub matrix: DMatrix<Complex64>,
    pub num_snapshots: usize,
}

/// Eigendecomposition of a sample covariance, eigenvalues descending.
#[derive(Clone, Debug)]
pub struct SubspaceSplit {
    /// Eigenvalues sorted descending.
    pub eigenvalues: Vec<f64>,
    /// Unitary matrix of eigenvectors (columns), phase-fixed.
    pub eigenvectors: DMatrix<Complex64>,
    /// Assumed number of sources; set by [`split_subspaces`].
    pub signal_dim: Option<usize>,
}

/// R_hat = (1/T) sum_t x(t) x(t)^H, symmetrized as (R + R^H) / 2.
pub fn sample_covariance(batch: &SnapshotBatch) -> SampleCovariance {
    let t = batch.num_snapshots();
    let n = batch.num_antennas();
    let mut r = DMatrix::<Complex64>::zeros(n, n);
    for x in &batch.snapshots {
        for i in 0..n {
            let xi = x[i];
            for j in 0..n {
                r[(i, j)] += xi * x[j].conj();
            }
        }
    }
    r /= Complex64::new(t as f64, 0.0);
    let herm = (&r + r.adjoint()) * Complex64::new(0.5, 0.0);
    SampleCovariance {
        matrix: herm,
        num_snapshots: t,
    }
}

fn hermitian_deviation(m: &DMatrix<Complex64>) -> f64 {
    (m - m.adjoint()).norm()
}

/// Rotate each eigenvector column so its largest-magnitude entry (ties:
/// lowest index) is real-positive.
fn phase_fix_columns(u: &mut DMatrix<Complex64>) {
    let (n, cols) = (u.nrows(), u.ncols());
    for c in 0..cols {
        let mut best = 0;
        let mut best_mag = 0.0;
        for r in 0..n {
            let mag = u[(r, c)].norm_sqr();
            if mag > best_mag + 1e-30 {
                best_mag = mag;
                best = r;
            }
        }
        let pivot = u[(best, c)];
        let mag = pivot.norm();
        if mag > 0.0 {
            let rot = pivot.conj() / mag;
            for r in 0..n {
                u[(r, c)] *= rot;
            }
            // pivot entry is now exactly real
            u[(best, c)] = Complex64::new(mag, 0.0);
        }
    }
}

/// Eigendecompose a Hermitian covariance; columns sorted by descending
/// eigenvalue, exact ties broken by lexicographic order of the phase-fixed
/// eigenvectors.
pub fn eigendecompose(cov: &SampleCovariance) -> Result<SubspaceSplit> {
    let n = cov.matrix.nrows();
    let scale = cov.matrix.norm().max(1.0);
    let dev = hermitian_deviation(&cov.matrix);
    if dev > 1e-8 * scale {
        return Err(Error::InvalidArgument(format!(
            "matrix is not Hermitian: deviation {dev:e} exceeds tolerance"
        )));
    }
    let eig = cov.matrix.clone().symmetric_eigen();
    let mut u = eig.eigenvectors;
    phase_fix_columns(&mut u);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let la = eig.eigenvalues[a];
        let lb = eig.eigenvalues[b];
        match lb.partial_cmp(&la).expect("finite eigenvalues") {
            std::cmp::Ordering::Equal => {
                // deterministic tie-break on the vectors themselves
                for r in 0..n {
                    let va = u[(r, a)];
                    let vb = u[(r, b)];
                    let ord = va
                        .re
                        .partial_cmp(&vb.re)
                        .unwrap()
                        .then(va.im.partial_cmp(&vb.im).unwrap());
                    if ord != std::cmp::Ordering::Equal {
                        return ord;
                    }
                }
                std::cmp::Ordering::Equal
            }
            other => other,
        }
    });
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigenvectors = DMatrix::from_fn(n, n, |r, c| u[(r, order[c])]);
    Ok(SubspaceSplit {
        eigenvalues,
        eigenvectors,
        signal_dim: None,
    })
}

/// Split into the top-k signal eigenvectors and the remaining noise ones.
pub fn split_subspaces(
    split: &SubspaceSplit,
    k: usize,
) -> Result<(DMatrix<Complex64>, DMatrix<Complex64>)> {
    let n = split.eigenvectors.nrows();
    if k == 0 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "source count k = {k} must satisfy 1 <= k < N = {n}"
        )));
    }
    let signal = split.eigenvectors.columns(0, k).into_owned();
    let noise = split.eigenvectors.columns(k, n - k).into_owned();
    Ok((signal, noise))
}

/// Stack Re(U) and Im(U) into the real 2xNxN CNN input tensor.
pub fn cnn_input_tensor(split: &SubspaceSplit) -> Tensor {
    let n = split.eigenvectors.nrows();
    let mut data = Vec::with_capacity(2 * n * n);
    for r in 0..n {
        for c in 0..n {
            data.push(split.eigenvectors[(r, c)].re);
        }
    }
    for r in 0..n {
        for c in 0..n {
            data.push(split.eigenvectors[(r, c)].im);
        }
    }
    Tensor::from_vec(&[2, n, n], data).expect("consistent shape")
}
