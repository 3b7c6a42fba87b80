//! Temporal independent component analysis of voxel time curves.
//!
//! Fits a mixing model X = A S on an N x M matrix of voxel curves: columns
//! of A are temporal source curves, rows of S are per-voxel scores. Fitting
//! runs symmetric fixed-point FastICA with the log-cosh contrast on
//! PCA-whitened data. Components are ranked by the mean squared error of
//! their rank-1 reconstruction of the data, and unseen curves are projected
//! onto the retained (non-orthogonal) basis by least squares.
//!
//! A PCA variant with the same model shape serves as the baseline
//! decomposition.

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::VoxelMatrix;

const FASTICA_TOL: f64 = 1e-6;
const FASTICA_MAX_ITER: usize = 500;
/// Relative eigenvalue floor below which the covariance is treated as
/// rank-deficient for the requested component count.
const RANK_TOL: f64 = 1e-12;
/// Gram matrices with a larger condition number are rejected by `project`.
const COND_LIMIT: f64 = 1e12;

/// A fitted temporal decomposition.
///
/// `mixing` columns are the temporal curves a_k; `whitening` and `mean`
/// reproduce the transform applied before the fixed-point iteration so that
/// projection of new data needs no refit. `order` permutes components
/// ascending by `mse`.
#[derive(Debug, Clone, PartialEq)]
pub struct IcaModel {
    pub n_time: usize,
    pub n_components: usize,
    /// N x p temporal mixing matrix.
    pub mixing: DMatrix<f64>,
    /// p x N whitening transform (applied after centering).
    pub whitening: DMatrix<f64>,
    /// N-vector mean curve removed before whitening.
    pub mean: DVector<f64>,
    /// Component indices sorted ascending by `mse`.
    pub order: Vec<usize>,
    /// Rank-1 reconstruction MSE per component (unsorted).
    pub mse: Vec<f64>,
    pub seed: u64,
}

/// Per-voxel scores on the retained components.
pub type ScoreVector = Vec<f64>;

fn centered(x: &VoxelMatrix) -> (DMatrix<f64>, DVector<f64>) {
    let mean = DVector::from_iterator(
        x.n_time,
        x.values.row_iter().map(|r| r.mean()),
    );
    let mut xc = x.values.clone();
    for mut col in xc.column_iter_mut() {
        col -= &mean;
    }
    (xc, mean)
}

/// Eigen pairs of a symmetric matrix, sorted by descending eigenvalue.
fn sorted_eigh(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let values: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (j, &i) in idx.iter().enumerate() {
        vectors.set_column(j, &eig.eigenvectors.column(i));
    }
    (values, vectors)
}

/// W <- (W W^T)^{-1/2} W
fn symmetric_decorrelation(w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (values, vectors) = sorted_eigh(&(w * w.transpose()));
    if values.iter().any(|&v| v <= 0.0) {
        return Err(Error::Rank(
            "degenerate unmixing matrix during decorrelation".into(),
        ));
    }
    let inv_sqrt = DMatrix::from_diagonal(&DVector::from_iterator(
        values.len(),
        values.iter().map(|v| 1.0 / v.sqrt()),
    ));
    Ok(&vectors * inv_sqrt * vectors.transpose() * w)
}

/// Deterministic sign convention: the largest-magnitude entry of each
/// mixing column is made positive (first index wins ties).
fn fix_signs(mixing: &mut DMatrix<f64>, whitening_rows: Option<&mut DMatrix<f64>>) {
    let flips: Vec<bool> = (0..mixing.ncols())
        .map(|k| {
            let col = mixing.column(k);
            let mut best = 0usize;
            for i in 1..col.len() {
                if col[i].abs() > col[best].abs() {
                    best = i;
                }
            }
            col[best] < 0.0
        })
        .collect();
    for (k, &flip) in flips.iter().enumerate() {
        if flip {
            mixing.column_mut(k).neg_mut();
        }
    }
    if let Some(rows) = whitening_rows {
        for (k, &flip) in flips.iter().enumerate() {
            if flip {
                rows.row_mut(k).neg_mut();
            }
        }
    }
}

fn validate_fit_input(x: &VoxelMatrix, p: usize) -> Result<()> {
    if p == 0 {
        return Err(Error::Argument("component count must be >= 1".into()));
    }
    if p > x.n_time {
        return Err(Error::Argument(format!(
            "requested {p} components but curves have only {} time points",
            x.n_time
        )));
    }
    if x.n_time > x.n_voxels {
        return Err(Error::Argument(format!(
            "need at least as many voxels ({}) as time points ({})",
            x.n_voxels, x.n_time
        )));
    }
    Ok(())
}

/// (whitened p x M data, p x N whitening, mean curve, eigenvalues).
type Whitened = (DMatrix<f64>, DMatrix<f64>, DVector<f64>, Vec<f64>);

fn whiten(x: &VoxelMatrix, p: usize) -> Result<Whitened> {
    let (xc, mean) = centered(x);
    let m = x.n_voxels as f64;
    let cov = &xc * xc.transpose() / m;
    let (values, vectors) = sorted_eigh(&cov);
    let top = values[0];
    if top <= 0.0 || values[p - 1] <= RANK_TOL * top {
        return Err(Error::Rank(format!(
            "covariance is rank-deficient at {p} components (eigenvalue {:.3e})",
            values[p - 1]
        )));
    }
    let mut whitening = DMatrix::zeros(p, x.n_time);
    for k in 0..p {
        let scale = 1.0 / values[k].sqrt();
        for i in 0..x.n_time {
            whitening[(k, i)] = vectors[(i, k)] * scale;
        }
    }
    let z = &whitening * &xc;
    Ok((z, whitening, mean, values))
}

/// Fit the FastICA temporal decomposition with `p` components.
///
/// Symmetric fixed-point updates with the log-cosh contrast, symmetric
/// decorrelation each iteration, convergence when the minimum diagonal of
/// |W_k W_{k-1}^T| exceeds 1 - 1e-6 (at most 500 iterations).
pub fn fit_ica(x: &VoxelMatrix, p: usize, seed: u64) -> Result<IcaModel> {
    validate_fit_input(x, p)?;
    let (z, whitening, mean, eigenvalues) = whiten(x, p)?;
    let m = x.n_voxels as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = DMatrix::from_fn(p, p, |_, _| {
        // Box-Muller keeps the dependency surface small and the stream stable.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    });
    let mut w = symmetric_decorrelation(&init)?;

    let mut converged = false;
    for _ in 0..FASTICA_MAX_ITER {
        let y = &w * &z; // p x M
        let g = y.map(f64::tanh);
        // E[g'(y)] per component: g'(u) = 1 - tanh(u)^2.
        let gprime_mean = DVector::from_iterator(
            p,
            g.row_iter().map(|row| {
                row.iter().map(|v| 1.0 - v * v).sum::<f64>() / m
            }),
        );
        let mut w_new = &g * z.transpose() / m;
        for k in 0..p {
            let mut row = w_new.row_mut(k);
            row -= w.row(k) * gprime_mean[k];
        }
        let w_new = symmetric_decorrelation(&w_new)?;
        let overlap = &w_new * w.transpose();
        let min_diag = (0..p)
            .map(|k| overlap[(k, k)].abs())
            .fold(f64::INFINITY, f64::min);
        w = w_new;
        if min_diag > 1.0 - FASTICA_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Convergence {
            iterations: FASTICA_MAX_ITER,
        });
    }

    // A = E_p D_p^{1/2} W^T, expressed through the stored whitening:
    // pinv(K) = E_p D_p^{1/2} since K = D_p^{-1/2} E_p^T.
    let n = x.n_time;
    let mut dewhiten = DMatrix::zeros(n, p);
    for k in 0..p {
        for i in 0..n {
            dewhiten[(i, k)] = whitening[(k, i)] * eigenvalues[k];
        }
    }
    let mut mixing = dewhiten * w.transpose();
    fix_signs(&mut mixing, None);

    let mut model = IcaModel {
        n_time: n,
        n_components: p,
        mixing,
        whitening,
        mean,
        order: (0..p).collect(),
        mse: vec![0.0; p],
        seed,
    };
    let (order, mse) = rank_mse(x, &model)?;
    model.order = order;
    model.mse = mse;
    Ok(model)
}

/// Fit the PCA baseline with the same model shape.
///
/// Mixing columns are the top-p unit principal temporal eigenvectors in
/// descending eigenvalue order; `order` follows that eigenvalue order.
pub fn fit_pca(x: &VoxelMatrix, p: usize) -> Result<IcaModel> {
    validate_fit_input(x, p)?;
    let (xc, mean) = centered(x);
    let m = x.n_voxels as f64;
    let cov = &xc * xc.transpose() / m;
    let (values, vectors) = sorted_eigh(&cov);
    let top = values[0];
    if top <= 0.0 || values[p - 1] <= RANK_TOL * top {
        return Err(Error::Rank(format!(
            "covariance is rank-deficient at {p} components (eigenvalue {:.3e})",
            values[p - 1]
        )));
    }
    let n = x.n_time;
    let mut mixing = DMatrix::zeros(n, p);
    let mut whitening = DMatrix::zeros(p, n);
    for k in 0..p {
        let scale = 1.0 / values[k].sqrt();
        for i in 0..n {
            mixing[(i, k)] = vectors[(i, k)];
            whitening[(k, i)] = vectors[(i, k)] * scale;
        }
    }
    fix_signs(&mut mixing, Some(&mut whitening));
    let mut model = IcaModel {
        n_time: n,
        n_components: p,
        mixing,
        whitening,
        mean,
        order: (0..p).collect(),
        mse: vec![0.0; p],
        seed: 0,
    };
    // Eigenvalue order is kept; only the MSE values are recomputed.
    let (_, mse) = rank_mse(x, &model)?;
    model.mse = mse;
    Ok(model)
}

/// Rank components by the mean squared error of their rank-1 reconstruction
/// of the (centered) data: MSE(k) = mean over all entries of
/// (x_i(t_j) - a_jk s_ki)^2. Returns (ascending order, per-component MSE).
pub fn rank_mse(x: &VoxelMatrix, model: &IcaModel) -> Result<(Vec<usize>, Vec<f64>)> {
    if x.n_time != model.n_time {
        return Err(Error::Argument(
            "voxel matrix time length does not match model".into(),
        ));
    }
    let mut xc = x.values.clone();
    for mut col in xc.column_iter_mut() {
        col -= &model.mean;
    }
    let scores = least_squares_scores(&model.mixing, &xc)?;
    let p = model.n_components;
    let (n, m) = (x.n_time, x.n_voxels);
    let denom = (n * m) as f64;
    let mut mse = Vec::with_capacity(p);
    for k in 0..p {
        let a = model.mixing.column(k);
        let mut acc = 0.0;
        for j in 0..m {
            let s = scores[(k, j)];
            for i in 0..n {
                let r = xc[(i, j)] - a[i] * s;
                acc += r * r;
            }
        }
        mse.push(acc / denom);
    }
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| mse[a].partial_cmp(&mse[b]).unwrap().then(a.cmp(&b)));
    Ok((order, mse))
}

/// Least-squares coordinates of every column of `data` on `basis`:
/// (A^T A)^{-1} A^T data.
fn least_squares_scores(basis: &DMatrix<f64>, data: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = basis.transpose() * basis;
    check_conditioning(&gram)?;
    let chol = gram
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Rank("mixing Gram matrix is not positive definite".into()))?;
    Ok(chol.solve(&(basis.transpose() * data)))
}

fn check_conditioning(gram: &DMatrix<f64>) -> Result<()> {
    let (values, _) = sorted_eigh(gram);
    let max = values[0];
    let min = values[values.len() - 1];
    if min <= 0.0 || max / min > COND_LIMIT {
        return Err(Error::Conditioning {
            cond: if min > 0.0 { max / min } else { f64::INFINITY },
        });
    }
    Ok(())
}

impl IcaModel {
    /// Mixing columns restricted to the first `h` components in MSE order.
    pub fn retained_basis(&self, h: usize) -> Result<DMatrix<f64>> {
        if h == 0 || h > self.n_components {
            return Err(Error::Argument(format!(
                "retained component count {h} outside 1..={}",
                self.n_components
            )));
        }
        let mut basis = DMatrix::zeros(self.n_time, h);
        for (j, &k) in self.order[..h].iter().enumerate() {
            basis.set_column(j, &self.mixing.column(k));
        }
        Ok(basis)
    }

    /// Subtract the stored mean curve.
    pub fn center_curve(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n_time {
            return Err(Error::Argument("curve length does not match model".into()));
        }
        Ok(x.iter().zip(self.mean.iter()).map(|(v, m)| v - m).collect())
    }

    /// Reusable projector onto the first `h` retained components.
    pub fn projection(&self, h: usize) -> Result<Projection> {
        let basis = self.retained_basis(h)?;
        let gram = basis.transpose() * &basis;
        check_conditioning(&gram)?;
        let chol = gram
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Rank("Gram matrix is not positive definite".into()))?;
        let solve_t = chol.solve(&basis.transpose());
        Ok(Projection { basis, solve_t })
    }

    /// Orthogonal projector matrix P = A (A^T A)^{-1} A^T for the first `h`
    /// retained components.
    pub fn projector_matrix(&self, h: usize) -> Result<DMatrix<f64>> {
        let proj = self.projection(h)?;
        Ok(&proj.basis * &proj.solve_t)
    }
}

/// Projection coordinates of a curve onto a (possibly non-orthogonal) basis.
#[derive(Debug, Clone)]
pub struct Projection {
    basis: DMatrix<f64>,
    /// (A^T A)^{-1} A^T
    solve_t: DMatrix<f64>,
}

impl Projection {
    pub fn n_components(&self) -> usize {
        self.basis.ncols()
    }

    /// Scores s = (A^T A)^{-1} A^T x. The image A s is the orthogonal
    /// projection of x onto span(A).
    pub fn scores(&self, x: &[f64]) -> Result<ScoreVector> {
        if x.len() != self.basis.nrows() {
            return Err(Error::Argument("curve length does not match basis".into()));
        }
        let v = DVector::from_column_slice(x);
        Ok((&self.solve_t * v).iter().cloned().collect())
    }

    /// Batch scores for each column of an N x M matrix; output is h x M.
    pub fn scores_matrix(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.nrows() != self.basis.nrows() {
            return Err(Error::Argument("matrix rows do not match basis".into()));
        }
        Ok(&self.solve_t * x)
    }
}

/// Project one curve onto the first `h` retained components of the model.
///
/// The input is treated as already centered; use
/// [`IcaModel::center_curve`] first when scoring raw voxel curves.
pub fn project(x: &[f64], model: &IcaModel, h: usize) -> Result<ScoreVector> {
    model.projection(h)?.scores(x)
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub(crate) struct MatrixB64 {
    rows: usize,
    cols: usize,
    /// base64 of row-major little-endian f64 values.
    data: String,
}

impl MatrixB64 {
    pub(crate) fn encode(m: &DMatrix<f64>) -> Self {
        let mut bytes = Vec::with_capacity(m.len() * 8);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                bytes.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: BASE64.encode(bytes),
        }
    }

    pub(crate) fn decode(&self) -> Result<DMatrix<f64>> {
        let bytes = BASE64
            .decode(&self.data)
            .map_err(|e| Error::Format(format!("bad base64 matrix payload: {e}")))?;
        if bytes.len() != self.rows * self.cols * 8 {
            return Err(Error::Size {
                expected: self.rows * self.cols * 8,
                actual: bytes.len(),
            });
        }
        let mut values = Vec::with_capacity(self.rows * self.cols);
        for chunk in bytes.chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &values))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct IcaModelFile {
    n_time: usize,
    n_components: usize,
    mixing: MatrixB64,
    whitening_matrix: MatrixB64,
    whitening_mean: MatrixB64,
    order: Vec<usize>,
    mse: Vec<f64>,
    seed: u64,
}

impl IcaModel {
    pub fn to_json(&self) -> Result<String> {
        let file = IcaModelFile {
            n_time: self.n_time,
            n_components: self.n_components,
            mixing: MatrixB64::encode(&self.mixing),
            whitening_matrix: MatrixB64::encode(&self.whitening),
            whitening_mean: MatrixB64::encode(&DMatrix::from_column_slice(
                self.mean.len(),
                1,
                self.mean.as_slice(),
            )),
            order: self.order.clone(),
            mse: self.mse.clone(),
            seed: self.seed,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: IcaModelFile = serde_json::from_str(text)?;
        let mixing = file.mixing.decode()?;
        let whitening = file.whitening_matrix.decode()?;
        let mean_m = file.whitening_mean.decode()?;
        if mixing.nrows() != file.n_time
            || mixing.ncols() != file.n_components
            || whitening.nrows() != file.n_components
            || whitening.ncols() != file.n_time
            || mean_m.nrows() != file.n_time
            || file.order.len() != file.n_components
            || file.mse.len() != file.n_components
        {
            return Err(Error::Format("inconsistent ICA model shapes".into()));
        }
        let mut order_check = file.order.clone();
        order_check.sort_unstable();
        if order_check != (0..file.n_components).collect::<Vec<_>>() {
            return Err(Error::Format("order field is not a permutation".into()));
        }
        Ok(IcaModel {
            n_time: file.n_time,
            n_components: file.n_components,
            mixing,
            whitening,
            mean: DVector::from_column_slice(mean_m.column(0).as_slice()),
            order: file.order,
            mse: file.mse,
            seed: file.seed,
        })
    }
}
