//! Soft-margin kernel SVM trained by sequential minimal optimization, with
//! a slack-based translation of the decision boundary for false-positive
//! control.
//!
//! Training solves the usual dual with box constraint C: pairs are picked by
//! maximal KKT violation, updated analytically with box clipping, and the
//! bias is averaged over unbounded support vectors. After training, the
//! translation offset tau is the two-class average distance to the
//! hyperplane of the misclassified support vectors (slack > 1, falling back
//! to 0 < slack < 1), and calibrated classification is sign(d(x) - tau).
//!
//! Feature matrices hold one sample per column.

use std::collections::VecDeque;
use std::rc::Rc;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel function selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    Linear,
    /// [gamma (x . y) + coef]^degree
    Polynomial { gamma: f64, coef: f64, degree: u32 },
    /// exp(-gamma ||x - y||^2)
    Rbf { gamma: f64 },
}

impl KernelSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelSpec::Linear => Ok(()),
            KernelSpec::Polynomial { gamma, coef, degree } => {
                if !(gamma.is_finite() && gamma > 0.0) {
                    return Err(Error::Argument("polynomial kernel needs gamma > 0".into()));
                }
                if !coef.is_finite() {
                    return Err(Error::Argument(
                        "polynomial kernel coef must be finite".into(),
                    ));
                }
                if degree < 1 {
                    return Err(Error::Argument(
                        "polynomial kernel degree must be >= 1".into(),
                    ));
                }
                Ok(())
            }
            KernelSpec::Rbf { gamma } => {
                if !(gamma.is_finite() && gamma > 0.0) {
                    return Err(Error::Argument("rbf kernel needs gamma > 0".into()));
                }
                Ok(())
            }
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            KernelSpec::Linear => dot(a, b),
            KernelSpec::Polynomial { gamma, coef, degree } => {
                (gamma * dot(a, b) + coef).powi(degree as i32)
            }
            KernelSpec::Rbf { gamma } => {
                let mut d2 = 0.0;
                for (x, y) in a.iter().zip(b) {
                    let d = x - y;
                    d2 += d * d;
                }
                (-gamma * d2).exp()
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Training options beyond the kernel and box constraint.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    /// Stop when the maximal KKT violation falls below this.
    pub tol: f64,
    /// Hard cap on pair updates.
    pub max_updates: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_updates: 1_000_000,
        }
    }
}

/// A trained (and optionally calibrated) classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub kernel: KernelSpec,
    pub c: f64,
    /// dim x n_sv, one support vector per column.
    pub support_vectors: DMatrix<f64>,
    /// alpha_i * y_i per support vector.
    pub coeffs: Vec<f64>,
    pub bias: f64,
    /// Slack xi_i = max(0, 1 - y_i d(s_i)) per support vector.
    pub slacks: Vec<f64>,
    /// Calibrated translation offset tau, in decision-function units.
    pub translation: f64,
    pub flags: Vec<String>,
}

impl SvmModel {
    /// Assemble a model from raw parts, validating shapes and ranges.
    pub fn from_parts(
        kernel: KernelSpec,
        c: f64,
        support_vectors: DMatrix<f64>,
        coeffs: Vec<f64>,
        bias: f64,
        slacks: Vec<f64>,
    ) -> Result<Self> {
        kernel.validate()?;
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::Argument("box constraint C must be positive".into()));
        }
        let n_sv = support_vectors.ncols();
        if coeffs.len() != n_sv || slacks.len() != n_sv {
            return Err(Error::Argument(
                "coeffs and slacks must have one entry per support vector".into(),
            ));
        }
        if coeffs
            .iter()
            .any(|a| !a.is_finite() || a.abs() <= 0.0 || a.abs() > c * (1.0 + 1e-9))
        {
            return Err(Error::Argument(
                "support vector coefficients must satisfy 0 < |alpha y| <= C".into(),
            ));
        }
        if slacks.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Argument("slacks must be nonnegative".into()));
        }
        Ok(Self {
            kernel,
            c,
            support_vectors,
            coeffs,
            bias,
            slacks,
            translation: 0.0,
            flags: Vec::new(),
        })
    }

    pub fn n_support_vectors(&self) -> usize {
        self.support_vectors.ncols()
    }

    pub fn dim(&self) -> usize {
        self.support_vectors.nrows()
    }

    /// Dual objective sum(alpha) - 1/2 sum_ij alpha_i alpha_j y_i y_j K_ij,
    /// computable from the stored support vectors alone.
    pub fn dual_objective(&self) -> f64 {
        let n = self.n_support_vectors();
        let linear: f64 = self.coeffs.iter().map(|c| c.abs()).sum();
        let mut quad = 0.0;
        for i in 0..n {
            let si = self.support_vectors.column(i);
            for j in 0..n {
                let sj = self.support_vectors.column(j);
                quad += self.coeffs[i]
                    * self.coeffs[j]
                    * self.kernel.eval(si.as_slice(), sj.as_slice());
            }
        }
        linear - 0.5 * quad
    }
}

/// Evaluate the raw decision function d(x) = sum alpha_i y_i K(s_i, x) + w0.
pub fn decision(model: &SvmModel, x: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), model.dim());
    let mut acc = model.bias;
    for (i, &c) in model.coeffs.iter().enumerate() {
        acc += c * model.kernel.eval(model.support_vectors.column(i).as_slice(), x);
    }
    acc
}

/// Thresholded prediction: 1 iff d(x) + k > 0, else 0.
///
/// `k = -tau` reproduces the calibrated operating point.
pub fn predict_threshold(model: &SvmModel, x: &[f64], k: f64) -> u8 {
    u8::from(decision(model, x) + k > 0.0)
}

// ---------------------------------------------------------------------------
// SMO training
// ---------------------------------------------------------------------------

/// FIFO cache of kernel matrix rows.
struct RowCache {
    rows: Vec<Option<Rc<[f64]>>>,
    queue: VecDeque<usize>,
    cap: usize,
}

impl RowCache {
    fn new(n: usize) -> Self {
        // Bound the cache near 200 MB of f64 rows.
        let cap = (25_000_000 / n.max(1)).clamp(8, n.max(8));
        Self {
            rows: vec![None; n],
            queue: VecDeque::new(),
            cap,
        }
    }

    fn get(&mut self, i: usize, features: &DMatrix<f64>, kernel: &KernelSpec) -> Rc<[f64]> {
        if let Some(row) = &self.rows[i] {
            return Rc::clone(row);
        }
        let xi = features.column(i);
        let n = features.ncols();
        let mut row = Vec::with_capacity(n);
        for t in 0..n {
            row.push(kernel.eval(xi.as_slice(), features.column(t).as_slice()));
        }
        let row: Rc<[f64]> = row.into();
        if self.queue.len() >= self.cap {
            if let Some(old) = self.queue.pop_front() {
                self.rows[old] = None;
            }
        }
        self.queue.push_back(i);
        self.rows[i] = Some(Rc::clone(&row));
        row
    }
}

/// Train with default stopping options (violation < 1e-3, <= 1e6 updates).
pub fn train(
    features: &DMatrix<f64>,
    labels: &[i8],
    kernel: &KernelSpec,
    c: f64,
) -> Result<SvmModel> {
    train_with(features, labels, kernel, c, &TrainOptions::default())
}

/// Train a soft-margin kernel SVM by SMO.
///
/// `features` holds one sample per column; `labels` are +1/-1. Training is
/// deterministic: the working pair is always the maximal violating one.
pub fn train_with(
    features: &DMatrix<f64>,
    labels: &[i8],
    kernel: &KernelSpec,
    c: f64,
    options: &TrainOptions,
) -> Result<SvmModel> {
    kernel.validate()?;
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::Argument("box constraint C must be positive".into()));
    }
    let n = features.ncols();
    if n == 0 {
        return Err(Error::Label("empty training set".into()));
    }
    if labels.len() != n {
        return Err(Error::Label(format!("{} labels for {n} samples", labels.len())));
    }
    if labels.iter().any(|&y| y != 1 && y != -1) {
        return Err(Error::Label("labels must be +1 or -1".into()));
    }
    if !labels.contains(&1) || !labels.contains(&-1) {
        return Err(Error::Label("both classes must be present".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite feature value".into()));
    }

    let y: Vec<f64> = labels.iter().map(|&v| f64::from(v)).collect();
    let mut alpha = vec![0.0_f64; n];
    // Multipliers closer than this to a bound are treated as at the bound;
    // sub-ulp dust otherwise freezes pair updates while still counting as
    // interior for the working-set selection.
    let eps_bound = 1e-12 * c;
    // g_i = sum_t alpha_t y_t K(x_t, x_i): the decision without bias.
    let mut g = vec![0.0_f64; n];
    let diag: Vec<f64> = (0..n)
        .map(|i| {
            let xi = features.column(i);
            kernel.eval(xi.as_slice(), xi.as_slice())
        })
        .collect();
    let mut cache = RowCache::new(n);
    let mut flags = Vec::new();
    let mut converged = false;
    let mut updates = 0usize;

    while updates < options.max_updates {
        // Maximal violating pair over v_t = y_t - g_t.
        let mut i_best = usize::MAX;
        let mut m_up = f64::NEG_INFINITY;
        let mut j_best = usize::MAX;
        let mut m_low = f64::INFINITY;
        for t in 0..n {
            let v = y[t] - g[t];
            let in_up =
                (y[t] > 0.0 && alpha[t] < c - eps_bound) || (y[t] < 0.0 && alpha[t] > eps_bound);
            let in_low =
                (y[t] < 0.0 && alpha[t] < c - eps_bound) || (y[t] > 0.0 && alpha[t] > eps_bound);
            if in_up && v > m_up {
                m_up = v;
                i_best = t;
            }
            if in_low && v < m_low {
                m_low = v;
                j_best = t;
            }
        }
        if i_best == usize::MAX || j_best == usize::MAX || m_up - m_low < options.tol {
            converged = true;
            break;
        }
        let i = i_best;
        let mut j = j_best;

        let row_i = cache.get(i, features, kernel);
        let mut step = pair_step(i, j, &alpha, &y, &g, &diag, &row_i, c);
        if step == 0.0 {
            // The maximal pair is pinned at a box corner; pick the best
            // second-order partner for i that can actually move.
            let mut best_gain = 0.0;
            let mut best_j = usize::MAX;
            for t in 0..n {
                if t == i {
                    continue;
                }
                let in_low = (y[t] < 0.0 && alpha[t] < c - eps_bound)
                    || (y[t] > 0.0 && alpha[t] > eps_bound);
                if !in_low {
                    continue;
                }
                let b_it = m_up - (y[t] - g[t]);
                if b_it <= 0.0 {
                    continue;
                }
                let eta = (diag[i] + diag[t] - 2.0 * row_i[t]).max(1e-12);
                let gain = b_it * b_it / eta;
                if gain > best_gain
                    && pair_step(i, t, &alpha, &y, &g, &diag, &row_i, c) != 0.0
                {
                    best_gain = gain;
                    best_j = t;
                }
            }
            if best_j == usize::MAX {
                converged = true;
                break;
            }
            j = best_j;
            step = pair_step(i, j, &alpha, &y, &g, &diag, &row_i, c);
        }

        let snap = |v: f64| {
            if v < eps_bound {
                0.0
            } else if v > c - eps_bound {
                c
            } else {
                v
            }
        };
        let new_j = snap((alpha[j] + step).clamp(0.0, c));
        let new_i = snap((alpha[i] - y[i] * y[j] * step).clamp(0.0, c));
        // Gradient updates use the post-snap deltas so g stays consistent
        // with the multipliers.
        let delta_j = new_j - alpha[j];
        let delta_i = new_i - alpha[i];
        alpha[j] = new_j;
        alpha[i] = new_i;

        let row_j = cache.get(j, features, kernel);
        for t in 0..n {
            g[t] += delta_i * y[i] * row_i[t] + delta_j * y[j] * row_j[t];
        }
        updates += 1;
    }
    if !converged {
        flags.push("max_updates_reached".to_string());
    }

    // Bias from unbounded support vectors; midpoint of the feasible
    // interval when none exist.
    let free: Vec<usize> = (0..n)
        .filter(|&t| alpha[t] > eps_bound && alpha[t] < c - eps_bound)
        .collect();
    let bias = if free.is_empty() {
        flags.push("bias_midpoint_fallback".to_string());
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for t in 0..n {
            let v = y[t] - g[t];
            let at_zero = alpha[t] <= 0.0;
            // alpha = 0, y = +1 and alpha = C, y = -1 bound b from below.
            if (at_zero && y[t] > 0.0) || (!at_zero && y[t] < 0.0) {
                lo = lo.max(v);
            } else {
                hi = hi.min(v);
            }
        }
        match (lo.is_finite(), hi.is_finite()) {
            (true, true) => 0.5 * (lo + hi),
            (true, false) => lo,
            (false, true) => hi,
            (false, false) => 0.0,
        }
    } else {
        free.iter().map(|&t| y[t] - g[t]).sum::<f64>() / free.len() as f64
    };

    // Keep only support vectors; slacks from the training-time decision.
    let sv_idx: Vec<usize> = (0..n).filter(|&t| alpha[t] > eps_bound).collect();
    if sv_idx.is_empty() {
        return Err(Error::Rank("training produced no support vectors".into()));
    }
    let dim = features.nrows();
    let mut support_vectors = DMatrix::zeros(dim, sv_idx.len());
    let mut coeffs = Vec::with_capacity(sv_idx.len());
    let mut slacks = Vec::with_capacity(sv_idx.len());
    for (col, &t) in sv_idx.iter().enumerate() {
        support_vectors.set_column(col, &features.column(t));
        coeffs.push(alpha[t] * y[t]);
        slacks.push((1.0 - y[t] * (g[t] + bias)).max(0.0));
    }

    Ok(SvmModel {
        kernel: kernel.clone(),
        c,
        support_vectors,
        coeffs,
        bias,
        slacks,
        translation: 0.0,
        flags,
    })
}

/// Signed optimal change of alpha_j for the pair (i, j), after box clipping.
#[allow(clippy::too_many_arguments)]
fn pair_step(
    i: usize,
    j: usize,
    alpha: &[f64],
    y: &[f64],
    g: &[f64],
    diag: &[f64],
    row_i: &[f64],
    c: f64,
) -> f64 {
    let (lo, hi) = if y[i] != y[j] {
        ((alpha[j] - alpha[i]).max(0.0), (c + alpha[j] - alpha[i]).min(c))
    } else {
        ((alpha[i] + alpha[j] - c).max(0.0), (alpha[i] + alpha[j]).min(c))
    };
    if lo >= hi {
        return 0.0;
    }
    let eta = (diag[i] + diag[j] - 2.0 * row_i[j]).max(1e-12);
    // E_i - E_j = v_j - v_i with v_t = y_t - g_t (bias cancels).
    let v_i = y[i] - g[i];
    let v_j = y[j] - g[j];
    let raw = alpha[j] + y[j] * (v_j - v_i) / eta;
    raw.clamp(lo, hi) - alpha[j]
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// Translation offset from the slack configuration of a trained model.
///
/// For each class, average |d(s_i)| over support vectors with slack > 1;
/// when a class has none, substitute its support vectors with
/// 0 < slack < 1. tau is the mean of the two class averages. If either
/// class stays empty, tau = 0 with a flag. Calibrated prediction is
/// sign(d(x) - tau): a shift of the boundary into the +1 region.
pub fn calibrate_translation(model: &SvmModel) -> SvmModel {
    let mut out = model.clone();
    let class_mean = |positive: bool| -> Option<(f64, bool)> {
        let of_class = |i: usize| (model.coeffs[i] > 0.0) == positive;
        let dist =
            |i: usize| decision(model, model.support_vectors.column(i).as_slice()).abs();
        let hard: Vec<usize> = (0..model.n_support_vectors())
            .filter(|&i| of_class(i) && model.slacks[i] > 1.0)
            .collect();
        if !hard.is_empty() {
            let m = hard.iter().map(|&i| dist(i)).sum::<f64>() / hard.len() as f64;
            return Some((m, false));
        }
        let soft: Vec<usize> = (0..model.n_support_vectors())
            .filter(|&i| of_class(i) && model.slacks[i] > 0.0 && model.slacks[i] < 1.0)
            .collect();
        if !soft.is_empty() {
            let m = soft.iter().map(|&i| dist(i)).sum::<f64>() / soft.len() as f64;
            return Some((m, true));
        }
        None
    };
    match (class_mean(true), class_mean(false)) {
        (Some((dp, soft_p)), Some((dn, soft_n))) => {
            out.translation = 0.5 * (dp + dn);
            if soft_p || soft_n {
                out.flags.push("calibration_soft_fallback".to_string());
            }
        }
        _ => {
            out.translation = 0.0;
            out.flags.push("calibration_empty_tau_zero".to_string());
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SvmModelFile {
    kernel: KernelSpec,
    #[serde(rename = "C")]
    c: f64,
    sv_rows: usize,
    sv_cols: usize,
    /// base64 of row-major little-endian f64 values, dim x n_sv.
    sv: String,
    coeffs: Vec<f64>,
    bias: f64,
    slacks: Vec<f64>,
    translation: f64,
    flags: Vec<String>,
}

impl SvmModel {
    pub fn to_json(&self) -> Result<String> {
        let m = &self.support_vectors;
        let mut bytes = Vec::with_capacity(m.len() * 8);
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                bytes.extend_from_slice(&m[(i, j)].to_le_bytes());
            }
        }
        let file = SvmModelFile {
            kernel: self.kernel.clone(),
            c: self.c,
            sv_rows: m.nrows(),
            sv_cols: m.ncols(),
            sv: BASE64.encode(bytes),
            coeffs: self.coeffs.clone(),
            bias: self.bias,
            slacks: self.slacks.clone(),
            translation: self.translation,
            flags: self.flags.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SvmModelFile = serde_json::from_str(text)?;
        let bytes = BASE64
            .decode(&file.sv)
            .map_err(|e| Error::Format(format!("bad base64 sv payload: {e}")))?;
        if bytes.len() != file.sv_rows * file.sv_cols * 8 {
            return Err(Error::Size {
                expected: file.sv_rows * file.sv_cols * 8,
                actual: bytes.len(),
            });
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let sv = DMatrix::from_row_slice(file.sv_rows, file.sv_cols, &values);
        let mut model =
            SvmModel::from_parts(file.kernel, file.c, sv, file.coeffs, file.bias, file.slacks)?;
        model.translation = file.translation;
        model.flags = file.flags;
        Ok(model)
    }
}
