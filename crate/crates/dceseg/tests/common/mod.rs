//! Shared oracles and fixtures for the integration suites.
#![allow(dead_code)] // each test binary uses a different subset

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use dceseg::phantom::{self, PhantomSpec};
use dceseg::pipeline::{CaseConfig, IcaConfig, SplitConfig, SvmGridConfig};
use dceseg::svm::KernelSpec;
use dceseg::volume;

/// Exhaustive active-set QP oracle for the SVM dual on tiny instances.
///
/// Enumerates every {zero, bound, free} assignment of the points, solves the
/// stationarity system of each, verifies the full KKT conditions and returns
/// the best feasible dual objective with its multipliers. Exponential in n;
/// keep n <= 12.
pub fn qp_dual_oracle(
    features: &DMatrix<f64>,
    labels: &[i8],
    kernel: &KernelSpec,
    c: f64,
) -> Option<(Vec<f64>, f64)> {
    let n = labels.len();
    assert!(n <= 12, "oracle is exponential in n");
    let y: Vec<f64> = labels.iter().map(|&v| f64::from(v)).collect();
    let mut q = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            q[(i, j)] = y[i]
                * y[j]
                * kernel.eval(features.column(i).as_slice(), features.column(j).as_slice());
        }
    }
    let objective = |alpha: &[f64]| -> f64 {
        let mut quad = 0.0;
        for i in 0..n {
            for j in 0..n {
                quad += alpha[i] * alpha[j] * q[(i, j)];
            }
        }
        alpha.iter().sum::<f64>() - 0.5 * quad
    };

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut consider = |alpha: Vec<f64>| {
        let obj = objective(&alpha);
        if best.as_ref().map_or(true, |(_, b)| obj > *b) {
            best = Some((alpha, obj));
        }
    };

    let total = 3usize.pow(n as u32);
    'partitions: for code in 0..total {
        let mut state = Vec::with_capacity(n);
        let mut rem = code;
        for _ in 0..n {
            state.push(rem % 3); // 0 = zero, 1 = at C, 2 = free
            rem /= 3;
        }
        let free: Vec<usize> = (0..n).filter(|&i| state[i] == 2).collect();
        let mut alpha = vec![0.0; n];
        for i in 0..n {
            if state[i] == 1 {
                alpha[i] = c;
            }
        }

        let nu = if free.is_empty() {
            // Pure-bound candidate: must satisfy the equality constraint
            // outright, and a multiplier interval must exist.
            let balance: f64 = (0..n).map(|i| y[i] * alpha[i]).sum();
            if balance.abs() > 1e-9 {
                continue 'partitions;
            }
            let mut lo = f64::NEG_INFINITY;
            let mut hi = f64::INFINITY;
            for i in 0..n {
                let grad = (0..n).map(|j| q[(i, j)] * alpha[j]).sum::<f64>() - 1.0;
                // zero: grad + nu y_i >= 0; bound: <= 0.
                let bound_on_nu = -grad / y[i];
                match (state[i] == 0, y[i] > 0.0) {
                    (true, true) | (false, false) => lo = lo.max(bound_on_nu),
                    _ => hi = hi.min(bound_on_nu),
                }
            }
            if lo > hi + 1e-9 {
                continue 'partitions;
            }
            0.5 * (lo.max(-1e6) + hi.min(1e6))
        } else {
            // Bordered stationarity system for the free block.
            let f = free.len();
            let mut sys = DMatrix::zeros(f + 1, f + 1);
            let mut rhs = nalgebra::DVector::zeros(f + 1);
            for (a, &i) in free.iter().enumerate() {
                for (b, &j) in free.iter().enumerate() {
                    sys[(a, b)] = q[(i, j)];
                }
                sys[(a, f)] = y[i];
                sys[(f, a)] = y[i];
                let bound_term: f64 = (0..n)
                    .filter(|&j| state[j] == 1)
                    .map(|j| q[(i, j)] * c)
                    .sum();
                rhs[a] = 1.0 - bound_term;
            }
            rhs[f] = -(0..n)
                .filter(|&j| state[j] == 1)
                .map(|j| y[j] * c)
                .sum::<f64>();
            let Some(sol) = sys.lu().solve(&rhs) else {
                continue 'partitions;
            };
            for (a, &i) in free.iter().enumerate() {
                alpha[i] = sol[a];
                if !(alpha[i] > -1e-9 && alpha[i] < c + 1e-9) {
                    continue 'partitions;
                }
                alpha[i] = alpha[i].clamp(0.0, c);
            }
            sol[f]
        };

        // Full KKT verification.
        for i in 0..n {
            let grad =
                (0..n).map(|j| q[(i, j)] * alpha[j]).sum::<f64>() - 1.0 + nu * y[i];
            let ok = match state[i] {
                0 => grad >= -1e-8,
                1 => grad <= 1e-8,
                _ => grad.abs() <= 1e-8,
            };
            if !ok {
                continue 'partitions;
            }
        }
        consider(alpha);
    }
    best
}

/// Best per-source |correlation| after matching estimated to true sources
/// over all permutations (factorial in p; keep p small).
pub fn matched_correlations(truth: &[Vec<f64>], estimated: &[Vec<f64>]) -> Vec<f64> {
    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            num += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        num / (va.sqrt() * vb.sqrt())
    }
    fn permute(items: &mut Vec<usize>, k: usize, visit: &mut impl FnMut(&[usize])) {
        if k == items.len() {
            visit(items);
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, visit);
            items.swap(k, i);
        }
    }
    let p = truth.len();
    let mut perm: Vec<usize> = (0..p).collect();
    let mut best: (f64, Vec<f64>) = (f64::NEG_INFINITY, vec![]);
    permute(&mut perm, 0, &mut |perm| {
        let corrs: Vec<f64> = (0..p)
            .map(|i| correlation(&truth[i], &estimated[perm[i]]).abs())
            .collect();
        let score: f64 = corrs.iter().sum();
        if score > best.0 {
            best = (score, corrs);
        }
    });
    best.1
}

/// Columns-as-samples matrix from a point list.
pub fn columns(points: &[Vec<f64>]) -> DMatrix<f64> {
    let dim = points[0].len();
    let mut m = DMatrix::zeros(dim, points.len());
    for (j, p) in points.iter().enumerate() {
        for (i, v) in p.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    m
}

/// Two overlapping 2D class blobs.
pub fn overlapping_blobs(
    n: usize,
    separation: f64,
    rng: &mut ChaCha8Rng,
) -> (DMatrix<f64>, Vec<i8>) {
    let mut pts = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y: i8 = if i % 2 == 0 { 1 } else { -1 };
        let cx = f64::from(y) * separation;
        pts.push(vec![cx + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
        labels.push(y);
    }
    // Both classes must be present even for tiny n.
    labels[0] = 1;
    labels[1] = -1;
    (columns(&pts), labels)
}

/// Write a seeded phantom suite and a pipeline config over it.
///
/// Cases are split half/half into train and test in id order.
pub fn write_phantom_suite(dir: &Path, n_cases: usize, seed: u64) -> dceseg::pipeline::PipelineConfig {
    std::fs::create_dir_all(dir).unwrap();
    let mut cases = Vec::new();
    for i in 1..=n_cases {
        let spec = PhantomSpec {
            seed: i as u64,
            ..Default::default()
        };
        let (vol, truth, kept) = phantom::generate(&spec).unwrap();
        let prefix = dir.join(format!("case{i}"));
        volume::write_volume(&prefix, &vol).unwrap();
        volume::write_mask(dir.join(format!("case{i}_truth")), &truth).unwrap();
        volume::write_mask(dir.join(format!("case{i}_kept")), &kept).unwrap();
        cases.push(CaseConfig {
            id: format!("case{i}"),
            volume: prefix.with_extension("json"),
            truth: dir.join(format!("case{i}_truth.json")),
        });
    }
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let half = n_cases / 2;
    dceseg::pipeline::PipelineConfig {
        cases,
        split: SplitConfig {
            train: ids[..half].to_vec(),
            test: ids[half..].to_vec(),
        },
        n_benign_samples: 600,
        fwhm_voxels: 2.0,
        ica: IcaConfig {
            components: 7,
            seed: 17,
        },
        svm: SvmGridConfig {
            kernels: vec![KernelSpec::Linear, KernelSpec::Rbf { gamma: 0.5 }],
            c_grid: vec![1.0],
        },
        cv_folds: 10,
        seed,
        froc_points: 200,
        ser_frames: None,
    }
}

/// Highest sensitivity reachable within an absolute false-positive budget.
pub fn sensitivity_at_budget(points: &[(usize, f64)], budget: usize) -> f64 {
    points
        .iter()
        .filter(|(fp, _)| *fp <= budget)
        .map(|(_, s)| *s)
        .fold(0.0, f64::max)
}
