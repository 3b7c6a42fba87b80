//! End-to-end orchestration: preprocessing, balanced sampling, 10-fold
//! cross-validation over component count and kernel, calibration, test
//! scoring and report emission.
//!
//! Every random draw comes from a stage-specific generator derived from the
//! config seed, so a full run is reproducible bit for bit. An audit log
//! records which cases fed each stage; the fitting stages may only ever
//! list training-split cases.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::error::{Error, Result};
use crate::ica::{self, IcaModel};
use crate::metrics::{self, ConfusionReport, FrocPoint, RocPoint};
use crate::preprocess::{self, CropPlanes};
use crate::svm::{self, KernelSpec, SvmModel};
use crate::volume::{self, DynamicVolume, Mask3D};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseConfig {
    pub id: String,
    /// DVOL path (header or prefix) of the dynamic volume.
    pub volume: PathBuf,
    /// DVOL path of the ground-truth lesion mask.
    pub truth: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitConfig {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IcaConfig {
    pub components: usize,
    pub seed: u64,
}

impl Default for IcaConfig {
    fn default() -> Self {
        Self {
            components: 4,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvmGridConfig {
    pub kernels: Vec<KernelSpec>,
    pub c_grid: Vec<f64>,
}

impl Default for SvmGridConfig {
    fn default() -> Self {
        Self {
            kernels: vec![KernelSpec::Linear, KernelSpec::Rbf { gamma: 0.5 }],
            c_grid: vec![1.0],
        }
    }
}

fn default_n_benign() -> usize {
    5000
}
fn default_fwhm() -> f64 {
    2.0
}
fn default_folds() -> usize {
    10
}
fn default_froc_points() -> usize {
    200
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub cases: Vec<CaseConfig>,
    pub split: SplitConfig,
    /// Benign samples drawn per run (the lesion side is balanced to match).
    #[serde(default = "default_n_benign")]
    pub n_benign_samples: usize,
    #[serde(default = "default_fwhm")]
    pub fwhm_voxels: f64,
    #[serde(default)]
    pub ica: IcaConfig,
    #[serde(default)]
    pub svm: SvmGridConfig,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_froc_points")]
    pub froc_points: usize,
    /// (first post-contrast, final) frame indices for the SER baseline;
    /// defaults to (2, nt - 1).
    #[serde(default)]
    pub ser_frames: Option<(usize, usize)>,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.cases.is_empty() {
            return Err(Error::Argument("config lists no cases".into()));
        }
        let ids: Vec<&str> = self.cases.iter().map(|c| c.id.as_str()).collect();
        let mut assigned: Vec<&str> = Vec::new();
        for id in self.split.train.iter().chain(&self.split.test) {
            if !ids.contains(&id.as_str()) {
                return Err(Error::Argument(format!("split names unknown case {id}")));
            }
            if assigned.contains(&id.as_str()) {
                return Err(Error::Argument(format!("case {id} assigned twice")));
            }
            assigned.push(id);
        }
        if assigned.len() != ids.len() {
            return Err(Error::Argument(
                "train/test split must cover every case".into(),
            ));
        }
        if self.split.train.is_empty() || self.split.test.is_empty() {
            return Err(Error::Argument("both split sides must be non-empty".into()));
        }
        if self.n_benign_samples < 10 {
            return Err(Error::Argument("n_benign_samples must be >= 10".into()));
        }
        if self.cv_folds < 2 {
            return Err(Error::Argument("cv_folds must be >= 2".into()));
        }
        if self.svm.kernels.is_empty() || self.svm.c_grid.is_empty() {
            return Err(Error::Argument("kernel and C grids must be non-empty".into()));
        }
        for k in &self.svm.kernels {
            k.validate()?;
        }
        if self.svm.c_grid.iter().any(|&c| !(c.is_finite() && c > 0.0)) {
            return Err(Error::Argument("C grid entries must be positive".into()));
        }
        Ok(())
    }
}

/// Stage-specific RNG derived from the run seed and a label.
fn stage_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

// ---------------------------------------------------------------------------
// Case preparation
// ---------------------------------------------------------------------------

/// A loaded case after smoothing and chest cropping.
pub struct PreparedCase {
    pub id: String,
    /// Acquired volume, untouched (kinetic baselines run on this).
    pub raw: DynamicVolume,
    pub smoothed: DynamicVolume,
    pub truth: Mask3D,
    pub kept: Mask3D,
    pub planes: CropPlanes,
}

pub fn prepare_case(case: &CaseConfig, fwhm_voxels: f64) -> Result<PreparedCase> {
    let run = || -> Result<PreparedCase> {
        let vol = volume::load_volume(&case.volume)?;
        let truth = volume::load_mask(&case.truth)?;
        if truth.dims != vol.dims {
            return Err(Error::Argument(format!(
                "truth mask dims {:?} do not match volume {:?}",
                truth.dims, vol.dims
            )));
        }
        let smoothed = preprocess::gaussian_smooth(&vol, fwhm_voxels)?;
        let planes = preprocess::find_midplanes(&smoothed)?;
        let kept = preprocess::crop_chest(&smoothed, &planes)?;
        Ok(PreparedCase {
            id: case.id.clone(),
            raw: vol,
            smoothed,
            truth,
            kept,
            planes,
        })
    };
    run().map_err(|e| e.for_case(&case.id))
}

// ---------------------------------------------------------------------------
// Balanced training matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleOrigin {
    pub case_id: String,
    pub voxel: (usize, usize, usize),
}

/// Balanced voxel-curve training set: exactly `n` lesion columns (+1)
/// followed by `n` benign columns (-1) in an N x 2n matrix.
pub struct TrainingSet {
    pub curves: DMatrix<f64>,
    pub labels: Vec<i8>,
    pub origins: Vec<SampleOrigin>,
}

fn sample_without_replacement(pool: usize, take: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pool).collect();
    for i in 0..take {
        let j = rng.gen_range(i..pool);
        idx.swap(i, j);
    }
    idx.truncate(take);
    idx
}

/// Pool lesion and benign voxels over the given cases and draw a balanced
/// 2 x n_benign sample (lesion side capped or padded by seeded resampling).
pub fn build_training_matrix(
    cases: &[PreparedCase],
    n_benign: usize,
    seed: u64,
) -> Result<TrainingSet> {
    let mut lesion: Vec<(usize, (usize, usize, usize))> = Vec::new();
    let mut benign: Vec<(usize, (usize, usize, usize))> = Vec::new();
    for (ci, case) in cases.iter().enumerate() {
        for (x, y, z) in case.kept.selected() {
            if case.truth.get(x, y, z) {
                lesion.push((ci, (x, y, z)));
            } else {
                benign.push((ci, (x, y, z)));
            }
        }
    }
    if lesion.is_empty() {
        return Err(Error::Sampling("no lesion voxels in the training split".into()));
    }
    if benign.len() < n_benign {
        return Err(Error::Sampling(format!(
            "benign pool has {} voxels, need {n_benign}",
            benign.len()
        )));
    }

    let mut rng_benign = stage_rng(seed, "benign_sampling");
    let benign_pick = sample_without_replacement(benign.len(), n_benign, &mut rng_benign);

    let mut rng_lesion = stage_rng(seed, "lesion_sampling");
    let lesion_pick: Vec<usize> = if lesion.len() >= n_benign {
        sample_without_replacement(lesion.len(), n_benign, &mut rng_lesion)
    } else {
        // Keep every lesion voxel, then pad by resampling to restore the
        // 2 x n balance.
        let mut picks: Vec<usize> = (0..lesion.len()).collect();
        while picks.len() < n_benign {
            picks.push(rng_lesion.gen_range(0..lesion.len()));
        }
        picks
    };

    let nt = cases[0].smoothed.nt;
    let total = 2 * n_benign;
    let mut curves = DMatrix::zeros(nt, total);
    let mut labels = Vec::with_capacity(total);
    let mut origins = Vec::with_capacity(total);
    for (col, &pick) in lesion_pick.iter().enumerate() {
        let (ci, (x, y, z)) = lesion[pick];
        let curve = cases[ci].smoothed.curve(x, y, z);
        curves.set_column(col, &nalgebra::DVector::from_vec(curve));
        labels.push(1);
        origins.push(SampleOrigin {
            case_id: cases[ci].id.clone(),
            voxel: (x, y, z),
        });
    }
    for (off, &pick) in benign_pick.iter().enumerate() {
        let col = n_benign + off;
        let (ci, (x, y, z)) = benign[pick];
        let curve = cases[ci].smoothed.curve(x, y, z);
        curves.set_column(col, &nalgebra::DVector::from_vec(curve));
        labels.push(-1);
        origins.push(SampleOrigin {
            case_id: cases[ci].id.clone(),
            voxel: (x, y, z),
        });
    }
    Ok(TrainingSet {
        curves,
        labels,
        origins,
    })
}

/// Wrap pooled training curves as a voxel matrix for the ICA fit
/// (synthetic per-column index since samples span cases).
pub fn training_voxel_matrix(training: &TrainingSet) -> volume::VoxelMatrix {
    volume::VoxelMatrix {
        n_time: training.curves.nrows(),
        n_voxels: training.curves.ncols(),
        values: training.curves.clone(),
        index: (0..training.curves.ncols()).map(|j| (j, 0, 0)).collect(),
    }
}

// ---------------------------------------------------------------------------
// Cross-validation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvCell {
    pub kernel: KernelSpec,
    pub c: f64,
    pub h: usize,
    pub mean_auc: f64,
    pub mean_error: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub cells: Vec<CvCell>,
    pub selected_kernel: KernelSpec,
    pub selected_c: f64,
    pub selected_h: usize,
}

fn kernel_order(k: &KernelSpec) -> u8 {
    match k {
        KernelSpec::Linear => 0,
        KernelSpec::Polynomial { .. } => 1,
        KernelSpec::Rbf { .. } => 2,
    }
}

fn stratified_folds(labels: &[i8], folds: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut assignment = vec![0usize; labels.len()];
    for class in [1i8, -1i8] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        for i in (1..members.len()).rev() {
            let j = rng.gen_range(0..=i);
            members.swap(i, j);
        }
        for (pos, &m) in members.iter().enumerate() {
            assignment[m] = pos % folds;
        }
    }
    assignment
}

fn folds_degenerate(assignment: &[usize], labels: &[i8], folds: usize) -> bool {
    for f in 0..folds {
        let mut train_pos = false;
        let mut train_neg = false;
        let mut val_any = false;
        for (i, &a) in assignment.iter().enumerate() {
            if a == f {
                val_any = true;
            } else if labels[i] > 0 {
                train_pos = true;
            } else {
                train_neg = true;
            }
        }
        if !val_any || !train_pos || !train_neg {
            return true;
        }
    }
    false
}

/// Stratified seeded cross-validation over (kernel, C, h).
///
/// Components are added in MSE order; the winning cell maximizes mean
/// validation AUC with ties broken toward smaller h, then kernel order
/// linear < polynomial < rbf, then smaller C.
pub fn cross_validate(
    training: &TrainingSet,
    model: &IcaModel,
    config: &PipelineConfig,
) -> Result<CvReport> {
    let folds = config.cv_folds;
    let n = training.labels.len();
    let pos = training.labels.iter().filter(|&&y| y > 0).count();
    let neg = n - pos;
    if pos < folds || neg < folds {
        return Err(Error::Fold(format!(
            "need at least {folds} samples per class, have {pos}/{neg}"
        )));
    }

    let mut rng = stage_rng(config.seed, "cv_folds");
    let mut assignment = stratified_folds(&training.labels, folds, &mut rng);
    if folds_degenerate(&assignment, &training.labels, folds) {
        let mut rng2 = stage_rng(config.seed.wrapping_add(1), "cv_folds_reshuffle");
        assignment = stratified_folds(&training.labels, folds, &mut rng2);
        if folds_degenerate(&assignment, &training.labels, folds) {
            return Err(Error::Fold("single-class fold after reshuffle".into()));
        }
    }

    // Centered curves, scored per retained dimensionality.
    let mut centered = training.curves.clone();
    for mut col in centered.column_iter_mut() {
        col -= &model.mean;
    }
    let p = model.n_components;
    let mut scores_by_h: Vec<DMatrix<f64>> = Vec::with_capacity(p);
    for h in 1..=p {
        let proj = model.projection(h)?;
        scores_by_h.push(proj.scores_matrix(&centered)?);
    }

    let mut cells = Vec::new();
    for kernel in &config.svm.kernels {
        for &c in &config.svm.c_grid {
            for h in 1..=p {
                let scores = &scores_by_h[h - 1];
                let mut auc_sum = 0.0;
                let mut err_sum = 0.0;
                for f in 0..folds {
                    let train_idx: Vec<usize> = (0..n).filter(|&i| assignment[i] != f).collect();
                    let val_idx: Vec<usize> = (0..n).filter(|&i| assignment[i] == f).collect();
                    let mut train_feats = DMatrix::zeros(h, train_idx.len());
                    let mut train_labels = Vec::with_capacity(train_idx.len());
                    for (col, &i) in train_idx.iter().enumerate() {
                        train_feats.set_column(col, &scores.column(i));
                        train_labels.push(training.labels[i]);
                    }
                    let fold_model = svm::train(&train_feats, &train_labels, kernel, c)?;
                    let mut decisions = Vec::with_capacity(val_idx.len());
                    let mut truth = Vec::with_capacity(val_idx.len());
                    let mut wrong = 0usize;
                    for &i in &val_idx {
                        let x: Vec<f64> = scores.column(i).iter().cloned().collect();
                        let d = svm::decision(&fold_model, &x);
                        decisions.push(d);
                        truth.push(training.labels[i] > 0);
                        if (d > 0.0) != (training.labels[i] > 0) {
                            wrong += 1;
                        }
                    }
                    let (_, auc) = metrics::roc_auc(&decisions, &truth)?;
                    auc_sum += auc;
                    err_sum += wrong as f64 / val_idx.len() as f64;
                }
                cells.push(CvCell {
                    kernel: kernel.clone(),
                    c,
                    h,
                    mean_auc: auc_sum / folds as f64,
                    mean_error: err_sum / folds as f64,
                });
            }
        }
    }

    let best = cells
        .iter()
        .min_by(|a, b| {
            b.mean_auc
                .partial_cmp(&a.mean_auc)
                .unwrap()
                .then(a.h.cmp(&b.h))
                .then(kernel_order(&a.kernel).cmp(&kernel_order(&b.kernel)))
                .then(a.c.partial_cmp(&b.c).unwrap())
        })
        .expect("grid is non-empty");
    Ok(CvReport {
        selected_kernel: best.kernel.clone(),
        selected_c: best.c,
        selected_h: best.h,
        cells,
    })
}

// ---------------------------------------------------------------------------
// Case scoring and evaluation
// ---------------------------------------------------------------------------

/// Per-voxel decision values over the kept region of one case.
pub struct CaseScores {
    pub case_id: String,
    pub index: Vec<(usize, usize, usize)>,
    pub decisions: Vec<f64>,
    pub truth: Vec<bool>,
}

/// Score every kept voxel of a prepared case with the fitted ICA + SVM.
pub fn score_case(
    case: &PreparedCase,
    model: &IcaModel,
    h: usize,
    classifier: &SvmModel,
) -> Result<CaseScores> {
    let run = || -> Result<CaseScores> {
        let matrix = volume::flatten(&case.smoothed, &case.kept)?;
        let mut centered = matrix.values;
        for mut col in centered.column_iter_mut() {
            col -= &model.mean;
        }
        let proj = model.projection(h)?;
        let scores = proj.scores_matrix(&centered)?;
        let mut decisions = Vec::with_capacity(matrix.index.len());
        let mut truth = Vec::with_capacity(matrix.index.len());
        for (j, &(x, y, z)) in matrix.index.iter().enumerate() {
            let feat: Vec<f64> = scores.column(j).iter().cloned().collect();
            decisions.push(svm::decision(classifier, &feat));
            truth.push(case.truth.get(x, y, z));
        }
        Ok(CaseScores {
            case_id: case.id.clone(),
            index: matrix.index,
            decisions,
            truth,
        })
    };
    run().map_err(|e| e.for_case(&case.id))
}

/// Binary mask of kept voxels whose decision exceeds the threshold.
pub fn mask_at_threshold(case: &PreparedCase, scores: &CaseScores, threshold: f64) -> Mask3D {
    let mut mask = Mask3D::zeros(case.smoothed.dims);
    for (j, &(x, y, z)) in scores.index.iter().enumerate() {
        if scores.decisions[j] > threshold {
            mask.set(x, y, z, true);
        }
    }
    mask
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaseReport {
    pub case_id: String,
    pub n_kept: usize,
    pub n_lesion_kept: usize,
    pub confusion_at_zero: ConfusionReport,
    pub dsc_at_zero: f64,
    pub dsc_at_tau: f64,
    /// Mean hinge loss of the decisions against the voxel labels.
    pub hinge: f64,
    pub auc: f64,
    pub roc: Vec<RocPoint>,
    pub froc: Vec<FrocPoint>,
}

fn evaluate_case(
    case: &PreparedCase,
    scores: &CaseScores,
    tau: f64,
    froc_points: usize,
) -> Result<CaseReport> {
    let confusion = metrics::confusion(&scores.decisions, &scores.truth, 0.0)
        .map_err(|e| e.for_case(&case.id))?;
    let labels: Vec<i8> = scores.truth.iter().map(|&t| if t { 1 } else { -1 }).collect();
    let hinge = metrics::hinge_loss(&scores.decisions, &labels)?;
    let mask_zero = mask_at_threshold(case, scores, 0.0);
    let mask_tau = mask_at_threshold(case, scores, tau);
    let dsc_at_zero = metrics::dice(&mask_zero, &case.truth)?;
    let dsc_at_tau = metrics::dice(&mask_tau, &case.truth)?;
    let (roc, auc) =
        metrics::roc_auc(&scores.decisions, &scores.truth).map_err(|e| e.for_case(&case.id))?;
    let thresholds = metrics::froc_thresholds(&scores.decisions, froc_points);
    let froc = metrics::froc(&scores.decisions, &scores.truth, &thresholds)
        .map_err(|e| e.for_case(&case.id))?;
    Ok(CaseReport {
        case_id: case.id.clone(),
        n_kept: scores.index.len(),
        n_lesion_kept: scores.truth.iter().filter(|&&t| t).count(),
        confusion_at_zero: confusion,
        dsc_at_zero,
        dsc_at_tau,
        hinge,
        auc,
        roc,
        froc,
    })
}

// ---------------------------------------------------------------------------
// Audit log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub case_ids: Vec<String>,
    pub n_voxels: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AuditLog {
    pub stages: Vec<StageRecord>,
}

impl AuditLog {
    fn record(&mut self, stage: &str, case_ids: Vec<String>, n_voxels: usize) {
        self.stages.push(StageRecord {
            stage: stage.to_string(),
            case_ids,
            n_voxels,
        });
    }
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingMetrics {
    pub hinge_loss: f64,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub selected_kernel: KernelSpec,
    pub selected_c: f64,
    pub selected_h: usize,
    pub tau_formula: f64,
    pub tau_empirical: f64,
    pub calibration_flags: Vec<String>,
    pub training_metrics: TrainingMetrics,
    pub mean_test_dsc_at_zero: f64,
    pub mean_test_dsc_at_tau: f64,
    pub mean_test_dsc_at_tau_empirical: f64,
    pub per_case: Vec<CaseReport>,
}

/// Artifacts of a full run that stay in memory (for tests and the CLI).
pub struct RunArtifacts {
    pub summary: RunSummary,
    pub ica_model: IcaModel,
    pub svm_model: SvmModel,
    pub cv_report: CvReport,
    pub audit: AuditLog,
}

fn write_csv_roc(path: &Path, points: &[RocPoint]) -> Result<()> {
    let mut out = String::from("threshold,fpr,tpr\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
    }
    fs::write(path, out)?;
    Ok(())
}

fn write_csv_froc(path: &Path, points: &[FrocPoint]) -> Result<()> {
    let mut out = String::from("threshold,fp_count,sensitivity\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.fp_count, p.sensitivity));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Pooled SER decisions over kept voxels of the given cases; undefined
/// voxels score negative infinity so they never fire in a sweep. SER runs
/// on the acquired (unsmoothed) intensities, per its usual definition.
pub fn pooled_ser_scores(
    cases: &[PreparedCase],
    frames: (usize, usize),
) -> Result<(Vec<f64>, Vec<bool>)> {
    let mut scores = Vec::new();
    let mut truth = Vec::new();
    for case in cases {
        let map = baselines::ser_map(&case.raw, frames.0, frames.1)
            .map_err(|e| e.for_case(&case.id))?;
        for (x, y, z) in case.kept.selected() {
            scores.push(map.get(x, y, z).unwrap_or(f64::NEG_INFINITY));
            truth.push(case.truth.get(x, y, z));
        }
    }
    Ok((scores, truth))
}

/// Run the whole pipeline and write reports, models, masks and sweep tables
/// under `out_dir`. Identical config and seed reproduce every artifact byte
/// for byte.
pub fn run_full(config: &PipelineConfig, out_dir: &Path) -> Result<RunArtifacts> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    let mut audit = AuditLog::default();

    let find = |id: &String| config.cases.iter().find(|c| &c.id == id).unwrap();
    let mut train_cases = Vec::new();
    for id in &config.split.train {
        train_cases.push(prepare_case(find(id), config.fwhm_voxels)?);
    }
    let mut test_cases = Vec::new();
    for id in &config.split.test {
        test_cases.push(prepare_case(find(id), config.fwhm_voxels)?);
    }
    audit.record(
        "preprocess_train",
        config.split.train.clone(),
        train_cases.iter().map(|c| c.kept.count_ones()).sum(),
    );

    // Balanced training matrix and temporal basis.
    let training = build_training_matrix(&train_cases, config.n_benign_samples, config.seed)?;
    let train_ids = || config.split.train.clone();
    audit.record("ica_fit", train_ids(), training.labels.len());
    let ica_model = ica::fit_ica(
        &training_voxel_matrix(&training),
        config.ica.components,
        config.ica.seed,
    )?;

    audit.record("cross_validation", train_ids(), training.labels.len());
    let cv_report = cross_validate(&training, &ica_model, config)?;
    let (kernel, c, h) = (
        cv_report.selected_kernel.clone(),
        cv_report.selected_c,
        cv_report.selected_h,
    );

    // Final classifier on the full balanced training set.
    let mut centered = training.curves.clone();
    for mut col in centered.column_iter_mut() {
        col -= &ica_model.mean;
    }
    let train_scores = ica_model.projection(h)?.scores_matrix(&centered)?;
    let svm_base = svm::train(&train_scores, &training.labels, &kernel, c)?;
    audit.record("svm_train", train_ids(), training.labels.len());

    // Formula calibration (slack-based translation).
    let svm_model = svm::calibrate_translation(&svm_base);
    let tau_formula = svm_model.translation;

    // Empirical calibration on the enlarged training-half voxel set.
    let mut cal_scores = Vec::new();
    let mut cal_truth = Vec::new();
    for case in &train_cases {
        let s = score_case(case, &ica_model, h, &svm_model)?;
        cal_scores.extend_from_slice(&s.decisions);
        cal_truth.extend_from_slice(&s.truth);
    }
    audit.record("calibration", train_ids(), cal_scores.len());
    let tau_empirical = empirical_tau(&cal_scores, &cal_truth);

    // Training metrics at the raw operating point.
    let training_metrics = {
        let mut decisions = Vec::with_capacity(training.labels.len());
        for j in 0..train_scores.ncols() {
            let x: Vec<f64> = train_scores.column(j).iter().cloned().collect();
            decisions.push(svm::decision(&svm_model, &x));
        }
        let truth: Vec<bool> = training.labels.iter().map(|&y| y > 0).collect();
        let conf = metrics::confusion(&decisions, &truth, 0.0)?;
        TrainingMetrics {
            hinge_loss: metrics::hinge_loss(&decisions, &training.labels)?,
            accuracy: conf.accuracy,
            sensitivity: conf.sensitivity,
            specificity: conf.specificity,
        }
    };

    // Test evaluation.
    let mut per_case = Vec::new();
    let mut pooled_decisions = Vec::new();
    let mut pooled_truth = Vec::new();
    let mut dsc_tau_emp_sum = 0.0;
    for case in &test_cases {
        let scores = score_case(case, &ica_model, h, &svm_model)?;
        let report = evaluate_case(case, &scores, tau_formula, config.froc_points)?;
        volume::write_mask(
            out_dir.join(format!("pred_{}_mask_d0", case.id)),
            &mask_at_threshold(case, &scores, 0.0),
        )?;
        volume::write_mask(
            out_dir.join(format!("pred_{}_mask_tau", case.id)),
            &mask_at_threshold(case, &scores, tau_formula),
        )?;
        // Decision map as a single-frame volume, zero outside the kept region.
        let mut dmap = DynamicVolume::zeros(
            case.smoothed.dims,
            1,
            case.smoothed.spacing,
            case.smoothed.dt,
        );
        for (j, &(x, y, z)) in scores.index.iter().enumerate() {
            dmap.set(x, y, z, 0, scores.decisions[j]);
        }
        volume::write_volume(out_dir.join(format!("pred_{}_scores", case.id)), &dmap)?;
        let mask_emp = mask_at_threshold(case, &scores, tau_empirical);
        dsc_tau_emp_sum += metrics::dice(&mask_emp, &case.truth)?;
        pooled_decisions.extend_from_slice(&scores.decisions);
        pooled_truth.extend_from_slice(&scores.truth);
        per_case.push(report);
    }
    audit.record("test_eval", config.split.test.clone(), pooled_decisions.len());

    // Pooled sweeps for plotting: ICA-SVM vs the SER baseline.
    let nt = test_cases[0].smoothed.nt;
    let ser_frames = config.ser_frames.unwrap_or((2.min(nt - 2).max(1), nt - 1));
    let (roc_pooled, _) = metrics::roc_auc(&pooled_decisions, &pooled_truth)?;
    write_csv_roc(&out_dir.join("roc_test_pooled.csv"), &roc_pooled)?;
    let svm_thresholds = metrics::froc_thresholds(&pooled_decisions, config.froc_points);
    let froc_svm = metrics::froc(&pooled_decisions, &pooled_truth, &svm_thresholds)?;
    write_csv_froc(&out_dir.join("froc_icasvm.csv"), &froc_svm)?;
    let (ser_scores, ser_truth) = pooled_ser_scores(&test_cases, ser_frames)?;
    let defined: Vec<f64> = ser_scores.iter().cloned().filter(|v| v.is_finite()).collect();
    let ser_thresholds = metrics::froc_thresholds(&defined, config.froc_points);
    let froc_ser = metrics::froc(&ser_scores, &ser_truth, &ser_thresholds)?;
    write_csv_froc(&out_dir.join("froc_ser.csv"), &froc_ser)?;

    let n_cases = per_case.len() as f64;
    let summary = RunSummary {
        selected_kernel: kernel,
        selected_c: c,
        selected_h: h,
        tau_formula,
        tau_empirical,
        calibration_flags: svm_model.flags.clone(),
        training_metrics,
        mean_test_dsc_at_zero: per_case.iter().map(|r| r.dsc_at_zero).sum::<f64>() / n_cases,
        mean_test_dsc_at_tau: per_case.iter().map(|r| r.dsc_at_tau).sum::<f64>() / n_cases,
        mean_test_dsc_at_tau_empirical: dsc_tau_emp_sum / n_cases,
        per_case,
    };

    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    fs::write(out_dir.join("cv_report.json"), serde_json::to_string_pretty(&cv_report)?)?;
    fs::write(out_dir.join("audit_log.json"), serde_json::to_string_pretty(&audit)?)?;
    fs::write(out_dir.join("ica_model.json"), ica_model.to_json()?)?;
    fs::write(out_dir.join("svm_model.json"), svm_model.to_json()?)?;

    Ok(RunArtifacts {
        summary,
        ica_model,
        svm_model,
        cv_report,
        audit,
    })
}

/// Threshold maximizing pooled Dice over a 200-point sweep of [0, max d].
fn empirical_tau(decisions: &[f64], truth: &[bool]) -> f64 {
    let max_d = decisions.iter().cloned().fold(0.0_f64, f64::max);
    let mut best = (0.0_f64, f64::NEG_INFINITY);
    for i in 0..200 {
        let tau = max_d * i as f64 / 199.0;
        let pred: Vec<bool> = decisions.iter().map(|&d| d > tau).collect();
        let dsc = metrics::dice_flat(&pred, truth).unwrap_or(0.0);
        if dsc > best.1 {
            best = (tau, dsc);
        }
    }
    best.0
}
