use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dceseg::ica::IcaModel;
use dceseg::phantom::PhantomSpec;
use dceseg::pipeline::{self, PipelineConfig};
use dceseg::svm::SvmModel;
use dceseg::{baselines, ica, metrics, phantom, preprocess, svm, volume};

/// Lesion segmentation in 4D dynamic volumes via temporal ICA and a
/// calibrated kernel SVM.
#[derive(Parser)]
#[command(name = "dceseg", version, about)]
struct Cli {
    /// Override the seed of the loaded config or phantom spec.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecompositionMethod {
    Ica,
    Pca,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineKind {
    Ser,
    Dser,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom case (volume + truth + breast masks).
    Phantom {
        /// Phantom spec JSON; the built-in default spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Output DVOL prefix; writes <prefix>.*, <prefix>_truth.*,
        /// <prefix>_kept.*.
        #[arg(long)]
        out_prefix: PathBuf,
        /// Write the effective spec JSON next to the outputs.
        #[arg(long)]
        emit_spec: bool,
    },
    /// Smooth a volume and compute its chest-crop keep mask.
    Preprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        fwhm: f64,
        /// Output DVOL path for the smoothed volume.
        #[arg(long)]
        out: PathBuf,
        /// Output DVOL path for the keep mask.
        #[arg(long)]
        mask: PathBuf,
    },
    /// Fit the temporal decomposition on the balanced training sample.
    FitIca {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "ica")]
        method: DecompositionMethod,
    },
    /// Cross-validate (kernel, C, h) and train the final classifier.
    TrainSvm {
        #[arg(long)]
        config: PathBuf,
        /// Fitted decomposition model JSON.
        #[arg(long)]
        ica: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the cross-validation report here.
        #[arg(long)]
        cv_report: Option<PathBuf>,
    },
    /// Compute the slack-based translation offset of a trained classifier.
    Calibrate {
        #[arg(long)]
        svm: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one case: smoothing, cropping, projection, decision map.
    Predict {
        #[arg(long)]
        ica: PathBuf,
        #[arg(long)]
        svm: PathBuf,
        /// Retained components (defaults to all fitted components).
        #[arg(long)]
        components: Option<usize>,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        fwhm: f64,
        /// Output prefix; writes <prefix>_scores.*, <prefix>_mask_d0.*,
        /// <prefix>_mask_tau.*, <prefix>_kept.*.
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Evaluate a decision map against a truth mask.
    Eval {
        /// Decision map DVOL (single frame).
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Restrict evaluation to this keep mask.
        #[arg(long)]
        kept: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        #[arg(long)]
        report: PathBuf,
        /// Write ROC/FROC sweep CSVs into this directory.
        #[arg(long)]
        emit_plot_data: Option<PathBuf>,
    },
    /// Run the whole pipeline from a config file.
    RunFull {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Classical kinetic baseline maps.
    Baseline {
        #[arg(value_enum)]
        kind: BaselineKind,
        #[arg(long = "in")]
        input: PathBuf,
        /// First post-contrast frame index.
        #[arg(long)]
        t1: usize,
        /// Final frame index.
        #[arg(long)]
        tf: usize,
        /// Output DVOL prefix; writes <prefix>.* (values, zero where
        /// undefined) and <prefix>_defined.* (mask of defined voxels).
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<PipelineConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut cfg = PipelineConfig::from_json(&text)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn prepare_training(
    cfg: &PipelineConfig,
) -> Result<(Vec<pipeline::PreparedCase>, pipeline::TrainingSet)> {
    let mut cases = Vec::new();
    for id in &cfg.split.train {
        let case = cfg
            .cases
            .iter()
            .find(|c| &c.id == id)
            .with_context(|| format!("case {id} missing from config"))?;
        cases.push(pipeline::prepare_case(case, cfg.fwhm_voxels)?);
    }
    let training = pipeline::build_training_matrix(&cases, cfg.n_benign_samples, cfg.seed)?;
    Ok((cases, training))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Phantom {
            spec,
            out_prefix,
            emit_spec,
        } => {
            let mut ph: PhantomSpec = match spec {
                Some(path) => serde_json::from_str(
                    &fs::read_to_string(&path)
                        .with_context(|| format!("reading spec {}", path.display()))?,
                )?,
                None => PhantomSpec::default(),
            };
            if let Some(seed) = cli.seed {
                ph.seed = seed;
            }
            let (vol, truth, kept) = phantom::generate(&ph)?;
            volume::write_volume(&out_prefix, &vol)?;
            let with_suffix = |suffix: &str| {
                let mut name = out_prefix.file_name().unwrap_or_default().to_os_string();
                name.push(suffix);
                out_prefix.with_file_name(name)
            };
            volume::write_mask(with_suffix("_truth"), &truth)?;
            volume::write_mask(with_suffix("_kept"), &kept)?;
            if emit_spec {
                fs::write(with_suffix("_spec.json"), serde_json::to_string_pretty(&ph)?)?;
            }
            println!(
                "phantom {}: {} lesion voxels / {} breast voxels",
                out_prefix.display(),
                truth.count_ones(),
                kept.count_ones()
            );
        }
        Command::Preprocess {
            input,
            fwhm,
            out,
            mask,
        } => {
            let vol = volume::load_volume(&input)?;
            let smoothed = preprocess::gaussian_smooth(&vol, fwhm)?;
            let planes = preprocess::find_midplanes(&smoothed)?;
            let kept = preprocess::crop_chest(&smoothed, &planes)?;
            volume::write_volume(&out, &smoothed)?;
            volume::write_mask(&mask, &kept)?;
            println!(
                "sagittal_mid={} coronal_cut={} kept={} voxels",
                planes.sagittal_mid,
                planes.coronal_cut,
                kept.count_ones()
            );
        }
        Command::FitIca {
            config,
            out,
            method,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            let (_, training) = prepare_training(&cfg)?;
            let matrix = pipeline::training_voxel_matrix(&training);
            let model = match method {
                DecompositionMethod::Ica => {
                    ica::fit_ica(&matrix, cfg.ica.components, cfg.ica.seed)?
                }
                DecompositionMethod::Pca => ica::fit_pca(&matrix, cfg.ica.components)?,
            };
            fs::write(&out, model.to_json()?)?;
            println!(
                "fitted {} components on {} samples; mse order {:?}",
                model.n_components,
                training.labels.len(),
                model.order
            );
        }
        Command::TrainSvm {
            config,
            ica: ica_path,
            out,
            cv_report,
        } => {
            let cfg = load_config(&config, cli.seed)?;
            let (_, training) = prepare_training(&cfg)?;
            let model = IcaModel::from_json(&fs::read_to_string(&ica_path)?)?;
            let report = pipeline::cross_validate(&training, &model, &cfg)?;
            let mut centered = training.curves.clone();
            for mut col in centered.column_iter_mut() {
                col -= &model.mean;
            }
            let scores = model
                .projection(report.selected_h)?
                .scores_matrix(&centered)?;
            let classifier = svm::train(
                &scores,
                &training.labels,
                &report.selected_kernel,
                report.selected_c,
            )?;
            fs::write(&out, classifier.to_json()?)?;
            if let Some(path) = cv_report {
                fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            }
            println!(
                "selected kernel={:?} C={} h={}; {} support vectors",
                report.selected_kernel,
                report.selected_c,
                report.selected_h,
                classifier.n_support_vectors()
            );
        }
        Command::Calibrate { svm: svm_path, out } => {
            let model = SvmModel::from_json(&fs::read_to_string(&svm_path)?)?;
            let calibrated = svm::calibrate_translation(&model);
            fs::write(&out, calibrated.to_json()?)?;
            println!(
                "tau = {} (flags: {:?})",
                calibrated.translation, calibrated.flags
            );
        }
        Command::Predict {
            ica: ica_path,
            svm: svm_path,
            components,
            input,
            fwhm,
            out_prefix,
        } => {
            let model = IcaModel::from_json(&fs::read_to_string(&ica_path)?)?;
            let classifier = SvmModel::from_json(&fs::read_to_string(&svm_path)?)?;
            let h = components.unwrap_or(model.n_components);
            let vol = volume::load_volume(&input)?;
            let smoothed = preprocess::gaussian_smooth(&vol, fwhm)?;
            let planes = preprocess::find_midplanes(&smoothed)?;
            let kept = preprocess::crop_chest(&smoothed, &planes)?;
            let case = pipeline::PreparedCase {
                id: input.display().to_string(),
                truth: volume::Mask3D::zeros(smoothed.dims),
                raw: vol,
                smoothed,
                kept,
                planes,
            };
            let scores = pipeline::score_case(&case, &model, h, &classifier)?;
            let with_suffix = |suffix: &str| {
                let mut name = out_prefix.file_name().unwrap_or_default().to_os_string();
                name.push(suffix);
                out_prefix.with_file_name(name)
            };
            let mut dmap = volume::DynamicVolume::zeros(
                case.smoothed.dims,
                1,
                case.smoothed.spacing,
                case.smoothed.dt,
            );
            for (j, &(x, y, z)) in scores.index.iter().enumerate() {
                dmap.set(x, y, z, 0, scores.decisions[j]);
            }
            volume::write_volume(with_suffix("_scores"), &dmap)?;
            volume::write_mask(
                with_suffix("_mask_d0"),
                &pipeline::mask_at_threshold(&case, &scores, 0.0),
            )?;
            volume::write_mask(
                with_suffix("_mask_tau"),
                &pipeline::mask_at_threshold(&case, &scores, classifier.translation),
            )?;
            volume::write_mask(with_suffix("_kept"), &case.kept)?;
            println!(
                "scored {} voxels; tau={}; positive at 0: {}",
                scores.decisions.len(),
                classifier.translation,
                scores.decisions.iter().filter(|&&d| d > 0.0).count()
            );
        }
        Command::Eval {
            scores,
            truth,
            kept,
            threshold,
            report,
            emit_plot_data,
        } => {
            let map = volume::load_volume(&scores)?;
            if map.nt != 1 {
                bail!("decision map must have nt = 1");
            }
            let truth_mask = volume::load_mask(&truth)?;
            if truth_mask.dims != map.dims {
                bail!("truth mask dims do not match decision map");
            }
            let keep = match kept {
                Some(path) => volume::load_mask(&path)?,
                None => volume::Mask3D::ones(map.dims),
            };
            let mut values = Vec::new();
            let mut labels = Vec::new();
            let mut pred_mask = volume::Mask3D::zeros(map.dims);
            for (x, y, z) in keep.selected() {
                let v = map.at(x, y, z, 0);
                values.push(v);
                labels.push(truth_mask.get(x, y, z));
                if v > threshold {
                    pred_mask.set(x, y, z, true);
                }
            }
            let confusion = metrics::confusion(&values, &labels, threshold)?;
            let dsc = metrics::dice(&pred_mask, &truth_mask)?;
            let signed: Vec<i8> = labels.iter().map(|&t| if t { 1 } else { -1 }).collect();
            let hinge = metrics::hinge_loss(&values, &signed)?;
            let (roc, auc) = metrics::roc_auc(&values, &labels)?;
            let thresholds = metrics::froc_thresholds(&values, 200);
            let froc = metrics::froc(&values, &labels, &thresholds)?;
            let eval = metrics::EvalReport {
                confusion,
                dsc,
                hinge: Some(hinge),
                roc: roc.clone(),
                auc,
                froc: froc.clone(),
            };
            fs::write(&report, serde_json::to_string_pretty(&eval)?)?;
            if let Some(dir) = emit_plot_data {
                fs::create_dir_all(&dir)?;
                let mut out = String::from("threshold,fpr,tpr\n");
                for p in &roc {
                    out.push_str(&format!("{},{},{}\n", p.threshold, p.fpr, p.tpr));
                }
                fs::write(dir.join("roc.csv"), out)?;
                let mut out = String::from("threshold,fp_count,sensitivity\n");
                for p in &froc {
                    out.push_str(&format!(
                        "{},{},{}\n",
                        p.threshold, p.fp_count, p.sensitivity
                    ));
                }
                fs::write(dir.join("froc.csv"), out)?;
            }
            println!("dsc={} auc={}", dsc, auc);
        }
        Command::RunFull { config, out_dir } => {
            let cfg = load_config(&config, cli.seed)?;
            let artifacts = pipeline::run_full(&cfg, &out_dir)?;
            let s = &artifacts.summary;
            println!(
                "kernel={:?} C={} h={} tau={:.4} tau_emp={:.4}",
                s.selected_kernel, s.selected_c, s.selected_h, s.tau_formula, s.tau_empirical
            );
            println!(
                "mean test DSC: d=0 {:.4} | tau {:.4} | tau_emp {:.4}",
                s.mean_test_dsc_at_zero, s.mean_test_dsc_at_tau, s.mean_test_dsc_at_tau_empirical
            );
            println!("reports written to {}", out_dir.display());
        }
        Command::Baseline {
            kind,
            input,
            t1,
            tf,
            out,
        } => {
            let vol = volume::load_volume(&input)?;
            let map = match kind {
                BaselineKind::Ser => baselines::ser_map(&vol, t1, tf)?,
                BaselineKind::Dser => baselines::derivative_ser_map(&vol, t1, tf)?,
            };
            let mut values = volume::DynamicVolume::zeros(map.dims, 1, vol.spacing, vol.dt);
            let mut defined = volume::Mask3D::zeros(map.dims);
            for z in 0..map.dims.2 {
                for y in 0..map.dims.1 {
                    for x in 0..map.dims.0 {
                        if let Some(v) = map.get(x, y, z) {
                            values.set(x, y, z, 0, v);
                            defined.set(x, y, z, true);
                        }
                    }
                }
            }
            volume::write_volume(&out, &values)?;
            let mut name = out.file_name().unwrap_or_default().to_os_string();
            name.push("_defined");
            volume::write_mask(out.with_file_name(name), &defined)?;
            println!(
                "{} of {} voxels defined",
                defined.count_ones(),
                map.values.len()
            );
        }
    }
    Ok(())
}
