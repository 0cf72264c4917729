//! Batch pipeline stages: synth, fit-density, train, evaluate.
//!
//! Every stage is a plain function over a [`RunConfig`] so it can be driven
//! from the binary or from tests. Stages communicate only through files in
//! the output directory; training and evaluation resume by skipping
//! (loss, lead time, seed) triples whose outputs already exist under a
//! matching manifest.

use super::config::{MetricsSection, RunConfig, TrainSection};
use crate::data::{
    apply_normalization, load_csv, normalize, synth_bursts, write_csv, CsvSchema,
    NormalizationStats, TimeSeriesDataset,
};
use crate::density::{fit_log_density_gp, histogram_log_density, GpLogDensity};
use crate::error::{Error, Result};
use crate::loss::{precompute_ow_weights, LossKind, LossSpec};
use crate::metrics::{
    default_eps_grid, full_report, log_spaced, DensityDistanceConfig, MetricsReport,
};
use crate::regressor::{forward, load_model, save_model, ModelConfig};
use crate::textio::{file_sha256, fmt_f64};
use crate::train::{aggregate, split_contiguous, train, SplitSpec, SplitWindows};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Canonical file locations inside one run's output directory.
#[derive(Debug, Clone)]
pub struct OutputLayout {
    root: PathBuf,
}

impl OutputLayout {
    pub fn new(root: &Path) -> OutputLayout {
        OutputLayout {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_csv(&self) -> PathBuf {
        self.root.join("data/synth.csv")
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.root.join("data/synth_manifest.toml")
    }

    pub fn density_file(&self) -> PathBuf {
        self.root.join("density/density.txt")
    }

    pub fn normalization_file(&self) -> PathBuf {
        self.root.join("density/normalization.toml")
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.root.join("models/train_manifest.toml")
    }

    pub fn model_file(&self, loss: LossKind, tau: usize, seed: u64) -> PathBuf {
        self.root
            .join(format!("models/{}_tau{tau}_seed{seed}.model", loss.name()))
    }

    pub fn epoch_log(&self, loss: LossKind, tau: usize, seed: u64) -> PathBuf {
        self.root
            .join(format!("logs/{}_tau{tau}_seed{seed}_epochs.csv", loss.name()))
    }

    pub fn failures_file(&self) -> PathBuf {
        self.root.join("models/failures.csv")
    }

    pub fn report_file(&self, loss: LossKind, tau: usize, seed: u64) -> PathBuf {
        self.root
            .join(format!("metrics/report_{}_tau{tau}_seed{seed}.json", loss.name()))
    }

    pub fn curve_file(&self, measure: &str, loss: LossKind, tau: usize) -> PathBuf {
        self.root
            .join(format!("metrics/{measure}_{}_tau{tau}.csv", loss.name()))
    }

    pub fn d_summary(&self) -> PathBuf {
        self.root.join("metrics/d_summary.csv")
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

/// The synthetic generator's CSV column layout.
pub fn synth_schema() -> CsvSchema {
    CsvSchema {
        time: Some("t".to_string()),
        target: "target".to_string(),
        inputs: vec![
            "latent_obs".to_string(),
            "latent_diff".to_string(),
            "baseline_noise".to_string(),
        ],
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SynthManifest {
    params: crate::data::SynthParams,
    rows: usize,
    csv_sha256: String,
}

/// Generate the synthetic benchmark and write CSV plus a sidecar manifest.
pub fn run_synth(cfg: &RunConfig) -> Result<PathBuf> {
    let params = cfg
        .dataset
        .synth
        .as_ref()
        .ok_or_else(|| Error::BadParameter("config has no dataset.synth section".into()))?;
    let layout = OutputLayout::new(&cfg.output.dir);
    let ds = synth_bursts(params)?;
    let csv_path = layout.data_csv();
    ensure_parent(&csv_path)?;
    write_csv(&ds, &csv_path)?;
    let manifest = SynthManifest {
        params: params.clone(),
        rows: ds.len(),
        csv_sha256: file_sha256(&csv_path)?,
    };
    let text = toml::to_string_pretty(&manifest).map_err(|e| Error::ParseFile {
        path: layout.data_manifest().display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(layout.data_manifest(), text)?;
    Ok(csv_path)
}

/// Locate and load the dataset a run is configured for.
fn resolve_dataset(cfg: &RunConfig) -> Result<(TimeSeriesDataset, PathBuf)> {
    let layout = OutputLayout::new(&cfg.output.dir);
    if cfg.dataset.synth.is_some() {
        let path = layout.data_csv();
        if !path.exists() {
            return Err(Error::BadParameter(format!(
                "dataset file {} not found; run the synth stage first",
                path.display()
            )));
        }
        Ok((load_csv(&path, &synth_schema())?, path))
    } else {
        let path = cfg.dataset.csv.clone().unwrap();
        let schema = cfg.dataset.schema.as_ref().unwrap();
        Ok((load_csv(&path, schema)?, path))
    }
}

/// Rows used for normalization statistics and the density fit: the leading
/// `train` fraction of the source series. This prefix never overlaps the
/// test windows for any sane history/lead-time configuration, which the
/// evaluate stage re-checks.
fn stats_segment(len: usize, split: &SplitSpec) -> (usize, usize) {
    (0, ((split.train * len as f64).floor() as usize).max(2))
}

#[derive(Debug)]
pub struct FitDensitySummary {
    pub lengthscale: f64,
    pub signal_var: f64,
    pub max_abs_log_residual: f64,
    pub occupied_bins: usize,
}

/// Fit the target density on the training segment and serialize it together
/// with the normalization statistics.
pub fn run_fit_density(cfg: &RunConfig) -> Result<FitDensitySummary> {
    let layout = OutputLayout::new(&cfg.output.dir);
    let (ds, _) = resolve_dataset(cfg)?;
    let segment = stats_segment(ds.len(), &cfg.split);
    let (norm_ds, stats) = normalize(&ds, segment)?;
    let train_targets = &norm_ds.target[segment.0..segment.1];
    let hist = histogram_log_density(train_targets, cfg.metrics.n_b)?;
    let density = fit_log_density_gp(&hist)?;

    let mut max_resid: f64 = 0.0;
    for (i, &count) in hist.counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let fitted = (density.density_at(hist.centers[i]) - density.floor()).ln();
        max_resid = max_resid.max((fitted - hist.log_p[i]).abs());
    }

    let dpath = layout.density_file();
    ensure_parent(&dpath)?;
    density.save(&dpath)?;
    let stats_text = toml::to_string_pretty(&stats).map_err(|e| Error::ParseFile {
        path: layout.normalization_file().display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(layout.normalization_file(), stats_text)?;
    Ok(FitDensitySummary {
        lengthscale: density.lengthscale(),
        signal_var: density.signal_var(),
        max_abs_log_residual: max_resid,
        occupied_bins: hist.occupied(),
    })
}

/// Everything the train and evaluate stages share, loaded from artifacts so
/// later stages never touch raw training targets directly.
pub struct PipelineInputs {
    pub dataset_path: PathBuf,
    pub dataset_sha256: String,
    pub stats: NormalizationStats,
    pub density: Arc<GpLogDensity>,
    pub norm_ds: TimeSeriesDataset,
    pub model_cfg: ModelConfig,
}

pub fn load_pipeline_inputs(cfg: &RunConfig) -> Result<PipelineInputs> {
    let layout = OutputLayout::new(&cfg.output.dir);
    let (raw, dataset_path) = resolve_dataset(cfg)?;
    let dataset_sha256 = file_sha256(&dataset_path)?;
    let stats_path = layout.normalization_file();
    let stats_text = std::fs::read_to_string(&stats_path).map_err(|_| {
        Error::BadParameter(format!(
            "{} not found; run the fit-density stage first",
            stats_path.display()
        ))
    })?;
    let stats: NormalizationStats = toml::from_str(&stats_text).map_err(|e| Error::ParseFile {
        path: stats_path.display().to_string(),
        message: e.to_string(),
    })?;
    let density = Arc::new(GpLogDensity::load(&layout.density_file())?);
    let norm_ds = apply_normalization(&raw, &stats)?;
    let model_cfg = cfg.model.resolve(norm_ds.n_features())?;
    Ok(PipelineInputs {
        dataset_path,
        dataset_sha256,
        stats,
        density,
        norm_ds,
        model_cfg,
    })
}

/// Identity of a training run, compared against the on-disk manifest before
/// any resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub dataset_sha256: String,
    pub density_sha256: String,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub split: SplitSpec,
    pub losses: Vec<LossKind>,
    pub lambda: f64,
    pub exp_cap: f64,
    pub aow_frozen_weights: bool,
    pub lead_times: Vec<usize>,
    pub ensemble: usize,
    pub seeds: Vec<u64>,
    pub n_b: usize,
}

fn build_manifest(cfg: &RunConfig, inputs: &PipelineInputs) -> Result<TrainManifest> {
    let layout = OutputLayout::new(&cfg.output.dir);
    Ok(TrainManifest {
        dataset_sha256: inputs.dataset_sha256.clone(),
        density_sha256: file_sha256(&layout.density_file())?,
        model: inputs.model_cfg.clone(),
        train: cfg.train.clone(),
        split: cfg.split,
        losses: cfg.experiment.losses.clone(),
        lambda: cfg.experiment.lambda,
        exp_cap: cfg.experiment.exp_cap,
        aow_frozen_weights: cfg.experiment.aow_frozen_weights,
        lead_times: cfg.experiment.lead_times.clone(),
        ensemble: cfg.experiment.ensemble,
        seeds: cfg.experiment.seeds.clone(),
        n_b: cfg.metrics.n_b,
    })
}

fn loss_spec_for(
    kind: LossKind,
    cfg: &RunConfig,
    density: &Arc<GpLogDensity>,
    train_targets: &[f64],
) -> LossSpec {
    let mut spec = match kind {
        LossKind::Mse => LossSpec::mse(),
        LossKind::Ow => {
            let mut s = LossSpec::ow(density.clone());
            s.ow_weights = Some(precompute_ow_weights(train_targets, density));
            s
        }
        LossKind::Aow => LossSpec::aow(density.clone()),
        LossKind::Re => LossSpec::re(cfg.experiment.lambda),
    };
    spec.exp_cap = cfg.experiment.exp_cap;
    spec.aow_frozen_weights = cfg.experiment.aow_frozen_weights;
    spec
}

fn rayon_pool(workers: usize) -> Result<rayon::ThreadPool> {
    let threads = if workers == 0 {
        std::thread::available_parallelism()
            .map(|n| n.get())
            .unwrap_or(1)
    } else {
        workers
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::BadParameter(format!("thread pool: {e}")))
}

#[derive(Debug, Default)]
pub struct TrainStageSummary {
    pub trained: usize,
    pub skipped: usize,
    pub failures: Vec<(LossKind, usize, u64, String)>,
}

/// Train every (loss, lead time, seed) triple, skipping whatever is already
/// on disk under a matching manifest. A mismatched manifest aborts before
/// touching anything. Individual training failures are recorded in
/// `models/failures.csv` and the rest continue.
pub fn run_train(cfg: &RunConfig, workers: usize) -> Result<TrainStageSummary> {
    let layout = OutputLayout::new(&cfg.output.dir);
    let inputs = load_pipeline_inputs(cfg)?;
    let manifest = build_manifest(cfg, &inputs)?;
    let manifest_path = layout.train_manifest();
    if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path)?;
        let existing: TrainManifest = toml::from_str(&text).map_err(|e| Error::ParseFile {
            path: manifest_path.display().to_string(),
            message: e.to_string(),
        })?;
        if existing != manifest {
            return Err(Error::ResumeMismatch);
        }
    } else {
        ensure_parent(&manifest_path)?;
        let text = toml::to_string_pretty(&manifest).map_err(|e| Error::ParseFile {
            path: manifest_path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(&manifest_path, text)?;
    }

    // windows and loss specs are shared per lead time
    let mut splits: BTreeMap<usize, SplitWindows> = BTreeMap::new();
    for &tau in &cfg.experiment.lead_times {
        let windows = crate::data::make_windows(&inputs.norm_ds, inputs.model_cfg.history_len, tau)?;
        splits.insert(tau, split_contiguous(&windows, &cfg.split)?);
    }
    let mut specs: BTreeMap<(LossKind, usize), LossSpec> = BTreeMap::new();
    for &kind in &cfg.experiment.losses {
        for &tau in &cfg.experiment.lead_times {
            let split = &splits[&tau];
            specs.insert(
                (kind, tau),
                loss_spec_for(kind, cfg, &inputs.density, &split.train.targets),
            );
        }
    }

    let seeds = &cfg.experiment.seeds[..cfg.experiment.ensemble];
    let mut jobs = Vec::new();
    let mut skipped = 0usize;
    for &kind in &cfg.experiment.losses {
        for &tau in &cfg.experiment.lead_times {
            for &seed in seeds {
                if layout.model_file(kind, tau, seed).exists() {
                    skipped += 1;
                } else {
                    jobs.push((kind, tau, seed));
                }
            }
        }
    }
    for (kind, tau, seed) in &jobs {
        ensure_parent(&layout.model_file(*kind, *tau, *seed))?;
        ensure_parent(&layout.epoch_log(*kind, *tau, *seed))?;
    }

    let pool = rayon_pool(workers)?;
    let model_cfg = &inputs.model_cfg;
    let results: Vec<(LossKind, usize, u64, std::result::Result<(), String>)> =
        pool.install(|| {
            jobs.par_iter()
                .map(|&(kind, tau, seed)| {
                    let split = &splits[&tau];
                    let spec = &specs[&(kind, tau)];
                    let tcfg = cfg.train.to_train_config(seed);
                    let log_path = layout.epoch_log(kind, tau, seed);
                    let outcome = (|| -> Result<()> {
                        let file = std::fs::File::create(&log_path)?;
                        let mut writer = BufWriter::new(file);
                        use std::io::Write;
                        writeln!(writer, "epoch,train_loss,val_loss,best_val,elapsed_s")?;
                        let model =
                            train(model_cfg, spec, split, &tcfg, Some(&mut writer))?;
                        save_model(&layout.model_file(kind, tau, seed), model_cfg, &model.params)?;
                        Ok(())
                    })();
                    (kind, tau, seed, outcome.map_err(|e| e.to_string()))
                })
                .collect()
        });

    let mut summary = TrainStageSummary {
        skipped,
        ..TrainStageSummary::default()
    };
    let mut failure_lines = String::from("loss,tau,seed,error\n");
    for (kind, tau, seed, outcome) in results {
        match outcome {
            Ok(()) => summary.trained += 1,
            Err(msg) => {
                failure_lines.push_str(&format!("{},{tau},{seed},{msg:?}\n", kind.name()));
                summary.failures.push((kind, tau, seed, msg));
            }
        }
    }
    if !summary.failures.is_empty() {
        ensure_parent(&layout.failures_file())?;
        std::fs::write(layout.failures_file(), failure_lines)?;
    }
    Ok(summary)
}

fn write_rate_curves(
    path: &Path,
    header: &str,
    grid: &[f64],
    member_curves: &[Vec<(f64, f64)>],
) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for &g in grid {
        let values: Vec<f64> = member_curves
            .iter()
            .filter_map(|curve| {
                curve
                    .iter()
                    .find(|(x, _)| *x == g)
                    .map(|(_, v)| *v)
            })
            .collect();
        if values.is_empty() {
            continue;
        }
        let agg = aggregate(&values);
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(g),
            fmt_f64(agg.mean),
            fmt_f64(agg.p10),
            fmt_f64(agg.p90)
        ));
    }
    ensure_parent(path)?;
    std::fs::write(path, out)?;
    Ok(())
}

/// Evaluate every trained member on the test segment and write per-model
/// reports plus aggregate curves. With `perfect` set, the model predictions
/// are replaced by the true targets as a harness self-test.
pub fn run_evaluate(cfg: &RunConfig, workers: usize, perfect: bool) -> Result<()> {
    let layout = OutputLayout::new(&cfg.output.dir);
    let inputs = load_pipeline_inputs(cfg)?;
    let seeds = &cfg.experiment.seeds[..cfg.experiment.ensemble];

    // fail fast when models are missing
    if !perfect {
        let mut missing = Vec::new();
        for &kind in &cfg.experiment.losses {
            for &tau in &cfg.experiment.lead_times {
                for &seed in seeds {
                    let p = layout.model_file(kind, tau, seed);
                    if !p.exists() {
                        missing.push(p.display().to_string());
                    }
                }
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingModels(missing));
        }
    }

    let dcfg = DensityDistanceConfig {
        n_b: cfg.metrics.n_b,
        grid_points: cfg.metrics.d_grid_points,
        normalize_by_length: false,
    };
    let omega_grid = log_spaced(
        cfg.metrics.omega_min,
        cfg.metrics.omega_max,
        cfg.metrics.omega_points,
    );

    let pool = rayon_pool(workers)?;
    std::fs::create_dir_all(layout.root().join("metrics"))?;
    let mut d_rows: Vec<(LossKind, usize, f64, f64, f64)> = Vec::new();
    for &tau in &cfg.experiment.lead_times {
        let windows = crate::data::make_windows(&inputs.norm_ds, inputs.model_cfg.history_len, tau)?;
        let split = split_contiguous(&windows, &cfg.split)?;
        // the stats/density segment must not reach into any test window
        let first_test_row = split.test.first_input_row();
        if inputs.stats.segment.1 > first_test_row {
            return Err(Error::BadParameter(format!(
                "training statistics segment ends at row {} but test windows start at row {first_test_row}",
                inputs.stats.segment.1
            )));
        }
        let test_batch = split.test.to_batch();
        let y_test = test_batch.targets.clone();
        let eps_grid = default_eps_grid(&y_test, &inputs.density, cfg.metrics.eps_points);

        for &kind in &cfg.experiment.losses {
            let reports: Vec<Result<MetricsReport>> = pool.install(|| {
                seeds
                    .par_iter()
                    .map(|&seed| {
                        let y_hat = if perfect {
                            y_test.clone()
                        } else {
                            let (mcfg, params) =
                                load_model(&layout.model_file(kind, tau, seed))?;
                            forward(&params, &mcfg, &test_batch)?
                        };
                        let report = full_report(
                            &y_test,
                            &y_hat,
                            &inputs.density,
                            &eps_grid,
                            &omega_grid,
                            &dcfg,
                        )?;
                        report.save(&layout.report_file(kind, tau, seed))?;
                        Ok(report)
                    })
                    .collect()
            });
            let mut ok_reports = Vec::new();
            for r in reports {
                ok_reports.push(r?);
            }
            let alpha_curves: Vec<Vec<(f64, f64)>> = ok_reports
                .iter()
                .map(|r| r.alpha_curve.iter().map(|p| (p.omega, p.value)).collect())
                .collect();
            write_rate_curves(
                &layout.curve_file("alpha", kind, tau),
                "omega,alpha_mean,alpha_p10,alpha_p90",
                &omega_grid,
                &alpha_curves,
            )?;
            let f1_curves: Vec<Vec<(f64, f64)>> = ok_reports
                .iter()
                .map(|r| r.f1_curve.iter().map(|p| (p.omega, p.value)).collect())
                .collect();
            write_rate_curves(
                &layout.curve_file("f1", kind, tau),
                "omega,f1_mean,f1_p10,f1_p90",
                &omega_grid,
                &f1_curves,
            )?;
            let msee_curves: Vec<Vec<(f64, f64)>> = ok_reports
                .iter()
                .map(|r| r.mse_eps_curve.iter().map(|p| (p.eps, p.mse)).collect())
                .collect();
            write_rate_curves(
                &layout.curve_file("mse_eps", kind, tau),
                "eps,msee_mean,msee_p10,msee_p90",
                &eps_grid,
                &msee_curves,
            )?;
            let ds: Vec<f64> = ok_reports.iter().map(|r| r.d_or_inf()).collect();
            let agg = aggregate(&ds);
            d_rows.push((kind, tau, agg.mean, agg.p10, agg.p90));
        }
    }
    let mut out = String::from("loss,tau,d_mean,d_p10,d_p90\n");
    for (kind, tau, mean, p10, p90) in d_rows {
        out.push_str(&format!(
            "{},{tau},{},{},{}\n",
            kind.name(),
            fmt_f64(mean),
            fmt_f64(p10),
            fmt_f64(p90)
        ));
    }
    ensure_parent(&layout.d_summary())?;
    std::fs::write(layout.d_summary(), out)?;
    Ok(())
}

#[derive(Debug)]
pub struct MetricsGrids {
    pub omega: Vec<f64>,
    pub eps: Vec<f64>,
}

/// Grids the evaluate stage would use, for external consumers of the curve
/// files.
pub fn grids_for(section: &MetricsSection, y_test: &[f64], g: &GpLogDensity) -> MetricsGrids {
    MetricsGrids {
        omega: log_spaced(section.omega_min, section.omega_max, section.omega_points),
        eps: default_eps_grid(y_test, g, section.eps_points),
    }
}
