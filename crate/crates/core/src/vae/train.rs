use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use super::checkpoint;
use super::config::{DatasetSpec, TrainConfig};
use super::data::{default_data_dir, load_mnist, synth_dataset};
use super::model::{loss_and_grads, VaeModel, VaeSnapshotProbe, PIXELS};
use super::optim::{adam_step, temperature_schedule, AdamState, TemperatureSchedule};
use super::VaeError;
use crate::autodiff::AutodiffError;
use crate::estimators::{EstimatorConfig, EstimatorError};
use crate::samplers::RngStream;
use crate::tensor::{Tensor, TensorError};
use crate::variance::gradient_variance;

/// Epoch means exceeding this multiple of the initial loss count toward
/// divergence.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
pub const DIVERGENCE_EPOCHS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_neg_elbo: f64,
    pub kl_term: f64,
    pub reconstruction_term: f64,
    pub mean_surrogate_entropy: f64,
    pub gradient_variance: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum RunStatus {
    Completed,
    Diverged { epoch: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub seed: u64,
    /// Negative ELBO of the first batch before any update.
    pub initial_loss: f64,
    pub metrics: Vec<EpochMetrics>,
    pub status: RunStatus,
    pub model: VaeModel,
}

impl TrainRun {
    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    pub fn final_neg_elbo(&self) -> Option<f64> {
        self.metrics.last().map(|m| m.mean_neg_elbo)
    }
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub neg_elbo: f64,
    pub kl: f64,
    pub recon: f64,
    pub entropy: f64,
    pub grad_var: Option<f64>,
    pub seconds: f64,
    pub seed: u64,
    pub estimator: String,
    pub tau: f64,
    pub gap: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub schedule: String,
}

pub fn metrics_rows(cfg: &TrainConfig, run: &TrainRun) -> Vec<MetricsRow> {
    let e = &cfg.estimator;
    run.metrics
        .iter()
        .map(|m| MetricsRow {
            epoch: m.epoch,
            neg_elbo: m.mean_neg_elbo,
            kl: m.kl_term,
            recon: m.reconstruction_term,
            entropy: m.mean_surrogate_entropy,
            grad_var: m.gradient_variance,
            seconds: m.wall_seconds,
            seed: run.seed,
            estimator: e.kind.as_str().into(),
            tau: cfg.schedule.test_temperature(),
            gap: e.gap.to_string(),
            k: e.mc_samples,
            schedule: cfg.schedule.label(),
        })
        .collect()
}

pub fn write_metrics_csv(path: &Path, cfg: &TrainConfig, runs: &[TrainRun]) -> Result<(), VaeError> {
    let mut w = csv::Writer::from_path(path)?;
    for run in runs {
        for row in metrics_rows(cfg, run) {
            w.serialize(row)?;
        }
    }
    w.flush().map_err(|source| VaeError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(())
}

/// Loads (or generates) the configured dataset, `n x 784` in `[0, 1]`.
pub fn load_dataset(cfg: &TrainConfig) -> Result<Tensor, VaeError> {
    let x = match &cfg.dataset {
        DatasetSpec::Synthetic { n, patterns, seed } => synth_dataset(*n, *patterns, &mut RngStream::new(*seed)),
        DatasetSpec::Mnist { dir, limit } => {
            let dir = dir
                .clone()
                .or_else(default_data_dir)
                .ok_or_else(|| VaeError::Config("no data.path and GST_DATA_DIR is unset".into()))?;
            load_mnist(&dir, *limit)?.0
        }
    };
    Ok(if cfg.binarize {
        x.map(|v| if v > 0.5 { 1.0 } else { 0.0 })
    } else {
        x
    })
}

fn gather(data: &Tensor, idx: &[usize]) -> Tensor {
    let mut out = Vec::with_capacity(idx.len() * PIXELS);
    for &i in idx {
        out.extend_from_slice(data.row(i));
    }
    Tensor::new(&[idx.len(), PIXELS], out).expect("sizes agree")
}

fn is_numeric_blowup(e: &VaeError) -> bool {
    matches!(
        e,
        VaeError::NonFinite { .. }
            | VaeError::Estimator(EstimatorError::Autodiff(AutodiffError::Tensor(
                TensorError::NonFinite { .. }
            )))
            | VaeError::Autodiff(AutodiffError::Tensor(TensorError::NonFinite { .. }))
    )
}

/// Estimator config used at a given optimisation step.
pub fn step_estimator(cfg: &TrainConfig, step: usize) -> EstimatorConfig {
    cfg.estimator.with_tau(temperature_schedule(step, &cfg.schedule))
}

/// Trains one seed. Divergence (and numeric blow-up) is returned as a
/// [`RunStatus::Diverged`] outcome; other failures are errors.
pub fn train(cfg: &TrainConfig, data: &Tensor, seed: u64, out: Option<&Path>) -> Result<TrainRun, VaeError> {
    cfg.validate()?;
    let n = data.shape()[0];
    if n == 0 {
        return Err(VaeError::Config("empty dataset".into()));
    }
    let root = RngStream::new(seed);
    let mut model = VaeModel::new(cfg.hidden_enc, cfg.hidden_dec, &mut root.fork(0));
    let mut adam = AdamState::new(&model.params);
    let mut order: Vec<usize> = (0..n).collect();
    let noise_root = root.fork(2);

    let mut run = TrainRun {
        seed,
        initial_loss: f64::NAN,
        metrics: vec![],
        status: RunStatus::Completed,
        model: model.clone(),
    };
    let mut over = 0;
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut root.fork(1).fork(epoch as u64));
        let (mut sum_loss, mut sum_kl, mut sum_recon, mut sum_ent) = (0.0, 0.0, 0.0, 0.0);
        for idx in order.chunks(cfg.batch_size) {
            let batch = gather(data, idx);
            let est = step_estimator(cfg, step);
            let mut rng = noise_root.fork(step as u64);
            let (parts, grads) = match loss_and_grads(&model, &batch, &est, &mut rng) {
                Ok(r) => r,
                Err(e) if is_numeric_blowup(&e) => {
                    run.status = RunStatus::Diverged {
                        epoch,
                        reason: format!("step {step}: {e}"),
                    };
                    run.model = model;
                    return Ok(run);
                }
                Err(e) => return Err(e),
            };
            if step == 0 {
                run.initial_loss = parts.neg_elbo;
            }
            let w = idx.len() as f64;
            sum_loss += parts.neg_elbo * w;
            sum_kl += parts.kl * w;
            sum_recon += parts.recon * w;
            sum_ent += parts.entropy * w;
            adam_step(&mut model.params, &grads, &mut adam, cfg.learning_rate);
            step += 1;
        }
        let kl = sum_kl / n as f64;
        let recon = sum_recon / n as f64;
        let mean = sum_loss / n as f64;
        let grad_var = if cfg.variance_resamples > 0 {
            let probe = VaeSnapshotProbe::new(
                model.clone(),
                gather(data, &(0..cfg.variance_batch.min(n)).collect::<Vec<_>>()),
            )?;
            let est = cfg.estimator.with_tau(cfg.schedule.test_temperature());
            let mut vrng = root.fork(3).fork(epoch as u64);
            Some(gradient_variance(&probe, &est, cfg.variance_resamples, &mut vrng)?.total_variance)
        } else {
            None
        };
        run.metrics.push(EpochMetrics {
            epoch,
            mean_neg_elbo: mean,
            kl_term: kl,
            reconstruction_term: recon,
            mean_surrogate_entropy: sum_ent / n as f64,
            gradient_variance: grad_var,
            wall_seconds: started.elapsed().as_secs_f64(),
        });
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
                checkpoint::save(&checkpoint_path(dir, seed, Some(epoch)), &model.params)?;
            }
        }
        if mean > DIVERGENCE_FACTOR * run.initial_loss || !mean.is_finite() {
            over += 1;
        } else {
            over = 0;
        }
        if over >= DIVERGENCE_EPOCHS {
            run.status = RunStatus::Diverged {
                epoch,
                reason: format!(
                    "mean neg-ELBO {mean:.3} above {DIVERGENCE_FACTOR}x initial {:.3} for {DIVERGENCE_EPOCHS} epochs",
                    run.initial_loss
                ),
            };
            break;
        }
    }
    if let Some(dir) = out {
        checkpoint::save(&checkpoint_path(dir, seed, None), &model.params)?;
    }
    run.model = model;
    Ok(run)
}

pub fn checkpoint_path(dir: &Path, seed: u64, epoch: Option<usize>) -> PathBuf {
    match epoch {
        Some(e) => dir.join(format!("checkpoint_seed{seed}_epoch{e}.bin")),
        None => dir.join(format!("checkpoint_seed{seed}_final.bin")),
    }
}

/// Trains every configured seed on one shared dataset, writing the metrics
/// CSV and checkpoints under `out` when given.
pub fn train_all(cfg: &TrainConfig, data: &Tensor, out: Option<&Path>) -> Result<Vec<TrainRun>, VaeError> {
    let runs = cfg
        .seeds
        .iter()
        .map(|&s| train(cfg, data, s, out))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(dir) = out {
        write_metrics_csv(&dir.join("metrics.csv"), cfg, &runs)?;
    }
    Ok(runs)
}

/// Mean and sample standard deviation of the final-epoch neg-ELBO across
/// runs that completed.
pub fn final_summary(runs: &[TrainRun]) -> (f64, f64) {
    let finals: crate::stats::Moments = runs
        .iter()
        .filter(|r| !r.diverged())
        .filter_map(TrainRun::final_neg_elbo)
        .collect();
    (finals.mean, finals.variance().sqrt())
}

/// Schedule-aware label, e.g. `GST-1.0` or `GST-1.0 (mixed)`.
pub fn run_label(cfg: &TrainConfig) -> String {
    match cfg.schedule {
        TemperatureSchedule::Constant(_) => cfg.estimator.label(),
        TemperatureSchedule::Mixed { .. } => format!("{} ({})", cfg.estimator.label(), cfg.schedule.label()),
    }
}

/// Summary of one (estimator, temperature) cell of a training grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridRow {
    pub label: String,
    pub tau: f64,
    pub mean_neg_elbo: f64,
    pub std_neg_elbo: f64,
    pub mean_initial_loss: f64,
    pub mean_first_epoch: f64,
    pub diverged: usize,
    pub seeds: usize,
    pub finals: Vec<f64>,
}

/// Trains every `label` (see [`EstimatorConfig::from_label`]) at every
/// temperature over the configured seeds. With `out`, each cell's metrics go
/// to `metrics_<label>_tau<tau>.csv` and the summary to `grid.csv`.
pub fn run_grid(
    cfg: &TrainConfig,
    data: &Tensor,
    labels: &[String],
    taus: &[f64],
    out: Option<&Path>,
) -> Result<Vec<GridRow>, VaeError> {
    let mut rows = Vec::new();
    for &tau in taus {
        for label in labels {
            let est = EstimatorConfig::from_label(label, tau)?;
            let cell = cfg.with_estimator(EstimatorConfig {
                mode: cfg.estimator.mode,
                ..est
            });
            let runs = cell
                .seeds
                .iter()
                .map(|&s| train(&cell, data, s, None))
                .collect::<Result<Vec<_>, _>>()?;
            if let Some(dir) = out {
                write_metrics_csv(&dir.join(format!("metrics_{}_tau{tau}.csv", est.label())), &cell, &runs)?;
            }
            let (mean, std) = final_summary(&runs);
            let avg = |f: &dyn Fn(&TrainRun) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
            rows.push(GridRow {
                label: est.label(),
                tau,
                mean_neg_elbo: mean,
                std_neg_elbo: std,
                mean_initial_loss: avg(&|r| r.initial_loss),
                mean_first_epoch: avg(&|r| r.metrics.first().map_or(f64::NAN, |m| m.mean_neg_elbo)),
                diverged: runs.iter().filter(|r| r.diverged()).count(),
                seeds: runs.len(),
                finals: runs.iter().filter_map(TrainRun::final_neg_elbo).collect(),
            });
        }
    }
    if let Some(dir) = out {
        let mut w = csv::Writer::from_path(dir.join("grid.csv"))?;
        w.write_record(["estimator", "tau", "mean_neg_elbo", "std_neg_elbo", "diverged", "seeds"])?;
        for r in &rows {
            w.write_record([
                r.label.clone(),
                r.tau.to_string(),
                r.mean_neg_elbo.to_string(),
                r.std_neg_elbo.to_string(),
                r.diverged.to_string(),
                r.seeds.to_string(),
            ])?;
        }
        w.flush().map_err(|source| VaeError::Io {
            path: dir.join("grid.csv"),
            source,
        })?;
    }
    Ok(rows)
}

/// Trains `cfg` for its configured epochs on the first seed and freezes the
/// result together with the first `cfg.variance_batch` examples.
pub fn snapshot_probe(cfg: &TrainConfig, data: &Tensor) -> Result<VaeSnapshotProbe, VaeError> {
    let run = train(cfg, data, cfg.seeds[0], None)?;
    let n = cfg.variance_batch.min(data.shape()[0]);
    VaeSnapshotProbe::new(run.model, gather(data, &(0..n).collect::<Vec<_>>()))
}
