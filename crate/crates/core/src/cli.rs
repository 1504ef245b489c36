//! The batch commands behind the `vlgp` binary.
//!
//! Each command reads one JSON config and writes into an output directory.
//! Relative paths inside a config are taken relative to the config file.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::evaluate::{
    aligned_mse, align_affine, ll_model, ll_null, ll_saturated, lono_predict, noise_corr_from_model, noise_corr_power,
    noise_correlation, orthogonalize_latents, pll, prediction_r2, pseudo_r2, rank_correlation_trials, stack_rows,
    subspace_angle, PredictionSet,
};
use crate::inference::{fit_with_observer, infer_posterior, FitConfig};
use crate::io::{
    ensure_dir, format_real, names, read_json, version, write_json, write_matrix_csv, Dataset, FitArtifact,
    PosteriorFile, ProgressPoint, METRICS_FORMAT,
};
use crate::model::SpikeData;
use crate::simulate::{simulate, SimSpec};

/// Arguments shared by every command.
#[derive(Debug, Clone)]
pub struct CommandArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn spike_data(data: &Dataset, history_order: usize) -> Result<SpikeData> {
    SpikeData::new(data.counts.clone(), data.bin_width, history_order)
}

fn check_trials(indices: &[usize], n: usize, what: &str) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::validation(format!("{what} is empty")));
    }
    let mut seen = vec![false; n];
    for &k in indices {
        if k >= n {
            return Err(Error::validation(format!("{what}: trial {k} is out of range for {n} trials")));
        }
        if std::mem::replace(&mut seen[k], true) {
            return Err(Error::validation(format!("{what}: trial {k} is listed twice")));
        }
    }
    Ok(())
}

/// Simulates a data set. The config is a simulation spec.
pub fn cmd_simulate(args: &CommandArgs) -> Result<Dataset> {
    let mut spec: SimSpec = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let sim = simulate(&spec)?;
    if sim.clamped > 0 {
        warn!("{} bins hit the rate cap during simulation", sim.clamped);
    }
    info!(
        "simulated {} trials of {} bins for {} neurons",
        sim.counts.len(),
        spec.trial_len,
        spec.n_neurons
    );
    let data = Dataset {
        bin_width: spec.bin_width,
        seed: Some(spec.seed),
        counts: sim.counts,
        latents: Some(sim.latents),
        true_alpha: Some(sim.alpha),
        true_beta: Some(sim.beta),
        generator: Some(spec),
    };
    data.write(&args.out)?;
    Ok(data)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitCommandConfig {
    pub dataset: PathBuf,
    /// Trials to fit on; all of them when absent.
    #[serde(default)]
    pub trials: Option<Vec<usize>>,
    #[serde(default)]
    pub fit: FitConfig,
}

/// Fits the model and writes a fit artifact.
pub fn cmd_fit(args: &CommandArgs) -> Result<FitArtifact> {
    let mut cfg: FitCommandConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.fit.seed = seed;
    }
    cfg.fit.validate()?;
    let dataset = Dataset::read(&resolve(&base_dir(&args.config), &cfg.dataset))?;
    let train_trials = cfg.trials.clone().unwrap_or_else(|| (0..dataset.n_trials()).collect());
    check_trials(&train_trials, dataset.n_trials(), "trials")?;
    let train = dataset.select(&train_trials)?;
    let data = spike_data(&train, cfg.fit.history_order)?;

    let mut progress = vec![];
    let result = fit_with_observer(&data, &cfg.fit, |view| {
        let rank_correlation = train.latents.as_ref().and_then(|truth| {
            let mus: Vec<DMatrix<f64>> = view.posterior.trials.iter().map(|p| p.mu.clone()).collect();
            rank_correlation_trials(truth, &mus).ok().map(|r| r.mean_abs)
        });
        progress.push(ProgressPoint {
            iteration: view.iteration,
            elapsed: view.elapsed,
            elbo: view.elbo,
            rank_correlation,
        });
    })?;
    if !result.report.converged {
        warn!("stopped after {} iterations without converging", result.report.iterations);
    }
    let artifact = FitArtifact {
        version: version().to_owned(),
        config: cfg.fit,
        train_trials,
        kernels: result.priors.iter().map(|p| *p.spec()).collect(),
        params: result.params,
        posterior: result.posterior,
        report: result.report,
        progress,
    };
    artifact.write(&args.out)?;
    Ok(artifact)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferCommandConfig {
    pub dataset: PathBuf,
    pub artifact: PathBuf,
    /// Trials to infer; all of them when absent.
    #[serde(default)]
    pub trials: Option<Vec<usize>>,
    /// Neurons left out of the likelihood.
    #[serde(default)]
    pub exclude_neurons: Vec<usize>,
}

/// Infers the posterior for a data set with parameters held fixed.
pub fn cmd_infer(args: &CommandArgs) -> Result<PosteriorFile> {
    let cfg: InferCommandConfig = read_json(&args.config)?;
    let base = base_dir(&args.config);
    let dataset = Dataset::read(&resolve(&base, &cfg.dataset))?;
    let artifact = FitArtifact::read(&resolve(&base, &cfg.artifact))?;
    let trials = cfg.trials.clone().unwrap_or_else(|| (0..dataset.n_trials()).collect());
    check_trials(&trials, dataset.n_trials(), "trials")?;
    let n = dataset.n_neurons();
    let mut mask = vec![true; n];
    for &k in &cfg.exclude_neurons {
        if k >= n {
            return Err(Error::validation(format!("exclude_neurons: neuron {k} is out of range for {n} neurons")));
        }
        mask[k] = false;
    }
    let data = spike_data(&dataset.select(&trials)?, artifact.config.history_order)?;
    let priors = artifact.priors(&data.trial_lengths())?;
    let posterior = infer_posterior(&data, &artifact.params, &priors, &artifact.config, Some(&mask))?;
    let file = PosteriorFile {
        version: version().to_owned(),
        trials,
        excluded_neurons: cfg.exclude_neurons,
        posterior,
    };
    file.write(&args.out)?;
    Ok(file)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LonoCommandConfig {
    pub dataset: PathBuf,
    pub artifact: PathBuf,
    /// Held-out trials; every trial not used for fitting when absent.
    #[serde(default)]
    pub test_trials: Option<Vec<usize>>,
}

fn test_split(dataset: &Dataset, artifact: &FitArtifact, requested: Option<&[usize]>) -> Result<Vec<usize>> {
    let test: Vec<usize> = match requested {
        Some(t) => t.to_vec(),
        None => (0..dataset.n_trials()).filter(|k| !artifact.train_trials.contains(k)).collect(),
    };
    if test.is_empty() {
        return Err(Error::validation(
            "no held-out trials: every trial was used for fitting, so leave-one-neuron-out has nothing to test on",
        ));
    }
    check_trials(&test, dataset.n_trials(), "test_trials")?;
    if let Some(k) = test.iter().find(|k| artifact.train_trials.contains(k)) {
        return Err(Error::validation(format!(
            "test trial {k} was also used for fitting; test and training trials must be disjoint"
        )));
    }
    Ok(test)
}

fn run_lono(dataset: &Dataset, artifact: &FitArtifact, test: &[usize]) -> Result<PredictionSet> {
    if dataset.n_neurons() != artifact.params.n_neurons() {
        return Err(Error::validation(format!(
            "dataset has {} neurons, the fit has {}",
            dataset.n_neurons(),
            artifact.params.n_neurons()
        )));
    }
    let data = spike_data(&dataset.select(test)?, artifact.config.history_order)?;
    let priors = artifact.priors(&data.trial_lengths())?;
    lono_predict(&data, &artifact.params, &priors, &artifact.config)
}

/// Result of a leave-one-neuron-out run.
#[derive(Debug, Clone)]
pub struct LonoOutcome {
    pub predictions: PredictionSet,
    pub pll: f64,
    pub r2: f64,
}

/// Leave-one-neuron-out prediction on held-out trials.
pub fn cmd_lono(args: &CommandArgs) -> Result<LonoOutcome> {
    let cfg: LonoCommandConfig = read_json(&args.config)?;
    let base = base_dir(&args.config);
    let dataset = Dataset::read(&resolve(&base, &cfg.dataset))?;
    let artifact = FitArtifact::read(&resolve(&base, &cfg.artifact))?;
    let test = test_split(&dataset, &artifact, cfg.test_trials.as_deref())?;
    let predictions = run_lono(&dataset, &artifact, &test)?;
    let pll_bits = pll(&predictions)?;
    let r2 = prediction_r2(&predictions)?;
    ensure_dir(&args.out)?;
    let n = dataset.n_neurons();
    for (i, &k) in test.iter().enumerate() {
        let len = dataset.counts[k].nrows();
        let mut rates = DMatrix::zeros(len, n);
        for p in predictions.predictions.iter().filter(|p| p.trial == i) {
            rates.set_column(p.neuron, &p.rate);
        }
        write_matrix_csv(&args.out.join(format!("trial_{k:03}_lono_rates.csv")), &names("n", n), &rates)?;
    }
    let report = json!({
        "format": METRICS_FORMAT,
        "version": version(),
        "config": cfg,
        "test_trials": test,
        "pll_bits_per_spike": pll_bits,
        "predictive_r2": r2,
        "baseline_rate": predictions.baseline,
        "spikes": predictions.total_spikes(),
    });
    write_json(&args.out.join("lono.json"), &report)?;
    info!("LONO PLL {pll_bits:.4} bits/spike");
    Ok(LonoOutcome {
        predictions,
        pll: pll_bits,
        r2,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    RankCorrelation,
    LatentMse,
    SubspaceAngle,
    PseudoR2,
    NoiseCorrPower,
    Pll,
    PredictiveR2,
}

impl MetricName {
    const ALL: [MetricName; 7] = [
        MetricName::RankCorrelation,
        MetricName::LatentMse,
        MetricName::SubspaceAngle,
        MetricName::PseudoR2,
        MetricName::NoiseCorrPower,
        MetricName::Pll,
        MetricName::PredictiveR2,
    ];

    fn key(self) -> &'static str {
        match self {
            MetricName::RankCorrelation => "rank_correlation",
            MetricName::LatentMse => "latent_mse",
            MetricName::SubspaceAngle => "subspace_angle",
            MetricName::PseudoR2 => "pseudo_r2",
            MetricName::NoiseCorrPower => "noise_corr_power",
            MetricName::Pll => "pll_bits_per_spike",
            MetricName::PredictiveR2 => "predictive_r2",
        }
    }
}

fn default_bin_group() -> usize {
    50
}

fn default_n_sims() -> usize {
    50
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateCommandConfig {
    pub dataset: PathBuf,
    pub artifact: PathBuf,
    /// Metrics to compute. When absent every metric is attempted and those
    /// lacking inputs are marked unavailable; when listed, missing inputs are
    /// an error.
    #[serde(default)]
    pub metrics: Option<Vec<MetricName>>,
    /// Held-out trials for the prediction metrics; every trial not used for
    /// fitting when absent.
    #[serde(default)]
    pub test_trials: Option<Vec<usize>>,
    /// Bins summed per noise-correlation bin.
    #[serde(default = "default_bin_group")]
    pub bin_group: usize,
    /// Simulated repeats per trial for model noise correlations.
    #[serde(default = "default_n_sims")]
    pub n_sims: usize,
    #[serde(default)]
    pub seed: u64,
}

/// A metric that could not be computed for want of inputs.
struct Unavailable(String);

type MetricResult = std::result::Result<f64, Unavailable>;

fn unavailable(reason: impl Into<String>) -> MetricResult {
    Err(Unavailable(reason.into()))
}

/// Metrics JSON plus plot-ready CSV files.
pub fn cmd_evaluate(args: &CommandArgs) -> Result<Value> {
    let mut cfg: EvaluateCommandConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let base = base_dir(&args.config);
    let dataset = Dataset::read(&resolve(&base, &cfg.dataset))?;
    let artifact = FitArtifact::read(&resolve(&base, &cfg.artifact))?;
    if dataset.n_neurons() != artifact.params.n_neurons() {
        return Err(Error::validation(format!(
            "dataset has {} neurons, the fit has {}",
            dataset.n_neurons(),
            artifact.params.n_neurons()
        )));
    }
    check_trials(&artifact.train_trials, dataset.n_trials(), "artifact training trials")?;
    let train = dataset.select(&artifact.train_trials)?;
    for (k, (c, p)) in train.counts.iter().zip(&artifact.posterior.trials).enumerate() {
        if c.nrows() != p.len() {
            return Err(Error::validation(format!(
                "training trial {k} has {} bins, its posterior {}",
                c.nrows(),
                p.len()
            )));
        }
    }
    let explicit = cfg.metrics.is_some();
    let wanted: Vec<MetricName> = cfg.metrics.clone().unwrap_or_else(|| MetricName::ALL.to_vec());
    let mus: Vec<DMatrix<f64>> = artifact.posterior.trials.iter().map(|p| p.mu.clone()).collect();
    let data = spike_data(&train, artifact.config.history_order)?;

    let held_out = match &cfg.test_trials {
        Some(t) => Some(test_split(&dataset, &artifact, Some(t))?),
        None => test_split(&dataset, &artifact, None).ok(),
    };
    let mut lono: Option<PredictionSet> = None;
    let mut metrics = serde_json::Map::new();
    for &m in &wanted {
        let value: MetricResult = match m {
            MetricName::RankCorrelation => match &train.latents {
                Some(truth) => Ok(rank_correlation_trials(truth, &mus)?.mean_abs),
                None => unavailable("dataset has no true latents"),
            },
            MetricName::LatentMse => match &train.latents {
                Some(truth) => Ok(aligned_mse(&stack_rows(truth)?, &stack_rows(&mus)?)?),
                None => unavailable("dataset has no true latents"),
            },
            MetricName::SubspaceAngle => match &train.true_alpha {
                Some(a) => Ok(subspace_angle(a, &artifact.params.alpha)?),
                None => unavailable("dataset has no true loadings"),
            },
            MetricName::PseudoR2 => {
                if equal_repeats(&train.counts) {
                    let model = ll_model(&data, &artifact.params, &artifact.posterior, artifact.config.exp_cap);
                    Ok(pseudo_r2(model, ll_null(&train.counts)?, ll_saturated(&train.counts)?)?)
                } else {
                    unavailable("needs at least two training trials of equal length")
                }
            }
            MetricName::NoiseCorrPower => {
                let long_enough = train.counts[0].nrows() >= cfg.bin_group;
                if equal_repeats(&train.counts) && long_enough {
                    let truth = noise_correlation(&train.counts, cfg.bin_group)?;
                    let model = noise_corr_from_model(
                        &artifact.params,
                        &artifact.posterior,
                        &data,
                        cfg.n_sims,
                        cfg.bin_group,
                        cfg.seed,
                        artifact.config.exp_cap,
                    )?;
                    match noise_corr_power(&model, &truth) {
                        Ok(v) => Ok(v),
                        Err(Error::Validation(msg)) => unavailable(msg),
                        Err(e) => return Err(e),
                    }
                } else {
                    unavailable("needs at least two equal-length training trials spanning one rebinned bin")
                }
            }
            MetricName::Pll | MetricName::PredictiveR2 => match held_out.as_deref() {
                Some(test) => {
                    if lono.is_none() {
                        lono = Some(run_lono(&dataset, &artifact, test)?);
                    }
                    let pred = lono.as_ref().expect("set above");
                    if m == MetricName::Pll {
                        Ok(pll(pred)?)
                    } else {
                        Ok(prediction_r2(pred)?)
                    }
                }
                None => unavailable("every trial was used for fitting and no test_trials were configured"),
            },
        };
        let entry = match value {
            Ok(v) => json!(v),
            Err(Unavailable(reason)) if !explicit => json!({ "unavailable": reason }),
            Err(Unavailable(reason)) => {
                return Err(Error::validation(format!("metric {} was requested but {reason}", m.key())))
            }
        };
        metrics.insert(m.key().to_owned(), entry);
    }

    ensure_dir(&args.out)?;
    let plots = write_plot_data(&args.out, &artifact, &mus, train.latents.as_deref())?;
    let report = json!({
        "format": METRICS_FORMAT,
        "version": version(),
        "config": cfg,
        "fit_config": artifact.config,
        "final_elbo": artifact.report.elbo_trace.last(),
        "converged": artifact.report.converged,
        "iterations": artifact.report.iterations,
        "metrics": metrics,
        "plots": plots,
    });
    write_json(&args.out.join("metrics.json"), &report)?;
    Ok(report)
}

fn equal_repeats(counts: &[DMatrix<f64>]) -> bool {
    counts.len() >= 2 && counts.iter().all(|c| c.shape() == counts[0].shape())
}

fn write_rows(path: &Path, header: &str, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut text = String::from(header);
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the plot CSVs and returns an index of them.
fn write_plot_data(
    out: &Path,
    artifact: &FitArtifact,
    mus: &[DMatrix<f64>],
    truth: Option<&[DMatrix<f64>]>,
) -> Result<Value> {
    let report = &artifact.report;
    let mut elapsed = vec![0.0];
    for w in &report.wall_time {
        elapsed.push(elapsed.last().copied().unwrap_or(0.0) + w);
    }
    write_rows(
        &out.join("elbo_trace.csv"),
        "iteration,elapsed,elbo",
        report
            .elbo_trace
            .iter()
            .enumerate()
            .map(|(i, e)| vec![i.to_string(), format_real(elapsed.get(i).copied().unwrap_or(f64::NAN)), format_real(*e)]),
    )?;

    let tracked: Vec<&ProgressPoint> = artifact.progress.iter().filter(|p| p.rank_correlation.is_some()).collect();
    let rank_plot = if tracked.is_empty() {
        json!({ "unavailable": "no rank correlation was recorded during fitting" })
    } else {
        write_rows(
            &out.join("rank_corr_vs_walltime.csv"),
            "iteration,elapsed,rank_correlation",
            tracked.iter().map(|p| {
                vec![
                    p.iteration.to_string(),
                    format_real(p.elapsed),
                    format_real(p.rank_correlation.unwrap_or(f64::NAN)),
                ]
            }),
        )?;
        json!("rank_corr_vs_walltime.csv")
    };

    let l = artifact.latent_dim();
    let aligned = match truth {
        Some(xs) => {
            let (all, _) = align_affine(&stack_rows(xs)?, &stack_rows(mus)?)?;
            let mut parts = vec![];
            let mut at = 0;
            for x in xs {
                parts.push(all.rows(at, x.nrows()).into_owned());
                at += x.nrows();
            }
            Some(parts)
        }
        None => None,
    };
    let ortho = orthogonalize_latents(mus)?;
    let n_pcs = l.min(3);
    let mut latent_files = vec![];
    for (i, &k) in artifact.train_trials.iter().enumerate() {
        let mut header = names("mu", l);
        let mut cols = vec![mus[i].clone()];
        if let (Some(xs), Some(al)) = (truth, &aligned) {
            header.extend(names("true", xs[i].ncols()));
            header.extend(names("aligned", al[i].ncols()));
            cols.push(xs[i].clone());
            cols.push(al[i].clone());
        }
        let width: usize = cols.iter().map(|c| c.ncols()).sum();
        let mut m = DMatrix::zeros(mus[i].nrows(), width);
        let mut at = 0;
        for c in &cols {
            m.columns_mut(at, c.ncols()).copy_from(c);
            at += c.ncols();
        }
        let file = format!("trial_{k:03}_latents.csv");
        write_matrix_csv(&out.join(&file), &header, &m)?;
        let pcs_file = format!("trial_{k:03}_pcs.csv");
        write_matrix_csv(
            &out.join(&pcs_file),
            &names("pc", n_pcs),
            &ortho.latents[i].columns(0, n_pcs).into_owned(),
        )?;
        latent_files.push(json!({ "trial": k, "latents": file, "pcs": pcs_file }));
    }
    Ok(json!({
        "elbo_trace": "elbo_trace.csv",
        "rank_corr_vs_walltime": rank_plot,
        "trials": latent_files,
    }))
}
