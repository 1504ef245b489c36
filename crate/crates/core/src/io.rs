//! On-disk formats: datasets, fit artifacts and posterior files.
//!
//! Every format is a JSON index carrying a `format` tag plus headered CSV
//! payloads (rows are time bins). Reals are written with 17 significant
//! digits so that a write, read, write cycle reproduces the same bytes.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp_prior::{KernelSpec, LatentPrior};
use crate::inference::{FitConfig, FitReport};
use crate::model::{LatentPosterior, ModelParams, TrialPosterior};
use crate::simulate::SimSpec;

pub const DATASET_FORMAT: &str = "vlgp-dataset/1";
pub const FIT_FORMAT: &str = "vlgp-fit/1";
pub const POSTERIOR_FORMAT: &str = "vlgp-posterior/1";
pub const METRICS_FORMAT: &str = "vlgp-metrics/1";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FIT_FILE: &str = "fit.json";
pub const POSTERIOR_FILE: &str = "posterior.json";

/// Build version, from `git describe` when available.
pub fn version() -> &'static str {
    env!("VLGP_VERSION")
}

pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes a matrix as CSV with the given column names. Integral matrices
/// (counts) are written without a fractional part.
pub fn write_matrix_csv(path: &Path, header: &[String], m: &DMatrix<f64>) -> Result<()> {
    if header.len() != m.ncols() {
        return Err(Error::validation(format!(
            "{}: {} column names for {} columns",
            path.display(),
            header.len(),
            m.ncols()
        )));
    }
    let integral = m.iter().all(|x| x.fract() == 0.0 && x.abs() < 1e15);
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for i in 0..m.nrows() {
        let row = m.row(i).iter().map(|&x| if integral { format!("{}", x as i64) } else { format_real(x) }).collect::<Vec<_>>();
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a headered numeric CSV into a matrix.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| csv_error(path, e))?.iter().map(str::to_owned).collect();
    let mut values = vec![];
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        if rec.len() != header.len() {
            return Err(Error::Format(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                i + 1,
                rec.len(),
                header.len()
            )));
        }
        for field in rec.iter() {
            let x: f64 = field.trim().parse().map_err(|_| {
                Error::Format(format!("{}: row {}: '{field}' is not a number", path.display(), i + 1))
            })?;
            values.push(x);
        }
        rows += 1;
    }
    Ok((header.clone(), DMatrix::from_row_slice(rows, header.len(), &values)))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format(format!("{}: {other:?}", path.display())),
        }
    } else {
        Error::Format(format!("{}: {e}", path.display()))
    }
}

/// Column names `prefix0, prefix1, ...`.
pub fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn beta_names(p: usize) -> Vec<String> {
    std::iter::once("bias".to_owned()).chain((1..=p).rev().map(|k| format!("lag{k}"))).collect()
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a JSON index after checking its `format` tag.
fn read_tagged<T: DeserializeOwned>(path: &Path, expected: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(tag) if tag == expected => {}
        Some(tag) => {
            return Err(Error::Format(format!(
                "{}: unsupported format '{tag}', expected '{expected}'",
                path.display()
            )))
        }
        None => return Err(Error::Format(format!("{}: missing format tag", path.display()))),
    }
    serde_json::from_value(value).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Relative entries in an index are relative to the index's directory.
fn resolve(base: &Path, entry: &str) -> PathBuf {
    base.join(entry)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialEntry {
    pub counts: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latents: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthEntry {
    pub alpha: String,
    pub beta: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub n_neurons: usize,
    /// Dimension of the true latents, when known.
    #[serde(default)]
    pub latent_dim: Option<usize>,
    /// History order of the generating model, when known.
    #[serde(default)]
    pub history_order: Option<usize>,
    pub bin_width: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    pub trials: Vec<TrialEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SimSpec>,
}

/// Counts plus whatever ground truth came with them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub bin_width: f64,
    pub seed: Option<u64>,
    pub counts: Vec<DMatrix<f64>>,
    pub latents: Option<Vec<DMatrix<f64>>>,
    pub true_alpha: Option<DMatrix<f64>>,
    pub true_beta: Option<DMatrix<f64>>,
    pub generator: Option<SimSpec>,
}

impl Dataset {
    pub fn n_neurons(&self) -> usize {
        self.counts.first().map_or(0, |c| c.ncols())
    }

    pub fn n_trials(&self) -> usize {
        self.counts.len()
    }

    fn validate(&self) -> Result<()> {
        let n = self.n_neurons();
        if self.counts.is_empty() || n == 0 {
            return Err(Error::validation("dataset has no trials or no neurons"));
        }
        for (k, c) in self.counts.iter().enumerate() {
            if c.ncols() != n {
                return Err(Error::validation(format!("trial {k} has {} neurons, expected {n}", c.ncols())));
            }
            if c.iter().any(|y| !(*y >= 0.0) || y.fract() != 0.0) {
                return Err(Error::validation(format!("trial {k} has counts that are not non-negative integers")));
            }
        }
        if let Some(latents) = &self.latents {
            if latents.len() != self.counts.len() {
                return Err(Error::validation("latents must be given for every trial or none"));
            }
            let dim = latents[0].ncols();
            for (k, (x, c)) in latents.iter().zip(&self.counts).enumerate() {
                if x.nrows() != c.nrows() || x.ncols() != dim {
                    return Err(Error::validation(format!(
                        "trial {k}: latents are {:?}, counts have {} bins and latents {dim} columns",
                        x.shape(),
                        c.nrows()
                    )));
                }
            }
        }
        if let (Some(a), Some(b)) = (&self.true_alpha, &self.true_beta) {
            if a.nrows() != n || b.nrows() != n || b.ncols() == 0 {
                return Err(Error::validation("true parameters do not match the number of neurons"));
            }
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        ensure_dir(dir)?;
        let n = self.n_neurons();
        let mut trials = vec![];
        for (k, c) in self.counts.iter().enumerate() {
            let counts = format!("trial_{k:03}_counts.csv");
            write_matrix_csv(&dir.join(&counts), &names("n", n), c)?;
            let latents = match &self.latents {
                Some(xs) => {
                    let file = format!("trial_{k:03}_latents.csv");
                    write_matrix_csv(&dir.join(&file), &names("x", xs[k].ncols()), &xs[k])?;
                    Some(file)
                }
                None => None,
            };
            trials.push(TrialEntry { counts, latents });
        }
        let truth = match (&self.true_alpha, &self.true_beta) {
            (Some(a), Some(b)) => {
                write_matrix_csv(&dir.join("true_alpha.csv"), &names("x", a.ncols()), a)?;
                write_matrix_csv(&dir.join("true_beta.csv"), &beta_names(b.ncols() - 1), b)?;
                Some(TruthEntry {
                    alpha: "true_alpha.csv".into(),
                    beta: "true_beta.csv".into(),
                })
            }
            _ => None,
        };
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            n_neurons: n,
            latent_dim: self.latents.as_ref().map(|x| x[0].ncols()),
            history_order: self.true_beta.as_ref().map(|b| b.ncols() - 1),
            bin_width: self.bin_width,
            seed: self.seed,
            trials,
            truth,
            generator: self.generator.clone(),
        };
        write_json(&dir.join(MANIFEST_FILE), &manifest)
    }

    /// Reads a dataset directory (or the path of its manifest).
    pub fn read(path: &Path) -> Result<Dataset> {
        let (dir, manifest_path) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
        };
        let m: DatasetManifest = read_tagged(&manifest_path, DATASET_FORMAT)?;
        let mut counts = vec![];
        let mut latents = vec![];
        for entry in &m.trials {
            counts.push(read_matrix_csv(&resolve(&dir, &entry.counts))?.1);
            if let Some(file) = &entry.latents {
                latents.push(read_matrix_csv(&resolve(&dir, file))?.1);
            }
        }
        if !latents.is_empty() && latents.len() != counts.len() {
            return Err(Error::validation(format!(
                "{}: latents are listed for only some trials",
                manifest_path.display()
            )));
        }
        let (true_alpha, true_beta) = match &m.truth {
            Some(t) => (
                Some(read_matrix_csv(&resolve(&dir, &t.alpha))?.1),
                Some(read_matrix_csv(&resolve(&dir, &t.beta))?.1),
            ),
            None => (None, None),
        };
        let data = Dataset {
            bin_width: m.bin_width,
            seed: m.seed,
            counts,
            latents: if latents.is_empty() { None } else { Some(latents) },
            true_alpha,
            true_beta,
            generator: m.generator,
        };
        data.validate().map_err(|e| e.context(manifest_path.display()))?;
        if data.n_neurons() != m.n_neurons {
            return Err(Error::validation(format!(
                "{}: manifest declares {} neurons, counts have {}",
                manifest_path.display(),
                m.n_neurons,
                data.n_neurons()
            )));
        }
        if let (Some(declared), Some(xs)) = (m.latent_dim, &data.latents) {
            if xs[0].ncols() != declared {
                return Err(Error::validation(format!(
                    "{}: manifest declares {declared} latent dimensions, files have {}",
                    manifest_path.display(),
                    xs[0].ncols()
                )));
            }
        }
        Ok(data)
    }

    /// The trials at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&bad) = indices.iter().find(|&&k| k >= self.n_trials()) {
            return Err(Error::validation(format!(
                "trial index {bad} is out of range for {} trials",
                self.n_trials()
            )));
        }
        Ok(Dataset {
            counts: indices.iter().map(|&k| self.counts[k].clone()).collect(),
            latents: self.latents.as_ref().map(|xs| indices.iter().map(|&k| xs[k].clone()).collect()),
            ..self.clone()
        })
    }
}

/// One point of the progress trace recorded while fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgressPoint {
    pub iteration: usize,
    /// Seconds since the start of the iteration loop.
    pub elapsed: f64,
    pub elbo: f64,
    /// Against the true latents, when the dataset has them.
    pub rank_correlation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PosteriorEntry {
    mu: String,
    w: String,
    v: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsEntry {
    alpha: String,
    beta: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FitIndex {
    format: String,
    version: String,
    config: FitConfig,
    n_neurons: usize,
    latent_dim: usize,
    history_order: usize,
    train_trials: Vec<usize>,
    kernels: Vec<KernelSpec>,
    params: ParamsEntry,
    posterior: Vec<PosteriorEntry>,
    report: FitReport,
    progress: Vec<ProgressPoint>,
}

/// Everything a fit produced.
#[derive(Debug, Clone, PartialEq)]
pub struct FitArtifact {
    pub version: String,
    pub config: FitConfig,
    /// Dataset trials the fit used, in posterior order.
    pub train_trials: Vec<usize>,
    /// Final kernel of every latent.
    pub kernels: Vec<KernelSpec>,
    pub params: ModelParams,
    pub posterior: LatentPosterior,
    pub report: FitReport,
    pub progress: Vec<ProgressPoint>,
}

fn write_posterior(dir: &Path, posterior: &LatentPosterior) -> Result<Vec<PosteriorEntry>> {
    posterior
        .trials
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let entry = PosteriorEntry {
                mu: format!("trial_{k:03}_mu.csv"),
                w: format!("trial_{k:03}_w.csv"),
                v: format!("trial_{k:03}_v.csv"),
            };
            let header = names("x", p.latent_dim());
            write_matrix_csv(&dir.join(&entry.mu), &header, &p.mu)?;
            write_matrix_csv(&dir.join(&entry.w), &header, &p.w)?;
            write_matrix_csv(&dir.join(&entry.v), &header, &p.v)?;
            Ok(entry)
        })
        .collect()
}

fn read_posterior(dir: &Path, entries: &[PosteriorEntry], latent_dim: usize) -> Result<LatentPosterior> {
    let trials = entries
        .iter()
        .map(|e| {
            let mu = read_matrix_csv(&resolve(dir, &e.mu))?.1;
            let w = read_matrix_csv(&resolve(dir, &e.w))?.1;
            let v = read_matrix_csv(&resolve(dir, &e.v))?.1;
            if mu.ncols() != latent_dim || w.shape() != mu.shape() || v.shape() != mu.shape() {
                return Err(Error::validation(format!(
                    "posterior files {} do not match {latent_dim} latents",
                    e.mu
                )));
            }
            Ok(TrialPosterior { mu, w, v })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LatentPosterior { trials })
}

fn split_dir(path: &Path, file: &str) -> (PathBuf, PathBuf) {
    if path.is_dir() {
        (path.to_path_buf(), path.join(file))
    } else {
        (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
    }
}

impl FitArtifact {
    pub fn latent_dim(&self) -> usize {
        self.params.latent_dim()
    }

    /// Priors rebuilt from the stored kernels for the given trial lengths.
    pub fn priors(&self, lengths: &[usize]) -> Result<Vec<LatentPrior>> {
        self.kernels
            .iter()
            .map(|k| LatentPrior::new(*k, self.config.tol_per_bin, self.config.max_rank, lengths))
            .collect()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        write_matrix_csv(&dir.join("alpha.csv"), &names("x", self.latent_dim()), &self.params.alpha)?;
        write_matrix_csv(
            &dir.join("beta.csv"),
            &beta_names(self.params.history_order()),
            &self.params.beta,
        )?;
        let posterior = write_posterior(dir, &self.posterior)?;
        let index = FitIndex {
            format: FIT_FORMAT.into(),
            version: self.version.clone(),
            config: self.config.clone(),
            n_neurons: self.params.n_neurons(),
            latent_dim: self.latent_dim(),
            history_order: self.params.history_order(),
            train_trials: self.train_trials.clone(),
            kernels: self.kernels.clone(),
            params: ParamsEntry {
                alpha: "alpha.csv".into(),
                beta: "beta.csv".into(),
            },
            posterior,
            report: self.report.clone(),
            progress: self.progress.clone(),
        };
        write_json(&dir.join(FIT_FILE), &index)
    }

    /// Reads an artifact directory (or the path of its index).
    pub fn read(path: &Path) -> Result<FitArtifact> {
        let (dir, index_path) = split_dir(path, FIT_FILE);
        let index: FitIndex = read_tagged(&index_path, FIT_FORMAT)?;
        let alpha = read_matrix_csv(&resolve(&dir, &index.params.alpha))?.1;
        let beta = read_matrix_csv(&resolve(&dir, &index.params.beta))?.1;
        let params = ModelParams::new(alpha, beta).map_err(|e| e.context(index_path.display()))?;
        if params.n_neurons() != index.n_neurons
            || params.latent_dim() != index.latent_dim
            || params.history_order() != index.history_order
        {
            return Err(Error::validation(format!(
                "{}: parameter files disagree with the index",
                index_path.display()
            )));
        }
        if index.kernels.len() != index.latent_dim || index.posterior.len() != index.train_trials.len() {
            return Err(Error::validation(format!(
                "{}: expected one kernel per latent and one posterior per training trial",
                index_path.display()
            )));
        }
        let posterior = read_posterior(&dir, &index.posterior, index.latent_dim)?;
        Ok(FitArtifact {
            version: index.version,
            config: index.config,
            train_trials: index.train_trials,
            kernels: index.kernels,
            params,
            posterior,
            report: index.report,
            progress: index.progress,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PosteriorIndex {
    format: String,
    version: String,
    trials: Vec<usize>,
    excluded_neurons: Vec<usize>,
    posterior: Vec<PosteriorEntry>,
}

/// Posterior inferred with parameters held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorFile {
    pub version: String,
    /// Dataset trials, in posterior order.
    pub trials: Vec<usize>,
    pub excluded_neurons: Vec<usize>,
    pub posterior: LatentPosterior,
}

impl PosteriorFile {
    pub fn write(&self, dir: &Path) -> Result<()> {
        ensure_dir(dir)?;
        let posterior = write_posterior(dir, &self.posterior)?;
        let index = PosteriorIndex {
            format: POSTERIOR_FORMAT.into(),
            version: self.version.clone(),
            trials: self.trials.clone(),
            excluded_neurons: self.excluded_neurons.clone(),
            posterior,
        };
        write_json(&dir.join(POSTERIOR_FILE), &index)
    }

    pub fn read(path: &Path) -> Result<PosteriorFile> {
        let (dir, index_path) = split_dir(path, POSTERIOR_FILE);
        let index: PosteriorIndex = read_tagged(&index_path, POSTERIOR_FORMAT)?;
        let dim = match index.posterior.first() {
            Some(e) => read_matrix_csv(&resolve(&dir, &e.mu))?.1.ncols(),
            None => 0,
        };
        Ok(PosteriorFile {
            version: index.version,
            trials: index.trials,
            excluded_neurons: index.excluded_neurons,
            posterior: read_posterior(&dir, &index.posterior, dim)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn reals_round_trip_exactly() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 1.0 - f64::EPSILON] {
            let back: f64 = format_real(x).parse().unwrap();
            assert_eq!(back.to_bits(), x.to_bits());
        }
    }

    #[test]
    fn matrix_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let m = dmatrix![0.1, -1.0 / 3.0; 1e-20, 7.0];
        write_matrix_csv(&path, &names("x", 2), &m).unwrap();
        let (header, back) = read_matrix_csv(&path).unwrap();
        assert_eq!(header, vec!["x0", "x1"]);
        assert_eq!(back, m);
        let counts = dmatrix![0.0, 1.0; 3.0, 0.0];
        write_matrix_csv(&path, &names("n", 2), &counts).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "n0,n1\n0,1\n3,0\n");
    }

    #[test]
    fn ragged_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "a,b\n1,2\n3\n").unwrap();
        assert!(read_matrix_csv(&path).is_err());
        fs::write(&path, "a\nx\n").unwrap();
        assert!(matches!(read_matrix_csv(&path), Err(Error::Format(_))));
    }

    #[test]
    fn unknown_dataset_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), r#"{"format": "vlgp-dataset/99"}"#).unwrap();
        let err = Dataset::read(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "{err}");
        assert!(err.to_string().contains("vlgp-dataset/99"));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = Dataset {
            bin_width: 0.001,
            seed: Some(3),
            counts: vec![dmatrix![0.0, 1.0; 2.0, 0.0], dmatrix![1.0, 1.0; 0.0, 0.0; 1.0, 0.0]],
            latents: Some(vec![dmatrix![0.5; -0.5], dmatrix![0.1; 0.2; 0.3]]),
            true_alpha: Some(dmatrix![1.0; -0.25]),
            true_beta: Some(dmatrix![-3.0, 0.1; -2.0, 0.2]),
            generator: None,
        };
        data.write(dir.path()).unwrap();
        let back = Dataset::read(dir.path()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn mismatched_latents_are_rejected() {
        let data = Dataset {
            bin_width: 0.001,
            seed: None,
            counts: vec![dmatrix![0.0, 1.0; 2.0, 0.0]],
            latents: Some(vec![dmatrix![0.5; -0.5; 1.0]]),
            true_alpha: None,
            true_beta: None,
            generator: None,
        };
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(data.write(dir.path()), Err(Error::Validation(_))));
    }
}
