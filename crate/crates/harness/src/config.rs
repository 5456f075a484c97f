//! Experiment configuration.
//!
//! A config file is a TOML tree laid over the defaults of the chosen task and
//! profile, so a file only needs the keys it changes (plus `task`). Unknown
//! keys are rejected by name.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use bilevel_core::bilevel::{BilevelProblem, CvConfig, LrSchedule, Mode, Sampler, UdConfig};
use bilevel_core::data::{self, Dataset, SplitSpec};
use bilevel_core::models::{
    feature_learning_losses, quadratic_losses, reweighting_losses, FeatureLearningSpec, LossPair, QuadraticSpec,
    ReweightingSpec,
};
use bilevel_core::tensor::Tensor;

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    FeatureLearning,
    Reweighting,
    ScalarQuadratic,
}

/// Size preset for the defaults: `desk` finishes in minutes on one core,
/// `paper` keeps the full experimental sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    SynthBlobs {
        num_classes: usize,
        input_dim: usize,
        per_class: usize,
        class_sep: f64,
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub split: SplitSpec,
    /// Label-noise probability, applied to the training split only.
    pub noise: f64,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    /// Width of the learned feature layer (feature learning only).
    pub feature_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticConfig {
    /// Rows of the symmetric curvature matrix.
    pub curvature: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    pub theta0: Vec<f64>,
    pub lambda0: Vec<f64>,
}

/// UD settings not covered by the sweep axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UdSettings {
    pub outer_mode: Mode,
    pub inner_mode: Mode,
    pub alpha: LrSchedule,
    pub eta: f64,
    pub outer_batch: usize,
    pub inner_batch: usize,
}

/// CV settings not covered by the sweep axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvSettings {
    pub inner_mode: Mode,
    pub eta: f64,
    pub inner_batch: usize,
    pub sampler: Sampler,
}

/// Swept values. Each UD cell is one (seed, K, μ, ν); CV cells ignore μ.
/// Runs go to the largest `T` and log every step, so every listed `T` is a
/// prefix of the emitted trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(rename = "K")]
    pub k: Vec<usize>,
    #[serde(rename = "T")]
    pub t: Vec<usize>,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
}

impl SweepAxes {
    pub fn t_max(&self) -> usize {
        self.t.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Task,
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub quadratic: QuadraticConfig,
    pub ud: UdSettings,
    pub cv: CvSettings,
    pub sweep: SweepAxes,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

fn blobs(num_classes: usize, input_dim: usize, per_class: usize, class_sep: f64) -> DataSource {
    DataSource::SynthBlobs {
        num_classes,
        input_dim,
        per_class,
        class_sep,
        seed: 0,
    }
}

impl ExperimentConfig {
    /// Built-in defaults for a task under a profile.
    pub fn defaults(task: Task, profile: Profile) -> Self {
        let quadratic = QuadraticConfig {
            curvature: vec![vec![1.0]],
            target: vec![0.0],
            theta0: vec![0.0],
            lambda0: vec![2.0],
        };
        let split = |n_train, n_val, n_test| SplitSpec {
            n_train,
            n_val,
            n_test,
            seed: 0,
        };
        let sgd = |alpha, eta, batch| UdSettings {
            outer_mode: Mode::Sgd,
            inner_mode: Mode::Sgd,
            alpha: LrSchedule::Constant(alpha),
            eta,
            outer_batch: batch,
            inner_batch: batch,
        };
        let cv = |eta, inner_batch| CvSettings {
            inner_mode: Mode::Sgd,
            eta,
            inner_batch,
            sampler: Sampler::default(),
        };
        let sweep = |k: Vec<usize>, t: Vec<usize>| SweepAxes {
            k,
            t,
            mu: vec![0.0],
            nu: vec![0.0],
        };
        let (data, model, ud, cvs, axes) = match (task, profile) {
            (Task::Reweighting, Profile::Desk) => (
                DataConfig {
                    source: blobs(4, 10, 200, 0.7),
                    split: split(500, 50, 200),
                    noise: 0.3,
                    noise_seed: 0,
                },
                ModelConfig {
                    hidden_dim: 8,
                    feature_dim: 0,
                },
                UdSettings {
                    outer_mode: Mode::Gd,
                    inner_mode: Mode::Sgd,
                    alpha: LrSchedule::Constant(100.0),
                    eta: 0.3,
                    outer_batch: 50,
                    inner_batch: 100,
                },
                cv(0.3, 100),
                sweep(vec![1, 64], vec![300]),
            ),
            (Task::Reweighting, Profile::Paper) => (
                DataConfig {
                    source: DataSource::Idx {
                        images: "data/train-images-idx3-ubyte".into(),
                        labels: "data/train-labels-idx1-ubyte".into(),
                    },
                    split: split(2000, 200, 1000),
                    noise: 0.5,
                    noise_seed: 0,
                },
                ModelConfig {
                    hidden_dim: 256,
                    feature_dim: 0,
                },
                sgd(10.0, 0.3, 100),
                cv(0.3, 100),
                sweep(vec![1, 64, 512], vec![1000]),
            ),
            (Task::FeatureLearning, Profile::Desk) => (
                DataConfig {
                    source: blobs(20, 64, 16, 3.0),
                    split: split(100, 20, 200),
                    noise: 0.0,
                    noise_seed: 0,
                },
                ModelConfig {
                    hidden_dim: 16,
                    feature_dim: 32,
                },
                sgd(0.1, 0.1, 20),
                cv(0.1, 20),
                sweep(vec![1, 16], vec![100]),
            ),
            (Task::FeatureLearning, Profile::Paper) => (
                DataConfig {
                    source: blobs(100, 784, 16, 3.0),
                    split: split(500, 100, 1000),
                    noise: 0.0,
                    noise_seed: 0,
                },
                ModelConfig {
                    hidden_dim: 128,
                    feature_dim: 256,
                },
                sgd(0.1, 0.1, 50),
                cv(0.1, 50),
                sweep(vec![1, 16, 256], vec![1000]),
            ),
            (Task::ScalarQuadratic, _) => (
                DataConfig {
                    source: blobs(2, 1, 1, 1.0),
                    split: split(0, 0, 0),
                    noise: 0.0,
                    noise_seed: 0,
                },
                ModelConfig {
                    hidden_dim: 1,
                    feature_dim: 1,
                },
                UdSettings {
                    outer_mode: Mode::Gd,
                    inner_mode: Mode::Gd,
                    alpha: LrSchedule::Constant(0.5),
                    eta: 0.5,
                    outer_batch: 1,
                    inner_batch: 1,
                },
                CvSettings {
                    inner_mode: Mode::Gd,
                    eta: 0.5,
                    inner_batch: 1,
                    sampler: Sampler::UniformBox { lo: -3.0, hi: 3.0 },
                },
                sweep(vec![3], vec![50]),
            ),
        };
        Self {
            task,
            seeds: (0..5).collect(),
            data,
            model,
            quadratic,
            ud,
            cv: cvs,
            sweep: axes,
            out: None,
        }
    }

    /// Parse a TOML document over the defaults of its `task` and `profile`.
    pub fn from_toml_str(text: &str, profile: Profile) -> Result<Self> {
        let overlay: toml::Table = toml::from_str(text)?;
        let task = match overlay.get("task") {
            Some(v) => v
                .clone()
                .try_into::<Task>()
                .map_err(|e| HarnessError::Config(format!("task: {e}")))?,
            None => return Err(HarnessError::Config("missing field `task`".into())),
        };
        let mut base =
            toml::Table::try_from(Self::defaults(task, profile)).map_err(|e| HarnessError::Config(e.to_string()))?;
        merge(&mut base, overlay);
        let cfg: Self = toml::Value::Table(base).try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, profile: Profile) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, profile).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        let s = &self.sweep;
        if s.k.is_empty() || s.t.is_empty() || s.mu.is_empty() || s.nu.is_empty() {
            return bad("every sweep axis needs at least one value".into());
        }
        if let Some(v) = s.mu.iter().chain(&s.nu).find(|v| !(**v >= 0.0)) {
            return bad(format!("sweep mu/nu values must be nonnegative, got {v}"));
        }
        if !(0.0..=1.0).contains(&self.data.noise) {
            return bad(format!("data.noise must lie in [0, 1], got {}", self.data.noise));
        }
        Ok(())
    }

    pub fn ud_config(&self, seed: u64, k: usize, mu: f64, nu: f64) -> UdConfig {
        UdConfig {
            outer_steps: self.sweep.t_max(),
            inner_steps: k,
            outer_mode: self.ud.outer_mode,
            inner_mode: self.ud.inner_mode,
            alpha: self.ud.alpha,
            eta: self.ud.eta,
            mu,
            nu,
            outer_batch: self.ud.outer_batch,
            inner_batch: self.ud.inner_batch,
            seed,
        }
    }

    pub fn cv_config(&self, seed: u64, k: usize, nu: f64) -> CvConfig {
        CvConfig {
            candidates: self.sweep.t_max(),
            inner_steps: k,
            inner_mode: self.cv.inner_mode,
            eta: self.cv.eta,
            nu,
            inner_batch: self.cv.inner_batch,
            sampler: self.cv.sampler,
            seed,
        }
    }

    /// Load or synthesize the data and return `(train, val, test)`, with
    /// label noise on the training split only.
    pub fn datasets(&self) -> Result<(Dataset, Dataset, Dataset)> {
        let full = match &self.data.source {
            DataSource::SynthBlobs {
                num_classes,
                input_dim,
                per_class,
                class_sep,
                seed,
            } => data::synth_blobs(*num_classes, *input_dim, *per_class, *class_sep, *seed)?,
            DataSource::Idx { images, labels } => data::load_idx(images, labels)?,
        };
        let (train, val, test) = data::split(&full, &self.data.split)?;
        let train = data::inject_label_noise(&train, self.data.noise, self.data.noise_seed)?;
        Ok((train, val, test))
    }

    pub fn losses(&self, input_dim: usize, num_classes: usize, n_train: usize) -> Result<Arc<dyn LossPair>> {
        Ok(match self.task {
            Task::FeatureLearning => Arc::new(feature_learning_losses(FeatureLearningSpec {
                input_dim,
                feature_dim: self.model.feature_dim,
                hidden_dim: self.model.hidden_dim,
                num_classes,
            })?),
            Task::Reweighting => Arc::new(reweighting_losses(ReweightingSpec {
                input_dim,
                hidden_dim: self.model.hidden_dim,
                num_classes,
                n_train,
            })?),
            Task::ScalarQuadratic => {
                let q = &self.quadratic;
                let d = q.target.len();
                if q.curvature.len() != d || q.curvature.iter().any(|r| r.len() != d) {
                    return Err(HarnessError::Config(format!("quadratic.curvature must be {d}x{d}")));
                }
                let curvature = Tensor::matrix(d, d, q.curvature.concat())?;
                Arc::new(quadratic_losses(QuadraticSpec {
                    curvature,
                    target: q.target.clone(),
                    theta0: q.theta0.clone(),
                    lambda0: q.lambda0.clone(),
                })?)
            }
        })
    }

    pub fn problem(&self) -> Result<BilevelProblem> {
        if self.task == Task::ScalarQuadratic {
            return Ok(BilevelProblem::data_free(self.losses(0, 0, 0)?)?);
        }
        let (train, val, test) = self.datasets()?;
        let losses = self.losses(train.input_dim, train.num_classes, train.len())?;
        Ok(BilevelProblem::new(
            train.examples,
            val.examples,
            test.examples,
            losses,
        )?)
    }
}

/// Recursively overwrite `base` with `overlay`; tables merge, other values
/// replace.
fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                // A tagged enum switching variant must not inherit the old
                // variant's fields.
                if b.get("kind").is_some() && o.get("kind").is_some_and(|k| Some(k) != b.get("kind")) {
                    *b = o;
                } else {
                    merge(b, o);
                }
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
