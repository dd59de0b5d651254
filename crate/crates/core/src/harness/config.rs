//! Flat TOML experiment configuration.
//!
//! Every key is optional; missing keys take the defaults below. Three keys
//! depend on the method when left unset:
//!
//! | key                       | `sparcl-*`                          | other methods |
//! |---------------------------|-------------------------------------|---------------|
//! | `sparsity`                | 0.75                                | 0.0           |
//! | `gradient_extra_sparsity` | 0.05 at s = 0.75, 0.02 at s = 0.90, else 0 | 0.0    |
//! | `rho`                     | 0.3                                 | 0.0           |

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::{build_split_tasks, build_synthetic_tasks, load_idx_dir, TaskStream};
use crate::ddr::CounterReset;
use crate::error::{Error, Result};
use crate::tdm::TdmSchedule;
use crate::tensor::{Precision, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Sgd,
    Er,
    Derpp,
    SparclEr,
    SparclDerpp,
}

impl Method {
    pub fn is_sparcl(self) -> bool {
        matches!(self, Method::SparclEr | Method::SparclDerpp)
    }

    pub fn uses_buffer(self) -> bool {
        !matches!(self, Method::Sgd)
    }

    pub fn is_derpp(self) -> bool {
        matches!(self, Method::Derpp | Method::SparclDerpp)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Method::Sgd),
            "er" => Ok(Method::Er),
            "derpp" => Ok(Method::Derpp),
            "sparcl-er" => Ok(Method::SparclEr),
            "sparcl-derpp" => Ok(Method::SparclDerpp),
            _ => Err(Error::Argument(format!(
                "unknown method {s:?}; expected sgd, er, derpp, sparcl-er or sparcl-derpp"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    Mlp,
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub sparsity: Option<f64>,
    pub gradient_extra_sparsity: Option<f64>,
    pub rho: Option<f64>,
    pub cutoff: usize,
    pub counter_reset: CounterReset,
    pub delta_k: usize,
    pub p_intra: f64,
    pub p_inter: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Current-task mini-batches used for importance gradients.
    pub importance_batches: usize,
    pub coeff_mse: f64,
    pub coeff_ce: f64,
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub lr: f64,
    pub seed: u64,
    pub precision: Precision,
    pub architecture: Architecture,
    pub hidden: Vec<usize>,
    pub cnn_channels: usize,
    pub tasks: usize,
    pub classes_per_task: usize,
    /// `"synthetic"` or a directory holding the four IDX files.
    pub data: String,
    pub synthetic_dim: usize,
    pub synthetic_per_class: usize,
    pub synthetic_separation: f64,
    /// Also write `buffer.jsonl` next to the report.
    pub dump_buffer: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::SparclEr,
            sparsity: None,
            gradient_extra_sparsity: None,
            rho: None,
            cutoff: 4,
            counter_reset: CounterReset::PerStage,
            delta_k: 5,
            p_intra: 0.005,
            p_inter: 0.01,
            alpha: 0.5,
            beta: 1.0,
            importance_batches: 10,
            coeff_mse: 0.5,
            coeff_ce: 0.5,
            epochs_per_task: 5,
            batch_size: 32,
            buffer_capacity: 200,
            lr: 0.03,
            seed: 0,
            precision: Precision::F32,
            architecture: Architecture::Mlp,
            hidden: vec![256],
            cnn_channels: 8,
            tasks: 5,
            classes_per_task: 2,
            data: "synthetic".into(),
            synthetic_dim: 32,
            synthetic_per_class: 250,
            synthetic_separation: 3.0,
            dump_buffer: false,
        }
    }
}

/// Extra gradient sparsity paired with a weight sparsity.
pub fn default_extra_sparsity(s: f64) -> f64 {
    if (s - 0.75).abs() < 1e-9 {
        0.05
    } else if (s - 0.9).abs() < 1e-9 {
        0.02
    } else {
        0.0
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Serde(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(format!("config: {e}")))
    }

    pub fn sparsity(&self) -> f64 {
        self.sparsity
            .unwrap_or(if self.method.is_sparcl() { 0.75 } else { 0.0 })
    }

    pub fn extra_sparsity(&self) -> f64 {
        self.gradient_extra_sparsity.unwrap_or(if self.method.is_sparcl() {
            default_extra_sparsity(self.sparsity())
        } else {
            0.0
        })
    }

    pub fn rho(&self) -> f64 {
        self.rho
            .unwrap_or(if self.method.is_sparcl() { 0.3 } else { 0.0 })
    }

    pub fn dgm_enabled(&self) -> bool {
        self.method.is_sparcl() && self.extra_sparsity() > 0.0
    }

    pub fn ddr_enabled(&self) -> bool {
        self.method.is_sparcl() && self.rho() > 0.0
    }

    /// Copy with every method-dependent default written out.
    pub fn resolved(&self) -> Self {
        TrainConfig {
            sparsity: Some(self.sparsity()),
            gradient_extra_sparsity: Some(self.extra_sparsity()),
            rho: Some(self.rho()),
            ..self.clone()
        }
    }

    pub fn schedule(&self) -> Result<TdmSchedule> {
        TdmSchedule::new(self.sparsity(), self.delta_k, self.p_intra, self.p_inter)
    }

    pub fn validate(&self) -> Result<()> {
        let arg = |m: String| Err(Error::Argument(m));
        let (s, q, rho) = (self.sparsity(), self.extra_sparsity(), self.rho());
        if !(0.0..1.0).contains(&s) {
            return arg(format!("sparsity must lie in [0, 1), got {s}"));
        }
        if self.method.is_sparcl() && s <= 0.0 {
            return arg("sparcl methods need sparsity > 0".into());
        }
        if q < 0.0 || s + q >= 1.0 {
            return arg(format!("gradient extra sparsity {q} must be >= 0 with s + q < 1"));
        }
        if !(0.0..=1.0).contains(&rho) {
            return arg(format!("rho must lie in [0, 1], got {rho}"));
        }
        if !self.method.is_sparcl() && (q > 0.0 || rho > 0.0) {
            return arg("gradient masking and data removal need a sparcl method".into());
        }
        if self.method.is_sparcl() {
            self.schedule()?;
            if self.p_inter > 0.0 && self.tasks > 1 && self.epochs_per_task < self.delta_k {
                return arg(format!(
                    "epochs_per_task {} < delta_k {} would never undo the inter-task expansion",
                    self.epochs_per_task, self.delta_k
                ));
            }
        }
        let positive = [
            ("cutoff", self.cutoff),
            ("delta_k", self.delta_k),
            ("importance_batches", self.importance_batches),
            ("epochs_per_task", self.epochs_per_task),
            ("batch_size", self.batch_size),
            ("tasks", self.tasks),
            ("classes_per_task", self.classes_per_task),
            ("cnn_channels", self.cnn_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return arg(format!("{name} must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return arg(format!("lr must be positive, got {}", self.lr));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("coeff_mse", self.coeff_mse),
            ("coeff_ce", self.coeff_ce),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return arg(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if self.hidden.contains(&0) {
            return arg("hidden layer widths must be >= 1".into());
        }
        Ok(())
    }

    /// Builds the task stream named by `data`.
    pub fn load_stream<F: Scalar>(&self) -> Result<TaskStream<F>> {
        if self.data == "synthetic" {
            build_synthetic_tasks(
                self.tasks,
                self.classes_per_task,
                self.synthetic_dim,
                self.synthetic_per_class,
                self.synthetic_separation,
                self.seed,
            )
        } else {
            let (train, test) = load_idx_dir(&PathBuf::from(&self.data))?;
            build_split_tasks(&train.cast(), &test.cast(), self.tasks, self.classes_per_task, self.seed)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_dependent_defaults() {
        let c = TrainConfig::default();
        assert_eq!((c.sparsity(), c.extra_sparsity(), c.rho()), (0.75, 0.05, 0.3));
        let c = TrainConfig {
            method: Method::SparclEr,
            sparsity: Some(0.9),
            ..TrainConfig::default()
        };
        assert_eq!(c.extra_sparsity(), 0.02);
        let c = TrainConfig {
            method: Method::Er,
            ..TrainConfig::default()
        };
        assert_eq!((c.sparsity(), c.extra_sparsity(), c.rho()), (0.0, 0.0, 0.0));
        c.validate().unwrap();
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = TrainConfig::from_toml("method = \"derpp\"\nlr = 0.1\nhidden = [64, 32]\n").unwrap();
        assert_eq!(c.method, Method::Derpp);
        assert_eq!(c.hidden, vec![64, 32]);
        assert_eq!(TrainConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert!(matches!(TrainConfig::from_toml("sparsityy = 0.5"), Err(Error::Serde(_))));
    }

    #[test]
    fn validation_rejects_bad_ranges() {
        let bad = [
            TrainConfig { sparsity: Some(1.0), ..TrainConfig::default() },
            TrainConfig { sparsity: Some(0.0), ..TrainConfig::default() },
            TrainConfig { gradient_extra_sparsity: Some(0.3), ..TrainConfig::default() },
            TrainConfig { method: Method::Er, rho: Some(0.3), ..TrainConfig::default() },
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { epochs_per_task: 3, ..TrainConfig::default() },
        ];
        for c in bad {
            assert!(matches!(c.validate(), Err(Error::Argument(_))), "{c:?}");
        }
    }
}
