//! Run configuration, stored as TOML (`key = value` sections).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, Normalization, SyntheticClusters};
use crate::error::{Error, Result};
use crate::losses::DistillConfig;
use crate::model::ConvNetSpec;
use crate::optim::StepSchedule;
use crate::tensor::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Cifar10,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    pub seed: u64,
    pub image_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 4,
            train_per_class: 64,
            val_per_class: 16,
            test_per_class: 32,
            spread: 1.0,
            seed: 0,
            image_size: data::CIFAR_SIZE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub dir: Option<PathBuf>,
    /// Keep only the first N training records after the validation split (0 = all).
    pub train_subset: usize,
    /// CIFAR-10 records held out from the end of the training set for validation.
    pub val_size: usize,
    pub normalization: Normalization,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Cifar10,
            dir: None,
            train_subset: 0,
            val_size: 5000,
            normalization: Normalization::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

/// Train / validation / test partitions.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl DataConfig {
    pub fn load(&self) -> Result<Splits> {
        match self.source {
            DataSource::Cifar10 => {
                let dir = self
                    .dir
                    .as_deref()
                    .ok_or_else(|| Error::Config("cifar10 data needs a data directory".into()))?;
                let (full, test) = data::load_cifar10(dir, &self.normalization)?;
                let (train, val) = full.split_tail(self.val_size)?;
                let train = self.limit(train);
                Ok(Splits { train, val, test })
            }
            DataSource::Synthetic => {
                let s = &self.synthetic;
                let gen = SyntheticClusters::new(s.classes, s.spread, s.seed, s.image_size)?;
                let train = self.limit(gen.sample(s.train_per_class, s.seed.wrapping_add(1)));
                Ok(Splits {
                    train,
                    val: gen.sample(s.val_per_class, s.seed.wrapping_add(2)),
                    test: gen.sample(s.test_per_class, s.seed.wrapping_add(3)),
                })
            }
        }
    }

    fn limit(&self, train: Dataset) -> Dataset {
        if self.train_subset == 0 || self.train_subset >= train.len() {
            return train;
        }
        train.subset(&(0..self.train_subset).collect::<Vec<_>>())
    }

    pub fn num_classes(&self) -> usize {
        match self.source {
            DataSource::Cifar10 => data::CIFAR_CLASSES,
            DataSource::Synthetic => self.synthetic.classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub schedule: StepSchedule,
    pub momentum: f64,
    /// Applied to conv and linear weights, not biases.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
    /// Random flip and padded crop on training batches.
    pub augment: bool,
    pub precision: Precision,
    /// Emit a per-step metrics row every N steps (0 = epoch rows only).
    pub step_log_interval: usize,
    /// Test batches averaged when measuring the final similarity loss.
    pub lsp_batches: usize,
    pub lsp_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            schedule: StepSchedule::default(),
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            eval_batch_size: 256,
            seed: 0,
            augment: true,
            precision: Precision::F32,
            step_log_interval: 0,
            lsp_batches: 10,
            lsp_batch_size: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("epochs and batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("momentum must lie in [0, 1) and weight decay be nonnegative".into()));
        }
        self.schedule.validate(self.epochs)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub teacher_checkpoint: Option<PathBuf>,
    /// Network checkpoint evaluated or exported by the eval/export commands.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub teacher: ConvNetSpec,
    pub student: ConvNetSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            teacher: ConvNetSpec::default_teacher(),
            student: ConvNetSpec::default_student(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.distill.validate()?;
        self.teacher.validate()?;
        self.student.validate()?;
        let classes = self.data.num_classes();
        for (who, spec) in [("teacher", &self.teacher), ("student", &self.student)] {
            if spec.num_classes != classes {
                return Err(Error::Config(format!(
                    "{who} predicts {} classes but the data has {classes}",
                    spec.num_classes
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::Method;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(text.contains("gamma = 3000.0"));
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml(
            r#"
            [distill]
            method = "kd+sp"
            gamma = 100.0

            [train]
            epochs = 3
            schedule = { initial = 0.05, decay = 0.2, milestones = [1] }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.distill.method, Method::KdSp);
        assert_eq!(cfg.distill.alpha, 0.9);
        assert_eq!(cfg.train.batch_size, 128);
        assert!(cfg.train.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nepoch = 3\n").is_err());
        assert!(RunConfig::from_toml("[distill]\nmethod = \"fitnets\"\n").is_err());
    }

    #[test]
    fn class_count_must_match_data() {
        let mut cfg = RunConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.data.source = DataSource::Synthetic;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
