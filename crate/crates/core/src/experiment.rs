//! Whole-run configuration and drivers shared by the command line and tests.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Seed, ShiftSuite, SyntheticConfig};
use crate::error::{Error, Result};
use crate::mia::MiaConfig;
use crate::nn::{TrainConfig, TrainStats};
use crate::oracle::{OracleClient, SourceEnsemble};
use crate::pipeline::{
    baseline_cp, baseline_gnp, baseline_report, run_pipeline, PipelineConfig, RunReport, Strategy, TargetSide,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    /// Training on the queried baseline images.
    pub training: TrainConfig,
    /// Number of noise images queried by GNP.
    pub gnp_samples: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { training: PipelineConfig::default().init, gnp_samples: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: SyntheticConfig,
    /// Supervised training of each source model.
    pub sources: TrainConfig,
    pub pipeline: PipelineConfig,
    pub baseline: BaselineConfig,
    pub mia: MiaConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: SyntheticConfig::default(),
            sources: TrainConfig {
                learning_rate: 0.05,
                momentum: 0.9,
                epochs: 5,
                batch_size: 64,
                ..Default::default()
            },
            pipeline: PipelineConfig::default(),
            baseline: BaselineConfig::default(),
            mia: MiaConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON file; missing fields take their defaults, unknown fields are rejected.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| Error::Load { path: path.into(), source })?;
        let cfg: Self =
            serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sources.validate()?;
        self.pipeline.validate()?;
        self.baseline.training.validate()?;
        self.mia.victim.validate()?;
        self.mia.attack.validate()?;
        self.mia.init.validate()?;
        if self.baseline.gnp_samples == 0 {
            return Err(Error::Config("baseline.gnp_samples must be positive".into()));
        }
        Ok(())
    }

    /// Same settings with every training seed derived from the run seed.
    pub fn reseeded(&self, seed: Seed) -> Self {
        let mut cfg = self.clone();
        cfg.sources.seed = seed.derive(300);
        cfg.pipeline = cfg.pipeline.reseeded(seed);
        cfg.baseline.training.seed = seed.derive(301);
        cfg.mia = cfg.mia.reseeded(seed);
        cfg
    }
}

/// Trains the source ensemble and protects both source and target content.
pub fn train_oracle(
    sources: &[LabeledDataset],
    target: &LabeledDataset,
    cfg: &TrainConfig,
    seed: Seed,
) -> Result<(SourceEnsemble, Vec<TrainStats>)> {
    let (mut ensemble, stats) = SourceEnsemble::train(sources, cfg, seed.derive(310))?;
    ensemble.register_forbidden(target.images.content_digests());
    Ok((ensemble, stats))
}

/// Target-side view of a suite, with the labelled target used for evaluation only.
pub fn target_side(suite: &ShiftSuite) -> TargetSide<'_> {
    TargetSide {
        target: &suite.target.images,
        third_party: &suite.third_party.images,
        num_classes: suite.target.num_classes,
        eval: Some(&suite.target),
    }
}

/// Runs one strategy against `oracle`. `cfg` must already be reseeded.
pub fn run_strategy(
    oracle: &dyn OracleClient,
    strategy: Strategy,
    side: TargetSide<'_>,
    cfg: &ExperimentConfig,
    seed: Seed,
) -> Result<RunReport> {
    let mut report = match strategy {
        Strategy::Sfuda => run_pipeline(oracle, side, &cfg.pipeline)?.report,
        Strategy::Cp => {
            let out = baseline_cp(oracle, side.target, side.num_classes, &cfg.baseline.training, seed.derive(320))?;
            baseline_report(strategy, &out, seed, side.eval, serde_json::to_value(&cfg.baseline)?)?
        }
        Strategy::Gnp => {
            let shape = side.target.image_shape();
            let out = baseline_gnp(
                oracle,
                side.num_classes,
                cfg.baseline.gnp_samples,
                shape,
                seed.derive(321),
                &cfg.baseline.training,
            )?;
            baseline_report(strategy, &out, seed, side.eval, serde_json::to_value(&cfg.baseline)?)?
        }
    };
    report.seed = seed.0;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_takes_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"data": {"samples_per_domain": 50}}"#).unwrap();
        assert_eq!(cfg.data.samples_per_domain, 50);
        assert_eq!(cfg.pipeline, PipelineConfig::default());
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"pipelin": {}}"#).unwrap();
        assert!(ExperimentConfig::load(&path).unwrap_err().is_config());
        fs::write(&path, r#"{"baseline": {"gnp_samples": 0}}"#).unwrap();
        assert!(ExperimentConfig::load(&path).unwrap_err().is_config());
    }

    #[test]
    fn reseeding_is_deterministic_and_seed_dependent() {
        let base = ExperimentConfig::default();
        assert_eq!(base.reseeded(Seed(4)), base.reseeded(Seed(4)));
        assert_ne!(base.reseeded(Seed(4)), base.reseeded(Seed(5)));
    }
}
