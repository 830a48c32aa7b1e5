//! Target-side orchestration: third-party initialisation, pseudo-label
//! fine-tuning, adversarial alignment with re-query, and the two baseline
//! query strategies.
//!
//! Nothing here can reach source data or source models. The only channel to
//! the source side is an [`OracleClient`].

pub mod kmeans;
mod report;

pub use report::{DatSummary, RunReport, StageReport};

use std::collections::HashSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use ndarray::Array4;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dat::{dat_generate, DatConfig, DatOutput};
use crate::data::{ImageTensor, LabeledDataset, Seed};
use crate::error::{Error, Result};
use crate::nn::{build_small_cnn, evaluate_accuracy, fit, save_checkpoint, Model, TrainConfig, TrainStats};
use crate::oracle::{OracleClient, SessionId, SubmitOutcome};
use crate::refine::{is_degenerate, pseudo_label_target};
use kmeans::{kmeans, KMeansConfig};

/// Which supervision terms a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// Third-party initialisation only.
    #[serde(rename = "another")]
    Another,
    /// Initialisation, then adversarial re-query and retraining.
    #[serde(rename = "another+dat")]
    AnotherDat,
    /// Everything, including target fine-tuning after each supervised stage.
    #[serde(rename = "full")]
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Another, Ablation::AnotherDat, Ablation::Full];

    pub fn stages(self) -> StageToggles {
        match self {
            Ablation::Another => StageToggles { init_another: true, target_finetune: false, dat_retrain: false },
            Ablation::AnotherDat => StageToggles { init_another: true, target_finetune: false, dat_retrain: true },
            Ablation::Full => StageToggles::default(),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Another => "another",
            Ablation::AnotherDat => "another+dat",
            Ablation::Full => "full",
        })
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "another" => Ok(Ablation::Another),
            "another+dat" => Ok(Ablation::AnotherDat),
            "full" => Ok(Ablation::Full),
            other => Err(Error::Config(format!("unknown ablation `{other}` (another, another+dat, full)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub init_another: bool,
    pub target_finetune: bool,
    pub dat_retrain: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self { init_another: true, target_finetune: true, dat_retrain: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub stages: StageToggles,
    /// Training on oracle labels of the third-party set.
    pub init: TrainConfig,
    /// One pass of target fine-tuning; pseudo-labels are recomputed every epoch.
    pub finetune: TrainConfig,
    /// Training on oracle labels of the perturbed third-party set.
    pub retrain: TrainConfig,
    pub dat: DatConfig,
    /// Centroid/assignment rounds when pseudo-labelling.
    pub pseudo_label_iterations: usize,
    /// Images per oracle submit call.
    pub query_batch_size: usize,
    /// Evaluate after every fine-tuning epoch as well as after each stage.
    pub evaluate_each_epoch: bool,
    /// Initialisation seed of the target model.
    pub model_seed: Seed,
    /// Where checkpoints and reports go; nothing is written when unset.
    /// Not serialized, so reports do not depend on where they were written.
    #[serde(skip)]
    pub output_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let sgd = |lr: f64, epochs: usize| TrainConfig {
            learning_rate: lr,
            momentum: 0.9,
            epochs,
            batch_size: 64,
            ..TrainConfig::default()
        };
        Self {
            stages: StageToggles::default(),
            init: sgd(0.02, 10),
            finetune: sgd(0.005, 4),
            retrain: sgd(0.01, 4),
            dat: DatConfig::default(),
            pseudo_label_iterations: 1,
            query_batch_size: 256,
            evaluate_each_epoch: false,
            model_seed: Seed(0),
            output_dir: None,
        }
    }
}

impl PipelineConfig {
    pub fn for_ablation(ablation: Ablation) -> Self {
        Self { stages: ablation.stages(), ..Self::default() }
    }

    /// Re-derives every stochastic seed from one run seed.
    pub fn reseeded(mut self, seed: Seed) -> Self {
        self.model_seed = seed.derive(100);
        self.init.seed = seed.derive(101);
        self.finetune.seed = seed.derive(102);
        self.retrain.seed = seed.derive(103);
        self.dat.seed = seed.derive(104);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.stages.init_another {
            return Err(Error::Config("every pipeline variant starts from third-party initialisation".into()));
        }
        if self.query_batch_size == 0 {
            return Err(Error::Config("query_batch_size must be positive".into()));
        }
        self.init.validate()?;
        self.finetune.validate()?;
        self.retrain.validate()?;
        self.dat.validate()
    }
}

/// Counts sessions and submitted samples passing through a client.
pub struct CountingOracle<'a> {
    inner: &'a dyn OracleClient,
    sessions: AtomicUsize,
    samples: AtomicUsize,
}

impl<'a> CountingOracle<'a> {
    pub fn new(inner: &'a dyn OracleClient) -> Self {
        Self { inner, sessions: AtomicUsize::new(0), samples: AtomicUsize::new(0) }
    }

    pub fn sessions(&self) -> usize {
        self.sessions.load(Ordering::Relaxed)
    }

    pub fn samples(&self) -> usize {
        self.samples.load(Ordering::Relaxed)
    }
}

impl OracleClient for CountingOracle<'_> {
    fn open(&self) -> Result<SessionId> {
        self.sessions.fetch_add(1, Ordering::Relaxed);
        self.inner.open()
    }

    fn submit(&self, session: SessionId, images: &ImageTensor) -> Result<SubmitOutcome> {
        let outcome = self.inner.submit(session, images)?;
        if let SubmitOutcome::Accepted(n) = outcome {
            self.samples.fetch_add(n, Ordering::Relaxed);
        }
        Ok(outcome)
    }

    fn finalize(&self, session: SessionId) -> Result<Vec<u32>> {
        self.inner.finalize(session)
    }
}

/// Accuracy of argmax predictions in percent.
pub fn evaluate(model: &Model, labeled_test: &LabeledDataset) -> Result<f64> {
    evaluate_accuracy(model, labeled_test)
}

/// Queries the whole third-party set in one session and trains a fresh target
/// model on the returned labels.
pub fn stage_init_another(
    oracle: &dyn OracleClient,
    third_party: &ImageTensor,
    num_classes: usize,
    cfg: &TrainConfig,
    model_seed: Seed,
    query_batch_size: usize,
) -> Result<(Model, Vec<u32>, TrainStats)> {
    if third_party.is_empty() {
        return Err(Error::InvalidInput("third-party set is empty".into()));
    }
    let labels = oracle.query_session(third_party, query_batch_size)?;
    let init = build_small_cnn(third_party.image_shape(), num_classes, model_seed)?;
    let (model, stats) = fit(&init, third_party, &labels, cfg)?;
    Ok((model, labels, stats))
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: Model,
    pub epoch_losses: Vec<f64>,
    pub epoch_accuracies: Vec<f64>,
    pub degenerate_epochs: usize,
}

/// `cfg.epochs` rounds of: pseudo-label the whole target set, then one epoch of
/// cross-entropy on those labels.
pub fn stage_target_finetune(
    model: &Model,
    target: &ImageTensor,
    cfg: &TrainConfig,
    pseudo_label_iterations: usize,
    eval: Option<&LabeledDataset>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let mut current = model.clone();
    let mut out = FinetuneOutcome {
        model: model.clone(),
        epoch_losses: Vec::new(),
        epoch_accuracies: Vec::new(),
        degenerate_epochs: 0,
    };
    for epoch in 0..cfg.epochs {
        let labels = pseudo_label_target(&current, target, pseudo_label_iterations)?;
        if is_degenerate(&labels) {
            log::warn!("fine-tune epoch {epoch}: every pseudo-label is class {}", labels[0]);
            out.degenerate_epochs += 1;
        }
        let epoch_cfg = TrainConfig { epochs: 1, seed: cfg.seed.derive(epoch as u64), ..cfg.clone() };
        let (next, stats) = fit(&current, target, &labels, &epoch_cfg)?;
        current = next;
        out.epoch_losses.extend(stats.epoch_losses);
        if let Some(eval) = eval {
            out.epoch_accuracies.push(evaluate(&current, eval)?);
        }
    }
    out.model = current;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct DatRetrainOutcome {
    pub model: Model,
    pub dat: DatOutput,
    pub labels: Vec<u32>,
    pub retrain: TrainStats,
    pub retrained: Model,
    pub finetune: Option<FinetuneOutcome>,
}

/// Perturbs the third-party set toward the target, re-queries it in a new
/// session, retrains on the answers and, if enabled, fine-tunes once more.
pub fn stage_dat_retrain(
    model: &Model,
    oracle: &dyn OracleClient,
    target: &ImageTensor,
    third_party: &ImageTensor,
    cfg: &PipelineConfig,
    eval: Option<&LabeledDataset>,
) -> Result<DatRetrainOutcome> {
    let dat = dat_generate(model, target, third_party, &cfg.dat)?;
    let labels = oracle.query_session(&dat.perturbed.images, cfg.query_batch_size)?;
    let (retrained, retrain) = fit(model, &dat.perturbed.images, &labels, &cfg.retrain)?;
    let finetune = if cfg.stages.target_finetune {
        Some(stage_target_finetune(&retrained, target, &cfg.finetune, cfg.pseudo_label_iterations, eval)?)
    } else {
        None
    };
    let model = finetune.as_ref().map(|f| f.model.clone()).unwrap_or_else(|| retrained.clone());
    Ok(DatRetrainOutcome { model, dat, labels, retrain, retrained, finetune })
}

/// Inputs visible to the target side of a run.
#[derive(Debug, Clone, Copy)]
pub struct TargetSide<'a> {
    pub target: &'a ImageTensor,
    pub third_party: &'a ImageTensor,
    pub num_classes: usize,
    /// Labelled target data for evaluation only; never used for training.
    pub eval: Option<&'a LabeledDataset>,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub model: Model,
    pub init_model: Model,
    pub report: RunReport,
}

fn stage_report(name: &str, accuracy: Option<f64>, losses: Vec<f64>, started: Instant) -> StageReport {
    StageReport {
        name: name.into(),
        accuracy,
        losses,
        wall_clock_ms: started.elapsed().as_millis(),
        ..Default::default()
    }
}

fn eval_opt(model: &Model, eval: Option<&LabeledDataset>) -> Result<Option<f64>> {
    eval.map(|e| evaluate(model, e)).transpose()
}

/// Runs the enabled stages in order. Checkpoints `stageN.bin` and the report
/// are written when `cfg.output_dir` is set.
pub fn run_pipeline(oracle: &dyn OracleClient, side: TargetSide<'_>, cfg: &PipelineConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let started = Instant::now();
    let counter = CountingOracle::new(oracle);
    let mut stages = Vec::new();
    let mut checkpoints = Vec::new();
    let note_queries = |stage: &mut StageReport, before: (usize, usize)| {
        stage.sessions = counter.sessions() - before.0;
        stage.queries = counter.samples() - before.1;
    };

    let t = Instant::now();
    let before = (counter.sessions(), counter.samples());
    let (init_model, _, init_stats) = stage_init_another(
        &counter,
        side.third_party,
        side.num_classes,
        &cfg.init,
        cfg.model_seed,
        cfg.query_batch_size,
    )?;
    let mut stage = stage_report("init_another", eval_opt(&init_model, side.eval)?, init_stats.epoch_losses, t);
    note_queries(&mut stage, before);
    log::info!("init_another: accuracy {:?}", stage.accuracy);
    stages.push(stage);
    checkpoints.push(init_model.clone());
    let mut model = init_model.clone();

    if cfg.stages.target_finetune {
        let t = Instant::now();
        let ft = stage_target_finetune(
            &model,
            side.target,
            &cfg.finetune,
            cfg.pseudo_label_iterations,
            side.eval.filter(|_| cfg.evaluate_each_epoch),
        )?;
        model = ft.model;
        let mut stage = stage_report("target_finetune", eval_opt(&model, side.eval)?, ft.epoch_losses, t);
        stage.epoch_accuracies = ft.epoch_accuracies;
        log::info!("target_finetune: accuracy {:?}", stage.accuracy);
        stages.push(stage);
        checkpoints.push(model.clone());
    }

    let mut dat_summary = None;
    if cfg.stages.dat_retrain {
        let t = Instant::now();
        let before = (counter.sessions(), counter.samples());
        let eval_epochs = side.eval.filter(|_| cfg.evaluate_each_epoch);
        let out = stage_dat_retrain(&model, &counter, side.target, side.third_party, cfg, eval_epochs)?;
        let mut stage =
            stage_report("dat_retrain", eval_opt(&out.retrained, side.eval)?, out.retrain.epoch_losses.clone(), t);
        note_queries(&mut stage, before);
        log::info!("dat_retrain: accuracy {:?}", stage.accuracy);
        stages.push(stage);
        checkpoints.push(out.retrained.clone());
        dat_summary = Some(DatSummary {
            batches: out.dat.batches.len(),
            mean_initial_kl: out.dat.mean_initial_kl(),
            mean_final_kl: out.dat.mean_final_kl(),
            strictly_decreased: out.dat.batches.iter().filter(|b| b.final_kl < b.initial_kl).count(),
            never_increased: out.dat.batches.iter().all(|b| b.final_kl <= b.initial_kl),
        });
        if let Some(ft) = out.finetune {
            let mut stage = stage_report("final_finetune", eval_opt(&ft.model, side.eval)?, ft.epoch_losses, t);
            stage.epoch_accuracies = ft.epoch_accuracies;
            log::info!("final_finetune: accuracy {:?}", stage.accuracy);
            stages.push(stage);
            checkpoints.push(ft.model.clone());
        }
        model = out.model;
    }

    let report = RunReport {
        strategy: "sfuda".into(),
        ablation: None,
        seed: cfg.model_seed.0,
        num_classes: side.num_classes,
        source_only_accuracy: None,
        final_accuracy: eval_opt(&model, side.eval)?,
        stages,
        sessions: counter.sessions(),
        queries: counter.samples(),
        dat: dat_summary,
        config: serde_json::to_value(cfg)?,
        mia: None,
        wall_clock_ms: started.elapsed().as_millis(),
    };
    if let Some(dir) = &cfg.output_dir {
        for (i, m) in checkpoints.iter().enumerate() {
            save_checkpoint(dir.join(format!("stage{}.bin", i + 1)), m)?;
        }
        report.write(dir)?;
    }
    Ok(PipelineRun { model, init_model, report })
}

#[derive(Debug, Clone)]
pub struct BaselineOutcome {
    pub model: Model,
    pub queried: ImageTensor,
    pub labels: Vec<u32>,
    pub stats: TrainStats,
    pub sessions: usize,
    pub queries: usize,
}

fn to_image_tensor(rows: ndarray::Array2<f64>, shape: [usize; 3]) -> Result<ImageTensor> {
    let n = rows.nrows();
    let [w, h, c] = shape;
    let data = rows.mapv(|v| v as f32).into_shape_with_order((n, w, h, c)).map_err(|e| Error::Shape(e.to_string()))?;
    ImageTensor::from_clipped(data)
}

/// K-means centroids of the flattened target images, as images. A centroid
/// that reproduces a target image exactly (a singleton cluster) is dropped,
/// since querying it would hand target content to the oracle.
pub fn cp_centroid_images(target: &ImageTensor, k: usize, seed: Seed) -> Result<ImageTensor> {
    if k < 2 {
        return Err(Error::Config(format!("CP needs K >= 2, got {k}")));
    }
    let flat = target.flatten().mapv(f64::from);
    let km = kmeans(flat.view(), &KMeansConfig::new(k, seed))?;
    log::info!("CP: K-means converged after {} iterations ({} re-seeds)", km.iterations, km.reseeded);
    let centroids = to_image_tensor(km.centroids, target.image_shape())?;
    let own: HashSet<_> = target.content_digests().into_iter().collect();
    let keep: Vec<usize> = (0..centroids.len()).filter(|&i| !own.contains(&centroids.content_digest(i))).collect();
    if keep.is_empty() {
        return Err(Error::InvalidInput("every CP centroid duplicates a target image".into()));
    }
    if keep.len() < centroids.len() {
        log::warn!("CP: dropped {} centroid(s) identical to a target image", centroids.len() - keep.len());
    }
    Ok(centroids.select(&keep))
}

fn train_on_queries(
    oracle: &dyn OracleClient,
    queried: ImageTensor,
    num_classes: usize,
    model_seed: Seed,
    cfg: &TrainConfig,
) -> Result<BaselineOutcome> {
    let counter = CountingOracle::new(oracle);
    let labels = counter.query_session(&queried, queried.len().max(1))?;
    let init = build_small_cnn(queried.image_shape(), num_classes, model_seed)?;
    let (model, stats) = fit(&init, &queried, &labels, cfg)?;
    Ok(BaselineOutcome { model, labels, stats, sessions: counter.sessions(), queries: counter.samples(), queried })
}

/// Cluster-prototype baseline: query the K target centroids and train on them.
pub fn baseline_cp(
    oracle: &dyn OracleClient,
    target: &ImageTensor,
    num_classes: usize,
    cfg: &TrainConfig,
    seed: Seed,
) -> Result<BaselineOutcome> {
    let centroids = cp_centroid_images(target, num_classes, seed.derive(1))?;
    train_on_queries(oracle, centroids, num_classes, seed.derive(2), cfg)
}

/// `n` images of standard-normal noise clipped to `[0, 1]`.
pub fn gnp_samples(n: usize, shape: [usize; 3], seed: Seed) -> Result<ImageTensor> {
    if n == 0 {
        return Err(Error::Config("GNP needs at least one sample".into()));
    }
    let mut rng = seed.rng();
    let [w, h, c] = shape;
    let data = Array4::from_shape_simple_fn((n, w, h, c), || {
        let v: f32 = StandardNormal.sample(&mut rng);
        v
    });
    ImageTensor::from_clipped(data)
}

/// Gaussian-noise baseline: query `n` noise images and train on them.
pub fn baseline_gnp(
    oracle: &dyn OracleClient,
    num_classes: usize,
    n: usize,
    shape: [usize; 3],
    seed: Seed,
    cfg: &TrainConfig,
) -> Result<BaselineOutcome> {
    let noise = gnp_samples(n, shape, seed.derive(1))?;
    train_on_queries(oracle, noise, num_classes, seed.derive(2), cfg)
}

/// Query strategy selected for a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Cp,
    Gnp,
    Sfuda,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cp" => Ok(Strategy::Cp),
            "gnp" => Ok(Strategy::Gnp),
            "sfuda" => Ok(Strategy::Sfuda),
            other => Err(Error::Config(format!("unknown strategy `{other}` (cp, gnp, sfuda)"))),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Cp => "cp",
            Strategy::Gnp => "gnp",
            Strategy::Sfuda => "sfuda",
        })
    }
}

/// Report for a baseline run, in the same shape as a pipeline report.
pub fn baseline_report(
    strategy: Strategy,
    outcome: &BaselineOutcome,
    seed: Seed,
    eval: Option<&LabeledDataset>,
    config: serde_json::Value,
) -> Result<RunReport> {
    let accuracy = eval_opt(&outcome.model, eval)?;
    Ok(RunReport {
        strategy: strategy.to_string(),
        seed: seed.0,
        num_classes: outcome.model.num_classes(),
        final_accuracy: accuracy,
        stages: vec![StageReport {
            name: strategy.to_string(),
            accuracy,
            losses: outcome.stats.epoch_losses.clone(),
            sessions: outcome.sessions,
            queries: outcome.queries,
            ..Default::default()
        }],
        sessions: outcome.sessions,
        queries: outcome.queries,
        config,
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{OracleService, SourceEnsemble};
    use std::collections::HashSet;

    fn service(k: usize) -> OracleService {
        let models = (0..2).map(|s| build_small_cnn([8, 8, 1], k, Seed(s)).unwrap()).collect();
        OracleService::new(SourceEnsemble::new(models, HashSet::new()).unwrap())
    }

    fn images(n: usize, offset: f32) -> ImageTensor {
        ImageTensor::new(Array4::from_shape_fn((n, 8, 8, 1), |(i, p, q, _)| {
            ((i * 7 + p * 3 + q * 5) as f32 * 0.0713 + offset).fract()
        }))
        .unwrap()
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.to_string().parse::<Ablation>().unwrap(), a);
            assert_eq!(serde_json::to_string(&a).unwrap(), format!("\"{a}\""));
        }
        assert!("nope".parse::<Ablation>().unwrap_err().is_config());
    }

    #[test]
    fn dat_requires_initialisation() {
        let mut cfg = PipelineConfig::default();
        cfg.stages.init_another = false;
        assert!(cfg.validate().unwrap_err().is_config());
    }

    #[test]
    fn zero_epoch_init_is_the_fresh_model() {
        let svc = service(3);
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (model, labels, _) = stage_init_another(&svc, &images(9, 0.0), 3, &cfg, Seed(4), 4).unwrap();
        assert_eq!(model, build_small_cnn([8, 8, 1], 3, Seed(4)).unwrap());
        assert_eq!(labels.len(), 9);
    }

    #[test]
    fn zero_epoch_finetune_is_identity() {
        let model = build_small_cnn([8, 8, 1], 3, Seed(4)).unwrap();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let out = stage_target_finetune(&model, &images(5, 0.1), &cfg, 1, None).unwrap();
        assert_eq!(out.model, model);
    }

    #[test]
    fn full_run_uses_two_sessions_of_third_party_size() {
        let svc = service(3);
        let third = images(12, 0.3);
        let target = images(10, 0.6);
        let mut cfg = PipelineConfig::default().reseeded(Seed(1));
        for t in [&mut cfg.init, &mut cfg.finetune, &mut cfg.retrain] {
            t.epochs = 1;
        }
        let side = TargetSide { target: &target, third_party: &third, num_classes: 3, eval: None };
        let run = run_pipeline(&svc, side, &cfg).unwrap();
        assert_eq!(run.report.sessions, 2);
        assert_eq!(run.report.queries, 24);
        assert_eq!(run.report.stage("init_another").unwrap().queries, 12);
        assert_eq!(run.report.stage("dat_retrain").unwrap().queries, 12);
        assert!(run.report.dat.as_ref().unwrap().never_increased);
        let names: Vec<_> = run.report.stages.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["init_another", "target_finetune", "dat_retrain", "final_finetune"]);
    }

    #[test]
    fn cp_queries_exactly_k_centroids() {
        let svc = service(4);
        let cfg = TrainConfig { epochs: 2, ..Default::default() };
        let out = baseline_cp(&svc, &images(30, 0.2), 4, &cfg, Seed(3)).unwrap();
        assert_eq!(out.queries, 4);
        assert_eq!(out.sessions, 1);
        assert!(baseline_cp(&svc, &images(30, 0.2), 1, &cfg, Seed(3)).unwrap_err().is_config());
    }

    #[test]
    fn cp_never_returns_a_target_image() {
        // Two tight groups plus one outlier: the outlier forms a singleton cluster.
        let mut data = Array4::from_elem((9, 8, 8, 1), 0.1f32);
        for i in 4..8 {
            data.slice_mut(ndarray::s![i, .., .., ..]).fill(0.6);
        }
        data.slice_mut(ndarray::s![0, 0, 0, 0]).fill(0.12);
        data.slice_mut(ndarray::s![4, 0, 0, 0]).fill(0.62);
        data.slice_mut(ndarray::s![8, .., .., ..]).fill(1.0);
        let target = ImageTensor::new(data).unwrap();
        let protos = cp_centroid_images(&target, 3, Seed(1)).unwrap();
        assert_eq!(protos.len(), 2);
        let own: HashSet<_> = target.content_digests().into_iter().collect();
        assert!(protos.content_digests().iter().all(|d| !own.contains(d)));
        assert!(cp_centroid_images(&target.slice(0, 2), 2, Seed(1)).is_err());
    }

    #[test]
    fn gnp_is_seeded_clipped_and_counted() {
        let a = gnp_samples(5, [8, 8, 1], Seed(2)).unwrap();
        assert_eq!(a, gnp_samples(5, [8, 8, 1], Seed(2)).unwrap());
        assert!(a.view().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(gnp_samples(0, [8, 8, 1], Seed(2)).unwrap_err().is_config());
        let svc = service(3);
        let out =
            baseline_gnp(&svc, 3, 7, [8, 8, 1], Seed(2), &TrainConfig { epochs: 1, ..Default::default() }).unwrap();
        assert_eq!(out.queries, 7);
    }
}
