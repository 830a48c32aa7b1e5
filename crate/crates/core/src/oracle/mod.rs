//! The sealed source side.
//!
//! Source models never leave this module. Callers interact through query
//! sessions that accept images, refuse any image whose content digest belongs
//! to a registered source or target sample, and answer with refined hard labels
//! for the whole session at once.

mod session;
mod wire;

pub use session::{OracleClient, OracleService, SessionId, SubmitOutcome};
pub use wire::{serve, OracleServer, Request, Response, TcpOracleClient, MAX_FRAME_BYTES};

use std::collections::HashSet;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{ContentDigest, ImageTensor, LabeledDataset, Seed};
use crate::error::{Error, Result};
use crate::nn::{
    build_small_cnn, evaluate_accuracy, train_supervised, ConfidenceMatrix, Model, TrainConfig, TrainStats,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GuardDecision {
    Accept,
    /// Hex content digests of the offending samples, in batch order.
    Reject(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedQuery {
    pub session: Option<SessionId>,
    pub ids: Vec<String>,
    pub at_unix_ms: u128,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session: SessionId,
    pub opened_at_unix_ms: u128,
    pub batches: usize,
    pub samples: usize,
    pub finalized: bool,
}

/// Append-only audit trail of sessions and refused queries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLog {
    pub sessions: Vec<SessionRecord>,
    pub rejected: Vec<RejectedQuery>,
    /// Queries that reached the models without passing the guard. Always zero.
    pub violations_accepted: usize,
}

impl QueryLog {
    pub fn total_samples(&self) -> usize {
        self.sessions.iter().map(|s| s.samples).sum()
    }

    fn session_mut(&mut self, id: SessionId) -> Option<&mut SessionRecord> {
        self.sessions.iter_mut().rev().find(|s| s.session == id)
    }
}

pub(crate) fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0)
}

/// `N` frozen source models sharing `K` classes, plus the digests they must refuse.
#[derive(Debug)]
pub struct SourceEnsemble {
    models: Vec<Model>,
    num_classes: usize,
    forbidden: HashSet<ContentDigest>,
    log: Mutex<QueryLog>,
}

impl SourceEnsemble {
    pub fn new(models: Vec<Model>, forbidden: HashSet<ContentDigest>) -> Result<Self> {
        let first = models.first().ok_or_else(|| Error::Config("ensemble needs at least one model".into()))?;
        let num_classes = first.num_classes();
        if models.iter().any(|m| m.num_classes() != num_classes || m.arch.input_shape != first.arch.input_shape) {
            return Err(Error::Config("ensemble models must share classes and input shape".into()));
        }
        Ok(Self { models, num_classes, forbidden, log: Mutex::new(QueryLog::default()) })
    }

    /// Trains one model per source domain and registers every source sample as forbidden.
    /// Model `i` is initialised from `seed.derive(i)`.
    pub fn train(sources: &[LabeledDataset], cfg: &TrainConfig, seed: Seed) -> Result<(Self, Vec<TrainStats>)> {
        let mut models = Vec::with_capacity(sources.len());
        let mut stats = Vec::with_capacity(sources.len());
        let mut forbidden = HashSet::new();
        for (i, source) in sources.iter().enumerate() {
            let init = build_small_cnn(source.images.image_shape(), source.num_classes, seed.derive(i as u64))?;
            let cfg_i = TrainConfig { seed: cfg.seed.derive(i as u64), ..cfg.clone() };
            let (model, s) = train_supervised(&init, source, &cfg_i)?;
            log::info!(
                "source model {i}: loss {:.4} -> {:.4}, train accuracy {:.1}%",
                s.initial_loss,
                s.final_loss,
                evaluate_accuracy(&model, source)?
            );
            forbidden.extend(source.images.content_digests());
            models.push(model);
            stats.push(s);
        }
        Ok((Self::new(models, forbidden)?, stats))
    }

    /// Registers further protected content (the target domain).
    pub fn register_forbidden(&mut self, digests: impl IntoIterator<Item = ContentDigest>) {
        self.forbidden.extend(digests);
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_models(&self) -> usize {
        self.models.len()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.models[0].arch.input_shape
    }

    /// Direct model access for the evaluation harness (source-only accuracy,
    /// membership inference). Adaptation code goes through [`OracleClient`].
    pub fn models(&self) -> &[Model] {
        &self.models
    }

    pub fn query_log(&self) -> QueryLog {
        self.log.lock().expect("query log poisoned").clone()
    }

    pub(crate) fn with_log<R>(&self, f: impl FnOnce(&mut QueryLog) -> R) -> R {
        f(&mut self.log.lock().expect("query log poisoned"))
    }

    pub fn boundary_guard(&self, batch: &ImageTensor) -> GuardDecision {
        self.guard_digests(&batch.content_digests())
    }

    pub(crate) fn guard_digests(&self, digests: &[ContentDigest]) -> GuardDecision {
        let bad: Vec<String> = digests.iter().filter(|d| self.forbidden.contains(d)).map(|d| d.to_string()).collect();
        if bad.is_empty() {
            GuardDecision::Accept
        } else {
            GuardDecision::Reject(bad)
        }
    }

    pub(crate) fn record_rejection(&self, session: Option<SessionId>, ids: Vec<String>) {
        self.with_log(|log| log.rejected.push(RejectedQuery { session, ids, at_unix_ms: now_ms() }));
    }

    /// `softmax(mean_i logits_i(x))`. Refuses forbidden samples.
    pub fn ensemble_confidence(&self, x: &ImageTensor) -> Result<ConfidenceMatrix> {
        if let GuardDecision::Reject(ids) = self.boundary_guard(x) {
            self.record_rejection(None, ids.clone());
            return Err(Error::BoundaryViolation { ids });
        }
        self.unguarded_confidence(x)
    }

    fn mean_logits(&self, x: &ImageTensor) -> Result<Array2<f64>> {
        let mut total = Array2::<f64>::zeros((x.len(), self.num_classes));
        for model in &self.models {
            total += &model.logits(x)?.mapv(f64::from);
        }
        Ok(total / self.models.len() as f64)
    }

    fn unguarded_confidence(&self, x: &ImageTensor) -> Result<ConfidenceMatrix> {
        Ok(ConfidenceMatrix::from_logits(&self.mean_logits(x)?))
    }

    /// Accuracy of the ensemble's argmax on labelled data ("Source Only"). This
    /// is an evaluator-side measurement and bypasses the query protocol.
    pub fn source_only_accuracy(&self, data: &LabeledDataset) -> Result<f64> {
        let pred = crate::nn::argmax_rows(&self.mean_logits(&data.images)?);
        let hits = pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
        Ok(100.0 * hits as f64 / data.len().max(1) as f64)
    }
}
