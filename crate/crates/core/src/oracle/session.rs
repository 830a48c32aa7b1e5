//! Two-phase query sessions: submit every batch, then finalize once to get
//! labels for the whole session. Refinement uses column sums over all
//! submitted samples, so labels cannot be produced per batch.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{now_ms, GuardDecision, SessionRecord, SourceEnsemble};
use crate::data::ImageTensor;
use crate::error::{Error, Result};
use crate::refine::depict_refine;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(pub u64);

impl std::fmt::Display for SessionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubmitOutcome {
    Accepted(usize),
    /// Hex digests of the forbidden samples; nothing from the batch was kept.
    Rejected(Vec<String>),
}

#[derive(Debug)]
enum State {
    Open(Vec<ImageTensor>),
    Finalized(Vec<u32>),
}

/// In-process oracle: owns the ensemble and the open sessions.
#[derive(Debug)]
pub struct OracleService {
    ensemble: Arc<SourceEnsemble>,
    sessions: Mutex<HashMap<SessionId, State>>,
    next_id: AtomicU64,
}

impl OracleService {
    pub fn new(ensemble: SourceEnsemble) -> Self {
        Self::from_shared(Arc::new(ensemble))
    }

    pub fn from_shared(ensemble: Arc<SourceEnsemble>) -> Self {
        Self { ensemble, sessions: Mutex::new(HashMap::new()), next_id: AtomicU64::new(1) }
    }

    pub fn ensemble(&self) -> &SourceEnsemble {
        &self.ensemble
    }

    pub fn open_session(&self) -> SessionId {
        let id = SessionId(self.next_id.fetch_add(1, Ordering::Relaxed));
        self.sessions.lock().expect("sessions poisoned").insert(id, State::Open(Vec::new()));
        self.ensemble.with_log(|log| {
            log.sessions.push(SessionRecord {
                session: id,
                opened_at_unix_ms: now_ms(),
                batches: 0,
                samples: 0,
                finalized: false,
            })
        });
        id
    }

    pub fn submit_batch(&self, id: SessionId, images: ImageTensor) -> Result<SubmitOutcome> {
        let [w, h, c] = self.ensemble.input_shape();
        if images.image_shape() != [w, h, c] {
            return Err(Error::Shape(format!("oracle expects {w}x{h}x{c} images, got {:?}", images.image_shape())));
        }
        if images.view().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("pixel values must lie in [0, 1]".into()));
        }
        // Digests are computed before taking the session lock.
        let decision = self.ensemble.boundary_guard(&images);
        let mut sessions = self.sessions.lock().expect("sessions poisoned");
        match sessions.get_mut(&id) {
            None => Err(Error::Protocol(format!("unknown session {id}"))),
            Some(State::Finalized(_)) => Err(Error::Protocol(format!("session {id} is already finalized"))),
            Some(State::Open(batches)) => match decision {
                GuardDecision::Reject(ids) => {
                    drop(sessions);
                    self.ensemble.record_rejection(Some(id), ids.clone());
                    Ok(SubmitOutcome::Rejected(ids))
                }
                GuardDecision::Accept => {
                    let n = images.len();
                    batches.push(images);
                    drop(sessions);
                    self.ensemble.with_log(|log| {
                        if let Some(rec) = log.session_mut(id) {
                            rec.batches += 1;
                            rec.samples += n;
                        }
                    });
                    Ok(SubmitOutcome::Accepted(n))
                }
            },
        }
    }

    /// Labels for every submitted sample, in submission order. Calling it again
    /// returns the same labels.
    pub fn finalize_session(&self, id: SessionId) -> Result<Vec<u32>> {
        let batches = {
            let mut sessions = self.sessions.lock().expect("sessions poisoned");
            match sessions.get_mut(&id) {
                None => return Err(Error::Protocol(format!("unknown session {id}"))),
                Some(State::Finalized(labels)) => return Ok(labels.clone()),
                Some(State::Open(batches)) if batches.iter().all(ImageTensor::is_empty) => {
                    return Err(Error::Protocol(format!("session {id} has no samples")))
                }
                Some(State::Open(batches)) => std::mem::take(batches),
            }
        };
        let labels = self.label_all(&batches);
        let mut sessions = self.sessions.lock().expect("sessions poisoned");
        match labels {
            Ok(labels) => {
                sessions.insert(id, State::Finalized(labels.clone()));
                drop(sessions);
                self.ensemble.with_log(|log| {
                    if let Some(rec) = log.session_mut(id) {
                        rec.finalized = true;
                    }
                });
                Ok(labels)
            }
            Err(e) => {
                sessions.insert(id, State::Open(batches));
                Err(e)
            }
        }
    }

    /// Sorts samples by content digest so the answer depends only on the
    /// multiset of submitted images, then refines and takes the argmax.
    fn label_all(&self, batches: &[ImageTensor]) -> Result<Vec<u32>> {
        let refs: Vec<&ImageTensor> = batches.iter().collect();
        let all = ImageTensor::concat(&refs)?;
        let digests = all.content_digests();
        let mut order: Vec<usize> = (0..all.len()).collect();
        order.sort_by(|&a, &b| digests[a].cmp(&digests[b]).then(a.cmp(&b)));
        if let GuardDecision::Reject(ids) = self.ensemble.guard_digests(&digests) {
            self.ensemble.with_log(|log| log.violations_accepted += 1);
            return Err(Error::BoundaryViolation { ids });
        }
        let sorted = all.select(&order);
        let refined = depict_refine(&self.ensemble.unguarded_confidence(&sorted)?)?;
        let sorted_labels = refined.argmax();
        let mut labels = vec![0u32; all.len()];
        for (pos, &original) in order.iter().enumerate() {
            labels[original] = sorted_labels[pos];
        }
        Ok(labels)
    }
}

/// What the target side sees of an oracle, in-process or remote.
pub trait OracleClient: Send + Sync {
    fn open(&self) -> Result<SessionId>;

    fn submit(&self, session: SessionId, images: &ImageTensor) -> Result<SubmitOutcome>;

    fn finalize(&self, session: SessionId) -> Result<Vec<u32>>;

    /// One full session over `images`, submitted in chunks of `batch_size`.
    /// Any rejected chunk aborts with [`Error::BoundaryViolation`].
    fn query_session(&self, images: &ImageTensor, batch_size: usize) -> Result<Vec<u32>> {
        let session = self.open()?;
        let step = batch_size.max(1);
        let mut start = 0;
        while start < images.len() {
            let end = (start + step).min(images.len());
            if let SubmitOutcome::Rejected(ids) = self.submit(session, &images.slice(start, end))? {
                return Err(Error::BoundaryViolation { ids });
            }
            start = end;
        }
        self.finalize(session)
    }
}

impl OracleClient for OracleService {
    fn open(&self) -> Result<SessionId> {
        Ok(self.open_session())
    }

    fn submit(&self, session: SessionId, images: &ImageTensor) -> Result<SubmitOutcome> {
        self.submit_batch(session, images.clone())
    }

    fn finalize(&self, session: SessionId) -> Result<Vec<u32>> {
        self.finalize_session(session)
    }
}

impl<C: OracleClient + ?Sized> OracleClient for Arc<C> {
    fn open(&self) -> Result<SessionId> {
        (**self).open()
    }

    fn submit(&self, session: SessionId, images: &ImageTensor) -> Result<SubmitOutcome> {
        (**self).submit(session, images)
    }

    fn finalize(&self, session: SessionId) -> Result<Vec<u32>> {
        (**self).finalize(session)
    }
}

impl<C: OracleClient + ?Sized> OracleClient for Box<C> {
    fn open(&self) -> Result<SessionId> {
        (**self).open()
    }

    fn submit(&self, session: SessionId, images: &ImageTensor) -> Result<SubmitOutcome> {
        (**self).submit(session, images)
    }

    fn finalize(&self, session: SessionId) -> Result<Vec<u32>> {
        (**self).finalize(session)
    }
}
