//! Review queue state machine. Items move pending -> claimed -> done, with
//! expired claims falling back to pending. Claim and submit run under one
//! lock, so each is an atomic compare-and-set on the item status.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use peifg_core::datagen::{apply_filter_decision, export_dataset, DatasetSplit, FilterDecision, FilterOutcome};
use peifg_core::sample::{BloomLevel, Feedback, Sample};
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::error::{ServiceError, ServiceResult};
use crate::journal::{Entry, Journal};

/// Fifteen minutes.
pub const DEFAULT_LEASE_MS: u64 = 15 * 60 * 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pending,
    Claimed,
    Done,
}

/// What an annotator sees for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub id: String,
    pub image_url: String,
    pub question: String,
    pub answer: String,
    pub level: Option<BloomLevel>,
    pub distractors: Vec<String>,
    pub feedbacks: Vec<Feedback>,
    pub status: Status,
    pub annotator: Option<String>,
    pub lease_expires_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub item_id: String,
    pub status: Status,
    pub retained: usize,
    pub excluded: bool,
}

// One slot per item, so the variant size gap does not matter.
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
enum State {
    Pending,
    Claimed { annotator: String, expires_ms: u64 },
    Done { decision: FilterDecision, outcome: FilterOutcome },
}

#[derive(Debug, Clone)]
struct Slot {
    sample: Sample,
    state: State,
}

#[derive(Debug)]
struct Inner {
    order: Vec<String>,
    slots: HashMap<String, Slot>,
    journal: Journal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub split: DatasetSplit,
    /// Decision trail per exported sample id.
    pub trails: HashMap<String, Vec<String>>,
    /// Done items left out because nothing survived filtering.
    pub excluded: Vec<String>,
}

pub struct ReviewQueue {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
    lease_ms: u64,
}

impl ReviewQueue {
    /// Opens the journal at `path` and rebuilds state from it. Claims are
    /// not journaled, so every non-done item restarts as pending.
    pub fn open(path: &Path, clock: Arc<dyn Clock>, lease_ms: u64) -> ServiceResult<Self> {
        let (journal, entries) = Journal::open(path)?;
        let mut inner = Inner { order: Vec::new(), slots: HashMap::new(), journal };
        for e in entries {
            match e {
                Entry::Item { sample } => {
                    if !inner.slots.contains_key(&sample.id) {
                        inner.order.push(sample.id.clone());
                        inner.slots.insert(sample.id.clone(), Slot { sample, state: State::Pending });
                    }
                }
                Entry::Decision { item_id, decision, outcome } => {
                    let slot = inner.slots.get_mut(&item_id).ok_or_else(|| ServiceError::Journal {
                        line: 0,
                        message: format!("decision for unknown item {item_id}"),
                    })?;
                    slot.state = State::Done { decision, outcome };
                }
            }
        }
        Ok(Self { inner: Mutex::new(inner), clock, lease_ms })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Adds samples not already queued. Returns how many were new.
    pub fn add(&self, samples: Vec<Sample>) -> ServiceResult<usize> {
        let mut inner = self.lock();
        let mut added = 0;
        for sample in samples {
            if sample.id.trim().is_empty() {
                return Err(ServiceError::Validation { field: "id".into(), message: "must be non-empty".into() });
            }
            if inner.slots.contains_key(&sample.id) {
                continue;
            }
            inner.journal.append(&Entry::Item { sample: sample.clone() })?;
            inner.order.push(sample.id.clone());
            inner.slots.insert(sample.id.clone(), Slot { sample, state: State::Pending });
            added += 1;
        }
        Ok(added)
    }

    fn expire(&self, inner: &mut Inner) {
        let now = self.clock.now_ms();
        for slot in inner.slots.values_mut() {
            if matches!(slot.state, State::Claimed { expires_ms, .. } if expires_ms <= now) {
                slot.state = State::Pending;
            }
        }
    }

    fn view(id: &str, slot: &Slot) -> QueueItem {
        let (status, annotator, lease) = match &slot.state {
            State::Pending => (Status::Pending, None, None),
            State::Claimed { annotator, expires_ms } => (Status::Claimed, Some(annotator.clone()), Some(*expires_ms)),
            State::Done { decision, .. } => (Status::Done, Some(decision.annotator.clone()), None),
        };
        QueueItem {
            id: id.to_string(),
            image_url: format!("/api/items/{id}/image"),
            question: slot.sample.question.clone(),
            answer: slot.sample.answer.clone(),
            level: slot.sample.level,
            distractors: slot.sample.distractors.clone(),
            feedbacks: slot.sample.feedbacks.clone(),
            status,
            annotator,
            lease_expires_ms: lease,
        }
    }

    /// Claims the first pending item for `annotator`. An annotator already
    /// holding a live claim gets that item back with a renewed lease.
    pub fn next_item(&self, annotator: &str) -> ServiceResult<Option<QueueItem>> {
        if annotator.trim().is_empty() {
            return Err(ServiceError::Validation { field: "annotator".into(), message: "must be non-empty".into() });
        }
        let mut guard = self.lock();
        let inner = &mut *guard;
        self.expire(inner);
        let expires_ms = self.clock.now_ms() + self.lease_ms;
        let held = inner
            .order
            .iter()
            .find(|id| matches!(&inner.slots[*id].state, State::Claimed { annotator: a, .. } if a == annotator));
        let pick = held.or_else(|| inner.order.iter().find(|id| matches!(inner.slots[*id].state, State::Pending)));
        let Some(id) = pick.cloned() else { return Ok(None) };
        let slot = inner.slots.get_mut(&id).expect("ordered id exists");
        slot.state = State::Claimed { annotator: annotator.to_string(), expires_ms };
        Ok(Some(Self::view(&id, slot)))
    }

    pub fn item(&self, id: &str) -> ServiceResult<QueueItem> {
        let mut inner = self.lock();
        self.expire(&mut inner);
        let slot = inner.slots.get(id).ok_or_else(|| ServiceError::NotFound(format!("item {id}")))?;
        Ok(Self::view(id, slot))
    }

    pub fn sample(&self, id: &str) -> ServiceResult<Sample> {
        let inner = self.lock();
        inner.slots.get(id).map(|s| s.sample.clone()).ok_or_else(|| ServiceError::NotFound(format!("item {id}")))
    }

    /// Records a decision from the annotator holding the claim. Resending
    /// the identical decision after success returns the same acknowledgement.
    pub fn submit(&self, item_id: &str, decision: FilterDecision) -> ServiceResult<Ack> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        self.expire(inner);
        let slot = inner.slots.get(item_id).ok_or_else(|| ServiceError::NotFound(format!("item {item_id}")))?;
        let ack = |outcome: &FilterOutcome| Ack {
            item_id: item_id.to_string(),
            status: Status::Done,
            retained: outcome.sample.distractors.len(),
            excluded: outcome.excluded,
        };
        match &slot.state {
            State::Done { decision: prior, outcome } => {
                return if *prior == decision {
                    Ok(ack(outcome))
                } else {
                    Err(ServiceError::Conflict(format!("item {item_id} already has a different decision")))
                };
            }
            State::Pending => {
                return Err(ServiceError::Conflict(format!("item {item_id} is not claimed")));
            }
            State::Claimed { annotator, .. } if *annotator != decision.annotator => {
                return Err(ServiceError::Conflict(format!("item {item_id} is claimed by another annotator")));
            }
            State::Claimed { .. } => {}
        }
        let outcome = apply_filter_decision(&slot.sample, &decision)?;
        inner.journal.append(&Entry::Decision {
            item_id: item_id.to_string(),
            decision: decision.clone(),
            outcome: outcome.clone(),
        })?;
        let result = ack(&outcome);
        inner.slots.get_mut(item_id).expect("checked above").state = State::Done { decision, outcome };
        Ok(result)
    }

    pub fn counts(&self) -> HashMap<Status, usize> {
        let mut inner = self.lock();
        self.expire(&mut inner);
        let mut out = HashMap::new();
        for slot in inner.slots.values() {
            let s = match slot.state {
                State::Pending => Status::Pending,
                State::Claimed { .. } => Status::Claimed,
                State::Done { .. } => Status::Done,
            };
            *out.entry(s).or_insert(0) += 1;
        }
        out
    }

    /// Filters every done item and splits the survivors.
    pub fn export(&self, ratio: f64, seed: u64) -> ServiceResult<ExportSummary> {
        let outcomes: Vec<(String, FilterOutcome)> = {
            let inner = self.lock();
            inner
                .order
                .iter()
                .filter_map(|id| match &inner.slots[id].state {
                    State::Done { outcome, .. } => Some((id.clone(), outcome.clone())),
                    _ => None,
                })
                .collect()
        };
        if outcomes.is_empty() {
            return Err(ServiceError::NothingDone);
        }
        let mut trails = HashMap::new();
        let mut excluded = Vec::new();
        let mut kept = Vec::new();
        for (id, o) in outcomes {
            if o.excluded {
                excluded.push(id);
            } else {
                trails.insert(id, o.trail);
                kept.push(o.sample);
            }
        }
        if kept.is_empty() {
            return Err(ServiceError::Conflict("every decided item was excluded".into()));
        }
        Ok(ExportSummary { split: export_dataset(&kept, ratio, seed)?, trails, excluded })
    }

    /// Rewrites the journal as one entry per item plus one per decision.
    pub fn compact(&self) -> ServiceResult<()> {
        let mut guard = self.lock();
        let inner = &mut *guard;
        let mut entries = Vec::new();
        for id in &inner.order {
            entries.push(Entry::Item { sample: inner.slots[id].sample.clone() });
        }
        for id in &inner.order {
            if let State::Done { decision, outcome } = &inner.slots[id].state {
                entries.push(Entry::Decision {
                    item_id: id.clone(),
                    decision: decision.clone(),
                    outcome: outcome.clone(),
                });
            }
        }
        inner.journal.compact(&entries)
    }
}
