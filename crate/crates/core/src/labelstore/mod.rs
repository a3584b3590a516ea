//! The label store: images, classes and annotations with their full lifecycle.
//!
//! Every mutation goes through [`LabelStore::commit`], which validates a
//! [`StoreEvent`], applies it, and appends it to the in-memory event log with
//! a monotonically increasing sequence number. Replaying the log from an empty
//! store reproduces the exact final state; [`LabelStore::replay`] does that.
//!
//! Lifecycle graph enforced here:
//!
//! ```text
//! Seed (terminal)
//! Predicted ──publish──▶ PendingReview ──▶ Approved | BackgroundConfirmed | Republished | Rejected
//! Republished ──publish──▶ PendingReview
//! ```

mod events;
mod formats;
mod persist;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, GeometryError};

pub use events::{HitAudit, LoggedEvent, ReviewOutcome, StoreEvent, TrainingSummary};
pub use formats::{
    AnnotationEntry, BoxDocument, CategoryEntry, DotImportSummary, DotRow, ImageEntry,
    ImportSummary,
};
pub use persist::{read_event_log, write_event_log, PersistentStore, StoreHandle};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("schema violation in record {record}: {reason}")]
    Schema { record: String, reason: String },
    #[error("duplicate annotation id {0}")]
    DuplicateAnnotation(String),
    #[error("image {0} already exists with different metadata")]
    ConflictingImage(String),
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("unknown annotation {0}")]
    UnknownAnnotation(String),
    #[error("unknown classes: {}", .0.join(", "))]
    UnknownClasses(Vec<String>),
    #[error("annotation {ann_id}: illegal transition from {from:?} via {action}")]
    IllegalTransition {
        ann_id: String,
        from: AnnotationState,
        action: &'static str,
    },
    #[error("annotation {0}: {1}")]
    Invariant(String, &'static str),
    #[error("hidden-world documents cannot be imported into a label store")]
    HiddenWorld,
    #[error("class catalog is already defined")]
    CatalogRedefined,
    #[error("event log corrupt at line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("event sequence gap: expected {expected}, found {found}")]
    SequenceGap { expected: u64, found: u64 },
    #[error("store is locked by another writer: {0}")]
    Locked(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// Which part of the workflow an image belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Seed,
    #[default]
    Pool,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub uri: String,
    pub split: Split,
}

impl ImageRecord {
    pub fn extent(&self) -> (f64, f64) {
        (f64::from(self.width), f64::from(self.height))
    }
}

/// A class name, or the reserved background sentinel ("None of the above").
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum ClassLabel {
    Object(String),
    Background,
}

pub const BACKGROUND: &str = "Background";

impl ClassLabel {
    pub fn object(name: impl Into<String>) -> Self {
        ClassLabel::from(name.into())
    }

    pub fn is_background(&self) -> bool {
        matches!(self, ClassLabel::Background)
    }

    pub fn as_str(&self) -> &str {
        match self {
            ClassLabel::Object(s) => s,
            ClassLabel::Background => BACKGROUND,
        }
    }
}

impl From<String> for ClassLabel {
    fn from(s: String) -> Self {
        if s == BACKGROUND {
            ClassLabel::Background
        } else {
            ClassLabel::Object(s)
        }
    }
}

impl From<&str> for ClassLabel {
    fn from(s: &str) -> Self {
        ClassLabel::from(s.to_string())
    }
}

impl From<ClassLabel> for String {
    fn from(c: ClassLabel) -> Self {
        match c {
            ClassLabel::Object(s) => s,
            ClassLabel::Background => BACKGROUND.to_string(),
        }
    }
}

impl fmt::Debug for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ordered object classes. `Background` is implicit and never listed.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassCatalog {
    names: Vec<String>,
}

impl ClassCatalog {
    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut seen = BTreeSet::new();
        for n in &names {
            if n.is_empty() || n == BACKGROUND {
                return Err(StoreError::Schema {
                    record: "categories".into(),
                    reason: format!("class name {n:?} is reserved or empty"),
                });
            }
            if !seen.insert(n) {
                return Err(StoreError::Schema {
                    record: "categories".into(),
                    reason: format!("duplicate class name {n}"),
                });
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn knows(&self, label: &ClassLabel) -> bool {
        match label {
            ClassLabel::Background => true,
            ClassLabel::Object(n) => self.contains(n),
        }
    }

    pub fn labels(&self) -> impl Iterator<Item = ClassLabel> + '_ {
        self.names.iter().map(|n| ClassLabel::Object(n.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotationState {
    Seed,
    Predicted,
    PendingReview,
    Approved,
    BackgroundConfirmed,
    Republished,
    Rejected,
}

impl AnnotationState {
    pub const ALL: [AnnotationState; 7] = [
        AnnotationState::Seed,
        AnnotationState::Predicted,
        AnnotationState::PendingReview,
        AnnotationState::Approved,
        AnnotationState::BackgroundConfirmed,
        AnnotationState::Republished,
        AnnotationState::Rejected,
    ];

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            AnnotationState::Seed
                | AnnotationState::Approved
                | AnnotationState::BackgroundConfirmed
                | AnnotationState::Rejected
        )
    }

    /// Verified object labels usable as positive training samples.
    pub fn is_labeled_object(self) -> bool {
        matches!(self, AnnotationState::Seed | AnnotationState::Approved)
    }

    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.trim().to_ascii_lowercase())).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReviewEvent {
    pub worker_id: String,
    pub submitted_box: BBox,
    pub selected_class: ClassLabel,
    /// `None` when the answer did not come through a gold-gated HIT.
    pub gold_passed: Option<bool>,
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    pub ann_id: String,
    pub image_id: String,
    pub class_label: ClassLabel,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub state: AnnotationState,
    pub score: Option<f64>,
    pub publish_count: u32,
    pub history: Vec<ReviewEvent>,
}

impl Annotation {
    pub fn new(
        ann_id: impl Into<String>,
        image_id: impl Into<String>,
        class_label: ClassLabel,
        bbox: BBox,
        state: AnnotationState,
        score: Option<f64>,
    ) -> Self {
        Self {
            ann_id: ann_id.into(),
            image_id: image_id.into(),
            class_label,
            bbox,
            state,
            score,
            publish_count: 0,
            history: Vec::new(),
        }
    }
}

/// The materialised state of a store; also the snapshot payload.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub catalog: ClassCatalog,
    pub images: BTreeMap<String, ImageRecord>,
    pub annotations: BTreeMap<String, Annotation>,
}

impl Dataset {
    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.get(image_id)
    }

    pub fn annotation(&self, ann_id: &str) -> Option<&Annotation> {
        self.annotations.get(ann_id)
    }

    pub fn annotations_in<'a>(
        &'a self,
        states: &'a [AnnotationState],
    ) -> impl Iterator<Item = &'a Annotation> + 'a {
        self.annotations
            .values()
            .filter(move |a| states.contains(&a.state))
    }

    pub fn annotations_on<'a>(&'a self, image_id: &'a str) -> impl Iterator<Item = &'a Annotation> + 'a {
        self.annotations
            .values()
            .filter(move |a| a.image_id == image_id)
    }

    /// Per-class counts over annotations in `states`. Every catalog class and
    /// `Background` is present, zero-filled.
    pub fn class_counts(&self, states: &[AnnotationState]) -> BTreeMap<ClassLabel, u64> {
        let mut counts: BTreeMap<ClassLabel, u64> =
            self.catalog.labels().map(|c| (c, 0)).collect();
        counts.insert(ClassLabel::Background, 0);
        for a in self.annotations_in(states) {
            *counts.entry(a.class_label.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn state_counts(&self) -> BTreeMap<AnnotationState, u64> {
        let mut counts = BTreeMap::new();
        for a in self.annotations.values() {
            *counts.entry(a.state).or_insert(0) += 1;
        }
        counts
    }
}

/// An event-sourced label store.
#[derive(Debug, Clone)]
pub struct LabelStore {
    data: Dataset,
    log: Vec<LoggedEvent>,
    next_seq: u64,
}

impl Default for LabelStore {
    fn default() -> Self {
        Self {
            data: Dataset::default(),
            log: Vec::new(),
            next_seq: 1,
        }
    }
}

impl LabelStore {
    /// A fresh store whose first event defines the class catalog.
    pub fn new(catalog: ClassCatalog) -> Self {
        let mut store = Self::default();
        store
            .commit(StoreEvent::CatalogDefined {
                classes: catalog.names().to_vec(),
            })
            .expect("catalog on an empty store");
        store
    }

    /// Rebuilds a store by applying `events` in order, checking sequence numbers.
    pub fn replay<I>(events: I) -> Result<Self>
    where
        I: IntoIterator<Item = LoggedEvent>,
    {
        let mut store = Self::default();
        for logged in events {
            store.apply_logged(logged)?;
        }
        Ok(store)
    }

    pub(crate) fn from_snapshot(data: Dataset, last_seq: u64) -> Self {
        Self {
            data,
            log: Vec::new(),
            next_seq: last_seq + 1,
        }
    }

    pub(crate) fn apply_logged(&mut self, logged: LoggedEvent) -> Result<()> {
        if logged.seq != self.next_seq {
            return Err(StoreError::SequenceGap {
                expected: self.next_seq,
                found: logged.seq,
            });
        }
        self.apply(&logged.event)?;
        self.next_seq += 1;
        self.log.push(logged);
        Ok(())
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn catalog(&self) -> &ClassCatalog {
        &self.data.catalog
    }

    /// Events applied to this instance, oldest first.
    pub fn events(&self) -> &[LoggedEvent] {
        &self.log
    }

    pub fn last_seq(&self) -> u64 {
        self.next_seq - 1
    }

    /// Validates and applies one event, appending it to the log. On error the
    /// store is unchanged.
    pub fn commit(&mut self, event: StoreEvent) -> Result<u64> {
        self.apply(&event)?;
        let seq = self.next_seq;
        self.next_seq += 1;
        self.log.push(LoggedEvent { seq, event });
        Ok(seq)
    }

    /// A fresh annotation id with the given prefix.
    pub fn fresh_ann_id(&self, prefix: &str) -> String {
        let mut n = self.data.annotations.len() + 1;
        loop {
            let id = format!("{prefix}-{n:06}");
            if !self.data.annotations.contains_key(&id) {
                return id;
            }
            n += 1;
        }
    }

    pub fn add_image(&mut self, image: ImageRecord) -> Result<()> {
        match self.data.images.get(&image.image_id) {
            Some(existing) if *existing == image => Ok(()),
            _ => self.commit(StoreEvent::ImageAdded { image }).map(|_| ()),
        }
    }

    pub fn add_annotation(&mut self, annotation: Annotation) -> Result<()> {
        self.commit(StoreEvent::AnnotationAdded { annotation })
            .map(|_| ())
    }

    /// Moves a Predicted/Republished annotation into review as part of `hit_id`.
    pub fn publish(&mut self, ann_id: &str, hit_id: &str) -> Result<()> {
        self.commit(StoreEvent::Published {
            ann_id: ann_id.to_string(),
            hit_id: hit_id.to_string(),
        })
        .map(|_| ())
    }

    /// Applies a consensus decision to an annotation under review.
    pub fn apply_review_outcome(
        &mut self,
        ann_id: &str,
        outcome: ReviewOutcome,
        review: ReviewEvent,
    ) -> Result<&Annotation> {
        self.commit(StoreEvent::ReviewApplied {
            ann_id: ann_id.to_string(),
            outcome,
            review,
        })?;
        Ok(&self.data.annotations[ann_id])
    }

    fn apply(&mut self, event: &StoreEvent) -> Result<()> {
        match event {
            StoreEvent::CatalogDefined { classes } => {
                if !self.data.catalog.is_empty() || !self.data.images.is_empty() {
                    return Err(StoreError::CatalogRedefined);
                }
                self.data.catalog = ClassCatalog::new(classes.iter().cloned())?;
            }
            StoreEvent::ImageAdded { image } => {
                if image.width == 0 || image.height == 0 {
                    return Err(StoreError::Schema {
                        record: image.image_id.clone(),
                        reason: "image dimensions must be positive".into(),
                    });
                }
                if self.data.images.contains_key(&image.image_id) {
                    return Err(StoreError::ConflictingImage(image.image_id.clone()));
                }
                self.data
                    .images
                    .insert(image.image_id.clone(), image.clone());
            }
            StoreEvent::AnnotationAdded { annotation } => {
                self.check_new(annotation)?;
                self.data
                    .annotations
                    .insert(annotation.ann_id.clone(), annotation.clone());
            }
            StoreEvent::Published { ann_id, .. } => {
                let ann = self.annotation_mut(ann_id)?;
                match ann.state {
                    AnnotationState::Predicted | AnnotationState::Republished => {
                        ann.state = AnnotationState::PendingReview;
                        ann.publish_count += 1;
                    }
                    // re-publication after the carrying HIT was rejected
                    AnnotationState::PendingReview => {}
                    from => {
                        return Err(StoreError::IllegalTransition {
                            ann_id: ann_id.clone(),
                            from,
                            action: "publish",
                        })
                    }
                }
            }
            StoreEvent::ReviewApplied {
                ann_id,
                outcome,
                review,
            } => {
                if let Some(label) = outcome.class_label() {
                    if !self.data.catalog.knows(label) {
                        return Err(StoreError::UnknownClasses(vec![label.to_string()]));
                    }
                }
                let ann = self.annotation_mut(ann_id)?;
                if ann.state != AnnotationState::PendingReview {
                    return Err(StoreError::IllegalTransition {
                        ann_id: ann_id.clone(),
                        from: ann.state,
                        action: outcome.action(),
                    });
                }
                if ann
                    .history
                    .last()
                    .is_some_and(|last| last.timestamp > review.timestamp)
                {
                    return Err(StoreError::Invariant(
                        ann_id.clone(),
                        "review events must be ordered by timestamp",
                    ));
                }
                match outcome {
                    ReviewOutcome::Finalize { class_label, bbox } => {
                        if class_label.is_background() {
                            ann.state = AnnotationState::BackgroundConfirmed;
                            ann.class_label = ClassLabel::Background;
                        } else {
                            ann.state = AnnotationState::Approved;
                            ann.class_label = class_label.clone();
                            ann.bbox = *bbox;
                        }
                    }
                    ReviewOutcome::Republish { class_label, bbox } => {
                        ann.state = AnnotationState::Republished;
                        if !class_label.is_background() {
                            ann.bbox = *bbox;
                        }
                        ann.class_label = class_label.clone();
                    }
                    ReviewOutcome::Reject { .. } => ann.state = AnnotationState::Rejected,
                }
                ann.history.push(review.clone());
            }
            StoreEvent::HitAudited { .. } | StoreEvent::LoopCommitted { .. } => {}
        }
        Ok(())
    }

    fn check_new(&self, a: &Annotation) -> Result<()> {
        if self.data.annotations.contains_key(&a.ann_id) {
            return Err(StoreError::DuplicateAnnotation(a.ann_id.clone()));
        }
        if !self.data.images.contains_key(&a.image_id) {
            return Err(StoreError::UnknownImage(a.image_id.clone()));
        }
        if !self.data.catalog.knows(&a.class_label) {
            return Err(StoreError::UnknownClasses(vec![a.class_label.to_string()]));
        }
        match a.state {
            AnnotationState::Seed | AnnotationState::Predicted => {}
            _ => {
                return Err(StoreError::Invariant(
                    a.ann_id.clone(),
                    "new annotations must be Seed or Predicted",
                ))
            }
        }
        if a.state == AnnotationState::Seed && a.class_label.is_background() {
            return Err(StoreError::Invariant(
                a.ann_id.clone(),
                "seed annotations cannot be Background",
            ));
        }
        if !a.history.is_empty() || a.publish_count != 0 {
            return Err(StoreError::Invariant(
                a.ann_id.clone(),
                "new annotations carry no review history",
            ));
        }
        if let Some(s) = a.score {
            if !(0.0..=1.0).contains(&s) {
                return Err(StoreError::Invariant(a.ann_id.clone(), "score outside [0, 1]"));
            }
        }
        Ok(())
    }

    fn annotation_mut(&mut self, ann_id: &str) -> Result<&mut Annotation> {
        self.data
            .annotations
            .get_mut(ann_id)
            .ok_or_else(|| StoreError::UnknownAnnotation(ann_id.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn catalog() -> ClassCatalog {
        ClassCatalog::new(["Rockfish", "Starfish", "Sponge"]).unwrap()
    }

    fn image(id: &str) -> ImageRecord {
        ImageRecord {
            image_id: id.into(),
            width: 2448,
            height: 2050,
            uri: format!("file://{id}.png"),
            split: Split::Pool,
        }
    }

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn review(worker: &str, class: &str, t: u64) -> ReviewEvent {
        ReviewEvent {
            worker_id: worker.into(),
            submitted_box: bx(1.0, 1.0, 9.0, 9.0),
            selected_class: ClassLabel::from(class),
            gold_passed: Some(true),
            timestamp: t,
        }
    }

    fn pending_store() -> LabelStore {
        let mut s = LabelStore::new(catalog());
        s.add_image(image("img1")).unwrap();
        s.add_annotation(Annotation::new(
            "p1",
            "img1",
            ClassLabel::object("Rockfish"),
            bx(0.0, 0.0, 10.0, 10.0),
            AnnotationState::Predicted,
            Some(0.7),
        ))
        .unwrap();
        s.publish("p1", "hit-1").unwrap();
        s
    }

    #[test]
    fn background_label_round_trips_through_strings() {
        assert_eq!(ClassLabel::from("Background"), ClassLabel::Background);
        let json = serde_json::to_string(&ClassLabel::Background).unwrap();
        assert_eq!(json, "\"Background\"");
        assert!(ClassCatalog::new(["Rockfish", "Background"]).is_err());
        assert!(ClassCatalog::new(["Rockfish", "Rockfish"]).is_err());
    }

    #[test]
    fn finalize_object_approves_and_replaces_box() {
        let mut s = pending_store();
        let tight = bx(1.0, 2.0, 8.0, 9.0);
        let a = s
            .apply_review_outcome(
                "p1",
                ReviewOutcome::Finalize {
                    class_label: ClassLabel::object("Rockfish"),
                    bbox: tight,
                },
                review("w1", "Rockfish", 5),
            )
            .unwrap();
        assert_eq!(a.state, AnnotationState::Approved);
        assert_eq!(a.bbox, tight);
        assert_eq!(a.history.len(), 1);
    }

    #[test]
    fn republish_takes_worker_class() {
        let mut s = pending_store();
        let a = s
            .apply_review_outcome(
                "p1",
                ReviewOutcome::Republish {
                    class_label: ClassLabel::object("Sponge"),
                    bbox: bx(2.0, 2.0, 9.0, 9.0),
                },
                review("w1", "Sponge", 5),
            )
            .unwrap();
        assert_eq!(a.state, AnnotationState::Republished);
        assert_eq!(a.class_label, ClassLabel::object("Sponge"));
        assert_eq!(a.bbox, bx(2.0, 2.0, 9.0, 9.0));
        s.publish("p1", "hit-2").unwrap();
        assert_eq!(s.dataset().annotation("p1").unwrap().publish_count, 2);
    }

    #[test]
    fn finalize_background_confirms_and_keeps_box() {
        let mut s = pending_store();
        let a = s
            .apply_review_outcome(
                "p1",
                ReviewOutcome::Finalize {
                    class_label: ClassLabel::Background,
                    bbox: bx(3.0, 3.0, 4.0, 4.0),
                },
                review("w1", "Background", 5),
            )
            .unwrap();
        assert_eq!(a.state, AnnotationState::BackgroundConfirmed);
        assert_eq!(a.class_label, ClassLabel::Background);
        assert_eq!(a.bbox, bx(0.0, 0.0, 10.0, 10.0));
    }

    #[test]
    fn illegal_transition_leaves_store_unchanged() {
        let mut s = pending_store();
        s.apply_review_outcome(
            "p1",
            ReviewOutcome::Reject {
                reason: "too many republishes".into(),
            },
            review("w1", "Rockfish", 1),
        )
        .unwrap();
        let before = s.dataset().clone();
        let n = s.events().len();
        let err = s
            .apply_review_outcome(
                "p1",
                ReviewOutcome::Finalize {
                    class_label: ClassLabel::object("Rockfish"),
                    bbox: bx(0.0, 0.0, 1.0, 1.0),
                },
                review("w2", "Rockfish", 2),
            )
            .unwrap_err();
        assert!(matches!(err, StoreError::IllegalTransition { .. }));
        assert_eq!(s.dataset(), &before);
        assert_eq!(s.events().len(), n);
        // rejected records stay queryable
        assert_eq!(
            s.dataset().annotation("p1").unwrap().state,
            AnnotationState::Rejected
        );
    }

    #[test]
    fn seed_cannot_be_reviewed_or_background() {
        let mut s = LabelStore::new(catalog());
        s.add_image(image("img1")).unwrap();
        let bad = Annotation::new(
            "s1",
            "img1",
            ClassLabel::Background,
            bx(0.0, 0.0, 1.0, 1.0),
            AnnotationState::Seed,
            None,
        );
        assert!(s.add_annotation(bad).is_err());
        let ok = Annotation::new(
            "s1",
            "img1",
            ClassLabel::object("Sponge"),
            bx(0.0, 0.0, 1.0, 1.0),
            AnnotationState::Seed,
            None,
        );
        s.add_annotation(ok.clone()).unwrap();
        assert!(matches!(
            s.add_annotation(ok),
            Err(StoreError::DuplicateAnnotation(_))
        ));
        assert!(s.publish("s1", "h").is_err());
    }

    #[test]
    fn review_timestamps_must_not_go_backwards() {
        let mut s = pending_store();
        s.apply_review_outcome(
            "p1",
            ReviewOutcome::Republish {
                class_label: ClassLabel::object("Sponge"),
                bbox: bx(0.0, 0.0, 5.0, 5.0),
            },
            review("w1", "Sponge", 10),
        )
        .unwrap();
        s.publish("p1", "h2").unwrap();
        let err = s
            .apply_review_outcome(
                "p1",
                ReviewOutcome::Finalize {
                    class_label: ClassLabel::object("Sponge"),
                    bbox: bx(0.0, 0.0, 5.0, 5.0),
                },
                review("w2", "Sponge", 3),
            )
            .unwrap_err();
        assert!(matches!(err, StoreError::Invariant(..)));
    }

    #[test]
    fn replay_reproduces_state() {
        let mut s = pending_store();
        s.apply_review_outcome(
            "p1",
            ReviewOutcome::Finalize {
                class_label: ClassLabel::object("Rockfish"),
                bbox: bx(1.0, 1.0, 9.0, 9.0),
            },
            review("w1", "Rockfish", 4),
        )
        .unwrap();
        let rebuilt = LabelStore::replay(s.events().to_vec()).unwrap();
        assert_eq!(rebuilt.dataset(), s.dataset());
        assert_eq!(rebuilt.last_seq(), s.last_seq());

        let mut gap = s.events().to_vec();
        gap.remove(2);
        assert!(matches!(
            LabelStore::replay(gap),
            Err(StoreError::SequenceGap { .. })
        ));
    }

    #[test]
    fn class_counts_on_fresh_store_are_zero_filled() {
        let s = LabelStore::new(catalog());
        let counts = s
            .dataset()
            .class_counts(&[AnnotationState::BackgroundConfirmed]);
        assert_eq!(counts.len(), 4);
        assert!(counts.values().all(|&c| c == 0));
    }

    #[test]
    fn state_names_parse() {
        assert_eq!(
            AnnotationState::parse("Approved"),
            Some(AnnotationState::Approved)
        );
        assert_eq!(
            AnnotationState::parse("background_confirmed"),
            Some(AnnotationState::BackgroundConfirmed)
        );
        assert_eq!(AnnotationState::parse("maybe"), None);
    }
}
