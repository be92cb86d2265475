//! Task and annotator state, mutated only by applying [`Record`]s.
//!
//! Every mutation is first validated against the current state and then
//! applied; the service logs a record between those two steps. Replaying a
//! log through the same path rebuilds the state it was written from.

use std::collections::{BTreeMap, BTreeSet};

use sarcasm_core::corpus::Label;
use serde::{Deserialize, Serialize};

use crate::protocol::{resolve_majority, AnnLabel, OnboardingGrade};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Worker,
    Expert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Primary,
    Onboarding,
    DoubleCheck,
    Expert,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Unassigned,
    Assigned,
    Labeled,
    Escalated,
    Resolved,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertVote {
    pub annotator_id: String,
    pub label: AnnLabel,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub task_id: String,
    pub sample_id: String,
    pub kind: TaskKind,
    pub state: TaskState,
    /// Who holds the task now. For escalated tasks this is the expert
    /// currently voting.
    pub assignee: Option<String>,
    /// Annotator and answer of the single worker label.
    pub labeled_by: Option<String>,
    pub label: Option<AnnLabel>,
    pub expert_votes: Vec<ExpertVote>,
    /// Binary outcome once known: the worker's label, or the expert majority.
    pub final_label: Option<Label>,
    /// For double-check tasks, the primary task being re-checked.
    pub parent_task: Option<String>,
}

impl AnnotationTask {
    fn new(
        task_id: String,
        sample_id: String,
        kind: TaskKind,
        parent_task: Option<String>,
    ) -> AnnotationTask {
        AnnotationTask {
            task_id,
            sample_id,
            kind,
            state: TaskState::Unassigned,
            assignee: None,
            labeled_by: None,
            label: None,
            expert_votes: Vec::new(),
            final_label: None,
            parent_task,
        }
    }

    fn touched_by(&self, annotator: &str) -> bool {
        self.labeled_by.as_deref() == Some(annotator)
            || self
                .expert_votes
                .iter()
                .any(|v| v.annotator_id == annotator)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProfile {
    pub annotator_id: String,
    pub role: Role,
    pub onboarding_passed: bool,
    /// `None` until the onboarding answers are graded.
    pub onboarding_score: Option<f64>,
}

/// One submitted label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationEvent {
    pub task_id: String,
    pub annotator_id: String,
    pub label: AnnLabel,
    /// Milliseconds since the Unix epoch.
    pub timestamp: u64,
}

/// One line of the event log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Register {
        annotator_id: String,
        role: Role,
        timestamp: u64,
    },
    Onboarding {
        annotator_id: String,
        correct: usize,
        total: usize,
        timestamp: u64,
    },
    Assign {
        task_id: String,
        annotator_id: String,
        timestamp: u64,
    },
    Label(AnnotationEvent),
    DoubleCheck {
        annotator_id: String,
        /// Primary tasks to re-check, one new task each.
        parents: Vec<String>,
        seed: u64,
        timestamp: u64,
    },
}

pub fn primary_task_id(index: usize) -> String {
    format!("task-{index:06}")
}

pub fn double_check_task_id(parent: &str) -> String {
    format!("dc-{parent}")
}

/// Serializable view of everything the log determines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub tasks: Vec<AnnotationTask>,
    pub annotators: Vec<AnnotatorProfile>,
    pub events: Vec<AnnotationEvent>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct State {
    tasks: BTreeMap<String, AnnotationTask>,
    profiles: BTreeMap<String, AnnotatorProfile>,
    events: Vec<AnnotationEvent>,
    unassigned_primary: BTreeSet<String>,
    /// Escalated tasks no expert is holding.
    open_escalated: BTreeSet<String>,
    /// Annotator → tasks assigned to them and still awaiting their label.
    pending: BTreeMap<String, BTreeSet<String>>,
}

impl State {
    /// One unassigned primary task per candidate sample, ids in order.
    pub fn new(candidates: &[String]) -> State {
        let mut s = State::default();
        for (i, sample) in candidates.iter().enumerate() {
            let id = primary_task_id(i);
            s.unassigned_primary.insert(id.clone());
            s.tasks.insert(
                id.clone(),
                AnnotationTask::new(id, sample.clone(), TaskKind::Primary, None),
            );
        }
        s
    }

    pub fn replay<'a>(
        candidates: &[String],
        records: impl IntoIterator<Item = &'a Record>,
    ) -> Result<State> {
        let mut s = State::new(candidates);
        for (i, r) in records.into_iter().enumerate() {
            s.apply(r).map_err(|e| Error::Log {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(s)
    }

    pub fn task(&self, id: &str) -> Result<&AnnotationTask> {
        self.tasks
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("task {id:?}")))
    }

    pub fn tasks(&self) -> impl Iterator<Item = &AnnotationTask> {
        self.tasks.values()
    }

    pub fn profile(&self, id: &str) -> Result<&AnnotatorProfile> {
        self.profiles
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("annotator {id:?}")))
    }

    pub fn profiles(&self) -> impl Iterator<Item = &AnnotatorProfile> {
        self.profiles.values()
    }

    pub fn events(&self) -> &[AnnotationEvent] {
        &self.events
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            tasks: self.tasks.values().cloned().collect(),
            annotators: self.profiles.values().cloned().collect(),
            events: self.events.clone(),
        }
    }

    /// `(original, re-check)` final labels of every double-checked task where
    /// both are binary.
    pub fn double_check_pairs(&self) -> (Vec<Label>, Vec<Label>) {
        self.tasks
            .values()
            .filter(|t| t.kind == TaskKind::DoubleCheck)
            .filter_map(|t| {
                let parent = &self.tasks[t
                    .parent_task
                    .as_deref()
                    .expect("double-checks have parents")];
                Some((parent.final_label?, t.final_label?))
            })
            .unzip()
    }

    /// The oldest task already assigned to `annotator` and not yet labeled.
    pub fn pending_task(&self, annotator: &str) -> Option<&AnnotationTask> {
        self.pending
            .get(annotator)
            .and_then(|ids| ids.first())
            .map(|id| &self.tasks[id])
    }

    /// Task `annotator` would be given next, without assigning it.
    pub fn candidate_for(&self, annotator: &str) -> Result<Option<&AnnotationTask>> {
        let profile = self.profile(annotator)?;
        Ok(match profile.role {
            Role::Worker => {
                ensure_onboarded(profile)?;
                self.unassigned_primary.first().map(|id| &self.tasks[id])
            }
            Role::Expert => self
                .open_escalated
                .iter()
                .map(|id| &self.tasks[id])
                .find(|t| !t.touched_by(annotator)),
        })
    }

    pub fn apply(&mut self, record: &Record) -> Result<()> {
        self.validate(record)?;
        self.apply_valid(record);
        Ok(())
    }

    pub fn validate(&self, record: &Record) -> Result<()> {
        match record {
            Record::Register { annotator_id, .. } => {
                if annotator_id.trim().is_empty() {
                    return Err(Error::Argument("annotator id must be non-empty".into()));
                }
                if self.profiles.contains_key(annotator_id) {
                    return Err(Error::Conflict(format!(
                        "annotator {annotator_id:?} already exists"
                    )));
                }
            }
            Record::Onboarding {
                annotator_id,
                correct,
                total,
                ..
            } => {
                let p = self.profile(annotator_id)?;
                if p.onboarding_score.is_some() {
                    return Err(Error::Conflict(format!(
                        "{annotator_id:?} has already taken the onboarding test"
                    )));
                }
                OnboardingGrade::from_counts(*correct, *total)?;
            }
            Record::Assign {
                task_id,
                annotator_id,
                ..
            } => {
                let p = self.profile(annotator_id)?;
                let t = self.task(task_id)?;
                if self
                    .pending
                    .get(annotator_id)
                    .is_some_and(|s| !s.is_empty())
                {
                    return Err(Error::Conflict(format!(
                        "{annotator_id:?} still has a task awaiting a label"
                    )));
                }
                match (t.kind, t.state, p.role) {
                    (TaskKind::Primary, TaskState::Unassigned, Role::Worker) => {
                        ensure_onboarded(p)?
                    }
                    (TaskKind::Primary, TaskState::Escalated, Role::Expert) => {
                        if t.assignee.is_some() {
                            return Err(Error::Conflict(format!(
                                "{task_id} is held by another expert"
                            )));
                        }
                        if t.touched_by(annotator_id) {
                            return Err(Error::Conflict(format!(
                                "{annotator_id:?} already labeled {task_id}"
                            )));
                        }
                    }
                    (_, _, Role::Expert) if t.state != TaskState::Escalated => {
                        return Err(Error::Unauthorized(
                            "experts only receive escalated tasks".into(),
                        ))
                    }
                    _ => {
                        return Err(Error::Conflict(format!(
                            "{task_id} is not available ({:?})",
                            t.state
                        )))
                    }
                }
            }
            Record::Label(e) => {
                self.profile(&e.annotator_id)?;
                let t = self.task(&e.task_id)?;
                if t.assignee.as_deref() != Some(e.annotator_id.as_str()) {
                    return Err(Error::Conflict(if t.touched_by(&e.annotator_id) {
                        format!("{:?} already labeled {}", e.annotator_id, e.task_id)
                    } else {
                        format!("{} is not assigned to {:?}", e.task_id, e.annotator_id)
                    }));
                }
                if t.state == TaskState::Escalated && e.label == AnnLabel::Undecided {
                    return Err(Error::Argument(
                        "Undecided is not allowed at the expert stage".into(),
                    ));
                }
            }
            Record::DoubleCheck {
                annotator_id,
                parents,
                ..
            } => {
                let p = self.profile(annotator_id)?;
                if p.role == Role::Worker {
                    ensure_onboarded(p)?;
                }
                let mut seen = BTreeSet::new();
                for parent in parents {
                    let t = self.task(parent)?;
                    if t.kind != TaskKind::Primary || t.final_label.is_none() {
                        return Err(Error::Argument(format!(
                            "{parent} has no final label to double-check"
                        )));
                    }
                    if !seen.insert(parent)
                        || self.tasks.contains_key(&double_check_task_id(parent))
                    {
                        return Err(Error::Conflict(format!(
                            "{parent} is already being double-checked"
                        )));
                    }
                    if t.touched_by(annotator_id) {
                        return Err(Error::Conflict(format!(
                            "{annotator_id:?} labeled {parent}; double-checks need a fresh annotator"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn apply_valid(&mut self, record: &Record) {
        match record {
            Record::Register {
                annotator_id, role, ..
            } => {
                self.profiles.insert(
                    annotator_id.clone(),
                    AnnotatorProfile {
                        annotator_id: annotator_id.clone(),
                        role: *role,
                        onboarding_passed: false,
                        onboarding_score: None,
                    },
                );
            }
            Record::Onboarding {
                annotator_id,
                correct,
                total,
                ..
            } => {
                let grade = OnboardingGrade::from_counts(*correct, *total).expect("validated");
                let p = self.profiles.get_mut(annotator_id).expect("validated");
                p.onboarding_score = Some(grade.score);
                p.onboarding_passed = grade.passed;
            }
            Record::Assign {
                task_id,
                annotator_id,
                ..
            } => {
                let t = self.tasks.get_mut(task_id).expect("validated");
                if t.state == TaskState::Unassigned {
                    t.state = TaskState::Assigned;
                    self.unassigned_primary.remove(task_id);
                } else {
                    self.open_escalated.remove(task_id);
                }
                t.assignee = Some(annotator_id.clone());
                self.pending
                    .entry(annotator_id.clone())
                    .or_default()
                    .insert(task_id.clone());
            }
            Record::Label(e) => {
                let t = self.tasks.get_mut(&e.task_id).expect("validated");
                t.assignee = None;
                if t.state == TaskState::Escalated {
                    t.expert_votes.push(ExpertVote {
                        annotator_id: e.annotator_id.clone(),
                        label: e.label,
                    });
                    if t.expert_votes.len() == 3 {
                        let votes: Vec<AnnLabel> = t.expert_votes.iter().map(|v| v.label).collect();
                        t.final_label = Some(resolve_majority(&votes).expect("votes are binary"));
                        t.state = TaskState::Resolved;
                    } else {
                        self.open_escalated.insert(e.task_id.clone());
                    }
                } else {
                    t.labeled_by = Some(e.annotator_id.clone());
                    t.label = Some(e.label);
                    t.final_label = e.label.binary();
                    if t.kind == TaskKind::Primary && e.label == AnnLabel::Undecided {
                        t.state = TaskState::Escalated;
                        self.open_escalated.insert(e.task_id.clone());
                    } else {
                        t.state = TaskState::Labeled;
                    }
                }
                if let Some(p) = self.pending.get_mut(&e.annotator_id) {
                    p.remove(&e.task_id);
                }
                self.events.push(e.clone());
            }
            Record::DoubleCheck {
                annotator_id,
                parents,
                ..
            } => {
                for parent in parents {
                    let id = double_check_task_id(parent);
                    let mut t = AnnotationTask::new(
                        id.clone(),
                        self.tasks[parent].sample_id.clone(),
                        TaskKind::DoubleCheck,
                        Some(parent.clone()),
                    );
                    t.state = TaskState::Assigned;
                    t.assignee = Some(annotator_id.clone());
                    self.tasks.insert(id.clone(), t);
                    self.pending
                        .entry(annotator_id.clone())
                        .or_default()
                        .insert(id);
                }
            }
        }
    }
}

fn ensure_onboarded(p: &AnnotatorProfile) -> Result<()> {
    if p.role == Role::Worker && !p.onboarding_passed {
        return Err(Error::Unauthorized(format!(
            "{:?} has not passed the onboarding test",
            p.annotator_id
        )));
    }
    Ok(())
}
