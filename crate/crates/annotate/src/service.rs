use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use parking_lot::RwLock;
use sarcasm_core::corpus::{save_corpus, Corpus, Label, Split};
use serde::{Deserialize, Serialize};

use crate::protocol::{
    cohen_kappa, export_corrected, grade_onboarding, sample_double_check, select_candidates,
    AnnLabel, KappaReport, OnboardingGrade,
};
use crate::state::{
    AnnotationEvent, AnnotationTask, AnnotatorProfile, Record, Role, Snapshot, State, TaskKind,
    TaskState,
};
use crate::{Error, Result};

/// One gold onboarding question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnboardingItem {
    pub item_id: String,
    pub text: String,
    pub image_ref: String,
    pub label: AnnLabel,
}

/// Reads gold onboarding items, one JSON object per line.
pub fn load_gold(path: impl AsRef<Path>) -> Result<Vec<OnboardingItem>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item: OnboardingItem = serde_json::from_str(&line)
            .map_err(|e| Error::Argument(format!("{}:{}: {e}", path.display(), i + 1)))?;
        if item.label == AnnLabel::Undecided {
            return Err(Error::Argument(format!(
                "gold item {:?} is Undecided",
                item.item_id
            )));
        }
        items.push(item);
    }
    if items.is_empty() {
        return Err(Error::Argument(format!(
            "{} has no onboarding items",
            path.display()
        )));
    }
    Ok(items)
}

/// κ between each double-checked task's final label and the re-check,
/// over pairs where both are binary.
pub fn kappa_of(state: &State) -> Result<KappaReport> {
    let (a, b) = state.double_check_pairs();
    if a.is_empty() {
        return Err(Error::Conflict(
            "no completed double-check pairs yet".into(),
        ));
    }
    cohen_kappa(&a, &b)
}

/// Reads an event log written by the service.
pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(format!("event log {}", path.display())));
    }
    EventLog::read(path)
}

/// Append-only JSON-lines record log.
struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    fn read(path: &Path) -> Result<Vec<Record>> {
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(path, e)),
        };
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(|e| Error::Log {
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Ok(records)
    }

    fn open(path: &Path) -> Result<EventLog> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(EventLog {
            path: path.to_owned(),
            file,
        })
    }

    fn append(&mut self, record: &Record) -> Result<()> {
        let mut line = serde_json::to_string(record).expect("records serialize");
        line.push('\n');
        self.file
            .write_all(line.as_bytes())
            .and_then(|()| self.file.flush())
            .map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Clone, Debug, Default)]
pub struct ServiceConfig {
    /// Event log; replayed on start when it exists.
    pub log_path: Option<PathBuf>,
    /// Where `export` writes the corrected corpus.
    pub export_path: Option<PathBuf>,
    /// Where `write_snapshot` writes task states.
    pub snapshot_path: Option<PathBuf>,
}

type Clock = Box<dyn Fn() -> u64 + Send + Sync>;

fn wall_clock() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

struct Inner {
    state: State,
    log: Option<EventLog>,
}

/// What an annotator sees for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task_id: String,
    pub sample_id: String,
    pub kind: TaskKind,
    pub text: String,
    pub image_ref: String,
    pub image_url: String,
    /// Answers accepted for this task.
    pub labels: Vec<AnnLabel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnboardingView {
    pub item_id: String,
    pub text: String,
    pub image_ref: String,
    pub image_url: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorView {
    #[serde(flatten)]
    pub profile: AnnotatorProfile,
    pub labels_submitted: usize,
    pub pending_task: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub primary_total: usize,
    pub primary_by_state: BTreeMap<TaskState, usize>,
    /// Primary tasks with a binary final label.
    pub finalized: usize,
    pub double_check_total: usize,
    pub double_check_labeled: usize,
    pub events: usize,
    pub annotators: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub path: Option<PathBuf>,
    pub candidates: usize,
    /// Former negatives re-labeled sarcastic.
    pub flipped: Vec<String>,
    pub positives_before: BTreeMap<Split, usize>,
    pub positives_after: BTreeMap<Split, usize>,
}

/// The annotation service. Mutations go through a single write lock, which
/// also guards the event log, so each record is logged in the order it is
/// applied.
pub struct Service {
    corpus: Corpus,
    candidates: Vec<String>,
    gold: Vec<OnboardingItem>,
    config: ServiceConfig,
    inner: RwLock<Inner>,
    clock: Clock,
}

impl Service {
    pub fn open(
        corpus: Corpus,
        gold: Vec<OnboardingItem>,
        config: ServiceConfig,
    ) -> Result<Service> {
        Service::with_clock(corpus, gold, config, Box::new(wall_clock))
    }

    pub fn with_clock(
        corpus: Corpus,
        gold: Vec<OnboardingItem>,
        config: ServiceConfig,
        clock: Clock,
    ) -> Result<Service> {
        if gold.is_empty() {
            return Err(Error::Argument(
                "onboarding needs at least one gold item".into(),
            ));
        }
        let candidates = select_candidates(&corpus);
        let (state, log) = match &config.log_path {
            Some(path) => {
                let records = EventLog::read(path)?;
                (
                    State::replay(&candidates, &records)?,
                    Some(EventLog::open(path)?),
                )
            }
            None => (State::new(&candidates), None),
        };
        Ok(Service {
            corpus,
            candidates,
            gold,
            config,
            inner: RwLock::new(Inner { state, log }),
            clock,
        })
    }

    pub fn candidates(&self) -> &[String] {
        &self.candidates
    }

    fn commit(&self, inner: &mut Inner, record: Record) -> Result<()> {
        inner.state.validate(&record)?;
        if let Some(log) = &mut inner.log {
            log.append(&record)?;
        }
        inner.state.apply(&record)
    }

    pub fn register(&self, annotator_id: &str, role: Role) -> Result<AnnotatorProfile> {
        let mut inner = self.inner.write();
        let record = Record::Register {
            annotator_id: annotator_id.to_owned(),
            role,
            timestamp: (self.clock)(),
        };
        self.commit(&mut inner, record)?;
        Ok(inner.state.profile(annotator_id)?.clone())
    }

    pub fn annotator(&self, annotator_id: &str) -> Result<AnnotatorView> {
        let inner = self.inner.read();
        let profile = inner.state.profile(annotator_id)?.clone();
        Ok(AnnotatorView {
            labels_submitted: inner
                .state
                .events()
                .iter()
                .filter(|e| e.annotator_id == annotator_id)
                .count(),
            pending_task: inner
                .state
                .pending_task(annotator_id)
                .map(|t| t.task_id.clone()),
            profile,
        })
    }

    pub fn onboarding_batch(&self) -> Vec<OnboardingView> {
        self.gold
            .iter()
            .map(|g| OnboardingView {
                item_id: g.item_id.clone(),
                text: g.text.clone(),
                image_ref: g.image_ref.clone(),
                image_url: image_url(&g.image_ref),
            })
            .collect()
    }

    /// Grades answers given in onboarding-batch order. One attempt per annotator.
    pub fn submit_onboarding(
        &self,
        annotator_id: &str,
        answers: &[AnnLabel],
    ) -> Result<OnboardingGrade> {
        let gold: Vec<AnnLabel> = self.gold.iter().map(|g| g.label).collect();
        let grade = grade_onboarding(answers, &gold)?;
        let mut inner = self.inner.write();
        let record = Record::Onboarding {
            annotator_id: annotator_id.to_owned(),
            correct: grade.correct,
            total: grade.total,
            timestamp: (self.clock)(),
        };
        self.commit(&mut inner, record)?;
        Ok(grade)
    }

    fn view(&self, task: &AnnotationTask) -> TaskView {
        let sample = self
            .corpus
            .get(&task.sample_id)
            .expect("tasks come from the corpus");
        let (kind, labels) = if task.state == TaskState::Escalated {
            (
                TaskKind::Expert,
                vec![AnnLabel::Sarcasm, AnnLabel::NotSarcasm],
            )
        } else {
            (task.kind, AnnLabel::ALL.to_vec())
        };
        TaskView {
            task_id: task.task_id.clone(),
            sample_id: task.sample_id.clone(),
            kind,
            text: sample.text.clone(),
            image_ref: sample.image_ref.clone(),
            image_url: image_url(&sample.image_ref),
            labels,
        }
    }

    /// The caller's pending task if any, otherwise atomically assigns the
    /// next suitable task. `None` when nothing is left for this annotator.
    pub fn next_task(&self, annotator_id: &str) -> Result<Option<TaskView>> {
        let mut inner = self.inner.write();
        if let Some(t) = inner.state.pending_task(annotator_id) {
            return Ok(Some(self.view(t)));
        }
        let Some(task_id) = inner
            .state
            .candidate_for(annotator_id)?
            .map(|t| t.task_id.clone())
        else {
            return Ok(None);
        };
        let record = Record::Assign {
            task_id: task_id.clone(),
            annotator_id: annotator_id.to_owned(),
            timestamp: (self.clock)(),
        };
        self.commit(&mut inner, record)?;
        Ok(Some(self.view(inner.state.task(&task_id)?)))
    }

    pub fn submit_label(
        &self,
        annotator_id: &str,
        task_id: &str,
        label: AnnLabel,
    ) -> Result<(AnnotationEvent, TaskState)> {
        let mut inner = self.inner.write();
        let event = AnnotationEvent {
            task_id: task_id.to_owned(),
            annotator_id: annotator_id.to_owned(),
            label,
            timestamp: (self.clock)(),
        };
        self.commit(&mut inner, Record::Label(event.clone()))?;
        let state = inner.state.task(task_id)?.state;
        Ok((event, state))
    }

    /// Samples `n` finalized primary tasks and assigns a double-check copy
    /// of each to `annotator_id`, who must not have labeled any of them.
    pub fn start_double_check(
        &self,
        annotator_id: &str,
        n: usize,
        seed: u64,
    ) -> Result<Vec<String>> {
        let mut inner = self.inner.write();
        let population: Vec<String> = inner
            .state
            .tasks()
            .filter(|t| t.kind == TaskKind::Primary && t.final_label.is_some())
            .map(|t| t.task_id.clone())
            .collect();
        let parents = sample_double_check(&population, n, seed)?;
        let record = Record::DoubleCheck {
            annotator_id: annotator_id.to_owned(),
            parents: parents.clone(),
            seed,
            timestamp: (self.clock)(),
        };
        self.commit(&mut inner, record)?;
        Ok(parents
            .iter()
            .map(|p| crate::state::double_check_task_id(p))
            .collect())
    }

    /// κ between each double-checked task's final label and the re-check,
    /// over pairs where both are binary.
    pub fn kappa(&self) -> Result<KappaReport> {
        kappa_of(&self.inner.read().state)
    }

    pub fn progress(&self) -> Progress {
        let inner = self.inner.read();
        let mut by_state = BTreeMap::new();
        let (mut primary, mut finalized, mut dc, mut dc_done) = (0, 0, 0, 0);
        for t in inner.state.tasks() {
            match t.kind {
                TaskKind::Primary => {
                    primary += 1;
                    *by_state.entry(t.state).or_insert(0) += 1;
                    finalized += usize::from(t.final_label.is_some());
                }
                TaskKind::DoubleCheck => {
                    dc += 1;
                    dc_done += usize::from(t.state == TaskState::Labeled);
                }
                _ => {}
            }
        }
        Progress {
            primary_total: primary,
            primary_by_state: by_state,
            finalized,
            double_check_total: dc,
            double_check_labeled: dc_done,
            events: inner.state.events().len(),
            annotators: inner.state.profiles().count(),
        }
    }

    /// Final labels by sample id; fails listing every unfinished task.
    pub fn resolved_labels(&self) -> Result<BTreeMap<String, Label>> {
        let inner = self.inner.read();
        let mut resolved = BTreeMap::new();
        let mut open = Vec::new();
        for t in inner.state.tasks().filter(|t| t.kind == TaskKind::Primary) {
            match t.final_label {
                Some(l) => {
                    resolved.insert(t.sample_id.clone(), l);
                }
                None => open.push(t.task_id.clone()),
            }
        }
        if !open.is_empty() {
            return Err(Error::Unresolved(open));
        }
        Ok(resolved)
    }

    /// Builds the corrected corpus and writes it to the configured export path.
    pub fn export(&self) -> Result<(Corpus, ExportSummary)> {
        let resolved = self.resolved_labels()?;
        let corrected = export_corrected(&self.corpus, &resolved)?;
        if let Some(path) = &self.config.export_path {
            save_corpus(&corrected, path)?;
        }
        self.write_snapshot()?;
        let flipped = resolved
            .iter()
            .filter(|(_, l)| l.is_positive())
            .map(|(id, _)| id.clone())
            .collect();
        let summary = ExportSummary {
            path: self.config.export_path.clone(),
            candidates: self.candidates.len(),
            flipped,
            positives_before: positives_by_split(&self.corpus),
            positives_after: positives_by_split(&corrected),
        };
        Ok((corrected, summary))
    }

    pub fn snapshot(&self) -> Snapshot {
        self.inner.read().state.snapshot()
    }

    /// Writes the snapshot to the configured path, if any, via a rename.
    pub fn write_snapshot(&self) -> Result<()> {
        let Some(path) = &self.config.snapshot_path else {
            return Ok(());
        };
        let json = serde_json::to_vec_pretty(&self.snapshot()).expect("snapshots serialize");
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }
}

fn positives_by_split(corpus: &Corpus) -> BTreeMap<Split, usize> {
    let mut out = BTreeMap::new();
    for s in corpus.samples() {
        *out.entry(s.split).or_insert(0) += usize::from(s.label == Some(Label::Sarcastic));
    }
    out
}

/// URL under which the HTTP server serves an image reference.
pub fn image_url(image_ref: &str) -> String {
    let mut url = String::from("/images/");
    for b in image_ref.trim_start_matches('/').bytes() {
        if b.is_ascii_alphanumeric() || b"-._~/".contains(&b) {
            url.push(b as char);
        } else {
            url.push_str(&format!("%{b:02X}"));
        }
    }
    url
}
