//! Experiment sweeps. Each runs independent seeded trainings, in parallel
//! threads, and scores the kept checkpoint on the test split.

use std::collections::BTreeMap;
use std::thread;

use serde::{Deserialize, Serialize};

use super::{train_with_observer, FreezeMode, Metrics, TrainConfig, TrainOutcome};
use crate::corpus::{render_aligned, subsample, Corpus, Split};
use crate::model::{
    is_view_only_param, EmbeddingProvider, FusionModel, InteractionKind, ProviderMode, View,
    ViewSet,
};
use crate::{Error, Result};

/// Published figures (percent), shown beside desk-scale results for
/// comparison only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f1: Option<f64>,
}

impl Reference {
    const fn full(accuracy: f64, precision: f64, recall: f64, f1: f64) -> Reference {
        Reference {
            accuracy,
            precision: Some(precision),
            recall: Some(recall),
            f1: Some(f1),
        }
    }

    const fn acc_f1(accuracy: f64, f1: f64) -> Reference {
        Reference {
            accuracy,
            precision: None,
            recall: None,
            f1: Some(f1),
        }
    }

    const fn acc(accuracy: f64) -> Reference {
        Reference {
            accuracy,
            precision: None,
            recall: None,
            f1: None,
        }
    }
}

struct RunResult {
    outcome: TrainOutcome,
    test: Metrics,
    /// Largest |gradient| seen on each view's own parameters over the run.
    view_grad_max: BTreeMap<View, f64>,
}

fn run(
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    config: &TrainConfig,
) -> Result<RunResult> {
    let mut view_grad_max: BTreeMap<View, f64> = View::ALL.iter().map(|&v| (v, 0.0)).collect();
    let outcome = train_with_observer(corpus, provider, config, |step| {
        for (name, e) in step.params.iter() {
            for view in View::ALL {
                if is_view_only_param(view, name) {
                    let slot = view_grad_max.get_mut(&view).expect("all views present");
                    *slot = slot.max(e.grad.max_abs());
                }
            }
        }
    })?;
    let test = outcome
        .history
        .test
        .ok_or_else(|| Error::Validation("test split is empty".into()))?;
    Ok(RunResult {
        outcome,
        test,
        view_grad_max,
    })
}

/// Runs every config on its own thread; results keep input order.
fn run_all(
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    configs: &[TrainConfig],
) -> Result<Vec<RunResult>> {
    thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|c| scope.spawn(move || run(corpus, provider, c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect()
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn ref_cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_owned(), |x| format!("{x:.2}"))
}

fn metric_header(first: &str) -> Vec<String> {
    [
        first, "Acc", "P", "R", "F1", "ref Acc", "ref P", "ref R", "ref F1",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn metric_cells(name: &str, m: &Metrics, r: Option<&Reference>) -> Vec<String> {
    vec![
        name.to_owned(),
        pct(m.accuracy),
        pct(m.precision),
        pct(m.recall),
        pct(m.f1),
        ref_cell(r.map(|r| r.accuracy)),
        ref_cell(r.and_then(|r| r.precision)),
        ref_cell(r.and_then(|r| r.recall)),
        ref_cell(r.and_then(|r| r.f1)),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub view_losses_enabled: ViewSet,
    pub test: Metrics,
    pub best_epoch: usize,
    /// Largest |gradient| reaching each view's own parameters during training.
    pub view_grad_max: BTreeMap<View, f64>,
    pub reference: Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: TrainConfig,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_table(&self) -> String {
        let mut cells = vec![metric_header("Model")];
        cells.extend(
            self.rows
                .iter()
                .map(|r| metric_cells(&r.name, &r.test, Some(&r.reference))),
        );
        render_aligned(&cells)
    }
}

/// Full model and each single-loss removal, with identical seeds. A removed
/// loss still leaves that view in `y_o` unless the config asks otherwise.
/// Fails if a disabled view's own parameters ever receive gradient.
pub fn ablate(
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    base: &TrainConfig,
) -> Result<AblationReport> {
    let variants = [
        (
            "full",
            ViewSet::ALL,
            Reference::full(85.64, 80.33, 88.24, 84.10),
        ),
        (
            "w/o L_T",
            ViewSet::ALL.without(View::Text),
            Reference::full(84.18, 80.60, 83.32, 81.93),
        ),
        (
            "w/o L_V",
            ViewSet::ALL.without(View::Image),
            Reference::full(83.69, 76.97, 88.62, 82.38),
        ),
        (
            "w/o L_F",
            ViewSet::ALL.without(View::Interaction),
            Reference::full(82.44, 73.80, 91.80, 81.82),
        ),
    ];
    let configs: Vec<TrainConfig> = variants
        .iter()
        .map(|(_, views, _)| TrainConfig {
            view_losses_enabled: *views,
            ..base.clone()
        })
        .collect();
    let results = run_all(corpus, provider, &configs)?;

    let mut rows = Vec::new();
    for ((name, views, reference), r) in variants.into_iter().zip(results) {
        for view in View::ALL {
            if !views.contains(view) && r.view_grad_max[&view] != 0.0 {
                return Err(Error::Numeric(format!(
                    "{name}: view {view} has no loss but its parameters received gradient {}",
                    r.view_grad_max[&view]
                )));
            }
        }
        rows.push(AblationRow {
            name: name.to_owned(),
            view_losses_enabled: views,
            test: r.test,
            best_epoch: r.outcome.history.best_epoch,
            view_grad_max: r.view_grad_max,
            reference,
        });
    }
    Ok(AblationReport {
        config: base.clone(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionRow {
    pub interaction: InteractionKind,
    pub test: Metrics,
    pub best_epoch: usize,
    pub reference: Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionReport {
    pub config: TrainConfig,
    pub rows: Vec<InteractionRow>,
}

impl InteractionReport {
    pub fn to_table(&self) -> String {
        let mut cells = vec![metric_header("Interaction")];
        cells.extend(
            self.rows
                .iter()
                .map(|r| metric_cells(r.interaction.as_str(), &r.test, Some(&r.reference))),
        );
        render_aligned(&cells)
    }
}

/// The three interaction layers under otherwise identical settings.
pub fn interaction_sweep(
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    base: &TrainConfig,
) -> Result<InteractionReport> {
    let variants = [
        (
            InteractionKind::CrossAttention,
            Reference::acc_f1(82.77, 81.26),
        ),
        (InteractionKind::Mlp, Reference::acc_f1(84.60, 83.24)),
        (
            InteractionKind::Transformer,
            Reference::acc_f1(85.64, 84.10),
        ),
    ];
    let configs: Vec<TrainConfig> = variants
        .iter()
        .map(|(kind, _)| {
            let mut c = base.clone();
            c.model.interaction = *kind;
            c
        })
        .collect();
    let results = run_all(corpus, provider, &configs)?;
    Ok(InteractionReport {
        config: base.clone(),
        rows: variants
            .into_iter()
            .zip(results)
            .map(|((interaction, reference), r)| InteractionRow {
                interaction,
                test: r.test,
                best_epoch: r.outcome.history.best_epoch,
                reference,
            })
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeRow {
    pub name: String,
    pub freeze: FreezeMode,
    pub test: Metrics,
    pub best_epoch: usize,
    /// Whether any encoder parameter moved from its initial value.
    pub backbone_changed: bool,
    pub reference: Reference,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeReport {
    pub config: TrainConfig,
    pub rows: Vec<FreezeRow>,
}

impl FreezeReport {
    pub fn to_table(&self) -> String {
        let mut cells = vec![metric_header("Setting")];
        cells.extend(
            self.rows
                .iter()
                .map(|r| metric_cells(&r.name, &r.test, Some(&r.reference))),
        );
        render_aligned(&cells)
    }
}

/// Freeze both encoders, each one, or neither. Needs trainable encoders,
/// so a file-backed provider is a configuration error. Fails if a frozen
/// parameter differs from its initial value after training.
pub fn freeze_sweep(
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    base: &TrainConfig,
) -> Result<FreezeReport> {
    if provider.mode() == ProviderMode::File {
        return Err(Error::Config(
            "freeze sweep needs trainable encoders; file-backed embeddings are fixed, so only freeze = all applies".into(),
        ));
    }
    let variants = [
        (
            "Freeze All",
            FreezeMode::All,
            Reference::acc_f1(84.72, 83.64),
        ),
        (
            "Freeze VE",
            FreezeMode::VisualEncoder,
            Reference::acc_f1(84.85, 83.60),
        ),
        (
            "Freeze TE",
            FreezeMode::TextEncoder,
            Reference::acc_f1(84.93, 83.48),
        ),
        (
            "Full Finetuned",
            FreezeMode::None,
            Reference::acc_f1(85.64, 84.10),
        ),
    ];
    let configs: Vec<TrainConfig> = variants
        .iter()
        .map(|(_, freeze, _)| TrainConfig {
            freeze: *freeze,
            ..base.clone()
        })
        .collect();
    let initial = FusionModel::new(base.model)?.init_params(provider, base.seed)?;
    let results = run_all(corpus, provider, &configs)?;

    let mut rows = Vec::new();
    for ((name, freeze, reference), r) in variants.into_iter().zip(results) {
        let mut changed = false;
        for (pname, e) in r.outcome.final_params.iter() {
            if !e.group.is_backbone() {
                continue;
            }
            let moved = initial.value(pname)? != &e.value;
            if moved && freeze.groups().contains(&e.group) {
                return Err(Error::Numeric(format!(
                    "{name}: frozen parameter {pname:?} changed during training"
                )));
            }
            changed |= moved;
        }
        rows.push(FreezeRow {
            name: name.to_owned(),
            freeze,
            test: r.test,
            best_epoch: r.outcome.history.best_epoch,
            backbone_changed: changed,
            reference,
        });
    }
    Ok(FreezeReport {
        config: base.clone(),
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowResourceRow {
    pub fraction: f64,
    pub train_size: usize,
    pub test: Metrics,
    pub best_epoch: usize,
    pub reference: Option<Reference>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowResourceReport {
    pub config: TrainConfig,
    pub rows: Vec<LowResourceRow>,
}

impl LowResourceReport {
    pub fn to_table(&self) -> String {
        let mut cells = vec![{
            let mut h = metric_header("Fraction");
            h.insert(1, "Train".into());
            h
        }];
        cells.extend(self.rows.iter().map(|r| {
            let mut row = metric_cells(&format!("{}", r.fraction), &r.test, r.reference.as_ref());
            row.insert(1, r.train_size.to_string());
            row
        }));
        render_aligned(&cells)
    }
}

pub const DEFAULT_FRACTIONS: [f64; 4] = [0.1, 0.2, 0.5, 1.0];

fn low_resource_reference(fraction: f64) -> Option<Reference> {
    [(0.1, 81.20), (0.2, 81.69), (0.5, 84.43), (1.0, 85.64)]
        .iter()
        .find(|(f, _)| *f == fraction)
        .map(|&(_, acc)| Reference::acc(acc))
}

/// Trains on a stratified subsample of the train split per fraction; the
/// validation and test splits are unchanged.
pub fn low_resource_sweep(
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    base: &TrainConfig,
    fractions: &[f64],
) -> Result<LowResourceReport> {
    if fractions.is_empty() {
        return Err(Error::Argument("no fractions given".into()));
    }
    let subsets: Vec<Corpus> = fractions
        .iter()
        .map(|&f| subsample(corpus, f, base.seed))
        .collect::<Result<_>>()?;
    let results: Vec<RunResult> = thread::scope(|scope| {
        let handles: Vec<_> = subsets
            .iter()
            .map(|c| scope.spawn(move || run(c, provider, base)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
            .collect::<Result<_>>()
    })?;
    Ok(LowResourceReport {
        config: base.clone(),
        rows: fractions
            .iter()
            .zip(&subsets)
            .zip(results)
            .map(|((&fraction, subset), r)| LowResourceRow {
                fraction,
                train_size: subset.split_ids(Split::Train).len(),
                test: r.test,
                best_epoch: r.outcome.history.best_epoch,
                reference: low_resource_reference(fraction),
            })
            .collect(),
    })
}
