//! Optimization, evaluation and experiment harnesses.

mod attention;
mod harness;
mod metrics;
mod optim;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::{export_attention, patch_attention, AttentionMap};
pub use harness::{
    ablate, freeze_sweep, interaction_sweep, low_resource_sweep, AblationReport, AblationRow,
    FreezeReport, FreezeRow, InteractionReport, InteractionRow, LowResourceReport, LowResourceRow,
    Reference, DEFAULT_FRACTIONS,
};
pub use metrics::Metrics;
pub use optim::{AdamW, AdamWConfig};

use crate::corpus::{Corpus, Sample, Split};
use crate::hash::derive_seed;
use crate::model::{
    aggregate_views, joint_loss, predict, EmbeddingProvider, FusionModel, ModelConfig,
    ProviderConfig, ViewSet,
};
use crate::numeric::{Graph, ParamGroup, ParamStore};
use crate::{Error, Result};

/// Which encoder groups are held fixed during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    #[default]
    None,
    TextEncoder,
    VisualEncoder,
    All,
}

impl FreezeMode {
    pub fn groups(self) -> &'static [ParamGroup] {
        match self {
            FreezeMode::None => &[],
            FreezeMode::TextEncoder => &[ParamGroup::TextEncoder],
            FreezeMode::VisualEncoder => &[ParamGroup::VisualEncoder],
            FreezeMode::All => &[ParamGroup::TextEncoder, ParamGroup::VisualEncoder],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FreezeMode::None => "none",
            FreezeMode::TextEncoder => "text_encoder",
            FreezeMode::VisualEncoder => "visual_encoder",
            FreezeMode::All => "all",
        }
    }
}

impl fmt::Display for FreezeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<FreezeMode> {
        match s.trim().replace('-', "_").as_str() {
            "none" => Ok(FreezeMode::None),
            "text_encoder" | "te" => Ok(FreezeMode::TextEncoder),
            "visual_encoder" | "ve" => Ok(FreezeMode::VisualEncoder),
            "all" => Ok(FreezeMode::All),
            other => Err(Error::Argument(format!(
                "unknown freeze mode {other:?} (expected none, text_encoder, visual_encoder or all)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_backbone: f64,
    pub lr_head: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub view_losses_enabled: ViewSet,
    pub freeze: FreezeMode,
    pub model: ModelConfig,
    pub provider: ProviderConfig,
    /// Also leave views whose loss is disabled out of `y_o` when predicting.
    pub drop_disabled_views_at_inference: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 10,
            lr_backbone: 1e-6,
            lr_head: 5e-4,
            weight_decay: 0.01,
            seed: 0,
            view_losses_enabled: ViewSet::ALL,
            freeze: FreezeMode::None,
            model: ModelConfig::default(),
            provider: ProviderConfig::default(),
            drop_disabled_views_at_inference: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.view_losses_enabled.is_empty() {
            return Err(Error::Config(
                "at least one view loss must be enabled".into(),
            ));
        }
        for (name, lr) in [("lr_backbone", self.lr_backbone), ("lr_head", self.lr_head)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be a positive number, got {lr}"
                )));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr_backbone: self.lr_backbone,
            lr_head: self.lr_head,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Views that enter `y_o` at prediction time.
    pub fn inference_views(&self) -> ViewSet {
        if self.drop_disabled_views_at_inference {
            self.view_losses_enabled
        } else {
            ViewSet::ALL
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean joint loss per training sample.
    pub train_loss: f64,
    pub validation: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept: best validation accuracy (earliest
    /// on ties), or the last epoch without a validation split.
    pub best_epoch: usize,
    pub test: Option<Metrics>,
    /// Loss logarithms that hit the probability floor.
    pub clamp_events: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of [`RunHistory::best_epoch`].
    pub params: ParamStore,
    /// Parameters after the last epoch.
    pub final_params: ParamStore,
    pub history: RunHistory,
}

/// State visible to a [`train_with_observer`] callback after each batch's
/// gradients are accumulated, before the optimizer step.
pub struct StepView<'a> {
    pub epoch: usize,
    pub step: usize,
    pub batch_size: usize,
    pub params: &'a ParamStore,
}

fn labeled_split(corpus: &Corpus, split: Split) -> Result<Vec<&Sample>> {
    let samples: Vec<&Sample> = corpus.split(split).collect();
    Corpus::require_labeled(samples.iter().copied())?;
    Ok(samples)
}

/// Scores `samples` by `predict(y_o)`, with `y_o` summed over `views`.
pub fn evaluate<'a>(
    model: &FusionModel,
    provider: &dyn EmbeddingProvider,
    params: &ParamStore,
    samples: impl IntoIterator<Item = &'a Sample>,
    views: ViewSet,
) -> Result<Metrics> {
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for s in samples {
        let Some(gold) = s.label else {
            missing.push(s.id.clone());
            continue;
        };
        let out = model.infer(provider, params, s)?;
        pairs.push((gold, predict(aggregate_views(&out, views))));
    }
    if !missing.is_empty() {
        return Err(Error::Unlabeled(missing));
    }
    if pairs.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty split".into()));
    }
    Metrics::from_pairs(pairs)
}

/// Evaluates one split of `corpus`.
pub fn evaluate_split(
    model: &FusionModel,
    provider: &dyn EmbeddingProvider,
    params: &ParamStore,
    corpus: &Corpus,
    split: Split,
    views: ViewSet,
) -> Result<Metrics> {
    evaluate(model, provider, params, corpus.split(split), views)
}

pub fn train(
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_observer(corpus, provider, config, |_| {})
}

pub fn train_with_observer(
    corpus: &Corpus,
    provider: &dyn EmbeddingProvider,
    config: &TrainConfig,
    mut observer: impl FnMut(&StepView<'_>),
) -> Result<TrainOutcome> {
    config.validate()?;
    let model = FusionModel::new(config.model)?;
    let train_set = labeled_split(corpus, Split::Train)?;
    if train_set.is_empty() {
        return Err(Error::Validation("train split is empty".into()));
    }
    let validation = labeled_split(corpus, Split::Validation)?;
    let test = labeled_split(corpus, Split::Test)?;

    let mut params = model.init_params(provider, config.seed)?;
    for &g in config.freeze.groups() {
        params.freeze(g);
    }
    let mut optimizer = AdamW::new(config.optimizer());
    let views = config.view_losses_enabled;
    let inference_views = config.inference_views();

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut clamp_events = 0;
    let mut step = 0;

    for epoch in 1..=config.epochs {
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("shuffle/{epoch}")));
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("dropout/{epoch}")));
        let mut loss_sum = 0.0;

        for batch in order.chunks(config.batch_size) {
            params.zero_grad();
            for &i in batch {
                let sample = train_set[i];
                let gold = sample.label.expect("checked labeled");
                let mut g = Graph::new();
                let enc = provider.encode(&mut g, &params, sample)?;
                let nodes = model.forward(&mut g, &params, &enc, Some(&mut dropout_rng))?;
                let loss = joint_loss(&mut g, &nodes, gold, views)?;
                loss_sum += g.value(loss).item()?;
                clamp_events += g.clamp_events();
                g.backward_into(loss, &mut params)?;
            }
            params.scale_grads(1.0 / batch.len() as f64);
            step += 1;
            observer(&StepView {
                epoch,
                step,
                batch_size: batch.len(),
                params: &params,
            });
            optimizer.step(&mut params)?;
        }

        let validation_metrics = if validation.is_empty() {
            None
        } else {
            Some(evaluate(
                &model,
                provider,
                &params,
                validation.iter().copied(),
                inference_views,
            )?)
        };
        let score = validation_metrics.map_or(f64::NEG_INFINITY, |m| m.accuracy);
        let improved = match &best {
            None => true,
            Some(_) if validation_metrics.is_none() => true,
            Some((best_score, _, _)) => score > *best_score,
        };
        if improved {
            best = Some((score, epoch, params.clone()));
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            validation: validation_metrics,
        });
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    let test_metrics = if test.is_empty() {
        None
    } else {
        Some(evaluate(
            &model,
            provider,
            &best_params,
            test.iter().copied(),
            inference_views,
        )?)
    };
    Ok(TrainOutcome {
        params: best_params,
        final_params: params,
        history: RunHistory {
            config: config.clone(),
            epochs,
            best_epoch,
            test: test_metrics,
            clamp_events,
        },
    })
}
