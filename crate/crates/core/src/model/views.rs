use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::provider::{EmbeddingProvider, Encoded};
use crate::corpus::{Label, Sample};
use crate::numeric::nn::{
    linear_named, linear_specs, scaled_dot_product_attention, EncoderBlock, EncoderBlockConfig,
};
use crate::numeric::{init_params, Graph, ParamGroup, ParamSpec, ParamStore, Tensor, Var};
use crate::{Error, Result};

pub const TEXT_HEAD: &str = "text_head";
pub const IMAGE_HEAD: &str = "image_head";
pub const FUSION_HEAD: &str = "fusion_head";
pub const KEYLESS_WEIGHT: &str = "keyless.weight";
pub const KEYLESS_BIAS: &str = "keyless.bias";
pub const INTERACTION: &str = "interaction";
pub const CROSS_TEXT: &str = "cross.text_query";
pub const CROSS_IMAGE: &str = "cross.image_query";
pub const MLP_HIDDEN: &str = "mlp.hidden";

/// Floor applied inside every loss logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    #[serde(rename = "t")]
    Text,
    #[serde(rename = "v")]
    Image,
    #[serde(rename = "f")]
    Interaction,
}

impl View {
    pub const ALL: [View; 3] = [View::Text, View::Image, View::Interaction];

    pub fn as_str(self) -> &'static str {
        match self {
            View::Text => "t",
            View::Image => "v",
            View::Interaction => "f",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<View> {
        match s.trim() {
            "t" | "text" => Ok(View::Text),
            "v" | "image" => Ok(View::Image),
            "f" | "interaction" => Ok(View::Interaction),
            other => Err(Error::Argument(format!(
                "unknown view {other:?} (expected t, v or f)"
            ))),
        }
    }
}

/// Subset of {t, v, f}; serialized as a list such as `["t", "f"]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "Vec<View>", from = "Vec<View>")]
pub struct ViewSet {
    text: bool,
    image: bool,
    interaction: bool,
}

impl ViewSet {
    pub const ALL: ViewSet = ViewSet {
        text: true,
        image: true,
        interaction: true,
    };
    pub const NONE: ViewSet = ViewSet {
        text: false,
        image: false,
        interaction: false,
    };

    pub fn only(view: View) -> ViewSet {
        ViewSet::NONE.with(view)
    }

    pub fn with(mut self, view: View) -> ViewSet {
        *self.slot(view) = true;
        self
    }

    pub fn without(mut self, view: View) -> ViewSet {
        *self.slot(view) = false;
        self
    }

    fn slot(&mut self, view: View) -> &mut bool {
        match view {
            View::Text => &mut self.text,
            View::Image => &mut self.image,
            View::Interaction => &mut self.interaction,
        }
    }

    pub fn contains(&self, view: View) -> bool {
        match view {
            View::Text => self.text,
            View::Image => self.image,
            View::Interaction => self.interaction,
        }
    }

    pub fn is_empty(&self) -> bool {
        !(self.text || self.image || self.interaction)
    }

    pub fn iter(&self) -> impl Iterator<Item = View> + '_ {
        View::ALL.into_iter().filter(|v| self.contains(*v))
    }
}

impl Default for ViewSet {
    fn default() -> Self {
        ViewSet::ALL
    }
}

impl From<Vec<View>> for ViewSet {
    fn from(views: Vec<View>) -> ViewSet {
        views.into_iter().fold(ViewSet::NONE, ViewSet::with)
    }
}

impl From<ViewSet> for Vec<View> {
    fn from(set: ViewSet) -> Vec<View> {
        set.iter().collect()
    }
}

impl fmt::Display for ViewSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.iter().map(View::as_str).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for ViewSet {
    type Err = Error;

    /// Comma-separated, e.g. `t,v,f`.
    fn from_str(s: &str) -> Result<ViewSet> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(View::from_str)
            .try_fold(ViewSet::NONE, |acc, v| Ok(acc.with(v?)))
    }
}

/// How the interaction view combines the two modalities.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    /// Self-attention over the concatenated sequence, then keyless fusion.
    #[default]
    Transformer,
    /// Each CLS vector attends to the other modality's sequence, then keyless fusion.
    CrossAttention,
    /// `concat(t_CLS, v_CLS)` through one relu layer.
    Mlp,
}

impl InteractionKind {
    pub const ALL: [InteractionKind; 3] = [
        InteractionKind::Transformer,
        InteractionKind::CrossAttention,
        InteractionKind::Mlp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InteractionKind::Transformer => "transformer",
            InteractionKind::CrossAttention => "cross_attention",
            InteractionKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for InteractionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InteractionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<InteractionKind> {
        match s.trim().replace('-', "_").as_str() {
            "transformer" => Ok(InteractionKind::Transformer),
            "cross_attention" => Ok(InteractionKind::CrossAttention),
            "mlp" => Ok(InteractionKind::Mlp),
            other => Err(Error::Argument(format!(
                "unknown interaction kind {other:?} (expected transformer, cross_attention or mlp)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub ln_eps: f64,
    pub dropout: f64,
    pub interaction: InteractionKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 16,
            heads: 4,
            ffn_hidden: 32,
            ln_eps: 1e-12,
            dropout: 0.0,
            interaction: InteractionKind::Transformer,
        }
    }
}

impl ModelConfig {
    fn block_config(&self) -> EncoderBlockConfig {
        EncoderBlockConfig {
            d_model: self.d,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            ln_eps: self.ln_eps,
            dropout: self.dropout,
        }
    }
}

/// The per-view distributions of one forward pass, as graph nodes.
#[derive(Clone, Debug)]
pub struct ViewNodes {
    /// `1 × 2` each.
    pub y_t: Var,
    pub y_v: Var,
    pub y_f: Var,
    /// `2 × 1` keyless weights `(p_t, p_v)`; absent for the MLP variant.
    pub modality_weights: Option<Var>,
    /// `1 × d` fused vector `f` fed to the interaction classifier; for the
    /// MLP variant, its hidden layer.
    pub fused: Var,
    /// `L × L` per head; transformer variant only.
    pub attention: Vec<Var>,
}

impl ViewNodes {
    pub fn view(&self, view: View) -> Var {
        match view {
            View::Text => self.y_t,
            View::Image => self.y_v,
            View::Interaction => self.y_f,
        }
    }
}

/// Plain-value result of a forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewOutputs {
    pub y_t: [f64; 2],
    pub y_v: [f64; 2],
    pub y_f: [f64; 2],
    /// `y_t + y_v + y_f`; not renormalized.
    pub y_o: [f64; 2],
    pub modality_weights: Option<[f64; 2]>,
    /// `h × L × L`, with `L = m + n + 2` in the order
    /// `(v_CLS, v_1..v_m, t_1..t_n, t_CLS)`.
    pub interaction_attention: Option<Tensor>,
}

impl ViewOutputs {
    pub fn view(&self, view: View) -> [f64; 2] {
        match view {
            View::Text => self.y_t,
            View::Image => self.y_v,
            View::Interaction => self.y_f,
        }
    }

    pub fn prediction(&self) -> Label {
        predict(self.y_o)
    }
}

fn pair(t: &Tensor) -> [f64; 2] {
    [t.data()[0], t.data()[1]]
}

/// Name prefixes of the parameters that only `view`'s output depends on.
pub fn view_only_prefixes(view: View) -> &'static [&'static str] {
    match view {
        View::Text => &["text_head."],
        View::Image => &["image_head."],
        View::Interaction => &["fusion_head.", "interaction.", "keyless.", "cross.", "mlp."],
    }
}

pub fn is_view_only_param(view: View, name: &str) -> bool {
    view_only_prefixes(view).iter().any(|p| name.starts_with(p))
}

pub fn aggregate(y_t: [f64; 2], y_v: [f64; 2], y_f: [f64; 2]) -> [f64; 2] {
    [y_t[0] + y_v[0] + y_f[0], y_t[1] + y_v[1] + y_f[1]]
}

/// Sum over `views` only; used when disabled views are also dropped at inference.
pub fn aggregate_views(outputs: &ViewOutputs, views: ViewSet) -> [f64; 2] {
    views.iter().fold([0.0, 0.0], |acc, v| {
        let y = outputs.view(v);
        [acc[0] + y[0], acc[1] + y[1]]
    })
}

/// Argmax over `y_o`; an exact tie goes to the negative class.
pub fn predict(y_o: [f64; 2]) -> Label {
    if y_o[1] > y_o[0] {
        Label::Sarcastic
    } else {
        Label::NotSarcastic
    }
}

/// `softmax(W x + b)` for a `1 × d` input and a `2 × d` head.
pub fn classify(g: &mut Graph, store: &ParamStore, head: &str, x: Var) -> Result<Var> {
    let logits = linear_named(g, store, head, x)?;
    if g.shape(logits) != [1, 2] {
        return Err(Error::dim(
            "classify",
            format!("{head} produced {:?}, expected [1, 2]", g.shape(logits)),
        ));
    }
    g.softmax(logits, 1)
}

pub fn text_view(g: &mut Graph, store: &ParamStore, text_cls: Var) -> Result<Var> {
    classify(g, store, TEXT_HEAD, text_cls)
}

pub fn image_view(g: &mut Graph, store: &ParamStore, image_cls: Var) -> Result<Var> {
    classify(g, store, IMAGE_HEAD, image_cls)
}

/// Scores each summary row by `w·h + b`, softmaxes across the two rows and
/// returns `f = p_t·t̂ + p_v·v̂` with the `2 × 1` weights.
pub fn keyless_fusion(
    g: &mut Graph,
    store: &ParamStore,
    t_hat: Var,
    v_hat: Var,
) -> Result<(Var, Var)> {
    let h = g.concat(&[t_hat, v_hat], 0)?;
    let w = g.param(store, KEYLESS_WEIGHT)?;
    let raw = g.matmul_t(h, w)?;
    // The shared offset b cancels in the softmax. Entering it as b − b keeps
    // that cancellation exact, so the output is bit-invariant in b.
    let b = g.param(store, KEYLESS_BIAS)?;
    let neg_b = g.scale(b, -1.0);
    let offset = g.add(b, neg_b)?;
    let scores = g.add_bias(raw, offset)?;
    let p = g.softmax(scores, 0)?;
    let pt = g.transpose(p)?;
    let f = g.matmul(pt, h)?;
    Ok((f, p))
}

/// Single-head attention of one query row over `context`, added back to the
/// query. Returns the updated row and the `1 × k` weights.
pub fn cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    query: Var,
    context: Var,
) -> Result<(Var, Var)> {
    let d = g.value(query).dims2("cross_attention")?.1;
    let q = linear_named(g, store, &format!("{prefix}.query"), query)?;
    let wk = g.param(store, &format!("{prefix}.key.weight"))?;
    let k = g.matmul_t(context, wk)?;
    let v = linear_named(g, store, &format!("{prefix}.value"), context)?;
    let (attended, weights) = scaled_dot_product_attention(g, q, k, v, d)?;
    Ok((g.add(query, attended)?, weights))
}

fn cross_attention_specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
    let mut specs = linear_specs(&format!("{prefix}.query"), d, d, ParamGroup::Head);
    specs.push(ParamSpec::weight(
        format!("{prefix}.key.weight"),
        d,
        d,
        ParamGroup::Head,
    ));
    specs.extend(linear_specs(
        &format!("{prefix}.value"),
        d,
        d,
        ParamGroup::Head,
    ));
    specs
}

/// Text, image and interaction views with late fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    config: ModelConfig,
    block: EncoderBlock,
}

impl FusionModel {
    pub fn new(config: ModelConfig) -> Result<FusionModel> {
        if config.d == 0 {
            return Err(Error::Config("model width must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                config.dropout
            )));
        }
        if config.ln_eps.is_nan() || config.ln_eps <= 0.0 {
            return Err(Error::Config(format!(
                "layer norm epsilon must be positive, got {}",
                config.ln_eps
            )));
        }
        let block = EncoderBlock::new(INTERACTION, config.block_config())?;
        Ok(FusionModel { config, block })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameters downstream of the encoders.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.config.d;
        let mut specs = Vec::new();
        for head in [TEXT_HEAD, IMAGE_HEAD, FUSION_HEAD] {
            specs.extend(linear_specs(head, 2, d, ParamGroup::Head));
        }
        match self.config.interaction {
            InteractionKind::Transformer => {
                specs.extend(self.block.param_specs());
                specs.extend(keyless_specs(d));
            }
            InteractionKind::CrossAttention => {
                specs.extend(cross_attention_specs(CROSS_TEXT, d));
                specs.extend(cross_attention_specs(CROSS_IMAGE, d));
                specs.extend(keyless_specs(d));
            }
            InteractionKind::Mlp => {
                specs.extend(linear_specs(MLP_HIDDEN, d, 2 * d, ParamGroup::Head))
            }
        }
        specs
    }

    /// Initializes encoder and model parameters together.
    pub fn init_params(&self, provider: &dyn EmbeddingProvider, seed: u64) -> Result<ParamStore> {
        if provider.dim() != self.config.d {
            return Err(Error::Config(format!(
                "provider width {} does not match model width {}",
                provider.dim(),
                self.config.d
            )));
        }
        let mut specs = provider.param_specs();
        specs.extend(self.param_specs());
        init_params(&specs, seed)
    }

    /// `rng` enables dropout; pass `None` for evaluation.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        enc: &Encoded,
        rng: Option<&mut R>,
    ) -> Result<ViewNodes> {
        let d = self.config.d;
        for (what, v) in [("text cls", enc.text_cls), ("image cls", enc.image_cls)] {
            if g.shape(v) != [1, d] {
                return Err(Error::dim(
                    "forward",
                    format!("{what} {:?}, expected [1, {d}]", g.shape(v)),
                ));
            }
        }
        let y_t = text_view(g, store, enc.text_cls)?;
        let y_v = image_view(g, store, enc.image_cls)?;

        let (fused, modality_weights, attention) = match self.config.interaction {
            InteractionKind::Transformer => {
                let mut rows = vec![enc.image_cls, enc.patches];
                rows.extend(enc.tokens);
                rows.push(enc.text_cls);
                let seq = g.concat(&rows, 0)?;
                let len = g.shape(seq)[0];
                let out = self.block.forward(g, store, seq, rng)?;
                let v_hat = g.slice(out.output, 0, 0, 1)?;
                let t_hat = g.slice(out.output, 0, len - 1, 1)?;
                let (f, p) = keyless_fusion(g, store, t_hat, v_hat)?;
                (f, Some(p), out.attention)
            }
            InteractionKind::CrossAttention => {
                let (t_hat, _) = cross_attention(g, store, CROSS_TEXT, enc.text_cls, enc.patches)?;
                let v_hat = match enc.tokens {
                    Some(tokens) => {
                        cross_attention(g, store, CROSS_IMAGE, enc.image_cls, tokens)?.0
                    }
                    None => enc.image_cls,
                };
                let (f, p) = keyless_fusion(g, store, t_hat, v_hat)?;
                (f, Some(p), Vec::new())
            }
            InteractionKind::Mlp => {
                let joined = g.concat(&[enc.text_cls, enc.image_cls], 1)?;
                let hidden = linear_named(g, store, MLP_HIDDEN, joined)?;
                (g.relu(hidden), None, Vec::new())
            }
        };
        let y_f = classify(g, store, FUSION_HEAD, fused)?;
        Ok(ViewNodes {
            y_t,
            y_v,
            y_f,
            modality_weights,
            fused,
            attention,
        })
    }

    /// Deterministic evaluation of one sample.
    pub fn infer(
        &self,
        provider: &dyn EmbeddingProvider,
        store: &ParamStore,
        sample: &Sample,
    ) -> Result<ViewOutputs> {
        let mut g = Graph::new();
        let enc = provider.encode(&mut g, store, sample)?;
        let nodes = self.forward::<rand_chacha::ChaCha8Rng>(&mut g, store, &enc, None)?;
        Ok(outputs_of(&g, &nodes))
    }
}

fn keyless_specs(d: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(KEYLESS_WEIGHT, 1, d, ParamGroup::Head),
        ParamSpec::bias(KEYLESS_BIAS, 1, ParamGroup::Head),
    ]
}

/// Reads plain values out of a forward pass.
pub fn outputs_of(g: &Graph, nodes: &ViewNodes) -> ViewOutputs {
    let y_t = pair(g.value(nodes.y_t));
    let y_v = pair(g.value(nodes.y_v));
    let y_f = pair(g.value(nodes.y_f));
    let interaction_attention = (!nodes.attention.is_empty()).then(|| {
        let l = g.shape(nodes.attention[0])[0];
        let data = nodes
            .attention
            .iter()
            .flat_map(|a| g.value(*a).data().iter().copied())
            .collect();
        Tensor::new(vec![nodes.attention.len(), l, l], data).expect("per-head L × L blocks")
    });
    ViewOutputs {
        y_t,
        y_v,
        y_f,
        y_o: aggregate(y_t, y_v, y_f),
        modality_weights: nodes.modality_weights.map(|p| pair(g.value(p))),
        interaction_attention,
    }
}

/// `−Σ_views [ŷ ln y₁ + (1 − ŷ) ln(1 − y₁)]` over the enabled views, with
/// logs floored at [`LOG_FLOOR`] (counted by [`Graph::clamp_events`]).
pub fn joint_loss(g: &mut Graph, nodes: &ViewNodes, gold: Label, views: ViewSet) -> Result<Var> {
    if views.is_empty() {
        return Err(Error::Config("no view losses enabled".into()));
    }
    let mut terms = Vec::new();
    for view in views.iter() {
        let positive = g.slice(nodes.view(view), 1, 1, 1)?;
        let target = if gold.is_positive() {
            positive
        } else {
            g.affine(positive, -1.0, 1.0)
        };
        terms.push(g.ln_clamped(target, LOG_FLOOR));
    }
    let all = g.concat(&terms, 1)?;
    let total = g.sum(all);
    Ok(g.scale(total, -1.0))
}

/// Value-level [`joint_loss`]; also returns how many logs were floored.
pub fn joint_loss_value(outputs: &ViewOutputs, gold: Label, views: ViewSet) -> (f64, usize) {
    let mut clamped = 0;
    let loss = views
        .iter()
        .map(|v| {
            let p1 = outputs.view(v)[1];
            let x = if gold.is_positive() { p1 } else { 1.0 - p1 };
            if x < LOG_FLOOR {
                clamped += 1;
            }
            -x.max(LOG_FLOOR).ln()
        })
        .sum();
    (loss, clamped)
}
