//! Text and image encoders behind one interface.

use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::embfile::{index_records, load_embeddings, EmbeddingRecord};
use crate::corpus::Sample;
use crate::hash::{derive_seed, fnv1a, fnv1a_extend};
use crate::numeric::{Graph, ParamGroup, ParamSpec, ParamStore, Tensor, Var};
use crate::{Error, Result};

/// Encoder outputs for one sample, as nodes on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `n × d`; `None` for an empty token sequence.
    pub tokens: Option<Var>,
    /// `1 × d`.
    pub text_cls: Var,
    /// `m × d`, `m ≥ 1`.
    pub patches: Var,
    /// `1 × d`.
    pub image_cls: Var,
}

/// Plain-value counterpart of the text half of [`Encoded`].
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoding {
    pub token_reps: Tensor,
    pub cls: Vec<f64>,
}

impl TextEncoding {
    pub fn n(&self) -> usize {
        self.token_reps.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoding {
    pub patch_reps: Tensor,
    pub cls: Vec<f64>,
}

impl ImageEncoding {
    pub fn m(&self) -> usize {
        self.patch_reps.shape()[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    Toy,
    File,
}

pub trait EmbeddingProvider: Send + Sync {
    fn mode(&self) -> ProviderMode;

    fn dim(&self) -> usize;

    /// Trainable encoder parameters; empty when the encoder is fixed.
    fn param_specs(&self) -> Vec<ParamSpec>;

    fn encode(&self, g: &mut Graph, store: &ParamStore, sample: &Sample) -> Result<Encoded>;

    /// Evaluates [`EmbeddingProvider::encode`] to plain tensors.
    fn encode_values(
        &self,
        store: &ParamStore,
        sample: &Sample,
    ) -> Result<(TextEncoding, ImageEncoding)> {
        let mut g = Graph::new();
        let e = self.encode(&mut g, store, sample)?;
        let d = self.dim();
        let token_reps = match e.tokens {
            Some(t) => g.value(t).clone(),
            None => Tensor::zeros(&[0, d]),
        };
        Ok((
            TextEncoding {
                token_reps,
                cls: g.value(e.text_cls).data().to_vec(),
            },
            ImageEncoding {
                patch_reps: g.value(e.patches).clone(),
                cls: g.value(e.image_cls).data().to_vec(),
            },
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyConfig {
    pub d: usize,
    /// Rows in the hashed token table.
    pub vocab: usize,
    /// Patches per image.
    pub patches: usize,
    /// Width of the raw per-patch image features before projection.
    pub feature_dim: usize,
    /// Salt for the image feature hash; independent of the init seed.
    pub feature_seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            d: 16,
            vocab: 512,
            patches: 4,
            feature_dim: 8,
            feature_seed: 0,
        }
    }
}

pub const TOKEN_TABLE: &str = "text_encoder.token_table";
pub const TEXT_CLS: &str = "text_encoder.cls";
pub const IMAGE_PROJECTION: &str = "visual_encoder.projection";
pub const IMAGE_CLS: &str = "visual_encoder.cls";

/// Hash-based encoders: tokens index a learned table by string hash, and
/// each image is a fixed pseudo-random feature grid derived from its
/// `image_ref` bytes, mapped through a learned projection.
///
/// `t_CLS = mean(tokens) + text_encoder.cls` (just the learned vector when
/// the text is empty); `v_CLS = mean(patches) + visual_encoder.cls`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyProvider {
    config: ToyConfig,
}

impl ToyProvider {
    pub fn new(config: ToyConfig) -> Result<ToyProvider> {
        if config.d == 0 || config.vocab == 0 || config.patches == 0 || config.feature_dim == 0 {
            return Err(Error::Config(format!(
                "toy provider sizes must be positive: {config:?}"
            )));
        }
        Ok(ToyProvider { config })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn token_index(&self, token: &str) -> usize {
        (fnv1a(token.as_bytes()) % self.config.vocab as u64) as usize
    }

    /// `patches × feature_dim` features in [-1, 1).
    pub fn image_features(&self, image_ref: &str) -> Tensor {
        let ToyConfig {
            patches,
            feature_dim,
            ..
        } = self.config;
        let base = fnv1a_extend(
            fnv1a(&self.config.feature_seed.to_le_bytes()),
            image_ref.as_bytes(),
        );
        let data = (0..patches * feature_dim)
            .map(|j| {
                let h = derive_seed(base, &j.to_string());
                // top 53 bits → [0, 1)
                let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
                2.0 * unit - 1.0
            })
            .collect();
        Tensor::new(vec![patches, feature_dim], data).expect("shape matches data")
    }
}

impl EmbeddingProvider for ToyProvider {
    fn mode(&self) -> ProviderMode {
        ProviderMode::Toy
    }

    fn dim(&self) -> usize {
        self.config.d
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        let ToyConfig {
            d,
            vocab,
            feature_dim,
            ..
        } = self.config;
        vec![
            // Xavier over (d, d) so the table's scale does not depend on vocab.
            ParamSpec {
                name: TOKEN_TABLE.into(),
                shape: vec![vocab, d],
                init: crate::numeric::Init::Xavier {
                    fan_in: d,
                    fan_out: d,
                },
                group: ParamGroup::TextEncoder,
            },
            ParamSpec::bias(TEXT_CLS, d, ParamGroup::TextEncoder),
            ParamSpec::weight(IMAGE_PROJECTION, d, feature_dim, ParamGroup::VisualEncoder),
            ParamSpec::bias(IMAGE_CLS, d, ParamGroup::VisualEncoder),
        ]
    }

    fn encode(&self, g: &mut Graph, store: &ParamStore, sample: &Sample) -> Result<Encoded> {
        let d = self.config.d;
        let text_cls_param = g.param(store, TEXT_CLS)?;
        let text_cls_param = g.reshape(text_cls_param, &[1, d])?;
        let (tokens, text_cls) = if sample.tokens.is_empty() {
            (None, text_cls_param)
        } else {
            let table = g.param(store, TOKEN_TABLE)?;
            let idx: Vec<usize> = sample.tokens.iter().map(|t| self.token_index(t)).collect();
            let tokens = g.gather(table, &idx)?;
            let mean = g.mean_rows(tokens)?;
            (Some(tokens), g.add(mean, text_cls_param)?)
        };

        let features = g.constant(self.image_features(&sample.image_ref));
        let projection = g.param(store, IMAGE_PROJECTION)?;
        let patches = g.matmul_t(features, projection)?;
        let mean = g.mean_rows(patches)?;
        let image_cls_param = g.param(store, IMAGE_CLS)?;
        let image_cls_param = g.reshape(image_cls_param, &[1, d])?;
        let image_cls = g.add(mean, image_cls_param)?;

        Ok(Encoded {
            tokens,
            text_cls,
            patches,
            image_cls,
        })
    }
}

/// Reads precomputed encoder outputs keyed by sample id. Nothing is trainable.
#[derive(Clone, Debug)]
pub struct FileProvider {
    d: usize,
    records: HashMap<String, EmbeddingRecord>,
}

impl FileProvider {
    pub fn from_records(d: usize, records: Vec<EmbeddingRecord>) -> Result<FileProvider> {
        for r in &records {
            r.validate(d)?;
        }
        Ok(FileProvider {
            d,
            records: index_records(records)?,
        })
    }

    pub fn open(path: impl AsRef<std::path::Path>) -> Result<FileProvider> {
        let (d, records) = load_embeddings(path)?;
        FileProvider::from_records(d, records)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl EmbeddingProvider for FileProvider {
    fn mode(&self) -> ProviderMode {
        ProviderMode::File
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn param_specs(&self) -> Vec<ParamSpec> {
        Vec::new()
    }

    fn encode(&self, g: &mut Graph, _store: &ParamStore, sample: &Sample) -> Result<Encoded> {
        let r = self
            .records
            .get(&sample.id)
            .ok_or_else(|| Error::NotFound(format!("no embeddings for sample {:?}", sample.id)))?;
        let d = self.d;
        let tokens = (r.token_reps.shape()[0] > 0).then(|| g.constant(r.token_reps.clone()));
        Ok(Encoded {
            tokens,
            text_cls: g.constant(Tensor::new(vec![1, d], r.text_cls.clone())?),
            patches: g.constant(r.patch_reps.clone()),
            image_cls: g.constant(Tensor::new(vec![1, d], r.image_cls.clone())?),
        })
    }
}

/// Serializable provider choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderConfig {
    Toy(ToyConfig),
    File { path: PathBuf },
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Toy(ToyConfig::default())
    }
}

impl ProviderConfig {
    pub fn mode(&self) -> ProviderMode {
        match self {
            ProviderConfig::Toy(_) => ProviderMode::Toy,
            ProviderConfig::File { .. } => ProviderMode::File,
        }
    }

    pub fn build(&self) -> Result<Box<dyn EmbeddingProvider>> {
        Ok(match self {
            ProviderConfig::Toy(c) => Box::new(ToyProvider::new(c.clone())?),
            ProviderConfig::File { path } => Box::new(FileProvider::open(path)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use crate::numeric::init_params;

    fn sample(id: &str, text: &str, image: &str) -> Sample {
        Sample::new(id, text, image, None, Split::Train)
    }

    #[test]
    fn toy_encoding_is_deterministic_and_shaped() {
        let p = ToyProvider::new(ToyConfig::default()).unwrap();
        let store = init_params(&p.param_specs(), 3).unwrap();
        let s = sample("a", "so   happy today", "img/1.jpg");
        let (t1, i1) = p.encode_values(&store, &s).unwrap();
        let (t2, i2) = p.encode_values(&store, &s).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(i1, i2);
        assert_eq!(t1.token_reps.shape(), &[3, 16]);
        assert_eq!(i1.patch_reps.shape(), &[4, 16]);
        assert_eq!(t1.cls.len(), 16);
    }

    #[test]
    fn toy_text_cls_is_token_mean_plus_offset() {
        let p = ToyProvider::new(ToyConfig::default()).unwrap();
        let store = init_params(&p.param_specs(), 8).unwrap();
        let (t, _) = p.encode_values(&store, &sample("a", "x y", "")).unwrap();
        let offset = store.value(TEXT_CLS).unwrap().data();
        for c in 0..16 {
            let mean = (t.token_reps.at(0, c) + t.token_reps.at(1, c)) / 2.0;
            assert!((t.cls[c] - (mean + offset[c])).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_text_has_no_tokens() {
        let p = ToyProvider::new(ToyConfig::default()).unwrap();
        let store = init_params(&p.param_specs(), 1).unwrap();
        let (t, _) = p.encode_values(&store, &sample("a", "", "i")).unwrap();
        assert_eq!(t.n(), 0);
        assert_eq!(t.cls, store.value(TEXT_CLS).unwrap().data());
    }

    #[test]
    fn image_features_depend_on_ref_and_salt() {
        let p = ToyProvider::new(ToyConfig::default()).unwrap();
        let a = p.image_features("img/1.jpg");
        assert_eq!(a, p.image_features("img/1.jpg"));
        assert_ne!(a, p.image_features("img/2.jpg"));
        assert!(a.data().iter().all(|v| (-1.0..1.0).contains(v)));
        let q = ToyProvider::new(ToyConfig {
            feature_seed: 9,
            ..ToyConfig::default()
        })
        .unwrap();
        assert_ne!(a, q.image_features("img/1.jpg"));
    }

    #[test]
    fn file_provider_serves_records_and_reports_missing() {
        let rec = EmbeddingRecord {
            id: "s1".into(),
            token_reps: Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap(),
            text_cls: vec![0.5, 0.5],
            patch_reps: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            image_cls: vec![-1.0, 1.0],
        };
        let p = FileProvider::from_records(2, vec![rec.clone()]).unwrap();
        assert!(p.param_specs().is_empty());
        let store = ParamStore::new();
        let (t, i) = p
            .encode_values(&store, &sample("s1", "ignored", ""))
            .unwrap();
        assert_eq!(t.token_reps, rec.token_reps);
        assert_eq!(i.cls, rec.image_cls);
        let err = p
            .encode_values(&store, &sample("nope", "", ""))
            .unwrap_err();
        assert!(matches!(err, Error::NotFound(_)));
    }

    #[test]
    fn provider_config_json_shape() {
        let c: ProviderConfig = serde_json::from_str(r#"{"mode":"file","path":"e.bin"}"#).unwrap();
        assert_eq!(c.mode(), ProviderMode::File);
        let t = serde_json::to_value(ProviderConfig::default()).unwrap();
        assert_eq!(t["mode"], "toy");
        assert_eq!(t["d"], 16);
    }
}
