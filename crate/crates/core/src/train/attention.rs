use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::model::{EmbeddingProvider, FusionModel, ViewOutputs};
use crate::numeric::ParamStore;
use crate::{Error, Result};

/// Interaction-encoder attention that the `t̂_CLS` position pays to each
/// image patch, averaged over heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub sample_id: String,
    pub heads: usize,
    pub patches: usize,
    /// Indexed by patch, in provider order.
    pub per_patch: Vec<f64>,
    /// Sum of `per_patch`; the rest of the query's mass is on CLS and token positions.
    pub patch_mass: f64,
    /// `per_patch` laid out row-major: a square grid when the patch count is
    /// a perfect square, otherwise a single row.
    pub grid: Vec<Vec<f64>>,
}

/// Head-averaged attention from the last sequence position (`t_CLS`) to the
/// `m` patch positions `1..=m`.
pub fn patch_attention(outputs: &ViewOutputs, m: usize) -> Result<Vec<f64>> {
    let att = outputs.interaction_attention.as_ref().ok_or_else(|| {
        Error::Config("attention maps need the transformer interaction layer".into())
    })?;
    let (heads, l) = (att.shape()[0], att.shape()[1]);
    if m + 2 > l {
        return Err(Error::dim(
            "patch_attention",
            format!("{m} patches in a sequence of {l}"),
        ));
    }
    let query = l - 1;
    let mut per_patch = vec![0.0; m];
    for h in 0..heads {
        let row = &att.data()[(h * l + query) * l..(h * l + query + 1) * l];
        for (p, v) in per_patch.iter_mut().zip(&row[1..=m]) {
            *p += v;
        }
    }
    per_patch.iter_mut().for_each(|v| *v /= heads as f64);
    Ok(per_patch)
}

fn grid_of(values: &[f64]) -> Vec<Vec<f64>> {
    let side = (values.len() as f64).sqrt().round() as usize;
    if side * side == values.len() && side > 0 {
        values.chunks(side).map(<[f64]>::to_vec).collect()
    } else {
        vec![values.to_vec()]
    }
}

/// Computes the map for `sample_id` and, with `path`, writes it as JSON.
pub fn export_attention(
    model: &FusionModel,
    provider: &dyn EmbeddingProvider,
    params: &ParamStore,
    corpus: &Corpus,
    sample_id: &str,
    path: Option<&Path>,
) -> Result<AttentionMap> {
    let sample = corpus
        .get(sample_id)
        .ok_or_else(|| Error::NotFound(format!("sample {sample_id:?} is not in the corpus")))?;
    let (_, image) = provider.encode_values(params, sample)?;
    let outputs = model.infer(provider, params, sample)?;
    let per_patch = patch_attention(&outputs, image.m())?;
    let heads = outputs
        .interaction_attention
        .as_ref()
        .map_or(0, |a| a.shape()[0]);
    let map = AttentionMap {
        sample_id: sample_id.to_owned(),
        heads,
        patches: per_patch.len(),
        patch_mass: per_patch.iter().sum(),
        grid: grid_of(&per_patch),
        per_patch,
    };
    if let Some(path) = path {
        let json = serde_json::to_string_pretty(&map).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
    }
    Ok(map)
}
