//! Layers composed from graph primitives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, ParamGroup, ParamSpec, ParamStore, Var};
use crate::{Error, Result};

/// `x · Wᵀ + b` with `W` stored `out × in`.
pub fn linear(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = g.matmul_t(x, weight)?;
    g.add_bias(y, bias)
}

/// Linear layer looked up by `<prefix>.weight` / `<prefix>.bias`.
pub fn linear_named(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    linear(g, x, w, b)
}

pub fn linear_specs(prefix: &str, out: usize, inp: usize, group: ParamGroup) -> Vec<ParamSpec> {
    vec![
        ParamSpec::weight(format!("{prefix}.weight"), out, inp, group),
        ParamSpec::bias(format!("{prefix}.bias"), out, group),
    ]
}

/// `softmax(Q Kᵀ / √d_k) V`. Returns the output and the attention weights.
pub fn scaled_dot_product_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    d_k: usize,
) -> Result<(Var, Var)> {
    let (nq, dq) = g.value(q).dims2("attention")?;
    let (nk, dk) = g.value(k).dims2("attention")?;
    let (nv, _) = g.value(v).dims2("attention")?;
    if dq != d_k || dk != d_k || nk != nv || nk == 0 {
        return Err(Error::dim(
            "attention",
            format!("Q {nq}x{dq}, K {nk}x{dk}, V rows {nv}, d_k {d_k}"),
        ));
    }
    let logits = g.matmul_t(q, k)?;
    let scaled = g.scale(logits, 1.0 / (d_k as f64).sqrt());
    let weights = g.softmax(scaled, 1)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderBlockConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub ln_eps: f64,
    pub dropout: f64,
}

/// Post-norm transformer encoder block:
/// `x₁ = LN(x + MHA(x))`, `out = LN(x₁ + FFN(x₁))`, FFN = linear → relu → linear.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderBlock {
    pub prefix: String,
    pub config: EncoderBlockConfig,
}

pub struct BlockOutput {
    pub output: Var,
    /// One `L × L` attention matrix per head.
    pub attention: Vec<Var>,
}

impl EncoderBlock {
    pub fn new(prefix: impl Into<String>, config: EncoderBlockConfig) -> Result<EncoderBlock> {
        if config.heads == 0 || !config.d_model.is_multiple_of(config.heads) {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                config.d_model, config.heads
            )));
        }
        Ok(EncoderBlock {
            prefix: prefix.into(),
            config,
        })
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{}", self.prefix, part)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let EncoderBlockConfig {
            d_model: d,
            ffn_hidden: h,
            ..
        } = self.config;
        let group = ParamGroup::Head;
        let mut specs = Vec::new();
        for proj in ["query", "value", "output"] {
            specs.extend(linear_specs(&self.name(proj), d, d, group));
        }
        // A key bias adds a per-query constant to the logits, which softmax
        // discards; it would only carry an identically zero gradient.
        specs.push(ParamSpec::weight(self.name("key.weight"), d, d, group));
        specs.extend(linear_specs(&self.name("ffn_in"), h, d, group));
        specs.extend(linear_specs(&self.name("ffn_out"), d, h, group));
        for norm in ["norm1", "norm2"] {
            specs.push(ParamSpec::gain(
                self.name(&format!("{norm}.gain")),
                d,
                group,
            ));
            specs.push(ParamSpec::bias(
                self.name(&format!("{norm}.shift")),
                d,
                group,
            ));
        }
        specs
    }

    fn norm(&self, g: &mut Graph, store: &ParamStore, which: &str, x: Var) -> Result<Var> {
        let gain = g.param(store, &self.name(&format!("{which}.gain")))?;
        let shift = g.param(store, &self.name(&format!("{which}.shift")))?;
        g.layer_norm(x, gain, shift, self.config.ln_eps)
    }

    /// `rng` enables dropout (training); `None` evaluates deterministically.
    pub fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        mut rng: Option<&mut R>,
    ) -> Result<BlockOutput> {
        let (_, d) = g.value(x).dims2("encoder_block")?;
        if d != self.config.d_model {
            return Err(Error::dim(
                "encoder_block",
                format!("width {d}, expected {}", self.config.d_model),
            ));
        }
        let heads = self.config.heads;
        let d_k = d / heads;

        let q = linear_named(g, store, &self.name("query"), x)?;
        let wk = g.param(store, &self.name("key.weight"))?;
        let k = g.matmul_t(x, wk)?;
        let v = linear_named(g, store, &self.name("value"), x)?;

        let mut head_outputs = Vec::with_capacity(heads);
        let mut attention = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice(q, 1, h * d_k, d_k)?;
            let kh = g.slice(k, 1, h * d_k, d_k)?;
            let vh = g.slice(v, 1, h * d_k, d_k)?;
            let (out, weights) = scaled_dot_product_attention(g, qh, kh, vh, d_k)?;
            head_outputs.push(out);
            attention.push(weights);
        }
        let merged = g.concat(&head_outputs, 1)?;
        let mut attended = linear_named(g, store, &self.name("output"), merged)?;
        if let Some(r) = rng.as_deref_mut() {
            attended = g.dropout(attended, self.config.dropout, r)?;
        }
        let residual = g.add(x, attended)?;
        let x1 = self.norm(g, store, "norm1", residual)?;

        let hidden = linear_named(g, store, &self.name("ffn_in"), x1)?;
        let hidden = g.relu(hidden);
        let mut ffn = linear_named(g, store, &self.name("ffn_out"), hidden)?;
        if let Some(r) = rng {
            ffn = g.dropout(ffn, self.config.dropout, r)?;
        }
        let residual = g.add(x1, ffn)?;
        let output = self.norm(g, store, "norm2", residual)?;

        Ok(BlockOutput { output, attention })
    }
}

#[cfg(test)]
mod tests {
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numeric::{init_params, Tensor};

    fn attend(q: Tensor, k: Tensor, v: Tensor, d_k: usize) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let (q, k, v) = (g.constant(q), g.constant(k), g.constant(v));
        let (out, w) = scaled_dot_product_attention(&mut g, q, k, v, d_k).unwrap();
        (g.value(out).clone(), g.value(w).clone())
    }

    #[test]
    fn identical_keys_average_values() {
        let q = Tensor::from_rows(&[vec![0.3, -2.0], vec![1.0, 1.0]]).unwrap();
        let k = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let v = Tensor::from_rows(&[vec![1.0, 0.0], vec![2.0, 3.0], vec![3.0, 3.0]]).unwrap();
        let (out, _) = attend(q, k, v, 2);
        for r in 0..2 {
            assert!((out.at(r, 0) - 2.0).abs() < 1e-12);
            assert!((out.at(r, 1) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_key_returns_value() {
        let q = Tensor::from_rows(&[vec![5.0, -1.0], vec![0.0, 9.0]]).unwrap();
        let k = Tensor::row(&[0.2, 0.7]);
        let v = Tensor::row(&[4.0, -4.0]);
        let (out, w) = attend(q, k, v, 2);
        assert_eq!(out.data(), &[4.0, -4.0, 4.0, -4.0]);
        assert_eq!(w.data(), &[1.0, 1.0]);
    }

    #[test]
    fn identity_queries_hand_softmax() {
        // logits [[1/√2, 0], [0, 1/√2]]; σ = e^{1/√2} / (e^{1/√2} + 1)
        let (out, w) = attend(
            Tensor::identity(2),
            Tensor::identity(2),
            Tensor::identity(2),
            2,
        );
        let e = (1.0 / 2f64.sqrt()).exp();
        let sigma = e / (e + 1.0);
        assert!((sigma - 0.6698).abs() < 1e-4);
        assert!((w.at(0, 0) - sigma).abs() < 1e-15);
        assert!((w.at(0, 1) - (1.0 - sigma)).abs() < 1e-15);
        assert!((out.at(1, 1) - sigma).abs() < 1e-15);
    }

    #[test]
    fn attention_rejects_mismatched_shapes() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(&[2, 3]));
        let k = g.constant(Tensor::zeros(&[2, 2]));
        assert!(scaled_dot_product_attention(&mut g, q, k, k, 2).is_err());
    }

    fn block(d: usize, heads: usize) -> EncoderBlock {
        EncoderBlock::new(
            "enc",
            EncoderBlockConfig {
                d_model: d,
                heads,
                ffn_hidden: 2 * d,
                ln_eps: 1e-12,
                dropout: 0.0,
            },
        )
        .unwrap()
    }

    #[test]
    fn block_preserves_shape() {
        for (l, d, h) in [(1, 4, 2), (3, 8, 4), (7, 6, 3)] {
            let b = block(d, h);
            let store = init_params(&b.param_specs(), 1).unwrap();
            let mut g = Graph::new();
            let x = g.constant(
                Tensor::new(vec![l, d], (0..l * d).map(|i| (i as f64).sin()).collect()).unwrap(),
            );
            let out = b.forward::<ChaCha8Rng>(&mut g, &store, x, None).unwrap();
            assert_eq!(g.shape(out.output), &[l, d]);
            assert_eq!(out.attention.len(), h);
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let b = block(4, 2);
        let store = init_params(&b.param_specs(), 5).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.1, -0.4, 0.9, 0.3]));
        let out = b.forward::<ChaCha8Rng>(&mut g, &store, x, None).unwrap();
        for w in out.attention {
            assert_eq!(g.value(w).data(), &[1.0]);
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let cfg = EncoderBlockConfig {
            d_model: 6,
            heads: 4,
            ffn_hidden: 8,
            ln_eps: 1e-12,
            dropout: 0.0,
        };
        assert!(matches!(EncoderBlock::new("x", cfg), Err(Error::Config(_))));
    }
}
