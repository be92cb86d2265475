//! Reverse-mode gradients of every primitive against central differences,
//! plus the value-level invariants of softmax and layer norm.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sarcasm_core::numeric::nn::{linear, EncoderBlock, EncoderBlockConfig};
use sarcasm_core::numeric::{
    gradient_check, init_params, GradCheckConfig, Graph, ParamGroup, ParamStore, Tensor, Var,
};
use sarcasm_core::Result;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect(),
    )
    .unwrap()
}

fn store_of(rng: &mut ChaCha8Rng, params: &[(&str, &[usize])]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, shape) in params {
        s.insert(*name, random_tensor(rng, shape), ParamGroup::Head)
            .unwrap();
    }
    s
}

/// Reduces an arbitrary tensor to a scalar through a fixed random weighting,
/// so that every output entry carries a distinct upstream gradient.
fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.constant(random_tensor(&mut rng, &shape));
    let flat_len: usize = shape.iter().product();
    let xf = g.reshape(x, &[1, flat_len])?;
    let wf = g.reshape(w, &[1, flat_len])?;
    let dot = g.matmul_t(xf, wf)?;
    Ok(g.sum(dot))
}

fn check(store: &ParamStore, f: impl Fn(&mut Graph, &ParamStore) -> Result<Var>) {
    let report = gradient_check(f, store, &GradCheckConfig::default()).unwrap();
    assert!(
        report.passed,
        "{}\n{:#?}",
        report.summary_line(),
        report.params
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matmul_and_linear_gradients(n in 1usize..4, k in 1usize..5, m in 1usize..4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = store_of(&mut rng, &[("a", &[n, k]), ("b", &[k, m]), ("w", &[m, k]), ("bias", &[m])]);
        check(&s, |g, p| {
            let a = g.param(p, "a")?;
            let b = g.param(p, "b")?;
            let c = g.matmul(a, b)?;
            let w = g.param(p, "w")?;
            let bias = g.param(p, "bias")?;
            let l = linear(g, a, w, bias)?;
            let both = g.add(c, l)?;
            weighted_sum(g, both, 1)
        });
    }

    #[test]
    fn softmax_gradients_both_axes(r in 1usize..4, c in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = store_of(&mut rng, &[("x", &[r, c])]);
        check(&s, |g, p| {
            let x = g.param(p, "x")?;
            let s0 = g.softmax(x, 0)?;
            let s1 = g.softmax(x, 1)?;
            let t = g.add(s0, s1)?;
            weighted_sum(g, t, 2)
        });
    }

    // At width 2 a normalized row is (±1, ∓1) whatever x is, so dx is
    // identically zero and only rounding noise is left to compare.
    #[test]
    fn layer_norm_relu_gradients(r in 1usize..4, d in 3usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = store_of(&mut rng, &[("x", &[r, d]), ("gamma", &[d]), ("beta", &[d])]);
        check(&s, |g, p| {
            let x = g.param(p, "x")?;
            let gamma = g.param(p, "gamma")?;
            let beta = g.param(p, "beta")?;
            let y = g.layer_norm(x, gamma, beta, 1e-12)?;
            let y = g.relu(y);
            weighted_sum(g, y, 3)
        });
    }

    #[test]
    fn structural_op_gradients(r in 1usize..4, d in 2usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = store_of(&mut rng, &[("a", &[r, d]), ("b", &[2, d]), ("s", &[1]), ("table", &[5, d])]);
        check(&s, |g, p| {
            let a = g.param(p, "a")?;
            let b = g.param(p, "b")?;
            let rows = g.concat(&[a, b], 0)?;
            let cols = g.concat(&[a, a], 1)?;
            let piece = g.slice(cols, 1, 1, d)?;
            let t = g.transpose(rows)?;
            let tt = g.transpose(t)?;
            let sc = g.param(p, "s")?;
            let scaled = g.scale_by(tt, sc)?;
            let mean = g.mean_rows(scaled)?;
            let table = g.param(p, "table")?;
            let gathered = g.gather(table, &[4, 0, 4])?;
            let gm = g.mean_rows(gathered)?;
            let sum_rows = g.add(mean, gm)?;
            let aff = g.affine(sum_rows, -0.5, 3.0);
            let w1 = weighted_sum(g, piece, 4)?;
            let w2 = weighted_sum(g, aff, 5)?;
            let total = g.add(w1, w2)?;
            Ok(g.scale(total, 0.7))
        });
    }

    #[test]
    fn log_gradients(n in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = store_of(&mut rng, &[("x", &[1, n])]);
        check(&s, |g, p| {
            let x = g.param(p, "x")?;
            let y = g.softmax(x, 1)?;
            let l = g.ln_clamped(y, 1e-12);
            weighted_sum(g, l, 6)
        });
    }

    #[test]
    fn softmax_is_a_distribution(r in 1usize..6, c in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, &[r, c]).map(|v| v * 20.0);
        for axis in 0..2 {
            let y = x.softmax(axis).unwrap();
            prop_assert!(y.data().iter().all(|&v| v >= 0.0));
            let (lines, len) = if axis == 1 { (r, c) } else { (c, r) };
            for line in 0..lines {
                let total: f64 = (0..len)
                    .map(|k| if axis == 1 { y.at(line, k) } else { y.at(k, line) })
                    .sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(r in 1usize..5, d in 2usize..16, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = random_tensor(&mut rng, &[r, d]);
        // keep every row's variance well above the epsilon scale
        for row in 0..r {
            x.data_mut()[row * d] += 3.0;
        }
        let mut g = Graph::new();
        let xv = g.constant(x);
        let gamma = g.constant(Tensor::ones(&[d]));
        let beta = g.constant(Tensor::zeros(&[d]));
        let y = g.layer_norm(xv, gamma, beta, 1e-12).unwrap();
        let y = g.value(y);
        for row in 0..r {
            let vals = y.row_slice(row);
            let mean = vals.iter().sum::<f64>() / d as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-10);
        }
    }
}

fn toy_block() -> EncoderBlock {
    EncoderBlock::new(
        "enc",
        EncoderBlockConfig {
            d_model: 8,
            heads: 2,
            ffn_hidden: 12,
            ln_eps: 1e-12,
            dropout: 0.0,
        },
    )
    .unwrap()
}

#[test]
fn encoder_block_gradients_match_finite_differences() {
    let block = toy_block();
    let mut store = init_params(&block.param_specs(), 17).unwrap();
    // Non-trivial gains and shifts so their gradients are exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for name in [
        "enc.norm1.gain",
        "enc.norm1.shift",
        "enc.norm2.gain",
        "enc.norm2.shift",
        "enc.query.bias",
    ] {
        let shape = store.value(name).unwrap().shape().to_vec();
        store
            .set_value(name, random_tensor(&mut rng, &shape))
            .unwrap();
    }
    store
        .insert("input", random_tensor(&mut rng, &[5, 8]), ParamGroup::Head)
        .unwrap();

    check(&store, |g, p| {
        let x = g.param(p, "input")?;
        let out = block.forward::<ChaCha8Rng>(g, p, x, None)?;
        weighted_sum(g, out.output, 9)
    });
}

#[test]
fn forward_passes_are_bit_identical() {
    let block = toy_block();
    let store = init_params(&block.param_specs(), 3).unwrap();
    let run = || {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = g.constant(random_tensor(&mut rng, &[4, 8]));
        let out = block
            .forward(&mut g, &store, x, None::<&mut ChaCha8Rng>)
            .unwrap();
        g.value(out.output).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn seeded_dropout_is_reproducible() {
    let mut cfg = toy_block().config;
    cfg.dropout = 0.3;
    let block = EncoderBlock::new("enc", cfg).unwrap();
    let store = init_params(&block.param_specs(), 3).unwrap();
    let run = |seed: u64| {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 8], 0.25));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = block.forward(&mut g, &store, x, Some(&mut rng)).unwrap();
        g.value(out.output).clone()
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn linear_with_identity_is_passthrough() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, -2.0, 3.5]]).unwrap());
    let w = g.constant(Tensor::identity(3));
    let b = g.constant(Tensor::zeros(&[3]));
    let y = linear(&mut g, x, w, b).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, -2.0, 3.5]);
}
