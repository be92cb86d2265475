//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Graph, ParamStore, Var};
use crate::hash::derive_seed;
use crate::{Error, Result};

/// Absolute floor in the relative-error denominator.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tol: f64,
    /// Parameters with more entries than this are checked on a seeded
    /// random subset of this size.
    pub max_entries_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tol: 1e-4,
            max_entries_per_param: 4096,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Largest `|analytic − numeric|` over the checked entries.
    pub max_abs_error: f64,
    /// Frozen parameters carry no gradient and are not compared.
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn summary_line(&self) -> String {
        let checked: usize = self.params.iter().map(|p| p.checked).sum();
        format!(
            "{} max_rel_error={:.3e} tol={:.0e} entries_checked={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.tol,
            checked
        )
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval<F>(forward: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let root = forward(&mut g, params)?;
    let v = g.value(root).item()?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `forward`'s scalar output against
/// central differences for every (or a sampled subset of every) parameter.
pub fn gradient_check<F>(
    forward: F,
    params: &ParamStore,
    config: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut analytic = params.clone();
    analytic.zero_grad();
    {
        let mut g = Graph::new();
        let root = forward(&mut g, &analytic)?;
        g.backward_into(root, &mut analytic)?;
    }
    eval(&forward, params)?;

    let mut probe = params.clone();
    let mut report = Vec::new();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let entry = params.get(&name)?;
        let n = entry.value.len();
        if params.is_frozen(entry.group) {
            report.push(ParamCheck {
                name,
                entries: n,
                checked: 0,
                max_rel_error: 0.0,
                max_abs_error: 0.0,
                frozen: true,
            });
            continue;
        }
        let indices: Vec<usize> = if n > config.max_entries_per_param {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &name));
            let mut picked = sample(&mut rng, n, config.max_entries_per_param).into_vec();
            picked.sort_unstable();
            picked
        } else {
            (0..n).collect()
        };

        let grad = analytic.grad(&name)?.clone();
        let mut worst: f64 = 0.0;
        let mut worst_abs: f64 = 0.0;
        for &i in &indices {
            let original = probe.value(&name)?.data()[i];
            probe.get_mut(&name)?.value.data_mut()[i] = original + config.step;
            let plus = eval(&forward, &probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = original - config.step;
            let minus = eval(&forward, &probe)?;
            probe.get_mut(&name)?.value.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * config.step);
            worst = worst.max(relative_error(grad.data()[i], numeric));
            worst_abs = worst_abs.max((grad.data()[i] - numeric).abs());
        }
        report.push(ParamCheck {
            name,
            entries: n,
            checked: indices.len(),
            max_rel_error: worst,
            max_abs_error: worst_abs,
            frozen: false,
        });
    }

    let max_rel_error = report.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        passed: max_rel_error < config.tol,
        params: report,
        max_rel_error,
        tol: config.tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{ParamGroup, Tensor};

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "a",
            Tensor::from_rows(&[vec![0.3, -1.2], vec![2.0, 0.7]]).unwrap(),
            ParamGroup::Head,
        )
        .unwrap();
        s.insert("b", Tensor::row(&[0.4, -0.1]), ParamGroup::TextEncoder)
            .unwrap();
        s
    }

    #[test]
    fn sum_of_parameters_has_unit_gradient() {
        let report = gradient_check(
            |g, p| {
                let a = g.param(p, "a")?;
                let b = g.param(p, "b")?;
                let sa = g.sum(a);
                let sb = g.sum(b);
                let s = g.add(sa, sb)?;
                Ok(s)
            },
            &store(),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-10, "{}", report.max_rel_error);
    }

    #[test]
    fn frozen_group_is_skipped_with_zero_gradient() {
        let mut s = store();
        s.freeze(ParamGroup::TextEncoder);
        let f = |g: &mut Graph, p: &ParamStore| {
            let a = g.param(p, "a")?;
            let b = g.param(p, "b")?;
            let x = g.matmul(b, a)?;
            let y = g.softmax(x, 1)?;
            let l = g.ln_clamped(y, 1e-12);
            Ok(g.sum(l))
        };
        let report = gradient_check(f, &s, &GradCheckConfig::default()).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.params.iter().find(|p| p.name == "b").unwrap().frozen);

        let mut analytic = s.clone();
        let mut g = Graph::new();
        let root = f(&mut g, &analytic).unwrap();
        g.backward_into(root, &mut analytic).unwrap();
        assert!(analytic.grad("b").unwrap().data().iter().all(|&v| v == 0.0));
        assert!(analytic.grad("a").unwrap().max_abs() > 0.0);
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu at a kink: analytic derivative 0, finite difference 0.5.
        let mut s = ParamStore::new();
        s.insert("x", Tensor::row(&[0.0]), ParamGroup::Head)
            .unwrap();
        let report = gradient_check(
            |g, p| {
                let x = g.param(p, "x")?;
                let r = g.relu(x);
                Ok(g.sum(r))
            },
            &s,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::row(&[f64::INFINITY]), ParamGroup::Head)
            .unwrap();
        let r = gradient_check(
            |g, p| {
                let x = g.param(p, "x")?;
                Ok(g.sum(x))
            },
            &s,
            &GradCheckConfig::default(),
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
