//! Random-search hyperparameter sampling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::trainers::{HyperValue, Hyperparams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ParamRange {
    LogUniform([f64; 2]),
    Uniform([f64; 2]),
    Choice(Vec<HyperValue>),
}

impl ParamRange {
    pub fn validate(&self, key: &str) -> Result<()> {
        match self {
            ParamRange::LogUniform([lo, hi]) => {
                if !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo <= hi) {
                    return Err(Error::Config(format!(
                        "{key}: log_uniform bounds must satisfy 0 < low <= high, got [{lo}, {hi}]"
                    )));
                }
            }
            ParamRange::Uniform([lo, hi]) => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(Error::Config(format!(
                        "{key}: uniform bounds must satisfy low <= high, got [{lo}, {hi}]"
                    )));
                }
            }
            ParamRange::Choice(v) if v.is_empty() => {
                return Err(Error::Config(format!("{key}: empty choice list")));
            }
            ParamRange::Choice(_) => {}
        }
        Ok(())
    }

    fn sample(&self, rng: &mut Rng) -> HyperValue {
        match self {
            ParamRange::LogUniform([lo, hi]) => {
                if lo == hi {
                    return HyperValue::Num(*lo);
                }
                let (a, b) = (lo.ln(), hi.ln());
                HyperValue::Num((a + (b - a) * rng.uniform_f64()).exp().clamp(*lo, *hi))
            }
            ParamRange::Uniform([lo, hi]) => HyperValue::Num(lo + (hi - lo) * rng.uniform_f64()),
            ParamRange::Choice(v) => v[rng.below(v.len())].clone(),
        }
    }
}

/// Ranges keyed by hyperparameter name.
pub type SearchSpace = BTreeMap<String, ParamRange>;

/// One assignment, drawn key by key in sorted order.
pub fn sample_hyperparams(space: &SearchSpace, rng: &mut Rng) -> Result<Hyperparams> {
    if space.is_empty() {
        return Err(Error::Argument("cannot sample from an empty search space".into()));
    }
    let mut out = Hyperparams::new();
    for (k, r) in space {
        r.validate(k)?;
        out.insert(k.clone(), r.sample(rng));
    }
    Ok(out)
}

/// Learning-rate range used when a campaign gives no space for a trainer.
pub fn default_search_space(trainer: &str) -> SearchSpace {
    let lr = match trainer {
        "bptt" => [0.05, 1.0],
        "eprop" | "ottt" | "sltt" | "local_readout" => [0.1, 3.0],
        "dfa" => [0.01, 0.3],
        "drtp" => [0.005, 0.2],
        "stdp" => [0.1, 2.0],
        "rstdp" => [0.001, 0.1],
        _ => [1e-4, 1e-2],
    };
    BTreeMap::from([("lr".to_string(), ParamRange::LogUniform(lr))])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(r: ParamRange) -> SearchSpace {
        BTreeMap::from([("lr".to_string(), r)])
    }

    fn num(h: &Hyperparams) -> f64 {
        match h["lr"] {
            HyperValue::Num(v) => v,
            _ => unreachable!(),
        }
    }

    #[test]
    fn degenerate_range() {
        let mut rng = Rng::new(0);
        for r in [ParamRange::LogUniform([0.3, 0.3]), ParamRange::Uniform([0.3, 0.3])] {
            for _ in 0..20 {
                assert_eq!(num(&sample_hyperparams(&space(r.clone()), &mut rng).unwrap()), 0.3);
            }
        }
    }

    #[test]
    fn log_uniform_bounds_and_flatness() {
        let s = space(ParamRange::LogUniform([1e-4, 1e-1]));
        let mut rng = Rng::new(11);
        let n = 10_000;
        let mut u: Vec<f64> = (0..n)
            .map(|_| {
                let v = num(&sample_hyperparams(&s, &mut rng).unwrap());
                assert!((1e-4..=1e-1).contains(&v));
                (v.ln() - 1e-4f64.ln()) / (1e-1f64.ln() - 1e-4f64.ln())
            })
            .collect();
        u.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // Kolmogorov-Smirnov distance to U(0,1); the 1% critical value is 1.63/sqrt(n).
        let d = u
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                ((i + 1) as f64 / n as f64 - x)
                    .abs()
                    .max((x - i as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.63 / (n as f64).sqrt(), "KS distance {d}");
    }

    #[test]
    fn invalid_bounds() {
        let mut rng = Rng::new(0);
        assert!(sample_hyperparams(&space(ParamRange::LogUniform([0.0, 1.0])), &mut rng).is_err());
        assert!(sample_hyperparams(&space(ParamRange::Uniform([2.0, 1.0])), &mut rng).is_err());
        assert!(sample_hyperparams(&space(ParamRange::Choice(vec![])), &mut rng).is_err());
        assert!(sample_hyperparams(&SearchSpace::new(), &mut rng).is_err());
    }
}
