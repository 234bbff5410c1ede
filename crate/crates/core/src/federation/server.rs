use std::ops::Range;

use crate::error::{Result, UfpsError};
use crate::losses::LossBranch;
use crate::model::{ParamVector, Part};
use crate::susam::{merge_global_mask, GradientMask};

/// What a client uploads after its local epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientReport {
    pub client_id: usize,
    pub params: ParamVector,
    pub num_samples: usize,
    /// Bank mean and variance, present once uncertainty-aware aggregation starts.
    pub stats: Option<(f64, f64)>,
    /// Top-k mask of the momentum gradient, present once sUSAM starts.
    pub mask: Option<GradientMask>,
    /// Mean training loss over the round, for logging.
    pub mean_loss: f64,
    /// Loss branch the round trained with.
    pub branch: LossBranch,
}

/// `A_i = N_i / sum_j N_j`.
pub fn proportional_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(UfpsError::Config("sample counts must be positive".into()));
    }
    let total: usize = counts.iter().sum();
    Ok(counts.iter().map(|&n| n as f64 / total as f64).collect())
}

fn softmax(values: impl Iterator<Item = f64>) -> Vec<f64> {
    let v: Vec<f64> = values.collect();
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Uncertainty-aware weights: the mean of `softmax(-mu / tau_mu)`,
/// `softmax(-var / tau_var)` and the proportional weights.
pub fn ua_weights(
    mu: &[f64],
    var: &[f64],
    proportional: &[f64],
    tau_mu: f64,
    tau_var: f64,
) -> Result<Vec<f64>> {
    let n = proportional.len();
    for len in [mu.len(), var.len()] {
        if len != n {
            return Err(UfpsError::LengthMismatch {
                expected: n,
                got: len,
            });
        }
    }
    if !(tau_mu > 0.0 && tau_var > 0.0) {
        return Err(UfpsError::Config("UA temperatures must be positive".into()));
    }
    let sm_mu = softmax(mu.iter().map(|m| -m / tau_mu));
    let sm_var = softmax(var.iter().map(|s| -s / tau_var));
    Ok((0..n)
        .map(|i| (sm_mu[i] + sm_var[i] + proportional[i]) / 3.0)
        .collect())
}

/// Weighted parameter average. Indices inside `scoped.0` use the weights in
/// `scoped.1`, every other index uses `weights`. Clients are accumulated in
/// slice order, so callers pass reports sorted by client id.
pub fn aggregate(
    params: &[&ParamVector],
    weights: &[f64],
    scoped: Option<(Range<usize>, &[f64])>,
) -> Result<ParamVector> {
    let first = *params
        .first()
        .ok_or_else(|| UfpsError::Config("aggregation needs at least one client".into()))?;
    let check = |len: usize, expected: usize| {
        if len == expected {
            Ok(())
        } else {
            Err(UfpsError::LengthMismatch { expected, got: len })
        }
    };
    check(weights.len(), params.len())?;
    if let Some((range, w)) = &scoped {
        check(w.len(), params.len())?;
        if range.end > first.len() {
            return Err(UfpsError::LengthMismatch {
                expected: first.len(),
                got: range.end,
            });
        }
    }
    for p in params {
        check(p.len(), first.len())?;
        if p.layout() != first.layout() {
            return Err(UfpsError::Config("client layouts differ".into()));
        }
    }
    let mut out = vec![0.0; first.len()];
    for (k, p) in params.iter().enumerate() {
        for (i, (o, v)) in out.iter_mut().zip(p.values()).enumerate() {
            let w = match &scoped {
                Some((range, sw)) if range.contains(&i) => sw[k],
                _ => weights[k],
            };
            *o += w * v;
        }
    }
    ParamVector::from_values(first.layout(), out)
}

/// Global model, global mask and the weights used in the latest round.
#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    pub global: ParamVector,
    pub global_mask: Option<GradientMask>,
    pub weights: Vec<f64>,
    /// Uncertainty-aware weights of the latest round, if they were used.
    pub ua_weights: Option<Vec<f64>>,
    pub round: usize,
}

/// Settings for one aggregation step.
pub struct AggregationRule {
    pub use_ua: bool,
    pub ua_part: Part,
    pub tau_mu: f64,
    pub tau_var: f64,
    pub update_mask: bool,
}

impl ServerState {
    pub fn new(global: ParamVector, sample_counts: &[usize]) -> Result<Self> {
        Ok(ServerState {
            global,
            global_mask: None,
            weights: proportional_weights(sample_counts)?,
            ua_weights: None,
            round: 0,
        })
    }

    /// Aggregates one round of reports (sorted by client id) and advances the
    /// round counter.
    pub fn apply(&mut self, reports: &[ClientReport], rule: &AggregationRule) -> Result<()> {
        let counts: Vec<usize> = reports.iter().map(|r| r.num_samples).collect();
        self.weights = proportional_weights(&counts)?;
        let params: Vec<&ParamVector> = reports.iter().map(|r| &r.params).collect();
        self.ua_weights = None;
        let scoped = if rule.use_ua {
            let mut mu = Vec::with_capacity(reports.len());
            let mut var = Vec::with_capacity(reports.len());
            for r in reports {
                let (m, v) = r.stats.ok_or_else(|| {
                    UfpsError::Config(format!("client {} sent no stats", r.client_id))
                })?;
                mu.push(m);
                var.push(v);
            }
            let ua = ua_weights(&mu, &var, &self.weights, rule.tau_mu, rule.tau_var)?;
            self.ua_weights = Some(ua);
            Some(self.global.layout().span(rule.ua_part))
        } else {
            None
        };
        self.global = aggregate(
            &params,
            &self.weights,
            scoped.zip(self.ua_weights.as_deref()),
        )?;
        if rule.update_mask {
            let masks: Vec<GradientMask> = reports
                .iter()
                .map(|r| {
                    r.mask.clone().ok_or_else(|| {
                        UfpsError::Config(format!("client {} sent no mask", r.client_id))
                    })
                })
                .collect::<Result<_>>()?;
            self.global_mask = Some(merge_global_mask(&masks)?);
        }
        self.round += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelLayout;

    #[test]
    fn proportional_examples() {
        let w = proportional_weights(&[40, 40, 40]).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(proportional_weights(&[10, 30]).unwrap(), vec![0.25, 0.75]);
        assert!(proportional_weights(&[10, 0]).is_err());
    }

    #[test]
    fn ua_two_client_example() {
        let w = ua_weights(&[0.1, 0.2], &[0.01, 0.01], &[0.5, 0.5], 0.05, 0.001).unwrap();
        // softmax(-2, -4) = (e^2, 1) / (e^2 + 1)
        let s = 2f64.exp() / (2f64.exp() + 1.0);
        assert!((w[0] - (s + 1.0) / 3.0).abs() < 1e-12);
        assert!((w[0] - 0.62693).abs() < 5e-6);
        assert!((w[1] - 0.37307).abs() < 5e-6);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ua_symmetric_and_flat_limits() {
        let w = ua_weights(&[0.3; 3], &[0.2; 3], &[1.0 / 3.0; 3], 0.05, 0.001).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
        let flat = ua_weights(&[0.1, 0.9], &[0.0, 0.0], &[0.5, 0.5], 1e12, 1.0).unwrap();
        assert!((flat[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn aggregate_fixed_points() {
        let layout = ModelLayout::new(3, 3, 4);
        let p = ParamVector::init(layout, 4);
        assert_eq!(aggregate(&[&p], &[1.0], None).unwrap(), p);
        assert_eq!(aggregate(&[&p, &p], &[0.25, 0.75], None).unwrap(), p);
        let short = ParamVector::init(ModelLayout::new(2, 2, 4), 1);
        assert!(matches!(
            aggregate(&[&p, &short], &[0.5, 0.5], None),
            Err(UfpsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn scoped_aggregation_splits_by_part() {
        let layout = ModelLayout::new(3, 3, 4);
        let a = ParamVector::init(layout, 1);
        let b = ParamVector::init(layout, 2);
        let (w, ua) = ([0.5, 0.5], [0.8, 0.2]);
        let dec = layout.span(Part::Decoder);
        let out = aggregate(&[&a, &b], &w, Some((dec.clone(), &ua))).unwrap();
        for i in 0..layout.param_count() {
            let (wa, wb) = if dec.contains(&i) { (0.8, 0.2) } else { (0.5, 0.5) };
            let expect = 0.0 + wa * a.values()[i] + wb * b.values()[i];
            assert_eq!(out.values()[i], expect);
        }
    }
}
