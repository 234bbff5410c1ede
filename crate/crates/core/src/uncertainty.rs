//! Per-sample pseudo-label uncertainty, the per-client uncertainty bank, and
//! the loss-weight schedulers driven by it.

use std::collections::VecDeque;
use std::f64::consts::{E, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Result, UfpsError};
use crate::labels::{ClassSet, LabelMap};
use crate::model::ProbMap;

pub const ENTROPY_EPS: f64 = 1e-12;

/// Unified probabilities from teachers that partition the foreground classes:
/// channel `c > 0` is copied from the teacher owning `c`, channel 0 is the
/// mean teacher background, then each pixel is renormalised.
pub fn merged_teacher_probs(probs: &[ProbMap], owned: &[ClassSet]) -> ProbMap {
    assert_eq!(probs.len(), owned.len());
    let first = probs.first().expect("at least one teacher");
    let cn = first.channels();
    let n_teachers = probs.len() as f64;
    let mut data = vec![0.0; first.data().len()];
    for i in 0..first.pixels() {
        let out = &mut data[i * cn..(i + 1) * cn];
        for (p, set) in probs.iter().zip(owned) {
            let px = p.pixel(i);
            out[0] += px[0] / n_teachers;
            for c in set.iter() {
                out[c as usize] = px[c as usize];
            }
        }
        let sum: f64 = out.iter().sum();
        if sum > 0.0 {
            out.iter_mut().for_each(|v| *v /= sum);
        }
    }
    ProbMap::new(first.width(), first.height(), cn, data).expect("shape preserved")
}

/// Per-pixel `-(1/C) sum_c q_c log(q_c + eps)` over all `C` channels.
pub fn entropy_map(q: &ProbMap, eps: f64) -> Vec<f64> {
    let cn = q.channels() as f64;
    (0..q.pixels())
        .map(|i| {
            let h: f64 = q.pixel(i).iter().map(|&p| p * (p + eps).ln()).sum();
            (-h / cn).max(0.0)
        })
        .collect()
}

/// Which classes the per-sample average runs over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassAverage {
    /// Only classes with at least one assigned pixel.
    #[default]
    Present,
    /// Every channel, background included.
    All,
}

/// `U_j = (1/N) sum_c (sum_pix E * onehot_c) / (sum_pix onehot_c + 1)`.
pub fn sample_uncertainty(
    entropy: &[f64],
    labels: &LabelMap,
    channels: usize,
    mode: ClassAverage,
) -> f64 {
    assert_eq!(entropy.len(), labels.len());
    let mut weighted = vec![0.0; channels];
    let mut counts = vec![0usize; channels];
    for (&e, &c) in entropy.iter().zip(labels.classes()) {
        weighted[c as usize] += e;
        counts[c as usize] += 1;
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for c in 0..channels {
        if mode == ClassAverage::All || counts[c] > 0 {
            total += weighted[c] / (counts[c] as f64 + 1.0);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

/// Bounded ring of per-sample uncertainty values; the oldest entry is
/// evicted once `capacity` is reached.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyBank {
    entries: VecDeque<f64>,
    capacity: usize,
    inserted: u64,
}

impl UncertaintyBank {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "bank capacity must be positive");
        UncertaintyBank {
            entries: VecDeque::with_capacity(capacity),
            capacity,
            inserted: 0,
        }
    }

    pub fn push(&mut self, u: f64) {
        assert!(u.is_finite() && u >= 0.0, "uncertainty must be finite and >= 0");
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(u);
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Total number of values ever pushed.
    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn entries(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().copied()
    }

    pub fn stats(&self, quantile: f64) -> Result<BankStats> {
        bank_stats(self, quantile)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankStats {
    pub mean: f64,
    /// Biased (population) variance.
    pub variance: f64,
    pub max: f64,
    pub min: f64,
    /// Nearest-rank quantile at the configured tail fraction.
    pub quantile: f64,
}

impl BankStats {
    pub fn norm(&self, u: f64) -> f64 {
        let range = self.max - self.min;
        if range > 0.0 {
            (u - self.mean) / range
        } else {
            0.0
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.max <= self.min
    }
}

pub fn bank_stats(bank: &UncertaintyBank, quantile: f64) -> Result<BankStats> {
    if bank.is_empty() {
        return Err(UfpsError::EmptyBank);
    }
    let n = bank.len() as f64;
    let mean = bank.entries().sum::<f64>() / n;
    let variance = bank.entries().map(|u| (u - mean).powi(2)).sum::<f64>() / n;
    let mut sorted: Vec<f64> = bank.entries().collect();
    sorted.sort_by(f64::total_cmp);
    let rank = ((quantile * n - 1e-9).ceil() as usize).clamp(1, sorted.len());
    Ok(BankStats {
        mean,
        variance,
        max: sorted[sorted.len() - 1],
        min: sorted[0],
        quantile: sorted[rank - 1],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchedulerKind {
    /// Tail shift.
    TS,
    /// Base decrement.
    BD,
    /// Round-trip Gaussian.
    RG,
}

impl std::str::FromStr for SchedulerKind {
    type Err = UfpsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "TS" => Ok(SchedulerKind::TS),
            "BD" => Ok(SchedulerKind::BD),
            "RG" => Ok(SchedulerKind::RG),
            other => Err(UfpsError::Config(format!("unknown scheduler {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerConfig {
    pub kind: SchedulerKind,
    /// Tail fraction of the bank used for the threshold quantile.
    pub tail_quantile: f64,
    /// Minimal base of the BD exponential.
    pub bd_floor: f64,
    /// Blend between the Gaussian and the plain exponential in RG.
    pub rg_blend: f64,
    /// Width of the RG Gaussian.
    pub rg_width: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            kind: SchedulerKind::TS,
            tail_quantile: 0.7,
            bd_floor: 1.0,
            rg_blend: 0.7,
            rg_width: 0.4,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tail_quantile > 0.0 && self.tail_quantile < 1.0) {
            return Err(UfpsError::Config("tail_quantile must lie in (0, 1)".into()));
        }
        if self.bd_floor > E {
            return Err(UfpsError::Config("bd_floor must not exceed e".into()));
        }
        if !(0.0..=1.0).contains(&self.rg_blend) {
            return Err(UfpsError::Config("rg_blend must lie in [0, 1]".into()));
        }
        if self.rg_width <= 0.0 {
            return Err(UfpsError::Config("rg_width must be positive".into()));
        }
        Ok(())
    }
}

/// Triangular sweep of the RG centre: up to `u_range` at `floor(R/2)` and
/// back down to zero at `R`.
pub fn rg_range(round: usize, total_rounds: usize, u_range: f64) -> f64 {
    let half = total_rounds / 2;
    if half == 0 {
        return 0.0;
    }
    let (r, h) = (round as f64, half as f64);
    if round <= half {
        u_range * r / h
    } else {
        u_range - u_range * (r - h) / h
    }
}

/// Loss weight `w(U)` for a sample with uncertainty `u`. A bank with
/// `max == min` carries no information and yields weight 1.
pub fn schedule_weight(
    u: f64,
    stats: &BankStats,
    round: usize,
    total_rounds: usize,
    cfg: &SchedulerConfig,
) -> f64 {
    if stats.is_degenerate() {
        return 1.0;
    }
    let norm = stats.norm(u);
    let progress = if total_rounds == 0 {
        0.0
    } else {
        round as f64 / total_rounds as f64
    };
    match cfg.kind {
        SchedulerKind::TS => {
            if u > stats.quantile {
                2.0 - (norm - progress).exp()
            } else {
                2.0 - norm.exp()
            }
        }
        SchedulerKind::BD => {
            let base = (cfg.bd_floor - E) * progress + E;
            2.0 - base.powf(norm)
        }
        SchedulerKind::RG => {
            let u_range = stats.norm(stats.quantile) - stats.norm(stats.min);
            let centre = stats.norm(stats.mean) + rg_range(round, total_rounds, u_range);
            let width = cfg.rg_width;
            let gauss = (-(norm - centre).powi(2) / (2.0 * width * width)).exp()
                / ((2.0 * PI).sqrt() * width);
            (1.0 - cfg.rg_blend) * gauss + cfg.rg_blend * (2.0 - norm.exp())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::Provenance;

    fn bank(values: &[f64]) -> UncertaintyBank {
        let mut b = UncertaintyBank::new(values.len().max(1));
        values.iter().for_each(|&v| b.push(v));
        b
    }

    #[test]
    fn entropy_examples() {
        let one_hot = ProbMap::new(1, 1, 5, vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        assert!(entropy_map(&one_hot, ENTROPY_EPS)[0] < 1e-10);
        let uniform = ProbMap::new(1, 1, 5, vec![0.2; 5]).unwrap();
        let e = entropy_map(&uniform, ENTROPY_EPS)[0];
        assert!((e - 5f64.ln() / 5.0).abs() < 1e-10);
        assert!((e - 0.3219).abs() < 1e-4);
    }

    #[test]
    fn uncertainty_examples() {
        let labels = LabelMap::uniform(4, 1, vec![2; 4], Provenance::Pseudo).unwrap();
        assert_eq!(sample_uncertainty(&[0.0; 4], &labels, 5, ClassAverage::Present), 0.0);
        let u = sample_uncertainty(&[0.3; 4], &labels, 5, ClassAverage::Present);
        assert!((u - 0.3 * 4.0 / 5.0).abs() < 1e-15);
        let all = sample_uncertainty(&[0.3; 4], &labels, 5, ClassAverage::All);
        assert!((all - 0.3 * 4.0 / 5.0 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn single_teacher_probs_pass_through() {
        let p = ProbMap::new(1, 2, 3, vec![0.5, 0.3, 0.2, 0.1, 0.6, 0.3]).unwrap();
        let merged = merged_teacher_probs(&[p.clone()], &[ClassSet::foreground(2)]);
        for (a, b) in merged.data().iter().zip(p.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn bank_stat_examples() {
        let s = bank(&[1.0, 1.0, 1.0]).stats(0.7).unwrap();
        assert_eq!((s.mean, s.variance, s.max, s.min), (1.0, 0.0, 1.0, 1.0));
        let s = bank(&[0.0, 2.0]).stats(0.7).unwrap();
        assert_eq!((s.mean, s.variance), (1.0, 1.0));
        let ten: Vec<f64> = [9.0, 3.0, 7.0, 1.0, 5.0, 0.0, 8.0, 2.0, 6.0, 4.0].to_vec();
        assert_eq!(bank(&ten).stats(0.7).unwrap().quantile, 6.0);
        assert!(matches!(
            UncertaintyBank::new(3).stats(0.7),
            Err(UfpsError::EmptyBank)
        ));
    }

    #[test]
    fn bank_evicts_oldest() {
        let mut b = UncertaintyBank::new(3);
        for v in 0..5 {
            b.push(v as f64);
        }
        assert_eq!(b.entries().collect::<Vec<_>>(), vec![2.0, 3.0, 4.0]);
        assert_eq!(b.inserted(), 5);
    }

    #[test]
    fn scheduler_examples() {
        let stats = bank(&[0.1, 0.2, 0.4, 0.5, 0.8]).stats(0.7).unwrap();
        let ts = SchedulerConfig::default();
        assert!((schedule_weight(stats.mean, &stats, 50, 500, &ts) - 1.0).abs() < 1e-15);

        let bd = SchedulerConfig {
            kind: SchedulerKind::BD,
            ..ts
        };
        for u in [0.1, 0.3, 0.8] {
            let w0 = schedule_weight(u, &stats, 0, 500, &bd);
            assert!((w0 - (2.0 - stats.norm(u).exp())).abs() < 1e-15);
            assert_eq!(schedule_weight(u, &stats, 500, 500, &bd), 1.0);
        }

        let flat = bank(&[0.3, 0.3]).stats(0.7).unwrap();
        assert_eq!(schedule_weight(0.9, &flat, 10, 500, &ts), 1.0);
    }

    #[test]
    fn scheduler_parsing_and_validation() {
        assert_eq!("RG".parse::<SchedulerKind>().unwrap(), SchedulerKind::RG);
        assert!("XX".parse::<SchedulerKind>().is_err());
        let bad = SchedulerConfig {
            tail_quantile: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
