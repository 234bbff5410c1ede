use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, UfpsError};
use crate::labels::ClassSet;
use crate::losses::LossSchedule;
use crate::model::{ModelLayout, Part};
use crate::susam::SusamConfig;
use crate::synthdata::{AugmentParams, SplitSizes, NUM_FOREGROUND};
use crate::uncertainty::{ClassAverage, SchedulerConfig};

/// Switches for the individual protocol components. Everything off with
/// pseudo labels on is the FedAvg* baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Modules {
    pub pseudo_labels: bool,
    pub weight_scheduler: bool,
    pub arce: bool,
    pub ua: bool,
    pub gmt: bool,
    pub susam: bool,
}

impl Modules {
    pub const ALL: Modules = Modules {
        pseudo_labels: true,
        weight_scheduler: true,
        arce: true,
        ua: true,
        gmt: true,
        susam: true,
    };

    pub const NONE: Modules = Modules {
        pseudo_labels: false,
        weight_scheduler: false,
        arce: false,
        ua: false,
        gmt: false,
        susam: false,
    };
}

impl Default for Modules {
    fn default() -> Self {
        Modules::ALL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Global rounds R.
    pub rounds: usize,
    /// Local epochs per round K.
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub hidden1: usize,
    pub hidden2: usize,
    pub split: SplitSizes,

    pub warmup_rounds: usize,
    pub ws_end_round: usize,
    pub ua_start_round: usize,
    pub gmt_start_round: usize,
    pub arce_start_round: usize,
    pub arce_coeff: f64,

    pub ua_tau_mean: f64,
    pub ua_tau_var: f64,
    pub ua_part: Part,
    pub gmt_threshold: f64,
    pub uncertainty_average: ClassAverage,
    /// Floor applied to scheduler weights so a sample loss is never negated.
    pub min_loss_weight: f64,

    pub modules: Modules,
    pub susam: SusamConfig,
    pub scheduler: SchedulerConfig,
    pub augment: AugmentParams,

    /// Validate the global model every this many rounds (and after the last).
    pub eval_every: usize,
    pub parallel_clients: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            rounds: 500,
            local_epochs: 1,
            batch_size: 4,
            lr: 0.5,
            lr_min: 0.0,
            pretrain_epochs: 60,
            pretrain_lr: 0.5,
            hidden1: 16,
            hidden2: 16,
            split: SplitSizes::default(),
            warmup_rounds: 10,
            ws_end_round: 200,
            ua_start_round: 300,
            gmt_start_round: 300,
            arce_start_round: 200,
            arce_coeff: 0.01,
            ua_tau_mean: 0.05,
            ua_tau_var: 0.001,
            ua_part: Part::Decoder,
            gmt_threshold: 0.8,
            uncertainty_average: ClassAverage::Present,
            min_loss_weight: 0.05,
            modules: Modules::ALL,
            susam: SusamConfig::default(),
            scheduler: SchedulerConfig::default(),
            augment: AugmentParams::default(),
            eval_every: 1,
            parallel_clients: true,
        }
    }
}

impl RunConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(s).map_err(|e| UfpsError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UfpsError::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    /// Hex SHA-256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }

    /// Same protocol with every round boundary rescaled to `rounds` total.
    pub fn rescaled(&self, rounds: usize) -> Self {
        let scale = |r: usize| ((r as f64) * rounds as f64 / self.rounds as f64).round() as usize;
        let mut out = self.clone();
        out.rounds = rounds;
        out.warmup_rounds = scale(self.warmup_rounds);
        out.ws_end_round = scale(self.ws_end_round);
        out.ua_start_round = scale(self.ua_start_round);
        out.gmt_start_round = scale(self.gmt_start_round);
        out.arce_start_round = scale(self.arce_start_round);
        out.susam.start_round = scale(self.susam.start_round);
        out
    }

    /// FedAvg with teacher pseudo labels and nothing else.
    pub fn fedavg_star(&self) -> Self {
        RunConfig {
            modules: Modules {
                pseudo_labels: true,
                ..Modules::NONE
            },
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(UfpsError::Config(m.to_string()));
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return err("rounds, local_epochs and batch_size must be positive");
        }
        if self.hidden1 == 0 || self.hidden2 == 0 {
            return err("hidden sizes must be positive");
        }
        if self.split.train == 0 || self.split.val == 0 || self.split.test == 0 {
            return err("every split needs at least one sample");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.lr_min < 0.0 || self.pretrain_lr <= 0.0 {
            return err("learning rates must be positive");
        }
        if self.warmup_rounds > self.ws_end_round || self.ws_end_round > self.rounds {
            return err("need warmup_rounds <= ws_end_round <= rounds");
        }
        for (name, r) in [
            ("ua_start_round", self.ua_start_round),
            ("gmt_start_round", self.gmt_start_round),
            ("susam.start_round", self.susam.start_round),
            ("arce_start_round", self.arce_start_round),
        ] {
            if r > self.rounds {
                return Err(UfpsError::Config(format!("{name} exceeds rounds")));
            }
        }
        if self.ua_tau_mean <= 0.0 || self.ua_tau_var <= 0.0 {
            return err("UA temperatures must be positive");
        }
        if !(self.gmt_threshold > 0.0 && self.gmt_threshold <= 1.0) {
            return err("gmt_threshold must lie in (0, 1]");
        }
        if self.min_loss_weight <= 0.0 {
            return err("min_loss_weight must be positive");
        }
        if self.eval_every == 0 {
            return err("eval_every must be positive");
        }
        let m = self.modules;
        if !m.pseudo_labels && (m.weight_scheduler || m.ua || m.gmt) {
            return err("weight_scheduler, ua and gmt need pseudo_labels");
        }
        self.susam.validate()?;
        self.scheduler.validate()?;
        self.augment.validate()?;
        Ok(())
    }

    pub fn layout(&self) -> ModelLayout {
        ModelLayout::new(self.hidden1, self.hidden2, NUM_FOREGROUND)
    }

    pub fn loss_schedule(&self) -> LossSchedule {
        LossSchedule {
            total_rounds: self.rounds,
            warmup: self.warmup_rounds,
            ws_end: self.ws_end_round,
            arce_start: self.arce_start_round,
            arce_coeff: self.arce_coeff,
            arce_enabled: self.modules.arce,
        }
    }

    /// Cosine decay from `lr` to `lr_min` over the run.
    pub fn lr_at(&self, round: usize) -> f64 {
        let t = round as f64 / self.rounds as f64;
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn report_has_stats(&self, round: usize) -> bool {
        self.modules.ua && round >= self.ua_start_round
    }

    pub fn report_has_mask(&self, round: usize) -> bool {
        self.modules.susam && round >= self.susam.start_round
    }

    pub fn uses_susam(&self, round: usize) -> bool {
        self.report_has_mask(round)
    }

    pub fn uses_gmt(&self, round: usize) -> bool {
        self.modules.gmt && round >= self.gmt_start_round
    }

    pub fn uses_ua(&self, round: usize) -> bool {
        self.report_has_stats(round)
    }

    /// Whether sample uncertainties need to be banked.
    pub fn needs_bank(&self) -> bool {
        self.modules.weight_scheduler || self.modules.ua
    }

    /// Classes the loss runs over for a client annotating `annotated`.
    pub fn active_classes(&self, annotated: ClassSet) -> ClassSet {
        if self.modules.pseudo_labels {
            ClassSet::all(NUM_FOREGROUND)
        } else {
            annotated.with(0)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::from_json_str(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json_str(r#"{"rounds": 10, "bogus": 1}"#).is_err());
        assert!(RunConfig::from_json_str(r#"{"susam": {"rho": 0.1, "nope": 2}}"#).is_err());
        let partial = RunConfig::from_json_str(r#"{"susam": {"rho": 0.1}}"#).unwrap();
        assert_eq!(partial.susam.rho, 0.1);
        assert_eq!(partial.susam.local_fraction, 0.4);
    }

    #[test]
    fn rescale_keeps_ratios() {
        let cfg = RunConfig::default().rescaled(150);
        assert_eq!(cfg.warmup_rounds, 3);
        assert_eq!(cfg.ws_end_round, 60);
        assert_eq!(cfg.susam.start_round, 90);
        cfg.validate().unwrap();
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr_at(0), cfg.lr);
        assert!(cfg.lr_at(cfg.rounds).abs() < 1e-15);
    }

    #[test]
    fn modules_need_pseudo_labels() {
        let cfg = RunConfig {
            modules: Modules {
                pseudo_labels: false,
                ..Modules::ALL
            },
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
