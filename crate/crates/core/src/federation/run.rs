use crate::error::{Result, UfpsError};
use crate::model::{self, ParamVector};
use crate::pseudolabel::TeacherSet;
use crate::report::mean_dice;
use crate::synthdata::{derive_seed, ClientDataset, NUM_FOREGROUND};

use super::client::{ClientState, STREAM_GLOBAL_INIT};
use super::config::RunConfig;
use super::server::{AggregationRule, ClientReport, ServerState};

/// Validation result of the global model after one round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    /// Number of completed rounds when the model was validated.
    pub round: usize,
    /// Mean foreground Dice per client, in client order.
    pub val_dice: Vec<f64>,
    /// Mean local training loss per client.
    pub train_loss: Vec<f64>,
    /// Uncertainty-aware weights, when the round aggregated with them.
    pub ua_weights: Option<Vec<f64>>,
    /// Size of the global mask after the round, once masks are exchanged.
    pub global_mask_size: Option<usize>,
}

impl RoundRecord {
    pub fn mean_val_dice(&self) -> f64 {
        self.val_dice.iter().sum::<f64>() / self.val_dice.len() as f64
    }
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub config_hash: String,
    /// Global model after the last round.
    pub final_global: ParamVector,
    /// Global model with the best mean validation Dice (earliest on ties).
    pub best_global: ParamVector,
    pub best_round: usize,
    pub history: Vec<RoundRecord>,
    pub server: ServerState,
}

fn foreground_classes() -> Vec<u8> {
    (1..=NUM_FOREGROUND as u8).collect()
}

/// Mean foreground Dice of `params` on each dataset.
pub fn validate_global(params: &ParamVector, val: &[&ClientDataset]) -> Result<Vec<f64>> {
    let classes = foreground_classes();
    val.iter()
        .map(|d| mean_dice(&d.samples, &classes, |img| model::predict(params, img)))
        .collect()
}

/// The initial global model for a run.
pub fn initial_global(cfg: &RunConfig) -> ParamVector {
    ParamVector::init(cfg.layout(), derive_seed(cfg.seed, &[STREAM_GLOBAL_INIT]))
}

fn train_clients(
    clients: &mut [ClientState],
    server: &ServerState,
    round: usize,
    cfg: &RunConfig,
) -> Result<Vec<ClientReport>> {
    let global = &server.global;
    let mask = server.global_mask.as_ref();
    if cfg.parallel_clients && clients.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = clients
                .iter_mut()
                .map(|c| s.spawn(move || c.local_round(global, mask, round, cfg)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("client thread panicked"))
                .collect()
        })
    } else {
        clients
            .iter_mut()
            .map(|c| c.local_round(global, mask, round, cfg))
            .collect()
    }
}

/// Federated training over `train` with validation on `val` (same client
/// order). `teachers` is required when pseudo labels are enabled.
pub fn run(
    cfg: &RunConfig,
    train: &[&ClientDataset],
    val: &[&ClientDataset],
    teachers: Option<&TeacherSet>,
) -> Result<RunArtifacts> {
    run_with(cfg, train, val, teachers, |_| {})
}

/// [`run`] with a callback after every validated round.
pub fn run_with<F>(
    cfg: &RunConfig,
    train: &[&ClientDataset],
    val: &[&ClientDataset],
    teachers: Option<&TeacherSet>,
    mut on_round: F,
) -> Result<RunArtifacts>
where
    F: FnMut(&RoundRecord),
{
    cfg.validate()?;
    if train.is_empty() || train.len() != val.len() {
        return Err(UfpsError::Config(
            "need one validation split per training client".into(),
        ));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.sort_by_key(|&i| train[i].client_id);
    let train: Vec<&ClientDataset> = order.iter().map(|&i| train[i]).collect();
    let val: Vec<&ClientDataset> = order.iter().map(|&i| val[i]).collect();

    let mut clients = train
        .iter()
        .map(|d| ClientState::new(d, teachers, cfg))
        .collect::<Result<Vec<_>>>()?;
    let counts: Vec<usize> = clients.iter().map(ClientState::num_samples).collect();
    let mut server = ServerState::new(initial_global(cfg), &counts)?;

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ParamVector)> = None;
    for round in 0..cfg.rounds {
        let reports = train_clients(&mut clients, &server, round, cfg)?;
        let rule = AggregationRule {
            use_ua: cfg.uses_ua(round),
            ua_part: cfg.ua_part,
            tau_mu: cfg.ua_tau_mean,
            tau_var: cfg.ua_tau_var,
            update_mask: cfg.report_has_mask(round),
        };
        server.apply(&reports, &rule)?;
        let done = round + 1;
        if done % cfg.eval_every == 0 || done == cfg.rounds {
            let record = RoundRecord {
                round: done,
                val_dice: validate_global(&server.global, &val)?,
                train_loss: reports.iter().map(|r| r.mean_loss).collect(),
                ua_weights: server.ua_weights.clone(),
                global_mask_size: server.global_mask.as_ref().map(|m| m.popcount()),
            };
            let score = record.mean_val_dice();
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, done, server.global.clone()));
            }
            on_round(&record);
            history.push(record);
        }
    }
    let (_, best_round, best_global) = best.expect("at least one round is validated");
    Ok(RunArtifacts {
        config_hash: cfg.hash(),
        final_global: server.global.clone(),
        best_global,
        best_round,
        history,
        server,
    })
}
