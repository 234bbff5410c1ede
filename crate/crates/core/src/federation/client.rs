use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, UfpsError};
use crate::labels::{ClassSet, LabelMap};
use crate::losses::{bce_loss, calculate_loss, dice_loss, LossBranch, LossSchedule};
use crate::model::{self, backward_pass, forward_pass, ParamVector, PixelGrid};
use crate::pseudolabel::{gmt_refine, overwrite_ground_truth, run_teachers, Teacher, TeacherSet};
use crate::susam::{susam_step, GradientMask, StepContext, SusamState};
use crate::synthdata::{derive_seed, strong_augment, ClientDataset, Sample};
use crate::uncertainty::{
    entropy_map, merged_teacher_probs, sample_uncertainty, schedule_weight, BankStats,
    UncertaintyBank, ENTROPY_EPS,
};

use super::config::RunConfig;
use super::server::ClientReport;

/// Seed streams. Every random draw in training is keyed by
/// `derive_seed(cfg.seed, [stream, ...])`.
pub const STREAM_GLOBAL_INIT: u64 = 1;
pub const STREAM_TEACHER_INIT: u64 = 2;
pub const STREAM_TEACHER_SHUFFLE: u64 = 3;
pub const STREAM_SHUFFLE: u64 = 4;
pub const STREAM_AUGMENT: u64 = 5;
pub const STREAM_EXTRA_MASK: u64 = 6;

/// Visiting order of `n` samples for one epoch.
pub fn epoch_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// One training example as seen by the loss.
pub struct BatchItem<'a> {
    pub image: &'a PixelGrid,
    pub target: &'a LabelMap,
    pub active: ClassSet,
    pub weight: f64,
}

/// Mean composite loss and its parameter gradient over a batch. Per-sample
/// gradients are summed in batch order and then divided by the batch size.
pub fn batch_gradient(
    params: &ParamVector,
    items: &[BatchItem<'_>],
    round: usize,
    schedule: &LossSchedule,
) -> Result<(f64, Vec<f64>)> {
    let n = params.len();
    let mut total = vec![0.0; n];
    let mut sample_grad = vec![0.0; n];
    let mut loss = 0.0;
    for item in items {
        let pass = forward_pass(params, item.image)?;
        let (report, upstream) =
            calculate_loss(pass.probs(), item.target, item.active, round, schedule, item.weight);
        sample_grad.iter_mut().for_each(|g| *g = 0.0);
        backward_pass(params, item.image, &pass, &upstream, &mut sample_grad)?;
        for (t, g) in total.iter_mut().zip(&sample_grad) {
            *t += g;
        }
        loss += report.total;
    }
    let b = items.len() as f64;
    total.iter_mut().for_each(|g| *g /= b);
    Ok((loss / b, total))
}

fn dice_bce_gradient(
    params: &ParamVector,
    batch: &[(&PixelGrid, &LabelMap)],
    active: ClassSet,
) -> Result<(f64, Vec<f64>)> {
    let n = params.len();
    let mut total = vec![0.0; n];
    let mut sample_grad = vec![0.0; n];
    let mut loss = 0.0;
    for (image, target) in batch {
        let pass = forward_pass(params, image)?;
        let dice = dice_loss(pass.probs(), target, active);
        let bce = bce_loss(pass.probs(), target, active);
        let upstream: Vec<f64> = dice.grad.iter().zip(&bce.grad).map(|(a, b)| a + b).collect();
        sample_grad.iter_mut().for_each(|g| *g = 0.0);
        backward_pass(params, image, &pass, &upstream, &mut sample_grad)?;
        for (t, g) in total.iter_mut().zip(&sample_grad) {
            *t += g;
        }
        loss += dice.loss + bce.loss;
    }
    let b = batch.len() as f64;
    total.iter_mut().for_each(|g| *g /= b);
    Ok((loss / b, total))
}

fn cosine(lr: f64, step: usize, total: usize) -> f64 {
    0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

/// Trains a fresh model on one client's annotated classes plus background.
pub fn train_teacher(dataset: &ClientDataset, cfg: &RunConfig) -> Result<Teacher> {
    if dataset.annotated.is_empty() {
        return Err(UfpsError::Config(format!(
            "client {} has no annotated classes",
            dataset.client_id
        )));
    }
    let id = dataset.client_id as u64;
    let mut params = ParamVector::init(
        cfg.layout(),
        derive_seed(cfg.seed, &[STREAM_TEACHER_INIT, id]),
    );
    let targets: Vec<LabelMap> = dataset
        .samples
        .iter()
        .map(|s| s.labels.partial_target(dataset.annotated))
        .collect();
    let active = dataset.annotated.with(0);
    for epoch in 0..cfg.pretrain_epochs {
        let lr = cosine(cfg.pretrain_lr, epoch, cfg.pretrain_epochs);
        let order = epoch_order(
            dataset.len(),
            derive_seed(cfg.seed, &[STREAM_TEACHER_SHUFFLE, id, epoch as u64]),
        );
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&PixelGrid, &LabelMap)> = chunk
                .iter()
                .map(|&j| (&dataset.samples[j].image, &targets[j]))
                .collect();
            let (_, g) = dice_bce_gradient(&params, &batch, active)?;
            for (w, d) in params.values_mut().iter_mut().zip(&g) {
                *w -= lr * d;
            }
        }
    }
    if !params.is_finite() {
        return Err(UfpsError::Numerical("teacher parameters diverged".into()));
    }
    Ok(Teacher {
        params,
        owned: dataset.annotated,
    })
}

/// Pretrains one teacher per client and merges them in ascending class order.
pub fn pretrain_teachers(datasets: &[&ClientDataset], cfg: &RunConfig) -> Result<TeacherSet> {
    let teachers = if cfg.parallel_clients && datasets.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = datasets
                .iter()
                .map(|d| s.spawn(move || train_teacher(d, cfg).map_err(|e| e.for_client(d.client_id))))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("teacher thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        datasets
            .iter()
            .map(|d| train_teacher(d, cfg).map_err(|e| e.for_client(d.client_id)))
            .collect::<Result<Vec<_>>>()?
    };
    TeacherSet::ascending(teachers)
}

/// Teacher-derived quantities for one training sample. Teachers are frozen,
/// so these are computed once.
#[derive(Clone, Debug)]
struct CachedSample {
    teacher_merged: LabelMap,
    pseudo: LabelMap,
    uncertainty: f64,
}

/// Everything one client keeps between rounds.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub client_id: usize,
    pub annotated: ClassSet,
    samples: Vec<Sample>,
    partial_targets: Vec<LabelMap>,
    cache: Vec<CachedSample>,
    bank: UncertaintyBank,
    susam: SusamState,
}

impl ClientState {
    pub fn new(
        dataset: &ClientDataset,
        teachers: Option<&TeacherSet>,
        cfg: &RunConfig,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(UfpsError::Config(format!(
                "client {} has no training samples",
                dataset.client_id
            )));
        }
        let cache = match (cfg.modules.pseudo_labels, teachers) {
            (false, _) => Vec::new(),
            (true, None) => {
                return Err(UfpsError::Config(
                    "pseudo labels are enabled but no teachers were given".into(),
                ))
            }
            (true, Some(t)) => dataset
                .samples
                .iter()
                .map(|s| cache_sample(s, t, dataset.annotated, cfg))
                .collect::<Result<_>>()
                .map_err(|e| e.for_client(dataset.client_id))?,
        };
        Ok(ClientState {
            client_id: dataset.client_id,
            annotated: dataset.annotated,
            partial_targets: dataset
                .samples
                .iter()
                .map(|s| s.labels.partial_target(dataset.annotated))
                .collect(),
            samples: dataset.samples.clone(),
            cache,
            bank: UncertaintyBank::new(dataset.len()),
            susam: SusamState::default(),
        })
    }

    pub fn num_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn bank(&self) -> &UncertaintyBank {
        &self.bank
    }

    pub fn susam_state(&self) -> &SusamState {
        &self.susam
    }

    /// Cached per-sample uncertainties (empty without pseudo labels).
    pub fn uncertainties(&self) -> Vec<f64> {
        self.cache.iter().map(|c| c.uncertainty).collect()
    }

    /// Cached pseudo label (teacher merge with ground-truth overwrite).
    pub fn pseudo_label(&self, j: usize) -> Option<&LabelMap> {
        self.cache.get(j).map(|c| &c.pseudo)
    }

    fn bank_stats(&self, cfg: &RunConfig) -> Result<BankStats> {
        self.bank.stats(cfg.scheduler.tail_quantile)
    }

    /// Local training for one global round starting from `global`.
    pub fn local_round(
        &mut self,
        global: &ParamVector,
        global_mask: Option<&GradientMask>,
        round: usize,
        cfg: &RunConfig,
    ) -> Result<ClientReport> {
        self.local_round_inner(global, global_mask, round, cfg)
            .map_err(|e| e.for_client(self.client_id))
    }

    fn local_round_inner(
        &mut self,
        global: &ParamVector,
        global_mask: Option<&GradientMask>,
        round: usize,
        cfg: &RunConfig,
    ) -> Result<ClientReport> {
        if round >= cfg.rounds {
            return Err(UfpsError::Config(format!(
                "round {round} is past the last round {}",
                cfg.rounds - 1
            )));
        }
        let schedule = cfg.loss_schedule();
        let branch = schedule.branch(round);
        let id = self.client_id as u64;
        let n = self.samples.len();
        let active = cfg.active_classes(self.annotated);
        let lr = cfg.lr_at(round);
        let weighted = cfg.modules.weight_scheduler && branch == LossBranch::Weighted;

        let targets: Vec<LabelMap> = if !cfg.modules.pseudo_labels {
            Vec::new()
        } else if cfg.uses_gmt(round) {
            self.samples
                .iter()
                .zip(&self.cache)
                .map(|(s, c)| {
                    let classes = model::predict(global, &s.image)?;
                    let pred = LabelMap::uniform(
                        s.image.width(),
                        s.image.height(),
                        classes,
                        crate::labels::Provenance::Pseudo,
                    )?;
                    let refined = gmt_refine(&pred, &c.teacher_merged, cfg.gmt_threshold);
                    Ok(overwrite_ground_truth(&refined, &s.labels, self.annotated))
                })
                .collect::<Result<_>>()?
        } else {
            self.cache.iter().map(|c| c.pseudo.clone()).collect()
        };
        let targets: &[LabelMap] = if cfg.modules.pseudo_labels {
            &targets
        } else {
            &self.partial_targets
        };

        let mut params = global.clone();
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for epoch in 0..cfg.local_epochs {
            let order = epoch_order(
                n,
                derive_seed(cfg.seed, &[STREAM_SHUFFLE, id, round as u64, epoch as u64]),
            );
            for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
                if cfg.needs_bank() {
                    for &j in chunk {
                        self.bank.push(self.cache[j].uncertainty);
                    }
                }
                let weights: Vec<f64> = if weighted {
                    let stats = self.bank_stats(cfg)?;
                    chunk
                        .iter()
                        .map(|&j| {
                            schedule_weight(
                                self.cache[j].uncertainty,
                                &stats,
                                round,
                                cfg.rounds,
                                &cfg.scheduler,
                            )
                            .max(cfg.min_loss_weight)
                        })
                        .collect()
                } else {
                    vec![1.0; chunk.len()]
                };
                let items: Vec<BatchItem<'_>> = chunk
                    .iter()
                    .zip(&weights)
                    .map(|(&j, &weight)| BatchItem {
                        image: &self.samples[j].image,
                        target: &targets[j],
                        active,
                        weight,
                    })
                    .collect();

                if cfg.uses_susam(round) {
                    let augmented: Vec<PixelGrid> = chunk
                        .iter()
                        .map(|&j| {
                            strong_augment(
                                &self.samples[j].image,
                                &cfg.augment,
                                derive_seed(
                                    cfg.seed,
                                    &[STREAM_AUGMENT, id, round as u64, epoch as u64, j as u64],
                                ),
                            )
                        })
                        .collect();
                    let aug_items: Vec<BatchItem<'_>> = items
                        .iter()
                        .zip(&augmented)
                        .map(|(it, img)| BatchItem {
                            image: img,
                            target: it.target,
                            active: it.active,
                            weight: it.weight,
                        })
                        .collect();
                    let layout = params.layout();
                    let ctx = StepContext {
                        round,
                        lr,
                        seed: derive_seed(
                            cfg.seed,
                            &[STREAM_EXTRA_MASK, id, round as u64, epoch as u64, b as u64],
                        ),
                        global_mask,
                    };
                    let mut batch_loss = 0.0;
                    susam_step(
                        &mut self.susam,
                        params.values_mut(),
                        &ctx,
                        &cfg.susam,
                        |w| {
                            let p = ParamVector::from_values(layout, w.to_vec())?;
                            Ok(batch_gradient(&p, &aug_items, round, &schedule)?.1)
                        },
                        |w| {
                            let p = ParamVector::from_values(layout, w.to_vec())?;
                            let (l, g) = batch_gradient(&p, &items, round, &schedule)?;
                            batch_loss = l;
                            Ok(g)
                        },
                    )?;
                    loss_sum += batch_loss;
                } else {
                    let (l, g) = batch_gradient(&params, &items, round, &schedule)?;
                    for (w, d) in params.values_mut().iter_mut().zip(&g) {
                        *w -= lr * d;
                    }
                    loss_sum += l;
                }
                batches += 1;
            }
        }
        if !params.is_finite() {
            return Err(UfpsError::Numerical("local parameters diverged".into()));
        }

        let stats = if cfg.report_has_stats(round) {
            let s = self.bank_stats(cfg)?;
            Some((s.mean, s.variance))
        } else {
            None
        };
        let mask = if cfg.report_has_mask(round) {
            Some(
                self.susam
                    .momentum_mask(cfg.susam.local_fraction)
                    .ok_or_else(|| UfpsError::Numerical("no momentum gradient yet".into()))?,
            )
        } else {
            None
        };
        Ok(ClientReport {
            client_id: self.client_id,
            params,
            num_samples: n,
            stats,
            mask,
            mean_loss: loss_sum / batches as f64,
            branch,
        })
    }
}

fn cache_sample(
    sample: &Sample,
    teachers: &TeacherSet,
    annotated: ClassSet,
    cfg: &RunConfig,
) -> Result<CachedSample> {
    let out = run_teachers(teachers, &sample.image)?;
    let pseudo = overwrite_ground_truth(&out.merged, &sample.labels, annotated);
    let owned: Vec<ClassSet> = teachers.teachers().iter().map(|t| t.owned).collect();
    let q = merged_teacher_probs(&out.probs, &owned);
    let entropy = entropy_map(&q, ENTROPY_EPS);
    let uncertainty =
        sample_uncertainty(&entropy, &pseudo, q.channels(), cfg.uncertainty_average);
    Ok(CachedSample {
        teacher_merged: out.merged,
        pseudo,
        uncertainty,
    })
}
