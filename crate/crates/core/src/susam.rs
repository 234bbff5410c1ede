//! Sparse unified sharpness-aware minimisation.
//!
//! Each local step computes an ascent gradient on strongly augmented data,
//! perturbs the parameters only on the union of a top-k local mask and a
//! random slice of the server's nonintersecting global mask, then descends
//! from the clean parameters using the gradient on the original data taken at
//! the perturbed point.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UfpsError};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GradientMask {
    bits: Vec<bool>,
}

impl GradientMask {
    pub fn empty(len: usize) -> Self {
        GradientMask {
            bits: vec![false; len],
        }
    }

    pub fn full(len: usize) -> Self {
        GradientMask {
            bits: vec![true; len],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        GradientMask { bits }
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Self {
        let mut m = GradientMask::empty(len);
        for i in indices {
            m.bits[i] = true;
        }
        m
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn union(&self, other: &GradientMask) -> Result<GradientMask> {
        check_len(self.len(), other.len())?;
        Ok(GradientMask {
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(&a, &b)| a || b)
                .collect(),
        })
    }
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(UfpsError::LengthMismatch { expected, got })
    }
}

/// Number of entries kept by a fraction of `len`, rounded to nearest.
pub fn topk_count(len: usize, fraction: f64) -> usize {
    ((fraction * len as f64).round() as usize).min(len)
}

/// Keeps the `round(fraction * len)` entries of largest magnitude; ties go to
/// the lower index.
pub fn topk_mask(g: &[f64], fraction: f64) -> GradientMask {
    let k = topk_count(g.len(), fraction);
    let mut order: Vec<usize> = (0..g.len()).collect();
    order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()).then(a.cmp(&b)));
    GradientMask::from_indices(g.len(), order.into_iter().take(k))
}

/// Exponential moving average of gradient magnitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumGrad {
    values: Vec<f64>,
}

impl MomentumGrad {
    /// Starts from `|g|`.
    pub fn from_gradient(g: &[f64]) -> Self {
        MomentumGrad {
            values: g.iter().map(|v| v.abs()).collect(),
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        MomentumGrad { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `G <- alpha * G + (1 - alpha) * |g|`.
    pub fn update(&mut self, g: &[f64], alpha: f64) -> Result<()> {
        check_len(self.values.len(), g.len())?;
        for (m, v) in self.values.iter_mut().zip(g) {
            *m = alpha * *m + (1.0 - alpha) * v.abs();
        }
        Ok(())
    }
}

/// Positions where the per-client masks disagree: set unless the number of
/// clients selecting the position is 0 or all of them.
pub fn merge_global_mask(masks: &[GradientMask]) -> Result<GradientMask> {
    let first = masks
        .first()
        .ok_or_else(|| UfpsError::Config("no masks to merge".into()))?;
    let n = masks.len();
    let mut counts = vec![0usize; first.len()];
    for m in masks {
        check_len(first.len(), m.len())?;
        for (c, &b) in counts.iter_mut().zip(&m.bits) {
            *c += usize::from(b);
        }
    }
    Ok(GradientMask {
        bits: counts.into_iter().map(|c| c != 0 && c != n).collect(),
    })
}

/// Random extra perturbation positions drawn from those in `global` but not
/// in `local`; size `min(floor(fraction * grad_len), |candidates|)`.
pub fn extra_mask(
    local: &GradientMask,
    global: &GradientMask,
    grad_len: usize,
    fraction: f64,
    seed: u64,
) -> Result<GradientMask> {
    check_len(local.len(), global.len())?;
    let candidates: Vec<usize> = (0..local.len())
        .filter(|&i| !local.bits[i] && global.bits[i])
        .collect();
    let budget = (fraction * grad_len as f64 + 1e-9).floor() as usize;
    let k = budget.min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, candidates.len(), k);
    Ok(GradientMask::from_indices(
        local.len(),
        picked.into_iter().map(|j| candidates[j]),
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbMode {
    /// `rho * g / ||g||`.
    SamNorm,
    /// Adaptive: `rho * T^2 g / ||T g||` with `T = diag(|w| + eta)`.
    #[default]
    AsamScaled,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SusamConfig {
    pub rho: f64,
    pub eta: f64,
    /// Fraction of entries kept by the local top-k mask.
    pub local_fraction: f64,
    /// Budget of the extra mask as a fraction of the gradient length.
    pub global_fraction: f64,
    pub momentum: f64,
    /// Masks are refreshed every this many rounds after `start_round`.
    pub refresh_every: usize,
    pub start_round: usize,
    pub mode: PerturbMode,
}

impl Default for SusamConfig {
    fn default() -> Self {
        SusamConfig {
            rho: 0.01,
            eta: 0.001,
            local_fraction: 0.4,
            global_fraction: 0.1,
            momentum: 0.9,
            refresh_every: 5,
            start_round: 300,
            mode: PerturbMode::AsamScaled,
        }
    }
}

impl SusamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rho < 0.0 || self.eta < 0.0 {
            return Err(UfpsError::Config("rho and eta must be non-negative".into()));
        }
        for (name, f) in [
            ("local_fraction", self.local_fraction),
            ("global_fraction", self.global_fraction),
            ("momentum", self.momentum),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(UfpsError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.refresh_every == 0 {
            return Err(UfpsError::Config("refresh_every must be at least 1".into()));
        }
        Ok(())
    }

    pub fn is_refresh_round(&self, round: usize) -> bool {
        round >= self.start_round && (round - self.start_round) % self.refresh_every == 0
    }
}

/// Parameters moved along the (masked) ascent direction.
pub fn ascent_perturbation(
    params: &[f64],
    grad: &[f64],
    mask: &GradientMask,
    cfg: &SusamConfig,
) -> Result<Vec<f64>> {
    check_len(params.len(), grad.len())?;
    check_len(params.len(), mask.len())?;
    let rho = cfg.rho;
    match cfg.mode {
        PerturbMode::SamNorm => {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(UfpsError::ZeroGradient);
            }
            Ok(params
                .iter()
                .zip(grad)
                .zip(&mask.bits)
                .map(|((&w, &g), &m)| if m { w + rho * g / norm } else { w })
                .collect())
        }
        PerturbMode::AsamScaled => {
            let scale: Vec<f64> = params.iter().map(|w| w.abs() + cfg.eta).collect();
            let norm = grad
                .iter()
                .zip(&scale)
                .map(|(g, t)| (t * g).powi(2))
                .sum::<f64>()
                .sqrt();
            if norm == 0.0 {
                return Err(UfpsError::ZeroGradient);
            }
            Ok(params
                .iter()
                .zip(grad)
                .zip(&scale)
                .zip(&mask.bits)
                .map(|(((&w, &g), &t), &m)| if m { w + rho * t * t * g / norm } else { w })
                .collect())
        }
    }
}

/// Per-client sUSAM state carried across steps and rounds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SusamState {
    pub local_mask: Option<GradientMask>,
    pub extra_mask: Option<GradientMask>,
    pub momentum: Option<MomentumGrad>,
}

impl SusamState {
    /// Top-k mask of the momentum gradients, sent to the server.
    pub fn momentum_mask(&self, fraction: f64) -> Option<GradientMask> {
        self.momentum
            .as_ref()
            .map(|m| topk_mask(m.values(), fraction))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepInfo {
    pub refreshed: bool,
    pub perturbed_entries: usize,
    /// The ascent gradient vanished, so no perturbation was applied.
    pub skipped_perturbation: bool,
}

/// Inputs of one sUSAM step that are not gradients.
pub struct StepContext<'a> {
    pub round: usize,
    pub lr: f64,
    /// Seed for drawing the extra mask.
    pub seed: u64,
    pub global_mask: Option<&'a GradientMask>,
}

/// One masked sharpness-aware step on `params`.
///
/// `ascent_grad` evaluates the gradient on augmented data, `descent_grad` on
/// the original data; both are called with the point to evaluate at.
pub fn susam_step<A, D>(
    state: &mut SusamState,
    params: &mut [f64],
    ctx: &StepContext<'_>,
    cfg: &SusamConfig,
    mut ascent_grad: A,
    mut descent_grad: D,
) -> Result<StepInfo>
where
    A: FnMut(&[f64]) -> Result<Vec<f64>>,
    D: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    let g_aug = ascent_grad(params)?;
    check_len(params.len(), g_aug.len())?;

    let refreshed = cfg.is_refresh_round(ctx.round) || state.local_mask.is_none();
    if refreshed {
        let local = topk_mask(&g_aug, cfg.local_fraction);
        match state.momentum.as_mut() {
            Some(m) => m.update(&g_aug, cfg.momentum)?,
            None => state.momentum = Some(MomentumGrad::from_gradient(&g_aug)),
        }
        let extra = match ctx.global_mask {
            Some(global) => extra_mask(&local, global, g_aug.len(), cfg.global_fraction, ctx.seed)?,
            None => GradientMask::empty(local.len()),
        };
        state.local_mask = Some(local);
        state.extra_mask = Some(extra);
    }
    let local = state.local_mask.as_ref().expect("set above");
    let mask = match &state.extra_mask {
        Some(extra) => local.union(extra)?,
        None => local.clone(),
    };
    debug_assert_eq!(
        mask.popcount(),
        local.popcount() + state.extra_mask.as_ref().map_or(0, GradientMask::popcount)
    );

    let (perturbed, skipped) = match ascent_perturbation(params, &g_aug, &mask, cfg) {
        Ok(p) => (p, false),
        Err(UfpsError::ZeroGradient) => (params.to_vec(), true),
        Err(e) => return Err(e),
    };
    let g = descent_grad(&perturbed)?;
    check_len(params.len(), g.len())?;
    for (w, d) in params.iter_mut().zip(&g) {
        *w -= ctx.lr * d;
    }
    if params.iter().any(|w| !w.is_finite()) {
        return Err(UfpsError::Numerical("parameters diverged in sUSAM step".into()));
    }
    Ok(StepInfo {
        refreshed,
        perturbed_entries: mask.popcount(),
        skipped_perturbation: skipped,
    })
}

/// `log |(g_usam - g_base) / g_base|` per entry. Entries where `|g_base|` is
/// below 1e-12 or the two gradients agree exactly are left out and counted.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientRatio {
    pub ratios: Vec<f64>,
    pub excluded: usize,
}

impl GradientRatio {
    /// Fraction of kept entries with ratio above zero ("steep" entries).
    pub fn steep_fraction(&self) -> f64 {
        if self.ratios.is_empty() {
            return 0.0;
        }
        self.ratios.iter().filter(|&&r| r > 0.0).count() as f64 / self.ratios.len() as f64
    }
}

pub fn gradient_ratio(g_usam: &[f64], g_base: &[f64]) -> Result<GradientRatio> {
    check_len(g_base.len(), g_usam.len())?;
    let mut ratios = Vec::with_capacity(g_base.len());
    let mut excluded = 0;
    for (&u, &b) in g_usam.iter().zip(g_base) {
        let diff = u - b;
        if b.abs() < 1e-12 || diff == 0.0 {
            excluded += 1;
        } else {
            ratios.push((diff / b).abs().ln());
        }
    }
    Ok(GradientRatio { ratios, excluded })
}
