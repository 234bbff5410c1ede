//! Independent reference implementations shared by the integration tests.
//! They follow the written formulas directly and share no code with the
//! library beyond plain data types.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ufps_core::labels::{ClassSet, LabelMap, Provenance};
use ufps_core::model::PixelGrid;
use ufps_core::synthdata::{generate_client, ClientDataset, ClientSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_grid(rng: &mut ChaCha8Rng, w: usize, h: usize) -> PixelGrid {
    PixelGrid::new(w, h, (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_labels(rng: &mut ChaCha8Rng, w: usize, h: usize, classes: u8) -> LabelMap {
    let c = (0..w * h).map(|_| rng.random_range(0..classes)).collect();
    LabelMap::uniform(w, h, c, Provenance::Pseudo).unwrap()
}

/// A small partially annotated client on a 32x32 grid.
pub fn tiny_client(id: usize, annotated: &[u8], n: usize, seed: u64) -> ClientDataset {
    let set: ClassSet = annotated.iter().copied().collect();
    let spec = ClientSpec {
        width: 32,
        height: 32,
        ..ClientSpec::new(id, set, 0.02 * id as f64)
    };
    generate_client(&spec, n, seed).unwrap()
}

/// `-(1/C) sum_c q log(q + eps)` for one pixel.
pub fn entropy(q: &[f64], eps: f64) -> f64 {
    let mut s = 0.0;
    for &p in q {
        s += p * (p + eps).ln();
    }
    -s / q.len() as f64
}

/// Per-class summation form of the sample uncertainty.
pub fn sample_uncertainty(e: &[f64], classes: &[u8], channels: usize, present_only: bool) -> f64 {
    let mut terms = Vec::new();
    for c in 0..channels {
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &k) in classes.iter().enumerate() {
            if k as usize == c {
                num += e[i];
                den += 1.0;
            }
        }
        if !present_only || den > 0.0 {
            terms.push(num / (den + 1.0));
        }
    }
    if terms.is_empty() {
        0.0
    } else {
        terms.iter().sum::<f64>() / terms.len() as f64
    }
}

/// Softmax without max subtraction (inputs in tests are small).
fn softmax(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().map(|x| x.exp()).sum();
    v.iter().map(|x| x.exp() / s).collect()
}

pub fn ua_weights(mu: &[f64], var: &[f64], a: &[f64], tau_mu: f64, tau_var: f64) -> Vec<f64> {
    let m: Vec<f64> = mu.iter().map(|x| -x / tau_mu).collect();
    let v: Vec<f64> = var.iter().map(|x| -x / tau_var).collect();
    let (sm, sv) = (softmax(&m), softmax(&v));
    (0..a.len()).map(|i| (sm[i] + sv[i] + a[i]) / 3.0).collect()
}

/// Bank statistics straight from the definitions.
pub struct Stats {
    pub mean: f64,
    pub var: f64,
    pub max: f64,
    pub min: f64,
    pub quantile: f64,
}

pub fn stats(values: &[f64], t: f64) -> Stats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    // Nearest rank: the smallest value with at least t * n entries at or below it.
    let mut quantile = sorted[sorted.len() - 1];
    for (i, &v) in sorted.iter().enumerate() {
        if (i + 1) as f64 >= t * n - 1e-9 {
            quantile = v;
            break;
        }
    }
    Stats {
        mean,
        var,
        max: sorted[sorted.len() - 1],
        min: sorted[0],
        quantile,
    }
}

pub fn norm(u: f64, s: &Stats) -> f64 {
    (u - s.mean) / (s.max - s.min)
}

pub fn ts_weight(u: f64, s: &Stats, r: usize, big_r: usize) -> f64 {
    let n = norm(u, s);
    if u > s.quantile {
        2.0 - (n - r as f64 / big_r as f64).exp()
    } else {
        2.0 - n.exp()
    }
}

pub fn bd_weight(u: f64, s: &Stats, r: usize, big_r: usize, alpha: f64) -> f64 {
    let e = std::f64::consts::E;
    let base = (alpha - e) / big_r as f64 * r as f64 + e;
    2.0 - base.powf(norm(u, s))
}

pub fn rg_weight(u: f64, s: &Stats, r: usize, big_r: usize, beta: f64, width: f64) -> f64 {
    let half = (big_r / 2) as f64;
    let u_range = norm(s.quantile, s) - norm(s.min, s);
    let range = if (r as f64) <= half {
        u_range * r as f64 / half
    } else {
        u_range - u_range * (r as f64 - half) / half
    };
    let x = norm(u, s) - norm(s.mean, s) - range;
    let g = (-(x * x) / (2.0 * width * width)).exp() / ((2.0 * std::f64::consts::PI).sqrt() * width);
    (1.0 - beta) * g + beta * (2.0 - norm(u, s).exp())
}

/// Positions selected by some but not all of the masks.
pub fn global_mask(masks: &[Vec<bool>]) -> Vec<bool> {
    let n = masks.len();
    (0..masks[0].len())
        .map(|i| {
            let s = masks.iter().filter(|m| m[i]).count();
            s != 0 && s != n
        })
        .collect()
}

pub fn extra_mask_size(local: &[bool], global: &[bool], frac: f64) -> usize {
    let candidates = local.iter().zip(global).filter(|(l, g)| !**l && **g).count();
    let budget = (frac * local.len() as f64 + 1e-9).floor() as usize;
    budget.min(candidates)
}

/// Confusion counts by a plain double loop over pixel coordinates.
pub fn confusion(pred: &[u8], gt: &[u8], w: usize, h: usize, c: u8) -> (u64, u64, u64, u64) {
    let (mut tp, mut tn, mut fp, mut fn_) = (0, 0, 0, 0);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            match (pred[i] == c, gt[i] == c) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
            }
        }
    }
    (tp, tn, fp, fn_)
}

/// O(n m) Hausdorff distance with the empty-set conventions.
pub fn hausdorff(a: &[(usize, usize)], b: &[(usize, usize)], diag: f64) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    if a.is_empty() || b.is_empty() {
        return diag;
    }
    let d = |p: (usize, usize), q: (usize, usize)| {
        let dx = p.0 as f64 - q.0 as f64;
        let dy = p.1 as f64 - q.1 as f64;
        (dx * dx + dy * dy).sqrt()
    };
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| {
        from.iter()
            .map(|&p| to.iter().map(|&q| d(p, q)).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max)
    };
    directed(a, b).max(directed(b, a))
}
