//! Synthetic 2D "organ" segmentation data with per-client domain shift and
//! partial annotation, plus the parametric strong augmentation used for the
//! ascent step of sUSAM.
//!
//! Four foreground classes, each with its own shape family:
//!
//! | id | organ    | shape              |
//! |----|----------|--------------------|
//! | 1  | liver    | disk               |
//! | 2  | kidney   | twin ellipses      |
//! | 3  | spleen   | ring               |
//! | 4  | pancreas | small irregular blob |

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use crate::labels::{ClassSet, LabelMap, Provenance, BACKGROUND};
use crate::error::{Result, UfpsError};
use crate::model::PixelGrid;

pub const NUM_FOREGROUND: usize = 4;
pub const LIVER: u8 = 1;
pub const KIDNEY: u8 = 2;
pub const SPLEEN: u8 = 3;
pub const PANCREAS: u8 = 4;

pub const CLASS_NAMES: [&str; NUM_FOREGROUND + 1] =
    ["background", "liver", "kidney", "spleen", "pancreas"];

const FILE_MAGIC: &[u8; 4] = b"UFPS";
const FILE_VERSION: u32 = 1;
/// Bit set on a stored label byte when the label is withheld.
const UNKNOWN_FLAG: u8 = 0x80;

/// Mixes a base seed with stream identifiers (SplitMix64 finaliser).
pub fn derive_seed(base: u64, stream: &[u64]) -> u64 {
    let mut z = base;
    for &s in stream {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(s);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    TwinEllipses,
    Ring,
    Blob,
}

impl ShapeKind {
    pub fn for_class(class: u8) -> ShapeKind {
        match class {
            LIVER => ShapeKind::Disk,
            KIDNEY => ShapeKind::TwinEllipses,
            SPLEEN => ShapeKind::Ring,
            PANCREAS => ShapeKind::Blob,
            other => panic!("no shape for class {other}"),
        }
    }

    /// Inclusive pixel-area bounds for a shape drawn on a grid whose smaller
    /// side is `side` pixels. Rasterisation slack of one perimeter is allowed.
    pub fn area_bounds(self, side: usize) -> (f64, f64) {
        let s = side as f64;
        let (lo, hi) = match self {
            ShapeKind::Disk => {
                let (r0, r1) = (0.14 * s, 0.18 * s);
                (PI * r0 * r0 - 2.0 * PI * r0, PI * r1 * r1 + 2.0 * PI * r1)
            }
            ShapeKind::TwinEllipses => {
                let (a0, b0, a1, b1) = (0.05 * s, 0.08 * s, 0.07 * s, 0.10 * s);
                (
                    2.0 * (PI * a0 * b0 - PI * (a0 + b0)),
                    2.0 * (PI * a1 * b1 + PI * (a1 + b1)),
                )
            }
            ShapeKind::Ring => {
                let (r0, r1) = (0.11 * s, 0.14 * s);
                let lo = PI * r0 * r0 * (1.0 - 0.6 * 0.6) - 2.0 * PI * (r0 + 0.6 * r0);
                let hi = PI * r1 * r1 * (1.0 - 0.45 * 0.45) + 2.0 * PI * (r1 + 0.45 * r1);
                (lo, hi)
            }
            ShapeKind::Blob => {
                // Radius varies within r0 * [0.55, 1.45].
                let (r0, r1) = (0.06 * s * 0.55, 0.08 * s * 1.45);
                (PI * r0 * r0 - 2.0 * PI * r0, PI * r1 * r1 + 2.0 * PI * r1)
            }
        };
        (lo.max(1.0), hi)
    }
}

/// A concrete shape instance, relative to its centre.
#[derive(Clone, Debug)]
enum Shape {
    Disk { r: f64 },
    TwinEllipses { a: f64, b: f64, offset: f64 },
    Ring { outer: f64, inner: f64 },
    Blob { r0: f64, k: f64, phase1: f64, phase2: f64 },
}

impl Shape {
    fn sample(kind: ShapeKind, side: f64, rng: &mut ChaCha8Rng) -> Shape {
        match kind {
            ShapeKind::Disk => Shape::Disk {
                r: side * rng.random_range(0.14..0.18),
            },
            ShapeKind::TwinEllipses => {
                let a = side * rng.random_range(0.05..0.07);
                let b = side * rng.random_range(0.08..0.10);
                let offset = a + side * rng.random_range(0.04..0.06);
                Shape::TwinEllipses { a, b, offset }
            }
            ShapeKind::Ring => {
                let outer = side * rng.random_range(0.11..0.14);
                let inner = outer * rng.random_range(0.45..0.6);
                Shape::Ring { outer, inner }
            }
            ShapeKind::Blob => Shape::Blob {
                r0: side * rng.random_range(0.06..0.08),
                k: f64::from(rng.random_range(2u8..=4)),
                phase1: rng.random_range(0.0..2.0 * PI),
                phase2: rng.random_range(0.0..2.0 * PI),
            },
        }
    }

    /// Half extents of the bounding box.
    fn half_extent(&self) -> (f64, f64) {
        match *self {
            Shape::Disk { r } => (r, r),
            Shape::TwinEllipses { a, b, offset } => (offset + a, b),
            Shape::Ring { outer, .. } => (outer, outer),
            Shape::Blob { r0, .. } => (1.45 * r0, 1.45 * r0),
        }
    }

    fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Shape::Disk { r } => dx * dx + dy * dy <= r * r,
            Shape::TwinEllipses { a, b, offset } => {
                let inside = |ex: f64| (ex / a).powi(2) + (dy / b).powi(2) <= 1.0;
                inside(dx - offset) || inside(dx + offset)
            }
            Shape::Ring { outer, inner } => {
                let d2 = dx * dx + dy * dy;
                d2 <= outer * outer && d2 >= inner * inner
            }
            Shape::Blob {
                r0,
                k,
                phase1,
                phase2,
            } => {
                let theta = dy.atan2(dx);
                let r = r0
                    * (1.0 + 0.3 * (k * theta + phase1).sin() + 0.15 * (2.0 * k * theta + phase2).sin());
                dx * dx + dy * dy <= r * r
            }
        }
    }
}

/// Distribution a client draws its images from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientSpec {
    pub client_id: usize,
    pub width: usize,
    pub height: usize,
    pub annotated: ClassSet,
    /// Base intensity per class id, background first.
    pub class_base: [f64; NUM_FOREGROUND + 1],
    pub intensity_offset: f64,
    pub noise_sigma: f64,
}

impl ClientSpec {
    pub fn new(client_id: usize, annotated: ClassSet, intensity_offset: f64) -> Self {
        ClientSpec {
            client_id,
            width: 64,
            height: 64,
            annotated,
            class_base: [-0.6, -0.15, 0.5, 0.2, 0.8],
            intensity_offset,
            noise_sigma: 0.1,
        }
    }

    /// Every foreground class annotated.
    pub fn fully_annotated(&self) -> bool {
        self.annotated == ClassSet::foreground(NUM_FOREGROUND)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: PixelGrid,
    pub labels: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub annotated: ClassSet,
    pub seed: u64,
    pub samples: Vec<Sample>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Train / validation / test splits of one client.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientSplits {
    pub spec: ClientSpec,
    pub train: ClientDataset,
    pub val: ClientDataset,
    pub test: ClientDataset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 40,
            val: 8,
            test: 16,
        }
    }
}

fn to_f32_grid(v: f64) -> f64 {
    f64::from(v as f32)
}

fn generate_sample(spec: &ClientSpec, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let (w, h) = (spec.width, spec.height);
    let side = w.min(h) as f64;
    let mut classes = vec![BACKGROUND; w * h];
    let mut boxes: Vec<(f64, f64, f64, f64)> = Vec::with_capacity(NUM_FOREGROUND);

    for class in 1..=NUM_FOREGROUND as u8 {
        let shape = Shape::sample(ShapeKind::for_class(class), side, rng);
        let (hx, hy) = shape.half_extent();
        if 2.0 * hx + 2.0 > w as f64 || 2.0 * hy + 2.0 > h as f64 {
            return Err(UfpsError::Config(format!(
                "shape for class {class} does not fit a {w}x{h} grid"
            )));
        }
        let mut placed = None;
        for _ in 0..500 {
            let cx = rng.random_range(hx + 1.0..w as f64 - hx - 1.0);
            let cy = rng.random_range(hy + 1.0..h as f64 - hy - 1.0);
            let b = (cx - hx - 1.0, cy - hy - 1.0, cx + hx + 1.0, cy + hy + 1.0);
            let overlaps = boxes
                .iter()
                .any(|o| b.0 < o.2 && o.0 < b.2 && b.1 < o.3 && o.1 < b.3);
            if !overlaps {
                placed = Some((cx, cy, b));
                break;
            }
        }
        let (cx, cy, b) = placed.ok_or_else(|| {
            UfpsError::Config(format!("cannot place all shapes on a {w}x{h} grid"))
        })?;
        boxes.push(b);
        let x0 = (b.0.floor().max(0.0)) as usize;
        let y0 = (b.1.floor().max(0.0)) as usize;
        let x1 = (b.2.ceil() as usize).min(w - 1);
        let y1 = (b.3.ceil() as usize).min(h - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if shape.contains(x as f64 + 0.5 - cx, y as f64 + 0.5 - cy) {
                    classes[y * w + x] = class;
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0))
        .map_err(|e| UfpsError::Config(format!("noise sigma: {e}")))?;
    let intensity = classes
        .iter()
        .map(|&c| {
            let v = spec.class_base[c as usize] + spec.intensity_offset + noise.sample(rng);
            to_f32_grid(v.clamp(-1.0, 1.0))
        })
        .collect();

    let full = spec.fully_annotated();
    let provenance = classes
        .iter()
        .map(|&c| {
            if spec.annotated.contains(c) || (c == BACKGROUND && full) {
                Provenance::GroundTruth
            } else {
                Provenance::Unknown
            }
        })
        .collect();

    Ok(Sample {
        image: PixelGrid::new(w, h, intensity)?,
        labels: LabelMap::new(w, h, classes, provenance)?,
    })
}

pub fn generate_client(spec: &ClientSpec, n_samples: usize, seed: u64) -> Result<ClientDataset> {
    if n_samples == 0 {
        return Err(UfpsError::Config("n_samples must be at least 1".into()));
    }
    if spec.annotated.is_empty() {
        return Err(UfpsError::Config(format!(
            "client {} annotates no class",
            spec.client_id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..n_samples)
        .map(|_| generate_sample(spec, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(ClientDataset {
        client_id: spec.client_id,
        annotated: spec.annotated,
        seed,
        samples,
    })
}

pub fn generate_splits(spec: &ClientSpec, sizes: SplitSizes, seed: u64) -> Result<ClientSplits> {
    let id = spec.client_id as u64;
    Ok(ClientSplits {
        spec: spec.clone(),
        train: generate_client(spec, sizes.train, derive_seed(seed, &[id, 0]))?,
        val: generate_client(spec, sizes.val, derive_seed(seed, &[id, 1]))?,
        test: generate_client(spec, sizes.test, derive_seed(seed, &[id, 2]))?,
    })
}

/// Three in-federation clients with disjoint annotations plus one fully
/// annotated held-out client.
#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub clients: Vec<ClientSplits>,
    pub heldout: ClientSplits,
}

impl Benchmark {
    /// In-federation clients followed by the held-out one.
    pub fn all_clients(&self) -> impl Iterator<Item = &ClientSplits> {
        self.clients.iter().chain(std::iter::once(&self.heldout))
    }
}

pub fn benchmark_specs() -> (Vec<ClientSpec>, ClientSpec) {
    let set = |c: &[u8]| c.iter().copied().collect::<ClassSet>();
    let clients = vec![
        ClientSpec::new(0, set(&[KIDNEY]), -0.06),
        ClientSpec {
            noise_sigma: 0.12,
            ..ClientSpec::new(1, set(&[SPLEEN, PANCREAS]), 0.0)
        },
        ClientSpec {
            noise_sigma: 0.08,
            ..ClientSpec::new(2, set(&[LIVER]), 0.06)
        },
    ];
    let heldout = ClientSpec::new(3, ClassSet::foreground(NUM_FOREGROUND), 0.03);
    (clients, heldout)
}

pub fn default_benchmark(seed: u64) -> Result<Benchmark> {
    benchmark_with(seed, SplitSizes::default())
}

pub fn benchmark_with(seed: u64, sizes: SplitSizes) -> Result<Benchmark> {
    let (specs, heldout) = benchmark_specs();
    Ok(Benchmark {
        clients: specs
            .iter()
            .map(|s| generate_splits(s, sizes, seed))
            .collect::<Result<_>>()?,
        heldout: generate_splits(&heldout, sizes, seed)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentParams {
    pub gamma_range: (f64, f64),
    pub noise_sigma: f64,
    pub bias_amplitude: f64,
    pub blend_range: (f64, f64),
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            gamma_range: (1.0, 1.0),
            noise_sigma: 0.0,
            bias_amplitude: 0.0,
            blend_range: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (g0, g1) = self.gamma_range;
        let (b0, b1) = self.blend_range;
        if !(g0 > 0.0 && g1 >= g0) {
            return Err(UfpsError::Config("gamma range must be positive and ordered".into()));
        }
        if self.noise_sigma < 0.0 || self.bias_amplitude < 0.0 {
            return Err(UfpsError::Config("augmentation sigma/amplitude must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&b0) || !(0.0..=1.0).contains(&b1) || b1 < b0 {
            return Err(UfpsError::Config("blend range must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            gamma_range: (0.6, 1.6),
            noise_sigma: 0.05,
            bias_amplitude: 0.2,
            blend_range: (0.2, 0.6),
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    let u: f64 = rng.random();
    lo + (hi - lo) * u
}

/// Intensity-only augmentation: gamma remap, smooth bias field, additive
/// noise, then a convex blend with a random shallow tanh remap. Output is
/// clipped to `[-1, 1]`.
pub fn strong_augment(grid: &PixelGrid, params: &AugmentParams, seed: u64) -> PixelGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = draw(&mut rng, params.gamma_range);
    let (fx, fy) = (rng.random_range(0.5..1.5), rng.random_range(0.5..1.5));
    let (px, py) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
    let blend = draw(&mut rng, params.blend_range);
    let remap: [(f64, f64, f64); 3] = std::array::from_fn(|_| {
        (
            rng.random_range(-1.0..1.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-1.0..1.0),
        )
    });
    let remap_norm: f64 = remap.iter().map(|r| r.0.abs()).sum::<f64>().max(1e-12);
    let noise = Normal::new(0.0, params.noise_sigma).expect("sigma validated non-negative");

    let (w, h) = (grid.width(), grid.height());
    let mut out = grid.clone();
    let data = out.intensities_mut();
    for y in 0..h {
        for x in 0..w {
            let mut v = data[y * w + x];
            if gamma != 1.0 {
                let u = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
                v = 2.0 * u.powf(gamma) - 1.0;
            }
            if params.bias_amplitude != 0.0 {
                let bx = (PI * fx * x as f64 / w as f64 + px).cos();
                let by = (PI * fy * y as f64 / h as f64 + py).cos();
                v += params.bias_amplitude * bx * by;
            }
            if params.noise_sigma != 0.0 {
                v += noise.sample(&mut rng);
            }
            if blend != 0.0 {
                let r: f64 = remap.iter().map(|(a, b, c)| a * (b * v + c).tanh()).sum();
                v = (1.0 - blend) * v + blend * (r / remap_norm);
            }
            data[y * w + x] = v.clamp(-1.0, 1.0);
        }
    }
    out
}

fn put_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

/// Writes samples in the flat little-endian dataset format: header
/// (`"UFPS"`, version, width, height, n_samples, N_c as u32), all intensities
/// as f32, then all labels as u8 with bit 7 marking withheld labels.
pub fn write_samples(path: &Path, samples: &[Sample], foreground_classes: usize) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| UfpsError::Config("cannot write an empty dataset".into()))?;
    let (w, h) = (first.image.width(), first.image.height());
    let file = File::create(path).map_err(|e| UfpsError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| UfpsError::io(path, e);
    out.write_all(FILE_MAGIC).map_err(io)?;
    for v in [FILE_VERSION, w as u32, h as u32, samples.len() as u32, foreground_classes as u32] {
        put_u32(&mut out, v).map_err(io)?;
    }
    for s in samples {
        if s.image.width() != w || s.image.height() != h {
            return Err(UfpsError::Config("all samples must share one grid size".into()));
        }
        for &v in s.image.intensities() {
            out.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    for s in samples {
        let bytes: Vec<u8> = s
            .labels
            .classes()
            .iter()
            .zip(s.labels.provenance())
            .map(|(&c, &p)| if p == Provenance::Unknown { c | UNKNOWN_FLAG } else { c })
            .collect();
        out.write_all(&bytes).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads a file written by [`write_samples`]; returns the samples and N_c.
pub fn read_samples(path: &Path) -> Result<(Vec<Sample>, usize)> {
    let file = File::open(path).map_err(|e| UfpsError::io(path, e))?;
    let mut input = BufReader::new(file);
    let bad = |reason: &str| UfpsError::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != FILE_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut header = [0u32; 5];
    for v in &mut header {
        let mut b = [0u8; 4];
        input.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
        *v = u32::from_le_bytes(b);
    }
    let [version, w, h, n, nc] = header.map(|v| v as usize);
    if version != FILE_VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let px = w * h;
    let mut images = Vec::with_capacity(n);
    let mut buf = vec![0u8; px * 4];
    for _ in 0..n {
        input.read_exact(&mut buf).map_err(|_| bad("truncated intensities"))?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        images.push(PixelGrid::new(w, h, data)?);
    }
    let mut samples = Vec::with_capacity(n);
    let mut lbuf = vec![0u8; px];
    for image in images {
        input.read_exact(&mut lbuf).map_err(|_| bad("truncated labels"))?;
        let classes: Vec<u8> = lbuf.iter().map(|b| b & !UNKNOWN_FLAG).collect();
        if classes.iter().any(|&c| c as usize > nc) {
            return Err(bad("label exceeds class count"));
        }
        let provenance = lbuf
            .iter()
            .map(|b| {
                if b & UNKNOWN_FLAG != 0 {
                    Provenance::Unknown
                } else {
                    Provenance::GroundTruth
                }
            })
            .collect();
        samples.push(Sample {
            image,
            labels: LabelMap::new(w, h, classes, provenance)?,
        });
    }
    Ok((samples, nc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ClientSpec {
        ClientSpec::new(0, ClassSet::empty().with(KIDNEY), 0.0)
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_client(&spec(), 3, 11).unwrap();
        let b = generate_client(&spec(), 3, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_client(&spec(), 3, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn withheld_classes_are_unknown() {
        let d = generate_client(&spec(), 4, 5).unwrap();
        for s in &d.samples {
            for i in 0..s.labels.len() {
                let c = s.labels.class_at(i);
                let p = s.labels.provenance_at(i);
                if c == KIDNEY {
                    assert_eq!(p, Provenance::GroundTruth);
                } else {
                    assert_eq!(p, Provenance::Unknown);
                }
            }
        }
    }

    #[test]
    fn every_class_present_in_each_sample() {
        let d = generate_client(&spec(), 10, 3).unwrap();
        for s in &d.samples {
            for c in 0..=NUM_FOREGROUND as u8 {
                assert!(s.labels.count(c) > 0, "class {c} missing");
            }
        }
    }

    #[test]
    fn tiny_grid_is_a_config_error() {
        let tiny = ClientSpec {
            width: 8,
            height: 8,
            ..spec()
        };
        assert!(matches!(
            generate_client(&tiny, 1, 0),
            Err(UfpsError::Config(_))
        ));
        assert!(generate_client(&spec(), 0, 0).is_err());
    }

    #[test]
    fn benchmark_class_split() {
        let (clients, heldout) = benchmark_specs();
        for (i, a) in clients.iter().enumerate() {
            for b in &clients[i + 1..] {
                assert!(a.annotated.is_disjoint(&b.annotated));
            }
        }
        let union = clients
            .iter()
            .fold(ClassSet::empty(), |acc, c| acc.union(c.annotated));
        assert_eq!(union, ClassSet::foreground(NUM_FOREGROUND));
        assert!(heldout.fully_annotated());
    }

    #[test]
    fn identity_augmentation_is_exact() {
        let d = generate_client(&spec(), 1, 9).unwrap();
        let img = &d.samples[0].image;
        assert_eq!(&strong_augment(img, &AugmentParams::identity(), 4), img);
    }

    #[test]
    fn augmentation_stays_in_range() {
        let d = generate_client(&spec(), 1, 9).unwrap();
        let out = strong_augment(&d.samples[0].image, &AugmentParams::default(), 1);
        assert!(out.intensities().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn derive_seed_separates_streams() {
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(7, &[3]), derive_seed(7, &[3]));
    }
}
