//! Per-pixel segmenter: a 9 -> H1 -> H2 -> (N_c + 1) tanh MLP over the 3x3
//! intensity neighbourhood of each pixel, with a hand-derived backward pass.
//!
//! The three affine layers are the encoder, decoder and head parts of the
//! parameter vector, in that order. Each part stores its weight matrix
//! row-major (`out x in`) followed by its bias.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UfpsError};

/// Length of the per-pixel feature vector (3x3 neighbourhood).
pub const FEATURE_DIM: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    Encoder,
    Decoder,
    Head,
}

impl Part {
    pub const ALL: [Part; 3] = [Part::Encoder, Part::Decoder, Part::Head];
}

impl std::str::FromStr for Part {
    type Err = UfpsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Part::Encoder),
            "decoder" => Ok(Part::Decoder),
            "head" => Ok(Part::Head),
            other => Err(UfpsError::Config(format!("unknown model part {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub feature_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    /// Output channels, background included (N_c + 1).
    pub channels: usize,
}

impl ModelLayout {
    pub fn new(hidden1: usize, hidden2: usize, foreground_classes: usize) -> Self {
        ModelLayout {
            feature_dim: FEATURE_DIM,
            hidden1,
            hidden2,
            channels: foreground_classes + 1,
        }
    }

    fn encoder_len(&self) -> usize {
        self.feature_dim * self.hidden1 + self.hidden1
    }

    fn decoder_len(&self) -> usize {
        self.hidden1 * self.hidden2 + self.hidden2
    }

    fn head_len(&self) -> usize {
        self.hidden2 * self.channels + self.channels
    }

    pub fn param_count(&self) -> usize {
        self.encoder_len() + self.decoder_len() + self.head_len()
    }

    pub fn span(&self, part: Part) -> Range<usize> {
        let enc = self.encoder_len();
        let dec = self.decoder_len();
        match part {
            Part::Encoder => 0..enc,
            Part::Decoder => enc..enc + dec,
            Part::Head => enc + dec..self.param_count(),
        }
    }

    fn fan_in(&self, part: Part) -> usize {
        match part {
            Part::Encoder => self.feature_dim,
            Part::Decoder => self.hidden1,
            Part::Head => self.hidden2,
        }
    }
}

impl Default for ModelLayout {
    fn default() -> Self {
        ModelLayout::new(16, 16, 4)
    }
}

/// Flat model parameters. Also used for gradients, which share the layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    layout: ModelLayout,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: ModelLayout) -> Self {
        ParamVector {
            layout,
            values: vec![0.0; layout.param_count()],
        }
    }

    /// Uniform init in `[-s, s]`, `s = 1/sqrt(fan_in)` per part.
    pub fn init(layout: ModelLayout, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.param_count()];
        for part in Part::ALL {
            let s = 1.0 / (layout.fan_in(part) as f64).sqrt();
            for v in &mut values[layout.span(part)] {
                *v = rng.random_range(-s..=s);
            }
        }
        ParamVector { layout, values }
    }

    pub fn from_values(layout: ModelLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.param_count() {
            return Err(UfpsError::LengthMismatch {
                expected: layout.param_count(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(UfpsError::Numerical("non-finite parameter value".into()));
        }
        Ok(ParamVector { layout, values })
    }

    pub fn layout(&self) -> ModelLayout {
        self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn part_view(&self, part: Part) -> Range<usize> {
        self.layout.span(part)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Single-channel image with intensities in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelGrid {
    width: usize,
    height: usize,
    intensity: Vec<f64>,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize, intensity: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(UfpsError::Config("grid dimensions must be positive".into()));
        }
        if intensity.len() != width * height {
            return Err(UfpsError::LengthMismatch {
                expected: width * height,
                got: intensity.len(),
            });
        }
        if intensity.iter().any(|v| !v.is_finite()) {
            return Err(UfpsError::Numerical("non-finite intensity".into()));
        }
        Ok(PixelGrid {
            width,
            height,
            intensity,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        PixelGrid {
            width,
            height,
            intensity: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.intensity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensity.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.intensity[y * self.width + x]
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensity
    }

    pub(crate) fn intensities_mut(&mut self) -> &mut [f64] {
        &mut self.intensity
    }
}

/// Per-pixel class probabilities, pixel-major (`pixel * channels + c`).
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ProbMap {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(UfpsError::LengthMismatch {
                expected: width * height * channels,
                got: data.len(),
            });
        }
        Ok(ProbMap {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.data[i * self.channels..(i + 1) * self.channels]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Argmax per pixel over all channels, ties to the lower class id.
    pub fn argmax(&self) -> Vec<u8> {
        (0..self.pixels())
            .map(|i| argmax_over(self.pixel(i), 0..self.channels) as u8)
            .collect()
    }
}

/// Argmax restricted to `allowed` channel ids; the first maximum wins.
pub fn argmax_over(values: &[f64], allowed: impl IntoIterator<Item = usize>) -> usize {
    let mut best = usize::MAX;
    let mut best_v = f64::NEG_INFINITY;
    for c in allowed {
        let v = values[c];
        if best == usize::MAX || v > best_v || (v == best_v && c < best) {
            best = c;
            best_v = v;
        }
    }
    best
}

/// 3x3 neighbourhood of `(x, y)`, row-major, with edge replication.
pub fn extract_features(grid: &PixelGrid, x: usize, y: usize) -> [f64; FEATURE_DIM] {
    let mut out = [0.0; FEATURE_DIM];
    let w = grid.width as isize;
    let h = grid.height as isize;
    let mut k = 0;
    for dy in -1isize..=1 {
        let yy = (y as isize + dy).clamp(0, h - 1) as usize;
        for dx in -1isize..=1 {
            let xx = (x as isize + dx).clamp(0, w - 1) as usize;
            out[k] = grid.intensity[yy * grid.width + xx];
            k += 1;
        }
    }
    out
}

/// Hidden activations and probabilities of one forward pass, kept so the
/// backward pass does not recompute them.
pub(crate) struct ForwardPass {
    hidden1: Vec<f64>,
    hidden2: Vec<f64>,
    probs: ProbMap,
}

impl ForwardPass {
    pub(crate) fn probs(&self) -> &ProbMap {
        &self.probs
    }

    pub(crate) fn into_probs(self) -> ProbMap {
        self.probs
    }
}

struct Weights<'a> {
    w1: &'a [f64],
    b1: &'a [f64],
    w2: &'a [f64],
    b2: &'a [f64],
    w3: &'a [f64],
    b3: &'a [f64],
}

fn split_weights<'a>(layout: &ModelLayout, v: &'a [f64]) -> Weights<'a> {
    let f = layout.feature_dim;
    let (h1, h2, c) = (layout.hidden1, layout.hidden2, layout.channels);
    let (w1, rest) = v.split_at(f * h1);
    let (b1, rest) = rest.split_at(h1);
    let (w2, rest) = rest.split_at(h1 * h2);
    let (b2, rest) = rest.split_at(h2);
    let (w3, b3) = rest.split_at(h2 * c);
    Weights {
        w1,
        b1,
        w2,
        b2,
        w3,
        b3,
    }
}

#[inline]
fn affine(w: &[f64], b: &[f64], input: &[f64], out: &mut [f64]) {
    let n_in = input.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
        let mut acc = *bias;
        for (wi, xi) in row.iter().zip(input) {
            acc += wi * xi;
        }
        *o = acc;
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// `tanh` through one `exp`, about three times faster than `f64::tanh` and
/// accurate to a few ulps in absolute terms.
#[inline]
fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

pub(crate) fn forward_pass(params: &ParamVector, grid: &PixelGrid) -> Result<ForwardPass> {
    let layout = params.layout;
    let (h1n, h2n, cn) = (layout.hidden1, layout.hidden2, layout.channels);
    let w = split_weights(&layout, &params.values);
    let pixels = grid.len();
    let mut hidden1 = vec![0.0; pixels * h1n];
    let mut hidden2 = vec![0.0; pixels * h2n];
    let mut probs = vec![0.0; pixels * cn];

    for y in 0..grid.height {
        for x in 0..grid.width {
            let i = y * grid.width + x;
            let feat = extract_features(grid, x, y);
            let a1 = &mut hidden1[i * h1n..(i + 1) * h1n];
            affine(w.w1, w.b1, &feat, a1);
            a1.iter_mut().for_each(|v| *v = tanh(*v));
            let a2 = &mut hidden2[i * h2n..(i + 1) * h2n];
            affine(w.w2, w.b2, &hidden1[i * h1n..(i + 1) * h1n], a2);
            a2.iter_mut().for_each(|v| *v = tanh(*v));
            let z = &mut probs[i * cn..(i + 1) * cn];
            affine(w.w3, w.b3, &hidden2[i * h2n..(i + 1) * h2n], z);
            if z.iter().any(|v| !v.is_finite()) {
                return Err(UfpsError::Numerical(format!(
                    "non-finite logits at pixel ({x}, {y})"
                )));
            }
            softmax_in_place(z);
        }
    }
    Ok(ForwardPass {
        hidden1,
        hidden2,
        probs: ProbMap {
            width: grid.width,
            height: grid.height,
            channels: cn,
            data: probs,
        },
    })
}

/// Accumulates the parameter gradient of `sum_pixels sum_c upstream[i,c] * p[i,c]`
/// into `grad`.
pub(crate) fn backward_pass(
    params: &ParamVector,
    grid: &PixelGrid,
    pass: &ForwardPass,
    upstream: &[f64],
    grad: &mut [f64],
) -> Result<()> {
    let layout = params.layout;
    let (f, h1n, h2n, cn) = (
        layout.feature_dim,
        layout.hidden1,
        layout.hidden2,
        layout.channels,
    );
    let expected = grid.len() * cn;
    if upstream.len() != expected {
        return Err(UfpsError::LengthMismatch {
            expected,
            got: upstream.len(),
        });
    }
    if grad.len() != layout.param_count() {
        return Err(UfpsError::LengthMismatch {
            expected: layout.param_count(),
            got: grad.len(),
        });
    }
    let w = split_weights(&layout, &params.values);
    let enc = layout.span(Part::Encoder);
    let dec = layout.span(Part::Decoder);
    let (g_enc, rest) = grad.split_at_mut(enc.end);
    let (g_dec, g_head) = rest.split_at_mut(dec.len());
    let (gw1, gb1) = g_enc.split_at_mut(f * h1n);
    let (gw2, gb2) = g_dec.split_at_mut(h1n * h2n);
    let (gw3, gb3) = g_head.split_at_mut(h2n * cn);

    let mut dz = vec![0.0; cn];
    let mut da2 = vec![0.0; h2n];
    let mut da1 = vec![0.0; h1n];

    for y in 0..grid.height {
        for x in 0..grid.width {
            let i = y * grid.width + x;
            let u = &upstream[i * cn..(i + 1) * cn];
            if u.iter().all(|&v| v == 0.0) {
                continue;
            }
            let p = pass.probs.pixel(i);
            let h1 = &pass.hidden1[i * h1n..(i + 1) * h1n];
            let h2 = &pass.hidden2[i * h2n..(i + 1) * h2n];

            // Softmax Jacobian: dz_c = p_c (u_c - sum_k p_k u_k).
            let pu: f64 = p.iter().zip(u).map(|(a, b)| a * b).sum();
            for c in 0..cn {
                dz[c] = p[c] * (u[c] - pu);
            }

            da2.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..cn {
                let d = dz[c];
                gb3[c] += d;
                let row = &w.w3[c * h2n..(c + 1) * h2n];
                let grow = &mut gw3[c * h2n..(c + 1) * h2n];
                for j in 0..h2n {
                    grow[j] += d * h2[j];
                    da2[j] += d * row[j];
                }
            }
            for j in 0..h2n {
                da2[j] *= 1.0 - h2[j] * h2[j];
            }

            da1.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..h2n {
                let d = da2[j];
                gb2[j] += d;
                let row = &w.w2[j * h1n..(j + 1) * h1n];
                let grow = &mut gw2[j * h1n..(j + 1) * h1n];
                for k in 0..h1n {
                    grow[k] += d * h1[k];
                    da1[k] += d * row[k];
                }
            }
            for k in 0..h1n {
                da1[k] *= 1.0 - h1[k] * h1[k];
            }

            let feat = extract_features(grid, x, y);
            for k in 0..h1n {
                let d = da1[k];
                gb1[k] += d;
                let grow = &mut gw1[k * f..(k + 1) * f];
                for (g, xv) in grow.iter_mut().zip(&feat) {
                    *g += d * xv;
                }
            }
        }
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(UfpsError::Numerical("non-finite gradient".into()));
    }
    Ok(())
}

pub fn forward(params: &ParamVector, grid: &PixelGrid) -> Result<ProbMap> {
    forward_pass(params, grid).map(ForwardPass::into_probs)
}

/// Gradient of `sum_pixels sum_c upstream[i, c] * prob[i, c]` with respect to
/// every parameter, where `upstream` holds dLoss/dProb per pixel and channel.
pub fn backward(params: &ParamVector, grid: &PixelGrid, upstream: &[f64]) -> Result<ParamVector> {
    let pass = forward_pass(params, grid)?;
    let mut grad = ParamVector::zeros(params.layout);
    backward_pass(params, grid, &pass, upstream, &mut grad.values)?;
    Ok(grad)
}

/// Unrestricted argmax prediction for every pixel.
pub fn predict(params: &ParamVector, grid: &PixelGrid) -> Result<Vec<u8>> {
    Ok(forward(params, grid)?.argmax())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> PixelGrid {
        let data = (0..w * h).map(|i| i as f64 / (w * h) as f64).collect();
        PixelGrid::new(w, h, data).unwrap()
    }

    #[test]
    fn fast_tanh_matches_std() {
        for i in -4000..=4000 {
            let x = i as f64 * 0.01;
            assert!((tanh(x) - x.tanh()).abs() < 1e-15, "{x}");
        }
        assert_eq!(tanh(1e4), 1.0);
        assert_eq!(tanh(-1e4), -1.0);
    }

    #[test]
    fn constant_image_features() {
        let g = PixelGrid::filled(8, 8, 0.5);
        assert_eq!(extract_features(&g, 3, 0), [0.5; 9]);
    }

    #[test]
    fn corner_of_two_by_two_replicates_edges() {
        // a b
        // c d
        let g = PixelGrid::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        assert_eq!(
            extract_features(&g, 0, 0),
            [0.1, 0.1, 0.2, 0.1, 0.1, 0.2, 0.3, 0.3, 0.4]
        );
        assert_eq!(
            extract_features(&g, 1, 1),
            [0.1, 0.2, 0.2, 0.3, 0.4, 0.4, 0.3, 0.4, 0.4]
        );
    }

    #[test]
    fn center_pixel_reads_row_major_neighbourhood() {
        let g = PixelGrid::new(3, 3, (0..9).map(f64::from).collect()).unwrap();
        assert_eq!(
            extract_features(&g, 1, 1),
            [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]
        );
    }

    #[test]
    fn zero_params_give_uniform_probabilities() {
        let layout = ModelLayout::default();
        let p = forward(&ParamVector::zeros(layout), &ramp(8, 8)).unwrap();
        for v in p.data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn head_bias_closed_form() {
        let layout = ModelLayout::default();
        let mut params = ParamVector::zeros(layout);
        let head = params.part_view(Part::Head);
        let bias_start = head.end - layout.channels;
        params.values_mut()[bias_start + 2] = 10.0;
        let p = forward(&params, &ramp(8, 8)).unwrap();
        let e10 = 10f64.exp();
        let expected = e10 / (e10 + 4.0);
        for i in 0..p.pixels() {
            assert!((p.pixel(i)[2] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn part_spans_cover_layout() {
        let layout = ModelLayout::default();
        let params = ParamVector::init(layout, 1);
        let head = params.part_view(Part::Head);
        assert_eq!(head.len(), 16 * 5 + 5);
        let enc = params.part_view(Part::Encoder);
        let dec = params.part_view(Part::Decoder);
        assert_eq!(enc.start, 0);
        assert_eq!(enc.end, dec.start);
        assert_eq!(dec.end, head.start);
        assert_eq!(head.end, params.len());
        assert_eq!(params.len(), 9 * 16 + 16 + 16 * 16 + 16 + 16 * 5 + 5);
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let layout = ModelLayout::new(4, 3, 2);
        let params = ParamVector::init(layout, 3);
        let g = ramp(4, 4);
        let grad = backward(&params, &g, &vec![0.0; 16 * 3]).unwrap();
        assert!(grad.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upstream_shape_is_checked() {
        let layout = ModelLayout::new(4, 3, 2);
        let params = ParamVector::init(layout, 3);
        let err = backward(&params, &ramp(4, 4), &[0.0; 5]).unwrap_err();
        assert!(matches!(err, UfpsError::LengthMismatch { .. }));
    }

    #[test]
    fn restricted_argmax_ties_to_lower_id() {
        assert_eq!(argmax_over(&[0.2, 0.4, 0.4, 0.0], [0, 2, 1]), 1);
        assert_eq!(argmax_over(&[0.5, 0.4, 0.9], [0, 1]), 0);
    }

    #[test]
    fn blown_up_params_report_numerical_error() {
        let layout = ModelLayout::new(2, 2, 1);
        let mut params = ParamVector::zeros(layout);
        let head = params.part_view(Part::Head);
        params.values_mut()[head.end - 1] = f64::INFINITY;
        assert!(matches!(
            forward(&params, &ramp(4, 4)),
            Err(UfpsError::Numerical(_))
        ));
    }
}
