//! Miniature density-counting network with manual backpropagation.
//!
//! Three 3x3 conv layers (widths 8, 16, 16, ReLU) feed three heads:
//!
//! - density: a channel gate (pool, FC, ReLU, FC, sigmoid) scales the last
//!   feature map, then a 1x1 conv and softplus;
//! - segmentation: 1x1 conv and sigmoid on the ungated features;
//! - global density: pool, FC, ReLU, FC, softmax over `levels + 1` classes.
//!
//! All arithmetic is f64. Training rounds parameters to f32 after each step
//! unless asked not to, which keeps model files exact.

mod check;
mod dataset;
mod io;
pub mod layers;
mod scene;
mod train;

pub use check::{check_composite, CompositeCheck};
pub use dataset::{load_dataset, save_dataset, synth_dataset, DatasetError, DatasetSpec};
pub use io::{decode_model, encode_model, load_model, save_model, ModelError, MODEL_MAGIC, MODEL_VERSION};
pub use layers::Tensor;
pub use scene::{synth_scene, SceneSpec};
pub use train::{
    deployed_density, evaluate_records,
    evaluate_counts, loss_and_grad, predict_count, prepare_sample, train, train_with_progress, EpochStats, History,
    Precision, Prepared, Sample, Stage, TrainConfig, TrainError,
};

use crate::grid::Grid;
use crate::loss::{softmax, softmax_backward};
use crate::raster::GrayImage;
use crate::rng::SplitMix64;
use layers::{conv3x3_backward, conv3x3_forward, linear_backward, linear_forward, relu, sigmoid, softplus};

pub const CONV_WIDTHS: [usize; 3] = [8, 16, 16];
pub const HIDDEN: usize = 16;
/// Initial density-head bias; `softplus(-4) ≈ 0.018` per pixel.
pub const DENSITY_BIAS_INIT: f64 = -4.0;

// Tensor indices; the conv layers occupy 0..6 as (weight, bias) pairs.
const GATE1_W: usize = 6;
const GATE1_B: usize = 7;
const GATE2_W: usize = 8;
const GATE2_B: usize = 9;
const DEN_W: usize = 10;
const DEN_B: usize = 11;
const SEG_W: usize = 12;
const SEG_B: usize = 13;
const GD1_W: usize = 14;
const GD1_B: usize = 15;
const GD2_W: usize = 16;
const GD2_B: usize = 17;
pub const NUM_TENSORS: usize = 18;

pub const TENSOR_NAMES: [&str; NUM_TENSORS] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "gate1.weight",
    "gate1.bias",
    "gate2.weight",
    "gate2.bias",
    "density.weight",
    "density.bias",
    "seg.weight",
    "seg.bias",
    "gd1.weight",
    "gd1.bias",
    "gd2.weight",
    "gd2.bias",
];

/// Expected tensor shapes for a net with `levels` global-density levels.
pub fn tensor_shapes(levels: usize) -> Vec<Vec<usize>> {
    let [a, b, c] = CONV_WIDTHS;
    vec![
        vec![a, 1, 3, 3],
        vec![a],
        vec![b, a, 3, 3],
        vec![b],
        vec![c, b, 3, 3],
        vec![c],
        vec![HIDDEN, c],
        vec![HIDDEN],
        vec![c, HIDDEN],
        vec![c],
        vec![1, c],
        vec![1],
        vec![1, c],
        vec![1],
        vec![HIDDEN, c],
        vec![HIDDEN],
        vec![levels + 1, HIDDEN],
        vec![levels + 1],
    ]
}

/// How the channel gate is applied before the density head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GateMode {
    #[default]
    Learned,
    /// Gate output replaced by ones.
    Ones,
    /// Gate skipped entirely.
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    params: Vec<Tensor>,
    levels: usize,
    gate_mode: GateMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub density: Grid,
    pub seg: Grid,
    pub gd_probs: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    width: usize,
    height: usize,
    input: Vec<f64>,
    a: [Vec<f64>; 3],
    h: [Vec<f64>; 3],
    pooled: Vec<f64>,
    gate_z1: Vec<f64>,
    gate_r1: Vec<f64>,
    gate: Option<Vec<f64>>,
    den_pre: Vec<f64>,
    gd_z1: Vec<f64>,
    gd_r1: Vec<f64>,
    pub prediction: Prediction,
}

impl Cache {
    /// Signs of every ReLU pre-activation; equal patterns mean the network
    /// is on the same linear piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.a
            .iter()
            .flatten()
            .chain(&self.gate_z1)
            .chain(&self.gd_z1)
            .map(|&v| v > 0.0)
            .collect()
    }
}

/// Loss gradients with respect to the three outputs; `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads<'a> {
    pub density: Option<&'a [f64]>,
    pub seg: Option<&'a [f64]>,
    pub gd_probs: Option<&'a [f64]>,
}

/// Pixel values scaled to `[0, 1]`.
pub fn image_to_input(img: &GrayImage) -> Grid {
    let data = img.pixels().iter().map(|&p| p as f64 / 255.0).collect();
    Grid::from_vec(img.width(), img.height(), data).expect("pixel count matches shape")
}

fn pool(features: &[f64], channels: usize) -> Vec<f64> {
    let hw = features.len() / channels;
    features.chunks_exact(hw).map(|c| c.iter().sum::<f64>() / hw as f64).collect()
}

fn uniform_fill(rng: &mut SplitMix64, t: &mut Tensor, bound: f64) {
    for v in &mut t.data {
        *v = rng.uniform_range(-bound, bound) as f32 as f64;
    }
}

impl ToyNet {
    /// He-uniform initialization from `seed`, rounded to f32.
    pub fn new(levels: usize, seed: u64) -> Self {
        let mut params: Vec<Tensor> = tensor_shapes(levels).iter().map(|s| Tensor::zeros(s)).collect();
        let mut rng = SplitMix64::new(seed);
        for i in (0..NUM_TENSORS).step_by(2) {
            let shape = &params[i].shape;
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            uniform_fill(&mut rng, &mut params[i], bound);
        }
        params[DEN_B].data[0] = DENSITY_BIAS_INIT;
        Self {
            params,
            levels,
            gate_mode: GateMode::Learned,
        }
    }

    /// Zeroes the density, segmentation and global-density output layers.
    pub fn zero_heads(&mut self) {
        for i in [DEN_W, DEN_B, SEG_W, SEG_B, GD2_W, GD2_B] {
            self.params[i].data.fill(0.0);
        }
    }

    pub(crate) fn from_params(params: Vec<Tensor>, levels: usize) -> Self {
        Self {
            params,
            levels,
            gate_mode: GateMode::Learned,
        }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn gate_mode(&self) -> GateMode {
        self.gate_mode
    }

    pub fn set_gate_mode(&mut self, mode: GateMode) {
        self.gate_mode = mode;
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|t| t.data.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.params.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Overwrites all parameters from a flat vector in [`ToyNet::flatten`] order.
    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut off = 0;
        for t in &mut self.params {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    /// Offset of each tensor within the flat vector.
    pub fn tensor_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.params
            .iter()
            .map(|t| {
                let o = off;
                off += t.data.len();
                o
            })
            .collect()
    }

    pub fn forward(&self, x: &Grid) -> Prediction {
        self.forward_cached(x).prediction
    }

    pub fn forward_cached(&self, x: &Grid) -> Cache {
        let (w, h) = x.shape();
        let hw = w * h;
        let p = &self.params;
        let mut a: [Vec<f64>; 3] = Default::default();
        let mut hs: [Vec<f64>; 3] = Default::default();
        let mut cin = 1;
        for l in 0..3 {
            let cout = CONV_WIDTHS[l];
            let mut out = vec![0.0; cout * hw];
            let input = if l == 0 { x.data() } else { &hs[l - 1][..] };
            conv3x3_forward(input, cin, h, w, &p[2 * l].data, &p[2 * l + 1].data, &mut out);
            hs[l] = out.iter().map(|&v| relu(v)).collect();
            a[l] = out;
            cin = cout;
        }
        let c = CONV_WIDTHS[2];
        let f3 = &hs[2];
        let pooled = pool(f3, c);

        let gate_z1 = linear_forward(&pooled, &p[GATE1_W].data, &p[GATE1_B].data);
        let gate_r1: Vec<f64> = gate_z1.iter().map(|&v| relu(v)).collect();
        let gate = match self.gate_mode {
            GateMode::Learned => Some(
                linear_forward(&gate_r1, &p[GATE2_W].data, &p[GATE2_B].data)
                    .into_iter()
                    .map(sigmoid)
                    .collect::<Vec<_>>(),
            ),
            GateMode::Ones => Some(vec![1.0; c]),
            GateMode::Off => None,
        };

        let dw = &p[DEN_W].data;
        let mut den_pre = vec![p[DEN_B].data[0]; hw];
        for ch in 0..c {
            let plane = &f3[ch * hw..(ch + 1) * hw];
            match &gate {
                Some(g) => {
                    for (d, &v) in den_pre.iter_mut().zip(plane) {
                        *d += dw[ch] * (v * g[ch]);
                    }
                }
                None => {
                    for (d, &v) in den_pre.iter_mut().zip(plane) {
                        *d += dw[ch] * v;
                    }
                }
            }
        }
        let density: Vec<f64> = den_pre.iter().map(|&v| softplus(v)).collect();

        let sw = &p[SEG_W].data;
        let mut seg_pre = vec![p[SEG_B].data[0]; hw];
        for ch in 0..c {
            for (s, &v) in seg_pre.iter_mut().zip(&f3[ch * hw..(ch + 1) * hw]) {
                *s += sw[ch] * v;
            }
        }
        let seg: Vec<f64> = seg_pre.iter().map(|&v| sigmoid(v)).collect();

        let gd_z1 = linear_forward(&pooled, &p[GD1_W].data, &p[GD1_B].data);
        let gd_r1: Vec<f64> = gd_z1.iter().map(|&v| relu(v)).collect();
        let logits = linear_forward(&gd_r1, &p[GD2_W].data, &p[GD2_B].data);
        let gd_probs = softmax(&logits);

        Cache {
            width: w,
            height: h,
            input: x.data().to_vec(),
            a,
            h: hs,
            pooled,
            gate_z1,
            gate_r1,
            gate,
            den_pre,
            gd_z1,
            gd_r1,
            prediction: Prediction {
                density: Grid::from_vec(w, h, density).expect("shape"),
                seg: Grid::from_vec(w, h, seg).expect("shape"),
                gd_probs,
            },
        }
    }

    /// Parameter gradients, one tensor per parameter in [`TENSOR_NAMES`] order.
    pub fn backward(&self, cache: &Cache, grads: &OutputGrads<'_>) -> Vec<Tensor> {
        let p = &self.params;
        let (w, h) = (cache.width, cache.height);
        let hw = w * h;
        let c = CONV_WIDTHS[2];
        let mut g: Vec<Tensor> = p.iter().map(|t| Tensor::zeros(&t.shape)).collect();
        let f3 = &cache.h[2];
        let mut d_f3 = vec![0.0; c * hw];
        let mut d_pooled = vec![0.0; c];

        if let Some(dd) = grads.density {
            let d_pre: Vec<f64> = dd.iter().zip(&cache.den_pre).map(|(&gv, &z)| gv * sigmoid(z)).collect();
            g[DEN_B].data[0] += d_pre.iter().sum::<f64>();
            let dw = &p[DEN_W].data;
            let mut d_gate = vec![0.0; c];
            for ch in 0..c {
                let plane = &f3[ch * hw..(ch + 1) * hw];
                let k = cache.gate.as_ref().map_or(1.0, |gt| gt[ch]);
                // d/d(dw) of dw * (f * k) and d/dk, d/df.
                let fd: f64 = plane.iter().zip(&d_pre).map(|(f, d)| f * d).sum();
                g[DEN_W].data[ch] += k * fd;
                d_gate[ch] = dw[ch] * fd;
                let scale = dw[ch] * k;
                for (df, d) in d_f3[ch * hw..(ch + 1) * hw].iter_mut().zip(&d_pre) {
                    *df += scale * d;
                }
            }
            if self.gate_mode == GateMode::Learned {
                let gate = cache.gate.as_ref().expect("learned gate cached");
                let d_z2: Vec<f64> = d_gate.iter().zip(gate).map(|(d, s)| d * s * (1.0 - s)).collect();
                let (lo, hi) = g.split_at_mut(GATE2_W);
                let (gw2, gb2) = hi.split_at_mut(1);
                let d_r1 = linear_backward(&cache.gate_r1, &p[GATE2_W].data, &d_z2, &mut gw2[0].data, &mut gb2[0].data);
                let d_z1: Vec<f64> = d_r1.iter().zip(&cache.gate_z1).map(|(d, &z)| if z > 0.0 { *d } else { 0.0 }).collect();
                let (gw1, gb1) = lo[GATE1_W..].split_at_mut(1);
                let d_p = linear_backward(&cache.pooled, &p[GATE1_W].data, &d_z1, &mut gw1[0].data, &mut gb1[0].data);
                for (a, b) in d_pooled.iter_mut().zip(&d_p) {
                    *a += b;
                }
            }
        }

        if let Some(ds) = grads.seg {
            let seg = cache.prediction.seg.data();
            let d_pre: Vec<f64> = ds.iter().zip(seg).map(|(&gv, &s)| gv * s * (1.0 - s)).collect();
            g[SEG_B].data[0] += d_pre.iter().sum::<f64>();
            let sw = &p[SEG_W].data;
            for ch in 0..c {
                let plane = &f3[ch * hw..(ch + 1) * hw];
                g[SEG_W].data[ch] += plane.iter().zip(&d_pre).map(|(f, d)| f * d).sum::<f64>();
                for (df, d) in d_f3[ch * hw..(ch + 1) * hw].iter_mut().zip(&d_pre) {
                    *df += sw[ch] * d;
                }
            }
        }

        if let Some(dp) = grads.gd_probs {
            let d_logits = softmax_backward(&cache.prediction.gd_probs, dp);
            let (lo, hi) = g.split_at_mut(GD2_W);
            let (gw2, gb2) = hi.split_at_mut(1);
            let d_r1 = linear_backward(&cache.gd_r1, &p[GD2_W].data, &d_logits, &mut gw2[0].data, &mut gb2[0].data);
            let d_z1: Vec<f64> = d_r1.iter().zip(&cache.gd_z1).map(|(d, &z)| if z > 0.0 { *d } else { 0.0 }).collect();
            let (gw1, gb1) = lo[GD1_W..].split_at_mut(1);
            let d_p = linear_backward(&cache.pooled, &p[GD1_W].data, &d_z1, &mut gw1[0].data, &mut gb1[0].data);
            for (a, b) in d_pooled.iter_mut().zip(&d_p) {
                *a += b;
            }
        }

        for ch in 0..c {
            let share = d_pooled[ch] / hw as f64;
            if share != 0.0 {
                d_f3[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v += share);
            }
        }

        let mut d_h = d_f3;
        for l in (0..3).rev() {
            let d_a: Vec<f64> = d_h.iter().zip(&cache.a[l]).map(|(d, &z)| if z > 0.0 { *d } else { 0.0 }).collect();
            let cin = if l == 0 { 1 } else { CONV_WIDTHS[l - 1] };
            let input = if l == 0 { &cache.input[..] } else { &cache.h[l - 1][..] };
            let (gw, gb) = g[2 * l..2 * l + 2].split_at_mut(1);
            if l == 0 {
                conv3x3_backward(input, cin, h, w, &p[0].data, &d_a, &mut gw[0].data, &mut gb[0].data, None);
            } else {
                let mut d_in = vec![0.0; cin * hw];
                conv3x3_backward(input, cin, h, w, &p[2 * l].data, &d_a, &mut gw[0].data, &mut gb[0].data, Some(&mut d_in));
                d_h = d_in;
            }
        }
        g
    }

    /// `params -= lr * grads`, optionally rounding each parameter to f32.
    pub fn sgd_step(&mut self, grads: &[Tensor], lr: f64, round_f32: bool) {
        for (t, gt) in self.params.iter_mut().zip(grads) {
            for (v, gv) in t.data.iter_mut().zip(&gt.data) {
                *v -= lr * gv;
                if round_f32 {
                    *v = *v as f32 as f64;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::gradcheck_indices;

    fn random_input(seed: u64, w: usize, h: usize) -> Grid {
        let mut rng = SplitMix64::new(seed);
        Grid::from_vec(w, h, (0..w * h).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn zero_heads_give_analytic_outputs() {
        let mut net = ToyNet::new(8, 3);
        net.zero_heads();
        let out = net.forward(&random_input(1, 9, 8));
        assert_eq!(out.density.shape(), (9, 8));
        assert!(out.density.data().iter().all(|&v| v == std::f64::consts::LN_2));
        assert!(out.seg.data().iter().all(|&v| v == 0.5));
        assert!(out.gd_probs.iter().all(|&p| (p - 1.0 / 9.0).abs() < 1e-15));
    }

    #[test]
    fn outputs_in_range() {
        let net = ToyNet::new(4, 7);
        let out = net.forward(&random_input(2, 12, 10));
        assert!(out.density.data().iter().all(|&v| v >= 0.0));
        assert!(out.seg.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!((out.gd_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(out.gd_probs.len(), 5);
    }

    #[test]
    fn gate_ones_equals_gate_off() {
        let mut net = ToyNet::new(8, 9);
        let x = random_input(4, 8, 8);
        net.set_gate_mode(GateMode::Ones);
        let a = net.forward(&x);
        net.set_gate_mode(GateMode::Off);
        let b = net.forward(&x);
        assert_eq!(a, b);
        net.set_gate_mode(GateMode::Learned);
        assert_ne!(net.forward(&x).density, b.density);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = ToyNet::new(3, 21);
        let x = random_input(5, 8, 8);
        let mut rng = SplitMix64::new(8);
        let wd: Vec<f64> = (0..64).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let ws: Vec<f64> = (0..64).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let wg: Vec<f64> = (0..4).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        // Linear functional of all three outputs.
        let f = |flat: &[f64]| {
            let mut n = net.clone();
            n.set_flat(flat);
            let cache = n.forward_cached(&x);
            let pr = &cache.prediction;
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            let v = dot(pr.density.data(), &wd) + dot(pr.seg.data(), &ws) + dot(&pr.gd_probs, &wg);
            let g = n.backward(
                &cache,
                &OutputGrads {
                    density: Some(&wd),
                    seg: Some(&ws),
                    gd_probs: Some(&wg),
                },
            );
            (v, g.into_iter().flat_map(|t| t.data).collect())
        };
        let flat = net.flatten();
        let offsets = net.tensor_offsets();
        for (i, &off) in offsets.iter().enumerate() {
            let len = net.params()[i].data.len();
            let idx: Vec<usize> = (off..off + len).step_by((len / 6).max(1)).collect();
            let r = gradcheck_indices(&f, &flat, &idx, 1e-5, 1e-5);
            assert!(r.passed, "{}: {r}", TENSOR_NAMES[i]);
        }
    }

    #[test]
    fn lr_zero_step_is_identity() {
        let mut net = ToyNet::new(8, 1);
        let before = net.clone();
        let grads: Vec<Tensor> = net.params().iter().map(|t| Tensor { shape: t.shape.clone(), data: vec![1.0; t.data.len()] }).collect();
        net.sgd_step(&grads, 0.0, true);
        assert_eq!(net, before);
    }
}
