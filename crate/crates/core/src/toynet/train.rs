//! Two-stage training: an auxiliary net on background-blacked inputs, then a
//! student distilled from it with segmentation and global-density heads.

use thiserror::Error;

use super::{image_to_input, OutputGrads, Tensor, ToyNet};
use crate::annot::{AnnotError, PointSet, SigmaPolicy};
use crate::density::{apply_mask, render_density};
use crate::focus::{
    crowding_level, density_step, global_density_label, occlusion_level, occlusion_map, seg_mask, FocusError, SegMask,
    DEFAULT_DENSITY_LEVELS,
};
use crate::grid::Grid;
use crate::loss::{
    composite_loss, focal_seg_slices, global_density_loss, lp_slices, CompositeWeights, LossError, Norm,
    DEFAULT_GAMMA, DEFAULT_LAMBDA_GD, DEFAULT_LAMBDA_SEG,
};
use crate::metrics::EvalRecord;
use crate::occsim::{augment_sample, DEFAULT_BETA};
use crate::raster::GrayImage;
use crate::rng::{derive_seed, SplitMix64};

const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const AUG_STREAM: u64 = 2;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("distillation needs a frozen auxiliary network")]
    MissingAuxiliary,
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Annot(#[from] AnnotError),
    #[error(transparent)]
    Focus(#[from] FocusError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Density on `I ⊙ S` against the Gaussian target.
    Aux,
    /// Density on `I` against the Gaussian target.
    Baseline,
    /// `f_d(I) ⊙ f_s(I)` against the frozen auxiliary output, plus the
    /// segmentation and global-density terms.
    Distill,
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "aux" => Ok(Stage::Aux),
            "baseline" => Ok(Stage::Baseline),
            "distill" => Ok(Stage::Distill),
            other => Err(format!("unknown stage {other:?} (aux|baseline|distill)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// Parameters rounded to f32 after every step.
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Samples whose gradients are averaged into one step.
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub use_occlusion_aug: bool,
    pub beta: f64,
    pub norm: Norm,
    pub gamma: f64,
    pub levels: usize,
    pub sigma: SigmaPolicy,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Baseline,
            epochs: 10,
            learning_rate: 0.05,
            batch_size: 1,
            seed: 0,
            lambda_s: DEFAULT_LAMBDA_SEG,
            lambda_c: DEFAULT_LAMBDA_GD,
            use_occlusion_aug: false,
            beta: DEFAULT_BETA,
            norm: Norm::L1,
            gamma: DEFAULT_GAMMA,
            levels: DEFAULT_DENSITY_LEVELS,
            sigma: SigmaPolicy::default(),
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::InvalidConfig(format!("learning rate {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        if self.levels == 0 {
            return Err(TrainError::InvalidConfig("levels must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub points: PointSet,
}

/// Network inputs and targets derived from one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub input: Grid,
    pub masked_input: Grid,
    pub density: Grid,
    pub mask: SegMask,
    pub count: usize,
}

pub fn prepare_sample(image: &GrayImage, points: &PointSet, sigma: SigmaPolicy) -> Result<Prepared, TrainError> {
    let discs = sigma.discs(points)?;
    prepare_with_discs(image, points.len(), &discs)
}

fn prepare_with_discs(image: &GrayImage, count: usize, discs: &[crate::annot::ObjectDisc]) -> Result<Prepared, TrainError> {
    let (w, h) = (image.width(), image.height());
    let input = image_to_input(image);
    let mask = seg_mask(discs, w, h);
    let masked_input = apply_mask(&input, mask.grid()).expect("same shape");
    let density = render_density(discs, w, h)
        .expect("annotation points lie inside the image")
        .into_grid();
    Ok(Prepared {
        input,
        masked_input,
        density,
        mask,
        count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when there is no validation set.
    pub val_mae: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were returned.
    pub selected_epoch: usize,
    pub density_step: u64,
}

/// Density map a stage deploys for input `x`: the density head, or its
/// product with the segmentation head for [`Stage::Distill`].
pub fn deployed_density(net: &ToyNet, stage: Stage, x: &Grid) -> Grid {
    let out = net.forward(x);
    match stage {
        Stage::Aux | Stage::Baseline => out.density,
        Stage::Distill => {
            let data = out.density.data().iter().zip(out.seg.data()).map(|(d, s)| d * s).collect();
            Grid::from_vec(x.width(), x.height(), data).expect("head outputs share the input shape")
        }
    }
}

/// Count the stage's deployed prediction assigns to a prepared sample. The
/// auxiliary stage sees the masked input.
pub fn predict_count(net: &ToyNet, stage: Stage, prep: &Prepared) -> f64 {
    let x = if stage == Stage::Aux { &prep.masked_input } else { &prep.input };
    deployed_density(net, stage, x).sum()
}

/// One evaluation record per sample; occlusion levels use `sigma`.
pub fn evaluate_records(
    net: &ToyNet,
    stage: Stage,
    ids: &[String],
    samples: &[Sample],
    sigma: SigmaPolicy,
) -> Result<Vec<EvalRecord>, TrainError> {
    ids.iter()
        .zip(samples)
        .map(|(id, s)| {
            let discs = sigma.discs(&s.points)?;
            let prep = prepare_with_discs(&s.image, s.points.len(), &discs)?;
            let (w, h) = (s.image.width(), s.image.height());
            Ok(EvalRecord {
                id: id.clone(),
                pred_count: predict_count(net, stage, &prep),
                gt_count: s.points.len() as f64,
                occlusion_level: occlusion_level(&occlusion_map(&discs, w, h)),
                crowding_level: crowding_level(&s.points),
            })
        })
        .collect()
}

/// `(predicted, ground truth)` count pairs.
pub fn evaluate_counts(net: &ToyNet, stage: Stage, set: &[Prepared]) -> Vec<(f64, f64)> {
    set.iter().map(|p| (predict_count(net, stage, p), p.count as f64)).collect()
}

fn mae(pairs: &[(f64, f64)]) -> Option<f64> {
    if pairs.is_empty() {
        return None;
    }
    Some(pairs.iter().map(|(p, g)| (p - g).abs()).sum::<f64>() / pairs.len() as f64)
}

/// Loss value and parameter gradients of one prepared sample for the
/// configured stage. `teacher` is the frozen auxiliary output on the masked
/// input and is required for [`Stage::Distill`].
pub fn loss_and_grad(
    net: &ToyNet,
    prep: &Prepared,
    teacher: Option<&Grid>,
    cfg: &TrainConfig,
    step: u64,
) -> Result<(f64, Vec<Tensor>), TrainError> {
    match cfg.stage {
        Stage::Aux | Stage::Baseline => {
            let (x, target) = if cfg.stage == Stage::Aux {
                (&prep.masked_input, &prep.density)
            } else {
                (&prep.input, &prep.density)
            };
            let cache = net.forward_cached(x);
            let l = lp_slices(cache.prediction.density.data(), target.data(), cfg.norm);
            let grads = net.backward(
                &cache,
                &OutputGrads {
                    density: Some(&l.grad),
                    ..Default::default()
                },
            );
            Ok((l.value, grads))
        }
        Stage::Distill => {
            let teacher = teacher.ok_or(TrainError::MissingAuxiliary)?;
            let cache = net.forward_cached(&prep.input);
            let pr = &cache.prediction;
            let (den, seg) = (pr.density.data(), pr.seg.data());
            let masked: Vec<f64> = den.iter().zip(seg).map(|(d, s)| d * s).collect();
            let distill = lp_slices(&masked, teacher.data(), cfg.norm);
            let seg_loss = focal_seg_slices(seg, prep.mask.data(), cfg.gamma)?;
            let label = global_density_label(prep.count, step, cfg.levels);
            let gd = global_density_loss(&pr.gd_probs, label, cfg.gamma)?;
            let total = composite_loss(
                &distill,
                &seg_loss,
                &gd,
                CompositeWeights {
                    lambda_seg: cfg.lambda_s,
                    lambda_gd: cfg.lambda_c,
                },
            );
            let g_den: Vec<f64> = total.grad_density.iter().zip(seg).map(|(g, s)| g * s).collect();
            let g_seg: Vec<f64> = total
                .grad_density
                .iter()
                .zip(den)
                .zip(&total.grad_seg)
                .map(|((g, d), gs)| g * d + gs)
                .collect();
            let grads = net.backward(
                &cache,
                &OutputGrads {
                    density: Some(&g_den),
                    seg: Some(&g_seg),
                    gd_probs: Some(&total.grad_gd),
                },
            );
            Ok((total.value, grads))
        }
    }
}

/// Trains a fresh network. See [`train_with_progress`].
pub fn train(
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    frozen_aux: Option<&ToyNet>,
) -> Result<(ToyNet, History), TrainError> {
    train_with_progress(train_set, val_set, cfg, frozen_aux, |_| {})
}

/// Per-sample SGD over `cfg.epochs` shuffled passes. The auxiliary stage
/// returns the parameters with the best validation MAE; the other stages
/// return the final parameters.
pub fn train_with_progress(
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    frozen_aux: Option<&ToyNet>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(ToyNet, History), TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if cfg.stage == Stage::Distill && frozen_aux.is_none() {
        return Err(TrainError::MissingAuxiliary);
    }
    let teacher_of = |p: &Prepared| frozen_aux.map(|aux| aux.forward(&p.masked_input).density);

    let areas: Vec<(&PointSet, usize)> = train_set.iter().map(|s| (&s.points, s.points.area())).collect();
    let step = density_step(&areas, cfg.levels)?;

    let discs: Vec<_> = train_set
        .iter()
        .map(|s| cfg.sigma.discs(&s.points))
        .collect::<Result<_, _>>()?;
    let base: Vec<Prepared> = train_set
        .iter()
        .zip(&discs)
        .map(|(s, d)| prepare_with_discs(&s.image, s.points.len(), d))
        .collect::<Result<_, _>>()?;
    let base_teacher: Vec<Option<Grid>> = if cfg.use_occlusion_aug {
        Vec::new()
    } else {
        base.iter().map(teacher_of).collect()
    };
    let val: Vec<Prepared> = val_set
        .iter()
        .map(|s| prepare_sample(&s.image, &s.points, cfg.sigma))
        .collect::<Result<_, _>>()?;

    let mut net = ToyNet::new(cfg.levels, derive_seed(cfg.seed, INIT_STREAM));
    let mut shuffler = SplitMix64::new(derive_seed(cfg.seed, SHUFFLE_STREAM));
    let aug_seed = derive_seed(cfg.seed, AUG_STREAM);
    let round = cfg.precision == Precision::F32;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History {
        epochs: Vec::with_capacity(cfg.epochs),
        selected_epoch: 0,
        density_step: step,
    };
    let mut best: Option<(f64, ToyNet)> = None;

    for epoch in 0..cfg.epochs {
        shuffler.shuffle(&mut order);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let (loss, grads) = if cfg.use_occlusion_aug {
                    let s = &train_set[i];
                    let seed = derive_seed(aug_seed, (epoch * train_set.len() + i) as u64);
                    let aug = augment_sample(&s.image, &s.points, &discs[i], seed, cfg.beta, None);
                    let prep = prepare_with_discs(&aug.image, aug.points.len(), &aug.discs)?;
                    let teacher = teacher_of(&prep);
                    loss_and_grad(&net, &prep, teacher.as_ref(), cfg, step)?
                } else {
                    loss_and_grad(&net, &base[i], base_teacher[i].as_ref(), cfg, step)?
                };
                total += loss;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => a.iter_mut().zip(&grads).for_each(|(x, y)| {
                        x.data.iter_mut().zip(&y.data).for_each(|(u, v)| *u += v);
                    }),
                }
            }
            let acc = acc.expect("chunks are non-empty");
            net.sgd_step(&acc, cfg.learning_rate / batch.len() as f64, round);
        }
        let stats = EpochStats {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_mae: mae(&evaluate_counts(&net, cfg.stage, &val)),
        };
        on_epoch(&stats);
        history.epochs.push(stats);
        if let (Stage::Aux, Some(v)) = (cfg.stage, stats.val_mae) {
            if best.as_ref().map_or(true, |(b, _)| v < *b) {
                best = Some((v, net.clone()));
                history.selected_epoch = epoch;
            }
        } else {
            history.selected_epoch = epoch;
        }
    }
    let net = match best {
        Some((_, b)) => b,
        None => net,
    };
    Ok((net, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toynet::{synth_scene, SceneSpec};

    fn dataset(n: usize, seed: u64) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let (image, points) = synth_scene(&SceneSpec {
                    size: 12,
                    n_objects: 1 + i % 4,
                    seed: derive_seed(seed, i as u64),
                    ..Default::default()
                });
                Sample { image, points }
            })
            .collect()
    }

    fn cfg(stage: Stage) -> TrainConfig {
        TrainConfig {
            stage,
            epochs: 2,
            learning_rate: 0.01,
            seed: 5,
            sigma: SigmaPolicy::Fixed(1.0),
            ..Default::default()
        }
    }

    #[test]
    fn distill_requires_aux() {
        let data = dataset(2, 1);
        assert!(matches!(train(&data, &[], &cfg(Stage::Distill), None), Err(TrainError::MissingAuxiliary)));
    }

    #[test]
    fn zero_rate_keeps_initialization() {
        let data = dataset(3, 2);
        let c = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..cfg(Stage::Baseline)
        };
        let (net, _) = train(&data, &[], &c, None).unwrap();
        assert_eq!(net, ToyNet::new(c.levels, derive_seed(c.seed, INIT_STREAM)));
    }

    #[test]
    fn deterministic_given_seed() {
        let data = dataset(4, 3);
        let c = TrainConfig {
            use_occlusion_aug: true,
            ..cfg(Stage::Aux)
        };
        let a = train(&data, &data, &c, None).unwrap();
        let b = train(&data, &data, &c, None).unwrap();
        assert_eq!(a, b);
        let (aux, _) = a;
        let d = train(&data, &[], &cfg(Stage::Distill), Some(&aux)).unwrap();
        assert_eq!(d, train(&data, &[], &cfg(Stage::Distill), Some(&aux)).unwrap());
    }

    #[test]
    fn rejects_bad_config() {
        let data = dataset(1, 4);
        let c = TrainConfig {
            epochs: 0,
            ..cfg(Stage::Baseline)
        };
        assert!(matches!(train(&data, &[], &c, None), Err(TrainError::InvalidConfig(_))));
        assert!(matches!(train(&[], &[], &cfg(Stage::Baseline), None), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn small_rate_loss_history_is_non_increasing() {
        let monotone = (0..5u64)
            .filter(|&seed| {
                let data = dataset(10, 20 + seed);
                let c = TrainConfig {
                    epochs: 20,
                    learning_rate: 1e-3,
                    seed,
                    ..cfg(Stage::Baseline)
                };
                let (_, h) = train(&data, &[], &c, None).unwrap();
                h.epochs.windows(2).all(|w| w[1].train_loss <= w[0].train_loss)
            })
            .count();
        assert!(monotone >= 4, "{monotone}/5 seeds");
    }

    #[test]
    fn training_improves_count_error() {
        let spec = crate::toynet::DatasetSpec {
            count: 20,
            seed: 3,
            background: 0.0,
            ..Default::default()
        };
        let data = crate::toynet::synth_dataset(&spec, 1);
        let c = TrainConfig {
            epochs: 10,
            learning_rate: 1.0,
            sigma: SigmaPolicy::Fixed(2.5),
            ..cfg(Stage::Baseline)
        };
        let prepared: Vec<Prepared> = data
            .iter()
            .map(|s| prepare_sample(&s.image, &s.points, c.sigma).unwrap())
            .collect();
        let median_err = |net: &ToyNet| {
            let mut e: Vec<f64> = evaluate_counts(net, c.stage, &prepared).iter().map(|(p, g)| (p - g).abs()).collect();
            e.sort_by(f64::total_cmp);
            (e[e.len() / 2 - 1] + e[e.len() / 2]) / 2.0
        };
        let init = ToyNet::new(c.levels, derive_seed(c.seed, INIT_STREAM));
        let (net, _) = train(&data, &[], &c, None).unwrap();
        assert!(median_err(&net) < median_err(&init), "{} vs {}", median_err(&net), median_err(&init));
    }
}
