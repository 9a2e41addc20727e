//! Adam training of the toy segmentation net with best-IoU model selection.
//!
//! Per-sample gradients are computed in parallel but reduced in dataset
//! order, so a fixed seed reproduces checkpoints bit for bit regardless of
//! thread scheduling.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{closs, closs_grad, iou, LossParams};
use super::net::{backward, forward, ToyNet, ToyNetConfig, DOWNSAMPLE_FACTOR};
use super::tensor::Tensor4;
use crate::augment::{augment_pair, rng_for_index, AugmentConfig};
use crate::imagecore::{BinaryMask, GrayImage};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossParams,
    /// Fraction of the dataset held out for validation (every k-th item).
    pub val_fraction: f64,
    /// Augmentation applied to training samples; `None` uses them verbatim.
    pub augment: Option<AugmentConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 30,
            batch_size: 4,
            seed: 42,
            loss: LossParams::default(),
            val_fraction: 0.2,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr.is_nan() || self.lr < 0.0 {
            return Err(Error::InvalidParam("lr must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidParam("batch_size must be >= 1".into()));
        }
        if !(0.0..=0.5).contains(&self.val_fraction) {
            return Err(Error::InvalidParam("val_fraction must be in [0, 0.5]".into()));
        }
        self.loss.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_iou: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_iou: f64,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(net: &ToyNet) -> Self {
        Self {
            m: net.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: net.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            t: 0,
        }
    }

    fn step(&mut self, net: &mut ToyNet, grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (pi, param) in net.params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[pi], &mut self.v[pi]);
            for (k, g) in grads[pi].iter().enumerate() {
                let g = *g as f64;
                let mk = BETA1 * m[k] as f64 + (1.0 - BETA1) * g;
                let vk = BETA2 * v[k] as f64 + (1.0 - BETA2) * g * g;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let update = lr * (mk / c1) / ((vk / c2).sqrt() + ADAM_EPS);
                param.data[k] -= update as f32;
            }
        }
    }
}

fn to_tensor(img: &GrayImage) -> Tensor4 {
    Tensor4 {
        n: 1,
        c: 1,
        h: img.height(),
        w: img.width(),
        data: img.data().iter().map(|&v| v as f32).collect(),
    }
}

/// Argmax of the two-class probabilities: 1 where the ridge class wins.
fn probs_to_mask(probs: &Tensor4) -> BinaryMask {
    let (h, w) = (probs.h, probs.w);
    let mut mask = BinaryMask::zeros(w, h);
    let p0 = probs.plane(0, 0);
    let p1 = probs.plane(0, 1);
    for k in 0..h * w {
        if p1[k] > p0[k] {
            mask.data_mut()[k] = 1;
        }
    }
    mask
}

fn sample_pass(
    net: &ToyNet,
    img: &GrayImage,
    truth: &BinaryMask,
    loss_params: &LossParams,
) -> Result<(f64, Vec<Vec<f32>>)> {
    let x = to_tensor(img);
    let cache = forward(net, &x)?;
    let p1: Vec<f64> = cache.probs.plane(0, 1).iter().map(|&v| v as f64).collect();
    let loss = closs(&p1, truth, loss_params)?;
    let grad = closs_grad(&p1, truth, loss_params)?;
    let mut dprob = Tensor4::zeros(1, 1, x.h, x.w);
    for (dst, &g) in dprob.plane_mut(0, 0).iter_mut().zip(&grad) {
        *dst = g as f32;
    }
    let grads = backward(net, &cache, &dprob)?;
    Ok((loss, grads))
}

/// Forward-only mask prediction used by validation.
pub(crate) fn infer_mask(net: &ToyNet, img: &GrayImage) -> Result<BinaryMask> {
    let cache = forward(net, &to_tensor(img))?;
    Ok(probs_to_mask(&cache.probs))
}

/// Trains the toy net, retaining the parameters with the best validation
/// IoU. Returns the selected model and the per-epoch log.
pub fn toy_train(
    dataset: &[(GrayImage, BinaryMask)],
    net_cfg: &ToyNetConfig,
    cfg: &TrainConfig,
) -> Result<(ToyNet, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (img, mask) in dataset {
        if img.width() != mask.width() || img.height() != mask.height() {
            return Err(Error::DimensionMismatch {
                expected_w: img.width(),
                expected_h: img.height(),
                got_w: mask.width(),
                got_h: mask.height(),
            });
        }
        if cfg.augment.is_none()
            && (img.width() % DOWNSAMPLE_FACTOR != 0 || img.height() % DOWNSAMPLE_FACTOR != 0)
        {
            return Err(Error::InvalidParam(format!(
                "sample dims {}x{} not divisible by {DOWNSAMPLE_FACTOR}",
                img.width(),
                img.height()
            )));
        }
    }

    // Hold out every k-th sample; tiny datasets validate on themselves.
    let val_step = if cfg.val_fraction > 0.0 {
        (1.0 / cfg.val_fraction).round() as usize
    } else {
        usize::MAX
    };
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for i in 0..dataset.len() {
        if val_step != usize::MAX && i % val_step == val_step - 1 {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    if val_idx.is_empty() {
        val_idx = train_idx.clone();
    }
    if train_idx.is_empty() {
        train_idx = val_idx.clone();
    }

    let mut net = ToyNet::init(net_cfg)?;
    let mut adam = Adam::new(&net);
    let mut report = TrainReport {
        best_iou: f64::NEG_INFINITY,
        ..Default::default()
    };
    let mut best_params: Option<Vec<_>> = None;

    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            // Materialize (possibly augmented) samples first, then run the
            // passes in parallel and reduce in chunk order.
            let samples: Vec<(GrayImage, BinaryMask)> = chunk
                .iter()
                .map(|&i| match &cfg.augment {
                    None => Ok(dataset[i].clone()),
                    Some(acfg) => {
                        let stream = (epoch * dataset.len() + i) as u64;
                        let mut rng = rng_for_index(acfg.seed, stream);
                        let (img, mask, _) =
                            augment_pair(&dataset[i].0, &dataset[i].1, acfg, &mut rng)?;
                        Ok((img, mask))
                    }
                })
                .collect::<Result<_>>()?;

            let results: Vec<Result<(f64, Vec<Vec<f32>>)>> = samples
                .par_iter()
                .map(|(img, mask)| sample_pass(&net, img, mask, &cfg.loss))
                .collect();

            let mut batch_loss = 0.0;
            let mut summed: Option<Vec<Vec<f32>>> = None;
            for r in results {
                let (loss, grads) = r?;
                batch_loss += loss;
                summed = Some(match summed {
                    None => grads,
                    Some(mut acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads) {
                            for (x, y) in a.iter_mut().zip(g) {
                                *x += y;
                            }
                        }
                        acc
                    }
                });
            }
            let mut grads = summed.expect("nonempty chunk");
            let scale = 1.0 / chunk.len() as f32;
            for g in grads.iter_mut() {
                for v in g.iter_mut() {
                    *v *= scale;
                }
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
            adam.step(&mut net, &grads, cfg.lr);
            epoch_loss += batch_loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(Error::Diverged { epoch });
        }

        let val_scores: Vec<Result<f64>> = val_idx
            .par_iter()
            .map(|&i| {
                let pred = infer_mask(&net, &dataset[i].0)?;
                iou(&pred, &dataset[i].1)
            })
            .collect();
        let mut val_sum = 0.0;
        for s in val_scores {
            val_sum += s?;
        }
        let val_iou = val_sum / val_idx.len() as f64;

        report.epochs.push(EpochLog {
            epoch,
            train_loss,
            val_iou,
        });
        if val_iou > report.best_iou {
            report.best_iou = val_iou;
            report.best_epoch = Some(epoch);
            best_params = Some(net.params.clone());
        }
    }

    if let Some(best) = best_params {
        net.params = best;
    }
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn overfit_dataset() -> Vec<(GrayImage, BinaryMask)> {
        (0..4)
            .map(|i| {
                synth::contaminated_grating_with(
                    64,
                    64,
                    100 + i,
                    &synth::LatentFixtureParams {
                        lines: 0,
                        text_marks: 0,
                        noise: 0.0,
                        amplitude: 0.45,
                        ..Default::default()
                    },
                )
            })
            .collect()
    }

    fn small_net() -> ToyNetConfig {
        ToyNetConfig {
            encoder_widths: vec![3, 4, 6, 8, 8, 8],
            decoder_widths: vec![8, 6, 4, 4, 3],
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let data = overfit_dataset();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            batch_size: 2,
            val_fraction: 0.0,
            ..Default::default()
        };
        let (net, _) = toy_train(&data, &small_net(), &cfg).unwrap();
        let init = ToyNet::init(&small_net()).unwrap();
        for (a, b) in net.params.iter().zip(&init.params) {
            assert_eq!(a.data, b.data, "{} changed under lr = 0", a.name);
        }
    }

    #[test]
    fn zero_epochs_returns_initialization_and_empty_log() {
        let data = overfit_dataset();
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (net, report) = toy_train(&data, &small_net(), &cfg).unwrap();
        assert!(report.epochs.is_empty());
        let init = ToyNet::init(&small_net()).unwrap();
        for (a, b) in net.params.iter().zip(&init.params) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(
            toy_train(&[], &small_net(), &TrainConfig::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn overfit_loss_non_increasing_and_small() {
        // Full-batch descent on four clean samples. Adam's epoch losses
        // carry step-level jitter below 2e-3 even on this convex-ish
        // fixture, so "non-increasing" allows that much slack.
        let data = overfit_dataset();
        let cfg = TrainConfig {
            lr: 5e-3,
            epochs: 250,
            batch_size: 4,
            val_fraction: 0.0,
            ..Default::default()
        };
        let (_, report) = toy_train(&data, &small_net(), &cfg).unwrap();
        let losses: Vec<f64> = report.epochs.iter().map(|e| e.train_loss).collect();
        for w in losses.windows(2) {
            assert!(
                w[1] <= w[0] + 2e-3,
                "loss increased: {} -> {} in {losses:?}",
                w[0],
                w[1]
            );
        }
        assert!(
            losses.last().unwrap() < &0.05,
            "final loss {} too high",
            losses.last().unwrap()
        );
    }

    #[test]
    fn same_seed_reproduces_training_bit_for_bit() {
        let data = overfit_dataset();
        let cfg = TrainConfig {
            lr: 1e-3,
            epochs: 2,
            batch_size: 2,
            val_fraction: 0.0,
            ..Default::default()
        };
        let (a, ra) = toy_train(&data, &small_net(), &cfg).unwrap();
        let (b, rb) = toy_train(&data, &small_net(), &cfg).unwrap();
        for (x, y) in a.params.iter().zip(&b.params) {
            assert_eq!(x.data, y.data);
        }
        for (x, y) in ra.epochs.iter().zip(&rb.epochs) {
            assert_eq!(x.train_loss.to_bits(), y.train_loss.to_bits());
            assert_eq!(x.val_iou.to_bits(), y.val_iou.to_bits());
        }
    }
}
