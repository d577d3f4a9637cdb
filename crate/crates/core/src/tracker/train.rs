use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrackerConfig;
use super::crop::crop_image;
use super::crop_around;
use crate::embed::{patchify, StreamPatches};
use crate::error::{Error, Result};
use crate::head::{total_loss, BBox, LossParts, LossWeights};
use crate::model::{forward, ModelConfig};
use crate::synthgen::SequenceDataset;
use crate::tensor::{Bound, Params, Tape, Tensor};

/// One training triple: template, dynamic template and search crops of
/// both modalities, with the target box in search-crop pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub rgb: StreamPatches,
    pub x: StreamPatches,
    pub gt: BBox,
}

fn pick_near(rng: &mut ChaCha8Rng, visible: &[usize], center: usize, max_gap: usize) -> usize {
    let near: Vec<usize> = visible
        .iter()
        .copied()
        .filter(|&i| i.abs_diff(center) <= max_gap)
        .collect();
    near[rng.random_range(0..near.len())]
}

/// Draws a sample from one sequence: the search frame uniformly among
/// visible frames, both template frames within `max_gap` of it, and a
/// jittered search window.
pub fn make_sample(ds: &SequenceDataset, cfg: &TrackerConfig, rng: &mut ChaCha8Rng) -> Result<TrainSample> {
    let visible: Vec<usize> = (0..ds.len()).filter(|&i| ds.visible[i]).collect();
    if visible.is_empty() {
        return Err(Error::Tracker("sequence has no visible frames".into()));
    }
    let s = visible[rng.random_range(0..visible.len())];
    let t = pick_near(rng, &visible, s, cfg.max_gap);
    let d = pick_near(rng, &visible, s, cfg.max_gap);

    let t_win = crop_around(&ds.gt[t], cfg.template_factor, cfg.template_size);
    let d_win = crop_around(&ds.gt[d], cfg.template_factor, cfg.template_size);
    let gt = ds.gt[s];
    let m = gt.w.max(gt.h).max(super::MIN_EXTENT);
    let mut jitter = |amp: f64| if amp > 0.0 { rng.random_range(-amp..=amp) } else { 0.0 };
    let dx = jitter(cfg.search_shift) * m;
    let dy = jitter(cfg.search_shift) * m;
    let scale = jitter(cfg.search_scale_jitter).exp();
    let s_win = crop_around(&gt.translated(dx, dy), cfg.search_factor * scale, cfg.search_size);

    let f = |w: &super::CropWindow, img: &crate::embed::Image| patchify(&crop_image(img, w), cfg.patch);
    let (ft, fd, fs) = (&ds.frames[t], &ds.frames[d], &ds.frames[s]);
    Ok(TrainSample {
        rgb: StreamPatches {
            template_init: f(&t_win, &ft.rgb)?,
            template_dyn: f(&d_win, &fd.rgb)?,
            search: f(&s_win, &fs.rgb)?,
        },
        x: StreamPatches {
            template_init: f(&t_win, &ft.x)?,
            template_dyn: f(&d_win, &fd.x)?,
            search: f(&s_win, &fs.x)?,
        },
        gt: s_win.to_crop(&gt),
    })
}

pub fn sample_loss(
    tape: &mut Tape,
    bound: &Bound,
    model: &ModelConfig,
    sample: &TrainSample,
) -> Result<LossParts> {
    let out = forward(tape, bound, model, &sample.rgb, &sample.x)?;
    total_loss(
        tape,
        &out.head,
        &sample.gt,
        model.geometry.search as f64,
        &LossWeights::default(),
    )
}

/// Adam with decoupled weight decay applied to matrices only.
#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            ..Default::default()
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; `lr` maps a parameter name to its step size.
    pub fn update(
        &mut self,
        params: &mut Params,
        grads: &BTreeMap<String, Tensor>,
        lr: impl Fn(&str) -> f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let entry = params
                .entry(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            if !entry.trainable {
                continue;
            }
            let decay = entry.tensor.rank() >= 2;
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.get_mut(name)?;
            let step = lr(name);
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let upd = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                if decay {
                    *pi -= step * weight_decay * *pi;
                }
                *pi -= step * upd;
            }
        }
        Ok(())
    }
}

/// Progress of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub batch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub params: Params,
    /// Batch-mean loss of every step.
    pub losses: Vec<f64>,
}

impl TrainReport {
    /// Mean of the first `k` step losses.
    pub fn initial_loss(&self, k: usize) -> f64 {
        let k = k.clamp(1, self.losses.len().max(1));
        self.losses.iter().take(k).sum::<f64>() / k as f64
    }

    /// Mean of the last `k` step losses.
    pub fn final_loss(&self, k: usize) -> f64 {
        let k = k.clamp(1, self.losses.len().max(1));
        self.losses.iter().rev().take(k).sum::<f64>() / k as f64
    }

    pub fn loss_text(&self) -> String {
        self.losses
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{i},{l:.9}\n"))
            .collect()
    }
}

/// Trains from a fresh initialization drawn with `cfg.seed`.
pub fn train(datasets: &[SequenceDataset], cfg: &TrackerConfig) -> Result<TrainReport> {
    let params = cfg.model_config().init_params(cfg.seed)?;
    train_with(params, datasets, cfg, |_| {})
}

/// Mini-batch AdamW on the batch-mean loss, reporting each step to
/// `on_step`. Deterministic given `cfg.seed`.
pub fn train_with(
    mut params: Params,
    datasets: &[SequenceDataset],
    cfg: &TrackerConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(Error::Tracker("training needs at least one sequence".into()));
    }
    let model = cfg.model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e00);
    let mut opt = AdamW::new();
    let mut losses = Vec::new();
    let batches = cfg.samples_per_epoch.div_ceil(cfg.batch);
    for epoch in 0..cfg.epochs {
        for batch in 0..batches {
            let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut loss_sum = 0.0;
            for _ in 0..cfg.batch {
                let ds = &datasets[rng.random_range(0..datasets.len())];
                let sample = make_sample(ds, cfg, &mut rng)?;
                let mut tape = Tape::new();
                let bound = params.bind(&mut tape);
                let parts = sample_loss(&mut tape, &bound, &model, &sample)?;
                let loss = tape.value(parts.total).item();
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch });
                }
                loss_sum += loss;
                for (name, g) in tape.backward(parts.total)?.for_params(&params) {
                    match sum.get_mut(&name) {
                        Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                        None => {
                            sum.insert(name, g);
                        }
                    }
                }
            }
            let inv = 1.0 / cfg.batch as f64;
            let mut norm2 = 0.0;
            for g in sum.values_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                    norm2 += *v * *v;
                }
            }
            if !norm2.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            if cfg.grad_clip > 0.0 && norm2.sqrt() > cfg.grad_clip {
                let k = cfg.grad_clip / norm2.sqrt();
                sum.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
            }
            opt.update(&mut params, &sum, |n| cfg.lr_for(n, epoch), cfg.weight_decay)?;
            let log = StepLog {
                epoch,
                batch,
                step: losses.len(),
                loss: loss_sum * inv,
            };
            losses.push(log.loss);
            on_step(&log);
        }
    }
    Ok(TrainReport { params, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_sequence, Motion, SceneSpec};
    use crate::tracker::tests::tiny_config;

    fn scene(seed: u64) -> SequenceDataset {
        generate_sequence(
            &SceneSpec {
                frames: 10,
                width: 48,
                height: 48,
                target_w: 8.0,
                target_h: 8.0,
                motion: Motion::Linear { vx: 0.5, vy: 0.0 },
                ..Default::default()
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_steps_keep_initialization() {
        let cfg = TrackerConfig { epochs: 0, ..tiny_config() };
        let init = cfg.model_config().init_params(cfg.seed).unwrap();
        let r = train(&[scene(1)], &cfg).unwrap();
        assert!(r.losses.is_empty());
        for (name, e) in init.iter() {
            assert_eq!(r.params.get(name).unwrap(), &e.tensor);
        }
    }

    #[test]
    fn equal_seeds_equal_traces() {
        let cfg = TrackerConfig {
            epochs: 1,
            samples_per_epoch: 6,
            batch: 2,
            ..tiny_config()
        };
        let a = train(&[scene(1), scene(2)], &cfg).unwrap();
        let b = train(&[scene(1), scene(2)], &cfg).unwrap();
        assert_eq!(a.losses.len(), 3);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn sample_target_lies_in_search_crop() {
        let cfg = tiny_config();
        let ds = scene(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let s = make_sample(&ds, &cfg, &mut rng).unwrap();
            let side = cfg.search_size as f64;
            assert!(s.gt.cx > 0.0 && s.gt.cx < side && s.gt.cy > 0.0 && s.gt.cy < side);
            assert_eq!(s.rgb.search.shape(), &[16, 48]);
        }
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut p = Params::new();
        p.insert("w", Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap(), true).unwrap();
        p.insert("b", Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(), true).unwrap();
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::matrix(1, 2, vec![0.5, -2.0]).unwrap());
        g.insert("b".to_string(), Tensor::new(vec![2], vec![3.0, 0.0]).unwrap());
        let mut opt = AdamW::new();
        opt.update(&mut p, &g, |_| 0.1, 0.5).unwrap();
        let w = p.get("w").unwrap().data();
        // decay 0.1 * 0.5 * p, then a unit-magnitude Adam step of 0.1
        assert!((w[0] - (1.0 - 0.05 - 0.1)).abs() < 1e-6);
        assert!((w[1] - (-1.0 + 0.05 + 0.1)).abs() < 1e-6);
        let b = p.get("b").unwrap().data();
        assert!((b[0] - 0.9).abs() < 1e-6);
        assert_eq!(b[1], 1.0);
    }

    #[test]
    fn empty_dataset_list_rejected() {
        assert!(train(&[], &tiny_config()).is_err());
    }
}
