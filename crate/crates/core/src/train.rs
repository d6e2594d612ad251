//! Training: per-scene samples, the combined loss, RMSprop with a one-cycle
//! learning rate, and divergence handling.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::config::{Config, TrainConfig};
use crate::error::{Error, Result};
use crate::head::{box_code, decode_query_outputs, stage_targets, BOX_CODE};
use crate::loss::{box_loss, focal_loss};
use crate::metrics::LossPoint;
use crate::model::Detector;
use crate::params::{Graph, Group, ParamStore};
use crate::rng;
use crate::scalar::Scalar;
use crate::scene::{bev_statistics, gaussian_heatmap_targets, Box3D, GridSpec, Scene, NUM_CLASSES};
use crate::tensor::Tensor;

const ORDER_STREAM: u64 = 0x6f72_6465_72;

/// Network-ready view of one scene.
#[derive(Clone, Debug)]
pub struct Sample<T> {
    pub seed: u64,
    pub grid: GridSpec,
    /// `[H, W, 5]` BEV statistics.
    pub bev: Tensor<T>,
    /// `[H, W, classes]` Gaussian targets.
    pub targets: Tensor<T>,
    pub boxes: Vec<Box3D>,
}

impl<T: Scalar> Sample<T> {
    pub fn from_scene(scene: &Scene) -> Self {
        Sample {
            seed: scene.seed,
            grid: scene.grid.clone(),
            bev: bev_statistics(&scene.cloud, &scene.grid).features,
            targets: gaussian_heatmap_targets(&scene.boxes, &scene.grid, NUM_CLASSES),
            boxes: scene.boxes.clone(),
        }
    }
}

pub fn samples_from<T: Scalar>(scenes: &[Scene]) -> Vec<Sample<T>> {
    scenes.iter().map(Sample::from_scene).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub focal: Vec<f64>,
    pub boxes: f64,
    /// GT boxes whose center cell was selected by some stage.
    pub matched: usize,
}

/// Sum of per-stage focal losses against masked targets plus the weighted
/// box loss over GT boxes whose center cell was selected.
pub fn sample_loss<'t, T: Scalar>(
    g: &Graph<'t, T>,
    det: &Detector<T>,
    s: &Sample<T>,
    box_weight: f64,
) -> Result<(Var<'t, T>, LossParts)> {
    let (out, sel) = det.run_multistage(g, &s.bev, None)?;
    let mut parts = LossParts::default();
    let mut total: Option<Var<'t, T>> = None;
    for (i, hm) in out.heatmaps.iter().enumerate() {
        let target = stage_targets(&s.targets, &sel.stage_masks[i])?;
        let l = focal_loss(*hm, &target)?;
        parts.focal.push(l.value().item().as_f64());
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    let mut total = total.expect("at least one stage");

    let width = s.grid.width();
    let mut at_cell = vec![None; s.grid.cells()];
    for (qi, q) in sel.queries.iter().enumerate() {
        at_cell[q.cell_index(width)] = Some(qi);
    }
    let k = det.num_stages();
    let mut per_stage: Vec<(Vec<_>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); k];
    for b in &s.boxes {
        let Some((r, c)) = s.grid.cell_of(b.center[0], b.center[1]) else { continue };
        if let Some(qi) = at_cell[r * width + c] {
            let q = sel.queries[qi];
            per_stage[q.stage].0.push(q);
            per_stage[q.stage].1.extend(box_code(b, r, c, &s.grid));
            parts.matched += 1;
        }
    }
    if parts.matched > 0 {
        let mut boxes: Option<Var<'t, T>> = None;
        for (stage, (queries, codes)) in per_stage.iter().enumerate() {
            if queries.is_empty() {
                continue;
            }
            let pred = decode_query_outputs(g, queries, out.features[stage], &det.decoder)?.regression;
            let target = Tensor::from_f64(&[queries.len(), BOX_CODE], codes)?;
            let share = T::lit(queries.len() as f64 / parts.matched as f64);
            let l = box_loss(pred, &target)?.scale(share)?;
            boxes = Some(match boxes {
                Some(b) => b.add(l)?,
                None => l,
            });
        }
        let boxes = boxes.expect("matched boxes exist");
        parts.boxes = boxes.value().item().as_f64();
        total = total.add(boxes.scale(T::lit(box_weight))?)?;
    }
    parts.total = total.value().item().as_f64();
    Ok((total, parts))
}

/// Cosine one-cycle schedule: from `peak/25` up to `peak` over the warmup
/// fraction, then down to `peak/25/1e4`.
pub fn one_cycle_lr(step: usize, total: usize, peak: f64, warmup_fraction: f64) -> f64 {
    let start = peak / 25.0;
    let end = start / 1e4;
    let up = ((total as f64) * warmup_fraction).round().max(1.0);
    let s = step as f64;
    let anneal = |a: f64, b: f64, t: f64| b + (a - b) * (1.0 + (std::f64::consts::PI * t.clamp(0.0, 1.0)).cos()) / 2.0;
    if s < up {
        anneal(start, peak, s / up)
    } else {
        let down = (total as f64 - up).max(1.0);
        anneal(peak, end, (s - up) / down)
    }
}

/// RMSprop without momentum.
#[derive(Clone, Debug)]
pub struct RmsProp<T> {
    pub decay: f64,
    pub eps: f64,
    square_avg: Vec<Tensor<T>>,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(store: &ParamStore<T>, decay: f64, eps: f64) -> Self {
        RmsProp {
            decay,
            eps,
            square_avg: store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        let (rho, eps, lr) = (T::lit(self.decay), T::lit(self.eps), T::lit(lr));
        for ((e, v), g) in store.entries_mut().iter_mut().zip(&mut self.square_avg).zip(grads) {
            let Some(g) = g else { continue };
            for ((w, s), &gi) in e.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *s = rho * *s + (T::one() - rho) * gi * gi;
                *w -= lr * gi / (s.sqrt() + eps);
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainLog {
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
    /// Logged every `log_every` steps.
    pub points: Vec<LossPoint>,
}

impl TrainLog {
    /// Mean of the `window` step losses ending at step `end` (1-based).
    pub fn moving_average(&self, end: usize, window: usize) -> Option<f64> {
        if end == 0 || end > self.losses.len() || window == 0 {
            return None;
        }
        let lo = end.saturating_sub(window);
        let w = &self.losses[lo..end];
        Some(w.iter().sum::<f64>() / w.len() as f64)
    }
}

pub struct TrainOutcome<T> {
    pub detector: Detector<T>,
    pub log: TrainLog,
}

#[derive(Serialize)]
struct DivergenceDump<'a> {
    step: usize,
    lr: f64,
    error: String,
    scene_seeds: Vec<u64>,
    parts: &'a [LossParts],
    boxes: Vec<Vec<Box3D>>,
}

pub fn train<T: Scalar>(cfg: &Config, data: &[Sample<T>], dump_dir: Option<&Path>) -> Result<TrainOutcome<T>> {
    let det = Detector::new(&cfg.model, &cfg.lge, cfg.train.seed)?;
    train_from(det, &cfg.train, data, dump_dir)
}

/// Optimizes `det` in place for `tc.steps` steps. Batches follow a seeded
/// per-epoch shuffle.
pub fn train_from<T: Scalar>(
    mut det: Detector<T>,
    tc: &TrainConfig,
    data: &[Sample<T>],
    dump_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    if data.is_empty() && tc.steps > 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut opt = RmsProp::new(&det.store, tc.rms_decay, tc.rms_eps);
    let mut order_rng = rng::derived(tc.seed, ORDER_STREAM);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = TrainLog::default();
    for step in 0..tc.steps {
        let lr = one_cycle_lr(step, tc.steps, tc.lr, tc.warmup_fraction);
        let frozen = tc.freeze_backbone_phase2 && step >= tc.phase1_steps;
        let trainable = move |g: Group| !(frozen && g == Group::Backbone);
        let mut batch = Vec::with_capacity(tc.batch_size);
        for _ in 0..tc.batch_size {
            if cursor == order.len() {
                order = (0..data.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; det.store.len()];
        let mut parts_seen = Vec::with_capacity(batch.len());
        let outcome = (|| -> Result<()> {
            for &i in &batch {
                let tape = Tape::new();
                let g = Graph::with_trainable(&tape, &det.store, trainable);
                let (loss, parts) = sample_loss(&g, &det, &data[i], tc.box_weight)?;
                let bad = !parts.total.is_finite();
                parts_seen.push(parts);
                if bad {
                    return Err(Error::NonFinite { op: "loss" });
                }
                let mut tg = tape.backward(loss)?;
                for (acc, gi) in grads.iter_mut().zip(g.collect(&mut tg)) {
                    let Some(gi) = gi else { continue };
                    if !gi.is_finite() {
                        return Err(Error::NonFinite { op: "gradient" });
                    }
                    match acc {
                        Some(a) => a.add_assign(&gi),
                        None => *acc = Some(gi),
                    }
                }
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            let dump = write_dump(dump_dir, step, lr, &e, &batch, data, &parts_seen)?;
            let loss = parts_seen.last().map_or(f64::NAN, |p| p.total);
            log::error!("step {step}: {e}");
            return Err(Error::Diverged { step, loss, dump });
        }

        let inv = 1.0 / batch.len() as f64;
        let mut norm_sq = 0.0;
        for g in grads.iter_mut().flatten() {
            *g = g.scale(T::lit(inv));
            norm_sq += g.sum_squares().as_f64();
        }
        let norm = norm_sq.sqrt();
        if tc.grad_clip > 0.0 && norm > tc.grad_clip {
            let s = T::lit(tc.grad_clip / norm);
            for g in grads.iter_mut().flatten() {
                *g = g.scale(s);
            }
        }
        opt.step(&mut det.store, &grads, lr);

        let mean = |f: &dyn Fn(&LossParts) -> f64| parts_seen.iter().map(f).sum::<f64>() * inv;
        let loss = mean(&|p| p.total);
        log.losses.push(loss);
        if (step + 1) % tc.log_every == 0 || step + 1 == tc.steps {
            let point = LossPoint {
                step: step + 1,
                loss,
                focal: mean(&|p| p.focal.iter().sum()),
                boxes: mean(&|p| p.boxes),
                lr,
            };
            log::info!(
                "step {:>5} loss {:.5} focal {:.5} box {:.5} lr {:.3e}",
                point.step,
                point.loss,
                point.focal,
                point.boxes,
                lr
            );
            log.points.push(point);
        }
    }
    Ok(TrainOutcome { detector: det, log })
}

fn write_dump<T: Scalar>(
    dir: Option<&Path>,
    step: usize,
    lr: f64,
    err: &Error,
    batch: &[usize],
    data: &[Sample<T>],
    parts: &[LossParts],
) -> Result<PathBuf> {
    let dir = dir.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir);
    std::fs::create_dir_all(&dir)?;
    let path = dir.join(format!("divergence_step{step}.json"));
    let dump = DivergenceDump {
        step,
        lr,
        error: err.to_string(),
        scene_seeds: batch.iter().map(|&i| data[i].seed).collect(),
        parts,
        boxes: batch.iter().map(|&i| data[i].boxes.clone()).collect(),
    };
    std::fs::write(&path, serde_json::to_string_pretty(&dump)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_split, SceneSpec, Split};

    fn tiny_config() -> Config {
        Config::default()
            .with_overrides(&[
                "--data.scene.grid.extents=[16,16]",
                "--data.scene.grid.origin=[-9.6,-9.6]",
                "--data.scene.grid.cell_size=1.2",
                "--data.scene.num_objects=[1,3]",
                "--data.scene.clutter_points=50",
                "--model.channels=8",
                "--model.head_hidden=8",
                "--model.queries=6",
                "--model.decoder_radius=1",
                "--lge.heads=2",
                "--lge.iterations=1",
                "--train.steps=6",
                "--train.log_every=2",
                "--train.lr=0.001",
            ])
            .unwrap()
    }

    fn tiny_data(cfg: &Config, n: usize) -> Vec<Sample<f32>> {
        samples_from(&generate_split(&cfg.data.scene, 7, Split::Train, n).unwrap())
    }

    #[test]
    fn schedule_shape() {
        let peak = 1e-3;
        assert!((one_cycle_lr(0, 100, peak, 0.3) - peak / 25.0).abs() < 1e-15);
        assert!((one_cycle_lr(30, 100, peak, 0.3) - peak).abs() < 1e-15);
        assert!(one_cycle_lr(99, 100, peak, 0.3) < peak / 25.0);
        let lrs: Vec<f64> = (0..100).map(|s| one_cycle_lr(s, 100, peak, 0.3)).collect();
        assert!(lrs[..30].windows(2).all(|w| w[1] >= w[0]));
        assert!(lrs[30..].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rmsprop_first_step() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Group::Decoder, Tensor::from_f64(&[2], &[1.0, -1.0]).unwrap());
        let mut opt = RmsProp::new(&store, 0.99, 0.0);
        let g = Tensor::from_f64(&[2], &[0.5, -2.0]).unwrap();
        opt.step(&mut store, &[Some(g)], 0.01);
        // first step moves every coordinate by lr / sqrt(1 - decay)
        let d = 0.01 / 0.01f64.sqrt();
        let w = store.get(id).data();
        assert!((w[0] - (1.0 - d)).abs() < 1e-12 && (w[1] - (-1.0 + d)).abs() < 1e-12);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let mut cfg = tiny_config();
        cfg.train.steps = 0;
        let out = train::<f32>(&cfg, &[], None).unwrap();
        let fresh = Detector::<f32>::new(&cfg.model, &cfg.lge, cfg.train.seed).unwrap();
        assert_eq!(out.detector.to_bytes().unwrap(), fresh.to_bytes().unwrap());
        assert!(out.log.losses.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let cfg = tiny_config();
        let data = tiny_data(&cfg, 3);
        let a = train(&cfg, &data, None).unwrap();
        let b = train(&cfg, &data, None).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.detector.to_bytes().unwrap(), b.detector.to_bytes().unwrap());
        assert_eq!(a.log.losses.len(), 6);
        assert_eq!(a.log.points.iter().map(|p| p.step).collect::<Vec<_>>(), vec![2, 4, 6]);
    }

    #[test]
    fn backbone_freeze_is_honoured() {
        let mut cfg = tiny_config();
        cfg.train.freeze_backbone_phase2 = true;
        cfg.train.phase1_steps = 0;
        let data = tiny_data(&cfg, 2);
        let init = Detector::<f32>::new(&cfg.model, &cfg.lge, cfg.train.seed).unwrap();
        let out = train(&cfg, &data, None).unwrap();
        for (a, b) in out.detector.store.entries().iter().zip(init.store.entries()) {
            if a.group == Group::Backbone {
                assert_eq!(a.value, b.value, "{}", a.name);
            }
        }
        let moved = out
            .detector
            .store
            .entries()
            .iter()
            .zip(init.store.entries())
            .any(|(a, b)| a.group != Group::Backbone && a.value != b.value);
        assert!(moved);
    }

    #[test]
    fn divergence_writes_dump() {
        let cfg = tiny_config();
        let data = tiny_data(&cfg, 1);
        let mut det = Detector::<f32>::new(&cfg.model, &cfg.lge, 0).unwrap();
        det.store.entries_mut()[0].value.data_mut()[0] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        match train_from(det, &cfg.train, &data, Some(dir.path())) {
            Err(Error::Diverged { step, dump, .. }) => {
                assert_eq!(step, 0);
                let text = std::fs::read_to_string(dump).unwrap();
                assert!(text.contains("scene_seeds"));
            }
            other => panic!("expected divergence, got {:?}", other.err()),
        }
    }

    #[test]
    fn loss_matches_summed_parts() {
        let cfg = tiny_config();
        let data: Vec<Sample<f64>> = samples_from(&generate_split(&SceneSpec { ..cfg.data.scene.clone() }, 3, Split::Train, 1).unwrap());
        let det = Detector::<f64>::new(&cfg.model, &cfg.lge, 1).unwrap();
        let tape = Tape::new();
        let g = Graph::new(&tape, &det.store);
        let (loss, parts) = sample_loss(&g, &det, &data[0], 0.25).unwrap();
        let expect = parts.focal.iter().sum::<f64>() + 0.25 * parts.boxes;
        assert!((loss.value().item() - expect).abs() < 1e-12);
        assert_eq!(parts.focal.len(), cfg.model.stages);
    }
}
