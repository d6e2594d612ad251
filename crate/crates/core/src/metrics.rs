//! Center-distance matching, exact average precision and the evaluation
//! report.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::scene::{Box3D, CLASS_NAMES, NUM_CLASSES};

/// One predicted box with its provenance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scene: usize,
    pub stage: usize,
    pub bbox: Box3D,
}

/// Global ranking of predictions: score descending, then scene, then index.
pub fn prediction_order(preds: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .bbox
            .score
            .total_cmp(&preds[a].bbox.score)
            .then(preds[a].scene.cmp(&preds[b].scene))
            .then(a.cmp(&b))
    });
    order
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMatch {
    /// Ranked prediction indices of this class.
    pub ranked: Vec<usize>,
    /// True-positive flag per ranked prediction.
    pub tp: Vec<bool>,
    /// Per scene, per GT box: the prediction index that claimed it.
    pub claimed_by: Vec<Vec<Option<usize>>>,
    pub num_gt: usize,
}

impl ClassMatch {
    pub fn matched(&self) -> usize {
        self.tp.iter().filter(|&&t| t).count()
    }
}

/// Greedy one-to-one matching for one class: each prediction in rank order
/// claims the nearest unclaimed GT of its scene and class within
/// `threshold` meters (ties go to the lower GT index).
pub fn greedy_match(preds: &[Detection], gts: &[Vec<Box3D>], class: usize, threshold: f64) -> ClassMatch {
    let mut claimed_by: Vec<Vec<Option<usize>>> = gts.iter().map(|g| vec![None; g.len()]).collect();
    let num_gt = gts.iter().flatten().filter(|b| b.class_id == class).count();
    let ranked: Vec<usize> = prediction_order(preds)
        .into_iter()
        .filter(|&i| preds[i].bbox.class_id == class)
        .collect();
    let mut tp = Vec::with_capacity(ranked.len());
    for &i in &ranked {
        let p = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(scene_gt) = gts.get(p.scene) {
            for (j, g) in scene_gt.iter().enumerate() {
                if g.class_id != class || claimed_by[p.scene][j].is_some() {
                    continue;
                }
                let d = g.bev_distance(&p.bbox);
                if d <= threshold && best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
        }
        match best {
            Some((j, _)) => {
                claimed_by[p.scene][j] = Some(i);
                tp.push(true);
            }
            None => tp.push(false),
        }
    }
    ClassMatch {
        ranked,
        tp,
        claimed_by,
        num_gt,
    }
}

/// `(1/G) Σ_k [tp_k] · TP(k)/k` over ranks `k`, exactly. Zero when `G = 0`.
pub fn average_precision(tp: &[bool], num_gt: usize) -> BigRational {
    let mut sum = BigRational::zero();
    if num_gt == 0 {
        return sum;
    }
    let mut hits = 0u64;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
            sum += BigRational::new(BigInt::from(hits), BigInt::from(k as u64 + 1));
        }
    }
    sum / BigRational::from_integer(BigInt::from(num_gt))
}

/// Mean AP over thresholds and over the classes that have GT, exactly.
pub fn mean_average_precision(preds: &[Detection], gts: &[Vec<Box3D>], thresholds: &[f64]) -> BigRational {
    let mut sum = BigRational::zero();
    let mut terms = 0u64;
    for &thr in thresholds {
        for c in 0..NUM_CLASSES {
            let m = greedy_match(preds, gts, c, thr);
            if m.num_gt == 0 {
                continue;
            }
            sum += average_precision(&m.tp, m.num_gt);
            terms += 1;
        }
    }
    if terms == 0 {
        return sum;
    }
    sum / BigRational::from_integer(BigInt::from(terms))
}

pub fn rational_to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub num_gt: usize,
    /// Per threshold.
    pub recall: Vec<f64>,
    pub ap: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
    pub focal: f64,
    pub boxes: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassReport>,
    /// Pooled over classes, per threshold.
    pub recall: Vec<f64>,
    pub map: f64,
    /// Exact `numerator/denominator` form of `map`.
    pub map_exact: String,
    pub attribution_threshold: f64,
    /// Fraction of each stage's queries that matched a GT.
    pub stage_hit_rate: Vec<f64>,
    pub stage_queries: Vec<usize>,
    /// GT boxes matched by each stage's queries; each matched box counts
    /// for exactly one stage.
    pub stage_attribution: Vec<usize>,
    pub num_scenes: usize,
    pub num_gt: usize,
    pub num_predictions: usize,
    pub loss_curve: Vec<LossPoint>,
}

impl EvalReport {
    /// Pooled recall at `threshold`, if it is one of the reported ones.
    pub fn recall_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds
            .iter()
            .position(|&t| t == threshold)
            .map(|i| self.recall[i])
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn build_report(
    preds: &[Detection],
    gts: &[Vec<Box3D>],
    num_stages: usize,
    thresholds: &[f64],
    attribution_threshold: f64,
) -> EvalReport {
    let num_gt = gts.iter().map(Vec::len).sum();
    let mut classes: Vec<ClassReport> = (0..NUM_CLASSES)
        .map(|c| ClassReport {
            name: CLASS_NAMES[c].to_string(),
            num_gt: 0,
            recall: Vec::new(),
            ap: Vec::new(),
        })
        .collect();
    let mut recall = Vec::with_capacity(thresholds.len());
    for &thr in thresholds {
        let mut hits = 0;
        for (c, rep) in classes.iter_mut().enumerate() {
            let m = greedy_match(preds, gts, c, thr);
            rep.num_gt = m.num_gt;
            rep.recall.push(ratio(m.matched(), m.num_gt));
            rep.ap.push(rational_to_f64(&average_precision(&m.tp, m.num_gt)));
            hits += m.matched();
        }
        recall.push(ratio(hits, num_gt));
    }
    let map = mean_average_precision(preds, gts, thresholds);

    let mut stage_queries = vec![0; num_stages];
    for p in preds {
        if p.stage < num_stages {
            stage_queries[p.stage] += 1;
        }
    }
    let mut stage_attribution = vec![0; num_stages];
    for c in 0..NUM_CLASSES {
        let m = greedy_match(preds, gts, c, attribution_threshold);
        for i in m.claimed_by.iter().flatten().flatten() {
            if preds[*i].stage < num_stages {
                stage_attribution[preds[*i].stage] += 1;
            }
        }
    }
    let stage_hit_rate = stage_attribution
        .iter()
        .zip(&stage_queries)
        .map(|(&h, &q)| ratio(h, q))
        .collect();
    EvalReport {
        thresholds: thresholds.to_vec(),
        classes,
        recall,
        map: rational_to_f64(&map),
        map_exact: map.to_string(),
        attribution_threshold,
        stage_hit_rate,
        stage_queries,
        stage_attribution,
        num_scenes: gts.len(),
        num_gt,
        num_predictions: preds.len(),
        loss_curve: Vec::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(x: f64, y: f64, class_id: usize) -> Box3D {
        Box3D {
            center: [x, y, 0.5],
            size: [1.0, 1.0, 1.0],
            yaw: 0.0,
            class_id,
            score: 1.0,
        }
    }

    fn det(scene: usize, x: f64, y: f64, class_id: usize, score: f64) -> Detection {
        Detection {
            scene,
            stage: 0,
            bbox: Box3D {
                score,
                ..gt(x, y, class_id)
            },
        }
    }

    const T: [f64; 4] = [0.5, 1.0, 2.0, 4.0];

    #[test]
    fn perfect_predictions() {
        let gts = vec![vec![gt(0.0, 0.0, 0), gt(5.0, 5.0, 1)], vec![gt(-3.0, 2.0, 2)]];
        let preds: Vec<Detection> = gts
            .iter()
            .enumerate()
            .flat_map(|(s, g)| g.iter().map(move |b| det(s, b.center[0], b.center[1], b.class_id, 1.0)))
            .collect();
        let r = build_report(&preds, &gts, 1, &T, 2.0);
        assert_eq!(r.recall, vec![1.0; 4]);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.map_exact, "1");
    }

    #[test]
    fn half_recall() {
        let gts = vec![vec![gt(0.0, 0.0, 0), gt(10.0, 0.0, 0)]];
        let preds = vec![det(0, 1.5, 0.0, 0, 0.9)];
        let r = build_report(&preds, &gts, 1, &T, 2.0);
        assert_eq!(r.recall_at(2.0), Some(0.5));
        assert_eq!(r.recall_at(1.0), Some(0.0));
    }

    #[test]
    fn empty_predictions() {
        let gts = vec![vec![gt(0.0, 0.0, 0)]];
        let r = build_report(&[], &gts, 2, &T, 2.0);
        assert_eq!(r.recall, vec![0.0; 4]);
        assert_eq!(r.map, 0.0);
        assert_eq!(r.stage_hit_rate, vec![0.0, 0.0]);
    }

    #[test]
    fn ap_hand_computed() {
        // ranks: hit, miss, hit with 3 GT -> (1/1 + 2/3) / 3 = 5/9
        let ap = average_precision(&[true, false, true], 3);
        assert_eq!(ap, BigRational::new(5.into(), 9.into()));
    }

    #[test]
    fn matching_is_one_to_one_and_greedy() {
        let gts = vec![vec![gt(0.0, 0.0, 0)]];
        let preds = vec![det(0, 0.1, 0.0, 0, 0.5), det(0, 0.0, 0.0, 0, 0.9)];
        let m = greedy_match(&preds, &gts, 0, 1.0);
        assert_eq!(m.ranked, vec![1, 0]);
        assert_eq!(m.tp, vec![true, false]);
        assert_eq!(m.claimed_by, vec![vec![Some(1)]]);
    }

    #[test]
    fn scenes_and_classes_do_not_mix() {
        let gts = vec![vec![gt(0.0, 0.0, 0)], vec![]];
        let preds = vec![det(1, 0.0, 0.0, 0, 0.9), det(0, 0.0, 0.0, 1, 0.9)];
        let r = build_report(&preds, &gts, 1, &T, 2.0);
        assert_eq!(r.recall, vec![0.0; 4]);
    }

    #[test]
    fn attribution_partitions_matches() {
        let gts = vec![vec![gt(0.0, 0.0, 0), gt(8.0, 0.0, 0), gt(-8.0, 0.0, 1)]];
        let mut preds = vec![
            det(0, 0.2, 0.0, 0, 0.9),
            det(0, 8.1, 0.0, 0, 0.8),
            det(0, 0.0, 0.1, 0, 0.7),
        ];
        preds[1].stage = 1;
        preds[2].stage = 1;
        let r = build_report(&preds, &gts, 2, &T, 2.0);
        assert_eq!(r.stage_attribution, vec![1, 1]);
        assert_eq!(r.stage_queries, vec![1, 2]);
        assert_eq!(r.stage_hit_rate, vec![1.0, 0.5]);
        let matched = (r.recall_at(2.0).unwrap() * r.num_gt as f64).round() as usize;
        assert_eq!(r.stage_attribution.iter().sum::<usize>(), matched);
    }
}
