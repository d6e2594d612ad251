//! Inference over a split and the evaluation report.

use std::io::Write;
use std::path::Path;

use crate::autodiff::Tape;
use crate::config::EvalConfig;
use crate::error::Result;
use crate::head::{decode_query_outputs, boxes_from_outputs, Query, Selection};
use crate::metrics::{build_report, Detection, EvalReport};
use crate::model::Detector;
use crate::params::Graph;
use crate::scalar::Scalar;
use crate::train::Sample;

/// Selection and decoded boxes of one scene, both in selection order.
#[derive(Clone, Debug)]
pub struct SceneOutput {
    pub selection: Selection,
    pub detections: Vec<Detection>,
}

/// Forward-only inference on one scene using a total budget `total`.
pub fn detect_scene<T: Scalar>(
    det: &Detector<T>,
    sample: &Sample<T>,
    scene: usize,
    total: Option<usize>,
) -> Result<SceneOutput> {
    let tape = Tape::new();
    let g = Graph::with_trainable(&tape, &det.store, |_| false);
    let (out, selection) = det.run_multistage(&g, &sample.bev, total)?;
    let mut detections: Vec<Option<Detection>> = vec![None; selection.queries.len()];
    for (stage, &f) in out.features.iter().enumerate() {
        let (idx, queries): (Vec<usize>, Vec<Query>) = selection
            .queries
            .iter()
            .enumerate()
            .filter(|(_, q)| q.stage == stage)
            .map(|(i, q)| (i, *q))
            .unzip();
        if queries.is_empty() {
            continue;
        }
        let d = decode_query_outputs(&g, &queries, f, &det.decoder)?;
        let boxes = boxes_from_outputs(&queries, &d.regression.value(), &d.refine.value(), &sample.grid);
        for (i, b) in idx.into_iter().zip(boxes) {
            detections[i] = Some(Detection { scene, stage, bbox: b });
        }
    }
    Ok(SceneOutput {
        selection,
        detections: detections.into_iter().map(|d| d.expect("every query decoded")).collect(),
    })
}

pub struct Evaluation {
    pub report: EvalReport,
    pub scenes: Vec<SceneOutput>,
}

pub fn evaluate<T: Scalar>(det: &Detector<T>, samples: &[Sample<T>], cfg: &EvalConfig) -> Result<Evaluation> {
    let scenes = samples
        .iter()
        .enumerate()
        .map(|(i, s)| detect_scene(det, s, i, cfg.test_queries))
        .collect::<Result<Vec<_>>>()?;
    let preds: Vec<Detection> = scenes.iter().flat_map(|s| s.detections.iter().copied()).collect();
    let gts: Vec<_> = samples.iter().map(|s| s.boxes.clone()).collect();
    let report = build_report(&preds, &gts, det.num_stages(), &cfg.thresholds, cfg.attribution_threshold);
    Ok(Evaluation { report, scenes })
}

/// `stage,class,score,x,y,z,l,w,h,yaw` records.
pub fn write_detections_csv(w: &mut impl Write, dets: &[Detection]) -> Result<()> {
    writeln!(w, "stage,class,score,x,y,z,l,w,h,yaw")?;
    for d in dets {
        let b = &d.bbox;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{}",
            d.stage, b.class_id, b.score, b.center[0], b.center[1], b.center[2], b.size[0], b.size[1], b.size[2], b.yaw
        )?;
    }
    Ok(())
}

/// One `scene_NNNNN.csv` per scene under `dir`.
pub fn write_scene_dumps(dir: &Path, scenes: &[SceneOutput]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, s) in scenes.iter().enumerate() {
        let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("scene_{i:05}.csv")))?);
        write_detections_csv(&mut f, &s.detections)?;
        f.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::scene::{generate_split, Split};
    use crate::train::samples_from;

    fn setup() -> (Config, Detector<f32>, Vec<Sample<f32>>) {
        let cfg = Config::default()
            .with_overrides(&[
                "--data.scene.grid.extents=[16,16]",
                "--data.scene.grid.origin=[-9.6,-9.6]",
                "--data.scene.grid.cell_size=1.2",
                "--data.scene.num_objects=[1,3]",
                "--model.channels=8",
                "--model.head_hidden=8",
                "--model.queries=5",
                "--model.decoder_radius=1",
                "--lge.heads=2",
                "--lge.iterations=1",
            ])
            .unwrap();
        let det = Detector::new(&cfg.model, &cfg.lge, 0).unwrap();
        let data = samples_from(&generate_split(&cfg.data.scene, 1, Split::Eval, 3).unwrap());
        (cfg, det, data)
    }

    #[test]
    fn one_detection_per_query() {
        let (cfg, det, data) = setup();
        let ev = evaluate(&det, &data, &cfg.eval).unwrap();
        assert_eq!(ev.scenes.len(), 3);
        for s in &ev.scenes {
            assert_eq!(s.detections.len(), 15);
            for (q, d) in s.selection.queries.iter().zip(&s.detections) {
                assert_eq!(q.stage, d.stage);
                assert_eq!(q.class_id, d.bbox.class_id);
            }
        }
        assert_eq!(ev.report.num_predictions, 45);
        assert!(ev.report.recall.iter().all(|r| (0.0..=1.0).contains(r)));
    }

    #[test]
    fn larger_test_budget_extends_selection() {
        let (mut cfg, det, data) = setup();
        let base = evaluate(&det, &data, &cfg.eval).unwrap();
        cfg.eval.test_queries = Some(20);
        let wide = evaluate(&det, &data, &cfg.eval).unwrap();
        for (a, b) in base.scenes.iter().zip(&wide.scenes) {
            assert_eq!(b.selection.queries.len(), 20);
            assert_eq!(a.selection.queries[..], b.selection.queries[..15]);
            assert_eq!(a.detections[..], b.detections[..15]);
        }
    }

    #[test]
    fn csv_dump() {
        let (cfg, det, data) = setup();
        let ev = evaluate(&det, &data[..1], &cfg.eval).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scene_dumps(dir.path(), &ev.scenes).unwrap();
        let text = std::fs::read_to_string(dir.path().join("scene_00000.csv")).unwrap();
        assert_eq!(text.lines().count(), 16);
        assert!(text.starts_with("stage,class,score,x,y,z,l,w,h,yaw\n"));
    }
}
