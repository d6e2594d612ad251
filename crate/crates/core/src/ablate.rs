//! Config sweeps: train and evaluate every cell of a grid, one CSV row each.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::metrics::EvalReport;
use crate::scene::{generate_split, Split};
use crate::train::{samples_from, train, Sample, TrainLog};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    /// Dotted config key, e.g. `model.stages`.
    pub key: String,
    pub values: Vec<Value>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub axes: Vec<Axis>,
    /// Training seeds; empty means the base config's seed.
    pub seeds: Vec<u64>,
}

impl AblationGrid {
    /// Every combination of axis values, the last axis varying fastest,
    /// then seeds.
    pub fn cells(&self, base: &Config) -> Result<Vec<Config>> {
        let mut combos: Vec<Vec<String>> = vec![Vec::new()];
        for a in &self.axes {
            if a.values.is_empty() {
                return Err(Error::Config(format!("axis {} has no values", a.key)));
            }
            combos = combos
                .into_iter()
                .flat_map(|prefix| {
                    a.values.iter().map(move |v| {
                        let raw = match v {
                            Value::String(s) => s.clone(),
                            other => other.to_string(),
                        };
                        let mut p = prefix.clone();
                        p.push(format!("{}={raw}", a.key));
                        p
                    })
                })
                .collect();
        }
        let seeds = if self.seeds.is_empty() {
            vec![base.train.seed]
        } else {
            self.seeds.clone()
        };
        let mut out = Vec::with_capacity(combos.len() * seeds.len());
        for c in &combos {
            for s in &seeds {
                let mut o = c.clone();
                o.push(format!("train.seed={s}"));
                out.push(base.with_overrides(&o)?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub iterations: usize,
    pub stages: usize,
    pub queries: usize,
    pub mode: String,
    pub seed: u64,
    pub thresholds: Vec<f64>,
    /// Empty when the cell failed.
    pub recall: Vec<f64>,
    pub map: Option<f64>,
    pub wall_time_s: f64,
    pub status: String,
}

/// Result of one train + evaluate run.
pub struct CellOutcome {
    pub report: EvalReport,
    pub log: TrainLog,
}

/// Generates both splits described by `cfg.data`.
pub fn load_data(cfg: &Config) -> Result<(Vec<Sample<f32>>, Vec<Sample<f32>>)> {
    let d = &cfg.data;
    let tr = generate_split(&d.scene, d.seed, Split::Train, d.train_scenes)?;
    let ev = generate_split(&d.scene, d.seed, Split::Eval, d.eval_scenes)?;
    Ok((samples_from(&tr), samples_from(&ev)))
}

pub fn run_cell(
    cfg: &Config,
    train_set: &[Sample<f32>],
    eval_set: &[Sample<f32>],
    dump_dir: Option<&Path>,
) -> Result<CellOutcome> {
    let out = train(cfg, train_set, dump_dir)?;
    let mut report = evaluate(&out.detector, eval_set, &cfg.eval)?.report;
    report.loss_curve = out.log.points.clone();
    Ok(CellOutcome { report, log: out.log })
}

/// Runs every cell, writing CSV rows as they finish. A failing cell is
/// recorded in its row and the sweep moves on.
pub fn run_ablation(
    base: &Config,
    grid: &AblationGrid,
    out: impl Write,
    dump_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let cells = grid.cells(base)?;
    let thresholds = base.eval.thresholds.clone();
    if cells.iter().any(|c| c.eval.thresholds != thresholds) {
        return Err(Error::Config("eval.thresholds cannot vary within a sweep".into()));
    }
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["variant", "iterations", "K", "N", "mode", "seed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(thresholds.iter().map(|t| format!("recall@{t}")));
    header.extend(["mAP", "wall_time_s", "status"].map(String::from));
    w.write_record(&header).map_err(csv_err)?;

    let mut data_cache: HashMap<String, (Vec<Sample<f32>>, Vec<Sample<f32>>)> = HashMap::new();
    let mut rows = Vec::with_capacity(cells.len());
    for (i, cfg) in cells.iter().enumerate() {
        let key = serde_json::to_string(&cfg.data)?;
        if !data_cache.contains_key(&key) {
            data_cache.insert(key.clone(), load_data(cfg)?);
        }
        let (tr, ev) = &data_cache[&key];
        log::info!(
            "cell {}/{}: variant {} it {} K {} N {} {} seed {}",
            i + 1,
            cells.len(),
            cfg.lge.variant,
            cfg.lge.iterations,
            cfg.model.stages,
            cfg.model.queries,
            cfg.model.mode,
            cfg.train.seed
        );
        let t = Instant::now();
        let res = run_cell(cfg, tr, ev, dump_dir);
        let wall = t.elapsed().as_secs_f64();
        let mut row = AblationRow {
            variant: cfg.lge.variant.to_string(),
            iterations: cfg.lge.iterations,
            stages: cfg.model.stages,
            queries: cfg.model.queries,
            mode: cfg.model.mode.to_string(),
            seed: cfg.train.seed,
            thresholds: thresholds.clone(),
            recall: Vec::new(),
            map: None,
            wall_time_s: wall,
            status: "ok".into(),
        };
        match res {
            Ok(c) => {
                row.recall = c.report.recall;
                row.map = Some(c.report.map);
            }
            Err(e) => {
                log::warn!("cell {} failed: {e}", i + 1);
                row.status = match e {
                    Error::Diverged { step, .. } => format!("diverged at step {step}"),
                    other => format!("failed: {other}"),
                };
            }
        }
        let mut rec = vec![
            row.variant.clone(),
            row.iterations.to_string(),
            row.stages.to_string(),
            row.queries.to_string(),
            row.mode.clone(),
            row.seed.to_string(),
        ];
        if row.recall.is_empty() {
            rec.extend(thresholds.iter().map(|_| String::new()));
        } else {
            rec.extend(row.recall.iter().map(|r| r.to_string()));
        }
        rec.push(row.map.map(|m| m.to_string()).unwrap_or_default());
        rec.push(format!("{wall:.3}"));
        rec.push(row.status.clone());
        w.write_record(&rec).map_err(csv_err)?;
        w.flush()?;
        rows.push(row);
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn stage_mode_grid_has_six_cells() {
        let g: AblationGrid = serde_json::from_value(json!({
            "axes": [
                {"key": "model.stages", "values": [1, 2, 3]},
                {"key": "model.mode", "values": ["parallel", "cascaded"]}
            ]
        }))
        .unwrap();
        let cells = g.cells(&Config::default()).unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[1].model.stages, 1);
        assert_eq!(cells[1].model.mode.to_string(), "cascaded");
        assert_eq!(cells[5].model.stages, 3);
    }

    #[test]
    fn variant_and_iteration_sweeps() {
        let g: AblationGrid = serde_json::from_value(json!({
            "axes": [{"key": "lge.variant", "values": ["A", "B", "C", "D", "E", "F", "G"]}]
        }))
        .unwrap();
        assert_eq!(g.cells(&Config::default()).unwrap().len(), 7);
        let g: AblationGrid = serde_json::from_value(json!({
            "axes": [{"key": "lge.iterations", "values": [1, 2, 4, 6]}],
            "seeds": [0, 1]
        }))
        .unwrap();
        let cells = g.cells(&Config::default()).unwrap();
        assert_eq!(cells.len(), 8);
        assert_eq!((cells[7].lge.iterations, cells[7].train.seed), (6, 1));
    }

    #[test]
    fn bad_axis_key_rejected() {
        let g = AblationGrid {
            axes: vec![Axis {
                key: "model.nope".into(),
                values: vec![json!(1)],
            }],
            seeds: vec![],
        };
        assert!(g.cells(&Config::default()).is_err());
    }

    #[test]
    fn failing_cell_is_recorded() {
        let base = Config::default()
            .with_overrides(&[
                "--data.scene.grid.extents=[8,8]",
                "--data.scene.grid.origin=[-4.8,-4.8]",
                "--data.scene.grid.cell_size=1.2",
                "--data.scene.num_objects=[1,2]",
                "--data.train_scenes=2",
                "--data.eval_scenes=1",
                "--model.channels=8",
                "--model.head_hidden=8",
                "--model.queries=4",
                "--model.decoder_radius=1",
                "--lge.heads=2",
                "--lge.iterations=1",
                "--train.steps=2",
            ])
            .unwrap();
        let g: AblationGrid = serde_json::from_value(json!({
            "axes": [{"key": "train.lr", "values": [1e-3, 1e30]}]
        }))
        .unwrap();
        let mut buf = Vec::new();
        let dir = tempfile::tempdir().unwrap();
        let rows = run_ablation(&base, &g, &mut buf, Some(dir.path())).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].status, "ok");
        assert!(rows[1].status.starts_with("diverged at step"), "{}", rows[1].status);
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("variant,iterations,K,N,mode,seed,recall@0.5,recall@1,recall@2,recall@4,mAP"));
    }
}
