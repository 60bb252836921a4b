//! Grid sweeps over [`RunConfig`] fields.
//!
//! An axis names one config field and lists the values it takes; the grid is
//! the cartesian product of its axes, each cell run once per seed. The special
//! axis `variant` takes objects `{"name": ..., <field>: <value>, ...}` and
//! applies several overrides under one label.

use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::metrics::Scores;
use crate::trainer::{train, RunConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub field: String,
    pub values: Vec<Value>,
}

impl Axis {
    pub fn new(field: &str, values: Vec<Value>) -> Self {
        Self {
            field: field.into(),
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationGrid {
    pub base: RunConfig,
    #[serde(default)]
    pub axes: Vec<Axis>,
    /// Defaults to the base seed alone.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub config: RunConfig,
}

const FIXED_FIELDS: [&str; 3] = ["seed", "output_dir", "manifest"];
const UNCL_FIELDS: [&str; 5] = ["entropy_mode", "beta_mode", "beta_max", "beta_min", "beta_decay"];
const FECL_FIELDS: [&str; 5] = ["gamma", "top_k", "tau", "patch_k", "gambling_temperature"];

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn label_of(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Object(m) if m.get("mode").is_some() => match (m.get("mode"), m.get("value")) {
            (Some(Value::String(mode)), Some(val)) => format!("{mode}:{val}"),
            (Some(Value::String(mode)), None) => mode.clone(),
            _ => v.to_string(),
        },
        other => other.to_string(),
    }
}

impl AblationGrid {
    pub fn seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.base.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Resolve every cell, rejecting grids that are empty, repeat a field,
    /// name unknown or fixed fields, or vary a loss setting whose loss is off
    /// in every cell.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let base = match serde_json::to_value(&self.base) {
            Ok(Value::Object(m)) => m,
            _ => return Err(cfg_err("base config must serialize to an object")),
        };
        let mut seen: Vec<&str> = Vec::new();
        for a in &self.axes {
            if a.values.is_empty() {
                return Err(cfg_err(format!("axis {} has no values", a.field)));
            }
            if seen.contains(&a.field.as_str()) {
                return Err(cfg_err(format!("axis {} appears twice", a.field)));
            }
            seen.push(&a.field);
        }

        let mut cells: Vec<(Vec<String>, Map<String, Value>)> = vec![(vec![], base.clone())];
        for a in &self.axes {
            let mut next = Vec::with_capacity(cells.len() * a.values.len());
            for (labels, cfg) in &cells {
                for v in &a.values {
                    let mut cfg = cfg.clone();
                    let mut labels = labels.clone();
                    let overrides: Vec<(String, Value)> = if a.field == "variant" {
                        let Value::Object(obj) = v else {
                            return Err(cfg_err("variant values must be objects"));
                        };
                        let name = obj
                            .get("name")
                            .and_then(Value::as_str)
                            .ok_or_else(|| cfg_err("variant needs a string name"))?;
                        labels.push(name.to_string());
                        obj.iter()
                            .filter(|(k, _)| k.as_str() != "name")
                            .map(|(k, v)| (k.clone(), v.clone()))
                            .collect()
                    } else {
                        labels.push(format!("{}={}", a.field, label_of(v)));
                        vec![(a.field.clone(), v.clone())]
                    };
                    for (k, v) in overrides {
                        if FIXED_FIELDS.contains(&k.as_str()) {
                            return Err(cfg_err(format!("{k} cannot be an ablation axis")));
                        }
                        if !base.contains_key(&k) {
                            return Err(cfg_err(format!("unknown config field {k}")));
                        }
                        cfg.insert(k, v);
                    }
                    next.push((labels, cfg));
                }
            }
            cells = next;
        }

        let mut out = Vec::with_capacity(cells.len());
        for (labels, cfg) in cells {
            let config: RunConfig = serde_json::from_value(Value::Object(cfg))
                .map_err(|e| cfg_err(format!("invalid ablation cell: {e}")))?;
            config.validate()?;
            let label = if labels.is_empty() {
                "base".to_string()
            } else {
                labels.join(";")
            };
            out.push(Cell { label, config });
        }
        for a in &self.axes {
            let fields: Vec<&str> = if a.field == "variant" {
                vec![]
            } else {
                vec![a.field.as_str()]
            };
            for f in fields {
                if UNCL_FIELDS.contains(&f) && out.iter().all(|c| !c.config.use_uncl) {
                    return Err(cfg_err(format!("axis {f} varies but use_uncl is off in every cell")));
                }
                if FECL_FIELDS.contains(&f) && out.iter().all(|c| !c.config.use_fecl) {
                    return Err(cfg_err(format!("axis {f} varies but use_fecl is off in every cell")));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: usize,
    pub label: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub final_scores: Scores,
    pub best_val_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: usize,
    pub label: String,
    pub seeds: usize,
    pub mean: Scores,
    pub mean_best_dice: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
    pub summary: Vec<CellSummary>,
}

pub const ABLATION_FILE: &str = "ablation.csv";
pub const SUMMARY_FILE: &str = "ablation_summary.csv";

fn csv_label(s: &str) -> String {
    if s.contains(',') || s.contains('"') {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl AblationResult {
    pub fn rows_csv(&self) -> String {
        let mut s = String::from("cell,label,seed,dice,iou,hd95,asd,best_dice\n");
        for r in &self.rows {
            let f = &r.final_scores;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.cell,
                csv_label(&r.label),
                r.seed,
                f.dice,
                f.iou,
                f.hd95,
                f.asd,
                r.best_val_dice
            ));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("cell,label,seeds,dice,iou,hd95,asd,best_dice\n");
        for c in &self.summary {
            let m = &c.mean;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.cell,
                csv_label(&c.label),
                c.seeds,
                m.dice,
                m.iou,
                m.hd95,
                m.asd,
                c.mean_best_dice
            ));
        }
        s
    }
}

/// Run every cell for every seed under `base.output_dir/cellNN_seedS` and
/// write the per-run and seed-mean CSVs next to them.
pub fn ablate(grid: &AblationGrid) -> Result<AblationResult> {
    let cells = grid.cells()?;
    let seeds = grid.seeds();
    let root = grid.base.output_dir.clone();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for (ci, cell) in cells.iter().enumerate() {
        let mut finals = Vec::with_capacity(seeds.len());
        let mut bests = 0.0;
        for &seed in &seeds {
            let mut cfg = cell.config.clone();
            cfg.seed = seed;
            cfg.output_dir = root.join(format!("cell{ci:02}_seed{seed}"));
            let out = train(&cfg)?;
            finals.push(out.final_scores);
            bests += out.best_val_dice;
            rows.push(AblationRow {
                cell: ci,
                label: cell.label.clone(),
                seed,
                output_dir: cfg.output_dir,
                final_scores: out.final_scores,
                best_val_dice: out.best_val_dice,
            });
        }
        summary.push(CellSummary {
            cell: ci,
            label: cell.label.clone(),
            seeds: seeds.len(),
            mean: Scores::mean(&finals).expect("at least one seed"),
            mean_best_dice: bests / seeds.len() as f64,
        });
    }
    let result = AblationResult { rows, summary };
    let p = root.join(ABLATION_FILE);
    fs::write(&p, result.rows_csv()).map_err(|e| Error::io(&p, e))?;
    let p = root.join(SUMMARY_FILE);
    fs::write(&p, result.summary_csv()).map_err(|e| Error::io(&p, e))?;
    Ok(result)
}
