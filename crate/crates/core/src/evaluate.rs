//! Checkpoint evaluation with per-volume and grouped metrics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fields::{LabelField, VolumeBatch};
use crate::metrics::{report_csv, score, Scores, VolumeMetrics};
use crate::segnet::{forward, load_checkpoint, ParamSet};
use crate::synthvol::{Category, Dataset, Role, Scatter};

/// Produces a label map for volume `index` of a dataset.
pub trait Segmenter {
    fn segment(&self, index: usize, image: &VolumeBatch) -> Result<LabelField>;
}

pub struct NetSegmenter {
    pub params: ParamSet,
}

impl Segmenter for NetSegmenter {
    fn segment(&self, _index: usize, image: &VolumeBatch) -> Result<LabelField> {
        Ok(forward(&self.params, image, false)?.probs.argmax())
    }
}

/// Returns the ground-truth masks; a test hook for the evaluation pipeline.
pub struct OracleSegmenter<'a> {
    pub masks: &'a [LabelField],
}

impl Segmenter for OracleSegmenter<'_> {
    fn segment(&self, index: usize, _image: &VolumeBatch) -> Result<LabelField> {
        Ok(self.masks[index].clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupBy {
    Category,
    Scatter,
}

impl GroupBy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "category" => Ok(GroupBy::Category),
            "scatter" => Ok(GroupBy::Scatter),
            other => Err(Error::param(format!("cannot group by {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Val,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub n: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_volume: Vec<VolumeMetrics>,
    pub groups: Vec<GroupRow>,
    pub overall: Option<Scores>,
    pub warnings: Vec<String>,
}

pub fn evaluate_with(
    seg: &dyn Segmenter,
    data: &Dataset,
    split: EvalSplit,
    group_by: Option<GroupBy>,
) -> Result<EvalReport> {
    let indices: Vec<usize> = match split {
        EvalSplit::Val => data.indices(Role::Val),
        EvalSplit::All => (0..data.images.len()).collect(),
    };
    let mut per_volume = Vec::with_capacity(indices.len());
    for &i in &indices {
        let entry = &data.manifest.volumes[i];
        let pred = seg.segment(i, &data.images[i])?;
        per_volume.push(VolumeMetrics {
            volume_id: entry.id.clone(),
            category: entry.category,
            scatter: entry.scatter,
            scores: score(&pred, &data.masks[i])?,
        });
    }
    let mut warnings = Vec::new();
    if per_volume.is_empty() {
        warnings.push("no volumes to evaluate".to_string());
    }
    let keys: Vec<(String, Box<dyn Fn(&VolumeMetrics) -> bool>)> = match group_by {
        None => vec![],
        Some(GroupBy::Category) => Category::ALL
            .iter()
            .map(|&c| (c.to_string(), Box::new(move |v: &VolumeMetrics| v.category == c) as Box<dyn Fn(&VolumeMetrics) -> bool>))
            .collect(),
        Some(GroupBy::Scatter) => Scatter::ALL
            .iter()
            .map(|&s| (s.to_string(), Box::new(move |v: &VolumeMetrics| v.scatter == s) as Box<dyn Fn(&VolumeMetrics) -> bool>))
            .collect(),
    };
    let mut groups = Vec::new();
    for (name, pred) in keys {
        let members: Vec<Scores> = per_volume.iter().filter(|v| pred(v)).map(|v| v.scores).collect();
        match Scores::mean(&members) {
            Some(scores) => groups.push(GroupRow {
                group: name,
                n: members.len(),
                scores,
            }),
            None => warnings.push(format!("group {name} has no volumes; row omitted")),
        }
    }
    let all: Vec<Scores> = per_volume.iter().map(|v| v.scores).collect();
    Ok(EvalReport {
        overall: Scores::mean(&all),
        per_volume,
        groups,
        warnings,
    })
}

pub fn evaluate(
    checkpoint: &Path,
    manifest: &Path,
    split: EvalSplit,
    group_by: Option<GroupBy>,
) -> Result<EvalReport> {
    let (params, _) = load_checkpoint(checkpoint)?;
    let data = Dataset::load(manifest)?;
    evaluate_with(&NetSegmenter { params }, &data, split, group_by)
}

pub const GROUP_HEADER: &str = "group,n,dice,iou,hd95,asd";

pub fn groups_csv(rows: &[GroupRow]) -> String {
    let mut s = String::from(GROUP_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.group, r.n, r.scores.dice, r.scores.iou, r.scores.hd95, r.scores.asd
        ));
    }
    s
}

/// Writes `metrics.csv` (per volume) and, when grouped, `groups.csv`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("metrics.csv");
    fs::write(&p, report_csv(&report.per_volume)).map_err(|e| Error::io(&p, e))?;
    if !report.groups.is_empty() {
        let p = dir.join("groups.csv");
        fs::write(&p, groups_csv(&report.groups)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
