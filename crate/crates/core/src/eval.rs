//! Metrics and reports.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::consensus::{ConsensusRecord, SynonymClustering};
use crate::data::{create_parent, read_json, write_json, DescriptionSet, SceneDataset};
use crate::error::{Error, Result};
use crate::field::ToyReferringField;
use crate::mask::{mask_iou, RleMask};
use crate::synth::GroundTruth;

/// Probability threshold for turning rendered grids into masks.
pub const BINARIZE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    /// Mean IoU per query over its views.
    pub per_query: BTreeMap<String, f64>,
    /// Mean of the per-query values; 0 with no queries.
    pub overall: f64,
}

fn sorted_mean(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `(query, view)` key with its prediction and ground truth.
type Scored = ((String, usize), RleMask, RleMask);

/// Mean IoU per query, then across queries. Keys are `(query, view)`; every
/// prediction needs a ground-truth mask under the same key.
pub fn miou(pred: &BTreeMap<(String, usize), RleMask>, gt: &BTreeMap<(String, usize), RleMask>) -> Result<MiouResult> {
    let mut per_view: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for ((q, v), p) in pred {
        let g = gt
            .get(&(q.clone(), *v))
            .ok_or_else(|| Error::Format(format!("no ground truth for query {q:?} in view {v}")))?;
        per_view.entry(q).or_default().push(mask_iou(p, g)?);
    }
    let per_query: BTreeMap<String, f64> = per_view
        .into_iter()
        .map(|(q, ious)| (q.to_string(), sorted_mean(ious)))
        .collect();
    let overall = sorted_mean(per_query.values().copied().collect());
    Ok(MiouResult { per_query, overall })
}

/// Union of the true masks of every object in `category`'s synonym group.
pub fn short_query_union(gt: &GroundTruth, category: &str, view: usize) -> Result<RleMask> {
    let group = gt
        .group_of(category)
        .ok_or_else(|| Error::UnknownCategory(category.to_string()))?;
    let mut out = RleMask::empty(gt.h, gt.w)?;
    for o in gt.objects.iter().filter(|o| o.group == group) {
        if let Some(Some(m)) = o.masks.get(view) {
            out = out.union(m)?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusAccuracy {
    /// Detections whose clustered raw label names the true group.
    pub per_view_acc: f64,
    /// Detections whose propagated label names the true group.
    pub tscm_acc: f64,
    pub detections: usize,
}

/// Label accuracy before and after consensus. `resolved` must carry the
/// propagated labels; its detections are parallel to `gt.detection_object`.
/// An empty dataset scores 1 on both.
pub fn consensus_accuracy(
    resolved: &SceneDataset,
    clustering: &SynonymClustering,
    gt: &GroundTruth,
) -> Result<ConsensusAccuracy> {
    if resolved.detections.len() != gt.detection_object.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} detections but {} ground-truth links",
            resolved.detections.len(),
            gt.detection_object.len()
        )));
    }
    let n = resolved.detections.len();
    if n == 0 {
        return Ok(ConsensusAccuracy {
            per_view_acc: 1.0,
            tscm_acc: 1.0,
            detections: 0,
        });
    }
    let mut raw_ok = 0usize;
    let mut tscm_ok = 0usize;
    for (d, &obj) in resolved.detections.iter().zip(&gt.detection_object) {
        let truth = gt
            .object(obj)
            .map(|o| o.group)
            .ok_or_else(|| Error::Format(format!("unknown ground-truth object {obj}")))?;
        let clustered = clustering.apply_phi(&d.label).name;
        raw_ok += usize::from(gt.group_of(&clustered) == Some(truth));
        let res = d
            .resolved
            .as_deref()
            .ok_or_else(|| Error::Format(format!("detection in view {} has no resolved label", d.view)))?;
        tscm_ok += usize::from(gt.group_of(res) == Some(truth));
    }
    Ok(ConsensusAccuracy {
        per_view_acc: raw_ok as f64 / n as f64,
        tscm_acc: tscm_ok as f64 / n as f64,
        detections: n,
    })
}

/// Ground-truth object of each track: the object most of its members belong
/// to, lowest id on ties.
pub fn track_objects(records: &[ConsensusRecord], gt: &GroundTruth) -> BTreeMap<u64, u64> {
    records
        .iter()
        .filter_map(|r| {
            let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
            for &(_, det) in &r.members {
                if let Some(&o) = gt.detection_object.get(det) {
                    *counts.entry(o).or_default() += 1;
                }
            }
            counts
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(o, _)| (r.track, o))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldScores {
    /// Category queries against category-level union masks.
    pub short: MiouResult,
    /// Referral queries against their objects' masks.
    pub long: MiouResult,
}

fn render_queries(
    field: &ToyReferringField,
    queries: &BTreeMap<String, (Vec<f64>, BTreeSet<u64>)>,
    gt: &GroundTruth,
    views: &[usize],
    category_level: bool,
) -> Result<MiouResult> {
    let jobs: Vec<(&String, &Vec<f64>, &BTreeSet<u64>, usize)> = queries
        .iter()
        .flat_map(|(q, (vec, objs))| views.iter().map(move |&v| (q, vec, objs, v)))
        .collect();
    let rendered: Vec<Option<Scored>> = jobs
        .par_iter()
        .map(|&(q, vec, objs, v)| -> Result<_> {
            let truth = if category_level {
                short_query_union(gt, q, v)?
            } else {
                let mut m = RleMask::empty(gt.h, gt.w)?;
                for &o in objs {
                    if let Some(Some(x)) = gt.object(o).map(|o| o.masks.get(v).cloned().flatten()) {
                        m = m.union(&x)?;
                    }
                }
                m
            };
            if truth.is_empty() {
                return Ok(None);
            }
            let pred = field.render_mask(v, vec)?.binarize(BINARIZE_THRESHOLD);
            Ok(Some(((q.clone(), v), pred, truth)))
        })
        .collect::<Result<_>>()?;
    let mut pred = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for (k, p, t) in rendered.into_iter().flatten() {
        pred.insert(k.clone(), p);
        truth.insert(k, t);
    }
    miou(&pred, &truth)
}

/// Scores a trained field on `views`. Short queries are the distinct
/// categories; long queries are the distinct referral texts. Views where a
/// query's ground truth is empty are skipped.
pub fn evaluate_field(
    field: &ToyReferringField,
    ds: &SceneDataset,
    descriptions: &[DescriptionSet],
    records: &[ConsensusRecord],
    gt: &GroundTruth,
    views: &[usize],
) -> Result<FieldScores> {
    let owners = track_objects(records, gt);
    let mut short: BTreeMap<String, (Vec<f64>, BTreeSet<u64>)> = BTreeMap::new();
    let mut long: BTreeMap<String, (Vec<f64>, BTreeSet<u64>)> = BTreeMap::new();
    for d in descriptions {
        let obj = owners.get(&d.track).copied();
        if !short.contains_key(&d.category) {
            short.insert(
                d.category.clone(),
                (ds.embedding(&d.category)?.to_vec(), BTreeSet::new()),
            );
        }
        for r in &d.referrals {
            let e = long
                .entry(r.text.clone())
                .or_insert_with(|| (r.vec.clone(), BTreeSet::new()));
            e.1.extend(obj);
        }
    }
    Ok(FieldScores {
        short: render_queries(field, &short, gt, views, true)?,
        long: render_queries(field, &long, gt, views, false)?,
    })
}

/// SHA-256 hex digest of the compact JSON of `value` with object keys sorted.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let canonical = serde_json::to_value(value)?;
    let bytes = serde_json::to_vec(&canonical)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub metrics: BTreeMap<String, f64>,
}

pub fn emit_report(report: &Report, path: &Path) -> Result<()> {
    write_json(path, report)
}

pub fn load_report(path: &Path) -> Result<Report> {
    read_json(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub metrics: BTreeMap<String, f64>,
}

/// One row per swept value; columns are the parameter then every metric name
/// seen in any row, sorted. Missing cells are left blank.
pub fn write_sweep_csv(path: &Path, param: &str, rows: &[SweepRow]) -> Result<()> {
    let columns: BTreeSet<&str> = rows.iter().flat_map(|r| r.metrics.keys().map(String::as_str)).collect();
    create_parent(path)?;
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(std::iter::once(param).chain(columns.iter().copied()))
        .map_err(csv_err)?;
    for r in rows {
        let cells = columns
            .iter()
            .map(|c| r.metrics.get(*c).map(f64::to_string).unwrap_or_default());
        w.write_record(std::iter::once(r.value.clone()).chain(cells))
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
