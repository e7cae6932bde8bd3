//! Detection records, trajectories, label embeddings, and on-disk datasets.
//!
//! A dataset on disk is a JSON manifest pointing at sibling files:
//! line-delimited detections, an embedding map keyed by label, and optional
//! line-delimited descriptions and track sidecars.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::RleMask;

/// Tolerance on the Euclidean norm of stored embedding vectors.
pub const UNIT_NORM_TOL: f64 = 1e-6;

/// One per-view observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub view: usize,
    /// Raw per-view label.
    pub label: String,
    pub conf: f64,
    pub mask: RleMask,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track: Option<u64>,
    /// Trajectory-level label assigned by consensus; `label` keeps the raw one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resolved: Option<String>,
}

impl Detection {
    pub fn new(view: usize, label: impl Into<String>, conf: f64, mask: RleMask) -> Self {
        Detection {
            view,
            label: label.into(),
            conf,
            mask,
            track: None,
            resolved: None,
        }
    }

    pub fn with_track(mut self, track: u64) -> Self {
        self.track = Some(track);
        self
    }
}

/// A member of a trajectory: `(view, detection index)`, where the detection
/// index is the position in the dataset's detection list.
pub type Member = (usize, usize);

/// Detections of one physical object across views, ordered by view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    #[serde(rename = "track")]
    pub track_id: u64,
    pub members: Vec<Member>,
}

impl Trajectory {
    /// Builds a trajectory, sorting members by view and rejecting empty
    /// member lists and repeated views.
    pub fn new(track_id: u64, mut members: Vec<Member>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::Format(format!("trajectory {track_id} has no members")));
        }
        members.sort_unstable();
        if let Some(w) = members.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateTrackView {
                track: track_id,
                view: w[0].0,
            });
        }
        Ok(Trajectory { track_id, members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn views(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().map(|m| m.0)
    }

    pub fn detection_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().map(|m| m.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbedding {
    pub label: String,
    pub vector: Vec<f64>,
}

impl LabelEmbedding {
    pub fn new(label: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        let label = label.into();
        check_unit(&label, &vector)?;
        Ok(LabelEmbedding { label, vector })
    }
}

fn check_unit(label: &str, v: &[f64]) -> Result<()> {
    let norm = l2_norm(v);
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::Format(format!(
            "embedding for {label:?} has norm {norm}, expected 1"
        )));
    }
    Ok(())
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `v` to unit length. A zero vector is returned unchanged.
pub fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = l2_norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Referral {
    pub text: String,
    pub vec: Vec<f64>,
}

/// Category plus referring descriptions of one track. The category's vector is
/// the dataset embedding of its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptionSet {
    pub track: u64,
    pub category: String,
    pub referrals: Vec<Referral>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_views: usize,
    pub h: u32,
    pub w: u32,
    pub dim: usize,
    pub detections: String,
    pub embeddings: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptions: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tracks: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneDataset {
    pub n_views: usize,
    pub h: u32,
    pub w: u32,
    pub dim: usize,
    pub detections: Vec<Detection>,
    pub embeddings: BTreeMap<String, Vec<f64>>,
    pub descriptions: Option<Vec<DescriptionSet>>,
    pub tracks: Option<Vec<Trajectory>>,
}

impl SceneDataset {
    pub fn new(n_views: usize, h: u32, w: u32, dim: usize) -> Self {
        SceneDataset {
            n_views,
            h,
            w,
            dim,
            detections: Vec::new(),
            embeddings: BTreeMap::new(),
            descriptions: None,
            tracks: None,
        }
    }

    pub fn embedding(&self, label: &str) -> Result<&[f64]> {
        self.embeddings
            .get(label)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingEmbedding(label.to_string()))
    }

    pub fn label_embeddings(&self) -> Vec<LabelEmbedding> {
        self.embeddings
            .iter()
            .map(|(label, v)| LabelEmbedding {
                label: label.clone(),
                vector: v.clone(),
            })
            .collect()
    }

    /// Detection indices grouped by view, in detection order.
    pub fn by_view(&self) -> Vec<Vec<usize>> {
        let mut views = vec![Vec::new(); self.n_views];
        for (i, d) in self.detections.iter().enumerate() {
            if let Some(v) = views.get_mut(d.view) {
                v.push(i);
            }
        }
        views
    }

    /// Distinct raw labels, sorted.
    pub fn raw_labels(&self) -> Vec<String> {
        let mut labels: Vec<String> = self.detections.iter().map(|d| d.label.clone()).collect();
        labels.sort();
        labels.dedup();
        labels
    }

    /// Checks every record against the dataset-level invariants.
    pub fn validate(&self) -> Result<()> {
        for (i, d) in self.detections.iter().enumerate() {
            check_detection(self, d).map_err(|m| Error::Format(format!("detection {i}: {m}")))?;
        }
        for (label, v) in &self.embeddings {
            if v.len() != self.dim {
                return Err(Error::DimensionMismatch(format!(
                    "embedding {label:?} has dimension {}, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            check_unit(label, v)?;
        }
        for set in self.descriptions.iter().flatten() {
            for r in &set.referrals {
                if r.vec.len() != self.dim {
                    return Err(Error::DimensionMismatch(format!(
                        "referral {:?} of track {} has dimension {}, expected {}",
                        r.text,
                        set.track,
                        r.vec.len(),
                        self.dim
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_detection(ds: &SceneDataset, d: &Detection) -> std::result::Result<(), String> {
    if d.view >= ds.n_views {
        return Err(format!("view {} out of range for {} views", d.view, ds.n_views));
    }
    if !(0.0..=1.0).contains(&d.conf) {
        return Err(format!("confidence {} outside [0, 1]", d.conf));
    }
    if d.label.is_empty() {
        return Err("empty label".into());
    }
    if d.mask.dims() != (ds.h, ds.w) {
        return Err(format!(
            "mask is {}x{}, dataset is {}x{}",
            d.mask.height(),
            d.mask.width(),
            ds.h,
            ds.w
        ));
    }
    Ok(())
}

fn sibling_name(manifest: &Path, suffix: &str) -> String {
    let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    format!("{stem}.{suffix}")
}

fn resolve(manifest: &Path, rel: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(rel)
}

/// Writes the manifest at `path` and its data files next to it.
pub fn save_dataset(ds: &SceneDataset, path: &Path) -> Result<()> {
    let manifest = Manifest {
        n_views: ds.n_views,
        h: ds.h,
        w: ds.w,
        dim: ds.dim,
        detections: sibling_name(path, "detections.jsonl"),
        embeddings: sibling_name(path, "embeddings.json"),
        descriptions: ds
            .descriptions
            .as_ref()
            .map(|_| sibling_name(path, "descriptions.jsonl")),
        tracks: ds.tracks.as_ref().map(|_| sibling_name(path, "tracks.jsonl")),
    };
    write_jsonl(&resolve(path, &manifest.detections), &ds.detections)?;
    write_json(&resolve(path, &manifest.embeddings), &ds.embeddings)?;
    if let (Some(rel), Some(sets)) = (&manifest.descriptions, &ds.descriptions) {
        write_jsonl(&resolve(path, rel), sets)?;
    }
    if let (Some(rel), Some(tracks)) = (&manifest.tracks, &ds.tracks) {
        write_jsonl(&resolve(path, rel), tracks)?;
    }
    write_json(path, &manifest)
}

pub fn load_dataset(path: &Path) -> Result<SceneDataset> {
    let manifest: Manifest = read_json(path)?;
    let det_path = resolve(path, &manifest.detections);
    let detections: Vec<Detection> = read_jsonl(&det_path)?;
    let mut ds = SceneDataset::new(manifest.n_views, manifest.h, manifest.w, manifest.dim);
    for (i, d) in detections.iter().enumerate() {
        check_detection(&ds, d).map_err(|m| Error::schema(&det_path, i + 1, m))?;
    }
    ds.detections = detections;
    ds.embeddings = read_json(&resolve(path, &manifest.embeddings))?;
    if let Some(rel) = &manifest.descriptions {
        ds.descriptions = Some(read_jsonl(&resolve(path, rel))?);
    }
    if let Some(rel) = &manifest.tracks {
        ds.tracks = Some(read_jsonl(&resolve(path, rel))?);
    }
    ds.validate()?;
    Ok(ds)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::schema(path, e.line(), e.to_string()))
}

/// Writes `value` as pretty JSON followed by a newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    create_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json_compact<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string(value)?;
    text.push('\n');
    create_parent(path)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads one JSON record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::schema(path, i + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    create_parent(path)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}
