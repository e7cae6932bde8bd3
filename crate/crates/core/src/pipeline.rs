//! File-based batch stages over a run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! config.json                 resolved configuration
//! scene/scene.json            input dataset manifest (+ sibling data files)
//! scene/ground_truth.json     synthetic scenes only
//! tracks.jsonl                trajectories
//! clustering.json             synonym clusters
//! consensus.jsonl             one record per trajectory
//! resolved/scene.json         dataset with propagated labels
//! keyframes.jsonl
//! descriptions.jsonl
//! model.json                  trained toy field
//! loss.csv                    iter,l_seg,l_con,l
//! report.json
//! run.json                    run manifest; the only file with timestamps
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::association::{associate_greedy, import_tracks, AssocParams};
use crate::consensus::{propagate, run_consensus, ConsensusRecord, SynonymClustering};
use crate::data::{load_dataset, read_json, read_jsonl, save_dataset, write_json, write_json_compact, write_jsonl};
use crate::data::{DescriptionSet, SceneDataset, Trajectory};
use crate::error::{Error, Result};
use crate::eval::{config_hash, consensus_accuracy, emit_report, evaluate_field, track_objects, write_sweep_csv};
use crate::eval::{Report, SweepRow};
use crate::field::{train, LossPoint, ToyReferringField, TrainConfig, TrainingSet};
use crate::keyframe::{attach_descriptions, load_external, select_all, DescriptionSource, KeyframeChoice, Strategy};
use crate::synth::{generate_noisy, GroundTruth, SynthConfig};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "TRACKLABEL_OUT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AssocMode {
    /// Import track ids when every detection has one, otherwise greedy.
    #[default]
    Auto,
    Import,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssocConfig {
    pub mode: AssocMode,
    pub iou_weight: Option<f64>,
    pub match_threshold: Option<f64>,
    pub max_gap: Option<usize>,
}

impl AssocConfig {
    pub fn params(&self) -> AssocParams {
        let d = AssocParams::default();
        AssocParams {
            iou_weight: self.iou_weight.unwrap_or(d.iou_weight),
            match_threshold: self.match_threshold.unwrap_or(d.match_threshold),
            max_gap: self.max_gap.unwrap_or(d.max_gap),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusConfig {
    pub tau_sem: f64,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        ConsensusConfig { tau_sem: 0.85 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyframeConfig {
    pub strategy: Strategy,
    pub sigma: f64,
    pub seed: u64,
    /// External descriptions file; the template synthesizer is used when absent.
    pub descriptions: Option<PathBuf>,
}

impl Default for KeyframeConfig {
    fn default() -> Self {
        KeyframeConfig {
            strategy: Strategy::Weighting,
            sigma: crate::keyframe::DEFAULT_SIGMA,
            seed: 0,
            descriptions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Views scored for mIoU; defaults to the held-out views, or all views
    /// when nothing is held out.
    pub views: Option<Vec<usize>>,
    pub tau_sweep: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            views: None,
            tau_sweep: vec![0.70, 0.75, 0.80, 0.85, 0.90],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub synth: SynthConfig,
    pub assoc: AssocConfig,
    pub consensus: ConsensusConfig,
    pub keyframe: KeyframeConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Uses `seed` for every seeded stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.synth.seed = seed;
        self.keyframe.seed = seed;
        self.train.seed = seed;
        self.train.field.seed = seed;
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        [
            ("synth", self.synth.seed),
            ("keyframe", self.keyframe.seed),
            ("train", self.train.seed),
            ("field", self.train.field.seed),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn eval_views(&self, n_views: usize) -> Vec<usize> {
        match &self.eval.views {
            Some(v) => v.clone(),
            None if !self.train.holdout_views.is_empty() => self.train.holdout_views.clone(),
            None => (0..n_views).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStatus {
    pub stage: String,
    pub ran: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub stages: Vec<StageStatus>,
}

pub const STAGES: [&str; 6] = ["synth", "associate", "consensus", "keyframe", "train", "eval"];

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub out: PathBuf,
    pub force: bool,
    /// External dataset used instead of `scene/scene.json`.
    pub input: Option<PathBuf>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_loss_csv(path: &Path, curve: &[LossPoint]) -> Result<()> {
    crate::data::create_parent(path)?;
    let csv_err = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["iter", "l_seg", "l_con", "l"]).map_err(csv_err)?;
    for p in curve {
        w.write_record([
            p.iter.to_string(),
            p.seg.to_string(),
            p.con.to_string(),
            p.total.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, out: impl Into<PathBuf>) -> Self {
        Pipeline {
            cfg,
            out: out.into(),
            force: false,
            input: None,
        }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    pub fn scene_path(&self) -> PathBuf {
        self.input.clone().unwrap_or_else(|| self.path("scene/scene.json"))
    }

    fn run_stage(&self, stage: &'static str, outputs: &[&str], f: impl FnOnce() -> Result<()>) -> Result<bool> {
        if !self.force && outputs.iter().all(|o| self.path(o).exists()) {
            tracing::info!(stage, "outputs present, skipping");
            return Ok(false);
        }
        tracing::info!(stage, "running");
        f().map_err(|e| Error::Stage {
            stage,
            source: Box::new(e),
        })?;
        Ok(true)
    }

    fn load_scene(&self) -> Result<SceneDataset> {
        load_dataset(&self.scene_path())
    }

    /// Ground truth, present for synthetic scenes generated into this run.
    pub fn ground_truth(&self) -> Result<Option<GroundTruth>> {
        let p = self.path("scene/ground_truth.json");
        if self.input.is_some() || !p.exists() {
            return Ok(None);
        }
        read_json(&p).map(Some)
    }

    pub fn synth(&self) -> Result<bool> {
        if self.input.is_some() {
            return Ok(false);
        }
        self.run_stage("synth", &["scene/scene.json", "scene/ground_truth.json"], || {
            let (ds, gt) = generate_noisy(&self.cfg.synth)?;
            save_dataset(&ds, &self.path("scene/scene.json"))?;
            write_json_compact(&self.path("scene/ground_truth.json"), &gt)
        })
    }

    pub fn associate(&self) -> Result<bool> {
        self.run_stage("associate", &["tracks.jsonl"], || {
            let ds = self.load_scene()?;
            let tracks = self.tracks_for(&ds)?;
            write_jsonl(&self.path("tracks.jsonl"), &tracks)
        })
    }

    fn tracks_for(&self, ds: &SceneDataset) -> Result<Vec<Trajectory>> {
        let all_tagged = ds.detections.iter().all(|d| d.track.is_some());
        match self.cfg.assoc.mode {
            AssocMode::Import => import_tracks(ds),
            AssocMode::Auto if all_tagged => import_tracks(ds),
            _ => {
                let params = self.cfg.assoc.params();
                params.validate()?;
                associate_greedy(ds, &params)
            }
        }
    }

    pub fn consensus(&self) -> Result<bool> {
        self.run_stage(
            "consensus",
            &["clustering.json", "consensus.jsonl", "resolved/scene.json"],
            || {
                let ds = self.load_scene()?;
                let tracks: Vec<Trajectory> = read_jsonl(&self.path("tracks.jsonl"))?;
                let (clustering, records) = run_consensus(&ds, &tracks, self.cfg.consensus.tau_sem)?;
                let mut resolved = propagate(&ds, &records);
                resolved.tracks = Some(tracks);
                write_json(&self.path("clustering.json"), &clustering)?;
                write_jsonl(&self.path("consensus.jsonl"), &records)?;
                save_dataset(&resolved, &self.path("resolved/scene.json"))
            },
        )
    }

    fn records(&self) -> Result<Vec<ConsensusRecord>> {
        read_jsonl(&self.path("consensus.jsonl"))
    }

    pub fn keyframe(&self) -> Result<bool> {
        self.run_stage("keyframe", &["keyframes.jsonl", "descriptions.jsonl"], || {
            let ds = load_dataset(&self.path("resolved/scene.json"))?;
            let records = self.records()?;
            let k = &self.cfg.keyframe;
            let choices: Vec<KeyframeChoice> = select_all(&ds, &records, k.strategy, k.sigma, k.seed)?;
            let external;
            let attributes: BTreeMap<u64, String>;
            let source = match &k.descriptions {
                Some(p) => {
                    external = load_external(p)?;
                    DescriptionSource::External(&external)
                }
                None => {
                    attributes = match self.ground_truth()? {
                        Some(gt) => {
                            let attrs = gt.attributes();
                            track_objects(&records, &gt)
                                .into_iter()
                                .filter_map(|(t, o)| attrs.get(&o).map(|a| (t, a.clone())))
                                .collect()
                        }
                        None => BTreeMap::new(),
                    };
                    DescriptionSource::Template(&attributes)
                }
            };
            let sets = choices
                .iter()
                .map(|c| attach_descriptions(&ds, &records, c, &source))
                .collect::<Result<Vec<_>>>()?;
            write_jsonl(&self.path("keyframes.jsonl"), &choices)?;
            write_jsonl(&self.path("descriptions.jsonl"), &sets)
        })
    }

    fn training_inputs(&self) -> Result<(SceneDataset, Vec<ConsensusRecord>, Vec<DescriptionSet>)> {
        Ok((
            load_dataset(&self.path("resolved/scene.json"))?,
            self.records()?,
            read_jsonl(&self.path("descriptions.jsonl"))?,
        ))
    }

    pub fn train(&self) -> Result<bool> {
        self.run_stage("train", &["model.json", "loss.csv"], || {
            let (ds, records, sets) = self.training_inputs()?;
            let set = TrainingSet::build(&ds, &records, &sets, &self.cfg.train.holdout_views)?;
            let init = ToyReferringField::from_training_set(&set, &self.cfg.train.field)?;
            let (model, curve) = train(&init, &set, &self.cfg.train)?;
            write_json_compact(&self.path("model.json"), &model)?;
            write_loss_csv(&self.path("loss.csv"), &curve)
        })
    }

    pub fn eval(&self) -> Result<bool> {
        self.run_stage("eval", &["report.json"], || {
            let (ds, records, sets) = self.training_inputs()?;
            let clustering: SynonymClustering = read_json(&self.path("clustering.json"))?;
            let mut metrics = BTreeMap::new();
            metrics.insert("clusters".to_string(), clustering.cluster_count() as f64);
            metrics.insert("trajectories".to_string(), records.len() as f64);
            if let Some(gt) = self.ground_truth()? {
                let acc = consensus_accuracy(&ds, &clustering, &gt)?;
                metrics.insert("per_view_acc".to_string(), acc.per_view_acc);
                metrics.insert("tscm_acc".to_string(), acc.tscm_acc);
                let model_path = self.path("model.json");
                if model_path.exists() {
                    let model: ToyReferringField = read_json(&model_path)?;
                    let views = self.cfg.eval_views(ds.n_views);
                    let scores = evaluate_field(&model, &ds, &sets, &records, &gt, &views)?;
                    metrics.insert("short_miou".to_string(), scores.short.overall);
                    metrics.insert("long_miou".to_string(), scores.long.overall);
                }
            }
            let report = Report {
                config_hash: config_hash(&self.cfg)?,
                seeds: self.cfg.seeds(),
                metrics,
            };
            emit_report(&report, &self.path("report.json"))
        })
    }

    /// Runs every stage and writes the run manifest.
    pub fn run_all(&self) -> Result<RunManifest> {
        let started = unix_now();
        write_json(&self.path("config.json"), &self.cfg)?;
        let mut stages = Vec::new();
        for (name, ran) in [
            ("synth", self.synth()?),
            ("associate", self.associate()?),
            ("consensus", self.consensus()?),
            ("keyframe", self.keyframe()?),
            ("train", self.train()?),
            ("eval", self.eval()?),
        ] {
            stages.push(StageStatus {
                stage: name.to_string(),
                ran,
            });
        }
        let manifest = RunManifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash(&self.cfg)?,
            seeds: self.cfg.seeds(),
            started_unix: started,
            finished_unix: unix_now(),
            stages,
        };
        write_json(&self.path("run.json"), &manifest)?;
        Ok(manifest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    TauSem,
    Strategy,
}

/// Clustering-threshold sweep over the associated dataset of a run: cluster
/// count, plus label accuracies when ground truth is present.
pub fn sweep_tau(p: &Pipeline, taus: &[f64]) -> Result<Vec<SweepRow>> {
    let ds = p.load_scene()?;
    let tracks: Vec<Trajectory> = read_jsonl(&p.path("tracks.jsonl"))?;
    let gt = p.ground_truth()?;
    taus.iter()
        .map(|&tau| {
            let (clustering, records) = run_consensus(&ds, &tracks, tau)?;
            let mut metrics = BTreeMap::new();
            metrics.insert("clusters".to_string(), clustering.cluster_count() as f64);
            if let Some(gt) = &gt {
                let acc = consensus_accuracy(&propagate(&ds, &records), &clustering, gt)?;
                metrics.insert("per_view_acc".to_string(), acc.per_view_acc);
                metrics.insert("tscm_acc".to_string(), acc.tscm_acc);
            }
            Ok(SweepRow {
                value: tau.to_string(),
                metrics,
            })
        })
        .collect()
}

/// Keyframe-strategy sweep: each strategy re-runs keyframe, train and eval in
/// a subdirectory `strategy-<name>` of the run and reports its metrics.
pub fn sweep_strategy(p: &Pipeline, strategies: &[Strategy]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &s in strategies {
        let dir = p.path(&format!("strategy-{s}"));
        for f in ["clustering.json", "consensus.jsonl", "tracks.jsonl"] {
            crate::data::create_parent(&dir.join(f))?;
            std::fs::copy(p.path(f), dir.join(f)).map_err(|e| Error::io(p.path(f), e))?;
        }
        let resolved = load_dataset(&p.path("resolved/scene.json"))?;
        save_dataset(&resolved, &dir.join("resolved/scene.json"))?;
        if let Some(gt) = p.ground_truth()? {
            write_json_compact(&dir.join("scene/ground_truth.json"), &gt)?;
        }
        let mut cfg = p.cfg.clone();
        cfg.keyframe.strategy = s;
        let sub = Pipeline {
            cfg,
            out: dir,
            force: p.force,
            input: None,
        };
        sub.keyframe()?;
        sub.train()?;
        sub.eval()?;
        let report = crate::eval::load_report(&sub.path("report.json"))?;
        rows.push(SweepRow {
            value: s.to_string(),
            metrics: report.metrics,
        });
    }
    Ok(rows)
}

pub fn write_sweep(p: &Pipeline, param: SweepParam, rows: &[SweepRow]) -> Result<PathBuf> {
    let (name, file) = match param {
        SweepParam::TauSem => ("tau_sem", "sweep_tau_sem.csv"),
        SweepParam::Strategy => ("strategy", "sweep_strategy.csv"),
    };
    let path = p.path(file);
    write_sweep_csv(&path, name, rows)?;
    Ok(path)
}
