use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::consensus::ConsensusRecord;
use crate::data::{DescriptionSet, SceneDataset};
use crate::error::{Error, Result};
use crate::mask::RleMask;

use super::loss::{contrastive_loss_indexed, seg_loss, total_loss};
use super::{ToyGaussian, ToyReferringField, ViewWeights};

/// Multiplier on the contrastive weight: `start * factor^(iter / interval)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatioDecay {
    pub start: f64,
    pub factor: f64,
    pub interval_iters: usize,
}

impl Default for RatioDecay {
    fn default() -> Self {
        RatioDecay {
            start: 0.1,
            factor: 0.6,
            interval_iters: 2000,
        }
    }
}

pub fn ratio_decay(schedule: &RatioDecay, iter: usize) -> f64 {
    let steps = iter / schedule.interval_iters.max(1);
    schedule.start * schedule.factor.powi(steps as i32)
}

/// Which Gaussians define `f_g` for the contrastive term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    /// Centers inside the track's pseudo mask.
    Pseudo,
    /// Centers where the field's own rendering for the track's first positive
    /// exceeds 0.5.
    Rendered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveMode {
    /// Category plus every referral.
    Hybrid,
    /// Referrals only.
    ReferralsOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub tau: f64,
    pub epochs: usize,
    pub feature_lr: f64,
    /// Reserved; the toy field has no MLP.
    pub mlp_lr: f64,
    pub ratio_decay: RatioDecay,
    pub seed: u64,
    pub selection: Selection,
    pub positives: PositiveMode,
    /// Views withheld from training.
    pub holdout_views: Vec<usize>,
    /// Initial geometry and features.
    pub field: FieldConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            tau: 0.1,
            epochs: 5,
            feature_lr: 2.5e-3,
            mlp_lr: 1e-4,
            ratio_decay: RatioDecay::default(),
            seed: 0,
            selection: Selection::Pseudo,
            positives: PositiveMode::Hybrid,
            holdout_views: Vec::new(),
            field: FieldConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::InvalidParameter(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.feature_lr > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "feature_lr must be > 0, got {}",
                self.feature_lr
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    pub gaussians_per_track: usize,
    pub background_gaussians: usize,
    /// Gaussian spread in pixels.
    pub spread: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for FieldConfig {
    fn default() -> Self {
        FieldConfig {
            gaussians_per_track: 6,
            background_gaussians: 16,
            spread: 8.0,
            init_std: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub vec: Vec<f64>,
}

/// Everything the trainer knows about one track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSupervision {
    pub track: u64,
    pub category: Query,
    pub referrals: Vec<Query>,
    /// Pseudo mask per training view.
    pub masks: BTreeMap<usize, RleMask>,
}

impl TrackSupervision {
    pub fn positives(&self, mode: PositiveMode) -> Vec<&Query> {
        match mode {
            PositiveMode::Hybrid => std::iter::once(&self.category).chain(&self.referrals).collect(),
            PositiveMode::ReferralsOnly => self.referrals.iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub h: u32,
    pub w: u32,
    pub n_views: usize,
    pub dim: usize,
    pub tracks: Vec<TrackSupervision>,
    pub train_views: Vec<usize>,
}

impl TrainingSet {
    /// Joins consensus records with their descriptions. Pseudo masks come
    /// from the member detections outside `holdout`; tracks seen only in
    /// held-out views are dropped.
    pub fn build(
        ds: &SceneDataset,
        records: &[ConsensusRecord],
        descriptions: &[DescriptionSet],
        holdout: &[usize],
    ) -> Result<Self> {
        let held: BTreeSet<usize> = holdout.iter().copied().collect();
        let by_track: BTreeMap<u64, &DescriptionSet> = descriptions.iter().map(|d| (d.track, d)).collect();
        let mut tracks = Vec::new();
        for r in records {
            let desc = by_track
                .get(&r.track)
                .ok_or_else(|| Error::Format(format!("no descriptions for track {}", r.track)))?;
            let masks: BTreeMap<usize, RleMask> = r
                .members
                .iter()
                .filter(|(v, _)| !held.contains(v))
                .map(|&(v, det)| (v, ds.detections[det].mask.clone()))
                .collect();
            if masks.is_empty() {
                continue;
            }
            tracks.push(TrackSupervision {
                track: r.track,
                category: Query {
                    text: desc.category.clone(),
                    vec: ds.embedding(&desc.category)?.to_vec(),
                },
                referrals: desc
                    .referrals
                    .iter()
                    .map(|x| Query {
                        text: x.text.clone(),
                        vec: x.vec.clone(),
                    })
                    .collect(),
                masks,
            });
        }
        Ok(TrainingSet {
            h: ds.h,
            w: ds.w,
            n_views: ds.n_views,
            dim: ds.dim,
            tracks,
            train_views: (0..ds.n_views).filter(|v| !held.contains(v)).collect(),
        })
    }

    /// Indices of tracks with a pseudo mask in `view`.
    pub fn visible(&self, view: usize) -> Vec<usize> {
        (0..self.tracks.len())
            .filter(|&t| self.tracks[t].masks.contains_key(&view))
            .collect()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.train_views
            .iter()
            .flat_map(|&v| self.visible(v).into_iter().map(move |t| (v, t)))
            .collect()
    }
}

/// Piecewise-linear interpolation over `(view, value)` knots, held constant
/// beyond the first and last knot.
fn interpolate(knots: &[(usize, f64)], view: usize) -> f64 {
    match knots.binary_search_by_key(&view, |k| k.0) {
        Ok(i) => knots[i].1,
        Err(0) => knots[0].1,
        Err(i) if i == knots.len() => knots[i - 1].1,
        Err(i) => {
            let (v0, a) = knots[i - 1];
            let (v1, b) = knots[i];
            let f = (view - v0) as f64 / (v1 - v0) as f64;
            a + (b - a) * f
        }
    }
}

/// Farthest-point sample of `k` pixels, starting nearest `start`.
fn spread_pixels(pixels: &[(f64, f64)], start: (f64, f64), k: usize) -> Vec<(f64, f64)> {
    if pixels.is_empty() {
        return Vec::new();
    }
    let d2 = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2);
    let first = (0..pixels.len())
        .min_by(|&a, &b| d2(pixels[a], start).total_cmp(&d2(pixels[b], start)))
        .unwrap_or(0);
    let mut chosen = vec![pixels[first]];
    let mut nearest: Vec<f64> = pixels.iter().map(|&p| d2(p, pixels[first])).collect();
    while chosen.len() < k.min(pixels.len()) {
        let next = (0..pixels.len())
            .max_by(|&a, &b| nearest[a].total_cmp(&nearest[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        if nearest[next] == 0.0 {
            break;
        }
        chosen.push(pixels[next]);
        for (n, &p) in nearest.iter_mut().zip(pixels) {
            *n = n.min(d2(p, pixels[next]));
        }
    }
    chosen
}

impl ToyReferringField {
    /// Seeds Gaussians from the training masks. Each track gets points spread
    /// over its median-area mask, stored as offsets from the mask centroid in
    /// units of `sqrt(area)`; in other views they follow the interpolated
    /// centroid and scale. Background Gaussians sit on a jittered grid and do
    /// not move.
    pub fn from_training_set(set: &TrainingSet, cfg: &FieldConfig) -> Result<Self> {
        if !(cfg.spread > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "spread must be > 0, got {}",
                cfg.spread
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal =
            Normal::new(0.0, cfg.init_std.max(0.0)).map_err(|e| Error::InvalidParameter(format!("init_std: {e}")))?;
        let mut gaussians = Vec::new();
        for t in &set.tracks {
            let mut cx = Vec::new();
            let mut cy = Vec::new();
            let mut sc = Vec::new();
            for (&v, m) in &t.masks {
                if let Some((x, y)) = m.centroid() {
                    cx.push((v, x + 0.5));
                    cy.push((v, y + 0.5));
                    sc.push((v, (m.area() as f64).sqrt()));
                }
            }
            if sc.is_empty() {
                continue;
            }
            let mut by_area: Vec<(usize, f64)> = sc.clone();
            by_area.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            let ref_view = by_area[(by_area.len() - 1) / 2].0;
            let ref_mask = &t.masks[&ref_view];
            let (rcx, rcy, rsc) = (
                interpolate(&cx, ref_view),
                interpolate(&cy, ref_view),
                interpolate(&sc, ref_view),
            );
            let bm = ref_mask.decode();
            let pixels: Vec<(f64, f64)> = (0..set.h)
                .flat_map(|y| (0..set.w).map(move |x| (x, y)))
                .filter(|&(x, y)| bm.get(x, y))
                .map(|(x, y)| (f64::from(x) + 0.5, f64::from(y) + 0.5))
                .collect();
            for (px, py) in spread_pixels(&pixels, (rcx, rcy), cfg.gaussians_per_track) {
                let (ox, oy) = ((px - rcx) / rsc, (py - rcy) / rsc);
                let centers = (0..set.n_views)
                    .map(|v| {
                        let s = interpolate(&sc, v);
                        (interpolate(&cx, v) + ox * s, interpolate(&cy, v) + oy * s)
                    })
                    .collect();
                gaussians.push(ToyGaussian {
                    id: gaussians.len(),
                    track: Some(t.track),
                    spread: cfg.spread,
                    centers,
                    feature: Vec::new(),
                });
            }
        }
        let side = (cfg.background_gaussians as f64).sqrt().ceil().max(1.0) as usize;
        let (cw, ch) = (f64::from(set.w) / side as f64, f64::from(set.h) / side as f64);
        for i in 0..cfg.background_gaussians {
            let (gx, gy) = ((i % side) as f64, (i / side) as f64);
            let c = (
                (gx + rng.random_range(0.25..0.75)) * cw,
                (gy + rng.random_range(0.25..0.75)) * ch,
            );
            gaussians.push(ToyGaussian {
                id: gaussians.len(),
                track: None,
                spread: cfg.spread,
                centers: vec![c; set.n_views],
                feature: Vec::new(),
            });
        }
        for g in &mut gaussians {
            g.feature = (0..set.dim).map(|_| normal.sample(&mut rng)).collect();
        }
        Ok(ToyReferringField {
            h: set.h,
            w: set.w,
            dim: set.dim,
            gaussians,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub seg: f64,
    pub con: f64,
    pub total: f64,
    /// Effective contrastive weight, `lambda * ratio`.
    pub con_weight: f64,
    /// No Gaussian was selected, so the contrastive term was skipped.
    pub skipped_con: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iter: usize,
    pub seg: f64,
    pub con: f64,
    pub total: f64,
}

/// Loss of one `(view, track)` step and its gradient with respect to the
/// flattened Gaussian features.
///
/// The contrastive pool holds the positives of every track visible in the
/// view. The segmentation term averages the BCE of each of the track's
/// positive queries against the union of the pseudo masks of all visible
/// tracks sharing that query text.
pub fn step_loss(
    field: &ToyReferringField,
    set: &TrainingSet,
    weights: &ViewWeights,
    view: usize,
    track: usize,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<(LossParts, Vec<f64>)> {
    let dim = field.dim;
    let visible = set.visible(view);
    if !visible.contains(&track) {
        return Err(Error::InvalidParameter(format!(
            "track {} has no pseudo mask in view {view}",
            set.tracks[track].track
        )));
    }
    let lists: Vec<(usize, Vec<&Query>)> = visible
        .iter()
        .map(|&t| (t, set.tracks[t].positives(cfg.positives)))
        .collect();
    let mut pool: Vec<&[f64]> = Vec::new();
    let mut own = Vec::new();
    for (t, list) in &lists {
        for q in list {
            if *t == track {
                own.push(pool.len());
            }
            pool.push(&q.vec);
        }
    }
    let positives = set.tracks[track].positives(cfg.positives);
    if positives.is_empty() {
        return Err(Error::EmptyPositives);
    }

    let mut grad = vec![0.0; field.gaussians.len() * dim];
    let n_q = positives.len() as f64;
    let mut seg = 0.0;
    let mut g_acc = vec![0.0; field.gaussians.len()];
    for q in &positives {
        let mut target: Option<RleMask> = None;
        for (t, list) in &lists {
            if list.iter().any(|x| x.text == q.text) {
                let m = &set.tracks[*t].masks[&view];
                target = Some(match target {
                    None => m.clone(),
                    Some(acc) => acc.union(m)?,
                });
            }
        }
        let target = target.expect("the track's own mask matches its own query");
        let grid = field.render_with(weights, &q.vec)?;
        let (l, dlogits) = seg_loss(&grid, &target)?;
        seg += l / n_q;
        g_acc.iter_mut().for_each(|x| *x = 0.0);
        for &(p, g, w) in &weights.entries {
            g_acc[g] += dlogits[p] * w;
        }
        for (g, &a) in g_acc.iter().enumerate() {
            if a != 0.0 {
                for (d, x) in grad[g * dim..(g + 1) * dim].iter_mut().zip(&q.vec) {
                    *d += a * x / n_q;
                }
            }
        }
    }

    let con_weight = cfg.lambda * ratio_decay(&cfg.ratio_decay, iter);
    let selected = match cfg.selection {
        Selection::Pseudo => field.gaussians_in(view, &set.tracks[track].masks[&view].decode())?,
        Selection::Rendered => {
            let probe = field.render_with(weights, &positives[0].vec)?.binarize(0.5);
            field.gaussians_in(view, &probe.decode())?
        }
    };
    let mut parts = LossParts {
        seg,
        con_weight,
        ..LossParts::default()
    };
    if selected.is_empty() {
        parts.skipped_con = true;
    } else {
        let f_g = field.mean_feature(&selected)?;
        let (con, g_fg) = contrastive_loss_indexed(&f_g, &pool, &own, cfg.tau)?;
        parts.con = con;
        let share = con_weight / selected.len() as f64;
        for &i in &selected {
            for (d, x) in grad[i * dim..(i + 1) * dim].iter_mut().zip(&g_fg) {
                *d += share * x;
            }
        }
    }
    parts.total = total_loss(parts.seg, parts.con, con_weight);
    Ok((parts, grad))
}

/// Adam with the usual bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, n: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

/// Optimizes the field's features over shuffled `(view, track)` steps.
/// Geometry stays fixed. Returns the trained field and one loss point per
/// step.
pub fn train(
    field: &ToyReferringField,
    set: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<(ToyReferringField, Vec<LossPoint>)> {
    cfg.validate()?;
    if field.dim != set.dim {
        return Err(Error::DimensionMismatch(format!(
            "field has dimension {}, training set has {}",
            field.dim, set.dim
        )));
    }
    if let Some(t) = set.tracks.iter().find(|t| t.positives(cfg.positives).is_empty()) {
        tracing::error!(track = t.track, "track has no positives");
        return Err(Error::EmptyPositives);
    }
    let mut field = field.clone();
    let mut weights: BTreeMap<usize, ViewWeights> = BTreeMap::new();
    for &v in &set.train_views {
        weights.insert(v, field.view_weights(v)?);
    }
    let mut params = field.features();
    let mut adam = Adam::new(cfg.feature_lr, params.len());
    let pairs = set.pairs();
    let mut curve = Vec::with_capacity(cfg.epochs * pairs.len());
    let mut skipped = 0usize;
    let mut iter = 0;
    for epoch in 0..cfg.epochs {
        let mut order = pairs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        for (view, track) in order {
            let (parts, grad) = step_loss(&field, set, &weights[&view], view, track, cfg, iter)?;
            if !parts.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite loss or gradient at iteration {iter}"
                )));
            }
            skipped += usize::from(parts.skipped_con);
            adam.step(&mut params, &grad);
            field.set_features(&params);
            curve.push(LossPoint {
                iter,
                seg: parts.seg,
                con: parts.con,
                total: parts.total,
            });
            iter += 1;
        }
    }
    if skipped > 0 {
        tracing::info!(skipped, "steps without a contrastive term (empty selection)");
    }
    Ok((field, curve))
}

/// Trains with referral texts as the only positives.
pub fn long_only_baseline(
    field: &ToyReferringField,
    set: &TrainingSet,
    cfg: &TrainConfig,
) -> Result<(ToyReferringField, Vec<LossPoint>)> {
    let cfg = TrainConfig {
        positives: PositiveMode::ReferralsOnly,
        ..cfg.clone()
    };
    train(field, set, &cfg)
}
