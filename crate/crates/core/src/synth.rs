//! Seeded synthetic scenes with ground truth, and the label/mask corruption
//! that imitates per-view detector noise.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{dot, normalize, Detection, SceneDataset};
use crate::error::{Error, Result};
use crate::mask::{Bitmap, RleMask};

/// A canonical word and its synonyms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymGroup {
    pub canonical: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
}

impl SynonymGroup {
    pub fn new(canonical: &str, synonyms: &[&str]) -> Self {
        SynonymGroup {
            canonical: canonical.to_string(),
            synonyms: synonyms.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn words(&self) -> impl Iterator<Item = &String> {
        std::iter::once(&self.canonical).chain(&self.synonyms)
    }
}

pub fn default_vocabulary() -> Vec<SynonymGroup> {
    vec![
        SynonymGroup::new("cup", &["mug", "teacup"]),
        SynonymGroup::new("plate", &["platter", "dinner plate"]),
        SynonymGroup::new("bowl", &["basin", "serving bowl"]),
        SynonymGroup::new("ramen", &["ramen bowl", "noodle soup"]),
        SynonymGroup::new("pot", &["cooking pot", "saucepan"]),
        SynonymGroup::new("kettle", &["teakettle", "tea kettle"]),
        SynonymGroup::new("coffee maker", &["coffee machine"]),
        SynonymGroup::new("spoon", &["tablespoon", "soup spoon"]),
    ]
}

const ATTRIBUTES: [&str; 8] = ["red", "blue", "green", "yellow", "white", "black", "orange", "purple"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub synonym_rate: f64,
    pub wrong_label_rate: f64,
    pub dropout_rate: f64,
    /// Maximum dilation/erosion radius in pixels.
    pub mask_jitter: u32,
    pub strip_tracks: bool,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            synonym_rate: 0.0,
            wrong_label_rate: 0.0,
            dropout_rate: 0.0,
            mask_jitter: 0,
            strip_tracks: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_views: usize,
    pub h: u32,
    pub w: u32,
    pub n_objects: usize,
    pub vocabulary: Vec<SynonymGroup>,
    pub dim: usize,
    /// Size of the in-group perturbation relative to the group direction.
    pub group_spread: f64,
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_views: 10,
            h: 64,
            w: 64,
            n_objects: 3,
            vocabulary: default_vocabulary(),
            dim: 32,
            group_spread: 0.2,
            noise: NoiseConfig::default(),
            seed: 0,
        }
    }
}

/// Minimum cosine between words of one group.
pub const IN_GROUP_MIN_COS: f64 = 0.9;
/// Maximum cosine between words of different groups.
pub const CROSS_GROUP_MAX_COS: f64 = 0.5;

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        let n = &self.noise;
        for (name, r) in [
            ("synonym_rate", n.synonym_rate),
            ("wrong_label_rate", n.wrong_label_rate),
            ("dropout_rate", n.dropout_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} {r} outside [0, 1]"));
            }
        }
        if n.synonym_rate + n.wrong_label_rate > 1.0 {
            return bad("synonym_rate + wrong_label_rate exceeds 1".into());
        }
        if self.h < 8 || self.w < 8 {
            return bad(format!("image {}x{} is smaller than 8x8", self.h, self.w));
        }
        if self.vocabulary.is_empty() {
            return bad("vocabulary is empty".into());
        }
        if self.dim <= self.vocabulary.len() {
            return bad(format!(
                "dimension {} must exceed the number of groups {}",
                self.dim,
                self.vocabulary.len()
            ));
        }
        let mut words: Vec<&String> = self.vocabulary.iter().flat_map(SynonymGroup::words).collect();
        words.sort();
        if let Some(w) = words.windows(2).find(|w| w[0] == w[1]) {
            return bad(format!("word {:?} appears twice in the vocabulary", w[0]));
        }
        if self.n_objects > 0 && self.n_views == 0 {
            return bad("objects never appear: scene has no views".into());
        }
        Ok(())
    }
}

/// Word embeddings with a shared direction per group plus a small
/// perturbation orthogonal to every group direction.
pub fn vocabulary_embeddings(
    groups: &[SynonymGroup],
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<BTreeMap<String, Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_E3B0);
    let gauss = |rng: &mut ChaCha8Rng| -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(rng)).collect() };
    let mut bases: Vec<Vec<f64>> = Vec::new();
    for _ in groups {
        let mut v = gauss(&mut rng);
        for b in &bases {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        bases.push(normalize(v));
    }
    let mut out = BTreeMap::new();
    for (g, base) in groups.iter().zip(&bases) {
        for word in g.words() {
            let mut n = gauss(&mut rng);
            for b in &bases {
                let p = dot(&n, b);
                n.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
            let n = normalize(n);
            let v: Vec<f64> = base.iter().zip(&n).map(|(b, e)| b + spread * e).collect();
            out.insert(word.clone(), normalize(v));
        }
    }
    for (gi, g) in groups.iter().enumerate() {
        for a in g.words() {
            for (hi, h) in groups.iter().enumerate() {
                for b in h.words().filter(|b| *b != a) {
                    let c = dot(&out[a], &out[b]);
                    let ok = if gi == hi {
                        c >= IN_GROUP_MIN_COS
                    } else {
                        c <= CROSS_GROUP_MAX_COS
                    };
                    if !ok {
                        return Err(Error::InvalidParameter(format!(
                            "cosine {c:.3} between {a:?} and {b:?} violates the vocabulary structure; lower group_spread"
                        )));
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub id: u64,
    /// Canonical word of the object's group.
    pub identity: String,
    pub group: usize,
    pub attribute: String,
    /// True mask per view; `None` where the object is not visible.
    pub masks: Vec<Option<RleMask>>,
}

impl GtObject {
    pub fn visible(&self, view: usize) -> bool {
        self.masks.get(view).is_some_and(Option::is_some)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub n_views: usize,
    pub h: u32,
    pub w: u32,
    pub groups: Vec<SynonymGroup>,
    pub objects: Vec<GtObject>,
    /// Object id of every detection, parallel to the dataset's detections.
    pub detection_object: Vec<u64>,
}

impl GroundTruth {
    pub fn group_of(&self, word: &str) -> Option<usize> {
        self.groups.iter().position(|g| g.words().any(|w| w == word))
    }

    pub fn object(&self, id: u64) -> Option<&GtObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    /// Attribute word per object id, the track ids of an uncorrupted scene.
    pub fn attributes(&self) -> BTreeMap<u64, String> {
        self.objects.iter().map(|o| (o.id, o.attribute.clone())).collect()
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Ellipse,
    Rect,
}

fn render(h: u32, w: u32, shape: Shape, cx: f64, cy: f64, rx: f64, ry: f64) -> RleMask {
    let mut bm = Bitmap::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
            let inside = match shape {
                Shape::Ellipse => dx * dx + dy * dy <= 1.0,
                Shape::Rect => dx.abs() <= 1.0 && dy.abs() <= 1.0,
            };
            if inside {
                bm.set(x, y, true);
            }
        }
    }
    bm.encode()
}

/// Renders a clean scene: one detection per visible (object, view), labeled
/// with the object's canonical word, confidence 1, and track id = object id.
pub fn generate_scene(cfg: &SynthConfig) -> Result<(SceneDataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ds = SceneDataset::new(cfg.n_views, cfg.h, cfg.w, cfg.dim);
    ds.embeddings = vocabulary_embeddings(&cfg.vocabulary, cfg.dim, cfg.group_spread, cfg.seed)?;

    let mut group_order: Vec<usize> = (0..cfg.vocabulary.len()).collect();
    group_order.shuffle(&mut rng);
    let mut attrs: Vec<&str> = ATTRIBUTES.to_vec();
    attrs.shuffle(&mut rng);

    let (wf, hf) = (f64::from(cfg.w), f64::from(cfg.h));
    let side = wf.min(hf);
    let last = (cfg.n_views.max(2) - 1) as f64;
    let mut objects = Vec::with_capacity(cfg.n_objects);
    for id in 0..cfg.n_objects {
        let group = group_order[id % group_order.len()];
        let shape = if rng.random_bool(0.5) {
            Shape::Ellipse
        } else {
            Shape::Rect
        };
        let rx = rng.random_range(0.08..0.14) * side;
        let ry = rng.random_range(0.08..0.14) * side;
        let margin = 0.2 * side;
        let start = (
            rng.random_range(margin..wf - margin),
            rng.random_range(margin..hf - margin),
        );
        let drift = 0.25 * side;
        let end = (
            (start.0 + rng.random_range(-drift..drift)).clamp(margin, wf - margin),
            (start.1 + rng.random_range(-drift..drift)).clamp(margin, hf - margin),
        );
        let (s0, s1) = (rng.random_range(0.7..1.0), rng.random_range(1.0..1.5));
        let masks: Vec<Option<RleMask>> = (0..cfg.n_views)
            .map(|v| {
                let f = v as f64 / last;
                let s = s0 + (s1 - s0) * f;
                let cx = start.0 + (end.0 - start.0) * f;
                let cy = start.1 + (end.1 - start.1) * f;
                let m = render(cfg.h, cfg.w, shape, cx, cy, rx * s, ry * s);
                (!m.is_empty()).then_some(m)
            })
            .collect();
        if masks.iter().all(Option::is_none) {
            return Err(Error::InvalidParameter(format!("object {id} is never visible")));
        }
        objects.push(GtObject {
            id: id as u64,
            identity: cfg.vocabulary[group].canonical.clone(),
            group,
            attribute: attrs[id % attrs.len()].to_string(),
            masks,
        });
    }

    let mut detection_object = Vec::new();
    for v in 0..cfg.n_views {
        for o in &objects {
            if let Some(m) = &o.masks[v] {
                ds.detections
                    .push(Detection::new(v, o.identity.clone(), 1.0, m.clone()).with_track(o.id));
                detection_object.push(o.id);
            }
        }
    }
    let gt = GroundTruth {
        n_views: cfg.n_views,
        h: cfg.h,
        w: cfg.w,
        groups: cfg.vocabulary.clone(),
        objects,
        detection_object,
    };
    Ok((ds, gt))
}

/// Applies per-detection noise: dropout, label substitution (synonym or
/// another group's word), mask dilation/erosion, and optional track-id
/// stripping. The ground truth's detection-object map follows the surviving
/// detections.
pub fn corrupt(
    ds: &SceneDataset,
    gt: &GroundTruth,
    noise: &NoiseConfig,
    seed: u64,
) -> Result<(SceneDataset, GroundTruth)> {
    let cfg_check = SynthConfig {
        noise: *noise,
        vocabulary: gt.groups.clone(),
        dim: ds.dim.max(gt.groups.len() + 1),
        ..SynthConfig::default()
    };
    cfg_check.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC0_FFEE);
    let mut out = ds.clone();
    out.detections.clear();
    let mut out_gt = gt.clone();
    out_gt.detection_object.clear();

    for (det, &obj) in ds.detections.iter().zip(&gt.detection_object) {
        if rng.random::<f64>() < noise.dropout_rate {
            continue;
        }
        let mut d = det.clone();
        let group = gt
            .object(obj)
            .map(|o| o.group)
            .ok_or_else(|| Error::Format(format!("unknown ground-truth object {obj}")))?;
        let u: f64 = rng.random();
        if u < noise.wrong_label_rate && gt.groups.len() > 1 {
            let mut other = rng.random_range(0..gt.groups.len() - 1);
            if other >= group {
                other += 1;
            }
            let words: Vec<&String> = gt.groups[other].words().collect();
            d.label = words[rng.random_range(0..words.len())].clone();
        } else if u < noise.wrong_label_rate + noise.synonym_rate {
            let syn = &gt.groups[group].synonyms;
            if !syn.is_empty() {
                d.label = syn[rng.random_range(0..syn.len())].clone();
            }
        }
        if noise.mask_jitter > 0 {
            let j = noise.mask_jitter as i32;
            let r = rng.random_range(-j..=j);
            if r != 0 {
                let m = d.mask.decode().morph(r).encode();
                if !m.is_empty() {
                    d.mask = m;
                }
            }
        }
        if noise.strip_tracks {
            d.track = None;
        }
        out.detections.push(d);
        out_gt.detection_object.push(obj);
    }
    Ok((out, out_gt))
}

/// Generates and corrupts in one call, seeding both from the config.
pub fn generate_noisy(cfg: &SynthConfig) -> Result<(SceneDataset, GroundTruth)> {
    let (ds, gt) = generate_scene(cfg)?;
    corrupt(&ds, &gt, &cfg.noise, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n_objects: usize, n_views: usize) -> SynthConfig {
        SynthConfig {
            n_objects,
            n_views,
            seed: 42,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn single_object_clean_scene() {
        let (ds, gt) = generate_scene(&cfg(1, 3)).unwrap();
        assert_eq!(ds.detections.len(), 3);
        assert!(ds
            .detections
            .iter()
            .all(|d| d.label == gt.objects[0].identity && d.track == Some(0) && d.conf == 1.0));
        ds.validate().unwrap();
    }

    #[test]
    fn same_seed_same_scene() {
        let a = generate_noisy(&SynthConfig {
            noise: NoiseConfig {
                synonym_rate: 0.3,
                dropout_rate: 0.2,
                mask_jitter: 1,
                ..NoiseConfig::default()
            },
            ..cfg(4, 8)
        })
        .unwrap();
        let b = generate_noisy(&SynthConfig {
            noise: NoiseConfig {
                synonym_rate: 0.3,
                dropout_rate: 0.2,
                mask_jitter: 1,
                ..NoiseConfig::default()
            },
            ..cfg(4, 8)
        })
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a.1).unwrap(),
            serde_json::to_string(&b.1).unwrap()
        );
    }

    #[test]
    fn five_objects_over_twenty_views() {
        let (ds, gt) = generate_scene(&cfg(5, 20)).unwrap();
        assert_eq!(gt.objects.len(), 5);
        let ids: std::collections::BTreeSet<_> = gt.objects.iter().map(|o| &o.identity).collect();
        assert_eq!(ids.len(), 5);
        assert!(ds.detections.len() <= 100);
    }

    #[test]
    fn vocabulary_structure_holds() {
        let groups = default_vocabulary();
        let e = vocabulary_embeddings(&groups, 32, 0.2, 7).unwrap();
        for (gi, g) in groups.iter().enumerate() {
            for a in g.words() {
                assert!((crate::data::l2_norm(&e[a]) - 1.0).abs() < 1e-12);
                for (hi, h) in groups.iter().enumerate() {
                    for b in h.words().filter(|b| *b != a) {
                        let c = dot(&e[a], &e[b]);
                        if gi == hi {
                            assert!(c >= IN_GROUP_MIN_COS, "{a} {b} {c}");
                        } else {
                            assert!(c <= CROSS_GROUP_MAX_COS, "{a} {b} {c}");
                        }
                    }
                }
            }
        }
        assert!(vocabulary_embeddings(&groups, 32, 0.6, 7).is_err());
    }

    #[test]
    fn zero_noise_is_identity() {
        let (ds, gt) = generate_scene(&cfg(3, 6)).unwrap();
        let (out, out_gt) = corrupt(&ds, &gt, &NoiseConfig::default(), 1).unwrap();
        assert_eq!(out, ds);
        assert_eq!(out_gt, gt);
    }

    #[test]
    fn full_dropout_removes_everything() {
        let (ds, gt) = generate_scene(&cfg(3, 6)).unwrap();
        let noise = NoiseConfig {
            dropout_rate: 1.0,
            ..NoiseConfig::default()
        };
        let (out, out_gt) = corrupt(&ds, &gt, &noise, 1).unwrap();
        assert!(out.detections.is_empty());
        assert!(out_gt.detection_object.is_empty());
    }

    #[test]
    fn synonym_rate_concentrates() {
        let (ds, gt) = generate_scene(&SynthConfig {
            h: 16,
            w: 16,
            ..cfg(8, 1250)
        })
        .unwrap();
        assert_eq!(ds.detections.len(), 10000);
        let noise = NoiseConfig {
            synonym_rate: 0.3,
            ..NoiseConfig::default()
        };
        let (out, _) = corrupt(&ds, &gt, &noise, 3).unwrap();
        let replaced = out
            .detections
            .iter()
            .zip(&ds.detections)
            .filter(|(a, b)| a.label != b.label)
            .count();
        let frac = replaced as f64 / 10000.0;
        assert!((frac - 0.3).abs() <= 0.02, "{frac}");
    }

    #[test]
    fn corruption_keeps_views_and_objects() {
        let (ds, gt) = generate_scene(&cfg(4, 10)).unwrap();
        let noise = NoiseConfig {
            synonym_rate: 0.4,
            wrong_label_rate: 0.3,
            dropout_rate: 0.3,
            mask_jitter: 2,
            strip_tracks: true,
        };
        let (out, out_gt) = corrupt(&ds, &gt, &noise, 5).unwrap();
        assert_eq!(out.detections.len(), out_gt.detection_object.len());
        for (d, &obj) in out.detections.iter().zip(&out_gt.detection_object) {
            assert!(d.track.is_none());
            assert!(gt.object(obj).unwrap().visible(d.view));
        }
        out.validate().unwrap();
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate_scene(&SynthConfig {
            n_views: 0,
            ..cfg(1, 0)
        })
        .is_err());
        let noise = NoiseConfig {
            synonym_rate: 1.2,
            ..NoiseConfig::default()
        };
        assert!(generate_scene(&SynthConfig { noise, ..cfg(1, 2) }).is_err());
        assert!(generate_scene(&SynthConfig { dim: 4, ..cfg(1, 2) }).is_err());
    }
}
