//! Keyframe selection and description attachment.
//!
//! Each trajectory picks the member view whose mask is large but close in
//! scale to the trajectory's median, scored as
//! `A * exp(-(sqrt(A) - sqrt(A_med))^2 / (2 sigma^2))`. Descriptions are then
//! taken for that view, either from an external file or from a template.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::consensus::ConsensusRecord;
use crate::data::{read_jsonl, DescriptionSet, Referral, SceneDataset};
use crate::error::{Error, Result};
use crate::text;

pub const DEFAULT_SIGMA: f64 = 100.0;

pub fn median_area(areas: &[u64]) -> Result<f64> {
    if areas.is_empty() {
        return Err(Error::InvalidParameter("median of an empty list".into()));
    }
    let mut sorted = areas.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    Ok(if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    })
}

pub fn visibility_score(area: f64, median: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    if !(area >= 0.0 && median >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "areas must be nonnegative, got {area} and {median}"
        )));
    }
    let dev = area.sqrt() - median.sqrt();
    Ok(area * (-(dev * dev) / (2.0 * sigma * sigma)).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Weighting,
    Maximum,
    Minimum,
    Random,
    Medium,
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "weighting" => Strategy::Weighting,
            "maximum" => Strategy::Maximum,
            "minimum" => Strategy::Minimum,
            "random" => Strategy::Random,
            "medium" => Strategy::Medium,
            other => return Err(Error::InvalidParameter(format!("unknown strategy {other:?}"))),
        })
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Strategy::Weighting => "weighting",
            Strategy::Maximum => "maximum",
            Strategy::Minimum => "minimum",
            Strategy::Random => "random",
            Strategy::Medium => "medium",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyframeChoice {
    pub track: u64,
    pub keyframe: usize,
    pub median_area: f64,
    pub sigma: f64,
    /// `(view, visibility score)` for every member view.
    pub scores: Vec<(usize, f64)>,
}

/// Picks a keyframe among `(view, mask area)` members. Every strategy breaks
/// ties toward the earliest view; `seed` only matters for [`Strategy::Random`].
pub fn select_keyframe(
    track: u64,
    members: &[(usize, u64)],
    strategy: Strategy,
    sigma: f64,
    seed: u64,
) -> Result<KeyframeChoice> {
    let mut members = members.to_vec();
    members.sort_unstable();
    let areas: Vec<u64> = members.iter().map(|m| m.1).collect();
    let median = median_area(&areas)?;
    let scores = members
        .iter()
        .map(|&(v, a)| Ok((v, visibility_score(a as f64, median, sigma)?)))
        .collect::<Result<Vec<_>>>()?;

    // first index maximizing the key; members are sorted by view
    fn first_best<K: PartialOrd>(keys: impl Iterator<Item = K>) -> usize {
        let mut best: Option<(usize, K)> = None;
        for (i, k) in keys.enumerate() {
            if best.as_ref().is_none_or(|(_, b)| k > *b) {
                best = Some((i, k));
            }
        }
        best.map_or(0, |(i, _)| i)
    }

    let idx = match strategy {
        Strategy::Weighting => first_best(scores.iter().map(|s| s.1)),
        Strategy::Maximum => first_best(areas.iter().map(|&a| a as i128)),
        Strategy::Minimum => first_best(areas.iter().map(|&a| -(a as i128))),
        Strategy::Medium => first_best(areas.iter().map(|&a| -(a as f64 - median).abs())),
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ track.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            rng.random_range(0..members.len())
        }
    };
    Ok(KeyframeChoice {
        track,
        keyframe: members[idx].0,
        median_area: median,
        sigma,
        scores,
    })
}

/// Keyframe for every consensus record, using the member mask areas.
pub fn select_all(
    ds: &SceneDataset,
    records: &[ConsensusRecord],
    strategy: Strategy,
    sigma: f64,
    seed: u64,
) -> Result<Vec<KeyframeChoice>> {
    records
        .iter()
        .map(|r| {
            let members: Vec<(usize, u64)> = r
                .members
                .iter()
                .map(|&(v, det)| (v, ds.detections[det].mask.area()))
                .collect();
            select_keyframe(r.track, &members, strategy, sigma, seed)
        })
        .collect()
}

/// One line of an external descriptions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalDescription {
    pub track: u64,
    pub view: usize,
    pub texts: Vec<String>,
    pub vecs: Vec<Vec<f64>>,
}

pub type ExternalDescriptions = BTreeMap<(u64, usize), ExternalDescription>;

pub fn load_external(path: &Path) -> Result<ExternalDescriptions> {
    let lines: Vec<ExternalDescription> = read_jsonl(path)?;
    let mut out = BTreeMap::new();
    for (i, e) in lines.into_iter().enumerate() {
        if e.texts.is_empty() || e.texts.len() != e.vecs.len() {
            return Err(Error::schema(
                path,
                i + 1,
                format!("{} texts but {} vectors", e.texts.len(), e.vecs.len()),
            ));
        }
        out.insert((e.track, e.view), e);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "to the left of",
            Relation::RightOf => "to the right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Relation of a subject at `from` to an anchor at `to`, in image
    /// coordinates (y grows downward).
    pub fn between(from: (f64, f64), to: (f64, f64)) -> Relation {
        let (dx, dy) = (to.0 - from.0, to.1 - from.1);
        if dx.abs() >= dy.abs() {
            if dx > 0.0 {
                Relation::LeftOf
            } else {
                Relation::RightOf
            }
        } else if dy > 0.0 {
            Relation::Above
        } else {
            Relation::Below
        }
    }
}

/// Inputs for one templated description set.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateInput<'a> {
    pub category: &'a str,
    pub category_vec: &'a [f64],
    pub attribute: Option<&'a str>,
    /// Relation to the nearest other object and that object's category.
    pub relation: Option<(Relation, &'a str, &'a [f64])>,
}

/// Two referrals: a short attribute phrase and a longer one adding the
/// spatial relation.
pub fn template_referrals(input: &TemplateInput<'_>) -> Vec<Referral> {
    let dim = input.category_vec.len();
    let attr_vec = input.attribute.map(|a| text::word_vector(a, dim));
    let short_text = match input.attribute {
        Some(a) => format!("the {a} {}", input.category),
        None => format!("the {}", input.category),
    };
    let mut short_parts: Vec<&[f64]> = vec![input.category_vec];
    if let Some(v) = &attr_vec {
        short_parts.push(v);
    }
    let short = Referral {
        vec: text::compose(&short_parts),
        text: short_text.clone(),
    };

    let mut long_parts = short_parts.clone();
    let (long_text, rel_vec) = match input.relation {
        Some((rel, anchor, _)) => (
            format!("{short_text} {} the {anchor}", rel.phrase()),
            text::word_vector(rel.key(), dim),
        ),
        None => (format!("{short_text} on its own"), text::word_vector("alone", dim)),
    };
    long_parts.push(&rel_vec);
    if let Some((_, _, anchor_vec)) = input.relation {
        long_parts.push(anchor_vec);
    }
    let long = Referral {
        vec: text::compose(&long_parts),
        text: long_text,
    };
    vec![short, long]
}

pub enum DescriptionSource<'a> {
    External(&'a ExternalDescriptions),
    /// Synthetic scenes: per-track attribute words.
    Template(&'a BTreeMap<u64, String>),
}

/// Builds the description set of one track against its keyframe.
pub fn attach_descriptions(
    ds: &SceneDataset,
    records: &[ConsensusRecord],
    choice: &KeyframeChoice,
    source: &DescriptionSource<'_>,
) -> Result<DescriptionSet> {
    let record = records
        .iter()
        .find(|r| r.track == choice.track)
        .ok_or_else(|| Error::Format(format!("no consensus record for track {}", choice.track)))?;
    let referrals = match source {
        DescriptionSource::External(ext) => {
            let e = ext
                .get(&(choice.track, choice.keyframe))
                .ok_or(Error::MissingDescription {
                    track: choice.track,
                    view: choice.keyframe,
                })?;
            e.texts
                .iter()
                .zip(&e.vecs)
                .map(|(t, v)| Referral {
                    text: t.clone(),
                    vec: v.clone(),
                })
                .collect()
        }
        DescriptionSource::Template(attributes) => {
            let centroid_in = |r: &ConsensusRecord| {
                r.members
                    .iter()
                    .find(|m| m.0 == choice.keyframe)
                    .and_then(|&(_, det)| ds.detections[det].mask.centroid())
            };
            let own = centroid_in(record);
            let nearest = own.and_then(|c| {
                records
                    .iter()
                    .filter(|r| r.track != record.track)
                    .filter_map(|r| centroid_in(r).map(|o| (r, o)))
                    .min_by(|a, b| {
                        let da = (a.1 .0 - c.0).hypot(a.1 .1 - c.1);
                        let db = (b.1 .0 - c.0).hypot(b.1 .1 - c.1);
                        da.total_cmp(&db).then(a.0.track.cmp(&b.0.track))
                    })
            });
            let relation = match (own, nearest) {
                (Some(c), Some((r, o))) => Some((
                    Relation::between(c, o),
                    r.canonical.as_str(),
                    ds.embedding(&r.canonical)?,
                )),
                _ => None,
            };
            template_referrals(&TemplateInput {
                category: &record.canonical,
                category_vec: ds.embedding(&record.canonical)?,
                attribute: attributes.get(&record.track).map(String::as_str),
                relation,
            })
        }
    };
    Ok(DescriptionSet {
        track: record.track,
        category: record.canonical.clone(),
        referrals,
    })
}
