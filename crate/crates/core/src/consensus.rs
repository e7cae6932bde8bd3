//! Label consensus over trajectories.
//!
//! Raw labels are first merged into synonym clusters by average-linkage
//! agglomeration on cosine distance; each trajectory then votes over the
//! clustered identities of its members, and the winner is written back to
//! every member detection.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{dot, LabelEmbedding, Member, SceneDataset, Trajectory};
use crate::error::{Error, Result};

/// Symmetric, row-major `n x n` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// Pairwise `1 - cos` distances, clamped to `[0, 2]` with an exact zero
/// diagonal.
pub fn cosine_distance_matrix(embeddings: &[LabelEmbedding]) -> Result<DistanceMatrix> {
    let vectors: Vec<&[f64]> = embeddings.iter().map(|e| e.vector.as_slice()).collect();
    distance_matrix(&vectors)
}

fn distance_matrix(vectors: &[&[f64]]) -> Result<DistanceMatrix> {
    let n = vectors.len();
    if let Some(first) = vectors.first() {
        if let Some(bad) = vectors.iter().position(|v| v.len() != first.len()) {
            return Err(Error::DimensionMismatch(format!(
                "embedding {bad} has dimension {}, expected {}",
                vectors[bad].len(),
                first.len()
            )));
        }
    }
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = (1.0 - dot(vectors[i], vectors[j])).clamp(0.0, 2.0);
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, data })
}

/// A label's clustered identity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Identity {
    /// `None` for labels that were not part of the clustered set.
    pub cluster: Option<usize>,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynonymClustering {
    pub tau_sem: f64,
    /// Clustered labels, in input order.
    pub labels: Vec<String>,
    pub assignment: BTreeMap<String, usize>,
    /// Surface form of each cluster, indexed by cluster.
    pub canonical: Vec<String>,
}

impl SynonymClustering {
    pub fn cluster_count(&self) -> usize {
        self.canonical.len()
    }

    /// Maps a raw label to its clustered identity. Labels outside the
    /// clustered set pass through as their own singleton.
    pub fn apply_phi(&self, label: &str) -> Identity {
        match self.assignment.get(label) {
            Some(&c) => Identity {
                cluster: Some(c),
                name: self.canonical[c].clone(),
            },
            None => {
                tracing::warn!(label, "label was not clustered; treating it as a singleton");
                Identity {
                    cluster: None,
                    name: label.to_string(),
                }
            }
        }
    }

    /// Members of each cluster, in label order.
    pub fn clusters(&self) -> Vec<Vec<String>> {
        let mut out = vec![Vec::new(); self.canonical.len()];
        for l in &self.labels {
            out[self.assignment[l]].push(l.clone());
        }
        out
    }
}

/// Shortest member by character count, ties broken lexicographically.
pub fn shortest_surface_form<'a>(members: impl IntoIterator<Item = &'a str>) -> Option<&'a str> {
    members
        .into_iter()
        .min_by(|a, b| a.chars().count().cmp(&b.chars().count()).then(a.cmp(b)))
}

fn check_tau(tau_sem: f64) -> Result<()> {
    if !(tau_sem > 0.0 && tau_sem < 1.0) {
        return Err(Error::InvalidParameter(format!("tau_sem {tau_sem} outside (0, 1)")));
    }
    Ok(())
}

/// Average-linkage agglomeration, cut where the closest pair of clusters is
/// farther apart than `1 - tau_sem`.
///
/// Clusters are identified by their lowest member index. Among equally
/// distant pairs, the pair with the lexicographically smallest
/// `(lowest index, lowest index)` key merges first. Cluster numbers in the
/// result follow the lowest member index.
pub fn cluster_synonyms(
    labels: &[String],
    embeddings: &BTreeMap<String, Vec<f64>>,
    tau_sem: f64,
) -> Result<SynonymClustering> {
    check_tau(tau_sem)?;
    let mut sorted: Vec<&String> = labels.iter().collect();
    sorted.sort();
    if let Some(w) = sorted.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::InvalidParameter(format!("duplicate label {:?}", w[0])));
    }
    let vectors = labels
        .iter()
        .map(|l| {
            embeddings
                .get(l)
                .map(Vec::as_slice)
                .ok_or_else(|| Error::MissingEmbedding(l.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    let dist = distance_matrix(&vectors)?;
    let n = labels.len();
    let cut = 1.0 - tau_sem;

    // sum of pairwise distances between active clusters, keyed by slot
    let mut sums = dist.data.clone();
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();

    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in (0..n).filter(|&i| active[i]) {
            for j in (i + 1..n).filter(|&j| active[j]) {
                let avg = sums[i * n + j] / (size[i] * size[j]) as f64;
                if best.is_none_or(|(b, _, _)| avg < b) {
                    best = Some((avg, i, j));
                }
            }
        }
        let Some((avg, i, j)) = best else { break };
        if avg > cut {
            break;
        }
        for k in (0..n).filter(|&k| active[k] && k != i && k != j) {
            let s = sums[i * n + k] + sums[j * n + k];
            sums[i * n + k] = s;
            sums[k * n + i] = s;
        }
        size[i] += size[j];
        active[j] = false;
        owner.iter_mut().filter(|o| **o == j).for_each(|o| *o = i);
    }

    let slots: Vec<usize> = (0..n).filter(|&i| active[i]).collect();
    let index_of: BTreeMap<usize, usize> = slots.iter().enumerate().map(|(c, &s)| (s, c)).collect();
    let assignment: BTreeMap<String, usize> = labels
        .iter()
        .zip(&owner)
        .map(|(l, o)| (l.clone(), index_of[o]))
        .collect();
    let canonical = slots
        .iter()
        .map(|&s| {
            let members = labels
                .iter()
                .zip(&owner)
                .filter(|(_, &o)| o == s)
                .map(|(l, _)| l.as_str());
            shortest_surface_form(members).unwrap_or_default().to_string()
        })
        .collect();
    Ok(SynonymClustering {
        tau_sem,
        labels: labels.to_vec(),
        assignment,
        canonical,
    })
}

/// One member's contribution to a trajectory vote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ballot {
    pub identity: String,
    pub area: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vote {
    pub winner: String,
    pub counts: BTreeMap<String, usize>,
}

/// Most frequent identity among the ballots. Ties go to the identity with the
/// larger total mask area over its supporting views, then to the
/// lexicographically smallest name.
pub fn vote_trajectory(ballots: &[Ballot]) -> Result<Vote> {
    let mut tally: BTreeMap<&str, (usize, u64)> = BTreeMap::new();
    for b in ballots {
        let e = tally.entry(b.identity.as_str()).or_default();
        e.0 += 1;
        e.1 += b.area;
    }
    // names compare reversed so the smallest name ranks highest
    let winner = tally
        .iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(a.1 .1.cmp(&b.1 .1)).then(b.0.cmp(a.0)))
        .map(|(name, _)| name.to_string())
        .ok_or_else(|| Error::Format("cannot vote on an empty trajectory".into()))?;
    let counts = tally.into_iter().map(|(k, (c, _))| (k.to_string(), c)).collect();
    Ok(Vote { winner, counts })
}

/// Consensus outcome for one trajectory, one line of the consensus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusRecord {
    pub track: u64,
    pub canonical: String,
    pub votes: BTreeMap<String, usize>,
    pub members: Vec<Member>,
}

pub fn ballots(ds: &SceneDataset, trajectory: &Trajectory, clustering: &SynonymClustering) -> Vec<Ballot> {
    trajectory
        .detection_indices()
        .map(|i| {
            let d = &ds.detections[i];
            Ballot {
                identity: clustering.apply_phi(&d.label).name,
                area: d.mask.area(),
            }
        })
        .collect()
}

pub fn vote_all(
    ds: &SceneDataset,
    trajectories: &[Trajectory],
    clustering: &SynonymClustering,
) -> Result<Vec<ConsensusRecord>> {
    trajectories
        .par_iter()
        .map(|t| {
            let vote = vote_trajectory(&ballots(ds, t, clustering))?;
            Ok(ConsensusRecord {
                track: t.track_id,
                canonical: vote.winner,
                votes: vote.counts,
                members: t.members.clone(),
            })
        })
        .collect()
}

/// Clusters every raw label in the dataset and votes each trajectory.
pub fn run_consensus(
    ds: &SceneDataset,
    trajectories: &[Trajectory],
    tau_sem: f64,
) -> Result<(SynonymClustering, Vec<ConsensusRecord>)> {
    let clustering = cluster_synonyms(&ds.raw_labels(), &ds.embeddings, tau_sem)?;
    let records = vote_all(ds, trajectories, &clustering)?;
    Ok((clustering, records))
}

/// Writes each trajectory's winner into `resolved` on all of its members.
pub fn propagate(ds: &SceneDataset, records: &[ConsensusRecord]) -> SceneDataset {
    let mut out = ds.clone();
    for r in records {
        for &(_, det) in &r.members {
            let d = &mut out.detections[det];
            d.resolved = Some(r.canonical.clone());
            d.track = Some(r.track);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(pairs: &[(&str, Vec<f64>)]) -> BTreeMap<String, Vec<f64>> {
        pairs
            .iter()
            .map(|(l, v)| (l.to_string(), crate::data::normalize(v.clone())))
            .collect()
    }

    fn labels(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    fn unit_at_cos(c: f64) -> Vec<f64> {
        vec![c, (1.0 - c * c).sqrt()]
    }

    #[test]
    fn distance_fixtures() {
        let e = |v: Vec<f64>| LabelEmbedding::new("x", v).unwrap();
        let m = cosine_distance_matrix(&[
            e(vec![1.0, 0.0]),
            e(vec![1.0, 0.0]),
            e(vec![0.0, 1.0]),
            e(vec![-1.0, 0.0]),
        ])
        .unwrap();
        assert_eq!(m.get(0, 1), 0.0);
        assert_eq!(m.get(0, 2), 1.0);
        assert_eq!(m.get(0, 3), 2.0);
        assert_eq!(m.get(2, 2), 0.0);
        assert_eq!(m.get(3, 0), m.get(0, 3));
        let bad = cosine_distance_matrix(&[
            e(vec![1.0, 0.0]),
            LabelEmbedding {
                label: "y".into(),
                vector: vec![1.0],
            },
        ]);
        assert!(matches!(bad, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn identical_embeddings_always_merge() {
        let e = emb(&[("a", vec![1.0, 2.0]), ("b", vec![1.0, 2.0])]);
        for tau in [0.01, 0.5, 0.99] {
            assert_eq!(
                cluster_synonyms(&labels(&["a", "b"]), &e, tau).unwrap().cluster_count(),
                1
            );
        }
    }

    #[test]
    fn threshold_comparison() {
        let e = emb(&[("a", vec![1.0, 0.0]), ("b", unit_at_cos(0.80))]);
        let l = labels(&["a", "b"]);
        assert_eq!(cluster_synonyms(&l, &e, 0.85).unwrap().cluster_count(), 2);
        assert_eq!(cluster_synonyms(&l, &e, 0.75).unwrap().cluster_count(), 1);
    }

    #[test]
    fn canonical_is_shortest_surface_form() {
        let e = emb(&[("coffee machine", vec![1.0, 0.01]), ("coffee maker", vec![1.0, 0.0])]);
        let c = cluster_synonyms(&labels(&["coffee machine", "coffee maker"]), &e, 0.85).unwrap();
        assert_eq!(c.canonical, vec!["coffee maker".to_string()]);
        assert_eq!(c.apply_phi("coffee machine").name, "coffee maker");
        assert_eq!(shortest_surface_form(["mug", "cup"]), Some("cup"));
    }

    #[test]
    fn phi_fixtures() {
        let e = emb(&[
            ("ramen", vec![1.0, 0.05, 0.0]),
            ("ramen bowl", vec![1.0, 0.0, 0.0]),
            ("pot", vec![0.0, 0.0, 1.0]),
        ]);
        let c = cluster_synonyms(&labels(&["ramen", "ramen bowl", "pot"]), &e, 0.85).unwrap();
        assert_eq!(
            c.apply_phi("pot"),
            Identity {
                cluster: Some(1),
                name: "pot".into()
            }
        );
        assert_eq!(c.apply_phi("ramen").name, "ramen");
        assert_eq!(c.apply_phi("ramen bowl").name, "ramen");
        assert_eq!(
            c.apply_phi("zebra"),
            Identity {
                cluster: None,
                name: "zebra".into()
            }
        );
    }

    #[test]
    fn clustering_errors() {
        let e = emb(&[("a", vec![1.0])]);
        assert!(
            matches!(cluster_synonyms(&labels(&["a", "b"]), &e, 0.85), Err(Error::MissingEmbedding(l)) if l == "b")
        );
        assert!(cluster_synonyms(&labels(&["a"]), &e, 1.0).is_err());
        assert!(cluster_synonyms(&labels(&["a"]), &e, 0.0).is_err());
        assert!(cluster_synonyms(&labels(&["a", "a"]), &e, 0.5).is_err());
        assert_eq!(cluster_synonyms(&[], &e, 0.5).unwrap().cluster_count(), 0);
    }

    fn ballots_of(entries: &[(&str, u64)]) -> Vec<Ballot> {
        entries
            .iter()
            .map(|(n, a)| Ballot {
                identity: n.to_string(),
                area: *a,
            })
            .collect()
    }

    #[test]
    fn vote_fixtures() {
        assert_eq!(vote_trajectory(&ballots_of(&[("pot", 10)])).unwrap().winner, "pot");
        let b = ballots_of(&[
            ("ramen", 1),
            ("bowl", 50),
            ("ramen", 1),
            ("food", 99),
            ("bowl", 50),
            ("ramen", 1),
        ]);
        let v = vote_trajectory(&b).unwrap();
        assert_eq!(v.winner, "ramen");
        assert_eq!(v.counts["ramen"], 3);
        assert_eq!(v.counts["bowl"], 2);
        assert_eq!(v.counts["food"], 1);
        let tie = ballots_of(&[("mug", 200), ("cup", 450), ("mug", 200), ("cup", 450)]);
        assert_eq!(vote_trajectory(&tie).unwrap().winner, "cup");
        let tie = ballots_of(&[("mug", 500), ("cup", 450), ("mug", 500), ("cup", 450)]);
        assert_eq!(vote_trajectory(&tie).unwrap().winner, "mug");
        let full_tie = ballots_of(&[("mug", 5), ("cup", 5)]);
        assert_eq!(vote_trajectory(&full_tie).unwrap().winner, "cup");
        assert!(vote_trajectory(&[]).is_err());
    }

    #[test]
    fn propagate_is_idempotent_and_consistent() {
        use crate::data::Detection;
        use crate::mask::RleMask;
        let mut ds = SceneDataset::new(3, 1, 2, 2);
        let m = RleMask::new(1, 2, vec![0, 2]).unwrap();
        for (v, l, t) in [
            (0, "ramen", 0),
            (1, "noodles", 0),
            (2, "ramen", 0),
            (0, "cup", 1),
            (1, "cup", 1),
        ] {
            ds.detections.push(Detection::new(v, l, 1.0, m.clone()).with_track(t));
        }
        ds.embeddings = emb(&[
            ("ramen", vec![1.0, 0.0]),
            ("noodles", vec![0.0, 1.0]),
            ("cup", vec![-1.0, 0.0]),
        ]);
        let tracks = crate::association::import_tracks(&ds).unwrap();
        let (_, records) = run_consensus(&ds, &tracks, 0.85).unwrap();
        let once = propagate(&ds, &records);
        assert_eq!(propagate(&once, &records), once);
        let resolved: Vec<_> = once.detections.iter().map(|d| d.resolved.as_deref().unwrap()).collect();
        assert_eq!(resolved, ["ramen", "ramen", "ramen", "cup", "cup"]);
        assert_eq!(once.detections[1].label, "noodles");
    }
}
