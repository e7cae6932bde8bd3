//! Grouping per-view detections into trajectories.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{dot, SceneDataset, Trajectory};
use crate::error::{Error, Result};

/// Groups detections by their external track id.
pub fn import_tracks(ds: &SceneDataset) -> Result<Vec<Trajectory>> {
    let mut groups: BTreeMap<u64, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, d) in ds.detections.iter().enumerate() {
        let track = d.track.ok_or(Error::MissingTrackId { index: i })?;
        groups.entry(track).or_default().push((d.view, i));
    }
    groups
        .into_iter()
        .map(|(track, members)| Trajectory::new(track, members))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssocParams {
    /// Weight of mask IoU against label similarity.
    pub iou_weight: f64,
    pub match_threshold: f64,
    /// Number of consecutive views a track may go unmatched and still be
    /// extended.
    pub max_gap: usize,
}

impl Default for AssocParams {
    fn default() -> Self {
        AssocParams {
            iou_weight: 0.7,
            match_threshold: 0.3,
            max_gap: 5,
        }
    }
}

impl AssocParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.iou_weight) {
            return Err(Error::InvalidParameter(format!(
                "iou_weight {} outside [0, 1]",
                self.iou_weight
            )));
        }
        if !(0.0..=1.0).contains(&self.match_threshold) {
            return Err(Error::InvalidParameter(format!(
                "match_threshold {} outside [0, 1]",
                self.match_threshold
            )));
        }
        Ok(())
    }
}

struct OpenTrack {
    id: u64,
    last_view: usize,
    last_det: usize,
    members: Vec<(usize, usize)>,
}

/// Score between a detection and a track's most recent detection.
pub fn match_score(ds: &SceneDataset, det: usize, track_last: usize, iou_weight: f64) -> Result<f64> {
    let a = &ds.detections[det];
    let b = &ds.detections[track_last];
    let iou = a.mask.iou(&b.mask)?;
    let cos = dot(ds.embedding(&a.label)?, ds.embedding(&b.label)?);
    Ok(iou_weight * iou + (1.0 - iou_weight) * cos)
}

/// Greedy view-by-view association.
///
/// In each view, every (detection, eligible track) pair scoring at least the
/// match threshold is a candidate. Candidates are accepted in descending score
/// order; ties go to the track seen in the earlier view, then the lower
/// detection index, then the lower track id. Unmatched detections open new
/// tracks, numbered in order of creation.
pub fn associate_greedy(ds: &SceneDataset, params: &AssocParams) -> Result<Vec<Trajectory>> {
    params.validate()?;
    for d in &ds.detections {
        ds.embedding(&d.label)?;
    }
    let mut tracks: Vec<OpenTrack> = Vec::new();
    for (view, dets) in ds.by_view().into_iter().enumerate() {
        let eligible: Vec<usize> = tracks
            .iter()
            .enumerate()
            .filter(|(_, t)| view - t.last_view - 1 <= params.max_gap)
            .map(|(i, _)| i)
            .collect();

        let mut candidates = Vec::new();
        for &det in &dets {
            for &ti in &eligible {
                let score = match_score(ds, det, tracks[ti].last_det, params.iou_weight)?;
                if score >= params.match_threshold {
                    candidates.push((score, tracks[ti].last_view, det, ti));
                }
            }
        }
        candidates.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
                .then(tracks[a.3].id.cmp(&tracks[b.3].id))
        });

        let mut det_taken = vec![false; ds.detections.len()];
        let mut track_taken = vec![false; tracks.len()];
        for (_, _, det, ti) in candidates {
            if det_taken[det] || track_taken[ti] {
                continue;
            }
            det_taken[det] = true;
            track_taken[ti] = true;
            let t = &mut tracks[ti];
            t.last_view = view;
            t.last_det = det;
            t.members.push((view, det));
        }
        for &det in &dets {
            if !det_taken[det] {
                tracks.push(OpenTrack {
                    id: tracks.len() as u64,
                    last_view: view,
                    last_det: det,
                    members: vec![(view, det)],
                });
            }
        }
    }
    tracks.into_iter().map(|t| Trajectory::new(t.id, t.members)).collect()
}

/// Copies trajectory ids onto the detections they contain.
pub fn assign_track_ids(ds: &mut SceneDataset, trajectories: &[Trajectory]) {
    for t in trajectories {
        for det in t.detection_indices() {
            ds.detections[det].track = Some(t.track_id);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Detection;
    use crate::mask::{Bitmap, RleMask};

    fn rect(h: u32, w: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> RleMask {
        let mut b = Bitmap::new(h, w);
        for y in y0..y1 {
            for x in x0..x1 {
                b.set(x, y, true);
            }
        }
        b.encode()
    }

    fn dataset(n_views: usize) -> SceneDataset {
        let mut ds = SceneDataset::new(n_views, 8, 8, 2);
        ds.embeddings.insert("cup".into(), vec![1.0, 0.0]);
        ds.embeddings.insert("plate".into(), vec![0.0, 1.0]);
        ds
    }

    fn is_partition(ds: &SceneDataset, tracks: &[Trajectory]) -> bool {
        let mut seen = vec![0; ds.detections.len()];
        for t in tracks {
            for d in t.detection_indices() {
                seen[d] += 1;
            }
        }
        seen.iter().all(|&c| c == 1)
    }

    #[test]
    fn import_single_track() {
        let mut ds = dataset(3);
        for v in 0..3 {
            ds.detections
                .push(Detection::new(v, "cup", 1.0, rect(8, 8, 0, 0, 2, 2)).with_track(0));
        }
        let t = import_tracks(&ds).unwrap();
        assert_eq!(t, vec![Trajectory::new(0, vec![(0, 0), (1, 1), (2, 2)]).unwrap()]);
    }

    #[test]
    fn import_interleaved_tracks_matches_partition_oracle() {
        let mut ds = dataset(4);
        for v in 0..4 {
            ds.detections
                .push(Detection::new(v, "cup", 1.0, rect(8, 8, 0, 0, 2, 2)).with_track((v % 2) as u64));
        }
        let t = import_tracks(&ds).unwrap();
        let mut oracle: Vec<Vec<usize>> = vec![vec![], vec![]];
        for (i, d) in ds.detections.iter().enumerate() {
            oracle[d.track.unwrap() as usize].push(i);
        }
        assert_eq!(t.len(), 2);
        for tr in &t {
            assert_eq!(tr.len(), 2);
            let dets: Vec<usize> = tr.detection_indices().collect();
            assert_eq!(dets, oracle[tr.track_id as usize]);
        }
    }

    #[test]
    fn import_errors() {
        let mut ds = dataset(2);
        ds.detections
            .push(Detection::new(0, "cup", 1.0, rect(8, 8, 0, 0, 2, 2)).with_track(0));
        ds.detections
            .push(Detection::new(0, "cup", 1.0, rect(8, 8, 4, 4, 6, 6)).with_track(0));
        assert!(matches!(
            import_tracks(&ds),
            Err(Error::DuplicateTrackView { track: 0, view: 0 })
        ));
        ds.detections[1].track = None;
        assert!(matches!(import_tracks(&ds), Err(Error::MissingTrackId { index: 1 })));
    }

    #[test]
    fn identical_detections_form_one_track() {
        let mut ds = dataset(5);
        for v in 0..5 {
            ds.detections
                .push(Detection::new(v, "cup", 1.0, rect(8, 8, 1, 1, 4, 4)));
        }
        let params = AssocParams {
            match_threshold: 0.5,
            ..AssocParams::default()
        };
        let t = associate_greedy(&ds, &params).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].len(), 5);
    }

    #[test]
    fn disjoint_objects_agree_with_brute_force_assignment() {
        let mut ds = dataset(4);
        let masks = [rect(8, 8, 0, 0, 3, 3), rect(8, 8, 5, 5, 8, 8)];
        let labels = ["cup", "plate"];
        for v in 0..4 {
            // alternate insertion order so index order does not give the answer away
            let order = if v % 2 == 0 { [0, 1] } else { [1, 0] };
            for o in order {
                ds.detections.push(Detection::new(v, labels[o], 1.0, masks[o].clone()));
            }
        }
        let params = AssocParams {
            iou_weight: 1.0,
            match_threshold: 0.5,
            max_gap: 5,
        };
        let t = associate_greedy(&ds, &params).unwrap();
        assert_eq!(t.len(), 2);
        assert!(is_partition(&ds, &t));

        // brute force: in each view choose the permutation maximizing total IoU
        // against the previous view's assignment
        for pair in [0usize, 1] {
            for w in t[pair].members.windows(2) {
                let (a, b) = (&ds.detections[w[0].1], &ds.detections[w[1].1]);
                let best = [0, 1]
                    .iter()
                    .map(|&o| masks[o].iou(&a.mask).unwrap())
                    .fold(0.0, f64::max);
                assert_eq!(a.mask.iou(&b.mask).unwrap(), best);
                assert_eq!(a.label, b.label);
            }
        }
    }

    #[test]
    fn gap_longer_than_limit_opens_new_track() {
        let params = AssocParams {
            iou_weight: 1.0,
            match_threshold: 0.5,
            max_gap: 2,
        };
        let m = rect(8, 8, 2, 2, 5, 5);
        // absent for exactly max_gap views: still one track
        let mut ds = dataset(4);
        ds.detections.push(Detection::new(0, "cup", 1.0, m.clone()));
        ds.detections.push(Detection::new(3, "cup", 1.0, m.clone()));
        assert_eq!(associate_greedy(&ds, &params).unwrap().len(), 1);
        // absent for max_gap + 1 views: re-appearance is a new track
        let mut ds = dataset(5);
        ds.detections.push(Detection::new(0, "cup", 1.0, m.clone()));
        ds.detections.push(Detection::new(4, "cup", 1.0, m));
        let t = associate_greedy(&ds, &params).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t[1].members, vec![(4, 1)]);
    }

    #[test]
    fn missing_embedding_is_an_error() {
        let mut ds = dataset(1);
        ds.detections
            .push(Detection::new(0, "zebra", 1.0, rect(8, 8, 0, 0, 1, 1)));
        assert!(matches!(
            associate_greedy(&ds, &AssocParams::default()),
            Err(Error::MissingEmbedding(l)) if l == "zebra"
        ));
    }

    #[test]
    fn invalid_params_rejected() {
        let ds = dataset(1);
        let p = AssocParams {
            iou_weight: 1.5,
            ..AssocParams::default()
        };
        assert!(matches!(associate_greedy(&ds, &p), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn slow_drift_is_never_fragmented_without_gap_limit() {
        let n = 12;
        let mut ds = dataset(n);
        for v in 0..n {
            if v % 3 == 1 {
                continue;
            }
            let x = (v / 3) as u32;
            ds.detections
                .push(Detection::new(v, "cup", 1.0, rect(8, 8, x, 1, x + 4, 6)));
        }
        let params = AssocParams {
            iou_weight: 1.0,
            match_threshold: 0.5,
            max_gap: n,
        };
        let t = associate_greedy(&ds, &params).unwrap();
        assert_eq!(t.len(), 1);
        assert!(is_partition(&ds, &t));
    }
}
