#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tracklabel::data::normalize;
use tracklabel::field::{FieldConfig, Query, ToyGaussian, ToyReferringField, TrackSupervision, TrainingSet};
use tracklabel::mask::{Bitmap, RleMask};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    normalize((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
}

pub fn disk(h: u32, w: u32, cx: f64, cy: f64, r: f64) -> RleMask {
    let mut b = Bitmap::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (f64::from(x) + 0.5 - cx, f64::from(y) + 0.5 - cy);
            if dx * dx + dy * dy <= r * r {
                b.set(x, y, true);
            }
        }
    }
    b.encode()
}

fn query(text: &str, vec: Vec<f64>) -> Query {
    Query {
        text: text.to_string(),
        vec,
    }
}

/// Two tracks over two 16x16 views with random queries, plus a field seeded
/// from their masks with features large enough to exercise every term.
pub fn tiny_problem(seed: u64) -> (ToyReferringField, TrainingSet) {
    let mut r = rng(seed);
    let dim = 6;
    let mut tracks = Vec::new();
    for t in 0..2u64 {
        let mut masks = BTreeMap::new();
        for v in 0..2usize {
            let cx = 4.0 + 8.0 * t as f64 + r.random_range(-1.0..1.0) + v as f64;
            let cy = 8.0 + r.random_range(-2.0..2.0);
            masks.insert(v, disk(16, 16, cx, cy, r.random_range(2.5..4.0)));
        }
        let n_ref = r.random_range(1..=2);
        tracks.push(TrackSupervision {
            track: t,
            category: query(&format!("cat{t}"), unit(&mut r, dim)),
            referrals: (0..n_ref)
                .map(|k| query(&format!("ref{t}-{k}"), unit(&mut r, dim)))
                .collect(),
            masks,
        });
    }
    let set = TrainingSet {
        h: 16,
        w: 16,
        n_views: 2,
        dim,
        tracks,
        train_views: vec![0, 1],
    };
    let cfg = FieldConfig {
        gaussians_per_track: 3,
        background_gaussians: 4,
        spread: 3.0,
        init_std: 0.3,
        seed,
    };
    let field = ToyReferringField::from_training_set(&set, &cfg).unwrap();
    (field, set)
}

/// One Gaussian at the center of a 16x16 view and one track whose only
/// positive is its category.
pub fn single_gaussian_problem(dim: usize, seed: u64) -> (ToyReferringField, TrainingSet) {
    let mut r = rng(seed);
    let category = unit(&mut r, dim);
    let field = ToyReferringField {
        h: 16,
        w: 16,
        dim,
        gaussians: vec![ToyGaussian {
            id: 0,
            track: Some(0),
            spread: 3.0,
            centers: vec![(8.0, 8.0)],
            feature: (0..dim).map(|_| r.random_range(-0.01..0.01)).collect(),
        }],
    };
    let set = TrainingSet {
        h: 16,
        w: 16,
        n_views: 1,
        dim,
        tracks: vec![TrackSupervision {
            track: 0,
            category: query("thing", category),
            referrals: Vec::new(),
            masks: [(0, disk(16, 16, 8.0, 8.0, 6.0))].into_iter().collect(),
        }],
        train_views: vec![0],
    };
    (field, set)
}
