//! A toy language-grounded referring field.
//!
//! A fixed set of 2D Gaussians per view, each carrying a learnable feature
//! vector. A text query renders as a per-pixel probability
//! `logistic(sum_g w_g(p) * (feature_g . query))`, where `w_g` is an isotropic
//! Gaussian falloff truncated at three spreads.

mod loss;
mod train;

pub use loss::{contrastive_loss, contrastive_loss_indexed, grad_check, relative_error, seg_loss, total_loss, BCE_EPS};
pub use train::{
    long_only_baseline, ratio_decay, step_loss, train, Adam, FieldConfig, LossParts, LossPoint, PositiveMode, Query,
    RatioDecay, Selection, TrackSupervision, TrainConfig, TrainingSet,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{Bitmap, RleMask};

/// Gaussians contribute nothing beyond this many spreads from their center.
pub const TRUNCATION: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGaussian {
    pub id: usize,
    /// Track the Gaussian was seeded from; `None` for background.
    pub track: Option<u64>,
    pub spread: f64,
    /// Center `(x, y)` in pixels for every view.
    pub centers: Vec<(f64, f64)>,
    pub feature: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyReferringField {
    pub h: u32,
    pub w: u32,
    pub dim: usize,
    pub gaussians: Vec<ToyGaussian>,
}

/// Sparse splat weights of one view: `(pixel, gaussian, weight)`, sorted by
/// pixel then gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewWeights {
    pub entries: Vec<(usize, usize, f64)>,
}

/// Per-pixel probabilities and the logits they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid {
    pub h: u32,
    pub w: u32,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl ProbGrid {
    /// Foreground where the probability is strictly above `threshold`.
    pub fn binarize(&self, threshold: f64) -> RleMask {
        let mut bm = Bitmap::new(self.h, self.w);
        for (i, &p) in self.probs.iter().enumerate() {
            if p > threshold {
                bm.set(i as u32 % self.w, i as u32 / self.w, true);
            }
        }
        bm.encode()
    }
}

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ToyReferringField {
    pub fn n_views(&self) -> usize {
        self.gaussians.first().map_or(0, |g| g.centers.len())
    }

    pub fn features(&self) -> Vec<f64> {
        self.gaussians.iter().flat_map(|g| g.feature.iter().copied()).collect()
    }

    pub fn set_features(&mut self, flat: &[f64]) {
        for (g, chunk) in self.gaussians.iter_mut().zip(flat.chunks(self.dim)) {
            g.feature.copy_from_slice(chunk);
        }
    }

    pub fn check_view(&self, view: usize) -> Result<()> {
        if view >= self.n_views() {
            return Err(Error::InvalidParameter(format!(
                "view {view} out of range for {} views",
                self.n_views()
            )));
        }
        Ok(())
    }

    pub fn view_weights(&self, view: usize) -> Result<ViewWeights> {
        self.check_view(view)?;
        let mut entries = Vec::new();
        for (gi, g) in self.gaussians.iter().enumerate() {
            let (cx, cy) = g.centers[view];
            let reach = TRUNCATION * g.spread;
            let x0 = ((cx - reach - 0.5).floor().max(0.0)) as i64;
            let x1 = ((cx + reach - 0.5).ceil()).min(f64::from(self.w) - 1.0) as i64;
            let y0 = ((cy - reach - 0.5).floor().max(0.0)) as i64;
            let y1 = ((cy + reach - 0.5).ceil()).min(f64::from(self.h) - 1.0) as i64;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    let d2 = dx * dx + dy * dy;
                    if d2 <= reach * reach {
                        let w = (-d2 / (2.0 * g.spread * g.spread)).exp();
                        entries.push(((y * i64::from(self.w) + x) as usize, gi, w));
                    }
                }
            }
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(ViewWeights { entries })
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "query has dimension {}, field has {}",
                query.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn render_with(&self, weights: &ViewWeights, query: &[f64]) -> Result<ProbGrid> {
        self.check_query(query)?;
        let sims: Vec<f64> = self
            .gaussians
            .iter()
            .map(|g| crate::data::dot(&g.feature, query))
            .collect();
        let mut logits = vec![0.0; self.h as usize * self.w as usize];
        for &(p, g, w) in &weights.entries {
            logits[p] += w * sims[g];
        }
        let probs = logits.iter().map(|&z| logistic(z)).collect();
        Ok(ProbGrid {
            h: self.h,
            w: self.w,
            logits,
            probs,
        })
    }

    pub fn render_mask(&self, view: usize, query: &[f64]) -> Result<ProbGrid> {
        self.render_with(&self.view_weights(view)?, query)
    }

    /// Gaussians whose center pixel lies inside `mask` in `view`.
    pub fn gaussians_in(&self, view: usize, mask: &Bitmap) -> Result<Vec<usize>> {
        self.check_view(view)?;
        if (mask.height(), mask.width()) != (self.h, self.w) {
            return Err(Error::DimensionMismatch(format!(
                "mask is {}x{}, field is {}x{}",
                mask.height(),
                mask.width(),
                self.h,
                self.w
            )));
        }
        Ok(self
            .gaussians
            .iter()
            .enumerate()
            .filter(|(_, g)| {
                let (x, y) = g.centers[view];
                x >= 0.0 && y >= 0.0 && x < f64::from(self.w) && y < f64::from(self.h) && mask.get(x as u32, y as u32)
            })
            .map(|(i, _)| i)
            .collect())
    }

    /// Mean feature of the selected Gaussians.
    pub fn mean_feature(&self, selected: &[usize]) -> Result<Vec<f64>> {
        if selected.is_empty() {
            return Err(Error::EmptySelection);
        }
        let mut f = vec![0.0; self.dim];
        for &i in selected {
            for (a, b) in f.iter_mut().zip(&self.gaussians[i].feature) {
                *a += b;
            }
        }
        let n = selected.len() as f64;
        f.iter_mut().for_each(|x| *x /= n);
        Ok(f)
    }

    /// Gaussians selected by a pseudo mask and their mean feature.
    pub fn select_gaussians(&self, view: usize, pseudo_mask: &RleMask) -> Result<(Vec<usize>, Vec<f64>)> {
        let selected = self.gaussians_in(view, &pseudo_mask.decode())?;
        let f = self.mean_feature(&selected)?;
        Ok((selected, f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(features: Vec<Vec<f64>>, centers: Vec<(f64, f64)>) -> ToyReferringField {
        ToyReferringField {
            h: 16,
            w: 16,
            dim: features[0].len(),
            gaussians: features
                .into_iter()
                .zip(centers)
                .enumerate()
                .map(|(id, (feature, c))| ToyGaussian {
                    id,
                    track: None,
                    spread: 2.0,
                    centers: vec![c],
                    feature,
                })
                .collect(),
        }
    }

    #[test]
    fn zero_features_render_half() {
        let f = field(vec![vec![0.0, 0.0]], vec![(8.0, 8.0)]);
        let g = f.render_mask(0, &[1.0, 0.0]).unwrap();
        assert!(g.probs.iter().all(|&p| p == 0.5));
        assert_eq!(g.binarize(0.5).area(), 0);
    }

    #[test]
    fn aligned_feature_saturates_center() {
        let f = field(vec![vec![10.0, 0.0]], vec![(8.5, 8.5)]);
        let g = f.render_mask(0, &[1.0, 0.0]).unwrap();
        let center = 8 * 16 + 8;
        assert!(g.probs[center] > 0.99);
        assert!((g.logits[center] - 10.0).abs() < 1e-12);
        // beyond 3 spreads the Gaussian contributes nothing
        assert_eq!(g.probs[0], 0.5);
    }

    #[test]
    fn orthogonal_query_is_uniform() {
        let f = field(vec![vec![3.0, 0.0], vec![-2.0, 0.0]], vec![(4.0, 4.0), (12.0, 12.0)]);
        let g = f.render_mask(0, &[0.0, 1.0]).unwrap();
        assert!(g.probs.iter().all(|&p| p == 0.5));
        assert!(f.render_mask(1, &[0.0, 1.0]).is_err());
        assert!(f.render_mask(0, &[0.0, 1.0, 0.0]).is_err());
    }

    fn square(x0: u32, y0: u32, x1: u32, y1: u32) -> RleMask {
        let mut b = Bitmap::new(16, 16);
        for y in y0..y1 {
            for x in x0..x1 {
                b.set(x, y, true);
            }
        }
        b.encode()
    }

    #[test]
    fn selection_fixtures() {
        let f = field(vec![vec![1.0, 2.0], vec![5.0, 5.0]], vec![(2.5, 2.5), (12.0, 12.0)]);
        let (sel, fg) = f.select_gaussians(0, &square(0, 0, 4, 4)).unwrap();
        assert_eq!(sel, vec![0]);
        assert_eq!(fg, vec![1.0, 2.0]);

        let f = field(vec![vec![1.0, -3.0], vec![-1.0, 3.0]], vec![(2.5, 2.5), (3.5, 3.5)]);
        let (_, fg) = f.select_gaussians(0, &square(0, 0, 4, 4)).unwrap();
        assert_eq!(fg, vec![0.0, 0.0]);

        let e = |i: usize| (0..3).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
        let f = field(vec![e(0), e(1), e(2)], vec![(1.0, 1.0), (2.0, 2.0), (3.0, 1.0)]);
        let (sel, fg) = f.select_gaussians(0, &square(0, 0, 4, 4)).unwrap();
        assert_eq!(sel.len(), 3);
        for x in fg {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(matches!(
            f.select_gaussians(0, &square(10, 10, 12, 12)),
            Err(Error::EmptySelection)
        ));
    }

    #[test]
    fn logistic_is_stable() {
        assert_eq!(logistic(0.0), 0.5);
        assert!(logistic(800.0) == 1.0 && logistic(-800.0) == 0.0);
        assert!((logistic(2.0) + logistic(-2.0) - 1.0).abs() < 1e-15);
    }
}
