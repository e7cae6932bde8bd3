//! Binary masks and their run-length encoding.
//!
//! Runs are taken in row-major order and alternate background/foreground,
//! starting with background. The leading run may be zero (mask starts with a
//! foreground pixel); no other run is ever zero, so every mask has exactly one
//! encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Run-length encoded binary mask, serialized as `{"h", "w", "counts"}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawRle")]
pub struct RleMask {
    h: u32,
    w: u32,
    counts: Vec<u32>,
}

#[derive(Deserialize)]
struct RawRle {
    h: u32,
    w: u32,
    counts: Vec<u32>,
}

impl TryFrom<RawRle> for RleMask {
    type Error = Error;

    fn try_from(raw: RawRle) -> Result<Self> {
        RleMask::new(raw.h, raw.w, raw.counts)
    }
}

impl RleMask {
    pub fn new(h: u32, w: u32, counts: Vec<u32>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Format(format!("mask dimensions must be positive, got {h}x{w}")));
        }
        let total: u64 = counts.iter().map(|&c| u64::from(c)).sum();
        let expected = u64::from(h) * u64::from(w);
        if total != expected {
            return Err(Error::Format(format!(
                "run lengths sum to {total}, expected {expected} for {h}x{w}"
            )));
        }
        if let Some(i) = counts.iter().skip(1).position(|&c| c == 0) {
            return Err(Error::Format(format!("zero-length run at position {}", i + 1)));
        }
        Ok(RleMask { h, w, counts })
    }

    /// All-background mask.
    pub fn empty(h: u32, w: u32) -> Result<Self> {
        RleMask::new(h, w, vec![h * w])
    }

    pub fn height(&self) -> u32 {
        self.h
    }

    pub fn width(&self) -> u32 {
        self.w
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.h, self.w)
    }

    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| u64::from(c)).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.area() == 0
    }

    /// Foreground pixel intervals `[start, end)` over the flattened row-major grid.
    pub fn runs(&self) -> impl Iterator<Item = (u64, u64)> + '_ {
        let mut pos = 0u64;
        self.counts.iter().enumerate().filter_map(move |(i, &c)| {
            let start = pos;
            pos += u64::from(c);
            (i % 2 == 1).then_some((start, pos))
        })
    }

    pub fn decode(&self) -> Bitmap {
        let mut bits = vec![false; self.h as usize * self.w as usize];
        for (start, end) in self.runs() {
            bits[start as usize..end as usize].fill(true);
        }
        Bitmap {
            h: self.h,
            w: self.w,
            bits,
        }
    }

    /// Bounding box `(x0, y0, x1, y1)`, inclusive, or `None` for an empty mask.
    pub fn bbox(&self) -> Option<(u32, u32, u32, u32)> {
        let w = u64::from(self.w);
        let mut bbox: Option<(u32, u32, u32, u32)> = None;
        for (start, end) in self.runs() {
            let (y0, y1) = ((start / w) as u32, ((end - 1) / w) as u32);
            let (xs, xe) = if y0 == y1 {
                ((start % w) as u32, ((end - 1) % w) as u32)
            } else {
                (0, self.w - 1)
            };
            bbox = Some(match bbox {
                None => (xs, y0, xe, y1),
                Some((a, b, c, d)) => (a.min(xs), b.min(y0), c.max(xe), d.max(y1)),
            });
        }
        bbox
    }

    /// Centroid `(x, y)` of the foreground, in pixel coordinates.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let w = u64::from(self.w);
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0u64);
        for (start, end) in self.runs() {
            for p in start..end {
                sx += (p % w) as f64;
                sy += (p / w) as f64;
            }
            n += end - start;
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// Number of foreground pixels shared by both masks.
    pub fn intersection_area(&self, other: &RleMask) -> Result<u64> {
        self.check_dims(other)?;
        let mut a = self.runs().peekable();
        let mut b = other.runs().peekable();
        let mut inter = 0u64;
        while let (Some(&(s0, e0)), Some(&(s1, e1))) = (a.peek(), b.peek()) {
            let lo = s0.max(s1);
            let hi = e0.min(e1);
            if hi > lo {
                inter += hi - lo;
            }
            if e0 <= e1 {
                a.next();
            } else {
                b.next();
            }
        }
        Ok(inter)
    }

    /// Intersection over union. Two empty masks agree perfectly and score 1.
    pub fn iou(&self, other: &RleMask) -> Result<f64> {
        let inter = self.intersection_area(other)?;
        let union = self.area() + other.area() - inter;
        if union == 0 {
            return Ok(1.0);
        }
        Ok(inter as f64 / union as f64)
    }

    pub fn union(&self, other: &RleMask) -> Result<RleMask> {
        self.check_dims(other)?;
        let mut bits = self.decode();
        for (start, end) in other.runs() {
            bits.bits[start as usize..end as usize].fill(true);
        }
        Ok(bits.encode())
    }

    fn check_dims(&self, other: &RleMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch(format!(
                "mask {}x{} vs {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }
}

/// Dense row-major boolean grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bitmap {
    h: u32,
    w: u32,
    bits: Vec<bool>,
}

impl Bitmap {
    pub fn new(h: u32, w: u32) -> Self {
        Bitmap {
            h,
            w,
            bits: vec![false; h as usize * w as usize],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, Vec::len);
        if h == 0 || w == 0 {
            return Err(Error::Format("grid must be non-empty".into()));
        }
        if let Some(i) = rows.iter().position(|r| r.len() != w) {
            return Err(Error::Format(format!(
                "ragged grid: row {i} has {} columns, expected {w}",
                rows[i].len()
            )));
        }
        Ok(Bitmap {
            h: h as u32,
            w: w as u32,
            bits: rows.concat(),
        })
    }

    pub fn height(&self) -> u32 {
        self.h
    }

    pub fn width(&self) -> u32 {
        self.w
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.w + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[(y * self.w + x) as usize] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn to_rows(&self) -> Vec<Vec<bool>> {
        self.bits.chunks(self.w as usize).map(<[bool]>::to_vec).collect()
    }

    pub fn encode(&self) -> RleMask {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0u32;
        for &b in &self.bits {
            if b != current {
                counts.push(run);
                run = 0;
                current = b;
            }
            run += 1;
        }
        counts.push(run);
        RleMask {
            h: self.h,
            w: self.w,
            counts,
        }
    }

    /// Grows (`radius > 0`) or shrinks (`radius < 0`) the foreground with a
    /// square structuring element of half-width `|radius|`.
    pub fn morph(&self, radius: i32) -> Bitmap {
        if radius == 0 {
            return self.clone();
        }
        let r = radius.unsigned_abs() as i64;
        let grow = radius > 0;
        let (h, w) = (i64::from(self.h), i64::from(self.w));
        let mut out = Bitmap::new(self.h, self.w);
        for y in 0..h {
            for x in 0..w {
                let mut hit = !grow;
                'win: for dy in -r..=r {
                    for dx in -r..=r {
                        let (nx, ny) = (x + dx, y + dy);
                        let inside = nx >= 0 && ny >= 0 && nx < w && ny < h;
                        let v = inside && self.bits[(ny * w + nx) as usize];
                        if grow && v {
                            hit = true;
                            break 'win;
                        }
                        if !grow && !v {
                            hit = false;
                            break 'win;
                        }
                    }
                }
                out.bits[(y * w + x) as usize] = hit;
            }
        }
        out
    }
}

/// Encodes a row-major boolean grid.
pub fn rle_encode(rows: &[Vec<bool>]) -> Result<RleMask> {
    Ok(Bitmap::from_rows(rows)?.encode())
}

pub fn rle_decode(mask: &RleMask) -> Vec<Vec<bool>> {
    mask.decode().to_rows()
}

pub fn mask_area(mask: &RleMask) -> u64 {
    mask.area()
}

pub fn mask_iou(a: &RleMask, b: &RleMask) -> Result<f64> {
    a.iou(b)
}
