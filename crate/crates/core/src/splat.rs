//! Nearest-pixel z-buffer shared by mask warping, latent rendering and the
//! consistency metrics.
//!
//! Resolution is two-pass so the result does not depend on candidate order:
//! the first pass finds each pixel's minimum depth; among candidates within
//! [`DEPTH_EPS`](crate::geometry::DEPTH_EPS) of it, the one whose projection
//! lies closest to the pixel centre wins, then the lowest key.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::DEPTH_EPS;

/// One point landing on one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatCandidate {
    /// `(row, col)`.
    pub pixel: (usize, usize),
    pub depth: f64,
    /// Squared sub-pixel distance to the pixel centre.
    pub center_dist2: f64,
    /// Stable identity of the splatted point (e.g. its source pixel index).
    pub key: u64,
}

/// Index into `candidates` of the winner for each pixel (row-major).
pub fn resolve_zbuffer(width: usize, height: usize, candidates: &[SplatCandidate]) -> Vec<Option<usize>> {
    let mut min_depth = vec![f64::INFINITY; width * height];
    for c in candidates {
        let p = c.pixel.0 * width + c.pixel.1;
        if c.depth < min_depth[p] {
            min_depth[p] = c.depth;
        }
    }
    let mut winner: Vec<Option<usize>> = vec![None; width * height];
    for (i, c) in candidates.iter().enumerate() {
        let p = c.pixel.0 * width + c.pixel.1;
        if c.depth > min_depth[p] + DEPTH_EPS {
            continue;
        }
        let better = match winner[p] {
            None => true,
            Some(j) => {
                let w = &candidates[j];
                (c.center_dist2, c.key) < (w.center_dist2, w.key)
            }
        };
        if better {
            winner[p] = Some(i);
        }
    }
    winner
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(depth: f64, dist: f64, key: u64) -> SplatCandidate {
        SplatCandidate {
            pixel: (0, 0),
            depth,
            center_dist2: dist,
            key,
        }
    }

    #[test]
    fn nearer_point_wins() {
        let c = [cand(2.0, 0.0, 0), cand(1.0, 0.2, 1)];
        assert_eq!(resolve_zbuffer(1, 1, &c), vec![Some(1)]);
    }

    #[test]
    fn ties_prefer_centre_then_key() {
        let c = [cand(1.0, 0.1, 5), cand(1.00005, 0.0, 9), cand(1.0, 0.0, 7)];
        assert_eq!(resolve_zbuffer(1, 1, &c), vec![Some(2)]);
    }

    #[test]
    fn order_does_not_matter() {
        let c = [cand(1.0, 0.1, 5), cand(1.00005, 0.1, 3), cand(1.00015, 0.0, 1)];
        let mut r = c;
        r.reverse();
        let a = resolve_zbuffer(1, 1, &c)[0].map(|i| c[i].key);
        let b = resolve_zbuffer(1, 1, &r)[0].map(|i| r[i].key);
        assert_eq!(a, b);
        assert_eq!(a, Some(3));
    }
}
