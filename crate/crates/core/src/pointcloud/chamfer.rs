use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pointcloud::fuse::PointCloud;

#[inline]
fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn widen(p: &[f32; 3]) -> [f64; 3] {
    p.map(f64::from)
}

/// Static 3-d tree stored as a permuted point array: the median of every
/// subrange is its root, split axis cycling x, y, z by depth.
pub struct KdTree {
    points: Vec<[f64; 3]>,
}

impl KdTree {
    pub fn build(cloud: &PointCloud) -> Self {
        let mut points: Vec<[f64; 3]> = cloud.points.iter().map(widen).collect();
        Self::arrange(&mut points, 0);
        Self { points }
    }

    fn arrange(pts: &mut [[f64; 3]], axis: usize) {
        if pts.len() <= 1 {
            return;
        }
        let mid = pts.len() / 2;
        pts.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
        let (left, rest) = pts.split_at_mut(mid);
        Self::arrange(left, (axis + 1) % 3);
        Self::arrange(&mut rest[1..], (axis + 1) % 3);
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Squared distance to the nearest stored point, or infinity if empty.
    pub fn nearest_dist2(&self, q: &[f64; 3]) -> f64 {
        let mut best = f64::INFINITY;
        Self::search(&self.points, 0, q, &mut best);
        best
    }

    fn search(pts: &[[f64; 3]], axis: usize, q: &[f64; 3], best: &mut f64) {
        if pts.is_empty() {
            return;
        }
        let mid = pts.len() / 2;
        let p = &pts[mid];
        let d = dist2(p, q);
        if d < *best {
            *best = d;
        }
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            (&pts[..mid], &pts[mid + 1..])
        } else {
            (&pts[mid + 1..], &pts[..mid])
        };
        let next = (axis + 1) % 3;
        Self::search(near, next, q, best);
        if diff * diff < *best {
            Self::search(far, next, q, best);
        }
    }
}

/// Mean Euclidean distance from each point of `a` to its nearest point in `b`.
pub fn mean_nearest(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("chamfer distance of an empty point cloud".into()));
    }
    let tree = KdTree::build(b);
    let dists: Vec<f64> = a
        .points
        .par_iter()
        .map(|p| tree.nearest_dist2(&widen(p)).sqrt())
        .collect();
    Ok(dists.iter().sum::<f64>() / a.len() as f64)
}

/// Symmetric chamfer distance: `mean_nearest(a, b) + mean_nearest(b, a)`.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    Ok(mean_nearest(a, b)? + mean_nearest(b, a)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pc(points: &[[f32; 3]]) -> PointCloud {
        PointCloud::new(points.to_vec())
    }

    #[test]
    fn analytic_pair() {
        let a = pc(&[[0.0, 0.0, 0.0]]);
        let b = pc(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn empty_rejected() {
        let a = pc(&[[0.0, 0.0, 0.0]]);
        assert!(chamfer(&a, &PointCloud::default()).is_err());
        assert!(chamfer(&PointCloud::default(), &a).is_err());
    }

    #[test]
    fn duplicates_and_ties() {
        let a = pc(&[[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0]]);
        let b = pc(&[[0.5, 0.0, 0.0]]);
        assert_eq!(mean_nearest(&a, &b).unwrap(), 0.5);
        assert_eq!(mean_nearest(&b, &a).unwrap(), 0.5);
    }

    #[test]
    fn tree_on_grid() {
        let mut pts = Vec::new();
        for i in 0..10 {
            for j in 0..10 {
                for k in 0..10 {
                    pts.push([i as f32, j as f32, k as f32]);
                }
            }
        }
        let tree = KdTree::build(&pc(&pts));
        assert_eq!(tree.len(), 1000);
        assert_eq!(tree.nearest_dist2(&[3.2, 4.9, 0.0]), {
            let d: f64 = 0.2f64.powi(2) + 0.1f64.powi(2);
            let e = dist2(&[3.0, 5.0, 0.0], &[3.2, 4.9, 0.0]);
            assert!((d - e).abs() < 1e-12);
            e
        });
    }
}
