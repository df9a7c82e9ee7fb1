use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pointcloud::camera::ViewPose;

/// One view: a camera-frame z map and the pixels that emit points, both
/// row-major `height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthView {
    pub pose: ViewPose,
    pub depth: Vec<f32>,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMapSet {
    pub views: Vec<DepthView>,
}

impl DepthMapSet {
    pub fn new(views: Vec<DepthView>) -> Result<Self> {
        let set = Self { views };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Data("depth map set has no views".into()));
        }
        for (i, v) in self.views.iter().enumerate() {
            v.pose.validate()?;
            let n = v.pose.intrinsics.pixels();
            if v.depth.len() != n || v.mask.len() != n {
                return Err(Error::Data(format!(
                    "view {i}: expected {n} pixels, got {} depths and {} mask entries",
                    v.depth.len(),
                    v.mask.len()
                )));
            }
        }
        Ok(())
    }

    pub fn masked_count(&self) -> usize {
        self.views.iter().map(|v| v.mask.iter().filter(|&&m| m).count()).sum()
    }
}

/// World-frame points.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f32; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f32; 3]>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points.iter().flatten().all(|c| c.is_finite())
    }
}

fn fuse_view(index: usize, view: &DepthView) -> Result<Vec<[f32; 3]>> {
    let k = &view.pose.intrinsics;
    let mut out = Vec::new();
    for v in 0..k.height {
        for u in 0..k.width {
            let p = v * k.width + u;
            if !view.mask[p] {
                continue;
            }
            let d = f64::from(view.depth[p]);
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Data(format!(
                    "view {index}, pixel (u={u}, v={v}): masked depth {d} is not positive"
                )));
            }
            let cam = view.pose.pixel_ray(u, v) * d;
            let w: Vector3<f64> = view.pose.to_world(&cam);
            out.push([w.x as f32, w.y as f32, w.z as f32]);
        }
    }
    Ok(out)
}

/// Back-projects every masked pixel of every view. Output order is view
/// index, then row-major pixel order.
pub fn fuse(depths: &DepthMapSet) -> Result<PointCloud> {
    depths.validate()?;
    let per_view: Vec<Vec<[f32; 3]>> = depths
        .views
        .par_iter()
        .enumerate()
        .map(|(i, v)| fuse_view(i, v))
        .collect::<Result<_>>()?;
    Ok(PointCloud::new(per_view.concat()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::camera::{make_fixed_poses, Intrinsics};

    fn identity_view(k: Intrinsics, depth: Vec<f32>, mask: Vec<bool>) -> DepthView {
        let mut pose = make_fixed_poses(1, 1.0, k).unwrap().remove(0);
        pose.translation = Vector3::zeros();
        DepthView { pose, depth, mask }
    }

    #[test]
    fn principal_point_pixel() {
        // 3x3 image, principal point at the center of pixel (1, 1)
        let k = Intrinsics::centered(3, 3, 10.0);
        let mut mask = vec![false; 9];
        mask[4] = true;
        let set = DepthMapSet::new(vec![identity_view(k, vec![2.5; 9], mask)]).unwrap();
        assert_eq!(fuse(&set).unwrap().points, vec![[0.0, 0.0, 2.5]]);
    }

    #[test]
    fn empty_masks_give_empty_cloud() {
        let k = Intrinsics::centered(4, 4, 5.0);
        let set = DepthMapSet::new(vec![identity_view(k, vec![1.0; 16], vec![false; 16])]).unwrap();
        assert!(fuse(&set).unwrap().is_empty());
    }

    #[test]
    fn constant_plane() {
        let k = Intrinsics::centered(4, 2, 2.0);
        let set = DepthMapSet::new(vec![identity_view(k, vec![1.0; 8], vec![true; 8])]).unwrap();
        let pc = fuse(&set).unwrap();
        assert_eq!(pc.len(), 8);
        assert_eq!(pc.points[0], [-0.75, -0.25, 1.0]);
        assert_eq!(pc.points[7], [0.75, 0.25, 1.0]);
        assert!(pc.points.iter().all(|p| p[2] == 1.0));
    }

    #[test]
    fn non_positive_depth_names_view_and_pixel() {
        let k = Intrinsics::centered(2, 2, 1.0);
        let ok = identity_view(k, vec![1.0; 4], vec![true; 4]);
        let mut bad = ok.clone();
        bad.depth[3] = 0.0;
        let err = fuse(&DepthMapSet::new(vec![ok, bad]).unwrap()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("view 1") && msg.contains("u=1, v=1"), "{msg}");
    }

    #[test]
    fn unmasked_garbage_is_ignored() {
        let k = Intrinsics::centered(2, 1, 1.0);
        let set = DepthMapSet::new(vec![identity_view(k, vec![f32::NAN, 1.0], vec![false, true])]).unwrap();
        assert_eq!(fuse(&set).unwrap().len(), 1);
    }

    #[test]
    fn size_mismatch_rejected() {
        let k = Intrinsics::centered(2, 2, 1.0);
        assert!(DepthMapSet::new(vec![identity_view(k, vec![1.0; 3], vec![true; 4])]).is_err());
        assert!(DepthMapSet::new(vec![]).is_err());
    }
}
