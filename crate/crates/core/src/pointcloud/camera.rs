use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics in pixels. Pixel `(u, v)` has its center at
/// `(u + 0.5, v + 0.5)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    /// Principal point at the image center.
    pub fn centered(width: usize, height: usize, focal: f64) -> Self {
        Self {
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.focal > 0.0 && self.focal.is_finite()) {
            return Err(Error::Config(format!("focal length must be > 0, got {}", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("image size must be non-zero".into()));
        }
        Ok(())
    }
}

/// World-to-camera transform `x_cam = R·x_world + t` plus intrinsics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ViewPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub intrinsics: Intrinsics,
}

impl ViewPose {
    /// Camera at `eye` looking at the origin. Camera axes are the rows of
    /// `R`: z toward the origin, x along `up × z`, y completing a
    /// right-handed frame.
    pub fn look_at_origin(eye: Vector3<f64>, intrinsics: Intrinsics) -> Self {
        let z = -eye.normalize();
        let mut up = Vector3::y();
        if up.cross(&z).norm() < 1e-6 {
            up = Vector3::z();
        }
        let x = up.cross(&z).normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        Self {
            rotation,
            translation: -(rotation * eye),
            intrinsics,
        }
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    pub fn to_world(&self, cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (cam - self.translation)
    }

    /// Camera-frame direction through the center of pixel `(u, v)`, scaled
    /// so that its z component is 1.
    pub fn pixel_ray(&self, u: usize, v: usize) -> Vector3<f64> {
        let k = &self.intrinsics;
        Vector3::new(
            (u as f64 + 0.5 - k.cx) / k.focal,
            (v as f64 + 0.5 - k.cy) / k.focal,
            1.0,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let r = &self.rotation;
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
        let det = r.determinant();
        if !(orth <= 1e-6 && (det - 1.0).abs() <= 1e-6) {
            return Err(Error::Config(format!(
                "rotation is not proper orthonormal (|RᵀR - I| = {orth:e}, det = {det})"
            )));
        }
        if !self.translation.iter().all(|x| x.is_finite()) {
            return Err(Error::Config("translation is not finite".into()));
        }
        Ok(())
    }
}

fn cube_corners() -> Vec<Vector3<f64>> {
    let mut dirs = Vec::with_capacity(8);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                dirs.push(Vector3::new(sx, sy, sz).normalize());
            }
        }
    }
    dirs
}

fn fibonacci_sphere(n: usize) -> Vec<Vector3<f64>> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
            let r = (1.0 - y * y).sqrt();
            let phi = golden * i as f64;
            Vector3::new(r * phi.cos(), y, r * phi.sin())
        })
        .collect()
}

/// `views` cameras on a sphere of `radius`, all looking at the origin.
/// One view sits at `(0, 0, -radius)` with identity rotation; eight views
/// sit at the cube corners; other counts follow a Fibonacci lattice.
pub fn make_fixed_poses(views: usize, radius: f64, intrinsics: Intrinsics) -> Result<Vec<ViewPose>> {
    if views == 0 {
        return Err(Error::Config("at least one view is required".into()));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!("camera radius must be > 0, got {radius}")));
    }
    intrinsics.validate()?;
    let dirs = match views {
        1 => vec![Vector3::new(0.0, 0.0, -1.0)],
        8 => cube_corners(),
        n => fibonacci_sphere(n),
    };
    Ok(dirs
        .into_iter()
        .map(|d| ViewPose::look_at_origin(d * radius, intrinsics))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k() -> Intrinsics {
        Intrinsics::centered(32, 32, 35.0)
    }

    #[test]
    fn single_view_is_identity() {
        let p = make_fixed_poses(1, 2.5, k()).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p[0].rotation - Matrix3::identity()).abs().max() < 1e-12);
        assert!((p[0].translation - Vector3::new(0.0, 0.0, 2.5)).norm() < 1e-12);
        assert!((p[0].center() - Vector3::new(0.0, 0.0, -2.5)).norm() < 1e-12);
    }

    #[test]
    fn cube_corner_views() {
        let poses = make_fixed_poses(8, 3.0, k()).unwrap();
        let mut dirs: Vec<Vector3<f64>> = poses.iter().map(|p| p.center() / 3.0).collect();
        for p in &poses {
            p.validate().unwrap();
            // optical axis hits the origin
            let o = p.to_camera(&Vector3::zeros());
            assert!(o.x.abs() < 1e-12 && o.y.abs() < 1e-12 && (o.z - 3.0).abs() < 1e-12);
        }
        for d in &mut dirs {
            for c in d.iter() {
                assert!((c.abs() - 1.0 / 3f64.sqrt()).abs() < 1e-12);
            }
        }
        for i in 0..8 {
            for j in 0..i {
                assert!((dirs[i] - dirs[j]).norm() > 0.5);
            }
        }
    }

    #[test]
    fn lattice_views_are_proper() {
        for v in [2, 3, 5, 13, 40] {
            let poses = make_fixed_poses(v, 1.5, k()).unwrap();
            assert_eq!(poses.len(), v);
            for p in &poses {
                p.validate().unwrap();
                assert!((p.center().norm() - 1.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bad_arguments() {
        assert!(make_fixed_poses(0, 1.0, k()).is_err());
        assert!(make_fixed_poses(8, 0.0, k()).is_err());
        assert!(make_fixed_poses(8, 1.0, Intrinsics::centered(8, 8, 0.0)).is_err());
    }
}
