//! Pinhole camera. Pose convention: the stored matrix is camera-to-world,
//! right-handed, with the camera looking down its local -z axis and +y up.
//! Pixel (0, 0) is the top-left corner; pixel centers sit at half-integer
//! coordinates.

use nalgebra::{Matrix3, Matrix4, Vector3};

use crate::error::{Error, Result};

pub const ROTATION_TOL: f32 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub camera_to_world: Matrix4<f32>,
    pub fx: f32,
    pub fy: f32,
    pub cx: f32,
    pub cy: f32,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    pub fn new(
        camera_to_world: Matrix4<f32>,
        fx: f32,
        fy: f32,
        cx: f32,
        cy: f32,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let cam = Camera {
            camera_to_world,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` aimed at `target`. `up` picks the roll.
    pub fn look_at(
        eye: Vector3<f32>,
        target: Vector3<f32>,
        up: Vector3<f32>,
        fx: f32,
        fy: f32,
        width: u32,
        height: u32,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let side = forward.cross(&up).normalize();
        let cam_up = side.cross(&forward);
        let mut m = Matrix4::identity();
        // Columns are the camera axes in world space; looking down -z means
        // the third column is -forward.
        for r in 0..3 {
            m[(r, 0)] = side[r];
            m[(r, 1)] = cam_up[r];
            m[(r, 2)] = -forward[r];
            m[(r, 3)] = eye[r];
        }
        Camera::new(
            m,
            fx,
            fy,
            width as f32 * 0.5,
            height as f32 * 0.5,
            width,
            height,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.camera_to_world;
        let bottom = [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::validation(format!(
                "camera matrix bottom row must be [0, 0, 0, 1], got {bottom:?}"
            )));
        }
        let r = self.rotation();
        let orth = r.transpose() * r - Matrix3::identity();
        if orth.norm() > ROTATION_TOL {
            return Err(Error::validation(format!(
                "camera rotation is not orthonormal (|R^T R - I| = {:.2e})",
                orth.norm()
            )));
        }
        if r.determinant() < 0.0 {
            return Err(Error::validation(
                "camera rotation is left-handed (negative determinant)".to_string(),
            ));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::validation(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::validation("image dimensions must be nonzero".to_string()));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f32)
            || !(self.cy > 0.0 && self.cy < self.height as f32)
        {
            return Err(Error::validation(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    /// Camera-to-world rotation block.
    pub fn rotation(&self) -> Matrix3<f32> {
        self.camera_to_world.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn origin(&self) -> Vector3<f32> {
        self.camera_to_world.fixed_view::<3, 1>(0, 3).into_owned()
    }

    /// World point in camera coordinates. Visible points have negative z;
    /// their depth is -z.
    pub fn world_to_camera(&self, p: &Vector3<f32>) -> Vector3<f32> {
        self.rotation().transpose() * (p - self.origin())
    }

    /// Camera-space point back to world coordinates.
    pub fn camera_to_world_point(&self, p: &Vector3<f32>) -> Vector3<f32> {
        self.rotation() * p + self.origin()
    }

    /// World point on the ray through image coordinates (u, v) at the
    /// given positive depth. Inverse of the projection used by the
    /// rasterizer, including its y flip.
    pub fn unproject_pixel(&self, u: f32, v: f32, depth: f32) -> Vector3<f32> {
        let x = (u - self.cx) * depth / self.fx;
        let y = (self.cy - v) * depth / self.fy;
        self.camera_to_world_point(&Vector3::new(x, y, -depth))
    }

    /// Forward axis in world space (the direction the camera looks).
    pub fn forward(&self) -> Vector3<f32> {
        -self.rotation().column(2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_pose_looks_down_negative_z() {
        let cam = Camera::new(Matrix4::identity(), 50.0, 50.0, 16.0, 16.0, 32, 32).unwrap();
        assert_eq!(cam.forward(), Vector3::new(0.0, 0.0, -1.0));
        // A point in front of the camera has positive depth -z.
        let p = cam.world_to_camera(&Vector3::new(0.0, 0.0, -2.0));
        assert!((p.z + 2.0).abs() < 1e-6);
    }

    #[test]
    fn look_at_faces_the_target() {
        let eye = Vector3::new(3.0, 1.0, 2.0);
        let target = Vector3::new(0.0, 0.0, 0.0);
        let cam = Camera::look_at(eye, target, Vector3::y(), 40.0, 40.0, 64, 64).unwrap();
        let fwd = cam.forward();
        let expected = (target - eye).normalize();
        assert!((fwd - expected).norm() < 1e-5);
        // Target sits on the optical axis with depth equal to the distance.
        let t = cam.world_to_camera(&target);
        assert!(t.x.abs() < 1e-5 && t.y.abs() < 1e-5);
        assert!((-t.z - eye.norm()) < 1e-4);
    }

    #[test]
    fn unproject_inverts_projection() {
        let cam = Camera::look_at(
            Vector3::new(2.0, -1.0, 4.0),
            Vector3::zeros(),
            Vector3::y(),
            45.0,
            45.0,
            64,
            48,
        )
        .unwrap();
        let p = Vector3::new(0.2, 0.3, -0.1);
        let c = cam.world_to_camera(&p);
        let d = -c.z;
        let u = cam.fx * c.x / d + cam.cx;
        let v = cam.cy - cam.fy * c.y / d;
        let back = cam.unproject_pixel(u, v, d);
        assert!((back - p).norm() < 1e-5);
    }

    #[test]
    fn world_camera_roundtrip() {
        let cam = Camera::look_at(
            Vector3::new(1.0, 2.0, 3.0),
            Vector3::zeros(),
            Vector3::y(),
            30.0,
            30.0,
            40,
            30,
        )
        .unwrap();
        let p = Vector3::new(0.3, -0.4, 0.9);
        let back = cam.camera_to_world_point(&cam.world_to_camera(&p));
        assert!((back - p).norm() < 1e-5);
    }

    #[test]
    fn rejects_sheared_rotation() {
        let mut m = Matrix4::identity();
        m[(0, 1)] = 0.1;
        assert!(Camera::new(m, 10.0, 10.0, 8.0, 8.0, 16, 16).is_err());
    }

    #[test]
    fn rejects_bad_intrinsics() {
        assert!(Camera::new(Matrix4::identity(), -1.0, 10.0, 8.0, 8.0, 16, 16).is_err());
        assert!(Camera::new(Matrix4::identity(), 10.0, 10.0, 20.0, 8.0, 16, 16).is_err());
    }
}
