//! Offscreen software rasterizer: flat-shaded meshes, screen-space particle
//! discs, a table quad, and the gripper fingers, z-buffered into an 8-bit
//! RGB frame. No GPU dependency; identical inputs give identical pixels.

use crate::math::{Pose, Vec3};
use crate::mesh::box_mesh;
use crate::scene::SceneDescription;
use crate::world::StateSummary;
use image::RgbImage;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("io error writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: [f64; 3],
    pub look_at: [f64; 3],
    pub up: [f64; 3],
    /// Vertical field of view in degrees, (10, 120).
    pub fov_deg: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            position: [0.45, -0.50, 0.40],
            look_at: [0.0, 0.0, 0.05],
            up: [0.0, 0.0, 1.0],
            fov_deg: 42.0,
            width: 512,
            height: 512,
        }
    }
}

const BACKGROUND: [u8; 3] = [236, 240, 243];
const TABLE_COLOR: [u8; 3] = [205, 205, 200];
const GRIPPER_COLOR: [u8; 3] = [60, 60, 70];
const LIGHT_DIR: [f64; 3] = [0.35, 0.25, 0.9];

struct Raster {
    width: usize,
    height: usize,
    color: Vec<[u8; 3]>,
    depth: Vec<f64>,
    // Camera basis.
    eye: Vec3,
    cx: Vec3,
    cy: Vec3,
    cz: Vec3,
    focal: f64,
    light: Vec3,
}

impl Raster {
    fn new(camera: &Camera) -> Raster {
        assert!(
            camera.fov_deg > 10.0 && camera.fov_deg < 120.0,
            "camera fov out of range"
        );
        assert!(camera.width >= 64 && camera.height >= 64, "camera resolution too small");
        let eye = Vec3::from(camera.position);
        let look = Vec3::from(camera.look_at);
        let up = Vec3::from(camera.up);
        let cz = (eye - look).normalize();
        let cx = up.cross(&cz).normalize();
        let cy = cz.cross(&cx);
        let focal = 1.0 / (camera.fov_deg.to_radians() / 2.0).tan();
        Raster {
            width: camera.width as usize,
            height: camera.height as usize,
            color: vec![BACKGROUND; (camera.width * camera.height) as usize],
            depth: vec![f64::INFINITY; (camera.width * camera.height) as usize],
            eye,
            cx,
            cy,
            cz,
            focal,
            light: Vec3::from(LIGHT_DIR).normalize(),
        }
    }

    /// Project to (screen x, screen y, view depth). Depth is positive in
    /// front of the camera.
    fn project(&self, p: &Vec3) -> (f64, f64, f64) {
        let rel = p - self.eye;
        let x = rel.dot(&self.cx);
        let y = rel.dot(&self.cy);
        let z = -rel.dot(&self.cz);
        let aspect = self.width as f64 / self.height as f64;
        let ndc_x = self.focal * x / (z * aspect);
        let ndc_y = self.focal * y / z;
        (
            (ndc_x + 1.0) * 0.5 * self.width as f64,
            (1.0 - ndc_y) * 0.5 * self.height as f64,
            z,
        )
    }

    fn shade(&self, normal: &Vec3, base: [u8; 3]) -> [u8; 3] {
        let mut n = *normal;
        if n.dot(&self.light) < 0.0 {
            n = -n;
        }
        let diffuse = 0.35 + 0.65 * n.dot(&self.light).max(0.0);
        [
            (base[0] as f64 * diffuse) as u8,
            (base[1] as f64 * diffuse) as u8,
            (base[2] as f64 * diffuse) as u8,
        ]
    }

    fn triangle(&mut self, a: &Vec3, b: &Vec3, c: &Vec3, base: [u8; 3]) {
        let normal = (b - a).cross(&(c - a));
        let norm = normal.norm();
        if norm < 1e-14 {
            return;
        }
        let color = self.shade(&(normal / norm), base);

        let pa = self.project(a);
        let pb = self.project(b);
        let pc = self.project(c);
        const NEAR: f64 = 1e-3;
        if pa.2 <= NEAR || pb.2 <= NEAR || pc.2 <= NEAR {
            return;
        }
        let min_x = pa.0.min(pb.0).min(pc.0).floor().max(0.0) as usize;
        let max_x = (pa.0.max(pb.0).max(pc.0).ceil() as usize).min(self.width.saturating_sub(1));
        let min_y = pa.1.min(pb.1).min(pc.1).floor().max(0.0) as usize;
        let max_y = (pa.1.max(pb.1).max(pc.1).ceil() as usize).min(self.height.saturating_sub(1));
        if min_x > max_x || min_y > max_y {
            return;
        }

        let edge = |p: (f64, f64), q: (f64, f64), r: (f64, f64)| {
            (q.0 - p.0) * (r.1 - p.1) - (q.1 - p.1) * (r.0 - p.0)
        };
        let area = edge((pa.0, pa.1), (pb.0, pb.1), (pc.0, pc.1));
        if area.abs() < 1e-12 {
            return;
        }
        // Inverse depth interpolates affinely in screen space.
        let (ia, ib, ic) = (1.0 / pa.2, 1.0 / pb.2, 1.0 / pc.2);
        for py in min_y..=max_y {
            for px in min_x..=max_x {
                let p = (px as f64 + 0.5, py as f64 + 0.5);
                let w0 = edge((pb.0, pb.1), (pc.0, pc.1), p) / area;
                let w1 = edge((pc.0, pc.1), (pa.0, pa.1), p) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let inv_z = w0 * ia + w1 * ib + w2 * ic;
                let z = 1.0 / inv_z;
                let idx = py * self.width + px;
                if z < self.depth[idx] {
                    self.depth[idx] = z;
                    self.color[idx] = color;
                }
            }
        }
    }

    fn mesh(&mut self, mesh: &crate::mesh::TriMesh, pose: &Pose, base: [u8; 3]) {
        for t in &mesh.triangles {
            let a = pose.transform_point(&mesh.vertex(t[0]));
            let b = pose.transform_point(&mesh.vertex(t[1]));
            let c = pose.transform_point(&mesh.vertex(t[2]));
            self.triangle(&a, &b, &c, base);
        }
    }

    fn disc(&mut self, center: &Vec3, world_radius: f64, base: [u8; 3]) {
        let (sx, sy, z) = self.project(center);
        if z <= 1e-3 {
            return;
        }
        let radius_px = (world_radius * self.focal * self.height as f64 * 0.5 / z).max(1.0);
        let color = self.shade(&Vec3::z(), base);
        let min_x = (sx - radius_px).floor().max(0.0) as usize;
        let max_x = ((sx + radius_px).ceil() as usize).min(self.width.saturating_sub(1));
        let min_y = (sy - radius_px).floor().max(0.0) as usize;
        let max_y = ((sy + radius_px).ceil() as usize).min(self.height.saturating_sub(1));
        for py in min_y..=max_y {
            for px in min_x..=max_x {
                let dx = px as f64 + 0.5 - sx;
                let dy = py as f64 + 0.5 - sy;
                if dx * dx + dy * dy > radius_px * radius_px {
                    continue;
                }
                let idx = py * self.width + px;
                if z < self.depth[idx] {
                    self.depth[idx] = z;
                    self.color[idx] = color;
                }
            }
        }
    }

    fn into_image(self) -> RgbImage {
        let mut img = RgbImage::new(self.width as u32, self.height as u32);
        for (i, px) in self.color.iter().enumerate() {
            let x = (i % self.width) as u32;
            let y = (i / self.width) as u32;
            img.put_pixel(x, y, image::Rgb(*px));
        }
        img
    }
}

/// Render one state summary against the scene's static assets. Pure with
/// respect to inputs; never mutates simulator state.
pub fn render_state(state: &StateSummary, scene: &SceneDescription, camera: &Camera) -> RgbImage {
    let mut raster = Raster::new(camera);

    // Table quad spanning the workspace footprint.
    let ws = scene.workspace_bounds;
    let z = scene.table_height;
    let corners = [
        Vec3::new(ws.min[0] - 0.05, ws.min[1] - 0.05, z),
        Vec3::new(ws.max[0] + 0.05, ws.min[1] - 0.05, z),
        Vec3::new(ws.max[0] + 0.05, ws.max[1] + 0.05, z),
        Vec3::new(ws.min[0] - 0.05, ws.max[1] + 0.05, z),
    ];
    raster.triangle(&corners[0], &corners[1], &corners[2], TABLE_COLOR);
    raster.triangle(&corners[0], &corners[2], &corners[3], TABLE_COLOR);

    for (snap, spec) in state.rigid.iter().zip(&scene.rigid_objects) {
        raster.mesh(&spec.mesh, &snap.pose, spec.color);
    }
    for (snap, spec) in state.deformable.iter().zip(&scene.deformable_objects) {
        let radius = spec.particle_spacing * 0.6;
        for p in &snap.particles {
            raster.disc(&Vec3::from(*p), radius, spec.color);
        }
    }

    // Gripper fingers.
    let gk = crate::gripper::GripperKinematics::new(&scene.gripper);
    let finger_mesh = box_mesh(gk.finger_half_extents);
    for side in 0..2 {
        let pose = gk.finger_pose(&state.gripper_pose, state.gripper_width, side);
        raster.mesh(&finger_mesh, &pose, GRIPPER_COLOR);
    }

    raster.into_image()
}

/// Write a frame as 8-bit RGB PNG via write-temp-rename, so an existing file
/// is replaced atomically.
pub fn save_frame(image: &RgbImage, path: &Path) -> Result<(), RenderError> {
    let io_err = |source: std::io::Error| RenderError::Io {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("png.tmp");
    let mut bytes: Vec<u8> = Vec::new();
    image
        .write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| io_err(std::io::Error::other(e)))?;
    std::fs::write(&tmp, &bytes).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)?;
    Ok(())
}

/// Canonical frame filename within a trace directory.
pub fn frame_filename(n: usize) -> String {
    format!("fig_{n}.png")
}
