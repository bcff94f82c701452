//! Material Point Method solver for soft elastoplastic objects: APIC
//! transfers over quadratic B-splines, fixed corotated elasticity, and a
//! per-material plastic return mapping (none for jelly/foam, von Mises for
//! metal/plasticine, Drucker-Prager for sand). The table is a sticky
//! boundary; gripper fingers are moving box boundaries with zero relative
//! slip.

use crate::gripper::FingerBody;
use crate::math::{svd3, Aabb, Mat3, Vec3};
use crate::scene::{DeformableObjectSpec, MaterialClass};
use thiserror::Error;

/// Control ticks are substepped to satisfy the CFL guard; parameter sets
/// needing more substeps than this are rejected at scene validation.
pub const MAX_SUBSTEPS_PER_TICK: usize = 64;
/// CFL safety factor on cell traversal per substep.
pub const CFL_FACTOR: f64 = 0.4;

#[derive(Debug, Error)]
pub enum MpmError {
    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),
    #[error("CFL violation: required dt {required:.2e} below minimum supported")]
    CflViolation { required: f64 },
    #[error("grid cell size {cell_size} exceeds 2x particle spacing {spacing} (under-resolved)")]
    UnderResolved { cell_size: f64, spacing: f64 },
}

#[derive(Debug, Clone)]
pub struct MPMState {
    pub positions: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    pub deformation_gradient: Vec<Mat3>,
    /// APIC affine velocity matrix C per particle.
    pub affine_velocity: Vec<Mat3>,
    /// Accumulated plastic flow per particle.
    pub plastic_multiplier: Vec<f64>,
}

impl MPMState {
    pub fn at_rest(positions: Vec<Vec3>) -> Self {
        let n = positions.len();
        MPMState {
            positions,
            velocities: vec![Vec3::zeros(); n],
            deformation_gradient: vec![Mat3::identity(); n],
            affine_velocity: vec![Mat3::zeros(); n],
            plastic_multiplier: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn centroid(&self) -> Vec3 {
        self.positions.iter().sum::<Vec3>() / self.positions.len().max(1) as f64
    }
}

/// Background grid scratch: covers the workspace bounds plus a 2-cell margin.
#[derive(Debug, Clone)]
pub struct MPMGrid {
    pub origin: Vec3,
    pub cell_size: f64,
    pub dims: [usize; 3],
    pub mass: Vec<f64>,
    pub momentum: Vec<Vec3>,
}

impl MPMGrid {
    pub fn new(
        workspace: &Aabb,
        cell_size: f64,
        particle_spacing: f64,
        table_height: f64,
    ) -> Result<Self, MpmError> {
        if cell_size > 2.0 * particle_spacing * (1.0 + 1e-9) {
            return Err(MpmError::UnderResolved {
                cell_size,
                spacing: particle_spacing,
            });
        }
        let mut origin = workspace.min_v() - Vec3::repeat(2.0 * cell_size);
        // Align the vertical lattice with the table plane so the sticky
        // boundary sits exactly on a node layer.
        let table_cells = ((table_height - origin.z) / cell_size).ceil();
        origin.z = table_height - table_cells * cell_size;
        let extent = workspace.max_v() + Vec3::repeat(2.0 * cell_size) - origin;
        let dims = [
            (extent.x / cell_size).ceil() as usize + 1,
            (extent.y / cell_size).ceil() as usize + 1,
            (extent.z / cell_size).ceil() as usize + 1,
        ];
        let n = dims[0] * dims[1] * dims[2];
        Ok(MPMGrid {
            origin,
            cell_size,
            dims,
            mass: vec![0.0; n],
            momentum: vec![Vec3::zeros(); n],
        })
    }

    #[inline]
    fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    fn clear(&mut self) {
        self.mass.fill(0.0);
        self.momentum.fill(Vec3::zeros());
    }

    fn node_position(&self, ix: usize, iy: usize, iz: usize) -> Vec3 {
        self.origin + Vec3::new(ix as f64, iy as f64, iz as f64) * self.cell_size
    }
}

/// Substep count needed for one 2 ms control tick under the CFL guard,
/// using the default cell size of twice the particle spacing.
pub fn required_substeps(spec: &DeformableObjectSpec) -> usize {
    let cell = 2.0 * spec.particle_spacing;
    let sound_speed = (spec.youngs_modulus / spec.density).sqrt();
    let dt_cfl = CFL_FACTOR * cell / sound_speed;
    (crate::world::CONTROL_DT / dt_cfl).ceil().max(1.0) as usize
}

#[derive(Debug, Clone, Copy)]
enum Plasticity {
    None,
    VonMises { yield_stress: f64 },
    DruckerPrager { friction_angle_rad: f64 },
}

/// Immutable solver parameters for one MPM object.
pub struct MpmSolver {
    pub particle_mass: f64,
    pub particle_volume: f64,
    pub mu: f64,
    pub lambda: f64,
    pub gravity: Vec3,
    pub table_height: f64,
    pub substeps_per_tick: usize,
    plasticity: Plasticity,
}

impl MpmSolver {
    pub fn from_spec(
        spec: &DeformableObjectSpec,
        gravity: Vec3,
        table_height: f64,
    ) -> Result<Self, MpmError> {
        let substeps = required_substeps(spec);
        if substeps > MAX_SUBSTEPS_PER_TICK {
            return Err(MpmError::CflViolation {
                required: crate::world::CONTROL_DT / substeps as f64,
            });
        }
        let e = spec.youngs_modulus;
        let nu = spec.poisson_ratio;
        let mu = e / (2.0 * (1.0 + nu));
        let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
        let volume = spec.particle_spacing.powi(3);
        let plasticity = match spec.material_class {
            MaterialClass::Jelly | MaterialClass::Foam => Plasticity::None,
            MaterialClass::Metal | MaterialClass::Plasticine => Plasticity::VonMises {
                yield_stress: spec.yield_stress.expect("validated at load"),
            },
            MaterialClass::Sand => Plasticity::DruckerPrager {
                friction_angle_rad: spec.friction_angle.expect("validated at load").to_radians(),
            },
        };
        Ok(MpmSolver {
            particle_mass: spec.density * volume,
            particle_volume: volume,
            mu,
            lambda,
            gravity,
            table_height,
            substeps_per_tick: substeps,
            plasticity,
        })
    }

    pub fn total_mass(&self, state: &MPMState) -> f64 {
        self.particle_mass * state.len() as f64
    }

    /// One APIC transfer cycle of length `dt` (which must satisfy the CFL
    /// guard used at construction).
    pub fn substep(
        &self,
        state: &mut MPMState,
        grid: &mut MPMGrid,
        fingers: &[FingerBody],
        dt: f64,
    ) -> Result<(), MpmError> {
        let h = grid.cell_size;
        let inv_h = 1.0 / h;
        let d_inv = 4.0 * inv_h * inv_h;
        grid.clear();

        // Particle -> grid (momentum and fused stress force).
        for p in 0..state.len() {
            let x = state.positions[p];
            let f = state.deformation_gradient[p];
            let (base, wx, wy, wz) = spline_weights(&x, &grid.origin, inv_h);

            let stress = {
                let r = {
                    let (u, _s, v) = svd3(&f);
                    u * v.transpose()
                };
                let j = f.determinant();
                let pf_t = (f - r) * f.transpose() * (2.0 * self.mu)
                    + Mat3::identity() * (self.lambda * (j - 1.0) * j);
                pf_t * (-dt * self.particle_volume * d_inv)
            };
            let affine = stress + state.affine_velocity[p] * self.particle_mass;
            let mv = state.velocities[p] * self.particle_mass;

            for (di, &wi) in wx.iter().enumerate() {
                for (dj, &wj) in wy.iter().enumerate() {
                    for (dk, &wk) in wz.iter().enumerate() {
                        let w = wi * wj * wk;
                        let ix = (base[0] + di as i64) as usize;
                        let iy = (base[1] + dj as i64) as usize;
                        let iz = (base[2] + dk as i64) as usize;
                        let node = grid.node_position(ix, iy, iz);
                        let idx = grid.index(ix, iy, iz);
                        grid.mass[idx] += w * self.particle_mass;
                        grid.momentum[idx] += w * (mv + affine * (node - x));
                    }
                }
            }
        }

        // Grid update: momentum -> velocity, gravity, boundary conditions.
        let [nx, ny, nz] = grid.dims;
        for ix in 0..nx {
            for iy in 0..ny {
                for iz in 0..nz {
                    let idx = grid.index(ix, iy, iz);
                    if grid.mass[idx] <= 0.0 {
                        continue;
                    }
                    let mut v = grid.momentum[idx] / grid.mass[idx] + self.gravity * dt;
                    let node = grid.node_position(ix, iy, iz);

                    // Sticky table and sticky domain walls.
                    if node.z <= self.table_height + 1e-12
                        || ix < 2
                        || iy < 2
                        || iz < 2
                        || ix >= nx - 2
                        || iy >= ny - 2
                        || iz >= nz - 2
                    {
                        v = Vec3::zeros();
                    }

                    // Moving finger boxes: zero relative slip.
                    for finger in fingers {
                        let local = finger.pose.inverse_transform_point(&node);
                        let he = finger.half_extents + Vec3::repeat(0.5 * h);
                        if local.x.abs() <= he.x && local.y.abs() <= he.y && local.z.abs() <= he.z {
                            v = crate::gripper::point_velocity(
                                &finger.linear_velocity,
                                &finger.angular_velocity,
                                &finger.pose.translation(),
                                &node,
                            );
                        }
                    }
                    grid.momentum[idx] = v; // store velocity in place
                }
            }
        }

        // Grid -> particle with deformation-gradient update and plasticity.
        for p in 0..state.len() {
            let x = state.positions[p];
            let (base, wx, wy, wz) = spline_weights(&x, &grid.origin, inv_h);
            let mut v_new = Vec3::zeros();
            let mut b = Mat3::zeros();
            for (di, &wi) in wx.iter().enumerate() {
                for (dj, &wj) in wy.iter().enumerate() {
                    for (dk, &wk) in wz.iter().enumerate() {
                        let w = wi * wj * wk;
                        let ix = (base[0] + di as i64) as usize;
                        let iy = (base[1] + dj as i64) as usize;
                        let iz = (base[2] + dk as i64) as usize;
                        let idx = grid.index(ix, iy, iz);
                        if grid.mass[idx] <= 0.0 {
                            continue;
                        }
                        let v_node = grid.momentum[idx];
                        let dpos = grid.node_position(ix, iy, iz) - x;
                        v_new += w * v_node;
                        b += w * v_node * dpos.transpose();
                    }
                }
            }
            let c_new = b * d_inv;
            state.velocities[p] = v_new;
            state.affine_velocity[p] = c_new;
            state.positions[p] += v_new * dt;

            let f_trial = (Mat3::identity() + c_new * dt) * state.deformation_gradient[p];
            let (f_new, d_gamma) = self.return_map(&f_trial)?;
            state.deformation_gradient[p] = f_new;
            state.plastic_multiplier[p] += d_gamma;

            if !state.positions[p].iter().all(|c| c.is_finite()) {
                return Err(MpmError::NumericalDivergence(format!(
                    "particle {p} position non-finite"
                )));
            }
        }
        Ok(())
    }

    /// Plastic return mapping in log-strain (Hencky) space. Returns the
    /// projected deformation gradient and the plastic increment.
    fn return_map(&self, f_trial: &Mat3) -> Result<(Mat3, f64), MpmError> {
        let det = f_trial.determinant();
        if !(det > 0.0) || !det.is_finite() {
            return Err(MpmError::NumericalDivergence(format!(
                "deformation gradient determinant {det}"
            )));
        }
        match self.plasticity {
            Plasticity::None => Ok((*f_trial, 0.0)),
            Plasticity::VonMises { yield_stress } => {
                let (u, sigma, v) = svd3(f_trial);
                let eps = Vec3::new(sigma.x.ln(), sigma.y.ln(), sigma.z.ln());
                let mean = (eps.x + eps.y + eps.z) / 3.0;
                let dev = eps - Vec3::repeat(mean);
                let dev_norm = dev.norm();
                let delta_gamma = dev_norm - yield_stress / (2.0 * self.mu);
                if delta_gamma <= 0.0 || dev_norm < 1e-12 {
                    return Ok((*f_trial, 0.0));
                }
                let eps_new = eps - dev * (delta_gamma / dev_norm);
                let sigma_new = Vec3::new(eps_new.x.exp(), eps_new.y.exp(), eps_new.z.exp());
                Ok((u * Mat3::from_diagonal(&sigma_new) * v.transpose(), delta_gamma))
            }
            Plasticity::DruckerPrager { friction_angle_rad } => {
                let (u, sigma, v) = svd3(f_trial);
                let eps = Vec3::new(sigma.x.ln(), sigma.y.ln(), sigma.z.ln());
                let trace = eps.x + eps.y + eps.z;
                let dev = eps - Vec3::repeat(trace / 3.0);
                let dev_norm = dev.norm();
                if trace > 0.0 {
                    // Expansion: project to the cone tip (cohesionless flow).
                    let d_gamma = dev_norm + trace;
                    return Ok((u * v.transpose(), d_gamma));
                }
                let sin_phi = friction_angle_rad.sin();
                let alpha = (2.0 / 3.0_f64).sqrt() * 2.0 * sin_phi / (3.0 - sin_phi);
                let delta_gamma =
                    dev_norm + alpha * trace * (3.0 * self.lambda + 2.0 * self.mu) / (2.0 * self.mu);
                if delta_gamma <= 0.0 || dev_norm < 1e-12 {
                    return Ok((*f_trial, 0.0));
                }
                let eps_new = eps - dev * (delta_gamma / dev_norm);
                let sigma_new = Vec3::new(eps_new.x.exp(), eps_new.y.exp(), eps_new.z.exp());
                Ok((u * Mat3::from_diagonal(&sigma_new) * v.transpose(), delta_gamma))
            }
        }
    }
}

#[inline]
fn spline_weights(x: &Vec3, origin: &Vec3, inv_h: f64) -> ([i64; 3], [f64; 3], [f64; 3], [f64; 3]) {
    let local = (x - origin) * inv_h;
    let base = [
        (local.x - 0.5).floor() as i64,
        (local.y - 0.5).floor() as i64,
        (local.z - 0.5).floor() as i64,
    ];
    let axis = |l: f64, b: i64| -> [f64; 3] {
        let fx = l - b as f64;
        [
            0.5 * (1.5 - fx).powi(2),
            0.75 - (fx - 1.0).powi(2),
            0.5 * (fx - 0.5).powi(2),
        ]
    };
    (
        base,
        axis(local.x, base[0]),
        axis(local.y, base[1]),
        axis(local.z, base[2]),
    )
}

/// Principal-axis-aligned horizontal extents of the particle set: PCA over
/// (x, y), returned as (major, minor) side lengths. This is the measurement
/// behind the dough side-ratio criterion.
pub fn squeeze_bbox(positions: &[Vec3]) -> (f64, f64) {
    assert!(positions.len() >= 8, "squeeze_bbox needs at least 8 particles");
    let n = positions.len() as f64;
    let mean_x = positions.iter().map(|p| p.x).sum::<f64>() / n;
    let mean_y = positions.iter().map(|p| p.y).sum::<f64>() / n;
    let (mut cxx, mut cxy, mut cyy) = (0.0, 0.0, 0.0);
    for p in positions {
        let dx = p.x - mean_x;
        let dy = p.y - mean_y;
        cxx += dx * dx;
        cxy += dx * dy;
        cyy += dy * dy;
    }
    // Principal axis of the 2x2 covariance.
    let theta = 0.5 * (2.0 * cxy).atan2(cxx - cyy);
    let (c, s) = (theta.cos(), theta.sin());
    let (mut min_u, mut max_u) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut min_v, mut max_v) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in positions {
        let dx = p.x - mean_x;
        let dy = p.y - mean_y;
        let u = c * dx + s * dy;
        let w = -s * dx + c * dy;
        min_u = min_u.min(u);
        max_u = max_u.max(u);
        min_v = min_v.min(w);
        max_v = max_v.max(w);
    }
    let a = max_u - min_u;
    let b = max_v - min_v;
    if a >= b {
        (a, b)
    } else {
        (b, a)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Pose;
    use crate::scene::default_params;

    fn block_positions(center: Vec3, half: Vec3, spacing: f64) -> Vec<Vec3> {
        let mut out = Vec::new();
        let counts = [
            (2.0 * half.x / spacing).round() as usize,
            (2.0 * half.y / spacing).round() as usize,
            (2.0 * half.z / spacing).round() as usize,
        ];
        for i in 0..counts[0] {
            for j in 0..counts[1] {
                for k in 0..counts[2] {
                    out.push(
                        center - half
                            + Vec3::new(
                                (i as f64 + 0.5) * spacing,
                                (j as f64 + 0.5) * spacing,
                                (k as f64 + 0.5) * spacing,
                            ),
                    );
                }
            }
        }
        out
    }

    fn spec_for(class: MaterialClass, particles: Vec<Vec3>, spacing: f64, e: f64) -> DeformableObjectSpec {
        let d = default_params(class);
        DeformableObjectSpec {
            name: "blob".into(),
            particles: particles.iter().map(|p| [p.x, p.y, p.z]).collect(),
            engine: crate::scene::EngineKind::Mpm,
            material_class: class,
            youngs_modulus: e,
            poisson_ratio: d.poisson_ratio,
            density: d.density,
            friction_angle: d.friction_angle,
            yield_stress: d.yield_stress,
            particle_spacing: spacing,
            color: [200, 120, 120],
        }
    }

    fn workspace() -> Aabb {
        Aabb::new(Vec3::new(-0.2, -0.2, -0.02), Vec3::new(0.2, 0.2, 0.25))
    }

    #[test]
    fn resting_jelly_conserves_mass_and_stays_put() {
        let spacing = 0.01;
        let particles = block_positions(Vec3::new(0.0, 0.0, 0.02), Vec3::new(0.02, 0.02, 0.02), spacing);
        let spec = spec_for(MaterialClass::Jelly, particles, spacing, 1e4);
        let solver = MpmSolver::from_spec(&spec, Vec3::new(0.0, 0.0, -9.81), 0.0).unwrap();
        let mut grid = MPMGrid::new(&workspace(), 2.0 * spacing, spacing, 0.0).unwrap();
        let mut state = MPMState::at_rest(spec.particle_positions());
        let mass0 = solver.total_mass(&state);
        let c0 = state.centroid();
        let dt = crate::world::CONTROL_DT / solver.substeps_per_tick as f64;
        for _ in 0..2000 {
            solver.substep(&mut state, &mut grid, &[], dt).unwrap();
            assert_eq!(solver.total_mass(&state), mass0);
        }
        let drift = (state.centroid() - c0).norm();
        assert!(drift < 1e-3, "centroid drift {drift}");
    }

    #[test]
    fn dropped_jelly_settles_with_dissipating_energy() {
        let spacing = 0.01;
        let particles = block_positions(Vec3::new(0.0, 0.0, 0.07), Vec3::new(0.02, 0.02, 0.02), spacing);
        let spec = spec_for(MaterialClass::Jelly, particles, spacing, 1e4);
        let solver = MpmSolver::from_spec(&spec, Vec3::new(0.0, 0.0, -9.81), 0.0).unwrap();
        let mut grid = MPMGrid::new(&workspace(), 2.0 * spacing, spacing, 0.0).unwrap();
        let mut state = MPMState::at_rest(spec.particle_positions());
        let dt = crate::world::CONTROL_DT / solver.substeps_per_tick as f64;
        let steps = (1.5 / dt) as usize;
        let ke = |s: &MPMState| -> f64 {
            s.velocities.iter().map(|v| 0.5 * solver.particle_mass * v.norm_squared()).sum()
        };
        let mut peak_ke: f64 = 0.0;
        let mut contact_step = None;
        for step in 0..steps {
            solver.substep(&mut state, &mut grid, &[], dt).unwrap();
            let min_z = state.positions.iter().map(|p| p.z).fold(f64::INFINITY, f64::min);
            if contact_step.is_none() && min_z <= 0.02 {
                contact_step = Some(step);
            }
            peak_ke = peak_ke.max(ke(&state));
            assert!(min_z > -2.0 * spacing, "particle sank below table: {min_z}");
        }
        assert!(contact_step.is_some(), "block never reached the table");
        let final_ke = ke(&state);
        assert!(final_ke < 0.05 * peak_ke, "did not settle: {final_ke} vs peak {peak_ke}");
        let max_z = state.positions.iter().map(|p| p.z).fold(f64::NEG_INFINITY, f64::max);
        assert!(max_z < 0.09, "max height after settling should drop below start");
    }

    #[test]
    fn transfer_cycle_preserves_momentum_without_forces() {
        let spacing = 0.01;
        let particles = block_positions(Vec3::new(0.0, 0.0, 0.12), Vec3::new(0.02, 0.02, 0.02), spacing);
        let spec = spec_for(MaterialClass::Jelly, particles, spacing, 1e4);
        let solver = MpmSolver::from_spec(&spec, Vec3::zeros(), -10.0).unwrap();
        let mut grid = MPMGrid::new(&workspace(), 2.0 * spacing, spacing, -10.0).unwrap();
        let mut state = MPMState::at_rest(spec.particle_positions());
        for v in state.velocities.iter_mut() {
            *v = Vec3::new(0.03, -0.02, 0.01);
        }
        // F = I so stress vanishes; the substep is a pure transfer cycle.
        let p_total = |s: &MPMState| -> Vec3 {
            s.velocities.iter().map(|v| v * solver.particle_mass).sum()
        };
        let p0 = p_total(&state);
        for _ in 0..10 {
            solver.substep(&mut state, &mut grid, &[], 1e-4).unwrap();
            let drift = (p_total(&state) - p0).norm();
            assert!(drift < 1e-8, "momentum drift {drift}");
        }
    }

    #[test]
    fn translation_invariance_of_trajectories() {
        let spacing = 0.01;
        let shift = Vec3::new(0.05, -0.03, 0.0);
        let run = |offset: Vec3| -> Vec<Vec3> {
            let particles = block_positions(
                Vec3::new(0.0, 0.0, 0.05) + offset,
                Vec3::new(0.015, 0.015, 0.015),
                spacing,
            );
            let spec = spec_for(MaterialClass::Jelly, particles, spacing, 1e4);
            let solver = MpmSolver::from_spec(&spec, Vec3::new(0.0, 0.0, -9.81), 0.0).unwrap();
            let ws = Aabb::new(workspace().min_v() + offset, workspace().max_v() + offset);
            let mut grid = MPMGrid::new(&ws, 2.0 * spacing, spacing, 0.0).unwrap();
            let mut state = MPMState::at_rest(spec.particle_positions());
            let dt = crate::world::CONTROL_DT / solver.substeps_per_tick as f64;
            for _ in 0..200 {
                solver.substep(&mut state, &mut grid, &[], dt).unwrap();
            }
            state.positions
        };
        let a = run(Vec3::zeros());
        let b = run(shift);
        for (pa, pb) in a.iter().zip(b.iter()) {
            assert!((pb - pa - shift).norm() < 1e-9, "trajectory not shift-equivariant");
        }
    }

    #[test]
    fn plasticine_keeps_deformation_jelly_recovers() {
        let spacing = 0.0075;
        let run = |class: MaterialClass, e: f64| -> f64 {
            let particles = block_positions(
                Vec3::new(0.0, 0.0, 0.0225),
                Vec3::new(0.0225, 0.0225, 0.0225),
                spacing,
            );
            let mut spec = spec_for(class, particles, spacing, e);
            if class == MaterialClass::Plasticine {
                // Soft clay: low yield so the squeeze flows plastically.
                spec.yield_stress = Some(3e3);
            }
            let solver = MpmSolver::from_spec(&spec, Vec3::new(0.0, 0.0, -9.81), 0.0).unwrap();
            let mut grid = MPMGrid::new(&workspace(), 2.0 * spacing, spacing, 0.0).unwrap();
            let mut state = MPMState::at_rest(spec.particle_positions());
            let dt = crate::world::CONTROL_DT / solver.substeps_per_tick as f64;
            let extent_x = |s: &MPMState| -> f64 {
                let max = s.positions.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
                let min = s.positions.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
                max - min
            };
            let x0 = extent_x(&state);
            // Two plates squeeze the block by ~35% along x, then withdraw.
            let he = Vec3::new(0.004, 0.04, 0.03);
            let gap0 = x0 + 0.002;
            let squeeze = 0.35 * x0;
            let phase_ticks = 400;
            for phase in 0..3 {
                for tick in 0..phase_ticks {
                    let t = tick as f64 / phase_ticks as f64;
                    let (gap, speed) = match phase {
                        0 => (gap0 - squeeze * t, -squeeze / (phase_ticks as f64 * crate::world::CONTROL_DT)),
                        1 => (gap0 - squeeze, 0.0),
                        _ => (gap0 - squeeze + (0.04 + squeeze) * t, (0.04 + squeeze) / (phase_ticks as f64 * crate::world::CONTROL_DT)),
                    };
                    let fingers = [-1.0, 1.0].map(|sign: f64| FingerBody {
                        pose: Pose::from_position(Vec3::new(sign * (gap / 2.0 + he.x), 0.0, 0.025)),
                        linear_velocity: Vec3::new(-sign * speed / 2.0, 0.0, 0.0),
                        angular_velocity: Vec3::zeros(),
                        half_extents: he,
                    });
                    for _ in 0..solver.substeps_per_tick {
                        solver.substep(&mut state, &mut grid, &fingers, dt).unwrap();
                    }
                }
            }
            // Settle.
            for _ in 0..200 * solver.substeps_per_tick {
                solver.substep(&mut state, &mut grid, &[], dt).unwrap();
            }
            extent_x(&state) / x0
        };
        let plastic_ratio = run(MaterialClass::Plasticine, 1e5);
        let elastic_ratio = run(MaterialClass::Jelly, 1e4);
        assert!(plastic_ratio < 0.90, "plasticine recovered too much: {plastic_ratio}");
        assert!(elastic_ratio > 0.95, "jelly failed to recover: {elastic_ratio}");
    }

    #[test]
    fn squeeze_bbox_on_aligned_and_rotated_blocks() {
        let spacing = 0.005;
        let block = block_positions(Vec3::new(0.0, 0.0, 0.01), Vec3::new(0.03, 0.02, 0.01), spacing);
        let (major, minor) = squeeze_bbox(&block);
        assert!((major - 0.06).abs() <= spacing, "major {major}");
        assert!((minor - 0.04).abs() <= spacing, "minor {minor}");

        let angle = std::f64::consts::FRAC_PI_4;
        let rotated: Vec<Vec3> = block
            .iter()
            .map(|p| {
                Vec3::new(
                    p.x * angle.cos() - p.y * angle.sin(),
                    p.x * angle.sin() + p.y * angle.cos(),
                    p.z,
                )
            })
            .collect();
        let (rmajor, rminor) = squeeze_bbox(&rotated);
        assert!((rmajor - 0.06).abs() <= spacing, "rotated major {rmajor}");
        assert!((rminor - 0.04).abs() <= spacing, "rotated minor {rminor}");
    }

    #[test]
    fn squeeze_bbox_matches_rotating_calipers_oracle() {
        // Dense rotated rectangle: PCA extents should match the minimum-area
        // rectangle from rotating calipers within 5%.
        let spacing = 0.004;
        let block = block_positions(Vec3::new(0.0, 0.0, 0.01), Vec3::new(0.035, 0.018, 0.008), spacing);
        let angle: f64 = 0.6;
        let pts: Vec<Vec3> = block
            .iter()
            .map(|p| {
                Vec3::new(
                    p.x * angle.cos() - p.y * angle.sin(),
                    p.x * angle.sin() + p.y * angle.cos(),
                    p.z,
                )
            })
            .collect();
        let (major, minor) = squeeze_bbox(&pts);

        // Rotating calipers on the 2-D convex hull.
        let mut xy: Vec<(f64, f64)> = pts.iter().map(|p| (p.x, p.y)).collect();
        xy.sort_by(|a, b| a.partial_cmp(b).unwrap());
        xy.dedup();
        let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
            (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
        };
        let mut hull: Vec<(f64, f64)> = Vec::new();
        for &p in xy.iter().chain(xy.iter().rev()) {
            while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
        let mut best = (f64::INFINITY, 0.0, 0.0);
        for i in 0..hull.len() {
            let a = hull[i];
            let b = hull[(i + 1) % hull.len()];
            let dir = (b.0 - a.0, b.1 - a.1);
            let len = (dir.0 * dir.0 + dir.1 * dir.1).sqrt();
            let u = (dir.0 / len, dir.1 / len);
            let v = (-u.1, u.0);
            let (mut lo_u, mut hi_u) = (f64::INFINITY, f64::NEG_INFINITY);
            let (mut lo_v, mut hi_v) = (f64::INFINITY, f64::NEG_INFINITY);
            for &p in &hull {
                let pu = p.0 * u.0 + p.1 * u.1;
                let pv = p.0 * v.0 + p.1 * v.1;
                lo_u = lo_u.min(pu);
                hi_u = hi_u.max(pu);
                lo_v = lo_v.min(pv);
                hi_v = hi_v.max(pv);
            }
            let area = (hi_u - lo_u) * (hi_v - lo_v);
            if area < best.0 {
                best = (area, hi_u - lo_u, hi_v - lo_v);
            }
        }
        let (cal_major, cal_minor) = if best.1 >= best.2 {
            (best.1, best.2)
        } else {
            (best.2, best.1)
        };
        assert!((major - cal_major).abs() / cal_major < 0.05);
        assert!((minor - cal_minor).abs() / cal_minor < 0.05);
    }

    #[test]
    fn grid_rejects_under_resolution() {
        assert!(matches!(
            MPMGrid::new(&workspace(), 0.03, 0.01, 0.0),
            Err(MpmError::UnderResolved { .. })
        ));
    }
}
