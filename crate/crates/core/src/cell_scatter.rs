//! Deterministic billiard tracing inside a surface cell, the random scattering
//! map, discretization of the Markov scattering operator P, and numerical
//! verification of the diffusion approximation P_h ≈ I + h𝓛.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use thiserror::Error;

use crate::microgeometry::{CellFamily, QuadricCap, SurfaceCell};
use crate::quadrature::GaussLegendre;
use crate::seeding::derive_seed;
use crate::transition::{DiscPartition, TransitionMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MAX_BOUNCES: u32 = 1000;
const MAX_SEGMENTS: u32 = 1_000_000;

/// A velocity represented by its orthogonal projection `u` onto the tangent
/// disc of radius ρ. Components: `u.x` along the cross-section tangent τ,
/// `u.y` along the channel axis e. The full 3-vector is recovered by `lift`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscVelocity {
    pub u: Vector2<f64>,
    pub rho: f64,
}

impl DiscVelocity {
    pub fn new(u: Vector2<f64>, rho: f64) -> Self {
        debug_assert!(u.norm() <= rho * (1.0 + 1e-12));
        DiscVelocity { u, rho }
    }

    /// Magnitude of the normal (wall-perpendicular) velocity component.
    pub fn normal_component(&self) -> f64 {
        (self.rho * self.rho - self.u.norm_squared()).max(0.0).sqrt()
    }

    /// 3-vector with the normal component pointing into the wall (−z).
    pub fn lift_inward(&self) -> Vector3<f64> {
        Vector3::new(self.u.x, self.u.y, -self.normal_component())
    }

    /// 3-vector with the normal component pointing away from the wall (+z).
    pub fn lift_outward(&self) -> Vector3<f64> {
        Vector3::new(self.u.x, self.u.y, self.normal_component())
    }
}

#[derive(Debug, Error)]
pub enum ScatterError {
    #[error("exceeded maximum bounce count {0}")]
    MaxBounceExceeded(u32),
    #[error("numerical stall while tracing (step below 1e-14 of cell size)")]
    NumericalStall,
    #[error("grazing incoming ray (normal component below 1e-9 rho)")]
    GrazingRay,
    #[error("{failed} of {total} rays failed while building the transition matrix (> 0.1%)")]
    TooManyFailures { failed: u64, total: u64 },
}

/// Result of tracing one molecule through the cell.
#[derive(Debug, Clone, Copy)]
pub struct ScatterOutcome {
    pub v_out: DiscVelocity,
    pub bounces: u32,
    pub entry_point: Vector2<f64>,
    /// Exit point on the opening plane, wrapped into the cell rectangle.
    pub exit_point: Vector2<f64>,
}

/// First intersection of the ray `origin + t·dir` (t in `(t_min, t_max)`) with
/// the cell surface, assuming the lateral coordinates stay inside the tile.
/// Returns `(t, hit point, unit upward normal)`.
fn first_hit(
    cell: &SurfaceCell,
    origin: Vector3<f64>,
    dir: Vector3<f64>,
    t_min: f64,
    t_max: f64,
) -> Option<(f64, Vector3<f64>, Vector3<f64>)> {
    match cell.family() {
        CellFamily::Flat { .. } => {
            if dir.z < 0.0 {
                let t = -origin.z / dir.z;
                if t > t_min && t < t_max {
                    let p = origin + t * dir;
                    return Some((t, Vector3::new(p.x, p.y, 0.0), Vector3::z()));
                }
            }
            None
        }
        CellFamily::Ellipsoid { .. } | CellFamily::SpherePacking { .. } => {
            let q = cell.quadric().expect("analytic family has a quadric");
            quadric_hit(&q, origin, dir, t_min, t_max)
        }
        CellFamily::Custom { .. } => numeric_hit(cell, origin, dir, t_min, t_max),
    }
}

fn quadric_hit(
    q: &QuadricCap,
    origin: Vector3<f64>,
    dir: Vector3<f64>,
    t_min: f64,
    t_max: f64,
) -> Option<(f64, Vector3<f64>, Vector3<f64>)> {
    let mut best: Option<(f64, Vector3<f64>, Vector3<f64>)> = None;

    // Cap (upper sheet of the quadric).
    let o = (origin - q.center).component_div(&q.semi_axes);
    let d = dir.component_div(&q.semi_axes);
    let a = d.norm_squared();
    let b = 2.0 * o.dot(&d);
    let c = o.norm_squared() - 1.0;
    let disc = b * b - 4.0 * a * c;
    if disc >= 0.0 {
        let sq = disc.sqrt();
        for t in [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)] {
            if t > t_min && t < t_max {
                let p = origin + t * dir;
                let upper = p.z >= q.center.z;
                let in_rim = q
                    .rim_radius
                    .map(|r| p.x * p.x + p.y * p.y <= r * r)
                    .unwrap_or(true);
                if upper && in_rim {
                    let n = (p - q.center)
                        .component_div(&q.semi_axes)
                        .component_div(&q.semi_axes)
                        .normalize();
                    best = Some((t, p, n));
                    break;
                }
            }
        }
    }

    // Flat remainder outside the rim (sphere packing that does not cover the tile).
    if let Some(rim) = q.rim_radius {
        if dir.z < 0.0 {
            let t = (q.flat_z - origin.z) / dir.z;
            if t > t_min && t < t_max && best.map(|(tb, _, _)| t < tb).unwrap_or(true) {
                let p = origin + t * dir;
                if p.x * p.x + p.y * p.y >= rim * rim {
                    best = Some((t, Vector3::new(p.x, p.y, q.flat_z), Vector3::z()));
                }
            }
        }
    }
    best
}

/// Safeguarded marching + bisection root finding on `z(t) − f(x(t), y(t))`.
fn numeric_hit(
    cell: &SurfaceCell,
    origin: Vector3<f64>,
    dir: Vector3<f64>,
    t_min: f64,
    t_max: f64,
) -> Option<(f64, Vector3<f64>, Vector3<f64>)> {
    let (c1, c2) = cell.half_widths();
    let speed = dir.norm();
    if speed == 0.0 || !t_max.is_finite() {
        return None;
    }
    let phi = |t: f64| {
        let p = origin + t * dir;
        p.z - cell.height(p.x, p.y)
    };
    let dt = (c1.min(c2) / 64.0) / speed;
    let mut t0 = t_min;
    let mut f0 = phi(t0);
    if f0 <= 0.0 {
        // Starting on/under the surface: step off before searching.
        t0 = t_min + 1e-9 * dt;
        f0 = phi(t0);
        if f0 <= 0.0 {
            return None;
        }
    }
    let mut t = t0;
    while t < t_max {
        let t1 = (t + dt).min(t_max);
        let f1 = phi(t1);
        if f1 <= 0.0 {
            // Bisect within [t, t1].
            let (mut lo, mut hi) = (t, t1);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if phi(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-12 * dt.max(1.0) {
                    break;
                }
            }
            let th = 0.5 * (lo + hi);
            let p = origin + th * dir;
            let g = cell.gradient(p.x, p.y);
            let n = Vector3::new(-g.x, -g.y, 1.0).normalize();
            return Some((th, p, n));
        }
        t = t1;
    }
    None
}

/// First intersection of an arbitrary ray with the cell surface (no periodic
/// wrap). Exact closed form for analytic families, safeguarded root finding
/// otherwise. Returns `(t, hit point, unit upward normal)`.
pub fn ray_surface_intersection(
    cell: &SurfaceCell,
    origin: Vector3<f64>,
    dir: Vector3<f64>,
) -> Option<(f64, Vector3<f64>, Vector3<f64>)> {
    assert!(dir.norm() > 0.0, "direction must be nonzero");
    let (c1, c2) = cell.half_widths();
    // Generous bound: time for the ray to leave a box comfortably containing
    // the cell surface.
    let span = 8.0 * (c1 + c2) + 2.0 * (cell.opening_z() - cell.min_height_bound()).abs() + 1.0;
    let t_max = span / dir.norm();
    first_hit(cell, origin, dir, 0.0, t_max)
}

/// Numeric-fallback intersection, exposed for cross-checking against the
/// analytic closed forms.
pub fn ray_surface_intersection_numeric(
    cell: &SurfaceCell,
    origin: Vector3<f64>,
    dir: Vector3<f64>,
) -> Option<(f64, Vector3<f64>, Vector3<f64>)> {
    let (c1, c2) = cell.half_widths();
    let span = 8.0 * (c1 + c2) + 2.0 * (cell.opening_z() - cell.min_height_bound()).abs() + 1.0;
    let t_max = span / dir.norm();
    numeric_hit(cell, origin, dir, 0.0, t_max)
}

impl SurfaceCell {
    /// A lower bound on the surface height (for ray bounding boxes).
    pub(crate) fn min_height_bound(&self) -> f64 {
        0.0f64.min(self.height(0.0, 0.0))
    }
}

/// Trace a molecule entering the cell at `r` on the opening plane with
/// wall-ward velocity `v_in`, through specular reflections and periodic side
/// faces, until it exits through the opening plane.
pub fn trace_cell(
    cell: &SurfaceCell,
    v_in: DiscVelocity,
    r: Vector2<f64>,
) -> Result<ScatterOutcome, ScatterError> {
    let rho = v_in.rho;
    if v_in.normal_component() < 1e-9 * rho {
        return Err(ScatterError::GrazingRay);
    }
    let (c1, c2) = cell.half_widths();
    let scale = c1.min(c2);
    let opening = cell.opening_z();
    let mut p = Vector3::new(r.x, r.y, opening);
    let mut v = v_in.lift_inward();
    let mut bounces: u32 = 0;
    let t_nudge = 1e-12 * scale / rho;
    let mut tiny_steps: u32 = 0;

    for _segment in 0..MAX_SEGMENTS {
        // Candidate event times for this free segment.
        let t_exit = if v.z > 0.0 {
            (opening - p.z) / v.z
        } else {
            f64::INFINITY
        };
        let t_side = side_crossing_time(p, v, c1, c2);
        let t_cap = t_exit.min(t_side);
        let hit = first_hit(cell, p, v, t_nudge, t_cap);

        match hit {
            Some((t, hp, n)) => {
                if t < 1e-14 {
                    tiny_steps += 1;
                    if tiny_steps > 100 {
                        return Err(ScatterError::NumericalStall);
                    }
                } else {
                    tiny_steps = 0;
                }
                p = hp;
                let vn = v.dot(&n);
                v -= 2.0 * vn * n;
                bounces += 1;
                if bounces > MAX_BOUNCES {
                    return Err(ScatterError::MaxBounceExceeded(MAX_BOUNCES));
                }
            }
            None if t_exit <= t_side => {
                p += t_exit * v;
                if bounces == 0 {
                    // Cannot exit without touching the surface; wall-ward entry
                    // guarantees at least one reflection.
                    return Err(ScatterError::NumericalStall);
                }
                // Renormalize the speed drift accumulated over reflections.
                let v = v * (rho / v.norm());
                debug_assert!((v.norm() - rho).abs() <= 1e-12 * rho);
                let exit = wrap_point(Vector2::new(p.x, p.y), c1, c2);
                return Ok(ScatterOutcome {
                    v_out: DiscVelocity::new(Vector2::new(v.x, v.y), rho),
                    bounces,
                    entry_point: r,
                    exit_point: exit,
                });
            }
            None => {
                if !t_side.is_finite() {
                    return Err(ScatterError::NumericalStall);
                }
                p += t_side * v;
                // Periodic wrap onto the opposite face.
                if (p.x - c1).abs() < 1e-9 * scale && v.x > 0.0 {
                    p.x = -c1;
                } else if (p.x + c1).abs() < 1e-9 * scale && v.x < 0.0 {
                    p.x = c1;
                }
                if (p.y - c2).abs() < 1e-9 * scale && v.y > 0.0 {
                    p.y = -c2;
                } else if (p.y + c2).abs() < 1e-9 * scale && v.y < 0.0 {
                    p.y = c2;
                }
            }
        }
    }
    Err(ScatterError::NumericalStall)
}

fn side_crossing_time(p: Vector3<f64>, v: Vector3<f64>, c1: f64, c2: f64) -> f64 {
    let mut t = f64::INFINITY;
    if v.x > 0.0 {
        t = t.min((c1 - p.x) / v.x);
    } else if v.x < 0.0 {
        t = t.min((-c1 - p.x) / v.x);
    }
    if v.y > 0.0 {
        t = t.min((c2 - p.y) / v.y);
    } else if v.y < 0.0 {
        t = t.min((-c2 - p.y) / v.y);
    }
    t.max(0.0)
}

fn wrap_point(mut q: Vector2<f64>, c1: f64, c2: f64) -> Vector2<f64> {
    q.x = (q.x + c1).rem_euclid(2.0 * c1) - c1;
    q.y = (q.y + c2).rem_euclid(2.0 * c2) - c2;
    q
}

/// One application of the scattering map: draw the entry point uniformly on
/// the opening and trace. Grazing or failed rays are retried with a fresh
/// entry point (up to 16 times).
pub fn sample_scatter<R: Rng>(
    cell: &SurfaceCell,
    v_in: DiscVelocity,
    rng: &mut R,
) -> Result<ScatterOutcome, ScatterError> {
    let (c1, c2) = cell.half_widths();
    let mut last = ScatterError::NumericalStall;
    for _ in 0..16 {
        let r = Vector2::new(rng.gen_range(-c1..c1), rng.gen_range(-c2..c2));
        match trace_cell(cell, v_in, r) {
            Ok(out) => return Ok(out),
            Err(e) => last = e,
        }
    }
    Err(last)
}

/// Build the discretized scattering operator on an equal-area disc partition
/// by Monte Carlo: `n_samples` scatters per input bin, inputs uniform within
/// the bin, outputs counted by bin. Parallel over bins with per-bin seeds, so
/// the result is independent of the worker count.
pub fn build_transition_matrix(
    cell: &SurfaceCell,
    partition: &DiscPartition,
    n_samples: u64,
    seed: u64,
) -> Result<TransitionMatrix, ScatterError> {
    assert!(n_samples >= 10_000, "need at least 1e4 samples per bin");
    let n = partition.len();
    let rho = partition.rho;
    let rows: Vec<(Vec<f64>, u64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let mut counts = vec![0u64; n];
            let mut failed = 0u64;
            let mut kept = 0u64;
            while kept < n_samples {
                let mut u = partition.sample_in_bin(i, &mut rng);
                // Reject grazing inputs (normal component below 1e-9 rho).
                while rho * rho - u.norm_squared() < (1e-9 * rho) * (1e-9 * rho) {
                    u = partition.sample_in_bin(i, &mut rng);
                }
                match sample_scatter(cell, DiscVelocity::new(u, rho), &mut rng) {
                    Ok(out) => {
                        counts[partition.bin_of(out.v_out.u)] += 1;
                        kept += 1;
                    }
                    Err(_) => {
                        failed += 1;
                        if failed > n_samples / 500 {
                            break;
                        }
                    }
                }
            }
            let row: Vec<f64> = counts.iter().map(|&c| c as f64 / kept.max(1) as f64).collect();
            (row, failed)
        })
        .collect();

    let failed: u64 = rows.iter().map(|(_, f)| f).sum();
    let total = n as u64 * n_samples + failed;
    if failed * 1000 > total {
        return Err(ScatterError::TooManyFailures { failed, total });
    }
    let mut data = Vec::with_capacity(n * n);
    for (row, _) in &rows {
        data.extend_from_slice(row);
    }
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((data[i * n + j] - data[j * n + i]).abs());
        }
    }
    Ok(TransitionMatrix {
        partition: partition.clone(),
        data,
        samples_per_bin: n_samples,
        seed,
        failed_rays: failed,
        asymmetry: asym,
    })
}

/// One row of the operator-approximation residual table.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct OperatorApproxRow {
    pub h: f64,
    pub eps: f64,
    pub lambda: f64,
    pub p_psi: f64,
    pub psi: f64,
    pub l_psi: f64,
    /// e(h) = |(P_hΨ(u) − Ψ(u))/h − 𝓛Ψ(u)|
    pub residual: f64,
    /// Quadrature rays excluded for colliding more than once.
    pub excluded: u64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct OperatorApproxReport {
    pub rows: Vec<OperatorApproxRow>,
    /// Fitted slope of log e(h) vs log h.
    pub slope: f64,
}

/// Verify the diffusion approximation `P_hΨ(u) − Ψ(u) = h𝓛Ψ(u) + O(h^{3/2})`
/// on the isotropic ellipsoid family, one cell per requested flatness.
///
/// `P_hΨ(u)` is computed by deterministic tensor Gauss–Legendre quadrature
/// over the opening (not Monte Carlo); rays that collide more than once are
/// excluded and counted, per the theorem's single-collision hypothesis.
/// `a_psi` must evaluate `𝒜Ψ = div((1−|u|²) grad Ψ)` analytically; the full
/// generator is `𝓛Ψ = 2λ·𝒜Ψ` with λ from the cell's shape matrix.
pub fn check_operator_approx(
    u: DiscVelocity,
    psi: &(dyn Fn(Vector2<f64>) -> f64 + Sync),
    a_psi: &(dyn Fn(Vector2<f64>) -> f64 + Sync),
    h_list: &[f64],
    nodes: usize,
) -> Result<OperatorApproxReport, ScatterError> {
    assert!(u.u.norm() <= 0.8 * u.rho, "single-collision regime needs |u| <= 0.8 rho");
    let rule = GaussLegendre::new(nodes.max(64));
    let mut rows = Vec::with_capacity(h_list.len());
    for &h in h_list {
        assert!(h <= 0.05, "operator approximation check expects h <= 0.05");
        // Isotropic ellipsoid with exact flatness h: h = 2ε²/(1−2ε²).
        let eps = (h / (2.0 * (1.0 + h))).sqrt();
        let cell = crate::microgeometry::make_cell(CellFamily::Ellipsoid {
            a1: 1.0,
            a2: 1.0,
            b: 1.0,
            eps,
            c1: 1.0,
            c2: 1.0,
        })
        .expect("valid family parameters");
        let lambda = crate::microgeometry::compute_shape_matrix(&cell, 128)
            .expect("non-flat cell")
            .lambda();
        let (c1, c2) = cell.half_widths();
        let xs: Vec<(f64, f64)> = rule.mapped(-c1, c1).collect();
        let ys: Vec<(f64, f64)> = rule.mapped(-c2, c2).collect();
        let partials: Vec<(f64, f64, u64)> = xs
            .par_iter()
            .map(|&(x, wx)| {
                let mut acc = 0.0;
                let mut wsum = 0.0;
                let mut excluded = 0u64;
                for &(y, wy) in &ys {
                    match trace_cell(&cell, u, Vector2::new(x, y)) {
                        Ok(out) if out.bounces == 1 => {
                            acc += wx * wy * psi(out.v_out.u);
                            wsum += wx * wy;
                        }
                        _ => excluded += 1,
                    }
                }
                (acc, wsum, excluded)
            })
            .collect();
        let acc: f64 = partials.iter().map(|p| p.0).sum();
        let wsum: f64 = partials.iter().map(|p| p.1).sum();
        let excluded: u64 = partials.iter().map(|p| p.2).sum();
        let p_psi = acc / wsum;
        let psi_u = psi(u.u);
        let l_psi = 2.0 * lambda * a_psi(u.u);
        let residual = ((p_psi - psi_u) / h - l_psi).abs();
        rows.push(OperatorApproxRow {
            h,
            eps,
            lambda,
            p_psi,
            psi: psi_u,
            l_psi,
            residual,
            excluded,
        });
    }
    // Least-squares slope of log e vs log h.
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.residual > 0.0)
        .map(|r| (r.h.ln(), r.residual.ln()))
        .collect();
    let n = pts.len() as f64;
    let sx: f64 = pts.iter().map(|p| p.0).sum();
    let sy: f64 = pts.iter().map(|p| p.1).sum();
    let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
    let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    Ok(OperatorApproxReport { rows, slope })
}
