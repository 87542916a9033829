//! Billiard-cell surface microgeometries and their signature parameters.
//!
//! A cell is the graph of a height field `f` over a rectangular opening
//! `[-c1, c1] × [-c2, c2]`; molecules enter through the opening plane, reflect
//! specularly off the surface, and the side faces are periodic. The module
//! computes the flatness `h = max |∇f|²`, the averaged normal outer-product
//! matrix `A`, the shape matrix `Λ = A/h` with eigenvalues `λ1 ≥ λ2`, and the
//! classical roughness measures Ra and Rms.

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature::GaussLegendre;

#[derive(Debug, Error)]
pub enum MicroError {
    #[error("cell is degenerate flat (h <= 1e-12); shape matrix undefined")]
    DegenerateFlat,
    #[error("invalid cell family parameters: {0}")]
    InvalidFamilyParams(String),
}

/// Cell family tag with its defining parameters.
///
/// * `Ellipsoid`: piece of the ellipsoid `(εx/a1)² + (εy/a2)² + (εz/b + S)² = 1`
///   over the opening, with `S` chosen so the surface meets the opening corners
///   at height zero.
/// * `SpherePacking`: effective (billiard) geometry of a square lattice of
///   spheres of radius `r_s` probed by a molecule of radius `r_m`: one spherical
///   cap of radius `r_s + r_m` per square tile of side `2 r_s`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CellFamily {
    Flat {
        c1: f64,
        c2: f64,
    },
    Ellipsoid {
        a1: f64,
        a2: f64,
        b: f64,
        eps: f64,
        c1: f64,
        c2: f64,
    },
    SpherePacking {
        r_s: f64,
        r_m: f64,
    },
    /// Row-major height samples on a uniform (nx × ny) grid spanning the
    /// closed rectangle, bilinearly interpolated.
    Custom {
        c1: f64,
        c2: f64,
        nx: usize,
        ny: usize,
        heights: Vec<f64>,
    },
}

/// An axis-aligned ellipsoid `((x-cx)/A)² + ((y-cy)/B)² + ((z-cz)/C)² = 1`
/// whose upper sheet carries the cell surface. Used for exact ray intersection.
#[derive(Debug, Clone, Copy)]
pub struct QuadricCap {
    pub center: Vector3<f64>,
    pub semi_axes: Vector3<f64>,
    /// For sphere-packing cells that do not cover the square tile: the cap is
    /// valid for `x² + y² < rim_radius²`, beyond which the surface is flat at
    /// `flat_z`.
    pub rim_radius: Option<f64>,
    pub flat_z: f64,
}

/// A periodic billiard-cell microgeometry.
#[derive(Debug, Clone)]
pub struct SurfaceCell {
    family: CellFamily,
    c1: f64,
    c2: f64,
    /// Height of the opening plane; strictly above `max f`.
    opening_z: f64,
    max_height: f64,
    analytic_intersection: bool,
    warnings: Vec<String>,
    /// Cached ellipsoid shift `S` (see `CellFamily::Ellipsoid`).
    ellipsoid_shift: f64,
    /// Cached sphere-packing vertical offset `k` in `f = sqrt(R² - r²) + k`.
    cap_offset: f64,
}

impl SurfaceCell {
    pub fn family(&self) -> &CellFamily {
        &self.family
    }

    pub fn half_widths(&self) -> (f64, f64) {
        (self.c1, self.c2)
    }

    pub fn opening_area(&self) -> f64 {
        4.0 * self.c1 * self.c2
    }

    pub fn opening_z(&self) -> f64 {
        self.opening_z
    }

    pub fn max_height(&self) -> f64 {
        self.max_height
    }

    pub fn analytic_intersection(&self) -> bool {
        self.analytic_intersection
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Height field at a point of the closed rectangle.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        match &self.family {
            CellFamily::Flat { .. } => 0.0,
            CellFamily::Ellipsoid { a1, a2, b, eps, .. } => {
                let g = (1.0 - (eps * x / a1).powi(2) - (eps * y / a2).powi(2)).sqrt();
                (b / eps) * (g - self.ellipsoid_shift)
            }
            CellFamily::SpherePacking { r_s, r_m } => {
                let reff = r_s + r_m;
                let r2 = x * x + y * y;
                if r2 < reff * reff {
                    (reff * reff - r2).sqrt() + self.cap_offset
                } else {
                    self.cap_offset
                }
            }
            CellFamily::Custom {
                c1,
                c2,
                nx,
                ny,
                heights,
            } => bilinear(*c1, *c2, *nx, *ny, heights, x, y).0,
        }
    }

    /// Gradient of the height field.
    pub fn gradient(&self, x: f64, y: f64) -> Vector2<f64> {
        match &self.family {
            CellFamily::Flat { .. } => Vector2::zeros(),
            CellFamily::Ellipsoid { a1, a2, b, eps, .. } => {
                let g = (1.0 - (eps * x / a1).powi(2) - (eps * y / a2).powi(2)).sqrt();
                Vector2::new(-b * eps * x / (a1 * a1 * g), -b * eps * y / (a2 * a2 * g))
            }
            CellFamily::SpherePacking { r_s, r_m } => {
                let reff = r_s + r_m;
                let r2 = x * x + y * y;
                if r2 < reff * reff {
                    let s = (reff * reff - r2).sqrt();
                    Vector2::new(-x / s, -y / s)
                } else {
                    Vector2::zeros()
                }
            }
            CellFamily::Custom {
                c1,
                c2,
                nx,
                ny,
                heights,
            } => bilinear(*c1, *c2, *nx, *ny, heights, x, y).1,
        }
    }

    /// Unit inward (upward) surface normal at a point.
    pub fn normal(&self, x: f64, y: f64) -> Vector3<f64> {
        let g = self.gradient(x, y);
        Vector3::new(-g.x, -g.y, 1.0).normalize()
    }

    /// Exact quadric description when the family admits one.
    pub fn quadric(&self) -> Option<QuadricCap> {
        match &self.family {
            CellFamily::Ellipsoid { a1, a2, b, eps, .. } => Some(QuadricCap {
                center: Vector3::new(0.0, 0.0, -self.ellipsoid_shift * b / eps),
                semi_axes: Vector3::new(a1 / eps, a2 / eps, b / eps),
                rim_radius: None,
                flat_z: 0.0,
            }),
            CellFamily::SpherePacking { r_s, r_m } => {
                let reff = r_s + r_m;
                let covers = reff * reff >= 2.0 * r_s * r_s;
                Some(QuadricCap {
                    center: Vector3::new(0.0, 0.0, self.cap_offset),
                    semi_axes: Vector3::new(reff, reff, reff),
                    rim_radius: if covers { None } else { Some(reff) },
                    flat_z: self.cap_offset,
                })
            }
            _ => None,
        }
    }
}

fn bilinear(
    c1: f64,
    c2: f64,
    nx: usize,
    ny: usize,
    heights: &[f64],
    x: f64,
    y: f64,
) -> (f64, Vector2<f64>) {
    let dx = 2.0 * c1 / (nx - 1) as f64;
    let dy = 2.0 * c2 / (ny - 1) as f64;
    let fx = ((x + c1) / dx).clamp(0.0, (nx - 2) as f64);
    let fy = ((y + c2) / dy).clamp(0.0, (ny - 2) as f64);
    let i = fx.floor() as usize;
    let j = fy.floor() as usize;
    let tx = fx - i as f64;
    let ty = fy - j as f64;
    let z = |i: usize, j: usize| heights[j * nx + i];
    let (z00, z10, z01, z11) = (z(i, j), z(i + 1, j), z(i, j + 1), z(i + 1, j + 1));
    let f = z00 * (1.0 - tx) * (1.0 - ty) + z10 * tx * (1.0 - ty) + z01 * (1.0 - tx) * ty
        + z11 * tx * ty;
    let dfdx = ((z10 - z00) * (1.0 - ty) + (z11 - z01) * ty) / dx;
    let dfdy = ((z01 - z00) * (1.0 - tx) + (z11 - z10) * tx) / dy;
    (f, Vector2::new(dfdx, dfdy))
}

/// Construct a cell from its family parameters.
pub fn make_cell(family: CellFamily) -> Result<SurfaceCell, MicroError> {
    let mut warnings = Vec::new();
    let (c1, c2, analytic, ellipsoid_shift, cap_offset) = match &family {
        CellFamily::Flat { c1, c2 } => {
            require_positive(&[("c1", *c1), ("c2", *c2)])?;
            (*c1, *c2, true, 0.0, 0.0)
        }
        CellFamily::Ellipsoid {
            a1,
            a2,
            b,
            eps,
            c1,
            c2,
        } => {
            require_positive(&[
                ("a1", *a1),
                ("a2", *a2),
                ("b", *b),
                ("eps", *eps),
                ("c1", *c1),
                ("c2", *c2),
            ])?;
            let s2 = 1.0 - (eps * c1 / a1).powi(2) - (eps * c2 / a2).powi(2);
            if s2 <= 0.0 {
                return Err(MicroError::InvalidFamilyParams(format!(
                    "ellipsoid does not cover the opening corners ((eps*c1/a1)^2 + (eps*c2/a2)^2 = {:.4} >= 1)",
                    1.0 - s2
                )));
            }
            (*c1, *c2, true, s2.sqrt(), 0.0)
        }
        CellFamily::SpherePacking { r_s, r_m } => {
            require_positive(&[("r_s", *r_s), ("r_m", *r_m)])?;
            let reff = r_s + r_m;
            // Tile side 2 r_s, so the opening half-width is r_s.
            let covers = reff * reff >= 2.0 * r_s * r_s;
            if r_m / r_s < 0.4 {
                warnings.push(format!(
                    "sphere packing with r_m/r_s = {:.3} < 0.4: flatness leaves the \
                     small-h regime (gradient diverges near the cap rim)",
                    r_m / r_s
                ));
            }
            let offset = if covers {
                -(reff * reff - 2.0 * r_s * r_s).sqrt()
            } else {
                0.0
            };
            (*r_s, *r_s, true, 0.0, offset)
        }
        CellFamily::Custom {
            c1,
            c2,
            nx,
            ny,
            heights,
        } => {
            require_positive(&[("c1", *c1), ("c2", *c2)])?;
            if *nx < 2 || *ny < 2 || heights.len() != nx * ny {
                return Err(MicroError::InvalidFamilyParams(format!(
                    "custom grid needs nx, ny >= 2 and nx*ny heights (got {}x{}, {} values)",
                    nx,
                    ny,
                    heights.len()
                )));
            }
            if heights.iter().any(|z| !z.is_finite()) {
                return Err(MicroError::InvalidFamilyParams(
                    "custom grid contains non-finite heights".into(),
                ));
            }
            (*c1, *c2, false, 0.0, 0.0)
        }
    };

    let mut cell = SurfaceCell {
        family,
        c1,
        c2,
        opening_z: 0.0,
        max_height: 0.0,
        analytic_intersection: analytic,
        warnings,
        ellipsoid_shift,
        cap_offset,
    };
    // Opening plane strictly above the surface; the extra travel is vertical
    // free flight and does not affect the scattering map.
    let max_h = grid_max(&cell, 129, |c, x, y| c.height(x, y)).0;
    cell.max_height = max_h;
    cell.opening_z = max_h + 1e-6 * c1.min(c2);
    Ok(cell)
}

fn require_positive(params: &[(&str, f64)]) -> Result<(), MicroError> {
    for (name, v) in params {
        if !(*v > 0.0 && v.is_finite()) {
            return Err(MicroError::InvalidFamilyParams(format!(
                "{name} must be positive and finite (got {v})"
            )));
        }
    }
    Ok(())
}

/// Maximize `g(cell, x, y)` on a grid over the closed rectangle.
fn grid_max<G: Fn(&SurfaceCell, f64, f64) -> f64>(
    cell: &SurfaceCell,
    n: usize,
    g: G,
) -> (f64, f64, f64) {
    let (c1, c2) = (cell.c1, cell.c2);
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for i in 0..n {
        let x = -c1 + 2.0 * c1 * i as f64 / (n - 1) as f64;
        for j in 0..n {
            let y = -c2 + 2.0 * c2 * j as f64 / (n - 1) as f64;
            let v = g(cell, x, y);
            if v > best.0 {
                best = (v, x, y);
            }
        }
    }
    best
}

/// Flatness parameter `h = max |∇f|²`, with local refinement around the grid
/// argmax to relative accuracy 1e-4.
pub fn compute_flatness(cell: &SurfaceCell, grid_n: usize) -> f64 {
    let n = grid_n.max(64);
    let g = |c: &SurfaceCell, x: f64, y: f64| c.gradient(x, y).norm_squared();
    let (mut best, mut bx, mut by) = grid_max(cell, n, g);
    // Refine on shrinking local grids clamped to the domain.
    let mut rx = 2.0 * cell.c1 / (n - 1) as f64;
    let mut ry = 2.0 * cell.c2 / (n - 1) as f64;
    for _ in 0..40 {
        let prev = best;
        let m = 9;
        for i in 0..=m {
            let x = (bx - rx + 2.0 * rx * i as f64 / m as f64).clamp(-cell.c1, cell.c1);
            for j in 0..=m {
                let y = (by - ry + 2.0 * ry * j as f64 / m as f64).clamp(-cell.c2, cell.c2);
                let v = g(cell, x, y);
                if v > best {
                    best = v;
                    bx = x;
                    by = y;
                }
            }
        }
        rx *= 0.3;
        ry *= 0.3;
        if best > 0.0 && (best - prev) / best < 1e-6 && rx < 1e-7 * cell.c1 {
            break;
        }
    }
    best
}

/// Micro-parameters of a cell: flatness, normal-average matrix `A`, shape
/// matrix `Λ = A/h`, shape eigenvalues, isotropy flag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MicroParams {
    pub h: f64,
    pub a: [[f64; 2]; 2],
    pub lambda_matrix: [[f64; 2]; 2],
    pub lambda1: f64,
    pub lambda2: f64,
    pub isotropic: bool,
}

impl MicroParams {
    /// Mean shape parameter λ = (λ1 + λ2)/2; equals both in the isotropic case.
    pub fn lambda(&self) -> f64 {
        0.5 * (self.lambda1 + self.lambda2)
    }
}

/// Averaged tangential-normal matrix `A` and derived shape matrix `Λ = A/h`.
///
/// `A_ij` is the opening-average of `n̄_i n̄_j`, where `n̄` is the tangential
/// part of the unit surface normal, `n̄ = -∇f / sqrt(1 + |∇f|²)`.
pub fn compute_shape_matrix(cell: &SurfaceCell, grid_n: usize) -> Result<MicroParams, MicroError> {
    let h = compute_flatness(cell, grid_n.max(64));
    if h <= 1e-12 {
        return Err(MicroError::DegenerateFlat);
    }
    let rule = GaussLegendre::new(grid_n.max(128));
    let xs: Vec<(f64, f64)> = rule.mapped(-cell.c1, cell.c1).collect();
    let ys: Vec<(f64, f64)> = rule.mapped(-cell.c2, cell.c2).collect();
    let mut a = Matrix2::zeros();
    for &(x, wx) in &xs {
        let mut row = Matrix2::zeros();
        for &(y, wy) in &ys {
            let g = cell.gradient(x, y);
            let nbar = -g / (1.0 + g.norm_squared()).sqrt();
            row += wy * nbar * nbar.transpose();
        }
        a += wx * row;
    }
    a /= cell.opening_area();
    let lambda_mat = a / h;
    // Symmetric 2x2 eigenvalues in closed form.
    let tr = lambda_mat.trace();
    let det = lambda_mat.determinant();
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
    Ok(MicroParams {
        h,
        a: [[a[(0, 0)], a[(0, 1)]], [a[(1, 0)], a[(1, 1)]]],
        lambda_matrix: [
            [lambda_mat[(0, 0)], lambda_mat[(0, 1)]],
            [lambda_mat[(1, 0)], lambda_mat[(1, 1)]],
        ],
        lambda1: l1,
        lambda2: l2.max(0.0),
        isotropic: (l1 - l2).abs() <= 1e-3,
    })
}

/// Classical roughness measures over the opening:
/// `Ra` (mean absolute deviation from the mean height) and `Rms` (standard
/// deviation of the height).
pub fn roughness_classical(cell: &SurfaceCell, grid_n: usize) -> (f64, f64) {
    let rule = GaussLegendre::new(grid_n.max(64));
    let xs: Vec<(f64, f64)> = rule.mapped(-cell.c1, cell.c1).collect();
    let ys: Vec<(f64, f64)> = rule.mapped(-cell.c2, cell.c2).collect();
    let area = cell.opening_area();
    let mut mean = 0.0;
    for &(x, wx) in &xs {
        for &(y, wy) in &ys {
            mean += wx * wy * cell.height(x, y);
        }
    }
    mean /= area;
    let (mut ra, mut ms) = (0.0, 0.0);
    for &(x, wx) in &xs {
        for &(y, wy) in &ys {
            let d = cell.height(x, y) - mean;
            ra += wx * wy * d.abs();
            ms += wx * wy * d * d;
        }
    }
    (ra / area, (ms / area).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn iso_ellipsoid(eps: f64) -> SurfaceCell {
        make_cell(CellFamily::Ellipsoid {
            a1: 1.0,
            a2: 1.0,
            b: 1.0,
            eps,
            c1: 1.0,
            c2: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn flat_cell_has_zero_flatness() {
        let cell = make_cell(CellFamily::Flat { c1: 1.0, c2: 1.0 }).unwrap();
        assert_eq!(compute_flatness(&cell, 64), 0.0);
        let (ra, rms) = roughness_classical(&cell, 64);
        assert_abs_diff_eq!(ra, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(rms, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn constant_custom_cell_has_zero_roughness() {
        let cell = make_cell(CellFamily::Custom {
            c1: 1.0,
            c2: 1.0,
            nx: 4,
            ny: 4,
            heights: vec![3.5; 16],
        })
        .unwrap();
        let (ra, rms) = roughness_classical(&cell, 64);
        assert_abs_diff_eq!(ra, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rms, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cells = [
            iso_ellipsoid(0.1),
            make_cell(CellFamily::SpherePacking { r_s: 0.1, r_m: 0.18 }).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for cell in &cells {
            let (c1, c2) = cell.half_widths();
            let step = 1e-5 * c1.min(c2);
            for _ in 0..100 {
                let x = rng.gen_range(-0.9 * c1..0.9 * c1);
                let y = rng.gen_range(-0.9 * c2..0.9 * c2);
                let g = cell.gradient(x, y);
                let fdx = (cell.height(x + step, y) - cell.height(x - step, y)) / (2.0 * step);
                let fdy = (cell.height(x, y + step) - cell.height(x, y - step)) / (2.0 * step);
                assert_relative_eq!(g.x, fdx, max_relative = 1e-6, epsilon = 1e-9);
                assert_relative_eq!(g.y, fdy, max_relative = 1e-6, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn surface_stays_below_opening_plane() {
        for cell in [
            iso_ellipsoid(0.1),
            make_cell(CellFamily::SpherePacking { r_s: 1.0, r_m: 1.0 }).unwrap(),
        ] {
            assert!(cell.max_height() < cell.opening_z());
        }
    }

    #[test]
    fn ellipsoid_flatness_near_two_eps_squared() {
        let eps = 0.1;
        let cell = iso_ellipsoid(eps);
        let h = compute_flatness(&cell, 128);
        // exact closed form at the corner
        let exact = 2.0 * eps * eps / (1.0 - 2.0 * eps * eps);
        assert_relative_eq!(h, exact, max_relative = 1e-6);
        assert_abs_diff_eq!(h, 2.0 * eps * eps, epsilon = 5.0 * eps.powi(4));
    }

    #[test]
    fn sphere_packing_flatness_near_two_sigma_squared() {
        // sigma = r_s/(r_s+r_m) = 0.351
        let (r_s, r_m) = (0.351, 0.649);
        let cell = make_cell(CellFamily::SpherePacking { r_s, r_m }).unwrap();
        let sigma = r_s / (r_s + r_m);
        let h = compute_flatness(&cell, 128);
        let exact = 2.0 * sigma * sigma / (1.0 - 2.0 * sigma * sigma);
        assert_relative_eq!(h, exact, max_relative = 1e-6);
        // agrees with the leading-order 2σ² up to the exact remainder
        // h − 2σ² = 4σ⁴/(1 − 2σ²), which is below 7σ⁴ for σ ≤ 0.36
        assert_abs_diff_eq!(h, 2.0 * sigma * sigma, epsilon = 7.0 * sigma.powi(4));
    }

    #[test]
    fn flatness_scales_quadratically_in_eps() {
        for eps in [0.2, 0.1, 0.05] {
            let h = compute_flatness(&iso_ellipsoid(eps), 64);
            let h_half = compute_flatness(&iso_ellipsoid(eps / 2.0), 64);
            let ratio = h / h_half;
            // h(ε) = 2ε²/(1 − 2ε²) exactly, so the doubling ratio is
            // 4(1 − ε²/2)/(1 − 2ε²): 4.26 at ε = 0.2, within 2% of 4 below 0.1.
            let exact = 4.0 * (1.0 - eps * eps / 2.0) / (1.0 - 2.0 * eps * eps);
            assert_relative_eq!(ratio, exact, max_relative = 1e-4);
            if eps <= 0.1 {
                assert!((ratio - 4.0).abs() < 0.2, "ratio {ratio} at eps {eps}");
            }
        }
    }

    #[test]
    fn isotropic_ellipsoid_lambda_is_one_sixth() {
        // λ at finite ε is (1 − 2ε²)/6 exactly, so the 1/6 limit is matched to
        // 1e-3 only once ε ≤ ~0.05.
        let eps = 0.05;
        let p = compute_shape_matrix(&iso_ellipsoid(eps), 128).unwrap();
        assert_abs_diff_eq!(p.lambda1, 1.0 / 6.0, epsilon = 1e-3);
        assert_abs_diff_eq!(p.lambda2, 1.0 / 6.0, epsilon = 1e-3);
        assert!(p.isotropic);
        let exact = (1.0 - 2.0 * eps * eps) / 6.0;
        assert_abs_diff_eq!(p.lambda1, exact, epsilon = 1e-5);
    }

    #[test]
    fn anisotropic_ellipsoid_matches_closed_form() {
        let cell = make_cell(CellFamily::Ellipsoid {
            a1: 1.0,
            a2: 1.0,
            b: 1.0,
            eps: 0.05,
            c1: 1.0,
            c2: 2.0,
        })
        .unwrap();
        let p = compute_shape_matrix(&cell, 128).unwrap();
        // λ_i = (1/3)(c_i²/a_i⁴) / (c1²/a1⁴ + c2²/a2⁴); c2 dominates.
        assert_abs_diff_eq!(p.lambda1, 4.0 / 15.0, epsilon = 1e-2);
        assert_abs_diff_eq!(p.lambda2, 1.0 / 15.0, epsilon = 1e-2);
        assert!(!p.isotropic);
    }

    #[test]
    fn sphere_packing_lambda_h_is_sigma_squared_over_three() {
        let (r_s, r_m) = (1.0, 1.0); // sigma = 0.5
        let cell = make_cell(CellFamily::SpherePacking { r_s, r_m }).unwrap();
        let p = compute_shape_matrix(&cell, 128).unwrap();
        let sigma = r_s / (r_s + r_m);
        let lh = p.lambda() * p.h;
        assert_relative_eq!(lh, sigma * sigma / 3.0, max_relative = 0.05);
    }

    #[test]
    fn trace_constraints_hold() {
        for cell in [
            iso_ellipsoid(0.1),
            make_cell(CellFamily::SpherePacking { r_s: 0.3, r_m: 0.7 }).unwrap(),
        ] {
            let p = compute_shape_matrix(&cell, 128).unwrap();
            let tr_a = p.a[0][0] + p.a[1][1];
            assert!(tr_a <= p.h + 1e-12, "trace(A) = {tr_a} > h = {}", p.h);
            let tr_l = p.lambda_matrix[0][0] + p.lambda_matrix[1][1];
            assert!((0.0..=1.0).contains(&tr_l));
            assert!(p.lambda1 >= p.lambda2 && p.lambda2 >= 0.0);
        }
    }

    #[test]
    fn flat_cell_shape_matrix_is_error() {
        let cell = make_cell(CellFamily::Flat { c1: 1.0, c2: 1.0 }).unwrap();
        assert!(matches!(
            compute_shape_matrix(&cell, 128),
            Err(MicroError::DegenerateFlat)
        ));
    }

    #[test]
    fn roughness_matches_refinement_oracle_and_scales_linearly() {
        let cell = iso_ellipsoid(0.1);
        let (ra, rms) = roughness_classical(&cell, 128);
        let (ra_hi, rms_hi) = roughness_classical(&cell, 1024);
        assert_relative_eq!(ra, ra_hi, max_relative = 1e-4);
        assert_relative_eq!(rms, rms_hi, max_relative = 1e-4);
        // f ↦ s·f scales Ra, Rms by s exactly; compare sampled grids against a
        // sampled baseline so the bilinear interpolation error cancels
        let n = 65;
        let sampled = |s: f64| {
            let heights: Vec<f64> = (0..n * n)
                .map(|idx| {
                    let (i, j) = (idx % n, idx / n);
                    let x = -1.0 + 2.0 * i as f64 / (n - 1) as f64;
                    let y = -1.0 + 2.0 * j as f64 / (n - 1) as f64;
                    s * cell.height(x, y)
                })
                .collect();
            let scaled = make_cell(CellFamily::Custom {
                c1: 1.0,
                c2: 1.0,
                nx: n,
                ny: n,
                heights,
            })
            .unwrap();
            roughness_classical(&scaled, 128)
        };
        let (ra_1, rms_1) = sampled(1.0);
        assert_relative_eq!(ra_1, ra, max_relative = 1e-2);
        assert_relative_eq!(rms_1, rms, max_relative = 1e-2);
        for s in [0.5, 2.0] {
            let (ra_s, rms_s) = sampled(s);
            assert_relative_eq!(ra_s, s * ra_1, max_relative = 1e-9);
            assert_relative_eq!(rms_s, s * rms_1, max_relative = 1e-9);
        }
    }

    #[test]
    fn sphere_packing_effective_radius() {
        let cell = make_cell(CellFamily::SpherePacking { r_s: 1.0, r_m: 1.0 }).unwrap();
        let q = cell.quadric().unwrap();
        assert_relative_eq!(q.semi_axes.x, 2.0, max_relative = 1e-14);
        assert_relative_eq!(cell.half_widths().0, 1.0, max_relative = 1e-14);
    }

    #[test]
    fn ellipsoid_closed_form_height_difference() {
        let eps = 0.1;
        let cell = iso_ellipsoid(eps);
        // f(0,0) - f(c,0) from the closed form (b/eps)(sqrt(1 - (eps x)²...) - S)
        let expected = (1.0 / eps) * (1.0 - (1.0 - eps * eps).sqrt());
        let got = cell.height(0.0, 0.0) - cell.height(1.0, 0.0);
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(make_cell(CellFamily::SpherePacking { r_s: -1.0, r_m: 1.0 }).is_err());
        assert!(make_cell(CellFamily::Ellipsoid {
            a1: 1.0,
            a2: 1.0,
            b: 1.0,
            eps: 0.9,
            c1: 1.0,
            c2: 1.0,
        })
        .is_err());
        assert!(make_cell(CellFamily::Custom {
            c1: 1.0,
            c2: 1.0,
            nx: 3,
            ny: 3,
            heights: vec![0.0; 8],
        })
        .is_err());
    }

    #[test]
    fn low_ratio_sphere_packing_warns() {
        let cell = make_cell(CellFamily::SpherePacking { r_s: 1.0, r_m: 0.2 }).unwrap();
        assert!(!cell.warnings().is_empty());
    }
}
