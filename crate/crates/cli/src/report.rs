//! Report types. All reports serialize to schema-stable JSON: field order is
//! the struct declaration order, no maps with nondeterministic iteration, and
//! no wall-clock or host-dependent fields, so identical runs produce
//! byte-identical files.

use knudsen_core::microgeometry::MicroParams;
use serde::Serialize;

/// Echo of the configuration that produced a report, in raw units and
/// normalized to R = ρ = 1.
#[derive(Debug, Clone, Serialize)]
pub struct ChannelEcho {
    pub r: f64,
    pub l: Vec<f64>,
    pub rho: f64,
    pub l_over_r: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunEcho {
    pub cell_family: String,
    pub channel: ChannelEcho,
    pub seed: u64,
    pub n_traj: u64,
    pub samples_per_bin: u64,
    pub bins: (usize, usize),
    pub truncation: (usize, usize),
}

/// The macroscopic constant under every documented convention.
///
/// Two eigenvalue conventions (`fitted`: eigenvalues verified by residual fit
/// against the quadrature operator; `formula`: the closed-form product) cross
/// two normalizations of ‖X‖² (`oracle`: independent quadrature, ≈ 8/3 R²;
/// `printed`: the 4/3 R² value carried by the source derivation). `selected`
/// is the convention validated against the other pipelines.
#[derive(Debug, Clone, Serialize)]
pub struct CSection {
    pub fitted_oracle: f64,
    pub formula_oracle: f64,
    pub fitted_printed: f64,
    pub formula_printed: f64,
    pub selected: f64,
    pub selected_convention: String,
    pub x_norm2_oracle: f64,
    pub x_norm2_printed: f64,
    pub parseval_sum: f64,
    pub converged: bool,
}

/// A single η estimate with a 1σ half-width (zero for deterministic pipelines).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EtaEntry {
    pub eta: f64,
    pub ci_half_width: f64,
}

/// η_mc at one channel half-length.
#[derive(Debug, Clone, Serialize)]
pub struct McEtaEntry {
    pub l: f64,
    pub eta: f64,
    pub ci_half_width: f64,
    pub mean_exit_time_cell: f64,
    pub mean_exit_time_diffuse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairwiseDiffs {
    /// |a − b| / ((a + b)/2) for each available pair; absent pipelines omit.
    pub analytic_vs_matrix: Option<f64>,
    pub analytic_vs_mc: Option<f64>,
    pub matrix_vs_mc: Option<f64>,
}

/// Data-quality flags; all fields are always present (empty when clean).
#[derive(Debug, Clone, Default, Serialize)]
pub struct QualityFlags {
    pub warnings: Vec<String>,
    pub scatter_fallbacks: u64,
    pub capped_trajectories: u64,
    pub matrix_failed_rays: u64,
    pub matrix_asymmetry: f64,
    pub symmetrization_defect: f64,
    pub truncation_converged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixSection {
    pub n_bins: usize,
    pub gamma: f64,
    pub eta_key: f64,
    pub eta_spectral: f64,
    pub top_eigenvalues: Vec<f64>,
}

/// η_analytic = 2C/(λh) − 1 under each C convention, for cross-checks.
#[derive(Debug, Clone, Serialize)]
pub struct AnalyticByConvention {
    pub fitted_oracle: f64,
    pub formula_oracle: f64,
    pub fitted_printed: f64,
    pub formula_printed: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EtaReport {
    pub run: RunEcho,
    pub micro: MicroParams,
    pub roughness_ra: f64,
    pub roughness_rms: f64,
    pub c: Option<CSection>,
    pub theta: Option<f64>,
    pub eta_analytic: Option<EtaEntry>,
    pub eta_analytic_by_convention: Option<AnalyticByConvention>,
    pub eta_matrix: Option<EtaEntry>,
    pub matrix: Option<MatrixSection>,
    pub eta_mc: Option<EtaEntry>,
    pub eta_mc_by_l: Vec<McEtaEntry>,
    pub pairwise: PairwiseDiffs,
    pub flags: QualityFlags,
}

pub fn pairwise_rel_diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) if a + b != 0.0 => Some((a - b).abs() / (0.5 * (a + b)).abs()),
        _ => None,
    }
}

/// Write any serializable report as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &std::path::Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut out = serde_json::to_vec_pretty(value)?;
    out.push(b'\n');
    std::fs::write(path, out)?;
    Ok(())
}
