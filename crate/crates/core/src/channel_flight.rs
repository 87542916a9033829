//! Random flight of a point molecule in a straight circular channel:
//! free-flight geometry, displacement/time functionals, exit-time and
//! mean-square-displacement diffusivity estimators.
//!
//! η is always estimated as a ratio against the diffuse (pure cosine-law)
//! baseline, which removes the proportionality constant in τ ~ L²/𝒟.

use nalgebra::{Vector2, Vector3};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::cell_scatter::{sample_scatter, DiscVelocity};
use crate::microgeometry::SurfaceCell;
use crate::seeding::derive_seed;
use crate::stats::RunningMoments;
use crate::transition::TransitionMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRAJECTORY_CAP: u64 = 100_000_000;
const GRAZING_FRACTION: f64 = 1e-9;

/// Straight circular channel of radius R and total length 2L, molecule speed ρ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ChannelSpec {
    pub r: f64,
    pub l: f64,
    pub rho: f64,
}

impl ChannelSpec {
    pub fn new(r: f64, l: f64, rho: f64) -> Self {
        assert!(r > 0.0 && l > 0.0 && rho > 0.0);
        ChannelSpec { r, l, rho }
    }

    /// Diffusion-regime experiments want L/R well above 1.
    pub fn aspect_warning(&self) -> Option<String> {
        (self.l / self.r < 10.0)
            .then(|| format!("L/R = {:.2} < 10: outside the diffusion regime", self.l / self.r))
    }
}

/// Wall state of the flight: angular and axial position plus the outgoing
/// velocity in the local frame (τ, e, ν).
#[derive(Debug, Clone, Copy)]
pub struct FlightState {
    pub theta: f64,
    pub z: f64,
    pub v: DiscVelocity,
}

/// How the wall re-emits molecules.
#[derive(Clone, Copy)]
pub enum ScatterSource<'a> {
    /// Fresh cosine-law draw at every collision (pure Knudsen baseline).
    Diffuse,
    /// Billiard scattering in an explicit surface cell, axes aligned to (τ, e).
    Cell(&'a SurfaceCell),
    /// Row sampling of a discretized scattering operator.
    Matrix(&'a TransitionMatrix),
}

impl ScatterSource<'_> {
    pub fn label(&self) -> &'static str {
        match self {
            ScatterSource::Diffuse => "diffuse",
            ScatterSource::Cell(_) => "cell",
            ScatterSource::Matrix(_) => "matrix",
        }
    }
}

#[derive(Debug, Error)]
pub enum FlightError {
    #[error("grazing outgoing ray (normal component <= 1e-9 rho)")]
    GrazingRay,
    #[error("trajectory exceeded {TRAJECTORY_CAP} collisions")]
    TrajectoryCap,
    #[error("eta ratio requires both experiments on the same channel and n_traj")]
    MismatchedChannel,
    #[error("MSD estimator needs >= 1e3 trajectories of >= 1e3 collisions")]
    InsufficientLength,
}

/// Draw the projected velocity uniformly on the disc of radius ρ (the Knudsen
/// cosine law).
pub fn sample_cosine_law<R: Rng>(rng: &mut R, rho: f64) -> DiscVelocity {
    let r = rho * rng.gen::<f64>().sqrt();
    let theta = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
    DiscVelocity::new(Vector2::new(r * theta.cos(), r * theta.sin()), rho)
}

/// One free flight across the channel from the current wall state.
///
/// Returns the flight time `T = 2R(V·ν)/((V·ν)² + (V·τ)²)`, the axial
/// displacement `X = (V·e)·T`, and the state at the next wall point (with the
/// incoming projected velocity in the new local frame).
pub fn free_flight(
    state: &FlightState,
    channel: &ChannelSpec,
) -> Result<(f64, f64, FlightState), FlightError> {
    let rho = channel.rho;
    let w = state.v.normal_component();
    if w <= GRAZING_FRACTION * rho {
        return Err(FlightError::GrazingRay);
    }
    let u_tau = state.v.u.x;
    let u_e = state.v.u.y;
    let t = 2.0 * channel.r * w / (w * w + u_tau * u_tau);
    let x = u_e * t;

    // 3-D Cartesian step with re-projection onto the wall.
    let (sin_t, cos_t) = state.theta.sin_cos();
    let tau = Vector3::new(-sin_t, cos_t, 0.0);
    let e = Vector3::z();
    let nu = Vector3::new(-cos_t, -sin_t, 0.0);
    let p = Vector3::new(channel.r * cos_t, channel.r * sin_t, state.z);
    let v3 = u_tau * tau + u_e * e + w * nu;
    let p_new = p + t * v3;
    let radius = (p_new.x * p_new.x + p_new.y * p_new.y).sqrt();
    debug_assert!(
        ((radius - channel.r) / channel.r).abs() <= 1e-9,
        "wall radius drift {radius}"
    );
    let theta_new = p_new.y.atan2(p_new.x);

    // Incoming projection in the new frame; the molecule moves into the wall.
    let (sin_n, cos_n) = theta_new.sin_cos();
    let tau_n = Vector3::new(-sin_n, cos_n, 0.0);
    let nu_n = Vector3::new(-cos_n, -sin_n, 0.0);
    let u_in = Vector2::new(v3.dot(&tau_n), v3.dot(&e));
    debug_assert!(v3.dot(&nu_n) <= 1e-9 * rho);
    // Clamp roundoff so the projection stays inside the disc.
    let u_in = if u_in.norm() > rho {
        u_in * (rho / u_in.norm())
    } else {
        u_in
    };
    Ok((
        t,
        x,
        FlightState {
            theta: theta_new,
            z: p_new.z,
            v: DiscVelocity::new(u_in, rho),
        },
    ))
}

/// Re-emit at the wall according to the scatter source. On pathological
/// failures (grazing billiard rays) falls back to a fresh cosine-law draw and
/// counts the event.
fn scatter<R: Rng>(
    source: &ScatterSource,
    u_in: DiscVelocity,
    rng: &mut R,
    fallbacks: &mut u64,
) -> DiscVelocity {
    match source {
        ScatterSource::Diffuse => sample_cosine_law(rng, u_in.rho),
        ScatterSource::Cell(cell) => match sample_scatter(cell, u_in, rng) {
            Ok(out) => out.v_out,
            Err(_) => {
                *fallbacks += 1;
                sample_cosine_law(rng, u_in.rho)
            }
        },
        ScatterSource::Matrix(tm) => {
            let i = tm.partition.bin_of(u_in.u);
            let j = tm.sample_row(i, rng);
            let mut u = tm.partition.sample_in_bin(j, rng);
            // Avoid emitting exactly grazing velocities.
            while u_in.rho * u_in.rho - u.norm_squared()
                < (GRAZING_FRACTION * u_in.rho).powi(2)
            {
                u = tm.partition.sample_in_bin(j, rng);
            }
            DiscVelocity::new(u, u_in.rho)
        }
    }
}

/// Aggregated statistics of an exit-time experiment.
#[derive(Debug, Clone, Serialize)]
pub struct FlightStats {
    pub channel: ChannelSpec,
    pub source: String,
    pub n_traj: u64,
    /// Mean exit time with its standard error (independent trajectories).
    pub mean_exit_time: f64,
    pub exit_time_std_error: f64,
    /// Sample moments of single flights, pooled over all collisions.
    pub mean_t: f64,
    pub mean_x: f64,
    pub mean_x2: f64,
    pub mean_collisions: f64,
    /// Trajectories dropped at the collision cap.
    pub capped: u64,
    /// Billiard failures replaced by diffuse draws.
    pub scatter_fallbacks: u64,
    #[serde(skip)]
    pub exit_times: Vec<f64>,
}

/// Run `n_traj` independent exit-time trajectories. Each starts on the wall at
/// z = 0 with a cosine-law velocity and alternates free flight and scattering
/// until |z| > L; the final flight is clipped at the crossing.
///
/// Trajectories use per-index derived seeds and are merged in index order, so
/// results do not depend on the worker count.
pub fn run_exit_time_experiment(
    channel: &ChannelSpec,
    source: &ScatterSource,
    n_traj: u64,
    master_seed: u64,
) -> FlightStats {
    assert!(n_traj > 0);
    struct Partial {
        exit: RunningMoments,
        t: RunningMoments,
        x: RunningMoments,
        x2: RunningMoments,
        colls: RunningMoments,
        capped: u64,
        fallbacks: u64,
        exit_times: Vec<f64>,
    }

    let chunk = 1024u64;
    let n_chunks = n_traj.div_ceil(chunk);
    let partials: Vec<Partial> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let mut p = Partial {
                exit: RunningMoments::default(),
                t: RunningMoments::default(),
                x: RunningMoments::default(),
                x2: RunningMoments::default(),
                colls: RunningMoments::default(),
                capped: 0,
                fallbacks: 0,
                exit_times: Vec::new(),
            };
            let lo = ci * chunk;
            let hi = ((ci + 1) * chunk).min(n_traj);
            for idx in lo..hi {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, idx));
                let mut state = FlightState {
                    theta: 0.0,
                    z: 0.0,
                    v: sample_cosine_law(&mut rng, channel.rho),
                };
                let mut elapsed = 0.0;
                let mut colls = 0u64;
                loop {
                    match free_flight(&state, channel) {
                        Ok((t, _x, next)) => {
                            if next.z.abs() > channel.l {
                                // Clip the last flight at the |z| = L crossing.
                                let u_e = state.v.u.y;
                                let target = if u_e > 0.0 { channel.l } else { -channel.l };
                                let frac = ((target - state.z) / (next.z - state.z))
                                    .clamp(0.0, 1.0);
                                elapsed += t * frac;
                                p.exit.push(elapsed);
                                p.exit_times.push(elapsed);
                                p.t.push(t);
                                p.x.push(_x);
                                p.x2.push(_x * _x);
                                break;
                            }
                            elapsed += t;
                            colls += 1;
                            p.t.push(t);
                            p.x.push(_x);
                            p.x2.push(_x * _x);
                            if colls >= TRAJECTORY_CAP {
                                p.capped += 1;
                                break;
                            }
                            let v_out =
                                scatter(source, next.v, &mut rng, &mut p.fallbacks);
                            state = FlightState { v: v_out, ..next };
                        }
                        Err(_) => {
                            // Grazing outgoing ray: resample the scatter.
                            let v_out = scatter(source, state.v, &mut rng, &mut p.fallbacks);
                            state.v = v_out;
                        }
                    }
                }
                p.colls.push(colls as f64);
            }
            p
        })
        .collect();

    let mut exit = RunningMoments::default();
    let mut t = RunningMoments::default();
    let mut x = RunningMoments::default();
    let mut x2 = RunningMoments::default();
    let mut colls = RunningMoments::default();
    let mut capped = 0;
    let mut fallbacks = 0;
    let mut exit_times = Vec::with_capacity(n_traj as usize);
    for p in partials {
        exit = exit.merge(&p.exit);
        t = t.merge(&p.t);
        x = x.merge(&p.x);
        x2 = x2.merge(&p.x2);
        colls = colls.merge(&p.colls);
        capped += p.capped;
        fallbacks += p.fallbacks;
        exit_times.extend(p.exit_times);
    }
    FlightStats {
        channel: *channel,
        source: source.label().to_string(),
        n_traj,
        mean_exit_time: exit.mean(),
        exit_time_std_error: exit.std_error(),
        mean_t: t.mean(),
        mean_x: x.mean(),
        mean_x2: x2.mean(),
        mean_collisions: colls.mean(),
        capped,
        scatter_fallbacks: fallbacks,
        exit_times,
    }
}

/// η estimate with a 1σ confidence half-width.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EtaEstimate {
    pub eta: f64,
    pub std_error: f64,
}

/// η as the ratio of mean exit times, diffuse baseline over microgeometry.
pub fn estimate_eta_mc(
    stats_micro: &FlightStats,
    stats_diffuse: &FlightStats,
) -> Result<EtaEstimate, FlightError> {
    if stats_micro.channel != stats_diffuse.channel || stats_micro.n_traj != stats_diffuse.n_traj {
        return Err(FlightError::MismatchedChannel);
    }
    let eta = stats_diffuse.mean_exit_time / stats_micro.mean_exit_time;
    let rel_d = stats_diffuse.exit_time_std_error / stats_diffuse.mean_exit_time;
    let rel_m = stats_micro.exit_time_std_error / stats_micro.mean_exit_time;
    Ok(EtaEstimate {
        eta,
        std_error: eta * (rel_d * rel_d + rel_m * rel_m).sqrt(),
    })
}

/// Pooled single-flight moments from an unbounded (no-exit) chain.
///
/// The exit-time experiment clips trajectories at |z| = L, which biases pooled
/// flight moments by O(E[|X|]/L): long flights are over-represented among the
/// discarded final segments. This estimator runs the stationary wall chain
/// without an exit, so E[T], E[X], and E[X²] are unbiased.
#[derive(Debug, Clone, Serialize)]
pub struct FlightMoments {
    pub channel: ChannelSpec,
    pub source: String,
    pub n_flights: u64,
    pub mean_t: f64,
    pub t_std_error: f64,
    pub mean_x: f64,
    pub x_std_error: f64,
    pub mean_x2: f64,
    pub x2_std_error: f64,
    pub scatter_fallbacks: u64,
}

/// Sample `n_flights` single flights from the stationary wall chain (cosine-law
/// start, no axial boundary). Flights are split into fixed-size independent
/// chains with per-index derived seeds and merged in order, so results do not
/// depend on the worker count.
pub fn flight_moment_experiment(
    channel: &ChannelSpec,
    source: &ScatterSource,
    n_flights: u64,
    master_seed: u64,
) -> FlightMoments {
    assert!(n_flights > 0);
    struct Partial {
        t: RunningMoments,
        x: RunningMoments,
        x2: RunningMoments,
        fallbacks: u64,
    }

    let chunk = 8192u64;
    let n_chunks = n_flights.div_ceil(chunk);
    let partials: Vec<Partial> = (0..n_chunks)
        .into_par_iter()
        .map(|ci| {
            let mut p = Partial {
                t: RunningMoments::default(),
                x: RunningMoments::default(),
                x2: RunningMoments::default(),
                fallbacks: 0,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, ci));
            let mut state = FlightState {
                theta: 0.0,
                z: 0.0,
                v: sample_cosine_law(&mut rng, channel.rho),
            };
            let target = (ci * chunk + chunk).min(n_flights) - ci * chunk;
            let mut n = 0u64;
            while n < target {
                match free_flight(&state, channel) {
                    Ok((t, x, next)) => {
                        p.t.push(t);
                        p.x.push(x);
                        p.x2.push(x * x);
                        n += 1;
                        let v_out = scatter(source, next.v, &mut rng, &mut p.fallbacks);
                        state = FlightState { v: v_out, ..next };
                    }
                    Err(_) => {
                        let v_out = scatter(source, state.v, &mut rng, &mut p.fallbacks);
                        state.v = v_out;
                    }
                }
            }
            p
        })
        .collect();

    let mut t = RunningMoments::default();
    let mut x = RunningMoments::default();
    let mut x2 = RunningMoments::default();
    let mut fallbacks = 0;
    for p in partials {
        t = t.merge(&p.t);
        x = x.merge(&p.x);
        x2 = x2.merge(&p.x2);
        fallbacks += p.fallbacks;
    }
    FlightMoments {
        channel: *channel,
        source: source.label().to_string(),
        n_flights,
        mean_t: t.mean(),
        t_std_error: t.std_error(),
        mean_x: x.mean(),
        x_std_error: x.std_error(),
        mean_x2: x2.mean(),
        x2_std_error: x2.std_error(),
        scatter_fallbacks: fallbacks,
    }
}

/// Mean-square-displacement estimate in an unbounded channel.
#[derive(Debug, Clone, Serialize)]
pub struct MsdStats {
    /// (collision count n, Var(S_n)) checkpoints.
    pub checkpoints: Vec<(u64, f64)>,
    pub mean_t: f64,
    /// Slope of Var(S_n) vs n divided by the mean flight time; proportional to
    /// the diffusivity, to be used only in ratios.
    pub proxy: f64,
    /// False when Var(S_n)/n keeps growing (ballistic motion, no limit).
    pub converged: bool,
}

/// Estimate the diffusivity proxy Var(S_n)/(n·E[T]) from `n_traj` trajectories
/// of `n_coll` collisions each (L = ∞ mode, no exit).
pub fn msd_estimator(
    channel: &ChannelSpec,
    source: &ScatterSource,
    n_traj: u64,
    n_coll: u64,
    master_seed: u64,
) -> Result<MsdStats, FlightError> {
    if n_traj < 1_000 || n_coll < 1_000 {
        return Err(FlightError::InsufficientLength);
    }
    let n_checkpoints = 10usize;
    let step = n_coll / n_checkpoints as u64;
    let checkpoints: Vec<u64> = (1..=n_checkpoints as u64).map(|k| k * step).collect();

    let per_traj: Vec<(Vec<f64>, RunningMoments)> = (0..n_traj)
        .into_par_iter()
        .map(|idx| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, idx));
            let mut state = FlightState {
                theta: 0.0,
                z: 0.0,
                v: sample_cosine_law(&mut rng, channel.rho),
            };
            let mut s = 0.0;
            let mut t_moments = RunningMoments::default();
            let mut snapshots = Vec::with_capacity(checkpoints.len());
            let mut next_cp = 0usize;
            let mut fallbacks = 0u64;
            let mut n = 0u64;
            while n < n_coll {
                match free_flight(&state, channel) {
                    Ok((t, x, next)) => {
                        s += x;
                        t_moments.push(t);
                        n += 1;
                        if next_cp < checkpoints.len() && n == checkpoints[next_cp] {
                            snapshots.push(s);
                            next_cp += 1;
                        }
                        let v_out = scatter(source, next.v, &mut rng, &mut fallbacks);
                        state = FlightState { v: v_out, ..next };
                    }
                    Err(_) => {
                        let v_out = scatter(source, state.v, &mut rng, &mut fallbacks);
                        state.v = v_out;
                    }
                }
            }
            (snapshots, t_moments)
        })
        .collect();

    let mut t_all = RunningMoments::default();
    let mut var_at: Vec<RunningMoments> = vec![RunningMoments::default(); checkpoints.len()];
    for (snap, tm) in &per_traj {
        t_all = t_all.merge(tm);
        for (k, &s) in snap.iter().enumerate() {
            var_at[k].push(s);
        }
    }
    let cps: Vec<(u64, f64)> = checkpoints
        .iter()
        .zip(&var_at)
        .map(|(&n, m)| (n, m.variance()))
        .collect();
    // Linear fit Var(S_n) = a·n through the origin.
    let num: f64 = cps.iter().map(|&(n, v)| n as f64 * v).sum();
    let den: f64 = cps.iter().map(|&(n, _)| (n as f64).powi(2)).sum();
    let slope = num / den;
    let first = cps.first().map(|&(n, v)| v / n as f64).unwrap_or(0.0);
    let last = cps.last().map(|&(n, v)| v / n as f64).unwrap_or(0.0);
    let converged = first > 0.0 && last / first < 2.0;
    Ok(MsdStats {
        checkpoints: cps,
        mean_t: t_all.mean(),
        proxy: slope / t_all.mean(),
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microgeometry::{make_cell, CellFamily};
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn cosine_law_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut m2 = RunningMoments::default();
        let mut mx = RunningMoments::default();
        let mut my = RunningMoments::default();
        for _ in 0..1_000_000 {
            let v = sample_cosine_law(&mut rng, 1.0);
            assert!(v.u.norm() <= 1.0);
            m2.push(v.u.norm_squared());
            mx.push(v.u.x);
            my.push(v.u.y);
        }
        assert!((m2.mean() - 0.5).abs() < 3.0 * m2.std_error());
        assert!(mx.mean().abs() < 3.0 * mx.std_error());
        assert!(my.mean().abs() < 3.0 * my.std_error());
    }

    #[test]
    fn diametric_crossing() {
        let channel = ChannelSpec::new(1.0, 100.0, 1.0);
        let state = FlightState {
            theta: 0.3,
            z: 0.0,
            v: DiscVelocity::new(Vector2::zeros(), 1.0),
        };
        let (t, x, next) = free_flight(&state, &channel).unwrap();
        assert_relative_eq!(t, 2.0, max_relative = 1e-12);
        assert_abs_diff_eq!(x, 0.0, epsilon = 1e-12);
        // Diametrically opposite point.
        let d = (next.theta - state.theta).rem_euclid(2.0 * std::f64::consts::PI);
        assert_relative_eq!(d, std::f64::consts::PI, max_relative = 1e-9);
    }

    #[test]
    fn oblique_crossing_formulas() {
        let channel = ChannelSpec::new(1.0, 100.0, 1.0);
        let s = 1.0 / 2.0f64.sqrt();
        let state = FlightState {
            theta: 0.0,
            z: 0.0,
            v: DiscVelocity::new(Vector2::new(0.0, s), 1.0),
        };
        let (t, x, _) = free_flight(&state, &channel).unwrap();
        assert_relative_eq!(t, 2.0 * 2.0f64.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(x, 2.0, max_relative = 1e-12);
    }

    #[test]
    fn mean_flight_time_is_two_r_over_rho() {
        let channel = ChannelSpec::new(1.0, 1e6, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut m = RunningMoments::default();
        let mut state = FlightState {
            theta: 0.0,
            z: 0.0,
            v: sample_cosine_law(&mut rng, 1.0),
        };
        for _ in 0..1_000_000 {
            match free_flight(&state, &channel) {
                Ok((t, _, next)) => {
                    m.push(t);
                    state = FlightState {
                        v: sample_cosine_law(&mut rng, 1.0),
                        ..next
                    };
                }
                Err(_) => state.v = sample_cosine_law(&mut rng, 1.0),
            }
        }
        assert_relative_eq!(m.mean(), 2.0, max_relative = 0.01);
    }

    #[test]
    fn sample_x2_matches_quadrature_oracle() {
        // Oracle: E[X²] over the uniform unit disc by 2-D quadrature, using
        // the exact angular integral ∫ sin²θ/(1−s sin²θ)² dθ = π(1−s)^{−3/2},
        // giving E[X²] = 2∫₀¹ s(1−s)^{−1/2} ds = 8/3 for R = ρ = 1.
        // The radial integrand 2s(1−s)^{−1/2} has an endpoint singularity;
        // substitute s = 1 − t² to make it polynomial before quadrature.
        let rule = crate::quadrature::GaussLegendre::new(256);
        let oracle = rule.integrate(0.0, 1.0, |t| 2.0 * (1.0 - t * t) * 2.0);
        assert_relative_eq!(oracle, 8.0 / 3.0, max_relative = 1e-12);

        // The unbounded chain avoids the O(E[|X|]/L) survival bias of the
        // finite-channel experiment; E[X⁴] = ∞, so the X² sample mean needs a
        // large sample to settle within 1% (fluctuations decay like n^(-1/3)).
        let channel = ChannelSpec::new(1.0, 50.0, 1.0);
        let stats =
            flight_moment_experiment(&channel, &ScatterSource::Diffuse, 64_000_000, 3141);
        assert_relative_eq!(stats.mean_x2, oracle, max_relative = 0.01);
        assert_relative_eq!(stats.mean_t, 2.0, max_relative = 0.01);
        assert!(stats.mean_x.abs() < 0.05);
    }

    #[test]
    fn eta_of_identical_experiments_is_one() {
        let channel = ChannelSpec::new(1.0, 20.0, 1.0);
        let a = run_exit_time_experiment(&channel, &ScatterSource::Diffuse, 10_000, 42);
        let b = run_exit_time_experiment(&channel, &ScatterSource::Diffuse, 10_000, 42);
        let eta = estimate_eta_mc(&a, &b).unwrap();
        assert_eq!(eta.eta, 1.0);
        let c = run_exit_time_experiment(&channel, &ScatterSource::Diffuse, 10_000, 43);
        let eta2 = estimate_eta_mc(&a, &c).unwrap();
        assert!((eta2.eta - 1.0).abs() < 3.0 * eta2.std_error);
    }

    #[test]
    fn mismatched_channels_rejected() {
        let a = run_exit_time_experiment(
            &ChannelSpec::new(1.0, 20.0, 1.0),
            &ScatterSource::Diffuse,
            10_000,
            1,
        );
        let b = run_exit_time_experiment(
            &ChannelSpec::new(1.0, 25.0, 1.0),
            &ScatterSource::Diffuse,
            10_000,
            1,
        );
        assert!(matches!(
            estimate_eta_mc(&a, &b),
            Err(FlightError::MismatchedChannel)
        ));
    }

    #[test]
    fn diffuse_exit_time_scales_as_l_squared() {
        // Channel-end corrections to τ ~ L² are O(R/L) with a large prefactor
        // (about 20% at L/R = 25), so fit the exponent over L/R ∈ [50, 200].
        let mut taus = Vec::new();
        for l in [50.0, 100.0, 200.0] {
            let channel = ChannelSpec::new(1.0, l, 1.0);
            let s = run_exit_time_experiment(&channel, &ScatterSource::Diffuse, 4_000, 5);
            taus.push((l, s.mean_exit_time));
        }
        let slope = ((taus[2].1 / taus[0].1) as f64).ln() / ((taus[2].0 / taus[0].0) as f64).ln();
        assert!((slope - 2.0).abs() < 0.1, "fit exponent {slope}");
    }

    #[test]
    fn specular_flat_exit_time_scales_as_l() {
        let flat = make_cell(CellFamily::Flat { c1: 1.0, c2: 1.0 }).unwrap();
        let mut taus = Vec::new();
        // Same master seed for every L: each trajectory draws the same initial
        // velocity, so its exit time is (up to one crossing) proportional to L
        // even though the exit-time distribution is heavy-tailed.
        for l in [25.0, 50.0, 100.0] {
            let channel = ChannelSpec::new(1.0, l, 1.0);
            let s =
                run_exit_time_experiment(&channel, &ScatterSource::Cell(&flat), 4_000, 6);
            taus.push((l, s.mean_exit_time));
        }
        let slope = ((taus[2].1 / taus[0].1) as f64).ln() / ((taus[2].0 / taus[0].0) as f64).ln();
        assert!((slope - 1.0).abs() < 0.1, "fit exponent {slope}");
    }

    #[test]
    fn stationarity_after_burn_in() {
        // Distribution of u at the k-th collision stays uniform on the disc.
        let channel = ChannelSpec::new(1.0, 1e9, 1.0);
        let partition = crate::transition::DiscPartition::new(5, 5, 1.0);
        let mut counts = vec![0u64; partition.len()];
        let k_target = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for _ in 0..20_000 {
            let mut state = FlightState {
                theta: 0.0,
                z: 0.0,
                v: sample_cosine_law(&mut rng, 1.0),
            };
            let mut k = 0;
            loop {
                match free_flight(&state, &channel) {
                    Ok((_, _, next)) => {
                        k += 1;
                        let v_out = sample_cosine_law(&mut rng, 1.0);
                        if k == k_target {
                            counts[partition.bin_of(v_out.u)] += 1;
                            break;
                        }
                        state = FlightState { v: v_out, ..next };
                    }
                    Err(_) => state.v = sample_cosine_law(&mut rng, 1.0),
                }
            }
        }
        let r = crate::stats::chi_square_uniform(&counts);
        assert!(r.p_value > 0.01, "p = {}", r.p_value);
    }

    #[test]
    fn msd_matches_x2_for_diffuse_and_flags_ballistic() {
        let channel = ChannelSpec::new(1.0, 1.0, 1.0);
        let msd = msd_estimator(&channel, &ScatterSource::Diffuse, 1_000, 1_000, 12).unwrap();
        // i.i.d. increments: Var(S_n) = n·E[X²]
        let (n, var) = *msd.checkpoints.last().unwrap();
        let per = var / n as f64;
        assert_relative_eq!(per, 8.0 / 3.0, max_relative = 0.15);
        assert!(msd.converged);

        let flat = make_cell(CellFamily::Flat { c1: 1.0, c2: 1.0 }).unwrap();
        let msd_flat =
            msd_estimator(&channel, &ScatterSource::Cell(&flat), 1_000, 1_000, 13).unwrap();
        assert!(!msd_flat.converged, "specular flat must be flagged ballistic");
    }

    #[test]
    fn msd_preconditions() {
        let channel = ChannelSpec::new(1.0, 1.0, 1.0);
        assert!(matches!(
            msd_estimator(&channel, &ScatterSource::Diffuse, 10, 1_000, 1),
            Err(FlightError::InsufficientLength)
        ));
    }

    #[test]
    fn experiment_is_thread_count_independent() {
        let channel = ChannelSpec::new(1.0, 20.0, 1.0);
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool8 = rayon::ThreadPoolBuilder::new().num_threads(8).build().unwrap();
        let a = pool1
            .install(|| run_exit_time_experiment(&channel, &ScatterSource::Diffuse, 5_000, 99));
        let b = pool8
            .install(|| run_exit_time_experiment(&channel, &ScatterSource::Diffuse, 5_000, 99));
        assert_eq!(a.mean_exit_time.to_bits(), b.mean_exit_time.to_bits());
        assert_eq!(a.mean_x2.to_bits(), b.mean_x2.to_bits());
    }
}
