//! Backward integration of the costates along stored forward paths.
//!
//! The objective is the hitting time of a target ball, censored at the
//! horizon. On a path that first enters the ball at grid index `k_hit`, the
//! costate vanishes from `k_hit` on, takes the transversality value
//! [`entry_costate`] at `k_hit - 1`, and is carried backward by explicit
//! Euler on `-grad H`:
//!
//! ```text
//! p_k = p_{k+1} + dt * grad_(x,y) H(s_k, u_k, p_{k+1}, q_k, r_k)
//! ```
//!
//! Censored paths carry `p = 0` throughout, as does every path when no
//! target is given. Either way `p(T) = 0`.
//!
//! A component that the forward step clamped at the positivity floor does
//! not depend on the previous state, so its entry of `p_{k+1}` is dropped
//! before the step. Clamps are detected by replaying the step from the
//! stored noise.

use nalgebra::{Matrix4, Vector4};

use crate::error::{Error, Result};
use crate::model::{drift_unchecked, ModelParams, State};
use crate::montecarlo::TargetSpec;
use crate::noise::{NoiseIncrement, NoiseParams};
use crate::sim::{step_unchecked, Path};

use super::hamiltonian::adjoint_drift_unchecked;
use super::{AdjointState, ControlSchedule, QMode, SweepConfig};

/// Costate at the last grid point before entering `target`.
///
/// For every coordinate still outside the ball the drift gives a time to
/// reach its face; the slowest coordinate `i` decides the entry, and the
/// sensitivity of the entry time to `s_i` is `-1 / f_i`. When some outside
/// coordinate is moving away (the entry was caused by noise) or the state is
/// already inside, the costate is zero.
pub fn entry_costate(s: State, ctrl: (f64, f64), mp: &ModelParams, target: &TargetSpec) -> (f64, f64) {
    let mp = mp.with_controls(ctrl.0, ctrl.1);
    let (fx, fy) = drift_unchecked(s, &mp);
    let c = target.target;
    let mut slowest: Option<(usize, f64)> = None;
    for (i, (v, center, f)) in [(s.x, c.x, fx), (s.y, c.y, fy)].into_iter().enumerate() {
        let gap = (v - center).abs() - target.epsilon;
        if gap <= 0.0 {
            continue;
        }
        let toward = -(v - center).signum() * f;
        if !(toward > 0.0) {
            return (0.0, 0.0);
        }
        let t = gap / toward;
        if slowest.is_none_or(|(_, best)| t > best) {
            slowest = Some((i, t));
        }
    }
    match slowest {
        Some((0, _)) => (-1.0 / fx, 0.0),
        Some(_) => (0.0, -1.0 / fy),
        None => (0.0, 0.0),
    }
}

fn noise_of(path: &Path, index: usize) -> Result<&[NoiseIncrement]> {
    path.noise.as_deref().ok_or_else(|| {
        Error::Config(format!("path {index} has no noise record; simulate with record_noise = true"))
    })
}

fn check_paths(paths: &[Path], schedule: &ControlSchedule) -> Result<()> {
    for (j, path) in paths.iter().enumerate() {
        let noise = noise_of(path, j)?;
        if path.is_empty() || path.len() > schedule.len() {
            return Err(Error::Config(format!(
                "path {j} has {} points for a schedule of {}",
                path.len(),
                schedule.len()
            )));
        }
        if noise.len() + 1 < path.len() {
            return Err(Error::Config(format!("path {j} noise record is shorter than the path")));
        }
    }
    Ok(())
}

/// Grid index at which costate integration starts, i.e. the point before
/// the first entry, or `None` when `p` vanishes on the whole path.
fn entry_index(path: &Path, target: Option<&TargetSpec>) -> Option<usize> {
    let k = target?.first_entry(&path.states)?;
    k.checked_sub(1)
}

/// Costates for each path on the grid of `schedule`.
///
/// Paths may be truncated at their first entry into `target`; the costate
/// is zero beyond the stored points. In [`QMode::Regression`] the `q` and
/// `r` entries at step `k` are the cross-sectional least-squares
/// coefficients of `p_{k+1}` on `(dW1, dW2, dN - lambda dt)`, fitted over the
/// paths that have a noise record for that step; all paths are then
/// integrated with the shared coefficients.
pub fn backward_pass(
    paths: &[Path],
    schedule: &ControlSchedule,
    mp: &ModelParams,
    np: &NoiseParams,
    cfg: &SweepConfig,
    target: Option<&TargetSpec>,
) -> Result<Vec<Vec<AdjointState>>> {
    check_paths(paths, schedule)?;
    let n_points = schedule.len();
    let mut out = vec![vec![AdjointState::ZERO; n_points]; paths.len()];
    let starts: Vec<Option<usize>> = paths.iter().map(|p| entry_index(p, target)).collect();

    match cfg.q_mode {
        QMode::PathwiseZero => {
            for (j, path) in paths.iter().enumerate() {
                if let Some(k0) = starts[j] {
                    pathwise(path, k0, schedule, mp, np, target.expect("entry implies a target"), &mut out[j])
                        .map_err(|e| Error::InPath { path: j, source: Box::new(e) })?;
                }
            }
        }
        QMode::Regression => regression(paths, &starts, schedule, mp, np, target, &mut out)?,
    }
    Ok(out)
}

fn check_costate(adj: &AdjointState, k: usize) -> Result<()> {
    if adj.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericalOverflow { step: k, detail: format!("costate became ({}, {})", adj.p1, adj.p2) })
    }
}

/// `p_{k+1}` with the components clamped in step `k -> k+1` removed.
fn unclamped(path: &Path, k: usize, mp: &ModelParams, np: &NoiseParams, next: AdjointState) -> AdjointState {
    let (Some(inc), Some(stored)) = (path.noise.as_ref().and_then(|n| n.get(k)), path.states.get(k + 1)) else {
        return next;
    };
    let (raw, _) = step_unchecked(path.states[k], mp, np, inc, path.dt(), f64::NEG_INFINITY);
    let mut out = next;
    if raw.x != stored.x {
        out.p1 = 0.0;
    }
    if raw.y != stored.y {
        out.p2 = 0.0;
    }
    out
}

/// Single-path backward sweep with `q = r = 0`.
pub(crate) fn pathwise(
    path: &Path,
    k0: usize,
    schedule: &ControlSchedule,
    mp: &ModelParams,
    np: &NoiseParams,
    target: &TargetSpec,
    out: &mut [AdjointState],
) -> Result<()> {
    let dt = path.dt();
    let mut local = *mp;
    schedule.apply(k0, &mut local);
    let (p1, p2) = entry_costate(path.states[k0], (local.alpha, local.xi), &local, target);
    out[k0] = AdjointState::from_p(p1, p2);
    check_costate(&out[k0], k0)?;
    for k in (0..k0).rev() {
        schedule.apply(k, &mut local);
        let next = unclamped(path, k, &local, np, out[k + 1]);
        let (d1, d2) = adjoint_drift_unchecked(path.states[k], &local, np, &next);
        out[k] = AdjointState::from_p(next.p1 - dt * d1, next.p2 - dt * d2);
        check_costate(&out[k], k)?;
    }
    Ok(())
}

/// Least-squares fit of `(p1, p2)` on `[1, dW1, dW2, dN~]`; returns the
/// slope rows, or zeros when fewer than two rows are available.
fn fit_step(rows: &[(NoiseIncrement, f64, f64)], np: &NoiseParams, dt: f64) -> AdjointState {
    let use_jump = np.lambda > 0.0;
    let dim = if use_jump { 4 } else { 3 };
    if rows.len() < 2 {
        return AdjointState::ZERO;
    }
    let mut xtx = Matrix4::<f64>::zeros();
    let mut xt1 = Vector4::<f64>::zeros();
    let mut xt2 = Vector4::<f64>::zeros();
    for (inc, p1, p2) in rows {
        let v = Vector4::new(1.0, inc.dw1, inc.dw2, if use_jump { inc.dn1 as f64 - np.lambda * dt } else { 0.0 });
        xtx += v * v.transpose();
        xt1 += v * *p1;
        xt2 += v * *p2;
    }
    if !use_jump {
        xtx[(3, 3)] = 1.0;
    }
    let svd = xtx.svd(true, true);
    let eps = 1e-12 * svd.singular_values.max();
    let b1 = svd.solve(&xt1, eps).unwrap_or_else(|_| Vector4::zeros());
    let b2 = svd.solve(&xt2, eps).unwrap_or_else(|_| Vector4::zeros());
    let r = |v: f64| if v.is_finite() { v } else { 0.0 };
    AdjointState {
        p1: 0.0,
        p2: 0.0,
        q1: r(b1[1]),
        q2: r(b1[2]),
        q3: r(b2[1]),
        q4: r(b2[2]),
        r1: if dim == 4 { r(b1[3]) } else { 0.0 },
        r2: if dim == 4 { r(b2[3]) } else { 0.0 },
    }
}

fn regression(
    paths: &[Path],
    starts: &[Option<usize>],
    schedule: &ControlSchedule,
    mp: &ModelParams,
    np: &NoiseParams,
    target: Option<&TargetSpec>,
    out: &mut [Vec<AdjointState>],
) -> Result<()> {
    let Some(target) = target else { return Ok(()) };
    let Some(k_top) = starts.iter().flatten().copied().max() else { return Ok(()) };
    let dt = paths[0].dt();
    let mut local = *mp;
    let mut rows = Vec::with_capacity(paths.len());
    for j in 0..paths.len() {
        if let Some(k0) = starts[j] {
            schedule.apply(k0, &mut local);
            let (p1, p2) = entry_costate(paths[j].states[k0], (local.alpha, local.xi), &local, target);
            out[j][k0] = AdjointState::from_p(p1, p2);
            check_costate(&out[j][k0], k0).map_err(|e| Error::InPath { path: j, source: Box::new(e) })?;
        }
    }
    for k in (0..k_top).rev() {
        rows.clear();
        for (j, path) in paths.iter().enumerate() {
            let noise = noise_of(path, j)?;
            if k < noise.len() && k + 1 < path.len() {
                let next = out[j][k + 1];
                rows.push((noise[k], next.p1, next.p2));
            }
        }
        let coeffs = fit_step(&rows, np, dt);
        schedule.apply(k, &mut local);
        for (j, path) in paths.iter().enumerate() {
            let Some(k0) = starts[j] else { continue };
            if k >= k0 {
                continue;
            }
            let kept = unclamped(path, k, &local, np, out[j][k + 1]);
            let next = AdjointState { p1: kept.p1, p2: kept.p2, ..coeffs };
            let (d1, d2) = adjoint_drift_unchecked(path.states[k], &local, np, &next);
            out[j][k] = AdjointState { p1: next.p1 - dt * d1, p2: next.p2 - dt * d2, ..coeffs };
            check_costate(&out[j][k], k).map_err(|e| Error::InPath { path: j, source: Box::new(e) })?;
        }
    }
    Ok(())
}
