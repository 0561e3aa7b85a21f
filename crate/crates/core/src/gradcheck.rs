//! Finite-difference gradient checking: the universal numerical oracle
//! for every backward rule in this crate. Central differences in double
//! precision, compared coordinate-by-coordinate against the tape.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamSet;
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub epsilon: f64,
    /// Max coordinates checked per parameter tensor; larger tensors are
    /// subsampled deterministically.
    pub samples_per_param: usize,
    pub seed: u64,
    /// Max relative error allowed for a pass.
    pub threshold: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5, samples_per_param: 50, seed: 0, threshold: 1e-4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    /// Max relative error over the finite, resolvable coordinates.
    pub max_rel_err: f64,
    pub worst: Option<CoordCheck>,
    /// Coordinates whose perturbed loss was non-finite.
    pub failed_coords: usize,
    /// Coordinates where both gradients sit below the finite-difference
    /// resolution limit (quantization of the rounded loss at the given
    /// step); they carry no measurable signal either way.
    pub below_resolution: usize,
    /// Coordinates whose perturbation interval crosses a kink (relu,
    /// clamp, pooling argmax switch): the one-sided differences disagree,
    /// so a central difference is meaningless there.
    pub nonsmooth_skipped: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    /// Parameter name -> max relative error.
    pub by_name: BTreeMap<String, f64>,
    pub max_rel_err: f64,
    pub threshold: f64,
    /// Gradient magnitude below which central differences at the used
    /// step cannot distinguish a value from rounding noise of the loss.
    pub resolution_band: f64,
    pub pass: bool,
}

impl GradCheckReport {
    /// Parameter name -> max relative error, for CI consumption.
    pub fn name_map(&self) -> BTreeMap<String, f64> {
        self.params.iter().map(|p| (p.name.clone(), p.max_rel_err)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Check the analytic gradients produced by `forward_backward` against
/// central differences of `forward`.
///
/// `forward` must be a pure loss evaluation; `forward_backward` must
/// accumulate gradients into the parameter set it is given (grads are
/// zeroed beforehand). Work is split across parameter tensors; the
/// report is deterministic for a fixed seed.
pub fn gradient_check<S, F, B>(
    params: &ParamSet<S>,
    forward: F,
    forward_backward: B,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    S: Scalar,
    F: Fn(&ParamSet<S>) -> Result<S> + Sync,
    B: FnOnce(&mut ParamSet<S>) -> Result<S>,
{
    let mut work = params.clone();
    work.zero_grads();
    let base_loss = forward_backward(&mut work)?.as_f64();
    let analytic: Vec<Vec<f64>> = work
        .iter()
        .map(|(_, p)| p.grad.data().iter().map(|g| g.as_f64()).collect())
        .collect();

    // The perturbed losses are rounded to ulp(loss); a central difference
    // therefore quantizes in steps of ~ulp/(2·eps), and gradients below
    // a few quanta over the threshold cannot be certified at all.
    let quantum = f64::EPSILON * base_loss.abs().max(1.0) / (2.0 * cfg.epsilon);
    let resolution_band = 32.0 * quantum / cfg.threshold;

    let metas: Vec<(usize, String, usize)> = work
        .iter()
        .map(|(pid, p)| (pid.0, p.name.clone(), p.value.numel()))
        .collect();

    let checks: Vec<Result<ParamCheck>> = metas
        .par_iter()
        .map(|(pidx, name, numel)| {
            let mut local = work.clone();
            let coords = sample_coords(*numel, cfg.samples_per_param, cfg.seed, *pidx);
            let base = forward(&local)?.as_f64();
            let mut max_rel = 0.0f64;
            let mut worst = None;
            let mut failed = 0usize;
            let mut unresolvable = 0usize;
            let mut nonsmooth = 0usize;
            // Central difference validated by the two one-sided slopes.
            // Smooth curvature makes them disagree by eps*f'' which
            // shrinks with the step, while a kink inside the interval
            // keeps them apart; halving the step until they agree both
            // rejects kink-crossing intervals and retains coordinates
            // with benign curvature.
            let probe = |local: &mut ParamSet<S>,
                         pid: crate::autograd::ParamId,
                         ci: usize,
                         step: f64|
             -> Result<Option<Option<f64>>> {
                let orig = local.value(pid).data()[ci];
                let eps = S::from_f64(step);
                local.value_mut(pid).data_mut()[ci] = orig + eps;
                let lp = forward(local)?;
                local.value_mut(pid).data_mut()[ci] = orig - eps;
                let lm = forward(local)?;
                local.value_mut(pid).data_mut()[ci] = orig;
                if !lp.is_finite() || !lm.is_finite() {
                    return Ok(None); // non-finite: failed coordinate
                }
                let fd_r = (lp.as_f64() - base) / step;
                let fd_l = (base - lm.as_f64()) / step;
                let jump = (fd_r - fd_l).abs();
                let noise_floor = 8.0 * quantum * (cfg.epsilon / step);
                if jump > (cfg.threshold * fd_r.abs().max(fd_l.abs())).max(noise_floor) {
                    return Ok(Some(None)); // slopes disagree at this step
                }
                Ok(Some(Some((lp.as_f64() - lm.as_f64()) / (2.0 * step))))
            };
            'coords: for &ci in &coords {
                let pid = crate::autograd::ParamId(*pidx);
                let an = analytic[*pidx][ci];
                let mut numeric = None;
                for halvings in 0..4 {
                    let step = cfg.epsilon / f64::powi(2.0, halvings);
                    match probe(&mut local, pid, ci, step)? {
                        None => {
                            failed += 1;
                            continue 'coords;
                        }
                        Some(Some(fd)) => {
                            numeric = Some(fd);
                            break;
                        }
                        Some(None) => {}
                    }
                }
                let numeric = match numeric {
                    Some(fd) => fd,
                    None => {
                        nonsmooth += 1;
                        continue;
                    }
                };
                if an.abs() < resolution_band && numeric.abs() < resolution_band {
                    unresolvable += 1;
                    continue;
                }
                let rel = relative_error(an, numeric);
                if rel > max_rel {
                    max_rel = rel;
                    worst = Some(CoordCheck { index: ci, analytic: an, numeric, rel_err: rel });
                }
            }
            Ok(ParamCheck {
                name: name.clone(),
                coords_checked: coords.len(),
                max_rel_err: max_rel,
                worst,
                failed_coords: failed,
                below_resolution: unresolvable,
                nonsmooth_skipped: nonsmooth,
            })
        })
        .collect();

    let mut param_checks = Vec::with_capacity(checks.len());
    for c in checks {
        param_checks.push(c?);
    }
    let max_rel_err = param_checks.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
    let any_failed = param_checks.iter().any(|p| p.failed_coords > 0);
    let by_name = param_checks.iter().map(|p| (p.name.clone(), p.max_rel_err)).collect();
    Ok(GradCheckReport {
        params: param_checks,
        by_name,
        max_rel_err,
        threshold: cfg.threshold,
        resolution_band,
        pass: max_rel_err < cfg.threshold && !any_failed,
    })
}

fn sample_coords(numel: usize, samples: usize, seed: u64, param_idx: usize) -> Vec<usize> {
    if numel <= samples {
        return (0..numel).collect();
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (param_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut picked = rand::seq::index::sample(&mut rng, numel, samples).into_vec();
    picked.sort_unstable();
    picked
}
