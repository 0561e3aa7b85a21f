//! Competing adaptive-activation baselines: lateral inhibition through a
//! receptor field, and attention modulation of a ReLU.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamSet, Tape, ValueId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Configuration for the inhibition activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InhibitionConfig {
    /// Odd spatial window extent of the receptor field.
    pub window: usize,
    /// Proportionality constant; `None` picks `1/(|window|^2 - 1)` so a
    /// flat region exactly cancels itself (dense layers use `1/(n-1)`).
    pub strength: Option<f64>,
    pub learnable: bool,
}

impl Default for InhibitionConfig {
    fn default() -> Self {
        Self { window: 3, strength: None, learnable: false }
    }
}

/// Lateral inhibition: `x = relu(u - ι)` with
/// `ι = c·(neighborhood_sum(u) - u)`. Spatial neighborhoods are a box
/// window per channel; on dense layers the neighborhood is all other
/// nodes (our extension of the spatial formulation).
#[derive(Debug, Clone)]
pub struct InhibitionActivation {
    pub window: usize,
    pub strength: f64,
    /// Registered only when the strength is learnable.
    pub c: Option<ParamId>,
    pub dense: bool,
}

impl InhibitionActivation {
    pub fn init<S: Scalar>(
        params: &mut ParamSet<S>,
        name: &str,
        cfg: &InhibitionConfig,
        dense_width: Option<usize>,
    ) -> Result<Self> {
        if cfg.window % 2 == 0 || cfg.window < 3 {
            return Err(Error::Config(format!(
                "inhibition window must be odd and >= 3, got {}",
                cfg.window
            )));
        }
        let dense = dense_width.is_some();
        let strength = match (cfg.strength, dense_width) {
            (Some(c), _) => {
                if !c.is_finite() {
                    return Err(Error::Config("inhibition strength must be finite".into()));
                }
                c
            }
            (None, Some(n)) => {
                if n < 2 {
                    return Err(Error::Config(
                        "dense inhibition needs at least 2 nodes".into(),
                    ));
                }
                1.0 / (n - 1) as f64
            }
            (None, None) => 1.0 / (cfg.window * cfg.window - 1) as f64,
        };
        let c = if cfg.learnable {
            Some(params.register(
                &format!("{name}.c"),
                Tensor::scalar(S::from_f64(strength)),
            )?)
        } else {
            None
        };
        Ok(Self { window: cfg.window, strength, c, dense })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &ParamSet<S>,
        u: ValueId,
    ) -> Result<ValueId> {
        let c_node = match self.c {
            Some(pid) => tape.param(params, pid),
            None => tape.leaf(Tensor::scalar(S::from_f64(self.strength))),
        };
        tape.inhibit(u, c_node, self.window, self.dense)
    }
}

/// Attention modulation: `x_i = logistic(p_i·u_i + q_i) · relu(u_i)`,
/// with one learned `(p, q)` gate per node/channel.
#[derive(Debug, Clone)]
pub struct AttentionActivation {
    pub p: ParamId,
    pub q: ParamId,
    pub channels: usize,
}

impl AttentionActivation {
    pub fn init<S: Scalar>(
        params: &mut ParamSet<S>,
        name: &str,
        channels: usize,
        _rng: &mut impl Rng,
    ) -> Result<Self> {
        // Zero gates start at α = 1/2 everywhere.
        let p = params.register(&format!("{name}.p"), Tensor::zeros(&[channels]))?;
        let q = params.register(&format!("{name}.q"), Tensor::zeros(&[channels]))?;
        Ok(Self { p, q, channels })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &ParamSet<S>,
        u: ValueId,
    ) -> Result<ValueId> {
        let p = tape.param(params, self.p);
        let q = tape.param(params, self.q);
        let gate_in = tape.channel_affine(u, p, q)?;
        let alpha = tape.sigmoid(gate_in);
        let r = tape.relu(u);
        tape.mul(alpha, r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run_inhib(cfg: &InhibitionConfig, u: Tensor<f64>, dense_width: Option<usize>) -> Tensor<f64> {
        let mut params = ParamSet::<f64>::new();
        let act = InhibitionActivation::init(&mut params, "inh", cfg, dense_width).unwrap();
        let mut tape = Tape::new();
        let uid = tape.leaf(u);
        let out = act.forward(&mut tape, &params, uid).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn flat_regions_are_fully_inhibited() {
        // constant map m, 3x3 window, c = 1/8: box sum 9m minus center m
        // = 8m, times 1/8 = m, so x = relu(0) = 0 in the interior.
        let u = Tensor::filled(&[1, 5, 5], 2.0);
        let x = run_inhib(&InhibitionConfig::default(), u, None);
        assert_eq!(x.at(&[0, 2, 2]), 0.0);
        // borders see fewer neighbors, so they survive partially
        assert!(x.at(&[0, 0, 0]) > 0.0);
    }

    #[test]
    fn isolated_peaks_pass() {
        let mut u = Tensor::zeros(&[1, 5, 5]);
        u.set(&[0, 2, 2], 2.0);
        let x = run_inhib(&InhibitionConfig::default(), u, None);
        // window sums to 2 at the center; minus center leaves ι = 0
        assert_eq!(x.at(&[0, 2, 2]), 2.0);
    }

    #[test]
    fn zero_strength_reduces_to_relu() {
        let cfg = InhibitionConfig { strength: Some(0.0), ..Default::default() };
        let u = Tensor::new(&[1, 2, 2], vec![-1.0, 0.5, 2.0, -0.25]).unwrap();
        let x = run_inhib(&cfg, u.clone(), None);
        assert_eq!(x, crate::activations::relu(&u));
    }

    #[test]
    fn dense_inhibition_cancels_flat_vectors() {
        let u = Tensor::from_slice(&[3.0; 5]);
        let x = run_inhib(&InhibitionConfig::default(), u, Some(5));
        assert_eq!(x.data(), &[0.0; 5]);
    }

    #[test]
    fn boundary_box_sum_matches_bruteforce() {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let u = Tensor::new(
            &[1, 4, 5],
            (0..20).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(),
        )
        .unwrap();
        let s = crate::tensor::window_sum(&u, 3).unwrap();
        for y in 0..4isize {
            for x in 0..5isize {
                let mut acc = 0.0;
                for dy in -1..=1isize {
                    for dx in -1..=1isize {
                        let (sy, sx) = (y + dy, x + dx);
                        if sy < 0 || sy >= 4 || sx < 0 || sx >= 5 {
                            continue;
                        }
                        acc += u.at(&[0, sy as usize, sx as usize]);
                    }
                }
                assert!((s.at(&[0, y as usize, x as usize]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_zero_gates_halve_relu() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let act = AttentionActivation::init(&mut params, "att", 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::from_slice(&[-1.0, 0.5, 2.0]));
        let out = act.forward(&mut tape, &params, u).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0, 0.25, 1.0]);
    }

    #[test]
    fn attention_saturates_toward_relu() {
        let mut params = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let act = AttentionActivation::init(&mut params, "att", 2, &mut rng).unwrap();
        params.value_mut(act.q).fill(10.0);
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::from_slice(&[1.5, 3.0]));
        let out = act.forward(&mut tape, &params, u).unwrap();
        for (x, r) in tape.value(out).data().iter().zip(&[1.5, 3.0]) {
            assert!(x / r > 0.999, "gate should saturate: {x} vs {r}");
        }
    }

    #[test]
    fn attention_never_exceeds_relu() {
        use rand::Rng as _;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut params = ParamSet::<f64>::new();
        let act = AttentionActivation::init(&mut params, "att", 4, &mut rng).unwrap();
        for v in params.value_mut(act.p).data_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        for v in params.value_mut(act.q).data_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        let u_data: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::from_slice(&u_data));
        let out = act.forward(&mut tape, &params, u).unwrap();
        for (x, uv) in tape.value(out).data().iter().zip(&u_data) {
            assert!(x.abs() <= uv.max(0.0) + 1e-15);
        }
    }
}
