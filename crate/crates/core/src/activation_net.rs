//! Activation networks: auxiliary nets that map a layer's intermediate
//! outputs `u` to per-node (dense) or per-pixel (convolutional)
//! polynomial coefficients, trained jointly with the host layer.
//!
//! Dense:  `a_{ki} = Σ_j V_{kij}·u_j + b_{ki}` ("full" mode) or
//!         `a_{ki} = Σ_j V_{kj}·u_j + b_{ki}` ("shared" mode, one
//!         coefficient generator for all nodes), then
//!         `x_i = Σ_k a_{ki}·u_i^k`.
//! Conv:   coefficient maps `a_{ki} = conv(v_{ki}, b_{ki}, u)` over all
//!         channels of `u`, spatially congruent with `u`, then
//!         `x_i(ξ,ζ) = Σ_k a_{ki}(ξ,ζ)·u_i(ξ,ζ)^k`.
//!
//! Setting `V` (or `v`) to zero with constant per-order biases makes an
//! activation-network layer identical to a single fixed activation,
//! which both the initializers and the tests below exploit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{taylor_preset, PolyCoeffs, TaylorPreset};
use crate::autograd::{ParamId, ParamSet, Tape, ValueId};
use crate::error::{Error, Result};
use crate::layers::glorot_uniform;
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, Tensor, MAX_POW_ORDER};

/// Weight sharing of the dense coefficient generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnMode {
    /// Per-node weights `V_{kij}` (one generator per node).
    Full,
    /// One generator `V_{kj}` shared by all nodes; only biases differ.
    Shared,
}

/// Initialization of an activation network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnInit {
    /// `V = 0`, biases select the identity polynomial: starts as `x = u`.
    Identity,
    /// `V = 0`, biases from the tanh Taylor preset: starts exactly as a
    /// tanh-approximating fixed activation.
    ZeroVTanh,
    /// Glorot `V`, tanh-preset biases: starts adaptive.
    TanhTaylor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ANConfig {
    /// Polynomial order `K`.
    pub order: usize,
    pub mode: AnMode,
    /// Odd kernel extent of the convolutional coefficient generator.
    pub kernel: usize,
    /// Symmetric clamp applied to `u` before powering; `None` disables.
    pub u_clip: Option<f64>,
    pub init: AnInit,
}

impl Default for ANConfig {
    fn default() -> Self {
        Self { order: 5, mode: AnMode::Full, kernel: 3, u_clip: Some(5.0), init: AnInit::ZeroVTanh }
    }
}

impl ANConfig {
    pub fn validate(&self) -> Result<()> {
        if self.order < 1 || self.order > MAX_POW_ORDER {
            return Err(Error::Config(format!(
                "activation-net order must be in 1..={MAX_POW_ORDER}, got {}",
                self.order
            )));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "activation-net kernel must be odd, got {}",
                self.kernel
            )));
        }
        if let Some(c) = self.u_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("u_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }

    fn bias_coeffs<S: Scalar>(&self) -> Result<PolyCoeffs<S>> {
        match self.init {
            AnInit::Identity => Ok(PolyCoeffs::identity(self.order)),
            AnInit::ZeroVTanh | AnInit::TanhTaylor => taylor_preset(TaylorPreset::Tanh, self.order),
        }
    }
}

/// Result of an activation-net forward: the activated output and the
/// coefficient node (used by traces and the curve dumper).
#[derive(Debug, Clone, Copy)]
pub struct AnForward {
    pub x: ValueId,
    pub coeffs: ValueId,
}

/// Coefficient generator for a dense layer of width `n`.
///
/// `v` is `[(K+1)·n, n]` in full mode or `[K+1, n]` in shared mode;
/// `b` is `[K+1, n]`. Coefficients are laid out `a[k·n + i]`.
#[derive(Debug, Clone)]
pub struct DenseActivationNet {
    pub v: ParamId,
    pub b: ParamId,
    pub config: ANConfig,
    pub width: usize,
}

impl DenseActivationNet {
    pub fn init<S: Scalar>(
        params: &mut ParamSet<S>,
        name: &str,
        width: usize,
        config: &ANConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let k1 = config.order + 1;
        let v_shape = match config.mode {
            AnMode::Full => vec![k1 * width, width],
            AnMode::Shared => vec![k1, width],
        };
        let v_value = match config.init {
            AnInit::TanhTaylor => glorot_uniform(&v_shape, width, k1 * width, rng),
            _ => Tensor::zeros(&v_shape),
        };
        let v = params.register(&format!("{name}.v"), v_value)?;
        let bias = config.bias_coeffs::<S>()?;
        let mut b_value = Tensor::zeros(&[k1, width]);
        for k in 0..k1 {
            let c = bias.coeffs()[k];
            for i in 0..width {
                b_value.set(&[k, i], c);
            }
        }
        let b = params.register(&format!("{name}.b"), b_value)?;
        Ok(Self { v, b, config: *config, width })
    }

    /// Coefficient generation and polynomial activation, fully on tape:
    /// gradients flow into `V`, `b`, and through both appearances of `u`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &ParamSet<S>,
        u: ValueId,
    ) -> Result<AnForward> {
        if tape.value(u).shape() != [self.width] {
            return Err(Error::ShapeMismatch {
                op: "dense_an_forward",
                lhs: tape.value(u).shape().to_vec(),
                rhs: vec![self.width],
            });
        }
        let k1 = self.config.order + 1;
        let v = tape.param(params, self.v);
        let b = tape.param(params, self.b);
        let b_flat = tape.reshape(b, &[k1 * self.width])?;
        let coeffs = match self.config.mode {
            AnMode::Full => {
                let v2 = tape.reshape(v, &[k1 * self.width, self.width])?;
                tape.affine(v2, u, Some(b_flat))?
            }
            AnMode::Shared => {
                let shared = tape.affine(v, u, None)?; // [K+1]
                let spread = tape.repeat_interleave(shared, self.width)?;
                tape.add(spread, b_flat)?
            }
        };
        let base = match self.config.u_clip {
            Some(c) => tape.clamp(u, S::from_f64(c)),
            None => u,
        };
        let x = tape.poly_combine(coeffs, base)?;
        Ok(AnForward { x, coeffs })
    }
}

/// Coefficient generator for a convolutional layer with `channels`
/// output channels: one `[channels, kh, kw]` filter and one bias per
/// `(k, i)` pair, stored as `v: [(K+1)·channels, channels, kh, kw]` and
/// `b: [(K+1)·channels]`. Coefficient map channel `k·channels + i`
/// carries the order-`k` coefficients of host channel `i`.
#[derive(Debug, Clone)]
pub struct ConvActivationNet {
    pub v: ParamId,
    pub b: ParamId,
    pub geom: ConvGeometry,
    pub config: ANConfig,
    pub channels: usize,
}

impl ConvActivationNet {
    pub fn init<S: Scalar>(
        params: &mut ParamSet<S>,
        name: &str,
        channels: usize,
        config: &ANConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let k1 = config.order + 1;
        let k_ext = config.kernel;
        let v_shape = vec![k1 * channels, channels, k_ext, k_ext];
        let v_value = match config.init {
            AnInit::TanhTaylor => glorot_uniform(
                &v_shape,
                channels * k_ext * k_ext,
                k1 * channels * k_ext * k_ext,
                rng,
            ),
            _ => Tensor::zeros(&v_shape),
        };
        let v = params.register(&format!("{name}.v"), v_value)?;
        let bias = config.bias_coeffs::<S>()?;
        let mut b_value = Tensor::zeros(&[k1 * channels]);
        for k in 0..k1 {
            for i in 0..channels {
                b_value.data_mut()[k * channels + i] = bias.coeffs()[k];
            }
        }
        let b = params.register(&format!("{name}.b"), b_value)?;
        // Same padding keeps the coefficient maps spatially congruent
        // with u, which the shared pixel indexing requires.
        let geom = ConvGeometry::same(k_ext)?;
        Ok(Self { v, b, geom, config: *config, channels })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &ParamSet<S>,
        u: ValueId,
    ) -> Result<AnForward> {
        let ushape = tape.value(u).shape().to_vec();
        if ushape.len() != 3 || ushape[0] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "conv_an_forward",
                lhs: ushape,
                rhs: vec![self.channels, 0, 0],
            });
        }
        let v = tape.param(params, self.v);
        let b = tape.param(params, self.b);
        let coeffs = tape.conv2d(u, v, b, self.geom)?;
        let base = match self.config.u_clip {
            Some(c) => tape.clamp(u, S::from_f64(c)),
            None => u,
        };
        let x = tape.poly_combine(coeffs, base)?;
        Ok(AnForward { x, coeffs })
    }
}

/// Which host layer an activation network augments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnLayerKind {
    Dense,
    Conv,
}

/// Number of scalar parameters an activation network adds to a layer of
/// width/channel count `n_l`.
pub fn an_parameter_count(config: &ANConfig, n_l: usize, kind: AnLayerKind) -> usize {
    let k1 = config.order + 1;
    match kind {
        AnLayerKind::Dense => match config.mode {
            AnMode::Full => k1 * n_l * n_l + k1 * n_l,
            AnMode::Shared => k1 * n_l + k1 * n_l,
        },
        AnLayerKind::Conv => k1 * n_l * (n_l * config.kernel * config.kernel + 1),
    }
}

/// Site of an activation curve dump.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteSelection {
    /// All nodes of a dense layer.
    AllDenseNodes,
    DenseNode(usize),
    /// All channels of a conv layer at one pixel.
    AllChannelsAt { row: usize, col: usize },
    ConvPixel { channel: usize, row: usize, col: usize },
}

/// One frozen per-site activation curve sampled on a grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActivationCurve {
    pub layer: String,
    pub node: usize,
    pub pixel: Option<(usize, usize)>,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

/// Per-order coefficients of one dense node from a coefficient tensor
/// laid out `a[k·width + i]`.
pub fn dense_site_coeffs<S: Scalar>(coeffs: &Tensor<S>, width: usize, node: usize) -> Vec<f64> {
    let k1 = coeffs.numel() / width;
    (0..k1).map(|k| coeffs.data()[k * width + node].as_f64()).collect()
}

/// Per-order coefficients of one conv pixel from coefficient maps
/// `[(K+1)·channels, H, W]`.
pub fn conv_site_coeffs<S: Scalar>(
    coeffs: &Tensor<S>,
    channels: usize,
    channel: usize,
    row: usize,
    col: usize,
) -> Vec<f64> {
    let (h, w) = (coeffs.shape()[1], coeffs.shape()[2]);
    let k1 = coeffs.shape()[0] / channels;
    (0..k1)
        .map(|k| coeffs.data()[((k * channels + channel) * h + row) * w + col].as_f64())
        .collect()
}

fn eval_curve(site: &[f64], grid: &[f64]) -> Vec<f64> {
    grid.iter()
        .map(|&u| {
            let mut acc = site[site.len() - 1];
            for &c in site.iter().rev().skip(1) {
                acc = acc * u + c;
            }
            acc
        })
        .collect()
}

/// Evaluate the frozen polynomial a particular input induced at the
/// selected sites over `grid`: the curve the network "would apply" there.
pub fn dump_activation_shapes<S: Scalar>(
    layer: &str,
    coeffs: &Tensor<S>,
    channels: usize,
    selection: SiteSelection,
    grid: &[f64],
) -> Result<Vec<ActivationCurve>> {
    let spatial = coeffs.shape().len() == 3;
    let mut curves = Vec::new();
    let mut push_dense = |node: usize| -> Result<()> {
        if node >= channels {
            return Err(Error::Config(format!("node {node} out of range (width {channels})")));
        }
        let site = dense_site_coeffs(coeffs, channels, node);
        curves.push(ActivationCurve {
            layer: layer.to_string(),
            node,
            pixel: None,
            grid: grid.to_vec(),
            values: eval_curve(&site, grid),
        });
        Ok(())
    };
    match selection {
        SiteSelection::AllDenseNodes => {
            if spatial {
                return Err(Error::Config("dense selection on a conv coefficient map".into()));
            }
            for node in 0..channels {
                push_dense(node)?;
            }
        }
        SiteSelection::DenseNode(node) => {
            if spatial {
                return Err(Error::Config("dense selection on a conv coefficient map".into()));
            }
            push_dense(node)?;
        }
        SiteSelection::AllChannelsAt { row, col } | SiteSelection::ConvPixel { row, col, .. } => {
            if !spatial {
                return Err(Error::Config("pixel selection on a dense coefficient vector".into()));
            }
            let (h, w) = (coeffs.shape()[1], coeffs.shape()[2]);
            if row >= h || col >= w {
                return Err(Error::Config(format!(
                    "pixel ({row},{col}) out of range for {h}x{w} maps"
                )));
            }
            let chs: Vec<usize> = match selection {
                SiteSelection::ConvPixel { channel, .. } => {
                    if channel >= channels {
                        return Err(Error::Config(format!(
                            "channel {channel} out of range ({channels} channels)"
                        )));
                    }
                    vec![channel]
                }
                _ => (0..channels).collect(),
            };
            for ch in chs {
                let site = conv_site_coeffs(coeffs, channels, ch, row, col);
                curves.push(ActivationCurve {
                    layer: layer.to_string(),
                    node: ch,
                    pixel: Some((row, col)),
                    grid: grid.to_vec(),
                    values: eval_curve(&site, grid),
                });
            }
        }
    }
    Ok(curves)
}

/// CSV with columns `layer,node,pixel_row,pixel_col,u_grid,activation_value`.
pub fn curves_to_csv(curves: &[ActivationCurve]) -> String {
    let mut out = String::from("layer,node,pixel_row,pixel_col,u_grid,activation_value\n");
    for c in curves {
        let (pr, pc) = match c.pixel {
            Some((r, q)) => (r.to_string(), q.to_string()),
            None => (String::new(), String::new()),
        };
        for (g, v) in c.grid.iter().zip(&c.values) {
            out.push_str(&format!("{},{},{},{},{},{}\n", c.layer, c.node, pr, pc, g, v));
        }
    }
    out
}
