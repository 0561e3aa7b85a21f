//! Host-network layers: dense and convolutional layers producing the
//! intermediate outputs `u`, plus thin wrappers over the structural tape
//! ops (flatten, channel concat, pooling, upsampling).

use rand::Rng;

use crate::autograd::{ParamId, ParamSet, Tape, ValueId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, Tensor};

/// Glorot-uniform sample: `U(-lim, lim)` with `lim = sqrt(6/(fan_in+fan_out))`.
/// Values are drawn in f64 so f32 and f64 runs share an init stream.
pub fn glorot_uniform<S: Scalar>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor<S> {
    let lim = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| S::from_f64(rng.random_range(-lim..lim))).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// Fully connected layer `u = W·x (+ bias)`. The bias defaults to off;
/// the constant polynomial term subsumes it when an activation network
/// follows.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_width: usize,
    pub out_width: usize,
}

impl DenseLayer {
    pub fn init<S: Scalar>(
        params: &mut ParamSet<S>,
        name: &str,
        in_width: usize,
        out_width: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let weight = params.register(
            &format!("{name}.weight"),
            glorot_uniform(&[out_width, in_width], in_width, out_width, rng),
        )?;
        let bias = if bias {
            Some(params.register(&format!("{name}.bias"), Tensor::zeros(&[out_width]))?)
        } else {
            None
        };
        Ok(Self { weight, bias, in_width, out_width })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &ParamSet<S>,
        x: ValueId,
    ) -> Result<ValueId> {
        if tape.value(x).shape() != [self.in_width] {
            return Err(Error::ShapeMismatch {
                op: "dense_forward",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![self.in_width],
            });
        }
        let w = tape.param(params, self.weight);
        let b = self.bias.map(|pid| tape.param(params, pid));
        tape.affine(w, x, b)
    }
}

/// Convolutional layer `u = conv(kernels, x) + bias`.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernels: ParamId,
    pub bias: ParamId,
    pub geom: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvLayer {
    pub fn init<S: Scalar>(
        params: &mut ParamSet<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geom: ConvGeometry,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let k_area = geom.kernel_h * geom.kernel_w;
        let kernels = params.register(
            &format!("{name}.weight"),
            glorot_uniform(
                &[out_channels, in_channels, geom.kernel_h, geom.kernel_w],
                in_channels * k_area,
                out_channels * k_area,
                rng,
            ),
        )?;
        let bias = params.register(&format!("{name}.bias"), Tensor::zeros(&[out_channels]))?;
        Ok(Self { kernels, bias, geom, in_channels, out_channels })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        params: &ParamSet<S>,
        x: ValueId,
    ) -> Result<ValueId> {
        let k = tape.param(params, self.kernels);
        let b = tape.param(params, self.bias);
        tape.conv2d(x, k, b, self.geom)
    }
}
