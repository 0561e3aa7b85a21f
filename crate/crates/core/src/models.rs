//! Declarative model construction: an ordered-layer [`ModelSpec`] with a
//! per-layer activation mode, builders that turn a spec into an
//! executable [`Model`], presets for the small classifier and denoiser
//! used throughout, and the on-disk spec text format.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activation_net::{
    ANConfig, AnInit, AnMode, ConvActivationNet, DenseActivationNet,
};
use crate::activations::{taylor_preset, TaylorPreset};
use crate::autograd::{ParamId, ParamSet, Tape, ValueId};
use crate::error::{Error, Result};
use crate::gradcheck::{gradient_check, GradCheckConfig, GradCheckReport};
use crate::layers::{ConvLayer, DenseLayer};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, Tensor};
use crate::variants::{AttentionActivation, InhibitionActivation, InhibitionConfig};

/// Training objective of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LossKind {
    SoftmaxXent,
    Mse,
}

impl LossKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            LossKind::SoftmaxXent => "softmax_xent",
            LossKind::Mse => "mse",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax_xent" => Ok(Self::SoftmaxXent),
            "mse" => Ok(Self::Mse),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

/// Per-layer activation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationMode {
    None,
    Relu,
    PolyFixed,
    Inhibition,
    Attention,
    ActivationNet,
}

impl ActivationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Relu => "relu",
            Self::PolyFixed => "poly_fixed",
            Self::Inhibition => "inhibition",
            Self::Attention => "attention",
            Self::ActivationNet => "activation_net",
        }
    }

    /// The five comparable variants (everything except `None`).
    pub fn variants() -> [ActivationMode; 5] {
        [
            Self::Relu,
            Self::PolyFixed,
            Self::Inhibition,
            Self::Attention,
            Self::ActivationNet,
        ]
    }
}

impl std::str::FromStr for ActivationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "relu" => Ok(Self::Relu),
            "poly_fixed" | "poly" => Ok(Self::PolyFixed),
            "inhibition" => Ok(Self::Inhibition),
            "attention" => Ok(Self::Attention),
            "activation_net" | "an" => Ok(Self::ActivationNet),
            other => Err(Error::Config(format!("unknown activation mode {other:?}"))),
        }
    }
}

/// One ordered layer entry.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense { width: usize, bias: bool, act: ActivationMode, an: Option<ANConfig> },
    Conv { channels: usize, kernel: usize, bias: bool, act: ActivationMode, an: Option<ANConfig> },
    MaxPool2,
    Upsample2,
    Flatten,
    /// Push the current activation onto the skip stack.
    SkipSave,
    /// Pop the skip stack and concatenate channels.
    SkipConcat,
}

/// Declarative description of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub loss: LossKind,
    /// Default activation-net configuration; layers may override.
    pub an: ANConfig,
    pub inhibition: InhibitionConfig,
    /// Permit an activation on the final parameterized layer of a
    /// classifier (off by default).
    pub allow_final_activation: bool,
    pub layers: Vec<LayerSpec>,
}

#[derive(Debug, Clone, PartialEq)]
enum ShapeState {
    Vector(usize),
    Image(usize, usize, usize),
}

impl ModelSpec {
    /// Walk the layer list, checking shape compatibility, the skip
    /// stack, and the final-layer activation rule. Returns the output
    /// shape.
    pub fn validate(&self) -> Result<Vec<usize>> {
        self.an.validate()?;
        let mut state = match self.input_shape.as_slice() {
            [n] => ShapeState::Vector(*n),
            [c, h, w] => ShapeState::Image(*c, *h, *w),
            other => {
                return Err(Error::Config(format!(
                    "input shape must be [n] or [c,h,w], got {other:?}"
                )))
            }
        };
        let mut skip_stack: Vec<ShapeState> = Vec::new();
        let mut last_param_act: Option<ActivationMode> = None;
        for (li, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| Err(Error::Config(format!("layer {li}: {msg}")));
            state = match layer {
                LayerSpec::Dense { width, act, an, .. } => {
                    if let Some(cfg) = an {
                        cfg.validate()?;
                    }
                    match state {
                        ShapeState::Vector(_) => {
                            last_param_act = Some(*act);
                            ShapeState::Vector(*width)
                        }
                        s => return fail(format!("dense layer needs a vector input, got {s:?}")),
                    }
                }
                LayerSpec::Conv { channels, kernel, act, an, .. } => {
                    if let Some(cfg) = an {
                        cfg.validate()?;
                    }
                    match state {
                        ShapeState::Image(_, h, w) => {
                            let geom = ConvGeometry::same(*kernel)?;
                            let (oh, ow) = geom.output_hw(h, w)?;
                            last_param_act = Some(*act);
                            ShapeState::Image(*channels, oh, ow)
                        }
                        s => return fail(format!("conv layer needs an image input, got {s:?}")),
                    }
                }
                LayerSpec::MaxPool2 => match state {
                    ShapeState::Image(c, h, w) if h % 2 == 0 && w % 2 == 0 => {
                        ShapeState::Image(c, h / 2, w / 2)
                    }
                    s => return fail(format!("maxpool2 needs even image extents, got {s:?}")),
                },
                LayerSpec::Upsample2 => match state {
                    ShapeState::Image(c, h, w) => ShapeState::Image(c, 2 * h, 2 * w),
                    s => return fail(format!("upsample2 needs an image input, got {s:?}")),
                },
                LayerSpec::Flatten => match state {
                    ShapeState::Image(c, h, w) => ShapeState::Vector(c * h * w),
                    ShapeState::Vector(n) => ShapeState::Vector(n),
                },
                LayerSpec::SkipSave => {
                    skip_stack.push(state.clone());
                    state
                }
                LayerSpec::SkipConcat => {
                    let saved = match skip_stack.pop() {
                        Some(s) => s,
                        None => return fail("skip_concat with empty skip stack".into()),
                    };
                    match (&state, &saved) {
                        (ShapeState::Image(c1, h1, w1), ShapeState::Image(c2, h2, w2))
                            if h1 == h2 && w1 == w2 =>
                        {
                            ShapeState::Image(c1 + c2, *h1, *w1)
                        }
                        (a, b) => {
                            return fail(format!("skip_concat spatial mismatch: {a:?} vs {b:?}"))
                        }
                    }
                }
            };
        }
        if !skip_stack.is_empty() {
            return Err(Error::Config(format!(
                "{} unconsumed skip connection(s)",
                skip_stack.len()
            )));
        }
        if self.loss == LossKind::SoftmaxXent {
            match state {
                ShapeState::Vector(n) if n >= 2 => {}
                ref s => {
                    return Err(Error::Config(format!(
                        "classifier must end in a logit vector of width >= 2, got {s:?}"
                    )))
                }
            }
            if !self.allow_final_activation && last_param_act != Some(ActivationMode::None) {
                return Err(Error::Config(
                    "the last classification layer must have activation mode none".into(),
                ));
            }
        }
        Ok(match state {
            ShapeState::Vector(n) => vec![n],
            ShapeState::Image(c, h, w) => vec![c, h, w],
        })
    }
}

#[derive(Debug, Clone)]
enum BuiltUnit {
    Dense(DenseLayer),
    Conv(ConvLayer),
    MaxPool2,
    Upsample2,
    Flatten,
    SkipSave,
    SkipConcat,
}

#[derive(Debug, Clone)]
enum BuiltActivation {
    None,
    Relu,
    PolyFixed { coeffs: ParamId },
    Inhibition(InhibitionActivation),
    Attention(AttentionActivation),
    DenseAn(DenseActivationNet),
    ConvAn(ConvActivationNet),
}

#[derive(Debug, Clone)]
struct BuiltLayer {
    name: String,
    unit: BuiltUnit,
    act: BuiltActivation,
}

/// Coefficient tensors captured by a traced forward, one per
/// activation-net layer.
#[derive(Debug, Clone)]
pub struct AnTrace<S> {
    pub layer: String,
    pub channels: usize,
    pub coeffs: Tensor<S>,
}

/// Per-sample training target.
#[derive(Debug, Clone)]
pub enum SampleTarget<S> {
    Label(usize),
    Image(Tensor<S>),
}

/// An executable model: parameter registry plus the layer program.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub spec: ModelSpec,
    pub params: ParamSet<S>,
    layers: Vec<BuiltLayer>,
    pub output_shape: Vec<usize>,
}

impl<S: Scalar> Model<S> {
    /// Instantiate a validated spec with seed-deterministic Glorot init.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let output_shape = spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let mut conv_idx = 0usize;
        let mut dense_idx = 0usize;
        let mut skip_shapes: Vec<ShapeState> = Vec::new();
        let mut state = match spec.input_shape.as_slice() {
            [n] => ShapeState::Vector(*n),
            [c, h, w] => ShapeState::Image(*c, *h, *w),
            _ => unreachable!("validated above"),
        };
        for layer in &spec.layers {
            let built = match layer {
                LayerSpec::Dense { width, bias, act, an } => {
                    dense_idx += 1;
                    let name = format!("dense{dense_idx}");
                    let in_width = match state {
                        ShapeState::Vector(n) => n,
                        _ => unreachable!("validated above"),
                    };
                    let unit = BuiltUnit::Dense(DenseLayer::init(
                        &mut params,
                        &name,
                        in_width,
                        *width,
                        *bias,
                        &mut rng,
                    )?);
                    state = ShapeState::Vector(*width);
                    let an_cfg = an.unwrap_or(spec.an);
                    let act = build_activation(
                        &mut params,
                        &name,
                        *act,
                        &an_cfg,
                        &spec.inhibition,
                        *width,
                        true,
                        &mut rng,
                    )?;
                    BuiltLayer { name, unit, act }
                }
                LayerSpec::Conv { channels, kernel, bias: _, act, an } => {
                    conv_idx += 1;
                    let name = format!("conv{conv_idx}");
                    let (in_ch, h, w) = match state {
                        ShapeState::Image(c, h, w) => (c, h, w),
                        _ => unreachable!("validated above"),
                    };
                    let geom = ConvGeometry::same(*kernel)?;
                    let unit = BuiltUnit::Conv(ConvLayer::init(
                        &mut params,
                        &name,
                        in_ch,
                        *channels,
                        geom,
                        &mut rng,
                    )?);
                    state = ShapeState::Image(*channels, h, w);
                    let an_cfg = an.unwrap_or(spec.an);
                    let act = build_activation(
                        &mut params,
                        &name,
                        *act,
                        &an_cfg,
                        &spec.inhibition,
                        *channels,
                        false,
                        &mut rng,
                    )?;
                    BuiltLayer { name, unit, act }
                }
                LayerSpec::MaxPool2 => {
                    if let ShapeState::Image(c, h, w) = state {
                        state = ShapeState::Image(c, h / 2, w / 2);
                    }
                    BuiltLayer {
                        name: "pool".into(),
                        unit: BuiltUnit::MaxPool2,
                        act: BuiltActivation::None,
                    }
                }
                LayerSpec::Upsample2 => {
                    if let ShapeState::Image(c, h, w) = state {
                        state = ShapeState::Image(c, 2 * h, 2 * w);
                    }
                    BuiltLayer {
                        name: "upsample".into(),
                        unit: BuiltUnit::Upsample2,
                        act: BuiltActivation::None,
                    }
                }
                LayerSpec::Flatten => {
                    if let ShapeState::Image(c, h, w) = state {
                        state = ShapeState::Vector(c * h * w);
                    }
                    BuiltLayer {
                        name: "flatten".into(),
                        unit: BuiltUnit::Flatten,
                        act: BuiltActivation::None,
                    }
                }
                LayerSpec::SkipSave => {
                    skip_shapes.push(state.clone());
                    BuiltLayer {
                        name: "skip".into(),
                        unit: BuiltUnit::SkipSave,
                        act: BuiltActivation::None,
                    }
                }
                LayerSpec::SkipConcat => {
                    let saved = skip_shapes.pop().expect("validated above");
                    if let (ShapeState::Image(c1, h, w), ShapeState::Image(c2, _, _)) =
                        (&state, &saved)
                    {
                        state = ShapeState::Image(c1 + c2, *h, *w);
                    }
                    BuiltLayer {
                        name: "concat".into(),
                        unit: BuiltUnit::SkipConcat,
                        act: BuiltActivation::None,
                    }
                }
            };
            layers.push(built);
        }
        Ok(Self { spec: spec.clone(), params, layers, output_shape })
    }

    /// Forward pass; the input is recorded as a constant leaf.
    pub fn forward(&self, tape: &mut Tape<S>, input: &Tensor<S>) -> Result<ValueId> {
        self.forward_inner(tape, input, None)
    }

    /// Forward pass capturing activation-net coefficient tensors.
    pub fn forward_traced(
        &self,
        tape: &mut Tape<S>,
        input: &Tensor<S>,
    ) -> Result<(ValueId, Vec<AnTrace<S>>)> {
        let mut traces = Vec::new();
        let out = self.forward_inner(tape, input, Some(&mut traces))?;
        Ok((out, traces))
    }

    fn forward_inner(
        &self,
        tape: &mut Tape<S>,
        input: &Tensor<S>,
        mut traces: Option<&mut Vec<AnTrace<S>>>,
    ) -> Result<ValueId> {
        if input.shape() != self.spec.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "model forward",
                lhs: input.shape().to_vec(),
                rhs: self.spec.input_shape.clone(),
            });
        }
        let mut x = tape.leaf(input.clone());
        let mut skip_stack: Vec<ValueId> = Vec::new();
        for layer in &self.layers {
            let u = match &layer.unit {
                BuiltUnit::Dense(d) => d.forward(tape, &self.params, x)?,
                BuiltUnit::Conv(c) => c.forward(tape, &self.params, x)?,
                BuiltUnit::MaxPool2 => tape.maxpool2(x)?,
                BuiltUnit::Upsample2 => tape.upsample_nearest2(x)?,
                BuiltUnit::Flatten => tape.flatten(x)?,
                BuiltUnit::SkipSave => {
                    skip_stack.push(x);
                    x
                }
                BuiltUnit::SkipConcat => {
                    let saved = skip_stack
                        .pop()
                        .ok_or_else(|| Error::Contract("skip stack underflow".into()))?;
                    tape.concat_channels(x, saved)?
                }
            };
            x = match &layer.act {
                BuiltActivation::None => u,
                BuiltActivation::Relu => tape.relu(u),
                BuiltActivation::PolyFixed { coeffs } => {
                    let c = tape.param(&self.params, *coeffs);
                    tape.poly_shared(c, u)?
                }
                BuiltActivation::Inhibition(inh) => inh.forward(tape, &self.params, u)?,
                BuiltActivation::Attention(att) => att.forward(tape, &self.params, u)?,
                BuiltActivation::DenseAn(an) => {
                    let fwd = an.forward(tape, &self.params, u)?;
                    if let Some(tr) = traces.as_deref_mut() {
                        tr.push(AnTrace {
                            layer: layer.name.clone(),
                            channels: an.width,
                            coeffs: tape.value(fwd.coeffs).clone(),
                        });
                    }
                    fwd.x
                }
                BuiltActivation::ConvAn(an) => {
                    let fwd = an.forward(tape, &self.params, u)?;
                    if let Some(tr) = traces.as_deref_mut() {
                        tr.push(AnTrace {
                            layer: layer.name.clone(),
                            channels: an.channels,
                            coeffs: tape.value(fwd.coeffs).clone(),
                        });
                    }
                    fwd.x
                }
            };
        }
        Ok(x)
    }

    /// Forward plus the spec's loss against a target; returns the loss node.
    pub fn loss_on(
        &self,
        tape: &mut Tape<S>,
        input: &Tensor<S>,
        target: &SampleTarget<S>,
    ) -> Result<ValueId> {
        let out = self.forward(tape, input)?;
        match (self.spec.loss, target) {
            (LossKind::SoftmaxXent, SampleTarget::Label(l)) => tape.softmax_xent(out, *l),
            (LossKind::Mse, SampleTarget::Image(t)) => tape.mse(out, t),
            (loss, _) => Err(Error::Contract(format!(
                "target kind does not match loss {loss:?}"
            ))),
        }
    }

    /// Sum of scalar parameters, i.e. the model size.
    pub fn parameter_count(&self) -> usize {
        self.params.total_scalar_count()
    }

    /// Layer names that carry an activation network.
    pub fn an_layers(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| {
                matches!(
                    l.act,
                    BuiltActivation::DenseAn(_) | BuiltActivation::ConvAn(_)
                )
            })
            .map(|l| l.name.clone())
            .collect()
    }
}

#[allow(clippy::too_many_arguments)]
fn build_activation<S: Scalar>(
    params: &mut ParamSet<S>,
    layer_name: &str,
    act: ActivationMode,
    an_cfg: &ANConfig,
    inh_cfg: &InhibitionConfig,
    width: usize,
    dense: bool,
    rng: &mut ChaCha8Rng,
) -> Result<BuiltActivation> {
    Ok(match act {
        ActivationMode::None => BuiltActivation::None,
        ActivationMode::Relu => BuiltActivation::Relu,
        ActivationMode::PolyFixed => {
            let preset = taylor_preset::<S>(TaylorPreset::Tanh, an_cfg.order)?;
            let coeffs = params.register(
                &format!("{layer_name}.poly.coeffs"),
                Tensor::from_slice(preset.coeffs()),
            )?;
            BuiltActivation::PolyFixed { coeffs }
        }
        ActivationMode::Inhibition => BuiltActivation::Inhibition(InhibitionActivation::init(
            params,
            &format!("{layer_name}.inh"),
            inh_cfg,
            dense.then_some(width),
        )?),
        ActivationMode::Attention => BuiltActivation::Attention(AttentionActivation::init(
            params,
            &format!("{layer_name}.att"),
            width,
            rng,
        )?),
        ActivationMode::ActivationNet => {
            if dense {
                BuiltActivation::DenseAn(DenseActivationNet::init(
                    params,
                    &format!("{layer_name}.an"),
                    width,
                    an_cfg,
                    rng,
                )?)
            } else {
                BuiltActivation::ConvAn(ConvActivationNet::init(
                    params,
                    &format!("{layer_name}.an"),
                    width,
                    an_cfg,
                    rng,
                )?)
            }
        }
    })
}

/// Small LeNet-style classifier:
/// conv(8,3x3) -> pool -> conv(16,3x3) -> pool -> dense(64) -> dense(C).
/// The chosen variant activates every layer except the last.
pub fn preset_mini_lenet(variant: ActivationMode, input_shape: &[usize], an: ANConfig) -> ModelSpec {
    let act = variant;
    ModelSpec {
        name: format!("mini-lenet-{}", variant.as_str()),
        input_shape: input_shape.to_vec(),
        loss: LossKind::SoftmaxXent,
        an,
        inhibition: InhibitionConfig::default(),
        allow_final_activation: false,
        layers: vec![
            LayerSpec::Conv { channels: 8, kernel: 3, bias: false, act, an: None },
            LayerSpec::MaxPool2,
            LayerSpec::Conv { channels: 16, kernel: 3, bias: false, act, an: None },
            LayerSpec::MaxPool2,
            LayerSpec::Flatten,
            LayerSpec::Dense { width: 64, bias: false, act, an: None },
            LayerSpec::Dense { width: 10, bias: false, act: ActivationMode::None, an: None },
        ],
    }
}

/// Small U-net denoiser: two down blocks (8, 16 channels), a bottleneck,
/// two up blocks with skip concatenation, and a linear 1x1 output conv.
/// The activation-net variant augments the first conv of each block and
/// keeps ReLU elsewhere; other variants activate every non-final conv.
pub fn preset_mini_unet(variant: ActivationMode, input_shape: &[usize], an: ANConfig) -> ModelSpec {
    let first = variant;
    let rest = if variant == ActivationMode::ActivationNet {
        ActivationMode::Relu
    } else {
        variant
    };
    let out_channels = input_shape[0];
    ModelSpec {
        name: format!("mini-unet-{}", variant.as_str()),
        input_shape: input_shape.to_vec(),
        loss: LossKind::Mse,
        an,
        inhibition: InhibitionConfig::default(),
        allow_final_activation: false,
        layers: vec![
            // down block 1
            LayerSpec::Conv { channels: 8, kernel: 3, bias: false, act: first, an: None },
            LayerSpec::SkipSave,
            LayerSpec::MaxPool2,
            // down block 2
            LayerSpec::Conv { channels: 16, kernel: 3, bias: false, act: first, an: None },
            LayerSpec::SkipSave,
            LayerSpec::MaxPool2,
            // bottleneck block
            LayerSpec::Conv { channels: 16, kernel: 3, bias: false, act: first, an: None },
            // up block 1
            LayerSpec::Upsample2,
            LayerSpec::Conv { channels: 16, kernel: 3, bias: false, act: first, an: None },
            LayerSpec::SkipConcat,
            LayerSpec::Conv { channels: 16, kernel: 3, bias: false, act: rest, an: None },
            // up block 2
            LayerSpec::Upsample2,
            LayerSpec::Conv { channels: 8, kernel: 3, bias: false, act: first, an: None },
            LayerSpec::SkipConcat,
            LayerSpec::Conv { channels: 8, kernel: 3, bias: false, act: rest, an: None },
            // linear output projection
            LayerSpec::Conv {
                channels: out_channels,
                kernel: 1,
                bias: false,
                act: ActivationMode::None,
                an: None,
            },
        ],
    }
}

pub fn preset(name: &str, variant: ActivationMode, input_shape: &[usize], an: ANConfig) -> Result<ModelSpec> {
    match name {
        "mini_lenet" => Ok(preset_mini_lenet(variant, input_shape, an)),
        "mini_unet" => Ok(preset_mini_unet(variant, input_shape, an)),
        other => Err(Error::Config(format!("unknown preset {other:?}"))),
    }
}

/// Gradient-check a spec at double precision against a random
/// input/target pair drawn from the seed.
pub fn gradient_check_spec(
    spec: &ModelSpec,
    seed: u64,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    use rand::Rng as _;
    let model: Model<f64> = Model::build(spec, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f0f);
    let numel: usize = spec.input_shape.iter().product();
    let input = Tensor::new(
        &spec.input_shape,
        (0..numel).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>(),
    )?;
    let out_shape = spec.validate()?;
    let target = match spec.loss {
        LossKind::SoftmaxXent => SampleTarget::Label(rng.random_range(0..out_shape[0])),
        LossKind::Mse => {
            let n: usize = out_shape.iter().product();
            SampleTarget::Image(Tensor::new(
                &out_shape,
                (0..n).map(|_| rng.random_range(0.0..1.0)).collect::<Vec<f64>>(),
            )?)
        }
    };
    let layers = model.layers.clone();
    let spec_clone = spec.clone();
    let output_shape = model.output_shape.clone();
    let make = move |params: &ParamSet<f64>| Model::<f64> {
        spec: spec_clone.clone(),
        params: params.clone(),
        layers: layers.clone(),
        output_shape: output_shape.clone(),
    };
    let input2 = input.clone();
    let target2 = target.clone();
    let forward = {
        let make = make.clone();
        move |params: &ParamSet<f64>| -> Result<f64> {
            let m = make(params);
            let mut tape = Tape::new();
            let loss = m.loss_on(&mut tape, &input2, &target2)?;
            tape.scalar_value(loss)
        }
    };
    gradient_check(
        &model.params,
        forward,
        move |params: &mut ParamSet<f64>| {
            let m = make(params);
            let mut tape = Tape::new();
            let loss = m.loss_on(&mut tape, &input, &target)?;
            let grads = tape.param_grads(loss, params.len())?;
            params.accumulate(&grads)?;
            tape.scalar_value(loss)
        },
        cfg,
    )
}

// ---------------------------------------------------------------------
// Spec text format: `key value` header lines followed by ordered
// `layer <kind> k=v ...` lines. `#` starts a comment.
// ---------------------------------------------------------------------

fn an_mode_str(m: AnMode) -> &'static str {
    match m {
        AnMode::Full => "full",
        AnMode::Shared => "shared",
    }
}

fn an_init_str(i: AnInit) -> &'static str {
    match i {
        AnInit::Identity => "identity",
        AnInit::ZeroVTanh => "zero_v_tanh",
        AnInit::TanhTaylor => "tanh_taylor",
    }
}

fn parse_an_mode(s: &str) -> Result<AnMode> {
    match s {
        "full" => Ok(AnMode::Full),
        "shared" => Ok(AnMode::Shared),
        other => Err(Error::Config(format!("unknown an mode {other:?}"))),
    }
}

fn parse_an_init(s: &str) -> Result<AnInit> {
    match s {
        "identity" => Ok(AnInit::Identity),
        "zero_v_tanh" => Ok(AnInit::ZeroVTanh),
        "tanh_taylor" => Ok(AnInit::TanhTaylor),
        other => Err(Error::Config(format!("unknown an init {other:?}"))),
    }
}

impl ModelSpec {
    /// Canonical text serialization, parseable by [`ModelSpec::parse`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("name {}\n", self.name));
        out.push_str(&format!("loss {}\n", self.loss.as_str()));
        let dims: Vec<String> = self.input_shape.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!("input {}\n", dims.join("x")));
        out.push_str(&format!("an_order {}\n", self.an.order));
        out.push_str(&format!("an_mode {}\n", an_mode_str(self.an.mode)));
        out.push_str(&format!("an_kernel {}\n", self.an.kernel));
        match self.an.u_clip {
            Some(c) => out.push_str(&format!("an_clip {c}\n")),
            None => out.push_str("an_clip none\n"),
        }
        out.push_str(&format!("an_init {}\n", an_init_str(self.an.init)));
        out.push_str(&format!("inhibition_window {}\n", self.inhibition.window));
        match self.inhibition.strength {
            Some(c) => out.push_str(&format!("inhibition_strength {c}\n")),
            None => out.push_str("inhibition_strength auto\n"),
        }
        out.push_str(&format!(
            "inhibition_learnable {}\n",
            if self.inhibition.learnable { "on" } else { "off" }
        ));
        if self.allow_final_activation {
            out.push_str("allow_final_activation on\n");
        }
        for layer in &self.layers {
            match layer {
                LayerSpec::Dense { width, bias, act, an } => {
                    out.push_str(&format!(
                        "layer dense width={width} bias={} act={}{}\n",
                        if *bias { "on" } else { "off" },
                        act.as_str(),
                        an_override_text(an)
                    ));
                }
                LayerSpec::Conv { channels, kernel, bias, act, an } => {
                    out.push_str(&format!(
                        "layer conv channels={channels} kernel={kernel} bias={} act={}{}\n",
                        if *bias { "on" } else { "off" },
                        act.as_str(),
                        an_override_text(an)
                    ));
                }
                LayerSpec::MaxPool2 => out.push_str("layer maxpool2\n"),
                LayerSpec::Upsample2 => out.push_str("layer upsample2\n"),
                LayerSpec::Flatten => out.push_str("layer flatten\n"),
                LayerSpec::SkipSave => out.push_str("layer skip_save\n"),
                LayerSpec::SkipConcat => out.push_str("layer skip_concat\n"),
            }
        }
        out
    }

    /// Parse the text format produced by [`ModelSpec::to_text`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut name = String::from("model");
        let mut loss = LossKind::SoftmaxXent;
        let mut input_shape: Option<Vec<usize>> = None;
        let mut an = ANConfig::default();
        let mut inhibition = InhibitionConfig::default();
        let mut allow_final = false;
        let mut layers = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let key = tokens.next().unwrap();
            let rest: Vec<&str> = tokens.collect();
            let bad = |msg: String| Error::Config(format!("spec line {}: {msg}", lineno + 1));
            let one = |rest: &[&str]| -> Result<String> {
                if rest.len() != 1 {
                    return Err(bad(format!("expected one value for {key}")));
                }
                Ok(rest[0].to_string())
            };
            match key {
                "name" => name = rest.join(" "),
                "loss" => loss = one(&rest)?.parse()?,
                "input" => {
                    let dims: Result<Vec<usize>> = one(&rest)?
                        .split('x')
                        .map(|d| {
                            d.parse::<usize>()
                                .map_err(|_| bad(format!("bad input extent {d:?}")))
                        })
                        .collect();
                    input_shape = Some(dims?);
                }
                "an_order" => {
                    an.order = one(&rest)?.parse().map_err(|_| bad("bad an_order".into()))?
                }
                "an_mode" => an.mode = parse_an_mode(&one(&rest)?)?,
                "an_kernel" => {
                    an.kernel = one(&rest)?.parse().map_err(|_| bad("bad an_kernel".into()))?
                }
                "an_clip" => {
                    let v = one(&rest)?;
                    an.u_clip = if v == "none" {
                        None
                    } else {
                        Some(v.parse().map_err(|_| bad("bad an_clip".into()))?)
                    };
                }
                "an_init" => an.init = parse_an_init(&one(&rest)?)?,
                "inhibition_window" => {
                    inhibition.window =
                        one(&rest)?.parse().map_err(|_| bad("bad inhibition_window".into()))?
                }
                "inhibition_strength" => {
                    let v = one(&rest)?;
                    inhibition.strength = if v == "auto" {
                        None
                    } else {
                        Some(v.parse().map_err(|_| bad("bad inhibition_strength".into()))?)
                    };
                }
                "inhibition_learnable" => inhibition.learnable = one(&rest)? == "on",
                "allow_final_activation" => allow_final = one(&rest)? == "on",
                "layer" => {
                    if rest.is_empty() {
                        return Err(bad("layer needs a kind".into()));
                    }
                    layers.push(parse_layer(rest[0], &rest[1..], &an, lineno + 1)?);
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        let input_shape =
            input_shape.ok_or_else(|| Error::Config("spec is missing an input line".into()))?;
        Ok(ModelSpec {
            name,
            input_shape,
            loss,
            an,
            inhibition,
            allow_final_activation: allow_final,
            layers,
        })
    }
}

fn an_override_text(an: &Option<ANConfig>) -> String {
    match an {
        None => String::new(),
        Some(cfg) => {
            let clip = match cfg.u_clip {
                Some(c) => c.to_string(),
                None => "none".into(),
            };
            format!(
                " an_order={} an_mode={} an_kernel={} an_clip={} an_init={}",
                cfg.order,
                an_mode_str(cfg.mode),
                cfg.kernel,
                clip,
                an_init_str(cfg.init)
            )
        }
    }
}

fn parse_layer(kind: &str, pairs: &[&str], default_an: &ANConfig, lineno: usize) -> Result<LayerSpec> {
    let bad = |msg: String| Error::Config(format!("spec line {lineno}: {msg}"));
    let mut kv = std::collections::BTreeMap::new();
    for p in pairs {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| bad(format!("expected key=value, got {p:?}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let parse_usize = |kv: &std::collections::BTreeMap<String, String>, k: &str| -> Result<Option<usize>> {
        match kv.get(k) {
            None => Ok(None),
            Some(v) => v
                .parse::<usize>()
                .map(Some)
                .map_err(|_| bad(format!("bad {k} value {v:?}"))),
        }
    };
    let an_override = |kv: &std::collections::BTreeMap<String, String>| -> Result<Option<ANConfig>> {
        let keys = ["an_order", "an_mode", "an_kernel", "an_clip", "an_init"];
        if !keys.iter().any(|k| kv.contains_key(*k)) {
            return Ok(None);
        }
        let mut cfg = *default_an;
        if let Some(v) = parse_usize(kv, "an_order")? {
            cfg.order = v;
        }
        if let Some(v) = kv.get("an_mode") {
            cfg.mode = parse_an_mode(v)?;
        }
        if let Some(v) = parse_usize(kv, "an_kernel")? {
            cfg.kernel = v;
        }
        if let Some(v) = kv.get("an_clip") {
            cfg.u_clip = if v == "none" {
                None
            } else {
                Some(v.parse().map_err(|_| bad("bad an_clip".into()))?)
            };
        }
        if let Some(v) = kv.get("an_init") {
            cfg.init = parse_an_init(v)?;
        }
        Ok(Some(cfg))
    };
    match kind {
        "dense" => {
            let width = parse_usize(&kv, "width")?
                .ok_or_else(|| bad("dense layer needs width=".into()))?;
            let bias = kv.get("bias").map(|v| v == "on").unwrap_or(false);
            let act: ActivationMode =
                kv.get("act").map(|v| v.parse()).transpose()?.unwrap_or(ActivationMode::None);
            Ok(LayerSpec::Dense { width, bias, act, an: an_override(&kv)? })
        }
        "conv" => {
            let channels = parse_usize(&kv, "channels")?
                .ok_or_else(|| bad("conv layer needs channels=".into()))?;
            let kernel = parse_usize(&kv, "kernel")?.unwrap_or(3);
            let bias = kv.get("bias").map(|v| v == "on").unwrap_or(false);
            let act: ActivationMode =
                kv.get("act").map(|v| v.parse()).transpose()?.unwrap_or(ActivationMode::None);
            Ok(LayerSpec::Conv { channels, kernel, bias, act, an: an_override(&kv)? })
        }
        "maxpool2" => Ok(LayerSpec::MaxPool2),
        "upsample2" => Ok(LayerSpec::Upsample2),
        "flatten" => Ok(LayerSpec::Flatten),
        "skip_save" => Ok(LayerSpec::SkipSave),
        "skip_concat" => Ok(LayerSpec::SkipConcat),
        other => Err(bad(format!("unknown layer kind {other:?}"))),
    }
}
