//! The multi-objective network: a shared convolutional trunk feeding a
//! mask decoder and three fully connected heads (joint coordinates, base
//! coordinates, robot type).
//!
//! ```text
//! image ─ conv1 ─ conv2 ─ conv3 ─ conv4 ─┬─ up ─ mask_conv1 ─ up ─ mask_conv_secondlast ─ up ─ up ─ mask_conv_last ─ sigmoid
//!        (each conv: 3x3, relu, maxpool2) └─ avgpool ─┬─ joint_fc1 ─ relu ─ joint_fc2
//!                                                      ├─ base_fc1 ─ relu ─ base_fc2
//!                                                      └─ type_fc1 ─ relu ─ type_fc2 ─ softmax
//! ```
//!
//! Forward and backward passes work one sample at a time. Backward only
//! produces input gradients when some layer upstream is trainable, so a
//! frozen trunk costs nothing during transfer training.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint::{self, NamedTensor};
use crate::autodiff::layers::{
    adaptive_avg_pool_backward, conv2d_backward_accumulate, fully_connected_backward, maxpool2_backward,
    relu_backward, relu_in_place, sigmoid_derivative, softmax_backward, upsample_nearest_backward,
};
use crate::autodiff::{
    adaptive_avg_pool, conv2d_forward, fully_connected, maxpool2, sigmoid, softmax, upsample_nearest, Conv2d,
    Parameter, Tensor,
};
use crate::error::{Error, Result};

pub const TRUNK_CONVS: [&str; 4] = ["trunk_conv1", "trunk_conv2", "trunk_conv3", "trunk_conv4"];
pub const MASK_CONV1: &str = "mask_conv1";
pub const MASK_CONV_SECONDLAST: &str = "mask_conv_secondlast";
pub const MASK_CONV_LAST: &str = "mask_conv_last";
pub const JOINT_FC1: &str = "joint_fc1";
pub const JOINT_HEAD: &str = "joint_fc2";
pub const BASE_FC1: &str = "base_fc1";
pub const BASE_HEAD: &str = "base_fc2";
pub const TYPE_FC1: &str = "type_fc1";
pub const TYPE_HEAD: &str = "type_fc2";

pub const ARCH_TENSOR: &str = "arch.spec";

// Layer slots, in parameter order.
const T1: usize = 0;
const M1: usize = 4;
const M2: usize = 5;
const M3: usize = 6;
const J1: usize = 7;
const J2: usize = 8;
const B1: usize = 9;
const B2: usize = 10;
const C1: usize = 11;
const C2: usize = 12;
const N_LAYERS: usize = 13;

const KERNEL: usize = 3;
const INPUT_CHANNELS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub input_height: usize,
    pub input_width: usize,
    pub trunk_widths: [usize; 4],
    pub mask_widths: [usize; 2],
    pub joint_hidden: usize,
    pub base_hidden: usize,
    pub type_hidden: usize,
    /// Grid the trunk output is average-pooled onto before the FC heads.
    pub pool_grid: [usize; 2],
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        Self::standard()
    }
}

impl ArchitectureSpec {
    /// Full-size network for 256x212 inputs.
    pub fn standard() -> Self {
        Self {
            input_height: 212,
            input_width: 256,
            trunk_widths: [8, 16, 32, 64],
            mask_widths: [32, 16],
            joint_hidden: 256,
            base_hidden: 64,
            type_hidden: 32,
            pool_grid: [3, 4],
        }
    }

    /// Same topology at 16x16 with a few hundred parameters, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            input_height: 16,
            input_width: 16,
            trunk_widths: [2, 2, 2, 2],
            mask_widths: [2, 2],
            joint_hidden: 4,
            base_hidden: 3,
            type_hidden: 3,
            pool_grid: [1, 1],
        }
    }

    /// Spatial size after each trunk block; index 0 is the input.
    pub fn level_sizes(&self) -> [(usize, usize); 5] {
        let mut out = [(self.input_height, self.input_width); 5];
        for i in 1..5 {
            out[i] = (out[i - 1].0 / 2, out[i - 1].1 / 2);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let (h4, w4) = self.level_sizes()[4];
        let widths_ok = self.trunk_widths.iter().chain(&self.mask_widths).all(|&w| w > 0)
            && self.joint_hidden > 0
            && self.base_hidden > 0
            && self.type_hidden > 0;
        if h4 == 0 || w4 == 0 || !widths_ok {
            return Err(Error::Config(format!("architecture {self:?} is degenerate")));
        }
        if self.pool_grid[0] == 0 || self.pool_grid[1] == 0 || self.pool_grid[0] > h4 || self.pool_grid[1] > w4 {
            return Err(Error::Config(format!("pool grid {:?} exceeds trunk output {h4}x{w4}", self.pool_grid)));
        }
        Ok(())
    }

    fn pooled_len(&self) -> usize {
        self.trunk_widths[3] * self.pool_grid[0] * self.pool_grid[1]
    }

    fn encode(&self) -> Vec<f64> {
        [
            self.input_height,
            self.input_width,
            self.trunk_widths[0],
            self.trunk_widths[1],
            self.trunk_widths[2],
            self.trunk_widths[3],
            self.mask_widths[0],
            self.mask_widths[1],
            self.joint_hidden,
            self.base_hidden,
            self.type_hidden,
            self.pool_grid[0],
            self.pool_grid[1],
        ]
        .iter()
        .map(|&v| v as f64)
        .collect()
    }

    fn decode(v: &[f64]) -> Result<Self> {
        if v.len() != 13 || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
            return Err(Error::Format("bad architecture record".into()));
        }
        let u: Vec<usize> = v.iter().map(|&x| x as usize).collect();
        Ok(Self {
            input_height: u[0],
            input_width: u[1],
            trunk_widths: [u[2], u[3], u[4], u[5]],
            mask_widths: [u[6], u[7]],
            joint_hidden: u[8],
            base_hidden: u[9],
            type_hidden: u[10],
            pool_grid: [u[11], u[12]],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: &'static str,
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Layer {
    fn new(name: &'static str, shape: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self {
            name,
            weight: Parameter::new(Tensor::new(shape.to_vec(), data).expect("length matches shape")),
            bias: Parameter::new(Tensor::zeros(&[shape[0]])),
        }
    }

    pub fn trainable(&self) -> bool {
        self.weight.trainable || self.bias.trainable
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.weight.trainable = on;
        self.bias.trainable = on;
    }

    pub fn is_fully_connected(&self) -> bool {
        self.weight.value.shape().len() == 2
    }

    fn grads(&mut self) -> Option<(&mut [f64], &mut [f64])> {
        self.trainable()
            .then(|| (self.weight.grad.data_mut(), self.bias.grad.data_mut()))
    }
}

/// Network outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Outputs {
    /// Foreground probabilities, `height * width`, clamped into (0, 1).
    pub mask: Vec<f64>,
    /// `3 * n_joints` camera-frame coordinates, meters.
    pub joints: Vec<f64>,
    pub base: Vec<f64>,
    pub types: Vec<f64>,
}

/// Loss gradients with respect to each output of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub mask: Vec<f64>,
    pub joints: Vec<f64>,
    pub base: Vec<f64>,
    pub types: Vec<f64>,
}

/// Activations of the layers that stay frozen during transfer training:
/// the trunk output and the first decoder convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub trunk: Tensor,
    pub decoder: Tensor,
}

pub struct TrunkTape {
    conv_inputs: Vec<Tensor>,
    relu_outputs: Vec<Tensor>,
    argmax: Vec<Vec<u32>>,
    up1: Tensor,
}

pub struct HeadTape {
    up2: Tensor,
    m2: Tensor,
    up3_shape: Vec<usize>,
    up4: Tensor,
    pooled: Tensor,
    hidden: [Vec<f64>; 3],
}

/// Batched outputs: `mask [B, H, W]`, `joints [B, 3 N_j]`, `base [B, 3]`,
/// `types [B, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub mask: Tensor,
    pub joints: Tensor,
    pub base: Tensor,
    pub types: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiObjectiveNet {
    spec: ArchitectureSpec,
    n_joints: usize,
    n_types: usize,
    layers: Vec<Layer>,
}

impl MultiObjectiveNet {
    pub fn build(n_joints: usize, n_types: usize, seed: u64) -> Result<Self> {
        Self::with_spec(ArchitectureSpec::standard(), n_joints, n_types, seed)
    }

    pub fn with_spec(spec: ArchitectureSpec, n_joints: usize, n_types: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if !(6..=7).contains(&n_joints) {
            return Err(Error::Config(format!("n_joints must be 6 or 7, got {n_joints}")));
        }
        if n_types == 0 {
            return Err(Error::Config("n_types must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [t1, t2, t3, t4] = spec.trunk_widths;
        let [mw1, mw2] = spec.mask_widths;
        let k = KERNEL;
        let pooled = spec.pooled_len();
        let shapes: [(&'static str, Vec<usize>); N_LAYERS] = [
            (TRUNK_CONVS[0], vec![t1, INPUT_CHANNELS, k, k]),
            (TRUNK_CONVS[1], vec![t2, t1, k, k]),
            (TRUNK_CONVS[2], vec![t3, t2, k, k]),
            (TRUNK_CONVS[3], vec![t4, t3, k, k]),
            (MASK_CONV1, vec![mw1, t4, k, k]),
            (MASK_CONV_SECONDLAST, vec![mw2, mw1, k, k]),
            (MASK_CONV_LAST, vec![1, mw2, k, k]),
            (JOINT_FC1, vec![spec.joint_hidden, pooled]),
            (JOINT_HEAD, vec![3 * n_joints, spec.joint_hidden]),
            (BASE_FC1, vec![spec.base_hidden, pooled]),
            (BASE_HEAD, vec![3, spec.base_hidden]),
            (TYPE_FC1, vec![spec.type_hidden, pooled]),
            (TYPE_HEAD, vec![n_types, spec.type_hidden]),
        ];
        let layers = shapes.iter().map(|(name, shape)| Layer::new(name, shape, &mut rng)).collect();
        Ok(Self {
            spec,
            n_joints,
            n_types,
            layers,
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn n_joints(&self) -> usize {
        self.n_joints
    }

    pub fn n_types(&self) -> usize {
        self.n_types
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&Layer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut Layer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.value.len() + l.bias.value.len()).sum()
    }

    /// `(name, parameter)` pairs in checkpoint order.
    pub fn named_parameters(&self) -> Vec<(String, &Parameter)> {
        self.layers
            .iter()
            .flat_map(|l| [(format!("{}.weight", l.name), &l.weight), (format!("{}.bias", l.name), &l.bias)])
            .collect()
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn zero_grad(&mut self) {
        self.parameters_mut().for_each(Parameter::zero_grad);
    }

    /// Names of layers with at least one trainable parameter.
    pub fn trainable_layers(&self) -> Vec<&'static str> {
        self.layers.iter().filter(|l| l.trainable()).map(|l| l.name).collect()
    }

    pub fn set_all_trainable(&mut self, on: bool) {
        self.layers.iter_mut().for_each(|l| l.set_trainable(on));
    }

    /// Transfer setup: every convolution frozen except the last two of the
    /// mask decoder; every fully connected layer trainable.
    pub fn freeze_for_transfer(&mut self) {
        for layer in &mut self.layers {
            let on = layer.is_fully_connected() || layer.name == MASK_CONV_SECONDLAST || layer.name == MASK_CONV_LAST;
            layer.set_trainable(on);
        }
    }

    /// True when every layer feeding [`Features`] is frozen, so features
    /// can be computed once and reused.
    pub fn features_frozen(&self) -> bool {
        self.layers[T1..=M1].iter().all(|l| !l.trainable())
    }

    /// Replaces the joint head with a freshly initialized layer producing
    /// `3 * n_joints` outputs. Every other parameter is kept as is.
    pub fn adapt_joint_head(&mut self, n_joints: usize, seed: u64) -> Result<()> {
        if !(6..=7).contains(&n_joints) {
            return Err(Error::Config(format!("n_joints must be 6 or 7, got {n_joints}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.layers[J2] = Layer::new(JOINT_HEAD, &[3 * n_joints, self.spec.joint_hidden], &mut rng);
        self.n_joints = n_joints;
        Ok(())
    }

    /// Replaces the robot-type head with a fresh `n_types`-way layer.
    pub fn adapt_type_head(&mut self, n_types: usize, seed: u64) -> Result<()> {
        if n_types == 0 {
            return Err(Error::Config("n_types must be at least 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.layers[C2] = Layer::new(TYPE_HEAD, &[n_types, self.spec.type_hidden], &mut rng);
        self.n_types = n_types;
        Ok(())
    }

    /// Sets the output biases of the joint and base heads, so that a fresh
    /// head starts out predicting `joints` and `base`.
    pub fn set_regression_offsets(&mut self, joints: Option<&[f64]>, base: Option<[f64; 3]>) -> Result<()> {
        if let Some(j) = joints {
            let bias = self.layers[J2].bias.value.data_mut();
            if j.len() != bias.len() {
                return Err(Error::ShapeMismatch(format!("joint offset has {} values, head has {}", j.len(), bias.len())));
            }
            bias.copy_from_slice(j);
        }
        if let Some(b) = base {
            self.layers[B2].bias.value.data_mut().copy_from_slice(&b);
        }
        Ok(())
    }

    fn conv(&self, slot: usize, input: &Tensor) -> Result<Tensor> {
        let l = &self.layers[slot];
        conv2d_forward(input, &l.weight.value, &l.bias.value, Conv2d::SAME_3X3)
    }

    fn fc(&self, slot: usize, input: &[f64]) -> Result<Vec<f64>> {
        let l = &self.layers[slot];
        Ok(fully_connected(input, &l.weight.value, &l.bias.value)?.into_data())
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let want = [INPUT_CHANNELS, self.spec.input_height, self.spec.input_width];
        if image.shape() != want {
            return Err(Error::ShapeMismatch(format!("image {:?}, expected {want:?}", image.shape())));
        }
        Ok(())
    }

    /// Trunk and first decoder convolution for one `[3, H, W]` image.
    pub fn forward_features(&self, image: &Tensor) -> Result<(Features, TrunkTape)> {
        self.check_image(image)?;
        let sizes = self.spec.level_sizes();
        let mut conv_inputs = Vec::with_capacity(4);
        let mut relu_outputs = Vec::with_capacity(4);
        let mut argmax = Vec::with_capacity(4);
        let mut x = image.clone();
        for slot in T1..T1 + 4 {
            let mut y = self.conv(slot, &x)?;
            relu_in_place(&mut y);
            let (pooled, arg) = maxpool2(&y)?;
            conv_inputs.push(std::mem::replace(&mut x, pooled));
            relu_outputs.push(y);
            argmax.push(arg);
        }
        let trunk = x;
        let up1 = upsample_nearest(&trunk, sizes[3].0, sizes[3].1)?;
        let mut decoder = self.conv(M1, &up1)?;
        relu_in_place(&mut decoder);
        Ok((
            Features { trunk, decoder },
            TrunkTape {
                conv_inputs,
                relu_outputs,
                argmax,
                up1,
            },
        ))
    }

    /// Everything downstream of [`Features`].
    pub fn forward_heads(&self, f: &Features) -> Result<(Outputs, HeadTape)> {
        let sizes = self.spec.level_sizes();
        let up2 = upsample_nearest(&f.decoder, sizes[2].0, sizes[2].1)?;
        let mut m2 = self.conv(M2, &up2)?;
        relu_in_place(&mut m2);
        let up3 = upsample_nearest(&m2, sizes[1].0, sizes[1].1)?;
        let up4 = upsample_nearest(&up3, sizes[0].0, sizes[0].1)?;
        let logits = self.conv(M3, &up4)?;
        let mask: Vec<f64> = logits.data().iter().map(|&z| sigmoid(z)).collect();

        let [gh, gw] = self.spec.pool_grid;
        let pooled = adaptive_avg_pool(&f.trunk, gh, gw)?;
        let head = |fc1: usize, fc2: usize| -> Result<(Vec<f64>, Vec<f64>)> {
            let mut h = self.fc(fc1, pooled.data())?;
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            let out = self.fc(fc2, &h)?;
            Ok((h, out))
        };
        let (hj, joints) = head(J1, J2)?;
        let (hb, base) = head(B1, B2)?;
        let (ht, type_logits) = head(C1, C2)?;
        let types = softmax(&type_logits);

        let outputs = Outputs {
            mask,
            joints,
            base,
            types,
        };
        if !outputs.all_finite() {
            return Err(Error::NonFinite("forward"));
        }
        Ok((
            outputs,
            HeadTape {
                up2,
                m2,
                up3_shape: up3.shape().to_vec(),
                up4,
                pooled,
                hidden: [hj, hb, ht],
            },
        ))
    }

    pub fn forward_sample(&self, image: &Tensor) -> Result<Outputs> {
        let (features, _) = self.forward_features(image)?;
        Ok(self.forward_heads(&features)?.0)
    }

    /// Batched inference on `[B, 3, H, W]` images. Pure: parameters are
    /// never touched.
    pub fn forward(&self, images: &Tensor) -> Result<ForwardOutput> {
        let [b, c, h, w] = *images.shape() else {
            return Err(Error::ShapeMismatch(format!("images {:?}, expected [B, 3, H, W]", images.shape())));
        };
        if b == 0 {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        let mut outs = Vec::with_capacity(b);
        for i in 0..b {
            let image = Tensor::new(vec![c, h, w], images.outer(i).to_vec())?;
            outs.push(self.forward_sample(&image)?);
        }
        let cat = |f: fn(&Outputs) -> &Vec<f64>, tail: &[usize]| -> Result<Tensor> {
            let mut shape = vec![b];
            shape.extend_from_slice(tail);
            Tensor::new(shape, outs.iter().flat_map(|o| f(o).iter().copied()).collect())
        };
        Ok(ForwardOutput {
            mask: cat(|o| &o.mask, &[h, w])?,
            joints: cat(|o| &o.joints, &[3 * self.n_joints])?,
            base: cat(|o| &o.base, &[3])?,
            types: cat(|o| &o.types, &[self.n_types])?,
        })
    }

    fn any_trainable(&self, slots: std::ops::Range<usize>) -> bool {
        self.layers[slots].iter().any(Layer::trainable)
    }

    fn conv_backward(&mut self, slot: usize, input: &Tensor, grad_out: &Tensor, need_input: bool) -> Result<Option<Tensor>> {
        let layer = &mut self.layers[slot];
        let weight = layer.weight.value.clone();
        conv2d_backward_accumulate(input, &weight, grad_out, Conv2d::SAME_3X3, layer.grads(), need_input)
    }

    fn fc_backward(&mut self, slot: usize, input: &[f64], grad_out: &[f64], need_input: bool) -> Result<Option<Vec<f64>>> {
        let layer = &mut self.layers[slot];
        let Layer { weight, bias, .. } = layer;
        let grads = (weight.trainable || bias.trainable).then(|| (weight.grad.data_mut(), bias.grad.data_mut()));
        fully_connected_backward(input, &weight.value, grad_out, grads, need_input)
    }

    /// Accumulates parameter gradients of everything after [`Features`].
    /// Returns gradients with respect to the features when any upstream
    /// layer is trainable.
    pub fn backward_heads(
        &mut self,
        f: &Features,
        tape: &HeadTape,
        out: &Outputs,
        grads: &OutputGrads,
    ) -> Result<Option<Features>> {
        let trunk_needed = self.any_trainable(T1..M1);
        let decoder_needed = trunk_needed || self.layers[M1].trainable();
        let (h, w) = self.spec.level_sizes()[0];

        // Mask decoder.
        let dlogits: Vec<f64> = grads
            .mask
            .iter()
            .zip(&out.mask)
            .map(|(g, &p)| g * sigmoid_derivative(p))
            .collect();
        let dlogits = Tensor::new(vec![1, h, w], dlogits)?;
        let need_up4 = decoder_needed || self.layers[M2].trainable();
        let mut d_decoder = None;
        if let Some(dup4) = self.conv_backward(M3, &tape.up4, &dlogits, need_up4)? {
            let dup3 = upsample_nearest_backward(&tape.up3_shape, &dup4)?;
            let dm2 = upsample_nearest_backward(tape.m2.shape(), &dup3)?;
            let dm2 = relu_backward(&tape.m2, &dm2)?;
            if let Some(dup2) = self.conv_backward(M2, &tape.up2, &dm2, decoder_needed)? {
                d_decoder = Some(upsample_nearest_backward(f.decoder.shape(), &dup2)?);
            }
        }

        // Fully connected heads.
        let mut d_pooled = trunk_needed.then(|| vec![0.0; tape.pooled.len()]);
        let dtype_logits = softmax_backward(&out.types, &grads.types);
        let heads = [
            (J1, J2, &grads.joints, &tape.hidden[0]),
            (B1, B2, &grads.base, &tape.hidden[1]),
            (C1, C2, &grads.types, &tape.hidden[2]),
        ];
        for (fc1, fc2, g, hidden) in heads {
            let g = if fc2 == C2 { &dtype_logits } else { g };
            let need_hidden = trunk_needed || self.layers[fc1].trainable();
            if let Some(dh) = self.fc_backward(fc2, hidden, g, need_hidden)? {
                let dh: Vec<f64> = dh.iter().zip(hidden).map(|(d, &a)| if a > 0.0 { *d } else { 0.0 }).collect();
                if let Some(dp) = self.fc_backward(fc1, tape.pooled.data(), &dh, trunk_needed)? {
                    let acc = d_pooled.as_mut().expect("allocated when the trunk needs gradients");
                    acc.iter_mut().zip(&dp).for_each(|(a, b)| *a += b);
                }
            }
        }

        if !decoder_needed {
            return Ok(None);
        }
        let d_decoder = d_decoder.unwrap_or_else(|| Tensor::zeros(f.decoder.shape()));
        let d_trunk = match d_pooled {
            Some(dp) => {
                let dp = Tensor::new(tape.pooled.shape().to_vec(), dp)?;
                adaptive_avg_pool_backward(f.trunk.shape(), &dp)?
            }
            None => Tensor::zeros(f.trunk.shape()),
        };
        Ok(Some(Features {
            trunk: d_trunk,
            decoder: d_decoder,
        }))
    }

    /// Accumulates parameter gradients of the trunk and first decoder conv.
    pub fn backward_features(&mut self, f: &Features, tape: &TrunkTape, grad: &Features) -> Result<()> {
        let trunk_needed = self.any_trainable(T1..M1);
        let dm1 = relu_backward(&f.decoder, &grad.decoder)?;
        let mut d_trunk = grad.trunk.clone();
        if let Some(dup1) = self.conv_backward(M1, &tape.up1, &dm1, trunk_needed)? {
            let d = upsample_nearest_backward(f.trunk.shape(), &dup1)?;
            d_trunk.data_mut().iter_mut().zip(d.data()).for_each(|(a, b)| *a += b);
        }
        let mut grad = d_trunk;
        for i in (0..4).rev() {
            if !self.any_trainable(T1..T1 + i + 1) {
                break;
            }
            let relu_out = &tape.relu_outputs[i];
            let d = maxpool2_backward(relu_out.shape(), &tape.argmax[i], &grad)?;
            let d = relu_backward(relu_out, &d)?;
            let need_input = self.any_trainable(T1..T1 + i);
            match self.conv_backward(T1 + i, &tape.conv_inputs[i], &d, need_input)? {
                Some(g) => grad = g,
                None => break,
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_atomic(path, &self.to_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut arch = Parameter::new(Tensor::new(vec![13], self.spec.encode()).expect("13 fields"));
        arch.trainable = false;
        let named = self.named_parameters();
        let mut entries: Vec<(&str, &Parameter)> = vec![(ARCH_TENSOR, &arch)];
        entries.extend(named.iter().map(|(n, p)| (n.as_str(), *p)));
        checkpoint::encode(&entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensors(checkpoint::load(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_tensors(checkpoint::decode(bytes)?)
    }

    fn from_tensors(tensors: Vec<NamedTensor>) -> Result<Self> {
        let mut it = tensors.into_iter();
        let arch = it
            .next()
            .filter(|t| t.name == ARCH_TENSOR)
            .ok_or_else(|| Error::Format("checkpoint has no architecture record".into()))?;
        let spec = ArchitectureSpec::decode(arch.value.data())?;
        let rest: Vec<NamedTensor> = it.collect();
        let find = |name: &str| -> Result<&NamedTensor> {
            rest.iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing tensor `{name}`")))
        };
        let n_joints = find(&format!("{JOINT_HEAD}.bias"))?.value.len() / 3;
        let n_types = find(&format!("{TYPE_HEAD}.bias"))?.value.len();
        let mut net = Self::with_spec(spec, n_joints, n_types, 0)
            .map_err(|e| Error::CheckpointMismatch(e.to_string()))?;
        if rest.len() != 2 * N_LAYERS {
            return Err(Error::CheckpointMismatch(format!("expected {} tensors, found {}", 2 * N_LAYERS, rest.len())));
        }
        for layer in &mut net.layers {
            for (suffix, param) in [("weight", &mut layer.weight), ("bias", &mut layer.bias)] {
                let name = format!("{}.{suffix}", layer.name);
                let t = find(&name)?;
                if t.value.shape() != param.value.shape() {
                    return Err(Error::CheckpointMismatch(format!(
                        "`{name}` has shape {:?}, expected {:?}",
                        t.value.shape(),
                        param.value.shape()
                    )));
                }
                *param = Parameter::new(t.value.clone());
                param.trainable = t.trainable;
            }
        }
        Ok(net)
    }
}

impl Outputs {
    fn all_finite(&self) -> bool {
        [&self.mask, &self.joints, &self.base, &self.types]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()))
    }
}
