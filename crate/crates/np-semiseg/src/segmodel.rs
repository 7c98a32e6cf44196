//! Network pieces around the NP head: a small trainable encoder stand-in,
//! the channel-reduction ConvNet, and the decoder that turns assembled
//! maps into per-class logits.
//!
//! Layer structs own their [`Parameter`]s; for a forward pass they are
//! bound onto a [`Tape`] through a [`ParamFeed`], which either widens the
//! stored f32 values or replays externally supplied tensors (the
//! finite-difference oracle perturbs those). Binding order and
//! `params()` order must match; the gradient checks would catch any skew.

use crate::rng::StreamRng;
use crate::tape::{Tape, Var};
use crate::tensor::{Parameter, Real, Tensor};
use crate::{NpError, Result};

/// Fixed epsilon inside every instance norm.
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Supplies leaf tensors for parameter binding, in declaration order.
pub struct ParamFeed<'t, T: Real> {
    tape: &'t Tape<T>,
    values: std::vec::IntoIter<Tensor<T>>,
    bound: Vec<Var>,
}

impl<'t, T: Real> ParamFeed<'t, T> {
    pub fn from_values(tape: &'t Tape<T>, values: Vec<Tensor<T>>) -> Self {
        ParamFeed {
            tape,
            values: values.into_iter(),
            bound: Vec::new(),
        }
    }

    pub fn from_params<'a>(
        tape: &'t Tape<T>,
        params: impl IntoIterator<Item = &'a Parameter>,
    ) -> Self {
        let values: Vec<Tensor<T>> = params.into_iter().map(|p| p.value.cast()).collect();
        Self::from_values(tape, values)
    }

    fn next(&mut self) -> Var {
        let t = self
            .values
            .next()
            .expect("parameter feed exhausted: bind order out of sync");
        let v = self.tape.leaf(t);
        self.bound.push(v);
        v
    }

    /// Leaves in bind order, paired with `params()` order by the caller.
    pub fn into_bound(self) -> Vec<Var> {
        self.bound
    }
}

fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut StreamRng) -> Tensor<f32> {
    let bound = (1.0 / fan_in as f64).sqrt() as f32;
    let numel: usize = shape.iter().product();
    let data: Vec<f32> = (0..numel).map(|_| rng.uniform_f32(-bound, bound)).collect();
    Tensor::new(shape, data).expect("init shape")
}

// ---- basic layers ----

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Parameter,
    pub bias: Parameter,
    pub kernel: usize,
    pub padding: usize,
}

#[derive(Clone, Copy)]
pub struct Conv2dVars {
    w: Var,
    b: Var,
    padding: usize,
}

impl Conv2d {
    /// k=1 gets padding 0, k=3 padding 1; both preserve spatial extents.
    pub fn new(cin: usize, cout: usize, kernel: usize, rng: &mut StreamRng) -> Self {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels");
        Conv2d {
            weight: Parameter::new(init_uniform(
                &[cout, cin, kernel, kernel],
                cin * kernel * kernel,
                rng,
            )),
            bias: Parameter::new(Tensor::zeros(&[cout])),
            kernel,
            padding: if kernel == 3 { 1 } else { 0 },
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn bind<T: Real>(&self, feed: &mut ParamFeed<T>) -> Conv2dVars {
        Conv2dVars {
            w: feed.next(),
            b: feed.next(),
            padding: self.padding,
        }
    }
}

impl Conv2dVars {
    pub fn forward<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        tape.conv2d(x, self.w, self.b, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
}

#[derive(Clone, Copy)]
pub struct InstanceNormVars {
    g: Var,
    b: Var,
}

impl InstanceNorm {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: Parameter::new(Tensor::full(&[channels], 1.0)),
            beta: Parameter::new(Tensor::zeros(&[channels])),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.gamma, &mut self.beta]
    }

    pub fn bind<T: Real>(&self, feed: &mut ParamFeed<T>) -> InstanceNormVars {
        InstanceNormVars {
            g: feed.next(),
            b: feed.next(),
        }
    }
}

impl InstanceNormVars {
    pub fn forward<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        tape.instance_norm(x, self.g, self.b, INSTANCE_NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Parameter,
    pub bias: Parameter,
}

#[derive(Clone, Copy)]
pub struct LinearVars {
    w: Var,
    b: Var,
}

impl LinearLayer {
    pub fn new(din: usize, dout: usize, rng: &mut StreamRng) -> Self {
        LinearLayer {
            weight: Parameter::new(init_uniform(&[dout, din], din, rng)),
            bias: Parameter::new(Tensor::zeros(&[dout])),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn bind<T: Real>(&self, feed: &mut ParamFeed<T>) -> LinearVars {
        LinearVars {
            w: feed.next(),
            b: feed.next(),
        }
    }
}

impl LinearVars {
    pub fn forward<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        tape.linear(x, self.w, self.b)
    }
}

/// conv -> instance norm -> relu
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub norm: InstanceNorm,
}

#[derive(Clone, Copy)]
pub struct ConvBlockVars {
    conv: Conv2dVars,
    norm: InstanceNormVars,
}

impl ConvBlock {
    pub fn new(cin: usize, cout: usize, kernel: usize, rng: &mut StreamRng) -> Self {
        ConvBlock {
            conv: Conv2d::new(cin, cout, kernel, rng),
            norm: InstanceNorm::new(cout),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.conv.params();
        p.extend(self.norm.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.conv.params_mut();
        p.extend(self.norm.params_mut());
        p
    }

    pub fn bind<T: Real>(&self, feed: &mut ParamFeed<T>) -> ConvBlockVars {
        ConvBlockVars {
            conv: self.conv.bind(feed),
            norm: self.norm.bind(feed),
        }
    }
}

impl ConvBlockVars {
    pub fn forward<T: Real>(&self, tape: &Tape<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, x)?;
        let y = self.norm.forward(tape, y)?;
        tape.relu(y)
    }
}

// ---- encoder ----

/// Stand-in backbone configuration. Defaults are desk scale; the widths
/// that mirror the reference tables (512-channel features) remain
/// constructible for shape checks.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub feature_channels: usize,
    pub depth: usize,
    pub downsample_factor: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            in_channels: 3,
            feature_channels: 32,
            depth: 3,
            downsample_factor: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.feature_channels < 8 {
            return Err(NpError::Config(format!(
                "feature_channels must be >= 8, got {}",
                self.feature_channels
            )));
        }
        if self.in_channels == 0 || self.depth == 0 || self.downsample_factor == 0 {
            return Err(NpError::Config("encoder extents must be positive".into()));
        }
        Ok(())
    }
}

/// Trainable encoder: `depth` blocks of conv3x3/InstanceNorm/ReLU, then an
/// optional average-pool downsample.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub blocks: Vec<ConvBlock>,
}

pub struct EncoderVars {
    blocks: Vec<ConvBlockVars>,
    downsample: usize,
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, rng: &mut StreamRng) -> Result<Self> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        let mut cin = cfg.in_channels;
        for _ in 0..cfg.depth {
            blocks.push(ConvBlock::new(cin, cfg.feature_channels, 3, rng));
            cin = cfg.feature_channels;
        }
        Ok(Encoder { cfg, blocks })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.blocks.iter_mut().flat_map(|b| b.params_mut()).collect()
    }

    pub fn bind<T: Real>(&self, feed: &mut ParamFeed<T>) -> EncoderVars {
        EncoderVars {
            blocks: self.blocks.iter().map(|b| b.bind(feed)).collect(),
            downsample: self.cfg.downsample_factor,
        }
    }

    /// Value-level convenience forward.
    pub fn encode(&self, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape: Tape<f32> = Tape::new();
        let mut feed = ParamFeed::from_params(&tape, self.params());
        let vars = self.bind(&mut feed);
        let x = tape.leaf(image.clone());
        let y = vars.forward(&tape, x)?;
        Ok((*tape.value(y)).clone())
    }
}

impl EncoderVars {
    pub fn forward<T: Real>(&self, tape: &Tape<T>, image: Var) -> Result<Var> {
        let shape = tape.shape(image);
        if shape.len() != 3 {
            return Err(NpError::Shape(format!("encoder input rank {:?}", shape)));
        }
        if shape[1] < 8 || shape[2] < 8 {
            return Err(NpError::Shape(format!(
                "encoder input extents {}x{} below minimum 8",
                shape[1], shape[2]
            )));
        }
        let mut x = image;
        for b in &self.blocks {
            x = b.forward(tape, x)?;
        }
        if self.downsample > 1 {
            x = tape.avg_pool2d(x, self.downsample)?;
        }
        Ok(x)
    }
}

// ---- small ConvNet (dimensionality reduction) ----

#[derive(Debug, Clone, PartialEq)]
pub struct SmallConvNetConfig {
    pub in_channels: usize,
    pub hidden: usize,
}

impl Default for SmallConvNetConfig {
    fn default() -> Self {
        SmallConvNetConfig {
            in_channels: 32,
            hidden: 8,
        }
    }
}

/// conv1x1 -> InstanceNorm -> ReLU -> conv1x1 -> InstanceNorm -> ReLU -> conv1x1,
/// all spatial-size preserving.
#[derive(Debug, Clone)]
pub struct SmallConvNet {
    pub cfg: SmallConvNetConfig,
    pub conv1: Conv2d,
    pub norm1: InstanceNorm,
    pub conv2: Conv2d,
    pub norm2: InstanceNorm,
    pub conv3: Conv2d,
}

pub struct SmallConvNetVars {
    conv1: Conv2dVars,
    norm1: InstanceNormVars,
    conv2: Conv2dVars,
    norm2: InstanceNormVars,
    conv3: Conv2dVars,
}

impl SmallConvNet {
    pub fn new(cfg: SmallConvNetConfig, rng: &mut StreamRng) -> Self {
        let r = cfg.hidden;
        SmallConvNet {
            conv1: Conv2d::new(cfg.in_channels, r, 1, rng),
            norm1: InstanceNorm::new(r),
            conv2: Conv2d::new(r, r, 1, rng),
            norm2: InstanceNorm::new(r),
            conv3: Conv2d::new(r, r, 1, rng),
            cfg,
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.conv1.params();
        p.extend(self.norm1.params());
        p.extend(self.conv2.params());
        p.extend(self.norm2.params());
        p.extend(self.conv3.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.conv1.params_mut();
        p.extend(self.norm1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.norm2.params_mut());
        p.extend(self.conv3.params_mut());
        p
    }

    pub fn bind<T: Real>(&self, feed: &mut ParamFeed<T>) -> SmallConvNetVars {
        SmallConvNetVars {
            conv1: self.conv1.bind(feed),
            norm1: self.norm1.bind(feed),
            conv2: self.conv2.bind(feed),
            norm2: self.norm2.bind(feed),
            conv3: self.conv3.bind(feed),
        }
    }

    /// Value-level convenience forward.
    pub fn reduce(&self, featmap: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape: Tape<f32> = Tape::new();
        let mut feed = ParamFeed::from_params(&tape, self.params());
        let vars = self.bind(&mut feed);
        let x = tape.leaf(featmap.clone());
        let y = vars.forward(&tape, x)?;
        Ok((*tape.value(y)).clone())
    }
}

impl SmallConvNetVars {
    pub fn forward<T: Real>(&self, tape: &Tape<T>, featmap: Var) -> Result<Var> {
        let x = self.conv1.forward(tape, featmap)?;
        let x = self.norm1.forward(tape, x)?;
        let x = tape.relu(x)?;
        let x = self.conv2.forward(tape, x)?;
        let x = self.norm2.forward(tape, x)?;
        let x = tape.relu(x)?;
        self.conv3.forward(tape, x)
    }
}

// ---- decoder ----

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub n_class: usize,
}

/// conv3x3(pad 1) -> IN -> ReLU -> conv3x3(pad 1) -> IN -> ReLU -> conv1x1
/// to `n_class` logits; spatial extents are preserved throughout.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub conv1: Conv2d,
    pub norm1: InstanceNorm,
    pub conv2: Conv2d,
    pub norm2: InstanceNorm,
    pub conv3: Conv2d,
}

pub struct DecoderVars {
    conv1: Conv2dVars,
    norm1: InstanceNormVars,
    conv2: Conv2dVars,
    norm2: InstanceNormVars,
    conv3: Conv2dVars,
}

impl Decoder {
    pub fn new(cfg: DecoderConfig, rng: &mut StreamRng) -> Self {
        let h = cfg.hidden;
        Decoder {
            conv1: Conv2d::new(cfg.in_channels, h, 3, rng),
            norm1: InstanceNorm::new(h),
            conv2: Conv2d::new(h, h, 3, rng),
            norm2: InstanceNorm::new(h),
            conv3: Conv2d::new(h, cfg.n_class, 1, rng),
            cfg,
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.conv1.params();
        p.extend(self.norm1.params());
        p.extend(self.conv2.params());
        p.extend(self.norm2.params());
        p.extend(self.conv3.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.conv1.params_mut();
        p.extend(self.norm1.params_mut());
        p.extend(self.conv2.params_mut());
        p.extend(self.norm2.params_mut());
        p.extend(self.conv3.params_mut());
        p
    }

    pub fn bind<T: Real>(&self, feed: &mut ParamFeed<T>) -> DecoderVars {
        DecoderVars {
            conv1: self.conv1.bind(feed),
            norm1: self.norm1.bind(feed),
            conv2: self.conv2.bind(feed),
            norm2: self.norm2.bind(feed),
            conv3: self.conv3.bind(feed),
        }
    }

    /// Decode a `[T, C, H, W]` assembled tensor slice-by-slice with shared
    /// weights, returning `[T, n_class, H, W]` logits.
    pub fn decode(&self, assembled: &Tensor<f32>) -> Result<Tensor<f32>> {
        if assembled.shape().len() != 4 {
            return Err(NpError::Shape(format!(
                "decode expects [T, C, H, W], got {:?}",
                assembled.shape()
            )));
        }
        let (t, c, h, w) = (
            assembled.shape()[0],
            assembled.shape()[1],
            assembled.shape()[2],
            assembled.shape()[3],
        );
        if c != self.cfg.in_channels {
            return Err(NpError::Shape(format!(
                "decode channel mismatch: got {c}, decoder expects {}",
                self.cfg.in_channels
            )));
        }
        let tape: Tape<f32> = Tape::new();
        let mut feed = ParamFeed::from_params(&tape, self.params());
        let vars = self.bind(&mut feed);
        let slice_len = c * h * w;
        let out_len = self.cfg.n_class * h * w;
        let mut out = vec![0.0f32; t * out_len];
        for ti in 0..t {
            let slice = Tensor::new(
                &[c, h, w],
                assembled.data()[ti * slice_len..(ti + 1) * slice_len].to_vec(),
            )?;
            let x = tape.leaf(slice);
            let y = vars.forward(&tape, x, None)?;
            out[ti * out_len..(ti + 1) * out_len].copy_from_slice(tape.value(y).data());
        }
        Tensor::new(&[t, self.cfg.n_class, h, w], out)
    }
}

impl DecoderVars {
    /// One decoder pass. `dropout` carries pre-scaled masks applied after
    /// each ReLU (the MC-dropout baseline); `None` runs the plain decoder.
    pub fn forward<T: Real>(
        &self,
        tape: &Tape<T>,
        x: Var,
        dropout: Option<&[Tensor<T>; 2]>,
    ) -> Result<Var> {
        let mut y = self.conv1.forward(tape, x)?;
        y = self.norm1.forward(tape, y)?;
        y = tape.relu(y)?;
        if let Some(masks) = dropout {
            y = tape.mul_const(y, &masks[0])?;
        }
        y = self.conv2.forward(tape, y)?;
        y = self.norm2.forward(tape, y)?;
        y = tape.relu(y)?;
        if let Some(masks) = dropout {
            y = tape.mul_const(y, &masks[1])?;
        }
        self.conv3.forward(tape, y)
    }
}
