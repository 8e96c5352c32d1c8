//! The sensing network: a strided, overlapping convolution produces the
//! measurements; a transposed convolution lifts them back to full
//! resolution, residual blocks refine the features and a 3x3 convolution
//! emits the single-channel reconstruction.

pub mod weights;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensorcore::{ConvSpec, Graph, Scalar, Shape, Tensor, Var};
use weights::Record;

/// RNG stream used for weight initialisation.
const INIT_STREAM: u64 = 1;

pub const CONFIG_RECORD: &str = "__config";

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub measurement_stride: usize,
    pub measurement_kernel: usize,
    pub measurement_channels: usize,
    pub recovery_channels: usize,
    pub res_blocks: usize,
    pub target_mr: f64,
}

impl ModelConfig {
    /// Channel plan for a nominal measurement rate: `m = round(rate * s^2)`
    /// (at least one channel), kernel `2s` (`2s + 1` for odd `s`, keeping the
    /// padding symmetric), 64 recovery channels and one residual block.
    pub fn for_rate(target_mr: f64, stride: usize) -> Self {
        let m = (target_mr * (stride * stride) as f64).round().max(1.0) as usize;
        ModelConfig {
            measurement_stride: stride,
            measurement_kernel: 2 * stride + stride % 2,
            measurement_channels: m,
            recovery_channels: 64,
            res_blocks: 1,
            target_mr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (s, k) = (self.measurement_stride, self.measurement_kernel);
        if s < 2 {
            return Err(Error::config(format!("measurement stride must be >= 2, got {s}")));
        }
        if k < s {
            return Err(Error::config(format!(
                "measurement kernel {k} smaller than stride {s}: windows would not overlap"
            )));
        }
        if (k - s) % 2 != 0 {
            return Err(Error::config(format!(
                "kernel {k} - stride {s} is odd, padding cannot be symmetric"
            )));
        }
        if self.measurement_channels == 0 || self.recovery_channels == 0 {
            return Err(Error::config("channel counts must be >= 1"));
        }
        if !(self.target_mr > 0.0 && self.target_mr <= 1.0) {
            return Err(Error::config(format!("target rate {} outside (0, 1]", self.target_mr)));
        }
        Ok(())
    }

    /// Measurement values per scene pixel: `m / s^2`.
    pub fn achieved_mr(&self) -> f64 {
        self.measurement_channels as f64 / (self.measurement_stride * self.measurement_stride) as f64
    }

    pub fn mr_gap(&self) -> f64 {
        (self.achieved_mr() - self.target_mr).abs()
    }

    /// Human-readable rate line, e.g. `target 1.00% achieved 1.17% (3/256)`.
    pub fn rate_summary(&self) -> String {
        let s2 = self.measurement_stride * self.measurement_stride;
        format!(
            "target {:.2}% achieved {:.2}% ({}/{}) gap {:.2}%",
            100.0 * self.target_mr,
            100.0 * self.achieved_mr(),
            self.measurement_channels,
            s2,
            100.0 * self.mr_gap()
        )
    }

    pub fn measurement_pad(&self) -> usize {
        (self.measurement_kernel - self.measurement_stride) / 2
    }

    pub fn measurement_spec(&self) -> ConvSpec {
        ConvSpec::new(
            1,
            self.measurement_channels,
            self.measurement_kernel,
            self.measurement_stride,
            self.measurement_pad(),
        )
    }

    pub fn deconv_spec(&self) -> ConvSpec {
        ConvSpec::transposed(
            self.measurement_channels,
            self.recovery_channels,
            self.measurement_kernel,
            self.measurement_stride,
            self.measurement_pad(),
        )
    }

    fn refine_spec(&self) -> ConvSpec {
        ConvSpec::new(self.recovery_channels, self.recovery_channels, 3, 1, 1)
    }

    fn output_spec(&self) -> ConvSpec {
        ConvSpec::new(self.recovery_channels, 1, 3, 1, 1)
    }

    /// Names, shapes and initialisation fan-in of every learnable tensor, in
    /// storage order.
    fn layout(&self) -> Vec<(String, Shape, Option<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: &str, spec: ConvSpec| {
            let ws = spec.weight_shape();
            let fan_in = if spec.transposed {
                // inputs contributing to one output site
                (spec.in_channels * spec.kernel_h * spec.kernel_w / (spec.stride_h * spec.stride_w)).max(1)
            } else {
                spec.in_channels * spec.kernel_h * spec.kernel_w
            };
            out.push((format!("{name}.weight"), ws, Some(fan_in)));
            out.push((format!("{name}.bias"), Shape::new(1, spec.out_channels, 1, 1), None));
        };
        conv("meas", self.measurement_spec());
        conv("deconv", self.deconv_spec());
        for i in 0..self.res_blocks {
            conv(&format!("res{i}.conv1"), self.refine_spec());
            conv(&format!("res{i}.conv2"), self.refine_spec());
        }
        conv("out", self.output_spec());
        out
    }

    fn to_record(&self) -> Record {
        let mut raw = Vec::with_capacity(28);
        for v in [
            self.measurement_stride,
            self.measurement_kernel,
            self.measurement_channels,
            self.recovery_channels,
            self.res_blocks,
        ] {
            raw.extend_from_slice(&(v as u32).to_le_bytes());
        }
        raw.extend_from_slice(&self.target_mr.to_le_bytes());
        Record::from_raw(CONFIG_RECORD, raw).expect("28 bytes")
    }

    fn from_record(r: &Record) -> Result<Self> {
        let raw = r.raw();
        if raw.len() != 28 {
            return Err(Error::config(format!("'{CONFIG_RECORD}' record has {} bytes, expected 28", raw.len())));
        }
        let u = |i: usize| u32::from_le_bytes([raw[4 * i], raw[4 * i + 1], raw[4 * i + 2], raw[4 * i + 3]]) as usize;
        let mut mr = [0u8; 8];
        mr.copy_from_slice(&raw[20..28]);
        let cfg = ModelConfig {
            measurement_stride: u(0),
            measurement_kernel: u(1),
            measurement_channels: u(2),
            recovery_channels: u(3),
            res_blocks: u(4),
            target_mr: f64::from_le_bytes(mr),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every learnable tensor of the network, measurement and recovery alike.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Scalar = f32> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Deterministic He-normal initialisation with zero biases.
pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(INIT_STREAM);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape, fan_in) in config.layout() {
        let t = match fan_in {
            Some(f) => Tensor::randn(shape, (2.0 / f as f64).sqrt(), &mut rng)?,
            None => Tensor::zeros(shape)?,
        };
        names.push(name);
        tensors.push(t);
    }
    Ok(ModelParams {
        config: config.clone(),
        names,
        tensors,
    })
}

impl<T: Scalar> ModelParams<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Records every tensor on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect();
        BoundModel {
            config: &self.config,
            vars,
        }
    }

    /// Records every tensor as a constant except tensor `index`, which is
    /// taken to be the existing node `var`. Used to differentiate with
    /// respect to one tensor at a time.
    pub fn bind_one(&self, g: &mut Graph<T>, index: usize, var: Var) -> Result<BoundModel<'_>> {
        let expected = self.tensors.get(index).map(Tensor::shape);
        if expected != Some(g.shape(var)) {
            return Err(Error::shape(format!(
                "cannot bind {} as model tensor {index}",
                g.shape(var)
            )));
        }
        let vars = self
            .tensors
            .iter()
            .enumerate()
            .map(|(i, t)| if i == index { var } else { g.input(t.clone()) })
            .collect();
        Ok(BoundModel {
            config: &self.config,
            vars,
        })
    }

    /// `(name, tensor)` records preceded by the configuration record.
    pub fn to_records(&self) -> Result<Vec<Record>> {
        let mut out = vec![self.config.to_record()];
        for (n, t) in self.names.iter().zip(&self.tensors) {
            out.push(Record::from_tensor(n.clone(), t)?);
        }
        Ok(out)
    }

    /// Rebuilds parameters from records. With `expected` given, every tensor
    /// must match that configuration's shapes; otherwise the configuration is
    /// read from the file. Records with `__` or `vel.` prefixes are ignored.
    pub fn from_records(records: &[Record], expected: Option<&ModelConfig>) -> Result<Self> {
        let config = match expected {
            Some(c) => {
                c.validate()?;
                c.clone()
            }
            None => {
                let r = weights::find(records, CONFIG_RECORD)
                    .ok_or_else(|| Error::config(format!("weight file has no '{CONFIG_RECORD}' record")))?;
                ModelConfig::from_record(r)?
            }
        };
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, _) in config.layout() {
            let r = weights::find(records, &name)
                .ok_or_else(|| Error::shape(format!("tensor '{name}' missing from weight file")))?;
            let t: Tensor<T> = r.to_tensor(shape)?;
            t.check_finite(&name)?;
            names.push(name);
            tensors.push(t);
        }
        for r in records {
            if !r.name.starts_with("__") && !r.name.starts_with("vel.") && !names.contains(&r.name) {
                return Err(Error::shape(format!(
                    "tensor '{}' in weight file does not belong to this model",
                    r.name
                )));
            }
        }
        Ok(ModelParams { config, names, tensors })
    }

    /// Scene to measurements, outside of any training graph.
    pub fn measure(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let x = g.input(image.clone());
        let y = m.measure(&mut g, x)?;
        Ok(g.take(y))
    }

    /// Measurements to reconstruction, outside of any training graph.
    pub fn recover(&self, measurements: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let y = g.input(measurements.clone());
        let x = m.recover(&mut g, y)?;
        Ok(g.take(x))
    }

    /// `recover(measure(image))`.
    pub fn reconstruct(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let m = self.bind(&mut g, false);
        let x = g.input(image.clone());
        let y = m.measure(&mut g, x)?;
        let r = m.recover(&mut g, y)?;
        Ok(g.take(r))
    }
}

pub fn save_params<T: Scalar>(params: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    weights::write_file(path, &params.to_records()?)
}

/// Loads parameters, taking the configuration from the file.
pub fn load_params<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    let path = path.as_ref();
    let records = weights::read_file(path)?;
    ModelParams::from_records(&records, None).map_err(|e| e.in_file(path))
}

/// Loads parameters that must match `config`; mismatches name the tensor.
pub fn load_params_for<T: Scalar>(path: impl AsRef<Path>, config: &ModelConfig) -> Result<ModelParams<T>> {
    let path = path.as_ref();
    let records = weights::read_file(path)?;
    ModelParams::from_records(&records, Some(config)).map_err(|e| e.in_file(path))
}

/// Model parameters recorded on a graph.
pub struct BoundModel<'a> {
    config: &'a ModelConfig,
    vars: Vec<Var>,
}

impl BoundModel<'_> {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn measure<T: Scalar>(&self, g: &mut Graph<T>, image: Var) -> Result<Var> {
        let s = g.shape(image);
        let stride = self.config.measurement_stride;
        if s.c != 1 {
            return Err(Error::shape(format!("scene must have one channel, got {s}")));
        }
        if !s.h.is_multiple_of(stride) || !s.w.is_multiple_of(stride) {
            return Err(Error::geometry(format!(
                "scene {}x{} is not divisible by the measurement stride {stride}",
                s.h, s.w
            )));
        }
        g.conv2d(image, self.vars[0], Some(self.vars[1]), &self.config.measurement_spec())
    }

    pub fn recover<T: Scalar>(&self, g: &mut Graph<T>, measurements: Var) -> Result<Var> {
        let s = g.shape(measurements);
        if s.c != self.config.measurement_channels {
            return Err(Error::shape(format!(
                "measurements have {} channels, model produces {}",
                s.c, self.config.measurement_channels
            )));
        }
        let mut h = g.conv2d_transposed(measurements, self.vars[2], Some(self.vars[3]), &self.config.deconv_spec())?;
        let refine = self.config.refine_spec();
        for i in 0..self.config.res_blocks {
            let base = 4 + 4 * i;
            let a = g.conv2d(h, self.vars[base], Some(self.vars[base + 1]), &refine)?;
            let a = g.relu(a);
            let b = g.conv2d(a, self.vars[base + 2], Some(self.vars[base + 3]), &refine)?;
            h = g.add(h, b)?;
        }
        let last = 4 + 4 * self.config.res_blocks;
        g.conv2d(h, self.vars[last], Some(self.vars[last + 1]), &self.config.output_spec())
    }
}

/// How scenes whose sides are not multiples of the stride are handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PadPolicy {
    /// Mirror-pad up to the next multiple, reconstruct, crop the centre back.
    #[default]
    ReflectPadThenCrop,
    Error,
}

impl std::str::FromStr for PadPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "reflect-pad-then-crop" | "reflect" => Ok(PadPolicy::ReflectPadThenCrop),
            "error" => Ok(PadPolicy::Error),
            other => Err(Error::config(format!("unknown pad policy '{other}'"))),
        }
    }
}

impl std::fmt::Display for PadPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PadPolicy::ReflectPadThenCrop => "reflect-pad-then-crop",
            PadPolicy::Error => "error",
        })
    }
}

/// Mirror index without repeating the edge sample.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Pads every plane so both sides become multiples of `multiple`; returns the
/// padded tensor and the (top, left) offset of the original content.
pub fn reflect_pad<T: Scalar>(image: &Tensor<T>, multiple: usize) -> Result<(Tensor<T>, usize, usize)> {
    let s = image.shape();
    let ph = s.h.div_ceil(multiple) * multiple - s.h;
    let pw = s.w.div_ceil(multiple) * multiple - s.w;
    let (top, left) = (ph / 2, pw / 2);
    let padded = Tensor::from_fn(Shape::new(s.n, s.c, s.h + ph, s.w + pw), |b, c, y, x| {
        let sy = reflect_index(y as isize - top as isize, s.h);
        let sx = reflect_index(x as isize - left as isize, s.w);
        image.at(b, c, sy, sx)
    })?;
    Ok((padded, top, left))
}

pub fn crop<T: Scalar>(image: &Tensor<T>, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = image.shape();
    if top + h > s.h || left + w > s.w {
        return Err(Error::geometry(format!("crop {h}x{w} at ({top},{left}) outside {s}")));
    }
    Tensor::from_fn(Shape::new(s.n, s.c, h, w), |b, c, y, x| image.at(b, c, top + y, left + x))
}

impl<T: Scalar> ModelParams<T> {
    /// Reconstructs an image of any size and channel count. Channels are
    /// measured and recovered independently and recombined; sizes that are
    /// not multiples of the stride follow `policy`.
    pub fn reconstruct_image(&self, image: &Tensor<T>, policy: PadPolicy) -> Result<Tensor<T>> {
        let s = image.shape();
        let stride = self.config.measurement_stride;
        let divisible = s.h.is_multiple_of(stride) && s.w.is_multiple_of(stride);
        if !divisible && policy == PadPolicy::Error {
            return Err(Error::geometry(format!(
                "image {}x{} is not divisible by the measurement stride {stride}",
                s.h, s.w
            )));
        }
        let channels = (0..s.c)
            .map(|c| {
                let plane = image.channel(c);
                if divisible {
                    self.reconstruct(&plane)
                } else {
                    let (padded, top, left) = reflect_pad(&plane, stride)?;
                    let r = self.reconstruct(&padded)?;
                    crop(&r, top, left, s.h, s.w)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack_channels(&channels)
    }
}
