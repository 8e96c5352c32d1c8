//! Gradient verification suite behind `pcs gradcheck`.
//!
//! Every differentiable op is checked in isolation, followed by the gradient
//! of both training losses with respect to every model tensor on a 16x16
//! scene. Inputs are resampled until the forward pass stays clear of ReLU and
//! pooling kinks.
//!
//! Double mode compares the f64 backward pass to f64 central differences.
//! Single mode compares the f32 backward pass to the same f64 differences,
//! with a looser tolerance and a relative floor scaled to the gradient's
//! magnitude so that f32 round-off on near-zero coordinates is not counted.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::csmodel::{build_model, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::losses::{perceptual_loss, pixel_loss, FeatureExtractor};
use crate::tensorcore::{grad_check_with_fault, relative_error, ConvSpec, Fault, Graph, OpKind, Scalar, Tensor, Var};

pub const DOUBLE_TOLERANCE: f64 = 1e-3;
pub const SINGLE_TOLERANCE: f64 = 1e-2;
const EPS: f64 = 1e-6;
/// Smallest kink margin accepted before a sample is redrawn.
const MIN_MARGIN: f64 = 1e-4;
const MAX_DRAWS: u64 = 50;
/// Scene side for the end-to-end loss checks.
pub const SCENE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::Single => SINGLE_TOLERANCE,
            Precision::Double => DOUBLE_TOLERANCE,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub precision: Precision,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            precision: Precision::Double,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    /// Ops whose backward rules the check exercises.
    pub ops: Vec<OpKind>,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Differentiates a whole loss through the model rather than one op.
    pub end_to_end: bool,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteReport {
    pub checks: Vec<CheckOutcome>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckOutcome> {
        self.checks.iter().filter(|c| !c.passed())
    }

    /// The check with the largest error relative to its tolerance.
    pub fn worst(&self) -> Option<&CheckOutcome> {
        self.checks
            .iter()
            .max_by(|a, b| (a.max_relative_error / a.tolerance).total_cmp(&(b.max_relative_error / b.tolerance)))
    }

    /// Error unless every check passed; the message names the worst check.
    pub fn into_result(self) -> Result<Self> {
        if self.passed() {
            return Ok(self);
        }
        let w = self.worst().expect("a failing report is non-empty");
        Err(Error::Verification(format!(
            "suspect ops: {}; worst check {} failed: relative error {:.3e} > {:.0e} (ops: {}; coordinate {}: analytic {:.6e}, numeric {:.6e})",
            op_names(&self.suspects()),
            w.name,
            w.max_relative_error,
            w.tolerance,
            op_names(&w.ops),
            w.worst_index,
            w.analytic,
            w.numeric
        )))
    }

    /// Ops shared by every failing check and absent from every passing one:
    /// the likely location of a wrong backward rule. Single-op checks are
    /// consulted first since end-to-end checks list every op in the network.
    pub fn suspects(&self) -> Vec<OpKind> {
        let isolated: Vec<&CheckOutcome> = self.checks.iter().filter(|c| !c.end_to_end).collect();
        let pool: Vec<&CheckOutcome> = if isolated.iter().any(|c| !c.passed()) {
            isolated
        } else {
            self.checks.iter().collect()
        };
        if pool.iter().all(|c| c.passed()) {
            return Vec::new();
        }
        OpKind::ALL
            .into_iter()
            .filter(|op| pool.iter().filter(|c| !c.passed()).all(|c| c.ops.contains(op)))
            .filter(|op| !pool.iter().any(|c| c.passed() && c.ops.contains(op)))
            .collect()
    }
}

pub fn op_names(ops: &[OpKind]) -> String {
    ops.iter().map(|o| o.name()).collect::<Vec<_>>().join(", ")
}

/// What a check differentiates. Context tensors are constants.
#[derive(Clone, Debug)]
enum Kind {
    ConvInput { w: Tensor<f64>, b: Tensor<f64>, spec: ConvSpec },
    ConvWeight { x: Tensor<f64>, b: Tensor<f64>, spec: ConvSpec },
    ConvBias { x: Tensor<f64>, w: Tensor<f64>, spec: ConvSpec },
    DeconvInput { w: Tensor<f64>, b: Tensor<f64>, spec: ConvSpec },
    DeconvWeight { x: Tensor<f64>, b: Tensor<f64>, spec: ConvSpec },
    Relu,
    MaxPool,
    AddSub { other: Tensor<f64> },
    Sum,
    Scale,
    RepeatChannels,
    SharedWeight { a: Tensor<f64>, b: Tensor<f64>, spec: ConvSpec },
    SelfAdd,
    Pixel { model: ModelParams<f64>, tensor: usize, scene: Tensor<f64> },
    Perceptual { model: ModelParams<f64>, tensor: usize, scene: Tensor<f64>, extractor: FeatureExtractor<f64> },
}

#[derive(Clone, Debug)]
struct Case {
    name: String,
    ops: Vec<OpKind>,
    x: Tensor<f64>,
    kind: Kind,
}

fn half_sum_squares<T: Scalar>(g: &mut Graph<T>, v: Var) -> Var {
    let ss = g.sum_squares(v);
    g.scale(ss, 0.5)
}

fn bias_of<T: Scalar>(g: &mut Graph<T>, b: &Tensor<f64>) -> Var {
    g.input(b.cast())
}

impl Case {
    /// Records the scalar function of the leaf `x` on `g`.
    fn build<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let out = match &self.kind {
            Kind::ConvInput { w, b, spec } | Kind::DeconvInput { w, b, spec } => {
                let (w, b) = (g.input(w.cast()), bias_of(g, b));
                if spec.transposed {
                    g.conv2d_transposed(x, w, Some(b), spec)?
                } else {
                    g.conv2d(x, w, Some(b), spec)?
                }
            }
            Kind::ConvWeight { x: input, b, spec } | Kind::DeconvWeight { x: input, b, spec } => {
                let (i, b) = (g.input(input.cast()), bias_of(g, b));
                if spec.transposed {
                    g.conv2d_transposed(i, x, Some(b), spec)?
                } else {
                    g.conv2d(i, x, Some(b), spec)?
                }
            }
            Kind::ConvBias { x: input, w, spec } => {
                let (i, w) = (g.input(input.cast()), g.input(w.cast()));
                g.conv2d(i, w, Some(x), spec)?
            }
            Kind::Relu => g.relu(x),
            Kind::MaxPool => g.maxpool2(x)?,
            Kind::AddSub { other } => {
                let o = g.input(other.cast());
                let s = g.add(x, o)?;
                let s = g.relu(s);
                g.sub(s, x)?
            }
            Kind::Sum => return Ok(g.sum(x)),
            Kind::Scale => {
                let s = g.scale(x, 2.5);
                return Ok(g.sum(s));
            }
            Kind::RepeatChannels => g.repeat_channels(x, 3)?,
            Kind::SharedWeight { a, b, spec } => {
                let (a, b) = (g.input(a.cast()), g.input(b.cast()));
                let ya = g.conv2d(a, x, None, spec)?;
                let yb = g.conv2d(b, x, None, spec)?;
                g.add(ya, yb)?
            }
            Kind::SelfAdd => g.add(x, x)?,
            Kind::Pixel { model, tensor, scene } => {
                let model = model.cast::<T>();
                let bound = model.bind_one(g, *tensor, x)?;
                let s = g.input(scene.cast());
                let y = bound.measure(g, s)?;
                let r = bound.recover(g, y)?;
                let label = g.input(scene.cast());
                return pixel_loss(g, r, label);
            }
            Kind::Perceptual {
                model,
                tensor,
                scene,
                extractor,
            } => {
                let model = model.cast::<T>();
                let bound = model.bind_one(g, *tensor, x)?;
                let s = g.input(scene.cast());
                let y = bound.measure(g, s)?;
                let r = bound.recover(g, y)?;
                return perceptual_loss(g, &extractor.cast(), "pool2", r, &scene.cast());
            }
        };
        Ok(half_sum_squares(g, out))
    }

    fn kink_margin(&self) -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let x = g.input(self.x.clone());
        self.build(&mut g, x)?;
        Ok(g.kink_margin())
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: [usize; 4], std: f64) -> Tensor<f64> {
    Tensor::randn(shape, std, rng).expect("valid shape")
}

/// End-to-end model: 16x16 scene, stride 4, 4 measurements per block,
/// overlapped 8x8 kernels and a narrow recovery network.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        recovery_channels: 4,
        ..ModelConfig::for_rate(0.25, 4)
    }
}

/// Small biases keep zero-initialised models off ReLU kinks.
fn jitter_model(model: &mut ModelParams<f64>, rng: &mut ChaCha8Rng) {
    for t in model.tensors_mut() {
        let noise = randn(rng, t.shape().dims(), 0.1);
        t.data_mut().iter_mut().zip(noise.data()).for_each(|(v, n)| *v += n);
    }
}

fn extractor_for_checks<T: Scalar>(seed: u64) -> Result<FeatureExtractor<T>> {
    FeatureExtractor::random(seed, 4, 2)
}

/// Every case for one draw of the random context.
fn cases(draw: u64) -> Result<Vec<Case>> {
    let mut rng = ChaCha8Rng::seed_from_u64(draw);
    let mut out = Vec::new();
    let mut push = |name: &str, ops: &[OpKind], x: Tensor<f64>, kind: Kind| {
        out.push(Case {
            name: name.to_string(),
            ops: ops.to_vec(),
            x,
            kind,
        })
    };
    use OpKind::*;
    let conv = ConvSpec::new(2, 3, 4, 2, 1);
    let deconv = ConvSpec::transposed(3, 2, 4, 2, 1);
    push(
        "conv2d/input",
        &[Conv2d, SumSquares, Scale],
        randn(&mut rng, [2, 2, 8, 8], 1.0),
        Kind::ConvInput {
            w: randn(&mut rng, [3, 2, 4, 4], 0.5),
            b: randn(&mut rng, [1, 3, 1, 1], 0.5),
            spec: conv,
        },
    );
    push(
        "conv2d/weight",
        &[Conv2d, SumSquares, Scale],
        randn(&mut rng, [3, 2, 4, 4], 0.5),
        Kind::ConvWeight {
            x: randn(&mut rng, [2, 2, 8, 8], 1.0),
            b: randn(&mut rng, [1, 3, 1, 1], 0.5),
            spec: conv,
        },
    );
    push(
        "conv2d/bias",
        &[Conv2d, SumSquares, Scale],
        randn(&mut rng, [1, 3, 1, 1], 0.5),
        Kind::ConvBias {
            x: randn(&mut rng, [2, 2, 8, 8], 1.0),
            w: randn(&mut rng, [3, 2, 4, 4], 0.5),
            spec: conv,
        },
    );
    push(
        "conv2d_transposed/input",
        &[ConvTranspose2d, SumSquares, Scale],
        randn(&mut rng, [2, 3, 4, 4], 1.0),
        Kind::DeconvInput {
            w: randn(&mut rng, [3, 2, 4, 4], 0.5),
            b: randn(&mut rng, [1, 2, 1, 1], 0.5),
            spec: deconv,
        },
    );
    push(
        "conv2d_transposed/weight",
        &[ConvTranspose2d, SumSquares, Scale],
        randn(&mut rng, [3, 2, 4, 4], 0.5),
        Kind::DeconvWeight {
            x: randn(&mut rng, [2, 3, 4, 4], 1.0),
            b: randn(&mut rng, [1, 2, 1, 1], 0.5),
            spec: deconv,
        },
    );
    push("relu", &[Relu, SumSquares, Scale], randn(&mut rng, [1, 2, 6, 6], 1.0), Kind::Relu);
    push("maxpool2", &[MaxPool2, SumSquares, Scale], randn(&mut rng, [1, 2, 8, 8], 1.0), Kind::MaxPool);
    push(
        "add/sub",
        &[Add, Sub, Relu, SumSquares, Scale],
        randn(&mut rng, [1, 2, 5, 5], 1.0),
        Kind::AddSub {
            other: randn(&mut rng, [1, 2, 5, 5], 1.0),
        },
    );
    push("sum", &[Sum], randn(&mut rng, [1, 2, 3, 4], 1.0), Kind::Sum);
    push("scale", &[Scale, Sum], randn(&mut rng, [1, 2, 3, 4], 1.0), Kind::Scale);
    push(
        "repeat_channels",
        &[RepeatChannels, SumSquares, Scale],
        randn(&mut rng, [2, 1, 4, 4], 1.0),
        Kind::RepeatChannels,
    );
    push(
        "shared weight",
        &[Conv2d, Add, SumSquares, Scale],
        randn(&mut rng, [3, 2, 3, 3], 0.5),
        Kind::SharedWeight {
            a: randn(&mut rng, [1, 2, 6, 6], 1.0),
            b: randn(&mut rng, [1, 2, 6, 6], 1.0),
            spec: ConvSpec::new(2, 3, 3, 1, 1),
        },
    );
    push("add x+x", &[Add, SumSquares, Scale], randn(&mut rng, [1, 1, 4, 4], 1.0), Kind::SelfAdd);

    let config = check_model_config();
    let mut model = build_model::<f64>(&config, draw)?;
    jitter_model(&mut model, &mut rng);
    let noise = randn(&mut rng, [1, 1, SCENE, SCENE], 0.15);
    let scene = Tensor::from_fn([1, 1, SCENE, SCENE], |_, _, y, x| {
        let smooth = 0.5 + 0.3 * ((x as f64) * 0.4).sin() * ((y as f64) * 0.3).cos();
        smooth + noise.at(0, 0, y, x)
    })?;
    let extractor = extractor_for_checks::<f64>(draw)?;
    let model_ops = [Conv2d, ConvTranspose2d, Relu, Add, Sub, SumSquares, Scale];
    let perceptual_ops = [Conv2d, ConvTranspose2d, Relu, MaxPool2, Add, Sub, SumSquares, Scale, RepeatChannels];
    for (i, name) in model.names().iter().enumerate() {
        push(
            &format!("pixel loss/{name}"),
            &model_ops,
            model.tensors()[i].clone(),
            Kind::Pixel {
                model: model.clone(),
                tensor: i,
                scene: scene.clone(),
            },
        );
        push(
            &format!("perceptual loss/{name}"),
            &perceptual_ops,
            model.tensors()[i].clone(),
            Kind::Perceptual {
                model: model.clone(),
                tensor: i,
                scene: scene.clone(),
                extractor: extractor.clone(),
            },
        );
    }
    Ok(out)
}

/// Single precision: f32 backward pass against f64 central differences.
fn check_single(case: &Case, fault: Option<Fault>) -> Result<(f64, usize, f64, f64)> {
    let mut g = Graph::<f32>::with_fault(fault);
    let x = g.param(case.x.cast());
    let loss = case.build(&mut g, x)?;
    g.backward(loss)?;
    let analytic: Vec<f64> = match g.grad(x) {
        Some(gr) => gr.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; case.x.numel()],
    };
    let mut numeric = Vec::with_capacity(case.x.numel());
    let mut probe = case.x.clone();
    let value = |t: &Tensor<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::new();
        let v = g.input(t.clone());
        let l = case.build(&mut g, v)?;
        Ok(g.value(l).data()[0])
    };
    for i in 0..probe.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + EPS;
        let plus = value(&probe)?;
        probe.data_mut()[i] = orig - EPS;
        let minus = value(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * EPS));
    }
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-4 * scale;
    let mut worst = (0.0, 0, 0.0, 0.0);
    for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
        let err = if a.abs().max(n.abs()) < floor {
            (a - n).abs() / floor
        } else {
            relative_error(a, n)
        };
        if err > worst.0 || i == 0 {
            worst = (err, i, a, n);
        }
    }
    Ok(worst)
}

/// Runs every check. The report is returned even when checks fail; use
/// [`SuiteReport::into_result`] to turn failures into an error.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let count = cases(opts.seed)?.len();
    let tolerance = opts.precision.tolerance();
    let mut checks = Vec::with_capacity(count);
    for idx in 0..count {
        // redraw the whole context until this case clears every kink
        let mut chosen = None;
        for attempt in 0..MAX_DRAWS {
            let draw = opts.seed.wrapping_mul(1000).wrapping_add(attempt);
            let case = cases(draw)?.swap_remove(idx);
            if case.kink_margin()? > MIN_MARGIN {
                chosen = Some(case);
                break;
            }
        }
        let case = chosen.ok_or_else(|| Error::Verification(format!("no sample for check {idx} clears the kinks")))?;
        let (err, worst_index, analytic, numeric) = match opts.precision {
            Precision::Double => {
                let r = grad_check_with_fault(|g, x| case.build(g, x), &case.x, EPS, opts.fault)?;
                (r.max_relative_error, r.worst_index, r.analytic, r.numeric)
            }
            Precision::Single => check_single(&case, opts.fault)?,
        };
        log::debug!("{}: {:.3e}", case.name, err);
        checks.push(CheckOutcome {
            end_to_end: matches!(case.kind, Kind::Pixel { .. } | Kind::Perceptual { .. }),
            name: case.name,
            ops: case.ops,
            max_relative_error: err,
            tolerance,
            worst_index,
            analytic,
            numeric,
        });
    }
    Ok(SuiteReport { checks })
}
