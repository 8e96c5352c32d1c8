use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::csmodel::weights::{self, Record};
use crate::error::{Error, Result};
use crate::tensorcore::{ConvSpec, Graph, Scalar, Shape, Tensor, Var};

const INIT_STREAM: u64 = 2;

/// VGG19 front end through the third pooling layer. `Some(k)` is a 3x3
/// convolution with `k` times the base width; `None` is a 2x2 max pool.
const SCHEDULE: [(&str, Option<usize>); 11] = [
    ("conv1_1", Some(1)),
    ("conv1_2", Some(1)),
    ("pool1", None),
    ("conv2_1", Some(2)),
    ("conv2_2", Some(2)),
    ("pool2", None),
    ("conv3_1", Some(4)),
    ("conv3_2", Some(4)),
    ("conv3_3", Some(4)),
    ("conv3_4", Some(4)),
    ("pool3", None),
];

pub const VGG_BASE_WIDTH: usize = 64;
pub const MAX_DEPTH: usize = 8;

/// Resolves the short names used for the two standard loss layers.
/// `vgg2_2` and `vgg3_4` name the pooling layer that closes each block.
pub fn canonical_tap(name: &str) -> String {
    let lower = name.trim().to_ascii_lowercase();
    match lower.as_str() {
        "vgg2_2" | "vgg22" => "pool2".to_string(),
        "vgg3_4" | "vgg34" => "pool3".to_string(),
        _ => lower,
    }
}

fn is_known_tap(name: &str) -> bool {
    name == "input" || SCHEDULE.iter().any(|(n, _)| *n == name)
}

/// Where the frozen feature network comes from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExtractorSource {
    File(PathBuf),
    /// Gaussian weights; `depth` convolution layers of the VGG schedule with
    /// widths scaled from `base_width` (64 for the real network).
    Random { seed: u64, depth: usize, base_width: usize },
}

impl fmt::Display for ExtractorSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtractorSource::File(p) => write!(f, "{}", p.display()),
            ExtractorSource::Random {
                seed,
                depth,
                base_width,
            } => write!(f, "random:seed={seed},depth={depth},width={base_width}"),
        }
    }
}

impl FromStr for ExtractorSource {
    type Err = Error;

    /// `random:seed=7,depth=4,width=8` or a path to a `.pcsw` file.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let Some(rest) = s.strip_prefix("random") else {
            return Ok(ExtractorSource::File(PathBuf::from(s)));
        };
        let rest = rest.strip_prefix(':').unwrap_or(rest);
        let (mut seed, mut depth, mut base_width) = (0u64, 4usize, VGG_BASE_WIDTH);
        for part in rest.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("bad extractor option '{part}'")))?;
            let bad = |_| Error::config(format!("bad value in extractor option '{part}'"));
            match k.trim() {
                "seed" => seed = v.trim().parse().map_err(bad)?,
                "depth" => depth = v.trim().parse().map_err(bad)?,
                "width" => base_width = v.trim().parse().map_err(bad)?,
                other => return Err(Error::config(format!("unknown extractor option '{other}'"))),
            }
        }
        Ok(ExtractorSource::Random {
            seed,
            depth,
            base_width,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layer<T: Scalar> {
    Conv {
        name: &'static str,
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    Pool {
        name: &'static str,
    },
}

impl<T: Scalar> Layer<T> {
    fn name(&self) -> &'static str {
        match self {
            Layer::Conv { name, .. } | Layer::Pool { name } => name,
        }
    }
}

/// Fixed feature network with named tap points. Weights never change after
/// construction.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor<T: Scalar = f32> {
    in_channels: usize,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> FeatureExtractor<T> {
    /// Deterministic Gaussian weights (He scaling), zero biases.
    pub fn random(seed: u64, depth: usize, base_width: usize) -> Result<Self> {
        if depth > MAX_DEPTH {
            return Err(Error::config(format!("extractor depth {depth} exceeds {MAX_DEPTH}")));
        }
        if base_width == 0 {
            return Err(Error::config("extractor width must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut layers = Vec::new();
        let mut channels = 3;
        let mut convs = 0;
        for (name, width) in SCHEDULE {
            match width {
                Some(mult) => {
                    if convs == depth {
                        break;
                    }
                    let out = mult * base_width;
                    let weight = Tensor::randn([out, channels, 3, 3], (2.0 / (9 * channels) as f64).sqrt(), &mut rng)?;
                    let bias = Tensor::zeros([1, out, 1, 1])?;
                    layers.push(Layer::Conv { name, weight, bias });
                    channels = out;
                    convs += 1;
                }
                None => {
                    if convs == 0 {
                        break;
                    }
                    layers.push(Layer::Pool { name });
                }
            }
        }
        Ok(FeatureExtractor { in_channels: 3, layers })
    }

    /// Reads `conv1_1.weight`, `conv1_1.bias`, ... in VGG order. Loading stops
    /// at the first absent layer; any deeper layer present after a gap is an
    /// error.
    pub fn from_records(records: &[Record]) -> Result<Self> {
        let mut layers = Vec::new();
        let mut in_channels = None;
        let mut channels = 0;
        let mut missing: Option<&str> = None;
        for (name, width) in SCHEDULE {
            if width.is_none() {
                // a pool is kept only when the block before it is complete
                if missing.is_none() && !layers.is_empty() {
                    layers.push(Layer::Pool { name });
                }
                continue;
            }
            let wname = format!("{name}.weight");
            let bname = format!("{name}.bias");
            let (w, b) = (weights::find(records, &wname), weights::find(records, &bname));
            match (w, b, missing) {
                (None, None, _) => {
                    missing.get_or_insert(name);
                }
                (Some(_), _, Some(gap)) | (_, Some(_), Some(gap)) => {
                    return Err(Error::config(format!("extractor file has layer '{name}' but is missing '{gap}'")));
                }
                (Some(_), None, None) => return Err(Error::config(format!("extractor file is missing '{bname}'"))),
                (None, Some(_), None) => return Err(Error::config(format!("extractor file is missing '{wname}'"))),
                (Some(w), Some(b), None) => {
                    if w.dims.len() != 4 || w.dims[2] != 3 || w.dims[3] != 3 {
                        return Err(Error::shape(format!("'{wname}' must be (out, in, 3, 3), got {:?}", w.dims)));
                    }
                    let (out, inc) = (w.dims[0], w.dims[1]);
                    if in_channels.is_some() {
                        if inc != channels {
                            return Err(Error::shape(format!(
                                "'{wname}' expects {inc} input channels, previous layer has {channels}"
                            )));
                        }
                    } else {
                        in_channels = Some(inc);
                    }
                    let weight = w.to_tensor(Shape::new(out, inc, 3, 3))?;
                    let bias = b.to_tensor(Shape::new(1, out, 1, 1))?;
                    layers.push(Layer::Conv { name, weight, bias });
                    channels = out;
                }
            }
        }
        if layers.is_empty() {
            return Err(Error::config("extractor file has no 'conv1_1' layer"));
        }
        Ok(FeatureExtractor {
            in_channels: in_channels.unwrap_or(3),
            layers,
        })
    }

    pub fn to_records(&self) -> Result<Vec<Record>> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let Layer::Conv { name, weight, bias } = l {
                out.push(Record::from_tensor(format!("{name}.weight"), weight)?);
                out.push(Record::from_tensor(format!("{name}.bias"), bias)?);
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        weights::write_file(path, &self.to_records()?)
    }

    pub fn cast<U: Scalar>(&self) -> FeatureExtractor<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv { name, weight, bias } => Layer::Conv {
                    name,
                    weight: weight.cast(),
                    bias: bias.cast(),
                },
                Layer::Pool { name } => Layer::Pool { name },
            })
            .collect();
        FeatureExtractor {
            in_channels: self.in_channels,
            layers,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn depth(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Conv { .. })).count()
    }

    pub fn layer_names(&self) -> Vec<&'static str> {
        self.layers.iter().map(|l| l.name()).collect()
    }

    /// Number of layers to run to reach `tap`.
    pub fn tap_depth(&self, tap: &str) -> Result<usize> {
        let tap = canonical_tap(tap);
        if tap == "input" {
            return Ok(0);
        }
        if !is_known_tap(&tap) {
            return Err(Error::config(format!("unknown feature tap '{tap}'")));
        }
        self.layers
            .iter()
            .position(|l| l.name() == tap)
            .map(|i| i + 1)
            .ok_or_else(|| {
                Error::config(format!(
                    "feature tap '{tap}' is deeper than the loaded extractor (layers: {})",
                    self.layer_names().join(", ")
                ))
            })
    }

    /// Total down-sampling between the input and `tap`.
    pub fn pool_factor(&self, tap: &str) -> Result<usize> {
        let depth = self.tap_depth(tap)?;
        Ok(1 << self.layers[..depth].iter().filter(|l| matches!(l, Layer::Pool { .. })).count())
    }

    /// The extractor cut right after `tap`; deeper layers are dropped.
    pub fn truncated(&self, tap: &str) -> Result<Self> {
        let depth = self.tap_depth(tap)?;
        Ok(FeatureExtractor {
            in_channels: self.in_channels,
            layers: self.layers[..depth].to_vec(),
        })
    }

    fn check_input(&self, s: Shape, tap: &str, depth: usize) -> Result<()> {
        let factor = self.pool_factor(tap)?;
        if !s.h.is_multiple_of(factor) || !s.w.is_multiple_of(factor) {
            return Err(Error::geometry(format!(
                "image {}x{} is not divisible by the pooling factor {factor} of tap '{tap}'",
                s.h, s.w
            )));
        }
        if depth > 0 && s.c != self.in_channels && s.c != 1 {
            return Err(Error::shape(format!(
                "extractor expects {} or 1 input channels, got {}",
                self.in_channels, s.c
            )));
        }
        Ok(())
    }

    /// Records the path from `image` to `tap` on `g`. Extractor weights enter
    /// as constants, so only `image` can receive a gradient. Single-channel
    /// input is replicated to the extractor's channel count.
    pub fn extract_in(&self, g: &mut Graph<T>, image: Var, tap: &str) -> Result<Var> {
        let depth = self.tap_depth(tap)?;
        let s = g.shape(image);
        self.check_input(s, tap, depth)?;
        let mut h = image;
        if depth > 0 && s.c == 1 && self.in_channels > 1 {
            h = g.repeat_channels(h, self.in_channels)?;
        }
        for layer in &self.layers[..depth] {
            h = match layer {
                Layer::Conv { weight, bias, .. } => {
                    let ws = weight.shape();
                    let w = g.input(weight.clone());
                    let b = g.input(bias.clone());
                    let conv = g.conv2d(h, w, Some(b), &ConvSpec::new(ws.c, ws.n, 3, 1, 1))?;
                    g.relu(conv)
                }
                Layer::Pool { .. } => g.maxpool2(h)?,
            };
        }
        Ok(h)
    }

    /// Feature map of `image` at `tap`.
    pub fn extract(&self, image: &Tensor<T>, tap: &str) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(image.clone());
        let f = self.extract_in(&mut g, x, tap)?;
        Ok(g.take(f))
    }
}

pub fn load_extractor<T: Scalar>(source: &ExtractorSource) -> Result<FeatureExtractor<T>> {
    match source {
        ExtractorSource::File(path) => {
            let records = weights::read_file(path)?;
            FeatureExtractor::from_records(&records).map_err(|e| e.in_file(path))
        }
        ExtractorSource::Random {
            seed,
            depth,
            base_width,
        } => FeatureExtractor::random(*seed, *depth, *base_width),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_layout_follows_vgg_order() {
        let ex = FeatureExtractor::<f32>::random(1, 4, 8).unwrap();
        assert_eq!(
            ex.layer_names(),
            vec!["conv1_1", "conv1_2", "pool1", "conv2_1", "conv2_2", "pool2"]
        );
        let full = FeatureExtractor::<f32>::random(1, 8, 2).unwrap();
        assert_eq!(full.layer_names().len(), 11);
        assert_eq!(full.pool_factor("pool3").unwrap(), 8);
        assert_eq!(full.pool_factor("conv3_4").unwrap(), 4);
    }

    #[test]
    fn tap_aliases() {
        assert_eq!(canonical_tap("VGG2_2"), "pool2");
        assert_eq!(canonical_tap("vgg3_4"), "pool3");
        assert_eq!(canonical_tap("conv2_2"), "conv2_2");
        let ex = FeatureExtractor::<f32>::random(1, 8, 2).unwrap();
        assert_eq!(ex.tap_depth("VGG2_2").unwrap(), ex.tap_depth("pool2").unwrap());
        assert_eq!(ex.tap_depth("conv2_2").unwrap() + 1, ex.tap_depth("pool2").unwrap());
    }

    #[test]
    fn unknown_and_too_deep_taps() {
        let ex = FeatureExtractor::<f32>::random(1, 4, 2).unwrap();
        assert!(matches!(ex.tap_depth("fc7"), Err(Error::Config(_))));
        assert!(matches!(ex.tap_depth("pool3"), Err(Error::Config(_))));
    }

    #[test]
    fn pool2_halves_twice() {
        let ex = FeatureExtractor::<f32>::random(3, 4, 2).unwrap();
        let img = Tensor::full([1, 1, 64, 64], 0.5).unwrap();
        let f = ex.extract(&img, "pool2").unwrap();
        assert_eq!(f.shape(), Shape::new(1, 4, 16, 16));
    }

    #[test]
    fn zero_image_zero_features() {
        let ex = FeatureExtractor::<f64>::random(3, 4, 2).unwrap();
        let img = Tensor::zeros([1, 1, 16, 16]).unwrap();
        for tap in ["conv1_1", "conv1_2", "conv2_1", "conv2_2"] {
            let f = ex.extract(&img, tap).unwrap();
            assert!(f.data().iter().all(|&v| v == 0.0), "{tap}");
        }
    }

    #[test]
    fn non_divisible_input_is_geometry_error() {
        let ex = FeatureExtractor::<f32>::random(3, 4, 2).unwrap();
        let img = Tensor::zeros([1, 1, 18, 16]).unwrap();
        assert!(matches!(ex.extract(&img, "pool2"), Err(Error::Geometry(_))));
        assert!(ex.extract(&img, "conv1_2").is_ok());
    }

    #[test]
    fn source_parsing() {
        let s: ExtractorSource = "random:seed=7,depth=4,width=8".parse().unwrap();
        assert_eq!(
            s,
            ExtractorSource::Random {
                seed: 7,
                depth: 4,
                base_width: 8
            }
        );
        assert_eq!(s.to_string().parse::<ExtractorSource>().unwrap(), s);
        let f: ExtractorSource = "weights/vgg19.pcsw".parse().unwrap();
        assert_eq!(f, ExtractorSource::File("weights/vgg19.pcsw".into()));
        assert!("random:speed=1".parse::<ExtractorSource>().is_err());
    }

    #[test]
    fn gap_in_file_is_config_error() {
        let ex = FeatureExtractor::<f32>::random(1, 4, 2).unwrap();
        let recs: Vec<Record> = ex
            .to_records()
            .unwrap()
            .into_iter()
            .filter(|r| !r.name.starts_with("conv1_2"))
            .collect();
        assert!(matches!(FeatureExtractor::<f32>::from_records(&recs), Err(Error::Config(_))));
    }
}
