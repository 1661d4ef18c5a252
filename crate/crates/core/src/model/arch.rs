//! Layer descriptors, default widths and weight initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::derive_seed;
use crate::nn::{ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Selu,
    Sigmoid,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Regression,
    Classification,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Regression => "regression",
            Mode::Classification => "classification",
        }
    }
}

/// Parameter groups; every parameter name starts with the group prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Encoder,
    Decoder,
    Classifier,
}

impl Group {
    pub const ALL: [Group; 3] = [Group::Encoder, Group::Decoder, Group::Classifier];

    pub fn prefix(self) -> &'static str {
        match self {
            Group::Encoder => "enc.",
            Group::Decoder => "dec.",
            Group::Classifier => "cls.",
        }
    }

    pub fn of(name: &str) -> Option<Group> {
        Self::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }
}

/// One layer. Sequences are `T×C`; every convolution is stride 1 with same
/// padding, so temporal length is preserved up to the pooling layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        activation: Activation,
        /// Whether the activated output carries the activity penalty.
        activity: bool,
    },
    /// Two convolutions, each followed by SELU and scSE, with an identity
    /// shortcut (1×1 projection when `in_ch != out_ch`).
    Residual {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        dilation: usize,
        reduction: usize,
    },
    Gap,
    Dense {
        name: String,
        in_features: usize,
        out_features: usize,
        activation: Activation,
    },
}

fn scse_shapes(prefix: &str, c: usize, reduction: usize) -> Vec<(String, Vec<usize>)> {
    let h = (c / reduction.max(1)).max(1);
    vec![
        (format!("{prefix}.sq1.w"), vec![c, h]),
        (format!("{prefix}.sq1.b"), vec![h]),
        (format!("{prefix}.sq2.w"), vec![h, c]),
        (format!("{prefix}.sq2.b"), vec![c]),
        (format!("{prefix}.sp.w"), vec![1, c, 1]),
        (format!("{prefix}.sp.b"), vec![1]),
    ]
}

impl LayerSpec {
    pub fn name(&self) -> Option<&str> {
        match self {
            LayerSpec::Conv { name, .. }
            | LayerSpec::Residual { name, .. }
            | LayerSpec::Dense { name, .. } => Some(name),
            LayerSpec::Gap => None,
        }
    }

    /// Every weight array this layer owns, with its shape.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        match self {
            LayerSpec::Conv {
                name,
                in_ch,
                out_ch,
                kernel,
                ..
            } => vec![
                (format!("{name}.w"), vec![*kernel, *in_ch, *out_ch]),
                (format!("{name}.b"), vec![*out_ch]),
            ],
            LayerSpec::Residual {
                name,
                in_ch,
                out_ch,
                kernel,
                reduction,
                ..
            } => {
                let mut v = vec![
                    (format!("{name}.conv1.w"), vec![*kernel, *in_ch, *out_ch]),
                    (format!("{name}.conv1.b"), vec![*out_ch]),
                    (format!("{name}.conv2.w"), vec![*kernel, *out_ch, *out_ch]),
                    (format!("{name}.conv2.b"), vec![*out_ch]),
                ];
                v.extend(scse_shapes(&format!("{name}.scse1"), *out_ch, *reduction));
                v.extend(scse_shapes(&format!("{name}.scse2"), *out_ch, *reduction));
                if in_ch != out_ch {
                    v.push((format!("{name}.proj.w"), vec![1, *in_ch, *out_ch]));
                    v.push((format!("{name}.proj.b"), vec![*out_ch]));
                }
                v
            }
            LayerSpec::Gap => Vec::new(),
            LayerSpec::Dense {
                name,
                in_features,
                out_features,
                ..
            } => vec![
                (format!("{name}.w"), vec![*in_features, *out_features]),
                (format!("{name}.b"), vec![*out_features]),
            ],
        }
    }
}

/// Widths of the default network. All of them are configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub encoder_width: usize,
    pub embedding_width: usize,
    pub kernel: usize,
    pub classifier_width: usize,
    pub classifier_dilation: usize,
    pub reduction: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            encoder_width: 16,
            embedding_width: 8,
            kernel: 5,
            classifier_width: 16,
            classifier_dilation: 2,
            reduction: 4,
        }
    }
}

fn conv(name: &str, i: usize, o: usize, k: usize, act: Activation, activity: bool) -> LayerSpec {
    LayerSpec::Conv {
        name: name.into(),
        in_ch: i,
        out_ch: o,
        kernel: k,
        dilation: 1,
        activation: act,
        activity,
    }
}

impl ArchConfig {
    pub fn encoder(&self, input_channels: usize) -> Vec<LayerSpec> {
        let (w, e, k) = (self.encoder_width, self.embedding_width, self.kernel);
        vec![
            conv("enc.conv1", input_channels, w, k, Activation::Selu, true),
            LayerSpec::Residual {
                name: "enc.res".into(),
                in_ch: w,
                out_ch: w,
                kernel: k,
                dilation: 1,
                reduction: self.reduction,
            },
            conv("enc.conv2", w, e, k, Activation::Selu, true),
        ]
    }

    /// Plain convolutions back to the input width, sigmoid output.
    pub fn decoder(&self, input_channels: usize) -> Vec<LayerSpec> {
        let (w, e, k) = (self.encoder_width, self.embedding_width, self.kernel);
        vec![
            conv("dec.conv1", e, w, k, Activation::Selu, true),
            conv("dec.conv2", w, w, k, Activation::Selu, true),
            conv("dec.out", w, input_channels, k, Activation::Sigmoid, false),
        ]
    }

    /// Dilated residual block → GAP → head (`classes` softmax nodes, or one
    /// linear node for regression).
    pub fn classifier(&self, mode: Mode, classes: usize) -> Vec<LayerSpec> {
        let (out, activation) = match mode {
            Mode::Classification => (classes, Activation::Softmax),
            Mode::Regression => (1, Activation::Linear),
        };
        vec![
            LayerSpec::Residual {
                name: "cls.res".into(),
                in_ch: self.embedding_width,
                out_ch: self.classifier_width,
                kernel: self.kernel,
                dilation: self.classifier_dilation,
                reduction: self.reduction,
            },
            LayerSpec::Gap,
            LayerSpec::Dense {
                name: "cls.head".into(),
                in_features: self.classifier_width,
                out_features: out,
                activation,
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    pub encoder: Vec<LayerSpec>,
    pub decoder: Vec<LayerSpec>,
    pub classifier: Vec<LayerSpec>,
}

impl Architecture {
    pub fn autoencoder(input_channels: usize, cfg: &ArchConfig) -> Self {
        Self {
            input_channels,
            encoder: cfg.encoder(input_channels),
            decoder: cfg.decoder(input_channels),
            classifier: Vec::new(),
        }
    }

    pub fn group(&self, g: Group) -> &[LayerSpec] {
        match g {
            Group::Encoder => &self.encoder,
            Group::Decoder => &self.decoder,
            Group::Classifier => &self.classifier,
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.encoder.iter().chain(&self.decoder).chain(&self.classifier)
    }

    pub fn embedding_channels(&self) -> Result<usize> {
        sequence_out(&self.encoder, self.input_channels, "encoder").map(|(c, _)| c)
    }

    /// Checks channel continuity, naming, kernel parity and the head shape
    /// required by `mode`.
    pub fn validate(&self, mode: Option<Mode>) -> Result<()> {
        if self.encoder.is_empty() {
            return Err(Error::Layer("encoder has no layers".into()));
        }
        for g in Group::ALL {
            for l in self.group(g) {
                if let Some(name) = l.name() {
                    if Group::of(name) != Some(g) {
                        return Err(Error::Layer(format!(
                            "layer `{name}` must start with `{}`",
                            g.prefix()
                        )));
                    }
                }
            }
        }
        let (emb, pooled) = sequence_out(&self.encoder, self.input_channels, "encoder")?;
        if pooled {
            return Err(Error::Layer("encoder must not pool over time".into()));
        }
        if !self.decoder.is_empty() {
            let (out, pooled) = sequence_out(&self.decoder, emb, "decoder")?;
            if pooled || out != self.input_channels {
                return Err(Error::Layer(format!(
                    "decoder must map back to {} channels per frame, gives {out}",
                    self.input_channels
                )));
            }
            match self.decoder.last() {
                Some(LayerSpec::Conv {
                    activation: Activation::Sigmoid,
                    ..
                }) => {}
                _ => return Err(Error::Layer("decoder must end in a sigmoid convolution".into())),
            }
        }
        let Some(mode) = mode else {
            return Ok(());
        };
        if self.classifier.is_empty() {
            return Err(Error::Layer(format!("{} mode needs a classifier head", mode.as_str())));
        }
        let (out, pooled) = sequence_out(&self.classifier, emb, "classifier")?;
        if !pooled {
            return Err(Error::Layer("classifier must pool over time before its head".into()));
        }
        let n = self.classifier.len();
        if n < 2 || self.classifier[n - 2] != LayerSpec::Gap {
            return Err(Error::Layer("classifier head must directly follow the pooling layer".into()));
        }
        match (&self.classifier[n - 1], mode) {
            (LayerSpec::Dense { activation: Activation::Softmax, .. }, Mode::Classification)
                if out >= 2 => {}
            (LayerSpec::Dense { activation: Activation::Linear, .. }, Mode::Regression) if out == 1 => {}
            (LayerSpec::Dense { activation, .. }, _) => {
                return Err(Error::Layer(format!(
                    "{} mode needs {}, head is {activation:?} with {out} nodes",
                    mode.as_str(),
                    match mode {
                        Mode::Classification => "a softmax head with at least 2 nodes",
                        Mode::Regression => "a single linear node",
                    }
                )))
            }
            _ => return Err(Error::Layer("classifier must end in a dense head".into())),
        }
        Ok(())
    }

    /// Fresh weights: kernels ~ N(0, 1/fan_in), biases zero. Each array draws
    /// from its own stream, so adding a layer leaves the others unchanged.
    pub fn init_params(&self, groups: &[Group], seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        for &g in groups {
            for layer in self.group(g) {
                for (name, shape) in layer.param_shapes() {
                    store.insert(name.clone(), init_array(&name, &shape, seed));
                }
            }
        }
        store
    }
}

fn init_array(name: &str, shape: &[usize], seed: u64) -> Tensor {
    if !name.ends_with(".w") {
        return Tensor::zeros(shape);
    }
    let fan_in: usize = shape[..shape.len() - 1].iter().product();
    let std = (1.0 / fan_in.max(1) as f64).sqrt();
    let h = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, h));
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    Tensor::from_parts_unchecked(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect())
}

/// Output channels of a layer chain and whether time was pooled.
fn sequence_out(layers: &[LayerSpec], mut c: usize, what: &str) -> Result<(usize, bool)> {
    let mut pooled = false;
    for l in layers {
        match l {
            LayerSpec::Conv {
                name,
                in_ch,
                out_ch,
                kernel,
                dilation,
                activation,
                ..
            } => {
                check_conv(name, *kernel, *dilation, pooled)?;
                if *activation == Activation::Softmax {
                    return Err(Error::Layer(format!("`{name}`: softmax is only valid on a dense head")));
                }
                expect_in(name, *in_ch, c)?;
                c = *out_ch;
            }
            LayerSpec::Residual {
                name,
                in_ch,
                out_ch,
                kernel,
                dilation,
                reduction,
            } => {
                check_conv(name, *kernel, *dilation, pooled)?;
                if *reduction == 0 {
                    return Err(Error::Layer(format!("`{name}`: reduction must be at least 1")));
                }
                expect_in(name, *in_ch, c)?;
                c = *out_ch;
            }
            LayerSpec::Gap => {
                if pooled {
                    return Err(Error::Layer(format!("{what}: pooling twice")));
                }
                pooled = true;
            }
            LayerSpec::Dense {
                name,
                in_features,
                out_features,
                ..
            } => {
                if !pooled {
                    return Err(Error::Layer(format!("`{name}`: dense layers need pooled input")));
                }
                expect_in(name, *in_features, c)?;
                c = *out_features;
            }
        }
        if c == 0 {
            return Err(Error::Layer(format!("{what}: zero-width layer")));
        }
    }
    Ok((c, pooled))
}

fn check_conv(name: &str, kernel: usize, dilation: usize, pooled: bool) -> Result<()> {
    if kernel % 2 == 0 {
        return Err(Error::Layer(format!("`{name}`: kernel {kernel} must be odd")));
    }
    if dilation == 0 {
        return Err(Error::Layer(format!("`{name}`: dilation must be at least 1")));
    }
    if pooled {
        return Err(Error::Layer(format!("`{name}`: convolution after pooling")));
    }
    Ok(())
}

fn expect_in(name: &str, declared: usize, actual: usize) -> Result<()> {
    if declared != actual {
        return Err(Error::Layer(format!(
            "`{name}` expects {declared} input channels, previous layer gives {actual}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_architecture_validates_in_both_modes() {
        let cfg = ArchConfig::default();
        let mut a = Architecture::autoencoder(4, &cfg);
        a.validate(None).unwrap();
        a.classifier = cfg.classifier(Mode::Classification, 2);
        a.validate(Some(Mode::Classification)).unwrap();
        assert!(a.validate(Some(Mode::Regression)).is_err());
        a.classifier = cfg.classifier(Mode::Regression, 2);
        a.validate(Some(Mode::Regression)).unwrap();
        assert!(a.validate(Some(Mode::Classification)).is_err());
    }

    #[test]
    fn broken_chains_are_rejected() {
        let cfg = ArchConfig::default();
        let mut a = Architecture::autoencoder(4, &cfg);
        a.decoder[1] = conv("dec.conv2", 3, 16, 5, Activation::Selu, true);
        assert!(a.validate(None).is_err());
        let mut b = Architecture::autoencoder(4, &cfg);
        b.encoder[0] = conv("enc.conv1", 4, 16, 4, Activation::Selu, true);
        assert!(b.validate(None).is_err());
    }

    #[test]
    fn init_is_seeded_and_scaled() {
        let a = Architecture::autoencoder(4, &ArchConfig::default());
        let p = a.init_params(&[Group::Encoder, Group::Decoder], 5);
        assert_eq!(p, a.init_params(&[Group::Encoder, Group::Decoder], 5));
        assert!(p.get("enc.conv1.b").unwrap().data().iter().all(|&v| v == 0.0));
        let w = p.get("enc.res.conv2.w").unwrap();
        let var = w.data().iter().map(|v| v * v).sum::<f64>() / w.len() as f64;
        // fan_in = 5·16
        assert!((var * 80.0 - 1.0).abs() < 0.15, "{var}");
        for l in a.layers() {
            for (name, shape) in l.param_shapes() {
                assert_eq!(p.get(&name).unwrap().shape(), &shape[..]);
            }
        }
    }
}
