use serde::{Deserialize, Serialize};

use super::arch::{Activation, Architecture, Group, LayerSpec, Mode};
use crate::data::{LabelScheme, MinMaxStats, Trial, ZNorm};
use crate::error::{Error, Result};
use crate::nn::layers::{residual_block, ConvVars, ResidualVars, ScseVars};
use crate::nn::{Binder, ParamStore, Tape, Tensor, Var};
use crate::record::PredictionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainableFlags {
    pub encoder: bool,
    pub decoder: bool,
    pub classifier: bool,
}

impl TrainableFlags {
    pub fn get(&self, g: Group) -> bool {
        match g {
            Group::Encoder => self.encoder,
            Group::Decoder => self.decoder,
            Group::Classifier => self.classifier,
        }
    }

    pub fn allows(&self, name: &str) -> bool {
        Group::of(name).is_some_and(|g| self.get(g))
    }
}

/// Architecture, weights, and the preprocessing statistics the weights
/// were trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub arch: Architecture,
    /// `None` for an autoencoder without a head.
    pub mode: Option<Mode>,
    pub scheme: Option<LabelScheme>,
    pub params: ParamStore,
    pub trainable: TrainableFlags,
    pub minmax: Option<MinMaxStats>,
    pub scores: Option<ZNorm>,
}

/// Activations collected during one forward pass.
pub(crate) struct Pass<'a> {
    pub binder: Binder<'a>,
    /// Outputs carrying the activity penalty.
    pub activity: Vec<Var>,
    /// Input of the pooling layer.
    pub pre_gap: Option<Var>,
}

impl<'a> Pass<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a dyn Fn(&str) -> bool) -> Self {
        Self {
            binder: Binder::new(store, trainable),
            activity: Vec::new(),
            pre_gap: None,
        }
    }

    fn conv(&mut self, tape: &mut Tape, name: &str) -> Result<ConvVars> {
        Ok(ConvVars {
            w: self.binder.bind(tape, &format!("{name}.w"))?,
            b: self.binder.bind(tape, &format!("{name}.b"))?,
        })
    }

    fn scse(&mut self, tape: &mut Tape, name: &str) -> Result<ScseVars> {
        let mut b = |s: &str| self.binder.bind(tape, &format!("{name}.{s}"));
        Ok(ScseVars {
            sq1_w: b("sq1.w")?,
            sq1_b: b("sq1.b")?,
            sq2_w: b("sq2.w")?,
            sq2_b: b("sq2.b")?,
            sp_w: b("sp.w")?,
            sp_b: b("sp.b")?,
        })
    }
}

fn activate(tape: &mut Tape, x: Var, a: Activation) -> Result<Var> {
    Ok(match a {
        Activation::Linear => x,
        Activation::Selu => tape.selu(x),
        Activation::Sigmoid => tape.sigmoid(x),
        Activation::Softmax => tape.softmax(x)?,
    })
}

pub(crate) fn run_layers(
    tape: &mut Tape,
    pass: &mut Pass<'_>,
    mut x: Var,
    layers: &[LayerSpec],
) -> Result<Var> {
    for layer in layers {
        x = match layer {
            LayerSpec::Conv {
                name,
                dilation,
                activation,
                activity,
                ..
            } => {
                let p = pass.conv(tape, name)?;
                let h = tape.conv1d(x, p.w, p.b, *dilation)?;
                let h = activate(tape, h, *activation)?;
                if *activity {
                    pass.activity.push(h);
                }
                h
            }
            LayerSpec::Residual {
                name,
                in_ch,
                out_ch,
                dilation,
                ..
            } => {
                let vars = ResidualVars {
                    conv1: pass.conv(tape, &format!("{name}.conv1"))?,
                    scse1: pass.scse(tape, &format!("{name}.scse1"))?,
                    conv2: pass.conv(tape, &format!("{name}.conv2"))?,
                    scse2: pass.scse(tape, &format!("{name}.scse2"))?,
                    proj: if in_ch != out_ch {
                        Some(pass.conv(tape, &format!("{name}.proj"))?)
                    } else {
                        None
                    },
                };
                let mut hooked = Vec::new();
                let y = residual_block(tape, x, &vars, *dilation, &mut |_, v| hooked.push(v))?;
                pass.activity.extend(hooked);
                y
            }
            LayerSpec::Gap => {
                pass.pre_gap = Some(x);
                tape.gap(x)?
            }
            LayerSpec::Dense {
                name, activation, ..
            } => {
                let p = pass.conv(tape, name)?;
                let h = tape.dense(x, p.w, p.b)?;
                activate(tape, h, *activation)?
            }
        };
    }
    Ok(x)
}

/// Classifier output with the pre-pooling activations it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    pub output: Vec<f64>,
    pub pre_gap: Tensor,
}

fn frozen(_: &str) -> bool {
    false
}

impl ModelBundle {
    /// Checks the architecture against `mode` and every array against its
    /// declared shape.
    pub fn validate(&self) -> Result<()> {
        self.arch.validate(self.mode)?;
        let mut expected = 0;
        for layer in self.arch.layers() {
            for (name, shape) in layer.param_shapes() {
                let t = self
                    .params
                    .get(&name)
                    .map_err(|_| Error::Layer(format!("missing weight array `{name}`")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Layer(format!(
                        "`{name}` has shape {:?}, layer declares {shape:?}",
                        t.shape()
                    )));
                }
                expected += 1;
            }
        }
        if expected != self.params.len() {
            return Err(Error::Layer(format!(
                "bundle holds {} arrays, architecture declares {expected}",
                self.params.len()
            )));
        }
        if self.mode == Some(Mode::Classification) {
            let scheme = self
                .scheme
                .ok_or_else(|| Error::Layer("classification bundle without a label scheme".into()))?;
            if self.n_outputs() != Some(scheme.len()) {
                return Err(Error::Layer(format!(
                    "head has {:?} nodes but the label scheme has {} classes",
                    self.n_outputs(),
                    scheme.len()
                )));
            }
        }
        Ok(())
    }

    pub fn n_outputs(&self) -> Option<usize> {
        match self.arch.classifier.last()? {
            LayerSpec::Dense { out_features, .. } => Some(*out_features),
            _ => None,
        }
    }

    /// Kernel of the output head, `C×K`.
    pub fn head_weights(&self) -> Result<&Tensor> {
        match self.arch.classifier.last() {
            Some(LayerSpec::Dense { name, .. }) => self.params.get(&format!("{name}.w")),
            _ => Err(Error::Layer("bundle has no dense head".into())),
        }
    }

    /// `T×C` input tensor for a preprocessed trial.
    pub fn input_tensor(&self, trial: &Trial) -> Result<Tensor> {
        if trial.n_channels() != self.arch.input_channels {
            return Err(Error::shape(
                "model input",
                format!(
                    "trial {} has {} channels, the model expects {}",
                    trial.id(),
                    trial.n_channels(),
                    self.arch.input_channels
                ),
            ));
        }
        trial.to_tensor()
    }

    fn run(&self, x: &Tensor, layers: &[&[LayerSpec]]) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = Tape::new();
        let mut pass = Pass::new(&self.params, &frozen);
        let mut v = tape.constant(x.clone());
        for l in layers {
            v = run_layers(&mut tape, &mut pass, v, l)?;
        }
        let pre = pass.pre_gap.map(|p| tape.value(p).clone());
        Ok((tape.value(v).clone(), pre))
    }

    /// Embedding `T×E` of a `T×C` sequence.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, &[&self.arch.encoder]).map(|r| r.0)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        if self.arch.decoder.is_empty() {
            return Err(Error::Layer("bundle has no decoder".into()));
        }
        self.run(x, &[&self.arch.encoder, &self.arch.decoder]).map(|r| r.0)
    }

    /// Classifier head applied to encoder features.
    pub fn head(&self, features: &Tensor) -> Result<HeadOutput> {
        if self.mode.is_none() {
            return Err(Error::Layer("bundle has no classifier head".into()));
        }
        let (out, pre) = self.run(features, &[&self.arch.classifier])?;
        Ok(HeadOutput {
            output: out.into_data(),
            pre_gap: pre.ok_or_else(|| Error::Layer("classifier has no pooling layer".into()))?,
        })
    }

    /// Full forward pass: encoder then head.
    pub fn forward(&self, x: &Tensor) -> Result<HeadOutput> {
        self.head(&self.encode(x)?)
    }
}

/// Prediction for a trial preprocessed with the bundle's statistics.
pub fn predict(bundle: &ModelBundle, trial: &Trial) -> Result<PredictionRecord> {
    let x = bundle.input_tensor(trial)?;
    let out = bundle.forward(&x)?.output;
    record_from_output(bundle, trial, out)
}

pub(crate) fn record_from_output(
    bundle: &ModelBundle,
    trial: &Trial,
    out: Vec<f64>,
) -> Result<PredictionRecord> {
    let id = trial.id().0;
    match bundle.mode {
        Some(Mode::Classification) => {
            let scheme = bundle.scheme.unwrap_or(LabelScheme::Binary);
            let actual = trial
                .class_label
                .filter(|c| c.scheme() == scheme)
                .map(|c| c.index());
            PredictionRecord::classification(id, out, actual)
        }
        Some(Mode::Regression) => {
            let z = out[0];
            let score = bundle.scores.map_or(z, |s| s.invert(z));
            Ok(PredictionRecord::regression(id, score, trial.score))
        }
        None => Err(Error::Layer("bundle has no classifier head".into())),
    }
}
