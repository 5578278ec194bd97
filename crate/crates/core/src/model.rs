//! Reference architectures: a ReLU MLP and a two-convolution CNN.

use std::collections::BTreeMap;
use std::fmt;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::regularizers::{SatNlConfig, SatNlKind, init_latent};
use crate::tensor::{Rng, Tensor};

pub const MAX_PARAMETERS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    /// Fully connected layers; `widths[0]` is the input size, the last entry the class count.
    Mlp { widths: Vec<usize> },
    /// conv3×3 → relu → conv3×3 → relu → avgpool 2 → fc → relu → fc.
    SmallCnn {
        in_channels: usize,
        image: usize,
        channels: [usize; 2],
        hidden: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Linear { fan_in: usize, fan_out: usize },
    Conv { in_ch: usize, out_ch: usize, kernel: usize, pad: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

impl Layer {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    /// `[out, in]` for linear layers, `[out, in, k, k]` for convolutions.
    pub fn weight_shape(&self) -> Vec<usize> {
        match self.kind {
            LayerKind::Linear { fan_in, fan_out } => vec![fan_out, fan_in],
            LayerKind::Conv { in_ch, out_ch, kernel, .. } => vec![out_ch, in_ch, kernel, kernel],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight_shape()[0]
    }

    /// Number of weights feeding one output channel.
    pub fn fan_in(&self) -> usize {
        self.weight_shape()[1..].iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub satnl: SatNlConfig,
    pub classes: usize,
}

/// Weight and bias nodes of one layer as seen by [`ModelSpec::forward`].
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

/// Nodes recorded during a forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub logits: NodeId,
    /// Input of each layer before any activation quantization.
    pub layer_inputs: Vec<NodeId>,
    /// Pre-activation output of each layer.
    pub layer_outputs: Vec<NodeId>,
}

impl ModelSpec {
    pub fn mlp(widths: Vec<usize>) -> Result<Self> {
        let classes = *widths.last().unwrap_or(&0);
        let spec = Self {
            architecture: Architecture::Mlp { widths },
            satnl: SatNlConfig::disabled(),
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn small_cnn(in_channels: usize, image: usize, channels: [usize; 2], hidden: usize, classes: usize) -> Result<Self> {
        let spec = Self {
            architecture: Architecture::SmallCnn {
                in_channels,
                image,
                channels,
                hidden,
            },
            satnl: SatNlConfig::disabled(),
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Applies `kind` to every layer.
    pub fn with_satnl_all(mut self, kind: SatNlKind) -> Self {
        let names: Vec<String> = self.layers().into_iter().map(|l| l.name).collect();
        self.satnl = SatNlConfig::on(kind, names);
        self
    }

    pub fn validate(&self) -> Result<()> {
        match &self.architecture {
            Architecture::Mlp { widths } => {
                if widths.len() < 2 || widths.contains(&0) {
                    return Err(Error::invalid("mlp needs at least two nonzero widths"));
                }
            }
            Architecture::SmallCnn { in_channels, image, channels, hidden } => {
                if *image < 2 || image % 2 != 0 {
                    return Err(Error::invalid("smallcnn image size must be even"));
                }
                if *in_channels == 0 || channels.contains(&0) || *hidden == 0 {
                    return Err(Error::invalid("smallcnn widths must be nonzero"));
                }
            }
        }
        if self.classes < 2 {
            return Err(Error::invalid("a classifier needs at least two classes"));
        }
        let count = self.param_count();
        if count > MAX_PARAMETERS {
            return Err(Error::invalid(format!(
                "model has {count} parameters, limit is {MAX_PARAMETERS}"
            )));
        }
        if let Some(unknown) = self
            .satnl
            .layers
            .iter()
            .find(|n| !self.layers().iter().any(|l| &l.name == *n))
        {
            return Err(Error::invalid(format!("satnl names unknown layer {unknown}")));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<Layer> {
        match &self.architecture {
            Architecture::Mlp { widths } => widths
                .windows(2)
                .enumerate()
                .map(|(i, w)| Layer {
                    name: format!("fc{}", i + 1),
                    kind: LayerKind::Linear {
                        fan_in: w[0],
                        fan_out: w[1],
                    },
                })
                .collect(),
            Architecture::SmallCnn { in_channels, image, channels, hidden } => {
                let pooled = channels[1] * (image / 2) * (image / 2);
                let conv = |name: &str, in_ch, out_ch| Layer {
                    name: name.into(),
                    kind: LayerKind::Conv {
                        in_ch,
                        out_ch,
                        kernel: 3,
                        pad: 1,
                    },
                };
                let fc = |name: &str, fan_in, fan_out| Layer {
                    name: name.into(),
                    kind: LayerKind::Linear { fan_in, fan_out },
                };
                vec![
                    conv("conv1", *in_channels, channels[0]),
                    conv("conv2", channels[0], channels[1]),
                    fc("fc1", pooled, *hidden),
                    fc("fc2", *hidden, self.classes),
                ]
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.weight_shape().iter().product::<usize>() + l.out_channels())
            .sum()
    }

    /// Shape of one input sample.
    pub fn input_shape(&self) -> Vec<usize> {
        match &self.architecture {
            Architecture::Mlp { widths } => vec![widths[0]],
            Architecture::SmallCnn { in_channels, image, .. } => vec![*in_channels, *image, *image],
        }
    }

    pub fn satnl_kind(&self, layer: &str) -> Option<SatNlKind> {
        self.satnl.enabled(layer).then_some(self.satnl.kind)
    }

    /// He-normal weights and zero biases, ordered `weight, bias` per layer. Weights of SatNL
    /// layers are returned in latent space.
    pub fn init_params(&self, seed: u64) -> Vec<(String, Tensor)> {
        let mut rng = Rng::new(seed);
        let mut out = Vec::new();
        for layer in self.layers() {
            let std = (2.0 / layer.fan_in() as f64).sqrt();
            let mut w = rng.normal_tensor(&layer.weight_shape(), std);
            if let Some(kind) = self.satnl_kind(&layer.name) {
                w = init_latent(&w, kind);
            }
            out.push((layer.weight_name(), w));
            out.push((layer.bias_name(), Tensor::zeros(&[layer.out_channels()])));
        }
        out
    }

    /// Effective weight `f(latent)` for SatNL layers, the latent tensor otherwise.
    pub fn effective_weight(&self, layer: &str, latent: &Tensor) -> Tensor {
        match self.satnl_kind(layer) {
            Some(kind) => latent.map(|v| kind.eval(v)),
            None => latent.clone(),
        }
    }

    /// Builds the network on `x`. `act` is called on each layer input (with the layer index)
    /// and may replace it, e.g. with a quantized copy.
    pub fn forward(
        &self,
        g: &mut Graph,
        nodes: &[LayerNodes],
        x: NodeId,
        act: &mut dyn FnMut(&mut Graph, usize, NodeId) -> Result<NodeId>,
    ) -> Result<Trace> {
        let layers = self.layers();
        if nodes.len() != layers.len() {
            return Err(Error::invalid(format!(
                "forward expects {} layers, got {}",
                layers.len(),
                nodes.len()
            )));
        }
        let mut inputs = Vec::with_capacity(layers.len());
        let mut outputs = Vec::with_capacity(layers.len());
        let mut h = x;
        for (i, (layer, n)) in layers.iter().zip(nodes).enumerate() {
            if i == 2 && matches!(self.architecture, Architecture::SmallCnn { .. }) {
                h = g.avgpool2d(h, 2)?;
                h = g.flatten(h)?;
            }
            inputs.push(h);
            let a = act(g, i, h)?;
            let z = match layer.kind {
                LayerKind::Linear { .. } => {
                    let wt = g.transpose(n.weight)?;
                    g.matmul(a, wt)?
                }
                LayerKind::Conv { pad, .. } => g.conv2d(a, n.weight, 1, pad)?,
            };
            let z = g.add_bias(z, n.bias)?;
            outputs.push(z);
            h = if i + 1 < layers.len() { g.relu(z)? } else { z };
        }
        Ok(Trace {
            logits: h,
            layer_inputs: inputs,
            layer_outputs: outputs,
        })
    }

    /// Key/value lines describing the spec, as stored in checkpoint metadata.
    pub fn to_meta(&self) -> Vec<(String, String)> {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut m = Vec::new();
        match &self.architecture {
            Architecture::Mlp { widths } => {
                m.push(("model.arch".into(), "mlp".into()));
                m.push(("model.widths".into(), join(widths)));
            }
            Architecture::SmallCnn { in_channels, image, channels, hidden } => {
                m.push(("model.arch".into(), "smallcnn".into()));
                m.push(("model.in_channels".into(), in_channels.to_string()));
                m.push(("model.image".into(), image.to_string()));
                m.push(("model.channels".into(), join(channels)));
                m.push(("model.hidden".into(), hidden.to_string()));
            }
        }
        m.push(("model.classes".into(), self.classes.to_string()));
        m.push(("satnl.kind".into(), self.satnl.kind.name().into()));
        m.push((
            "satnl.layers".into(),
            self.satnl.layers.iter().cloned().collect::<Vec<_>>().join(","),
        ));
        m
    }

    pub fn from_meta(meta: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| {
            meta.get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("missing metadata key {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad integer for {k}")))
        };
        let list = |k: &str| -> Result<Vec<usize>> {
            get(k)?
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Format(format!("bad list for {k}"))))
                .collect()
        };
        let classes = num("model.classes")?;
        let architecture = match get("model.arch")? {
            "mlp" => Architecture::Mlp {
                widths: list("model.widths")?,
            },
            "smallcnn" => {
                let ch = list("model.channels")?;
                if ch.len() != 2 {
                    return Err(Error::Format("model.channels needs two entries".into()));
                }
                Architecture::SmallCnn {
                    in_channels: num("model.in_channels")?,
                    image: num("model.image")?,
                    channels: [ch[0], ch[1]],
                    hidden: num("model.hidden")?,
                }
            }
            other => return Err(Error::Format(format!("unknown architecture {other}"))),
        };
        let kind = SatNlKind::parse(get("satnl.kind")?).map_err(|e| Error::Format(e.to_string()))?;
        let layers: Vec<String> = get("satnl.layers")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        let satnl = if layers.is_empty() {
            SatNlConfig::disabled()
        } else {
            SatNlConfig::on(kind, layers)
        };
        let spec = Self {
            architecture,
            satnl,
            classes,
        };
        spec.validate().map_err(|e| Error::Format(e.to_string()))?;
        Ok(spec)
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.architecture {
            Architecture::Mlp { widths } => write!(f, "mlp{widths:?}")?,
            Architecture::SmallCnn { channels, hidden, .. } => {
                write!(f, "smallcnn[{}, {}, fc {}]", channels[0], channels[1], hidden)?
            }
        }
        if !self.satnl.layers.is_empty() {
            write!(f, " + {}", self.satnl.kind.name())?;
        }
        Ok(())
    }
}
