use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::layers::{Activation, LayerSpec};
use crate::losses::RegConfig;

use super::params::{ParamAddr, ParamKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    /// Classification.
    Cl,
    /// Autoencoding.
    Ae,
    /// Classification and autoencoding through a shared encoder.
    Mt,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Cl => "CL",
            Task::Ae => "AE",
            Task::Mt => "MT",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CL" => Ok(Task::Cl),
            "AE" => Ok(Task::Ae),
            "MT" => Ok(Task::Mt),
            _ => Err(Error::Config(format!(
                "unknown task `{s}` (expected CL, AE or MT)"
            ))),
        }
    }
}

/// Declarative description of a network. Layer ids are positions in `layers`.
///
/// The layer list is `encoder ++ [head] ++ decoder`: the head is the single
/// softmax dense layer (CL and MT), the decoder is the run of tied layers
/// (AE and MT). Both the head and the first decoder layer read the output of
/// the last encoder layer, the code.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub task: Task,
    /// Weight of the reconstruction loss in MT networks.
    pub alpha_mt: f64,
    pub reg: RegConfig,
}

/// Input and output shape of every layer, plus the structural landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub io: Vec<(Vec<usize>, Vec<usize>)>,
    pub encoder_len: usize,
    pub head: Option<usize>,
    /// Layer whose output is the convolutional-stage activation used by the
    /// sparsity regulariser.
    pub sparsity_layer: Option<usize>,
}

impl Plan {
    pub fn code_shape<'a>(&'a self, input_shape: &'a [usize]) -> &'a [usize] {
        if self.encoder_len == 0 {
            input_shape
        } else {
            &self.io[self.encoder_len - 1].1
        }
    }

    pub fn decoder(&self) -> std::ops::Range<usize> {
        let start = self.head.map_or(self.encoder_len, |h| h + 1);
        start..self.io.len()
    }
}

fn is_head(layer: &LayerSpec) -> bool {
    matches!(
        layer,
        LayerSpec::Dense {
            act: Activation::Softmax,
            ..
        }
    )
}

impl NetworkSpec {
    pub fn head_index(&self) -> Option<usize> {
        self.layers.iter().position(is_head)
    }

    /// Number of layers before the head or the first decoder layer.
    pub fn encoder_len(&self) -> usize {
        self.head_index()
            .or_else(|| self.layers.iter().position(|l| l.tied_to().is_some()))
            .unwrap_or(self.layers.len())
    }

    pub fn encoder(&self) -> &[LayerSpec] {
        &self.layers[..self.encoder_len()]
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.head_index().map(|i| match self.layers[i] {
            LayerSpec::Dense { units, .. } => units,
            _ => unreachable!("head is a dense layer"),
        })
    }

    /// Validates the structure and computes every layer's shapes.
    pub fn plan(&self) -> Result<Plan> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.input_shape.len() != 3 || self.input_shape.contains(&0) {
            return bad(format!(
                "input shape must be [C, H, W], got {:?}",
                self.input_shape
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha_mt) {
            return bad(format!("alpha_mt {} outside [0, 1]", self.alpha_mt));
        }
        self.reg.validate()?;
        let heads: Vec<usize> = (0..self.layers.len())
            .filter(|&i| is_head(&self.layers[i]))
            .collect();
        if heads.len() > 1 {
            return bad("more than one softmax output layer".into());
        }
        let head = heads.first().copied();
        let encoder_len = self.encoder_len();
        let decoder_start = head.map_or(encoder_len, |h| h + 1);
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.activation() == Some(Activation::Softmax) && !is_head(layer) {
                return bad(format!(
                    "layer {i}: softmax is only allowed on the classifier output"
                ));
            }
            let decoding = layer.tied_to().is_some();
            if i < encoder_len && decoding {
                return bad(format!("layer {i}: decoder layer inside the encoder"));
            }
            if i >= decoder_start && !decoding {
                return bad(format!(
                    "layer {i}: untied {} layer after the code",
                    layer.kind_name()
                ));
            }
            if let LayerSpec::Dropout { p } = *layer {
                if !(0.0..1.0).contains(&p) {
                    return bad(format!("layer {i}: dropout probability {p} outside [0, 1)"));
                }
            }
            if let Some(t) = layer.tied_to() {
                let ok = t < encoder_len
                    && matches!(
                        (layer, &self.layers[t]),
                        (LayerSpec::DenseDecode { .. }, LayerSpec::Dense { .. })
                            | (LayerSpec::ConvDecode { .. }, LayerSpec::Conv { .. })
                            | (LayerSpec::Unpool { .. }, LayerSpec::MaxPool { .. })
                    );
                if !ok {
                    return bad(format!(
                        "layer {i}: {} cannot be tied to layer {t}",
                        layer.kind_name()
                    ));
                }
            }
        }
        let has_decoder = decoder_start < self.layers.len();
        match (self.task, head, has_decoder) {
            (Task::Cl, Some(h), false) if h + 1 == self.layers.len() => {}
            (Task::Ae, None, true) => {}
            (Task::Mt, Some(_), true) => {}
            _ => {
                return bad(format!(
                    "{} network needs {}",
                    self.task,
                    match self.task {
                        Task::Cl => "a final softmax layer and no decoder",
                        Task::Ae => "a decoder and no softmax layer",
                        Task::Mt => "both a softmax head and a decoder",
                    }
                ))
            }
        }

        let mut io: Vec<(Vec<usize>, Vec<usize>)> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let input = if i == 0 {
                self.input_shape.clone()
            } else if Some(i) == head || i == decoder_start {
                if encoder_len == 0 {
                    self.input_shape.clone()
                } else {
                    io[encoder_len - 1].1.clone()
                }
            } else {
                io[i - 1].1.clone()
            };
            let output = layer_output_shape(i, layer, &input, &io)?;
            io.push((input, output));
        }
        if has_decoder {
            let out = &io.last().expect("decoder is non-empty").1;
            if *out != self.input_shape {
                return bad(format!(
                    "decoder reproduces shape {out:?}, input shape is {:?}",
                    self.input_shape
                ));
            }
        }
        let first_dense = self.layers[..encoder_len]
            .iter()
            .position(|l| matches!(l, LayerSpec::Dense { .. }))
            .unwrap_or(encoder_len);
        let sparsity_layer = (0..first_dense).rev().find(|&i| {
            matches!(
                self.layers[i],
                LayerSpec::Conv { .. } | LayerSpec::MaxPool { .. }
            )
        });
        Ok(Plan {
            io,
            encoder_len,
            head,
            sparsity_layer,
        })
    }

    /// Address and shape of every parameter, in checkpoint order.
    pub fn param_layout(&self) -> Result<Vec<(ParamAddr, Vec<usize>)>> {
        let plan = self.plan()?;
        let mut layout = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let input = &plan.io[i].0;
            let (weight, bias) = match *layer {
                LayerSpec::Conv { maps, kh, kw, .. } => (vec![maps, input[0], kh, kw], maps),
                LayerSpec::Dense { units, .. } => (vec![units, input.iter().product()], units),
                _ => continue,
            };
            layout.push((ParamAddr::new(i, ParamKind::Weight), weight));
            layout.push((ParamAddr::new(i, ParamKind::Bias), vec![bias]));
        }
        Ok(layout)
    }

    /// Indices of the convolutional layers in the encoder.
    pub fn conv_layers(&self) -> Vec<usize> {
        self.encoder()
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. }))
            .map(|(i, _)| i)
            .collect()
    }
}

fn layer_output_shape(
    i: usize,
    layer: &LayerSpec,
    input: &[usize],
    io: &[(Vec<usize>, Vec<usize>)],
) -> Result<Vec<usize>> {
    let bad = |msg: String| {
        Err(Error::Config(format!(
            "layer {i} ({}): {msg}",
            layer.kind_name()
        )))
    };
    let spatial = |what: &str| -> Result<(usize, usize, usize)> {
        match *input {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Config(format!(
                "layer {i}: {what} needs a [C, H, W] input, got {input:?}"
            ))),
        }
    };
    match *layer {
        LayerSpec::Conv { maps, kh, kw, .. } => {
            let (_, h, w) = spatial("convolution")?;
            if maps == 0 || kh == 0 || kw == 0 || kh > h || kw > w {
                return bad(format!(
                    "{maps} kernels of {kh}x{kw} do not fit input {input:?}"
                ));
            }
            Ok(vec![maps, h - kh + 1, w - kw + 1])
        }
        LayerSpec::MaxPool { ph, pw } => {
            let (c, h, w) = spatial("pooling")?;
            if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
                return bad(format!("pool {ph}x{pw} does not divide input {input:?}"));
            }
            Ok(vec![c, h / ph, w / pw])
        }
        LayerSpec::Dense { units, .. } => {
            if units == 0 {
                return bad("zero units".into());
            }
            Ok(vec![units])
        }
        LayerSpec::Dropout { .. } => Ok(input.to_vec()),
        LayerSpec::DenseDecode { tied_to, .. } => {
            let (tied_in, tied_out) = &io[tied_to];
            if input.iter().product::<usize>() != tied_out[0] {
                return bad(format!(
                    "input {input:?} does not match the {} tied units",
                    tied_out[0]
                ));
            }
            Ok(tied_in.clone())
        }
        LayerSpec::ConvDecode { tied_to, .. } | LayerSpec::Unpool { tied_to } => {
            let (tied_in, tied_out) = &io[tied_to];
            if input != tied_out.as_slice() {
                return bad(format!(
                    "input {input:?} does not match tied output {tied_out:?}"
                ));
            }
            Ok(tied_in.clone())
        }
    }
}

impl fmt::Display for NetworkSpec {
    /// Canonical text form, stored verbatim in checkpoints.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dims: Vec<String> = self.input_shape.iter().map(|d| d.to_string()).collect();
        writeln!(f, "input {}", dims.join(" "))?;
        writeln!(f, "task {}", self.task)?;
        writeln!(f, "alpha_mt {}", self.alpha_mt)?;
        let r = &self.reg;
        writeln!(
            f,
            "reg l2_lambda={} prior_lambda={} sparsity_coeff={} sparsity_target={}",
            r.l2_lambda, r.prior_lambda, r.sparsity_coeff, r.sparsity_target
        )?;
        for layer in &self.layers {
            write!(f, "layer {}", layer.kind_name())?;
            match *layer {
                LayerSpec::Conv { maps, kh, kw, act } => {
                    write!(f, " maps={maps} kh={kh} kw={kw} act={act}")?
                }
                LayerSpec::MaxPool { ph, pw } => write!(f, " ph={ph} pw={pw}")?,
                LayerSpec::Dense { units, act } => write!(f, " units={units} act={act}")?,
                LayerSpec::Dropout { p } => write!(f, " p={p}")?,
                LayerSpec::DenseDecode { tied_to, act }
                | LayerSpec::ConvDecode { tied_to, act } => {
                    write!(f, " tied_to={tied_to} act={act}")?
                }
                LayerSpec::Unpool { tied_to } => write!(f, " tied_to={tied_to}")?,
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

struct Fields<'a> {
    line: &'a str,
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn parse(line: &'a str, tokens: impl Iterator<Item = &'a str>) -> Result<Self> {
        let pairs = tokens
            .map(|t| {
                t.split_once('=').ok_or_else(|| {
                    Error::Config(format!("expected key=value, got `{t}` in `{line}`"))
                })
            })
            .collect::<Result<_>>()?;
        Ok(Fields { line, pairs })
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .pairs
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("missing `{key}` in `{}`", self.line)))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("invalid `{key}` value `{raw}` in `{}`", self.line)))
    }
}

fn parse_layer<'a>(line: &'a str, mut tokens: std::str::SplitWhitespace<'a>) -> Result<LayerSpec> {
    let kind = tokens
        .next()
        .ok_or_else(|| Error::Config(format!("missing layer kind in `{line}`")))?;
    let f = Fields::parse(line, tokens)?;
    Ok(match kind {
        "conv" => LayerSpec::Conv {
            maps: f.get("maps")?,
            kh: f.get("kh")?,
            kw: f.get("kw")?,
            act: f.get("act")?,
        },
        "maxpool" => LayerSpec::MaxPool {
            ph: f.get("ph")?,
            pw: f.get("pw")?,
        },
        "dense" => LayerSpec::Dense {
            units: f.get("units")?,
            act: f.get("act")?,
        },
        "dropout" => LayerSpec::Dropout { p: f.get("p")? },
        "dense_decode" => LayerSpec::DenseDecode {
            tied_to: f.get("tied_to")?,
            act: f.get("act")?,
        },
        "conv_decode" => LayerSpec::ConvDecode {
            tied_to: f.get("tied_to")?,
            act: f.get("act")?,
        },
        "unpool" => LayerSpec::Unpool {
            tied_to: f.get("tied_to")?,
        },
        other => return Err(Error::Config(format!("unknown layer kind `{other}`"))),
    })
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut input_shape = None;
        let mut task = None;
        let mut alpha_mt = 0.0;
        let mut reg = RegConfig::default();
        let mut layers = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let mut tokens = line.split_whitespace();
            match tokens.next() {
                Some("input") => {
                    let dims = tokens
                        .map(|t| {
                            t.parse()
                                .map_err(|_| Error::Config(format!("bad extent `{t}`")))
                        })
                        .collect::<Result<Vec<usize>>>()?;
                    input_shape = Some(dims);
                }
                Some("task") => {
                    task = Some(tokens.next().unwrap_or_default().parse()?);
                }
                Some("alpha_mt") => {
                    let raw = tokens.next().unwrap_or_default();
                    alpha_mt = raw
                        .parse()
                        .map_err(|_| Error::Config(format!("bad alpha_mt `{raw}`")))?;
                }
                Some("reg") => {
                    let f = Fields::parse(line, tokens)?;
                    reg = RegConfig {
                        l2_lambda: f.get("l2_lambda")?,
                        prior_lambda: f.get("prior_lambda")?,
                        sparsity_coeff: f.get("sparsity_coeff")?,
                        sparsity_target: f.get("sparsity_target")?,
                    };
                }
                Some("layer") => layers.push(parse_layer(line, tokens)?),
                _ => return Err(Error::Config(format!("unrecognised spec line `{line}`"))),
            }
        }
        let spec = NetworkSpec {
            input_shape: input_shape
                .ok_or_else(|| Error::Config("spec has no input line".into()))?,
            layers,
            task: task.ok_or_else(|| Error::Config("spec has no task line".into()))?,
            alpha_mt,
            reg,
        };
        spec.plan()?;
        Ok(spec)
    }
}
