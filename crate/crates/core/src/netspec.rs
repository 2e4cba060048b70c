//! Network description file: a CSV of layer records preceded by
//! `# input=CxHxW` and `# classes=K` directives.
//!
//! ```text
//! # input=1x8x8
//! # classes=10
//! layer_id,kind,F,C,K1,K2,stride,padding,searched
//! conv1,conv,8,1,3,3,1,1,false
//! pool1,pool,8,8,2,2,2,0,false
//! fc,fc,10,128,1,1,1,0,false
//! ```
//!
//! Every conv and every fc except the last is followed by a ReLU. Pool
//! layers average over a `K1×K2` window. An fc layer flattens its input, so
//! its `C` is the flattened size.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costmodel::LayerGeometry;
use crate::error::{Error, Result};
use crate::textfmt::split_preamble;
use crate::tucker::ConvLayerSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
    Pool,
}

impl LayerKind {
    fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Fc => "fc",
            LayerKind::Pool => "pool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer_id: String,
    pub kind: LayerKind,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub searched: bool,
}

impl LayerRecord {
    pub fn conv_spec(&self) -> Option<ConvLayerSpec> {
        (self.kind == LayerKind::Conv).then(|| ConvLayerSpec {
            layer_id: self.layer_id.clone(),
            out_channels: self.out_channels,
            in_channels: self.in_channels,
            kernel_h: self.kernel_h,
            kernel_w: self.kernel_w,
            stride: self.stride,
            padding: self.padding,
        })
    }
}

/// Activation shape `(channels, height, width)` entering each layer.
pub type Chw = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: Chw,
    pub classes: usize,
    pub layers: Vec<LayerRecord>,
}

impl NetworkSpec {
    /// Validates channel chaining and returns the input shape of every layer.
    pub fn input_shapes(&self) -> Result<Vec<Chw>> {
        self.walk().map_err(|(i, msg)| {
            Error::arg(format!("layer `{}`: {msg}", self.layers[i].layer_id))
        })
    }

    fn walk(&self) -> std::result::Result<Vec<Chw>, (usize, String)> {
        let (mut c, mut h, mut w) = self.input;
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut seen = std::collections::HashSet::new();
        for (i, l) in self.layers.iter().enumerate() {
            if l.layer_id.is_empty() || !seen.insert(l.layer_id.as_str()) {
                return Err((i, "layer ids must be non-empty and unique".into()));
            }
            if l.out_channels == 0 || l.in_channels == 0 || l.kernel_h == 0 || l.kernel_w == 0 || l.stride == 0 {
                return Err((i, "extents and stride must be positive".into()));
            }
            shapes.push((c, h, w));
            match l.kind {
                LayerKind::Conv => {
                    if l.in_channels != c {
                        return Err((i, format!("expects {} input channels, predecessor gives {c}", l.in_channels)));
                    }
                    let spec = l.conv_spec().expect("conv");
                    let (oh, ow) = spec
                        .output_hw(h, w)
                        .ok_or((i, format!("kernel does not fit a {h}x{w} input")))?;
                    (c, h, w) = (l.out_channels, oh, ow);
                }
                LayerKind::Pool => {
                    if l.searched {
                        return Err((i, "only conv layers can be searched".into()));
                    }
                    if l.in_channels != c || l.out_channels != c {
                        return Err((i, format!("pool must keep {c} channels")));
                    }
                    if h < l.kernel_h || w < l.kernel_w {
                        return Err((i, format!("window does not fit a {h}x{w} input")));
                    }
                    (h, w) = ((h - l.kernel_h) / l.stride + 1, (w - l.kernel_w) / l.stride + 1);
                }
                LayerKind::Fc => {
                    if l.searched {
                        return Err((i, "only conv layers can be searched".into()));
                    }
                    if l.in_channels != c * h * w {
                        return Err((i, format!("expects {} inputs, predecessor gives {}", l.in_channels, c * h * w)));
                    }
                    (c, h, w) = (l.out_channels, 1, 1);
                }
            }
        }
        match self.layers.last() {
            Some(l) if l.kind == LayerKind::Fc && l.out_channels == self.classes => Ok(shapes),
            _ => Err((
                self.layers.len().saturating_sub(1),
                format!("network must end in an fc layer with {} outputs", self.classes),
            )),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::arg("network has no layers"));
        }
        if self.classes < 2 {
            return Err(Error::arg("network needs at least two classes"));
        }
        self.input_shapes().map(|_| ())
    }

    pub fn conv_specs(&self) -> Vec<ConvLayerSpec> {
        self.layers.iter().filter_map(LayerRecord::conv_spec).collect()
    }

    pub fn searched_specs(&self) -> Vec<ConvLayerSpec> {
        self.layers
            .iter()
            .filter(|l| l.searched)
            .filter_map(LayerRecord::conv_spec)
            .collect()
    }

    /// Spatial geometry of every conv layer.
    pub fn geometries(&self) -> Result<Vec<LayerGeometry>> {
        let shapes = self.input_shapes()?;
        Ok(self
            .layers
            .iter()
            .zip(shapes)
            .filter_map(|(l, (_, h, w))| {
                l.conv_spec().map(|spec| LayerGeometry {
                    spec,
                    input_hw: (h, w),
                })
            })
            .collect())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_string(),
            line,
            message,
        };
        let (directives, body, body_line) = split_preamble(text);
        let mut input = None;
        let mut classes = None;
        for d in directives {
            match d.key.as_str() {
                "input" => {
                    let dims: Vec<usize> = d
                        .value
                        .split('x')
                        .map(|p| p.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| err(d.line, format!("bad input shape `{}`", d.value)))?;
                    if dims.len() != 3 || dims.iter().any(|&x| x == 0) {
                        return Err(err(d.line, format!("input must be CxHxW, got `{}`", d.value)));
                    }
                    input = Some((dims[0], dims[1], dims[2]));
                }
                "classes" => {
                    classes = Some(
                        d.value
                            .parse()
                            .map_err(|_| err(d.line, format!("bad class count `{}`", d.value)))?,
                    )
                }
                other => return Err(err(d.line, format!("unknown directive `{other}`"))),
            }
        }
        let input = input.ok_or_else(|| err(1, "missing `# input=CxHxW`".into()))?;
        let classes = classes.ok_or_else(|| err(1, "missing `# classes=K`".into()))?;

        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(body.as_bytes());
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| err(body_line, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let want = ["layer_id", "kind", "F", "C", "K1", "K2", "stride", "padding", "searched"];
        if header != want {
            return Err(err(body_line, format!("header must be `{}`", want.join(","))));
        }
        let mut layers = Vec::new();
        let mut lines = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| err(body_line, e.to_string()))?;
            let line = body_line - 1 + record.position().map_or(0, |p| p.line() as usize);
            if record.len() != want.len() {
                return Err(err(line, format!("expected {} fields, got {}", want.len(), record.len())));
            }
            let num = |i: usize| -> Result<usize> {
                record[i]
                    .parse()
                    .map_err(|_| err(line, format!("bad {} `{}` for layer `{}`", want[i], &record[i], &record[0])))
            };
            let kind = match &record[1] {
                "conv" => LayerKind::Conv,
                "fc" => LayerKind::Fc,
                "pool" => LayerKind::Pool,
                other => return Err(err(line, format!("layer `{}`: unknown kind `{other}`", &record[0]))),
            };
            let searched = match &record[8] {
                "true" | "1" | "yes" => true,
                "false" | "0" | "no" => false,
                other => return Err(err(line, format!("layer `{}`: bad searched flag `{other}`", &record[0]))),
            };
            layers.push(LayerRecord {
                layer_id: record[0].to_string(),
                kind,
                out_channels: num(2)?,
                in_channels: num(3)?,
                kernel_h: num(4)?,
                kernel_w: num(5)?,
                stride: num(6)?,
                padding: num(7)?,
                searched,
            });
            lines.push(line);
        }
        let spec = NetworkSpec { input, classes, layers };
        if spec.layers.is_empty() {
            return Err(err(body_line, "network has no layers".into()));
        }
        if classes < 2 {
            return Err(err(1, "network needs at least two classes".into()));
        }
        spec.walk().map_err(|(i, msg)| {
            err(lines[i], format!("layer `{}`: {msg}", spec.layers[i].layer_id))
        })?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let (c, h, w) = self.input;
        let _ = writeln!(out, "# input={c}x{h}x{w}");
        let _ = writeln!(out, "# classes={}", self.classes);
        out.push_str("layer_id,kind,F,C,K1,K2,stride,padding,searched\n");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                l.layer_id,
                l.kind.as_str(),
                l.out_channels,
                l.in_channels,
                l.kernel_h,
                l.kernel_w,
                l.stride,
                l.padding,
                l.searched
            );
        }
        out
    }
}

/// The small four-conv reference network used for desk-scale runs.
pub fn desk_cnn(classes: usize) -> NetworkSpec {
    let text = format!(
        "# input=1x8x8\n# classes={classes}\n\
layer_id,kind,F,C,K1,K2,stride,padding,searched\n\
conv1,conv,16,1,3,3,1,1,false\n\
conv2,conv,32,16,3,3,1,1,true\n\
pool1,pool,32,32,2,2,2,0,false\n\
conv3,conv,32,32,3,3,1,1,true\n\
conv4,conv,32,32,3,3,1,1,true\n\
gap,pool,32,32,4,4,4,0,false\n\
fc,fc,{classes},32,1,1,1,0,false\n"
    );
    NetworkSpec::parse(&text, "desk_cnn").expect("built-in spec is valid")
}

/// Conv stack of an ImageNet ResNet-18 (224×224 input), with the stem left
/// unsearched.
pub fn resnet18() -> NetworkSpec {
    let mut layers = Vec::new();
    let conv = |id: &str, f: usize, c: usize, k: usize, s: usize, searched: bool| LayerRecord {
        layer_id: id.to_string(),
        kind: LayerKind::Conv,
        out_channels: f,
        in_channels: c,
        kernel_h: k,
        kernel_w: k,
        stride: s,
        padding: k / 2,
        searched,
    };
    layers.push(conv("conv1", 64, 3, 7, 2, false));
    layers.push(LayerRecord {
        layer_id: "maxpool".into(),
        kind: LayerKind::Pool,
        out_channels: 64,
        in_channels: 64,
        kernel_h: 2,
        kernel_w: 2,
        stride: 2,
        padding: 0,
        searched: false,
    });
    let mut c = 64;
    for (stage, width) in [(1, 64), (2, 128), (3, 256), (4, 512)] {
        for block in 0..2 {
            let stride = if stage > 1 && block == 0 { 2 } else { 1 };
            layers.push(conv(&format!("layer{stage}.{block}.conv1"), width, c, 3, stride, true));
            layers.push(conv(&format!("layer{stage}.{block}.conv2"), width, width, 3, 1, true));
            c = width;
        }
    }
    layers.push(LayerRecord {
        layer_id: "avgpool".into(),
        kind: LayerKind::Pool,
        out_channels: 512,
        in_channels: 512,
        kernel_h: 7,
        kernel_w: 7,
        stride: 7,
        padding: 0,
        searched: false,
    });
    layers.push(LayerRecord {
        layer_id: "fc".into(),
        kind: LayerKind::Fc,
        out_channels: 1000,
        in_channels: 512,
        kernel_h: 1,
        kernel_w: 1,
        stride: 1,
        padding: 0,
        searched: false,
    });
    NetworkSpec {
        input: (3, 224, 224),
        classes: 1000,
        layers,
    }
}
