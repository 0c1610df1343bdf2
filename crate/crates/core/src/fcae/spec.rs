use std::fmt;

use crate::error::{config_err, Result};

/// One entry of a layer stack description.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerDesc {
    Conv { k: usize, filters: usize, pad: usize },
    Pool,
    /// `filters` is the number of output channels.
    Deconv { k: usize, filters: usize, pad: usize },
    Unpool,
}

impl fmt::Display for LayerDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pad = |p: usize| if p > 0 { format!("p{p}") } else { String::new() };
        match *self {
            LayerDesc::Conv { k, filters, pad: p } => write!(f, "conv{k}x{filters}{}", pad(p)),
            LayerDesc::Deconv { k, filters, pad: p } => write!(f, "deconv{k}x{filters}{}", pad(p)),
            LayerDesc::Pool => f.write_str("pool"),
            LayerDesc::Unpool => f.write_str("unpool"),
        }
    }
}

impl LayerDesc {
    /// Parses `conv5x6`, `conv3x20p1`, `pool`, `deconv4x16`, `unpool`.
    pub fn parse(token: &str) -> Result<Self> {
        let t = token.trim().to_ascii_lowercase();
        match t.as_str() {
            "pool" | "maxpool" => return Ok(LayerDesc::Pool),
            "unpool" => return Ok(LayerDesc::Unpool),
            "dense" | "fc" | "linear" | "fully-connected" => {
                return config_err(format!("rule 'no dense layers' violated by layer '{token}'"))
            }
            _ => {}
        }
        let (deconv, rest) = if let Some(r) = t.strip_prefix("deconv") {
            (true, r)
        } else if let Some(r) = t.strip_prefix("conv") {
            (false, r)
        } else {
            return config_err(format!("unknown layer '{token}'"));
        };
        let (body, pad) = match rest.split_once('p') {
            Some((b, p)) => (b, p.parse::<usize>().map_err(|_| crate::Error::Config(format!("bad padding in '{token}'")))?),
            None => (rest, 0),
        };
        let Some((k, filters)) = body.split_once('x') else {
            return config_err(format!("expected <kind><k>x<filters>[p<pad>], got '{token}'"));
        };
        let k: usize = k.parse().map_err(|_| crate::Error::Config(format!("bad kernel size in '{token}'")))?;
        let filters: usize =
            filters.parse().map_err(|_| crate::Error::Config(format!("bad filter count in '{token}'")))?;
        if k == 0 || filters == 0 {
            return config_err(format!("kernel size and filter count must be positive in '{token}'"));
        }
        Ok(if deconv { LayerDesc::Deconv { k, filters, pad } } else { LayerDesc::Conv { k, filters, pad } })
    }
}

/// Declarative description of a symmetric fully convolutional auto-encoder.
///
/// `encoder` lists the conv/pool layers in order; its last entry is the
/// feature convolution, whose output must be `1×1`. The decoder is the exact
/// mirror: each conv becomes a deconv back to the conv's input channels and
/// each pool an unpool that consumes the pool's switches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: String,
    /// `(channels, height, width)` of one input sample.
    pub input: (usize, usize, usize),
    pub encoder: Vec<LayerDesc>,
}

/// Spatial/channel bookkeeping for one encoder layer output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl NetworkSpec {
    /// Validates an encoder-only description and mirrors it.
    pub fn new(name: impl Into<String>, input: (usize, usize, usize), encoder: Vec<LayerDesc>) -> Result<Self> {
        let spec = Self { name: name.into(), input, encoder };
        spec.validate()?;
        Ok(spec)
    }

    /// MNIST encoder: 28×28×1 → conv5×6 → pool → conv5×16 → pool → conv4×120.
    pub fn mnist() -> Self {
        Self::new(
            "mnist",
            (1, 28, 28),
            vec![
                LayerDesc::Conv { k: 5, filters: 6, pad: 0 },
                LayerDesc::Pool,
                LayerDesc::Conv { k: 5, filters: 16, pad: 0 },
                LayerDesc::Pool,
                LayerDesc::Conv { k: 4, filters: 120, pad: 0 },
            ],
        )
        .expect("mnist preset is valid")
    }

    /// USPS encoder (16×16×1, padding 1 on the 3×3 convolutions).
    pub fn usps() -> Self {
        Self::new(
            "usps",
            (1, 16, 16),
            vec![
                LayerDesc::Conv { k: 3, filters: 20, pad: 1 },
                LayerDesc::Pool,
                LayerDesc::Conv { k: 3, filters: 20, pad: 1 },
                LayerDesc::Pool,
                LayerDesc::Conv { k: 4, filters: 160, pad: 0 },
            ],
        )
        .expect("usps preset is valid")
    }

    /// COIL encoder for 128×128 images; `channels` is 1 for COIL-20 and 3
    /// for COIL-100.
    pub fn coil(channels: usize) -> Self {
        Self::new(
            "coil",
            (channels, 128, 128),
            vec![
                LayerDesc::Conv { k: 9, filters: 20, pad: 0 },
                LayerDesc::Pool,
                LayerDesc::Conv { k: 5, filters: 20, pad: 0 },
                LayerDesc::Pool,
                LayerDesc::Conv { k: 5, filters: 20, pad: 0 },
                LayerDesc::Pool,
                LayerDesc::Conv { k: 5, filters: 40, pad: 0 },
                LayerDesc::Pool,
                LayerDesc::Conv { k: 4, filters: 320, pad: 0 },
            ],
        )
        .expect("coil preset is valid")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "mnist" => Ok(Self::mnist()),
            "usps" => Ok(Self::usps()),
            "coil" | "coil20" | "coil-20" => Ok(Self::coil(1)),
            "coil100" | "coil-100" => Ok(Self::coil(3)),
            other => config_err(format!("unknown network preset '{other}' (expected mnist, usps, coil, coil100)")),
        }
    }

    /// Parses a comma-separated layer list. An encoder-only list is mirrored;
    /// a list containing deconv/unpool layers is taken as the full stack and
    /// must already be symmetric.
    pub fn parse(name: &str, input: (usize, usize, usize), text: &str) -> Result<Self> {
        let layers = text.split(',').filter(|t| !t.trim().is_empty()).map(LayerDesc::parse).collect::<Result<Vec<_>>>()?;
        if layers.iter().any(|l| matches!(l, LayerDesc::Deconv { .. } | LayerDesc::Unpool)) {
            Self::from_stack(name, input, &layers)
        } else {
            Self::new(name, input, layers)
        }
    }

    /// Accepts an explicit encoder + decoder stack and checks the symmetry
    /// rules: an odd number of layers counting the input and output layers,
    /// the feature layer at the center, and a decoder that mirrors the
    /// encoder exactly.
    pub fn from_stack(name: &str, input: (usize, usize, usize), stack: &[LayerDesc]) -> Result<Self> {
        let total = stack.len() + 1;
        if total % 2 == 0 {
            return config_err(format!(
                "rule 'odd layer count' violated: {total} layers (input + {} ops) cannot have a central feature layer",
                stack.len()
            ));
        }
        let half = stack.len() / 2;
        let (enc, dec) = stack.split_at(half);
        if enc.iter().any(|l| matches!(l, LayerDesc::Deconv { .. } | LayerDesc::Unpool)) {
            return config_err("rule 'feature layer at the center' violated: decoder layer before the center");
        }
        let spec = Self::new(name, input, enc.to_vec())?;
        if spec.decoder() != dec {
            return config_err(format!(
                "rule 'symmetric decoder' violated: expected [{}], got [{}]",
                join(&spec.decoder()),
                join(dec)
            ));
        }
        Ok(spec)
    }

    /// Output shape after every encoder layer.
    pub fn encoder_shapes(&self) -> Result<Vec<MapShape>> {
        let (mut c, mut h, mut w) = self.input;
        let mut out = Vec::with_capacity(self.encoder.len());
        for (i, layer) in self.encoder.iter().enumerate() {
            match *layer {
                LayerDesc::Conv { k, filters, pad } => {
                    if pad >= k {
                        return config_err(format!("layer {i} ({layer}): padding must be smaller than the kernel"));
                    }
                    if h + 2 * pad < k || w + 2 * pad < k {
                        return config_err(format!("layer {i} ({layer}): kernel larger than the {h}x{w} input"));
                    }
                    h = h + 2 * pad + 1 - k;
                    w = w + 2 * pad + 1 - k;
                    c = filters;
                }
                LayerDesc::Pool => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return config_err(format!("layer {i} (pool): odd spatial size {h}x{w} cannot be 2x2 pooled"));
                    }
                    h /= 2;
                    w /= 2;
                }
                _ => return config_err(format!("layer {i} ({layer}): only conv and pool layers belong to the encoder")),
            }
            out.push(MapShape { c, h, w });
        }
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return config_err("input shape must be positive");
        }
        match self.encoder.last() {
            Some(LayerDesc::Conv { .. }) => {}
            _ => return config_err("rule 'feature layer' violated: the encoder must end with a convolution"),
        }
        let shapes = self.encoder_shapes()?;
        let feat = shapes.last().expect("non-empty encoder");
        if feat.h != 1 || feat.w != 1 {
            return config_err(format!(
                "rule 'feature layer is 1x1' violated: feature map is {}x{}",
                feat.h, feat.w
            ));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        match self.encoder.last() {
            Some(LayerDesc::Conv { filters, .. }) => *filters,
            _ => unreachable!("validated spec ends with a conv"),
        }
    }

    /// Mirrored decoder descriptors, in forward order.
    pub fn decoder(&self) -> Vec<LayerDesc> {
        let mut in_channels = Vec::with_capacity(self.encoder.len());
        let mut c = self.input.0;
        for layer in &self.encoder {
            in_channels.push(c);
            if let LayerDesc::Conv { filters, .. } = layer {
                c = *filters;
            }
        }
        self.encoder
            .iter()
            .zip(in_channels)
            .rev()
            .map(|(layer, cin)| match *layer {
                LayerDesc::Conv { k, pad, .. } => LayerDesc::Deconv { k, filters: cin, pad },
                _ => LayerDesc::Unpool,
            })
            .collect()
    }

    /// Number of layers counting the input and output layers; always odd
    /// for a mirrored spec.
    pub fn layer_count(&self) -> usize {
        1 + 2 * self.encoder.len()
    }

    pub fn describe(&self) -> String {
        let mut all = self.encoder.clone();
        all.extend(self.decoder());
        format!("{} {:?}: {}", self.name, self.input, join(&all))
    }
}

fn join(layers: &[LayerDesc]) -> String {
    layers.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}
