//! Small trainable models that expose both the penultimate representation
//! and the logits head, plus the checkpoint file format.
//!
//! Parameters are bound to a [`Graph`] as named inputs, so the same nodes can
//! be shared by several forward passes within one training step.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::graph::{ConvGeometry, Graph, NodeId};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Mlp,
    MiniConv,
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Self::Mlp),
            "mini-conv" => Ok(Self::MiniConv),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mlp => "mlp",
            Self::MiniConv => "mini-conv",
        })
    }
}

/// Layout of one input sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputShape {
    Vector(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl InputShape {
    pub fn features(&self) -> usize {
        match *self {
            InputShape::Vector(d) => d,
            InputShape::Image {
                channels,
                height,
                width,
            } => channels * height * width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input: InputShape,
    /// Hidden widths (MLP) or per-block channel counts (mini-conv).
    pub widths: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn mlp(input_dims: usize, hidden: &[usize], num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input: InputShape::Vector(input_dims),
            widths: hidden.to_vec(),
            num_classes,
        }
    }

    pub fn mini_conv(channels: usize, height: usize, width: usize, blocks: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::MiniConv,
            input: InputShape::Image {
                channels,
                height,
                width,
            },
            widths: blocks.to_vec(),
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.input.features() == 0 || self.widths.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        match (self.kind, self.input) {
            (ModelKind::MiniConv, InputShape::Image { .. }) if self.widths.len() == 3 => Ok(()),
            (ModelKind::MiniConv, InputShape::Image { .. }) => {
                Err(Error::Config("mini-conv needs exactly 3 channel widths".into()))
            }
            (ModelKind::MiniConv, InputShape::Vector(_)) => {
                Err(Error::Config("mini-conv needs image-shaped input".into()))
            }
            (ModelKind::Mlp, _) => Ok(()),
        }
    }

    /// Width of the penultimate representation.
    pub fn representation_width(&self) -> usize {
        self.widths.last().copied().unwrap_or(self.input.features())
    }

    fn conv_geometries(&self) -> Vec<ConvGeometry> {
        let InputShape::Image {
            channels,
            height,
            width,
        } = self.input
        else {
            return vec![];
        };
        let mut geoms = Vec::new();
        let (mut c, mut h, mut w) = (channels, height, width);
        for (i, &out) in self.widths.iter().enumerate() {
            let geom = ConvGeometry {
                in_channels: c,
                out_channels: out,
                height: h,
                width: w,
                kernel: 3,
                stride: if i == 0 { 1 } else { 2 },
                padding: 1,
            };
            c = out;
            h = geom.out_height();
            w = geom.out_width();
            geoms.push(geom);
        }
        geoms
    }

    /// Parameter names and shapes in a fixed order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        match self.kind {
            ModelKind::Mlp => {
                let mut fan_in = self.input.features();
                for (i, &w) in self.widths.iter().enumerate() {
                    shapes.push((format!("fc{i}.weight"), vec![fan_in, w]));
                    shapes.push((format!("fc{i}.bias"), vec![w]));
                    fan_in = w;
                }
            }
            ModelKind::MiniConv => {
                for (i, geom) in self.conv_geometries().iter().enumerate() {
                    shapes.push((format!("conv{i}.weight"), vec![geom.out_channels, geom.weight_cols()]));
                    shapes.push((format!("conv{i}.bias"), vec![geom.out_channels]));
                }
            }
        }
        shapes.push(("head.weight".into(), vec![self.representation_width(), self.num_classes]));
        shapes.push(("head.bias".into(), vec![self.num_classes]));
        shapes
    }
}

/// Named parameter tensors in construction order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    tensors: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn new(tensors: Vec<(String, Tensor)>) -> Self {
        ModelParams { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Bindings for a graph built with [`declare_params`].
    pub fn bindings(&self) -> HashMap<String, Tensor> {
        self.tensors.iter().cloned().collect()
    }

    pub fn into_named(self) -> Vec<(String, Tensor)> {
        self.tensors
    }

    /// Checks names and shapes against a spec.
    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let expected = spec.parameter_shapes();
        if expected.len() != self.tensors.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), (have_name, t)) in expected.iter().zip(&self.tensors) {
            if name != have_name || shape.as_slice() != t.shape() {
                return Err(Error::InvalidArgument(format!(
                    "parameter `{have_name}` {:?} does not match `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// He-style initialization: weights `N(0, 2/fan_in)`, zero biases.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut tensors = Vec::new();
    for (i, (name, shape)) in spec.parameter_shapes().into_iter().enumerate() {
        let len: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![0.0; len]
        } else {
            let fan_in = match spec.kind {
                ModelKind::MiniConv if name.starts_with("conv") => shape[1],
                _ => shape[0],
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                .map_err(|e| Error::InvalidArgument(e.to_string()))?;
            let mut r = rng::stream(seed, &[0x1417, i as u64]);
            (0..len).map(|_| normal.sample(&mut r)).collect()
        };
        tensors.push((name, Tensor::new(shape, data)?));
    }
    Ok(ModelParams { tensors })
}

/// Declares every parameter of `spec` as a named graph input.
pub fn declare_params(g: &mut Graph, spec: &ModelSpec) -> Result<HashMap<String, NodeId>> {
    spec.parameter_shapes()
        .into_iter()
        .map(|(name, shape)| {
            let id = g.input(&name, &shape)?;
            Ok((name, id))
        })
        .collect()
}

/// Output nodes of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub representation: NodeId,
    pub logits: NodeId,
}

/// Adds a forward pass over `x` (rows are samples) to the graph.
pub fn build_forward(
    g: &mut Graph,
    spec: &ModelSpec,
    params: &HashMap<String, NodeId>,
    x: NodeId,
) -> Result<ForwardNodes> {
    let p = |name: &str| {
        params
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("parameter `{name}` not declared")))
    };
    let mut h = x;
    match spec.kind {
        ModelKind::Mlp => {
            for i in 0..spec.widths.len() {
                let z = g.matmul(h, p(&format!("fc{i}.weight"))?)?;
                let z = g.add_row_vector(z, p(&format!("fc{i}.bias"))?)?;
                h = g.relu(z);
            }
        }
        ModelKind::MiniConv => {
            for (i, geom) in spec.conv_geometries().into_iter().enumerate() {
                let z = g.conv2d(h, p(&format!("conv{i}.weight"))?, p(&format!("conv{i}.bias"))?, geom)?;
                h = g.relu(z);
            }
            h = g.global_avg_pool(h, spec.representation_width())?;
        }
    }
    let z = g.matmul(h, p("head.weight")?)?;
    let logits = g.add_row_vector(z, p("head.bias")?)?;
    Ok(ForwardNodes {
        representation: h,
        logits,
    })
}

/// Runs the model on a batch and returns `(representation, logits)`.
pub fn model_forward(spec: &ModelSpec, params: &ModelParams, input: &Tensor) -> Result<(Tensor, Tensor)> {
    if input.shape().len() != 2 || input.cols() != spec.input.features() {
        return Err(Error::ShapeMismatch {
            node: 0,
            op: "model_input",
            detail: format!("input {:?}, expected n×{}", input.shape(), spec.input.features()),
        });
    }
    let mut g = Graph::new();
    let nodes = declare_params(&mut g, spec)?;
    let x = g.input("x", input.shape())?;
    let out = build_forward(&mut g, spec, &nodes, x)?;
    let mut bind = params.bindings();
    bind.insert("x".into(), input.clone());
    let mut vals = g.forward_eval(&bind, &[out.representation, out.logits])?;
    let logits = vals.pop().expect("two outputs");
    let repr = vals.pop().expect("two outputs");
    Ok((repr, logits))
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RKMCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes named arrays: magic, version, count, then per array the name,
/// dimensions and little-endian `f64` data.
pub fn write_arrays(mut w: impl Write, arrays: &[(String, Tensor)]) -> std::io::Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, t) in arrays {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos.checked_add(n).filter(|&e| e <= buf.len()).ok_or_else(|| Error::Format {
        offset: *pos,
        detail: format!("need {n} more bytes"),
    })?;
    let s = &buf[*pos..end];
    *pos = end;
    Ok(s)
}

fn take_u32(buf: &[u8], pos: &mut usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(buf, pos, 4)?.try_into().expect("4 bytes")))
}

fn take_u64(buf: &[u8], pos: &mut usize) -> Result<u64> {
    Ok(u64::from_le_bytes(take(buf, pos, 8)?.try_into().expect("8 bytes")))
}

pub fn parse_arrays(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut pos = 0;
    if take(buf, &mut pos, 8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            detail: "bad checkpoint magic".into(),
        });
    }
    let version = take_u32(buf, &mut pos)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 8,
            detail: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = take_u32(buf, &mut pos)?;
    let mut arrays = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let at = pos;
        let name_len = take_u32(buf, &mut pos)? as usize;
        let name = String::from_utf8(take(buf, &mut pos, name_len)?.to_vec()).map_err(|_| Error::Format {
            offset: at,
            detail: "array name is not UTF-8".into(),
        })?;
        let ndim = take_u32(buf, &mut pos)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(take_u64(buf, &mut pos)? as usize);
        }
        let len: usize = shape.iter().product();
        let bytes = take(buf, &mut pos, len.checked_mul(8).ok_or_else(|| Error::Format {
            offset: at,
            detail: "array too large".into(),
        })?)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        arrays.push((name, Tensor::new(shape, data)?));
    }
    if pos != buf.len() {
        return Err(Error::Format {
            offset: pos,
            detail: "trailing bytes".into(),
        });
    }
    Ok(arrays)
}

pub fn save_arrays(path: &Path, arrays: &[(String, Tensor)]) -> Result<()> {
    let mut buf = Vec::new();
    write_arrays(&mut buf, arrays).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_arrays(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    parse_arrays(&buf)
}

/// Extracts the arrays under `prefix/` as model parameters in spec order.
pub fn params_from_arrays(spec: &ModelSpec, arrays: &[(String, Tensor)], prefix: &str) -> Result<ModelParams> {
    let mut tensors = Vec::new();
    for (name, _) in spec.parameter_shapes() {
        let key = format!("{prefix}/{name}");
        let t = arrays
            .iter()
            .find(|(n, _)| *n == key)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks `{key}`")))?;
        tensors.push((name, t));
    }
    let params = ModelParams::new(tensors);
    params.check(spec)?;
    Ok(params)
}

pub fn params_to_arrays(params: &ModelParams, prefix: &str) -> Vec<(String, Tensor)> {
    params
        .iter()
        .map(|(n, t)| (format!("{prefix}/{n}"), t.clone()))
        .collect()
}
