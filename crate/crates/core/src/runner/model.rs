//! Model files: JSON description plus a binary float tensor blob.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::Value;

use super::RunnerError;
use crate::activation::ActivationKind;
use crate::cordic::Accuracy;
use crate::engine::{validate_network, ConvGeometry, EngineConfig, LayerDescriptor, LayerKind, PoolStage};
use crate::fxp::FxPFormat;
use crate::memmap::Topology;
use crate::pooling::PoolWindow;

pub const WEIGHTS_MAGIC: &[u8; 4] = b"CVTW";
pub const WEIGHTS_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Tensor { dims, data }
    }
}

/// Blob layout: magic, version u16, reserved u16, tensor count u32, then per
/// tensor `ndim u32, dims u32 x ndim, data f64 x prod(dims)`, little-endian.
pub fn write_tensors<W: Write>(mut w: W, tensors: &[Tensor]) -> std::io::Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    w.write_all(&0u16.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
        for &d in &t.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<Tensor>, RunnerError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf).map_err(|e| RunnerError::Model(format!("weights: {e}")))?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], RunnerError> {
        let s = buf.get(pos..pos + n).ok_or_else(|| RunnerError::Model("weights: truncated blob".into()))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != WEIGHTS_MAGIC {
        return Err(RunnerError::Model("weights: bad magic".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != WEIGHTS_VERSION {
        return Err(RunnerError::Model(format!("weights: unsupported version {version}")));
    }
    take(2)?;
    let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
    let count = u32_at(take(4)?);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let ndim = u32_at(take(4)?);
        let dims: Vec<usize> = (0..ndim).map(|_| take(4).map(u32_at)).collect::<Result<_, _>>()?;
        let n: usize = dims.iter().product();
        let data = take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        out.push(Tensor { dims, data });
    }
    if pos != buf.len() {
        return Err(RunnerError::Model("weights: trailing bytes after last tensor".into()));
    }
    Ok(out)
}

/// Float parameters of one weight-bearing layer; weights row-major
/// `n_out x n_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatParams {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    pub input_dim: usize,
    pub layers: Vec<LayerDescriptor>,
    pub params: Vec<FloatParams>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    name: String,
    input_dim: usize,
    #[serde(default)]
    input_shape: Option<[usize; 3]>,
    weights_file: PathBuf,
    layers: Vec<Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoolFile {
    window: [usize; 2],
    stride: Option<usize>,
    #[serde(default)]
    normalize: bool,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum LayerFile {
    Dense {
        out: usize,
        activation: Option<ActivationKind>,
        format: Option<FxPFormat>,
        accuracy: Option<Accuracy>,
    },
    Conv {
        out: usize,
        kernel: [usize; 2],
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        activation: Option<ActivationKind>,
        format: Option<FxPFormat>,
        accuracy: Option<Accuracy>,
        pool: Option<PoolFile>,
    },
    Pool {
        window: [usize; 2],
        stride: Option<usize>,
        #[serde(default)]
        normalize: bool,
        format: Option<FxPFormat>,
    },
    Activation {
        activation: ActivationKind,
        format: Option<FxPFormat>,
        accuracy: Option<Accuracy>,
    },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Flat(usize),
    Map(usize, usize, usize),
}

impl Shape {
    fn len(self) -> usize {
        match self {
            Shape::Flat(n) => n,
            Shape::Map(c, h, w) => c * h * w,
        }
    }
}

fn field_err(path: &str, msg: impl std::fmt::Display) -> RunnerError {
    RunnerError::Model(format!("{path}: {msg}"))
}

fn pool_stage(
    path: &str,
    shape: Shape,
    window: [usize; 2],
    stride: Option<usize>,
    normalize: bool,
) -> Result<PoolStage, RunnerError> {
    let Shape::Map(channels, height, width) = shape else {
        return Err(field_err(path, "pooling needs a channels x height x width input"));
    };
    let window = PoolWindow::new(window[0], window[1], stride.unwrap_or(window[0]));
    let stage = PoolStage { channels, height, width, window, normalize };
    stage.output_len().map_err(|e| field_err(path, e))?;
    Ok(stage)
}

fn pooled_shape(stage: &PoolStage) -> Shape {
    let (oh, ow) = stage.window.output_dims(stage.height, stage.width).expect("validated");
    Shape::Map(stage.channels, oh, ow)
}

impl ModelSpec {
    pub fn load(path: &Path, defaults: &EngineConfig) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunnerError::Model(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base, defaults)
            .map_err(|e| RunnerError::Model(format!("{}: {}", path.display(), e.message())))
    }

    /// Parses the JSON description; `weights_file` resolves relative to `base`.
    pub fn from_json(text: &str, base: &Path, defaults: &EngineConfig) -> Result<Self, RunnerError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| field_err("model", e))?;
        let blob_path = base.join(&file.weights_file);
        let blob = std::fs::File::open(&blob_path)
            .map_err(|e| field_err("weights_file", format!("{}: {e}", blob_path.display())))?;
        let tensors = read_tensors(std::io::BufReader::new(blob))?;
        Self::build(&file, tensors, defaults)
    }

    fn build(file: &ModelFile, tensors: Vec<Tensor>, defaults: &EngineConfig) -> Result<Self, RunnerError> {
        let mut shape = match file.input_shape {
            Some([c, h, w]) => {
                if c * h * w != file.input_dim {
                    return Err(field_err("input_shape", format!("{c}x{h}x{w} != input_dim {}", file.input_dim)));
                }
                Shape::Map(c, h, w)
            }
            None => Shape::Flat(file.input_dim),
        };
        let fmt = |f: Option<FxPFormat>| f.unwrap_or(defaults.default_format);
        let acc = |a: Option<Accuracy>| a.unwrap_or(defaults.default_accuracy);
        let mut tensors = tensors.into_iter();
        let mut layers = Vec::new();
        let mut params = Vec::new();
        for (i, raw) in file.layers.iter().enumerate() {
            let path = format!("layers[{i}]");
            let spec: LayerFile = serde_json::from_value(raw.clone()).map_err(|e| field_err(&path, e))?;
            let desc = match spec {
                LayerFile::Dense { out, activation, format, accuracy } => {
                    let act = activation.unwrap_or(ActivationKind::Identity);
                    let d = LayerDescriptor::dense(shape.len(), out, fmt(format), acc(accuracy), act);
                    shape = Shape::Flat(out);
                    d
                }
                LayerFile::Conv { out, kernel, stride, padding, activation, format, accuracy, pool } => {
                    let Shape::Map(c, h, w) = shape else {
                        return Err(field_err(&path, "convolution needs a channels x height x width input"));
                    };
                    let g = ConvGeometry {
                        in_channels: c,
                        in_height: h,
                        in_width: w,
                        kernel_h: kernel[0],
                        kernel_w: kernel[1],
                        stride,
                        padding,
                    };
                    let (oh, ow) = g.output_dims().ok_or_else(|| field_err(&path, "kernel larger than input"))?;
                    let act = activation.unwrap_or(ActivationKind::Identity);
                    let mut d = LayerDescriptor::conv(g, out, fmt(format), acc(accuracy), act);
                    shape = Shape::Map(out, oh, ow);
                    if let Some(p) = pool {
                        let stage = pool_stage(&format!("{path}.pool"), shape, p.window, p.stride, p.normalize)?;
                        d = d.with_pool(stage);
                        shape = pooled_shape(&stage);
                    }
                    d
                }
                LayerFile::Pool { window, stride, normalize, format } => {
                    let stage = pool_stage(&path, shape, window, stride, normalize)?;
                    shape = pooled_shape(&stage);
                    LayerDescriptor::pool_layer(stage, fmt(format)).map_err(|e| field_err(&path, e))?
                }
                LayerFile::Activation { activation, format, accuracy } => {
                    LayerDescriptor::activation_layer(shape.len(), activation, fmt(format), acc(accuracy))
                }
            };
            if desc.has_params() {
                let w = tensors.next().ok_or_else(|| field_err(&path, "weights tensor missing from blob"))?;
                let b = tensors.next().ok_or_else(|| field_err(&path, "bias tensor missing from blob"))?;
                let w_elems: usize = w.dims.iter().product();
                if w.dims.first() != Some(&desc.n_out) || w_elems != desc.n_out * desc.n_in {
                    return Err(field_err(
                        &path,
                        format!("weight shape {:?} does not match {} x {}", w.dims, desc.n_out, desc.n_in),
                    ));
                }
                if b.dims != [desc.n_out] {
                    return Err(field_err(&path, format!("bias shape {:?} does not match [{}]", b.dims, desc.n_out)));
                }
                if w.data.iter().chain(&b.data).any(|v| !v.is_finite()) {
                    return Err(field_err(&path, "non-finite parameter"));
                }
                params.push(FloatParams { weights: w.data, biases: b.data });
            }
            layers.push(desc);
        }
        if tensors.next().is_some() {
            return Err(field_err("weights_file", "more tensors than weight-bearing layers"));
        }
        validate_network(&layers, file.input_dim).map_err(|e| field_err("layers", e))?;
        Ok(ModelSpec { name: file.name.clone(), input_dim: file.input_dim, layers, params })
    }

    pub fn topology(&self) -> Topology {
        crate::engine::network_topology(&self.layers).expect("validated model")
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.output_len())
    }

    /// Same model with every layer's accuracy replaced.
    pub fn with_modes(&self, modes: &[Accuracy]) -> Self {
        let mut m = self.clone();
        for (l, &a) in m.layers.iter_mut().zip(modes) {
            l.accuracy = a;
        }
        m
    }

    /// Same model at another word width, keeping each layer's integer bits.
    pub fn retarget(&self, total_bits: u32) -> Result<Self, RunnerError> {
        let mut m = self.clone();
        for l in &mut m.layers {
            l.format = l.format.retarget(total_bits).map_err(|e| RunnerError::Model(e.to_string()))?;
        }
        Ok(m)
    }

    pub fn modes(&self) -> Vec<Accuracy> {
        self.layers.iter().map(|l| l.accuracy).collect()
    }

    pub fn kind_names(&self) -> Vec<&'static str> {
        self.layers.iter().map(|l| l.kind.name()).collect()
    }

    pub fn is_mac_layer(&self, i: usize) -> bool {
        matches!(self.layers[i].kind, LayerKind::Dense | LayerKind::Conv(_))
    }
}

impl RunnerError {
    fn message(&self) -> String {
        match self {
            RunnerError::Model(m) => m.clone(),
            e => e.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_model(dir: &Path, json: &str, tensors: &[Tensor]) -> PathBuf {
        let blob = dir.join("w.bin");
        write_tensors(std::fs::File::create(&blob).unwrap(), tensors).unwrap();
        let path = dir.join("model.json");
        std::fs::write(&path, json).unwrap();
        path
    }

    #[test]
    fn tensor_blob_round_trip() {
        let ts =
            vec![Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, 1e-9, 7.0]), Tensor::new(vec![2], vec![0.5, -0.5])];
        let mut buf = Vec::new();
        write_tensors(&mut buf, &ts).unwrap();
        assert_eq!(read_tensors(&buf[..]).unwrap(), ts);
        assert!(read_tensors(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(read_tensors(&buf[..]).is_err());
    }

    #[test]
    fn minimal_model_loads() {
        let d = tempfile::tempdir().unwrap();
        let p = write_model(
            d.path(),
            r#"{"name":"tiny","input_dim":3,"weights_file":"w.bin","layers":[{"kind":"dense","out":2,"activation":"relu"}]}"#,
            &[Tensor::new(vec![2, 3], vec![0.0; 6]), Tensor::new(vec![2], vec![0.0; 2])],
        );
        let m = ModelSpec::load(&p, &EngineConfig::default()).unwrap();
        assert_eq!(m.layers.len(), 1);
        assert_eq!(m.layers[0].format, FxPFormat::FXP8);
        assert_eq!(m.topology().layers(), 1);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let d = tempfile::tempdir().unwrap();
        let p = write_model(
            d.path(),
            r#"{"name":"tiny","input_dim":3,"weights_file":"w.bin","layers":[{"kind":"dense","out":2},{"kind":"dense","out":1}]}"#,
            &[
                Tensor::new(vec![2, 3], vec![0.0; 6]),
                Tensor::new(vec![2], vec![0.0; 2]),
                Tensor::new(vec![1, 3], vec![0.0; 3]),
                Tensor::new(vec![1], vec![0.0]),
            ],
        );
        let err = ModelSpec::load(&p, &EngineConfig::default()).unwrap_err().to_string();
        assert!(err.contains("layers[1]"), "{err}");
        let p = write_model(
            d.path(),
            r#"{"name":"tiny","input_dim":3,"weights_file":"w.bin","layers":[{"kind":"dense","out":2,"activation":"foo"}]}"#,
            &[Tensor::new(vec![2, 3], vec![0.0; 6]), Tensor::new(vec![2], vec![0.0; 2])],
        );
        let err = ModelSpec::load(&p, &EngineConfig::default()).unwrap_err().to_string();
        assert!(err.contains("layers[0]") && err.contains("foo"), "{err}");
    }

    #[test]
    fn conv_pool_model_shapes() {
        let d = tempfile::tempdir().unwrap();
        let p = write_model(
            d.path(),
            r#"{"name":"c","input_dim":16,"input_shape":[1,4,4],"weights_file":"w.bin","layers":[
                {"kind":"conv","out":2,"kernel":[3,3],"padding":1,"activation":"relu","format":"fxp16.f12","pool":{"window":[2,2]}},
                {"kind":"dense","out":3,"format":"fxp16.f12"},
                {"kind":"activation","activation":"softmax","format":"fxp16.f12"}]}"#,
            &[
                Tensor::new(vec![2, 1, 3, 3], vec![0.1; 18]),
                Tensor::new(vec![2], vec![0.0; 2]),
                Tensor::new(vec![3, 8], vec![0.1; 24]),
                Tensor::new(vec![3], vec![0.0; 3]),
            ],
        );
        let m = ModelSpec::load(&p, &EngineConfig::default()).unwrap();
        assert_eq!(m.kind_names(), vec!["conv", "dense", "activation"]);
        assert_eq!(m.layers[0].output_len(), 8);
        assert_eq!(m.output_dim(), 3);
    }
}
