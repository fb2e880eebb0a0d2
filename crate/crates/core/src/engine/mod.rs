//! Lane-based vector engine: PE array of iterative CORDIC MACs, shared
//! activation unit, pooling block and the layer-multiplexed controller.
//!
//! Values never depend on the PE count. Each neuron's dot product runs on
//! one accumulator with guard bits, in input order, and is rounded once into
//! the layer format after the bias is added.

pub mod control;
pub mod cycles;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::{self, ActivationError, ActivationKind, AfRequest};
use crate::cordic::{mac_iterations, mul_acc_wide, to_wide, Accuracy, CordicConfig, CordicError, GUARD_BITS};
use crate::fxp::{round_shift_right, FxPFormat, FxPValue};
use crate::memmap::{addr_width, encode, AddressSpec, MemmapError, ParamAddress, ParamMemory, Topology};
use crate::pooling::{self, FeatureMap, PoolError, PoolVariant, PoolWindow};

pub use control::{
    check_trace, trace_to_csv, ControlState, ControlUnit, FsmError, FsmEvent, Signal, TraceEvent, TraceViolation,
};
pub use cycles::{CycleReport, LayerCycles};

pub const SUPPORTED_PES: [usize; 3] = [64, 128, 256];
pub const BANK_DEPTH: usize = 32;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("engine configuration: {0}")]
    Config(String),
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<EngineError>,
    },
    #[error("missing parameter {0:?}")]
    MissingParam(ParamAddress),
    #[error(transparent)]
    Cordic(#[from] CordicError),
    #[error(transparent)]
    Activation(#[from] ActivationError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Memmap(#[from] MemmapError),
    #[error(transparent)]
    Fsm(#[from] FsmError),
}

impl EngineError {
    fn in_layer(self, layer: usize) -> Self {
        match self {
            EngineError::Layer { .. } => self,
            e => EngineError::Layer { layer, source: Box::new(e) },
        }
    }

    pub fn is_config(&self) -> bool {
        match self {
            EngineError::Config(_) => true,
            EngineError::Layer { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

fn default_pes() -> usize {
    64
}
fn default_bank_depth() -> usize {
    BANK_DEPTH
}
fn default_format() -> FxPFormat {
    FxPFormat::FXP8
}
fn default_accuracy() -> Accuracy {
    Accuracy::Accurate
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    #[serde(default = "default_pes")]
    pub pes: usize,
    #[serde(default = "default_bank_depth")]
    pub bank_depth: usize,
    #[serde(default = "default_format")]
    pub default_format: FxPFormat,
    #[serde(default = "default_accuracy")]
    pub default_accuracy: Accuracy,
    #[serde(default = "default_true")]
    pub overlap_af: bool,
    #[serde(default)]
    pub pool_variant: PoolVariant,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            pes: default_pes(),
            bank_depth: BANK_DEPTH,
            default_format: default_format(),
            default_accuracy: default_accuracy(),
            overlap_af: true,
            pool_variant: PoolVariant::Sliding,
        }
    }
}

impl EngineConfig {
    pub fn with_pes(mut self, pes: usize) -> Self {
        self.pes = pes;
        self
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if !SUPPORTED_PES.contains(&self.pes) {
            return Err(EngineError::Config(format!("pes must be one of {SUPPORTED_PES:?}, got {}", self.pes)));
        }
        if self.bank_depth == 0 {
            return Err(EngineError::Config("bank_depth must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, EngineError> {
        let cfg: EngineConfig =
            serde_json::from_str(s).map_err(|e| EngineError::Config(format!("engine config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Effective lanes: a 16-bit PE datapath packs two 8-bit or four 4-bit
/// sub-lanes. The 32-bit reference format occupies one lane per PE.
pub fn precision_pack(format: FxPFormat, cfg: &EngineConfig) -> usize {
    cfg.pes * 16 / (format.total_bits().min(16) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_height: usize,
    pub in_width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn output_dims(&self) -> Option<(usize, usize)> {
        let h = self.in_height + 2 * self.padding;
        let w = self.in_width + 2 * self.padding;
        if self.stride == 0 || self.kernel_h == 0 || self.kernel_w == 0 || self.kernel_h > h || self.kernel_w > w {
            return None;
        }
        Some(((h - self.kernel_h) / self.stride + 1, (w - self.kernel_w) / self.stride + 1))
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn input_len(&self) -> usize {
        self.in_channels * self.in_height * self.in_width
    }
}

/// Im2col: one patch per output position (row-major), each ordered
/// channel, kernel row, kernel column. Padding reads as zero.
pub fn lower_conv<T: Copy>(input: &[T], g: &ConvGeometry, zero: T) -> Vec<Vec<T>> {
    let (oh, ow) = g.output_dims().expect("validated geometry");
    let mut patches = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut patch = Vec::with_capacity(g.patch_len());
            for c in 0..g.in_channels {
                for dy in 0..g.kernel_h {
                    for dx in 0..g.kernel_w {
                        let y = (oy * g.stride + dy) as isize - g.padding as isize;
                        let x = (ox * g.stride + dx) as isize - g.padding as isize;
                        let inside = y >= 0 && x >= 0 && (y as usize) < g.in_height && (x as usize) < g.in_width;
                        patch.push(if inside {
                            input[(c * g.in_height + y as usize) * g.in_width + x as usize]
                        } else {
                            zero
                        });
                    }
                }
            }
            patches.push(patch);
        }
    }
    patches
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolStage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub window: PoolWindow,
    #[serde(default)]
    pub normalize: bool,
}

impl PoolStage {
    pub fn input_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn output_len(&self) -> Result<usize, PoolError> {
        let (oh, ow) = self.window.output_dims(self.height, self.width)?;
        Ok(self.channels * oh * ow)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv(ConvGeometry),
    Pool,
    Activation,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv(_) => "conv",
            LayerKind::Pool => "pool",
            LayerKind::Activation => "activation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub kind: LayerKind,
    pub n_out: usize,
    pub n_in: usize,
    pub format: FxPFormat,
    pub accuracy: Accuracy,
    pub activation: ActivationKind,
    pub pool: Option<PoolStage>,
    /// Weights are stored as `w / 2^weight_exp`.
    pub weight_exp: i32,
    pub bias_exp: i32,
    /// Overrides the cycle-table iteration count for both CORDIC datapaths.
    pub iterations: Option<u32>,
}

impl LayerDescriptor {
    pub fn dense(n_in: usize, n_out: usize, format: FxPFormat, accuracy: Accuracy, activation: ActivationKind) -> Self {
        LayerDescriptor {
            kind: LayerKind::Dense,
            n_out,
            n_in,
            format,
            accuracy,
            activation,
            pool: None,
            weight_exp: 0,
            bias_exp: 0,
            iterations: None,
        }
    }

    pub fn conv(
        geometry: ConvGeometry,
        out_channels: usize,
        format: FxPFormat,
        accuracy: Accuracy,
        activation: ActivationKind,
    ) -> Self {
        LayerDescriptor {
            kind: LayerKind::Conv(geometry),
            n_in: geometry.patch_len(),
            n_out: out_channels,
            ..LayerDescriptor::dense(0, 0, format, accuracy, activation)
        }
    }

    pub fn pool_layer(stage: PoolStage, format: FxPFormat) -> Result<Self, PoolError> {
        Ok(LayerDescriptor {
            kind: LayerKind::Pool,
            n_in: stage.input_len(),
            n_out: stage.output_len()?,
            pool: Some(stage),
            ..LayerDescriptor::dense(0, 0, format, Accuracy::Accurate, ActivationKind::Identity)
        })
    }

    pub fn activation_layer(n: usize, kind: ActivationKind, format: FxPFormat, accuracy: Accuracy) -> Self {
        LayerDescriptor { kind: LayerKind::Activation, ..LayerDescriptor::dense(n, n, format, accuracy, kind) }
    }

    pub fn with_pool(mut self, stage: PoolStage) -> Self {
        self.pool = Some(stage);
        self
    }

    pub fn with_scales(mut self, weight_exp: i32, bias_exp: i32) -> Self {
        self.weight_exp = weight_exp;
        self.bias_exp = bias_exp;
        self
    }

    pub fn with_accuracy(mut self, accuracy: Accuracy) -> Self {
        self.accuracy = accuracy;
        self
    }

    pub fn with_iterations(mut self, iterations: Option<u32>) -> Self {
        self.iterations = iterations;
        self
    }

    pub fn has_params(&self) -> bool {
        matches!(self.kind, LayerKind::Dense | LayerKind::Conv(_))
    }

    pub fn patches(&self) -> usize {
        match self.kind {
            LayerKind::Conv(g) => g.output_dims().map_or(0, |(h, w)| h * w),
            _ => 1,
        }
    }

    pub fn input_len(&self) -> usize {
        match self.kind {
            LayerKind::Conv(g) => g.input_len(),
            _ => self.n_in,
        }
    }

    /// Length before the optional pool stage.
    pub fn compute_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense | LayerKind::Activation => self.n_out,
            LayerKind::Conv(_) => self.n_out * self.patches(),
            LayerKind::Pool => self.n_in,
        }
    }

    pub fn output_len(&self) -> usize {
        match (self.kind, self.pool) {
            (LayerKind::Pool, _) => self.n_out,
            (_, Some(stage)) => stage.output_len().unwrap_or(0),
            (_, None) => self.compute_len(),
        }
    }

    pub fn cycles_per_mac(&self) -> Option<u32> {
        self.iterations.or_else(|| mac_iterations(self.format, self.accuracy))
    }

    pub fn mac_config(&self) -> Result<CordicConfig, EngineError> {
        let cfg = CordicConfig::mac(self.format, self.accuracy)?;
        Ok(match self.iterations {
            Some(n) => cfg.with_iterations(n),
            None => cfg,
        })
    }

    pub fn af_config(&self) -> Result<CordicConfig, EngineError> {
        let cfg = CordicConfig::activation(self.format, self.accuracy)?;
        Ok(match self.iterations {
            Some(n) => cfg.with_iterations(n),
            None => cfg,
        })
    }

    fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if mac_iterations(self.format, self.accuracy).is_none() {
            return bad(format!("{} has no {} mode", self.format, self.accuracy));
        }
        if self.iterations == Some(0) {
            return bad("iterations must be >= 1".into());
        }
        match self.kind {
            LayerKind::Dense if self.n_in == 0 => return bad("dense layer needs n_in >= 1".into()),
            LayerKind::Conv(g) => {
                if g.output_dims().is_none() || g.in_channels == 0 {
                    return bad(format!("invalid convolution geometry {g:?}"));
                }
                if self.n_in != g.patch_len() {
                    return bad(format!("conv n_in {} != patch length {}", self.n_in, g.patch_len()));
                }
            }
            LayerKind::Pool => {
                let Some(stage) = self.pool else { return bad("pool layer without window".into()) };
                if self.activation != ActivationKind::Identity {
                    return bad("pool layer cannot carry an activation".into());
                }
                if stage.input_len() != self.n_in || stage.output_len()? != self.n_out {
                    return bad("pool layer dimensions inconsistent with window".into());
                }
            }
            LayerKind::Activation if self.n_in != self.n_out => {
                return bad("activation layer must preserve length".into())
            }
            _ => {}
        }
        if let (Some(stage), true) = (self.pool, self.kind != LayerKind::Pool) {
            if stage.input_len() != self.compute_len() {
                return bad(format!(
                    "pool stage expects {} values, layer produces {}",
                    stage.input_len(),
                    self.compute_len()
                ));
            }
            stage.output_len()?;
        }
        Ok(())
    }
}

/// Checks per-layer consistency and the input/output chain.
pub fn validate_network(layers: &[LayerDescriptor], input_len: usize) -> Result<(), EngineError> {
    if layers.is_empty() {
        return Err(EngineError::Config("network has no layers".into()));
    }
    let mut prev = input_len;
    for (i, l) in layers.iter().enumerate() {
        l.validate().map_err(|e| e.in_layer(i))?;
        if l.input_len() != prev {
            return Err(EngineError::Config(format!("layer {i} expects {} inputs but receives {prev}", l.input_len())));
        }
        prev = l.output_len();
    }
    Ok(())
}

/// Parameter-bearing layers as an address-map topology.
pub fn network_topology(layers: &[LayerDescriptor]) -> Result<Topology, EngineError> {
    let (n, j): (Vec<usize>, Vec<usize>) = layers.iter().filter(|l| l.has_params()).map(|l| (l.n_out, l.n_in)).unzip();
    Ok(Topology::new(n, j)?)
}

/// Source of quantized parameters, indexed by parameter-layer number.
pub trait ParamStore {
    fn weight(&self, layer: usize, neuron: usize, input: usize) -> Result<FxPValue, EngineError>;
    fn bias(&self, layer: usize, neuron: usize) -> Result<FxPValue, EngineError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerParams {
    pub n_out: usize,
    pub n_in: usize,
    /// Row-major `n_out x n_in`.
    pub weights: Vec<FxPValue>,
    pub biases: Vec<FxPValue>,
}

/// Parameters held directly as tensors.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DenseParams {
    pub layers: Vec<LayerParams>,
}

impl DenseParams {
    /// Reads every parameter of `topology` out of another store.
    pub fn from_store(store: &dyn ParamStore, topology: &Topology) -> Result<Self, EngineError> {
        let mut layers = Vec::with_capacity(topology.layers());
        for l in 0..topology.layers() {
            let (n_out, n_in) = (topology.neurons(l), topology.inputs(l));
            let mut weights = Vec::with_capacity(n_out * n_in);
            let mut biases = Vec::with_capacity(n_out);
            for n in 0..n_out {
                biases.push(store.bias(l, n)?);
                for j in 0..n_in {
                    weights.push(store.weight(l, n, j)?);
                }
            }
            layers.push(LayerParams { n_out, n_in, weights, biases });
        }
        Ok(DenseParams { layers })
    }
}

impl ParamStore for DenseParams {
    fn weight(&self, layer: usize, neuron: usize, input: usize) -> Result<FxPValue, EngineError> {
        self.layers
            .get(layer)
            .filter(|p| neuron < p.n_out && input < p.n_in)
            .map(|p| p.weights[neuron * p.n_in + input])
            .ok_or(EngineError::MissingParam(ParamAddress::weight(layer, neuron, input)))
    }

    fn bias(&self, layer: usize, neuron: usize) -> Result<FxPValue, EngineError> {
        self.layers
            .get(layer)
            .and_then(|p| p.biases.get(neuron).copied())
            .ok_or(EngineError::MissingParam(ParamAddress::bias(layer, neuron)))
    }
}

/// Reads through the address map of a loaded [`ParamMemory`].
pub struct MemoryParams<'a> {
    pub memory: &'a ParamMemory,
    pub topology: Topology,
    pub spec: AddressSpec,
}

impl<'a> MemoryParams<'a> {
    pub fn new(memory: &'a ParamMemory, topology: Topology) -> Self {
        let spec = addr_width(&topology).spec;
        MemoryParams { memory, topology, spec }
    }

    fn read(&self, a: ParamAddress) -> Result<FxPValue, EngineError> {
        let bits = encode(&a, &self.spec, &self.topology).map_err(|_| EngineError::MissingParam(a))?;
        self.memory.read(bits).ok_or(EngineError::MissingParam(a))
    }
}

impl ParamStore for MemoryParams<'_> {
    fn weight(&self, layer: usize, neuron: usize, input: usize) -> Result<FxPValue, EngineError> {
        self.read(ParamAddress::weight(layer, neuron, input))
    }

    fn bias(&self, layer: usize, neuron: usize) -> Result<FxPValue, EngineError> {
        self.read(ParamAddress::bias(layer, neuron))
    }
}

/// One neuron on one PE: `J` CORDIC MACs into a guarded accumulator, then the
/// bias through the accumulator-initialisation port and a single rounding.
pub fn neuron_output(
    desc: &LayerDescriptor,
    param_layer: usize,
    neuron: usize,
    inputs: &[FxPValue],
    params: &dyn ParamStore,
    iterations: u32,
) -> Result<FxPValue, EngineError> {
    let frac = desc.format.frac_bits() + GUARD_BITS;
    let mut acc = 0i64;
    for (j, &a) in inputs.iter().enumerate() {
        let w = params.weight(param_layer, neuron, j)?;
        acc = mul_acc_wide(acc, to_wide(w), to_wide(a), frac, iterations);
    }
    let b = to_wide(params.bias(param_layer, neuron)?);
    let floor = desc.weight_exp.min(desc.bias_exp).min(0);
    let sum = ((acc as i128) << (desc.weight_exp - floor)) + ((b as i128) << (desc.bias_exp - floor));
    let raw = round_shift_right(sum, GUARD_BITS + (-floor) as u32);
    Ok(FxPValue::from_raw_saturating(raw.clamp(i64::MIN as i128, i64::MAX as i128) as i64, desc.format))
}

#[derive(Debug, Clone)]
pub struct LayerRun {
    pub outputs: Vec<FxPValue>,
    pub cycles: LayerCycles,
}

#[derive(Debug, Clone)]
pub struct NetworkRun {
    pub outputs: Vec<FxPValue>,
    pub report: CycleReport,
    pub trace: Vec<TraceEvent>,
}

pub struct Engine {
    cfg: EngineConfig,
}

impl Engine {
    pub fn new(cfg: EngineConfig) -> Result<Self, EngineError> {
        cfg.validate()?;
        Ok(Engine { cfg })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn lanes(&self, format: FxPFormat) -> usize {
        precision_pack(format, &self.cfg)
    }

    /// Executes a validated network on one input vector.
    pub fn run_network(
        &self,
        layers: &[LayerDescriptor],
        input: &[FxPValue],
        params: &dyn ParamStore,
        record_trace: bool,
    ) -> Result<NetworkRun, EngineError> {
        validate_network(layers, input.len())?;
        let max_lanes = layers.iter().map(|l| self.lanes(l.format)).max().unwrap_or(self.cfg.pes);
        let mut control = ControlUnit::new(max_lanes, record_trace);
        let mut report = CycleReport::new(self.cfg.pes);
        let mut current = input.to_vec();
        let mut param_layer = 0;
        for (i, desc) in layers.iter().enumerate() {
            let pl = desc.has_params().then_some(param_layer);
            let last = i + 1 == layers.len();
            let run = self
                .execute(i, pl, desc, &current, params, &mut control, &mut report, last)
                .map_err(|e| e.in_layer(i))?;
            report.push(run.cycles);
            current = run.outputs;
            if desc.has_params() {
                param_layer += 1;
            }
        }
        Ok(NetworkRun { outputs: current, report, trace: control.take_trace() })
    }

    /// Runs a single layer in isolation (its own controller, treated as the
    /// final layer).
    pub fn run_layer(
        &self,
        desc: &LayerDescriptor,
        param_layer: usize,
        input: &[FxPValue],
        params: &dyn ParamStore,
    ) -> Result<(LayerRun, Vec<TraceEvent>), EngineError> {
        desc.validate()?;
        if input.len() != desc.input_len() {
            return Err(EngineError::Config(format!("layer expects {} inputs, got {}", desc.input_len(), input.len())));
        }
        let mut control = ControlUnit::new(self.lanes(desc.format), true);
        let mut report = CycleReport::new(self.cfg.pes);
        let pl = desc.has_params().then_some(param_layer);
        let mut run = self.execute(0, pl, desc, input, params, &mut control, &mut report, true)?;
        run.cycles.finish();
        Ok((run, control.take_trace()))
    }

    #[allow(clippy::too_many_arguments)]
    fn execute(
        &self,
        index: usize,
        param_layer: Option<usize>,
        desc: &LayerDescriptor,
        input: &[FxPValue],
        params: &dyn ParamStore,
        control: &mut ControlUnit,
        report: &mut CycleReport,
        last: bool,
    ) -> Result<LayerRun, EngineError> {
        let lanes = self.lanes(desc.format);
        let input: Vec<FxPValue> = input.iter().map(|v| v.convert(desc.format)).collect();
        let mut cyc = LayerCycles {
            layer: index,
            kind: desc.kind.name().to_string(),
            format: desc.format,
            accuracy: desc.accuracy,
            lanes: lanes as u64,
            batches: 0,
            cycles_per_mac: 0,
            mac_cycles: 0,
            bias_cycles: 0,
            af_cycles: 0,
            af_busy_cycles: 0,
            pool_cycles: 0,
            control_cycles: 1,
            mac_ops: 0,
            active_lane_cycles: 0,
            lane_capacity_cycles: 0,
            total: 0,
        };
        let inputs_per_neuron = if desc.has_params() { desc.n_in } else { 0 };
        control.step(FsmEvent::LayerStart { layer: index, inputs: inputs_per_neuron })?;
        control.cycle += 1;

        let af_cfg = desc.af_config()?;
        let mut values = match (desc.kind, param_layer) {
            (LayerKind::Dense | LayerKind::Conv(_), Some(pl)) => {
                self.compute_macs(desc, pl, &input, params, lanes, af_cfg, control, report, &mut cyc)?
            }
            (LayerKind::Activation, _) => {
                let (out, af) = activation::apply(&AfRequest { values: &input, kind: desc.activation, cfg: af_cfg })?;
                cyc.af_busy_cycles += af.cycles_total;
                cyc.af_cycles += af.cycles_total;
                report.af.merge(&af);
                out
            }
            (LayerKind::Pool, _) => input,
            _ => return Err(EngineError::Config("parameter layer without parameters".into())),
        };
        control.cycle += cyc.af_cycles;

        if let Some(stage) = desc.pool {
            let map = FeatureMap::new(stage.channels, stage.height, stage.width, values)?;
            let (pooled, pr) = pooling::pool(&map, &stage.window, self.cfg.pool_variant)?;
            let pooled = if stage.normalize { pooling::normalize(&pooled) } else { pooled };
            cyc.pool_cycles += pr.cycles;
            control.cycle += pr.cycles;
            values = pooled.into_data();
        }
        control.step(FsmEvent::LayerComplete { last })?;
        Ok(LayerRun { outputs: values, cycles: cyc })
    }

    #[allow(clippy::too_many_arguments)]
    fn compute_macs(
        &self,
        desc: &LayerDescriptor,
        param_layer: usize,
        input: &[FxPValue],
        params: &dyn ParamStore,
        lanes: usize,
        af_cfg: CordicConfig,
        control: &mut ControlUnit,
        report: &mut CycleReport,
        cyc: &mut LayerCycles,
    ) -> Result<Vec<FxPValue>, EngineError> {
        let iterations = desc.mac_config()?.iterations;
        let c = iterations as u64;
        cyc.cycles_per_mac = c;
        let patches = match desc.kind {
            LayerKind::Conv(g) => lower_conv(input, &g, FxPValue::zero(desc.format)),
            _ => vec![input.to_vec()],
        };
        let n_patches = patches.len();
        let tiles = desc.n_in.div_ceil(self.cfg.bank_depth) as u64;
        let refill = if tiles > 1 { tiles } else { 0 };
        let softmax = desc.activation == ActivationKind::Softmax;

        let mut pre = vec![FxPValue::zero(desc.format); desc.n_out * n_patches];
        let mut post = pre.clone();
        let mut batch_mac = Vec::new();
        let mut batch_af = Vec::new();
        for (p, patch) in patches.iter().enumerate() {
            for start in (0..desc.n_out).step_by(lanes.max(1)) {
                let active = lanes.min(desc.n_out - start);
                control.step(FsmEvent::BatchStart { active })?;
                for _ in 0..desc.n_in {
                    control.step(FsmEvent::MacIssue)?;
                    control.cycle += c;
                }
                let mut outs = Vec::with_capacity(active);
                for neuron in start..start + active {
                    let v = neuron_output(desc, param_layer, neuron, patch, params, iterations)?;
                    pre[neuron * n_patches + p] = v;
                    outs.push(v);
                }
                control.step(FsmEvent::Drain)?;

                let mac = desc.n_in as u64 * c;
                cyc.batches += 1;
                cyc.mac_cycles += mac;
                cyc.bias_cycles += 1;
                cyc.control_cycles += refill;
                control.cycle += 1 + refill;
                cyc.mac_ops += (active * desc.n_in) as u64;
                cyc.active_lane_cycles += active as u64 * mac;
                cyc.lane_capacity_cycles += lanes as u64 * mac;
                for busy in report.pe_busy_cycles.iter_mut().take(active.min(self.cfg.pes)) {
                    *busy += mac;
                }
                batch_mac.push(mac + 1 + refill);

                if !softmax {
                    let (vals, af) =
                        activation::apply(&AfRequest { values: &outs, kind: desc.activation, cfg: af_cfg })?;
                    for (k, v) in vals.into_iter().enumerate() {
                        post[(start + k) * n_patches + p] = v;
                    }
                    batch_af.push(af.cycles_total);
                    cyc.af_busy_cycles += af.cycles_total;
                    report.af.merge(&af);
                }
            }
        }
        if softmax {
            let (vals, af) = activation::apply(&AfRequest { values: &pre, kind: desc.activation, cfg: af_cfg })?;
            post = vals;
            cyc.af_busy_cycles += af.cycles_total;
            cyc.af_cycles += af.cycles_total;
            report.af.merge(&af);
        } else if self.cfg.overlap_af {
            cyc.af_cycles += cycles::exposed_af(&batch_mac, &batch_af);
        } else {
            cyc.af_cycles += batch_af.iter().sum::<u64>();
        }
        Ok(post)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fmt(bits: u32, frac: u32) -> FxPFormat {
        FxPFormat::new(bits, frac).unwrap()
    }

    fn random_params(rng: &mut ChaCha8Rng, layers: &[LayerDescriptor]) -> DenseParams {
        let layers = layers
            .iter()
            .filter(|l| l.has_params())
            .map(|l| {
                let q = |rng: &mut ChaCha8Rng| FxPValue::quantize(rng.gen_range(-0.9..0.9), l.format);
                LayerParams {
                    n_out: l.n_out,
                    n_in: l.n_in,
                    weights: (0..l.n_out * l.n_in).map(|_| q(rng)).collect(),
                    biases: (0..l.n_out).map(|_| q(rng)).collect(),
                }
            })
            .collect();
        DenseParams { layers }
    }

    fn random_input(rng: &mut ChaCha8Rng, n: usize, f: FxPFormat) -> Vec<FxPValue> {
        (0..n).map(|_| FxPValue::quantize(rng.gen_range(-1.0..1.0), f)).collect()
    }

    fn engine(pes: usize) -> Engine {
        Engine::new(EngineConfig::default().with_pes(pes)).unwrap()
    }

    #[test]
    fn packing_examples() {
        let cfg = EngineConfig::default();
        assert_eq!(precision_pack(FxPFormat::FXP16, &cfg), 64);
        assert_eq!(precision_pack(FxPFormat::FXP8, &cfg), 128);
        assert_eq!(precision_pack(FxPFormat::FXP4, &cfg), 256);
        assert_eq!(precision_pack(fmt(32, 28), &cfg), 64);
    }

    #[test]
    fn config_json() {
        let cfg = EngineConfig::from_json(r#"{"pes": 128, "default_format": "fxp16", "overlap_af": false}"#).unwrap();
        assert_eq!((cfg.pes, cfg.bank_depth, cfg.overlap_af), (128, 32, false));
        assert_eq!(cfg.default_format, FxPFormat::FXP16);
        assert!(EngineConfig::from_json(r#"{"pes": 100}"#).is_err());
        assert!(EngineConfig::from_json(r#"{"pez": 64}"#).is_err());
    }

    #[test]
    fn mac_cycle_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Dense 10 neurons, fxp8 accurate, 32 inputs: one batch of 32 MACs at 5 cycles.
        let d = LayerDescriptor::dense(32, 10, FxPFormat::FXP8, Accuracy::Accurate, ActivationKind::Relu);
        let p = random_params(&mut rng, &[d]);
        let x = random_input(&mut rng, 32, d.format);
        let (run, trace) = engine(64).run_layer(&d, 0, &x, &p).unwrap();
        assert_eq!(run.cycles.mac_cycles, 160);
        assert!(check_trace(&trace).is_empty());
        // 256 neurons, 64 PEs, fxp16 approx, 16 inputs.
        let d = LayerDescriptor::dense(16, 256, FxPFormat::FXP16, Accuracy::Approximate, ActivationKind::Identity);
        let p = random_params(&mut rng, &[d]);
        let x = random_input(&mut rng, 16, d.format);
        let (run, _) = engine(64).run_layer(&d, 0, &x, &p).unwrap();
        assert_eq!(run.cycles.mac_cycles, 448);
        assert_eq!(run.cycles.batches, 4);
        // Zero outputs.
        let d = LayerDescriptor::dense(4, 0, FxPFormat::FXP8, Accuracy::Accurate, ActivationKind::Relu);
        let p = DenseParams { layers: vec![LayerParams { n_out: 0, n_in: 4, weights: vec![], biases: vec![] }] };
        let (run, _) = engine(64).run_layer(&d, 0, &random_input(&mut rng, 4, d.format), &p).unwrap();
        assert!(run.outputs.is_empty());
        assert_eq!(run.cycles.mac_cycles, 0);
    }

    #[test]
    fn refill_and_bias_accounting() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = LayerDescriptor::dense(70, 200, FxPFormat::FXP16, Accuracy::Accurate, ActivationKind::Identity);
        let p = random_params(&mut rng, &[d]);
        let (run, _) = engine(64).run_layer(&d, 0, &random_input(&mut rng, 70, d.format), &p).unwrap();
        let c = run.cycles;
        assert_eq!(c.batches, 4);
        assert_eq!(c.mac_cycles, 4 * 70 * 9);
        assert_eq!(c.bias_cycles, 4);
        assert_eq!(c.control_cycles, 1 + 4 * 3);
        assert_eq!(c.af_busy_cycles, 0);
        assert_eq!(c.total, c.mac_cycles + c.bias_cycles + c.af_cycles + c.pool_cycles + c.control_cycles);
    }

    #[test]
    fn identity_network_passes_relu_of_input() {
        let f = fmt(16, 12);
        let d = LayerDescriptor::dense(6, 6, f, Accuracy::Accurate, ActivationKind::Relu);
        let one = FxPValue::quantize(1.0, f);
        let zero = FxPValue::zero(f);
        let weights = (0..36).map(|i| if i / 6 == i % 6 { one } else { zero }).collect();
        let p = DenseParams { layers: vec![LayerParams { n_out: 6, n_in: 6, weights, biases: vec![zero; 6] }] };
        let x: Vec<FxPValue> = [-0.75, -0.1, 0.0, 0.2, 0.5, 0.999].iter().map(|&v| FxPValue::quantize(v, f)).collect();
        let run = engine(64).run_network(&[d], &x, &p, true).unwrap();
        for (o, i) in run.outputs.iter().zip(&x) {
            let expect = i.to_f64().max(0.0);
            assert!((o.to_f64() - expect).abs() <= 2.0f64.powi(-8), "{} vs {expect}", o.to_f64());
        }
        assert!(check_trace(&run.trace).is_empty());
        assert_eq!(run.trace.last().unwrap().signal, Signal::DNNDone);
    }

    fn mlp() -> Vec<LayerDescriptor> {
        let f8 = fmt(8, 5);
        vec![
            LayerDescriptor::dense(196, 64, f8, Accuracy::Accurate, ActivationKind::Relu),
            LayerDescriptor::dense(64, 32, f8, Accuracy::Approximate, ActivationKind::Tanh),
            LayerDescriptor::dense(32, 32, fmt(16, 12), Accuracy::Accurate, ActivationKind::Sigmoid).with_scales(1, -1),
            LayerDescriptor::dense(32, 10, fmt(16, 12), Accuracy::Approximate, ActivationKind::Softmax),
        ]
    }

    #[test]
    fn network_composes_layers_and_is_lane_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layers = mlp();
        let p = random_params(&mut rng, &layers);
        let x = random_input(&mut rng, 196, layers[0].format);
        let full = engine(64).run_network(&layers, &x, &p, true).unwrap();
        assert!(check_trace(&full.trace).is_empty());

        let mut cur = x.clone();
        for (i, l) in layers.iter().enumerate() {
            cur = engine(64).run_layer(l, i, &cur, &p).unwrap().0.outputs;
        }
        assert_eq!(cur, full.outputs);

        for pes in [128, 256] {
            let other = engine(pes).run_network(&layers, &x, &p, false).unwrap();
            assert_eq!(other.outputs, full.outputs);
            assert!(other.report.total_cycles <= full.report.total_cycles);
        }
        let again = engine(64).run_network(&layers, &x, &p, true).unwrap();
        assert_eq!(again.report, full.report);
        assert_eq!(again.trace, full.trace);
    }

    #[test]
    fn closed_form_mac_cycles_and_totals() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layers = mlp();
        let p = random_params(&mut rng, &layers);
        let x = random_input(&mut rng, 196, layers[0].format);
        for pes in SUPPORTED_PES {
            let e = engine(pes);
            let r = e.run_network(&layers, &x, &p, false).unwrap().report;
            for (l, c) in layers.iter().zip(&r.per_layer) {
                let lanes = e.lanes(l.format);
                let expect = l.n_out.div_ceil(lanes) * l.n_in * l.cycles_per_mac().unwrap() as usize;
                assert_eq!(c.mac_cycles, expect as u64);
            }
            let sum: u64 = r.per_layer.iter().map(|l| l.total).sum();
            assert_eq!(sum, r.total_cycles);
            assert_eq!(
                r.total_cycles,
                r.mac_cycles + r.bias_cycles + r.af_cycles + r.pool_cycles + r.control_overhead_cycles
            );
            assert!((r.effective_macs_per_cycle - r.mac_ops as f64 / r.total_cycles as f64).abs() < 1e-12);
            assert!(r.lane_occupancy > 0.0 && r.lane_occupancy <= 1.0);
        }
    }

    #[test]
    fn idle_pes_accumulate_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = LayerDescriptor::dense(8, 10, FxPFormat::FXP16, Accuracy::Accurate, ActivationKind::Identity);
        let p = random_params(&mut rng, &[d]);
        let run = engine(64).run_network(&[d], &random_input(&mut rng, 8, d.format), &p, false).unwrap();
        let busy = &run.report.pe_busy_cycles;
        assert!(busy[..10].iter().all(|&b| b == 72));
        assert!(busy[10..].iter().all(|&b| b == 0));
    }

    #[test]
    fn overlap_hides_af_and_softmax_does_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = LayerDescriptor::dense(40, 300, FxPFormat::FXP16, Accuracy::Accurate, ActivationKind::Tanh);
        let p = random_params(&mut rng, &[d]);
        let x = random_input(&mut rng, 40, d.format);
        let on = engine(64).run_network(&[d], &x, &p, false).unwrap();
        let cfg = EngineConfig { overlap_af: false, ..EngineConfig::default() };
        let off = Engine::new(cfg).unwrap().run_network(&[d], &x, &p, false).unwrap();
        assert_eq!(on.outputs, off.outputs);
        assert_eq!(on.report.af_busy_cycles, off.report.af_busy_cycles);
        assert_eq!(off.report.af_cycles, off.report.af_busy_cycles);
        assert!(on.report.af_cycles < off.report.af_cycles);

        let s = LayerDescriptor::dense(40, 10, FxPFormat::FXP16, Accuracy::Accurate, ActivationKind::Softmax);
        let p = random_params(&mut rng, &[s]);
        let r = engine(64).run_network(&[s], &x, &p, false).unwrap().report;
        assert_eq!(r.af_cycles, r.af_busy_cycles);
        assert!(r.af_cycles > 0);
    }

    #[test]
    fn memory_backed_params_match_direct() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let layers = mlp();
        let p = random_params(&mut rng, &layers);
        let topo = network_topology(&layers).unwrap();
        let spec = addr_width(&topo).spec;
        let words = crate::memmap::lifo_write_order(&topo, &spec, |a| {
            if a.is_bias {
                p.bias(a.layer, a.neuron).unwrap()
            } else {
                p.weight(a.layer, a.neuron, a.input).unwrap()
            }
        })
        .unwrap();
        let mem = crate::memmap::lifo_load(&words, &topo, &spec).unwrap();
        let store = MemoryParams::new(&mem, topo.clone());
        let x = random_input(&mut rng, 196, layers[0].format);
        let a = engine(64).run_network(&layers, &x, &p, false).unwrap();
        let b = engine(64).run_network(&layers, &x, &store, false).unwrap();
        assert_eq!(a.outputs, b.outputs);
        assert_eq!(DenseParams::from_store(&store, &topo).unwrap(), p);
    }

    #[test]
    fn conv_and_pool_layers() {
        let f = fmt(16, 12);
        let g =
            ConvGeometry { in_channels: 1, in_height: 4, in_width: 4, kernel_h: 3, kernel_w: 3, stride: 1, padding: 1 };
        let conv = LayerDescriptor::conv(g, 2, f, Accuracy::Accurate, ActivationKind::Relu).with_pool(PoolStage {
            channels: 2,
            height: 4,
            width: 4,
            window: PoolWindow::new(2, 2, 2),
            normalize: false,
        });
        assert_eq!((conv.n_in, conv.compute_len(), conv.output_len()), (9, 32, 8));
        let head = LayerDescriptor::dense(8, 3, f, Accuracy::Accurate, ActivationKind::Identity);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layers = [conv, head];
        let p = random_params(&mut rng, &layers);
        let x = random_input(&mut rng, 16, f);
        let run = engine(64).run_network(&layers, &x, &p, true).unwrap();
        assert_eq!(run.outputs.len(), 3);
        assert_eq!(run.report.per_layer[0].mac_cycles, 16 * 9 * 9);
        assert!(run.report.pool_cycles > 0);

        // Lowering oracle: a centre-tap kernel reproduces the input.
        let patches = lower_conv(&x, &g, FxPValue::zero(f));
        assert_eq!(patches.len(), 16);
        for (i, patch) in patches.iter().enumerate() {
            assert_eq!(patch[4], x[i]);
        }
        assert!(patches[0][0].is_zero());

        let pool = LayerDescriptor::pool_layer(
            PoolStage { channels: 1, height: 4, width: 4, window: PoolWindow::new(2, 2, 2), normalize: true },
            f,
        )
        .unwrap();
        let run = engine(64).run_network(&[pool], &x, &p, false).unwrap();
        assert_eq!(run.outputs.len(), 4);
        assert_eq!(run.report.mac_cycles, 0);
    }

    #[test]
    fn configuration_errors() {
        let e = engine(64);
        let p = DenseParams::default();
        let bad = LayerDescriptor::dense(4, 2, FxPFormat::FXP4, Accuracy::Approximate, ActivationKind::Relu);
        let err = e.run_network(&[bad], &[FxPValue::zero(FxPFormat::FXP4); 4], &p, false).unwrap_err();
        assert!(err.is_config(), "{err}");
        let a = LayerDescriptor::dense(4, 3, FxPFormat::FXP8, Accuracy::Accurate, ActivationKind::Relu);
        let b = LayerDescriptor::dense(5, 2, FxPFormat::FXP8, Accuracy::Accurate, ActivationKind::Relu);
        let err = e.run_network(&[a, b], &[FxPValue::zero(FxPFormat::FXP8); 4], &p, false).unwrap_err();
        assert!(err.is_config());
        assert!(Engine::new(EngineConfig::default().with_pes(32)).is_err());
    }
}
