//! Model ingestion, float reference, power-of-two quantization, evaluation
//! and the per-layer accuracy-sensitivity heuristic.

pub mod dataset;
pub mod model;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::{self, reference_softmax, ActivationKind, AfRequest};
use crate::cordic::{mac_iterations, Accuracy, CordicConfig};
use crate::engine::{
    lower_conv, network_topology, CycleReport, DenseParams, Engine, EngineError, LayerDescriptor, LayerKind,
    LayerParams, PoolStage,
};
use crate::fxp::{FxPFormat, FxPValue};
use crate::memmap::{addr_width, lifo_write_order, AddressSpec, LoadWord, MemmapError, ParamImage, Topology};
use crate::pooling::reference_aad;

pub use dataset::{Dataset, DatasetManifest, SampleType};
pub use model::{read_tensors, write_tensors, FloatParams, ModelSpec, Tensor};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("model: {0}")]
    Model(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Memmap(#[from] MemmapError),
}

impl RunnerError {
    pub fn is_config(&self) -> bool {
        match self {
            RunnerError::Model(_) | RunnerError::Dataset(_) => true,
            RunnerError::Engine(e) => e.is_config(),
            RunnerError::Memmap(_) => false,
        }
    }
}

fn apply_float_activation(kind: ActivationKind, v: Vec<f64>) -> Vec<f64> {
    match kind {
        ActivationKind::Softmax => reference_softmax(&v),
        k => v.into_iter().map(|x| k.reference(x)).collect(),
    }
}

fn float_pool(v: &[f64], stage: &PoolStage) -> Vec<f64> {
    let (oh, ow) = stage.window.output_dims(stage.height, stage.width).expect("validated");
    let w = stage.window;
    let mut out = Vec::with_capacity(stage.channels * oh * ow);
    for c in 0..stage.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut win = Vec::with_capacity(w.elements());
                for dy in 0..w.window_h {
                    for dx in 0..w.window_w {
                        win.push(v[(c * stage.height + oy * w.stride + dy) * stage.width + ox * w.stride + dx]);
                    }
                }
                out.push(reference_aad(&win));
            }
        }
    }
    if stage.normalize {
        let m = out.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if m > 1.0 {
            let scale = 2f64.powi(m.log2().ceil() as i32);
            out.iter_mut().for_each(|x| *x /= scale);
        }
    }
    out
}

/// Double-precision forward pass with the same operator semantics.
pub fn run_float(model: &ModelSpec, input: &[f64]) -> Vec<f64> {
    let mut cur = input.to_vec();
    let mut params = model.params.iter();
    for l in &model.layers {
        cur = match l.kind {
            LayerKind::Dense | LayerKind::Conv(_) => {
                let p = params.next().expect("validated model");
                let patches: Vec<Vec<f64>> = match l.kind {
                    LayerKind::Conv(g) => lower_conv(&cur, &g, 0.0),
                    _ => vec![cur.clone()],
                };
                let np = patches.len();
                let mut out = vec![0.0; l.n_out * np];
                for (pi, patch) in patches.iter().enumerate() {
                    for n in 0..l.n_out {
                        let row = &p.weights[n * l.n_in..(n + 1) * l.n_in];
                        out[n * np + pi] = row.iter().zip(patch).map(|(w, x)| w * x).sum::<f64>() + p.biases[n];
                    }
                }
                let out = apply_float_activation(l.activation, out);
                match l.pool {
                    Some(stage) => float_pool(&out, &stage),
                    None => out,
                }
            }
            LayerKind::Activation => apply_float_activation(l.activation, cur),
            LayerKind::Pool => float_pool(&cur, &l.pool.expect("validated")),
        };
    }
    cur
}

/// Smallest `e` with `2^e >= m`; 0 for `m == 0`.
pub fn pow2_exponent(m: f64) -> i32 {
    if m <= 0.0 {
        return 0;
    }
    let mut e = m.log2().ceil() as i32;
    while 2f64.powi(e) < m {
        e += 1;
    }
    while 2f64.powi(e - 1) >= m {
        e -= 1;
    }
    e
}

/// Symmetric per-tensor quantization with a power-of-two scale covering
/// `max |x|`. Returns the stored values and the exponent.
pub fn quantize_tensor(values: &[f64], format: FxPFormat) -> (Vec<FxPValue>, i32) {
    let m = values.iter().fold(0.0f64, |a, x| a.max(x.abs()));
    let e = pow2_exponent(m);
    let scale = 2f64.powi(-e);
    (values.iter().map(|&x| FxPValue::quantize(x * scale, format)).collect(), e)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub name: String,
    pub layers: Vec<LayerDescriptor>,
    pub params: DenseParams,
}

pub fn quantize_model(model: &ModelSpec) -> QuantizedModel {
    let mut layers = model.layers.clone();
    let mut params = DenseParams::default();
    let mut fp = model.params.iter();
    for l in layers.iter_mut().filter(|l| l.has_params()) {
        let p = fp.next().expect("validated model");
        let (weights, we) = quantize_tensor(&p.weights, l.format);
        let (biases, be) = quantize_tensor(&p.biases, l.format);
        l.weight_exp = we;
        l.bias_exp = be;
        params.layers.push(LayerParams { n_out: l.n_out, n_in: l.n_in, weights, biases });
    }
    QuantizedModel { name: model.name.clone(), layers, params }
}

impl QuantizedModel {
    pub fn topology(&self) -> Topology {
        network_topology(&self.layers).expect("validated model")
    }

    /// Parameter stream in LIFO write order.
    pub fn load_stream(&self) -> Result<(Topology, AddressSpec, Vec<LoadWord>), RunnerError> {
        let t = self.topology();
        let spec = addr_width(&t).spec;
        let p = &self.params;
        let words = lifo_write_order(&t, &spec, |a| {
            let lp = &p.layers[a.layer];
            if a.is_bias {
                lp.biases[a.neuron]
            } else {
                lp.weights[a.neuron * lp.n_in + a.input]
            }
        })?;
        Ok((t, spec, words))
    }

    pub fn param_image(&self) -> Result<ParamImage, RunnerError> {
        let (_, spec, words) = self.load_stream()?;
        Ok(ParamImage::from_words(&words, &spec))
    }

    pub fn param_formats(&self) -> Vec<FxPFormat> {
        self.layers.iter().filter(|l| l.has_params()).map(|l| l.format).collect()
    }

    pub fn input_format(&self) -> FxPFormat {
        self.layers[0].format
    }

    pub fn quantize_input(&self, x: &[f64]) -> Vec<FxPValue> {
        let f = self.input_format();
        x.iter().map(|&v| FxPValue::quantize(v, f)).collect()
    }
}

/// Index of the first maximum.
pub fn argmax<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloatReference {
    pub predictions: Vec<u32>,
    pub accuracy: f64,
}

pub fn float_reference(model: &ModelSpec, data: &Dataset) -> FloatReference {
    let predictions: Vec<u32> = data.samples.par_iter().map(|x| argmax(&run_float(model, x)) as u32).collect();
    let accuracy = accuracy_pct(&predictions, &data.labels);
    FloatReference { predictions, accuracy }
}

fn accuracy_pct(pred: &[u32], labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    100.0 * hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub label: u32,
    pub float: u32,
    pub fxp: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub model: String,
    pub samples: usize,
    pub modes: Vec<Accuracy>,
    pub formats: Vec<FxPFormat>,
    pub float_accuracy: f64,
    pub fxp_accuracy: f64,
    pub accuracy_delta: f64,
    /// Binomial standard error of `fxp_accuracy`, in points.
    pub fxp_stderr: f64,
    pub top1_agreement: f64,
    pub cycles_per_inference: u64,
    pub total_cycles: u64,
    pub effective_macs_per_cycle: f64,
    pub cycle_report: CycleReport,
    pub predictions: Vec<SamplePrediction>,
}

/// Runs every sample through the engine. Per-sample work is parallel; results
/// are gathered in dataset order.
pub fn evaluate(
    q: &QuantizedModel,
    data: &Dataset,
    reference: &FloatReference,
    engine: &Engine,
) -> Result<EvalResult, RunnerError> {
    let runs: Vec<(u32, CycleReport)> = data
        .samples
        .par_iter()
        .map(|x| {
            let run = engine.run_network(&q.layers, &q.quantize_input(x), &q.params, false)?;
            let raws: Vec<i32> = run.outputs.iter().map(|v| v.raw()).collect();
            Ok((argmax(&raws) as u32, run.report))
        })
        .collect::<Result<_, EngineError>>()?;
    let fxp: Vec<u32> = runs.iter().map(|(p, _)| *p).collect();
    let fxp_accuracy = accuracy_pct(&fxp, &data.labels);
    let n = data.len();
    let agree = fxp.iter().zip(&reference.predictions).filter(|(a, b)| a == b).count();
    let total_cycles: u64 = runs.iter().map(|(_, r)| r.total_cycles).sum();
    let cycle_report = runs.first().map(|(_, r)| r.clone()).unwrap_or_default();
    let p = fxp_accuracy / 100.0;
    Ok(EvalResult {
        model: q.name.clone(),
        samples: n,
        modes: q.layers.iter().map(|l| l.accuracy).collect(),
        formats: q.layers.iter().map(|l| l.format).collect(),
        float_accuracy: reference.accuracy,
        fxp_accuracy,
        accuracy_delta: fxp_accuracy - reference.accuracy,
        fxp_stderr: if n == 0 { 0.0 } else { 100.0 * (p * (1.0 - p) / n as f64).sqrt() },
        top1_agreement: if n == 0 { 0.0 } else { 100.0 * agree as f64 / n as f64 },
        cycles_per_inference: cycle_report.total_cycles,
        total_cycles,
        effective_macs_per_cycle: cycle_report.effective_macs_per_cycle,
        cycle_report,
        predictions: data
            .labels
            .iter()
            .zip(&reference.predictions)
            .zip(&fxp)
            .map(|((&label, &float), &fxp)| SamplePrediction { label, float, fxp })
            .collect(),
    })
}

/// Quantizes `model` and evaluates it in one step.
pub fn evaluate_model(
    model: &ModelSpec,
    data: &Dataset,
    reference: &FloatReference,
    engine: &Engine,
) -> Result<EvalResult, RunnerError> {
    evaluate(&quantize_model(model), data, reference, engine)
}

/// Whether a layer has a selectable approximate mode that changes its cost.
pub fn approximable(layer: &LayerDescriptor) -> bool {
    layer.kind != LayerKind::Pool && mac_iterations(layer.format, Accuracy::Approximate).is_some()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub layer: usize,
    pub kind: String,
    /// Accuracy lost (points) with only this layer approximate; `None` when
    /// the layer has no approximate mode.
    pub drop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub baseline_accuracy: f64,
    pub samples: usize,
    pub threshold: f64,
    pub per_layer: Vec<LayerSensitivity>,
    pub assignment: Vec<Accuracy>,
}

pub const DEFAULT_SENSITIVITY_THRESHOLD: f64 = 0.5;

/// One-layer-at-a-time scan against the all-accurate baseline. Layers whose
/// drop exceeds `threshold` stay accurate; negative drops count as zero.
pub fn sensitivity_scan(
    model: &ModelSpec,
    data: &Dataset,
    engine: &Engine,
    threshold: f64,
) -> Result<SensitivityReport, RunnerError> {
    let reference = float_reference(model, data);
    let all_acc = vec![Accuracy::Accurate; model.layers.len()];
    let baseline = evaluate_model(&model.with_modes(&all_acc), data, &reference, engine)?.fxp_accuracy;
    let mut per_layer = Vec::new();
    let mut assignment = all_acc.clone();
    for (i, l) in model.layers.iter().enumerate() {
        let drop = if approximable(l) {
            let mut modes = all_acc.clone();
            modes[i] = Accuracy::Approximate;
            let acc = evaluate_model(&model.with_modes(&modes), data, &reference, engine)?.fxp_accuracy;
            Some(baseline - acc)
        } else {
            None
        };
        if let Some(d) = drop {
            if d.max(0.0) <= threshold {
                assignment[i] = Accuracy::Approximate;
            }
        }
        per_layer.push(LayerSensitivity { layer: i, kind: l.kind.name().into(), drop });
    }
    Ok(SensitivityReport { baseline_accuracy: baseline, samples: data.len(), threshold, per_layer, assignment })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepAxis {
    Iterations,
    Precision,
    Pes,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "iterations" => Ok(SweepAxis::Iterations),
            "precision" => Ok(SweepAxis::Precision),
            "pes" => Ok(SweepAxis::Pes),
            other => Err(format!("unknown sweep axis {other:?} (iterations, precision, pes)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: String,
    pub accuracy: f64,
    pub total_cycles: u64,
    pub effective_macs_per_cycle: f64,
    pub tanh_max_err: Option<f64>,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("point,accuracy,total_cycles,effective_macs_per_cycle,tanh_max_err\n");
    for r in rows {
        let err = r.tanh_max_err.map(|e| format!("{e:.9}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{:.4},{},{:.6},{}\n",
            r.point, r.accuracy, r.total_cycles, r.effective_macs_per_cycle, err
        ));
    }
    s
}

pub const TANH_BENCH_POINTS: usize = 1024;

/// Max |tanh error| over a uniform grid on [-4, 4] at the given depth, at
/// 32-bit width so the output rounding does not mask convergence.
pub fn tanh_max_error(iterations: u32) -> f64 {
    let format = FxPFormat::new(32, 27).expect("valid format");
    let cfg = CordicConfig::activation(format, Accuracy::Accurate).expect("supported").with_iterations(iterations);
    let xs: Vec<FxPValue> = (0..TANH_BENCH_POINTS)
        .map(|i| FxPValue::quantize(-4.0 + 8.0 * i as f64 / (TANH_BENCH_POINTS - 1) as f64, format))
        .collect();
    let (ys, _) = activation::apply(&AfRequest { values: &xs, kind: ActivationKind::Tanh, cfg }).expect("in range");
    xs.iter().zip(&ys).map(|(x, y)| (y.to_f64() - x.to_f64().tanh()).abs()).fold(0.0, f64::max)
}

/// Evaluates the model at each point of a sweep axis.
pub fn sweep(
    model: &ModelSpec,
    data: &Dataset,
    base: &crate::engine::EngineConfig,
    axis: SweepAxis,
) -> Result<Vec<SweepRow>, RunnerError> {
    let reference = float_reference(model, data);
    let row = |point: String, m: &ModelSpec, cfg: crate::engine::EngineConfig, tanh: Option<f64>| {
        let engine = Engine::new(cfg)?;
        let r = evaluate_model(m, data, &reference, &engine)?;
        Ok::<_, RunnerError>(SweepRow {
            point,
            accuracy: r.fxp_accuracy,
            total_cycles: r.cycles_per_inference,
            effective_macs_per_cycle: r.effective_macs_per_cycle,
            tanh_max_err: tanh,
        })
    };
    match axis {
        SweepAxis::Precision => [16u32, 8, 4]
            .iter()
            .map(|&bits| {
                let m = model.retarget(bits)?.with_modes(&vec![Accuracy::Accurate; model.layers.len()]);
                row(format!("fxp{bits}"), &m, *base, None)
            })
            .collect(),
        SweepAxis::Pes => crate::engine::SUPPORTED_PES
            .iter()
            .map(|&pes| row(format!("{pes}"), model, base.with_pes(pes), None))
            .collect(),
        SweepAxis::Iterations => (1..=16u32)
            .map(|n| {
                let mut m = model.clone();
                m.layers.iter_mut().for_each(|l| l.iterations = Some(n));
                row(format!("{n}"), &m, *base, Some(tanh_max_error(n)))
            })
            .collect(),
    }
}
