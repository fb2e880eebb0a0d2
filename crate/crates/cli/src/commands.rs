use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use cordic_ve_core::engine::control::{check_trace, trace_to_csv};
use cordic_ve_core::engine::{DenseParams, MemoryParams};
use cordic_ve_core::memmap::{addr_width, lifo_load, ParamImage};
use cordic_ve_core::runner::{
    approximable, evaluate, float_reference, quantize_model, sensitivity_scan, sweep_csv, SweepAxis,
};
use cordic_ve_core::{
    Accuracy, Dataset, Engine, EngineConfig, EvalResult, ModelSpec, QuantizedModel, RunnerError, SensitivityReport,
};

use crate::{Common, LoadimgArgs, RunArgs, SweepArgs};

pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T> = Result<T, Failure>;

fn config(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

impl From<RunnerError> for Failure {
    fn from(e: RunnerError) -> Self {
        if e.is_config() {
            config(e)
        } else {
            runtime(e)
        }
    }
}

/// Applies `CORVET_THREADS` to the global rayon pool.
pub fn init_threads() -> Outcome<()> {
    let Ok(v) = std::env::var("CORVET_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config(anyhow!("CORVET_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(runtime)
}

/// Writes through a temporary sibling and renames into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Outcome<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    std::fs::write(&tmp, bytes)
        .and_then(|()| std::fs::rename(&tmp, path))
        .with_context(|| format!("writing {}", path.display()))
        .map_err(|e| {
            let _ = std::fs::remove_file(&tmp);
            runtime(e)
        })
}

fn prepare_out(dir: &Path) -> Outcome<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).map_err(config)
}

fn load_engine_config(path: Option<&Path>) -> Outcome<EngineConfig> {
    let Some(p) = path else { return Ok(EngineConfig::default()) };
    let text = std::fs::read_to_string(p).with_context(|| p.display().to_string()).map_err(config)?;
    EngineConfig::from_json(&text).with_context(|| p.display().to_string()).map_err(config)
}

fn load_dataset(path: &Path, samples: Option<usize>, seed: u64) -> Outcome<Dataset> {
    let data = Dataset::load(path)?;
    if data.is_empty() {
        return Err(config(anyhow!("{}: dataset is empty", path.display())));
    }
    Ok(match samples {
        Some(0) => return Err(config(anyhow!("--samples must be at least 1"))),
        Some(k) if k < data.len() => {
            let mut idx: Vec<usize> = (0..data.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.truncate(k);
            idx.sort_unstable();
            data.select(&idx)
        }
        _ => data,
    })
}

struct Inputs {
    cfg: EngineConfig,
    model: ModelSpec,
    data: Dataset,
}

fn load_inputs(c: &Common) -> Outcome<Inputs> {
    let cfg = load_engine_config(c.engine.as_deref())?;
    let model = ModelSpec::load(&c.model, &cfg)?;
    let data = load_dataset(&c.dataset, c.samples, c.seed)?;
    if data.dim != model.input_dim {
        return Err(config(anyhow!(
            "{}: samples have {} values, model expects {}",
            c.dataset.display(),
            data.dim,
            model.input_dim
        )));
    }
    prepare_out(&c.out)?;
    Ok(Inputs { cfg, model, data })
}

fn read_mode_file(path: &Path, layers: usize) -> Outcome<Vec<Accuracy>> {
    #[derive(serde::Deserialize)]
    #[serde(untagged)]
    enum ModeFile {
        List(Vec<Accuracy>),
        Report { assignment: Vec<Accuracy> },
    }
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string()).map_err(config)?;
    let modes = match serde_json::from_str::<ModeFile>(&text)
        .with_context(|| format!("{}: expected a list of modes or an object with \"assignment\"", path.display()))
        .map_err(config)?
    {
        ModeFile::List(m) | ModeFile::Report { assignment: m } => m,
    };
    if modes.len() != layers {
        return Err(config(anyhow!("{}: {} modes for {layers} layers", path.display(), modes.len())));
    }
    Ok(modes)
}

/// Re-reads every parameter through the LIFO loader and address map.
fn params_via_loader(q: &QuantizedModel) -> Outcome<DenseParams> {
    let (t, spec, words) = q.load_stream()?;
    let mem = lifo_load(&words, &t, &spec).map_err(runtime)?;
    DenseParams::from_store(&MemoryParams::new(&mem, t.clone()), &t).map_err(runtime)
}

#[derive(Serialize)]
struct RunResults<'a> {
    model: &'a str,
    dataset: &'a str,
    seed: u64,
    mode_source: &'a str,
    engine: EngineConfig,
    sensitivity: Option<&'a SensitivityReport>,
    result: &'a EvalResult,
}

fn write_meta(out: &Path, command: &str) -> Outcome<()> {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = serde_json::json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "unix_time": now,
        "threads": rayon::current_num_threads(),
        "args": std::env::args().skip(1).collect::<Vec<_>>(),
    });
    write_atomic(&out.join("meta.json"), format!("{meta:#}\n").as_bytes())
}

pub fn run(a: &RunArgs) -> Outcome<()> {
    let c = &a.common;
    let Inputs { cfg, model, data } = load_inputs(c)?;
    let engine = Engine::new(cfg).map_err(config)?;
    let n = model.layers.len();
    let mut sensitivity = None;
    let modes = match a.modes.as_str() {
        "uniform-acc" => vec![Accuracy::Accurate; n],
        "uniform-approx" => model
            .layers
            .iter()
            .map(|l| if approximable(l) { Accuracy::Approximate } else { Accuracy::Accurate })
            .collect(),
        "heuristic" => {
            let calib = match &a.calib {
                Some(p) => load_dataset(p, None, c.seed)?,
                None => data.clone(),
            };
            let report = sensitivity_scan(&model, &calib, &engine, a.threshold)?;
            let modes = report.assignment.clone();
            sensitivity = Some(report);
            modes
        }
        s => match s.strip_prefix("file=") {
            Some(p) if !p.is_empty() => read_mode_file(Path::new(p), n)?,
            _ => {
                return Err(config(anyhow!(
                    "unknown --modes {s:?} (uniform-acc, uniform-approx, heuristic, file=PATH)"
                )))
            }
        },
    };
    let model = model.with_modes(&modes);
    for (i, (l, m)) in model.layers.iter().zip(&modes).enumerate() {
        if *m == Accuracy::Approximate && !approximable(l) {
            return Err(config(anyhow!("layer {i}: {} has no approximate mode", l.format)));
        }
    }

    let mut q = quantize_model(&model);
    let loaded = params_via_loader(&q)?;
    if a.verify && loaded != q.params {
        return Err(runtime(anyhow!("parameters read through the loader differ from the quantized model")));
    }
    q.params = loaded;

    let reference = float_reference(&model, &data);
    let result = evaluate(&q, &data, &reference, &engine)?;

    if a.trace {
        let x = q.quantize_input(&data.samples[0]);
        let run = engine.run_network(&q.layers, &x, &q.params, true).map_err(runtime)?;
        if let Some(v) = check_trace(&run.trace).first() {
            return Err(runtime(anyhow!("illegal trace at event {} (cycle {}): {}", v.position, v.cycle, v.rule)));
        }
        write_atomic(&c.out.join("trace.csv"), trace_to_csv(&run.trace).as_bytes())?;
    }

    let results = RunResults {
        model: &q.name,
        dataset: &data.name,
        seed: c.seed,
        mode_source: &a.modes,
        engine: cfg,
        sensitivity: sensitivity.as_ref(),
        result: &result,
    };
    let json = serde_json::to_string_pretty(&results).map_err(runtime)?;
    write_atomic(&c.out.join("results.json"), format!("{json}\n").as_bytes())?;
    write_atomic(&c.out.join("cycles.csv"), result.cycle_report.to_csv().as_bytes())?;
    write_meta(&c.out, "run")?;
    eprintln!(
        "{}: {} samples, float {:.2}%, fxp {:.2}% (delta {:+.2}), {} cycles/inference",
        q.name,
        result.samples,
        result.float_accuracy,
        result.fxp_accuracy,
        result.accuracy_delta,
        result.cycles_per_inference
    );
    Ok(())
}

pub fn sweep(a: &SweepArgs) -> Outcome<()> {
    let axis: SweepAxis = a.sweep.parse().map_err(|e: String| config(anyhow!(e)))?;
    let Inputs { cfg, model, data } = load_inputs(&a.common)?;
    let rows = cordic_ve_core::runner::sweep(&model, &data, &cfg, axis)?;
    write_atomic(&a.common.out.join("sweep.csv"), sweep_csv(&rows).as_bytes())?;
    write_meta(&a.common.out, "sweep")?;
    eprintln!("{}: {} sweep points", model.name, rows.len());
    Ok(())
}

fn read_image(path: &Path) -> Outcome<ParamImage> {
    let f = std::fs::File::open(path).with_context(|| path.display().to_string()).map_err(config)?;
    ParamImage::read_binary(std::io::BufReader::new(f)).with_context(|| path.display().to_string()).map_err(config)
}

/// Loads `image` through the LIFO loader and compares every value with the model.
fn verify_image(image: &ParamImage, q: &QuantizedModel) -> Outcome<()> {
    let t = q.topology();
    let spec = addr_width(&t).spec;
    let words = image.to_words(&t, &spec, &q.param_formats()).map_err(config)?;
    let mem = lifo_load(&words, &t, &spec).map_err(config)?;
    let params = DenseParams::from_store(&MemoryParams::new(&mem, t.clone()), &t).map_err(config)?;
    if params != q.params {
        return Err(config(anyhow!("image values differ from the model's quantized parameters")));
    }
    let mut bytes = Vec::new();
    image.write_binary(&mut bytes).map_err(runtime)?;
    if ParamImage::read_binary(bytes.as_slice()).map_err(runtime)? != *image {
        return Err(runtime(anyhow!("image does not survive a write/read round trip")));
    }
    Ok(())
}

pub fn loadimg(a: &LoadimgArgs) -> Outcome<()> {
    let cfg = load_engine_config(a.engine.as_deref())?;
    let model = ModelSpec::load(&a.model, &cfg)?;
    let q = quantize_model(&model);
    let (path, image): (PathBuf, ParamImage) = match &a.image {
        Some(p) => (p.clone(), read_image(p)?),
        None => {
            prepare_out(&a.out)?;
            let image = q.param_image()?;
            let mut bytes = Vec::new();
            image.write_binary(&mut bytes).map_err(runtime)?;
            let path = a.out.join("params.img");
            write_atomic(&path, &bytes)?;
            (path.clone(), if a.verify { read_image(&path)? } else { image })
        }
    };
    if a.verify || a.image.is_some() {
        verify_image(&image, &q)?;
    }
    eprintln!("{}: {} entries, {}-bit addresses", path.display(), image.entries.len(), image.addr_bits);
    Ok(())
}
