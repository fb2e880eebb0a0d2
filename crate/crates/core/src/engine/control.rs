//! Layer-multiplexed control FSM and its signal trace.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("illegal control transition in layer {layer}: {message}")]
pub struct FsmError {
    pub layer: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Signal {
    CurrentLayer,
    LayerDone,
    DNNDone,
    ComputeInit,
    Index,
    ComputeDone,
    ComputeDoneArray,
}

impl fmt::Display for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Signal::CurrentLayer => "CurrentLayer",
            Signal::LayerDone => "LayerDone",
            Signal::DNNDone => "DNNDone",
            Signal::ComputeInit => "ComputeInit",
            Signal::Index => "Index",
            Signal::ComputeDone => "ComputeDone",
            Signal::ComputeDoneArray => "ComputeDoneArray",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub cycle: u64,
    pub signal: Signal,
    pub value: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsmEvent {
    /// Enter `layer`, whose dot products are `inputs` long.
    LayerStart {
        layer: usize,
        inputs: usize,
    },
    /// Assert ComputeInit on the first `active` PEs; the rest are deactivated.
    BatchStart {
        active: usize,
    },
    /// Broadcast one input index to every active PE.
    MacIssue,
    /// MAC pipeline drained: active PEs raise ComputeDone.
    Drain,
    LayerComplete {
        last: bool,
    },
}

/// Architectural control state. `Index` is broadcast, so one counter serves
/// every active PE; inactive PEs read as zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ControlState {
    pub current_layer: usize,
    pub layer_done: bool,
    pub dnn_done: bool,
    pub compute_init: Vec<bool>,
    pub compute_done: Vec<bool>,
    pub compute_done_array: bool,
    index: u32,
    inputs: u32,
    started: bool,
}

impl ControlState {
    pub fn new(pes: usize) -> Self {
        ControlState {
            current_layer: 0,
            layer_done: false,
            dnn_done: false,
            compute_init: vec![false; pes],
            compute_done: vec![false; pes],
            compute_done_array: true,
            index: 0,
            inputs: 0,
            started: false,
        }
    }

    pub fn index(&self, pe: usize) -> u32 {
        if self.compute_init[pe] {
            self.index
        } else {
            0
        }
    }

    pub fn active(&self) -> usize {
        self.compute_init.iter().filter(|&&a| a).count()
    }

    fn aggregate(&self) -> bool {
        self.compute_init.iter().zip(&self.compute_done).all(|(&init, &done)| !init || done)
    }
}

/// FSM plus an optional recorder. Every transition is checked; a violation is
/// a simulator assertion failure.
#[derive(Debug, Clone)]
pub struct ControlUnit {
    state: ControlState,
    trace: Option<Vec<TraceEvent>>,
    pub cycle: u64,
}

impl ControlUnit {
    pub fn new(pes: usize, record: bool) -> Self {
        ControlUnit { state: ControlState::new(pes), trace: record.then(Vec::new), cycle: 0 }
    }

    pub fn state(&self) -> &ControlState {
        &self.state
    }

    pub fn take_trace(&mut self) -> Vec<TraceEvent> {
        self.trace.take().unwrap_or_default()
    }

    fn emit(&mut self, signal: Signal, value: i64) {
        if let Some(t) = &mut self.trace {
            t.push(TraceEvent { cycle: self.cycle, signal, value });
        }
    }

    fn fail(&self, message: impl Into<String>) -> FsmError {
        FsmError { layer: self.state.current_layer, message: message.into() }
    }

    pub fn step(&mut self, event: FsmEvent) -> Result<(), FsmError> {
        match event {
            FsmEvent::LayerStart { layer, inputs } => {
                let s = &self.state;
                if s.dnn_done {
                    return Err(self.fail("layer start after DNNDone"));
                }
                let expected = if s.started { s.current_layer + 1 } else { 0 };
                if s.started && !s.layer_done {
                    return Err(self.fail("layer start before LayerDone"));
                }
                if layer != expected {
                    return Err(self.fail(format!("layer {layer} started, expected {expected}")));
                }
                let s = &mut self.state;
                s.started = true;
                s.current_layer = layer;
                s.layer_done = false;
                s.inputs = inputs as u32;
                s.index = 0;
                s.compute_init.iter_mut().for_each(|f| *f = false);
                s.compute_done.iter_mut().for_each(|f| *f = false);
                s.compute_done_array = true;
                self.emit(Signal::CurrentLayer, layer as i64);
                self.emit(Signal::LayerDone, 0);
            }
            FsmEvent::BatchStart { active } => {
                let s = &self.state;
                if !s.started || s.layer_done {
                    return Err(self.fail("batch start outside a layer"));
                }
                if !s.compute_done_array {
                    return Err(self.fail("batch start before previous batch completed"));
                }
                if active > s.compute_init.len() {
                    return Err(self.fail(format!("{active} active PEs exceed {}", s.compute_init.len())));
                }
                let s = &mut self.state;
                for (pe, f) in s.compute_init.iter_mut().enumerate() {
                    *f = pe < active;
                }
                s.compute_done.iter_mut().for_each(|f| *f = false);
                s.index = 0;
                s.compute_done_array = active == 0;
                self.emit(Signal::ComputeInit, active as i64);
                self.emit(Signal::ComputeDoneArray, s_flag(self.state.compute_done_array));
            }
            FsmEvent::MacIssue => {
                let s = &self.state;
                if s.active() == 0 || s.compute_done_array {
                    return Err(self.fail("MAC issued with no computing PE"));
                }
                if s.index >= s.inputs {
                    return Err(self.fail(format!("Index would exceed J = {}", s.inputs)));
                }
                self.state.index += 1;
                self.emit(Signal::Index, self.state.index as i64);
            }
            FsmEvent::Drain => {
                let s = &self.state;
                if s.index != s.inputs {
                    return Err(self.fail(format!("drain at Index {} of {}", s.index, s.inputs)));
                }
                let s = &mut self.state;
                for (done, &init) in s.compute_done.iter_mut().zip(&s.compute_init) {
                    *done = init;
                }
                s.compute_done_array = s.aggregate();
                self.emit(Signal::ComputeDone, 1);
                self.emit(Signal::ComputeDoneArray, s_flag(self.state.compute_done_array));
            }
            FsmEvent::LayerComplete { last } => {
                let s = &self.state;
                if !s.started || s.layer_done {
                    return Err(self.fail("layer complete outside a layer"));
                }
                if !s.compute_done_array {
                    return Err(self.fail("LayerDone without ComputeDoneArray"));
                }
                let s = &mut self.state;
                s.layer_done = true;
                s.compute_init.iter_mut().for_each(|f| *f = false);
                self.emit(Signal::LayerDone, 1);
                if last {
                    self.state.dnn_done = true;
                    self.emit(Signal::DNNDone, 1);
                }
            }
        }
        Ok(())
    }
}

fn s_flag(b: bool) -> i64 {
    b as i64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceViolation {
    pub position: usize,
    pub cycle: u64,
    pub rule: &'static str,
}

/// Independent legality check over a recorded trace.
pub fn check_trace(trace: &[TraceEvent]) -> Vec<TraceViolation> {
    let mut out = Vec::new();
    let mut cda = true;
    let mut layer_done = false;
    let mut in_layer = false;
    let mut dnn = false;
    let mut last_index: Option<i64> = None;
    for (position, e) in trace.iter().enumerate() {
        let mut flag = |rule| out.push(TraceViolation { position, cycle: e.cycle, rule });
        if dnn {
            flag("activity after DNNDone");
        }
        match e.signal {
            Signal::CurrentLayer => {
                if in_layer && !layer_done {
                    flag("layer change before LayerDone");
                }
                in_layer = true;
                cda = true;
                last_index = None;
            }
            Signal::LayerDone => {
                if e.value == 1 {
                    if !cda {
                        flag("LayerDone before ComputeDoneArray");
                    }
                    layer_done = true;
                } else {
                    layer_done = false;
                }
            }
            Signal::ComputeInit => last_index = Some(0),
            Signal::Index => match last_index {
                Some(prev) if e.value == prev + 1 => last_index = Some(e.value),
                _ => flag("non-monotone Index"),
            },
            Signal::ComputeDoneArray => cda = e.value == 1,
            Signal::ComputeDone => {}
            Signal::DNNDone => {
                if !layer_done {
                    flag("DNNDone before final LayerDone");
                }
                dnn = true;
            }
        }
    }
    out
}

pub fn trace_to_csv(trace: &[TraceEvent]) -> String {
    let mut s = String::from("cycle,signal,value\n");
    for e in trace {
        s.push_str(&format!("{},{},{}\n", e.cycle, e.signal, e.value));
    }
    s
}
