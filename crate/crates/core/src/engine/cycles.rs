//! Cycle accounting.

use serde::{Deserialize, Serialize};

use crate::activation::AfReport;
use crate::cordic::Accuracy;
use crate::fxp::FxPFormat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCycles {
    pub layer: usize,
    pub kind: String,
    pub format: FxPFormat,
    pub accuracy: Accuracy,
    pub lanes: u64,
    pub batches: u64,
    pub cycles_per_mac: u64,
    pub mac_cycles: u64,
    pub bias_cycles: u64,
    /// AF cycles not hidden behind MACs.
    pub af_cycles: u64,
    /// Total AF unit occupancy, overlapped or not.
    pub af_busy_cycles: u64,
    pub pool_cycles: u64,
    pub control_cycles: u64,
    pub mac_ops: u64,
    pub active_lane_cycles: u64,
    pub lane_capacity_cycles: u64,
    pub total: u64,
}

impl LayerCycles {
    pub fn finish(&mut self) {
        self.total = self.mac_cycles + self.bias_cycles + self.af_cycles + self.pool_cycles + self.control_cycles;
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CycleReport {
    pub per_layer: Vec<LayerCycles>,
    pub mac_cycles: u64,
    pub bias_cycles: u64,
    pub af_cycles: u64,
    pub af_busy_cycles: u64,
    pub pool_cycles: u64,
    pub control_overhead_cycles: u64,
    pub total_cycles: u64,
    pub mac_ops: u64,
    pub lane_occupancy: f64,
    pub effective_macs_per_cycle: f64,
    /// PEs sharing one of the 64 weight-segment read ports.
    pub segment_port_sharing: u64,
    /// Cycles each physical PE spent with at least one sub-lane computing.
    pub pe_busy_cycles: Vec<u64>,
    pub af: AfReport,
}

impl CycleReport {
    pub fn new(pes: usize) -> Self {
        CycleReport {
            segment_port_sharing: (pes as u64 / 64).max(1),
            pe_busy_cycles: vec![0; pes],
            ..Default::default()
        }
    }

    pub fn push(&mut self, mut layer: LayerCycles) {
        layer.finish();
        self.mac_cycles += layer.mac_cycles;
        self.bias_cycles += layer.bias_cycles;
        self.af_cycles += layer.af_cycles;
        self.af_busy_cycles += layer.af_busy_cycles;
        self.pool_cycles += layer.pool_cycles;
        self.control_overhead_cycles += layer.control_cycles;
        self.total_cycles += layer.total;
        self.mac_ops += layer.mac_ops;
        self.per_layer.push(layer);
        let (active, capacity) = self
            .per_layer
            .iter()
            .fold((0u64, 0u64), |(a, c), l| (a + l.active_lane_cycles, c + l.lane_capacity_cycles));
        self.lane_occupancy = if capacity == 0 { 0.0 } else { active as f64 / capacity as f64 };
        self.effective_macs_per_cycle =
            if self.total_cycles == 0 { 0.0 } else { self.mac_ops as f64 / self.total_cycles as f64 };
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "layer,kind,format,accuracy,lanes,batches,cycles_per_mac,mac_cycles,bias_cycles,af_cycles,af_busy_cycles,pool_cycles,control_cycles,mac_ops,total\n",
        );
        for l in &self.per_layer {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                l.layer,
                l.kind,
                l.format,
                l.accuracy,
                l.lanes,
                l.batches,
                l.cycles_per_mac,
                l.mac_cycles,
                l.bias_cycles,
                l.af_cycles,
                l.af_busy_cycles,
                l.pool_cycles,
                l.control_cycles,
                l.mac_ops,
                l.total
            ));
        }
        s
    }
}

/// Exposed AF time for a batch pipeline where the AF work of batch `b`
/// overlaps the MACs of batch `b + 1`.
pub fn exposed_af(mac: &[u64], af: &[u64]) -> u64 {
    debug_assert_eq!(mac.len(), af.len());
    af.iter().enumerate().map(|(b, &a)| a.saturating_sub(mac.get(b + 1).copied().unwrap_or(0))).sum()
}
