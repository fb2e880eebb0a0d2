//! Time-multiplexed multi-activation-function unit.
//!
//! A single block serves every PE. It owns two CORDIC datapaths: the HR unit
//! (hyperbolic rotation, also reused for linear multiplies and the tanh ratio)
//! and the LV unit (linear vectoring, the SoftMax normaliser). ReLU takes the
//! bypass buffer; GELU adds two small exact multipliers; SoftMax stages its
//! exponentials in a FIFO between the two passes.
//!
//! All arithmetic runs on the wide (guard-bit) datapath and each output is
//! rounded once into the request format.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cordic::{
    from_wide, hyperbolic_rotate_wide, linear_vector_wide, mul_acc_wide, to_wide, CordicConfig, CordicError,
};
use crate::fxp::{round_shift_right, shift_signed, FxPValue, FxpError};

const LN2_Q62: i128 = 3_196_577_161_300_663_915;
const INV_LN2_Q62: i128 = 6_653_256_548_922_161_246;

pub const SELU_LAMBDA: f64 = 1.0507;
pub const SELU_ALPHA: f64 = 1.6733;
pub const GELU_COEFF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ActivationError {
    #[error("activation request is empty")]
    Empty,
    #[error(transparent)]
    Fxp(#[from] FxpError),
    #[error(transparent)]
    Cordic(#[from] CordicError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    /// No activation; the value leaves the engine untouched.
    Identity,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    Gelu,
    Swish,
    Selu,
}

/// Hardware path a function occupies inside the unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AfDatapath {
    None,
    Bypass,
    Hr,
    HrWithMultipliers,
    HrLvFifo,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 8] = [
        ActivationKind::Identity,
        ActivationKind::Relu,
        ActivationKind::Sigmoid,
        ActivationKind::Tanh,
        ActivationKind::Softmax,
        ActivationKind::Gelu,
        ActivationKind::Swish,
        ActivationKind::Selu,
    ];

    pub fn datapath(self) -> AfDatapath {
        match self {
            ActivationKind::Identity => AfDatapath::None,
            ActivationKind::Relu => AfDatapath::Bypass,
            ActivationKind::Sigmoid | ActivationKind::Tanh | ActivationKind::Selu => AfDatapath::Hr,
            ActivationKind::Gelu | ActivationKind::Swish => AfDatapath::HrWithMultipliers,
            ActivationKind::Softmax => AfDatapath::HrLvFifo,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Identity => "identity",
            ActivationKind::Relu => "relu",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Tanh => "tanh",
            ActivationKind::Softmax => "softmax",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Swish => "swish",
            ActivationKind::Selu => "selu",
        }
    }

    /// Double-precision reference of the same function (elementwise kinds).
    pub fn reference(self, x: f64) -> f64 {
        match self {
            ActivationKind::Identity | ActivationKind::Softmax => x,
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            ActivationKind::Tanh => x.tanh(),
            ActivationKind::Gelu => 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEFF * x * x * x)).tanh()),
            ActivationKind::Swish => x / (1.0 + (-x).exp()),
            ActivationKind::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * (x.exp() - 1.0)
                }
            }
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ActivationKind::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| format!("unknown activation `{s}`"))
    }
}

/// Double-precision softmax with max subtraction.
pub fn reference_softmax(values: &[f64]) -> Vec<f64> {
    let m = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = values.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AfReport {
    pub cycles_total: u64,
    pub hr_busy_cycles: u64,
    pub lv_busy_cycles: u64,
    pub fifo_peak_depth: u64,
}

impl AfReport {
    pub fn utilization_hr(&self) -> f64 {
        ratio(self.hr_busy_cycles, self.cycles_total)
    }

    pub fn utilization_lv(&self) -> f64 {
        ratio(self.lv_busy_cycles, self.cycles_total)
    }

    pub fn merge(&mut self, other: &AfReport) {
        self.cycles_total += other.cycles_total;
        self.hr_busy_cycles += other.hr_busy_cycles;
        self.lv_busy_cycles += other.lv_busy_cycles;
        self.fifo_peak_depth = self.fifo_peak_depth.max(other.fifo_peak_depth);
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One activation job. `cfg` supplies the format and the iteration depth used
/// by both CORDIC datapaths; its mode field is ignored.
#[derive(Debug, Clone, Copy)]
pub struct AfRequest<'a> {
    pub values: &'a [FxPValue],
    pub kind: ActivationKind,
    pub cfg: CordicConfig,
}

/// Wide-datapath evaluator that charges every operation to the unit that
/// performs it.
struct AfUnit {
    frac: u32,
    iterations: u32,
    report: AfReport,
}

impl AfUnit {
    fn new(cfg: &CordicConfig) -> Self {
        AfUnit { frac: cfg.wide_frac(), iterations: cfg.iterations, report: AfReport::default() }
    }

    fn one(&self) -> i64 {
        1i64 << self.frac
    }

    fn constant(&self, c: f64) -> i64 {
        (c * (self.frac as f64).exp2()).round() as i64
    }

    fn plain(&mut self, cycles: u64) {
        self.report.cycles_total += cycles;
    }

    fn hr(&mut self) {
        let n = self.iterations as u64;
        self.report.cycles_total += n;
        self.report.hr_busy_cycles += n;
    }

    fn lv(&mut self) {
        let n = self.iterations as u64;
        self.report.cycles_total += n;
        self.report.lv_busy_cycles += n;
    }

    fn exp(&mut self, v: i64) -> i64 {
        self.plain(1);
        let (theta, k) = range_reduce_exp_wide(v, self.frac);
        self.hr();
        let (c, s, _) = hyperbolic_rotate_wide(theta, self.frac, self.iterations);
        scale_pow2(c + s, k)
    }

    /// `tanh` as `(1 - e) / (1 + e)` with `e = exp(-2|v|)`; the ratio runs on
    /// the HR unit's datapath in vectoring configuration.
    fn tanh(&mut self, v: i64) -> i64 {
        let e = self.exp(-2 * v.abs());
        let one = self.one();
        self.hr();
        let (q, _) = linear_vector_wide(one - e, one + e, self.frac, self.iterations);
        if v < 0 {
            -q
        } else {
            q
        }
    }

    /// `0.5 * (1 + tanh(v / 2))`, the Sigmoid/Tanh multiplexer path.
    fn sigmoid(&mut self, v: i64) -> i64 {
        let t = self.tanh(v / 2);
        (self.one() + t) >> 1
    }

    /// `acc + x * z` on the HR datapath in linear-rotation configuration.
    fn mac(&mut self, acc: i64, x: i64, z: i64) -> i64 {
        self.hr();
        mul_acc_wide(acc, x, z, self.frac, self.iterations)
    }

    /// One of the two dedicated GELU multipliers: exact product, one cycle.
    fn small_mul(&mut self, a: i64, b: i64) -> i64 {
        self.plain(1);
        round_shift_right(a as i128 * b as i128, self.frac) as i64
    }

    fn gelu(&mut self, x: i64) -> i64 {
        let x2 = self.mac(0, x, x);
        let c0 = self.constant(SQRT_2_OVER_PI);
        let c1 = self.constant(SQRT_2_OVER_PI * GELU_COEFF);
        let poly = self.mac(c0, x2, c1);
        let inner = self.small_mul(x, poly);
        let t = self.tanh(inner);
        let one = self.one();
        self.small_mul(x, one + t) / 2
    }

    fn swish(&mut self, x: i64) -> i64 {
        let s = self.sigmoid(x);
        self.mac(0, x, s)
    }

    fn selu(&mut self, x: i64) -> i64 {
        if x > 0 {
            let lambda = self.constant(SELU_LAMBDA);
            self.mac(0, x, lambda)
        } else {
            let e = self.exp(x);
            let scale = self.constant(SELU_LAMBDA * SELU_ALPHA);
            let one = self.one();
            self.mac(0, e - one, scale)
        }
    }

    fn elementwise(&mut self, kind: ActivationKind, x: i64) -> i64 {
        if kind == ActivationKind::Identity {
            return x;
        }
        self.plain(1);
        match kind {
            ActivationKind::Relu => x.max(0),
            ActivationKind::Tanh => self.tanh(x),
            ActivationKind::Sigmoid => self.sigmoid(x),
            ActivationKind::Gelu => self.gelu(x),
            ActivationKind::Swish => self.swish(x),
            ActivationKind::Selu => self.selu(x),
            ActivationKind::Identity | ActivationKind::Softmax => unreachable!(),
        }
    }

    fn softmax(&mut self, xs: &[i64]) -> Vec<i64> {
        let m = *xs.iter().max().expect("non-empty");
        let mut fifo = VecDeque::with_capacity(xs.len());
        let mut sum = 0i64;
        for &x in xs {
            self.plain(1);
            let e = self.exp(x - m);
            sum += e;
            fifo.push_back(e);
            self.report.fifo_peak_depth = self.report.fifo_peak_depth.max(fifo.len() as u64);
        }
        let mut out = Vec::with_capacity(xs.len());
        while let Some(e) = fifo.pop_front() {
            self.lv();
            out.push(linear_vector_wide(e, sum, self.frac, self.iterations).0);
        }
        out
    }
}

fn scale_pow2(v: i64, k: i32) -> i64 {
    if k >= 0 {
        let k = k.min(62) as u32;
        v.checked_shl(k).filter(|r| r >> k == v).unwrap_or(i64::MAX / 2)
    } else {
        shift_signed(v, k)
    }
}

/// Split `v` (wide, `frac` fractional bits) as `v = k * ln2 + theta` with
/// `|theta| <= ln2 / 2`, so `exp(v) = 2^k * exp(theta)`.
pub fn range_reduce_exp_wide(v: i64, frac: u32) -> (i64, i32) {
    let mut k = round_shift_right(v as i128 * INV_LN2_Q62, frac + 62) as i64;
    let half_ln2 = round_shift_right(LN2_Q62, 63 - frac) as i64;
    let theta_for = |k: i64| v - round_shift_right(k as i128 * LN2_Q62, 62 - frac) as i64;
    let mut theta = theta_for(k);
    while theta > half_ln2 {
        k += 1;
        theta = theta_for(k);
    }
    while theta < -half_ln2 {
        k -= 1;
        theta = theta_for(k);
    }
    (theta, k as i32)
}

/// `(theta, k)` with `exp(x) = 2^k * exp(theta)`; `theta` in the input format.
pub fn range_reduce_exp(x: FxPValue) -> (FxPValue, i32) {
    let frac = x.format().frac_bits() + crate::cordic::GUARD_BITS;
    let (theta, k) = range_reduce_exp_wide(to_wide(x), frac);
    (from_wide(theta, x.format()), k)
}

fn check_formats(req: &AfRequest<'_>) -> Result<(), ActivationError> {
    if req.values.is_empty() {
        return Err(ActivationError::Empty);
    }
    for v in req.values {
        if v.format() != req.cfg.format {
            return Err(FxpError::FormatMismatch(v.format(), req.cfg.format).into());
        }
    }
    if req.cfg.iterations == 0 {
        return Err(CordicError::ZeroIterations.into());
    }
    Ok(())
}

/// Evaluate a request. Elementwise kinds apply per value; SoftMax consumes the
/// whole sequence.
pub fn apply(req: &AfRequest<'_>) -> Result<(Vec<FxPValue>, AfReport), ActivationError> {
    check_formats(req)?;
    let mut unit = AfUnit::new(&req.cfg);
    let wide: Vec<i64> = req.values.iter().map(|&v| to_wide(v)).collect();
    let out = match req.kind {
        ActivationKind::Softmax => unit.softmax(&wide),
        kind => wide.iter().map(|&x| unit.elementwise(kind, x)).collect(),
    };
    let format = req.cfg.format;
    Ok((out.into_iter().map(|w| from_wide(w, format)).collect(), unit.report))
}

fn single(kind: ActivationKind, x: FxPValue, cfg: &CordicConfig) -> Result<FxPValue, ActivationError> {
    let req = AfRequest { values: std::slice::from_ref(&x), kind, cfg: *cfg };
    Ok(apply(&req)?.0[0])
}

pub fn softmax(values: &[FxPValue], cfg: &CordicConfig) -> Result<Vec<FxPValue>, ActivationError> {
    Ok(apply(&AfRequest { values, kind: ActivationKind::Softmax, cfg: *cfg })?.0)
}

pub fn gelu(x: FxPValue, cfg: &CordicConfig) -> Result<FxPValue, ActivationError> {
    single(ActivationKind::Gelu, x, cfg)
}

pub fn selu(x: FxPValue, cfg: &CordicConfig) -> Result<FxPValue, ActivationError> {
    single(ActivationKind::Selu, x, cfg)
}

pub fn swish(x: FxPValue, cfg: &CordicConfig) -> Result<FxPValue, ActivationError> {
    single(ActivationKind::Swish, x, cfg)
}

pub fn tanh(x: FxPValue, cfg: &CordicConfig) -> Result<FxPValue, ActivationError> {
    single(ActivationKind::Tanh, x, cfg)
}

pub fn sigmoid(x: FxPValue, cfg: &CordicConfig) -> Result<FxPValue, ActivationError> {
    single(ActivationKind::Sigmoid, x, cfg)
}

/// `tanh` of a wide operand, exposed so the Sigmoid composition can be
/// checked bit-for-bit.
pub fn tanh_wide(x: i64, cfg: &CordicConfig) -> i64 {
    AfUnit::new(cfg).tanh(x)
}
