//! Iterative CORDIC kernels.
//!
//! One shift-add datapath is reused for every iteration, so a result costs one
//! cycle per iteration. Three configurations are used:
//!
//! * linear rotation: `y += d * x * 2^-i`, `z -= d * 2^-i` computes `acc + w * a`
//! * linear vectoring: drives `y -> 0` while `z` collects `num / den`
//! * hyperbolic rotation: `cosh`, `sinh` (and so `exp`) of the input angle
//!
//! Internally every register carries [`GUARD_BITS`] extra fractional bits
//! ("wide" values). The `*_wide` functions expose that datapath to the other
//! units; the `FxPValue` wrappers round once into the output format.
//!
//! Right shifts inside the datapath truncate toward zero (sign-magnitude
//! shifter), which makes every kernel exactly odd-symmetric.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fxp::{round_shift_right, trunc_shift_right, FxPFormat, FxPValue, FxpError};

/// Extra fractional bits carried by the internal CORDIC registers.
pub const GUARD_BITS: u32 = 4;

/// Largest hyperbolic angle accepted by [`hyperbolic_rotation`].
pub const HYPERBOLIC_MAX_ANGLE: f64 = 1.11;

/// Iteration count used for the 32-bit reference width.
pub const REFERENCE_ITERATIONS: u32 = 30;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CordicError {
    #[error("{op}: operand {value} outside convergence domain (|x| <= {limit})")]
    Domain { op: &'static str, value: f64, limit: f64 },
    #[error("{op}: division by zero")]
    DivideByZero { op: &'static str },
    #[error("no cycle-table entry for {format} in {accuracy} mode")]
    Unsupported { format: FxPFormat, accuracy: Accuracy },
    #[error("{op} requires {expected:?} mode, configured for {found:?}")]
    ModeMismatch { op: &'static str, expected: CordicMode, found: CordicMode },
    #[error("iteration count must be at least 1")]
    ZeroIterations,
    #[error(transparent)]
    Fxp(#[from] FxpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Coordinate {
    Linear,
    Hyperbolic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Rotation,
    Vectoring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CordicMode {
    pub coordinate: Coordinate,
    pub direction: Direction,
}

impl CordicMode {
    pub const LINEAR_ROTATION: CordicMode =
        CordicMode { coordinate: Coordinate::Linear, direction: Direction::Rotation };
    pub const LINEAR_VECTORING: CordicMode =
        CordicMode { coordinate: Coordinate::Linear, direction: Direction::Vectoring };
    pub const HYPERBOLIC_ROTATION: CordicMode =
        CordicMode { coordinate: Coordinate::Hyperbolic, direction: Direction::Rotation };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Accuracy {
    Approximate,
    Accurate,
}

impl std::fmt::Display for Accuracy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Accuracy::Approximate => "approximate",
            Accuracy::Accurate => "accurate",
        })
    }
}

impl std::str::FromStr for Accuracy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "approximate" | "approx" => Ok(Accuracy::Approximate),
            "accurate" | "acc" => Ok(Accuracy::Accurate),
            other => Err(format!("unknown accuracy mode `{other}`")),
        }
    }
}

/// MAC iteration count (= cycles per MAC) for a precision/accuracy pair.
pub fn mac_iterations(format: FxPFormat, accuracy: Accuracy) -> Option<u32> {
    match (format.total_bits(), accuracy) {
        (4, Accuracy::Accurate) => Some(4),
        (8, Accuracy::Approximate) => Some(4),
        (8, Accuracy::Accurate) => Some(5),
        (16, Accuracy::Approximate) => Some(7),
        (16, Accuracy::Accurate) => Some(9),
        (32, Accuracy::Accurate) => Some(REFERENCE_ITERATIONS),
        _ => None,
    }
}

/// Iteration depth of the activation-unit kernels: MAC depth + 3 when
/// approximate, the word width when accurate.
pub fn activation_iterations(format: FxPFormat, accuracy: Accuracy) -> Option<u32> {
    let mac = mac_iterations(format, accuracy)?;
    Some(match accuracy {
        Accuracy::Approximate => mac + 3,
        Accuracy::Accurate => format.total_bits().min(REFERENCE_ITERATIONS),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CordicConfig {
    pub mode: CordicMode,
    pub accuracy: Accuracy,
    pub format: FxPFormat,
    pub iterations: u32,
}

impl CordicConfig {
    /// Linear-rotation MAC configuration with the cycle-table depth.
    pub fn mac(format: FxPFormat, accuracy: Accuracy) -> Result<Self, CordicError> {
        let iterations = mac_iterations(format, accuracy).ok_or(CordicError::Unsupported { format, accuracy })?;
        Ok(CordicConfig { mode: CordicMode::LINEAR_ROTATION, accuracy, format, iterations })
    }

    /// Hyperbolic-rotation configuration with the activation depth.
    pub fn activation(format: FxPFormat, accuracy: Accuracy) -> Result<Self, CordicError> {
        let iterations =
            activation_iterations(format, accuracy).ok_or(CordicError::Unsupported { format, accuracy })?;
        Ok(CordicConfig { mode: CordicMode::HYPERBOLIC_ROTATION, accuracy, format, iterations })
    }

    pub fn divider(format: FxPFormat, accuracy: Accuracy) -> Result<Self, CordicError> {
        Ok(CordicConfig { mode: CordicMode::LINEAR_VECTORING, ..Self::activation(format, accuracy)? })
    }

    pub fn with_mode(self, mode: CordicMode) -> Self {
        CordicConfig { mode, ..self }
    }

    pub fn with_iterations(self, iterations: u32) -> Self {
        CordicConfig { iterations, ..self }
    }

    pub fn wide_frac(&self) -> u32 {
        self.format.frac_bits() + GUARD_BITS
    }

    fn expect_mode(&self, op: &'static str, expected: CordicMode) -> Result<(), CordicError> {
        if self.iterations == 0 {
            return Err(CordicError::ZeroIterations);
        }
        if self.mode != expected {
            return Err(CordicError::ModeMismatch { op, expected, found: self.mode });
        }
        Ok(())
    }

    fn expect_format(&self, v: FxPValue) -> Result<(), CordicError> {
        if v.format() != self.format {
            return Err(FxpError::FormatMismatch(v.format(), self.format).into());
        }
        Ok(())
    }
}

/// Registers after a kernel run. `cycles` is always the configured depth:
/// the iterative datapath has a fixed latency.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CordicResult {
    pub x: FxPValue,
    pub y: FxPValue,
    pub z: FxPValue,
    pub cycles: u32,
}

/// Shift indices visited by an `n`-iteration run.
///
/// Linear rotation uses `1..=n`; linear vectoring starts one step earlier
/// (`0..n`) so quotients up to 2 converge; hyperbolic rotation repeats
/// indices 4 and 13.
pub fn iteration_schedule(mode: CordicMode, n: u32) -> Vec<u32> {
    match (mode.coordinate, mode.direction) {
        (Coordinate::Linear, Direction::Rotation) => (1..=n).collect(),
        (Coordinate::Linear, Direction::Vectoring) => (0..n).collect(),
        (Coordinate::Hyperbolic, _) => hyperbolic_schedule(n),
    }
}

fn hyperbolic_schedule(n: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(n as usize);
    let mut i = 1;
    while out.len() < n as usize {
        out.push(i);
        if (i == 4 || i == 13) && out.len() < n as usize {
            out.push(i);
        }
        i += 1;
    }
    out
}

/// `1/K` for the hyperbolic schedule of length `n`, where
/// `K = prod sqrt(1 - 2^-2i)`.
pub fn hyperbolic_inverse_gain(n: u32) -> f64 {
    hyperbolic_schedule(n).iter().map(|&i| (1.0 - (-2.0 * i as f64).exp2()).sqrt()).product::<f64>().recip()
}

/// Largest |theta| the `n`-step hyperbolic schedule can absorb.
pub fn hyperbolic_convergence_limit(n: u32) -> f64 {
    hyperbolic_schedule(n).iter().map(|&i| (-(i as f64)).exp2().atanh()).sum()
}

fn const_wide(value: f64, frac: u32) -> i64 {
    (value * (frac as f64).exp2()).round() as i64
}

fn shift_by_index(value: i64, index: i32) -> i64 {
    if index >= 0 {
        trunc_shift_right(value, index as u32)
    } else {
        value << (-index)
    }
}

/// Step weight `2^-index` at `frac` fractional bits; zero once it falls below
/// the register resolution.
fn step_weight(index: i32, frac: u32) -> i64 {
    let exp = frac as i32 - index;
    if exp < 0 {
        0
    } else {
        1i64 << exp
    }
}

/// Linear rotation on wide registers. The schedule is `start, start+1, ...`
/// (`n` steps); starting below 1 extends the domain to `|z| <= 2^(1-start)`,
/// which is how callers pre-scale large multiplicands without losing bits.
/// Returns `(y, residual z)`.
pub fn linear_rotate_wide(acc: i64, x: i64, z: i64, frac: u32, start: i32, n: u32) -> (i64, i64) {
    let (mut y, mut z) = (acc, z);
    for k in 0..n as i32 {
        let index = start + k;
        let step = step_weight(index, frac);
        if z == 0 || step == 0 {
            break;
        }
        let term = shift_by_index(x, index);
        if z > 0 {
            y += term;
            z -= step;
        } else {
            y -= term;
            z += step;
        }
    }
    (y, z)
}

/// Smallest non-negative `s` with `|z| <= 2^s * one`: the pre-scale needed
/// to bring `z` into the linear-rotation domain.
pub fn prescale_shift(z: i64, frac: u32) -> u32 {
    let one = 1i64 << frac;
    let mag = z.unsigned_abs() as i64;
    let mut s = 0;
    while mag > one << s {
        s += 1;
    }
    s
}

/// `acc + x * z` on wide registers with automatic pre-scaling of `z`.
pub fn mul_acc_wide(acc: i64, x: i64, z: i64, frac: u32, n: u32) -> i64 {
    let s = prescale_shift(z, frac) as i32;
    linear_rotate_wide(acc, x, z, frac, 1 - s, n).0
}

/// Linear vectoring on wide registers with the `0..n` schedule.
/// Returns `(quotient, residual y)`; requires `|num| < 2 |den|`.
pub fn linear_vector_wide(num: i64, den: i64, frac: u32, n: u32) -> (i64, i64) {
    let (mut y, mut z) = (num, 0i64);
    for i in 0..n as i32 {
        let step = step_weight(i, frac);
        if y == 0 || step == 0 {
            break;
        }
        let term = shift_by_index(den, i);
        if (y > 0) == (den > 0) {
            y -= term;
            z += step;
        } else {
            y += term;
            z -= step;
        }
    }
    (z, y)
}

/// Hyperbolic rotation on wide registers with gain pre-compensation.
/// Returns `(cosh, sinh, residual angle)`.
pub fn hyperbolic_rotate_wide(theta: i64, frac: u32, n: u32) -> (i64, i64, i64) {
    // Zero-angle detect: the rotation would otherwise leave a residue in sinh.
    if theta == 0 {
        return (1i64 << frac, 0, 0);
    }
    let negative = theta < 0;
    let mut x = const_wide(hyperbolic_inverse_gain(n), frac);
    let mut y = 0i64;
    let mut z = theta.abs();
    for i in hyperbolic_schedule(n) {
        let angle = const_wide((-(i as f64)).exp2().atanh(), frac);
        let dx = trunc_shift_right(y, i);
        let dy = trunc_shift_right(x, i);
        if z >= 0 {
            x += dx;
            y += dy;
            z -= angle;
        } else {
            x -= dx;
            y -= dy;
            z += angle;
        }
    }
    if negative {
        (x, -y, -z)
    } else {
        (x, y, z)
    }
}

pub fn to_wide(v: FxPValue) -> i64 {
    (v.raw() as i64) << GUARD_BITS
}

/// Single final rounding from the wide datapath into `format`.
pub fn from_wide(w: i64, format: FxPFormat) -> FxPValue {
    FxPValue::from_raw_saturating(round_shift_right(w as i128, GUARD_BITS) as i64, format)
}

/// `acc + w * a` by linear rotation with `x = w`, `y = acc`, `z = a`.
/// `|a|` must not exceed 1.
pub fn linear_mac(acc: FxPValue, w: FxPValue, a: FxPValue, cfg: &CordicConfig) -> Result<CordicResult, CordicError> {
    cfg.expect_mode("linear_mac", CordicMode::LINEAR_ROTATION)?;
    for v in [acc, w, a] {
        cfg.expect_format(v)?;
    }
    let frac = cfg.wide_frac();
    let z = to_wide(a);
    if z.abs() > 1i64 << frac {
        return Err(CordicError::Domain { op: "linear_mac", value: a.to_f64(), limit: 1.0 });
    }
    let (y, residual) = linear_rotate_wide(to_wide(acc), to_wide(w), z, frac, 1, cfg.iterations);
    Ok(CordicResult { x: w, y: from_wide(y, cfg.format), z: from_wide(residual, cfg.format), cycles: cfg.iterations })
}

/// `num / den` by linear vectoring. Requires `|num / den| < 2`.
pub fn linear_divide(num: FxPValue, den: FxPValue, cfg: &CordicConfig) -> Result<CordicResult, CordicError> {
    cfg.expect_mode("linear_divide", CordicMode::LINEAR_VECTORING)?;
    cfg.expect_format(num)?;
    cfg.expect_format(den)?;
    if den.is_zero() {
        return Err(CordicError::DivideByZero { op: "linear_divide" });
    }
    if (num.raw() as i64).abs() >= 2 * (den.raw() as i64).abs() {
        return Err(CordicError::Domain { op: "linear_divide", value: num.to_f64() / den.to_f64(), limit: 2.0 });
    }
    let frac = cfg.wide_frac();
    let (q, residual) = linear_vector_wide(to_wide(num), to_wide(den), frac, cfg.iterations);
    Ok(CordicResult { x: den, y: from_wide(residual, cfg.format), z: from_wide(q, cfg.format), cycles: cfg.iterations })
}

/// Gain-compensated hyperbolic rotation: `x = cosh(theta)`, `y = sinh(theta)`.
pub fn hyperbolic_rotation(theta: FxPValue, cfg: &CordicConfig) -> Result<CordicResult, CordicError> {
    cfg.expect_mode("hyperbolic_rotation", CordicMode::HYPERBOLIC_ROTATION)?;
    cfg.expect_format(theta)?;
    if theta.to_f64().abs() > HYPERBOLIC_MAX_ANGLE {
        return Err(CordicError::Domain {
            op: "hyperbolic_rotation",
            value: theta.to_f64(),
            limit: HYPERBOLIC_MAX_ANGLE,
        });
    }
    let (c, s, residual) = hyperbolic_rotate_wide(to_wide(theta), cfg.wide_frac(), cfg.iterations);
    Ok(CordicResult {
        x: from_wide(c, cfg.format),
        y: from_wide(s, cfg.format),
        z: from_wide(residual, cfg.format),
        cycles: cfg.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(x: f64, f: FxPFormat) -> FxPValue {
        FxPValue::quantize(x, f)
    }

    /// Real-valued linear-rotation recurrence, independent of the wide datapath.
    fn real_mac(acc: f64, w: f64, a: f64, n: u32) -> f64 {
        let (mut y, mut z) = (acc, a);
        for i in 1..=n {
            if z == 0.0 {
                break;
            }
            let d = z.signum();
            let p = (-(i as f64)).exp2();
            y += d * w * p;
            z -= d * p;
        }
        y
    }

    #[test]
    fn cycle_table() {
        let table = [
            (FxPFormat::FXP8, Accuracy::Approximate, 4),
            (FxPFormat::FXP8, Accuracy::Accurate, 5),
            (FxPFormat::FXP16, Accuracy::Approximate, 7),
            (FxPFormat::FXP16, Accuracy::Accurate, 9),
            (FxPFormat::FXP4, Accuracy::Accurate, 4),
        ];
        for (f, acc, cycles) in table {
            let cfg = CordicConfig::mac(f, acc).unwrap();
            let r = linear_mac(q(0.0, f), q(0.5, f), q(0.5, f), &cfg).unwrap();
            assert_eq!(r.cycles, cycles, "{f} {acc}");
        }
        assert!(CordicConfig::mac(FxPFormat::FXP4, Accuracy::Approximate).is_err());
    }

    #[test]
    fn mac_examples() {
        let f = FxPFormat::FXP16;
        let cfg = CordicConfig::mac(f, Accuracy::Accurate).unwrap();
        let r = linear_mac(q(0.0, f), q(1.3, f), q(0.0, f), &cfg).unwrap();
        assert_eq!(r.y.raw(), 0);
        assert_eq!(r.cycles, 9);
        let r = linear_mac(q(0.5, f), q(0.0, f), q(1.0, f), &cfg).unwrap();
        assert_eq!(r.y.to_f64(), 0.5);
        let r = linear_mac(q(0.0, f), q(0.5, f), q(0.5, f), &cfg).unwrap();
        let oracle = real_mac(0.0, 0.5, 0.5, 9);
        assert!((oracle - 0.25).abs() <= 0.5 * (-9f64).exp2());
        let bound = 0.5 * (-9f64).exp2() + 9.0 * (-14f64).exp2();
        assert!((r.y.to_f64() - 0.25).abs() <= bound);
    }

    #[test]
    fn mac_rejects_out_of_domain() {
        let f = FxPFormat::FXP8;
        let cfg = CordicConfig::mac(f, Accuracy::Accurate).unwrap();
        let err = linear_mac(q(0.0, f), q(0.5, f), q(1.5, f), &cfg).unwrap_err();
        assert!(matches!(err, CordicError::Domain { .. }));
        let err = linear_mac(q(0.0, f), q(0.5, FxPFormat::FXP16), q(0.5, f), &cfg).unwrap_err();
        assert!(matches!(err, CordicError::Fxp(FxpError::FormatMismatch(..))));
        let div = CordicConfig::divider(f, Accuracy::Accurate).unwrap();
        assert!(matches!(linear_mac(q(0.0, f), q(0.5, f), q(0.5, f), &div), Err(CordicError::ModeMismatch { .. })));
    }

    #[test]
    fn divide_examples() {
        let f = FxPFormat::FXP16;
        let cfg = CordicConfig::divider(f, Accuracy::Accurate).unwrap().with_iterations(14);
        assert_eq!(linear_divide(q(0.0, f), q(0.75, f), &cfg).unwrap().z.raw(), 0);
        for x in [0.1, 0.5, 1.0, 1.9] {
            let r = linear_divide(q(x, f), q(x, f), &cfg).unwrap();
            assert!((r.z.to_f64() - 1.0).abs() <= (-13f64).exp2(), "{x}");
        }
        let r = linear_divide(q(0.5, f), q(1.0, f), &cfg).unwrap();
        assert!((r.z.to_f64() - 0.5).abs() <= (-13f64).exp2());
        // 1/4 with the denominator held at wide precision (4.0 is outside Q16.14).
        let frac = cfg.wide_frac();
        let (z, _) = linear_vector_wide(1 << frac, 4 << frac, frac, 14);
        assert!((z as f64 / (frac as f64).exp2() - 0.25).abs() <= (-13f64).exp2());
        assert!(matches!(linear_divide(q(1.0, f), q(0.0, f), &cfg), Err(CordicError::DivideByZero { .. })));
        assert!(matches!(linear_divide(q(1.5, f), q(0.5, f), &cfg), Err(CordicError::Domain { .. })));
    }

    #[test]
    fn schedules() {
        assert_eq!(iteration_schedule(CordicMode::LINEAR_ROTATION, 4), vec![1, 2, 3, 4]);
        assert_eq!(iteration_schedule(CordicMode::HYPERBOLIC_ROTATION, 6), vec![1, 2, 3, 4, 4, 5]);
        let h15 = iteration_schedule(CordicMode::HYPERBOLIC_ROTATION, 15);
        assert_eq!(h15, vec![1, 2, 3, 4, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 13]);
        let h16 = iteration_schedule(CordicMode::HYPERBOLIC_ROTATION, 16);
        assert_eq!(h16.last(), Some(&14));
        assert_eq!(iteration_schedule(CordicMode::LINEAR_VECTORING, 3), vec![0, 1, 2]);
    }

    #[test]
    fn repeated_indices_are_needed_for_convergence() {
        // Without the repeat at i=4 the angle residual of a generic target
        // cannot be driven below the last step; with it the residual is.
        let n = 12;
        let with = hyperbolic_convergence_limit(n);
        let without: f64 = (1..=n).map(|i| (-(i as f64)).exp2().atanh()).sum();
        assert!(with > without);
        for k in 0..200 {
            let theta = -1.0 + k as f64 * 0.01;
            let frac = 30;
            let (_, _, z) = hyperbolic_rotate_wide(const_wide(theta, frac), frac, 16);
            let residual = z as f64 / (frac as f64).exp2();
            assert!(residual.abs() <= 2.0 * (-14f64).exp2(), "theta {theta}: {residual}");
        }
    }

    #[test]
    fn inverse_gain_constant() {
        assert!((hyperbolic_inverse_gain(30) - 1.2075).abs() < 1e-4);
    }

    #[test]
    fn hyperbolic_examples() {
        let f = FxPFormat::FXP16;
        let cfg = CordicConfig::activation(f, Accuracy::Accurate).unwrap();
        assert_eq!(cfg.iterations, 16);
        let tol = 4.0 * (-14f64).exp2();
        let r = hyperbolic_rotation(q(0.0, f), &cfg).unwrap();
        assert!((r.x.to_f64() - 1.0).abs() <= tol);
        assert!(r.y.to_f64().abs() <= tol);
        assert!((r.x.to_f64() + r.y.to_f64() - 1.0).abs() <= tol);
        for theta in [1.0, -0.5] {
            let r = hyperbolic_rotation(q(theta, f), &cfg).unwrap();
            let th = q(theta, f).to_f64();
            assert!((r.y.to_f64() - th.sinh()).abs() <= tol, "sinh({theta})");
            assert!((r.x.to_f64() - th.cosh()).abs() <= tol, "cosh({theta})");
        }
        let r = hyperbolic_rotation(q(1.0, f), &cfg).unwrap();
        assert!((r.y.to_f64() - 1.1752).abs() < 1e-3);
        assert!((r.x.to_f64() - 1.5431).abs() < 1e-3);
        let r = hyperbolic_rotation(q(-0.5, f), &cfg).unwrap();
        assert!((r.y.to_f64() + 0.5211).abs() < 1e-3);
        assert!((r.x.to_f64() - 1.1276).abs() < 1e-3);
        assert!(matches!(hyperbolic_rotation(q(1.2, f), &cfg), Err(CordicError::Domain { .. })));
    }

    #[test]
    fn hyperbolic_identity_on_grid() {
        let f = FxPFormat::FXP16;
        let cfg = CordicConfig::activation(f, Accuracy::Accurate).unwrap();
        let n = cfg.iterations as i32;
        let slack = 4.0 * 2f64.powi(-n) + 8.0 * f.ulp();
        for k in 0..1000 {
            let theta = -1.1 + 2.2 * k as f64 / 999.0;
            let r = hyperbolic_rotation(q(theta, f), &cfg).unwrap();
            let (c, s) = (r.x.to_f64(), r.y.to_f64());
            assert!((c * c - s * s - 1.0).abs() <= slack, "theta {theta}: {}", c * c - s * s);
        }
    }

    #[test]
    fn real_recurrence_converges_monotonically() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let w: f64 = rng.gen_range(-2.0..2.0);
            let a: f64 = rng.gen_range(-1.0..=1.0);
            for n in 1..=16 {
                let err = (real_mac(0.0, w, a, n) - w * a).abs();
                assert!(err <= w.abs() * 2f64.powi(-(n as i32)) + 1e-15);
            }
        }
    }

    proptest! {
        #[test]
        fn mac_sign_symmetric(w in -127i64..=127, a in -64i64..=64, acc_mode in 0usize..2) {
            let f = FxPFormat::FXP8;
            let accuracy = [Accuracy::Approximate, Accuracy::Accurate][acc_mode];
            let cfg = CordicConfig::mac(f, accuracy).unwrap();
            let zero = FxPValue::zero(f);
            let wv = FxPValue::from_raw(w, f).unwrap();
            let av = FxPValue::from_raw(a, f).unwrap();
            let pos = linear_mac(zero, wv, av, &cfg).unwrap().y;
            let neg = linear_mac(zero, wv.neg_sat(), av, &cfg).unwrap().y;
            prop_assert_eq!(neg.raw(), -pos.raw());
        }

        #[test]
        fn divide_inverts_multiply(w in -1.9f64..1.9, a in 0.25f64..1.0) {
            let f = FxPFormat::FXP16;
            let mac = CordicConfig::mac(f, Accuracy::Accurate).unwrap();
            let div = CordicConfig::divider(f, Accuracy::Accurate).unwrap();
            let (wq, aq) = (q(w, f), q(a, f));
            let p = linear_mac(FxPValue::zero(f), wq, aq, &mac).unwrap().y;
            prop_assume!((p.raw() as i64).abs() < 2 * aq.raw() as i64);
            let back = linear_divide(p, aq, &div).unwrap().z.to_f64();
            // Multiply error, magnified by 1/a, plus the divide budget.
            let mul_err = wq.to_f64().abs() * 2f64.powi(-9) + 9.0 * 2f64.powi(-18) + f.ulp() / 2.0;
            let div_err = 2f64.powi(-(div.iterations as i32 - 1)) + f.ulp();
            prop_assert!((back - wq.to_f64()).abs() <= mul_err / aq.to_f64() + div_err);
        }
    }
}
