//! Absolute Average Deviation (AAD) pooling and the output normalisation stage.
//!
//! `aad2` follows the two-input block: subtract, take the sign from a
//! comparator, multiply by it, halve. `aad_n` sums `|x_i - x_j|` over all
//! ordered pairs (so each unordered pair counts twice) and divides by
//! `M = N (N - 1)`. Note `aad_n([a, b]) == |a - b| == 2 * aad2(a, b)` up to the
//! final shift's truncation.
//!
//! The pair sum is exact (64-bit accumulator), so permutation and translation
//! invariance hold bit-for-bit; only the final divide approximates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cordic::{linear_vector_wide, GUARD_BITS};
use crate::fxp::{ceil_log2, round_shift_right, FxPFormat, FxPValue, FxpError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoolError {
    #[error("pool configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Fxp(#[from] FxpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolWindow {
    pub window_h: usize,
    pub window_w: usize,
    pub stride: usize,
}

impl PoolWindow {
    pub fn new(window_h: usize, window_w: usize, stride: usize) -> Self {
        PoolWindow { window_h, window_w, stride }
    }

    pub fn elements(&self) -> usize {
        self.window_h * self.window_w
    }

    /// Output `(height, width)` for an input plane, or a configuration error.
    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize), PoolError> {
        if self.window_h == 0 || self.window_w == 0 || self.stride == 0 {
            return Err(PoolError::Config("window and stride must be >= 1".into()));
        }
        if self.elements() < 2 {
            return Err(PoolError::Config("AAD needs at least two elements per window".into()));
        }
        if self.window_h > height || self.window_w > width {
            return Err(PoolError::Config(format!(
                "window {}x{} larger than map {height}x{width}",
                self.window_h, self.window_w
            )));
        }
        Ok(((height - self.window_h) / self.stride + 1, (width - self.window_w) / self.stride + 1))
    }
}

/// Channels x height x width, row-major within each channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    format: FxPFormat,
    data: Vec<FxPValue>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<FxPValue>) -> Result<Self, PoolError> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(PoolError::Config("feature map dimensions must be >= 1".into()));
        }
        if data.len() != channels * height * width {
            return Err(PoolError::Config(format!(
                "expected {} elements for {channels}x{height}x{width}, got {}",
                channels * height * width,
                data.len()
            )));
        }
        let format = data[0].format();
        if let Some(v) = data.iter().find(|v| v.format() != format) {
            return Err(FxpError::FormatMismatch(format, v.format()).into());
        }
        Ok(FeatureMap { channels, height, width, format, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn format(&self) -> FxPFormat {
        self.format
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> FxPValue {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn data(&self) -> &[FxPValue] {
        &self.data
    }

    pub fn into_data(self) -> Vec<FxPValue> {
        self.data
    }

    /// Elements of one window placement in row-major order.
    pub fn window(&self, c: usize, oy: usize, ox: usize, win: &PoolWindow) -> Vec<FxPValue> {
        let mut out = Vec::with_capacity(win.elements());
        for dy in 0..win.window_h {
            for dx in 0..win.window_w {
                out.push(self.get(c, oy * win.stride + dy, ox * win.stride + dx));
            }
        }
        out
    }
}

/// Two-input AAD: `|a - b| / 2` via subtract, sign compare, multiply, shift.
pub fn aad2(a: FxPValue, b: FxPValue) -> Result<FxPValue, FxpError> {
    let diff = a.sub_sat(b)?;
    let sign: i64 = if diff.raw() >= 0 { 1 } else { -1 };
    let magnitude = FxPValue::from_raw_saturating(diff.raw() as i64 * sign, diff.format());
    magnitude.shift_right_arith(1)
}

/// Sum of `|x_i - x_j|` over ordered pairs `i != j`, in raw units.
/// Accumulates in canonical row-major order.
pub fn aad_pair_sum(values: &[FxPValue]) -> i64 {
    let mut sum = 0i64;
    for (i, a) in values.iter().enumerate() {
        for (j, b) in values.iter().enumerate() {
            if i != j {
                sum += (a.raw() as i64 - b.raw() as i64).abs();
            }
        }
    }
    sum
}

/// Divider depth used to normalise a pair sum by `M`.
fn divider_iterations(prescale: u32) -> u32 {
    prescale + GUARD_BITS + 2
}

/// `sum / m` in raw units, rounded into `format`. Power-of-two `m` is a plain
/// shift; otherwise the LV divider runs on a pre-scaled denominator.
/// Returns the value and the divider cycles spent.
pub fn normalize_pair_sum(sum: i64, m: u64, format: FxPFormat) -> (FxPValue, u32) {
    debug_assert!(sum >= 0 && m >= 1);
    if m.is_power_of_two() {
        let raw = round_shift_right(sum as i128, m.trailing_zeros());
        return (FxPValue::from_raw_saturating(raw as i64, format), 1);
    }
    // Pre-scale the denominator by 2^s so the quotient lies in [0, 2).
    let mut s = 0u32;
    while sum as i128 >= 2 * ((m as i128) << s) {
        s += 1;
    }
    let n = divider_iterations(s);
    let qfrac = n + 2;
    let den = (m as i64) << s;
    let headroom = 60 - (64 - den.leading_zeros());
    let (q, _) = linear_vector_wide(sum << headroom, den << headroom, qfrac, n);
    let raw = round_shift_right((q as i128) << s, qfrac);
    (FxPValue::from_raw_saturating(raw as i64, format), n)
}

/// N-input AAD with `M = N (N - 1)` normalisation.
pub fn aad_n(values: &[FxPValue]) -> Result<FxPValue, PoolError> {
    if values.len() < 2 {
        return Err(PoolError::Config("aad_n needs at least two values".into()));
    }
    let format = values[0].format();
    if let Some(v) = values.iter().find(|v| v.format() != format) {
        return Err(FxpError::FormatMismatch(format, v.format()).into());
    }
    let n = values.len() as u64;
    Ok(normalize_pair_sum(aad_pair_sum(values), n * (n - 1), format).0)
}

/// Hardware organisation of the pooling block. Both produce identical values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolVariant {
    /// One element per cycle; deviations against held registers accumulate.
    #[default]
    Sliding,
    /// All subtract-absolute modules fire at once into an adder tree.
    Parallel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PoolReport {
    pub cycles: u64,
    pub outputs: u64,
}

/// Register-accumulation path: elements stream in, each new element is
/// compared against every held register and both orderings are accumulated.
fn sliding_pair_sum(map: &FeatureMap, c: usize, oy: usize, ox: usize, win: &PoolWindow) -> i64 {
    let mut held: Vec<i64> = Vec::with_capacity(win.elements());
    let mut acc = 0i64;
    for dy in 0..win.window_h {
        for dx in 0..win.window_w {
            let e = map.get(c, oy * win.stride + dy, ox * win.stride + dx).raw() as i64;
            for r in &held {
                acc += 2 * (e - r).abs();
            }
            held.push(e);
        }
    }
    acc
}

pub fn pool(map: &FeatureMap, win: &PoolWindow, variant: PoolVariant) -> Result<(FeatureMap, PoolReport), PoolError> {
    let (channels, height, width) = map.dims();
    let (oh, ow) = win.output_dims(height, width)?;
    let n = win.elements() as u64;
    let m = n * (n - 1);
    let mut data = Vec::with_capacity(channels * oh * ow);
    let mut cycles = 0u64;
    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let (sum, fill) = match variant {
                    PoolVariant::Sliding => (sliding_pair_sum(map, c, oy, ox, win), n),
                    PoolVariant::Parallel => {
                        // SA modules plus a log-depth adder tree.
                        let sum = aad_pair_sum(&map.window(c, oy, ox, win));
                        (sum, 1 + ceil_log2(m) as u64)
                    }
                };
                let (value, div_cycles) = normalize_pair_sum(sum, m, map.format());
                cycles += fill + div_cycles as u64;
                data.push(value);
            }
        }
    }
    let out = FeatureMap::new(channels, oh, ow, data)?;
    Ok((out, PoolReport { cycles, outputs: (channels * oh * ow) as u64 }))
}

/// Power-of-two max-abs rescale into roughly [-1, 1]; identity when the map
/// already fits.
pub fn normalize(map: &FeatureMap) -> FeatureMap {
    let frac = map.format().frac_bits();
    let max_abs = map.data().iter().map(|v| (v.raw() as i64).unsigned_abs()).max().unwrap_or(0);
    let shift = ceil_log2(max_abs).saturating_sub(frac);
    if shift == 0 {
        return map.clone();
    }
    let data = map.data().iter().map(|v| FxPValue::from_raw_saturating((v.raw() >> shift) as i64, v.format()));
    let (c, h, w) = map.dims();
    FeatureMap::new(c, h, w, data.collect()).expect("same shape")
}

/// Double-precision AAD reference over a window.
pub fn reference_aad(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mut sum = 0.0;
    for (i, a) in values.iter().enumerate() {
        for (j, b) in values.iter().enumerate() {
            if i != j {
                sum += (a - b).abs();
            }
        }
    }
    sum / (n * (n - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f8() -> FxPFormat {
        FxPFormat::new(8, 0).unwrap()
    }

    fn ints(xs: &[i64]) -> Vec<FxPValue> {
        xs.iter().map(|&x| FxPValue::from_raw(x, f8()).unwrap()).collect()
    }

    /// Brute force over unordered pairs, doubled.
    fn brute_pair_sum(xs: &[i64]) -> i64 {
        let mut s = 0;
        for i in 0..xs.len() {
            for j in i + 1..xs.len() {
                s += 2 * (xs[i] - xs[j]).abs();
            }
        }
        s
    }

    #[test]
    fn aad2_examples() {
        let v = ints(&[6, 2, 5]);
        assert_eq!(aad2(v[2], v[2]).unwrap().raw(), 0);
        assert_eq!(aad2(v[0], v[1]).unwrap().raw(), 2);
        assert_eq!(aad2(v[1], v[0]).unwrap().raw(), 2);
    }

    #[test]
    fn aad_n_examples() {
        assert_eq!(aad_n(&ints(&[3, 3, 3])).unwrap().raw(), 0);
        assert_eq!(aad_pair_sum(&ints(&[1, 2, 3])), 8);
        let f = FxPFormat::new(8, 4).unwrap();
        let vals: Vec<FxPValue> = [1.0, 2.0, 3.0].iter().map(|&x| FxPValue::quantize(x, f)).collect();
        let got = aad_n(&vals).unwrap();
        assert_eq!(got, FxPValue::quantize(8.0 / 6.0, f));
        // Two inputs: M = 2, so the result is |a - b|, twice the aad2 output.
        let ab = ints(&[9, 4]);
        assert_eq!(aad_n(&ab).unwrap().raw(), 5);
        assert_eq!(aad2(ab[0], ab[1]).unwrap().raw(), 2);
        assert!(aad_n(&ints(&[1])).is_err());
    }

    #[test]
    fn pool_examples() {
        let f = FxPFormat::new(8, 4).unwrap();
        let q = |x: f64| FxPValue::quantize(x, f);
        let constant = FeatureMap::new(1, 4, 4, vec![q(1.5); 16]).unwrap();
        let (out, _) = pool(&constant, &PoolWindow::new(2, 2, 2), PoolVariant::Sliding).unwrap();
        assert_eq!(out.dims(), (1, 2, 2));
        assert!(out.data().iter().all(|v| v.is_zero()));
        let map = FeatureMap::new(1, 2, 2, vec![q(1.0), q(2.0), q(3.0), q(4.0)]).unwrap();
        let (out, _) = pool(&map, &PoolWindow::new(2, 2, 1), PoolVariant::Parallel).unwrap();
        assert_eq!(out.data()[0], q(20.0 / 12.0));
        assert!((reference_aad(&[1.0, 2.0, 3.0, 4.0]) - 20.0 / 12.0).abs() < 1e-12);
        assert!(matches!(pool(&map, &PoolWindow::new(1, 1, 1), PoolVariant::Sliding), Err(PoolError::Config(_))));
        assert!(matches!(pool(&map, &PoolWindow::new(3, 3, 1), PoolVariant::Sliding), Err(PoolError::Config(_))));
    }

    #[test]
    fn normalize_examples() {
        let f = FxPFormat::new(8, 4).unwrap();
        let q = |x: f64| FxPValue::quantize(x, f);
        let zeros = FeatureMap::new(1, 1, 3, vec![q(0.0); 3]).unwrap();
        assert_eq!(normalize(&zeros), zeros);
        let unit = FeatureMap::new(1, 1, 3, vec![q(1.0), q(-0.5), q(0.25)]).unwrap();
        assert_eq!(normalize(&unit), unit);
        let big = FeatureMap::new(1, 1, 3, vec![q(4.0), q(-2.0), q(1.0)]).unwrap();
        let out: Vec<f64> = normalize(&big).data().iter().map(|v| v.to_f64()).collect();
        assert_eq!(out, vec![1.0, -0.5, 0.25]);
    }

    #[test]
    fn exhaustive_small_sequences_match_brute_force() {
        let grid: Vec<i64> = (-8..8).collect();
        for len in 2..=4usize {
            let total = grid.len().pow(len as u32);
            for idx in 0..total {
                let mut k = idx;
                let xs: Vec<i64> = (0..len)
                    .map(|_| {
                        let v = grid[k % grid.len()];
                        k /= grid.len();
                        v
                    })
                    .collect();
                assert_eq!(aad_pair_sum(&ints(&xs)), brute_pair_sum(&xs));
            }
        }
    }

    proptest! {
        #[test]
        fn divide_within_budget(xs in proptest::collection::vec(-128i64..128, 2..9)) {
            let got = aad_n(&ints(&xs)).unwrap().raw() as f64;
            let n = xs.len() as f64;
            let exact = brute_pair_sum(&xs) as f64 / (n * (n - 1.0));
            prop_assert!((got - exact.min(127.0)).abs() <= 0.5 + 1.0 / 32.0, "{got} vs {exact}");
        }

        #[test]
        fn permutation_and_translation_invariant(
            xs in proptest::collection::vec(-60i64..60, 2..9),
            shift in -60i64..60,
            rot in 0usize..8,
        ) {
            let base = aad_n(&ints(&xs)).unwrap();
            let mut perm = xs.clone();
            perm.rotate_left(rot % xs.len());
            perm.reverse();
            prop_assert_eq!(aad_n(&ints(&perm)).unwrap(), base);
            let moved: Vec<i64> = xs.iter().map(|x| x + shift).collect();
            prop_assert_eq!(aad_n(&ints(&moved)).unwrap(), base);
            prop_assert!(base.raw() >= 0);
        }

        #[test]
        fn variants_agree(
            c in 1usize..3, h in 2usize..7, w in 2usize..7,
            wh in 1usize..3, ww in 2usize..4, stride in 1usize..3,
            seed in proptest::collection::vec(-128i64..128, 128),
        ) {
            prop_assume!(ww <= w && wh <= h);
            let data: Vec<FxPValue> = (0..c * h * w).map(|i| FxPValue::from_raw(seed[i % seed.len()], f8()).unwrap()).collect();
            let map = FeatureMap::new(c, h, w, data).unwrap();
            let win = PoolWindow::new(wh, ww, stride);
            let (a, _) = pool(&map, &win, PoolVariant::Sliding).unwrap();
            let (b, _) = pool(&map, &win, PoolVariant::Parallel).unwrap();
            prop_assert_eq!(&a, &b);
            let (_, oh, ow) = a.dims();
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let direct = aad_n(&map.window(ch, oy, ox, &win)).unwrap();
                        prop_assert_eq!(a.get(ch, oy, ox), direct);
                    }
                }
            }
        }
    }
}
