//! Parameter memory: address-width computation, address packing, the
//! 64-segment weight memory and LIFO loading.
//!
//! Address layout (MSB to LSB): `layer | select | neuron | input`, with
//! select = 1 for biases. Bias addresses carry the neuron index in the same
//! position as weights and zeros in the input field. Layer ids are 0-based.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fxp::{ceil_log2, FxPFormat, FxPValue, FxpError};

pub const SEGMENTS: usize = 64;
pub const IMAGE_MAGIC: &[u8; 4] = b"CVTP";
pub const IMAGE_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemmapError {
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("address field out of range: {0}")]
    Range(String),
    #[error("address {addr:#x} does not fit in {bits} bits")]
    Width { addr: u64, bits: u32 },
    #[error("load incomplete: missing {} address(es): {}", .missing.len(), fmt_addrs(.missing))]
    Missing { missing: Vec<u32> },
    #[error("load rejected: unexpected or duplicate address {0:#x}")]
    Unexpected(u32),
    #[error("load order violation at word {position}: expected {expected:#x}, found {found:#x}")]
    Order { position: usize, expected: u32, found: u32 },
    #[error("parameter image: {0}")]
    Image(String),
    #[error(transparent)]
    Fxp(#[from] FxpError),
}

fn fmt_addrs(addrs: &[u32]) -> String {
    let shown: Vec<String> = addrs.iter().take(8).map(|a| format!("{a:#x}")).collect();
    if addrs.len() > 8 {
        format!("{}, ...", shown.join(", "))
    } else {
        shown.join(", ")
    }
}

/// Per-layer neuron counts `N(l)` and input counts `J(l)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    neurons: Vec<usize>,
    inputs: Vec<usize>,
}

impl Topology {
    /// Arbitrary per-layer shapes (convolution layers use `N = out_channels`,
    /// `J = in_channels * kh * kw`). No chaining constraint is enforced.
    pub fn new(neurons: Vec<usize>, inputs: Vec<usize>) -> Result<Self, MemmapError> {
        if neurons.is_empty() {
            return Err(MemmapError::Topology("at least one layer required".into()));
        }
        if neurons.len() != inputs.len() {
            return Err(MemmapError::Topology(format!(
                "{} neuron counts vs {} input counts",
                neurons.len(),
                inputs.len()
            )));
        }
        if neurons.iter().chain(&inputs).any(|&v| v == 0) {
            return Err(MemmapError::Topology("layer sizes must be >= 1".into()));
        }
        Ok(Topology { neurons, inputs })
    }

    /// Fully connected chain: `J(1) = input_dim`, `J(l+1) = N(l)`.
    pub fn dense(input_dim: usize, neurons: &[usize]) -> Result<Self, MemmapError> {
        let mut inputs = Vec::with_capacity(neurons.len());
        let mut prev = input_dim;
        for &n in neurons {
            inputs.push(prev);
            prev = n;
        }
        Topology::new(neurons.to_vec(), inputs)
    }

    /// Parses `"196-64-32-32-10"` (input dimension first).
    pub fn parse_chain(s: &str) -> Result<Self, MemmapError> {
        let dims: Vec<usize> = s
            .split('-')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|e| MemmapError::Topology(format!("{s:?}: {e}")))?;
        if dims.len() < 2 {
            return Err(MemmapError::Topology(format!("{s:?}: need input and at least one layer")));
        }
        Topology::dense(dims[0], &dims[1..])
    }

    pub fn layers(&self) -> usize {
        self.neurons.len()
    }

    pub fn neurons(&self, layer: usize) -> usize {
        self.neurons[layer]
    }

    pub fn inputs(&self, layer: usize) -> usize {
        self.inputs[layer]
    }

    pub fn is_chained(&self) -> bool {
        self.inputs.iter().skip(1).zip(&self.neurons).all(|(j, n)| j == n)
    }

    pub fn param_count(&self) -> usize {
        self.neurons.iter().zip(&self.inputs).map(|(n, j)| n * (j + 1)).sum()
    }

    /// Every valid address in engine read order: per layer, per neuron, the
    /// bias followed by weights `0..J`.
    pub fn read_order(&self) -> Vec<ParamAddress> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in 0..self.layers() {
            for neuron in 0..self.neurons[layer] {
                out.push(ParamAddress::bias(layer, neuron));
                for input in 0..self.inputs[layer] {
                    out.push(ParamAddress::weight(layer, neuron, input));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressSpec {
    pub layer_bits: u32,
    pub select_bits: u32,
    pub payload_bits: u32,
    pub total_bits: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AddressWidths {
    pub spec: AddressSpec,
    /// `R_addr(l)` per layer.
    pub layer_payload_bits: Vec<u32>,
    /// `Addr(l)` per layer.
    pub layer_total_bits: Vec<u32>,
}

pub fn addr_width(t: &Topology) -> AddressWidths {
    let layer_bits = ceil_log2(t.layers() as u64);
    let payload: Vec<u32> =
        (0..t.layers()).map(|l| ceil_log2(t.neurons(l) as u64) + ceil_log2(t.inputs(l) as u64)).collect();
    let payload_bits = payload.iter().copied().max().unwrap_or(0);
    AddressWidths {
        spec: AddressSpec { layer_bits, select_bits: 1, payload_bits, total_bits: layer_bits + 1 + payload_bits },
        layer_total_bits: payload.iter().map(|r| layer_bits + 1 + r).collect(),
        layer_payload_bits: payload,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamAddress {
    pub layer: usize,
    pub is_bias: bool,
    pub neuron: usize,
    pub input: usize,
}

impl ParamAddress {
    pub fn weight(layer: usize, neuron: usize, input: usize) -> Self {
        ParamAddress { layer, is_bias: false, neuron, input }
    }

    pub fn bias(layer: usize, neuron: usize) -> Self {
        ParamAddress { layer, is_bias: true, neuron, input: 0 }
    }

    pub fn segment(&self) -> usize {
        self.neuron % SEGMENTS
    }
}

/// Neuron field offset within the payload for one layer.
fn neuron_shift(layer: usize, t: &Topology) -> u32 {
    ceil_log2(t.inputs(layer) as u64)
}

pub fn encode(a: &ParamAddress, spec: &AddressSpec, t: &Topology) -> Result<u32, MemmapError> {
    if a.layer >= t.layers() {
        return Err(MemmapError::Range(format!("layer {} >= L = {}", a.layer, t.layers())));
    }
    if a.neuron >= t.neurons(a.layer) {
        return Err(MemmapError::Range(format!("neuron {} >= N({}) = {}", a.neuron, a.layer, t.neurons(a.layer))));
    }
    if a.is_bias && a.input != 0 {
        return Err(MemmapError::Range("bias address with nonzero input field".into()));
    }
    if !a.is_bias && a.input >= t.inputs(a.layer) {
        return Err(MemmapError::Range(format!("input {} >= J({}) = {}", a.input, a.layer, t.inputs(a.layer))));
    }
    let payload = ((a.neuron as u64) << neuron_shift(a.layer, t)) | a.input as u64;
    let word = ((a.layer as u64) << (spec.payload_bits + 1)) | ((a.is_bias as u64) << spec.payload_bits) | payload;
    if spec.total_bits > 32 || word >> spec.total_bits != 0 {
        return Err(MemmapError::Width { addr: word, bits: spec.total_bits });
    }
    Ok(word as u32)
}

/// Inverse of [`encode`]. With `lenient`, nonzero input bits on a bias
/// address are ignored rather than rejected.
pub fn decode(bits: u32, spec: &AddressSpec, t: &Topology, lenient: bool) -> Result<ParamAddress, MemmapError> {
    let bits = bits as u64;
    if spec.total_bits < 64 && bits >> spec.total_bits != 0 {
        return Err(MemmapError::Width { addr: bits, bits: spec.total_bits });
    }
    let layer = (bits >> (spec.payload_bits + 1)) as usize;
    if layer >= t.layers() {
        return Err(MemmapError::Range(format!("layer {layer} >= L = {}", t.layers())));
    }
    let is_bias = (bits >> spec.payload_bits) & 1 == 1;
    let payload = bits & ((1u64 << spec.payload_bits) - 1);
    let shift = neuron_shift(layer, t);
    let neuron = (payload >> shift) as usize;
    let input = (payload & ((1u64 << shift) - 1)) as usize;
    if neuron >= t.neurons(layer) {
        return Err(MemmapError::Range(format!("neuron {neuron} >= N({layer}) = {}", t.neurons(layer))));
    }
    if is_bias {
        if input != 0 && !lenient {
            return Err(MemmapError::Range(format!("bias address {bits:#x} has nonzero input bits")));
        }
        return Ok(ParamAddress::bias(layer, neuron));
    }
    if input >= t.inputs(layer) {
        return Err(MemmapError::Range(format!("input {input} >= J({layer}) = {}", t.inputs(layer))));
    }
    Ok(ParamAddress::weight(layer, neuron, input))
}

/// One cycle of the `load_param_weight` interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadWord {
    pub addr: u32,
    pub value: FxPValue,
    pub valid: bool,
}

/// 64 LIFO segments plus an address index for random-access reads.
#[derive(Debug, Clone, Default)]
pub struct ParamMemory {
    segments: Vec<Vec<(u32, FxPValue)>>,
    index: HashMap<u32, (usize, usize)>,
}

impl ParamMemory {
    pub fn new() -> Self {
        ParamMemory { segments: vec![Vec::new(); SEGMENTS], index: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn read(&self, addr: u32) -> Option<FxPValue> {
        self.index.get(&addr).map(|&(s, i)| self.segments[s][i].1)
    }

    pub fn segment_of(&self, addr: u32) -> Option<usize> {
        self.index.get(&addr).map(|&(s, _)| s)
    }

    pub fn segment(&self, s: usize) -> &[(u32, FxPValue)] {
        &self.segments[s]
    }

    /// Pops every segment from its top: the engine's forward read stream,
    /// restricted to that segment.
    pub fn read_forward(&self, s: usize) -> impl Iterator<Item = &(u32, FxPValue)> {
        self.segments[s].iter().rev()
    }
}

/// Write sequence for a set of parameters: the reverse of the read order.
pub fn lifo_write_order(
    t: &Topology,
    spec: &AddressSpec,
    mut value_of: impl FnMut(&ParamAddress) -> FxPValue,
) -> Result<Vec<LoadWord>, MemmapError> {
    let mut out = Vec::with_capacity(t.param_count());
    for a in t.read_order().iter().rev() {
        out.push(LoadWord { addr: encode(a, spec, t)?, value: value_of(a), valid: true });
    }
    Ok(out)
}

/// Loads a LIFO-ordered stream. Cycles with `valid = false` write nothing.
pub fn lifo_load(stream: &[LoadWord], t: &Topology, spec: &AddressSpec) -> Result<ParamMemory, MemmapError> {
    let expected: Vec<u32> = t.read_order().iter().rev().map(|a| encode(a, spec, t)).collect::<Result<_, _>>()?;
    let words: Vec<&LoadWord> = stream.iter().filter(|w| w.valid).collect();

    let expected_set: BTreeSet<u32> = expected.iter().copied().collect();
    let mut seen = BTreeSet::new();
    for w in &words {
        if !expected_set.contains(&w.addr) || !seen.insert(w.addr) {
            return Err(MemmapError::Unexpected(w.addr));
        }
    }
    let missing: Vec<u32> = expected.iter().rev().copied().filter(|a| !seen.contains(a)).collect();
    if !missing.is_empty() {
        return Err(MemmapError::Missing { missing });
    }
    if let Some((position, (e, w))) = expected.iter().zip(&words).enumerate().find(|(_, (e, w))| **e != w.addr) {
        return Err(MemmapError::Order { position, expected: *e, found: w.addr });
    }

    let mut mem = ParamMemory::new();
    for w in words {
        let a = decode(w.addr, spec, t, false)?;
        let seg = a.segment();
        mem.index.insert(w.addr, (seg, mem.segments[seg].len()));
        mem.segments[seg].push((w.addr, w.value));
    }
    Ok(mem)
}

/// Serialised parameter image. `format` is `None` for mixed-precision images,
/// in which case per-layer formats come from the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamImage {
    pub addr_bits: u8,
    pub format: Option<FxPFormat>,
    pub entries: Vec<ImageEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub addr: u32,
    pub raw: i32,
}

impl ParamImage {
    pub fn from_words(words: &[LoadWord], spec: &AddressSpec) -> Self {
        let valid: Vec<&LoadWord> = words.iter().filter(|w| w.valid).collect();
        let first = valid.first().map(|w| w.value.format());
        let uniform = first.filter(|f| valid.iter().all(|w| w.value.format() == *f));
        ParamImage {
            addr_bits: spec.total_bits as u8,
            format: uniform,
            entries: valid.iter().map(|w| ImageEntry { addr: w.addr, raw: w.value.raw() }).collect(),
        }
    }

    /// Rebuilds the load stream; `layer_formats` resolves mixed images.
    pub fn to_words(
        &self,
        t: &Topology,
        spec: &AddressSpec,
        layer_formats: &[FxPFormat],
    ) -> Result<Vec<LoadWord>, MemmapError> {
        if self.addr_bits as u32 != spec.total_bits {
            return Err(MemmapError::Image(format!(
                "image has {}-bit addresses, topology needs {}",
                self.addr_bits, spec.total_bits
            )));
        }
        self.entries
            .iter()
            .map(|e| {
                let a = decode(e.addr, spec, t, false)?;
                let format = match self.format {
                    Some(f) => f,
                    None => *layer_formats
                        .get(a.layer)
                        .ok_or_else(|| MemmapError::Image(format!("no format for layer {}", a.layer)))?,
                };
                Ok(LoadWord { addr: e.addr, value: FxPValue::from_raw(e.raw as i64, format)?, valid: true })
            })
            .collect()
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(IMAGE_MAGIC)?;
        w.write_all(&IMAGE_VERSION.to_le_bytes())?;
        w.write_all(&[self.addr_bits, self.format.map_or(0, |f| f.code())])?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&e.addr.to_le_bytes())?;
            w.write_all(&e.raw.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, MemmapError> {
        let io = |e: std::io::Error| MemmapError::Image(e.to_string());
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(io)?;
        if &header[0..4] != IMAGE_MAGIC {
            return Err(MemmapError::Image("bad magic".into()));
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != IMAGE_VERSION {
            return Err(MemmapError::Image(format!("unsupported version {version}")));
        }
        let addr_bits = header[6];
        let format = match header[7] {
            0 => None,
            code => Some(
                FxPFormat::from_code(code)
                    .ok_or_else(|| MemmapError::Image(format!("unknown format code {code:#x}")))?,
            ),
        };
        let count = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let mut body = Vec::new();
        r.read_to_end(&mut body).map_err(io)?;
        if body.len() != count * 8 {
            return Err(MemmapError::Image(format!(
                "expected {count} entries ({} bytes), found {} bytes",
                count * 8,
                body.len()
            )));
        }
        let entries = body
            .chunks_exact(8)
            .map(|c| ImageEntry {
                addr: u32::from_le_bytes(c[0..4].try_into().unwrap()),
                raw: i32::from_le_bytes(c[4..8].try_into().unwrap()),
            })
            .collect();
        Ok(ParamImage { addr_bits, format, entries })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("image serialises")
    }

    pub fn from_json(s: &str) -> Result<Self, MemmapError> {
        serde_json::from_str(s).map_err(|e| MemmapError::Image(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> Topology {
        Topology::new(vec![4, 2], vec![3, 4]).unwrap()
    }

    #[test]
    fn width_examples() {
        let w = addr_width(&Topology::new(vec![1], vec![1]).unwrap());
        assert_eq!((w.spec.payload_bits, w.spec.total_bits), (0, 1));
        let w = addr_width(&Topology::parse_chain("196-64-32-32-10").unwrap());
        assert_eq!(w.layer_payload_bits, vec![14, 11, 10, 9]);
        assert_eq!((w.spec.payload_bits, w.spec.total_bits), (14, 17));
        let w = addr_width(&toy());
        assert_eq!((w.spec.payload_bits, w.spec.total_bits), (4, 6));
    }

    #[test]
    fn bias_zero_address() {
        let t = toy();
        let spec = addr_width(&t).spec;
        let bits = encode(&ParamAddress::bias(0, 0), &spec, &t).unwrap();
        assert_eq!(bits, 1 << spec.payload_bits);
        let bad = bits | 1;
        assert!(decode(bad, &spec, &t, false).is_err());
        assert_eq!(decode(bad, &spec, &t, true).unwrap(), ParamAddress::bias(0, 0));
    }

    #[test]
    fn decode_rejects_out_of_range_neuron() {
        let t = toy();
        let spec = addr_width(&t).spec;
        let word = (1u32 << (spec.payload_bits + 1)) | (2u32 << neuron_shift(1, &t));
        assert!(matches!(decode(word, &spec, &t, false), Err(MemmapError::Range(_))));
        assert!(encode(&ParamAddress::weight(0, 4, 0), &spec, &t).is_err());
        assert!(encode(&ParamAddress::weight(0, 0, 3), &spec, &t).is_err());
    }

    fn exhaustive_bijection(t: &Topology) {
        let spec = addr_width(t).spec;
        let mut seen = BTreeSet::new();
        for a in t.read_order() {
            let bits = encode(&a, &spec, t).unwrap();
            assert!(seen.insert(bits), "alias at {a:?}");
            assert_eq!(decode(bits, &spec, t, false).unwrap(), a);
        }
        // Every other pattern is rejected.
        let valid = (0..1u64 << spec.total_bits).filter(|&b| decode(b as u32, &spec, t, false).is_ok()).count();
        assert_eq!(valid, seen.len());
    }

    #[test]
    fn bijection_small_topologies() {
        exhaustive_bijection(&toy());
        exhaustive_bijection(&Topology::new(vec![1], vec![1]).unwrap());
        exhaustive_bijection(&Topology::parse_chain("5-3-7-1").unwrap());
        exhaustive_bijection(&Topology::new(vec![3, 16], vec![1, 9]).unwrap());
    }

    #[test]
    fn lifo_reverse_then_read_forward() {
        let t = Topology::new(vec![1], vec![2]).unwrap();
        let spec = addr_width(&t).spec;
        let f = FxPFormat::FXP8;
        let order = t.read_order();
        let vals: HashMap<ParamAddress, FxPValue> =
            order.iter().enumerate().map(|(i, a)| (*a, FxPValue::from_raw(i as i64 + 1, f).unwrap())).collect();
        let words = lifo_write_order(&t, &spec, |a| vals[a]).unwrap();
        assert_eq!(words.len(), 3);
        let mem = lifo_load(&words, &t, &spec).unwrap();
        let read: Vec<i32> = mem.read_forward(0).map(|(_, v)| v.raw()).collect();
        assert_eq!(read, vec![1, 2, 3]);
    }

    #[test]
    fn lifo_errors() {
        let t = toy();
        let spec = addr_width(&t).spec;
        let z = FxPValue::zero(FxPFormat::FXP8);
        let mut words = lifo_write_order(&t, &spec, |_| z).unwrap();
        let bias_pos = words.len() - 1;
        let bias_addr = words[bias_pos].addr;
        assert_eq!(decode(bias_addr, &spec, &t, false).unwrap(), ParamAddress::bias(0, 0));

        let mut dropped = words.clone();
        dropped[bias_pos].valid = false;
        match lifo_load(&dropped, &t, &spec) {
            Err(MemmapError::Missing { missing }) => assert_eq!(missing, vec![bias_addr]),
            other => panic!("{other:?}"),
        }
        assert!(lifo_load(&dropped, &t, &spec).unwrap_err().to_string().contains(&format!("{bias_addr:#x}")));

        words.swap(0, 1);
        assert!(matches!(lifo_load(&words, &t, &spec), Err(MemmapError::Order { position: 0, .. })));
    }

    #[test]
    fn invalid_cycles_write_nothing() {
        let t = toy();
        let spec = addr_width(&t).spec;
        let z = FxPValue::zero(FxPFormat::FXP8);
        let words = lifo_write_order(&t, &spec, |_| z).unwrap();
        let mut padded = Vec::new();
        for w in &words {
            padded.push(LoadWord { addr: 0x3f, value: z, valid: false });
            padded.push(*w);
        }
        assert_eq!(lifo_load(&padded, &t, &spec).unwrap().len(), t.param_count());
    }

    #[test]
    fn image_round_trip() {
        let t = Topology::parse_chain("6-5-3").unwrap();
        let spec = addr_width(&t).spec;
        let formats = [FxPFormat::FXP8, FxPFormat::FXP16];
        let words = lifo_write_order(&t, &spec, |a| {
            FxPValue::from_raw_saturating((a.neuron * 7 + a.input) as i64 - 9, formats[a.layer])
        })
        .unwrap();
        let img = ParamImage::from_words(&words, &spec);
        assert_eq!(img.format, None);
        let mut buf = Vec::new();
        img.write_binary(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 8 * t.param_count());
        let back = ParamImage::read_binary(&buf[..]).unwrap();
        assert_eq!(back, img);
        assert_eq!(back.to_words(&t, &spec, &formats).unwrap(), words);
        assert_eq!(ParamImage::from_json(&img.to_json()).unwrap(), img);
        assert!(ParamImage::read_binary(&buf[..buf.len() - 1]).is_err());
    }

    fn topologies() -> impl Strategy<Value = Topology> {
        (1usize..=8)
            .prop_flat_map(|l| (proptest::collection::vec(1usize..=256, l), proptest::collection::vec(1usize..=256, l)))
            .prop_map(|(n, j)| Topology::new(n, j).unwrap())
    }

    proptest! {
        #[test]
        fn uniform_width_dominates(t in topologies()) {
            let w = addr_width(&t);
            for l in 0..t.layers() {
                prop_assert!(w.spec.total_bits >= w.layer_total_bits[l]);
                prop_assert_eq!(w.layer_total_bits[l], w.spec.layer_bits + 1 + w.layer_payload_bits[l]);
            }
        }

        #[test]
        fn random_round_trip(t in topologies(), picks in proptest::collection::vec((0usize..8, 0usize..256, 0usize..256, any::<bool>()), 64)) {
            let spec = addr_width(&t).spec;
            for (l, n, j, bias) in picks {
                let l = l % t.layers();
                let a = if bias {
                    ParamAddress::bias(l, n % t.neurons(l))
                } else {
                    ParamAddress::weight(l, n % t.neurons(l), j % t.inputs(l))
                };
                let bits = encode(&a, &spec, &t).unwrap();
                prop_assert_eq!(decode(bits, &spec, &t, false).unwrap(), a);
            }
        }

        #[test]
        fn segment_residency(n in 1usize..200, j in 1usize..4) {
            let t = Topology::new(vec![n], vec![j]).unwrap();
            let spec = addr_width(&t).spec;
            let words = lifo_write_order(&t, &spec, |_| FxPValue::zero(FxPFormat::FXP4)).unwrap();
            let mem = lifo_load(&words, &t, &spec).unwrap();
            for a in t.read_order() {
                let bits = encode(&a, &spec, &t).unwrap();
                prop_assert_eq!(mem.segment_of(bits), Some(a.neuron % SEGMENTS));
            }
        }
    }
}
