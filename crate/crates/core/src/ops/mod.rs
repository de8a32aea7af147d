//! The operation dictionary, operation chains and chain enumeration.
//!
//! Every operation maps an [`ImageBuffer`] to a new buffer of identical
//! dimensions and re-quantizes to 8-bit. Chains apply their operations left to
//! right. The unaltered class is the empty chain, written `AU`.
//!
//! Text syntax: steps joined by `>`, e.g. `MF5>GB1.1>RS1.5`, `JPEG85`, `AWGN2`.

pub(crate) mod gaussian;
mod histeq;
mod jpeg;
mod median;
mod noise;
mod resample;

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

pub use gaussian::{gaussian_blur, gaussian_kernel, unsharp_mask, GB_KERNEL};
pub use histeq::hist_eq;
pub use jpeg::{jpeg_roundtrip, quant_table, quality_scale, Subsampling, ANNEX_K_CHROMA, ANNEX_K_LUMA};
pub use median::median_filter;
pub use noise::awgn;
pub use resample::{bilinear_resize, resample};

use crate::error::{param_err, Error, Result};
use crate::image::ImageBuffer;
use crate::rng::derive_seed;

/// Operation kinds in their fixed canonical order (the order used by chain enumeration).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpKind {
    Mf,
    Gb,
    Jpeg,
    Rs,
    Usm,
    He,
    Awgn,
}

impl OpKind {
    pub const ALL: [OpKind; 7] =
        [OpKind::Mf, OpKind::Gb, OpKind::Jpeg, OpKind::Rs, OpKind::Usm, OpKind::He, OpKind::Awgn];

    pub fn symbol(self) -> &'static str {
        match self {
            OpKind::Mf => "MF",
            OpKind::Gb => "GB",
            OpKind::Jpeg => "JPEG",
            OpKind::Rs => "RS",
            OpKind::Usm => "USM",
            OpKind::He => "HE",
            OpKind::Awgn => "AWGN",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// One parameterized operation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Operation {
    /// Median filter with an odd square window.
    Median { kernel: usize },
    /// 5x5 Gaussian blur.
    GaussianBlur { sigma: f64 },
    Jpeg { quality: u8, subsampling: Subsampling },
    /// Bilinear rescale followed by a center crop back to the input size.
    Resample { scale: f64 },
    Unsharp { lambda: f64 },
    HistEq,
    Noise { sigma: f64 },
}

impl Operation {
    pub fn kind(&self) -> OpKind {
        match self {
            Operation::Median { .. } => OpKind::Mf,
            Operation::GaussianBlur { .. } => OpKind::Gb,
            Operation::Jpeg { .. } => OpKind::Jpeg,
            Operation::Resample { .. } => OpKind::Rs,
            Operation::Unsharp { .. } => OpKind::Usm,
            Operation::HistEq => OpKind::He,
            Operation::Noise { .. } => OpKind::Awgn,
        }
    }

    /// Check parameters against the operation dictionary ranges.
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Operation::Median { kernel } => kernel == 3 || kernel == 5,
            Operation::GaussianBlur { sigma } => [0.7, 1.0, 1.1].contains(&sigma),
            Operation::Jpeg { quality, .. } => [70, 75, 80, 85, 90].contains(&quality),
            Operation::Resample { scale } => scale == 1.2 || scale == 1.5,
            Operation::Unsharp { lambda } => lambda == 1.0,
            Operation::HistEq => true,
            Operation::Noise { sigma } => sigma == 2.0,
        };
        if ok {
            Ok(())
        } else {
            Err(param_err!("{self} is outside the operation dictionary (use unsafe params to allow)"))
        }
    }

    /// Check only that the parameters are computable.
    pub fn validate_domain(&self) -> Result<()> {
        let ok = match *self {
            Operation::Median { kernel } => kernel % 2 == 1,
            Operation::GaussianBlur { sigma } => sigma > 0.0,
            Operation::Jpeg { quality, .. } => (1..=100).contains(&quality),
            Operation::Resample { scale } => scale > 0.0,
            Operation::Unsharp { lambda } => lambda >= 0.0,
            Operation::HistEq => true,
            Operation::Noise { sigma } => sigma >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(param_err!("invalid parameter in {self}"))
        }
    }

    pub fn apply(&self, img: &ImageBuffer, seed: u64) -> Result<ImageBuffer> {
        match *self {
            Operation::Median { kernel } => median_filter(img, kernel),
            Operation::GaussianBlur { sigma } => gaussian_blur(img, sigma),
            Operation::Jpeg { quality, subsampling } => jpeg_roundtrip(img, quality, subsampling),
            Operation::Resample { scale } => resample(img, scale),
            Operation::Unsharp { lambda } => unsharp_mask(img, lambda),
            Operation::HistEq => Ok(hist_eq(img)),
            Operation::Noise { sigma } => awgn(img, sigma, seed),
        }
    }
}

fn fmt_decimal(f: &mut fmt::Formatter<'_>, v: f64) -> fmt::Result {
    if v == libm::trunc(v) {
        write!(f, "{v:.1}")
    } else {
        write!(f, "{v}")
    }
}

fn fmt_compact(f: &mut fmt::Formatter<'_>, v: f64) -> fmt::Result {
    if v == libm::trunc(v) {
        write!(f, "{v:.0}")
    } else {
        write!(f, "{v}")
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Operation::Median { kernel } => write!(f, "MF{kernel}"),
            Operation::GaussianBlur { sigma } => {
                f.write_str("GB")?;
                fmt_decimal(f, sigma)
            }
            Operation::Jpeg { quality, subsampling } => match subsampling {
                Subsampling::None => write!(f, "JPEG{quality}"),
                Subsampling::Yuv420 => write!(f, "JPEG{quality}:420"),
            },
            Operation::Resample { scale } => {
                f.write_str("RS")?;
                fmt_decimal(f, scale)
            }
            Operation::Unsharp { lambda } => {
                f.write_str("USM")?;
                fmt_compact(f, lambda)
            }
            Operation::HistEq => f.write_str("HE"),
            Operation::Noise { sigma } => {
                f.write_str("AWGN")?;
                fmt_compact(f, sigma)
            }
        }
    }
}

fn parse_number<T: FromStr>(token: &str, digits: &str) -> Result<T> {
    digits.parse().map_err(|_| Error::Syntax(format!("bad parameter in step `{token}`")))
}

impl FromStr for Operation {
    type Err = Error;

    /// Parses one step. Parameters are checked only for computability; use
    /// [`Operation::validate`] for the dictionary ranges.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        // Longest symbols first so `JPEG` is not read as something shorter.
        let op = if let Some(rest) = t.strip_prefix("JPEG") {
            let (q, sub) = match rest.split_once(':') {
                Some((q, "420")) => (q, Subsampling::Yuv420),
                Some((q, "444")) => (q, Subsampling::None),
                Some(_) => return Err(Error::Syntax(format!("bad subsampling in `{t}`"))),
                None => (rest, Subsampling::None),
            };
            Operation::Jpeg { quality: parse_number(t, q)?, subsampling: sub }
        } else if let Some(rest) = t.strip_prefix("AWGN") {
            Operation::Noise { sigma: parse_number(t, rest)? }
        } else if let Some(rest) = t.strip_prefix("USM") {
            Operation::Unsharp { lambda: parse_number(t, rest)? }
        } else if t == "HE" {
            Operation::HistEq
        } else if let Some(rest) = t.strip_prefix("MF") {
            Operation::Median { kernel: parse_number(t, rest)? }
        } else if let Some(rest) = t.strip_prefix("GB") {
            Operation::GaussianBlur { sigma: parse_number(t, rest)? }
        } else if let Some(rest) = t.strip_prefix("RS") {
            Operation::Resample { scale: parse_number(t, rest)? }
        } else {
            return Err(Error::Syntax(format!("unknown operation `{t}`")));
        };
        op.validate_domain()?;
        Ok(op)
    }
}

/// An ordered, repetition-free sequence of operations. Empty means unaltered.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Chain {
    ops: Vec<Operation>,
}

pub const MAX_CHAIN_LEN: usize = 5;

impl Chain {
    pub fn empty() -> Self {
        Self { ops: Vec::new() }
    }

    /// Build a chain, enforcing distinct kinds and the dictionary parameter ranges.
    pub fn new(ops: Vec<Operation>) -> Result<Self> {
        Self::build(ops, false)
    }

    /// Like [`Chain::new`] but only requires parameters to be computable.
    pub fn new_unchecked_params(ops: Vec<Operation>) -> Result<Self> {
        Self::build(ops, true)
    }

    fn build(ops: Vec<Operation>, unsafe_params: bool) -> Result<Self> {
        if ops.len() > MAX_CHAIN_LEN {
            return Err(param_err!("chain length {} exceeds {MAX_CHAIN_LEN}", ops.len()));
        }
        for (i, op) in ops.iter().enumerate() {
            if unsafe_params {
                op.validate_domain()?;
            } else {
                op.validate()?;
            }
            if ops[..i].iter().any(|o| o.kind() == op.kind()) {
                return Err(param_err!("operation kind {} repeated in chain", op.kind()));
            }
        }
        Ok(Self { ops })
    }

    /// Parse `MF5>GB1.1` syntax with dictionary-range checking.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(text, false)
    }

    pub fn parse_with(text: &str, unsafe_params: bool) -> Result<Self> {
        let t = text.trim();
        if t == "AU" || t.is_empty() {
            return Ok(Self::empty());
        }
        let ops = t.split('>').map(str::parse).collect::<Result<Vec<Operation>>>()?;
        Self::build(ops, unsafe_params)
    }

    pub fn ops(&self) -> &[Operation] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn kinds(&self) -> Vec<OpKind> {
        self.ops.iter().map(Operation::kind).collect()
    }

    /// Apply left to right. Noise steps draw from `derive_seed(seed, step)`.
    pub fn apply(&self, img: &ImageBuffer, seed: u64) -> Result<ImageBuffer> {
        let mut cur = img.clone();
        for (step, op) in self.ops.iter().enumerate() {
            cur = op.apply(&cur, derive_seed(seed, step as u64))?;
        }
        Ok(cur)
    }
}

impl fmt::Display for Chain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ops.is_empty() {
            return f.write_str("AU");
        }
        for (i, op) in self.ops.iter().enumerate() {
            if i > 0 {
                f.write_str(">")?;
            }
            write!(f, "{op}")?;
        }
        Ok(())
    }
}

impl FromStr for Chain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Chain::parse(s)
    }
}

/// Number of ordered selections of `k` items from `n`.
pub fn arrangements(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    (n - k + 1..=n).product()
}

/// All repetition-free ordered chains over `ops` of length `0..=max_len`
/// (`1..=max_len` without the empty chain), ordered by length and then
/// lexicographically by canonical kind order.
pub fn enumerate_chains(ops: &[Operation], max_len: usize, include_empty: bool) -> Result<Vec<Chain>> {
    let mut sorted: Vec<Operation> = ops.to_vec();
    sorted.sort_by_key(Operation::kind);
    if sorted.windows(2).any(|w| w[0].kind() == w[1].kind()) {
        return Err(param_err!("operation kinds must be distinct"));
    }
    if max_len > sorted.len() {
        return Err(param_err!("max_len {max_len} exceeds the {} available operations", sorted.len()));
    }
    let mut out = Vec::new();
    let start = if include_empty { 0 } else { 1 };
    for len in start..=max_len {
        let mut current = Vec::with_capacity(len);
        let mut used = alloc::vec![false; sorted.len()];
        permutations(&sorted, len, &mut used, &mut current, &mut out);
    }
    Ok(out)
}

fn permutations(
    ops: &[Operation],
    len: usize,
    used: &mut [bool],
    current: &mut Vec<Operation>,
    out: &mut Vec<Chain>,
) {
    if current.len() == len {
        out.push(Chain { ops: current.clone() });
        return;
    }
    for i in 0..ops.len() {
        if !used[i] {
            used[i] = true;
            current.push(ops[i]);
            permutations(ops, len, used, current, out);
            current.pop();
            used[i] = false;
        }
    }
}

/// Parse a comma- or whitespace-separated list of operations, e.g. `MF5,GB1.0`.
pub fn parse_operation_list(text: &str) -> Result<Vec<Operation>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(str::parse)
        .collect()
}

impl Chain {
    pub fn to_text(&self) -> String {
        self.to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn three() -> Vec<Operation> {
        vec![
            Operation::Median { kernel: 5 },
            Operation::GaussianBlur { sigma: 1.1 },
            Operation::Resample { scale: 1.5 },
        ]
    }

    #[test]
    fn ten_chains_over_three_ops() {
        let chains = enumerate_chains(&three(), 2, true).unwrap();
        assert_eq!(chains.len(), 10);
        let text: Vec<String> = chains.iter().map(|c| c.to_string()).collect();
        assert_eq!(
            text,
            [
                "AU", "MF5", "GB1.1", "RS1.5", "MF5>GB1.1", "MF5>RS1.5", "GB1.1>MF5", "GB1.1>RS1.5",
                "RS1.5>MF5", "RS1.5>GB1.1"
            ]
        );
    }

    #[test]
    fn small_and_large_universes() {
        let mf = [Operation::Median { kernel: 3 }];
        let c = enumerate_chains(&mf, 1, true).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c[0].is_empty());
        let five = parse_operation_list("GB1.0 MF5 RS1.5 JPEG85 AWGN2").unwrap();
        assert_eq!(enumerate_chains(&five, 5, true).unwrap().len(), 326);
        assert!(enumerate_chains(&mf, 2, true).is_err());
        assert!(enumerate_chains(&[mf[0], Operation::Median { kernel: 5 }], 1, true).is_err());
    }

    /// Independent brute force: filter all kind-index words of length n for distinctness.
    fn brute_count(n: usize, max_len: usize) -> usize {
        let mut total = 0;
        for len in 0..=max_len {
            let words = n.pow(len as u32);
            for mut w in 0..words {
                let mut seen = vec![false; n];
                let mut ok = true;
                for _ in 0..len {
                    let d = w % n;
                    w /= n;
                    if seen[d] {
                        ok = false;
                        break;
                    }
                    seen[d] = true;
                }
                total += ok as usize;
            }
        }
        total
    }

    #[test]
    fn enumeration_matches_brute_force_and_factorial_formula() {
        let pool = parse_operation_list("MF3 GB0.7 JPEG70 RS1.2 USM1 HE").unwrap();
        for n in 1..=6 {
            for max_len in 0..=n {
                let chains = enumerate_chains(&pool[..n], max_len, true).unwrap();
                let formula: usize = (0..=max_len).map(|k| arrangements(n, k)).sum();
                assert_eq!(chains.len(), formula);
                assert_eq!(chains.len(), brute_count(n, max_len));
                for i in 0..chains.len() {
                    for j in i + 1..chains.len() {
                        assert_ne!(chains[i], chains[j]);
                    }
                }
            }
        }
    }

    #[test]
    fn text_round_trip() {
        for t in ["AU", "MF5>GB1.1>RS1.5", "JPEG85", "AWGN2", "USM1>HE", "GB0.7>JPEG90:420", "RS1.2"] {
            let c: Chain = t.parse().unwrap();
            assert_eq!(c.to_string(), t);
        }
        assert_eq!(Chain::parse("GB1").unwrap().to_string(), "GB1.0");
    }

    #[test]
    fn chain_validation() {
        assert!(Chain::parse("MF5>MF3").is_err());
        assert!(Chain::parse("MF7").is_err());
        assert!(Chain::parse_with("MF7", true).is_ok());
        assert!(Chain::parse_with("MF4", true).is_err());
        assert!(Chain::parse("XX3").is_err());
        assert!(Chain::parse("JPEG101").is_err());
        assert!(matches!(Chain::parse("GBx"), Err(Error::Syntax(_))));
    }
}
