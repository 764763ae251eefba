//! Periodic wavelet packet analysis and synthesis.
//!
//! Every transform here works row-wise on a `C x L` matrix (one row per
//! channel). Analysis uses circular extension followed by decimation by two:
//!
//! ```text
//! a[k] = sum_n h[n] x[(2k + n) mod N]
//! d[k] = sum_n g[n] x[(2k + n) mod N]
//! ```
//!
//! With an orthonormal filter pair this operator is orthogonal, so synthesis
//! is its transpose and also its exact inverse.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Daubechies scaling coefficients, two vanishing moments (closed form).
fn db2_scaling() -> Vec<f64> {
    let r3 = 3f64.sqrt();
    let norm = 4.0 * std::f64::consts::SQRT_2;
    vec![(1.0 + r3) / norm, (3.0 + r3) / norm, (3.0 - r3) / norm, (1.0 - r3) / norm]
}

/// Daubechies scaling coefficients, four vanishing moments.
#[allow(clippy::excessive_precision)]
const DB4_SCALING: [f64; 8] = [
    0.230_377_813_308_855_23,
    0.714_846_570_552_541_53,
    0.630_880_767_929_590_36,
    -0.027_983_769_416_983_849,
    -0.187_034_811_718_881_14,
    0.030_841_381_835_986_965,
    0.032_883_011_666_982_945,
    -0.010_597_401_784_997_278,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveletFamily {
    Haar,
    Db2,
    Db4,
}

impl WaveletFamily {
    pub const SUPPORTED: [&'static str; 3] = ["haar", "db2", "db4"];

    pub fn name(self) -> &'static str {
        match self {
            WaveletFamily::Haar => "haar",
            WaveletFamily::Db2 => "db2",
            WaveletFamily::Db4 => "db4",
        }
    }
}

impl fmt::Display for WaveletFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for WaveletFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "haar" | "db1" => Ok(WaveletFamily::Haar),
            "db2" => Ok(WaveletFamily::Db2),
            "db4" => Ok(WaveletFamily::Db4),
            other => Err(Error::Config(format!(
                "unknown wavelet family '{other}'; supported families: {}",
                WaveletFamily::SUPPORTED.join(", ")
            ))),
        }
    }
}

/// Orthonormal two-channel filter bank.
///
/// Synthesis filters hold the same taps as the analysis filters; they are
/// applied in transposed (upsample and scatter) form.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub family: WaveletFamily,
    pub analysis_low: Vec<f64>,
    pub analysis_high: Vec<f64>,
    pub synthesis_low: Vec<f64>,
    pub synthesis_high: Vec<f64>,
}

impl FilterBank {
    pub fn new(family: WaveletFamily) -> Self {
        let low: Vec<f64> = match family {
            WaveletFamily::Haar => vec![FRAC_1_SQRT_2, FRAC_1_SQRT_2],
            WaveletFamily::Db2 => db2_scaling(),
            WaveletFamily::Db4 => DB4_SCALING.to_vec(),
        };
        // Quadrature mirror: g[n] = (-1)^n h[len - 1 - n].
        let n = low.len();
        let high: Vec<f64> = (0..n)
            .map(|i| {
                let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
                sign * low[n - 1 - i]
            })
            .collect();
        FilterBank {
            family,
            synthesis_low: low.clone(),
            synthesis_high: high.clone(),
            analysis_low: low,
            analysis_high: high,
        }
    }

    pub fn filter_len(&self) -> usize {
        self.analysis_low.len()
    }
}

/// Builds the filter bank for a family given by name.
pub fn make_filter_bank(family: &str) -> Result<FilterBank> {
    Ok(FilterBank::new(family.parse()?))
}

/// One analysis level: splits each row into approximation and detail halves.
pub fn analysis_step(x: ArrayView2<f64>, fb: &FilterBank) -> Result<(Array2<f64>, Array2<f64>)> {
    let (rows, n) = x.dim();
    if n == 0 || n % 2 != 0 {
        return Err(Error::Shape(format!(
            "analysis needs a positive even length, got {n}"
        )));
    }
    let half = n / 2;
    let mut approx = Array2::zeros((rows, half));
    let mut detail = Array2::zeros((rows, half));
    for r in 0..rows {
        let row = x.row(r);
        for k in 0..half {
            let mut a = 0.0;
            let mut d = 0.0;
            for (t, (&h, &g)) in fb.analysis_low.iter().zip(&fb.analysis_high).enumerate() {
                let v = row[(2 * k + t) % n];
                a += h * v;
                d += g * v;
            }
            approx[[r, k]] = a;
            detail[[r, k]] = d;
        }
    }
    Ok((approx, detail))
}

/// One synthesis level, the transpose (and inverse) of [`analysis_step`].
pub fn synthesis_step(
    approx: ArrayView2<f64>,
    detail: ArrayView2<f64>,
    fb: &FilterBank,
) -> Result<Array2<f64>> {
    if approx.dim() != detail.dim() {
        return Err(Error::Shape(format!(
            "sibling bands disagree: approximation {:?} vs detail {:?}",
            approx.dim(),
            detail.dim()
        )));
    }
    let (rows, half) = approx.dim();
    if half == 0 {
        return Err(Error::Shape("cannot synthesize from empty bands".into()));
    }
    let n = 2 * half;
    let mut out = Array2::zeros((rows, n));
    for r in 0..rows {
        for k in 0..half {
            let a = approx[[r, k]];
            let d = detail[[r, k]];
            for (t, (&h, &g)) in fb.synthesis_low.iter().zip(&fb.synthesis_high).enumerate() {
                out[[r, (2 * k + t) % n]] += h * a + g * d;
            }
        }
    }
    Ok(out)
}

/// Leaf length after `levels` dyadic splits of a length-`len` signal.
pub fn coeff_length(len: usize, levels: usize) -> Result<usize> {
    let factor = 1usize
        .checked_shl(levels as u32)
        .filter(|f| *f > 0 && levels < usize::BITS as usize)
        .ok_or_else(|| Error::Config(format!("level {levels} is too large")))?;
    if len == 0 || !len.is_multiple_of(factor) {
        return Err(Error::Shape(format!(
            "2^{levels} does not divide {len}: length must be a multiple of {factor}"
        )));
    }
    Ok(len / factor)
}

/// Order in which leaves of a packet tree are listed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BandOrder {
    /// Recursive a/d order (`aa, ad, da, dd`).
    #[default]
    Natural,
    /// Increasing centre frequency (Gray-code permutation of natural order).
    Frequency,
}

/// Which tree is decomposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Basis {
    /// Full binary tree: every node is split.
    Packet,
    /// Mallat pyramid: only the approximation path is split.
    Pyramid,
}

impl Basis {
    pub fn decompose(self, x: ArrayView2<f64>, fb: &FilterBank, levels: usize) -> Result<SubbandSet> {
        match self {
            Basis::Packet => wpd(x, fb, levels),
            Basis::Pyramid => dwt(x, fb, levels),
        }
    }

    /// Labels (in band order) and depth of every leaf.
    pub fn leaf_labels(self, levels: usize) -> Vec<String> {
        match self {
            Basis::Packet => packet_labels(levels),
            Basis::Pyramid => {
                let mut labels = vec!["a".repeat(levels)];
                for depth in (1..=levels).rev() {
                    labels.push(format!("{}d", "a".repeat(depth - 1)));
                }
                labels
            }
        }
    }
}

/// The `2^levels` strings over `{a, d}` in natural order.
pub fn packet_labels(levels: usize) -> Vec<String> {
    (0..1usize << levels)
        .map(|idx| {
            (0..levels)
                .map(|bit| {
                    if (idx >> (levels - 1 - bit)) & 1 == 0 {
                        'a'
                    } else {
                        'd'
                    }
                })
                .collect()
        })
        .collect()
}

/// Coefficient blocks labelled by their a/d path from the root.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandSet {
    pub bands: Vec<Array2<f64>>,
    pub labels: Vec<String>,
    pub level: usize,
    pub original_len: usize,
}

impl SubbandSet {
    pub fn len(&self) -> usize {
        self.bands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bands.is_empty()
    }

    pub fn band(&self, label: &str) -> Option<&Array2<f64>> {
        self.labels
            .iter()
            .position(|l| l == label)
            .map(|i| &self.bands[i])
    }

    pub fn channels(&self) -> usize {
        self.bands.first().map_or(0, |b| b.nrows())
    }

    /// Total squared magnitude over every band.
    pub fn energy(&self) -> f64 {
        self.bands.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>()).sum()
    }

    /// Reorders packet leaves by increasing frequency.
    pub fn into_frequency_order(self) -> SubbandSet {
        let k = self.bands.len();
        let mut slots: Vec<Option<(String, Array2<f64>)>> =
            self.labels.into_iter().zip(self.bands).map(Some).collect();
        let mut labels = Vec::with_capacity(k);
        let mut bands = Vec::with_capacity(k);
        for f in 0..k {
            let natural = f ^ (f >> 1);
            let (l, b) = slots[natural].take().expect("gray code is a permutation");
            labels.push(l);
            bands.push(b);
        }
        SubbandSet {
            bands,
            labels,
            level: self.level,
            original_len: self.original_len,
        }
    }
}

fn check_levels(levels: usize, len: usize) -> Result<()> {
    if levels < 1 {
        return Err(Error::Config(format!(
            "decomposition level must be at least 1, got {levels}"
        )));
    }
    coeff_length(len, levels).map(|_| ())
}

fn check_finite(x: ArrayView2<f64>) -> Result<()> {
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        let cols = x.ncols().max(1);
        return Err(Error::Numeric(format!(
            "non-finite input at channel {}, step {}",
            pos / cols,
            pos % cols
        )));
    }
    Ok(())
}

/// Full wavelet packet decomposition to `levels`, natural band order.
pub fn wpd(x: ArrayView2<f64>, fb: &FilterBank, levels: usize) -> Result<SubbandSet> {
    wpd_ordered(x, fb, levels, BandOrder::Natural)
}

pub fn wpd_ordered(
    x: ArrayView2<f64>,
    fb: &FilterBank,
    levels: usize,
    order: BandOrder,
) -> Result<SubbandSet> {
    check_levels(levels, x.ncols())?;
    check_finite(x)?;
    let mut nodes = vec![x.to_owned()];
    for _ in 0..levels {
        let mut next = Vec::with_capacity(nodes.len() * 2);
        for node in &nodes {
            let (a, d) = analysis_step(node.view(), fb)?;
            next.push(a);
            next.push(d);
        }
        nodes = next;
    }
    let set = SubbandSet {
        bands: nodes,
        labels: packet_labels(levels),
        level: levels,
        original_len: x.ncols(),
    };
    Ok(match order {
        BandOrder::Natural => set,
        BandOrder::Frequency => set.into_frequency_order(),
    })
}

/// Standard (pyramid) discrete wavelet transform: `levels + 1` bands
/// ordered as the deepest approximation followed by details from deepest
/// to shallowest.
pub fn dwt(x: ArrayView2<f64>, fb: &FilterBank, levels: usize) -> Result<SubbandSet> {
    check_levels(levels, x.ncols())?;
    check_finite(x)?;
    let mut approx = x.to_owned();
    let mut details = Vec::with_capacity(levels);
    for _ in 0..levels {
        let (a, d) = analysis_step(approx.view(), fb)?;
        details.push(d);
        approx = a;
    }
    let mut bands = vec![approx];
    bands.extend(details.into_iter().rev());
    Ok(SubbandSet {
        bands,
        labels: Basis::Pyramid.leaf_labels(levels),
        level: levels,
        original_len: x.ncols(),
    })
}

/// Inverse transform for any complete leaf set of a binary a/d tree.
///
/// Siblings are merged deepest-first until only the root remains, so packet
/// sets, pyramid sets, and pruned best-basis sets are all accepted.
pub fn iwpt(s: &SubbandSet, fb: &FilterBank) -> Result<Array2<f64>> {
    if s.bands.len() != s.labels.len() {
        return Err(Error::Shape(format!(
            "{} bands but {} labels",
            s.bands.len(),
            s.labels.len()
        )));
    }
    if s.bands.is_empty() {
        return Err(Error::Shape("empty subband set".into()));
    }
    let channels = s.channels();
    let mut nodes: BTreeMap<String, Array2<f64>> = BTreeMap::new();
    for (label, band) in s.labels.iter().zip(&s.bands) {
        if label.chars().any(|c| c != 'a' && c != 'd') {
            return Err(Error::Shape(format!("invalid band label '{label}'")));
        }
        if band.nrows() != channels {
            return Err(Error::Shape(format!(
                "band '{label}' has {} channels, expected {channels}",
                band.nrows()
            )));
        }
        let expected = s.original_len >> label.len();
        if band.ncols() != expected || expected << label.len() != s.original_len {
            return Err(Error::Shape(format!(
                "band '{label}' has length {}, expected {} for original length {}",
                band.ncols(),
                expected,
                s.original_len
            )));
        }
        if nodes.insert(label.clone(), band.clone()).is_some() {
            return Err(Error::Shape(format!("duplicate band '{label}'")));
        }
    }
    while !(nodes.len() == 1 && nodes.contains_key("")) {
        let deepest = nodes
            .keys()
            .max_by_key(|l| l.len())
            .cloned()
            .expect("non-empty");
        if deepest.is_empty() {
            return Err(Error::Shape("root given alongside other bands".into()));
        }
        let parent = deepest[..deepest.len() - 1].to_string();
        let a_label = format!("{parent}a");
        let d_label = format!("{parent}d");
        let a = nodes
            .remove(&a_label)
            .ok_or_else(|| Error::Shape(format!("missing band '{a_label}'")))?;
        let d = nodes
            .remove(&d_label)
            .ok_or_else(|| Error::Shape(format!("missing band '{d_label}'")))?;
        let merged = synthesis_step(a.view(), d.view(), fb)?;
        if nodes.insert(parent.clone(), merged).is_some() {
            return Err(Error::Shape(format!(
                "band '{parent}' overlaps its own descendants"
            )));
        }
    }
    Ok(nodes.remove("").expect("root present"))
}

/// Shannon entropy (bits) of the normalized energy distribution of `coeffs`.
/// All-zero input has entropy 0.
pub fn shannon_entropy(coeffs: ArrayView2<f64>) -> f64 {
    let total: f64 = coeffs.iter().map(|c| c * c).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let h: f64 = coeffs
        .iter()
        .map(|c| c * c / total)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.log2())
        .sum();
    // -0.0 for a point mass
    h.max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyNode {
    pub label: String,
    pub entropy_bits: f64,
    pub energy_fraction: f64,
    pub split: bool,
}

/// Packet tree annotated with entropy and Coifman-Wickerhauser split flags.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyTree {
    /// Breadth-first: root, then depth 1 in natural order, and so on.
    pub nodes: Vec<EntropyNode>,
    pub depth: usize,
}

impl EntropyTree {
    pub fn node(&self, label: &str) -> Option<&EntropyNode> {
        self.nodes.iter().find(|n| n.label == label)
    }

    /// Leaves of the pruned best basis.
    pub fn best_basis(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut stack = vec![String::new()];
        while let Some(label) = stack.pop() {
            match self.node(&label) {
                Some(n) if n.split => {
                    stack.push(format!("{label}d"));
                    stack.push(format!("{label}a"));
                }
                Some(_) => out.push(label),
                None => {}
            }
        }
        out
    }
}

/// Decomposes `x` to `max_depth` and scores every node. Entropy is computed
/// per channel and summed; energy fractions are relative to the input energy.
pub fn best_basis_tree(x: ArrayView2<f64>, fb: &FilterBank, max_depth: usize) -> Result<EntropyTree> {
    coeff_length(x.ncols(), max_depth)?;
    check_finite(x)?;
    let total: f64 = x.iter().map(|v| v * v).sum();
    let score = |block: &Array2<f64>| -> (f64, f64) {
        let entropy = block
            .axis_iter(Axis(0))
            .map(|row| shannon_entropy(row.insert_axis(Axis(0))))
            .sum();
        let energy: f64 = block.iter().map(|v| v * v).sum();
        let fraction = if total > 0.0 { energy / total } else { 0.0 };
        (entropy, fraction)
    };

    let mut levels: Vec<Vec<(String, Array2<f64>)>> = vec![vec![(String::new(), x.to_owned())]];
    for _ in 0..max_depth {
        let prev = levels.last().expect("root level");
        let mut next = Vec::with_capacity(prev.len() * 2);
        for (label, block) in prev {
            let (a, d) = analysis_step(block.view(), fb)?;
            next.push((format!("{label}a"), a));
            next.push((format!("{label}d"), d));
        }
        levels.push(next);
    }

    let scored: Vec<Vec<(String, f64, f64)>> = levels
        .iter()
        .map(|lvl| {
            lvl.iter()
                .map(|(l, b)| {
                    let (h, e) = score(b);
                    (l.clone(), h, e)
                })
                .collect()
        })
        .collect();

    let mut nodes = Vec::new();
    for (depth, lvl) in scored.iter().enumerate() {
        for (idx, (label, entropy, fraction)) in lvl.iter().enumerate() {
            let split = if depth < max_depth {
                let children = &scored[depth + 1];
                children[2 * idx].1 + children[2 * idx + 1].1 < *entropy
            } else {
                false
            };
            nodes.push(EntropyNode {
                label: label.clone(),
                entropy_bits: *entropy,
                energy_fraction: *fraction,
                split,
            });
        }
    }
    Ok(EntropyTree {
        nodes,
        depth: max_depth,
    })
}
