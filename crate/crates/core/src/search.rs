//! Learnable bit-width distributions for frequency groups.
//!
//! Every group owns a logit row `γ^k` over the candidate bit widths; the
//! temperature softmax of that row weights the embedding quantized at each
//! candidate, and the expected quantized embedding is what the network sees
//! during search. A frequency-weighted penalty on the expected bit width
//! trades accuracy for memory. After search, each group keeps the largest
//! candidate whose probability exceeds `1 / (2m)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::catalog::GroupAssignment;
use crate::error::{Error, Result};
use crate::quant::{self, BitWidth, QuantizerParams};

/// Sorted, distinct candidate bit widths.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSet {
    bits: Vec<BitWidth>,
}

impl CandidateSet {
    /// Requires at least two strictly increasing widths.
    pub fn new(bits: Vec<BitWidth>) -> Result<Self> {
        if bits.len() < 2 {
            return Err(Error::InvalidArgument(
                "a candidate set needs at least two bit widths".into(),
            ));
        }
        Self::checked(bits)
    }

    /// A single-width set. The mixture collapses to plain fixed-width
    /// quantization; used for degeneracy checks.
    pub fn single(bits: BitWidth) -> Self {
        Self { bits: vec![bits] }
    }

    /// Accepts any nonempty strictly increasing list, including `m = 1`.
    pub fn from_bits(bits: &[u32]) -> Result<Self> {
        let bits = bits.iter().map(|&b| BitWidth::new(b)).collect::<Result<Vec<_>>>()?;
        if bits.len() == 1 {
            return Ok(Self::single(bits[0]));
        }
        Self::new(bits)
    }

    fn checked(bits: Vec<BitWidth>) -> Result<Self> {
        if bits.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument(
                "candidate bit widths must be strictly increasing".into(),
            ));
        }
        Ok(Self { bits })
    }

    /// The default `{0, 1, ..., 6}`.
    pub fn default_set() -> Self {
        Self {
            bits: (0..=6).map(|b| BitWidth::new(b).unwrap()).collect(),
        }
    }

    pub fn bits(&self) -> &[BitWidth] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn max(&self) -> BitWidth {
        *self.bits.last().unwrap()
    }

    pub fn contains(&self, b: BitWidth) -> bool {
        self.bits.binary_search(&b).is_ok()
    }
}

impl Default for CandidateSet {
    fn default() -> Self {
        Self::default_set()
    }
}

/// Per-group logits `γ` (row-major `g × m`) and the softmax temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPrecisionState {
    gamma: Vec<f64>,
    num_groups: usize,
    num_candidates: usize,
    tau: f64,
}

impl GroupPrecisionState {
    /// All-zero logits: every candidate starts equally likely.
    pub fn new(num_groups: usize, num_candidates: usize, tau: f64) -> Result<Self> {
        Self::from_gamma(vec![0.0; num_groups * num_candidates], num_groups, num_candidates, tau)
    }

    pub fn from_gamma(gamma: Vec<f64>, num_groups: usize, num_candidates: usize, tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
        }
        if num_candidates == 0 {
            return Err(Error::InvalidArgument("no candidates".into()));
        }
        if gamma.len() != num_groups * num_candidates {
            return Err(Error::DimensionMismatch {
                expected: num_groups * num_candidates,
                actual: gamma.len(),
            });
        }
        if gamma.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite logit".into()));
        }
        Ok(Self {
            gamma,
            num_groups,
            num_candidates,
            tau,
        })
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    pub fn num_candidates(&self) -> usize {
        self.num_candidates
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }

    pub fn gamma_mut(&mut self) -> &mut [f64] {
        &mut self.gamma
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.gamma[k * self.num_candidates..(k + 1) * self.num_candidates]
    }

    /// Temperature softmax of group `k`'s logits.
    pub fn probabilities(&self, k: usize) -> Vec<f64> {
        let mut p = vec![0.0; self.num_candidates];
        softmax_into(self.row(k), self.tau, &mut p);
        p
    }

    /// All groups' probabilities, row-major `g × m`.
    pub fn all_probabilities(&self) -> Vec<f64> {
        let mut p = vec![0.0; self.gamma.len()];
        for (row, out) in self.gamma.chunks_exact(self.num_candidates).zip(p.chunks_exact_mut(self.num_candidates)) {
            softmax_into(row, self.tau, out);
        }
        p
    }

    /// `Σ_i b_i p^k_i` for every group.
    pub fn expected_bits(&self, cands: &CandidateSet) -> Vec<f64> {
        (0..self.num_groups)
            .map(|k| {
                self.probabilities(k)
                    .iter()
                    .zip(cands.bits())
                    .map(|(p, b)| p * b.get() as f64)
                    .sum()
            })
            .collect()
    }
}

/// Max-subtracted softmax of `logits / tau`.
pub fn softmax_into(logits: &[f64], tau: f64, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &g) in out.iter_mut().zip(logits) {
        *o = ((g - max) / tau).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn check_mixture(e: &[f64], params: &QuantizerParams, cands: &CandidateSet, p: &[f64]) -> Result<()> {
    if e.len() != params.dim() {
        return Err(Error::DimensionMismatch {
            expected: params.dim(),
            actual: e.len(),
        });
    }
    if p.len() != cands.len() {
        return Err(Error::DimensionMismatch {
            expected: cands.len(),
            actual: p.len(),
        });
    }
    Ok(())
}

/// Step sizes for each candidate, with `0.0` standing in for the zero width.
pub(crate) fn candidate_steps(params: &QuantizerParams, cands: &CandidateSet) -> Result<Vec<f64>> {
    cands
        .bits()
        .iter()
        .map(|&b| if b.is_zero() { Ok(0.0) } else { params.step_size(b) })
        .collect()
}

/// Expected quantized embedding `Σ_i p_i · Q(e, b_i)`.
pub fn mixture_forward(e: &[f64], params: &QuantizerParams, cands: &CandidateSet, p: &[f64]) -> Result<Vec<f64>> {
    check_mixture(e, params, cands, p)?;
    let steps = candidate_steps(params, cands)?;
    let mut out = vec![0.0; e.len()];
    let mut scratch = vec![0.0; e.len()];
    mixture_into(e, &steps, params.offsets(), cands.bits(), p, &mut out, &mut scratch);
    Ok(out)
}

/// Hot-path mixture. The first term initializes `out` so a one-hot mixture
/// reproduces the single quantized vector bit for bit.
#[inline]
pub(crate) fn mixture_into(
    e: &[f64],
    steps: &[f64],
    offsets: &[f64],
    bits: &[BitWidth],
    p: &[f64],
    out: &mut [f64],
    scratch: &mut [f64],
) {
    for (i, &b) in bits.iter().enumerate() {
        quant::quantize_into(e, steps[i], offsets, b, scratch);
        if i == 0 {
            for (o, &q) in out.iter_mut().zip(scratch.iter()) {
                *o = p[i] * q;
            }
        } else {
            for (o, &q) in out.iter_mut().zip(scratch.iter()) {
                *o += p[i] * q;
            }
        }
    }
}

/// Gradients of the expected quantized embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureGrad {
    pub d_e: Vec<f64>,
    /// One entry per nonzero candidate.
    pub d_alpha: BTreeMap<BitWidth, f64>,
    pub d_beta: Vec<f64>,
    pub d_p: Vec<f64>,
}

pub fn mixture_backward(
    e: &[f64],
    params: &QuantizerParams,
    cands: &CandidateSet,
    p: &[f64],
    upstream: &[f64],
) -> Result<MixtureGrad> {
    check_mixture(e, params, cands, p)?;
    if upstream.len() != e.len() {
        return Err(Error::DimensionMismatch {
            expected: e.len(),
            actual: upstream.len(),
        });
    }
    let steps = candidate_steps(params, cands)?;
    let d = e.len();
    let mut d_e = vec![0.0; d];
    let mut d_beta = vec![0.0; d];
    let mut d_alpha_vec = vec![0.0; cands.len()];
    let mut d_p = vec![0.0; cands.len()];
    let mut scratch = vec![0.0; d];
    mixture_backward_into(
        e,
        &steps,
        params.offsets(),
        cands.bits(),
        p,
        upstream,
        &mut d_e,
        &mut d_alpha_vec,
        &mut d_beta,
        &mut d_p,
        &mut scratch,
    );
    let d_alpha = cands
        .bits()
        .iter()
        .zip(&d_alpha_vec)
        .filter(|(b, _)| !b.is_zero())
        .map(|(&b, &g)| (b, g))
        .collect();
    Ok(MixtureGrad { d_e, d_alpha, d_beta, d_p })
}

/// Accumulating mixture backward; `d_alpha` and `d_p` are indexed by
/// candidate position.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn mixture_backward_into(
    e: &[f64],
    steps: &[f64],
    offsets: &[f64],
    bits: &[BitWidth],
    p: &[f64],
    upstream: &[f64],
    d_e: &mut [f64],
    d_alpha: &mut [f64],
    d_beta: &mut [f64],
    d_p: &mut [f64],
    scratch: &mut [f64],
) {
    for (i, &b) in bits.iter().enumerate() {
        quant::quantize_into(e, steps[i], offsets, b, scratch);
        d_p[i] += upstream.iter().zip(scratch.iter()).map(|(u, q)| u * q).sum::<f64>();
        quant::accumulate_grad(e, steps[i], offsets, b, upstream, p[i], d_e, &mut d_alpha[i], d_beta);
    }
}

/// Chain rule through the temperature softmax:
/// `dγ_i = (1/τ) · p_i · (dp_i − Σ_j p_j dp_j)`.
pub fn gamma_grad(p: &[f64], d_p: &[f64], tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; p.len()];
    gamma_grad_into(p, d_p, tau, &mut out);
    out
}

#[inline]
pub(crate) fn gamma_grad_into(p: &[f64], d_p: &[f64], tau: f64, out: &mut [f64]) {
    let mean: f64 = p.iter().zip(d_p).map(|(a, b)| a * b).sum();
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(d_p) {
        *o += pi * (gi - mean) / tau;
    }
}

/// Frequency-weighted expected bit-width penalty
/// `λ · Σ_k (1/s^k) · Σ_i b_i p^k_i` and its gradient with respect to `γ`.
pub fn bit_regularizer(
    state: &GroupPrecisionState,
    cands: &CandidateSet,
    freq_sums: &[f64],
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let m = state.num_candidates();
    if cands.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            actual: cands.len(),
        });
    }
    if freq_sums.len() != state.num_groups() {
        return Err(Error::DimensionMismatch {
            expected: state.num_groups(),
            actual: freq_sums.len(),
        });
    }
    if freq_sums.iter().any(|&s| s < 1.0) {
        return Err(Error::Domain("group frequency sums must be at least 1".into()));
    }
    let mut loss = 0.0;
    let mut d_gamma = vec![0.0; state.gamma().len()];
    let mut p = vec![0.0; m];
    let mut d_p = vec![0.0; m];
    for (k, &s) in freq_sums.iter().enumerate() {
        softmax_into(state.row(k), state.tau(), &mut p);
        let mut group = 0.0;
        for (i, b) in cands.bits().iter().enumerate() {
            group += b.get() as f64 * p[i];
            d_p[i] = lambda * b.get() as f64 / s;
        }
        loss += group / s;
        gamma_grad_into(&p, &d_p, state.tau(), &mut d_gamma[k * m..(k + 1) * m]);
    }
    Ok((lambda * loss, d_gamma))
}

/// Final bit width per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledPrecision {
    pub bit_of_group: Vec<BitWidth>,
    /// Mean bit width over features (each feature counts once).
    pub avg_bits: f64,
}

impl SampledPrecision {
    /// Uses the same width for every group.
    pub fn uniform(groups: &GroupAssignment, bits: BitWidth) -> Self {
        Self::from_bits(groups, vec![bits; groups.num_groups()]).unwrap()
    }

    pub fn from_bits(groups: &GroupAssignment, bit_of_group: Vec<BitWidth>) -> Result<Self> {
        if bit_of_group.len() != groups.num_groups() {
            return Err(Error::DimensionMismatch {
                expected: groups.num_groups(),
                actual: bit_of_group.len(),
            });
        }
        let total: f64 = bit_of_group
            .iter()
            .enumerate()
            .map(|(k, b)| groups.group_len(k) as f64 * b.get() as f64)
            .sum();
        let avg_bits = total / groups.num_features() as f64;
        Ok(Self { bit_of_group, avg_bits })
    }

    #[inline]
    pub fn bits_of_feature(&self, groups: &GroupAssignment, feature: u32) -> BitWidth {
        self.bit_of_group[groups.group_of(feature)]
    }

    /// Number of features at each bit width.
    pub fn histogram(&self, groups: &GroupAssignment) -> BTreeMap<u32, usize> {
        let mut hist = BTreeMap::new();
        for (k, b) in self.bit_of_group.iter().enumerate() {
            *hist.entry(b.get()).or_insert(0) += groups.group_len(k);
        }
        hist
    }

    /// Payload-only storage ratio against 32-bit floats, with each feature
    /// padded to whole 16-bit words.
    pub fn storage_ratio(&self, groups: &GroupAssignment, dim: usize) -> f64 {
        let words: usize = self
            .bit_of_group
            .iter()
            .enumerate()
            .map(|(k, b)| groups.group_len(k) * (dim * b.get() as usize).div_ceil(16))
            .sum();
        (words * 2) as f64 / (groups.num_features() * dim * 4) as f64
    }

    /// Text export: one `group_index \t bit_width` line per group.
    pub fn to_tsv(&self) -> String {
        self.bit_of_group
            .iter()
            .enumerate()
            .map(|(k, b)| format!("{k}\t{b}\n"))
            .collect()
    }

    pub fn from_tsv(text: &str, groups: &GroupAssignment) -> Result<Self> {
        let mut bits = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let malformed = |message: String| Error::Malformed {
                line: lineno + 1,
                message,
            };
            let (idx, bit) = line
                .split_once('\t')
                .ok_or_else(|| malformed("expected `group \\t bits`".into()))?;
            let idx: usize = idx.parse().map_err(|_| malformed(format!("bad group index {idx:?}")))?;
            let bit: u32 = bit.parse().map_err(|_| malformed(format!("bad bit width {bit:?}")))?;
            if idx != bits.len() {
                return Err(malformed(format!("expected group {}, got {idx}", bits.len())));
            }
            bits.push(BitWidth::new(bit)?);
        }
        Self::from_bits(groups, bits)
    }

    pub fn summary(&self, groups: &GroupAssignment, dim: usize) -> PrecisionSummary {
        PrecisionSummary {
            avg_bits: self.avg_bits,
            ratio: self.storage_ratio(groups, dim),
            per_bit_histogram: self.histogram(groups),
        }
    }
}

/// JSON summary written next to a precision export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionSummary {
    pub avg_bits: f64,
    pub ratio: f64,
    pub per_bit_histogram: BTreeMap<u32, usize>,
}

/// Largest candidate whose probability strictly exceeds `1 / (2m)`.
pub fn sample_bits(p: &[f64], cands: &CandidateSet) -> BitWidth {
    let threshold = 1.0 / (2.0 * cands.len() as f64);
    let best = cands
        .bits()
        .iter()
        .zip(p)
        .filter(|(_, &pi)| pi > threshold)
        .map(|(&b, _)| b)
        .max();
    // max p_i >= 1/m > 1/(2m), so some candidate always qualifies.
    best.expect("no candidate above the sampling threshold")
}

pub fn sample_precision(
    state: &GroupPrecisionState,
    cands: &CandidateSet,
    groups: &GroupAssignment,
) -> Result<SampledPrecision> {
    if state.num_groups() != groups.num_groups() {
        return Err(Error::DimensionMismatch {
            expected: groups.num_groups(),
            actual: state.num_groups(),
        });
    }
    let bits = (0..state.num_groups())
        .map(|k| sample_bits(&state.probabilities(k), cands))
        .collect();
    SampledPrecision::from_bits(groups, bits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bw(b: u32) -> BitWidth {
        BitWidth::new(b).unwrap()
    }

    fn cands(bits: &[u32]) -> CandidateSet {
        CandidateSet::from_bits(bits).unwrap()
    }

    #[test]
    fn candidate_set_validation() {
        assert!(CandidateSet::new(vec![bw(3)]).is_err());
        assert!(CandidateSet::new(vec![bw(3), bw(2)]).is_err());
        assert!(CandidateSet::new(vec![bw(2), bw(2)]).is_err());
        assert_eq!(CandidateSet::default().len(), 7);
        assert_eq!(CandidateSet::from_bits(&[6]).unwrap().len(), 1);
    }

    #[test]
    fn uniform_start() {
        let s = GroupPrecisionState::new(3, 7, 3e-3).unwrap();
        for k in 0..3 {
            for p in s.probabilities(k) {
                assert!((p - 1.0 / 7.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_closed_form() {
        let tau = 0.5;
        let s = GroupPrecisionState::from_gamma(vec![tau * 2f64.ln(), 0.0], 1, 2, tau).unwrap();
        let p = s.probabilities(0);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = GroupPrecisionState::from_gamma(vec![1e3, 0.0, -1e3], 1, 3, 3e-3).unwrap();
        let p = s.probabilities(0);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sampler_examples() {
        let c = cands(&[0, 3, 6]);
        assert_eq!(sample_bits(&[0.9, 0.06, 0.04], &c), bw(0));
        assert_eq!(sample_bits(&[0.5, 0.08, 0.42], &c), bw(6));
        let all = CandidateSet::default();
        assert_eq!(sample_bits(&[1.0 / 7.0; 7], &all), bw(6));
    }

    #[test]
    fn threshold_is_strict() {
        // 1/(2m) = 0.25 exactly for m = 2.
        let c = cands(&[0, 4]);
        assert_eq!(sample_bits(&[0.75, 0.25], &c), bw(0));
    }

    #[test]
    fn gamma_grad_examples() {
        assert_eq!(gamma_grad(&[0.5, 0.5], &[1.0, 0.0], 1.0), vec![0.25, -0.25]);
        let g = gamma_grad(&[0.2, 0.3, 0.5], &[4.0, 4.0, 4.0], 0.1);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn regularizer_examples() {
        let all = CandidateSet::default();
        let s = GroupPrecisionState::new(1, 7, 1.0).unwrap();
        let (loss, _) = bit_regularizer(&s, &all, &[1.0], 1.0).unwrap();
        assert!((loss - 3.0).abs() < 1e-12);

        let onehot = GroupPrecisionState::from_gamma(vec![0.0, -50.0, -50.0], 1, 3, 1e-2).unwrap();
        let (loss, _) = bit_regularizer(&onehot, &cands(&[0, 3, 6]), &[1.0], 10.0).unwrap();
        assert!(loss.abs() < 1e-12);

        let two = GroupPrecisionState::new(2, 7, 1.0).unwrap();
        let (both, _) = bit_regularizer(&two, &all, &[10.0, 1.0], 1.0).unwrap();
        // group 0 contributes 3/10, group 1 contributes 3.
        assert!((both - 3.3).abs() < 1e-12);

        assert!(bit_regularizer(&two, &all, &[0.5, 1.0], 1.0).is_err());
    }

    #[test]
    fn regularizer_gradient_lowers_expected_bits() {
        let all = CandidateSet::default();
        let mut s = GroupPrecisionState::new(1, 7, 3e-3).unwrap();
        let before = s.expected_bits(&all)[0];
        let (_, g) = bit_regularizer(&s, &all, &[4.0], 1e-3).unwrap();
        for (gamma, d) in s.gamma_mut().iter_mut().zip(&g) {
            *gamma -= 1e-3 * d;
        }
        assert!(s.expected_bits(&all)[0] < before);
    }

    #[test]
    fn mixture_examples() {
        let params = QuantizerParams::new([(bw(6), 0.01)].into_iter().collect(), vec![0.0, 0.0]).unwrap();
        let c = cands(&[0, 6]);
        let e = [0.123, -0.2];
        let out = mixture_forward(&e, &params, &c, &[0.5, 0.5]).unwrap();
        let (q, _) = quant::quantize_vector(&e, &params, bw(6)).unwrap();
        assert_eq!(out, vec![0.5 * q[0], 0.5 * q[1]]);

        let out = mixture_forward(&e, &params, &c, &[0.0, 1.0]).unwrap();
        assert_eq!(out, q);
        assert!(mixture_forward(&e, &params, &c, &[1.0]).is_err());
    }

    #[test]
    fn one_hot_backward_is_plain_ste() {
        let params = QuantizerParams::init(&[bw(4), bw(6)], 3, 0.1);
        let c = cands(&[0, 4, 6]);
        let e = [0.01, -0.02, 0.03];
        let up = [0.5, -1.0, 2.0];
        let g = mixture_backward(&e, &params, &c, &[0.0, 0.0, 1.0], &up).unwrap();
        assert_eq!(g.d_e, up.to_vec());
        assert_eq!(g.d_p[0], 0.0);
    }

    #[test]
    fn precision_tsv_round_trip() {
        let groups = GroupAssignment::from_frequencies(&[9, 8, 7, 6, 5], 2).unwrap();
        let sp = SampledPrecision::from_bits(&groups, vec![bw(6), bw(2), bw(0)]).unwrap();
        assert!((sp.avg_bits - (2.0 * 6.0 + 2.0 * 2.0) / 5.0).abs() < 1e-12);
        let back = SampledPrecision::from_tsv(&sp.to_tsv(), &groups).unwrap();
        assert_eq!(back, sp);
        assert!(SampledPrecision::from_tsv("0\t6\n2\t1\n", &groups).is_err());
    }
}
