//! Embedding table plus a ReLU MLP with a single logit output, trained by
//! explicit reverse-mode differentiation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::catalog::{GroupAssignment, Samples};
use crate::error::{Error, Result};
use crate::quant::{self, BitWidth, QuantizerParams, EMBEDDING_INIT_STD};
use crate::search::{self, CandidateSet, GroupPrecisionState, SampledPrecision};
use crate::trainer::metrics::{bce_with_logit, sigmoid};

/// Fully connected layer, `weight` is row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Uniform `±1/sqrt(inputs)` weights, zero bias.
    pub fn init<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weight = (0..inputs * outputs).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64], batch: usize, out: &mut Vec<f64>) {
        out.clear();
        out.reserve(batch * self.outputs);
        for xs in x.chunks_exact(self.inputs).take(batch) {
            for (w, &b) in self.weight.chunks_exact(self.inputs).zip(&self.bias) {
                out.push(b + dot(w, xs));
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `[input → hidden_1 → … → hidden_L → 1]`.
    pub fn init<R: Rng>(input: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = input;
        for &h in hidden {
            layers.push(Dense::init(prev, h, rng));
            prev = h;
        }
        layers.push(Dense::init(prev, 1, rng));
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn hidden_sizes(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(|l| l.outputs).collect()
    }

    /// Per-layer outputs; hidden layers are post-ReLU, the last holds logits.
    fn forward_cached(&self, x: &[f64], batch: usize) -> Vec<Vec<f64>> {
        let mut acts: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::new();
            let input = if l == 0 { x } else { &acts[l - 1] };
            layer.forward(input, batch, &mut out);
            if l + 1 < self.layers.len() {
                for v in out.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(out);
        }
        acts
    }

    /// Logits for a row-major batch of inputs.
    pub fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        self.forward_cached(x, batch).pop().unwrap()
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, x: &[f64], acts: &[Vec<f64>], d_logits: &[f64], batch: usize, grads: &mut [DenseGrad]) -> Vec<f64> {
        let mut d_out = d_logits.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input: &[f64] = if l == 0 { x } else { &acts[l - 1] };
            let g = &mut grads[l];
            let mut d_in = vec![0.0; batch * layer.inputs];
            for s in 0..batch {
                let xs = &input[s * layer.inputs..(s + 1) * layer.inputs];
                let dz = &d_out[s * layer.outputs..(s + 1) * layer.outputs];
                let di = &mut d_in[s * layer.inputs..(s + 1) * layer.inputs];
                for (o, &dzo) in dz.iter().enumerate() {
                    if dzo == 0.0 {
                        continue;
                    }
                    g.bias[o] += dzo;
                    let w = &layer.weight[o * layer.inputs..(o + 1) * layer.inputs];
                    let gw = &mut g.weight[o * layer.inputs..(o + 1) * layer.inputs];
                    for i in 0..layer.inputs {
                        gw[i] += dzo * xs[i];
                        di[i] += dzo * w[i];
                    }
                }
            }
            if l > 0 {
                // ReLU mask of the layer below.
                for (d, &a) in d_in.iter_mut().zip(&acts[l - 1]) {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            d_out = d_in;
        }
        d_out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Trainable state: embedding table `E`, network `W`, quantizer parameters
/// and, during search, the group logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub num_features: usize,
    pub dim: usize,
    pub num_fields: usize,
    pub embeddings: Vec<f64>,
    pub mlp: Mlp,
    pub quant: QuantizerParams,
    pub precision: Option<GroupPrecisionState>,
}

impl ModelState {
    /// Normal(0, 3e-3) embeddings, uniform fan-in MLP weights, and a
    /// quantizer grid for every nonzero candidate. Deterministic in `seed`.
    pub fn init(
        num_features: usize,
        dim: usize,
        num_fields: usize,
        hidden: &[usize],
        cands: &CandidateSet,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, EMBEDDING_INIT_STD).unwrap();
        let embeddings = (0..num_features * dim).map(|_| normal.sample(&mut rng)).collect();
        let mlp = Mlp::init(num_fields * dim, hidden, &mut rng);
        Self {
            num_features,
            dim,
            num_fields,
            embeddings,
            mlp,
            quant: QuantizerParams::init(cands.bits(), dim, EMBEDDING_INIT_STD),
            precision: None,
        }
    }

    #[inline]
    pub fn embedding(&self, id: u32) -> &[f64] {
        let start = id as usize * self.dim;
        &self.embeddings[start..start + self.dim]
    }
}

/// How looked-up embeddings are transformed before the network.
#[derive(Debug, Clone, Copy)]
pub enum EmbeddingMode<'a> {
    /// Raw full-precision rows.
    FullPrecision,
    /// Probability-weighted mixture over candidate widths, plus the
    /// bit-width penalty with coefficient `lambda`.
    Mixture {
        groups: &'a GroupAssignment,
        cands: &'a CandidateSet,
        lambda: f64,
    },
    /// Each row quantized at its group's sampled width.
    Quantized {
        groups: &'a GroupAssignment,
        sampled: &'a SampledPrecision,
    },
}

/// Anything that can produce the embedding fed to the network for a
/// feature id.
pub trait EmbeddingSource {
    fn dim(&self) -> usize;
    fn embed(&self, feature: u32, out: &mut [f64]);
}

/// Step size per bit width, indexed by bit value; zero where absent.
fn steps_by_bit(params: &QuantizerParams) -> [f64; 16] {
    let mut steps = [0.0; 16];
    for (b, &a) in params.step_sizes() {
        steps[b.get() as usize] = a;
    }
    steps
}

/// Embedding view of a model under a given mode.
pub struct ModelView<'a> {
    model: &'a ModelState,
    kind: ViewKind<'a>,
}

enum ViewKind<'a> {
    Raw,
    Mixture {
        groups: &'a GroupAssignment,
        bits: &'a [BitWidth],
        steps: Vec<f64>,
        probs: Vec<f64>,
    },
    Quantized {
        groups: &'a GroupAssignment,
        sampled: &'a SampledPrecision,
        steps: [f64; 16],
    },
}

impl<'a> ModelView<'a> {
    pub fn new(model: &'a ModelState, mode: &EmbeddingMode<'a>) -> Result<Self> {
        let kind = match *mode {
            EmbeddingMode::FullPrecision => ViewKind::Raw,
            EmbeddingMode::Mixture { groups, cands, .. } => {
                let state = model
                    .precision
                    .as_ref()
                    .ok_or_else(|| Error::MissingPrerequisite("mixture mode needs group logits".into()))?;
                if state.num_groups() != groups.num_groups() || state.num_candidates() != cands.len() {
                    return Err(Error::InvalidArgument("group logits do not match groups/candidates".into()));
                }
                ViewKind::Mixture {
                    groups,
                    bits: cands.bits(),
                    steps: search::candidate_steps(&model.quant, cands)?,
                    probs: state.all_probabilities(),
                }
            }
            EmbeddingMode::Quantized { groups, sampled } => {
                for b in &sampled.bit_of_group {
                    if !b.is_zero() {
                        model.quant.step_size(*b)?;
                    }
                }
                ViewKind::Quantized {
                    groups,
                    sampled,
                    steps: steps_by_bit(&model.quant),
                }
            }
        };
        Ok(Self { model, kind })
    }

    fn embed_with(&self, feature: u32, out: &mut [f64], scratch: &mut [f64]) {
        let e = self.model.embedding(feature);
        let offsets = self.model.quant.offsets();
        match &self.kind {
            ViewKind::Raw => out.copy_from_slice(e),
            ViewKind::Mixture {
                groups,
                bits,
                steps,
                probs,
            } => {
                let m = bits.len();
                let k = groups.group_of(feature);
                search::mixture_into(e, steps, offsets, bits, &probs[k * m..(k + 1) * m], out, scratch);
            }
            ViewKind::Quantized { groups, sampled, steps } => {
                let b = sampled.bits_of_feature(groups, feature);
                quant::quantize_into(e, steps[b.get() as usize], offsets, b, out);
            }
        }
    }
}

impl EmbeddingSource for ModelView<'_> {
    fn dim(&self) -> usize {
        self.model.dim
    }

    fn embed(&self, feature: u32, out: &mut [f64]) {
        let mut scratch = vec![0.0; self.model.dim];
        self.embed_with(feature, out, &mut scratch);
    }
}

/// Gradients of the training objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Dense `n × d`.
    pub embeddings: Vec<f64>,
    pub mlp: Vec<DenseGrad>,
    /// Indexed by bit value.
    pub alpha: [f64; 16],
    pub beta: Vec<f64>,
    /// Row-major `g × m`; empty outside search.
    pub gamma: Vec<f64>,
}

impl Gradients {
    pub fn zeros(model: &ModelState) -> Self {
        Self {
            embeddings: vec![0.0; model.embeddings.len()],
            mlp: model
                .mlp
                .layers
                .iter()
                .map(|l| DenseGrad {
                    weight: vec![0.0; l.weight.len()],
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            alpha: [0.0; 16],
            beta: vec![0.0; model.dim],
            gamma: model.precision.as_ref().map(|s| vec![0.0; s.gamma().len()]).unwrap_or_default(),
        }
    }
}

/// Loss and gradients of one mini-batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    /// Cross-entropy plus, in mixture mode, the bit-width penalty.
    pub loss: f64,
    pub ce_loss: f64,
    pub grads: Gradients,
}

/// Gathers the transformed embeddings for `rows` into a row-major
/// `rows × (fields·d)` matrix.
pub fn gather_inputs<S: EmbeddingSource + ?Sized>(source: &S, data: &Samples, rows: &[usize]) -> Vec<f64> {
    let d = source.dim();
    let width = data.num_fields * d;
    let mut x = vec![0.0; rows.len() * width];
    for (s, &r) in rows.iter().enumerate() {
        for (f, &id) in data.row(r).iter().enumerate() {
            let start = s * width + f * d;
            source.embed(id, &mut x[start..start + d]);
        }
    }
    x
}

/// Logits for every sample, in order.
pub fn predict<S: EmbeddingSource + ?Sized>(source: &S, mlp: &Mlp, data: &Samples) -> Vec<f64> {
    const CHUNK: usize = 4096;
    let mut logits = Vec::with_capacity(data.len());
    let all: Vec<usize> = (0..data.len()).collect();
    for rows in all.chunks(CHUNK) {
        let x = gather_inputs(source, data, rows);
        logits.extend(mlp.forward(&x, rows.len()));
    }
    logits
}

/// Mean cross-entropy (plus the bit-width penalty in mixture mode) and its
/// gradients for the mini-batch `rows` of `data`.
pub fn forward_backward(model: &ModelState, data: &Samples, rows: &[usize], mode: &EmbeddingMode) -> Result<StepOutput> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if data.num_fields != model.num_fields {
        return Err(Error::DimensionMismatch {
            expected: model.num_fields,
            actual: data.num_fields,
        });
    }
    let view = ModelView::new(model, mode)?;
    let d = model.dim;
    let batch = rows.len();
    let width = model.num_fields * d;

    let mut scratch = vec![0.0; d];
    let mut x = vec![0.0; batch * width];
    for (s, &r) in rows.iter().enumerate() {
        for (f, &id) in data.row(r).iter().enumerate() {
            let start = s * width + f * d;
            view.embed_with(id, &mut x[start..start + d], &mut scratch);
        }
    }

    let acts = model.mlp.forward_cached(&x, batch);
    let logits = acts.last().unwrap();
    let inv_batch = 1.0 / batch as f64;
    let mut ce_loss = 0.0;
    let mut d_logits = vec![0.0; batch];
    for (s, &r) in rows.iter().enumerate() {
        let y = data.labels[r];
        ce_loss += bce_with_logit(logits[s], y);
        d_logits[s] = (sigmoid(logits[s]) - y as f64) * inv_batch;
    }
    ce_loss *= inv_batch;

    let mut grads = Gradients::zeros(model);
    let d_x = model.mlp.backward(&x, &acts, &d_logits, batch, &mut grads.mlp);

    let offsets = model.quant.offsets();
    let mut loss = ce_loss;
    match &view.kind {
        ViewKind::Raw => {
            for (s, &r) in rows.iter().enumerate() {
                for (f, &id) in data.row(r).iter().enumerate() {
                    let up = &d_x[s * width + f * d..s * width + (f + 1) * d];
                    let row = &mut grads.embeddings[id as usize * d..(id as usize + 1) * d];
                    for (g, &u) in row.iter_mut().zip(up) {
                        *g += u;
                    }
                }
            }
        }
        ViewKind::Quantized { groups, sampled, steps } => {
            for (s, &r) in rows.iter().enumerate() {
                for (f, &id) in data.row(r).iter().enumerate() {
                    let up = &d_x[s * width + f * d..s * width + (f + 1) * d];
                    let b = sampled.bits_of_feature(groups, id);
                    let mut d_alpha = 0.0;
                    quant::accumulate_grad(
                        model.embedding(id),
                        steps[b.get() as usize],
                        offsets,
                        b,
                        up,
                        1.0,
                        &mut grads.embeddings[id as usize * d..(id as usize + 1) * d],
                        &mut d_alpha,
                        &mut grads.beta,
                    );
                    grads.alpha[b.get() as usize] += d_alpha;
                }
            }
        }
        ViewKind::Mixture {
            groups,
            bits,
            steps,
            probs,
        } => {
            let (cands, lambda) = match mode {
                EmbeddingMode::Mixture { cands, lambda, .. } => (*cands, *lambda),
                _ => unreachable!(),
            };
            let state = model.precision.as_ref().unwrap();
            let m = bits.len();
            let mut d_p = vec![0.0; probs.len()];
            let mut d_alpha = vec![0.0; m];
            for (s, &r) in rows.iter().enumerate() {
                for (f, &id) in data.row(r).iter().enumerate() {
                    let up = &d_x[s * width + f * d..s * width + (f + 1) * d];
                    let k = groups.group_of(id);
                    d_alpha.fill(0.0);
                    search::mixture_backward_into(
                        model.embedding(id),
                        steps,
                        offsets,
                        bits,
                        &probs[k * m..(k + 1) * m],
                        up,
                        &mut grads.embeddings[id as usize * d..(id as usize + 1) * d],
                        &mut d_alpha,
                        &mut grads.beta,
                        &mut d_p[k * m..(k + 1) * m],
                        &mut scratch,
                    );
                    for (i, b) in bits.iter().enumerate() {
                        grads.alpha[b.get() as usize] += d_alpha[i];
                    }
                }
            }
            for k in 0..state.num_groups() {
                let range = k * m..(k + 1) * m;
                search::gamma_grad_into(
                    &probs[range.clone()],
                    &d_p[range.clone()],
                    state.tau(),
                    &mut grads.gamma[range],
                );
            }
            let (reg, reg_grad) = search::bit_regularizer(state, cands, groups.freq_sums(), lambda)?;
            loss += reg;
            for (g, r) in grads.gamma.iter_mut().zip(&reg_grad) {
                *g += r;
            }
        }
    }

    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            batch: 0,
            detail: format!("loss={loss} ce={ce_loss}"),
        });
    }
    Ok(StepOutput { loss, ce_loss, grads })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_data() -> Samples {
        let mut s = Samples::new(2);
        s.push(&[0, 3], 1);
        s.push(&[1, 2], 0);
        s.push(&[0, 2], 1);
        s.push(&[1, 3], 0);
        s
    }

    #[test]
    fn untrained_net_predicts_one_half() {
        let cands = CandidateSet::default();
        let model = ModelState::init(4, 8, 2, &[16, 8], &cands, 3);
        let data = tiny_data();
        let out = forward_backward(&model, &data, &[0], &EmbeddingMode::FullPrecision).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-2, "{}", out.loss);
    }

    #[test]
    fn predict_matches_training_forward() {
        let cands = CandidateSet::default();
        let model = ModelState::init(4, 8, 2, &[16, 8], &cands, 3);
        let data = tiny_data();
        let view = ModelView::new(&model, &EmbeddingMode::FullPrecision).unwrap();
        let logits = predict(&view, &model.mlp, &data);
        let out = forward_backward(&model, &data, &[0, 1, 2, 3], &EmbeddingMode::FullPrecision).unwrap();
        let ce: f64 = logits
            .iter()
            .zip(&data.labels)
            .map(|(&z, &y)| bce_with_logit(z, y))
            .sum::<f64>()
            / 4.0;
        assert_eq!(ce, out.ce_loss);
    }

    #[test]
    fn rejects_empty_batch_and_missing_logits() {
        let cands = CandidateSet::default();
        let model = ModelState::init(4, 8, 2, &[4], &cands, 3);
        let data = tiny_data();
        assert!(forward_backward(&model, &data, &[], &EmbeddingMode::FullPrecision).is_err());
        let groups = GroupAssignment::from_frequencies(&[4, 3, 2, 1], 2).unwrap();
        let mode = EmbeddingMode::Mixture {
            groups: &groups,
            cands: &cands,
            lambda: 0.0,
        };
        assert!(matches!(
            forward_backward(&model, &data, &[0], &mode),
            Err(Error::MissingPrerequisite(_))
        ));
    }
}
