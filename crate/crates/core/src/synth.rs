//! Synthetic click logs with Zipf-distributed tokens and planted importance.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::metrics::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_fields: usize,
    pub features_per_field: usize,
    pub zipf_exponent: f64,
    pub informative_fraction: f64,
    pub logit_scale: f64,
    #[serde(default)]
    pub noise_std: f64,
    pub num_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// 1 picks informative tokens strictly by frequency rank, 0 uniformly.
    #[serde(default = "default_correlation")]
    pub importance_correlation: f64,
    /// Bias the logits so the expected positive rate hits this value.
    #[serde(default)]
    pub target_positive_rate: Option<f64>,
}

fn default_correlation() -> f64 {
    1.0
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_fields == 0 {
            return Err(Error::InvalidArgument("synthetic spec needs at least one field".into()));
        }
        if self.features_per_field == 0 {
            return Err(Error::InvalidArgument("features_per_field must be positive".into()));
        }
        if self.num_samples == 0 {
            return Err(Error::InvalidArgument("num_samples must be positive".into()));
        }
        if !(self.zipf_exponent > 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::Domain(format!("zipf_exponent must be positive, got {}", self.zipf_exponent)));
        }
        if !(0.0..=1.0).contains(&self.informative_fraction) {
            return Err(Error::Domain("informative_fraction must lie in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.importance_correlation) {
            return Err(Error::Domain("importance_correlation must lie in [0, 1]".into()));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::Domain("logit_scale must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Domain("noise_std must be nonnegative".into()));
        }
        if let Some(t) = self.target_positive_rate {
            if !(t > 0.0 && t < 1.0) {
                return Err(Error::Domain("target_positive_rate must lie in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// Generated log. Tokens are stored as zero-based frequency ranks.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub num_fields: usize,
    pub features_per_field: usize,
    pub labels: Vec<u8>,
    /// Row-major `num_samples × num_fields` ranks.
    pub ranks: Vec<u32>,
    /// Latent weight per `(field, rank)`, field-major; zero when uninformative.
    pub weights: Vec<f64>,
    pub bias: f64,
}

pub fn token_name(field: usize, rank: u32) -> String {
    format!("f{field}_{rank}")
}

pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let f = spec.num_fields;
    let v = spec.features_per_field;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let informative_per_field = (spec.informative_fraction * v as f64).round() as usize;
    let c = spec.importance_correlation;
    let mut weights = vec![0.0; f * v];
    for field in 0..f {
        let mut scored: Vec<(f64, usize)> = (0..v)
            .map(|r| (c * r as f64 / v as f64 + (1.0 - c) * rng.random::<f64>(), r))
            .collect();
        scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, r) in &scored[..informative_per_field] {
            let z: f64 = rng.sample(StandardNormal);
            weights[field * v + r] = z * spec.logit_scale;
        }
    }

    let zipf = Zipf::new(v as f64, spec.zipf_exponent).map_err(|e| Error::Domain(e.to_string()))?;
    let n = spec.num_samples;
    let mut ranks = Vec::with_capacity(n * f);
    let mut logits = Vec::with_capacity(n);
    for _ in 0..n {
        let mut z = 0.0;
        for field in 0..f {
            let r = zipf.sample(&mut rng) as u32 - 1;
            ranks.push(r);
            z += weights[field * v + r as usize];
        }
        if spec.noise_std > 0.0 {
            let e: f64 = rng.sample(StandardNormal);
            z += spec.noise_std * e;
        }
        logits.push(z);
    }

    let bias = match spec.target_positive_rate {
        Some(t) => solve_bias(&logits, t),
        None => 0.0,
    };
    let labels = logits
        .iter()
        .map(|&z| u8::from(rng.random::<f64>() < sigmoid(z + bias)))
        .collect();

    Ok(SynthData {
        num_fields: f,
        features_per_field: v,
        labels,
        ranks,
        weights,
        bias,
    })
}

/// Bias `b` with `mean(sigmoid(z + b)) = target`, by bisection.
fn solve_bias(logits: &[f64], target: f64) -> f64 {
    let rate = |b: f64| logits.iter().map(|&z| sigmoid(z + b)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-50.0, 50.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

impl SynthData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positive_rate(&self) -> f64 {
        self.labels.iter().map(|&y| y as f64).sum::<f64>() / self.labels.len() as f64
    }

    pub fn weight(&self, field: usize, rank: u32) -> f64 {
        self.weights[field * self.features_per_field + rank as usize]
    }

    /// `label \t token_1 \t … \t token_F` per sample.
    pub fn write_tsv<W: Write>(&self, w: &mut W) -> Result<()> {
        for (i, &y) in self.labels.iter().enumerate() {
            write!(w, "{y}")?;
            for (field, &r) in self.ranks[i * self.num_fields..(i + 1) * self.num_fields].iter().enumerate() {
                write!(w, "\t{}", token_name(field, r))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    /// `token \t latent_weight` for the whole vocabulary.
    pub fn write_weights<W: Write>(&self, w: &mut W) -> Result<()> {
        for field in 0..self.num_fields {
            for r in 0..self.features_per_field as u32 {
                writeln!(w, "{}\t{}", token_name(field, r), self.weight(field, r))?;
            }
        }
        Ok(())
    }
}
