//! Versioned binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "MPECKPT1" | version u32 | phase u8 | catalog hash [32]
//! group_size u64 | m u32 | candidate bits [m × u8]
//! model | has_initial u8 [model] | has_sampled u8 [g u32, bits g × u8]
//!
//! model := n u64 | d u32 | fields u32 | embeddings [n·d × f64]
//!          layers u32 | per layer: in u32, out u32, weight, bias
//!          steps u32 | per step: bit u8, alpha f64 | offsets [d × f64]
//!          has_logits u8 [g u32, m u32, tau f64, gamma [g·m × f64]]
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::catalog::CatalogHash;
use crate::error::{Error, Result};
use crate::quant::{BitWidth, QuantizerParams};
use crate::search::{CandidateSet, GroupPrecisionState};
use crate::trainer::model::{Dense, Mlp, ModelState};
use crate::trainer::Phase;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MPECKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub phase: Phase,
    pub catalog_hash: CatalogHash,
    pub group_size: usize,
    pub candidates: CandidateSet,
    /// Best-validation parameters.
    pub model: ModelState,
    /// Parameters before the first update; kept by search checkpoints.
    pub initial: Option<ModelState>,
    /// Per-group widths used by quantized phases.
    pub sampled: Option<Vec<BitWidth>>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u8(self.phase.tag())?;
        w.write_all(&self.catalog_hash.0)?;
        w.write_u64::<LittleEndian>(self.group_size as u64)?;
        write_bits(w, self.candidates.bits())?;
        write_model(w, &self.model)?;
        match &self.initial {
            Some(m) => {
                w.write_u8(1)?;
                write_model(w, m)?;
            }
            None => w.write_u8(0)?,
        }
        match &self.sampled {
            Some(bits) => {
                w.write_u8(1)?;
                write_bits(w, bits)?;
            }
            None => w.write_u8(0)?,
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let phase = Phase::from_tag(r.read_u8()?)?;
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash)?;
        let group_size = r.read_u64::<LittleEndian>()? as usize;
        let bits = read_bits(r)?;
        let candidates = if bits.len() == 1 {
            CandidateSet::single(bits[0])
        } else {
            CandidateSet::new(bits)?
        };
        let model = read_model(r)?;
        let initial = if r.read_u8()? == 1 { Some(read_model(r)?) } else { None };
        let sampled = if r.read_u8()? == 1 { Some(read_bits(r)?) } else { None };
        Ok(Self {
            phase,
            catalog_hash: CatalogHash(hash),
            group_size,
            candidates,
            model,
            initial,
            sampled,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }
}

fn write_bits<W: Write>(w: &mut W, bits: &[BitWidth]) -> Result<()> {
    w.write_u32::<LittleEndian>(bits.len() as u32)?;
    for b in bits {
        w.write_u8(b.get() as u8)?;
    }
    Ok(())
}

fn read_bits<R: Read>(r: &mut R) -> Result<Vec<BitWidth>> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    (0..len).map(|_| BitWidth::new(r.read_u8()? as u32)).collect()
}

fn write_f64s<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    for &x in v {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, len: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; len];
    r.read_f64_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

fn write_model<W: Write>(w: &mut W, m: &ModelState) -> Result<()> {
    w.write_u64::<LittleEndian>(m.num_features as u64)?;
    w.write_u32::<LittleEndian>(m.dim as u32)?;
    w.write_u32::<LittleEndian>(m.num_fields as u32)?;
    write_f64s(w, &m.embeddings)?;
    w.write_u32::<LittleEndian>(m.mlp.layers.len() as u32)?;
    for layer in &m.mlp.layers {
        w.write_u32::<LittleEndian>(layer.inputs as u32)?;
        w.write_u32::<LittleEndian>(layer.outputs as u32)?;
        write_f64s(w, &layer.weight)?;
        write_f64s(w, &layer.bias)?;
    }
    w.write_u32::<LittleEndian>(m.quant.step_sizes().len() as u32)?;
    for (b, &a) in m.quant.step_sizes() {
        w.write_u8(b.get() as u8)?;
        w.write_f64::<LittleEndian>(a)?;
    }
    write_f64s(w, m.quant.offsets())?;
    match &m.precision {
        Some(s) => {
            w.write_u8(1)?;
            w.write_u32::<LittleEndian>(s.num_groups() as u32)?;
            w.write_u32::<LittleEndian>(s.num_candidates() as u32)?;
            w.write_f64::<LittleEndian>(s.tau())?;
            write_f64s(w, s.gamma())?;
        }
        None => w.write_u8(0)?,
    }
    Ok(())
}

fn read_model<R: Read>(r: &mut R) -> Result<ModelState> {
    let num_features = r.read_u64::<LittleEndian>()? as usize;
    let dim = r.read_u32::<LittleEndian>()? as usize;
    let num_fields = r.read_u32::<LittleEndian>()? as usize;
    let embeddings = read_f64s(r, num_features * dim)?;
    let num_layers = r.read_u32::<LittleEndian>()? as usize;
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let inputs = r.read_u32::<LittleEndian>()? as usize;
        let outputs = r.read_u32::<LittleEndian>()? as usize;
        let weight = read_f64s(r, inputs * outputs)?;
        let bias = read_f64s(r, outputs)?;
        layers.push(Dense {
            inputs,
            outputs,
            weight,
            bias,
        });
    }
    if layers.is_empty() || layers[0].inputs != num_fields * dim {
        return Err(Error::Format("network input does not match fields × dim".into()));
    }
    let num_steps = r.read_u32::<LittleEndian>()? as usize;
    let mut steps = BTreeMap::new();
    for _ in 0..num_steps {
        let b = BitWidth::new(r.read_u8()? as u32)?;
        steps.insert(b, r.read_f64::<LittleEndian>()?);
    }
    let offsets = read_f64s(r, dim)?;
    let quant = QuantizerParams::new(steps, offsets)?;
    let precision = if r.read_u8()? == 1 {
        let g = r.read_u32::<LittleEndian>()? as usize;
        let m = r.read_u32::<LittleEndian>()? as usize;
        let tau = r.read_f64::<LittleEndian>()?;
        let gamma = read_f64s(r, g * m)?;
        Some(GroupPrecisionState::from_gamma(gamma, g, m, tau)?)
    } else {
        None
    };
    Ok(ModelState {
        num_features,
        dim,
        num_fields,
        embeddings,
        mlp: Mlp { layers },
        quant,
        precision,
    })
}
