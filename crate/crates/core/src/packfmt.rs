//! Bit-packed mixed-precision embedding store.
//!
//! Each feature's integer codes are stored as `b`-bit two's complement
//! values concatenated least-significant-bit first into its own run of
//! 16-bit words, zero-padded to the next word boundary. A feature at width
//! `b` therefore takes `ceil(d·b/16)` words and width zero takes none.
//! Features are laid out group by group, so the directory only records the
//! width and first word of every group.
//!
//! File layout (little-endian):
//!
//! ```text
//! "MPEPACK1" | version u32 | n u64 | d u32 | m u32 | candidates [m × u8]
//! catalog hash [32] | group_size u64 | g u32 | per group: bits u8, offset u64
//! steps u32 | per step: bits u8, alpha f64 | offsets [d × f64]
//! has_slots u8 [n × u32] | words u64 | payload [words × u16]
//! ```
//!
//! `slots` maps feature id to its position in group order and is only
//! present when groups are not contiguous id ranges.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::catalog::{CatalogHash, GroupAssignment};
use crate::error::{Error, Result};
use crate::quant::{self, BitWidth, QuantizerParams};
use crate::search::SampledPrecision;
use crate::trainer::EmbeddingSource;

pub const PACK_MAGIC: &[u8; 8] = b"MPEPACK1";
pub const PACK_VERSION: u32 = 1;

/// Words used by one feature of dimension `dim` at width `bits`.
#[inline]
pub fn words_per_feature(dim: usize, bits: BitWidth) -> usize {
    (dim * bits.get() as usize).div_ceil(16)
}

/// Packs `codes` LSB-first into `out`, which must hold
/// `ceil(codes.len()·b/16)` words.
pub fn pack_codes(codes: &[i32], bits: BitWidth, out: &mut [u16]) -> Result<()> {
    let b = bits.get();
    if b == 0 {
        return Ok(());
    }
    let need = (codes.len() * b as usize).div_ceil(16);
    if out.len() < need {
        return Err(Error::DimensionMismatch {
            expected: need,
            actual: out.len(),
        });
    }
    let mask = (1u32 << b) - 1;
    let mut acc = 0u32;
    let mut filled = 0u32;
    let mut w = 0;
    for &c in codes {
        if c < bits.min_code() || c > bits.max_code() {
            return Err(Error::InvalidArgument(format!("code {c} outside the {b}-bit range")));
        }
        acc |= (c as u32 & mask) << filled;
        filled += b;
        while filled >= 16 {
            out[w] = acc as u16;
            w += 1;
            acc >>= 16;
            filled -= 16;
        }
    }
    if filled > 0 {
        out[w] = acc as u16;
    }
    Ok(())
}

/// Inverse of [`pack_codes`]: reads `out.len()` sign-extended codes.
pub fn unpack_codes(words: &[u16], bits: BitWidth, out: &mut [i32]) {
    let b = bits.get();
    if b == 0 {
        out.fill(0);
        return;
    }
    let mask = (1u32 << b) - 1;
    let shift = 32 - b;
    let mut acc = 0u32;
    let mut filled = 0u32;
    let mut w = 0;
    for o in out.iter_mut() {
        while filled < b {
            acc |= (words[w] as u32) << filled;
            w += 1;
            filled += 16;
        }
        let raw = acc & mask;
        acc >>= b;
        filled -= b;
        *o = ((raw << shift) as i32) >> shift;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupRecord {
    pub bits: BitWidth,
    /// First payload word of the group.
    pub offset: u64,
}

/// Immutable packed embedding table with dequantizing lookup.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedTable {
    num_features: usize,
    dim: usize,
    candidates: Vec<BitWidth>,
    catalog_hash: CatalogHash,
    group_size: usize,
    directory: Vec<GroupRecord>,
    quant: QuantizerParams,
    slots: Option<Vec<u32>>,
    payload: Vec<u16>,
}

/// Quantizes the table at the sampled widths and packs every feature.
pub fn pack(
    embeddings: &[f64],
    dim: usize,
    sampled: &SampledPrecision,
    params: &QuantizerParams,
    groups: &GroupAssignment,
) -> Result<PackedTable> {
    let n = groups.num_features();
    if embeddings.len() != n * dim {
        return Err(Error::DimensionMismatch {
            expected: n * dim,
            actual: embeddings.len(),
        });
    }
    if params.dim() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: params.dim(),
        });
    }
    if sampled.bit_of_group.len() != groups.num_groups() {
        return Err(Error::DimensionMismatch {
            expected: groups.num_groups(),
            actual: sampled.bit_of_group.len(),
        });
    }

    let mut directory = Vec::with_capacity(groups.num_groups());
    let mut offset = 0u64;
    for (k, &bits) in sampled.bit_of_group.iter().enumerate() {
        if !bits.is_zero() {
            params.step_size(bits)?;
        }
        directory.push(GroupRecord { bits, offset });
        offset += (groups.group_len(k) * words_per_feature(dim, bits)) as u64;
    }

    let mut payload = vec![0u16; offset as usize];
    let mut slots = vec![0u32; n];
    let mut contiguous = true;
    for (k, rec) in directory.iter().enumerate() {
        let wpf = words_per_feature(dim, rec.bits);
        for (i, &id) in groups.members(k).iter().enumerate() {
            let slot = (k * groups.group_size() + i) as u32;
            slots[id as usize] = slot;
            contiguous &= slot == id;
            if rec.bits.is_zero() {
                continue;
            }
            let e = &embeddings[id as usize * dim..(id as usize + 1) * dim];
            let (_, codes) = quant::quantize_vector(e, params, rec.bits)?;
            let start = rec.offset as usize + i * wpf;
            pack_codes(&codes, rec.bits, &mut payload[start..start + wpf])?;
        }
    }

    let mut candidates: Vec<BitWidth> = sampled.bit_of_group.clone();
    candidates.sort_unstable();
    candidates.dedup();

    Ok(PackedTable {
        num_features: n,
        dim,
        candidates,
        catalog_hash: CatalogHash::default(),
        group_size: groups.group_size(),
        directory,
        quant: params.clone(),
        slots: if contiguous { None } else { Some(slots) },
        payload,
    })
}

/// Storage summary of a packed table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    /// Whole serialized file: payload plus header and directory.
    pub packed_bytes: u64,
    pub payload_bytes: u64,
    pub fp32_bytes: u64,
    pub ratio: f64,
    pub avg_bits: f64,
    pub per_bit_feature_counts: BTreeMap<u32, usize>,
}

impl PackedTable {
    pub fn with_catalog_hash(mut self, hash: CatalogHash) -> Self {
        self.catalog_hash = hash;
        self
    }

    /// Records the full candidate list of the search that produced the
    /// widths.
    pub fn with_candidates(mut self, candidates: &[BitWidth]) -> Self {
        self.candidates = candidates.to_vec();
        self
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn catalog_hash(&self) -> CatalogHash {
        self.catalog_hash
    }

    pub fn candidates(&self) -> &[BitWidth] {
        &self.candidates
    }

    pub fn directory(&self) -> &[GroupRecord] {
        &self.directory
    }

    pub fn payload(&self) -> &[u16] {
        &self.payload
    }

    pub fn quant(&self) -> &QuantizerParams {
        &self.quant
    }

    /// Fails unless the table was packed against `hash`.
    pub fn verify_catalog(&self, hash: &CatalogHash) -> Result<()> {
        hash.ensure_eq(&self.catalog_hash)
    }

    #[inline]
    fn locate(&self, id: u32) -> Result<(GroupRecord, usize)> {
        if id as usize >= self.num_features {
            return Err(Error::OutOfRange {
                id: id as usize,
                n: self.num_features,
            });
        }
        let slot = match &self.slots {
            Some(s) => s[id as usize] as usize,
            None => id as usize,
        };
        let rec = self.directory[slot / self.group_size];
        let wpf = words_per_feature(self.dim, rec.bits);
        Ok((rec, rec.offset as usize + (slot % self.group_size) * wpf))
    }

    /// Integer codes of one feature.
    pub fn codes(&self, id: u32) -> Result<(BitWidth, Vec<i32>)> {
        let (rec, start) = self.locate(id)?;
        let mut codes = vec![0; self.dim];
        let wpf = words_per_feature(self.dim, rec.bits);
        unpack_codes(&self.payload[start..start + wpf], rec.bits, &mut codes);
        Ok((rec.bits, codes))
    }

    /// Dequantized embedding `α_b·code + β`; zero vector at width zero.
    pub fn lookup(&self, id: u32) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.lookup_into(id, &mut out)?;
        Ok(out)
    }

    pub fn lookup_into(&self, id: u32, out: &mut [f64]) -> Result<()> {
        let (bits, codes) = self.codes(id)?;
        if bits.is_zero() {
            out.fill(0.0);
            return Ok(());
        }
        let alpha = self.quant.step_size(bits)?;
        for ((o, &c), &beta) in out.iter_mut().zip(&codes).zip(self.quant.offsets()) {
            *o = quant::dequantize(c, alpha, beta);
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(PACK_MAGIC)?;
        w.write_u32::<LittleEndian>(PACK_VERSION)?;
        w.write_u64::<LittleEndian>(self.num_features as u64)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u32::<LittleEndian>(self.candidates.len() as u32)?;
        for b in &self.candidates {
            w.write_u8(b.get() as u8)?;
        }
        w.write_all(&self.catalog_hash.0)?;
        w.write_u64::<LittleEndian>(self.group_size as u64)?;
        w.write_u32::<LittleEndian>(self.directory.len() as u32)?;
        for rec in &self.directory {
            w.write_u8(rec.bits.get() as u8)?;
            w.write_u64::<LittleEndian>(rec.offset)?;
        }
        w.write_u32::<LittleEndian>(self.quant.step_sizes().len() as u32)?;
        for (b, &a) in self.quant.step_sizes() {
            w.write_u8(b.get() as u8)?;
            w.write_f64::<LittleEndian>(a)?;
        }
        for &o in self.quant.offsets() {
            w.write_f64::<LittleEndian>(o)?;
        }
        match &self.slots {
            Some(slots) => {
                w.write_u8(1)?;
                for &s in slots {
                    w.write_u32::<LittleEndian>(s)?;
                }
            }
            None => w.write_u8(0)?,
        }
        w.write_u64::<LittleEndian>(self.payload.len() as u64)?;
        for &word in &self.payload {
            w.write_u16::<LittleEndian>(word)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != PACK_MAGIC {
            return Err(Error::Format("not a packed table (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != PACK_VERSION {
            return Err(Error::Format(format!("unsupported packed table version {version}")));
        }
        let num_features = r.read_u64::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let m = r.read_u32::<LittleEndian>()? as usize;
        let candidates = (0..m)
            .map(|_| BitWidth::new(r.read_u8()? as u32))
            .collect::<Result<Vec<_>>>()?;
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash)?;
        let group_size = r.read_u64::<LittleEndian>()? as usize;
        let g = r.read_u32::<LittleEndian>()? as usize;
        if group_size == 0 || g != num_features.div_ceil(group_size) {
            return Err(Error::Format("directory does not match n / group_size".into()));
        }
        let mut directory = Vec::with_capacity(g);
        for _ in 0..g {
            let bits = BitWidth::new(r.read_u8()? as u32)?;
            let offset = r.read_u64::<LittleEndian>()?;
            directory.push(GroupRecord { bits, offset });
        }
        let num_steps = r.read_u32::<LittleEndian>()? as usize;
        let mut steps = BTreeMap::new();
        for _ in 0..num_steps {
            let b = BitWidth::new(r.read_u8()? as u32)?;
            steps.insert(b, r.read_f64::<LittleEndian>()?);
        }
        let mut offsets = vec![0.0; dim];
        r.read_f64_into::<LittleEndian>(&mut offsets)?;
        let quant = QuantizerParams::new(steps, offsets)?;
        let slots = match r.read_u8()? {
            0 => None,
            1 => {
                let mut s = vec![0u32; num_features];
                r.read_u32_into::<LittleEndian>(&mut s)?;
                if s.iter().any(|&x| x as usize >= num_features) {
                    return Err(Error::Format("slot out of range".into()));
                }
                Some(s)
            }
            f => return Err(Error::Format(format!("bad slot flag {f}"))),
        };
        let words = r.read_u64::<LittleEndian>()? as usize;
        let mut payload = vec![0u16; words];
        r.read_u16_into::<LittleEndian>(&mut payload)?;

        // Every group's run must fit inside the payload.
        for (k, rec) in directory.iter().enumerate() {
            let len = group_size.min(num_features - k * group_size);
            let end = rec.offset as usize + len * words_per_feature(dim, rec.bits);
            if end > words {
                return Err(Error::Format(format!("group {k} overruns the payload")));
            }
            if !rec.bits.is_zero() && !quant.step_sizes().contains_key(&rec.bits) {
                return Err(Error::Format(format!("no step size for group {k}'s width")));
            }
        }
        Ok(Self {
            num_features,
            dim,
            candidates,
            catalog_hash: CatalogHash(hash),
            group_size,
            directory,
            quant,
            slots,
            payload,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Serialized size in bytes.
    pub fn file_size(&self) -> u64 {
        let header = 8 + 4 + 8 + 4 + 4 + self.candidates.len() + 32 + 8 + 4;
        let directory = self.directory.len() * 9;
        let quant = 4 + self.quant.step_sizes().len() * 9 + self.dim * 8;
        let slots = 1 + self.slots.as_ref().map_or(0, |s| s.len() * 4);
        (header + directory + quant + slots + 8 + self.payload.len() * 2) as u64
    }

    /// Width of every feature's group, in group order.
    fn group_len(&self, k: usize) -> usize {
        self.group_size.min(self.num_features - k * self.group_size)
    }

    pub fn report(&self) -> CompressionReport {
        let mut hist = BTreeMap::new();
        let mut total_bits = 0.0;
        for (k, rec) in self.directory.iter().enumerate() {
            let len = self.group_len(k);
            *hist.entry(rec.bits.get()).or_insert(0) += len;
            total_bits += (len as u64 * rec.bits.get() as u64) as f64;
        }
        let packed_bytes = self.file_size();
        let fp32_bytes = (self.num_features * self.dim * 4) as u64;
        CompressionReport {
            packed_bytes,
            payload_bytes: self.payload.len() as u64 * 2,
            fp32_bytes,
            ratio: packed_bytes as f64 / fp32_bytes as f64,
            avg_bits: total_bits / self.num_features as f64,
            per_bit_feature_counts: hist,
        }
    }

    /// Human-readable directory listing with the codes of each group's first
    /// stored feature.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# n={} d={} groups={} group_size={} words={} catalog={}",
            self.num_features,
            self.dim,
            self.directory.len(),
            self.group_size,
            self.payload.len(),
            self.catalog_hash
        );
        let first_ids = self.first_feature_of_groups();
        for (k, rec) in self.directory.iter().enumerate() {
            let id = first_ids[k];
            let codes = self
                .codes(id)
                .map(|(_, c)| c.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "group {k}\tbits {}\toffset {}\tfirst_feature {id}\tcodes {codes}",
                rec.bits, rec.offset
            );
        }
        out
    }

    fn first_feature_of_groups(&self) -> Vec<u32> {
        let g = self.directory.len();
        match &self.slots {
            None => (0..g).map(|k| (k * self.group_size) as u32).collect(),
            Some(slots) => {
                let mut first = vec![0u32; g];
                for (id, &slot) in slots.iter().enumerate() {
                    if (slot as usize).is_multiple_of(self.group_size) {
                        first[slot as usize / self.group_size] = id as u32;
                    }
                }
                first
            }
        }
    }
}

impl EmbeddingSource for PackedTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, feature: u32, out: &mut [f64]) {
        self.lookup_into(feature, out).expect("feature id out of range");
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bw(b: u32) -> BitWidth {
        BitWidth::new(b).unwrap()
    }

    #[test]
    fn words_per_feature_examples() {
        assert_eq!(words_per_feature(16, bw(3)), 3);
        assert_eq!(words_per_feature(16, bw(0)), 0);
        assert_eq!(words_per_feature(10, bw(3)), 2);
        assert_eq!(words_per_feature(1, bw(15)), 1);
    }

    #[test]
    fn bit_layout_is_lsb_first() {
        let mut words = [0u16; 1];
        // 3-bit codes 1, -1 (0b111), 2 → bits 001 | 111 | 010
        pack_codes(&[1, -1, 2], bw(3), &mut words).unwrap();
        assert_eq!(words[0], 0b010_111_001);
        let mut back = [0; 3];
        unpack_codes(&words, bw(3), &mut back);
        assert_eq!(back, [1, -1, 2]);
    }

    #[test]
    fn codes_straddle_word_boundaries() {
        let codes: Vec<i32> = (0..11).map(|i| if i % 2 == 0 { -16 } else { 15 }).collect();
        let mut words = vec![0u16; (11 * 5usize).div_ceil(16)];
        pack_codes(&codes, bw(5), &mut words).unwrap();
        let mut back = vec![0; 11];
        unpack_codes(&words, bw(5), &mut back);
        assert_eq!(back, codes);
    }

    #[test]
    fn out_of_range_code_is_rejected() {
        let mut words = [0u16; 1];
        assert!(pack_codes(&[4], bw(3), &mut words).is_err());
        assert!(pack_codes(&[-5], bw(3), &mut words).is_err());
    }

    #[test]
    fn single_feature_lookup() {
        let groups = GroupAssignment::from_frequencies(&[1], 128).unwrap();
        let sampled = SampledPrecision::from_bits(&groups, vec![bw(3)]).unwrap();
        let params = QuantizerParams::new([(bw(3), 0.1)].into_iter().collect(), vec![0.0, 0.0]).unwrap();
        let table = pack(&[0.37, -0.14], 2, &sampled, &params, &groups).unwrap();
        assert_eq!(table.codes(0).unwrap().1, vec![3, -1]);
        let v = table.lookup(0).unwrap();
        assert!((v[0] - 0.3).abs() < 1e-15 && (v[1] + 0.1).abs() < 1e-15);
        assert!(matches!(table.lookup(1), Err(Error::OutOfRange { id: 1, n: 1 })));
    }

    #[test]
    fn zero_width_group_has_no_payload() {
        let groups = GroupAssignment::from_frequencies(&[5, 4, 3, 2], 2).unwrap();
        let sampled = SampledPrecision::from_bits(&groups, vec![bw(2), bw(0)]).unwrap();
        let params = QuantizerParams::init(&[bw(2)], 16, 0.01);
        let emb: Vec<f64> = (0..64).map(|i| (i as f64 - 32.0) * 1e-3).collect();
        let table = pack(&emb, 16, &sampled, &params, &groups).unwrap();
        assert_eq!(table.payload().len(), 2 * 2);
        assert_eq!(table.lookup(3).unwrap(), vec![0.0; 16]);
        assert!(table.slots.is_none());
    }

    #[test]
    fn non_contiguous_groups_use_slots() {
        let groups = GroupAssignment::from_frequencies(&[1, 9, 2, 8], 2).unwrap();
        let sampled = SampledPrecision::from_bits(&groups, vec![bw(4), bw(1)]).unwrap();
        let params = QuantizerParams::init(&[bw(1), bw(4)], 2, 0.1);
        let emb = [0.05, -0.05, 0.1, 0.2, -0.3, 0.0, 0.01, 0.02];
        let table = pack(&emb, 2, &sampled, &params, &groups).unwrap();
        assert!(table.slots.is_some());
        for id in 0..4u32 {
            let b = sampled.bits_of_feature(&groups, id);
            let (expect, _) = quant::quantize_vector(&emb[id as usize * 2..id as usize * 2 + 2], &params, b).unwrap();
            assert_eq!(table.lookup(id).unwrap(), expect);
        }
        let back = PackedTable::read_from(&mut table.to_bytes().as_slice()).unwrap();
        assert_eq!(back, table);
        assert_eq!(table.file_size() as usize, table.to_bytes().len());
    }
}
