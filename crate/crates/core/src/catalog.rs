//! Click-log ingestion, feature vocabulary and frequency-aware grouping.
//!
//! Input rows are tab-separated: the label (`0` or `1`) followed by one
//! token per field. Tokens that occur exactly once in the whole input are
//! folded into their field's OOV feature. Rows are split 8:1:1 into
//! train/valid/test by a seeded shuffle, and frequencies are counted on the
//! training split only.
//!
//! Feature ids are assigned in descending training-frequency order (ties by
//! field, then OOV before tokens, then token bytes), so the frequency groups
//! produced by [`group_by_frequency`] are contiguous id ranges.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CATALOG_MAGIC: &[u8; 7] = b"MPECAT1";
pub const DATASET_MAGIC: &[u8; 8] = b"MPEDATA1";

/// SHA-256 digest of a serialized catalog.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct CatalogHash(pub [u8; 32]);

impl CatalogHash {
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        if s.len() != 64 || !s.is_ascii() {
            return Err(Error::Format(format!("bad catalog hash {s:?}")));
        }
        let mut out = [0u8; 32];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|_| Error::Format(format!("bad catalog hash {s:?}")))?;
        }
        Ok(CatalogHash(out))
    }

    pub fn ensure_eq(&self, found: &CatalogHash) -> Result<()> {
        if self != found {
            return Err(Error::HashMismatch {
                expected: self.to_hex(),
                found: found.to_hex(),
            });
        }
        Ok(())
    }
}

impl fmt::Display for CatalogHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Ordered list of categorical field names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schema {
    fields: Vec<String>,
}

impl Schema {
    pub fn new(fields: Vec<String>) -> Result<Self> {
        if fields.is_empty() {
            return Err(Error::InvalidArgument("schema needs at least one field".into()));
        }
        Ok(Self { fields })
    }

    /// Fields named `f0`, `f1`, ...
    pub fn anonymous(num_fields: usize) -> Result<Self> {
        Self::new((0..num_fields).map(|i| format!("f{i}")).collect())
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn fields(&self) -> &[String] {
        &self.fields
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Valid => 1,
            Split::Test => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Split::Train),
            1 => Ok(Split::Valid),
            2 => Ok(Split::Test),
            t => Err(Error::Format(format!("unknown split tag {t}"))),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// One vocabulary entry. `token == None` is the field's OOV feature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureEntry {
    pub field: u32,
    pub token: Option<String>,
}

#[derive(Debug, Clone)]
pub struct FeatureCatalog {
    fields: Vec<String>,
    entries: Vec<FeatureEntry>,
    frequencies: Vec<u64>,
    dim: usize,
    index: HashMap<(u32, String), u32>,
    oov: Vec<u32>,
}

impl PartialEq for FeatureCatalog {
    fn eq(&self, other: &Self) -> bool {
        self.fields == other.fields
            && self.entries == other.entries
            && self.frequencies == other.frequencies
            && self.dim == other.dim
    }
}

impl FeatureCatalog {
    fn from_parts(fields: Vec<String>, entries: Vec<FeatureEntry>, frequencies: Vec<u64>, dim: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(entries.len());
        let mut oov = vec![u32::MAX; fields.len()];
        for (id, entry) in entries.iter().enumerate() {
            let field = entry.field as usize;
            if field >= fields.len() {
                return Err(Error::Format(format!("feature {id} references field {field}")));
            }
            match &entry.token {
                None => {
                    if oov[field] != u32::MAX {
                        return Err(Error::Format(format!("field {field} has two OOV features")));
                    }
                    oov[field] = id as u32;
                }
                Some(tok) => {
                    if index.insert((entry.field, tok.clone()), id as u32).is_some() {
                        return Err(Error::Format(format!("duplicate token {tok:?} in field {field}")));
                    }
                }
            }
        }
        if let Some(field) = oov.iter().position(|&id| id == u32::MAX) {
            return Err(Error::Format(format!("field {field} has no OOV feature")));
        }
        Ok(Self {
            fields,
            entries,
            frequencies,
            dim,
            index,
            oov,
        })
    }

    /// Total number of features `n`.
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn field_names(&self) -> &[String] {
        &self.fields
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Training-split occurrence counts, indexed by feature id.
    pub fn frequencies(&self) -> &[u64] {
        &self.frequencies
    }

    pub fn entry(&self, id: u32) -> Option<&FeatureEntry> {
        self.entries.get(id as usize)
    }

    pub fn oov_id(&self, field: usize) -> u32 {
        self.oov[field]
    }

    /// Maps a raw token to its feature id; unknown tokens map to the OOV id.
    pub fn lookup(&self, field: usize, token: &str) -> u32 {
        // TODO: avoid the String allocation with a borrowed-key map.
        self.index
            .get(&(field as u32, token.to_string()))
            .copied()
            .unwrap_or(self.oov[field])
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(CATALOG_MAGIC)?;
        w.write_u32::<LittleEndian>(self.fields.len() as u32)?;
        w.write_u64::<LittleEndian>(self.entries.len() as u64)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        for name in &self.fields {
            write_str(w, name)?;
        }
        for (entry, &freq) in self.entries.iter().zip(&self.frequencies) {
            w.write_u32::<LittleEndian>(entry.field)?;
            match &entry.token {
                None => {
                    w.write_u8(1)?;
                    write_str(w, "")?;
                }
                Some(tok) => {
                    w.write_u8(0)?;
                    write_str(w, tok)?;
                }
            }
            w.write_u64::<LittleEndian>(freq)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic)?;
        if &magic != CATALOG_MAGIC {
            return Err(Error::Format("not a catalog file (bad magic)".into()));
        }
        let num_fields = r.read_u32::<LittleEndian>()? as usize;
        let n = r.read_u64::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        let fields = (0..num_fields).map(|_| read_str(r)).collect::<Result<Vec<_>>>()?;
        let mut entries = Vec::with_capacity(n);
        let mut frequencies = Vec::with_capacity(n);
        for _ in 0..n {
            let field = r.read_u32::<LittleEndian>()?;
            let kind = r.read_u8()?;
            let tok = read_str(r)?;
            let token = match kind {
                0 => Some(tok),
                1 => None,
                k => return Err(Error::Format(format!("unknown token kind {k}"))),
            };
            entries.push(FeatureEntry { field, token });
            frequencies.push(r.read_u64::<LittleEndian>()?);
        }
        Self::from_parts(fields, entries, frequencies, dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn hash(&self) -> CatalogHash {
        CatalogHash(Sha256::digest(self.to_bytes()).into())
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))
}

/// Labelled samples of one split, row-major feature ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Samples {
    pub num_fields: usize,
    pub ids: Vec<u32>,
    pub labels: Vec<u8>,
}

impl Samples {
    pub fn new(num_fields: usize) -> Self {
        Self {
            num_fields,
            ids: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i * self.num_fields..(i + 1) * self.num_fields]
    }

    pub fn push(&mut self, row: &[u32], label: u8) {
        debug_assert_eq!(row.len(), self.num_fields);
        self.ids.extend_from_slice(row);
        self.labels.push(label);
    }

    /// Copies the listed rows, in order.
    pub fn select(&self, rows: &[usize]) -> Samples {
        let mut out = Samples::new(self.num_fields);
        for &i in rows {
            out.push(self.row(i), self.labels[i]);
        }
        out
    }
}

/// All ingested samples with their split tags.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    samples: Samples,
    splits: Vec<Split>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }

    pub fn num_fields(&self) -> usize {
        self.samples.num_fields
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn samples(&self) -> &Samples {
        &self.samples
    }

    pub fn split(&self, which: Split) -> Samples {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| self.splits[i] == which).collect();
        self.samples.select(&rows)
    }

    pub fn write_to<W: Write>(&self, w: &mut W, catalog_hash: &CatalogHash) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&catalog_hash.0)?;
        w.write_u32::<LittleEndian>(self.samples.num_fields as u32)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        for i in 0..self.len() {
            w.write_u8(self.splits[i].tag())?;
            w.write_u8(self.samples.labels[i])?;
            for &id in self.samples.row(i) {
                w.write_u32::<LittleEndian>(id)?;
            }
        }
        Ok(())
    }

    /// Reads a dataset file and returns it with the catalog hash it was
    /// written against.
    pub fn read_from<R: Read>(r: &mut R) -> Result<(Self, CatalogHash)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let mut hash = [0u8; 32];
        r.read_exact(&mut hash)?;
        let num_fields = r.read_u32::<LittleEndian>()? as usize;
        let len = r.read_u64::<LittleEndian>()? as usize;
        let mut samples = Samples::new(num_fields);
        let mut splits = Vec::with_capacity(len);
        let mut row = vec![0u32; num_fields];
        for _ in 0..len {
            splits.push(Split::from_tag(r.read_u8()?)?);
            let label = r.read_u8()?;
            for id in row.iter_mut() {
                *id = r.read_u32::<LittleEndian>()?;
            }
            samples.push(&row, label);
        }
        Ok((Self { samples, splits }, CatalogHash(hash)))
    }
}

/// Split sizes for `n` rows: `(train, valid, test)` with train = ⌊0.8n⌋,
/// valid = ⌊0.1n⌋ and test taking the remainder.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = n * 8 / 10;
    let valid = n / 10;
    (train, valid, n - train - valid)
}

/// Seeded 8:1:1 split assignment for `n` rows.
pub fn assign_splits(n: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let (train, valid, _) = split_sizes(n);
    let mut splits = vec![Split::Test; n];
    for (pos, &row) in order.iter().enumerate() {
        splits[row] = if pos < train {
            Split::Train
        } else if pos < train + valid {
            Split::Valid
        } else {
            Split::Test
        };
    }
    splits
}

/// Parses a TSV click log into a catalog and a split dataset.
pub fn ingest<R: BufRead>(reader: R, schema: &Schema, seed: u64, dim: usize) -> Result<(FeatureCatalog, Dataset)> {
    if dim == 0 {
        return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
    }
    let num_fields = schema.len();
    let mut intern: HashMap<(u32, String), u32> = HashMap::new();
    let mut keys: Vec<(u32, String)> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    let mut raw_rows: Vec<u32> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        let lineno = lineno + 1;
        let mut cols = line.split('\t');
        let label = match cols.next() {
            Some("0") => 0u8,
            Some("1") => 1u8,
            other => {
                return Err(Error::Malformed {
                    line: lineno,
                    message: format!("label must be 0 or 1, got {:?}", other.unwrap_or("")),
                })
            }
        };
        let mut seen = 0;
        for (field, tok) in cols.enumerate() {
            if field >= num_fields {
                seen = field + 1;
                continue;
            }
            let key = (field as u32, tok.to_string());
            let slot = match intern.get(&key) {
                Some(&s) => s,
                None => {
                    let s = keys.len() as u32;
                    intern.insert(key.clone(), s);
                    keys.push(key);
                    counts.push(0);
                    s
                }
            };
            counts[slot as usize] += 1;
            raw_rows.push(slot);
            seen = field + 1;
        }
        if seen != num_fields {
            return Err(Error::Malformed {
                line: lineno,
                message: format!("expected {num_fields} tokens, got {seen}"),
            });
        }
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput);
    }

    let splits = assign_splits(labels.len(), seed);

    // Folded key: index into `keys` for kept tokens, or `keys.len() + field`
    // for the field's OOV.
    let oov_base = keys.len();
    let folded_of = |slot: u32| -> usize {
        if counts[slot as usize] <= 1 {
            oov_base + keys[slot as usize].0 as usize
        } else {
            slot as usize
        }
    };
    let mut train_freq = vec![0u64; oov_base + num_fields];
    for (row, split) in raw_rows.chunks_exact(num_fields).zip(&splits) {
        if *split == Split::Train {
            for &slot in row {
                train_freq[folded_of(slot)] += 1;
            }
        }
    }

    let mut folded: Vec<usize> = (0..oov_base).filter(|&s| counts[s] > 1).collect();
    folded.extend(oov_base..oov_base + num_fields);
    let field_of = |f: usize| -> u32 {
        if f >= oov_base {
            (f - oov_base) as u32
        } else {
            keys[f].0
        }
    };
    let token_of = |f: usize| -> Option<&str> {
        if f >= oov_base {
            None
        } else {
            Some(keys[f].1.as_str())
        }
    };
    folded.sort_by(|&a, &b| {
        train_freq[b]
            .cmp(&train_freq[a])
            .then(field_of(a).cmp(&field_of(b)))
            .then(token_of(a).cmp(&token_of(b)))
    });

    let mut id_of = vec![u32::MAX; oov_base + num_fields];
    let mut entries = Vec::with_capacity(folded.len());
    let mut frequencies = Vec::with_capacity(folded.len());
    for (id, &f) in folded.iter().enumerate() {
        id_of[f] = id as u32;
        entries.push(FeatureEntry {
            field: field_of(f),
            token: token_of(f).map(str::to_string),
        });
        frequencies.push(train_freq[f]);
    }

    let mut samples = Samples::new(num_fields);
    samples.ids = raw_rows.iter().map(|&slot| id_of[folded_of(slot)]).collect();
    samples.labels = labels;

    let catalog = FeatureCatalog::from_parts(schema.fields().to_vec(), entries, frequencies, dim)?;
    Ok((catalog, Dataset { samples, splits }))
}

/// Features grouped by descending training frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment {
    group_of: Vec<u32>,
    group_size: usize,
    order: Vec<u32>,
    freq_sums: Vec<f64>,
}

impl GroupAssignment {
    /// Builds an assignment from explicit frequencies; ties are broken by
    /// feature id.
    pub fn from_frequencies(frequencies: &[u64], group_size: usize) -> Result<Self> {
        if frequencies.is_empty() {
            return Err(Error::EmptyInput);
        }
        if group_size == 0 {
            return Err(Error::InvalidArgument("group size must be at least 1".into()));
        }
        let n = frequencies.len();
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.sort_by(|&a, &b| frequencies[b as usize].cmp(&frequencies[a as usize]).then(a.cmp(&b)));
        let num_groups = n.div_ceil(group_size);
        let mut group_of = vec![0u32; n];
        let mut raw_sums = vec![0u64; num_groups];
        for (rank, &id) in order.iter().enumerate() {
            let k = rank / group_size;
            group_of[id as usize] = k as u32;
            raw_sums[k] += frequencies[id as usize];
        }
        let freq_sums = raw_sums.into_iter().map(|s| (s as f64).max(1.0)).collect();
        Ok(Self {
            group_of,
            group_size,
            order,
            freq_sums,
        })
    }

    pub fn num_features(&self) -> usize {
        self.group_of.len()
    }

    pub fn num_groups(&self) -> usize {
        self.freq_sums.len()
    }

    pub fn group_size(&self) -> usize {
        self.group_size
    }

    #[inline]
    pub fn group_of(&self, feature: u32) -> usize {
        self.group_of[feature as usize] as usize
    }

    pub fn groups(&self) -> &[u32] {
        &self.group_of
    }

    /// Frequency sums `s^k`, floored at 1.
    pub fn freq_sums(&self) -> &[f64] {
        &self.freq_sums
    }

    /// Feature ids of group `k`, most frequent first.
    pub fn members(&self, k: usize) -> &[u32] {
        let start = k * self.group_size;
        let end = (start + self.group_size).min(self.order.len());
        &self.order[start..end]
    }

    pub fn group_len(&self, k: usize) -> usize {
        self.members(k).len()
    }
}

/// Sorts the catalog's features by training frequency and cuts them into
/// groups of `group_size`.
pub fn group_by_frequency(catalog: &FeatureCatalog, group_size: usize) -> Result<GroupAssignment> {
    GroupAssignment::from_frequencies(catalog.frequencies(), group_size)
}
