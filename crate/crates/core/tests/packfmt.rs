use mpe_core::packfmt::{pack, pack_codes, unpack_codes, words_per_feature, PACK_MAGIC};
use mpe_core::quant::quantize_vector;
use mpe_core::{BitWidth, CatalogHash, Error, GroupAssignment, PackedTable, QuantizerParams, SampledPrecision};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn bw(b: u32) -> BitWidth {
    BitWidth::new(b).unwrap()
}

fn all_bits() -> Vec<BitWidth> {
    (0..=6).map(bw).collect()
}

struct Fixture {
    emb: Vec<f64>,
    params: QuantizerParams,
    groups: GroupAssignment,
    sampled: SampledPrecision,
    dim: usize,
}

fn fixture(freqs: &[u64], gs: usize, dim: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = GroupAssignment::from_frequencies(freqs, gs).unwrap();
    let emb = (0..freqs.len() * dim).map(|_| rng.random_range(-0.1..0.1)).collect();
    let mut params = QuantizerParams::init(&all_bits(), dim, 0.05);
    for b in params.offsets_mut() {
        *b = rng.random_range(-0.01..0.01);
    }
    let bits = (0..groups.num_groups()).map(|_| bw(rng.random_range(0..=6))).collect();
    let sampled = SampledPrecision::from_bits(&groups, bits).unwrap();
    Fixture { emb, params, groups, sampled, dim }
}

impl Fixture {
    fn pack(&self) -> PackedTable {
        pack(&self.emb, self.dim, &self.sampled, &self.params, &self.groups).unwrap()
    }
}

#[test]
fn word_counts() {
    assert_eq!(words_per_feature(16, bw(6)), 6);
    assert_eq!(words_per_feature(16, bw(1)), 1);
    assert_eq!(words_per_feature(3, bw(6)), 2);
    assert_eq!(words_per_feature(16, BitWidth::ZERO), 0);
}

#[test]
fn out_of_range_codes_are_rejected() {
    let mut out = [0u16; 1];
    assert!(pack_codes(&[2], bw(2), &mut out).is_err());
    assert!(pack_codes(&[-3], bw(2), &mut out).is_err());
    assert!(pack_codes(&[1, -2], bw(2), &mut out).is_ok());
}

#[test]
fn lookup_equals_quantization_at_sampled_width() {
    let f = fixture(&(0..200).rev().collect::<Vec<_>>(), 16, 5, 1);
    let table = f.pack();
    for id in 0..200u32 {
        let b = f.sampled.bits_of_feature(&f.groups, id);
        let e = &f.emb[id as usize * f.dim..(id as usize + 1) * f.dim];
        let (v, c) = quantize_vector(e, &f.params, b).unwrap();
        assert_eq!(table.lookup(id).unwrap(), v, "feature {id}");
        assert_eq!(table.codes(id).unwrap(), (b, c));
    }
    assert!(matches!(table.lookup(200), Err(Error::OutOfRange { .. })));
}

#[test]
fn non_contiguous_groups_use_slot_map() {
    let freqs: Vec<u64> = (0..97).map(|i| (i * 37 % 97) as u64).collect();
    let f = fixture(&freqs, 8, 3, 2);
    let table = f.pack();
    let back = PackedTable::read_from(&mut table.to_bytes().as_slice()).unwrap();
    assert_eq!(back, table);
    for id in 0..97u32 {
        let b = f.sampled.bits_of_feature(&f.groups, id);
        let e = &f.emb[id as usize * 3..(id as usize + 1) * 3];
        assert_eq!(back.lookup(id).unwrap(), quantize_vector(e, &f.params, b).unwrap().0);
    }
}

#[test]
fn file_round_trip_and_determinism() {
    let f = fixture(&(0..300).rev().collect::<Vec<_>>(), 32, 16, 3);
    let hash = CatalogHash([7; 32]);
    let a = f.pack().with_catalog_hash(hash).with_candidates(&all_bits());
    let b = f.pack().with_catalog_hash(hash).with_candidates(&all_bits());
    let bytes = a.to_bytes();
    assert_eq!(bytes, b.to_bytes());
    assert_eq!(&bytes[..8], PACK_MAGIC);
    assert_eq!(bytes.len() as u64, a.file_size());
    let back = PackedTable::read_from(&mut bytes.as_slice()).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.candidates(), all_bits().as_slice());
    back.verify_catalog(&hash).unwrap();
    assert!(matches!(
        back.verify_catalog(&CatalogHash([8; 32])),
        Err(Error::HashMismatch { .. })
    ));
}

#[test]
fn corrupt_files_are_rejected() {
    let f = fixture(&[5, 4, 3, 2, 1], 2, 4, 4);
    let bytes = f.pack().to_bytes();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(PackedTable::read_from(&mut bad.as_slice()).is_err());
    assert!(PackedTable::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn report_counts_and_ratio() {
    let n = 10_000;
    let dim = 16;
    let groups = GroupAssignment::from_frequencies(&vec![1; n], 128).unwrap();
    let emb = vec![0.01; n * dim];
    let params = QuantizerParams::init(&all_bits(), dim, 0.05);
    let sampled = SampledPrecision::uniform(&groups, bw(6));
    let table = pack(&emb, dim, &sampled, &params, &groups).unwrap();
    let r = table.report();
    assert_eq!(r.avg_bits, 6.0);
    assert_eq!(r.payload_bytes, (n * 6 * 2) as u64);
    assert_eq!(r.fp32_bytes, (n * dim * 4) as u64);
    assert!(r.ratio >= 6.0 / 32.0);
    assert!((r.ratio - 6.0 / 32.0).abs() / (6.0 / 32.0) < 0.1, "{}", r.ratio);
    assert_eq!(r.per_bit_feature_counts.get(&6), Some(&n));
}

#[test]
fn dump_lists_every_group() {
    let f = fixture(&(0..40).rev().collect::<Vec<_>>(), 16, 2, 5);
    let table = f.pack();
    let text = table.dump();
    let lines: Vec<&str> = text.lines().filter(|l| l.starts_with("group ")).collect();
    assert_eq!(lines.len(), 3);
    for (k, line) in lines.iter().enumerate() {
        let rec = table.directory()[k];
        assert!(line.starts_with(&format!("group {k}\tbits {}\toffset {}", rec.bits, rec.offset)), "{line}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn codes_round_trip(b in 1u32..=6, raw in prop::collection::vec(any::<i32>(), 1..40)) {
        let bits = bw(b);
        let span = (bits.max_code() - bits.min_code() + 1) as i64;
        let codes: Vec<i32> = raw
            .iter()
            .map(|&r| (bits.min_code() as i64 + (r as i64).rem_euclid(span)) as i32)
            .collect();
        let mut words = vec![0u16; words_per_feature(codes.len(), bits)];
        pack_codes(&codes, bits, &mut words).unwrap();
        let mut back = vec![0; codes.len()];
        unpack_codes(&words, bits, &mut back);
        prop_assert_eq!(back, codes);
    }

    #[test]
    fn extremes_round_trip(b in 1u32..=6, len in 1usize..40, pattern in any::<u64>()) {
        let bits = bw(b);
        let codes: Vec<i32> = (0..len)
            .map(|i| if pattern >> (i % 64) & 1 == 1 { bits.max_code() } else { bits.min_code() })
            .collect();
        let mut words = vec![0u16; words_per_feature(len, bits)];
        pack_codes(&codes, bits, &mut words).unwrap();
        let mut back = vec![0; len];
        unpack_codes(&words, bits, &mut back);
        prop_assert_eq!(back, codes);
    }

    #[test]
    fn ratio_is_at_least_average_width_fraction(seed in any::<u64>(), n in 1usize..400, gs in 1usize..64) {
        let freqs: Vec<u64> = (0..n as u64).rev().collect();
        let f = fixture(&freqs, gs, 4, seed);
        let r = f.pack().report();
        prop_assert!(r.ratio >= r.avg_bits / 32.0);
        prop_assert!((r.avg_bits - f.sampled.avg_bits).abs() < 1e-9);
    }
}
