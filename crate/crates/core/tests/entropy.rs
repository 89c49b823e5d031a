use dpcodec::entropy::latent::{
    clamp_to_supports, decode_gaussian, encode_gaussian, gaussian_supports, gaussian_table_bits,
};
use dpcodec::entropy::{
    discretized_gaussian_pmf, estimate_rate_bits, range_decode, range_encode, Bitstream, CdfTable, Header,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_table(rng: &mut ChaCha8Rng) -> CdfTable {
    let width = rng.random_range(1..=40);
    let raw: Vec<f64> = (0..width).map(|_| rng.random::<f64>().powi(3) + 1e-12).collect();
    let total: f64 = raw.iter().sum();
    let pmf: Vec<f64> = raw.iter().map(|p| p / total).collect();
    CdfTable::from_pmf(rng.random_range(-30..30), &pmf, 16).unwrap()
}

fn draw(rng: &mut ChaCha8Rng, t: &CdfTable) -> i32 {
    let u = rng.random_range(0..1u32 << 16);
    let cum = t.cumulative();
    let i = cum.partition_point(|&c| c <= u) - 1;
    t.lo() + i as i32
}

#[test]
fn hundred_thousand_symbol_roundtrip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let tables: Vec<CdfTable> = (0..64).map(|_| random_table(&mut rng)).collect();
    let n = 100_000;
    let refs: Vec<&CdfTable> = (0..n).map(|_| &tables[rng.random_range(0..tables.len())]).collect();
    let symbols: Vec<i32> = refs.iter().map(|t| draw(&mut rng, t)).collect();
    let bytes = range_encode(&symbols, &refs).unwrap();
    assert_eq!(range_decode(&bytes, &refs).unwrap(), symbols);
    let ideal: f64 = symbols.iter().zip(&refs).map(|(&s, t)| t.bits(s).unwrap()).sum();
    assert!(8.0 * bytes.len() as f64 <= ideal + 32.0);
}

#[test]
fn uniform_bytes_cost_one_byte_each() {
    let t = CdfTable::from_pmf(0, &[1.0 / 256.0; 256], 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let symbols: Vec<i32> = (0..10_000).map(|_| rng.random_range(0..256)).collect();
    let refs = vec![&t; symbols.len()];
    let bytes = range_encode(&symbols, &refs).unwrap();
    assert!((10_000..=10_016).contains(&bytes.len()), "{}", bytes.len());
    assert_eq!(range_decode(&bytes, &refs).unwrap(), symbols);
}

#[test]
fn estimated_rate_tracks_realized_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (channels, per) = (16, 16 * 16);
    let n = channels * per;
    let mu: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.3..4.0)).collect();
    let y: Vec<f64> = mu
        .iter()
        .zip(&sigma)
        .map(|(&m, &s)| Normal::new(m, s).unwrap().sample(&mut rng).round())
        .collect();
    let supports = gaussian_supports(&mu, &sigma, channels).unwrap();
    let symbols = clamp_to_supports(&y, &supports);
    let bytes = encode_gaussian(&symbols, &mu, &sigma, channels).unwrap();
    assert_eq!(decode_gaussian(&bytes, &mu, &sigma, channels).unwrap(), symbols);
    let estimate = estimate_rate_bits(&y, &mu, &sigma).unwrap();
    let realized = 8.0 * bytes.len() as f64;
    assert!(((estimate - realized) / realized).abs() < 0.02, "{estimate} vs {realized}");
    let table_bits = gaussian_table_bits(&symbols, &mu, &sigma, channels).unwrap();
    assert!(realized <= table_bits + 32.0);
}

#[test]
fn pmf_reference_value() {
    let p = discretized_gaussian_pmf(0.0, 1.0, 0).unwrap();
    assert!((p - 0.382925).abs() < 1e-5);
}

fn header() -> impl Strategy<Value = Header> {
    (any::<u8>(), 1u16.., 1u16.., any::<u8>(), any::<u16>(), any::<u16>()).prop_map(|(qp, w, h, c, l, z)| Header {
        qp,
        width: w,
        height: h,
        image_channels: c,
        latent_channels: l,
        hyper_channels: z,
    })
}

proptest! {
    #[test]
    fn tables_keep_every_symbol_codable(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = random_table(&mut rng);
        let cum = t.cumulative();
        prop_assert_eq!(cum[0], 0);
        prop_assert_eq!(*cum.last().unwrap(), 1 << 16);
        prop_assert!(cum.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn coder_roundtrips_within_entropy_bound(seed in any::<u64>(), n in 0usize..3000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tables: Vec<CdfTable> = (0..8).map(|_| random_table(&mut rng)).collect();
        let refs: Vec<&CdfTable> = (0..n).map(|_| &tables[rng.random_range(0..8)]).collect();
        let symbols: Vec<i32> = refs.iter().map(|t| draw(&mut rng, t)).collect();
        let bytes = range_encode(&symbols, &refs).unwrap();
        prop_assert_eq!(range_decode(&bytes, &refs).unwrap(), symbols.clone());
        let ideal: f64 = symbols.iter().zip(&refs).map(|(&s, t)| t.bits(s).unwrap()).sum();
        prop_assert!(8.0 * bytes.len() as f64 <= ideal + 32.0);
    }

    #[test]
    fn bitstream_roundtrip(h in header(), hyper in prop::collection::vec(any::<u8>(), 0..64),
                           main in prop::collection::vec(any::<u8>(), 0..256)) {
        let b = Bitstream { header: h, hyper, main };
        let bytes = b.to_bytes().unwrap();
        prop_assert_eq!(Bitstream::parse(&bytes).unwrap(), b);
        if !bytes.is_empty() {
            prop_assert!(Bitstream::parse(&bytes[..bytes.len() - 1]).is_err());
        }
    }
}
