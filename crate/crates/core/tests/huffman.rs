use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semalign::huffman::{huffman_encoded_bits, huffman_encoded_len};

fn reference_len(s: &[u8]) -> u64 {
    let mut out = Vec::new();
    httlib_huffman::encode(s, &mut out).expect("encodable");
    out.len() as u64
}

#[test]
fn matches_reference_encoder_on_random_ascii() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4855_4646);
    for _ in 0..1000 {
        let n = rng.random_range(0..96);
        let s: Vec<u8> = (0..n).map(|_| rng.random_range(0u8..128)).collect();
        assert_eq!(huffman_encoded_len(&s), reference_len(&s), "{s:?}");
    }
}

#[test]
fn matches_reference_encoder_on_every_byte() {
    for b in 0..=255u8 {
        for reps in [1usize, 2, 7] {
            let s = vec![b; reps];
            assert_eq!(
                huffman_encoded_len(&s),
                reference_len(&s),
                "byte {b} x{reps}"
            );
        }
    }
}

#[test]
fn typical_paths() {
    for uri in [
        "/",
        "/index.html",
        "/static/js/app.3f9a1c.js",
        "/api/v1/items?page=2&sort=desc",
    ] {
        assert_eq!(
            huffman_encoded_len(uri.as_bytes()),
            reference_len(uri.as_bytes())
        );
        assert!(huffman_encoded_len(uri.as_bytes()) <= uri.len() as u64);
    }
}

#[test]
fn bits_are_additive() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let a: Vec<u8> = (0..rng.random_range(0..20)).map(|_| rng.random()).collect();
        let b: Vec<u8> = (0..rng.random_range(0..20)).map(|_| rng.random()).collect();
        let ab: Vec<u8> = a.iter().chain(&b).copied().collect();
        assert_eq!(
            huffman_encoded_bits(&ab),
            huffman_encoded_bits(&a) + huffman_encoded_bits(&b)
        );
    }
}
