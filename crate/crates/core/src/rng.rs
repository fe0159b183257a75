//! One seed per run, split into independent ChaCha streams by fixed labels.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn label_id(label: &str) -> u64 {
    // FNV-1a
    label.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(label_id(label));
    rng
}
