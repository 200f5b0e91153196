//! Deterministic seed fan-out.
//!
//! Every randomized stage draws from its own named stream derived from the
//! master seed, the stage name, and any stable ids (graph id, shot count,
//! iteration). Streams are independent of corpus ordering, so adding or
//! removing graphs never perturbs the shots of the remaining ones.

/// splitmix64 finalizer; good avalanche, stable across platforms.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Seed for the RNG stream `(stage, ids)` under `master`.
pub fn stream_seed(master: u64, stage: &str, ids: &[u64]) -> u64 {
    let mut h = splitmix64(fnv1a(stage.as_bytes()) ^ master);
    for &id in ids {
        h = splitmix64(h ^ id);
    }
    h
}
