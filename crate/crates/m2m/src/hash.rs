//! FNV-1a 64-bit. Used for content fingerprints (datasets, configs) where a
//! stable, dependency-free hash matters and collision resistance does not.

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xCBF2_9CE4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
