//! Fletcher-32 over little-endian 16-bit words, with either modulus.
//!
//! Both running sums start at zero. An odd trailing byte is treated as a word
//! whose high byte is zero. The result packs the second sum into the upper
//! half: `(sum2 << 16) | sum1`.

/// Modulus 2^16: plain wrapping arithmetic.
pub fn checksum_mod65536(data: &[u8]) -> u32 {
    let mut sum1: u16 = 0;
    let mut sum2: u16 = 0;
    let mut words = data.chunks_exact(2);
    for w in &mut words {
        sum1 = sum1.wrapping_add(u16::from_le_bytes([w[0], w[1]]));
        sum2 = sum2.wrapping_add(sum1);
    }
    if let [last] = words.remainder() {
        sum1 = sum1.wrapping_add(*last as u16);
        sum2 = sum2.wrapping_add(sum1);
    }
    ((sum2 as u32) << 16) | sum1 as u32
}

/// Modulus 2^16 - 1 (ones' complement). Words 0x0000 and 0xFFFF are
/// congruent, which is the weakness this variant is known for.
pub fn checksum_mod65535(data: &[u8]) -> u32 {
    const M: u64 = 65_535;
    // Reduction interval keeps sum2 well inside u64.
    const BATCH: usize = 1 << 16;
    let mut sum1: u64 = 0;
    let mut sum2: u64 = 0;
    let mut words = data.chunks_exact(2);
    let mut pending = 0usize;
    for w in &mut words {
        sum1 += u16::from_le_bytes([w[0], w[1]]) as u64;
        sum2 += sum1;
        pending += 1;
        if pending == BATCH {
            sum1 %= M;
            sum2 %= M;
            pending = 0;
        }
    }
    if let [last] = words.remainder() {
        sum1 += *last as u64;
        sum2 += sum1;
    }
    sum1 %= M;
    sum2 %= M;
    ((sum2 as u32) << 16) | sum1 as u32
}
