//! Adler-32 as defined by zlib (modulus 65521, initial value 1).

const MOD_ADLER: u32 = 65_521;
// Largest n such that 255n(n+1)/2 + (n+1)(MOD_ADLER-1) fits in u32.
const NMAX: usize = 5552;

pub fn update(adler: u32, data: &[u8]) -> u32 {
    let mut a = adler & 0xffff;
    let mut b = adler >> 16;
    for chunk in data.chunks(NMAX) {
        for &byte in chunk {
            a += byte as u32;
            b += a;
        }
        a %= MOD_ADLER;
        b %= MOD_ADLER;
    }
    (b << 16) | a
}

pub fn checksum(data: &[u8]) -> u32 {
    update(1, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_values() {
        assert_eq!(checksum(b""), 1);
        // zlib.adler32(b"Wikipedia")
        assert_eq!(checksum(b"Wikipedia"), 0x11E6_0398);
    }

    #[test]
    fn long_input_does_not_overflow() {
        let data = vec![0xffu8; 100_000];
        let mut a: u64 = 1;
        let mut b: u64 = 0;
        for &x in &data {
            a = (a + x as u64) % 65_521;
            b = (b + a) % 65_521;
        }
        assert_eq!(checksum(&data), ((b << 16) | a) as u32);
    }
}
