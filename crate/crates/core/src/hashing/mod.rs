//! Block hash algorithms and the avalanche collision harness used to qualify
//! them for dirty-block detection.

pub mod adler32;
mod collision;
pub mod crc32;
pub mod fletcher;
pub mod md5;

use std::fmt;
use std::str::FromStr;

pub use collision::{
    avalanche_collision_test, CollisionConfig, CollisionError, CollisionReport, CollisionRow,
    ModificationMode, DEFAULT_PATTERNS, PATTERN_ARBITRARY,
};

/// Widest digest any supported algorithm produces.
pub const MAX_DIGEST_LEN: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum HashAlgorithm {
    Adler32,
    Fletcher32Mod65536,
    Fletcher32Mod65535,
    Crc32,
    Md5,
}

impl HashAlgorithm {
    pub const ALL: [HashAlgorithm; 5] = [
        HashAlgorithm::Adler32,
        HashAlgorithm::Fletcher32Mod65536,
        HashAlgorithm::Fletcher32Mod65535,
        HashAlgorithm::Crc32,
        HashAlgorithm::Md5,
    ];

    pub const fn digest_len(self) -> usize {
        match self {
            HashAlgorithm::Md5 => 16,
            _ => 4,
        }
    }

    /// Tag byte stored in checkpoint file headers.
    pub const fn tag(self) -> u8 {
        match self {
            HashAlgorithm::Adler32 => 1,
            HashAlgorithm::Fletcher32Mod65536 => 2,
            HashAlgorithm::Fletcher32Mod65535 => 3,
            HashAlgorithm::Crc32 => 4,
            HashAlgorithm::Md5 => 5,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.tag() == tag)
    }

    pub const fn name(self) -> &'static str {
        match self {
            HashAlgorithm::Adler32 => "adler32",
            HashAlgorithm::Fletcher32Mod65536 => "fletcher32-65536",
            HashAlgorithm::Fletcher32Mod65535 => "fletcher32-65535",
            HashAlgorithm::Crc32 => "crc32",
            HashAlgorithm::Md5 => "md5",
        }
    }
}

impl fmt::Display for HashAlgorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown hash algorithm `{0}` (expected adler32, fletcher32-65536, fletcher32-65535, crc32 or md5)")]
pub struct UnknownAlgorithm(pub String);

impl FromStr for HashAlgorithm {
    type Err = UnknownAlgorithm;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        let alg = match lower.as_str() {
            "adler32" | "adler" => HashAlgorithm::Adler32,
            "fletcher32-65536" | "fletcher32" | "fletcher" => HashAlgorithm::Fletcher32Mod65536,
            "fletcher32-65535" => HashAlgorithm::Fletcher32Mod65535,
            "crc32" | "crc" => HashAlgorithm::Crc32,
            "md5" => HashAlgorithm::Md5,
            _ => return Err(UnknownAlgorithm(s.to_string())),
        };
        Ok(alg)
    }
}

/// A hash value tagged with the algorithm that produced it.
///
/// 32-bit checksums are stored big-endian in the first four bytes so that the
/// hex rendering matches the conventional integer notation. Digests of
/// different algorithms never compare equal.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Digest {
    algorithm: HashAlgorithm,
    bytes: [u8; MAX_DIGEST_LEN],
}

impl Digest {
    fn from_u32(algorithm: HashAlgorithm, value: u32) -> Self {
        let mut bytes = [0u8; MAX_DIGEST_LEN];
        bytes[..4].copy_from_slice(&value.to_be_bytes());
        Digest { algorithm, bytes }
    }

    /// Rebuilds a digest from its serialized form. `bytes` must hold at least
    /// `algorithm.digest_len()` bytes; anything beyond that is ignored.
    pub fn from_bytes(algorithm: HashAlgorithm, bytes: &[u8]) -> Option<Self> {
        let len = algorithm.digest_len();
        if bytes.len() < len {
            return None;
        }
        let mut out = [0u8; MAX_DIGEST_LEN];
        out[..len].copy_from_slice(&bytes[..len]);
        Some(Digest { algorithm, bytes: out })
    }

    pub fn algorithm(&self) -> HashAlgorithm {
        self.algorithm
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bytes[..self.algorithm.digest_len()]
    }

    /// Serialized form zero-padded to 16 bytes.
    pub fn padded(&self) -> [u8; MAX_DIGEST_LEN] {
        self.bytes
    }

    /// The value of a 32-bit digest; `None` for MD5.
    pub fn as_u32(&self) -> Option<u32> {
        (self.algorithm.digest_len() == 4)
            .then(|| u32::from_be_bytes([self.bytes[0], self.bytes[1], self.bytes[2], self.bytes[3]]))
    }

    pub fn to_hex(&self) -> String {
        self.as_bytes().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.algorithm, self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Hashes one block. Any length, including zero, is accepted.
pub fn hash_block(algorithm: HashAlgorithm, data: &[u8]) -> Digest {
    match algorithm {
        HashAlgorithm::Adler32 => Digest::from_u32(algorithm, adler32::checksum(data)),
        HashAlgorithm::Fletcher32Mod65536 => {
            Digest::from_u32(algorithm, fletcher::checksum_mod65536(data))
        }
        HashAlgorithm::Fletcher32Mod65535 => {
            Digest::from_u32(algorithm, fletcher::checksum_mod65535(data))
        }
        HashAlgorithm::Crc32 => Digest::from_u32(algorithm, crc32::checksum(data)),
        HashAlgorithm::Md5 => Digest {
            algorithm,
            bytes: md5::digest(data),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_widths() {
        for alg in HashAlgorithm::ALL {
            let d = hash_block(alg, b"some block");
            assert_eq!(d.as_bytes().len(), alg.digest_len());
            assert_eq!(d.algorithm(), alg);
        }
        assert_eq!(HashAlgorithm::Md5.digest_len(), 16);
        assert_eq!(HashAlgorithm::Crc32.digest_len(), 4);
    }

    #[test]
    fn empty_input_vectors() {
        assert_eq!(hash_block(HashAlgorithm::Crc32, b"").as_u32(), Some(0));
        assert_eq!(hash_block(HashAlgorithm::Md5, b"").to_hex(), "d41d8cd98f00b204e9800998ecf8427e");
        assert_eq!(hash_block(HashAlgorithm::Adler32, b"").as_u32(), Some(1));
    }

    #[test]
    fn cross_algorithm_digests_differ() {
        // Fletcher sums of an empty buffer are 0 for both moduli, the values
        // match but the tags do not.
        let a = hash_block(HashAlgorithm::Fletcher32Mod65536, b"");
        let b = hash_block(HashAlgorithm::Fletcher32Mod65535, b"");
        assert_eq!(a.as_bytes(), b.as_bytes());
        assert_ne!(a, b);
    }

    #[test]
    fn tag_and_name_round_trip() {
        for alg in HashAlgorithm::ALL {
            assert_eq!(HashAlgorithm::from_tag(alg.tag()), Some(alg));
            assert_eq!(alg.name().parse::<HashAlgorithm>().unwrap(), alg);
        }
        assert!(HashAlgorithm::from_tag(0).is_none());
        assert!("sha1".parse::<HashAlgorithm>().is_err());
    }

    #[test]
    fn digest_from_bytes_round_trip() {
        for alg in HashAlgorithm::ALL {
            let d = hash_block(alg, b"payload");
            assert_eq!(Digest::from_bytes(alg, &d.padded()), Some(d));
        }
        assert!(Digest::from_bytes(HashAlgorithm::Md5, &[0u8; 4]).is_none());
    }
}
