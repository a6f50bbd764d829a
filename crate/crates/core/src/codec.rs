//! Tag identity model and the 96-bit tag word layout.
//!
//! A tag word is the big-endian concatenation
//!
//! ```text
//!  95        72 71    64 63                32 31                 0
//! +------------+--------+--------------------+--------------------+
//! | system id  | policy |  service address   |   object serial    |
//! +------------+--------+--------------------+--------------------+
//! ```
//!
//! The service address is a virtual network address: it names the logical
//! service center, so routing can start from the tag word alone.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::par::{self, Execution};

pub const TAG_WORD_BITS: u32 = 96;
pub const TAG_WORD_HEX_DIGITS: usize = 24;
const WORD_MASK: u128 = (1u128 << TAG_WORD_BITS) - 1;

const SYSTEM_SHIFT: u32 = 72;
const POLICY_SHIFT: u32 = 64;
const ADDRESS_SHIFT: u32 = 32;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("malformed tag word: {0}")]
    MalformedWord(String),
    #[error("{field} value {value} does not fit in {bits} bits")]
    FieldOverflow { field: &'static str, value: u64, bits: u32 },
    #[error("malformed virtual network address {0:?}")]
    MalformedAddress(String),
}

/// Service-system identifier (24 bits). Zero is reserved for "unassigned".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SystemId(u32);

impl SystemId {
    pub const BITS: u32 = 24;
    pub const MAX: u32 = (1 << Self::BITS) - 1;
    pub const UNASSIGNED: SystemId = SystemId(0);

    pub fn new(value: u32) -> Result<Self, CodecError> {
        if value > Self::MAX {
            return Err(CodecError::FieldOverflow {
                field: "system_id",
                value: value.into(),
                bits: Self::BITS,
            });
        }
        Ok(SystemId(value))
    }

    pub fn get(self) -> u32 {
        self.0
    }

    pub fn is_assigned(self) -> bool {
        self.0 != 0
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Key into a system's policy table. Zero means "always forward".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PolicyNumber(pub u8);

impl PolicyNumber {
    pub const UNCONDITIONAL: PolicyNumber = PolicyNumber(0);

    pub fn is_unconditional(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for PolicyNumber {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Location-independent address of a logical service center.
///
/// Text form is dotted-quad, e.g. `192.168.1.0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VirtualNetworkAddress(pub u32);

impl VirtualNetworkAddress {
    pub fn octets(self) -> [u8; 4] {
        self.0.to_be_bytes()
    }
}

impl From<Ipv4Addr> for VirtualNetworkAddress {
    fn from(ip: Ipv4Addr) -> Self {
        VirtualNetworkAddress(u32::from(ip))
    }
}

impl From<VirtualNetworkAddress> for Ipv4Addr {
    fn from(addr: VirtualNetworkAddress) -> Self {
        Ipv4Addr::from(addr.0)
    }
}

impl fmt::Display for VirtualNetworkAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Ipv4Addr::from(*self).fmt(f)
    }
}

impl FromStr for VirtualNetworkAddress {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse::<Ipv4Addr>()
            .map(Self::from)
            .map_err(|_| CodecError::MalformedAddress(s.to_string()))
    }
}

impl Serialize for VirtualNetworkAddress {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for VirtualNetworkAddress {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObjectSerial(pub u32);

/// Decoded tag identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TagId {
    pub system_id: SystemId,
    pub policy_number: PolicyNumber,
    pub service_address: VirtualNetworkAddress,
    pub serial: ObjectSerial,
}

impl TagId {
    pub fn encode(&self) -> TagWord {
        encode(self)
    }
}

/// Opaque 96-bit tag word. The upper 32 bits of the backing `u128` are
/// always zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TagWord(u128);

impl TagWord {
    pub const ZERO: TagWord = TagWord(0);

    pub fn from_u128(bits: u128) -> Result<Self, CodecError> {
        if bits & !WORD_MASK != 0 {
            return Err(CodecError::MalformedWord(format!(
                "value {bits:#x} exceeds {TAG_WORD_BITS} bits"
            )));
        }
        Ok(TagWord(bits))
    }

    pub fn as_u128(self) -> u128 {
        self.0
    }

    pub fn to_bytes(self) -> [u8; 12] {
        let full = self.0.to_be_bytes();
        let mut out = [0u8; 12];
        out.copy_from_slice(&full[4..]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() != 12 {
            return Err(CodecError::MalformedWord(format!(
                "expected 12 bytes, got {}",
                bytes.len()
            )));
        }
        let mut full = [0u8; 16];
        full[4..].copy_from_slice(bytes);
        Ok(TagWord(u128::from_be_bytes(full)))
    }

    /// Parses exactly 24 hex digits (either case).
    pub fn parse_hex(text: &str) -> Result<Self, CodecError> {
        if text.len() != TAG_WORD_HEX_DIGITS {
            return Err(CodecError::MalformedWord(format!(
                "expected {TAG_WORD_HEX_DIGITS} hex digits, got {} characters",
                text.len()
            )));
        }
        if !text.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(CodecError::MalformedWord(format!("non-hex character in {text:?}")));
        }
        let bits = u128::from_str_radix(text, 16).map_err(|e| CodecError::MalformedWord(e.to_string()))?;
        TagWord::from_u128(bits)
    }

    /// Canonical lowercase, zero-padded 24-digit form.
    pub fn format_hex(self) -> String {
        format!("{:024x}", self.0)
    }
}

impl fmt::Display for TagWord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:024x}", self.0)
    }
}

impl FromStr for TagWord {
    type Err = CodecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TagWord::parse_hex(s)
    }
}

impl Serialize for TagWord {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TagWord {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        TagWord::parse_hex(&s).map_err(serde::de::Error::custom)
    }
}

pub fn encode(tag: &TagId) -> TagWord {
    let bits = (u128::from(tag.system_id.0) << SYSTEM_SHIFT)
        | (u128::from(tag.policy_number.0) << POLICY_SHIFT)
        | (u128::from(tag.service_address.0) << ADDRESS_SHIFT)
        | u128::from(tag.serial.0);
    TagWord(bits)
}

pub fn decode(word: TagWord) -> TagId {
    let bits = word.0;
    TagId {
        system_id: SystemId((bits >> SYSTEM_SHIFT) as u32 & SystemId::MAX),
        policy_number: PolicyNumber((bits >> POLICY_SHIFT) as u8),
        service_address: extract_service_address(word),
        serial: ObjectSerial(bits as u32),
    }
}

/// Bit-slices the embedded service address without decoding the rest.
pub fn extract_service_address(word: TagWord) -> VirtualNetworkAddress {
    VirtualNetworkAddress((word.0 >> ADDRESS_SHIFT) as u32)
}

pub fn extract_system_id(word: TagWord) -> SystemId {
    SystemId((word.0 >> SYSTEM_SHIFT) as u32 & SystemId::MAX)
}

pub fn encode_all(exec: Execution, tags: &[TagId]) -> Vec<TagWord> {
    par::map(exec, tags, encode)
}

pub fn decode_all(exec: Execution, words: &[TagWord]) -> Vec<TagId> {
    par::map(exec, words, |w| decode(*w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent layout oracle: lay the fields out byte by byte.
    fn oracle_bytes(system: u32, policy: u8, addr: [u8; 4], serial: u32) -> [u8; 12] {
        let s = system.to_be_bytes();
        let n = serial.to_be_bytes();
        [
            s[1], s[2], s[3], policy, addr[0], addr[1], addr[2], addr[3], n[0], n[1], n[2], n[3],
        ]
    }

    fn fig8_tag() -> TagId {
        TagId {
            system_id: SystemId::new(1).unwrap(),
            policy_number: PolicyNumber(2),
            service_address: "192.168.1.0".parse().unwrap(),
            serial: ObjectSerial(42),
        }
    }

    #[test]
    fn zero_tag_is_zero_word() {
        let tag = TagId {
            system_id: SystemId::UNASSIGNED,
            policy_number: PolicyNumber(0),
            service_address: VirtualNetworkAddress(0),
            serial: ObjectSerial(0),
        };
        assert_eq!(encode(&tag), TagWord::ZERO);
        assert_eq!(decode(TagWord::ZERO), tag);
        assert_eq!(TagWord::ZERO.format_hex(), "000000000000000000000000");
        assert_eq!(extract_service_address(TagWord::ZERO).to_string(), "0.0.0.0");
    }

    #[test]
    fn fig8_word_matches_layout_oracle() {
        let word = encode(&fig8_tag());
        assert_eq!(word.to_bytes(), oracle_bytes(1, 2, [192, 168, 1, 0], 42));
        assert_eq!(word.format_hex(), "00000102c0a801000000002a");
        assert_eq!(decode(word), fig8_tag());
        assert_eq!(extract_service_address(word).to_string(), "192.168.1.0");
    }

    #[test]
    fn hex_parse_rejects_bad_input() {
        assert!(matches!(TagWord::parse_hex("xyz"), Err(CodecError::MalformedWord(_))));
        // 23 digits is short of 96 bits
        assert!(matches!(
            TagWord::parse_hex("00000102c0a801000000002"),
            Err(CodecError::MalformedWord(_))
        ));
        assert!(matches!(
            TagWord::parse_hex("00000102c0a801000000002a0"),
            Err(CodecError::MalformedWord(_))
        ));
        assert!(matches!(
            TagWord::parse_hex("+0000102c0a801000000002a"),
            Err(CodecError::MalformedWord(_))
        ));
        assert_eq!(
            TagWord::parse_hex("00000102C0A801000000002A").unwrap(),
            encode(&fig8_tag())
        );
    }

    #[test]
    fn wide_values_are_rejected() {
        assert!(TagWord::from_u128(1u128 << 96).is_err());
        assert!(TagWord::from_bytes(&[0u8; 11]).is_err());
        assert!(SystemId::new(1 << 24).is_err());
        assert!(SystemId::new(SystemId::MAX).is_ok());
    }

    fn arb_tag() -> impl Strategy<Value = TagId> {
        (0..=SystemId::MAX, any::<u8>(), any::<u32>(), any::<u32>()).prop_map(|(s, p, a, n)| TagId {
            system_id: SystemId(s),
            policy_number: PolicyNumber(p),
            service_address: VirtualNetworkAddress(a),
            serial: ObjectSerial(n),
        })
    }

    proptest! {
        #[test]
        fn roundtrip_and_bytes_match_oracle(tag in arb_tag()) {
            let word = encode(&tag);
            prop_assert_eq!(decode(word), tag);
            prop_assert_eq!(extract_service_address(word), tag.service_address);
            prop_assert_eq!(
                word.to_bytes(),
                oracle_bytes(tag.system_id.0, tag.policy_number.0, tag.service_address.octets(), tag.serial.0)
            );
            prop_assert_eq!(TagWord::parse_hex(&word.format_hex()).unwrap(), word);
        }

        #[test]
        fn field_isolation(tag in arb_tag(), field in 0usize..4, flip in 1u32..) {
            let mut other = tag;
            let range = match field {
                0 => { other.system_id = SystemId((tag.system_id.0 ^ flip) & SystemId::MAX); 72..96 }
                1 => { other.policy_number = PolicyNumber(tag.policy_number.0 ^ (flip as u8 | 1)); 64..72 }
                2 => { other.service_address = VirtualNetworkAddress(tag.service_address.0 ^ flip); 32..64 }
                _ => { other.serial = ObjectSerial(tag.serial.0 ^ flip); 0..32 }
            };
            let diff = encode(&tag).as_u128() ^ encode(&other).as_u128();
            let mask: u128 = ((1u128 << (range.end - range.start)) - 1) << range.start;
            prop_assert_eq!(diff & !mask, 0);
        }

        #[test]
        fn bytes_roundtrip(bits in 0u128..(1u128 << 96)) {
            let word = TagWord::from_u128(bits).unwrap();
            prop_assert_eq!(TagWord::from_bytes(&word.to_bytes()).unwrap(), word);
        }
    }
}
