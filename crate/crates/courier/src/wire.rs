//! Wire format shared by the runtime, the routing agent, and both transports.
//!
//! Every message is framed as an 8-byte header followed by the payload:
//!
//! ```text
//! [0..4] payload_size: u32 LE
//! [4..8] dst_rank:     u32 LE
//! [8..]  payload bytes
//! ```
//!
//! Records are packed densely into a [`Bundle`] with no padding or gaps; the
//! same layout is used on the intra-node (rank <-> agent) and inter-node
//! (agent <-> agent) paths.

use crate::topology::Rank;

/// Serialized header size in bytes.
pub const HEADER_SIZE: usize = 8;

/// Destination sentinel marking a control record instead of application data.
pub const CONTROL_DST: u32 = 0xFFFF_FFFF;

/// Control opcodes carried in the first payload byte of a control record.
pub mod ctl {
    /// Local rank reports it is drained; payload carries its counters.
    pub const LOCAL_DONE: u8 = 0x01;
    /// Coordinator probes agents for their counter vectors.
    pub const QUIESCENCE_PROBE: u8 = 0x02;
    /// Agent answers a probe; also confirms quiescence toward local ranks.
    pub const QUIESCENCE_ACK: u8 = 0x03;
}

/// Framing faults raised while parsing bundle contents.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireError {
    /// A header slice was not exactly [`HEADER_SIZE`] bytes.
    BadHeaderLength { got: usize },
    /// A record's declared payload overruns the bundle tail.
    CorruptBundle { offset: usize, declared: usize, tail: usize },
}

impl std::fmt::Display for WireError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            WireError::BadHeaderLength { got } => {
                write!(f, "header must be {HEADER_SIZE} bytes, got {got}")
            }
            WireError::CorruptBundle { offset, declared, tail } => write!(
                f,
                "record at offset {offset} declares {declared} payload bytes beyond tail {tail}"
            ),
        }
    }
}

impl std::error::Error for WireError {}

/// Encode a message header as 8 little-endian bytes.
pub fn encode_header(payload_size: u32, dst_rank: u32) -> [u8; HEADER_SIZE] {
    let mut buf = [0u8; HEADER_SIZE];
    buf[0..4].copy_from_slice(&payload_size.to_le_bytes());
    buf[4..8].copy_from_slice(&dst_rank.to_le_bytes());
    buf
}

/// Decode an 8-byte header into `(payload_size, dst_rank)`.
pub fn decode_header(bytes: &[u8]) -> Result<(u32, u32), WireError> {
    if bytes.len() != HEADER_SIZE {
        return Err(WireError::BadHeaderLength { got: bytes.len() });
    }
    let payload_size = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    let dst_rank = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    Ok((payload_size, dst_rank))
}

/// A fixed-capacity byte buffer of concatenated header-prefixed messages.
///
/// The bytes in `[0, tail)` always parse as a dense sequence of records. A
/// bundle is owned by exactly one thread at a time; transports take ownership
/// while a send or receive is in flight and hand it back via a completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Bundle {
    data: Vec<u8>,
    tail: usize,
}

impl Bundle {
    /// Allocate an empty bundle with the given capacity.
    pub fn with_capacity(capacity: usize) -> Self {
        Bundle { data: vec![0u8; capacity], tail: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.data.len()
    }

    pub fn tail(&self) -> usize {
        self.tail
    }

    pub fn is_empty(&self) -> bool {
        self.tail == 0
    }

    pub fn free(&self) -> usize {
        self.capacity() - self.tail
    }

    /// Bytes of the filled region.
    pub fn bytes(&self) -> &[u8] {
        &self.data[..self.tail]
    }

    /// Reset to empty, keeping the allocation.
    pub fn clear(&mut self) {
        self.tail = 0;
    }

    /// Append one `(dst, payload)` record.
    ///
    /// Returns `false` without modifying the bundle when the record does not
    /// fit; this is the in-band buffer-full signal consumed by the routing
    /// kernel. Zero-length payloads are legal.
    pub fn append(&mut self, dst: Rank, payload: &[u8]) -> bool {
        let total = HEADER_SIZE + payload.len();
        if total > self.free() {
            return false;
        }
        let header = encode_header(payload.len() as u32, dst);
        self.data[self.tail..self.tail + HEADER_SIZE].copy_from_slice(&header);
        self.data[self.tail + HEADER_SIZE..self.tail + total].copy_from_slice(payload);
        self.tail += total;
        true
    }

    /// Append a record given an already-encoded header and payload slice.
    /// Used by the routing kernel to forward records without re-encoding.
    pub fn append_raw(&mut self, header: &[u8; HEADER_SIZE], payload: &[u8]) -> bool {
        let total = HEADER_SIZE + payload.len();
        if total > self.free() {
            return false;
        }
        self.data[self.tail..self.tail + HEADER_SIZE].copy_from_slice(header);
        self.data[self.tail + HEADER_SIZE..self.tail + total].copy_from_slice(payload);
        self.tail += total;
        true
    }

    /// Overwrite the filled region from raw bytes (transport receive path).
    /// `len` must not exceed capacity.
    pub fn fill_from(&mut self, src: &[u8]) {
        assert!(src.len() <= self.capacity(), "frame exceeds buffer capacity");
        self.data[..src.len()].copy_from_slice(src);
        self.tail = src.len();
    }

    /// Iterate records as `(dst, payload)` slices in append order.
    pub fn records(&self) -> Records<'_> {
        Records { bytes: self.bytes(), offset: 0 }
    }
}

/// Zero-copy record iterator over a bundle's filled region.
///
/// Yields `Err` once (and then stops) if a record's declared size overruns the
/// tail; well-formed bundles yield exactly the appended sequence.
pub struct Records<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Iterator for Records<'a> {
    type Item = Result<(Rank, &'a [u8]), WireError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.offset >= self.bytes.len() {
            return None;
        }
        let remaining = self.bytes.len() - self.offset;
        if remaining < HEADER_SIZE {
            let err = WireError::CorruptBundle {
                offset: self.offset,
                declared: 0,
                tail: self.bytes.len(),
            };
            self.offset = self.bytes.len();
            return Some(Err(err));
        }
        let start = self.offset;
        let (size, dst) =
            decode_header(&self.bytes[start..start + HEADER_SIZE]).expect("fixed 8-byte slice");
        let size = size as usize;
        if remaining - HEADER_SIZE < size {
            let err = WireError::CorruptBundle {
                offset: start,
                declared: size,
                tail: self.bytes.len(),
            };
            self.offset = self.bytes.len();
            return Some(Err(err));
        }
        self.offset = start + HEADER_SIZE + size;
        Some(Ok((dst, &self.bytes[start + HEADER_SIZE..self.offset])))
    }
}

/// True when every record of the filled region parses cleanly.
pub fn bundle_is_well_formed(b: &Bundle) -> bool {
    b.records().all(|r| r.is_ok())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_zero_header() {
        assert_eq!(encode_header(0, 0), [0u8; 8]);
    }

    #[test]
    fn encode_small_header() {
        assert_eq!(encode_header(8, 3), [0x08, 0, 0, 0, 0x03, 0, 0, 0]);
    }

    #[test]
    fn encode_page_header() {
        // 4096 = 0x1000, 17 = 0x11, little-endian.
        assert_eq!(encode_header(4096, 17), [0x00, 0x10, 0, 0, 0x11, 0, 0, 0]);
    }

    #[test]
    fn decode_zero_header() {
        assert_eq!(decode_header(&[0u8; 8]).unwrap(), (0, 0));
    }

    #[test]
    fn decode_roundtrips_encode() {
        assert_eq!(decode_header(&[0x08, 0, 0, 0, 0x03, 0, 0, 0]).unwrap(), (8, 3));
    }

    #[test]
    fn decode_max_payload_size() {
        assert_eq!(
            decode_header(&[0xFF, 0xFF, 0xFF, 0xFF, 0, 0, 0, 0]).unwrap(),
            (4294967295, 0)
        );
    }

    #[test]
    fn decode_rejects_short_input() {
        assert!(matches!(
            decode_header(&[0u8; 7]),
            Err(WireError::BadHeaderLength { got: 7 })
        ));
    }

    #[test]
    fn append_advances_tail_by_header_plus_payload() {
        let mut b = Bundle::with_capacity(4096);
        assert!(b.append(1, &[0u8; 8]));
        assert_eq!(b.tail(), 16);
    }

    #[test]
    fn append_rejects_when_nine_bytes_needed_but_six_free() {
        let mut b = Bundle::with_capacity(4096);
        // Fill to tail = 4090: 255 records of (8 + 8) = 4080, then one of (8 + 2).
        for _ in 0..255 {
            assert!(b.append(0, &[0u8; 8]));
        }
        assert!(b.append(0, &[0u8; 2]));
        assert_eq!(b.tail(), 4090);
        assert!(!b.append(0, &[0u8; 1]));
        assert_eq!(b.tail(), 4090);
    }

    #[test]
    fn append_exact_fit() {
        let mut b = Bundle::with_capacity(16);
        assert!(b.append(0, &[0u8; 8]));
        assert_eq!(b.tail(), 16);
        assert_eq!(b.free(), 0);
    }

    #[test]
    fn zero_length_payloads_are_legal() {
        let mut b = Bundle::with_capacity(64);
        assert!(b.append(7, &[]));
        assert_eq!(b.tail(), 8);
        let recs: Vec<_> = b.records().map(|r| r.unwrap()).collect();
        assert_eq!(recs, vec![(7u32, &[][..])]);
    }

    #[test]
    fn empty_bundle_iterates_nothing() {
        let b = Bundle::with_capacity(128);
        assert_eq!(b.records().count(), 0);
    }

    #[test]
    fn records_preserve_append_order() {
        let mut b = Bundle::with_capacity(128);
        assert!(b.append(1, b"abcd"));
        assert!(b.append(2, b"efgh"));
        let recs: Vec<_> = b.records().map(|r| r.unwrap()).collect();
        assert_eq!(recs, vec![(1u32, &b"abcd"[..]), (2u32, &b"efgh"[..])]);
    }

    #[test]
    fn oversized_declared_record_is_a_corrupt_bundle() {
        let mut b = Bundle::with_capacity(64);
        let mut header = encode_header(100, 0);
        // Hand-build a malformed region: header claims 100 bytes, only 12 follow.
        let mut raw = Vec::new();
        raw.extend_from_slice(&header);
        raw.extend_from_slice(&[0u8; 12]);
        b.fill_from(&raw);
        let mut it = b.records();
        assert!(matches!(
            it.next(),
            Some(Err(WireError::CorruptBundle { offset: 0, declared: 100, tail: 20 }))
        ));
        assert!(it.next().is_none());
        // A truncated header is also corrupt.
        header[0] = 1;
        b.fill_from(&header[..5]);
        assert!(matches!(b.records().next(), Some(Err(WireError::CorruptBundle { .. }))));
    }

    #[test]
    fn control_sentinel_is_distinct_from_any_rank() {
        let mut b = Bundle::with_capacity(64);
        assert!(b.append(CONTROL_DST, &[ctl::LOCAL_DONE]));
        let (dst, payload) = b.records().next().unwrap().unwrap();
        assert_eq!(dst, CONTROL_DST);
        assert_eq!(payload, &[ctl::LOCAL_DONE]);
    }

    proptest! {
        // Roundtrip: any fitting sequence of records is reproduced exactly, and
        // the tail is the dense sum of record sizes.
        #[test]
        fn bundle_roundtrip(msgs in prop::collection::vec(
            (0u32..64, prop::collection::vec(any::<u8>(), 0..1024)), 0..32)
        ) {
            let mut b = Bundle::with_capacity(64 * 1024);
            let mut expected = Vec::new();
            let mut dense = 0usize;
            for (dst, payload) in &msgs {
                prop_assert!(b.append(*dst, payload));
                expected.push((*dst, payload.clone()));
                dense += HEADER_SIZE + payload.len();
            }
            prop_assert_eq!(b.tail(), dense);
            let got: Vec<_> = b.records()
                .map(|r| r.unwrap())
                .map(|(d, p)| (d, p.to_vec()))
                .collect();
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn header_codec_inverse(size in any::<u32>(), dst in any::<u32>()) {
            let enc = encode_header(size, dst);
            prop_assert_eq!(decode_header(&enc).unwrap(), (size, dst));
        }
    }
}
