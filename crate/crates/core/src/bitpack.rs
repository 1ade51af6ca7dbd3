//! Little-endian bit packing for 2-, 4- and 8-bit codes.
//!
//! Element `j` occupies bits `[j*bits % 8, j*bits % 8 + bits)` of byte
//! `j*bits / 8`. Widths divide 8, so no code straddles a byte boundary.

#[inline]
pub fn packed_len(dim: usize, bits: u32) -> usize {
    (dim * bits as usize).div_ceil(8)
}

#[inline]
fn check_bits(bits: u32) {
    assert!(matches!(bits, 1 | 2 | 4 | 8), "unsupported code width {bits}");
}

pub fn pack(codes: &[u8], bits: u32) -> Vec<u8> {
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    pack_into(codes, bits, &mut out);
    out
}

/// Packs `codes` into `out`, which must be zeroed and `packed_len` long.
pub fn pack_into(codes: &[u8], bits: u32, out: &mut [u8]) {
    check_bits(bits);
    debug_assert_eq!(out.len(), packed_len(codes.len(), bits));
    if bits == 8 {
        out.copy_from_slice(codes);
        return;
    }
    let mask = (1u8 << bits) - 1;
    for (j, &c) in codes.iter().enumerate() {
        debug_assert!(c <= mask);
        let off = j * bits as usize;
        out[off / 8] |= (c & mask) << (off % 8);
    }
}

#[inline]
pub fn get(payload: &[u8], bits: u32, j: usize) -> u8 {
    if bits == 8 {
        return payload[j];
    }
    let off = j * bits as usize;
    (payload[off / 8] >> (off % 8)) & ((1u8 << bits) - 1)
}

pub fn unpack_into(payload: &[u8], bits: u32, out: &mut [u8]) {
    check_bits(bits);
    if bits == 8 {
        out.copy_from_slice(&payload[..out.len()]);
        return;
    }
    for (j, c) in out.iter_mut().enumerate() {
        *c = get(payload, bits, j);
    }
}

pub fn unpack(payload: &[u8], bits: u32, dim: usize) -> Vec<u8> {
    let mut out = vec![0u8; dim];
    unpack_into(payload, bits, &mut out);
    out
}
