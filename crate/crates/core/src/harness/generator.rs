//! Deterministic element values. Every element encodes the iteration and
//! its global index followed by a pseudo-random tail, so any byte can be
//! recomputed independently and a restored buffer reveals which iteration
//! it came from.

use crate::layout::Layout;
use crate::model::Rank;

/// Smallest element that holds the iteration and the global index.
pub const MIN_ELEM_SIZE: u32 = 8;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Writes the value of element `global` at `iteration` into `out`.
pub fn element(seed: u64, iteration: u32, global: u64, out: &mut [u8]) {
    let head = [iteration.to_le_bytes(), (global as u32).to_le_bytes()].concat();
    let n = out.len().min(head.len());
    out[..n].copy_from_slice(&head[..n]);
    if out.len() <= head.len() {
        return;
    }
    let mut state = seed ^ (u64::from(iteration) << 32 | (global & 0xFFFF_FFFF)).rotate_left(17);
    for chunk in out[head.len()..].chunks_mut(8) {
        let v = splitmix64(&mut state).to_le_bytes();
        chunk.copy_from_slice(&v[..chunk.len()]);
    }
}

/// Bytes rank `rank` owns under `layout` at `iteration`.
pub fn fill(seed: u64, iteration: u32, layout: &Layout, rank: Rank, elem_size: u32, out: &mut Vec<u8>) {
    let count = layout.owned_count(rank).unwrap_or(0);
    let e = elem_size as usize;
    out.clear();
    out.resize(count as usize * e, 0);
    for (local, slot) in out.chunks_mut(e).enumerate() {
        element(seed, iteration, layout.global_index(rank, local as u64), slot);
    }
}

pub fn expected(seed: u64, iteration: u32, layout: &Layout, rank: Rank, elem_size: u32) -> Vec<u8> {
    let mut v = Vec::new();
    fill(seed, iteration, layout, rank, elem_size, &mut v);
    v
}

/// Iteration a restored buffer holds, if every element carries the same one.
pub fn uniform_iteration(buf: &[u8], elem_size: u32) -> Option<u32> {
    let mut it = None;
    for e in buf.chunks(elem_size as usize) {
        let v = u32::from_le_bytes(e.get(..4)?.try_into().ok()?);
        match it {
            None => it = Some(v),
            Some(x) if x != v => return None,
            Some(_) => {}
        }
    }
    it
}

/// Byte offset of the first difference, if any.
pub fn first_divergence(got: &[u8], want: &[u8]) -> Option<usize> {
    if let Some(i) = got.iter().zip(want).position(|(a, b)| a != b) {
        return Some(i);
    }
    (got.len() != want.len()).then(|| got.len().min(want.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DistributionScheme;

    #[test]
    fn element_encodes_iteration_and_index() {
        let mut e = [0u8; 16];
        element(7, 42, 1000, &mut e);
        assert_eq!(u32::from_le_bytes(e[..4].try_into().unwrap()), 42);
        assert_eq!(u32::from_le_bytes(e[4..8].try_into().unwrap()), 1000);
        let mut again = [0u8; 16];
        element(7, 42, 1000, &mut again);
        assert_eq!(e, again);
        let mut other = [0u8; 16];
        element(8, 42, 1000, &mut other);
        assert_ne!(e[8..], other[8..]);
    }

    #[test]
    fn rank_slices_reassemble_global_array() {
        let n = 37;
        let whole = expected(3, 5, &Layout::block(n, 1), 0, 12);
        for scheme in [DistributionScheme::Block, DistributionScheme::Cyclic] {
            let l = Layout::new(n, 4, scheme);
            let mut global = vec![0u8; whole.len()];
            for r in 0..4 {
                let part = expected(3, 5, &l, r, 12);
                for (local, e) in part.chunks(12).enumerate() {
                    let g = l.global_index(r, local as u64) as usize;
                    global[g * 12..(g + 1) * 12].copy_from_slice(e);
                }
            }
            assert_eq!(global, whole);
        }
    }

    #[test]
    fn uniform_iteration_detects_mixtures() {
        let l = Layout::block(10, 1);
        let mut a = expected(1, 3, &l, 0, 8);
        assert_eq!(uniform_iteration(&a, 8), Some(3));
        let b = expected(1, 4, &l, 0, 8);
        a[8..16].copy_from_slice(&b[8..16]);
        assert_eq!(uniform_iteration(&a, 8), None);
        assert_eq!(uniform_iteration(&[], 8), None);
    }

    #[test]
    fn divergence_offsets() {
        assert_eq!(first_divergence(&[1, 2, 3], &[1, 2, 3]), None);
        assert_eq!(first_divergence(&[1, 9, 3], &[1, 2, 3]), Some(1));
        assert_eq!(first_divergence(&[1, 2], &[1, 2, 3]), Some(2));
    }
}
