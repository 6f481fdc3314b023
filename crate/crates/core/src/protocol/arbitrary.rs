//! Random field values for fuzzing the codec.

use rand::RngCore;

use super::Blob;
use crate::model::{AgentId, AppId};

pub trait Arbitrary: Sized {
    fn arbitrary(rng: &mut dyn RngCore) -> Self;
}

fn below(rng: &mut dyn RngCore, n: u32) -> u32 {
    rng.next_u32() % n
}

/// Small sizes dominate, with an occasional large one.
fn length(rng: &mut dyn RngCore) -> usize {
    match below(rng, 16) {
        0 => 0,
        1 => below(rng, 4096) as usize,
        _ => below(rng, 24) as usize,
    }
}

impl Arbitrary for u8 {
    fn arbitrary(rng: &mut dyn RngCore) -> Self {
        rng.next_u32() as u8
    }
}

impl Arbitrary for u32 {
    fn arbitrary(rng: &mut dyn RngCore) -> Self {
        match below(rng, 4) {
            0 => 0,
            1 => u32::MAX,
            _ => rng.next_u32(),
        }
    }
}

impl Arbitrary for u64 {
    fn arbitrary(rng: &mut dyn RngCore) -> Self {
        match below(rng, 4) {
            0 => 0,
            1 => u64::MAX,
            _ => rng.next_u64(),
        }
    }
}

impl Arbitrary for f64 {
    fn arbitrary(rng: &mut dyn RngCore) -> Self {
        // NaN never compares equal, so it cannot take part in round trips.
        let v = f64::from_bits(rng.next_u64());
        if v.is_nan() {
            0.5
        } else {
            v
        }
    }
}

impl Arbitrary for bool {
    fn arbitrary(rng: &mut dyn RngCore) -> Self {
        rng.next_u32() & 1 == 1
    }
}

impl Arbitrary for String {
    fn arbitrary(rng: &mut dyn RngCore) -> Self {
        let n = below(rng, 12);
        (0..n)
            .map(|_| match below(rng, 10) {
                0 => 'é',
                1 => '節',
                _ => char::from(b'a' + below(rng, 26) as u8),
            })
            .collect()
    }
}

impl Arbitrary for Blob {
    fn arbitrary(rng: &mut dyn RngCore) -> Self {
        let mut v = vec![0u8; length(rng)];
        rng.fill_bytes(&mut v);
        Blob(v)
    }
}

impl<T: Arbitrary> Arbitrary for Vec<T> {
    fn arbitrary(rng: &mut dyn RngCore) -> Self {
        let n = below(rng, 5);
        (0..n).map(|_| T::arbitrary(rng)).collect()
    }
}

impl<T: Arbitrary> Arbitrary for Option<T> {
    fn arbitrary(rng: &mut dyn RngCore) -> Self {
        if bool::arbitrary(rng) {
            Some(T::arbitrary(rng))
        } else {
            None
        }
    }
}

impl Arbitrary for AppId {
    fn arbitrary(rng: &mut dyn RngCore) -> Self {
        AppId(u64::arbitrary(rng))
    }
}

impl Arbitrary for AgentId {
    fn arbitrary(rng: &mut dyn RngCore) -> Self {
        AgentId(u64::arbitrary(rng))
    }
}
