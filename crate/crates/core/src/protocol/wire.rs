//! Field-level encoding: big-endian fixed-width integers, strings as a
//! 2-byte length plus UTF-8, blobs and lists as a 4-byte length plus body.

use std::ops::{Deref, DerefMut};

use super::ProtocolError;
use crate::layout::{Layout, Transfer};
use crate::model::{
    AgentAssignment, AgentId, AppId, DistributionScheme, NodeStats, ProcessType,
    RegionDescriptor, StorageLevel,
};

#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn len32(&mut self, len: usize, field: &'static str) -> Result<(), ProtocolError> {
        let len = u32::try_from(len).map_err(|_| ProtocolError::Oversize { field })?;
        self.u32(len);
        Ok(())
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8], ProtocolError> {
        if self.remaining() < n {
            return Err(ProtocolError::Truncated { field });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self, field: &'static str) -> Result<u8, ProtocolError> {
        Ok(self.take(1, field)?[0])
    }

    pub fn u16(&mut self, field: &'static str) -> Result<u16, ProtocolError> {
        Ok(u16::from_be_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    pub fn u32(&mut self, field: &'static str) -> Result<u32, ProtocolError> {
        Ok(u32::from_be_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    pub fn u64(&mut self, field: &'static str) -> Result<u64, ProtocolError> {
        Ok(u64::from_be_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

/// A field that can be written to and read from a payload.
pub trait Wire: Sized {
    fn put(&self, w: &mut Writer, field: &'static str) -> Result<(), ProtocolError>;
    fn get(r: &mut Reader<'_>, field: &'static str) -> Result<Self, ProtocolError>;
}

/// Opaque byte payload, encoded as a 4-byte length plus bytes.
#[derive(Clone, Default, PartialEq, Eq)]
pub struct Blob(pub Vec<u8>);

impl std::fmt::Debug for Blob {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Blob({} bytes)", self.0.len())
    }
}

impl Deref for Blob {
    type Target = Vec<u8>;
    fn deref(&self) -> &Vec<u8> {
        &self.0
    }
}

impl DerefMut for Blob {
    fn deref_mut(&mut self) -> &mut Vec<u8> {
        &mut self.0
    }
}

impl From<Vec<u8>> for Blob {
    fn from(v: Vec<u8>) -> Self {
        Blob(v)
    }
}

impl Wire for u8 {
    fn put(&self, w: &mut Writer, _: &'static str) -> Result<(), ProtocolError> {
        w.u8(*self);
        Ok(())
    }
    fn get(r: &mut Reader<'_>, field: &'static str) -> Result<Self, ProtocolError> {
        r.u8(field)
    }
}

impl Wire for u32 {
    fn put(&self, w: &mut Writer, _: &'static str) -> Result<(), ProtocolError> {
        w.u32(*self);
        Ok(())
    }
    fn get(r: &mut Reader<'_>, field: &'static str) -> Result<Self, ProtocolError> {
        r.u32(field)
    }
}

impl Wire for u64 {
    fn put(&self, w: &mut Writer, _: &'static str) -> Result<(), ProtocolError> {
        w.u64(*self);
        Ok(())
    }
    fn get(r: &mut Reader<'_>, field: &'static str) -> Result<Self, ProtocolError> {
        r.u64(field)
    }
}

/// IEEE-754 bits, big-endian.
impl Wire for f64 {
    fn put(&self, w: &mut Writer, _: &'static str) -> Result<(), ProtocolError> {
        w.u64(self.to_bits());
        Ok(())
    }
    fn get(r: &mut Reader<'_>, field: &'static str) -> Result<Self, ProtocolError> {
        Ok(f64::from_bits(r.u64(field)?))
    }
}

impl Wire for bool {
    fn put(&self, w: &mut Writer, _: &'static str) -> Result<(), ProtocolError> {
        w.u8(u8::from(*self));
        Ok(())
    }
    fn get(r: &mut Reader<'_>, field: &'static str) -> Result<Self, ProtocolError> {
        match r.u8(field)? {
            0 => Ok(false),
            1 => Ok(true),
            value => Err(ProtocolError::InvalidEnum { field, value }),
        }
    }
}

impl Wire for String {
    fn put(&self, w: &mut Writer, field: &'static str) -> Result<(), ProtocolError> {
        let len = u16::try_from(self.len()).map_err(|_| ProtocolError::Oversize { field })?;
        w.u16(len);
        w.bytes(self.as_bytes());
        Ok(())
    }
    fn get(r: &mut Reader<'_>, field: &'static str) -> Result<Self, ProtocolError> {
        let len = r.u16(field)? as usize;
        let bytes = r.take(len, field)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| ProtocolError::InvalidUtf8 { field })
    }
}

impl Wire for Blob {
    fn put(&self, w: &mut Writer, field: &'static str) -> Result<(), ProtocolError> {
        w.len32(self.len(), field)?;
        w.bytes(self);
        Ok(())
    }
    fn get(r: &mut Reader<'_>, field: &'static str) -> Result<Self, ProtocolError> {
        let len = r.u32(field)? as usize;
        Ok(Blob(r.take(len, field)?.to_vec()))
    }
}

impl<T: Wire> Wire for Vec<T> {
    fn put(&self, w: &mut Writer, field: &'static str) -> Result<(), ProtocolError> {
        w.len32(self.len(), field)?;
        for item in self {
            item.put(w, field)?;
        }
        Ok(())
    }
    fn get(r: &mut Reader<'_>, field: &'static str) -> Result<Self, ProtocolError> {
        let n = r.u32(field)? as usize;
        // Every element takes at least one byte; refuse counts that cannot fit.
        if n > r.remaining() {
            return Err(ProtocolError::Truncated { field });
        }
        (0..n).map(|_| T::get(r, field)).collect()
    }
}

impl<T: Wire> Wire for Option<T> {
    fn put(&self, w: &mut Writer, field: &'static str) -> Result<(), ProtocolError> {
        match self {
            None => w.u8(0),
            Some(v) => {
                w.u8(1);
                v.put(w, field)?;
            }
        }
        Ok(())
    }
    fn get(r: &mut Reader<'_>, field: &'static str) -> Result<Self, ProtocolError> {
        match r.u8(field)? {
            0 => Ok(None),
            1 => Ok(Some(T::get(r, field)?)),
            value => Err(ProtocolError::InvalidEnum { field, value }),
        }
    }
}

impl Wire for AppId {
    fn put(&self, w: &mut Writer, _: &'static str) -> Result<(), ProtocolError> {
        w.u64(self.0);
        Ok(())
    }
    fn get(r: &mut Reader<'_>, field: &'static str) -> Result<Self, ProtocolError> {
        Ok(AppId(r.u64(field)?))
    }
}

impl Wire for AgentId {
    fn put(&self, w: &mut Writer, _: &'static str) -> Result<(), ProtocolError> {
        w.u64(self.0);
        Ok(())
    }
    fn get(r: &mut Reader<'_>, field: &'static str) -> Result<Self, ProtocolError> {
        Ok(AgentId(r.u64(field)?))
    }
}

/// Implements `Wire` for a fieldless enum as a single tag byte.
macro_rules! wire_enum {
    ($ty:ty { $($variant:path = $tag:literal),+ $(,)? }) => {
        impl $crate::protocol::arbitrary::Arbitrary for $ty {
            fn arbitrary(rng: &mut dyn rand::RngCore) -> Self {
                let all = [$($variant),+];
                all[(rng.next_u32() as usize) % all.len()]
            }
        }
        impl Wire for $ty {
            fn put(&self, w: &mut Writer, _: &'static str) -> Result<(), ProtocolError> {
                w.u8(match self { $($variant => $tag),+ });
                Ok(())
            }
            fn get(r: &mut Reader<'_>, field: &'static str) -> Result<Self, ProtocolError> {
                match r.u8(field)? {
                    $($tag => Ok($variant),)+
                    value => Err(ProtocolError::InvalidEnum { field, value }),
                }
            }
        }
    };
}

/// Implements `Wire` for a struct by writing its fields in declaration order.
macro_rules! wire_struct {
    ($ty:ident { $($field:ident),+ $(,)? }) => {
        impl $crate::protocol::arbitrary::Arbitrary for $ty {
            fn arbitrary(rng: &mut dyn rand::RngCore) -> Self {
                $ty { $( $field: $crate::protocol::arbitrary::Arbitrary::arbitrary(rng), )+ }
            }
        }
        impl Wire for $ty {
            fn put(&self, w: &mut Writer, _: &'static str) -> Result<(), ProtocolError> {
                $( Wire::put(&self.$field, w, stringify!($field))?; )+
                Ok(())
            }
            fn get(r: &mut Reader<'_>, _: &'static str) -> Result<Self, ProtocolError> {
                Ok($ty { $( $field: Wire::get(r, stringify!($field))?, )+ })
            }
        }
    };
}

pub(crate) use wire_enum;
pub(crate) use wire_struct;

wire_enum!(DistributionScheme {
    DistributionScheme::Block = 0,
    DistributionScheme::Cyclic = 1,
});

wire_enum!(ProcessType {
    ProcessType::Initial = 0,
    ProcessType::Joining = 1,
});

wire_enum!(StorageLevel {
    StorageLevel::Memory = 0,
    StorageLevel::Pfs = 1,
    StorageLevel::Both = 2,
});

wire_struct!(RegionDescriptor {
    region_id,
    elem_size,
    count_per_rank,
    scheme
});

wire_struct!(AgentAssignment {
    agent_id,
    node_id,
    endpoint,
    ranks
});

wire_struct!(Layout { total_n, p, scheme });

wire_struct!(Transfer {
    src_rank,
    src_offset,
    dst_rank,
    dst_offset,
    len
});

wire_struct!(NodeStats {
    node_id,
    mem_capacity,
    mem_used,
    bw_used,
    mem_predicted,
    bw_predicted,
    sample_time
});
