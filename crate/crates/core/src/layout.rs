//! Block and cyclic ownership of a global array, and the plans that move
//! data from one process count (or scheme) to another.
//!
//! Block is the balanced variant: with `q = N / P` and `rem = N % P`, rank
//! `r` owns `q + 1` elements when `r < rem`, else `q`, starting at
//! `r * q + min(r, rem)`. Cyclic assigns global index `i` to rank `i % P` at
//! local position `i / P`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DistributionScheme, Rank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Layout {
    pub total_n: u64,
    pub p: u32,
    pub scheme: DistributionScheme,
}

/// `(global_offset, length)` of every rank under the balanced block scheme.
pub fn block_partition(total_n: u64, p: u32) -> Result<Vec<(u64, u64)>> {
    if p == 0 {
        return Err(Error::invalid("process count must be at least 1"));
    }
    let p64 = u64::from(p);
    let q = total_n / p64;
    let rem = total_n % p64;
    Ok((0..p64)
        .map(|r| {
            let len = if r < rem { q + 1 } else { q };
            (r * q + r.min(rem), len)
        })
        .collect())
}

/// Owner rank and local index of global index `i` under the cyclic scheme.
pub fn cyclic_owner(i: u64, p: u32) -> (Rank, u64) {
    assert!(p >= 1, "process count must be at least 1");
    let p64 = u64::from(p);
    ((i % p64) as Rank, i / p64)
}

impl Layout {
    pub fn new(total_n: u64, p: u32, scheme: DistributionScheme) -> Self {
        Self { total_n, p, scheme }
    }

    pub fn block(total_n: u64, p: u32) -> Self {
        Self::new(total_n, p, DistributionScheme::Block)
    }

    pub fn cyclic(total_n: u64, p: u32) -> Self {
        Self::new(total_n, p, DistributionScheme::Cyclic)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::invalid("layout process count must be at least 1"));
        }
        Ok(())
    }

    fn block_params(&self) -> (u64, u64) {
        let p = u64::from(self.p);
        (self.total_n / p, self.total_n % p)
    }

    /// Number of elements rank `r` owns.
    pub fn owned_count(&self, r: Rank) -> Result<u64> {
        self.validate()?;
        if r >= self.p {
            return Err(Error::invalid(format!(
                "rank {r} out of range for {} processes",
                self.p
            )));
        }
        Ok(self.owned_count_unchecked(r))
    }

    fn owned_count_unchecked(&self, r: Rank) -> u64 {
        let r = u64::from(r);
        match self.scheme {
            DistributionScheme::Block => {
                let (q, rem) = self.block_params();
                if r < rem {
                    q + 1
                } else {
                    q
                }
            }
            DistributionScheme::Cyclic => {
                let p = u64::from(self.p);
                if self.total_n > r {
                    (self.total_n - r).div_ceil(p)
                } else {
                    0
                }
            }
        }
    }

    /// Per-rank element counts.
    pub fn counts(&self) -> Vec<u64> {
        (0..self.p).map(|r| self.owned_count_unchecked(r)).collect()
    }

    /// Owner and local index of global index `g`.
    pub fn owner(&self, g: u64) -> (Rank, u64) {
        debug_assert!(g < self.total_n);
        match self.scheme {
            DistributionScheme::Block => {
                let (q, rem) = self.block_params();
                let big = rem * (q + 1);
                if g < big {
                    ((g / (q + 1)) as Rank, g % (q + 1))
                } else {
                    // q > 0 here, otherwise g < big would have held.
                    let rest = g - big;
                    ((rem + rest / q) as Rank, rest % q)
                }
            }
            DistributionScheme::Cyclic => cyclic_owner(g, self.p),
        }
    }

    /// Global index of local element `local` on rank `r`.
    pub fn global_index(&self, r: Rank, local: u64) -> u64 {
        match self.scheme {
            DistributionScheme::Block => {
                let (q, rem) = self.block_params();
                let r = u64::from(r);
                r * q + r.min(rem) + local
            }
            DistributionScheme::Cyclic => local * u64::from(self.p) + u64::from(r),
        }
    }
}

/// One run of consecutive elements moving between two ranks, in element units.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transfer {
    pub src_rank: Rank,
    pub src_offset: u64,
    pub dst_rank: Rank,
    pub dst_offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedistributionPlan {
    pub transfers: Vec<Transfer>,
    pub old: Layout,
    pub new: Layout,
}

/// Computes the coalesced transfer list from `old` to `new`, sorted by
/// destination rank and destination offset.
pub fn redistribution_plan(old: Layout, new: Layout) -> Result<RedistributionPlan> {
    old.validate()?;
    new.validate()?;
    if old.total_n != new.total_n {
        return Err(Error::invalid(format!(
            "total element count must be conserved ({} != {})",
            old.total_n, new.total_n
        )));
    }
    let mut transfers: Vec<Transfer> = Vec::new();
    for dst in 0..new.p {
        push_destination_runs(&old, &new, dst, &mut transfers);
    }
    Ok(RedistributionPlan {
        transfers,
        old,
        new,
    })
}

/// Coalesced runs landing on one destination rank, without computing the
/// rest of the plan.
pub fn destination_runs(old: Layout, new: Layout, dst: Rank) -> Result<Vec<Transfer>> {
    old.validate()?;
    new.owned_count(dst)?;
    if old.total_n != new.total_n {
        return Err(Error::invalid(format!(
            "total element count must be conserved ({} != {})",
            old.total_n, new.total_n
        )));
    }
    let mut out = Vec::new();
    push_destination_runs(&old, &new, dst, &mut out);
    Ok(out)
}

fn push_destination_runs(old: &Layout, new: &Layout, dst: Rank, out: &mut Vec<Transfer>) {
    let count = new.owned_count_unchecked(dst);
    let mut run: Option<Transfer> = None;
    for local in 0..count {
        let g = new.global_index(dst, local);
        let (src, src_local) = old.owner(g);
        match run.as_mut() {
            Some(t) if t.src_rank == src && t.src_offset + t.len == src_local => t.len += 1,
            _ => {
                if let Some(t) = run.take() {
                    out.push(t);
                }
                run = Some(Transfer {
                    src_rank: src,
                    src_offset: src_local,
                    dst_rank: dst,
                    dst_offset: local,
                    len: 1,
                });
            }
        }
    }
    if let Some(t) = run {
        out.push(t);
    }
}

impl RedistributionPlan {
    /// Transfers landing on destination rank `dst`.
    pub fn for_destination(&self, dst: Rank) -> impl Iterator<Item = &Transfer> {
        self.transfers.iter().filter(move |t| t.dst_rank == dst)
    }

    pub fn moved_elements(&self) -> u64 {
        self.transfers.iter().map(|t| t.len).sum()
    }

    /// Checks conservation and exact coverage of every destination index.
    pub fn check_invariants(&self) -> Result<()> {
        if self.moved_elements() != self.new.total_n {
            return Err(Error::CorruptState(format!(
                "plan moves {} elements, expected {}",
                self.moved_elements(),
                self.new.total_n
            )));
        }
        let mut dst_seen: Vec<Vec<bool>> = self
            .new
            .counts()
            .into_iter()
            .map(|c| vec![false; c as usize])
            .collect();
        let mut src_seen: Vec<Vec<bool>> = self
            .old
            .counts()
            .into_iter()
            .map(|c| vec![false; c as usize])
            .collect();
        for t in &self.transfers {
            for k in 0..t.len {
                let d = dst_seen
                    .get_mut(t.dst_rank as usize)
                    .and_then(|v| v.get_mut((t.dst_offset + k) as usize))
                    .ok_or_else(|| Error::CorruptState(format!("run {t:?} out of range")))?;
                let s = src_seen
                    .get_mut(t.src_rank as usize)
                    .and_then(|v| v.get_mut((t.src_offset + k) as usize))
                    .ok_or_else(|| Error::CorruptState(format!("run {t:?} out of range")))?;
                if *d || *s {
                    return Err(Error::CorruptState(format!("run {t:?} overlaps another")));
                }
                *d = true;
                *s = true;
            }
        }
        if dst_seen.iter().flatten().any(|c| !c) {
            return Err(Error::CorruptState("destination index left uncovered".into()));
        }
        Ok(())
    }
}

/// Moves per-rank source buffers into per-rank destination buffers.
pub fn apply_plan<B: AsRef<[u8]>>(
    plan: &RedistributionPlan,
    sources: &[B],
    elem_size: usize,
) -> Result<Vec<Vec<u8>>> {
    if elem_size == 0 {
        return Err(Error::invalid("elem_size must be at least 1"));
    }
    if sources.len() != plan.old.p as usize {
        return Err(Error::CorruptState(format!(
            "{} source buffers for {} ranks",
            sources.len(),
            plan.old.p
        )));
    }
    for (r, (buf, count)) in sources.iter().zip(plan.old.counts()).enumerate() {
        let want = count as usize * elem_size;
        if buf.as_ref().len() != want {
            return Err(Error::CorruptState(format!(
                "source rank {r} holds {} bytes, expected {want}",
                buf.as_ref().len()
            )));
        }
    }
    let mut out: Vec<Vec<u8>> = plan
        .new
        .counts()
        .into_iter()
        .map(|c| vec![0u8; c as usize * elem_size])
        .collect();
    for t in &plan.transfers {
        let src = sources[t.src_rank as usize].as_ref();
        let s = t.src_offset as usize * elem_size;
        let d = t.dst_offset as usize * elem_size;
        let n = t.len as usize * elem_size;
        out[t.dst_rank as usize][d..d + n].copy_from_slice(&src[s..s + n]);
    }
    Ok(out)
}
