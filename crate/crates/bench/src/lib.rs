//! Workload builders shared by the benchmarks.

use icheck_core::protocol::Message;
use icheck_core::{AppId, Layout};

/// A representative mix of control and data messages.
pub fn message_mix(data_len: usize) -> Vec<Message> {
    use icheck_core::protocol::{Blob, RegionChecksum};
    vec![
        Message::ProbeAgents { app_id: AppId(7) },
        Message::CommitBegin {
            app_id: AppId(7),
            epoch: 0,
            version: 12,
            rank: 3,
            regions: vec![RegionChecksum {
                region_id: "data".into(),
                len: data_len as u64,
                crc: 0xdead_beef,
            }],
        },
        Message::CommitData {
            region_id: "data".into(),
            offset: 0,
            data: Blob(vec![0x5a; data_len]),
        },
        Message::CommitEnd {
            app_id: AppId(7),
            version: 12,
            rank: 3,
        },
    ]
}

/// Layout pairs for an expand, a shrink and a scheme change over `n` elements.
pub fn layout_pairs(n: u64) -> Vec<(&'static str, Layout, Layout)> {
    vec![
        ("expand_block_4_8", Layout::block(n, 4), Layout::block(n, 8)),
        ("shrink_block_8_4", Layout::block(n, 8), Layout::block(n, 4)),
        ("block_to_cyclic_4_4", Layout::block(n, 4), Layout::cyclic(n, 4)),
    ]
}
