//! End-to-end client flows against an in-process cluster.

use std::thread;

use icheck_core::client::{buffer, ClientConfig, Icheck};
use icheck_core::cluster::{ClusterSpec, LocalCluster};
use icheck_core::layout::Layout;
use icheck_core::model::{DistributionScheme, ProcessType};

fn rank_bytes(rank: u32, seed: u8, len: usize) -> Vec<u8> {
    (0..len).map(|i| (i as u8).wrapping_mul(31) ^ rank as u8 ^ seed).collect()
}

#[test]
fn four_ranks_commit_and_restart() {
    let dir = tempfile::tempdir().unwrap();
    let cluster = LocalCluster::start(ClusterSpec::default(), dir.path()).unwrap();
    let ep = cluster.controller_endpoint();
    let world = 4u32;
    let n = 1000u64;
    let elem = 8u32;
    let handles: Vec<_> = (0..world)
        .map(|rank| {
            let ep = ep.clone();
            thread::spawn(move || {
                let layout = Layout::block(n, world);
                let count = layout.owned_count(rank).unwrap();
                let len = (count * u64::from(elem)) as usize;
                let buf = buffer(rank_bytes(rank, 1, len));
                let mut c = Icheck::new(ClientConfig::new(ep.clone()));
                c.init("smoke", rank, world, ProcessType::Initial).unwrap();
                c.add_adapt("data", buf.clone(), count, n, elem, DistributionScheme::Block).unwrap();
                assert!(!c.restart().unwrap());
                c.commit().unwrap();
                *buf.write().unwrap() = rank_bytes(rank, 2, len);
                c.commit().unwrap();
                c.drain().unwrap();
                *buf.write().unwrap() = vec![0; len];
                c.abort();

                let mut c = Icheck::new(ClientConfig::new(ep));
                c.init("smoke", rank, world, ProcessType::Initial).unwrap();
                c.add_adapt("data", buf.clone(), count, n, elem, DistributionScheme::Block).unwrap();
                (c, buf, len)
            })
        })
        .collect();
    let mut sessions: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    for (rank, (c, buf, len)) in sessions.iter_mut().enumerate() {
        assert!(c.restart().unwrap());
        assert_eq!(*buf.read().unwrap(), rank_bytes(rank as u32, 2, *len));
    }
    for (c, _, _) in sessions.iter_mut() {
        let stats = c.finalize().unwrap();
        assert!(stats.is_empty());
    }
}
