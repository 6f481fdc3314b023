//! File-backed second storage level.
//!
//! Layout under the configured root:
//!
//! ```text
//! <root>/<app_id>/epoch<E>/v<V>/rank<R>/<region_id>.bin
//! <root>/<app_id>/epoch<E>/v<V>/manifest.json
//! ```
//!
//! Region files hold the raw element bytes as received. The manifest is
//! written last through a rename and is the commit point: a version without
//! a manifest is not on the PFS tier, whatever region files exist.

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{crc32, AppId, RegionDescriptor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub rank: u32,
    pub region_id: String,
    pub len: u64,
    /// CRC-32 as 8 lowercase hex digits.
    pub crc32: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub app_id: u64,
    pub app_name: String,
    pub world_size: u32,
    pub epoch: u32,
    pub version: u64,
    pub regions: Vec<RegionDescriptor>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entry(&self, rank: u32, region_id: &str) -> Option<&ManifestEntry> {
        self.entries
            .iter()
            .find(|e| e.rank == rank && e.region_id == region_id)
    }
}

pub fn crc_hex(crc: u32) -> String {
    format!("{crc:08x}")
}

pub fn parse_crc_hex(s: &str) -> Result<u32> {
    u32::from_str_radix(s, 16)
        .map_err(|_| Error::CorruptState(format!("bad checksum `{s}` in manifest")))
}

#[derive(Debug, Clone)]
pub struct PfsTier {
    root: PathBuf,
}

fn write_synced(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()
}

fn sync_dir(path: &Path) {
    // Directory fsync is best effort; not every platform allows opening one.
    if let Ok(d) = File::open(path) {
        let _ = d.sync_all();
    }
}

impl PfsTier {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn version_dir(&self, app: AppId, epoch: u32, version: u64) -> PathBuf {
        self.root
            .join(app.0.to_string())
            .join(format!("epoch{epoch}"))
            .join(format!("v{version}"))
    }

    pub fn region_path(
        &self,
        app: AppId,
        epoch: u32,
        version: u64,
        rank: u32,
        region_id: &str,
    ) -> PathBuf {
        self.version_dir(app, epoch, version)
            .join(format!("rank{rank}"))
            .join(format!("{region_id}.bin"))
    }

    pub fn manifest_path(&self, app: AppId, epoch: u32, version: u64) -> PathBuf {
        self.version_dir(app, epoch, version).join("manifest.json")
    }

    /// Writes one region file durably. Rewriting the same file is harmless.
    pub fn write_region(
        &self,
        app: AppId,
        epoch: u32,
        version: u64,
        rank: u32,
        region_id: &str,
        bytes: &[u8],
    ) -> Result<()> {
        let path = self.region_path(app, epoch, version, rank, region_id);
        let dir = path.parent().expect("region path has a parent");
        fs::create_dir_all(dir)?;
        let tmp = path.with_extension("bin.tmp");
        write_synced(&tmp, bytes)?;
        fs::rename(&tmp, &path)?;
        sync_dir(dir);
        Ok(())
    }

    /// Stages the manifest next to its final name without publishing it.
    pub fn stage_manifest(&self, manifest: &Manifest) -> Result<PathBuf> {
        let app = AppId(manifest.app_id);
        let dir = self.version_dir(app, manifest.epoch, manifest.version);
        fs::create_dir_all(&dir)?;
        let tmp = dir.join("manifest.json.tmp");
        let body = serde_json::to_vec_pretty(manifest)
            .map_err(|e| Error::CorruptState(format!("manifest encoding: {e}")))?;
        write_synced(&tmp, &body)?;
        Ok(tmp)
    }

    /// Publishes a staged manifest; the version is on PFS once this returns.
    pub fn publish_manifest(&self, manifest: &Manifest, staged: &Path) -> Result<()> {
        let path = self.manifest_path(AppId(manifest.app_id), manifest.epoch, manifest.version);
        fs::rename(staged, &path)?;
        sync_dir(path.parent().expect("manifest has a parent"));
        Ok(())
    }

    pub fn commit_manifest(&self, manifest: &Manifest) -> Result<()> {
        let staged = self.stage_manifest(manifest)?;
        self.publish_manifest(manifest, &staged)
    }

    pub fn read_manifest(&self, app: AppId, epoch: u32, version: u64) -> Result<Option<Manifest>> {
        let path = self.manifest_path(app, epoch, version);
        match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| Error::CorruptState(format!("{}: {e}", path.display()))),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    pub fn is_committed(&self, app: AppId, epoch: u32, version: u64) -> bool {
        self.manifest_path(app, epoch, version).is_file()
    }

    /// Reads a region of a committed version and verifies it against the
    /// manifest. Returns `Ok(None)` when the version is not on PFS.
    pub fn read_region(
        &self,
        app: AppId,
        epoch: u32,
        version: u64,
        rank: u32,
        region_id: &str,
    ) -> Result<Option<(Vec<u8>, u32)>> {
        let Some(manifest) = self.read_manifest(app, epoch, version)? else {
            return Ok(None);
        };
        let Some(entry) = manifest.entry(rank, region_id) else {
            return Ok(None);
        };
        let bytes = fs::read(self.region_path(app, epoch, version, rank, region_id))?;
        let want = parse_crc_hex(&entry.crc32)?;
        if bytes.len() as u64 != entry.len || crc32(&bytes) != want {
            return Err(Error::CorruptState(format!(
                "pfs copy of app {app} v{version} rank {rank} region {region_id} fails its checksum"
            )));
        }
        Ok(Some((bytes, want)))
    }

    /// Removes a version directory; used when retention drops a version.
    pub fn remove_version(&self, app: AppId, epoch: u32, version: u64) -> Result<()> {
        match fs::remove_dir_all(self.version_dir(app, epoch, version)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DistributionScheme;

    fn manifest(data: &[u8]) -> Manifest {
        Manifest {
            app_id: 3,
            app_name: "demo".into(),
            world_size: 1,
            epoch: 0,
            version: 5,
            regions: vec![RegionDescriptor {
                region_id: "data".into(),
                elem_size: 1,
                count_per_rank: vec![data.len() as u64],
                scheme: DistributionScheme::Block,
            }],
            entries: vec![ManifestEntry {
                rank: 0,
                region_id: "data".into(),
                len: data.len() as u64,
                crc32: crc_hex(crc32(data)),
            }],
        }
    }

    #[test]
    fn paths_follow_layout() {
        let pfs = PfsTier::new("/pfs");
        assert_eq!(
            pfs.region_path(AppId(3), 1, 7, 2, "data"),
            PathBuf::from("/pfs/3/epoch1/v7/rank2/data.bin")
        );
        assert_eq!(
            pfs.manifest_path(AppId(3), 1, 7),
            PathBuf::from("/pfs/3/epoch1/v7/manifest.json")
        );
    }

    #[test]
    fn manifest_is_the_commit_point() {
        let dir = tempfile::tempdir().unwrap();
        let pfs = PfsTier::new(dir.path());
        let data = b"checkpoint bytes".to_vec();
        let m = manifest(&data);
        pfs.write_region(AppId(3), 0, 5, 0, "data", &data).unwrap();
        let staged = pfs.stage_manifest(&m).unwrap();
        // crash here: data files exist, manifest not renamed
        assert!(!pfs.is_committed(AppId(3), 0, 5));
        assert!(pfs.read_region(AppId(3), 0, 5, 0, "data").unwrap().is_none());

        pfs.publish_manifest(&m, &staged).unwrap();
        let (bytes, crc) = pfs.read_region(AppId(3), 0, 5, 0, "data").unwrap().unwrap();
        assert_eq!(bytes, data);
        assert_eq!(crc, crc32(&data));
        assert_eq!(pfs.read_manifest(AppId(3), 0, 5).unwrap().unwrap(), m);
    }

    #[test]
    fn corrupted_region_file_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let pfs = PfsTier::new(dir.path());
        let data = vec![1u8, 2, 3, 4];
        pfs.write_region(AppId(3), 0, 5, 0, "data", &data).unwrap();
        pfs.commit_manifest(&manifest(&data)).unwrap();
        fs::write(pfs.region_path(AppId(3), 0, 5, 0, "data"), [1u8, 2, 3, 5]).unwrap();
        assert!(pfs.read_region(AppId(3), 0, 5, 0, "data").is_err());
    }

    #[test]
    fn double_flush_overwrites() {
        let dir = tempfile::tempdir().unwrap();
        let pfs = PfsTier::new(dir.path());
        let data = vec![9u8; 32];
        for _ in 0..2 {
            pfs.write_region(AppId(3), 0, 5, 0, "data", &data).unwrap();
            pfs.commit_manifest(&manifest(&data)).unwrap();
        }
        assert_eq!(pfs.read_region(AppId(3), 0, 5, 0, "data").unwrap().unwrap().0, data);
    }
}
