//! Single-file knowledge-base archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic b"CMCKBASE" | version u32 | meta_len u64 | payload_len u64
//! | sha256(meta ‖ payload) [32] | meta (JSON) | payload
//! ```
//!
//! The payload holds, per layer in order, the memory matrix followed by each
//! task's mask bitmap (1 bit per entry, LSB first), task vector and bias.
//! Values are IEEE-754 in the archive's dtype.

use std::fs::{self, File};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cmc::{CmcLayer, ContinualMemory, LayerGeometry, TaskId, TaskMask, TaskSlot, TaskVector};
use crate::config::hex;
use crate::error::{Error, Result};
use crate::net::{NetConfig, RestorationNet};
use crate::tensor::{DType, Real};
use crate::trainer::SequenceReport;

pub const MAGIC: &[u8; 8] = b"CMCKBASE";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 + 8 + 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskMeta {
    task_id: TaskId,
    fraction: f64,
    sharing: bool,
    popcount: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerMeta {
    index: usize,
    geometry: LayerGeometry,
    capacity: usize,
    frozen_through: TaskId,
    tasks: Vec<TaskMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    format_version: u32,
    dtype: DType,
    config_hash: String,
    seed: u64,
    network: NetConfig,
    task_names: Vec<String>,
    layers: Vec<LayerMeta>,
    report: Option<SequenceReport>,
}

/// Everything needed to continue a sequence: the network with its memories,
/// masks, vectors and biases, plus the task registry and the report so far.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBaseArchive<T> {
    pub config_hash: String,
    pub seed: u64,
    /// Names of the tasks known to the network, by task id order.
    pub task_names: Vec<String>,
    pub report: Option<SequenceReport>,
    pub net: RestorationNet<T>,
}

fn pack_bits(mask: &TaskMask, out: &mut Vec<u8>) {
    let total = mask.rows() * mask.cols();
    let start = out.len();
    out.resize(start + total.div_ceil(8), 0);
    for &i in mask.indices() {
        out[start + i / 8] |= 1 << (i % 8);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::ArchiveFormat(format!("payload ends inside {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn values<T: Real>(&mut self, n: usize, what: &str) -> Result<Vec<T>> {
        let raw = self.take(n * T::BYTES, what)?;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
}

impl<T: Real> KnowledgeBaseArchive<T> {
    pub fn new(
        net: RestorationNet<T>,
        task_names: Vec<String>,
        config_hash: String,
        seed: u64,
        report: Option<SequenceReport>,
    ) -> Self {
        Self {
            config_hash,
            seed,
            task_names,
            report,
            net,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut layers = Vec::with_capacity(self.net.layers().len());
        for layer in self.net.layers() {
            let mem = layer.memory();
            mem.weights().iter().for_each(|v| v.write_le(&mut payload));
            let mut tasks = Vec::new();
            for (&id, slot) in layer.tasks() {
                let mask = layer.mask(id)?;
                pack_bits(mask, &mut payload);
                slot.vector.values.iter().for_each(|v| v.write_le(&mut payload));
                slot.bias.iter().for_each(|v| v.write_le(&mut payload));
                tasks.push(TaskMeta {
                    task_id: id,
                    fraction: mask.fraction(),
                    sharing: slot.sharing,
                    popcount: mask.popcount(),
                });
            }
            layers.push(LayerMeta {
                index: layer.index(),
                geometry: layer.geometry(),
                capacity: layer.capacity(),
                frozen_through: layer.frozen_through(),
                tasks,
            });
        }
        let meta = Meta {
            format_version: FORMAT_VERSION,
            dtype: T::DTYPE,
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            network: self.net.config().clone(),
            task_names: self.task_names.clone(),
            layers,
            report: self.report.clone(),
        };
        let meta = serde_json::to_vec_pretty(&meta)?;
        let mut hasher = Sha256::new();
        hasher.update(&meta);
        hasher.update(&payload);
        let digest = hasher.finalize();

        let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&digest);
        out.extend_from_slice(&meta);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::ArchiveChecksum(format!(
                "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::ArchiveFormat("not a knowledge-base archive (bad magic)".into()));
        }
        let u64_at = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::ArchiveVersion {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (meta_len, payload_len) = (u64_at(12) as usize, u64_at(20) as usize);
        let expected = HEADER_LEN as u128 + meta_len as u128 + payload_len as u128;
        if bytes.len() as u128 != expected {
            return Err(Error::ArchiveChecksum(format!(
                "file is {} bytes, header declares {expected}",
                bytes.len()
            )));
        }
        let body = &bytes[HEADER_LEN..];
        let digest = Sha256::digest(body);
        if digest.as_slice() != &bytes[28..60] {
            return Err(Error::ArchiveChecksum(format!(
                "sha256 {} does not match stored {}",
                hex(&digest),
                hex(&bytes[28..60])
            )));
        }
        let meta: Meta =
            serde_json::from_slice(&body[..meta_len]).map_err(|e| Error::ArchiveFormat(format!("metadata: {e}")))?;
        if meta.dtype != T::DTYPE {
            return Err(Error::ArchiveFormat(format!(
                "archive stores {} values, caller expects {}",
                meta.dtype,
                T::DTYPE
            )));
        }
        let mut reader = Reader {
            bytes: &body[meta_len..],
            pos: 0,
        };
        let mut layers = Vec::with_capacity(meta.layers.len());
        for lm in &meta.layers {
            let (rows, cols) = (lm.capacity, lm.geometry.kernel_params());
            let weights = reader.values::<T>(rows * cols, "memory weights")?;
            let mut masks = Vec::new();
            let mut tasks = std::collections::BTreeMap::new();
            for tm in &lm.tasks {
                let packed = reader.take((rows * cols).div_ceil(8), "mask bitmap")?;
                let indices: Vec<usize> = (0..rows * cols)
                    .filter(|&i| packed[i / 8] & (1 << (i % 8)) != 0)
                    .collect();
                if indices.len() != tm.popcount {
                    return Err(Error::ArchiveFormat(format!(
                        "layer {} task {}: mask has {} bits, metadata says {}",
                        lm.index,
                        tm.task_id,
                        indices.len(),
                        tm.popcount
                    )));
                }
                masks.push(TaskMask::from_indices(tm.task_id, rows, cols, tm.fraction, indices)?);
                let values = reader.values::<T>(rows, "task vector")?;
                let bias = reader.values::<T>(lm.geometry.k_out, "bias")?;
                tasks.insert(
                    tm.task_id,
                    TaskSlot {
                        vector: TaskVector {
                            task_id: tm.task_id,
                            values,
                        },
                        bias,
                        sharing: tm.sharing,
                    },
                );
            }
            let memory = ContinualMemory::from_parts(lm.index, rows, cols, weights, masks, lm.frozen_through)?;
            layers.push(CmcLayer::from_parts(lm.index, lm.geometry, memory, tasks)?);
        }
        if reader.pos != reader.bytes.len() {
            return Err(Error::ArchiveFormat(format!(
                "{} trailing payload bytes",
                reader.bytes.len() - reader.pos
            )));
        }
        let net = RestorationNet::from_layers(meta.network, layers)?;
        Ok(Self {
            config_hash: meta.config_hash,
            seed: meta.seed,
            task_names: meta.task_names,
            report: meta.report,
            net,
        })
    }

    /// Writes to a temporary sibling, syncs it, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."));
        let name = path
            .file_name()
            .ok_or_else(|| Error::Config(format!("archive path {} has no file name", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
        let write = || -> std::io::Result<()> {
            let mut f = File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)?;
            // persist the rename itself where the platform allows it
            if let Ok(d) = File::open(dir) {
                let _ = d.sync_all();
            }
            Ok(())
        };
        write().map_err(|e| {
            let _ = fs::remove_file(&tmp);
            Error::io(path, e)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checks that the stored network matches `config` layer for layer.
    pub fn check_geometry(&self, config: &NetConfig) -> Result<()> {
        let stored = self.net.config();
        let describe = |c: &NetConfig| {
            let caps: Vec<String> = (0..c.layer_count()).map(|l| c.capacity_of(l).to_string()).collect();
            format!(
                "C={} B={} n={} t=[{}]",
                c.channels,
                c.blocks,
                c.kernel_size,
                caps.join(",")
            )
        };
        let same = stored.channels == config.channels
            && stored.blocks == config.blocks
            && stored.kernel_size == config.kernel_size
            && (0..config.layer_count()).all(|l| stored.capacity_of(l) == config.capacity_of(l));
        if !same {
            return Err(Error::GeometryMismatch {
                archive: describe(stored),
                config: describe(config),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    fn sample() -> KnowledgeBaseArchive<f32> {
        let mut net = RestorationNet::<f32>::new(NetConfig {
            channels: 3,
            blocks: 1,
            ..NetConfig::default()
        })
        .unwrap();
        net.begin_task(1, 0.3, &BTreeMap::new(), true, 4).unwrap();
        net.freeze_task(1).unwrap();
        net.begin_task(2, 0.3, &BTreeMap::from([(0, 0.5)]), false, 4).unwrap();
        net.freeze_task(2).unwrap();
        KnowledgeBaseArchive::new(net, vec!["a".into(), "b".into()], "abc".into(), 4, None)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let a = sample();
        let b = KnowledgeBaseArchive::<f32>::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(a, b);
        for (la, lb) in a.net.layers().iter().zip(b.net.layers()) {
            let bits = |l: &CmcLayer<f32>| l.memory().weights().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(la), bits(lb));
        }
    }

    #[test]
    fn truncation_and_corruption_are_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 10, HEADER_LEN, bytes.len() - 1] {
            let err = KnowledgeBaseArchive::<f32>::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::ArchiveChecksum(_)), "cut {cut}: {err}");
        }
        let mut flipped = bytes.clone();
        let last = flipped.len() - 3;
        flipped[last] ^= 0x40;
        assert!(matches!(
            KnowledgeBaseArchive::<f32>::from_bytes(&flipped),
            Err(Error::ArchiveChecksum(_))
        ));
    }

    #[test]
    fn version_and_dtype_mismatches_are_explicit() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            KnowledgeBaseArchive::<f32>::from_bytes(&bytes),
            Err(Error::ArchiveVersion { found: 7, expected: 1 })
        ));
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(
            KnowledgeBaseArchive::<f64>::from_bytes(&bytes),
            Err(Error::ArchiveFormat(_))
        ));
    }

    #[test]
    fn geometry_mismatch_names_both_sides() {
        let a = sample();
        let other = NetConfig {
            channels: 16,
            blocks: 1,
            ..NetConfig::default()
        };
        let msg = a.check_geometry(&other).unwrap_err().to_string();
        assert!(msg.contains("C=3") && msg.contains("C=16"), "{msg}");
        a.check_geometry(a.net.config()).unwrap();
    }

    #[test]
    fn atomic_save_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kb.cmckb");
        let a = sample();
        a.save(&path).unwrap();
        a.save(&path).unwrap();
        assert_eq!(KnowledgeBaseArchive::<f32>::load(&path).unwrap(), a);
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1, "{names:?}");
    }
}
