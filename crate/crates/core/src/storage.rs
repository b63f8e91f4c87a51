//! Binary persistence: checkpoints and trajectory files with magic bytes,
//! versioned headers, and SHA-256 content checksums. JSON for configs and
//! metrics. All writes go through write-temp-then-rename so readers never
//! see partial files.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::ParamSet;
use crate::replay::{relabel_rtg, Trajectory};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"HDTC";
const TRAJECTORY_MAGIC: &[u8; 4] = b"HDTT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const TRAJECTORY_VERSION: u32 = 1;

/// Checkpoint bookkeeping stored in the header.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Arbitrary config blob (model + run configuration as JSON).
    pub config: serde_json::Value,
    pub seed: u64,
    pub iteration: u64,
    pub wall_clock_secs: f64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

struct HashingWriter<W: Write> {
    inner: W,
    hasher: Sha256,
}

impl<W: Write> HashingWriter<W> {
    fn new(inner: W) -> Self {
        HashingWriter {
            inner,
            hasher: Sha256::new(),
        }
    }
}

impl<W: Write> Write for HashingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.hasher.update(&buf[..n]);
        Ok(n)
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".part");
    path.with_file_name(name)
}

/// Write a file atomically: the closure streams into a temp file which is
/// renamed over the target on success.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io_err(path))?;
        }
    }
    let tmp = temp_path(path);
    let file = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut writer = BufWriter::new(file);
    let result = write(&mut writer).and_then(|()| writer.flush().map_err(io_err(&tmp)));
    match result {
        Ok(()) => fs::rename(&tmp, path).map_err(io_err(path)),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

fn write_framed(
    path: &Path,
    magic: &[u8; 4],
    version: u32,
    header: &impl Serialize,
    body: impl FnOnce(&mut dyn Write) -> std::io::Result<()>,
) -> Result<()> {
    let header_bytes = serde_json::to_vec(header)
        .map_err(|e| Error::Data(format!("header serialization failed: {e}")))?;
    write_atomic(path, |w| {
        let mut hw = HashingWriter::new(w);
        let io = |e| Error::io(path, e);
        hw.write_all(magic).map_err(io)?;
        hw.write_all(&version.to_le_bytes()).map_err(io)?;
        hw.write_all(&(header_bytes.len() as u64).to_le_bytes())
            .map_err(io)?;
        hw.write_all(&header_bytes).map_err(io)?;
        body(&mut hw).map_err(io)?;
        let digest = hw.hasher.clone().finalize();
        hw.inner.write_all(&digest).map_err(io)?;
        Ok(())
    })
}

struct FramedReader {
    /// Entire payload between header frame and trailing checksum.
    body: Vec<u8>,
    header_bytes: Vec<u8>,
    version: u32,
}

fn read_framed(path: &Path, magic: &[u8; 4]) -> Result<FramedReader> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut reader = BufReader::new(file);
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes).map_err(io_err(path))?;
    if bytes.len() < 4 + 4 + 8 + 32 {
        return Err(Error::Data(format!(
            "{}: truncated file ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let (payload, checksum) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(payload);
    if digest.as_slice() != checksum {
        return Err(Error::Data(format!(
            "{}: checksum mismatch, file corrupt",
            path.display()
        )));
    }
    if &payload[0..4] != magic {
        return Err(Error::Data(format!("{}: bad magic bytes", path.display())));
    }
    let version = u32::from_le_bytes(payload[4..8].try_into().unwrap());
    let header_len = u64::from_le_bytes(payload[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > payload.len() {
        return Err(Error::Data(format!("{}: header overruns file", path.display())));
    }
    Ok(FramedReader {
        header_bytes: payload[16..16 + header_len].to_vec(),
        body: payload[16 + header_len..].to_vec(),
        version,
    })
}

/// Persist a parameter set. Tensor data round-trips bit-exactly.
pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: &CheckpointMeta) -> Result<()> {
    let tensors: Vec<TensorEntry> = params
        .iter()
        .map(|(name, p)| TensorEntry {
            name: name.to_string(),
            shape: p.tensor.shape().to_vec(),
            frozen: p.frozen,
        })
        .collect();
    let header = CheckpointHeader {
        meta: meta.clone(),
        tensors,
    };
    write_framed(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &header, |w| {
        for (_, p) in params.iter() {
            for v in p.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    })
}

/// Load a checkpoint, verifying checksum and format version.
pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, CheckpointMeta)> {
    let framed = read_framed(path, CHECKPOINT_MAGIC)?;
    if framed.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "{}: checkpoint version {} unsupported (expected {CHECKPOINT_VERSION}); migration required",
            path.display(),
            framed.version
        )));
    }
    let header: CheckpointHeader = serde_json::from_slice(&framed.header_bytes)
        .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?;
    let mut params = ParamSet::new();
    let mut cursor = 0usize;
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let bytes = n * 8;
        if cursor + bytes > framed.body.len() {
            return Err(Error::Data(format!(
                "{}: tensor data overruns file",
                path.display()
            )));
        }
        let data: Vec<f64> = framed.body[cursor..cursor + bytes]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        cursor += bytes;
        params.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        if entry.frozen {
            params.set_frozen(&entry.name, true)?;
        }
    }
    if cursor != framed.body.len() {
        return Err(Error::Data(format!(
            "{}: {} trailing bytes after tensors",
            path.display(),
            framed.body.len() - cursor
        )));
    }
    Ok((params, header.meta))
}

#[derive(Serialize, Deserialize)]
struct TrajectoryHeader {
    task_id: u32,
    len: usize,
    d_s: usize,
    d_a: usize,
    has_actions: bool,
}

/// Persist one trajectory.
pub fn save_trajectory(path: &Path, t: &Trajectory) -> Result<()> {
    t.validate()?;
    let header = TrajectoryHeader {
        task_id: t.task_id,
        len: t.len(),
        d_s: t.d_s,
        d_a: t.d_a,
        has_actions: t.has_actions(),
    };
    write_framed(path, TRAJECTORY_MAGIC, TRAJECTORY_VERSION, &header, |w| {
        for i in 0..t.len() {
            for v in &t.states[i * t.d_s..(i + 1) * t.d_s] {
                w.write_all(&v.to_le_bytes())?;
            }
            if header.has_actions {
                for v in &t.actions[i * t.d_a..(i + 1) * t.d_a] {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.write_all(&t.rewards[i].to_le_bytes())?;
            w.write_all(&t.rewards_to_go[i].to_le_bytes())?;
            w.write_all(&t.timesteps[i].to_le_bytes())?;
        }
        Ok(())
    })
}

/// Load a trajectory, rejecting corrupt files and reward-to-go columns that
/// are not the suffix sums of the reward column.
pub fn load_trajectory(path: &Path) -> Result<Trajectory> {
    let framed = read_framed(path, TRAJECTORY_MAGIC)?;
    if framed.version != TRAJECTORY_VERSION {
        return Err(Error::Data(format!(
            "{}: trajectory version {} unsupported (expected {TRAJECTORY_VERSION})",
            path.display(),
            framed.version
        )));
    }
    let header: TrajectoryHeader = serde_json::from_slice(&framed.header_bytes)
        .map_err(|e| Error::Data(format!("{}: bad header: {e}", path.display())))?;
    let step_bytes = (header.d_s + if header.has_actions { header.d_a } else { 0 } + 2) * 8 + 4;
    if framed.body.len() != header.len * step_bytes {
        return Err(Error::Data(format!(
            "{}: body size {} does not match {} steps",
            path.display(),
            framed.body.len(),
            header.len
        )));
    }
    let mut states = Vec::with_capacity(header.len * header.d_s);
    let mut actions = Vec::with_capacity(if header.has_actions {
        header.len * header.d_a
    } else {
        0
    });
    let mut rewards = Vec::with_capacity(header.len);
    let mut rewards_to_go = Vec::with_capacity(header.len);
    let mut timesteps = Vec::with_capacity(header.len);
    let mut cursor = 0usize;
    let f64_at = |body: &[u8], c: &mut usize| {
        let v = f64::from_le_bytes(body[*c..*c + 8].try_into().unwrap());
        *c += 8;
        v
    };
    for _ in 0..header.len {
        for _ in 0..header.d_s {
            states.push(f64_at(&framed.body, &mut cursor));
        }
        if header.has_actions {
            for _ in 0..header.d_a {
                actions.push(f64_at(&framed.body, &mut cursor));
            }
        }
        rewards.push(f64_at(&framed.body, &mut cursor));
        rewards_to_go.push(f64_at(&framed.body, &mut cursor));
        timesteps.push(u32::from_le_bytes(
            framed.body[cursor..cursor + 4].try_into().unwrap(),
        ));
        cursor += 4;
    }
    if rewards_to_go != relabel_rtg(&rewards) {
        return Err(Error::Data(format!(
            "{}: reward_to_go column fails the suffix-sum check",
            path.display()
        )));
    }
    let t = Trajectory {
        task_id: header.task_id,
        d_s: header.d_s,
        d_a: header.d_a,
        states,
        actions,
        rewards,
        rewards_to_go,
        timesteps,
    };
    t.validate()?;
    Ok(t)
}

/// Serialize any config/metrics value as pretty JSON, atomically.
pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Data(format!("json serialization failed: {e}")))?;
    write_atomic(path, |w| {
        w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))
    })
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Data(format!("{}: bad json: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::rng_from;

    fn sample_params(seed: u64) -> ParamSet {
        let mut rng = rng_from(seed, "storage", 0);
        let mut p = ParamSet::new();
        p.insert("b.mat", Tensor::randn(vec![7, 3], 1.0, &mut rng));
        p.insert("a.vec", Tensor::randn(vec![5], 0.1, &mut rng));
        p.insert("c.scalar", Tensor::scalar(-0.25));
        p.set_frozen("b.mat", true).unwrap();
        p
    }

    fn meta() -> CheckpointMeta {
        CheckpointMeta {
            config: serde_json::json!({"d_x": 8}),
            seed: 42,
            iteration: 3,
            wall_clock_secs: 1.5,
        }
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let params = sample_params(1);
        save_checkpoint(&path, &params, &meta()).unwrap();
        let (loaded, m) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);
        assert_eq!(m.seed, 42);
        assert!(loaded.is_frozen("b.mat"));
        assert!(!loaded.is_frozen("a.vec"));
    }

    #[test]
    fn truncated_checkpoint_reports_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample_params(2), &meta()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "got {err}");
        assert!(err.to_string().contains("checksum") || err.to_string().contains("truncated"));
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample_params(3), &meta()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "got {err}");
    }

    #[test]
    fn unknown_version_is_a_migration_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &sample_params(4), &meta()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9; // version field
        // Restore checksum over the edited payload.
        let body_end = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_end]);
        bytes[body_end..].copy_from_slice(&digest);
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "got {err}");
    }

    #[test]
    fn checkpoint_size_tracks_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut rng = rng_from(5, "size", 0);
        let mut p = ParamSet::new();
        p.insert("w", Tensor::randn(vec![200, 150], 1.0, &mut rng));
        save_checkpoint(&path, &p, &meta()).unwrap();
        let size = fs::metadata(&path).unwrap().len() as f64;
        let expect = 8.0 * 200.0 * 150.0;
        assert!((size - expect).abs() / expect < 0.05, "size {size} vs {expect}");
    }

    fn sample_trajectory() -> Trajectory {
        let rewards = vec![0.0, 1.0, 1.0, 0.0];
        Trajectory::new(
            9,
            2,
            1,
            vec![0.0, 0.1, 1.0, 1.1, 2.0, 2.1, 3.0, 3.1],
            vec![0.5, -0.5, 0.25, 0.0],
            rewards,
            vec![0, 1, 2, 3],
        )
        .unwrap()
    }

    #[test]
    fn trajectory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.traj");
        let t = sample_trajectory();
        save_trajectory(&path, &t).unwrap();
        let loaded = load_trajectory(&path).unwrap();
        assert_eq!(loaded, t);
    }

    #[test]
    fn action_free_trajectory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("demo.traj");
        let mut t = sample_trajectory();
        t.actions.clear();
        save_trajectory(&path, &t).unwrap();
        let loaded = load_trajectory(&path).unwrap();
        assert!(!loaded.has_actions());
        assert!(loaded.to_demonstration(true).is_err());
    }

    #[test]
    fn reader_rejects_bad_rtg_column() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ep.traj");
        let mut t = sample_trajectory();
        save_trajectory(&path, &t).unwrap();
        // Forge a file with a broken rtg column by writing unchecked bytes.
        t.rewards_to_go[0] = 99.0;
        let header = TrajectoryHeader {
            task_id: t.task_id,
            len: t.len(),
            d_s: t.d_s,
            d_a: t.d_a,
            has_actions: true,
        };
        write_framed(&path, TRAJECTORY_MAGIC, TRAJECTORY_VERSION, &header, |w| {
            for i in 0..t.len() {
                for v in &t.states[i * t.d_s..(i + 1) * t.d_s] {
                    w.write_all(&v.to_le_bytes())?;
                }
                for v in &t.actions[i * t.d_a..(i + 1) * t.d_a] {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.write_all(&t.rewards[i].to_le_bytes())?;
                w.write_all(&t.rewards_to_go[i].to_le_bytes())?;
                w.write_all(&t.timesteps[i].to_le_bytes())?;
            }
            Ok(())
        })
        .unwrap();
        let err = load_trajectory(&path).unwrap_err();
        assert!(err.to_string().contains("suffix-sum"), "got {err}");
    }

    #[test]
    fn no_partial_files_on_write_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.bin");
        let result = write_atomic(&path, |_| Err(Error::Data("boom".into())));
        assert!(result.is_err());
        assert!(!path.exists());
        assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
    }
}
