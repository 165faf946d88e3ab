//! Checkpoint exchange through a shared directory.
//!
//! Layout: `root/round_{t}/global.ckpt` for broadcasts and
//! `root/round_{t}/client_{i}.inc` for increments. Every write goes to a
//! uniquely named temporary file in the same directory and is then renamed
//! over the target, so readers see either the old file or the new one.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

use super::wire::WireMessage;

/// What `get` does when the file is not there yet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReadMode {
    NonBlocking,
    Blocking { timeout: Duration, poll: Duration },
}

impl Default for ReadMode {
    fn default() -> Self {
        ReadMode::Blocking {
            timeout: Duration::from_secs(60),
            poll: Duration::from_millis(2),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FsExchange {
    root: PathBuf,
    mode: ReadMode,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl FsExchange {
    pub fn new(root: impl Into<PathBuf>, mode: ReadMode) -> Self {
        Self {
            root: root.into(),
            mode,
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn round_dir(&self, round: u64) -> PathBuf {
        self.root.join(format!("round_{round}"))
    }

    pub fn global_path(&self, round: u64) -> PathBuf {
        self.round_dir(round).join("global.ckpt")
    }

    pub fn increment_path(&self, round: u64, client_id: u64) -> PathBuf {
        self.round_dir(round).join(format!("client_{client_id}.inc"))
    }

    /// Stores a message at the path its kind and round dictate. Returns the
    /// number of bytes written.
    pub fn put(&self, msg: &WireMessage) -> Result<usize> {
        let path = match msg.kind {
            super::MessageKind::GlobalParams => self.global_path(msg.round),
            super::MessageKind::Increment => self.increment_path(msg.round, msg.client_id),
            other => return Err(Error::Protocol(format!("{other:?} messages are not checkpointed"))),
        };
        let bytes = msg.encode();
        write_atomic(&path, &bytes)?;
        Ok(bytes.len())
    }

    pub fn get_global(&self, round: u64, digest: u64) -> Result<WireMessage> {
        self.get(&self.global_path(round), digest)
    }

    pub fn get_increment(&self, round: u64, client_id: u64, digest: u64) -> Result<WireMessage> {
        self.get(&self.increment_path(round, client_id), digest)
    }

    fn get(&self, path: &Path, digest: u64) -> Result<WireMessage> {
        let bytes = match self.mode {
            ReadMode::NonBlocking => read_or_not_ready(path)?,
            ReadMode::Blocking { timeout, poll } => {
                let deadline = Instant::now() + timeout;
                loop {
                    match read_or_not_ready(path) {
                        Err(Error::NotReady(_)) if Instant::now() < deadline => thread::sleep(poll),
                        other => break other?,
                    }
                }
            }
        };
        let msg = WireMessage::decode(&bytes).map_err(|e| Error::CorruptCheckpoint {
            path: path.to_owned(),
            reason: e.to_string(),
        })?;
        if msg.schema_digest != digest {
            return Err(Error::CorruptCheckpoint {
                path: path.to_owned(),
                reason: format!("digest {:#018x}, expected {digest:#018x}", msg.schema_digest),
            });
        }
        Ok(msg)
    }
}

fn read_or_not_ready(path: &Path) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Err(Error::NotReady(path.to_owned())),
        Err(e) => Err(e.into()),
    }
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it into
/// place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("ckpt");
    let tmp = dir.join(format!(
        ".{name}.{}.{}.tmp",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_data()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}
