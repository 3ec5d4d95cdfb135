//! Multi-tensor checkpoint files: a text header naming each parameter
//! tensor, its role, and frozen flag, followed by the flat binary tensor
//! containers in header order.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use crate::tensor::{read_tensor, write_tensor, Tensor, TensorError};

const HEADER_MAGIC: &str = "OCKP v1";
const HEADER_END: &str = "end";

pub struct CheckpointEntry {
    pub name: String,
    pub role: String,
    pub frozen: bool,
    pub tensor: Tensor,
}

#[derive(Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<CheckpointEntry>,
}

impl Checkpoint {
    pub fn new() -> Checkpoint {
        Checkpoint::default()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(|s| s.as_str())
    }

    pub fn push(&mut self, name: &str, role: &str, frozen: bool, tensor: Tensor) {
        self.entries.push(CheckpointEntry {
            name: name.to_string(),
            role: role.to_string(),
            frozen,
            tensor,
        });
    }

    pub fn get(&self, name: &str) -> Option<&CheckpointEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, TensorError> {
        let mut out = Vec::new();
        out.extend_from_slice(HEADER_MAGIC.as_bytes());
        out.push(b'\n');
        for (k, v) in &self.meta {
            out.extend_from_slice(format!("meta {k} {v}\n").as_bytes());
        }
        for e in &self.entries {
            out.extend_from_slice(
                format!("tensor {} {} {}\n", e.name, e.role, if e.frozen { 1 } else { 0 }).as_bytes(),
            );
        }
        out.extend_from_slice(HEADER_END.as_bytes());
        out.push(b'\n');
        for e in &self.entries {
            write_tensor(&mut out, &e.tensor)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint, TensorError> {
        let bad = |msg: String| TensorError::Container(msg);
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<String, TensorError> {
            let rest = &bytes[*pos..];
            let nl = rest
                .iter()
                .position(|b| *b == b'\n')
                .ok_or_else(|| bad("truncated header".into()))?;
            let line = String::from_utf8(rest[..nl].to_vec())
                .map_err(|_| bad("non-utf8 header".into()))?;
            *pos += nl + 1;
            Ok(line)
        };

        if next_line(&mut pos)? != HEADER_MAGIC {
            return Err(bad("missing checkpoint magic".into()));
        }
        let mut ckpt = Checkpoint::new();
        let mut pending: Vec<(String, String, bool)> = Vec::new();
        loop {
            let line = next_line(&mut pos)?;
            if line == HEADER_END {
                break;
            }
            let mut parts = line.splitn(2, ' ');
            match parts.next() {
                Some("meta") => {
                    let rest = parts.next().unwrap_or("");
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    ckpt.meta.insert(k.to_string(), v.to_string());
                }
                Some("tensor") => {
                    let rest = parts.next().unwrap_or("");
                    let fields: Vec<&str> = rest.split(' ').collect();
                    if fields.len() != 3 {
                        return Err(bad(format!("bad tensor line `{line}`")));
                    }
                    pending.push((
                        fields[0].to_string(),
                        fields[1].to_string(),
                        fields[2] == "1",
                    ));
                }
                other => return Err(bad(format!("unexpected header token {other:?}"))),
            }
        }
        let mut reader = &bytes[pos..];
        for (name, role, frozen) in pending {
            let tensor = read_tensor(&mut reader)?;
            ckpt.entries.push(CheckpointEntry {
                name,
                role,
                frozen,
                tensor,
            });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), TensorError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, TensorError> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }

    /// Digest over the serialized checkpoint; parameter-content audits.
    pub fn content_hash(&self) -> Result<String, TensorError> {
        Ok(crate::data::hex_sha256(&self.to_bytes()?))
    }
}
