//! Tensor archive: a text manifest followed by raw little-endian `f32` data.
//!
//! ```text
//! LPTN 1
//! kind train_state
//! meta step 200
//! tensor generator.low_net.expand.weight 64x3x1x1 0 768
//! ...
//! checksum sha256 <hex>
//! end
//! <payload>
//! ```
//!
//! Offsets and lengths are in bytes relative to the payload start. The
//! checksum covers every manifest byte before the `checksum` line plus the
//! whole payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &str = "LPTN";
pub const VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Archive {
    pub kind: String,
    pub meta: Vec<(String, String)>,
    pub tensors: IndexMap<String, Tensor>,
}

fn check_token(what: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
        return Err(Error::invalid("archive", format!("{what} `{s}` must be non-empty without whitespace")));
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn parse_shape(s: &str) -> Option<Shape> {
    let dims: Vec<usize> = s.split('x').map(|d| d.parse().ok()).collect::<Option<_>>()?;
    match dims[..] {
        [n, c, h, w] => Some(Shape::new(n, c, h, w)),
        _ => None,
    }
}

impl Archive {
    pub fn new(kind: impl Into<String>) -> Self {
        Archive { kind: kind.into(), ..Default::default() }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        check_token("kind", &self.kind)?;
        let mut head = format!("{MAGIC} {VERSION}\nkind {}\n", self.kind);
        for (k, v) in &self.meta {
            check_token("meta key", k)?;
            if v.contains('\n') {
                return Err(Error::invalid("archive", format!("meta value for `{k}` contains a newline")));
            }
            head.push_str(&format!("meta {k} {v}\n"));
        }
        let mut payload = Vec::new();
        for (name, t) in &self.tensors {
            check_token("tensor name", name)?;
            let offset = payload.len();
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            head.push_str(&format!("tensor {name} {} {offset} {}\n", t.shape(), payload.len() - offset));
        }
        let mut hasher = Sha256::new();
        hasher.update(head.as_bytes());
        hasher.update(&payload);
        head.push_str(&format!("checksum sha256 {}\nend\n", hex(&hasher.finalize())));
        let mut out = head.into_bytes();
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses an archive; `path` is only used in error messages.
    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let next_line = |pos: &mut usize| -> Result<(usize, String)> {
            let start = *pos;
            let end = bytes[start..]
                .iter()
                .position(|&b| b == b'\n')
                .map(|i| start + i)
                .ok_or_else(|| Error::format(path, start as u64, "manifest ends without `end`"))?;
            let line = std::str::from_utf8(&bytes[start..end])
                .map_err(|_| Error::format(path, start as u64, "manifest line is not UTF-8"))?;
            *pos = end + 1;
            Ok((start, line.to_string()))
        };

        let (_, first) = next_line(&mut pos)?;
        match first.split_once(' ') {
            Some((MAGIC, VERSION)) => {}
            Some((MAGIC, found)) => {
                return Err(Error::Version {
                    path: path.display().to_string(),
                    found: found.to_string(),
                    expected: VERSION.to_string(),
                })
            }
            _ => return Err(Error::format(path, 0, "not an LPTN archive")),
        }
        let mut archive = Archive::default();
        let mut entries: Vec<(usize, String, Shape, usize, usize)> = Vec::new();
        let checksum;
        let checksum_at;
        loop {
            let (at, line) = next_line(&mut pos)?;
            let mut parts = line.splitn(2, ' ');
            let key = parts.next().unwrap_or("");
            let rest = parts.next().unwrap_or("");
            match key {
                "kind" => archive.kind = rest.to_string(),
                "meta" => {
                    let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                    archive.meta.push((k.to_string(), v.to_string()));
                }
                "tensor" => {
                    let f: Vec<&str> = rest.split(' ').collect();
                    let bad = || Error::format(path, at as u64, format!("malformed tensor entry `{line}`"));
                    if f.len() != 4 {
                        return Err(bad());
                    }
                    let shape = parse_shape(f[1]).ok_or_else(bad)?;
                    let offset: usize = f[2].parse().map_err(|_| bad())?;
                    let len: usize = f[3].parse().map_err(|_| bad())?;
                    entries.push((at, f[0].to_string(), shape, offset, len));
                }
                "checksum" => {
                    let hexsum = rest
                        .strip_prefix("sha256 ")
                        .ok_or_else(|| Error::format(path, at as u64, "only sha256 checksums are supported"))?;
                    checksum = hexsum.to_string();
                    checksum_at = at;
                    break;
                }
                _ => return Err(Error::format(path, at as u64, format!("unexpected manifest line `{line}`"))),
            }
        }
        let (end_at, end) = next_line(&mut pos)?;
        if end != "end" {
            return Err(Error::format(path, end_at as u64, "expected `end` after the checksum"));
        }
        let payload = &bytes[pos..];
        let mut hasher = Sha256::new();
        hasher.update(&bytes[..checksum_at]);
        hasher.update(payload);
        let found = hex(&hasher.finalize());
        if found != checksum {
            return Err(Error::Checksum { path: path.display().to_string(), expected: checksum, found });
        }

        let mut cursor = 0usize;
        for (at, name, shape, offset, len) in entries {
            let bad = |reason: String| Error::format(path, at as u64, format!("tensor `{name}`: {reason}"));
            if len != shape.numel() * 4 {
                return Err(bad(format!("length {len} does not match shape {shape}")));
            }
            if offset < cursor {
                return Err(bad("overlaps the previous tensor".into()));
            }
            if offset + len > payload.len() {
                return Err(bad(format!("extends past the payload ({} bytes)", payload.len())));
            }
            cursor = offset + len;
            let data = payload[offset..offset + len]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if archive.tensors.insert(name.clone(), Tensor::from_vec_unchecked(shape, data)).is_some() {
                return Err(bad("appears twice".into()));
            }
        }
        Ok(archive)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }
}
