//! On-disk formats: the `M272` motion file and the JSON-lines manifest.
//!
//! Motion file layout: magic `M272`, u32 version, u32 fps, u32 joint count,
//! u32 frame count, then `F * (8+12N)` little-endian f32 features.

use crate::error::{Error, Result};
use crate::repr::MotionSequence;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"M272";
const VERSION: u32 = 1;

pub fn write_motion(path: &Path, m: &MotionSequence) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + m.data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.fps.round() as u32).to_le_bytes());
    buf.extend_from_slice(&(m.joints as u32).to_le_bytes());
    buf.extend_from_slice(&(m.frames() as u32).to_le_bytes());
    for v in &m.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_motion(path: &Path) -> Result<MotionSequence> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_motion(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_motion(bytes: &[u8]) -> Result<MotionSequence> {
    if bytes.len() < 20 {
        return Err(Error::Format("truncated header".into()));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let fps = u32_at(8) as f32;
    let joints = u32_at(12) as usize;
    let frames = u32_at(16) as usize;
    let dim = 8 + 12 * joints;
    let need = 20 + frames * dim * 4;
    if bytes.len() != need {
        return Err(Error::Format(format!("payload is {} bytes, expected {need}", bytes.len())));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(MotionSequence { fps, joints, data })
}

/// One manifest record per sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub motion_path: String,
    pub caption: String,
    pub family: super::families::MotionKind,
    pub params: super::families::MotionParams,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::families::{MotionKind, MotionParams};

    #[test]
    fn motion_roundtrip_is_bit_exact() {
        let m = MotionSequence { fps: 30.0, joints: 22, data: (0..272 * 3).map(|i| (i as f32).sin()).collect() };
        let dir = std::env::temp_dir().join("motley_io_test");
        let p = dir.join("a.m272");
        write_motion(&p, &m).unwrap();
        let back = read_motion(&p).unwrap();
        assert_eq!(m, back);
        assert_eq!(back.fps, 30.0);
        assert_eq!(back.joints, 22);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupted_magic_is_a_format_error() {
        let m = MotionSequence { fps: 30.0, joints: 22, data: vec![0.0; 272] };
        let dir = std::env::temp_dir().join("motley_io_test2");
        let p = dir.join("b.m272");
        write_motion(&p, &m).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        assert!(matches!(parse_motion(&bytes), Err(Error::Format(_))));
        // truncated payload
        bytes[0] = b'M';
        bytes.pop();
        assert!(matches!(parse_motion(&bytes), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn manifest_roundtrip() {
        let recs = vec![ManifestRecord {
            motion_path: "motions/000.m272".into(),
            caption: "a person walks forward slowly".into(),
            family: MotionKind::Walk,
            params: MotionParams { speed: 0.9, duration_s: 3.0, ..Default::default() },
            split: Split::Train,
        }];
        let dir = std::env::temp_dir().join("motley_io_test3");
        let p = dir.join("manifest.jsonl");
        write_manifest(&p, &recs).unwrap();
        let back = read_manifest(&p).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].caption, recs[0].caption);
        assert_eq!(back[0].family, MotionKind::Walk);
        std::fs::remove_dir_all(&dir).ok();
    }
}
