//! Shared JSON-lines record helpers, hashing and atomic file writes.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::Engine;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::sim::{ForceReading, Gripper, Image};
use crate::demo::{Action, Observation};

pub const FORMAT_VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Write `bytes` to `path` through a temporary file in the same directory
/// followed by a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Serialize a sequence of JSON values as one record per line.
pub fn to_jsonl(records: &[Value]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        serde_json::to_writer(&mut out, r).expect("json values serialize");
        out.push(b'\n');
    }
    out
}

/// Parse a JSON-lines file into objects, reporting the 0-based record index
/// of the first malformed line.
pub fn read_jsonl(path: &Path) -> Result<Vec<Map<String, Value>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(&line) {
            Ok(Value::Object(m)) => out.push(m),
            Ok(_) => return Err(Error::parse(i, "<record>", "expected a JSON object")),
            Err(e) => return Err(Error::parse(i, "<record>", e)),
        }
    }
    Ok(out)
}

pub fn field<T: DeserializeOwned>(rec: &Map<String, Value>, name: &str, index: usize) -> Result<T> {
    let v = rec
        .get(name)
        .ok_or_else(|| Error::parse(index, name, "missing field"))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::parse(index, name, e))
}

pub fn check_version(rec: &Map<String, Value>) -> Result<()> {
    let v: u32 = field(rec, "version", 0)?;
    if v != FORMAT_VERSION {
        return Err(Error::Version {
            found: v,
            expected: FORMAT_VERSION,
        });
    }
    Ok(())
}

pub fn check_kind(rec: &Map<String, Value>, index: usize, kind: &str) -> Result<()> {
    let k: String = field(rec, "kind", index)?;
    if k != kind {
        return Err(Error::parse(index, "kind", format!("expected `{kind}`, found `{k}`")));
    }
    Ok(())
}

pub fn encode_image(img: &Image) -> String {
    base64::engine::general_purpose::STANDARD.encode(&img.data)
}

pub fn decode_image(s: &str, width: usize, height: usize, index: usize, name: &str) -> Result<Image> {
    let data = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::parse(index, name, e))?;
    if data.len() != width * height * Image::CHANNELS {
        return Err(Error::parse(
            index,
            name,
            format!("expected {} bytes, found {}", width * height * Image::CHANNELS, data.len()),
        ));
    }
    Ok(Image { width, height, data })
}

pub fn action_value(a: &Action) -> Value {
    serde_json::json!({ "d": a.delta, "g": a.gripper.bit() })
}

pub fn parse_action(rec: &Map<String, Value>, index: usize) -> Result<Action> {
    let a: Map<String, Value> = field(rec, "a", index)?;
    let delta: Pose = field(&a, "d", index).map_err(|_| Error::parse(index, "a.d", "expected [dx, dy, dtheta]"))?;
    let g: u8 = field(&a, "g", index).map_err(|_| Error::parse(index, "a.g", "expected 0 or 1"))?;
    let gripper = Gripper::from_bit(g).ok_or_else(|| Error::parse(index, "a.g", "expected 0 or 1"))?;
    Ok(Action { delta, gripper })
}

/// A step record; `waypoint` is omitted in fused files.
pub fn step_value(waypoint: Option<&Pose>, obs: &Observation, action: &Action) -> Value {
    let mut m = Map::new();
    if let Some(w) = waypoint {
        m.insert("w".into(), serde_json::to_value(w).expect("pose"));
    }
    m.insert("img".into(), Value::String(encode_image(&obs.image)));
    m.insert("f".into(), serde_json::to_value(obs.force).expect("force"));
    m.insert("a".into(), action_value(action));
    Value::Object(m)
}

pub fn parse_observation(
    rec: &Map<String, Value>,
    index: usize,
    width: usize,
    height: usize,
) -> Result<Observation> {
    let img: String = field(rec, "img", index)?;
    let force: ForceReading = field(rec, "f", index)?;
    Ok(Observation {
        image: decode_image(&img, width, height, index, "img")?,
        force,
    })
}

pub fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}
