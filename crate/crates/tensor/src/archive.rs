use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use thiserror::Error;

use crate::graph::dyn_shape;

const MAGIC: &[u8; 8] = b"VLSMARC1";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a tensor archive: {0}")]
    BadMagic(String),
    #[error("malformed archive header: {0}")]
    Header(String),
    #[error("archive is missing tensor {0}")]
    MissingTensor(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ArchiveError + '_ {
    move |source| ArchiveError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// A loaded archive: arbitrary JSON metadata plus named f32 tensors.
pub struct TensorArchive {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, ArrayD<f32>>,
}

impl TensorArchive {
    pub fn tensor(&self, name: &str) -> Result<&ArrayD<f32>, ArchiveError> {
        self.tensors
            .get(name)
            .ok_or_else(|| ArchiveError::MissingTensor(name.to_string()))
    }
}

/// Write an archive: magic, u64 header length, JSON header, f32 LE data blob.
pub fn save_archive<'a, I>(
    path: &Path,
    meta: &serde_json::Value,
    tensors: I,
) -> Result<(), ArchiveError>
where
    I: IntoIterator<Item = (&'a str, &'a ArrayD<f32>)>,
{
    let mut entries = Vec::new();
    let mut data: Vec<f32> = Vec::new();
    for (name, arr) in tensors {
        let offset = data.len() as u64;
        match arr.as_slice() {
            Some(s) => data.extend_from_slice(s),
            None => data.extend(arr.iter().copied()),
        }
        entries.push(serde_json::json!({
            "name": name,
            "shape": arr.shape(),
            "offset": offset,
            "len": arr.len() as u64,
        }));
    }
    let header = serde_json::json!({ "meta": meta, "tensors": entries });
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");

    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io_err(path))?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(io_err(path))?;
    w.write_all(&header_bytes).map_err(io_err(path))?;
    for v in &data {
        w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn load_archive(path: &Path) -> Result<TensorArchive, ArchiveError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(ArchiveError::BadMagic(path.display().to_string()));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes).map_err(io_err(path))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(io_err(path))?;
    let header: serde_json::Value = serde_json::from_slice(&header_bytes)
        .map_err(|e| ArchiveError::Header(e.to_string()))?;

    let mut raw = Vec::new();
    r.read_to_end(&mut raw).map_err(io_err(path))?;
    if raw.len() % 4 != 0 {
        return Err(ArchiveError::Header("data blob not f32 aligned".into()));
    }
    let data: Vec<f32> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let entries = header
        .get("tensors")
        .and_then(|t| t.as_array())
        .ok_or_else(|| ArchiveError::Header("missing tensors list".into()))?;
    let mut tensors = BTreeMap::new();
    for e in entries {
        let name = e
            .get("name")
            .and_then(|v| v.as_str())
            .ok_or_else(|| ArchiveError::Header("tensor entry missing name".into()))?;
        let shape: Vec<usize> = e
            .get("shape")
            .and_then(|v| v.as_array())
            .ok_or_else(|| ArchiveError::Header(format!("{name}: missing shape")))?
            .iter()
            .map(|v| v.as_u64().unwrap_or(0) as usize)
            .collect();
        let offset = e.get("offset").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let len = e.get("len").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        if offset + len > data.len() || shape.iter().product::<usize>() != len {
            return Err(ArchiveError::Header(format!("{name}: bad extent")));
        }
        let arr = ArrayD::from_shape_vec(dyn_shape(&shape), data[offset..offset + len].to_vec())
            .map_err(|e| ArchiveError::Header(format!("{name}: {e}")))?;
        tensors.insert(name.to_string(), arr);
    }
    let meta = header.get("meta").cloned().unwrap_or(serde_json::Value::Null);
    Ok(TensorArchive { meta, tensors })
}
