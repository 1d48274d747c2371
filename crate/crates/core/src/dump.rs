//! Self-describing prompt-graph dump files for offline inspection.
//!
//! Layout: magic `PGPD`, a little-endian u32 version, a length-prefixed JSON
//! header describing every table, then the binary blocks per data graph
//! (node ids and edges as little-endian u64, feature rows and retained
//! masked rows as little-endian IEEE-754 doubles).

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Level;
use crate::prompt::{AugRecord, DataGraph, PromptGraph, TaskGraph};

const MAGIC: &[u8; 4] = b"PGPD";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct DataGraphMeta {
    num_local: usize,
    num_edges: usize,
    num_dropped: usize,
    num_masked: usize,
    input_local: Vec<usize>,
    level: Level,
}

#[derive(Serialize, Deserialize)]
struct Header {
    level: Level,
    d_in: usize,
    label_seed: u64,
    class_keys: Vec<u64>,
    task: TaskGraph,
    data_graphs: Vec<DataGraphMeta>,
}

fn write_u64s(w: &mut impl Write, values: impl IntoIterator<Item = u64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_f64s(w: &mut impl Write, values: impl IntoIterator<Item = f64>) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Writes a prompt graph to a dump file.
pub fn write_prompt_dump(path: &Path, pg: &PromptGraph) -> Result<()> {
    let d_in = pg
        .data_graphs
        .first()
        .map(|dg| dg.features.ncols())
        .unwrap_or(0);
    let header = Header {
        level: pg.level,
        d_in,
        label_seed: pg.label_seed,
        class_keys: pg.class_keys.clone(),
        task: pg.task_graph.clone(),
        data_graphs: pg
            .data_graphs
            .iter()
            .map(|dg| DataGraphMeta {
                num_local: dg.num_local(),
                num_edges: dg.local_edges.len(),
                num_dropped: dg.aug.dropped.len(),
                num_masked: dg.masked_original.len(),
                input_local: dg.input_local.clone(),
                level: dg.level,
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for dg in &pg.data_graphs {
        write_u64s(&mut file, dg.local_nodes.iter().map(|&v| v as u64))?;
        for &(u, r, v) in &dg.local_edges {
            write_u64s(&mut file, [u as u64, r as u64, v as u64])?;
        }
        write_f64s(&mut file, dg.features.iter().copied())?;
        write_u64s(&mut file, dg.aug.dropped.iter().map(|&v| v as u64))?;
        for (local, row) in &dg.masked_original {
            write_u64s(&mut file, [*local as u64])?;
            write_f64s(&mut file, row.iter().copied())?;
        }
    }
    Ok(())
}

/// Reads a dump file back into a prompt graph. Structural invariants are
/// checked by the caller via [`PromptGraph::validate`].
pub fn read_prompt_dump(path: &Path) -> Result<PromptGraph> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Load("dump truncated before magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Load("not a prompt dump (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)
        .map_err(|_| Error::Load("dump truncated before version".into()))?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Load(format!(
            "dump version {version} unsupported (expected {VERSION})"
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| Error::Load("dump truncated before header".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|_| Error::Load("dump truncated inside header".into()))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Load(format!("corrupt dump header: {e}")))?;

    let mut read_u64 = |file: &mut dyn Read| -> Result<u64> {
        let mut buf = [0u8; 8];
        file.read_exact(&mut buf)
            .map_err(|_| Error::Load("dump truncated inside tables".into()))?;
        Ok(u64::from_le_bytes(buf))
    };
    let mut data_graphs = Vec::with_capacity(header.data_graphs.len());
    for meta in &header.data_graphs {
        let mut local_nodes = Vec::with_capacity(meta.num_local);
        for _ in 0..meta.num_local {
            local_nodes.push(read_u64(&mut file)? as usize);
        }
        let mut local_edges = Vec::with_capacity(meta.num_edges);
        for _ in 0..meta.num_edges {
            let u = read_u64(&mut file)? as usize;
            let r = read_u64(&mut file)? as usize;
            let v = read_u64(&mut file)? as usize;
            local_edges.push((u, r, v));
        }
        let mut feats = vec![0.0f64; meta.num_local * header.d_in];
        for x in feats.iter_mut() {
            let mut buf = [0u8; 8];
            file.read_exact(&mut buf)
                .map_err(|_| Error::Load("dump truncated inside features".into()))?;
            *x = f64::from_le_bytes(buf);
        }
        let features = Array2::from_shape_vec((meta.num_local, header.d_in), feats)
            .map_err(|e| Error::Load(e.to_string()))?;
        let mut dropped = std::collections::BTreeSet::new();
        for _ in 0..meta.num_dropped {
            dropped.insert(read_u64(&mut file)? as usize);
        }
        let mut masked_original = Vec::with_capacity(meta.num_masked);
        let mut masked = std::collections::BTreeSet::new();
        for _ in 0..meta.num_masked {
            let local = read_u64(&mut file)? as usize;
            let mut row = vec![0.0f64; header.d_in];
            for x in row.iter_mut() {
                let mut buf = [0u8; 8];
                file.read_exact(&mut buf)
                    .map_err(|_| Error::Load("dump truncated inside masked rows".into()))?;
                *x = f64::from_le_bytes(buf);
            }
            if local >= meta.num_local {
                return Err(Error::Load("masked row index out of range".into()));
            }
            masked.insert(local_nodes[local]);
            masked_original.push((local, row));
        }
        data_graphs.push(DataGraph {
            local_nodes,
            features,
            local_edges,
            input_local: meta.input_local.clone(),
            level: meta.level,
            aug: AugRecord { dropped, masked },
            masked_original,
        });
    }
    Ok(PromptGraph {
        data_graphs,
        task_graph: header.task,
        level: header.level,
        label_seed: header.label_seed,
        class_keys: header.class_keys,
        class_features: None,
    })
}
