//! Magnitude thresholding with permanent masks, sparsity reports, and the
//! sparse model file.
//!
//! File layout (all integers little-endian):
//!
//! ```text
//! b"SPNN" | u32 version | u64 header_len | header JSON
//! per tensor, in parameter order: alive entries as (u64 flat index, f64 value)
//! ```
//!
//! The header holds the input shape, the layer list and, per tensor, its
//! shape and alive count, so the payload length is known before reading it.
//! Indices within a tensor strictly increase.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, SparseFormatError};
use crate::nn::{LayerSpec, Network};

const MAGIC: &[u8; 4] = b"SPNN";
const VERSION: u32 = 1;
const PREFIX: usize = 4 + 4 + 8;
const RECORD: usize = 16;

/// Which parameter entries are still alive. Once an entry is pruned it never
/// comes back: masks only ever lose entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneMask {
    alive: Vec<Vec<bool>>,
}

impl PruneMask {
    pub fn all_alive(net: &Network) -> Self {
        Self {
            alive: net.params().iter().map(|p| vec![true; p.len()]).collect(),
        }
    }

    /// Mask of the currently nonzero entries.
    pub fn from_nonzero(net: &Network) -> Self {
        Self {
            alive: net
                .params()
                .iter()
                .map(|p| p.data().iter().map(|&w| w != 0.0).collect())
                .collect(),
        }
    }

    pub fn tensor(&self, t: usize) -> &[bool] {
        &self.alive[t]
    }

    pub fn tensors(&self) -> usize {
        self.alive.len()
    }

    pub fn alive_count(&self) -> usize {
        self.alive.iter().flatten().filter(|&&a| a).count()
    }

    pub fn alive_in(&self, t: usize) -> usize {
        self.alive[t].iter().filter(|&&a| a).count()
    }

    pub fn check_matches(&self, net: &Network) -> Result<()> {
        let ok = self.alive.len() == net.params().len()
            && self.alive.iter().zip(net.params()).all(|(m, p)| m.len() == p.len());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "prune mask does not match the network parameters".into(),
            ))
        }
    }

    /// True when every entry alive in `self` is also alive in `earlier`.
    pub fn is_subset_of(&self, earlier: &PruneMask) -> bool {
        self.alive.len() == earlier.alive.len()
            && self
                .alive
                .iter()
                .zip(&earlier.alive)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| !x || y))
    }

    /// Zeroes every pruned entry of `net`.
    pub fn apply(&self, net: &mut Network) -> Result<()> {
        self.check_matches(net)?;
        for (p, m) in net.params_mut().iter_mut().zip(&self.alive) {
            for (w, &a) in p.data_mut().iter_mut().zip(m) {
                if !a {
                    *w = 0.0;
                }
            }
        }
        Ok(())
    }
}

/// Prunes every alive entry with `|w| < threshold`, zeroing it and clearing
/// its mask bit. Returns the number of newly pruned entries.
pub fn apply_threshold(net: &mut Network, mask: &mut PruneMask, threshold: f64) -> Result<usize> {
    if !(threshold.is_finite() && threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be >= 0, got {threshold}"
        )));
    }
    mask.check_matches(net)?;
    let mut pruned = 0;
    for (p, m) in net.params_mut().iter_mut().zip(&mut mask.alive) {
        for (w, a) in p.data_mut().iter_mut().zip(m.iter_mut()) {
            if *a && w.abs() < threshold {
                *a = false;
                pruned += 1;
            }
            if !*a {
                *w = 0.0;
            }
        }
    }
    Ok(pruned)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub name: String,
    pub total: usize,
    pub alive: usize,
    pub alive_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub layers: Vec<LayerSparsity>,
    pub total: usize,
    pub alive: usize,
    /// `total / alive`; `None` when nothing is left.
    pub ratio: Option<f64>,
    /// Bytes needed to store the alive weights as 32-bit floats.
    pub footprint_bytes: usize,
}

impl SparsityReport {
    /// Counts alive entries per layer (weights and bias together). Without a
    /// mask, nonzero entries are counted.
    pub fn new(net: &Network, mask: Option<&PruneMask>) -> Result<Self> {
        let owned;
        let mask = match mask {
            Some(m) => {
                m.check_matches(net)?;
                m
            }
            None => {
                owned = PruneMask::from_nonzero(net);
                &owned
            }
        };
        let layers: Vec<LayerSparsity> = net
            .groups()
            .iter()
            .map(|g| {
                let total = net.params()[g.weight].len() + net.params()[g.bias].len();
                let alive = mask.alive_in(g.weight) + mask.alive_in(g.bias);
                LayerSparsity {
                    name: g.name.clone(),
                    total,
                    alive,
                    alive_percent: 100.0 * alive as f64 / total as f64,
                }
            })
            .collect();
        let total: usize = layers.iter().map(|l| l.total).sum();
        let alive: usize = layers.iter().map(|l| l.alive).sum();
        Ok(Self {
            layers,
            total,
            alive,
            ratio: (alive > 0).then(|| total as f64 / alive as f64),
            footprint_bytes: 4 * alive,
        })
    }

    pub fn ratio_display(&self) -> String {
        match self.ratio {
            Some(r) => format!("{r:.1}x"),
            None => "inf".into(),
        }
    }
}

impl std::fmt::Display for SparsityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<8} {:>10} {:>10} {:>8}", "layer", "total", "alive", "alive%")?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<8} {:>10} {:>10} {:>7.2}%",
                l.name, l.total, l.alive, l.alive_percent
            )?;
        }
        writeln!(f, "{:<8} {:>10} {:>10}", "total", self.total, self.alive)?;
        write!(
            f,
            "compression {} ({} bytes as f32)",
            self.ratio_display(),
            self.footprint_bytes
        )
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    shape: Vec<usize>,
    alive: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHeader {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    tensors: Vec<TensorHeader>,
}

/// Encodes the alive entries of `net` into the sparse format.
pub fn encode_sparse(net: &Network, mask: &PruneMask) -> Result<Vec<u8>> {
    mask.check_matches(net)?;
    let header = FileHeader {
        input_shape: net.input_shape().to_vec(),
        layers: net.specs(),
        tensors: net
            .params()
            .iter()
            .enumerate()
            .map(|(t, p)| TensorHeader {
                shape: p.shape().to_vec(),
                alive: mask.alive_in(t),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREFIX + json.len() + RECORD * mask.alive_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (t, p) in net.params().iter().enumerate() {
        for (i, (&w, &a)) in p.data().iter().zip(mask.tensor(t)).enumerate() {
            if a {
                out.extend_from_slice(&(i as u64).to_le_bytes());
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    SparseFormatError::CorruptHeader(msg.into()).into()
}

/// Decodes a sparse model. Pruned entries come back as zeros with their mask
/// bits cleared.
pub fn decode_sparse(bytes: &[u8]) -> Result<(Network, PruneMask)> {
    if bytes.len() < PREFIX {
        return Err(corrupt(format!("file is {} bytes, shorter than the prefix", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(PREFIX))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt(format!("header length {header_len} exceeds the file")))?;
    let header: FileHeader = serde_json::from_slice(&bytes[PREFIX..header_end])
        .map_err(|e| corrupt(format!("header JSON: {e}")))?;
    let mut net = Network::new(header.input_shape, header.layers)
        .map_err(|e| corrupt(format!("architecture: {e}")))?;
    if header.tensors.len() != net.params().len() {
        return Err(corrupt(format!(
            "{} tensors listed, architecture has {}",
            header.tensors.len(),
            net.params().len()
        )));
    }
    for (t, (th, p)) in header.tensors.iter().zip(net.params()).enumerate() {
        if th.shape != p.shape() {
            return Err(corrupt(format!(
                "tensor {t} shape {:?} does not match architecture {:?}",
                th.shape,
                p.shape()
            )));
        }
        if th.alive > p.len() {
            return Err(corrupt(format!(
                "tensor {t} lists {} alive entries of {}",
                th.alive,
                p.len()
            )));
        }
    }

    let mut pos = header_end;
    let mut alive = Vec::with_capacity(header.tensors.len());
    let mut params = Vec::with_capacity(header.tensors.len());
    for (t, th) in header.tensors.iter().enumerate() {
        let need = th.alive * RECORD;
        let have = bytes.len() - pos;
        if have < need {
            return Err(SparseFormatError::Truncated {
                tensor: t,
                expected: need,
                found: have,
            }
            .into());
        }
        let len: usize = th.shape.iter().product();
        let mut data = vec![0.0; len];
        let mut m = vec![false; len];
        let mut previous: Option<u64> = None;
        for rec in bytes[pos..pos + need].chunks_exact(RECORD) {
            let index = u64::from_le_bytes(rec[..8].try_into().unwrap());
            let value = f64::from_le_bytes(rec[8..].try_into().unwrap());
            if let Some(prev) = previous {
                if index <= prev {
                    return Err(SparseFormatError::NonMonotone {
                        tensor: t,
                        previous: prev,
                        index,
                    }
                    .into());
                }
            }
            if index >= len as u64 {
                return Err(SparseFormatError::IndexOutOfRange { tensor: t, index, len }.into());
            }
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("sparse tensor {t} entry {index}")));
            }
            data[index as usize] = value;
            m[index as usize] = true;
            previous = Some(index);
        }
        pos += need;
        params.push(crate::Tensor::from_parts(th.shape.clone(), data));
        alive.push(m);
    }
    if pos != bytes.len() {
        return Err(SparseFormatError::TrailingBytes(bytes.len() - pos).into());
    }
    net.set_params(params)?;
    Ok((net, PruneMask { alive }))
}

/// Writes the sparse model to `path` and returns the byte count.
pub fn save_sparse(path: &Path, net: &Network, mask: &PruneMask) -> Result<usize> {
    let bytes = encode_sparse(net, mask)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

pub fn load_sparse(path: &Path) -> Result<(Network, PruneMask)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sparse(&bytes)
}
