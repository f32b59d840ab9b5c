//! Binary weight files.
//!
//! Layout (little endian): magic, format version (u32), length-prefixed JSON
//! architecture, layer count (u64), then per layer `rows, cols, groups` (u64),
//! the prefactor (f64), a bias flag (u8), row-major weights and the bias.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{ArchSpec, Layer, Network};
use crate::error::{Result, RhmError};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"RHMW";
pub const WEIGHTS_VERSION: u32 = 1;

pub fn write_weights(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(&WEIGHTS_MAGIC)?;
    out.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    let arch = serde_json::to_vec(&net.arch)?;
    out.write_all(&(arch.len() as u64).to_le_bytes())?;
    out.write_all(&arch)?;
    out.write_all(&(net.layers.len() as u64).to_le_bytes())?;
    for layer in &net.layers {
        let (rows, cols) = layer.weight.dim();
        for n in [rows, cols, layer.groups] {
            out.write_all(&(n as u64).to_le_bytes())?;
        }
        out.write_all(&layer.prefactor.to_le_bytes())?;
        out.write_all(&[layer.bias.is_some() as u8])?;
        for &w in layer.weight.iter() {
            out.write_all(&w.to_le_bytes())?;
        }
        if let Some(b) = &layer.bias {
            for &x in b {
                out.write_all(&x.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<Network> {
    let mut input = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut input, &mut magic)?;
    if magic != WEIGHTS_MAGIC {
        return Err(RhmError::WeightsFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_array(&mut input)?);
    if version != WEIGHTS_VERSION {
        return Err(RhmError::WeightsFormat(format!("unsupported version {version}")));
    }
    let arch_len = read_len(&mut input, 1 << 20)?;
    let mut arch_bytes = vec![0u8; arch_len];
    read_exact(&mut input, &mut arch_bytes)?;
    let arch: ArchSpec = serde_json::from_slice(&arch_bytes)?;
    arch.validate()?;
    let num_layers = read_len(&mut input, 1 << 16)?;
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let rows = read_len(&mut input, 1 << 32)?;
        let cols = read_len(&mut input, 1 << 32)?;
        let groups = read_len(&mut input, 1 << 32)?;
        let prefactor = f64::from_le_bytes(read_array(&mut input)?);
        let [flag] = read_array::<1>(&mut input)?;
        let n = rows
            .checked_mul(cols)
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| RhmError::WeightsFormat("layer too large".into()))?;
        let weight = Array2::from_shape_vec((rows, cols), read_f64s(&mut input, n)?)
            .map_err(|e| RhmError::WeightsFormat(e.to_string()))?;
        let bias = match flag {
            0 => None,
            1 => Some(Array1::from(read_f64s(&mut input, rows)?)),
            other => return Err(RhmError::WeightsFormat(format!("bad bias flag {other}"))),
        };
        layers.push(Layer {
            weight,
            bias,
            prefactor,
            groups,
        });
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(RhmError::WeightsFormat(format!("{} trailing bytes", rest.len())));
    }
    Network::from_layers(arch, layers)
}

fn read_exact(input: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => RhmError::WeightsFormat("truncated file".into()),
        _ => RhmError::Io(e),
    })
}

fn read_array<const N: usize>(input: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(input, &mut buf)?;
    Ok(buf)
}

fn read_len(input: &mut impl Read, max: u64) -> Result<usize> {
    let n = u64::from_le_bytes(read_array(input)?);
    if n > max {
        return Err(RhmError::WeightsFormat(format!("implausible length {n}")));
    }
    Ok(n as usize)
}

fn read_f64s(input: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    read_exact(input, &mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}
