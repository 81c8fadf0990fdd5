//! Binary network checkpoints.
//!
//! Layout: the magic `TSNN`, a format version byte, a little-endian `u32`
//! length followed by the layer stack as JSON, then every dense layer's
//! weights and biases as little-endian `f64` in [`Network::params_flat`] order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network};

pub const MAGIC: &[u8; 4] = b"TSNN";
pub const FORMAT_VERSION: u8 = 1;

pub fn encode(network: &Network) -> Result<Vec<u8>> {
    let layers = serde_json::to_vec(network.layers())?;
    let params = network.params_flat();
    let mut out = Vec::with_capacity(9 + layers.len() + 8 * params.len());
    out.extend_from_slice(MAGIC);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    out.extend_from_slice(&layers);
    for p in params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Network> {
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "not a network checkpoint"));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {}", bytes[4])));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let body = &bytes[9..];
    if body.len() < len {
        return Err(Error::format(path, "truncated layer header"));
    }
    let layers: Vec<LayerSpec> = serde_json::from_slice(&body[..len])?;
    let mut network = Network::zeros(layers)?;
    let raw = &body[len..];
    if raw.len() != 8 * network.num_params() {
        return Err(Error::format(
            path,
            format!(
                "expected {} parameter bytes, found {}",
                8 * network.num_params(),
                raw.len()
            ),
        ));
    }
    let params: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    network.set_params_flat(&params)?;
    Ok(network)
}

pub fn save(network: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(network)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    let path = path.as_ref();
    decode(&fs::read(path)?, path)
}
