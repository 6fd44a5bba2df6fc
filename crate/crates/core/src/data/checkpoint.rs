//! Little-endian layout: `SPKG`, u32 version, u32 config length, UTF-8 TOML
//! config, u32 layer count, then per layer u32 rank, rank x u32 dims, f32
//! weights and f32 biases. The bias count follows from the layer spec.

use std::path::Path;

use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::network::{Layer, LayerParams, Network};
use crate::topology::Topology;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SPKG";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Writes `net` with a snapshot of `cfg`. The snapshot's thresholds are taken
/// from `net` so that loading rebuilds the same network.
pub fn save_checkpoint(net: &Network, cfg: &NetworkConfig, path: &Path) -> Result<()> {
    let topo = cfg.parsed_topology()?;
    if topo != net.topology() {
        return Err(Error::Shape(format!(
            "config topology {} does not describe the network {}",
            topo,
            net.topology()
        )));
    }
    let mut snapshot = cfg.clone();
    snapshot.theta_ff = net.theta_ff;
    snapshot.theta_bp = net.theta_bp;
    let text = snapshot.to_toml_string();

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(net.layers.len() as u32).to_le_bytes());
    for layer in &net.layers {
        let dims = layer.spec.weight_dims();
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in layer.params.weights.iter().chain(&layer.params.biases) {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let out = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            None => Err(Error::format(
                self.path,
                self.bytes.len() as u64,
                format!("truncated while reading {what} at byte {}", self.pos),
            )),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let b = self.take(n * 4, what)?;
        Ok(b
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

/// Reads a checkpoint and rebuilds the network described by its config.
pub fn load_checkpoint(path: &Path) -> Result<(NetworkConfig, Network)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected \"SPKG\""));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            4,
            format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let len = r.u32("config length")? as usize;
    let cfg_at = r.pos;
    let text = std::str::from_utf8(r.take(len, "config text")?)
        .map_err(|_| Error::format(path, cfg_at as u64, "config text is not UTF-8"))?;
    let cfg = NetworkConfig::from_toml_str(text).map_err(|e| Error::format(path, cfg_at as u64, e.to_string()))?;
    let topo = cfg
        .parsed_topology()
        .map_err(|e| Error::format(path, cfg_at as u64, e.to_string()))?;

    let count_at = r.pos;
    let count = r.u32("layer count")? as usize;
    if count != topo.layers.len() {
        return Err(Error::format(
            path,
            count_at as u64,
            format!("{count} layers stored but the config describes {}", topo.layers.len()),
        ));
    }
    let mut layers = Vec::with_capacity(count);
    for (i, spec) in topo.layers.iter().enumerate() {
        let header_at = r.pos;
        let rank = r.u32("layer rank")? as usize;
        if rank > 8 {
            return Err(Error::format(path, header_at as u64, format!("layer {i} has rank {rank}")));
        }
        let dims = (0..rank)
            .map(|_| r.u32("layer dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if dims != spec.weight_dims() {
            return Err(Error::format(
                path,
                header_at as u64,
                format!("layer {i} stores dims {dims:?} but the config implies {:?}", spec.weight_dims()),
            ));
        }
        let weights = r.f32s(spec.weight_count(), "weights")?;
        let biases = r.f32s(spec.bias_count(), "biases")?;
        layers.push(Layer {
            spec: spec.clone(),
            params: LayerParams {
                weights,
                biases,
                trainable: spec.trainable(),
            },
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, r.pos as u64, "trailing bytes after the last layer"));
    }
    let net = Network::from_layers(topo.input, layers, cfg.theta_ff, cfg.theta_bp)?;
    Ok((cfg, net))
}

/// Loads a checkpoint and checks that it has the expected topology.
pub fn load_checkpoint_for(path: &Path, expected: &Topology) -> Result<(NetworkConfig, Network)> {
    let (cfg, net) = load_checkpoint(path)?;
    let found = net.topology();
    if &found != expected {
        return Err(Error::Shape(format!(
            "checkpoint {} holds topology {found}, expected {expected}",
            path.display()
        )));
    }
    Ok((cfg, net))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(topology: &str) -> NetworkConfig {
        NetworkConfig {
            topology: topology.into(),
            theta_ff: 0.75,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.spkg");
        let c = cfg("28x28-4C5-P2-12-10");
        let net = Network::from_config(&c).unwrap();
        save_checkpoint(&net, &c, &path).unwrap();
        let (c2, back) = load_checkpoint(&path).unwrap();
        assert_eq!(c2, c);
        for (a, b) in net.layers.iter().zip(&back.layers) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.params.weights), bits(&b.params.weights));
            assert_eq!(bits(&a.params.biases), bits(&b.params.biases));
        }
        assert_eq!(back, net);
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.spkg");
        let c = cfg("4-3-2");
        save_checkpoint(&Network::from_config(&c).unwrap(), &c, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_and_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.spkg");
        let c = cfg("4-3-2");
        save_checkpoint(&Network::from_config(&c).unwrap(), &c, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
        let mut v = bytes.clone();
        v[4] = 9;
        std::fs::write(&path, v).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn different_topology_is_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.spkg");
        let c = cfg("4-3-2");
        save_checkpoint(&Network::from_config(&c).unwrap(), &c, &path).unwrap();
        let other = cfg("4-5-2").parsed_topology().unwrap();
        assert!(matches!(load_checkpoint_for(&path, &other), Err(Error::Shape(_))));
    }
}
