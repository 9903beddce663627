//! Parameter checkpoint files.
//!
//! One file holds a plain-text manifest followed by raw little-endian
//! f64 data. Manifest lines:
//!
//! ```text
//! HRC-CKPT 1
//! seed <u64>
//! steps <u64>
//! config <hex>
//! adam_t <u64>            (only when optimizer state is included)
//! tensor <name> <rank> <dims...> <byte_offset> <byte_len>
//! data
//! <binary>
//! ```
//!
//! Byte offsets are relative to the first byte after the `data\n` line.
//! Tensors are written in sorted-name order, so identical stores produce
//! byte-identical files. Optimizer moments are stored under the reserved
//! prefixes `adam.m.` and `adam.v.`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::params::{Adam, ParamStore};
use crate::numerics::tensor::Tensor;

const MAGIC: &str = "HRC-CKPT 1";

pub struct CheckpointMeta {
    pub seed: u64,
    pub steps: u64,
    pub config_hash: String,
}

pub fn save(
    path: &Path,
    store: &ParamStore,
    adam: Option<&Adam>,
    config_hash: &str,
) -> Result<()> {
    let mut table: BTreeMap<String, &Tensor> = BTreeMap::new();
    for name in store.names() {
        table.insert(name.to_string(), store.get(name)?);
    }
    if let Some(opt) = adam {
        for (name, t) in &opt.m {
            table.insert(format!("adam.m.{name}"), t);
        }
        for (name, t) in &opt.v {
            table.insert(format!("adam.v.{name}"), t);
        }
    }

    let mut manifest = String::new();
    manifest.push_str(MAGIC);
    manifest.push('\n');
    manifest.push_str(&format!("seed {}\n", store.seed()));
    manifest.push_str(&format!("steps {}\n", store.steps_trained()));
    manifest.push_str(&format!("config {config_hash}\n"));
    if let Some(opt) = adam {
        manifest.push_str(&format!("adam_t {}\n", opt.t));
    }
    let mut offset = 0usize;
    for (name, t) in &table {
        let bytes = t.numel() * 8;
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!(
            "tensor {name} {} {} {offset} {bytes}\n",
            t.shape().len(),
            dims.join(" ")
        ));
        offset += bytes;
    }
    manifest.push_str("data\n");

    let mut file = std::fs::File::create(path)?;
    file.write_all(manifest.as_bytes())?;
    for t in table.values() {
        for v in t.data() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, Option<Adam>, CheckpointMeta)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;

    // Split manifest (text) from data at the "data\n" marker.
    let marker = b"\ndata\n";
    let pos = raw
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::Checkpoint("missing data marker".into()))?;
    let manifest = std::str::from_utf8(&raw[..pos + 1])
        .map_err(|_| Error::Checkpoint("manifest is not UTF-8".into()))?;
    let data = &raw[pos + marker.len()..];

    let mut lines = manifest.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut seed = 0u64;
    let mut steps = 0u64;
    let mut config_hash = String::new();
    let mut adam_t: Option<u64> = None;
    let mut tensors: Vec<(String, Vec<usize>, usize, usize)> = Vec::new();
    for line in lines {
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("seed") => {
                seed = parse_num(parts.next())?;
            }
            Some("steps") => {
                steps = parse_num(parts.next())?;
            }
            Some("config") => {
                config_hash = parts
                    .next()
                    .ok_or_else(|| Error::Checkpoint("config line truncated".into()))?
                    .to_string();
            }
            Some("adam_t") => {
                adam_t = Some(parse_num(parts.next())?);
            }
            Some("tensor") => {
                let name = parts
                    .next()
                    .ok_or_else(|| Error::Checkpoint("tensor line truncated".into()))?
                    .to_string();
                let rank: usize = parse_num(parts.next())? as usize;
                let mut dims = Vec::with_capacity(rank);
                for _ in 0..rank {
                    dims.push(parse_num(parts.next())? as usize);
                }
                let offset = parse_num(parts.next())? as usize;
                let len = parse_num(parts.next())? as usize;
                tensors.push((name, dims, offset, len));
            }
            Some(other) => {
                return Err(Error::Checkpoint(format!("unknown manifest line {other:?}")));
            }
            None => {}
        }
    }

    let mut store = ParamStore::new(seed);
    store.set_steps_trained(steps);
    let mut adam_m: BTreeMap<String, Tensor> = BTreeMap::new();
    let mut adam_v: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, dims, offset, len) in tensors {
        if offset + len > data.len() {
            return Err(Error::Checkpoint(format!("tensor {name} runs past the data section")));
        }
        let n = len / 8;
        let mut values = Vec::with_capacity(n);
        for i in 0..n {
            let mut b = [0u8; 8];
            b.copy_from_slice(&data[offset + i * 8..offset + (i + 1) * 8]);
            values.push(f64::from_le_bytes(b));
        }
        let t = Tensor::from_vec(&dims, values)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        if let Some(rest) = name.strip_prefix("adam.m.") {
            adam_m.insert(rest.to_string(), t);
        } else if let Some(rest) = name.strip_prefix("adam.v.") {
            adam_v.insert(rest.to_string(), t);
        } else {
            store.register_raw(&name, t)?;
        }
    }

    let adam = adam_t.map(|t| {
        let mut a = Adam::new(0.0); // lr is reapplied by the caller from config
        a.t = t;
        a.m = adam_m;
        a.v = adam_v;
        a
    });

    Ok((store, adam, CheckpointMeta { seed, steps, config_hash }))
}

fn parse_num(field: Option<&str>) -> Result<u64> {
    field
        .ok_or_else(|| Error::Checkpoint("truncated manifest line".into()))?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("bad number in manifest: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::params::Init;

    #[test]
    fn roundtrip_preserves_bits_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut store = ParamStore::new(99);
        store.register("enc.w", &[3, 4], Init::XavierUniform { fan_in: 3, fan_out: 4 }).unwrap();
        store.register("enc.b", &[4], Init::Uniform(0.1)).unwrap();
        store.set_steps_trained(123);
        let mut adam = Adam::new(1e-3);
        adam.t = 123;
        adam.m.insert("enc.w".into(), Tensor::filled(&[3, 4], 0.25));
        adam.v.insert("enc.w".into(), Tensor::filled(&[3, 4], 0.5));

        save(&path, &store, Some(&adam), "deadbeef").unwrap();
        let (loaded, loaded_adam, meta) = load(&path).unwrap();
        assert_eq!(meta.seed, 99);
        assert_eq!(meta.steps, 123);
        assert_eq!(meta.config_hash, "deadbeef");
        for name in store.names() {
            let a = store.get(name).unwrap();
            let b = loaded.get(name).unwrap();
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        let la = loaded_adam.unwrap();
        assert_eq!(la.t, 123);
        assert_eq!(la.m["enc.w"].data()[0], 0.25);
    }

    #[test]
    fn identical_stores_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let build = || {
            let mut s = ParamStore::new(5);
            s.register("w", &[8], Init::Uniform(1.0)).unwrap();
            s
        };
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&p1, &build(), None, "h").unwrap();
        save(&p2, &build(), None, "h").unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }
}
