//! Parameter checkpoint file.
//!
//! Layout: a UTF-8 manifest followed by the raw payload.
//!
//! ```text
//! sable-checkpoint v1
//! <name> f64 <dim>,<dim> <byte offset>
//! ...
//! end
//! <little-endian f64 payload, arrays in manifest order>
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Result, SableError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "sable-checkpoint v1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut manifest = String::from(MAGIC);
    manifest.push('\n');
    let mut offset = 0usize;
    for id in store.ids() {
        let t = store.value(id);
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{} f64 {} {}\n", store.name(id), dims.join(","), offset));
        offset += t.size_bytes();
    }
    manifest.push_str("end\n");
    let mut bytes = manifest.into_bytes();
    bytes.reserve(offset);
    for id in store.ids() {
        for x in store.value(id).data() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    bytes
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    let err = |detail: String| SableError::Checkpoint {
        path: path.to_path_buf(),
        detail,
    };
    let mut pos = 0usize;
    let mut next_line = |what: &str| -> Result<String> {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| err(format!("truncated manifest while reading {what}")))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| err(format!("manifest {what} is not UTF-8")))?
            .to_string();
        pos += end + 1;
        Ok(line)
    };
    if next_line("header")? != MAGIC {
        return Err(err("bad magic line".into()));
    }
    let mut entries = Vec::new();
    loop {
        let line = next_line("entry")?;
        if line == "end" {
            break;
        }
        let fields: Vec<&str> = line.split(' ').collect();
        if fields.len() != 4 {
            return Err(err(format!("malformed manifest line `{line}`")));
        }
        if fields[1] != "f64" {
            return Err(err(format!("array `{}` has unsupported dtype {}", fields[0], fields[1])));
        }
        let shape: Vec<usize> = fields[2]
            .split(',')
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| err(format!("array `{}` has bad shape `{}`", fields[0], fields[2])))?;
        let offset: usize = fields[3]
            .parse()
            .map_err(|_| err(format!("array `{}` has bad offset `{}`", fields[0], fields[3])))?;
        entries.push((fields[0].to_string(), shape, offset));
    }
    let payload = &bytes[pos..];
    let mut store = ParamStore::new();
    let mut expected = 0usize;
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        if offset != expected {
            return Err(err(format!("array `{name}` offset {offset}, expected {expected}")));
        }
        let end = offset + n * 8;
        if end > payload.len() {
            return Err(err(format!("array `{name}` runs past end of payload")));
        }
        let data = payload[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        store
            .add(name.clone(), Tensor::new(&shape, data)?)
            .map_err(|_| err(format!("duplicate array `{name}`")))?;
        expected = end;
    }
    if expected != payload.len() {
        return Err(err(format!(
            "payload has {} trailing bytes",
            payload.len() - expected
        )));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode(store))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = fs::read(path)?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("enc.w", Tensor::from_fn(2, 3, |r, c| r as f64 - 0.1 * c as f64 + 1e-300)).unwrap();
        s.add("head.b", Tensor::row(vec![f64::MIN_POSITIVE, -0.0, 7.25])).unwrap();
        s
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&sample(), &p1).unwrap();
        let loaded = load(&p1).unwrap();
        save(&loaded, &p2).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(loaded.value(loaded.id("enc.w").unwrap()), sample().value(sample().id("enc.w").unwrap()));
    }

    #[test]
    fn corrupt_manifest_is_rejected() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert!(decode(&bytes, Path::new("x")).is_err());
        let mut truncated = encode(&sample());
        truncated.truncate(truncated.len() - 3);
        let e = decode(&truncated, Path::new("x")).unwrap_err().to_string();
        assert!(e.contains("head.b"), "{e}");
    }

    #[test]
    fn mismatched_store_names_offending_array() {
        let mut other = ParamStore::new();
        other.add("enc.w", Tensor::zeros(&[3, 3])).unwrap();
        other.add("head.b", Tensor::zeros(&[1, 3])).unwrap();
        let e = sample().check_compatible(&other).unwrap_err().to_string();
        assert!(e.contains("enc.w"), "{e}");
    }
}
