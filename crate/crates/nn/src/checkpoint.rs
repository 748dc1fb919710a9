//! Parameter checkpoints.
//!
//! Layout: one line of JSON `{"dtype":"f32","names":[..],"shapes":[..],
//! "offsets":[..]}` terminated by `\n`, then every parameter as consecutive
//! little-endian `f32` values. Offsets are byte positions relative to the
//! first byte after the header line.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    offsets: Vec<u64>,
}

pub fn write_checkpoint<W: Write>(store: &ParameterStore<f32>, mut w: W) -> Result<()> {
    let mut offsets = Vec::with_capacity(store.len());
    let mut offset = 0u64;
    for (_, _, t) in store.iter() {
        offsets.push(offset);
        offset += 4 * t.len() as u64;
    }
    let header = Header {
        dtype: "f32".into(),
        names: store.iter().map(|(_, n, _)| n.to_string()).collect(),
        shapes: store.iter().map(|(_, _, t)| t.shape().to_vec()).collect(),
        offsets,
    };
    let line = serde_json::to_string(&header).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    let mut buf = Vec::with_capacity(offset as usize);
    for (_, _, t) in store.iter() {
        for x in t.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: R) -> Result<ParameterStore<f32>> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: Header =
        serde_json::from_str(line.trim_end()).map_err(|e| NnError::Checkpoint(format!("bad header: {e}")))?;
    if header.dtype != "f32" {
        return Err(NnError::Checkpoint(format!("unsupported dtype {}", header.dtype)));
    }
    if header.names.len() != header.shapes.len() || header.names.len() != header.offsets.len() {
        return Err(NnError::Checkpoint("header arrays differ in length".into()));
    }
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    let mut store = ParameterStore::new();
    for ((name, shape), &off) in header.names.iter().zip(&header.shapes).zip(&header.offsets) {
        let n: usize = shape.iter().product();
        let start = off as usize;
        let end = start + 4 * n;
        if end > body.len() {
            return Err(NnError::Checkpoint(format!("`{name}` runs past end of data")));
        }
        let data = body[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        store.add(name.clone(), Tensor::new(shape, data)?)?;
    }
    Ok(store)
}

pub fn save(store: &ParameterStore<f32>, path: impl AsRef<Path>) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<ParameterStore<f32>> {
    read_checkpoint(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(values in proptest::collection::vec(any::<f32>(), 1..40), split in 0usize..40) {
            let split = split.min(values.len());
            let mut store = ParameterStore::<f32>::new();
            store.add("a", Tensor::new(&[split], values[..split].to_vec()).unwrap()).unwrap();
            store.add("b.weight", Tensor::new(&[values.len() - split, 1], values[split..].to_vec()).unwrap()).unwrap();
            let mut bytes = Vec::new();
            write_checkpoint(&store, &mut bytes).unwrap();
            let back = read_checkpoint(bytes.as_slice()).unwrap();
            prop_assert_eq!(back.len(), 2);
            for (id, name, t) in store.iter() {
                let other = back.get(back.id(name).unwrap());
                prop_assert_eq!(other.shape(), t.shape());
                let a: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u32> = other.data().iter().map(|x| x.to_bits()).collect();
                prop_assert_eq!(a, b);
                let _ = id;
            }
        }
    }

    #[test]
    fn header_records_offsets() {
        let mut store = ParameterStore::<f32>::new();
        store.add("x", Tensor::zeros(&[2, 3])).unwrap();
        store.add("y", Tensor::zeros(&[4])).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&store, &mut bytes).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["offsets"], serde_json::json!([0, 24]));
        assert_eq!(header["dtype"], "f32");
        assert_eq!(bytes.len() - nl - 1, 40);
    }

    #[test]
    fn truncated_body_is_rejected() {
        let mut store = ParameterStore::<f32>::new();
        store.add("x", Tensor::zeros(&[8])).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&store, &mut bytes).unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(read_checkpoint(bytes.as_slice()), Err(NnError::Checkpoint(_))));
    }
}
