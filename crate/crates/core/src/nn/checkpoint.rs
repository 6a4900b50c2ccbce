use std::io::{Read, Write};

use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Element, Tensor};

/// File signature of a parameter checkpoint.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PSRPARM1";

/// Writes `magic, count:u32`, then per parameter `name_len:u32, name,
/// tensor` in store order.
pub fn save_params<T: Element, W: Write>(store: &ParamStore<T>, w: &mut W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, value) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        write_tensor(w, value)?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a checkpoint into `store`, which must have been built with the
/// same layer names and shapes. Fails on the first disagreement without
/// modifying the store.
pub fn load_params<T: Element, R: Read>(store: &mut ParamStore<T>, r: &mut R) -> Result<()> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a parameter checkpoint".into()));
    }
    let count = read_u32(r)? as usize;
    if count != store.len() {
        return Err(Error::Mismatch {
            layer: "<model>".into(),
            detail: format!("checkpoint has {count} tensors, model has {}", store.len()),
        });
    }
    let mut loaded: Vec<Tensor<T>> = Vec::with_capacity(count);
    for (expected, current) in store.iter() {
        let len = read_u32(r)? as usize;
        if len > 4096 {
            return Err(Error::Format(format!("implausible name length {len}")));
        }
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("non-UTF-8 parameter name".into()))?;
        if name != expected {
            return Err(Error::Mismatch {
                layer: expected.into(),
                detail: format!("checkpoint has `{name}` in this position"),
            });
        }
        let t: Tensor<T> = read_tensor(r)?;
        if t.shape() != current.shape() {
            return Err(Error::Mismatch {
                layer: name,
                detail: format!("shape {:?} in checkpoint, {:?} in model", t.shape(), current.shape()),
            });
        }
        loaded.push(t);
    }
    for (slot, t) in store.values_mut().iter_mut().zip(loaded) {
        *slot = t;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(shape_b: &[usize]) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.5));
        s.add("b.bias", Tensor::from_fn(shape_b, |i| -(i as f32)));
        s
    }

    #[test]
    fn round_trip() {
        let src = store(&[4]);
        let mut buf = Vec::new();
        save_params(&src, &mut buf).unwrap();
        let mut dst = store(&[4]);
        dst.values_mut()[0] = Tensor::zeros(&[2, 3]);
        load_params(&mut dst, &mut buf.as_slice()).unwrap();
        assert_eq!(dst.values(), src.values());
    }

    #[test]
    fn shape_mismatch_names_the_layer() {
        let mut buf = Vec::new();
        save_params(&store(&[4]), &mut buf).unwrap();
        let mut dst = store(&[5]);
        match load_params(&mut dst, &mut buf.as_slice()) {
            Err(Error::Mismatch { layer, .. }) => assert_eq!(layer, "b.bias"),
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn rejects_foreign_bytes() {
        let mut dst = store(&[4]);
        assert!(matches!(load_params(&mut dst, &mut &b"hello world!"[..]), Err(Error::Format(_))));
    }
}
