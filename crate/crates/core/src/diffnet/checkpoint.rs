//! `MAFW` weight files: magic, `u32` version, then one record per tensor
//! (`u16` name length, name bytes, `u8` rank, `u32` dims, `f64` data) until
//! end of file. All integers and floats are little-endian.

use std::io::{self, Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{NetError, Owner, ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"MAFW";
const VERSION: u32 = 1;

/// Writes named tensors.
pub fn write_tensors<'t, W: Write>(
    mut w: W,
    tensors: impl IntoIterator<Item = (&'t str, &'t Tensor)>,
) -> io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    for (name, t) in tensors {
        let name_len =
            u16::try_from(name.len()).map_err(|_| io::Error::other("tensor name too long"))?;
        w.write_u16::<LittleEndian>(name_len)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(t.rank() as u8)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, NetError> {
    let fmt = |e: io::Error| NetError::Format(e.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(fmt)?;
    if &magic != MAGIC {
        return Err(NetError::Format(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(fmt)?;
    if version != VERSION {
        return Err(NetError::Format(format!("unsupported version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let name_len = match r.read_u16::<LittleEndian>() {
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(fmt(e)),
        };
        let mut name = vec![0u8; name_len as usize];
        r.read_exact(&mut name).map_err(fmt)?;
        let name = String::from_utf8(name).map_err(|e| NetError::Format(e.to_string()))?;
        let rank = r.read_u8().map_err(fmt)?;
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
            .collect::<Result<_, _>>()
            .map_err(fmt)?;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| r.read_f64::<LittleEndian>())
            .collect::<Result<_, _>>()
            .map_err(fmt)?;
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Saves several parameter sets; names are prefixed with the owner,
/// e.g. `encoder.conv1.weight`.
pub fn save_param_sets<W: Write>(w: W, sets: &[&ParamSet]) -> io::Result<()> {
    let named: Vec<(String, &Tensor)> = sets
        .iter()
        .flat_map(|s| {
            s.iter()
                .map(move |(n, t)| (format!("{}.{n}", s.owner().name()), t))
        })
        .collect();
    write_tensors(w, named.iter().map(|(n, t)| (n.as_str(), *t)))
}

/// Loads tensors saved by [`save_param_sets`] back into sets with the same
/// layout. Every tensor of every set must be present with its shape.
pub fn load_param_sets<R: Read>(r: R, sets: &mut [&mut ParamSet]) -> Result<(), NetError> {
    let tensors = read_tensors(r)?;
    for set in sets.iter_mut() {
        let owner = set.owner();
        for i in 0..set.len() {
            let name = set
                .iter()
                .nth(i)
                .map(|(n, _)| n.to_string())
                .unwrap_or_default();
            let key = format!("{}.{name}", owner.name());
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == key)
                .ok_or_else(|| NetError::Format(format!("missing tensor {key}")))?;
            let slot = set.tensor_mut(i);
            if slot.shape() != t.shape() {
                return Err(NetError::Format(format!(
                    "{key}: stored shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t.clone();
        }
    }
    let known = |n: &str| {
        n.split_once('.')
            .and_then(|(o, _)| Owner::from_name(o))
            .is_some()
    };
    if let Some((n, _)) = tensors.iter().find(|(n, _)| !known(n)) {
        log::warn!("ignoring tensor {n} with unknown owner prefix");
    }
    Ok(())
}
