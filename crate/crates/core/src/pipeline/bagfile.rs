//! On-disk bag format.
//!
//! One file per slide, little-endian throughout:
//!
//! ```text
//! magic   b"FLBG"
//! version u32 = 1
//! k, m, d_emb        u32 each
//! channel names      m * (u32 byte length, utf-8 bytes)
//! coords             k * (u32 col, u32 row)
//! embeddings         k*m*d_emb * f32, [K][M][d_emb] row-major
//! ```
//!
//! The sample id is the file stem, not stored in the payload, so renaming a
//! bag renames the sample.

use crate::error::{Error, Result};
use crate::fusion::EmbeddedBag;
use crate::numerics::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const BAG_MAGIC: [u8; 4] = *b"FLBG";
pub const BAG_VERSION: u32 = 1;

pub fn write_bag(path: &Path, bag: &EmbeddedBag<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_bag_to(&mut w, bag)?;
    w.flush()?;
    Ok(())
}

pub fn write_bag_to<W: Write>(w: &mut W, bag: &EmbeddedBag<f32>) -> Result<()> {
    let shape = bag.h.shape();
    let (k, m, d) = (shape[0], shape[1], shape[2]);
    w.write_all(&BAG_MAGIC)?;
    w.write_all(&BAG_VERSION.to_le_bytes())?;
    for dim in [k, m, d] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for name in &bag.channel_names {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
    }
    for &(col, row) in &bag.coords {
        w.write_all(&col.to_le_bytes())?;
        w.write_all(&row.to_le_bytes())?;
    }
    for &v in bag.h.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_bag(path: &Path) -> Result<EmbeddedBag<f32>> {
    let sample_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::format(format!("bag path {} has no usable file stem", path.display())))?
        .to_string();
    let mut r = BufReader::new(File::open(path)?);
    read_bag_from(&mut r, sample_id)
        .map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

pub fn read_bag_from<R: Read>(r: &mut R, sample_id: String) -> Result<EmbeddedBag<f32>> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if magic != BAG_MAGIC {
        return Err(Error::format(format!(
            "bad magic {magic:02x?}, expected {BAG_MAGIC:02x?}"
        )));
    }
    let version = read_u32(r, "version")?;
    if version != BAG_VERSION {
        return Err(Error::format(format!(
            "unsupported bag version {version}, expected {BAG_VERSION}"
        )));
    }
    let k = read_u32(r, "k")? as usize;
    let m = read_u32(r, "m")? as usize;
    let d = read_u32(r, "d_emb")? as usize;
    let mut channel_names = Vec::with_capacity(m);
    for i in 0..m {
        let len = read_u32(r, "channel name length")? as usize;
        let mut buf = vec![0u8; len];
        read_exact(r, &mut buf, "channel name bytes")?;
        let name = String::from_utf8(buf)
            .map_err(|_| Error::format(format!("channel name {i} is not valid utf-8")))?;
        channel_names.push(name);
    }
    let mut coords = Vec::with_capacity(k);
    for _ in 0..k {
        let col = read_u32(r, "coord col")?;
        let row = read_u32(r, "coord row")?;
        coords.push((col, row));
    }
    let n = k * m * d;
    let mut data = Vec::with_capacity(n);
    let mut buf = [0u8; 4];
    for _ in 0..n {
        read_exact(r, &mut buf, "embedding payload")?;
        data.push(f32::from_le_bytes(buf));
    }
    // trailing bytes mean the header lied about the payload size
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(Error::format("trailing bytes after embedding payload"));
    }
    // built directly: an empty bag (k = 0) round-trips even though the model
    // itself refuses to run on one
    Ok(EmbeddedBag {
        sample_id,
        channel_names,
        coords,
        h: Tensor::new(vec![k, m, d], data)?,
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(format!("truncated while reading {what}")))
}
