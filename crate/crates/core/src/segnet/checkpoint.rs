//! Versioned binary checkpoints: magic "ULPT", a version word, then one
//! entry per tensor (name, dims, raw little-endian f32 data). Block
//! composition rides along as a one-element meta entry.

use std::io::{Read, Write};
use std::path::Path;

use super::net::{BlockComposition, Param, ToyNet, ToyNetConfig};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ULPT";
pub const VERSION: u32 = 1;

const META_COMPOSITION: &str = "meta.composition";

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_checkpoint(net: &ToyNet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let write = |w: &mut std::io::BufWriter<std::fs::File>, bytes: &[u8]| {
        w.write_all(bytes).map_err(|e| io_err(path, e))
    };

    write(&mut w, MAGIC)?;
    write(&mut w, &VERSION.to_le_bytes())?;
    write(&mut w, &(net.params.len() as u32 + 1).to_le_bytes())?;

    let comp = match net.cfg.composition {
        BlockComposition::Parallel => 0.0f32,
        BlockComposition::Sequential => 1.0f32,
    };
    write_entry(&mut w, path, META_COMPOSITION, &[1], &[comp])?;
    for p in &net.params {
        write_entry(&mut w, path, &p.name, &p.shape, &p.data)?;
    }
    Ok(())
}

fn write_entry(
    w: &mut std::io::BufWriter<std::fs::File>,
    path: &Path,
    name: &str,
    shape: &[usize],
    data: &[f32],
) -> Result<()> {
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    write(&(name.len() as u32).to_le_bytes())?;
    write(name.as_bytes())?;
    write(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        write(&(d as u32).to_le_bytes())?;
    }
    for &v in data {
        write(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ToyNet> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = std::io::BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, path, &mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = read_u32(&mut r, path)? as usize;
    if count == 0 || count > 10_000 {
        return Err(Error::Checkpoint(format!("implausible entry count {count}")));
    }

    let mut composition = None;
    let mut params: Vec<Param> = Vec::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r, path)? as usize;
        if name_len > 1024 {
            return Err(Error::Checkpoint(format!("implausible name length {name_len}")));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, path, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r, path)? as usize;
        if ndim == 0 || ndim > 8 {
            return Err(Error::Checkpoint(format!("implausible rank {ndim} for {name}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let len: usize = shape.iter().product();
        if len > 100_000_000 {
            return Err(Error::Checkpoint(format!("implausible size {len} for {name}")));
        }
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 4];
        for _ in 0..len {
            read_exact(&mut r, path, &mut buf)?;
            let v = f32::from_le_bytes(buf);
            if !v.is_finite() {
                return Err(Error::Checkpoint(format!("non-finite value in {name}")));
            }
            data.push(v);
        }
        if name == META_COMPOSITION {
            composition = Some(if data.first() == Some(&1.0) {
                BlockComposition::Sequential
            } else {
                BlockComposition::Parallel
            });
        } else {
            params.push(Param { name, shape, data });
        }
    }

    let composition =
        composition.ok_or_else(|| Error::Checkpoint("missing composition entry".into()))?;
    rebuild(params, composition)
}

/// Recovers the layer widths from the stored shapes and validates the full
/// layout against them.
fn rebuild(params: Vec<Param>, composition: BlockComposition) -> Result<ToyNet> {
    let shape_of = |name: &str| -> Result<&Vec<usize>> {
        params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.shape)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    };
    let mut encoder_widths = Vec::with_capacity(6);
    for i in 0..6 {
        let s = shape_of(&format!("enc{i}.weight"))?;
        if s.len() != 4 {
            return Err(Error::Checkpoint(format!("enc{i}.weight is not 4-D")));
        }
        encoder_widths.push(s[0]);
    }
    let mut decoder_widths = Vec::with_capacity(5);
    for k in 0..5 {
        let lead = if k < 4 {
            match composition {
                BlockComposition::Parallel => format!("dec{k}.b0.weight"),
                BlockComposition::Sequential => format!("dec{k}.c0.weight"),
            }
        } else {
            format!("dec{k}.conv.weight")
        };
        let s = shape_of(&lead)?;
        if s.len() != 4 {
            return Err(Error::Checkpoint(format!("{lead} is not 4-D")));
        }
        decoder_widths.push(s[0]);
    }
    let cfg = ToyNetConfig {
        encoder_widths,
        decoder_widths,
        composition,
        seed: 0,
    };
    ToyNet::from_params(cfg, params)
}

fn read_exact(r: &mut impl Read, path: &Path, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| io_err(path, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, path, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
