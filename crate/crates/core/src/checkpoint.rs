//! Versioned binary model checkpoints: header (magic, version, architecture),
//! then per-layer row-major real64 weights, biases and bit-packed masks.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Layer, MaskedMlp, MlpSpec};

const MAGIC: &[u8; 8] = b"FAIRPRUN";
const VERSION: u32 = 1;

fn write_u32(out: &mut impl Write, v: u32) -> Result<()> {
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(inp: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    inp.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn write_f64s(out: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_f64s(inp: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    inp.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn pack_mask(mask: &[u8]) -> Vec<u8> {
    let mut packed = vec![0u8; mask.len().div_ceil(8)];
    for (i, &m) in mask.iter().enumerate() {
        if m != 0 {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    packed
}

fn unpack_mask(packed: &[u8], n: usize) -> Vec<u8> {
    (0..n).map(|i| (packed[i / 8] >> (i % 8)) & 1).collect()
}

pub fn save(model: &MaskedMlp, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    write_u32(&mut out, VERSION)?;
    write_u32(&mut out, model.spec.input_dim as u32)?;
    write_u32(&mut out, model.spec.num_classes as u32)?;
    write_u32(&mut out, model.spec.hidden_dims.len() as u32)?;
    for &h in &model.spec.hidden_dims {
        write_u32(&mut out, h as u32)?;
    }
    for layer in &model.layers {
        out.write_all(&[layer.prunable as u8])?;
        write_f64s(&mut out, &layer.weights)?;
        write_f64s(&mut out, &layer.bias)?;
        out.write_all(&pack_mask(&layer.mask))?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<MaskedMlp> {
    let mut inp = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    inp.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "not a checkpoint file: bad magic {:?}",
            magic
        )));
    }
    let version = read_u32(&mut inp)?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            version
        )));
    }
    let input_dim = read_u32(&mut inp)? as usize;
    let num_classes = read_u32(&mut inp)? as usize;
    let num_hidden = read_u32(&mut inp)? as usize;
    let mut hidden_dims = Vec::with_capacity(num_hidden);
    for _ in 0..num_hidden {
        hidden_dims.push(read_u32(&mut inp)? as usize);
    }
    let spec = MlpSpec::new(input_dim, hidden_dims, num_classes)?;

    let mut dims = Vec::new();
    let mut prev = spec.input_dim;
    for &h in &spec.hidden_dims {
        dims.push((h, prev));
        prev = h;
    }
    dims.push((spec.num_classes, prev));

    let last = dims.len() - 1;
    let mut layers = Vec::with_capacity(dims.len());
    for (idx, (out_dim, in_dim)) in dims.into_iter().enumerate() {
        let mut flag = [0u8; 1];
        inp.read_exact(&mut flag)?;
        let expected_prunable = idx != 0 && idx != last;
        if (flag[0] != 0) != expected_prunable {
            return Err(Error::Format(format!(
                "layer {} prunable flag {} contradicts the architecture",
                idx, flag[0]
            )));
        }
        let numel = out_dim * in_dim;
        let weights = read_f64s(&mut inp, numel)?;
        let bias = read_f64s(&mut inp, out_dim)?;
        let mut packed = vec![0u8; numel.div_ceil(8)];
        inp.read_exact(&mut packed)?;
        let mask = unpack_mask(&packed, numel);
        layers.push(Layer {
            out_dim,
            in_dim,
            weights,
            bias,
            mask,
            prunable: expected_prunable,
        });
    }
    let mut trailing = [0u8; 1];
    if inp.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after checkpoint payload".into()));
    }
    let mut model = MaskedMlp::init(&spec, 0)?;
    model.layers = layers;
    model.apply_masks();
    Ok(model)
}
