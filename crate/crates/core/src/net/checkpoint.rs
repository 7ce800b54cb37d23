//! Self-describing checkpoint container: a text manifest naming every
//! tensor with its shape and byte offset, then one blob of little-endian
//! f32 values. Round-trips are bit-exact.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{layout, MechanismParams, NetArch, NetError, NetShape};
use crate::env::ContextKind;
use crate::tensor::Tensor;

const MAGIC: &str = "auction-forge checkpoint v1";

fn context_kind_str(kind: ContextKind) -> String {
    match kind {
        ContextKind::Discrete { domain } => format!("discrete {domain}"),
        ContextKind::Continuous { dim } => format!("continuous {dim}"),
    }
}

fn parse_context_kind(s: &str) -> Result<ContextKind, NetError> {
    let mut it = s.split_whitespace();
    let kind = it.next().ok_or_else(|| NetError::Checkpoint("missing context kind".into()))?;
    let size: usize = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| NetError::Checkpoint(format!("bad context kind '{s}'")))?;
    match kind {
        "discrete" => Ok(ContextKind::Discrete { domain: size }),
        "continuous" => Ok(ContextKind::Continuous { dim: size }),
        other => Err(NetError::Checkpoint(format!("unknown context kind '{other}'"))),
    }
}

pub fn save(params: &MechanismParams, path: &Path) -> Result<(), NetError> {
    let shape = params.shape();
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "meta layers {}", shape.arch.layers)?;
    writeln!(w, "meta d {}", shape.arch.d)?;
    writeln!(w, "meta d_h {}", shape.arch.d_h)?;
    writeln!(w, "meta heads {}", shape.arch.heads)?;
    writeln!(w, "meta embed_dim {}", shape.arch.embed_dim)?;
    writeln!(w, "meta bidder_context {}", context_kind_str(shape.bidder_ctx))?;
    writeln!(w, "meta item_context {}", context_kind_str(shape.item_ctx))?;
    let mut offset = 0usize;
    for (spec, tensor) in params.specs().iter().zip(params.tensors()) {
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        writeln!(w, "tensor {} {} {}", spec.name, dims.join(","), offset)?;
        offset += tensor.numel() * 4;
    }
    writeln!(w, "blob {offset}")?;
    for tensor in params.tensors() {
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<MechanismParams, NetError> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<std::fs::File>| -> Result<String, NetError> {
        line.clear();
        r.read_line(&mut line)?;
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut r)? != MAGIC {
        return Err(NetError::Checkpoint("bad magic line".into()));
    }
    let mut arch = NetArch::default();
    let mut bidder_ctx = None;
    let mut item_ctx = None;
    let mut entries: Vec<(String, Vec<usize>, usize)> = Vec::new();
    let blob_len: usize;
    loop {
        let l = next_line(&mut r)?;
        let (key, rest) = l
            .split_once(' ')
            .ok_or_else(|| NetError::Checkpoint(format!("bad line '{l}'")))?;
        match key {
            "meta" => {
                let (field, value) = rest
                    .split_once(' ')
                    .ok_or_else(|| NetError::Checkpoint(format!("bad meta line '{l}'")))?;
                match field {
                    "layers" => arch.layers = parse_num(value)?,
                    "d" => arch.d = parse_num(value)?,
                    "d_h" => arch.d_h = parse_num(value)?,
                    "heads" => arch.heads = parse_num(value)?,
                    "embed_dim" => arch.embed_dim = parse_num(value)?,
                    "bidder_context" => bidder_ctx = Some(parse_context_kind(value)?),
                    "item_context" => item_ctx = Some(parse_context_kind(value)?),
                    other => return Err(NetError::Checkpoint(format!("unknown meta '{other}'"))),
                }
            }
            "tensor" => {
                let mut parts = rest.split(' ');
                let name = parts
                    .next()
                    .ok_or_else(|| NetError::Checkpoint("tensor line missing name".into()))?;
                let dims_str = parts
                    .next()
                    .ok_or_else(|| NetError::Checkpoint("tensor line missing shape".into()))?;
                let offset: usize = parts
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| NetError::Checkpoint("tensor line missing offset".into()))?;
                let dims: Result<Vec<usize>, _> =
                    dims_str.split(',').map(|d| d.parse::<usize>()).collect();
                let dims =
                    dims.map_err(|_| NetError::Checkpoint(format!("bad shape '{dims_str}'")))?;
                entries.push((name.to_string(), dims, offset));
            }
            "blob" => {
                blob_len = parse_num(rest)?;
                break;
            }
            other => return Err(NetError::Checkpoint(format!("unknown key '{other}'"))),
        }
    }
    let (bidder_ctx, item_ctx) = match (bidder_ctx, item_ctx) {
        (Some(b), Some(i)) => (b, i),
        _ => return Err(NetError::Checkpoint("missing context metadata".into())),
    };
    let shape = NetShape::new(arch, bidder_ctx, item_ctx)?;
    let mut blob = vec![0u8; blob_len];
    r.read_exact(&mut blob)?;

    let (specs, _) = layout(&shape);
    if specs.len() != entries.len() {
        return Err(NetError::Checkpoint(format!(
            "checkpoint has {} tensors, architecture expects {}",
            entries.len(),
            specs.len()
        )));
    }
    let mut tensors = Vec::with_capacity(entries.len());
    for (spec, (name, dims, offset)) in specs.iter().zip(&entries) {
        if &spec.name != name {
            return Err(NetError::Checkpoint(format!(
                "tensor '{name}' out of order, expected '{}'",
                spec.name
            )));
        }
        let numel: usize = dims.iter().product();
        let end = offset + numel * 4;
        if end > blob.len() {
            return Err(NetError::Checkpoint(format!("tensor '{name}' overruns blob")));
        }
        let data: Vec<f32> = blob[*offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.push(Tensor::new(dims.clone(), data).map_err(NetError::Tensor)?);
    }
    MechanismParams::from_tensors(shape, tensors)
}

fn parse_num(s: &str) -> Result<usize, NetError> {
    s.parse()
        .map_err(|_| NetError::Checkpoint(format!("bad number '{s}'")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::ContextKind;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let shape = NetShape::new(
            NetArch {
                layers: 2,
                d: 8,
                d_h: 8,
                heads: 2,
                embed_dim: 4,
            },
            ContextKind::Discrete { domain: 5 },
            ContextKind::Continuous { dim: 3 },
        )
        .unwrap();
        let params = MechanismParams::init(shape, 31);
        let path = std::env::temp_dir().join("afc-ckpt-test.ckpt");
        save(&params, &path).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(params, back);
        // Bit-exactness on the wire: saving again produces identical bytes.
        let path2 = std::env::temp_dir().join("afc-ckpt-test2.ckpt");
        save(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }
}
