//! Dataset files: a text header naming the setting, scale, count and seed,
//! followed by one blob of little-endian f32 records, one record per
//! sample laid out as (x, y, v). A CSV export exists for inspection.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ContextData, ContextKind, Dataset, EnvError, SettingId, SettingSpec};

const MAGIC: &str = "auction-forge dataset v1";

fn context_kind_line(kind: ContextKind) -> String {
    match kind {
        ContextKind::Discrete { domain } => format!("discrete {domain}"),
        ContextKind::Continuous { dim } => format!("continuous {dim}"),
    }
}

fn parse_context_kind(s: &str) -> Result<ContextKind, EnvError> {
    let mut parts = s.split_whitespace();
    let kind = parts.next().ok_or_else(|| EnvError::Format("missing context kind".into()))?;
    let size: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| EnvError::Format(format!("bad context kind '{s}'")))?;
    match kind {
        "discrete" => Ok(ContextKind::Discrete { domain: size }),
        "continuous" => Ok(ContextKind::Continuous { dim: size }),
        other => Err(EnvError::Format(format!("unknown context kind '{other}'"))),
    }
}

/// Per-sample record length in f32 values.
fn record_width(spec: &SettingSpec) -> usize {
    spec.n * spec.bidder_ctx.width() + spec.m * spec.item_ctx.width() + spec.n * spec.m
}

pub fn write_binary(data: &Dataset, path: &Path) -> Result<(), EnvError> {
    let spec = &data.spec;
    let width = record_width(spec);
    let blob_len = data.count * width * 4;
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "setting {}", spec.id)?;
    writeln!(w, "bidders {}", spec.n)?;
    writeln!(w, "items {}", spec.m)?;
    writeln!(w, "count {}", data.count)?;
    writeln!(w, "seed {}", data.seed)?;
    writeln!(w, "bidder_context {}", context_kind_line(spec.bidder_ctx))?;
    writeln!(w, "item_context {}", context_kind_line(spec.item_ctx))?;
    writeln!(w, "blob {blob_len}")?;
    let write_f32 = |v: f32, w: &mut BufWriter<std::fs::File>| w.write_all(&v.to_le_bytes());
    for k in 0..data.count {
        write_context_record(&data.bidder_ctx, k, spec.n, &mut w)?;
        write_context_record(&data.item_ctx, k, spec.m, &mut w)?;
        for &v in data.sample_values(k) {
            write_f32(v, &mut w)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_context_record(
    ctx: &ContextData,
    sample: usize,
    entities: usize,
    w: &mut impl Write,
) -> Result<(), EnvError> {
    match ctx {
        ContextData::Discrete(ids) => {
            for e in 0..entities {
                w.write_all(&(ids[sample * entities + e] as f32).to_le_bytes())?;
            }
        }
        ContextData::Continuous { dim, data } => {
            let start = sample * entities * dim;
            for &v in &data[start..start + entities * dim] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_binary(path: &Path) -> Result<Dataset, EnvError> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<std::fs::File>| -> Result<String, EnvError> {
        line.clear();
        r.read_line(&mut line)?;
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut r)? != MAGIC {
        return Err(EnvError::Format("bad magic line".into()));
    }
    let mut setting = None;
    let mut n = None;
    let mut m = None;
    let mut count = None;
    let mut seed = None;
    let mut bidder_ctx = None;
    let mut item_ctx = None;
    let blob_len: usize;
    loop {
        let l = next_line(&mut r)?;
        let (key, rest) = l
            .split_once(' ')
            .ok_or_else(|| EnvError::Format(format!("bad header line '{l}'")))?;
        match key {
            "setting" => setting = Some(SettingId::parse(rest)?),
            "bidders" => n = rest.parse().ok(),
            "items" => m = rest.parse().ok(),
            "count" => count = rest.parse().ok(),
            "seed" => seed = rest.parse().ok(),
            "bidder_context" => bidder_ctx = Some(parse_context_kind(rest)?),
            "item_context" => item_ctx = Some(parse_context_kind(rest)?),
            "blob" => {
                blob_len = rest
                    .parse()
                    .map_err(|_| EnvError::Format("bad blob length".into()))?;
                break;
            }
            other => return Err(EnvError::Format(format!("unknown header key '{other}'"))),
        }
    }
    let (setting, n, m, count, seed, bidder_kind, item_kind) = match (
        setting, n, m, count, seed, bidder_ctx, item_ctx,
    ) {
        (Some(a), Some(b), Some(c), Some(d), Some(e), Some(f), Some(g)) => (a, b, c, d, e, f, g),
        _ => return Err(EnvError::Format("incomplete header".into())),
    };
    let spec = SettingSpec {
        id: setting,
        n,
        m,
        bidder_ctx: bidder_kind,
        item_ctx: item_kind,
    };
    let width = record_width(&spec);
    if blob_len != count * width * 4 {
        return Err(EnvError::Format(format!(
            "blob length {blob_len} does not match {count} records of {width} floats"
        )));
    }
    let mut blob = vec![0u8; blob_len];
    r.read_exact(&mut blob)?;
    let floats: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();

    let mut bidder_ctx = context_builder(bidder_kind, count * n);
    let mut item_ctx = context_builder(item_kind, count * m);
    let mut values = Vec::with_capacity(count * n * m);
    let mut pos = 0usize;
    for _ in 0..count {
        pos = push_context(&mut bidder_ctx, &floats, pos, n)?;
        pos = push_context(&mut item_ctx, &floats, pos, m)?;
        values.extend_from_slice(&floats[pos..pos + n * m]);
        pos += n * m;
    }
    Ok(Dataset {
        spec,
        count,
        seed,
        values,
        bidder_ctx,
        item_ctx,
    })
}

fn context_builder(kind: ContextKind, capacity: usize) -> ContextData {
    match kind {
        ContextKind::Discrete { .. } => ContextData::Discrete(Vec::with_capacity(capacity)),
        ContextKind::Continuous { dim } => ContextData::Continuous {
            dim,
            data: Vec::with_capacity(capacity * dim),
        },
    }
}

fn push_context(
    ctx: &mut ContextData,
    floats: &[f32],
    pos: usize,
    entities: usize,
) -> Result<usize, EnvError> {
    match ctx {
        ContextData::Discrete(ids) => {
            for e in 0..entities {
                let v = floats[pos + e];
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(EnvError::Format(format!("bad discrete id {v}")));
                }
                ids.push(v as u32);
            }
            Ok(pos + entities)
        }
        ContextData::Continuous { dim, data } => {
            data.extend_from_slice(&floats[pos..pos + entities * *dim]);
            Ok(pos + entities * *dim)
        }
    }
}

/// Human-readable export, one row per sample.
pub fn write_csv(data: &Dataset, path: &Path) -> Result<(), EnvError> {
    let spec = &data.spec;
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let mut header = Vec::new();
    for i in 0..spec.n {
        for d in 0..spec.bidder_ctx.width() {
            header.push(if spec.bidder_ctx.width() == 1 {
                format!("x{}", i + 1)
            } else {
                format!("x{}_{}", i + 1, d + 1)
            });
        }
    }
    for j in 0..spec.m {
        for d in 0..spec.item_ctx.width() {
            header.push(if spec.item_ctx.width() == 1 {
                format!("y{}", j + 1)
            } else {
                format!("y{}_{}", j + 1, d + 1)
            });
        }
    }
    for i in 0..spec.n {
        for j in 0..spec.m {
            header.push(format!("v{}_{}", i + 1, j + 1));
        }
    }
    writeln!(w, "{}", header.join(","))?;
    for k in 0..data.count {
        let mut fields: Vec<String> = Vec::with_capacity(header.len());
        push_context_csv(&data.bidder_ctx, k, spec.n, &mut fields);
        push_context_csv(&data.item_ctx, k, spec.m, &mut fields);
        for &v in data.sample_values(k) {
            fields.push(format!("{v}"));
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn push_context_csv(ctx: &ContextData, sample: usize, entities: usize, out: &mut Vec<String>) {
    match ctx {
        ContextData::Discrete(ids) => {
            for e in 0..entities {
                out.push(format!("{}", ids[sample * entities + e]));
            }
        }
        ContextData::Continuous { dim, data } => {
            let start = sample * entities * dim;
            for &v in &data[start..start + entities * dim] {
                out.push(format!("{v}"));
            }
        }
    }
}
