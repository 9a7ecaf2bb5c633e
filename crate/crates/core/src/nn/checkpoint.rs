//! `MMTL` checkpoint files: magic, u32 version, then records of
//! (u32 name length, name, u32 rank, u32 extents, f64 payload), all
//! little-endian, read until end of file.
//!
//! Records named `meta.*` describe the architecture; the rest are parameters
//! named `F.<i>` and `D<t>.<i>`.

use super::{decoder_shapes, shared_shapes, ArchName, ArchSpec, ConvBlock, ModelParams};
use crate::error::{Error, Result};
use crate::Tensor;

const MAGIC: &[u8; 4] = b"MMTL";
const VERSION: u32 = 1;

struct Record {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn put_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn usizes(v: &[usize]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub(super) fn encode(m: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let a = &m.arch;
    let mut head = vec![f64::from(a.name.code())];
    head.extend(usizes(&a.input_shape));
    put_record(&mut out, "meta.arch", &[4], &head);
    let conv: Vec<f64> = a
        .conv
        .iter()
        .flat_map(|b| [b.filters as f64, b.kernel as f64, b.padding as f64, b.pool as f64, b.dropout])
        .collect();
    put_record(&mut out, "meta.conv", &[a.conv.len(), 5], &conv);
    put_record(&mut out, "meta.encoder_dense", &[a.encoder_dense.len()], &usizes(&a.encoder_dense));
    put_record(&mut out, "meta.decoder_hidden", &[a.decoder_hidden.len()], &usizes(&a.decoder_hidden));
    put_record(&mut out, "meta.classes", &[m.class_counts.len()], &usizes(&m.class_counts));
    for (i, p) in m.shared.iter().enumerate() {
        put_record(&mut out, &format!("F.{i}"), p.shape(), p.data());
    }
    for (t, head) in m.decoders.iter().enumerate() {
        for (i, p) in head.iter().enumerate() {
            put_record(&mut out, &format!("D{t}.{i}"), p.shape(), p.data());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, field: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(field, "checkpoint truncated"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<usize> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn record(&mut self) -> Result<Record> {
        let len = self.u32("record.name_len")?;
        let name = String::from_utf8(self.take(len, "record.name")?.to_vec())
            .map_err(|_| Error::format("record.name", "not UTF-8"))?;
        let rank = self.u32("record.rank")?;
        let shape = (0..rank).map(|_| self.u32("record.extent")).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let n = n.ok_or_else(|| Error::format("record.extent", "size overflows"))?;
        let bytes = self.take(n.saturating_mul(8), "record.payload")?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(name, "non-finite value"));
        }
        Ok(Record { name, shape, data })
    }
}

fn meta<'r>(records: &'r [Record], name: &str) -> Result<&'r Record> {
    records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::format(name, "missing record"))
}

fn as_usizes(r: &Record) -> Vec<usize> {
    r.data.iter().map(|&v| v as usize).collect()
}

pub(super) fn decode(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.get(..4) != Some(MAGIC) {
        return Err(Error::format("checkpoint.magic", "expected `MMTL`"));
    }
    let mut rd = Reader { bytes, pos: 4 };
    let version = rd.u32("checkpoint.version")?;
    if version != VERSION as usize {
        return Err(Error::format("checkpoint.version", format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while rd.pos < bytes.len() {
        records.push(rd.record()?);
    }

    let head = meta(&records, "meta.arch")?;
    if head.data.len() != 4 {
        return Err(Error::format("meta.arch", "expected 4 values"));
    }
    let name = ArchName::from_code(head.data[0] as u32)
        .ok_or_else(|| Error::format("meta.arch", "unknown architecture code"))?;
    let input_shape = [head.data[1] as usize, head.data[2] as usize, head.data[3] as usize];
    let conv = meta(&records, "meta.conv")?
        .data
        .chunks_exact(5)
        .map(|c| ConvBlock {
            filters: c[0] as usize,
            kernel: c[1] as usize,
            padding: c[2] as usize,
            pool: c[3] as usize,
            dropout: c[4],
        })
        .collect();
    let arch = ArchSpec {
        name,
        input_shape,
        conv,
        encoder_dense: as_usizes(meta(&records, "meta.encoder_dense")?),
        decoder_hidden: as_usizes(meta(&records, "meta.decoder_hidden")?),
    };
    arch.validate().map_err(|e| Error::format("meta", e.to_string()))?;
    let class_counts = as_usizes(meta(&records, "meta.classes")?);

    let mut take = |name: String, shape: Vec<usize>| -> Result<Tensor> {
        let i = records
            .iter()
            .position(|r| r.name == name)
            .ok_or_else(|| Error::format(name.as_str(), "missing record"))?;
        let r = records.swap_remove(i);
        if r.shape != shape {
            return Err(Error::format(
                name,
                format!("shape {:?}, architecture needs {shape:?}", r.shape),
            ));
        }
        Tensor::new(r.shape, r.data)
    };
    let shared = shared_shapes(&arch)?
        .into_iter()
        .enumerate()
        .map(|(i, s)| take(format!("F.{i}"), s))
        .collect::<Result<Vec<_>>>()?;
    let mut decoders = Vec::new();
    for (t, &c) in class_counts.iter().enumerate() {
        let head = decoder_shapes(&arch, c)?
            .into_iter()
            .enumerate()
            .map(|(i, s)| take(format!("D{t}.{i}"), s))
            .collect::<Result<Vec<_>>>()?;
        decoders.push(head);
    }
    if let Some(extra) = records.iter().find(|r| !r.name.starts_with("meta.")) {
        return Err(Error::format(extra.name.as_str(), "unexpected record"));
    }
    Ok(ModelParams {
        arch,
        class_counts,
        shared,
        decoders,
    })
}
