//! Flat binary dataset format:
//! `magic (8) | header-json length u32 | header json | f64 tokens… | u8 labels…`,
//! little-endian, tokens row-major sample by sample.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, Split, TaskSpec};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: [u8; 8] = *b"CORLDATA";

#[derive(Serialize, Deserialize)]
struct Header {
    spec: TaskSpec,
    split: Split,
    count: usize,
}

pub fn write_dataset<W: Write>(ds: &Dataset, mut out: W) -> Result<()> {
    let header = serde_json::to_vec(&Header {
        spec: ds.spec.clone(),
        split: ds.split,
        count: ds.samples.len(),
    })?;
    out.write_all(&MAGIC)?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    for s in &ds.samples {
        for v in s.tokens.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.write_all(&ds.labels())?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut input: R) -> Result<Dataset> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Invalid("not a dataset file (bad magic)".into()));
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut header)?;
    let h: Header = serde_json::from_slice(&header)?;
    let (n, d) = (h.spec.n_tokens, h.spec.dim);
    let mut tokens = Vec::with_capacity(h.count);
    let mut buf = [0u8; 8];
    for _ in 0..h.count {
        let mut t = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            input.read_exact(&mut buf)?;
            t.push(f64::from_le_bytes(buf));
        }
        tokens.push(Tensor::matrix(n, d, t)?);
    }
    let mut labels = vec![0u8; h.count];
    input.read_exact(&mut labels)?;
    Ok(Dataset {
        spec: h.spec,
        split: h.split,
        samples: tokens
            .into_iter()
            .zip(labels)
            .map(|(tokens, label)| Sample { tokens, label })
            .collect(),
    })
}

/// One CSV row per token: `sample, label, token, c0 … c{D−1}`.
pub fn dump_csv<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let d = ds.spec.dim;
    let mut header = vec!["sample".to_string(), "label".into(), "token".into()];
    header.extend((0..d).map(|c| format!("c{c}")));
    w.write_record(&header)?;
    for (i, s) in ds.samples.iter().enumerate() {
        let (n, _) = s.tokens.dims2();
        for t in 0..n {
            let mut rec = vec![i.to_string(), s.label.to_string(), t.to_string()];
            rec.extend(s.tokens.row(t).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}
