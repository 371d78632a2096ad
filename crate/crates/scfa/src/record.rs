//! CSV rows emitted by every subcommand.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

pub const HEADER: &str = "method,B,H,T,D,block_m,block_n,nb,keep_prob,chunk,seed,precision,\
pre_ms,fwd_ms,bwd_ms,post_ms,tiles,max_rel_err,coverage";

/// One measurement point. Cells that do not apply to a method stay empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub method: String,
    #[serde(rename = "B")]
    pub batch: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    #[serde(rename = "T")]
    pub len: usize,
    #[serde(rename = "D")]
    pub dim: usize,
    pub block_m: Option<usize>,
    pub block_n: Option<usize>,
    pub nb: Option<u32>,
    pub keep_prob: Option<f64>,
    pub chunk: Option<usize>,
    pub seed: u64,
    pub precision: u32,
    pub pre_ms: Option<f64>,
    pub fwd_ms: Option<f64>,
    pub bwd_ms: Option<f64>,
    pub post_ms: Option<f64>,
    pub tiles: Option<u64>,
    pub max_rel_err: Option<f64>,
    pub coverage: Option<f64>,
}

pub fn write_records<W: Write>(out: W, records: &[Record]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(HEADER.split(','))?;
    }
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Parses rows written by [`write_records`]; the header must match exactly.
pub fn read_records<R: Read>(input: R) -> csv::Result<Vec<Record>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != HEADER {
        return Err(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("unexpected CSV header {header:?}"),
        )));
    }
    r.deserialize().collect()
}
