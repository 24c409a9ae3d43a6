//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes   "EETMCKPT"
//! version    u32 LE    1
//! header_len u64 LE
//! header     JSON      kind, dims, hyper, vocab fingerprint, vocabulary,
//!                      training log
//! n_params   u64 LE
//! params     n_params x f64 LE
//! n_beta     u64 LE    number of topic matrices (1, or T for dynamic models)
//! per matrix: rows u64 LE, cols u64 LE, rows*cols x f64 LE (row-major)
//! ```
//!
//! All floats are stored as raw IEEE-754 bits, so save/load is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DetmHyper, ModelDims, ModelKind, TrainedModel, TrainingLog};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"EETMCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    dims: ModelDims,
    hyper: Option<DetmHyper>,
    vocab_fingerprint: String,
    vocab: Vec<String>,
    log: TrainingLog,
}

pub fn write_checkpoint<W: Write>(model: &TrainedModel, mut w: W) -> std::io::Result<()> {
    let header = Header {
        kind: model.kind,
        dims: model.dims,
        hyper: model.hyper,
        vocab_fingerprint: model.vocab_fingerprint.clone(),
        vocab: model.vocab.clone(),
        log: model.log.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(std::io::Error::other)?;
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(json.len() as u64)?;
    w.write_all(&json)?;
    w.write_u64::<LittleEndian>(model.params.len() as u64)?;
    for &x in &model.params {
        w.write_f64::<LittleEndian>(x)?;
    }
    w.write_u64::<LittleEndian>(model.beta.len() as u64)?;
    for b in &model.beta {
        w.write_u64::<LittleEndian>(b.nrows() as u64)?;
        w.write_u64::<LittleEndian>(b.ncols() as u64)?;
        for &x in b.iter() {
            w.write_f64::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut out = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut out)?;
    Ok(out)
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<TrainedModel> {
    let bad = |msg: String| Error::Data(format!("invalid checkpoint: {msg}"));
    let io = |e: std::io::Error| bad(e.to_string());
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("bad magic bytes".into()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| bad(e.to_string()))?;
    let n = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let params = read_f64s(&mut r, n).map_err(io)?;
    let n_beta = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut beta = Vec::with_capacity(n_beta);
    for _ in 0..n_beta {
        let rows = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let cols = r.read_u64::<LittleEndian>().map_err(io)? as usize;
        let data = read_f64s(&mut r, rows * cols).map_err(io)?;
        beta.push(Array2::from_shape_vec((rows, cols), data).map_err(|e| bad(e.to_string()))?);
    }
    let model = TrainedModel {
        kind: header.kind,
        dims: header.dims,
        hyper: header.hyper,
        params,
        beta,
        log: header.log,
        vocab_fingerprint: header.vocab_fingerprint,
        vocab: header.vocab,
    };
    model.validate()?;
    Ok(model)
}

impl TrainedModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        write_checkpoint(self, &mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        read_checkpoint(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::train::EpochRecord;
    use crate::model::EtmParams;

    fn model() -> TrainedModel {
        let p = EtmParams::init(5, 2, 3, 4, 1);
        let beta = Array2::from_shape_fn((2, 5), |(k, v)| if k == 0 { 0.2 } else { [0.1, 0.2, 0.3, 0.15, 0.25][v] });
        TrainedModel {
            kind: ModelKind::Etm,
            dims: ModelDims { vocab: 5, topics: 2, embed: 3, slices: 1, hidden: 4 },
            hyper: None,
            params: p.data,
            beta: vec![beta],
            log: TrainingLog {
                epochs: vec![EpochRecord { epoch: 1, train_elbo: -123.456789012345678, valid_perplexity: 0.1 + 0.2 }],
                best_epoch: 1,
                stopped_early: false,
            },
            vocab_fingerprint: "abc".into(),
            vocab: (0..5).map(|i| format!("w{i}")).collect(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let bits = |m: &TrainedModel| m.params.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&m));
        assert_eq!(
            back.log.epochs[0].train_elbo.to_bits(),
            m.log.epochs[0].train_elbo.to_bits()
        );
        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut buf = Vec::new();
        write_checkpoint(&model(), &mut buf).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(read_checkpoint(wrong.as_slice()).is_err());
    }
}
