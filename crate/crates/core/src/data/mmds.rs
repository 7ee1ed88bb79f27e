//! MMDS record files.
//!
//! Header: magic `MMDS`, `u32` version, `u8` task (0 multilabel, 1 sentiment),
//! three `u32` feature widths (L, V, A) and a `u64` record count. Each record
//! is a varint-prefixed UTF-8 id, varint lengths `T_l, T_v, T_a`, the three
//! sequences as row-major `f32`, then the label: an `f32` score or a `u8`
//! bitmask of the four flags. All integers are little-endian.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use super::sample::{Dataset, Label, Modality, MultimodalSample, Task};
use crate::error::{Error, Result};
use crate::io::{put_varint, write_atomic};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MMDS";
pub const MMDS_VERSION: u32 = 1;

fn task_code(task: Task) -> u8 {
    match task {
        Task::Multilabel4 => 0,
        Task::Sentiment => 1,
    }
}

pub fn to_bytes(ds: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MMDS_VERSION.to_le_bytes());
    out.push(task_code(ds.task));
    for d in ds.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for s in ds.samples() {
        put_varint(&mut out, s.id.len() as u64);
        out.extend_from_slice(s.id.as_bytes());
        for m in Modality::ALL {
            put_varint(&mut out, s.len(m) as u64);
        }
        for m in Modality::ALL {
            for &v in s.seq(m).data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        match &s.label {
            Label::Sentiment(y) => out.extend_from_slice(&(*y as f32).to_le_bytes()),
            Label::Multilabel(flags) => {
                let mask = flags.iter().enumerate().fold(0u8, |m, (i, &f)| m | (u8::from(f) << i));
                out.push(mask);
            }
        }
    }
    out
}

pub fn save(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(ds))
}

/// Header fields of an MMDS stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Header {
    pub task: Task,
    pub dims: [usize; 3],
    pub count: u64,
}

struct Stream<R> {
    inner: R,
}

impl<R: Read> Stream<R> {
    fn bytes<const N: usize>(&mut self) -> std::io::Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner.read_exact(&mut b)?;
        Ok(b)
    }

    fn varint(&mut self) -> std::io::Result<u64> {
        let mut value = 0u64;
        for shift in (0..64).step_by(7) {
            let [b] = self.bytes::<1>()?;
            value |= u64::from(b & 0x7f) << shift;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "varint too long"))
    }
}

/// Record lengths above this are treated as corruption rather than allocated.
const MAX_RECORD_LEN: u64 = 1 << 20;

fn read_header<R: Read>(st: &mut Stream<R>) -> Result<Header> {
    let bad = |what: &str| Error::Schema(format!("MMDS header: {what}"));
    let magic = st.bytes::<4>().map_err(|_| bad("truncated"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = u32::from_le_bytes(st.bytes().map_err(|_| bad("truncated"))?);
    if version != MMDS_VERSION {
        return Err(bad(&format!("version {version}, this build reads {MMDS_VERSION}")));
    }
    let task = match st.bytes::<1>().map_err(|_| bad("truncated"))?[0] {
        0 => Task::Multilabel4,
        1 => Task::Sentiment,
        c => return Err(bad(&format!("unknown task code {c}"))),
    };
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = u32::from_le_bytes(st.bytes().map_err(|_| bad("truncated"))?) as usize;
        if *d == 0 {
            return Err(bad("zero feature width"));
        }
    }
    let count = u64::from_le_bytes(st.bytes().map_err(|_| bad("truncated"))?);
    Ok(Header { task, dims, count })
}

fn read_record<R: Read>(st: &mut Stream<R>, h: &Header, index: usize) -> Result<MultimodalSample> {
    let parse = |reason: String| Error::Parse { index, reason };
    let io = |e: std::io::Error| Error::Parse {
        index,
        reason: format!("truncated record ({e})"),
    };
    let id_len = st.varint().map_err(io)?;
    if id_len > MAX_RECORD_LEN {
        return Err(parse(format!("id length {id_len} is implausible")));
    }
    let mut id = vec![0u8; id_len as usize];
    st.inner.read_exact(&mut id).map_err(io)?;
    let id = String::from_utf8(id).map_err(|_| parse("id is not UTF-8".into()))?;
    let mut lens = [0usize; 3];
    for (m, len) in Modality::ALL.iter().zip(&mut lens) {
        let t = st.varint().map_err(io)?;
        if t == 0 {
            return Err(parse(format!("modality {m} has length 0")));
        }
        if t > MAX_RECORD_LEN {
            return Err(parse(format!("modality {m} length {t} is implausible")));
        }
        *len = t as usize;
    }
    let mut seqs = Vec::with_capacity(3);
    for m in Modality::ALL {
        let n = lens[m.index()] * h.dims[m.index()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = f32::from_le_bytes(st.bytes().map_err(io)?);
            if !v.is_finite() {
                return Err(parse(format!("non-finite feature in modality {m}")));
            }
            data.push(f64::from(v));
        }
        seqs.push(Tensor::new(vec![lens[m.index()], h.dims[m.index()]], data)?);
    }
    let label = match h.task {
        Task::Sentiment => {
            let y = f32::from_le_bytes(st.bytes().map_err(io)?);
            if !y.is_finite() {
                return Err(parse("non-finite label".into()));
            }
            Label::Sentiment(f64::from(y))
        }
        Task::Multilabel4 => {
            let [mask] = st.bytes::<1>().map_err(io)?;
            if mask >> 4 != 0 {
                return Err(parse(format!("label mask {mask:#04x} uses more than four flags")));
            }
            Label::Multilabel([0, 1, 2, 3].map(|i| mask >> i & 1 == 1))
        }
    };
    let [l, v, a]: [Tensor; 3] = seqs.try_into().expect("three modalities");
    MultimodalSample::new(id, l, v, a, label).map_err(|e| parse(e.to_string()))
}

/// Reads a whole stream record by record. `expect` pins the task and widths
/// the caller needs; a mismatch is a schema error.
pub fn read<R: Read>(reader: R, expect: Option<(Task, [usize; 3])>) -> Result<Dataset> {
    let mut st = Stream { inner: reader };
    let h = read_header(&mut st)?;
    if let Some((task, dims)) = expect {
        if task != h.task {
            return Err(Error::Schema(format!("dataset task is {}, expected {task}", h.task)));
        }
        if dims != h.dims {
            return Err(Error::Schema(format!(
                "dataset feature widths {:?}, expected {dims:?}",
                h.dims
            )));
        }
    }
    let mut samples = Vec::new();
    for index in 0..h.count as usize {
        samples.push(read_record(&mut st, &h, index)?);
    }
    let mut probe = [0u8; 1];
    if st.inner.read(&mut probe)? != 0 {
        return Err(Error::Parse {
            index: h.count as usize,
            reason: "trailing bytes after the last record".into(),
        });
    }
    Dataset::new(h.task, h.dims, samples)
}

pub fn load(path: &Path, expect: Option<(Task, [usize; 3])>) -> Result<Dataset> {
    read(BufReader::new(File::open(path)?), expect)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(task: Task) -> Dataset {
        let label = |i: usize| match task {
            Task::Sentiment => Label::Sentiment(i as f64 * 0.5 - 1.0),
            Task::Multilabel4 => Label::Multilabel([i % 2 == 0, true, false, i % 3 == 0]),
        };
        let samples = (0..3)
            .map(|i| {
                MultimodalSample::new(
                    format!("s{i}"),
                    Tensor::full(&[i + 1, 2], 0.25 * i as f64),
                    Tensor::full(&[2, 1], -1.5),
                    Tensor::full(&[3, 3], 2.0),
                    label(i),
                )
                .unwrap()
            })
            .collect();
        Dataset::new(task, [2, 1, 3], samples).unwrap()
    }

    #[test]
    fn roundtrip_both_tasks() {
        for task in [Task::Sentiment, Task::Multilabel4] {
            let d = ds(task);
            let back = read(to_bytes(&d).as_slice(), Some((task, [2, 1, 3]))).unwrap();
            assert_eq!(back, d);
        }
    }

    #[test]
    fn empty_dataset_with_header() {
        let d = Dataset::new(Task::Sentiment, [4, 5, 6], Vec::new()).unwrap();
        let back = read(to_bytes(&d).as_slice(), None).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.dims, [4, 5, 6]);
    }

    #[test]
    fn zero_length_record_rejected_with_index() {
        let bytes = to_bytes(&ds(Task::Sentiment));
        // header is 4 + 4 + 1 + 12 + 8 = 29 bytes; record 0 is id "s0" (3 bytes) then T_l
        let mut bad = bytes.clone();
        // patch record 1's T_l: skip record 0 (3 + 3 + 4·(1·2 + 2·1 + 3·3) + 4 bytes)
        let rec0 = 3 + 3 + 4 * (2 + 2 + 9) + 4;
        let t_l_at = 29 + rec0 + 3;
        assert_eq!(bad[t_l_at], 2);
        bad[t_l_at] = 0;
        match read(bad.as_slice(), None) {
            Err(Error::Parse { index, reason }) => {
                assert_eq!(index, 1);
                assert!(reason.contains("length 0"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn nan_and_truncation_and_schema() {
        let bytes = to_bytes(&ds(Task::Sentiment));
        let mut nan = bytes.clone();
        let first_value = 29 + 3 + 3;
        nan[first_value..first_value + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(read(nan.as_slice(), None), Err(Error::Parse { index: 0, .. })));
        let cut = &bytes[..bytes.len() - 2];
        assert!(matches!(read(cut, None), Err(Error::Parse { index: 2, .. })));
        assert!(matches!(
            read(bytes.as_slice(), Some((Task::Sentiment, [2, 2, 3]))),
            Err(Error::Schema(_))
        ));
        let mut magic = bytes.clone();
        magic[1] = b'X';
        assert!(matches!(read(magic.as_slice(), None), Err(Error::Schema(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(read(extra.as_slice(), None), Err(Error::Parse { index: 3, .. })));
    }
}
