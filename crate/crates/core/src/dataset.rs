//! On-disk datasets: a labels CSV with a version header and a raw sample
//! file of little-endian `f32`, `N x 2` row-major per example.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{QsineError, Result};
use crate::signal::{IqFrame, LabeledExample, ParameterSet};

pub const FORMAT_TAG: &str = "qsine-dataset v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub n: usize,
    pub m_max: usize,
    pub bits: u32,
}

impl DatasetHeader {
    pub fn line(&self) -> String {
        format!("{FORMAT_TAG}, N={}, M={}, bits={}", self.n, self.m_max, self.bits)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || QsineError::Format(format!("bad header line '{line}'"));
        let mut parts = line.split(',').map(str::trim);
        if parts.next() != Some(FORMAT_TAG) {
            return Err(bad());
        }
        let mut field = |key: &str| -> Result<u64> {
            parts
                .next()
                .and_then(|p| p.strip_prefix(key))
                .and_then(|v| v.strip_prefix('='))
                .and_then(|v| v.parse().ok())
                .ok_or_else(bad)
        };
        let n = field("N")? as usize;
        let m_max = field("M")? as usize;
        let bits = field("bits")? as u32;
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Self { n, m_max, bits })
    }
}

/// `<stem>.labels.csv` and `<stem>.samples.f32`.
pub fn dataset_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let s = stem.as_os_str().to_string_lossy();
    (PathBuf::from(format!("{s}.labels.csv")), PathBuf::from(format!("{s}.samples.f32")))
}

/// Writes the label rows `index,m,snr_db,a..,f..,phi..` and the samples.
/// Floats use the shortest representation that reads back exactly.
pub fn write_dataset(
    labels: &mut impl Write,
    samples: &mut impl Write,
    header: &DatasetHeader,
    examples: &[LabeledExample],
) -> Result<()> {
    writeln!(labels, "{}", header.line())?;
    for (i, e) in examples.iter().enumerate() {
        if e.x.n() != header.n || e.label.m() > header.m_max {
            return Err(QsineError::Format(format!("example {i} does not fit the header")));
        }
        let mut row = format!("{i},{},{}", e.label.m(), e.snr_db);
        for v in e.label.amps().iter().chain(e.label.freqs()).chain(e.label.phases()) {
            row.push(',');
            row.push_str(&v.to_string());
        }
        writeln!(labels, "{row}")?;
        let mut buf = Vec::with_capacity(e.x.data().len() * 4);
        for &v in e.x.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        samples.write_all(&buf)?;
    }
    Ok(())
}

pub fn save_dataset(stem: &Path, header: &DatasetHeader, examples: &[LabeledExample]) -> Result<()> {
    let (lp, sp) = dataset_paths(stem);
    let mut labels = BufWriter::new(File::create(lp)?);
    let mut samples = BufWriter::new(File::create(sp)?);
    write_dataset(&mut labels, &mut samples, header, examples)?;
    labels.flush()?;
    samples.flush()?;
    Ok(())
}

pub fn read_dataset(labels: impl BufRead, mut samples: impl Read) -> Result<(DatasetHeader, Vec<LabeledExample>)> {
    let mut lines = labels.lines();
    let header = DatasetHeader::parse(&lines.next().ok_or_else(|| QsineError::Format("empty labels file".into()))??)?;
    let mut out = Vec::new();
    let mut frame = vec![0u8; header.n * 2 * 4];
    for (row, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| QsineError::Format(format!("row {}: {what}", row + 1));
        let vals: Vec<&str> = line.split(',').collect();
        if vals.len() < 3 {
            return Err(bad("too few fields"));
        }
        let m: usize = vals[1].parse().map_err(|_| bad("bad count"))?;
        if vals.len() != 3 + 3 * m || m > header.m_max {
            return Err(bad("field count does not match m"));
        }
        let nums = vals[2..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| bad("bad number")))
            .collect::<Result<Vec<_>>>()?;
        let label = ParameterSet::new(nums[1..1 + m].to_vec(), nums[1 + m..1 + 2 * m].to_vec(), nums[1 + 2 * m..].to_vec())?;
        samples.read_exact(&mut frame).map_err(|_| bad("samples file too short"))?;
        let data = frame.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        out.push(LabeledExample { x: IqFrame::from_interleaved(data)?, label, snr_db: nums[0] });
    }
    if samples.read(&mut [0u8; 1])? != 0 {
        return Err(QsineError::Format("samples file longer than the labels".into()));
    }
    Ok((header, out))
}

pub fn load_dataset(stem: &Path) -> Result<(DatasetHeader, Vec<LabeledExample>)> {
    let (lp, sp) = dataset_paths(stem);
    read_dataset(BufReader::new(File::open(lp)?), BufReader::new(File::open(sp)?))
}
