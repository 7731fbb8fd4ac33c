//! Metric rows and their CSV form.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use qsine_core::FreqMode;

use crate::error::{HarnessError, Result};

pub const CSV_HEADER: &str = "algorithm,bits,m,snr_db,metric,value,n_trials,seed";
pub const OOD_CSV_HEADER: &str = "algorithm,bits,m,snr_db,metric,value,n_trials,seed,freq_mode";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    FreqMseDb,
    AmpMseDb,
    PhaseMse,
    DetectionLoss,
    ChamferNorm,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::FreqMseDb => "freq_mse_db",
            Metric::AmpMseDb => "amp_mse_db",
            Metric::PhaseMse => "phase_mse",
            Metric::DetectionLoss => "detection_loss",
            Metric::ChamferNorm => "chamfer_norm",
        }
    }
}

impl FromStr for Metric {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "freq_mse_db" => Metric::FreqMseDb,
            "amp_mse_db" => Metric::AmpMseDb,
            "phase_mse" => Metric::PhaseMse,
            "detection_loss" => Metric::DetectionLoss,
            "chamfer_norm" => Metric::ChamferNorm,
            _ => return Err(HarnessError::Data(format!("unknown metric '{s}'"))),
        })
    }
}

/// Sinusoid count of a cell, or `Joint` for mixed-count test sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CountCell {
    Count(usize),
    Joint,
}

impl fmt::Display for CountCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CountCell::Count(m) => write!(f, "{m}"),
            CountCell::Joint => f.write_str("joint"),
        }
    }
}

impl FromStr for CountCell {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "joint" {
            return Ok(CountCell::Joint);
        }
        s.parse().map(CountCell::Count).map_err(|_| HarnessError::Data(format!("bad m field '{s}'")))
    }
}

pub fn freq_mode_name(mode: FreqMode) -> &'static str {
    match mode {
        FreqMode::InDistribution => "in",
        FreqMode::OodUniform => "ood",
    }
}

pub fn parse_freq_mode(s: &str) -> Option<FreqMode> {
    match s {
        "in" => Some(FreqMode::InDistribution),
        "ood" => Some(FreqMode::OodUniform),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub algorithm: String,
    pub bits: u32,
    pub m: CountCell,
    pub snr_db: f64,
    pub metric: Metric,
    pub value: f64,
    pub n_trials: usize,
    pub seed: u64,
    /// Present only in out-of-distribution comparisons.
    pub freq_mode: Option<FreqMode>,
}

impl MetricRecord {
    pub fn check(&self) -> Result<()> {
        if !self.value.is_finite() || self.n_trials < 1 {
            return Err(HarnessError::Data(format!("invalid metric row {self:?}")));
        }
        Ok(())
    }

    fn sort_key_cmp(&self, other: &Self) -> Ordering {
        self.algorithm
            .cmp(&other.algorithm)
            .then(self.bits.cmp(&other.bits))
            .then(self.m.cmp(&other.m))
            .then(self.snr_db.total_cmp(&other.snr_db))
            .then(self.metric.cmp(&other.metric))
            .then(self.freq_mode.map(freq_mode_name).cmp(&other.freq_mode.map(freq_mode_name)))
    }

    fn csv_line(&self) -> String {
        let mut s = format!(
            "{},{},{},{},{},{},{},{}",
            self.algorithm,
            self.bits,
            self.m,
            self.snr_db,
            self.metric.as_str(),
            self.value,
            self.n_trials,
            self.seed
        );
        if let Some(mode) = self.freq_mode {
            s.push(',');
            s.push_str(freq_mode_name(mode));
        }
        s
    }
}

pub fn sort_records(records: &mut [MetricRecord]) {
    records.sort_by(MetricRecord::sort_key_cmp);
}

/// Sorted CSV with the fixed header (the OOD header when any row carries a
/// frequency mode).
pub fn to_csv(records: &[MetricRecord]) -> Result<String> {
    let mut rows = records.to_vec();
    sort_records(&mut rows);
    let with_mode = rows.iter().any(|r| r.freq_mode.is_some());
    if with_mode && rows.iter().any(|r| r.freq_mode.is_none()) {
        return Err(HarnessError::Data("mixed rows with and without a frequency mode".into()));
    }
    let mut out = String::from(if with_mode { OOD_CSV_HEADER } else { CSV_HEADER });
    out.push('\n');
    for r in &rows {
        r.check()?;
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricRecord>> {
    let mut lines = text.lines();
    let header = lines.next().unwrap_or("");
    let with_mode = match header {
        CSV_HEADER => false,
        OOD_CSV_HEADER => true,
        _ => return Err(HarnessError::Data(format!("unexpected CSV header '{header}'"))),
    };
    let bad = |line: &str| HarnessError::Data(format!("bad CSV row '{line}'"));
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != if with_mode { 9 } else { 8 } {
                return Err(bad(line));
            }
            Ok(MetricRecord {
                algorithm: f[0].to_string(),
                bits: f[1].parse().map_err(|_| bad(line))?,
                m: f[2].parse()?,
                snr_db: f[3].parse().map_err(|_| bad(line))?,
                metric: f[4].parse()?,
                value: f[5].parse().map_err(|_| bad(line))?,
                n_trials: f[6].parse().map_err(|_| bad(line))?,
                seed: f[7].parse().map_err(|_| bad(line))?,
                freq_mode: if with_mode { Some(parse_freq_mode(f[8]).ok_or_else(|| bad(line))?) } else { None },
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(alg: &str, m: CountCell, snr: f64, metric: Metric) -> MetricRecord {
        MetricRecord {
            algorithm: alg.into(),
            bits: 3,
            m,
            snr_db: snr,
            metric,
            value: -12.5,
            n_trials: 10,
            seed: 4,
            freq_mode: None,
        }
    }

    #[test]
    fn csv_is_sorted_and_parses_back() {
        let rows = vec![
            rec("signalnet", CountCell::Joint, 0.0, Metric::ChamferNorm),
            rec("periodogram", CountCell::Count(2), 1.0, Metric::FreqMseDb),
            rec("periodogram", CountCell::Count(2), -1.0, Metric::FreqMseDb),
            rec("signalnet", CountCell::Count(1), 0.0, Metric::AmpMseDb),
        ];
        let csv = to_csv(&rows).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert_eq!(lines.next(), Some("periodogram,3,2,-1,freq_mse_db,-12.5,10,4"));
        let back = parse_csv(&csv).unwrap();
        let mut sorted = rows.clone();
        sort_records(&mut sorted);
        assert_eq!(back, sorted);
        assert_eq!(back[3].m, CountCell::Joint);
    }

    #[test]
    fn header_mismatch_is_rejected() {
        assert!(parse_csv("algorithm,bits,m,snr,metric,value,n_trials,seed\n").is_err());
        let mut r = rec("x", CountCell::Count(1), 0.0, Metric::PhaseMse);
        r.value = f64::NEG_INFINITY;
        assert!(to_csv(&[r]).is_err());
    }

    #[test]
    fn ood_rows_carry_the_mode_column() {
        let mut a = rec("signalnet", CountCell::Count(2), 0.0, Metric::FreqMseDb);
        a.freq_mode = Some(FreqMode::OodUniform);
        let mut b = a.clone();
        b.freq_mode = Some(FreqMode::InDistribution);
        let csv = to_csv(&[a.clone(), b]).unwrap();
        assert!(csv.starts_with(OOD_CSV_HEADER));
        assert!(csv.lines().nth(2).unwrap().ends_with(",ood"));
        assert!(to_csv(&[a, rec("x", CountCell::Count(1), 0.0, Metric::PhaseMse)]).is_err());
    }
}
