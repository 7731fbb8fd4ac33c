//! Joined detector and per-count estimators, plus the on-disk bundle.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use qsine_core::{IqFrame, ParameterSet};
use qsine_nn::{checkpoint, Network, Scalar, Tensor};

use crate::data::frames_tensor;
use crate::detection::DetectionModel;
use crate::error::{param_err, Error, Result};
use crate::estimator::SinusoidEstimator;

const TAG_PREFIX: &str = "qsine";

/// A checkpoint preceded by one text line `qsine <kind> key=value ...`.
pub(crate) fn tagged_bytes<T: Scalar>(header: &str, net: &Network<T>) -> Vec<u8> {
    let mut out = format!("{TAG_PREFIX} {header}\n").into_bytes();
    out.extend(checkpoint::to_bytes(net));
    out
}

pub(crate) fn split_tagged<T: Scalar>(buf: &[u8], kind: &str) -> Result<(HashMap<String, String>, Network<T>)> {
    let nl = buf.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Config("missing header line".into()))?;
    let header = std::str::from_utf8(&buf[..nl]).map_err(|_| Error::Config("header is not UTF-8".into()))?;
    let mut words = header.split_whitespace();
    if words.next() != Some(TAG_PREFIX) || words.next() != Some(kind) {
        return Err(Error::Config(format!("expected a {kind} file, header is '{header}'")));
    }
    let mut fields = HashMap::new();
    for w in words {
        let (k, v) = w.split_once('=').ok_or_else(|| Error::Config(format!("bad header field '{w}'")))?;
        fields.insert(k.to_string(), v.to_string());
    }
    Ok((fields, checkpoint::from_bytes(&buf[nl + 1..])?))
}

#[derive(Debug, Clone)]
pub struct SignalNetModel<T = f32> {
    bits: u32,
    detection: DetectionModel<T>,
    estimators: BTreeMap<usize, SinusoidEstimator<T>>,
}

impl<T: Scalar> SignalNetModel<T> {
    /// All parts must share the bit resolution and frame length. Estimators
    /// for some counts may be missing; routing to one is an error.
    pub fn new(detection: DetectionModel<T>, estimators: Vec<SinusoidEstimator<T>>) -> Result<Self> {
        let bits = detection.bits();
        let mut map = BTreeMap::new();
        for e in estimators {
            if e.bits() != bits || e.n() != detection.n() {
                return Err(Error::Config(format!(
                    "estimator for m = {} has bits {} and N = {}, detector has bits {bits} and N = {}",
                    e.m(),
                    e.bits(),
                    e.n(),
                    detection.n()
                )));
            }
            if e.m() > detection.m_max() {
                return Err(Error::Config(format!("estimator for m = {} exceeds M = {}", e.m(), detection.m_max())));
            }
            if map.insert(e.m(), e).is_some() {
                return Err(Error::Config("two estimators for the same count".into()));
            }
        }
        Ok(Self { bits, detection, estimators: map })
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn detection(&self) -> &DetectionModel<T> {
        &self.detection
    }

    pub fn estimator(&self, m: usize) -> Result<&SinusoidEstimator<T>> {
        self.estimators.get(&m).ok_or_else(|| Error::Config(format!("no estimator for m = {m}")))
    }

    pub fn infer(&self, x: &IqFrame) -> Result<(usize, ParameterSet)> {
        let t = frames_tensor::<T>(&[x])?;
        Ok(self.infer_batch(&t)?.remove(0))
    }

    /// Detects the count of every row, then runs the matching estimator on
    /// the rows routed to it.
    pub fn infer_batch(&self, x: &Tensor<T>) -> Result<Vec<(usize, ParameterSet)>> {
        let counts = self.detection.predict_batch(x)?;
        let mut out: Vec<Option<(usize, ParameterSet)>> = vec![None; counts.len()];
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (row, &m) in counts.iter().enumerate() {
            groups.entry(m).or_default().push(row);
        }
        for (m, rows) in groups {
            let est = self.estimator(m)?.estimate_batch(&x.gather_batch(&rows))?;
            for (row, p) in rows.into_iter().zip(est) {
                out[row] = Some((m, p));
            }
        }
        Ok(out.into_iter().map(|o| o.expect("every row routed")).collect())
    }

    /// Writes the detector and estimators next to a `key = value` manifest.
    pub fn save_bundle(&self, manifest: &Path) -> Result<()> {
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let stem = manifest.file_stem().and_then(|s| s.to_str()).unwrap_or("signalnet");
        let mut bundle = BundleManifest {
            bits: self.bits,
            n: self.detection.n(),
            m_max: self.detection.m_max(),
            detection: Some(format!("{stem}.detection.sgnt")),
            estimators: BTreeMap::new(),
        };
        self.detection.save(&dir.join(bundle.detection.as_ref().expect("set above")))?;
        for (m, e) in &self.estimators {
            let name = format!("{stem}.estimator{m}.sgnt");
            e.save(&dir.join(&name))?;
            bundle.estimators.insert(*m, name);
        }
        std::fs::write(manifest, bundle.to_text())?;
        Ok(())
    }

    pub fn load_bundle(manifest: &Path) -> Result<Self> {
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let bundle = BundleManifest::parse(&std::fs::read_to_string(manifest)?)?;
        let det = bundle.detection.as_ref().ok_or_else(|| Error::Config("bundle lacks a detection entry".into()))?;
        let detection = DetectionModel::load(&dir.join(det))?;
        let mut estimators = Vec::new();
        for (m, file) in &bundle.estimators {
            let e = SinusoidEstimator::load(&dir.join(file))?;
            if e.m() != *m {
                return Err(Error::Config(format!("entry estimator.{m} holds an estimator for m = {}", e.m())));
            }
            estimators.push(e);
        }
        let model = Self::new(detection, estimators)?;
        if model.bits != bundle.bits {
            return param_err(format!("manifest bits {} differ from the stored models", bundle.bits));
        }
        Ok(model)
    }
}

/// Text manifest of a bundle. File names are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleManifest {
    pub bits: u32,
    pub n: usize,
    pub m_max: usize,
    pub detection: Option<String>,
    pub estimators: BTreeMap<usize, String>,
}

impl BundleManifest {
    pub fn to_text(&self) -> String {
        let mut text = String::new();
        writeln!(text, "bits = {}", self.bits).ok();
        writeln!(text, "n = {}", self.n).ok();
        writeln!(text, "m_max = {}", self.m_max).ok();
        if let Some(d) = &self.detection {
            writeln!(text, "detection = {d}").ok();
        }
        for (m, f) in &self.estimators {
            writeln!(text, "estimator.{m} = {f}").ok();
        }
        text
    }

    pub fn parse(text: &str) -> Result<Self> {
        let fields = parse_manifest(text)?;
        let num = |k: &str| -> Result<usize> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("manifest lacks a numeric '{k}'")))
        };
        let mut estimators = BTreeMap::new();
        for (k, v) in &fields {
            if let Some(m) = k.strip_prefix("estimator.") {
                let m = m.parse().map_err(|_| Error::Config(format!("bad manifest key '{k}'")))?;
                estimators.insert(m, v.clone());
            } else if !matches!(k.as_str(), "bits" | "n" | "m_max" | "detection") {
                return Err(Error::Config(format!("unknown manifest key '{k}'")));
            }
        }
        Ok(Self {
            bits: num("bits")? as u32,
            n: num("n")?,
            m_max: num("m_max")?,
            detection: fields.get("detection").cloned(),
            estimators,
        })
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
