//! On-disk formats.
//!
//! * Time series: CSV with header `subject_id,t,region_1,…,region_p`.
//! * Covariance datasets and posterior draws: a magic line, a one-line JSON
//!   header, then `payload_len` little-endian `f64` values.
//!
//! All writes go through a temporary file and a rename.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::hmc::{ChainDraws, Diagnostics, Draws, SamplerConfig};
use crate::ingest::SubjectTimeSeries;
use crate::model::{from_unconstrained, FeatureMap, ModelParams, ModelSpec};
use crate::spd::SpdMatrix;

pub const DATASET_MAGIC: &str = "BSN-DATASET 1";
pub const DRAWS_MAGIC: &str = "BSN-DRAWS 1";

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp-{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, "serialize", e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, format!("line {}, column {}", e.line(), e.column()), e.to_string()))
}

// ---------------------------------------------------------------- time series

pub fn load_timeseries(path: &Path) -> Result<Vec<SubjectTimeSeries>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_timeseries(file, path)
}

pub fn read_timeseries(reader: impl std::io::Read, path: &Path) -> Result<Vec<SubjectTimeSeries>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(path, "line 1", e.to_string()))?
        .clone();
    if headers.len() < 3 || &headers[0] != "subject_id" || &headers[1] != "t" {
        return Err(Error::parse(path, "line 1", "header must start with subject_id,t followed by region columns"));
    }
    let p = headers.len() - 2;
    for (k, h) in headers.iter().skip(2).enumerate() {
        if h != format!("region_{}", k + 1) {
            return Err(Error::parse(path, "line 1", format!("expected column region_{}, found '{h}'", k + 1)));
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, (Vec<f64>, Vec<f64>)> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let loc = e.position().map_or("unknown line".to_string(), |p| format!("line {}", p.line()));
            Error::parse(path, loc, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let loc = || format!("line {line}");
        if record.len() != p + 2 {
            return Err(Error::parse(path, loc(), format!("expected {} fields, found {}", p + 2, record.len())));
        }
        let id = record[0].to_string();
        let t: f64 = record[1]
            .parse()
            .map_err(|_| Error::parse(path, loc(), format!("time '{}' is not a number", &record[1])))?;
        let entry = rows.entry(id.clone()).or_insert_with(|| {
            order.push(id.clone());
            (Vec::new(), Vec::new())
        });
        if entry.0.last().is_some_and(|prev| t <= *prev) {
            return Err(Error::parse(path, loc(), format!("time {t} for subject '{id}' is not increasing")));
        }
        entry.0.push(t);
        for (k, field) in record.iter().skip(2).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::parse(path, loc(), format!("region_{} value '{field}' is not a number", k + 1)))?;
            if !v.is_finite() {
                return Err(Error::parse(path, loc(), format!("region_{} value is not finite", k + 1)));
            }
            entry.1.push(v);
        }
    }
    if order.is_empty() {
        return Err(Error::parse(path, "end of file", "no data rows"));
    }
    order
        .into_iter()
        .map(|id| {
            let (ts, vals) = rows.remove(&id).expect("recorded subject");
            SubjectTimeSeries::new(id, DMatrix::from_row_slice(ts.len(), p, &vals))
        })
        .collect()
}

pub fn save_timeseries(path: &Path, subjects: &[SubjectTimeSeries]) -> Result<()> {
    let p = subjects
        .first()
        .map(SubjectTimeSeries::regions)
        .ok_or_else(|| Error::Empty("no subjects to write".into()))?;
    if subjects.iter().any(|s| s.regions() != p) {
        return Err(Error::DimensionMismatch("subjects have different region counts".into()));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["subject_id".to_string(), "t".to_string()];
    header.extend((1..=p).map(|k| format!("region_{k}")));
    let csv_err = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(&header).map_err(csv_err)?;
    for s in subjects {
        for (t, row) in s.values().row_iter().enumerate() {
            let mut rec = vec![s.subject_id.clone(), (t + 1).to_string()];
            rec.extend(row.iter().map(|v| format!("{v:?}")));
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, std::io::Error::other(e.to_string())))?;
    write_atomic(path, &bytes)
}

// ------------------------------------------------------------------ container

fn encode_container<H: Serialize>(magic: &str, header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let mut value = serde_json::to_value(header).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    value
        .as_object_mut()
        .ok_or_else(|| Error::InvalidArgument("container header must be an object".into()))?
        .insert("payload_len".into(), Value::from(payload.len()));
    let header = serde_json::to_string(&value).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut out = Vec::with_capacity(magic.len() + header.len() + 2 + 8 * payload.len());
    out.extend_from_slice(magic.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(header.as_bytes());
    out.push(b'\n');
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode_container<H: DeserializeOwned>(path: &Path, magic: &str, bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    let line_end = |from: usize| bytes[from..].iter().position(|b| *b == b'\n').map(|i| from + i);
    let first = line_end(0).ok_or_else(|| Error::parse(path, "line 1", "missing format line"))?;
    if &bytes[..first] != magic.as_bytes() {
        return Err(Error::parse(
            path,
            "line 1",
            format!("expected '{magic}', found '{}'", String::from_utf8_lossy(&bytes[..first.min(64)])),
        ));
    }
    let second = line_end(first + 1).ok_or_else(|| Error::parse(path, "line 2", "missing header line"))?;
    let header_text =
        std::str::from_utf8(&bytes[first + 1..second]).map_err(|e| Error::parse(path, "line 2", e.to_string()))?;
    let mut value: Value = serde_json::from_str(header_text)
        .map_err(|e| Error::parse(path, format!("line 2, column {}", e.column()), e.to_string()))?;
    let len = value
        .get("payload_len")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::parse(path, "line 2", "header lacks payload_len"))? as usize;
    value.as_object_mut().map(|o| o.remove("payload_len"));
    let body = &bytes[second + 1..];
    if body.len() != 8 * len {
        return Err(Error::parse(
            path,
            format!("byte offset {}", second + 1),
            format!("payload holds {} bytes, header declares {} values ({} bytes)", body.len(), len, 8 * len),
        ));
    }
    let payload: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let header: H = serde_json::from_value(value).map_err(|e| Error::parse(path, "line 2", e.to_string()))?;
    Ok((header, payload))
}

/// Sequential reader over a decoded payload.
struct Payload<'a> {
    path: &'a Path,
    data: &'a [f64],
    pos: usize,
}

impl<'a> Payload<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [f64]> {
        if self.pos + n > self.data.len() {
            return Err(Error::parse(
                self.path,
                format!("payload value {}", self.pos),
                format!("needs {n} more values, {} remain", self.data.len() - self.pos),
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn one(&mut self) -> Result<f64> {
        Ok(self.take(1)?[0])
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::parse(
                self.path,
                format!("payload value {}", self.pos),
                format!("{} unexpected trailing values", self.data.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |r| (0..m.ncols()).map(move |c| m[(r, c)]))
}

// -------------------------------------------------------------------- dataset

/// Subject covariance matrices with responses, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct CovDataset {
    pub p: usize,
    /// Stored (unscaled) matrices.
    pub matrices: Vec<DMatrix<f64>>,
    pub ys: Vec<f64>,
    /// Noiseless signals, present for simulated data.
    pub signal: Option<Vec<f64>>,
    pub subject_ids: Vec<String>,
    /// Multiplier applied to every matrix entry when loaded for fitting.
    pub scale: f64,
    pub response_name: String,
    pub provenance: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    n: usize,
    p: usize,
    scale: f64,
    response_name: String,
    has_signal: bool,
    subject_ids: Vec<String>,
    provenance: Value,
}

impl CovDataset {
    pub fn from_covariances(covs: &[SpdMatrix], ys: Vec<f64>, signal: Option<Vec<f64>>) -> Result<Self> {
        let p = covs.first().map(SpdMatrix::dim).ok_or_else(|| Error::Empty("no covariance matrices".into()))?;
        let ds = Self {
            p,
            matrices: covs.iter().map(|m| m.matrix().clone()).collect(),
            subject_ids: (1..=covs.len()).map(|i| format!("subject_{i}")).collect(),
            ys,
            signal,
            scale: 1.0,
            response_name: "y".into(),
            provenance: Value::Null,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn n(&self) -> usize {
        self.ys.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.ys.len();
        if self.matrices.len() != n || self.subject_ids.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} matrices, {} subject ids and {n} responses",
                self.matrices.len(),
                self.subject_ids.len()
            )));
        }
        if self.signal.as_ref().is_some_and(|g| g.len() != n) {
            return Err(Error::DimensionMismatch("signal length differs from response count".into()));
        }
        if let Some(i) = self.matrices.iter().position(|m| m.nrows() != self.p || m.ncols() != self.p) {
            return Err(Error::DimensionMismatch(format!("matrix {i} is not {}x{}", self.p, self.p)));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale must be positive, got {}", self.scale)));
        }
        Ok(())
    }

    /// Scaled matrices with the SPD check applied.
    pub fn covariances(&self) -> Result<Vec<SpdMatrix>> {
        self.matrices
            .iter()
            .enumerate()
            .map(|(i, m)| {
                SpdMatrix::new(m * self.scale).map_err(|e| {
                    Error::InvalidArgument(format!("subject '{}' (index {i}): {e}", self.subject_ids[i]))
                })
            })
            .collect()
    }
}

pub fn encode_dataset(ds: &CovDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let header = DatasetHeader {
        n: ds.n(),
        p: ds.p,
        scale: ds.scale,
        response_name: ds.response_name.clone(),
        has_signal: ds.signal.is_some(),
        subject_ids: ds.subject_ids.clone(),
        provenance: ds.provenance.clone(),
    };
    let mut payload = Vec::with_capacity(ds.n() * (ds.p * ds.p + 2));
    for m in &ds.matrices {
        payload.extend(row_major(m));
    }
    payload.extend(&ds.ys);
    if let Some(g) = &ds.signal {
        payload.extend(g);
    }
    encode_container(DATASET_MAGIC, &header, &payload)
}

pub fn decode_dataset(path: &Path, bytes: &[u8]) -> Result<CovDataset> {
    let (h, data): (DatasetHeader, _) = decode_container(path, DATASET_MAGIC, bytes)?;
    let mut pl = Payload { path, data: &data, pos: 0 };
    let matrices = (0..h.n)
        .map(|_| Ok(DMatrix::from_row_slice(h.p, h.p, pl.take(h.p * h.p)?)))
        .collect::<Result<Vec<_>>>()?;
    let ys = pl.take(h.n)?.to_vec();
    let signal = if h.has_signal { Some(pl.take(h.n)?.to_vec()) } else { None };
    pl.finish()?;
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::parse(path, format!("payload value {pos}"), "non-finite value"));
    }
    let ds = CovDataset {
        p: h.p,
        matrices,
        ys,
        signal,
        subject_ids: h.subject_ids,
        scale: h.scale,
        response_name: h.response_name,
        provenance: h.provenance,
    };
    ds.validate().map_err(|e| Error::parse(path, "line 2", e.to_string()))?;
    Ok(ds)
}

pub fn save_dataset(path: &Path, ds: &CovDataset) -> Result<()> {
    write_atomic(path, &encode_dataset(ds)?)
}

pub fn load_dataset(path: &Path) -> Result<CovDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(path, &bytes)
}

// ---------------------------------------------------------------------- draws

/// Everything needed to reuse a fit: model, reference point, draws and
/// diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct FitRecord {
    pub spec: ModelSpec,
    pub feature_map: FeatureMap,
    /// Training response mean removed before fitting.
    pub y_offset: f64,
    /// Covariance scale used for the training data.
    pub scale: f64,
    pub mref: DMatrix<f64>,
    pub sampler: SamplerConfig,
    pub draws: Draws,
    pub diagnostics: Diagnostics,
    pub converged: bool,
    pub provenance: Value,
}

impl FitRecord {
    /// Constrained parameters for every retained draw, chain-major.
    pub fn params(&self) -> Result<Vec<ModelParams>> {
        self.draws.iter().map(|v| from_unconstrained(v, &self.spec).map(|(p, _)| p)).collect()
    }

    pub fn mref(&self) -> Result<SpdMatrix> {
        SpdMatrix::new(self.mref.clone())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DrawsHeader {
    spec: ModelSpec,
    feature_map: FeatureMap,
    y_offset: f64,
    scale: f64,
    p: usize,
    dim: usize,
    sampler: SamplerConfig,
    chain_lengths: Vec<usize>,
    warmup_divergences: Vec<usize>,
    divergences: usize,
    rhat_threshold: f64,
    converged: bool,
    provenance: Value,
}

pub fn encode_draws(rec: &FitRecord) -> Result<Vec<u8>> {
    let dim = rec.spec.layout().dim();
    if rec.draws.iter().any(|d| d.len() != dim) {
        return Err(Error::DimensionMismatch(format!("draws do not have dimension {dim}")));
    }
    let header = DrawsHeader {
        spec: rec.spec.clone(),
        feature_map: rec.feature_map,
        y_offset: rec.y_offset,
        scale: rec.scale,
        p: rec.mref.nrows(),
        dim,
        sampler: rec.sampler.clone(),
        chain_lengths: rec.draws.chains.iter().map(|c| c.draws.len()).collect(),
        warmup_divergences: rec.draws.chains.iter().map(|c| c.warmup_divergences).collect(),
        divergences: rec.diagnostics.divergences,
        rhat_threshold: rec.diagnostics.rhat_threshold,
        converged: rec.converged,
        provenance: rec.provenance.clone(),
    };
    let mut payload: Vec<f64> = row_major(&rec.mref).collect();
    for c in &rec.draws.chains {
        payload.push(c.step_size);
        payload.extend(&c.inv_mass);
        for i in 0..c.draws.len() {
            payload.extend(&c.draws[i]);
            payload.push(c.log_density[i]);
            payload.push(c.divergent[i] as u8 as f64);
            payload.push(c.accept_stat[i]);
        }
    }
    payload.extend(&rec.diagnostics.rhat);
    payload.extend(&rec.diagnostics.ess_bulk);
    encode_container(DRAWS_MAGIC, &header, &payload)
}

pub fn decode_draws(path: &Path, bytes: &[u8]) -> Result<FitRecord> {
    let (h, data): (DrawsHeader, _) = decode_container(path, DRAWS_MAGIC, bytes)?;
    if h.spec.layout().dim() != h.dim || h.spec.p != h.p {
        return Err(Error::parse(path, "line 2", "model dimensions disagree with header"));
    }
    if h.warmup_divergences.len() != h.chain_lengths.len() {
        return Err(Error::parse(path, "line 2", "per-chain fields have different lengths"));
    }
    let mut pl = Payload { path, data: &data, pos: 0 };
    let mref = DMatrix::from_row_slice(h.p, h.p, pl.take(h.p * h.p)?);
    let mut chains = Vec::with_capacity(h.chain_lengths.len());
    for (len, wd) in h.chain_lengths.iter().zip(&h.warmup_divergences) {
        let step_size = pl.one()?;
        let inv_mass = pl.take(h.dim)?.to_vec();
        let mut c = ChainDraws {
            draws: Vec::with_capacity(*len),
            log_density: Vec::with_capacity(*len),
            divergent: Vec::with_capacity(*len),
            accept_stat: Vec::with_capacity(*len),
            step_size,
            inv_mass,
            warmup_divergences: *wd,
        };
        for _ in 0..*len {
            c.draws.push(pl.take(h.dim)?.to_vec());
            c.log_density.push(pl.one()?);
            let flag = pl.one()?;
            if flag != 0.0 && flag != 1.0 {
                return Err(Error::parse(path, format!("payload value {}", pl.pos - 1), "divergence flag must be 0 or 1"));
            }
            c.divergent.push(flag == 1.0);
            c.accept_stat.push(pl.one()?);
        }
        chains.push(c);
    }
    let rhat = pl.take(h.dim)?.to_vec();
    let ess_bulk = pl.take(h.dim)?.to_vec();
    pl.finish()?;
    let draws = Draws { chains };
    if let Some(i) = draws.iter().position(|d| d.iter().any(|v| !v.is_finite())) {
        return Err(Error::parse(path, format!("draw {i}"), "non-finite coordinate"));
    }
    Ok(FitRecord {
        spec: h.spec,
        feature_map: h.feature_map,
        y_offset: h.y_offset,
        scale: h.scale,
        mref,
        sampler: h.sampler,
        diagnostics: Diagnostics {
            rhat,
            ess_bulk,
            divergences: h.divergences,
            draws: draws.len(),
            rhat_threshold: h.rhat_threshold,
        },
        draws,
        converged: h.converged,
        provenance: h.provenance,
    })
}

pub fn save_draws(path: &Path, rec: &FitRecord) -> Result<()> {
    write_atomic(path, &encode_draws(rec)?)
}

pub fn load_draws(path: &Path) -> Result<FitRecord> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_draws(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AnglePrior;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dataset(rng: &mut impl Rng) -> CovDataset {
        let p = rng.random_range(2..6);
        let n = rng.random_range(1..12);
        CovDataset {
            p,
            matrices: (0..n).map(|_| DMatrix::from_fn(p, p, |_, _| rng.random::<f64>() * 1e5 - 3.0)).collect(),
            ys: (0..n).map(|_| rng.random::<f64>() / 3.0).collect(),
            signal: rng.random::<bool>().then(|| (0..n).map(|_| rng.random()).collect()),
            subject_ids: (0..n).map(|i| format!("s{i}")).collect(),
            scale: 1e-4,
            response_name: "score".into(),
            provenance: serde_json::json!({"seed": rng.random::<u32>()}),
        }
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let ds = random_dataset(&mut rng);
            let bytes = encode_dataset(&ds).unwrap();
            let back = decode_dataset(Path::new("mem"), &bytes).unwrap();
            assert_eq!(back, ds);
            for (a, b) in back.matrices.iter().zip(&ds.matrices) {
                assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }

    #[test]
    fn truncated_or_corrupt_files_fail() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bytes = encode_dataset(&random_dataset(&mut rng)).unwrap();
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(decode_dataset(Path::new("x"), cut), Err(Error::Parse { .. })));
        assert!(matches!(decode_dataset(Path::new("x"), b"BSN-DRAWS 1\n{}\n"), Err(Error::Parse { .. })));
        let mut bad = bytes.clone();
        bad[DATASET_MAGIC.len() + 1] = b'[';
        assert!(matches!(decode_dataset(Path::new("x"), &bad), Err(Error::Parse { .. })));
    }

    #[test]
    fn scale_applies_on_access() {
        let m = DMatrix::from_row_slice(2, 2, &[2e4, 1e4, 1e4, 3e4]);
        let ds = CovDataset {
            p: 2,
            matrices: vec![m],
            ys: vec![1.0],
            signal: None,
            subject_ids: vec!["a".into()],
            scale: 1e-4,
            response_name: "y".into(),
            provenance: Value::Null,
        };
        let covs = ds.covariances().unwrap();
        assert_eq!(covs[0].matrix()[(0, 0)], 2.0);
        assert_eq!(covs[0].matrix()[(0, 1)], 1.0);
    }

    fn random_record(rng: &mut impl Rng) -> FitRecord {
        let spec = ModelSpec::new(4, 2, AnglePrior::Horseshoe { tau: 0.1, noncentered: true }, 1.0).unwrap();
        let dim = spec.layout().dim();
        let chains = (0..rng.random_range(1..4))
            .map(|_| {
                let n = rng.random_range(1..20);
                ChainDraws {
                    draws: (0..n).map(|_| (0..dim).map(|_| rng.random::<f64>() - 0.5).collect()).collect(),
                    log_density: (0..n).map(|_| -rng.random::<f64>() * 100.0).collect(),
                    divergent: (0..n).map(|_| rng.random()).collect(),
                    accept_stat: (0..n).map(|_| rng.random()).collect(),
                    step_size: rng.random(),
                    inv_mass: (0..dim).map(|_| rng.random()).collect(),
                    warmup_divergences: rng.random_range(0..5),
                }
            })
            .collect();
        let draws = Draws { chains };
        let mut diagnostics = Diagnostics::new(&draws, 1.05);
        // exercise non-finite diagnostics
        diagnostics.rhat[0] = f64::NAN;
        FitRecord {
            spec,
            feature_map: FeatureMap::Tangent,
            y_offset: rng.random(),
            scale: 1.0,
            mref: DMatrix::from_fn(4, 4, |_, _| rng.random()),
            sampler: SamplerConfig::default(),
            draws,
            diagnostics,
            converged: false,
            provenance: serde_json::json!({"note": "test"}),
        }
    }

    #[test]
    fn draws_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let rec = random_record(&mut rng);
            let bytes = encode_draws(&rec).unwrap();
            let back = decode_draws(Path::new("mem"), &bytes).unwrap();
            assert!(back.diagnostics.rhat[0].is_nan());
            let again = encode_draws(&back).unwrap();
            assert_eq!(bytes, again);
            assert_eq!(back.draws, rec.draws);
        }
    }

    #[test]
    fn file_roundtrip_and_atomic_write() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ds = random_dataset(&mut rng);
        let path = dir.path().join("nested/train.bsnd");
        save_dataset(&path, &ds).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
        let leftovers: Vec<_> = fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(leftovers.len(), 1);
        assert!(matches!(load_dataset(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn timeseries_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let a = SubjectTimeSeries::new("a", DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6])).unwrap();
        let b = SubjectTimeSeries::new("b", DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 3.5, 1e-300])).unwrap();
        let path = dir.path().join("ts.csv");
        save_timeseries(&path, &[a.clone(), b.clone()]).unwrap();
        let back = load_timeseries(&path).unwrap();
        assert_eq!(back, vec![a, b]);

        let bad = "subject_id,t,region_1\nx,1,0.5\nx,1,0.7\n";
        match read_timeseries(bad.as_bytes(), Path::new("bad.csv")) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "line 3"),
            other => panic!("{other:?}"),
        }
        let bad = "subject_id,t,region_2\nx,1,0.5\n";
        assert!(read_timeseries(bad.as_bytes(), Path::new("h.csv")).is_err());
        let bad = "subject_id,t,region_1\nx,1,abc\n";
        assert!(read_timeseries(bad.as_bytes(), Path::new("v.csv")).is_err());
    }
}
