//! On-disk tensors and dataset manifests.
//!
//! Tensor layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic      4 bytes  "NST1"
//! offset 4   dtype      u8       0 = f32, 1 = f64
//! offset 5   ndim       u8       1..=3
//! offset 6   dims       ndim × u64
//! then       payload    row-major values, product(dims) × dtype size
//! ```
//!
//! Time series are stored channels × samples; feature matrices samples ×
//! features. Manifests are JSON files naming a tensor relative to the
//! manifest's own directory.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::series::TimeSeries;

pub const MAGIC: [u8; 4] = *b"NST1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, TensorError> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            _ => Err(TensorError::UnknownDtype { code }),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A dense row-major tensor of rank 1 to 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(TensorError::BadRank { ndim: dims.len() as u8 });
        }
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(TensorError::ShapeMismatch { dims, len: data.len(), expected });
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows()).flat_map(|r| m.row(r).iter().copied().collect::<Vec<_>>()).collect();
        Self { dims: vec![m.nrows(), m.ncols()], data }
    }

    /// Interpret as a matrix. Rank-1 tensors become a single row.
    pub fn to_matrix(&self) -> Result<DMatrix<f64>, TensorError> {
        match self.dims.as_slice() {
            [n] => Ok(DMatrix::from_row_slice(1, *n, &self.data)),
            [r, c] => Ok(DMatrix::from_row_slice(*r, *c, &self.data)),
            _ => Err(TensorError::BadRank { ndim: self.dims.len() as u8 }),
        }
    }

    pub fn from_series(ts: &TimeSeries) -> Self {
        let data = ts.channels.iter().flatten().copied().collect();
        Self { dims: vec![ts.n_channels(), ts.n_samples()], data }
    }

    pub fn to_series(&self, rate_hz: f64) -> Result<TimeSeries> {
        let (c, n) = match self.dims.as_slice() {
            [n] => (1, *n),
            [c, n] => (*c, *n),
            _ => return Err(TensorError::BadRank { ndim: self.dims.len() as u8 }.into()),
        };
        let channels = (0..c).map(|i| self.data[i * n..(i + 1) * n].to_vec()).collect();
        TimeSeries::new(rate_hz, channels)
    }

    pub fn to_bytes(&self, dtype: DType) -> Result<Vec<u8>, TensorError> {
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        let mut out = Vec::with_capacity(6 + 8 * self.dims.len() + self.data.len() * dtype.size());
        out.extend_from_slice(&MAGIC);
        out.push(dtype.code());
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match dtype {
            DType::F32 => self.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => self.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, DType), TensorError> {
        let take = |offset: usize, len: usize| -> Result<&[u8], TensorError> {
            bytes.get(offset..offset + len).ok_or(TensorError::Truncated {
                offset: offset as u64,
                expected: len as u64,
                found: bytes.len().saturating_sub(offset) as u64,
            })
        };
        let magic: [u8; 4] = take(0, 4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(TensorError::BadMagic { found: magic });
        }
        let dtype = DType::from_code(take(4, 1)?[0])?;
        let ndim = take(5, 1)?[0];
        if !(1..=3).contains(&ndim) {
            return Err(TensorError::BadRank { ndim });
        }
        let mut dims = Vec::with_capacity(ndim as usize);
        for i in 0..ndim as usize {
            let raw = take(6 + 8 * i, 8)?;
            dims.push(u64::from_le_bytes(raw.try_into().expect("8 bytes")) as usize);
        }
        let header = 6 + 8 * ndim as usize;
        let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or(
            TensorError::Truncated { offset: header as u64, expected: u64::MAX, found: 0 },
        )?;
        let payload_len = count
            .checked_mul(dtype.size())
            .ok_or(TensorError::Truncated { offset: header as u64, expected: u64::MAX, found: 0 })?;
        let payload = take(header, payload_len)?;
        let end = header + payload_len;
        if bytes.len() > end {
            return Err(TensorError::TrailingBytes { offset: end as u64, extra: (bytes.len() - end) as u64 });
        }
        let data: Vec<f64> = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        Ok((Self { dims, data }, dtype))
    }
}

pub fn write_tensor(path: &Path, tensor: &Tensor, dtype: DType) -> Result<()> {
    let bytes = tensor
        .to_bytes(dtype)
        .map_err(|source| Error::Tensor { path: path.to_path_buf(), source })?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<(Tensor, DType)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::from_bytes(&bytes).map_err(|source| Error::Tensor { path: path.to_path_buf(), source })
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_tensor(path, &Tensor::from_matrix(m), DType::F64)
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let (t, _) = read_tensor(path)?;
    t.to_matrix().map_err(|source| Error::Tensor { path: path.to_path_buf(), source })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    StimulusWaveform,
    Features,
    Responses,
}

/// JSON description of one stored dataset tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub rate_hz: f64,
    pub role: Role,
    pub channel_names: Vec<String>,
    pub tensor_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeats: Option<Vec<String>>,
    /// Directory relative paths resolve against; set on load.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Self =
            serde_json::from_str(&text).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        if !(m.rate_hz > 0.0 && m.rate_hz.is_finite()) {
            return Err(Error::Manifest { path: path.to_path_buf(), reason: format!("rate_hz {} not positive", m.rate_hz) });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.base_dir.join(rel)
    }

    fn channel_dim(&self, dims: &[usize]) -> usize {
        match (self.role, dims) {
            (_, [_]) => 1,
            (Role::Features, [_, f]) => *f,
            (_, [c, _]) => *c,
            (_, d) => d[0],
        }
    }

    fn check_channels(&self, path: &Path, dims: &[usize]) -> Result<()> {
        let cdim = self.channel_dim(dims);
        if cdim != self.channel_names.len() {
            return Err(Error::Manifest {
                path: path.to_path_buf(),
                reason: format!("{} channel names but tensor channel dimension is {cdim}", self.channel_names.len()),
            });
        }
        Ok(())
    }

    /// Load the main tensor as a time series (stimulus or responses).
    pub fn load_series(&self) -> Result<TimeSeries> {
        let path = self.resolve(&self.tensor_path);
        let (t, _) = read_tensor(&path)?;
        self.check_channels(&path, t.dims())?;
        t.to_series(self.rate_hz)
    }

    pub fn load_matrix(&self) -> Result<DMatrix<f64>> {
        let path = self.resolve(&self.tensor_path);
        let (t, _) = read_tensor(&path)?;
        self.check_channels(&path, t.dims())?;
        t.to_matrix().map_err(|source| Error::Tensor { path, source })
    }

    /// Full validation: main tensor and every repeat readable, consistent.
    pub fn validate(&self) -> Result<()> {
        let path = self.resolve(&self.tensor_path);
        let (t, _) = read_tensor(&path)?;
        self.check_channels(&path, t.dims())?;
        if let Some(reps) = &self.repeats {
            let mut first: Option<Vec<usize>> = None;
            for r in reps {
                let p = self.resolve(r);
                let (rt, _) = read_tensor(&p)?;
                match &first {
                    None => first = Some(rt.dims().to_vec()),
                    Some(d) if d.as_slice() != rt.dims() => {
                        return Err(Error::Manifest {
                            path: p,
                            reason: format!("repeat dims {:?} differ from {:?}", rt.dims(), d),
                        })
                    }
                    _ => {}
                }
                self.check_channels(&p, rt.dims())?;
            }
        }
        Ok(())
    }
}

/// Write `ts` as `<dir>/<name>.nst` plus `<dir>/<name>.json`.
pub fn write_series(dir: &Path, name: &str, ts: &TimeSeries, role: Role, repeats: Option<Vec<String>>) -> Result<PathBuf> {
    let tensor_file = format!("{name}.nst");
    write_tensor(&dir.join(&tensor_file), &Tensor::from_series(ts), DType::F64)?;
    let prefix = match role {
        Role::StimulusWaveform => "audio",
        Role::Features => "feat",
        Role::Responses => "ch",
    };
    let manifest = DatasetManifest {
        name: name.to_string(),
        rate_hz: ts.rate_hz,
        role,
        channel_names: (0..ts.n_channels()).map(|i| format!("{prefix}{i:03}")).collect(),
        tensor_path: tensor_file,
        repeats,
        base_dir: dir.to_path_buf(),
    };
    let path = dir.join(format!("{name}.json"));
    manifest.save(&path)?;
    Ok(path)
}

/// Element-wise mean over a manifest's repeated presentations.
pub fn average_repeats(manifest: &DatasetManifest) -> Result<TimeSeries> {
    let reps = manifest
        .repeats
        .as_ref()
        .filter(|r| !r.is_empty())
        .ok_or_else(|| Error::Manifest { path: manifest.base_dir.clone(), reason: "no repeats listed".into() })?;
    let series = reps
        .iter()
        .map(|r| {
            let (t, _) = read_tensor(&manifest.resolve(r))?;
            Ok((t.dims().to_vec(), t.to_series(manifest.rate_hz)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (dims0, _) = &series[0];
    for (r, (d, _)) in reps.iter().zip(&series) {
        if d != dims0 {
            return Err(Error::Manifest {
                path: manifest.resolve(r),
                reason: format!("repeat dims {d:?} differ from {dims0:?}"),
            });
        }
    }
    mean_of(&series.into_iter().map(|(_, s)| s).collect::<Vec<_>>())
}

/// Element-wise mean of equally shaped series.
///
/// Uses the running-mean recurrence, so averaging identical copies returns
/// the input bit for bit.
pub fn mean_of(series: &[TimeSeries]) -> Result<TimeSeries> {
    let first = series.first().ok_or_else(|| Error::param("no series to average"))?;
    let mut acc = first.clone();
    for (k, s) in series.iter().enumerate().skip(1) {
        if s.n_channels() != first.n_channels() || s.n_samples() != first.n_samples() {
            return Err(Error::shape("series to average differ in shape"));
        }
        let count = (k + 1) as f64;
        for (a, b) in acc.channels.iter_mut().zip(&s.channels) {
            a.iter_mut().zip(b).for_each(|(m, x)| *m += (x - *m) / count);
        }
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_f32_matrix_has_expected_size_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.nst");
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        write_tensor(&p, &t, DType::F32).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 46);
        let (back, dtype) = read_tensor(&p).unwrap();
        assert_eq!(dtype, DType::F32);
        assert_eq!(back, t);
    }

    #[test]
    fn single_zero_f64() {
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        let (back, _) = Tensor::from_bytes(&t.to_bytes(DType::F64).unwrap()).unwrap();
        assert_eq!(back.data()[0].to_bits(), 0.0f64.to_bits());
    }

    #[test]
    fn random_matrix_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = DMatrix::from_fn(100, 50, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.nst");
        write_matrix(&p, &m).unwrap();
        let back = read_matrix(&p).unwrap();
        assert_eq!((back - &m).abs().max(), 0.0);
    }

    #[test]
    fn distinct_decode_errors() {
        let t = Tensor::new(vec![2, 2], vec![1.0; 4]).unwrap();
        let good = t.to_bytes(DType::F64).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[..4].copy_from_slice(b"XXXX");
        assert!(matches!(Tensor::from_bytes(&bad_magic), Err(TensorError::BadMagic { .. })));

        let truncated = &good[..good.len() - 5];
        assert!(matches!(Tensor::from_bytes(truncated), Err(TensorError::Truncated { offset: 22, .. })));

        let mut bad_dtype = good.clone();
        bad_dtype[4] = 9;
        assert!(matches!(Tensor::from_bytes(&bad_dtype), Err(TensorError::UnknownDtype { code: 9 })));

        let mut trailing = good;
        trailing.push(0);
        assert!(matches!(Tensor::from_bytes(&trailing), Err(TensorError::TrailingBytes { .. })));
    }

    #[test]
    fn non_finite_rejected_on_write() {
        let t = Tensor::new(vec![3], vec![1.0, f64::NAN, 2.0]).unwrap();
        assert_eq!(t.to_bytes(DType::F64), Err(TensorError::NonFinite { index: 1 }));
    }

    fn repeat_manifest(dir: &Path, reps: &[TimeSeries]) -> DatasetManifest {
        let names: Vec<String> = reps
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let f = format!("rep{i}.nst");
                write_tensor(&dir.join(&f), &Tensor::from_series(r), DType::F64).unwrap();
                f
            })
            .collect();
        let path = write_series(dir, "avg", &reps[0], Role::Responses, Some(names)).unwrap();
        DatasetManifest::load(&path).unwrap()
    }

    #[test]
    fn average_of_two_repeats() {
        let dir = tempfile::tempdir().unwrap();
        let a = TimeSeries::single(0.5, vec![1.0, 3.0]).unwrap();
        let b = TimeSeries::single(0.5, vec![3.0, 1.0]).unwrap();
        let m = repeat_manifest(dir.path(), &[a.clone(), b]);
        let avg = average_repeats(&m).unwrap();
        assert_eq!(avg.channels[0], vec![2.0, 2.0]);
        assert_eq!(avg.rate_hz, 0.5);

        let single = repeat_manifest(dir.path(), &[a.clone()]);
        assert_eq!(average_repeats(&single).unwrap(), a);
    }

    #[test]
    fn average_rejects_mismatched_dims() {
        let dir = tempfile::tempdir().unwrap();
        let a = TimeSeries::single(1.0, vec![1.0, 3.0]).unwrap();
        let b = TimeSeries::single(1.0, vec![3.0, 1.0, 2.0]).unwrap();
        let m = repeat_manifest(dir.path(), &[a, b]);
        assert!(average_repeats(&m).is_err());
        assert!(m.validate().is_err());
    }

    #[test]
    fn noisy_repeats_average_within_clt_bound() {
        use rand_distr::{Distribution, Normal};
        let dir = tempfile::tempdir().unwrap();
        let n = 400;
        let signal: Vec<f64> = (0..n).map(|t| (t as f64 * 0.1).sin()).collect();
        let sigma = 0.5;
        let normal = Normal::new(0.0, sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reps: Vec<TimeSeries> = (0..10)
            .map(|_| TimeSeries::single(1.0, signal.iter().map(|s| s + normal.sample(&mut rng)).collect()).unwrap())
            .collect();
        let m = repeat_manifest(dir.path(), &reps);
        let avg = average_repeats(&m).unwrap();
        let bound = 3.0 * sigma / 10f64.sqrt();
        let outside = avg.channels[0].iter().zip(&signal).filter(|(a, s)| (*a - *s).abs() > bound).count();
        // 3σ bound: ~0.27% of samples may fall outside by chance.
        assert!(outside <= n / 100, "{outside} samples outside the CLT bound");
    }

    #[test]
    fn manifest_channel_count_checked() {
        let dir = tempfile::tempdir().unwrap();
        let ts = TimeSeries::new(1.0, vec![vec![0.0; 4]; 3]).unwrap();
        let p = write_series(dir.path(), "x", &ts, Role::Responses, None).unwrap();
        let mut m = DatasetManifest::load(&p).unwrap();
        assert!(m.validate().is_ok());
        m.channel_names.pop();
        assert!(m.load_series().is_err());
    }

    proptest! {
        #[test]
        fn write_read_identity(dims in prop::collection::vec(1usize..6, 1..=3), seed in any::<u64>(), f32_mode in any::<bool>()) {
            let n: usize = dims.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dtype = if f32_mode { DType::F32 } else { DType::F64 };
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = rng.random::<f64>() * 200.0 - 100.0;
                    if f32_mode { f64::from(v as f32) } else { v }
                })
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let (back, d) = Tensor::from_bytes(&t.to_bytes(dtype).unwrap()).unwrap();
            prop_assert_eq!(d, dtype);
            prop_assert_eq!(back, t);
        }

        #[test]
        fn averaging_identical_copies_is_exact(vals in prop::collection::vec(-1e3f64..1e3, 1..20), n in 1usize..6) {
            let ts = TimeSeries::single(1.0, vals).unwrap();
            let copies = vec![ts.clone(); n];
            let avg = mean_of(&copies).unwrap();
            prop_assert_eq!(avg, ts);
        }
    }
}
