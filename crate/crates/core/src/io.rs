//! On-disk formats.
//!
//! Matrix files (datasets, sample batches), little-endian:
//!
//! ```text
//! magic  "RDDS"            4 bytes
//! version u32              currently 1
//! n      u64               rows
//! D      u64               columns
//! data   n*D f64           row-major
//! ```
//!
//! Tensor-block files (score models, ridge estimates):
//!
//! ```text
//! magic  "RDMD"            4 bytes
//! version u32              currently 1
//! hlen   u32               length of the JSON header
//! header hlen bytes        UTF-8 JSON, see [`ModelHeader`]
//! nblk   u32               number of blocks
//! block  repeated nblk times:
//!        name_len u16, name (UTF-8), rows u64, cols u64, rows*cols f64 row-major
//! digest 32 bytes          SHA-256 of everything above
//! ```
//!
//! All writes go to a temporary sibling file that is renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ridge::RidgeEstimate;
use crate::schedule::DiffusionSchedule;
use crate::score::{CoveringHead, EncoderDecoderScore, Head, MlpHead};

pub const MATRIX_MAGIC: &[u8; 4] = b"RDDS";
pub const MODEL_MAGIC: &[u8; 4] = b"RDMD";
pub const FORMAT_VERSION: u32 = 1;

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!("unexpected end of file at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let len = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).ok_or_else(|| Error::Format("matrix too large".into()))?;
        let raw = self.take(len)?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }
}

fn push_matrix(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
}

pub fn encode_matrix(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + m.len() * 8);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    push_matrix(&mut out, m);
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<DMatrix<f64>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MATRIX_MAGIC {
        return Err(Error::Format("not a matrix file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported matrix file version {version}")));
    }
    let n = r.u64()? as usize;
    let d = r.u64()? as usize;
    let m = r.matrix(n, d)?;
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after matrix data".into()));
    }
    Ok(m)
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    atomic_write(path, &encode_matrix(m))
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    decode_matrix(&fs::read(path)?)
}

/// Labels stored as an `n x 1` matrix file.
pub fn write_vector(path: &Path, v: &DVector<f64>) -> Result<()> {
    write_matrix(path, &DMatrix::from_column_slice(v.len(), 1, v.as_slice()))
}

pub fn read_vector(path: &Path) -> Result<DVector<f64>> {
    let m = read_matrix(path)?;
    if m.ncols() != 1 {
        return Err(Error::Format(format!("expected a single-column file, got {} columns", m.ncols())));
    }
    Ok(DVector::from_column_slice(m.as_slice()))
}

/// CSV export: header `x0,...,x{D-1}[,y]`, one row per point.
pub fn write_csv(path: &Path, x: &DMatrix<f64>, y: Option<&DVector<f64>>) -> Result<()> {
    let mut s = String::new();
    let cols: Vec<String> = (0..x.ncols()).map(|j| format!("x{j}")).collect();
    s.push_str(&cols.join(","));
    if y.is_some() {
        s.push_str(",y");
    }
    s.push('\n');
    for i in 0..x.nrows() {
        let row: Vec<String> = (0..x.ncols()).map(|j| format!("{}", x[(i, j)])).collect();
        s.push_str(&row.join(","));
        if let Some(y) = y {
            s.push_str(&format!(",{}", y[i]));
        }
        s.push('\n');
    }
    atomic_write(path, s.as_bytes())
}

/// JSON header of a tensor-block file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    /// `covering`, `mlp` or `ridge`.
    pub variant: String,
    pub ambient_dim: usize,
    pub latent_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<DiffusionSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n2: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub header: ModelHeader,
    pub blocks: Vec<(String, DMatrix<f64>)>,
}

impl TensorFile {
    pub fn block(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.blocks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::Format(format!("missing block `{name}`")))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for (name, m) in &self.blocks {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::Format("block name too long".into()))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
            push_matrix(&mut out, m);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 + 32 {
            return Err(Error::Format("model file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Format("model file checksum mismatch (corrupted or truncated)".into()));
        }
        let mut r = Reader { buf: body, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model file version {version}")));
        }
        let hlen = r.u32()? as usize;
        let header: ModelHeader = serde_json::from_slice(r.take(hlen)?)?;
        let nblk = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(nblk);
        for _ in 0..nblk {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("block name is not UTF-8".into()))?
                .to_string();
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            blocks.push((name, r.matrix(rows, cols)?));
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after the last block".into()));
        }
        Ok(Self { header, blocks })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn as_vector(m: &DMatrix<f64>, what: &str) -> Result<DVector<f64>> {
    if m.ncols() != 1 {
        return Err(Error::Format(format!("block `{what}` must be a column")));
    }
    Ok(DVector::from_column_slice(m.as_slice()))
}

pub fn score_model_to_file(model: &EncoderDecoderScore, schedule: Option<DiffusionSchedule>) -> TensorFile {
    let mut blocks = vec![("V".to_string(), model.v.clone())];
    let mut nu = None;
    match &model.head {
        Head::Covering(c) => {
            nu = Some(c.nu);
            blocks.push(("SigmaInv".into(), c.sigma_inv()));
            blocks.push(("beta_tilde".into(), column(&c.beta)));
        }
        Head::Mlp(m) => {
            for (i, (w, b)) in m.layers().enumerate() {
                blocks.push((format!("W{i}"), w.clone()));
                blocks.push((format!("b{i}"), column(b)));
            }
        }
    }
    TensorFile {
        header: ModelHeader {
            variant: model.head.variant().into(),
            ambient_dim: model.ambient_dim(),
            latent_dim: model.latent_dim(),
            nu,
            schedule,
            lambda: None,
            n2: None,
        },
        blocks,
    }
}

pub fn score_model_from_file(file: &TensorFile) -> Result<EncoderDecoderScore> {
    let h = &file.header;
    let v = file.block("V")?.clone();
    if v.shape() != (h.ambient_dim, h.latent_dim) {
        return Err(Error::Format("block `V` does not match the header dimensions".into()));
    }
    let head = match h.variant.as_str() {
        "covering" => {
            let nu = h.nu.ok_or_else(|| Error::Format("covering model header lacks `nu`".into()))?;
            let beta = as_vector(file.block("beta_tilde")?, "beta_tilde")?;
            Head::Covering(CoveringHead::with_parameters(file.block("SigmaInv")?, beta, nu)?)
        }
        "mlp" => {
            let mut layers = Vec::new();
            let mut i = 0;
            while let (Ok(w), Ok(b)) = (file.block(&format!("W{i}")), file.block(&format!("b{i}"))) {
                layers.push((w.clone(), as_vector(b, "bias")?));
                i += 1;
            }
            Head::Mlp(MlpHead::from_layers(h.latent_dim, layers)?)
        }
        other => return Err(Error::Format(format!("not a score model: variant `{other}`"))),
    };
    Ok(EncoderDecoderScore { v, head })
}

pub fn ridge_to_file(est: &RidgeEstimate) -> TensorFile {
    let big_d = est.theta_hat.len();
    TensorFile {
        header: ModelHeader {
            variant: "ridge".into(),
            ambient_dim: big_d,
            latent_dim: 0,
            nu: None,
            schedule: None,
            lambda: Some(est.lambda),
            n2: Some(est.n2),
        },
        blocks: vec![
            ("theta_hat".into(), column(&est.theta_hat)),
            ("Sigma_hat_lambda".into(), est.sigma_hat_lambda.clone()),
        ],
    }
}

pub fn ridge_from_file(file: &TensorFile) -> Result<RidgeEstimate> {
    let h = &file.header;
    if h.variant != "ridge" {
        return Err(Error::Format(format!("not a ridge estimate: variant `{}`", h.variant)));
    }
    let theta_hat = as_vector(file.block("theta_hat")?, "theta_hat")?;
    let sigma_hat_lambda = file.block("Sigma_hat_lambda")?.clone();
    if theta_hat.len() != h.ambient_dim || sigma_hat_lambda.shape() != (h.ambient_dim, h.ambient_dim) {
        return Err(Error::Format("ridge blocks do not match the header dimension".into()));
    }
    Ok(RidgeEstimate {
        theta_hat,
        lambda: h.lambda.ok_or_else(|| Error::Format("ridge header lacks `lambda`".into()))?,
        n2: h.n2.ok_or_else(|| Error::Format("ridge header lacks `n2`".into()))?,
        sigma_hat_lambda,
    })
}
