//! Model container.
//!
//! Little-endian layout:
//!
//! ```text
//! offset  size  field
//! 0       8     magic "ICDOTMDL"
//! 8       4     u32 format version (1)
//! 12      1     u8 scalar width in bytes (4 = f32, 8 = f64)
//! 13      1     u8 fusion mode (0 mean, 1 max, 2 self-attention)
//! 14      2     reserved, zero
//! 16      4     u32 M (embedding dimension)
//! 20      4     u32 K (attention heads)
//! 24      8     f64 alpha
//! 32      ...   disease vocabulary:   u32 count, then per code u32 byte length + UTF-8 bytes
//!         ...   procedure vocabulary: same encoding
//!         ...   U  |D| x M   row-major (one row per disease)
//!         ...   V  |P| x M   row-major
//!         ...   A  K x M x M
//!         ...   a  K x M
//!         ...   B  K x K
//!         ...   b  K
//! ```
//!
//! Tensor values use the stored scalar width. Loading converts to the
//! requested scalar type.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionParams, FusionMode};
use crate::data::{CodeKind, CodeVocabulary};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::Scalar;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"ICDOTMDL";
pub const FORMAT_VERSION: u32 = 1;

/// Parameters together with the vocabularies that give their rows meaning.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel<T> {
    pub params: ModelParams<T>,
    pub diseases: CodeVocabulary,
    pub procedures: CodeVocabulary,
}

/// JSON sidecar written next to the model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub format_version: u32,
    pub seed: u64,
    pub epochs: usize,
    /// SHA-256 of the training data file, hex encoded.
    pub dataset_sha256: String,
    pub train_admissions: usize,
    pub config: TrainConfig,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::ModelFormat(msg.into())
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| format_err(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_vocab<W: Write>(w: &mut W, vocab: &CodeVocabulary) -> Result<()> {
    write_u32(w, vocab.len())?;
    for code in vocab.codes() {
        write_u32(w, code.len())?;
        w.write_all(code.as_bytes())?;
    }
    Ok(())
}

fn write_values<T: Scalar, W: Write>(w: &mut W, values: &[T]) -> Result<()> {
    for &v in values {
        match T::WIDTH {
            4 => w.write_all(&(v.as_f64() as f32).to_le_bytes())?,
            _ => w.write_all(&v.as_f64().to_le_bytes())?,
        }
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| format_err(format!("reading {what}: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?) as usize)
    }

    fn vocab(&mut self, kind: CodeKind) -> Result<CodeVocabulary> {
        let count = self.u32("vocabulary size")?;
        let mut codes = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let len = self.u32("code length")?;
            let mut buf = vec![0u8; len];
            self.inner
                .read_exact(&mut buf)
                .map_err(|e| format_err(format!("reading code: {e}")))?;
            codes.push(String::from_utf8(buf).map_err(|_| format_err("code is not UTF-8"))?);
        }
        CodeVocabulary::from_codes(kind, codes)
    }

    fn values<T: Scalar>(&mut self, width: u8, out: &mut [T]) -> Result<()> {
        for slot in out.iter_mut() {
            let v = match width {
                4 => f32::from_le_bytes(self.bytes::<4>("tensor")?) as f64,
                _ => f64::from_le_bytes(self.bytes::<8>("tensor")?),
            };
            if !v.is_finite() {
                return Err(format_err("non-finite parameter"));
            }
            *slot = T::lit(v);
        }
        Ok(())
    }
}

impl<T: Scalar> TrainedModel<T> {
    pub fn new(params: ModelParams<T>, diseases: CodeVocabulary, procedures: CodeVocabulary) -> Result<Self> {
        if params.disease_count() != diseases.len() || params.procedure_count() != procedures.len() {
            return Err(Error::Shape(format!(
                "model has {}x{} codes, vocabularies have {}x{}",
                params.disease_count(),
                params.procedure_count(),
                diseases.len(),
                procedures.len()
            )));
        }
        Ok(Self {
            params,
            diseases,
            procedures,
        })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let p = &self.params;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[T::WIDTH, p.fusion.code(), 0, 0])?;
        write_u32(&mut w, p.dim())?;
        write_u32(&mut w, p.heads())?;
        w.write_all(&p.alpha.to_le_bytes())?;
        write_vocab(&mut w, &self.diseases)?;
        write_vocab(&mut w, &self.procedures)?;
        for tensor in p.tensors() {
            write_values(&mut w, tensor)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut r = Reader { inner: input };
        if &r.bytes::<8>("magic")? != MAGIC {
            return Err(format_err("bad magic header"));
        }
        let version = u32::from_le_bytes(r.bytes::<4>("version")?);
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported format version {version}")));
        }
        let [width, fusion, _, _] = r.bytes::<4>("flags")?;
        if width != 4 && width != 8 {
            return Err(format_err(format!("unsupported scalar width {width}")));
        }
        let fusion = FusionMode::from_code(fusion)
            .ok_or_else(|| format_err(format!("unknown fusion mode {fusion}")))?;
        let dim = r.u32("M")?;
        let heads = r.u32("K")?;
        if dim == 0 || heads == 0 {
            return Err(format_err("M and K must be positive"));
        }
        let alpha = f64::from_le_bytes(r.bytes::<8>("alpha")?);
        let diseases = r.vocab(CodeKind::Disease)?;
        let procedures = r.vocab(CodeKind::Procedure)?;

        let mut params = ModelParams {
            disease_emb: ndarray::Array2::zeros((diseases.len(), dim)),
            procedure_emb: ndarray::Array2::zeros((procedures.len(), dim)),
            attention: AttentionParams::zeros(dim, heads),
            fusion,
            alpha,
        };
        for tensor in params.tensors_mut() {
            r.values(width, tensor)?;
        }
        let mut rest = Vec::new();
        r.inner.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(format_err(format!("{} trailing bytes", rest.len())));
        }
        Self::new(params, diseases, procedures)
    }
}
