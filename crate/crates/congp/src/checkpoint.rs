//! Versioned binary checkpoints of the full continual state (plus the
//! evaluation report, when one exists): little-endian, all floating-point
//! payloads at full 64-bit precision, integrity-guarded by a SHA-256
//! trailer. Loading verifies length, magic, version, and checksum before
//! touching the payload, so a truncated or corrupted file never yields a
//! partial state.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use sha2::{Digest, Sha256};

use congp_core::gaussian::DiagGaussian;
use congp_core::Real;

use crate::eval::EvalReport;
use crate::model::{ContinualState, Coupling, InducingBlock};
use crate::{Error, Result};

pub const MAGIC: [u8; 8] = *b"CGPCKPT1";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

fn corrupt(detail: &str) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {detail}"))
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_floats<'a>(out: &mut Vec<u8>, values: impl IntoIterator<Item = &'a Real>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_block(out: &mut Vec<u8>, block: &InducingBlock) {
    put_u64(out, block.num_inducing());
    out.push(u8::from(block.frozen()));
    put_floats(out, block.z().iter());
    put_floats(out, block.m().iter());
    for k in 0..block.num_classes() {
        put_floats(out, block.s_raw(k).iter());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| corrupt("length overflow"))?;
        if end > self.buf.len() {
            return Err(corrupt("payload shorter than its declared contents"));
        }
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn flag(&mut self, name: &str) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(corrupt(&format!("flag {name} has value {other}"))),
        }
    }

    fn usize(&mut self) -> Result<usize> {
        let raw = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        usize::try_from(raw).map_err(|_| corrupt("count exceeds the address space"))
    }

    fn floats(&mut self, n: usize) -> Result<Vec<Real>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| corrupt("size overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| Real::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn array1(&mut self, n: usize) -> Result<Array1<Real>> {
        Ok(Array1::from_vec(self.floats(n)?))
    }

    fn array2(&mut self, rows: usize, cols: usize) -> Result<Array2<Real>> {
        let n = rows.checked_mul(cols).ok_or_else(|| corrupt("shape overflow"))?;
        Array2::from_shape_vec((rows, cols), self.floats(n)?)
            .map_err(|e| corrupt(&format!("shape error: {e}")))
    }

    fn block(&mut self, input_dim: usize, num_classes: usize) -> Result<InducingBlock> {
        let rows = self.usize()?;
        let frozen = self.flag("frozen")?;
        let z = self.array2(rows, input_dim)?;
        let m = self.array2(rows, num_classes)?;
        let s_raw = (0..num_classes)
            .map(|_| self.array2(rows, rows))
            .collect::<Result<Vec<_>>>()?;
        InducingBlock::from_parts(z, m, s_raw, frozen)
    }
}

/// Serializes the state (and optional report) to the versioned format.
pub fn to_bytes(state: &ContinualState, report: Option<&EvalReport>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(match state.coupling() {
        Coupling::AutoRegressive => 0,
        Coupling::BlockDiagonal => 1,
    });
    out.push(u8::from(state.tied_lengthscales()));
    out.push(u8::from(state.point_hypers()));
    out.push(u8::from(state.replaced_block().is_some()));
    put_u64(&mut out, state.input_dim());
    put_u64(&mut out, state.num_classes());
    put_u64(&mut out, state.completed_tasks());
    put_u64(&mut out, state.num_blocks());
    put_u64(&mut out, state.hyper_dim());
    for q in [state.hyper_q(), state.hyper_prev()] {
        put_floats(&mut out, q.mean().iter());
        put_floats(&mut out, q.log_std().iter());
    }
    for block in state.blocks() {
        put_block(&mut out, block);
    }
    if let Some(replaced) = state.replaced_block() {
        put_block(&mut out, replaced);
    }
    match report {
        Some(r) => {
            out.push(1);
            let json = r.to_json()?;
            put_u64(&mut out, json.len());
            out.extend_from_slice(json.as_bytes());
        }
        None => out.push(0),
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Deserializes a checkpoint, verifying length, magic, version, and checksum
/// before parsing anything.
pub fn from_bytes(bytes: &[u8]) -> Result<(ContinualState, Option<EvalReport>)> {
    if bytes.len() < MAGIC.len() + 4 + CHECKSUM_LEN {
        return Err(corrupt("file shorter than the fixed header and trailer"));
    }
    if bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let body_len = bytes.len() - CHECKSUM_LEN;
    let digest = Sha256::digest(&bytes[..body_len]);
    if digest.as_slice() != &bytes[body_len..] {
        return Err(corrupt("checksum mismatch"));
    }

    let mut c = Cursor { buf: &bytes[12..body_len], pos: 0 };
    let coupling = match c.u8()? {
        0 => Coupling::AutoRegressive,
        1 => Coupling::BlockDiagonal,
        other => return Err(corrupt(&format!("unknown coupling tag {other}"))),
    };
    let tied = c.flag("tied_lengthscales")?;
    let point_hypers = c.flag("point_hypers")?;
    let has_replaced = c.flag("has_replaced")?;
    let input_dim = c.usize()?;
    let num_classes = c.usize()?;
    let completed_tasks = c.usize()?;
    let num_blocks = c.usize()?;
    let hyper_dim = c.usize()?;
    let mut posteriors = Vec::with_capacity(2);
    for _ in 0..2 {
        let mean = c.array1(hyper_dim)?;
        let log_std = c.array1(hyper_dim)?;
        posteriors.push(DiagGaussian::new(mean, log_std)?);
    }
    let hyper_prev = posteriors.pop().expect("two posteriors");
    let hyper_q = posteriors.pop().expect("two posteriors");
    let blocks = (0..num_blocks)
        .map(|_| c.block(input_dim, num_classes))
        .collect::<Result<Vec<_>>>()?;
    let replaced = has_replaced.then(|| c.block(input_dim, num_classes)).transpose()?;
    let report = if c.flag("report_present")? {
        let len = c.usize()?;
        let text = std::str::from_utf8(c.take(len)?)
            .map_err(|_| corrupt("report is not UTF-8"))?;
        Some(EvalReport::from_json(text)?)
    } else {
        None
    };
    if c.pos != c.buf.len() {
        return Err(corrupt("trailing bytes after the declared contents"));
    }
    let state = ContinualState::from_parts(
        input_dim,
        num_classes,
        coupling,
        tied,
        point_hypers,
        blocks,
        replaced,
        hyper_q,
        hyper_prev,
        completed_tasks,
    )?;
    Ok((state, report))
}

pub fn save(path: &Path, state: &ContinualState, report: Option<&EvalReport>) -> Result<()> {
    Ok(fs::write(path, to_bytes(state, report)?)?)
}

pub fn load(path: &Path) -> Result<(ContinualState, Option<EvalReport>)> {
    from_bytes(&fs::read(path)?)
}

/// Serialize → deserialize → serialize again and insist the two byte strings
/// match, which pins every floating-point payload bitwise; returns the
/// reloaded pair.
pub fn checkpoint_roundtrip(
    state: &ContinualState,
    report: Option<&EvalReport>,
) -> Result<(ContinualState, Option<EvalReport>)> {
    let bytes = to_bytes(state, report)?;
    let (reloaded_state, reloaded_report) = from_bytes(&bytes)?;
    let again = to_bytes(&reloaded_state, reloaded_report.as_ref())?;
    if again != bytes {
        return Err(Error::Checkpoint(
            "round-trip re-serialization does not match".into(),
        ));
    }
    Ok((reloaded_state, reloaded_report))
}
