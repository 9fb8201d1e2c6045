//! Model container and report writers.
//!
//! Model file layout, all little-endian:
//!
//! ```text
//! "TRCM"  u16 version = 1  u32 student count (= 2)
//! per student:
//!     u32 d_in  u32 d_hidden  u32 classes  f64 dropout_rate
//!     f64 × (d_in·d_hidden)   w1, row-major
//!     f64 × d_hidden          b1
//!     f64 × (d_hidden·classes) w2, row-major
//!     f64 × classes           b2
//! u8 teacher mode (0 learned, 1 fixed)
//! f64 × 3 z   (zeros for a fixed teacher)
//! f64 × 3 mapped (τ_MI, λ_u, λ_adv)
//! f64 teacher lr  f64 gate temperature
//! ```
//!
//! Parameters are stored in double precision, so a save/load cycle is exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::engine::{TeacherMode, TeacherState, TraceRow, TrainingReport};
use crate::numerics::DenseMatrix;
use crate::student::StudentParams;
use crate::teacher::{StrategyTriple, TeacherStrategy};
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"TRCM";
pub const MODEL_VERSION: u16 = 1;

/// Both students and the teacher.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub students: [StudentParams; 2],
    pub teacher: TeacherState,
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_model(model: &SavedModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    for s in &model.students {
        for dim in [s.d_in(), s.d_hidden(), s.classes()] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        out.extend_from_slice(&s.dropout_rate.to_le_bytes());
        put_f64s(&mut out, s.w1.data());
        put_f64s(&mut out, &s.b1);
        put_f64s(&mut out, s.w2.data());
        put_f64s(&mut out, &s.b2);
    }
    let t = &model.teacher;
    out.push(match t.mode {
        TeacherMode::Learned => 0,
        TeacherMode::Fixed => 1,
    });
    let (z, lr, temp) = match &t.strategy {
        Some(s) => (s.z, s.lr_teacher, s.gate_temperature),
        None => ([0.0; 3], 0.0, 0.0),
    };
    put_f64s(&mut out, &z);
    put_f64s(&mut out, &t.triple().as_array());
    put_f64s(&mut out, &[lr, temp]);
    out
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated: expected {n} more bytes")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn decode_model(path: &Path, bytes: &[u8]) -> Result<SavedModel> {
    let mut c = Cursor { path, bytes, pos: 0 };
    if c.take(4)? != MODEL_MAGIC {
        c.pos = 0;
        return Err(c.err("bad magic, expected \"TRCM\""));
    }
    let version = u16::from_le_bytes(c.take(2)?.try_into().unwrap());
    if version != MODEL_VERSION {
        c.pos = 4;
        return Err(c.err(format!("unsupported version {version}")));
    }
    let count = c.u32()?;
    if count != 2 {
        return Err(c.err(format!("expected 2 students, found {count}")));
    }
    let mut students = Vec::with_capacity(2);
    for _ in 0..2 {
        let at = c.pos;
        let (d_in, d_h, classes) = (c.u32()?, c.u32()?, c.u32()?);
        let rate = c.f64()?;
        let mut s = StudentParams::zeros(d_in, d_h, classes, rate).map_err(|e| {
            c.pos = at;
            c.err(e.to_string())
        })?;
        s.w1 = DenseMatrix::from_vec(d_in, d_h, c.f64s(d_in * d_h)?)?;
        s.b1 = c.f64s(d_h)?;
        s.w2 = DenseMatrix::from_vec(d_h, classes, c.f64s(d_h * classes)?)?;
        s.b2 = c.f64s(classes)?;
        students.push(s);
    }
    let mode = match c.take(1)?[0] {
        0 => TeacherMode::Learned,
        1 => TeacherMode::Fixed,
        other => return Err(c.err(format!("unknown teacher mode {other}"))),
    };
    let z = c.f64s(3)?;
    let mapped = c.f64s(3)?;
    let lr = c.f64()?;
    let temp = c.f64()?;
    if c.pos != bytes.len() {
        return Err(c.err("trailing bytes"));
    }
    let fixed = StrategyTriple::new(mapped[0], mapped[1], mapped[2]);
    let strategy = (mode == TeacherMode::Learned).then(|| TeacherStrategy {
        z: [z[0], z[1], z[2]],
        lr_teacher: lr,
        gate_temperature: temp,
    });
    let s1 = students.pop().expect("two students");
    let s0 = students.pop().expect("two students");
    Ok(SavedModel {
        students: [s0, s1],
        teacher: TeacherState {
            mode,
            strategy,
            fixed,
        },
    })
}

pub fn save_model(path: &Path, model: &SavedModel) -> Result<()> {
    fs::write(path, encode_model(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(path, &bytes)
}

/// Pretty JSON; struct fields keep declaration order and maps are sorted.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let value = serde_json::to_value(value)?;
    let mut text = serde_json::to_string_pretty(&value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn curves_csv(report: &TrainingReport) -> String {
    let mut out = String::from(
        "epoch,l_sup,l_unsup,l_adv,tau_mi,lambda_u,lambda_adv,accuracy,mask_rate,impurity,mean_entropy,agreement\n",
    );
    for e in &report.epochs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            e.epoch,
            e.l_sup,
            e.l_unsup,
            e.l_adv,
            e.tau_mi,
            e.lambda_u,
            e.lambda_adv,
            e.accuracy,
            e.mask_rate,
            fmt_opt(e.impurity),
            e.mean_entropy,
            e.agreement
        ));
    }
    out
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,epoch,tau_mi,lambda_u,lambda_adv\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.epoch, r.tau_mi, r.lambda_u, r.lambda_adv
        ));
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn model(mode: TeacherMode) -> SavedModel {
        let mut r = rng::seeded(3);
        let s0 = StudentParams::init(5, 4, 3, 0.1, &mut r).unwrap();
        let s1 = StudentParams::init(2, 6, 3, 0.2, &mut r).unwrap();
        let init = StrategyTriple::new(0.05, 0.5, 0.5);
        let teacher = TeacherState {
            mode,
            strategy: (mode == TeacherMode::Learned)
                .then(|| TeacherStrategy::from_triple(init, 0.01, 0.01).unwrap()),
            fixed: if mode == TeacherMode::Fixed { StrategyTriple::new(0.1, 0.0, 0.0) } else { init },
        };
        SavedModel { students: [s0, s1], teacher }
    }

    #[test]
    fn model_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for mode in [TeacherMode::Learned, TeacherMode::Fixed] {
            let m = model(mode);
            let p = dir.path().join("m.trcm");
            save_model(&p, &m).unwrap();
            let back = load_model(&p).unwrap();
            assert_eq!(back.students, m.students);
            assert_eq!(back.teacher.triple(), m.teacher.triple());
            assert_eq!(back.teacher.strategy, m.teacher.strategy);
            assert_eq!(encode_model(&back), fs::read(&p).unwrap());
        }
    }

    #[test]
    fn corrupt_models_are_rejected() {
        let p = Path::new("m.trcm");
        let bytes = encode_model(&model(TeacherMode::Learned));
        assert!(matches!(decode_model(p, &bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_model(p, &bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(decode_model(p, &bad), Err(Error::Format { offset: 4, .. })));
    }
}
