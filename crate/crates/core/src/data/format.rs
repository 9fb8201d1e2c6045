//! On-disk embedding and label files.
//!
//! Binary embeddings: `"TRCO"`, `u16` version 1, `u32` n, `u32` d, then
//! `n·d` little-endian `f32` in row-major order. Binary labels: `"TRCL"`,
//! `u16` version 1, `u32` n, then `n` little-endian `i32` with `-1` meaning
//! unlabeled. Files ending in `.csv` are read as text instead: a header
//! `f0,...,f{d-1}` followed by one row per sample, or a single `label`
//! column. Both encodings store single-precision features, so CSV values
//! are parsed as `f32` and widened.

use std::fs;
use std::path::Path;

use crate::data::TwoViewDataset;
use crate::numerics::DenseMatrix;
use crate::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"TRCO";
pub const LABEL_MAGIC: &[u8; 4] = b"TRCL";
pub const FORMAT_VERSION: u16 = 1;

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(
                self.path,
                self.bytes.len() as u64,
                format!("truncated {what}: expected {n} bytes at offset {}", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(format_err(
                self.path,
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let version = self.u16("version")?;
        if version != FORMAT_VERSION {
            return Err(format_err(
                self.path,
                4,
                format!("unsupported version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(format_err(
                self.path,
                self.pos as u64,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings_binary(path: &Path) -> Result<DenseMatrix> {
    let bytes = read_bytes(path)?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };
    r.header(EMBEDDING_MAGIC)?;
    let n = r.u32("row count")? as usize;
    let d = r.u32("column count")? as usize;
    let payload = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(4))
        .ok_or_else(|| format_err(path, 10, "shape overflows"))?;
    let raw = r.take(payload, "payload")?;
    r.finish()?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if let Some(k) = data.iter().position(|v| !v.is_finite()) {
        return Err(format_err(path, 14 + 4 * k as u64, "non-finite value"));
    }
    DenseMatrix::from_vec(n, d, data)
}

/// Values are narrowed to `f32`.
pub fn write_embeddings_binary(path: &Path, m: &DenseMatrix) -> Result<()> {
    let mut out = Vec::with_capacity(14 + 4 * m.data().len());
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &v in m.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    write_bytes(path, &out)
}

pub fn read_labels_binary(path: &Path) -> Result<Vec<i32>> {
    let bytes = read_bytes(path)?;
    let mut r = Reader { path, bytes: &bytes, pos: 0 };
    r.header(LABEL_MAGIC)?;
    let n = r.u32("row count")? as usize;
    let raw = r.take(n * 4, "payload")?;
    r.finish()?;
    Ok(raw
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

pub fn write_labels_binary(path: &Path, labels: &[i32]) -> Result<()> {
    let mut out = Vec::with_capacity(10 + 4 * labels.len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for &y in labels {
        out.extend_from_slice(&y.to_le_bytes());
    }
    write_bytes(path, &out)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Byte offset of each line start, for error reporting.
fn lines_with_offsets(text: &str) -> impl Iterator<Item = (u64, &str)> {
    let mut offset = 0u64;
    text.split_inclusive('\n').map(move |raw| {
        let at = offset;
        offset += raw.len() as u64;
        (at, raw.trim_end_matches(['\n', '\r']))
    })
}

pub fn read_embeddings_csv(path: &Path) -> Result<DenseMatrix> {
    let text = read_text(path)?;
    let mut lines = lines_with_offsets(&text).filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| format_err(path, 0, "missing header"))?;
    let d = header.split(',').count();
    for (j, name) in header.split(',').enumerate() {
        if name.trim() != format!("f{j}") {
            return Err(format_err(path, 0, format!("header column {j} is {name:?}, expected \"f{j}\"")));
        }
    }
    let mut data = Vec::new();
    let mut n = 0;
    for (at, line) in lines {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != d {
            return Err(format_err(path, at, format!("expected {d} fields, found {}", fields.len())));
        }
        for f in fields {
            let v: f32 = f
                .trim()
                .parse()
                .map_err(|_| format_err(path, at, format!("not a number: {f:?}")))?;
            if !v.is_finite() {
                return Err(format_err(path, at, "non-finite value"));
            }
            data.push(v as f64);
        }
        n += 1;
    }
    DenseMatrix::from_vec(n, d, data)
}

pub fn write_embeddings_csv(path: &Path, m: &DenseMatrix) -> Result<()> {
    let mut out = (0..m.cols()).map(|j| format!("f{j}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|&v| format!("{}", v as f32)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_labels_csv(path: &Path) -> Result<Vec<i32>> {
    let text = read_text(path)?;
    let mut lines = lines_with_offsets(&text).filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == "label" => {}
        _ => return Err(format_err(path, 0, "expected a single \"label\" header")),
    }
    lines
        .map(|(at, l)| {
            l.trim()
                .parse::<i32>()
                .map_err(|_| format_err(path, at, format!("not an integer label: {l:?}")))
        })
        .collect()
}

pub fn write_labels_csv(path: &Path, labels: &[i32]) -> Result<()> {
    let mut out = String::from("label\n");
    for y in labels {
        out.push_str(&y.to_string());
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

/// Picks the encoding from the file extension.
pub fn read_embeddings(path: &Path) -> Result<DenseMatrix> {
    if is_csv(path) {
        read_embeddings_csv(path)
    } else {
        read_embeddings_binary(path)
    }
}

pub fn write_embeddings(path: &Path, m: &DenseMatrix) -> Result<()> {
    if is_csv(path) {
        write_embeddings_csv(path, m)
    } else {
        write_embeddings_binary(path, m)
    }
}

pub fn read_labels(path: &Path) -> Result<Vec<i32>> {
    if is_csv(path) {
        read_labels_csv(path)
    } else {
        read_labels_binary(path)
    }
}

pub fn write_labels(path: &Path, labels: &[i32]) -> Result<()> {
    if is_csv(path) {
        write_labels_csv(path, labels)
    } else {
        write_labels_binary(path, labels)
    }
}

/// Encodes optional labels with `-1` for unlabeled.
pub fn encode_labels(labels: &[Option<usize>]) -> Vec<i32> {
    labels.iter().map(|l| l.map_or(-1, |y| y as i32)).collect()
}

/// Loads a paired dataset. Rows labeled `-1` are unlabeled; the class count
/// is one more than the largest label seen.
pub fn load_embedding_file(
    path_view1: &Path,
    path_view2: &Path,
    path_labels: &Path,
) -> Result<TwoViewDataset> {
    let v1 = read_embeddings(path_view1)?;
    let v2 = read_embeddings(path_view2)?;
    let raw = read_labels(path_labels)?;
    if v2.rows() != v1.rows() {
        return Err(format_err(
            path_view2,
            0,
            format!("{} rows, but {} has {}", v2.rows(), path_view1.display(), v1.rows()),
        ));
    }
    if raw.len() != v1.rows() {
        return Err(format_err(
            path_labels,
            0,
            format!("{} labels, but {} has {} rows", raw.len(), path_view1.display(), v1.rows()),
        ));
    }
    let mut labels = Vec::with_capacity(raw.len());
    for (i, &y) in raw.iter().enumerate() {
        labels.push(match y {
            -1 => None,
            y if y >= 0 => Some(y as usize),
            y => {
                return Err(format_err(path_labels, 0, format!("row {i}: invalid label {y}")));
            }
        });
    }
    let classes = labels.iter().flatten().max().map_or(2, |&m| (m + 1).max(2));
    TwoViewDataset::new(v1, v2, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_synthetic_two_view;

    #[test]
    fn handcrafted_binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        let mut bytes = b"TRCO".to_vec();
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for v in [1.5f32, -0.25, 3.0, 0.1, 1e-7, -2.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&p, &bytes).unwrap();
        let m = read_embeddings(&p).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 3));
        assert_eq!(m.get(1, 0), 0.1f32 as f64);
        let q = dir.path().join("y.bin");
        write_embeddings(&q, &m).unwrap();
        assert_eq!(fs::read(&q).unwrap(), bytes);
    }

    #[test]
    fn header_errors_name_file_and_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        fs::write(&p, b"TRCX\x01\x00").unwrap();
        match read_embeddings(&p) {
            Err(Error::Format { path, offset: 0, msg }) => {
                assert_eq!(path, p);
                assert!(msg.contains("magic"));
            }
            other => panic!("unexpected {other:?}"),
        }
        fs::write(&p, b"TRCO\x02\x00\x00\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(read_embeddings(&p), Err(Error::Format { offset: 4, .. })));

        let mut bytes = b"TRCO".to_vec();
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&[0u8; 12]);
        fs::write(&p, &bytes).unwrap();
        match read_embeddings(&p) {
            Err(Error::Format { offset, msg, .. }) => {
                assert_eq!(offset, 26);
                assert!(msg.contains("truncated"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_and_binary_agree() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_synthetic_two_view(30, 3, 4, 2, 0.7, 0.0, 11).unwrap();
        let labels = encode_labels(ds.observed_labels());
        let b = |n: &str| dir.path().join(n);
        write_embeddings(&b("a.bin"), ds.view1()).unwrap();
        write_embeddings(&b("b.bin"), ds.view2()).unwrap();
        write_labels(&b("l.bin"), &labels).unwrap();
        write_embeddings(&b("a.csv"), ds.view1()).unwrap();
        write_embeddings(&b("b.csv"), ds.view2()).unwrap();
        write_labels(&b("l.csv"), &labels).unwrap();
        let from_bin = load_embedding_file(&b("a.bin"), &b("b.bin"), &b("l.bin")).unwrap();
        let from_csv = load_embedding_file(&b("a.csv"), &b("b.csv"), &b("l.csv")).unwrap();
        assert_eq!(from_bin, from_csv);
        assert_eq!(from_bin.view1(), ds.view1());
        assert_eq!(from_bin.observed_labels(), ds.observed_labels());
    }

    #[test]
    fn all_unlabeled_file() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_synthetic_two_view(6, 2, 2, 2, 0.1, 0.0, 1).unwrap();
        let b = |n: &str| dir.path().join(n);
        write_embeddings(&b("a.bin"), ds.view1()).unwrap();
        write_embeddings(&b("b.bin"), ds.view2()).unwrap();
        write_labels(&b("l.bin"), &[-1; 6]).unwrap();
        let got = load_embedding_file(&b("a.bin"), &b("b.bin"), &b("l.bin")).unwrap();
        assert_eq!(got.count(crate::Split::Unlabeled), 6);
    }

    #[test]
    fn row_count_mismatch_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let ds = gen_synthetic_two_view(6, 2, 2, 2, 0.1, 0.0, 1).unwrap();
        let b = |n: &str| dir.path().join(n);
        write_embeddings(&b("a.bin"), ds.view1()).unwrap();
        write_embeddings(&b("b.bin"), ds.view2()).unwrap();
        write_labels(&b("l.bin"), &[0, 1, 0]).unwrap();
        match load_embedding_file(&b("a.bin"), &b("b.bin"), &b("l.bin")) {
            Err(Error::Format { path, .. }) => assert_eq!(path, b("l.bin")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_errors_report_line_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "f0,f1\n1,2\n3,oops\n").unwrap();
        assert!(matches!(read_embeddings(&p), Err(Error::Format { offset: 10, .. })));
        fs::write(&p, "f0,f2\n1,2\n").unwrap();
        assert!(matches!(read_embeddings(&p), Err(Error::Format { offset: 0, .. })));
    }
}
