//! Prediction files.
//!
//! CSV: a header `label,c1,...,cK` for probabilities (`p1..pK` is accepted on
//! read) or `label,z1,...,zK` for logits, then one sample per row with a
//! 1-based label. Values are written with 17 significant digits, which
//! reproduces every `f64` exactly on read. A CSV file holds one member.
//!
//! Binary (all integers little-endian):
//!
//! | bytes | field                                   |
//! |-------|-----------------------------------------|
//! | 4     | magic `CALT`                            |
//! | 2     | format version, u16 = 1                 |
//! | 1     | kind, u8: 0 = probabilities, 1 = logits |
//! | 1     | reserved, u8 = 0                        |
//! | 8     | N, u64                                  |
//! | 4     | K, u32                                  |
//! | 4     | M, u32 (1 for a single model)           |
//! | 8·MNK | f64 values, member-major then row-major |
//! | 4·N   | u32 labels, 1-based                     |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::data::{softmax, Ensemble, LabeledPredictionSet, LogitSet, SampleSet};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CALT";
pub const FORMAT_VERSION: u16 = 1;
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Binary,
}

impl Format {
    /// `.csv` files are CSV; everything else is binary.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => Format::Csv,
            _ => Format::Binary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Probabilities,
    Logits,
}

impl Kind {
    fn code(self) -> u8 {
        match self {
            Kind::Probabilities => 0,
            Kind::Logits => 1,
        }
    }
}

/// Raw contents of a prediction file. Labels are 0-based.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionData {
    pub kind: Kind,
    pub members: Vec<Array2<f64>>,
    pub labels: Vec<usize>,
}

impl PredictionData {
    pub fn from_prediction_set(set: &LabeledPredictionSet) -> Self {
        Self {
            kind: Kind::Probabilities,
            members: vec![set.probs().to_owned()],
            labels: set.labels().to_vec(),
        }
    }

    pub fn from_logit_set(set: &LogitSet) -> Self {
        Self {
            kind: Kind::Logits,
            members: vec![set.logits().to_owned()],
            labels: set.labels().to_vec(),
        }
    }

    pub fn from_ensemble(ens: &Ensemble<LabeledPredictionSet>) -> Self {
        Self {
            kind: Kind::Probabilities,
            members: ens.members().iter().map(|m| m.probs().to_owned()).collect(),
            labels: ens.labels().to_vec(),
        }
    }

    pub fn from_logit_ensemble(ens: &Ensemble<LogitSet>) -> Self {
        Self {
            kind: Kind::Logits,
            members: ens.members().iter().map(|m| m.logits().to_owned()).collect(),
            labels: ens.labels().to_vec(),
        }
    }

    /// Validated probability members; logit members go through softmax.
    pub fn into_prediction_sets(self) -> Result<Vec<LabeledPredictionSet>> {
        let labels = self.labels;
        self.members
            .into_iter()
            .map(|m| match self.kind {
                Kind::Probabilities => LabeledPredictionSet::new(m, labels.clone()),
                Kind::Logits => LogitSet::new(m, labels.clone()).map(|z| softmax(&z)),
            })
            .collect()
    }

    pub fn into_logit_sets(self) -> Result<Vec<LogitSet>> {
        if self.kind != Kind::Logits {
            return Err(Error::Validation("expected a logit file, found probabilities".into()));
        }
        let labels = self.labels;
        self.members
            .into_iter()
            .map(|m| LogitSet::new(m, labels.clone()))
            .collect()
    }

    fn dims(&self) -> Result<(usize, usize)> {
        let first = self
            .members
            .first()
            .ok_or_else(|| Error::Shape("no members to store".into()))?;
        let (n, k) = first.dim();
        if self.members.iter().any(|m| m.dim() != (n, k)) || self.labels.len() != n {
            return Err(Error::Shape("members and labels disagree in shape".into()));
        }
        Ok((n, k))
    }
}

pub fn load(path: &Path, format: Format) -> Result<PredictionData> {
    let file = BufReader::new(File::open(path)?);
    match format {
        Format::Csv => read_csv(file),
        Format::Binary => read_binary(file),
    }
}

pub fn store(data: &PredictionData, path: &Path, format: Format) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    match format {
        Format::Csv => write_csv(data, &mut file)?,
        Format::Binary => write_binary(data, &mut file)?,
    }
    file.flush()?;
    Ok(())
}

pub fn write_binary<W: Write>(data: &PredictionData, mut out: W) -> Result<()> {
    let (n, k) = data.dims()?;
    let m = data.members.len();
    let k32 = u32::try_from(k).map_err(|_| Error::Parameter("K exceeds u32".into()))?;
    let m32 = u32::try_from(m).map_err(|_| Error::Parameter("M exceeds u32".into()))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * m * n * k + 4 * n);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(data.kind.code());
    buf.push(0);
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&k32.to_le_bytes());
    buf.extend_from_slice(&m32.to_le_bytes());
    for member in &data.members {
        for v in member.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &y in &data.labels {
        let one_based = u32::try_from(y + 1).map_err(|_| Error::Parameter("label exceeds u32".into()))?;
        buf.extend_from_slice(&one_based.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_binary<R: Read>(mut input: R) -> Result<PredictionData> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!(
            "header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let kind = match bytes[6] {
        0 => Kind::Probabilities,
        1 => Kind::Logits,
        other => return Err(Error::MalformedHeader(format!("unknown kind byte {other}"))),
    };
    if bytes[7] != 0 {
        return Err(Error::MalformedHeader("reserved byte is not zero".into()));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let k = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as u64;
    let m = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as u64;
    if n == 0 || k == 0 || m == 0 {
        return Err(Error::MalformedHeader(format!("zero dimension: N={n} K={k} M={m}")));
    }
    let expected = m
        .checked_mul(n)
        .and_then(|x| x.checked_mul(k))
        .and_then(|x| x.checked_mul(8))
        .and_then(|x| x.checked_add(4 * n))
        .and_then(|x| x.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| Error::MalformedHeader("dimensions overflow".into()))?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(Error::Truncated(format!(
            "expected {expected} bytes, file has {actual}"
        )));
    }
    if actual > expected {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after the label block",
            actual - expected
        )));
    }
    let (n, k, m) = (n as usize, k as usize, m as usize);
    let mut offset = HEADER_LEN;
    let mut members = Vec::with_capacity(m);
    for _ in 0..m {
        let values: Vec<f64> = bytes[offset..offset + 8 * n * k]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 8 * n * k;
        members.push(Array2::from_shape_vec((n, k), values).expect("sized by header"));
    }
    let labels = bytes[offset..]
        .chunks_exact(4)
        .enumerate()
        .map(|(i, c)| {
            let y = u32::from_le_bytes(c.try_into().unwrap()) as usize;
            if y == 0 || y > k {
                Err(Error::Validation(format!("label out of range at row {i}: {y}")))
            } else {
                Ok(y - 1)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PredictionData { kind, members, labels })
}

pub fn write_csv<W: Write>(data: &PredictionData, out: W) -> Result<()> {
    let (_, k) = data.dims()?;
    if data.members.len() != 1 {
        return Err(Error::Parameter(format!(
            "a CSV file holds one member, got {}",
            data.members.len()
        )));
    }
    let prefix = match data.kind {
        Kind::Probabilities => 'c',
        Kind::Logits => 'z',
    };
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["label".to_string()];
    header.extend((1..=k).map(|j| format!("{prefix}{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for (row, &y) in data.members[0].outer_iter().zip(&data.labels) {
        let mut rec = Vec::with_capacity(k + 1);
        rec.push((y + 1).to_string());
        rec.extend(row.iter().map(|v| format!("{v:.16e}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<PredictionData> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = reader.records();
    let header = records
        .next()
        .ok_or_else(|| Error::MalformedHeader("empty file".into()))?
        .map_err(csv_err)?;
    let kind = parse_header(&header)?;
    let k = header.len() - 1;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (idx, rec) in records.enumerate() {
        let line = idx + 2;
        let rec = rec.map_err(csv_err)?;
        if rec.len() != k + 1 {
            return Err(Error::RowLength {
                line,
                expected: k + 1,
                found: rec.len(),
            });
        }
        let y: usize = rec[0].parse().map_err(|_| Error::Parse {
            line,
            message: format!("label '{}' is not a positive integer", &rec[0]),
        })?;
        if y == 0 || y > k {
            return Err(Error::Validation(format!(
                "label out of range at row {}: {y}",
                line - 2
            )));
        }
        labels.push(y - 1);
        for field in rec.iter().skip(1) {
            values.push(field.parse::<f64>().map_err(|_| Error::Parse {
                line,
                message: format!("'{field}' is not a number"),
            })?);
        }
    }
    if labels.is_empty() {
        return Err(Error::Truncated("no sample rows after the header".into()));
    }
    let members = vec![Array2::from_shape_vec((labels.len(), k), values).expect("row lengths checked")];
    Ok(PredictionData { kind, members, labels })
}

fn parse_header(header: &csv::StringRecord) -> Result<Kind> {
    if header.len() < 3 || &header[0] != "label" {
        return Err(Error::MalformedHeader(
            "expected 'label' followed by at least two class columns".into(),
        ));
    }
    let mut kind = None;
    for (j, name) in header.iter().skip(1).enumerate() {
        let (prefix, index) = name.split_at(name.chars().next().map_or(0, char::len_utf8));
        let this = match prefix {
            "c" | "p" => Kind::Probabilities,
            "z" => Kind::Logits,
            _ => return Err(Error::MalformedHeader(format!("unexpected column '{name}'"))),
        };
        if index.parse::<usize>().ok() != Some(j + 1) {
            return Err(Error::MalformedHeader(format!("column '{name}' out of order")));
        }
        if kind.is_some_and(|k| k != this) {
            return Err(Error::MalformedHeader("mixed probability and logit columns".into()));
        }
        kind = Some(this);
    }
    Ok(kind.expect("at least two class columns"))
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn fixture() -> PredictionData {
        PredictionData {
            kind: Kind::Probabilities,
            members: vec![array![
                [0.1, 0.2, 0.3, 0.4],
                [0.25, 0.25, 0.25, 0.25],
                [1.0 / 3.0, 1.0 / 6.0, 0.5, 0.0]
            ]],
            labels: vec![3, 0, 2],
        }
    }

    #[test]
    fn binary_round_trip_is_bit_identical() {
        let data = fixture();
        let mut bytes = Vec::new();
        write_binary(&data, &mut bytes).unwrap();
        assert_eq!(bytes.len(), 24 + 8 * 12 + 4 * 3);
        let back = read_binary(bytes.as_slice()).unwrap();
        assert_eq!(back, data);
        let mut again = Vec::new();
        write_binary(&back, &mut again).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn binary_header_layout() {
        let mut bytes = Vec::new();
        write_binary(&fixture(), &mut bytes).unwrap();
        assert_eq!(&bytes[..4], b"CALT");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(bytes[6], 0);
        assert_eq!(bytes[7], 0);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 4);
        assert_eq!(u32::from_le_bytes(bytes[20..24].try_into().unwrap()), 1);
        let labels: Vec<u32> = bytes[bytes.len() - 12..]
            .chunks(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(labels, vec![4, 1, 3]);
    }

    #[test]
    fn binary_errors_are_distinct() {
        let mut bytes = Vec::new();
        write_binary(&fixture(), &mut bytes).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_binary(bad.as_slice()), Err(Error::BadMagic)));

        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(read_binary(truncated), Err(Error::Truncated(_))));

        let mut version = bytes.clone();
        version[4] = 2;
        assert!(matches!(
            read_binary(version.as_slice()),
            Err(Error::UnsupportedVersion(2))
        ));

        let mut kind = bytes.clone();
        kind[6] = 9;
        assert!(matches!(read_binary(kind.as_slice()), Err(Error::MalformedHeader(_))));

        let mut label = bytes.clone();
        let at = label.len() - 4;
        label[at..].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(read_binary(label.as_slice()), Err(Error::Validation(_))));
    }

    #[test]
    fn csv_minimal_file() {
        let data = read_csv("label,p1,p2\n1,0.6,0.4\n".as_bytes()).unwrap();
        assert_eq!(data.kind, Kind::Probabilities);
        assert_eq!(data.members[0], array![[0.6, 0.4]]);
        assert_eq!(data.labels, vec![0]);
        let data = read_csv("label,z1,z2,z3\n3,1.5,-2,0\n".as_bytes()).unwrap();
        assert_eq!(data.kind, Kind::Logits);
        assert_eq!(data.labels, vec![2]);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(
            read_csv("lbl,c1,c2\n1,0.5,0.5\n".as_bytes()),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(
            read_csv("label,c1,z2\n1,0.5,0.5\n".as_bytes()),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(
            read_csv("label,c1,c2\n1,0.5\n".as_bytes()),
            Err(Error::RowLength {
                line: 2,
                expected: 3,
                found: 2
            })
        ));
        assert!(matches!(
            read_csv("label,c1,c2\n1,0.5,abc\n".as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_csv("label,c1,c2\n3,0.5,0.5\n".as_bytes()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn csv_rejects_multiple_members() {
        let mut data = fixture();
        data.members.push(data.members[0].clone());
        assert!(write_csv(&data, Vec::new()).is_err());
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_value_exact(
            rows in prop::collection::vec(prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 3), 1..20),
        ) {
            let n = rows.len();
            let data = PredictionData {
                kind: Kind::Logits,
                members: vec![Array2::from_shape_vec((n, 3), rows.concat()).unwrap()],
                labels: (0..n).map(|i| i % 3).collect(),
            };
            let mut buf = Vec::new();
            write_csv(&data, &mut buf).unwrap();
            let back = read_csv(buf.as_slice()).unwrap();
            prop_assert_eq!(back, data);
        }

        #[test]
        fn binary_round_trip_any_bits(
            bits in prop::collection::vec(any::<u64>(), 2..40),
            m in 1usize..3,
        ) {
            let k = 2;
            let n = bits.len() / k;
            let members: Vec<Array2<f64>> = (0..m)
                .map(|s| Array2::from_shape_fn((n, k), |(i, j)| f64::from_bits(bits[(i * k + j + s) % bits.len()])))
                .collect();
            let data = PredictionData { kind: Kind::Logits, members, labels: vec![1; n] };
            let mut buf = Vec::new();
            write_binary(&data, &mut buf).unwrap();
            let back = read_binary(buf.as_slice()).unwrap();
            for (a, b) in back.members.iter().zip(&data.members) {
                prop_assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
    }
}
