//! Dataset CSV: `sample_id,person_id,clothes_id,camera_id,split,f0,...,f{d-1}`,
//! LF line endings, features with 17 significant digits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use divnorm_core::synth::{Dataset, Provenance, SampleMeta, Split};
use divnorm_core::Matrix;

use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u32 = 1;
const META_COLUMNS: [&str; 5] = ["sample_id", "person_id", "clothes_id", "camera_id", "split"];

/// Scientific notation with 16 fractional digits: 17 significant digits,
/// enough to round-trip every finite `f64`.
pub fn fmt_feature(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_dataset<W: Write>(ds: &Dataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let io = |e: csv::Error| CliError::Failed(format!("writing dataset: {e}"));
    let mut header: Vec<String> = META_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..ds.dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(io)?;
    for (m, row) in ds.meta.iter().zip(ds.features.iter_rows()) {
        let mut record = vec![
            m.sample_id.to_string(),
            m.person_id.to_string(),
            m.clothes_id.to_string(),
            m.camera_id.to_string(),
            m.split.name().to_string(),
        ];
        record.extend(row.iter().map(|&v| fmt_feature(v)));
        w.write_record(&record).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Failed(format!("writing dataset: {e}")))
}

pub fn read_dataset<R: Read>(input: R, source_name: &str) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers().map_err(|e| CliError::parse(source_name, 1, e.to_string()))?.clone();
    for (i, name) in META_COLUMNS.iter().enumerate() {
        match header.iter().position(|h| h == *name) {
            None => return Err(CliError::parse(source_name, 1, format!("missing column `{name}`"))),
            Some(p) if p != i => {
                return Err(CliError::parse(source_name, 1, format!("column `{name}` must be column {}", i + 1)))
            }
            Some(_) => {}
        }
    }
    let dim = header.len() - META_COLUMNS.len();
    if dim == 0 {
        return Err(CliError::parse(source_name, 1, "no feature columns"));
    }
    for (j, name) in header.iter().skip(META_COLUMNS.len()).enumerate() {
        if name != format!("f{j}") {
            return Err(CliError::parse(source_name, 1, format!("expected column `f{j}`, found `{name}`")));
        }
    }

    let mut meta = Vec::new();
    let mut data = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            CliError::parse(source_name, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or_default();
        let int = |i: usize| -> Result<u64> {
            field(i).parse().map_err(|_| {
                CliError::parse(source_name, line, format!("`{}` is not a valid {}", field(i), META_COLUMNS[i]))
            })
        };
        let split = Split::parse(field(4)).ok_or_else(|| {
            CliError::parse(source_name, line, format!("split `{}` is not one of train|query|gallery", field(4)))
        })?;
        meta.push(SampleMeta { sample_id: int(0)?, person_id: int(1)?, clothes_id: int(2)?, camera_id: int(3)?, split });
        for j in 0..dim {
            let text = field(META_COLUMNS.len() + j);
            let v: f64 = text
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| CliError::parse(source_name, line, format!("feature f{j} `{text}` is not a finite number")))?;
            data.push(v);
        }
    }
    let n = meta.len();
    let features = Matrix::from_vec(n, dim, data)?;
    Ok(Dataset::new(features, meta, Provenance::Ingested(source_name.to_string()))?)
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|source| CliError::Write { path: path.to_path_buf(), source })?;
    let mut out = BufWriter::new(file);
    write_dataset(ds, &mut out)?;
    out.flush().map_err(|source| CliError::Write { path: path.to_path_buf(), source })
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|source| CliError::Read { path: path.to_path_buf(), source })?;
    read_dataset(BufReader::new(file), &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use divnorm_core::synth::{generate, SynthConfig};

    fn round_trip(ds: &Dataset) -> Dataset {
        let mut buf = Vec::new();
        write_dataset(ds, &mut buf).unwrap();
        read_dataset(buf.as_slice(), "mem").unwrap()
    }

    #[test]
    fn synthetic_round_trip() {
        let ds = generate(&SynthConfig { n_ids: 4, ..SynthConfig::default() }).unwrap();
        let back = round_trip(&ds);
        assert_eq!(back.features, ds.features);
        assert_eq!(back.meta, ds.meta);
        assert_eq!(back.provenance, Provenance::Ingested("mem".into()));
    }

    #[test]
    fn extreme_values_round_trip() {
        let values = [0.0, -0.0, 1e-310, f64::MAX, f64::MIN_POSITIVE, -1.0 / 3.0, 5e-324];
        let meta = (0..values.len() as u64)
            .map(|i| SampleMeta { sample_id: i, person_id: 0, clothes_id: 0, camera_id: 0, split: Split::Train })
            .collect();
        let ds = Dataset::new(Matrix::from_vec(values.len(), 1, values.to_vec()).unwrap(), meta, Provenance::Ingested("x".into()))
            .unwrap();
        let back = round_trip(&ds);
        for (a, b) in back.features.as_slice().iter().zip(&values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn lf_line_endings() {
        let ds = generate(&SynthConfig { n_ids: 2, d_obs: 16, ..SynthConfig::default() }).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(!text.contains('\r'));
        assert!(text.starts_with("sample_id,person_id,clothes_id,camera_id,split,f0,f1,"));
    }

    fn parse_err(text: &str) -> String {
        match read_dataset(text.as_bytes(), "t.csv") {
            Err(e @ CliError::Parse { .. }) => e.to_string(),
            other => panic!("expected a parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_inputs_name_the_problem() {
        assert!(parse_err("sample_id,clothes_id,camera_id,split,f0\n").contains("`person_id`"));
        assert!(parse_err("sample_id,person_id,clothes_id,camera_id,split\n").contains("no feature columns"));
        let good = "sample_id,person_id,clothes_id,camera_id,split,f0\n0,0,0,0,train,1.5\n";
        assert_eq!(read_dataset(good.as_bytes(), "t").unwrap().len(), 1);
        let bad_num = format!("{good}1,0,0,0,train,abc\n");
        assert!(parse_err(&bad_num).starts_with("t.csv:3:"));
        let bad_split = format!("{good}1,0,0,0,probe,1\n");
        assert!(parse_err(&bad_split).contains("probe"));
        let short = format!("{good}1,0,0,0\n");
        assert!(parse_err(&short).starts_with("t.csv:3:"));
    }
}
