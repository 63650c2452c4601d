//! On-disk formats.
//!
//! Row data is JSON Lines (one object per line, errors name the line);
//! parameters and reports are pretty JSON; tables are CSV. Floats are written
//! with the shortest representation that parses back to the same value.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mlcc_core::correlation::{CorrelationKind, CorrelationMatrix, SoftLabelMatrix};
use mlcc_core::cscl::FeatureBank;
use mlcc_core::metrics::{Bin, ReliabilityTable};
use mlcc_core::{Dataset, GenConfig, LabelMatrix, Mat, PredictionLog};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

fn read_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Read {
        path: path.to_path_buf(),
        source,
    }
}

fn write_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Write {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl ToString) -> HarnessError {
    HarnessError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    }
}

/// Creates the parent directory of `path` if needed.
pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(write_err(dir))?;
        }
    }
    Ok(())
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(write_err(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| HarnessError::Runtime(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(read_err(path))?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e))
}

/// Writes one JSON object per line.
fn write_lines<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    ensure_parent(path)?;
    let file = fs::File::create(path).map_err(write_err(path))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row)
            .map_err(|e| HarnessError::Runtime(format!("serializing {}: {e}", path.display())))?;
        w.write_all(b"\n").map_err(write_err(path))?;
    }
    w.flush().map_err(write_err(path))
}

/// Reads nonblank lines with their 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(read_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(read_err(path))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_line<T: DeserializeOwned>(path: &Path, line: usize, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| parse_err(path, line, e))
}

fn check_bits(path: &Path, line: usize, y: &[u8]) -> Result<()> {
    if y.iter().any(|&v| v > 1) {
        return Err(parse_err(path, line, "labels must be 0 or 1"));
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    id: u64,
    x: Vec<f64>,
    y: Vec<u8>,
}

/// Dataset sidecar written next to the sample file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub samples: usize,
    pub categories: usize,
    pub dim: usize,
    pub mean_positives: f64,
    pub generator: Option<GenConfig>,
    pub planted_similarity: Vec<Vec<f64>>,
}

/// `data.jsonl` → `data.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

pub fn write_dataset(path: &Path, ds: &Dataset, generator: Option<&GenConfig>) -> Result<()> {
    let rows = (0..ds.len()).map(|r| SampleLine {
        id: ds.ids[r],
        x: ds.inputs.row(r).to_vec(),
        y: ds.labels.row(r).to_vec(),
    });
    write_lines(path, rows)?;
    let c = ds.categories();
    let meta = DatasetMeta {
        samples: ds.len(),
        categories: c,
        dim: ds.dim(),
        mean_positives: ds.mean_positives(),
        generator: generator.cloned(),
        planted_similarity: (0..c).map(|r| ds.planted_similarity.row(r).to_vec()).collect(),
    };
    write_json(&meta_path(path), &meta)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let meta_file = meta_path(path);
    let meta: DatasetMeta = read_json(&meta_file)?;
    let (c, d) = (meta.categories, meta.dim);
    let mut ids = Vec::new();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (line, text) in read_lines(path)? {
        let row: SampleLine = parse_line(path, line, &text)?;
        if row.x.len() != d || row.y.len() != c {
            return Err(parse_err(
                path,
                line,
                format!("expected {d} inputs and {c} labels, found {} and {}", row.x.len(), row.y.len()),
            ));
        }
        check_bits(path, line, &row.y)?;
        ids.push(row.id);
        x.extend(row.x);
        y.extend(row.y);
    }
    let n = ids.len();
    if n != meta.samples {
        return Err(parse_err(
            &meta_file,
            1,
            format!("sidecar lists {} samples, data file has {n}", meta.samples),
        ));
    }
    let planted = Mat::from_rows(&meta.planted_similarity).map_err(|e| parse_err(&meta_file, 1, e))?;
    let ds = Dataset {
        ids,
        inputs: Mat::from_vec(n, d, x)?,
        labels: LabelMatrix::new(n, c, y)?,
        planted_similarity: planted,
    };
    ds.validate()?;
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct PredictionLine {
    id: u64,
    p: Vec<f64>,
    y: Vec<u8>,
}

pub fn write_predictions(path: &Path, log: &PredictionLog) -> Result<()> {
    write_lines(
        path,
        (0..log.len()).map(|r| PredictionLine {
            id: log.ids[r],
            p: log.probs.row(r).to_vec(),
            y: log.labels.row(r).to_vec(),
        }),
    )
}

pub fn read_predictions(path: &Path) -> Result<PredictionLog> {
    let mut ids = Vec::new();
    let mut p = Vec::new();
    let mut y = Vec::new();
    let mut width = None;
    for (line, text) in read_lines(path)? {
        let row: PredictionLine = parse_line(path, line, &text)?;
        let c = *width.get_or_insert(row.p.len());
        if row.p.len() != c || row.y.len() != c || c == 0 {
            return Err(parse_err(path, line, format!("expected {c} probabilities and labels")));
        }
        if row.p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(parse_err(path, line, "probabilities must lie in [0, 1]"));
        }
        check_bits(path, line, &row.y)?;
        ids.push(row.id);
        p.extend(row.p);
        y.extend(row.y);
    }
    let c = width.ok_or_else(|| parse_err(path, 1, "empty prediction log"))?;
    let n = ids.len();
    Ok(PredictionLog::new(ids, Mat::from_vec(n, c, p)?, LabelMatrix::new(n, c, y)?)?)
}

#[derive(Serialize, Deserialize)]
struct SoftHeader {
    kind: CorrelationKind,
    alpha: f64,
    categories: usize,
}

#[derive(Serialize, Deserialize)]
struct SoftLine {
    id: u64,
    soft: Vec<f64>,
    overwrite_mass: f64,
}

/// Soft labels: a header line with kind, α and C, then one line per sample.
pub fn write_soft_labels(path: &Path, soft: &SoftLabelMatrix) -> Result<()> {
    ensure_parent(path)?;
    let header = serde_json::to_value(SoftHeader {
        kind: soft.kind,
        alpha: soft.alpha,
        categories: soft.values.cols(),
    })
    .map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let rows = (0..soft.ids.len()).map(|r| {
        serde_json::to_value(SoftLine {
            id: soft.ids[r],
            soft: soft.values.row(r).to_vec(),
            overwrite_mass: soft.overwrite_mass[r],
        })
        .expect("plain data serializes")
    });
    write_lines(path, std::iter::once(header).chain(rows))
}

pub fn read_soft_labels(path: &Path) -> Result<SoftLabelMatrix> {
    let lines = read_lines(path)?;
    let Some((first, text)) = lines.first() else {
        return Err(parse_err(path, 1, "missing header line"));
    };
    let header: SoftHeader = parse_line(path, *first, text)?;
    let c = header.categories;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut mass = Vec::new();
    for (line, text) in &lines[1..] {
        let row: SoftLine = parse_line(path, *line, text)?;
        if row.soft.len() != c {
            return Err(parse_err(path, *line, format!("expected {c} soft labels")));
        }
        if row.soft.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(parse_err(path, *line, "soft labels must lie in [0, 1]"));
        }
        ids.push(row.id);
        values.extend(row.soft);
        mass.push(row.overwrite_mass);
    }
    let n = ids.len();
    let soft = SoftLabelMatrix {
        ids,
        values: Mat::from_vec(n, c, values)?,
        alpha: header.alpha,
        kind: header.kind,
        overwrite_mass: mass,
    };
    soft.validate()?;
    Ok(soft)
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    categories: usize,
    feature_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct BankLine {
    id: u64,
    y: Vec<u8>,
    /// C × D_f features, flattened category-major.
    f: Vec<f64>,
}

pub fn write_bank(path: &Path, bank: &FeatureBank) -> Result<()> {
    let (c, df) = (bank.categories(), bank.feature_dim());
    let header = serde_json::to_value(BankHeader {
        categories: c,
        feature_dim: df,
    })
    .map_err(|e| HarnessError::Runtime(e.to_string()))?;
    let rows = (0..bank.len()).map(|n| {
        serde_json::to_value(BankLine {
            id: bank.ids()[n],
            y: bank.labels().row(n).to_vec(),
            f: bank.sample_features(n).into_vec(),
        })
        .expect("plain data serializes")
    });
    write_lines(path, std::iter::once(header).chain(rows))
}

pub fn read_bank(path: &Path) -> Result<FeatureBank> {
    let lines = read_lines(path)?;
    let Some((first, text)) = lines.first() else {
        return Err(parse_err(path, 1, "missing header line"));
    };
    let header: BankHeader = parse_line(path, *first, text)?;
    let (c, df) = (header.categories, header.feature_dim);
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut flat = Vec::new();
    for (line, text) in &lines[1..] {
        let row: BankLine = parse_line(path, *line, text)?;
        if row.y.len() != c || row.f.len() != c * df {
            return Err(parse_err(path, *line, format!("expected {c} labels and {} features", c * df)));
        }
        check_bits(path, *line, &row.y)?;
        if row.f.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, *line, "non-finite feature"));
        }
        ids.push(row.id);
        labels.extend(row.y);
        flat.extend(row.f);
    }
    let n = ids.len();
    Ok(FeatureBank::new(ids, c, df, flat, LabelMatrix::new(n, c, labels)?)?)
}

fn csv_err(path: &Path, e: csv::Error) -> HarnessError {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(source) => HarnessError::Read {
            path: path.to_path_buf(),
            source,
        },
        kind => parse_err(path, line, format!("{kind:?}")),
    }
}

/// Writes rows of displayable cells as CSV.
pub fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(write_err(path))
}

/// Reads a CSV file into its header and rows, with 1-based line numbers.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        rows.push((line, rec.iter().map(String::from).collect()));
    }
    Ok((header, rows))
}

pub(crate) fn parse_cell<T: std::str::FromStr>(path: &Path, line: usize, cell: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    cell.parse()
        .map_err(|e: T::Err| parse_err(path, line, format!("`{cell}`: {e}")))
}

pub const RELIABILITY_HEADER: [&str; 5] = ["bin_lo", "bin_hi", "count", "mean_conf", "mean_acc"];

pub fn write_reliability(path: &Path, table: &ReliabilityTable) -> Result<()> {
    let header: Vec<String> = RELIABILITY_HEADER.iter().map(|s| s.to_string()).collect();
    let rows: Vec<Vec<String>> = table
        .bins
        .iter()
        .map(|b| {
            vec![
                b.lo.to_string(),
                b.hi.to_string(),
                b.count.to_string(),
                b.mean_conf.to_string(),
                b.mean_acc.to_string(),
            ]
        })
        .collect();
    write_csv(path, &header, &rows)
}

/// Reads the bins of a reliability CSV.
pub fn read_reliability(path: &Path) -> Result<Vec<Bin>> {
    let (header, rows) = read_csv(path)?;
    if header != RELIABILITY_HEADER {
        return Err(parse_err(path, 1, format!("expected header {}", RELIABILITY_HEADER.join(","))));
    }
    rows.iter()
        .map(|(line, r)| {
            if r.len() != 5 {
                return Err(parse_err(path, *line, "expected 5 columns"));
            }
            Ok(Bin {
                lo: parse_cell(path, *line, &r[0])?,
                hi: parse_cell(path, *line, &r[1])?,
                count: parse_cell(path, *line, &r[2])?,
                mean_conf: parse_cell(path, *line, &r[3])?,
                mean_acc: parse_cell(path, *line, &r[4])?,
            })
        })
        .collect()
}

pub fn write_correlation(path: &Path, r: &CorrelationMatrix) -> Result<()> {
    let c = r.categories();
    let mut header = vec!["category".to_string()];
    header.extend((0..c).map(|k| k.to_string()));
    let rows: Vec<Vec<String>> = (0..c)
        .map(|i| {
            let mut row = vec![i.to_string()];
            row.extend(r.row(i).iter().map(|v| v.to_string()));
            row
        })
        .collect();
    write_csv(path, &header, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mlcc_core::datagen::generate;
    use mlcc_core::Seed;

    #[test]
    fn dataset_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let cfg = GenConfig::small_preset(Seed(3));
        let ds = generate(&cfg).unwrap();
        write_dataset(&path, &ds, Some(&cfg)).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);
        let meta: DatasetMeta = read_json(&meta_path(&path)).unwrap();
        assert_eq!(meta.generator, Some(cfg));
    }

    #[test]
    fn malformed_lines_are_located() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        fs::write(&path, "{\"id\":0,\"p\":[0.5],\"y\":[1]}\n\n{\"id\":1,\"p\":[0.5],\"y\":[2]}\n").unwrap();
        match read_predictions(&path) {
            Err(HarnessError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        fs::write(&path, "{\"id\":0,\"p\":[0.5],\"y\":[1]}\nnot json\n").unwrap();
        match read_predictions(&path) {
            Err(e @ HarnessError::Parse { line: 2, .. }) => assert_eq!(e.exit_code(), 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_files_are_usage_errors() {
        let e = read_dataset(Path::new("/nonexistent/data.jsonl")).unwrap_err();
        assert_eq!(e.exit_code(), 2);
    }
}
