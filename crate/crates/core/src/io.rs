//! CSV ingestion and export, model files and scree eigenvalues.
//!
//! # Model file layout
//!
//! | bytes            | content                                          |
//! |------------------|--------------------------------------------------|
//! | 8                | magic `PO2PLSMF`                                  |
//! | 4                | header length `h`, little-endian `u32`           |
//! | `h`              | UTF-8 JSON header                                |
//! | rest             | little-endian `f64` payload                      |
//!
//! The header holds `format_version`, the ranks, the integer and boolean
//! fit metadata, and an `arrays` table of `{name, rows, cols, offset}` where
//! `offset` counts `f64` values from the start of the payload. Arrays are
//! stored column-major. `x_scales` and `y_scales` are present only for
//! blocks that were scaled. Every floating-point value lives in the payload, so a
//! save/load round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::DataPair;
use crate::error::{Error, Result};
use crate::linalg::{sorted_symmetric_eigen, top_svd};
use crate::model::{ModelParams, RankSpec};

pub const MODEL_MAGIC: &[u8; 8] = b"PO2PLSMF";
pub const MODEL_FORMAT_VERSION: u32 = 1;

/// A numeric table read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub values: DMatrix<f64>,
}

/// Reads a CSV file with a header row and numeric cells.
pub fn read_csv(path: impl AsRef<Path>) -> Result<Table> {
    let path = path.as_ref();
    let file = File::open(path)?;
    read_csv_from(BufReader::new(file), &path.display().to_string())
}

/// Reads CSV from any reader; `name` is used in error messages.
pub fn read_csv_from<R: Read>(reader: R, name: &str) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let width = header.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(rows + 2, |p| p.line() as usize);
        if record.len() != width {
            return Err(Error::RaggedRow {
                path: name.to_owned(),
                line,
                expected: width,
                found: record.len(),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => data.push(v),
                _ => {
                    return Err(Error::NonNumericCell {
                        path: name.to_owned(),
                        line,
                        column: j + 1,
                        value: cell.to_owned(),
                    })
                }
            }
        }
        rows += 1;
    }
    if rows == 0 || width == 0 {
        return Err(Error::EmptyData {
            path: name.to_owned(),
        });
    }
    Ok(Table {
        header,
        values: DMatrix::from_row_slice(rows, width, &data),
    })
}

/// Shortest representation that parses back to the same value.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Writes a matrix with a header row.
pub fn write_csv_to<W: Write>(out: W, header: &[String], values: &DMatrix<f64>) -> Result<()> {
    if header.len() != values.ncols() {
        return Err(Error::DimensionMismatch {
            context: "CSV header length",
            expected: values.ncols(),
            found: header.len(),
        });
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    let mut row = Vec::with_capacity(values.ncols());
    for i in 0..values.nrows() {
        row.clear();
        row.extend(values.row(i).iter().map(|&v| format_f64(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv(path: impl AsRef<Path>, header: &[String], values: &DMatrix<f64>) -> Result<()> {
    write_csv_to(BufWriter::new(File::create(path)?), header, values)
}

/// Column names `prefix1, prefix2, …`.
pub fn numbered_header(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

/// Column centering and optional unit-variance scaling, stored with a model
/// so new data can be mapped the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessing {
    pub x_means: DVector<f64>,
    pub y_means: DVector<f64>,
    /// Column standard deviations when scaling was requested.
    pub x_scales: Option<DVector<f64>>,
    pub y_scales: Option<DVector<f64>>,
}

fn column_scales(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    DVector::from_fn(m.ncols(), |j, _| {
        let col = m.column(j);
        let sd = if n > 1 {
            (col.norm_squared() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        // Constant columns are left unscaled.
        if sd > 0.0 {
            sd
        } else {
            1.0
        }
    })
}

fn divide_columns(m: &mut DMatrix<f64>, scales: &DVector<f64>) {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        col /= scales[j];
    }
}

impl Preprocessing {
    /// Centers (and optionally scales) the data, returning the transformed
    /// pair and the transformation.
    pub fn fit(data: &DataPair, scale: bool) -> (DataPair, Self) {
        let (mut centered, x_means, y_means) = data.centered();
        let (x_scales, y_scales) = if scale {
            let sx = column_scales(&centered.x);
            let sy = column_scales(&centered.y);
            divide_columns(&mut centered.x, &sx);
            divide_columns(&mut centered.y, &sy);
            (Some(sx), Some(sy))
        } else {
            (None, None)
        };
        (
            centered,
            Self {
                x_means,
                y_means,
                x_scales,
                y_scales,
            },
        )
    }

    /// Maps raw `X` rows into the model's coordinates.
    pub fn transform_x(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.x_means.len() {
            return Err(Error::DimensionMismatch {
                context: "columns of X",
                expected: self.x_means.len(),
                found: x.ncols(),
            });
        }
        let mut out = x.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.x_means[j]);
        }
        if let Some(s) = &self.x_scales {
            divide_columns(&mut out, s);
        }
        Ok(out)
    }

    /// Maps raw `Y` rows into the model's coordinates.
    pub fn transform_y(&self, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if y.ncols() != self.y_means.len() {
            return Err(Error::DimensionMismatch {
                context: "columns of Y",
                expected: self.y_means.len(),
                found: y.ncols(),
            });
        }
        let mut out = y.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            col.add_scalar_mut(-self.y_means[j]);
        }
        if let Some(s) = &self.y_scales {
            divide_columns(&mut out, s);
        }
        Ok(out)
    }

    /// Maps model-coordinate `Y` back to the original units.
    pub fn inverse_y(&self, y: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = y.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            if let Some(s) = &self.y_scales {
                col *= s[j];
            }
            col.add_scalar_mut(self.y_means[j]);
        }
        out
    }
}

/// Fit summary stored alongside the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FitMeta {
    pub n_iter: usize,
    pub converged: bool,
    pub loglik: f64,
    pub tol: f64,
    pub preprocessing: Preprocessing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub theta: ModelParams,
    pub meta: FitMeta,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    ranks: RankSpec,
    n_iter: usize,
    converged: bool,
    arrays: Vec<ArrayEntry>,
}

fn push_array(entries: &mut Vec<ArrayEntry>, payload: &mut Vec<f64>, name: &str, m: &DMatrix<f64>) {
    entries.push(ArrayEntry {
        name: name.to_owned(),
        rows: m.nrows(),
        cols: m.ncols(),
        offset: payload.len(),
    });
    payload.extend_from_slice(m.as_slice());
}

fn vec_matrix(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn scalar_matrix(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

impl ModelFile {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let t = &self.theta;
        let pre = &self.meta.preprocessing;
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        let mut add = |name: &str, m: DMatrix<f64>| push_array(&mut entries, &mut payload, name, &m);
        add("W", t.w.clone());
        add("W_perp", t.w_perp.clone());
        add("C", t.c.clone());
        add("C_perp", t.c_perp.clone());
        add("B", vec_matrix(&t.b));
        add("sigma_t2", vec_matrix(&t.sigma_t2));
        add("sigma_to2", vec_matrix(&t.sigma_to2));
        add("sigma_uo2", vec_matrix(&t.sigma_uo2));
        add("sigma_h2", vec_matrix(&t.sigma_h2));
        add("sigma_e2", scalar_matrix(t.sigma_e2));
        add("sigma_f2", scalar_matrix(t.sigma_f2));
        add("loglik", scalar_matrix(self.meta.loglik));
        add("tol", scalar_matrix(self.meta.tol));
        add("x_means", vec_matrix(&pre.x_means));
        add("y_means", vec_matrix(&pre.y_means));
        if let Some(sx) = &pre.x_scales {
            add("x_scales", vec_matrix(sx));
        }
        if let Some(sy) = &pre.y_scales {
            add("y_scales", vec_matrix(sy));
        }
        let header = Header {
            format_version: MODEL_FORMAT_VERSION,
            ranks: t.ranks(),
            n_iter: self.meta.n_iter,
            converged: self.meta.converged,
            arrays: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let len = u32::try_from(json.len())
            .map_err(|_| Error::ModelFormat("header too large".into()))?;
        let mut out = Vec::with_capacity(12 + json.len() + 8 * payload.len());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for v in payload {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::ModelFormat(msg.to_owned());
        if bytes.len() < 12 || &bytes[..8] != MODEL_MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let json_end = 12usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[12..json_end])?;
        if header.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "unsupported format version {}",
                header.format_version
            )));
        }
        let body = &bytes[json_end..];
        if !body.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let payload: Vec<f64> = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let get = |name: &str| -> Result<DMatrix<f64>> {
            let e = header
                .arrays
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| Error::ModelFormat(format!("missing array {name}")))?;
            let end = e
                .rows
                .checked_mul(e.cols)
                .and_then(|n| n.checked_add(e.offset))
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| Error::ModelFormat(format!("array {name} exceeds payload")))?;
            Ok(DMatrix::from_column_slice(e.rows, e.cols, &payload[e.offset..end]))
        };
        let vector = |name: &str| -> Result<DVector<f64>> {
            let m = get(name)?;
            if m.ncols() != 1 && m.nrows() * m.ncols() != 0 {
                return Err(Error::ModelFormat(format!("array {name} is not a vector")));
            }
            Ok(DVector::from_column_slice(m.as_slice()))
        };
        let scalar = |name: &str| -> Result<f64> {
            let m = get(name)?;
            if m.shape() != (1, 1) {
                return Err(Error::ModelFormat(format!("array {name} is not a scalar")));
            }
            Ok(m[(0, 0)])
        };

        let theta = ModelParams {
            w: get("W")?,
            w_perp: get("W_perp")?,
            c: get("C")?,
            c_perp: get("C_perp")?,
            b: vector("B")?,
            sigma_t2: vector("sigma_t2")?,
            sigma_to2: vector("sigma_to2")?,
            sigma_uo2: vector("sigma_uo2")?,
            sigma_h2: vector("sigma_h2")?,
            sigma_e2: scalar("sigma_e2")?,
            sigma_f2: scalar("sigma_f2")?,
        };
        theta.check_shapes()?;
        if theta.ranks() != header.ranks {
            return Err(bad("array shapes disagree with the stored ranks"));
        }
        let optional = |name: &str| -> Result<Option<DVector<f64>>> {
            if header.arrays.iter().any(|e| e.name == name) {
                vector(name).map(Some)
            } else {
                Ok(None)
            }
        };
        let (x_scales, y_scales) = (optional("x_scales")?, optional("y_scales")?);
        let preprocessing = Preprocessing {
            x_means: vector("x_means")?,
            y_means: vector("y_means")?,
            x_scales,
            y_scales,
        };
        let lengths_ok = |v: &Option<DVector<f64>>, n: usize| v.as_ref().is_none_or(|v| v.len() == n);
        if preprocessing.x_means.len() != header.ranks.p
            || preprocessing.y_means.len() != header.ranks.q
            || !lengths_ok(&preprocessing.x_scales, header.ranks.p)
            || !lengths_ok(&preprocessing.y_scales, header.ranks.q)
        {
            return Err(bad("stored column means or scales disagree with the ranks"));
        }
        Ok(Self {
            theta,
            meta: FitMeta {
                n_iter: header.n_iter,
                converged: header.converged,
                loglik: scalar("loglik")?,
                tol: scalar("tol")?,
                preprocessing,
            },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = BufWriter::new(File::create(path)?);
        f.write_all(&self.to_bytes()?)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Eigenvalues for rank selection, each series in descending order.
#[derive(Debug, Clone, PartialEq)]
pub struct Scree {
    /// Eigenvalues of `XᵀX` (at most `min(N, p)`).
    pub xtx: Vec<f64>,
    /// Eigenvalues of `YᵀY` (at most `min(N, q)`).
    pub yty: Vec<f64>,
    /// Singular values of `XᵀY` (at most `min(N, p, q)`).
    pub xty: Vec<f64>,
}

/// Eigenvalues of `MᵀM` via the smaller of the two Gram forms.
fn gram_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
    let (n, p) = m.shape();
    let gram = if p <= n { m.tr_mul(m) } else { m * m.transpose() };
    sorted_symmetric_eigen(gram)
        .0
        .into_iter()
        .map(|v| v.max(0.0))
        .collect()
}

/// Symmetric square root of the N×N Gram matrix `M Mᵀ`.
fn gram_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (vals, vecs) = sorted_symmetric_eigen(m * m.transpose());
    let root = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.max(0.0).sqrt()));
    &vecs * DMatrix::from_diagonal(&root) * vecs.transpose()
}

/// Scree series. No p×p or q×q matrix is formed when the dimension exceeds
/// N; the cross-product singular values then come from the singular values
/// of `(XXᵀ)^{1/2} (YYᵀ)^{1/2}`, which share the non-zero spectrum of `XᵀY`.
pub fn scree(data: &DataPair) -> Scree {
    let n = data.n();
    let (p, q) = (data.p(), data.q());
    let xtx = gram_eigenvalues(&data.x);
    let yty = gram_eigenvalues(&data.y);
    let k = n.min(p).min(q);
    let mut xty = if p.min(q) <= n {
        let cross = data.x.tr_mul(&data.y);
        top_svd(&cross, k).1
    } else {
        let m = gram_sqrt(&data.x) * gram_sqrt(&data.y);
        top_svd(&m, k).1
    };
    xty.truncate(k);
    Scree { xtx, yty, xty }
}

/// Long-format scree table: `series,index,value`.
pub fn write_scree_csv<W: Write>(out: W, s: &Scree) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["series", "index", "value"])?;
    for (name, series) in [("XtX", &s.xtx), ("YtY", &s.yty), ("XtY", &s.xty)] {
        for (i, v) in series.iter().enumerate() {
            w.write_record([name.to_owned(), (i + 1).to_string(), format_f64(*v)])?;
        }
    }
    w.flush()?;
    Ok(())
}
