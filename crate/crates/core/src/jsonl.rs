//! Line-delimited JSON reading and writing shared by every file format.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

/// How a loader treats records that fail validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LoadMode {
    /// Reject the whole file on the first invalid record.
    #[default]
    Strict,
    /// Log and drop invalid records.
    SkipInvalid,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: malformed JSON: {message}")]
    Json {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: field `{field}`: {message}")]
    Field {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },
    #[error("{path}:{line}: sample `{sample_id}`: field `{field}`: {message}")]
    Invalid {
        path: PathBuf,
        line: usize,
        sample_id: String,
        field: String,
        message: String,
    },
    #[error("{path}:{line}: duplicate sample_id `{sample_id}`")]
    DuplicateId {
        path: PathBuf,
        line: usize,
        sample_id: String,
    },
}

/// A record-level problem before it is tied to a file position.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct FieldError {
    pub field: String,
    pub message: String,
    /// Set once the record's id is known, so errors can name it.
    pub sample_id: Option<String>,
}

impl FieldError {
    pub fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
            sample_id: None,
        }
    }

    pub fn for_sample(mut self, sample_id: &str) -> Self {
        self.sample_id = Some(sample_id.to_string());
        self
    }

    pub fn at(self, path: &Path, line: usize) -> LoadError {
        match self.sample_id {
            Some(sample_id) => LoadError::Invalid {
                path: path.to_path_buf(),
                line,
                sample_id,
                field: self.field,
                message: self.message,
            },
            None => LoadError::Field {
                path: path.to_path_buf(),
                line,
                field: self.field,
                message: self.message,
            },
        }
    }
}

/// Typed access to the fields of one JSON object, with errors naming the field.
pub(crate) struct Fields<'a> {
    obj: &'a Map<String, Value>,
}

impl<'a> Fields<'a> {
    pub fn new(value: &'a Value, allowed: &[&str]) -> Result<Self, FieldError> {
        let obj = value
            .as_object()
            .ok_or_else(|| FieldError::new("<record>", "expected a JSON object"))?;
        if let Some(extra) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(FieldError::new(extra, "unknown field"));
        }
        Ok(Self { obj })
    }

    fn get(&self, field: &str) -> Result<&'a Value, FieldError> {
        match self.obj.get(field) {
            Some(Value::Null) | None => Err(FieldError::new(field, "missing")),
            Some(v) => Ok(v),
        }
    }

    fn get_opt(&self, field: &str) -> Option<&'a Value> {
        self.obj.get(field).filter(|v| !v.is_null())
    }

    pub fn string(&self, field: &str) -> Result<String, FieldError> {
        self.get(field)?
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| FieldError::new(field, "expected a string"))
    }

    pub fn non_empty_string(&self, field: &str) -> Result<String, FieldError> {
        let s = self.string(field)?;
        if s.is_empty() {
            return Err(FieldError::new(field, "must not be empty"));
        }
        Ok(s)
    }

    pub fn positive_u32(&self, field: &str) -> Result<u32, FieldError> {
        let v = self
            .get(field)?
            .as_u64()
            .ok_or_else(|| FieldError::new(field, "expected a positive integer"))?;
        if v == 0 || v > u64::from(u32::MAX) {
            return Err(FieldError::new(field, format!("{v} is out of range")));
        }
        Ok(v as u32)
    }

    pub fn f64_quad(&self, field: &str) -> Result<[f64; 4], FieldError> {
        let arr = self
            .get(field)?
            .as_array()
            .filter(|a| a.len() == 4)
            .ok_or_else(|| FieldError::new(field, "expected an array of 4 numbers"))?;
        let mut out = [0.0; 4];
        for (slot, v) in out.iter_mut().zip(arr) {
            *slot = v
                .as_f64()
                .ok_or_else(|| FieldError::new(field, "expected an array of 4 numbers"))?;
        }
        Ok(out)
    }

    pub fn opt_f64(&self, field: &str) -> Result<Option<f64>, FieldError> {
        self.get_opt(field)
            .map(|v| {
                v.as_f64()
                    .ok_or_else(|| FieldError::new(field, "expected a number"))
            })
            .transpose()
    }

    pub fn opt_value(&self, field: &str) -> Option<&'a Value> {
        self.get_opt(field)
    }
}

/// Reads non-blank lines, yielding `(1-based line number, line)`.
pub(crate) fn read_lines(path: &Path) -> Result<Vec<(usize, String)>, LoadError> {
    let io_err = |source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

pub(crate) fn parse_value(path: &Path, line_no: usize, line: &str) -> Result<Value, LoadError> {
    serde_json::from_str(line).map_err(|e| LoadError::Json {
        path: path.to_path_buf(),
        line: line_no,
        message: e.to_string(),
    })
}

/// Reads a JSONL file straight into serde types. Used for formats this crate
/// writes itself (prompt dumps, captures, selections).
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, LoadError> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            serde_json::from_str(&line).map_err(|e| LoadError::Json {
                path: path.to_path_buf(),
                line: n,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Serializes one record per line, `\n`-terminated.
pub fn to_jsonl_string<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serialization is infallible"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}
