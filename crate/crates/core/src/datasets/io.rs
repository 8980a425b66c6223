//! Dataset files: a CSV with header `id,split,label,x_0,..,x_{n-1}` and a
//! `key=value` metadata sidecar.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{DomainDataset, Metadata};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sidecar path for a dataset CSV: `foo.csv` -> `foo.meta`.
pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta")
}

pub fn to_csv(ds: &DomainDataset) -> String {
    let mut out = String::from("id,split,label");
    for j in 0..ds.input_dim() {
        write!(out, ",x_{j}").unwrap();
    }
    out.push('\n');
    let parts = [
        ("source", &ds.source_x, ds.source_y.as_slice()),
        ("target", &ds.target_x, ds.target_labels()),
    ];
    for (split, x, y) in parts {
        for (i, label) in y.iter().enumerate() {
            write!(out, "{i},{split},{label}").unwrap();
            for v in x.row(i) {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
    }
    out
}

pub fn meta_to_string(meta: &Metadata) -> String {
    meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str, path: &str) -> Result<Metadata> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: path.to_string(),
            line: n + 1,
            msg: format!("expected key=value, got `{line}`"),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

pub fn from_csv(text: &str, metadata: Metadata, path: &str) -> Result<DomainDataset> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..3] != ["id", "split", "label"] {
        return Err(perr(
            1,
            "header must start with id,split,label followed by x_0..".into(),
        ));
    }
    for (j, c) in cols[3..].iter().enumerate() {
        if *c != format!("x_{j}") {
            return Err(perr(1, format!("expected column x_{j}, found `{c}`")));
        }
    }
    let dim = cols.len() - 3;

    let (mut sx, mut sy, mut tx, mut ty) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut max_label = 0;
    for (n, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 3 {
            return Err(perr(
                n + 1,
                format!("expected {} fields, got {}", dim + 3, fields.len()),
            ));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| perr(n + 1, format!("bad id `{}`", fields[0])))?;
        let label: usize = fields[2]
            .parse()
            .map_err(|_| perr(n + 1, format!("bad label `{}`", fields[2])))?;
        max_label = max_label.max(label);
        let (x, y) = match fields[1] {
            "source" => (&mut sx, &mut sy),
            "target" => (&mut tx, &mut ty),
            other => return Err(perr(n + 1, format!("unknown split `{other}`"))),
        };
        if id != y.len() {
            return Err(perr(n + 1, format!("expected id {} within split, got {id}", y.len())));
        }
        for f in &fields[3..] {
            let v: f64 = f.parse().map_err(|_| perr(n + 1, format!("bad value `{f}`")))?;
            x.push(v);
        }
        y.push(label);
    }
    let classes = match metadata.iter().find(|(k, _)| k == "classes") {
        Some((_, v)) => v
            .parse()
            .map_err(|_| Error::Config(format!("metadata `classes` is not a count: `{v}`")))?,
        None => max_label + 1,
    };
    let (ns, nt) = (sy.len(), ty.len());
    DomainDataset::new(
        Tensor::new(ns, dim, sx)?,
        sy,
        Tensor::new(nt, dim, tx)?,
        ty,
        classes,
        metadata,
    )
}

/// Writes `csv` and its metadata sidecar.
pub fn save(ds: &DomainDataset, csv: &Path) -> Result<()> {
    fs::write(csv, to_csv(ds)).map_err(|e| Error::io(csv, e))?;
    let meta = meta_path(csv);
    fs::write(&meta, meta_to_string(&ds.metadata)).map_err(|e| Error::io(&meta, e))
}

/// Reads a dataset CSV; the sidecar is optional.
pub fn load(csv: &Path) -> Result<DomainDataset> {
    let text = fs::read_to_string(csv).map_err(|e| Error::io(csv, e))?;
    let meta = meta_path(csv);
    let metadata = match fs::read_to_string(&meta) {
        Ok(m) => parse_key_values(&m, &meta.display().to_string())?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(Error::io(&meta, e)),
    };
    from_csv(&text, metadata, &csv.display().to_string())
}
