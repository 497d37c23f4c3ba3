//! Per-frame probability timelines as delimited text.
//!
//! Columns: `time_s`, one `p_<label>` column per output class (blank last),
//! `argmax`, and `truth` (empty when no reference is given).

use std::fs::File;
use std::path::Path;

use crate::error::{Error, Result};
use crate::metrics::decode::argmax;
use crate::nn::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Timeline {
    pub labels: Vec<String>,
    pub times: Vec<f64>,
    /// `[T, C+1]`
    pub probs: Tensor,
    pub argmax: Vec<String>,
    pub truth: Vec<Option<String>>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(format!("{}: {e}", path.display())))
}

/// Write a timeline. `labels` names all `C+1` output columns; `truth`, when
/// given, holds one class id (or blank id) per frame.
pub fn timeline_export(
    path: &Path,
    probs: &Tensor,
    frame_hop: f64,
    labels: &[String],
    truth: Option<&[usize]>,
) -> Result<()> {
    let [frames, width] = probs.shape()[..] else {
        return Err(Error::shape("timeline", format!("probabilities must be [T, C+1], got {:?}", probs.shape())));
    };
    if labels.len() != width {
        return Err(Error::InvalidArgument(format!("{} labels for {width} columns", labels.len())));
    }
    if let Some(t) = truth {
        if t.len() != frames || t.iter().any(|&k| k >= width) {
            return Err(Error::InvalidArgument(format!("truth of {} frames for {frames}-frame timeline", t.len())));
        }
    }
    let mut w = csv::Writer::from_writer(File::create(path)?);
    let header: Vec<String> = std::iter::once("time_s".to_string())
        .chain(labels.iter().map(|l| format!("p_{l}")))
        .chain(["argmax".to_string(), "truth".to_string()])
        .collect();
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (g, row) in probs.data().chunks(width).enumerate() {
        let mut rec: Vec<String> = Vec::with_capacity(width + 3);
        rec.push(format!("{}", g as f64 * frame_hop));
        rec.extend(row.iter().map(|p| format!("{p}")));
        rec.push(labels[argmax(row)].clone());
        rec.push(truth.map(|t| labels[t[g]].clone()).unwrap_or_default());
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn timeline_read(path: &Path) -> Result<Timeline> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let n = header.len();
    if n < 4 || &header[0] != "time_s" || &header[n - 2] != "argmax" || &header[n - 1] != "truth" {
        return Err(Error::InvalidArgument(format!("{}: not a timeline file", path.display())));
    }
    let labels: Vec<String> = (1..n - 2)
        .map(|i| header[i].strip_prefix("p_").unwrap_or(&header[i]).to_string())
        .collect();
    let width = labels.len();
    let (mut times, mut probs, mut am, mut truth) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let num = |i: usize| {
            rec[i]
                .parse::<f64>()
                .map_err(|e| Error::InvalidArgument(format!("{}: field {i}: {e}", path.display())))
        };
        times.push(num(0)?);
        for i in 1..=width {
            probs.push(num(i)?);
        }
        am.push(rec[n - 2].to_string());
        truth.push((!rec[n - 1].is_empty()).then(|| rec[n - 1].to_string()));
    }
    Ok(Timeline {
        labels,
        probs: Tensor::new(&[times.len(), width], probs)?,
        times,
        argmax: am,
        truth,
    })
}
