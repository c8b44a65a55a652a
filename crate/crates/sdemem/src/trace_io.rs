//! Trace CSV: `iteration`, parameters in layout order, `loglik`,
//! `logprior`, then one `accept_<block>` column per update block.

use std::io::{Read, Write};
use std::path::Path;

use sdemem_core::samplers::{Method, Trace};
use sdemem_core::{ModelSpec, Sdemem};

use crate::error::{AppError, Result};
use crate::fmt_f64;

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(w)
}

fn write_err(e: impl std::fmt::Display) -> AppError {
    AppError::Data(format!("writing trace: {e}"))
}

pub fn write_trace<W: Write>(trace: &Trace, writer: W) -> Result<()> {
    let mut w = csv_writer(writer);
    let mut header = vec![String::from("iteration")];
    header.extend(trace.param_names.iter().map(|s| s.to_string()));
    header.push("loglik".into());
    header.push("logprior".into());
    header.extend(trace.block_names.iter().map(|b| format!("accept_{b}")));
    w.write_record(&header).map_err(write_err)?;
    let b = trace.block_names.len();
    for i in 0..trace.rows() {
        let mut row = vec![(i + 1).to_string()];
        row.extend(trace.theta_row(i).iter().map(|&x| fmt_f64(x)));
        row.push(fmt_f64(trace.loglik[i]));
        row.push(fmt_f64(trace.log_prior[i]));
        row.extend(trace.accept[i * b..(i + 1) * b].iter().map(|&x| fmt_f64(x)));
        w.write_record(&row).map_err(write_err)?;
    }
    w.flush().map_err(write_err)
}

/// Random effects per iteration, columns `<subject>:<effect>`.
pub fn write_etas<W: Write>(trace: &Trace, subject_ids: &[String], re_names: &[&str], writer: W) -> Result<()> {
    let mut w = csv_writer(writer);
    let mut header = vec![String::from("iteration")];
    for id in subject_ids {
        header.extend(re_names.iter().map(|r| format!("{id}:{r}")));
    }
    w.write_record(&header).map_err(write_err)?;
    let width = subject_ids.len() * re_names.len();
    if width > 0 {
        for (i, row) in trace.etas.chunks(width).enumerate() {
            let mut rec = vec![(i + 1).to_string()];
            rec.extend(row.iter().map(|&x| fmt_f64(x)));
            w.write_record(&rec).map_err(write_err)?;
        }
    }
    w.flush().map_err(write_err)
}

pub fn save_trace(trace: &Trace, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| AppError::io(path, e))?;
    write_trace(trace, std::io::BufWriter::new(file))
}

fn method_for_blocks(blocks: &[&str]) -> Option<Method> {
    [Method::Iapm, Method::Cwpm, Method::Mpm]
        .into_iter()
        .find(|m| m.blocks() == blocks)
}

/// Reads a trace written by [`write_trace`]; the parameter columns must be
/// those of a built-in model. Duration and seeds are not stored in the file.
pub fn read_trace<R: Read>(reader: R) -> Result<(ModelSpec, Trace)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| AppError::Data(format!("trace header: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    let ll = header
        .iter()
        .position(|h| h == "loglik")
        .ok_or_else(|| AppError::Data("trace has no loglik column".into()))?;
    if header.first().map(String::as_str) != Some("iteration")
        || header.get(ll + 1).map(String::as_str) != Some("logprior")
    {
        return Err(AppError::Data(
            "trace header must be iteration,<parameters>,loglik,logprior,...".into(),
        ));
    }
    let params = &header[1..ll];
    let model = [ModelSpec::Constant, ModelSpec::Tumour]
        .into_iter()
        .find(|m| m.layout().iter().map(|d| d.name).eq(params.iter().map(String::as_str)))
        .ok_or_else(|| {
            AppError::Data(format!(
                "parameter columns `{}` match no built-in model",
                params.join(",")
            ))
        })?;
    let blocks: Vec<&str> = header[ll + 2..]
        .iter()
        .map(|h| {
            h.strip_prefix("accept_")
                .ok_or_else(|| AppError::Data(format!("unexpected column `{h}`")))
        })
        .collect::<Result<_>>()?;
    let method = method_for_blocks(&blocks)
        .ok_or_else(|| AppError::Data(format!("acceptance columns `{}` match no method", blocks.join(","))))?;
    let p = params.len();
    let mut trace = Trace {
        method,
        param_names: model.layout().iter().map(|d| d.name).collect(),
        theta: Vec::new(),
        etas: Vec::new(),
        loglik: Vec::new(),
        log_prior: Vec::new(),
        block_names: method.blocks().to_vec(),
        accept: Vec::new(),
        duration_secs: 0.0,
        final_seeds: Vec::new(),
    };
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            AppError::Data(format!("trace line {line}: {e}"))
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let values: Vec<f64> = record
            .iter()
            .skip(1)
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| AppError::Data(format!("trace line {line}: malformed number")))?;
        if values.len() != header.len() - 1 {
            return Err(AppError::Data(format!("trace line {line}: wrong number of fields")));
        }
        trace.theta.extend_from_slice(&values[..p]);
        trace.loglik.push(values[p]);
        trace.log_prior.push(values[p + 1]);
        trace.accept.extend_from_slice(&values[p + 2..]);
    }
    if trace.rows() == 0 {
        return Err(AppError::Data("trace has no rows".into()));
    }
    Ok((model, trace))
}

pub fn load_trace(path: &Path) -> Result<(ModelSpec, Trace)> {
    let file = std::fs::File::open(path).map_err(|e| AppError::io(path, e))?;
    read_trace(std::io::BufReader::new(file))
}
