//! Small pieces shared by every training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::{Error, Result};

/// Append-only CSV training curve. A `None` path discards rows.
pub struct CsvLog {
    out: Option<BufWriter<File>>,
}

impl CsvLog {
    pub fn create(path: Option<&Path>, header: &str) -> Result<Self> {
        let out = match path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    if !dir.as_os_str().is_empty() {
                        std::fs::create_dir_all(dir)?;
                    }
                }
                let mut w = BufWriter::new(File::create(p)?);
                writeln!(w, "{header}")?;
                Some(w)
            }
            None => None,
        };
        Ok(Self { out })
    }

    pub fn row(&mut self, fields: &[f64]) -> Result<()> {
        if let Some(w) = &mut self.out {
            let line: Vec<String> = fields.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.out {
            w.flush()?;
        }
        Ok(())
    }
}

pub fn adamw(vars: Vec<Var>, lr: f64, weight_decay: f64) -> Result<AdamW> {
    Ok(AdamW::new(vars, ParamsAdamW { lr, weight_decay, ..Default::default() })?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

pub fn ensure_finite(step: usize, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, what: what.to_string() })
    }
}

/// One optimizer step on `loss`, returning its value. Non-finite losses abort
/// before any parameter is touched.
pub fn step(opt: &mut AdamW, loss: &Tensor, step: usize, what: &str) -> Result<f64> {
    let v = scalar(loss)?;
    ensure_finite(step, what, v)?;
    opt.backward_step(loss)?;
    Ok(v)
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}
