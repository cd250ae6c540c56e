//! Per-iteration metrics rows, their CSV form and the MSE to a reference.

use std::collections::HashMap;
use std::io::{Read, Write};

use dabd_core::body::Dof;
use dabd_core::error::Error;
use dabd_runtime::message::Signal;
use dabd_runtime::Transcript;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Mean over all DoF entries of the squared difference.
pub fn mse_to_reference(q: &[Dof], q_ref: &[Dof]) -> Result<f64> {
    if q.len() != q_ref.len() {
        return Err(Error::DimensionMismatch {
            expected: q_ref.len(),
            got: q.len(),
        }
        .into());
    }
    if q.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = q
        .iter()
        .zip(q_ref)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok(sum / (6 * q.len()) as f64)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

fn split<T: std::str::FromStr>(s: &str) -> std::result::Result<Vec<T>, T::Err> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(';').map(str::parse).collect()
}

/// One row per `(frame, attempt, k)`. Per-worker columns hold
/// `;`-separated values in worker order. Times are seconds; `t_*` are the
/// only wall-clock columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub frame: u64,
    pub attempt: u32,
    pub k: u32,
    pub h: f64,
    pub dq_inf: String,
    pub r_inf: f64,
    pub s_inf: f64,
    pub min_toi: f64,
    pub newton_iterations: String,
    pub work: String,
    pub contacts: u32,
    pub candidates: u32,
    pub decision: String,
    pub mse: Option<f64>,
    pub t_solve: String,
    pub t_coll: String,
    pub t_sync: String,
}

pub const CSV_COLUMNS: [&str; 17] = [
    "frame",
    "attempt",
    "k",
    "h",
    "dq_inf",
    "r_inf",
    "s_inf",
    "min_toi",
    "newton_iterations",
    "work",
    "contacts",
    "candidates",
    "decision",
    "mse",
    "t_solve",
    "t_coll",
    "t_sync",
];

impl MetricsRecord {
    pub fn dq_inf(&self) -> Vec<f64> {
        split(&self.dq_inf).unwrap_or_default()
    }

    pub fn newton_iterations(&self) -> Vec<u32> {
        split(&self.newton_iterations).unwrap_or_default()
    }

    pub fn work(&self) -> Vec<f64> {
        split(&self.work).unwrap_or_default()
    }

    /// The row with its wall-clock columns blanked.
    pub fn without_timing(&self) -> Self {
        Self {
            t_solve: String::new(),
            t_coll: String::new(),
            t_sync: String::new(),
            ..self.clone()
        }
    }
}

fn decision_name(s: &Signal) -> String {
    match s {
        Signal::Continue => "continue".into(),
        Signal::End => "end".into(),
        Signal::AbortRetry { h } => format!("abort:{h}"),
    }
}

/// Rows of a transcript; `mse` is looked up by `(frame, attempt, k)`.
pub fn records(transcript: &Transcript, mse: &HashMap<(u64, u32, u32), f64>) -> Vec<MetricsRecord> {
    transcript
        .iterations
        .iter()
        .map(|r| MetricsRecord {
            frame: r.frame,
            attempt: r.attempt,
            k: r.k,
            h: r.h,
            dq_inf: join(&r.dq_inf),
            r_inf: r.r_inf,
            s_inf: r.s_inf,
            min_toi: r.min_toi,
            newton_iterations: join(&r.newton_iterations),
            work: join(&r.work),
            contacts: r.contacts,
            candidates: r.candidates,
            decision: decision_name(&r.decision),
            mse: mse.get(&(r.frame, r.attempt, r.k)).copied(),
            t_solve: join(&r.t_solve),
            t_coll: join(&r.t_coll),
            t_sync: join(&r.t_sync),
        })
        .collect()
}

pub fn write_csv<W: Write>(w: W, rows: &[MetricsRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    if rows.is_empty() {
        wr.write_record(CSV_COLUMNS)?;
    }
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<MetricsRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let header: Vec<String> = rd.headers()?.iter().map(String::from).collect();
    if header != CSV_COLUMNS {
        return Err(crate::error::HarnessError::Config(format!(
            "unexpected metrics columns {header:?}"
        )));
    }
    Ok(rd
        .deserialize()
        .collect::<std::result::Result<Vec<_>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_examples() {
        let a = vec![Dof::new(1.0, 2.0, 3.0, 4.0, 5.0, 6.0); 3];
        assert_eq!(mse_to_reference(&a, &a).unwrap(), 0.0);
        let d = 0.25;
        let b: Vec<Dof> = a.iter().map(|q| q.add_scalar(d)).collect();
        assert!((mse_to_reference(&b, &a).unwrap() - d * d).abs() < 1e-15);
        let q = vec![
            Dof::new(1.0, 0.0, 1.0, 0.0, 0.0, 1.0),
            Dof::new(0.0, 2.0, 1.0, 0.0, 0.0, 1.0),
        ];
        let r = vec![
            Dof::new(0.0, 0.0, 1.0, 0.0, 0.0, 1.0),
            Dof::new(0.0, 0.0, 1.0, 0.5, 0.0, 1.0),
        ];
        // (1 + 4 + 0.25) / 12
        assert!((mse_to_reference(&q, &r).unwrap() - 0.4375).abs() < 1e-15);
        assert!(mse_to_reference(&q[..1], &r).is_err());
    }

    fn row(frame: u64, k: u32, mse: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            frame,
            attempt: 0,
            k,
            h: 0.01,
            dq_inf: join(&[1e-3, 2.5e-7]),
            r_inf: 0.1,
            s_inf: 1.0 / 3.0,
            min_toi: 1.0,
            newton_iterations: join(&[3u32, 4]),
            work: join(&[30.0, 44.0]),
            contacts: 7,
            candidates: 20,
            decision: "continue".into(),
            mse,
            t_solve: join(&[0.001, 0.002]),
            t_coll: join(&[0.0, 0.0]),
            t_sync: String::new(),
        }
    }

    #[test]
    fn csv_round_trips() {
        let rows = vec![row(0, 1, Some(1e-9)), row(0, 2, None)];
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&CSV_COLUMNS.join(",")));
        let back = read_csv(&buf[..]).unwrap();
        assert_eq!(back, rows);
        assert_eq!(back[0].dq_inf(), vec![1e-3, 2.5e-7]);
        assert_eq!(back[0].newton_iterations(), vec![3, 4]);
    }

    #[test]
    fn empty_csv_has_header() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &[]).unwrap();
        assert!(read_csv(&buf[..]).unwrap().is_empty());
    }

    proptest! {
        #[test]
        fn float_columns_round_trip(x in proptest::num::f64::NORMAL, y in proptest::num::f64::NORMAL) {
            let mut r = row(1, 1, Some(x.abs()));
            r.r_inf = y;
            r.dq_inf = join(&[x, y]);
            let mut buf = Vec::new();
            write_csv(&mut buf, std::slice::from_ref(&r)).unwrap();
            let back = read_csv(&buf[..]).unwrap();
            prop_assert_eq!(back[0].r_inf.to_bits(), y.to_bits());
            prop_assert_eq!(back[0].dq_inf(), vec![x, y]);
            prop_assert_eq!(back[0].mse, Some(x.abs()));
        }
    }
}
