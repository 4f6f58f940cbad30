//! Run-length (event) coding of piecewise-constant sequences: each maximal
//! run of a repeated symbol becomes one observation whose elapsed time is
//! the duration of the run.

use super::{IrregularSequence, Label};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn event_encode(seq: &IrregularSequence) -> Result<IrregularSequence> {
    if seq.valid_len == 0 {
        return Err(Error::contract("cannot event-encode an empty sequence"));
    }
    if matches!(seq.label, Label::PerStep(_)) {
        return Err(Error::contract(
            "event encoding merges steps, per-step labels are not supported",
        ));
    }
    let dim = seq.dim();
    let mut symbols: Vec<f64> = Vec::new();
    let mut elapsed: Vec<f64> = Vec::new();
    for t in 0..seq.valid_len {
        let row = seq.features.row(t);
        let same = !elapsed.is_empty() && symbols[symbols.len() - dim..] == *row;
        if same {
            *elapsed.last_mut().expect("non-empty") += seq.elapsed[t];
        } else {
            symbols.extend_from_slice(row);
            elapsed.push(seq.elapsed[t]);
        }
    }
    let events = elapsed.len();
    IrregularSequence::new(
        Tensor::from_vec(events, dim, symbols)?,
        elapsed,
        seq.label.clone(),
        events,
    )
}

/// Expands events back into one row per `period`.
pub fn event_decode(seq: &IrregularSequence, period: f64) -> Result<IrregularSequence> {
    let dim = seq.dim();
    let mut rows = Vec::new();
    let mut count = 0;
    for t in 0..seq.valid_len {
        let run = seq.elapsed[t] / period;
        let n = run.round();
        if n < 1.0 || (run - n).abs() > 1e-6 {
            return Err(Error::contract(format!(
                "event {t} lasts {} which is not a whole number of periods",
                seq.elapsed[t]
            )));
        }
        for _ in 0..n as usize {
            rows.extend_from_slice(seq.features.row(t));
            count += 1;
        }
    }
    IrregularSequence::new(
        Tensor::from_vec(count, dim, rows)?,
        vec![period; count],
        seq.label.clone(),
        count,
    )
}
