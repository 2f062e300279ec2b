//! Top-1 accuracy on the clean split and every shifted split.

use std::collections::BTreeMap;

use ftp_core::model::{forward, predict_classes};
use ftp_core::{MlpSpec, NamedParams};

use crate::dataset::{ShiftDataset, ShiftKind, Split, SEVERITIES};
use crate::error::Result;
use crate::metrics::AccuracyTable;

pub fn accuracy(spec: &MlpSpec, params: &NamedParams, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(ftp_core::Error::Domain("cannot score an empty split".into()).into());
    }
    let predicted = predict_classes(&forward(spec, params, &split.inputs)?);
    let hits = predicted
        .iter()
        .zip(&split.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / split.len() as f64)
}

pub fn evaluate(
    spec: &MlpSpec,
    params: &NamedParams,
    data: &ShiftDataset,
) -> Result<AccuracyTable> {
    if spec.output_width() != data.spec.classes {
        return Err(ftp_core::Error::Domain(format!(
            "model has {} outputs but the dataset has {} classes",
            spec.output_width(),
            data.spec.classes
        ))
        .into());
    }
    let id = accuracy(spec, params, &data.clean)?;
    let mut ood = BTreeMap::new();
    for kind in ShiftKind::ALL {
        let mut by_severity = BTreeMap::new();
        for s in 1..=SEVERITIES {
            by_severity.insert(s, accuracy(spec, params, data.split(kind, s)?)?);
        }
        ood.insert(kind.to_string(), by_severity);
    }
    let mut table = AccuracyTable {
        id,
        ood,
        ood_average: 0.0,
    };
    let means = table.kind_means();
    table.ood_average = means.values().sum::<f64>() / means.len() as f64;
    Ok(table)
}
