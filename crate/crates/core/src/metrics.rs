//! Segmentation quality: per-structure Dice and its slice-level summary.

use std::collections::BTreeMap;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use crate::dataset::{Split, Structure};
use crate::error::{Error, Result};
use crate::latent::percentile;

/// How slices where a structure is absent from both masks are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyPolicy {
    /// Agreement on absence scores 100.
    #[default]
    BothEmptyPerfect,
    /// Such slices are left out of that structure's statistics.
    ExcludeEmpty,
}

fn check_labels(mask: &Array2<u8>, which: &str) -> Result<()> {
    match mask.iter().find(|&&v| Structure::from_code(v).is_none()) {
        Some(v) => Err(Error::UnknownLabel(format!("{which} mask contains label {v}"))),
        None => Ok(()),
    }
}

/// Pixel counts `(|A|, |B|, |A n B|)` of one structure.
fn overlap(pred: &Array2<u8>, truth: &Array2<u8>, structure: Structure) -> Result<(usize, usize, usize)> {
    if pred.dim() != truth.dim() {
        return Err(Error::ShapeMismatch {
            id: "dice".into(),
            detail: format!("prediction {:?} vs truth {:?}", pred.dim(), truth.dim()),
        });
    }
    check_labels(pred, "predicted")?;
    check_labels(truth, "true")?;
    let code = structure.code();
    let (mut a, mut b, mut both) = (0, 0, 0);
    Zip::from(pred).and(truth).for_each(|&p, &t| {
        let (ip, it) = (p == code, t == code);
        a += ip as usize;
        b += it as usize;
        both += (ip && it) as usize;
    });
    Ok((a, b, both))
}

/// Dice overlap in percent. Both masks empty counts as perfect agreement.
pub fn dice(pred: &Array2<u8>, truth: &Array2<u8>, structure: Structure) -> Result<f64> {
    let (a, b, both) = overlap(pred, truth, structure)?;
    if a + b == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * both as f64 / (a + b) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureDice {
    pub avg: f64,
    pub median: f64,
    pub slices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub dataset: Split,
    pub model: String,
    pub policy: EmptyPolicy,
    pub structures: BTreeMap<Structure, StructureDice>,
    /// Mean of the per-structure averages.
    pub global: f64,
}

/// Per-structure average and median Dice over slices.
pub fn dice_report(
    pairs: &[(&Array2<u8>, &Array2<u8>)],
    dataset: Split,
    model: &str,
    policy: EmptyPolicy,
) -> Result<DiceReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("no (prediction, truth) pairs for a dice report".into()));
    }
    let mut structures = BTreeMap::new();
    for s in [Structure::LV, Structure::RV, Structure::MYO] {
        let mut values = Vec::with_capacity(pairs.len());
        for (pred, truth) in pairs {
            let (a, b, _) = overlap(pred, truth, s)?;
            if a + b == 0 && policy == EmptyPolicy::ExcludeEmpty {
                continue;
            }
            values.push(dice(pred, truth, s)?);
        }
        if values.is_empty() {
            return Err(Error::Insufficient(format!("structure {s:?} absent from every slice")));
        }
        let avg = values.iter().sum::<f64>() / values.len() as f64;
        let median = percentile(&values, 50.0);
        structures.insert(s, StructureDice { avg, median, slices: values.len() });
    }
    let global = structures.values().map(|d| d.avg).sum::<f64>() / structures.len() as f64;
    Ok(DiceReport { dataset, model: model.to_string(), policy, structures, global })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn trivial_cases() {
        let a = array![[3u8, 3], [0, 0]];
        assert_eq!(dice(&a, &a, Structure::LV).unwrap(), 100.0);
        let b = array![[0u8, 0], [3, 3]];
        assert_eq!(dice(&a, &b, Structure::LV).unwrap(), 0.0);
        let empty = Array2::<u8>::zeros((2, 2));
        assert_eq!(dice(&empty, &empty, Structure::RV).unwrap(), 100.0);
        assert_eq!(dice(&a, &empty, Structure::LV).unwrap(), 0.0);
    }

    #[test]
    fn partial_overlap() {
        let a = array![[1u8, 1, 1, 1]];
        let b = array![[1u8, 1, 0, 0]];
        assert!((dice(&a, &b, Structure::RV).unwrap() - 66.6667).abs() < 1e-3);
    }

    #[test]
    fn errors() {
        let a = Array2::<u8>::zeros((2, 2));
        let b = Array2::<u8>::zeros((2, 3));
        assert!(matches!(dice(&a, &b, Structure::LV), Err(Error::ShapeMismatch { .. })));
        let c = array![[7u8, 0], [0, 0]];
        assert!(matches!(dice(&c, &a, Structure::LV), Err(Error::UnknownLabel(_))));
        assert!(dice_report(&[], Split::Train, "m", EmptyPolicy::default()).is_err());
    }

    #[test]
    fn report_aggregates() {
        let full = array![[1u8, 2, 3]];
        let r = dice_report(&[(&full, &full)], Split::Dev, "m", EmptyPolicy::default()).unwrap();
        assert!(r.structures.values().all(|d| d.avg == 100.0 && d.median == 100.0));
        assert_eq!(r.global, 100.0);

        let miss = array![[0u8, 2, 3]];
        let r = dice_report(&[(&full, &full), (&miss, &full)], Split::Dev, "m", EmptyPolicy::default()).unwrap();
        let rv = r.structures[&Structure::RV];
        assert_eq!((rv.avg, rv.median), (50.0, 50.0));
    }

    #[test]
    fn exclude_empty_policy() {
        let only_lv = array![[3u8, 0]];
        let full = array![[1u8, 2, 3]];
        let no_rv = array![[0u8, 2, 3]];
        assert!(dice_report(&[(&only_lv, &only_lv)], Split::Dev, "m", EmptyPolicy::ExcludeEmpty).is_err());
        let r = dice_report(&[(&full, &full), (&no_rv, &no_rv)], Split::Dev, "m", EmptyPolicy::ExcludeEmpty).unwrap();
        assert_eq!(r.structures[&Structure::RV].slices, 1);
        assert_eq!(r.structures[&Structure::LV].slices, 2);
    }
}
