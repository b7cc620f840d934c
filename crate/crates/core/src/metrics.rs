//! Overlap and surface-distance scores for label maps.
//!
//! Dice and Jaccard are reported in percent. Both-empty masks score 100 and
//! exactly-one-empty masks score 0. ASD is undefined when either mask is
//! empty; such cases are counted and left out of the averages.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DaclError, Result};
use crate::parallel::Exec;

/// Integer class map, `labels[y * width + x]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(DaclError::shape("label_map", format!("{width}x{height} from {}", labels.len())));
        }
        Ok(Self { width, height, labels })
    }

    fn mask(&self, class_id: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == class_id).collect()
    }
}

fn same_shape(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.width != b.width || a.height != b.height || a.labels.len() != b.labels.len() {
        return Err(DaclError::Contract(format!(
            "label maps {}x{} and {}x{} differ",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub dice: f64,
    pub jaccard: f64,
}

pub fn dice_jaccard(pred: &LabelMap, gt: &LabelMap, class_id: usize) -> Result<Overlap> {
    same_shape(pred, gt)?;
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.labels.iter().zip(&gt.labels) {
        let (ia, ib) = (a as usize == class_id, b as usize == class_id);
        p += ia as usize;
        g += ib as usize;
        both += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(Overlap { dice: 100.0, jaccard: 100.0 });
    }
    let union = p + g - both;
    Ok(Overlap {
        dice: 200.0 * both as f64 / (p + g) as f64,
        jaccard: 100.0 * both as f64 / union as f64,
    })
}

/// Mask pixels with a 4-neighbor outside the mask or on the image edge.
pub fn boundary(mask: &[bool], width: usize, height: usize) -> Vec<(usize, usize)> {
    let inside = |x: isize, y: isize| {
        x >= 0 && y >= 0 && (x as usize) < width && (y as usize) < height && mask[y as usize * width + x as usize]
    };
    let mut out = Vec::new();
    for y in 0..height {
        for x in 0..width {
            if !mask[y * width + x] {
                continue;
            }
            let (xi, yi) = (x as isize, y as isize);
            if !(inside(xi - 1, yi) && inside(xi + 1, yi) && inside(xi, yi - 1) && inside(xi, yi + 1)) {
                out.push((x, y));
            }
        }
    }
    out
}

fn nearest_sum(from: &[(usize, usize)], to: &[(usize, usize)]) -> f64 {
    from.iter()
        .map(|&(x, y)| {
            to.iter()
                .map(|&(u, v)| {
                    let dx = x as f64 - u as f64;
                    let dy = y as f64 - v as f64;
                    dx * dx + dy * dy
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum()
}

/// Average symmetric surface distance in pixels, `None` when either mask is
/// empty.
///
/// Mean over both boundary sets of the distance to the nearest boundary
/// pixel of the other set.
pub fn asd(pred: &LabelMap, gt: &LabelMap, class_id: usize) -> Result<Option<f64>> {
    same_shape(pred, gt)?;
    let bp = boundary(&pred.mask(class_id), pred.width, pred.height);
    let bg = boundary(&gt.mask(class_id), gt.width, gt.height);
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let total = nearest_sum(&bp, &bg) + nearest_sum(&bg, &bp);
    Ok(Some(total / (bp.len() + bg.len()) as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub dice: f64,
    pub jaccard: f64,
    /// Mean over cases where ASD is defined; `None` if it never is.
    pub asd: Option<f64>,
    pub asd_undefined: usize,
}

/// Scores per foreground class and their macro average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_class: BTreeMap<usize, ClassScores>,
    #[serde(rename = "macro")]
    pub macro_avg: ClassScores,
    pub n_cases: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_std_over_seeds: Option<RunAggregate>,
}

/// Scores `(prediction, ground truth)` pairs for classes `1..num_classes`.
pub fn evaluate_cases(cases: &[(LabelMap, LabelMap)], num_classes: usize) -> Result<EvalReport> {
    evaluate_cases_with(Exec::default(), cases, num_classes)
}

pub fn evaluate_cases_with(exec: Exec, cases: &[(LabelMap, LabelMap)], num_classes: usize) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(DaclError::UndefinedMetric("no cases to evaluate".into()));
    }
    let per_case: Vec<Result<Vec<(Overlap, Option<f64>)>>> = exec.map(cases, |(p, g)| {
        (1..num_classes).map(|c| Ok((dice_jaccard(p, g, c)?, asd(p, g, c)?))).collect()
    });
    let per_case = per_case.into_iter().collect::<Result<Vec<_>>>()?;
    let n = cases.len() as f64;
    let mut per_class = BTreeMap::new();
    for c in 1..num_classes {
        let col = per_case.iter().map(|row| row[c - 1]);
        let dice = col.clone().map(|(o, _)| o.dice).sum::<f64>() / n;
        let jaccard = col.clone().map(|(o, _)| o.jaccard).sum::<f64>() / n;
        let defined: Vec<f64> = col.filter_map(|(_, a)| a).collect();
        let asd_undefined = cases.len() - defined.len();
        let asd = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        if asd_undefined > 0 {
            log::debug!("class {c}: ASD undefined in {asd_undefined} case(s)");
        }
        per_class.insert(c, ClassScores { dice, jaccard, asd, asd_undefined });
    }
    let k = per_class.len().max(1) as f64;
    let asds: Vec<f64> = per_class.values().filter_map(|s| s.asd).collect();
    let macro_avg = ClassScores {
        dice: per_class.values().map(|s| s.dice).sum::<f64>() / k,
        jaccard: per_class.values().map(|s| s.jaccard).sum::<f64>() / k,
        asd: (!asds.is_empty()).then(|| asds.iter().sum::<f64>() / asds.len() as f64),
        asd_undefined: per_class.values().map(|s| s.asd_undefined).sum(),
    };
    Ok(EvalReport { per_class, macro_avg, n_cases: cases.len(), mean_std_over_seeds: None })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; omitted for a single run.
    pub std: Option<f64>,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(DaclError::UndefinedMetric("mean of no values".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() >= 2)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Ok(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub runs: usize,
    pub dice: MeanStd,
    pub jaccard: MeanStd,
    pub asd: Option<MeanStd>,
}

/// Mean and sample std of the macro scores over several runs.
pub fn aggregate_runs(reports: &[EvalReport]) -> Result<RunAggregate> {
    if reports.len() < 2 {
        log::warn!("aggregating {} run(s); std omitted", reports.len());
    }
    let dice: Vec<f64> = reports.iter().map(|r| r.macro_avg.dice).collect();
    let jaccard: Vec<f64> = reports.iter().map(|r| r.macro_avg.jaccard).collect();
    let asd: Vec<f64> = reports.iter().filter_map(|r| r.macro_avg.asd).collect();
    Ok(RunAggregate {
        runs: reports.len(),
        dice: MeanStd::of(&dice)?,
        jaccard: MeanStd::of(&jaccard)?,
        asd: if asd.is_empty() { None } else { Some(MeanStd::of(&asd)?) },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(w: usize, h: usize, on: &[(usize, usize)], class: u8) -> LabelMap {
        let mut l = vec![0u8; w * h];
        for &(x, y) in on {
            l[y * w + x] = class;
        }
        LabelMap::new(w, h, l).unwrap()
    }

    #[test]
    fn identical_and_disjoint() {
        let a = map(4, 4, &[(0, 0), (1, 1)], 1);
        let o = dice_jaccard(&a, &a, 1).unwrap();
        assert_eq!((o.dice, o.jaccard), (100.0, 100.0));
        let b = map(4, 4, &[(3, 3), (2, 2)], 1);
        let o = dice_jaccard(&a, &b, 1).unwrap();
        assert_eq!((o.dice, o.jaccard), (0.0, 0.0));
        assert_eq!(asd(&a, &a, 1).unwrap(), Some(0.0));
    }

    #[test]
    fn half_overlap_arithmetic() {
        let p: Vec<_> = (0..100).map(|i| (i % 20, i / 20)).collect();
        let g: Vec<_> = (50..150).map(|i| (i % 20, i / 20)).collect();
        let o = dice_jaccard(&map(20, 10, &p, 1), &map(20, 10, &g, 1), 1).unwrap();
        assert_eq!(o.dice, 50.0);
        assert!((o.jaccard - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_conventions() {
        let e = map(3, 3, &[], 1);
        let o = dice_jaccard(&e, &e, 1).unwrap();
        assert_eq!((o.dice, o.jaccard), (100.0, 100.0));
        let a = map(3, 3, &[(1, 1)], 1);
        assert_eq!(dice_jaccard(&a, &e, 1).unwrap().dice, 0.0);
        assert_eq!(asd(&a, &e, 1).unwrap(), None);
    }

    #[test]
    fn single_pixels_three_apart() {
        let a = map(8, 3, &[(1, 1)], 1);
        let b = map(8, 3, &[(4, 1)], 1);
        assert_eq!(asd(&a, &b, 1).unwrap(), Some(3.0));
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let a = map(3, 3, &[], 1);
        let b = map(4, 3, &[], 1);
        assert!(matches!(dice_jaccard(&a, &b, 1), Err(DaclError::Contract(_))));
    }

    #[test]
    fn interior_pixels_are_not_boundary() {
        let on: Vec<_> = (1..4).flat_map(|y| (1..4).map(move |x| (x, y))).collect();
        let m = map(5, 5, &on, 1);
        let b = boundary(&m.mask(1), 5, 5);
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
        // edge pixels count as boundary even when the mask fills the image
        let full = vec![true; 9];
        assert_eq!(boundary(&full, 3, 3).len(), 8);
    }

    #[test]
    fn aggregate_sample_std() {
        let mk = |d: f64| EvalReport {
            per_class: BTreeMap::new(),
            macro_avg: ClassScores { dice: d, jaccard: d / 2.0, asd: Some(1.0), asd_undefined: 0 },
            n_cases: 1,
            mean_std_over_seeds: None,
        };
        let agg = aggregate_runs(&[mk(88.0), mk(90.0), mk(92.0)]).unwrap();
        assert_eq!(agg.dice.mean, 90.0);
        assert_eq!(agg.dice.std, Some(2.0));
        let same = aggregate_runs(&[mk(70.0), mk(70.0)]).unwrap();
        assert_eq!(same.dice.std, Some(0.0));
        assert_eq!(aggregate_runs(&[mk(70.0)]).unwrap().dice.std, None);
    }
}
