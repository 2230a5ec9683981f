//! Segmentation scores: IoU, trimap IoU around label boundaries, and
//! instance-weighted iIoU.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{dim_err, invalid, Result};
use crate::labels::{LabelMap, IGNORE_LABEL};

fn check_pair(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(dim_err!(
            "prediction {}x{} and ground truth {}x{} differ",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        ));
    }
    Ok(())
}

/// `counts[gt][pred]` over evaluated pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel where `mask` holds and the ground truth is not ignored.
    pub fn add_masked(&mut self, pred: &LabelMap, gt: &LabelMap, mask: Option<&[bool]>) -> Result<()> {
        check_pair(pred, gt)?;
        for (p, (&pl, &gl)) in pred.data().iter().zip(gt.data()).enumerate() {
            if gl == IGNORE_LABEL || mask.is_some_and(|m| !m[p]) {
                continue;
            }
            let (g, q) = (gl as usize, pl as usize);
            if g >= self.classes || q >= self.classes {
                return Err(invalid!("label {} or prediction {} outside {} classes", gl, pl, self.classes));
            }
            self.counts[g * self.classes + q] += 1;
        }
        Ok(())
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        self.add_masked(pred, gt, None)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(dim_err!("cannot merge {}-class and {}-class matrices", self.classes, other.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Per-class scores and their mean over classes that have a score.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
    /// False when no pixel was evaluated (e.g. an empty trimap band); `mean` is then NaN.
    pub defined: bool,
}

impl ClassScores {
    fn from_parts(per_class: Vec<Option<f64>>, defined: bool) -> Self {
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if defined && !present.is_empty() { present.iter().sum::<f64>() / present.len() as f64 } else { f64::NAN };
        ClassScores { per_class, mean, defined: defined && !present.is_empty() }
    }
}

/// `TP / (TP + FP + FN)` per class. Classes absent from both prediction and
/// ground truth have no score and are left out of the mean.
pub fn iou(conf: &ConfusionMatrix) -> ClassScores {
    let k = conf.classes;
    let per_class = (0..k)
        .map(|c| {
            let tp = conf.get(c, c);
            let fp: u64 = (0..k).filter(|&g| g != c).map(|g| conf.get(g, c)).sum();
            let fneg: u64 = (0..k).filter(|&p| p != c).map(|p| conf.get(c, p)).sum();
            let denom = tp + fp + fneg;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    ClassScores::from_parts(per_class, conf.total() > 0)
}

/// Pixels whose 4-neighbourhood contains a different ground-truth label.
pub fn boundary_mask(gt: &LabelMap) -> Vec<bool> {
    let (h, w) = (gt.height(), gt.width());
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let l = gt.get(y, x);
            out[y * w + x] = (x > 0 && gt.get(y, x - 1) != l)
                || (x + 1 < w && gt.get(y, x + 1) != l)
                || (y > 0 && gt.get(y - 1, x) != l)
                || (y + 1 < h && gt.get(y + 1, x) != l);
        }
    }
    out
}

/// Pixels within Chebyshev distance `band_px` of a boundary pixel.
pub fn trimap_band(gt: &LabelMap, band_px: usize) -> Vec<bool> {
    let (h, w) = (gt.height(), gt.width());
    let boundary = boundary_mask(gt);
    let mut rows = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(band_px), (x + band_px).min(w - 1));
            rows[y * w + x] = (lo..=hi).any(|xx| boundary[y * w + xx]);
        }
    }
    let mut out = vec![false; h * w];
    for y in 0..h {
        let (lo, hi) = (y.saturating_sub(band_px), (y + band_px).min(h - 1));
        for x in 0..w {
            out[y * w + x] = (lo..=hi).any(|yy| rows[yy * w + x]);
        }
    }
    out
}

/// Confusion restricted to the trimap band of `gt`.
pub fn trimap_confusion(pred: &LabelMap, gt: &LabelMap, band_px: usize, classes: usize) -> Result<ConfusionMatrix> {
    if band_px == 0 {
        return Err(invalid!("trimap band must be at least 1 pixel"));
    }
    let mut conf = ConfusionMatrix::new(classes);
    conf.add_masked(pred, gt, Some(&trimap_band(gt, band_px)))?;
    Ok(conf)
}

pub fn trimap_iou(pred: &LabelMap, gt: &LabelMap, band_px: usize, classes: usize) -> Result<ClassScores> {
    Ok(iou(&trimap_confusion(pred, gt, band_px, classes)?))
}

/// Pixel count and class of every instance id (0 excluded) in one frame.
pub fn instance_sizes(gt: &LabelMap, instances: &LabelMap) -> Result<BTreeMap<u8, (u8, u64)>> {
    check_pair(gt, instances)?;
    let mut out: BTreeMap<u8, (u8, u64)> = BTreeMap::new();
    for (&l, &i) in gt.data().iter().zip(instances.data()) {
        if i == 0 || l == IGNORE_LABEL {
            continue;
        }
        let e = out.entry(i).or_insert((l, 0));
        if e.0 != l {
            return Err(invalid!("instance {i} spans classes {} and {l}", e.0));
        }
        e.1 += 1;
    }
    Ok(out)
}

/// Mean instance size per class over a set of frames; `None` for classes
/// without instances.
pub fn class_average_sizes<'a>(
    frames: impl IntoIterator<Item = (&'a LabelMap, &'a LabelMap)>,
    classes: usize,
) -> Result<Vec<Option<f64>>> {
    let mut sum = vec![0u64; classes];
    let mut count = vec![0u64; classes];
    for (gt, inst) in frames {
        for (_, (class, size)) in instance_sizes(gt, inst)? {
            let c = class as usize;
            if c >= classes {
                return Err(invalid!("label {class} outside {classes} classes"));
            }
            sum[c] += size;
            count[c] += 1;
        }
    }
    Ok((0..classes).map(|c| (count[c] > 0).then(|| sum[c] as f64 / count[c] as f64)).collect())
}

/// Streaming `iTP / (iTP + FP + iFN)`: true-positive and false-negative
/// pixels are weighted by the class's average instance size over the size of
/// their ground-truth instance; false positives count once.
#[derive(Clone, Debug, PartialEq)]
pub struct IIouAccumulator {
    classes: usize,
    instance_classes: Vec<u8>,
    avg_sizes: Vec<Option<f64>>,
    itp: Vec<f64>,
    ifn: Vec<f64>,
    fp: Vec<u64>,
}

impl IIouAccumulator {
    pub fn new(classes: usize, instance_classes: &[u8], avg_sizes: Vec<Option<f64>>) -> Result<Self> {
        if avg_sizes.len() != classes {
            return Err(dim_err!("{} average sizes for {classes} classes", avg_sizes.len()));
        }
        for &c in instance_classes {
            if c as usize >= classes {
                return Err(invalid!("instance class {c} outside {classes} classes"));
            }
            if avg_sizes[c as usize].is_some_and(|s| !(s > 0.0)) {
                return Err(invalid!("class {c} has average instance size 0"));
            }
        }
        Ok(IIouAccumulator {
            classes,
            instance_classes: instance_classes.to_vec(),
            avg_sizes,
            itp: vec![0.0; classes],
            ifn: vec![0.0; classes],
            fp: vec![0; classes],
        })
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, instances: &LabelMap) -> Result<()> {
        check_pair(pred, gt)?;
        let sizes = instance_sizes(gt, instances)?;
        for p in 0..gt.data().len() {
            let (g, q, i) = (gt.data()[p], pred.data()[p], instances.data()[p]);
            if g == IGNORE_LABEL {
                continue;
            }
            if g as usize >= self.classes || q as usize >= self.classes {
                return Err(invalid!("label {g} or prediction {q} outside {} classes", self.classes));
            }
            if g != q && self.instance_classes.contains(&q) {
                self.fp[q as usize] += 1;
            }
            if !self.instance_classes.contains(&g) {
                continue;
            }
            let weight = match (i, self.avg_sizes[g as usize]) {
                (0, _) | (_, None) => 1.0,
                (i, Some(avg)) => {
                    let size = sizes.get(&i).map_or(0, |e| e.1);
                    if size == 0 {
                        return Err(invalid!("instance {i} has size 0"));
                    }
                    avg / size as f64
                }
            };
            if g == q {
                self.itp[g as usize] += weight;
            } else {
                self.ifn[g as usize] += weight;
            }
        }
        Ok(())
    }

    /// Scores for instance classes only; other classes are `None`.
    pub fn scores(&self) -> ClassScores {
        let per_class = (0..self.classes)
            .map(|c| {
                if !self.instance_classes.contains(&(c as u8)) {
                    return None;
                }
                let denom = self.itp[c] + self.fp[c] as f64 + self.ifn[c];
                (denom > 0.0).then(|| self.itp[c] / denom)
            })
            .collect();
        ClassScores::from_parts(per_class, true)
    }
}

/// One-shot iIoU of a single frame.
pub fn iiou(
    pred: &LabelMap,
    gt: &LabelMap,
    instances: &LabelMap,
    instance_classes: &[u8],
    avg_sizes: Vec<Option<f64>>,
) -> Result<ClassScores> {
    let mut acc = IIouAccumulator::new(avg_sizes.len(), instance_classes, avg_sizes)?;
    acc.add(pred, gt, instances)?;
    Ok(acc.scores())
}

/// Accumulates every metric over a stream of frames.
#[derive(Clone, Debug)]
pub struct Evaluator {
    band_px: usize,
    conf: ConfusionMatrix,
    trimap: ConfusionMatrix,
    iiou: IIouAccumulator,
}

impl Evaluator {
    pub fn new(classes: usize, band_px: usize, instance_classes: &[u8], avg_sizes: Vec<Option<f64>>) -> Result<Self> {
        if band_px == 0 {
            return Err(invalid!("trimap band must be at least 1 pixel"));
        }
        Ok(Evaluator {
            band_px,
            conf: ConfusionMatrix::new(classes),
            trimap: ConfusionMatrix::new(classes),
            iiou: IIouAccumulator::new(classes, instance_classes, avg_sizes)?,
        })
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, instances: &LabelMap) -> Result<()> {
        self.conf.add(pred, gt)?;
        self.trimap.add_masked(pred, gt, Some(&trimap_band(gt, self.band_px)))?;
        self.iiou.add(pred, gt, instances)
    }

    pub fn confusion(&self) -> &ConfusionMatrix {
        &self.conf
    }

    pub fn finish(&self, name: impl Into<String>) -> ReportRow {
        ReportRow { name: name.into(), iou: iou(&self.conf), tiou: iou(&self.trimap), iiou: self.iiou.scores() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub iou: ClassScores,
    pub tiou: ClassScores,
    pub iiou: ClassScores,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    pub band_px: usize,
    pub rows: Vec<ReportRow>,
}

fn fmt_score(v: Option<f64>) -> String {
    match v {
        Some(v) if v.is_finite() => format!("{v:.6}"),
        Some(_) => "nan".into(),
        None => String::new(),
    }
}

fn pct(v: f64) -> String {
    if v.is_finite() {
        format!("{:6.2}", 100.0 * v)
    } else {
        format!("{:>6}", "n/a")
    }
}

impl MetricsReport {
    pub fn row(&self, name: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Columns `mode,class,iou,tiou,iiou`; one line per class and a `mean` line per row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,class,iou,tiou,iiou\n");
        for r in &self.rows {
            for (c, name) in self.class_names.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    r.name,
                    name,
                    fmt_score(r.iou.per_class[c]),
                    fmt_score(r.tiou.per_class[c]),
                    fmt_score(r.iiou.per_class[c])
                );
            }
            let _ = writeln!(
                out,
                "{},mean,{},{},{}",
                r.name,
                fmt_score(Some(r.iou.mean)),
                fmt_score(Some(r.tiou.mean)),
                fmt_score(Some(r.iiou.mean))
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<20} {:>6} {:>6} {:>6}   (trimap band {} px)\n", "mode", "IoU", "tIoU", "iIoU", self.band_px);
        for r in &self.rows {
            let _ = writeln!(out, "{:<20} {} {} {}", r.name, pct(r.iou.mean), pct(r.tiou.mean), pct(r.iiou.mean));
        }
        if self.rows.iter().any(|r| !r.tiou.defined) {
            out.push_str("note: empty trimap band for some rows; tIoU undefined\n");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_toy() {
        let gt = LabelMap::from_rows(&[&[0, 0], &[1, 1]]).unwrap();
        let pred = LabelMap::from_rows(&[&[0, 1], &[1, 1]]).unwrap();
        let mut conf = ConfusionMatrix::new(2);
        conf.add(&pred, &gt).unwrap();
        let s = iou(&conf);
        assert_eq!(s.per_class, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert_eq!(s.mean, (0.5 + 2.0 / 3.0) / 2.0);
    }

    #[test]
    fn absent_class_excluded_fp_only_class_zero() {
        let gt = LabelMap::from_rows(&[&[0, 0], &[0, 0]]).unwrap();
        let mut conf = ConfusionMatrix::new(3);
        conf.add(&gt, &gt).unwrap();
        assert_eq!(iou(&conf).per_class, vec![Some(1.0), None, None]);
        let pred = LabelMap::from_rows(&[&[0, 2], &[0, 0]]).unwrap();
        let mut conf = ConfusionMatrix::new(3);
        conf.add(&pred, &gt).unwrap();
        let s = iou(&conf);
        assert_eq!(s.per_class, vec![Some(0.75), None, Some(0.0)]);
        assert_eq!(s.mean, 0.375);
    }

    #[test]
    fn uniform_gt_has_empty_band() {
        let gt = LabelMap::filled(5, 5, 1);
        let s = trimap_iou(&gt, &gt, 2, 2).unwrap();
        assert!(!s.defined);
        assert!(s.mean.is_nan());
    }

    #[test]
    fn band_is_chebyshev() {
        let mut gt = LabelMap::filled(9, 9, 0);
        gt.set(4, 4, 1);
        let band = trimap_band(&gt, 1);
        // boundary: centre plus its 4 neighbours; dilated by a 3x3 square
        assert_eq!(band.iter().filter(|&&b| b).count(), 21);
        assert!(band[3 * 9 + 3]);
        assert!(!band[2 * 9 + 2]);
    }

    #[test]
    fn ignored_pixels_skipped() {
        let gt = LabelMap::from_rows(&[&[0, IGNORE_LABEL]]).unwrap();
        let pred = LabelMap::from_rows(&[&[0, 1]]).unwrap();
        let mut conf = ConfusionMatrix::new(2);
        conf.add(&pred, &gt).unwrap();
        assert_eq!(conf.total(), 1);
    }

    #[test]
    fn zero_average_size_rejected() {
        assert!(IIouAccumulator::new(2, &[1], vec![None, Some(0.0)]).is_err());
    }
}
