//! Segmentation metrics and closed-form cost accounting.

mod boundary;
mod flops;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use boundary::{
    boundary_fscore, boundary_mask, brute_force_match, edt_squared, imagewise_fscore, BoundaryScore, Threshold,
    CITYSCAPES_RELATIVE_THRESHOLD,
};
pub use flops::{
    attention_dot_reduction, flops_interlevel, flops_interlevel_patch, flops_selfattention, flops_sra, model_flops,
    FlopsReport, ModelFlops, StageFlops, Term,
};

/// Per-class pixel counts; combine partial results with [`merge`].
///
/// [`merge`]: ConfusionAccumulator::merge
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionAccumulator {
    pub num_classes: usize,
    pub ignore_index: u8,
    pub intersection: Vec<u64>,
    pub pred_count: Vec<u64>,
    pub label_count: Vec<u64>,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize, ignore_index: u8) -> Self {
        Self {
            num_classes,
            ignore_index,
            intersection: vec![0; num_classes],
            pred_count: vec![0; num_classes],
            label_count: vec![0; num_classes],
        }
    }

    /// Adds one prediction/label pair. Pixels labelled `ignore_index` are
    /// skipped whatever their prediction.
    pub fn update(&mut self, pred: &[u8], label: &[u8]) -> Result<()> {
        if pred.len() != label.len() {
            return Err(Error::Data(format!(
                "{} predictions for {} labels",
                pred.len(),
                label.len()
            )));
        }
        let c = self.num_classes;
        for (i, (&p, &l)) in pred.iter().zip(label).enumerate() {
            if l == self.ignore_index {
                continue;
            }
            if p as usize >= c || l as usize >= c {
                return Err(Error::Data(format!(
                    "pixel {i}: class pair ({p}, {l}) outside 0..{c}"
                )));
            }
            self.pred_count[p as usize] += 1;
            self.label_count[l as usize] += 1;
            if p == l {
                self.intersection[p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.num_classes != self.num_classes || other.ignore_index != self.ignore_index {
            return Err(Error::Data("cannot merge accumulators of different shape".into()));
        }
        for c in 0..self.num_classes {
            self.intersection[c] += other.intersection[c];
            self.pred_count[c] += other.pred_count[c];
            self.label_count[c] += other.label_count[c];
        }
        Ok(())
    }

    pub fn union(&self, c: usize) -> u64 {
        self.pred_count[c] + self.label_count[c] - self.intersection[c]
    }

    /// IoU per class; `None` for classes in neither predictions nor labels.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let u = self.union(c);
                (u > 0).then(|| self.intersection[c] as f64 / u as f64)
            })
            .collect()
    }

    /// Mean over present classes; `None` when nothing was counted. The mean
    /// is summed as a fraction and rounded once when the integers allow, so
    /// e.g. (1/2 + 2/3)/2 is exactly `7.0 / 12.0`.
    pub fn miou(&self) -> Option<f64> {
        let present: Vec<(u64, u64)> = (0..self.num_classes)
            .map(|c| (self.intersection[c], self.union(c)))
            .filter(|&(_, u)| u > 0)
            .collect();
        if present.is_empty() {
            return None;
        }
        exact_mean(&present).or_else(|| {
            Some(present.iter().map(|&(i, u)| i as f64 / u as f64).sum::<f64>() / present.len() as f64)
        })
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total: u64 = self.label_count.iter().sum();
        (total > 0).then(|| self.intersection.iter().sum::<u64>() as f64 / total as f64)
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `num/den` fractions, correctly rounded. `None` when the reduced
/// sum outgrows exact `f64` integers.
fn exact_mean(fracs: &[(u64, u64)]) -> Option<f64> {
    let (mut n, mut d) = (0u128, 1u128);
    for &(a, b) in fracs {
        let (a, b) = (a as u128, b as u128);
        n = n.checked_mul(b)?.checked_add(a.checked_mul(d)?)?;
        d = d.checked_mul(b)?;
        let g = gcd(n, d).max(1);
        (n, d) = (n / g, d / g);
    }
    d = d.checked_mul(fracs.len() as u128)?;
    let g = gcd(n, d).max(1);
    (n, d) = (n / g, d / g);
    const EXACT: u128 = 1 << f64::MANTISSA_DIGITS;
    (n <= EXACT && d <= EXACT).then(|| n as f64 / d as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
}

pub fn miou(pred: &[u8], label: &[u8], num_classes: usize, ignore_index: u8) -> Result<MiouReport> {
    let mut acc = ConfusionAccumulator::new(num_classes, ignore_index);
    acc.update(pred, label)?;
    Ok(MiouReport {
        per_class_iou: acc.iou(),
        miou: acc.miou(),
    })
}

/// Centre `crop_h×crop_w` window of a row-major `h×w` map.
pub fn center_crop(map: &[u8], h: usize, w: usize, crop_h: usize, crop_w: usize) -> Result<Vec<u8>> {
    if map.len() != h * w {
        return Err(Error::Data(format!("{} values for a {h}×{w} map", map.len())));
    }
    if crop_h == 0 || crop_w == 0 || crop_h > h || crop_w > w {
        return Err(Error::Data(format!("crop {crop_h}×{crop_w} does not fit in {h}×{w}")));
    }
    let (y0, x0) = ((h - crop_h) / 2, (w - crop_w) / 2);
    Ok((y0..y0 + crop_h).flat_map(|y| map[y * w + x0..y * w + x0 + crop_w].iter().copied()).collect())
}

/// Applies `metric(pred, label, crop_h, crop_w)` to the aligned centre crops.
pub fn crop_eval<R>(
    pred: &[u8],
    label: &[u8],
    h: usize,
    w: usize,
    crop_h: usize,
    crop_w: usize,
    metric: impl FnOnce(&[u8], &[u8], usize, usize) -> Result<R>,
) -> Result<R> {
    let p = center_crop(pred, h, w, crop_h, crop_w)?;
    let l = center_crop(label, h, w, crop_h, crop_w)?;
    metric(&p, &l, crop_h, crop_w)
}

/// Quality of one image's prediction.
#[derive(Debug, Clone, PartialEq)]
struct ImageScores {
    counts: ConfusionAccumulator,
    class_f: Vec<Option<f64>>,
    mean_f: Option<f64>,
    imagewise_f: f64,
}

fn score_image(pred: &[u8], label: &[u8], h: usize, w: usize, num_classes: usize, threshold: Threshold) -> Result<ImageScores> {
    let mut counts = ConfusionAccumulator::new(num_classes, IGNORE);
    counts.update(pred, label)?;
    let (class_f, mean_f) = boundary_fscore(pred, label, h, w, num_classes, threshold)?;
    let imagewise_f = imagewise_fscore(pred, label, h, w, threshold)?.f;
    Ok(ImageScores { counts, class_f, mean_f, imagewise_f })
}

const IGNORE: u8 = crate::encoder::IGNORE_INDEX;

/// Scores over a centre crop of every image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropReport {
    pub crop_h: usize,
    pub crop_w: usize,
    pub miou: Option<f64>,
    pub fscore_3px: Option<f64>,
    pub imagewise_fscore: Option<f64>,
}

/// Dataset-level metrics. Boundary scores are averaged over images; the
/// IoU counts are pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_images: usize,
    pub pixel_accuracy: Option<f64>,
    pub miou: Option<f64>,
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean per-class boundary F under `threshold`.
    pub fscore_3px: Option<f64>,
    pub per_class_fscore: Vec<Option<f64>>,
    pub imagewise_fscore: Option<f64>,
    pub threshold: Threshold,
    pub crops: Vec<CropReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flops: Option<ModelFlops>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<usize>,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Pools per-image scores for `(pred, label)` pairs of `h×w` maps.
pub fn evaluate_maps(
    preds: &[Vec<u8>],
    labels: &[Vec<u8>],
    h: usize,
    w: usize,
    num_classes: usize,
    threshold: Threshold,
) -> Result<EvalReport> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Data(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let per: Vec<Result<ImageScores>> = crate::tensor::par::map_indices(preds.len(), preds.len() * h * w * 64, |i| {
        score_image(&preds[i], &labels[i], h, w, num_classes, threshold)
    });
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let mut counts = ConfusionAccumulator::new(num_classes, IGNORE);
    for s in &per {
        counts.merge(&s.counts)?;
    }
    let per_class_fscore = (0..num_classes).map(|c| mean(per.iter().filter_map(|s| s.class_f[c]))).collect();
    Ok(EvalReport {
        num_images: preds.len(),
        pixel_accuracy: counts.pixel_accuracy(),
        miou: counts.miou(),
        per_class_iou: counts.iou(),
        fscore_3px: mean(per.iter().filter_map(|s| s.mean_f)),
        per_class_fscore,
        imagewise_fscore: mean(per.iter().map(|s| s.imagewise_f)),
        threshold,
        crops: Vec::new(),
        flops: None,
        params: None,
    })
}

/// [`evaluate_maps`] on the centre `crop_h×crop_w` window of every pair.
pub fn evaluate_crop(
    preds: &[Vec<u8>],
    labels: &[Vec<u8>],
    h: usize,
    w: usize,
    crop: (usize, usize),
    num_classes: usize,
    threshold: Threshold,
) -> Result<CropReport> {
    let cut = |maps: &[Vec<u8>]| -> Result<Vec<Vec<u8>>> {
        maps.iter().map(|m| center_crop(m, h, w, crop.0, crop.1)).collect()
    };
    let r = evaluate_maps(&cut(preds)?, &cut(labels)?, crop.0, crop.1, num_classes, threshold)?;
    Ok(CropReport {
        crop_h: crop.0,
        crop_w: crop.1,
        miou: r.miou,
        fscore_3px: r.fscore_3px,
        imagewise_fscore: r.imagewise_fscore,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let l = [0, 1, 2, 2, 1, 0];
        assert_eq!(miou(&l, &l, 3, 255).unwrap().miou, Some(1.0));
    }

    #[test]
    fn seven_twelfths() {
        let r = miou(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, 255).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert_eq!(r.miou, Some(7.0 / 12.0));
    }

    #[test]
    fn exact_mean_falls_back_on_overflow() {
        assert_eq!(exact_mean(&[(1, 3), (1, 6)]), Some(0.25));
        let big = u64::MAX - 58;
        assert_eq!(exact_mean(&[(1, big), (1, big - 2), (1, big - 4)]), None);
        let mut acc = ConfusionAccumulator::new(2, 255);
        acc.intersection = vec![1, 1];
        acc.pred_count = vec![big, 1];
        acc.label_count = vec![1, big - 1];
        let want = (1.0 / big as f64 + 1.0 / (big - 1) as f64) / 2.0;
        assert!((acc.miou().unwrap() - want).abs() < 1e-30);
    }

    #[test]
    fn all_ignored_has_no_mean() {
        let r = miou(&[0, 1], &[255, 255], 2, 255).unwrap();
        assert_eq!(r.miou, None);
        assert_eq!(r.per_class_iou, vec![None, None]);
    }

    #[test]
    fn absent_classes_excluded() {
        let r = miou(&[0, 0], &[0, 0], 3, 255).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(1.0), None, None]);
        assert_eq!(r.miou, Some(1.0));
    }

    #[test]
    fn out_of_range_classes() {
        assert!(miou(&[3], &[0], 3, 255).is_err());
        assert!(miou(&[0], &[7], 3, 255).is_err());
        assert!(miou(&[0, 1], &[0], 3, 255).is_err());
    }

    #[test]
    fn merge_equals_joint_update() {
        let (p, l) = ([0u8, 1, 2, 2, 1, 0, 1, 1], [0u8, 1, 1, 2, 255, 0, 2, 1]);
        let mut a = ConfusionAccumulator::new(3, 255);
        a.update(&p[..4], &l[..4]).unwrap();
        let mut b = ConfusionAccumulator::new(3, 255);
        b.update(&p[4..], &l[4..]).unwrap();
        a.merge(&b).unwrap();
        let mut whole = ConfusionAccumulator::new(3, 255);
        whole.update(&p, &l).unwrap();
        assert_eq!(a, whole);
        for c in 0..3 {
            assert!(whole.intersection[c] <= whole.pred_count[c].min(whole.label_count[c]));
        }
    }

    #[test]
    fn crops() {
        let pred: Vec<u8> = (0..16).map(|i| (i % 3) as u8).collect();
        let label: Vec<u8> = (0..16).map(|i| (i % 2) as u8).collect();
        let full = crop_eval(&pred, &label, 4, 4, 4, 4, |p, l, _, _| miou(p, l, 3, 255)).unwrap();
        assert_eq!(full, miou(&pred, &label, 3, 255).unwrap());
        let centre = crop_eval(&pred, &label, 4, 4, 2, 2, |p, l, _, _| miou(p, l, 3, 255)).unwrap();
        // Rows 1..3, cols 1..3 by hand: indices 5, 6, 9, 10.
        let hand_p = [5 % 3, 6 % 3, 9 % 3, 10 % 3];
        let hand_l = [1, 0, 1, 0];
        assert_eq!(centre, miou(&hand_p, &hand_l, 3, 255).unwrap());
        assert!(crop_eval(&pred, &label, 4, 4, 5, 2, |p, l, _, _| miou(p, l, 3, 255)).is_err());
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let labels: Vec<Vec<u8>> = (0..3).map(|k| (0..64).map(|i| ((i / 8 + k) % 3) as u8).collect()).collect();
        let r = evaluate_maps(&labels, &labels, 8, 8, 3, Threshold::Pixels(3.0)).unwrap();
        assert_eq!((r.miou, r.pixel_accuracy), (Some(1.0), Some(1.0)));
        assert_eq!((r.fscore_3px, r.imagewise_fscore), (Some(1.0), Some(1.0)));
        let c = evaluate_crop(&labels, &labels, 8, 8, (4, 4), 3, Threshold::Pixels(3.0)).unwrap();
        assert_eq!(c.miou, Some(1.0));
        assert!(evaluate_maps(&labels, &labels[..2], 8, 8, 3, Threshold::default()).is_err());
    }

    #[test]
    fn pooled_counts_match_joint_update() {
        let p: Vec<Vec<u8>> = vec![vec![0, 1, 1, 1], vec![1, 1, 0, 0]];
        let l: Vec<Vec<u8>> = vec![vec![0, 0, 1, 1], vec![1, 0, 0, 255]];
        let r = evaluate_maps(&p, &l, 2, 2, 2, Threshold::Pixels(1.0)).unwrap();
        let joint = miou(&p.concat(), &l.concat(), 2, 255).unwrap();
        assert_eq!(r.per_class_iou, joint.per_class_iou);
        assert_eq!(r.pixel_accuracy, Some(5.0 / 7.0));
        let json = serde_json::to_value(&r).unwrap();
        for key in ["miou", "per_class_iou", "fscore_3px", "imagewise_fscore"] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }

    #[test]
    fn crop_can_drop_a_class() {
        let mut label = vec![0u8; 36];
        label[0] = 2;
        let r = crop_eval(&label, &label, 6, 6, 2, 2, |p, l, _, _| miou(p, l, 3, 255)).unwrap();
        assert_eq!(r.per_class_iou[2], None);
    }
}
