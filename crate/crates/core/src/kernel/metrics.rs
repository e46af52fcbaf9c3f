//! Segmentation metrics from per-task confusion matrices.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::arch::Model;
use super::Example;
use crate::labels::IGNORE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Square confusion counts, `counts[true][pred]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Confusion { classes, counts: vec![0; classes * classes] }
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn fp(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&t| t != c).map(|t| self.get(t, c)).sum()
    }

    pub fn fn_(&self, c: usize) -> u64 {
        (0..self.classes).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    pub fn true_count(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task_name: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: Vec<f64>,
    pub fiou: f64,
    pub loss: f64,
}

impl TaskMetrics {
    /// Precision and recall use class 1 for binary tasks and the macro
    /// average over classes >= 1 otherwise. Empty ratios count as 1.
    pub fn from_confusion(task_name: &str, cm: &Confusion, loss: f64) -> Self {
        let n = cm.total();
        let iou: Vec<f64> = (0..cm.classes).map(|c| ratio(cm.tp(c), cm.tp(c) + cm.fp(c) + cm.fn_(c))).collect();
        let fiou = if n == 0 {
            1.0
        } else {
            (0..cm.classes).map(|c| cm.true_count(c) as f64 / n as f64 * iou[c]).sum()
        };
        let correct: u64 = (0..cm.classes).map(|c| cm.tp(c)).sum();
        let fg = 1..cm.classes;
        let k = fg.len() as f64;
        let precision = fg.clone().map(|c| ratio(cm.tp(c), cm.tp(c) + cm.fp(c))).sum::<f64>() / k;
        let recall = fg.map(|c| ratio(cm.tp(c), cm.tp(c) + cm.fn_(c))).sum::<f64>() / k;
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        TaskMetrics { task_name: task_name.into(), accuracy: ratio(correct, n), precision, recall, f1, iou, fiou, loss }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub split: Split,
    pub epoch: u32,
    pub tasks: Vec<TaskMetrics>,
}

impl MetricsRecord {
    pub fn total_loss(&self) -> f64 {
        self.tasks.iter().map(|t| t.loss).sum()
    }

    pub fn task(&self, name: &str) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.task_name == name)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(vals: impl IntoIterator<Item = T>) -> usize {
    let mut best = 0;
    let mut best_v = None;
    for (i, v) in vals.into_iter().enumerate() {
        if best_v.is_none_or(|b| v > b) {
            best = i;
            best_v = Some(v);
        }
    }
    best
}

struct Partial {
    cms: Vec<Confusion>,
    nll: Vec<f64>,
}

/// Metrics of `model` over `examples`. Loss is the mean cross-entropy over
/// all non-IGNORE pixels of the set.
pub fn evaluate(model: &Model<f32>, examples: &[Example], split: Split, epoch: u32) -> crate::Result<MetricsRecord> {
    let tasks = &model.spec.tasks;
    let parts = examples
        .par_iter()
        .map(|ex| -> crate::Result<Partial> {
            let trace = model.forward(&ex.image)?;
            let mut cms: Vec<Confusion> = tasks.iter().map(|t| Confusion::new(t.class_count)).collect();
            let mut nll = vec![0.0; tasks.len()];
            for (t, lg) in trace.logits.iter().enumerate() {
                let n = lg.plane_len();
                for (p, &y) in ex.labels[t].iter().enumerate() {
                    if y == IGNORE {
                        continue;
                    }
                    let z: Vec<f64> = (0..lg.c).map(|c| lg.data[c * n + p] as f64).collect();
                    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
                    nll[t] += lse - z[y as usize];
                    cms[t].add(y as usize, argmax((0..lg.c).map(|c| lg.data[c * n + p])));
                }
            }
            Ok(Partial { cms, nll })
        })
        .collect::<crate::Result<Vec<_>>>()?;

    let mut out = Vec::with_capacity(tasks.len());
    for (t, spec) in tasks.iter().enumerate() {
        let mut cm = Confusion::new(spec.class_count);
        let mut nll = 0.0;
        // sequential merge keeps the float sum order fixed
        for p in &parts {
            cm.merge(&p.cms[t]);
            nll += p.nll[t];
        }
        let n = cm.total();
        let loss = if n == 0 { 0.0 } else { nll / n as f64 };
        out.push(TaskMetrics::from_confusion(&spec.task_name, &cm, loss));
    }
    Ok(MetricsRecord { split, epoch, tasks: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Lcg64;
    use proptest::prelude::*;

    fn confusion_from(truth: &[u8], pred: &[u8], classes: usize) -> Confusion {
        let mut cm = Confusion::new(classes);
        for (t, p) in truth.iter().zip(pred) {
            if *t != IGNORE {
                cm.add(*t as usize, *p as usize);
            }
        }
        cm
    }

    #[test]
    fn perfect_prediction() {
        let truth: Vec<u8> = (0..64).map(|i| (i % 3) as u8).collect();
        let m = TaskMetrics::from_confusion("a", &confusion_from(&truth, &truth, 3), 0.0);
        assert_eq!((m.accuracy, m.precision, m.recall, m.f1, m.fiou), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert!(m.iou.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn disjoint_foreground() {
        let truth = [1u8, 1, 0, 0];
        let pred = [0u8, 0, 1, 1];
        let m = TaskMetrics::from_confusion("a", &confusion_from(&truth, &pred, 2), 0.0);
        assert_eq!(m.iou[1], 0.0);
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn fixture_fifty_twentyfive_twentyfive() {
        let mut truth = Vec::new();
        let mut pred = Vec::new();
        for (t, p, n) in [(1u8, 1u8, 50), (0, 1, 25), (1, 0, 25), (0, 0, 100)] {
            truth.extend(std::iter::repeat_n(t, n));
            pred.extend(std::iter::repeat_n(p, n));
        }
        // brute-force count
        let tp = truth.iter().zip(&pred).filter(|(t, p)| **t == 1 && **p == 1).count();
        let fp = truth.iter().zip(&pred).filter(|(t, p)| **t == 0 && **p == 1).count();
        let fn_ = truth.iter().zip(&pred).filter(|(t, p)| **t == 1 && **p == 0).count();
        assert_eq!((tp, fp, fn_), (50, 25, 25));
        let m = TaskMetrics::from_confusion("a", &confusion_from(&truth, &pred, 2), 0.0);
        assert!((m.iou[1] - 0.5).abs() < 1e-12);
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn argmax_ties_low() {
        assert_eq!(argmax([0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax([0.1, 0.7, 0.7]), 1);
    }

    #[test]
    fn absent_class_iou_is_one() {
        let m = TaskMetrics::from_confusion("a", &confusion_from(&[0, 0], &[0, 0], 3), 0.0);
        assert_eq!(m.iou, vec![1.0, 1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn matches_bruteforce(seed in any::<u64>(), classes in 2usize..5, n in 1usize..200) {
            let mut rng = Lcg64::new(seed);
            let truth: Vec<u8> = (0..n).map(|_| if rng.below(6) == 0 { IGNORE } else { rng.below(classes) as u8 }).collect();
            let pred: Vec<u8> = (0..n).map(|_| rng.below(classes) as u8).collect();
            let m = TaskMetrics::from_confusion("a", &confusion_from(&truth, &pred, classes), 0.0);
            let valid: Vec<(u8, u8)> = truth.iter().zip(&pred).filter(|(t, _)| **t != IGNORE).map(|(t, p)| (*t, *p)).collect();
            let cnt = |f: &dyn Fn(u8, u8) -> bool| valid.iter().filter(|(t, p)| f(*t, *p)).count() as u64;
            let r = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
            let mut fiou = 0.0;
            let mut ps = Vec::new();
            let mut rs = Vec::new();
            for c in 0..classes as u8 {
                let tp = cnt(&|t, p| t == c && p == c);
                let fp = cnt(&|t, p| t != c && p == c);
                let fn_ = cnt(&|t, p| t == c && p != c);
                let iou = r(tp, tp + fp + fn_);
                prop_assert_eq!(m.iou[c as usize], iou);
                if !valid.is_empty() {
                    fiou += cnt(&|t, _| t == c) as f64 / valid.len() as f64 * iou;
                }
                if c >= 1 {
                    ps.push(r(tp, tp + fp));
                    rs.push(r(tp, tp + fn_));
                }
            }
            if valid.is_empty() { fiou = 1.0; }
            prop_assert!((m.fiou - fiou).abs() < 1e-12);
            prop_assert_eq!(m.accuracy, r(cnt(&|t, p| t == p), valid.len() as u64));
            prop_assert!((m.precision - ps.iter().sum::<f64>() / ps.len() as f64).abs() < 1e-12);
            prop_assert!((m.recall - rs.iter().sum::<f64>() / rs.len() as f64).abs() < 1e-12);
            for v in [m.accuracy, m.precision, m.recall, m.f1, m.fiou] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
