//! Panoptic quality, semantic IoU and instance average precision.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::maps::{ClassSet, Mask, PanopticMap, SemanticMap, UNKNOWN};

/// `|a ∩ b| / |a ∪ b|` for sorted pixel index lists; 0 when both are empty.
pub fn iou(a: &[usize], b: &[usize]) -> f64 {
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let (pa, pb): (Vec<usize>, Vec<usize>) = (a.indices().collect(), b.indices().collect());
    iou(&pa, &pb)
}

/// Matches of one class: `(pred instance, gt instance, IoU)` pairs and the
/// unmatched instance ids on either side.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassMatch {
    pub tp: Vec<(u16, u16, f64)>,
    pub fp: Vec<u16>,
    pub missed: Vec<u16>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    pub classes: BTreeMap<u16, ClassMatch>,
}

/// Pairs same-class segments whose IoU exceeds one half. At most one such
/// partner can exist per segment, so the pairing is unique.
pub fn panoptic_match(pred: &PanopticMap, gt: &PanopticMap) -> Result<MatchResult> {
    if pred.dims() != gt.dims() {
        return Err(Error::usage(format!("prediction {:?} and ground truth {:?} differ in size", pred.dims(), gt.dims())));
    }
    let (ps, gs) = (pred.segments(), gt.segments());
    let mut inter: HashMap<((u16, u16), (u16, u16)), usize> = HashMap::new();
    let planes = pred.class.data().iter().zip(pred.instance.data()).zip(gt.class.data().iter().zip(gt.instance.data()));
    for ((&pc, &pi), (&gc, &gi)) in planes {
        if pc != UNKNOWN && pc == gc {
            *inter.entry(((pc, pi), (gc, gi))).or_default() += 1;
        }
    }
    let mut out = MatchResult::default();
    let mut matched_p = std::collections::BTreeSet::new();
    let mut matched_g = std::collections::BTreeSet::new();
    let mut pairs: Vec<_> = inter.into_iter().collect();
    pairs.sort_unstable_by_key(|p| p.0);
    for ((pk, gk), n) in pairs {
        let union = ps[&pk].len() + gs[&gk].len() - n;
        let v = n as f64 / union as f64;
        if v > 0.5 {
            out.classes.entry(pk.0).or_default().tp.push((pk.1, gk.1, v));
            matched_p.insert(pk);
            matched_g.insert(gk);
        }
    }
    for k in ps.keys().filter(|k| !matched_p.contains(*k)) {
        out.classes.entry(k.0).or_default().fp.push(k.1);
    }
    for k in gs.keys().filter(|k| !matched_g.contains(*k)) {
        out.classes.entry(k.0).or_default().missed.push(k.1);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub quality: Quality,
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanopticScore {
    pub per_class: BTreeMap<u16, ClassScore>,
    pub all: Option<Quality>,
    pub things: Option<Quality>,
    pub stuff: Option<Quality>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Tally {
    iou_sum: f64,
    tp: usize,
    fp: usize,
    missed: usize,
}

/// Dataset-level PQ: matches from every frame are pooled per class before
/// computing SQ and RQ.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PanopticAccumulator {
    tallies: BTreeMap<u16, Tally>,
}

fn average(qs: &[Quality]) -> Option<Quality> {
    if qs.is_empty() {
        return None;
    }
    let n = qs.len() as f64;
    Some(Quality {
        pq: qs.iter().map(|q| q.pq).sum::<f64>() / n,
        sq: qs.iter().map(|q| q.sq).sum::<f64>() / n,
        rq: qs.iter().map(|q| q.rq).sum::<f64>() / n,
    })
}

impl PanopticAccumulator {
    pub fn add(&mut self, m: &MatchResult) {
        for (&c, cm) in &m.classes {
            let t = self.tallies.entry(c).or_default();
            t.iou_sum += cm.tp.iter().map(|p| p.2).sum::<f64>();
            t.tp += cm.tp.len();
            t.fp += cm.fp.len();
            t.missed += cm.missed.len();
        }
    }

    /// Per-class scores and class averages; classes with no segment on
    /// either side are left out of every average.
    pub fn score(&self, classes: &ClassSet) -> PanopticScore {
        let mut per_class = BTreeMap::new();
        for (&c, t) in &self.tallies {
            if t.tp + t.fp + t.missed == 0 {
                continue;
            }
            let sq = if t.tp > 0 { t.iou_sum / t.tp as f64 } else { 0.0 };
            let denom = t.tp as f64 + 0.5 * t.fp as f64 + 0.5 * t.missed as f64;
            let rq = if denom > 0.0 { t.tp as f64 / denom } else { 0.0 };
            per_class.insert(
                c,
                ClassScore {
                    quality: Quality { pq: sq * rq, sq, rq },
                    tp: t.tp,
                    fp: t.fp,
                    missed: t.missed,
                },
            );
        }
        let pick = |f: &dyn Fn(u16) -> bool| -> Vec<Quality> {
            per_class.iter().filter(|(c, _)| f(**c)).map(|(_, s)| s.quality).collect()
        };
        PanopticScore {
            all: average(&pick(&|_| true)),
            things: average(&pick(&|c| classes.is_thing(c))),
            stuff: average(&pick(&|c| !classes.is_thing(c))),
            per_class,
        }
    }
}

pub fn panoptic_quality(m: &MatchResult, classes: &ClassSet) -> PanopticScore {
    let mut acc = PanopticAccumulator::default();
    acc.add(m);
    acc.score(classes)
}

/// Pixel intersection and union counts per class, pooled over frames.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MiouAccumulator {
    counts: BTreeMap<u16, (usize, usize)>,
}

impl MiouAccumulator {
    pub fn add(&mut self, pred: &SemanticMap, gt: &SemanticMap) -> Result<()> {
        if !pred.same_dims(gt) {
            return Err(Error::usage("semantic maps differ in size"));
        }
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if p == g {
                if p != UNKNOWN {
                    let e = self.counts.entry(p).or_default();
                    e.0 += 1;
                    e.1 += 1;
                }
            } else {
                for c in [p, g] {
                    if c != UNKNOWN {
                        self.counts.entry(c).or_default().1 += 1;
                    }
                }
            }
        }
        Ok(())
    }

    /// Mean IoU over the classes of `subset` that occur on either side;
    /// `None` when none occurs.
    pub fn miou(&self, subset: &[u16]) -> Option<f64> {
        let ious: Vec<f64> = subset
            .iter()
            .filter_map(|c| self.counts.get(c))
            .filter(|(_, u)| *u > 0)
            .map(|&(i, u)| i as f64 / u as f64)
            .collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

pub fn miou(pred: &SemanticMap, gt: &SemanticMap, subset: &[u16]) -> Result<Option<f64>> {
    let mut acc = MiouAccumulator::default();
    acc.add(pred, gt)?;
    Ok(acc.miou(subset))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub class: u16,
    /// Sorted pixel indices.
    pub pixels: Vec<usize>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtInstance {
    pub class: u16,
    pub pixels: Vec<usize>,
}

/// `0.50, 0.55, …, 0.95`.
pub fn default_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// Area under the precision envelope for detections sorted by confidence.
fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut prec = Vec::with_capacity(hits.len());
    let mut rec = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        prec.push(tp as f64 / (i + 1) as f64);
        rec.push(tp as f64 / num_gt as f64);
    }
    for i in (0..prec.len().saturating_sub(1)).rev() {
        prec[i] = prec[i].max(prec[i + 1]);
    }
    let mut ap = 0.0;
    let mut last = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - last) * p;
        last = *r;
    }
    ap
}

/// Instance AP over a set of frames: detections are matched per frame and
/// ranked by confidence over the whole set.
#[derive(Debug, Clone, PartialEq)]
pub struct ApAccumulator {
    thresholds: Vec<f64>,
    /// `(class, threshold index) → (confidence, order, hit)`.
    records: BTreeMap<(u16, usize), Vec<(f64, usize, bool)>>,
    gt: BTreeMap<u16, usize>,
    seen: usize,
}

impl ApAccumulator {
    pub fn new(thresholds: &[f64]) -> Self {
        let mut t = thresholds.to_vec();
        if !t.iter().any(|v| (v - 0.5).abs() < 1e-12) {
            t.push(0.5);
        }
        ApAccumulator {
            thresholds: t,
            records: BTreeMap::new(),
            gt: BTreeMap::new(),
            seen: thresholds.len(),
        }
    }

    pub fn add(&mut self, preds: &[ScoredInstance], gts: &[GtInstance]) {
        for g in gts {
            *self.gt.entry(g.class).or_default() += 1;
        }
        let mut order: Vec<usize> = (0..preds.len()).collect();
        order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence));
        let counter = self.records.values().map(Vec::len).sum::<usize>();
        for (ti, &tau) in self.thresholds.iter().enumerate() {
            let mut used = vec![false; gts.len()];
            for (rank, &p) in order.iter().enumerate() {
                let pred = &preds[p];
                let best = gts
                    .iter()
                    .enumerate()
                    .filter(|(j, g)| !used[*j] && g.class == pred.class)
                    .map(|(j, g)| (j, iou(&pred.pixels, &g.pixels)))
                    .filter(|(_, v)| *v >= tau)
                    .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
                if let Some((j, _)) = best {
                    used[j] = true;
                }
                self.records
                    .entry((pred.class, ti))
                    .or_default()
                    .push((pred.confidence, counter + rank, best.is_some()));
            }
        }
    }

    fn class_ap(&self, class: u16, ti: usize) -> f64 {
        let mut recs = self.records.get(&(class, ti)).cloned().unwrap_or_default();
        recs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let hits: Vec<bool> = recs.iter().map(|r| r.2).collect();
        average_precision(&hits, self.gt[&class])
    }

    /// `(AP, AP50)` averaged over classes that have ground truth; `None`
    /// when no class does.
    pub fn result(&self) -> Option<(f64, f64)> {
        let classes: Vec<u16> = self.gt.iter().filter(|(_, n)| **n > 0).map(|(c, _)| *c).collect();
        if classes.is_empty() || self.seen == 0 {
            return None;
        }
        let half = self.thresholds.iter().position(|v| (v - 0.5).abs() < 1e-12).expect("added in new");
        let n = classes.len() as f64;
        let ap = classes
            .iter()
            .map(|&c| (0..self.seen).map(|t| self.class_ap(c, t)).sum::<f64>() / self.seen as f64)
            .sum::<f64>()
            / n;
        let ap50 = classes.iter().map(|&c| self.class_ap(c, half)).sum::<f64>() / n;
        Some((ap, ap50))
    }
}

pub fn instance_ap(preds: &[ScoredInstance], gts: &[GtInstance], thresholds: &[f64]) -> Option<(f64, f64)> {
    let mut acc = ApAccumulator::new(thresholds);
    acc.add(preds, gts);
    acc.result()
}

/// Thing segments of a panoptic map with the given confidence per id.
pub fn scored_instances(map: &PanopticMap, classes: &ClassSet, confidence: &[(u16, f64)]) -> Vec<ScoredInstance> {
    let conf: BTreeMap<u16, f64> = confidence.iter().copied().collect();
    map.segments()
        .into_iter()
        .filter(|((c, i), _)| *i > 0 && classes.is_thing(*c))
        .map(|((c, i), pixels)| ScoredInstance {
            class: c,
            pixels,
            confidence: conf.get(&i).copied().unwrap_or(1.0),
        })
        .collect()
}

pub fn gt_instances(map: &PanopticMap, classes: &ClassSet) -> Vec<GtInstance> {
    map.segments()
        .into_iter()
        .filter(|((c, i), _)| *i > 0 && classes.is_thing(*c))
        .map(|((c, _), pixels)| GtInstance { class: c, pixels })
        .collect()
}

/// Every metric over a set of frames.
#[derive(Debug, Clone)]
pub struct Evaluator {
    pub classes: ClassSet,
    pq: PanopticAccumulator,
    sem: MiouAccumulator,
    ap: ApAccumulator,
}

impl Evaluator {
    pub fn new(classes: ClassSet) -> Self {
        Evaluator {
            classes,
            pq: PanopticAccumulator::default(),
            sem: MiouAccumulator::default(),
            ap: ApAccumulator::new(&default_thresholds()),
        }
    }

    pub fn add(&mut self, pred: &PanopticMap, confidence: &[(u16, f64)], gt: &PanopticMap) -> Result<()> {
        self.pq.add(&panoptic_match(pred, gt)?);
        self.sem.add(&pred.class, &gt.class)?;
        self.ap.add(
            &scored_instances(pred, &self.classes, confidence),
            &gt_instances(gt, &self.classes),
        );
        Ok(())
    }

    pub fn report(&self) -> Report {
        let n = self.classes.len() as u16;
        let all: Vec<u16> = (0..n).collect();
        let things: Vec<u16> = (0..n).filter(|&c| self.classes.is_thing(c)).collect();
        let (ap, ap50) = self.ap.result().unzip();
        Report::new(&self.pq.score(&self.classes), &self.classes, self.sem.miou(&all), self.sem.miou(&things), ap, ap50)
    }
}

pub const TABLE_PRECISION: usize = 4;

/// Flat ordered metric list: summary keys first, then `pq.<class>`,
/// `sq.<class>` and `rq.<class>` per scored class. Absent values are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub entries: Vec<(String, Option<f64>)>,
}

const SUMMARY: [&str; 13] = [
    "pq_all", "sq_all", "rq_all", "pq_things", "sq_things", "rq_things", "pq_stuff", "sq_stuff", "rq_stuff", "miou",
    "mo_iou", "ap", "ap50",
];

impl Report {
    pub fn new(
        score: &PanopticScore,
        classes: &ClassSet,
        miou: Option<f64>,
        mo_iou: Option<f64>,
        ap: Option<f64>,
        ap50: Option<f64>,
    ) -> Self {
        let mut entries = Vec::new();
        for q in [score.all, score.things, score.stuff] {
            entries.push(q.map(|q| q.pq));
            entries.push(q.map(|q| q.sq));
            entries.push(q.map(|q| q.rq));
        }
        entries.extend([miou, mo_iou, ap, ap50]);
        let mut entries: Vec<(String, Option<f64>)> = SUMMARY.iter().map(|k| k.to_string()).zip(entries).collect();
        for (&c, s) in &score.per_class {
            let name = classes.name(c).split_whitespace().collect::<Vec<_>>().join("_");
            entries.push((format!("pq.{name}"), Some(s.quality.pq)));
            entries.push((format!("sq.{name}"), Some(s.quality.sq)));
            entries.push((format!("rq.{name}"), Some(s.quality.rq)));
        }
        Report { entries }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.iter().find(|(k, _)| k == key).and_then(|(_, v)| *v)
    }

    /// Values rounded to the table's displayed precision.
    pub fn rounded(&self) -> Report {
        let round = |x: f64| format!("{x:.TABLE_PRECISION$}").parse::<f64>().expect("formatted float parses");
        Report {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.map(round))).collect(),
        }
    }

    /// Summary block followed by a class × PQ/SQ/RQ table.
    pub fn render_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.TABLE_PRECISION$}"));
        let summary: Vec<&(String, Option<f64>)> = self.entries.iter().filter(|(k, _)| !k.contains('.')).collect();
        let mut rows: Vec<(String, [Option<f64>; 3])> = Vec::new();
        for (k, v) in &self.entries {
            if let Some((metric, class)) = k.split_once('.') {
                let slot = ["pq", "sq", "rq"].iter().position(|m| *m == metric).unwrap_or(0);
                match rows.iter_mut().find(|r| r.0 == class) {
                    Some(r) => r.1[slot] = *v,
                    None => {
                        let mut vals = [None; 3];
                        vals[slot] = *v;
                        rows.push((class.to_string(), vals));
                    }
                }
            }
        }
        let kw = summary.iter().map(|e| e.0.len()).chain(rows.iter().map(|r| r.0.len())).chain([6]).max().unwrap_or(6);
        let mut s = format!("{:<kw$}  {:>9}\n", "metric", "value");
        for (k, v) in summary {
            s.push_str(&format!("{k:<kw$}  {:>9}\n", fmt(*v)));
        }
        s.push('\n');
        s.push_str(&format!("{:<kw$}  {:>9}  {:>9}  {:>9}\n", "class", "PQ", "SQ", "RQ"));
        for (c, v) in rows {
            s.push_str(&format!("{c:<kw$}  {:>9}  {:>9}  {:>9}\n", fmt(v[0]), fmt(v[1]), fmt(v[2])));
        }
        s
    }

    /// Inverse of [`Report::render_table`] at displayed precision.
    pub fn parse_table(text: &str) -> Result<Report> {
        let value = |tok: &str| -> Result<Option<f64>> {
            if tok == "-" {
                Ok(None)
            } else {
                tok.parse::<f64>().map(Some).map_err(|_| Error::Input(format!("bad table value {tok:?}")))
            }
        };
        let mut entries = Vec::new();
        let mut in_classes = false;
        for line in text.lines() {
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.as_slice() {
                [] => {}
                ["metric", "value"] => in_classes = false,
                ["class", "PQ", "SQ", "RQ"] => in_classes = true,
                [k, v] if !in_classes => entries.push((k.to_string(), value(v)?)),
                [c, pq, sq, rq] if in_classes => {
                    for (m, v) in [("pq", pq), ("sq", sq), ("rq", rq)] {
                        entries.push((format!("{m}.{c}"), value(v)?));
                    }
                }
                _ => return Err(Error::Input(format!("unrecognised table line {line:?}"))),
            }
        }
        Ok(Report { entries })
    }
}
