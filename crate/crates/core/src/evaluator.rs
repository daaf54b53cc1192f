//! Full-catalog ranking metrics, the component ablation runner and the
//! behavior-masking study.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::dataio::{EvalCase, Splits};
use crate::hba::IntensitySplit;
use crate::model::{Model, ModelConfig, Vocab};
use crate::numerics::Real;
use crate::schema::{BehaviorSchema, UserSequence};
use crate::trainer::{train, EpochLog, TrainConfig};
use crate::{Error, Result};

pub const DEFAULT_CUTOFFS: [usize; 2] = [10, 50];

/// `1 + #{higher score} + #{equal score with lower id}`.
pub fn rank_of<T: Real>(scores: &[T], target: usize) -> usize {
    let s = scores[target];
    1 + scores.iter().enumerate().filter(|&(v, &x)| x > s || (x == s && v < target)).count()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub users: usize,
    /// `(K, HR@K)` in cutoff order.
    pub hr: Vec<(usize, f64)>,
    pub ndcg: Vec<(usize, f64)>,
    pub mrr: f64,
}

impl Metrics {
    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.hr.iter().find(|e| e.0 == k).map(|e| e.1)
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ndcg.iter().find(|e| e.0 == k).map(|e| e.1)
    }

    /// `(name, value)` pairs: every HR@K, every NDCG@K, then MRR.
    pub fn named(&self) -> Vec<(String, f64)> {
        let mut out: Vec<(String, f64)> = self.hr.iter().map(|(k, v)| (format!("HR@{k}"), *v)).collect();
        out.extend(self.ndcg.iter().map(|(k, v)| (format!("NDCG@{k}"), *v)));
        out.push(("MRR".into(), self.mrr));
        out
    }
}

/// Means of hit, discounted gain and reciprocal rank over `ranks` (1-based).
pub fn compute_metrics(ranks: &[usize], cutoffs: &[usize]) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::EmptyRanks);
    }
    let n = ranks.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n;
    let hr = cutoffs.iter().map(|&k| (k, mean(&|r| if r <= k { 1.0 } else { 0.0 }))).collect();
    let ndcg = cutoffs.iter().map(|&k| (k, mean(&|r| if r <= k { 1.0 / ((r + 1) as f64).log2() } else { 0.0 }))).collect();
    Ok(Metrics { users: ranks.len(), hr, ndcg, mrr: mean(&|r| 1.0 / r as f64) })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub overall: Metrics,
    /// Behaviors of the held-out targets, in schema order; absent ones skipped.
    pub per_behavior: Vec<(String, Metrics)>,
}

/// Rank of each case's target item among all items.
pub fn rank_full_catalog<T: Real>(model: &Model<T>, cases: &[EvalCase]) -> Result<Vec<usize>> {
    let histories: Vec<&UserSequence> = cases.iter().map(|c| &c.history).collect();
    let scores = model.score_many(&histories)?;
    Ok(scores.iter().zip(cases).map(|((s, _), c)| rank_of(s, c.target.item)).collect())
}

pub fn evaluate<T: Real>(model: &Model<T>, schema: &BehaviorSchema, cases: &[EvalCase], cutoffs: &[usize]) -> Result<EvalReport> {
    let ranks = rank_full_catalog(model, cases)?;
    let overall = compute_metrics(&ranks, cutoffs)?;
    let mut per_behavior = Vec::new();
    for b in schema.behaviors() {
        let sub: Vec<usize> = ranks.iter().zip(cases).filter(|(_, c)| c.target.behavior == b.id).map(|(&r, _)| r).collect();
        if !sub.is_empty() {
            per_behavior.push((b.name.clone(), compute_metrics(&sub, cutoffs)?));
        }
    }
    Ok(EvalReport { overall, per_behavior })
}

/// Model variants of the component study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Variant {
    Full,
    NoHba,
    NoIntensitySplit,
    PurchaseOnlyHigh,
    NoTre,
    NoBehaviorTransition,
    NoTemporal,
    NoItemConsistency,
    NoContextMatching,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::NoHba,
        Variant::NoIntensitySplit,
        Variant::PurchaseOnlyHigh,
        Variant::NoTre,
        Variant::NoBehaviorTransition,
        Variant::NoTemporal,
        Variant::NoItemConsistency,
        Variant::NoContextMatching,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoHba => "w/o HBA",
            Variant::NoIntensitySplit => "w/o Intensity Split",
            Variant::PurchaseOnlyHigh => "Purchase-Only High",
            Variant::NoTre => "w/o TRE",
            Variant::NoBehaviorTransition => "w/o Global Behavioral Transition",
            Variant::NoTemporal => "w/o Temporal Dynamics",
            Variant::NoItemConsistency => "w/o Item-Level Consistency",
            Variant::NoContextMatching => "w/o Implicit Context Matching",
        }
    }

    /// Command-line spelling.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoHba => "no_hba",
            Variant::NoIntensitySplit => "no_intensity_split",
            Variant::PurchaseOnlyHigh => "purchase_only_high",
            Variant::NoTre => "no_tre",
            Variant::NoBehaviorTransition => "no_transition",
            Variant::NoTemporal => "no_temporal",
            Variant::NoItemConsistency => "no_item_consistency",
            Variant::NoContextMatching => "no_context_matching",
        }
    }

    /// Accepts the display name or the slug.
    pub fn parse(s: &str) -> Result<Variant> {
        let s = s.trim();
        Variant::ALL.into_iter().find(|v| v.name() == s || v.slug() == s).ok_or_else(|| Error::UnknownVariant {
            name: s.to_string(),
            valid: Variant::ALL.iter().map(|v| v.slug()).collect::<Vec<_>>().join(", "),
        })
    }

    /// `base` with this variant's component removed.
    pub fn apply(self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoHba => c.enable_hba = false,
            Variant::NoIntensitySplit => c.intensity_split = IntensitySplit::Uniform,
            Variant::PurchaseOnlyHigh => c.intensity_split = IntensitySplit::PurchaseOnly,
            Variant::NoTre => c.enable_tre = false,
            Variant::NoBehaviorTransition => c.tre_components.behavior_transition = false,
            Variant::NoTemporal => c.tre_components.temporal = false,
            Variant::NoItemConsistency => c.tre_components.item_consistency = false,
            Variant::NoContextMatching => c.tre_components.context_matching = false,
        }
        c
    }
}

/// Everything a study needs besides the variant or mask.
#[derive(Clone, Debug)]
pub struct Experiment<'a> {
    pub schema: &'a BehaviorSchema,
    pub vocab: Vocab,
    pub splits: &'a Splits,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub init_seed: u64,
    pub cutoffs: Vec<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct StudyCell {
    pub variant: String,
    pub mask: String,
    pub report: EvalReport,
    #[serde(skip)]
    pub log: Vec<EpochLog>,
}

impl Experiment<'_> {
    /// Trains a fresh model of `config` on `train_seqs` and evaluates it on the test cases.
    pub fn fit_and_test(&self, config: ModelConfig, train_seqs: &[UserSequence]) -> Result<(EvalReport, Vec<EpochLog>)> {
        let mut model = Model::<f32>::new(config, self.vocab, self.schema, self.init_seed)?;
        let log = train(&mut model, self.schema, train_seqs, &self.splits.val, &self.train, |_| {})?;
        let report = evaluate(&model, self.schema, &self.splits.test, &self.cutoffs)?;
        Ok((report, log))
    }
}

/// One trained and evaluated model per variant, same data and seeds.
pub fn run_ablation(variants: &[Variant], exp: &Experiment<'_>) -> Result<Vec<StudyCell>> {
    variants
        .iter()
        .map(|&v| {
            let (report, log) = exp.fit_and_test(v.apply(&exp.model), &exp.splits.train)?;
            Ok(StudyCell { variant: v.name().to_string(), mask: "none".into(), report, log })
        })
        .collect()
}

/// Training sequences with every interaction of `behavior` removed; empty ones dropped.
pub fn mask_behavior(sequences: &[UserSequence], behavior: usize) -> Vec<UserSequence> {
    sequences
        .iter()
        .filter_map(|s| {
            let kept: Vec<_> = s.interactions.iter().copied().filter(|i| i.behavior != behavior).collect();
            (!kept.is_empty()).then(|| UserSequence { user: s.user, external_id: s.external_id.clone(), interactions: kept })
        })
        .collect()
}

/// Trains with each behavior in `masks` removed from the training data and
/// evaluates on complete test histories. The first cell is the unmasked run.
pub fn behavior_masking_eval(masks: &[usize], exp: &Experiment<'_>) -> Result<Vec<StudyCell>> {
    let (report, log) = exp.fit_and_test(exp.model.clone(), &exp.splits.train)?;
    let mut out = vec![StudyCell { variant: "full".into(), mask: "none".into(), report, log }];
    for &b in masks {
        if b >= exp.schema.len() {
            return Err(Error::Config(format!("mask behavior id {b} is not in the schema")));
        }
        let name = exp.schema.name(b).to_string();
        let masked = mask_behavior(&exp.splits.train, b);
        assert!(masked.iter().all(|s| s.interactions.iter().all(|i| i.behavior != b)));
        if masked.iter().all(|s| s.len() < 2) {
            return Err(Error::MaskEmptiesData(name));
        }
        let (report, log) = exp.fit_and_test(exp.model.clone(), &masked)?;
        out.push(StudyCell { variant: "full".into(), mask: name, report, log });
    }
    Ok(out)
}

/// One line of the machine-readable report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRecord {
    pub variant: String,
    pub mask: String,
    pub metric: String,
    pub value: f64,
}

/// Long-form records: overall metrics, then `metric[behavior]` breakdowns.
pub fn report_records(cells: &[StudyCell]) -> Vec<ReportRecord> {
    let mut out = Vec::new();
    for c in cells {
        let rec = |metric: String, value: f64| ReportRecord { variant: c.variant.clone(), mask: c.mask.clone(), metric, value };
        out.push(rec("users".into(), c.report.overall.users as f64));
        for (m, v) in c.report.overall.named() {
            out.push(rec(m, v));
        }
        for (b, metrics) in &c.report.per_behavior {
            for (m, v) in metrics.named() {
                out.push(rec(format!("{m}[{b}]"), v));
            }
        }
    }
    out
}

/// Wide tab-separated table of overall metrics, one row per cell.
pub fn format_table(cells: &[StudyCell]) -> String {
    let mut s = String::from("variant\tmask\tusers");
    if let Some(first) = cells.first() {
        for (m, _) in first.report.overall.named() {
            write!(s, "\t{m}").unwrap();
        }
    }
    s.push('\n');
    for c in cells {
        write!(s, "{}\t{}\t{}", c.variant, c.mask, c.report.overall.users).unwrap();
        for (_, v) in c.report.overall.named() {
            write!(s, "\t{v:.6}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Writes `<stem>.tsv` and `<stem>.jsonl` into `dir`.
pub fn write_reports(dir: &Path, stem: &str, cells: &[StudyCell]) -> Result<()> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let tsv = dir.join(format!("{stem}.tsv"));
    std::fs::write(&tsv, format_table(cells)).map_err(io(&tsv))?;
    let mut lines = String::new();
    for r in report_records(cells) {
        lines.push_str(&serde_json::to_string(&r).expect("records serialize"));
        lines.push('\n');
    }
    let jsonl = dir.join(format!("{stem}.jsonl"));
    std::fs::write(&jsonl, lines).map_err(io(&jsonl))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_with_ties_and_extremes() {
        let s = [0.5f32, 0.9, 0.1, 0.9, 0.3];
        assert_eq!(rank_of(&s, 1), 1);
        assert_eq!(rank_of(&s, 3), 2);
        assert_eq!(rank_of(&s, 2), 5);
        assert_eq!(rank_of(&s, 0), 3);
    }

    #[test]
    fn worked_metric_values() {
        let m = compute_metrics(&[1, 1, 1], &[10]).unwrap();
        assert_eq!((m.hr_at(10), m.ndcg_at(10), m.mrr), (Some(1.0), Some(1.0), 1.0));
        let m = compute_metrics(&[4], &[10]).unwrap();
        assert_eq!(m.ndcg_at(10), Some(1.0 / 5f64.log2()));
        assert!((m.ndcg_at(10).unwrap() - 0.43068).abs() < 1e-5);
        assert_eq!(m.mrr, 0.25);
        let m = compute_metrics(&[11], &[10]).unwrap();
        assert_eq!((m.hr_at(10), m.ndcg_at(10), m.mrr), (Some(0.0), Some(0.0), 1.0 / 11.0));
        assert!(matches!(compute_metrics(&[], &[10]), Err(Error::EmptyRanks)));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
            assert_eq!(Variant::parse(v.slug()).unwrap(), v);
        }
        let err = Variant::parse("w/o everything").unwrap_err().to_string();
        assert!(err.contains("no_hba"), "{err}");
    }

    #[test]
    fn variant_configs() {
        let base = ModelConfig::default();
        assert!(!Variant::NoHba.apply(&base).enable_hba);
        assert!(!Variant::NoTre.apply(&base).enable_tre);
        assert_eq!(Variant::PurchaseOnlyHigh.apply(&base).intensity_split, IntensitySplit::PurchaseOnly);
        assert!(!Variant::NoTemporal.apply(&base).tre_components.temporal);
        assert_eq!(Variant::Full.apply(&base), base);
    }
}
