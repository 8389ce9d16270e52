//! NICE segmentation metrics, aggregation, cross-dataset grids and CDF reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::detection::Box;
use crate::error::{Error, Result};
use crate::image::Mask;

/// Pixel counts with iris as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    if (pred.width, pred.height) != (gt.width, gt.height) {
        return Err(Error::Dimension(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.width, pred.height, gt.width, gt.height
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn precision(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

pub fn recall(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn f1(c: &ConfusionCounts) -> f64 {
    let (p, r) = (precision(c), recall(c));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Fraction of pixels that disagree with the ground truth.
pub fn e1(c: &ConfusionCounts) -> f64 {
    ratio(c.fp + c.fn_, c.total())
}

pub fn e1_masks(pred: &Mask, gt: &Mask) -> Result<f64> {
    Ok(e1(&confusion(pred, gt)?))
}

/// Metrics of one evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub image: String,
    pub subject_id: String,
    pub dataset_tag: String,
    pub width: usize,
    pub height: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub e1: f64,
}

impl ImageScore {
    pub fn from_counts(image: &str, subject_id: &str, dataset_tag: &str, width: usize, height: usize, c: &ConfusionCounts) -> Self {
        Self {
            image: image.to_string(),
            subject_id: subject_id.to_string(),
            dataset_tag: dataset_tag.to_string(),
            width,
            height,
            precision: precision(c),
            recall: recall(c),
            f1: f1(c),
            e1: e1(c),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupBy {
    Image,
    Subject,
    Dataset,
    All,
}

impl std::str::FromStr for GroupBy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(GroupBy::Image),
            "subject" => Ok(GroupBy::Subject),
            "dataset" => Ok(GroupBy::Dataset),
            "all" => Ok(GroupBy::All),
            _ => Err(Error::Config(format!("unknown grouping `{s}`"))),
        }
    }
}

/// Population mean and variance.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub variance: f64,
}

pub fn moments(values: &[f64]) -> Moments {
    if values.is_empty() {
        return Moments::default();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Moments { mean, variance }
}

/// E1 summary of a group: pooled when every image shares one resolution,
/// otherwise one entry per resolution.
#[derive(Clone, Debug, PartialEq)]
pub enum E1Summary {
    Pooled(Moments),
    PerResolution(Vec<((usize, usize), Moments)>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub key: String,
    pub count: usize,
    pub precision: Moments,
    pub recall: Moments,
    pub f1: Moments,
    pub e1: E1Summary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub group_by: GroupBy,
    pub images: Vec<ImageScore>,
    pub groups: Vec<GroupStats>,
}

fn group_key(s: &ImageScore, by: GroupBy) -> String {
    match by {
        GroupBy::Image => s.image.clone(),
        GroupBy::Subject => s.subject_id.clone(),
        GroupBy::Dataset => s.dataset_tag.clone(),
        GroupBy::All => "all".to_string(),
    }
}

/// Per-group mean and population variance of every metric; groups are
/// ordered by key.
pub fn aggregate(scores: &[ImageScore], group_by: GroupBy) -> Result<MetricReport> {
    if scores.is_empty() {
        return Err(Error::Invalid("nothing to aggregate".into()));
    }
    let mut groups: BTreeMap<String, Vec<&ImageScore>> = BTreeMap::new();
    for s in scores {
        groups.entry(group_key(s, group_by)).or_default().push(s);
    }
    let stats = groups
        .into_iter()
        .map(|(key, members)| {
            let col = |f: fn(&ImageScore) -> f64| moments(&members.iter().map(|s| f(s)).collect::<Vec<_>>());
            let mut by_res: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
            for s in &members {
                by_res.entry((s.width, s.height)).or_default().push(s.e1);
            }
            let e1 = if by_res.len() == 1 {
                E1Summary::Pooled(col(|s| s.e1))
            } else {
                E1Summary::PerResolution(by_res.into_iter().map(|(r, v)| (r, moments(&v))).collect())
            };
            GroupStats {
                key,
                count: members.len(),
                precision: col(|s| s.precision),
                recall: col(|s| s.recall),
                f1: col(|s| s.f1),
                e1,
            }
        })
        .collect();
    Ok(MetricReport {
        group_by,
        images: scores.to_vec(),
        groups: stats,
    })
}

fn cell(m: &Moments) -> String {
    format!("{:.4} {:.6}", m.mean, m.variance)
}

impl MetricReport {
    /// Tab-separated table, one row per group, cells `mean variance`.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("group\tcount\tprecision\trecall\tf1\te1\n");
        for g in &self.groups {
            let e1 = match &g.e1 {
                E1Summary::Pooled(m) => cell(m),
                E1Summary::PerResolution(v) => v
                    .iter()
                    .map(|((w, h), m)| format!("{w}x{h}:{}", cell(m)))
                    .collect::<Vec<_>>()
                    .join(";"),
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{e1}",
                g.key,
                g.count,
                cell(&g.precision),
                cell(&g.recall),
                cell(&g.f1)
            );
        }
        out
    }
}

/// F1 mean and variance of every (model, dataset) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub models: Vec<String>,
    pub datasets: Vec<String>,
    /// `cells[d][m]`: model `m` tested on dataset `d`.
    pub cells: Vec<Vec<Moments>>,
}

/// Evaluates every model on every dataset with `score`, which returns
/// per-image F1 values. Rows follow `datasets`, columns follow `models`.
pub fn cross_grid<M, D>(
    models: &[(String, M)],
    datasets: &[(String, D)],
    mut score: impl FnMut(&M, &D) -> Result<Vec<f64>>,
) -> Result<Grid> {
    let mut cells = Vec::with_capacity(datasets.len());
    for (_, d) in datasets {
        let mut row = Vec::with_capacity(models.len());
        for (_, m) in models {
            row.push(moments(&score(m, d)?));
        }
        cells.push(row);
    }
    Ok(Grid {
        models: models.iter().map(|m| m.0.clone()).collect(),
        datasets: datasets.iter().map(|d| d.0.clone()).collect(),
        cells,
    })
}

impl Grid {
    /// Rows are test datasets, columns are training sets.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("test\\train");
        for m in &self.models {
            out.push('\t');
            out.push_str(m);
        }
        out.push('\n');
        for (d, row) in self.datasets.iter().zip(&self.cells) {
            out.push_str(d);
            for c in row {
                out.push('\t');
                out.push_str(&cell(c));
            }
            out.push('\n');
        }
        out
    }
}

/// Ascending scores with their cumulative fraction `rank / n`.
pub fn cdf_report(scores: &[f64]) -> Result<Vec<(f64, f64)>> {
    if scores.is_empty() {
        return Err(Error::Invalid("CDF of an empty score list".into()));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    Ok(s.into_iter().enumerate().map(|(i, v)| (v, (i + 1) as f64 / n)).collect())
}

pub fn cdf_tsv(cdf: &[(f64, f64)]) -> String {
    let mut out = String::from("score\tcumulative\n");
    for (v, c) in cdf {
        let _ = writeln!(out, "{v:.6}\t{c:.6}");
    }
    out
}

/// Nearest-rank percentile: the smallest score with at least `p` percent of
/// the scores at or below it.
pub fn percentile(scores: &[f64], p: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Invalid("percentile of an empty score list".into()));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * s.len() as f64).ceil().max(1.0) as usize;
    Ok(s[rank.min(s.len()) - 1])
}

pub const WORST_PERCENTILE: f64 = 5.0;
pub const BEST_PERCENTILE: f64 = 90.0;

/// Indices of the worst (at or below the 5th percentile) and best (at or
/// above the 90th percentile) scores. An index never lands in both; ties
/// across both cut-offs count as best.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cases {
    pub worst: Vec<usize>,
    pub best: Vec<usize>,
}

pub fn select_cases(scores: &[f64]) -> Result<Cases> {
    let lo = percentile(scores, WORST_PERCENTILE)?;
    let hi = percentile(scores, BEST_PERCENTILE)?;
    let best: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] >= hi).collect();
    let worst = (0..scores.len()).filter(|&i| scores[i] <= lo && scores[i] < hi).collect();
    Ok(Cases { worst, best })
}

pub const RESULTS_HEADER: &str =
    "image_path\tsubject_id\tdataset_tag\twidth\theight\tx1\ty1\tx2\ty2\tscore\tprecision\trecall\tf1\te1\tmask_path";

/// One line of an inference results file. `scores` is absent when the image
/// had no ground truth; `bbox` is absent when nothing was detected.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub image_path: String,
    pub subject_id: String,
    pub dataset_tag: String,
    pub width: usize,
    pub height: usize,
    pub bbox: Option<Box>,
    pub score: f64,
    pub scores: Option<ImageScore>,
    pub mask_path: String,
}

impl ResultRow {
    pub fn to_line(&self) -> String {
        let b = match &self.bbox {
            Some(b) => format!("{:.3}\t{:.3}\t{:.3}\t{:.3}", b.x1, b.y1, b.x2, b.y2),
            None => "-\t-\t-\t-".to_string(),
        };
        let m = match &self.scores {
            Some(s) => format!("{:.6}\t{:.6}\t{:.6}\t{:.6}", s.precision, s.recall, s.f1, s.e1),
            None => "-\t-\t-\t-".to_string(),
        };
        format!(
            "{}\t{}\t{}\t{}\t{}\t{b}\t{:.6}\t{m}\t{}",
            self.image_path, self.subject_id, self.dataset_tag, self.width, self.height, self.score, self.mask_path
        )
    }
}

/// Header plus rows sorted by image path.
pub fn results_tsv(rows: &[ResultRow]) -> String {
    let mut sorted: Vec<&ResultRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    let mut out = format!("{RESULTS_HEADER}\n");
    for r in sorted {
        out.push_str(&r.to_line());
        out.push('\n');
    }
    out
}

pub fn parse_results(text: &str, source: &Path) -> Result<Vec<ResultRow>> {
    let err = |line: usize, detail: String| Error::Results {
        path: source.to_path_buf(),
        line,
        detail,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == RESULTS_HEADER => {}
        _ => return Err(err(1, "missing results header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 15 {
            return Err(err(n, format!("expected 15 fields, found {}", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| err(n, format!("bad integer `{s}`")));
        let real = |s: &str| match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(err(n, format!("bad number `{s}`"))),
        };
        let opt = |s: &[&str]| -> Result<Option<[f64; 4]>> {
            if s.iter().all(|v| *v == "-") {
                return Ok(None);
            }
            Ok(Some([real(s[0])?, real(s[1])?, real(s[2])?, real(s[3])?]))
        };
        let (width, height) = (int(f[3])?, int(f[4])?);
        let bbox = match opt(&f[5..9])? {
            Some([x1, y1, x2, y2]) => Some(Box::new(x1, y1, x2, y2).map_err(|e| err(n, e.to_string()))?),
            None => None,
        };
        let scores = opt(&f[10..14])?.map(|[precision, recall, f1, e1]| ImageScore {
            image: f[0].to_string(),
            subject_id: f[1].to_string(),
            dataset_tag: f[2].to_string(),
            width,
            height,
            precision,
            recall,
            f1,
            e1,
        });
        rows.push(ResultRow {
            image_path: f[0].to_string(),
            subject_id: f[1].to_string(),
            dataset_tag: f[2].to_string(),
            width,
            height,
            bbox,
            score: real(f[9])?,
            scores,
            mask_path: f[14].to_string(),
        });
    }
    Ok(rows)
}
