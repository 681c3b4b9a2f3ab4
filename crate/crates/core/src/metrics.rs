//! Comparison scores and verification error rates.
//!
//! Scores follow the higher-is-more-similar convention and a comparison is a
//! match when `score >= threshold`. Scores are kept as `f32` so that the CSV
//! form (nine significant digits) reads back bit-exactly.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("embedding norm {norm} is not within 1e-3 of 1")]
    NotUnit { norm: f64 },
    #[error("embedding lengths differ: {0} vs {1}")]
    Dimension(usize, usize),
    #[error("the {0} score list is empty")]
    Empty(&'static str),
    #[error("no {0} embeddings to compare")]
    EmptySide(&'static str),
    #[error("non-finite score {0}")]
    NonFinite(f32),
    #[error("a DET curve needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("template for label {0} has zero norm")]
    DegenerateTemplate(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("score csv: {0}")]
    Parse(String),
}

const UNIT_TOLERANCE: f64 = 1e-3;

/// Cosine similarity of two (near-)unit vectors.
pub fn comparison_score(a: &[f32], b: &[f32]) -> Result<f32, MetricsError> {
    if a.len() != b.len() {
        return Err(MetricsError::Dimension(a.len(), b.len()));
    }
    let mut norms = [0.0; 2];
    for (n, v) in norms.iter_mut().zip([a, b]) {
        *n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if (*n - 1.0).abs() > UNIT_TOLERANCE || !n.is_finite() {
            return Err(MetricsError::NotUnit { norm: *n });
        }
    }
    // dividing out the residual norms makes identical inputs score exactly 1
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok((dot / (norms[0] * norms[1])).clamp(-1.0, 1.0) as f32)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Match,
    NonMatch,
}

pub fn verify(score: f32, threshold: f64) -> Decision {
    if score as f64 >= threshold {
        Decision::Match
    } else {
        Decision::NonMatch
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledEmbedding {
    pub label: usize,
    pub embedding: Vec<f32>,
}

/// One mean embedding per label, re-normalized, in ascending label order.
pub fn mean_templates(embeddings: &[LabeledEmbedding]) -> Result<Vec<LabeledEmbedding>, MetricsError> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for e in embeddings {
        let (sum, count) = sums.entry(e.label).or_insert_with(|| (vec![0.0; e.embedding.len()], 0));
        if sum.len() != e.embedding.len() {
            return Err(MetricsError::Dimension(sum.len(), e.embedding.len()));
        }
        for (s, &v) in sum.iter_mut().zip(&e.embedding) {
            *s += v as f64;
        }
        *count += 1;
    }
    sums.into_iter()
        .map(|(label, (sum, count))| {
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(MetricsError::DegenerateTemplate(label));
            }
            Ok(LabeledEmbedding { label, embedding: mean.iter().map(|v| (v / norm) as f32).collect() })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub enrolled: usize,
    pub probe: usize,
    pub enrolled_label: usize,
    pub probe_label: usize,
    pub score: f32,
}

impl Comparison {
    pub fn is_genuine(&self) -> bool {
        self.enrolled_label == self.probe_label
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreSet {
    pub genuine: Vec<f32>,
    pub impostor: Vec<f32>,
}

/// Every enrolled × probe comparison, ordered by enrolled index then probe index.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub comparisons: Vec<Comparison>,
}

pub fn score_matrix(enrolled: &[LabeledEmbedding], probes: &[LabeledEmbedding]) -> Result<ScoreMatrix, MetricsError> {
    if enrolled.is_empty() {
        return Err(MetricsError::EmptySide("enrolled"));
    }
    if probes.is_empty() {
        return Err(MetricsError::EmptySide("probe"));
    }
    let rows: Vec<Vec<Comparison>> = enrolled
        .par_iter()
        .enumerate()
        .map(|(i, e)| {
            probes
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    Ok(Comparison {
                        enrolled: i,
                        probe: j,
                        enrolled_label: e.label,
                        probe_label: p.label,
                        score: comparison_score(&e.embedding, &p.embedding)?,
                    })
                })
                .collect()
        })
        .collect::<Result<_, MetricsError>>()?;
    let matrix = ScoreMatrix { comparisons: rows.into_iter().flatten().collect() };
    let genuine = matrix.comparisons.iter().filter(|c| c.is_genuine()).count();
    log::info!("{} comparisons: {genuine} genuine, {} impostor", matrix.comparisons.len(), matrix.comparisons.len() - genuine);
    if genuine == 0 {
        log::warn!("enrolled and probe labels do not overlap");
    }
    Ok(matrix)
}

impl ScoreMatrix {
    pub fn scores(&self) -> ScoreSet {
        let mut set = ScoreSet::default();
        for c in &self.comparisons {
            if c.is_genuine() {
                set.genuine.push(c.score);
            } else {
                set.impostor.push(c.score);
            }
        }
        set
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["enrolled", "probe", "enrolled_label", "probe_label", "kind", "score"])?;
        for c in &self.comparisons {
            w.write_record([
                c.enrolled.to_string(),
                c.probe.to_string(),
                c.enrolled_label.to_string(),
                c.probe_label.to_string(),
                kind(c.is_genuine()).to_string(),
                format_sig9(c.score as f64),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

fn kind(genuine: bool) -> &'static str {
    if genuine {
        "genuine"
    } else {
        "impostor"
    }
}

/// Sorted copies of both lists, rejecting empty or non-finite input.
struct Sorted {
    genuine: Vec<f32>,
    impostor: Vec<f32>,
}

impl Sorted {
    fn new(scores: &ScoreSet) -> Result<Self, MetricsError> {
        if scores.genuine.is_empty() {
            return Err(MetricsError::Empty("genuine"));
        }
        if scores.impostor.is_empty() {
            return Err(MetricsError::Empty("impostor"));
        }
        if let Some(&bad) = scores.genuine.iter().chain(&scores.impostor).find(|s| !s.is_finite()) {
            return Err(MetricsError::NonFinite(bad));
        }
        let mut genuine = scores.genuine.clone();
        let mut impostor = scores.impostor.clone();
        genuine.sort_by(f32::total_cmp);
        impostor.sort_by(f32::total_cmp);
        Ok(Self { genuine, impostor })
    }

    fn rates(&self, t: f64) -> (f64, f64) {
        let impostor_below = self.impostor.partition_point(|&s| (s as f64) < t);
        let genuine_below = self.genuine.partition_point(|&s| (s as f64) < t);
        let fmr = (self.impostor.len() - impostor_below) as f64 / self.impostor.len() as f64;
        let fnmr = genuine_below as f64 / self.genuine.len() as f64;
        (fmr, fnmr)
    }
}

/// `(FMR, FNMR)` at `threshold`.
pub fn fmr_fnmr_at(scores: &ScoreSet, threshold: f64) -> Result<(f64, f64), MetricsError> {
    Ok(Sorted::new(scores)?.rates(threshold))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
}

/// Candidate thresholds: `-inf`, the midpoints between consecutive distinct
/// scores, and `+inf`.
pub fn candidate_thresholds(scores: &ScoreSet) -> Vec<f64> {
    let mut all: Vec<f64> = scores.genuine.iter().chain(&scores.impostor).map(|&s| s as f64).collect();
    all.sort_by(f64::total_cmp);
    all.dedup();
    let mut out = Vec::with_capacity(all.len() + 1);
    out.push(f64::NEG_INFINITY);
    out.extend(all.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    out.push(f64::INFINITY);
    out
}

/// Equal error rate over the candidate sweep; ties go to the lowest threshold.
pub fn compute_eer(scores: &ScoreSet) -> Result<Eer, MetricsError> {
    let sorted = Sorted::new(scores)?;
    let mut best: Option<(f64, Eer)> = None;
    for t in candidate_thresholds(scores) {
        let (fmr, fnmr) = sorted.rates(t);
        let gap = (fmr - fnmr).abs();
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, Eer { eer: (fmr + fnmr) / 2.0, threshold: t, fmr, fnmr }));
        }
    }
    Ok(best.expect("the sweep always has the two sentinels").1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub fmr: f64,
    pub fnmr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetCurve {
    pub points: Vec<DetPoint>,
}

/// Rates at `n_points` thresholds spread evenly from the lowest score up to
/// just above the highest, so the first point has FMR 1 and the last FNMR 1.
/// Thresholds that collapse onto each other are dropped.
pub fn det_curve(scores: &ScoreSet, n_points: usize) -> Result<DetCurve, MetricsError> {
    if n_points < 2 {
        return Err(MetricsError::TooFewPoints(n_points));
    }
    let sorted = Sorted::new(scores)?;
    let lo = sorted.genuine[0].min(sorted.impostor[0]) as f64;
    let hi = (*sorted.genuine.last().unwrap()).max(*sorted.impostor.last().unwrap()) as f64;
    let mut thresholds: Vec<f64> =
        (0..n_points - 1).map(|i| lo + (hi - lo) * i as f64 / (n_points - 1) as f64).collect();
    thresholds.push(hi.next_up());
    thresholds.dedup();
    let points = thresholds
        .into_iter()
        .map(|threshold| {
            let (fmr, fnmr) = sorted.rates(threshold);
            DetPoint { threshold, fmr, fnmr }
        })
        .collect();
    Ok(DetCurve { points })
}

impl DetCurve {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["threshold", "fmr", "fnmr"])?;
        for p in &self.points {
            w.write_record([format_sig9(p.threshold), format_sig9(p.fmr), format_sig9(p.fnmr)])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

impl ScoreSet {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), MetricsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kind", "score"])?;
        for (genuine, list) in [(true, &self.genuine), (false, &self.impostor)] {
            for s in list {
                w.write_record([kind(genuine), &format_sig9(*s as f64)])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads any CSV with `kind` and `score` columns, such as the output of
    /// [`ScoreSet::write_csv`] or [`ScoreMatrix::write_csv`].
    pub fn read_csv<R: Read>(input: R) -> Result<Self, MetricsError> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        let col = |name: &str| {
            headers.iter().position(|h| h == name).ok_or_else(|| MetricsError::Parse(format!("missing `{name}` column")))
        };
        let (kind_col, score_col) = (col("kind")?, col("score")?);
        let mut set = ScoreSet::default();
        for (line, record) in r.records().enumerate() {
            let record = record?;
            let score: f32 = record[score_col]
                .parse()
                .map_err(|e| MetricsError::Parse(format!("row {}: {e}", line + 1)))?;
            match &record[kind_col] {
                "genuine" => set.genuine.push(score),
                "impostor" => set.impostor.push(score),
                other => return Err(MetricsError::Parse(format!("row {}: unknown kind `{other}`", line + 1))),
            }
        }
        Ok(set)
    }
}

/// Shortest-looking decimal with nine significant digits; enough to
/// round-trip any `f32`.
pub fn format_sig9(v: f64) -> String {
    if !v.is_finite() {
        return if v.is_nan() { "NaN".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if v == 0.0 {
        return "0".into();
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-5..9).contains(&exp) {
        return format!("{v:.8e}");
    }
    let s = format!("{:.*}", (8 - exp).max(0) as usize, v);
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}
