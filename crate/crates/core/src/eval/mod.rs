//! Frame-level decoding and best-permutation scoring.
//!
//! Each head is decoded by per-frame argmax. Hypotheses are matched to
//! references per utterance under the assignment with the fewest total
//! errors, and errors are reported per SNR condition and per talker role.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixer::{MixtureSample, SILENCE};
use crate::network::{forward, ModelParams, PosteriorStreams};
use crate::pitloss::{Permutations, MAX_STREAMS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// S heads on mixtures, scored in pairwise mode.
    Pit,
    /// One head on mixtures, its hypothesis scored against every reference.
    SingleOnMix,
    /// One head on clean single-talker utterances.
    SingleOnClean,
}

impl std::str::FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pit" => Ok(ScoreMode::Pit),
            "single-on-mix" => Ok(ScoreMode::SingleOnMix),
            "single-on-clean" => Ok(ScoreMode::SingleOnClean),
            other => Err(Error::validation(format!("unknown scoring mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    /// Frame-by-frame mismatches; sequences must have equal length.
    Frame,
    /// Edit distance between collapsed token lists.
    Token,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    HighEnergy,
    LowEnergy,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::HighEnergy => "high_e",
            Role::LowEnergy => "low_e",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hypothesis {
    pub frame_ids: Vec<Vec<u32>>,
    /// Run-collapsed, silence-free tokens per stream.
    pub token_ids: Vec<Vec<u32>>,
}

impl Hypothesis {
    pub fn from_posteriors(posteriors: &PosteriorStreams) -> Self {
        let frame_ids = frame_decode(posteriors);
        let token_ids = frame_ids.iter().map(|f| collapse_tokens(f)).collect();
        Hypothesis {
            frame_ids,
            token_ids,
        }
    }
}

/// Per-frame argmax of each stream; ties go to the lowest senone id.
pub fn frame_decode(posteriors: &PosteriorStreams) -> Vec<Vec<u32>> {
    posteriors
        .posteriors
        .iter()
        .map(|p| {
            (0..p.rows())
                .map(|t| {
                    let row = p.row(t);
                    let mut best = 0;
                    for (k, &v) in row.iter().enumerate().skip(1) {
                        if v > row[best] {
                            best = k;
                        }
                    }
                    best as u32
                })
                .collect()
        })
        .collect()
}

/// Merges runs of equal ids, then drops silence.
pub fn collapse_tokens(frame_ids: &[u32]) -> Vec<u32> {
    let mut out: Vec<u32> = Vec::new();
    let mut prev = None;
    for &k in frame_ids {
        if prev != Some(k) && k != SILENCE {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let next = (diag + usize::from(x != y)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

pub fn frame_errors(hyp: &[u32], reference: &[u32]) -> Result<usize> {
    if hyp.len() != reference.len() {
        return Err(Error::validation(format!(
            "hypothesis has {} frames, reference {}",
            hyp.len(),
            reference.len()
        )));
    }
    Ok(hyp.iter().zip(reference).filter(|(h, r)| h != r).count())
}

fn distance(hyp: &[u32], reference: &[u32], metric: Metric) -> Result<usize> {
    match metric {
        Metric::Frame => frame_errors(hyp, reference),
        Metric::Token => Ok(edit_distance(hyp, reference)),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairwiseScore {
    /// `perm[s]` is the reference matched to hypothesis `s`.
    pub perm: Vec<usize>,
    /// Errors per reference stream under `perm`.
    pub errors: Vec<usize>,
    pub total: usize,
}

/// Best-permutation scoring of `S` hypotheses against `S` references;
/// ties go to the lexicographically smallest assignment.
pub fn pairwise_score(hyps: &[Vec<u32>], refs: &[Vec<u32>], metric: Metric) -> Result<PairwiseScore> {
    let n = hyps.len();
    if n != refs.len() {
        return Err(Error::validation(format!(
            "{n} hypotheses for {} references",
            refs.len()
        )));
    }
    if n == 0 {
        return Err(Error::validation("nothing to score"));
    }
    if n > MAX_STREAMS {
        return Err(Error::Unsupported(format!(
            "{n} streams exceeds the brute-force limit of {MAX_STREAMS}"
        )));
    }
    let mut table = vec![0usize; n * n];
    for (s, h) in hyps.iter().enumerate() {
        for (u, r) in refs.iter().enumerate() {
            table[s * n + u] = distance(h, r, metric)?;
        }
    }
    let mut best: Option<PairwiseScore> = None;
    for perm in Permutations::new(n) {
        let total = perm.iter().enumerate().map(|(s, &u)| table[s * n + u]).sum();
        if best.as_ref().is_none_or(|b| total < b.total) {
            let mut errors = vec![0; n];
            for (s, &u) in perm.iter().enumerate() {
                errors[u] = table[s * n + u];
            }
            best = Some(PairwiseScore {
                perm,
                errors,
                total,
            });
        }
    }
    Ok(best.expect("at least one permutation"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCounts {
    pub frames: usize,
    pub frame_errors: usize,
    pub ref_tokens: usize,
    pub token_errors: usize,
    pub utterances: usize,
}

impl CellCounts {
    pub fn frame_error_rate(&self) -> f64 {
        ratio(self.frame_errors, self.frames)
    }

    /// Can exceed 1 when hypotheses insert tokens.
    pub fn token_error_rate(&self) -> f64 {
        ratio(self.token_errors, self.ref_tokens)
    }

    fn merge(&mut self, other: &CellCounts) {
        self.frames += other.frames;
        self.frame_errors += other.frame_errors;
        self.ref_tokens += other.ref_tokens;
        self.token_errors += other.token_errors;
        self.utterances += other.utterances;
    }
}

fn ratio(errors: usize, total: usize) -> f64 {
    if total == 0 {
        if errors == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        errors as f64 / total as f64
    }
}

/// SNR keys in hundredths of a dB so they order and compare exactly.
fn snr_key(snr_db: f64) -> i64 {
    (snr_db * 100.0).round() as i64
}

/// Counts per (SNR condition, talker role).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScoreReport {
    pub cells: BTreeMap<(i64, Role), CellCounts>,
    /// Distinct utterances scored; a mixture feeds both role cells.
    pub utterances: usize,
}

impl ScoreReport {
    pub fn cell(&self, snr_db: f64, role: Role) -> Option<&CellCounts> {
        self.cells.get(&(snr_key(snr_db), role))
    }

    pub fn snrs(&self) -> Vec<f64> {
        let mut keys: Vec<i64> = self.cells.keys().map(|(k, _)| *k).collect();
        keys.dedup();
        keys.into_iter().map(|k| k as f64 / 100.0).collect()
    }

    pub fn totals(&self) -> CellCounts {
        let mut all = CellCounts::default();
        for c in self.cells.values() {
            all.merge(c);
        }
        all.utterances = self.utterances;
        all
    }

    /// Pooled counts of one role over all SNR conditions.
    pub fn role_totals(&self, role: Role) -> CellCounts {
        let mut all = CellCounts::default();
        for ((_, r), c) in &self.cells {
            if *r == role {
                all.merge(c);
            }
        }
        all
    }

    fn add(&mut self, snr_db: f64, role: Role, counts: CellCounts) {
        self.cells
            .entry((snr_key(snr_db), role))
            .or_default()
            .merge(&counts);
    }

    /// `snr_db,role,frame_error_rate,token_error_rate,utterances` rows
    /// followed by an `all,all,...` totals row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("snr_db,role,frame_error_rate,token_error_rate,utterances\n");
        let row = |out: &mut String, snr: &str, role: &str, c: &CellCounts| {
            let _ = writeln!(
                out,
                "{snr},{role},{:.6},{:.6},{}",
                c.frame_error_rate(),
                c.token_error_rate(),
                c.utterances
            );
        };
        for ((snr, role), c) in &self.cells {
            row(&mut out, &format!("{}", *snr as f64 / 100.0), &role.to_string(), c);
        }
        let totals = self.totals();
        row(&mut out, "all", "all", &totals);
        out
    }
}

fn role_of(sample: &MixtureSample, u: usize) -> Role {
    if sample.is_high_energy(u) {
        Role::HighEnergy
    } else {
        Role::LowEnergy
    }
}

/// Per-(role) counts for one utterance given its posteriors.
pub fn score_utterance(
    posteriors: &PosteriorStreams,
    sample: &MixtureSample,
    mode: ScoreMode,
) -> Result<Vec<(Role, CellCounts)>> {
    let hyp = Hypothesis::from_posteriors(posteriors);
    let ref_frames: Vec<Vec<u32>> = sample.targets.iter().map(|t| t.senones.clone()).collect();
    let ref_tokens: Vec<Vec<u32>> = ref_frames.iter().map(|f| collapse_tokens(f)).collect();
    let id = &sample.features.utterance_id;

    let (frame_err, token_err) = match mode {
        ScoreMode::Pit | ScoreMode::SingleOnClean => {
            if hyp.frame_ids.len() != ref_frames.len() {
                return Err(Error::validation(format!(
                    "utterance {id}: {} output streams for {} references",
                    hyp.frame_ids.len(),
                    ref_frames.len()
                )));
            }
            (
                pairwise_score(&hyp.frame_ids, &ref_frames, Metric::Frame)?.errors,
                pairwise_score(&hyp.token_ids, &ref_tokens, Metric::Token)?.errors,
            )
        }
        ScoreMode::SingleOnMix => {
            if hyp.frame_ids.len() != 1 {
                return Err(Error::validation(format!(
                    "utterance {id}: single-head scoring needs one output stream, got {}",
                    hyp.frame_ids.len()
                )));
            }
            let frames = ref_frames
                .iter()
                .map(|r| frame_errors(&hyp.frame_ids[0], r))
                .collect::<Result<_>>()?;
            let tokens = ref_tokens
                .iter()
                .map(|r| edit_distance(&hyp.token_ids[0], r))
                .collect();
            (frames, tokens)
        }
    };

    Ok((0..ref_frames.len())
        .map(|u| {
            (
                role_of(sample, u),
                CellCounts {
                    frames: ref_frames[u].len(),
                    frame_errors: frame_err[u],
                    ref_tokens: ref_tokens[u].len(),
                    token_errors: token_err[u],
                    utterances: 1,
                },
            )
        })
        .collect())
}

/// Scores precomputed posteriors, one per sample.
pub fn score_posteriors(
    posteriors: &[PosteriorStreams],
    samples: &[MixtureSample],
    mode: ScoreMode,
) -> Result<ScoreReport> {
    if posteriors.len() != samples.len() {
        return Err(Error::validation(format!(
            "{} posterior sets for {} utterances",
            posteriors.len(),
            samples.len()
        )));
    }
    let mut report = ScoreReport::default();
    for (post, sample) in posteriors.iter().zip(samples) {
        for (role, counts) in score_utterance(post, sample, mode)? {
            report.add(sample.snr_db, role, counts);
        }
        report.utterances += 1;
    }
    Ok(report)
}

/// Decodes and scores every sample. Utterances run on the current rayon
/// pool; aggregation is in sample order.
pub fn evaluate_corpus(
    params: &ModelParams,
    samples: &[MixtureSample],
    mode: ScoreMode,
) -> Result<ScoreReport> {
    let streams = params.config().num_streams;
    if mode != ScoreMode::Pit && streams != 1 {
        return Err(Error::validation(format!(
            "{mode:?} scoring needs a single-head model, got {streams} heads"
        )));
    }
    let posteriors: Vec<PosteriorStreams> = samples
        .par_iter()
        .map(|s| forward(params, &s.features))
        .collect::<Result<_>>()?;
    score_posteriors(&posteriors, samples, mode)
}

#[cfg(test)]
mod tests;
