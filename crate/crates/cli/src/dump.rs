//! Per-utterance dumps: spectrogram image and posterior/label table.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use pit_core::eval::frame_decode;
use pit_core::mixer::{Corpus, FeatureExtractor, LOG_FLOOR};
use pit_core::network::{forward, ModelParams};
use pit_core::Matrix;

use crate::commands::base_config;
use crate::DumpArgs;

/// Binary PGM of a `frames × bins` matrix: time runs left to right, low
/// frequencies at the bottom, values mapped linearly onto 0..=255.
pub fn to_pgm(spec: &Matrix) -> Vec<u8> {
    let (frames, bins) = spec.shape();
    let (lo, hi) = spec
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{frames} {bins}\n255\n").into_bytes();
    for k in (0..bins).rev() {
        for t in 0..frames {
            out.push(((spec.get(t, k) - lo) / span * 255.0).round() as u8);
        }
    }
    out
}

pub fn run(args: DumpArgs) -> Result<ExitCode> {
    let cfg = base_config(&args.common)?;
    let corpus = Corpus::open(&args.corpus)?;
    let (split, index) = corpus
        .manifest()
        .splits
        .iter()
        .find_map(|s| {
            s.samples
                .iter()
                .position(|r| r.id == args.utterance)
                .map(|i| (s.name.clone(), i))
        })
        .ok_or_else(|| anyhow!("no utterance {:?} in the corpus", args.utterance))?;
    cfg.write_resolved(&args.out)?;

    let record = &corpus.manifest().split(&split)?.samples[index];
    let generated = corpus.regenerate(&split, index)?;
    let waveform = match record.stream {
        Some(s) => &generated.sources[s].waveform,
        None => &generated.pair.mixture,
    };
    let fx = FeatureExtractor::new(&corpus.manifest().frame)?;
    let mut spectrogram = fx.magnitudes(waveform)?;
    for v in spectrogram.as_mut_slice() {
        *v = (*v + LOG_FLOOR).ln();
    }

    let sample = corpus
        .load_split(&split)?
        .into_iter()
        .nth(index)
        .expect("index taken from the manifest");
    if sample.features.num_frames() != spectrogram.rows() {
        bail!("regenerated waveform does not match the stored features");
    }
    let pgm_path = args.out.join(format!("{}.pgm", args.utterance));
    write(&pgm_path, &to_pgm(&spectrogram))?;

    let refs: Vec<&[u32]> = sample.targets.iter().map(|t| t.senones.as_slice()).collect();
    let mut csv = String::new();
    match &args.model {
        Some(path) => {
            let params = ModelParams::load(path)?;
            let post = forward(&params, &sample.features)?;
            let decoded = frame_decode(&post);
            let k = params.config().num_senones;
            let _ = write!(csv, "frame,head");
            for j in 0..k {
                let _ = write!(csv, ",p_{j}");
            }
            let _ = write!(csv, ",decoded");
            header_refs(&mut csv, refs.len());
            for t in 0..sample.features.num_frames() {
                for (head, probs) in post.posteriors.iter().enumerate() {
                    let _ = write!(csv, "{t},{head}");
                    for p in probs.row(t) {
                        let _ = write!(csv, ",{p:.6}");
                    }
                    let _ = write!(csv, ",{}", decoded[head][t]);
                    row_refs(&mut csv, &refs, t);
                }
            }
        }
        None => {
            let _ = write!(csv, "frame");
            header_refs(&mut csv, refs.len());
            for t in 0..sample.features.num_frames() {
                let _ = write!(csv, "{t}");
                row_refs(&mut csv, &refs, t);
            }
        }
    }
    let csv_path = args.out.join(format!("{}.csv", args.utterance));
    write(&csv_path, csv.as_bytes())?;
    println!("wrote {} and {}", pgm_path.display(), csv_path.display());
    Ok(ExitCode::SUCCESS)
}

fn header_refs(csv: &mut String, n: usize) {
    for u in 0..n {
        let _ = write!(csv, ",ref_{u}");
    }
    csv.push('\n');
}

fn row_refs(csv: &mut String, refs: &[&[u32]], t: usize) {
    for r in refs {
        let _ = write!(csv, ",{}", r[t]);
    }
    csv.push('\n');
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}
