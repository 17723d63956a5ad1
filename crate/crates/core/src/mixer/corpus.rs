//! Deterministic corpus generation and the on-disk layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/<split>/feats.bin    f32 LE, frames × feat_dim per sample, row-major
//! <root>/<split>/labels.bin   u32 LE, num_streams × frames per sample
//! ```
//!
//! Mixture splits hold two-talker mixtures with one label stream per talker
//! (high-energy talker first). Clean splits hold every unpadded source of the
//! matching mixture split as a single-stream utterance. All features are
//! normalized with statistics of the training mixtures.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{Cmvn, FeatureExtractor};
use super::mix::{mix_pair, MixedPair};
use super::synth::{gen_utterance, EDGE_SILENCE_FRAMES, SourceUtterance, SpeakerProfile};
use super::FrameConfig;
use crate::error::{Error, Result};
use crate::network::FeatureSequence;
use crate::pitloss::LabelSequence;
use crate::tensorcore::Matrix;

pub const TRAIN: &str = "train";
pub const EVAL: &str = "eval";
pub const TRAIN_CLEAN: &str = "train_clean";
pub const EVAL_CLEAN: &str = "eval_clean";
pub const MIXTURE_SPLITS: [&str; 2] = [TRAIN, EVAL];
pub const CLEAN_SPLITS: [&str; 2] = [TRAIN_CLEAN, EVAL_CLEAN];

const MANIFEST: &str = "manifest.json";
const FEATS: &str = "feats.bin";
const LABELS: &str = "labels.bin";
const FORMAT_VERSION: u32 = 1;

/// SplitMix64 finalizer over `(seed, tag, index)`; gives every sample an
/// independent stream that does not depend on generation order.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let tag_hash = tag
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3));
    let mut z = seed
        ^ tag_hash.rotate_left(17)
        ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub num_train: usize,
    pub num_eval: usize,
    pub num_speakers: usize,
    /// Assigned round-robin by sample index.
    pub snrs_db: Vec<f64>,
    pub num_senones: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    /// Share of unordered speaker pairs reserved for evaluation.
    pub eval_pair_fraction: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_train: 500,
            num_eval: 50,
            num_speakers: 20,
            snrs_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
            num_senones: 8,
            min_frames: 30,
            max_frames: 40,
            eval_pair_fraction: 0.2,
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 3 {
            return Err(Error::validation(
                "at least three speakers are needed for disjoint train/eval pairs",
            ));
        }
        if self.snrs_db.is_empty() || self.snrs_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::validation("SNR list must be non-empty and finite"));
        }
        if self.num_senones < 2 {
            return Err(Error::validation("need at least two senones"));
        }
        if self.min_frames < 2 * EDGE_SILENCE_FRAMES + 1 {
            return Err(Error::validation(format!(
                "min_frames {} leaves no speech between the edge silences",
                self.min_frames
            )));
        }
        if self.min_frames > self.max_frames {
            return Err(Error::validation(format!(
                "min_frames {} exceeds max_frames {}",
                self.min_frames, self.max_frames
            )));
        }
        if 4 * self.min_frames < 3 * self.max_frames {
            return Err(Error::validation(format!(
                "length range {}..={} allows pairs beyond a 3:4 ratio",
                self.min_frames, self.max_frames
            )));
        }
        if !(self.eval_pair_fraction > 0.0 && self.eval_pair_fraction < 1.0) {
            return Err(Error::validation("eval_pair_fraction must lie in (0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Mixture,
    Clean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    /// Generator index of the mixture this sample comes from.
    pub source_index: usize,
    /// For clean samples, which talker of the mixture (0 = high energy).
    pub stream: Option<usize>,
    pub snr_db: f64,
    pub speakers: Vec<u32>,
    pub high_energy_speaker: usize,
    pub original_lengths: Vec<usize>,
    pub num_frames: usize,
    pub num_streams: usize,
    pub feat_offset: u64,
    pub label_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub name: String,
    pub kind: SplitKind,
    pub samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub frame: FrameConfig,
    pub feat_dim: usize,
    pub num_senones: usize,
    pub generator: CorpusSpec,
    pub cmvn: Cmvn,
    pub splits: Vec<SplitManifest>,
}

impl CorpusManifest {
    pub fn split(&self, name: &str) -> Result<&SplitManifest> {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::validation(format!("corpus has no split {name:?}")))
    }
}

/// One generated mixture together with its unpadded sources, high first.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub id: String,
    pub pair: MixedPair,
    pub sources: [SourceUtterance; 2],
}

pub struct CorpusGenerator {
    spec: CorpusSpec,
    frame: FrameConfig,
    profiles: Vec<SpeakerProfile>,
    train_pairs: Vec<(usize, usize)>,
    eval_pairs: Vec<(usize, usize)>,
}

impl CorpusGenerator {
    pub fn new(spec: &CorpusSpec, frame: &FrameConfig) -> Result<Self> {
        spec.validate()?;
        frame.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "speakers", 0));
        let profiles: Vec<_> = (0..spec.num_speakers)
            .map(|id| SpeakerProfile::generate(id as u32, spec.num_senones, &mut rng))
            .collect();
        for p in &profiles {
            p.validate(frame.sample_rate)?;
        }

        let mut pairs: Vec<(usize, usize)> = (0..spec.num_speakers)
            .flat_map(|a| (a + 1..spec.num_speakers).map(move |b| (a, b)))
            .collect();
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "pairs", 0)));
        let n_eval = ((pairs.len() as f64 * spec.eval_pair_fraction).round() as usize)
            .clamp(1, pairs.len() - 1);
        let train_pairs = pairs.split_off(n_eval);
        Ok(CorpusGenerator {
            spec: spec.clone(),
            frame: frame.clone(),
            profiles,
            train_pairs,
            eval_pairs: pairs,
        })
    }

    pub fn profiles(&self) -> &[SpeakerProfile] {
        &self.profiles
    }

    /// Unordered speaker pairs usable by a mixture split.
    pub fn pairs(&self, split: &str) -> Result<&[(usize, usize)]> {
        match split {
            TRAIN => Ok(&self.train_pairs),
            EVAL => Ok(&self.eval_pairs),
            other => Err(Error::validation(format!("{other:?} is not a mixture split"))),
        }
    }

    pub fn num_samples(&self, split: &str) -> Result<usize> {
        match split {
            TRAIN => Ok(self.spec.num_train),
            EVAL => Ok(self.spec.num_eval),
            other => Err(Error::validation(format!("{other:?} is not a mixture split"))),
        }
    }

    pub fn sample(&self, split: &str, index: usize) -> Result<GeneratedSample> {
        let pairs = self.pairs(split)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.spec.seed, split, index as u64));
        let (mut a, mut b) = pairs[rng.random_range(0..pairs.len())];
        if rng.random::<bool>() {
            std::mem::swap(&mut a, &mut b);
        }
        let mut source = |speaker: usize| -> Result<SourceUtterance> {
            let frames = rng.random_range(self.spec.min_frames..=self.spec.max_frames);
            gen_utterance(&self.profiles[speaker], frames, &self.frame, rng.random())
        };
        let ua = source(a)?;
        let ub = source(b)?;
        let mix_seed = rng.random();
        // The longer source is the high-energy talker; ties keep draw order.
        let (high, low) = if ub.num_frames > ua.num_frames {
            (ub, ua)
        } else {
            (ua, ub)
        };
        let snr = self.spec.snrs_db[index % self.spec.snrs_db.len()];
        let pair = mix_pair(&high, &low, snr, &self.frame, mix_seed)?;
        Ok(GeneratedSample {
            id: format!("{split}-{index:05}"),
            pair,
            sources: [high, low],
        })
    }
}

struct Rendered {
    sample: GeneratedSample,
    mixture: Matrix,
    clean: [Matrix; 2],
}

fn render(gen: &CorpusGenerator, fx: &FeatureExtractor, split: &str, i: usize) -> Result<Rendered> {
    let sample = gen.sample(split, i)?;
    let mixture = fx.log_mel(&sample.pair.mixture)?;
    let clean = [
        fx.log_mel(&sample.sources[0].waveform)?,
        fx.log_mel(&sample.sources[1].waveform)?,
    ];
    Ok(Rendered {
        sample,
        mixture,
        clean,
    })
}

struct SplitWriter {
    dir: PathBuf,
    feats: BufWriter<File>,
    labels: BufWriter<File>,
    feat_offset: u64,
    label_offset: u64,
}

impl SplitWriter {
    fn create(root: &Path, name: &str) -> Result<Self> {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let open = |file: &str| -> Result<BufWriter<File>> {
            let path = dir.join(file);
            File::create(&path)
                .map(BufWriter::new)
                .map_err(|e| Error::io(path, e))
        };
        Ok(SplitWriter {
            feats: open(FEATS)?,
            labels: open(LABELS)?,
            dir,
            feat_offset: 0,
            label_offset: 0,
        })
    }

    /// Writes one sample and returns its `(feat_offset, label_offset)`.
    fn push(&mut self, feats: &Matrix, targets: &[&[u32]]) -> Result<(u64, u64)> {
        let offsets = (self.feat_offset, self.label_offset);
        let mut buf = Vec::with_capacity(feats.len() * 4);
        for v in feats.as_slice() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        self.feats
            .write_all(&buf)
            .map_err(|e| Error::io(self.dir.join(FEATS), e))?;
        self.feat_offset += buf.len() as u64;

        buf.clear();
        for stream in targets {
            for k in *stream {
                buf.extend_from_slice(&k.to_le_bytes());
            }
        }
        self.labels
            .write_all(&buf)
            .map_err(|e| Error::io(self.dir.join(LABELS), e))?;
        self.label_offset += buf.len() as u64;
        Ok(offsets)
    }

    fn finish(mut self) -> Result<()> {
        self.feats
            .flush()
            .map_err(|e| Error::io(self.dir.join(FEATS), e))?;
        self.labels
            .flush()
            .map_err(|e| Error::io(self.dir.join(LABELS), e))
    }
}

fn record(
    id: String,
    sample: &GeneratedSample,
    source_index: usize,
    stream: Option<usize>,
    feats: &Matrix,
    offsets: (u64, u64),
) -> SampleRecord {
    let meta = &sample.pair.meta;
    let (speakers, original_lengths, num_streams) = match stream {
        None => (meta.speakers.clone(), meta.original_lengths.clone(), 2),
        Some(s) => (vec![meta.speakers[s]], vec![meta.original_lengths[s]], 1),
    };
    SampleRecord {
        id,
        source_index,
        stream,
        snr_db: meta.snr_db,
        speakers,
        high_energy_speaker: 0,
        original_lengths,
        num_frames: feats.rows(),
        num_streams,
        feat_offset: offsets.0,
        label_offset: offsets.1,
    }
}

/// Generates every split under `root` using `workers` threads. The output is
/// byte-identical for a given spec regardless of `workers`.
pub fn gen_corpus(
    spec: &CorpusSpec,
    frame: &FrameConfig,
    root: &Path,
    workers: usize,
) -> Result<CorpusManifest> {
    let gen = CorpusGenerator::new(spec, frame)?;
    let fx = FeatureExtractor::new(frame)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::validation(format!("thread pool: {e}")))?;

    let mut rendered = Vec::new();
    for split in MIXTURE_SPLITS {
        let n = gen.num_samples(split)?;
        let items: Vec<Rendered> = pool.install(|| {
            (0..n)
                .into_par_iter()
                .map(|i| render(&gen, &fx, split, i))
                .collect::<Result<_>>()
        })?;
        rendered.push(items);
    }

    let cmvn = Cmvn::estimate(rendered[0].iter().map(|r| &r.mixture))?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;

    let mut splits = Vec::new();
    for (items, (mix_name, clean_name)) in rendered
        .iter_mut()
        .zip(MIXTURE_SPLITS.into_iter().zip(CLEAN_SPLITS))
    {
        let mut mix_writer = SplitWriter::create(root, mix_name)?;
        let mut clean_writer = SplitWriter::create(root, clean_name)?;
        let mut mix_records = Vec::with_capacity(items.len());
        let mut clean_records = Vec::with_capacity(2 * items.len());
        for (index, item) in items.iter_mut().enumerate() {
            cmvn.apply(&mut item.mixture)?;
            let targets: Vec<&[u32]> = item
                .sample
                .pair
                .targets
                .iter()
                .map(|t| t.senones.as_slice())
                .collect();
            let offsets = mix_writer.push(&item.mixture, &targets)?;
            mix_records.push(record(
                item.sample.id.clone(),
                &item.sample,
                index,
                None,
                &item.mixture,
                offsets,
            ));
            for s in 0..2 {
                let feats = &mut item.clean[s];
                cmvn.apply(feats)?;
                let labels = item.sample.sources[s].labels.senones.as_slice();
                let offsets = clean_writer.push(feats, &[labels])?;
                clean_records.push(record(
                    format!("{}.s{s}", item.sample.id),
                    &item.sample,
                    index,
                    Some(s),
                    feats,
                    offsets,
                ));
            }
        }
        mix_writer.finish()?;
        clean_writer.finish()?;
        splits.push(SplitManifest {
            name: mix_name.to_string(),
            kind: SplitKind::Mixture,
            samples: mix_records,
        });
        splits.push(SplitManifest {
            name: clean_name.to_string(),
            kind: SplitKind::Clean,
            samples: clean_records,
        });
    }

    let manifest = CorpusManifest {
        format_version: FORMAT_VERSION,
        frame: frame.clone(),
        feat_dim: frame.num_filters,
        num_senones: spec.num_senones,
        generator: spec.clone(),
        cmvn,
        splits,
    };
    let path = root.join(MANIFEST);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Format {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A stored utterance ready for training or scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSample {
    pub features: FeatureSequence,
    /// One label stream per talker, high-energy talker first.
    pub targets: Vec<LabelSequence>,
    pub snr_db: f64,
    pub speakers: Vec<u32>,
    pub high_energy_speaker: usize,
    pub original_lengths: Vec<usize>,
    /// For clean samples, which talker of the source mixture this is.
    pub stream: Option<usize>,
}

impl MixtureSample {
    /// Whether target stream `u` is the louder talker of its mixture.
    pub fn is_high_energy(&self, u: usize) -> bool {
        match self.stream {
            Some(s) => s == self.high_energy_speaker,
            None => u == self.high_energy_speaker,
        }
    }
}

/// Read access to a generated corpus.
#[derive(Clone, Debug)]
pub struct Corpus {
    root: PathBuf,
    manifest: CorpusManifest,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let manifest: CorpusManifest =
            serde_json::from_slice(&read_file(&path)?).map_err(|e| Error::Format {
                path: path.clone(),
                reason: e.to_string(),
            })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Format {
                path,
                reason: format!("unsupported format version {}", manifest.format_version),
            });
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn load_split(&self, name: &str) -> Result<Vec<MixtureSample>> {
        let split = self.manifest.split(name)?;
        let dir = self.root.join(name);
        let feats_path = dir.join(FEATS);
        let labels_path = dir.join(LABELS);
        let feats = read_file(&feats_path)?;
        let labels = read_file(&labels_path)?;
        let dim = self.manifest.feat_dim;

        split
            .samples
            .iter()
            .map(|rec| {
                let n_feats = rec.num_frames * dim;
                let bytes = slice(&feats, rec.feat_offset, n_feats * 4, &feats_path)?;
                let values = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect();
                let frames = Matrix::from_vec(rec.num_frames, dim, values)?;
                let bytes = slice(
                    &labels,
                    rec.label_offset,
                    rec.num_streams * rec.num_frames * 4,
                    &labels_path,
                )?;
                let ids: Vec<u32> = bytes
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                let targets = ids
                    .chunks(rec.num_frames)
                    .enumerate()
                    .map(|(s, chunk)| LabelSequence::new(chunk.to_vec(), s))
                    .collect::<Vec<_>>();
                if let Some(bad) = ids.iter().find(|&&k| k as usize >= self.manifest.num_senones) {
                    return Err(Error::Format {
                        path: labels_path.clone(),
                        reason: format!("{}: senone {bad} out of range", rec.id),
                    });
                }
                Ok(MixtureSample {
                    features: FeatureSequence::new(frames, rec.id.clone())?,
                    targets,
                    snr_db: rec.snr_db,
                    speakers: rec.speakers.clone(),
                    high_energy_speaker: rec.high_energy_speaker,
                    original_lengths: rec.original_lengths.clone(),
                    stream: rec.stream,
                })
            })
            .collect()
    }

    pub fn generator(&self) -> Result<CorpusGenerator> {
        CorpusGenerator::new(&self.manifest.generator, &self.manifest.frame)
    }

    /// Re-synthesizes the waveforms behind sample `index` of `split`.
    pub fn regenerate(&self, split: &str, index: usize) -> Result<GeneratedSample> {
        let rec = self
            .manifest
            .split(split)?
            .samples
            .get(index)
            .ok_or_else(|| Error::validation(format!("{split} has no sample {index}")))?;
        let mixture_split = match split {
            TRAIN | TRAIN_CLEAN => TRAIN,
            _ => EVAL,
        };
        self.generator()?.sample(mixture_split, rec.source_index)
    }
}

fn slice<'a>(data: &'a [u8], offset: u64, len: usize, path: &Path) -> Result<&'a [u8]> {
    let start = offset as usize;
    data.get(start..start + len).ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        reason: format!("record at byte {offset} runs past the end of the file"),
    })
}
