//! Weakly labelled multi-speaker utterances built from synthetic speaker
//! streams, in the Concat (disjoint speaker turns) and Overlap (all speakers
//! at once) scenarios.

mod files;

pub use files::{read_feature_file, write_feature_file};

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensor::Tensor;

/// Most speakers in one utterance.
pub const MAX_SPEAKERS_PER_UTTERANCE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Concat,
    Overlap,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Concat => "concat",
            Scenario::Overlap => "overlap",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Scenario::Concat),
            "overlap" => Ok(Scenario::Overlap),
            other => Err(Error::Config(format!("unknown scenario {other:?}"))),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A synthetic speaker: an AR(1) Gaussian process around `mean`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub id: usize,
    pub mean: Vec<f64>,
    /// Innovation scale, > 0 for random streams.
    pub scale: f64,
    /// Temporal correlation in `[0, 1)`.
    pub rho: f64,
}

/// One labelled utterance; `speakers` is sorted and duplicate-free.
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceExample {
    pub id: String,
    pub features: Tensor,
    pub speakers: Vec<usize>,
    pub scenario: Scenario,
}

/// What to generate. Missing fields take their mini-S Concat values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub name: String,
    pub num_speakers: usize,
    pub train: usize,
    pub test: usize,
    pub scenario: Scenario,
    pub feature_dim: usize,
    /// Frames per second.
    pub frame_rate: usize,
    pub seconds: f64,
    /// Intra-speaker innovation scale.
    pub scale: f64,
    pub rho: f64,
    /// Standard deviation of speaker mean components, in units of `scale`.
    pub mean_spread: f64,
    /// Minimum distance between any two speaker means, in units of `scale`.
    pub min_separation: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::mini_s(Scenario::Concat)
    }
}

impl DatasetSpec {
    /// The desk-scale benchmark: 20 speakers, 600 training and 200 test
    /// utterances of 5 s at 100 frames/s.
    pub fn mini_s(scenario: Scenario) -> Self {
        DatasetSpec {
            name: "mini-s".into(),
            num_speakers: 20,
            train: 600,
            test: 200,
            scenario,
            feature_dim: 20,
            frame_rate: 100,
            seconds: 5.0,
            scale: 1.0,
            rho: 0.5,
            mean_spread: 2.0,
            min_separation: 4.0,
        }
    }

    pub fn frames(&self) -> usize {
        (self.seconds * self.frame_rate as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < MAX_SPEAKERS_PER_UTTERANCE {
            return Err(Error::Config(format!(
                "need at least {MAX_SPEAKERS_PER_UTTERANCE} speakers, got {}",
                self.num_speakers
            )));
        }
        if self.feature_dim == 0 || self.frames() == 0 {
            return Err(Error::Config("feature_dim and utterance length must be positive".into()));
        }
        if !(self.scale > 0.0) || !(0.0..1.0).contains(&self.rho) || !(self.mean_spread > 0.0) {
            return Err(Error::Config("need scale > 0, 0 <= rho < 1, mean_spread > 0".into()));
        }
        Ok(())
    }
}

/// `f_t = ρ f_{t−1} + (1 − ρ)(μ + scale·η_t)` with `f_{−1} = μ`.
pub fn synth_speaker_stream(profile: &SpeakerProfile, frames: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = profile.mean.len();
    let mut data = Vec::with_capacity(frames * dim);
    let mut prev = profile.mean.clone();
    for _ in 0..frames {
        for (j, p) in prev.iter_mut().enumerate() {
            let eta: f64 = rng.sample(StandardNormal);
            *p = profile.rho * *p + (1.0 - profile.rho) * (profile.mean[j] + profile.scale * eta);
        }
        data.extend_from_slice(&prev);
    }
    Tensor::new(vec![frames, dim], data).expect("stream shape")
}

/// Split `0..total` into `k` contiguous spans, each at least `ceil(total/10)`
/// frames, with uniformly random split points.
pub fn concat_spans<R: Rng + ?Sized>(k: usize, total: usize, rng: &mut R) -> Result<Vec<Range<usize>>> {
    check_speaker_count(k)?;
    let min = total.div_ceil(10);
    if k * min > total || total == 0 {
        return Err(Error::Data(format!("{total} frames cannot hold {k} turns")));
    }
    let free = total - k * min;
    let mut cuts: Vec<usize> = (0..k - 1).map(|_| rng.random_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(k);
    let mut start = 0;
    let mut prev_cut = 0;
    for j in 0..k {
        let cut = if j + 1 < k { cuts[j] } else { free };
        let len = min + cut - prev_cut;
        spans.push(start..start + len);
        start += len;
        prev_cut = cut;
    }
    Ok(spans)
}

/// Concat scenario: span `j` of the output is copied from the same frames of
/// stream `j`. Returns the utterance and the spans.
pub fn build_concat<R: Rng + ?Sized>(
    streams: &[Tensor],
    total: usize,
    rng: &mut R,
) -> Result<(Tensor, Vec<Range<usize>>)> {
    check_speaker_count(streams.len())?;
    let cols = check_streams(streams, total)?;
    if streams.len() == 1 {
        let data = streams[0].data()[..total * cols].to_vec();
        return Ok((Tensor::new(vec![total, cols], data)?, vec![0..total]));
    }
    let spans = concat_spans(streams.len(), total, rng)?;
    let mut data = Vec::with_capacity(total * cols);
    for (stream, span) in streams.iter().zip(&spans) {
        data.extend_from_slice(&stream.data()[span.start * cols..span.end * cols]);
    }
    Ok((Tensor::new(vec![total, cols], data)?, spans))
}

/// Overlap scenario: the frame-wise average of the streams.
pub fn build_overlap(streams: &[Tensor]) -> Result<Tensor> {
    check_speaker_count(streams.len())?;
    let first = &streams[0];
    if streams.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::Data("overlap streams differ in length or width".into()));
    }
    let k = streams.len() as f64;
    let mut data = vec![0.0; first.len()];
    for s in streams {
        for (d, v) in data.iter_mut().zip(s.data()) {
            *d += v;
        }
    }
    for d in &mut data {
        *d /= k;
    }
    Tensor::new(first.shape().to_vec(), data)
}

fn check_speaker_count(k: usize) -> Result<()> {
    if !(1..=MAX_SPEAKERS_PER_UTTERANCE).contains(&k) {
        return Err(Error::Data(format!("utterances hold 1 to 3 speakers, got {k}")));
    }
    Ok(())
}

fn check_streams(streams: &[Tensor], total: usize) -> Result<usize> {
    let cols = streams[0].cols();
    for s in streams {
        if s.shape().len() != 2 || s.cols() != cols || s.rows() < total {
            return Err(Error::Data(format!(
                "stream {:?} cannot fill {total} frames of width {cols}",
                s.shape()
            )));
        }
    }
    Ok(cols)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Speaker means drawn from `N(0, (spread·scale)²)` per component, redrawn
/// until every pair is at least `min_separation·scale` apart.
pub fn speaker_profiles(spec: &DatasetSpec, seed: u64) -> Result<Vec<SpeakerProfile>> {
    spec.validate()?;
    let mut rng = stream_rng(seed, 0);
    let sd = spec.mean_spread * spec.scale;
    let min_dist = spec.min_separation * spec.scale;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(spec.num_speakers);
    let mut attempts = 0;
    while means.len() < spec.num_speakers {
        attempts += 1;
        if attempts > 1000 * spec.num_speakers {
            return Err(Error::Config(
                "cannot place speaker means that far apart; raise mean_spread".into(),
            ));
        }
        let m: Vec<f64> = (0..spec.feature_dim)
            .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let far = means.iter().all(|o| {
            let d2: f64 = o.iter().zip(&m).map(|(a, b)| (a - b).powi(2)).sum();
            d2.sqrt() >= min_dist
        });
        if far {
            means.push(m);
        }
    }
    Ok(means
        .into_iter()
        .enumerate()
        .map(|(id, mean)| SpeakerProfile {
            id,
            mean,
            scale: spec.scale,
            rho: spec.rho,
        })
        .collect())
}

/// Utterance `index` of the dataset (training utterances first, then test).
/// Depends only on `(seed, index)`.
pub fn synth_utterance(
    spec: &DatasetSpec,
    profiles: &[SpeakerProfile],
    seed: u64,
    index: usize,
) -> Result<UtteranceExample> {
    let mut rng = stream_rng(seed, index as u64 + 1);
    let k = rng.random_range(1..=MAX_SPEAKERS_PER_UTTERANCE);
    let chosen: Vec<usize> = index::sample(&mut rng, profiles.len(), k).into_vec();
    let frames = spec.frames();
    let streams: Vec<Tensor> = chosen
        .iter()
        .map(|&s| synth_speaker_stream(&profiles[s], frames, rng.next_u64()))
        .collect();
    let features = match spec.scenario {
        Scenario::Concat => build_concat(&streams, frames, &mut rng)?.0,
        Scenario::Overlap => build_overlap(&streams)?,
    };
    // Round to storage precision so files and memory agree exactly.
    let features = features.map(|v| v as f32 as f64);
    let mut speakers = chosen;
    speakers.sort_unstable();
    let id = if index < spec.train {
        format!("train-{index:05}")
    } else {
        format!("test-{:05}", index - spec.train)
    };
    Ok(UtteranceExample {
        id,
        features,
        speakers,
        scenario: spec.scenario,
    })
}

/// In-memory training and test sets.
pub fn generate_examples(
    spec: &DatasetSpec,
    seed: u64,
    exec: Execution,
) -> Result<(Vec<UtteranceExample>, Vec<UtteranceExample>)> {
    let profiles = speaker_profiles(spec, seed)?;
    let all: Vec<UtteranceExample> = par::map_range(exec, spec.train + spec.test, |i| {
        synth_utterance(spec, &profiles, seed, i)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut all = all;
    let test = all.split_off(spec.train);
    Ok((all, test))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.jsonl",
            Split::Test => "test.jsonl",
        }
    }
}

/// One manifest line; `path` is relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub speakers: Vec<usize>,
    pub scenario: Scenario,
}

/// Dataset summary stored as `dataset.json` next to the split manifests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub num_speakers: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub frame_rate: usize,
    pub frames_per_utterance: usize,
    pub feature_dim: usize,
    pub scenario: Scenario,
    pub seed: u64,
    pub spec: DatasetSpec,
    #[serde(skip)]
    pub train: Vec<ManifestEntry>,
    #[serde(skip)]
    pub test: Vec<ManifestEntry>,
}

pub const SUMMARY_FILE: &str = "dataset.json";

/// Generate a dataset into `dir`: `dataset.json`, `train.jsonl`,
/// `test.jsonl` and one feature file per utterance under `features/`.
pub fn generate_dataset(spec: &DatasetSpec, seed: u64, dir: &Path, exec: Execution) -> Result<DatasetManifest> {
    let (train, test) = generate_examples(spec, seed, exec)?;
    let feature_dir = dir.join("features");
    fs::create_dir_all(&feature_dir).map_err(|e| Error::io(&feature_dir, e))?;
    let write_split = |examples: &[UtteranceExample], split: Split| -> Result<Vec<ManifestEntry>> {
        let entries: Vec<ManifestEntry> = par::map(exec, examples, |ex| {
            let rel = format!("features/{}.hvf", ex.id);
            write_feature_file(&dir.join(&rel), &ex.features)?;
            Ok(ManifestEntry {
                id: ex.id.clone(),
                path: rel,
                speakers: ex.speakers.clone(),
                scenario: ex.scenario,
            })
        })
        .into_iter()
        .collect::<Result<_>>()?;
        write_jsonl(&dir.join(split.file_name()), &entries)?;
        Ok(entries)
    };
    let train = write_split(&train, Split::Train)?;
    let test = write_split(&test, Split::Test)?;
    let manifest = DatasetManifest {
        name: spec.name.clone(),
        num_speakers: spec.num_speakers,
        train_count: train.len(),
        test_count: test.len(),
        frame_rate: spec.frame_rate,
        frames_per_utterance: spec.frames(),
        feature_dim: spec.feature_dim,
        scenario: spec.scenario,
        seed,
        spec: spec.clone(),
        train,
        test,
    };
    let summary = dir.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    fs::write(&summary, json).map_err(|e| Error::io(&summary, e))?;
    Ok(manifest)
}

fn write_jsonl(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n").expect("write to Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read `dataset.json` and both split manifests, checking that ids are
/// unique across splits and labels are in range.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let summary = dir.join(SUMMARY_FILE);
    let text = fs::read_to_string(&summary).map_err(|e| Error::io(&summary, e))?;
    let mut manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&summary, e.to_string()))?;
    manifest.train = read_jsonl(&dir.join(Split::Train.file_name()))?;
    manifest.test = read_jsonl(&dir.join(Split::Test.file_name()))?;
    let mut ids = std::collections::HashSet::new();
    for e in manifest.train.iter().chain(&manifest.test) {
        if !ids.insert(e.id.as_str()) {
            return Err(Error::Data(format!("utterance id {} appears twice", e.id)));
        }
        if e.speakers.is_empty()
            || e.speakers.len() > MAX_SPEAKERS_PER_UTTERANCE
            || e.speakers.iter().any(|&s| s >= manifest.num_speakers)
        {
            return Err(Error::Data(format!("utterance {} has invalid speakers {:?}", e.id, e.speakers)));
        }
    }
    Ok(manifest)
}

fn read_jsonl(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Load every utterance of one split.
pub fn load_split(dir: &Path, manifest: &DatasetManifest, split: Split, exec: Execution) -> Result<Vec<UtteranceExample>> {
    let entries = match split {
        Split::Train => &manifest.train,
        Split::Test => &manifest.test,
    };
    par::map(exec, entries, |e| {
        let path: PathBuf = dir.join(&e.path);
        let features = read_feature_file(&path)?;
        if features.cols() != manifest.feature_dim {
            return Err(Error::format(
                &path,
                format!("expected {} features per frame, found {}", manifest.feature_dim, features.cols()),
            ));
        }
        Ok(UtteranceExample {
            id: e.id.clone(),
            features,
            speakers: e.speakers.clone(),
            scenario: e.scenario,
        })
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests;
