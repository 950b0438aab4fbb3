//! JSON-lines manifests, the planted-signal synthetic corpus and dataset loading.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{cqt, mel_spectrogram, SpecKind, SpecParams, Spectrogram};
use crate::audio::{load_pcm, resample_linear, write_pcm16, PcmClip, SAMPLE_RATE, SEGMENT_SECONDS};
use crate::error::{Error, Result};
use crate::image::{load_image, FeatureFile, ImageInput, ImagePathway, Ppm};
use crate::tensor::Tensor;
use crate::text::{tokenize, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// One manifest line. Paths are relative to the manifest's directory unless absolute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    pub lyrics_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrogram_cache: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
    pub split: Split,
    /// Records sharing a song id share lyrics and audio; defaults to the record id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub song_id: Option<String>,
}

impl Record {
    pub fn song_key(&self) -> &str {
        self.song_id.as_deref().unwrap_or(&self.id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Requirement {
    Any,
    /// Every record must carry a 0/1 label.
    Labels,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

impl Manifest {
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// `[train, val, test]`
    pub fn split_counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for r in &self.records {
            c[r.split as usize] += 1;
        }
        c
    }

    pub fn to_json_lines(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json_lines()).map_err(|e| Error::io(path, e))
    }
}

pub fn parse_manifest(text: &str, path: &Path, root: &Path, req: Requirement) -> Result<Manifest> {
    let err = |line: usize, detail: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        detail,
    };
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let exists = |line: usize, what: &str, p: &Path| {
        let full = if p.is_absolute() { p.to_path_buf() } else { root.join(p) };
        if full.is_file() {
            Ok(())
        } else {
            Err(err(line, format!("{what} {} does not exist", full.display())))
        }
    };
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let r: Record = serde_json::from_str(raw).map_err(|e| err(line, e.to_string()))?;
        if !seen.insert(r.id.clone()) {
            return Err(err(line, format!("duplicate id '{}'", r.id)));
        }
        exists(line, "lyrics", &r.lyrics_path)?;
        if r.audio_path.is_none() && r.spectrogram_cache.is_none() {
            return Err(err(line, "needs audio_path or spectrogram_cache".into()));
        }
        if let Some(p) = &r.audio_path {
            exists(line, "audio", p)?;
        }
        if let Some(p) = &r.spectrogram_cache {
            exists(line, "spectrogram cache", p)?;
        }
        if r.image_path.is_none() && r.feature_id.is_none() {
            return Err(err(line, "needs image_path or feature_id".into()));
        }
        if let Some(p) = &r.image_path {
            exists(line, "image", p)?;
        }
        match r.label {
            Some(0 | 1) => {}
            Some(l) => return Err(err(line, format!("label must be 0 or 1, found {l}"))),
            None if req == Requirement::Labels => return Err(err(line, "missing label".into())),
            None => {}
        }
        records.push(r);
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest(path.to_path_buf()));
    }
    Ok(Manifest {
        root: root.to_path_buf(),
        records,
    })
}

pub fn load_manifest(path: &Path, req: Requirement) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_manifest(&text, path, &root, req)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    Sentiment,
    Retrieval,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub task: SynthTask,
    /// Records: items for sentiment, queries for retrieval.
    pub count: usize,
    pub vocab_size: usize,
    /// Scales the marker sinusoid and the dominant colour.
    pub signal: f64,
    pub seed: u64,
    /// Candidate songs (retrieval only).
    pub songs: usize,
    pub clip_seconds: usize,
    pub image_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            task: SynthTask::Sentiment,
            count: 600,
            vocab_size: 200,
            signal: 1.0,
            seed: 0,
            songs: 50,
            clip_seconds: SEGMENT_SECONDS,
            image_size: 32,
        }
    }
}

/// Frequency ranges of the audio marker for bit 0 and bit 1.
pub const MARKER_BANDS: [(f64, f64); 2] = [(1500.0, 2500.0), (5000.0, 7000.0)];
pub const DISTRACTOR_BAND: (f64, f64) = (200.0, 800.0);
/// Side of the colour-mean grid used for precomputed image features.
pub const FEATURE_GRID: usize = 2;
pub const RETRIEVAL_GRID: usize = 4;
/// Occurrences of a song's key word in its lyrics.
pub const KEY_REPEATS: usize = 3;

/// Hidden per-record factors that determine the label (sentiment) or the song (retrieval).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Planted {
    pub id: String,
    pub text: u8,
    pub audio: u8,
    pub image: u8,
    pub song: usize,
}

/// The sentiment labelling rule: `t XOR (a OR v)`.
pub fn planted_label(t: u8, a: u8, v: u8) -> u8 {
    t ^ (a | v)
}

fn split_of(i: usize, n: usize) -> Split {
    let train = n * 8 / 10;
    let val = n / 10;
    if i < train {
        Split::Train
    } else if i < train + val {
        Split::Val
    } else {
        Split::Test
    }
}

fn filler_words<R: Rng>(rng: &mut R, vocab: usize, n: usize) -> Vec<String> {
    (0..n).map(|_| format!("w{}", rng.gen_range(0..vocab))).collect()
}

/// Three sinusoids: the marker and two low distractors, with random phases.
fn render_audio<R: Rng>(rng: &mut R, marker_hz: f64, marker_amp: f64, seconds: usize) -> Result<PcmClip> {
    let mut tones = vec![(marker_hz, marker_amp, rng.gen_range(0.0..std::f64::consts::TAU))];
    for _ in 0..2 {
        tones.push((
            rng.gen_range(DISTRACTOR_BAND.0..DISTRACTOR_BAND.1),
            rng.gen_range(0.15..0.3),
            rng.gen_range(0.0..std::f64::consts::TAU),
        ));
    }
    let sr = SAMPLE_RATE as f64;
    let samples = (0..seconds * SAMPLE_RATE as usize)
        .map(|n| {
            let t = n as f64 / sr;
            let s: f64 = tones
                .iter()
                .map(|&(f, a, ph)| a * (std::f64::consts::TAU * f * t + ph).sin())
                .sum();
            s.clamp(-1.0, 1.0)
        })
        .collect();
    PcmClip::new(samples, SAMPLE_RATE)
}

/// Base colours plus uniform pixel noise, with an optional per-cell colour pattern.
fn render_image<R: Rng>(rng: &mut R, size: usize, cell_colors: &dyn Fn(usize, usize) -> [f64; 3]) -> Ppm {
    let mut rgb = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let c = cell_colors(y, x);
            for ch in c {
                let v = (ch + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
                rgb.push((v * 255.0).round() as u8);
            }
        }
    }
    Ppm {
        width: size,
        height: size,
        rgb,
    }
}

/// Per-channel means over a `grid × grid` tiling, channel-major.
pub fn grid_color_means(img: &Ppm, grid: usize) -> Vec<f64> {
    let mut sums = vec![0.0; 3 * grid * grid];
    let mut counts = vec![0usize; grid * grid];
    for y in 0..img.height {
        for x in 0..img.width {
            let cell = (y * grid / img.height) * grid + x * grid / img.width;
            counts[cell] += 1;
            for ch in 0..3 {
                sums[ch * grid * grid + cell] += img.rgb[(y * img.width + x) * 3 + ch] as f64 / 255.0;
            }
        }
    }
    sums.iter()
        .enumerate()
        .map(|(i, s)| s / counts[i % (grid * grid)].max(1) as f64)
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes `manifest.jsonl`, `planted.jsonl`, `features.jvec` and the media files into `dir`.
pub fn generate_synthetic(spec: &SyntheticSpec, dir: &Path) -> Result<Manifest> {
    if spec.count < 20 {
        return Err(Error::Config(format!("synthetic corpus needs at least 20 records, got {}", spec.count)));
    }
    if spec.vocab_size == 0 || spec.image_size < RETRIEVAL_GRID || spec.clip_seconds == 0 {
        return Err(Error::Config("vocabulary, image size and clip length must be positive".into()));
    }
    if spec.task == SynthTask::Retrieval && (spec.songs < 2 || spec.songs > spec.count) {
        return Err(Error::Config(format!(
            "retrieval needs between 2 and {} songs, got {}",
            spec.count, spec.songs
        )));
    }
    for sub in ["lyrics", "audio", "images"] {
        mkdir(&dir.join(sub))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (records, planted, features) = match spec.task {
        SynthTask::Sentiment => synth_sentiment(spec, dir, &mut rng)?,
        SynthTask::Retrieval => synth_retrieval(spec, dir, &mut rng)?,
    };
    let manifest = Manifest {
        root: dir.to_path_buf(),
        records,
    };
    manifest.write(&dir.join("manifest.jsonl"))?;
    let planted_text: String = planted
        .iter()
        .map(|p| serde_json::to_string(p).expect("planted serializes") + "\n")
        .collect();
    write_text(&dir.join("planted.jsonl"), &planted_text)?;
    features.save(&dir.join("features.jvec"))?;
    Ok(manifest)
}

type Generated = (Vec<Record>, Vec<Planted>, FeatureFile);

fn synth_sentiment(spec: &SyntheticSpec, dir: &Path, rng: &mut ChaCha8Rng) -> Result<Generated> {
    let grid = FEATURE_GRID;
    let mut records = Vec::new();
    let mut planted = Vec::new();
    let mut feats = FeatureFile {
        dim: 3 * grid * grid,
        ids: Vec::new(),
        data: Vec::new(),
    };
    for i in 0..spec.count {
        let id = format!("item{i:04}");
        let (t, a, v): (u8, u8, u8) = (rng.gen_range(0..2), rng.gen_range(0..2), rng.gen_range(0..2));

        let n = rng.gen_range(8..=14);
        let mut words = filler_words(rng, spec.vocab_size, n);
        let at = rng.gen_range(0..=words.len());
        words.insert(at, format!("mark{t}"));
        let lyrics = PathBuf::from(format!("lyrics/{id}.txt"));
        write_text(&dir.join(&lyrics), &(words.join(" ") + "\n"))?;

        let (lo, hi) = MARKER_BANDS[a as usize];
        let hz = rng.gen_range(lo..hi);
        let clip = render_audio(rng, hz, 0.3 * spec.signal, spec.clip_seconds)?;
        let audio = PathBuf::from(format!("audio/{id}.wav"));
        write_pcm16(&dir.join(&audio), &clip)?;

        // red dominant for 0, blue for 1; green is a nuisance level
        let mut base = [rng.gen_range(0.1..0.4), rng.gen_range(0.1..0.6), rng.gen_range(0.1..0.4)];
        base[if v == 0 { 0 } else { 2 }] += 0.4 * spec.signal;
        let img = render_image(rng, spec.image_size, &|_, _| base);
        let image = PathBuf::from(format!("images/{id}.ppm"));
        write_bytes(&dir.join(&image), &img.encode())?;
        feats.ids.push(id.clone());
        feats.data.extend(grid_color_means(&img, grid).iter().map(|&x| x as f32));

        records.push(Record {
            id: id.clone(),
            lyrics_path: lyrics,
            caption: None,
            audio_path: Some(audio),
            spectrogram_cache: None,
            image_path: Some(image),
            feature_id: Some(id.clone()),
            label: Some(planted_label(t, a, v)),
            split: split_of(i, spec.count),
            song_id: None,
        });
        planted.push(Planted {
            id,
            text: t,
            audio: a,
            image: v,
            song: i,
        });
    }
    Ok((records, planted, feats))
}

/// Songs carry a key word in their lyrics and a song-specific tone; every query image
/// shows its song's colour pattern and its caption quotes the key word.
fn synth_retrieval(spec: &SyntheticSpec, dir: &Path, rng: &mut ChaCha8Rng) -> Result<Generated> {
    let grid = RETRIEVAL_GRID;
    let mut songs = Vec::new();
    for s in 0..spec.songs {
        let key = format!("key{s}");
        let n = rng.gen_range(6..=12);
        let mut words = filler_words(rng, spec.vocab_size, n);
        // the key recurs like a chorus title
        for _ in 0..KEY_REPEATS {
            let at = rng.gen_range(0..=words.len());
            words.insert(at, key.clone());
        }
        let lyrics = PathBuf::from(format!("lyrics/song{s:03}.txt"));
        write_text(&dir.join(&lyrics), &(words.join(" ") + "\n"))?;
        let hz = 300.0 + 9000.0 * s as f64 / spec.songs as f64;
        let clip = render_audio(rng, hz, 0.3 * spec.signal, spec.clip_seconds)?;
        let audio = PathBuf::from(format!("audio/song{s:03}.wav"));
        write_pcm16(&dir.join(&audio), &clip)?;
        let pattern: Vec<[f64; 3]> = (0..grid * grid)
            .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            .collect();
        songs.push((key, lyrics, audio, pattern));
    }
    let mut records = Vec::new();
    let mut planted = Vec::new();
    let mut feats = FeatureFile {
        dim: 3 * grid * grid,
        ids: Vec::new(),
        data: Vec::new(),
    };
    // interleave songs so every split covers a spread of songs
    let mut order: Vec<usize> = (0..spec.count).map(|q| q % spec.songs).collect();
    order[..spec.count * 8 / 10].shuffle(rng);
    for (q, &s) in order.iter().enumerate() {
        let id = format!("query{q:04}");
        let (key, lyrics, audio, pattern) = &songs[s];
        let size = spec.image_size;
        let img = render_image(rng, size, &|y, x| {
            let p = pattern[(y * grid / size) * grid + x * grid / size];
            p.map(|c| 0.5 + (c - 0.5) * spec.signal.min(1.0))
        });
        let image = PathBuf::from(format!("images/{id}.ppm"));
        write_bytes(&dir.join(&image), &img.encode())?;
        feats.ids.push(id.clone());
        feats.data.extend(grid_color_means(&img, grid).iter().map(|&x| x as f32));
        let caption = key.clone();
        records.push(Record {
            id: id.clone(),
            lyrics_path: lyrics.clone(),
            caption: Some(caption),
            audio_path: Some(audio.clone()),
            spectrogram_cache: None,
            image_path: Some(image),
            feature_id: Some(id.clone()),
            label: None,
            split: split_of(q, spec.count),
            song_id: Some(format!("song{s:03}")),
        });
        planted.push(Planted {
            id,
            text: 0,
            audio: 0,
            image: 0,
            song: s,
        });
    }
    Ok((records, planted, feats))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_planted(path: &Path) -> Result<Vec<Planted>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn compute_spectrogram(clip: &PcmClip, kind: SpecKind, params: &SpecParams) -> Result<Spectrogram> {
    let clip = if clip.sample_rate == SAMPLE_RATE {
        clip.clone()
    } else {
        resample_linear(clip, SAMPLE_RATE)
    };
    // only the first segment is modelled
    let n = SEGMENT_SECONDS * SAMPLE_RATE as usize;
    let clip = if clip.len() > n {
        PcmClip::new(clip.samples[..n].to_vec(), SAMPLE_RATE)?
    } else {
        clip
    };
    match kind {
        SpecKind::MelS => mel_spectrogram(&clip, params),
        SpecKind::Cqt => cqt(&clip, params),
    }
}

/// Audio of a record: the cache when present, else computed from PCM.
pub fn record_spectrogram(m: &Manifest, r: &Record, kind: SpecKind, params: &SpecParams) -> Result<Spectrogram> {
    if let Some(p) = &r.spectrogram_cache {
        let path = m.resolve(p);
        let s = Spectrogram::load(&path)?;
        if s.kind != kind {
            return Err(Error::format(&path, "kind", format!("cache holds {:?}, {kind:?} requested", s.kind)));
        }
        return Ok(s);
    }
    let p = r.audio_path.as_ref().expect("validated manifest has audio");
    compute_spectrogram(&load_pcm(&m.resolve(p))?, kind, params)
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub spec_kind: SpecKind,
    pub spec_params: SpecParams,
    pub image: ImagePathway,
    /// Feature file for precomputed image features; defaults to `features.jvec` beside the manifest.
    pub features: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct Song {
    pub key: String,
    pub lyrics: Vec<usize>,
    /// `[1 × bins × frames]`
    pub spec: Tensor,
}

#[derive(Clone, Debug)]
pub struct Item {
    pub id: String,
    pub song: usize,
    pub caption: Option<Vec<usize>>,
    pub image: ImageInput,
    pub label: Option<f64>,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub songs: Vec<Song>,
    pub items: Vec<Item>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> Vec<usize> {
        (0..self.items.len()).filter(|&i| self.items[i].split == s).collect()
    }
}

/// Loads every record. With `vocab` given (a trained model's vocabulary) unseen words map
/// to the unknown token; otherwise the vocabulary is built from the manifest in order.
pub fn load_dataset(m: &Manifest, opts: &LoadOptions, vocab: Option<Vocabulary>) -> Result<Dataset> {
    let frozen = vocab.is_some();
    let mut vocab = vocab.unwrap_or_default();
    let words = |text: &str, vocab: &mut Vocabulary| -> Vec<usize> {
        let toks = tokenize(text);
        if frozen {
            vocab.encode(&toks)
        } else {
            toks.iter().map(|t| vocab.insert(t)).collect()
        }
    };
    let features = match &opts.image {
        ImagePathway::Precomputed { feature_dim } => {
            let path = opts.features.clone().unwrap_or_else(|| m.root.join("features.jvec"));
            let f = FeatureFile::load(&path)?;
            if f.dim != *feature_dim {
                return Err(Error::Config(format!(
                    "feature file {} has dimension {}, model expects {feature_dim}",
                    path.display(),
                    f.dim
                )));
            }
            Some(f)
        }
        ImagePathway::Cnn { .. } => None,
    };
    let index: HashMap<&str, usize> = features.as_ref().map(FeatureFile::index).unwrap_or_default();
    let mut song_index: HashMap<String, usize> = HashMap::new();
    let mut songs = Vec::new();
    let mut items = Vec::new();
    for (line, r) in m.records.iter().enumerate() {
        let bad = |detail: String| Error::Manifest {
            path: m.root.join("manifest.jsonl"),
            line: line + 1,
            detail,
        };
        let song = match song_index.get(r.song_key()) {
            Some(&s) => s,
            None => {
                let path = m.resolve(&r.lyrics_path);
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let lyrics = words(&text, &mut vocab);
                if lyrics.is_empty() {
                    return Err(bad("lyrics are empty".into()));
                }
                let spec = record_spectrogram(m, r, opts.spec_kind, &opts.spec_params)?;
                songs.push(Song {
                    key: r.song_key().to_string(),
                    lyrics,
                    spec: spec.to_tensor(),
                });
                song_index.insert(r.song_key().to_string(), songs.len() - 1);
                songs.len() - 1
            }
        };
        let caption = r.caption.as_deref().map(|c| words(c, &mut vocab)).filter(|c| !c.is_empty());
        let image = match (&opts.image, &features) {
            (ImagePathway::Precomputed { .. }, Some(f)) => {
                let fid = r
                    .feature_id
                    .as_deref()
                    .ok_or_else(|| bad("precomputed image pathway needs feature_id on every record".into()))?;
                let i = *index
                    .get(fid)
                    .ok_or_else(|| bad(format!("feature id '{fid}' is not in the feature file")))?;
                ImageInput::Features(f.get(i))
            }
            (ImagePathway::Cnn { size, .. }, _) => {
                let p = r
                    .image_path
                    .as_ref()
                    .ok_or_else(|| bad("CNN image pathway needs image_path on every record".into()))?;
                load_image(&m.resolve(p), *size)?
            }
            _ => unreachable!("features are loaded for the precomputed pathway"),
        };
        items.push(Item {
            id: r.id.clone(),
            song,
            caption,
            image,
            label: r.label.map(f64::from),
            split: r.split,
        });
    }
    Ok(Dataset { vocab, songs, items })
}

/// Writes a spectrogram cache per song and returns the manifest pointing at them.
/// Writes one cache per song into `out_dir` and returns a manifest rooted there: caches are
/// named relative to `out_dir`, other media by absolute path. A `features.jvec` beside the source
/// manifest is copied along so the precomputed pathway finds it.
pub fn preprocess(m: &Manifest, kind: SpecKind, params: &SpecParams, out_dir: &Path) -> Result<Manifest> {
    mkdir(out_dir)?;
    let mut done: HashMap<String, PathBuf> = HashMap::new();
    let mut records = Vec::with_capacity(m.records.len());
    let absolute = |p: &Path| fs::canonicalize(m.resolve(p)).map_err(|e| Error::io(p, e));
    for r in &m.records {
        let cache = match done.get(r.song_key()) {
            Some(p) => p.clone(),
            None => {
                let s = record_spectrogram(m, r, kind, params)?;
                let name = PathBuf::from(format!("{}.{}.jspc", r.song_key(), kind.name()));
                s.save(&out_dir.join(&name))?;
                done.insert(r.song_key().to_string(), name.clone());
                name
            }
        };
        let mut r = r.clone();
        r.spectrogram_cache = Some(cache);
        r.audio_path = None;
        r.lyrics_path = absolute(&r.lyrics_path)?;
        if let Some(p) = &r.image_path {
            r.image_path = Some(absolute(p)?);
        }
        records.push(r);
    }
    let features = m.root.join("features.jvec");
    if features.is_file() {
        for (from, to) in [
            (features.clone(), out_dir.join("features.jvec")),
            (FeatureFile::ids_path(&features), FeatureFile::ids_path(&out_dir.join("features.jvec"))),
        ] {
            if from != to {
                fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
            }
        }
    }
    Ok(Manifest {
        root: out_dir.to_path_buf(),
        records,
    })
}
