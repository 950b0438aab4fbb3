use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::PcmClip;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const N_FFT: usize = 2048;
pub const HOP: usize = 1024;
pub const BINS: usize = 96;
pub const DB_FLOOR: f64 = -80.0;
/// C1.
pub const CQT_F_MIN: f64 = 32.703;
pub const CQT_BINS_PER_OCTAVE: usize = 12;
const AMIN: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SpecKind {
    #[serde(rename = "mels")]
    MelS,
    #[serde(rename = "cqt")]
    Cqt,
}

impl SpecKind {
    pub fn code(self) -> u8 {
        match self {
            SpecKind::MelS => 0,
            SpecKind::Cqt => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SpecKind::MelS => "mels",
            SpecKind::Cqt => "cqt",
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(SpecKind::MelS),
            1 => Some(SpecKind::Cqt),
            _ => None,
        }
    }
}

impl std::str::FromStr for SpecKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mels" | "mel" => Ok(SpecKind::MelS),
            "cqt" => Ok(SpecKind::Cqt),
            other => Err(Error::Config(format!("unknown spectrogram kind '{other}'"))),
        }
    }
}

/// Power that maps to 0 dB.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum DbReference {
    /// Fixed reference power; levels keep their absolute scale.
    Absolute(f64),
    /// The loudest cell of each clip maps to 0 dB.
    ClipMax,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecParams {
    pub n_fft: usize,
    pub hop: usize,
    pub bins: usize,
    pub reference: DbReference,
}

impl Default for SpecParams {
    fn default() -> Self {
        Self {
            n_fft: N_FFT,
            hop: HOP,
            bins: BINS,
            reference: DbReference::Absolute(1.0),
        }
    }
}

/// Log-power time-frequency matrix, `bins × frames`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    pub kind: SpecKind,
    pub bins: usize,
    pub frames: usize,
    pub values: Vec<f64>,
}

impl Spectrogram {
    pub fn at(&self, bin: usize, frame: usize) -> f64 {
        self.values[bin * self.frames + frame]
    }

    /// Single-channel image `[1 × bins × frames]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![1, self.bins, self.frames], self.values.clone())
    }

    /// Column of the bin with the largest mean level over time.
    pub fn mean_argmax_bin(&self) -> usize {
        (0..self.bins)
            .map(|b| {
                let row = &self.values[b * self.frames..(b + 1) * self.frames];
                row.iter().sum::<f64>() / self.frames as f64
            })
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| if v > best.1 { (i, v) } else { best })
            .0
    }

    /// `JSPC` cache: version u32, kind u8, bins u32, frames u32, then f32 values, little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(17 + 4 * self.values.len());
        out.extend_from_slice(b"JSPC");
        out.extend_from_slice(&1u32.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&(self.bins as u32).to_le_bytes());
        out.extend_from_slice(&(self.frames as u32).to_le_bytes());
        for &v in &self.values {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(buf: &[u8], origin: &Path) -> Result<Self> {
        let field = |name, detail: &str| Error::format(origin, name, detail);
        if buf.len() < 17 {
            return Err(field("header", "truncated"));
        }
        if &buf[..4] != b"JSPC" {
            return Err(field("magic", "expected JSPC"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        if u32_at(4) != 1 {
            return Err(field("version", "unsupported version"));
        }
        let kind = SpecKind::from_code(buf[8]).ok_or_else(|| field("kind", "expected 0 or 1"))?;
        let (bins, frames) = (u32_at(9) as usize, u32_at(13) as usize);
        if bins == 0 || frames == 0 {
            return Err(field("bins", "dimensions must be positive"));
        }
        let body = &buf[17..];
        if body.len() != bins * frames * 4 {
            return Err(field("data", "length does not match bins × frames"));
        }
        let values = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok(Self {
            kind,
            bins,
            frames,
            values,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&buf, path)
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

/// Index into a signal of length `len` after mirror (reflect) extension on both sides.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let j = i.rem_euclid(period);
    if j >= len as isize {
        (period - j) as usize
    } else {
        j as usize
    }
}

fn frame_count(len: usize, hop: usize) -> usize {
    1 + len / hop
}

/// Centered, Hann-windowed STFT. Returns `frames × (n_fft/2 + 1)` complex values.
pub fn stft(samples: &[f64], n_fft: usize, hop: usize) -> Result<Vec<Vec<Complex<f64>>>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("stft"));
    }
    let window = hann(n_fft);
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let half = (n_fft / 2) as isize;
    let frames = frame_count(samples.len(), hop);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let start = (t * hop) as isize - half;
        for (n, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(samples[reflect(start + n as isize, samples.len())] * window[n], 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..n_fft / 2 + 1].to_vec());
    }
    Ok(out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// HTK triangular filters spanning 0 Hz to Nyquist, `n_mels × (n_fft/2 + 1)` row-major,
/// with the filter center frequencies.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> (Vec<f64>, Vec<f64>) {
    let n_bins = n_fft / 2 + 1;
    let top = hz_to_mel(sample_rate as f64 / 2.0);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut w = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let v = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            w[m * n_bins + k] = v;
        }
    }
    (w, edges[1..=n_mels].to_vec())
}

/// `10·log10(power / reference)` floored at −80 dB.
pub fn power_to_db(power: &[f64], reference: DbReference) -> Vec<f64> {
    let r = match reference {
        DbReference::Absolute(r) => r,
        DbReference::ClipMax => power.iter().cloned().fold(AMIN, f64::max),
    };
    let offset = 10.0 * r.max(AMIN).log10();
    power
        .iter()
        .map(|&p| (10.0 * p.max(AMIN).log10() - offset).max(DB_FLOOR))
        .collect()
}

pub fn mel_spectrogram(clip: &PcmClip, params: &SpecParams) -> Result<Spectrogram> {
    let frames = stft(&clip.samples, params.n_fft, params.hop)?;
    let n_bins = params.n_fft / 2 + 1;
    let (fb, _) = mel_filterbank(clip.sample_rate, params.n_fft, params.bins);
    let t = frames.len();
    let mut power = vec![0.0; params.bins * t];
    for (j, fr) in frames.iter().enumerate() {
        let p: Vec<f64> = fr.iter().map(|c| c.norm_sqr()).collect();
        for m in 0..params.bins {
            let row = &fb[m * n_bins..(m + 1) * n_bins];
            power[m * t + j] = row.iter().zip(&p).map(|(a, b)| a * b).sum();
        }
    }
    Ok(Spectrogram {
        kind: SpecKind::MelS,
        bins: params.bins,
        frames: t,
        values: power_to_db(&power, params.reference),
    })
}

/// `f_k = f_min · 2^(k/12)`.
pub fn cqt_center_frequencies(bins: usize) -> Vec<f64> {
    (0..bins)
        .map(|k| CQT_F_MIN * 2f64.powf(k as f64 / CQT_BINS_PER_OCTAVE as f64))
        .collect()
}

/// Constant-Q transform by direct per-bin windowed-DFT kernels centred on each hop.
pub fn cqt(clip: &PcmClip, params: &SpecParams) -> Result<Spectrogram> {
    if clip.is_empty() {
        return Err(Error::EmptyInput("cqt"));
    }
    let sr = clip.sample_rate as f64;
    let q = 1.0 / (2f64.powf(1.0 / CQT_BINS_PER_OCTAVE as f64) - 1.0);
    let freqs = cqt_center_frequencies(params.bins);
    if let Some(f) = freqs.last().filter(|&&f| f >= sr / 2.0) {
        return Err(Error::Domain {
            op: "cqt",
            detail: format!("top bin {f:.1} Hz exceeds Nyquist"),
        });
    }
    let len = clip.len();
    let t = frame_count(len, params.hop);
    let kernels: Vec<Vec<Complex<f64>>> = freqs
        .iter()
        .map(|&f| {
            let n = ((q * sr / f).ceil() as usize).min(len).max(1);
            let w = hann(n);
            let norm: f64 = w.iter().sum::<f64>().max(f64::MIN_POSITIVE);
            (0..n)
                .map(|i| {
                    let ph = -2.0 * PI * f * i as f64 / sr;
                    Complex::new(ph.cos(), ph.sin()) * (w[i] / norm)
                })
                .collect()
        })
        .collect();
    let pad = kernels.iter().map(Vec::len).max().unwrap_or(1) / 2 + 1;
    let padded: Vec<f64> = (-(pad as isize)..(len + pad) as isize)
        .map(|i| clip.samples[reflect(i, len)])
        .collect();
    let mut power = vec![0.0; params.bins * t];
    for (k, kern) in kernels.iter().enumerate() {
        let half = kern.len() / 2;
        for j in 0..t {
            let start = pad + j * params.hop - half;
            let seg = &padded[start..start + kern.len()];
            let acc = kern
                .iter()
                .zip(seg)
                .fold(Complex::new(0.0, 0.0), |a, (c, &x)| a + c * x);
            power[k * t + j] = acc.norm_sqr();
        }
    }
    Ok(Spectrogram {
        kind: SpecKind::Cqt,
        bins: params.bins,
        frames: t,
        values: power_to_db(&power, params.reference),
    })
}
