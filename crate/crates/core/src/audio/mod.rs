//! PCM input, segmentation and time-frequency transforms.

mod spectrogram;

pub use spectrogram::{
    cqt, cqt_center_frequencies, hann, mel_filterbank, mel_spectrogram, power_to_db, stft, DbReference, SpecKind,
    SpecParams, Spectrogram, BINS, CQT_BINS_PER_OCTAVE, CQT_F_MIN, DB_FLOOR, HOP, N_FFT,
};

use std::path::Path;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 22050;
pub const SEGMENT_SECONDS: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct PcmClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl PcmClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Contract("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "pcm",
                detail: format!("sample {i} is not finite"),
            });
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Consecutive fixed-length segments; the last one is zero-padded to full length.
pub fn segment_audio(clip: &PcmClip, seconds: usize) -> Result<Vec<PcmClip>> {
    if clip.is_empty() {
        return Err(Error::EmptyInput("segment_audio"));
    }
    let n = seconds * clip.sample_rate as usize;
    if n == 0 {
        return Err(Error::Contract("segment length must be positive".into()));
    }
    Ok(clip
        .samples
        .chunks(n)
        .map(|c| {
            let mut s = c.to_vec();
            s.resize(n, 0.0);
            PcmClip {
                samples: s,
                sample_rate: clip.sample_rate,
            }
        })
        .collect())
}

/// Linear-interpolation resampling. Lossy: no anti-alias filter is applied.
pub fn resample_linear(clip: &PcmClip, target: u32) -> PcmClip {
    if clip.sample_rate == target || clip.is_empty() {
        return PcmClip {
            samples: clip.samples.clone(),
            sample_rate: target,
        };
    }
    let src = clip.sample_rate as u64;
    let out_len = ((clip.len() as u64 * target as u64 + src / 2) / src).max(1) as usize;
    let step = src as f64 / target as f64;
    let last = clip.len() - 1;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * step;
            let j = (pos.floor() as usize).min(last);
            let frac = pos - j as f64;
            let a = clip.samples[j];
            let b = clip.samples[(j + 1).min(last)];
            a + (b - a) * frac
        })
        .collect();
    PcmClip {
        samples,
        sample_rate: target,
    }
}

/// Reads 16-bit PCM WAV, averages stereo to mono, scales by 1/32768 and
/// resamples to 22050 Hz.
pub fn load_pcm(path: &Path) -> Result<PcmClip> {
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(path, "audio_format", "only integer PCM is supported"));
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::format(
            path,
            "bits_per_sample",
            format!("expected 16, found {}", spec.bits_per_sample),
        ));
    }
    let channels = spec.channels as usize;
    if channels == 0 || channels > 2 {
        return Err(Error::format(path, "channels", format!("expected 1 or 2, found {channels}")));
    }
    let raw: Vec<i16> = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| wav_error(path, e))?;
    let samples = raw
        .chunks(channels)
        .map(|fr| fr.iter().map(|&s| s as f64 / 32768.0).sum::<f64>() / channels as f64)
        .collect();
    let clip = PcmClip::new(samples, spec.sample_rate)?;
    Ok(resample_linear(&clip, SAMPLE_RATE))
}

/// Writes mono 16-bit PCM, clipping to the representable range.
pub fn write_pcm16(path: &Path, clip: &PcmClip) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &clip.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(|e| wav_error(path, e))?;
    }
    w.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(m) => Error::format(path, "header", m),
        hound::Error::Unsupported => Error::format(path, "audio_format", "unsupported codec"),
        other => Error::format(path, "header", other.to_string()),
    }
}
