//! The synthetic sentiment corpus carries one bit per modality in its raw media, and the
//! label needs all three: no single modality and no additive score reaches the joint ceiling.

use std::f64::consts::TAU;
use std::fs;

use jtav::audio::{load_pcm, SpecKind, SpecParams};
use jtav::corpus::{
    generate_synthetic, load_dataset, load_manifest, load_planted, planted_label, Dataset, LoadOptions, Planted,
    Requirement, Split, SynthTask, SyntheticSpec, FEATURE_GRID, MARKER_BANDS,
};
use jtav::image::{ImageInput, ImagePathway, Ppm};

/// Fraction of (positive, negative) pairs ordered correctly, ties counted half.
fn auc_by_pairs(labels: &[u8], scores: &[f64]) -> f64 {
    let (mut good, mut total) = (0.0, 0.0);
    for (i, &yi) in labels.iter().enumerate() {
        for (j, &yj) in labels.iter().enumerate() {
            if yi == 1 && yj == 0 {
                total += 1.0;
                if scores[i] > scores[j] {
                    good += 1.0;
                } else if scores[i] == scores[j] {
                    good += 0.5;
                }
            }
        }
    }
    good / total
}

/// Power of a plain DFT at `hz`.
fn tone_power(x: &[f64], sr: f64, hz: f64) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (n, &s) in x.iter().enumerate() {
        let w = TAU * hz * n as f64 / sr;
        re += s * w.cos();
        im -= s * w.sin();
    }
    re * re + im * im
}

fn band_peak(x: &[f64], sr: f64, (lo, hi): (f64, f64)) -> f64 {
    let steps = ((hi - lo) / 5.0) as usize;
    (0..=steps)
        .map(|k| tone_power(x, sr, lo + 5.0 * k as f64))
        .fold(0.0, f64::max)
}

fn corpus(count: usize) -> (tempfile::TempDir, Vec<Planted>) {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        task: SynthTask::Sentiment,
        count,
        clip_seconds: 1,
        seed: 11,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, dir.path()).unwrap();
    let planted = load_planted(&dir.path().join("planted.jsonl")).unwrap();
    (dir, planted)
}

#[test]
fn media_encode_the_planted_bits() {
    let (dir, planted) = corpus(40);
    let manifest = fs::read_to_string(dir.path().join("manifest.jsonl")).unwrap();
    for (p, line) in planted.iter().zip(manifest.lines()) {
        let rec: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(rec["label"].as_u64().unwrap() as u8, planted_label(p.text, p.audio, p.image));

        let lyrics = fs::read_to_string(dir.path().join(format!("lyrics/{}.txt", p.id))).unwrap();
        let marks: Vec<&str> = lyrics.split_whitespace().filter(|w| w.starts_with("mark")).collect();
        assert_eq!(marks, [format!("mark{}", p.text)]);

        let clip = load_pcm(&dir.path().join(format!("audio/{}.wav", p.id))).unwrap();
        let window = &clip.samples[..4096];
        let sr = clip.sample_rate as f64;
        let low = band_peak(window, sr, MARKER_BANDS[0]);
        let high = band_peak(window, sr, MARKER_BANDS[1]);
        assert_eq!((high > low) as u8, p.audio, "{}: {low} vs {high}", p.id);

        let bytes = fs::read(dir.path().join(format!("images/{}.ppm", p.id))).unwrap();
        let img = Ppm::decode(&bytes, dir.path()).unwrap();
        let mean = |ch: usize| img.rgb.iter().skip(ch).step_by(3).map(|&b| b as f64).sum::<f64>();
        assert_eq!((mean(2) > mean(0)) as u8, p.image, "{}", p.id);
    }
}

#[test]
fn single_and_additive_scores_stay_below_the_joint_ceiling() {
    let (_dir, planted) = corpus(600);
    let labels: Vec<u8> = planted.iter().map(|p| planted_label(p.text, p.audio, p.image)).collect();
    let bits = |p: &Planted| [p.text as f64, p.audio as f64, p.image as f64];
    let best = |score: &dyn Fn(&Planted) -> f64| {
        let s: Vec<f64> = planted.iter().map(score).collect();
        let auc = auc_by_pairs(&labels, &s);
        auc.max(1.0 - auc)
    };

    // one modality: P(y=1 | t) is 1/4 or 3/4, so the text bit ranks at most 3/4 of pairs
    let text = best(&|p| bits(p)[0]);
    assert!((text - 0.75).abs() < 0.06, "text {text}");
    for m in 1..3 {
        let auc = best(&|p| bits(p)[m]);
        assert!(auc < 0.58, "modality {m}: {auc}");
    }

    // any weighted sum of the three bits
    let mut additive: f64 = 0.0;
    for w0 in -3..=3 {
        for w1 in -3..=3 {
            for w2 in -3..=3 {
                let w = [w0 as f64, w1 as f64, w2 as f64];
                additive = additive.max(best(&|p| {
                    let b = bits(p);
                    w[0] * b[0] + w[1] * b[1] + w[2] * b[2]
                }));
            }
        }
    }
    assert!(additive < 0.80, "additive {additive}");

    // pairwise products are enough to separate the rule
    let joint = best(&|p| {
        let [t, a, v] = bits(p);
        -1.0 + 2.0 * (t + a + v) - 4.0 * t * a - 4.0 * t * v - a * v
    });
    assert_eq!(joint, 1.0);
}

/// Logistic regression on standardized features, full-batch gradient descent.
fn fit_probe(x: &[Vec<f64>], y: &[f64]) -> impl Fn(&[f64]) -> f64 {
    let d = x[0].len();
    let n = x.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n).sqrt().max(1e-9))
        .collect();
    let z = move |r: &[f64]| -> Vec<f64> { (0..d).map(|j| (r[j] - mean[j]) / sd[j]).collect() };
    let xs: Vec<Vec<f64>> = x.iter().map(|r| z(r)).collect();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..500 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (r, &t) in xs.iter().zip(y) {
            let p = 1.0 / (1.0 + (-(b + r.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>())).exp());
            for j in 0..d {
                gw[j] += (p - t) * r[j] / n;
            }
            gb += (p - t) / n;
        }
        for j in 0..d {
            w[j] -= 0.5 * (gw[j] + 1e-3 * w[j]);
        }
        b -= 0.5 * gb;
    }
    move |r: &[f64]| b + z(r).iter().zip(&w).map(|(a, c)| a * c).sum::<f64>()
}

fn modality_features(data: &Dataset, i: usize, modality: usize) -> Vec<f64> {
    let item = &data.items[i];
    let song = &data.songs[item.song];
    match modality {
        0 => {
            let mut bag = vec![0.0; data.vocab.len()];
            for &w in &song.lyrics {
                bag[w] += 1.0;
            }
            bag
        }
        1 => {
            let s = song.spec.shape();
            let (bins, frames) = (s[1], s[2]);
            let v = song.spec.data();
            (0..bins).map(|b| v[b * frames..(b + 1) * frames].iter().sum::<f64>() / frames as f64).collect()
        }
        _ => match &item.image {
            ImageInput::Features(f) => f.clone(),
            ImageInput::Pixels(_) => unreachable!("precomputed pathway"),
        },
    }
}

#[test]
fn linear_probes_on_raw_features_stay_below_the_joint_ceiling() {
    let (dir, planted) = corpus(600);
    let m = load_manifest(&dir.path().join("manifest.jsonl"), Requirement::Labels).unwrap();
    let opts = LoadOptions {
        spec_kind: SpecKind::MelS,
        spec_params: SpecParams::default(),
        image: ImagePathway::Precomputed { feature_dim: 3 * FEATURE_GRID * FEATURE_GRID },
        features: None,
    };
    let data = load_dataset(&m, &opts, None).unwrap();
    let (train, test) = (data.split(Split::Train), data.split(Split::Test));
    let labels = |idx: &[usize]| idx.iter().map(|&i| data.items[i].label.unwrap()).collect::<Vec<f64>>();
    let test_y: Vec<u8> = labels(&test).iter().map(|&y| y as u8).collect();

    // brute-force ceilings on the same test items: the best any function of one planted bit can do
    let bit_ceiling = |m: usize| {
        let s: Vec<f64> = test
            .iter()
            .map(|&i| {
                let p = &planted[i];
                let bit = [p.text, p.audio, p.image][m];
                // P(y = 1 | bit) under the rule with uniform bits; a and v alone say nothing
                match (m, bit) {
                    (0, 0) => 0.75,
                    (0, _) => 0.25,
                    _ => 0.5,
                }
            })
            .collect();
        let auc = auc_by_pairs(&test_y, &s);
        auc.max(1.0 - auc)
    };
    let joint: Vec<f64> = test
        .iter()
        .map(|&i| planted_label(planted[i].text, planted[i].audio, planted[i].image) as f64)
        .collect();
    let joint_ceiling = auc_by_pairs(&test_y, &joint);
    assert_eq!(joint_ceiling, 1.0);

    for modality in 0..3 {
        let x: Vec<Vec<f64>> = train.iter().map(|&i| modality_features(&data, i, modality)).collect();
        let probe = fit_probe(&x, &labels(&train));
        let scores: Vec<f64> = test.iter().map(|&i| probe(&modality_features(&data, i, modality))).collect();
        let auc = auc_by_pairs(&test_y, &scores);
        let ceiling = bit_ceiling(modality);
        assert!(auc < joint_ceiling, "modality {modality}: probe {auc}");
        assert!(auc < ceiling + 0.15, "modality {modality}: probe {auc} vs single-bit ceiling {ceiling}");
    }
}
