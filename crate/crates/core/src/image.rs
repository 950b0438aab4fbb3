//! Visual features: a small conv net over RGB images, or a dense adapter over
//! precomputed feature vectors. Also the PPM, raw-tensor and feature-file formats.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{ConvBnPool, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 224;

#[derive(Clone, Debug, PartialEq)]
pub enum ImageInput {
    /// `[3 × H × W]` in `[0, 1]`.
    Pixels(Tensor),
    Features(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ImagePathway {
    Cnn { size: usize, channels: Vec<usize>, pools: Vec<usize> },
    Precomputed { feature_dim: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageConfig {
    pub pathway: ImagePathway,
    pub out_dim: usize,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self {
            pathway: ImagePathway::Cnn {
                size: IMAGE_SIZE,
                channels: vec![16, 32, 64],
                pools: vec![4, 4, 2],
            },
            out_dim: 100,
        }
    }
}

#[derive(Clone, Debug)]
pub enum ImageEncoder {
    Cnn { size: usize, stages: Vec<ConvBnPool>, fc: Linear },
    Precomputed { fc: Linear },
}

impl ImageEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: &ImageConfig, rng: &mut R) -> Result<Self> {
        match &config.pathway {
            ImagePathway::Cnn { size, channels, pools } => {
                if channels.is_empty() || channels.len() != pools.len() || *size == 0 {
                    return Err(Error::Config("image CNN needs one pool per stage".into()));
                }
                let mut c_in = 3;
                let stages = channels
                    .iter()
                    .zip(pools)
                    .enumerate()
                    .map(|(i, (&c, &p))| {
                        let s = ConvBnPool::new(store, &format!("{name}.s{}", i + 1), c_in, c, 3, (p, p), rng);
                        c_in = c;
                        s
                    })
                    .collect();
                let fc = Linear::new(store, &format!("{name}.fc"), c_in, config.out_dim, rng);
                Ok(ImageEncoder::Cnn { size: *size, stages, fc })
            }
            ImagePathway::Precomputed { feature_dim } => Ok(ImageEncoder::Precomputed {
                fc: Linear::new(store, &format!("{name}.fc"), *feature_dim, config.out_dim, rng),
            }),
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            ImageEncoder::Cnn { fc, .. } | ImageEncoder::Precomputed { fc } => fc.out_dim,
        }
    }

    pub fn encode(&self, g: &mut Graph<'_>, input: &ImageInput) -> Result<Var> {
        match (self, input) {
            (ImageEncoder::Cnn { size, stages, fc }, ImageInput::Pixels(px)) => {
                if px.shape() != [3, *size, *size] {
                    return Err(Error::shape("encode_image", px.shape(), &[3, *size, *size]));
                }
                let mut x = g.constant(px.clone());
                for s in stages {
                    x = s.forward(g, x)?;
                }
                let sh = g.shape(x).to_vec();
                let flat = g.reshape(x, &[sh[0], sh[1] * sh[2]])?;
                let cols = g.transpose(flat)?;
                let pooled = g.mean_rows(cols)?;
                fc.forward(g, pooled)
            }
            (ImageEncoder::Precomputed { fc }, ImageInput::Features(f)) => {
                if f.len() != fc.in_dim {
                    return Err(Error::shape("encode_image", &[f.len()], &[fc.in_dim]));
                }
                let x = g.constant(Tensor::vector(f.clone()));
                fc.forward(g, x)
            }
            (ImageEncoder::Cnn { .. }, ImageInput::Features(_)) => {
                Err(Error::Contract("pixel encoder received a feature vector".into()))
            }
            (ImageEncoder::Precomputed { .. }, ImageInput::Pixels(_)) => {
                Err(Error::Contract("feature encoder received pixels".into()))
            }
        }
    }
}

/// Binary PPM (P6, maxval 255) as `[3 × h × w]` bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
}

impl Ppm {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn decode(buf: &[u8], origin: &Path) -> Result<Self> {
        let mut pos = 0;
        let mut token = |name: &'static str| -> Result<String> {
            loop {
                while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < buf.len() && buf[pos] == b'#' {
                    while pos < buf.len() && buf[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::format(origin, name, "missing"));
            }
            Ok(String::from_utf8_lossy(&buf[start..pos]).into_owned())
        };
        if token("magic")? != "P6" {
            return Err(Error::format(origin, "magic", "expected P6"));
        }
        let num = |s: String, name| s.parse::<usize>().map_err(|_| Error::format(origin, name, "not a number"));
        let width = num(token("width")?, "width")?;
        let height = num(token("height")?, "height")?;
        let maxval = num(token("maxval")?, "maxval")?;
        if maxval != 255 {
            return Err(Error::format(origin, "maxval", format!("expected 255, found {maxval}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::format(origin, "width", "dimensions must be positive"));
        }
        // a single whitespace byte separates the header from the raster
        let data = &buf[(pos + 1).min(buf.len())..];
        let n = width * height * 3;
        if data.len() < n {
            return Err(Error::format(origin, "raster", "truncated"));
        }
        Ok(Self {
            width,
            height,
            rgb: data[..n].to_vec(),
        })
    }

    /// Channel-planar `[3 × h × w]` scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        let mut d = vec![0.0; 3 * plane];
        for (i, px) in self.rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                d[c * plane + i] = px[c] as f64 / 255.0;
            }
        }
        Tensor::from_parts(vec![3, self.height, self.width], d)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::shape("ppm", s, &[3, 0, 0]));
        }
        let (h, w) = (s[1], s[2]);
        let plane = h * w;
        let mut rgb = vec![0u8; 3 * plane];
        for i in 0..plane {
            for c in 0..3 {
                rgb[i * 3 + c] = (t.data()[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        Ok(Self { width: w, height: h, rgb })
    }
}

/// Raw tensor cache: `JTEN`, version u32, rank u32, dims u64, f64 values, little-endian.
pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = b"JTEN".to_vec();
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_tensor(buf: &[u8], origin: &Path) -> Result<Tensor> {
    let bad = |f, d: &str| Error::format(origin, f, d);
    if buf.len() < 12 || &buf[..4] != b"JTEN" {
        return Err(bad("magic", "expected JTEN"));
    }
    if u32::from_le_bytes(buf[4..8].try_into().unwrap()) != 1 {
        return Err(bad("version", "unsupported version"));
    }
    let rank = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let mut pos = 12;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = buf.get(pos..pos + 8).ok_or_else(|| bad("dims", "truncated"))?;
        dims.push(u64::from_le_bytes(b.try_into().unwrap()) as usize);
        pos += 8;
    }
    let n: usize = dims.iter().product();
    let body = buf.get(pos..pos + 8 * n).ok_or_else(|| bad("data", "truncated"))?;
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data).map_err(|e| bad("dims", &e.to_string()))
}

/// Value of `[c × h × w]` at fractional position `(y, x)`, clamped to the border.
pub fn sample_bilinear(img: &Tensor, c: usize, y: f64, x: f64) -> f64 {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| img.data()[(c * h + yy) * w + xx];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear resize with half-pixel centres: `src = (dst + 0.5)·in/out − 0.5`.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::shape("resize", s, &[0, out_h, out_w]));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    let (sy, sx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let mut d = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for y in 0..out_h {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..out_w {
                d.push(sample_bilinear(img, ch, fy, (x as f64 + 0.5) * sx - 0.5));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], d)
}

/// Loads a P6 PPM or a `JTEN` tensor cache and resizes to `size × size`.
pub fn load_image(path: &Path, size: usize) -> Result<ImageInput> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let t = if buf.starts_with(b"P6") {
        Ppm::decode(&buf, path)?.to_tensor()
    } else if buf.starts_with(b"JTEN") {
        let t = decode_tensor(&buf, path)?;
        if t.rank() != 3 || t.shape()[0] != 3 {
            return Err(Error::format(path, "dims", format!("expected 3×h×w, found {:?}", t.shape())));
        }
        t
    } else {
        return Err(Error::format(path, "magic", "expected a P6 PPM or JTEN tensor"));
    };
    Ok(ImageInput::Pixels(resize_bilinear(&t, size, size)?))
}

/// Precomputed feature vectors (`JVEC`) with ids in a sibling `.ids` file.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureFile {
    pub dim: usize,
    pub ids: Vec<String>,
    pub data: Vec<f32>,
}

impl FeatureFile {
    pub fn ids_path(path: &Path) -> PathBuf {
        path.with_extension("ids")
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = b"JVEC".to_vec();
        out.extend_from_slice(&1u32.to_le_bytes());
        out.extend_from_slice(&(self.ids.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))?;
        let ids_path = Self::ids_path(path);
        let mut text = self.ids.join("\n");
        text.push('\n');
        fs::write(&ids_path, text).map_err(|e| Error::io(ids_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |f, d: &str| Error::format(path, f, d);
        if buf.len() < 20 || &buf[..4] != b"JVEC" {
            return Err(bad("magic", "expected JVEC"));
        }
        if u32::from_le_bytes(buf[4..8].try_into().unwrap()) != 1 {
            return Err(bad("version", "unsupported version"));
        }
        let count = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(buf[16..20].try_into().unwrap()) as usize;
        let body = &buf[20..];
        if body.len() != count * dim * 4 {
            return Err(bad("data", "length does not match count × dim"));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let ids_path = Self::ids_path(path);
        let ids: Vec<String> = fs::read_to_string(&ids_path)
            .map_err(|e| Error::io(&ids_path, e))?
            .lines()
            .map(str::to_string)
            .collect();
        if ids.len() != count {
            return Err(Error::format(&ids_path, "count", format!("{} ids for {count} vectors", ids.len())));
        }
        Ok(Self { dim, ids, data })
    }

    pub fn get(&self, i: usize) -> Vec<f64> {
        self.data[i * self.dim..(i + 1) * self.dim].iter().map(|&v| v as f64).collect()
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_params;
    use crate::graph::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cnn() -> ImageConfig {
        ImageConfig {
            pathway: ImagePathway::Cnn {
                size: 16,
                channels: vec![2, 3, 4],
                pools: vec![2, 2, 2],
            },
            out_dim: 5,
        }
    }

    #[test]
    fn both_pathways_emit_configured_dimension() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cnn = ImageEncoder::new(&mut store, "img", &ImageConfig::default(), &mut rng).unwrap();
        let pre = ImageEncoder::new(
            &mut store,
            "pre",
            &ImageConfig {
                pathway: ImagePathway::Precomputed { feature_dim: 48 },
                out_dim: 100,
            },
            &mut rng,
        )
        .unwrap();
        let mut g = Graph::new(&store, Mode::Train);
        let v = cnn
            .encode(&mut g, &ImageInput::Pixels(Tensor::uniform(&[3, 224, 224], 0.0, 1.0, &mut rng)))
            .unwrap();
        assert_eq!(g.shape(v), &[100]);
        let v = pre.encode(&mut g, &ImageInput::Features(vec![0.1; 48])).unwrap();
        assert_eq!(g.shape(v), &[100]);
        assert!(pre.encode(&mut g, &ImageInput::Features(vec![0.1; 47])).is_err());
        assert!(cnn.encode(&mut g, &ImageInput::Pixels(Tensor::zeros(&[3, 16, 16]))).is_err());
        assert!(cnn.encode(&mut g, &ImageInput::Features(vec![0.0; 48])).is_err());
    }

    #[test]
    fn zero_image_eval_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(&mut store, "img", &toy_cnn(), &mut rng).unwrap();
        let warm = Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let ups = {
            let mut g = Graph::new(&store, Mode::Train);
            enc.encode(&mut g, &ImageInput::Pixels(warm)).unwrap();
            g.take_norm_updates()
        };
        store.apply_norm_updates(&ups);
        let zero = ImageInput::Pixels(Tensor::zeros(&[3, 16, 16]));
        let run = || {
            let mut g = Graph::new(&store, Mode::Eval);
            let v = enc.encode(&mut g, &zero).unwrap();
            g.value(v).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pixel_pathway_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let enc = ImageEncoder::new(&mut store, "img", &toy_cnn(), &mut rng).unwrap();
        let img = ImageInput::Pixels(Tensor::uniform(&[3, 16, 16], 0.0, 1.0, &mut rng));
        let rep = check_params(&mut store, |g| {
            let v = enc.encode(g, &img)?;
            let w = g.constant(Tensor::vector(vec![1.0, -0.5, 0.3, 0.9, -1.2]));
            g.dot(v, w)
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }

    #[test]
    fn ppm_round_trip_with_comment() {
        let img = Ppm {
            width: 2,
            height: 1,
            rgb: vec![255, 0, 51, 0, 255, 102],
        };
        let mut bytes = b"P6\n# made by hand\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&img.rgb);
        assert_eq!(Ppm::decode(&bytes, Path::new("x")).unwrap(), img);
        assert_eq!(Ppm::decode(&img.encode(), Path::new("x")).unwrap(), img);
        let t = img.to_tensor();
        assert_eq!(t.shape(), &[3, 1, 2]);
        assert_eq!(t.at(&[2, 0, 0]), 0.2);
        let err = Ppm::decode(b"P6\n2 1\n65535\n", Path::new("x")).unwrap_err();
        assert!(err.to_string().contains("maxval"));
    }

    #[test]
    fn resize_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::uniform(&[3, 5, 7], 0.0, 1.0, &mut rng);
        assert_eq!(resize_bilinear(&t, 5, 7).unwrap(), t);
        let c = Tensor::full(&[3, 448, 448], 0.4);
        let r = resize_bilinear(&c, 224, 224).unwrap();
        assert!(r.data().iter().all(|&v| (v - 0.4).abs() < 1e-15));

        // checkerboard [[0,1],[1,0]]: interior samples sit at source offsets 0.25 / 0.75,
        // giving 0.25·0.75 + 0.75·0.25 = 0.375 and 0.25² + 0.75² = 0.625
        let cb = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let up = resize_bilinear(&cb, 4, 4).unwrap();
        assert_eq!(up.at(&[0, 1, 1]), 0.375);
        assert_eq!(up.at(&[0, 1, 2]), 0.625);
        assert_eq!(up.at(&[0, 2, 1]), 0.625);
        assert_eq!(up.at(&[0, 2, 2]), 0.375);
        assert_eq!(sample_bilinear(&cb, 0, 0.5, 0.5), 0.5);
        assert_eq!(sample_bilinear(&cb, 0, 0.0, 0.5), 0.5);
        assert_eq!(up.at(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn load_image_formats() {
        let dir = tempfile::tempdir().unwrap();
        let ppm = Ppm {
            width: 4,
            height: 4,
            rgb: (0..48).map(|i| (i * 5) as u8).collect(),
        };
        let p = dir.path().join("a.ppm");
        fs::write(&p, ppm.encode()).unwrap();
        let ImageInput::Pixels(t) = load_image(&p, 4).unwrap() else { panic!() };
        assert_eq!(t, ppm.to_tensor());

        let raw = Tensor::full(&[3, 2, 2], 0.25);
        let p = dir.path().join("a.jten");
        fs::write(&p, encode_tensor(&raw)).unwrap();
        let ImageInput::Pixels(t) = load_image(&p, 8).unwrap() else { panic!() };
        assert_eq!(t.shape(), &[3, 8, 8]);
        assert!(t.data().iter().all(|&v| v == 0.25));

        let p = dir.path().join("a.png");
        fs::write(&p, b"\x89PNG....").unwrap();
        assert!(matches!(load_image(&p, 8), Err(Error::Format { .. })));
    }

    #[test]
    fn feature_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.jvec");
        let f = FeatureFile {
            dim: 2,
            ids: vec!["a".into(), "b".into()],
            data: vec![1.0, 2.0, 3.5, -4.0],
        };
        f.save(&p).unwrap();
        let back = FeatureFile::load(&p).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.get(1), vec![3.5, -4.0]);
        assert_eq!(back.index()["b"], 1);
    }
}
