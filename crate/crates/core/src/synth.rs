//! Procedural oriented-object images with a tunable front/back asymmetry.
//!
//! Each image shows an elongated 3:1 body centred in the frame, pointing
//! along its heading, with a bright marker disk at each tip. The front marker
//! always has full contrast; the rear marker has contrast `1 − κ`. At `κ = 0`
//! front and back are indistinguishable, at `κ = 1` only the front marker is
//! drawn.
//!
//! Heading convention: `θ = 0` points up the image, `θ = π/2` points right.
//! Mirroring the columns maps `θ` to `−θ`, so a horizontal flip swaps the
//! right (`ε = 1`) and left (`ε = 0`) semicircles.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::angle::{decompose, mirror, wrap, Orientation, OrientationDecomposition};
use crate::error::DatasetError;

const MAGIC: &[u8; 8] = b"SEMIDSET";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

const BACKGROUND: f64 = 0.05;
const BODY: f64 = 0.45;
const MARKER_GAIN: f64 = 0.5;
const BODY_LENGTH: f64 = 0.56;
const MARKER_RADIUS: f64 = 0.09;
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorSpec {
    pub image_side: usize,
    pub count: usize,
    pub asymmetry_kappa: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub boundary_margin: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            image_side: 32,
            count: 1000,
            asymmetry_kappa: 0.5,
            noise_sigma: 0.05,
            seed: 7,
            boundary_margin: 1e-3,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidSpec(m));
        if !(0.0..=1.0).contains(&self.asymmetry_kappa) {
            return bad(format!("kappa must lie in [0, 1], got {}", self.asymmetry_kappa));
        }
        if self.image_side < 16 {
            return bad(format!("image side must be at least 16, got {}", self.image_side));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(self.boundary_margin > 0.0 && self.boundary_margin < PI / 2.0) {
            return bad(format!("boundary margin must lie in (0, π/2), got {}", self.boundary_margin));
        }
        Ok(())
    }

    fn to_metadata(&self) -> String {
        format!(
            "image_side={}\ncount={}\nkappa={}\nnoise_sigma={}\nseed={}\nboundary_margin={}\n",
            self.image_side,
            self.count,
            self.asymmetry_kappa,
            self.noise_sigma,
            self.seed,
            self.boundary_margin
        )
    }
}

/// Square grayscale image, row-major, intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    side: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(side: usize, pixels: Vec<f32>) -> Result<Self, DatasetError> {
        if pixels.len() != side * side {
            return Err(DatasetError::InvalidSpec(format!(
                "{} pixels do not form a {side}x{side} image",
                pixels.len()
            )));
        }
        Ok(Self { side, pixels })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.side + col]
    }

    /// Reverses every row (mirror about the vertical axis).
    pub fn mirrored(&self) -> Image {
        let mut pixels = self.pixels.clone();
        for row in pixels.chunks_mut(self.side) {
            row.reverse();
        }
        Image {
            side: self.side,
            pixels,
        }
    }

    /// Rotates the image by 180° about its centre.
    pub fn rotated_180(&self) -> Image {
        let mut pixels = self.pixels.clone();
        pixels.reverse();
        Image {
            side: self.side,
            pixels,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrientationSample {
    pub image: Image,
    pub theta: Orientation,
    pub decomposition: OrientationDecomposition,
    /// Index of the sample this one was mirrored from, within the dataset
    /// that was augmented.
    pub flipped_from: Option<u32>,
}

impl OrientationSample {
    pub fn new(image: Image, theta: Orientation) -> Self {
        Self {
            image,
            theta,
            decomposition: decompose(theta),
            flipped_from: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: GeneratorSpec,
    pub samples: Vec<OrientationSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn image_side(&self) -> usize {
        self.spec.image_side
    }

    /// Fraction of samples in the non-negative (`ε = 1`) semicircle.
    pub fn label_balance(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let ones = self
            .samples
            .iter()
            .filter(|s| s.decomposition.epsilon == 1)
            .count();
        ones as f64 / self.samples.len() as f64
    }

    /// Container bytes, see [`save`].
    pub fn to_bytes(&self) -> Vec<u8> {
        let side = self.spec.image_side;
        let mut meta = self.spec.to_metadata();
        let flips: Vec<String> = self
            .samples
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.flipped_from.map(|src| format!("{i}:{src}")))
            .collect();
        if !flips.is_empty() {
            meta.push_str("flipped_from=");
            meta.push_str(&flips.join(","));
            meta.push('\n');
        }
        let mut out =
            Vec::with_capacity(HEADER_LEN + 4 + meta.len() + self.len() * (1 + side * side) * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u32).to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        for s in &self.samples {
            out.extend_from_slice(&(s.theta.radians() as f32).to_le_bytes());
            for p in s.image.pixels() {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let parse = |offset: usize, reason: &str| DatasetError::Parse {
            offset,
            reason: reason.to_string(),
        };
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(parse(0, "bad magic bytes"));
        }
        if bytes.len() < HEADER_LEN + 4 {
            return Err(parse(bytes.len(), "header is incomplete"));
        }
        let version = read_u32(bytes, 8);
        if version != VERSION {
            return Err(parse(8, &format!("unsupported version {version}")));
        }
        let count = read_u32(bytes, 12) as usize;
        let meta_len = read_u32(bytes, 16) as usize;
        let meta_start = HEADER_LEN + 4;
        let meta_end = meta_start
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| parse(16, "metadata length exceeds file size"))?;
        let meta = std::str::from_utf8(&bytes[meta_start..meta_end])
            .map_err(|e| parse(meta_start + e.valid_up_to(), "metadata is not UTF-8"))?;
        let (spec, flips) = parse_metadata(meta, meta_start)?;

        let side = spec.image_side;
        let record = (1 + side * side) * 4;
        let payload = bytes.len() - meta_end;
        if payload < count * record {
            let found = payload / record;
            return Err(DatasetError::Truncated {
                offset: meta_end + found * record,
                expected: count,
                found,
            });
        }
        if payload > count * record {
            return Err(parse(meta_end + count * record, "trailing bytes after last sample"));
        }

        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let base = meta_end + i * record;
            let theta = read_f32(bytes, base) as f64;
            let theta = wrap(theta).map_err(|e| parse(base, &e.to_string()))?;
            let pixels = (0..side * side)
                .map(|k| read_f32(bytes, base + 4 + 4 * k))
                .collect();
            let mut sample = OrientationSample::new(Image { side, pixels }, theta);
            sample.flipped_from = flips
                .iter()
                .find(|(idx, _)| *idx == i as u32)
                .map(|&(_, src)| src);
            samples.push(sample);
        }
        Ok(Dataset { spec, samples })
    }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn read_f32(bytes: &[u8], at: usize) -> f32 {
    f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn parse_metadata(meta: &str, base: usize) -> Result<(GeneratorSpec, Vec<(u32, u32)>), DatasetError> {
    let mut spec = GeneratorSpec::default();
    let mut seen = 0u8;
    let mut flips = Vec::new();
    let mut offset = base;
    for line in meta.split_inclusive('\n') {
        let here = offset;
        offset += line.len();
        let line = line.trim_end_matches('\n');
        if line.is_empty() {
            continue;
        }
        let err = |reason: String| DatasetError::Parse { offset: here, reason };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(format!("metadata line `{line}` has no `=`")))?;
        let num = |v: &str| -> Result<f64, DatasetError> {
            v.parse::<f64>()
                .map_err(|_| err(format!("metadata `{key}` is not a number: `{v}`")))
        };
        let int = |v: &str| -> Result<u64, DatasetError> {
            v.parse::<u64>()
                .map_err(|_| err(format!("metadata `{key}` is not an integer: `{v}`")))
        };
        match key {
            "image_side" => {
                spec.image_side = int(value)? as usize;
                seen |= 1;
            }
            "count" => {
                spec.count = int(value)? as usize;
                seen |= 2;
            }
            "kappa" => {
                spec.asymmetry_kappa = num(value)?;
                seen |= 4;
            }
            "noise_sigma" => {
                spec.noise_sigma = num(value)?;
                seen |= 8;
            }
            "seed" => {
                spec.seed = int(value)?;
                seen |= 16;
            }
            "boundary_margin" => {
                spec.boundary_margin = num(value)?;
                seen |= 32;
            }
            "flipped_from" => {
                for pair in value.split(',').filter(|p| !p.is_empty()) {
                    let (i, src) = pair
                        .split_once(':')
                        .ok_or_else(|| err(format!("bad flip entry `{pair}`")))?;
                    flips.push((int(i)? as u32, int(src)? as u32));
                }
            }
            other => return Err(err(format!("unknown metadata key `{other}`"))),
        }
    }
    if seen != 63 {
        return Err(DatasetError::Parse {
            offset: base,
            reason: "metadata is missing generator fields".into(),
        });
    }
    spec.validate().map_err(|e| DatasetError::Parse {
        offset: base,
        reason: e.to_string(),
    })?;
    Ok((spec, flips))
}

/// Renders one object at heading `theta`. Noise is drawn from `rng` only
/// when `spec.noise_sigma > 0`.
pub fn render_object<R: Rng + ?Sized>(theta: Orientation, spec: &GeneratorSpec, rng: &mut R) -> Image {
    let side = spec.image_side;
    let s = side as f64;
    let centre = s / 2.0;
    let half_len = BODY_LENGTH * s / 2.0;
    let half_wid = half_len / 3.0;
    let radius = MARKER_RADIUS * s;
    let r2 = radius * radius;
    let (sin, cos) = theta.radians().sin_cos();
    // heading (x right, y down) and its left-hand normal
    let (hx, hy) = (sin, -cos);
    let (nx, ny) = (cos, sin);
    let front = 1.0;
    let rear = 1.0 - spec.asymmetry_kappa;

    let intensity = |x: f64, y: f64| -> f64 {
        let (dx, dy) = (x - centre, y - centre);
        let u = dx * hx + dy * hy;
        let v = dx * nx + dy * ny;
        let mut value = if u.abs() <= half_len && v.abs() <= half_wid {
            BODY
        } else {
            BACKGROUND
        };
        if (u - half_len).powi(2) + v * v <= r2 {
            value += MARKER_GAIN * front;
        } else if (u + half_len).powi(2) + v * v <= r2 {
            value += MARKER_GAIN * rear;
        }
        value
    };

    let step = 1.0 / SUPERSAMPLE as f64;
    let norm = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let noise = (spec.noise_sigma > 0.0).then(|| Normal::new(0.0, spec.noise_sigma).unwrap());
    let mut pixels = Vec::with_capacity(side * side);
    for row in 0..side {
        for col in 0..side {
            let mut acc = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = col as f64 + (sx as f64 + 0.5) * step;
                    let y = row as f64 + (sy as f64 + 0.5) * step;
                    acc += intensity(x, y);
                }
            }
            let mut value = acc / norm;
            if let Some(n) = &noise {
                value += n.sample(rng);
            }
            pixels.push(value.clamp(0.0, 1.0) as f32);
        }
    }
    Image { side, pixels }
}

/// Deterministic per-sample generator: sample `index` depends only on
/// `(seed, index)`.
pub fn generate_sample(spec: &GeneratorSpec, index: u64) -> OrientationSample {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let theta = draw_orientation(spec.boundary_margin, &mut rng);
    let image = render_object(theta, spec, &mut rng);
    OrientationSample::new(image, theta)
}

fn draw_orientation<R: Rng + ?Sized>(margin: f64, rng: &mut R) -> Orientation {
    loop {
        let u: f64 = rng.gen();
        // (−π, π]: 1 − u lies in (0, 1]
        let raw = -PI + 2.0 * PI * (1.0 - u);
        // stored as f32, so keep the f32 value as the canonical angle
        let theta = raw as f32 as f64;
        let a = theta.abs();
        if a >= margin && PI - a >= margin {
            return wrap(theta).expect("finite");
        }
    }
}

pub fn generate(spec: &GeneratorSpec) -> Result<Dataset, DatasetError> {
    spec.validate()?;
    let samples = (0..spec.count as u64)
        .map(|i| generate_sample(spec, i))
        .collect();
    Ok(Dataset {
        spec: spec.clone(),
        samples,
    })
}

/// Interleaves every sample with its horizontal mirror: output `2i` is the
/// original, `2i + 1` the mirror with `flipped_from = i`.
pub fn flip_augment(dataset: &Dataset) -> Dataset {
    let mut samples = Vec::with_capacity(dataset.len() * 2);
    for (i, s) in dataset.samples.iter().enumerate() {
        samples.push(s.clone());
        let mut flipped = OrientationSample::new(s.image.mirrored(), mirror(s.theta));
        flipped.flipped_from = Some(i as u32);
        samples.push(flipped);
    }
    Dataset {
        spec: dataset.spec.clone(),
        samples,
    }
}

/// Writes the container format:
///
/// | offset | size | content |
/// |---|---|---|
/// | 0 | 8 | magic `SEMIDSET` |
/// | 8 | 4 | version (u32 LE, 1) |
/// | 12 | 4 | sample count (u32 LE) |
/// | 16 | 4 | metadata length `m` (u32 LE) |
/// | 20 | m | UTF-8 `key=value` lines |
/// | 20+m | count × (1 + side²) × 4 | per sample: θ then pixels row-major, f32 LE |
pub fn save(dataset: &Dataset, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    fs::write(path, dataset.to_bytes()).map_err(|e| DatasetError::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| DatasetError::io(path, e))?;
    Dataset::from_bytes(&bytes)
}
