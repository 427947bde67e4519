//! Procedural paired clean/degraded scenes and the `WPSSHARD` container.
//!
//! A scene is a sky band over a ground band with one to four polygonal or
//! elliptical objects on top. Every region is painted with its class colour
//! plus a class-specific stripe texture and low-amplitude noise. The degraded
//! image is rendered analytically from the clean one, so the label map is
//! shared exactly between the two.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{substream, substream_seed, ImageTensor, LabelMask, Tensor3};

pub const SHARD_MAGIC: &[u8; 8] = b"WPSSHARD";
pub const SHARD_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 5 * 4;
const RECORD_META_LEN: usize = 16;

const FOG_GRAY: f64 = 0.7;
const RAIN_INTENSITY: f64 = 0.25;
/// cot(80°): horizontal drift per row of a rain streak.
const RAIN_SLOPE: f64 = 0.176_326_980_708_464_97;
const SNOW_INTENSITY: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeatherKind {
    Rain,
    Fog,
    Snow,
}

impl WeatherKind {
    pub const ALL: [WeatherKind; 3] = [WeatherKind::Rain, WeatherKind::Fog, WeatherKind::Snow];

    fn code(self) -> u8 {
        match self {
            WeatherKind::Rain => 0,
            WeatherKind::Fog => 1,
            WeatherKind::Snow => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub clean: ImageTensor,
    pub label: LabelMask,
    pub degraded: ImageTensor,
    pub weather: WeatherKind,
    pub severity: f32,
    pub seed: u64,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.label.height
    }

    pub fn width(&self) -> usize {
        self.label.width
    }
}

// Stream tags for the per-scene RNG substreams.
const STREAM_LAYOUT: u64 = 1;
const STREAM_WEATHER: u64 = 2;
const STREAM_DEGRADE: u64 = 3;

/// Base colour for a class. The first entries are hand-picked; the rest
/// walk the hue circle.
pub fn class_color(class: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 10] = [
        [0.55, 0.72, 0.92], // sky
        [0.25, 0.55, 0.20],
        [0.45, 0.42, 0.40],
        [0.30, 0.30, 0.33],
        [0.62, 0.50, 0.30],
        [0.70, 0.25, 0.22],
        [0.85, 0.80, 0.35],
        [0.35, 0.25, 0.55],
        [0.15, 0.45, 0.50],
        [0.80, 0.55, 0.65],
    ];
    if let Some(c) = PALETTE.get(class) {
        return *c;
    }
    let hue = (class as f64 * 0.618_033_988_75).fract() * 6.0;
    let value = if class % 2 == 0 { 0.75 } else { 0.45 };
    let sat = 0.6;
    let chroma = value * sat;
    let x = chroma * (1.0 - ((hue % 2.0) - 1.0).abs());
    let m = value - chroma;
    let (r, g, b) = match hue as usize {
        0 => (chroma, x, 0.0),
        1 => (x, chroma, 0.0),
        2 => (0.0, chroma, x),
        3 => (0.0, x, chroma),
        4 => (x, 0.0, chroma),
        _ => (chroma, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Stripe texture parameters (angular frequency, orientation) for a class.
fn class_texture(class: usize) -> (f64, f64) {
    let freq = 0.35 + 0.25 * ((class * 7) % 5) as f64;
    let angle = std::f64::consts::PI * ((class * 3) % 8) as f64 / 8.0;
    (freq, angle)
}

enum Shape {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        cos: f64,
        sin: f64,
    },
    Polygon(Vec<(f64, f64)>),
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            Shape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                cos,
                sin,
            } => {
                let dy = y - cy;
                let dx = x - cx;
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon(pts) => {
                // even-odd ray casting
                let mut inside = false;
                let n = pts.len();
                let mut j = n - 1;
                for i in 0..n {
                    let (yi, xi) = pts[i];
                    let (yj, xj) = pts[j];
                    if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                        inside = !inside;
                    }
                    j = i;
                }
                inside
            }
        }
    }
}

fn check_dims(height: usize, width: usize, num_classes: usize) -> Result<()> {
    if height < 16 || width < 16 {
        return Err(Error::InvalidDimension(format!(
            "image must be at least 16x16, got {height}x{width}"
        )));
    }
    if !(2..=32).contains(&num_classes) {
        return Err(Error::InvalidDimension(format!(
            "num_classes must be in 2..=32, got {num_classes}"
        )));
    }
    Ok(())
}

pub fn generate_scene(seed: u64, height: usize, width: usize, num_classes: usize) -> Result<Scene> {
    check_dims(height, width, num_classes)?;
    let (clean, label) = render_layout(seed, height, width, num_classes);

    let mut wrng = substream(seed, &[STREAM_WEATHER]);
    let weather = WeatherKind::ALL[wrng.random_range(0..3)];
    let severity = wrng.random_range(0.0f32..=1.0f32);
    let degraded = degrade(&clean, weather, severity, substream_seed(seed, &[STREAM_DEGRADE]))?;

    Ok(Scene {
        clean,
        label,
        degraded,
        weather,
        severity,
        seed,
    })
}

fn render_layout(seed: u64, h: usize, w: usize, num_classes: usize) -> (ImageTensor, LabelMask) {
    let mut rng = substream(seed, &[STREAM_LAYOUT]);
    let hf = h as f64;
    let wf = w as f64;

    let horizon = rng.random_range(0.2..0.5) * hf;
    let wobble_amp = rng.random_range(0.0..2.5);
    let wobble_freq = rng.random_range(0.05..0.2);
    let wobble_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let ground_class = rng.random_range(1..num_classes);

    let n_objects = rng.random_range(1..=4);
    let mut objects: Vec<(usize, Shape)> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let class = rng.random_range(1..num_classes);
        let cy = rng.random_range(0.15..0.95) * hf;
        let cx = rng.random_range(0.0..1.0) * wf;
        let base = rng.random_range(0.10..0.25) * hf.min(wf);
        let shape = if rng.random_bool(0.5) {
            Shape::Ellipse {
                cy,
                cx,
                ry: base * rng.random_range(0.6..1.4),
                rx: base * rng.random_range(0.6..1.4),
                cos: 0.0,
                sin: 0.0,
            }
        } else {
            let n = rng.random_range(3..=6);
            let start = rng.random_range(0.0..std::f64::consts::TAU);
            let pts = (0..n)
                .map(|k| {
                    let t = start + std::f64::consts::TAU * k as f64 / n as f64;
                    let r = base * rng.random_range(0.7..1.3);
                    (cy + r * t.sin(), cx + r * t.cos())
                })
                .collect();
            Shape::Polygon(pts)
        };
        let shape = match shape {
            Shape::Ellipse {
                cy, cx, ry, rx, ..
            } => {
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Shape::Ellipse {
                    cy,
                    cx,
                    ry,
                    rx,
                    cos: theta.cos(),
                    sin: theta.sin(),
                }
            }
            poly => poly,
        };
        objects.push((class, shape));
    }

    // Per-scene colour shift and illumination for every class.
    let illum = rng.random_range(0.85..1.1);
    let colors: Vec<[f64; 3]> = (0..num_classes)
        .map(|k| {
            let base = class_color(k);
            let mut c = [0.0; 3];
            for (ch, v) in c.iter_mut().enumerate() {
                *v = (base[ch] + rng.random_range(-0.06..0.06)) * illum;
            }
            c
        })
        .collect();
    let phases: Vec<f64> = (0..num_classes)
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();

    let mut label = LabelMask::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let (yc, xc) = (y as f64 + 0.5, x as f64 + 0.5);
            let edge = horizon + wobble_amp * (wobble_freq * xc + wobble_phase).sin();
            let mut class = if yc < edge { 0 } else { ground_class };
            for (k, shape) in &objects {
                if shape.contains(yc, xc) {
                    class = *k;
                }
            }
            label.set(y, x, class as u8);
        }
    }

    let mut clean = ImageTensor::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            let k = label.at(y, x) as usize;
            let (freq, angle) = class_texture(k);
            let stripe = 0.05
                * (freq * (x as f64 * angle.cos() + y as f64 * angle.sin()) + phases[k]).sin();
            for ch in 0..3 {
                let noise = rng.random_range(-0.03..0.03);
                let v = (colors[k][ch] + stripe + noise).clamp(0.0, 1.0);
                *clean.at_mut(ch, y, x) = v as f32;
            }
        }
    }
    (clean, label)
}

/// Render a weather degradation of `clean`. Output stays in [0,1] and keeps the shape.
pub fn degrade(clean: &ImageTensor, kind: WeatherKind, severity: f32, seed: u64) -> Result<ImageTensor> {
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::InvalidArgument(format!(
            "severity must lie in [0,1], got {severity}"
        )));
    }
    let s = severity as f64;
    let mut rng = substream(seed, &[kind.code() as u64]);
    let (h, w) = (clean.height, clean.width);
    let mut buf: Vec<f64> = clean.data.iter().map(|&v| v as f64).collect();

    let fog = |buf: &mut [f64], a: f64| {
        if a > 0.0 {
            for v in buf.iter_mut() {
                *v = (1.0 - a) * *v + a * FOG_GRAY;
            }
        }
    };

    match kind {
        WeatherKind::Fog => {
            if s == 0.0 {
                return Ok(clean.clone());
            }
            fog(&mut buf, 0.8 * s);
        }
        WeatherKind::Rain => {
            let n = (200.0 * s).round() as usize;
            for _ in 0..n {
                let len = rng.random_range(5..=12usize);
                let y0 = rng.random_range(-(len as i64)..h as i64);
                let x0 = rng.random_range(0.0..w as f64);
                for t in 0..len {
                    let y = y0 + t as i64;
                    if y < 0 || y >= h as i64 {
                        continue;
                    }
                    let xf = x0 + t as f64 * RAIN_SLOPE;
                    let xi = xf.floor() as usize;
                    let frac = xf - xf.floor();
                    for (xx, weight) in [(xi, 1.0 - frac), (xi + 1, frac)] {
                        if xx < w {
                            for ch in 0..clean.channels {
                                buf[(ch * h + y as usize) * w + xx] += RAIN_INTENSITY * weight;
                            }
                        }
                    }
                }
            }
        }
        WeatherKind::Snow => {
            fog(&mut buf, 0.3 * s);
            let n = (300.0 * s).round() as usize;
            for _ in 0..n {
                let size = rng.random_range(1..=2usize);
                let y0 = rng.random_range(0..h);
                let x0 = rng.random_range(0..w);
                for y in y0..(y0 + size).min(h) {
                    for x in x0..(x0 + size).min(w) {
                        for ch in 0..clean.channels {
                            buf[(ch * h + y) * w + x] += SNOW_INTENSITY;
                        }
                    }
                }
            }
        }
    }

    let data = buf.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    Tensor3::from_vec(clean.channels, h, w, data)
}

/// Generates `count` scenes whose seeds derive from `(base_seed, split, index)`.
/// Output is identical whatever the worker count.
pub fn generate_split(
    base_seed: u64,
    split: u64,
    count: usize,
    size: usize,
    num_classes: usize,
) -> Result<Vec<Scene>> {
    check_dims(size, size, num_classes)?;
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(substream_seed(base_seed, &[split, i as u64]), size, size, num_classes))
        .collect()
}

/// Header of a shard file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShardHeader {
    pub version: u32,
    pub count: u32,
    pub num_classes: u32,
    pub height: u32,
    pub width: u32,
}

impl ShardHeader {
    pub fn record_len(&self) -> usize {
        let px = self.height as usize * self.width as usize;
        RECORD_META_LEN + 2 * 3 * px * 4 + px
    }

    pub fn file_len(&self) -> u64 {
        HEADER_LEN as u64 + self.count as u64 * self.record_len() as u64
    }
}

/// Writes scenes to `path`. All scenes must share `(C, H, W)`.
pub fn write_shard(scenes: &[Scene], num_classes: usize, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let first = scenes
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot write an empty shard".into()))?;
    let (h, w) = (first.height(), first.width());
    for (i, s) in scenes.iter().enumerate() {
        if s.height() != h || s.width() != w || s.clean.channels != 3 || !s.clean.same_shape(&s.degraded) {
            return Err(Error::ShapeMismatch(format!("scene {i} differs from scene 0 in shape")));
        }
        if let Some(&bad) = s
            .label
            .data
            .iter()
            .find(|&&l| l as usize >= num_classes && l != crate::tensor::IGNORE_LABEL)
        {
            return Err(Error::InvalidLabel {
                label: bad,
                index: i,
                num_classes,
            });
        }
    }

    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut header = Vec::with_capacity(HEADER_LEN);
    header.extend_from_slice(SHARD_MAGIC);
    for v in [SHARD_VERSION, scenes.len() as u32, num_classes as u32, h as u32, w as u32] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&header).map_err(|e| Error::io(path, e))?;

    let mut rec = Vec::new();
    for s in scenes {
        rec.clear();
        rec.extend_from_slice(&s.seed.to_le_bytes());
        rec.extend_from_slice(&[s.weather.code(), 0, 0, 0]);
        rec.extend_from_slice(&s.severity.to_le_bytes());
        rec.extend(s.clean.data.iter().flat_map(|v| v.to_le_bytes()));
        rec.extend_from_slice(&s.label.data);
        rec.extend(s.degraded.data.iter().flat_map(|v| v.to_le_bytes()));
        out.write_all(&rec).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads and validates only the header.
pub fn read_shard_header(path: impl AsRef<Path>) -> Result<ShardHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_header(path, &bytes)
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<ShardHeader> {
    if bytes.len() >= 8 && &bytes[..8] != SHARD_MAGIC {
        return Err(Error::MagicMismatch {
            path: path.into(),
            expected: String::from_utf8_lossy(SHARD_MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..8]).into_owned(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            offset: 0,
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let header = ShardHeader {
        version: u32_at(8),
        count: u32_at(12),
        num_classes: u32_at(16),
        height: u32_at(20),
        width: u32_at(24),
    };
    if header.version != SHARD_VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            expected: SHARD_VERSION,
            found: header.version,
        });
    }
    if header.height == 0 || header.width == 0 || header.num_classes == 0 {
        return Err(Error::Format {
            path: path.into(),
            reason: format!(
                "degenerate header: C={} H={} W={}",
                header.num_classes, header.height, header.width
            ),
        });
    }
    Ok(header)
}

pub fn read_shard(path: impl AsRef<Path>) -> Result<(ShardHeader, Vec<Scene>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &bytes)?;
    let expected = header.file_len();
    let actual = bytes.len() as u64;
    let rec_len = header.record_len();
    if actual < expected {
        let full_records = (actual - HEADER_LEN as u64) / rec_len as u64;
        return Err(Error::Truncated {
            path: path.into(),
            offset: HEADER_LEN as u64 + full_records * rec_len as u64,
            expected,
            actual,
        });
    }
    if actual > expected {
        return Err(Error::Format {
            path: path.into(),
            reason: format!("{} trailing bytes after {} records", actual - expected, header.count),
        });
    }

    let (h, w) = (header.height as usize, header.width as usize);
    let px = h * w;
    let c = header.num_classes as usize;
    let f32s = |b: &[u8]| -> Vec<f32> {
        b.chunks_exact(4)
            .map(|q| f32::from_le_bytes(q.try_into().unwrap()))
            .collect()
    };
    let mut scenes = Vec::with_capacity(header.count as usize);
    for i in 0..header.count as usize {
        let base = HEADER_LEN + i * rec_len;
        let rec = &bytes[base..base + rec_len];
        let seed = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let weather = WeatherKind::from_code(rec[8]).ok_or_else(|| Error::Format {
            path: path.into(),
            reason: format!("record {i}: unknown weather code {}", rec[8]),
        })?;
        let severity = f32::from_le_bytes(rec[12..16].try_into().unwrap());
        let mut off = RECORD_META_LEN;
        let clean = f32s(&rec[off..off + 12 * px]);
        off += 12 * px;
        let label = rec[off..off + px].to_vec();
        off += px;
        let degraded = f32s(&rec[off..off + 12 * px]);
        if let Some(pos) = label
            .iter()
            .position(|&l| l as usize >= c && l != crate::tensor::IGNORE_LABEL)
        {
            return Err(Error::Format {
                path: path.into(),
                reason: format!("record {i}: label {} at pixel {pos} exceeds {c} classes", label[pos]),
            });
        }
        scenes.push(Scene {
            clean: Tensor3::from_vec(3, h, w, clean)?,
            label: LabelMask::from_vec(h, w, label)?,
            degraded: Tensor3::from_vec(3, h, w, degraded)?,
            weather,
            severity,
            seed,
        });
    }
    Ok((header, scenes))
}
