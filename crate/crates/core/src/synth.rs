//! Synthetic multi-scale detection data: textured shapes on a noisy
//! background, with object sides drawn log-uniformly over a range so that
//! every scale partition is populated.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::backbone::Image;
use crate::error::{invalid, Error, Result};
use crate::rng::{stream_rng, streams, Rng};
use crate::roi::RoI;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";
const MAX_PLACEMENT_TRIES: usize = 100;
const SUPERSAMPLE: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Annotation {
    pub roi: RoI,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_images: usize,
    pub image_size: usize,
    pub num_classes: usize,
    /// Object side lengths in pixels, `[min, max]`.
    pub scale_range: (f64, f64),
    pub objects_per_image: (usize, usize),
    pub noise_amplitude: f64,
    pub seed: u64,
    /// Id of the first image. Ids select the per-image random stream, so
    /// splits generated with disjoint id ranges never share images.
    pub first_id: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_images: 200,
            image_size: 96,
            num_classes: 3,
            scale_range: (12.0, 80.0),
            objects_per_image: (1, 3),
            noise_amplitude: 0.04,
            seed: 0,
            first_id: 0,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= self.image_size as f64) {
            return Err(invalid(
                "dataset config",
                format!("scale_range [{lo}, {hi}] not within (0, {}]", self.image_size),
            ));
        }
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(invalid(
                "dataset config",
                format!("num_classes {} not in [2, {MAX_CLASSES}]", self.num_classes),
            ));
        }
        let (a, b) = self.objects_per_image;
        if a == 0 || a > b {
            return Err(invalid("dataset config", format!("objects_per_image [{a}, {b}]")));
        }
        if self.image_size < 16 {
            return Err(invalid("dataset config", "image_size below 16"));
        }
        if !(0.0..=0.5).contains(&self.noise_amplitude) {
            return Err(invalid("dataset config", "noise_amplitude not in [0, 0.5]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub annotations: Vec<Annotation>,
    /// Objects that could not be placed, as `class side` notes.
    pub skipped: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Square,
    Disk,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Texture {
    Solid,
    Stripes,
    Checker,
}

const SHAPES: [Shape; 3] = [Shape::Square, Shape::Disk, Shape::Triangle];
const TEXTURES: [Texture; 3] = [Texture::Solid, Texture::Stripes, Texture::Checker];
const PALETTE: [[f32; 3]; 3] = [[0.9, 0.25, 0.2], [0.2, 0.8, 0.3], [0.25, 0.35, 0.95]];
pub const MAX_CLASSES: usize = 9;

/// Class `k` (1-based) → distinct (shape, texture, color) triple.
fn class_style(k: usize) -> (Shape, Texture, [f32; 3]) {
    let i = k - 1;
    (SHAPES[i % 3], TEXTURES[(i % 3 + i / 3) % 3], PALETTE[(i + i / 3) % 3])
}

pub fn class_name(k: usize) -> &'static str {
    ["square", "disk", "triangle", "square-b", "disk-b", "triangle-b", "square-c", "disk-c", "triangle-c"]
        [k - 1]
}

fn coverage(shape: Shape, u: f32, v: f32) -> bool {
    match shape {
        Shape::Square => true,
        Shape::Disk => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
        Shape::Triangle => (u - 0.5).abs() <= 0.5 * v,
    }
}

/// Texture factor at object-local coordinates; periods scale with the
/// object so that differently sized objects are resized copies.
fn texture(t: Texture, u: f32, v: f32) -> f32 {
    match t {
        Texture::Solid => 1.0,
        Texture::Stripes => {
            if (u * 6.0).floor() as i32 % 2 == 0 {
                1.0
            } else {
                0.35
            }
        }
        Texture::Checker => {
            if ((u * 4.0).floor() as i32 + (v * 4.0).floor() as i32) % 2 == 0 {
                1.0
            } else {
                0.35
            }
        }
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Paints one object into a `3×H×W` buffer, blending by supersampled
/// coverage.
fn paint(buf: &mut [f32], size: usize, x0: usize, y0: usize, side: usize, class: usize) {
    let (shape, tex, color) = class_style(class);
    let plane = size * size;
    let n = SUPERSAMPLE * SUPERSAMPLE;
    for py in y0..y0 + side {
        for px in x0..x0 + side {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let u = ((px - x0) as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32) / side as f32;
                    let v = ((py - y0) as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32) / side as f32;
                    hits += coverage(shape, u, v) as usize;
                }
            }
            if hits == 0 {
                continue;
            }
            let a = hits as f32 / n as f32;
            let u = ((px - x0) as f32 + 0.5) / side as f32;
            let v = ((py - y0) as f32 + 0.5) / side as f32;
            let f = texture(tex, u, v);
            for (c, &col) in color.iter().enumerate() {
                let i = c * plane + py * size + px;
                buf[i] = (1.0 - a) * buf[i] + a * col * f;
            }
        }
    }
}

fn generate_one(cfg: &DatasetConfig, id: usize) -> Result<Sample> {
    let size = cfg.image_size;
    let mut rng = stream_rng(cfg.seed, streams::IMAGE_BASE + id as u64);
    let base: f32 = rng.random_range(0.3..0.6);
    let amp = cfg.noise_amplitude as f32;
    let mut buf: Vec<f32> = (0..3 * size * size)
        .map(|_| base + amp * rng.random_range(-1.0f32..=1.0))
        .collect();

    let count = rng.random_range(cfg.objects_per_image.0..=cfg.objects_per_image.1);
    let (lo, hi) = cfg.scale_range;
    let mut objects: Vec<(usize, usize)> = (0..count)
        .map(|_| {
            let class = rng.random_range(1..=cfg.num_classes);
            let side = (lo.ln() + rng.random::<f64>() * (hi / lo).ln()).exp();
            let side = (side.round() as usize).clamp(lo.ceil() as usize, hi.floor() as usize);
            (class, side.max(1))
        })
        .collect();
    // Largest first: they are the hardest to place.
    objects.sort_by(|a, b| b.1.cmp(&a.1));

    let mut annotations: Vec<Annotation> = Vec::new();
    let mut skipped = Vec::new();
    for (class, side) in objects {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let x = rng.random_range(0..=size - side);
            let y = rng.random_range(0..=size - side);
            let roi = RoI::new(x as f32, y as f32, (x + side) as f32, (y + side) as f32, id)?;
            let clear = annotations.iter().all(|a| {
                // One pixel of clearance between objects.
                roi.x2 + 1.0 <= a.roi.x1
                    || a.roi.x2 + 1.0 <= roi.x1
                    || roi.y2 + 1.0 <= a.roi.y1
                    || a.roi.y2 + 1.0 <= roi.y1
            });
            if clear {
                placed = Some((x, y, roi));
                break;
            }
        }
        match placed {
            Some((x, y, roi)) => {
                paint(&mut buf, size, x, y, side, class);
                annotations.push(Annotation {
                    roi,
                    class_id: class,
                });
            }
            None => skipped.push(format!("{class} {side}")),
        }
    }
    for v in &mut buf {
        *v = quantize(*v);
    }
    let image = Image::new(Tensor::new(vec![1, 3, size, size], buf)?, id)?;
    Ok(Sample {
        image,
        annotations,
        skipped,
    })
}

/// Renders `cfg.num_images` images; image `i` gets id `cfg.first_id + i`
/// and its own random stream.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.num_images)
        .map(|i| generate_one(cfg, cfg.first_id + i))
        .collect()
}

/// Seeded full-frame texture: twelve oriented sinusoidal gratings
/// (0.1 to 0.5 rad/px) summed on a grey base, four per colour channel.
pub fn textured_image(seed: u64, size: usize) -> Result<Image> {
    if size == 0 {
        return Err(invalid("textured_image", "size must be positive"));
    }
    let mut rng = stream_rng(seed, streams::TEXTURE);
    let waves: Vec<(f32, f32, f32)> = (0..12)
        .map(|_| {
            let f = rng.random_range(0.1f32..0.5);
            let theta = rng.random_range(0.0..std::f32::consts::TAU);
            let phase = rng.random_range(0.0..std::f32::consts::TAU);
            (f * theta.cos(), f * theta.sin(), phase)
        })
        .collect();
    let plane = size * size;
    let pixels = Tensor::from_fn(vec![1, 3, size, size], |i| {
        let c = i / plane;
        let (y, x) = (((i % plane) / size) as f32, (i % size) as f32);
        let v: f32 = waves[4 * c..4 * c + 4]
            .iter()
            .map(|&(fx, fy, ph)| 0.2 * (fx * x + fy * y + ph).sin())
            .sum();
        quantize(0.5 + v)
    });
    Image::new(pixels, 0)
}

/// Jittered copies of the ground-truth boxes (`n_pos_jitter` per box,
/// center and size perturbed by up to `jitter` of the box size) followed by
/// `n_neg` uniformly placed random boxes. All boxes are clipped to the image.
pub fn make_proposals(
    gts: &[Annotation],
    n_pos_jitter: usize,
    n_neg: usize,
    jitter: f32,
    image_size: (usize, usize),
    image_id: usize,
    rng: &mut Rng,
) -> Vec<RoI> {
    let (w, h) = image_size;
    let mut out = Vec::with_capacity(gts.len() * n_pos_jitter + n_neg);
    let sym = |rng: &mut Rng| {
        if jitter > 0.0 {
            rng.random_range(-jitter..=jitter)
        } else {
            0.0
        }
    };
    for gt in gts {
        let (cx, cy) = gt.roi.center();
        let (bw, bh) = (gt.roi.width(), gt.roi.height());
        for _ in 0..n_pos_jitter {
            let ncx = cx + sym(rng) * bw;
            let ncy = cy + sym(rng) * bh;
            let nw = bw * (1.0 + sym(rng));
            let nh = bh * (1.0 + sym(rng));
            let r = RoI {
                x1: ncx - 0.5 * nw,
                y1: ncy - 0.5 * nh,
                x2: ncx + 0.5 * nw,
                y2: ncy + 0.5 * nh,
                image_id,
            }
            .clipped(w, h);
            if r.width() >= 1.0 && r.height() >= 1.0 {
                out.push(r);
            } else {
                out.push(RoI { image_id, ..gt.roi }.clipped(w, h));
            }
        }
    }
    let min_side = 8.0f32.min(w.min(h) as f32);
    for _ in 0..n_neg {
        let bw = rng.random_range(min_side..=w as f32);
        let bh = rng.random_range(min_side..=h as f32);
        let x1 = rng.random_range(0.0..=(w as f32 - bw));
        let y1 = rng.random_range(0.0..=(h as f32 - bh));
        out.push(RoI {
            x1,
            y1,
            x2: x1 + bw,
            y2: y1 + bh,
            image_id,
        });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassStats {
    pub class_id: usize,
    pub count: usize,
    pub median_area: f64,
    pub std_area: f64,
}

/// Per-class median and population standard deviation of annotation
/// areas, classes `1..=num_classes`. Classes without objects get NaN.
pub fn scale_statistics(annotations: &[Annotation], num_classes: usize) -> Result<Vec<ClassStats>> {
    if annotations.is_empty() {
        return Err(invalid("scale_statistics", "no annotations"));
    }
    Ok((1..=num_classes)
        .map(|k| {
            let mut areas: Vec<f64> = annotations
                .iter()
                .filter(|a| a.class_id == k)
                .map(|a| a.roi.area())
                .collect();
            areas.sort_by(f64::total_cmp);
            let n = areas.len();
            let (median, std) = if n == 0 {
                (f64::NAN, f64::NAN)
            } else {
                let median = if n % 2 == 1 {
                    areas[n / 2]
                } else {
                    0.5 * (areas[n / 2 - 1] + areas[n / 2])
                };
                let mean = areas.iter().sum::<f64>() / n as f64;
                let var = areas.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
                (median, var.sqrt())
            };
            ClassStats {
                class_id: k,
                count: n,
                median_area: median,
                std_area: std,
            }
        })
        .collect())
}

pub fn statistics_csv(stats: &[ClassStats]) -> String {
    let mut s = String::from("class,median_area,std_area\n");
    for st in stats {
        s.push_str(&format!("{},{},{}\n", st.class_id, st.median_area, st.std_area));
    }
    s
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let d = img.pixels.data();
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.reserve(3 * plane);
    for p in 0..plane {
        for c in 0..3 {
            bytes.push((d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_ppm(path: &Path, id: usize) -> Result<Image> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let plane = w * h;
    let body = bytes.get(pos..pos + 3 * plane).ok_or_else(|| bad("truncated pixel data"))?;
    let mut data = vec![0f32; 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = body[3 * p + c] as f32 / 255.0;
        }
    }
    Image::new(Tensor::new(vec![1, 3, h, w], data)?, id)
}

/// Writes `images/<id>.ppm` files and a manifest: per image a file-name
/// line, one `class x1 y1 x2 y2` line per object, `# skipped class side`
/// lines for objects that could not be placed, and a blank separator.
pub fn write_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut manifest = String::new();
    for s in samples {
        let name = format!("images/{:05}.ppm", s.image.id);
        write_ppm(&dir.join(&name), &s.image)?;
        manifest.push_str(&name);
        manifest.push('\n');
        for a in &s.annotations {
            let r = a.roi;
            manifest.push_str(&format!("{} {} {} {} {}\n", a.class_id, r.x1, r.y1, r.x2, r.y2));
        }
        for note in &s.skipped {
            manifest.push_str(&format!("# skipped {note}\n"));
        }
        manifest.push('\n');
    }
    let mut f = fs::File::create(dir.join(MANIFEST))?;
    f.write_all(manifest.as_bytes())?;
    Ok(())
}

pub fn read_split(dir: &Path) -> Result<Vec<Sample>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path)?;
    let bad = |line: usize, msg: String| Error::Format {
        path: path.clone(),
        msg: format!("line {}: {msg}", line + 1),
    };
    let mut samples = Vec::new();
    let mut current: Option<Sample> = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            samples.extend(current.take());
            continue;
        }
        if let Some(note) = line.strip_prefix("# skipped ") {
            let s = current.as_mut().ok_or_else(|| bad(ln, "note before file name".into()))?;
            s.skipped.push(note.to_string());
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        match current.as_mut() {
            None => {
                let id = Path::new(line)
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or_else(|| bad(ln, format!("image name `{line}` has no numeric id")))?;
                current = Some(Sample {
                    image: read_ppm(&dir.join(line), id)?,
                    annotations: Vec::new(),
                    skipped: Vec::new(),
                });
            }
            Some(s) => {
                let f: Vec<&str> = line.split_whitespace().collect();
                if f.len() != 5 {
                    return Err(bad(ln, format!("expected `class x1 y1 x2 y2`, got `{line}`")));
                }
                let class_id = f[0].parse().map_err(|_| bad(ln, "bad class".into()))?;
                let mut c = [0f32; 4];
                for (v, t) in c.iter_mut().zip(&f[1..]) {
                    *v = t.parse().map_err(|_| bad(ln, format!("bad coordinate `{t}`")))?;
                }
                let roi = RoI::new(c[0], c[1], c[2], c[3], s.image.id)
                    .map_err(|e| bad(ln, e.to_string()))?;
                s.annotations.push(Annotation { roi, class_id });
            }
        }
    }
    samples.extend(current.take());
    Ok(samples)
}
