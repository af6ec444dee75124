//! Grayscale 28×28 base digits: MNIST IDX files when present, otherwise a
//! procedural stroke renderer with random affine distortion.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::config::BaseDigits;
use crate::error::{Error, Result};
use crate::seed::named_rng;

pub const SIDE: usize = 28;
pub const PIXELS: usize = SIDE * SIDE;
pub const MNIST_TRAIN: usize = 60_000;
pub const MNIST_TEST: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DigitSet {
    /// `n × 784` row-major intensities.
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
}

impl DigitSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        &self.images[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn truncate(&mut self, n: usize) {
        if n > 0 && n < self.len() {
            self.labels.truncate(n);
            self.images.truncate(n * PIXELS);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BaseDigitSets {
    pub train: DigitSet,
    pub test: DigitSet,
    /// `"mnist"` or `"synthetic"`.
    pub source: &'static str,
}

const IDX_FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

fn find_mnist_dir(root: &Path) -> Option<PathBuf> {
    [root.to_path_buf(), root.join("mnist"), root.join("MNIST").join("raw")]
        .into_iter()
        .find(|d| IDX_FILES.iter().all(|f| d.join(f).is_file()))
}

fn read_be_u32(bytes: &[u8], at: usize) -> Option<usize> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap()) as usize)
}

fn read_idx(path: &Path, expect_magic: usize) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    let magic = read_be_u32(&bytes, 0).ok_or_else(|| bad("truncated header"))?;
    if magic != expect_magic {
        return Err(bad(&format!("magic {magic:#x}, expected {expect_magic:#x}")));
    }
    let rank = magic & 0xff;
    let dims: Vec<usize> = (0..rank)
        .map(|i| read_be_u32(&bytes, 4 + 4 * i))
        .collect::<Option<_>>()
        .ok_or_else(|| bad("truncated dimensions"))?;
    let start = 4 + 4 * rank;
    let total: usize = dims.iter().product();
    let data = bytes.get(start..start + total).ok_or_else(|| bad("truncated payload"))?;
    Ok((dims, data.to_vec()))
}

fn load_idx_pair(images: &Path, labels: &Path) -> Result<DigitSet> {
    let (idims, pixels) = read_idx(images, 0x0803)?;
    let (ldims, labels_raw) = read_idx(labels, 0x0801)?;
    if idims.len() != 3 || idims[1] != SIDE || idims[2] != SIDE || idims[0] != ldims[0] {
        return Err(Error::Data(format!("{}: unexpected shape {idims:?}", images.display())));
    }
    if let Some(&l) = labels_raw.iter().find(|&&l| l > 9) {
        return Err(Error::Data(format!("{}: label {l} > 9", labels.display())));
    }
    Ok(DigitSet { images: pixels, labels: labels_raw })
}

pub fn load_mnist(root: &Path) -> Result<Option<BaseDigitSets>> {
    let Some(dir) = find_mnist_dir(root) else { return Ok(None) };
    let train = load_idx_pair(&dir.join(IDX_FILES[0]), &dir.join(IDX_FILES[1]))?;
    let test = load_idx_pair(&dir.join(IDX_FILES[2]), &dir.join(IDX_FILES[3]))?;
    Ok(Some(BaseDigitSets { train, test, source: "mnist" }))
}

/// Resolves the configured digit source; caps of 0 keep everything.
pub fn base_digits(root: &Path, source: BaseDigits, train_cap: usize, test_cap: usize) -> Result<BaseDigitSets> {
    let mut sets = match source {
        BaseDigits::Mnist => load_mnist(root)?.ok_or_else(|| {
            Error::Data(format!("missing base data: no MNIST IDX files under {}", root.display()))
        })?,
        BaseDigits::Auto => match load_mnist(root)? {
            Some(s) => s,
            None => synthetic_digits(cap_or(train_cap, MNIST_TRAIN), cap_or(test_cap, MNIST_TEST)),
        },
        BaseDigits::Synthetic => synthetic_digits(cap_or(train_cap, MNIST_TRAIN), cap_or(test_cap, MNIST_TEST)),
    };
    sets.train.truncate(train_cap);
    sets.test.truncate(test_cap);
    Ok(sets)
}

fn cap_or(cap: usize, full: usize) -> usize {
    if cap == 0 {
        full
    } else {
        cap.min(full)
    }
}

/// Synthetic stand-in for MNIST; fixed generator so every experiment seed sees the same digits.
pub fn synthetic_digits(n_train: usize, n_test: usize) -> BaseDigitSets {
    let mut rng = named_rng(0, "synthetic_digits/train");
    let train = render_set(n_train, &mut rng);
    let mut rng = named_rng(0, "synthetic_digits/test");
    let test = render_set(n_test, &mut rng);
    BaseDigitSets { train, test, source: "synthetic" }
}

fn render_set<R: Rng>(n: usize, rng: &mut R) -> DigitSet {
    let mut set = DigitSet { images: Vec::with_capacity(n * PIXELS), labels: Vec::with_capacity(n) };
    for i in 0..n {
        let d = (i % 10) as u8;
        set.labels.push(d);
        set.images.extend_from_slice(&render_digit(d, rng));
    }
    set
}

type Pt = (f64, f64);

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, from_deg: f64, to_deg: f64) -> Vec<Pt> {
    let steps = (((to_deg - from_deg).abs() / 15.0).ceil() as usize).max(2);
    (0..=steps)
        .map(|i| {
            let t = (from_deg + (to_deg - from_deg) * i as f64 / steps as f64) * PI / 180.0;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

/// Polylines in a unit box, y pointing down.
fn strokes(d: u8) -> Vec<Vec<Pt>> {
    match d {
        0 => vec![arc(0.5, 0.5, 0.27, 0.4, 0.0, 360.0)],
        1 => vec![vec![(0.36, 0.24), (0.52, 0.1), (0.52, 0.9)]],
        2 => {
            let mut s = arc(0.5, 0.32, 0.24, 0.22, 180.0, 400.0);
            s.extend([(0.24, 0.9), (0.8, 0.9)]);
            vec![s]
        }
        3 => vec![arc(0.5, 0.3, 0.21, 0.19, 200.0, 450.0), arc(0.5, 0.7, 0.24, 0.21, -90.0, 160.0)],
        4 => vec![vec![(0.62, 0.9), (0.62, 0.1), (0.2, 0.64), (0.82, 0.64)]],
        5 => {
            let mut s = vec![(0.74, 0.1), (0.32, 0.1), (0.3, 0.46)];
            s.extend(arc(0.5, 0.66, 0.24, 0.23, -125.0, 150.0));
            vec![s]
        }
        6 => vec![vec![(0.7, 0.1), (0.42, 0.32), (0.29, 0.62)], arc(0.5, 0.68, 0.21, 0.21, 0.0, 360.0)],
        7 => vec![vec![(0.2, 0.1), (0.8, 0.1), (0.42, 0.9)]],
        8 => vec![arc(0.5, 0.29, 0.18, 0.19, 0.0, 360.0), arc(0.5, 0.7, 0.23, 0.21, 0.0, 360.0)],
        _ => vec![arc(0.5, 0.32, 0.21, 0.21, 0.0, 360.0), vec![(0.71, 0.32), (0.62, 0.9)]],
    }
}

fn segment_distance(p: Pt, a: Pt, b: Pt) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 { ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

/// Renders one digit with random rotation, shear, scale, offset and stroke width.
pub fn render_digit<R: Rng + ?Sized>(d: u8, rng: &mut R) -> [u8; PIXELS] {
    let angle = rng.random_range(-0.22..0.22);
    let shear = rng.random_range(-0.25..0.25);
    let sx = rng.random_range(15.0..20.0);
    let sy = rng.random_range(17.0..21.0);
    let (ox, oy) = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
    let half_width = rng.random_range(0.9..1.7);
    let (c, s) = (f64::cos(angle), f64::sin(angle));
    let to_pixels = |(x, y): Pt| {
        let (u, v) = ((x - 0.5) * sx, (y - 0.5) * sy);
        let u = u + shear * v;
        (13.5 + ox + c * u - s * v, 13.5 + oy + s * u + c * v)
    };
    let mut img = [0f64; PIXELS];
    for line in strokes(d) {
        let pts: Vec<Pt> = line
            .into_iter()
            .map(|(x, y)| to_pixels((x + rng.random_range(-0.02..0.02), y + rng.random_range(-0.02..0.02))))
            .collect();
        for w in pts.windows(2) {
            let (a, b) = (w[0], w[1]);
            let reach = half_width + 1.0;
            let x0 = (a.0.min(b.0) - reach).floor().max(0.0) as usize;
            let x1 = ((a.0.max(b.0) + reach).ceil() as usize).min(SIDE - 1);
            let y0 = (a.1.min(b.1) - reach).floor().max(0.0) as usize;
            let y1 = ((a.1.max(b.1) + reach).ceil() as usize).min(SIDE - 1);
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let dist = segment_distance((px as f64, py as f64), a, b);
                    let cover = (half_width - dist + 0.5).clamp(0.0, 1.0);
                    let slot = &mut img[py * SIDE + px];
                    *slot = slot.max(cover);
                }
            }
        }
    }
    let mut out = [0u8; PIXELS];
    for (o, v) in out.iter_mut().zip(img) {
        *o = (v * 255.0).round() as u8;
    }
    out
}
