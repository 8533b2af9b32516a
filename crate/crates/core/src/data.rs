//! Datasets: IDX files, synthetic 8×8 digits, the four-point toy set.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Prng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// How observations are quantized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    /// Intensities in `[0, 1]` from 8-bit pixels.
    Intensity,
    Binary,
    /// Unbounded real-valued observations.
    Continuous,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[N, D]`, one observation per row.
    pub items: Tensor,
    pub grid: Grid,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.items.shape()[1]
    }

    /// First `n` rows and the rest.
    pub fn split(&self, n: usize) -> Result<(Dataset, Dataset)> {
        if n > self.len() {
            return Err(Error::Contract(format!(
                "cannot take {n} rows from {}",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        let part = |rows: &[usize], suffix: &str| -> Result<Dataset> {
            Ok(Dataset {
                name: format!("{}-{suffix}", self.name),
                items: self.items.select_rows(rows)?,
                grid: self.grid,
            })
        };
        Ok((part(&head, "a")?, part(&tail, "b")?))
    }
}

/// Parsed IDX container: big-endian header, unsigned-byte payload.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxFile {
    pub magic: u32,
    pub dims: Vec<u32>,
    pub payload: Vec<u8>,
}

/// Parses an IDX byte buffer with unsigned-byte elements.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxFile> {
    if bytes.len() < 4 {
        return Err(Error::Format(format!(
            "IDX header truncated: {} bytes",
            bytes.len()
        )));
    }
    let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != 0x08 || bytes[3] == 0 {
        return Err(Error::Format(format!(
            "bad IDX magic {:02x} {:02x} {:02x} {:02x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format(format!(
            "IDX header truncated: need {header} bytes for {rank} dimensions, have {}",
            bytes.len()
        )));
    }
    let dims: Vec<u32> = (0..rank)
        .map(|k| {
            let o = 4 + 4 * k;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]])
        })
        .collect();
    let expected = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .ok_or_else(|| Error::Format(format!("IDX dimensions {dims:?} overflow")))?;
    let actual = bytes.len() - header;
    if actual != expected {
        return Err(Error::Format(format!(
            "IDX payload length mismatch: dimensions {dims:?} need {expected} bytes, found {actual}"
        )));
    }
    Ok(IdxFile {
        magic,
        dims,
        payload: bytes[header..].to_vec(),
    })
}

/// Interprets IDX bytes as images `[N, rows, cols]`, scaled by 1/255.
pub fn idx_images_from_bytes(bytes: &[u8], name: &str) -> Result<Dataset> {
    let idx = parse_idx(bytes)?;
    if idx.magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "expected image magic 00 00 08 03, found {:02x} {:02x} {:02x} {:02x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    let n = idx.dims[0] as usize;
    let d = idx.dims[1] as usize * idx.dims[2] as usize;
    let data = idx.payload.iter().map(|&b| b as f64 / 255.0).collect();
    Ok(Dataset {
        name: name.to_string(),
        items: Tensor::from_rows(n, d, data)?,
        grid: Grid::Intensity,
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads an IDX image file (magic `0x00000803`).
pub fn idx_load(path: &Path) -> Result<Dataset> {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    idx_images_from_bytes(&read(path)?, &name)
}

/// Loads an IDX label file (magic `0x00000801`).
pub fn idx_load_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    let idx = parse_idx(&bytes)?;
    if idx.magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "expected label magic 00 00 08 01, found {:08x}",
            idx.magic
        )));
    }
    Ok(idx.payload)
}

/// Encodes images `[N, rows·cols]` with values in `[0, 1]` as IDX bytes.
pub fn idx_encode_images(images: &Tensor, rows: u32, cols: u32) -> Result<Vec<u8>> {
    let (n, d) = images.dims2()?;
    if d != (rows * cols) as usize {
        return Err(Error::shape(
            "idx_encode_images",
            images.shape(),
            &[n, (rows * cols) as usize],
        ));
    }
    let mut out = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for dim in [n as u32, rows, cols] {
        out.extend(dim.to_be_bytes());
    }
    out.extend(
        images
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

/// Draws every entry from `Bernoulli(value)`.
pub fn binarize_dynamic(data: &Tensor, rng: &mut Prng) -> Result<Tensor> {
    if let Some(bad) = data.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::domain(
            "binarize_dynamic",
            format!("value {bad} outside [0, 1]"),
        ));
    }
    let bits = data
        .data()
        .iter()
        .map(|&p| if rng.uniform() < p { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(data.shape().to_vec(), bits)
}

pub const DIGIT_SIDE: usize = 8;

const STENCILS: [[&str; 8]; 10] = [
    [
        "........", "..###...", ".#...#..", ".#...#..", ".#...#..", ".#...#..", "..###...",
        "........",
    ],
    [
        "........", "...#....", "..##....", "...#....", "...#....", "...#....", "..###...",
        "........",
    ],
    [
        "........", "..###...", ".#...#..", "....#...", "...#....", "..#.....", ".#####..",
        "........",
    ],
    [
        "........", ".####...", ".....#..", "..###...", ".....#..", ".....#..", ".####...",
        "........",
    ],
    [
        "........", "....#...", "...##...", "..#.#...", ".#####..", "....#...", "....#...",
        "........",
    ],
    [
        "........", ".#####..", ".#......", ".####...", ".....#..", ".....#..", ".####...",
        "........",
    ],
    [
        "........", "..###...", ".#......", ".####...", ".#...#..", ".#...#..", "..###...",
        "........",
    ],
    [
        "........", ".#####..", ".....#..", "....#...", "...#....", "...#....", "...#....",
        "........",
    ],
    [
        "........", "..###...", ".#...#..", "..###...", ".#...#..", ".#...#..", "..###...",
        "........",
    ],
    [
        "........", "..###...", ".#...#..", ".#...#..", "..####..", ".....#..", "..###...",
        "........",
    ],
];

/// The ten hand-drawn 8×8 glyphs, row-major, values 0 or 1.
pub fn digit_stencil(digit: usize) -> Vec<f64> {
    STENCILS[digit % 10]
        .iter()
        .flat_map(|row| row.bytes().map(|c| if c == b'#' { 1.0 } else { 0.0 }))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthOptions {
    /// Standard deviation of additive pixel noise before clipping.
    pub noise: f64,
    /// Translate each glyph by up to one pixel in each direction.
    pub shift: bool,
}

impl Default for SynthOptions {
    fn default() -> Self {
        SynthOptions {
            noise: 0.1,
            shift: true,
        }
    }
}

/// `n` synthetic digits; item `i` shows digit `i mod 10`.
pub fn gen_synthetic_digits(n: usize, seed: u64, opts: SynthOptions) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("gen_synthetic_digits needs n >= 1".into()));
    }
    let mut rng = Prng::new(seed);
    let side = DIGIT_SIDE as i64;
    let mut data = Vec::with_capacity(n * DIGIT_SIDE * DIGIT_SIDE);
    for i in 0..n {
        let glyph = digit_stencil(i % 10);
        let (dy, dx) = if opts.shift {
            (rng.below(3) as i64 - 1, rng.below(3) as i64 - 1)
        } else {
            (0, 0)
        };
        for r in 0..side {
            for c in 0..side {
                let (sr, sc) = (r - dy, c - dx);
                let mut v = if (0..side).contains(&sr) && (0..side).contains(&sc) {
                    glyph[(sr * side + sc) as usize]
                } else {
                    0.0
                };
                if opts.noise > 0.0 {
                    v = (v + opts.noise * rng.normal()).clamp(0.0, 1.0);
                }
                data.push(v);
            }
        }
    }
    Ok(Dataset {
        name: "synthetic-digits".into(),
        items: Tensor::from_rows(n, DIGIT_SIDE * DIGIT_SIDE, data)?,
        grid: Grid::Intensity,
    })
}

/// Observation noise used with the toy set.
pub const TOY_SIGMA_OBS: f64 = 0.1;

/// Four points at the corners `(±2, ±2)`.
pub fn gen_toy4() -> Dataset {
    Dataset {
        name: "toy4".into(),
        items: Tensor::matrix(&[&[2.0, 2.0], &[-2.0, 2.0], &[-2.0, -2.0], &[2.0, -2.0]]),
        grid: Grid::Continuous,
    }
}

/// Renders images `[N, side·side]` with values in `[0, 1]` as a plain (P2)
/// PGM grid with `cols` tiles per row and a one-pixel black border.
pub fn pgm_grid(images: &Tensor, side: usize, cols: usize) -> Result<String> {
    let (n, d) = images.dims2()?;
    if d != side * side || cols == 0 {
        return Err(Error::shape("pgm_grid", images.shape(), &[n, side * side]));
    }
    let rows = n.div_ceil(cols).max(1);
    let (w, h) = (cols * (side + 1) + 1, rows * (side + 1) + 1);
    let mut pix = vec![0u8; w * h];
    for k in 0..n {
        let (tr, tc) = (k / cols, k % cols);
        for r in 0..side {
            for c in 0..side {
                let v = images.at2(k, r * side + c).clamp(0.0, 1.0);
                pix[(1 + tr * (side + 1) + r) * w + 1 + tc * (side + 1) + c] =
                    (v * 255.0).round() as u8;
            }
        }
    }
    let mut out = format!("P2\n{w} {h}\n255\n");
    for line in pix.chunks(w) {
        let cells: Vec<String> = line.iter().map(|p| p.to_string()).collect();
        let _ = writeln!(out, "{}", cells.join(" "));
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, images: &Tensor, side: usize, cols: usize) -> Result<()> {
    std::fs::write(path, pgm_grid(images, side, cols)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_idx_scales_pixels() {
        let bytes = [
            0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 128, 64,
        ];
        let ds = idx_images_from_bytes(&bytes, "t").unwrap();
        assert_eq!(ds.items.shape(), &[1, 4]);
        assert_eq!(ds.items.data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn mnist_header_parses() {
        let mut bytes = vec![0, 0, 8, 3];
        for d in [60000u32, 28, 28] {
            bytes.extend(d.to_be_bytes());
        }
        bytes.resize(16 + 60000 * 28 * 28, 7);
        let ds = idx_images_from_bytes(&bytes, "train").unwrap();
        assert_eq!(ds.items.shape(), &[60000, 784]);
    }

    #[test]
    fn idx_errors() {
        let labels = [0, 0, 8, 1, 0, 0, 0, 2, 3, 4];
        match idx_images_from_bytes(&labels, "l") {
            Err(Error::Format(m)) => assert!(m.contains("08 01"), "{m}"),
            other => panic!("{other:?}"),
        }
        let short = [0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255];
        match idx_images_from_bytes(&short, "s") {
            Err(Error::Format(m)) => assert!(m.contains("need 4") && m.contains("found 2"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx(&[0, 0, 9, 3]), Err(Error::Format(_))));
        assert!(matches!(parse_idx(&[]), Err(Error::Format(_))));
    }

    #[test]
    fn idx_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.idx");
        let ds = gen_synthetic_digits(5, 1, SynthOptions::default()).unwrap();
        let q = ds.items.map(|v| (v * 255.0).round() / 255.0);
        std::fs::write(&path, idx_encode_images(&q, 8, 8).unwrap()).unwrap();
        let back = idx_load(&path).unwrap();
        assert!(back.items.max_abs_diff(&q) < 1e-15);
        assert!(matches!(
            idx_load(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn binarize_degenerate_and_half() {
        let mut rng = Prng::new(2);
        let x = Tensor::vector(vec![0.0, 1.0]);
        for _ in 0..100 {
            assert_eq!(binarize_dynamic(&x, &mut rng).unwrap().data(), &[0.0, 1.0]);
        }
        let half = Tensor::full(&[100_000], 0.5);
        let b = binarize_dynamic(&half, &mut rng).unwrap();
        let m = b.sum() / 1e5;
        assert!((0.495..=0.505).contains(&m), "{m}");
        assert!(b.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let s1 = binarize_dynamic(&half, &mut Prng::new(9)).unwrap();
        let s2 = binarize_dynamic(&half, &mut Prng::new(9)).unwrap();
        assert_eq!(s1, s2);
        assert!(binarize_dynamic(&Tensor::vector(vec![1.5]), &mut rng).is_err());
    }

    #[test]
    fn clean_digits_are_the_stencils() {
        let ds = gen_synthetic_digits(
            10,
            3,
            SynthOptions {
                noise: 0.0,
                shift: false,
            },
        )
        .unwrap();
        for k in 0..10 {
            assert_eq!(ds.items.row(k), digit_stencil(k).as_slice());
        }
        let glyphs: std::collections::HashSet<Vec<u64>> = (0..10)
            .map(|k| digit_stencil(k).iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(glyphs.len(), 10);
    }

    #[test]
    fn noisy_digits_stay_in_range_and_replay() {
        let a = gen_synthetic_digits(200, 4, SynthOptions::default()).unwrap();
        assert!(a.items.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(
            a,
            gen_synthetic_digits(200, 4, SynthOptions::default()).unwrap()
        );
        assert_ne!(
            a,
            gen_synthetic_digits(200, 5, SynthOptions::default()).unwrap()
        );
        assert!(gen_synthetic_digits(0, 4, SynthOptions::default()).is_err());
    }

    #[test]
    fn toy_square() {
        let t = gen_toy4();
        assert_eq!(t.items.shape(), &[4, 2]);
        let c: Vec<f64> = (0..2)
            .map(|j| (0..4).map(|r| t.items.at2(r, j)).sum::<f64>())
            .collect();
        assert_eq!(c, vec![0.0, 0.0]);
        let dist = |a: usize, b: usize| {
            ((t.items.at2(a, 0) - t.items.at2(b, 0)).powi(2)
                + (t.items.at2(a, 1) - t.items.at2(b, 1)).powi(2))
            .sqrt()
        };
        for k in 0..4 {
            assert_eq!(dist(k, (k + 1) % 4), 4.0);
            assert!((dist(k, (k + 2) % 4) - 4.0 * 2f64.sqrt()).abs() < 1e-15);
        }
    }

    #[test]
    fn pgm_layout() {
        let imgs = Tensor::from_rows(2, 4, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let s = pgm_grid(&imgs, 2, 2).unwrap();
        let mut lines = s.lines();
        assert_eq!(lines.next(), Some("P2"));
        assert_eq!(lines.next(), Some("7 4"));
        assert_eq!(lines.next(), Some("255"));
        assert_eq!(lines.next(), Some("0 0 0 0 0 0 0"));
        assert_eq!(lines.next(), Some("0 255 0 0 128 128 0"));
    }
}
