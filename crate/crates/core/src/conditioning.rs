//! Conditioning inputs: deterministic stand-ins for pretrained pixel and
//! text encoders, plus the `.vxf` container for importing real features.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::TokenMatrix;
use crate::raster::{rasterize, RasterGrid};
use crate::svg::{serialize_svg, CoordMode, Document};

/// Patches per side of the stub feature grid.
pub const PATCH_GRID: usize = 16;
/// Render size the stub extractor expects.
pub const FEATURE_RENDER_SIZE: usize = 128;
/// Default pixel feature width for the stub.
pub const DEFAULT_D_P: usize = 64;
/// Values computed per patch before tiling.
pub const PATCH_STATS: usize = 8;

const VXF_MAGIC: &[u8; 4] = b"VXF1";

#[derive(Debug, Error)]
pub enum ConditioningError {
    #[error("raster is {0}x{1}, expected a square grid")]
    NonSquareGrid(usize, usize),
    #[error("not a feature file (bad magic)")]
    BadMagic,
    #[error("feature shape is {got_rows}x{got_cols}, expected {rows}x{cols}")]
    ShapeMismatch {
        rows: usize,
        cols: usize,
        got_rows: usize,
        got_cols: usize,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type PixelFeatures = TokenMatrix;

/// Per-patch color means, standard deviations and horizontal/vertical
/// gradient energy on a 16×16 patch grid, tiled to `d_p` columns, then
/// resampled along the token axis from 256 patches to `n` tokens by
/// nearest neighbour.
pub fn extract_stub_features(
    grid: &RasterGrid,
    d_p: usize,
    n: usize,
) -> Result<PixelFeatures, ConditioningError> {
    if grid.width != grid.height || grid.width == 0 {
        return Err(ConditioningError::NonSquareGrid(grid.width, grid.height));
    }
    let size = grid.width;
    let bounds = |i: usize| {
        (
            i * size / PATCH_GRID,
            ((i + 1) * size / PATCH_GRID)
                .max(i * size / PATCH_GRID + 1)
                .min(size),
        )
    };
    let luminance = |p: [f64; 3]| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    let mut patches = Vec::with_capacity(PATCH_GRID * PATCH_GRID);
    for py in 0..PATCH_GRID {
        let (y0, y1) = bounds(py);
        for px in 0..PATCH_GRID {
            let (x0, x1) = bounds(px);
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            let mut sum = [0.0; 3];
            let mut sq = [0.0; 3];
            let mut gx = 0.0;
            let mut gy = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = grid.get(x, y);
                    for c in 0..3 {
                        sum[c] += p[c];
                        sq[c] += p[c] * p[c];
                    }
                    if x + 1 < x1 {
                        gx += (luminance(grid.get(x + 1, y)) - luminance(p)).powi(2);
                    }
                    if y + 1 < y1 {
                        gy += (luminance(grid.get(x, y + 1)) - luminance(p)).powi(2);
                    }
                }
            }
            let mut stats = [0.0; PATCH_STATS];
            for c in 0..3 {
                let mean = sum[c] / count;
                stats[c] = mean;
                stats[3 + c] = (sq[c] / count - mean * mean).max(0.0).sqrt();
            }
            stats[6] = gx / count;
            stats[7] = gy / count;
            patches.push(stats);
        }
    }
    let total = patches.len();
    let mut out = TokenMatrix::zeros(n, d_p);
    for j in 0..n {
        let src = &patches[j * total / n];
        for (k, v) in out.row_mut(j).iter_mut().enumerate() {
            *v = src[k % PATCH_STATS];
        }
    }
    Ok(out)
}

/// Renders `doc` at the stub's resolution and extracts features.
pub fn document_features(doc: &Document, d_p: usize, n: usize) -> PixelFeatures {
    extract_stub_features(&rasterize(doc, FEATURE_RENDER_SIZE), d_p, n)
        .expect("rasterize returns square grids")
}

pub fn write_vxf(m: &TokenMatrix, mut out: impl Write) -> io::Result<()> {
    out.write_all(VXF_MAGIC)?;
    out.write_all(&(m.rows as u32).to_le_bytes())?;
    out.write_all(&(m.cols as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(m.data.len() * 4);
    for v in &m.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.write_all(&buf)
}

/// Reads a `.vxf` file; when `expected` is given the shape must match.
pub fn read_vxf(
    mut input: impl Read,
    expected: Option<(usize, usize)>,
) -> Result<TokenMatrix, ConditioningError> {
    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| ConditioningError::BadMagic)?;
    if &magic != VXF_MAGIC {
        return Err(ConditioningError::BadMagic);
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let rows = u32::from_le_bytes(word) as usize;
    input.read_exact(&mut word)?;
    let cols = u32::from_le_bytes(word) as usize;
    if let Some((er, ec)) = expected {
        if (er, ec) != (rows, cols) {
            return Err(ConditioningError::ShapeMismatch {
                rows: er,
                cols: ec,
                got_rows: rows,
                got_cols: cols,
            });
        }
    }
    let mut bytes = vec![0u8; rows * cols * 4];
    input.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    Ok(TokenMatrix { rows, cols, data })
}

pub fn load_features(
    path: &Path,
    expected: Option<(usize, usize)>,
) -> Result<TokenMatrix, ConditioningError> {
    read_vxf(io::BufReader::new(fs::File::open(path)?), expected)
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty());
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

/// On-disk cache of stub features keyed by document content.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn key(doc: &Document, d_p: usize, n: usize) -> String {
        let mut h = Sha256::new();
        h.update(serialize_svg(doc, CoordMode::Absolute).as_bytes());
        h.update(format!("|stub|{d_p}|{n}").as_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn path_for(&self, doc: &Document, d_p: usize, n: usize) -> PathBuf {
        self.dir.join(format!("{}.vxf", Self::key(doc, d_p, n)))
    }

    /// Cached features, computing and storing them on a miss. A corrupt
    /// entry is recomputed.
    pub fn features(&self, doc: &Document, d_p: usize, n: usize) -> io::Result<PixelFeatures> {
        let path = self.path_for(doc, d_p, n);
        if let Ok(f) = load_features(&path, Some((n, d_p))) {
            return Ok(f);
        }
        let feats = document_features(doc, d_p, n);
        let mut bytes = Vec::new();
        write_vxf(&feats, &mut bytes)?;
        write_atomic(&path, &bytes)?;
        // hand back the on-disk (f32-rounded) values so hits and misses agree
        read_vxf(bytes.as_slice(), None).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

/// Text condition; the null embedding (all zeros) means "unconditional".
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub tokens: TokenMatrix,
    pub is_null: bool,
}

impl TextEmbedding {
    pub fn null(d_txt: usize, t_txt: usize) -> Self {
        Self {
            tokens: TokenMatrix::zeros(t_txt, d_txt),
            is_null: true,
        }
    }
}

fn word_seed(word: &str) -> u64 {
    let digest = Sha256::digest(word.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Whitespace-separated words, each mapped to a pseudo-random unit vector
/// seeded by a hash of the word; padded with zero rows or truncated to
/// `t_txt`. An empty prompt gives the null embedding.
pub fn embed_text_stub(prompt: &str, d_txt: usize, t_txt: usize) -> TextEmbedding {
    let words: Vec<&str> = prompt.split_whitespace().collect();
    if words.is_empty() {
        return TextEmbedding::null(d_txt, t_txt);
    }
    let mut tokens = TokenMatrix::zeros(t_txt, d_txt);
    for (i, word) in words.iter().take(t_txt).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(word_seed(word));
        let v: Vec<f64> = (0..d_txt).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        for (dst, x) in tokens.row_mut(i).iter_mut().zip(&v) {
            *dst = x / norm;
        }
    }
    TextEmbedding {
        tokens,
        is_null: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_grid_features() {
        let f = extract_stub_features(&RasterGrid::white(128, 128), 64, 32).unwrap();
        assert_eq!((f.rows, f.cols), (32, 64));
        for i in 0..f.rows {
            let r = f.row(i);
            assert_eq!(&r[..3], &[1.0; 3]);
            assert_eq!(&r[3..8], &[0.0; 5]);
            assert_eq!(r[8], 1.0);
        }
    }

    #[test]
    fn half_black_grids_differ() {
        let mut left = RasterGrid::white(128, 128);
        let mut right = RasterGrid::white(128, 128);
        for y in 0..128 {
            for x in 0..64 {
                left.pixels[y * 128 + x] = [0.0; 3];
                right.pixels[y * 128 + 64 + x] = [0.0; 3];
            }
        }
        let a = extract_stub_features(&left, 64, 1024).unwrap();
        let b = extract_stub_features(&right, 64, 1024).unwrap();
        let d: f64 = a
            .data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).powi(2))
            .sum();
        assert!(d > 0.0);
        assert_eq!(a, extract_stub_features(&left, 64, 1024).unwrap());
    }

    #[test]
    fn non_square_rejected() {
        assert!(matches!(
            extract_stub_features(&RasterGrid::white(4, 8), 8, 8),
            Err(ConditioningError::NonSquareGrid(4, 8))
        ));
    }

    #[test]
    fn vxf_round_trip_and_errors() {
        let m = TokenMatrix {
            rows: 2,
            cols: 3,
            data: vec![0.5, -1.25, 3.0, 0.0, 1e-3_f32 as f64, 7.0],
        };
        let mut bytes = Vec::new();
        write_vxf(&m, &mut bytes).unwrap();
        assert_eq!(read_vxf(bytes.as_slice(), Some((2, 3))).unwrap(), m);
        assert!(matches!(
            read_vxf(bytes.as_slice(), Some((2, 4))),
            Err(ConditioningError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            read_vxf(&b"VXF"[..], None),
            Err(ConditioningError::BadMagic)
        ));
        bytes.truncate(bytes.len() - 1);
        assert!(read_vxf(bytes.as_slice(), None).is_err());
    }

    #[test]
    fn text_stub() {
        let null = embed_text_stub("  ", 64, 8);
        assert!(null.is_null && null.tokens.data.iter().all(|v| *v == 0.0));
        let a = embed_text_stub("rocket", 64, 8);
        assert_eq!(a, embed_text_stub("rocket", 64, 8));
        assert!(!a.is_null);
        let b = embed_text_stub("umbrella", 64, 8);
        let cos: f64 = a
            .tokens
            .row(0)
            .iter()
            .zip(b.tokens.row(0))
            .map(|(x, y)| x * y)
            .sum();
        assert!(cos < 0.5);
        assert!(a.tokens.row(1).iter().all(|v| *v == 0.0));
        let long = embed_text_stub("a b c d e f g h i j", 16, 4);
        assert_eq!(long.tokens.rows, 4);
    }
}
