//! Binary activation shards, one file per hook site.
//!
//! Layout (little-endian):
//!
//! ```text
//! 0   "TSAC"
//! 4   version      u32
//! 8   site kind    u8
//! 9   site block   u32
//! 13  d_model      u32
//! 17  n_rows       u64
//! 25  rows         n_rows * d_model f32
//! ..  manifest     UTF-8 JSON
//! -8  manifest offset u64
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{HookSite, Model, SiteKind};
use crate::numerics::{derive_seed, Float, Matrix};
use crate::tokenizer::PreparedWindow;

const MAGIC: &[u8; 4] = b"TSAC";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 25;
const TRAILER_LEN: u64 = 8;

/// One window's block of rows.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub window_id: u64,
    pub series: String,
    /// Offset of the window's first context point in its series.
    pub series_start: usize,
    pub row_offset: u64,
    pub count: u64,
}

/// Per-dimension mean and (population) standard deviation, plus the mean
/// row L2 norm. Accumulated in f64 in row order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub mean_row_norm: f64,
}

/// Row-order accumulator behind [`ShardStats`].
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    n: u64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
    norm_sum: f64,
}

impl StatsAccumulator {
    pub fn new(d_model: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; d_model],
            sum_sq: vec![0.0; d_model],
            norm_sum: 0.0,
        }
    }

    pub fn push_row(&mut self, row: &[Float]) {
        let mut sq = 0.0;
        for ((s, s2), &v) in self.sum.iter_mut().zip(&mut self.sum_sq).zip(row) {
            let v = v as f64;
            *s += v;
            *s2 += v * v;
            sq += v * v;
        }
        self.norm_sum += sq.sqrt();
        self.n += 1;
    }

    pub fn finish(&self) -> ShardStats {
        let n = self.n.max(1) as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let std = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(s2, m)| (s2 / n - m * m).max(0.0).sqrt())
            .collect();
        ShardStats {
            mean,
            std,
            mean_row_norm: self.norm_sum / n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Footer {
    entries: Vec<ManifestEntry>,
    stats: ShardStats,
}

/// Streaming writer. Rows go straight to disk; the manifest is written by
/// [`ShardWriter::finish`].
pub struct ShardWriter {
    path: PathBuf,
    out: BufWriter<File>,
    site: HookSite,
    d_model: usize,
    n_rows: u64,
    entries: Vec<ManifestEntry>,
    stats: StatsAccumulator,
}

impl ShardWriter {
    pub fn create(path: &Path, site: HookSite, d_model: usize) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            site,
            d_model,
            n_rows: 0,
            entries: Vec::new(),
            stats: StatsAccumulator::new(d_model),
        };
        w.write_header()?;
        Ok(w)
    }

    fn write_header(&mut self) -> Result<()> {
        let mut h = Vec::with_capacity(HEADER_LEN as usize);
        h.extend_from_slice(MAGIC);
        h.extend_from_slice(&VERSION.to_le_bytes());
        h.push(self.site.kind.code());
        h.extend_from_slice(&(self.site.block_index as u32).to_le_bytes());
        h.extend_from_slice(&(self.d_model as u32).to_le_bytes());
        h.extend_from_slice(&self.n_rows.to_le_bytes());
        self.out.write_all(&h).map_err(|e| Error::io(&self.path, e))
    }

    /// Appends the rows captured for one window.
    pub fn append(&mut self, window_id: u64, series: &str, series_start: usize, rows: &Matrix) -> Result<()> {
        if rows.cols() != self.d_model {
            return Err(Error::Dimension {
                op: "shard append",
                left: (rows.rows(), rows.cols()),
                right: (0, self.d_model),
            });
        }
        if !rows.is_finite() {
            return Err(Error::Divergence {
                step: 0,
                what: format!("non-finite activation in window {window_id} at {}", self.site),
            });
        }
        let mut buf = Vec::with_capacity(rows.as_slice().len() * 4);
        for r in 0..rows.rows() {
            self.stats.push_row(rows.row(r));
        }
        for &v in rows.as_slice() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        self.out.write_all(&buf).map_err(|e| Error::io(&self.path, e))?;
        self.entries.push(ManifestEntry {
            window_id,
            series: series.to_string(),
            series_start,
            row_offset: self.n_rows,
            count: rows.rows() as u64,
        });
        self.n_rows += rows.rows() as u64;
        Ok(())
    }

    /// Writes the manifest and trailer and patches the row count.
    pub fn finish(mut self) -> Result<PathBuf> {
        let footer = Footer {
            entries: std::mem::take(&mut self.entries),
            stats: self.stats.finish(),
        };
        let footer_offset = HEADER_LEN + self.n_rows * self.d_model as u64 * 4;
        let io = |e| Error::io(&self.path, e);
        self.out.write_all(&serde_json::to_vec(&footer)?).map_err(io)?;
        self.out.write_all(&footer_offset.to_le_bytes()).map_err(io)?;
        self.out.seek(SeekFrom::Start(17)).map_err(io)?;
        self.out.write_all(&self.n_rows.to_le_bytes()).map_err(io)?;
        self.out.flush().map_err(io)?;
        Ok(self.path)
    }
}

/// An opened, validated shard. Only the header and manifest are held in
/// memory; rows are read on demand.
#[derive(Debug, Clone)]
pub struct Shard {
    pub path: PathBuf,
    pub site: HookSite,
    pub d_model: usize,
    pub n_rows: usize,
    pub entries: Vec<ManifestEntry>,
    pub stats: ShardStats,
}

fn format_err(path: &Path, offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset,
        msg: msg.into(),
    }
}

impl Shard {
    pub fn open(path: &Path) -> Result<Self> {
        let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
        let len = f.metadata().map_err(|e| Error::io(path, e))?.len();
        let mut h = [0u8; HEADER_LEN as usize];
        if len < HEADER_LEN + TRAILER_LEN {
            return Err(format_err(path, len, "file shorter than header and trailer"));
        }
        f.read_exact(&mut h).map_err(|e| Error::io(path, e))?;
        if &h[0..4] != MAGIC {
            return Err(format_err(path, 0, "bad magic, expected TSAC"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(h[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(format_err(path, 4, format!("unsupported version {version}")));
        }
        let kind = SiteKind::from_code(h[8]).ok_or_else(|| format_err(path, 8, format!("unknown site kind {}", h[8])))?;
        let site = HookSite {
            kind,
            block_index: u32_at(9) as usize,
        };
        let d_model = u32_at(13) as usize;
        let n_rows = u64::from_le_bytes(h[17..25].try_into().unwrap());
        if d_model == 0 {
            return Err(format_err(path, 13, "d_model is zero"));
        }
        let footer_offset = n_rows
            .checked_mul(d_model as u64 * 4)
            .and_then(|b| b.checked_add(HEADER_LEN))
            .ok_or_else(|| format_err(path, 17, "row count overflows"))?;
        if footer_offset > len - TRAILER_LEN {
            return Err(format_err(path, len, format!("truncated row block, expected at least {footer_offset} bytes")));
        }
        f.seek(SeekFrom::Start(len - TRAILER_LEN)).map_err(|e| Error::io(path, e))?;
        let mut t = [0u8; 8];
        f.read_exact(&mut t).map_err(|e| Error::io(path, e))?;
        let stored = u64::from_le_bytes(t);
        if stored != footer_offset {
            return Err(format_err(
                path,
                len - TRAILER_LEN,
                format!("trailer points to {stored}, row block ends at {footer_offset}"),
            ));
        }
        f.seek(SeekFrom::Start(footer_offset)).map_err(|e| Error::io(path, e))?;
        let mut json = vec![0u8; (len - TRAILER_LEN - footer_offset) as usize];
        f.read_exact(&mut json).map_err(|e| Error::io(path, e))?;
        let footer: Footer = serde_json::from_slice(&json)
            .map_err(|e| format_err(path, footer_offset, format!("manifest: {e}")))?;
        let covered: u64 = footer.entries.iter().map(|e| e.count).sum();
        if covered != n_rows {
            return Err(format_err(
                path,
                footer_offset,
                format!("manifest covers {covered} rows, header says {n_rows}"),
            ));
        }
        Ok(Self {
            path: path.to_path_buf(),
            site,
            d_model,
            n_rows: n_rows as usize,
            entries: footer.entries,
            stats: footer.stats,
        })
    }

    fn open_data(&self) -> Result<File> {
        File::open(&self.path).map_err(|e| Error::io(&self.path, e))
    }

    /// Rows `start..start + count` in file order.
    pub fn read_rows(&self, start: usize, count: usize) -> Result<Matrix> {
        if start + count > self.n_rows {
            return Err(Error::OutOfRange {
                what: "shard row",
                index: start + count,
                limit: self.n_rows,
            });
        }
        let mut f = self.open_data()?;
        let off = HEADER_LEN + (start * self.d_model * 4) as u64;
        f.seek(SeekFrom::Start(off)).map_err(|e| Error::io(&self.path, e))?;
        let mut bytes = vec![0u8; count * self.d_model * 4];
        f.read_exact(&mut bytes)
            .map_err(|_| format_err(&self.path, off, "truncated row block"))?;
        Matrix::from_vec(count, self.d_model, decode_f32(&bytes))
    }

    pub fn read_all(&self) -> Result<Matrix> {
        self.read_rows(0, self.n_rows)
    }

    /// One epoch of batches. With a seed, rows are visited in a seeded
    /// permutation; without one, in file order. The final batch holds the
    /// remainder.
    pub fn stream_batches(&self, batch: usize, shuffle_seed: Option<u64>) -> Result<BatchStream> {
        if batch == 0 {
            return Err(Error::Empty("batch size"));
        }
        let order = match shuffle_seed {
            Some(seed) => epoch_permutation(self.n_rows, seed, 0),
            None => (0..self.n_rows).collect(),
        };
        Ok(BatchStream {
            file: self.open_data()?,
            path: self.path.clone(),
            d_model: self.d_model,
            order,
            next: 0,
            batch,
        })
    }
}

fn decode_f32(bytes: &[u8]) -> Vec<Float> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Float)
        .collect()
}

/// Row visiting order for one epoch.
pub fn epoch_permutation(n_rows: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n_rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch));
    order.shuffle(&mut rng);
    order
}

/// Iterator over `batch x d_model` matrices read from disk.
pub struct BatchStream {
    file: File,
    path: PathBuf,
    d_model: usize,
    order: Vec<usize>,
    next: usize,
    batch: usize,
}

impl BatchStream {
    fn read_batch(&mut self, rows: &[usize]) -> Result<Matrix> {
        let width = self.d_model * 4;
        let mut bytes = vec![0u8; rows.len() * width];
        // Runs of consecutive rows are read with one call.
        let mut i = 0;
        while i < rows.len() {
            let mut j = i + 1;
            while j < rows.len() && rows[j] == rows[j - 1] + 1 {
                j += 1;
            }
            let off = HEADER_LEN + (rows[i] * width) as u64;
            self.file
                .seek(SeekFrom::Start(off))
                .map_err(|e| Error::io(&self.path, e))?;
            self.file
                .read_exact(&mut bytes[i * width..j * width])
                .map_err(|_| format_err(&self.path, off, "truncated row block"))?;
            i = j;
        }
        Matrix::from_vec(rows.len(), self.d_model, decode_f32(&bytes))
    }
}

impl Iterator for BatchStream {
    type Item = Result<Matrix>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch).min(self.order.len());
        let rows = self.order[self.next..end].to_vec();
        self.next = end;
        Some(self.read_batch(&rows))
    }
}

/// Opens `path` and streams one epoch; see [`Shard::stream_batches`].
pub fn stream_batches(path: &Path, batch: usize, shuffle_seed: Option<u64>) -> Result<BatchStream> {
    Shard::open(path)?.stream_batches(batch, shuffle_seed)
}

/// File name used for a site's shard within a set (`train`, `suite`, ...).
pub fn shard_file_name(site: HookSite, set: &str) -> String {
    format!("{site}.{set}.tsac")
}

/// Runs teacher-forced passes over `windows` and writes one shard per site
/// into `out_dir`, named by [`shard_file_name`]. Encoder sites get one row
/// per context position, decoder-side sites one per target position.
pub fn extract(
    model: &Model,
    windows: &[PreparedWindow],
    sites: &[HookSite],
    out_dir: &Path,
    set: &str,
) -> Result<Vec<PathBuf>> {
    let d_model = model.config.d_model;
    for &s in sites {
        model.config.validate_site(s)?;
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let paths: Vec<PathBuf> = sites.iter().map(|&s| out_dir.join(shard_file_name(s, set))).collect();
    for p in &paths {
        if p.exists() {
            if let Ok(old) = Shard::open(p) {
                if old.d_model != d_model {
                    return Err(Error::Dimension {
                        op: "extract into existing shard",
                        left: (old.n_rows, old.d_model),
                        right: (0, d_model),
                    });
                }
            }
        }
    }
    let mut writers = sites
        .iter()
        .zip(&paths)
        .map(|(&s, p)| ShardWriter::create(p, s, d_model))
        .collect::<Result<Vec<_>>>()?;
    for w in windows {
        let captured = model.forward_capture(&w.tokens, sites)?;
        for (writer, site) in writers.iter_mut().zip(sites) {
            let rows = &captured[site];
            writer.append(w.id, &w.window.source.series, w.window.source.offset, rows)?;
        }
    }
    writers.into_iter().map(ShardWriter::finish).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::ModelConfig;
    use crate::series::{gen_diagnostic_suite, make_windows};
    use crate::tokenizer::{prepare_windows, TokenizerConfig};

    fn rows(n: usize, d: usize, base: f32) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|i| (base + i as f32 * 0.25) as Float).collect()).unwrap()
    }

    fn write_shard(dir: &Path, sizes: &[usize], d: usize) -> (PathBuf, Matrix) {
        let p = dir.join("s.tsac");
        let mut w = ShardWriter::create(&p, HookSite::encoder(1), d).unwrap();
        let mut all = Matrix::zeros(0, d);
        for (i, &n) in sizes.iter().enumerate() {
            let m = rows(n, d, i as f32 * 100.0);
            w.append(i as u64, "s", i * 10, &m).unwrap();
            all.push_rows(&m).unwrap();
        }
        (w.finish().unwrap(), all)
    }

    #[test]
    fn read_after_write_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let (p, all) = write_shard(dir.path(), &[3, 5, 2], 4);
        let s = Shard::open(&p).unwrap();
        assert_eq!(s.n_rows, 10);
        assert_eq!(s.site, HookSite::encoder(1));
        assert_eq!(s.entries[1].row_offset, 3);
        assert_eq!(s.entries[1].count, 5);
        assert_eq!(s.read_all().unwrap(), all);
        let mut streamed = Matrix::zeros(0, 4);
        for b in s.stream_batches(4, None).unwrap() {
            streamed.push_rows(&b.unwrap()).unwrap();
        }
        assert_eq!(streamed, all);
    }

    #[test]
    fn batch_sizes_follow_remainder() {
        let dir = tempfile::tempdir().unwrap();
        let (p, _) = write_shard(dir.path(), &[960], 2);
        let sizes: Vec<usize> = stream_batches(&p, 256, Some(1))
            .unwrap()
            .map(|b| b.unwrap().rows())
            .collect();
        assert_eq!(sizes, vec![256, 256, 256, 192]);
        let one: Vec<usize> = stream_batches(&p, 5000, None).unwrap().map(|b| b.unwrap().rows()).collect();
        assert_eq!(one, vec![960]);
    }

    #[test]
    fn shuffled_epoch_is_a_deterministic_permutation() {
        let dir = tempfile::tempdir().unwrap();
        let (p, all) = write_shard(dir.path(), &[37], 3);
        let collect = |seed| {
            let mut m = Matrix::zeros(0, 3);
            for b in stream_batches(&p, 8, Some(seed)).unwrap() {
                m.push_rows(&b.unwrap()).unwrap();
            }
            m
        };
        let a = collect(9);
        assert_eq!(a, collect(9));
        assert_ne!(a, all);
        let key = |m: &Matrix| {
            let mut v: Vec<Vec<u64>> = (0..m.rows())
                .map(|r| m.row(r).iter().map(|x| x.to_bits() as u64).collect())
                .collect();
            v.sort();
            v
        };
        assert_eq!(key(&a), key(&all));
    }

    #[test]
    fn stats_match_a_streamed_recomputation() {
        let dir = tempfile::tempdir().unwrap();
        let (p, _) = write_shard(dir.path(), &[7, 4], 3);
        let s = Shard::open(&p).unwrap();
        let mut acc = StatsAccumulator::new(3);
        for b in s.stream_batches(3, None).unwrap() {
            let b = b.unwrap();
            for r in 0..b.rows() {
                acc.push_row(b.row(r));
            }
        }
        assert_eq!(acc.finish(), s.stats);
        assert!(s.stats.std.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn wrong_width_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = ShardWriter::create(&dir.path().join("x.tsac"), HookSite::encoder(0), 32).unwrap();
        assert!(matches!(
            w.append(0, "s", 0, &Matrix::zeros(2, 64)),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn corruption_reports_byte_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let (p, _) = write_shard(dir.path(), &[6], 4);
        let good = fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(Shard::open(&p), Err(Error::Format { offset: 0, .. })));

        fs::write(&p, &good[..40]).unwrap();
        assert!(matches!(Shard::open(&p), Err(Error::Format { offset: 40, .. })));

        let mut bad = good.clone();
        bad[8] = 9;
        fs::write(&p, &bad).unwrap();
        assert!(matches!(Shard::open(&p), Err(Error::Format { offset: 8, .. })));
    }

    #[test]
    fn extract_counts_rows_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            n_encoder_blocks: 2,
            n_decoder_blocks: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab: 18,
            max_context: 16,
            seed: 3,
        };
        let model = Model::new(cfg).unwrap();
        let tok = TokenizerConfig {
            n_bins: 16,
            clip_lo: -3.0,
            clip_hi: 3.0,
        };
        let suite = gen_diagnostic_suite(2, 1, 128);
        let ws = make_windows(&suite[0].series, 12, 4, 10, 4, 1).unwrap();
        let prepared = prepare_windows(ws, &tok, 0);
        assert_eq!(prepared.len(), 10);
        let sites = [HookSite::encoder(1), HookSite::decoder(0), HookSite::cross_attention(1)];
        let paths = extract(&model, &prepared, &sites, dir.path(), "t").unwrap();
        let enc = Shard::open(&paths[0]).unwrap();
        assert_eq!(enc.n_rows, 120);
        assert_eq!(Shard::open(&paths[1]).unwrap().n_rows, 40);
        let first = fs::read(&paths[0]).unwrap();
        extract(&model, &prepared, &sites, dir.path(), "t").unwrap();
        assert_eq!(fs::read(&paths[0]).unwrap(), first);

        let wide = Model::new(ModelConfig { d_model: 16, ..cfg }).unwrap();
        assert!(matches!(
            extract(&wide, &prepared, &sites, dir.path(), "t"),
            Err(Error::Dimension { .. })
        ));
    }
}
