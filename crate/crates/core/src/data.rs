//! Dataset ingestion, stratified splits, normalization and a binary cache.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{invalid, Error, Result};
use crate::rng;

/// Row-major feature matrix with integer labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub n: usize,
    pub m: usize,
    pub x: Vec<f64>,
    pub y: Vec<usize>,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn new(m: usize, x: Vec<f64>, y: Vec<usize>, feature_names: Vec<String>, class_names: Vec<String>) -> Result<Self> {
        let n = y.len();
        if x.len() != n * m {
            return Err(Error::Data(format!("{} values for {n} rows of {m} features", x.len())));
        }
        if feature_names.len() != m {
            return Err(Error::Data(format!("{} feature names for {m} features", feature_names.len())));
        }
        if let Some(&bad) = y.iter().find(|&&v| v >= class_names.len()) {
            return Err(Error::Data(format!("label {bad} outside {} classes", class_names.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite feature value".into()));
        }
        Ok(Self { n, m, x, y, feature_names, class_names })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.m..(i + 1) * self.m]
    }

    /// Selected rows as a tensor.
    pub fn features<T: Scalar>(&self, idx: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(idx.len() * self.m);
        for &i in idx {
            data.extend(self.row(i).iter().map(|&v| T::from_f64_lossy(v)));
        }
        Tensor::new(idx.len(), self.m, data).expect("row lengths match")
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.y[i]).collect()
    }

    /// Product of rows and post-encoding features.
    pub fn size(&self) -> usize {
        self.n * self.m
    }
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSchema {
    pub label_column: String,
    #[serde(default)]
    pub categorical: Vec<String>,
    /// Single-byte delimiter; defaults to `,`.
    #[serde(default)]
    pub delimiter: Option<char>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CsvReport {
    pub rows_read: usize,
    pub dropped: usize,
}

fn is_missing(cell: &str) -> bool {
    let c = cell.trim();
    c.is_empty() || c == "?" || c.eq_ignore_ascii_case("na") || c.eq_ignore_ascii_case("nan")
}

/// Reads a headed CSV. Numeric columns are kept in file order, categorical
/// columns are one-hot encoded after them (levels in first-appearance
/// order), and labels are numbered by first appearance. Rows with any
/// missing cell are dropped.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<(Dataset, CsvReport)> {
    let delim = schema.delimiter.unwrap_or(',');
    if !delim.is_ascii() {
        return Err(invalid(format!("delimiter {delim:?} is not a single byte")));
    }
    let mut reader = csv::ReaderBuilder::new().delimiter(delim as u8).has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    let label_col = headers
        .iter()
        .position(|h| *h == schema.label_column)
        .ok_or_else(|| Error::Data(format!("label column {:?} not in header", schema.label_column)))?;
    let mut cat_cols = Vec::new();
    for c in &schema.categorical {
        let pos = headers.iter().position(|h| h == c).ok_or_else(|| Error::Data(format!("categorical column {c:?} not in header")))?;
        if pos == label_col {
            return Err(invalid(format!("{c:?} is the label column")));
        }
        cat_cols.push(pos);
    }
    let num_cols: Vec<usize> = (0..headers.len()).filter(|c| *c != label_col && !cat_cols.contains(c)).collect();

    let mut rows_read = 0;
    let mut kept: Vec<csv::StringRecord> = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        rows_read += 1;
        if rec.len() != headers.len() {
            return Err(Error::Data(format!("row {}: {} fields, header has {}", line + 2, rec.len(), headers.len())));
        }
        if rec.iter().any(is_missing) {
            continue;
        }
        kept.push(rec);
    }
    if rows_read == 0 {
        return Err(Error::Data(format!("{}: no data rows", path.display())));
    }

    let mut levels: Vec<Vec<String>> = vec![Vec::new(); cat_cols.len()];
    let mut class_names: Vec<String> = Vec::new();
    for rec in &kept {
        for (j, &c) in cat_cols.iter().enumerate() {
            let v = rec[c].trim();
            if !levels[j].iter().any(|l| l == v) {
                levels[j].push(v.to_string());
            }
        }
        let lab = rec[label_col].trim();
        if !class_names.iter().any(|l| l == lab) {
            class_names.push(lab.to_string());
        }
    }

    let mut feature_names: Vec<String> = num_cols.iter().map(|&c| headers[c].clone()).collect();
    for (j, &c) in cat_cols.iter().enumerate() {
        feature_names.extend(levels[j].iter().map(|l| format!("{}={l}", headers[c])));
    }
    let m = feature_names.len();
    let mut x = Vec::with_capacity(kept.len() * m);
    let mut y = Vec::with_capacity(kept.len());
    for (r, rec) in kept.iter().enumerate() {
        for &c in &num_cols {
            let cell = rec[c].trim();
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!("non-numeric value {cell:?} in column {:?} (data row {})", headers[c], r + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite value in column {:?}", headers[c])));
            }
            x.push(v);
        }
        for (j, &c) in cat_cols.iter().enumerate() {
            let v = rec[c].trim();
            x.extend(levels[j].iter().map(|l| if l == v { 1.0 } else { 0.0 }));
        }
        let lab = rec[label_col].trim();
        y.push(class_names.iter().position(|l| l == lab).expect("label seen in first pass"));
    }
    let dropped = rows_read - kept.len();
    Ok((Dataset::new(m, x, y, feature_names, class_names)?, CsvReport { rows_read, dropped }))
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format { path: path.to_path_buf(), message: "truncated header".into() })
}

/// Parses an IDX image file: returns `(count, rows * cols, pixels)`.
pub fn parse_idx_images<'a>(bytes: &'a [u8], path: &Path) -> Result<(usize, usize, &'a [u8])> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES {
        return Err(Error::Format { path: path.to_path_buf(), message: format!("image magic {magic:#010x}, expected {IDX_IMAGES:#010x}") });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let r = be_u32(bytes, 8, path)? as usize;
    let c = be_u32(bytes, 12, path)? as usize;
    let need = n * r * c;
    let body = &bytes[16..];
    if body.len() < need {
        return Err(Error::Format { path: path.to_path_buf(), message: format!("truncated: {} of {need} pixel bytes", body.len()) });
    }
    Ok((n, r * c, &body[..need]))
}

pub fn parse_idx_labels<'a>(bytes: &'a [u8], path: &Path) -> Result<&'a [u8]> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS {
        return Err(Error::Format { path: path.to_path_buf(), message: format!("label magic {magic:#010x}, expected {IDX_LABELS:#010x}") });
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let body = &bytes[8..];
    if body.len() < n {
        return Err(Error::Format { path: path.to_path_buf(), message: format!("truncated: {} of {n} labels", body.len()) });
    }
    Ok(&body[..n])
}

/// Loads an IDX image/label pair (optionally gzipped), flattening each image
/// and scaling pixels to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img_bytes = read_maybe_gz(images)?;
    let lab_bytes = read_maybe_gz(labels)?;
    let (n, m, pixels) = parse_idx_images(&img_bytes, images)?;
    let labs = parse_idx_labels(&lab_bytes, labels)?;
    if labs.len() != n {
        return Err(Error::Format { path: labels.to_path_buf(), message: format!("{} labels for {n} images", labs.len()) });
    }
    let x = pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    let k = labs.iter().copied().max().map_or(0, |v| v as usize + 1).max(10);
    let y = labs.iter().map(|&v| v as usize).collect();
    Dataset::new(m, x, y, (0..m).map(|i| format!("px{i}")).collect(), (0..k).map(|c| c.to_string()).collect())
}

/// Loads every `*images-idx3-ubyte[.gz]` file in `dir` with its matching
/// labels file and concatenates them in file-name order.
pub fn load_idx_dir(dir: &Path) -> Result<Dataset> {
    let mut pairs: Vec<(PathBuf, PathBuf)> = Vec::new();
    let mut names: Vec<PathBuf> = std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).collect();
    names.sort();
    for p in &names {
        let Some(name) = p.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(pos) = name.find("images-idx3-ubyte") {
            let label_name = format!("{}labels-idx1-ubyte{}", &name[..pos], &name[pos + "images-idx3-ubyte".len()..]);
            let lp = dir.join(label_name);
            if lp.exists() {
                pairs.push((p.clone(), lp));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("no IDX image/label pairs in {}", dir.display())));
    }
    let mut out: Option<Dataset> = None;
    for (img, lab) in pairs {
        let d = load_idx(&img, &lab)?;
        out = Some(match out {
            None => d,
            Some(mut acc) => {
                if acc.m != d.m {
                    return Err(Error::Data(format!("{} has {} features, expected {}", img.display(), d.m, acc.m)));
                }
                acc.x.extend(d.x);
                acc.y.extend(d.y);
                acc.n += d.n;
                acc
            }
        });
    }
    Ok(out.expect("at least one pair"))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Two Gaussian classes in `m` dimensions whose means differ by `separation`
/// along the first `informative` features. Classes alternate by row.
pub fn synthetic_two_class(n: usize, m: usize, informative: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if informative > m {
        return Err(invalid(format!("{informative} informative features out of {m}")));
    }
    let mut r = rng::stream(seed, "data/synthetic");
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut x = Vec::with_capacity(n * m);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let shift = if label == 1 { separation / 2.0 } else { -separation / 2.0 };
        for j in 0..m {
            let v: f64 = normal.sample(&mut r);
            x.push(if j < informative { v + shift } else { v });
        }
        y.push(label);
    }
    Dataset::new(m, x, y, (0..m).map(|j| format!("f{j}")).collect(), vec!["0".into(), "1".into()])
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

pub const SPLIT_FRACTIONS: [f64; 3] = [0.6, 0.2, 0.2];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// False when some class was too small to appear in every part.
    pub stratified: bool,
}

impl Split {
    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }
}

fn targets(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut t: Vec<usize> = fractions[..fractions.len() - 1].iter().map(|f| (f * n as f64).round() as usize).collect();
    let used: usize = t.iter().sum();
    t.push(n.saturating_sub(used));
    t
}

/// Partitions `indices` into parts of the given fractions. Each class is
/// spread across parts proportionally; classes with at least as many members
/// as there are parts get one member in every part. Falls back to an
/// unstratified shuffle when any class is smaller than that.
pub fn partition(indices: &[usize], labels: &[usize], fractions: &[f64], rng: &mut rng::Rng) -> (Vec<Vec<usize>>, bool) {
    let parts = fractions.len();
    let n = indices.len();
    let goal = targets(n, fractions);
    let k = indices.iter().map(|&i| labels[i] + 1).max().unwrap_or(0);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &i in indices {
        by_class[labels[i]].push(i);
    }
    by_class.retain(|c| !c.is_empty());
    let stratified = by_class.iter().all(|c| c.len() >= parts);

    let mut out: Vec<Vec<usize>> = vec![Vec::new(); parts];
    if !stratified {
        let mut all = indices.to_vec();
        all.shuffle(rng);
        let mut start = 0;
        for (p, &size) in goal.iter().enumerate() {
            out[p] = all[start..start + size].to_vec();
            start += size;
        }
    } else {
        // Floors of the per-class quotas, at least one per part, then the
        // remaining members go to the cells with the largest remainders
        // while the part is still below its global target.
        let mut alloc: Vec<Vec<usize>> = Vec::with_capacity(by_class.len());
        let mut rema: Vec<(f64, usize, usize)> = Vec::new();
        for (c, members) in by_class.iter().enumerate() {
            let nc = members.len();
            let row: Vec<usize> = fractions.iter().map(|f| ((f * nc as f64).floor() as usize).max(1)).collect();
            for (p, f) in fractions.iter().enumerate() {
                rema.push((f * nc as f64 - row[p] as f64, c, p));
            }
            alloc.push(row);
        }
        rema.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut filled: Vec<usize> = (0..parts).map(|p| alloc.iter().map(|r| r[p]).sum()).collect();
        let mut left: Vec<usize> = by_class.iter().zip(&alloc).map(|(m, r)| m.len() - r.iter().sum::<usize>()).collect();
        while left.iter().any(|&l| l > 0) {
            let mut progressed = false;
            for &(_, c, p) in &rema {
                if left[c] > 0 && filled[p] < goal[p] {
                    alloc[c][p] += 1;
                    filled[p] += 1;
                    left[c] -= 1;
                    progressed = true;
                }
            }
            if !progressed {
                // Minimum-one bumps overshot the targets; place the rest by remainder.
                for &(_, c, p) in &rema {
                    if left[c] > 0 {
                        alloc[c][p] += 1;
                        left[c] -= 1;
                    }
                }
            }
        }
        for (members, row) in by_class.iter_mut().zip(&alloc) {
            members.shuffle(rng);
            let mut start = 0;
            for (p, &cnt) in row.iter().enumerate() {
                out[p].extend_from_slice(&members[start..start + cnt]);
                start += cnt;
            }
        }
    }
    for part in &mut out {
        part.sort_unstable();
    }
    (out, stratified)
}

/// Seeded 60/20/20 train/validation/test split.
pub fn split(labels: &[usize], seed: u64) -> Result<Split> {
    if labels.len() < 5 {
        return Err(invalid(format!("need at least 5 rows to split, got {}", labels.len())));
    }
    let idx: Vec<usize> = (0..labels.len()).collect();
    let (mut parts, stratified) = partition(&idx, labels, &SPLIT_FRACTIONS, &mut rng::stream(seed, "data/split"));
    let test = parts.pop().expect("three parts");
    let val = parts.pop().expect("three parts");
    let train = parts.pop().expect("three parts");
    Ok(Split { train, val, test, stratified })
}

/// Redraws train and validation from their union with a new seed, keeping
/// the test rows and the 3:1 ratio.
pub fn resplit_train_val(base: &Split, labels: &[usize], seed: u64) -> Split {
    let mut pool: Vec<usize> = base.train.iter().chain(&base.val).copied().collect();
    pool.sort_unstable();
    let (mut parts, stratified) = partition(&pool, labels, &[0.75, 0.25], &mut rng::stream(seed, "data/resplit"));
    let val = parts.pop().expect("two parts");
    let train = parts.pop().expect("two parts");
    Split { train, val, test: base.test.clone(), stratified: stratified && base.stratified }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl NormStats {
    /// Population mean and standard deviation over `rows`.
    pub fn fit(data: &Dataset, rows: &[usize]) -> Self {
        let m = data.m;
        let mut mean = vec![0.0; m];
        let mut sd = vec![0.0; m];
        if rows.is_empty() {
            return Self { mean, sd };
        }
        let n = rows.len() as f64;
        for &i in rows {
            for (a, v) in mean.iter_mut().zip(data.row(i)) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n);
        for &i in rows {
            for ((s, v), mu) in sd.iter_mut().zip(data.row(i)).zip(&mean) {
                *s += (v - mu) * (v - mu);
            }
        }
        sd.iter_mut().for_each(|s| *s = (*s / n).sqrt());
        Self { mean, sd }
    }

    /// Z-scores every row; zero-variance features become 0.
    pub fn apply(&self, data: &Dataset) -> Dataset {
        let mut out = data.clone();
        for row in out.x.chunks_mut(data.m) {
            for ((v, mu), s) in row.iter_mut().zip(&self.mean).zip(&self.sd) {
                *v = if *s > 0.0 { (*v - mu) / s } else { 0.0 };
            }
        }
        out
    }
}

pub fn normalize(data: &Dataset, split: &Split) -> (Dataset, NormStats) {
    let stats = NormStats::fit(data, &split.train);
    (stats.apply(data), stats)
}

// ---------------------------------------------------------------------------
// Binary cache
// ---------------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 8] = b"RSSDATA\0";
pub const CACHE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    n: usize,
    m: usize,
    feature_names: Vec<String>,
    class_names: Vec<String>,
    split: Option<Split>,
}

/// Writes `data` (and optionally a split) as: magic, version (u32 LE),
/// metadata length (u64 LE), JSON metadata, `n*m` f64 LE features,
/// `n` u32 LE labels.
pub fn save_cache(path: &Path, data: &Dataset, split: Option<&Split>) -> Result<()> {
    let meta = CacheMeta {
        n: data.n,
        m: data.m,
        feature_names: data.feature_names.clone(),
        class_names: data.class_names.clone(),
        split: split.cloned(),
    };
    let meta = serde_json::to_vec(&meta)?;
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        for v in &data.x {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
        for &v in &data.y {
            let v = u32::try_from(v).map_err(|_| invalid("label does not fit in u32"))?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

pub fn load_cache(path: &Path) -> Result<(Dataset, Option<Split>)> {
    let fmt = |message: String| Error::Format { path: path.to_path_buf(), message };
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated header".into()))?;
    if &magic != CACHE_MAGIC {
        return Err(fmt("not a dataset cache".into()));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4).map_err(|_| fmt("truncated header".into()))?;
    let version = u32::from_le_bytes(b4);
    if version != CACHE_VERSION {
        return Err(fmt(format!("cache version {version}, expected {CACHE_VERSION}")));
    }
    r.read_exact(&mut b8).map_err(|_| fmt("truncated header".into()))?;
    let mut meta = vec![0u8; u64::from_le_bytes(b8) as usize];
    r.read_exact(&mut meta).map_err(|_| fmt("truncated metadata".into()))?;
    let meta: CacheMeta = serde_json::from_slice(&meta)?;
    let mut x = Vec::with_capacity(meta.n * meta.m);
    for _ in 0..meta.n * meta.m {
        r.read_exact(&mut b8).map_err(|_| fmt("truncated features".into()))?;
        x.push(f64::from_bits(u64::from_le_bytes(b8)));
    }
    let mut y = Vec::with_capacity(meta.n);
    for _ in 0..meta.n {
        r.read_exact(&mut b4).map_err(|_| fmt("truncated labels".into()))?;
        y.push(u32::from_le_bytes(b4) as usize);
    }
    let data = Dataset::new(meta.m, x, y, meta.feature_names, meta.class_names)?;
    Ok((data, meta.split))
}
