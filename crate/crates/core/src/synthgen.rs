//! Synthetic paired bimodal data with injected false positives, and the
//! `NCUDATA1` file format.
//!
//! Every pair is drawn from one of `K` latent class centers. Images and texts
//! see the center through separate fixed random projections plus isotropic
//! noise. A fraction `ρ` of pairs get their text swapped with a text of a
//! different class. Same-class items that are not paired act as false
//! negatives whenever they share a batch.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NcuError, Result};
use crate::numcore::Matrix;

pub const DATA_MAGIC: &[u8; 8] = b"NCUDATA1";
pub const DATA_VERSION: u32 = 1;

const WORLD_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const TEST_STREAM: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub num_classes: usize,
    pub pairs_per_class: usize,
    pub latent_dim: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub noise_sigma: f64,
    pub fp_rate: f64,
    /// Standard deviation of the image projection entries; sets class overlap relative to `noise_sigma`.
    #[serde(default = "default_image_projection_std")]
    pub image_projection_std: f64,
    #[serde(default = "default_text_projection_std")]
    pub text_projection_std: f64,
    pub seed: u64,
}

fn default_image_projection_std() -> f64 {
    GenConfig::default().image_projection_std
}

fn default_text_projection_std() -> f64 {
    GenConfig::default().text_projection_std
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            pairs_per_class: 1000,
            latent_dim: 16,
            image_dim: 64,
            text_dim: 48,
            noise_sigma: 0.1,
            fp_rate: 0.2,
            image_projection_std: 0.013,
            text_projection_std: 0.02,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(NcuError::InvalidConfig(msg));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.pairs_per_class == 0 || self.latent_dim == 0 || self.image_dim == 0 || self.text_dim == 0 {
            return bad("pairs_per_class and all dimensions must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.fp_rate) {
            return bad(format!("fp_rate must lie in [0, 1), got {}", self.fp_rate));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        for (name, std) in [("image", self.image_projection_std), ("text", self.text_projection_std)] {
            if !(std > 0.0 && std.is_finite()) {
                return bad(format!("{name}_projection_std must be > 0, got {std}"));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.num_classes * self.pairs_per_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn corrupted_count(&self) -> usize {
        (self.fp_rate * self.len() as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    /// Clean pairs from the same world, drawn on a separate random stream.
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub x_img: Matrix,
    pub x_txt: Matrix,
    pub class_label: Vec<i32>,
    /// Class of the text actually paired with each image.
    pub text_label: Vec<i32>,
    pub is_corrupted: Vec<bool>,
    pub gen_config: GenConfig,
    pub split: Split,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.class_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_label.is_empty()
    }

    pub fn corrupted_count(&self) -> usize {
        self.is_corrupted.iter().filter(|&&c| c).count()
    }

    /// Rows `idx` in the given order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            x_img: self.x_img.select_rows(idx),
            x_txt: self.x_txt.select_rows(idx),
            class_label: idx.iter().map(|&i| self.class_label[i]).collect(),
            text_label: idx.iter().map(|&i| self.text_label[i]).collect(),
            is_corrupted: idx.iter().map(|&i| self.is_corrupted[i]).collect(),
            gen_config: self.gen_config.clone(),
            split: self.split,
        }
    }
}

struct World {
    centers: Matrix,
    proj_img: Matrix,
    proj_txt: Matrix,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::from_vec(rows, cols, data).expect("nonempty finite gaussian draw")
}

fn world(cfg: &GenConfig) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(WORLD_STREAM);
    World {
        centers: gaussian(&mut rng, cfg.num_classes, cfg.latent_dim, 1.0),
        proj_img: gaussian(&mut rng, cfg.latent_dim, cfg.image_dim, cfg.image_projection_std),
        proj_txt: gaussian(&mut rng, cfg.latent_dim, cfg.text_dim, cfg.text_projection_std),
    }
}

fn sample_pairs(w: &World, cfg: &GenConfig, per_class: usize, rng: &mut ChaCha8Rng) -> (Matrix, Matrix, Vec<i32>) {
    let n = cfg.num_classes * per_class;
    let class_label: Vec<i32> = (0..n).map(|i| (i / per_class) as i32).collect();
    let signal_img = w.centers.matmul(&w.proj_img);
    let signal_txt = w.centers.matmul(&w.proj_txt);
    let mut x_img = Matrix::zeros(n, cfg.image_dim);
    let mut x_txt = Matrix::zeros(n, cfg.text_dim);
    for i in 0..n {
        let c = class_label[i] as usize;
        for (x, s) in x_img.row_mut(i).iter_mut().zip(signal_img.row(c)) {
            *x = s + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
        for (x, s) in x_txt.row_mut(i).iter_mut().zip(signal_txt.row(c)) {
            *x = s + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    (x_img, x_txt, class_label)
}

/// A uniformly shuffled assignment of `chosen` onto itself with no item
/// receiving a same-class partner, repaired by swaps after the shuffle.
fn cross_class_derangement(chosen: &[usize], labels: &[i32], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let c = chosen.len();
    let impossible = || NcuError::InvalidConfig(format!("cannot derange {c} corrupted items across classes"));
    let mut per_class = std::collections::BTreeMap::new();
    for &i in chosen {
        *per_class.entry(labels[i]).or_insert(0usize) += 1;
    }
    // Hall's condition for a cross-class assignment.
    if per_class.values().any(|&k| 2 * k > c) {
        return Err(impossible());
    }
    let mut target: Vec<usize> = chosen.to_vec();
    for i in (1..c).rev() {
        target.swap(i, rng.random_range(0..=i));
    }
    let clash = |target: &[usize], k: usize| labels[chosen[k]] == labels[target[k]];
    for _ in 0..c.max(1) * 64 {
        let Some(k) = (0..c).find(|&k| clash(&target, k)) else { return Ok(target) };
        // Swap with a random slot where the exchange removes the clash on both sides.
        let start = rng.random_range(0..c);
        let partner = (0..c).map(|o| (start + o) % c).find(|&j| {
            labels[chosen[k]] != labels[target[j]] && labels[chosen[j]] != labels[target[k]]
        });
        match partner {
            Some(j) => target.swap(k, j),
            None => return Err(impossible()),
        }
    }
    Err(impossible())
}

/// Training split with false-positive corruption.
pub fn generate(cfg: &GenConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let w = world(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let (x_img, mut x_txt, class_label) = sample_pairs(&w, cfg, cfg.pairs_per_class, &mut rng);
    let n = class_label.len();
    let mut text_label = class_label.clone();
    let mut is_corrupted = vec![false; n];

    let k = cfg.corrupted_count();
    if k > 0 {
        let mut chosen = sample(&mut rng, n, k).into_vec();
        chosen.sort_unstable();
        let target = cross_class_derangement(&chosen, &class_label, &mut rng)?;
        let texts = x_txt.select_rows(&target);
        for (slot, &i) in chosen.iter().enumerate() {
            x_txt.row_mut(i).copy_from_slice(texts.row(slot));
            text_label[i] = class_label[target[slot]];
            is_corrupted[i] = true;
        }
    }
    Ok(SyntheticDataset { x_img, x_txt, class_label, text_label, is_corrupted, gen_config: cfg.clone(), split: Split::Train })
}

/// Clean held-out pairs from the same centers and projections as [`generate`].
pub fn generate_test(cfg: &GenConfig, per_class: usize) -> Result<SyntheticDataset> {
    cfg.validate()?;
    if per_class == 0 {
        return Err(NcuError::InvalidConfig("held-out split needs at least one pair per class".into()));
    }
    let w = world(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TEST_STREAM);
    let (x_img, x_txt, class_label) = sample_pairs(&w, cfg, per_class, &mut rng);
    let n = class_label.len();
    Ok(SyntheticDataset {
        x_img,
        x_txt,
        text_label: class_label.clone(),
        class_label,
        is_corrupted: vec![false; n],
        gen_config: cfg.clone(),
        split: Split::Test,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldType {
    F64,
    I32,
}

impl FieldType {
    fn width(self) -> usize {
        match self {
            FieldType::F64 => 8,
            FieldType::I32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldEntry {
    pub name: String,
    pub dtype: FieldType,
    pub rows: usize,
    pub cols: usize,
    /// Byte offset from the start of the payload.
    pub offset: usize,
}

impl FieldEntry {
    fn byte_len(&self) -> usize {
        self.rows * self.cols * self.dtype.width()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub version: u32,
    pub split: Split,
    pub n: usize,
    pub num_classes: usize,
    pub image_dim: usize,
    pub text_dim: usize,
    pub seed: u64,
    pub fp_rate: f64,
    pub gen_config: GenConfig,
    pub fields: Vec<FieldEntry>,
}

const FIELD_ORDER: [(&str, FieldType); 5] = [
    ("x_img", FieldType::F64),
    ("x_txt", FieldType::F64),
    ("class_label", FieldType::I32),
    ("text_label", FieldType::I32),
    ("is_corrupted", FieldType::I32),
];

fn header_for(ds: &SyntheticDataset) -> DatasetHeader {
    let n = ds.len();
    let mut offset = 0;
    let fields = FIELD_ORDER
        .iter()
        .map(|&(name, dtype)| {
            let cols = match name {
                "x_img" => ds.x_img.cols(),
                "x_txt" => ds.x_txt.cols(),
                _ => 1,
            };
            let e = FieldEntry { name: name.into(), dtype, rows: n, cols, offset };
            offset += e.byte_len();
            e
        })
        .collect();
    DatasetHeader {
        version: DATA_VERSION,
        split: ds.split,
        n,
        num_classes: ds.gen_config.num_classes,
        image_dim: ds.x_img.cols(),
        text_dim: ds.x_txt.cols(),
        seed: ds.gen_config.seed,
        fp_rate: ds.gen_config.fp_rate,
        gen_config: ds.gen_config.clone(),
        fields,
    }
}

pub(crate) fn write_framed(w: &mut impl Write, magic: &[u8; 8], header: &[u8]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header)?;
    Ok(())
}

/// Reads the magic and the length-prefixed header bytes.
pub(crate) fn read_framed(r: &mut impl Read, magic: &[u8; 8], what: &str) -> Result<Vec<u8>> {
    let truncated = |e: std::io::Error| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            NcuError::Format(format!("{what} file is truncated"))
        } else {
            NcuError::Io(e)
        }
    };
    let mut found = [0u8; 8];
    r.read_exact(&mut found).map_err(truncated)?;
    if &found != magic {
        return Err(NcuError::Format(format!("bad magic bytes {:?} for a {what} file", String::from_utf8_lossy(&found))));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(truncated)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 64 << 20 {
        return Err(NcuError::Format(format!("{what} header length {len} is implausible")));
    }
    let mut header = vec![0u8; len];
    r.read_exact(&mut header).map_err(truncated)?;
    Ok(header)
}

pub(crate) fn read_payload(r: &mut impl Read, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(len);
    r.take(len as u64).read_to_end(&mut buf)?;
    if buf.len() != len {
        return Err(NcuError::Format(format!("{what} payload is truncated: {} of {len} bytes", buf.len())));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(NcuError::Format(format!("{what} file has trailing bytes")));
    }
    Ok(buf)
}

pub fn save_dataset(ds: &SyntheticDataset, path: impl AsRef<Path>) -> Result<()> {
    let header = header_for(ds);
    let json = serde_json::to_vec(&header).map_err(|e| NcuError::Format(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    write_framed(&mut w, DATA_MAGIC, &json)?;
    for x in ds.x_img.as_slice().iter().chain(ds.x_txt.as_slice()) {
        w.write_all(&x.to_le_bytes())?;
    }
    for &l in ds.class_label.iter().chain(&ds.text_label) {
        w.write_all(&l.to_le_bytes())?;
    }
    for &c in &ds.is_corrupted {
        w.write_all(&i32::from(c).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn parse_header(bytes: &[u8]) -> Result<DatasetHeader> {
    let header: DatasetHeader =
        serde_json::from_slice(bytes).map_err(|e| NcuError::Format(format!("dataset header: {e}")))?;
    if header.version != DATA_VERSION {
        return Err(NcuError::Version { found: header.version, expected: DATA_VERSION });
    }
    if header.n == 0 || header.image_dim == 0 || header.text_dim == 0 {
        return Err(NcuError::Format("dataset header declares an empty dataset".into()));
    }
    let mut offset = 0;
    for (entry, &(name, dtype)) in header.fields.iter().zip(&FIELD_ORDER) {
        if entry.name != name || entry.dtype != dtype || entry.offset != offset || entry.rows != header.n {
            return Err(NcuError::Format(format!("unexpected field entry {entry:?}")));
        }
        offset += entry.byte_len();
    }
    if header.fields.len() != FIELD_ORDER.len()
        || header.fields[0].cols != header.image_dim
        || header.fields[1].cols != header.text_dim
        || header.fields[2..].iter().any(|f| f.cols != 1)
    {
        return Err(NcuError::Format("dataset field directory does not match its dimensions".into()));
    }
    Ok(header)
}

/// Reads only the header; the payload is left untouched.
pub fn inspect_dataset(path: impl AsRef<Path>) -> Result<DatasetHeader> {
    let mut r = BufReader::new(File::open(path)?);
    parse_header(&read_framed(&mut r, DATA_MAGIC, "dataset")?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let mut r = BufReader::new(File::open(path)?);
    let header = parse_header(&read_framed(&mut r, DATA_MAGIC, "dataset")?)?;
    let total: usize = header.fields.iter().map(FieldEntry::byte_len).sum();
    let payload = read_payload(&mut r, total, "dataset")?;

    let slice = |k: usize| {
        let f = &header.fields[k];
        &payload[f.offset..f.offset + f.byte_len()]
    };
    let floats = |b: &[u8]| -> Vec<f64> {
        b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect()
    };
    let ints = |b: &[u8]| -> Vec<i32> {
        b.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().expect("4-byte chunk"))).collect()
    };
    let n = header.n;
    let x_img = Matrix::from_vec(n, header.image_dim, floats(slice(0)))?;
    let x_txt = Matrix::from_vec(n, header.text_dim, floats(slice(1)))?;
    let class_label = ints(slice(2));
    let text_label = ints(slice(3));
    let flags = ints(slice(4));
    if flags.iter().any(|&f| f != 0 && f != 1) {
        return Err(NcuError::Format("corruption flags must be 0 or 1".into()));
    }
    let k = header.num_classes as i32;
    if class_label.iter().chain(&text_label).any(|&l| l < 0 || l >= k) {
        return Err(NcuError::Format("class label out of range".into()));
    }
    Ok(SyntheticDataset {
        x_img,
        x_txt,
        class_label,
        text_label,
        is_corrupted: flags.into_iter().map(|f| f == 1).collect(),
        gen_config: header.gen_config,
        split: header.split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, fp_rate: f64) -> GenConfig {
        GenConfig { pairs_per_class: 100, seed, fp_rate, ..GenConfig::default() }
    }

    #[test]
    fn corruption_counts() {
        assert_eq!(generate(&small(1, 0.0)).unwrap().corrupted_count(), 0);
        let ds = generate(&small(1, 0.2)).unwrap();
        assert_eq!(ds.len(), 1000);
        assert_eq!(ds.corrupted_count(), 200);
        assert_eq!(generate(&small(1, 0.2345)).unwrap().corrupted_count(), 235);
    }

    #[test]
    fn corrupted_pairs_cross_classes() {
        let ds = generate(&small(2, 0.3)).unwrap();
        for i in 0..ds.len() {
            if ds.is_corrupted[i] {
                assert_ne!(ds.class_label[i], ds.text_label[i]);
            } else {
                assert_eq!(ds.class_label[i], ds.text_label[i]);
            }
        }
    }

    #[test]
    fn deterministic_by_seed() {
        let a = generate(&small(3, 0.2)).unwrap();
        let b = generate(&small(3, 0.2)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(4, 0.2)).unwrap();
        assert_ne!(a.x_img, c.x_img);
    }

    #[test]
    fn held_out_split_shares_the_world() {
        let cfg = small(5, 0.2);
        let train = generate(&cfg).unwrap();
        let test = generate_test(&cfg, 50).unwrap();
        assert_eq!(test.len(), 500);
        assert_eq!(test.corrupted_count(), 0);
        assert_ne!(test.x_img.row(0), train.x_img.row(0));
        // Class means agree between splits up to sampling noise.
        let mean = |m: &Matrix, lo: usize, hi: usize| -> Vec<f64> {
            let rows: Vec<usize> = (lo..hi).collect();
            m.select_rows(&rows).col_sums().iter().map(|s| s / (hi - lo) as f64).collect()
        };
        let a = mean(&train.x_img, 0, 100);
        let b = mean(&test.x_img, 0, 50);
        let gap = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(gap < 5.0 * cfg.noise_sigma / 50f64.sqrt(), "{gap}");
    }

    /// Nearest class mean on raw text features, trained on clean pairs.
    #[test]
    fn classes_are_separable_in_raw_text() {
        for seed in 0..5 {
            let cfg = GenConfig { seed, fp_rate: 0.0, ..GenConfig::default() };
            let ds = generate(&cfg).unwrap();
            let k = cfg.num_classes;
            let d = cfg.text_dim;
            let mut means = vec![vec![0.0; d]; k];
            for i in 0..ds.len() {
                let c = ds.class_label[i] as usize;
                for (m, x) in means[c].iter_mut().zip(ds.x_txt.row(i)) {
                    *m += x / cfg.pairs_per_class as f64;
                }
            }
            let test = generate_test(&cfg, 200).unwrap();
            let hits = (0..test.len())
                .filter(|&i| {
                    let row = test.x_txt.row(i);
                    let dist = |c: usize| -> f64 { means[c].iter().zip(row).map(|(m, x)| (m - x).powi(2)).sum() };
                    let best = (0..k).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap();
                    best as i32 == test.class_label[i]
                })
                .count();
            let acc = hits as f64 / test.len() as f64;
            assert!(acc > 0.95, "seed {seed}: accuracy {acc}");
        }
    }

    #[test]
    fn derangement_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let labels = [0, 0, 1, 1, 2];
        assert!(cross_class_derangement(&[0], &labels, &mut rng).is_err());
        assert!(cross_class_derangement(&[0, 1, 2], &labels, &mut rng).is_err());
        let t = cross_class_derangement(&[0, 2], &labels, &mut rng).unwrap();
        assert_eq!(t, vec![2, 0]);
        let chosen = [0, 1, 2, 3, 4];
        let t = cross_class_derangement(&chosen, &labels, &mut rng).unwrap();
        let mut sorted = t.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, chosen);
        assert!(chosen.iter().zip(&t).all(|(&a, &b)| labels[a] != labels[b]));

        let cfg = GenConfig { num_classes: 2, pairs_per_class: 1, fp_rate: 0.5, ..GenConfig::default() };
        assert!(matches!(generate(&cfg), Err(NcuError::InvalidConfig(_))));
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            GenConfig { num_classes: 1, ..GenConfig::default() },
            GenConfig { fp_rate: 1.0, ..GenConfig::default() },
            GenConfig { latent_dim: 0, ..GenConfig::default() },
        ] {
            assert!(matches!(generate(&cfg), Err(NcuError::InvalidConfig(_))));
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small(6, 0.2)).unwrap();
        let p = dir.path().join("d.ncud");
        save_dataset(&ds, &p).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(back, ds);
        let first = std::fs::read(&p).unwrap();
        save_dataset(&back, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);

        let h = inspect_dataset(&p).unwrap();
        assert_eq!((h.n, h.num_classes, h.image_dim, h.text_dim), (1000, 10, 64, 48));
    }

    #[test]
    fn header_only_inspection_ignores_payload() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&small(7, 0.1)).unwrap();
        let p = dir.path().join("d.ncud");
        save_dataset(&ds, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        // Keep only the framing: the payload is gone but the header still parses.
        std::fs::write(&p, &bytes[..16 + header_len]).unwrap();
        assert_eq!(inspect_dataset(&p).unwrap().n, 1000);
        assert!(matches!(load_dataset(&p), Err(NcuError::Format(_))));
    }

    #[test]
    fn damaged_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ncud");
        save_dataset(&generate(&small(8, 0.1)).unwrap(), &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&p, &bad).unwrap();
        assert!(matches!(load_dataset(&p), Err(NcuError::Format(_))));

        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_dataset(&p), Err(NcuError::Format(_))));

        std::fs::write(&p, &bytes[..5]).unwrap();
        assert!(matches!(load_dataset(&p), Err(NcuError::Format(_))));
    }
}
