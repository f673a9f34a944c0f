//! Synthetic paired image-text dataset, manifest ingestion and text
//! preprocessing.
//!
//! The synthetic task is deliberately solvable only multimodally: the
//! label says whether the caption's (shape, color) matches the rendered
//! one, so captions alone and images alone leave the label near chance.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use regex::Regex;
use thiserror::Error;

use crate::rng::stream;
use crate::vision::{Image, VisionError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    BadSpec(String),
    #[error("manifest {0}: {1}")]
    Manifest(PathBuf, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Vision(#[from] VisionError),
}

/// One ingested or generated news item.
#[derive(Debug, Clone)]
pub struct NewsRecord {
    pub id: String,
    pub text: String,
    pub image: Image,
    /// 0 = real, 1 = fake.
    pub label: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Disjoint id lists covering the whole dataset.
#[derive(Debug, Clone, Default)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn is_disjoint(&self) -> bool {
        let mut seen = BTreeSet::new();
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .all(|id| seen.insert(id.clone()))
    }

    /// Per split/label counts as `(split, label, count)` rows.
    pub fn label_counts(&self, records: &[NewsRecord]) -> Vec<(&'static str, u8, usize)> {
        let label_of = |id: &String| records.iter().find(|r| &r.id == id).map(|r| r.label);
        let mut rows = Vec::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for label in [0u8, 1u8] {
                let count = self
                    .ids(split)
                    .iter()
                    .filter(|id| label_of(id) == Some(label))
                    .count();
                rows.push((split.name(), label, count));
            }
        }
        rows
    }
}

pub const SHAPE_CLASSES: [&str; 4] = ["circle", "square", "triangle", "cross"];
pub const COLOR_CLASSES: [&str; 4] = ["red", "green", "blue", "yellow"];

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub num_records: usize,
    pub mismatch_rate: f64,
    pub noise: f64,
    pub image_side: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_records: 2000,
            mismatch_rate: 0.5,
            noise: 0.02,
            image_side: 32,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    /// Parses a `key = value` spec file; `#` starts a comment.
    pub fn from_str(content: &str) -> Result<SyntheticSpec, DataError> {
        let mut spec = SyntheticSpec::default();
        for line in content.lines() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| DataError::BadSpec(format!("malformed line {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = || DataError::BadSpec(format!("bad value for {key}: {value:?}"));
            match key {
                "num_records" => spec.num_records = value.parse().map_err(|_| bad())?,
                "mismatch_rate" => spec.mismatch_rate = value.parse().map_err(|_| bad())?,
                "noise" => spec.noise = value.parse().map_err(|_| bad())?,
                "image_side" => spec.image_side = value.parse().map_err(|_| bad())?,
                "seed" => spec.seed = value.parse().map_err(|_| bad())?,
                _ => return Err(DataError::BadSpec(format!("unknown key {key:?}"))),
            }
        }
        Ok(spec)
    }
}

fn color_rgb(color: &str) -> [f64; 3] {
    match color {
        "red" => [0.9, 0.1, 0.1],
        "green" => [0.1, 0.8, 0.1],
        "blue" => [0.1, 0.2, 0.9],
        "yellow" => [0.9, 0.85, 0.1],
        _ => unreachable!(),
    }
}

/// Renders one colored shape on a neutral background plus seeded noise.
pub fn render_shape(shape: &str, color: &str, side: usize, noise: f64, seed: u64) -> Image {
    let mut img = Image::filled(side, side, 0.5);
    let rgb = color_rgb(color);
    // per-record jitter of position and size, so every image has a stable
    // geometric identity beyond its shape/color class
    let mut jitter = stream(seed, "data/jitter");
    let c = side as f64 / 2.0;
    let cy = c + jitter.gen_range(-0.15..0.15) * side as f64;
    let cx = c + jitter.gen_range(-0.15..0.15) * side as f64;
    let r = side as f64 * jitter.gen_range(0.18..0.32);
    for y in 0..side {
        for x in 0..side {
            let (fy, fx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
            let inside = match shape {
                "circle" => fy * fy + fx * fx <= r * r,
                "square" => fy.abs() <= r && fx.abs() <= r,
                "triangle" => fy >= -r && fy <= r && fx.abs() <= (fy + r) / 2.0,
                "cross" => fy.abs() <= r / 2.5 || fx.abs() <= r / 2.5,
                _ => unreachable!(),
            };
            if inside {
                for ch in 0..3 {
                    img.set(y, x, ch, rgb[ch]);
                }
            }
        }
    }
    if noise > 0.0 {
        let mut rng = stream(seed, "data/noise");
        for p in img.pixels.iter_mut() {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen();
            let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *p = (*p + noise * n).clamp(0.0, 1.0);
        }
    }
    img
}

const CAPTION_TEMPLATES: [&str; 3] = [
    "a photo of a {color} {shape}",
    "news image showing a {color} {shape}",
    "this picture contains a {color} {shape}",
];

const NOISE_WORDS: [&str; 4] = ["breaking", "exclusive", "shocking", "viral"];

fn caption(template: &str, color: &str, shape: &str) -> String {
    template.replace("{color}", color).replace("{shape}", shape)
}

/// Deterministic per seed: renders images, writes matched or mismatched
/// captions, labels fake exactly when caption and image disagree, and
/// splits 80/10/10.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Vec<NewsRecord>, SplitManifest), DataError> {
    if spec.num_records == 0 {
        return Err(DataError::BadSpec("num_records must be > 0".into()));
    }
    if !(0.0..=1.0).contains(&spec.mismatch_rate) {
        return Err(DataError::BadSpec(format!(
            "mismatch_rate {} outside [0,1]",
            spec.mismatch_rate
        )));
    }
    let mut rng = stream(spec.seed, "data/synthetic");
    let mut records = Vec::with_capacity(spec.num_records);
    for i in 0..spec.num_records {
        let id = format!("syn{i:05}");
        let shape = SHAPE_CLASSES[rng.gen_range(0..SHAPE_CLASSES.len())];
        let color = COLOR_CLASSES[rng.gen_range(0..COLOR_CLASSES.len())];
        let image = render_shape(shape, color, spec.image_side, spec.noise, spec.seed ^ i as u64);

        let mismatch = rng.gen_bool(spec.mismatch_rate);
        let (cap_shape, cap_color) = if mismatch {
            // any pair other than the rendered one
            loop {
                let s = SHAPE_CLASSES[rng.gen_range(0..SHAPE_CLASSES.len())];
                let c = COLOR_CLASSES[rng.gen_range(0..COLOR_CLASSES.len())];
                if s != shape || c != color {
                    break (s, c);
                }
            }
        } else {
            (shape, color)
        };
        let template = CAPTION_TEMPLATES[rng.gen_range(0..CAPTION_TEMPLATES.len())];
        let mut text = caption(template, cap_color, cap_shape);
        // a modest text-only signal: some fakes carry a clickbait word, so
        // text-only sits clearly above image-only but well below fused
        if mismatch && rng.gen_bool(0.3) {
            let w = NOISE_WORDS[rng.gen_range(0..NOISE_WORDS.len())];
            text = format!("{w} {text}");
        }
        records.push(NewsRecord {
            id,
            text,
            image,
            label: u8::from(mismatch),
        });
    }

    let n = records.len();
    let train_end = n * 8 / 10;
    let val_end = n * 9 / 10;
    let manifest = SplitManifest {
        train: records[..train_end].iter().map(|r| r.id.clone()).collect(),
        val: records[train_end..val_end].iter().map(|r| r.id.clone()).collect(),
        test: records[val_end..].iter().map(|r| r.id.clone()).collect(),
    };
    Ok((records, manifest))
}

/// Re-derives a synthetic record's label from its caption and image
/// attributes (test oracle for label purity).
pub fn caption_names(text: &str) -> Option<(&'static str, &'static str)> {
    let shape = SHAPE_CLASSES.iter().find(|s| text.contains(*s))?;
    let color = COLOR_CLASSES.iter().find(|c| text.contains(*c))?;
    Some((shape, color))
}

/// Writes `manifest.tsv` plus `images/<id>.ppm` under `dir`.
pub fn save_dataset(
    dir: &Path,
    records: &[NewsRecord],
    manifest: &SplitManifest,
) -> Result<(), DataError> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut tsv = String::from("id\ttext\timage_path\tlabel\tsplit\n");
    for split in [Split::Train, Split::Val, Split::Test] {
        for id in manifest.ids(split) {
            let rec = records
                .iter()
                .find(|r| &r.id == id)
                .ok_or_else(|| DataError::Manifest(dir.into(), format!("unknown id {id}")))?;
            rec.image.write_ppm(&images.join(format!("{id}.ppm")))?;
            let _ = writeln!(
                tsv,
                "{}\t{}\timages/{}.ppm\t{}\t{}",
                rec.id,
                rec.text.replace(['\t', '\n'], " "),
                rec.id,
                rec.label,
                split.name()
            );
        }
    }
    std::fs::write(dir.join("manifest.tsv"), tsv)?;
    Ok(())
}

#[derive(Debug, Default, Clone, Copy)]
pub struct IngestStats {
    /// Rows whose image was missing or undecodable.
    pub dropped: usize,
    /// Rows that failed the schema (column count, label domain, split).
    pub malformed: usize,
}

/// Parses `id<TAB>text<TAB>image_path<TAB>label<TAB>split`. Rows with
/// missing or undecodable images are dropped and counted; malformed rows
/// are skipped and counted.
pub fn ingest_manifest(
    manifest_path: &Path,
) -> Result<(Vec<NewsRecord>, SplitManifest, IngestStats), DataError> {
    let content = std::fs::read_to_string(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut lines = content.lines();
    let header = lines
        .next()
        .ok_or_else(|| DataError::Manifest(manifest_path.into(), "empty manifest".into()))?;
    if header != "id\ttext\timage_path\tlabel\tsplit" {
        return Err(DataError::Manifest(
            manifest_path.into(),
            format!("unexpected header {header:?}"),
        ));
    }

    let mut records = Vec::new();
    let mut manifest = SplitManifest::default();
    let mut stats = IngestStats::default();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            stats.malformed += 1;
            continue;
        }
        let (id, text, image_path, label_s, split_s) =
            (cols[0], cols[1], cols[2], cols[3], cols[4]);
        let label = match label_s {
            "0" => 0u8,
            "1" => 1u8,
            _ => {
                stats.malformed += 1;
                continue;
            }
        };
        let split = match Split::parse(split_s) {
            Some(s) => s,
            None => {
                stats.malformed += 1;
                continue;
            }
        };
        let text = preprocess_text(text);
        if text.is_empty() {
            stats.malformed += 1;
            continue;
        }
        let image = match Image::read_ppm(&base.join(image_path)) {
            Ok(img) => img,
            Err(_) => {
                stats.dropped += 1;
                continue;
            }
        };
        match split {
            Split::Train => manifest.train.push(id.to_string()),
            Split::Val => manifest.val.push(id.to_string()),
            Split::Test => manifest.test.push(id.to_string()),
        }
        records.push(NewsRecord {
            id: id.to_string(),
            text,
            image,
            label,
        });
    }
    Ok((records, manifest, stats))
}

/// Summary CSV: `split,label,count,dropped`.
pub fn summary_csv(records: &[NewsRecord], manifest: &SplitManifest, stats: IngestStats) -> String {
    let mut out = String::from("split,label,count,dropped\n");
    for (split, label, count) in manifest.label_counts(records) {
        let _ = writeln!(out, "{split},{label},{count},{}", stats.dropped);
    }
    out
}

const STOPWORDS: &str = include_str!("../assets/stopwords.txt");

fn stop_set() -> BTreeSet<&'static str> {
    STOPWORDS.lines().filter(|l| !l.is_empty()).collect()
}

/// URL strip, stop-list strip, whitespace normalization. Capitalized
/// tokens are always retained (proper-noun approximation), which also
/// makes the function idempotent.
pub fn preprocess_text(raw: &str) -> String {
    let url_re = Regex::new(r"[A-Za-z][A-Za-z0-9+.\-]*://\S+").unwrap();
    let no_urls = url_re.replace_all(raw, " ");
    let stops = stop_set();
    no_urls
        .split_whitespace()
        .filter(|tok| {
            let starts_upper = tok.chars().next().is_some_and(|c| c.is_uppercase());
            let core: String = tok
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase();
            starts_upper || !stops.contains(core.as_str())
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            num_records: 200,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let (a, _) = generate_synthetic(&spec).unwrap();
        let (b, _) = generate_synthetic(&spec).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.id, rb.id);
            assert_eq!(ra.text, rb.text);
            assert_eq!(ra.label, rb.label);
            assert_eq!(ra.image, rb.image);
        }
        let (c, _) = generate_synthetic(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.text != y.text));
    }

    #[test]
    fn labels_match_caption_image_agreement() {
        // oracle: re-render the caption's pair and compare to the image
        let spec = small_spec();
        let (records, _) = generate_synthetic(&spec).unwrap();
        for (i, rec) in records.iter().enumerate() {
            let (cap_shape, cap_color) = caption_names(&rec.text).unwrap();
            let re_rendered =
                render_shape(cap_shape, cap_color, spec.image_side, spec.noise, spec.seed ^ i as u64);
            let matches = re_rendered == rec.image;
            assert_eq!(rec.label == 0, matches, "record {}", rec.id);
        }
    }

    #[test]
    fn mismatch_rate_within_binomial_bounds() {
        let (records, _) = generate_synthetic(&SyntheticSpec {
            num_records: 2000,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let fakes = records.iter().filter(|r| r.label == 1).count();
        // p = 0.5, n = 2000: +-4 sigma is +-89
        assert!((911..=1089).contains(&fakes), "fakes = {fakes}");
    }

    #[test]
    fn splits_are_disjoint_80_10_10() {
        let (records, manifest) = generate_synthetic(&small_spec()).unwrap();
        assert!(manifest.is_disjoint());
        assert_eq!(manifest.train.len(), 160);
        assert_eq!(manifest.val.len(), 20);
        assert_eq!(manifest.test.len(), 20);
        assert_eq!(
            manifest.train.len() + manifest.val.len() + manifest.test.len(),
            records.len()
        );
    }

    #[test]
    fn extreme_mismatch_rates() {
        let (all_real, _) = generate_synthetic(&SyntheticSpec {
            mismatch_rate: 0.0,
            ..small_spec()
        })
        .unwrap();
        assert!(all_real.iter().all(|r| r.label == 0));
        let (all_fake, _) = generate_synthetic(&SyntheticSpec {
            mismatch_rate: 1.0,
            ..small_spec()
        })
        .unwrap();
        assert!(all_fake.iter().all(|r| r.label == 1));
        assert!(generate_synthetic(&SyntheticSpec {
            mismatch_rate: 1.5,
            ..small_spec()
        })
        .is_err());
    }

    #[test]
    fn save_then_ingest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            num_records: 30,
            ..SyntheticSpec::default()
        };
        let (records, manifest) = generate_synthetic(&spec).unwrap();
        save_dataset(dir.path(), &records, &manifest).unwrap();
        let (back, back_manifest, stats) =
            ingest_manifest(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(back.len(), records.len());
        assert_eq!(stats.dropped + stats.malformed, 0);
        assert_eq!(back_manifest.train.len(), manifest.train.len());
        for rec in &back {
            let orig = records.iter().find(|r| r.id == rec.id).unwrap();
            assert_eq!(rec.label, orig.label);
            assert_eq!(rec.text, preprocess_text(&orig.text));
        }
    }

    #[test]
    fn ingest_counts_malformed_and_dropped_rows() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("images")).unwrap();
        let img = Image::filled(4, 4, 0.5);
        img.write_ppm(&dir.path().join("images/good.ppm")).unwrap();
        std::fs::write(dir.path().join("images/bad.ppm"), b"not a ppm").unwrap();
        let manifest = "id\ttext\timage_path\tlabel\tsplit\n\
            a\tsome text\timages/good.ppm\t0\ttrain\n\
            b\ttoo\tfew\n\
            c\tsome text\timages/good.ppm\t7\ttrain\n\
            d\tsome text\timages/good.ppm\t1\tnosuchsplit\n\
            e\tsome text\timages/missing.ppm\t1\tval\n\
            f\tsome text\timages/bad.ppm\t1\tval\n\
            g\tother text\timages/good.ppm\t1\ttest\n";
        std::fs::write(dir.path().join("manifest.tsv"), manifest).unwrap();
        let (records, split, stats) = ingest_manifest(&dir.path().join("manifest.tsv")).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(stats.malformed, 3);
        assert_eq!(stats.dropped, 2);
        assert_eq!(split.train.len(), 1);
        assert_eq!(split.test.len(), 1);
    }

    #[test]
    fn ingest_rejects_wrong_header() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("manifest.tsv"), "id,text\n").unwrap();
        assert!(matches!(
            ingest_manifest(&dir.path().join("manifest.tsv")),
            Err(DataError::Manifest(..))
        ));
    }

    #[test]
    fn preprocess_strips_urls_and_stopwords() {
        assert_eq!(
            preprocess_text("the  cat sat on https://example.com/x?q=1 a mat"),
            "cat sat mat"
        );
        assert_eq!(preprocess_text("BREAKING: the Report"), "BREAKING: Report");
        // capitalized stop words survive (proper-noun approximation)
        assert_eq!(preprocess_text("The Hague is in the news"), "The Hague news");
        assert_eq!(preprocess_text(""), "");
        assert_eq!(preprocess_text("   \t \n"), "");
    }

    #[test]
    fn spec_file_parsing() {
        let spec = SyntheticSpec::from_str("num_records = 50\nseed = 9 # comment\n").unwrap();
        assert_eq!(spec.num_records, 50);
        assert_eq!(spec.seed, 9);
        assert!(SyntheticSpec::from_str("bogus = 1\n").is_err());
        assert!(SyntheticSpec::from_str("num_records too\n").is_err());
    }

    proptest! {
        #[test]
        fn preprocess_is_idempotent(s in "[ -~]{0,80}") {
            let once = preprocess_text(&s);
            prop_assert_eq!(preprocess_text(&once), once);
        }
    }
}
