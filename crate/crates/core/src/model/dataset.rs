//! Two-class image sets with subject ids, plus a synthetic generator.
//!
//! Class 0 ("before") images carry stripes varying along x, class 1 ("after")
//! images stripes varying along y at a different frequency. Each subject adds
//! a brightness offset and a phase jitter, and each pixel gets Gaussian noise.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

use super::ModelError;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub side: usize,
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub subject_ids: Vec<u32>,
}

impl Dataset {
    pub fn new(
        side: usize,
        images: Vec<Vec<f64>>,
        labels: Vec<usize>,
        subject_ids: Vec<u32>,
    ) -> Result<Self, ModelError> {
        if images.len() != labels.len() || images.len() != subject_ids.len() {
            return Err(ModelError::Config("images, labels and subject ids differ in length".into()));
        }
        if let Some(bad) = images.iter().position(|im| im.len() != side * side) {
            return Err(ModelError::Config(format!("image {bad} does not have {side}x{side} pixels")));
        }
        if let Some(bad) = labels.iter().position(|&l| l > 1) {
            return Err(ModelError::Config(format!("image {bad} has label {} (expected 0 or 1)", labels[bad])));
        }
        Ok(Dataset {
            side,
            images,
            labels,
            subject_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.side * self.side
    }

    pub fn subjects(&self) -> BTreeSet<u32> {
        self.subject_ids.iter().copied().collect()
    }

    fn select(&self, keep: impl Fn(u32) -> bool) -> Dataset {
        let mut out = Dataset {
            side: self.side,
            images: Vec::new(),
            labels: Vec::new(),
            subject_ids: Vec::new(),
        };
        for i in 0..self.len() {
            if keep(self.subject_ids[i]) {
                out.images.push(self.images[i].clone());
                out.labels.push(self.labels[i]);
                out.subject_ids.push(self.subject_ids[i]);
            }
        }
        out
    }

    /// Cross-subject split: subjects are shuffled with `seed` and the first
    /// `round(test_fraction · subjects)` go to the test side. No subject ever
    /// appears on both sides.
    pub fn split_by_subject(&self, test_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut subjects: Vec<u32> = self.subjects().into_iter().collect();
        subjects.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
        let n_test = ((subjects.len() as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
        let test: BTreeSet<u32> = subjects[..n_test].iter().copied().collect();
        (self.select(|s| !test.contains(&s)), self.select(|s| test.contains(&s)))
    }

    /// The first class-0 and first class-1 image of a subject.
    pub fn subject_pair(&self, subject: u32) -> Option<(&[f64], &[f64])> {
        let find = |label| {
            (0..self.len()).find(|&i| self.subject_ids[i] == subject && self.labels[i] == label)
        };
        Some((&self.images[find(0)?], &self.images[find(1)?]))
    }

    pub fn single(&self, index: usize) -> Option<Dataset> {
        (index < self.len()).then(|| Dataset {
            side: self.side,
            images: vec![self.images[index].clone()],
            labels: vec![self.labels[index]],
            subject_ids: vec![self.subject_ids[index]],
        })
    }

    /// Text form: `imgset <side> <count>`, then per image a line
    /// `<subject_id> <label>` and a line of `side²` intensities.
    pub fn to_text(&self) -> String {
        let mut out = format!("imgset {} {}\n", self.side, self.len());
        for i in 0..self.len() {
            let _ = writeln!(out, "{} {}", self.subject_ids[i], self.labels[i]);
            let row: Vec<String> = self.images[i].iter().map(|v| format!("{v}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(self.to_text().as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset, ModelError> {
        let file = std::fs::File::open(path)?;
        Dataset::read_from(std::io::BufReader::new(file))
    }

    pub fn read_from<R: BufRead>(reader: R) -> Result<Dataset, ModelError> {
        let mut lines = reader.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| -> Result<(usize, String), ModelError> {
            match lines.next() {
                Some((no, Ok(line))) => Ok((no, line)),
                Some((_, Err(e))) => Err(ModelError::Io(e)),
                None => Err(ModelError::Parse {
                    line: 0,
                    msg: format!("unexpected end of file, expected {what}"),
                }),
            }
        };
        let (no, header) = next("header")?;
        let parts: Vec<&str> = header.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "imgset" {
            return Err(ModelError::Parse {
                line: no,
                msg: "expected `imgset <side> <count>`".into(),
            });
        }
        let side: usize = parse_field(parts[1], no)?;
        let count: usize = parse_field(parts[2], no)?;
        let mut images = Vec::with_capacity(count);
        let mut labels = Vec::with_capacity(count);
        let mut subject_ids = Vec::with_capacity(count);
        for _ in 0..count {
            let (no, meta) = next("`<subject_id> <label>`")?;
            let meta: Vec<&str> = meta.split_whitespace().collect();
            if meta.len() != 2 {
                return Err(ModelError::Parse {
                    line: no,
                    msg: "expected `<subject_id> <label>`".into(),
                });
            }
            subject_ids.push(parse_field(meta[0], no)?);
            let label: usize = parse_field(meta[1], no)?;
            if label > 1 {
                return Err(ModelError::Parse {
                    line: no,
                    msg: format!("label {label} is not 0 or 1"),
                });
            }
            labels.push(label);
            let (no, pixels) = next("pixel row")?;
            let row: Vec<f64> = pixels
                .split_whitespace()
                .map(|t| parse_field(t, no))
                .collect::<Result<_, _>>()?;
            if row.len() != side * side {
                return Err(ModelError::Parse {
                    line: no,
                    msg: format!("expected {} intensities, found {}", side * side, row.len()),
                });
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(ModelError::Parse {
                    line: no,
                    msg: format!("intensity {v} outside [0, 1]"),
                });
            }
            images.push(row);
        }
        Dataset::new(side, images, labels, subject_ids)
    }
}

fn parse_field<T: std::str::FromStr>(tok: &str, line: usize) -> Result<T, ModelError>
where
    T::Err: std::fmt::Display,
{
    tok.parse::<T>().map_err(|e| ModelError::Parse {
        line,
        msg: format!("`{tok}`: {e}"),
    })
}

const STRIPE_AMPLITUDE: f64 = 0.3;
const FREQ_BEFORE: f64 = 3.0;
const FREQ_AFTER: f64 = 5.0;
const SUBJECT_OFFSET: f64 = 0.1;
const PHASE_JITTER: f64 = 0.4;
const NOISE_SIGMA: f64 = 0.08;

/// Deterministic synthetic set of `subjects × images_per_subject` images of
/// `side × side` pixels. Labels alternate within a subject so classes stay
/// balanced.
pub fn synth_dataset(seed: u64, subjects: usize, images_per_subject: usize, side: usize) -> Dataset {
    assert!(side >= 8, "side must be at least 8");
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
    let mut images = Vec::with_capacity(subjects * images_per_subject);
    let mut labels = Vec::with_capacity(subjects * images_per_subject);
    let mut subject_ids = Vec::with_capacity(subjects * images_per_subject);
    for subject in 0..subjects {
        let offset = rng.gen_range(-SUBJECT_OFFSET..=SUBJECT_OFFSET);
        let phase = rng.gen_range(-PHASE_JITTER..=PHASE_JITTER);
        for k in 0..images_per_subject {
            let label = k % 2;
            let freq = if label == 0 { FREQ_BEFORE } else { FREQ_AFTER };
            let mut img = Vec::with_capacity(side * side);
            for y in 0..side {
                for x in 0..side {
                    let coord = if label == 0 { x } else { y } as f64;
                    let stripe = (2.0 * PI * freq * coord / side as f64 + phase).sin();
                    let v = 0.5 + STRIPE_AMPLITUDE * stripe + offset + noise.sample(&mut rng);
                    img.push(v.clamp(0.0, 1.0));
                }
            }
            images.push(img);
            labels.push(label);
            subject_ids.push(subject as u32);
        }
    }
    Dataset {
        side,
        images,
        labels,
        subject_ids,
    }
}

/// Horizontal minus vertical lag-1 autocorrelation of a square image.
/// Negative for stripes varying along x, positive for stripes along y.
pub fn orientation_statistic(img: &[f64], side: usize) -> f64 {
    let mean = img.iter().sum::<f64>() / img.len() as f64;
    let var = img.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / img.len() as f64;
    if var == 0.0 {
        return 0.0;
    }
    let at = |x: usize, y: usize| img[y * side + x] - mean;
    let (mut h, mut v) = (0.0, 0.0);
    for y in 0..side {
        for x in 0..side - 1 {
            h += at(x, y) * at(x + 1, y);
            v += at(y, x) * at(y, x + 1);
        }
    }
    let pairs = (side * (side - 1)) as f64;
    (h - v) / pairs / var
}

/// Class separation of [`orientation_statistic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Separation {
    pub mean_before: f64,
    pub mean_after: f64,
    pub pooled_std: f64,
}

impl Separation {
    /// Distance between class means in units of the pooled within-class std.
    pub fn margin_sigmas(&self) -> f64 {
        (self.mean_after - self.mean_before).abs() / self.pooled_std.max(f64::MIN_POSITIVE)
    }
}

pub fn class_separation(ds: &Dataset) -> Separation {
    let mut groups = [Vec::new(), Vec::new()];
    for (img, &label) in ds.images.iter().zip(&ds.labels) {
        groups[label].push(orientation_statistic(img, ds.side));
    }
    let mean = |g: &[f64]| g.iter().sum::<f64>() / g.len().max(1) as f64;
    let (m0, m1) = (mean(&groups[0]), mean(&groups[1]));
    let ss: f64 = groups[0].iter().map(|v| (v - m0).powi(2)).sum::<f64>()
        + groups[1].iter().map(|v| (v - m1).powi(2)).sum::<f64>();
    let dof = (groups[0].len() + groups[1].len()).saturating_sub(2).max(1);
    Separation {
        mean_before: m0,
        mean_after: m1,
        pooled_std: (ss / dof as f64).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_shaped_set_is_balanced() {
        let ds = synth_dataset(1, 52, 2, 32);
        assert_eq!(ds.len(), 104);
        assert_eq!(ds.dim(), 1024);
        assert_eq!(ds.labels.iter().filter(|&&l| l == 0).count(), 52);
        assert!(ds.images.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn deterministic_by_seed() {
        assert_eq!(synth_dataset(9, 4, 2, 8).to_text(), synth_dataset(9, 4, 2, 8).to_text());
        assert_ne!(synth_dataset(9, 4, 2, 8), synth_dataset(10, 4, 2, 8));
    }

    #[test]
    fn classes_separate_by_orientation() {
        let sep = class_separation(&synth_dataset(1, 52, 2, 32));
        assert!(sep.mean_before < 0.0 && sep.mean_after > 0.0, "{sep:?}");
        assert!(sep.margin_sigmas() > 3.0, "{sep:?}");
    }

    #[test]
    fn split_is_cross_subject() {
        let ds = synth_dataset(2, 52, 2, 8);
        let (train, test) = ds.split_by_subject(0.5, 7);
        assert_eq!(train.len() + test.len(), ds.len());
        assert_eq!(test.subjects().len(), 26);
        assert!(train.subjects().is_disjoint(&test.subjects()));
    }

    #[test]
    fn text_round_trip() {
        let ds = synth_dataset(3, 3, 2, 8);
        let back = Dataset::read_from(ds.to_text().as_bytes()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn malformed_text_rejected() {
        let ds = synth_dataset(3, 2, 2, 8);
        let text = ds.to_text();
        let truncated = &text[..text.len() - 20];
        assert!(Dataset::read_from(truncated.as_bytes()).is_err());
        assert!(matches!(
            Dataset::read_from("imgset 8\n".as_bytes()),
            Err(ModelError::Parse { line: 1, .. })
        ));
        let bad_label = text.replacen("0 1\n", "0 7\n", 1);
        assert!(matches!(Dataset::read_from(bad_label.as_bytes()), Err(ModelError::Parse { .. })));
    }

    #[test]
    fn subject_pair_lookup() {
        let ds = synth_dataset(4, 3, 2, 8);
        let (before, after) = ds.subject_pair(1).unwrap();
        assert_eq!(before, ds.images[2].as_slice());
        assert_eq!(after, ds.images[3].as_slice());
        assert!(ds.subject_pair(99).is_none());
    }
}
