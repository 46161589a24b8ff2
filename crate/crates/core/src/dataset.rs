//! UCI Glass identification data: parsing, min-max scaling and the
//! stratified train/validation/test partition.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// The vendored copy of `glass.data`.
pub const GLASS_DATA: &str = include_str!("../data/glass.data");
pub const GLASS_NAME: &str = "glass";
pub const GLASS_SAMPLES: usize = 214;
pub const GLASS_FEATURES: usize = 9;
pub const GLASS_FEATURE_NAMES: [&str; GLASS_FEATURES] =
    ["RI", "Na", "Mg", "Al", "Si", "K", "Ca", "Ba", "Fe"];
pub const DEFAULT_SPLIT_RATIOS: [f64; 3] = [0.50, 0.25, 0.25];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("dataset checksum mismatch: expected {expected}, found {found}")]
    Checksum { expected: String, found: String },
    #[error("reading dataset {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub class_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlassDataset {
    pub samples: Vec<Sample>,
    /// Original labels in ascending order; `class_index` indexes this list.
    pub class_labels: Vec<u32>,
    /// Per-feature minimum of the raw (unscaled) data.
    pub feature_mins: Vec<f64>,
    /// Per-feature maximum of the raw (unscaled) data.
    pub feature_maxs: Vec<f64>,
    pub normalized: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThreeWaySplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub split_seed: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Checksum of the vendored Glass file.
pub fn glass_checksum() -> String {
    sha256_hex(GLASS_DATA.as_bytes())
}

/// Parses UCI `glass.data`: `id, RI, Na, Mg, Al, Si, K, Ca, Ba, Fe, type`.
pub fn parse_uci_glass(text: &str) -> Result<GlassDataset, DatasetError> {
    let mut rows: Vec<(Vec<f64>, u32)> = Vec::with_capacity(GLASS_SAMPLES);
    let mut last_line = 0;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        last_line = line_no;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != GLASS_FEATURES + 2 {
            return Err(DatasetError::Parse {
                line: line_no,
                message: format!("expected {} columns, found {}", GLASS_FEATURES + 2, fields.len()),
            });
        }
        let mut features = Vec::with_capacity(GLASS_FEATURES);
        for (col, f) in fields[1..=GLASS_FEATURES].iter().enumerate() {
            let v: f64 = f.parse().map_err(|_| DatasetError::Parse {
                line: line_no,
                message: format!("{} is not numeric: {f:?}", GLASS_FEATURE_NAMES[col]),
            })?;
            if !v.is_finite() {
                return Err(DatasetError::Parse {
                    line: line_no,
                    message: format!("{} is not finite", GLASS_FEATURE_NAMES[col]),
                });
            }
            features.push(v);
        }
        let label_field = fields[GLASS_FEATURES + 1];
        let label: u32 = label_field.parse().map_err(|_| DatasetError::Parse {
            line: line_no,
            message: format!("class label is not an integer: {label_field:?}"),
        })?;
        rows.push((features, label));
    }
    if rows.len() != GLASS_SAMPLES {
        return Err(DatasetError::Parse {
            line: last_line + 1,
            message: format!("expected {GLASS_SAMPLES} samples, found {}", rows.len()),
        });
    }

    let class_labels: Vec<u32> = rows
        .iter()
        .map(|(_, l)| *l)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut feature_mins = vec![f64::INFINITY; GLASS_FEATURES];
    let mut feature_maxs = vec![f64::NEG_INFINITY; GLASS_FEATURES];
    let samples = rows
        .into_iter()
        .map(|(features, label)| {
            for (j, v) in features.iter().enumerate() {
                feature_mins[j] = feature_mins[j].min(*v);
                feature_maxs[j] = feature_maxs[j].max(*v);
            }
            let class_index = class_labels.binary_search(&label).expect("label collected above");
            Sample { features, class_index }
        })
        .collect();

    Ok(GlassDataset {
        samples,
        class_labels,
        feature_mins,
        feature_maxs,
        normalized: false,
    })
}

/// Loads a dataset by name, either from `path` or from the vendored copy.
pub fn load_named(name: &str, path: Option<&std::path::Path>) -> Result<(String, GlassDataset), DatasetError> {
    if name != GLASS_NAME {
        return Err(DatasetError::UnknownDataset(name.to_string()));
    }
    let text = match path {
        Some(p) => std::fs::read_to_string(p).map_err(|e| DatasetError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        })?,
        None => GLASS_DATA.to_string(),
    };
    let ds = parse_uci_glass(&text)?;
    Ok((sha256_hex(text.as_bytes()), ds))
}

impl GlassDataset {
    pub fn n_classes(&self) -> usize {
        self.class_labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_mins.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for s in &self.samples {
            counts[s.class_index] += 1;
        }
        counts
    }

    /// Min-max scales every feature into [0, 1] using statistics over the
    /// whole dataset. Constant features become 0. Already-normalized data is
    /// returned unchanged.
    pub fn normalize(&self) -> GlassDataset {
        if self.normalized {
            return self.clone();
        }
        let samples = self
            .samples
            .iter()
            .map(|s| Sample {
                features: s
                    .features
                    .iter()
                    .enumerate()
                    .map(|(j, v)| {
                        let (lo, hi) = (self.feature_mins[j], self.feature_maxs[j]);
                        if hi > lo {
                            ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
                        } else {
                            0.0
                        }
                    })
                    .collect(),
                class_index: s.class_index,
            })
            .collect();
        GlassDataset {
            samples,
            normalized: true,
            ..self.clone()
        }
    }

    /// Writes the samples back out in UCI layout with 1-based ids.
    pub fn to_uci_text(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.samples.iter().enumerate() {
            write!(out, "{}", i + 1).unwrap();
            for v in &s.features {
                write!(out, ",{v:?}").unwrap();
            }
            writeln!(out, ",{}", self.class_labels[s.class_index]).unwrap();
        }
        out
    }

    pub fn select(&self, indices: &[usize]) -> Vec<Sample> {
        indices.iter().map(|&i| self.samples[i].clone()).collect()
    }

    /// Stratified, seeded three-way partition. See [`split_counts`] for how
    /// each class is apportioned.
    pub fn split(&self, seed: u64, ratios: [f64; 3]) -> Result<ThreeWaySplit, DatasetError> {
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); self.n_classes()];
        for (i, s) in self.samples.iter().enumerate() {
            by_class[s.class_index].push(i);
        }
        let sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
        let alloc = split_counts(&sizes, ratios)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut parts: [Vec<usize>; 3] = Default::default();
        for (members, counts) in by_class.iter_mut().zip(&alloc) {
            members.shuffle(&mut rng);
            let mut rest = members.as_slice();
            for (part, &n) in parts.iter_mut().zip(counts) {
                let (head, tail) = rest.split_at(n);
                part.extend_from_slice(head);
                rest = tail;
            }
        }
        for part in &mut parts {
            part.sort_unstable();
        }
        let [train, validation, test] = parts;
        Ok(ThreeWaySplit {
            train,
            validation,
            test,
            split_seed: seed,
        })
    }
}

fn largest_remainder(total: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| r * total as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut left = total - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &p in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[p] += 1;
        left -= 1;
    }
    counts
}

/// Per-class part sizes for a stratified split.
///
/// Global part sizes follow largest-remainder rounding of `ratios * total`
/// (ties to the earlier part). Each class gets the floor of its exact quota
/// per part plus at most one extra sample, so every class is within one
/// sample of its proportional share. Leftover samples are placed by a
/// depth-first search that tries, class by class, the parts with the largest
/// fractional quota first; this controlled rounding always exists.
pub fn split_counts(class_sizes: &[usize], ratios: [f64; 3]) -> Result<Vec<[usize; 3]>, DatasetError> {
    if ratios.iter().any(|r| r.is_nan() || *r <= 0.0) {
        return Err(DatasetError::Split(format!("ratios must be positive: {ratios:?}")));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DatasetError::Split(format!("ratios must sum to 1: {ratios:?}")));
    }
    let total: usize = class_sizes.iter().sum();
    let targets = largest_remainder(total, ratios);
    if targets.contains(&0) {
        return Err(DatasetError::Split(format!(
            "{total} samples cannot fill three non-empty parts with ratios {ratios:?}"
        )));
    }

    let mut alloc: Vec<[usize; 3]> = Vec::with_capacity(class_sizes.len());
    let mut options: Vec<Vec<[usize; 3]>> = Vec::with_capacity(class_sizes.len());
    for &n in class_sizes {
        let quotas = ratios.map(|r| r * n as f64);
        let floors = quotas.map(|q| q.floor() as usize);
        let extra = n - floors.iter().sum::<usize>();
        let frac = |p: usize| quotas[p] - quotas[p].floor();
        // every way of spreading `extra` single samples over distinct parts
        let mut choices: Vec<([usize; 3], f64)> = Vec::new();
        for mask in 0u8..8 {
            if mask.count_ones() as usize != extra {
                continue;
            }
            let bump = [0, 1, 2].map(|p| ((mask >> p) & 1) as usize);
            let score: f64 = (0..3).filter(|&p| bump[p] == 1).map(frac).sum();
            choices.push((bump, score));
        }
        // higher total fraction first; among equals prefer earlier parts
        choices.sort_by(|a, b| b.1.total_cmp(&a.1).then(b.0.cmp(&a.0)));
        alloc.push(floors);
        options.push(choices.into_iter().map(|(b, _)| b).collect());
    }

    let mut capacity = [0usize; 3];
    for p in 0..3 {
        let used: usize = alloc.iter().map(|a| a[p]).sum();
        capacity[p] = targets[p] - used;
    }
    let mut picks = vec![0usize; class_sizes.len()];
    if !place_extras(0, &options, &mut capacity, &mut picks) {
        return Err(DatasetError::Split("no consistent stratified allocation".into()));
    }
    for (a, (opts, &pick)) in alloc.iter_mut().zip(options.iter().zip(&picks)) {
        for p in 0..3 {
            a[p] += opts[pick][p];
        }
    }
    Ok(alloc)
}

fn place_extras(class: usize, options: &[Vec<[usize; 3]>], capacity: &mut [usize; 3], picks: &mut [usize]) -> bool {
    if class == options.len() {
        return capacity.iter().all(|&c| c == 0);
    }
    for (i, bump) in options[class].iter().enumerate() {
        if (0..3).all(|p| bump[p] <= capacity[p]) {
            (0..3).for_each(|p| capacity[p] -= bump[p]);
            picks[class] = i;
            if place_extras(class + 1, options, capacity, picks) {
                return true;
            }
            (0..3).for_each(|p| capacity[p] += bump[p]);
        }
    }
    false
}
