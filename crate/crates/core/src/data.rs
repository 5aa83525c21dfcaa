//! Labeled vector datasets: synthetic Gaussian clusters and CSV I/O.
//!
//! CSV layout: header `f0,...,f{d-1},label[,clean_label]`, one sample per
//! row. Floats are written with Rust's shortest round-trip formatting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `[N][dim]`.
    pub features: Vec<f64>,
    pub dim: usize,
    /// Labels used for training (possibly corrupted).
    pub labels: Vec<usize>,
    /// Ground truth, when known.
    pub clean_labels: Option<Vec<usize>>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.features.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Contract("dataset is empty".into()));
        }
        if self.features.len() != self.len() * self.dim {
            return Err(Error::Dimension {
                expected: self.len() * self.dim,
                got: self.features.len(),
            });
        }
        let bad = self
            .labels
            .iter()
            .chain(self.clean_labels.iter().flatten())
            .any(|&y| y >= self.classes);
        if bad {
            return Err(Error::Contract(format!("label outside [0, {})", self.classes)));
        }
        Ok(())
    }

    /// Indices whose training label differs from the ground truth.
    pub fn mislabeled(&self) -> Option<Vec<usize>> {
        self.clean_labels.as_ref().map(|clean| {
            clean
                .iter()
                .zip(&self.labels)
                .enumerate()
                .filter(|(_, (c, y))| c != y)
                .map(|(i, _)| i)
                .collect()
        })
    }

    /// Per-feature standard deviation.
    pub fn feature_std(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim)
            .map(|j| {
                let mean = (0..self.len()).map(|i| self.row(i)[j]).sum::<f64>() / n;
                let var = (0..self.len())
                    .map(|i| (self.row(i)[j] - mean).powi(2))
                    .sum::<f64>()
                    / n;
                var.sqrt()
            })
            .collect()
    }
}

/// Parameters of the Gaussian-cluster generator.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub samples: usize,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub within_std: f64,
    pub seed: u64,
}

const PLACEMENT_TRIES: usize = 10_000;

/// `K` isotropic Gaussian clusters whose centers sit at pairwise distance at
/// least `separation`; shuffled and split 80/20 into train and test.
pub fn make_gaussian_clusters(spec: &ClusterSpec) -> Result<(Dataset, Dataset)> {
    let ClusterSpec {
        samples,
        classes,
        dim,
        separation,
        within_std,
        seed,
    } = *spec;
    if samples < 2 || classes < 2 || dim == 0 {
        return Err(Error::Contract("need samples >= 2, classes >= 2, dim >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = separation;
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut tries = 0;
    while centers.len() < classes {
        tries += 1;
        if tries > PLACEMENT_TRIES * classes {
            return Err(Error::Infeasible {
                k: classes,
                d: dim,
                separation,
            });
        }
        let mut c: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        c.iter_mut().for_each(|x| *x *= radius / norm);
        let far = centers.iter().all(|o| {
            o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= separation
        });
        if far {
            centers.push(c);
        }
    }

    let mut labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut features = Vec::with_capacity(samples * dim);
    for &y in &labels {
        for &c in &centers[y] {
            let z: f64 = StandardNormal.sample(&mut rng);
            features.push(c + within_std * z);
        }
    }
    let n_train = samples * 4 / 5;
    let make = |range: std::ops::Range<usize>, split| Dataset {
        features: features[range.start * dim..range.end * dim].to_vec(),
        dim,
        labels: labels[range.clone()].to_vec(),
        clean_labels: Some(labels[range].to_vec()),
        classes,
        split,
    };
    Ok((make(0..n_train, Split::Train), make(n_train..samples, Split::Test)))
}

pub fn to_csv_string(ds: &Dataset) -> String {
    let mut out = String::new();
    for j in 0..ds.dim {
        let _ = write!(out, "f{j},");
    }
    out.push_str("label");
    if ds.clean_labels.is_some() {
        out.push_str(",clean_label");
    }
    out.push('\n');
    for i in 0..ds.len() {
        for x in ds.row(i) {
            let _ = write!(out, "{x},");
        }
        let _ = write!(out, "{}", ds.labels[i]);
        if let Some(c) = &ds.clean_labels {
            let _ = write!(out, ",{}", c[i]);
        }
        out.push('\n');
    }
    out
}

pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, to_csv_string(ds))?;
    Ok(())
}

/// Parses a dataset. `classes` defaults to one past the largest label seen.
pub fn parse_csv(text: &str, classes: Option<usize>, split: Split) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    let has_clean = cols.last() == Some(&"clean_label");
    let n_feat = cols.len() - 1 - usize::from(has_clean);
    let header_ok = cols.len() >= 2
        && cols[n_feat] == "label"
        && cols[..n_feat]
            .iter()
            .enumerate()
            .all(|(j, c)| *c == format!("f{j}"));
    if !header_ok || n_feat == 0 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header f0,...,label[,clean_label], got {header:?}"),
        });
    }

    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut clean = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        for f in &fields[..n_feat] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad number {f:?}"),
            })?;
            features.push(v);
        }
        let parse_label = |s: &str| {
            s.parse::<usize>().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad label {s:?}"),
            })
        };
        labels.push(parse_label(fields[n_feat])?);
        if has_clean {
            clean.push(parse_label(fields[n_feat + 1])?);
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no samples".into(),
        });
    }
    let max_label = labels.iter().chain(&clean).copied().max().unwrap_or(0);
    let ds = Dataset {
        features,
        dim: n_feat,
        labels,
        clean_labels: has_clean.then_some(clean),
        classes: classes.unwrap_or(max_label + 1),
        split,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn load_csv(path: &Path, classes: Option<usize>, split: Split) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_csv(&text, classes, split)
}

/// Random subset of the rows, used by tests and quick experiments.
pub fn subsample<R: Rng + ?Sized>(ds: &Dataset, n: usize, rng: &mut R) -> Dataset {
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(rng);
    idx.truncate(n);
    idx.sort_unstable();
    Dataset {
        features: idx.iter().flat_map(|&i| ds.row(i).to_vec()).collect(),
        dim: ds.dim,
        labels: idx.iter().map(|&i| ds.labels[i]).collect(),
        clean_labels: ds.clean_labels.as_ref().map(|c| idx.iter().map(|&i| c[i]).collect()),
        classes: ds.classes,
        split: ds.split,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(seed: u64) -> ClusterSpec {
        ClusterSpec {
            samples: 500,
            classes: 4,
            dim: 5,
            separation: 4.0,
            within_std: 0.5,
            seed,
        }
    }

    #[test]
    fn clusters_are_deterministic() {
        assert_eq!(make_gaussian_clusters(&spec(3)).unwrap(), make_gaussian_clusters(&spec(3)).unwrap());
        assert_ne!(make_gaussian_clusters(&spec(3)).unwrap(), make_gaussian_clusters(&spec(4)).unwrap());
    }

    #[test]
    fn split_is_80_20() {
        let (tr, te) = make_gaussian_clusters(&spec(1)).unwrap();
        assert_eq!(tr.len(), 400);
        assert_eq!(te.len(), 100);
        assert_eq!(tr.split, Split::Train);
        tr.validate().unwrap();
    }

    #[test]
    fn infeasible_placement() {
        let s = ClusterSpec {
            classes: 3,
            dim: 1,
            ..spec(0)
        };
        assert!(matches!(make_gaussian_clusters(&s), Err(Error::Infeasible { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let (tr, _) = make_gaussian_clusters(&spec(7)).unwrap();
        let back = parse_csv(&to_csv_string(&tr), Some(4), Split::Train).unwrap();
        assert_eq!(back, tr);
    }

    #[test]
    fn csv_without_clean_column() {
        let ds = parse_csv("f0,f1,label\n0.5,1e-3,1\n-2,3,0\n", None, Split::Test).unwrap();
        assert_eq!(ds.classes, 2);
        assert_eq!(ds.clean_labels, None);
        assert_eq!(ds.features, vec![0.5, 1e-3, -2.0, 3.0]);
    }

    #[test]
    fn csv_header_mismatch() {
        let e = parse_csv("x,y,label\n1,2,0\n", None, Split::Train).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
    }

    #[test]
    fn csv_empty_file() {
        assert!(matches!(parse_csv("", None, Split::Train), Err(Error::Parse { line: 1, .. })));
        assert!(parse_csv("f0,label\n", None, Split::Train).is_err());
    }

    #[test]
    fn csv_bad_row_reports_line() {
        let e = parse_csv("f0,label\n1.0,0\nabc,1\n", None, Split::Train).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 3, .. }));
        let e = parse_csv("f0,label\n1.0,0,5\n", None, Split::Train).unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }));
    }
}
