//! Seeded synthetic datasets with ground-truth labels, plus CSV load/save.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetMeta {
    pub generator: String,
    pub seed: u64,
    pub params: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub meta: DatasetMeta,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.first().map_or(0, Vec::len)
    }

    pub fn n_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }
}

/// `k_true` unit-variance Gaussian clusters with balanced labels.
///
/// Centers sit on a circle of radius `separation` for `d_x == 2`; otherwise
/// they point along random orthogonalized directions scaled by `separation`.
pub fn gen_gaussian_clusters(
    k_true: usize,
    n: usize,
    d_x: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if k_true == 0 || n == 0 || d_x == 0 {
        return Err(Error::InvalidArgument("counts must be >= 1".into()));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "separation {separation} must be > 0"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = if d_x == 2 {
        (0..k_true)
            .map(|k| {
                let angle = 2.0 * std::f64::consts::PI * k as f64 / k_true as f64;
                vec![separation * angle.cos(), separation * angle.sin()]
            })
            .collect()
    } else {
        // random directions, Gram-Schmidt orthogonalized while possible
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(k_true);
        for _ in 0..k_true {
            let mut v: Vec<f64> = (0..d_x).map(|_| rng.sample(StandardNormal)).collect();
            for prev in &dirs {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (vi, pi) in v.iter_mut().zip(prev) {
                    *vi -= dot * pi;
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                v.iter_mut().for_each(|x| *x /= norm);
            } else {
                // more clusters than dimensions: fall back to a fresh unit draw
                let fresh: Vec<f64> = (0..d_x).map(|_| rng.sample(StandardNormal)).collect();
                let n2 = fresh.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
                v = fresh.into_iter().map(|x| x / n2).collect();
            }
            dirs.push(v);
        }
        dirs.into_iter()
            .map(|d| d.into_iter().map(|x| x * separation).collect())
            .collect()
    };

    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k_true;
        let point = centers[label]
            .iter()
            .map(|&c| {
                let e: f64 = rng.sample(StandardNormal);
                c + e
            })
            .collect();
        points.push(point);
        labels.push(label);
    }
    Ok(LabeledDataset {
        points,
        labels,
        meta: DatasetMeta {
            generator: "gaussian_clusters".into(),
            seed,
            params: format!("k={k_true},n={n},dim={d_x},sep={separation}"),
        },
    })
}

/// `k_true` random binary templates; each sample is its template with i.i.d.
/// bit flips at rate `flip_prob`.
pub fn gen_binary_templates(
    k_true: usize,
    n: usize,
    d_x: usize,
    flip_prob: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if k_true == 0 || n == 0 || d_x == 0 {
        return Err(Error::InvalidArgument("counts must be >= 1".into()));
    }
    if !(0.0..0.5).contains(&flip_prob) {
        return Err(Error::InvalidArgument(format!(
            "flip_prob {flip_prob} outside [0, 0.5)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f64>> = (0..k_true)
        .map(|_| (0..d_x).map(|_| f64::from(rng.random::<bool>())).collect())
        .collect();
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k_true;
        let point = templates[label]
            .iter()
            .map(|&bit| {
                if rng.random::<f64>() < flip_prob {
                    1.0 - bit
                } else {
                    bit
                }
            })
            .collect();
        points.push(point);
        labels.push(label);
    }
    Ok(LabeledDataset {
        points,
        labels,
        meta: DatasetMeta {
            generator: "binary_templates".into(),
            seed,
            params: format!("k={k_true},n={n},dim={d_x},flip={flip_prob}"),
        },
    })
}

/// Write `label,f0,f1,...` CSV. Floats use the shortest exact representation,
/// so a save/load round trip reproduces values bit for bit.
pub fn save_csv(dataset: &LabeledDataset, path: impl AsRef<Path>) -> Result<()> {
    let dim = dataset.dim();
    let mut out = String::from("label");
    for d in 0..dim {
        out.push_str(&format!(",f{d}"));
    }
    out.push('\n');
    for (point, label) in dataset.points.iter().zip(&dataset.labels) {
        out.push_str(&label.to_string());
        for v in point {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"label") {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header starting with `label`, got `{header}`"),
        });
    }
    let dim = cols.len() - 1;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected {} fields, got {}", dim + 1, fields.len()),
            });
        }
        let label: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad label `{}`", fields[0]),
        })?;
        let mut point = Vec::with_capacity(dim);
        for f in &fields[1..] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad number `{f}`"),
            })?;
            point.push(v);
        }
        labels.push(label);
        points.push(point);
    }
    Ok(LabeledDataset {
        points,
        labels,
        meta: DatasetMeta {
            generator: "csv".into(),
            seed: 0,
            params: path.display().to_string(),
        },
    })
}
