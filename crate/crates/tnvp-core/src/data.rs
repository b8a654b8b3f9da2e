//! Stage-sequence datasets: synthetic generators, CSV persistence, and
//! the pairing structure used for conditional training.
//!
//! Generators emit per-subject trajectories: one latent identity per
//! subject persists across stages while the stage distribution drifts,
//! so consecutive-stage pairs carry real predictive signal. Pairs only
//! ever link stage i-1 to stage i.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Synthetic generator families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Gaussian cloud whose mean shifts by one unit along the first axis
    /// per stage.
    GaussianDrift,
    /// Two-moons shape rotating by 22.5 degrees per stage (needs D >= 2).
    RotatingMoons,
    /// Two well-separated mixture components drifting together along the
    /// second axis; component membership persists per subject.
    MixtureMorph,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::GaussianDrift => "gaussian-drift",
            DatasetKind::RotatingMoons => "rotating-moons",
            DatasetKind::MixtureMorph => "mixture-morph",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "gaussian-drift" => Ok(DatasetKind::GaussianDrift),
            "rotating-moons" => Ok(DatasetKind::RotatingMoons),
            "mixture-morph" => Ok(DatasetKind::MixtureMorph),
            other => Err(Error::invalid(format!(
                "unknown dataset kind {other:?} (expected gaussian-drift, rotating-moons, or mixture-morph)"
            ))),
        }
    }
}

/// Where a dataset came from; purely descriptive.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Generated { kind: DatasetKind, seed: u64 },
    File { path: String },
    Memory,
}

/// Per-dimension standardization parameters, recorded when applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// One consecutive-stage observation pair.
#[derive(Debug, Clone, PartialEq)]
pub struct StagePair<S: Scalar = f64> {
    pub x_prev: Tensor<S>,
    pub x_t: Tensor<S>,
    /// Index of the later stage; 1 means the pair links stage 0 to 1.
    pub stage_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSequenceDataset<S: Scalar = f64> {
    dim: usize,
    stages: usize,
    pairs: Vec<StagePair<S>>,
    provenance: Provenance,
    standardization: Option<Standardization>,
}

impl<S: Scalar> StageSequenceDataset<S> {
    pub fn new(
        dim: usize,
        stages: usize,
        pairs: Vec<StagePair<S>>,
        provenance: Provenance,
    ) -> Result<Self> {
        if stages < 2 {
            return Err(Error::invalid(format!(
                "a paired dataset needs at least 2 stages, got {stages}"
            )));
        }
        for (i, pair) in pairs.iter().enumerate() {
            if pair.x_prev.len() != dim || pair.x_t.len() != dim {
                return Err(Error::invalid(format!(
                    "pair {i} has dimensions {} / {}, dataset has {dim}",
                    pair.x_prev.len(),
                    pair.x_t.len()
                )));
            }
            if pair.stage_index == 0 || pair.stage_index >= stages {
                return Err(Error::invalid(format!(
                    "pair {i} has stage index {} outside 1..{}",
                    pair.stage_index, stages
                )));
            }
        }
        Ok(StageSequenceDataset {
            dim,
            stages,
            pairs,
            provenance,
            standardization: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn stages(&self) -> usize {
        self.stages
    }

    pub fn pairs(&self) -> &[StagePair<S>] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    /// All observations pooled (both sides of every pair); handy for
    /// standalone flow pretraining.
    pub fn pooled_observations(&self) -> Vec<Tensor<S>> {
        let mut out = Vec::with_capacity(self.pairs.len() * 2);
        for pair in &self.pairs {
            out.push(pair.x_prev.clone());
            out.push(pair.x_t.clone());
        }
        out
    }

    /// Standardize each dimension to zero mean and unit variance over the
    /// pooled observations, in place. Constant dimensions are left at
    /// their centered values (divisor clamped to 1). Parameters are
    /// recorded in the descriptor; repeated calls re-standardize.
    pub fn standardize(&mut self) -> &Standardization {
        let n = (self.pairs.len() * 2).max(1) as f64;
        let mut mean = vec![0.0f64; self.dim];
        for pair in &self.pairs {
            for (m, &v) in mean.iter_mut().zip(pair.x_prev.data()) {
                *m += v.to_f64_lossy();
            }
            for (m, &v) in mean.iter_mut().zip(pair.x_t.data()) {
                *m += v.to_f64_lossy();
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0f64; self.dim];
        for pair in &self.pairs {
            for ((s, &v), m) in var.iter_mut().zip(pair.x_prev.data()).zip(&mean) {
                let d = v.to_f64_lossy() - m;
                *s += d * d;
            }
            for ((s, &v), m) in var.iter_mut().zip(pair.x_t.data()).zip(&mean) {
                let d = v.to_f64_lossy() - m;
                *s += d * d;
            }
        }
        let std: Vec<f64> = var
            .iter()
            .map(|&s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        for pair in &mut self.pairs {
            for t in [&mut pair.x_prev, &mut pair.x_t] {
                for ((v, m), sd) in t.data_mut().iter_mut().zip(&mean).zip(&std) {
                    *v = (*v - S::from_f64_lossy(*m)) / S::from_f64_lossy(*sd);
                }
            }
        }
        self.standardization = Some(Standardization { mean, std });
        self.standardization.as_ref().expect("just set")
    }

    /// Deterministic split into (train, held-out) by a seeded shuffle.
    pub fn shuffle_split(&self, train_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::invalid(format!(
                "train fraction {train_fraction} outside [0, 1]"
            )));
        }
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shuffle(&mut order, &mut rng);
        let n_train = (self.pairs.len() as f64 * train_fraction).round() as usize;
        let make = |indices: &[usize]| StageSequenceDataset {
            dim: self.dim,
            stages: self.stages,
            pairs: indices.iter().map(|&i| self.pairs[i].clone()).collect(),
            provenance: self.provenance.clone(),
            standardization: self.standardization.clone(),
        };
        Ok((make(&order[..n_train]), make(&order[n_train..])))
    }

    /// Control dataset with the pairing destroyed: the x_prev sides are
    /// permuted across pairs, keeping both marginals intact.
    pub fn shuffled_pairs(&self, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shuffle(&mut order, &mut rng);
        let pairs = self
            .pairs
            .iter()
            .zip(&order)
            .map(|(pair, &j)| StagePair {
                x_prev: self.pairs[j].x_prev.clone(),
                x_t: pair.x_t.clone(),
                stage_index: pair.stage_index,
            })
            .collect();
        StageSequenceDataset {
            dim: self.dim,
            stages: self.stages,
            pairs,
            provenance: self.provenance.clone(),
            standardization: self.standardization.clone(),
        }
    }
}

/// Fisher-Yates with our own loop so the byte stream consumed from the
/// generator is pinned by this crate, not by a library's internals.
fn shuffle<R: Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

/// Deterministic synthetic dataset of consecutive-stage pairs.
pub fn generate_drift_dataset<S: Scalar>(
    kind: DatasetKind,
    dim: usize,
    stages: usize,
    n_per_stage: usize,
    seed: u64,
) -> Result<StageSequenceDataset<S>> {
    if stages < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 stages, got {stages}"
        )));
    }
    if n_per_stage == 0 {
        return Err(Error::invalid("need at least 1 subject per stage"));
    }
    if dim == 0 {
        return Err(Error::invalid("dimension must be positive"));
    }
    if kind == DatasetKind::RotatingMoons && dim < 2 {
        return Err(Error::invalid("rotating-moons needs dimension >= 2"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let mut pairs = Vec::with_capacity(n_per_stage * (stages - 1));
    for _subject in 0..n_per_stage {
        // Per-subject identity, drawn once and reused at every stage.
        let trajectory: Vec<Vec<f64>> = match kind {
            DatasetKind::GaussianDrift => {
                let u: Vec<f64> = (0..dim).map(|_| normal(&mut rng)).collect();
                (0..stages)
                    .map(|t| {
                        (0..dim)
                            .map(|k| {
                                let shift = if k == 0 { t as f64 } else { 0.0 };
                                u[k] + shift + 0.1 * normal(&mut rng)
                            })
                            .collect()
                    })
                    .collect()
            }
            DatasetKind::RotatingMoons => {
                let moon = rng.random_range(0..2u32);
                let arc = rng.random_range(0.0..std::f64::consts::PI);
                let (bx, by) = if moon == 0 {
                    (arc.cos(), arc.sin())
                } else {
                    (1.0 - arc.cos(), 0.5 - arc.sin())
                };
                let extra: Vec<f64> = (2..dim).map(|_| 0.5 * normal(&mut rng)).collect();
                (0..stages)
                    .map(|t| {
                        let phi = t as f64 * std::f64::consts::FRAC_PI_8;
                        let (c, s) = (phi.cos(), phi.sin());
                        let mut row = Vec::with_capacity(dim);
                        row.push(bx * c - by * s + 0.05 * normal(&mut rng));
                        row.push(bx * s + by * c + 0.05 * normal(&mut rng));
                        for &e in &extra {
                            row.push(e + 0.05 * normal(&mut rng));
                        }
                        row
                    })
                    .collect()
            }
            DatasetKind::MixtureMorph => {
                let component = rng.random_range(0..2u32);
                let center0 = if component == 0 { -2.0 } else { 2.0 };
                let offset: Vec<f64> = (0..dim).map(|_| 0.4 * normal(&mut rng)).collect();
                (0..stages)
                    .map(|t| {
                        (0..dim)
                            .map(|k| {
                                let base = match k {
                                    0 => center0,
                                    1 => 0.5 * t as f64,
                                    _ => 0.0,
                                };
                                base + offset[k] + 0.2 * normal(&mut rng)
                            })
                            .collect()
                    })
                    .collect()
            }
        };
        for t in 1..stages {
            pairs.push(StagePair {
                x_prev: Tensor::from_vec(
                    trajectory[t - 1]
                        .iter()
                        .map(|&v| S::from_f64_lossy(v))
                        .collect(),
                ),
                x_t: Tensor::from_vec(
                    trajectory[t]
                        .iter()
                        .map(|&v| S::from_f64_lossy(v))
                        .collect(),
                ),
                stage_index: t,
            });
        }
    }
    StageSequenceDataset::new(dim, stages, pairs, Provenance::Generated { kind, seed })
}

/// Write a dataset as CSV: header `stage_index,prev_0..,next_0..`, one
/// pair per row, 17-significant-digit floats so every f64 round-trips.
pub fn save_dataset<S: Scalar>(ds: &StageSequenceDataset<S>, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("stage_index");
    for i in 0..ds.dim() {
        let _ = write!(out, ",prev_{i}");
    }
    for i in 0..ds.dim() {
        let _ = write!(out, ",next_{i}");
    }
    out.push('\n');
    for pair in ds.pairs() {
        let _ = write!(out, "{}", pair.stage_index);
        for &v in pair.x_prev.data() {
            let _ = write!(out, ",{:.16e}", v.to_f64_lossy());
        }
        for &v in pair.x_t.data() {
            let _ = write!(out, ",{:.16e}", v.to_f64_lossy());
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Load a dataset saved by [`save_dataset`]. Errors carry 1-based line
/// numbers; the header is line 1.
pub fn load_dataset<S: Scalar>(path: &Path) -> Result<StageSequenceDataset<S>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "empty file, expected a header".into(),
    })?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.first() != Some(&"stage_index")
        || columns.len() < 3
        || columns.len().is_multiple_of(2)
    {
        return Err(Error::Parse {
            line: 1,
            message: format!("malformed header {header:?}"),
        });
    }
    let dim = (columns.len() - 1) / 2;
    for i in 0..dim {
        if columns[1 + i] != format!("prev_{i}") || columns[1 + dim + i] != format!("next_{i}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("malformed header {header:?}"),
            });
        }
    }

    let mut pairs = Vec::new();
    let mut max_stage = 1;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 1 + 2 * dim {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} columns, found {}", 1 + 2 * dim, fields.len()),
            });
        }
        let stage_index: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad stage index {:?}", fields[0]),
        })?;
        if stage_index == 0 {
            return Err(Error::Parse {
                line: line_no,
                message: "stage index must be at least 1".into(),
            });
        }
        max_stage = max_stage.max(stage_index);
        let parse_at = |col: usize| -> Result<S> {
            let raw = fields[col];
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("bad float {raw:?} in column {col}"),
            })?;
            Ok(S::from_f64_lossy(v))
        };
        let x_prev: Vec<S> = (0..dim).map(|i| parse_at(1 + i)).collect::<Result<_>>()?;
        let x_t: Vec<S> = (0..dim)
            .map(|i| parse_at(1 + dim + i))
            .collect::<Result<_>>()?;
        pairs.push(StagePair {
            x_prev: Tensor::from_vec(x_prev),
            x_t: Tensor::from_vec(x_t),
            stage_index,
        });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    StageSequenceDataset::new(
        dim,
        max_stage + 1,
        pairs,
        Provenance::File {
            path: path.display().to_string(),
        },
    )
}
