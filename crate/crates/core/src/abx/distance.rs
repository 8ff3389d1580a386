use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::objectives::{check_simplex, floor_distribution, kl_divergence};

/// Local frame distance used inside DTW.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// Symmetric KL divergence, for posteriorgrams.
    Skl,
    /// One minus cosine similarity, for dense features.
    Cosine,
}

impl fmt::Display for Distance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Distance::Skl => "skl",
            Distance::Cosine => "cosine",
        })
    }
}

impl FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "skl" | "kl" => Ok(Distance::Skl),
            "cosine" | "cos" => Ok(Distance::Cosine),
            other => Err(Error::Config(format!(
                "unknown distance `{other}` (expected skl or cosine)"
            ))),
        }
    }
}

/// `KL(p || q) + KL(q || p)`, each direction flooring its second argument.
pub fn frame_distance_skl(p: &[f64], q: &[f64]) -> Result<f64> {
    Ok(kl_divergence(p, q)? + kl_divergence(q, p)?)
}

/// `1 - cos(u, v)`.
pub fn frame_distance_cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::contract(format!(
            "cosine: length mismatch {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::contract("cosine distance of a zero vector"));
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((1.0 - dot / (nu * nv)).clamp(0.0, 2.0))
}

pub fn frame_distance(dist: Distance, a: &[f64], b: &[f64]) -> Result<f64> {
    match dist {
        Distance::Skl => frame_distance_skl(a, b),
        Distance::Cosine => frame_distance_cosine(a, b),
    }
}

/// Frames preprocessed once so that pairwise distances are dot products.
#[derive(Clone, Debug)]
pub struct PreparedFrames {
    dist: Distance,
    dim: usize,
    /// skl: the distribution; cosine: the unit-normalized vector.
    primary: Vec<f64>,
    /// skl: log of the floored distribution.
    log_floored: Vec<f64>,
    /// skl: `sum p log p` per frame.
    neg_entropy: Vec<f64>,
}

impl PreparedFrames {
    pub fn new(frames: &Tensor, dist: Distance) -> Result<Self> {
        let dim = frames.cols();
        let mut primary = Vec::with_capacity(frames.len());
        let mut log_floored = Vec::new();
        let mut neg_entropy = Vec::new();
        for (r, row) in frames.row_iter().enumerate() {
            match dist {
                Distance::Skl => {
                    check_simplex(row, &format!("frame {r}"))?;
                    primary.extend_from_slice(row);
                    log_floored.extend(floor_distribution(row).iter().map(|v| v.ln()));
                    neg_entropy.push(row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum());
                }
                Distance::Cosine => {
                    let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        return Err(Error::contract(format!("frame {r} is a zero vector")));
                    }
                    primary.extend(row.iter().map(|x| x / norm));
                }
            }
        }
        Ok(PreparedFrames {
            dist,
            dim,
            primary,
            log_floored,
            neg_entropy,
        })
    }

    pub fn len(&self) -> usize {
        self.primary.len() / self.dim.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.primary.is_empty()
    }

    pub fn distance(&self) -> Distance {
        self.dist
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.primary[i * self.dim..(i + 1) * self.dim]
    }

    /// Distance between frame `i` of `self` and frame `j` of `other`.
    pub fn between(&self, i: usize, other: &PreparedFrames, j: usize) -> f64 {
        let (p, q) = (self.row(i), other.row(j));
        match self.dist {
            Distance::Cosine => {
                let dot: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
                (1.0 - dot).clamp(0.0, 2.0)
            }
            Distance::Skl => {
                let lq = &other.log_floored[j * self.dim..(j + 1) * self.dim];
                let lp = &self.log_floored[i * self.dim..(i + 1) * self.dim];
                let pq: f64 = p.iter().zip(lq).map(|(a, b)| a * b).sum();
                let qp: f64 = q.iter().zip(lp).map(|(a, b)| a * b).sum();
                (self.neg_entropy[i] - pq).max(0.0) + (other.neg_entropy[j] - qp).max(0.0)
            }
        }
    }
}
