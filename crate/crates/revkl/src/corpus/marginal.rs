//! Start-pair distribution of the trigram chain.
//!
//! Sentences are sampled from the stationary regime of the second-order
//! chain, so the distribution of the first two words is the stationary
//! distribution `pi(i, j)` of the pair process `(w_{t-1}, w_t)`. It is
//! computed once per world seed by power iteration and cached to disk as a
//! flat little-endian f64 array of length V^2 behind a one-line JSON header.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::world::TrigramWorld;
use crate::error::{Error, Result};

const RESIDUAL_TOL: f64 = 1e-13;
const MAX_ITERS: usize = 400;

/// Stationary distribution over ordered word pairs, row-major: index
/// `(i-1) * V + (j-1)` holds `pi(w_{t-1} = i, w_t = j)`.
#[derive(Debug, Clone)]
pub struct StartMarginal {
    vocab_size: usize,
    pair: Vec<f64>,
    /// Marginal over the first word of a pair: `P(i) = sum_j pi(i, j)`.
    first: Vec<f64>,
}

impl StartMarginal {
    /// Power-iterate the pair chain `(i, j) -> (j, k)` with kernel
    /// `p(k | i, j)` until the L1 residual drops below 1e-13. The iteration
    /// is seeded with the joint trigram marginal `sum_k w(i, j, k)`, which is
    /// already close to stationary. Output rows are accumulated in fixed
    /// `i` order per `j`, so the result is independent of the worker count.
    pub fn build(world: &TrigramWorld) -> Self {
        let v = world.vocab_size();
        let mut mu = joint_trigram_marginal(world);
        let mut iterations = 0usize;
        loop {
            let next = step(world, &mu);
            let resid: f64 = mu
                .iter()
                .zip(next.iter())
                .map(|(a, b)| (a - b).abs())
                .sum();
            mu = next;
            iterations += 1;
            if resid < RESIDUAL_TOL || iterations >= MAX_ITERS {
                break;
            }
        }
        let first = row_sums(&mu, v);
        StartMarginal {
            vocab_size: v,
            pair: mu,
            first,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// `pi(i, j)` for a 1-based word pair.
    pub fn pair_prob(&self, i: u32, j: u32) -> f64 {
        self.pair[(i as usize - 1) * self.vocab_size + (j as usize - 1)]
    }

    pub fn pair_flat(&self) -> &[f64] {
        &self.pair
    }

    /// `P(w1 = i)`, the stationary single-word marginal.
    pub fn first_word_prob(&self, i: u32) -> f64 {
        self.first[i as usize - 1]
    }

    pub fn first_word_row(&self) -> &[f64] {
        &self.first
    }

    /// `P(w2 = . | w1 = i)` over j = 1..=V.
    pub fn second_word_row(&self, i: u32) -> Vec<f64> {
        let v = self.vocab_size;
        let base = (i as usize - 1) * v;
        let denom = self.first[i as usize - 1];
        self.pair[base..base + v].iter().map(|p| p / denom).collect()
    }

    pub fn save(&self, path: &Path, world: &TrigramWorld) -> Result<()> {
        let header = MarginalHeader {
            format: FORMAT_TAG.to_string(),
            seed: world.seed(),
            gamma: world.gamma(),
            vocab_size: self.vocab_size,
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        for value in &self.pair {
            w.write_all(&value.to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path, world: &TrigramWorld) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let header: MarginalHeader = read_json_line(&mut r, path)?;
        if header.format != FORMAT_TAG {
            return Err(Error::Format {
                path: path.into(),
                reason: format!("unexpected format tag {:?}", header.format),
            });
        }
        if header.seed != world.seed()
            || header.vocab_size != world.vocab_size()
            || header.gamma != world.gamma()
        {
            return Err(Error::Format {
                path: path.into(),
                reason: format!(
                    "cache is for seed={} V={} gamma={}, world has seed={} V={} gamma={}",
                    header.seed,
                    header.vocab_size,
                    header.gamma,
                    world.seed(),
                    world.vocab_size(),
                    world.gamma()
                ),
            });
        }
        let v = header.vocab_size;
        let mut bytes = vec![0u8; v * v * 8];
        r.read_exact(&mut bytes).map_err(|e| Error::io(path, e))?;
        let pair: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let first = row_sums(&pair, v);
        Ok(StartMarginal {
            vocab_size: v,
            pair,
            first,
        })
    }

    /// Load the cache if present and valid for this world, else build and save.
    pub fn load_or_build(path: &Path, world: &TrigramWorld) -> Result<Self> {
        if path.exists() {
            if let Ok(m) = Self::load(path, world) {
                return Ok(m);
            }
        }
        let marginal = Self::build(world);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        marginal.save(path, world)?;
        Ok(marginal)
    }
}

const FORMAT_TAG: &str = "revkl.start-marginal.v1";

#[derive(Serialize, Deserialize)]
struct MarginalHeader {
    format: String,
    seed: u64,
    gamma: f64,
    vocab_size: usize,
}

pub(crate) fn read_json_line<T: serde::de::DeserializeOwned>(
    r: &mut impl Read,
    path: &Path,
) -> Result<T> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte).map_err(|e| Error::io(path, e))?;
        if n == 0 || byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 1 << 20 {
            return Err(Error::Format {
                path: path.into(),
                reason: "header line exceeds 1 MiB".into(),
            });
        }
    }
    serde_json::from_slice(&line).map_err(Error::from)
}

/// Joint trigram marginal `P(i, j) proportional to sum_k w(i, j, k)`; the seed
/// distribution for the power iteration.
fn joint_trigram_marginal(world: &TrigramWorld) -> Vec<f64> {
    let v = world.vocab_size();
    let mut mu: Vec<f64> = (1..=v as u32)
        .into_par_iter()
        .flat_map_iter(|i| {
            (1..=v as u32)
                .map(move |j| (i, j))
                .collect::<Vec<_>>()
                .into_iter()
        })
        .map(|(i, j)| world.raw_row(i, j).iter().sum::<f64>())
        .collect();
    normalize(&mut mu);
    mu
}

/// One transition of the pair chain: `mu'(j, k) = sum_i mu(i, j) p(k | i, j)`.
fn step(world: &TrigramWorld, mu: &[f64]) -> Vec<f64> {
    let v = world.vocab_size();
    let mut next: Vec<f64> = (1..=v as u32)
        .into_par_iter()
        .flat_map(|j| {
            let mut out_row = vec![0.0f64; v];
            for i in 1..=v as u32 {
                let mass = mu[(i as usize - 1) * v + (j as usize - 1)];
                if mass == 0.0 {
                    continue;
                }
                let raw = world.raw_row(i, j);
                let total: f64 = raw.iter().sum();
                let scale = mass / total;
                for (slot, w) in out_row.iter_mut().zip(raw.iter()) {
                    *slot += scale * w;
                }
            }
            out_row
        })
        .collect();
    normalize(&mut next);
    next
}

fn normalize(values: &mut [f64]) {
    let total: f64 = values.iter().sum();
    for v in values.iter_mut() {
        *v /= total;
    }
}

fn row_sums(pair: &[f64], v: usize) -> Vec<f64> {
    pair.chunks_exact(v).map(|row| row.iter().sum()).collect()
}
