//! Planted-cluster paired datasets.
//!
//! Each item belongs to a cluster with a latent center. The pair shares one
//! latent vector (center plus shared jitter), which is pushed through a
//! separate random linear map per modality and then perturbed by independent
//! feature noise. Labels are cluster ids.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{DenseMatrix, LabelSet, PairedDataset};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SynthParams {
    pub clusters: usize,
    pub latent_dim: usize,
    pub num_pairs: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    /// Standard deviation of the shared latent jitter and of the per-modality
    /// feature noise, relative to unit-variance cluster centers.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            clusters: 10,
            latent_dim: 16,
            num_pairs: 2000,
            dim_a: 128,
            dim_b: 64,
            noise: 0.7,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub dataset: PairedDataset,
    /// `latent_dim × N` shared generators.
    pub latent: DenseMatrix,
    pub centers: DenseMatrix,
    pub map_a: DenseMatrix,
    pub map_b: DenseMatrix,
    pub cluster: Vec<u32>,
}

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn synthesize(p: &SynthParams) -> Result<SynthDataset> {
    if p.clusters == 0 || p.latent_dim == 0 || p.num_pairs == 0 || p.dim_a == 0 || p.dim_b == 0 {
        return Err(Error::Config("synthetic dataset parameters must be positive".into()));
    }
    if !(p.noise >= 0.0) || !p.noise.is_finite() {
        return Err(Error::Config(format!("noise {} must be finite and ≥ 0", p.noise)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let centers = gaussian(&mut rng, p.latent_dim, p.clusters, 1.0);
    let map_a = gaussian(&mut rng, p.dim_a, p.latent_dim, 1.0 / (p.latent_dim as f64).sqrt());
    let map_b = gaussian(&mut rng, p.dim_b, p.latent_dim, 1.0 / (p.latent_dim as f64).sqrt());

    // balanced cluster sizes in random order
    let mut cluster: Vec<u32> = (0..p.num_pairs).map(|n| (n % p.clusters) as u32).collect();
    cluster.shuffle(&mut rng);

    let mut latent = DenseMatrix::zeros(p.latent_dim, p.num_pairs);
    for (n, &c) in cluster.iter().enumerate() {
        latent.set_column(n, &centers.column(c as usize));
    }
    if p.noise > 0.0 {
        latent += gaussian(&mut rng, p.latent_dim, p.num_pairs, p.noise);
    }
    let mut a = &map_a * &latent;
    let mut b = &map_b * &latent;
    if p.noise > 0.0 {
        a += gaussian(&mut rng, p.dim_a, p.num_pairs, p.noise);
        b += gaussian(&mut rng, p.dim_b, p.num_pairs, p.noise);
    }
    let labels = cluster.iter().map(|&c| LabelSet::single(c)).collect();
    Ok(SynthDataset {
        dataset: PairedDataset::new(a, b, Some(labels))?,
        latent,
        centers,
        map_a,
        map_b,
        cluster,
    })
}

/// Seeded split of `0..n` into (database, queries) with `num_queries` queries.
pub fn split_queries(n: usize, num_queries: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if num_queries >= n {
        return Err(Error::Config(format!(
            "cannot hold out {num_queries} queries from {n} items"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut queries = idx[..num_queries].to_vec();
    let mut database = idx[num_queries..].to_vec();
    queries.sort_unstable();
    database.sort_unstable();
    Ok((database, queries))
}
