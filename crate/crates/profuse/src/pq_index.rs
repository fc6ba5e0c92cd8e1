//! Product-quantization codebooks, encoding, and ADC shortlist search over
//! per-Gaussian descriptors.
//!
//! Queries stay full precision; stored vectors are per-subspace centroid
//! indices. The ADC score of a database row equals the dot product of the
//! query with the row's decoded (pre-renormalization) reconstruction.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::container_io::{read_records, write_records, Tensor};
use crate::error::{Error, Result};
use crate::scene_model::normalize_f32;

/// Trained per-subspace codebooks.
#[derive(Debug, Clone)]
pub struct PQCodebook {
    /// Subvector count; D must be divisible by it.
    pub m: usize,
    /// Centroids per subspace (256 for 8-bit codes, fewer for tiny
    /// training sets).
    pub k: usize,
    /// Subvector dimension D / m.
    pub dsub: usize,
    /// Row-major m x k x dsub.
    pub centroids: Vec<f32>,
}

impl PQCodebook {
    pub fn dim(&self) -> usize {
        self.m * self.dsub
    }

    #[inline]
    pub fn centroid(&self, sub: usize, code: usize) -> &[f32] {
        let base = (sub * self.k + code) * self.dsub;
        &self.centroids[base..base + self.dsub]
    }
}

/// Encoded database: one centroid index per (row, subspace).
#[derive(Debug, Clone)]
pub struct PQCodes {
    pub n: usize,
    pub m: usize,
    pub codes: Vec<u8>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Seeded k-means++ initialization over the subspace rows.
fn kmeanspp_init(rows: &[&[f32]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let n = rows.len();
    let mut centroids: Vec<Vec<f32>> = Vec::with_capacity(k);
    centroids.push(rows[rng.gen_range(0..n)].to_vec());
    let mut d2: Vec<f64> = rows.iter().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut target = rng.gen::<f64>() * total;
            let mut pick = n - 1;
            for (i, &v) in d2.iter().enumerate() {
                target -= v;
                if target <= 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        };
        centroids.push(rows[next].to_vec());
        let c = centroids.last().unwrap();
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(r, c));
        }
    }
    centroids
}

fn lloyd(rows: &[&[f32]], k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    let n = rows.len();
    let dsub = rows[0].len();
    let mut centroids = kmeanspp_init(rows, k, rng);
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        // Assignment, ties to the lowest centroid index.
        for (i, r) in rows.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(r, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assign[i] = best;
        }
        // Update.
        let mut sums = vec![vec![0f64; dsub]; k];
        let mut counts = vec![0usize; k];
        for (i, r) in rows.iter().enumerate() {
            counts[assign[i]] += 1;
            for (s, &v) in sums[assign[i]].iter_mut().zip(*r) {
                *s += v as f64;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (dst, &s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *dst = (s / counts[c] as f64) as f32;
                }
            }
        }
        // Empty-cluster repair: take the row farthest from its centroid
        // inside the largest cluster.
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let largest = (0..k).max_by_key(|&i| counts[i]).unwrap();
            let victim = (0..n)
                .filter(|&i| assign[i] == largest)
                .max_by(|&a, &b| {
                    sq_dist(rows[a], &centroids[largest])
                        .partial_cmp(&sq_dist(rows[b], &centroids[largest]))
                        .unwrap()
                        .then(a.cmp(&b))
                });
            if let Some(v) = victim {
                centroids[c] = rows[v].to_vec();
                counts[largest] -= 1;
                counts[c] += 1;
                assign[v] = c;
            }
        }
    }
    centroids
}

/// Train per-subspace codebooks with seeded k-means. When the training set
/// has fewer than 256 rows the centroid count is reduced to N.
pub fn train(descriptors: &[f32], n: usize, d: usize, m: usize, iters: usize, seed: u64) -> Result<PQCodebook> {
    if m == 0 || d % m != 0 {
        return Err(Error::Config(format!(
            "descriptor dim {d} not divisible by subvector count {m}"
        )));
    }
    if n == 0 {
        return Err(Error::Config("cannot train PQ on an empty database".into()));
    }
    let dsub = d / m;
    let k = n.min(256);
    let per_sub: Vec<Vec<Vec<f32>>> = (0..m)
        .into_par_iter()
        .map(|sub| {
            let rows: Vec<&[f32]> = (0..n)
                .map(|row| &descriptors[row * d + sub * dsub..row * d + (sub + 1) * dsub])
                .collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (sub as u64).wrapping_mul(0x9E37_79B9));
            lloyd(&rows, k, iters, &mut rng)
        })
        .collect();
    let mut centroids = Vec::with_capacity(m * k * dsub);
    for sub in per_sub {
        for c in sub {
            centroids.extend(c);
        }
    }
    Ok(PQCodebook {
        m,
        k,
        dsub,
        centroids,
    })
}

/// Nearest centroid per subspace.
pub fn encode(codebook: &PQCodebook, descriptors: &[f32], n: usize) -> PQCodes {
    let d = codebook.dim();
    let (m, dsub) = (codebook.m, codebook.dsub);
    let codes: Vec<u8> = (0..n)
        .into_par_iter()
        .flat_map_iter(|row| {
            (0..m).map(move |sub| {
                let v = &descriptors[row * d + sub * dsub..row * d + (sub + 1) * dsub];
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for code in 0..codebook.k {
                    let dist = sq_dist(v, codebook.centroid(sub, code));
                    if dist < best_d {
                        best_d = dist;
                        best = code;
                    }
                }
                best as u8
            })
        })
        .collect();
    PQCodes { n, m, codes }
}

/// Concatenated-centroid reconstruction, before renormalization.
pub fn decode_raw(codebook: &PQCodebook, codes: &PQCodes, row: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(codebook.dim());
    for sub in 0..codebook.m {
        out.extend_from_slice(codebook.centroid(sub, codes.codes[row * codes.m + sub] as usize));
    }
    out
}

/// Decode every row and L2-renormalize (zero rows stay zero).
pub fn decode(codebook: &PQCodebook, codes: &PQCodes) -> Vec<f32> {
    let d = codebook.dim();
    let mut out = Vec::with_capacity(codes.n * d);
    for row in 0..codes.n {
        let mut v = decode_raw(codebook, codes, row);
        normalize_f32(&mut v);
        out.extend(v);
    }
    out
}

/// ADC lookup table: per-subspace dot products of the query with every
/// centroid.
pub fn adc_table(codebook: &PQCodebook, query: &[f32]) -> Vec<f64> {
    let mut table = vec![0f64; codebook.m * codebook.k];
    for sub in 0..codebook.m {
        let q = &query[sub * codebook.dsub..(sub + 1) * codebook.dsub];
        for code in 0..codebook.k {
            table[sub * codebook.k + code] = q
                .iter()
                .zip(codebook.centroid(sub, code))
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
        }
    }
    table
}

/// ADC score of a stored row: equals `dot(query, decode_raw(row))`.
pub fn adc_score(codebook: &PQCodebook, codes: &PQCodes, table: &[f64], row: usize) -> f64 {
    (0..codebook.m)
        .map(|sub| table[sub * codebook.k + codes.codes[row * codes.m + sub] as usize])
        .sum()
}

/// Top `shortlist_size` rows by approximate cosine, ties broken by index.
pub fn search(
    codebook: &PQCodebook,
    codes: &PQCodes,
    query: &[f32],
    shortlist_size: usize,
) -> Vec<(u32, f64)> {
    let table = adc_table(codebook, query);
    let mut scored: Vec<(u32, f64)> = (0..codes.n)
        .map(|row| (row as u32, adc_score(codebook, codes, &table, row)))
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(shortlist_size);
    scored
}

// ---------------------------------------------------------------------------
// Index file

pub fn write_index(path: &Path, codebook: &PQCodebook, codes: &PQCodes) -> Result<()> {
    let records = vec![
        (
            "meta",
            Tensor::u16(
                vec![3],
                vec![codebook.m as u16, codebook.k as u16, codebook.dsub as u16],
            ),
        ),
        (
            "centroids",
            Tensor::f32(
                vec![codebook.m as u64, codebook.k as u64, codebook.dsub as u64],
                codebook.centroids.clone(),
            ),
        ),
        (
            "codes",
            Tensor::u8(vec![codes.n as u64, codes.m as u64], codes.codes.clone()),
        ),
    ];
    write_records(path, &records)
}

pub fn read_index(path: &Path) -> Result<(PQCodebook, PQCodes)> {
    let records = read_records(path)?;
    let get = |name: &str| -> Result<&Tensor> {
        records
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Manifest(format!("record '{name}' missing from {}", path.display())))
    };
    let meta = get("meta")?.as_u16()?;
    let codebook = PQCodebook {
        m: meta[0] as usize,
        k: meta[1] as usize,
        dsub: meta[2] as usize,
        centroids: get("centroids")?.as_f32()?.to_vec(),
    };
    let codes_t = get("codes")?;
    let codes = PQCodes {
        n: codes_t.shape[0] as usize,
        m: codes_t.shape[1] as usize,
        codes: codes_t.as_u8()?.to_vec(),
    };
    Ok((codebook, codes))
}
