//! Randomized invariant suite behind the `check` command: the set-partition
//! guarantees, mask-slot irrelevance, and batched-versus-naive attention
//! equivalence. On failure the error carries the minimal witness needed to
//! reproduce it.
//!
//! A mutation hook swaps in a deliberately broken floating-point rank
//! computation so the suite itself can be shown to catch defects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{masked_mhsa, naive, transformer_layer, AttentionParams};
use crate::error::{Error, Result};
use crate::set_partition::{count_sets, set_indices};
use crate::tensor::FeatureTensor;

/// Deliberate defects for exercising the checker.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// Compute set ranks through f32 division instead of exact integers.
    FloatFloor,
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Randomized (N, tau) pairs for the partition theorems.
    pub iters: usize,
    /// Randomized attention instances per numeric check.
    pub trials: usize,
    pub seed: u64,
    pub max_n: usize,
    pub max_tau: usize,
    pub mutation: Option<Mutation>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            iters: 10_000,
            trials: 50,
            seed: 0,
            max_n: 4096,
            max_tau: 512,
            mutation: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CheckSummary {
    pub partition_pairs: usize,
    pub mask_trials: usize,
    pub oracle_trials: usize,
}

/// Validate the three set-partition guarantees on one rank table.
///
/// Checks row monotonicity, per-set unique counts in
/// `{floor(n/s), floor(n/s)+1}`, disjointness of distinct sets' unique
/// ranks, and full coverage of `[0, n)`.
pub fn verify_partition_theorems(
    n: usize,
    tau: usize,
    s: usize,
    q: &[u32],
    mask: &[bool],
) -> std::result::Result<(), String> {
    if q.len() != s * tau || mask.len() != s * tau {
        return Err(format!("table is {} entries, expected {}", q.len(), s * tau));
    }
    let mut seen = vec![false; n];
    let lo = n / s;
    for j in 0..s {
        let row = &q[j * tau..(j + 1) * tau];
        let mrow = &mask[j * tau..(j + 1) * tau];
        let mut unique = 0usize;
        for k in 0..tau {
            let v = row[k] as usize;
            if v >= n {
                return Err(format!("set {j} slot {k} rank {v} out of range [0, {n})"));
            }
            if k > 0 && row[k] < row[k - 1] {
                return Err(format!("set {j} is not monotone at slot {k}"));
            }
            let first = k == 0 || row[k] != row[k - 1];
            if first != mrow[k] {
                return Err(format!("set {j} slot {k}: mask disagrees with duplication"));
            }
            if first {
                unique += 1;
                if seen[v] {
                    return Err(format!("rank {v} appears in two sets (overlap at set {j})"));
                }
                seen[v] = true;
            }
        }
        if unique < lo || unique > lo + 1 {
            return Err(format!(
                "set {j} holds {unique} unique ranks, expected {lo} or {}",
                lo + 1
            ));
        }
    }
    if let Some(missing) = seen.iter().position(|s| !*s) {
        return Err(format!("rank {missing} is covered by no set"));
    }
    Ok(())
}

/// The intentionally broken rank table: the ratio and product round through
/// f32, so near-integer boundaries floor to the wrong rank.
fn set_indices_float(n: usize, tau: usize, s: usize) -> (Vec<u32>, Vec<bool>) {
    let denom = (s * tau) as f32;
    let mut q = Vec::with_capacity(s * tau);
    let mut mask = Vec::with_capacity(s * tau);
    for j in 0..s {
        for k in 0..tau {
            let rank = ((j * tau + k) as f32 / denom * n as f32).floor() as u32;
            mask.push(k == 0 || q.last() != Some(&rank));
            q.push(rank);
        }
    }
    (q, mask)
}

fn check_partitions(opts: &CheckOptions) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.iters {
        let n = rng.random_range(1..=opts.max_n);
        let tau = rng.random_range(1..=opts.max_tau);
        let s = count_sets(n, tau);
        let (q, mask) = match opts.mutation {
            Some(Mutation::FloatFloor) => set_indices_float(n, tau, s),
            None => set_indices(n, tau, s),
        };
        verify_partition_theorems(n, tau, s, &q, &mask).map_err(|what| {
            Error::Invariant(format!(
                "set partition: {what} (witness N={n}, tau={tau}, seed={})",
                opts.seed
            ))
        })?;
    }
    Ok(opts.iters)
}

fn random_instance(
    rng: &mut ChaCha8Rng,
    trial: u64,
) -> (FeatureTensor, Vec<bool>, AttentionParams, usize, usize) {
    let tau = rng.random_range(1..=16);
    let heads = [1usize, 2, 4][rng.random_range(0..3)];
    let c = heads * rng.random_range(2..=6);
    let batch = rng.random_range(1..=3);
    let params = AttentionParams::seeded(c, heads, 2 * c, trial);
    let data = (0..batch * tau * c)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let x = FeatureTensor::from_vec(&[batch, tau, c], data).expect("instance shape");
    let mut mask = vec![false; batch * tau];
    for b in 0..batch {
        mask[b * tau] = true;
        for t in 1..tau {
            mask[b * tau + t] = rng.random_bool(0.6);
        }
    }
    (x, mask, params, batch, tau)
}

fn check_mask_irrelevance(opts: &CheckOptions) -> Result<usize> {
    let seed = opts.seed.wrapping_add(0x6d61_736b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..opts.trials {
        let (x, mask, params, batch, tau) = random_instance(&mut rng, trial as u64);
        let base = transformer_layer(&x, &mask, None, &params)?;
        let mut poisoned = x.clone();
        for b in 0..batch {
            for t in 0..tau {
                if !mask[b * tau + t] {
                    for v in poisoned.row3_mut(b, t) {
                        *v = rng.random_range(-50.0..50.0);
                    }
                }
            }
        }
        let out = transformer_layer(&poisoned, &mask, None, &params)?;
        for b in 0..batch {
            for t in 0..tau {
                if mask[b * tau + t] {
                    for (ya, yb) in base.row3(b, t).iter().zip(out.row3(b, t)) {
                        if (ya - yb).abs() > 1e-6 {
                            return Err(Error::Invariant(format!(
                                "mask-slot irrelevance: output ({b},{t}) moved by {} \
                                 (witness trial={trial}, seed={seed})",
                                (ya - yb).abs()
                            )));
                        }
                    }
                }
            }
        }
    }
    Ok(opts.trials)
}

fn check_oracle(opts: &CheckOptions) -> Result<usize> {
    let seed = opts.seed.wrapping_add(0x6f72_616b);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for trial in 0..opts.trials {
        let (x, mask, params, batch, tau) = random_instance(&mut rng, 1000 + trial as u64);
        let c = params.channels;
        let got = masked_mhsa(&x, &mask, &params)?;
        for b in 0..batch {
            let row = &x.data()[b * tau * c..(b + 1) * tau * c];
            let expect = naive::mhsa(row, tau, &mask[b * tau..(b + 1) * tau], &params);
            let out = &got.data()[b * tau * c..(b + 1) * tau * c];
            for (ya, yb) in out.iter().zip(&expect) {
                if (ya - yb).abs() > 1e-5 {
                    return Err(Error::Invariant(format!(
                        "batched/naive attention mismatch of {} \
                         (witness trial={trial}, tau={tau}, C={c}, heads={}, seed={seed})",
                        (ya - yb).abs(),
                        params.heads
                    )));
                }
            }
        }
    }
    Ok(opts.trials)
}

/// Run the full suite; the first violation aborts with its witness.
pub fn run_check(opts: &CheckOptions) -> Result<CheckSummary> {
    let partition_pairs = check_partitions(opts)?;
    let mask_trials = check_mask_irrelevance(opts)?;
    let oracle_trials = check_oracle(opts)?;
    Ok(CheckSummary {
        partition_pairs,
        mask_trials,
        oracle_trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes() {
        let opts = CheckOptions {
            iters: 2000,
            trials: 10,
            ..CheckOptions::default()
        };
        let summary = run_check(&opts).unwrap();
        assert_eq!(summary.partition_pairs, 2000);
    }

    #[test]
    fn float_floor_mutation_is_caught_with_witness() {
        let opts = CheckOptions {
            iters: 5000,
            trials: 0,
            mutation: Some(Mutation::FloatFloor),
            ..CheckOptions::default()
        };
        let err = run_check(&opts).unwrap_err().to_string();
        assert!(err.contains("witness N="), "error was: {err}");
        assert!(err.contains("tau="), "error was: {err}");
    }

    #[test]
    fn theorem_checker_rejects_tampered_tables() {
        let n = 10;
        let tau = 4;
        let s = count_sets(n, tau);
        let (q, mask) = set_indices(n, tau, s);
        assert!(verify_partition_theorems(n, tau, s, &q, &mask).is_ok());

        // Overlap: first slot of set 1 duplicated into set 0's range.
        let mut bad = q.clone();
        bad[4] = 2;
        assert!(verify_partition_theorems(n, tau, s, &bad, &mask).is_err());

        // Hole: drop rank 9.
        let mut bad = q.clone();
        bad[11] = 8;
        let mut bm = mask.clone();
        bm[11] = false;
        assert!(verify_partition_theorems(n, tau, s, &bad, &bm).is_err());
    }
}
