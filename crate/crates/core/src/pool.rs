//! Gaussian-mixture prompt pools and top-k prompt retrieval.
//!
//! Each functional part (tip / wrist / shaft) gets its own pool: one
//! isotropic Gaussian component per attribute sentence, mean fixed to the
//! sentence embedding, uniform mixing weights, and a variance fitted from
//! the frame features associated with that attribute. Incoming frame
//! features are scored in log space and the k most likely component means
//! per pool become prefix rows for the backbone's attention.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::knowledge::{EmbeddingTable, Part};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Variance floor keeping every component's density proper.
pub const VAR_FLOOR: f64 = 1e-6;

/// One isotropic Gaussian component anchored to an attribute sentence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub attr_id: String,
    /// Mixing weight, uniform `1/J` after init.
    pub pi: f64,
    /// Isotropic variance, floored at [`VAR_FLOOR`].
    pub var: f64,
    pub mu: Vec<f64>,
}

/// The mixture over one part's attribute prompts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptPool {
    pub part: Part,
    components: Vec<GaussianComponent>,
}

/// One retrieved prompt: component index, its weighted log-likelihood, and
/// the prompt vector (the component mean).
#[derive(Debug, Clone)]
pub struct RetrievedPrompt {
    pub index: usize,
    pub log_likelihood: f64,
    pub mu: Vec<f64>,
}

/// Per-part retrieval results in fixed order tip, wrist, shaft.
#[derive(Debug, Clone)]
pub struct RetrievalResult {
    pub per_part: [Vec<RetrievedPrompt>; 3],
}

impl RetrievalResult {
    /// Total number of selected prompt rows.
    pub fn num_rows(&self) -> usize {
        self.per_part.iter().map(|p| p.len()).sum()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl PromptPool {
    /// Build a pool from `(attr_id, embedding)` records: `pi = 1/J`, means
    /// copied from the embeddings, variance left at the 1.0 placeholder.
    pub fn init(part: Part, records: &[(String, Vec<f64>)]) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Config(format!("empty embedding subset for {part}")));
        }
        let dim = records[0].1.len();
        let j = records.len() as f64;
        let components = records
            .iter()
            .map(|(id, v)| {
                if v.len() != dim {
                    return Err(Error::Shape(format!(
                        "embedding '{id}' has dim {}, pool wants {dim}",
                        v.len()
                    )));
                }
                Ok(GaussianComponent {
                    attr_id: id.clone(),
                    pi: 1.0 / j,
                    var: 1.0,
                    mu: v.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { part, components })
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].mu.len()
    }

    fn validate_mixing(&self) -> Result<()> {
        let total: f64 = self.components.iter().map(|c| c.pi).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "{} pool mixing weights sum to {total}, expected 1",
                self.part
            )));
        }
        Ok(())
    }

    /// Refit each component's isotropic variance from its associated feature
    /// vectors: `var_j = max(floor, mean squared distance / dim)`.
    /// Components with no associated features keep the 1.0 placeholder.
    pub fn fit_covariance(
        &mut self,
        attr_to_features: &HashMap<String, Vec<Vec<f64>>>,
    ) -> Result<()> {
        let dim = self.dim();
        for comp in &mut self.components {
            let Some(features) = attr_to_features.get(&comp.attr_id) else {
                continue;
            };
            if features.is_empty() {
                continue;
            }
            let mut total = 0.0;
            for x in features {
                if x.len() != dim {
                    return Err(Error::Shape(format!(
                        "feature dim {} vs pool dim {dim} for '{}'",
                        x.len(),
                        comp.attr_id
                    )));
                }
                total += sq_dist(x, &comp.mu);
            }
            comp.var = (total / (features.len() as f64 * dim as f64)).max(VAR_FLOOR);
        }
        Ok(())
    }

    /// Weighted per-component log terms and the total mixture log-density:
    /// `term_j = log pi_j - dim/2 log(2 pi var_j) - |x - mu_j|^2 / (2 var_j)`,
    /// total is their logsumexp.
    pub fn log_density(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let dim = self.dim();
        if x.len() != dim {
            return Err(Error::Shape(format!(
                "feature dim {} vs pool dim {dim}",
                x.len()
            )));
        }
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| {
                let var = c.var.max(VAR_FLOOR);
                c.pi.ln()
                    - 0.5 * dim as f64 * (2.0 * std::f64::consts::PI * var).ln()
                    - sq_dist(x, &c.mu) / (2.0 * var)
            })
            .collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
        Ok((terms, total))
    }

    /// Indices of the `min(k, J)` largest weighted log terms, descending,
    /// ties broken by ascending component index.
    pub fn select_top_k(&self, x: &[f64], k: usize) -> Result<Vec<RetrievedPrompt>> {
        let (terms, _) = self.log_density(x)?;
        let mut order: Vec<usize> = (0..terms.len()).collect();
        order.sort_by(|&a, &b| {
            terms[b]
                .partial_cmp(&terms[a])
                .expect("log terms are finite")
                .then(a.cmp(&b))
        });
        Ok(order
            .into_iter()
            .take(k)
            .map(|i| RetrievedPrompt {
                index: i,
                log_likelihood: terms[i],
                mu: self.components[i].mu.clone(),
            })
            .collect())
    }
}

/// Assign every frame feature to its nearest component mean; the resulting
/// per-attribute feature sets drive [`PromptPool::fit_covariance`].
pub fn associate_by_nearest_mean(
    pool: &PromptPool,
    frames: &Tensor,
) -> Result<HashMap<String, Vec<Vec<f64>>>> {
    let dim = pool.dim();
    if frames.cols() != dim {
        return Err(Error::Shape(format!(
            "frames have dim {}, pool wants {dim}",
            frames.cols()
        )));
    }
    let mut map: HashMap<String, Vec<Vec<f64>>> = HashMap::new();
    for i in 0..frames.rows() {
        let x = frames.row(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (j, comp) in pool.components().iter().enumerate() {
            let d = sq_dist(x, &comp.mu);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        map.entry(pool.components()[best].attr_id.clone())
            .or_default()
            .push(x.to_vec());
    }
    Ok(map)
}

/// The three decoupled sub-pools.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolSet {
    pub tip: PromptPool,
    pub wrist: PromptPool,
    pub shaft: PromptPool,
}

impl PoolSet {
    /// One sub-pool per part, from the part-prefixed ids of the table.
    pub fn from_embeddings(table: &EmbeddingTable) -> Result<Self> {
        Ok(Self {
            tip: PromptPool::init(Part::Tip, &table.part_records(Part::Tip))?,
            wrist: PromptPool::init(Part::Wrist, &table.part_records(Part::Wrist))?,
            shaft: PromptPool::init(Part::Shaft, &table.part_records(Part::Shaft))?,
        })
    }

    pub fn pools(&self) -> [&PromptPool; 3] {
        [&self.tip, &self.wrist, &self.shaft]
    }

    pub fn dim(&self) -> usize {
        self.tip.dim()
    }

    fn validate(&self) -> Result<()> {
        for pool in self.pools() {
            pool.validate_mixing()?;
            if pool.dim() != self.dim() {
                return Err(Error::Shape("sub-pools disagree on dimension".into()));
            }
        }
        Ok(())
    }

    /// Fit every sub-pool's variances from the same frame features via
    /// nearest-mean association.
    pub fn fit_covariance_from_frames(&mut self, frames: &Tensor) -> Result<()> {
        for pool in [&mut self.tip, &mut self.wrist, &mut self.shaft] {
            let assoc = associate_by_nearest_mean(pool, frames)?;
            pool.fit_covariance(&assoc)?;
        }
        Ok(())
    }

    /// Top-k retrieval against each sub-pool, fixed order tip, wrist, shaft.
    pub fn retrieve(&self, x: &[f64], k: usize) -> Result<RetrievalResult> {
        Ok(RetrievalResult {
            per_part: [
                self.tip.select_top_k(x, k)?,
                self.wrist.select_top_k(x, k)?,
                self.shaft.select_top_k(x, k)?,
            ],
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let set: Self = serde_json::from_str(&text)?;
        set.validate()?;
        Ok(set)
    }
}

/// How retrieved prompts become prefix rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixMode {
    /// One shared prefix per video: each selected slot is averaged over frames.
    #[default]
    Video,
    /// Each frame attends to its own retrieved prompts.
    PerFrame,
}

/// Prefix rows ready for injection, either shared or per query row.
#[derive(Debug, Clone)]
pub enum PrefixRows {
    Shared(Tensor),
    PerFrame(Vec<Tensor>),
}

/// Retrieve prompts for every frame of `frames` and aggregate them into
/// prefix rows (`3k x dim` in video mode).
pub fn build_prefix_rows(
    pools: &PoolSet,
    frames: &Tensor,
    k: usize,
    mode: PrefixMode,
) -> Result<Option<PrefixRows>> {
    if k == 0 {
        return Ok(None);
    }
    let dim = pools.dim();
    let retrievals: Vec<RetrievalResult> = (0..frames.rows())
        .map(|i| pools.retrieve(frames.row(i), k))
        .collect::<Result<Vec<_>>>()?;
    let slots = retrievals[0].num_rows();
    if slots == 0 {
        return Ok(None);
    }
    let frame_rows = |r: &RetrievalResult| -> Tensor {
        let mut rows = Tensor::zeros(&[slots, dim]);
        let mut slot = 0;
        for part in &r.per_part {
            for prompt in part {
                rows.row_mut(slot).copy_from_slice(&prompt.mu);
                slot += 1;
            }
        }
        rows
    };
    match mode {
        PrefixMode::Video => {
            let mut mean = Tensor::zeros(&[slots, dim]);
            for r in &retrievals {
                mean.add_assign(&frame_rows(r))?;
            }
            Ok(Some(PrefixRows::Shared(
                mean.scaled(1.0 / retrievals.len() as f64),
            )))
        }
        PrefixMode::PerFrame => Ok(Some(PrefixRows::PerFrame(
            retrievals.iter().map(frame_rows).collect(),
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{randn, rng_for};

    fn records(n: usize, dim: usize, seed: u64) -> Vec<(String, Vec<f64>)> {
        let mut rng = rng_for(seed, "pool-records");
        (0..n)
            .map(|i| {
                (
                    format!("tip:attr-{i}"),
                    randn(&[dim], &mut rng).into_data(),
                )
            })
            .collect()
    }

    #[test]
    fn init_sets_uniform_weights_and_copies_means() {
        let recs = records(5, 4, 1);
        let pool = PromptPool::init(Part::Tip, &recs).unwrap();
        assert_eq!(pool.len(), 5);
        for (comp, (id, v)) in pool.components().iter().zip(&recs) {
            assert!((comp.pi - 0.2).abs() < 1e-15);
            assert_eq!(comp.var, 1.0);
            assert_eq!(&comp.attr_id, id);
            for (a, b) in comp.mu.iter().zip(v) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let single = PromptPool::init(Part::Tip, &records(1, 4, 2)).unwrap();
        assert_eq!(single.components()[0].pi, 1.0);
        assert!(PromptPool::init(Part::Tip, &[]).is_err());
    }

    #[test]
    fn fit_covariance_floor_and_single_feature() {
        let recs = records(2, 4, 3);
        let mut pool = PromptPool::init(Part::Tip, &recs).unwrap();
        let mut assoc: HashMap<String, Vec<Vec<f64>>> = HashMap::new();
        // Component 0: features exactly at the mean -> floored variance.
        assoc.insert("tip:attr-0".into(), vec![recs[0].1.clone(); 3]);
        // Component 1: one feature at squared distance d2 -> var = d2 / dim.
        let mut shifted = recs[1].1.clone();
        shifted[0] += 2.0;
        assoc.insert("tip:attr-1".into(), vec![shifted]);
        pool.fit_covariance(&assoc).unwrap();
        assert_eq!(pool.components()[0].var, VAR_FLOOR);
        assert!((pool.components()[1].var - 4.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn fit_covariance_matches_mean_squared_distance_oracle() {
        let recs = records(3, 5, 4);
        let mut pool = PromptPool::init(Part::Tip, &recs).unwrap();
        let mut rng = rng_for(5, "fitcov");
        let mut assoc: HashMap<String, Vec<Vec<f64>>> = HashMap::new();
        for (id, _) in &recs {
            let feats: Vec<Vec<f64>> = (0..4).map(|_| randn(&[5], &mut rng).into_data()).collect();
            assoc.insert(id.clone(), feats);
        }
        pool.fit_covariance(&assoc).unwrap();
        for comp in pool.components() {
            let feats = &assoc[&comp.attr_id];
            let mut want = 0.0;
            for x in feats {
                let mut d = 0.0;
                for (a, b) in x.iter().zip(&comp.mu) {
                    d += (a - b) * (a - b);
                }
                want += d;
            }
            want /= (feats.len() * 5) as f64;
            assert!((comp.var - want.max(VAR_FLOOR)).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_covariance_keeps_placeholder_for_empty_sets() {
        let recs = records(2, 4, 6);
        let mut pool = PromptPool::init(Part::Tip, &recs).unwrap();
        pool.fit_covariance(&HashMap::new()).unwrap();
        assert!(pool.components().iter().all(|c| c.var == 1.0));
    }

    #[test]
    fn log_density_standard_normal_at_mean() {
        let pool = PromptPool::init(Part::Tip, &[("tip:a".into(), vec![0.7])]).unwrap();
        let (terms, total) = pool.log_density(&[0.7]).unwrap();
        // log(1) - 1/2 log(2 pi) at the mean of a 1-D standard normal.
        let want = -0.918_938_533_204_672_7;
        assert!((terms[0] - want).abs() < 1e-12);
        assert!((total - want).abs() < 1e-12);
    }

    #[test]
    fn log_density_matches_direct_mixture_oracle() {
        let mut pool = PromptPool::init(
            Part::Tip,
            &[
                ("tip:a".into(), vec![0.0, 1.0]),
                ("tip:b".into(), vec![2.0, -1.0]),
            ],
        )
        .unwrap();
        pool.components[0].var = 0.5;
        pool.components[1].var = 2.0;
        let x = [0.3, 0.4];
        let (_, total) = pool.log_density(&x).unwrap();
        // Direct density evaluation, no log-space tricks.
        let mut direct = 0.0;
        for c in pool.components() {
            let dim = 2.0;
            let d2: f64 = x.iter().zip(&c.mu).map(|(a, b)| (a - b) * (a - b)).sum();
            let norm = (2.0 * std::f64::consts::PI * c.var).powf(-dim / 2.0);
            direct += c.pi * norm * (-d2 / (2.0 * c.var)).exp();
        }
        assert!((total - direct.ln()).abs() < 1e-12);
    }

    #[test]
    fn density_integrates_to_one_in_1d() {
        let mut pool = PromptPool::init(
            Part::Tip,
            &[
                ("tip:a".into(), vec![-1.0]),
                ("tip:b".into(), vec![0.5]),
                ("tip:c".into(), vec![3.0]),
            ],
        )
        .unwrap();
        pool.components[0].var = 0.25;
        pool.components[1].var = 1.5;
        pool.components[2].var = 0.7;
        let lo = -1.0 - 10.0 * 0.25f64.sqrt().max(1.5f64.sqrt());
        let hi = 3.0 + 10.0 * 1.5f64.sqrt();
        let n = 100_000;
        let h = (hi - lo) / n as f64;
        let f = |x: f64| pool.log_density(&[x]).unwrap().1.exp();
        let mut integral = 0.5 * (f(lo) + f(hi));
        for i in 1..n {
            integral += f(lo + i as f64 * h);
        }
        integral *= h;
        assert!((integral - 1.0).abs() < 1e-3, "integral {integral}");
    }

    #[test]
    fn top_k_exhaustive_and_nearest_mean() {
        let recs = records(6, 3, 7);
        let pool = PromptPool::init(Part::Tip, &recs).unwrap();
        let x = recs[4].1.clone();
        // Equal pi and var: the component whose mean is x must rank first.
        let top = pool.select_top_k(&x, 1).unwrap();
        assert_eq!(top[0].index, 4);
        // k = J returns all indices sorted by likelihood.
        let all = pool.select_top_k(&x, 6).unwrap();
        assert_eq!(all.len(), 6);
        for w in all.windows(2) {
            assert!(w[0].log_likelihood >= w[1].log_likelihood);
        }
        // k > J truncates to J.
        assert_eq!(pool.select_top_k(&x, 99).unwrap().len(), 6);
        // k = 0 selects nothing.
        assert!(pool.select_top_k(&x, 0).unwrap().is_empty());
    }

    #[test]
    fn top_k_matches_brute_force_sort_oracle() {
        let mut rng = rng_for(8, "topk-oracle");
        for case in 0..25 {
            let j = 2 + (case % 14);
            let dim = 2 + (case % 7);
            let recs = records(j, dim, 1000 + case as u64);
            let mut pool = PromptPool::init(Part::Tip, &recs).unwrap();
            for (i, comp) in pool.components.iter_mut().enumerate() {
                comp.var = 0.2 + 0.3 * (i as f64 + 1.0);
            }
            let x = randn(&[dim], &mut rng).into_data();
            let k = 1 + (case % j);
            let got: Vec<usize> = pool
                .select_top_k(&x, k)
                .unwrap()
                .iter()
                .map(|p| p.index)
                .collect();
            // Oracle: sort every (term, index) pair, take k.
            let (terms, _) = pool.log_density(&x).unwrap();
            let mut pairs: Vec<(usize, f64)> = terms.iter().cloned().enumerate().collect();
            pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let want: Vec<usize> = pairs.into_iter().take(k).map(|(i, _)| i).collect();
            assert_eq!(got, want, "case {case}");
        }
    }

    #[test]
    fn ranking_invariant_under_common_pi_rescale() {
        let recs = records(5, 3, 9);
        let mut pool = PromptPool::init(Part::Tip, &recs).unwrap();
        for (i, comp) in pool.components.iter_mut().enumerate() {
            comp.pi = 0.1 * (i as f64 + 1.0);
        }
        let mut scaled = pool.clone();
        for comp in &mut scaled.components {
            comp.pi *= 7.3;
        }
        let mut rng = rng_for(10, "pi-rescale");
        for _ in 0..10 {
            let x = randn(&[3], &mut rng).into_data();
            let a: Vec<usize> = pool
                .select_top_k(&x, 5)
                .unwrap()
                .iter()
                .map(|p| p.index)
                .collect();
            let b: Vec<usize> = scaled
                .select_top_k(&x, 5)
                .unwrap()
                .iter()
                .map(|p| p.index)
                .collect();
            assert_eq!(a, b);
        }
    }

    fn toy_pool_set(dim: usize, seed: u64) -> PoolSet {
        let mut rng = rng_for(seed, "poolset");
        let mk = |part: Part, n: usize, rng: &mut rand_chacha::ChaCha8Rng| {
            let recs: Vec<(String, Vec<f64>)> = (0..n)
                .map(|i| (format!("{part}:a{i}"), randn(&[dim], rng).into_data()))
                .collect();
            PromptPool::init(part, &recs).unwrap()
        };
        PoolSet {
            tip: mk(Part::Tip, 4, &mut rng),
            wrist: mk(Part::Wrist, 3, &mut rng),
            shaft: mk(Part::Shaft, 5, &mut rng),
        }
    }

    #[test]
    fn retrieve_concatenates_three_independent_selections() {
        let pools = toy_pool_set(4, 11);
        let mut rng = rng_for(12, "retrieve");
        let x = randn(&[4], &mut rng).into_data();
        let all = pools.retrieve(&x, 2).unwrap();
        assert_eq!(all.num_rows(), 6);
        for (got, pool) in all.per_part.iter().zip(pools.pools()) {
            let solo = pool.select_top_k(&x, 2).unwrap();
            let a: Vec<usize> = got.iter().map(|p| p.index).collect();
            let b: Vec<usize> = solo.iter().map(|p| p.index).collect();
            assert_eq!(a, b);
        }
        // k = 0 -> empty per part, and no prefix rows at all.
        let empty = pools.retrieve(&x, 0).unwrap();
        assert_eq!(empty.num_rows(), 0);
    }

    #[test]
    fn retrieval_is_deterministic() {
        let pools = toy_pool_set(4, 13);
        let mut rng = rng_for(14, "det");
        let x = randn(&[4], &mut rng).into_data();
        let a = pools.retrieve(&x, 3).unwrap();
        let b = pools.retrieve(&x, 3).unwrap();
        for (pa, pb) in a.per_part.iter().zip(&b.per_part) {
            let ia: Vec<usize> = pa.iter().map(|p| p.index).collect();
            let ib: Vec<usize> = pb.iter().map(|p| p.index).collect();
            assert_eq!(ia, ib);
        }
    }

    #[test]
    fn video_prefix_rows_average_over_frames() {
        let pools = toy_pool_set(4, 15);
        let mut rng = rng_for(16, "prefix-mean");
        let frames = randn(&[5, 4], &mut rng);
        let rows = build_prefix_rows(&pools, &frames, 1, PrefixMode::Video)
            .unwrap()
            .unwrap();
        let PrefixRows::Shared(rows) = rows else {
            panic!("expected shared rows");
        };
        assert_eq!(rows.shape(), &[3, 4]);
        // Slot 0 is the mean over frames of each frame's top tip prompt.
        let mut want = vec![0.0; 4];
        for i in 0..5 {
            let top = pools.tip.select_top_k(frames.row(i), 1).unwrap();
            for (w, v) in want.iter_mut().zip(&top[0].mu) {
                *w += v / 5.0;
            }
        }
        for (a, b) in rows.row(0).iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(build_prefix_rows(&pools, &frames, 0, PrefixMode::Video)
            .unwrap()
            .is_none());
    }

    #[test]
    fn pool_set_save_load_roundtrip_is_bitwise() {
        let mut pools = toy_pool_set(4, 17);
        let mut rng = rng_for(18, "saveload");
        let frames = randn(&[20, 4], &mut rng);
        pools.fit_covariance_from_frames(&frames).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pools.json");
        pools.save(&path).unwrap();
        let back = PoolSet::load(&path).unwrap();
        for (a, b) in pools.pools().iter().zip(back.pools()) {
            assert_eq!(a.len(), b.len());
            for (ca, cb) in a.components().iter().zip(b.components()) {
                assert_eq!(ca.attr_id, cb.attr_id);
                assert_eq!(ca.pi.to_bits(), cb.pi.to_bits());
                assert_eq!(ca.var.to_bits(), cb.var.to_bits());
                for (x, y) in ca.mu.iter().zip(&cb.mu) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }
}
