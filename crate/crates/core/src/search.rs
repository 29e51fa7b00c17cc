//! Reuse-strategy construction and search: HURRY, bit-flip neighborhoods,
//! the PHAST greedy local search and an exhaustive oracle.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::psnr;
use crate::model::{ModelWeights, PromptSpec};
use crate::reuse::{ReuseConfig, StrategyVector};
use crate::sampler::{sample, sample_reference, sample_resumable, SamplerConfig, StepState};
use crate::tensor::{DenseArray, SeededRng};

/// Default exhaustive-search budget (strategies).
pub const DEFAULT_BUDGET: u64 = 100_000;

fn check_counts(n: usize, r: usize) -> Result<()> {
    if n == 0 || r >= n {
        return Err(Error::InvalidStrategy(format!(
            "need 0 ≤ r < N (first step must compute), got N={n}, r={r}"
        )));
    }
    Ok(())
}

/// `N−r` computed steps followed by `r` reuse steps.
pub fn hurry(n: usize, r: usize) -> Result<StrategyVector> {
    check_counts(n, r)?;
    StrategyVector::new((0..n).map(|i| i < n - r).collect())
}

/// Step 1 computes, the next `r` steps reuse, the rest compute.
pub fn reuse_early(n: usize, r: usize) -> Result<StrategyVector> {
    check_counts(n, r)?;
    StrategyVector::new((0..n).map(|i| i == 0 || i > r).collect())
}

/// `r` reuse steps placed uniformly at random among steps `2..=N`.
pub fn random_strategy(n: usize, r: usize, seed: u64) -> Result<StrategyVector> {
    check_counts(n, r)?;
    let mut rng = SeededRng::new(seed).derive(&[0x5a7]);
    let mut free: Vec<usize> = (1..n).collect();
    let mut bits = vec![true; n];
    for _ in 0..r {
        let k = rng.below(free.len() as u64) as usize;
        bits[free.swap_remove(k)] = false;
    }
    StrategyVector::new(bits)
}

/// Every strategy reachable by swapping one computed step (never step 1)
/// with one reuse step. Ordered lexicographically by the swapped index
/// pair `(lower, higher)`.
pub fn bit_flip_set(strategy: &StrategyVector) -> Vec<StrategyVector> {
    let bits = strategy.bits();
    let n = bits.len();
    let mut out = Vec::new();
    for i in 1..n {
        for j in i + 1..n {
            if bits[i] != bits[j] {
                let mut flipped = bits.to_vec();
                flipped.swap(i, j);
                out.push(StrategyVector::new(flipped).expect("step 1 untouched"));
            }
        }
    }
    out
}

/// One-swap neighborhood size: `(N−r−1)·r` with step 1 pinned, `(N−r)·r`
/// without.
pub fn neighborhood_size(n: usize, r: usize, pin_first: bool) -> usize {
    let ones = n - r;
    (if pin_first { ones.saturating_sub(1) } else { ones }) * r
}

pub fn binomial(n: u64, k: u64) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) / (i + 1))
}

/// Strategies with `r` reuse steps out of `N`: `C(N−1, r)` with step 1
/// pinned, `C(N, r)` without.
pub fn strategy_space_size(n: usize, r: usize, pin_first: bool) -> u64 {
    if pin_first {
        binomial(n as u64 - 1, r as u64)
    } else {
        binomial(n as u64, r as u64)
    }
}

/// Score to maximize over strategies (dB for the model utility).
pub trait Utility {
    fn evaluate(&mut self, strategy: &StrategyVector) -> Result<f64>;

    /// Results in input order.
    fn evaluate_batch(&mut self, strategies: &[StrategyVector]) -> Result<Vec<f64>> {
        strategies.iter().map(|s| self.evaluate(s)).collect()
    }
}

/// Adapts a closure.
pub struct FnUtility<F>(pub F);

impl<F: FnMut(&StrategyVector) -> f64> Utility for FnUtility<F> {
    fn evaluate(&mut self, strategy: &StrategyVector) -> Result<f64> {
        Ok((self.0)(strategy))
    }
}

/// Mean PSNR against the strategy-free reference over a fixed set of
/// `(prompt, seed)` pairs. Results are memoized by strategy.
pub struct ModelUtility<'a> {
    weights: &'a ModelWeights,
    config: SamplerConfig,
    reuse: ReuseConfig,
    cases: Vec<(PromptSpec, u64)>,
    references: Vec<DenseArray>,
    memo: HashMap<StrategyVector, f64>,
    evaluations: usize,
}

impl<'a> ModelUtility<'a> {
    pub fn new(
        weights: &'a ModelWeights,
        config: &SamplerConfig,
        reuse: ReuseConfig,
        cases: Vec<(PromptSpec, u64)>,
    ) -> Result<Self> {
        if cases.is_empty() {
            return Err(Error::Config("utility needs at least one prompt".into()));
        }
        let config = SamplerConfig { record_observations: false, ..config.clone() };
        let references = cases
            .par_iter()
            .map(|(p, seed)| {
                let cfg = SamplerConfig { seed: *seed, ..config.clone() };
                sample_reference(weights, &cfg, p).map(|r| r.image)
            })
            .collect::<Result<_>>()?;
        Ok(Self { weights, config, reuse, cases, references, memo: HashMap::new(), evaluations: 0 })
    }

    /// Strategy runs actually sampled (memo hits excluded).
    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn steps(&self) -> usize {
        self.config.steps
    }

    pub fn with_reuse(&self, reuse: ReuseConfig) -> ModelUtility<'a> {
        ModelUtility {
            weights: self.weights,
            config: self.config.clone(),
            reuse,
            cases: self.cases.clone(),
            references: self.references.clone(),
            memo: HashMap::new(),
            evaluations: 0,
        }
    }

    /// Uncached PSNR per case.
    pub fn per_case(&self, strategy: &StrategyVector) -> Result<Vec<f64>> {
        self.cases
            .iter()
            .zip(&self.references)
            .map(|((p, seed), reference)| {
                let cfg = SamplerConfig { seed: *seed, ..self.config.clone() };
                let out = sample(self.weights, &cfg, p, strategy, self.reuse)?;
                psnr(&out.image, reference)
            })
            .collect()
    }

    fn compute(&self, strategy: &StrategyVector) -> Result<f64> {
        let v = self.per_case(strategy)?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    }

    /// PSNR of one case for each strategy of a sorted list. Each run resumes
    /// from the state its predecessor reached at the end of their shared
    /// prefix.
    fn case_scores(&self, case: usize, sorted: &[&StrategyVector]) -> Result<Vec<f64>> {
        let (prompt, seed) = self.cases[case];
        let cfg = SamplerConfig { seed, ..self.config.clone() };
        let last = self.config.steps - 1;
        let mut states: Vec<StepState> = Vec::with_capacity(self.config.steps);
        let mut prev: Option<&StrategyVector> = None;
        let mut out = Vec::with_capacity(sorted.len());
        for &strategy in sorted {
            let shared = prev.map_or(0, |p| shared_prefix(p, strategy)).min(last).min(states.len());
            states.truncate(shared);
            let resume = states.last().cloned();
            debug_assert_eq!(resume.as_ref().map_or(0, StepState::done), shared);
            let run = sample_resumable(self.weights, &cfg, &prompt, strategy, self.reuse, resume.as_ref(), &mut states)?;
            out.push(psnr(&run.image, &self.references[case])?);
            prev = Some(strategy);
        }
        Ok(out)
    }
}

fn shared_prefix(a: &StrategyVector, b: &StrategyVector) -> usize {
    a.bits().iter().zip(b.bits()).take_while(|(x, y)| x == y).count()
}

impl Utility for ModelUtility<'_> {
    fn evaluate(&mut self, strategy: &StrategyVector) -> Result<f64> {
        if let Some(&u) = self.memo.get(strategy) {
            return Ok(u);
        }
        let u = self.compute(strategy)?;
        self.evaluations += 1;
        self.memo.insert(strategy.clone(), u);
        Ok(u)
    }

    fn evaluate_batch(&mut self, strategies: &[StrategyVector]) -> Result<Vec<f64>> {
        let mut missing: Vec<&StrategyVector> = strategies.iter().filter(|s| !self.memo.contains_key(*s)).collect();
        missing.sort();
        missing.dedup();
        if let Some(bad) = missing.iter().find(|s| s.len() != self.config.steps) {
            return Err(Error::InvalidStrategy(format!("strategy has {} steps, sampler has {}", bad.len(), self.config.steps)));
        }
        let by_case: Vec<Vec<f64>> = {
            let this = &*self;
            (0..this.cases.len()).into_par_iter().map(|c| this.case_scores(c, &missing)).collect::<Result<_>>()?
        };
        // summed in case order, as in `per_case`
        let fresh = (0..missing.len())
            .map(|i| by_case.iter().map(|scores| scores[i]).sum::<f64>() / by_case.len() as f64);
        for (s, u) in missing.into_iter().zip(fresh) {
            if self.memo.insert(s.clone(), u).is_none() {
                self.evaluations += 1;
            }
        }
        Ok(strategies.iter().map(|s| self.memo[s]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub steps: usize,
    pub reuse_steps: usize,
    /// Minimum improvement (dB) for a bit-flip to be accepted.
    pub epsilon: f64,
    pub max_rounds: usize,
}

impl SearchConfig {
    pub fn new(steps: usize, reuse_steps: usize) -> Self {
        Self { steps, reuse_steps, epsilon: 0.05, max_rounds: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub strategy: StrategyVector,
    pub utility_db: f64,
    pub round: usize,
    pub accepted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchReport {
    pub best: StrategyVector,
    pub best_utility: f64,
    pub hurry: StrategyVector,
    pub hurry_utility: f64,
    /// `Optima(0)`, `Optima(1)`, ...: best utility after each round.
    pub optima: Vec<f64>,
    pub log: Vec<LogEntry>,
    pub rounds: usize,
    pub evaluations: usize,
}

/// Greedy bit-flip search started from HURRY.
///
/// Each round snapshots the bit-flip set of the current best and scans it
/// in order, moving the best to any neighbor that beats the round's running
/// optimum by more than `epsilon`. The search stops after a round with no
/// move.
pub fn phast_search<U: Utility + ?Sized>(config: &SearchConfig, utility: &mut U) -> Result<SearchReport> {
    if !(config.epsilon >= 0.0) {
        return Err(Error::Config(format!("epsilon {} must be ≥ 0", config.epsilon)));
    }
    let start = hurry(config.steps, config.reuse_steps)?;
    let start_u = utility.evaluate(&start)?;
    let mut best = start.clone();
    let mut optima = vec![start_u];
    let mut log = vec![LogEntry { strategy: start.clone(), utility_db: start_u, round: 0, accepted: true }];
    let mut evaluations = 1;
    let mut round = 0;
    loop {
        if round == config.max_rounds {
            return Err(Error::Budget(format!("PHAST did not settle within {} rounds", config.max_rounds)));
        }
        round += 1;
        let mut current = *optima.last().unwrap();
        let neighbors = bit_flip_set(&best);
        let scores = utility.evaluate_batch(&neighbors)?;
        evaluations += neighbors.len();
        for (pi, u) in neighbors.into_iter().zip(scores) {
            let accepted = u > current + config.epsilon;
            if accepted {
                best = pi.clone();
                current = u;
            }
            log.push(LogEntry { strategy: pi, utility_db: u, round, accepted });
        }
        let previous = *optima.last().unwrap();
        optima.push(current);
        if current == previous {
            break;
        }
    }
    Ok(SearchReport {
        best_utility: *optima.last().unwrap(),
        best,
        hurry: start,
        hurry_utility: start_u,
        optima,
        log,
        rounds: round,
        evaluations,
    })
}

/// All strategies with `r` reuse steps and step 1 computed, in lexicographic
/// order of their reuse positions.
pub fn enumerate_strategies(n: usize, r: usize) -> Result<Vec<StrategyVector>> {
    check_counts(n, r)?;
    let mut out = Vec::new();
    let mut zeros: Vec<usize> = (1..=r).collect();
    loop {
        let mut bits = vec![true; n];
        for &z in &zeros {
            bits[z] = false;
        }
        out.push(StrategyVector::new(bits)?);
        // advance the combination over positions 1..n
        let mut i = r;
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            if zeros[i] < n - r + i {
                zeros[i] += 1;
                for j in i + 1..r {
                    zeros[j] = zeros[j - 1] + 1;
                }
                break;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedStrategy {
    pub strategy: StrategyVector,
    pub utility_db: f64,
}

/// Evaluate every valid strategy and rank by utility, best first; ties
/// broken by the bitstring in ascending lexicographic order.
pub fn exhaustive_search<U: Utility + ?Sized>(
    n: usize,
    r: usize,
    utility: &mut U,
    budget: u64,
) -> Result<Vec<RankedStrategy>> {
    check_counts(n, r)?;
    let size = strategy_space_size(n, r, true);
    if size > budget {
        return Err(Error::Budget(format!("{size} strategies exceed budget {budget}")));
    }
    let all = enumerate_strategies(n, r)?;
    let scores = utility.evaluate_batch(&all)?;
    let mut ranked: Vec<RankedStrategy> =
        all.into_iter().zip(scores).map(|(strategy, utility_db)| RankedStrategy { strategy, utility_db }).collect();
    ranked.sort_by(|a, b| {
        b.utility_db.total_cmp(&a.utility_db).then_with(|| a.strategy.to_string().cmp(&b.strategy.to_string()))
    });
    Ok(ranked)
}

/// Median utility of a ranked list (mean of the middle pair when even).
pub fn median_utility(ranked: &[RankedStrategy]) -> f64 {
    let mut u: Vec<f64> = ranked.iter().map(|r| r.utility_db).collect();
    u.sort_by(f64::total_cmp);
    let m = u.len() / 2;
    if u.len() % 2 == 1 {
        u[m]
    } else {
        0.5 * (u[m - 1] + u[m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn s(lit: &str) -> StrategyVector {
        lit.parse().unwrap()
    }

    #[test]
    fn prefix_resumed_batch_matches_fresh_runs() {
        let w = ModelWeights::init(2);
        let cfg = SamplerConfig { steps: 6, ..SamplerConfig::default() };
        let cases = vec![(PromptSpec::all()[0], 0), (PromptSpec::all()[4], 3)];
        for solver in [crate::sampler::Solver::Ddim, crate::sampler::Solver::Multistep2] {
            let cfg = SamplerConfig { solver, ..cfg.clone() };
            let all = enumerate_strategies(6, 2).unwrap();
            let mut batched = ModelUtility::new(&w, &cfg, ReuseConfig::default(), cases.clone()).unwrap();
            let got = batched.evaluate_batch(&all).unwrap();
            let fresh = ModelUtility::new(&w, &cfg, ReuseConfig::default(), cases.clone()).unwrap();
            for (st, g) in all.iter().zip(got) {
                assert_eq!(g.to_bits(), fresh.compute(st).unwrap().to_bits(), "{st}");
            }
        }
    }

    #[test]
    fn resumed_sample_is_bitwise_fresh() {
        let w = ModelWeights::init(4);
        let cfg = SamplerConfig { steps: 8, seed: 5, ..SamplerConfig::default() };
        let p = PromptSpec::all()[2];
        let (a, b) = (s("10011010"), s("10010110"));
        let mut states = Vec::new();
        sample_resumable(&w, &cfg, &p, &a, ReuseConfig::default(), None, &mut states).unwrap();
        assert_eq!(states.len(), 8);
        states.truncate(4);
        let resume = states.last().cloned().unwrap();
        assert_eq!(resume.done(), 4);
        let got = sample_resumable(&w, &cfg, &p, &b, ReuseConfig::default(), Some(&resume), &mut states).unwrap();
        let want = sample(&w, &cfg, &p, &b, ReuseConfig::default()).unwrap();
        assert_eq!(got.image.data(), want.image.data());
        assert_eq!(states.len(), 8);
    }

    #[test]
    fn hurry_shapes() {
        assert_eq!(hurry(6, 3).unwrap(), s("111000"));
        assert_eq!(hurry(10, 3).unwrap(), s("[1,1,1,1,1, 1,1,0,0,0]"));
        assert_eq!(hurry(20, 0).unwrap(), StrategyVector::all_compute(20).unwrap());
        assert!(hurry(5, 5).is_err());
        assert_eq!(reuse_early(20, 10).unwrap(), s("10000000000111111111"));
    }

    #[test]
    fn neighborhoods() {
        let nb = bit_flip_set(&s("111000"));
        assert_eq!(nb.len(), 6);
        assert_eq!(nb.len(), neighborhood_size(6, 3, true));
        assert!(bit_flip_set(&StrategyVector::all_compute(7).unwrap()).is_empty());
        assert_eq!(bit_flip_set(&hurry(20, 10).unwrap()).len(), 90);
        assert_eq!(neighborhood_size(20, 10, false), 100);
    }

    #[test]
    fn space_counts() {
        assert_eq!(strategy_space_size(20, 10, false), 184_756);
        assert_eq!(strategy_space_size(20, 10, true), 92_378);
        assert_eq!(enumerate_strategies(8, 3).unwrap().len(), 35);
        assert_eq!(enumerate_strategies(8, 0).unwrap(), vec![StrategyVector::all_compute(8).unwrap()]);
        let all = enumerate_strategies(9, 4).unwrap();
        let uniq: HashSet<_> = all.iter().collect();
        assert_eq!(uniq.len(), all.len());
        assert!(all.iter().all(|v| v.reuse_count() == 4 && v.computes(1)));
    }

    #[test]
    fn random_strategy_is_valid_and_seeded() {
        let a = random_strategy(20, 10, 0).unwrap();
        assert_eq!(a.reuse_count(), 10);
        assert!(a.computes(1));
        assert_eq!(a, random_strategy(20, 10, 0).unwrap());
    }

    fn separable(mask: Vec<bool>) -> impl FnMut(&StrategyVector) -> f64 {
        move |st: &StrategyVector| st.bits().iter().zip(&mask).filter(|(a, b)| a == b).count() as f64
    }

    #[test]
    fn phast_matches_exhaustive_on_separable_utility() {
        let target = s("10110110");
        let mut u = FnUtility(separable(target.bits().to_vec()));
        let ranked = exhaustive_search(8, 3, &mut u, DEFAULT_BUDGET).unwrap();
        assert_eq!(ranked.len(), 35);
        let report = phast_search(&SearchConfig::new(8, 3), &mut u).unwrap();
        assert_eq!(report.best, ranked[0].strategy);
        assert_eq!(report.best, target);
        assert_eq!(report.best_utility, ranked[0].utility_db);
    }

    #[test]
    fn large_epsilon_returns_hurry() {
        let mut u = FnUtility(separable(s("10110110").bits().to_vec()));
        let cfg = SearchConfig { epsilon: 1e9, ..SearchConfig::new(8, 3) };
        let report = phast_search(&cfg, &mut u).unwrap();
        assert_eq!(report.best, hurry(8, 3).unwrap());
        assert_eq!(report.rounds, 1);
        assert_eq!(report.optima, vec![report.hurry_utility; 2]);
    }

    #[test]
    fn lookup_landscape_settles_one_flip_from_hurry() {
        // HURRY ranks third and the optimum is one flip away; everything
        // else scores lower.
        let table: HashMap<String, f64> =
            [("1111110100", 27.2), ("1111110010", 26.8), ("1111111000", 25.9)].into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let mut u = FnUtility(|st: &StrategyVector| *table.get(&st.to_string()).unwrap_or(&20.0));
        let report = phast_search(&SearchConfig::new(10, 3), &mut u).unwrap();
        assert_eq!(report.best, s("1111110100"));
        assert_eq!(report.best.differing_steps(&report.hurry).len(), 2);
        assert_eq!(report.rounds, 2);
    }

    #[test]
    fn safeguard_trips() {
        let mut u = FnUtility(separable(s("10110110").bits().to_vec()));
        let cfg = SearchConfig { max_rounds: 1, ..SearchConfig::new(8, 3) };
        assert!(matches!(phast_search(&cfg, &mut u), Err(Error::Budget(_))));
    }

    #[test]
    fn exhaustive_budget_and_ties() {
        let mut flat = FnUtility(|_: &StrategyVector| 1.0);
        assert!(exhaustive_search(20, 10, &mut flat, DEFAULT_BUDGET).is_ok());
        assert!(matches!(exhaustive_search(20, 10, &mut flat, 1000), Err(Error::Budget(_))));
        let ranked = exhaustive_search(6, 2, &mut flat, DEFAULT_BUDGET).unwrap();
        let names: Vec<String> = ranked.iter().map(|r| r.strategy.to_string()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        let one = exhaustive_search(5, 0, &mut flat, DEFAULT_BUDGET).unwrap();
        assert_eq!(one.len(), 1);
    }

    proptest! {
        #[test]
        fn flips_preserve_reuse_count(bits in proptest::collection::vec(any::<bool>(), 1..16)) {
            let mut bits = bits;
            bits[0] = true;
            let parent = StrategyVector::new(bits).unwrap();
            let nb = bit_flip_set(&parent);
            let r = parent.reuse_count();
            prop_assert_eq!(nb.len(), neighborhood_size(parent.len(), r, true));
            let uniq: HashSet<_> = nb.iter().collect();
            prop_assert_eq!(uniq.len(), nb.len());
            for c in &nb {
                prop_assert_eq!(c.reuse_count(), r);
                prop_assert_eq!(c.differing_steps(&parent).len(), 2);
                prop_assert!(c.computes(1));
            }
        }

        #[test]
        fn phast_is_monotone_and_locally_optimal(weights in proptest::collection::vec(-5.0f64..5.0, 9), eps in 0.0f64..0.5) {
            // additive utility over reuse positions
            let score = |st: &StrategyVector| -> f64 {
                st.bits().iter().zip(&weights).filter(|(b, _)| !**b).map(|(_, w)| *w).sum()
            };
            let mut u = FnUtility(score);
            let cfg = SearchConfig { epsilon: eps, ..SearchConfig::new(9, 4) };
            let rep = phast_search(&cfg, &mut u).unwrap();
            prop_assert!(rep.optima.windows(2).all(|w| w[1] >= w[0]));
            prop_assert!(rep.best_utility >= rep.hurry_utility);
            let n = rep.optima.len();
            prop_assert_eq!(rep.optima[n - 1], rep.optima[n - 2]);
            for nb in bit_flip_set(&rep.best) {
                prop_assert!(score(&nb) <= rep.best_utility + eps);
            }
        }
    }
}
