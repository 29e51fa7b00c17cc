//! End-to-end acceptance checks. Prints one line per criterion and exits
//! non-zero when a hard criterion fails. The trained toy model is cached
//! under the cargo target tmp dir; delete it to force retraining.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use reuselab::analysis::{attention_distance, default_window, fit_exponential, perturbation_sweep};
use reuselab::io::write_ppm;
use reuselab::metrics::{full_latency, latency_estimate, PSNR_CAP_DB};
use reuselab::model::{
    architecture_hash, denoising_gradient, load_checkpoint, predict_noise, save_checkpoint, train_toy,
    AttentionDirective, Origin, TrainConfig, IMAGE_DIMS,
};
use reuselab::sampler::{sample, sample_reference};
use reuselab::search::{
    bit_flip_set, enumerate_strategies, exhaustive_search, hurry, median_utility, neighborhood_size, phast_search,
    random_strategy, reuse_early, strategy_space_size, FnUtility, ModelUtility, SearchConfig, SearchReport, Utility,
};
use reuselab::tensor::{gaussian, softmax_rows};
use reuselab::{
    CostModel, DenseArray, ModelWeights, Precision, PromptSpec, ReuseConfig, ReuseTarget, Result, SamplerConfig,
    SeededRng, StrategyVector,
};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    soft: bool,
}

fn cases() -> Vec<(PromptSpec, u64)> {
    PromptSpec::all().into_iter().flat_map(|p| SEEDS.into_iter().map(move |s| (p, s))).collect()
}

fn trained_model() -> Result<ModelWeights> {
    let path = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(format!("toy-{:016x}-seed0.rlab", architecture_hash()));
    if let Ok(w) = load_checkpoint(&path) {
        println!("setup: loaded cached model from {}", path.display());
        return Ok(w);
    }
    let start = Instant::now();
    let (w, report) = train_toy(&TrainConfig::default(), 0)?;
    let ratio = report.final_val_loss / report.initial_val_loss;
    println!(
        "setup: trained default model in {:.0} s, validation loss {:.4} -> {:.4} (ratio {ratio:.3}, bound 0.5)",
        start.elapsed().as_secs_f64(),
        report.initial_val_loss,
        report.final_val_loss
    );
    assert!(ratio < 0.5, "training did not halve the validation loss");
    save_checkpoint(&w, &path)?;
    Ok(w)
}

fn ppm_bytes(img: &DenseArray) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_ppm(img, &mut buf)?;
    Ok(buf)
}

fn no_op_equivalence(w: &ModelWeights) -> Result<Outcome> {
    let mut identical = 0;
    let mut min_psnr = f64::INFINITY;
    let all = cases();
    for (prompt, seed) in &all {
        let cfg = SamplerConfig::new(20, *seed);
        let reference = sample_reference(w, &cfg, prompt)?;
        let ones = StrategyVector::all_compute(20)?;
        let reused = sample(w, &cfg, prompt, &ones, ReuseConfig::default())?;
        if ppm_bytes(&reference.image)? == ppm_bytes(&reused.image)? {
            identical += 1;
        }
        min_psnr = min_psnr.min(reuselab::psnr(&reference.image, &reused.image)?);
    }
    Ok(Outcome::new(
        identical == all.len() && min_psnr == PSNR_CAP_DB,
        format!("{identical}/{} byte-identical images, min PSNR {min_psnr} dB", all.len()),
    ))
}

fn reuse_provenance(w: &ModelWeights) -> Result<Outcome> {
    let strategy: StrategyVector = "[1,1,0,0,1,0]".parse()?;
    let mut cfg = SamplerConfig::new(6, 0);
    cfg.record_observations = true;
    let run = sample(w, &cfg, &"red-circle".parse()?, &strategy, ReuseConfig::default())?;
    let mut reused = std::collections::BTreeMap::new();
    let mut consistent = run.observations.len() == 24;
    for o in &run.observations {
        match o.origin {
            Origin::Reused => {
                if let Some(prev) = reused.insert(o.step, o.provenance) {
                    consistent &= prev == o.provenance;
                }
            }
            _ => consistent &= o.provenance == o.step,
        }
    }
    let want: std::collections::BTreeMap<usize, usize> = [(3, 2), (4, 2), (6, 5)].into();
    Ok(Outcome::new(consistent && reused == want, format!("reused step -> source step {reused:?}")))
}

fn counting() -> Result<Outcome> {
    let free = strategy_space_size(20, 10, false);
    let pinned = strategy_space_size(20, 10, true);
    let enumerated = enumerate_strategies(20, 10)?.len() as u64;
    let flips = bit_flip_set(&hurry(20, 10)?).len();
    let flips_pinned = neighborhood_size(20, 10, true);
    let flips_free = neighborhood_size(20, 10, false);
    let pass = free == 184_756
        && pinned == 92_378
        && enumerated == pinned
        && flips == 90
        && flips_pinned == 90
        && flips_free == 100
        && flips_free == (20 - 10) * 10;
    Ok(Outcome::new(
        pass,
        format!(
            "space {free} free / {pinned} pinned ({enumerated} enumerated), neighbourhood {flips} pinned / {flips_free} free"
        ),
    ))
}

fn latency() -> Result<Outcome> {
    let model = CostModel::default();
    let reuse = latency_estimate(&hurry(20, 10)?, &model);
    let reduced = full_latency(13, &model);
    let near = |v: f64| (v - 4000.0).abs() <= 50.0;
    Ok(Outcome::new(
        reuse == 3980.0 && reduced == 3952.0 && near(reuse) && near(reduced),
        format!("N=20 r=10: {reuse} ms, 13 full steps: {reduced} ms"),
    ))
}

fn oracle_equivalence(w: &ModelWeights) -> Result<Outcome> {
    let cfg = SamplerConfig::new(8, 0);
    let search = SearchConfig::new(8, 3);
    let mut utility = ModelUtility::new(w, &cfg, ReuseConfig::default(), cases())?;
    let ranked = exhaustive_search(8, 3, &mut utility, 1_000)?;
    let median = median_utility(&ranked);
    let report = phast_search(&search, &mut utility)?;
    let neighbours = bit_flip_set(&report.best);
    let best_neighbour = utility.evaluate_batch(&neighbours)?.into_iter().fold(f64::NEG_INFINITY, f64::max);
    let local = best_neighbour <= report.best_utility + search.epsilon;
    let toy_pass = ranked.len() == 35 && report.best_utility >= median && local;

    // separable utility: each reused step costs a distinct amount
    let mut rng = SeededRng::new(11);
    let mut cost: Vec<f64> = (0..12).map(|i| 0.1 * (i + 1) as f64).collect();
    for i in (1..cost.len()).rev() {
        cost.swap(i, rng.below(i as u64 + 1) as usize);
    }
    let separable = |s: &StrategyVector| -> f64 {
        s.bits().iter().zip(&cost).filter(|(b, _)| !**b).map(|(_, c)| -c).sum()
    };
    let exhaustive = exhaustive_search(12, 5, &mut FnUtility(separable), 1_000)?;
    let phast = phast_search(&SearchConfig::new(12, 5), &mut FnUtility(separable))?;
    let synthetic_pass = phast.best == exhaustive[0].strategy && phast.best_utility == exhaustive[0].utility_db;

    Ok(Outcome::new(
        toy_pass && synthetic_pass,
        format!(
            "toy N=8 r=3: PHAST {} at {:.3} dB, median {median:.3} dB, best neighbour {best_neighbour:.3} dB, optimum {:.3} dB; separable: PHAST {} vs exhaustive {}",
            report.best, report.best_utility, ranked[0].utility_db, phast.best, exhaustive[0].strategy
        ),
    ))
}

fn heuristic_ordering(utility: &mut ModelUtility) -> Result<Outcome> {
    let h = utility.evaluate(&hurry(20, 10)?)?;
    let early = utility.evaluate(&reuse_early(20, 10)?)?;
    let random = random_strategy(20, 10, 0)?;
    let r = utility.evaluate(&random)?;
    Ok(Outcome::new(
        h > early && h > r,
        format!("HURRY {h:.3} dB, early {early:.3} dB, random {random} {r:.3} dB"),
    ))
}

fn exponential_fit(w: &ModelWeights) -> Result<(Outcome, Outcome)> {
    let points: Vec<(f64, f64)> = (1..=20).map(|s| (s as f64, 2.0 * (-0.3 * s as f64).exp())).collect();
    let fit = fit_exponential(&points, (1, 20))?;
    let synthetic = (fit.k1 - 2.0).abs() <= 1e-6 && (fit.k2 - 0.3).abs() <= 1e-6 && (fit.pearson_r - 1.0).abs() <= 1e-9;
    let synthetic = Outcome::new(
        synthetic,
        format!("synthetic k1 {:.9} k2 {:.9} r {:.12}", fit.k1, fit.k2, fit.pearson_r),
    );

    let cfg = SamplerConfig::new(20, 0);
    let report = perturbation_sweep(w, &cfg, &cases(), 0.1, default_window(20))?;
    let toy = match (&report.fit, &report.fit_error) {
        (Some(f), _) => Outcome::new(
            f.k2 > 0.0 && f.pearson_r >= 0.8,
            format!("toy sweep k1 {:.4} k2 {:.4} r {:.3} over steps {:?}", f.k1, f.k2, f.pearson_r, f.window),
        ),
        (None, e) => Outcome::new(false, format!("toy sweep fit failed: {}", e.as_deref().unwrap_or("unknown"))),
    };
    Ok((synthetic, toy))
}

fn cache_precision(utility: &ModelUtility, phast: &SearchReport) -> Result<Outcome> {
    let f32_db = phast.best_utility;
    let f16_db = utility.with_reuse(ReuseConfig { precision: Precision::F16, ..Default::default() }).evaluate(&phast.best)?;
    let i8_db = utility.with_reuse(ReuseConfig { precision: Precision::I8, ..Default::default() }).evaluate(&phast.best)?;
    Ok(Outcome::new(
        (f16_db - f32_db).abs() <= 0.5 && (i8_db - f32_db).abs() <= 2.0,
        format!("PHAST {}: f32 {f32_db:.3} dB, f16 {f16_db:.3} dB, i8 {i8_db:.3} dB", phast.best),
    ))
}

fn feature_reuse(utility: &ModelUtility, phast: &SearchReport) -> Result<Outcome> {
    let mut features = utility.with_reuse(ReuseConfig { target: ReuseTarget::Features, ..Default::default() });
    let h = hurry(20, 10)?;
    let fh = features.evaluate(&h)?;
    let fp = features.evaluate(&phast.best)?;
    let (mh, mp) = (phast.hurry_utility, phast.best_utility);
    let emitted = [fh, fp, mh, mp].iter().all(|v| v.is_finite());
    let direction = if mh >= fh && mp >= fp { "maps >= features" } else { "features beat maps somewhere" };
    Ok(Outcome::new(
        emitted,
        format!("HURRY maps {mh:.3} / features {fh:.3} dB; PHAST maps {mp:.3} / features {fp:.3} dB ({direction})"),
    ))
}

fn numerics(w: &ModelWeights) -> Result<Outcome> {
    let mut rng = SeededRng::new(5);
    // gradient check on a miniature batch
    let batch: Vec<_> = [(640usize, "blue-square"), (90, "null"), (300, "green-cross")]
        .into_iter()
        .map(|(t, p)| -> Result<_> {
            Ok((gaussian(&mut rng, &IMAGE_DIMS)?, t, p.parse::<PromptSpec>()?, gaussian(&mut rng, &IMAGE_DIMS)?))
        })
        .collect::<Result<_>>()?;
    let loss = |w: &ModelWeights| -> Result<f64> {
        let mut total = 0.0f64;
        for (x, t, p, target) in &batch {
            let (eps, _) = predict_noise(w, x, *t, p, &AttentionDirective::compute())?;
            total += eps.data().iter().zip(target.data()).map(|(&e, &y)| (e as f64 - y as f64).powi(2)).sum::<f64>()
                / eps.len() as f64;
        }
        Ok(total)
    };
    let mut grad = ModelWeights::zeros();
    for (x, t, p, target) in &batch {
        grad.accumulate(&denoising_gradient(w, x, *t, p, target)?.1);
    }
    // every parameter, central differences; relative error per tensor in the 2-norm
    let h = 1e-3f32;
    let mut worst = (0.0f64, "");
    let mut checked = 0;
    for (ti, name) in ModelWeights::names().enumerate() {
        let analytic = grad.tensors()[ti].data();
        let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
        let mut probe = w.clone();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = probe.tensors()[ti].data()[i];
            probe.tensors_mut()[ti].data_mut()[i] = orig + h;
            let up = loss(&probe)?;
            probe.tensors_mut()[ti].data_mut()[i] = orig - h;
            let down = loss(&probe)?;
            probe.tensors_mut()[ti].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h as f64);
            diff += (numeric - a as f64).powi(2);
            na += (a as f64).powi(2);
            nn += numeric.powi(2);
            checked += 1;
        }
        let rel = diff.sqrt() / na.sqrt().max(nn.sqrt());
        if rel > worst.0 {
            worst = (rel, name);
        }
    }

    let mut row_err = 0.0f64;
    for _ in 0..1000 {
        let logits = gaussian(&mut rng, &[8, 64])?.scale(4.0);
        let p = softmax_rows(&logits)?;
        for r in 0..p.rows() {
            row_err = row_err.max((p.row(r).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
        }
    }

    let mut axiom_failures = 0;
    for _ in 0..1000 {
        let maps: Vec<DenseArray> =
            (0..3).map(|_| softmax_rows(&gaussian(&mut rng, &[64, 64])?.scale(3.0))).collect::<Result<_>>()?;
        let d = |a: &DenseArray, b: &DenseArray| attention_distance(a, b);
        let (ab, ba, bc, ac) = (d(&maps[0], &maps[1])?, d(&maps[1], &maps[0])?, d(&maps[1], &maps[2])?, d(&maps[0], &maps[2])?);
        let ok = d(&maps[0], &maps[0])? == 0.0
            && ab > 0.0
            && ab <= 1.0
            && ab == ba
            && ac <= ab + bc + 1e-12;
        if !ok {
            axiom_failures += 1;
        }
    }
    Ok(Outcome::new(
        worst.0 <= 1e-2 && row_err <= 1e-6 && axiom_failures == 0,
        format!(
            "gradient rel err {:.2e} (worst tensor {}) over {checked} parameters, softmax row error {row_err:.1e}, {axiom_failures}/1000 metric violations",
            worst.0, worst.1
        ),
    ))
}

fn report(c: &Criterion, outcome: Result<Outcome>, elapsed: Duration) -> bool {
    let secs = elapsed.as_secs_f64();
    let (pass, detail) = match outcome {
        Ok(o) => (o.pass && elapsed <= c.limit, o.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    let within = if elapsed <= c.limit { "" } else { " over time limit" };
    let status = match (pass, c.soft) {
        (true, _) => "PASS",
        (false, false) => "FAIL",
        (false, true) => "FAIL (soft)",
    };
    println!("criterion {:>2} {status:<11} {}: {detail} [{secs:.1} s / {} s{within}]", c.id, c.name, c.limit.as_secs());
    pass || c.soft
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let v = f();
    (v, start.elapsed())
}

fn crit(id: u32, name: &'static str, limit_s: u64, soft: bool) -> Criterion {
    Criterion { id, name, limit: Duration::from_secs(limit_s), soft }
}

fn main() -> ExitCode {
    let weights = match trained_model() {
        Ok(w) => w,
        Err(e) => {
            println!("setup failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    let w = &weights;
    let mut ok = true;

    let (o, t) = timed(|| no_op_equivalence(w));
    ok &= report(&crit(1, "no-op equivalence", 60, false), o, t);
    let (o, t) = timed(|| reuse_provenance(w));
    ok &= report(&crit(2, "reuse provenance", 1, false), o, t);
    let (o, t) = timed(counting);
    ok &= report(&crit(3, "counting", 1, false), o, t);
    let (o, t) = timed(latency);
    ok &= report(&crit(4, "latency arithmetic", 1, false), o, t);
    let (o, t) = timed(|| oracle_equivalence(w));
    ok &= report(&crit(5, "search vs exhaustive oracle", 600, false), o, t);

    // criteria 6, 8 and 9 share one utility over 9 prompts x 3 seeds at N=20
    let (shared, setup) = timed(|| -> Result<_> {
        let mut utility = ModelUtility::new(w, &SamplerConfig::new(20, 0), ReuseConfig::default(), cases())?;
        let phast = phast_search(&SearchConfig::new(20, 10), &mut utility)?;
        Ok((utility, phast))
    });
    match shared {
        Ok((mut utility, phast)) => {
            println!(
                "setup: PHAST at N=20 r=10 found {} ({:.3} dB) in {} rounds, {:.1} s",
                phast.best,
                phast.best_utility,
                phast.rounds,
                setup.as_secs_f64()
            );
            let (o, t) = timed(|| heuristic_ordering(&mut utility));
            ok &= report(&crit(6, "HURRY vs early and random", 300, false), o, t);
            let ((synthetic, toy), t) = match timed(|| exponential_fit(w)) {
                (Ok(pair), t) => ((Ok(pair.0), Ok(pair.1)), t),
                (Err(e), t) => ((Err(e), Err(reuselab::Error::Numeric("sweep skipped".into()))), t),
            };
            ok &= report(&crit(7, "exponential fit (synthetic)", 900, false), synthetic, t);
            ok &= report(&crit(7, "perturbation decay (toy)", 900, true), toy, t);
            let (o, t) = timed(|| cache_precision(&utility, &phast));
            ok &= report(&crit(8, "cache precision", 300, false), o, t + setup);
            let (o, t) = timed(|| feature_reuse(&utility, &phast));
            ok &= report(&crit(9, "feature vs map reuse", 600, false), o, t + setup);
        }
        Err(e) => {
            println!("setup failed: {e}");
            ok = false;
        }
    }

    let (o, t) = timed(|| numerics(w));
    ok &= report(&crit(10, "numerics", 120, false), o, t);

    println!("acceptance: {}", if ok { "all hard criteria passed" } else { "hard criteria failed" });
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
