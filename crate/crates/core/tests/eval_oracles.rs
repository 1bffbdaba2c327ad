//! Evaluation suite driven by the true synthetic sampler: every metric must
//! read as "well calibrated" when the generator is the data-generating process.

use diffnorm::eval::dependence::{all_pairs, mantel, shape_matrix};
use diffnorm::eval::distribution::{permutation_pvalue, rejection_fraction};
use diffnorm::eval::memorisation::nn_ratio;
use diffnorm::eval::median;
use diffnorm::ndmath::Tensor;
use diffnorm::pipeline::{
    evaluate, prepare, sample_grid, sample_rows, DataSource, EvalInputs, EvalReport, Prepared, RunConfig,
    TrueSynthSampler,
};
use diffnorm::synthgen::{sample_at, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::sync::OnceLock;

fn oracle_run() -> &'static (Prepared, EvalReport) {
    static RUN: OnceLock<(Prepared, EvalReport)> = OnceLock::new();
    RUN.get_or_init(|| {
        let synth = SynthConfig::default();
        let mut cfg = RunConfig { data: DataSource::Synth(synth.clone()), ..RunConfig::default() };
        cfg.eval.dependence_min_age = Some(65.0);
        cfg.eval.ks_permutations = 200;
        cfg.eval.mantel_permutations = 199;
        let prep = prepare(&cfg).unwrap();
        let grid = prep.grid();
        let sampler = TrueSynthSampler { config: &synth, standardizer: &prep.standardizer };
        let cells = sample_grid(&sampler, &grid, 500, 11).unwrap();
        let draws = sample_rows(&sampler, prep.holdout.covariates(), 11, grid.cells.len() as u64).unwrap();
        let inputs = EvalInputs {
            grid: &grid,
            cell_samples: &cells,
            train: &prep.train,
            holdout: &prep.holdout,
            holdout_draws: Some(&draws),
            standardizer: &prep.standardizer,
        };
        let report = evaluate(&inputs, &cfg.eval).unwrap();
        (prep, report)
    })
}

#[test]
fn oracle_ace_at_median_is_within_sampling_error() {
    let (_, report) = oracle_run();
    let cal = report.calibration.as_ref().unwrap();
    // Scaled within-bin sd is below 1, so the holdout median's error is at most ~1/sqrt(n).
    let eligible: Vec<f64> = cal.bins.iter().filter(|b| b.n_holdout >= 20).map(|b| 1.0 / (b.n_holdout as f64).sqrt()).collect();
    let bound = 1.3 * eligible.iter().sum::<f64>() / eligible.len() as f64;
    for r in cal.ace.iter().filter(|r| r.q == 0.5) {
        assert!(r.value < bound, "{}: ACE(0.5) {} vs bound {bound}", r.idp, r.value);
    }
    let overall = report.headline().mean_ace_overall.unwrap();
    assert!(overall < 0.15, "mean ACE {overall}");
}

#[test]
fn oracle_coverage_and_pit_are_nominal() {
    let (_, report) = oracle_run();
    let h = report.headline();
    for (a, v) in &h.median_coverage_delta {
        assert!(v.abs() < 0.03, "a={a}: median coverage delta {v}");
    }
    assert_eq!(h.pit_ks.len(), 4);
    for (k, d) in h.pit_ks.iter().enumerate() {
        assert!(*d < 0.02, "IDP {k}: PIT KS {d}");
    }
}

#[test]
fn oracle_ks_rejections_near_alpha() {
    let (_, report) = oracle_run();
    let f = report.headline().ks_rejection_fraction.unwrap();
    assert!(f <= 0.10, "rejection fraction {f}");
}

#[test]
fn oracle_memorisation_ratio_is_balanced() {
    let (_, report) = oracle_run();
    let p = report.headline().prob_lt_1.unwrap();
    assert!((0.45..=0.55).contains(&p), "prob_lt_1 {p}");
}

#[test]
fn oracle_dependence_beats_product_of_marginals() {
    let (_, report) = oracle_run();
    let dep = report.dependence.as_ref().unwrap();
    assert!(dep.median_e2_gen_vs_real < dep.median_e2_prod_vs_real, "{} vs {}", dep.median_e2_gen_vs_real, dep.median_e2_prod_vs_real);
    assert!(dep.mantel.unwrap().r > 0.9, "Mantel r {}", dep.mantel.unwrap().r);
    // The most dependent pair shows the largest gap to its product of marginals.
    let top = &dep.ranked.as_ref().unwrap().top[0];
    assert!(top.e2_prod_vs_real > top.e2_gen_vs_real);
}

#[test]
fn copying_train_or_holdout_flips_the_ratio() {
    let (prep, _) = oracle_run();
    let train = prep.train.idps().select_rows(&(0..3000).collect::<Vec<_>>());
    let hold = prep.holdout.idps().select_rows(&(0..3000).collect::<Vec<_>>());
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let jitter = |t: &Tensor, rng: &mut ChaCha8Rng| {
        let noise: Vec<f64> = (0..t.len()).map(|_| 1e-6 * rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(t.shape().to_vec(), t.data().iter().zip(&noise).map(|(v, e)| v + e).collect()).unwrap()
    };
    let copies_of_train = jitter(&train.select_rows(&(0..500).collect::<Vec<_>>()), &mut rng);
    let copies_of_hold = jitter(&hold.select_rows(&(0..500).collect::<Vec<_>>()), &mut rng);
    assert!(nn_ratio(&copies_of_train, &train, &hold).unwrap().prob_lt_1 > 0.99);
    assert!(nn_ratio(&copies_of_hold, &train, &hold).unwrap().prob_lt_1 < 0.01);
    let logs = |r: &[f64]| median(&r.iter().map(|x| x.ln()).collect::<Vec<_>>()).unwrap();
    let a = nn_ratio(&copies_of_train, &train, &hold).unwrap();
    let b = nn_ratio(&copies_of_train, &hold, &train).unwrap();
    assert!(logs(&a.ratios) < 0.0 && logs(&b.ratios) > 0.0);
}

#[test]
fn ks_permutation_test_is_calibrated_under_the_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 2000;
    let ps: Vec<f64> = (0..trials)
        .map(|_| {
            let a: Vec<f64> = (0..97).map(|_| rng.sample(StandardNormal)).collect();
            let b: Vec<f64> = (0..103).map(|_| rng.sample(StandardNormal)).collect();
            permutation_pvalue(&a, &b, 999, &mut rng).unwrap().1
        })
        .collect();
    let f = rejection_fraction(&ps, 0.05).unwrap();
    // Binomial 99% interval around 0.05 for 2000 trials.
    let half = 2.576 * (0.05 * 0.95 / trials as f64).sqrt();
    assert!((f - 0.05).abs() < half, "null rejection rate {f}");
}

fn random_symmetric(p: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut m = vec![0.0; p * p];
    for i in 0..p {
        for j in i + 1..p {
            let v: f64 = rng.gen();
            m[i * p + j] = v;
            m[j * p + i] = v;
        }
    }
    m
}

#[test]
fn mantel_rejects_rarely_for_independent_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let p = 10;
    let trials = 100;
    let rejections = (0..trials)
        .filter(|_| {
            let a = random_symmetric(p, &mut rng);
            let b = random_symmetric(p, &mut rng);
            mantel(&a, &b, p, 199, &mut rng).unwrap().p < 0.05
        })
        .count();
    assert!(rejections <= 12, "{rejections} of {trials} rejected");
    // A matrix against a monotone transform of itself is always significant.
    let a = random_symmetric(p, &mut rng);
    let b: Vec<f64> = a.iter().map(|v| v * v).collect();
    assert!(mantel(&a, &b, p, 199, &mut rng).unwrap().p < 0.01);
}

#[test]
fn shape_matrix_is_stable_across_resamples() {
    let cfg = SynthConfig::default();
    let draw = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(400_000);
        for _ in 0..100_000 {
            let age = rng.gen_range(65.0..80.0);
            let sg = diffnorm::synthgen::draw_subgroup(age, cfg.mixture_onset_age, &mut rng).unwrap_or(0);
            out.extend(sample_at(age, sg, cfg.skew_shape, &mut rng).unwrap());
        }
        Tensor::new(vec![100_000, 4], out).unwrap()
    };
    let pairs = all_pairs(4);
    let a = shape_matrix(&draw(1), &pairs).unwrap();
    let b = shape_matrix(&draw(2), &pairs).unwrap();
    let worst = a.matrix.iter().zip(&b.matrix).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 0.05, "max |C_a - C_b| = {worst}");
}
