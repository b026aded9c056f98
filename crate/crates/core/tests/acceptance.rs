//! Acceptance suite: one PASS/FAIL line per criterion, with the measured value
//! beside its pinned tolerance. Failures are reported but only fail the test
//! binary when `DAUNCE_ACCEPTANCE_STRICT=1`.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use daunce_core::attribution::{aggregate_over_queries, attribute_all, score};
use daunce_core::config::RunConfig;
use daunce_core::curvature::{exact_influence, linear_regression_influence, InfluenceOracle};
use daunce_core::ensemble::{run_blackbox_ensemble, run_ensemble, AnchorState, SimulatedModel};
use daunce_core::eval::{
    correlation_vs_covariance_report, fit_exponential, lds_ground_truth, lds_score, lds_sweep, null_lds, rank_position,
    removal_harness, spearman, unbiasedness_check, LdsConfig, LdsGroundTruth, RemovalConfig, RemovalMetric,
};
use daunce_core::model::{finite_diff_grad, margin_grad, per_example_grad, relative_error, Scalar};
use daunce_core::pipeline::{Command, Pipeline};
use daunce_core::rng::{stream, Purpose};
use daunce_core::synthetic::{generate_split, generate_synthetic, SyntheticRecipe};
use daunce_core::train::train_erm;
use daunce_core::{
    AccessMode, Activation, AttributionMatrix, Damping, Dataset, EnsembleConfig, Labels, LossMatrix, ModelSpec,
    ParamVector, SecondOrderKind, Target, TrainConfig, UncertaintyMeasure,
};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &str, limit: Duration, run: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = run();
    let took = start.elapsed();
    let pass = out.pass && took <= limit;
    println!(
        "{} {id:>2} {name:<28} {}  [{:.1}s / {}s]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64(),
        limit.as_secs()
    );
    pass
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

// ---- shared desk task ----

const N_TRAIN: usize = 300;
const N_QUERY: usize = 50;

fn full_batch(learning_rate: f64, steps: usize, seed: u64) -> TrainConfig {
    TrainConfig { learning_rate, steps, batch_size: N_TRAIN, momentum: 0.0, l2: 0.0, seed }
}

struct Desk {
    train: Dataset,
    queries: Dataset,
    spec: ModelSpec,
    anchor: ParamVector,
    lm: LossMatrix,
    oracle: AttributionMatrix,
}

impl Desk {
    fn build() -> Self {
        let recipe =
            SyntheticRecipe::GaussianBlobs { n: N_TRAIN, d: 10, classes: 3, separation: 0.5, noise: 1.0, seed: 7 };
        let (train, queries) = generate_split(&recipe, N_QUERY).unwrap();
        let spec = ModelSpec::SoftmaxRegression { input_dim: 10, num_classes: 3 };
        let anchor = train_erm(&train, &spec, &full_batch(0.5, 400, 1)).unwrap().params;
        let cfg = ensemble_config(1.0, AccessMode::WhiteBox);
        let lm = white_box(&train, &queries, &spec, &anchor, &cfg);
        let influence = InfluenceOracle::new(SecondOrderKind::Hessian, &spec, &anchor, &train, Damping::default())
            .unwrap()
            .matrix(&train, &queries)
            .unwrap();
        let oracle = AttributionMatrix {
            scores: influence,
            train_ids: train.ids().to_vec(),
            query_ids: queries.ids().to_vec(),
            measure: UncertaintyMeasure::Covariance,
            threshold: None,
            degenerate_columns: Vec::new(),
        };
        Desk { train, queries, spec, anchor, lm, oracle }
    }

    fn lds_truth(&self) -> LdsGroundTruth {
        let cfg = LdsConfig {
            alpha: 0.5,
            subsets: 200,
            seeds_per_subset: 3,
            output_measure: None,
            retrain: full_batch(0.5, 400, 3),
            seed: 5,
        };
        lds_ground_truth(&self.train, &self.queries, &self.spec, &cfg).unwrap()
    }
}

fn ensemble_config(r: f64, access: AccessMode) -> EnsembleConfig {
    EnsembleConfig {
        k: 200,
        r,
        kind: SecondOrderKind::Hessian,
        access,
        use_logits_form: false,
        train: full_batch(0.5, 50, 2),
        master_seed: 11,
        exact_solve: false,
    }
}

fn white_box(train: &Dataset, queries: &Dataset, spec: &ModelSpec, anchor: &ParamVector, cfg: &EnsembleConfig) -> LossMatrix {
    let state = AnchorState::build(spec, anchor, train, cfg.kind, AccessMode::WhiteBox, cfg.use_logits_form).unwrap();
    run_ensemble(train, queries, spec, &state, cfg).unwrap()
}

fn flatten(m: &[Vec<f64>]) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}

fn totals(am: &AttributionMatrix) -> Vec<f64> {
    aggregate_over_queries(am).unwrap().into_iter().map(|(_, t)| t).collect()
}

// ---- criteria ----

fn c1_gradient_fidelity() -> Outcome {
    let mut worst = [0.0f64; 3];
    for case in 0..100u64 {
        let mut rng = stream(case, Purpose::MonteCarlo, 1);
        let d = rng.random_range(1..8);
        let c = rng.random_range(2..6);
        let hidden: Vec<usize> = (0..rng.random_range(1..3)).map(|_| rng.random_range(1..6)).collect();
        let mut layers = vec![d];
        layers.extend(hidden);
        layers.push(c);
        let activation = if case % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let specs = [
            (ModelSpec::LinearRegression { input_dim: d }, Target::Real(rng.random_range(-3.0..3.0))),
            (ModelSpec::SoftmaxRegression { input_dim: d, num_classes: c }, Target::Class(rng.random_range(0..c))),
            (ModelSpec::Mlp { layer_sizes: layers, activation }, Target::Class(rng.random_range(0..c))),
        ];
        for (slot, (spec, y)) in specs.iter().enumerate() {
            let params = ParamVector((0..spec.num_params()).map(|_| rng.random_range(-1.5..1.5)).collect());
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            let ex = daunce_core::Example { x: &x, y: *y };
            let fd = finite_diff_grad(spec, &params, ex, 1e-5, Scalar::Loss).unwrap();
            let mut err = relative_error(&per_example_grad(spec, &params, ex).unwrap(), &fd);
            if spec.is_classification() {
                let fd = finite_diff_grad(spec, &params, ex, 1e-5, Scalar::Margin).unwrap();
                err = err.max(relative_error(&margin_grad(spec, &params, ex).unwrap(), &fd));
            }
            worst[slot] = worst[slot].max(err);
        }
    }
    Outcome {
        pass: worst.iter().all(|&e| e <= 1e-5),
        detail: format!(
            "max rel err linear {:.1e}, softmax {:.1e}, mlp {:.1e} (<= 1e-5)",
            worst[0], worst[1], worst[2]
        ),
    }
}

fn c2_closed_form() -> Outcome {
    let mut worst: f64 = 0.0;
    for s in 0..20u64 {
        let mut rng = stream(s, Purpose::MonteCarlo, 2);
        let d = rng.random_range(1..5);
        let n = rng.random_range(d + 3..20);
        let train = generate_synthetic(&SyntheticRecipe::LinearNoise { n, d, noise: 0.5, seed: s }).unwrap();
        let spec = ModelSpec::LinearRegression { input_dim: d };
        let params = ParamVector((0..d).map(|_| rng.random_range(-1.0..1.0)).collect());
        let lambda = if s % 2 == 0 { 0.0 } else { rng.random_range(0.01..0.5) };
        let oracle = InfluenceOracle::new(SecondOrderKind::Hessian, &spec, &params, &train, Damping::Absolute(lambda)).unwrap();
        for i in 0..n {
            for j in 0..n {
                let closed = linear_regression_influence(&train, &params, i, train.example(j), lambda).unwrap();
                let general = oracle.influence(train.example(i), train.example(j)).unwrap();
                worst = worst.max((closed - general).abs() / closed.abs().max(1.0));
            }
        }
    }
    let rows = [vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]];
    let hand = Dataset::from_rows(&rows, Labels::Real(vec![1.0, 1.0, 0.0]), 1).unwrap();
    let zero = ParamVector(vec![0.0, 0.0]);
    let cross = linear_regression_influence(&hand, &zero, 0, hand.example(1), 0.0).unwrap();
    let own = linear_regression_influence(&hand, &zero, 0, hand.example(0), 0.0).unwrap();
    let spec = ModelSpec::LinearRegression { input_dim: 2 };
    let general = exact_influence(SecondOrderKind::Hessian, &spec, &zero, &hand, 0, hand.example(1), Damping::Absolute(0.0)).unwrap();
    let hand_ok = (cross + 1.0 / 3.0).abs() <= 1e-12 && (own - 2.0 / 3.0).abs() <= 1e-12 && (general + 1.0 / 3.0).abs() <= 1e-12;
    Outcome {
        pass: worst <= 1e-10 && hand_ok,
        detail: format!("max gap {worst:.1e} (<= 1e-10); hand instance I(1,2) = {cross:.15}, I(1,1) = {own:.15}"),
    }
}

fn c3_unbiasedness() -> Outcome {
    let spec1 = ModelSpec::LinearRegression { input_dim: 1 };
    let location = Dataset::from_rows(&[vec![1.0], vec![1.0]], Labels::Real(vec![0.0, 2.0]), 0).unwrap();
    let one = unbiasedness_check(&spec1, &location, 0, 5000, 21).unwrap();
    let train = generate_synthetic(&SyntheticRecipe::LinearNoise { n: 30, d: 5, noise: 0.5, seed: 23 }).unwrap();
    let spec5 = ModelSpec::LinearRegression { input_dim: 5 };
    let five = unbiasedness_check(&spec5, &train, 0, 5000, 22).unwrap();
    Outcome {
        pass: one.relative_error <= 0.05 && (one.target - 1.0 / 6.0).abs() < 1e-12 && five.relative_error <= 0.10,
        detail: format!(
            "1D {:.5} vs 1/6 rel {:.2}% (<= 5%); 5D {:.4e} vs {:.4e} rel {:.2}% (<= 10%); exact-loss 1D {:.5} (second-order target 127/720 = {:.5})",
            one.first_order,
            one.relative_error * 100.0,
            five.first_order,
            five.target,
            five.relative_error * 100.0,
            one.exact_loss,
            127.0 / 720.0
        ),
    }
}

fn c4_oracle_agreement(desk: &Desk) -> Outcome {
    let oracle = InfluenceOracle::new(SecondOrderKind::Hessian, &desk.spec, &desk.anchor, &desk.train, Damping::default()).unwrap();
    let ens_self: Vec<f64> = (0..N_TRAIN).map(|i| score(&desk.lm, i, i, UncertaintyMeasure::Covariance).unwrap()).collect();
    let oracle_self: Vec<f64> =
        (0..N_TRAIN).map(|i| oracle.influence(desk.train.example(i), desk.train.example(i)).unwrap()).collect();
    let rho_self = spearman(&ens_self, &oracle_self).unwrap();
    let cov = attribute_all(&desk.lm, UncertaintyMeasure::Covariance, None).unwrap();
    let rho_block = spearman(&flatten(&cov.scores), &flatten(&desk.oracle.scores)).unwrap();
    // To first order the covariance tracks g_iᵀ H⁻¹ F H⁻¹ g_q, which departs
    // from the influence g_iᵀ H⁻¹ g_q wherever F differs from H.
    let sandwich = sandwich_block(desk, &oracle);
    let rho_sandwich = spearman(&flatten(&cov.scores), &flatten(&sandwich)).unwrap();
    let rho_ceiling = spearman(&flatten(&sandwich), &flatten(&desk.oracle.scores)).unwrap();
    Outcome {
        pass: rho_self >= 0.9 && rho_block >= 0.8,
        detail: format!(
            "self-influence rho {rho_self:.4} (>= 0.9); 300x50 block rho {rho_block:.4} (>= 0.8); \
             info: block vs H^-1 F H^-1 rho {rho_sandwich:.4}, H^-1 F H^-1 vs influence rho {rho_ceiling:.4}"
        ),
    }
}

/// `(1/n) g_iᵀ H⁻¹ F H⁻¹ g_q` with `F = (1/n) Σ_j g_j g_jᵀ`.
fn sandwich_block(desk: &Desk, oracle: &InfluenceOracle<'_>) -> Vec<Vec<f64>> {
    let grads: Vec<Vec<f64>> = desk.train.examples().map(|ex| per_example_grad(&desk.spec, &desk.anchor, ex).unwrap()).collect();
    let n = grads.len() as f64;
    let project = |data: &Dataset| -> Vec<Vec<f64>> {
        data.examples()
            .map(|ex| {
                let w = oracle.whiten(&per_example_grad(&desk.spec, &desk.anchor, ex).unwrap()).unwrap();
                grads.iter().map(|g| g.iter().zip(&w).map(|(a, b)| a * b).sum()).collect()
            })
            .collect()
    };
    let (train, queries) = (project(&desk.train), project(&desk.queries));
    train
        .iter()
        .map(|a| queries.iter().map(|b| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>() / (n * n)).collect())
        .collect()
}

fn c5_lds(desk: &Desk, gt: &LdsGroundTruth) -> Outcome {
    let ours = lds_score(gt, &attribute_all(&desk.lm, UncertaintyMeasure::Correlation, None).unwrap()).unwrap();
    let exact = lds_score(gt, &desk.oracle).unwrap();
    let null = null_lds(gt, 20, 13).unwrap();
    let null_max = null.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Outcome {
        pass: ours.mean >= 0.5 * exact.mean && ours.mean > 0.2 && exact.mean > 0.2,
        detail: format!(
            "LDS {:.4} +/- {:.4}, oracle {:.4} (ratio {:.3} >= 0.5; both > 0.2); random null max |LDS| {:.4}",
            ours.mean,
            ours.std_error,
            exact.mean,
            ours.mean / exact.mean,
            null_max
        ),
    }
}

fn c6_blackbox(desk: &Desk) -> Outcome {
    let wb_cfg = ensemble_config(0.5, AccessMode::WhiteBox);
    let bb_cfg = ensemble_config(0.5, AccessMode::BlackBox);
    let wb = white_box(&desk.train, &desk.queries, &desk.spec, &desk.anchor, &wb_cfg);
    let handle = SimulatedModel::new(desk.spec.clone(), desk.anchor.clone()).unwrap();
    let bb = run_blackbox_ensemble(&handle, &desk.train, &desk.queries, &bb_cfg).unwrap();
    let measure = UncertaintyMeasure::Correlation;
    let rho = spearman(
        &totals(&attribute_all(&wb, measure, None).unwrap()),
        &totals(&attribute_all(&bb, measure, None).unwrap()),
    )
    .unwrap();
    Outcome { pass: rho >= 0.6, detail: format!("aggregated-total rho {rho:.4} (>= 0.6), r = 0.5, K = 200") }
}

fn c7_removal(desk: &Desk) -> Outcome {
    let am = attribute_all(&desk.lm, UncertaintyMeasure::Correlation, None).unwrap();
    let totals = aggregate_over_queries(&am).unwrap();
    let cfg = RemovalConfig {
        intervals: vec![N_TRAIN / 20, N_TRAIN / 10, N_TRAIN / 5],
        retrain: full_batch(0.5, 400, 3),
        metric: RemovalMetric::MeanQueryLoss,
        seeds: 3,
        seed: 6,
    };
    let report = removal_harness(&desk.train, &desk.queries, &desk.spec, &totals, &cfg).unwrap();
    let rows: Vec<String> = report
        .rows
        .iter()
        .map(|r| format!("N={} {:.4} vs random {:.4}", r.interval, r.metric_mean, r.random_baseline_mean))
        .collect();
    Outcome { pass: report.ranked_degrades_at_least_random(), detail: format!("query loss {}", rows.join(", ")) }
}

fn c8_measures() -> Outcome {
    let k = 8;
    let base: Vec<f64> = (0..k).map(|m| m as f64).collect();
    let wiggle = [0.3, -0.2, 0.1, -0.4, 0.2, 0.0, -0.1, 0.3];
    // columns: steady, steady, outlier, query
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|m| vec![base[m] + 0.1 * wiggle[m], base[m] - 0.2 * wiggle[m], 10.0 * base[m] + 8.0 * wiggle[(m + 3) % k], base[m]])
        .collect();
    let lm = LossMatrix::new(rows, vec![0, 1, 2, 100], 3, (0..k as u64).collect()).unwrap();
    let cov = attribute_all(&lm, UncertaintyMeasure::Covariance, None).unwrap();
    let cor = attribute_all(&lm, UncertaintyMeasure::Correlation, None).unwrap();
    let (rank_cov, rank_cor) = (rank_position(&cov, 0, 2), rank_position(&cor, 0, 2));

    let perms = [[0, 1, 2, 3, 4, 5], [5, 3, 1, 0, 2, 4], [2, 4, 0, 5, 1, 3], [1, 0, 3, 2, 5, 4], [4, 5, 2, 1, 3, 0]];
    let values = [0.4, 1.1, 1.9, 3.2, 3.3, 5.0];
    let homo: Vec<Vec<f64>> = (0..6).map(|m| perms.iter().map(|p| values[p[m]]).collect()).collect();
    let lm = LossMatrix::new(homo, vec![0, 1, 2, 10, 11], 3, (0..6).collect()).unwrap();
    let agreement = correlation_vs_covariance_report(&lm).unwrap().mean_agreement();
    Outcome {
        pass: rank_cor > rank_cov && agreement.is_some_and(|a| (a - 1.0).abs() < 1e-12),
        detail: format!("outlier rank covariance {rank_cov} vs correlation {rank_cor}; homoscedastic agreement {agreement:?}"),
    }
}

fn c9_scaling(desk: &Desk, gt: &LdsGroundTruth) -> Outcome {
    let xs = [1.0, 2.0, 5.0, 10.0, 20.0, 40.0, 80.0, 160.0];
    let ys: Vec<f64> = xs.iter().map(|x: &f64| -0.16 * (-0.085 * x).exp() + 0.16).collect();
    let fit = fit_exponential(&xs, &ys).unwrap();
    let recovered = (fit.a + 0.16).abs() <= 1e-6 && (fit.b - 0.085).abs() <= 1e-6 && (fit.c - 0.16).abs() <= 1e-6;
    let sweep = lds_sweep(gt, &desk.lm, &[5, 10, 20, 40, 80], UncertaintyMeasure::Correlation, None).unwrap();
    let points: Vec<String> = sweep.points.iter().map(|p| format!("K{} {:.3}+/-{:.3}", p.k, p.mean_lds, p.std_error)).collect();
    let monotone = sweep.nondecreasing_within_se();
    Outcome {
        pass: recovered && monotone,
        detail: format!(
            "fit ({:.7}, {:.7}, {:.7}); sweep {} monotone within SE: {monotone}",
            fit.a,
            fit.b,
            fit.c,
            points.join(" ")
        ),
    }
}

fn run_pipeline(config: &Path, out: &Path, workers: usize, commands: &[Command]) -> Vec<(PathBuf, Vec<u8>)> {
    let cfg = RunConfig::load(config).unwrap();
    let pipeline = Pipeline::new(cfg, Some(out.to_path_buf()), None).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
    for c in commands {
        pool.install(|| pipeline.run(c)).unwrap();
    }
    let mut files: Vec<(PathBuf, Vec<u8>)> = std::fs::read_dir(out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (PathBuf::from(p.file_name().unwrap()), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn c10_determinism(desk: &Desk) -> Outcome {
    let cfg = ensemble_config(1.0, AccessMode::WhiteBox);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let again = pool.install(|| white_box(&desk.train, &desk.queries, &desk.spec, &desk.anchor, &cfg));
    let ensemble_same = again.to_bytes() == desk.lm.to_bytes();

    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let chain = [
        Command::GenData,
        Command::Train,
        Command::Ensemble,
        Command::Attribute,
        Command::Oracle,
        Command::Lds { scores: None },
        Command::Removal { scores: None },
        Command::ScalingFit,
        Command::CheckGrads,
    ];
    let quadratic = [Command::GenData, Command::Train, Command::Ensemble, Command::Attribute, Command::Unbiasedness];
    let mut compared = 0;
    let mut all_same = ensemble_same;
    for (name, commands) in [("demo-softmax.json", &chain[..]), ("quadratic-demo.json", &quadratic[..])] {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let first = run_pipeline(&configs.join(name), a.path(), 1, commands);
        let second = run_pipeline(&configs.join(name), b.path(), 4, commands);
        compared += first.len();
        all_same &= first == second;
    }
    Outcome {
        pass: all_same,
        detail: format!("ensemble bytes equal across pools: {ensemble_same}; {compared} pipeline artifacts byte-identical: {all_same}"),
    }
}

fn main() {
    let mut results = vec![
        report(1, "gradient fidelity", secs(10), c1_gradient_fidelity),
        report(2, "closed-form consistency", secs(1), c2_closed_form),
        report(3, "unbiasedness", secs(30), c3_unbiasedness),
    ];
    let start = Instant::now();
    let desk = Desk::build();
    let desk_time = start.elapsed();
    println!("     desk task: anchor, K = 200 ensemble and oracle in {:.1}s", desk_time.as_secs_f64());
    results.push(report(4, "oracle agreement", secs(300) - desk_time, || c4_oracle_agreement(&desk)));
    let start = Instant::now();
    let gt = desk.lds_truth();
    let gt_time = start.elapsed();
    println!("     LDS ground truth (M = 200, S = 3) in {:.1}s", gt_time.as_secs_f64());
    results.push(report(5, "LDS sanity", secs(900) - gt_time - desk_time, || c5_lds(&desk, &gt)));
    results.push(report(6, "black-box degradation", secs(300), || c6_blackbox(&desk)));
    results.push(report(7, "removal directionality", secs(600), || c7_removal(&desk)));
    results.push(report(8, "correlation vs covariance", secs(1), c8_measures));
    results.push(report(9, "scaling fit", secs(1200) - gt_time - desk_time, || c9_scaling(&desk, &gt)));
    results.push(report(10, "determinism", secs(600), || c10_determinism(&desk)));
    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 && std::env::var("DAUNCE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
