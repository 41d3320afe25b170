//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tabsurv::dataset::{load_csv, stratified_split, FeatureKind, Schema, SplitSpec, SurvivalDataset};
use tabsurv::metrics::{
    cumulative_dynamic_auc, default_auc_times, harrell_cindex, kaplan_meier, ks_statistic, rank_models, score_curves,
    brier_score, Direction, StepFunction,
};
use tabsurv::models::{
    weibull_discretize, BackboneSpec, EmbeddingSpec, HeadKind, ModelSpec, SurvivalNet, WeibullParams,
};
use tabsurv::nn::{gradient_check, Activation};
use tabsurv::orchestration::{
    evaluate, evaluate_with, prepare_raw, run_experiment, run_experiment_on, train, write_experiment, DataSource,
    ExperimentPlan, ModelEntry, SimulationSource, SweepSpec, TrainConfig,
};
use tabsurv::simulation::{generate, generate_synthetic, SimConfig, SYNTHETIC_DIM};
use tabsurv::survhl::{survhl_batch, survhl_row, SurvHLConfig};
use tabsurv::timegrid::{probs_to_survival, DiscreteSurvival, TimeGrid};

// Criterion 1
const GRAD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: usize = 20;
const GRAD_BUDGET: Duration = Duration::from_secs(10);
// Criterion 2
const CURVE_PREDICTIONS: usize = 100_000;
const CURVE_TOL: f64 = 1e-6;
const CURVE_BUDGET: Duration = Duration::from_secs(30);
// Criterion 3
const ORACLE_INSTANCES: usize = 100;
const ORACLE_MAX_N: usize = 20;
const RANDOM_N: usize = 1000;
const RANDOM_SEEDS: u64 = 10;
const RANDOM_BAND: (f64, f64) = (0.45, 0.55);
// Criterion 4
const DEGENERACY_TOL: f64 = 1e-9;
// Criterion 5
const WAS_INSTANCES: usize = 100;
const WAS_TOL: f64 = 1e-9;
// Criterion 6
const SURVHL_TOL: f64 = 1e-12;
// Criterion 7
const SIM_KS_N: usize = 100_000;
const SIM_KS_MAX: f64 = 0.01;
const SIM_RATE_N: usize = 10_000;
const SIM_RATE_TOL: f64 = 0.02;
// Criterion 8
const BIMODAL_N: usize = 2982;
const BIMODAL_CENSORING: f64 = 0.2;
const BIMODAL_SEEDS: u64 = 10;
const BIMODAL_BUDGET: Duration = Duration::from_secs(30 * 60);
// Criterion 9
const GBSG2_SEEDS: usize = 5;
const GBSG2_MIN_CINDEX: f64 = 0.66;
const GBSG2_MAX_IBS: f64 = 0.20;
const GBSG2_BUDGET: Duration = Duration::from_secs(10 * 60);
// Criterion 10
const SWEEP_FRACTIONS: [f64; 4] = [0.25, 0.5, 0.75, 1.0];
const SWEEP_R: [u32; 3] = [1, 3, 5];
const SWEEP_MAX_SPREAD: f64 = 0.05;

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    println!("{} criterion {id} ({name}): {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn random_simplex(rng: &mut impl Rng, m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn random_grid(rng: &mut impl Rng, m: usize) -> TimeGrid {
    let mut t = 0.0;
    TimeGrid::new(
        (0..m)
            .map(|_| {
                t += rng.random_range(0.1..1.0);
                t
            })
            .collect(),
    )
    .unwrap()
}

fn mixed_dataset(rng: &mut impl Rng, n: usize) -> SurvivalDataset {
    let features = Array2::from_shape_fn((n, 3), |(_, j)| {
        if j == 2 {
            f64::from(u8::from(rng.random_bool(0.5)))
        } else {
            rng.random_range(-2.0..2.0)
        }
    });
    let times = (0..n).map(|_| rng.random_range(0.2..5.0)).collect();
    let events = (0..n).map(|_| rng.random_bool(0.7)).collect();
    let mut ds = SurvivalDataset::from_numeric(features, times, events, vec!["a".into(), "b".into(), "c".into()]).unwrap();
    ds.feature_kinds[2] = FeatureKind::OneHot;
    ds
}

fn tiny_spec(head: HeadKind, members: usize) -> ModelSpec {
    ModelSpec {
        head,
        n_members: members,
        backbone: BackboneSpec {
            n_blocks: 2,
            hidden: 4,
            activation: Activation::Silu,
            layer_norm: true,
            dropout: 0.0,
        },
        embedding: Some(EmbeddingSpec {
            bins: 3,
            width: 2,
            activation: false,
        }),
    }
}

fn members_for(head: HeadKind, k: usize) -> usize {
    if head == HeadKind::Ls {
        1
    } else {
        k
    }
}

const HEADS: [HeadKind; 4] = [HeadKind::Ls, HeadKind::Las, HeadKind::Wsa, HeadKind::Was];

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for head in HEADS {
        for r in [1u32, 3, 5] {
            let cfg = SurvHLConfig::new(r).unwrap();
            for inst in 0..GRAD_INSTANCES {
                let data = mixed_dataset(&mut rng, 4);
                let m = rng.random_range(3..8);
                let grid = random_grid(&mut rng, m);
                let idxs: Vec<usize> = data.times.iter().map(|&t| grid.interval_index(t)).collect();
                let mut net = SurvivalNet::new(tiny_spec(head, members_for(head, 2)), &data, &grid, 1.5, rng.random()).unwrap();
                net.batch_loss(data.features.view(), &idxs, &data.events, &grid, &cfg, None, true).unwrap();
                let probe = net.clone();
                let x = data.features.clone();
                let report = gradient_check(
                    &mut |s| {
                        let mut n = probe.clone();
                        n.store = s.clone();
                        n.batch_loss(x.view(), &idxs, &data.events, &grid, &cfg, None, false).unwrap()
                    },
                    &mut net.store,
                    GRAD_H,
                    GRAD_TOL,
                    inst as u64,
                );
                worst = worst.max(report.max_rel_error);
                checks += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "gradient correctness",
        worst < GRAD_TOL && elapsed < GRAD_BUDGET,
        &format!("{checks} instances, max relative error {worst:.2e} (< {GRAD_TOL:.0e}), {:.2}s", elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_02_curve_validity() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let per_head = CURVE_PREDICTIONS / HEADS.len();
    let nets_per_head = 5;
    let rows = per_head / nets_per_head;
    let mut checked = 0;
    let mut violations = 0;
    for head in HEADS {
        for _ in 0..nets_per_head {
            let data = mixed_dataset(&mut rng, 40);
            let m = rng.random_range(2..60);
            let grid = random_grid(&mut rng, m);
            let mut net = SurvivalNet::new(tiny_spec(head, members_for(head, 4)), &data, &grid, 2.0, rng.random()).unwrap();
            // widen the weights so the curves reach extreme shapes
            let scale = rng.random_range(1.0..6.0);
            for p in net.store.params_mut() {
                p.value.mapv_inplace(|v| v * scale);
            }
            let x = Array2::from_shape_fn((rows, 3), |(_, j)| {
                if j == 2 {
                    f64::from(u8::from(rng.random_bool(0.5)))
                } else {
                    rng.random_range(-6.0..6.0)
                }
            });
            for curve in net.predict(x.view(), &grid).unwrap() {
                checked += 1;
                if curve.check(CURVE_TOL).is_err() {
                    violations += 1;
                }
            }
        }
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        "curve validity",
        violations == 0 && checked == CURVE_PREDICTIONS && elapsed < CURVE_BUDGET,
        &format!("{checked} curves, {violations} violations at tol {CURVE_TOL:.0e}, {:.2}s", elapsed.as_secs_f64()),
    );
}

// Brute-force oracles, written without reference to the library code paths.

fn oracle_cindex(pred: &[f64], times: &[f64], events: &[bool]) -> Option<f64> {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for i in 0..times.len() {
        for j in 0..times.len() {
            if events[i] && times[i] < times[j] {
                pairs += 1.0;
                if pred[i] < pred[j] {
                    num += 1.0;
                } else if pred[i] == pred[j] {
                    num += 0.5;
                }
            }
        }
    }
    (pairs > 0.0).then(|| num / pairs)
}

/// Product-limit value at `t` (or just before `t` when `left`).
fn oracle_km(times: &[f64], events: &[bool], t: f64, left: bool) -> f64 {
    let mut jumps: Vec<f64> = times.iter().zip(events).filter(|(_, e)| **e).map(|(s, _)| *s).collect();
    jumps.sort_by(f64::total_cmp);
    jumps.dedup();
    let mut s = 1.0;
    for &u in &jumps {
        if u > t || (left && u == t) {
            break;
        }
        let at_risk = times.iter().filter(|&&x| x >= u).count();
        let d = times.iter().zip(events).filter(|(x, e)| **e && **x == u).count();
        s *= 1.0 - d as f64 / at_risk as f64;
    }
    s
}

fn oracle_survival(curve: &DiscreteSurvival, grid: &TimeGrid, t: f64) -> f64 {
    let mut idx = 0;
    for (i, &tau) in grid.taus().iter().enumerate() {
        if tau <= t {
            idx = i + 1;
        }
    }
    if idx == 0 {
        1.0
    } else {
        curve.survival[idx - 1]
    }
}

fn oracle_brier(
    curves: &[DiscreteSurvival],
    grid: &TimeGrid,
    times: &[f64],
    events: &[bool],
    censored: &[bool],
    t: f64,
) -> Option<f64> {
    let g_t = oracle_km(times, censored, t, false);
    if g_t <= 0.0 {
        return None;
    }
    let mut total = 0.0;
    for i in 0..times.len() {
        let s = oracle_survival(&curves[i], grid, t);
        if times[i] <= t && events[i] {
            total += s * s / oracle_km(times, censored, times[i], true);
        } else if times[i] > t {
            total += (1.0 - s) * (1.0 - s) / g_t;
        }
    }
    Some(total / times.len() as f64)
}

fn oracle_auc(
    curves: &[DiscreteSurvival],
    grid: &TimeGrid,
    times: &[f64],
    events: &[bool],
    censored: &[bool],
    t: f64,
) -> Option<f64> {
    let n = times.len();
    let controls: Vec<usize> = (0..n).filter(|&j| times[j] > t).collect();
    if controls.is_empty() {
        return None;
    }
    let risk = |i: usize| 1.0 - oracle_survival(&curves[i], grid, t);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..n {
        if !(events[i] && times[i] <= t) {
            continue;
        }
        let g = oracle_km(times, censored, times[i], true);
        if g <= 0.0 {
            continue;
        }
        let w = 1.0 / g;
        let mut count = 0.0;
        for &j in &controls {
            if risk(i) > risk(j) {
                count += 1.0;
            } else if risk(i) == risk(j) {
                count += 0.5;
            }
        }
        num += w * count;
        den += w;
    }
    (den > 0.0).then(|| num / (den * controls.len() as f64))
}

fn oracle_ranks(values: &[Vec<f64>], higher_better: bool) -> (Vec<f64>, Vec<f64>) {
    let n_models = values.len();
    let runs = values[0].len();
    let mut ranks = vec![vec![0.0; runs]; n_models];
    for r in 0..runs {
        for m in 0..n_models {
            let better = (0..n_models)
                .filter(|&o| {
                    if higher_better {
                        values[o][r] > values[m][r]
                    } else {
                        values[o][r] < values[m][r]
                    }
                })
                .count();
            let tied = (0..n_models).filter(|&o| o != m && values[o][r] == values[m][r]).count();
            ranks[m][r] = 1.0 + better as f64 + 0.5 * tied as f64;
        }
    }
    let mean: Vec<f64> = ranks.iter().map(|v| v.iter().sum::<f64>() / runs as f64).collect();
    let std = ranks
        .iter()
        .zip(&mean)
        .map(|(v, m)| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / runs as f64).sqrt())
        .collect();
    (mean, std)
}

struct Instance {
    times: Vec<f64>,
    events: Vec<bool>,
    censored: Vec<bool>,
    preds: Vec<f64>,
    grid: TimeGrid,
    curves: Vec<DiscreteSurvival>,
}

fn small_instance(rng: &mut impl Rng) -> Instance {
    let n = rng.random_range(2..=ORACLE_MAX_N);
    let times: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(1u8..9))).collect();
    let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
    let censored = events.iter().map(|e| !e).collect();
    let preds = (0..n).map(|_| f64::from(rng.random_range(0u8..6))).collect();
    let m = rng.random_range(2..8);
    let mut taus: Vec<f64> = (0..m).map(|_| f64::from(rng.random_range(1u8..10))).collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    if taus.len() < 2 {
        taus = vec![2.0, 6.0];
    }
    let grid = TimeGrid::new(taus).unwrap();
    let curves = (0..n)
        .map(|_| {
            // coarse probabilities so risk ties occur
            let mut w: Vec<f64> = (0..grid.len()).map(|_| f64::from(rng.random_range(0u8..3))).collect();
            if w.iter().sum::<f64>() == 0.0 {
                w[0] = 1.0;
            }
            let s: f64 = w.iter().sum();
            probs_to_survival(&w.iter().map(|v| v / s).collect::<Vec<_>>()).unwrap()
        })
        .collect();
    Instance {
        times,
        events,
        censored,
        preds,
        grid,
        curves,
    }
}

#[test]
fn criterion_03_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut mismatches = Vec::new();
    let (mut n_c, mut n_km, mut n_bs, mut n_auc, mut n_rank) = (0, 0, 0, 0, 0);
    while n_c < ORACLE_INSTANCES || n_km < ORACLE_INSTANCES || n_bs < ORACLE_INSTANCES || n_auc < ORACLE_INSTANCES {
        let inst = small_instance(&mut rng);
        // C-index
        match (harrell_cindex(&inst.preds, &inst.times, &inst.events), oracle_cindex(&inst.preds, &inst.times, &inst.events)) {
            (Ok(a), Some(b)) => {
                n_c += 1;
                if a != b {
                    mismatches.push(format!("cindex {a} vs {b}"));
                }
            }
            (Err(_), None) => {}
            (a, b) => mismatches.push(format!("cindex definedness {a:?} vs {b:?}")),
        }
        // Kaplan-Meier at every observed time and its left limit
        let km: StepFunction = kaplan_meier(&inst.times, &inst.events).unwrap();
        n_km += 1;
        for &t in inst.times.iter().chain(&[0.5, 9.5]) {
            if km.eval(t) != oracle_km(&inst.times, &inst.events, t, false)
                || km.eval_left(t) != oracle_km(&inst.times, &inst.events, t, true)
            {
                mismatches.push(format!("KM at {t}"));
            }
        }
        // Brier score
        let g = kaplan_meier(&inst.times, &inst.censored).unwrap();
        let t = f64::from(rng.random_range(1u8..9)) + rng.random_range(0.0..1.0);
        match (
            brier_score(&inst.curves, &inst.grid, &inst.times, &inst.events, &g, t),
            oracle_brier(&inst.curves, &inst.grid, &inst.times, &inst.events, &inst.censored, t),
        ) {
            (Ok(a), Some(b)) => {
                n_bs += 1;
                if a != b {
                    mismatches.push(format!("brier {a} vs {b}"));
                }
            }
            (Err(_), None) => {}
            (a, b) => mismatches.push(format!("brier definedness {a:?} vs {b:?}")),
        }
        // AUC(t)
        let t = f64::from(rng.random_range(1u8..8)) + rng.random_range(0.0..1.0);
        match (
            cumulative_dynamic_auc(&inst.curves, &inst.grid, &inst.times, &inst.events, &g, &[t]),
            oracle_auc(&inst.curves, &inst.grid, &inst.times, &inst.events, &inst.censored, t),
        ) {
            (Ok(a), Some(b)) => {
                n_auc += 1;
                if a.per_time[0].1 != b {
                    mismatches.push(format!("auc {} vs {b}", a.per_time[0].1));
                }
            }
            (Err(_), None) => {}
            (a, b) => mismatches.push(format!("auc definedness {a:?} vs {b:?}")),
        }
    }
    while n_rank < ORACLE_INSTANCES {
        let models = rng.random_range(2..6);
        let runs = rng.random_range(1..6);
        let values: Vec<Vec<f64>> = (0..models)
            .map(|_| (0..runs).map(|_| f64::from(rng.random_range(0u8..4)) / 4.0).collect())
            .collect();
        let higher = rng.random_bool(0.5);
        let dir = if higher { Direction::HigherIsBetter } else { Direction::LowerIsBetter };
        let got = rank_models(&values, dir).unwrap();
        let (mean, std) = oracle_ranks(&values, higher);
        if got.mean != mean || got.std != std {
            mismatches.push(format!("ranks {:?} vs {mean:?}", got.mean));
        }
        n_rank += 1;
    }

    // label-independent random predictions
    let mut band = Vec::new();
    for seed in 0..RANDOM_SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let times: Vec<f64> = (0..RANDOM_N).map(|_| rng.random_range(0.1..10.0)).collect();
        let events: Vec<bool> = (0..RANDOM_N).map(|_| rng.random_bool(0.7)).collect();
        let censored: Vec<bool> = events.iter().map(|e| !e).collect();
        let preds: Vec<f64> = (0..RANDOM_N).map(|_| rng.random()).collect();
        let c = harrell_cindex(&preds, &times, &events).unwrap();
        let grid = TimeGrid::new((1..=40).map(|i| f64::from(i) * 0.25).collect()).unwrap();
        let curves: Vec<DiscreteSurvival> =
            (0..RANDOM_N).map(|_| probs_to_survival(&random_simplex(&mut rng, 40)).unwrap()).collect();
        let g = kaplan_meier(&times, &censored).unwrap();
        let eval_times = default_auc_times(&times, &events).unwrap();
        let auc = cumulative_dynamic_auc(&curves, &grid, &times, &events, &g, &eval_times).unwrap().integrated;
        band.push((c, auc));
    }
    let in_band = |v: f64| v >= RANDOM_BAND.0 && v <= RANDOM_BAND.1;
    let band_ok = band.iter().all(|&(c, a)| in_band(c) && in_band(a));
    let (lo, hi) = band
        .iter()
        .flat_map(|&(c, a)| [c, a])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    verdict(
        3,
        "metric oracles",
        mismatches.is_empty() && band_ok,
        &format!(
            "exact agreement on {n_c} C-index / {n_km} KM / {n_bs} Brier / {n_auc} AUC / {n_rank} rank instances \
             ({} mismatches{}); random C-index and AUC in [{lo:.3}, {hi:.3}]",
            mismatches.len(),
            mismatches.first().map_or(String::new(), |m| format!(", first: {m}")),
        ),
    );
}

fn copy_member_zero(net: &mut SurvivalNet) {
    let sources: Vec<(String, Array2<f64>)> = net
        .store
        .params()
        .iter()
        .filter_map(|p| p.name.strip_prefix("member0.").map(|rest| (rest.to_string(), p.value.clone())))
        .collect();
    for p in net.store.params_mut() {
        if let Some((k, rest)) = p.name.strip_prefix("member").and_then(|s| s.split_once('.')) {
            if k != "0" {
                let src = &sources.iter().find(|(name, _)| name == rest).unwrap().1;
                p.value.assign(src);
            }
        }
    }
}

fn small_train_config(head: HeadKind, members: usize) -> TrainConfig {
    TrainConfig {
        head,
        n_blocks: 1,
        hidden: 32,
        n_members: members,
        activation: Activation::Relu,
        dropout: 0.0,
        embedding: Some(EmbeddingSpec {
            bins: 16,
            width: 8,
            activation: false,
        }),
        grid_fraction: 0.25,
        learning_rate: 3e-3,
        batch_size: 64,
        max_epochs: 20,
        patience: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn criterion_04_degeneracy_equivalences() {
    let sim = generate_synthetic(
        800,
        SYNTHETIC_DIM,
        &SimConfig {
            seed: 44,
            ..SimConfig::default()
        },
    )
    .unwrap();
    let (tr, va, te) = stratified_split(&sim.data, &SplitSpec::protocol_default(44)).unwrap();

    let ls = small_train_config(HeadKind::Ls, 1);
    let las = TrainConfig {
        head: HeadKind::Las,
        ..ls
    };
    let (b_ls, _) = train(&tr, Some(&va), &ls).unwrap();
    let (b_las, _) = train(&tr, Some(&va), &las).unwrap();
    let m_ls = evaluate(&b_ls, &te).unwrap();
    let m_las = evaluate(&b_las, &te).unwrap();
    let diff = |a: &tabsurv::metrics::MetricReport, b: &tabsurv::metrics::MetricReport| {
        (a.c_index - b.c_index)
            .abs()
            .max((a.ibs - b.ibs).abs())
            .max((a.integrated_auc - b.integrated_auc).abs())
    };
    let d_logit = diff(&m_ls, &m_las);

    let (mut b_w, _) = train(&tr, Some(&va), &small_train_config(HeadKind::Was, 4)).unwrap();
    copy_member_zero(&mut b_w.net);
    let mut b_wsa = b_w.clone();
    b_wsa.net.spec.head = HeadKind::Wsa;
    let m_was = evaluate(&b_w, &te).unwrap();
    let m_wsa = evaluate(&b_wsa, &te).unwrap();
    let d_weibull = diff(&m_was, &m_wsa);
    let c_was = b_w.predict(te.features.view()).unwrap();
    let c_wsa = b_wsa.predict(te.features.view()).unwrap();
    let d_curve = c_was
        .iter()
        .zip(&c_wsa)
        .flat_map(|(a, b)| a.survival.iter().zip(&b.survival).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);

    verdict(
        4,
        "degeneracy equivalences",
        d_logit <= DEGENERACY_TOL && d_weibull <= DEGENERACY_TOL && d_curve <= DEGENERACY_TOL,
        &format!("LS vs LAS(k=1) metric diff {d_logit:.1e}; WSA vs WAS metric diff {d_weibull:.1e}, curve diff {d_curve:.1e}"),
    );
}

#[test]
fn criterion_05_was_weibull_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst: f64 = 0.0;
    let mut worst_params: f64 = 0.0;
    let mut done = 0;
    while done < WAS_INSTANCES {
        let data = mixed_dataset(&mut rng, 20);
        // log-spaced grid around the time scale
        let m = rng.random_range(6..30);
        let lo: f64 = rng.random_range(-3.0..-1.0);
        let hi: f64 = rng.random_range(1.0..3.0);
        let taus: Vec<f64> = (0..m).map(|i| (lo + (hi - lo) * i as f64 / (m - 1) as f64).exp()).collect();
        let grid = TimeGrid::new(taus.clone()).unwrap();
        let net = SurvivalNet::new(tiny_spec(HeadKind::Was, rng.random_range(2..6)), &data, &grid, 1.0, rng.random()).unwrap();
        let x = Array2::from_shape_fn((1, 3), |_| rng.random_range(-2.0..2.0));
        let curve = &net.predict_was(x.view(), &grid).unwrap()[0];
        // S_i = exp(-(tau_{i+1}/lambda)^k) for i < m
        let z: Vec<(f64, f64)> = (0..m - 1)
            .map(|i| (taus[i + 1], -curve.survival[i].ln()))
            .filter(|&(_, z)| (0.05..=20.0).contains(&z))
            .collect();
        if z.len() < 2 {
            continue;
        }
        let (ta, za) = z[0];
        let (tb, zb) = z[z.len() - 1];
        let k = (zb / za).ln() / (tb / ta).ln();
        let lambda = ta / za.powf(1.0 / k);
        let rebuilt = weibull_discretize(&WeibullParams::new(lambda, k).unwrap(), &grid).unwrap();
        for (a, b) in rebuilt.survival.iter().zip(&curve.survival) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in rebuilt.probs.iter().zip(&curve.probs) {
            worst = worst.max((a - b).abs());
        }
        let members = net.member_weibull_params(x.view()).unwrap();
        let mean_scale = members.iter().map(|p| p[0].scale).sum::<f64>() / members.len() as f64;
        let mean_shape = members.iter().map(|p| p[0].shape).sum::<f64>() / members.len() as f64;
        worst_params = worst_params
            .max(((lambda - mean_scale) / mean_scale).abs())
            .max(((k - mean_shape) / mean_shape).abs());
        done += 1;
    }
    verdict(
        5,
        "WAS Weibull shape",
        worst <= WAS_TOL,
        &format!(
            "{done} instances, max curve error {worst:.1e}; reconstructed parameters match the member means to {worst_params:.1e} relative"
        ),
    );
}

#[test]
fn criterion_06_survhl_reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst_delta: f64 = 0.0;
    let mut worst_uniform: f64 = 0.0;
    let delta = SurvHLConfig::delta();
    for _ in 0..1000 {
        let m = rng.random_range(2..40);
        let n = rng.random_range(1..10);
        let curves: Vec<DiscreteSurvival> =
            (0..n).map(|_| probs_to_survival(&random_simplex(&mut rng, m)).unwrap()).collect();
        let idxs: Vec<usize> = (0..n).map(|_| rng.random_range(0..=m)).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        let loss = survhl_batch(&curves, &idxs, &events, &delta).unwrap().loss;
        let likelihood = (0..n)
            .map(|i| {
                let c = &curves[i];
                if events[i] {
                    -c.probs[idxs[i].max(1) - 1].max(1e-12).ln()
                } else if idxs[i] == 0 {
                    0.0
                } else {
                    -c.survival[idxs[i] - 1].max(1e-12).ln()
                }
            })
            .sum::<f64>()
            / n as f64;
        worst_delta = worst_delta.max((loss - likelihood).abs());

        let uniform = probs_to_survival(&vec![1.0 / m as f64; m]).unwrap();
        for r in 1..=5 {
            let cfg = SurvHLConfig::new(r).unwrap();
            let idx = rng.random_range(1..=m);
            let l = survhl_row(&uniform, idx, true, &cfg).unwrap();
            worst_uniform = worst_uniform.max((l - (m as f64).ln()).abs());
        }
    }
    verdict(
        6,
        "SurvHL reductions",
        worst_delta <= SURVHL_TOL && worst_uniform <= SURVHL_TOL,
        &format!("delta mode vs likelihood {worst_delta:.1e}; uniform loss vs ln m {worst_uniform:.1e}"),
    );
}

fn ks_one_sample(mut draws: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    draws.sort_by(f64::total_cmp);
    let n = draws.len() as f64;
    draws
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let f = cdf(t);
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max)
}

#[test]
fn criterion_07_simulation_fidelity() {
    // a fixed covariate vector per cluster: x = 0.3 in every coordinate
    let d = SYNTHETIC_DIM;
    let cfg = SimConfig {
        seed: 77,
        ..SimConfig::default()
    };
    let features = Array2::from_elem((2 * SIM_KS_N, d), 0.3);
    let sim = generate(features.clone(), (0..d).map(|j| format!("x{j}")).collect(), &cfg).unwrap();
    let mut worst: f64 = 0.0;
    let mut sizes = Vec::new();
    for c in 0..2u8 {
        let draws: Vec<f64> = sim.true_times.iter().zip(&sim.clusters).filter(|(_, &k)| k == c).map(|(t, _)| *t).collect();
        sizes.push(draws.len());
        let p = &sim.params[usize::from(c)];
        let row = features.row(0);
        worst = worst.max(ks_one_sample(draws, |t| 1.0 - p.survival(row, t)));
    }
    let rate_sim = generate_synthetic(SIM_RATE_N, d, &SimConfig { seed: 78, ..SimConfig::default() }).unwrap();
    let rate = rate_sim.data.event_rate();
    let target = 1.0 - SimConfig::default().censoring_rate;
    verdict(
        7,
        "simulation fidelity",
        worst < SIM_KS_MAX && (rate - target).abs() <= SIM_RATE_TOL && sizes.iter().all(|&s| s >= SIM_KS_N * 9 / 10),
        &format!("per-cluster KS {worst:.4} (< {SIM_KS_MAX}) on {sizes:?} draws; event rate {rate:.4} vs {target}"),
    );
}

#[test]
fn criterion_08_bimodal_las_beats_was() {
    let start = Instant::now();
    let mut ks_las = Vec::new();
    let mut ks_was = Vec::new();
    for seed in 0..BIMODAL_SEEDS {
        let cfg = SimConfig {
            censoring_rate: BIMODAL_CENSORING,
            seed,
            ..SimConfig::default()
        };
        let sim = generate_synthetic(BIMODAL_N, SYNTHETIC_DIM, &cfg).unwrap();
        let (tr, va, te) = stratified_split(&sim.data, &SplitSpec::protocol_default(seed)).unwrap();
        for (head, out) in [(HeadKind::Las, &mut ks_las), (HeadKind::Was, &mut ks_was)] {
            let tc = TrainConfig {
                seed,
                max_epochs: 40,
                ..small_train_config(head, 4)
            };
            let (bundle, _) = train(&tr, Some(&va), &tc).unwrap();
            out.push(evaluate_with(&bundle, &te, true).unwrap().ks.unwrap());
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (a, b) = (mean(&ks_las), mean(&ks_was));
    let elapsed = start.elapsed();
    verdict(
        8,
        "bimodal simulation, LAS vs WAS",
        a < b && elapsed < BIMODAL_BUDGET,
        &format!(
            "mean KS LAS {a:.4} vs WAS {b:.4} over {BIMODAL_SEEDS} seeds (LAS lower in {}/{}), {:.1}s",
            ks_las.iter().zip(&ks_was).filter(|(x, y)| x < y).count(),
            BIMODAL_SEEDS,
            elapsed.as_secs_f64()
        ),
    );
}

fn gbsg2_paths() -> Option<(PathBuf, PathBuf)> {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..");
    let csv = std::env::var_os("GBSG2_CSV")
        .map(PathBuf::from)
        .unwrap_or_else(|| root.join("data/gbsg2.csv"));
    let schema = root.join("data/gbsg2.schema.json");
    csv.exists().then_some((csv, schema))
}

fn unavailable(id: u32, name: &str) {
    println!(
        "FAIL criterion {id} ({name}): GBSG2 data not found (set GBSG2_CSV or place data/gbsg2.csv); criterion not evaluated"
    );
}

fn gbsg2_config() -> TrainConfig {
    TrainConfig {
        head: HeadKind::Ls,
        n_blocks: 2,
        hidden: 128,
        n_members: 1,
        activation: Activation::Relu,
        layer_norm: false,
        r: 3,
        learning_rate: 1e-3,
        batch_size: 64,
        dropout: 0.0,
        embedding: Some(EmbeddingSpec {
            bins: 32,
            width: 8,
            activation: false,
        }),
        grid_fraction: 1.0,
        max_epochs: 100,
        patience: 10,
        seed: 0,
    }
}

#[test]
fn criterion_09_gbsg2_benchmark() {
    let Some((csv, schema)) = gbsg2_paths() else {
        unavailable(9, "GBSG2 benchmark");
        return;
    };
    let start = Instant::now();
    let schema = Schema::from_json_file(schema).unwrap();
    let raw = load_csv(csv, &schema).unwrap();
    let data = prepare_raw(&raw, &SplitSpec::protocol_default(0)).unwrap();
    let plan = ExperimentPlan {
        data: DataSource::Csv {
            path: PathBuf::new(),
            schema: PathBuf::new(),
        },
        models: vec![ModelEntry {
            name: "LS".into(),
            config: gbsg2_config(),
        }],
        n_runs: GBSG2_SEEDS,
        base_seed: 0,
        split: None,
        merge_validation: false,
        sweep: None,
        ks: Some(false),
    };
    let report = run_experiment_on(&plan, &data).unwrap();
    let r = report.models[0].report.as_ref().unwrap();
    let elapsed = start.elapsed();
    verdict(
        9,
        "GBSG2 benchmark",
        report.failures.is_empty() && r.c_index >= GBSG2_MIN_CINDEX && r.ibs <= GBSG2_MAX_IBS && elapsed < GBSG2_BUDGET,
        &format!(
            "mean C-index {:.4} (>= {GBSG2_MIN_CINDEX}), mean IBS {:.4} (<= {GBSG2_MAX_IBS}) over {GBSG2_SEEDS} seeds, {:.1}s",
            r.c_index,
            r.ibs,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_10_grid_r_sensitivity() {
    let Some((csv, schema)) = gbsg2_paths() else {
        unavailable(10, "grid/r sensitivity");
        return;
    };
    let schema = Schema::from_json_file(schema).unwrap();
    let raw = load_csv(csv, &schema).unwrap();
    let data = prepare_raw(&raw, &SplitSpec::protocol_default(0)).unwrap();
    let plan = ExperimentPlan {
        data: DataSource::Csv {
            path: PathBuf::new(),
            schema: PathBuf::new(),
        },
        models: vec![ModelEntry {
            name: "LS".into(),
            config: gbsg2_config(),
        }],
        n_runs: 1,
        base_seed: 0,
        split: None,
        merge_validation: false,
        sweep: Some(SweepSpec {
            grid_fractions: SWEEP_FRACTIONS.to_vec(),
            r: SWEEP_R.to_vec(),
        }),
        ks: Some(false),
    };
    let report = run_experiment_on(&plan, &data).unwrap();
    let table = tabsurv::orchestration::report_table(&report);
    let cells: Vec<f64> = report.models.iter().filter_map(|m| m.report.as_ref().map(|r| r.c_index)).collect();
    let spread = cells.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - cells.iter().cloned().fold(f64::INFINITY, f64::min);
    println!("{table}");
    verdict(
        10,
        "grid/r sensitivity",
        cells.len() == SWEEP_FRACTIONS.len() * SWEEP_R.len() && table.lines().count() == cells.len() + 1 && spread < SWEEP_MAX_SPREAD,
        &format!("{} cells, C-index spread {spread:.4} (< {SWEEP_MAX_SPREAD})", cells.len()),
    );
}

#[test]
fn criterion_11_benchmark_determinism() {
    let plan = ExperimentPlan {
        data: DataSource::Simulation(SimulationSource {
            n_rows: 500,
            ..SimulationSource::default()
        }),
        models: vec![
            ModelEntry {
                name: "LAS".into(),
                config: TrainConfig {
                    dropout: 0.05,
                    max_epochs: 5,
                    ..small_train_config(HeadKind::Las, 3)
                },
            },
            ModelEntry {
                name: "WSA".into(),
                config: TrainConfig {
                    max_epochs: 5,
                    ..small_train_config(HeadKind::Wsa, 3)
                },
            },
        ],
        n_runs: 2,
        base_seed: 11,
        split: None,
        merge_validation: false,
        sweep: None,
        ks: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let mut outputs = Vec::new();
    for k in 0..2 {
        let report = run_experiment(&plan).unwrap();
        let (json, csv) = write_experiment(&report, dir.path().join(format!("run{k}"))).unwrap();
        outputs.push((std::fs::read(json).unwrap(), std::fs::read(csv).unwrap()));
    }
    let same = outputs[0] == outputs[1];
    verdict(
        11,
        "benchmark determinism",
        same && !outputs[0].0.is_empty(),
        &format!("two runs produce {} aggregated JSON ({} bytes)", if same { "byte-identical" } else { "different" }, outputs[0].0.len()),
    );
}

#[test]
fn random_curves_score_in_range() {
    // smoke check that the full metric bundle is usable on raw curves
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let grid = TimeGrid::new((1..=10).map(f64::from).collect()).unwrap();
    let times: Vec<f64> = (0..50).map(|_| rng.random_range(0.5..11.0)).collect();
    let events: Vec<bool> = (0..50).map(|_| rng.random_bool(0.8)).collect();
    let curves: Vec<DiscreteSurvival> = (0..50).map(|_| probs_to_survival(&random_simplex(&mut rng, 10)).unwrap()).collect();
    let g = kaplan_meier(&times, &events.iter().map(|e| !e).collect::<Vec<_>>()).unwrap();
    let (c, ibs, auc) = score_curves(&curves, &grid, &times, &events, &g).unwrap();
    assert!((0.0..=1.0).contains(&c) && ibs >= 0.0 && (0.0..=1.0).contains(&auc));
    let ks = ks_statistic(&curves, &grid, &times).unwrap();
    assert!((0.0..=1.0).contains(&ks));
}
