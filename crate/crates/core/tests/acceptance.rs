//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thermoformer_core::autodiff::gradient_check_many;
use thermoformer_core::checkpoint::sha256_hex;
use thermoformer_core::datagen::{
    default_start, generate_dataset, sample_buildings, simulate, simulate_with, Forcing, SimOptions,
};
use thermoformer_core::evaluation::{
    assert_nested, check_disjoint, climate_test_refs, make_splits, rmse, validation_count,
    EvalData, LinearAr, Persistence, Predictor, WindowRef, DEFAULT_RIDGE,
};
use thermoformer_core::features::{
    assemble_windows, centered_difference, fit_standardizer, window_at, window_count,
    N_PAST_FEATURES, N_RAW,
};
use thermoformer_core::model::{rope_attention_scores, rope_rotate, Bound};
use thermoformer_core::pipeline::{sweep, train_run};
use thermoformer_core::*;

type Check = std::result::Result<String, String>;

fn fail(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn random_sample(rng: &mut ChaCha8Rng, config: &ModelConfig) -> WindowSample {
    let n = config.context_length;
    WindowSample {
        past: (0..n * N_PAST_FEATURES)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect(),
        static_features: std::array::from_fn(|_| rng.random_range(-2.0..2.0)),
        future: (0..config.future_dim())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
        t_prev: rng.random_range(15.0..30.0),
        target_delta: rng.random_range(-1.0..1.0),
        target_index: n,
    }
}

// 1
fn gradient_correctness() -> Check {
    let start = Instant::now();
    let config = ModelConfig {
        hidden_dim: 8,
        n_heads: 2,
        ffn_dim: 16,
        n_layers_past: 2,
        n_layers_future: 1,
        context_length: 6,
        forecast_weather: true,
        ..ModelConfig::default()
    };
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let model = PhysicsTransformer::init(config.clone(), seed).map_err(fail)?;
        let batch: Vec<WindowSample> = (0..3).map(|_| random_sample(&mut rng, &config)).collect();
        let refs: Vec<&WindowSample> = batch.iter().collect();
        let targets =
            Tensor::new(vec![3, 1], batch.iter().map(|s| s.target_delta).collect()).unwrap();
        let tensors: Vec<Tensor> = model.params.entries().into_iter().cloned().collect();
        let err = gradient_check_many(
            |g, vars| {
                let mut it = vars.iter().copied();
                let bound = Bound {
                    params: model
                        .params
                        .map(|_, _| it.next().expect("one var per tensor")),
                };
                let pred = model.forward_graph(g, &bound, &refs, None)?;
                let target = g.constant(targets.clone());
                let diff = g.sub(pred, target)?;
                let sq = g.mul(diff, diff)?;
                Ok(g.mean(sq))
            },
            &tensors,
            1e-5,
        )
        .map_err(fail)?;
        worst = worst.max(err);
    }
    let elapsed = start.elapsed();
    let detail = format!(
        "max relative error {worst:.2e} over 10 seeds in {:.1}s",
        elapsed.as_secs_f64()
    );
    if worst <= 1e-4 && elapsed < Duration::from_secs(60) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 2
fn rope_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = 10_000.0;
    let (mut norm_err, mut shift_err) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let (seq, heads, hd) = (
            rng.random_range(1..12),
            rng.random_range(1..4),
            2 * rng.random_range(1..9),
        );
        let x = random_tensor(&mut rng, &[seq, heads, hd]);
        let at_zero = rope_rotate(&x, &vec![0; seq], base).map_err(fail)?;
        if at_zero
            .data()
            .iter()
            .zip(x.data())
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err("rotation at position 0 is not the identity".into());
        }
        let positions: Vec<usize> = (0..seq).map(|_| rng.random_range(0..5000)).collect();
        let rotated = rope_rotate(&x, &positions, base).map_err(fail)?;
        for (a, b) in x.data().chunks(2).zip(rotated.data().chunks(2)) {
            norm_err = norm_err.max((a[0].hypot(a[1]) - b[0].hypot(b[1])).abs());
        }

        let q = random_tensor(&mut rng, &[seq, hd]);
        let k = random_tensor(&mut rng, &[seq, hd]);
        let shift = rng.random_range(1..2000);
        let shifted: Vec<usize> = positions.iter().map(|p| p + shift).collect();
        let s0 = rope_attention_scores(&q, &k, &positions, base).map_err(fail)?;
        let s1 = rope_attention_scores(&q, &k, &shifted, base).map_err(fail)?;
        for (a, b) in s0.data().iter().zip(s1.data()) {
            shift_err = shift_err.max((a - b).abs());
        }
    }
    let detail =
        format!("position 0 exact, pair norm error {norm_err:.1e}, shift error {shift_err:.1e}");
    if norm_err <= 1e-12 && shift_err <= 1e-8 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 3
fn derivative_scheme() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let trials = 25;
    for _ in 0..trials {
        let (a, b, c) = (
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-30.0..30.0),
        );
        let dt = [0.5, 1.0, 2.0][rng.random_range(0..3)];
        let n = rng.random_range(3..40);
        let f: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 * dt;
                a * t * t + b * t + c
            })
            .collect();
        let d = centered_difference(&f, dt).map_err(fail)?;
        for i in 1..n - 1 {
            let t = i as f64 * dt;
            let exact = 2.0 * a * t + b;
            let scale = f[i - 1].abs().max(f[i + 1].abs()).max(1.0) / dt;
            worst = worst.max((d[i] - exact).abs() / scale);
        }
    }
    let detail = format!(
        "{trials} quadratics, worst interior error {worst:.1e} relative to the sample scale"
    );
    if worst <= 8.0 * f64::EPSILON {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 4
fn euler_contract() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let config = ModelConfig::default();
    let model = PhysicsTransformer::init(config.clone(), 4).map_err(fail)?;
    let samples: Vec<WindowSample> = (0..1000)
        .map(|_| {
            let mut s = random_sample(&mut rng, &config);
            s.t_prev = rng.random_range(-20.0..45.0);
            s
        })
        .collect();
    let deltas = model.forward_batch(&samples).map_err(fail)?;
    for (s, d) in samples.iter().zip(&deltas) {
        let single = model.forward(s).map_err(fail)?;
        let temp = model.predict_temperature(s).map_err(fail)?;
        if (temp - s.t_prev).to_bits() != single.to_bits() || single.to_bits() != d.to_bits() {
            return Err(format!(
                "t_prev {} gave delta {single} but temperature {temp}",
                s.t_prev
            ));
        }
    }
    Ok("1000 samples, residual and absolute prediction agree bit for bit".into())
}

// 5
fn no_leakage() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let climate = ClimateProfile::hot_humid(5);
    let building = sample_buildings(1, &climate, 5).map_err(fail)?.remove(0);
    let record = simulate(&building, &climate, 1, 24 * 14, 5).map_err(fail)?;
    let std = fit_standardizer(&[&record], &[building.statics]).map_err(fail)?;
    let config = ModelConfig::default();
    let cfg = config.window();
    let model = PhysicsTransformer::init(config.clone(), 5).map_err(fail)?;
    let statics = std.apply_static(&building.statics);
    for trial in 0..100 {
        let t = rng.random_range(cfg.context_length..record.len());
        let channel = rng.random_range(0..N_RAW);
        let j = rng.random_range(t..record.len());
        let mut perturbed = record.clone();
        perturbed.channel_mut(channel)[j] += rng.random_range(-10.0..10.0);

        let a = window_at(&record, &statics, &std, &cfg, t).map_err(fail)?;
        let mut b = window_at(&perturbed, &statics, &std, &cfg, t).map_err(fail)?;
        // the label itself is the target value; every input must be untouched
        if channel == 0 && j == t {
            b.target_delta = a.target_delta;
        }
        let same = a
            .past
            .iter()
            .zip(&b.past)
            .all(|(x, y)| x.to_bits() == y.to_bits())
            && a.future
                .iter()
                .zip(&b.future)
                .all(|(x, y)| x.to_bits() == y.to_bits())
            && a.t_prev.to_bits() == b.t_prev.to_bits()
            && a.target_delta.to_bits() == b.target_delta.to_bits()
            && a == b;
        let pa = model.forward(&a).map_err(fail)?;
        let pb = model.forward(&b).map_err(fail)?;
        if !same || pa.to_bits() != pb.to_bits() {
            return Err(format!(
                "trial {trial}: perturbing channel {channel} at {j} changed the window at {t}"
            ));
        }
    }
    Ok("100 perturbations at or after the target left windows and predictions unchanged".into())
}

// 6
fn simulator_physics() -> Check {
    let climate = ClimateProfile::hot_humid(6);
    let statics = BuildingStatic {
        floor_area: 150.0,
        aspect_ratio: 2.0,
        wwr: 0.25,
        wall_r: 3.0,
        roof_r: 5.0,
        internal_gain_density: 5.0,
    };
    let b = RcBuilding::from_static("physics", "hot-humid", statics, 20.0, 24.0).map_err(fail)?;
    let opts = SimOptions {
        spinup_hours: 0,
        initial_temperature: Some(25.0),
        occupancy_schedule: [1.0; 24],
        ..SimOptions::default()
    };
    let hours = 2000;
    let steady = simulate_with(
        &b,
        &Forcing::constant(10.0, 0.0, hours),
        "x",
        4,
        hours,
        &opts,
        0,
    )
    .map_err(fail)?;
    let expected = 10.0 + b.resistance * b.occupancy_peak();
    let steady_err = (steady.record.t_in.last().unwrap() - expected).abs();

    let mut band_excess = 0.0f64;
    for (i, building) in sample_buildings(5, &climate, 6)
        .map_err(fail)?
        .iter()
        .enumerate()
    {
        let r = simulate(building, &climate, 2, 24 * 365, i as u64).map_err(fail)?;
        for &v in &r.t_in {
            band_excess = band_excess
                .max(building.setpoint_heat - v)
                .max(v - building.setpoint_cool);
        }
    }

    let forcing = climate.weather(default_start(), 3000);
    let no_spinup = SimOptions {
        spinup_hours: 0,
        ..SimOptions::default()
    };
    let mode5 = simulate_with(&b, &forcing, "hot-humid", 5, 3000, &no_spinup, 6).map_err(fail)?;
    let hours5 = mode5.deviated.len() - 1;
    let freq = mode5.deviated[1..].iter().filter(|d| **d).count() as f64 / hours5 as f64;
    let factors_ok = mode5.scale_factors.iter().all(|f| (0.3..=1.7).contains(f));

    let detail = format!(
        "steady-state error {steady_err:.1e} °C, band excess {band_excess:.1e} °C, mode-5 deviation {freq:.3} over {hours5} h"
    );
    if steady_err <= 1e-3 && band_excess <= 1e-6 && (freq - 0.6).abs() <= 0.05 && factors_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// The learnability model: two hot-humid buildings, modes 2 to 5, six months.
struct Learned {
    checkpoint: Checkpoint,
    dataset: datagen::Dataset,
}

fn learnability_config() -> (ModelConfig, TrainConfig) {
    let model = ModelConfig {
        hidden_dim: 32,
        ffn_dim: 64,
        n_heads: 4,
        n_layers_past: 1,
        n_layers_future: 1,
        context_length: 24,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        max_epochs: 15,
        batch_size: 256,
        seed: 7,
        ..TrainConfig::default()
    };
    (model, train)
}

fn pooled(
    p: &dyn Predictor,
    data: &EvalData,
    refs: &[WindowRef],
) -> std::result::Result<f64, String> {
    let pred = p.predict(data, refs).map_err(fail)?;
    let truth: Vec<f64> = refs.iter().map(|&r| data.truth(r)).collect();
    rmse(&pred, &truth).map_err(fail)
}

// 7
fn learnability(out: &mut Option<Learned>) -> Check {
    let start = Instant::now();
    let spec = DatasetSpec {
        counts: BTreeMap::from([("hot-humid".to_string(), 10), ("cold".to_string(), 8)]),
        hours: 24 * 181,
        seed: 7,
        ..DatasetSpec::default()
    };
    let dataset = generate_dataset(&spec).map_err(fail)?;
    let statics = dataset.statics();
    let hot: Vec<TimeSeriesRecord> = dataset
        .records
        .iter()
        .filter(|r| r.climate == "hot-humid")
        .cloned()
        .collect();
    let train_buildings = vec!["hot-humid-000".to_string(), "hot-humid-001".to_string()];
    let split = SplitSpec {
        train_buildings: train_buildings.clone(),
        seed: 7,
        ..SplitSpec::default()
    };
    let (model, train) = learnability_config();
    let run = train_run(&hot, &statics, &split, &model, &train).map_err(fail)?;

    let data = EvalData::new(&hot, &statics);
    let unseen: Vec<WindowRef> = run
        .splits
        .test
        .iter()
        .copied()
        .filter(|r| !train_buildings.contains(&hot[r.record].building_id))
        .collect();
    let n_unseen = unseen
        .iter()
        .map(|r| &hot[r.record].building_id)
        .collect::<BTreeSet<_>>()
        .len();
    let linear = LinearAr::fit(
        &data,
        &run.splits.train,
        &run.checkpoint.standardizer,
        &model.window(),
        DEFAULT_RIDGE,
    )
    .map_err(fail)?;
    let m = pooled(&run.checkpoint.predictor(), &data, &unseen)?;
    let p = pooled(&Persistence, &data, &unseen)?;
    let l = pooled(&linear, &data, &unseen)?;
    let elapsed = start.elapsed();
    let (vs_p, vs_l) = (1.0 - m / p, 1.0 - m / l);
    let detail = format!(
        "{n_unseen} unseen buildings: RMSE {m:.4} vs persistence {p:.4} ({:+.1}%), linear_ar {l:.4} ({:+.1}%), best epoch {}, {:.0}s",
        100.0 * vs_p,
        100.0 * vs_l,
        run.checkpoint.meta.best_epoch,
        elapsed.as_secs_f64()
    );
    *out = Some(Learned {
        checkpoint: run.checkpoint,
        dataset,
    });
    if n_unseen == 8 && vs_p >= 0.30 && vs_l >= 0.10 && elapsed <= Duration::from_secs(20 * 60) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 8
fn zero_shot(learned: Option<&Learned>) -> Check {
    let learned = learned.ok_or("criterion 7 produced no model")?;
    let before = sha256_hex(&learned.checkpoint.to_bytes().map_err(fail)?);
    let statics = learned.dataset.statics();
    let data = EvalData::new(&learned.dataset.records, &statics);
    let (model, _) = learnability_config();
    let refs = climate_test_refs(&data, &SplitSpec::default(), model.context_length, "cold")
        .map_err(fail)?;
    let n = refs
        .iter()
        .map(|r| &data.records[r.record].building_id)
        .collect::<BTreeSet<_>>()
        .len();
    let m = pooled(&learned.checkpoint.predictor(), &data, &refs)?;
    let p = pooled(&Persistence, &data, &refs)?;
    let after = sha256_hex(&learned.checkpoint.to_bytes().map_err(fail)?);
    let gain = 1.0 - m / p;
    let detail = format!(
        "{n} cold buildings: RMSE {m:.4} vs persistence {p:.4} ({:+.1}%), checkpoint {}",
        100.0 * gain,
        if before == after {
            "unchanged"
        } else {
            "CHANGED"
        }
    );
    if n == 8 && gain >= 0.15 && before == after {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 9
fn static_enrichment() -> Check {
    let climate = ClimateProfile::hot_humid(9);
    let base = BuildingStatic {
        floor_area: 140.0,
        aspect_ratio: 1.8,
        wwr: 0.2,
        wall_r: 1.5,
        roof_r: 4.0,
        internal_gain_density: 4.0,
    };
    let mut records = Vec::new();
    let mut statics = BTreeMap::new();
    for (id, wall_r) in [("wall-low", 1.5), ("wall-high", 4.5)] {
        let s = BuildingStatic { wall_r, ..base };
        let b = RcBuilding::from_static(id, "hot-humid", s, 20.0, 24.0).map_err(fail)?;
        for mode in 1..=5 {
            records.push(simulate(&b, &climate, mode, 24 * 60, 9).map_err(fail)?);
        }
        statics.insert(id.to_string(), s);
    }
    let model = ModelConfig {
        hidden_dim: 16,
        ffn_dim: 32,
        n_heads: 2,
        n_layers_past: 1,
        context_length: 12,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        max_epochs: 4,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = train_run(&records, &statics, &SplitSpec::default(), &model, &train).map_err(fail)?;
    let ckpt = &run.checkpoint;
    let std = &ckpt.standardizer;
    let low = std.apply_static(&statics["wall-low"]);
    let high = std.apply_static(&statics["wall-high"]);
    let windows =
        assemble_windows(&records[0], &statics["wall-low"], std, &model.window()).map_err(fail)?;
    let swapped: Vec<WindowSample> = windows
        .iter()
        .map(|w| WindowSample {
            static_features: high,
            ..w.clone()
        })
        .collect();
    debug_assert!(windows.iter().all(|w| w.static_features == low));
    let mean_gap = |m: &PhysicsTransformer| -> std::result::Result<f64, String> {
        let a = m.predict_deltas(&windows).map_err(fail)?;
        let b = m.predict_deltas(&swapped).map_err(fail)?;
        Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64)
    };
    let trained = mean_gap(&ckpt.model)?;
    let mut ablated = ckpt.model.clone();
    for t in [
        &mut ablated.params.static_proj.weight,
        &mut ablated.params.static_proj.bias,
    ] {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let ablation = mean_gap(&ablated)?;
    let detail = format!(
        "mean |Δprediction| {trained:.2e} °C trained, {ablation:.1e} °C with statics zeroed"
    );
    if trained > 0.0 && ablation == 0.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// 10
fn protocol_fidelity() -> Check {
    let spec = DatasetSpec {
        counts: BTreeMap::from([("marine".to_string(), 4)]),
        hours: 24 * 12,
        seed: 10,
        ..DatasetSpec::default()
    };
    let dataset = generate_dataset(&spec).map_err(fail)?;
    let statics = dataset.statics();
    let candidates: Vec<String> = dataset.buildings.iter().map(|b| b.id.clone()).collect();
    let model = ModelConfig {
        hidden_dim: 8,
        ffn_dim: 8,
        n_heads: 2,
        n_layers_past: 1,
        context_length: 6,
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        max_epochs: 2,
        seed: 10,
        ..TrainConfig::default()
    };
    let split = SplitSpec {
        seed: 10,
        ..SplitSpec::default()
    };
    let counts = [1, 2, 4];
    let run = || {
        sweep(
            &dataset.records,
            &statics,
            &candidates,
            &counts,
            &split,
            &model,
            &train,
        )
        .map_err(fail)
    };
    let first = run()?;
    assert_nested(&first.subsets).map_err(fail)?;
    if first.subsets.iter().map(Vec::len).collect::<Vec<_>>() != counts {
        return Err(format!("subset sizes {:?}", first.subsets));
    }

    let mut checked = 0;
    for (subset, (trained, _)) in first.subsets.iter().zip(&first.runs) {
        let s = &trained.splits;
        check_disjoint(s).map_err(fail)?;
        let recheck = make_splits(
            &dataset.records,
            &SplitSpec {
                train_buildings: subset.clone(),
                ..split.clone()
            },
            model.context_length,
        )
        .map_err(fail)?;
        if &recheck != s {
            return Err("splits are not reproducible from their spec".into());
        }
        for (i, r) in dataset.records.iter().enumerate() {
            let count = |refs: &[WindowRef]| refs.iter().filter(|w| w.record == i).count();
            let (tr, va, te) = (count(&s.train), count(&s.validation), count(&s.test));
            let windows = window_count(r, model.context_length);
            if r.hvac_mode == split.test_mode {
                if te != windows || tr + va != 0 {
                    return Err(format!(
                        "{} mode {}: test windows misassigned",
                        r.building_id, r.hvac_mode
                    ));
                }
            } else if subset.contains(&r.building_id) {
                let expected = windows as f64 * split.val_fraction;
                if (va as f64 - expected).abs() > 1.0 || tr + va != windows || te != 0 {
                    return Err(format!(
                        "{} mode {}: {va} validation of {windows}",
                        r.building_id, r.hvac_mode
                    ));
                }
                if va != validation_count(windows, split.val_fraction) {
                    return Err("validation count disagrees with its definition".into());
                }
                checked += 1;
            } else if tr + va + te != 0 {
                return Err(format!(
                    "{} is outside the subset but has training windows",
                    r.building_id
                ));
            }
        }
    }

    let second = run()?;
    let same_models = first
        .runs
        .iter()
        .zip(&second.runs)
        .all(|((a, _), (b, _))| a.checkpoint.to_bytes().ok() == b.checkpoint.to_bytes().ok());
    if second.subsets != first.subsets || second.rows != first.rows || !same_models {
        return Err("replaying the sweep from its seeds gave different results".into());
    }
    Ok(format!(
        "subsets {:?} nested, splits disjoint, {checked} validation fractions within one window, replay identical",
        counts
    ))
}

fn main() {
    let mut learned = None;
    let criteria: Vec<(&str, Box<dyn FnOnce(&mut Option<Learned>) -> Check>)> = vec![
        ("gradient correctness", Box::new(|_| gradient_correctness())),
        ("RoPE properties", Box::new(|_| rope_properties())),
        ("derivative scheme", Box::new(|_| derivative_scheme())),
        ("Euler residual contract", Box::new(|_| euler_contract())),
        ("causality and no leakage", Box::new(|_| no_leakage())),
        ("simulator physics", Box::new(|_| simulator_physics())),
        ("learnability on unseen buildings", Box::new(learnability)),
        (
            "zero-shot cold climate",
            Box::new(|l| zero_shot(l.as_ref())),
        ),
        (
            "static enrichment signal",
            Box::new(|_| static_enrichment()),
        ),
        ("protocol fidelity", Box::new(|_| protocol_fidelity())),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        match check(&mut learned) {
            Ok(detail) => println!("PASS [{}] {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
