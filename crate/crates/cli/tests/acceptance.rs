//! Acceptance checks, one line per criterion. Runs without the libtest
//! harness so the report is always printed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use svllm_cli::stages::{self, DatasetRecord};
use svllm_cli::synth::PoiExpected;
use svllm_cli::{io, Overrides, Pipeline};
use svllm_core::baselines::{gbrt_fit, gbrt_predict, knn_predict, GbrtConfig, KnnConfig};
use svllm_core::bias::{bias_correlation_table, pearson_r, poi_counts, BiasRecord, CategoryMapping, PoiCategory};
use svllm_core::binning::{fit_bin_scale, from_bin, to_bin};
use svllm_core::evaluation::{
    ablation_grid, city_model_metrics, run_ablations, score, task_model_r2, AblationConfig, AblationRun,
    AblationSample, MetricsError, MetricsReport, MetricsRow, ScaleSet, Space,
};
use svllm_core::geo::{haversine_distance, GeoPoint};
use svllm_core::prompt::{Gateway, Preset, TruthMap};
use svllm_core::retrieval::transport::{HttpRequest, HttpResponse, Transport, TransportError, TransportMode};
use svllm_core::retrieval::{RetrievalConfig, Retriever};
use svllm_core::seed::rng_for;
use svllm_core::{farthest_first_order, split_dataset, IndicatorTask, SplitConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(t0: Instant, limit_s: f64) -> Result<f64, String> {
    let s = t0.elapsed().as_secs_f64();
    ensure(s < limit_s, || format!("runtime {s:.2}s exceeds {limit_s}s"))?;
    Ok(s)
}

fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300) || a == b
}

// ------------------------------------------------------------------ 1

struct Brute {
    mae: f64,
    rmse: f64,
    r2: f64,
}

/// Straight from the definitions, with compensated summation.
fn brute_metrics(y: &[f64], y_hat: &[f64]) -> Brute {
    fn ksum(xs: impl Iterator<Item = f64>) -> f64 {
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for x in xs {
            let t = s + x;
            c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
            s = t;
        }
        s + c
    }
    let n = y.len() as f64;
    let abs = ksum(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()));
    let sq = ksum(y.iter().zip(y_hat).map(|(a, b)| (a - b) * (a - b)));
    let mean = ksum(y.iter().copied()) / n;
    let tot = ksum(y.iter().map(|v| (v - mean) * (v - mean)));
    Brute { mae: abs / n, rmse: (sq / n).sqrt(), r2: 1.0 - sq / tot }
}

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = rng_for(1, &["acceptance", "metrics"]);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let n = rng.random_range(2..=500);
        let scale = 10f64.powi(rng.random_range(-3..4));
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let noise = rng.random_range(0.0..2.0);
        let y_hat: Vec<f64> = y.iter().map(|v| v + rng.random_range(-1.0..1.0) * scale * noise).collect();
        let s = score(&y, &y_hat).map_err(|e| format!("trial {trial}: {e}"))?;
        let b = brute_metrics(&y, &y_hat);
        for (name, got, want) in [("MAE", s.mae, b.mae), ("RMSE", s.rmse, b.rmse), ("R2", s.r2, b.r2)] {
            ensure(rel_close(got, want, 1e-9), || format!("trial {trial} {name}: {got} vs oracle {want}"))?;
            worst = worst.max((got - want).abs() / want.abs().max(1e-300));
        }
        ensure(s.mae <= s.rmse, || format!("trial {trial}: MAE {} > RMSE {}", s.mae, s.rmse))?;
    }
    let secs = within(t0, 5.0)?;
    Ok(format!("1000 pairs, max rel err {worst:.1e}, MAE<=RMSE everywhere, {secs:.2}s < 5s"))
}

// ------------------------------------------------------------------ 2

fn criterion_2() -> Outcome {
    let y = [3.5, -1.0, 7.25, 0.0];
    let s = score(&y, &y).map_err(|e| e.to_string())?;
    ensure(s.mae == 0.0 && s.rmse == 0.0 && s.r2 == 1.0, || format!("perfect fit gave {s:?}"))?;
    let s = score(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).map_err(|e| e.to_string())?;
    ensure((s.mae - 2.0 / 3.0).abs() <= 1e-12, || format!("MAE {}", s.mae))?;
    ensure((s.rmse - (2.0f64 / 3.0).sqrt()).abs() <= 1e-12, || format!("RMSE {}", s.rmse))?;
    ensure(s.r2.abs() <= 1e-12, || format!("R2 {}", s.r2))?;
    let e = score(&[4.0, 4.0, 4.0], &[1.0, 2.0, 3.0]);
    ensure(matches!(e, Err(MetricsError::ZeroVariance)), || format!("constant y gave {e:?}"))?;
    Ok("(0,0,1) exact; (2/3, sqrt(2/3), 0) within 1e-12; constant y -> ZeroVariance".into())
}

// ------------------------------------------------------------------ 3

fn criterion_3() -> Outcome {
    let t0 = Instant::now();
    let mut rng = rng_for(3, &["acceptance", "knn"]);
    let cfg = KnnConfig { k: 5, ..Default::default() };
    let mut queries = 0;
    for inst in 0..20 {
        let n = rng.random_range(5..=1000);
        // coarse grid so distance ties happen
        fn coord(r: &mut impl Rng) -> (f64, f64) {
            (r.random_range(0..40) as f64 * 0.01, r.random_range(0..40) as f64 * 0.01)
        }
        let train: Vec<(GeoPoint, f64)> = (0..n)
            .map(|i| {
                let (a, b) = coord(&mut rng);
                (GeoPoint::new(format!("t{i:04}"), 48.0 + a, 2.0 + b).unwrap(), rng.random_range(-50.0..50.0))
            })
            .collect();
        for qi in 0..50 {
            let (a, b) = coord(&mut rng);
            let q = GeoPoint::new(format!("q{qi}"), 48.0 + a, 2.0 + b).unwrap();
            let got = knn_predict(&train, &q, &cfg).map_err(|e| e.to_string())?;
            // exhaustive: score everything, full sort by (distance, id)
            let mut all: Vec<(f64, &str, f64)> =
                train.iter().map(|(p, y)| (haversine_distance(p, &q), p.id.as_str(), *y)).collect();
            all.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(y.1)));
            let want = all[..5].iter().map(|x| x.2).sum::<f64>() / 5.0;
            ensure(got.to_bits() == want.to_bits(), || format!("instance {inst} query {qi}: {got} vs {want}"))?;
            queries += 1;
        }
    }
    let secs = within(t0, 10.0)?;
    Ok(format!("{queries} queries bitwise equal to exhaustive search, {secs:.2}s < 10s"))
}

// ------------------------------------------------------------------ 4

fn check_greedy(points: &[GeoPoint]) -> Result<(), String> {
    let order = farthest_first_order(points).map_err(|e| e.to_string())?;
    ensure(order.ids.len() == points.len(), || "order is not a permutation".into())?;
    let by_id: HashMap<&str, &GeoPoint> = points.iter().map(|p| (p.id.as_str(), p)).collect();
    // seed pair: max pairwise distance, ties by (smaller id, larger id)
    let mut best: Option<(f64, &str, &str)> = None;
    for a in points {
        for b in points {
            if a.id >= b.id {
                continue;
            }
            let d = haversine_distance(a, b);
            let cand = (d, a.id.as_str(), b.id.as_str());
            best = match best {
                Some(cur) if cur.0 > d || (cur.0 == d && (cur.1, cur.2) <= (cand.1, cand.2)) => Some(cur),
                _ => Some(cand),
            };
        }
    }
    if let Some((_, a, b)) = best {
        ensure(order.ids[0] == a && order.ids[1] == b, || format!("seed pair {:?} vs {a},{b}", &order.ids[..2]))?;
    }
    for k in 2..order.ids.len() {
        let chosen: Vec<&GeoPoint> = order.ids[..k].iter().map(|id| by_id[id.as_str()]).collect();
        let taken: HashSet<&str> = order.ids[..k].iter().map(String::as_str).collect();
        let mut best: Option<(f64, &str)> = None;
        for p in points.iter().filter(|p| !taken.contains(p.id.as_str())) {
            let d = chosen.iter().map(|c| haversine_distance(c, p)).fold(f64::INFINITY, f64::min);
            best = match best {
                Some(cur) if cur.0 > d || (cur.0 == d && cur.1 < p.id.as_str()) => Some(cur),
                _ => Some((d, p.id.as_str())),
            };
        }
        let (d, id) = best.expect("points remain");
        ensure(order.ids[k] == id, || format!("step {k}: picked {} but brute force picks {id}", order.ids[k]))?;
        ensure(order.min_dist_m[k] == d, || format!("step {k}: min distance {} vs {d}", order.min_dist_m[k]))?;
    }
    Ok(())
}

fn criterion_4() -> Outcome {
    let mut rng = rng_for(4, &["acceptance", "farthest-first"]);
    for inst in 0..20 {
        let n = rng.random_range(2..=200);
        let grid = inst % 2 == 0;
        let pts: Vec<GeoPoint> = (0..n)
            .map(|i| {
                let (a, b) = if grid {
                    (rng.random_range(0..8) as f64 * 0.05, rng.random_range(0..8) as f64 * 0.05)
                } else {
                    (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))
                };
                GeoPoint::new(format!("p{i:03}"), 10.0 + a, 20.0 + b).unwrap()
            })
            .collect();
        let mut seen = HashSet::new();
        let pts: Vec<GeoPoint> = pts.into_iter().filter(|p| seen.insert((p.lat().to_bits(), p.lon().to_bits()))).collect();
        check_greedy(&pts).map_err(|e| format!("instance {inst}: {e}"))?;
    }
    let line: Vec<GeoPoint> =
        [0.0, 4.0, 10.0].iter().map(|&lon| GeoPoint::new(format!("{lon}"), 0.0, lon).unwrap()).collect();
    let order = farthest_first_order(&line).map_err(|e| e.to_string())?;
    ensure(order.ids == ["0", "10", "4"], || format!("longitude case gave {:?}", order.ids))?;
    Ok("20 instances greedy at every step; {0,4,10} -> [0,10,4]".into())
}

// ------------------------------------------------------------------ 5

fn criterion_5() -> Outcome {
    let mut rng = rng_for(5, &["acceptance", "binning"]);
    let mut values: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1e3..1e3)).collect();
    let scale = fit_bin_scale(&values, IndicatorTask::Ndvi).map_err(|e| e.to_string())?;
    values.sort_by(f64::total_cmp);
    let labels: Vec<f64> = values.iter().map(|v| to_bin(&scale, *v).unwrap().value()).collect();
    ensure(labels.windows(2).all(|w| w[0] <= w[1]), || "labels not monotone over sorted values".into())?;
    ensure(labels[0] == 0.0 && labels[labels.len() - 1] == 9.9, || format!("extremes map to {} and {}", labels[0], labels[9999]))?;
    let mut counts = [0usize; 100];
    for v in &values {
        counts[to_bin(&scale, *v).unwrap().index()] += 1;
    }
    ensure(counts.iter().all(|c| *c == 100), || format!("bin counts {counts:?}"))?;
    for v in &values {
        let label = to_bin(&scale, *v).unwrap();
        let (lo, hi) = scale.interval(label);
        let back = from_bin(&scale, label);
        ensure(lo <= *v && *v <= hi && lo <= back && back <= hi, || format!("{v} -> {label:?} -> {back} outside [{lo}, {hi}]"))?;
    }
    Ok("monotone on 10,000 values; min->0.0, max->9.9; 100 per bin; round trips stay in-bin".into())
}

// ------------------------------------------------------------------ 6

fn criterion_6() -> Outcome {
    let mut rng = rng_for(6, &["acceptance", "gbrt"]);
    let cfg = GbrtConfig::default();
    for ds in 0..10 {
        let n = rng.random_range(20..200);
        let x: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
        let y: Vec<f64> = x.iter().map(|r| (6.0 * r[0]).sin() + r[1] * r[1] + rng.random_range(-0.1..0.1)).collect();
        let m = gbrt_fit(&x, &y, &cfg).map_err(|e| e.to_string())?;
        ensure(m.train_sse.len() == cfg.rounds + 1, || format!("dataset {ds}: {} SSE entries", m.train_sse.len()))?;
        ensure(m.train_sse.windows(2).all(|w| w[1] <= w[0]), || format!("dataset {ds}: SSE rose {:?}", m.train_sse))?;
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let xs: Vec<Vec<f64>> = idx.iter().map(|&i| x[i].clone()).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let m2 = gbrt_fit(&xs, &ys, &cfg).map_err(|e| e.to_string())?;
        ensure(m == m2, || format!("dataset {ds}: permuted rows changed the model"))?;
    }
    let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
    let y: Vec<f64> = (0..20).map(|i| if i < 8 { -2.0 } else { 5.0 }).collect();
    let step = GbrtConfig { rounds: 1, max_depth: 1, learning_rate: 1.0, features: vec![svllm_core::baselines::Feature::Lat], ..cfg };
    let m = gbrt_fit(&x, &y, &step).map_err(|e| e.to_string())?;
    let mse = x.iter().zip(&y).map(|(r, t)| (gbrt_predict(&m, r) - t).powi(2)).sum::<f64>() / 20.0;
    ensure(mse == 0.0, || format!("step function MSE {mse}"))?;
    Ok("SSE non-increasing on 10 datasets; step fit MSE 0; permutation invariant".into())
}

// ------------------------------------------------------------------ shared synth helpers

fn pipeline(dir: &Path, toml_text: &str) -> Pipeline {
    let path = dir.join("svllm.toml");
    std::fs::write(&path, toml_text).unwrap();
    Pipeline::load(&path, Overrides::default()).unwrap()
}

const BUMPS: &str = r#"
[synth.truths.population]
kind = "gaussian_bump"
sigma_m = 2500.0
peak = 25000.0
base = 800.0

[synth.truths.health]
kind = "gaussian_bump"
center = [45.02, 7.03]
sigma_m = 3000.0
peak = 5.0
base = 60.0

[synth.truths.ndvi]
kind = "gaussian_bump"
center = [45.08, 7.12]
sigma_m = 2000.0
peak = 0.8
base = 0.1

[synth.truths.building_height]
kind = "gaussian_bump"
sigma_m = 1800.0
peak = 80.0
base = 6.0

[synth.truths.impervious]
kind = "gaussian_bump"
center = [45.06, 7.05]
sigma_m = 4000.0
peak = 95.0
base = 15.0
"#;

fn llm_r2(p: &Pipeline) -> BTreeMap<IndicatorTask, f64> {
    let report: MetricsReport = io::read_json(&p.results("metrics.json"), "evaluate").unwrap();
    report
        .rows
        .iter()
        .filter(|r| r.model == p.cfg.predict.model_label && r.space == Space::Bin)
        .map(|r| (r.task, r.r2))
        .collect()
}

fn chain(p: &Pipeline) -> Result<(), String> {
    for stage in [stages::synth, stages::sample, stages::retrieve, stages::predict, stages::evaluate] {
        stage(p).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn dataset(p: &Pipeline) -> Vec<DatasetRecord> {
    io::read_jsonl(&p.results("dataset.jsonl"), stages::DATASET_SCHEMA, "retrieve").unwrap()
}

// ------------------------------------------------------------------ 7

fn criterion_7() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = pipeline(dir.path(), "seed = 7\ncity = \"Synthville\"\ntasks = [\"population\"]\n\n[synth]\nn_points = 200\n");
    for stage in [stages::synth, stages::sample, stages::retrieve] {
        stage(&p).map_err(|e| e.to_string())?;
    }
    let data = dataset(&p);
    let scales: ScaleSet = io::read_json(&p.results("scales.json"), "sample").unwrap();
    let samples: Vec<AblationSample> = data
        .iter()
        .map(|r| AblationSample {
            city: r.city.clone(),
            context: r.context.clone(),
            truths: r.truths.iter().map(|(t, e)| (*t, (e.value, e.bin))).collect(),
        })
        .collect();
    let mut truth = TruthMap::new();
    for r in &data {
        for (t, e) in &r.truths {
            truth.insert(r.sample_id.clone(), *t, e.bin);
        }
    }
    let runs = run_ablations(&samples, &[IndicatorTask::Population], &scales, &AblationConfig::default(), &|_| {
        Ok(Gateway::mock_echo(truth.clone()))
    });
    let run = |preset| runs.iter().find(|r| r.preset == preset).expect("all presets run");
    let n = samples.len();
    ensure(n == 200, || format!("{n} samples"))?;

    let no_text = run(Preset::WithoutText);
    let mut violations = 0;
    for t in &no_text.transcripts {
        let r = data.iter().find(|r| r.sample_id == t.sample_id).unwrap();
        let a = &r.context.address;
        let mut needles: Vec<&str> = vec![a.display_name.as_str()];
        needles.extend(["road", "suburb", "city"].iter().filter_map(|k| a.components.get(*k).map(String::as_str)));
        needles.extend(r.context.nearby.iter().map(|n| n.name.as_str()));
        violations += needles.iter().filter(|s| t.user_text.contains(**s)).count();
    }
    ensure(violations == 0, || format!("{violations} address/place substrings in WithoutTEXT prompts"))?;
    let full_text_hits = run(Preset::Full)
        .transcripts
        .iter()
        .filter(|t| data.iter().any(|r| r.sample_id == t.sample_id && t.user_text.contains(&r.context.address.display_name)))
        .count();
    ensure(full_text_hits > 0, || "Full prompts never mention the address; the check is vacuous".into())?;

    let images: usize = run(Preset::WithoutStreetview).transcripts.iter().map(|t| t.image_attachments.len()).sum();
    ensure(images == 0, || format!("WithoutStreetview attached {images} images"))?;
    let full_images: usize = run(Preset::Full).transcripts.iter().map(|t| t.image_attachments.len()).sum();
    ensure(full_images > 0, || "Full attached no images".into())?;

    let (cot, full) = (run(Preset::WithoutCot).gateway_calls, run(Preset::Full).gateway_calls);
    ensure(cot == n && full == 2 * n, || format!("calls: WithoutCOT {cot}, Full {full}, |test| {n}"))?;
    Ok(format!(
        "{n} samples: 0 text leaks in {} WithoutTEXT prompts, 0 images without SVI, calls {cot} vs {full}",
        no_text.transcripts.len()
    ))
}

// ------------------------------------------------------------------ 8

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let base = format!("seed = 8\ncity = \"Synthville\"\n\n[synth]\nn_points = 500\n{BUMPS}");
    let t0 = Instant::now();
    let p = pipeline(dir.path(), &format!("{base}\n[model]\nprovider = \"mock_echo\"\n"));
    chain(&p)?;
    let echo_s = within(t0, 60.0)?;
    let r2 = llm_r2(&p);
    ensure(r2.len() == 5, || format!("R² for {} tasks", r2.len()))?;
    for (t, v) in &r2 {
        ensure((v - 1.0).abs() <= 1e-12, || format!("MockEcho {t}: R² {v}"))?;
    }

    let mut by_sigma: Vec<(f64, BTreeMap<IndicatorTask, f64>)> = Vec::new();
    for sigma in [0.5, 1.0, 2.0] {
        let p = pipeline(dir.path(), &format!("{base}\n[model]\nprovider = \"mock_noisy\"\nnoise_sigma = {sigma}\n"));
        chain(&p)?;
        by_sigma.push((sigma, llm_r2(&p)));
    }
    let total = within(t0, 60.0)?;
    for task in IndicatorTask::ALL {
        let seq: Vec<f64> = by_sigma.iter().map(|(_, m)| m[&task]).collect();
        ensure(seq.windows(2).all(|w| w[1] < w[0]), || format!("{task}: R² {seq:?} not strictly decreasing in sigma"))?;
    }
    let pop: Vec<String> = by_sigma.iter().map(|(s, m)| format!("σ={s}: {:.4}", m[&IndicatorTask::Population])).collect();
    Ok(format!(
        "MockEcho R² = 1 for 5 tasks ({echo_s:.2}s < 60s); MockNoisy population {}; all tasks decreasing; total {total:.2}s",
        pop.join(", ")
    ))
}

// ------------------------------------------------------------------ 9

fn criterion_9() -> Outcome {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let x = [1.0, 2.0, 3.0];
    for (y, want) in [([2.0, 4.0, 6.0], 1.0), ([6.0, 4.0, 2.0], -1.0), ([1.0, 3.0, 2.0], 0.5)] {
        let r = pearson_r(&x, &y).map_err(|e| e.to_string())?;
        ensure(close(r, want), || format!("pearson {y:?}: {r} vs {want}"))?;
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = pipeline(dir.path(), "seed = 9\ncity = \"Synthville\"\n\n[synth]\nn_points = 500\n");
    for stage in [stages::synth, stages::sample, stages::retrieve] {
        stage(&p).map_err(|e| e.to_string())?;
    }
    let expected: HashMap<String, PoiExpected> =
        stages::read_poi_expected(&p).unwrap().into_iter().map(|e| (e.sample_id.clone(), e)).collect();
    let retriever = stages::retriever(&p).map_err(|e| e.to_string())?;
    let mapping = CategoryMapping::default();
    let noise = Normal::new(0.0, 0.005).unwrap();
    let mut records = Vec::new();
    for r in dataset(&p) {
        let counts = poi_counts(&retriever, &r.point, 500.0, &mapping).map_err(|e| e.to_string())?;
        ensure(counts == expected[&r.sample_id].counts, || format!("{}: retrieved POI counts differ from the planted ones", r.sample_id))?;
        let eps = noise.sample(&mut rng_for(9, &["planted-bias", &r.sample_id]));
        let bias = 0.01 * counts.get(PoiCategory::GreenSpace) as f64 + eps;
        records.push(BiasRecord { sample_id: r.sample_id.clone(), city: r.city.clone(), task: IndicatorTask::Ndvi, bias, poi_counts: counts });
    }
    let table = bias_correlation_table(&records);
    let top = table.positive.first().ok_or("no positive correlations")?;
    ensure(top.category == PoiCategory::GreenSpace && top.r > 0.8, || format!("top positive is {:?} r={}", top.category, top.r))?;
    Ok(format!("Pearson hand cases exact; {} samples, top positive GreenSpace r={:.4}", records.len(), top.r))
}

// ------------------------------------------------------------------ 10

/// Network stand-in that counts every request and refuses it.
struct Tripwire(AtomicUsize);

impl Transport for Tripwire {
    fn send(&self, req: &HttpRequest) -> Result<HttpResponse, TransportError> {
        self.0.fetch_add(1, Ordering::SeqCst);
        Err(TransportError::Connection(format!("network disabled: {}", req.url)))
    }
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = pipeline(dir.path(), "seed = 10\ncity = \"Synthville\"\n\n[synth]\nn_points = 200\n");
    ensure(p.cfg.retrieval.mode == TransportMode::Replay, || "default mode is not replay".into())?;
    let mut reports = Vec::new();
    for stage in [stages::synth, stages::sample, stages::retrieve, stages::predict, stages::bias] {
        reports.push(stage(&p).map_err(|e| e.to_string())?);
    }
    for r in &reports {
        if let Some(n) = r.count("network_calls") {
            ensure(n == 0, || format!("{} made {n} network calls in replay mode", r.stage))?;
        }
    }
    let first = reports[2].count("provider_requests").unwrap_or(0);

    // the same points through a retriever whose network refuses everything
    let wire = Arc::new(Tripwire(AtomicUsize::new(0)));
    let cfg = RetrievalConfig { cache_dir: dir.path().join("fresh-cache"), ..p.cfg.retrieval.clone() };
    let retriever = Retriever::new(cfg, wire.clone()).map_err(|e| e.to_string())?;
    let points: Vec<GeoPoint> = dataset(&p).into_iter().map(|r| r.point).collect();
    let built = retriever.build_many(&points);
    ensure(built.iter().all(Result::is_ok), || "replay failed for some sample".into())?;
    ensure(wire.0.load(Ordering::SeqCst) == 0 && retriever.network_calls() == 0, || "replay touched the network".into())?;

    std::fs::remove_file(p.manifest_path("retrieve")).map_err(|e| e.to_string())?;
    let rerun = stages::retrieve(&p).map_err(|e| e.to_string())?;
    let again = rerun.count("provider_requests").unwrap_or(u64::MAX);
    ensure(again == 0, || format!("retrieve rerun issued {again} provider requests"))?;
    Ok(format!(
        "replay network calls 0 across stages and {} contexts; first retrieve {first} fixture-served requests, rerun {again}",
        points.len()
    ))
}

// ------------------------------------------------------------------ 11

const MODELS: [&str; 5] = ["Our Model", "KNN", "XGBoost", "MLP-BERT", "ResNet50"];

const TABLE2: [(IndicatorTask, [f64; 5]); 5] = [
    (IndicatorTask::Population, [0.5265, 0.3572, 0.3676, 0.1752, 0.1226]),
    (IndicatorTask::Health, [0.6661, 0.5906, 0.4900, 0.1613, 0.0271]),
    (IndicatorTask::Ndvi, [0.5690, 0.5693, 0.5110, 0.1660, 0.0988]),
    (IndicatorTask::BuildingHeight, [0.5609, 0.3756, 0.3444, 0.1745, 0.1273]),
    (IndicatorTask::Impervious, [0.5224, 0.2198, 0.2108, 0.0846, 0.1348]),
];

const TABLE3: [(&str, [f64; 4]); 7] = [
    ("Hongkong", [0.4460, 0.4157, 0.3420, 0.4079]),
    ("Tokyo", [0.7411, 0.7134, 0.6755, 0.7367]),
    ("Singapore", [0.5303, 0.1983, 0.1463, 0.1187]),
    ("LA", [0.4911, 0.2069, 0.1096, 0.2320]),
    ("NYC", [0.4500, 0.3644, 0.2577, 0.2807]),
    ("London", [0.4341, 0.2669, -0.1382, -0.1386]),
    ("Paris", [0.5929, 0.5692, 0.5748, 0.5450]),
];

#[rustfmt::skip]
const TABLE_A1_1: [(&str, [[f64; 3]; 5]); 7] = [
    ("Hongkong", [[1.7118, 2.3574, 0.4460], [1.9641, 2.7232, 0.2607], [1.8609, 2.6977, 0.2745], [2.0179, 2.6153, 0.3182], [2.5628, 2.9863, 0.1110]]),
    ("Tokyo", [[0.6096, 0.9772, 0.7411], [0.6840, 1.0422, 0.7050], [0.7445, 1.0641, 0.6925], [0.9318, 1.2887, 0.5490], [1.2374, 1.5479, 0.3494]]),
    ("Singapore", [[1.4095, 1.7742, 0.5303], [1.2282, 2.0022, 0.4443], [1.2852, 1.9822, 0.4554], [1.5096, 2.0998, 0.3889], [1.9020, 2.4031, 0.1996]]),
    ("LA", [[1.0055, 1.5662, 0.4911], [1.6071, 2.0636, 0.1464], [1.6624, 2.0166, 0.1848], [2.3049, 2.8574, -0.6353], [2.1505, 2.5483, -0.3006]]),
    ("NYC", [[1.2755, 2.1606, 0.4500], [2.2237, 2.8013, 0.0753], [2.1359, 2.6511, 0.1718], [1.9641, 2.4554, 0.2896], [2.0994, 2.5296, 0.2460]]),
    ("London", [[1.0389, 1.5291, 0.4341], [1.4116, 1.7866, 0.2202], [1.2731, 1.8045, 0.2045], [1.7439, 2.1846, -0.1659], [1.4981, 1.9686, 0.0532]]),
    ("Paris", [[0.7332, 1.0111, 0.5929], [0.6659, 0.9414, 0.6488], [0.7483, 1.0173, 0.5899], [0.8732, 1.1436, 0.4818], [1.1100, 1.4211, 0.1998]]),
];

fn row(city: &str, task: IndicatorTask, model: &str, [mae, rmse, r2]: [f64; 3]) -> MetricsRow {
    MetricsRow { city: city.into(), task, model: model.into(), space: Space::Bin, mae, rmse, r2, n: 100 }
}

fn parse_csv(text: &str) -> Vec<Vec<String>> {
    csv::ReaderBuilder::new()
        .has_headers(false)
        .from_reader(text.as_bytes())
        .records()
        .map(|r| r.unwrap().iter().map(str::to_string).collect())
        .collect()
}

fn criterion_11() -> Outcome {
    let models: Vec<String> = MODELS.iter().map(|m| m.to_string()).collect();
    let mut cells = 0;

    // Table 2 shape: one report row per (task, model)
    let report = MetricsReport {
        rows: TABLE2.iter().flat_map(|(t, vs)| MODELS.iter().zip(vs).map(|(m, v)| row("stored", *t, m, [0.0, 0.0, *v]))).collect(),
        notes: Vec::new(),
    };
    let t2 = parse_csv(&task_model_r2(&report, Space::Bin, &models).to_csv());
    ensure(t2[0][1..] == models[..], || format!("Table 2 header {:?}", t2[0]))?;
    for (i, (task, vs)) in TABLE2.iter().enumerate() {
        ensure(t2[i + 1][0] == task.table_label(), || format!("Table 2 row {}", t2[i + 1][0]))?;
        for (j, v) in vs.iter().enumerate() {
            ensure(t2[i + 1][j + 1] == format!("{v:.4}"), || format!("Table 2 {task}/{}: {}", MODELS[j], t2[i + 1][j + 1]))?;
            cells += 1;
        }
    }

    // Table A1.1 shape, and its city mean reproduces Table 2's population row
    let report = MetricsReport {
        rows: TABLE_A1_1
            .iter()
            .flat_map(|(c, ms)| MODELS.iter().zip(ms).map(|(m, v)| row(c, IndicatorTask::Population, m, *v)))
            .collect(),
        notes: Vec::new(),
    };
    let a1 = parse_csv(&city_model_metrics(&report, IndicatorTask::Population, Space::Bin, &models).to_csv());
    for (city, ms) in TABLE_A1_1 {
        let line = a1.iter().find(|l| l[0] == city).ok_or_else(|| format!("Table A1.1 lacks {city}"))?;
        for (j, m) in ms.iter().enumerate() {
            for (k, v) in m.iter().enumerate() {
                ensure(line[1 + 3 * j + k] == format!("{v:.4}"), || format!("A1.1 {city}/{}: {}", MODELS[j], line[1 + 3 * j + k]))?;
                cells += 1;
            }
        }
    }
    let pop = parse_csv(&task_model_r2(&report, Space::Bin, &models).to_csv());
    for (j, v) in TABLE2[0].1.iter().enumerate() {
        ensure(pop[1][j + 1] == format!("{v:.4}"), || format!("A1.1 mean for {}: {} vs {v:.4}", MODELS[j], pop[1][j + 1]))?;
    }

    // Table 3 shape: one run per preset
    let runs: Vec<AblationRun> = Preset::ALL
        .iter()
        .enumerate()
        .map(|(j, &preset)| AblationRun {
            preset,
            flags: preset.flags(),
            r2: TABLE3.iter().map(|(c, vs)| (c.to_string(), BTreeMap::from([(IndicatorTask::Population, vs[j])]))).collect(),
            gateway_calls: 0,
            records: Vec::new(),
            transcripts: Vec::new(),
            error: None,
            notes: Vec::new(),
        })
        .collect();
    let t3 = parse_csv(&ablation_grid(&runs, IndicatorTask::Population).to_csv());
    ensure(t3[0].len() == 5, || format!("Table 3 header {:?}", t3[0]))?;
    for (city, vs) in TABLE3 {
        let line = t3.iter().find(|l| l[0] == city).ok_or_else(|| format!("Table 3 lacks {city}"))?;
        for (j, v) in vs.iter().enumerate() {
            ensure(line[j + 1] == format!("{v:.4}"), || format!("Table 3 {city}/{}: {}", t3[0][j + 1], line[j + 1]))?;
            cells += 1;
        }
    }
    Ok(format!("{cells} stored cells rendered at 4 dp; A1.1 city means reproduce Table 2 population row"))
}

// ------------------------------------------------------------------ 12

fn criterion_12() -> Outcome {
    let ids = |n: usize| (0..n).map(|i| format!("s{i}")).collect::<Vec<_>>();
    for seed in 0..100u64 {
        let cfg = SplitConfig { train_frac: 0.6, val_frac: 0.1, test_frac: 0.3, seed };
        for (n, want) in [(10, (6, 1, 3)), (7, (4, 1, 2))] {
            let s = split_dataset(&ids(n), &cfg).map_err(|e| e.to_string())?;
            ensure((s.train.len(), s.val.len(), s.test.len()) == want, || format!("seed {seed} n {n}: sizes"))?;
            let all: HashSet<&String> = s.train.iter().chain(&s.val).chain(&s.test).collect();
            ensure(all.len() == n, || format!("seed {seed} n {n}: splits overlap or drop ids"))?;
            ensure(split_dataset(&ids(n), &cfg).map_err(|e| e.to_string())? == s, || format!("seed {seed}: not deterministic"))?;
        }
    }
    Ok("10 -> 6/1/3, 7 -> 4/1/2; disjoint and deterministic for 100 seeds".into())
}

// ------------------------------------------------------------------ driver

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        (1, "metric oracle equivalence", criterion_1),
        (2, "metric hand cases", criterion_2),
        (3, "KNN exactness", criterion_3),
        (4, "farthest-first greedy property", criterion_4),
        (5, "binning", criterion_5),
        (6, "GBRT", criterion_6),
        (7, "ablation contracts", criterion_7),
        (8, "end-to-end oracle closure", criterion_8),
        (9, "bias analysis", criterion_9),
        (10, "replay hermeticity", criterion_10),
        (11, "report fidelity", criterion_11),
        (12, "split apportionment", criterion_12),
    ];
    let filter: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !filter.is_empty() && !filter.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = Duration::as_secs_f64(&t0.elapsed());
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail} [{secs:.2}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why} [{secs:.2}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
