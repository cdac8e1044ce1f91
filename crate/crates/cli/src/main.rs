use std::fs;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rarequery_client::Client;
use rarequery_core::classifier::{load_model, save_model, ModelBundle};
use rarequery_core::engine::{ActiveSession, GroundTruthOracle, SessionData};
use rarequery_core::experiments::{
    aggregate, labeling_time, pairwise_significance, run_active_benchmark, run_passive_benchmark,
    session_inputs, split_labels, summarize_metrics, write_aggregate_csv, write_curves_csv,
    write_raw_trials, BenchmarkConfig, ExperimentContext, SplitSpec, TrialResult,
    SECONDS_PER_LABEL,
};
use rarequery_core::mapping::{
    detections_to_points, elbow_scan, export_map, merge_points, registry_points, DetectionMap,
};
use rarequery_core::protocol::{CreateSessionRequest, OracleKind, SessionState};
use rarequery_core::ranking::{
    bayes_positive_curve, metric_values, quantile_thresholds, RankingSpec,
};
use rarequery_core::seeds::{self, Stream};
use rarequery_core::tilestore::synth::{generate_synthetic_site, SiteConfig};
use rarequery_core::tilestore::{
    ensure_modality, fuse_modalities, load_site, load_tileset, prepare_tileset, save_site,
    save_tileset, Extent, Label,
};
use rarequery_core::{
    Band, ClassifierConfig, ClassifierState, CropGeometry, Modality, ProbabilisticClassifier,
    Strategy, StrategyKind, Tileset,
};

#[derive(Parser)]
#[command(
    name = "rarequery",
    version,
    about = "Rare-positive active learning over aerial imagery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic site (orthomosaics plus midden registry).
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of middens to place.
        #[arg(long, default_value_t = 5)]
        positives: usize,
        #[arg(long, default_value_t = 485.0)]
        extent_m: f64,
        /// Bands to render.
        #[arg(long, value_delimiter = ',', default_value = "thermal,rgb,lidar")]
        bands: Vec<Band>,
        /// Use the calibrated benchmark site (overrides --positives/--extent-m).
        #[arg(long)]
        benchmark: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Crop a site into a labeled tileset.
    Crop {
        #[arg(long, default_value_t = 20.0)]
        interval_m: f64,
        #[arg(long, default_value_t = 5.0)]
        stride_m: f64,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also store a fused modality, e.g. `thermal,rgb`.
        #[arg(long, value_delimiter = ',')]
        fuse: Vec<Band>,
    },
    /// Warmth-metric diagnostic: P(positive | MPV >= t) per threshold.
    Diagnose {
        #[arg(long)]
        tileset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        thresholds: usize,
    },
    /// Train a passive classifier on a balanced split and save it.
    Train {
        #[arg(long)]
        tileset: PathBuf,
        #[arg(long, default_value = "thermal")]
        modality: Modality,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Passive baselines over repeated random splits.
    Passive {
        #[arg(long)]
        tileset: PathBuf,
        /// Defaults to every single band in the tileset.
        #[arg(long, value_delimiter = ',')]
        modalities: Vec<Modality>,
        #[arg(long, default_value_t = 30)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Active-learning benchmark with a ground-truth oracle.
    ActiveBench {
        #[arg(long)]
        tileset: PathBuf,
        /// `kind:modality[,modality...]`; repeatable.
        #[arg(long = "strategy", default_values = ["multimodal-single:thermal", "random:thermal"])]
        strategies: Vec<String>,
        #[arg(long, default_value_t = 500)]
        budget: usize,
        #[arg(long, default_value_t = 10)]
        batch: usize,
        /// Checkpoint spacing in labels.
        #[arg(long, default_value_t = 50)]
        every: usize,
        #[arg(long, default_value_t = 30)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// One active session, headless or through a running server.
    Active {
        /// Tileset directory (headless) or tileset name (with --server).
        #[arg(long)]
        tileset: String,
        #[arg(long, default_value = "multimodal-single")]
        strategy: StrategyKind,
        #[arg(long, value_delimiter = ',', default_value = "thermal")]
        modalities: Vec<Modality>,
        #[arg(long, default_value_t = 500)]
        budget: usize,
        #[arg(long, default_value_t = 10)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_oracle, default_value = "ground-truth")]
        oracle: OracleKind,
        /// Hold out a balanced test set and report accuracy each round.
        #[arg(long)]
        evaluate: bool,
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Base URL of a labeling service, e.g. http://127.0.0.1:8080.
        #[arg(long)]
        server: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cluster detections (or ground-truth middens) into a GeoJSON map.
    Map {
        #[arg(long)]
        tileset: PathBuf,
        /// Trained model; omit to map the site's ground-truth middens.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Site directory holding the midden registry (ground-truth mode).
        #[arg(long)]
        site: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Detections closer than this are merged.
        #[arg(long, default_value_t = 20.0)]
        merge_radius_m: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print inertia for k = 1..=N before clustering.
        #[arg(long)]
        elbow: Option<usize>,
        /// Leave the site extent out of the export.
        #[arg(long)]
        redact: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the labeling service.
    Serve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
    },
}

fn parse_oracle(s: &str) -> Result<OracleKind, String> {
    match s.replace('-', "_").as_str() {
        "human" => Ok(OracleKind::Human),
        "ground_truth" => Ok(OracleKind::GroundTruth),
        _ => Err(format!("unknown oracle {s:?} (human or ground-truth)")),
    }
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    let (kind, mods) = s
        .split_once(':')
        .with_context(|| format!("strategy {s:?} should look like kind:modality[,modality]"))?;
    let kind: StrategyKind = kind.parse().map_err(anyhow::Error::msg)?;
    let modalities = mods
        .split(',')
        .map(|m| m.parse::<Modality>())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Strategy::new(kind, modalities)?)
}

fn classifier(learning_rate: Option<f64>) -> ClassifierConfig {
    let mut c = ClassifierConfig::reference();
    if let Some(lr) = learning_rate {
        c.learning_rate = lr;
    }
    c
}

fn load(dir: &Path) -> Result<Tileset> {
    load_tileset(dir).with_context(|| format!("loading tileset {}", dir.display()))
}

fn write_trials(out: &Path, trials: &[TrialResult]) -> Result<()> {
    fs::create_dir_all(out)?;
    write_raw_trials(out.join("raw_trials.jsonl"), trials)?;
    write_aggregate_csv(out.join("aggregate.csv"), &aggregate(trials))?;
    write_curves_csv(out.join("curves.csv"), trials)?;
    for m in summarize_metrics(trials) {
        let fmt = |s: Option<rarequery_core::experiments::Summary>| match s {
            Some(s) => format!("{:.3}±{:.3}", s.mean, s.sem.unwrap_or(0.0)),
            None => "n/a".into(),
        };
        println!(
            "{:<36} acc {}  prec {}  rec {}  f1 {}",
            m.strategy,
            fmt(m.accuracy),
            fmt(m.precision),
            fmt(m.recall),
            fmt(m.f1)
        );
    }
    for s in pairwise_significance(trials) {
        println!("{} vs {}: t = {:.3}, p = {:.4}", s.a, s.b, s.t, s.p_value);
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn tileset_extent(ts: &Tileset) -> Option<Extent> {
    let half = ts.crop.interval_m / 2.0;
    let mut it = ts.tiles.iter().map(|t| t.center);
    let first = it.next()?;
    let mut e = Extent {
        min_x: first.0,
        min_y: first.1,
        max_x: first.0,
        max_y: first.1,
    };
    for (x, y) in it {
        e.min_x = e.min_x.min(x);
        e.min_y = e.min_y.min(y);
        e.max_x = e.max_x.max(x);
        e.max_y = e.max_y.max(y);
    }
    Some(Extent {
        min_x: e.min_x - half,
        min_y: e.min_y - half,
        max_x: e.max_x + half,
        max_y: e.max_y + half,
    })
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?)
}

async fn active_remote(url: &str, req: CreateSessionRequest, out: Option<&Path>) -> Result<()> {
    let client = Client::new(url);
    let (created, fresh) = client.create_session(&req).await?;
    let id = created.session_id;
    println!("session {id}{}", if fresh { "" } else { " (existing)" });
    if req.oracle == OracleKind::Human {
        println!("awaiting labels at {url}/sessions/{id}/batch");
        return Ok(());
    }
    loop {
        let status = client.status(&id).await?;
        match status.state {
            SessionState::Complete => break,
            SessionState::Failed => bail!("session failed: {}", status.error.unwrap_or_default()),
            _ => tokio::time::sleep(Duration::from_millis(200)).await,
        }
    }
    let results = client.results(&id).await?;
    let last = results.run_log.rounds.last();
    println!(
        "{} labels, {} positives found",
        last.map_or(0, |r| r.labels_used),
        last.map_or(0, |r| r.positives_found)
    );
    if let Some(out) = out {
        fs::write(out, results.run_log.to_json_bytes())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            seed,
            positives,
            extent_m,
            bands,
            benchmark,
            out,
        } => {
            let cfg = if benchmark {
                SiteConfig {
                    bands,
                    ..SiteConfig::benchmark(seed)
                }
            } else {
                SiteConfig {
                    seed,
                    positive_count: positives,
                    extent_m,
                    bands,
                    ..SiteConfig::default()
                }
            };
            let (mosaics, registry) = generate_synthetic_site(&cfg)?;
            save_site(&mosaics, &registry, Some(seed), &out)?;
            println!(
                "{} middens over {extent} m; wrote {}",
                registry.centers.len(),
                out.display(),
                extent = cfg.extent_m
            );
        }
        Command::Crop {
            interval_m,
            stride_m,
            input,
            out,
            fuse,
        } => {
            let (mosaics, registry, _) = load_site(&input)?;
            let mut ts = prepare_tileset(
                &mosaics,
                CropGeometry::new(interval_m, stride_m)?,
                Some(&registry),
            )?;
            if !fuse.is_empty() {
                let m = fuse_modalities(&mut ts, &fuse, None)?;
                println!("fused {m}");
            }
            save_tileset(&ts, &out)?;
            let c = ts.counts();
            println!(
                "{} tiles ({} positive, {} negative, {} removed); wrote {}",
                ts.len(),
                c.positives,
                c.negatives,
                ts.removal_log.len(),
                out.display()
            );
        }
        Command::Diagnose {
            tileset,
            out,
            thresholds,
        } => {
            let ts = load(&tileset)?;
            let metrics = metric_values(&ts, &RankingSpec::default())?;
            let curve =
                bayes_positive_curve(&ts, &metrics, &quantile_thresholds(&metrics, thresholds))?;
            let mut f = fs::File::create(&out)?;
            writeln!(f, "threshold,p_conditional,n_at_least_t,m_t")?;
            for p in &curve.points {
                writeln!(
                    f,
                    "{},{},{},{}",
                    p.threshold, p.p_conditional, p.n_at_least_t, p.m_t
                )?;
            }
            println!("base rate {:.5}", curve.base_rate);
            if let Some(top) = curve.points.last() {
                println!(
                    "at MPV >= {:.3}: {}/{} positive ({:.4})",
                    top.threshold, top.m_t, top.n_at_least_t, top.p_conditional
                );
            }
            if curve.points.iter().any(|p| !p.exact_match) {
                bail!("factored and direct forms disagree");
            }
            println!("wrote {}", out.display());
        }
        Command::Train {
            tileset,
            modality,
            seed,
            learning_rate,
            out,
        } => {
            let mut ts = load(&tileset)?;
            ensure_modality(&mut ts, modality)?;
            let cfg = ClassifierConfig {
                init_seed: seeds::derive(seed, 0, Stream::Init, 0),
                ..classifier(learning_rate)
            };
            let features = rarequery_core::FeatureTable::build(&ts, modality, cfg.pool_grid, None)?;
            let labels = ts.labels();
            let split = split_labels(&labels, &SplitSpec::passive(seed))?;
            let ys: Vec<bool> = split
                .train
                .iter()
                .map(|&i| labels[i] == Label::Positive)
                .collect();
            let mut model = ClassifierState::new(features.dim(), cfg)?;
            let report = model.train(
                &features.rows(&split.train),
                &ys,
                seeds::derive(seed, 0, Stream::Shuffle, 0),
            )?;
            let correct = split
                .test
                .iter()
                .zip(&split.test_labels)
                .filter(|(&id, &y)| model.classify(features.row(id)) == y)
                .count();
            println!(
                "trained on {} tiles (loss {:.4} -> {:.4}); test accuracy {:.4}",
                split.train.len(),
                report.initial_loss,
                report.final_loss,
                correct as f64 / split.test.len() as f64
            );
            save_model(
                &ModelBundle {
                    modality,
                    feature_scale: features.scale,
                    classifier: model,
                },
                &out,
            )?;
            println!("wrote {}", out.display());
        }
        Command::Passive {
            tileset,
            modalities,
            trials,
            seed,
            learning_rate,
            out,
        } => {
            let mut ts = load(&tileset)?;
            let modalities = if modalities.is_empty() {
                ts.modalities()
                    .into_iter()
                    .filter(|m| !m.is_fused())
                    .collect()
            } else {
                modalities
            };
            let ctx = ExperimentContext::new(&mut ts, &modalities, classifier(learning_rate))?;
            println!(
                "{} tiles, base rate {:.5}",
                ctx.labels.len(),
                ctx.base_rate()
            );
            let results = run_passive_benchmark(&ctx, &modalities, trials, seed)?;
            write_trials(&out, &results)?;
        }
        Command::ActiveBench {
            tileset,
            strategies,
            budget,
            batch,
            every,
            trials,
            seed,
            learning_rate,
            out,
        } => {
            let strategies = strategies
                .iter()
                .map(|s| parse_strategy(s))
                .collect::<Result<Vec<_>>>()?;
            let mut modalities: Vec<Modality> = strategies
                .iter()
                .flat_map(|s| s.modalities.clone())
                .collect();
            modalities.sort();
            modalities.dedup();
            let mut ts = load(&tileset)?;
            let ctx = ExperimentContext::new(&mut ts, &modalities, classifier(learning_rate))?;
            let mut config = BenchmarkConfig::new(budget, every, trials, seed);
            config.batch_size = batch;
            println!(
                "{} tiles, base rate {:.5}",
                ctx.labels.len(),
                ctx.base_rate()
            );
            let results = run_active_benchmark(&ctx, &strategies, &config)?;
            for s in &strategies {
                let rates: Vec<f64> = results
                    .iter()
                    .filter(|t| t.strategy == s.label())
                    .filter_map(|t| t.queried_positive_rate)
                    .collect();
                if !rates.is_empty() {
                    let mean = rates.iter().sum::<f64>() / rates.len() as f64;
                    println!(
                        "{:<36} queried-positive rate {:.4} ({:.1}x base)",
                        s.label(),
                        mean,
                        mean / ctx.base_rate()
                    );
                }
            }
            println!(
                "labeling time at budget {budget}: {}",
                labeling_time(budget as u64, SECONDS_PER_LABEL)
            );
            write_trials(&out, &results)?;
        }
        Command::Active {
            tileset,
            strategy,
            modalities,
            budget,
            batch,
            seed,
            oracle,
            evaluate,
            learning_rate,
            server,
            out,
        } => {
            let req = CreateSessionRequest {
                tileset: tileset.clone(),
                strategy,
                modalities,
                budget,
                batch,
                seed,
                oracle,
                evaluate,
                learning_rate,
                idempotency_key: None,
            };
            if let Some(url) = server {
                return runtime()?.block_on(active_remote(&url, req, out.as_deref()));
            }
            if oracle == OracleKind::Human {
                bail!("human labeling runs through the service; pass --server");
            }
            let mut ts = load(Path::new(&tileset))?;
            let strategy = req.strategy()?;
            let config = req.session_config();
            let (pool, test) = session_inputs(&ts.labels(), evaluate, seed)?;
            let data =
                SessionData::prepare(&mut ts, &strategy, &config.classifier, Some(pool), test)?;
            let mut session = ActiveSession::new(strategy, config, data)?;
            let log = session.run(&mut GroundTruthOracle::from_tileset(&ts))?;
            for r in &log.rounds {
                let acc = r
                    .test_accuracy
                    .map_or(String::new(), |a| format!("  acc {a:.4}"));
                println!(
                    "round {:>3}  labels {:>4}  found {:>3}  weights {:?}{acc}",
                    r.round, r.labels_used, r.positives_found, r.weights
                );
            }
            if let Some(out) = out {
                fs::write(&out, log.to_json_bytes())?;
                println!("wrote {}", out.display());
            }
        }
        Command::Map {
            tileset,
            model,
            site,
            k,
            threshold,
            merge_radius_m,
            seed,
            elbow,
            redact,
            out,
        } => {
            let mut ts = load(&tileset)?;
            let points = match (model, site) {
                (Some(path), _) => {
                    let bundle = load_model(&path)?;
                    ensure_modality(&mut ts, bundle.modality)?;
                    let features = bundle.features(&ts)?;
                    let outputs: Vec<f64> = (0..ts.len())
                        .map(|i| bundle.classifier.predict_proba(features.row(i)))
                        .collect();
                    detections_to_points(&ts, &outputs, threshold, merge_radius_m)?
                }
                (None, Some(site)) => {
                    let (_, registry, _) = load_site(&site)?;
                    merge_points(registry_points(&registry), merge_radius_m)
                }
                (None, None) => bail!("pass --model for detections or --site for ground truth"),
            };
            println!("{} points", points.len());
            if let Some(k_max) = elbow {
                let xy: Vec<[f64; 2]> = points.iter().map(|p| p.xy()).collect();
                for (k, inertia) in elbow_scan(&xy, k_max.min(xy.len()), seed)? {
                    println!("k = {k:>2}  inertia {inertia:.1}");
                }
            }
            let mut map = DetectionMap::build(points, k, seed)?;
            map.extent = tileset_extent(&ts);
            export_map(&map, &out, redact)?;
            println!("{} clusters; wrote {}", map.clusters.len(), out.display());
        }
        Command::Serve { data, port, host } => {
            let addr = SocketAddr::new(host, port);
            runtime()?.block_on(rarequery_service::serve(data, addr))?;
        }
    }
    Ok(())
}

fn main() {
    tracing_subscriber::fmt()
        .with_max_level(tracing_subscriber::filter::LevelFilter::INFO)
        .with_writer(std::io::stderr)
        .init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
