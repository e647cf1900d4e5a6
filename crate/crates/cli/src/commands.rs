use std::fs;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use skinpatch::bench::{self, ChannelConfig, LatencyFixture, Pipeline, KEY_LEN};
use skinpatch::data::{derive_seed, load_dataset, load_manifest, synth_generate, Dataset, SynthConfig};
use skinpatch::imageio::read_ppm;
use skinpatch::metrics::{self, ConfusionCounts};
use skinpatch::model::{evaluate, load_checkpoint, score_all, save_checkpoint, train, ConvBlock, DecisionConfig, Model, ModelConfig, TrainConfig, WeightInit};
use skinpatch::pem::{extract_face, synthetic, FaceRecord, Keypoints, PemConfig};
use skinpatch::service::{self, Client, ServerConfig};

use crate::args::*;

/// Threshold chosen on validation data, stored next to a checkpoint.
pub const DECISION_FILE: &str = "decision.json";

#[derive(Debug, Serialize, Deserialize)]
struct StoredDecision {
    threshold: f64,
    val_acer_at_threshold: f64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Extract(a) => extract(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Serve(a) => serve(a),
        Command::Predict(a) => predict(a),
        Command::Bench(a) => bench_cmd(a),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(value)?;
    fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load_data(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir).with_context(|| format!("loading corpus {}", dir.display()))?;
    Ok(load_dataset(&manifest)?)
}

fn stored_threshold(model_dir: &Path) -> Result<Option<f64>> {
    let path = model_dir.join(DECISION_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let d: StoredDecision = serde_json::from_str(&fs::read_to_string(&path)?).with_context(|| format!("parsing {}", path.display()))?;
    Ok(Some(d.threshold))
}

fn decision(explicit: Option<f64>, model_dir: &Path) -> Result<DecisionConfig> {
    let h = match explicit {
        Some(h) => h,
        None => stored_threshold(model_dir)?.unwrap_or(0.5),
    };
    Ok(DecisionConfig::new(h)?)
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_per_class: a.n,
        patch_size: a.patch_size,
        seed: a.seed,
    };
    let manifest = synth_generate(&a.out, &cfg)?;
    println!(
        "wrote {} samples ({} bona fide, {} attack) to {}",
        manifest.records.len(),
        manifest.count(skinpatch::model::Label::BonaFide),
        manifest.count(skinpatch::model::Label::Attack),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ExtractLine {
    source: String,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    patchset: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    regions: Vec<skinpatch::pem::PatchRegion>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn extract(a: ExtractArgs) -> Result<()> {
    let cfg = PemConfig {
        patch_size: a.patch_size,
        ..PemConfig::default()
    };
    let mut images: Vec<PathBuf> = fs::read_dir(&a.input)
        .with_context(|| format!("listing {}", a.input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    images.sort();
    if images.is_empty() {
        bail!("no .ppm images in {}", a.input.display());
    }
    let patch_dir = a.out.join("patches");
    fs::create_dir_all(&patch_dir).with_context(|| format!("creating {}", patch_dir.display()))?;
    let mut lines = String::new();
    let mut ok = 0;
    for (i, image) in images.iter().enumerate() {
        let stem = image.file_stem().unwrap().to_string_lossy().into_owned();
        let seed = derive_seed(a.seed, i as u64);
        let result = (|| -> Result<_> {
            let kp = Keypoints::load(&image.with_extension("json"))?;
            let face = FaceRecord::new(read_ppm(image)?, kp, stem.clone())?;
            Ok(extract_face(&face, a.k, &cfg, seed)?)
        })();
        let line = match result {
            Ok(set) => {
                let rel = format!("patches/{stem}.w32");
                fs::write(a.out.join(&rel), set.to_w32()?)?;
                ok += 1;
                ExtractLine {
                    source: stem,
                    seed,
                    patchset: Some(rel),
                    regions: set.regions,
                    error: None,
                }
            }
            Err(e) => {
                warn!("{stem}: {e:#}");
                ExtractLine {
                    source: stem,
                    seed,
                    patchset: None,
                    regions: Vec::new(),
                    error: Some(format!("{e:#}")),
                }
            }
        };
        lines.push_str(&serde_json::to_string(&line)?);
        lines.push('\n');
    }
    fs::write(a.out.join("extract.jsonl"), lines)?;
    println!("extracted {ok} of {} faces into {}", images.len(), a.out.display());
    if ok == 0 {
        bail!("no face passed extraction");
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let data = load_data(&a.data)?;
    let (train_set, val_set) = match &a.val {
        Some(v) => (data, load_data(v)?),
        None => {
            if !(a.val_fraction > 0.0 && a.val_fraction < 1.0) {
                bail!("--val-fraction must lie in (0, 1)");
            }
            let (tr, va, _) = data.split(1.0 - a.val_fraction, a.val_fraction, a.seed);
            (tr, va)
        }
    };
    info!("training on {} samples, validating on {}", train_set.len(), val_set.len());
    let config = ModelConfig {
        branches: a.branches,
        share_branch_weights: a.share_weights,
        backbone: a.backbone.iter().map(|&c| ConvBlock::new(c, 3, 1)).collect(),
        head_dim: 2,
        patch_size: train_set.patch_size,
        seed: a.seed,
        init: match a.init {
            InitArg::FanIn => WeightInit::FanIn,
            InitArg::He => WeightInit::He,
        },
        standardize_inputs: !a.no_standardize,
    };
    let mut model = Model::build(config)?;
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.lr,
        seed: a.seed,
        augment: !a.no_augment,
        random_patches: !a.first_k,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &train_set, &val_set, &tc)?;
    save_checkpoint(&model, &a.out)?;

    let val = evaluate(&model, &val_set, &DecisionConfig::default())?;
    let curve = metrics::sweep(&val.pairs, a.sweep_points)?;
    let best = *curve.best();
    write_json(
        &a.out,
        DECISION_FILE,
        &StoredDecision {
            threshold: best.threshold,
            val_acer_at_threshold: best.acer,
        },
    )?;
    write_json(&a.out, "train_report.json", &report)?;
    println!(
        "trained {} epochs: loss {:.4} -> {:.4}, best epoch {} (val ACER {:.2}% at 0.5); validation-chosen threshold {:.3} (val ACER {:.2}%)",
        report.epochs.len(),
        report.initial_loss,
        report.final_loss,
        report.best_epoch,
        100.0 * report.best_val_acer,
        best.threshold,
        100.0 * best.acer
    );
    Ok(())
}

/// Metrics at one threshold; a rate is `None` when its class is absent.
#[derive(Serialize)]
struct EvalReport {
    threshold: f64,
    #[serde(flatten)]
    counts: ConfusionCounts,
    apcer: Option<f64>,
    bpcer: Option<f64>,
    acer: Option<f64>,
    n: u64,
}

impl EvalReport {
    fn new(counts: ConfusionCounts, threshold: f64) -> Self {
        let apcer = metrics::apcer(&counts).ok();
        let bpcer = metrics::bpcer(&counts).ok();
        EvalReport {
            threshold,
            counts,
            apcer,
            bpcer,
            acer: apcer.zip(bpcer).map(|(a, b)| metrics::acer(a, b)),
            n: counts.total(),
        }
    }

    fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |v| format!("{:6.2}%", 100.0 * v));
        format!(
            "threshold {:.3}  n {}\n  APCER {}  ({} of {} attacks accepted)\n  BPCER {}  ({} of {} bona fide rejected)\n  ACER  {}",
            self.threshold,
            self.n,
            pct(self.apcer),
            self.counts.fn_,
            self.counts.attacks(),
            pct(self.bpcer),
            self.counts.fp,
            self.counts.bona_fides(),
            pct(self.acer)
        )
    }
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let cfg = decision(a.threshold, &a.model)?;
    let data = load_data(&a.data)?;
    let pairs = score_all(&model, &data)?;
    let report = EvalReport::new(metrics::confusion(&pairs, cfg.threshold)?, cfg.threshold);
    println!("{}", report.table());
    if let Some(out) = &a.out {
        write_json(out, "metrics.json", &report)?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let data = load_data(&a.data)?;
    let result = evaluate(&model, &data, &DecisionConfig::default())?;
    let curve = metrics::sweep(&result.pairs, a.points)?;
    let best = curve.best();
    println!(
        "best threshold {:.3}: APCER {:.2}%  BPCER {:.2}%  ACER {:.2}%",
        best.threshold,
        100.0 * best.apcer,
        100.0 * best.bpcer,
        100.0 * best.acer
    );
    if let Some(out) = &a.out {
        write_json(out, "sweep.json", &curve)?;
        fs::write(out.join("sweep.csv"), curve.to_csv())?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let cfg = ServerConfig {
        decision: decision(a.threshold, &a.model)?,
        max_connections: a.max_connections,
        ..ServerConfig::default()
    };
    let server = service::serve(model, cfg, a.bind.as_str())?;
    println!("listening on {} (model {})", server.local_addr(), hex(&server.model_digest()));
    server.wait();
    Ok(())
}

fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .with_context(|| format!("resolving {addr}"))?
        .next()
        .ok_or_else(|| anyhow!("{addr} resolves to no address"))
}

fn predict(a: PredictArgs) -> Result<()> {
    let client = Client::new(resolve(&a.server)?).with_timeout(Duration::from_millis(a.timeout_ms));
    if a.health {
        let h = client.health()?;
        println!(
            "{}",
            json!({
                "status": "ok",
                "version": h.version,
                "branches": h.branches,
                "patch_size": h.patch_size,
                "threshold": h.threshold,
                "model_digest": hex(&h.model_digest),
            })
        );
        return Ok(());
    }
    let image = a.image.expect("clap enforces --image");
    let kp_path = a.keypoints.unwrap_or_else(|| image.with_extension("json"));
    let face = FaceRecord::new(read_ppm(&image)?, Keypoints::load(&kp_path)?, image.display().to_string())?;
    let pem = PemConfig {
        patch_size: client.health()?.patch_size as usize,
        ..PemConfig::default()
    };
    let r = client.predict_remote(&face, &pem, a.seed)?;
    println!(
        "{}",
        json!({
            "id": r.id,
            "p_bona_fide": r.p_bona_fide,
            "label": r.label,
            "inference_ms": r.inference_ms,
            "model_digest": hex(&r.model_digest),
        })
    );
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    if let Some(path) = &a.fixture {
        let report = LatencyFixture::load(path)?.replay()?;
        print!("{}", report.render_table());
        if let Some(out) = &a.out {
            write_json(out, "bench.json", &report)?;
        }
        return Ok(());
    }
    if a.trials == 0 {
        bail!("--trials must be positive");
    }
    let model = match &a.model {
        Some(dir) => load_checkpoint(dir)?,
        None => Model::build(ModelConfig {
            seed: a.seed,
            ..ModelConfig::default()
        })?,
    };
    let pem = PemConfig {
        patch_size: model.config().patch_size,
        ..PemConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let face = synthetic::random_face(&mut rng, "bench");
    let patches = extract_face(&face, model.config().branches, &pem, a.seed)?;
    let mut key = [0u8; KEY_LEN];
    key[..8].copy_from_slice(&a.seed.to_le_bytes());
    let mut pipeline = Pipeline::new(&model, ChannelConfig::new(a.rtt_ms, a.bandwidth)?, key);
    let pairs = pipeline.run_trials(a.trials, &bench::face_placeholder(), &patches)?;
    let summary = bench::summarize(&pairs)?;
    print!("{}", summary.median.render_table());
    println!("patch path faster in {} of {} trials", summary.patch_faster, summary.trials);
    if let Some(out) = &a.out {
        write_json(out, "bench.json", &summary)?;
    }
    Ok(())
}
