//! Command-line surface: synthetic data generation, training, retrieval
//! evaluation, variant benchmarking, correspondence export, gradient
//! checking, and the component ablation sweep.

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use transmatcher::checkpoint::{
    checkpoint_bytes, load_checkpoint, save_checkpoint, Manifest,
};
use transmatcher::config::{ModelConfig, Variant};
use transmatcher::data::{generate_suite, save_dataset, DomainSpec, SyntheticSpec, SyntheticSuite};
use transmatcher::eval::{evaluate, far_threshold, mean_accuracy, negative_local_scores, EvalReport};
use transmatcher::gradcheck::grad_check;
use transmatcher::matcher::extract_correspondences;
use transmatcher::params::ParamStore;
use transmatcher::tape::{Precision, Tape, Var};
use transmatcher::trainkit::{pairwise_bce_loss, train, TrainConfig};
use transmatcher::variants::{Model, Scorer};
use transmatcher::{Error, Result};

#[derive(Parser)]
#[command(name = "transmatcher", version, about = "Image matching with transformer encoders and a hard-attention similarity decoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file with optional "model", "train", "data" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the training/init seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the model variant: transmatcher, transformer_cat,
    /// transformer_cross, plain_embed.
    #[arg(long)]
    variant: Option<String>,
    /// Numeric precision: 32 or 64.
    #[arg(long)]
    precision: Option<u8>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic datasets to PNG directories.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on the synthetic training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint on each configured test domain.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train and evaluate all four variants under one protocol.
    BenchVariants {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        /// "table2" switches to the d=128, D=512, N=2 preset.
        #[arg(long)]
        preset: Option<String>,
    },
    /// Export above-threshold local correspondences of positive pairs.
    ExportMatches {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// False acceptance rate for the score threshold.
        #[arg(long, default_value_t = 0.001)]
        far_rate: f64,
    },
    /// Finite-difference gradient check of the full model on a tiny config.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Component ablation sweep over the decoder flag rows.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct DataConfig {
    n_identities: usize,
    images_per_identity: usize,
    query_per_id: usize,
    gallery_per_id: usize,
    seed: u64,
    /// Training always uses the first domain; evaluation covers all.
    domains: Vec<String>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_identities: 16,
            images_per_identity: 16,
            query_per_id: 2,
            gallery_per_id: 4,
            seed: 7,
            domains: vec!["easy".into(), "shifted".into()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
struct CliConfig {
    model: ModelConfig,
    train: TrainConfig,
    data: DataConfig,
}

fn domain_by_name(name: &str) -> Result<DomainSpec> {
    match name {
        "easy" => Ok(DomainSpec::easy("easy")),
        "shifted" => Ok(DomainSpec::shifted("shifted")),
        "noiseless" => Ok(DomainSpec::noiseless("noiseless")),
        other => Err(Error::Config(format!("unknown domain: {other}"))),
    }
}

fn load_config(common: &Common) -> Result<CliConfig> {
    let mut cfg: CliConfig = match &common.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => CliConfig::default(),
    };
    if let Some(v) = &common.variant {
        cfg.model.variant = Variant::parse(v)?;
    }
    if let Some(p) = common.precision {
        cfg.model.precision = match p {
            32 => Precision::F32,
            64 => Precision::F64,
            other => {
                return Err(Error::Config(format!(
                    "precision must be 32 or 64, got {other}"
                )))
            }
        };
    }
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    cfg.model.validate()?;
    cfg.train.validate()?;
    for d in &cfg.data.domains {
        domain_by_name(d)?;
    }
    if cfg.data.domains.is_empty() {
        return Err(Error::Config("data.domains must be nonempty".into()));
    }
    Ok(cfg)
}

fn suite_for_domain(cfg: &CliConfig, domain: &str) -> Result<SyntheticSuite> {
    let spec = SyntheticSpec {
        n_identities: cfg.data.n_identities,
        images_per_identity: cfg.data.images_per_identity,
        height: cfg.model.image_height,
        width: cfg.model.image_width,
        domain: domain_by_name(domain)?,
        seed: cfg.data.seed,
        index_offset: 0,
    };
    generate_suite(&spec, cfg.data.query_per_id, cfg.data.gallery_per_id)
}

fn build_model(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = Model::build(&mut store, cfg, &mut rng)?;
    Ok((model, store))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)?;
    Ok(())
}

fn cmd_gen_data(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    std::fs::create_dir_all(&common.out)?;
    for domain in &cfg.data.domains {
        let suite = suite_for_domain(&cfg, domain)?;
        let base = common.out.join(domain);
        save_dataset(&suite.train, &base.join("train"))?;
        save_dataset(&suite.query, &base.join("query"))?;
        save_dataset(&suite.gallery, &base.join("gallery"))?;
        println!(
            "{domain}: {} train, {} query, {} gallery images -> {}",
            suite.train.len(),
            suite.query.len(),
            suite.gallery.len(),
            base.display()
        );
    }
    Manifest::new(&cfg.model, Some(&cfg.train), cfg.train.seed, None)?
        .save(&common.out.join("manifest.json"))?;
    Ok(())
}

fn loss_history_csv(history: &[transmatcher::trainkit::EpochStats]) -> String {
    let mut csv = String::from("epoch,mean_loss,lr\n");
    for h in history {
        csv.push_str(&format!("{},{},{}\n", h.epoch, h.mean_loss, h.lr_new));
    }
    csv
}

fn cmd_train(common: &Common, epochs: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    std::fs::create_dir_all(&common.out)?;
    let suite = suite_for_domain(&cfg, &cfg.data.domains[0])?;
    let (model, mut store) = build_model(&cfg.model, cfg.train.seed)?;
    let started = std::time::Instant::now();
    let report = train(&model, &mut store, &suite.train, &cfg.train)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write_file(&common.out.join("loss_history.csv"), &loss_history_csv(&report.history))?;
    save_checkpoint(&store, &common.out.join("checkpoint.bin"))?;
    let bytes = checkpoint_bytes(&store);
    Manifest::new(&cfg.model, Some(&cfg.train), cfg.train.seed, Some(&bytes))?
        .save(&common.out.join("manifest.json"))?;
    if let Some(last) = report.history.last() {
        println!(
            "trained {} for {} epochs in {:.1}s, final mean loss {:.4}",
            cfg.model.variant.name(),
            report.history.len(),
            started.elapsed().as_secs_f64(),
            last.mean_loss
        );
    } else {
        println!("0 epochs requested; parameters untouched");
    }
    Ok(())
}

fn eval_report_csv(rows: &[(String, String, f64)]) -> String {
    let mut csv = String::from("metric,dataset_pair,value\n");
    for (metric, pair, value) in rows {
        csv.push_str(&format!("{metric},{pair},{value}\n"));
    }
    csv
}

fn cmd_eval(common: &Common, checkpoint: &Path) -> Result<()> {
    let cfg = load_config(common)?;
    std::fs::create_dir_all(&common.out)?;
    let (model, mut store) = build_model(&cfg.model, cfg.train.seed)?;
    load_checkpoint(&mut store, checkpoint)?;
    let train_domain = cfg.data.domains[0].clone();
    let mut rows = Vec::new();
    let mut reports: Vec<EvalReport> = Vec::new();
    println!("{:<18} {:>8} {:>8} {:>8}", "dataset_pair", "rank1", "mAP", "sec");
    for domain in &cfg.data.domains {
        let suite = suite_for_domain(&cfg, domain)?;
        let report = evaluate(&model, &mut store, &suite.query, &suite.gallery)?;
        let pair = format!("{train_domain}->{domain}");
        println!(
            "{:<18} {:>8.4} {:>8.4} {:>8.2}",
            pair, report.rank1, report.map, report.seconds
        );
        if report.dropped_queries > 0 {
            eprintln!("warning: {pair}: {} queries dropped", report.dropped_queries);
        }
        rows.push(("rank1".to_string(), pair.clone(), report.rank1));
        rows.push(("mAP".to_string(), pair.clone(), report.map));
        reports.push(report);
    }
    let macc = mean_accuracy(&reports);
    println!("{:<18} {:>8.4}", "mAcc", macc);
    rows.push(("mAcc".to_string(), "all".to_string(), macc));
    write_file(&common.out.join("eval_report.csv"), &eval_report_csv(&rows))?;
    let bytes = std::fs::read(checkpoint)?;
    Manifest::new(&cfg.model, Some(&cfg.train), cfg.train.seed, Some(&bytes))?
        .save(&common.out.join("manifest.json"))?;
    Ok(())
}

fn cmd_bench_variants(
    common: &Common,
    epochs: Option<usize>,
    preset: Option<&str>,
) -> Result<()> {
    let base = load_config(common)?;
    std::fs::create_dir_all(&common.out)?;
    let mut csv = String::from("variant,d,dim_ff,layers,rank1,mAP,mAcc,train_seconds,eval_seconds\n");
    println!(
        "{:<18} {:>4} {:>5} {:>2} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "variant", "d", "D", "N", "rank1", "mAP", "mAcc", "train_s", "eval_s"
    );
    for variant in Variant::ALL {
        let mut cfg = base.clone();
        cfg.model = match preset {
            Some("table2") => {
                let mut m = ModelConfig::table2_small(variant);
                m.precision = base.model.precision;
                m
            }
            Some(other) => return Err(Error::Config(format!("unknown preset: {other}"))),
            None => {
                let mut m = base.model.clone();
                m.variant = variant;
                m
            }
        };
        if let Some(e) = epochs {
            cfg.train.epochs = e;
        }
        let suite = suite_for_domain(&cfg, &cfg.data.domains[0])?;
        let (model, mut store) = build_model(&cfg.model, cfg.train.seed)?;
        let t0 = std::time::Instant::now();
        train(&model, &mut store, &suite.train, &cfg.train)?;
        let train_s = t0.elapsed().as_secs_f64();
        let t1 = std::time::Instant::now();
        let mut reports = Vec::new();
        let mut first = None;
        for domain in &cfg.data.domains {
            let s = suite_for_domain(&cfg, domain)?;
            let r = evaluate(&model, &mut store, &s.query, &s.gallery)?;
            first.get_or_insert((r.rank1, r.map));
            reports.push(r);
        }
        let eval_s = t1.elapsed().as_secs_f64();
        let (rank1, map) = first.unwrap();
        let macc = mean_accuracy(&reports);
        println!(
            "{:<18} {:>4} {:>5} {:>2} {:>8.4} {:>8.4} {:>8.4} {:>8.1} {:>8.1}",
            variant.name(),
            cfg.model.d,
            cfg.model.dim_ff,
            cfg.model.layers,
            rank1,
            map,
            macc,
            train_s,
            eval_s
        );
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{:.3},{:.3}\n",
            variant.name(),
            cfg.model.d,
            cfg.model.dim_ff,
            cfg.model.layers,
            rank1,
            map,
            macc,
            train_s,
            eval_s
        ));
    }
    write_file(&common.out.join("bench_variants.csv"), &csv)?;
    Manifest::new(&base.model, Some(&base.train), base.train.seed, None)?
        .save(&common.out.join("manifest.json"))?;
    Ok(())
}

fn cmd_export_matches(common: &Common, checkpoint: &Path, far_rate: f64) -> Result<()> {
    let cfg = load_config(common)?;
    std::fs::create_dir_all(&common.out)?;
    let (model, mut store) = build_model(&cfg.model, cfg.train.seed)?;
    load_checkpoint(&mut store, checkpoint)?;
    let tm = model.as_transmatcher()?;
    let suite = suite_for_domain(&cfg, &cfg.data.domains[0])?;
    let negatives = negative_local_scores(tm, &mut store, &suite.gallery, 2000)?;
    let threshold = far_threshold(&negatives, far_rate)?;
    println!(
        "threshold {threshold:.4} at FAR {far_rate} from {} negative local scores",
        negatives.len()
    );
    let (_, w) = cfg.model.feature_geometry()?;
    let mut csv = String::from(
        "query_id,gallery_id,layer,direction,query_row,query_col,gallery_row,gallery_col,score\n",
    );
    let mut n_matches = 0usize;
    for q in &suite.query.images {
        for g in &suite.gallery.images {
            if q.identity != g.identity {
                continue;
            }
            let pair = tm.forward_pair(&mut store, q, g)?;
            for m in extract_correspondences(&pair, w, threshold) {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{}\n",
                    m.query_id,
                    m.gallery_id,
                    m.layer,
                    m.direction.name(),
                    m.query_pos.0,
                    m.query_pos.1,
                    m.gallery_pos.0,
                    m.gallery_pos.1,
                    m.score
                ));
                n_matches += 1;
            }
        }
    }
    write_file(&common.out.join("matches.csv"), &csv)?;
    println!("{n_matches} correspondences -> {}", common.out.join("matches.csv").display());
    let bytes = std::fs::read(checkpoint)?;
    Manifest::new(&cfg.model, Some(&cfg.train), cfg.train.seed, Some(&bytes))?
        .save(&common.out.join("manifest.json"))?;
    Ok(())
}

/// The tiny gradient-check configuration: 12x8 images through a 2-block
/// backbone give a 3x2 feature grid; d=8, D=16, N=2, H=1.
pub fn grad_check_config() -> ModelConfig {
    let mut cfg = ModelConfig::desk_default();
    cfg.d = 8;
    cfg.dim_ff = 16;
    cfg.layers = 2;
    cfg.heads = 1;
    cfg.image_height = 12;
    cfg.image_width = 8;
    cfg.backbone.channels = vec![4, 8];
    cfg.precision = Precision::F64;
    cfg
}

fn cmd_grad_check(common: &Common) -> Result<()> {
    let mut cfg = grad_check_config();
    if let Some(v) = &common.variant {
        cfg.variant = Variant::parse(v)?;
    }
    let seed = common.seed.unwrap_or(40);
    let (model, mut store) = build_model(&cfg, seed)?;
    // Three images over two identities so the loss sees positives and
    // negatives.
    let mut spec = SyntheticSpec::easy(2, 2, 21);
    spec.height = cfg.image_height;
    spec.width = cfg.image_width;
    spec.domain = DomainSpec::noiseless("gc");
    let mut images = transmatcher::data::generate_synthetic(&spec, transmatcher::data::Split::Train)?
        .images;
    images.truncate(3);
    let ids: Vec<u32> = images.iter().map(|im| im.identity).collect();
    let buffer_names: Vec<String> = store
        .iter()
        .filter(|(_, p)| !p.trainable)
        .map(|(_, p)| p.name.clone())
        .collect();
    let started = std::time::Instant::now();
    let report = grad_check(&mut store, 1e-4, |s| {
        let snap: Vec<_> = buffer_names
            .iter()
            .map(|n| {
                let id = s.lookup(n).unwrap();
                (id, s.get(id).value.clone())
            })
            .collect();
        let mut tape = Tape::new(Precision::F64);
        let refs: Vec<&transmatcher::data::Image> = images.iter().collect();
        let logits: Var = model.score_all_train(&mut tape, s, &refs)?;
        let loss = pairwise_bce_loss(&mut tape, logits, &ids)?;
        tape.backward(loss)?;
        tape.apply_param_grads(s);
        for (id, t) in snap {
            s.get_mut(id).value = t;
        }
        Ok(tape.item(loss))
    })?;
    for p in &report.per_param {
        println!(
            "{:<40} max rel err {:.3e}{}",
            p.name,
            p.max_rel_err,
            if p.skipped > 0 {
                format!(" ({} kink-skipped)", p.skipped)
            } else {
                String::new()
            }
        );
    }
    println!("{} ({:.1}s)", report.summary(), started.elapsed().as_secs_f64());
    if report.passed {
        Ok(())
    } else {
        Err(Error::Data(format!(
            "gradient check failed: max rel err {:.3e} exceeds {:.1e}",
            report.max_rel_err, report.rel_tol
        )))
    }
}

/// The decoder component rows of the ablation study, cumulative from the
/// minimal head upward.
pub fn ablation_rows() -> Vec<(&'static str, [bool; 5])> {
    // Flags: fc1, bn1, mlphead1, prior_embed, pos_embed (mlphead2 fixed on).
    vec![
        ("mlphead2", [false, false, false, false, false]),
        ("mlphead1+mlphead2", [false, false, true, false, false]),
        ("bn1+mlphead1+mlphead2", [false, true, true, false, false]),
        ("fc1+mlphead1+mlphead2", [true, false, true, false, false]),
        ("fc1+bn1+mlphead1+mlphead2", [true, true, true, false, false]),
        ("full+prior_embed", [true, true, true, true, false]),
        ("full+pos_embed", [true, true, true, false, true]),
        ("full+prior+pos", [true, true, true, true, true]),
    ]
}

pub fn apply_ablation(cfg: &ModelConfig, flags: [bool; 5]) -> ModelConfig {
    let mut out = cfg.clone();
    out.variant = Variant::Transmatcher;
    out.fc1 = flags[0];
    out.bn1 = flags[1];
    out.mlphead1 = flags[2];
    out.mlphead2 = true;
    out.prior_embed = flags[3];
    out.pos_embed = flags[4];
    out
}

fn cmd_ablate(common: &Common, epochs: Option<usize>) -> Result<()> {
    let base = load_config(common)?;
    std::fs::create_dir_all(&common.out)?;
    let mut csv = String::from(
        "row,fc1,bn1,mlphead1,mlphead2,prior_embed,pos_embed,trainable_params,mAcc\n",
    );
    println!("{:<28} {:>8} {:>8}", "components", "params", "mAcc");
    for (name, flags) in ablation_rows() {
        let mut cfg = base.clone();
        cfg.model = apply_ablation(&base.model, flags);
        if let Some(e) = epochs {
            cfg.train.epochs = e;
        }
        let suite = suite_for_domain(&cfg, &cfg.data.domains[0])?;
        let (model, mut store) = build_model(&cfg.model, cfg.train.seed)?;
        let n_params = store.trainable_scalar_count();
        train(&model, &mut store, &suite.train, &cfg.train)?;
        let mut reports = Vec::new();
        for domain in &cfg.data.domains {
            let s = suite_for_domain(&cfg, domain)?;
            reports.push(evaluate(&model, &mut store, &s.query, &s.gallery)?);
        }
        let macc = mean_accuracy(&reports);
        println!("{name:<28} {n_params:>8} {macc:>8.4}");
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            name,
            flags[0] as u8,
            flags[1] as u8,
            flags[2] as u8,
            1,
            flags[3] as u8,
            flags[4] as u8,
            n_params,
            macc
        ));
    }
    write_file(&common.out.join("ablation.csv"), &csv)?;
    Manifest::new(&base.model, Some(&base.train), base.train.seed, None)?
        .save(&common.out.join("manifest.json"))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData { common } => cmd_gen_data(common),
        Command::Train { common, epochs } => cmd_train(common, *epochs),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::BenchVariants {
            common,
            epochs,
            preset,
        } => cmd_bench_variants(common, *epochs, preset.as_deref()),
        Command::ExportMatches {
            common,
            checkpoint,
            far_rate,
        } => cmd_export_matches(common, checkpoint, *far_rate),
        Command::GradCheck { common } => cmd_grad_check(common),
        Command::Ablate { common, epochs } => cmd_ablate(common, *epochs),
    }
}

/// 0 = success, 1 = validation error, 2 = runtime failure.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Usage(_) | Error::Json(_) => 1,
        _ => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors.
            let code = if e.exit_code() == 0 { 0 } else { 1 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code(&e));
        }
    }
}
