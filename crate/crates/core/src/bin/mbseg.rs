use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mbseg::fusion::{average_fusion, fuse_masks, staple, FusionMethod, STAPLE_MAX_ITER, STAPLE_TOL};
use mbseg::harness::{
    fixed_split, generate_phantom_dataset, plan_loso_ensemble, plan_nested_kfold, plan_nested_loso, run_ablation,
    run_plan, write_run_manifest, DatasetManifest, Protocol, RunConfig, Split, Variant,
};
use mbseg::metrics::{evaluate_case, lesion_volume_regression, MetricsReport};
use mbseg::training::{load_params, predict_case, train, TrainOutputs};
use mbseg::volio::{read_volume, write_volume, Volume3D};

#[derive(Parser)]
#[command(name = "mbseg", version, about = "Multi-branch slice-based lesion segmentation")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// majority, average or staple.
    #[arg(long, global = true)]
    fusion: Option<FusionMethod>,
    /// Lesion connectivity: 6, 18 or 26.
    #[arg(long, global = true)]
    connectivity: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its manifest.
    Phantom {
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        train: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        val: Vec<String>,
    },
    /// Segment cases with a trained checkpoint.
    Predict {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to every case in the manifest.
        #[arg(long, value_delimiter = ',')]
        cases: Vec<String>,
    },
    /// Score `<id>.mvol` masks against the manifest's ground truth.
    Evaluate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long, value_delimiter = ',')]
        cases: Vec<String>,
    },
    /// Run a cross-validation protocol.
    Crossval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        protocol: Option<Protocol>,
        #[arg(long)]
        k: Option<usize>,
        /// Case ids to use; defaults to the config, then the whole manifest.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        /// Fixed test set (loso-ensemble).
        #[arg(long, value_delimiter = ',')]
        test: Vec<String>,
    },
    /// Compare modality configurations on one split.
    Ablate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        train: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        val: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        test: Vec<String>,
    },
    /// Fuse several volumes on the same grid into one mask.
    Fuse {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Phantom { .. } => "phantom",
            Command::Train { .. } => "train",
            Command::Predict { .. } => "predict",
            Command::Evaluate { .. } => "evaluate",
            Command::Crossval { .. } => "crossval",
            Command::Ablate { .. } => "ablate",
            Command::Fuse { .. } => "fuse",
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    if let Some(f) = cli.fusion {
        cfg = cfg.with_fusion(f);
    }
    if let Some(c) = cli.connectivity {
        cfg.eval.connectivity = c;
    }
    cfg.connectivity()?;
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn or_default(given: Vec<String>, fallback: &[String]) -> Vec<String> {
    if given.is_empty() {
        fallback.to_vec()
    } else {
        given
    }
}

/// Runs the command; returns the failure messages to record in the run
/// manifest.
fn execute(cmd: Command, cfg: &mut RunConfig, out: &Path) -> Result<Vec<String>> {
    let conn = cfg.connectivity()?;
    match cmd {
        Command::Phantom { count } => {
            if let Some(n) = count {
                cfg.phantom.count = n;
            }
            let m = generate_phantom_dataset(&cfg.phantom, out)?;
            eprintln!("wrote {} cases to {}", m.entries.len(), out.join("dataset.tsv").display());
            Ok(Vec::new())
        }
        Command::Train { manifest, train: tr, val } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let load = |ids: &[String]| ids.iter().map(|id| manifest.load_case(id)).collect::<Result<Vec<_>, _>>();
            let (tc, vc) = (load(&tr)?, load(&val)?);
            let outputs = TrainOutputs {
                checkpoint: Some(out.join("params.ckpt")),
                log: Some(out.join("train_log.tsv")),
                on_epoch: Some(Box::new(|r| {
                    let v = r.val_dsc.map_or("NA".into(), |v| format!("{v:.4}"));
                    eprintln!("epoch {:>4}  step {:>6}  lr {:.3e}  loss {:.4}  val_dsc {v}", r.epoch, r.step, r.lr, r.loss);
                })),
            };
            let (mut report, _) = train(&cfg.model, &tc, &vc, &cfg.train, outputs)?;
            report.checkpoint = Some("params.ckpt".into());
            write_json(&out.join("train_report.json"), &report)?;
            Ok(Vec::new())
        }
        Command::Predict {
            manifest,
            checkpoint,
            cases,
        } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let params = load_params(&cfg.model, &checkpoint)?;
            let dir = out.join("predictions");
            std::fs::create_dir_all(&dir)?;
            for id in or_default(cases, &manifest.ids()) {
                let case = manifest.load_case(&id)?;
                let pred = predict_case(&params, &case, cfg.eval.fusion, cfg.train.eval_batch)?;
                write_volume(&pred.mask, dir.join(format!("{id}.mvol")))?;
                for (plane, v) in &pred.planes {
                    write_volume(v, dir.join(format!("{id}_{}.mvol", plane.name())))?;
                }
                eprintln!("{id}: {} lesion voxels", pred.mask.foreground_count());
            }
            Ok(Vec::new())
        }
        Command::Evaluate {
            manifest,
            predictions,
            cases,
        } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let ids = or_default(cases, &manifest.ids());
            let mut metrics = Vec::new();
            let mut pairs = Vec::new();
            for id in &ids {
                let path = predictions.join(format!("{id}.mvol"));
                if !path.exists() {
                    continue;
                }
                let case = manifest.load_case(id)?;
                let Some(truth) = case.truth() else { continue };
                let seg = read_volume(&path)?;
                metrics.push(evaluate_case(id, &seg, truth, conn)?);
                pairs.push((seg, truth.clone()));
            }
            if metrics.is_empty() {
                bail!("no predictions with ground truth found in {}", predictions.display());
            }
            let report = MetricsReport::new(metrics);
            report.write(out, "report")?;
            print!("{}", report.to_tsv());
            let refs: Vec<(&Volume3D, &Volume3D)> = pairs.iter().map(|(s, t)| (s, t)).collect();
            match lesion_volume_regression(&refs, conn) {
                Ok(r) => write_json(&out.join("volume_regression.json"), &r)?,
                Err(e) => eprintln!("lesion-volume regression skipped: {e}"),
            }
            Ok(Vec::new())
        }
        Command::Crossval {
            manifest,
            protocol,
            k,
            ids,
            test,
        } => {
            let manifest = DatasetManifest::load(&manifest)?;
            if let Some(p) = protocol {
                cfg.crossval.protocol = p;
            }
            if let Some(k) = k {
                cfg.crossval.k = k;
            }
            cfg.crossval.ids = or_default(ids, &cfg.crossval.ids);
            cfg.crossval.test_ids = or_default(test, &cfg.crossval.test_ids);
            let ids = or_default(cfg.crossval.ids.clone(), &manifest.ids());
            let plan = match cfg.crossval.protocol {
                Protocol::NestedLoso => plan_nested_loso(&ids)?,
                Protocol::NestedKfold => plan_nested_kfold(&ids, cfg.crossval.k)?,
                Protocol::LosoEnsemble => {
                    let test = &cfg.crossval.test_ids;
                    let train: Vec<String> = ids.iter().filter(|i| !test.contains(i)).cloned().collect();
                    plan_loso_ensemble(&train, test)?
                }
            };
            eprintln!("{} members", plan.splits.len());
            let outcome = run_plan(&plan, &manifest, cfg, out)?;
            print!("{}", outcome.report.to_tsv());
            Ok(outcome
                .failures
                .iter()
                .map(|f| format!("{}: {}", f.member, f.error))
                .collect())
        }
        Command::Ablate {
            manifest,
            variants,
            train: tr,
            val,
            test,
        } => {
            let manifest = DatasetManifest::load(&manifest)?;
            let a = &mut cfg.ablation;
            a.variants = or_default(variants, &a.variants);
            a.train_ids = or_default(tr, &a.train_ids);
            a.val_ids = or_default(val, &a.val_ids);
            a.test_ids = or_default(test, &a.test_ids);
            let split = if a.train_ids.is_empty() && a.val_ids.is_empty() && a.test_ids.is_empty() {
                let ids = manifest.ids();
                let n = ids.len() as f64;
                let n_test = ((n * 9.0 / 37.0).round() as usize).max(1);
                let n_val = ((n * 7.0 / 37.0).round() as usize).max(1);
                fixed_split(&ids, n_val, n_test, cfg.train.seed)?
            } else {
                Split {
                    name: "fixed".into(),
                    group: "fixed".into(),
                    train: a.train_ids.clone(),
                    val: a.val_ids.clone(),
                    test: a.test_ids.clone(),
                }
            };
            let variants = cfg
                .ablation
                .variants
                .iter()
                .map(|v| Variant::parse(v, &manifest.modalities))
                .collect::<Result<Vec<_>, _>>()?;
            let report = run_ablation(&manifest, &variants, &split, cfg, out)?;
            print!("{}", report.to_tsv());
            Ok(Vec::new())
        }
        Command::Fuse { inputs, output } => {
            let vols = inputs
                .iter()
                .map(|p| read_volume(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let method = cfg.eval.fusion;
            let fused = match method {
                FusionMethod::Averaging => average_fusion(&vols, 0.5)?,
                _ => {
                    let bin: Vec<Volume3D> = vols.iter().map(|v| v.binarize(0.5)).collect();
                    if method == FusionMethod::Staple {
                        if let Ok(r) = staple(&bin, STAPLE_MAX_ITER, STAPLE_TOL) {
                            let stats = serde_json::json!({
                                "sensitivity": r.sensitivity,
                                "specificity": r.specificity,
                                "prior": r.prior,
                                "iterations": r.iterations,
                                "converged": r.converged,
                            });
                            write_json(&out.join("staple.json"), &stats)?;
                        }
                    }
                    fuse_masks(&bin, method)?
                }
            };
            let output = output.unwrap_or_else(|| out.join("fused.mvol"));
            write_volume(&fused, &output)?;
            eprintln!("{}: {} foreground voxels", output.display(), fused.foreground_count());
            Ok(Vec::new())
        }
    }
}

fn run(cli: Cli) -> Result<Vec<String>> {
    let mut cfg = load_config(&cli)?;
    let out = cli.out.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let name = cli.command.name();
    let failures = execute(cli.command, &mut cfg, &out)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    write_run_manifest(&out, name, &failures)?;
    Ok(failures)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(f) if f.is_empty() => ExitCode::SUCCESS,
        Ok(f) => {
            for msg in f {
                eprintln!("failed: {msg}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
