//! Command-line entry point: dataset preparation, the three training
//! phases, evaluation, ablations and grid rendering.
//!
//! Exit codes: 0 success, 1 contract/config/usage errors, 2 I/O errors,
//! 3 diverged training (non-finite loss).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gadnet::data::synthetic::{build_synthetic_dataset, read_factor_table};
use gadnet::data::{load_manifest, LoadedDataset};
use gadnet::error::GadError;
use gadnet::eval::ablation::{run_ablation, AblationKind};
use gadnet::eval::{
    content_consistency, encode_all_means, eval_style_accuracy, fit_content_prior,
    flatten_pixels, probe_disentanglement, render_grid, zero_style_reconstruction, GridKind,
};
use gadnet::networks::StyleTable;
use gadnet::rng::Stream;
use gadnet::training::{
    load_checkpoint, load_config, run_training, CheckpointBundle, StageKind, TrainingConfig,
};
use gadnet::types::ArtistId;

#[derive(Parser)]
#[command(name = "gadnet", version, about = "Two-stage adversarial style/content disentanglement")]
struct Cli {
    /// Output root (falls back to $GADNET_OUT, then ./gadnet-out)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Config preset: desk or paper
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Config file applied on top of the preset
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// key=value override applied after the file (repeatable)
    #[arg(long = "set", global = true)]
    set: Vec<String>,
    /// Seed override (same as --set seed=N, applied last)
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset preparation
    Prep {
        #[command(subcommand)]
        which: PrepCmd,
    },
    /// Training phases
    Train {
        #[command(subcommand)]
        which: TrainCmd,
    },
    /// Evaluation protocol
    Eval {
        #[command(subcommand)]
        which: EvalCmd,
    },
    /// Figure-style grids
    Grid {
        #[command(subcommand)]
        which: GridCmd,
    },
    /// Ablation experiments
    Ablate {
        #[command(subcommand)]
        which: AblateCmd,
    },
    /// Configuration utilities
    Config {
        #[command(subcommand)]
        which: ConfigCmd,
    },
}

#[derive(Subcommand)]
enum PrepCmd {
    /// Render a synthetic dataset with known factors
    Synthetic {
        #[arg(long, default_value_t = 10)]
        styles: usize,
        #[arg(long = "per-style", default_value_t = 500)]
        per_style: usize,
        #[arg(long = "data-seed", default_value_t = 7)]
        data_seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Output directory for the dataset
        #[arg(long)]
        dir: PathBuf,
    },
    /// Validate a directory tree or manifest file and report statistics
    Manifest {
        /// Dataset directory or tab-separated manifest file
        #[arg(long)]
        source: PathBuf,
        #[arg(long = "min-images", default_value_t = 50)]
        min_images: usize,
        /// Where to write the rejects report (default: <out>/manifest-rejects.tsv)
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (or manifest file)
    #[arg(long)]
    data: PathBuf,
    /// Resume from the latest checkpoint in the stage directory
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    resume: bool,
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Stage 1: style-independent content encoding
    Stage1(TrainArgs),
    /// C2 pre-training on real samples
    C2(TrainArgs),
    /// Stage 2: dual-conditional GAN (requires stage 1 and C2 finals)
    Stage2(TrainArgs),
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Style classification accuracy on generated samples
    Accuracy {
        #[arg(long)]
        data: PathBuf,
        /// Run root holding the generator (stage2/final.gad)
        #[arg(long)]
        run: PathBuf,
        /// Run root whose classifier scores the samples (default: --run)
        #[arg(long = "classifier-run")]
        classifier_run: Option<PathBuf>,
    },
    /// Disentanglement probes from content codes (or raw pixels)
    Probe {
        #[arg(long)]
        data: PathBuf,
        /// Run root holding stage1/final.gad
        #[arg(long)]
        run: PathBuf,
        /// Probe raw pixels instead of content codes
        #[arg(long, default_value_t = false)]
        pixels: bool,
    },
    /// Content-consistency metric through the frozen encoder
    Consistency {
        #[arg(long)]
        data: PathBuf,
        /// Run root holding stage1 and stage2 finals
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 512)]
        samples: usize,
    },
}

#[derive(Args)]
struct GridCommon {
    #[arg(long)]
    data: PathBuf,
    /// Run root (uses stage2/final.gad when present, else stage1/final.gad)
    #[arg(long)]
    run: PathBuf,
    /// Output PNG path (default: <out>/grids/<kind>.png)
    #[arg(long = "out-file")]
    out_file: Option<PathBuf>,
}

#[derive(Subcommand)]
enum GridCmd {
    /// One style, several prior-sampled contents
    FixStyle {
        #[command(flatten)]
        common: GridCommon,
        #[arg(long)]
        artist: usize,
        #[arg(long, default_value_t = 12)]
        n: usize,
    },
    /// One content, several styles (artist ids and/or prior samples)
    FixContent {
        #[command(flatten)]
        common: GridCommon,
        /// Dataset index of the content image (omit to sample content)
        #[arg(long)]
        image: Option<usize>,
        /// Comma-separated artist ids
        #[arg(long, value_delimiter = ',')]
        artists: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        random: usize,
    },
    /// Rows of content images crossed with columns of artist styles
    Transfer {
        #[command(flatten)]
        common: GridCommon,
        /// Comma-separated dataset indices of the content images
        #[arg(long, value_delimiter = ',')]
        contents: Vec<usize>,
        /// Comma-separated artist ids
        #[arg(long, value_delimiter = ',')]
        artists: Vec<usize>,
    },
    /// Columns (input, correct-style reconstruction, zero-style reconstruction)
    ZeroStyle {
        #[command(flatten)]
        common: GridCommon,
        /// Comma-separated dataset indices
        #[arg(long, value_delimiter = ',')]
        indices: Vec<usize>,
    },
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    /// Baseline run root with the unmodified artifacts
    #[arg(long)]
    baseline: PathBuf,
}

#[derive(Subcommand)]
enum AblateCmd {
    /// MLP-on-codes stage-1 classifier
    MlpStage1(AblateArgs),
    /// Stage 1 with lambda_c1 = 0 (MLP classifier reports code accuracy)
    NoC1(AblateArgs),
    /// Stage 2 without the classifier's fake-sample loss
    NonAdvC2(AblateArgs),
    /// Stage 2 with lambda_cont = 0
    NoCont(AblateArgs),
}

#[derive(Subcommand)]
enum ConfigCmd {
    /// Print every config key with its default value
    Reference,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // usage problems exit 1; --help/--version print to stdout and succeed
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("GADNET_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("gadnet-out"))
}

fn effective_config(cli: &Cli) -> Result<TrainingConfig, GadError> {
    let mut overrides = cli.set.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    load_config(&cli.preset, cli.config.as_deref(), &overrides)
}

/// Write the effective config into the output root before any work happens.
fn echo_config(cfg: &TrainingConfig, out: &Path) -> Result<(), GadError> {
    std::fs::create_dir_all(out).map_err(|e| GadError::io(out, e))?;
    let path = out.join("effective-config.toml");
    std::fs::write(&path, cfg.to_toml()).map_err(|e| GadError::io(&path, e))
}

fn load_data(cfg: &TrainingConfig, source: &Path) -> Result<LoadedDataset, GadError> {
    let (manifest, rejects) = load_manifest(source, 1)?;
    if !rejects.entries.is_empty() {
        eprintln!(
            "note: {} files rejected while scanning the dataset",
            rejects.entries.len()
        );
    }
    LoadedDataset::load(manifest, cfg.arch.base_size)
}

fn load_final(root: &Path, stage: StageKind) -> Result<CheckpointBundle, GadError> {
    let p = root.join(stage.dir_name()).join("final.gad");
    if !p.exists() {
        return Err(GadError::Dependency(format!(
            "no {} checkpoint at {}",
            stage.dir_name(),
            p.display()
        )));
    }
    load_checkpoint(&p)
}

/// Stage-1 bundle plus the bundle holding the generator to render with
/// (stage 2 when available, stage 1 otherwise).
fn load_render_bundle(root: &Path) -> Result<(CheckpointBundle, CheckpointBundle), GadError> {
    let s1 = load_final(root, StageKind::Stage1)?;
    let gen_bundle = if root.join("stage2").join("final.gad").exists() {
        load_final(root, StageKind::Stage2)?
    } else {
        s1.clone()
    };
    Ok((s1, gen_bundle))
}

fn style_of(bundle: &CheckpointBundle) -> Result<&StyleTable<f32>, GadError> {
    bundle
        .style
        .as_ref()
        .ok_or_else(|| GadError::Checkpoint("checkpoint lacks a style table".into()))
}

fn run(cli: Cli) -> Result<(), GadError> {
    let out = out_root(&cli);
    match &cli.command {
        Command::Prep { which } => match which {
            PrepCmd::Synthetic { styles, per_style, data_seed, size, dir } => {
                let manifest =
                    build_synthetic_dataset(*styles, *per_style, *data_seed, *size, dir)?;
                println!(
                    "wrote {} images over {} styles to {}",
                    manifest.len(),
                    manifest.n_artists(),
                    dir.display()
                );
                Ok(())
            }
            PrepCmd::Manifest { source, min_images, report } => {
                let (manifest, rejects) = load_manifest(source, *min_images)?;
                let report_path = report
                    .clone()
                    .unwrap_or_else(|| out.join("manifest-rejects.tsv"));
                if let Some(parent) = report_path.parent() {
                    std::fs::create_dir_all(parent).map_err(|e| GadError::io(parent, e))?;
                }
                rejects.write_to(&report_path)?;
                println!(
                    "{} artists / {} images (min {} per artist); {} rejects -> {}",
                    manifest.n_artists(),
                    manifest.len(),
                    min_images,
                    rejects.entries.len(),
                    report_path.display()
                );
                Ok(())
            }
        },
        Command::Train { which } => {
            let cfg = effective_config(&cli)?;
            echo_config(&cfg, &out)?;
            let (stage, args) = match which {
                TrainCmd::Stage1(a) => (StageKind::Stage1, a),
                TrainCmd::C2(a) => (StageKind::C2Pretrain, a),
                TrainCmd::Stage2(a) => (StageKind::Stage2, a),
            };
            let data = load_data(&cfg, &args.data)?;
            let final_path = run_training(stage, &cfg, &data, &out, args.resume)?;
            println!("finished {}: {}", stage.dir_name(), final_path.display());
            Ok(())
        }
        Command::Eval { which } => {
            let cfg = effective_config(&cli)?;
            echo_config(&cfg, &out)?;
            match which {
                EvalCmd::Accuracy { data, run, classifier_run } => {
                    let data = load_data(&cfg, data)?;
                    let s1 = load_final(run, StageKind::Stage1)?;
                    let s2 = load_final(run, StageKind::Stage2)?;
                    let cls = match classifier_run {
                        Some(other) => load_final(other, StageKind::Stage2)?,
                        None => s2.clone(),
                    };
                    let spec = &cfg.arch;
                    let prior = fit_content_prior(spec, &s1.nets["encoder"], &data)?;
                    let mut rng = Stream::new(cfg.seed, "eval-accuracy");
                    let acc = eval_style_accuracy(
                        spec,
                        &s2.nets["generator"],
                        style_of(&s2)?,
                        &cls.nets["c2"],
                        &prior,
                        &data.manifest.artist_counts,
                        &mut rng,
                    )?;
                    println!("top1_accuracy {acc:.4}");
                    Ok(())
                }
                EvalCmd::Probe { data, run, pixels } => {
                    let dataset = load_data(&cfg, data)?;
                    let rows = read_factor_table(&dataset.manifest.root.join("factors.csv"))?;
                    let inputs = if *pixels {
                        flatten_pixels(&dataset)
                    } else {
                        let s1 = load_final(run, StageKind::Stage1)?;
                        encode_all_means(&cfg.arch, &s1.nets["encoder"], &dataset)?
                    };
                    let report = probe_disentanglement(
                        &inputs,
                        &rows,
                        dataset.manifest.n_artists(),
                        cfg.seed,
                    )?;
                    let dir = out.join("eval");
                    std::fs::create_dir_all(&dir).map_err(|e| GadError::io(&dir, e))?;
                    let name = if *pixels { "probe-pixels.csv" } else { "probe-codes.csv" };
                    std::fs::write(dir.join(name), report.to_csv())
                        .map_err(|e| GadError::io(&dir, e))?;
                    println!(
                        "style_accuracy {:.4} (chance {:.4}); mean position/scale r2 {:.4}",
                        report.style_accuracy,
                        report.chance,
                        report.mean_position_scale_r2()
                    );
                    Ok(())
                }
                EvalCmd::Consistency { data, run, samples } => {
                    let dataset = load_data(&cfg, data)?;
                    let s1 = load_final(run, StageKind::Stage1)?;
                    let s2 = load_final(run, StageKind::Stage2)?;
                    let mut rng = Stream::new(cfg.seed, "eval-consistency");
                    let value = content_consistency(
                        &cfg.arch,
                        &s1.nets["encoder"],
                        &s2.nets["generator"],
                        style_of(&s2)?,
                        &dataset,
                        *samples,
                        &mut rng,
                    )?;
                    println!("content_consistency {value:.6}");
                    Ok(())
                }
            }
        }
        Command::Grid { which } => {
            let cfg = effective_config(&cli)?;
            echo_config(&cfg, &out)?;
            let (common, kind_name): (&GridCommon, &str) = match which {
                GridCmd::FixStyle { common, .. } => (common, "fix-style"),
                GridCmd::FixContent { common, .. } => (common, "fix-content"),
                GridCmd::Transfer { common, .. } => (common, "transfer"),
                GridCmd::ZeroStyle { common, .. } => (common, "zero-style"),
            };
            let dataset = load_data(&cfg, &common.data)?;
            let (s1, gen_bundle) = load_render_bundle(&common.run)?;
            let spec = &cfg.arch;
            let encoder = &s1.nets["encoder"];
            let generator = &gen_bundle.nets["generator"];
            let style = style_of(&gen_bundle)?;
            let mut rng = Stream::new(cfg.seed, "grids");

            let image = match which {
                GridCmd::FixStyle { artist, n, .. } => {
                    let prior = fit_content_prior(spec, encoder, &dataset)?;
                    render_grid(
                        spec,
                        encoder,
                        generator,
                        style,
                        Some(&prior),
                        GridKind::FixStyle { artist: ArtistId(*artist), n: *n },
                        &mut rng,
                    )?
                }
                GridCmd::FixContent { image, artists, random, .. } => {
                    let prior = fit_content_prior(spec, encoder, &dataset)?;
                    let content_batch = match image {
                        Some(i) => Some(dataset.gather(&[*i])?),
                        None => None,
                    };
                    render_grid(
                        spec,
                        encoder,
                        generator,
                        style,
                        Some(&prior),
                        GridKind::FixContent {
                            content_from: content_batch.as_ref(),
                            artists: artists.iter().map(|&a| ArtistId(a)).collect(),
                            n_random: *random,
                        },
                        &mut rng,
                    )?
                }
                GridCmd::Transfer { contents, artists, .. } => {
                    let images = dataset.gather(contents)?;
                    render_grid(
                        spec,
                        encoder,
                        generator,
                        style,
                        None,
                        GridKind::Transfer {
                            contents: &images,
                            artists: artists.iter().map(|&a| ArtistId(a)).collect(),
                        },
                        &mut rng,
                    )?
                }
                GridCmd::ZeroStyle { indices, .. } => {
                    let images = dataset.gather(indices)?;
                    let labels: Vec<ArtistId> =
                        indices.iter().map(|&i| dataset.label(i)).collect();
                    zero_style_reconstruction(spec, encoder, generator, style, &images, &labels)?
                }
            };
            let path = common
                .out_file
                .clone()
                .unwrap_or_else(|| out.join("grids").join(format!("{kind_name}.png")));
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| GadError::io(parent, e))?;
            }
            image.save(&path).map_err(|e| GadError::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Ablate { which } => {
            let cfg = effective_config(&cli)?;
            echo_config(&cfg, &out)?;
            let (kind, args) = match which {
                AblateCmd::MlpStage1(a) => (AblationKind::MlpStage1, a),
                AblateCmd::NoC1(a) => (AblationKind::NoC1, a),
                AblateCmd::NonAdvC2(a) => (AblationKind::NonAdversarialC2, a),
                AblateCmd::NoCont(a) => (AblationKind::NoContentLoss, a),
            };
            let data = load_data(&cfg, &args.data)?;
            let report = run_ablation(kind, &cfg, &data, &args.baseline, &out)?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Config { which } => match which {
            ConfigCmd::Reference => {
                let cfg = effective_config(&cli)?;
                println!(
                    "# Configuration reference (defaults from the `{}` preset).",
                    cli.preset
                );
                println!("# Layering: preset, then --config FILE, then --set key=value overrides.");
                println!("# Unknown keys are rejected.");
                println!();
                print!("{}", reference_text(&cfg));
                Ok(())
            }
        },
    }
}

/// Key-by-key reference generated from the config serialization.
fn reference_text(cfg: &TrainingConfig) -> String {
    let value: toml::Value = toml::Value::try_from(cfg).expect("config serializes");
    let mut lines = Vec::new();
    walk_value("", &value, &mut lines);
    let mut s = String::new();
    for (key, default) in lines {
        let doc = key_doc(&key);
        s.push_str(&format!("{key:32} = {default:14} {doc}\n"));
    }
    s
}

fn walk_value(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) => {
            for (k, vv) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                walk_value(&key, vv, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn key_doc(key: &str) -> &'static str {
    match key {
        "arch.base_size" => "# image side (power of two >= 8)",
        "arch.stage_channels" => "# channels per resolution stage",
        "arch.head_width" => "# fully connected layer width",
        "arch.content_dim" => "# content code dimension",
        "arch.style_dim" => "# style code dimension",
        "arch.n_artists" => "# number of style labels",
        "arch.blocks_per_stage" => "# stride-1 residual blocks per stage",
        "arch.kernel_size" => "# convolution kernel (odd)",
        "lambda_c1" => "# stage-1 adversarial classifier weight",
        "lambda_e_kl" => "# encoder KL weight",
        "lambda_s_kl" => "# style KL weight",
        "lambda_d" => "# stage-2 discriminator weight",
        "lambda_c2" => "# stage-2 classifier weight",
        "lambda_cont" => "# stage-2 content-consistency weight",
        k if k.ends_with(".lr_style") => "# style-table learning rate",
        k if k.ends_with(".lr_others") => "# learning rate for the networks",
        k if k.ends_with(".optimizer") => "# adam or rmsprop",
        k if k.ends_with(".batch_size") => "# images per iteration",
        k if k.ends_with(".iterations") => "# training iterations",
        "seed" => "# master seed for init, sampling and noise",
        "log_interval" => "# iterations between loss rows",
        "checkpoint_interval" => "# iterations between checkpoints",
        "stage1_classifier" => "# conv or mlp_code",
        "c2_adversarial" => "# include the fake-sample classifier loss",
        _ => "",
    }
}
