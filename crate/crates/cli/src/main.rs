use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use maskface::config::KvConfig;
use maskface::eval::{self, PairSet, PairsHeader, PAIRS_VERSION, PAIR_RECIPE};
use maskface::network::MaskOverride;
use maskface::patterns::{enumerate_patterns, pattern_to_block_mask, size_matrix};
use maskface::synth::{build_dataset, DatasetConfig, DatasetManifest, Image};
use maskface::tensor::Tensor;
use maskface::train::{argmax_rows, Checkpoint, EpochLog, Stage, TrainConfig, TrainData, Trainer};
use maskface::{Error, Result};

#[derive(Parser)]
#[command(name = "maskface", version, about = "Occlusion-robust face embedding toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the pattern codebook size and size matrix for a grid.
    Patterns {
        #[arg(long)]
        k: usize,
        /// Write the full codebook as JSON.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Generate a synthetic occluded dataset manifest.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        export_images: Option<PathBuf>,
        /// Also write balanced verification pairs over the manifest.
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        pairs_per_label: usize,
        #[arg(long, default_value_t = 0)]
        pairs_seed: u64,
    },
    /// Train backbone and embedding head on clean data.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by this run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the full network from a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Verification, TAR@FAR and rank-1 on a pair set.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = eval::DEFAULT_FARS.to_vec())]
        far: Vec<f64>,
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Binarize the decoded mask at this threshold.
        #[arg(long)]
        binarize: Option<f64>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict the occlusion pattern of one image.
    PredictPattern {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Patterns { k, dump } => patterns(k, dump.as_deref()),
        Command::Synth {
            config,
            out,
            export_images,
            pairs,
            pairs_per_label,
            pairs_seed,
        } => {
            let cfg = DatasetConfig::from_kv(&KvConfig::load(&config)?)?;
            let manifest = build_dataset(&cfg)?;
            manifest.save(&out)?;
            println!("wrote {} records to {}", manifest.len(), out.display());
            if let Some(dir) = export_images {
                manifest.export_images(&dir)?;
                println!("exported images to {}", dir.display());
            }
            if let Some(path) = pairs {
                write_pairs(&manifest, &out, &path, pairs_per_label, pairs_seed)?;
            }
            Ok(())
        }
        Command::Pretrain { config, resume } => {
            let cfg = TrainConfig::load(&config)?;
            expect_stage(&cfg, Stage::Pretrain)?;
            let data = TrainData::load(&cfg)?;
            let trainer = match resume {
                Some(p) => Trainer::resume(Checkpoint::load(&p)?)?,
                None => Trainer::pretrain(cfg, &data)?,
            };
            train(trainer, &data)
        }
        Command::Finetune { config, init, resume } => {
            let cfg = TrainConfig::load(&config)?;
            expect_stage(&cfg, Stage::Finetune)?;
            let data = TrainData::load(&cfg)?;
            let trainer = match resume {
                Some(p) => Trainer::resume(Checkpoint::load(&p)?)?,
                None => {
                    let pre = Checkpoint::load(&init)?;
                    Trainer::finetune(cfg, &data, &pre.network)?
                }
            };
            train(trainer, &data)
        }
        Command::Eval {
            ckpt,
            pairs,
            far,
            plot,
            binarize,
            out,
        } => {
            let net = Checkpoint::load(&ckpt)?.network;
            let set = PairSet::load(&pairs)?;
            let manifest = DatasetManifest::load(&set.manifest_path(&pairs))?;
            let mask = binarize.map_or(MaskOverride::Decoded, MaskOverride::Binarized);
            let (report, scores, same) = eval::evaluate(&net, &manifest, &set.pairs, &far, mask)?;
            let text = serde_json::to_string_pretty(&report)?;
            println!("{text}");
            if let Some(p) = out {
                std::fs::write(p, text + "\n")?;
            }
            if let Some(dir) = plot {
                eval::write_plots(&dir, &report, &scores, &same)?;
            }
            Ok(())
        }
        Command::PredictPattern { ckpt, image } => predict_pattern(&ckpt, &image),
    }
}

fn patterns(k: usize, dump: Option<&Path>) -> Result<()> {
    let book = enumerate_patterns(k)?;
    println!("K = {k}: {} patterns (including clean)", book.len());
    println!("size matrix (rows: height m, cols: width n):");
    print!("{}", size_matrix(k)?);
    if let Some(p) = dump {
        std::fs::write(p, book.to_json()?)?;
        println!("codebook written to {}", p.display());
    }
    Ok(())
}

fn write_pairs(manifest: &DatasetManifest, manifest_path: &Path, out: &Path, per_label: usize, seed: u64) -> Result<()> {
    let ids: Vec<usize> = manifest.records.iter().map(|r| r.identity).collect();
    let pairs = eval::make_pairs(&ids, per_label, seed)?;
    // store the manifest path relative to the pairs file when they share a directory
    let rel = match (manifest_path.parent(), out.parent()) {
        (Some(a), Some(b)) if a == b => PathBuf::from(manifest_path.file_name().unwrap_or_default()),
        _ => std::path::absolute(manifest_path)?,
    };
    let set = PairSet {
        header: PairsHeader {
            version: PAIRS_VERSION,
            manifest: rel,
            recipe: PAIR_RECIPE.to_string(),
        },
        pairs,
    };
    set.save(out)?;
    println!("wrote {} pairs to {}", set.pairs.len(), out.display());
    Ok(())
}

fn expect_stage(cfg: &TrainConfig, stage: Stage) -> Result<()> {
    if cfg.stage != stage {
        return Err(Error::Config {
            field: "stage".into(),
            reason: format!("this command runs the {stage:?} stage").to_lowercase(),
        });
    }
    if cfg.out_dir.is_none() {
        return Err(Error::Config {
            field: "out_dir".into(),
            reason: "missing required key".into(),
        });
    }
    Ok(())
}

fn print_epoch(l: &EpochLog) {
    let pattern = l.pattern_acc.map_or(String::new(), |p| format!(" pattern_acc {p:.3}"));
    println!(
        "epoch {:>3} step {:>6} lr {:.0e} loss {:.4} (margin {:.4}, pattern {:.4}) train_acc {:.3}{pattern}",
        l.epoch, l.step, l.lr, l.loss, l.margin_loss, l.pattern_loss, l.train_acc
    );
}

fn train(mut trainer: Trainer, data: &TrainData) -> Result<()> {
    trainer.run_with(data, print_epoch)?;
    if let Some(dir) = &trainer.config.out_dir {
        println!("checkpoints in {}", dir.display());
    }
    Ok(())
}

fn predict_pattern(ckpt: &Path, image: &Path) -> Result<()> {
    let net = Checkpoint::load(ckpt)?.network;
    let c = &net.config;
    if !c.has_mask() {
        return Err(Error::InvalidArgument("checkpoint has no pattern predictor".into()));
    }
    let img = Image::load_png(image, c.channels)?;
    if (img.width, img.height) != (c.width, c.height) {
        return Err(Error::InvalidArgument(format!(
            "image is {}x{}, model expects {}x{}",
            img.width, img.height, c.width, c.height
        )));
    }
    let input = Tensor::from_vec(&[1, c.channels, c.height, c.width], img.data);
    let out = net.infer(&input, MaskOverride::Decoded)?;
    let logits = out.pattern.expect("mask networks predict patterns");
    match c.pattern_head {
        maskface::network::PatternHead::Classify => {
            let idx = argmax_rows(&logits)[0];
            let book = enumerate_patterns(c.k)?;
            let p = book.get(idx).expect("argmax within codebook");
            println!("pattern {idx}: {}", serde_json::to_string(&p)?);
            print!("{}", pattern_to_block_mask(&p, c.k));
        }
        maskface::network::PatternHead::Regress => {
            let b = logits.data();
            println!(
                "box (normalized x0 y0 x1 y1): {:.3} {:.3} {:.3} {:.3}",
                b[0], b[1], b[2], b[3]
            );
        }
    }
    Ok(())
}
