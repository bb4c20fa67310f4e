use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use changenet::ctst::{self, StyleMode};
use changenet::data::{self, synth::derive_seed};
use changenet::network::SdNetwork;
use changenet::train::{self, AblationConfig, Dataset, SyntheticData, TrainConfig};
use changenet::{stats, Error, Tensor};

#[derive(Parser)]
#[command(name = "changenet", version, about = "Bitemporal change detection toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a JSON config, writing checkpoints to a directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a JSON metrics report for a checkpoint on a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Write the change probability map of one pair as a graymap.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        xa: PathBuf,
        #[arg(long)]
        xb: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restyle a pair. `ibst` takes its donor from --xc/--xd.
    Stylize {
        #[arg(long)]
        xa: PathBuf,
        #[arg(long)]
        xb: PathBuf,
        /// ust-ab, ust-ba, bst, ibst or random.
        #[arg(long, default_value = "random")]
        mode: String,
        #[arg(long, default_value_t = ctst::DEFAULT_LAMBDA_PRIME)]
        lambda_prime: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        xc: Option<PathBuf>,
        #[arg(long)]
        xd: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Per-region per-channel mean and std of a pair as CSV.
    StyleStats {
        #[arg(long)]
        xa: PathBuf,
        #[arg(long)]
        xb: PathBuf,
        #[arg(long, default_value_t = ctst::DEFAULT_LAMBDA_PRIME)]
        lambda_prime: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate synthetic train/val/test splits with manifests.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every variant from every seed and write a JSON comparison table.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> changenet::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Ok(serde_json::from_str(&text)?)
        }
    }
}

fn write_text(path: &Path, text: &str) -> changenet::Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> changenet::Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn rgb(path: &Path) -> changenet::Result<Tensor<f64>> {
    let t = data::read_image(path)?;
    if t.shape()[0] != 3 {
        return Err(Error::invalid("read_image", format!("{} is not an RGB image", path.display())));
    }
    Ok(t)
}

fn run(cmd: Cmd) -> changenet::Result<()> {
    match cmd {
        Cmd::Train { config, out } => {
            let text = fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let cfg = TrainConfig::from_json(&text)?;
            let (tr, val) = match (&cfg.train_manifest, &cfg.synthetic) {
                (Some(m), _) => (
                    Dataset::from_manifest(m)?,
                    cfg.val_manifest.as_deref().map(Dataset::from_manifest).transpose()?,
                ),
                (None, Some(s)) => {
                    let gen = |n, k| -> changenet::Result<Dataset> {
                        Ok(Dataset::from_samples(&data::generate_dataset(
                            &s.generator,
                            n,
                            derive_seed(s.seed, k),
                        )?))
                    };
                    let val = if s.val > 0 { Some(gen(s.val, 2)?) } else { None };
                    (gen(s.train, 1)?, val)
                }
                (None, None) => {
                    return Err(Error::invalid("train", "config needs train_manifest or synthetic"));
                }
            };
            create_dir(&out)?;
            let outcome = train::fit(&cfg, &tr, val.as_ref(), Some(&out), |l| eprintln!("{l}"))?;
            let summary = serde_json::json!({
                "epochs": cfg.epochs,
                "steps": outcome.losses.len(),
                "best_epoch": outcome.best_epoch,
                "best_val_f1": outcome.best_f1,
                "losses": outcome.losses,
            });
            write_text(&out.join("history.json"), &serde_json::to_string_pretty(&summary)?)
        }
        Cmd::Eval {
            checkpoint,
            manifest,
            threshold,
        } => {
            if !(threshold > 0.0 && threshold < 1.0) {
                return Err(Error::invalid("eval", "threshold must lie in (0, 1)"));
            }
            let mut net = SdNetwork::<f32>::load(&checkpoint)?;
            let d = Dataset::from_manifest(&manifest)?;
            let e = train::evaluate(&mut net, &d, threshold, 8)?;
            println!("{}", e.report.to_json());
            Ok(())
        }
        Cmd::Infer { checkpoint, xa, xb, out } => {
            let mut net = SdNetwork::<f32>::load(&checkpoint)?;
            let a = rgb(&xa)?;
            let b = rgb(&xb)?;
            if a.shape() != b.shape() {
                return Err(Error::shape("infer", a.shape(), b.shape()));
            }
            let mut shape = vec![1];
            shape.extend_from_slice(a.shape());
            let p = net.infer(&a.cast::<f32>().reshape(&shape)?, &b.cast::<f32>().reshape(&shape)?)?;
            data::write_image(&out, &p.batch_item(0))
        }
        Cmd::Stylize {
            xa,
            xb,
            mode,
            lambda_prime,
            seed,
            xc,
            xd,
            out_dir,
        } => {
            let mode = if mode == "random" {
                ctst::sample_mode(&mut ChaCha8Rng::seed_from_u64(seed))
            } else {
                mode.parse::<StyleMode>()?
            };
            let mut a = vec![rgb(&xa)?];
            let mut b = vec![rgb(&xb)?];
            match (mode, xc, xd) {
                (StyleMode::Ibst, Some(c), Some(d)) => {
                    a.push(rgb(&c)?);
                    b.push(rgb(&d)?);
                }
                (StyleMode::Ibst, _, _) => {
                    return Err(Error::invalid("stylize", "ibst needs a donor pair via --xc and --xd"));
                }
                _ => {}
            }
            let s = ctst::stylize_in_batch(&a, &b, 0, mode, lambda_prime, ctst::IMAGE_EPS)?;
            create_dir(&out_dir)?;
            data::write_image(&out_dir.join("xa.ppm"), &s.xa)?;
            data::write_image(&out_dir.join("xb.ppm"), &s.xb)?;
            let donor = s.donor_id.map_or("none".to_string(), |d| d.to_string());
            write_text(&out_dir.join("stylize.txt"), &format!("mode={mode} donor={donor}\n"))
        }
        Cmd::StyleStats {
            xa,
            xb,
            lambda_prime,
            out,
        } => {
            let rows = stats::style_report(&rgb(&xa)?, &rgb(&xb)?, lambda_prime)?;
            write_text(&out, &stats::style_report_csv(&rows))
        }
        Cmd::GenData { config, out } => {
            let cfg: SyntheticData = read_json(config.as_deref())?;
            cfg.generator.validate()?;
            create_dir(&out)?;
            for (k, (split, n)) in [("train", cfg.train), ("val", cfg.val), ("test", cfg.test)]
                .into_iter()
                .enumerate()
            {
                let samples = data::generate_dataset(&cfg.generator, n, derive_seed(cfg.seed, k as u64 + 1))?;
                let path = data::write_split(&out, split, &samples)?;
                eprintln!("{split}: {n} pairs -> {}", path.display());
            }
            Ok(())
        }
        Cmd::Ablate { config, out } => {
            let cfg: AblationConfig = read_json(config.as_deref())?;
            cfg.base.validate()?;
            let report = train::run_ablation(&cfg, |l| eprintln!("{l}"))?;
            write_text(&out, &serde_json::to_string_pretty(&report)?)
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_numeric() {
        3
    } else if e.is_io() {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
