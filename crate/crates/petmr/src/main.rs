use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use petmr::config::{RunConfig, Variant};
use petmr::error::{Error, Result};
use petmr::pipeline::{self, Dataset, EvalOptions, PerturbationOptions, ReconSource, Split};

#[derive(Parser)]
#[command(name = "petmr", version, about = "Synthetic MR-to-CT synthesis for PET attenuation correction")]
struct Cli {
    /// Run configuration (TOML). Defaults apply to every missing key.
    #[arg(long, global = true, env = "PETMR_CONFIG")]
    config: Option<PathBuf>,
    /// Threads for per-sample work. Overrides `run.workers`.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Suppress progress messages on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.n`.
        #[arg(long)]
        n: Option<usize>,
        /// Overrides `phantom.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one stage. Stage 1 trains every variant unless `--variant` is given.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_dir: PathBuf,
        /// Stage-1 variant: baseline, mh or mc_dropout.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Reconstruct pPETs of a split with every hypothesis of a checkpoint.
    Recon {
        /// Synthesis checkpoint.
        #[arg(long, required_unless_present = "identity", conflicts_with = "identity")]
        ckpt: Option<PathBuf>,
        /// Use the true CT as pCT (zero-residual control).
        #[arg(long)]
        identity: bool,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
        /// Method name recorded in the manifest; defaults to the output
        /// directory name.
        #[arg(long)]
        method: Option<String>,
    },
    /// Compare reconstructions of several methods.
    Eval {
        /// Directory holding one reconstruction directory per method.
        #[arg(long)]
        recon_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "baseline,mh,imitation")]
        methods: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// `<multi-hypothesis>,<mc-dropout>` methods for the z-score study.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        sampling: Option<Vec<String>>,
        /// Write graymaps for the first N samples of each method.
        #[arg(long, default_value_t = 0)]
        images: usize,
    },
    /// Inject a CT patch and show how far the PET error spreads.
    DemoPerturbation {
        #[arg(long, default_value_t = 0)]
        sample: u64,
        /// Dataset to take the sample from; otherwise it is generated.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        patch_size: usize,
        #[arg(long, default_value_t = 1000.0, allow_negative_numbers = true)]
        delta_hu: f64,
        /// Patch centre as `row,col`; defaults to the brain centre.
        #[arg(long, value_delimiter = ',', num_args = 1)]
        center: Option<Vec<usize>>,
        /// Relative PET residual threshold (fraction of mean brain activity).
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the effective configuration as TOML.
    Config,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(Error::usage("--workers must be at least 1"));
        }
        cfg.run.workers = w;
    }
    Ok(cfg)
}

fn method_name(out: &Path, method: Option<String>) -> String {
    method.unwrap_or_else(|| {
        out.file_name()
            .map_or_else(|| "method".to_string(), |n| n.to_string_lossy().into_owned())
    })
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli)?;
    let quiet = cli.quiet;
    match cli.command {
        Command::GenData { out, n, seed } => {
            if let Some(n) = n {
                cfg.data.n = n;
            }
            if let Some(s) = seed {
                cfg.phantom.seed = s;
            }
            cfg.validate()?;
            let m = pipeline::gen_data(&cfg, &out)?;
            println!(
                "generated {} samples (train {}, val {}, test {}) dataset_hash={}",
                m.n, m.split.train, m.split.val, m.split.test, m.dataset_hash
            );
        }
        Command::Train {
            stage,
            data,
            ckpt_dir,
            variant,
        } => {
            let variants = match (stage, variant.as_deref()) {
                (1, None | Some("all")) => Variant::ALL.to_vec(),
                (1, Some(tag)) => vec![Variant::from_tag(tag).ok_or_else(|| {
                    Error::usage(format!("unknown variant `{tag}` (expected baseline, mh or mc_dropout)"))
                })?],
                (_, Some(_)) => return Err(Error::usage("--variant applies to stage 1 only")),
                (_, None) => Vec::new(),
            };
            let ds = Dataset::load(&data, cfg.run.workers)?;
            pipeline::adopt_dataset_config(&mut cfg, &ds)?;
            let manifests = match stage {
                1 => variants
                    .into_iter()
                    .map(|v| pipeline::run_stage1(&cfg, &ds, &ckpt_dir, v, quiet))
                    .collect::<Result<Vec<_>>>()?,
                2 => vec![pipeline::run_stage2(&cfg, &ds, &ckpt_dir, quiet)?],
                _ => vec![pipeline::run_stage3(&cfg, &ds, &ckpt_dir, quiet)?],
            };
            for m in manifests {
                println!(
                    "stage {} {}: {} best_iteration={} best_validation={} wins={:?} sha256={}",
                    m.stage,
                    m.variant,
                    m.outputs.checkpoint,
                    m.outputs.best_iteration,
                    m.outputs.best_validation,
                    m.outputs.win_totals,
                    m.outputs.checkpoint_sha256
                );
            }
        }
        Command::Recon {
            ckpt,
            identity,
            data,
            split,
            out,
            method,
        } => {
            let split = Split::from_tag(&split)
                .ok_or_else(|| Error::usage(format!("unknown split `{split}` (expected train, val or test)")))?;
            let ds = Dataset::load(&data, cfg.run.workers)?;
            pipeline::adopt_dataset_config(&mut cfg, &ds)?;
            let source = match (&ckpt, identity) {
                (Some(p), false) => ReconSource::Checkpoint(p),
                _ => ReconSource::Identity,
            };
            let method = method_name(&out, method);
            let m = pipeline::recon(&cfg, source, &ds, split, &out, &method)?;
            println!(
                "reconstructed {} samples x {} hypotheses ({}) into {}",
                m.files.len(),
                m.hypotheses,
                m.sampling,
                out.display()
            );
        }
        Command::Eval {
            recon_dir,
            methods,
            out,
            sampling,
            images,
        } => {
            let sampling = match sampling {
                None => None,
                Some(v) if v.len() == 2 => Some((v[0].clone(), v[1].clone())),
                Some(_) => return Err(Error::usage("--sampling takes exactly two methods: <mh>,<mc>")),
            };
            let opts = EvalOptions {
                sampling,
                images,
                workers: cfg.run.workers,
            };
            let o = pipeline::eval(&recon_dir, &methods, &out, &opts)?;
            for a in &o.report.aggregates {
                println!(
                    "{}: n={} pCT MAE {:.2} +- {:.2} HU, pPET MAE {:.3} +- {:.3}",
                    a.method, a.n, a.ct_mean, a.ct_std, a.pet_mean, a.pet_std
                );
            }
            for t in &o.report.tests {
                println!(
                    "ttest {} vs {} ({}): t={:.4} p={:.3e} n={}",
                    t.method, t.against, t.metric, t.test.t, t.test.p, t.test.n
                );
            }
            if let Some(s) = &o.sampling {
                println!(
                    "sampling: mean median |Z| mh={:.4} mc={:.4} (t={:.4} p={:.3e})",
                    s.mean_median_abs_z_mh, s.mean_median_abs_z_mc, s.test.t, s.test.p
                );
            }
        }
        Command::DemoPerturbation {
            sample,
            data,
            patch_size,
            delta_hu,
            center,
            threshold,
            out,
        } => {
            let center = match center.as_deref() {
                None => None,
                Some(&[r, c]) => Some((r, c)),
                Some(_) => return Err(Error::usage("--center takes `row,col`")),
            };
            let s = match &data {
                Some(dir) => {
                    let ds = Dataset::load(dir, cfg.run.workers)?;
                    ds.by_id(sample)
                        .cloned()
                        .ok_or_else(|| Error::usage(format!("dataset has no sample {sample}")))?
                }
                None => petmr_core::phantom::generate_sample(&cfg.phantom, sample)?,
            };
            let opts = PerturbationOptions {
                size: patch_size,
                delta_hu,
                center,
                threshold,
            };
            let (summary, _) = pipeline::demo_perturbation(&cfg, &s, &opts, &out)?;
            println!("{}", summary.line());
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: {first}");
            eprint!("{}", msg.lines().skip(1).map(|l| format!("{l}\n")).collect::<String>());
            return ExitCode::from(1);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
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
