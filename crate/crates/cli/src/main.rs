use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use resmaster_core::conditioning::{
    empty_image_embedding, embed_text_stub, load_caption_manifest, manifest_to_json, save_caption_manifest,
    CaptionManifest, ConditionBundle,
};
use resmaster_core::io::{load_config, read_image, write_image, ConfigOverrides};
use resmaster_core::pipeline::{generate_low_res, resmaster_generate, PipelineConfig, RunOptions};
use resmaster_core::selftest;

/// Environment variable capping parallel patch evaluation.
const THREADS_ENV: &str = "RESMASTER_THREADS";

#[derive(Parser)]
#[command(name = "resmaster", version, about = "Guided patch-based diffusion upscaling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a low-resolution reference image.
    Lowres {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "a detailed photograph")]
        prompt: String,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Upscale a reference image with structural and per-patch guidance.
    Upscale {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Caption manifest (see `plan`); without it every patch uses --prompt.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "a detailed photograph")]
        prompt: String,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write a caption manifest skeleton for the patch layout of an upscale.
    Plan {
        #[arg(long = "in")]
        input: PathBuf,
        /// Destination file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "a detailed photograph")]
        prompt: String,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Args, Clone, Default)]
struct CommonArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    scale: Option<usize>,
    /// Patch window, `N` or `HxW`.
    #[arg(long, value_parser = parse_pair)]
    window: Option<[usize; 2]>,
    /// Patch stride, `N` or `HxW`.
    #[arg(long, value_parser = parse_pair)]
    stride: Option<[usize; 2]>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    d0: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "guidance-stop")]
    guidance_stop: Option<usize>,
}

fn parse_pair(s: &str) -> std::result::Result<[usize; 2], String> {
    let parse = |p: &str| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok([parse(h)?, parse(w)?]),
        None => {
            let v = parse(s)?;
            Ok([v, v])
        }
    }
}

impl CommonArgs {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            scale: self.scale,
            window: self.window,
            stride: self.stride,
            steps: self.steps,
            d0: self.d0,
            lambda: self.lambda,
            seed: self.seed,
            guidance_stop_step: self.guidance_stop,
        }
    }

    /// Config with the reference image's dimensions substituted before
    /// validation.
    fn config_for(&self, reference: Option<(usize, usize, usize)>) -> Result<PipelineConfig> {
        let mut cfg = load_config(self.config.as_deref(), &self.overrides())?;
        if let Some((h, w, c)) = reference {
            cfg.low_res = [h, w];
            cfg.channels = c;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
            if n == 0 {
                bail!("{THREADS_ENV} must be at least 1");
            }
            Ok(Some(n))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context(THREADS_ENV),
    }
}

fn load_reference(path: &Path) -> Result<resmaster_core::LatentGrid> {
    if !path.exists() {
        bail!("input file not found: {}", path.display());
    }
    Ok(read_image(path)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Lowres {
            out,
            prompt,
            common,
        } => {
            let cfg = common.config_for(None)?;
            let denoiser = cfg.build_denoiser()?;
            let cond = ConditionBundle::new(
                embed_text_stub(&prompt, cfg.text_tokens, cfg.embed_dim, cfg.model_seed)?,
                empty_image_embedding(cfg.image_tokens, cfg.embed_dim),
                0.0,
            )?;
            let dims = (cfg.low_res[0], cfg.low_res[1], cfg.channels);
            let image = generate_low_res(denoiser.as_ref(), Some(&cond), dims, &cfg)?;
            write_image(&image, &out)?;
            log::info!("wrote {}", out.display());
        }
        Command::Upscale {
            input,
            out,
            manifest,
            prompt,
            common,
        } => {
            let reference = load_reference(&input)?;
            let cfg = common.config_for(Some(reference.shape()))?;
            let layout = cfg.layout()?;
            let captions = match manifest {
                Some(p) => {
                    if !p.exists() {
                        bail!("manifest file not found: {}", p.display());
                    }
                    load_caption_manifest(&p, &layout)?
                }
                None => CaptionManifest::uniform(prompt, layout.len()),
            };
            let denoiser = cfg.build_denoiser()?;
            let total = cfg.steps;
            let progress = |p: resmaster_core::pipeline::Progress<'_>| {
                if p.patch == 0 {
                    log::debug!("step {}/{total}", total + 1 - p.step);
                }
            };
            let options = RunOptions {
                threads: threads_from_env()?,
                progress: Some(&progress),
            };
            let image = resmaster_generate(&reference, &captions, denoiser.as_ref(), &cfg, &options)?;
            write_image(&image, &out)?;
            log::info!("wrote {}", out.display());
        }
        Command::Plan {
            input,
            out,
            prompt,
            common,
        } => {
            let reference = load_reference(&input)?;
            let cfg = common.config_for(Some(reference.shape()))?;
            let layout = cfg.layout()?;
            let skeleton = CaptionManifest::uniform(prompt, layout.len());
            match out {
                Some(path) => {
                    save_caption_manifest(&path, &skeleton, &layout)?;
                    println!("{} patches -> {}", layout.len(), path.display());
                }
                None => println!("{}", manifest_to_json(&skeleton, &layout)),
            }
        }
        Command::Selftest => {
            let outcomes = selftest::run_all();
            let mut failed = 0;
            for o in &outcomes {
                println!(
                    "[{}] {}{}",
                    if o.passed { "PASS" } else { "FAIL" },
                    o.name,
                    if o.detail.is_empty() {
                        String::new()
                    } else {
                        format!(" ({})", o.detail)
                    }
                );
                failed += usize::from(!o.passed);
            }
            if failed > 0 {
                bail!("{failed} of {} checks failed", outcomes.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
