use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use uflow::checkpoint;
use uflow::config::{Config, ViewKind};
use uflow::dataset::{self, Dataset};
use uflow::error::{Error, Result};
use uflow::eval::{self, Models};
use uflow::pipeline;
use uflow::render::{self, Palette, Panel};
use uflow::train;
use uflow::uft;
use uflow_core::Tensor;

#[derive(Parser)]
#[command(name = "uflow", version, about = "Bayesian inverse medium scattering with U-Net + conditional Glow")]
struct Cli {
    /// Master seed (overrides the configuration's).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment configuration as JSON; defaults to the desk preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Preset used when no configuration file is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Sensor arrangement for presets.
    #[arg(long, global = true, value_enum, default_value_t = ViewArg::Full)]
    view: ViewArg,
    /// Request bit-for-bit reproducible output. Every stage already is
    /// (single-threaded, seeded streams), so this only logs the mode.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
    Smoke,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Full,
    Limited,
}

#[derive(Subcommand)]
enum Command {
    /// Sample media, simulate noisy measurements and backproject them.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the U-Net on a generated dataset.
    TrainUnet {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode the training split with a frozen U-Net.
    ExtractLatents {
        #[arg(long)]
        unet: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional flow on extracted latents.
    TrainFlow {
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        blocks: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw posterior samples for one test record.
    Sample {
        #[arg(long)]
        unet: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Position in the test split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 25)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate SNRs and UQ asymmetry on the test split.
    Evaluate {
        #[arg(long)]
        unet: PathBuf,
        #[arg(long)]
        flow: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 25)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render tensors to PNG. With `--sample-dir` and `--data` it renders
    /// truth / BP / samples / MMSE / UQ panels for that sample directory.
    Render {
        /// UFT files rendered side by side.
        #[arg(long, num_args = 0..)]
        input: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = PaletteArg::Gray)]
        palette: PaletteArg,
        #[arg(long)]
        sample_dir: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage into one work directory, reusing finished stages.
    Run {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PaletteArg {
    Gray,
    Diverging,
    Uncertainty,
}

impl From<PaletteArg> for Palette {
    fn from(p: PaletteArg) -> Self {
        match p {
            PaletteArg::Gray => Palette::Gray,
            PaletteArg::Diverging => Palette::Diverging,
            PaletteArg::Uncertainty => Palette::Uncertainty,
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<Config> {
    let view = match cli.view {
        ViewArg::Full => ViewKind::Full,
        ViewArg::Limited => ViewKind::Limited,
    };
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => match cli.preset {
            Preset::Desk => Config::desk(view),
            Preset::Paper => Config::paper(view),
            Preset::Smoke => Config::smoke(view),
        },
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// The configuration a dataset was generated with, with CLI overrides for
/// the training stages.
fn dataset_config(cli: &Cli, ds: &Dataset) -> Result<Config> {
    let mut cfg = ds.manifest.config.clone();
    if cli.config.is_some() {
        let given = resolve_config(cli)?;
        if given.data_hash() != cfg.data_hash() {
            return Err(Error::Config("--config describes a different dataset than --data".into()));
        }
        cfg = given;
    } else if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_models(unet: &Path, flow: &Path) -> Result<(uflow_core::unet::UNet, uflow_core::flow::CondFlow, String, String)> {
    let (u, um) = checkpoint::load_unet(unet)?;
    let (f, fm) = checkpoint::load_flow(flow)?;
    checkpoint::check_compatible(&u, &f)?;
    Ok((u, f, um.params_sha256, fm.params_sha256))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn square(t: &Tensor) -> Result<Tensor> {
    let n = t.shape()[t.rank() - 1];
    Ok(t.clone().reshape(&[t.len() / n, n])?)
}

fn run(cli: &Cli) -> Result<()> {
    if cli.deterministic {
        log::info!("deterministic mode: single-threaded, seeded streams only");
    }
    match &cli.command {
        Command::GenerateData { out } => {
            let cfg = resolve_config(cli)?;
            let m = dataset::generate(&cfg, out)?;
            println!("{} records written to {} (data hash {})", m.records.len(), out.display(), m.data_hash);
        }
        Command::TrainUnet { data, epochs, out } => {
            let ds = dataset::load(data)?;
            let mut cfg = dataset_config(cli, &ds)?;
            if let Some(e) = epochs {
                cfg.unet.epochs = *e;
            }
            train::train_unet(&ds, &cfg, out)?;
            println!("U-Net checkpoint in {}", out.display());
        }
        Command::ExtractLatents { unet, data, out } => {
            let ds = dataset::load(data)?;
            let (net, meta) = checkpoint::load_unet(unet)?;
            let latents = train::extract_latents(&net, &ds.train)?;
            train::save_latents(out, &latents, &meta.stage_hash)?;
            // the flow stage needs the experiment configuration; keep it with the latents
            let cfg = dataset_config(cli, &ds)?;
            write_text(&out.join("config.json"), &serde_json::to_string_pretty(&cfg)?)?;
            println!("{} latent pairs {:?} in {}", latents.s6.shape()[0], &latents.s6.shape()[1..], out.display());
        }
        Command::TrainFlow {
            latents,
            epochs,
            blocks,
            out,
        } => {
            let lat = train::load_latents(latents)?;
            let mut cfg = match &cli.config {
                Some(_) => resolve_config(cli)?,
                None => Config::load(&latents.join("config.json")).or_else(|_| resolve_config(cli))?,
            };
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(e) = epochs {
                cfg.flow.epochs = *e;
            }
            if let Some(b) = blocks {
                cfg.flow.blocks = *b;
            }
            train::train_flow(&lat, &cfg, out)?;
            println!("flow checkpoint in {}", out.display());
        }
        Command::Sample {
            unet,
            flow,
            data,
            index,
            n,
            out,
        } => {
            let ds = dataset::load(data)?;
            let seed = dataset_config(cli, &ds)?.seed;
            let (u, f, us, fs_) = load_models(unet, flow)?;
            let models = Models {
                unet: &u,
                flow: &f,
                unet_sha256: &us,
                flow_sha256: &fs_,
            };
            let rec = ds
                .test
                .get(*index)
                .ok_or_else(|| Error::Dataset(format!("test split has {} records", ds.test.len())))?;
            let ens = eval::posterior_for(&models, rec, *n, seed)?;
            fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let side = rec.speed.shape()[0];
            let stacked = Tensor::concat_batch(
                &ens.samples
                    .iter()
                    .map(|s| s.clone().reshape(&[1, side, side]))
                    .collect::<std::result::Result<Vec<_>, _>>()?,
            )?;
            uft::save_real(&out.join("samples.uft"), &stacked)?;
            uft::save_real(&out.join("mmse.uft"), &ens.mmse)?;
            uft::save_real(&out.join("uq.uft"), &ens.uq)?;
            write_text(
                &out.join("sample.json"),
                &serde_json::to_string_pretty(&serde_json::json!({
                    "test_position": index,
                    "record_index": rec.entry.index,
                    "record_seed": rec.entry.seed,
                    "samples": n,
                    "seed": seed,
                }))?,
            )?;
            println!("{n} samples for record {} in {}", rec.entry.index, out.display());
        }
        Command::Evaluate {
            unet,
            flow,
            data,
            n,
            out,
        } => {
            let ds = dataset::load(data)?;
            let seed = dataset_config(cli, &ds)?.seed;
            let (u, f, us, fs_) = load_models(unet, flow)?;
            let models = Models {
                unet: &u,
                flow: &f,
                unet_sha256: &us,
                flow_sha256: &fs_,
            };
            let report = eval::evaluate(&ds, &models, *n, seed)?;
            write_text(out, &eval::report_json(&report)?)?;
            println!(
                "BP {:.2} dB | U-Net {:.2} dB | MMSE {:.2} dB | UQ asymmetry {}",
                report.mean_snr_bp,
                report.mean_snr_unet,
                report.mean_snr_mmse,
                report.uq_asymmetry.map_or("undefined".into(), |r| format!("{r:.3}"))
            );
        }
        Command::Render {
            input,
            palette,
            sample_dir,
            data,
            out,
        } => {
            let mut owned: Vec<(String, Tensor, Palette)> = Vec::new();
            if let Some(dir) = sample_dir {
                let info: serde_json::Value = serde_json::from_str(
                    &fs::read_to_string(dir.join("sample.json")).map_err(|e| Error::io(dir, e))?,
                )?;
                if let Some(data) = data {
                    let ds = dataset::load(data)?;
                    let pos = info["test_position"].as_u64().unwrap_or(0) as usize;
                    if let Some(rec) = ds.test.get(pos) {
                        owned.push(("truth".into(), rec.speed.clone(), Palette::Gray));
                        owned.push(("bp".into(), rec.bp.clone(), Palette::Diverging));
                    }
                }
                let samples = uft::load_real(&dir.join("samples.uft"))?;
                for i in 0..samples.shape()[0].min(3) {
                    owned.push((format!("sample {i}"), square(&samples.batch_item(i))?, Palette::Gray));
                }
                owned.push(("mmse".into(), uft::load_real(&dir.join("mmse.uft"))?, Palette::Gray));
                owned.push(("uq".into(), uft::load_real(&dir.join("uq.uft"))?, Palette::Uncertainty));
            }
            for path in input {
                let t = square(&uft::load_real(path)?)?;
                owned.push((path.display().to_string(), t, (*palette).into()));
            }
            let panels: Vec<Panel> = owned
                .iter()
                .map(|(label, image, palette)| Panel {
                    label: label.clone(),
                    image,
                    palette: *palette,
                })
                .collect();
            render::write(&panels, out)?;
            println!("rendered {} panels to {}", panels.len(), out.display());
        }
        Command::Run { out } => {
            let cfg = resolve_config(cli)?;
            let outputs = pipeline::run(&cfg, out)?;
            let r = &outputs.report;
            println!(
                "BP {:.2} dB | U-Net {:.2} dB | MMSE {:.2} dB | UQ asymmetry {}",
                r.mean_snr_bp,
                r.mean_snr_unet,
                r.mean_snr_mmse,
                r.uq_asymmetry.map_or("undefined".into(), |v| format!("{v:.3}"))
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
