use std::fs;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use move_core::checkpoint::{ModelCheckpoint, Seeds};
use move_core::conditioning::ConditionLabel;
use move_core::corpus::{load_dataset, synthesize_notes, write_notes, CorpusPlan};
use move_core::evaluation::{evaluate, latent_topology, DescriptorFrame, Linearizer, TopologyGrid};
use move_core::model::{Model, ModelConfig, Variant};
use move_core::service::{self, AppState, ServerConfig, Snapshot};
use move_core::spectral::SpectralConfig;
use move_core::trainer::{train, TrainConfig, TrainOutputs};
use move_core::transfer::{transfer_melody, TransferRequest, DEFAULT_OVERLAP};
use move_core::{wav, Result};

#[derive(Parser)]
#[command(name = "move", version, about = "Timbre transfer with modulated variational auto-encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a corpus of single notes as WAV files plus a manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        instruments: usize,
        #[arg(long, value_delimiter = ',', default_value = "3,4")]
        octaves: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        velocities: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model on a WAV corpus.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "move-fpod")]
        variant: Variant,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "desk")]
        preset: Preset,
        /// Metrics log; defaults to OUT.metrics.jsonl next to the checkpoint.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Decode a lattice over the latent space and dump its descriptors.
    Topology {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        instrument: usize,
        #[arg(long)]
        pitch: usize,
        #[arg(long)]
        octave: usize,
        #[arg(long, default_value_t = 9)]
        grid: usize,
        #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_negative_numbers = true, default_values_t = [-3.0, 3.0])]
        r#box: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Transfer a recording from one instrument to another.
    Transfer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        source_instr: usize,
        #[arg(long)]
        target_instr: usize,
        #[arg(long)]
        pitch: Option<usize>,
        #[arg(long)]
        octave: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        gl_iters: usize,
    },
    /// Serve a checkpoint over HTTP.
    Serve {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value_t = service::DEFAULT_MAX_GRID)]
        max_grid: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
        Command::SynthData {
            out,
            instruments,
            octaves,
            velocities,
            seed,
        } => {
            let plan = CorpusPlan {
                octaves,
                velocities,
                seed,
                ..CorpusPlan::desk(instruments, seed)?
            };
            let (notes, skipped) = synthesize_notes(&plan, SpectralConfig::desk().sample_rate)?;
            let names: Vec<String> = plan.instruments.iter().map(|s| s.name.clone()).collect();
            let manifest = write_notes(&out, &notes, &names)?;
            println!("wrote {} notes ({} skipped), manifest {}", notes.len(), skipped, manifest.display());
            Ok(())
        }
        Command::Train {
            data,
            variant,
            epochs,
            out,
            seed,
            preset,
            metrics,
        } => {
            let spectral = match preset {
                Preset::Desk => SpectralConfig::desk(),
                Preset::Paper => SpectralConfig::paper(),
            };
            let mut cfg = match preset {
                Preset::Desk => TrainConfig::desk(seed),
                Preset::Paper => TrainConfig::paper(seed),
            };
            if let Some(e) = epochs {
                cfg.total_epochs = e;
                cfg.warmup_start_epoch = cfg.warmup_start_epoch.min(e.saturating_sub(1));
            }
            let split = peek_instruments(&data)?;
            let model_cfg = match preset {
                Preset::Desk => ModelConfig::desk(variant, split),
                Preset::Paper => ModelConfig::paper(variant, split),
            };
            let dataset = load_dataset(&data, spectral, model_cfg.frames, seed)?;
            let (train_n, test_n) = dataset.counts().iter().fold((0, 0), |a, c| (a.0 + c.0, a.1 + c.1));
            println!("{} instruments, {train_n} train / {test_n} test notes", dataset.num_instruments());
            let model = Model::new(model_cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let metrics_path = metrics.unwrap_or_else(|| {
                let mut p = out.clone().into_os_string();
                p.push(".metrics.jsonl");
                PathBuf::from(p)
            });
            if let Some(parent) = metrics_path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            let mut metrics = BufWriter::new(fs::File::create(&metrics_path)?);
            let result = train(
                model,
                &dataset,
                &cfg,
                TrainOutputs {
                    checkpoint_dir: Some(out.clone()),
                    metrics: Some(&mut metrics),
                    seeds: Seeds {
                        dataset: seed,
                        init: seed,
                        train: seed,
                    },
                    on_epoch: None,
                },
            )?;
            metrics.flush()?;
            let last = result.history.last().expect("at least one epoch");
            println!(
                "trained {} epochs, final loss {:.4}, checkpoint {}, metrics {}",
                last.epoch + 1,
                last.total,
                out.display(),
                metrics_path.display()
            );
            Ok(())
        }
        Command::Eval { ckpt, data, report } => {
            let ckpt = ModelCheckpoint::load(&ckpt)?;
            let dataset = load_for(&ckpt, &data)?;
            let rep = evaluate(&ckpt, &dataset)?;
            let text = rep.to_text();
            match report {
                Some(p) => fs::write(&p, &text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Topology {
            ckpt,
            instrument,
            pitch,
            octave,
            grid,
            r#box,
            out,
        } => {
            let ckpt = ModelCheckpoint::load(&ckpt)?;
            let lin = Linearizer::new(ckpt.stats.clone(), &ckpt.spectral);
            let cond = ConditionLabel::new(pitch, octave, Some(instrument));
            let g = latent_topology(&ckpt.model, &lin, cond, grid, r#box[0], r#box[1])?;
            let text = topology_text(&g);
            match out {
                Some(p) => fs::write(&p, &text)?,
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Transfer {
            ckpt,
            input,
            source_instr,
            target_instr,
            pitch,
            octave,
            out,
            gl_iters,
        } => {
            let ckpt = ModelCheckpoint::load(&ckpt)?;
            let audio = wav::resample_linear(&wav::read_wav(&input)?, ckpt.spectral.sample_rate);
            let req = TransferRequest {
                source_instrument: source_instr,
                target_instrument: target_instr,
                pitch_class: pitch,
                octave,
            };
            let res = transfer_melody(&ckpt, &audio, &req, DEFAULT_OVERLAP, gl_iters)?;
            wav::write_wav(&out, &res.audio)?;
            println!("wrote {:.2} s to {}", res.audio.duration_s(), out.display());
            Ok(())
        }
        Command::Serve {
            ckpt,
            data,
            port,
            host,
            max_grid,
        } => {
            let snapshot = match ckpt {
                Some(dir) => {
                    let ckpt = ModelCheckpoint::load(&dir)?;
                    let dataset = data.map(|d| load_for(&ckpt, &d)).transpose()?;
                    Some(Snapshot::new(ckpt, dataset.as_ref())?)
                }
                None => None,
            };
            let app = AppState::new(
                snapshot,
                ServerConfig {
                    max_grid,
                    ..ServerConfig::default()
                },
            );
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(SocketAddr::new(host, port), app))?;
            Ok(())
        }
    }
}

/// Number of instruments in a corpus directory, from its file names.
fn peek_instruments(dir: &Path) -> Result<usize> {
    let ing = move_core::corpus::ingest_wav_dir(dir, SpectralConfig::desk().sample_rate)?;
    if ing.instruments.is_empty() {
        return Err(move_core::Error::Insufficient(format!("no instruments in {}", dir.display())));
    }
    Ok(ing.instruments.len())
}

/// Reproduces the split a checkpoint was trained on.
fn load_for(ckpt: &ModelCheckpoint, dir: &Path) -> Result<move_core::corpus::DatasetSplit> {
    load_dataset(dir, ckpt.spectral.clone(), ckpt.model.config().frames, ckpt.seeds.dataset)
}

fn topology_text(g: &TopologyGrid) -> String {
    let mut s = format!(
        "# grid n={} lo={} hi={} pitch_class={} octave={} instrument={}\n# z0 z1 z2 {}\n",
        g.n,
        g.lo,
        g.hi,
        g.condition.pitch_class,
        g.condition.octave,
        g.condition.instrument.map_or("-".into(), |i| i.to_string()),
        DescriptorFrame::NAMES.join(" ")
    );
    for p in &g.points {
        let d = &p.descriptors;
        s.push_str(&format!(
            "{:.6} {:.6} {:.6} {:.6} {:.3} {:.3} {:.4}\n",
            p.z[0], p.z[1], p.z[2], d.flatness, d.centroid, d.rolloff, d.loudness
        ));
    }
    s
}
