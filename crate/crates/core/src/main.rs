use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nhsg::config::{template, PipelineConfig};
use nhsg::corpus::{write_toy_corpus, ToyCorpusSpec};
use nhsg::dsp::{read_wav, write_wav};
use nhsg::eval::{evaluate_manifest, write_report_csv, write_report_json};
use nhsg::manifest::{Manifest, ManifestRow, Split};
use nhsg::numerics::{load_params, save_params};
use nhsg::pipeline::{self, Cache};
use nhsg::representation::{read_codebook, write_codebook, TimbreEmbedder};
use nhsg::segmentation::{filter_by_f0, segment_recording};
use nhsg::stage1::score::Score;
use nhsg::{Error, Result};

#[derive(Parser)]
#[command(name = "nhsg", version, about = "Non-human singing synthesis and conversion")]
struct Cli {
    /// Pipeline config (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed and NHSG_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Split a long recording at silences and drop unvoiced clips.
    Segment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "general")]
        domain: String,
        /// Write a manifest of the kept clips here.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Content features and timbre embeddings per clip (and representations
    /// when a codebook is given).
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Fit the per-layer k-means codebook on cached features.
    TrainKmeans {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the score-to-representation model.
    TrainStage1 {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train the vocoder on human clips.
    TrainStage2 {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Total step budget, counted from step 0 when resuming.
        #[arg(long)]
        steps: Option<u64>,
        /// Per-step loss CSV; `<out>.losses.csv` when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Adapt a vocoder checkpoint to non-human timbres.
    Finetune {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Per-step loss CSV; `<out>.losses.csv` when omitted.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Score plus timbre reference to audio.
    Synthesize {
        #[arg(long)]
        score: PathBuf,
        /// WAV or NHTE embedding file.
        #[arg(long)]
        timbre: PathBuf,
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        vocoder: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Source audio plus timbre reference to audio.
    Convert {
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        timbre: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Codebook override; the checkpoint's own codebook otherwise.
        #[arg(long)]
        codebook: Option<PathBuf>,
    },
    /// Objective metrics over a pairs manifest.
    Evaluate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Print any artifact as text.
    Inspect { path: PathBuf },
    /// Write the synthetic toy corpus.
    ToyCorpus {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default (or reference-scale) config.
    Config {
        #[arg(long)]
        reference: bool,
    },
}

fn require(paths: &[&Path]) -> Result<()> {
    let missing: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!("missing input: {}", missing.join(", "))))
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let cfg = match &cli.config {
        Some(p) => {
            require(&[p])?;
            PipelineConfig::load(p)?
        }
        None => PipelineConfig::default(),
    };
    let mut cfg = cfg.with_env_seed()?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn ensure_parent(p: &Path) -> Result<()> {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => std::fs::create_dir_all(d).map_err(|e| Error::io(d, e)),
        _ => Ok(()),
    }
}

/// Loss log with `header`; appends (without a new header) when resuming.
fn loss_log(out: &Path, log: Option<PathBuf>, header: &[&str], append: bool) -> Result<csv::Writer<std::fs::File>> {
    let path = log.unwrap_or_else(|| {
        let mut p = out.as_os_str().to_owned();
        p.push(".losses.csv");
        PathBuf::from(p)
    });
    ensure_parent(&path)?;
    let existed = append && path.exists();
    let f = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let mut w = csv::Writer::from_writer(f);
    if !existed {
        w.write_record(header).map_err(|e| csv_err(&path, e))?;
    }
    Ok(w)
}

fn fmt_f(v: f32) -> String {
    format!("{v:?}")
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

fn log_row(w: &mut csv::Writer<std::fs::File>, row: &[String]) -> Result<()> {
    w.write_record(row).map_err(|e| csv_err(Path::new("loss log"), e))?;
    w.flush().map_err(|e| Error::io("loss log", e))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = load_config(&cli)?;
    match cli.cmd {
        Cmd::Segment { input, out_dir, domain, manifest } => {
            require(&[&input])?;
            let w = read_wav(&input)?;
            let stem = input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "clip".into());
            let segs = filter_by_f0(segment_recording(&w, &stem, &cfg.segmentation)?, &cfg.pitch)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let mut rows = Vec::new();
            for s in &segs {
                let name = format!("{}.wav", s.file_stem());
                write_wav(&s.waveform, out_dir.join(&name))?;
                println!("{name}\t{:.2}s\tpass {}", s.duration_s(), s.pass);
                rows.push(ManifestRow {
                    id: s.file_stem(),
                    audio_path: name.into(),
                    domain: domain.clone(),
                    annotated: false,
                    score_path: None,
                    embedding_path: None,
                    split: Split::Train,
                });
            }
            if let Some(m) = manifest {
                Manifest::new(rows, &out_dir)?.write(m)?;
            }
        }
        Cmd::Extract { manifest, cache, codebook } => {
            require(&[&manifest])?;
            let cb = codebook.map(read_codebook).transpose()?;
            let m = Manifest::read(&manifest)?;
            let sum = pipeline::extract(&m, &cfg, &Cache::new(cache)?, cb.as_ref())?;
            println!("features {}, representations {}, skipped {}", sum.features, sum.representations, sum.skipped.len());
            for (id, why) in &sum.skipped {
                println!("skipped {id}: {why}");
            }
        }
        Cmd::TrainKmeans { manifest, cache, out } => {
            require(&[&manifest, &cache])?;
            let m = Manifest::read(&manifest)?;
            let cb = pipeline::fit_codebook(&m, &cfg, &Cache::new(cache)?)?;
            ensure_parent(&out)?;
            write_codebook(&cb, &out)?;
            for l in &cb.layers {
                println!("layer {}: K {}, inertia {:.6}", l.layer_id, l.k, l.inertia);
            }
        }
        Cmd::TrainStage1 { manifest, cache, codebook, out, resume, epochs } => {
            require(&[&manifest, &cache, &codebook])?;
            if let Some(e) = epochs {
                cfg.stage1.epochs = e;
            }
            let m = Manifest::read(&manifest)?;
            let data = pipeline::stage1_examples(&m, &cfg, &Cache::new(cache)?, Split::Train)?;
            let cb = read_codebook(&codebook)?;
            let init = resume.map(load_params).transpose()?;
            let store = pipeline::train_stage1(&cfg, &data, &cb, init, cfg.stage1.epochs, |s| {
                println!("epoch {}\ttotal {:.5}\tout {:.5}\tdur {:.5}\tpitch {:.5}", s.epoch, s.mean.total, s.mean.out, s.mean.dur, s.mean.pitch);
            })?;
            ensure_parent(&out)?;
            save_params(&store, &out)?;
        }
        Cmd::TrainStage2 { manifest, cache, codebook, out, resume, steps, log } => {
            require(&[&manifest, &cache, &codebook])?;
            let steps = steps.unwrap_or(cfg.stage2.steps);
            let m = Manifest::read(&manifest)?;
            let rows = m.select(Some(Split::Train), Some(true));
            let data = pipeline::stage2_examples(&m, &cfg, &Cache::new(cache)?, &rows)?;
            let cb = read_codebook(&codebook)?;
            let init = resume.map(load_params).transpose()?;
            ensure_parent(&out)?;
            let every = cfg.stage2.checkpoint_every.max(1);
            let mut w = loss_log(&out, log, &["step", "adv_g", "adv_d", "fm", "mel", "gen_total"], init.is_some())?;
            let store = pipeline::train_stage2(&cfg, &data, &cb, init.as_ref(), steps, |t, l| {
                println!("step {}\tmel {:.5}\tfm {:.5}\tadv_g {:.5}\tadv_d {:.5}", l.step, l.mel, l.fm, l.adv_g, l.adv_d);
                log_row(&mut w, &[l.step.to_string(), fmt_f(l.adv_g), fmt_f(l.adv_d), fmt_f(l.fm), fmt_f(l.mel), fmt_f(l.gen_total)])?;
                if t.step % every == 0 {
                    let mut s = t.checkpoint();
                    pipeline::embed_codebook(&mut s, &cb)?;
                    save_params(&s, &out)?;
                }
                Ok(())
            })?;
            save_params(&store, &out)?;
        }
        Cmd::Finetune { manifest, cache, init, out, steps, log } => {
            require(&[&manifest, &cache, &init])?;
            let steps = steps.unwrap_or(cfg.finetune.steps);
            let m = Manifest::read(&manifest)?;
            let cache = Cache::new(cache)?;
            let human = pipeline::stage2_examples(&m, &cfg, &cache, &m.select(Some(Split::Train), Some(true)))?;
            let non_human = pipeline::stage2_examples(&m, &cfg, &cache, &m.select(Some(Split::Train), Some(false)))?;
            let header = ["step", "adv_g", "adv_d", "fm", "mel", "gen_total", "token", "f0", "timbre", "n_unpaired", "ratio"];
            let mut w = loss_log(&out, log, &header, false)?;
            let store = pipeline::finetune(&cfg, &human, &non_human, &load_params(&init)?, steps, |t, l| {
                let g = &l.gan;
                log_row(
                    &mut w,
                    &[
                        g.step.to_string(),
                        fmt_f(g.adv_g),
                        fmt_f(g.adv_d),
                        fmt_f(g.fm),
                        fmt_f(g.mel),
                        fmt_f(g.gen_total),
                        fmt_f(l.unpaired.token),
                        fmt_f(l.unpaired.f0),
                        fmt_f(l.unpaired.timbre),
                        l.n_unpaired.to_string(),
                        format!("{:?}", t.counter.measured_ratio()),
                    ],
                )?;
                println!(
                    "step {}\tmel {:.5}\ttoken {:.5}\tf0 {:.5}\ttimbre {:.5}\tratio {:.3}",
                    l.gan.step,
                    l.gan.mel,
                    l.unpaired.token,
                    l.unpaired.f0,
                    l.unpaired.timbre,
                    t.counter.measured_ratio()
                );
                Ok(())
            })?;
            ensure_parent(&out)?;
            save_params(&store, &out)?;
        }
        Cmd::Synthesize { score, timbre, stage1, vocoder, out } => {
            require(&[&score, &timbre, &stage1, &vocoder])?;
            let s = Score::read(&score, &cfg.stage1.phoneme_set)?;
            let e = pipeline::load_timbre(&timbre)?;
            let w = pipeline::synthesize(&cfg, &load_params(&stage1)?, &load_params(&vocoder)?, &s, &e)?;
            ensure_parent(&out)?;
            write_wav(&w, &out)?;
            println!("{} samples", w.len());
        }
        Cmd::Convert { source, timbre, ckpt, out, codebook } => {
            require(&[&source, &timbre, &ckpt])?;
            let cb = codebook.map(read_codebook).transpose()?;
            let e = pipeline::load_timbre(&timbre)?;
            let (z, w) = pipeline::convert(&cfg, &load_params(&ckpt)?, cb.as_ref(), &read_wav(&source)?, &e)?;
            ensure_parent(&out)?;
            write_wav(&w, &out)?;
            println!("{} frames, {} samples", z.n_frames(), w.len());
        }
        Cmd::Evaluate { pairs, out_dir } => {
            require(&[&pairs])?;
            let rep = evaluate_manifest(&pairs, &TimbreEmbedder::Builtin, &cfg.pitch, &cfg.eval)?;
            std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            write_report_csv(&rep, out_dir.join("report.csv"))?;
            write_report_json(&rep, out_dir.join("report.json"))?;
            let a = &rep.aggregates;
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
            println!(
                "rows {}\tfailed {}\tlf0_rmse {}\tvuv {}\tsim {}\tmcd {}\tf0_nan {:.1}%",
                a.rows,
                a.failed,
                fmt(a.lf0_rmse_mean),
                fmt(a.vuv_pct_mean),
                fmt(a.sim_mean),
                fmt(a.mcd_mean),
                a.f0_nan_pct
            );
            if a.failed > 0 {
                return Ok(ExitCode::from(2));
            }
        }
        Cmd::Inspect { path } => {
            require(&[&path])?;
            print!("{}", pipeline::inspect(&path, &cfg)?);
        }
        Cmd::ToyCorpus { out } => {
            let spec = ToyCorpusSpec {
                sample_rate: cfg.audio.sample_rate,
                hop: cfg.audio.hop,
                seed: cfg.seed,
                ..ToyCorpusSpec::default()
            };
            let m = write_toy_corpus(&out, &spec, &cfg.stage1.phoneme_set)?;
            println!("{} clips in {}", m.rows.len(), out.display());
        }
        Cmd::Config { reference } => {
            if reference {
                print!("{}", PipelineConfig::reference().to_toml()?);
            } else {
                print!("{}", template()?);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
