use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sparsespeech::abx::{build_triples, score, Distance};
use sparsespeech::autodiff::Tensor;
use sparsespeech::checkpoint::Checkpoint;
use sparsespeech::corpus::{
    extract_segments, generate_synthetic, load_transcripts, Alignments, Corpus, FeatureSequence,
    PhoneInventory, SynthSpec, Utterance, ALIGNMENTS_FILE, PHONES_FILE, TRANSCRIPTS_FILE,
};
use sparsespeech::ctc::{run_probe, write_probe_curve, ProbeConfig, ProbeData};
use sparsespeech::gumbel::{
    sample_sweep, summarize_sweep, write_sweep_csv, write_sweep_summary_csv,
};
use sparsespeech::model::{generate, train, write_loss_curve, SparseSpeech};

use crate::config::RunConfig;
use crate::{
    Cli, Command, EvalAbxArgs, EvalPerArgs, GenerateArgs, GlobalArgs, SweepArgs, SynthArgs,
    TrainArgs, VERSION,
};

pub const RUN_CONFIG_FILE: &str = "run.toml";
pub const VERSION_FILE: &str = "VERSION";

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let mut cfg = RunConfig::load(cli.global.config.as_deref())?;
    if let Some(seed) = cli.global.seed {
        cfg.apply_seed(seed);
    }
    let g = &cli.global;
    match cli.command {
        Command::Synth(a) => synth(a, cfg, g),
        Command::Train(a) => train_cmd(a, cfg, g),
        Command::Generate(a) => generate_cmd(a, cfg, g),
        Command::EvalAbx(a) => eval_abx(a, cfg, g),
        Command::EvalPer(a) => eval_per(a, cfg, g),
        Command::GumbelSweep(a) => sweep(a, cfg, g),
    }
}

/// Creates `out` (its parent must exist) and echoes the run configuration and tool version.
fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() && !parent.is_dir() {
            return Err(sparsespeech::Error::Format {
                path: out.to_path_buf(),
                detail: "parent directory does not exist".into(),
            }
            .into());
        }
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join(RUN_CONFIG_FILE), cfg.to_toml())?;
    fs::write(out.join(VERSION_FILE), format!("{VERSION}\n"))?;
    Ok(())
}

fn write_csv<E>(
    path: PathBuf,
    f: impl FnOnce(&mut Vec<u8>) -> std::result::Result<(), E>,
) -> Result<()>
where
    E: std::error::Error + Send + Sync + 'static,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    fs::write(&path, buf).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize + ?Sized>(g: &GlobalArgs, path: PathBuf, value: &T) -> Result<()> {
    if g.json {
        let text = serde_json::to_string_pretty(value)?;
        fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn synth(a: SynthArgs, mut cfg: RunConfig, g: &GlobalArgs) -> Result<()> {
    if let Some(path) = &a.spec {
        let seed = cfg.synth.seed;
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.synth = toml::from_str::<SynthSpec>(&text)
            .map_err(|e| sparsespeech::Error::Config(format!("{}: {e}", path.display())))?;
        if g.seed.is_some() {
            cfg.synth.seed = seed;
        }
    }
    if let Some(n) = a.utterances {
        cfg.synth.utterances = n;
    }
    let corpus = generate_synthetic(&cfg.synth)?;
    corpus.write(&a.out)?;
    prepare_out(&a.out, &cfg)?;
    log::info!(
        "wrote {} utterances to {}",
        corpus.utterances.len(),
        a.out.display()
    );
    Ok(())
}

fn subset_features(corpus: &Corpus, subset: &str) -> Vec<FeatureSequence> {
    corpus
        .utterances
        .iter()
        .filter(|u| subset == "all" || u.subset == subset)
        .map(|u| u.features.clone())
        .collect()
}

fn train_cmd(a: TrainArgs, mut cfg: RunConfig, g: &GlobalArgs) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.model.epochs = e;
    }
    if let Some(e) = a.pretrain_epochs {
        cfg.model.pretrain_epochs = e;
    }
    if let Some(b) = a.bottleneck {
        cfg.model.bottleneck = b;
    }
    let corpus = Corpus::load_dir(&a.corpus)?;
    let data = subset_features(&corpus, "train");
    if data.is_empty() {
        bail!(sparsespeech::Error::Contract(format!(
            "{} has no utterances tagged `train`",
            a.corpus.display()
        )));
    }
    cfg.model.input_dim = data[0].dim();
    cfg.model.validate()?;
    prepare_out(&a.out, &cfg)?;
    log::info!(
        "training on {} utterances ({} + {} epochs, {} bottleneck)",
        data.len(),
        cfg.model.pretrain_epochs,
        cfg.model.epochs,
        cfg.model.bottleneck
    );
    let outcome = train(&data, &cfg.model, Some(&a.out))?;
    write_csv(a.out.join("loss_curve.csv"), |w| {
        write_loss_curve(&outcome.curve, w)
    })?;
    write_json(g, a.out.join("loss_curve.json"), &outcome.curve)?;
    Ok(())
}

fn copy_metadata(from: &Path, to: &Path) -> Result<()> {
    for name in [ALIGNMENTS_FILE, TRANSCRIPTS_FILE, PHONES_FILE] {
        let src = from.join(name);
        if src.is_file() {
            fs::copy(&src, to.join(name)).with_context(|| format!("copying {}", src.display()))?;
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct GenerateSummary {
    tau: f64,
    utterances: usize,
    mean_max: f64,
}

fn generate_cmd(a: GenerateArgs, mut cfg: RunConfig, g: &GlobalArgs) -> Result<()> {
    if let Some(tau) = a.tau {
        cfg.eval.tau = tau;
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (model, _) = SparseSpeech::from_checkpoint(&ck)?;
    cfg.model = model.config().clone();
    let corpus = Corpus::load_dir(&a.corpus)?;
    let feats: Vec<FeatureSequence> = corpus.features().cloned().collect();
    let posts = generate(&model, &feats, cfg.eval.tau)?;
    prepare_out(&a.out, &cfg)?;
    let utterances: Vec<Utterance> = corpus
        .utterances
        .iter()
        .zip(posts.iter())
        .map(|(u, p)| Utterance {
            features: FeatureSequence {
                utterance_id: p.utterance_id.clone(),
                speaker_id: u.features.speaker_id.clone(),
                frames: p.rows.clone(),
            },
            subset: u.subset.clone(),
        })
        .collect();
    Corpus::write_features_dir(&utterances, &a.out)?;
    copy_metadata(&a.corpus, &a.out)?;
    let summary = GenerateSummary {
        tau: cfg.eval.tau,
        utterances: posts.len(),
        mean_max: posts.iter().map(|p| p.mean_max()).sum::<f64>() / posts.len().max(1) as f64,
    };
    write_csv(a.out.join("summary.csv"), |w| {
        writeln!(w, "tau,utterances,mean_max")?;
        writeln!(
            w,
            "{},{},{}",
            summary.tau, summary.utterances, summary.mean_max
        )
    })?;
    write_json(g, a.out.join("summary.json"), &summary)?;
    log::info!(
        "wrote {} posteriorgrams at tau {}",
        posts.len(),
        cfg.eval.tau
    );
    Ok(())
}

/// True when every frame is a probability vector (up to single-precision storage).
fn looks_like_posteriorgrams(feats: &[FeatureSequence]) -> bool {
    feats.iter().all(|f| {
        f.frames.row_iter().all(|r| {
            r.iter().all(|&v| (0.0..=1.0 + 1e-6).contains(&v))
                && (r.iter().sum::<f64>() - 1.0).abs() < 1e-4
        })
    })
}

fn eval_abx(a: EvalAbxArgs, mut cfg: RunConfig, g: &GlobalArgs) -> Result<()> {
    if let Some(c) = a.condition {
        cfg.eval.condition = c;
    }
    if let Some(s) = a.subset {
        cfg.eval.subset = s;
    }
    if a.distance.is_some() {
        cfg.eval.distance = a.distance;
    }
    let corpus = Corpus::load_dir(&a.reps)?;
    let alignments = match (&a.alignments, corpus.alignments) {
        (Some(path), _) => Alignments::load(path)?,
        (None, Some(ali)) => ali,
        (None, None) => bail!(sparsespeech::Error::Contract(format!(
            "no alignments given and none found in {}",
            a.reps.display()
        ))),
    };
    let feats: Vec<FeatureSequence> = corpus
        .utterances
        .iter()
        .filter(|u| cfg.eval.subset == "all" || u.subset == cfg.eval.subset)
        .map(|u| u.features.clone())
        .collect();
    if feats.is_empty() {
        bail!(sparsespeech::Error::Contract(format!(
            "no utterances in subset `{}`",
            cfg.eval.subset
        )));
    }
    let distance = cfg.eval.distance.unwrap_or_else(|| {
        if looks_like_posteriorgrams(&feats) {
            Distance::Skl
        } else {
            Distance::Cosine
        }
    });
    cfg.eval.distance = Some(distance);
    prepare_out(&a.out, &cfg)?;
    let segments = extract_segments(feats.iter(), &alignments)?;
    let set = build_triples(
        segments,
        &cfg.eval.condition.conditions(),
        &cfg.eval.limits,
        cfg.sweep.seed,
    );
    let reps: BTreeMap<String, Tensor> = feats
        .into_iter()
        .map(|f| (f.utterance_id, f.frames))
        .collect();
    log::info!("scoring {} triples with {distance}", set.triples.len());
    let report = score(&set, &reps, distance, &cfg.eval.subset)?;
    write_csv(a.out.join("abx.csv"), |w| report.write_csv(w))?;
    write_json(g, a.out.join("abx.json"), &report)?;
    let mut stdout = std::io::stdout().lock();
    report.write_csv(&mut stdout)?;
    Ok(())
}

fn eval_per(a: EvalPerArgs, mut cfg: RunConfig, g: &GlobalArgs) -> Result<()> {
    if let Some(path) = &a.probe_config {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let seed = cfg.probe.seed;
        cfg.probe = ProbeConfig::from_toml(&text)?;
        if g.seed.is_some() {
            cfg.probe.seed = seed;
        }
    }
    if let Some(e) = a.epochs {
        cfg.probe.epochs = e;
    }
    let corpus = Corpus::load_dir(&a.reps)?;
    let transcripts = match (&a.transcripts, corpus.transcripts) {
        (Some(path), _) => load_transcripts(path)?,
        (None, Some(t)) => t,
        (None, None) => bail!(sparsespeech::Error::Contract(format!(
            "no transcripts given and none found in {}",
            a.reps.display()
        ))),
    };
    let inventory = match (&a.phones, corpus.inventory) {
        (Some(path), _) => PhoneInventory::load(path)?,
        (None, Some(inv)) => inv,
        (None, None) => bail!(sparsespeech::Error::Contract(format!(
            "no phone inventory given and none found in {}",
            a.reps.display()
        ))),
    };
    let Some(first) = corpus.utterances.first() else {
        bail!(sparsespeech::Error::Contract(format!(
            "{} lists no utterances",
            a.reps.display()
        )));
    };
    cfg.probe.input_dim = first.features.dim();
    cfg.probe.output_symbols = inventory.len() + 1;
    cfg.probe.validate()?;
    prepare_out(&a.out, &cfg)?;

    let subsets: BTreeMap<String, String> = corpus
        .utterances
        .iter()
        .map(|u| (u.features.utterance_id.clone(), u.subset.clone()))
        .collect();
    let reps: BTreeMap<String, Tensor> = corpus
        .utterances
        .into_iter()
        .map(|u| (u.features.utterance_id, u.features.frames))
        .collect();
    let data = ProbeData {
        reps: &reps,
        subsets: &subsets,
        transcripts: &transcripts,
        inventory: &inventory,
    };
    let run = run_probe(&data, &cfg.probe)?;
    log::info!("probe trained on {} labeled utterances", run.labeled.len());
    run.outcome
        .probe
        .to_checkpoint(run.outcome.curve.len() as u64)
        .save(&a.out.join("probe.ssck"))?;
    fs::write(a.out.join("labeled.txt"), run.labeled.join("\n") + "\n")?;
    write_csv(a.out.join("probe_curve.csv"), |w| {
        write_probe_curve(&run.outcome.curve, w)
    })?;
    write_csv(a.out.join("per.csv"), |w| run.report.write_csv(w))?;
    write_json(g, a.out.join("per.json"), &run.report)?;
    let mut stdout = std::io::stdout().lock();
    run.report.write_csv(&mut stdout)?;
    Ok(())
}

fn sweep(a: SweepArgs, mut cfg: RunConfig, g: &GlobalArgs) -> Result<()> {
    if let Some(t) = a.taus {
        cfg.sweep.taus = t;
    }
    if let Some(d) = a.draws {
        cfg.sweep.draws = d;
    }
    if let Some(k) = a.k {
        cfg.sweep.k = k;
        cfg.sweep.logits.clear();
    }
    if cfg.sweep.k < 2 {
        bail!(sparsespeech::Error::Contract(
            "a sweep needs at least two categories".into()
        ));
    }
    prepare_out(&a.out, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sweep.seed);
    let rows = sample_sweep(
        &cfg.sweep.resolved_logits(),
        &cfg.sweep.taus,
        cfg.sweep.draws,
        &mut rng,
    )?;
    let summary = summarize_sweep(&rows);
    write_csv(a.out.join("sweep.csv"), |w| write_sweep_csv(&rows, w))?;
    write_csv(a.out.join("sweep_summary.csv"), |w| {
        write_sweep_summary_csv(&summary, w)
    })?;
    write_json(g, a.out.join("sweep_summary.json"), &summary)?;
    let mut stdout = std::io::stdout().lock();
    write_sweep_summary_csv(&summary, &mut stdout)?;
    Ok(())
}
