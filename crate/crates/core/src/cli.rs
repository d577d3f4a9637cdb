//! Command-line front end shared by the binary and the integration tests.

use std::fs;
use std::path::{Path, PathBuf};
use std::thread;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ablation::{self, AblationPlan, AblationRow};
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, read_predictions, EvalInput, MetricsReport};
use crate::synthgen::{generate_sequence, SceneSpec, SequenceDataset};
use crate::tensor::{grad_check_with, GradCheckOptions, GradCheckReport};
use crate::tracker::{make_sample, sample_loss, train_with, Tracker, TrackerConfig, CONFIG_FILE};

/// Maximum relative gradient error accepted by `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "aptrack", version, about = "Dual-stream RGB-X tracker with adaptive modality interaction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Tracker config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Config override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    /// Default config, then the file, then each `--set`, then `--seed`.
    pub fn resolve(&self) -> Result<TrackerConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrackerConfig::load(p)?,
            None => TrackerConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{kv}` is not KEY=VALUE")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Default scene, one seed per sequence.
    Clean,
    /// Random sizes, shapes and motions.
    Random,
    /// Random scenes with alternating single-modality blackouts.
    Blackout,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic paired sequences.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long, value_enum, default_value_t = Preset::Clean)]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a tracker; writes the checkpoint, config and loss trace.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// A sequence directory or a directory of sequences.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Track every sequence; writes one prediction file per sequence.
    Track {
        /// Training output directory.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Also write the per-frame token-learning and embedding weights.
        #[arg(long)]
        dump_attn: bool,
    },
    /// Score prediction files against ground truth.
    Eval {
        /// Directory of `<sequence>.txt` prediction files.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train and evaluate every interaction variant and token count.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 6)]
        train_sequences: usize,
        #[arg(long, default_value_t = 6)]
        eval_sequences: usize,
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of the training loss gradient.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Entries sampled per parameter tensor; 0 checks every entry.
        #[arg(long, default_value_t = 2)]
        entries: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// What a command produced, for the caller to print.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub summary: String,
    /// Nonzero when the command ran but its check failed.
    pub status: i32,
}

impl Outcome {
    fn ok(summary: String) -> Self {
        Self { summary, status: 0 }
    }
}

/// Maps `f` over `items` on up to `jobs` threads, keeping input order.
pub fn par_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// Sequence directories under `dir`, sorted by name. A directory holding
/// `groundtruth.txt` is itself the only sequence.
pub fn list_sequences(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let name_of = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if dir.join("groundtruth.txt").is_file() {
        return Ok(vec![(name_of(dir), dir.to_path_buf())]);
    }
    let mut seqs = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.join("groundtruth.txt").is_file() {
            seqs.push((name_of(&p), p));
        }
    }
    if seqs.is_empty() {
        return Err(Error::Format(format!("no sequences under {}", dir.display())));
    }
    seqs.sort();
    Ok(seqs)
}

fn load_all(seqs: &[(String, PathBuf)], jobs: usize) -> Result<Vec<SequenceDataset>> {
    par_map(seqs, jobs, |(_, p)| SequenceDataset::load(p)).into_iter().collect()
}

pub fn synth(out: &Path, count: usize, frames: usize, preset: Preset, seed: u64) -> Result<Vec<PathBuf>> {
    let sets: Vec<(SequenceDataset, String)> = match preset {
        Preset::Clean => {
            let spec = SceneSpec { frames, ..Default::default() };
            (0..count as u64)
                .map(|i| Ok((generate_sequence(&spec, seed + i)?, spec.to_text())))
                .collect::<Result<_>>()?
        }
        Preset::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count as u64)
                .map(|i| {
                    let spec = ablation::random_scene(&mut rng, frames);
                    Ok((generate_sequence(&spec, seed + i)?, spec.to_text()))
                })
                .collect::<Result<_>>()?
        }
        Preset::Blackout => ablation::blackout_set(count, frames, seed)?
            .into_iter()
            .map(|ds| (ds, String::from("preset = blackout\n")))
            .collect(),
    };
    let mut dirs = Vec::new();
    for (i, (ds, text)) in sets.iter().enumerate() {
        let dir = out.join(format!("seq_{i:03}"));
        ds.save(&dir, Some(text))?;
        dirs.push(dir);
    }
    Ok(dirs)
}

pub fn train_cmd(cfg: &TrackerConfig, data: &Path, out: &Path) -> Result<f64> {
    let sets = load_all(&list_sequences(data)?, 1)?;
    let params = cfg.model_config().init_params(cfg.seed)?;
    let report = train_with(params, &sets, cfg, |_| {})?;
    fs::create_dir_all(out)?;
    fs::write(out.join("loss.txt"), report.loss_text())?;
    let ratio = report.final_loss(10) / report.initial_loss(10);
    Tracker::new(cfg.clone(), report.params)?.save(out)?;
    Ok(ratio)
}

pub fn track_cmd(model: &Path, data: &Path, out: &Path, jobs: usize, dump_attn: bool) -> Result<Vec<PathBuf>> {
    let tracker = Tracker::load(model)?;
    let seqs = list_sequences(data)?;
    fs::create_dir_all(out)?;
    let results = par_map(&seqs, jobs, |(name, dir)| -> Result<PathBuf> {
        let ds = SequenceDataset::load(dir)?;
        let track = tracker.track_sequence(&ds, dump_attn)?;
        let path = out.join(format!("{name}.txt"));
        fs::write(&path, track.predictions_text())?;
        if dump_attn {
            fs::write(out.join(format!("{name}.attn.txt")), &track.attention)?;
        }
        Ok(path)
    });
    results.into_iter().collect()
}

pub fn eval_cmd(pred: &Path, data: &Path, out: &Path, jobs: usize) -> Result<MetricsReport> {
    let seqs = list_sequences(data)?;
    let inputs = par_map(&seqs, jobs, |(name, dir)| -> Result<EvalInput> {
        let ds = SequenceDataset::load(dir)?;
        let preds = read_predictions(&pred.join(format!("{name}.txt")))?;
        Ok(EvalInput {
            preds,
            gt: ds.gt.clone(),
            gt_x: ds.gt_x.clone(),
            visible: ds.visible.clone(),
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&inputs)?;
    report.write(out)?;
    Ok(report)
}

pub fn ablate_cmd(plan: &AblationPlan, out: &Path, jobs: usize) -> Result<Vec<AblationRow>> {
    let runs: Vec<(usize, u64)> = (0..plan.variants.len())
        .flat_map(|v| plan.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let rows = par_map(&runs, jobs, |&(v, s)| ablation::run_one(plan, &plan.variants[v], s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out)?;
    fs::write(out.join("ablation.csv"), ablation::rows_csv(&rows))?;
    let mut summary = String::from("variant,mean_success_auc\n");
    for (label, auc) in ablation::mean_auc(&rows, &plan.variants) {
        summary.push_str(&format!("{label},{auc:.6}\n"));
    }
    fs::write(out.join("summary.csv"), summary)?;
    fs::write(out.join(CONFIG_FILE), plan.base.to_text())?;
    Ok(rows)
}

/// Gradient check of the full training loss on one sample drawn from a
/// default synthetic sequence.
pub fn gradcheck_cmd(cfg: &TrackerConfig, entries: usize, h: f64) -> Result<GradCheckReport> {
    let ds = generate_sequence(&SceneSpec { frames: 12, ..Default::default() }, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sample = make_sample(&ds, cfg, &mut rng)?;
    let model = cfg.model_config();
    let params = model.init_params(cfg.seed)?;
    let opts = GradCheckOptions {
        h,
        max_entries_per_param: (entries > 0).then_some(entries),
        seed: cfg.seed,
    };
    grad_check_with(
        |tape, bound| Ok(sample_loss(tape, bound, &model, &sample)?.total),
        &params,
        &opts,
    )
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Synth { out, count, frames, preset, seed } => {
            let dirs = synth(&out, count, frames, preset, seed)?;
            Ok(Outcome::ok(format!("wrote {} sequences to {}", dirs.len(), out.display())))
        }
        Command::Train { cfg, data, out } => {
            let ratio = train_cmd(&cfg.resolve()?, &data, &out)?;
            Ok(Outcome::ok(format!(
                "checkpoint in {}; final/initial loss {ratio:.4}",
                out.display()
            )))
        }
        Command::Track { model, data, out, jobs, dump_attn } => {
            let files = track_cmd(&model, &data, &out, jobs, dump_attn)?;
            Ok(Outcome::ok(format!("wrote {} prediction files to {}", files.len(), out.display())))
        }
        Command::Eval { pred, data, out, jobs } => Ok(Outcome::ok(eval_cmd(&pred, &data, &out, jobs)?.to_text())),
        Command::Ablate { cfg, out, seeds, train_sequences, eval_sequences, frames, jobs } => {
            let base = cfg.resolve()?;
            let plan = AblationPlan {
                variants: ablation::variants(base.n_tokens),
                base,
                seeds: (0..seeds).collect(),
                train_sequences,
                eval_sequences,
                frames,
            };
            let rows = ablate_cmd(&plan, &out, jobs)?;
            Ok(Outcome::ok(ablation::rows_csv(&rows)))
        }
        Command::Gradcheck { cfg, entries, step, out } => {
            let r = gradcheck_cmd(&cfg.resolve()?, entries, step)?;
            let text = format!(
                "max_rel_error = {:.3e}\nworst = {}[{}]\nentries = {}\ntolerance = {GRADCHECK_TOLERANCE:e}\n",
                r.max_rel_error,
                r.worst_param.as_deref().unwrap_or("-"),
                r.worst_index,
                r.entries_checked
            );
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("gradcheck.txt"), &text)?;
            }
            let pass = r.max_rel_error < GRADCHECK_TOLERANCE;
            Ok(Outcome {
                summary: text,
                status: if pass { 0 } else { 1 },
            })
        }
    }
}
