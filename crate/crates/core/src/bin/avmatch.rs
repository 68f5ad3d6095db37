//! `avmatch`: generate data, train, evaluate and query matching models.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avmatch::data::{
    read_feature_file, split_by_song, synth_generate, write_dataset, ClipPair, DatasetSplit,
    Manifest, Modality, SynthConfig,
};
use avmatch::engine::{
    evaluate, format_table, gradient_suite, load_checkpoint, recommend, save_checkpoint, train,
    AdamConfig, Direction, RunReport, TrainConfig, DEFAULT_KS,
};
use avmatch::model::{build_preset, Preset};
use avmatch::{Error, Result};

#[derive(Parser)]
#[command(name = "avmatch", version, about = "Cross-modal audio/video matching")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired dataset with CMF1 files and a manifest.
    Synth(SynthArgs),
    /// Split a manifest into song-disjoint train/val/test manifests.
    Split(SplitArgs),
    /// Train a preset and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Top-k recall of a checkpoint over every clip of a manifest.
    Eval(EvalArgs),
    /// Rank the audio clips of a manifest for one video feature file.
    Recommend(RecommendArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 40)]
    songs: usize,
    #[arg(long, default_value_t = 8)]
    clips_per_song: usize,
    #[arg(long, default_value_t = 15)]
    seq_len: usize,
    #[arg(long, default_value_t = 8)]
    vocab: usize,
    #[arg(long, default_value_t = 128)]
    audio_dim: usize,
    #[arg(long, default_value_t = 1000)]
    video_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Draw every clip independently instead of as a permutation of its
    /// song's event multiset.
    #[arg(long)]
    free_order: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Directory for train.tsv, val.tsv and test.tsv; defaults to the
    /// manifest's directory so relative feature paths stay valid.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    preset: String,
    /// All clips; split by song unless --val is given.
    #[arg(long)]
    manifest: PathBuf,
    /// Validation manifest. With it, --manifest is used whole for training.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    ratios: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Append the test-set JSON report here as well as printing it.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_KS)]
    ks: Vec<usize>,
    #[arg(long, default_value = "video-to-audio")]
    direction: String,
    /// Recorded in the JSON report.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct RecommendArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Video CMF1 file.
    #[arg(long)]
    query: PathBuf,
    /// Manifest whose audio clips are the candidates.
    #[arg(long)]
    candidates: PathBuf,
    #[arg(long, default_value_t = 10)]
    top_k: usize,
}

fn ratios(v: &[f64]) -> Result<[f64; 3]> {
    v.try_into()
        .map_err(|_| Error::Config(format!("expected three ratios, got {}", v.len())))
}

fn append_json(path: Option<&Path>, line: &str) -> Result<()> {
    if let Some(path) = path {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| io_err(path, e))?;
        writeln!(f, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        n_songs: a.songs,
        clips_per_song: a.clips_per_song,
        seq_len: a.seq_len,
        vocab: a.vocab,
        d_audio: a.audio_dim,
        d_video: a.video_dim,
        noise: a.noise,
        order_critical: !a.free_order,
        seed: a.seed,
    };
    let data = synth_generate(&cfg)?;
    write_dataset(&a.out, &data.pairs)?;
    println!(
        "wrote {} clips from {} songs to {}",
        data.pairs.len(),
        cfg.n_songs,
        a.out.join("manifest.tsv").display()
    );
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let manifest = Manifest::read(&a.manifest)?;
    let pairs = manifest.load_pairs()?;
    let s = split_by_song(&pairs, ratios(&a.ratios)?, a.seed)?;
    let out = a.out.unwrap_or_else(|| manifest.base_dir.clone());
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
    for (name, part) in ["train", "val", "test"].iter().zip(s.parts()) {
        let ids: std::collections::HashSet<&str> = part.iter().map(|p| p.clip_id.as_str()).collect();
        let records = manifest
            .records
            .iter()
            .filter(|r| ids.contains(r.clip_id.as_str()))
            .map(|r| {
                let rebase = |p: &Path| {
                    let abs = manifest.resolve(p);
                    abs.strip_prefix(&out).map(Path::to_path_buf).unwrap_or(abs)
                };
                let mut r = r.clone();
                r.audio_path = rebase(&r.audio_path);
                r.video_path = rebase(&r.video_path);
                r
            })
            .collect();
        let path = out.join(format!("{name}.tsv"));
        Manifest::new(records, &out)?.write(&path)?;
        println!("{name}: {} clips -> {}", part.len(), path.display());
    }
    Ok(())
}

fn load(path: &Path) -> Result<Vec<ClipPair>> {
    Manifest::read(path)?.load_pairs()
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let preset: Preset = a.preset.parse()?;
    let mut config = build_preset(preset.name())?;
    config.seed = a.seed;
    let pairs = load(&a.manifest)?;
    let split = match &a.val {
        Some(v) => DatasetSplit {
            train: pairs,
            val: load(v)?,
            test: Vec::new(),
            ratios: [1.0, 0.0, 0.0],
        },
        None => split_by_song(&pairs, ratios(&a.ratios)?, a.seed)?,
    };
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        direction: Direction::VideoToAudio,
    };
    println!(
        "{preset}: {} trainable parameters; {} train / {} val / {} test clips",
        avmatch::model::DualBranchModel::new(config.clone())?.param_count(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    let out = train(config, &split, &tc)?;
    for e in &out.history {
        let loss = e.mean_loss.map_or("-".to_string(), |l| format!("{l:.4}"));
        let val = e
            .val
            .as_ref()
            .map(|r| {
                r.ks.iter()
                    .zip(&r.recall)
                    .map(|(k, v)| format!("R@{k}={:.3}", v))
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .unwrap_or_default();
        println!("epoch {:>4}  loss {loss}  {val}", e.epoch);
    }
    println!("best epoch {}", out.best_epoch);
    save_checkpoint(&out.model, &a.out)?;
    println!("saved {}", a.out.display());
    if !split.test.is_empty() {
        let ks: Vec<usize> = DEFAULT_KS.into_iter().filter(|&k| k <= split.test.len()).collect();
        let r = evaluate(&out.model, &split.test, &ks, tc.direction)?;
        let run = RunReport::new(preset, a.seed, &r);
        print!("{}", format_table(std::slice::from_ref(&run))?);
        println!("{}", run.to_json_line());
        append_json(a.report.as_deref(), &run.to_json_line())?;
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?;
    let direction: Direction = a.direction.parse()?;
    let pairs = load(&a.manifest)?;
    let r = evaluate(&model, &pairs, &a.ks, direction)?;
    let run = RunReport::new(model.config.preset, a.seed, &r);
    println!("{} clips, {direction}", r.n);
    print!("{}", format_table(std::slice::from_ref(&run))?);
    println!("{}", run.to_json_line());
    append_json(a.report.as_deref(), &run.to_json_line())
}

fn recommend_cmd(a: RecommendArgs) -> Result<()> {
    let model = load_checkpoint(&a.ckpt)?;
    let query = read_feature_file(&a.query)?;
    let manifest = Manifest::read(&a.candidates)?;
    let candidates = manifest
        .records
        .iter()
        .map(|r| {
            let mut s = read_feature_file(manifest.resolve(&r.audio_path))?;
            if s.modality != Modality::Audio {
                return Err(Error::Manifest(format!(
                    "{} is not an audio feature file",
                    r.audio_path.display()
                )));
            }
            s.clip_id = r.clip_id.clone();
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    for (i, r) in recommend(&model, &query, &candidates, a.top_k)?.iter().enumerate() {
        println!("{:>4}  {:<24}  {:.6}", i + 1, r.clip_id, r.similarity);
    }
    Ok(())
}

fn gradcheck() -> Result<bool> {
    let cases = gradient_suite()?;
    let mut ok = true;
    for c in &cases {
        ok &= c.passed();
        println!(
            "{}  {:<36} max rel err {:.2e} (< {:.0e})  checked {} skipped {}",
            if c.passed() { "PASS" } else { "FAIL" },
            c.name,
            c.report.max_rel_error,
            c.tolerance,
            c.report.checked,
            c.report.skipped
        );
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a).map(|_| true),
        Command::Split(a) => split(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::Eval(a) => eval_cmd(a).map(|_| true),
        Command::Recommend(a) => recommend_cmd(a).map(|_| true),
        Command::Gradcheck => gradcheck(),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
