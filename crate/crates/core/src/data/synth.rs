use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{write_feature_file, ClipPair, FeatureSequence, Manifest, ManifestRecord, Modality};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters of the synthetic paired-sequence generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_songs: usize,
    pub clips_per_song: usize,
    pub seq_len: usize,
    /// Number of distinct latent events.
    pub vocab: usize,
    pub d_audio: usize,
    pub d_video: usize,
    pub noise: f64,
    /// All clips of a song are permutations of one event multiset.
    pub order_critical: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_songs: 40,
            clips_per_song: 8,
            seq_len: 15,
            vocab: 8,
            d_audio: 128,
            d_video: 1000,
            noise: 0.1,
            order_critical: true,
            seed: 0,
        }
    }
}

/// Generated clips plus the latent structure behind them.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub pairs: Vec<ClipPair>,
    /// `[d_audio, vocab]`; column `e` is the clean audio frame of event `e`.
    pub audio_map: Tensor<f32>,
    /// `[d_video, vocab]`.
    pub video_map: Tensor<f32>,
    /// Event sequence of every clip, aligned with `pairs`.
    pub events: Vec<Vec<usize>>,
}

/// Draw a dataset of matched audio/video event sequences.
///
/// Every clip draws an event sequence `e_1..e_T`; audio frame `t` is column
/// `e_t` of a fixed Gaussian mixing map plus `noise` times standard normal
/// noise, and likewise for video with its own map. In order-critical mode
/// each song draws one event multiset and its clips are distinct
/// permutations of it, so time-averaged features cannot tell them apart.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    if cfg.vocab < 2 || cfg.seq_len < 2 {
        return Err(Error::Config(format!(
            "synthetic data needs vocab >= 2 and seq_len >= 2, got {} and {}",
            cfg.vocab, cfg.seq_len
        )));
    }
    if cfg.n_songs == 0 || cfg.clips_per_song == 0 || cfg.d_audio == 0 || cfg.d_video == 0 {
        return Err(Error::Config("synthetic dataset sizes must be positive".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(Error::Config(format!("noise must be nonnegative, got {}", cfg.noise)));
    }
    if cfg.order_critical {
        let best = ln_permutations(&balanced_counts(cfg.seq_len, cfg.vocab));
        if best < (cfg.clips_per_song as f64).ln() - 1e-9 {
            return Err(Error::Config(format!(
                "{} distinct orderings per song requested, but sequences of length {} over {} events allow at most {:.0}",
                cfg.clips_per_song,
                cfg.seq_len,
                cfg.vocab,
                best.exp()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let audio_map = gaussian(&mut rng, cfg.d_audio, cfg.vocab);
    let video_map = gaussian(&mut rng, cfg.d_video, cfg.vocab);

    let mut pairs = Vec::with_capacity(cfg.n_songs * cfg.clips_per_song);
    let mut events = Vec::with_capacity(pairs.capacity());
    for s in 0..cfg.n_songs {
        let song_id = format!("song{s:03}");
        let clips = if cfg.order_critical {
            permuted_clips(&mut rng, cfg)?
        } else {
            (0..cfg.clips_per_song)
                .map(|_| (0..cfg.seq_len).map(|_| rng.gen_range(0..cfg.vocab)).collect())
                .collect()
        };
        for (c, ev) in clips.into_iter().enumerate() {
            let clip_id = format!("{song_id}_clip{c:02}");
            let audio = render(&mut rng, &audio_map, &ev, cfg.noise);
            let video = render(&mut rng, &video_map, &ev, cfg.noise);
            pairs.push(ClipPair::new(
                &clip_id,
                &song_id,
                FeatureSequence::new(&clip_id, Modality::Audio, audio)?,
                FeatureSequence::new(&clip_id, Modality::Video, video)?,
            )?);
            events.push(ev);
        }
    }
    Ok(SynthDataset {
        pairs,
        audio_map,
        video_map,
        events,
    })
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(&[rows, cols], data).expect("sized buffer")
}

fn render(rng: &mut ChaCha8Rng, map: &Tensor<f32>, events: &[usize], noise: f64) -> Tensor<f32> {
    let (d, v) = (map.shape()[0], map.shape()[1]);
    let mut out = Vec::with_capacity(events.len() * d);
    for &e in events {
        for r in 0..d {
            let n: f64 = rng.sample(StandardNormal);
            out.push(map.data()[r * v + e] + (noise * n) as f32);
        }
    }
    Tensor::new(&[events.len(), d], out).expect("sized buffer")
}

fn permuted_clips(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Result<Vec<Vec<usize>>> {
    let want = (cfg.clips_per_song as f64).ln() - 1e-9;
    let mut multiset: Vec<usize> = Vec::new();
    for _ in 0..10_000 {
        multiset = (0..cfg.seq_len).map(|_| rng.gen_range(0..cfg.vocab)).collect();
        let mut counts = vec![0; cfg.vocab];
        multiset.iter().for_each(|&e| counts[e] += 1);
        if ln_permutations(&counts) >= want {
            break;
        }
        multiset.clear();
    }
    if multiset.is_empty() {
        return Err(Error::Config(format!(
            "could not draw an event multiset with {} distinct orderings",
            cfg.clips_per_song
        )));
    }
    let mut seen = HashSet::new();
    let mut clips = Vec::with_capacity(cfg.clips_per_song);
    while clips.len() < cfg.clips_per_song {
        multiset.shuffle(rng);
        if seen.insert(multiset.clone()) {
            clips.push(multiset.clone());
        }
    }
    Ok(clips)
}

fn balanced_counts(len: usize, vocab: usize) -> Vec<usize> {
    (0..vocab).map(|i| len / vocab + usize::from(i < len % vocab)).collect()
}

/// `ln(T! / prod(c_i!))`, the log number of distinct orderings.
fn ln_permutations(counts: &[usize]) -> f64 {
    let ln_fact = |n: usize| (1..=n).map(|k| (k as f64).ln()).sum::<f64>();
    ln_fact(counts.iter().sum()) - counts.iter().map(|&c| ln_fact(c)).sum::<f64>()
}

/// Write every pair as CMF1 files under `dir/audio` and `dir/video` and a
/// `dir/manifest.tsv` listing them with relative paths.
pub fn write_dataset(dir: impl AsRef<Path>, pairs: &[ClipPair]) -> Result<Manifest> {
    let dir = dir.as_ref();
    for sub in ["audio", "video"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut records = Vec::with_capacity(pairs.len());
    for p in pairs {
        let audio_path = PathBuf::from("audio").join(format!("{}.cmf", p.clip_id));
        let video_path = PathBuf::from("video").join(format!("{}.cmf", p.clip_id));
        write_feature_file(&p.audio, dir.join(&audio_path))?;
        write_feature_file(&p.video, dir.join(&video_path))?;
        records.push(ManifestRecord {
            clip_id: p.clip_id.clone(),
            song_id: p.song_id.clone(),
            audio_path,
            video_path,
        });
    }
    let manifest = Manifest::new(records, dir)?;
    manifest.write(dir.join("manifest.tsv"))?;
    Ok(manifest)
}
