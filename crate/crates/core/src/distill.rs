//! Hierarchical behaviour cloning from expert rollouts.
//!
//! The high-level policy maps latent goals of the next frames and the current
//! fingertips to a short fingertip plan. The low-level policy maps that plan,
//! the matching goals and proprioception to joint targets, either directly or
//! as residuals on top of IK tracking of the plan. Both are MLPs trained with
//! mean squared error on standardised inputs and outputs.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{GoalCodec, LossCurve};
use crate::env::{step_logged, EpisodeLog, PianoEnv, SongEpisode};
use crate::error::{Error, Result};
use crate::ik::{ik_step, tasks_for_frame, IkParams};
use crate::kinematics::{JointConfig, ACTION_DIM, NUM_JOINTS};
use crate::metrics::Metrics;
use crate::nn::{fit_mse, Activation, FitConfig, Mlp};
use crate::residual::ResidualPolicy;
use crate::retarget::{align_frame, FingertipFrame, KeyGeometry, NUM_TIPS};
use crate::score::{PianoState, NUM_KEYS};

const TIP_DIM: usize = 3 * NUM_TIPS;

/// Everything recorded at one control instant, before the action is applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillFrame {
    pub t: usize,
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub key_positions: Vec<f64>,
    /// Robot fingertips.
    pub tips: [[f64; 3]; NUM_TIPS],
    /// Retargeted demonstrator fingertips.
    pub demo_tips: [[f64; 3]; NUM_TIPS],
    pub goal: PianoState,
    pub action: Vec<f64>,
    pub nominal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillSong {
    pub id: String,
    pub frames: Vec<DistillFrame>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DistillDataset {
    pub songs: Vec<DistillSong>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub frames: usize,
    pub file: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub songs: Vec<ManifestEntry>,
    pub total_frames: usize,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

impl DistillDataset {
    pub fn total_frames(&self) -> usize {
        self.songs.iter().map(|s| s.frames.len()).sum()
    }

    pub fn song(&self, id: &str) -> Option<&DistillSong> {
        self.songs.iter().find(|s| s.id == id)
    }

    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            songs: self
                .songs
                .iter()
                .map(|s| ManifestEntry {
                    id: s.id.clone(),
                    frames: s.frames.len(),
                    file: format!("{}.jsonl", s.id),
                })
                .collect(),
            total_frames: self.total_frames(),
        }
    }

    /// `manifest.json` plus one JSON-lines file per song.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let manifest = self.manifest();
        for (song, entry) in self.songs.iter().zip(&manifest.songs) {
            let mut text = String::new();
            for f in &song.frames {
                text.push_str(&serde_json::to_string(f).expect("frame serialize"));
                text.push('\n');
            }
            let path = dir.join(&entry.file);
            fs::write(&path, text).map_err(|e| io_err(&path, e))?;
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialize");
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }

    pub fn read_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            context: path.display().to_string(),
            source,
        })?;
        let mut songs = Vec::with_capacity(manifest.songs.len());
        for entry in &manifest.songs {
            let path = dir.join(&entry.file);
            let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            let frames = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    serde_json::from_str(l).map_err(|source| Error::Json {
                        context: path.display().to_string(),
                        source,
                    })
                })
                .collect::<Result<Vec<DistillFrame>>>()?;
            if frames.len() != entry.frames {
                return Err(Error::input(format!(
                    "{}: manifest lists {} frames, file has {}",
                    entry.file,
                    entry.frames,
                    frames.len()
                )));
            }
            songs.push(DistillSong {
                id: entry.id.clone(),
                frames,
            });
        }
        Ok(Self { songs })
    }
}

fn record_song(env: &PianoEnv<f64>, ep: &SongEpisode<f64>, policy: &ResidualPolicy) -> Result<DistillSong> {
    policy.validate()?;
    let mut env = env.clone();
    env.reset_episode(ep)?;
    let n = ep.len();
    let mut frames = Vec::with_capacity(n);
    for t in 0..n {
        let state = env.state().expect("episode running").clone();
        let tips = env.tips()?;
        let u = policy.action(env.spec(), &ep.nominal[t], t, n);
        frames.push(DistillFrame {
            t,
            q: state.q.as_slice().to_vec(),
            qdot: state.qdot.clone(),
            key_positions: state.key_positions.to_vec(),
            tips,
            demo_tips: ep.demo[t].tips,
            goal: ep.song.frames[t],
            action: u.as_slice().to_vec(),
            nominal: ep.nominal[t].as_slice().to_vec(),
        });
        env.step(&u)?;
    }
    Ok(DistillSong {
        id: ep.id.clone(),
        frames,
    })
}

/// Rolls out every expert on its song, in parallel across songs.
pub fn build_dataset(env: &PianoEnv<f64>, experts: &[(SongEpisode<f64>, ResidualPolicy)]) -> Result<DistillDataset> {
    if experts.is_empty() {
        return Err(Error::input("no experts"));
    }
    let songs = experts
        .par_iter()
        .map(|(ep, policy)| record_song(env, ep, policy).map_err(|e| Error::input(format!("expert for {}: {e}", ep.id))))
        .collect::<Result<Vec<_>>>()?;
    log::info!(
        "distillation dataset: {} songs, {} frames",
        songs.len(),
        songs.iter().map(|s| s.frames.len()).sum::<usize>()
    );
    Ok(DistillDataset { songs })
}

/// Per-dimension affine standardisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Fits to `rows`; standard deviations below `floor` are raised to it.
    /// With `centered == false` the mean is pinned at zero.
    pub fn fit(rows: &[Vec<f64>], floor: f64, centered: bool) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        let n = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..dim)
            .map(|i| if centered { rows.iter().map(|r| r[i]).sum::<f64>() / n } else { 0.0 })
            .collect();
        let std = (0..dim)
            .map(|i| {
                let v = rows.iter().map(|r| (r[i] - mean[i]).powi(2)).sum::<f64>() / n;
                v.sqrt().max(floor)
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

const STD_FLOOR: f64 = 1e-3;

/// Latent code of every goal frame of `goals`, followed by `pad` codes of the empty state.
pub fn goal_latents(codec: &GoalCodec<f64>, goals: &[PianoState], pad: usize) -> Result<Vec<Vec<f64>>> {
    let empty = codec.encode(&PianoState::empty())?;
    let mut out = goals.iter().map(|g| codec.encode(g)).collect::<Result<Vec<_>>>()?;
    out.extend(std::iter::repeat_n(empty, pad));
    Ok(out)
}

fn flat_tips(tips: &[[f64; 3]; NUM_TIPS]) -> impl Iterator<Item = f64> + '_ {
    tips.iter().flatten().copied()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HighLevelSpec {
    pub goal_frames: usize,
    pub chunk: usize,
    pub hidden: Vec<usize>,
    pub fit: FitConfig,
    /// Std of the noise added to the standardised current fingertips during training.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for HighLevelSpec {
    fn default() -> Self {
        Self {
            goal_frames: 10,
            chunk: 4,
            hidden: vec![256, 256],
            fit: FitConfig {
                epochs: 400,
                batch_size: 16,
                final_lr_fraction: 0.05,
                ..FitConfig::default()
            },
            noise_std: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HighLevelPolicy {
    pub goal_frames: usize,
    pub chunk: usize,
    pub input_norm: Standardizer,
    pub output_norm: Standardizer,
    pub net: Mlp<f64>,
}

impl HighLevelPolicy {
    fn raw_input(latents: &[Vec<f64>], tips: &[[f64; 3]; NUM_TIPS]) -> Vec<f64> {
        let mut x: Vec<f64> = latents.iter().flatten().copied().collect();
        x.extend(flat_tips(tips));
        x
    }

    /// Fingertip plan for the next `chunk` frames from the latent goals of the
    /// next `goal_frames` frames and the current fingertips.
    pub fn predict(&self, latents: &[Vec<f64>], tips: &[[f64; 3]; NUM_TIPS]) -> Result<Vec<[[f64; 3]; NUM_TIPS]>> {
        if latents.len() != self.goal_frames {
            return Err(Error::Arity {
                expected: self.goal_frames,
                got: latents.len(),
            });
        }
        let x = self.input_norm.apply(&Self::raw_input(latents, tips));
        let y = self.output_norm.invert(&self.net.forward(&x));
        Ok(y.chunks(TIP_DIM)
            .map(|c| std::array::from_fn(|i| [c[3 * i], c[3 * i + 1], c[3 * i + 2]]))
            .collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("policy serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "high-level policy".into(),
            source,
        })?;
        p.net.validate()?;
        Ok(p)
    }
}

fn padded<T: Clone>(v: &[T], i: usize) -> &T {
    &v[i.min(v.len() - 1)]
}

fn high_level_samples(
    ds: &DistillDataset,
    codec: &GoalCodec<f64>,
    goal_frames: usize,
    chunk: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for song in &ds.songs {
        let goals: Vec<PianoState> = song.frames.iter().map(|f| f.goal).collect();
        let lat = goal_latents(codec, &goals, goal_frames)?;
        let demo: Vec<[[f64; 3]; NUM_TIPS]> = song.frames.iter().map(|f| f.demo_tips).collect();
        for (t, f) in song.frames.iter().enumerate() {
            xs.push(HighLevelPolicy::raw_input(&lat[t..t + goal_frames], &f.tips));
            ys.push((0..chunk).flat_map(|k| flat_tips(padded(&demo, t + k)).collect::<Vec<_>>()).collect());
        }
    }
    Ok((xs, ys))
}

/// Regresses the demonstrator's upcoming fingertips on goals and current
/// fingertips, over every song of the dataset.
pub fn train_high_level(
    ds: &DistillDataset,
    codec: &GoalCodec<f64>,
    spec: &HighLevelSpec,
) -> Result<(HighLevelPolicy, LossCurve)> {
    if ds.total_frames() == 0 {
        return Err(Error::input("empty distillation dataset"));
    }
    if spec.goal_frames == 0 || spec.chunk == 0 {
        return Err(Error::Config {
            field: "high_level.goal_frames".into(),
            message: "goal_frames and chunk must be positive".into(),
        });
    }
    let (xs, ys) = high_level_samples(ds, codec, spec.goal_frames, spec.chunk)?;
    let input_norm = Standardizer::fit(&xs, STD_FLOOR, true);
    let output_norm = Standardizer::fit(&ys, STD_FLOOR, true);
    let xs: Vec<Vec<f64>> = xs.iter().map(|x| input_norm.apply(x)).collect();
    let ys: Vec<Vec<f64>> = ys.iter().map(|y| output_norm.apply(y)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sizes = vec![xs[0].len()];
    sizes.extend(&spec.hidden);
    sizes.push(ys[0].len());
    let mut net = Mlp::new(&sizes, Activation::Tanh, Activation::Identity, &mut rng);
    let tip_start = spec.goal_frames * codec.latent_dim();
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| Error::Config {
        field: "high_level.noise_std".into(),
        message: e.to_string(),
    })?;
    let curve = fit_mse(&mut net, &xs, &ys, &spec.fit, &mut rng, |x, rng| {
        if spec.noise_std > 0.0 {
            for v in &mut x[tip_start..] {
                *v += noise.sample(rng);
            }
        }
    })?;
    Ok((
        HighLevelPolicy {
            goal_frames: spec.goal_frames,
            chunk: spec.chunk,
            input_norm,
            output_norm,
            net,
        },
        LossCurve { epochs: curve },
    ))
}

/// Snaps each planned frame onto its goal keys with the retargeting rules.
pub fn postprocess_high_level(
    pred: &[FingertipFrame<f64>],
    goals: &[PianoState],
    geom: &KeyGeometry<f64>,
) -> Vec<FingertipFrame<f64>> {
    pred.iter()
        .enumerate()
        .map(|(i, f)| {
            let mut f = *f;
            let goal = goals.get(i).copied().unwrap_or_default();
            align_frame(&mut f, &goal, geom);
            f
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LowLevelMode {
    Direct,
    Residual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LowLevelSpec {
    pub mode: LowLevelMode,
    pub chunk: usize,
    pub hidden: Vec<usize>,
    pub fit: FitConfig,
    pub seed: u64,
}

impl Default for LowLevelSpec {
    fn default() -> Self {
        Self {
            mode: LowLevelMode::Residual,
            chunk: 4,
            hidden: vec![128, 128],
            fit: FitConfig {
                epochs: 300,
                batch_size: 16,
                final_lr_fraction: 0.05,
                ..FitConfig::default()
            },
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowLevelPolicy {
    pub mode: LowLevelMode,
    pub chunk: usize,
    pub input_norm: Standardizer,
    pub output_norm: Standardizer,
    pub net: Mlp<f64>,
}

/// Proprioception block of the low-level input.
#[derive(Debug, Clone, Copy)]
pub struct Proprio<'a> {
    pub q: &'a [f64],
    pub qdot: &'a [f64],
    pub key_positions: &'a [f64],
}

impl LowLevelPolicy {
    fn raw_input(tips: &[[[f64; 3]; NUM_TIPS]], latents: &[Vec<f64>], p: Proprio<'_>) -> Vec<f64> {
        let mut x: Vec<f64> = tips.iter().flat_map(flat_tips).collect();
        x.extend(latents.iter().flatten());
        x.extend(&p.q[..NUM_JOINTS]);
        x.extend(&p.qdot[..NUM_JOINTS]);
        x.extend(&p.key_positions[..NUM_KEYS]);
        x
    }

    /// `chunk` rows of 47 entries: joint targets, or residuals on IK solutions in residual mode.
    pub fn predict(
        &self,
        tips: &[[[f64; 3]; NUM_TIPS]],
        latents: &[Vec<f64>],
        proprio: Proprio<'_>,
    ) -> Result<Vec<Vec<f64>>> {
        if tips.len() != self.chunk || latents.len() != self.chunk {
            return Err(Error::Arity {
                expected: self.chunk,
                got: tips.len().min(latents.len()),
            });
        }
        let x = self.input_norm.apply(&Self::raw_input(tips, latents, proprio));
        let y = self.output_norm.invert(&self.net.forward(&x));
        Ok(y.chunks(ACTION_DIM).map(<[f64]>::to_vec).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("policy serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "low-level policy".into(),
            source,
        })?;
        p.net.validate()?;
        Ok(p)
    }
}

fn low_level_samples(
    songs: &[&DistillSong],
    codec: &GoalCodec<f64>,
    spec: &LowLevelSpec,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for song in songs {
        let goals: Vec<PianoState> = song.frames.iter().map(|f| f.goal).collect();
        let lat = goal_latents(codec, &goals, spec.chunk)?;
        let demo: Vec<[[f64; 3]; NUM_TIPS]> = song.frames.iter().map(|f| f.demo_tips).collect();
        for (t, f) in song.frames.iter().enumerate() {
            let tips: Vec<[[f64; 3]; NUM_TIPS]> = (0..spec.chunk).map(|k| *padded(&demo, t + k)).collect();
            let proprio = Proprio {
                q: &f.q,
                qdot: &f.qdot,
                key_positions: &f.key_positions,
            };
            xs.push(LowLevelPolicy::raw_input(&tips, &lat[t..t + spec.chunk], proprio));
            let mut y = Vec::with_capacity(spec.chunk * ACTION_DIM);
            for k in 0..spec.chunk {
                let fr = padded(&song.frames, t + k);
                match spec.mode {
                    LowLevelMode::Direct => y.extend(&fr.action),
                    LowLevelMode::Residual => y.extend(fr.action.iter().zip(&fr.nominal).map(|(a, n)| a - n)),
                }
            }
            ys.push(y);
        }
    }
    Ok((xs, ys))
}

/// Regresses expert actions (or their offsets from the IK nominal) on the
/// demonstrator fingertip plan, goals and proprioception. `song_ids` limits
/// training to a subset of the dataset.
pub fn train_low_level(
    ds: &DistillDataset,
    song_ids: Option<&[String]>,
    codec: &GoalCodec<f64>,
    spec: &LowLevelSpec,
) -> Result<(LowLevelPolicy, LossCurve)> {
    if spec.chunk == 0 {
        return Err(Error::Config {
            field: "low_level.chunk".into(),
            message: "must be positive".into(),
        });
    }
    let songs: Vec<&DistillSong> = match song_ids {
        None => ds.songs.iter().collect(),
        Some(ids) => ids
            .iter()
            .map(|id| ds.song(id).ok_or_else(|| Error::input(format!("song {id} not in dataset"))))
            .collect::<Result<_>>()?,
    };
    if songs.iter().all(|s| s.frames.is_empty()) {
        return Err(Error::input("no frames for low-level training"));
    }
    let (xs, ys) = low_level_samples(&songs, codec, spec)?;
    let input_norm = Standardizer::fit(&xs, STD_FLOOR, true);
    let output_norm = Standardizer::fit(&ys, STD_FLOOR, spec.mode == LowLevelMode::Direct);
    let xs: Vec<Vec<f64>> = xs.iter().map(|x| input_norm.apply(x)).collect();
    let ys: Vec<Vec<f64>> = ys.iter().map(|y| output_norm.apply(y)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut sizes = vec![xs[0].len()];
    sizes.extend(&spec.hidden);
    sizes.push(ys[0].len());
    let mut net = Mlp::new(&sizes, Activation::Tanh, Activation::Identity, &mut rng);
    let curve = fit_mse(&mut net, &xs, &ys, &spec.fit, &mut rng, |_, _| {})?;
    Ok((
        LowLevelPolicy {
            mode: spec.mode,
            chunk: spec.chunk,
            input_norm,
            output_norm,
            net,
        },
        LossCurve { epochs: curve },
    ))
}

/// Where the fingertip plan comes from.
#[derive(Debug, Clone, Copy)]
pub enum PlanSource<'a> {
    Learned(&'a HighLevelPolicy),
    /// The retargeted demonstrator fingertips of the episode.
    Oracle,
}

/// Where the joint targets come from.
#[derive(Debug, Clone, Copy)]
pub enum ActionSource<'a> {
    Learned(&'a LowLevelPolicy),
    /// Replays the given actions frame by frame.
    Replay(&'a [JointConfig<f64>]),
}

#[derive(Debug, Clone)]
pub struct ChunkedRun {
    pub log: EpisodeLog<f64>,
    pub metrics: Metrics,
    /// Number of planning calls.
    pub invocations: usize,
    /// Postprocessed fingertip plan, one frame per executed frame.
    pub plan: Vec<FingertipFrame<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct ExecutionContext<'a> {
    pub codec: &'a GoalCodec<f64>,
    pub geom: &'a KeyGeometry<f64>,
    pub ik: &'a IkParams<f64>,
    pub chunk: usize,
    pub goal_frames: usize,
}

/// Plans and executes `chunk` frames at a time, open loop within a chunk.
pub fn chunked_execute(
    env: &mut PianoEnv<f64>,
    ep: &SongEpisode<f64>,
    ctx: ExecutionContext<'_>,
    plan_source: PlanSource<'_>,
    action_source: ActionSource<'_>,
) -> Result<ChunkedRun> {
    if ctx.chunk == 0 {
        return Err(Error::input("chunk must be positive"));
    }
    if let ActionSource::Replay(a) = action_source {
        if a.len() != ep.len() {
            return Err(Error::input(format!("{} replay actions for {} frames", a.len(), ep.len())));
        }
    }
    let goal_frames = match plan_source {
        PlanSource::Learned(hl) => hl.goal_frames,
        PlanSource::Oracle => ctx.goal_frames,
    };
    let latents = goal_latents(ctx.codec, &ep.song.frames, goal_frames.max(ctx.chunk))?;
    env.reset_episode(ep)?;
    let spec = env.spec().clone();
    let n = ep.len();
    let mut q_ik = env.state().expect("episode running").q.clone();
    let mut log = EpisodeLog::default();
    let mut plan = Vec::with_capacity(n);
    let mut invocations = 0;
    let mut t0 = 0;
    while t0 < n {
        invocations += 1;
        let steps = ctx.chunk.min(n - t0);
        let raw: Vec<[[f64; 3]; NUM_TIPS]> = match plan_source {
            PlanSource::Learned(hl) => {
                let mut p = hl.predict(&latents[t0..t0 + hl.goal_frames], &env.tips()?)?;
                p.resize(ctx.chunk, *p.last().expect("non-empty plan"));
                p
            }
            PlanSource::Oracle => (0..ctx.chunk).map(|k| padded(&ep.demo, t0 + k).tips).collect(),
        };
        let frames: Vec<FingertipFrame<f64>> = raw
            .iter()
            .enumerate()
            .map(|(k, tips)| FingertipFrame::new(ep.song.time(t0 + k), *tips))
            .collect();
        let goals: Vec<PianoState> = (0..ctx.chunk)
            .map(|k| ep.song.frames.get(t0 + k).copied().unwrap_or_default())
            .collect();
        let frames = postprocess_high_level(&frames, &goals, ctx.geom);

        let actions: Vec<JointConfig<f64>> = match action_source {
            ActionSource::Replay(a) => a[t0..t0 + steps].to_vec(),
            ActionSource::Learned(ll) => {
                let state = env.state().expect("episode running").clone();
                let tips: Vec<[[f64; 3]; NUM_TIPS]> = frames.iter().map(|f| f.tips).collect();
                let out = ll.predict(
                    &tips,
                    &latents[t0..t0 + ctx.chunk],
                    Proprio {
                        q: state.q.as_slice(),
                        qdot: &state.qdot,
                        key_positions: &state.key_positions,
                    },
                )?;
                let mut acts = Vec::with_capacity(steps);
                for (k, row) in out.iter().take(steps).enumerate() {
                    let mut a = JointConfig::from_vec(row.clone())?;
                    if ll.mode == LowLevelMode::Residual {
                        let tasks = tasks_for_frame(&frames[k]);
                        for _ in 0..ctx.ik.iters_per_frame {
                            q_ik = ik_step(&spec, &q_ik, &tasks, ctx.ik).map_err(|e| e.at_frame(t0 + k))?.q_next;
                        }
                        for (v, base) in a.as_mut_slice().iter_mut().zip(q_ik.as_slice()) {
                            *v += base;
                        }
                    }
                    acts.push(a.clamped(&spec));
                }
                acts
            }
        };
        for (k, a) in actions.iter().enumerate() {
            log.frames.push(step_logged(env, a, t0 + k)?);
            plan.push(frames[k]);
        }
        t0 += steps;
    }
    let metrics = log.metrics();
    Ok(ChunkedRun {
        log,
        metrics,
        invocations,
        plan,
    })
}

#[cfg(test)]
mod tests;
