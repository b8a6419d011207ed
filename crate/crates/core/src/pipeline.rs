//! Stage functions chaining score ingestion, retargeting, IK, residual
//! training and distillation, plus the shared pipeline configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{train_autoencoder, CodecSpec, GoalCodec};
use crate::distill::{
    build_dataset, chunked_execute, train_high_level, train_low_level, ActionSource, DatasetManifest,
    DistillDataset, ExecutionContext, HighLevelPolicy, HighLevelSpec, LowLevelPolicy, LowLevelSpec, PlanSource,
};
use crate::env::{play_actions, EnvConfig, EpisodeLog, PianoEnv, SongEpisode};
use crate::error::{Error, Result};
use crate::ik::{joint_trajectory_from_csv, joint_trajectory_to_csv, settle, track_trajectory, IkParams, IkTrajectory};
use crate::kinematics::{HandModelSpec, JointConfig, FINGERS_PER_HAND, PEDAL_INDEX};
use crate::metrics::{compute_metrics_traj, metrics_table_csv, Metrics};
use crate::residual::{cem_train, default_groups, rollout, CemConfig, PhaseBasis, ResidualPolicy};
use crate::retarget::{
    align_fingertips, assign_z, estimate_homography, fingertips_from_csv, fingertips_to_csv, pixel_tracks_from_csv,
    pixel_tracks_to_csv, AlignmentReport, Correspondence, FingertipFrame, Homography, KeyGeometry, KeyLayout,
    PixelFrame, NUM_TIPS,
};
use crate::score::{discretize_with_tail, parse_midi, PianoState, PianoStateTrajectory, NUM_KEYS};
use crate::synth::{notes_to_csv, single_key_states, Corpus, Split};

/// Lightly curled fingers: flexion joints at 0.3, 0.4, 0.2 rad, everything else zero.
pub fn ready_pose(spec: &HandModelSpec<f64>) -> JointConfig<f64> {
    let mut q = JointConfig::zeros();
    let curl = [0.3, 0.4, 0.2];
    for hand in 0..spec.hands.len() {
        for f in 0..FINGERS_PER_HAND {
            let chain = spec.chain_indices(hand * FINGERS_PER_HAND + f);
            let forearm = spec.hands[hand].forearm.len();
            for (j, &c) in chain[forearm + 1..].iter().zip(&curl) {
                q.as_mut_slice()[*j] = c;
            }
        }
    }
    q.clamped(spec)
}

/// Maps pixel tracks to the plane, pads or truncates them to the song length,
/// then aligns tips to goal keys and assigns heights.
pub fn retarget_song(
    pixels: &[PixelFrame<f64>],
    h: &Homography<f64>,
    song: &PianoStateTrajectory,
    geom: &KeyGeometry<f64>,
) -> Result<(Vec<FingertipFrame<f64>>, AlignmentReport)> {
    if pixels.is_empty() {
        return Err(Error::input("empty fingertip track"));
    }
    let mut plane = Vec::with_capacity(song.len());
    for i in 0..song.len() {
        let px = &pixels[i.min(pixels.len() - 1)];
        let mut tips = [[0.0; 3]; NUM_TIPS];
        for (tip, p) in tips.iter_mut().zip(&px.tips) {
            let q = h.apply(*p).map_err(|e| e.at_frame(i))?;
            *tip = [q[0], q[1], 0.0];
        }
        plane.push(FingertipFrame::new(song.time(i), tips));
    }
    let (aligned, report) = align_fingertips(&plane, song, geom);
    Ok((assign_z(&aligned, geom), report))
}

/// IK nominal for a demonstration: settles the ready pose on the first frame,
/// then tracks every frame. `z_bias` is added to every target height. The
/// pedal entry follows the song.
pub fn nominal_trajectory(
    spec: &HandModelSpec<f64>,
    demo: &[FingertipFrame<f64>],
    song: &PianoStateTrajectory,
    params: &IkParams<f64>,
    settle_iters: usize,
    z_bias: f64,
) -> Result<IkTrajectory<f64>> {
    if demo.len() != song.len() {
        return Err(Error::input(format!("demo has {} frames, song {}", demo.len(), song.len())));
    }
    let targets: Vec<FingertipFrame<f64>> = demo
        .iter()
        .map(|f| {
            let mut f = *f;
            for p in f.tips.iter_mut() {
                p[2] += z_bias;
            }
            f
        })
        .collect();
    let q0 = settle(spec, &ready_pose(spec), &targets[0], params, settle_iters)?;
    let mut traj = track_trajectory(spec, &q0, &targets, params)?;
    for (q, s) in traj.q.iter_mut().zip(&song.frames) {
        q.as_mut_slice()[PEDAL_INDEX] = if s.pedal { 1.0 } else { 0.0 };
    }
    Ok(traj)
}

/// Retargets and tracks one song, returning the env-ready episode.
#[allow(clippy::too_many_arguments)]
pub fn prepare_episode(
    id: &str,
    song: &PianoStateTrajectory,
    pixels: &[PixelFrame<f64>],
    h: &Homography<f64>,
    geom: &KeyGeometry<f64>,
    spec: &HandModelSpec<f64>,
    params: &IkParams<f64>,
    settle_iters: usize,
    z_bias: f64,
) -> Result<SongEpisode<f64>> {
    let (demo, _) = retarget_song(pixels, h, song, geom)?;
    let nominal = nominal_trajectory(spec, &demo, song, params, settle_iters, z_bias)?;
    SongEpisode::new(id, song.clone(), demo, nominal.q)
}

/// Paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub midi_dir: PathBuf,
    /// Pixel-space fingertip CSVs named `<song>.csv`.
    pub fingertip_dir: PathBuf,
    pub correspondences: PathBuf,
    pub split: PathBuf,
    pub output_dir: PathBuf,
    /// Hand model JSON; the built-in model when absent.
    pub hand_model: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            midi_dir: "midi".into(),
            fingertip_dir: "fingertips".into(),
            correspondences: "correspondences.json".into(),
            split: "split.json".into(),
            output_dir: "out".into(),
            hand_model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResidualConfig {
    pub basis: PhaseBasis,
    pub revolute_bound: f64,
    pub prismatic_bound: f64,
}

impl Default for ResidualConfig {
    fn default() -> Self {
        Self {
            basis: PhaseBasis::default(),
            revolute_bound: 0.05,
            prismatic_bound: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecCorpus {
    /// Every single-key state plus the empty state.
    SingleKey,
    /// Distinct goal frames of the training songs.
    TrainingSongs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub high_level: HighLevelSpec,
    pub low_level: LowLevelSpec,
    /// Songs whose expert actions train the low-level policy; all training songs when absent.
    pub low_level_songs: Option<Vec<String>>,
    pub chunk: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            high_level: HighLevelSpec::default(),
            low_level: LowLevelSpec::default(),
            low_level_songs: None,
            chunk: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub seed: u64,
    pub rate_hz: f64,
    /// Empty frames appended after the last note-off.
    pub tail_frames: usize,
    pub keys: KeyLayout<f64>,
    pub env: EnvConfig<f64>,
    pub ik: IkParams<f64>,
    /// IK steps settling the ready pose onto the first demo frame.
    pub settle_iters: usize,
    /// Added to every fingertip target height before IK.
    pub nominal_z_bias: f64,
    pub residual: ResidualConfig,
    pub cem: CemConfig,
    pub codec: CodecSpec,
    pub codec_corpus: CodecCorpus,
    pub distill: DistillConfig,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PathsConfig::default(),
            seed: 0,
            rate_hz: crate::DEFAULT_CONTROL_HZ,
            tail_frames: 4,
            keys: KeyLayout::default(),
            env: EnvConfig::default(),
            ik: IkParams {
                iters_per_frame: 8,
                ..IkParams::default()
            },
            settle_iters: 400,
            nominal_z_bias: 0.0,
            residual: ResidualConfig::default(),
            cem: CemConfig::default(),
            codec: CodecSpec::default(),
            codec_corpus: CodecCorpus::SingleKey,
            distill: DistillConfig::default(),
            base_dir: PathBuf::from("."),
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_json<D: serde::de::DeserializeOwned>(path: &Path) -> Result<D> {
    serde_json::from_str(&read_text(path)?).map_err(|source| Error::Json {
        context: path.display().to_string(),
        source,
    })
}

fn to_json<S: Serialize>(v: &S) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serialize");
    s.push('\n');
    s
}

impl PipelineConfig {
    pub fn from_json(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "pipeline config".into(),
            source,
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let base = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        Self::from_json(&read_text(path)?, &base)
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_hz > 0.0) {
            return Err(Error::Config {
                field: "rate_hz".into(),
                message: "must be positive".into(),
            });
        }
        if (self.rate_hz - self.env.control_hz).abs() > 1e-12 {
            return Err(Error::Config {
                field: "env.control_hz".into(),
                message: format!("must equal rate_hz ({})", self.rate_hz),
            });
        }
        if !self.nominal_z_bias.is_finite() {
            return Err(Error::Config {
                field: "nominal_z_bias".into(),
                message: "must be finite".into(),
            });
        }
        if self.distill.chunk == 0 {
            return Err(Error::Config {
                field: "distill.chunk".into(),
                message: "must be positive".into(),
            });
        }
        self.env.validate()?;
        self.ik.validate()?;
        self.cem.validate()?;
        self.codec.validate()?;
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out(&self, rel: &str) -> PathBuf {
        self.resolve(&self.paths.output_dir).join(rel)
    }

    pub fn geometry(&self) -> KeyGeometry<f64> {
        KeyGeometry::standard(&self.keys)
    }

    pub fn hand_model(&self) -> Result<HandModelSpec<f64>> {
        match &self.paths.hand_model {
            None => Ok(HandModelSpec::default()),
            Some(p) => HandModelSpec::from_json(&read_text(&self.resolve(p))?),
        }
    }

    pub fn env(&self) -> Result<PianoEnv<f64>> {
        PianoEnv::new(self.hand_model()?, self.geometry(), self.env.clone())
    }

    pub fn split(&self) -> Result<Split> {
        read_json(&self.resolve(&self.paths.split))
    }

    /// Song ids: stems of the `.mid` files in the MIDI directory, sorted.
    pub fn song_ids(&self) -> Result<Vec<String>> {
        let dir = self.resolve(&self.paths.midi_dir);
        let entries = fs::read_dir(&dir).map_err(|source| Error::Io {
            path: dir.display().to_string(),
            source,
        })?;
        let mut ids: Vec<String> = entries
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "mid"))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        ids.sort();
        if ids.is_empty() {
            return Err(Error::input(format!("no .mid files in {}", dir.display())));
        }
        Ok(ids)
    }

    fn policy_template(&self, spec: &HandModelSpec<f64>) -> ResidualPolicy {
        ResidualPolicy::zero(
            self.residual.basis,
            default_groups(spec, self.residual.revolute_bound, self.residual.prismatic_bound),
        )
    }

    fn context<'a>(&'a self, codec: &'a GoalCodec<f64>, geom: &'a KeyGeometry<f64>, hl: &HighLevelPolicy) -> ExecutionContext<'a> {
        ExecutionContext {
            codec,
            geom,
            ik: &self.ik,
            chunk: self.distill.chunk,
            goal_frames: hl.goal_frames,
        }
    }
}

/// Piano-state trajectory of one ingested song.
pub fn load_states(cfg: &PipelineConfig, id: &str) -> Result<PianoStateTrajectory> {
    PianoStateTrajectory::from_csv(&read_text(&cfg.out(&format!("states/{id}.csv")))?)
}

/// `ingest`: MIDI → piano-state CSV per song.
pub fn stage_ingest(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let ids = cfg.song_ids()?;
    for id in &ids {
        let path = cfg.resolve(&cfg.paths.midi_dir).join(format!("{id}.mid"));
        let bytes = fs::read(&path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let score = parse_midi(&bytes)?;
        let traj = discretize_with_tail(&score.notes, &score.pedal, cfg.rate_hz, cfg.tail_frames)?;
        write_text(&cfg.out(&format!("states/{id}.csv")), &traj.to_csv())?;
    }
    Ok(ids)
}

/// `retarget`: homography fit, pixel → plane, key alignment, heights.
pub fn stage_retarget(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let ids = cfg.song_ids()?;
    let corr: Vec<Correspondence<f64>> = read_json(&cfg.resolve(&cfg.paths.correspondences))?;
    let fit = estimate_homography(&corr)?;
    write_text(&cfg.out("retarget/homography.json"), &to_json(&fit))?;
    let geom = cfg.geometry();
    for id in &ids {
        let song = load_states(cfg, id)?;
        let pixel_path = cfg.resolve(&cfg.paths.fingertip_dir).join(format!("{id}.csv"));
        let pixels = pixel_tracks_from_csv(&read_text(&pixel_path)?)?;
        let (demo, report) = retarget_song(&pixels, &fit.homography, &song, &geom)?;
        write_text(&cfg.out(&format!("retarget/{id}.csv")), &fingertips_to_csv(&demo))?;
        write_text(&cfg.out(&format!("retarget/{id}.alignment.json")), &to_json(&report))?;
    }
    Ok(ids)
}

fn load_demo(cfg: &PipelineConfig, id: &str) -> Result<Vec<FingertipFrame<f64>>> {
    fingertips_from_csv(&read_text(&cfg.out(&format!("retarget/{id}.csv")))?)
}

/// `ik-track`: IK nominal per song.
pub fn stage_ik_track(cfg: &PipelineConfig) -> Result<Vec<String>> {
    let ids = cfg.song_ids()?;
    let spec = cfg.hand_model()?;
    let results: Vec<(String, String)> = ids
        .par_iter()
        .map(|id| {
            let song = load_states(cfg, id)?;
            let demo = load_demo(cfg, id)?;
            let traj = nominal_trajectory(&spec, &demo, &song, &cfg.ik, cfg.settle_iters, cfg.nominal_z_bias)
                .map_err(|e| Error::input(format!("{id}: {e}")))?;
            Ok((joint_trajectory_to_csv(&traj.q, cfg.rate_hz), to_json(&traj.log)))
        })
        .collect::<Result<_>>()?;
    for (id, (csv, log)) in ids.iter().zip(results) {
        write_text(&cfg.out(&format!("nominal/{id}.csv")), &csv)?;
        write_text(&cfg.out(&format!("nominal/{id}.ik_log.json")), &log)?;
    }
    Ok(ids)
}

/// Song, retargeted demo and IK nominal as written by the earlier stages.
pub fn load_episode(cfg: &PipelineConfig, id: &str) -> Result<SongEpisode<f64>> {
    let song = load_states(cfg, id)?;
    let demo = load_demo(cfg, id)?;
    let nominal = joint_trajectory_from_csv(&read_text(&cfg.out(&format!("nominal/{id}.csv")))?)?;
    SongEpisode::new(id, song, demo, nominal)
}

fn load_expert(cfg: &PipelineConfig, id: &str) -> Result<ResidualPolicy> {
    ResidualPolicy::from_json(&read_text(&cfg.out(&format!("experts/{id}.policy.json")))?)
}

/// `train-song`: CEM residual expert per song (the training split by default).
pub fn stage_train_song(cfg: &PipelineConfig, ids: Option<&[String]>) -> Result<Vec<String>> {
    let ids: Vec<String> = match ids {
        Some(ids) => ids.to_vec(),
        None => cfg.split()?.train,
    };
    let env = cfg.env()?;
    let template = cfg.policy_template(env.spec());
    for (i, id) in ids.iter().enumerate() {
        let ep = load_episode(cfg, id)?;
        let cem = CemConfig {
            seed: cfg.cem.seed ^ cfg.seed.wrapping_add(i as u64),
            ..cfg.cem.clone()
        };
        let (policy, curve) = cem_train(&env, &ep, &template, &cem).map_err(|e| Error::input(format!("{id}: {e}")))?;
        let log = rollout(&mut env.clone(), &ep, &policy)?;
        write_text(&cfg.out(&format!("experts/{id}.policy.json")), &(policy.to_json() + "\n"))?;
        write_text(&cfg.out(&format!("experts/{id}.curve.csv")), &curve.to_csv())?;
        write_text(&cfg.out(&format!("experts/{id}.episode.jsonl")), &log.to_json_lines())?;
        write_text(&cfg.out(&format!("experts/{id}.metrics.json")), &to_json(&log.metrics()))?;
    }
    Ok(ids)
}

/// `train-codec`: goal autoencoder.
pub fn stage_train_codec(cfg: &PipelineConfig) -> Result<GoalCodec<f64>> {
    let states = match cfg.codec_corpus {
        CodecCorpus::SingleKey => {
            let mut s = single_key_states();
            s.push(PianoState::empty());
            s
        }
        CodecCorpus::TrainingSongs => {
            let mut s = vec![PianoState::empty()];
            for id in cfg.split()?.train {
                s.extend(load_states(cfg, &id)?.frames);
            }
            s.sort_by_key(|st| st.key_mask());
            s.dedup_by_key(|st| st.key_mask());
            s
        }
    };
    let spec = CodecSpec {
        seed: cfg.codec.seed ^ cfg.seed,
        ..cfg.codec.clone()
    };
    let (codec, curve) = train_autoencoder(&states, &cfg.geometry(), &spec)?;
    write_text(&cfg.out("codec/codec.json"), &(codec.to_json() + "\n"))?;
    write_text(&cfg.out("codec/loss.csv"), &curve.to_csv())?;
    Ok(codec)
}

fn load_codec(cfg: &PipelineConfig) -> Result<GoalCodec<f64>> {
    GoalCodec::from_json(&read_text(&cfg.out("codec/codec.json"))?)
}

/// `distill-build`: expert rollouts of the training songs.
pub fn stage_distill_build(cfg: &PipelineConfig) -> Result<DatasetManifest> {
    let split = cfg.split()?;
    let experts = split
        .train
        .iter()
        .map(|id| Ok((load_episode(cfg, id)?, load_expert(cfg, id)?)))
        .collect::<Result<Vec<_>>>()?;
    let ds = build_dataset(&cfg.env()?, &experts)?;
    ds.write_dir(&cfg.out("dataset"))?;
    write_text(&cfg.out("dataset/split.json"), &to_json(&split))?;
    Ok(ds.manifest())
}

/// `distill-train`: high- and low-level policies.
pub fn stage_distill_train(cfg: &PipelineConfig) -> Result<(HighLevelPolicy, LowLevelPolicy)> {
    let ds = DistillDataset::read_dir(&cfg.out("dataset"))?;
    let codec = load_codec(cfg)?;
    let hl_spec = HighLevelSpec {
        chunk: cfg.distill.chunk,
        seed: cfg.distill.high_level.seed ^ cfg.seed,
        ..cfg.distill.high_level.clone()
    };
    let ll_spec = LowLevelSpec {
        chunk: cfg.distill.chunk,
        seed: cfg.distill.low_level.seed ^ cfg.seed,
        ..cfg.distill.low_level.clone()
    };
    let (hl, hl_curve) = train_high_level(&ds, &codec, &hl_spec)?;
    let (ll, ll_curve) = train_low_level(&ds, cfg.distill.low_level_songs.as_deref(), &codec, &ll_spec)?;
    write_text(&cfg.out("policies/high_level.json"), &(hl.to_json() + "\n"))?;
    write_text(&cfg.out("policies/low_level.json"), &(ll.to_json() + "\n"))?;
    write_text(&cfg.out("policies/high_level.loss.csv"), &hl_curve.to_csv())?;
    write_text(&cfg.out("policies/low_level.loss.csv"), &ll_curve.to_csv())?;
    Ok((hl, ll))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlayMode {
    /// Learned high- and low-level policies.
    TwoStage,
    /// Demonstrator fingertips in place of the high-level policy.
    OracleHighLevel,
    /// The song's residual expert.
    Expert,
    /// The IK nominal alone.
    Nominal,
}

impl PlayMode {
    pub fn tag(self) -> &'static str {
        match self {
            PlayMode::TwoStage => "two_stage",
            PlayMode::OracleHighLevel => "oracle_hl",
            PlayMode::Expert => "expert",
            PlayMode::Nominal => "nominal",
        }
    }
}

/// `play`: executes each song and writes its log, pressed keys and metrics
/// under `play/<mode>/`.
pub fn stage_play(cfg: &PipelineConfig, ids: Option<&[String]>, mode: PlayMode) -> Result<Vec<(String, Metrics)>> {
    let ids: Vec<String> = match ids {
        Some(ids) => ids.to_vec(),
        None => {
            let s = cfg.split()?;
            s.train.into_iter().chain(s.test).collect()
        }
    };
    let env = cfg.env()?;
    let geom = cfg.geometry();
    let learned = match mode {
        PlayMode::TwoStage | PlayMode::OracleHighLevel => Some((
            load_codec(cfg)?,
            HighLevelPolicy::from_json(&read_text(&cfg.out("policies/high_level.json"))?)?,
            LowLevelPolicy::from_json(&read_text(&cfg.out("policies/low_level.json"))?)?,
        )),
        _ => None,
    };
    let runs: Vec<EpisodeLog<f64>> = ids
        .par_iter()
        .map(|id| {
            let ep = load_episode(cfg, id)?;
            let mut env = env.clone();
            match (&learned, mode) {
                (Some((codec, hl, ll)), PlayMode::TwoStage) => Ok(chunked_execute(
                    &mut env,
                    &ep,
                    cfg.context(codec, &geom, hl),
                    PlanSource::Learned(hl),
                    ActionSource::Learned(ll),
                )?
                .log),
                (Some((codec, hl, ll)), _) => Ok(chunked_execute(
                    &mut env,
                    &ep,
                    cfg.context(codec, &geom, hl),
                    PlanSource::Oracle,
                    ActionSource::Learned(ll),
                )?
                .log),
                (None, PlayMode::Expert) => rollout(&mut env, &ep, &load_expert(cfg, id)?),
                (None, _) => play_actions(&mut env, &ep.song, &ep.demo, &ep.nominal, &ep.nominal),
            }
            .map_err(|e| Error::input(format!("{id}: {e}")))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(ids.len());
    for (id, log) in ids.iter().zip(runs) {
        let dir = format!("play/{}/{id}", mode.tag());
        let pressed = PianoStateTrajectory::new(cfg.rate_hz, log.pressed())?;
        let m = log.metrics();
        write_text(&cfg.out(&format!("{dir}.episode.jsonl")), &log.to_json_lines())?;
        write_text(&cfg.out(&format!("{dir}.pressed.csv")), &pressed.to_csv())?;
        write_text(&cfg.out(&format!("{dir}.metrics.json")), &to_json(&m))?;
        out.push((id.clone(), m));
    }
    Ok(out)
}

/// `eval`: metrics of a pressed-key trajectory against a goal trajectory.
pub fn eval_files(pressed: &Path, goal: &Path) -> Result<Metrics> {
    let p = PianoStateTrajectory::from_csv(&read_text(pressed)?)?;
    let g = PianoStateTrajectory::from_csv(&read_text(goal)?)?;
    compute_metrics_traj(&p, &g)
}

/// `report`: per-mode metric tables and piano rolls for every played song.
pub fn stage_report(cfg: &PipelineConfig) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for mode in [PlayMode::Nominal, PlayMode::Expert, PlayMode::TwoStage, PlayMode::OracleHighLevel] {
        let dir = cfg.out(&format!("play/{}", mode.tag()));
        if !dir.is_dir() {
            continue;
        }
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(|source| Error::Io {
                path: dir.display().to_string(),
                source,
            })?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".pressed.csv")).map(String::from))
            .collect();
        ids.sort();
        let mut rows = Vec::new();
        for id in &ids {
            let pressed = PianoStateTrajectory::from_csv(&read_text(&dir.join(format!("{id}.pressed.csv")))?)?;
            let goal = load_states(cfg, id)?;
            rows.push((id.clone(), compute_metrics_traj(&pressed, &goal)?));
            let svg = cfg.out(&format!("report/{}/{id}.svg", mode.tag()));
            write_text(&svg, &piano_roll_svg(&pressed, &goal, &format!("{id} ({})", mode.tag())))?;
            let csv = cfg.out(&format!("report/{}/{id}.roll.csv", mode.tag()));
            write_text(&csv, &piano_roll_csv(&pressed, &goal))?;
            written.extend([svg, csv]);
        }
        let table = cfg.out(&format!("report/{}/metrics.csv", mode.tag()));
        write_text(&table, &metrics_table_csv(&rows))?;
        written.push(table);
    }
    Ok(written)
}

/// `frame,key,goal,pressed` for every cell where either is set.
pub fn piano_roll_csv(pressed: &PianoStateTrajectory, goal: &PianoStateTrajectory) -> String {
    let mut out = String::from("frame,key,goal,pressed\n");
    for t in 0..pressed.len().max(goal.len()) {
        let p = pressed.frames.get(t).copied().unwrap_or_default();
        let g = goal.frames.get(t).copied().unwrap_or_default();
        for k in 0..NUM_KEYS {
            if p.is_pressed(k) || g.is_pressed(k) {
                let _ = writeln!(out, "{t},{k},{},{}", u8::from(g.is_pressed(k)), u8::from(p.is_pressed(k)));
            }
        }
    }
    out
}

/// Frames left to right, keys bottom to top. Goal cells are outlined,
/// pressed cells filled: green when matching the goal, red otherwise.
pub fn piano_roll_svg(pressed: &PianoStateTrajectory, goal: &PianoStateTrajectory, title: &str) -> String {
    let frames = pressed.len().max(goal.len());
    let used: Vec<usize> = (0..NUM_KEYS)
        .filter(|&k| {
            pressed.frames.iter().chain(&goal.frames).any(|s| s.is_pressed(k))
        })
        .collect();
    let (lo, hi) = match (used.first(), used.last()) {
        (Some(&a), Some(&b)) => (a.saturating_sub(2), (b + 2).min(NUM_KEYS - 1)),
        _ => (40, 47),
    };
    let (cw, ch, top) = (8usize, 8usize, 20usize);
    let rows = hi - lo + 1;
    let (w, h) = (frames * cw + 40, rows * ch + top + 10);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="monospace" font-size="10">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="4" y="12">{}</text>"#, xml_escape(title));
    for k in lo..=hi {
        let y = top + (hi - k) * ch;
        if k % 12 == 3 {
            let _ = writeln!(s, r#"<text x="2" y="{}">{k}</text>"#, y + ch);
        }
        for t in 0..frames {
            let x = 30 + t * cw;
            let g = goal.frames.get(t).is_some_and(|f| f.is_pressed(k));
            let p = pressed.frames.get(t).is_some_and(|f| f.is_pressed(k));
            if p {
                let fill = if g { "#2a9d3a" } else { "#d43c3c" };
                let _ = writeln!(s, r#"<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{fill}"/>"#);
            }
            if g {
                let _ = writeln!(
                    s,
                    r##"<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="none" stroke="#1f3fbf" stroke-width="1"/>"##
                );
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Metrics from every play mode of one full run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub nominal: Vec<(String, Metrics)>,
    pub expert: Vec<(String, Metrics)>,
    pub two_stage: Vec<(String, Metrics)>,
    pub oracle_hl: Vec<(String, Metrics)>,
}

/// Every stage in order, then `play` in all modes and `report`.
pub fn run_all(cfg: &PipelineConfig) -> Result<RunSummary> {
    stage_ingest(cfg)?;
    stage_retarget(cfg)?;
    stage_ik_track(cfg)?;
    stage_train_song(cfg, None)?;
    stage_train_codec(cfg)?;
    stage_distill_build(cfg)?;
    stage_distill_train(cfg)?;
    let train = cfg.split()?.train;
    let summary = RunSummary {
        nominal: stage_play(cfg, None, PlayMode::Nominal)?,
        expert: stage_play(cfg, Some(&train), PlayMode::Expert)?,
        two_stage: stage_play(cfg, None, PlayMode::TwoStage)?,
        oracle_hl: stage_play(cfg, None, PlayMode::OracleHighLevel)?,
    };
    write_text(&cfg.out("summary.json"), &to_json(&summary))?;
    stage_report(cfg)?;
    Ok(summary)
}

/// Writes a generated corpus in the layout [`PathsConfig`] expects, with a
/// matching `pipeline.json`.
pub fn write_corpus(dir: &Path, corpus: &Corpus, cfg: &PipelineConfig) -> Result<()> {
    for s in &corpus.songs {
        let id = &s.song.id;
        let midi = dir.join(&cfg.paths.midi_dir).join(format!("{id}.mid"));
        if let Some(p) = midi.parent() {
            fs::create_dir_all(p).map_err(|source| Error::Io {
                path: p.display().to_string(),
                source,
            })?;
        }
        fs::write(&midi, s.song.midi_bytes(&corpus.spec)).map_err(|source| Error::Io {
            path: midi.display().to_string(),
            source,
        })?;
        write_text(
            &dir.join(&cfg.paths.fingertip_dir).join(format!("{id}.csv")),
            &pixel_tracks_to_csv(&s.pixels),
        )?;
        write_text(&dir.join("notes").join(format!("{id}.csv")), &notes_to_csv(&s.song.notes))?;
    }
    write_text(&dir.join(&cfg.paths.correspondences), &to_json(&corpus.correspondences))?;
    write_text(&dir.join(&cfg.paths.split), &to_json(&corpus.split))?;
    write_text(&dir.join("synth.json"), &to_json(&corpus.spec))?;
    write_text(&dir.join("pipeline.json"), &cfg.to_json())
}
