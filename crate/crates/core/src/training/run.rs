use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{LossBreakdown, LossWeights};
use super::step::{train_step, ParallelBatch, StepInputs, TranscriptionBatch};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, EmbeddingNoise, Model, ModelConfig, OptimizerState};
use crate::noise::GaussianNoiseConfig;
use crate::optim::{Adam, AdamConfig, LrSchedule};
use crate::align::read_pairs;
use crate::text::{
    build_vocab, encode_ids, load_parallel, CleanRules, ParallelPair, Sentence, TokenizeMode,
    TranscriptionPair, Vocabulary,
};

/// Where the automatic side of the auxiliary batches comes from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AuxiliarySource {
    /// Aligned (automatic, manual) transcript pairs.
    #[default]
    Asr,
    /// Manual transcripts paired with themselves under Gaussian embedding noise.
    Gaussian,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub parallel_source: Option<PathBuf>,
    pub parallel_target: Option<PathBuf>,
    /// Aligned transcript pairs (`auto<TAB>manual<TAB>wer`).
    pub transcriptions: Option<PathBuf>,
    pub baseline_checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub vocab_min_freq: Option<usize>,
    pub vocab_max_size: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub seed: u64,
    pub steps: u64,
    pub parallel_batch: usize,
    pub transcription_batch: usize,
    /// An auxiliary batch is drawn on every n-th step (1 = every step).
    pub transcription_every: u64,
    /// 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    pub weights: LossWeights,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub auxiliary: AuxiliarySource,
    pub gaussian: GaussianNoiseConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            seed: 1,
            steps: 1000,
            parallel_batch: 32,
            transcription_batch: 32,
            transcription_every: 1,
            checkpoint_every: 0,
            weights: LossWeights::default(),
            schedule: LrSchedule::default(),
            adam: AdamConfig::default(),
            auxiliary: AuxiliarySource::Asr,
            gaussian: GaussianNoiseConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainingConfig = toml::from_str(text)?;
        cfg.weights.validate()?;
        if cfg.parallel_batch == 0 || cfg.transcription_batch == 0 || cfg.transcription_every == 0 {
            return Err(Error::InvalidConfig(
                "batch sizes and transcription_every must be positive".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn wants_auxiliary(&self) -> bool {
        self.weights.alpha > 0.0 || self.weights.beta > 0.0
    }
}

/// Id-encoded corpora plus the vocabularies used to encode them.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
    /// (source ids + EOS, target ids)
    pub parallel: Vec<(Vec<usize>, Vec<usize>)>,
    /// (automatic ids + EOS, manual ids + EOS)
    pub transcriptions: Vec<(Vec<usize>, Vec<usize>)>,
}

pub fn source_ids(s: &Sentence, vocab: &Vocabulary) -> Vec<usize> {
    let mut ids = encode_ids(s, vocab, false);
    ids.push(crate::text::EOS);
    ids
}

impl TrainingData {
    /// Encodes the corpora. Without given vocabularies, a shared source-side
    /// vocabulary is built over parallel sources and both transcript sides.
    pub fn new(
        parallel: &[ParallelPair],
        transcriptions: &[TranscriptionPair],
        vocabs: Option<(Vocabulary, Vocabulary)>,
        min_freq: usize,
        max_size: usize,
    ) -> Result<Self> {
        let (source_vocab, target_vocab) = match vocabs {
            Some(v) => v,
            None => {
                let src_side = parallel
                    .iter()
                    .map(|p| &p.source)
                    .chain(transcriptions.iter().flat_map(|t| [&t.auto, &t.manual]));
                let src = build_vocab(src_side, min_freq, max_size)?;
                let tgt = build_vocab(parallel.iter().map(|p| &p.target), min_freq, max_size)?;
                (src, tgt)
            }
        };
        let par = parallel
            .iter()
            .map(|p| {
                (
                    source_ids(&p.source, &source_vocab),
                    encode_ids(&p.target, &target_vocab, false),
                )
            })
            .collect();
        let trans = transcriptions
            .iter()
            .map(|t| {
                (
                    source_ids(&t.auto, &source_vocab),
                    source_ids(&t.manual, &source_vocab),
                )
            })
            .collect();
        Ok(TrainingData {
            source_vocab,
            target_vocab,
            parallel: par,
            transcriptions: trans,
        })
    }
}

impl DataConfig {
    /// Loads the corpora this configuration points at. Parallel data is
    /// tokenized in clean mode and passed through the length and ratio
    /// rules; transcriptions are read as already-aligned pairs. A baseline
    /// checkpoint, when given, fixes the vocabularies.
    pub fn load(&self, baseline: Option<&Checkpoint>) -> Result<TrainingData> {
        let (src, tgt) = match (&self.parallel_source, &self.parallel_target) {
            (Some(s), Some(t)) => (s, t),
            _ => {
                return Err(Error::InvalidConfig(
                    "data.parallel_source and data.parallel_target are required".into(),
                ))
            }
        };
        let parallel = load_parallel(src, tgt, TokenizeMode::Clean, Some(&CleanRules::default()))?;
        let transcriptions = match &self.transcriptions {
            Some(p) => read_pairs(p)?,
            None => Vec::new(),
        };
        let vocabs = baseline.map(Checkpoint::vocabularies).transpose()?;
        TrainingData::new(
            &parallel,
            &transcriptions,
            vocabs,
            self.vocab_min_freq.unwrap_or(1),
            self.vocab_max_size.unwrap_or(10_000),
        )
    }
}

/// Epoch-wise shuffled sampling; the batch at any step is a pure function of
/// `(seed, salt, step)`.
pub struct Batcher {
    n: usize,
    batch: usize,
    seed: u64,
    salt: u64,
    perms: HashMap<u64, Vec<usize>>,
}

impl Batcher {
    pub fn new(n: usize, batch: usize, seed: u64, salt: u64) -> Self {
        Batcher {
            n,
            batch,
            seed,
            salt,
            perms: HashMap::new(),
        }
    }

    fn perm(&mut self, epoch: u64) -> &[usize] {
        let (n, seed, salt) = (self.n, self.seed, self.salt);
        self.perms.retain(|e, _| *e + 1 >= epoch);
        self.perms.entry(epoch).or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9).wrapping_add(salt));
            rng.set_stream(epoch);
            let mut p: Vec<usize> = (0..n).collect();
            p.shuffle(&mut rng);
            p
        })
    }

    /// Indices of the `k`-th batch (0-based).
    pub fn indices(&mut self, k: u64) -> Vec<usize> {
        if self.n == 0 {
            return Vec::new();
        }
        let start = k * self.batch as u64;
        (0..self.batch as u64)
            .map(|i| {
                let pos = start + i;
                let epoch = pos / self.n as u64;
                let n = self.n as u64;
                self.perm(epoch)[(pos % n) as usize]
            })
            .collect()
    }
}

/// Copies encoder/decoder parameters from a baseline checkpoint. The
/// discriminator comes from the checkpoint when present, else from `seed`.
pub fn init_from_baseline(model: &mut Model, checkpoint: &Checkpoint, seed: u64) -> Result<()> {
    let (a, b) = (&model.config, &checkpoint.config);
    let structural = |c: &ModelConfig| {
        (
            c.num_layers,
            c.d_model,
            c.ffn_size,
            c.num_heads,
            c.max_positions,
            c.source_vocab_size,
            c.target_vocab_size,
        )
    };
    if structural(a) != structural(b) {
        return Err(Error::ConfigMismatch(format!(
            "model {:?} vs checkpoint {:?}",
            structural(a),
            structural(b)
        )));
    }
    if !model.nmt.same_layout(&checkpoint.nmt) {
        return Err(Error::ConfigMismatch(
            "checkpoint parameter layout differs from the model".into(),
        ));
    }
    model.nmt = checkpoint.nmt.clone();
    match &checkpoint.discriminator {
        Some(d) if model.discriminator.same_layout(d) => model.discriminator = d.clone(),
        Some(_) => {
            return Err(Error::ConfigMismatch(
                "checkpoint discriminator layout differs from the model".into(),
            ))
        }
        None => model.reset_discriminator(seed ^ 0xd15c)?,
    }
    Ok(())
}

pub fn fresh_optimizer(model: &Model, adam: AdamConfig) -> OptimizerState {
    OptimizerState {
        nmt: Adam::new(adam, &model.nmt),
        discriminator: Some(Adam::new(adam, &model.discriminator)),
    }
}

/// Output directory of a run: echoed configuration, loss log, checkpoints.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(path: &Path, config_text: Option<&str>) -> Result<Self> {
        fs::create_dir_all(path)?;
        if let Some(text) = config_text {
            fs::write(path.join("config.toml"), text)?;
        }
        Ok(RunDir {
            path: path.to_path_buf(),
        })
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.path.join(format!("ckpt-{step}"))
    }

    pub fn loss_log_path(&self) -> PathBuf {
        self.path.join("loss.tsv")
    }
}

pub fn write_loss_log(path: &Path, log: &[LossBreakdown]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{}", LossBreakdown::tsv_header())?;
    for b in log {
        writeln!(f, "{}", b.to_tsv())?;
    }
    Ok(())
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossBreakdown>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() != 5 {
                return Err(Error::Parse(format!("bad loss log line: {l}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(e.to_string()));
            Ok(LossBreakdown {
                step: f[0].parse().map_err(|e: std::num::ParseIntError| Error::Parse(e.to_string()))?,
                l_normal: num(f[1])?,
                l_enc: num(f[2])?,
                l_dec: num(f[3])?,
                total: num(f[4])?,
            })
        })
        .collect()
}

pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub log: Vec<LossBreakdown>,
    pub skipped_pseudo: usize,
}

impl TrainOutcome {
    pub fn checkpoint(&self, data: &TrainingData) -> Checkpoint {
        let step = self.log.last().map_or(0, |b| b.step);
        Checkpoint::new(
            &self.model,
            &data.source_vocab,
            &data.target_vocab,
            Some(self.optimizer.clone()),
            step,
        )
    }
}

fn collect<T: Clone>(items: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| items[i].clone()).collect()
}

/// Runs `config.steps` joint updates, optionally starting from a baseline
/// checkpoint. Deterministic given `config.seed`.
pub fn train(
    config: &TrainingConfig,
    data: &TrainingData,
    baseline: Option<&Checkpoint>,
    run_dir: Option<&RunDir>,
) -> Result<TrainOutcome> {
    config.weights.validate()?;
    if data.parallel.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut model_cfg = config.model.clone();
    model_cfg.source_vocab_size = data.source_vocab.len();
    model_cfg.target_vocab_size = data.target_vocab.len();
    let mut model = Model::new(model_cfg, config.seed)?;
    if let Some(ckpt) = baseline {
        let (src, tgt) = ckpt.vocabularies()?;
        if src != data.source_vocab || tgt != data.target_vocab {
            return Err(Error::VocabMismatch(
                "training data was encoded with different vocabularies than the baseline".into(),
            ));
        }
        init_from_baseline(&mut model, ckpt, config.seed)?;
    }
    let mut optimizer = fresh_optimizer(&model, config.adam);

    let mut par_batcher = Batcher::new(data.parallel.len(), config.parallel_batch, config.seed, 1);
    let aux_pool: Vec<(Vec<usize>, Vec<usize>)> = match config.auxiliary {
        AuxiliarySource::Asr => data.transcriptions.clone(),
        AuxiliarySource::Gaussian if !data.transcriptions.is_empty() => data
            .transcriptions
            .iter()
            .map(|(_, m)| (m.clone(), m.clone()))
            .collect(),
        AuxiliarySource::Gaussian => data
            .parallel
            .iter()
            .map(|(s, _)| (s.clone(), s.clone()))
            .collect(),
    };
    let use_aux = config.wants_auxiliary() && !aux_pool.is_empty();
    if config.wants_auxiliary() && aux_pool.is_empty() {
        log::warn!("alpha/beta are set but there is no auxiliary data; training on parallel data only");
    }
    let mut aux_batcher = Batcher::new(aux_pool.len(), config.transcription_batch, config.seed, 2);

    let mut log_rows = Vec::with_capacity(config.steps as usize);
    let mut skipped = 0;
    for step in 1..=config.steps {
        let idx = par_batcher.indices(step - 1);
        let pairs = collect(&data.parallel, &idx);
        let parallel = ParallelBatch {
            sources: pairs.iter().map(|p| p.0.clone()).collect(),
            targets: pairs.into_iter().map(|p| p.1).collect(),
        };
        let transcription = (use_aux && (step - 1) % config.transcription_every == 0).then(|| {
            let k = (step - 1) / config.transcription_every;
            let items = collect(&aux_pool, &aux_batcher.indices(k));
            TranscriptionBatch {
                auto: items.iter().map(|p| p.0.clone()).collect(),
                manual: items.into_iter().map(|p| p.1).collect(),
                auto_noise: (config.auxiliary == AuxiliarySource::Gaussian).then(|| EmbeddingNoise {
                    std: config.gaussian.std(),
                    seed: config.seed.wrapping_mul(31).wrapping_add(step),
                }),
            }
        });
        let out = train_step(
            &mut model,
            &mut optimizer,
            StepInputs {
                parallel: &parallel,
                transcription: transcription.as_ref(),
                weights: config.weights,
                step,
                lr: config.schedule.lr(step),
                seed: config.seed,
            },
        )?;
        skipped += out.skipped_pseudo;
        log::debug!("{}", out.breakdown.to_tsv());
        log_rows.push(out.breakdown);
        if let Some(dir) = run_dir {
            let periodic = config.checkpoint_every > 0 && step % config.checkpoint_every == 0;
            if periodic || step == config.steps {
                Checkpoint::new(
                    &model,
                    &data.source_vocab,
                    &data.target_vocab,
                    Some(optimizer.clone()),
                    step,
                )
                .save(&dir.checkpoint_path(step))?;
                write_loss_log(&dir.loss_log_path(), &log_rows)?;
            }
        }
    }
    if skipped > 0 {
        log::info!("{skipped} pairs had empty pseudo-references and were skipped for l_dec");
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        log: log_rows,
        skipped_pseudo: skipped,
    })
}
