use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tensor::ParamStore;
use crate::text::Vocabulary;

pub const CHECKPOINT_FORMAT: &str = "robust-nmt-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub nmt: Adam,
    pub discriminator: Option<Adam>,
}

/// Self-describing JSON container. Discriminator parameters live in their own
/// block so they can be dropped for inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub step: u64,
    pub config: ModelConfig,
    pub source_vocab: Vec<String>,
    pub target_vocab: Vec<String>,
    pub nmt: ParamStore,
    pub discriminator: Option<ParamStore>,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(
        model: &Model,
        source_vocab: &Vocabulary,
        target_vocab: &Vocabulary,
        optimizer: Option<OptimizerState>,
        step: u64,
    ) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            step,
            config: model.config.clone(),
            source_vocab: source_vocab.entries().to_vec(),
            target_vocab: target_vocab.entries().to_vec(),
            nmt: model.nmt.clone(),
            discriminator: Some(model.discriminator.clone()),
            optimizer,
        }
    }

    pub fn without_discriminator(mut self) -> Self {
        self.discriminator = None;
        if let Some(o) = self.optimizer.as_mut() {
            o.discriminator = None;
        }
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let w = BufWriter::new(fs::File::create(path)?);
        serde_json::to_writer(w, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(fs::File::open(path)?))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Parse(format!(
                "unsupported checkpoint format {}",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }

    pub fn vocabularies(&self) -> Result<(Vocabulary, Vocabulary)> {
        let src = Vocabulary::from_entries(self.source_vocab.clone())?;
        let tgt = Vocabulary::from_entries(self.target_vocab.clone())?;
        if src.len() != self.config.source_vocab_size || tgt.len() != self.config.target_vocab_size
        {
            return Err(Error::VocabMismatch(format!(
                "checkpoint vocabularies have {}/{} entries, config expects {}/{}",
                src.len(),
                tgt.len(),
                self.config.source_vocab_size,
                self.config.target_vocab_size
            )));
        }
        Ok((src, tgt))
    }

    /// Rebuilds the model; a missing discriminator block is drawn from `seed`.
    pub fn to_model(&self, seed: u64) -> Result<Model> {
        let mut model = Model::new(self.config.clone(), seed)?;
        if !model.nmt.same_layout(&self.nmt) {
            return Err(Error::ConfigMismatch(
                "checkpoint parameters do not match the model layout".into(),
            ));
        }
        model.nmt = self.nmt.clone();
        if let Some(d) = &self.discriminator {
            if !model.discriminator.same_layout(d) {
                return Err(Error::ConfigMismatch(
                    "checkpoint discriminator does not match the model layout".into(),
                ));
            }
            model.discriminator = d.clone();
        }
        Ok(model)
    }
}
