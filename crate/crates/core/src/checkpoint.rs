//! JSON checkpoints: the resolved run configuration, the vocabulary and every
//! parameter as `name`, `shape`, `values`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::MultitaskModel;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// `key = value` lines of the configuration that produced the model.
    pub config: String,
    pub vocab: Vocab,
    pub params: Vec<SavedParam>,
}

impl Checkpoint {
    pub fn capture(config: &RunConfig, vocab: &Vocab, model: &MultitaskModel) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, p)| SavedParam {
                name: p.name.clone(),
                shape: p.value().shape().to_vec(),
                values: p.value().data().to_vec(),
            })
            .collect();
        Self {
            config: config.to_text(),
            vocab: vocab.clone(),
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(std::io::BufReader::new(file)).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    /// Rebuild the configuration, vocabulary and model. Every parameter of
    /// the rebuilt architecture must be present with a matching shape.
    pub fn restore(&self) -> Result<(RunConfig, Vocab, MultitaskModel)> {
        let mut config = RunConfig::default();
        config.apply_text(&self.config)?;
        let mut model = MultitaskModel::new(config.model_config(self.vocab.len()), config.train.seed)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint holds {} parameters, the configured model has {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for p in &self.params {
            model
                .store
                .assign(&p.name, Tensor::new(p.shape.clone(), p.values.clone())?)?;
        }
        Ok((config, self.vocab.clone(), model))
    }
}
