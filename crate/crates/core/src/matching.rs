//! Matching-network base learner.
//!
//! A query is classified by attending over the embedded support set: the
//! attention weights are a softmax over inner products `f(x̂)·g(x_i)`, and the
//! probability of a class is the total weight of its support items. Nothing in
//! the classifier depends on the number of classes, so episodes may carry any
//! label count and unbalanced supports.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::encoder::{EncoderConfig, LearnerParams};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Similarity {
    #[default]
    Dot,
    Cosine,
}

/// One labelled example inside an episode. `label` indexes `Episode::classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: String,
    pub features: Vec<f64>,
    pub label: usize,
}

impl Item {
    pub fn new(id: impl Into<String>, features: Vec<f64>, label: usize) -> Self {
        Self {
            id: id.into(),
            features,
            label,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    /// Distinct class ids; the position of a class is its label.
    pub classes: Vec<String>,
    pub support: Vec<Item>,
    pub batch: Vec<Item>,
}

impl Episode {
    pub fn new(classes: Vec<String>, support: Vec<Item>, batch: Vec<Item>) -> Result<Self> {
        let episode = Self {
            classes,
            support,
            batch,
        };
        episode.validate()?;
        Ok(episode)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.classes.len();
        let distinct: HashSet<&String> = self.classes.iter().collect();
        if distinct.len() != n {
            return Err(Error::Data("episode class list has duplicates".into()));
        }
        if let Some(item) = self.support.iter().chain(&self.batch).find(|i| i.label >= n) {
            return Err(Error::Data(format!(
                "item {} has label {} but the episode has {n} classes",
                item.id, item.label
            )));
        }
        let mut counts = vec![0usize; n];
        for item in &self.support {
            counts[item.label] += 1;
        }
        if let Some(c) = counts.iter().position(|&k| k == 0) {
            return Err(Error::Data(format!(
                "class {} has no support examples",
                self.classes[c]
            )));
        }
        let support_ids: HashSet<&str> = self.support.iter().map(|i| i.id.as_str()).collect();
        if let Some(item) = self.batch.iter().find(|i| support_ids.contains(i.id.as_str())) {
            return Err(Error::Data(format!(
                "example {} appears in both support and batch",
                item.id
            )));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }
}

/// Probabilities aligned with an episode's class list.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDistribution {
    pub probs: Vec<f64>,
}

impl ClassDistribution {
    /// Most probable class; exact ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Softmax attention of one query embedding over support embeddings.
pub fn attention(query_emb: &[f64], support_embs: &[Vec<f64>]) -> Result<Vec<f64>> {
    if support_embs.is_empty() {
        return Err(Error::Data("attention over an empty support set".into()));
    }
    let mut tape = Tape::new();
    let support = tape.constant(Tensor::from_rows(support_embs)?);
    let query = tape.constant(Tensor::vector(query_emb.to_vec()));
    let scores = tape.matvec(support, query)?;
    let weights = tape.softmax(scores)?;
    Ok(tape.value(weights).data().to_vec())
}

fn feature_matrix<'a>(rows: impl ExactSizeIterator<Item = &'a [f64]>, dim: usize) -> Result<Tensor> {
    let n = rows.len();
    let mut data = Vec::with_capacity(n * dim);
    for row in rows {
        if row.len() != dim {
            return Err(Error::Dimension(format!(
                "feature vector has length {}, encoder expects {dim}",
                row.len()
            )));
        }
        data.extend_from_slice(row);
    }
    Tensor::matrix(n, dim, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchingNet {
    pub encoder: EncoderConfig,
    pub similarity: Similarity,
}

impl MatchingNet {
    pub fn new(encoder: EncoderConfig) -> Self {
        Self {
            encoder,
            similarity: Similarity::Dot,
        }
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count()
    }

    /// `[n_queries, n_classes]` class probabilities as a differentiable node.
    pub fn class_probs(
        &self,
        tape: &mut Tape,
        theta: NodeId,
        support: &[Item],
        n_classes: usize,
        queries: &[&[f64]],
    ) -> Result<NodeId> {
        if support.is_empty() {
            return Err(Error::Data("empty support set".into()));
        }
        if queries.is_empty() {
            return Err(Error::Data("no queries to classify".into()));
        }
        if let Some(item) = support.iter().find(|i| i.label >= n_classes) {
            return Err(Error::Data(format!(
                "support item {} has label {} outside {n_classes} classes",
                item.id, item.label
            )));
        }
        let dim = self.encoder.input_dim;
        let graph = self.encoder.bind(tape, theta)?;
        let xs = tape.constant(feature_matrix(support.iter().map(|i| i.features.as_slice()), dim)?);
        let xq = tape.constant(feature_matrix(queries.iter().copied(), dim)?);
        let mut es = graph.embed_g(tape, xs)?;
        let mut eq = graph.embed_f(tape, xq)?;
        if self.similarity == Similarity::Cosine {
            es = tape.row_normalize(es)?;
            eq = tape.row_normalize(eq)?;
        }
        let es_t = tape.transpose(es)?;
        let scores = tape.matmul(eq, es_t)?;
        let weights = tape.softmax(scores)?;
        let mut onehot = vec![0.0; support.len() * n_classes];
        for (r, item) in support.iter().enumerate() {
            onehot[r * n_classes + item.label] = 1.0;
        }
        let labels = tape.constant(Tensor::matrix(support.len(), n_classes, onehot)?);
        tape.matmul(weights, labels)
    }

    /// Mean negative log-likelihood of the batch labels given the support.
    pub fn episode_loss(&self, tape: &mut Tape, theta: NodeId, episode: &Episode) -> Result<NodeId> {
        if episode.batch.is_empty() {
            return Err(Error::Data("episode batch is empty".into()));
        }
        let queries: Vec<&[f64]> = episode.batch.iter().map(|i| i.features.as_slice()).collect();
        let probs = self.class_probs(tape, theta, &episode.support, episode.n_classes(), &queries)?;
        let labels: Vec<usize> = episode.batch.iter().map(|i| i.label).collect();
        tape.neg_log_likelihood(probs, &labels)
    }

    /// Loss value and its gradient at `params`, on a private tape.
    pub fn loss_and_grad(&self, params: &[f64], episode: &Episode) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let theta = tape.input(params.to_vec());
        let loss = self.episode_loss(&mut tape, theta, episode)?;
        let grad = tape.gradient(loss, &[theta])?.remove(0);
        Ok((tape.value(loss).item(), grad.into_data()))
    }

    pub fn loss(&self, params: &[f64], episode: &Episode) -> Result<f64> {
        let mut tape = Tape::new();
        let theta = tape.input(params.to_vec());
        let loss = self.episode_loss(&mut tape, theta, episode)?;
        Ok(tape.value(loss).item())
    }

    pub fn predict_batch(
        &self,
        params: &LearnerParams,
        support: &[Item],
        n_classes: usize,
        queries: &[&[f64]],
    ) -> Result<Vec<ClassDistribution>> {
        let mut tape = Tape::new();
        let theta = tape.input(params.flat().to_vec());
        let probs = self.class_probs(&mut tape, theta, support, n_classes, queries)?;
        Ok(tape
            .value(probs)
            .data()
            .chunks(n_classes)
            .map(|row| ClassDistribution { probs: row.to_vec() })
            .collect())
    }

    pub fn predict(
        &self,
        params: &LearnerParams,
        support: &[Item],
        n_classes: usize,
        query: &[f64],
    ) -> Result<ClassDistribution> {
        Ok(self
            .predict_batch(params, support, n_classes, &[query])?
            .remove(0))
    }

    /// Fraction of batch items whose argmax class is the true class.
    pub fn accuracy(&self, params: &LearnerParams, episode: &Episode) -> Result<f64> {
        if episode.batch.is_empty() {
            return Err(Error::Data("episode batch is empty".into()));
        }
        let queries: Vec<&[f64]> = episode.batch.iter().map(|i| i.features.as_slice()).collect();
        let dists = self.predict_batch(params, &episode.support, episode.n_classes(), &queries)?;
        let correct = dists
            .iter()
            .zip(&episode.batch)
            .filter(|(d, item)| d.argmax() == item.label)
            .count();
        Ok(correct as f64 / episode.batch.len() as f64)
    }
}
