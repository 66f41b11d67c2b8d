//! Multi-task objectives, the optimiser, synthetic data and evaluation.
//!
//! Facts and sentences are trained jointly: masked modelling on both
//! streams, link prediction on facts, recovery of swapped role fillers, and
//! a contrastive alignment between entity mentions and fact tokens.

mod batch;
mod losses;
mod objective;
mod optim;
mod synthetic;
mod train;

pub use batch::{
    lp_query_for, make_batch, mask_relation, AlignmentPair, InstancePool, LpQuery, MlmTarget, RcCorruption, SpanRef, TokenRef,
    TrainingBatch,
};
pub use losses::{
    alignment_loss, argmax_rows, knn_interpolated_distribution, link_prediction_loss, lp_scores, mlm_loss,
    random_mrr, rank_metrics, rank_of, role_consistency_loss, AlignGroup, KnnDistribution, LpScoreInput, RankMetrics,
};
pub use objective::{memory_for, objective, ObjectiveTerms};
pub use optim::{Adam, AdamConfig};
pub use synthetic::{derive_facts, gen_synthetic, split_triples, CompositionRule, GeneratorConfig, HELDOUT};
pub use train::{
    evaluate, gradient_check, metrics_csv, train, train_with, EvalReport, GradCheckEntry, StepMetrics, TrainOutcome,
    METRICS_HEADER,
};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Non-negative weight of each objective term in the total loss. The kNN
/// weight is the interpolation weight used at evaluation; it never enters
/// the training loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveWeights {
    pub mlm: f64,
    pub lp: f64,
    pub rc: f64,
    pub align: f64,
    pub knn: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            mlm: 1.0,
            lp: 1.0,
            rc: 1.0,
            align: 0.5,
            knn: 0.0,
        }
    }
}

impl ObjectiveWeights {
    pub fn only_mlm() -> Self {
        Self {
            mlm: 1.0,
            lp: 0.0,
            rc: 0.0,
            align: 0.0,
            knn: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.mlm, self.lp, self.rc, self.align, self.knn];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("objective weights must be finite and non-negative: {self:?}")));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one objective weight must be positive".into()));
        }
        Ok(())
    }
}

/// Everything `train` needs besides the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: ObjectiveWeights,
    pub adam: AdamConfig,
    pub steps: usize,
    /// Share of tokens picked for masked modelling.
    pub mask_rate: f64,
    /// Share of facts per batch turned into link queries.
    pub lp_rate: f64,
    /// Share of facts per batch offered for role swaps.
    pub rc_rate: f64,
    pub align_negatives: usize,
    pub align_temperature: f64,
    pub knn_temperature: f64,
    pub knn_k: usize,
    /// Facts per batch; 0 takes all.
    pub batch_facts: usize,
    /// Sentences per batch; 0 takes all.
    pub batch_sentences: usize,
    /// Reuse the first batch (and its masks) at every step.
    pub fixed_batch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            weights: ObjectiveWeights::default(),
            adam: AdamConfig::default(),
            steps: 200,
            mask_rate: 0.15,
            lp_rate: 0.3,
            rc_rate: 0.2,
            align_negatives: 4,
            align_temperature: 0.1,
            knn_temperature: 1.0,
            knn_k: 8,
            batch_facts: 0,
            batch_sentences: 0,
            fixed_batch: false,
        }
    }
}

impl TrainConfig {
    /// Reads model and training keys; unknown keys are an error.
    pub fn from_kv(mut kv: KeyValues) -> Result<Self> {
        let mut c = Self {
            model: ModelConfig::from_kv(&mut kv)?,
            ..Self::default()
        };
        c.steps = kv.take_or("steps", c.steps)?;
        c.adam.lr = kv.take_or("lr", c.adam.lr)?;
        c.adam.beta1 = kv.take_or("beta1", c.adam.beta1)?;
        c.adam.beta2 = kv.take_or("beta2", c.adam.beta2)?;
        c.adam.eps = kv.take_or("eps", c.adam.eps)?;
        c.adam.warmup = kv.take_or("warmup", c.adam.warmup)?;
        c.weights.mlm = kv.take_or("lambda_mlm", c.weights.mlm)?;
        c.weights.lp = kv.take_or("lambda_lp", c.weights.lp)?;
        c.weights.rc = kv.take_or("lambda_rc", c.weights.rc)?;
        c.weights.align = kv.take_or("lambda_align", c.weights.align)?;
        c.weights.knn = kv.take_or("lambda_knn", c.weights.knn)?;
        c.mask_rate = kv.take_or("mask_rate", c.mask_rate)?;
        c.lp_rate = kv.take_or("lp_rate", c.lp_rate)?;
        c.rc_rate = kv.take_or("rc_rate", c.rc_rate)?;
        c.align_negatives = kv.take_or("align_negatives", c.align_negatives)?;
        c.align_temperature = kv.take_or("align_temperature", c.align_temperature)?;
        c.knn_temperature = kv.take_or("knn_temperature", c.knn_temperature)?;
        c.knn_k = kv.take_or("knn_k", c.knn_k)?;
        c.batch_facts = kv.take_or("batch_facts", c.batch_facts)?;
        c.batch_sentences = kv.take_or("batch_sentences", c.batch_sentences)?;
        c.fixed_batch = kv.take_or("fixed_batch", c.fixed_batch)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(KeyValues::parse(text)?)
    }

    /// Canonical text form, readable by [`TrainConfig::parse`].
    pub fn to_key_values(&self) -> String {
        let w = &self.weights;
        let a = &self.adam;
        format!(
            "{}steps = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\neps = {}\nwarmup = {}\n\
             lambda_mlm = {}\nlambda_lp = {}\nlambda_rc = {}\nlambda_align = {}\nlambda_knn = {}\n\
             mask_rate = {}\nlp_rate = {}\nrc_rate = {}\nalign_negatives = {}\nalign_temperature = {}\n\
             knn_temperature = {}\nknn_k = {}\nbatch_facts = {}\nbatch_sentences = {}\nfixed_batch = {}\n",
            self.model.to_key_values(),
            self.steps,
            a.lr,
            a.beta1,
            a.beta2,
            a.eps,
            a.warmup,
            w.mlm,
            w.lp,
            w.rc,
            w.align,
            w.knn,
            self.mask_rate,
            self.lp_rate,
            self.rc_rate,
            self.align_negatives,
            self.align_temperature,
            self.knn_temperature,
            self.knn_k,
            self.batch_facts,
            self.batch_sentences,
            self.fixed_batch,
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        for (name, v) in [("mask_rate", self.mask_rate), ("lp_rate", self.lp_rate), ("rc_rate", self.rc_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.lp_rate + self.rc_rate > 1.0 {
            return Err(Error::Config("lp_rate + rc_rate must not exceed 1".into()));
        }
        if self.align_temperature <= 0.0 || self.knn_temperature <= 0.0 {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if self.adam.lr <= 0.0 || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("optimiser settings out of range".into()));
        }
        Ok(())
    }
}
