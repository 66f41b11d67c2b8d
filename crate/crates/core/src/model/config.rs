use std::fmt;

use sha2::{Digest, Sha256};

use crate::attention::{JourneyMode, MaskLevel};
use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::operators::{ParamKind, Readout};
use crate::schema::Corpus;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stream {
    Language,
    Structured,
    /// Language queries over structured memory.
    Cross,
}

impl Stream {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "language" => Ok(Stream::Language),
            "structured" => Ok(Stream::Structured),
            "cross" => Ok(Stream::Cross),
            other => Err(Error::Config(format!("unknown stream `{other}`"))),
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stream::Language => "language",
            Stream::Structured => "structured",
            Stream::Cross => "cross",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerGroupConfig {
    pub stream: Stream,
    pub level: MaskLevel,
    pub layers: usize,
    pub positional_transport: bool,
    pub journey_mode: JourneyMode,
}

impl LayerGroupConfig {
    pub fn new(stream: Stream, level: MaskLevel, layers: usize) -> Self {
        Self {
            stream,
            level,
            layers,
            positional_transport: !(stream == Stream::Cross && level == MaskLevel::Global),
            journey_mode: JourneyMode::SlotJourney,
        }
    }

    pub fn with_positional(mut self, on: bool) -> Self {
        self.positional_transport = on;
        self
    }

    pub fn with_mode(mut self, mode: JourneyMode) -> Self {
        self.journey_mode = mode;
        self
    }

    /// `<stream> <level> <layers> [positional|no_positional] [slot_journey|instance_journey]`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut parts = s.split_whitespace();
        let mut next = |what: &str| parts.next().ok_or_else(|| Error::Config(format!("group `{s}` lacks {what}")));
        let stream = Stream::parse(next("a stream")?)?;
        let level = MaskLevel::parse(next("a level")?)?;
        let layers = next("a layer count")?
            .parse()
            .map_err(|_| Error::Config(format!("bad layer count in group `{s}`")))?;
        let mut g = Self::new(stream, level, layers);
        for extra in parts {
            match extra {
                "positional" => g.positional_transport = true,
                "no_positional" => g.positional_transport = false,
                other => g.journey_mode = JourneyMode::parse(other)?,
            }
        }
        Ok(g)
    }
}

impl fmt::Display for LayerGroupConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {}",
            self.stream,
            self.level,
            self.layers,
            if self.positional_transport { "positional" } else { "no_positional" },
            self.journey_mode
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub head_count: usize,
    pub ff_hidden: usize,
    pub readout_hidden: usize,
    pub layer_groups: Vec<LayerGroupConfig>,
    pub slot_kind: ParamKind,
    pub relation_kind: ParamKind,
    pub instance_kind: ParamKind,
    pub readout: Readout,
    /// Items retrieved per query in cross groups; 0 attends to all memory.
    pub retrieval_k: usize,
    pub seed: u64,
    /// Filled from the corpus by [`ModelConfig::bind`].
    pub vocab_size: usize,
    pub slots: Vec<String>,
    pub relations: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        use MaskLevel::*;
        Self {
            d_model: 32,
            head_count: 2,
            ff_hidden: 64,
            readout_hidden: 16,
            layer_groups: vec![
                LayerGroupConfig::new(Stream::Structured, InstanceLocal, 2),
                LayerGroupConfig::new(Stream::Structured, Neighborhood, 1).with_mode(JourneyMode::InstanceJourney),
                LayerGroupConfig::new(Stream::Language, InstanceLocal, 2),
                LayerGroupConfig::new(Stream::Cross, Global, 1),
                LayerGroupConfig::new(Stream::Language, Global, 1),
            ],
            slot_kind: ParamKind::Rotation,
            relation_kind: ParamKind::Rotation,
            instance_kind: ParamKind::Rotation,
            readout: Readout::MeanPool,
            retrieval_k: 8,
            seed: 0,
            vocab_size: 0,
            slots: Vec::new(),
            relations: Vec::new(),
        }
    }
}

fn readout_name(r: Readout) -> &'static str {
    match r {
        Readout::MeanPool => "mean",
        Readout::AttentionPool => "attention",
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.head_count.max(1)
    }

    /// Copies vocabulary size, named slots and relations from `corpus`.
    pub fn bind(mut self, corpus: &Corpus) -> Self {
        self.vocab_size = corpus.vocabulary.len();
        self.slots = corpus.named_slots();
        self.relations = corpus.relations.clone();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_count == 0 || self.d_model % self.head_count != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by head count {}",
                self.d_model, self.head_count
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!("head dimension {} must be even", self.head_dim())));
        }
        if self.layer_groups.is_empty() {
            return Err(Error::Config("at least one layer group is required".into()));
        }
        if let Some(g) = self.layer_groups.iter().find(|g| g.layers == 0) {
            return Err(Error::Config(format!("layer group `{g}` has no layers")));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocabulary is empty; bind the config to a corpus".into()));
        }
        if self.ff_hidden == 0 || self.readout_hidden == 0 {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        Ok(())
    }

    /// Reads model keys from `kv`, starting from the defaults.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let mut c = Self::default();
        c.d_model = kv.take_or("d_model", c.d_model)?;
        c.head_count = kv.take_or("heads", c.head_count)?;
        c.ff_hidden = kv.take_or("ff_hidden", c.ff_hidden)?;
        c.readout_hidden = kv.take_or("readout_hidden", c.readout_hidden)?;
        c.retrieval_k = kv.take_or("retrieval_k", c.retrieval_k)?;
        c.seed = kv.take_or("seed", c.seed)?;
        if let Some(s) = kv.take::<String>("slot_operator")? {
            c.slot_kind = ParamKind::parse(&s)?;
        }
        if let Some(s) = kv.take::<String>("relation_operator")? {
            c.relation_kind = ParamKind::parse(&s)?;
        }
        if let Some(s) = kv.take::<String>("instance_operator")? {
            c.instance_kind = ParamKind::parse(&s)?;
        }
        if let Some(s) = kv.take::<String>("readout")? {
            c.readout = match s.as_str() {
                "mean" => Readout::MeanPool,
                "attention" => Readout::AttentionPool,
                other => return Err(Error::Config(format!("unknown readout `{other}`"))),
            };
        }
        let groups = kv.take_all("group");
        if !groups.is_empty() {
            c.layer_groups = groups
                .iter()
                .map(|(line, g)| {
                    LayerGroupConfig::parse(g).map_err(|e| Error::Parse {
                        line: *line,
                        message: e.to_string(),
                    })
                })
                .collect::<Result<_>>()?;
        }
        Ok(c)
    }

    /// Canonical text form; also the input to [`ModelConfig::hash`].
    pub fn to_key_values(&self) -> String {
        let mut s = format!(
            "d_model = {}\nheads = {}\nff_hidden = {}\nreadout_hidden = {}\nretrieval_k = {}\nseed = {}\n\
             slot_operator = {}\nrelation_operator = {}\ninstance_operator = {}\nreadout = {}\n",
            self.d_model,
            self.head_count,
            self.ff_hidden,
            self.readout_hidden,
            self.retrieval_k,
            self.seed,
            self.slot_kind,
            self.relation_kind,
            self.instance_kind,
            readout_name(self.readout),
        );
        for g in &self.layer_groups {
            s.push_str(&format!("group = {g}\n"));
        }
        s
    }

    /// Hash of the full architecture, including corpus-bound fields.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.to_key_values().as_bytes());
        h.update(format!("vocab_size = {}\n", self.vocab_size).as_bytes());
        for s in &self.slots {
            h.update(format!("slot = {s}\n").as_bytes());
        }
        for r in &self.relations {
            h.update(format!("relation = {r}\n").as_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_text() {
        let c = ModelConfig::default();
        let mut kv = KeyValues::parse(&c.to_key_values()).unwrap();
        let back = ModelConfig::from_kv(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, c);
        assert_eq!(c.layer_groups.len(), 5);
        assert!(!c.layer_groups[3].positional_transport);
    }

    #[test]
    fn validation() {
        let mut c = ModelConfig {
            vocab_size: 10,
            ..Default::default()
        };
        c.validate().unwrap();
        c.layer_groups.clear();
        assert!(c.validate().is_err());
        let c = ModelConfig {
            vocab_size: 10,
            d_model: 18,
            head_count: 2,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn hash_tracks_binding() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.relations.push("r".into());
        assert_ne!(a.hash(), b.hash());
    }
}
