use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classes::{QuestionType, SEEN_PARAPHRASES};
use super::corpus::{Corpus, Split};
use crate::{Error, Result};

/// Which paraphrase templates an episode may draw.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParaphrasePool {
    #[default]
    All,
    Seen,
    Unseen,
}

impl ParaphrasePool {
    pub fn admits(self, paraphrase_id: usize) -> bool {
        match self {
            ParaphrasePool::All => true,
            ParaphrasePool::Seen => paraphrase_id < SEEN_PARAPHRASES,
            ParaphrasePool::Unseen => paraphrase_id >= SEEN_PARAPHRASES,
        }
    }
}

/// N ways, K shots, M_q queries per class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
}

impl EpisodeSpec {
    pub fn new(n_way: usize, k_shot: usize, q_query: usize) -> Result<Self> {
        if n_way == 0 || k_shot == 0 {
            return Err(Error::Sampling("ways and shots must be positive".into()));
        }
        if q_query <= k_shot {
            return Err(Error::Sampling(format!("query size {q_query} must exceed shots {k_shot}")));
        }
        Ok(Self { n_way, k_shot, q_query })
    }
}

/// Triplet indices of one task; `support` and `query` are class-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Draws episodes from one side of the split. All preconditions are
/// checked once, at construction.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    spec: EpisodeSpec,
    pools: BTreeMap<usize, Vec<usize>>,
}

impl EpisodeSampler {
    pub fn new(
        corpus: &Corpus,
        split: Split,
        question_type: Option<QuestionType>,
        paraphrases: ParaphrasePool,
        spec: EpisodeSpec,
    ) -> Result<Self> {
        EpisodeSpec::new(spec.n_way, spec.k_shot, spec.q_query)?;
        let mut pools: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &cid in corpus.manifest.side(split) {
            let cls = corpus.class(cid)?;
            if question_type.is_some_and(|q| q != cls.question_type) {
                continue;
            }
            pools.insert(cid, Vec::new());
        }
        for (i, t) in corpus.triplets.iter().enumerate() {
            if paraphrases.admits(t.paraphrase_id) {
                if let Some(pool) = pools.get_mut(&t.class_id) {
                    pool.push(i);
                }
            }
        }
        if pools.len() < spec.n_way {
            return Err(Error::Sampling(format!(
                "{}-way episodes need {} classes, split has {}",
                spec.n_way,
                spec.n_way,
                pools.len()
            )));
        }
        let need = spec.k_shot + spec.q_query;
        if let Some((cid, pool)) = pools.iter().find(|(_, p)| p.len() < need) {
            return Err(Error::Sampling(format!(
                "class {cid} has {} eligible records, {need} needed",
                pool.len()
            )));
        }
        Ok(Self { spec, pools })
    }

    pub fn spec(&self) -> EpisodeSpec {
        self.spec
    }

    pub fn classes(&self) -> Vec<usize> {
        self.pools.keys().copied().collect()
    }

    pub fn sample(&self, seed: u64) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<usize> = self.pools.keys().copied().collect();
        let classes: Vec<usize> = ids.choose_multiple(&mut rng, self.spec.n_way).copied().collect();
        let mut support = Vec::with_capacity(self.spec.n_way * self.spec.k_shot);
        let mut query = Vec::with_capacity(self.spec.n_way * self.spec.q_query);
        for cid in &classes {
            let mut pool = self.pools[cid].clone();
            pool.shuffle(&mut rng);
            support.extend_from_slice(&pool[..self.spec.k_shot]);
            query.extend_from_slice(&pool[self.spec.k_shot..self.spec.k_shot + self.spec.q_query]);
        }
        Episode { classes, support, query }
    }
}

pub fn sample_episode(corpus: &Corpus, split: Split, spec: EpisodeSpec, seed: u64) -> Result<Episode> {
    Ok(EpisodeSampler::new(corpus, split, None, ParaphrasePool::All, spec)?.sample(seed))
}
