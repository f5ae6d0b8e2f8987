use super::{PairWeight, RetrievalResult, Retriever, SimilarityConfig, SimilarityMode};
use crate::corpus::{Corpus, ExampleRecord, Modality};
use crate::error::{Error, Result};

/// Two-stage retriever: a visual shortlist re-ranked by text similarity.
pub struct Mmices<'m> {
    visual: Retriever<'m>,
    text_to_text: Retriever<'m>,
    image_to_text: Retriever<'m>,
}

impl<'m> Mmices<'m> {
    pub fn new(memory: &'m Corpus) -> Result<Self> {
        Ok(Self {
            visual: Retriever::new(memory, SimilarityConfig::new(SimilarityMode::Qimi))?,
            text_to_text: Retriever::new(memory, SimilarityConfig::new(SimilarityMode::Qtmt))?,
            image_to_text: Retriever::new(
                memory,
                SimilarityConfig::custom(vec![PairWeight::new(Modality::Image, Modality::Text, 1.0)]),
            )?,
        })
    }

    /// Stage 1 keeps the `n_visual` nearest images; stage 2 returns the `k` best
    /// survivors by query text (or, lacking text, query image) against memory text.
    pub fn retrieve(
        &self,
        query: &ExampleRecord,
        query_corpus: &Corpus,
        n_visual: usize,
        k: usize,
        exclude_self: bool,
    ) -> Result<RetrievalResult> {
        if k == 0 || n_visual < k {
            return Err(Error::InvalidArgument(format!(
                "need 1 <= k <= n_visual, got k={k}, n_visual={n_visual}"
            )));
        }
        let stage1 = self.visual.topk(query, query_corpus, n_visual, exclude_self)?;
        let rerank = if query_corpus.embedding(query, Modality::Text).is_some() {
            &self.text_to_text
        } else {
            &self.image_to_text
        };
        let q = rerank.query_vectors(query, query_corpus)?;
        let index = rerank.memory().index_by_id();
        let survivors = stage1.ranked.iter().map(|c| index[c.id.as_str()]);
        Ok(rerank.rank_indices(&q, survivors.collect::<Vec<_>>(), k))
    }
}

/// One-shot convenience wrapper around [`Mmices`]; self-exclusion applies when
/// `query_corpus` and `memory` are the same object.
pub fn mmices_retrieve(
    query: &ExampleRecord,
    query_corpus: &Corpus,
    memory: &Corpus,
    n_visual: usize,
    k: usize,
) -> Result<RetrievalResult> {
    let exclude_self = std::ptr::eq(query_corpus, memory);
    Mmices::new(memory)?.retrieve(query, query_corpus, n_visual, k, exclude_self)
}
