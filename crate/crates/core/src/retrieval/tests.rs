use std::collections::BTreeMap;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::{EmbeddingMatrix, ExampleRecord};
use crate::synthetic::random_corpus;

fn corpus_from(rows: &[(&str, Vec<f32>, Vec<f32>)]) -> Corpus {
    let dim = rows[0].1.len();
    let image = rows.iter().map(|(id, i, _)| (format!("img-{id}"), i.clone()));
    let text = rows.iter().map(|(id, _, t)| (id.to_string(), t.clone()));
    Corpus {
        records: rows
            .iter()
            .map(|(id, _, _)| ExampleRecord::captioning(*id, format!("img-{id}"), format!("caption {id}")))
            .collect(),
        image_embeddings: Some(EmbeddingMatrix::from_rows(Modality::Image, dim, image, None).unwrap()),
        text_embeddings: Some(EmbeddingMatrix::from_rows(Modality::Text, dim, text, None).unwrap()),
        metadata: BTreeMap::new(),
    }
}

fn scalar_cosine(a: &[f32], b: &[f32]) -> f64 {
    let mut ab = 0.0f64;
    let mut aa = 0.0f64;
    let mut bb = 0.0f64;
    for i in 0..a.len() {
        ab += a[i] as f64 * b[i] as f64;
        aa += a[i] as f64 * a[i] as f64;
        bb += b[i] as f64 * b[i] as f64;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Scores every memory item through the per-pair public function and fully sorts.
fn brute_force(query: &ExampleRecord, qc: &Corpus, memory: &Corpus, cfg: &SimilarityConfig, k: usize, exclude_self: bool) -> Vec<(String, f64)> {
    let mut all: Vec<(String, f64)> = memory
        .records
        .iter()
        .filter(|m| !(exclude_self && m.id == query.id))
        .map(|m| (m.id.clone(), fused_similarity(query, qc, m, memory, cfg).unwrap()))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn pairs(r: &RetrievalResult) -> Vec<(String, f64)> {
    r.ranked.iter().map(|c| (c.id.clone(), c.score)).collect()
}

#[test]
fn mode_expansion() {
    use Modality::*;
    assert_eq!(SimilarityMode::Qimi.pairs(), vec![PairWeight::new(Image, Image, 1.0)]);
    assert_eq!(SimilarityMode::Qtmt.pairs(), vec![PairWeight::new(Text, Text, 1.0)]);
    assert_eq!(
        SimilarityMode::Qimit.pairs(),
        vec![PairWeight::new(Image, Image, 1.0), PairWeight::new(Image, Text, 1.0)]
    );
}

#[test]
fn qimit_of_identical_unit_rows_is_two() {
    let v = vec![0.6, 0.8, 0.0];
    let c = corpus_from(&[("q", v.clone(), v.clone()), ("m", v.clone(), v.clone())]);
    let s = fused_similarity(&c.records[0], &c, &c.records[1], &c, &SimilarityConfig::new(SimilarityMode::Qimit)).unwrap();
    assert!((s - 2.0).abs() < 1e-6, "{s}");
}

#[test]
fn qimi_of_orthogonal_rows_is_zero() {
    let c = corpus_from(&[("q", vec![1.0, 0.0], vec![1.0, 0.0]), ("m", vec![0.0, 1.0], vec![1.0, 0.0])]);
    let s = fused_similarity(&c.records[0], &c, &c.records[1], &c, &SimilarityConfig::new(SimilarityMode::Qimi)).unwrap();
    assert_eq!(s, 0.0);
}

#[test]
fn qimit_matches_scalar_cosine_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let c = random_corpus(&mut rng, 40, 4, 0);
    let cfg = SimilarityConfig::new(SimilarityMode::Qimit);
    let img = c.image_embeddings.as_ref().unwrap();
    let txt = c.text_embeddings.as_ref().unwrap();
    for q in &c.records[..10] {
        for m in &c.records {
            let got = fused_similarity(q, &c, m, &c, &cfg).unwrap();
            let qi = img.row(q.image_key.as_ref().unwrap()).unwrap();
            let want = scalar_cosine(qi, img.row(m.image_key.as_ref().unwrap()).unwrap())
                + scalar_cosine(qi, txt.row(&m.id).unwrap());
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }
}

#[test]
fn missing_modality_is_an_error() {
    let mut c = corpus_from(&[("q", vec![1.0, 0.0], vec![1.0, 0.0])]);
    c.text_embeddings = None;
    let err = fused_similarity(&c.records[0], &c, &c.records[0], &c, &SimilarityConfig::new(SimilarityMode::Qtmt)).unwrap_err();
    assert!(matches!(err, Error::UnresolvedModality { .. }));
}

#[test]
fn duplicate_of_query_ranks_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let memory = random_corpus(&mut rng, 30, 8, 0);
    let queries = random_corpus(&mut rng, 1, 8, 0);
    let q = &queries.records[0];
    let mut memory = memory;
    let qrow = queries.image_embeddings.as_ref().unwrap().row_at(0).to_vec();
    let img = memory.image_embeddings.take().unwrap();
    let mut rows: Vec<(String, Vec<f32>)> = img.iter().map(|(k, r)| (k.to_string(), r.to_vec())).collect();
    rows.push(("zz-dup".into(), qrow));
    memory.image_embeddings = Some(EmbeddingMatrix::from_rows(Modality::Image, 8, rows, None).unwrap());
    memory.records.push(ExampleRecord::captioning("zz", "zz-dup", "dup"));
    let txt = memory.text_embeddings.take().unwrap();
    let mut trows: Vec<(String, Vec<f32>)> = txt.iter().map(|(k, r)| (k.to_string(), r.to_vec())).collect();
    trows.push(("zz".into(), vec![1.0; 8]));
    memory.text_embeddings = Some(EmbeddingMatrix::from_rows(Modality::Text, 8, trows, None).unwrap());

    let r = retrieve_topk(q, &queries, &memory, &SimilarityConfig::new(SimilarityMode::Qimi), 3).unwrap();
    assert_eq!(r.ranked[0].id, "zz");
    assert!((r.ranked[0].score - 1.0).abs() < 1e-6);
}

#[test]
fn k_is_clamped_to_memory_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let memory = random_corpus(&mut rng, 5, 4, 0);
    let queries = random_corpus(&mut rng, 1, 4, 0);
    let r = retrieve_topk(&queries.records[0], &queries, &memory, &SimilarityConfig::new(SimilarityMode::Qimit), 50).unwrap();
    assert_eq!(r.ranked.len(), 5);
}

#[test]
fn empty_memory_is_an_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let queries = random_corpus(&mut rng, 1, 4, 0);
    let memory = Corpus::default();
    let err = retrieve_topk(&queries.records[0], &queries, &memory, &SimilarityConfig::new(SimilarityMode::Qimi), 1).unwrap_err();
    assert!(matches!(err, Error::EmptyMemory));
}

#[test]
fn topk_equals_full_sort_on_200_items() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let memory = random_corpus(&mut rng, 200, 16, 9);
    let queries = random_corpus(&mut rng, 5, 16, 0);
    for mode in [SimilarityMode::Qimi, SimilarityMode::Qimit] {
        let cfg = SimilarityConfig::new(mode);
        for q in &queries.records {
            let got = retrieve_topk(q, &queries, &memory, &cfg, 7).unwrap();
            assert_eq!(pairs(&got), brute_force(q, &queries, &memory, &cfg, 7, false));
        }
    }
}

#[test]
fn ties_break_by_ascending_id() {
    let v = vec![1.0, 0.0];
    let c = corpus_from(&[("q", v.clone(), v.clone()), ("b", v.clone(), v.clone()), ("a", v.clone(), v.clone()), ("c", v.clone(), v.clone())]);
    let r = retrieve_topk(&c.records[0], &c, &c, &SimilarityConfig::new(SimilarityMode::Qimi), 3).unwrap();
    assert_eq!(r.ids(), vec!["a", "b", "c"]);
}

#[test]
fn shortlist_of_three_records_has_two_each() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = random_corpus(&mut rng, 3, 4, 0);
    let s = shortlist_candidates(&c, &SimilarityConfig::new(SimilarityMode::Qimit), 50).unwrap();
    assert_eq!(s.warnings.len(), 1);
    for r in &s.results {
        assert_eq!(r.ranked.len(), 2);
        assert!(!r.ids().contains(&r.query_id.as_str()));
    }
}

#[test]
fn shortlist_twin_is_rank_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Every 4th record shares its predecessor's image.
    let c = random_corpus(&mut rng, 40, 8, 4);
    let s = shortlist_candidates(&c, &SimilarityConfig::new(SimilarityMode::Qimi), 10).unwrap();
    let map = s.as_map();
    assert_eq!(map["r0004"][0], "r0003");
    assert_eq!(map["r0003"][0], "r0004");
}

#[test]
fn shortlists_equal_brute_force_on_500_items() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let c = random_corpus(&mut rng, 500, 16, 0);
    let cfg = SimilarityConfig::new(SimilarityMode::Qimit);
    let s = shortlist_candidates(&c, &cfg, 50).unwrap();
    assert_eq!(s.results.len(), 500);
    for (q, r) in c.records.iter().zip(&s.results).step_by(25) {
        assert_eq!(pairs(r), brute_force(q, &c, &c, &cfg, 50, true));
    }
}

#[test]
fn mmices_degenerate_stages() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let memory = random_corpus(&mut rng, 60, 8, 0);
    let queries = random_corpus(&mut rng, 4, 8, 0);
    let qtmt = SimilarityConfig::new(SimilarityMode::Qtmt);
    let qimi = SimilarityConfig::new(SimilarityMode::Qimi);
    for q in &queries.records {
        let whole = mmices_retrieve(q, &queries, &memory, 60, 5).unwrap();
        assert_eq!(whole, retrieve_topk(q, &queries, &memory, &qtmt, 5).unwrap());

        let same = mmices_retrieve(q, &queries, &memory, 6, 6).unwrap();
        let visual = retrieve_topk(q, &queries, &memory, &qimi, 6).unwrap();
        let mut a = same.ids();
        let mut b = visual.ids();
        a.sort();
        b.sort();
        assert_eq!(a, b);
    }
}

#[test]
fn mmices_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let memory = random_corpus(&mut rng, 300, 12, 7);
    let mut queries = random_corpus(&mut rng, 6, 12, 0);
    // Half the queries lose their text, forcing the image-to-text fallback.
    for r in queries.records.iter_mut().skip(3) {
        r.text = None;
    }
    let qimi = SimilarityConfig::new(SimilarityMode::Qimi);
    for q in &queries.records {
        let stage1 = brute_force(q, &queries, &memory, &qimi, 50, false);
        let second = if q.text.is_some() {
            SimilarityConfig::new(SimilarityMode::Qtmt)
        } else {
            SimilarityConfig::custom(vec![PairWeight::new(Modality::Image, Modality::Text, 1.0)])
        };
        let mut rescored: Vec<(String, f64)> = stage1
            .iter()
            .map(|(id, _)| (id.clone(), fused_similarity(q, &queries, memory.get(id).unwrap(), &memory, &second).unwrap()))
            .collect();
        rescored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        rescored.truncate(4);
        assert_eq!(pairs(&mmices_retrieve(q, &queries, &memory, 50, 4).unwrap()), rescored);
    }
}

#[test]
fn identity_adapter_matches_unsupervised_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let memory = random_corpus(&mut rng, 120, 16, 5);
    let queries = random_corpus(&mut rng, 10, 16, 0);
    let adapter = Arc::new(ProjectionAdapter::identity(16));
    for mode in [SimilarityMode::Qimi, SimilarityMode::Qtmt, SimilarityMode::Qimit, SimilarityMode::Qitmit] {
        let plain = Retriever::new(&memory, SimilarityConfig::new(mode)).unwrap();
        let projected = Retriever::new(&memory, SimilarityConfig::new(mode).with_adapter(adapter.clone())).unwrap();
        let a = plain.topk_all(&queries, 10, false).unwrap();
        let b = projected.topk_all(&queries, 10, false).unwrap();
        assert_eq!(crate::io::to_jsonl(&a).unwrap(), crate::io::to_jsonl(&b).unwrap());
    }
}

#[test]
fn results_serialize_as_jsonl() {
    let r = RetrievalResult {
        query_id: "q".into(),
        ranked: vec![ScoredCandidate { id: "a".into(), score: 0.5 }],
    };
    let line = String::from_utf8(crate::io::to_jsonl(&[r]).unwrap()).unwrap();
    assert_eq!(line, "{\"query_id\":\"q\",\"ranked\":[{\"id\":\"a\",\"score\":0.5}]}\n");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn positive_scaling_preserves_rankings(seed in any::<u64>(), scale in 0.01f32..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let memory = random_corpus(&mut rng, 50, 8, 0);
        let queries = random_corpus(&mut rng, 3, 8, 0);
        let scaled = |c: &Corpus| -> Corpus {
            let scale_m = |m: &EmbeddingMatrix| EmbeddingMatrix::new(
                m.modality(), m.dim(), m.keys().to_vec(),
                m.as_slice().iter().map(|v| v * scale).collect(), None).unwrap();
            Corpus {
                image_embeddings: c.image_embeddings.as_ref().map(scale_m),
                text_embeddings: c.text_embeddings.as_ref().map(scale_m),
                ..c.clone()
            }.l2_normalized().unwrap()
        };
        let (m2, q2) = (scaled(&memory), scaled(&queries));
        let (m1, q1) = (memory.l2_normalized().unwrap(), queries.l2_normalized().unwrap());
        for mode in [SimilarityMode::Qimi, SimilarityMode::Qimit] {
            let a = Retriever::new(&m1, SimilarityConfig::new(mode)).unwrap().topk_all(&q1, 10, false).unwrap();
            let b = Retriever::new(&m2, SimilarityConfig::new(mode)).unwrap().topk_all(&q2, 10, false).unwrap();
            let ids = |rs: &Vec<RetrievalResult>| rs.iter().map(|r| r.ids().join(",")).collect::<Vec<_>>();
            prop_assert_eq!(ids(&a), ids(&b));
        }
    }

    #[test]
    fn results_are_sorted_and_unique(seed in any::<u64>(), k in 1usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let memory = random_corpus(&mut rng, 30, 6, 3);
        let r = Retriever::new(&memory, SimilarityConfig::new(SimilarityMode::Qimit)).unwrap()
            .topk(&memory.records[0], &memory, k, true).unwrap();
        prop_assert_eq!(r.ranked.len(), k.min(29));
        for w in r.ranked.windows(2) {
            prop_assert!(rank_order(w[0].score, &w[0].id, w[1].score, &w[1].id) == std::cmp::Ordering::Less);
        }
    }
}
