//! Retrieval of the `m` in-context examples for a state, with optional
//! label balancing.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashSet};

use crate::dataset::{Record, RetrievalField};
use crate::encoder::{cosine_similarity, Embedding, EncoderBackend};
use crate::error::{PoemError, Result};

/// One in-context candidate together with the embedding of its retrieval text.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub index: u64,
    pub fields: BTreeMap<String, String>,
    pub label: Option<String>,
    pub embedding: Embedding,
}

impl Example {
    pub fn from_record(record: Record, embedding: Embedding) -> Self {
        Example {
            index: record.index,
            fields: record.fields,
            label: record.label,
            embedding,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InContextSet {
    examples: Vec<Example>,
    retrieval_field: RetrievalField,
    label_space: Option<Vec<String>>,
}

impl InContextSet {
    pub fn new(
        examples: Vec<Example>,
        retrieval_field: RetrievalField,
        label_space: Option<Vec<String>>,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for ex in &examples {
            if !seen.insert(ex.index) {
                return Err(PoemError::invalid(format!(
                    "duplicate in-context index {}",
                    ex.index
                )));
            }
        }
        if let Some(first) = examples.first() {
            if let Some(bad) = examples
                .iter()
                .find(|e| e.embedding.dim() != first.embedding.dim())
            {
                return Err(PoemError::invalid(format!(
                    "example {} has embedding dim {}, expected {}",
                    bad.index,
                    bad.embedding.dim(),
                    first.embedding.dim()
                )));
            }
        }
        let label_space = label_space.map(|labels| {
            let set: BTreeSet<String> = labels.into_iter().collect();
            set.into_iter().collect::<Vec<_>>()
        });
        if let Some(space) = &label_space {
            for ex in &examples {
                match &ex.label {
                    Some(l) if space.binary_search(l).is_ok() => {}
                    Some(l) => {
                        return Err(PoemError::invalid(format!(
                            "example {} has label `{l}` outside the label space",
                            ex.index
                        )))
                    }
                    None => {
                        return Err(PoemError::invalid(format!(
                            "example {} has no label but a label space is configured",
                            ex.index
                        )))
                    }
                }
            }
        }
        Ok(InContextSet {
            examples,
            retrieval_field,
            label_space,
        })
    }

    /// Embeds every record's retrieval text and builds the set.
    pub fn from_records<B: EncoderBackend + ?Sized>(
        records: Vec<Record>,
        retrieval_field: RetrievalField,
        label_space: Option<Vec<String>>,
        encoder: &B,
    ) -> Result<Self> {
        let texts = records
            .iter()
            .map(|r| retrieval_field.text(r))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let embeddings = encoder.encode(&refs)?;
        if embeddings.len() != records.len() {
            return Err(PoemError::Protocol {
                backend: encoder.id().to_string(),
                detail: format!(
                    "expected {} embeddings, got {}",
                    records.len(),
                    embeddings.len()
                ),
            });
        }
        let examples = records
            .into_iter()
            .zip(embeddings)
            .map(|(r, e)| Example::from_record(r, e))
            .collect();
        InContextSet::new(examples, retrieval_field, label_space)
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn retrieval_field(&self) -> &RetrievalField {
        &self.retrieval_field
    }

    /// Sorted, de-duplicated label space, if balancing is configured.
    pub fn label_space(&self) -> Option<&[String]> {
        self.label_space.as_deref()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

struct Scored<'a> {
    sim: f64,
    example: &'a Example,
}

fn closer(a: &Scored<'_>, b: &Scored<'_>) -> Ordering {
    b.sim
        .total_cmp(&a.sim)
        .then_with(|| a.example.index.cmp(&b.example.index))
}

/// Returns the `m` examples for `state`, sorted by descending similarity
/// (ties by ascending index). Position 0 is rank 1.
pub fn select_examples(state: &Embedding, ic: &InContextSet, m: usize) -> Result<Vec<Example>> {
    if m == 0 {
        return Ok(Vec::new());
    }
    if m > ic.len() {
        return Err(PoemError::InsufficientExamples {
            available: ic.len(),
            required: m,
        });
    }
    let mut ranked = ic
        .examples
        .iter()
        .map(|example| {
            Ok(Scored {
                sim: cosine_similarity(state, &example.embedding)?,
                example,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(closer);

    let mut chosen: Vec<usize> = match ic.label_space() {
        None => (0..m).collect(),
        Some(labels) => balanced(&ranked, labels, m)?,
    };
    chosen.sort_unstable();
    Ok(chosen
        .into_iter()
        .map(|i| ranked[i].example.clone())
        .collect())
}

// Indices into `ranked`, which is already in closest-first order.
fn balanced(ranked: &[Scored<'_>], labels: &[String], m: usize) -> Result<Vec<usize>> {
    let g = labels.len();
    let members: Vec<Vec<usize>> = labels
        .iter()
        .map(|label| {
            ranked
                .iter()
                .enumerate()
                .filter(|(_, s)| s.example.label.as_deref() == Some(label.as_str()))
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let per_label = m / g;
    for (label, ids) in labels.iter().zip(&members) {
        if ids.len() < per_label {
            return Err(PoemError::InsufficientLabel {
                label: label.clone(),
                available: ids.len(),
                required: per_label,
            });
        }
    }

    let mut used = vec![false; ranked.len()];
    let mut chosen = Vec::with_capacity(m);
    if g < m {
        for ids in &members {
            for &i in &ids[..per_label] {
                used[i] = true;
                chosen.push(i);
            }
        }
        for (i, taken) in used.iter_mut().enumerate() {
            if chosen.len() == m {
                break;
            }
            if !*taken {
                *taken = true;
                chosen.push(i);
            }
        }
    } else {
        let mut cursor = vec![0usize; g];
        while chosen.len() < m {
            let before = chosen.len();
            for (ids, cur) in members.iter().zip(cursor.iter_mut()) {
                if chosen.len() == m {
                    break;
                }
                if let Some(&i) = ids.get(*cur) {
                    *cur += 1;
                    chosen.push(i);
                }
            }
            if chosen.len() == before {
                return Err(PoemError::InsufficientExamples {
                    available: chosen.len(),
                    required: m,
                });
            }
        }
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(index: u64, v: &[f64], label: Option<&str>) -> Example {
        Example {
            index,
            fields: BTreeMap::from([("text".to_string(), format!("ex{index}"))]),
            label: label.map(str::to_string),
            embedding: Embedding::new(v.to_vec()).unwrap(),
        }
    }

    fn angle(theta: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin()]
    }

    fn fixture() -> Vec<Example> {
        // Query sits at angle 0; example i sits at angle 0.1 * (i + 1).
        let labels = ["pos", "neg", "neg", "neg", "pos", "pos", "neg", "pos"];
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| ex(i as u64, &angle(0.1 * (i as f64 + 1.0)), Some(l)))
            .collect()
    }

    fn indices(v: &[Example]) -> Vec<u64> {
        v.iter().map(|e| e.index).collect()
    }

    fn query() -> Embedding {
        Embedding::new(angle(0.0)).unwrap()
    }

    #[test]
    fn unbalanced_takes_global_top_m() {
        let ic = InContextSet::new(fixture(), RetrievalField::default(), None).unwrap();
        let got = select_examples(&query(), &ic, 4).unwrap();
        assert_eq!(indices(&got), [0, 1, 2, 3]);
    }

    #[test]
    fn balanced_two_labels() {
        let ic = InContextSet::new(
            fixture(),
            RetrievalField::default(),
            Some(vec!["pos".into(), "neg".into()]),
        )
        .unwrap();
        let got = select_examples(&query(), &ic, 4).unwrap();
        // brute force: closest two "pos" are 0 and 4; closest two "neg" are 1 and 2
        assert_eq!(indices(&got), [0, 1, 2, 4]);
    }

    #[test]
    fn remainder_filled_globally() {
        let mut examples = fixture();
        examples[7].label = Some("mid".into());
        let ic = InContextSet::new(
            examples,
            RetrievalField::default(),
            Some(vec!["pos".into(), "neg".into(), "mid".into()]),
        )
        .unwrap();
        // one per label: pos->0, neg->1, mid->7; remainder: closest unused is 2
        let got = select_examples(&query(), &ic, 4).unwrap();
        assert_eq!(indices(&got), [0, 1, 2, 7]);
    }

    #[test]
    fn many_labels_round_robin_in_lexicographic_order() {
        let examples: Vec<Example> = (0..6)
            .map(|i| {
                let label = ["d", "c", "b", "a", "a", "b"][i];
                ex(i as u64, &angle(0.1 * (i as f64 + 1.0)), Some(label))
            })
            .collect();
        let ic = InContextSet::new(
            examples,
            RetrievalField::default(),
            Some(vec!["a".into(), "b".into(), "c".into(), "d".into()]),
        )
        .unwrap();
        // labels a, b, c take their closest member: 3, 2, 1
        let got = select_examples(&query(), &ic, 3).unwrap();
        assert_eq!(indices(&got), [1, 2, 3]);
    }

    #[test]
    fn deficient_label_is_named() {
        let mut examples = fixture();
        for e in examples.iter_mut() {
            if e.label.as_deref() == Some("pos") && e.index != 0 {
                e.label = Some("neg".into());
            }
        }
        let ic = InContextSet::new(
            examples,
            RetrievalField::default(),
            Some(vec!["pos".into(), "neg".into()]),
        )
        .unwrap();
        match select_examples(&query(), &ic, 4).unwrap_err() {
            PoemError::InsufficientLabel { label, .. } => assert_eq!(label, "pos"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn too_many_requested() {
        let ic = InContextSet::new(fixture(), RetrievalField::default(), None).unwrap();
        assert!(select_examples(&query(), &ic, 9).is_err());
    }

    #[test]
    fn ties_break_by_index_regardless_of_storage_order() {
        let same = angle(0.2);
        let mut examples = vec![ex(5, &same, None), ex(2, &same, None), ex(9, &same, None)];
        let ic = InContextSet::new(examples.clone(), RetrievalField::default(), None).unwrap();
        assert_eq!(indices(&select_examples(&query(), &ic, 2).unwrap()), [2, 5]);
        examples.reverse();
        let ic = InContextSet::new(examples, RetrievalField::default(), None).unwrap();
        assert_eq!(indices(&select_examples(&query(), &ic, 2).unwrap()), [2, 5]);
    }

    #[test]
    fn rejects_labels_outside_space() {
        let r = InContextSet::new(
            fixture(),
            RetrievalField::default(),
            Some(vec!["pos".into()]),
        );
        assert!(r.is_err());
    }
}
