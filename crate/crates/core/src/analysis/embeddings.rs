use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{ParamId, Tensor};

pub const DEFAULT_NEIGHBORS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub id: usize,
    pub token: String,
    pub similarity: f64,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// The `k` rows of `embeddings` most cosine-similar to `token`'s row, the
/// query itself excluded, ties broken by smaller id.
pub fn nearest_neighbors(embeddings: &Tensor, vocab: &Vocabulary, token: &str, k: usize) -> Result<Vec<Neighbor>> {
    let (rows, _) = embeddings.dims2();
    if rows != vocab.len() {
        return Err(Error::Dimension(format!(
            "embedding matrix has {rows} rows for a vocabulary of {}",
            vocab.len()
        )));
    }
    let q = vocab
        .get(token)
        .ok_or_else(|| Error::Lookup(format!("token {token:?} is not in the vocabulary")))?;
    let query = embeddings.row(q);
    let mut scored: Vec<(usize, f64)> = (0..rows)
        .filter(|&i| i != q)
        .map(|i| (i, cosine(query, embeddings.row(i))))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored
        .into_iter()
        .take(k)
        .map(|(id, similarity)| Neighbor {
            id,
            token: vocab.token(id).to_string(),
            similarity,
        })
        .collect())
}

/// Copies `source`'s embedding tables (source, target and output roles) into
/// `target`. With `fixed` the copied tables are frozen for later training.
pub fn transplant_embeddings(mut target: Model, source: &Model, fixed: bool) -> Result<Model> {
    let (t, s) = (target.config(), source.config());
    let mut diffs = Vec::new();
    for (axis, a, b) in [
        ("src_vocab", t.src_vocab, s.src_vocab),
        ("tgt_vocab", t.tgt_vocab, s.tgt_vocab),
        ("d_model", t.d_model, s.d_model),
    ] {
        if a != b {
            diffs.push(format!("{axis} {a} vs {b}"));
        }
    }
    if !diffs.is_empty() {
        return Err(Error::Config(format!("cannot transplant embeddings: {}", diffs.join(", "))));
    }
    let roles = [
        (target.source_embedding_id(), source.source_embedding_id()),
        (target.target_embedding_id(), source.target_embedding_id()),
        (target.output_projection_id(), source.output_projection_id()),
    ];
    let mut done: Vec<ParamId> = Vec::new();
    for (to, from) in roles {
        if done.contains(&to) {
            continue;
        }
        done.push(to);
        let data = source.params().get(from).data().to_vec();
        target.params_mut().get_mut(to).data_mut().copy_from_slice(&data);
        if fixed {
            target.params_mut().set_frozen(to, true);
        }
    }
    Ok(target)
}
