//! Retrieval metrics: top-k instance accuracy, top-1 class accuracy and
//! top-3 category IoU, and the query-set driver that computes them.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Split};
use crate::encoder::{encode_checkpoint, EncoderParams};
use crate::error::{Error, Result};
use crate::index::{encode_index, hex, query_topk, QueryResult, RetrievalIndex, ScoredMaterial};
use crate::material::Category;
use crate::par;
use crate::renderer::{Mask, Raster};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truth {
    pub material_id: String,
    pub category: Category,
}

fn check(rankings: &[&[ScoredMaterial]], truths: &[Truth], min_len: usize) -> Result<()> {
    if rankings.is_empty() {
        return Err(Error::Empty("no queries to score".into()));
    }
    if rankings.len() != truths.len() {
        return Err(Error::Shape(format!("{} rankings but {} truths", rankings.len(), truths.len())));
    }
    if let Some((i, r)) = rankings.iter().enumerate().find(|(_, r)| r.len() < min_len) {
        return Err(Error::Shape(format!("query {i} has {} results, need at least {min_len}", r.len())));
    }
    Ok(())
}

/// Fraction of queries whose true material is among the first `k` results.
pub fn topk_instance_acc(rankings: &[&[ScoredMaterial]], truths: &[Truth], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    check(rankings, truths, k)?;
    let hits = rankings
        .iter()
        .zip(truths)
        .filter(|(r, t)| r[..k].iter().any(|s| s.material_id == t.material_id))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Fraction of queries whose rank-1 material has the true category.
pub fn top1_class_acc(rankings: &[&[ScoredMaterial]], truths: &[Truth]) -> Result<f64> {
    check(rankings, truths, 1)?;
    let hits = rankings.iter().zip(truths).filter(|(r, t)| r[0].category == t.category).count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Mean over queries of |C ∩ {c}| / |C ∪ {c}|, where C is the set of
/// categories among the top 3 results and c the true category.
pub fn top3_iou(rankings: &[&[ScoredMaterial]], truths: &[Truth]) -> Result<f64> {
    check(rankings, truths, 3)?;
    let total: f64 = rankings
        .iter()
        .zip(truths)
        .map(|(r, t)| {
            let cats: BTreeSet<Category> = r[..3].iter().map(|s| s.category).collect();
            if cats.contains(&t.category) {
                1.0 / cats.len() as f64
            } else {
                0.0
            }
        })
        .sum();
    Ok(total / rankings.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub t1i: f64,
    pub t5i: f64,
    pub t1c: f64,
    pub t3iou: f64,
    pub n_queries: usize,
    /// SHA-256 over the image encoder checkpoint, the index file and the
    /// query ids.
    pub fingerprint: String,
}

impl MetricsReport {
    pub fn from_rankings(rankings: &[&[ScoredMaterial]], truths: &[Truth], fingerprint: String) -> Result<Self> {
        Ok(MetricsReport {
            t1i: topk_instance_acc(rankings, truths, 1)?,
            t5i: topk_instance_acc(rankings, truths, 5)?,
            t1c: top1_class_acc(rankings, truths)?,
            t3iou: top3_iou(rankings, truths)?,
            n_queries: rankings.len(),
            fingerprint,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub const CSV_HEADER: &'static str = "T1I,T5I,T1C,T3IoU,n_queries,fingerprint";

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{},{},{},{},{}\n",
            Self::CSV_HEADER,
            self.t1i,
            self.t5i,
            self.t1c,
            self.t3iou,
            self.n_queries,
            self.fingerprint
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub id: String,
    pub image: Raster,
    pub mask: Mask,
    pub truth: Truth,
}

/// On-disk query list entry; paths are relative to the list file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub id: String,
    pub image: PathBuf,
    pub mask: PathBuf,
    pub material_id: String,
    pub category: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct QuerySet {
    pub queries: Vec<Query>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Samples of `dataset`, optionally restricted to one split.
    pub fn from_dataset(dataset: &Dataset, split: Option<Split>) -> Self {
        let queries = dataset
            .manifest
            .samples
            .iter()
            .zip(dataset.images.iter().zip(&dataset.masks))
            .filter(|(s, _)| split.is_none_or(|sp| s.split == sp))
            .map(|(s, (image, mask))| Query {
                id: s.id.clone(),
                image: image.clone(),
                mask: mask.clone(),
                truth: Truth { material_id: s.material_id.clone(), category: s.category },
            })
            .collect();
        QuerySet { queries }
    }

    /// Reads a JSON array of [`QueryRecord`]s.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let records: Vec<QueryRecord> =
            serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let queries = records
            .into_iter()
            .map(|r| {
                Ok(Query {
                    image: Raster::read_image(&base.join(&r.image))?,
                    mask: Mask::read(&base.join(&r.mask))?,
                    truth: Truth { material_id: r.material_id, category: r.category.parse()? },
                    id: r.id,
                })
            })
            .collect::<Result<_>>()?;
        Ok(QuerySet { queries })
    }

    /// Every true material must exist in `index`, with the same category.
    pub fn check_against(&self, index: &RetrievalIndex) -> Result<()> {
        for q in &self.queries {
            match index.entries.iter().find(|e| e.material_id == q.truth.material_id) {
                None => {
                    return Err(Error::Config(format!(
                        "query `{}` expects material `{}`, which is not in the index",
                        q.id, q.truth.material_id
                    )))
                }
                Some(e) if e.category != q.truth.category => {
                    return Err(Error::Config(format!(
                        "query `{}` labels `{}` as {}, the index says {}",
                        q.id, q.truth.material_id, q.truth.category, e.category
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub results: Vec<QueryResult>,
}

pub fn fingerprint(image_encoder: &EncoderParams, index: &RetrievalIndex, queries: &QuerySet) -> String {
    let mut h = Sha256::new();
    h.update(encode_checkpoint(image_encoder));
    h.update(encode_index(index));
    for q in &queries.queries {
        h.update(q.id.as_bytes());
        h.update([0]);
    }
    hex(&h.finalize())
}

/// Runs every query against `index` and aggregates the four metrics.
pub fn evaluate(
    index: &RetrievalIndex,
    image_encoder: &EncoderParams,
    queries: &QuerySet,
    k_max: usize,
) -> Result<Evaluation> {
    if queries.is_empty() {
        return Err(Error::Empty("query set is empty".into()));
    }
    let k = k_max.max(5);
    queries.check_against(index)?;
    let results = par::map(&queries.queries, |q| query_topk(index, image_encoder, &q.image, &q.mask, k));
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let rankings: Vec<&[ScoredMaterial]> = results.iter().map(|r| r.results.as_slice()).collect();
    let truths: Vec<Truth> = queries.queries.iter().map(|q| q.truth.clone()).collect();
    let report = MetricsReport::from_rankings(&rankings, &truths, fingerprint(image_encoder, index, queries))?;
    Ok(Evaluation { report, results })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sm(id: &str, c: Category) -> ScoredMaterial {
        ScoredMaterial { material_id: id.into(), category: c, score: 0.0 }
    }

    fn truth(id: &str, c: Category) -> Truth {
        Truth { material_id: id.into(), category: c }
    }

    fn views(r: &[Vec<ScoredMaterial>]) -> Vec<&[ScoredMaterial]> {
        r.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn hand_counted_topk() {
        use Category::*;
        // truths at ranks 1, 2, 6 and 7
        let ids = ["a", "b", "c", "d", "e", "f", "g"];
        let ranking: Vec<ScoredMaterial> = ids.iter().map(|i| sm(i, Wood)).collect();
        let r = vec![ranking.clone(), ranking.clone(), ranking.clone(), ranking];
        let t = [truth("a", Wood), truth("b", Wood), truth("f", Wood), truth("g", Wood)];
        assert_eq!(topk_instance_acc(&views(&r), &t, 5).unwrap(), 0.5);
        assert_eq!(topk_instance_acc(&views(&r), &t, 1).unwrap(), 0.25);
        let none = [truth("z", Wood), truth("z", Wood), truth("z", Wood), truth("z", Wood)];
        assert_eq!(topk_instance_acc(&views(&r), &none, 5).unwrap(), 0.0);
    }

    #[test]
    fn class_accuracy_mixed() {
        use Category::*;
        let r = vec![vec![sm("w1", Wood)], vec![sm("m1", Metal)], vec![sm("w2", Wood)]];
        let t = [truth("w1", Wood), truth("w3", Wood), truth("w1", Wood)];
        assert!((top1_class_acc(&views(&r), &t).unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn iou_cases() {
        use Category::*;
        let pure = vec![vec![sm("a", Wood), sm("b", Wood), sm("c", Wood)]];
        assert_eq!(top3_iou(&views(&pure), &[truth("a", Wood)]).unwrap(), 1.0);
        let mixed = vec![vec![sm("a", Wood), sm("b", Metal), sm("c", Wood)]];
        assert_eq!(top3_iou(&views(&mixed), &[truth("a", Wood)]).unwrap(), 0.5);
        assert_eq!(top3_iou(&views(&mixed), &[truth("a", Stone)]).unwrap(), 0.0);
        let short = vec![vec![sm("a", Wood), sm("b", Wood)]];
        assert!(matches!(top3_iou(&views(&short), &[truth("a", Wood)]), Err(Error::Shape(_))));
    }

    #[test]
    fn empty_query_set() {
        assert!(matches!(topk_instance_acc(&[], &[], 1), Err(Error::Empty(_))));
        assert!(matches!(top1_class_acc(&[], &[]), Err(Error::Empty(_))));
    }
}
