//! Retrieval metrics: Acc@k and mAP@k at instance and class level.

use std::fmt::Write as _;

use serde::Serialize;

use crate::encoders::Embedding;
use crate::index::{RetrievalResult, ShapeIndex};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Instance,
    Class,
}

/// What counts as relevant for one query.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryTruth {
    pub shape_id: String,
    pub class_id: String,
    /// Database entries sharing `class_id` (the class-level R).
    pub class_size: usize,
}

impl QueryTruth {
    fn relevant(&self, level: Level, shape_id: &str, class_id: &str) -> bool {
        match level {
            Level::Instance => shape_id == self.shape_id,
            Level::Class => class_id == self.class_id,
        }
    }

    fn relevant_total(&self, level: Level) -> usize {
        match level {
            Level::Instance => 1,
            Level::Class => self.class_size,
        }
    }
}

fn check_inputs(results: &[RetrievalResult], truth: &[QueryTruth], k: usize) -> Result<()> {
    if results.is_empty() {
        return Err(Error::param("no queries to evaluate"));
    }
    if results.len() != truth.len() {
        return Err(Error::param(format!(
            "{} results for {} ground-truth entries",
            results.len(),
            truth.len()
        )));
    }
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    Ok(())
}

/// Fraction of queries with a relevant hit among the first `k`.
pub fn acc_top_k(results: &[RetrievalResult], truth: &[QueryTruth], k: usize, level: Level) -> Result<f64> {
    check_inputs(results, truth, k)?;
    let hits = results
        .iter()
        .zip(truth)
        .filter(|(r, t)| {
            r.hits
                .iter()
                .take(k)
                .any(|h| t.relevant(level, &h.shape_id, &h.class_id))
        })
        .count();
    Ok(hits as f64 / results.len() as f64)
}

/// AP@k = (1 / min(R, k)) * sum over relevant ranks r <= k of precision@r.
pub fn average_precision_at_k(result: &RetrievalResult, truth: &QueryTruth, k: usize, level: Level) -> f64 {
    let total = truth.relevant_total(level);
    if total == 0 {
        return 0.0;
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (r, h) in result.hits.iter().take(k).enumerate() {
        if truth.relevant(level, &h.shape_id, &h.class_id) {
            found += 1;
            sum += found as f64 / (r + 1) as f64;
        }
    }
    sum / total.min(k) as f64
}

pub fn map_at_k(results: &[RetrievalResult], truth: &[QueryTruth], k: usize, level: Level) -> Result<f64> {
    check_inputs(results, truth, k)?;
    let total: f64 = results
        .iter()
        .zip(truth)
        .map(|(r, t)| average_precision_at_k(r, t, k, level))
        .sum();
    Ok(total / results.len() as f64)
}

/// A query image embedding with its target shape.
#[derive(Clone, Debug)]
pub struct EvalQuery {
    pub embedding: Embedding,
    pub shape_id: String,
    pub class_id: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LevelMetrics {
    pub acc_top1: f64,
    pub acc_top10: f64,
    pub map_at_k: f64,
}

impl LevelMetrics {
    fn compute(results: &[RetrievalResult], truth: &[QueryTruth], k: usize, level: Level) -> Result<Self> {
        Ok(Self {
            acc_top1: acc_top_k(results, truth, 1, level)?,
            acc_top10: acc_top_k(results, truth, 10, level)?,
            map_at_k: map_at_k(results, truth, k, level)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QueryRecord {
    pub query: usize,
    pub shape_id: String,
    pub class_id: String,
    pub class_size: usize,
    /// 1-based rank of the target shape in the full ranking.
    pub instance_rank: usize,
    /// Retrieved shape ids (and their classes) down to the report depth.
    pub ranked: Vec<(String, String)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub k: usize,
    pub query_count: usize,
    pub instance: LevelMetrics,
    /// Absent when every indexed shape has the same class.
    pub class: Option<LevelMetrics>,
    pub records: Vec<QueryRecord>,
}

/// Runs every query against the index and aggregates Acc@1, Acc@10 and
/// mAP@k at both levels.
pub fn evaluate(index: &ShapeIndex, queries: &[EvalQuery], k: usize) -> Result<EvalReport> {
    if queries.is_empty() {
        return Err(Error::param("no queries to evaluate"));
    }
    if k == 0 {
        return Err(Error::param("k must be at least 1"));
    }
    for q in queries {
        if q.embedding.dim() != index.dim() {
            return Err(Error::Dimension {
                expected: index.dim(),
                actual: q.embedding.dim(),
            });
        }
        if !index.contains(&q.shape_id) {
            return Err(Error::param(format!("query target `{}` is not indexed", q.shape_id)));
        }
    }
    let depth = k.max(10);
    let mut results = Vec::with_capacity(queries.len());
    let mut truth = Vec::with_capacity(queries.len());
    let mut records = Vec::with_capacity(queries.len());
    for (i, q) in queries.iter().enumerate() {
        let r = index.query(&q.embedding, depth)?;
        let t = QueryTruth {
            shape_id: q.shape_id.clone(),
            class_id: q.class_id.clone(),
            class_size: index.class_size(&q.class_id),
        };
        records.push(QueryRecord {
            query: i,
            shape_id: q.shape_id.clone(),
            class_id: q.class_id.clone(),
            class_size: t.class_size,
            instance_rank: index.rank_of(&q.embedding, &q.shape_id)?,
            ranked: r
                .hits
                .iter()
                .map(|h| (h.shape_id.clone(), h.class_id.clone()))
                .collect(),
        });
        results.push(r);
        truth.push(t);
    }
    let first_class = &index.entries()[0].class_id;
    let single_class = index.entries().iter().all(|e| &e.class_id == first_class);
    let instance = LevelMetrics::compute(&results, &truth, k, Level::Instance)?;
    let class = if single_class {
        None
    } else {
        Some(LevelMetrics::compute(&results, &truth, k, Level::Class)?)
    };
    Ok(EvalReport {
        k,
        query_count: queries.len(),
        instance,
        class,
        records,
    })
}

impl EvalReport {
    /// One JSON object per metric, then one per query.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let mut push = |level: Level, m: &LevelMetrics| {
            for (name, value) in [
                ("acc_top1", m.acc_top1),
                ("acc_top10", m.acc_top10),
                (&format!("map_at_{}", self.k)[..], m.map_at_k),
            ] {
                let rec = serde_json::json!({
                    "record": "metric",
                    "level": level,
                    "metric": name,
                    "value": value,
                    "queries": self.query_count,
                });
                out.push_str(&rec.to_string());
                out.push('\n');
            }
        };
        push(Level::Instance, &self.instance);
        if let Some(c) = &self.class {
            push(Level::Class, c);
        }
        out
    }

    pub fn ranks_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    /// Table in `instance/class` notation (percentages).
    pub fn summary_table(&self) -> String {
        let cell = |inst: f64, class: Option<f64>| match class {
            Some(c) => format!("{:.1}/{:.1}", 100.0 * inst, 100.0 * c),
            None => format!("{:.1}", 100.0 * inst),
        };
        let c = self.class.as_ref();
        let mut out = String::new();
        let _ = writeln!(out, "queries: {}", self.query_count);
        let _ = writeln!(out, "{:<10} {:>12}", "metric", if c.is_some() { "inst/class" } else { "instance" });
        let _ = writeln!(out, "{:<10} {:>12}", "Acc@1", cell(self.instance.acc_top1, c.map(|m| m.acc_top1)));
        let _ = writeln!(out, "{:<10} {:>12}", "Acc@10", cell(self.instance.acc_top10, c.map(|m| m.acc_top10)));
        let _ = writeln!(
            out,
            "{:<10} {:>12}",
            format!("mAP@{}", self.k),
            cell(self.instance.map_at_k, c.map(|m| m.map_at_k))
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Fingerprint;
    use crate::index::{build_index, Hit};

    fn result(ids: &[(&str, &str)]) -> RetrievalResult {
        RetrievalResult {
            k: ids.len(),
            hits: ids
                .iter()
                .enumerate()
                .map(|(i, (s, c))| Hit {
                    shape_id: s.to_string(),
                    class_id: c.to_string(),
                    similarity: 1.0 - i as f64 * 0.01,
                })
                .collect(),
        }
    }

    fn ranked_with_target_at(rank: usize, len: usize) -> RetrievalResult {
        let ids: Vec<(String, String)> = (1..=len)
            .map(|r| if r == rank { ("t".into(), "a".into()) } else { (format!("o{r}"), "b".into()) })
            .collect();
        let refs: Vec<(&str, &str)> = ids.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        result(&refs)
    }

    fn truth() -> QueryTruth {
        QueryTruth {
            shape_id: "t".into(),
            class_id: "a".into(),
            class_size: 1,
        }
    }

    #[test]
    fn accuracy_by_target_rank() {
        let results: Vec<_> = [1, 3, 12].iter().map(|&r| ranked_with_target_at(r, 15)).collect();
        let t = vec![truth(); 3];
        assert!((acc_top_k(&results, &t, 10, Level::Instance).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((acc_top_k(&results, &t, 1, Level::Instance).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let all_first: Vec<_> = (0..4).map(|_| ranked_with_target_at(1, 5)).collect();
        for k in [1, 3, 10] {
            assert_eq!(acc_top_k(&all_first, &vec![truth(); 4], k, Level::Instance).unwrap(), 1.0);
        }
    }

    #[test]
    fn instance_ap_is_reciprocal_rank() {
        assert_eq!(average_precision_at_k(&ranked_with_target_at(1, 12), &truth(), 10, Level::Instance), 1.0);
        assert_eq!(average_precision_at_k(&ranked_with_target_at(4, 12), &truth(), 10, Level::Instance), 0.25);
        assert_eq!(average_precision_at_k(&ranked_with_target_at(11, 12), &truth(), 10, Level::Instance), 0.0);
    }

    #[test]
    fn class_ap_two_relevant() {
        let r = result(&[("x1", "a"), ("y1", "b"), ("x2", "a"), ("y2", "b")]);
        let t = QueryTruth {
            shape_id: "x1".into(),
            class_id: "a".into(),
            class_size: 2,
        };
        let ap = average_precision_at_k(&r, &t, 10, Level::Class);
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn empty_queries_rejected() {
        assert!(matches!(acc_top_k(&[], &[], 1, Level::Instance), Err(Error::Parameter(_))));
        assert!(map_at_k(&[], &[], 10, Level::Class).is_err());
    }

    fn toy_index(classes: &[&str]) -> (ShapeIndex, Vec<EvalQuery>) {
        let d = classes.len() + 1;
        let items: Vec<(String, String, Embedding)> = classes
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut v = vec![0.1; d];
                v[i] = 1.0;
                (format!("s{i}"), c.to_string(), Embedding::normalized(&v))
            })
            .collect();
        let queries = items
            .iter()
            .map(|(s, c, e)| EvalQuery {
                embedding: e.clone(),
                shape_id: s.clone(),
                class_id: c.clone(),
            })
            .collect();
        (build_index(items, Fingerprint::default()).unwrap(), queries)
    }

    #[test]
    fn self_queries_score_perfectly() {
        let (idx, q) = toy_index(&["a", "a", "b", "c", "b"]);
        let rep = evaluate(&idx, &q, 10).unwrap();
        assert_eq!(rep.instance.acc_top1, 1.0);
        assert_eq!(rep.instance.acc_top10, 1.0);
        assert_eq!(rep.instance.map_at_k, 1.0);
        let class = rep.class.unwrap();
        assert_eq!(class.acc_top1, 1.0);
        assert!(rep.records.iter().all(|r| r.instance_rank == 1));
        assert!(rep.summary_table().contains("100.0/100.0"));
        assert_eq!(rep.to_jsonl().lines().count(), 6);
    }

    #[test]
    fn single_class_reports_instance_only() {
        let (idx, q) = toy_index(&["car", "car", "car"]);
        let rep = evaluate(&idx, &q, 10).unwrap();
        assert!(rep.class.is_none());
        assert_eq!(rep.to_jsonl().lines().count(), 3);
    }

    #[test]
    fn unknown_target_rejected() {
        let (idx, mut q) = toy_index(&["a", "b"]);
        q[0].shape_id = "missing".into();
        assert!(matches!(evaluate(&idx, &q, 10), Err(Error::Parameter(_))));
    }
}
