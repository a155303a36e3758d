//! Evaluation: exact match per route, routing accuracy and the regression
//! check against the base alone.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{em_score, exact_match, QaRecord};
use crate::error::{GagError, Result};
use crate::system::{GagSystem, RoutingMode};

/// One evaluated query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub id: String,
    pub gold_route: u32,
    pub route: u32,
    pub similarity: Option<f32>,
    pub question: String,
    pub gold: String,
    pub prediction: String,
    pub correct: bool,
    pub base_prediction: String,
    pub base_correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingSlice {
    /// Percentage of queries sent to their gold route.
    pub micro: f64,
    /// Class-wise accuracy per gold route, percent.
    pub per_route: BTreeMap<u32, f64>,
    /// `confusion[gold][predicted]` counts.
    pub confusion: BTreeMap<u32, BTreeMap<u32, usize>>,
    pub total: usize,
}

/// Micro and per-route routing accuracy from `(gold, predicted)` pairs.
/// Gold labels outside `known` are a data error.
pub fn eval_routing(pairs: &[(u32, u32)], known: &BTreeSet<u32>) -> Result<RoutingSlice> {
    let mut confusion: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for &(gold, pred) in pairs {
        if !known.contains(&gold) {
            return Err(GagError::Data(format!("unknown gold route {gold}")));
        }
        *confusion.entry(gold).or_default().entry(pred).or_default() += 1;
    }
    let correct: usize = confusion.iter().map(|(g, row)| row.get(g).copied().unwrap_or(0)).sum();
    let per_route = confusion
        .iter()
        .map(|(g, row)| {
            let n: usize = row.values().sum();
            (*g, 100.0 * row.get(g).copied().unwrap_or(0) as f64 / n as f64)
        })
        .collect();
    Ok(RoutingSlice {
        micro: if pairs.is_empty() {
            0.0
        } else {
            100.0 * correct as f64 / pairs.len() as f64
        },
        per_route,
        confusion,
        total: pairs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: RoutingMode,
    /// EM per benchmark: `general`, `private` (all non-zero routes) and one
    /// entry per route name.
    pub em: BTreeMap<String, f64>,
    /// Same benchmarks answered by the base alone.
    pub base_only_em: BTreeMap<String, f64>,
    pub routing: Option<RoutingSlice>,
    /// General-set EM of this mode minus the base alone.
    pub regression_delta: f64,
    pub regression_epsilon: f64,
    pub within_margin: bool,
    pub queries: Vec<QueryResult>,
    /// Wall time; the only field that varies between identical runs.
    pub runtime_secs: f64,
}

impl EvalReport {
    /// The report with its wall time zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            runtime_secs: 0.0,
            ..self.clone()
        }
    }

    pub fn em_of(&self, benchmark: &str) -> f64 {
        self.em.get(benchmark).copied().unwrap_or(f64::NAN)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| GagError::io(path, e))
    }

    /// One row per query.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| GagError::io(path, e))?);
        let quote = |s: &str| format!("\"{}\"", s.replace('"', "\"\"").replace('\n', "\\n"));
        let mut out = String::from(
            "id,gold_route,route,similarity,question,gold,prediction,correct,base_prediction,base_correct\n",
        );
        for q in &self.queries {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                quote(&q.id),
                q.gold_route,
                q.route,
                q.similarity.map(|s| s.to_string()).unwrap_or_default(),
                quote(&q.question),
                quote(&q.gold),
                quote(&q.prediction),
                q.correct,
                quote(&q.base_prediction),
                q.base_correct
            ));
        }
        f.write_all(out.as_bytes()).map_err(|e| GagError::io(path, e))
    }
}

fn benchmark_scores(
    queries: &[QueryResult],
    names: &BTreeMap<u32, String>,
    pick: impl Fn(&QueryResult) -> bool,
) -> BTreeMap<String, f64> {
    let pct = |sel: Vec<&QueryResult>| -> Option<f64> {
        if sel.is_empty() {
            None
        } else {
            Some(100.0 * sel.iter().filter(|q| pick(q)).count() as f64 / sel.len() as f64)
        }
    };
    let mut out = BTreeMap::new();
    if let Some(v) = pct(queries.iter().filter(|q| q.gold_route == 0).collect()) {
        out.insert("general".to_string(), v);
    }
    if let Some(v) = pct(queries.iter().filter(|q| q.gold_route != 0).collect()) {
        out.insert("private".to_string(), v);
    }
    for (id, name) in names {
        if *id == 0 {
            continue;
        }
        if let Some(v) = pct(queries.iter().filter(|q| q.gold_route == *id).collect()) {
            out.insert(name.clone(), v);
        }
    }
    out
}

/// Answers every pool query under `mode` and through the base alone.
pub fn evaluate(
    system: &GagSystem,
    pool: &[QaRecord],
    mode: RoutingMode,
    regression_epsilon: f64,
) -> Result<EvalReport> {
    let start = Instant::now();
    let mut names: BTreeMap<u32, String> = BTreeMap::new();
    let mut queries = Vec::with_capacity(pool.len());
    for rec in pool {
        let gold_route = rec
            .gold_route
            .ok_or_else(|| GagError::Data(format!("record {} has no gold route", rec.id)))?;
        names.entry(gold_route).or_insert_with(|| system.route_name(gold_route));
        let base_prediction = system.base_answer(&rec.question)?;
        let answered = if mode == RoutingMode::None {
            crate::system::Answered {
                route: 0,
                decision: None,
                answer: base_prediction.clone(),
            }
        } else {
            system.answer(&rec.question, mode, Some(gold_route))?
        };
        queries.push(QueryResult {
            id: rec.id.clone(),
            gold_route,
            route: answered.route,
            similarity: answered.decision.as_ref().map(|d| d.similarity()),
            question: rec.question.clone(),
            gold: rec.answer.clone(),
            correct: exact_match(&answered.answer, &rec.answer),
            prediction: answered.answer,
            base_correct: exact_match(&base_prediction, &rec.answer),
            base_prediction,
        });
    }
    queries.sort_by(|a, b| a.id.cmp(&b.id));
    let em = benchmark_scores(&queries, &names, |q| q.correct);
    let base_only_em = benchmark_scores(&queries, &names, |q| q.base_correct);
    let routing = if mode == RoutingMode::Ppr {
        let known: BTreeSet<u32> = system.registry().route_ids().into_iter().collect();
        let pairs: Vec<(u32, u32)> = queries.iter().map(|q| (q.gold_route, q.route)).collect();
        Some(eval_routing(&pairs, &known)?)
    } else {
        None
    };
    let general: Vec<&QueryResult> = queries.iter().filter(|q| q.gold_route == 0).collect();
    let regression_delta = em_score(general.iter().map(|q| (q.prediction.as_str(), q.gold.as_str())))
        - em_score(general.iter().map(|q| (q.base_prediction.as_str(), q.gold.as_str())));
    Ok(EvalReport {
        mode,
        em,
        base_only_em,
        routing,
        regression_delta,
        regression_epsilon,
        within_margin: regression_delta >= -regression_epsilon,
        queries,
        runtime_secs: start.elapsed().as_secs_f64(),
    })
}

/// General-set EM of `mode` minus the base alone, on general queries only.
pub fn run_regression_check(system: &GagSystem, general: &[QaRecord], mode: RoutingMode) -> Result<f64> {
    let pool: Vec<QaRecord> = general
        .iter()
        .map(|r| QaRecord {
            gold_route: Some(r.gold_route.unwrap_or(0)),
            ..r.clone()
        })
        .collect();
    Ok(evaluate(system, &pool, mode, f64::INFINITY)?.regression_delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn routing_hand_count() {
        let pairs = [(0, 0), (0, 0), (0, 0), (0, 1), (1, 1), (1, 0)];
        let known = BTreeSet::from([0, 1]);
        let s = eval_routing(&pairs, &known).unwrap();
        assert!((s.micro - 400.0 / 6.0).abs() < 1e-12);
        assert_eq!(s.per_route[&0], 75.0);
        assert_eq!(s.per_route[&1], 50.0);
        assert_eq!(s.confusion[&0][&1], 1);
    }

    #[test]
    fn perfect_routing_is_all_hundreds() {
        let pairs = [(0, 0), (2, 2)];
        let s = eval_routing(&pairs, &BTreeSet::from([0, 2])).unwrap();
        assert_eq!(s.micro, 100.0);
        assert!(s.per_route.values().all(|&v| v == 100.0));
    }

    #[test]
    fn unknown_label_is_a_data_error() {
        assert!(matches!(
            eval_routing(&[(5, 0)], &BTreeSet::from([0])),
            Err(GagError::Data(_))
        ));
    }

    #[test]
    fn micro_recomputes_from_confusion() {
        let pairs: Vec<(u32, u32)> = (0..50).map(|i| (i % 3, (i * 7) % 3)).collect();
        let s = eval_routing(&pairs, &BTreeSet::from([0, 1, 2])).unwrap();
        let diag: usize = s.confusion.iter().map(|(g, r)| r.get(g).copied().unwrap_or(0)).sum();
        let total: usize = s.confusion.values().flat_map(|r| r.values()).sum();
        assert_eq!(total, 50);
        assert!((s.micro - 100.0 * diag as f64 / 50.0).abs() < 1e-12);
    }
}
