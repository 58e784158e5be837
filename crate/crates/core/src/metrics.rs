//! Evaluation metrics: token-overlap precision/recall/F1, exact-match
//! accuracy, and Wu-Palmer similarity with thresholded WUPS aggregation.
//!
//! Answers are normalized (lowercase, trimmed, whitespace collapsed — no
//! diacritic stripping, Vietnamese diacritics are semantic) and split on
//! whitespace; P/R intersect the resulting token multisets.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};

// ── taxonomy ────────────────────────────────────────────────────────────

/// Rooted tree over answer tokens; depth(root) == 1.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    parent: HashMap<String, String>,
    depth: HashMap<String, usize>,
    root: String,
}

impl Taxonomy {
    pub fn from_edges(edges: &[(String, String)]) -> Result<Taxonomy> {
        if edges.is_empty() {
            return Err(Error::Contract("taxonomy needs at least one edge".into()));
        }
        let mut parent: HashMap<String, String> = HashMap::new();
        let mut nodes: HashSet<String> = HashSet::new();
        let mut seen: HashSet<(String, String)> = HashSet::new();
        for (p, c) in edges {
            if !seen.insert((p.clone(), c.clone())) {
                return Err(Error::Contract(format!(
                    "duplicate taxonomy edge {p} -> {c}"
                )));
            }
            if let Some(prev) = parent.get(c) {
                return Err(Error::Contract(format!(
                    "node {c} has two parents: {prev} and {p}"
                )));
            }
            if p == c {
                return Err(Error::Contract(format!("self-edge on {p}")));
            }
            parent.insert(c.clone(), p.clone());
            nodes.insert(p.clone());
            nodes.insert(c.clone());
        }
        let roots: Vec<&String> = nodes.iter().filter(|n| !parent.contains_key(*n)).collect();
        if roots.len() != 1 {
            return Err(Error::Contract(format!(
                "taxonomy must have exactly one root, found {}",
                roots.len()
            )));
        }
        let root = roots[0].clone();

        // Depths via upward walks; a walk longer than the node count means
        // a cycle.
        let mut depth = HashMap::new();
        depth.insert(root.clone(), 1usize);
        for node in &nodes {
            let mut chain = vec![node.clone()];
            let mut cur = node.clone();
            while cur != root {
                match parent.get(&cur) {
                    Some(p) => {
                        cur = p.clone();
                        chain.push(cur.clone());
                        if chain.len() > nodes.len() {
                            return Err(Error::Contract(format!(
                                "cycle in taxonomy at {node}"
                            )));
                        }
                    }
                    None => {
                        return Err(Error::Contract(format!(
                            "node {node} does not reach the root"
                        )));
                    }
                }
            }
            for (i, n) in chain.iter().rev().enumerate() {
                depth.insert(n.clone(), i + 1);
            }
        }

        Ok(Taxonomy {
            parent,
            depth,
            root,
        })
    }

    /// One `parent<TAB>child` edge per line, UTF-8.
    pub fn load(path: &Path) -> Result<Taxonomy> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut edges = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, '\t');
            let (p, c) = (parts.next().unwrap_or(""), parts.next().unwrap_or(""));
            if p.is_empty() || c.is_empty() {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    msg: format!("line {}: expected parent<TAB>child", lineno + 1),
                });
            }
            edges.push((p.to_string(), c.to_string()));
        }
        Taxonomy::from_edges(&edges)
    }

    pub fn root(&self) -> &str {
        &self.root
    }

    pub fn contains(&self, word: &str) -> bool {
        self.depth.contains_key(word)
    }

    pub fn depth(&self, word: &str) -> Option<usize> {
        self.depth.get(word).copied()
    }

    /// Lowest common subsumer: deepest node that is an ancestor-or-self of
    /// both words.
    pub fn lcs(&self, a: &str, b: &str) -> Option<String> {
        if !self.contains(a) || !self.contains(b) {
            return None;
        }
        let mut ancestors: HashSet<&str> = HashSet::new();
        let mut cur = a;
        loop {
            ancestors.insert(cur);
            match self.parent.get(cur) {
                Some(p) => cur = p,
                None => break,
            }
        }
        let mut cur = b;
        loop {
            if ancestors.contains(cur) {
                return Some(cur.to_string());
            }
            match self.parent.get(cur) {
                Some(p) => cur = p,
                None => return Some(self.root.clone()),
            }
        }
    }
}

/// Wu-Palmer similarity, 2·depth(LCS)/(depth(w1)+depth(w2)).
///
/// Words outside the taxonomy fall back to string identity: 1 when equal,
/// 0 otherwise, keeping the metric total on open vocabularies.
pub fn wup_similarity(w1: &str, w2: &str, taxonomy: &Taxonomy) -> f64 {
    if !taxonomy.contains(w1) || !taxonomy.contains(w2) {
        return if w1 == w2 { 1.0 } else { 0.0 };
    }
    let lcs = taxonomy.lcs(w1, w2).expect("both words present");
    let dl = taxonomy.depth(&lcs).unwrap() as f64;
    let d1 = taxonomy.depth(w1).unwrap() as f64;
    let d2 = taxonomy.depth(w2).unwrap() as f64;
    2.0 * dl / (d1 + d2)
}

// ── token-level scores ──────────────────────────────────────────────────

/// Lowercase, trim, collapse internal whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .map(|w| w.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn answer_tokens(s: &str) -> Vec<String> {
    normalize_answer(s)
        .split_whitespace()
        .map(|w| w.to_string())
        .collect()
}

fn multiset(tokens: &[String]) -> HashMap<&str, usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Multiset-intersection precision, recall, and their harmonic mean.
/// Empty PA ⇒ P = 0; empty GA ⇒ R = 0; P + R = 0 ⇒ F1 = 0.
pub fn precision_recall_f1(pa: &[String], ga: &[String]) -> (f64, f64, f64) {
    let pm = multiset(pa);
    let gm = multiset(ga);
    let overlap: usize = pm
        .iter()
        .map(|(tok, &cnt)| cnt.min(gm.get(tok).copied().unwrap_or(0)))
        .sum();
    let p = if pa.is_empty() {
        0.0
    } else {
        overlap as f64 / pa.len() as f64
    };
    let r = if ga.is_empty() {
        0.0
    } else {
        overlap as f64 / ga.len() as f64
    };
    let f1 = if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    };
    (p, r, f1)
}

/// Exact match on normalized token sequences.
pub fn accuracy(pa: &[String], ga: &[String]) -> f64 {
    if !pa.is_empty() && pa == ga {
        1.0
    } else if pa.is_empty() && ga.is_empty() {
        1.0
    } else {
        0.0
    }
}

/// Thresholded WUPS: per-pair scores below `threshold` drop to 0, then the
/// symmetric min-of-products aggregation over both directions.
pub fn wups(pa: &[String], ga: &[String], threshold: f64, taxonomy: &Taxonomy) -> f64 {
    if pa.is_empty() || ga.is_empty() {
        return 0.0;
    }
    let pair = |a: &str, b: &str| {
        let s = wup_similarity(a, b, taxonomy);
        if s >= threshold {
            s
        } else {
            0.0
        }
    };
    let direction = |from: &[String], to: &[String]| {
        from.iter()
            .map(|a| {
                to.iter()
                    .map(|b| pair(a, b))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .product::<f64>()
    };
    direction(pa, ga).min(direction(ga, pa))
}

// ── aggregation ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleScore {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub wups_0: Option<f64>,
    pub wups_9: Option<f64>,
}

/// Score one (prediction, gold) pair; WUPS columns appear only when a
/// taxonomy is available.
pub fn score_example(prediction: &str, gold: &str, taxonomy: Option<&Taxonomy>) -> ExampleScore {
    let pa = answer_tokens(prediction);
    let ga = answer_tokens(gold);
    let (precision, recall, f1) = precision_recall_f1(&pa, &ga);
    ExampleScore {
        accuracy: accuracy(&pa, &ga),
        precision,
        recall,
        f1,
        wups_0: taxonomy.map(|t| wups(&pa, &ga, 0.0, t)),
        wups_9: taxonomy.map(|t| wups(&pa, &ga, 0.9, t)),
    }
}

/// Arithmetic means of per-example scores.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub n_examples: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub wups_0: Option<f64>,
    pub wups_9: Option<f64>,
}

pub fn aggregate(per_example: &[ExampleScore]) -> Result<MetricsReport> {
    if per_example.is_empty() {
        return Err(Error::Contract("cannot aggregate zero examples".into()));
    }
    let n = per_example.len() as f64;
    let mean = |f: &dyn Fn(&ExampleScore) -> f64| per_example.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: &dyn Fn(&ExampleScore) -> Option<f64>| {
        if per_example.iter().all(|s| f(s).is_some()) {
            Some(per_example.iter().map(|s| f(s).unwrap()).sum::<f64>() / n)
        } else {
            None
        }
    };
    Ok(MetricsReport {
        n_examples: per_example.len(),
        accuracy: mean(&|s| s.accuracy),
        precision: mean(&|s| s.precision),
        recall: mean(&|s| s.recall),
        f1: mean(&|s| s.f1),
        wups_0: mean_opt(&|s| s.wups_0),
        wups_9: mean_opt(&|s| s.wups_9),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toks(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    fn toy_taxonomy() -> Taxonomy {
        Taxonomy::from_edges(&[
            ("root".into(), "animal".into()),
            ("animal".into(), "dog".into()),
            ("animal".into(), "cat".into()),
            ("root".into(), "object".into()),
            ("object".into(), "chair".into()),
        ])
        .unwrap()
    }

    #[test]
    fn f1_identical_nonempty() {
        let (p, r, f1) = precision_recall_f1(&toks(&["a", "b"]), &toks(&["a", "b"]));
        assert_eq!((p, r, f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn f1_hand_anchor() {
        let (p, r, f1) =
            precision_recall_f1(&toks(&["lò", "vi"]), &toks(&["lò", "vi", "sóng"]));
        assert_eq!(p, 1.0);
        assert!((r - 2.0 / 3.0).abs() < 1e-15);
        assert!((f1 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn f1_disjoint_and_empty_conventions() {
        assert_eq!(
            precision_recall_f1(&toks(&["x"]), &toks(&["y"])),
            (0.0, 0.0, 0.0)
        );
        assert_eq!(precision_recall_f1(&[], &toks(&["y"])).0, 0.0);
        assert_eq!(precision_recall_f1(&toks(&["x"]), &[]).1, 0.0);
    }

    #[test]
    fn multiset_counts_matter() {
        // "a a" vs "a" overlaps once.
        let (p, r, _) = precision_recall_f1(&toks(&["a", "a"]), &toks(&["a"]));
        assert_eq!(p, 0.5);
        assert_eq!(r, 1.0);
    }

    #[test]
    fn accuracy_exact_match_semantics() {
        assert_eq!(accuracy(&toks(&["bát"]), &toks(&["bát"])), 1.0);
        assert_eq!(accuracy(&toks(&["bát"]), &toks(&["cái", "bát"])), 0.0);
        // Order matters for sequences.
        assert_eq!(accuracy(&toks(&["a", "b"]), &toks(&["b", "a"])), 0.0);
    }

    #[test]
    fn normalization_collapses_case_and_whitespace() {
        assert_eq!(normalize_answer("  Lò  VI   sóng "), "lò vi sóng");
        let s = score_example("  Cái   Bát ", "cái bát", None);
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.f1, 1.0);
    }

    #[test]
    fn wup_hand_anchors() {
        let t = toy_taxonomy();
        assert!((wup_similarity("dog", "cat", &t) - 2.0 / 3.0).abs() < 1e-15);
        assert!((wup_similarity("dog", "root", &t) - 0.5).abs() < 1e-15);
        assert_eq!(wup_similarity("dog", "dog", &t), 1.0);
    }

    #[test]
    fn wup_symmetry_and_fallback() {
        let t = toy_taxonomy();
        assert_eq!(
            wup_similarity("dog", "chair", &t),
            wup_similarity("chair", "dog", &t)
        );
        assert_eq!(wup_similarity("dog", "unknown", &t), 0.0);
        assert_eq!(wup_similarity("unknown", "unknown", &t), 1.0);
    }

    #[test]
    fn wups_thresholding() {
        let t = toy_taxonomy();
        let pa = toks(&["dog"]);
        let ga = toks(&["cat"]);
        assert_eq!(wups(&pa, &ga, 0.9, &t), 0.0);
        assert!((wups(&pa, &ga, 0.0, &t) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(wups(&pa, &pa, 0.9, &t), 1.0);
        assert_eq!(wups(&[], &ga, 0.0, &t), 0.0);
    }

    #[test]
    fn taxonomy_rejects_malformed_trees() {
        let dup = [
            ("a".to_string(), "b".to_string()),
            ("a".to_string(), "b".to_string()),
        ];
        assert!(Taxonomy::from_edges(&dup).is_err());
        let two_parents = [
            ("a".to_string(), "c".to_string()),
            ("b".to_string(), "c".to_string()),
        ];
        assert!(Taxonomy::from_edges(&two_parents).is_err());
        let cycle = [
            ("a".to_string(), "b".to_string()),
            ("b".to_string(), "c".to_string()),
            ("c".to_string(), "a".to_string()),
        ];
        assert!(Taxonomy::from_edges(&cycle).is_err());
        let two_roots = [
            ("a".to_string(), "b".to_string()),
            ("c".to_string(), "d".to_string()),
        ];
        assert!(Taxonomy::from_edges(&two_roots).is_err());
    }

    #[test]
    fn taxonomy_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tax.tsv");
        std::fs::write(&path, "root\tanimal\nanimal\tdog\nanimal\tcat\n").unwrap();
        let t = Taxonomy::load(&path).unwrap();
        assert_eq!(t.root(), "root");
        assert_eq!(t.depth("dog"), Some(3));
        assert_eq!(t.lcs("dog", "cat").as_deref(), Some("animal"));
    }

    #[test]
    fn aggregate_single_and_pair() {
        let t = toy_taxonomy();
        let a = score_example("dog", "dog", Some(&t));
        let report = aggregate(&[a.clone()]).unwrap();
        assert_eq!(report.f1, a.f1);
        assert_eq!(report.n_examples, 1);

        let b = score_example("dog", "chair", Some(&t));
        let pair = aggregate(&[a, b]).unwrap();
        assert_eq!(pair.f1, 0.5);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn perfect_prediction_scores_ones_everywhere() {
        let t = toy_taxonomy();
        let s = score_example("cat", "cat", Some(&t));
        assert_eq!(s.accuracy, 1.0);
        assert_eq!(s.f1, 1.0);
        assert_eq!(s.wups_0, Some(1.0));
        assert_eq!(s.wups_9, Some(1.0));
    }

    proptest! {
        #[test]
        fn f1_symmetric_under_swap(
            pa in proptest::collection::vec("[a-d]{1,2}", 0..5),
            ga in proptest::collection::vec("[a-d]{1,2}", 0..5),
        ) {
            let (p1, r1, f1a) = precision_recall_f1(&pa, &ga);
            let (p2, r2, f1b) = precision_recall_f1(&ga, &pa);
            prop_assert_eq!(p1, r2);
            prop_assert_eq!(r1, p2);
            prop_assert!((f1a - f1b).abs() < 1e-15);
            if p1 > 0.0 && r1 > 0.0 {
                prop_assert!(f1a <= p1.max(r1) + 1e-15);
                prop_assert!(f1a >= p1.min(r1) - 1e-15);
            }
        }

        #[test]
        fn wups_monotone_in_threshold(
            pa in proptest::collection::vec("(dog|cat|chair|root|animal|x)", 1..4),
            ga in proptest::collection::vec("(dog|cat|chair|root|animal|x)", 1..4),
            t1 in 0.0f64..1.0,
            t2 in 0.0f64..1.0,
        ) {
            let tax = toy_taxonomy();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            prop_assert!(wups(&pa, &ga, lo, &tax) >= wups(&pa, &ga, hi, &tax) - 1e-15);
            prop_assert!(wups(&pa, &ga, 0.0, &tax) >= wups(&pa, &ga, 0.9, &tax) - 1e-15);
        }

        #[test]
        fn exact_match_implies_all_ones(
            words in proptest::collection::vec("(dog|cat|chair|mèo)", 1..4),
        ) {
            let tax = toy_taxonomy();
            let text = words.join(" ");
            let s = score_example(&text, &text, Some(&tax));
            prop_assert_eq!(s.accuracy, 1.0);
            prop_assert_eq!(s.f1, 1.0);
            prop_assert_eq!(s.wups_0, Some(1.0));
            prop_assert_eq!(s.wups_9, Some(1.0));
        }

        #[test]
        fn wup_similarity_symmetric(
            a in "(dog|cat|chair|root|animal|zzz)",
            b in "(dog|cat|chair|root|animal|zzz)",
        ) {
            let tax = toy_taxonomy();
            prop_assert_eq!(wup_similarity(&a, &b, &tax), wup_similarity(&b, &a, &tax));
        }
    }
}
