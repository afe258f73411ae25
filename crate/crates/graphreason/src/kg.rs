//! Class vocabulary and weighted knowledge graph over classes.
//!
//! Edges are grouped into named types (`is-part-of`, `similar-to`, ...),
//! each stored as a dense `C x C` matrix indexed `[source][destination]`.
//! Directedness is a property of the data: a type is directed exactly when
//! its matrix is asymmetric. Directed types get a transposed twin with an
//! `-inv` suffix so information can also flow against the arrow, and rows
//! are normalized to unit sum before propagation so a node distributes its
//! evidence rather than amplifying it.
//!
//! On disk a graph is a TSV of `edge_type<TAB>src<TAB>dst<TAB>weight`
//! lines; `#` starts a comment and duplicate lines sum their weights.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub const INVERSE_SUFFIX: &str = "-inv";

#[derive(Debug, Error)]
pub enum KgError {
    #[error("class vocabulary is empty")]
    EmptyVocabulary,
    #[error("duplicate class name '{0}'")]
    DuplicateClass(String),
    #[error("blank class name at index {0}")]
    BlankClass(usize),
    #[error("unknown class '{name}' at line {line}")]
    UnknownClass { name: String, line: usize },
    #[error("line {line}: expected 4 tab-separated fields, got {got}")]
    BadFieldCount { line: usize, got: usize },
    #[error("line {line}: bad weight '{raw}'")]
    BadWeight { line: usize, raw: String },
    #[error("edge type name must not be empty (line {line})")]
    EmptyEdgeType { line: usize },
    #[error("negative weight {weight} on '{edge_type}' {src}->{dst}")]
    NegativeWeight {
        edge_type: String,
        src: String,
        dst: String,
        weight: f64,
    },
    #[error("non-finite weight on '{edge_type}' {src}->{dst}")]
    NonFiniteWeight {
        edge_type: String,
        src: String,
        dst: String,
    },
    #[error("row for '{src}' in '{edge_type}' sums to {sum}, expected 0 or 1")]
    BadRowSum {
        edge_type: String,
        src: String,
        sum: f64,
    },
    #[error("directed type '{0}' has no '{0}{INVERSE_SUFFIX}' twin")]
    MissingInverse(String),
    #[error("'{0}{INVERSE_SUFFIX}' is not the transpose of '{0}'")]
    BadInverse(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Ordered class names with reverse lookup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassVocabulary {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl ClassVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self, KgError> {
        if names.is_empty() {
            return Err(KgError::EmptyVocabulary);
        }
        let mut index = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(KgError::BlankClass(i));
            }
            if index.insert(n.clone(), i).is_some() {
                return Err(KgError::DuplicateClass(n.clone()));
            }
        }
        Ok(ClassVocabulary { names, index })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// One class name per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for n in &self.names {
            s.push_str(n);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, KgError> {
        let names = text
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        Self::new(names)
    }

    pub fn save(&self, path: &Path) -> Result<(), KgError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, KgError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Dense `C x C` weights for one edge type, `[src * C + dst]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMatrix {
    classes: usize,
    weights: Vec<f64>,
}

impl EdgeMatrix {
    pub fn zeros(classes: usize) -> Self {
        EdgeMatrix {
            classes,
            weights: vec![0.0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn at(&self, src: usize, dst: usize) -> f64 {
        self.weights[src * self.classes + dst]
    }

    pub fn add(&mut self, src: usize, dst: usize, w: f64) {
        self.weights[src * self.classes + dst] += w;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_symmetric(&self) -> bool {
        let c = self.classes;
        for i in 0..c {
            for j in (i + 1)..c {
                if self.weights[i * c + j] != self.weights[j * c + i] {
                    return false;
                }
            }
        }
        true
    }

    pub fn transposed(&self) -> EdgeMatrix {
        let c = self.classes;
        let mut t = EdgeMatrix::zeros(c);
        for i in 0..c {
            for j in 0..c {
                t.weights[j * c + i] = self.weights[i * c + j];
            }
        }
        t
    }

    /// Scale each nonzero row to unit sum. Rows already within 1e-12 of a
    /// unit sum are left untouched, so normalizing twice is bit-identical
    /// to normalizing once.
    pub fn row_normalized(&self) -> EdgeMatrix {
        let c = self.classes;
        let mut out = self.clone();
        for i in 0..c {
            let row = &mut out.weights[i * c..(i + 1) * c];
            let s: f64 = row.iter().sum();
            if s == 0.0 || (s - 1.0).abs() <= 1e-12 {
                continue;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        out
    }

    fn same_nonzero_pattern_as_transpose_of(&self, other: &EdgeMatrix) -> bool {
        let c = self.classes;
        for i in 0..c {
            for j in 0..c {
                let a = self.weights[i * c + j] != 0.0;
                let b = other.weights[j * c + i] != 0.0;
                if a != b {
                    return false;
                }
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    classes: ClassVocabulary,
    edges: BTreeMap<String, EdgeMatrix>,
}

impl KnowledgeGraph {
    pub fn new(classes: ClassVocabulary) -> Self {
        KnowledgeGraph {
            classes,
            edges: BTreeMap::new(),
        }
    }

    pub fn classes(&self) -> &ClassVocabulary {
        &self.classes
    }

    /// Edge type names in deterministic (sorted) order.
    pub fn edge_types(&self) -> impl Iterator<Item = &str> {
        self.edges.keys().map(|s| s.as_str())
    }

    pub fn num_edge_types(&self) -> usize {
        self.edges.len()
    }

    pub fn matrix(&self, edge_type: &str) -> Option<&EdgeMatrix> {
        self.edges.get(edge_type)
    }

    pub fn add_edge(&mut self, edge_type: &str, src: usize, dst: usize, w: f64) {
        let c = self.classes.len();
        self.edges
            .entry(edge_type.to_string())
            .or_insert_with(|| EdgeMatrix::zeros(c))
            .add(src, dst, w);
    }

    /// Add a symmetric relation (both directions) in one call.
    pub fn add_symmetric_edge(&mut self, edge_type: &str, a: usize, b: usize, w: f64) {
        self.add_edge(edge_type, a, b, w);
        if a != b {
            self.add_edge(edge_type, b, a, w);
        }
    }

    pub fn is_directed(&self, edge_type: &str) -> Option<bool> {
        self.edges.get(edge_type).map(|m| !m.is_symmetric())
    }

    /// For every directed type `t` (asymmetric matrix, name not already an
    /// inverse), set `t-inv` to the transpose of `t`. Symmetric types are
    /// skipped, and inverses of inverses are never created, so the
    /// operation is idempotent.
    pub fn add_inverse_edges(&mut self) {
        let directed: Vec<String> = self
            .edges
            .iter()
            .filter(|(name, m)| !name.ends_with(INVERSE_SUFFIX) && !m.is_symmetric())
            .map(|(name, _)| name.clone())
            .collect();
        for name in directed {
            let t = self.edges[&name].transposed();
            self.edges.insert(format!("{name}{INVERSE_SUFFIX}"), t);
        }
    }

    /// Row-normalize every edge type (see [`EdgeMatrix::row_normalized`]).
    pub fn row_normalized(&self) -> KnowledgeGraph {
        KnowledgeGraph {
            classes: self.classes.clone(),
            edges: self
                .edges
                .iter()
                .map(|(k, m)| (k.clone(), m.row_normalized()))
                .collect(),
        }
    }

    /// Check the graph is ready for propagation: weights finite and
    /// non-negative, every row summing to 0 or 1 (within 1e-9), and every
    /// directed type paired with an `-inv` twin whose nonzero pattern is
    /// the transpose.
    pub fn validate_ready(&self) -> Result<(), KgError> {
        let c = self.classes.len();
        for (name, m) in &self.edges {
            for src in 0..c {
                let mut sum = 0.0;
                for dst in 0..c {
                    let w = m.at(src, dst);
                    if !w.is_finite() {
                        return Err(KgError::NonFiniteWeight {
                            edge_type: name.clone(),
                            src: self.classes.name(src).to_string(),
                            dst: self.classes.name(dst).to_string(),
                        });
                    }
                    if w < 0.0 {
                        return Err(KgError::NegativeWeight {
                            edge_type: name.clone(),
                            src: self.classes.name(src).to_string(),
                            dst: self.classes.name(dst).to_string(),
                            weight: w,
                        });
                    }
                    sum += w;
                }
                if sum != 0.0 && (sum - 1.0).abs() > 1e-9 {
                    return Err(KgError::BadRowSum {
                        edge_type: name.clone(),
                        src: self.classes.name(src).to_string(),
                        sum,
                    });
                }
            }
            if !name.ends_with(INVERSE_SUFFIX) && !m.is_symmetric() {
                let twin = self
                    .edges
                    .get(&format!("{name}{INVERSE_SUFFIX}"))
                    .ok_or_else(|| KgError::MissingInverse(name.clone()))?;
                if !twin.same_nonzero_pattern_as_transpose_of(m) {
                    return Err(KgError::BadInverse(name.clone()));
                }
            }
        }
        Ok(())
    }

    /// Deterministic TSV form: types sorted, then by source and destination
    /// index; zero weights omitted. Weights print in the shortest decimal
    /// form that parses back to the same f64.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("# edge_type\tsrc\tdst\tweight\n");
        for (name, m) in &self.edges {
            let c = m.classes();
            for src in 0..c {
                for dst in 0..c {
                    let w = m.at(src, dst);
                    if w != 0.0 {
                        let _ = writeln!(
                            s,
                            "{name}\t{}\t{}\t{w}",
                            self.classes.name(src),
                            self.classes.name(dst)
                        );
                    }
                }
            }
        }
        s
    }

    pub fn from_tsv(classes: ClassVocabulary, text: &str) -> Result<Self, KgError> {
        let mut kg = KnowledgeGraph::new(classes);
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').map(|f| f.trim()).collect();
            if fields.len() != 4 {
                return Err(KgError::BadFieldCount {
                    line: line_no,
                    got: fields.len(),
                });
            }
            let (ty, src, dst, wraw) = (fields[0], fields[1], fields[2], fields[3]);
            if ty.is_empty() {
                return Err(KgError::EmptyEdgeType { line: line_no });
            }
            let si = kg
                .classes
                .index_of(src)
                .ok_or_else(|| KgError::UnknownClass {
                    name: src.to_string(),
                    line: line_no,
                })?;
            let di = kg
                .classes
                .index_of(dst)
                .ok_or_else(|| KgError::UnknownClass {
                    name: dst.to_string(),
                    line: line_no,
                })?;
            let w: f64 = wraw.parse().map_err(|_| KgError::BadWeight {
                line: line_no,
                raw: wraw.to_string(),
            })?;
            kg.add_edge(ty, si, di, w);
        }
        Ok(kg)
    }

    pub fn save(&self, path: &Path) -> Result<(), KgError> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(classes: ClassVocabulary, path: &Path) -> Result<Self, KgError> {
        Self::from_tsv(classes, &std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> ClassVocabulary {
        ClassVocabulary::new(vec![
            "wheel".into(),
            "car".into(),
            "truck".into(),
            "road".into(),
        ])
        .unwrap()
    }

    #[test]
    fn vocabulary_rejects_duplicates_and_blanks() {
        assert!(matches!(
            ClassVocabulary::new(vec!["a".into(), "a".into()]),
            Err(KgError::DuplicateClass(_))
        ));
        assert!(matches!(
            ClassVocabulary::new(vec!["a".into(), " ".into()]),
            Err(KgError::BlankClass(1))
        ));
        assert!(matches!(
            ClassVocabulary::new(vec![]),
            Err(KgError::EmptyVocabulary)
        ));
    }

    #[test]
    fn duplicate_edges_sum() {
        let mut kg = KnowledgeGraph::new(vocab());
        kg.add_edge("is-part-of", 0, 1, 0.5);
        kg.add_edge("is-part-of", 0, 1, 0.25);
        assert_eq!(kg.matrix("is-part-of").unwrap().at(0, 1), 0.75);
    }

    #[test]
    fn directedness_follows_the_matrix() {
        let mut kg = KnowledgeGraph::new(vocab());
        kg.add_edge("is-part-of", 0, 1, 1.0);
        kg.add_symmetric_edge("similar-to", 1, 2, 1.0);
        assert_eq!(kg.is_directed("is-part-of"), Some(true));
        assert_eq!(kg.is_directed("similar-to"), Some(false));
        assert_eq!(kg.is_directed("missing"), None);
    }

    #[test]
    fn add_inverse_edges_is_idempotent_and_skips_symmetric() {
        let mut kg = KnowledgeGraph::new(vocab());
        kg.add_edge("is-part-of", 0, 1, 1.0);
        kg.add_edge("is-part-of", 0, 2, 0.5);
        kg.add_symmetric_edge("similar-to", 1, 2, 1.0);
        kg.add_inverse_edges();
        let types1: Vec<String> = kg.edge_types().map(String::from).collect();
        assert_eq!(types1, vec!["is-part-of", "is-part-of-inv", "similar-to"]);
        assert_eq!(kg.matrix("is-part-of-inv").unwrap().at(1, 0), 1.0);
        assert_eq!(kg.matrix("is-part-of-inv").unwrap().at(2, 0), 0.5);
        let snapshot = kg.clone();
        kg.add_inverse_edges();
        assert_eq!(kg, snapshot);
    }

    #[test]
    fn row_normalize_unit_rows_and_exact_idempotence() {
        let mut kg = KnowledgeGraph::new(vocab());
        kg.add_edge("rel", 0, 1, 2.0);
        kg.add_edge("rel", 0, 2, 6.0);
        kg.add_edge("rel", 1, 3, 5.0);
        let once = kg.row_normalized();
        let m = once.matrix("rel").unwrap();
        assert!((m.at(0, 1) - 0.25).abs() < 1e-15);
        assert!((m.at(0, 2) - 0.75).abs() < 1e-15);
        assert_eq!(m.at(1, 3), 1.0);
        assert_eq!(m.at(2, 0), 0.0);
        let twice = once.row_normalized();
        assert_eq!(
            once.matrix("rel").unwrap().as_slice(),
            twice.matrix("rel").unwrap().as_slice()
        );
    }

    #[test]
    fn validate_ready_accepts_prepared_graph() {
        let mut kg = KnowledgeGraph::new(vocab());
        kg.add_edge("is-part-of", 0, 1, 1.0);
        kg.add_symmetric_edge("similar-to", 1, 2, 1.0);
        kg.add_inverse_edges();
        let kg = kg.row_normalized();
        kg.validate_ready().unwrap();
    }

    #[test]
    fn validate_ready_rejects_problems() {
        let mut kg = KnowledgeGraph::new(vocab());
        kg.add_edge("is-part-of", 0, 1, 1.0);
        assert!(matches!(
            kg.validate_ready(),
            Err(KgError::MissingInverse(_))
        ));

        let mut kg2 = KnowledgeGraph::new(vocab());
        kg2.add_symmetric_edge("similar-to", 0, 1, -1.0);
        assert!(matches!(
            kg2.validate_ready(),
            Err(KgError::NegativeWeight { .. })
        ));

        let mut kg3 = KnowledgeGraph::new(vocab());
        kg3.add_symmetric_edge("similar-to", 0, 1, 0.7);
        assert!(matches!(kg3.validate_ready(), Err(KgError::BadRowSum { .. })));
    }

    #[test]
    fn tsv_roundtrip_is_exact() {
        let mut kg = KnowledgeGraph::new(vocab());
        kg.add_edge("is-part-of", 0, 1, 0.1 + 0.2); // not exactly 0.3
        kg.add_edge("is-part-of", 0, 2, 1.0 / 3.0);
        kg.add_symmetric_edge("similar-to", 1, 2, 0.7);
        let text = kg.to_tsv();
        let back = KnowledgeGraph::from_tsv(vocab(), &text).unwrap();
        assert_eq!(kg, back);
    }

    #[test]
    fn tsv_errors_carry_line_numbers() {
        let text = "is-part-of\twheel\tcar\t1.0\nis-part-of\twheel\tboat\t1.0\n";
        match KnowledgeGraph::from_tsv(vocab(), text) {
            Err(KgError::UnknownClass { name, line }) => {
                assert_eq!(name, "boat");
                assert_eq!(line, 2);
            }
            other => panic!("expected UnknownClass, got {other:?}"),
        }
        let bad = "is-part-of\twheel\tcar\n";
        assert!(matches!(
            KnowledgeGraph::from_tsv(vocab(), bad),
            Err(KgError::BadFieldCount { line: 1, got: 3 })
        ));
    }

    #[test]
    fn tsv_skips_comments_and_sums_duplicates() {
        let text = "# header\nrel\twheel\tcar\t0.5\n\nrel\twheel\tcar\t0.5 # tail comment\n";
        let kg = KnowledgeGraph::from_tsv(vocab(), text).unwrap();
        assert_eq!(kg.matrix("rel").unwrap().at(0, 1), 1.0);
    }

    #[test]
    fn vocabulary_text_roundtrip() {
        let v = vocab();
        let back = ClassVocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(v, back);
    }
}
