//! Word-vector tables in the plain-text `token v1 … vd` format.

use std::collections::HashMap;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

/// Mean token vector of a phrase; `oov` is set when no token was found.
#[derive(Debug, Clone, PartialEq)]
pub struct PhraseEmbedding {
    pub vector: Vec<f64>,
    pub oov: bool,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        EmbeddingTable {
            dim,
            vectors: HashMap::new(),
        }
    }

    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Shape(format!("vector of length {} in a {}-d table", vector.len(), self.dim)));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("embedding entries must be finite".into()));
        }
        self.vectors.insert(token.into(), vector);
        Ok(())
    }

    /// Parse the text format. Blank lines are skipped; a leading
    /// `<count> <dim>` header line (word2vec style) is accepted. Later
    /// duplicates of a token replace earlier ones.
    pub fn parse(text: &str) -> Result<Self> {
        let mut table: Option<EmbeddingTable> = None;
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let mut fields = line.split_whitespace();
            let Some(token) = fields.next() else { continue };
            let rest: Vec<&str> = fields.collect();
            if table.is_none() && rest.len() == 1 && token.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
                continue;
            }
            let vector = rest
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<Result<Vec<f64>, _>>()
                .map_err(|e| Error::Parse {
                    line: lineno,
                    message: format!("bad component: {e}"),
                })?;
            if vector.is_empty() {
                return Err(Error::Parse {
                    line: lineno,
                    message: format!("token {token:?} has no vector"),
                });
            }
            let t = table.get_or_insert_with(|| EmbeddingTable::new(vector.len()));
            t.insert(token, vector).map_err(|e| Error::Parse {
                line: lineno,
                message: e.to_string(),
            })?;
        }
        Ok(table.unwrap_or_default())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }
}

pub fn embed_phrase(np: &str, table: &EmbeddingTable) -> PhraseEmbedding {
    let mut sum = vec![0.0; table.dim()];
    let mut found = 0usize;
    for tok in np.split_whitespace() {
        if let Some(v) = table.get(tok) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            found += 1;
        }
    }
    if found > 0 {
        sum.iter_mut().for_each(|s| *s /= found as f64);
    }
    PhraseEmbedding {
        vector: sum,
        oov: found == 0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> EmbeddingTable {
        EmbeddingTable::parse("dog 1 2\ncat 3 -4\n\n").unwrap()
    }

    #[test]
    fn single_token_exact() {
        assert_eq!(embed_phrase("dog", &table()), PhraseEmbedding { vector: vec![1.0, 2.0], oov: false });
    }

    #[test]
    fn mean_of_two() {
        assert_eq!(embed_phrase("dog cat", &table()).vector, vec![2.0, -1.0]);
        assert_eq!(embed_phrase("dog zebra cat", &table()).vector, vec![2.0, -1.0]);
    }

    #[test]
    fn all_oov() {
        assert_eq!(embed_phrase("zebra", &table()), PhraseEmbedding { vector: vec![0.0, 0.0], oov: true });
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        match EmbeddingTable::parse("a 1 2\nb 1 x") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        match EmbeddingTable::parse("a 1 2\nb 1 2 3") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(EmbeddingTable::parse("a\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(EmbeddingTable::parse("a NaN 1"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn header_line_skipped() {
        let t = EmbeddingTable::parse("2 3\na 1 2 3\nb 4 5 6\n").unwrap();
        assert_eq!((t.len(), t.dim()), (2, 3));
        assert!(EmbeddingTable::parse("").unwrap().is_empty());
    }
}
