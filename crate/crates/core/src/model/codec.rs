//! Text and JSON encodings of procedures.
//!
//! Text: leaf = `L(<bits>)`, test node = `P{<ascending 1-based indices>}[<neg>,<pos>]`,
//! no whitespace. JSON: `{"n": 2, "tree": {"pool": [1, 2], "neg": ..., "pos": ...}}`
//! with leaves written as `{"leaf": "01"}`. Node-sets are never serialized; they
//! are recomputed and checked on decode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::procedure::{validate_node, Node, Procedure};
use crate::model::{Outcome, OutcomeSet, Pool, MAX_SAMPLES};

pub fn encode(proc: &Procedure) -> String {
    encode_node(proc.root())
}

pub fn encode_node(node: &Node) -> String {
    let mut out = String::new();
    write_node(node, &mut out);
    out
}

fn write_node(node: &Node, out: &mut String) {
    match node {
        Node::Leaf(o) => {
            out.push_str("L(");
            out.push_str(&o.to_bit_string());
            out.push(')');
        }
        Node::Test {
            pool,
            negative,
            positive,
        } => {
            out.push_str("P{");
            let idx: Vec<String> = pool.indices().iter().map(|i| i.to_string()).collect();
            out.push_str(&idx.join(","));
            out.push_str("}[");
            write_node(negative, out);
            out.push(',');
            write_node(positive, out);
            out.push(']');
        }
    }
}

/// Parse and validate a full procedure. `n` is taken from the leaf width.
pub fn decode(text: &str) -> Result<Procedure> {
    let (n, root) = decode_unchecked(text)?;
    Procedure::new(n, root)
}

/// Parse a subtree rooted at node-set `set` and validate it there.
pub fn decode_on(text: &str, set: &OutcomeSet) -> Result<Node> {
    let (n, root) = decode_unchecked(text)?;
    if n != set.n() {
        return Err(Error::SizeMismatch {
            expected: set.n(),
            actual: n,
        });
    }
    let report = validate_node(&root, set);
    if !report.is_valid() {
        return Err(Error::InvalidProcedure(report));
    }
    Ok(root)
}

/// Parse without structural validation; returns the sample count and root.
pub fn decode_unchecked(text: &str) -> Result<(usize, Node)> {
    let mut parser = Parser {
        bytes: text.as_bytes(),
        pos: 0,
        n: None,
        pools: Vec::new(),
    };
    let root = parser.node()?;
    if parser.pos != parser.bytes.len() {
        return Err(parser.error("trailing characters"));
    }
    let n = parser.n.ok_or_else(|| parser.error("no leaves"))?;
    for (offset, indices) in std::mem::take(&mut parser.pools) {
        if indices.iter().any(|&i| i > n) {
            return Err(Error::Malformed {
                offset,
                message: format!("pool index exceeds n = {n}"),
            });
        }
    }
    let root = parser.finish(root, n)?;
    Ok((n, root))
}

/// Intermediate tree: pools are kept as index lists until `n` is known.
enum Raw {
    Leaf(Outcome),
    Test(Vec<usize>, Box<Raw>, Box<Raw>),
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
    n: Option<usize>,
    pools: Vec<(usize, Vec<usize>)>,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> Error {
        Error::Malformed {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn expect(&mut self, byte: u8) -> Result<()> {
        if self.bytes.get(self.pos) == Some(&byte) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.error(&format!("expected '{}'", byte as char)))
        }
    }

    fn node(&mut self) -> Result<Raw> {
        match self.bytes.get(self.pos) {
            Some(b'L') => {
                self.pos += 1;
                self.expect(b'(')?;
                let start = self.pos;
                while matches!(self.bytes.get(self.pos), Some(b'0' | b'1')) {
                    self.pos += 1;
                }
                let bits = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap();
                if bits.is_empty() || bits.len() > MAX_SAMPLES {
                    return Err(self.error("leaf must have 1..=64 bits"));
                }
                match self.n {
                    Some(n) if n != bits.len() => {
                        return Err(self.error(&format!("leaf width {} differs from {n}", bits.len())))
                    }
                    _ => self.n = Some(bits.len()),
                }
                self.expect(b')')?;
                Ok(Raw::Leaf(Outcome::parse(bits)?))
            }
            Some(b'P') => {
                self.pos += 1;
                self.expect(b'{')?;
                let offset = self.pos;
                let mut indices = Vec::new();
                loop {
                    let start = self.pos;
                    while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
                        self.pos += 1;
                    }
                    let idx: usize = std::str::from_utf8(&self.bytes[start..self.pos])
                        .unwrap()
                        .parse()
                        .map_err(|_| self.error("expected a sample index"))?;
                    if idx == 0 || indices.last().is_some_and(|&last| last >= idx) {
                        return Err(self.error("pool indices must be ascending and 1-based"));
                    }
                    indices.push(idx);
                    match self.bytes.get(self.pos) {
                        Some(b',') => self.pos += 1,
                        Some(b'}') => {
                            self.pos += 1;
                            break;
                        }
                        _ => return Err(self.error("expected ',' or '}'")),
                    }
                }
                self.pools.push((offset, indices.clone()));
                self.expect(b'[')?;
                let neg = self.node()?;
                self.expect(b',')?;
                let pos = self.node()?;
                self.expect(b']')?;
                Ok(Raw::Test(indices, Box::new(neg), Box::new(pos)))
            }
            _ => Err(self.error("expected 'L' or 'P'")),
        }
    }

    fn finish(&self, raw: Raw, n: usize) -> Result<Node> {
        Ok(match raw {
            Raw::Leaf(o) => Node::Leaf(o),
            Raw::Test(indices, neg, pos) => Node::test(
                Pool::from_indices(n, &indices)?,
                self.finish(*neg, n)?,
                self.finish(*pos, n)?,
            ),
        })
    }
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
#[serde(untagged)]
pub enum JsonNode {
    Test {
        pool: Vec<usize>,
        neg: Box<JsonNode>,
        pos: Box<JsonNode>,
    },
    Leaf {
        leaf: String,
    },
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct JsonProcedure {
    pub n: usize,
    pub tree: JsonNode,
}

pub fn to_json_node(node: &Node) -> JsonNode {
    match node {
        Node::Leaf(o) => JsonNode::Leaf {
            leaf: o.to_bit_string(),
        },
        Node::Test {
            pool,
            negative,
            positive,
        } => JsonNode::Test {
            pool: pool.indices(),
            neg: Box::new(to_json_node(negative)),
            pos: Box::new(to_json_node(positive)),
        },
    }
}

pub fn to_json(proc: &Procedure) -> JsonProcedure {
    JsonProcedure {
        n: proc.n(),
        tree: to_json_node(proc.root()),
    }
}

fn from_json_node(node: &JsonNode, n: usize) -> Result<Node> {
    Ok(match node {
        JsonNode::Leaf { leaf } => {
            let o = Outcome::parse(leaf)?;
            if o.n() != n {
                return Err(Error::SizeMismatch {
                    expected: n,
                    actual: o.n(),
                });
            }
            Node::Leaf(o)
        }
        JsonNode::Test { pool, neg, pos } => Node::test(
            Pool::from_indices(n, pool)?,
            from_json_node(neg, n)?,
            from_json_node(pos, n)?,
        ),
    })
}

pub fn from_json(json: &JsonProcedure) -> Result<Procedure> {
    Procedure::new(json.n, from_json_node(&json.tree, json.n)?)
}

pub fn encode_json(proc: &Procedure) -> String {
    serde_json::to_string(&to_json(proc)).expect("procedure JSON is always serializable")
}

pub fn decode_json(text: &str) -> Result<Procedure> {
    from_json(&serde_json::from_str(text)?)
}
