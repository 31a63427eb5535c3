//! Line-based forest file format.
//!
//! ```text
//! sent 3             # word count; leaves are ids 0..3
//! probs log          # optional: edge probabilities are natural logs
//! node 3 0 2         # node <id> <start> <end>
//! node 4 0 3
//! edge 3 0 0 1       # edge <head> <prob> <tail> ...
//! edge 4 0 3 2
//! ```
//!
//! A file holds one forest per blank-line separated block. `#` starts a
//! comment.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use super::{ForestBuilder, ForestError, PackedForest};

/// One forest block of a multi-forest file, with its 1-based first line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForestBlock<'a> {
    pub first_line: usize,
    pub lines: Vec<&'a str>,
}

impl ForestBlock<'_> {
    pub fn parse(&self) -> Result<PackedForest, ForestError> {
        parse_lines(self.lines.iter().copied(), self.first_line)
    }
}

/// Splits a multi-forest file into blocks without parsing them.
pub fn split_blocks(text: &str) -> Vec<ForestBlock<'_>> {
    let mut blocks = Vec::new();
    let mut current: Option<ForestBlock<'_>> = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            if let Some(b) = current.take() {
                blocks.push(b);
            }
            continue;
        }
        current.get_or_insert_with(|| ForestBlock { first_line: i + 1, lines: Vec::new() }).lines.push(line);
    }
    blocks.extend(current);
    blocks
}

/// Parses a single forest.
pub fn parse_forest(text: &str) -> Result<PackedForest, ForestError> {
    match split_blocks(text).as_slice() {
        [one] => one.parse(),
        [] => Err(ForestError::Format { line: 1, msg: "no forest found".into() }),
        [_, second, ..] => {
            Err(ForestError::Format { line: second.first_line, msg: "expected a single forest block".into() })
        }
    }
}

/// Parses every block of a multi-forest file.
pub fn parse_forests(text: &str) -> Result<Vec<PackedForest>, ForestError> {
    split_blocks(text).iter().map(ForestBlock::parse).collect()
}

fn field<T: FromStr>(tok: Option<&str>, what: &str, line: usize) -> Result<T, ForestError> {
    let tok = tok.ok_or_else(|| ForestError::Format { line, msg: format!("missing {what}") })?;
    tok.parse().map_err(|_| ForestError::Format { line, msg: format!("invalid {what} '{tok}'") })
}

fn parse_lines<'a>(lines: impl Iterator<Item = &'a str>, first_line: usize) -> Result<PackedForest, ForestError> {
    let mut builder: Option<ForestBuilder> = None;
    let mut log_scale = false;
    let mut last_line = first_line;
    for (offset, raw) in lines.enumerate() {
        let line = first_line + offset;
        last_line = line;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut toks = content.split_whitespace();
        let keyword = toks.next().expect("non-empty");
        match (keyword, builder.as_mut()) {
            ("sent", None) => {
                let k: usize = field(toks.next(), "word count", line)?;
                if k == 0 {
                    return Err(ForestError::Format { line, msg: "word count must be positive".into() });
                }
                builder = Some(ForestBuilder::new(k));
            }
            ("sent", Some(_)) => {
                return Err(ForestError::Format { line, msg: "second 'sent' line in one block".into() });
            }
            (_, None) => {
                return Err(ForestError::Format { line, msg: "block must start with 'sent <k>'".into() });
            }
            ("probs", Some(_)) => match toks.next() {
                Some("log") => log_scale = true,
                Some("linear") => log_scale = false,
                other => return Err(ForestError::Format { line, msg: format!("unknown probability scale {other:?}") }),
            },
            ("node", Some(b)) => {
                let id = field(toks.next(), "node id", line)?;
                let start = field(toks.next(), "span start", line)?;
                let end = field(toks.next(), "span end", line)?;
                b.add_phrase(id, start, end, line)?;
            }
            ("edge", Some(b)) => {
                let head = field(toks.next(), "edge head", line)?;
                let raw_prob: f64 = field(toks.next(), "edge probability", line)?;
                let prob = if log_scale { raw_prob.exp() } else { raw_prob };
                if prob.is_nan() || prob <= 0.0 || !raw_prob.is_finite() {
                    return Err(ForestError::Format {
                        line,
                        msg: format!("edge probability must be positive, got {raw_prob}"),
                    });
                }
                let tails = toks.map(|t| field(Some(t), "tail id", line)).collect::<Result<Vec<usize>, _>>()?;
                b.add_edge(head, tails, prob, line)?;
                continue;
            }
            (other, Some(_)) => {
                return Err(ForestError::Format { line, msg: format!("unknown line type '{other}'") });
            }
        }
        if let Some(extra) = toks.next() {
            return Err(ForestError::Format { line, msg: format!("unexpected token '{extra}'") });
        }
    }
    let builder = builder.ok_or(ForestError::Format { line: last_line, msg: "missing 'sent' line".into() })?;
    builder.finish().map_err(|e| match e {
        ForestError::Format { line: 0, msg } => ForestError::Format { line: first_line, msg },
        other => other,
    })
}

impl PackedForest {
    /// Serializes in the forest file format (linear probabilities).
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "sent {}", self.sentence_len()).unwrap();
        for nd in self.nodes().iter().skip(self.sentence_len()) {
            writeln!(out, "node {} {} {}", nd.id, nd.span.start, nd.span.end).unwrap();
        }
        for e in self.edges() {
            write!(out, "edge {} {}", e.head, e.prob).unwrap();
            for t in &e.tails {
                write!(out, " {t}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for PackedForest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_of(err: ForestError) -> usize {
        match err {
            ForestError::Format { line, .. } => line,
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn log_probabilities() {
        let f = parse_forest(
            "sent 3\nprobs log\nnode 3 0 2\nnode 4 1 3\nnode 5 0 3\n\
             edge 3 0 0 1\nedge 4 0 1 2\nedge 5 -0.5108256237659907 3 2\nedge 5 -0.916290731874155 0 4\n",
        )
        .unwrap();
        let p: Vec<f64> = f.incoming(5).iter().map(|&k| f.edges()[k].prob).collect();
        assert!((p[0] - 0.6).abs() < 1e-12 && (p[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn probabilities_are_normalized() {
        let f = parse_forest("sent 2\nnode 2 0 2\nedge 2 3 0 1\n").unwrap();
        assert_eq!(f.edges()[0].prob, 1.0);
    }

    #[test]
    fn errors_carry_line_numbers() {
        // span violation
        assert_eq!(line_of(parse_forest("sent 2\nnode 2 0 3\n").unwrap_err()), 2);
        // duplicate id
        assert_eq!(line_of(parse_forest("sent 2\nnode 2 0 2\nnode 2 0 2\n").unwrap_err()), 3);
        // nonpositive probability
        assert_eq!(line_of(parse_forest("sent 2\nnode 2 0 2\nedge 2 0 0 1\n").unwrap_err()), 3);
        assert_eq!(line_of(parse_forest("sent 2\nnode 2 0 2\nedge 2 -1 0 1\n").unwrap_err()), 3);
        // tails do not tile the head
        assert_eq!(line_of(parse_forest("sent 3\nnode 3 0 3\nedge 3 1 0 2\n").unwrap_err()), 3);
        // missing root
        assert!(parse_forest("sent 3\nnode 3 0 2\nedge 3 1 0 1\n").is_err());
        // reserved leaf id
        assert_eq!(line_of(parse_forest("sent 2\nnode 1 0 2\n").unwrap_err()), 2);
        // bad token
        assert_eq!(line_of(parse_forest("sent 2\nnode 2 0 x\n").unwrap_err()), 2);
    }

    #[test]
    fn cycles_are_rejected() {
        // Two whole-span phrase nodes feeding each other through unary edges.
        let text = "sent 2\nnode 2 0 2\nnode 3 0 2\nnode 4 0 2\nedge 4 1 2\nedge 2 1 3\nedge 3 1 2\n";
        let err = parse_forest(text).unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
    }

    #[test]
    fn unreachable_nodes_are_pruned() {
        let f = parse_forest("sent 3\nnode 3 0 2\nnode 4 0 3\nnode 5 1 3\nedge 3 1 0 1\nedge 4 1 3 2\nedge 5 1 1 2\n")
            .unwrap();
        assert!(!f.contains(5));
        assert_eq!(f.edges().len(), 2);
    }

    #[test]
    fn phrase_without_edges_is_an_error() {
        let err = parse_forest("sent 2\nnode 2 0 2\n").unwrap_err();
        assert_eq!(line_of(err), 2);
    }

    #[test]
    fn multi_block_files_keep_absolute_lines() {
        let text = "sent 1\n\n# second\nsent 2\nnode 2 0 2\nedge 2 1 0 1\n\nsent 2\nnode 2 0 5\n";
        let blocks = split_blocks(text);
        assert_eq!(blocks.len(), 3);
        assert_eq!(blocks[1].first_line, 3);
        let err = parse_forests(text).unwrap_err();
        assert_eq!(line_of(err), 9);
    }
}
