use std::fmt;

use super::{ForestError, Span};

/// A single parse tree as a nested span structure. Leaves are word
/// positions; tags are not represented.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tree {
    Leaf(usize),
    Node { span: Span, children: Vec<Tree> },
}

impl Tree {
    /// Builds an internal node, checking that the children tile a span.
    pub fn node(children: Vec<Tree>) -> Result<Tree, ForestError> {
        let first = children.first().ok_or_else(|| ForestError::Tree("empty constituent".into()))?;
        let start = first.span().start;
        let mut end = start;
        for c in &children {
            let s = c.span();
            if s.start != end {
                return Err(ForestError::Tree(format!("children are not contiguous at {}", s.start)));
            }
            end = s.end;
        }
        Ok(Tree::Node { span: Span::new(start, end), children })
    }

    pub fn span(&self) -> Span {
        match self {
            Tree::Leaf(i) => Span::new(*i, i + 1),
            Tree::Node { span, .. } => *span,
        }
    }

    pub fn children(&self) -> &[Tree] {
        match self {
            Tree::Leaf(_) => &[],
            Tree::Node { children, .. } => children,
        }
    }

    /// Number of internal nodes.
    pub fn internal_nodes(&self) -> usize {
        match self {
            Tree::Leaf(_) => 0,
            Tree::Node { children, .. } => 1 + children.iter().map(Tree::internal_nodes).sum::<usize>(),
        }
    }

    /// True when every internal node has exactly two children.
    pub fn is_binary(&self) -> bool {
        match self {
            Tree::Leaf(_) => true,
            Tree::Node { children, .. } => children.len() == 2 && children.iter().all(Tree::is_binary),
        }
    }

    /// All internal-node spans in post-order.
    pub fn internal_spans(&self) -> Vec<Span> {
        fn walk(t: &Tree, out: &mut Vec<Span>) {
            if let Tree::Node { span, children } = t {
                children.iter().for_each(|c| walk(c, out));
                out.push(*span);
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }

    /// Renders with the given words, e.g. `((the cat) sat)`.
    pub fn to_bracketed<S: AsRef<str>>(&self, words: &[S]) -> String {
        let mut out = String::new();
        self.write_bracketed(words, &mut out);
        out
    }

    fn write_bracketed<S: AsRef<str>>(&self, words: &[S], out: &mut String) {
        match self {
            Tree::Leaf(i) => out.push_str(words[*i].as_ref()),
            Tree::Node { children, .. } => {
                out.push('(');
                for (k, c) in children.iter().enumerate() {
                    if k > 0 {
                        out.push(' ');
                    }
                    c.write_bracketed(words, out);
                }
                out.push(')');
            }
        }
    }

    /// Parses bracketed text such as `((w0 w1) w2)`. Returns the tree and
    /// its words in order. Words may not contain parentheses or whitespace.
    pub fn parse_bracketed(text: &str) -> Result<(Tree, Vec<String>), ForestError> {
        let mut tokens = Vec::new();
        let mut word = String::new();
        for ch in text.chars() {
            match ch {
                '(' | ')' => {
                    if !word.is_empty() {
                        tokens.push(Tok::Word(std::mem::take(&mut word)));
                    }
                    tokens.push(if ch == '(' { Tok::Open } else { Tok::Close });
                }
                c if c.is_whitespace() => {
                    if !word.is_empty() {
                        tokens.push(Tok::Word(std::mem::take(&mut word)));
                    }
                }
                c => word.push(c),
            }
        }
        if !word.is_empty() {
            tokens.push(Tok::Word(word));
        }

        let mut words = Vec::new();
        let mut pos = 0;
        let tree = parse_item(&tokens, &mut pos, &mut words)?;
        if pos != tokens.len() {
            return Err(ForestError::Tree("trailing input after the tree".into()));
        }
        Ok((tree, words))
    }
}

impl fmt::Display for Tree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let n = self.span().end;
        let words: Vec<String> = (0..n).map(|i| format!("w{i}")).collect();
        f.write_str(&self.to_bracketed(&words))
    }
}

enum Tok {
    Open,
    Close,
    Word(String),
}

fn parse_item(tokens: &[Tok], pos: &mut usize, words: &mut Vec<String>) -> Result<Tree, ForestError> {
    match tokens.get(*pos) {
        None => Err(ForestError::Tree("unexpected end of input".into())),
        Some(Tok::Close) => Err(ForestError::Tree("unbalanced ')'".into())),
        Some(Tok::Word(w)) => {
            *pos += 1;
            words.push(w.clone());
            Ok(Tree::Leaf(words.len() - 1))
        }
        Some(Tok::Open) => {
            *pos += 1;
            let mut children = Vec::new();
            loop {
                match tokens.get(*pos) {
                    None => return Err(ForestError::Tree("unbalanced '('".into())),
                    Some(Tok::Close) => {
                        *pos += 1;
                        break;
                    }
                    Some(_) => children.push(parse_item(tokens, pos, words)?),
                }
            }
            Tree::node(children)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render() {
        let (t, words) = Tree::parse_bracketed("((the cat) sat)").unwrap();
        assert_eq!(words, ["the", "cat", "sat"]);
        assert_eq!(t.span(), Span::new(0, 3));
        assert_eq!(t.internal_nodes(), 2);
        assert!(t.is_binary());
        assert_eq!(t.to_bracketed(&words), "((the cat) sat)");
        assert_eq!(t.to_string(), "((w0 w1) w2)");
    }

    #[test]
    fn unbalanced_is_rejected() {
        assert!(Tree::parse_bracketed("((a b) c").is_err());
        assert!(Tree::parse_bracketed("(a b))").is_err());
        assert!(Tree::parse_bracketed("()").is_err());
        assert!(Tree::parse_bracketed("").is_err());
    }

    #[test]
    fn internal_spans_post_order() {
        let (t, _) = Tree::parse_bracketed("(a (b (c d)))").unwrap();
        assert_eq!(t.internal_spans(), vec![Span::new(2, 4), Span::new(1, 4), Span::new(0, 4)]);
    }
}
