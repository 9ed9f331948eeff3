//! Lexing of a Python subset into a lossless lexeme stream, and extraction of
//! code blocks from free-form instruction outputs.
//!
//! Every token carries the trivia (whitespace, comments, blank lines, line
//! continuations) that precedes it, so a token list alone reproduces the
//! source it was lexed from.

use serde::{Deserialize, Serialize};
use std::fmt;

use crate::error::{CctError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Identifier,
    Keyword,
    Operator,
    Literal,
    Punctuation,
    Newline,
    Indent,
    Dedent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub kind: TokenKind,
    /// Exact source lexeme. Empty for indentation tokens and for the
    /// end-of-input newline that carries trailing trivia.
    pub text: String,
    pub span: Span,
    /// Whitespace and comments between the previous token and this one.
    pub leading: String,
}

impl Token {
    /// Vocabulary key: the lexeme itself, or a marker for layout tokens.
    pub fn lexeme(&self) -> &str {
        match self.kind {
            TokenKind::Newline => NEWLINE_LEXEME,
            TokenKind::Indent => INDENT_LEXEME,
            TokenKind::Dedent => DEDENT_LEXEME,
            _ => &self.text,
        }
    }

    fn is_synthetic(&self) -> bool {
        matches!(
            self.kind,
            TokenKind::Newline | TokenKind::Indent | TokenKind::Dedent
        )
    }
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} {:?}", self.kind, self.lexeme())
    }
}

pub const NEWLINE_LEXEME: &str = "<NL>";
pub const INDENT_LEXEME: &str = "<INDENT>";
pub const DEDENT_LEXEME: &str = "<DEDENT>";

pub const KEYWORDS: &[&str] = &[
    "False", "None", "True", "as", "assert", "async", "await", "break", "class", "continue", "def",
    "del", "elif", "else", "except", "finally", "for", "from", "global", "if", "import", "lambda",
    "nonlocal", "pass", "raise", "return", "try", "while", "with", "yield",
];

/// Word operators. They lex as identifiers first and are reclassified.
pub const WORD_OPERATORS: &[&str] = &["and", "or", "not", "in", "is"];

/// Symbolic operators, longest first for maximal munch.
const SYMBOL_OPERATORS: &[&str] = &[
    "**", "//", "==", "!=", "<=", ">=", "+=", "-=", "+", "-", "*", "/", "%", "<", ">", "=",
];

/// Multi-character lexemes outside the operator set. They lex as single
/// punctuation tokens so that e.g. `*=` never splits into `*` and `=`.
const MULTI_PUNCT: &[&str] = &[
    "**=", "//=", ">>=", "<<=", "...", "->", "*=", "/=", "%=", "&=", "|=", "^=", ":=", ">>", "<<",
];

/// A lexed source text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceUnit {
    pub raw: String,
    pub tokens: Vec<Token>,
    pub line_offsets: Vec<usize>,
}

impl SourceUnit {
    pub fn new(raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let tokens = tokenize(&raw);
        let line_offsets = std::iter::once(0)
            .chain(raw.match_indices('\n').map(|(i, _)| i + 1))
            .collect();
        Self {
            raw,
            tokens,
            line_offsets,
        }
    }

    /// Zero-based (line, column) of a byte offset.
    pub fn line_col(&self, offset: usize) -> (usize, usize) {
        let line = match self.line_offsets.binary_search(&offset) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        (line, offset - self.line_offsets[line])
    }

    /// Source text covered by the token range `[start, end)`, excluding the
    /// leading trivia of the first token.
    pub fn slice(&self, start: usize, end: usize) -> &str {
        if start >= end {
            return "";
        }
        &self.raw[self.tokens[start].span.start..self.tokens[end - 1].span.end]
    }
}

/// Lexes `source` into tokens. Total: characters outside the lexical grammar
/// become single-character punctuation tokens.
pub fn tokenize(source: &str) -> Vec<Token> {
    Lexer::new(source).run()
}

/// Reassembles the source covered by `tokens` from their trivia and lexemes.
pub fn detokenize(tokens: &[Token]) -> Result<String> {
    let mut out = String::new();
    let mut cursor: Option<usize> = None;
    for (i, tok) in tokens.iter().enumerate() {
        if tok.span.end < tok.span.start || tok.span.len() != tok.text.len() {
            return Err(CctError::Structure(format!(
                "token {i} has span {:?} inconsistent with its text",
                tok.span
            )));
        }
        let start = tok.span.start;
        if let Some(prev_end) = cursor {
            if start < prev_end || start - prev_end != tok.leading.len() {
                return Err(CctError::Structure(format!(
                    "token {i} at {start} overlaps or is out of order after offset {prev_end}"
                )));
            }
        }
        out.push_str(&tok.leading);
        out.push_str(&tok.text);
        cursor = Some(tok.span.end);
    }
    Ok(out)
}

/// Renders a lexeme sequence (as produced by a model) into Python source.
/// Layout markers drive line breaks and four-space indentation; lexemes on
/// one line are joined with conventional spacing.
pub fn render_lexemes<S: AsRef<str>>(lexemes: &[S]) -> String {
    let mut out = String::new();
    let mut depth = 0usize;
    let mut at_line_start = true;
    let mut prev: Option<&str> = None;
    for lex in lexemes.iter().map(AsRef::as_ref) {
        match lex {
            NEWLINE_LEXEME => {
                out.push('\n');
                at_line_start = true;
                prev = None;
            }
            INDENT_LEXEME => depth += 1,
            DEDENT_LEXEME => depth = depth.saturating_sub(1),
            _ => {
                if at_line_start {
                    out.extend(std::iter::repeat("    ").take(depth));
                    at_line_start = false;
                } else if let Some(p) = prev {
                    if needs_space(p, lex) {
                        out.push(' ');
                    }
                }
                out.push_str(lex);
                prev = Some(lex);
            }
        }
    }
    out
}

fn needs_space(prev: &str, next: &str) -> bool {
    let tight_after = ["(", "[", "{", ".", "`"];
    let tight_before = [")", "]", "}", ",", ":", ".", "`"];
    if tight_after.contains(&prev) || tight_before.contains(&next) {
        return false;
    }
    // Call or subscript: `f(`, `xs[`.
    if (next == "(" || next == "[") && (is_name(prev) && !is_keyword_or_word_op(prev) || prev == ")" || prev == "]") {
        return false;
    }
    true
}

fn is_name(s: &str) -> bool {
    s.chars()
        .next()
        .is_some_and(|c| c.is_alphabetic() || c == '_')
}

fn is_keyword_or_word_op(s: &str) -> bool {
    KEYWORDS.contains(&s) || WORD_OPERATORS.contains(&s)
}

/// A code region found in an instruction output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeBlock {
    pub text: String,
    /// Byte range of `text` inside the output it was extracted from.
    pub origin: Span,
    pub fenced: bool,
}

impl CodeBlock {
    /// An unfenced block spanning all of `text`.
    pub fn whole(text: impl Into<String>) -> Self {
        let text = text.into();
        let origin = Span::new(0, text.len());
        Self {
            text,
            origin,
            fenced: false,
        }
    }
}

/// Returns every triple-backtick fenced region of `output` in document order.
/// Without fences, an output whose first non-blank line starts like code
/// (`def`, `class`, or an assignment) is returned whole as one block.
pub fn extract_code_blocks(output: &str) -> Vec<CodeBlock> {
    let mut blocks = Vec::new();
    let mut pos = 0;
    let mut saw_fence = false;
    while let Some(rel) = output[pos..].find("```") {
        saw_fence = true;
        let fence = pos + rel;
        // Language tag runs to end of line.
        let after_tag = match output[fence + 3..].find('\n') {
            Some(nl) => fence + 3 + nl + 1,
            None => output.len(),
        };
        let (body_end, next) = match output[after_tag..].find("```") {
            Some(close) => (after_tag + close, after_tag + close + 3),
            None => (output.len(), output.len()),
        };
        let text = &output[after_tag..body_end];
        if !text.trim().is_empty() {
            blocks.push(CodeBlock {
                text: text.to_string(),
                origin: Span::new(after_tag, body_end),
                fenced: true,
            });
        }
        pos = next;
        if pos >= output.len() {
            break;
        }
    }
    if !saw_fence && looks_like_code(output) {
        blocks.push(CodeBlock::whole(output));
    }
    blocks
}

fn looks_like_code(text: &str) -> bool {
    let Some(line) = text.lines().find(|l| !l.trim().is_empty()) else {
        return false;
    };
    let toks = tokenize(line);
    let mut real = toks.iter().filter(|t| !t.is_synthetic());
    match real.next() {
        Some(t) if t.kind == TokenKind::Keyword => t.text == "def" || t.text == "class",
        Some(t) if t.kind == TokenKind::Identifier => {
            // Assignment: a dotted or subscripted name followed by `=`.
            let mut depth = 0i32;
            let mut want_name = false;
            for t in real {
                match t.text.as_str() {
                    "[" => depth += 1,
                    "]" => depth -= 1,
                    _ if depth > 0 => {}
                    "=" | "+=" | "-=" => return !want_name,
                    "." if !want_name => want_name = true,
                    _ if want_name && t.kind == TokenKind::Identifier => want_name = false,
                    _ => return false,
                }
            }
            false
        }
        _ => false,
    }
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
    tokens: Vec<Token>,
    trivia_start: usize,
    indents: Vec<usize>,
    nesting: usize,
    at_line_start: bool,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src,
            pos: 0,
            tokens: Vec::new(),
            trivia_start: 0,
            indents: vec![0],
            nesting: 0,
            at_line_start: true,
        }
    }

    fn rest(&self) -> &'a str {
        &self.src[self.pos..]
    }

    fn peek(&self) -> Option<char> {
        self.rest().chars().next()
    }

    fn push(&mut self, kind: TokenKind, start: usize, end: usize) {
        let leading = self.src[self.trivia_start..start].to_string();
        self.tokens.push(Token {
            kind,
            text: self.src[start..end].to_string(),
            span: Span::new(start, end),
            leading,
        });
        self.trivia_start = end;
    }

    fn run(mut self) -> Vec<Token> {
        loop {
            if self.at_line_start && self.nesting == 0 {
                if !self.line_start() {
                    break;
                }
                continue;
            }
            let Some(c) = self.peek() else { break };
            match c {
                ' ' | '\t' | '\x0c' | '\r' => self.pos += c.len_utf8(),
                '#' => self.skip_comment(),
                '\\' if self.rest()[1..].starts_with('\n') => self.pos += 2,
                '\n' => {
                    if self.nesting > 0 {
                        self.pos += 1;
                    } else {
                        self.push(TokenKind::Newline, self.pos, self.pos + 1);
                        self.pos += 1;
                        self.at_line_start = true;
                    }
                }
                _ => self.lex_token(c),
            }
        }
        self.finish();
        self.tokens
    }

    /// Handles indentation at the start of a logical line. Blank and
    /// comment-only lines are trivia. Returns false at end of input.
    fn line_start(&mut self) -> bool {
        let line = self.pos;
        let mut col = 0usize;
        let mut p = line;
        let bytes = self.src.as_bytes();
        while p < bytes.len() {
            match bytes[p] {
                b' ' => col += 1,
                b'\t' => col = (col / 8 + 1) * 8,
                b'\x0c' | b'\r' => {}
                _ => break,
            }
            p += 1;
        }
        if p >= bytes.len() {
            self.pos = p;
            return false;
        }
        if bytes[p] == b'\n' || bytes[p] == b'#' {
            // Blank or comment-only line.
            self.pos = p;
            if bytes[p] == b'#' {
                self.skip_comment();
            }
            if self.pos < bytes.len() {
                self.pos += 1;
            }
            return true;
        }
        self.pos = p;
        self.at_line_start = false;
        let top = *self.indents.last().expect("indent stack never empty");
        if col > top {
            self.indents.push(col);
            self.push(TokenKind::Indent, p, p);
        } else {
            while col < *self.indents.last().expect("indent stack never empty") {
                self.indents.pop();
                self.push(TokenKind::Dedent, p, p);
            }
        }
        true
    }

    fn skip_comment(&mut self) {
        match self.rest().find('\n') {
            Some(nl) => self.pos += nl,
            None => self.pos = self.src.len(),
        }
    }

    fn finish(&mut self) {
        let end = self.src.len();
        while self.indents.len() > 1 {
            self.indents.pop();
            self.push(TokenKind::Dedent, end, end);
        }
        if self.trivia_start < end {
            // Trailing trivia needs a carrier.
            self.push(TokenKind::Newline, end, end);
        }
    }

    fn lex_token(&mut self, c: char) {
        let start = self.pos;
        if c.is_alphabetic() || c == '_' {
            let len = self
                .rest()
                .char_indices()
                .find(|&(_, ch)| !(ch.is_alphanumeric() || ch == '_'))
                .map_or(self.rest().len(), |(i, _)| i);
            let word = &self.src[start..start + len];
            // String prefixes: r"..", b'..', f"..", rb"..".
            let after = self.src[start + len..].chars().next();
            if matches!(after, Some('"') | Some('\''))
                && len <= 2
                && word.chars().all(|ch| "rRbBfFuU".contains(ch))
            {
                if let Some(end) = scan_string(self.src, start + len) {
                    self.push(TokenKind::Literal, start, end);
                    self.pos = end;
                    return;
                }
            }
            let kind = if KEYWORDS.contains(&word) {
                TokenKind::Keyword
            } else if WORD_OPERATORS.contains(&word) {
                TokenKind::Operator
            } else {
                TokenKind::Identifier
            };
            self.pos = start + len;
            self.push(kind, start, self.pos);
            return;
        }
        if c.is_ascii_digit()
            || (c == '.' && self.rest()[1..].starts_with(|d: char| d.is_ascii_digit()))
        {
            let end = scan_number(self.src, start);
            self.pos = end;
            self.push(TokenKind::Literal, start, end);
            return;
        }
        if c == '"' || c == '\'' {
            if let Some(end) = scan_string(self.src, start) {
                self.pos = end;
                self.push(TokenKind::Literal, start, end);
                return;
            }
            // Unterminated quote: a lone punctuation character.
            self.pos = start + 1;
            self.push(TokenKind::Punctuation, start, self.pos);
            return;
        }
        let rest = self.rest();
        if let Some(p) = MULTI_PUNCT.iter().find(|p| rest.starts_with(**p)) {
            self.pos = start + p.len();
            self.push(TokenKind::Punctuation, start, self.pos);
            return;
        }
        if let Some(op) = SYMBOL_OPERATORS.iter().find(|op| rest.starts_with(**op)) {
            self.pos = start + op.len();
            self.push(TokenKind::Operator, start, self.pos);
            return;
        }
        match c {
            '(' | '[' | '{' => self.nesting += 1,
            ')' | ']' | '}' => self.nesting = self.nesting.saturating_sub(1),
            _ => {}
        }
        self.pos = start + c.len_utf8();
        self.push(TokenKind::Punctuation, start, self.pos);
    }
}

/// Byte offset just past a string literal whose opening quote is at `start`,
/// or None when it is unterminated.
fn scan_string(src: &str, start: usize) -> Option<usize> {
    let rest = &src[start..];
    let quote = rest.chars().next()?;
    let triple: String = std::iter::repeat(quote).take(3).collect();
    if rest.starts_with(&triple) {
        let body = &rest[3..];
        let mut i = 0;
        while i < body.len() {
            if body[i..].starts_with('\\') {
                i += 1 + body[i + 1..].chars().next().map_or(0, char::len_utf8);
                continue;
            }
            if body[i..].starts_with(&triple) {
                return Some(start + 3 + i + 3);
            }
            i += body[i..].chars().next().map_or(1, char::len_utf8);
        }
        return None;
    }
    let mut chars = rest.char_indices().skip(1);
    while let Some((i, ch)) = chars.next() {
        match ch {
            '\\' => {
                chars.next();
            }
            '\n' => return None,
            c if c == quote => return Some(start + i + 1),
            _ => {}
        }
    }
    None
}

fn scan_number(src: &str, start: usize) -> usize {
    let bytes = src.as_bytes();
    let mut p = start;
    if src[start..].starts_with("0x") || src[start..].starts_with("0X") {
        p += 2;
        while p < bytes.len() && (bytes[p].is_ascii_hexdigit() || bytes[p] == b'_') {
            p += 1;
        }
        return p;
    }
    while p < bytes.len() && (bytes[p].is_ascii_digit() || bytes[p] == b'_') {
        p += 1;
    }
    if p < bytes.len() && bytes[p] == b'.' {
        p += 1;
        while p < bytes.len() && (bytes[p].is_ascii_digit() || bytes[p] == b'_') {
            p += 1;
        }
    }
    if p < bytes.len() && (bytes[p] == b'e' || bytes[p] == b'E') {
        let mut q = p + 1;
        if q < bytes.len() && (bytes[q] == b'+' || bytes[q] == b'-') {
            q += 1;
        }
        if q < bytes.len() && bytes[q].is_ascii_digit() {
            p = q;
            while p < bytes.len() && bytes[p].is_ascii_digit() {
                p += 1;
            }
        }
    }
    if p < bytes.len() && (bytes[p] == b'j' || bytes[p] == b'J') {
        p += 1;
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kinds_and_text(src: &str) -> Vec<(TokenKind, String)> {
        tokenize(src)
            .into_iter()
            .map(|t| (t.kind, t.text))
            .collect()
    }

    #[test]
    fn three_lexemes() {
        use TokenKind::*;
        assert_eq!(
            kinds_and_text("a < b"),
            vec![
                (Identifier, "a".into()),
                (Operator, "<".into()),
                (Identifier, "b".into())
            ]
        );
    }

    #[test]
    fn empty_source() {
        assert!(tokenize("").is_empty());
        assert_eq!(detokenize(&[]).unwrap(), "");
    }

    #[test]
    fn while_len_line() {
        use TokenKind::*;
        // Hand lex of the line, written out before the lexer existed.
        let expected = vec![
            (Keyword, "while"),
            (Identifier, "len"),
            (Punctuation, "("),
            (Identifier, "s"),
            (Punctuation, ")"),
            (Operator, ">"),
            (Literal, "2"),
            (Punctuation, ":"),
        ];
        let got = kinds_and_text("while len(s) > 2:");
        let got: Vec<_> = got.iter().map(|(k, t)| (*k, t.as_str())).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn round_trip_simple() {
        let s = "x = 1\n";
        assert_eq!(detokenize(&tokenize(s)).unwrap(), s);
    }

    #[test]
    fn indentation_tokens() {
        let src = "def f(a):\n    if a:\n        return 1\n    return 2\n";
        let kinds: Vec<_> = tokenize(src).iter().map(|t| t.kind).collect();
        assert_eq!(
            kinds.iter().filter(|k| **k == TokenKind::Indent).count(),
            2
        );
        assert_eq!(
            kinds.iter().filter(|k| **k == TokenKind::Dedent).count(),
            2
        );
        assert_eq!(detokenize(&tokenize(src)).unwrap(), src);
    }

    #[test]
    fn operators_and_punctuation() {
        let toks = tokenize("a **= b // c -> d != e is not f");
        let ops: Vec<_> = toks
            .iter()
            .filter(|t| t.kind == TokenKind::Operator)
            .map(|t| t.text.as_str())
            .collect();
        assert_eq!(ops, vec!["//", "!=", "is", "not"]);
        assert!(toks
            .iter()
            .any(|t| t.kind == TokenKind::Punctuation && t.text == "**="));
        assert!(toks
            .iter()
            .any(|t| t.kind == TokenKind::Punctuation && t.text == "->"));
    }

    #[test]
    fn unknown_and_unterminated_are_punctuation() {
        let toks = tokenize("don't $ ¿");
        assert!(toks
            .iter()
            .any(|t| t.kind == TokenKind::Punctuation && t.text == "'"));
        assert!(toks
            .iter()
            .any(|t| t.kind == TokenKind::Punctuation && t.text == "¿"));
        assert_eq!(detokenize(&toks).unwrap(), "don't $ ¿");
    }

    #[test]
    fn trailing_trivia_is_kept() {
        for s in ["x = 1  # note", "  \n\n", "if a:\n    b\n\n   ", "# only"] {
            assert_eq!(detokenize(&tokenize(s)).unwrap(), s, "{s:?}");
        }
    }

    #[test]
    fn strings_and_numbers() {
        let toks = tokenize("s = r'a\\'b' + \"\"\"x\ny\"\"\" + 1.5e-3 + 0xff");
        let lits: Vec<_> = toks
            .iter()
            .filter(|t| t.kind == TokenKind::Literal)
            .map(|t| t.text.as_str())
            .collect();
        assert_eq!(lits, vec!["r'a\\'b'", "\"\"\"x\ny\"\"\"", "1.5e-3", "0xff"]);
    }

    #[test]
    fn brackets_join_lines() {
        let toks = tokenize("f(a,\n  b)\n");
        assert_eq!(
            toks.iter()
                .filter(|t| t.kind == TokenKind::Newline)
                .count(),
            1
        );
    }

    #[test]
    fn detokenize_rejects_overlap() {
        let mut toks = tokenize("a < b");
        toks.swap(0, 2);
        assert!(detokenize(&toks).is_err());
    }

    #[test]
    fn line_col() {
        let unit = SourceUnit::new("ab\ncd\n");
        assert_eq!(unit.line_col(4), (1, 1));
        assert_eq!(unit.line_col(0), (0, 0));
    }

    #[test]
    fn render_is_valid_layout() {
        let src = "def f(xs):\n    total = 0\n    for x in xs:\n        total = total + x\n    return len(xs[1:])\n";
        let lexemes: Vec<_> = tokenize(src).iter().map(|t| t.lexeme().to_string()).collect();
        assert_eq!(render_lexemes(&lexemes), src);
    }

    #[test]
    fn fenced_block() {
        let blocks = extract_code_blocks("Here is code:\n```python\nx=1\n```");
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].text, "x=1\n");
        assert!(blocks[0].fenced);
    }

    #[test]
    fn prose_has_no_block() {
        assert!(extract_code_blocks("No code here.").is_empty());
    }

    #[test]
    fn two_fenced_blocks_in_order() {
        let out = "a\n```\nx = 1\n```\nthen\n```py\ny = 2\n```\n";
        let blocks = extract_code_blocks(out);
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].text, "x = 1\n");
        assert_eq!(blocks[1].text, "y = 2\n");
        assert_eq!(&out[blocks[1].origin.start..blocks[1].origin.end], "y = 2\n");
    }

    #[test]
    fn unterminated_fence_runs_to_end() {
        let blocks = extract_code_blocks("see\n```python\ndef f():\n    pass\n");
        assert_eq!(blocks.len(), 1);
        assert!(blocks[0].fenced);
        assert_eq!(blocks[0].text, "def f():\n    pass\n");
    }

    #[test]
    fn unfenced_code_heuristic() {
        assert_eq!(extract_code_blocks("def f():\n    return 1\n").len(), 1);
        assert_eq!(extract_code_blocks("\nx.y[0] = 3\n").len(), 1);
        assert!(extract_code_blocks("x is big").is_empty());
        assert!(extract_code_blocks("The answer = 3 apples").is_empty());
    }
}
