//! Reader for program source: a small Lisp with `define`, `choose`, `if`,
//! `let`, boolean literals `#t`/`#f`, line comments starting with `;`, and
//! two quote forms: `'()` is an empty-list literal and `'...'` is a string
//! literal (double-quoted strings are accepted as well).

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use thiserror::Error;

use crate::value::Value;

/// Identifier of an expression node, unique within its enclosing definition.
/// Assigned by a pre-order traversal of the body, so parsing the same source
/// twice yields identical ids.
pub type ExprId = u32;

/// Byte offset range in source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExprKind {
    Symbol(String),
    Int(i64),
    Float(f64),
    Boolean(bool),
    Str(String),
    List(Vec<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expr {
    pub id: ExprId,
    pub span: Span,
    pub kind: ExprKind,
}

impl Expr {
    pub fn as_symbol(&self) -> Option<&str> {
        match &self.kind {
            ExprKind::Symbol(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Expr]> {
        match &self.kind {
            ExprKind::List(items) => Some(items),
            _ => None,
        }
    }

    /// Literal expressions evaluate to this Normal value.
    pub fn literal_value(&self) -> Option<Value> {
        match &self.kind {
            ExprKind::Int(i) => Some(Value::Int(*i)),
            ExprKind::Float(f) => Some(Value::Float(*f)),
            ExprKind::Boolean(b) => Some(Value::Bool(*b)),
            ExprKind::Str(s) => Some(Value::Str(s.clone())),
            ExprKind::List(items) if items.is_empty() => Some(Value::List(Vec::new())),
            _ => None,
        }
    }

    /// Structural equality: same shape, ids and payloads, ignoring spans.
    pub fn structural_eq(&self, other: &Expr) -> bool {
        if self.id != other.id {
            return false;
        }
        match (&self.kind, &other.kind) {
            (ExprKind::List(a), ExprKind::List(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.structural_eq(y))
            }
            (a, b) => a == b,
        }
    }

    /// Pre-order visit of this expression and all subexpressions.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a Expr)) {
        f(self);
        if let ExprKind::List(items) = &self.kind {
            for item in items {
                item.walk(f);
            }
        }
    }
}

/// One `(define (name params...) body)` form.
#[derive(Debug, Clone)]
pub struct ProgramDef {
    pub name: String,
    pub params: Vec<String>,
    pub body: Expr,
    pub span: Span,
}

/// All definitions in a source file, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct ProgramSet {
    pub defs: BTreeMap<String, ProgramDef>,
    /// Definition names in source order.
    pub order: Vec<String>,
    pub entry: Option<String>,
}

impl ProgramSet {
    pub fn def(&self, name: &str) -> Option<&ProgramDef> {
        self.defs.get(name)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("unbalanced parentheses: unclosed '(' at {span}")]
    Unclosed { span: Span },
    #[error("unbalanced parentheses: unexpected ')' at {span}")]
    UnexpectedClose { span: Span },
    #[error("unterminated string literal at {span}")]
    UnterminatedString { span: Span },
    #[error("empty list at {span}; write '() for the empty-list literal")]
    EmptyList { span: Span },
    #[error("malformed define at {span}: {msg}")]
    MalformedDefine { span: Span, msg: String },
    #[error("duplicate definition of `{name}` at {span}")]
    DuplicateDefinition { name: String, span: Span },
    #[error("invalid token `{token}` at {span}")]
    InvalidToken { token: String, span: Span },
}

/// A validation finding. Validation never fails hard; it reports.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub def: String,
    pub span: Span,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (in `{}` at {})", self.message, self.def, self.span)
    }
}

pub const SPECIAL_FORMS: [&str; 4] = ["define", "choose", "if", "let"];

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
enum Token {
    LParen,
    RParen,
    Atom(String),
    Str(String),
    /// The `'()` empty-list literal.
    EmptyListLit,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Lexer {
            src: src.as_bytes(),
            pos: 0,
        }
    }

    fn skip_trivia(&mut self) {
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            if c == b';' {
                while self.pos < self.src.len() && self.src[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn next(&mut self) -> Result<Option<(Token, Span)>, ParseError> {
        self.skip_trivia();
        if self.pos >= self.src.len() {
            return Ok(None);
        }
        let start = self.pos;
        let c = self.src[self.pos];
        match c {
            b'(' => {
                self.pos += 1;
                Ok(Some((Token::LParen, Span { start, end: self.pos })))
            }
            b')' => {
                self.pos += 1;
                Ok(Some((Token::RParen, Span { start, end: self.pos })))
            }
            b'"' => {
                self.pos += 1;
                let mut out = String::new();
                while self.pos < self.src.len() {
                    let c = self.src[self.pos];
                    if c == b'\\' && self.pos + 1 < self.src.len() {
                        let escaped = self.src[self.pos + 1];
                        out.push(match escaped {
                            b'n' => '\n',
                            b't' => '\t',
                            other => other as char,
                        });
                        self.pos += 2;
                    } else if c == b'"' {
                        self.pos += 1;
                        return Ok(Some((Token::Str(out), Span { start, end: self.pos })));
                    } else {
                        out.push(c as char);
                        self.pos += 1;
                    }
                }
                Err(ParseError::UnterminatedString {
                    span: Span { start, end: self.pos },
                })
            }
            b'\'' => {
                // '() is the empty-list literal; otherwise a 'quoted string'.
                if self.src.get(self.pos + 1) == Some(&b'(') && self.src.get(self.pos + 2) == Some(&b')') {
                    self.pos += 3;
                    return Ok(Some((Token::EmptyListLit, Span { start, end: self.pos })));
                }
                self.pos += 1;
                let text_start = self.pos;
                while self.pos < self.src.len() && self.src[self.pos] != b'\'' {
                    self.pos += 1;
                }
                if self.pos >= self.src.len() {
                    return Err(ParseError::UnterminatedString {
                        span: Span { start, end: self.pos },
                    });
                }
                let text = String::from_utf8_lossy(&self.src[text_start..self.pos]).into_owned();
                self.pos += 1;
                Ok(Some((Token::Str(text), Span { start, end: self.pos })))
            }
            _ => {
                while self.pos < self.src.len() {
                    let c = self.src[self.pos];
                    if c.is_ascii_whitespace() || c == b'(' || c == b')' || c == b';' || c == b'\'' || c == b'"' {
                        break;
                    }
                    self.pos += 1;
                }
                let text = String::from_utf8_lossy(&self.src[start..self.pos]).into_owned();
                Ok(Some((Token::Atom(text), Span { start, end: self.pos })))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parser
// ---------------------------------------------------------------------------

fn classify_atom(text: &str, span: Span) -> Result<ExprKind, ParseError> {
    match text {
        "#t" => return Ok(ExprKind::Boolean(true)),
        "#f" => return Ok(ExprKind::Boolean(false)),
        _ => {}
    }
    let numeric_start = text.starts_with(|c: char| c.is_ascii_digit())
        || (text.len() > 1 && (text.starts_with('-') || text.starts_with('+'))
            && text[1..].starts_with(|c: char| c.is_ascii_digit()));
    if numeric_start {
        if let Ok(i) = text.parse::<i64>() {
            return Ok(ExprKind::Int(i));
        }
        if let Ok(f) = text.parse::<f64>() {
            return Ok(ExprKind::Float(f));
        }
        return Err(ParseError::InvalidToken {
            token: text.to_string(),
            span,
        });
    }
    if text.starts_with('#') {
        return Err(ParseError::InvalidToken {
            token: text.to_string(),
            span,
        });
    }
    Ok(ExprKind::Symbol(text.to_string()))
}

fn parse_exprs(lexer: &mut Lexer) -> Result<Vec<Expr>, ParseError> {
    let mut stack: Vec<(Vec<Expr>, Span)> = Vec::new();
    let mut top: Vec<Expr> = Vec::new();
    while let Some((tok, span)) = lexer.next()? {
        let expr = match tok {
            Token::LParen => {
                stack.push((std::mem::take(&mut top), span));
                continue;
            }
            Token::RParen => match stack.pop() {
                Some((parent, open_span)) => {
                    let items = std::mem::replace(&mut top, parent);
                    if items.is_empty() {
                        return Err(ParseError::EmptyList {
                            span: Span {
                                start: open_span.start,
                                end: span.end,
                            },
                        });
                    }
                    Expr {
                        id: 0,
                        span: Span {
                            start: open_span.start,
                            end: span.end,
                        },
                        kind: ExprKind::List(items),
                    }
                }
                None => return Err(ParseError::UnexpectedClose { span }),
            },
            Token::Atom(text) => Expr {
                id: 0,
                span,
                kind: classify_atom(&text, span)?,
            },
            Token::Str(text) => Expr {
                id: 0,
                span,
                kind: ExprKind::Str(text),
            },
            Token::EmptyListLit => Expr {
                id: 0,
                span,
                kind: ExprKind::List(Vec::new()),
            },
        };
        top.push(expr);
    }
    if let Some((_, open_span)) = stack.pop() {
        return Err(ParseError::Unclosed { span: open_span });
    }
    Ok(top)
}

fn assign_ids(expr: &mut Expr, next: &mut ExprId) {
    expr.id = *next;
    *next += 1;
    if let ExprKind::List(items) = &mut expr.kind {
        for item in items {
            assign_ids(item, next);
        }
    }
}

fn parse_define(form: Expr) -> Result<ProgramDef, ParseError> {
    let span = form.span;
    let malformed = |msg: &str| ParseError::MalformedDefine {
        span,
        msg: msg.to_string(),
    };
    let items = match form.kind {
        ExprKind::List(items) => items,
        _ => return Err(malformed("top-level form is not a list")),
    };
    if items.first().and_then(|e| e.as_symbol()) != Some("define") {
        return Err(malformed("expected (define (name params...) body)"));
    }
    if items.len() != 3 {
        return Err(malformed("define takes a signature and exactly one body expression"));
    }
    let sig = items[1]
        .as_list()
        .ok_or_else(|| malformed("signature must be (name params...)"))?;
    if sig.is_empty() {
        return Err(malformed("signature must name the function"));
    }
    let name = sig[0]
        .as_symbol()
        .ok_or_else(|| malformed("function name must be a symbol"))?
        .to_string();
    let mut params = Vec::new();
    let mut seen = HashSet::new();
    for p in &sig[1..] {
        let pname = p
            .as_symbol()
            .ok_or_else(|| malformed("parameters must be symbols"))?;
        if !seen.insert(pname.to_string()) {
            return Err(malformed(&format!("duplicate parameter `{pname}`")));
        }
        params.push(pname.to_string());
    }
    let mut body = items.into_iter().nth(2).expect("checked len");
    let mut next = 0;
    assign_ids(&mut body, &mut next);
    Ok(ProgramDef {
        name,
        params,
        body,
        span,
    })
}

/// Parse source text into a program set. Ids and spans are assigned; comments
/// and whitespace are gone.
pub fn parse(source: &str) -> Result<ProgramSet, ParseError> {
    let mut lexer = Lexer::new(source);
    let forms = parse_exprs(&mut lexer)?;
    let mut set = ProgramSet::default();
    for form in forms {
        let def = parse_define(form)?;
        if set.defs.contains_key(&def.name) {
            return Err(ParseError::DuplicateDefinition {
                name: def.name,
                span: def.span,
            });
        }
        set.order.push(def.name.clone());
        set.defs.insert(def.name.clone(), def);
    }
    Ok(set)
}

// ---------------------------------------------------------------------------
// Canonical printer
// ---------------------------------------------------------------------------

/// Single-space canonical form; `parse(print_canonical(e))` is structurally
/// equal to `e` up to spans.
pub fn print_canonical(expr: &Expr) -> String {
    let mut out = String::new();
    print_into(expr, &mut out);
    out
}

fn print_into(expr: &Expr, out: &mut String) {
    match &expr.kind {
        ExprKind::Symbol(s) => out.push_str(s),
        ExprKind::Int(i) => out.push_str(&i.to_string()),
        ExprKind::Float(f) => out.push_str(&format!("{f:?}")),
        ExprKind::Boolean(true) => out.push_str("#t"),
        ExprKind::Boolean(false) => out.push_str("#f"),
        ExprKind::Str(s) => {
            out.push('"');
            for c in s.chars() {
                match c {
                    '"' => out.push_str("\\\""),
                    '\\' => out.push_str("\\\\"),
                    '\n' => out.push_str("\\n"),
                    '\t' => out.push_str("\\t"),
                    other => out.push(other),
                }
            }
            out.push('"');
        }
        ExprKind::List(items) if items.is_empty() => out.push_str("'()"),
        ExprKind::List(items) => {
            out.push('(');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                print_into(item, out);
            }
            out.push(')');
        }
    }
}

/// Print a whole definition in canonical form.
pub fn print_def(def: &ProgramDef) -> String {
    format!(
        "(define ({}{}) {})",
        def.name,
        def.params
            .iter()
            .map(|p| format!(" {p}"))
            .collect::<String>(),
        print_canonical(&def.body)
    )
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Check shape rules and name resolution against a set of known primitive
/// names. Returns an empty list when the program set is well-formed.
pub fn validate(set: &ProgramSet, primitives: &dyn Fn(&str) -> bool) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for name in &set.order {
        let def = &set.defs[name];
        let mut scope: Vec<String> = def.params.clone();
        check_expr(set, primitives, def, &def.body, &mut scope, &mut out);
    }
    out
}

fn check_expr(
    set: &ProgramSet,
    primitives: &dyn Fn(&str) -> bool,
    def: &ProgramDef,
    expr: &Expr,
    scope: &mut Vec<String>,
    out: &mut Vec<Diagnostic>,
) {
    let diag = |out: &mut Vec<Diagnostic>, span: Span, message: String| {
        out.push(Diagnostic {
            def: def.name.clone(),
            span,
            message,
        });
    };
    match &expr.kind {
        ExprKind::Symbol(s) => {
            let bound = scope.iter().any(|b| b == s)
                || set.defs.contains_key(s)
                || primitives(s);
            if !bound {
                diag(out, expr.span, format!("unbound symbol `{s}`"));
            }
        }
        ExprKind::List(items) if items.is_empty() => {}
        ExprKind::List(items) => {
            let head = match items[0].as_symbol() {
                Some(h) => h,
                None => {
                    diag(out, expr.span, "call head must be a symbol".to_string());
                    return;
                }
            };
            match head {
                "define" => {
                    diag(out, expr.span, "nested define is not allowed".to_string());
                }
                "choose" => {
                    if items.len() < 2 {
                        diag(out, expr.span, "choose needs at least one branch".to_string());
                    }
                    for branch in &items[1..] {
                        check_expr(set, primitives, def, branch, scope, out);
                    }
                }
                "if" => {
                    if items.len() != 4 {
                        diag(
                            out,
                            expr.span,
                            format!("if takes a test and two branches, got {} arguments", items.len() - 1),
                        );
                    }
                    for arg in &items[1..] {
                        check_expr(set, primitives, def, arg, scope, out);
                    }
                }
                "let" => {
                    let bindings = items.get(1).and_then(|e| e.as_list());
                    match bindings {
                        Some(bindings) if items.len() == 3 => {
                            let mut introduced = Vec::new();
                            let mut names = HashSet::new();
                            for binding in bindings {
                                match binding.as_list() {
                                    Some([name_e, value_e]) => {
                                        let bname = match name_e.as_symbol() {
                                            Some(n) => n,
                                            None => {
                                                diag(out, binding.span, "binding name must be a symbol".to_string());
                                                continue;
                                            }
                                        };
                                        if !names.insert(bname.to_string()) {
                                            diag(out, binding.span, format!("let binds `{bname}` twice"));
                                        }
                                        // Sequential scope: earlier bindings are
                                        // visible while checking later ones.
                                        check_expr(set, primitives, def, value_e, scope, out);
                                        scope.push(bname.to_string());
                                        introduced.push(());
                                    }
                                    _ => diag(out, binding.span, "binding must be (name expr)".to_string()),
                                }
                            }
                            check_expr(set, primitives, def, &items[2], scope, out);
                            for _ in introduced {
                                scope.pop();
                            }
                        }
                        _ => diag(out, expr.span, "let takes a binding list and one body".to_string()),
                    }
                }
                _ => {
                    if let Some(callee) = set.defs.get(head) {
                        if items.len() - 1 != callee.params.len() {
                            diag(
                                out,
                                expr.span,
                                format!(
                                    "`{head}` takes {} arguments, got {}",
                                    callee.params.len(),
                                    items.len() - 1
                                ),
                            );
                        }
                    } else if !primitives(head) {
                        diag(out, expr.span, format!("call to unknown function `{head}`"));
                    }
                    for arg in &items[1..] {
                        check_expr(set, primitives, def, arg, scope, out);
                    }
                }
            }
        }
        _ => {}
    }
}
