//! Reader and sort checker for the QF_BV fragment of SMT-LIB 2 that the
//! emitter produces. Used to validate emitted scripts without a solver.

use std::collections::BTreeMap;
use std::fmt;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Token {
    Open,
    Close,
    Symbol(String),
    Keyword(String),
    Numeral(u64),
    /// `#x` or `#b` literal as `(value, width)`.
    BitVec(u128, u32),
    Str(String),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("offset {offset}: {message}")]
pub struct SmtError {
    pub offset: usize,
    pub message: String,
}

fn err<T>(offset: usize, message: impl Into<String>) -> Result<T, SmtError> {
    Err(SmtError { offset, message: message.into() })
}

fn is_symbol_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || "~!@$%^&*_-+=<>.?/".contains(c)
}

pub fn tokenize(text: &str) -> Result<Vec<(usize, Token)>, SmtError> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let (off, c) = chars[i];
        match c {
            c if c.is_whitespace() => i += 1,
            ';' => {
                while i < chars.len() && chars[i].1 != '\n' {
                    i += 1;
                }
            }
            '(' => {
                out.push((off, Token::Open));
                i += 1;
            }
            ')' => {
                out.push((off, Token::Close));
                i += 1;
            }
            '"' => {
                let mut s = String::new();
                i += 1;
                loop {
                    match chars.get(i) {
                        None => return err(off, "unterminated string"),
                        Some((_, '"')) if chars.get(i + 1).map(|x| x.1) == Some('"') => {
                            s.push('"');
                            i += 2;
                        }
                        Some((_, '"')) => {
                            i += 1;
                            break;
                        }
                        Some((_, ch)) => {
                            s.push(*ch);
                            i += 1;
                        }
                    }
                }
                out.push((off, Token::Str(s)));
            }
            '|' => {
                let start = i + 1;
                i += 1;
                while i < chars.len() && chars[i].1 != '|' {
                    i += 1;
                }
                if i == chars.len() {
                    return err(off, "unterminated quoted symbol");
                }
                out.push((off, Token::Symbol(chars[start..i].iter().map(|x| x.1).collect())));
                i += 1;
            }
            '#' => {
                let base = chars.get(i + 1).map(|x| x.1);
                let start = i + 2;
                let mut j = start;
                while j < chars.len() && chars[j].1.is_ascii_alphanumeric() {
                    j += 1;
                }
                let digits: String = chars[start..j].iter().map(|x| x.1).collect();
                let (radix, bits) = match base {
                    Some('x') => (16, 4),
                    Some('b') => (2, 1),
                    _ => return err(off, "expected #x or #b literal"),
                };
                if digits.is_empty() || digits.len() * bits > 128 {
                    return err(off, "bad bitvector literal length");
                }
                let Ok(v) = u128::from_str_radix(&digits, radix) else {
                    return err(off, format!("bad digits in bitvector literal {digits}"));
                };
                out.push((off, Token::BitVec(v, (digits.len() * bits) as u32)));
                i = j;
            }
            ':' => {
                let start = i + 1;
                i += 1;
                while i < chars.len() && is_symbol_char(chars[i].1) {
                    i += 1;
                }
                out.push((off, Token::Keyword(chars[start..i].iter().map(|x| x.1).collect())));
            }
            c if c.is_ascii_digit() => {
                let start = i;
                while i < chars.len() && chars[i].1.is_ascii_digit() {
                    i += 1;
                }
                let s: String = chars[start..i].iter().map(|x| x.1).collect();
                if s.len() > 1 && s.starts_with('0') {
                    return err(off, "numeral with leading zero");
                }
                match s.parse() {
                    Ok(n) => out.push((off, Token::Numeral(n))),
                    Err(_) => return err(off, "numeral too large"),
                }
            }
            c if is_symbol_char(c) => {
                let start = i;
                while i < chars.len() && is_symbol_char(chars[i].1) {
                    i += 1;
                }
                out.push((off, Token::Symbol(chars[start..i].iter().map(|x| x.1).collect())));
            }
            other => return err(off, format!("unexpected character {other:?}")),
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SExpr {
    Atom(usize, Token),
    List(usize, Vec<SExpr>),
}

impl SExpr {
    fn offset(&self) -> usize {
        match self {
            SExpr::Atom(o, _) | SExpr::List(o, _) => *o,
        }
    }

    fn symbol(&self) -> Option<&str> {
        match self {
            SExpr::Atom(_, Token::Symbol(s)) => Some(s),
            _ => None,
        }
    }
}

pub fn parse(text: &str) -> Result<Vec<SExpr>, SmtError> {
    let toks = tokenize(text)?;
    let mut stack: Vec<(usize, Vec<SExpr>)> = Vec::new();
    let mut top = Vec::new();
    for (off, t) in toks {
        match t {
            Token::Open => stack.push((off, Vec::new())),
            Token::Close => {
                let Some((o, items)) = stack.pop() else { return err(off, "unbalanced ')'") };
                let e = SExpr::List(o, items);
                match stack.last_mut() {
                    Some((_, parent)) => parent.push(e),
                    None => top.push(e),
                }
            }
            atom => {
                let e = SExpr::Atom(off, atom);
                match stack.last_mut() {
                    Some((_, parent)) => parent.push(e),
                    None => return err(off, "atom outside of a command"),
                }
            }
        }
    }
    if let Some((o, _)) = stack.last() {
        return err(*o, "unbalanced '('");
    }
    Ok(top)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sort {
    Bool,
    BitVec(u32),
}

impl fmt::Display for Sort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sort::Bool => f.write_str("Bool"),
            Sort::BitVec(w) => write!(f, "(_ BitVec {w})"),
        }
    }
}

/// What a well-formed script declares and asks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScriptSummary {
    pub logic: Option<String>,
    pub declarations: BTreeMap<String, Sort>,
    pub assertions: usize,
    pub check_sat: usize,
}

fn parse_sort(e: &SExpr) -> Result<Sort, SmtError> {
    match e {
        SExpr::Atom(_, Token::Symbol(s)) if s == "Bool" => Ok(Sort::Bool),
        SExpr::List(o, items) => match items.as_slice() {
            [a, b, SExpr::Atom(_, Token::Numeral(w))] if a.symbol() == Some("_") && b.symbol() == Some("BitVec") => {
                if *w == 0 {
                    err(*o, "zero-width bitvector")
                } else {
                    Ok(Sort::BitVec(*w as u32))
                }
            }
            _ => err(*o, "unsupported sort"),
        },
        other => err(other.offset(), "unsupported sort"),
    }
}

fn sort_of(e: &SExpr, env: &BTreeMap<String, Sort>) -> Result<Sort, SmtError> {
    let off = e.offset();
    match e {
        SExpr::Atom(_, Token::BitVec(_, w)) => Ok(Sort::BitVec(*w)),
        SExpr::Atom(_, Token::Symbol(s)) => match s.as_str() {
            "true" | "false" => Ok(Sort::Bool),
            name => env.get(name).copied().ok_or_else(|| SmtError { offset: off, message: format!("undeclared symbol {name}") }),
        },
        SExpr::Atom(..) => err(off, "unexpected atom in term"),
        SExpr::List(_, items) => {
            let Some(head) = items.first().and_then(SExpr::symbol) else { return err(off, "term head must be a symbol") };
            let args: Vec<Sort> = items[1..].iter().map(|a| sort_of(a, env)).collect::<Result<_, _>>()?;
            let same_bv = |n: Option<usize>| -> Result<u32, SmtError> {
                if let Some(n) = n {
                    if args.len() != n {
                        return err(off, format!("{head} takes {n} arguments, got {}", args.len()));
                    }
                } else if args.len() < 2 {
                    return err(off, format!("{head} needs at least two arguments"));
                }
                match args[0] {
                    Sort::BitVec(w) if args.iter().all(|s| *s == Sort::BitVec(w)) => Ok(w),
                    _ => err(off, format!("{head} needs bitvector arguments of one width")),
                }
            };
            match head {
                "bvadd" | "bvmul" | "bvand" | "bvor" | "bvxor" => same_bv(None).map(Sort::BitVec),
                "bvsub" | "bvudiv" | "bvurem" | "bvshl" | "bvlshr" | "bvashr" => same_bv(Some(2)).map(Sort::BitVec),
                "bvneg" | "bvnot" => same_bv(Some(1)).map(Sort::BitVec),
                "bvult" | "bvule" | "bvugt" | "bvuge" | "bvslt" | "bvsle" | "bvsgt" | "bvsge" => {
                    same_bv(Some(2)).map(|_| Sort::Bool)
                }
                "=" | "distinct" => {
                    if args.len() < 2 || args.iter().any(|s| *s != args[0]) {
                        err(off, format!("{head} needs at least two arguments of one sort"))
                    } else {
                        Ok(Sort::Bool)
                    }
                }
                "not" if args == [Sort::Bool] => Ok(Sort::Bool),
                "and" | "or" | "=>" if !args.is_empty() && args.iter().all(|s| *s == Sort::Bool) => Ok(Sort::Bool),
                "ite" => match args.as_slice() {
                    [Sort::Bool, a, b] if a == b => Ok(*a),
                    _ => err(off, "ite needs a Bool condition and branches of one sort"),
                },
                other => err(off, format!("unsupported or ill-sorted application of {other}")),
            }
        }
    }
}

/// Parses and sort-checks a script. Only the commands and operators of the
/// QF_BV fragment are accepted.
pub fn validate_script(text: &str) -> Result<ScriptSummary, SmtError> {
    let mut sum = ScriptSummary::default();
    for cmd in parse(text)? {
        let SExpr::List(off, items) = &cmd else { return err(cmd.offset(), "command must be a list") };
        let Some(name) = items.first().and_then(SExpr::symbol) else { return err(*off, "command name expected") };
        let rest = &items[1..];
        match name {
            "set-logic" => match rest {
                [SExpr::Atom(_, Token::Symbol(l))] if sum.logic.is_none() && sum.declarations.is_empty() => {
                    if l != "QF_BV" {
                        return err(*off, format!("unsupported logic {l}"));
                    }
                    sum.logic = Some(l.clone());
                }
                _ => return err(*off, "malformed or misplaced set-logic"),
            },
            "set-option" | "set-info" => match rest {
                [SExpr::Atom(_, Token::Keyword(_)), _] => {}
                _ => return err(*off, "malformed option"),
            },
            "declare-const" | "declare-fun" => {
                let (sym, sort) = match (name, rest) {
                    ("declare-const", [s, sort]) => (s, sort),
                    ("declare-fun", [s, SExpr::List(_, params), sort]) if params.is_empty() => (s, sort),
                    _ => return err(*off, format!("malformed {name}")),
                };
                let Some(sym) = sym.symbol() else { return err(*off, "declared name must be a symbol") };
                if sum.declarations.contains_key(sym) {
                    return err(*off, format!("{sym} declared twice"));
                }
                sum.declarations.insert(sym.to_string(), parse_sort(sort)?);
            }
            "assert" => match rest {
                [t] => {
                    if sort_of(t, &sum.declarations)? != Sort::Bool {
                        return err(t.offset(), "assertion is not Bool");
                    }
                    sum.assertions += 1;
                }
                _ => return err(*off, "assert takes one term"),
            },
            "check-sat" | "get-model" | "exit" if rest.is_empty() => {
                if name == "check-sat" {
                    sum.check_sat += 1;
                }
            }
            other => return err(*off, format!("unsupported command {other}")),
        }
    }
    if sum.logic.is_none() {
        return err(0, "missing set-logic");
    }
    Ok(sum)
}
