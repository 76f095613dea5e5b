use std::collections::BTreeMap;

use super::{
    mask, validate, BinOp, Diagnostic, Expr, Function, Instr, JumpTarget, Operand, Program, Reg, SecretAnnotation,
    DEFAULT_WIDTH, TEMP_PREFIX,
};

/// Parses IR text at the default width.
pub fn parse_program(text: &str) -> Result<Program, Vec<Diagnostic>> {
    parse_program_with_width(text, DEFAULT_WIDTH)
}

/// Parses and validates IR text. Only error diagnostics cause failure.
pub fn parse_program_with_width(text: &str, width: u32) -> Result<Program, Vec<Diagnostic>> {
    if !(1..=64).contains(&width) {
        return Err(vec![Diagnostic::error_pc(None, format!("width {width} outside 1..=64"))]);
    }
    let mut p = Parser::new(text, width);
    for (i, raw) in text.lines().enumerate() {
        p.line(i + 1, raw);
    }
    p.finish_function();
    p.into_program()
}

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Ident(String),
    Num(Option<u64>),
    Sym(&'static str),
}

#[derive(Clone, Debug)]
struct Token {
    tok: Tok,
    col: usize,
}

const SYMBOLS: [&str; 17] = ["<<>>", "+", "-", "*", "/", "%", "&", "|", "^", "(", ")", ",", ":", "[", "]", "=", "@"];

fn lex(line: usize, s: &str) -> Result<Vec<Token>, Diagnostic> {
    let bytes = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    'outer: while i < bytes.len() {
        let c = bytes[i];
        let col = i + 1;
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        if c.is_ascii_alphabetic() || c == b'_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'.') {
                i += 1;
            }
            out.push(Token { tok: Tok::Ident(s[start..i].to_string()), col });
            continue;
        }
        if c.is_ascii_digit() {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            let text: String = s[start..i].chars().filter(|&c| c != '_').collect();
            let (digits, radix) = match text.strip_prefix("0x").or_else(|| text.strip_prefix("0X")) {
                Some(hex) => (hex, 16),
                None => (text.as_str(), 10),
            };
            if digits.is_empty() || !digits.chars().all(|c| c.is_digit(radix)) {
                return Err(Diagnostic::error_at(line, col, format!("malformed literal `{}`", &s[start..i])));
            }
            // Too many digits for u64 is reported as an overflow by the expression parser.
            let value = u64::from_str_radix(digits, radix).ok();
            out.push(Token { tok: Tok::Num(value), col });
            continue;
        }
        for sym in SYMBOLS {
            if s[i..].starts_with(sym) {
                out.push(Token { tok: Tok::Sym(sym), col });
                i += sym.len();
                continue 'outer;
            }
        }
        return Err(Diagnostic::error_at(line, col, format!("unexpected character `{}`", s[i..].chars().next().unwrap())));
    }
    Ok(out)
}

enum PendingTarget {
    Label(String),
    Register(Reg, Vec<String>),
}

struct PendingJump {
    pc: usize,
    cond: Reg,
    target: PendingTarget,
    line: usize,
    col: usize,
}

struct FnBuilder {
    name: String,
    params: usize,
    start: usize,
    labels: BTreeMap<String, usize>,
    pending_labels: Vec<(String, usize, usize)>,
    jumps: Vec<PendingJump>,
    annotations_open: bool,
}

struct Parser {
    width: u32,
    diags: Vec<Diagnostic>,
    instrs: Vec<Instr>,
    functions: Vec<Function>,
    annotations: Vec<SecretAnnotation>,
    entry: Option<String>,
    next_temp: usize,
    current: Option<FnBuilder>,
}

impl Parser {
    fn new(text: &str, width: u32) -> Self {
        // Continue numbering after any temporaries already present so that
        // printed programs reparse to the same registers.
        let mut next_temp = 0;
        for word in text.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_')) {
            if let Some(n) = word.strip_prefix(TEMP_PREFIX).and_then(|d| d.parse::<usize>().ok()) {
                next_temp = next_temp.max(n + 1);
            }
        }
        Parser {
            width,
            diags: Vec::new(),
            instrs: Vec::new(),
            functions: Vec::new(),
            annotations: Vec::new(),
            entry: None,
            next_temp,
            current: None,
        }
    }

    fn err(&mut self, line: usize, col: usize, msg: impl Into<String>) {
        self.diags.push(Diagnostic::error_at(line, col, msg));
    }

    fn line(&mut self, line: usize, raw: &str) {
        let content = raw.split('#').next().unwrap_or("");
        let toks = match lex(line, content) {
            Ok(t) => t,
            Err(d) => {
                self.diags.push(d);
                return;
            }
        };
        if toks.is_empty() {
            return;
        }
        match &toks[0].tok {
            Tok::Ident(w) if w == "func" => self.func_header(line, &toks),
            Tok::Sym("@") => self.directive(line, &toks),
            _ => self.body_line(line, &toks),
        }
    }

    fn func_header(&mut self, line: usize, toks: &[Token]) {
        self.finish_function();
        let Some(Token { tok: Tok::Ident(name), .. }) = toks.get(1) else {
            self.err(line, toks[0].col, "expected function name after `func`");
            return;
        };
        let mut params = 0;
        match &toks[2..] {
            [] => {}
            [Token { tok: Tok::Ident(k), .. }, Token { tok: Tok::Sym("="), .. }, Token { tok: Tok::Num(Some(n)), .. }]
                if k == "params" =>
            {
                params = *n as usize;
            }
            rest => {
                self.err(line, rest[0].col, "expected `params=<k>`");
                return;
            }
        }
        if self.functions.iter().any(|f| &f.name == name) {
            self.err(line, toks[1].col, format!("duplicate function name `{name}`"));
        }
        self.current = Some(FnBuilder {
            name: name.clone(),
            params,
            start: self.instrs.len(),
            labels: BTreeMap::new(),
            pending_labels: Vec::new(),
            jumps: Vec::new(),
            annotations_open: true,
        });
    }

    fn directive(&mut self, line: usize, toks: &[Token]) {
        let Some(Token { tok: Tok::Ident(kind), col }) = toks.get(1) else {
            self.err(line, toks[0].col, "expected directive name after `@`");
            return;
        };
        let col = *col;
        match kind.as_str() {
            "entry" => match &toks[2..] {
                [Token { tok: Tok::Ident(name), .. }] => {
                    if self.entry.is_some() {
                        self.err(line, col, "entry declared twice");
                    }
                    self.entry = Some(name.clone());
                }
                _ => self.err(line, col, "expected `@entry <function>`"),
            },
            "secret" | "secret_region" => {
                let Some(f) = self.current.as_ref() else {
                    self.err(line, col, "annotation outside a function");
                    return;
                };
                if !f.annotations_open {
                    self.err(line, col, "annotations must directly follow the `func` line");
                    return;
                }
                let function = f.name.clone();
                match (kind.as_str(), &toks[2..]) {
                    ("secret", [Token { tok: Tok::Ident(r), .. }]) => {
                        self.annotations.push(SecretAnnotation::RegisterSecret { function, reg: Reg::new(r) })
                    }
                    (
                        "secret_region",
                        [Token { tok: Tok::Ident(r), .. }, Token { tok: Tok::Ident(k), .. }, Token { tok: Tok::Sym("="), .. }, Token { tok: Tok::Num(Some(n)), .. }],
                    ) if k == "size" => self.annotations.push(SecretAnnotation::SecretRegion {
                        function,
                        reg: Reg::new(r),
                        size: *n,
                    }),
                    ("secret", _) => self.err(line, col, "expected `@secret <reg>`"),
                    _ => self.err(line, col, "expected `@secret_region <reg> size=<bytes>`"),
                }
            }
            other => self.err(line, col, format!("unknown directive `@{other}`")),
        }
    }

    fn body_line(&mut self, line: usize, toks: &[Token]) {
        if self.current.is_none() {
            self.err(line, toks[0].col, "instruction outside a function");
            return;
        }
        let mut rest = toks;
        if let [Token { tok: Tok::Ident(l), col }, Token { tok: Tok::Sym(":"), .. }, tail @ ..] = toks {
            let f = self.current.as_mut().unwrap();
            f.annotations_open = false;
            f.pending_labels.push((l.clone(), line, *col));
            rest = tail;
        }
        if rest.is_empty() {
            return;
        }
        let Tok::Ident(op) = &rest[0].tok else {
            self.err(line, rest[0].col, "expected an opcode");
            return;
        };
        let op = op.clone();
        let op_col = rest[0].col;
        let operands = split_operands(&rest[1..]);
        self.current.as_mut().unwrap().annotations_open = false;
        self.instruction(line, op_col, &op, &operands);
    }

    fn bind_labels(&mut self) {
        let pc = self.instrs.len();
        let f = self.current.as_mut().unwrap();
        let pending = std::mem::take(&mut f.pending_labels);
        for (name, line, col) in pending {
            if f.labels.insert(name.clone(), pc).is_some() {
                self.diags.push(Diagnostic::error_at(line, col, format!("duplicate label `{name}`")));
            }
        }
    }

    fn emit(&mut self, instr: Instr) -> usize {
        self.bind_labels();
        self.instrs.push(instr);
        self.instrs.len() - 1
    }

    fn arity(&mut self, line: usize, col: usize, op: &str, ops: &[&[Token]], n: usize) -> bool {
        if ops.len() != n || ops.iter().any(|o| o.is_empty()) {
            self.err(line, col, format!("`{op}` expects {n} operand(s)"));
            false
        } else {
            true
        }
    }

    fn instruction(&mut self, line: usize, col: usize, op: &str, ops: &[&[Token]]) {
        match op {
            "assign" => {
                if !self.arity(line, col, op, ops, 2) {
                    return;
                }
                let Some(dst) = self.register(line, ops[0]) else { return };
                let Some(rhs) = self.expr(line, ops[1]) else { return };
                self.emit(Instr::Assign { dst, rhs });
            }
            "load" => {
                if !self.arity(line, col, op, ops, 2) {
                    return;
                }
                let Some(dst) = self.register(line, ops[0]) else { return };
                let Some(addr) = self.operand_reg(line, ops[1]) else { return };
                self.emit(Instr::Load { dst, addr });
            }
            "store" => {
                if !self.arity(line, col, op, ops, 2) {
                    return;
                }
                let Some(src) = self.operand_reg(line, ops[0]) else { return };
                let Some(addr) = self.operand_reg(line, ops[1]) else { return };
                self.emit(Instr::Store { src, addr });
            }
            "iszero" => {
                if !self.arity(line, col, op, ops, 2) {
                    return;
                }
                let Some(dst) = self.register(line, ops[0]) else { return };
                let Some(src) = self.operand_reg(line, ops[1]) else { return };
                self.emit(Instr::IsZero { dst, src });
            }
            "jcc" => {
                if !self.arity(line, col, op, ops, 2) {
                    return;
                }
                let Some(cond) = self.operand_reg(line, ops[0]) else { return };
                let target = match ops[1] {
                    [Token { tok: Tok::Ident(t), .. }] => PendingTarget::Label(t.clone()),
                    [Token { tok: Tok::Ident(r), .. }, Token { tok: Tok::Sym("["), .. }, inner @ .., Token { tok: Tok::Sym("]"), .. }] => {
                        let mut labels = Vec::new();
                        for part in split_operands(inner) {
                            match part {
                                [Token { tok: Tok::Ident(l), .. }] => labels.push(l.clone()),
                                _ => {
                                    self.err(line, ops[1][0].col, "expected a label list `[l1, l2, ...]`");
                                    return;
                                }
                            }
                        }
                        PendingTarget::Register(Reg::new(r), labels)
                    }
                    other => {
                        self.err(line, other[0].col, "expected a label or `<reg> [labels]` jump target");
                        return;
                    }
                };
                let tcol = ops[1][0].col;
                let pc = self.emit(Instr::Ret);
                self.current.as_mut().unwrap().jumps.push(PendingJump { pc, cond, target, line, col: tcol });
            }
            "call" => match ops {
                [[Token { tok: Tok::Ident(name), .. }]] => {
                    self.emit(Instr::Call { callee: name.clone() });
                }
                _ => self.err(line, col, "`call` expects a function name"),
            },
            "ret" => {
                if !ops.is_empty() {
                    self.err(line, col, "`ret` takes no operands");
                    return;
                }
                self.emit(Instr::Ret);
            }
            other => self.err(line, col, format!("unknown opcode `{other}`")),
        }
    }

    fn register(&mut self, line: usize, toks: &[Token]) -> Option<Reg> {
        match toks {
            [Token { tok: Tok::Ident(r), .. }] => Some(Reg::new(r)),
            _ => {
                self.err(line, toks[0].col, "expected a register");
                None
            }
        }
    }

    /// A register operand; any other expression is first assigned to a fresh temporary.
    fn operand_reg(&mut self, line: usize, toks: &[Token]) -> Option<Reg> {
        let e = self.expr(line, toks)?;
        if let Expr::Leaf(Operand::Reg(r)) = e {
            return Some(r);
        }
        let tmp = Reg::new(&format!("{TEMP_PREFIX}{}", self.next_temp));
        self.next_temp += 1;
        self.emit(Instr::Assign { dst: tmp.clone(), rhs: e });
        Some(tmp)
    }

    fn expr(&mut self, line: usize, toks: &[Token]) -> Option<Expr> {
        let mut ep = ExprParser { toks, pos: 0, line, width: self.width };
        let result = ep.parse(0).and_then(|e| {
            if ep.pos < toks.len() {
                Err(Diagnostic::error_at(line, toks[ep.pos].col, "unexpected token in expression"))
            } else {
                Ok(e)
            }
        });
        match result {
            Ok(e) => Some(e),
            Err(d) => {
                self.diags.push(d);
                None
            }
        }
    }

    fn finish_function(&mut self) {
        let Some(mut f) = self.current.take() else { return };
        if !f.pending_labels.is_empty() {
            for (name, line, col) in std::mem::take(&mut f.pending_labels) {
                self.err(line, col, format!("label `{name}` does not precede an instruction"));
            }
        }
        for j in std::mem::take(&mut f.jumps) {
            let target = match j.target {
                PendingTarget::Label(name) => match f.labels.get(&name) {
                    Some(&pc) => JumpTarget::Label { name, pc },
                    None => {
                        self.err(j.line, j.col, format!("unresolved label `{name}`"));
                        continue;
                    }
                },
                PendingTarget::Register(reg, names) => {
                    let mut labels = Vec::new();
                    for name in names {
                        match f.labels.get(&name) {
                            Some(&pc) => labels.push((name, pc)),
                            None => self.err(j.line, j.col, format!("unresolved label `{name}`")),
                        }
                    }
                    JumpTarget::Register { reg, labels }
                }
            };
            self.instrs[j.pc] = Instr::Jcc { cond: j.cond, target };
        }
        let end = self.instrs.len();
        self.functions.push(Function {
            name: f.name,
            param_count: f.params,
            entry_pc: f.start,
            body: f.start..end,
            labels: f.labels,
        });
    }

    fn into_program(mut self) -> Result<Program, Vec<Diagnostic>> {
        if self.functions.is_empty() && self.diags.is_empty() {
            self.diags.push(Diagnostic::error_pc(None, "program defines no functions"));
        }
        if self.diags.iter().any(Diagnostic::is_error) {
            return Err(self.diags);
        }
        let entry = self.entry.unwrap_or_else(|| self.functions[0].name.clone());
        let program = Program {
            instrs: self.instrs,
            functions: self.functions,
            entry,
            annotations: self.annotations,
            width: self.width,
        };
        let diags = validate(&program);
        if diags.iter().any(Diagnostic::is_error) {
            Err(diags)
        } else {
            Ok(program)
        }
    }
}

/// Splits on commas that are not nested in parentheses or brackets.
fn split_operands(toks: &[Token]) -> Vec<&[Token]> {
    if toks.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, t) in toks.iter().enumerate() {
        match t.tok {
            Tok::Sym("(") | Tok::Sym("[") => depth += 1,
            Tok::Sym(")") | Tok::Sym("]") => depth -= 1,
            Tok::Sym(",") if depth == 0 => {
                out.push(&toks[start..i]);
                start = i + 1;
            }
            _ => {}
        }
    }
    out.push(&toks[start..]);
    out
}

struct ExprParser<'a> {
    toks: &'a [Token],
    pos: usize,
    line: usize,
    width: u32,
}

/// Binding power of each infix operator; higher binds tighter.
fn precedence(sym: &str) -> Option<(u8, BinOp)> {
    Some(match sym {
        "|" => (1, BinOp::Or),
        "^" => (2, BinOp::Xor),
        "&" => (3, BinOp::And),
        "<<>>" => (4, BinOp::Bsh),
        "+" => (5, BinOp::Add),
        "-" => (5, BinOp::Sub),
        "*" => (6, BinOp::Mul),
        "/" => (6, BinOp::Div),
        "%" => (6, BinOp::Mod),
        _ => return None,
    })
}

impl ExprParser<'_> {
    fn error(&self, msg: &str) -> Diagnostic {
        let col = self.toks.get(self.pos).or(self.toks.last()).map(|t| t.col).unwrap_or(1);
        Diagnostic::error_at(self.line, col, msg)
    }

    fn parse(&mut self, min: u8) -> Result<Expr, Diagnostic> {
        let mut lhs = self.primary()?;
        while let Some(Token { tok: Tok::Sym(s), .. }) = self.toks.get(self.pos) {
            let Some((prec, op)) = precedence(s) else { break };
            if prec <= min {
                break;
            }
            self.pos += 1;
            let rhs = self.parse(prec)?;
            lhs = Expr::bin(op, lhs, rhs);
        }
        Ok(lhs)
    }

    fn literal(&self, v: Option<u64>, negate: bool) -> Result<Expr, Diagnostic> {
        match v {
            Some(n) if n <= mask(self.width) => {
                Ok(Expr::lit(if negate { n.wrapping_neg() & mask(self.width) } else { n }))
            }
            _ => Err(self.error(&format!("literal overflows {} bits", self.width))),
        }
    }

    fn primary(&mut self) -> Result<Expr, Diagnostic> {
        let Some(t) = self.toks.get(self.pos) else {
            return Err(self.error("expected an operand"));
        };
        match &t.tok {
            Tok::Ident(r) => {
                self.pos += 1;
                Ok(Expr::reg(r))
            }
            Tok::Num(v) => {
                let e = self.literal(*v, false)?;
                self.pos += 1;
                Ok(e)
            }
            Tok::Sym("-") => match self.toks.get(self.pos + 1) {
                Some(Token { tok: Tok::Num(v), .. }) => {
                    self.pos += 1;
                    let e = self.literal(*v, true)?;
                    self.pos += 1;
                    Ok(e)
                }
                _ => Err(self.error("unary minus applies only to literals")),
            },
            Tok::Sym("(") => {
                self.pos += 1;
                let e = self.parse(0)?;
                match self.toks.get(self.pos) {
                    Some(Token { tok: Tok::Sym(")"), .. }) => {
                        self.pos += 1;
                        Ok(e)
                    }
                    _ => Err(self.error("expected `)`")),
                }
            }
            _ => Err(self.error("expected an operand")),
        }
    }
}
