use super::{FixedTerm, FormulaAst, RandomTerm};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Name(String),
    Zero,
    One,
    Plus,
    Minus,
    Tilde,
    LParen,
    RParen,
    Bar,
    Slash,
    Colon,
    Star,
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Name(n) => format!("name {n:?}"),
        Tok::Zero => "'0'".into(),
        Tok::One => "'1'".into(),
        Tok::Plus => "'+'".into(),
        Tok::Minus => "'-'".into(),
        Tok::Tilde => "'~'".into(),
        Tok::LParen => "'('".into(),
        Tok::RParen => "')'".into(),
        Tok::Bar => "'|'".into(),
        Tok::Slash => "'/'".into(),
        Tok::Colon => "':'".into(),
        Tok::Star => "'*'".into(),
    }
}

pub(crate) fn is_plain_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '.' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

fn err(pos: usize, msg: impl Into<String>) -> Error {
    Error::Formula {
        pos,
        msg: msg.into(),
    }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>> {
    let mut out = Vec::new();
    let bytes: Vec<(usize, char)> = text.char_indices().collect();
    let mut i = 0;
    while i < bytes.len() {
        let (pos, c) = bytes[i];
        let tok = match c {
            c if c.is_whitespace() => {
                i += 1;
                continue;
            }
            '+' => Tok::Plus,
            '-' => Tok::Minus,
            '~' => Tok::Tilde,
            '(' => Tok::LParen,
            ')' => Tok::RParen,
            '|' => Tok::Bar,
            '/' => Tok::Slash,
            ':' => Tok::Colon,
            '*' => Tok::Star,
            '`' => {
                let start = i + 1;
                let mut j = start;
                while j < bytes.len() && bytes[j].1 != '`' {
                    j += 1;
                }
                if j == bytes.len() {
                    return Err(err(pos, "unterminated backtick name"));
                }
                let name: String = bytes[start..j].iter().map(|&(_, c)| c).collect();
                if name.is_empty() {
                    return Err(err(pos, "empty backtick name"));
                }
                out.push((pos, Tok::Name(name)));
                i = j + 1;
                continue;
            }
            c if c.is_ascii_digit() => {
                let mut j = i;
                while j < bytes.len() && (bytes[j].1.is_ascii_alphanumeric() || bytes[j].1 == '.') {
                    j += 1;
                }
                let word: String = bytes[i..j].iter().map(|&(_, c)| c).collect();
                let tok = match word.as_str() {
                    "0" => Tok::Zero,
                    "1" => Tok::One,
                    _ => return Err(err(pos, format!("unexpected number {word:?}; only 0 and 1 are allowed"))),
                };
                out.push((pos, tok));
                i = j;
                continue;
            }
            c if c.is_ascii_alphabetic() || c == '_' || c == '.' => {
                let mut j = i;
                while j < bytes.len()
                    && (bytes[j].1.is_ascii_alphanumeric() || bytes[j].1 == '_' || bytes[j].1 == '.')
                {
                    j += 1;
                }
                let name: String = bytes[i..j].iter().map(|&(_, c)| c).collect();
                out.push((pos, Tok::Name(name)));
                i = j;
                continue;
            }
            other => return Err(err(pos, format!("unexpected character {other:?}"))),
        };
        out.push((pos, tok));
        i += 1;
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    at: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.at).map(|(_, t)| t)
    }

    fn pos(&self) -> usize {
        self.toks.get(self.at).map_or(self.end, |(p, _)| *p)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.at).map(|(_, t)| t.clone());
        self.at += 1;
        t
    }

    fn expect_name(&mut self, what: &str) -> Result<String> {
        let pos = self.pos();
        match self.next() {
            Some(Tok::Name(n)) => Ok(n),
            Some(t) => Err(err(pos, format!("expected {what}, found {}", describe(&t)))),
            None => Err(err(pos, format!("expected {what}, found end of input"))),
        }
    }

    fn check_unsupported(&self) -> Result<()> {
        match self.peek() {
            Some(Tok::Colon) | Some(Tok::Star) => Err(err(
                self.pos(),
                "interaction terms are not supported",
            )),
            Some(Tok::Slash) => Err(err(
                self.pos(),
                "nested grouping 'a/b' is not supported; write two random terms",
            )),
            _ => Ok(()),
        }
    }

    fn random(&mut self, open: usize) -> Result<RandomTerm> {
        let mut slopes: Vec<String> = Vec::new();
        let mut icpt: Option<bool> = None;
        if self.peek() == Some(&Tok::Bar) {
            return Err(err(self.pos(), "empty slope specification before '|'"));
        }
        loop {
            let pos = self.pos();
            match self.next() {
                Some(Tok::One) => set_intercept(&mut icpt, true, pos)?,
                Some(Tok::Zero) => set_intercept(&mut icpt, false, pos)?,
                Some(Tok::Name(n)) => {
                    if slopes.contains(&n) {
                        return Err(err(pos, format!("duplicate slope {n:?}")));
                    }
                    slopes.push(n);
                }
                Some(t) => return Err(err(pos, format!("unexpected {} in random term", describe(&t)))),
                None => return Err(err(open, "unbalanced parenthesis")),
            }
            self.check_unsupported()?;
            let pos = self.pos();
            match self.next() {
                Some(Tok::Plus) => continue,
                Some(Tok::Minus) => {
                    let p = self.pos();
                    match self.next() {
                        Some(Tok::One) => set_intercept(&mut icpt, false, p)?,
                        _ => return Err(err(p, "only '- 1' may follow '-'")),
                    }
                    match self.next() {
                        Some(Tok::Bar) => break,
                        _ => return Err(err(self.pos(), "expected '|' after '- 1'")),
                    }
                }
                Some(Tok::Bar) => break,
                Some(t) => return Err(err(pos, format!("expected '+' or '|', found {}", describe(&t)))),
                None => return Err(err(open, "unbalanced parenthesis")),
            }
        }
        let include_intercept = icpt.unwrap_or(true);
        if slopes.is_empty() && !include_intercept {
            return Err(err(open, "random term has neither intercept nor slopes"));
        }
        let group = match self.peek() {
            Some(Tok::RParen) | None => {
                return Err(err(self.pos(), "random term needs a grouping column after '|'"))
            }
            _ => self.expect_name("grouping column")?,
        };
        self.check_unsupported()?;
        match self.next() {
            Some(Tok::RParen) => {}
            Some(Tok::Bar) => return Err(err(self.pos(), "random term names more than one grouping column")),
            _ => return Err(err(open, "unbalanced parenthesis")),
        }
        Ok(RandomTerm {
            slopes,
            include_intercept,
            group,
        })
    }
}

fn set_intercept(slot: &mut Option<bool>, value: bool, pos: usize) -> Result<()> {
    match *slot {
        Some(v) if v != value => Err(err(pos, "conflicting intercept specification")),
        _ => {
            *slot = Some(value);
            Ok(())
        }
    }
}

/// Parses `[resp (+ resp)*] ~ term (+ term)*`.
///
/// Terms are column names, `1`/`0` (or `- 1`) for the intercept, and random
/// terms `(slopes | group)`. A random term with slopes carries an implicit
/// intercept unless `0` is among its slopes.
pub fn parse_formula(text: &str) -> Result<FormulaAst> {
    if text.trim().is_empty() {
        return Err(err(0, "empty formula"));
    }
    let toks = lex(text)?;
    let tilde_at = toks
        .iter()
        .position(|(_, t)| *t == Tok::Tilde)
        .ok_or_else(|| err(text.len(), "missing '~'"))?;
    if toks.iter().filter(|(_, t)| *t == Tok::Tilde).count() > 1 {
        let p = toks.iter().filter(|(_, t)| *t == Tok::Tilde).nth(1).map_or(0, |x| x.0);
        return Err(err(p, "more than one '~'"));
    }

    let mut p = Parser {
        toks,
        at: 0,
        end: text.len(),
    };

    let mut responses = Vec::new();
    while p.at < tilde_at {
        let name = p.expect_name("response column")?;
        if responses.contains(&name) {
            return Err(err(p.pos(), format!("duplicate response {name:?}")));
        }
        responses.push(name);
        if p.at < tilde_at {
            let pos = p.pos();
            match p.next() {
                Some(Tok::Plus) if p.at < tilde_at => {}
                Some(t) => return Err(err(pos, format!("expected '+' or '~', found {}", describe(&t)))),
                None => unreachable!("tilde is ahead"),
            }
        }
    }
    p.next(); // '~'

    let mut cols: Vec<String> = Vec::new();
    let mut random = Vec::new();
    let mut icpt: Option<bool> = None;
    if p.peek().is_none() {
        return Err(err(p.pos(), "empty right-hand side"));
    }
    let mut negate = false;
    loop {
        let pos = p.pos();
        match p.next() {
            Some(Tok::One) => set_intercept(&mut icpt, !negate, pos)?,
            Some(Tok::Zero) if !negate => set_intercept(&mut icpt, false, pos)?,
            Some(Tok::Name(n)) if !negate => {
                if cols.contains(&n) {
                    return Err(err(pos, format!("duplicate fixed term {n:?}")));
                }
                cols.push(n);
            }
            Some(Tok::LParen) if !negate => random.push(p.random(pos)?),
            Some(Tok::RParen) => return Err(err(pos, "unbalanced parenthesis")),
            Some(t) if negate => {
                return Err(err(pos, format!("only '- 1' is supported, found '- {}'", describe(&t))))
            }
            Some(t) => return Err(err(pos, format!("unexpected {}", describe(&t)))),
            None => return Err(err(pos, "expected a term")),
        }
        p.check_unsupported()?;
        let pos = p.pos();
        match p.next() {
            None => break,
            Some(Tok::Plus) => negate = false,
            Some(Tok::Minus) => negate = true,
            Some(Tok::RParen) => return Err(err(pos, "unbalanced parenthesis")),
            Some(t) => return Err(err(pos, format!("expected '+', found {}", describe(&t)))),
        }
    }

    let mut fixed: Vec<FixedTerm> = cols.into_iter().map(FixedTerm::Column).collect();
    if icpt.unwrap_or(true) {
        fixed.push(FixedTerm::Intercept);
    }
    Ok(FormulaAst {
        responses,
        fixed,
        random,
    })
}
