//! Oracles shared by the integration tests. None of them reuse generator or
//! decoder code paths.
#![allow(dead_code)]

use std::collections::HashMap;

use recall_core::taskgen::{StoreFormat, TaskInstance};

/// Exact rational with i128 parts, denominator kept positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Q(i128, i128);

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

impl Q {
    pub fn int(n: i128) -> Q {
        Q(n, 1)
    }
    fn norm(n: i128, d: i128) -> Q {
        assert!(d != 0, "division by zero in problem");
        let g = gcd(n, d).max(1);
        let s = if d < 0 { -1 } else { 1 };
        Q(s * n / g, s * d / g)
    }
    fn add(self, o: Q) -> Q {
        Q::norm(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }
    fn neg(self) -> Q {
        Q(-self.0, self.1)
    }
    fn mul(self, o: Q) -> Q {
        Q::norm(self.0 * o.0, self.1 * o.1)
    }
    fn div(self, o: Q) -> Q {
        Q::norm(self.0 * o.1, self.1 * o.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Num(i128),
    X,
    Plus,
    Minus,
    LParen,
    RParen,
    LBrace,
    RBrace,
    Eq,
    Cdot,
    Frac,
}

fn lex(s: &str) -> Vec<Tok> {
    let b = s.as_bytes();
    let mut i = 0;
    let mut out = Vec::new();
    while i < b.len() {
        let c = b[i];
        match c {
            b' ' => i += 1,
            b'0'..=b'9' => {
                let j = (i..b.len()).find(|&j| !b[j].is_ascii_digit()).unwrap_or(b.len());
                out.push(Tok::Num(s[i..j].parse().unwrap()));
                i = j;
            }
            b'x' => {
                out.push(Tok::X);
                i += 1;
            }
            b'+' => {
                out.push(Tok::Plus);
                i += 1;
            }
            b'-' => {
                out.push(Tok::Minus);
                i += 1;
            }
            b'(' => {
                out.push(Tok::LParen);
                i += 1;
            }
            b')' => {
                out.push(Tok::RParen);
                i += 1;
            }
            b'{' => {
                out.push(Tok::LBrace);
                i += 1;
            }
            b'}' => {
                out.push(Tok::RBrace);
                i += 1;
            }
            b'=' => {
                out.push(Tok::Eq);
                i += 1;
            }
            b'\\' if s[i..].starts_with("\\cdot") => {
                out.push(Tok::Cdot);
                i += 5;
            }
            b'\\' if s[i..].starts_with("\\frac") => {
                out.push(Tok::Frac);
                i += 5;
            }
            _ => panic!("unexpected character {:?} in {s:?}", c as char),
        }
    }
    out
}

struct Parser<'a> {
    toks: &'a [Tok],
    pos: usize,
    x: Q,
}

impl Parser<'_> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }
    fn eat(&mut self, t: &Tok) {
        assert_eq!(self.peek(), Some(t), "at token {}", self.pos);
        self.pos += 1;
    }
    fn expr(&mut self) -> Q {
        let mut v = self.term();
        loop {
            match self.peek() {
                Some(Tok::Plus) => {
                    self.pos += 1;
                    v = v.add(self.term());
                }
                Some(Tok::Minus) => {
                    self.pos += 1;
                    v = v.add(self.term().neg());
                }
                _ => return v,
            }
        }
    }
    fn term(&mut self) -> Q {
        let mut v = self.factor();
        loop {
            match self.peek() {
                Some(Tok::Cdot) => {
                    self.pos += 1;
                    v = v.mul(self.factor());
                }
                // implicit product: 5x, 2(x + 3)
                Some(Tok::X) | Some(Tok::LParen) | Some(Tok::Frac) => v = v.mul(self.factor()),
                _ => return v,
            }
        }
    }
    fn factor(&mut self) -> Q {
        match self.peek().cloned() {
            Some(Tok::Minus) => {
                self.pos += 1;
                self.factor().neg()
            }
            Some(Tok::Num(n)) => {
                self.pos += 1;
                Q::int(n)
            }
            Some(Tok::X) => {
                self.pos += 1;
                self.x
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let v = self.expr();
                self.eat(&Tok::RParen);
                v
            }
            Some(Tok::Frac) => {
                self.pos += 1;
                self.eat(&Tok::LBrace);
                let a = self.expr();
                self.eat(&Tok::RBrace);
                self.eat(&Tok::LBrace);
                let b = self.expr();
                self.eat(&Tok::RBrace);
                a.div(b)
            }
            t => panic!("unexpected token {t:?}"),
        }
    }
}

/// `lhs(x) - rhs(x)` for an equation string.
fn residual(eq: &str, x: Q) -> Q {
    let toks = lex(eq);
    let split = toks.iter().position(|t| *t == Tok::Eq).expect("equation has '='");
    let mut l = Parser {
        toks: &toks[..split],
        pos: 0,
        x,
    };
    let lv = l.expr();
    assert_eq!(l.pos, split, "trailing tokens on left side");
    let mut r = Parser {
        toks: &toks[split + 1..],
        pos: 0,
        x,
    };
    let rv = r.expr();
    assert_eq!(r.pos, toks.len() - split - 1, "trailing tokens on right side");
    lv.add(rv.neg())
}

/// Solves a linear equation in `x` exactly. Returns `None` unless it has a
/// unique integer solution.
pub fn solve_equation(eq: &str) -> Option<i128> {
    let f0 = residual(eq, Q::int(0));
    let f1 = residual(eq, Q::int(1));
    let f2 = residual(eq, Q::int(2));
    let slope = f1.add(f0.neg());
    // linear check: f(2) - f(1) == f(1) - f(0)
    assert_eq!(f2.add(f1.neg()), slope, "equation is not linear: {eq}");
    if slope.0 == 0 {
        return None;
    }
    let root = f0.neg().div(slope);
    (root.1 == 1).then_some(root.0)
}

/// First `$$...$$` block in the text.
pub fn display_math(text: &str) -> Option<&str> {
    let start = text.find("$$")? + 2;
    let len = text[start..].find("$$")?;
    Some(&text[start..start + len])
}

/// Every key in the instance's store body, parsed from the rendered text.
pub fn store_keys(inst: &TaskInstance) -> Vec<i64> {
    let body: String = inst
        .prompt
        .chars()
        .skip(inst.metadata.body_interval.start)
        .take(inst.metadata.body_interval.len())
        .collect();
    let re = match inst.metadata.spec.store_format {
        StoreFormat::Lines => regex::Regex::new(r"(?m)^Key (-?\d+):$").unwrap(),
        StoreFormat::Json => regex::Regex::new(r#"(?m)^  "(-?\d+)": "#).unwrap(),
        StoreFormat::Csv => regex::Regex::new(r"(?m)^(-?\d+),").unwrap(),
    };
    re.captures_iter(&body).map(|c| c[1].parse().unwrap()).collect()
}

/// Votes per candidate, parsed from any of the three vote layouts.
pub fn count_votes(inst: &TaskInstance) -> HashMap<String, usize> {
    let re = regex::Regex::new(r#"(?m)^(?:Voter \d+: (.+)|\d+,(.+)|  \{"voter": \d+, "vote": "(.+)"\},?)$"#).unwrap();
    let mut m = HashMap::new();
    for c in re.captures_iter(&inst.prompt) {
        let name = c.get(1).or(c.get(2)).or(c.get(3)).unwrap().as_str().to_string();
        *m.entry(name).or_default() += 1;
    }
    m
}

/// Top `n` candidates by count, or `None` if the cut is tied.
pub fn top_candidates(counts: &HashMap<String, usize>, n: usize) -> Option<Vec<String>> {
    let mut v: Vec<(&String, &usize)> = counts.iter().collect();
    v.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    if v.len() > n && v[n - 1].1 == v[n].1 {
        return None;
    }
    let mut top: Vec<String> = v[..n].iter().map(|(k, _)| (*k).clone()).collect();
    top.sort();
    Some(top)
}

pub fn char_slice(text: &str, start: usize, end: usize) -> String {
    text.chars().skip(start).take(end - start).collect()
}

/// Naive substring count by sliding window (no `str::matches`).
pub fn count_occurrences(hay: &str, needle: &str) -> usize {
    let h = hay.as_bytes();
    let n = needle.as_bytes();
    if n.is_empty() || n.len() > h.len() {
        return 0;
    }
    (0..=h.len() - n.len()).filter(|&i| &h[i..i + n.len()] == n).count()
}

/// Tokens that follow some occurrence of `prefix` in `ctx`, by scanning
/// every window.
pub fn continuations(ctx: &[u32], prefix: &[u32]) -> std::collections::BTreeSet<u32> {
    let k = prefix.len();
    let mut out = std::collections::BTreeSet::new();
    for i in 0..ctx.len() {
        if i + k < ctx.len() && ctx[i..i + k] == *prefix {
            out.insert(ctx[i + k]);
        }
    }
    out
}

/// Start positions of `span` in `ctx`; every position for an empty span.
pub fn occurrences(ctx: &[u32], span: &[u32]) -> Vec<usize> {
    (0..ctx.len())
        .filter(|&i| i + span.len() <= ctx.len() && ctx[i..i + span.len()] == *span)
        .collect()
}

/// A context with long repeats: random chunks of a few motifs joined by noise.
pub fn repetitive_context(rng: &mut impl rand::Rng, len: usize, alphabet: u32) -> Vec<u32> {
    let motifs: Vec<Vec<u32>> = (0..rng.gen_range(1..6))
        .map(|_| (0..rng.gen_range(8..96)).map(|_| rng.gen_range(0..alphabet)).collect())
        .collect();
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        if rng.gen_bool(0.7) {
            let m = &motifs[rng.gen_range(0..motifs.len())];
            let a = rng.gen_range(0..m.len());
            let b = rng.gen_range(a..=m.len());
            out.extend_from_slice(&m[a..b]);
        } else {
            for _ in 0..rng.gen_range(1..8) {
                out.push(rng.gen_range(0..alphabet));
            }
        }
    }
    out.truncate(len);
    out
}

#[derive(Debug, Clone, Copy)]
pub struct WalkParams {
    pub vocab: u32,
    pub max_steps: usize,
    pub max_spans: usize,
    pub max_span_len: usize,
    pub open_p: f64,
    pub close_p: f64,
}

#[derive(Debug, Default, Clone, Copy)]
pub struct WalkStats {
    pub steps: usize,
    pub masks_checked: usize,
    pub spans: usize,
    pub longest_span: usize,
    pub rejections_checked: usize,
}

fn set_of(mask: &recall_core::decoder::TokenMask) -> std::collections::BTreeSet<u32> {
    mask.allowed_ids().into_iter().map(|t| t.0).collect()
}

/// Drives a decoder with a seeded random policy while tracking the
/// searchable context independently. Every mask is compared with the
/// window-scan oracle and every closed span with its snapshot.
pub fn walk(prompt: Vec<u32>, p: WalkParams, rng: &mut impl rand::Rng) -> Result<WalkStats, String> {
    use recall_core::context::{token_ids, TokenId};
    use recall_core::decoder::{DecoderConfig, GenerationState};

    let (rs, re) = (p.vocab - 2, p.vocab - 1);
    let cfg = DecoderConfig::new(rs, re, p.vocab as usize);
    let mut state = GenerationState::new(token_ids(&prompt), cfg).map_err(|e| e.to_string())?;
    let mut model = prompt;
    let mut open: Option<(Vec<u32>, Vec<u32>)> = None; // (snapshot, prefix)
    let mut st = WalkStats::default();

    for step in 0..p.max_steps {
        let mask = state.next_token_mask().map_err(|e| e.to_string())?;
        let got = set_of(&mask);
        let want: std::collections::BTreeSet<u32> = match &open {
            None => (0..p.vocab).filter(|&t| t != re).collect(),
            Some((snap, prefix)) => {
                let mut w = continuations(snap, prefix);
                w.remove(&rs);
                w.insert(re);
                w
            }
        };
        st.masks_checked += 1;
        if got != want {
            return Err(format!(
                "step {step}: mask differs from oracle (prefix len {}): only impl {:?}, only oracle {:?}",
                open.as_ref().map_or(0, |o| o.1.len()),
                got.difference(&want).take(8).collect::<Vec<_>>(),
                want.difference(&got).take(8).collect::<Vec<_>>()
            ));
        }

        // a token outside the mask must be refused without side effects
        if rng.gen_bool(0.1) {
            let bad: Vec<u32> = (0..p.vocab).filter(|t| !want.contains(t)).collect();
            if !bad.is_empty() {
                let t = bad[rng.gen_range(0..bad.len())];
                if state.observe_token(TokenId(t)).is_ok() {
                    return Err(format!("step {step}: disallowed token {t} accepted"));
                }
                if set_of(&state.next_token_mask().map_err(|e| e.to_string())?) != want {
                    return Err(format!("step {step}: rejected token changed the state"));
                }
                st.rejections_checked += 1;
            }
        }

        let ordinary: Vec<u32> = want.iter().copied().filter(|&t| t != rs && t != re).collect();
        let token = match &mut open {
            None => {
                if st.spans < p.max_spans && rng.gen_bool(p.open_p) {
                    open = Some((model.clone(), Vec::new()));
                    rs
                } else {
                    let t = ordinary[rng.gen_range(0..ordinary.len())];
                    model.push(t);
                    t
                }
            }
            Some((_, prefix)) => {
                if ordinary.is_empty() || prefix.len() >= p.max_span_len || rng.gen_bool(p.close_p) {
                    re
                } else {
                    let t = ordinary[rng.gen_range(0..ordinary.len())];
                    prefix.push(t);
                    t
                }
            }
        };
        state.observe_token(TokenId(token)).map_err(|e| format!("step {step}: {e}"))?;
        st.steps += 1;

        if token == re {
            let (snap, prefix) = open.take().expect("closing an open span");
            let span = state.closed_spans().last().expect("span recorded");
            check_span(span, &snap, &prefix).map_err(|e| format!("step {step}: {e}"))?;
            st.spans += 1;
            st.longest_span = st.longest_span.max(prefix.len());
            model.push(rs);
            model.extend_from_slice(&prefix);
            model.push(re);
        }
    }
    let ctx: Vec<u32> = state.context().tokens().iter().map(|t| t.0).collect();
    if ctx != model {
        return Err("final searchable context differs from the tracked one".into());
    }
    Ok(st)
}

/// Span content, positions, snapshot and work accounting against a direct
/// scan of the snapshot.
pub fn check_span(span: &recall_core::decoder::RecallSpan, snap: &[u32], prefix: &[u32]) -> Result<(), String> {
    let toks: Vec<u32> = span.tokens.iter().map(|t| t.0).collect();
    if toks != prefix {
        return Err(format!("span tokens {toks:?} != emitted {prefix:?}"));
    }
    if span.snapshot_len != snap.len() {
        return Err(format!("snapshot_len {} != {}", span.snapshot_len, snap.len()));
    }
    let occ = occurrences(snap, prefix);
    if !prefix.is_empty() && occ.is_empty() {
        return Err("span is not a substring of its snapshot".into());
    }
    if span.context_start_positions != occ {
        return Err("recorded start positions differ from a direct scan".into());
    }
    check_work(span, snap, prefix)
}

/// visits <= M + sum_k |S_k| and |S_{k+1}| <= |S_k|, with every |S_k|
/// recomputed from the snapshot.
pub fn check_work(span: &recall_core::decoder::RecallSpan, snap: &[u32], prefix: &[u32]) -> Result<(), String> {
    let sizes = &span.stats.candidate_sizes;
    if sizes.len() != prefix.len() + 1 {
        return Err(format!("{} candidate sizes for a {}-token span", sizes.len(), prefix.len()));
    }
    for (k, &s) in sizes.iter().enumerate() {
        let direct = if k == 0 { snap.len() } else { occurrences(snap, &prefix[..k]).len() };
        if s != direct {
            return Err(format!("|S_{k}| = {s}, direct count {direct}"));
        }
    }
    if let Some(k) = sizes.windows(2).position(|w| w[1] > w[0]) {
        return Err(format!("|S_{}| > |S_{k}|", k + 1));
    }
    let bound: u64 = sizes.iter().map(|&s| s as u64).sum();
    if span.stats.visits > bound {
        return Err(format!("visits {} > bound {bound}", span.stats.visits));
    }
    Ok(())
}
