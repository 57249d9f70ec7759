//! Keyword-constrained generation guided by HMM backward values.
//!
//! A [`KeywordDfa`] tracks which keywords have appeared as contiguous token
//! runs. A [`GuidanceTable`] holds, for every number of remaining tokens,
//! hidden state and DFA state, the probability that the HMM continuation
//! ends in an accepting DFA state. Guided generation multiplies the HMM's
//! next-token distribution by that probability and renormalizes.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::hmm::{categorical, HmmModel, TokenSequence};
use crate::seed::{self, Purpose};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordDfa {
    vocab_size: usize,
    keywords: Vec<Vec<u32>>,
    /// `delta[s * vocab_size + x]`.
    delta: Vec<u32>,
    accepting: Vec<bool>,
}

impl KeywordDfa {
    pub const START: usize = 0;

    pub fn num_states(&self) -> usize {
        self.accepting.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn keywords(&self) -> &[Vec<u32>] {
        &self.keywords
    }

    pub fn next(&self, state: usize, token: u32) -> usize {
        self.delta[state * self.vocab_size + token as usize] as usize
    }

    pub fn is_accepting(&self, state: usize) -> bool {
        self.accepting[state]
    }

    pub fn run(&self, tokens: &[u32]) -> usize {
        tokens.iter().fold(Self::START, |s, &x| self.next(s, x))
    }

    pub fn accepts(&self, tokens: &[u32]) -> bool {
        self.is_accepting(self.run(tokens))
    }

    /// Keywords that cannot fit in `horizon` tokens.
    pub fn horizon_warnings(&self, horizon: usize) -> Vec<String> {
        let mut out: Vec<String> = self
            .keywords
            .iter()
            .filter(|k| k.len() > horizon)
            .map(|k| format!("keyword {k:?} is longer than the horizon {horizon}"))
            .collect();
        let total: usize = self.keywords.iter().map(Vec::len).sum();
        if out.is_empty() && self.keywords.len() > 1 && total > horizon {
            out.push(format!(
                "keywords need up to {total} tokens but the horizon is {horizon}"
            ));
        }
        out
    }

    /// A one-state DFA that accepts everything.
    pub fn neutral(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            keywords: Vec::new(),
            delta: vec![0; vocab_size],
            accepting: vec![true],
        }
    }
}

/// `table[q][x]`: matched prefix length after reading `x` in state `q`.
/// State `len` means the keyword has been seen and is absorbing.
fn kmp_table(keyword: &[u32], vocab_size: usize) -> Vec<Vec<usize>> {
    let n = keyword.len();
    let mut fail = vec![0usize; n];
    let mut k = 0;
    for i in 1..n {
        while k > 0 && keyword[i] != keyword[k] {
            k = fail[k - 1];
        }
        if keyword[i] == keyword[k] {
            k += 1;
        }
        fail[i] = k;
    }
    let mut table = vec![vec![0usize; vocab_size]; n + 1];
    for q in 0..=n {
        for x in 0..vocab_size {
            table[q][x] = if q == n {
                n
            } else if keyword[q] as usize == x {
                q + 1
            } else if q == 0 {
                0
            } else {
                table[fail[q - 1]][x]
            };
        }
    }
    table
}

/// Product of one prefix matcher per keyword, restricted to states reachable
/// from the start. State 0 is the start; states are numbered in BFS order.
pub fn build_keyword_dfa(keywords: &[Vec<u32>], vocab_size: usize) -> Result<KeywordDfa> {
    if keywords.is_empty() {
        return Err(Error::Config("no keywords given".into()));
    }
    if vocab_size == 0 {
        return Err(Error::Config("vocabulary is empty".into()));
    }
    for k in keywords {
        if k.is_empty() {
            return Err(Error::Config("empty keyword".into()));
        }
        if let Some(&x) = k.iter().find(|&&x| x as usize >= vocab_size) {
            return Err(Error::Config(format!(
                "keyword token {x} outside vocabulary of {vocab_size}"
            )));
        }
    }
    let tables: Vec<_> = keywords.iter().map(|k| kmp_table(k, vocab_size)).collect();
    let start = vec![0usize; keywords.len()];
    let mut index: HashMap<Vec<usize>, u32> = HashMap::from([(start.clone(), 0)]);
    let mut states = vec![start];
    let mut delta = Vec::new();
    let mut head = 0;
    while head < states.len() {
        let current = states[head].clone();
        for x in 0..vocab_size {
            let next: Vec<usize> = current.iter().zip(&tables).map(|(&q, t)| t[q][x]).collect();
            let id = match index.get(&next) {
                Some(&id) => id,
                None => {
                    let id = states.len() as u32;
                    index.insert(next.clone(), id);
                    states.push(next);
                    id
                }
            };
            delta.push(id);
        }
        head += 1;
    }
    let accepting = states
        .iter()
        .map(|s| s.iter().zip(keywords).all(|(&q, k)| q == k.len()))
        .collect();
    Ok(KeywordDfa {
        vocab_size,
        keywords: keywords.to_vec(),
        delta,
        accepting,
    })
}

/// `value(t, z, s)`: probability that emitting `t` more tokens, starting in
/// hidden state `z` with the DFA in state `s`, ends in an accepting state.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceTable {
    horizon: usize,
    hidden_size: usize,
    dfa_states: usize,
    values: Vec<f64>,
}

impl GuidanceTable {
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn dfa_states(&self) -> usize {
        self.dfa_states
    }

    pub fn value(&self, remaining: usize, hidden: usize, dfa_state: usize) -> f64 {
        self.values[self.offset(remaining) + hidden * self.dfa_states + dfa_state]
    }

    /// Values for `remaining` steps, indexed `[hidden * dfa_states + s]`.
    pub fn slice(&self, remaining: usize) -> &[f64] {
        let o = self.offset(remaining);
        &self.values[o..o + self.hidden_size * self.dfa_states]
    }

    fn offset(&self, remaining: usize) -> usize {
        assert!(
            remaining <= self.horizon,
            "remaining {remaining} beyond horizon"
        );
        remaining * self.hidden_size * self.dfa_states
    }
}

pub fn build_guidance(model: &HmmModel, dfa: &KeywordDfa, horizon: usize) -> Result<GuidanceTable> {
    if dfa.vocab_size() != model.vocab_size() {
        return Err(Error::Dimension(format!(
            "DFA vocabulary {} differs from model vocabulary {}",
            dfa.vocab_size(),
            model.vocab_size()
        )));
    }
    if horizon == 0 {
        return Err(Error::Config("horizon must be positive".into()));
    }
    let (n, s_count, v) = (model.hidden_size(), dfa.num_states(), model.vocab_size());
    let layer = n * s_count;
    let mut values = Vec::with_capacity((horizon + 1) * layer);
    for _ in 0..n {
        values.extend((0..s_count).map(|s| if dfa.is_accepting(s) { 1.0 } else { 0.0 }));
    }
    let (alpha, beta) = (model.transition(), model.emission());
    for t in 1..=horizon {
        let prev = &values[(t - 1) * layer..t * layer];
        let mut next = vec![0.0; layer];
        crate::par::for_each_row_mut(&mut next, s_count, |z, out| {
            // u[s'] = Σ_z' α[z, z'] value(t−1, z', s')
            let mut u = vec![0.0; s_count];
            for (zp, &a) in alpha.row(z).iter().enumerate() {
                if a != 0.0 {
                    for (acc, &p) in u.iter_mut().zip(&prev[zp * s_count..(zp + 1) * s_count]) {
                        *acc += a * p;
                    }
                }
            }
            let emit = beta.row(z);
            for (s, slot) in out.iter_mut().enumerate() {
                let mut sum = 0.0;
                for x in 0..v {
                    if emit[x] != 0.0 {
                        sum += emit[x] * u[dfa.next(s, x as u32)];
                    }
                }
                *slot = sum.min(1.0);
            }
        });
        values.extend_from_slice(&next);
    }
    Ok(GuidanceTable {
        horizon,
        hidden_size: n,
        dfa_states: s_count,
        values,
    })
}

/// Unnormalized next-token weights given a filtered belief over the hidden
/// state that emits the next token.
///
/// Without guidance this is the HMM predictive distribution. With guidance
/// each token `x` is weighted by `Σ_z b(z) β[z, x] Σ_z' α[z, z'] value(r−1,
/// z', δ(s, x))`, which is the joint probability of `x` and eventual
/// acceptance.
pub fn next_token_weights(
    model: &HmmModel,
    belief: &[f64],
    dfa: &KeywordDfa,
    dfa_state: usize,
    guidance: Option<(&GuidanceTable, usize)>,
) -> Vec<f64> {
    let v = model.vocab_size();
    let mut weights = vec![0.0; v];
    match guidance {
        None => {
            for (z, &b) in belief.iter().enumerate() {
                if b != 0.0 {
                    for (w, &e) in weights.iter_mut().zip(model.emission().row(z)) {
                        *w += b * e;
                    }
                }
            }
        }
        Some((table, remaining)) => {
            assert!(remaining >= 1, "no tokens remaining");
            let s_count = dfa.num_states();
            let prev = table.slice(remaining - 1);
            for (z, &b) in belief.iter().enumerate() {
                if b == 0.0 {
                    continue;
                }
                let mut u = vec![0.0; s_count];
                for (zp, &a) in model.transition().row(z).iter().enumerate() {
                    if a != 0.0 {
                        for (acc, &p) in u.iter_mut().zip(&prev[zp * s_count..(zp + 1) * s_count]) {
                            *acc += a * p;
                        }
                    }
                }
                for (x, (w, &e)) in weights.iter_mut().zip(model.emission().row(z)).enumerate() {
                    if e != 0.0 {
                        *w += b * e * u[dfa.next(dfa_state, x as u32)];
                    }
                }
            }
        }
    }
    weights
}

/// Next-token distribution for a belief; `None` when every weight is zero.
pub fn next_token_distribution(
    model: &HmmModel,
    belief: &[f64],
    dfa: &KeywordDfa,
    dfa_state: usize,
    guidance: Option<(&GuidanceTable, usize)>,
) -> Option<Vec<f64>> {
    let mut w = next_token_weights(model, belief, dfa, dfa_state, guidance);
    let total: f64 = w.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    w.iter_mut().for_each(|x| *x /= total);
    Some(w)
}

/// Belief over the next hidden state after observing `token`.
fn advance_belief(model: &HmmModel, belief: &[f64], token: u32) -> Vec<f64> {
    let mut next = vec![0.0; model.hidden_size()];
    for (z, &b) in belief.iter().enumerate() {
        let w = b * model.emission()[(z, token as usize)];
        if w != 0.0 {
            for (acc, &a) in next.iter_mut().zip(model.transition().row(z)) {
                *acc += w * a;
            }
        }
    }
    let total: f64 = next.iter().sum();
    if total > 0.0 {
        next.iter_mut().for_each(|x| *x /= total);
    }
    next
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub accepted: bool,
    /// Every next-token weight was zero before `max_len` was reached.
    pub failed: bool,
}

impl Generation {
    pub fn sequence(&self) -> Option<TokenSequence> {
        TokenSequence::new(self.tokens.clone()).ok()
    }
}

/// Samples `max_len` tokens, guided when a table is given.
pub fn generate(
    model: &HmmModel,
    dfa: &KeywordDfa,
    guidance: Option<&GuidanceTable>,
    max_len: usize,
    seed: u64,
) -> Result<Generation> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be positive".into()));
    }
    if dfa.vocab_size() != model.vocab_size() {
        return Err(Error::Dimension(format!(
            "DFA vocabulary {} differs from model vocabulary {}",
            dfa.vocab_size(),
            model.vocab_size()
        )));
    }
    if let Some(t) = guidance {
        if t.horizon() < max_len
            || t.hidden_size() != model.hidden_size()
            || t.dfa_states() != dfa.num_states()
        {
            return Err(Error::Config(format!(
                "guidance table ({} steps, {}x{}) does not cover max_len {max_len} for this model and DFA",
                t.horizon(),
                t.hidden_size(),
                t.dfa_states()
            )));
        }
    }
    let mut rng = seed::rng(seed);
    let mut belief = model.initial().to_vec();
    let mut state = KeywordDfa::START;
    let mut tokens = Vec::with_capacity(max_len);
    let mut failed = false;
    for step in 0..max_len {
        let remaining = max_len - step;
        let weights =
            next_token_weights(model, &belief, dfa, state, guidance.map(|t| (t, remaining)));
        let total: f64 = weights.iter().sum();
        let u: f64 = rng.random();
        let Some(x) = categorical(&weights, total, u) else {
            failed = true;
            break;
        };
        let x = x as u32;
        tokens.push(x);
        state = dfa.next(state, x);
        belief = advance_belief(model, &belief, x);
    }
    Ok(Generation {
        accepted: !failed && dfa.is_accepting(state),
        tokens,
        failed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SuccessRate {
    pub trials: usize,
    pub accepted: usize,
    pub failed: usize,
    pub rate: f64,
}

/// Fraction of `trials` generations accepted by the DFA. Trial `i` uses a
/// seed derived from `seed` and `i`, so guided and unguided runs with the
/// same seed are paired.
pub fn success_rate(
    model: &HmmModel,
    dfa: &KeywordDfa,
    guidance: Option<&GuidanceTable>,
    trials: usize,
    max_len: usize,
    seed: u64,
) -> Result<SuccessRate> {
    if trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let base = seed::derive(seed, Purpose::Decode);
    let outcomes = crate::par::map_range(trials, |i| {
        generate(
            model,
            dfa,
            guidance,
            max_len,
            seed::derive_indexed(base, i as u64),
        )
    });
    let (mut accepted, mut failed) = (0, 0);
    for o in outcomes {
        let o = o?;
        accepted += o.accepted as usize;
        failed += o.failed as usize;
    }
    Ok(SuccessRate {
        trials,
        accepted,
        failed,
        rate: accepted as f64 / trials as f64,
    })
}
