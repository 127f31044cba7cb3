use std::collections::HashMap;

use super::{BackendError, Context, DistributionBackend};
use crate::dist::{Distribution, Vocabulary};

/// FNV-1a over the token sequence, with a separator byte between tokens.
pub fn fingerprint(tokens: &[String]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tokens {
        for b in t.bytes().chain(std::iter::once(0xff)) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScriptKey {
    /// Number of tokens generated so far.
    Step(usize),
    /// Fingerprint of the generated tokens alone.
    Generated(u64),
    /// Fingerprint of prompt plus generated tokens.
    Context(u64),
}

/// Table-driven backend for exercising the decoder.
///
/// A query is matched against full-context rules first, then generated-only
/// rules, then step rules. Each rule holds one entry per visit; later visits
/// repeat the last entry. Registering a key twice keeps the later rule.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    vocab: Vocabulary,
    rules: HashMap<ScriptKey, Vec<Distribution>>,
    visits: HashMap<ScriptKey, usize>,
    fallback: Option<Distribution>,
}

impl ScriptedBackend {
    pub fn new(vocab: Vocabulary) -> Self {
        ScriptedBackend { vocab, rules: HashMap::new(), visits: HashMap::new(), fallback: None }
    }

    pub fn with_fallback(mut self, dist: Distribution) -> Self {
        self.fallback = Some(dist);
        self
    }

    pub fn rule(mut self, key: ScriptKey, visits: Vec<Distribution>) -> Self {
        assert!(!visits.is_empty(), "a rule needs at least one distribution");
        self.rules.insert(key, visits);
        self
    }

    pub fn at_step(self, step: usize, visits: Vec<Distribution>) -> Self {
        self.rule(ScriptKey::Step(step), visits)
    }

    pub fn after<S: AsRef<str>>(self, generated: &[S], visits: Vec<Distribution>) -> Self {
        let tokens: Vec<String> = generated.iter().map(|s| s.as_ref().to_string()).collect();
        self.rule(ScriptKey::Generated(fingerprint(&tokens)), visits)
    }

    pub fn on_context<S: AsRef<str>>(self, context: &[S], visits: Vec<Distribution>) -> Self {
        let tokens: Vec<String> = context.iter().map(|s| s.as_ref().to_string()).collect();
        self.rule(ScriptKey::Context(fingerprint(&tokens)), visits)
    }

    /// Times `key` has been served.
    pub fn visit_count(&self, key: ScriptKey) -> usize {
        self.visits.get(&key).copied().unwrap_or(0)
    }

    pub fn reset_visits(&mut self) {
        self.visits.clear();
    }
}

impl DistributionBackend for ScriptedBackend {
    fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    fn next_distribution(&mut self, context: Context<'_>) -> Result<Distribution, BackendError> {
        let candidates = [
            ScriptKey::Context(fingerprint(&context.tokens())),
            ScriptKey::Generated(fingerprint(context.generated)),
            ScriptKey::Step(context.generated.len()),
        ];
        for key in candidates {
            if let Some(entries) = self.rules.get(&key) {
                let visit = self.visits.entry(key).or_insert(0);
                let dist = entries[(*visit).min(entries.len() - 1)].clone();
                *visit += 1;
                return Ok(dist);
            }
        }
        self.fallback.clone().ok_or(BackendError::NoRuleAndNoFallback { step: context.generated.len() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::named_distribution;

    fn ctx<'a>(prompt: &'a [String], generated: &'a [String]) -> Context<'a> {
        Context { prompt, generated }
    }

    #[test]
    fn step_lookup_and_visits() {
        let v = Vocabulary::new(["dog", "cat"]);
        let scripted: Vec<Distribution> = (0..5).map(|i| Distribution::point_mass(v.len(), i)).collect();
        let mut b = ScriptedBackend::new(v.clone());
        for (i, d) in scripted.iter().enumerate() {
            b = b.at_step(i, vec![d.clone()]);
        }
        let gen: Vec<String> = vec!["a".into(); 3];
        assert_eq!(b.next_distribution(ctx(&[], &gen)).unwrap(), scripted[3]);

        let first = named_distribution(&v, &[("dog", 0.9)]).unwrap();
        let second = named_distribution(&v, &[("cat", 0.9)]).unwrap();
        let mut b = ScriptedBackend::new(v.clone()).after(&["x"], vec![first.clone(), second.clone()]);
        let g = vec!["x".to_string()];
        assert_eq!(b.next_distribution(ctx(&[], &g)).unwrap(), first);
        assert_eq!(b.next_distribution(ctx(&[], &g)).unwrap(), second);
        assert_eq!(b.next_distribution(ctx(&[], &g)).unwrap(), second);
        assert_eq!(b.visit_count(ScriptKey::Generated(fingerprint(&g))), 3);
    }

    #[test]
    fn fallback_and_missing_rule() {
        let v = Vocabulary::new(["dog"]);
        let mut b = ScriptedBackend::new(v.clone());
        assert!(matches!(b.next_distribution(ctx(&[], &[])), Err(BackendError::NoRuleAndNoFallback { step: 0 })));
        let mut b = b.with_fallback(Distribution::uniform(v.len()));
        assert_eq!(b.next_distribution(ctx(&[], &[])).unwrap(), Distribution::uniform(v.len()));
    }

    #[test]
    fn context_rules_take_precedence_and_last_writer_wins() {
        let v = Vocabulary::new(["dog"]);
        let p: Vec<String> = vec!["q".into()];
        let d0 = Distribution::point_mass(v.len(), 0);
        let d1 = Distribution::point_mass(v.len(), 1);
        let d2 = Distribution::point_mass(v.len(), 2);
        let mut b = ScriptedBackend::new(v)
            .at_step(0, vec![d0.clone()])
            .on_context(&["q"], vec![d1])
            .on_context(&["q"], vec![d2.clone()]);
        assert_eq!(b.next_distribution(ctx(&p, &[])).unwrap(), d2);
        assert_eq!(b.next_distribution(ctx(&[], &[])).unwrap(), d0);
    }

    #[test]
    fn fingerprint_separates_token_boundaries() {
        let a: Vec<String> = vec!["ab".into(), "c".into()];
        let b: Vec<String> = vec!["a".into(), "bc".into()];
        assert_ne!(fingerprint(&a), fingerprint(&b));
    }
}
