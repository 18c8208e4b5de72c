use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::attn::TokenStats;
use crate::memstore::{HeadKey, KvStore, PageClass, PageId, StoredToken};
use crate::policy::{generation_step, GenerationDecision, PolicyParams, Scored, Section, TokenClass, VictimAction};
use crate::quant::{dequantize, quantize, PrecisionPair};

use super::attention::{CachedToken, Origin, TokenView};
use super::EngineError;

/// Uncompressed token in the recent window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowToken {
    pub position: usize,
    pub key: Vec<f64>,
    pub value: Vec<f64>,
}

/// Physical location of a stored token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub page: PageId,
    pub slot: usize,
    pub section: Section,
}

/// Placement counts of tokens that have left the window.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub high: u64,
    pub low: u64,
    pub pruned: u64,
}

impl ClassCounts {
    pub fn total(&self) -> u64 {
        self.high + self.low + self.pruned
    }

    pub fn add(&mut self, other: &ClassCounts) {
        self.high += other.high;
        self.low += other.low;
        self.pruned += other.pruned;
    }
}

/// What one head will do in the next step, decided before any page moves.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPlan {
    pub decision: Option<GenerationDecision>,
    pub need: Option<PageClass>,
}

/// Compressed cache of one KV head.
/// Position, key and value of a token as decoded from its page.
pub(super) type DecodedToken = (usize, Vec<f64>, Vec<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct HeadCacheState {
    pub(super) key: HeadKey,
    pub(super) window: VecDeque<WindowToken>,
    pub(super) stats: BTreeMap<usize, TokenStats>,
    pub(super) slots: BTreeMap<usize, Slot>,
    /// Page contents as read back after each write, keyed by (page, slot).
    pub(super) decoded: BTreeMap<(PageId, usize), DecodedToken>,
    pub(super) produced: usize,
    pub(super) pruned: usize,
}

fn section_class(s: Section) -> PageClass {
    match s {
        Section::High => PageClass::High,
        Section::Low => PageClass::Low,
    }
}

impl HeadCacheState {
    pub(super) fn new(key: HeadKey) -> Self {
        Self {
            key,
            window: VecDeque::new(),
            stats: BTreeMap::new(),
            slots: BTreeMap::new(),
            decoded: BTreeMap::new(),
            produced: 0,
            pruned: 0,
        }
    }

    pub fn key(&self) -> HeadKey {
        self.key
    }

    pub fn produced(&self) -> usize {
        self.produced
    }

    pub fn pruned(&self) -> usize {
        self.pruned
    }

    pub fn window(&self) -> impl Iterator<Item = &WindowToken> {
        self.window.iter()
    }

    pub fn window_len(&self) -> usize {
        self.window.len()
    }

    pub fn stats(&self) -> &BTreeMap<usize, TokenStats> {
        &self.stats
    }

    pub fn slot_of(&self, position: usize) -> Option<Slot> {
        self.slots.get(&position).copied()
    }

    /// Positions of stored tokens in one section, ascending.
    pub fn section_positions(&self, section: Section) -> Vec<usize> {
        self.slots.iter().filter(|(_, s)| s.section == section).map(|(&p, _)| p).collect()
    }

    pub fn counts(&self) -> ClassCounts {
        let high = self.slots.values().filter(|s| s.section == Section::High).count() as u64;
        ClassCounts { high, low: self.slots.len() as u64 - high, pruned: self.pruned as u64 }
    }

    /// Window positions plus positions held in pages, ascending.
    pub fn live_positions(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.slots.keys().copied().chain(self.window.iter().map(|w| w.position)).collect();
        v.sort_unstable();
        v
    }

    fn scored(&self, section: Section) -> Vec<Scored> {
        self.slots
            .iter()
            .filter(|(_, s)| s.section == section)
            .map(|(&position, _)| Scored {
                position,
                significance: self.stats.get(&position).and_then(|s| s.significance()).unwrap_or(0.0),
            })
            .collect()
    }

    fn has_free_slot(&self, store: &KvStore, section: Section) -> bool {
        self.free_slot(store, section).is_some()
    }

    fn free_slot(&self, store: &KvStore, section: Section) -> Option<(PageId, usize)> {
        let t = store.tables(&self.key)?;
        let pages: Vec<PageId> = match section {
            Section::High => t.bidir.high_pages().collect(),
            Section::Low => t.bidir.low_pages().collect(),
        };
        pages.into_iter().find_map(|p| store.page(p).first_free_slot().map(|s| (p, s)))
    }

    /// Decides the next step without touching anything.
    pub(super) fn plan_step(&self, store: &KvStore, params: &PolicyParams) -> Result<StepPlan, EngineError> {
        let n = self.produced + 1;
        if self.window.len() < params.window {
            let cap = store.tables(&self.key).map_or(0, |t| t.window.len()) * store.tokens_per_page(PageClass::Window);
            let need = (self.window.len() + 1 > cap).then_some(PageClass::Window);
            return Ok(StepPlan { decision: None, need });
        }
        let cand = self.window.front().expect("window is full").position;
        let stats = self.stats[&cand];
        let d = generation_step(&stats, &self.scored(Section::High), &self.scored(Section::Low), n, params)?;
        let e = Effects::of(&d);
        // A section needs a page only when it gains a token without losing one.
        let need = [Section::High, Section::Low]
            .into_iter()
            .find(|&s| e.inserts(s) > e.removes(s) && !self.has_free_slot(store, s))
            .map(section_class);
        Ok(StepPlan { decision: Some(d), need })
    }

    pub(super) fn push_window(&mut self, position: usize, key: Vec<f64>, value: Vec<f64>) {
        self.window.push_back(WindowToken { position, key, value });
        self.stats.insert(position, TokenStats::new(position));
    }

    /// Quantizes and stores a token into the first free slot of `section`.
    pub(super) fn store_token(
        &mut self,
        store: &mut KvStore,
        section: Section,
        pair: PrecisionPair,
        position: usize,
        key: &[f64],
        value: &[f64],
    ) -> Result<(), EngineError> {
        let (page, slot) = self
            .free_slot(store, section)
            .ok_or_else(|| EngineError::InvalidState(format!("no free {section:?} slot for {:?}", self.key)))?;
        let sig = self.stats.get(&position).and_then(|s| s.significance()).unwrap_or(0.0);
        let token = StoredToken {
            key: quantize(key, pair.key)?,
            value: quantize(value, pair.value)?,
            score: sig as f32,
            position: position as u32,
        };
        store.write_token(&self.key, page, slot, &token)?;
        let back = store.read_token(page, slot)?;
        self.decoded.insert((page, slot), (position, dequantize(&back.key), dequantize(&back.value)));
        self.slots.insert(position, Slot { page, slot, section });
        Ok(())
    }

    /// Removes a stored token, returning its decoded key and value.
    fn take_stored(&mut self, store: &mut KvStore, position: usize) -> Result<(Vec<f64>, Vec<f64>), EngineError> {
        let s = self
            .slots
            .remove(&position)
            .ok_or_else(|| EngineError::InvalidState(format!("position {position} is not stored")))?;
        store.clear_slot(&self.key, s.page, s.slot)?;
        let (_, k, v) = self.decoded.remove(&(s.page, s.slot)).expect("decoded alongside the slot");
        Ok((k, v))
    }

    fn prune(&mut self, position: usize) {
        self.stats.remove(&position);
        self.pruned += 1;
    }

    /// Applies a planned step: the new token enters the window and, if the
    /// window overflowed, the decision moves the candidate and the victim.
    pub(super) fn apply_step(
        &mut self,
        store: &mut KvStore,
        params: &PolicyParams,
        plan: &StepPlan,
        key: Vec<f64>,
        value: Vec<f64>,
    ) -> Result<(), EngineError> {
        let position = self.produced;
        self.push_window(position, key, value);
        self.produced += 1;
        let Some(d) = plan.decision else { return Ok(()) };
        let cand = self.window.pop_front().expect("window overflowed");
        debug_assert_eq!(cand.position, d.candidate);
        let e = Effects::of(&d);
        if let Some((v, action)) = e.victim {
            let (k, val) = self.take_stored(store, v)?;
            match action {
                VictimAction::Downgrade => {
                    self.store_token(store, Section::Low, params.low, v, &k, &val)?;
                }
                VictimAction::Prune => self.prune(v),
                VictimAction::Retain => unreachable!("retained victims have no effect"),
            }
        }
        match e.candidate {
            TokenClass::High => {
                self.store_token(store, Section::High, params.high, cand.position, &cand.key, &cand.value)?
            }
            TokenClass::Low => {
                self.store_token(store, Section::Low, params.low, cand.position, &cand.key, &cand.value)?
            }
            TokenClass::Pruned => self.prune(cand.position),
        }
        Ok(())
    }

    /// Live tokens in kernel order: high pages, low pages, then the window.
    pub fn cached_tokens<'a>(&'a self, store: &KvStore) -> Vec<TokenView<'a>> {
        let mut out = Vec::with_capacity(self.slots.len() + self.window.len());
        if let Some(t) = store.tables(&self.key) {
            for (pages, origin) in
                [(t.bidir.high_pages().collect::<Vec<_>>(), Origin::High), (t.bidir.low_pages().collect(), Origin::Low)]
            {
                for p in pages {
                    for s in store.page(p).occupied_slots() {
                        let (position, k, v) = &self.decoded[&(p, s)];
                        out.push(TokenView { position: *position, key: k, value: v, origin });
                    }
                }
            }
        }
        out.extend(self.window.iter().map(|w| TokenView {
            position: w.position,
            key: &w.key,
            value: &w.value,
            origin: Origin::Window,
        }));
        out
    }

    /// Same as [`cached_tokens`](Self::cached_tokens) but decoded from the page bytes.
    pub fn read_tokens(&self, store: &KvStore) -> Result<Vec<CachedToken>, EngineError> {
        let mut out = Vec::new();
        if let Some(t) = store.tables(&self.key) {
            for (pages, origin) in
                [(t.bidir.high_pages().collect::<Vec<_>>(), Origin::High), (t.bidir.low_pages().collect(), Origin::Low)]
            {
                for p in pages {
                    for s in store.page(p).occupied_slots() {
                        let tok = store.read_token(p, s)?;
                        out.push(CachedToken {
                            position: tok.position as usize,
                            key: dequantize(&tok.key),
                            value: dequantize(&tok.value),
                            origin,
                        });
                    }
                }
            }
        }
        out.extend(self.window.iter().map(|w| CachedToken {
            position: w.position,
            key: w.key.clone(),
            value: w.value.clone(),
            origin: Origin::Window,
        }));
        Ok(out)
    }

    /// Mirrors current significance into the page score segments.
    pub(super) fn sync_scores(&self, store: &mut KvStore) -> Result<(), EngineError> {
        for (p, s) in &self.slots {
            let sig = self.stats.get(p).and_then(|st| st.significance()).unwrap_or(0.0);
            store.set_score(&self.key, s.page, s.slot, sig as f32)?;
        }
        Ok(())
    }
}

/// Net effect of a decision once the candidate-is-victim cases are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Effects {
    /// Final class of the candidate.
    pub candidate: TokenClass,
    /// A previously stored victim that is downgraded or pruned.
    pub victim: Option<(usize, VictimAction)>,
}

impl Effects {
    pub fn of(d: &GenerationDecision) -> Self {
        let mut candidate = d.placement;
        let mut victim = None;
        if let Some(v) = d.victim {
            if v.position == d.candidate {
                candidate = match v.action {
                    VictimAction::Retain => candidate,
                    VictimAction::Downgrade => TokenClass::Low,
                    VictimAction::Prune => TokenClass::Pruned,
                };
            } else if v.action != VictimAction::Retain {
                victim = Some((v.position, v.action));
            }
        }
        Self { candidate, victim }
    }

    fn inserts(&self, s: Section) -> usize {
        let cand = matches!((self.candidate, s), (TokenClass::High, Section::High) | (TokenClass::Low, Section::Low));
        let down = s == Section::Low && matches!(self.victim, Some((_, VictimAction::Downgrade)));
        cand as usize + down as usize
    }

    /// Victims always leave the section the candidate was placed in.
    fn removes(&self, s: Section) -> usize {
        let from = match self.candidate {
            TokenClass::High => Section::High,
            _ => Section::Low,
        };
        (self.victim.is_some() && from == s) as usize
    }
}
