//! Allocation codes and the Hamming-distance deferral gate.
//!
//! An allocation code is an `L×N` bit vector with a one at `i·N + j` when LoRA
//! `j` of mixture layer `i` is selected. Inputs whose code lies at distance
//! `>= ε` from every stored edit code run on the frozen base model.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Binder, Tape};
use crate::error::{bail, Result};
use crate::io::write_atomic;
use crate::model::{TokenSequence, Transformer};
use crate::moe::{route_live, RoutingContext};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct AllocationCode {
    words: Vec<u64>,
    len: usize,
}

impl AllocationCode {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    /// Code with ones at `layer·n + j` for every selected `j` of every layer.
    pub fn from_selections(selections: &[Vec<usize>], n: usize) -> Result<Self> {
        let mut code = Self::zeros(selections.len() * n);
        for (layer, sel) in selections.iter().enumerate() {
            for &j in sel {
                if j >= n {
                    bail!(Index, "LoRA index {j} outside 0..{n}");
                }
                code.set(layer * n + j);
            }
        }
        Ok(code)
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut code = Self::zeros(bits.len());
        for (i, _) in bits.iter().enumerate().filter(|(_, b)| **b) {
            code.set(i);
        }
        code
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn set(&mut self, i: usize) {
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }

    pub fn bits(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(|i| self.get(i))
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    fn from_words(words: Vec<u64>, len: usize) -> Self {
        Self { words, len }
    }

    /// Per-layer selected indices, assuming `n` LoRAs per layer.
    pub fn selections(&self, n: usize) -> Vec<Vec<usize>> {
        (0..self.len / n)
            .map(|l| (0..n).filter(|&j| self.get(l * n + j)).collect())
            .collect()
    }

    pub fn to_bit_string(&self) -> String {
        self.bits().map(|b| if b { '1' } else { '0' }).collect()
    }
}

/// Code of a routing context's selections.
pub fn code_of<S: Scalar>(ctx: &RoutingContext<S>) -> Result<AllocationCode> {
    let Some(first) = ctx.layers.first() else {
        bail!(Contract, "routing context has no mixture layers");
    };
    let n = first.scores.len();
    if ctx.layers.iter().any(|l| l.scores.len() != n || l.selected.is_empty()) {
        bail!(Contract, "routing context is incomplete");
    }
    AllocationCode::from_selections(&ctx.selections(), n)
}

/// Number of differing positions.
pub fn hamming(a: &AllocationCode, b: &AllocationCode) -> Result<u32> {
    if a.len != b.len {
        bail!(Dimension, "code lengths {} and {} differ", a.len, b.len);
    }
    Ok(a.words.iter().zip(&b.words).map(|(x, y)| (x ^ y).count_ones()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeferralConfig {
    /// Inputs at distance `< epsilon` from some edit take the edit path.
    pub epsilon: u32,
}

impl DeferralConfig {
    /// `ε = L·k`, half the largest possible distance.
    pub fn default_for(layers: usize, top_k: usize) -> Self {
        Self {
            epsilon: (layers * top_k) as u32,
        }
    }

    pub fn validate(&self, layers: usize, top_k: usize) -> Result<()> {
        let max = 2 * layers * top_k + 1;
        if self.epsilon as usize > max {
            bail!(Config, "epsilon {} above the useful maximum {max}", self.epsilon);
        }
        Ok(())
    }
}

/// Append-only `(edit id, code)` records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditCodeStore {
    layers: usize,
    num_loras: usize,
    top_k: usize,
    entries: Vec<(u64, AllocationCode)>,
}

const STORE_MAGIC: &[u8; 8] = b"ELDRCODE";
const STORE_VERSION: u32 = 1;

impl EditCodeStore {
    pub fn new(layers: usize, num_loras: usize, top_k: usize) -> Self {
        Self {
            layers,
            num_loras,
            top_k,
            entries: Vec::new(),
        }
    }

    pub fn for_model<S: Scalar>(model: &Transformer<S>) -> Self {
        let m = &model.config.moe;
        Self::new(m.num_layers, m.num_loras, m.top_k)
    }

    pub fn code_len(&self) -> usize {
        self.layers * self.num_loras
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(u64, AllocationCode)] {
        &self.entries
    }

    pub fn validate_code(&self, code: &AllocationCode) -> Result<()> {
        if code.len() != self.code_len() {
            bail!(Dimension, "code length {} but store expects {}", code.len(), self.code_len());
        }
        for (l, sel) in code.selections(self.num_loras).iter().enumerate() {
            if sel.len() != self.top_k {
                bail!(Contract, "layer {l} of code selects {} LoRAs, expected {}", sel.len(), self.top_k);
            }
        }
        Ok(())
    }

    pub fn append(&mut self, id: u64, code: AllocationCode) -> Result<()> {
        self.validate_code(&code)?;
        if self.entries.iter().any(|(e, _)| *e == id) {
            bail!(Contract, "edit id {id} already stored");
        }
        self.entries.push((id, code));
        Ok(())
    }

    /// Smallest distance to any stored code and the first id attaining it.
    /// `None` for an empty store (every input defers).
    pub fn nearest(&self, code: &AllocationCode) -> Result<Option<(u32, u64)>> {
        let mut best: Option<(u32, u64)> = None;
        for (id, stored) in &self.entries {
            let d = hamming(stored, code)?;
            if best.is_none_or(|(bd, _)| d < bd) {
                best = Some((d, *id));
            }
        }
        Ok(best)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        for v in [self.layers, self.num_loras, self.top_k] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (id, code) in &self.entries {
            out.extend_from_slice(&id.to_le_bytes());
            for w in code.words() {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                bail!(Format, "code store truncated at byte {pos}");
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let u32_at = |pos: &mut usize| -> Result<u32> {
            Ok(u32::from_le_bytes(take(pos, 4)?.try_into().expect("4")))
        };
        let u64_at = |pos: &mut usize| -> Result<u64> {
            Ok(u64::from_le_bytes(take(pos, 8)?.try_into().expect("8")))
        };
        let mut pos = 0;
        if take(&mut pos, 8)? != STORE_MAGIC {
            bail!(Format, "not an edit code store (bad magic)");
        }
        let version = u32_at(&mut pos)?;
        if version != STORE_VERSION {
            bail!(Format, "unsupported code store version {version}");
        }
        let layers = u32_at(&mut pos)? as usize;
        let num_loras = u32_at(&mut pos)? as usize;
        let top_k = u32_at(&mut pos)? as usize;
        let count = u64_at(&mut pos)?;
        let mut store = Self::new(layers, num_loras, top_k);
        let words = store.code_len().div_ceil(64);
        for _ in 0..count {
            let id = u64_at(&mut pos)?;
            let w = (0..words).map(|_| u64_at(&mut pos)).collect::<Result<Vec<_>>>()?;
            store.append(id, AllocationCode::from_words(w, layers * num_loras))?;
        }
        if pos != bytes.len() {
            bail!(Format, "{} trailing bytes in code store", bytes.len() - pos);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// `edit_id,c0,c1,…` with one 0/1 column per code position.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_codes_csv(out, "edit_id", self.code_len(), self.entries.iter().map(|(id, c)| (id.to_string(), c)))
    }
}

/// Writes `<id_header>,c0,…` rows, one per code.
pub fn write_codes_csv<'a, W: Write>(
    out: W,
    id_header: &str,
    len: usize,
    rows: impl IntoIterator<Item = (String, &'a AllocationCode)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec![id_header.to_string()];
    header.extend((0..len).map(|i| format!("c{i}")));
    w.write_record(&header)?;
    for (id, code) in rows {
        let mut rec = vec![id];
        rec.extend(code.bits().map(|b| if b { "1".into() } else { "0".into() }));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeferralDecision {
    pub code: AllocationCode,
    /// `None` when the store is empty.
    pub distance: Option<u32>,
    pub matched: Option<u64>,
    /// True when the mixture-of-LoRA path is used.
    pub flag: bool,
}

/// Flag rule: edit path iff the nearest stored code is strictly closer than ε.
pub fn decide(store: &EditCodeStore, code: AllocationCode, cfg: DeferralConfig) -> Result<DeferralDecision> {
    let nearest = store.nearest(&code)?;
    let flag = nearest.is_some_and(|(d, _)| d < cfg.epsilon);
    Ok(DeferralDecision {
        code,
        distance: nearest.map(|(d, _)| d),
        matched: nearest.map(|(_, id)| id),
        flag,
    })
}

/// Runs the routing prefix, consults the store, then finishes the forward
/// pass with the mixture enabled or bypassed.
pub fn infer_with_deferral<S: Scalar>(
    model: &Transformer<S>,
    seq: &TokenSequence,
    store: &EditCodeStore,
    cfg: DeferralConfig,
) -> Result<(Tensor<S>, DeferralDecision)> {
    if model.mixtures().is_empty() {
        let logits = model.forward_base(seq)?;
        let decision = DeferralDecision {
            code: AllocationCode::zeros(0),
            distance: None,
            matched: None,
            flag: false,
        };
        return Ok((logits, decision));
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new(&model.params, false);
    let hidden = model.run_through(&mut tape, &mut binder, seq, model.config.query_layer())?;
    let mut live = route_live(&mut tape, &mut binder, model, hidden, seq.query_position())?;
    let decision = decide(store, code_of(&live.ctx)?, cfg)?;
    live.ctx.flag = Some(decision.flag);
    let out = model.run_suffix(&mut tape, &mut binder, hidden, Some(&live))?;
    let logits = model.head_rows(&mut tape, &mut binder, out, 0, seq.len())?;
    Ok((tape.value(logits).clone(), decision))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn code(bits: &[u8]) -> AllocationCode {
        AllocationCode::from_bits(&bits.iter().map(|&b| b == 1).collect::<Vec<_>>())
    }

    #[test]
    fn code_indexing_matches_layer_major_layout() {
        let c = AllocationCode::from_selections(&[vec![0, 1]], 4).unwrap();
        assert_eq!(c.to_bit_string(), "1100");
        let c = AllocationCode::from_selections(&[vec![3], vec![0]], 4).unwrap();
        assert_eq!(c.to_bit_string(), "00011000");
        assert_eq!(c.selections(4), vec![vec![3], vec![0]]);
    }

    #[test]
    fn hand_counted_distances() {
        assert_eq!(hamming(&code(&[1, 1, 0, 0]), &code(&[0, 1, 1, 0])).unwrap(), 2);
        assert_eq!(hamming(&code(&[1, 1, 0, 0]), &code(&[1, 1, 0, 0])).unwrap(), 0);
        assert!(hamming(&code(&[1, 1, 0, 0]), &code(&[1, 1, 0])).is_err());
    }

    #[test]
    fn disjoint_six_layer_selections_are_twenty_four_apart() {
        let a = AllocationCode::from_selections(&vec![vec![0, 1]; 6], 4).unwrap();
        let b = AllocationCode::from_selections(&vec![vec![2, 3]; 6], 4).unwrap();
        assert_eq!(hamming(&a, &b).unwrap(), 24);
    }

    #[test]
    fn nearest_prefers_first_minimizer() {
        let mut s = EditCodeStore::new(1, 4, 2);
        assert_eq!(s.nearest(&code(&[1, 1, 0, 0])).unwrap(), None);
        s.append(7, code(&[1, 1, 0, 0])).unwrap();
        assert_eq!(s.nearest(&code(&[0, 0, 1, 1])).unwrap(), Some((4, 7)));
        s.append(9, code(&[0, 1, 1, 0])).unwrap();
        s.append(3, code(&[0, 1, 0, 1])).unwrap();
        assert_eq!(s.nearest(&code(&[0, 1, 1, 0])).unwrap(), Some((0, 9)));
        assert_eq!(s.nearest(&code(&[0, 0, 1, 1])).unwrap(), Some((2, 9)));
        assert!(s.append(7, code(&[1, 0, 1, 0])).is_err());
        assert!(s.append(8, code(&[1, 1, 1, 0])).is_err());
    }

    #[test]
    fn store_round_trips_through_bytes() {
        let mut s = EditCodeStore::new(2, 4, 2);
        s.append(0, code(&[1, 1, 0, 0, 0, 0, 1, 1])).unwrap();
        s.append(5, code(&[0, 1, 1, 0, 1, 0, 0, 1])).unwrap();
        let bytes = s.encode();
        assert_eq!(EditCodeStore::decode(&bytes).unwrap(), s);
        assert!(EditCodeStore::decode(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn flag_rule_is_strict() {
        let mut s = EditCodeStore::new(1, 4, 2);
        s.append(0, code(&[1, 1, 0, 0])).unwrap();
        let near = code(&[1, 0, 1, 0]);
        assert!(!decide(&s, near.clone(), DeferralConfig { epsilon: 2 }).unwrap().flag);
        assert!(decide(&s, near.clone(), DeferralConfig { epsilon: 3 }).unwrap().flag);
        assert!(!decide(&s, near, DeferralConfig { epsilon: 0 }).unwrap().flag);
        let empty = EditCodeStore::new(1, 4, 2);
        assert!(!decide(&empty, code(&[1, 1, 0, 0]), DeferralConfig { epsilon: 99 }).unwrap().flag);
    }

    fn arb_code(layers: usize, n: usize, k: usize) -> impl Strategy<Value = AllocationCode> {
        prop::collection::vec(prop::sample::subsequence((0..n).collect::<Vec<_>>(), k), layers)
            .prop_map(move |sel| AllocationCode::from_selections(&sel, n).unwrap())
    }

    fn arb_store_and_probe() -> impl Strategy<Value = (usize, usize, usize, Vec<AllocationCode>, AllocationCode)> {
        (1usize..=4, 2usize..=70, 1usize..=3).prop_flat_map(|(l, n, k)| {
            let k = k.min(n);
            (
                Just(l),
                Just(n),
                Just(k),
                prop::collection::vec(arb_code(l, n, k), 0..12),
                arb_code(l, n, k),
            )
        })
    }

    proptest! {
        #[test]
        fn nearest_matches_a_brute_force_scan((l, n, k, codes, probe) in arb_store_and_probe()) {
            let mut store = EditCodeStore::new(l, n, k);
            for (i, c) in codes.iter().enumerate() {
                store.append(100 + i as u64, c.clone()).unwrap();
            }
            let brute = codes
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let d = probe.bits().zip(c.bits()).filter(|(a, b)| a != b).count() as u32;
                    (d, 100 + i as u64)
                })
                .min_by_key(|&(d, _)| d);
            prop_assert_eq!(store.nearest(&probe).unwrap(), brute);
        }

        #[test]
        fn csv_and_binary_forms_agree((l, n, k, codes, _probe) in arb_store_and_probe()) {
            let mut store = EditCodeStore::new(l, n, k);
            for (i, c) in codes.iter().enumerate() {
                store.append(i as u64 * 3, c.clone()).unwrap();
            }
            let decoded = EditCodeStore::decode(&store.encode()).unwrap();
            prop_assert_eq!(&decoded, &store);
            let mut buf = Vec::new();
            store.write_csv(&mut buf).unwrap();
            let mut rows = csv::Reader::from_reader(buf.as_slice());
            prop_assert_eq!(rows.headers().unwrap().len(), 1 + l * n);
            let parsed: Vec<(u64, AllocationCode)> = rows
                .records()
                .map(|r| {
                    let r = r.unwrap();
                    let bits: Vec<bool> = r.iter().skip(1).map(|b| b == "1").collect();
                    (r[0].parse().unwrap(), AllocationCode::from_bits(&bits))
                })
                .collect();
            prop_assert_eq!(parsed.as_slice(), store.entries());
        }

        #[test]
        fn codes_have_even_distances_and_fixed_weight(
            (l, n, k, codes, probe) in arb_store_and_probe()
        ) {
            prop_assert_eq!(probe.count_ones() as usize, l * k);
            prop_assert_eq!(probe.selections(n).len(), l);
            for c in &codes {
                let d = hamming(&probe, c).unwrap();
                prop_assert_eq!(d % 2, 0);
                prop_assert!(d as usize <= 2 * l * k);
            }
        }
    }

    #[test]
    fn deferred_inputs_reproduce_the_base_model() {
        use crate::model::{ModelConfig, MoeConfig, TokenSequence, Transformer};
        use rand::{Rng, SeedableRng};
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            n_layers: 3,
            d_ffn: 12,
            max_seq_len: 8,
            moe: MoeConfig {
                start_layer: 2,
                num_layers: 2,
                num_loras: 4,
                rank: 2,
                top_k: 2,
                renormalize: false,
            },
            ..ModelConfig::default()
        };
        let mut model = Transformer::<f64>::new(cfg).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for p in model.params.iter_mut().filter(|p| crate::model::is_edit_param(&p.name)) {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let seq = TokenSequence::prompt(vec![1, 5, 9]).unwrap();
        let mut store = EditCodeStore::for_model(&model);
        let base = model.forward_base(&seq).unwrap();

        let (logits, d) = infer_with_deferral(&model, &seq, &store, DeferralConfig::default_for(2, 2)).unwrap();
        assert!(!d.flag && d.distance.is_none());
        assert!(logits.bit_identical(&base));

        store.append(0, d.code.clone()).unwrap();
        let (logits, d) = infer_with_deferral(&model, &seq, &store, DeferralConfig::default_for(2, 2)).unwrap();
        assert_eq!((d.flag, d.distance, d.matched), (true, Some(0), Some(0)));
        assert!(logits.max_abs_diff(&base) > 1e-6);
        assert!(logits.bit_identical(&model.forward_one(&seq, None).unwrap()));

        // ε = 0 defers everything, even exact matches.
        let (logits, d) = infer_with_deferral(&model, &seq, &store, DeferralConfig { epsilon: 0 }).unwrap();
        assert!(!d.flag);
        assert!(logits.bit_identical(&base));
    }

    #[test]
    fn thousand_codes_hundred_queries_against_pairwise_recount() {
        use rand::seq::index::sample;
        use rand::SeedableRng;
        let (l, n, k) = (6, 4, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let random = |rng: &mut rand_chacha::ChaCha8Rng| {
            let sel: Vec<Vec<usize>> = (0..l).map(|_| sample(rng, n, k).into_vec()).collect();
            AllocationCode::from_selections(&sel, n).unwrap()
        };
        let mut store = EditCodeStore::new(l, n, k);
        let stored: Vec<AllocationCode> = (0..1000).map(|_| random(&mut rng)).collect();
        for (i, c) in stored.iter().enumerate() {
            store.append(i as u64, c.clone()).unwrap();
        }
        for _ in 0..100 {
            let q = random(&mut rng);
            let mut best = (u32::MAX, 0);
            for (i, c) in stored.iter().enumerate() {
                let d = (0..q.len()).filter(|&j| q.get(j) != c.get(j)).count() as u32;
                if d < best.0 {
                    best = (d, i as u64);
                }
            }
            assert_eq!(store.nearest(&q).unwrap(), Some(best));
        }
    }

    #[test]
    fn code_rebuilt_from_the_score_dump_matches() {
        use crate::model::{ModelConfig, MoeConfig, TokenSequence, Transformer};
        use crate::moe::{route_sequence, write_score_dump};
        let cfg = ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_heads: 2,
            n_layers: 4,
            d_ffn: 12,
            max_seq_len: 8,
            moe: MoeConfig {
                start_layer: 2,
                num_layers: 3,
                num_loras: 5,
                rank: 2,
                top_k: 2,
                renormalize: false,
            },
            seed: 3,
            ..ModelConfig::default()
        };
        let model = Transformer::<f64>::new(cfg).unwrap();
        for ids in [vec![1, 2, 3], vec![7], vec![4, 4, 9, 12]] {
            let ctx = route_sequence(&model, &TokenSequence::prompt(ids).unwrap()).unwrap();
            let mut buf = Vec::new();
            write_score_dump(&mut buf, [(0u64, &ctx)]).unwrap();
            let mut bits = Vec::new();
            for rec in csv::Reader::from_reader(buf.as_slice()).records() {
                bits.push(&rec.unwrap()[4] == "1");
            }
            assert_eq!(AllocationCode::from_bits(&bits), code_of(&ctx).unwrap());
        }
    }
}
