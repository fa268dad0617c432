//! Synthetic two-hop task families with controlled complexity.
//!
//! A family instance is parameterized by `(N, C)`: `N` subjects and objects,
//! `C` relation slices, `C*N` bridge entities. The first hop maps
//! `(subject i, relation j)` to bridge `(j-1)*N + i`; the single second-hop
//! relation collapses the bridge index modulo `N` onto the objects. Training
//! data holds the one-hop rows (plus zero-hop identity rows when enabled);
//! every composed two-hop query is out-of-distribution by construction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TaskGenError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("index out of range: {name}={value} not in 1..={max}")]
    IndexOutOfRange {
        name: &'static str,
        value: usize,
        max: usize,
    },
}

/// Parameters of one family instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Number of subjects and objects (`|E1| = |E3| = N`).
    pub n_entities: usize,
    /// Complexity parameter `C` (`|E2| = C*N`, `|R1| = C`).
    pub complexity: usize,
    /// Include zero-hop identity rows `(b) -> b` over bridge entities.
    pub include_identity: bool,
    /// Move a seeded subset of two-hop rows into the training split.
    #[serde(default)]
    pub include_two_hop_in_train: bool,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn new(n_entities: usize, complexity: usize, include_identity: bool, seed: u64) -> Self {
        Self {
            n_entities,
            complexity,
            include_identity,
            include_two_hop_in_train: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TaskGenError> {
        if self.n_entities < 2 {
            return Err(TaskGenError::InvalidSpec(format!(
                "need at least 2 entities per group, got N={}",
                self.n_entities
            )));
        }
        if self.complexity < 1 {
            return Err(TaskGenError::InvalidSpec("complexity must be >= 1".into()));
        }
        Ok(())
    }
}

/// Deterministic token-id assignment for one family instance.
///
/// Ids are contiguous: subjects, then bridge slices in order, then objects,
/// then first-hop relations, then the single second-hop relation. `in_vocab`
/// and `out_vocab` are the Emb-MLP input/output vocabulary views (inputs
/// never contain objects, outputs never contain subjects or relations).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabLayout {
    pub subjects: Vec<u32>,
    pub bridges: Vec<u32>,
    pub objects: Vec<u32>,
    pub rel1: Vec<u32>,
    pub rel2: Vec<u32>,
    pub in_vocab: Vec<u32>,
    pub out_vocab: Vec<u32>,
}

impl VocabLayout {
    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn c(&self) -> usize {
        self.rel1.len()
    }

    /// Total number of distinct tokens (full transformer vocabulary).
    pub fn full_vocab_size(&self) -> usize {
        self.subjects.len() + self.bridges.len() + self.objects.len() + self.rel1.len() + 1
    }

    /// Bridge slice for relation `j` (1-based), size `N`.
    pub fn bridge_slice(&self, j: usize) -> &[u32] {
        let n = self.n();
        &self.bridges[(j - 1) * n..j * n]
    }

    /// Position of `token` in `in_vocab`, if present.
    pub fn in_index(&self, token: u32) -> Option<usize> {
        self.in_vocab.iter().position(|&t| t == token)
    }

    /// Position of `token` in `out_vocab`, if present.
    pub fn out_index(&self, token: u32) -> Option<usize> {
        self.out_vocab.iter().position(|&t| t == token)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExampleKind {
    ZeroHop,
    OneHopFirst,
    OneHopSecond,
    TwoHop,
}

/// One training or test row: an input token sequence and a single target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub target: u32,
    pub kind: ExampleKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub layout: VocabLayout,
    pub train: Vec<Example>,
    pub test_ood: Vec<Example>,
}

/// Assign token ids for a spec. Deterministic: equal specs give equal layouts.
pub fn build_layout(spec: &DatasetSpec) -> Result<VocabLayout, TaskGenError> {
    spec.validate()?;
    let n = spec.n_entities as u32;
    let c = spec.complexity as u32;
    let subjects: Vec<u32> = (0..n).collect();
    let bridges: Vec<u32> = (n..n + c * n).collect();
    let objects: Vec<u32> = (n + c * n..2 * n + c * n).collect();
    let rel1: Vec<u32> = (2 * n + c * n..2 * n + c * n + c).collect();
    let rel2: Vec<u32> = vec![2 * n + c * n + c];

    let mut in_vocab = Vec::with_capacity((2 * n + c * n + c + 1) as usize);
    in_vocab.extend_from_slice(&subjects);
    in_vocab.extend_from_slice(&bridges);
    in_vocab.extend_from_slice(&rel1);
    in_vocab.extend_from_slice(&rel2);
    let mut out_vocab = Vec::with_capacity((c * n + n) as usize);
    out_vocab.extend_from_slice(&bridges);
    out_vocab.extend_from_slice(&objects);

    Ok(VocabLayout {
        subjects,
        bridges,
        objects,
        rel1,
        rel2,
        in_vocab,
        out_vocab,
    })
}

/// First-hop map on 1-based indices: `(i, j) -> (j-1)*N + i`.
pub fn g1(i: usize, j: usize, spec: &DatasetSpec) -> Result<usize, TaskGenError> {
    let n = spec.n_entities;
    let c = spec.complexity;
    if i < 1 || i > n {
        return Err(TaskGenError::IndexOutOfRange {
            name: "subject",
            value: i,
            max: n,
        });
    }
    if j < 1 || j > c {
        return Err(TaskGenError::IndexOutOfRange {
            name: "relation",
            value: j,
            max: c,
        });
    }
    Ok((j - 1) * n + i)
}

/// Second-hop map on 1-based bridge index `k = (j-1)*N + i`:
/// collapses modulo `N`, returning object `((i + j - 2) mod N) + 1`.
pub fn g2(k: usize, spec: &DatasetSpec) -> Result<usize, TaskGenError> {
    let n = spec.n_entities;
    let c = spec.complexity;
    if k < 1 || k > c * n {
        return Err(TaskGenError::IndexOutOfRange {
            name: "bridge",
            value: k,
            max: c * n,
        });
    }
    let j = (k - 1) / n + 1;
    let i = (k - 1) % n + 1;
    Ok((i + j - 2) % n + 1)
}

/// All `C*N` composed two-hop queries, in `(j, i)` order.
fn two_hop_examples(spec: &DatasetSpec, layout: &VocabLayout) -> Vec<Example> {
    let n = spec.n_entities;
    let c = spec.complexity;
    let mut out = Vec::with_capacity(c * n);
    for j in 1..=c {
        for i in 1..=n {
            let k = g1(i, j, spec).expect("indices in range");
            let obj = g2(k, spec).expect("bridge in range");
            out.push(Example {
                tokens: vec![
                    layout.subjects[i - 1],
                    layout.rel1[j - 1],
                    layout.rel2[0],
                ],
                target: layout.objects[obj - 1],
                kind: ExampleKind::TwoHop,
            });
        }
    }
    out
}

/// Latent bridge token of a two-hop query.
fn latent_bridge(ex: &Example, spec: &DatasetSpec, layout: &VocabLayout) -> u32 {
    let i = layout
        .subjects
        .iter()
        .position(|&t| t == ex.tokens[0])
        .expect("two-hop query starts with a subject")
        + 1;
    let j = layout
        .rel1
        .iter()
        .position(|&t| t == ex.tokens[1])
        .expect("two-hop query has a first-hop relation")
        + 1;
    let k = g1(i, j, spec).expect("indices in range");
    layout.bridges[k - 1]
}

/// Build the train/OOD-test splits for a spec.
///
/// Train holds all one-hop rows, the zero-hop identity rows when
/// `include_identity` is set, and (when `include_two_hop_in_train` is set)
/// the two-hop rows of a seeded half of the bridge entities. The test split
/// holds every two-hop query whose latent bridge has no two-hop row in train.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset, TaskGenError> {
    let layout = build_layout(spec)?;
    let n = spec.n_entities;
    let c = spec.complexity;

    let mut train = Vec::new();
    for j in 1..=c {
        for i in 1..=n {
            let k = g1(i, j, spec)?;
            train.push(Example {
                tokens: vec![layout.subjects[i - 1], layout.rel1[j - 1]],
                target: layout.bridges[k - 1],
                kind: ExampleKind::OneHopFirst,
            });
        }
    }
    for k in 1..=c * n {
        let obj = g2(k, spec)?;
        train.push(Example {
            tokens: vec![layout.bridges[k - 1], layout.rel2[0]],
            target: layout.objects[obj - 1],
            kind: ExampleKind::OneHopSecond,
        });
    }
    if spec.include_identity {
        for k in 1..=c * n {
            train.push(Example {
                tokens: vec![layout.bridges[k - 1]],
                target: layout.bridges[k - 1],
                kind: ExampleKind::ZeroHop,
            });
        }
    }

    let all_two_hop = two_hop_examples(spec, &layout);
    let mut test_ood = Vec::new();
    if spec.include_two_hop_in_train {
        // Bridge-level split: sample half the bridges into train; queries
        // over the remaining bridges stay OOD.
        let mut bridge_ids: Vec<u32> = layout.bridges.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        bridge_ids.shuffle(&mut rng);
        let in_train: BTreeSet<u32> = bridge_ids[..c * n / 2].iter().copied().collect();
        for ex in all_two_hop {
            if in_train.contains(&latent_bridge(&ex, spec, &layout)) {
                train.push(ex);
            } else {
                test_ood.push(ex);
            }
        }
    } else {
        test_ood = all_two_hop;
    }

    Ok(Dataset {
        spec: spec.clone(),
        layout,
        train,
        test_ood,
    })
}

/// Dataset complexity: the maximum, over subjects, of the number of distinct
/// objects reachable by composing the one-hop rows present in `train`.
pub fn complexity_of(dataset: &Dataset) -> usize {
    // subject -> set of bridges, from OneHopFirst rows
    let mut first: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    // bridge -> set of objects, from OneHopSecond rows
    let mut second: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for ex in &dataset.train {
        match ex.kind {
            ExampleKind::OneHopFirst => {
                first.entry(ex.tokens[0]).or_default().insert(ex.target);
            }
            ExampleKind::OneHopSecond => {
                second.entry(ex.tokens[0]).or_default().insert(ex.target);
            }
            _ => {}
        }
    }
    let mut best = 0;
    for bridges in first.values() {
        let mut objects = BTreeSet::new();
        for b in bridges {
            if let Some(objs) = second.get(b) {
                objects.extend(objs.iter().copied());
            }
        }
        best = best.max(objects.len());
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(n: usize, c: usize, identity: bool) -> DatasetSpec {
        DatasetSpec::new(n, c, identity, 7)
    }

    #[test]
    fn layout_sizes_small() {
        let layout = build_layout(&spec(2, 1, true)).unwrap();
        assert_eq!(layout.in_vocab.len(), 6);
        assert_eq!(layout.out_vocab.len(), 4);
    }

    #[test]
    fn layout_slices() {
        let layout = build_layout(&spec(3, 2, true)).unwrap();
        assert_eq!(layout.bridges.len(), 6);
        assert_eq!(layout.rel1.len(), 2);
        assert_eq!(layout.bridge_slice(1), &layout.bridges[0..3]);
        assert_eq!(layout.bridge_slice(2), &layout.bridges[3..6]);
    }

    #[test]
    fn layout_rejects_degenerate() {
        assert!(matches!(
            build_layout(&spec(1, 1, true)),
            Err(TaskGenError::InvalidSpec(_))
        ));
        assert!(matches!(
            build_layout(&spec(4, 0, true)),
            Err(TaskGenError::InvalidSpec(_))
        ));
    }

    #[test]
    fn layout_groups_disjoint_and_contiguous() {
        let layout = build_layout(&spec(5, 3, true)).unwrap();
        let mut all: Vec<u32> = Vec::new();
        all.extend(&layout.subjects);
        all.extend(&layout.bridges);
        all.extend(&layout.objects);
        all.extend(&layout.rel1);
        all.extend(&layout.rel2);
        let expect: Vec<u32> = (0..all.len() as u32).collect();
        assert_eq!(all, expect);
    }

    #[test]
    fn g1_examples() {
        let s = spec(3, 2, true);
        assert_eq!(g1(2, 2, &s).unwrap(), 5);
        assert_eq!(g1(1, 1, &s).unwrap(), 1);
        assert_eq!(g1(3, 2, &s).unwrap(), 6);
        assert!(g1(4, 1, &s).is_err());
        assert!(g1(1, 3, &s).is_err());
    }

    #[test]
    fn g2_examples() {
        let s = spec(3, 2, true);
        // k=5 is (i=2, j=2) -> ((2+2-2) mod 3)+1 = 3
        assert_eq!(g2(5, &s).unwrap(), 3);
        // j=1 slice is the identity pairing
        let s1 = spec(7, 1, true);
        for i in 1..=7 {
            assert_eq!(g2(i, &s1).unwrap(), i);
        }
        // (i=N, j=1) -> N
        assert_eq!(g2(3, &spec(3, 2, true)).unwrap(), 3);
        assert!(g2(0, &s).is_err());
        assert!(g2(7, &s).is_err());
    }

    #[test]
    fn generate_counts() {
        let d = generate(&spec(20, 1, true)).unwrap();
        assert_eq!(d.train.len(), 60);
        assert_eq!(d.test_ood.len(), 20);

        let d = generate(&spec(20, 1, false)).unwrap();
        assert_eq!(d.train.len(), 40);

        let d = generate(&spec(5, 3, true)).unwrap();
        assert_eq!(d.test_ood.len(), 15);
    }

    #[test]
    fn one_hop_pairs_unique() {
        let d = generate(&spec(6, 3, true)).unwrap();
        let mut first = BTreeSet::new();
        let mut second = BTreeSet::new();
        for ex in &d.train {
            match ex.kind {
                ExampleKind::OneHopFirst => {
                    assert!(first.insert(ex.tokens.clone()));
                }
                ExampleKind::OneHopSecond => {
                    assert!(second.insert(ex.tokens.clone()));
                }
                _ => {}
            }
        }
        assert_eq!(first.len(), 18);
        assert_eq!(second.len(), 18);
    }

    #[test]
    fn complexity_matches_parameter() {
        for n in [2, 4, 9, 16] {
            for c in 1..=8.min(n) {
                let d = generate(&spec(n, c, true)).unwrap();
                assert_eq!(complexity_of(&d), c, "N={n} C={c}");
            }
        }
    }

    #[test]
    fn complexity_of_empty_closure() {
        let mut d = generate(&spec(4, 1, true)).unwrap();
        d.train.retain(|e| e.kind != ExampleKind::OneHopSecond);
        assert_eq!(complexity_of(&d), 0);
    }

    #[test]
    fn ood_purity_with_two_hop_in_train() {
        let mut s = spec(8, 2, true);
        s.include_two_hop_in_train = true;
        let d = generate(&s).unwrap();
        let train_bridges: BTreeSet<u32> = d
            .train
            .iter()
            .filter(|e| e.kind == ExampleKind::TwoHop)
            .map(|e| latent_bridge(e, &d.spec, &d.layout))
            .collect();
        assert!(!train_bridges.is_empty());
        for ex in &d.test_ood {
            let b = latent_bridge(ex, &d.spec, &d.layout);
            assert!(!train_bridges.contains(&b));
        }
    }

    #[test]
    fn determinism_byte_identical() {
        let s = spec(9, 3, true);
        let a = serde_json::to_vec(&generate(&s).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate(&s).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn g1_bijective_and_composition_bijective(n in 2usize..=16, c in 1usize..=8) {
            let s = spec(n, c, true);
            let mut seen = BTreeSet::new();
            for j in 1..=c {
                let mut objects = BTreeSet::new();
                for i in 1..=n {
                    let k = g1(i, j, &s).unwrap();
                    prop_assert!(seen.insert(k));
                    objects.insert(g2(k, &s).unwrap());
                }
                // composed map is a bijection on 1..N for fixed j
                prop_assert_eq!(objects.len(), n);
            }
            prop_assert_eq!(seen.len(), c * n);
        }

        #[test]
        fn targets_live_in_declared_slices(n in 2usize..=10, c in 1usize..=4) {
            let d = generate(&spec(n, c, true)).unwrap();
            for ex in &d.train {
                match ex.kind {
                    ExampleKind::OneHopFirst => {
                        let j = d.layout.rel1.iter().position(|&t| t == ex.tokens[1]).unwrap() + 1;
                        prop_assert!(d.layout.bridge_slice(j).contains(&ex.target));
                    }
                    ExampleKind::ZeroHop => prop_assert_eq!(ex.tokens[0], ex.target),
                    ExampleKind::OneHopSecond => {
                        prop_assert!(d.layout.objects.contains(&ex.target))
                    }
                    ExampleKind::TwoHop => unreachable!("no two-hop rows in default train"),
                }
            }
        }
    }
}
