//! Choice of the contrasting (premature) layer and per-layer diagnostics.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LayerLogitsStack;
use crate::numkit::{jsd, ProbDist};

/// Candidate layer ranges; the active one is searched for the contrasting layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketConfig {
    pub buckets: Vec<Range<usize>>,
    pub active_bucket: usize,
}

impl BucketConfig {
    /// Splits layers `0..layer_count` into `count` near-equal contiguous buckets.
    pub fn even(layer_count: usize, count: usize, active_bucket: usize) -> Result<Self> {
        if count == 0 || count > layer_count {
            return Err(Error::config(format!(
                "cannot split {layer_count} layers into {count} buckets"
            )));
        }
        let buckets = (0..count)
            .map(|i| i * layer_count / count..(i + 1) * layer_count / count)
            .collect();
        let cfg = Self {
            buckets,
            active_bucket,
        };
        cfg.validate(layer_count)?;
        Ok(cfg)
    }

    pub fn active(&self) -> Range<usize> {
        self.buckets[self.active_bucket].clone()
    }

    /// Buckets must be disjoint, ascending, below the final layer `layer_count`,
    /// and the active one non-empty.
    pub fn validate(&self, layer_count: usize) -> Result<()> {
        let active = self.buckets.get(self.active_bucket).ok_or_else(|| {
            Error::config(format!(
                "active bucket {} of {} buckets",
                self.active_bucket,
                self.buckets.len()
            ))
        })?;
        if active.is_empty() {
            return Err(Error::config("active bucket is empty"));
        }
        let mut floor = 0;
        for b in &self.buckets {
            if b.start > b.end || b.start < floor {
                return Err(Error::config(format!(
                    "bucket {}..{} overlaps or is out of order",
                    b.start, b.end
                )));
            }
            floor = b.end;
        }
        if floor > layer_count {
            return Err(Error::config(format!(
                "bucket reaches layer {floor}, beyond the last candidate {}",
                layer_count.saturating_sub(1)
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    MinEntropy,
    MaxEntropy,
    /// Highest divergence from the mature layer.
    #[serde(alias = "jsd")]
    JsdBaseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptKind {
    /// Open-ended prompts: contrast against the lowest-entropy layer.
    Open,
    /// Factual prompts: contrast against the highest-entropy layer.
    Factual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    strategy: Strategy,
    prompt_kind: PromptKind,
}

impl SelectionPolicy {
    /// Entropy selection implied by the prompt kind.
    pub fn for_prompt(kind: PromptKind) -> Self {
        let strategy = match kind {
            PromptKind::Open => Strategy::MinEntropy,
            PromptKind::Factual => Strategy::MaxEntropy,
        };
        Self {
            strategy,
            prompt_kind: kind,
        }
    }

    /// Validated pairing: an entropy strategy must agree with the prompt kind.
    /// A missing kind is inferred from the strategy (open for the JSD baseline).
    pub fn new(strategy: Strategy, prompt_kind: Option<PromptKind>) -> Result<Self> {
        let implied = match strategy {
            Strategy::MinEntropy => Some(PromptKind::Open),
            Strategy::MaxEntropy => Some(PromptKind::Factual),
            Strategy::JsdBaseline => None,
        };
        let prompt_kind = match (implied, prompt_kind) {
            (Some(i), Some(k)) if i != k => {
                return Err(Error::config(format!(
                    "strategy {strategy:?} contradicts prompt kind {k:?}"
                )))
            }
            (_, Some(k)) => k,
            (Some(i), None) => i,
            (None, None) => PromptKind::Open,
        };
        Ok(Self {
            strategy,
            prompt_kind,
        })
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn prompt_kind(&self) -> PromptKind {
        self.prompt_kind
    }
}

fn first_best(
    scores: impl Iterator<Item = (usize, f64)>,
    better: impl Fn(f64, f64) -> bool,
) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (layer, s) in scores {
        match best {
            Some((_, b)) if !better(s, b) => {}
            _ => best = Some((layer, s)),
        }
    }
    best.expect("non-empty bucket").0
}

/// Picks the contrasting layer from the active bucket. `mature` is the
/// distribution the JSD baseline measures against; `None` uses row `N`.
/// Ties resolve to the lowest layer.
pub fn select_contrast_layer(
    stack: &LayerLogitsStack,
    cfg: &BucketConfig,
    policy: &SelectionPolicy,
    mature: Option<&ProbDist>,
) -> Result<usize> {
    cfg.validate(stack.layer_count())?;
    let bucket = cfg.active();
    match policy.strategy {
        Strategy::MinEntropy | Strategy::MaxEntropy => {
            let entropies = bucket
                .clone()
                .map(|i| Ok((i, stack.probs(i)?.entropy())))
                .collect::<Result<Vec<_>>>()?;
            Ok(if policy.strategy == Strategy::MinEntropy {
                first_best(entropies.into_iter(), |a, b| a < b)
            } else {
                first_best(entropies.into_iter(), |a, b| a > b)
            })
        }
        Strategy::JsdBaseline => {
            let own;
            let mature = match mature {
                Some(m) => m,
                None => {
                    own = stack.mature()?;
                    &own
                }
            };
            let divergences = bucket
                .map(|i| Ok((i, jsd(mature, &stack.probs(i)?)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(first_best(divergences.into_iter(), |a, b| a > b))
        }
    }
}

/// One row of the per-layer report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiagnostic {
    pub layer: usize,
    pub entropy: f64,
    /// `(H_i - H_{i-1}) / H_{i-1}`; `None` at layer 0 or when `H_{i-1} = 0`.
    pub entropy_change_rate: Option<f64>,
    pub jsd_with_last: f64,
}

pub fn layer_diagnostics(stack: &LayerLogitsStack) -> Result<Vec<LayerDiagnostic>> {
    let dists = (0..=stack.layer_count())
        .map(|i| stack.probs(i))
        .collect::<Result<Vec<_>>>()?;
    let last = dists.last().expect("at least two rows");
    let mut out = Vec::with_capacity(dists.len());
    for (i, d) in dists.iter().enumerate() {
        let entropy = d.entropy();
        let entropy_change_rate = match i.checked_sub(1).map(|j| dists[j].entropy()) {
            Some(prev) if prev > 0.0 => Some((entropy - prev) / prev),
            _ => None,
        };
        out.push(LayerDiagnostic {
            layer: i,
            entropy,
            entropy_change_rate,
            jsd_with_last: jsd(d, last)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::softmax_f32;

    /// Row whose softmax has exactly the requested entropy, found by bisection
    /// over the sharpness of a two-level distribution.
    fn row_with_entropy(target: f64, width: usize) -> Vec<f32> {
        let (mut lo, mut hi) = (0.0f32, 40.0f32);
        let row = |s: f32| {
            let mut r = vec![0.0f32; width];
            r[0] = s;
            r
        };
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if softmax_f32(&row(mid)).unwrap().entropy() > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        row(0.5 * (lo + hi))
    }

    fn stack(rows: Vec<Vec<f32>>) -> LayerLogitsStack {
        LayerLogitsStack::from_rows(0, &rows).unwrap()
    }

    fn bucket(lo: usize, hi: usize) -> BucketConfig {
        BucketConfig {
            buckets: vec![lo..hi],
            active_bucket: 0,
        }
    }

    fn entropy_stack() -> LayerLogitsStack {
        // entropies at layers 1, 2, 3 are 2.0, 0.5, 1.0 (V = 16, ln 16 ≈ 2.77)
        stack(vec![
            vec![0.0; 16],
            row_with_entropy(2.0, 16),
            row_with_entropy(0.5, 16),
            row_with_entropy(1.0, 16),
            vec![0.0; 16],
        ])
    }

    #[test]
    fn entropy_strategies_pick_brute_force_extremes() {
        let s = entropy_stack();
        let b = bucket(1, 4);
        let entropies: Vec<f64> = (1..4).map(|i| s.probs(i).unwrap().entropy()).collect();
        assert!((entropies[0] - 2.0).abs() < 1e-5 && (entropies[1] - 0.5).abs() < 1e-5);
        let min = SelectionPolicy::for_prompt(PromptKind::Open);
        let max = SelectionPolicy::for_prompt(PromptKind::Factual);
        assert_eq!(select_contrast_layer(&s, &b, &min, None).unwrap(), 2);
        assert_eq!(select_contrast_layer(&s, &b, &max, None).unwrap(), 1);
    }

    #[test]
    fn identical_rows_pick_lowest_layer() {
        let row = vec![0.3f32, -1.0, 2.0, 0.0];
        let s = stack(vec![row.clone(); 6]);
        let b = BucketConfig {
            buckets: vec![0..2, 2..5],
            active_bucket: 1,
        };
        for strategy in [
            Strategy::MinEntropy,
            Strategy::MaxEntropy,
            Strategy::JsdBaseline,
        ] {
            let policy = SelectionPolicy::new(strategy, None).unwrap();
            assert_eq!(select_contrast_layer(&s, &b, &policy, None).unwrap(), 2);
        }
    }

    #[test]
    fn jsd_baseline_uses_supplied_mature() {
        let s = stack(vec![
            vec![5.0, 0.0, 0.0],
            vec![0.0, 5.0, 0.0],
            vec![0.0, 0.0, 5.0],
        ]);
        let b = bucket(0, 2);
        let policy = SelectionPolicy::new(Strategy::JsdBaseline, None).unwrap();
        let near_zero = softmax_f32(&[0.0, 5.0, 0.0]).unwrap();
        // against row 2 both candidates diverge equally: lowest wins
        assert_eq!(select_contrast_layer(&s, &b, &policy, None).unwrap(), 0);
        // against a distribution peaked like layer 1, layer 0 is farther
        assert_eq!(
            select_contrast_layer(&s, &b, &policy, Some(&near_zero)).unwrap(),
            0
        );
        let near_one = softmax_f32(&[5.0, 0.0, 0.0]).unwrap();
        assert_eq!(
            select_contrast_layer(&s, &b, &policy, Some(&near_one)).unwrap(),
            1
        );
    }

    #[test]
    fn policy_pairing() {
        assert!(SelectionPolicy::new(Strategy::MinEntropy, Some(PromptKind::Factual)).is_err());
        assert_eq!(
            SelectionPolicy::new(Strategy::MaxEntropy, None)
                .unwrap()
                .prompt_kind(),
            PromptKind::Factual
        );
        assert_eq!(
            SelectionPolicy::for_prompt(PromptKind::Open).strategy(),
            Strategy::MinEntropy
        );
    }

    #[test]
    fn bucket_validation() {
        assert!(bucket(0, 0).validate(4).is_err());
        assert!(bucket(0, 5).validate(4).is_err());
        assert!(bucket(0, 4).validate(4).is_ok());
        let overlapping = BucketConfig {
            buckets: vec![0..3, 2..4],
            active_bucket: 0,
        };
        assert!(overlapping.validate(4).is_err());
        let missing = BucketConfig {
            buckets: vec![0..3],
            active_bucket: 1,
        };
        assert!(missing.validate(4).is_err());
        let even = BucketConfig::even(32, 2, 1).unwrap();
        assert_eq!(even.buckets, vec![0..16, 16..32]);
        let s = entropy_stack();
        let policy = SelectionPolicy::for_prompt(PromptKind::Open);
        assert!(matches!(
            select_contrast_layer(&s, &bucket(2, 2), &policy, None),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn diagnostics_examples() {
        let same = stack(vec![vec![0.1, 0.7, -0.2]; 4]);
        for d in layer_diagnostics(&same).unwrap() {
            assert_eq!(d.jsd_with_last, 0.0);
            if d.layer > 0 {
                assert_eq!(d.entropy_change_rate, Some(0.0));
            }
        }
        // H = [ln 4, ln 2]
        let two = stack(vec![vec![0.0; 4], vec![0.0, 0.0, -1e4, -1e4]]);
        let rep = layer_diagnostics(&two).unwrap();
        assert_eq!(rep.len(), 2);
        assert_eq!(rep[0].entropy_change_rate, None);
        assert!((rep[1].entropy_change_rate.unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_entropy_parent_gives_no_rate() {
        let s = stack(vec![vec![0.0, -1e4], vec![0.0, 0.0]]);
        let rep = layer_diagnostics(&s).unwrap();
        assert_eq!(rep[0].entropy, 0.0);
        assert_eq!(rep[1].entropy_change_rate, None);
    }

    mod props {
        use super::*;
        use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, Just, Strategy as _};
        use proptest::strategy::BoxedStrategy;

        fn random_stack() -> BoxedStrategy<LayerLogitsStack> {
            (3usize..10, 2usize..24)
                .prop_flat_map(|(layers, v)| {
                    prop::collection::vec(-8.0f32..8.0, (layers + 1) * v)
                        .prop_map(move |d| LayerLogitsStack::from_flat(0, v, d).unwrap())
                })
                .boxed()
        }

        fn random_bucket(n: usize) -> BoxedStrategy<BucketConfig> {
            (0..n)
                .prop_flat_map(move |lo| (lo + 1..=n).prop_map(move |hi| bucket(lo, hi)))
                .boxed()
        }

        proptest! {
            #[test]
            fn selection_stays_in_bucket_and_matches_brute_force(
                (s, b) in random_stack().prop_flat_map(|s| { let n = s.layer_count(); (Just(s), random_bucket(n)) })
            ) {
                let mature = s.mature().unwrap();
                let mut brute_jsd = (b.active().start, f64::MIN);
                let mut brute_min = (b.active().start, f64::MAX);
                let mut brute_max = (b.active().start, f64::MIN);
                for i in b.active() {
                    let d = s.probs(i).unwrap();
                    let j = jsd(&mature, &d).unwrap();
                    if j > brute_jsd.1 { brute_jsd = (i, j); }
                    if d.entropy() < brute_min.1 { brute_min = (i, d.entropy()); }
                    if d.entropy() > brute_max.1 { brute_max = (i, d.entropy()); }
                }
                let pick = |st| select_contrast_layer(&s, &b, &SelectionPolicy::new(st, None).unwrap(), None).unwrap();
                prop_assert_eq!(pick(Strategy::JsdBaseline), brute_jsd.0);
                prop_assert_eq!(pick(Strategy::MinEntropy), brute_min.0);
                prop_assert_eq!(pick(Strategy::MaxEntropy), brute_max.0);
                prop_assert!(b.active().contains(&pick(Strategy::MinEntropy)));
            }

            #[test]
            fn entropy_selection_ignores_logit_shift(s in random_stack(), shift in -20.0f32..20.0) {
                let n = s.layer_count();
                let shifted = LayerLogitsStack::from_flat(0, s.vocab_size(), s.as_flat().iter().map(|x| x + shift).collect()).unwrap();
                let b = bucket(0, n);
                for kind in [PromptKind::Open, PromptKind::Factual] {
                    let p = SelectionPolicy::for_prompt(kind);
                    let a = select_contrast_layer(&s, &b, &p, None).unwrap();
                    let c = select_contrast_layer(&shifted, &b, &p, None).unwrap();
                    // f32 rounding of the shift can only matter on near-ties
                    if a != c {
                        let ea = s.probs(a).unwrap().entropy();
                        let ec = s.probs(c).unwrap().entropy();
                        prop_assert!((ea - ec).abs() < 1e-5);
                    }
                }
            }

            #[test]
            fn min_equals_max_only_when_entropies_equal(s in random_stack()) {
                let b = bucket(0, s.layer_count());
                let lo = select_contrast_layer(&s, &b, &SelectionPolicy::for_prompt(PromptKind::Open), None).unwrap();
                let hi = select_contrast_layer(&s, &b, &SelectionPolicy::for_prompt(PromptKind::Factual), None).unwrap();
                let hs: Vec<f64> = b.active().map(|i| s.probs(i).unwrap().entropy()).collect();
                let all_equal = hs.iter().all(|h| *h == hs[0]);
                prop_assert_eq!(lo == hi, all_equal);
            }

            #[test]
            fn diagnostics_match_recomputation(s in random_stack()) {
                let rep = layer_diagnostics(&s).unwrap();
                prop_assert_eq!(rep.len(), s.layer_count() + 1);
                let last = s.mature().unwrap();
                for (i, d) in rep.iter().enumerate() {
                    let h = crate::numkit::entropy(&s.probs(i).unwrap());
                    prop_assert_eq!(d.entropy, h);
                    prop_assert_eq!(d.jsd_with_last, jsd(&s.probs(i).unwrap(), &last).unwrap());
                    if i > 0 {
                        let prev = crate::numkit::entropy(&s.probs(i - 1).unwrap());
                        prop_assert_eq!(d.entropy_change_rate, Some((h - prev) / prev));
                    }
                }
            }
        }
    }
}
