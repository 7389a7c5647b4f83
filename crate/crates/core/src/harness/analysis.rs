use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::dataset::AnalysisItem;
use crate::error::{Error, Result};
use crate::model::Provider;
use crate::select::layer_diagnostics;

/// Per-layer means over all answer-token positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub layer: usize,
    pub mean_entropy: f64,
    /// Mean over the positions where the rate is defined.
    pub mean_entropy_change_rate: Option<f64>,
    pub mean_jsd_with_last: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub rows: Vec<LayerSummary>,
    pub positions: usize,
    pub items_used: usize,
    pub items_skipped: usize,
}

impl AnalysisReport {
    pub const CSV_HEADER: &'static str =
        "layer,mean_entropy,mean_entropy_change_rate,mean_jsd_with_last";

    /// One line per layer; the change rate is blank where undefined.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let rate = r
                .mean_entropy_change_rate
                .map(|x| x.to_string())
                .unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{}",
                r.layer, r.mean_entropy, rate, r.mean_jsd_with_last
            )
            .unwrap();
        }
        out
    }
}

#[derive(Default, Clone)]
struct Acc {
    entropy: f64,
    rate: f64,
    rate_n: usize,
    jsd: f64,
}

/// Feeds each question+answer sequence through `provider` and averages the
/// layer diagnostics of every position that predicts an answer token. Items
/// whose answer range or tokens are invalid are skipped and counted.
pub fn layer_analysis(provider: &mut Provider, items: &[AnalysisItem]) -> Result<AnalysisReport> {
    let vocab = provider.vocab_size();
    let layers = provider.layer_count();
    let mut acc = vec![Acc::default(); layers + 1];
    let (mut positions, mut used, mut skipped) = (0usize, 0usize, 0usize);
    for item in items {
        let Ok((tokens, range)) = item.resolve(vocab) else {
            skipped += 1;
            continue;
        };
        if tokens.iter().any(|&t| t as usize >= vocab) {
            skipped += 1;
            continue;
        }
        let mut session = provider.open(&tokens[..range.start])?;
        for (i, pos) in range.clone().enumerate() {
            let prev = (i > 0).then(|| tokens[pos - 1]);
            let stack = session.next_layer_logits(prev).map_err(|e| e.at_step(i))?;
            for d in layer_diagnostics(&stack)? {
                let a = &mut acc[d.layer];
                a.entropy += d.entropy;
                a.jsd += d.jsd_with_last;
                if let Some(r) = d.entropy_change_rate {
                    a.rate += r;
                    a.rate_n += 1;
                }
            }
            positions += 1;
        }
        used += 1;
    }
    if positions == 0 {
        return Err(Error::Data(format!(
            "no usable analysis items ({skipped} skipped)"
        )));
    }
    let n = positions as f64;
    let rows = acc
        .iter()
        .enumerate()
        .map(|(layer, a)| LayerSummary {
            layer,
            mean_entropy: a.entropy / n,
            mean_entropy_change_rate: (a.rate_n > 0).then(|| a.rate / a.rate_n as f64),
            mean_jsd_with_last: a.jsd / n,
        })
        .collect();
    Ok(AnalysisReport {
        rows,
        positions,
        items_used: used,
        items_skipped: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LayerLogitsStack, Trace, TraceReplay};
    use crate::numkit::{entropy, jsd, softmax_f32};

    fn replay_of(stacks: &[Vec<Vec<f32>>], chosen: &[u32]) -> Provider {
        let mut t = Trace::new(stacks[0].len() - 1, stacks[0][0].len()).unwrap();
        for (rows, &c) in stacks.iter().zip(chosen) {
            t.push(&LayerLogitsStack::from_rows(0, rows).unwrap(), c)
                .unwrap();
        }
        Provider::Replay(TraceReplay::new(t))
    }

    fn item(prompt: Vec<u32>, answer: Vec<u32>) -> AnalysisItem {
        AnalysisItem {
            prompt: prompt.into(),
            answer: Some(answer.into()),
            answer_range: None,
        }
    }

    #[test]
    fn identical_layers_give_zero_rates() {
        let row = vec![0.3f32, -1.0, 2.0, 0.5];
        let stack = vec![row.clone(); 4];
        let mut p = replay_of(&[stack.clone(), stack], &[2, 1]);
        let r = layer_analysis(&mut p, &[item(vec![0], vec![2, 1])]).unwrap();
        assert_eq!(r.rows.len(), 4);
        assert_eq!(r.rows[0].mean_entropy_change_rate, None);
        assert!(r.rows[1..]
            .iter()
            .all(|x| x.mean_entropy_change_rate == Some(0.0)));
        assert!(r.rows.iter().all(|x| x.mean_jsd_with_last == 0.0));
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), 5);
        assert!(
            csv.lines().nth(1).unwrap().starts_with("0,")
                && csv.lines().nth(1).unwrap().contains(",,")
        );
    }

    #[test]
    fn means_match_direct_recomputation() {
        let stacks: Vec<Vec<Vec<f32>>> = (0..3)
            .map(|s| {
                (0..4)
                    .map(|l| {
                        (0..5)
                            .map(|v| ((s * 31 + l * 7 + v * 3) as f32 * 0.37).sin() * 2.0)
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let mut p = replay_of(&stacks, &[1, 4, 0]);
        let r = layer_analysis(&mut p, &[item(vec![3, 3], vec![1, 4, 0])]).unwrap();
        assert_eq!(r.positions, 3);
        for layer in 0..4 {
            let mut e = 0.0;
            let mut j = 0.0;
            for s in &stacks {
                let d = softmax_f32(&s[layer]).unwrap();
                e += entropy(&d);
                j += jsd(&d, &softmax_f32(&s[3]).unwrap()).unwrap();
            }
            assert!((r.rows[layer].mean_entropy - e / 3.0).abs() < 1e-12);
            assert!((r.rows[layer].mean_jsd_with_last - j / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bad_items_are_skipped() {
        let row = vec![0.0f32, 1.0];
        let mut p = replay_of(&[vec![row.clone(), row]], &[1]);
        let bad = AnalysisItem {
            prompt: vec![1, 1].into(),
            answer: None,
            answer_range: Some([0, 5]),
        };
        let r = layer_analysis(
            &mut p,
            &[bad.clone(), item(vec![7], vec![1]), item(vec![0], vec![1])],
        )
        .unwrap();
        assert_eq!((r.items_used, r.items_skipped), (1, 2));
        let mut p = replay_of(&[vec![vec![0.0, 1.0]; 2]], &[1]);
        assert!(layer_analysis(&mut p, &[bad]).is_err());
    }
}
