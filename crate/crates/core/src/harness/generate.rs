use serde::{Deserialize, Serialize};

use super::config::{RunConfig, RunMode};
use crate::decode::{Decoder, StepLog};
use crate::error::Result;
use crate::model::{Provider, TokenId, Trace};

/// A greedy continuation with its per-step provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub prompt: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub steps: Vec<StepLog>,
}

/// Greedy decoding over the contrast scores. Stops after `max_new_tokens`
/// or right after emitting `end_token`. When `recorder` is given, every
/// stack is appended to it with the token chosen from it.
pub fn greedy_generate(
    provider: &mut Provider,
    decoder: &mut Decoder,
    prompt: &[TokenId],
    max_new_tokens: usize,
    end_token: Option<TokenId>,
    mut recorder: Option<&mut Trace>,
) -> Result<Generation> {
    decoder.reset();
    let mut out = Generation {
        prompt: prompt.to_vec(),
        tokens: Vec::new(),
        steps: Vec::new(),
    };
    if max_new_tokens == 0 {
        return Ok(out);
    }
    let mut session = provider.open(prompt)?;
    for i in 0..max_new_tokens {
        let stack = session
            .next_layer_logits(out.tokens.last().copied())
            .map_err(|e| e.at_step(i))?;
        let r = decoder
            .step(&stack, &out.tokens)
            .map_err(|e| e.at_step(i))?;
        let token = r.argmax() as TokenId;
        if let Some(t) = recorder.as_deref_mut() {
            t.push(&stack, token)?;
        }
        out.steps.push(StepLog {
            step: i,
            token,
            score: r.scores[token as usize],
            contrast_layer: r.contrast_layer,
            triggered: r.extrapolation_triggered,
            plausible_set_size: r.plausible_set_size,
        });
        out.tokens.push(token);
        if Some(token) == end_token {
            break;
        }
    }
    Ok(out)
}

/// Builds the provider and decoder from `cfg` and continues each prompt.
pub fn generate(cfg: &RunConfig, prompts: &[Vec<TokenId>]) -> Result<Vec<Generation>> {
    cfg.validate(RunMode::Generate)?;
    let mut provider = cfg.build_provider()?;
    let mut decoder = Decoder::new(cfg.decoder_config(provider.layer_count(), RunMode::Generate)?);
    prompts
        .iter()
        .map(|p| {
            greedy_generate(
                &mut provider,
                &mut decoder,
                p,
                cfg.max_new_tokens,
                cfg.end_token,
                None,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{TinyConfig, TinyModel};
    use crate::numkit::argmax;

    fn small() -> RunConfig {
        RunConfig {
            model: TinyConfig {
                layers: 4,
                model_dim: 8,
                vocab_size: 16,
                ..TinyConfig::default()
            },
            extrapolation: crate::extrapolate::ExtrapolationConfig {
                e_start: 2,
                e_end: 4,
                e_infer: 6,
                ..Default::default()
            },
            max_new_tokens: 6,
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_tokens_is_empty() {
        let cfg = RunConfig {
            max_new_tokens: 0,
            ..small()
        };
        let g = generate(&cfg, &[vec![1, 2]]).unwrap();
        assert!(g[0].tokens.is_empty() && g[0].steps.is_empty());
    }

    #[test]
    fn double_run_is_identical() {
        let a = generate(&small(), &[vec![1, 2, 3]]).unwrap();
        let b = generate(&small(), &[vec![1, 2, 3]]).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert_eq!(a[0].tokens.len(), 6);
    }

    #[test]
    fn unreachable_alpha_equals_bypassed_extrapolation() {
        let mut never = small();
        never.extrapolation.alpha = 1e9;
        let mut off = small();
        off.extrapolation.enabled = false;
        let prompts = [vec![3, 1, 4], vec![1, 5]];
        let a = generate(&never, &prompts).unwrap();
        let b = generate(&off, &prompts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn passthrough_is_plain_greedy() {
        let cfg = RunConfig {
            passthrough: true,
            ..small()
        };
        let g = generate(&cfg, &[vec![2, 7]]).unwrap();
        let model = TinyModel::new(cfg.model.clone()).unwrap();
        let mut ctx = vec![2, 7];
        for &t in &g[0].tokens {
            let logits: Vec<f64> = model
                .forward_logits(&ctx)
                .unwrap()
                .iter()
                .map(|&x| x.into())
                .collect();
            assert_eq!(argmax(&logits) as u32, t);
            ctx.push(t);
        }
    }

    #[test]
    fn end_token_stops_generation() {
        let first = generate(&small(), &[vec![1, 2, 3]]).unwrap()[0].tokens[0];
        let cfg = RunConfig {
            end_token: Some(first),
            ..small()
        };
        assert_eq!(
            generate(&cfg, &[vec![1, 2, 3]]).unwrap()[0].tokens,
            vec![first]
        );
    }

    #[test]
    fn recorded_run_replays() {
        let cfg = small();
        let mut live = cfg.build_provider().unwrap();
        let dcfg = cfg.decoder_config(4, RunMode::Generate).unwrap();
        let mut trace = Trace::new(4, 16).unwrap();
        let a = greedy_generate(
            &mut live,
            &mut Decoder::new(dcfg.clone()),
            &[5, 6],
            5,
            None,
            Some(&mut trace),
        )
        .unwrap();
        let mut replay = Provider::Replay(crate::model::TraceReplay::new(trace));
        let b =
            greedy_generate(&mut replay, &mut Decoder::new(dcfg), &[5, 6], 5, None, None).unwrap();
        assert_eq!(a, b);
    }
}
