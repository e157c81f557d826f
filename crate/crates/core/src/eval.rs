//! Held-out perplexity and next-token accuracy.

use crate::autodiff::Real;
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::model::{logits_with, Architecture, ModelConfig, ParamTree};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EvalResult {
    /// Mean token negative log-likelihood (nats).
    pub nll: f64,
    pub ppl: f64,
    /// Fraction of scored positions whose argmax equals the target.
    pub accuracy: f64,
    pub tokens: usize,
}

fn check_vocab(cfg: &ModelConfig, b: &TokenBatch) -> Result<()> {
    let bad_in = b.inputs.iter().find(|&&t| t >= cfg.vocab);
    let bad_tgt = b.targets.iter().flatten().find(|&&t| t >= cfg.vocab);
    match bad_in.or(bad_tgt) {
        Some(t) => Err(Error::invalid(format!(
            "token {t} outside the model vocabulary of {}",
            cfg.vocab
        ))),
        None => Ok(()),
    }
}

/// `exp(mean NLL)` over every scored position of `batches`.
pub fn evaluate<T: Real>(arch: &Architecture, weights: &ParamTree<T>, batches: &[TokenBatch]) -> Result<EvalResult> {
    let cfg = match arch {
        Architecture::Transformer(c) => c,
        Architecture::Mlp(_) => return Err(Error::invalid("perplexity needs a language model")),
    };
    let mut nll = 0.0f64;
    let mut correct = 0usize;
    let mut tokens = 0usize;
    for b in batches {
        check_vocab(cfg, b)?;
        let logits = logits_with(arch, weights, b)?;
        let v = cfg.vocab;
        for (row, target) in logits.data().chunks(v).zip(&b.targets) {
            let Some(t) = *target else { continue };
            let row: Vec<f64> = row.iter().map(|x| x.as_f64()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            nll += lse - row[t];
            // first maximal index, so ties resolve deterministically
            let argmax = row
                .iter()
                .enumerate()
                .fold(0, |best, (i, &x)| if x > row[best] { i } else { best });
            correct += usize::from(argmax == t);
            tokens += 1;
        }
    }
    if tokens == 0 {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mean = nll / tokens as f64;
    if !mean.is_finite() {
        return Err(Error::Numeric(format!("non-finite evaluation loss {mean}")));
    }
    Ok(EvalResult {
        nll: mean,
        ppl: mean.exp(),
        accuracy: correct as f64 / tokens as f64,
        tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_transformer;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab: 256,
            dim: 16,
            heads: 2,
            blocks: 1,
            ff_mult: 2,
            context: 8,
            seed: 1,
        }
    }

    fn batch(ids: &[usize]) -> TokenBatch {
        TokenBatch {
            batch: 1,
            seq: ids.len() - 1,
            inputs: ids[..ids.len() - 1].to_vec(),
            targets: ids[1..].iter().map(|&t| Some(t)).collect(),
        }
    }

    #[test]
    fn uniform_model_is_near_vocab_size() {
        let m = build_transformer::<f32>(&cfg()).unwrap();
        let mut p = m.params.clone();
        for name in ["lm_head.w", "lm_head.b"] {
            p.get_mut(name).unwrap().tensor.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let r = evaluate(&m.arch, &p, &[batch(&[1, 2, 3, 4, 5, 6, 7, 8, 9])]).unwrap();
        assert!((r.ppl - 256.0).abs() / 256.0 < 0.02, "{}", r.ppl);
        let r = evaluate(&m.arch, &m.params, &[batch(&[1, 2, 3, 4, 5, 6, 7, 8, 9])]).unwrap();
        assert!((r.ppl - 256.0).abs() / 256.0 < 0.02, "{}", r.ppl);
    }

    #[test]
    fn confident_correct_model_approaches_one() {
        let m = build_transformer::<f64>(&cfg()).unwrap();
        let mut p = m.params.clone();
        p.get_mut("lm_head.b").unwrap().tensor.data_mut()[7] = 100.0;
        let r = evaluate(&m.arch, &p, &[batch(&[7; 9])]).unwrap();
        assert!(r.ppl < 1.0 + 1e-9);
        assert_eq!(r.accuracy, 1.0);
    }

    #[test]
    fn deterministic_and_checks_vocab() {
        let m = build_transformer::<f32>(&cfg()).unwrap();
        let b = [batch(&[3, 1, 4, 1, 5, 9, 2, 6, 5])];
        let a = evaluate(&m.arch, &m.params, &b).unwrap();
        let c = evaluate(&m.arch, &m.params, &b).unwrap();
        assert_eq!(a.ppl.to_bits(), c.ppl.to_bits());
        assert!(evaluate(&m.arch, &m.params, &[batch(&[1, 300])]).is_err());
    }
}
